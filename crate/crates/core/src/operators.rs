//! The two surrogate architectures.
//!
//! DeepONet: a ReLU branch MLP encodes (pooled SDF, Re) into 3p latent
//! coefficients, a ReLU trunk MLP maps each query point to 3p features,
//! and each velocity component is the dot product of its p-wide head.
//!
//! Geometric-DeepONet: stage 1 fuses a p-vector branch code with a
//! p-vector trunk feature (the trunk also sees the pointwise SDF) by an
//! elementwise product; stage 2 runs a ReLU branch MLP and a SIREN trunk
//! MLP on the fused feature and applies the same per-component dot-product
//! fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{downsample_sdf, DataSample};
use crate::error::{Error, Result};

/// Reynolds numbers are scaled by the dataset maximum.
pub const REYNOLDS_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    DeepOnet,
    Geometric,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deeponet" => Ok(Variant::DeepOnet),
            "geometric" => Ok(Variant::Geometric),
            other => Err(Error::Config(format!(
                "unknown model variant '{other}' (use 'deeponet' or 'geometric')"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::DeepOnet => "deeponet",
            Variant::Geometric => "geometric",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorConfig {
    pub variant: Variant,
    pub branch_layers: Vec<usize>,
    pub trunk_layers: Vec<usize>,
    /// Latent basis dimension p.
    pub modes: usize,
    /// SDF pooling target per axis; the branch input is pool^3 + 1 wide.
    pub branch_pool: usize,
    pub siren_omega0: f64,
    /// Swap the stage-2 trunk's sine activation for ReLU (ablation).
    pub stage2_siren: bool,
}

impl OperatorConfig {
    pub fn deeponet() -> Self {
        OperatorConfig {
            variant: Variant::DeepOnet,
            ..Self::geometric()
        }
    }

    pub fn geometric() -> Self {
        OperatorConfig {
            variant: Variant::Geometric,
            branch_layers: vec![512, 512, 512],
            trunk_layers: vec![256, 256, 256],
            modes: 128,
            branch_pool: 8,
            siren_omega0: 30.0,
            stage2_siren: true,
        }
    }

    pub const N_OUTPUTS: usize = 3;

    pub fn branch_input_dim(&self) -> usize {
        self.branch_pool.pow(3) + 1
    }

    pub fn trunk_input_dim(&self) -> usize {
        match self.variant {
            Variant::DeepOnet => 3,
            Variant::Geometric => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Config("modes must be >= 1".into()));
        }
        if self.branch_pool == 0 {
            return Err(Error::Config("branch pool must be >= 1".into()));
        }
        if self.branch_layers.iter().any(|&w| w == 0) || self.trunk_layers.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if !(self.siren_omega0 > 0.0) {
            return Err(Error::Config(format!(
                "siren frequency must be positive, got {}",
                self.siren_omega0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fan_out: usize,
    pub fan_in: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct NetSpec {
    name: &'static str,
    input: usize,
    hidden: Vec<usize>,
    output: usize,
    siren: bool,
}

/// All trainable weights and biases of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: OperatorConfig,
    nets: Vec<(String, Vec<LayerParams>)>,
}

fn net_specs(config: &OperatorConfig) -> Vec<NetSpec> {
    let p = config.modes;
    let out = OperatorConfig::N_OUTPUTS * p;
    let b_in = config.branch_input_dim();
    let bl = config.branch_layers.clone();
    let tl = config.trunk_layers.clone();
    match config.variant {
        Variant::DeepOnet => vec![
            NetSpec {
                name: "branch",
                input: b_in,
                hidden: bl,
                output: out,
                siren: false,
            },
            NetSpec {
                name: "trunk",
                input: 3,
                hidden: tl,
                output: out,
                siren: false,
            },
        ],
        Variant::Geometric => vec![
            NetSpec {
                name: "branch1",
                input: b_in,
                hidden: bl.clone(),
                output: p,
                siren: false,
            },
            NetSpec {
                name: "trunk1",
                input: 4,
                hidden: tl.clone(),
                output: p,
                siren: false,
            },
            NetSpec {
                name: "branch2",
                input: p,
                hidden: bl,
                output: out,
                siren: false,
            },
            NetSpec {
                name: "trunk2",
                input: p,
                hidden: tl,
                output: out,
                siren: config.stage2_siren,
            },
        ],
    }
}

/// Deterministic initialization: ReLU layers draw weights uniformly from
/// +-sqrt(6/fan_in); SIREN nets use +-1/fan_in on their first layer and
/// +-sqrt(6/fan_in)/omega0 on the rest. Biases start at zero.
pub fn init_params(config: &OperatorConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = Vec::new();
    for spec in net_specs(config) {
        let mut dims = vec![spec.input];
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.output);
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = if spec.siren {
                if l == 0 {
                    1.0 / fan_in as f64
                } else {
                    (6.0 / fan_in as f64).sqrt() / config.siren_omega0
                }
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(LayerParams {
                fan_out,
                fan_in,
                w,
                b: vec![0.0; fan_out],
            });
        }
        nets.push((spec.name.to_string(), layers));
    }
    Ok(ModelParams {
        config: config.clone(),
        nets,
    })
}

impl ModelParams {
    pub fn nets(&self) -> &[(String, Vec<LayerParams>)] {
        &self.nets
    }

    /// Flat views of every parameter tensor, in registration order
    /// (per net: layer 0 weights, layer 0 biases, layer 1 weights, ...).
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (_, layers) in &self.nets {
            for l in layers {
                out.push(l.w.as_slice());
                out.push(l.b.as_slice());
            }
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for (_, layers) in &mut self.nets {
            for l in layers {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out
    }

    /// Names matching [`ModelParams::flat`], e.g. `branch.0.w`.
    pub fn flat_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, layers) in &self.nets {
            for (i, _) in layers.iter().enumerate() {
                out.push(format!("{name}.{i}.w"));
                out.push(format!("{name}.{i}.b"));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flat()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Registers every tensor as a trainable leaf on the tape.
    pub fn register(&self, tape: &mut Tape) -> Result<TapeModel> {
        let mut nets = Vec::new();
        for (_, layers) in &self.nets {
            let mut vars = Vec::new();
            for l in layers {
                let w = tape.leaf(&[l.fan_out, l.fan_in], l.w.clone(), true)?;
                let b = tape.leaf(&[l.fan_out], l.b.clone(), true)?;
                vars.push((w, b));
            }
            nets.push(vars);
        }
        Ok(TapeModel {
            config: self.config.clone(),
            nets,
        })
    }
}

/// Model parameters registered on a tape.
pub struct TapeModel {
    config: OperatorConfig,
    nets: Vec<Vec<(Var, Var)>>,
}

#[derive(Clone, Copy)]
enum Activation {
    Relu,
    Sine(f64),
}

impl TapeModel {
    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    fn mlp(&self, tape: &mut Tape, net: usize, mut x: Var, act: Activation) -> Result<Var> {
        let layers = &self.nets[net];
        for (i, &(w, b)) in layers.iter().enumerate() {
            x = tape.affine(x, w, b)?;
            if i + 1 < layers.len() {
                x = match act {
                    Activation::Relu => tape.relu(x),
                    Activation::Sine(w0) => tape.sine(x, w0)?,
                };
            }
        }
        Ok(x)
    }

    /// Runs the model on one sample's branch vector and query points.
    /// `coords` are domain coordinates in `[0,2]^3` (normalized to
    /// `[-1,1]^3` internally); the geometric variant additionally needs the
    /// pointwise SDF. Returns the `[n, 3]` velocity matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        branch_vec: &[f64],
        coords: &[[f64; 3]],
        sdf_at_points: Option<&[f64]>,
    ) -> Result<Var> {
        let expected = self.config.branch_input_dim();
        if branch_vec.len() != expected {
            return Err(Error::Config(format!(
                "branch vector has {} entries, config wants {expected}",
                branch_vec.len()
            )));
        }
        let n = coords.len();
        let tin = self.config.trunk_input_dim();
        let sdf = match (self.config.variant, sdf_at_points) {
            (Variant::DeepOnet, _) => None,
            (Variant::Geometric, Some(s)) if s.len() == n => Some(s),
            (Variant::Geometric, Some(s)) => {
                return Err(Error::Config(format!(
                    "pointwise SDF has {} entries for {n} query points",
                    s.len()
                )))
            }
            (Variant::Geometric, None) => {
                return Err(Error::Config(
                    "geometric variant needs the pointwise SDF trunk channel".into(),
                ))
            }
        };
        let mut trunk_in = Vec::with_capacity(n * tin);
        for (i, c) in coords.iter().enumerate() {
            trunk_in.extend_from_slice(&[c[0] - 1.0, c[1] - 1.0, c[2] - 1.0]);
            if let Some(s) = sdf {
                trunk_in.push(s[i]);
            }
        }
        let branch_in = tape.constant(&[expected], branch_vec.to_vec())?;
        let trunk_in = tape.constant(&[n, tin], trunk_in)?;

        match self.config.variant {
            Variant::DeepOnet => {
                let b = self.mlp(tape, 0, branch_in, Activation::Relu)?;
                let t = self.mlp(tape, 1, trunk_in, Activation::Relu)?;
                tape.dot_fusion(b, t, OperatorConfig::N_OUTPUTS)
            }
            Variant::Geometric => {
                let b1 = self.mlp(tape, 0, branch_in, Activation::Relu)?;
                let t1 = self.mlp(tape, 1, trunk_in, Activation::Relu)?;
                let fused = tape.row_mul(b1, t1)?;
                let b2 = self.mlp(tape, 2, fused, Activation::Relu)?;
                let t2_act = if self.config.stage2_siren {
                    Activation::Sine(self.config.siren_omega0)
                } else {
                    Activation::Relu
                };
                let t2 = self.mlp(tape, 3, fused, t2_act)?;
                let prod = tape.mul(b2, t2)?;
                tape.head_sum(prod, OperatorConfig::N_OUTPUTS)
            }
        }
        .map(|v| {
            debug_assert_eq!(tape.shape(v), &[n, OperatorConfig::N_OUTPUTS]);
            v
        })
    }
}

/// A model checkpoint: parameters plus run identity. `extras` carries
/// free-form provenance entries (e.g. the training loss id).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub epoch: usize,
    pub extras: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn meta_text(config: &OperatorConfig, seed: u64, epoch: usize, extras: &[(&str, &str)]) -> String {
    let list = |v: &[usize]| {
        format!(
            "[{}]",
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        )
    };
    format!(
        "variant = \"{}\"\nbranch_layers = {}\ntrunk_layers = {}\nmodes = {}\n\
         branch_pool = {}\nsiren_omega0 = {}\nstage2_siren = {}\nseed = {}\nepoch = {}\n",
        config.variant,
        list(&config.branch_layers),
        list(&config.trunk_layers),
        config.modes,
        config.branch_pool,
        config.siren_omega0,
        config.stage2_siren,
        seed,
        epoch
    ) + &extras
        .iter()
        .map(|(k, v)| format!("{k} = \"{v}\"\n"))
        .collect::<String>()
}

fn meta_value<'a>(meta: &'a str, key: &str) -> Result<&'a str> {
    meta.lines()
        .find_map(|line| {
            let (k, v) = line.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("checkpoint metadata is missing '{key}'"),
        })
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("expected a list, got '{v}'"),
        })?;
    inner
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Format {
                offset: 0,
                msg: format!("bad list entry '{s}'"),
            })
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim_matches('"').parse().map_err(|_| Error::Format {
        offset: 0,
        msg: format!("bad value '{v}' for '{key}'"),
    })
}

/// Writes the checkpoint container: one NPY entry per parameter tensor
/// plus a `meta.toml` text record with the configuration, seed and epoch.
pub fn save_checkpoint(
    path: &std::path::Path,
    params: &ModelParams,
    seed: u64,
    epoch: usize,
    extras: &[(&str, &str)],
) -> Result<()> {
    let names = params.flat_names();
    let mut holders = Vec::new();
    for (name, layers) in params.nets() {
        for (i, l) in layers.iter().enumerate() {
            holders.push((
                format!("{name}.{i}.w"),
                crate::data::NpyArray::new(vec![l.fan_out, l.fan_in], l.w.clone())?,
            ));
            holders.push((
                format!("{name}.{i}.b"),
                crate::data::NpyArray::new(vec![l.fan_out], l.b.clone())?,
            ));
        }
    }
    debug_assert_eq!(holders.len(), names.len());
    let arrays: Vec<(&str, &crate::data::NpyArray)> = holders
        .iter()
        .map(|(name, arr)| (name.as_str(), arr))
        .collect();
    let meta = meta_text(&params.config, seed, epoch, extras);
    crate::data::write_npz(path, &arrays, &[("meta.toml", &meta)], false)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let contents = crate::data::read_npz(path)?;
    let meta = contents.text("meta.toml").ok_or_else(|| Error::Format {
        offset: 0,
        msg: "checkpoint lacks the meta.toml record".into(),
    })?;
    let config = OperatorConfig {
        variant: parse_scalar(meta_value(meta, "variant")?, "variant")?,
        branch_layers: parse_list(meta_value(meta, "branch_layers")?)?,
        trunk_layers: parse_list(meta_value(meta, "trunk_layers")?)?,
        modes: parse_scalar(meta_value(meta, "modes")?, "modes")?,
        branch_pool: parse_scalar(meta_value(meta, "branch_pool")?, "branch_pool")?,
        siren_omega0: parse_scalar(meta_value(meta, "siren_omega0")?, "siren_omega0")?,
        stage2_siren: parse_scalar(meta_value(meta, "stage2_siren")?, "stage2_siren")?,
    };
    let seed = parse_scalar(meta_value(meta, "seed")?, "seed")?;
    let epoch = parse_scalar(meta_value(meta, "epoch")?, "epoch")?;
    let mut params = init_params(&config, 0)?;
    let names = params.flat_names();
    {
        let mut flat = params.flat_mut();
        for (name, slot) in names.iter().zip(flat.iter_mut()) {
            let arr = contents.array(name).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("checkpoint lacks tensor '{name}'"),
            })?;
            if arr.data.len() != slot.len() {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!(
                        "tensor '{name}' has {} values, config wants {}",
                        arr.data.len(),
                        slot.len()
                    ),
                });
            }
            **slot = arr.data.clone();
        }
    }
    let known = ["variant", "branch_layers", "trunk_layers", "modes", "branch_pool", "siren_omega0", "stage2_siren", "seed", "epoch"];
    let extras = meta
        .lines()
        .filter_map(|line| {
            let (k, v) = line.split_once('=')?;
            let k = k.trim();
            (!known.contains(&k))
                .then(|| (k.to_string(), v.trim().trim_matches('"').to_string()))
        })
        .collect();
    Ok(Checkpoint {
        params,
        seed,
        epoch,
        extras,
    })
}

/// Pools the sample's SDF to `pool^3` block means and appends the
/// normalized Reynolds number. The resolution must be divisible by the
/// pooling target.
pub fn branch_encode(sample: &DataSample, config: &OperatorConfig) -> Result<Vec<f64>> {
    let g = sample.sdf.resolution();
    let pool = config.branch_pool;
    if pool > g || g % pool != 0 {
        return Err(Error::Config(format!(
            "resolution {g} is not divisible by the branch pooling target {pool}"
        )));
    }
    let mut out = downsample_sdf(sample.sdf.grid(), pool)?;
    out.push(sample.reynolds / REYNOLDS_SCALE);
    Ok(out)
}
