//! Dataset layout, train/test splits, and the synthetic generator.
//!
//! Published data comes as two NPZ files per set: inputs `[S][2][G][G][G]`
//! (SDF and a constant Reynolds channel) and outputs `[S][4][G][G][G]`
//! (u, v, w, p). The synthetic generator manufactures divergence-free
//! velocity fields around catalog shapes so the full pipeline runs at desk
//! scale without downloads.

mod npy;
mod npz;

pub use npy::{decode_npy, encode_npy, NpyArray};
pub use npz::{read_npz, write_npz, NpzContents};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::NodalField;
use crate::geometry::{analytic_sdf, mesh_sdf, triangulate, ShapeSpec};
use crate::voxel::{SdfField, VoxelGrid};

/// Bound on synthetic velocity magnitudes (amplitude times the worst-case
/// ramp and curl factors; the actual fields stay well below it).
pub const SYNTH_VELOCITY_BOUND: f64 = 4.0;

/// One flow snapshot: inputs (SDF, Reynolds number) and outputs
/// (velocity components; the pressure channel is carried but unused).
#[derive(Debug, Clone)]
pub struct DataSample {
    pub sdf: SdfField,
    pub reynolds: f64,
    pub velocity: NodalField,
    pub pressure: VoxelGrid,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub resolution: usize,
    pub samples: Vec<DataSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn reynolds(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reynolds).collect()
    }
}

/// Conventional file pair for a dataset prefix: `<prefix>_X.npz` and
/// `<prefix>_Y.npz`.
pub fn dataset_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let stem = prefix.to_string_lossy();
    (
        PathBuf::from(format!("{stem}_X.npz")),
        PathBuf::from(format!("{stem}_Y.npz")),
    )
}

fn single_array(path: &Path) -> Result<NpyArray> {
    let contents = read_npz(path)?;
    if contents.arrays.len() != 1 {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "{} holds {} arrays, expected exactly one",
                path.display(),
                contents.arrays.len()
            ),
        });
    }
    Ok(contents.arrays.into_iter().next().unwrap().1)
}

fn check_5d(name: &str, arr: &NpyArray, channels: usize) -> Result<(usize, usize)> {
    match arr.shape.as_slice() {
        [s, c, gx, gy, gz] if *c == channels && gx == gy && gy == gz => Ok((*s, *gx)),
        other => Err(Error::Format {
            offset: 0,
            msg: format!(
                "{name} tensor must be [S][{channels}][G][G][G] with cubic resolution, got {other:?}"
            ),
        }),
    }
}

/// Parses and validates the two-file NPZ layout.
pub fn read_dataset(path_x: &Path, path_y: &Path) -> Result<Dataset> {
    let x = single_array(path_x)?;
    let y = single_array(path_y)?;
    let (sx, g) = check_5d("input", &x, 2)?;
    let (sy, gy) = check_5d("output", &y, 4)?;
    if sx != sy || g != gy {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "input ({sx} samples at {g}^3) and output ({sy} samples at {gy}^3) disagree"
            ),
        });
    }
    let n = g * g * g;
    let mut samples = Vec::with_capacity(sx);
    for s in 0..sx {
        let chan = |arr: &NpyArray, channels: usize, c: usize| -> Vec<f64> {
            let base = (s * channels + c) * n;
            arr.data[base..base + n].to_vec()
        };
        let sdf = chan(&x, 2, 0);
        let re_field = chan(&x, 2, 1);
        let re = re_field[0];
        if re_field.iter().any(|&v| v != re) {
            return Err(Error::Validation(format!(
                "sample {s}: Reynolds channel is not spatially constant"
            )));
        }
        if !(10.0..=1000.0).contains(&re) {
            return Err(Error::Validation(format!(
                "sample {s}: Reynolds number {re} outside [10, 1000]"
            )));
        }
        let velocity: Vec<Vec<f64>> = (0..3).map(|c| chan(&y, 4, c)).collect();
        for (c, comp) in velocity.iter().enumerate() {
            if comp.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "sample {s}: velocity component {c} contains non-finite values"
                )));
            }
        }
        let mut velocity = velocity.into_iter();
        samples.push(DataSample {
            sdf: SdfField::new(VoxelGrid::new(g, sdf)?),
            reynolds: re,
            velocity: NodalField::new(
                VoxelGrid::new(g, velocity.next().unwrap())?,
                VoxelGrid::new(g, velocity.next().unwrap())?,
                VoxelGrid::new(g, velocity.next().unwrap())?,
            )?,
            pressure: VoxelGrid::new(g, chan(&y, 4, 3))?,
        });
    }
    Ok(Dataset {
        resolution: g,
        samples,
    })
}

/// Writes the two-file NPZ layout; `f32_mode` stores 4-byte floats for
/// compatibility with the published data.
pub fn write_dataset(ds: &Dataset, path_x: &Path, path_y: &Path, f32_mode: bool) -> Result<()> {
    if ds.samples.is_empty() {
        return Err(Error::Validation("refusing to write an empty dataset".into()));
    }
    let g = ds.resolution;
    let n = g * g * g;
    let s = ds.samples.len();
    let mut x = Vec::with_capacity(s * 2 * n);
    let mut y = Vec::with_capacity(s * 4 * n);
    for sample in &ds.samples {
        x.extend_from_slice(sample.sdf.grid().values());
        x.extend(std::iter::repeat(sample.reynolds).take(n));
        for c in 0..3 {
            y.extend_from_slice(sample.velocity.component(c).values());
        }
        y.extend_from_slice(sample.pressure.values());
    }
    let x = NpyArray::new(vec![s, 2, g, g, g], x)?;
    let y = NpyArray::new(vec![s, 4, g, g, g], y)?;
    write_npz(path_x, &[("data", &x)], &[], f32_mode)?;
    write_npz(path_y, &[("data", &y)], &[], f32_mode)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Random,
    Extrapolatory,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "extrapolatory" => Ok(SplitKind::Extrapolatory),
            other => Err(Error::Config(format!(
                "unknown split kind '{other}' (use 'random' or 'extrapolatory')"
            ))),
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::Random => "random",
            SplitKind::Extrapolatory => "extrapolatory",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(kind: SplitKind, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie strictly between 0 and 1, got {train_fraction}"
            )));
        }
        Ok(SplitSpec {
            kind,
            train_fraction,
            seed,
        })
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            kind: SplitKind::Random,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random: seeded shuffle, first `ceil(f*S)` train. Extrapolatory: sort by
/// Reynolds number ascending (ties by index), lower fraction train.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let s = ds.len();
    if s < 5 {
        return Err(Error::Config(format!(
            "splitting needs at least 5 samples, got {s}"
        )));
    }
    let n_train = ((spec.train_fraction * s as f64).ceil() as usize).clamp(1, s - 1);
    let mut order: Vec<usize> = (0..s).collect();
    match spec.kind {
        SplitKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            // Fisher-Yates.
            for i in (1..s).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        SplitKind::Extrapolatory => {
            order.sort_by(|&a, &b| {
                ds.samples[a]
                    .reynolds
                    .partial_cmp(&ds.samples[b].reynolds)
                    .unwrap()
                    .then(a.cmp(&b))
            });
        }
    }
    let test = order.split_off(n_train);
    Ok(Split { train: order, test })
}

/// CSV manifest: one `sample,reynolds,split` row per sample.
pub fn write_split_manifest(path: &Path, ds: &Dataset, sp: &Split) -> Result<()> {
    let mut rows = vec![String::from("sample,reynolds,split")];
    let mut labels = vec!["test"; ds.len()];
    for &i in &sp.train {
        labels[i] = "train";
    }
    for (i, sample) in ds.samples.iter().enumerate() {
        rows.push(format!("{i},{},{}", sample.reynolds, labels[i]));
    }
    rows.push(String::new());
    std::fs::write(path, rows.join("\n"))?;
    Ok(())
}

/// Block-mean pooling of a `G^3` grid to `target^3`. When `G` is not a
/// multiple of `target` the grid is padded by replicating the last plane
/// (logged), so every block still averages `ceil(G/target)^3` cells.
pub fn downsample_sdf(grid: &VoxelGrid, target: usize) -> Result<Vec<f64>> {
    let g = grid.resolution();
    if target == 0 || target > g {
        return Err(Error::Config(format!(
            "pooling target {target} invalid for resolution {g}"
        )));
    }
    let block = g.div_ceil(target);
    if g % target != 0 {
        log::warn!(
            "resolution {g} not divisible by pooling target {target}; padding by replication"
        );
    }
    let clamp = |i: usize| i.min(g - 1);
    let mut out = Vec::with_capacity(target * target * target);
    let inv = 1.0 / (block * block * block) as f64;
    for bx in 0..target {
        for by in 0..target {
            for bz in 0..target {
                let mut acc = 0.0;
                for dx in 0..block {
                    for dy in 0..block {
                        for dz in 0..block {
                            acc += grid.at(
                                clamp(bx * block + dx),
                                clamp(by * block + dy),
                                clamp(bz * block + dz),
                            );
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Ok(out)
}

const GOLDEN_FRAC: f64 = 0.618_033_988_749_894_9;

fn low_discrepancy(n: usize) -> f64 {
    (0.5 + n as f64 * GOLDEN_FRAC).fract()
}

/// Quintic smoothstep ramp over `[0, delta]` and its derivative; zero with
/// zero slope for s <= 0.
fn ramp(s: f64, delta: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= delta {
        (1.0, 0.0)
    } else {
        let t = s / delta;
        let chi = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let dchi = 30.0 * t * t * (1.0 - t) * (1.0 - t) / delta;
        (chi, dchi)
    }
}

struct SynthField {
    center: [f64; 3],
    gate_radius: f64,
    delta: f64,
    amp: f64,
    k: f64,
    phases: [f64; 6],
}

impl SynthField {
    /// Velocity of the manufactured field: the curl of `chi(s) * psi`,
    /// where `s` is the distance to the gating sphere circumscribing the
    /// shape and `psi` a trigonometric vector potential. Exactly
    /// divergence-free and exactly zero inside the gate.
    fn velocity(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let s = r - self.gate_radius;
        let (chi, dchi) = ramp(s, self.delta);
        if chi == 0.0 && dchi == 0.0 {
            return [0.0; 3];
        }
        let grad_s = if r > 1e-12 {
            [d[0] / r, d[1] / r, d[2] / r]
        } else {
            [0.0; 3]
        };
        let (a, k, ph) = (self.amp, self.k, &self.phases);
        let psi = [
            a * (k * p[1] + ph[0]).sin() * (k * p[2] + ph[1]).sin(),
            a * (k * p[2] + ph[2]).sin() * (k * p[0] + ph[3]).sin(),
            a * (k * p[0] + ph[4]).sin() * (k * p[1] + ph[5]).sin(),
        ];
        let curl_psi = [
            a * k * (k * p[0] + ph[4]).sin() * (k * p[1] + ph[5]).cos()
                - a * k * (k * p[2] + ph[2]).cos() * (k * p[0] + ph[3]).sin(),
            a * k * (k * p[1] + ph[0]).sin() * (k * p[2] + ph[1]).cos()
                - a * k * (k * p[0] + ph[4]).cos() * (k * p[1] + ph[5]).sin(),
            a * k * (k * p[2] + ph[2]).sin() * (k * p[0] + ph[3]).cos()
                - a * k * (k * p[1] + ph[0]).cos() * (k * p[2] + ph[1]).sin(),
        ];
        // curl(chi * psi) = grad(chi) x psi + chi * curl(psi)
        let gc = [dchi * grad_s[0], dchi * grad_s[1], dchi * grad_s[2]];
        [
            gc[1] * psi[2] - gc[2] * psi[1] + chi * curl_psi[0],
            gc[2] * psi[0] - gc[0] * psi[2] + chi * curl_psi[1],
            gc[0] * psi[1] - gc[1] * psi[0] + chi * curl_psi[2],
        ]
    }
}

/// Builds `n_samples` synthetic flow snapshots at the given resolution.
/// Sample `n` uses catalog shape `(n / 10) % len`; within each shape's
/// block of ten, the first five Reynolds numbers fall in [10, 100] and the
/// rest in [100, 1000], drawn from a golden-ratio low-discrepancy sequence.
///
/// The seed fixes a set of dataset-level phase constants; each sample's
/// field is then a deterministic function of its (shape, Re) inputs, with
/// the spatial frequency and phases varying smoothly in Re. That keeps the
/// snapshot-to-field mapping a well-defined operator for models to learn.
pub fn synth_dataset(
    n_samples: usize,
    resolution: usize,
    seed: u64,
    catalog: &[ShapeSpec],
) -> Result<Dataset> {
    if resolution < 8 {
        return Err(Error::Config(format!(
            "synthetic resolution must be >= 8, got {resolution}"
        )));
    }
    if catalog.is_empty() {
        return Err(Error::Config("synthetic generation needs a catalog".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base_phase = [0.0; 6];
    let mut phase_slope = [0.0; 6];
    for i in 0..6 {
        base_phase[i] = rng.gen_range(0.0..std::f64::consts::TAU);
        phase_slope[i] = rng.gen_range(-1.0..1.0);
    }
    let mut sdf_cache: HashMap<usize, SdfField> = HashMap::new();
    let g = resolution;
    let mut samples = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let geom = (n / 10) % catalog.len();
        let spec = &catalog[geom];
        let (lo, hi) = if n % 10 < 5 {
            (10.0, 100.0)
        } else {
            (100.0, 1000.0)
        };
        let re = lo + low_discrepancy(n) * (hi - lo);
        let mut phases = [0.0; 6];
        for i in 0..6 {
            phases[i] = base_phase[i] + phase_slope[i] * (re / 1000.0);
        }

        let sdf = match sdf_cache.get(&geom) {
            Some(s) => s.clone(),
            None => {
                let field = if spec.class.has_exact_sdf() {
                    SdfField::new(VoxelGrid::from_fn(g, |p| analytic_sdf(spec, p).unwrap()))
                } else {
                    mesh_sdf(&triangulate(spec, 128)?, g)?
                };
                sdf_cache.insert(geom, field.clone());
                field
            }
        };

        let field = SynthField {
            center: spec.center,
            gate_radius: spec.bounding_radius(),
            delta: 0.5,
            amp: 0.3,
            k: std::f64::consts::FRAC_PI_4
                + std::f64::consts::FRAC_PI_2 * (re / 1000.0),
            phases,
        };
        let velocity = NodalField::from_fn(g, |p| field.velocity(p));
        samples.push(DataSample {
            sdf,
            reynolds: re,
            velocity,
            pressure: VoxelGrid::zeros(g),
        });
    }
    Ok(Dataset {
        resolution: g,
        samples,
    })
}
