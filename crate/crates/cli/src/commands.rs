//! Subcommand implementations.

use std::path::{Path, PathBuf};

use voxonet::data::{
    dataset_paths, read_dataset, split, synth_dataset, write_dataset, write_split_manifest,
    Dataset, NpyArray, Split, SplitKind, SplitSpec,
};
use voxonet::fem::postprocess;
use voxonet::geometry::{build_catalog, mesh_sdf, triangulate};
use voxonet::losses::LossId;
use voxonet::metrics::{format_table, MetricsReport, Provenance, TableEntry};
use voxonet::operators::{load_checkpoint, OperatorConfig, Variant};
use voxonet::train::{evaluate, predict_nodal, train, TrainConfig};
use voxonet::{Error, Result};

use crate::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub struct GeomgenOpts {
    pub seed: u64,
    pub out: PathBuf,
    pub resolution: usize,
    pub subdivisions: usize,
}

/// Builds the 100-shape catalog, writes one STL and one SDF NPY per shape
/// plus a catalog manifest.
pub fn geomgen(opts: &GeomgenOpts) -> Result<()> {
    if opts.resolution < 8 {
        return Err(Error::Config(format!(
            "resolution must be >= 8, got {}",
            opts.resolution
        )));
    }
    if opts.subdivisions < 2 {
        return Err(Error::Config(format!(
            "subdivisions must be >= 2, got {}",
            opts.subdivisions
        )));
    }
    ensure_dir(&opts.out)?;
    let catalog = build_catalog(opts.seed);
    let mut manifest = vec!["index,class,stl,sdf".to_string()];
    for (i, spec) in catalog.iter().enumerate() {
        let mesh = triangulate(spec, opts.subdivisions)?;
        let stl = opts.out.join(format!("shape_{i:03}.stl"));
        mesh.write_stl(&stl)?;
        let sdf = mesh_sdf(&mesh, opts.resolution)?;
        let g = opts.resolution;
        let arr = NpyArray::new(vec![g, g, g], sdf.grid().values().to_vec())?;
        let sdf_path = opts.out.join(format!("shape_{i:03}_sdf.npy"));
        std::fs::write(&sdf_path, voxonet::data::encode_npy(&arr, false))?;
        manifest.push(format!(
            "{i},{},{},{}",
            spec.class.name(),
            stl.file_name().unwrap().to_string_lossy(),
            sdf_path.file_name().unwrap().to_string_lossy()
        ));
        log::info!("shape {i:03} ({}) done", spec.class.name());
    }
    manifest.push(String::new());
    std::fs::write(opts.out.join("catalog.csv"), manifest.join("\n"))?;
    println!(
        "wrote {} shapes (STL + SDF at {}^3) to {}",
        catalog.len(),
        opts.resolution,
        opts.out.display()
    );
    Ok(())
}

pub struct SynthOpts {
    pub samples: usize,
    pub resolution: usize,
    pub seed: u64,
    pub catalog_seed: u64,
    pub out: PathBuf,
    pub f32_mode: bool,
}

pub fn synth(opts: &SynthOpts) -> Result<()> {
    if let Some(parent) = opts.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let catalog = build_catalog(opts.catalog_seed);
    let ds = synth_dataset(opts.samples, opts.resolution, opts.seed, &catalog)?;
    let (px, py) = dataset_paths(&opts.out);
    write_dataset(&ds, &px, &py, opts.f32_mode)?;
    println!(
        "wrote {} samples at {}^3: {} and {}",
        ds.len(),
        ds.resolution,
        px.display(),
        py.display()
    );
    Ok(())
}

/// Loads either a stored dataset prefix or a synthetic one.
pub struct DataOpts {
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub samples: usize,
    pub resolution: usize,
    pub data_seed: u64,
    pub catalog_seed: u64,
}

impl DataOpts {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.data, self.synthetic) {
            (Some(prefix), false) => {
                let (px, py) = dataset_paths(prefix);
                for p in [&px, &py] {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "dataset file not found: {}",
                            p.display()
                        )));
                    }
                }
                read_dataset(&px, &py)
            }
            (None, true) => {
                let catalog = build_catalog(self.catalog_seed);
                synth_dataset(self.samples, self.resolution, self.data_seed, &catalog)
            }
            (Some(_), true) => Err(Error::Config(
                "--data and --synthetic are mutually exclusive".into(),
            )),
            (None, false) => Err(Error::Config(
                "provide a dataset with --data PREFIX or --synthetic".into(),
            )),
        }
    }
}

pub struct SplitOpts {
    pub data: DataOpts,
    pub kind: String,
    pub train_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn split_cmd(opts: &SplitOpts) -> Result<()> {
    let ds = opts.data.load()?;
    let kind: SplitKind = opts.kind.parse()?;
    let spec = SplitSpec::new(kind, opts.train_fraction, opts.seed)?;
    let sp = split(&ds, &spec)?;
    if let Some(parent) = opts.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_split_manifest(&opts.out, &ds, &sp)?;
    println!(
        "split {} samples: {} train / {} test -> {}",
        ds.len(),
        sp.train.len(),
        sp.test.len(),
        opts.out.display()
    );
    Ok(())
}

pub struct TrainOpts {
    pub data: DataOpts,
    pub run: RunConfig,
    pub out: PathBuf,
}

fn resolve_split(ds: &Dataset, run: &RunConfig) -> Result<(Split, String)> {
    let label = run.split.clone().unwrap_or_else(|| "random".into());
    let kind: SplitKind = label.parse()?;
    let spec = SplitSpec::new(
        kind,
        run.train_fraction.unwrap_or(0.8),
        run.seed.unwrap_or(0),
    )?;
    Ok((split(ds, &spec)?, label))
}

fn resolve_train_config(run: &RunConfig) -> Result<TrainConfig> {
    let variant: Variant = run
        .model
        .clone()
        .unwrap_or_else(|| "deeponet".into())
        .parse()?;
    let base = match variant {
        Variant::DeepOnet => OperatorConfig::deeponet(),
        Variant::Geometric => OperatorConfig::geometric(),
    };
    let loss: LossId = run.loss.clone().unwrap_or_else(|| "L1".into()).parse()?;
    let mut config = TrainConfig::new(loss, run.operator_config(base));
    if let Some(e) = run.epochs {
        config.epochs = e;
    }
    if let Some(lr) = run.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(b) = run.batch_size {
        config.batch_size = b;
    }
    if let Some(s) = run.seed {
        config.seed = s;
    }
    if let Some(ci) = run.checkpoint_interval {
        config.checkpoint_interval = ci;
    }
    if let Some(vf) = run.validation_fraction {
        config.validation_fraction = vf;
    }
    if let Some(k) = run.subsample_elements {
        config.subsample_elements = Some(k);
    }
    config.weights = run.loss_weights(1.0); // h is replaced by the trainer
    Ok(config)
}

pub fn train_cmd(opts: &TrainOpts) -> Result<()> {
    let ds = opts.data.load()?;
    let (sp, split_label) = resolve_split(&ds, &opts.run)?;
    let config = resolve_train_config(&opts.run)?;
    ensure_dir(&opts.out)?;
    write_split_manifest(&opts.out.join("split_manifest.csv"), &ds, &sp)?;
    let outcome = train(&ds, &sp, &config, Some(&opts.out))?;
    std::fs::write(opts.out.join("history.csv"), outcome.history.to_csv())?;
    let report = evaluate(
        &outcome.best_params,
        &ds,
        &sp.test,
        Provenance {
            model: config.model.variant.to_string(),
            loss: config.loss.to_string(),
            split: split_label,
        },
    )?;
    std::fs::write(opts.out.join("metrics.csv"), report.to_csv())?;
    let mean = report.mean();
    println!(
        "trained {} with {} for {} epochs (best val {:.4e} at epoch {})",
        config.model.variant, config.loss, config.epochs, outcome.best_val_loss, outcome.best_epoch
    );
    println!(
        "test means: M1 {:.2}  M2 {:.2}  M3 {:.2}  M4 {:.3e}",
        mean[0], mean[1], mean[2], mean[3]
    );
    println!("artifacts in {}", opts.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalFormat {
    Csv,
    Table,
    Both,
}

impl std::str::FromStr for EvalFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EvalFormat::Csv),
            "table" => Ok(EvalFormat::Table),
            "both" => Ok(EvalFormat::Both),
            other => Err(Error::Config(format!(
                "unknown format '{other}' (use 'csv', 'table' or 'both')"
            ))),
        }
    }
}

pub struct EvalOpts {
    pub checkpoints: Vec<PathBuf>,
    pub data: DataOpts,
    pub splits: Vec<String>,
    pub train_fraction: f64,
    pub seed: u64,
    pub format: EvalFormat,
    pub out: Option<PathBuf>,
}

pub fn eval_cmd(opts: &EvalOpts) -> Result<()> {
    for path in &opts.checkpoints {
        if !path.exists() {
            return Err(Error::Config(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
    }
    let ds = opts.data.load()?;
    let mut entries = Vec::new();
    let mut reports: Vec<(PathBuf, MetricsReport)> = Vec::new();
    for split_label in &opts.splits {
        let kind: SplitKind = split_label.parse()?;
        let spec = SplitSpec::new(kind, opts.train_fraction, opts.seed)?;
        let sp = split(&ds, &spec)?;
        for path in &opts.checkpoints {
            let ckpt = load_checkpoint(path)?;
            let provenance = Provenance {
                model: ckpt.params.config.variant.to_string(),
                loss: ckpt.extra("loss").unwrap_or("-").to_string(),
                split: split_label.clone(),
            };
            let report = evaluate(&ckpt.params, &ds, &sp.test, provenance.clone())?;
            entries.push(TableEntry {
                loss: provenance.loss,
                model: provenance.model,
                split: provenance.split,
                m: report.mean(),
            });
            reports.push((path.clone(), report));
        }
    }
    let table = format_table(&entries);
    if matches!(opts.format, EvalFormat::Table | EvalFormat::Both) {
        print!("{table}");
        for e in &entries {
            let unified = voxonet::metrics::unified_score(e.m, &Default::default())?;
            println!(
                "unified score ({} / {} / {}): {:.3}",
                e.model, e.loss, e.split, unified
            );
        }
    }
    if let Some(dir) = &opts.out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("table.txt"), &table)?;
        for (path, report) in &reports {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let name = format!(
                "eval_{}_{}_{}_{stem}.csv",
                report.provenance.model, report.provenance.loss, report.provenance.split
            );
            std::fs::write(dir.join(name), report.to_csv())?;
        }
    }
    if matches!(opts.format, EvalFormat::Csv) {
        for (_, report) in &reports {
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

pub struct PlotOpts {
    pub checkpoint: PathBuf,
    pub data: DataOpts,
    pub sample: usize,
    pub out: PathBuf,
}

fn write_plane(path: &Path, rows: usize, cols: usize, values: Vec<f64>) -> Result<()> {
    let arr = NpyArray::new(vec![rows, cols], values)?;
    std::fs::write(path, voxonet::data::encode_npy(&arr, false))?;
    Ok(())
}

/// Extracts the XZ mid-plane (floor convention: nodal plane `y = G/2`,
/// element plane `y = (G-1)/2`) of truth and prediction: velocity
/// components at nodes, the nine gradient components and the Frobenius
/// norm of the gradient tensor at element centers.
pub fn plot_data(opts: &PlotOpts) -> Result<()> {
    if !opts.checkpoint.exists() {
        return Err(Error::Config(format!(
            "checkpoint not found: {}",
            opts.checkpoint.display()
        )));
    }
    let ds = opts.data.load()?;
    if opts.sample >= ds.len() {
        return Err(Error::Config(format!(
            "sample {} out of range (dataset has {})",
            opts.sample,
            ds.len()
        )));
    }
    let ckpt = load_checkpoint(&opts.checkpoint)?;
    let sample = &ds.samples[opts.sample];
    let pred = predict_nodal(&ckpt.params, sample)?;
    let g = ds.resolution;
    let e = g - 1;
    let iy = g / 2;
    let ey = e / 2;
    ensure_dir(&opts.out)?;

    let mut manifest =
        vec!["file,quantity,source,plane,plane_index,rows,cols".to_string()];
    let axis_names = ["x", "y", "z"];
    let comp_names = ["u", "v", "w"];

    for (source, field) in [("truth", &sample.velocity), ("pred", &pred)] {
        for (c, cname) in comp_names.iter().enumerate() {
            let mut vals = Vec::with_capacity(g * g);
            for ix in 0..g {
                for iz in 0..g {
                    vals.push(field.component(c).at(ix, iy, iz));
                }
            }
            let name = format!("{source}_{cname}_xz.npy");
            write_plane(&opts.out.join(&name), g, g, vals)?;
            manifest.push(format!("{name},{cname},{source},xz,{iy},{g},{g}"));
        }
        let centers = postprocess(field, &sample.sdf)?;
        let at = |v: &Vec<f64>, ex: usize, ez: usize| v[(ex * e + ey) * e + ez];
        let mut frob = vec![0.0; e * e];
        for (ci, cname) in comp_names.iter().enumerate() {
            for (ai, aname) in axis_names.iter().enumerate() {
                let mut vals = Vec::with_capacity(e * e);
                for ex in 0..e {
                    for ez in 0..e {
                        let v = at(&centers.gradients[ci][ai], ex, ez);
                        frob[ex * e + ez] += v * v;
                        vals.push(v);
                    }
                }
                let name = format!("{source}_grad_{cname}{aname}_xz.npy");
                write_plane(&opts.out.join(&name), e, e, vals)?;
                manifest.push(format!(
                    "{name},d{cname}/d{aname},{source},xz,{ey},{e},{e}"
                ));
            }
        }
        let name = format!("{source}_grad_frobenius_xz.npy");
        write_plane(
            &opts.out.join(&name),
            e,
            e,
            frob.into_iter().map(f64::sqrt).collect(),
        )?;
        manifest.push(format!(
            "{name},|grad| (Frobenius),{source},xz,{ey},{e},{e}"
        ));
    }
    manifest.push(String::new());
    std::fs::write(opts.out.join("manifest.csv"), manifest.join("\n"))?;
    println!(
        "wrote XZ mid-plane panels for sample {} to {}",
        opts.sample,
        opts.out.display()
    );
    Ok(())
}
