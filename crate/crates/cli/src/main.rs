//! Single entry point wiring the pipeline: geometry generation, synthetic
//! datasets, splits, training, evaluation, and plot-data export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{DataOpts, EvalFormat, EvalOpts, GeomgenOpts, PlotOpts, SplitOpts, SynthOpts, TrainOpts};
use config::RunConfig;
use voxonet::Result;

/// Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
/// configuration error.
#[derive(Parser)]
#[command(name = "voxonet", version, about = "Neural operator surrogates for 3D cavity flow on voxel grids")]
struct Cli {
    /// Cap the worker thread pool (default: all cores, or RAYON_NUM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the 100-shape catalog: STL meshes and voxelized SDFs.
    Geomgen(GeomgenArgs),
    /// Manufacture a synthetic dataset in the two-file NPZ layout.
    Synth(SynthArgs),
    /// Split a dataset and write the train/test manifest CSV.
    Split(SplitArgs),
    /// Train a surrogate; writes history, checkpoints and test metrics.
    Train(TrainArgs),
    /// Evaluate checkpoints: metrics CSV per checkpoint plus a comparison table.
    Eval(EvalArgs),
    /// Export XZ mid-plane slices of truth/prediction as 2-D NPY panels.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct GeomgenArgs {
    /// Catalog seed (controls the random orientations).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// SDF grid resolution per axis (>= 8).
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Surface triangulation density (>= 2).
    #[arg(long, default_value_t = 32)]
    subdivisions: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples (ten consecutive samples share a catalog shape).
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Nodal grid resolution per axis (>= 8).
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    /// Dataset seed (Reynolds numbers and field phases).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed for the shape catalog.
    #[arg(long, default_value_t = 0)]
    catalog_seed: u64,
    /// Output prefix; writes <prefix>_X.npz and <prefix>_Y.npz.
    #[arg(long)]
    out: PathBuf,
    /// Store 4-byte floats instead of 8-byte.
    #[arg(long, default_value_t = false)]
    f32: bool,
}

/// Dataset source shared by split/train/eval/plot-data.
#[derive(Args)]
struct DataArgs {
    /// Dataset prefix (expects <prefix>_X.npz and <prefix>_Y.npz).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate a synthetic dataset in memory instead of reading files.
    #[arg(long, default_value_t = false)]
    synthetic: bool,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Synthetic grid resolution.
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    /// Synthetic dataset seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Synthetic catalog seed.
    #[arg(long, default_value_t = 0)]
    catalog_seed: u64,
}

impl DataArgs {
    fn to_opts(&self) -> DataOpts {
        DataOpts {
            data: self.data.clone(),
            synthetic: self.synthetic,
            samples: self.samples,
            resolution: self.resolution,
            data_seed: self.data_seed,
            catalog_seed: self.catalog_seed,
        }
    }
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Split kind: random | extrapolatory.
    #[arg(long, default_value = "random")]
    kind: String,
    /// Training fraction (the lower range in the extrapolatory case).
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Shuffle seed for the random split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Flag defaults follow the published setup: 200 epochs, learning rate
/// 1e-4, batch size 2, branch [512,512,512], trunk [256,256,256],
/// 128 modes; loss weights u/v/w = 1/3/150, gradients ux/uy/uz = 15/1/30,
/// vx/vy/vz = 50/30/5, wx/wy/wz = 600/750/600, boundary 5,
/// solenoidality 10. Every key can also come from --config (TOML, same
/// names); command-line flags win.
#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss: L1 | L2 | L3 | L4 [default: L1].
    #[arg(long)]
    loss: Option<String>,
    /// Model: deeponet | geometric [default: deeponet].
    #[arg(long)]
    model: Option<String>,
    /// Split kind: random | extrapolatory [default: random].
    #[arg(long)]
    split: Option<String>,
    /// Training fraction of the split [default: 0.8].
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Training epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size [default: 2].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Run seed: initialization, shuffling, validation hold-out [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs between periodic checkpoints, 0 disables [default: 50].
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Validation fraction of the training set [default: 0.1].
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Fluid elements per step [default: full grid up to 32^3, 8192 beyond].
    #[arg(long)]
    subsample_elements: Option<usize>,
    /// Latent modes p [default: 128].
    #[arg(long)]
    modes: Option<usize>,
    /// Branch widths, comma separated [default: 512,512,512].
    #[arg(long, value_delimiter = ',')]
    branch_layers: Option<Vec<usize>>,
    /// Trunk widths, comma separated [default: 256,256,256].
    #[arg(long, value_delimiter = ',')]
    trunk_layers: Option<Vec<usize>>,
    /// Branch SDF pooling target per axis [default: 8].
    #[arg(long)]
    branch_pool: Option<usize>,
    /// SIREN frequency for the stage-2 trunk [default: 30].
    #[arg(long)]
    siren_omega0: Option<f64>,
    /// Use sine activations in the stage-2 trunk [default: true].
    #[arg(long)]
    stage2_siren: Option<bool>,
    /// u-velocity weight [default: 1].
    #[arg(long)]
    lambda_u: Option<f64>,
    /// v-velocity weight [default: 3].
    #[arg(long)]
    lambda_v: Option<f64>,
    /// w-velocity weight [default: 150].
    #[arg(long)]
    lambda_w: Option<f64>,
    /// du/dx weight [default: 15].
    #[arg(long)]
    lambda_u_x: Option<f64>,
    /// du/dy weight [default: 1].
    #[arg(long)]
    lambda_u_y: Option<f64>,
    /// du/dz weight [default: 30].
    #[arg(long)]
    lambda_u_z: Option<f64>,
    /// dv/dx weight [default: 50].
    #[arg(long)]
    lambda_v_x: Option<f64>,
    /// dv/dy weight [default: 30].
    #[arg(long)]
    lambda_v_y: Option<f64>,
    /// dv/dz weight [default: 5].
    #[arg(long)]
    lambda_v_z: Option<f64>,
    /// dw/dx weight [default: 600].
    #[arg(long)]
    lambda_w_x: Option<f64>,
    /// dw/dy weight [default: 750].
    #[arg(long)]
    lambda_w_y: Option<f64>,
    /// dw/dz weight [default: 600].
    #[arg(long)]
    lambda_w_z: Option<f64>,
    /// Boundary-face weight [default: 5].
    #[arg(long)]
    lambda_boundary: Option<f64>,
    /// Mass-conservation weight [default: 10].
    #[arg(long)]
    lambda_solenoidality: Option<f64>,
    /// Average the boundary sums instead of the published raw sums
    /// [default: false].
    #[arg(long)]
    normalize_boundary: Option<bool>,
    /// Output directory for history, checkpoints and metrics
    /// (flag or config key).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),+ $(,)?) => {
                $(if self.$field.is_some() { run.$field = self.$field.clone(); })+
            };
        }
        over!(
            loss, model, split, train_fraction, epochs, batch_size, seed,
            checkpoint_interval, validation_fraction, subsample_elements, modes,
            branch_layers, trunk_layers, branch_pool, siren_omega0, stage2_siren,
            lambda_u, lambda_v, lambda_w, lambda_u_x, lambda_u_y, lambda_u_z,
            lambda_v_x, lambda_v_y, lambda_v_z, lambda_w_x, lambda_w_y, lambda_w_z,
            lambda_boundary, lambda_solenoidality, normalize_boundary,
        );
        if self.lr.is_some() {
            run.learning_rate = self.lr;
        }
        Ok(run)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file(s); repeat the flag to build a comparison table.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Split kind(s) whose test sets are evaluated, comma separated:
    /// random | extrapolatory.
    #[arg(long, default_value = "random", value_delimiter = ',')]
    split: Vec<String>,
    /// Training fraction of the split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output format: csv | table | both.
    #[arg(long, default_value = "both")]
    format: String,
    /// Directory for table.txt and per-checkpoint CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Sample index to slice.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Output directory for the NPY panels and manifest.
    #[arg(long)]
    out: PathBuf,
}

fn build_pool(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| voxonet::Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    if !matches!(cli.command, Command::Train(_)) {
        build_pool(cli.threads)?;
    }
    match cli.command {
        Command::Geomgen(a) => commands::geomgen(&GeomgenOpts {
            seed: a.seed,
            out: a.out,
            resolution: a.resolution,
            subdivisions: a.subdivisions,
        }),
        Command::Synth(a) => commands::synth(&SynthOpts {
            samples: a.samples,
            resolution: a.resolution,
            seed: a.seed,
            catalog_seed: a.catalog_seed,
            out: a.out,
            f32_mode: a.f32,
        }),
        Command::Split(a) => commands::split_cmd(&SplitOpts {
            data: a.data.to_opts(),
            kind: a.kind,
            train_fraction: a.train_fraction,
            seed: a.seed,
            out: a.out,
        }),
        Command::Train(a) => {
            let run = a.run_config()?;
            build_pool(cli.threads.or(run.threads))?;
            let out = a.out.clone().or_else(|| run.out.clone()).ok_or_else(|| {
                voxonet::Error::Config("an output directory is required (--out or the 'out' config key)".into())
            })?;
            let mut data = a.data.to_opts();
            if data.data.is_none() && !data.synthetic {
                data.data = run.data.clone();
            }
            commands::train_cmd(&TrainOpts { data, run, out })
        }
        Command::Eval(a) => commands::eval_cmd(&EvalOpts {
            checkpoints: a.checkpoint.clone(),
            data: a.data.to_opts(),
            splits: a.split.clone(),
            train_fraction: a.train_fraction,
            seed: a.seed,
            format: a.format.parse::<EvalFormat>()?,
            out: a.out.clone(),
        }),
        Command::PlotData(a) => commands::plot_data(&PlotOpts {
            checkpoint: a.checkpoint,
            data: a.data.to_opts(),
            sample: a.sample,
            out: a.out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
