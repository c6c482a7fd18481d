//! Flat TOML run configuration. Every key mirrors a CLI flag; flags win.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use voxonet::losses::LossWeights;
use voxonet::operators::OperatorConfig;
use voxonet::{Error, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // Run selection.
    pub model: Option<String>,
    pub loss: Option<String>,
    pub split: Option<String>,
    pub train_fraction: Option<f64>,

    // Trainer.
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoint_interval: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub subsample_elements: Option<usize>,

    // Architecture.
    pub modes: Option<usize>,
    pub branch_layers: Option<Vec<usize>>,
    pub trunk_layers: Option<Vec<usize>>,
    pub branch_pool: Option<usize>,
    pub siren_omega0: Option<f64>,
    pub stage2_siren: Option<bool>,

    // Loss weights.
    pub lambda_u: Option<f64>,
    pub lambda_v: Option<f64>,
    pub lambda_w: Option<f64>,
    pub lambda_u_x: Option<f64>,
    pub lambda_u_y: Option<f64>,
    pub lambda_u_z: Option<f64>,
    pub lambda_v_x: Option<f64>,
    pub lambda_v_y: Option<f64>,
    pub lambda_v_z: Option<f64>,
    pub lambda_w_x: Option<f64>,
    pub lambda_w_y: Option<f64>,
    pub lambda_w_z: Option<f64>,
    pub lambda_boundary: Option<f64>,
    pub lambda_solenoidality: Option<f64>,
    pub normalize_boundary: Option<bool>,

    // Paths and workers.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the architecture keys over a variant's defaults.
    pub fn operator_config(&self, base: OperatorConfig) -> OperatorConfig {
        OperatorConfig {
            variant: base.variant,
            branch_layers: self.branch_layers.clone().unwrap_or(base.branch_layers),
            trunk_layers: self.trunk_layers.clone().unwrap_or(base.trunk_layers),
            modes: self.modes.unwrap_or(base.modes),
            branch_pool: self.branch_pool.unwrap_or(base.branch_pool),
            siren_omega0: self.siren_omega0.unwrap_or(base.siren_omega0),
            stage2_siren: self.stage2_siren.unwrap_or(base.stage2_siren),
        }
    }

    /// Applies the lambda keys over the published table.
    pub fn loss_weights(&self, h: f64) -> LossWeights {
        let mut w = LossWeights::paper(h);
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(x) = v {
                *slot = x;
            }
        };
        set(&mut w.lambda_velocity[0], self.lambda_u);
        set(&mut w.lambda_velocity[1], self.lambda_v);
        set(&mut w.lambda_velocity[2], self.lambda_w);
        let grads = [
            [self.lambda_u_x, self.lambda_u_y, self.lambda_u_z],
            [self.lambda_v_x, self.lambda_v_y, self.lambda_v_z],
            [self.lambda_w_x, self.lambda_w_y, self.lambda_w_z],
        ];
        for c in 0..3 {
            for a in 0..3 {
                set(&mut w.lambda_gradient[c][a], grads[c][a]);
            }
        }
        set(&mut w.lambda_boundary, self.lambda_boundary);
        set(&mut w.lambda_solenoidality, self.lambda_solenoidality);
        if let Some(n) = self.normalize_boundary {
            w.normalize_boundary = n;
        }
        w
    }
}
