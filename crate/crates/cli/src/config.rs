//! JSON run configuration.
//!
//! ```json
//! {
//!   "dataset": { "source": "blobs", "n_per_class": 1200, "classes": 2,
//!                "dim": 8, "separation": 6.0, "n_test": 400, "seed": 0 },
//!   "architecture": { "input_shape": [8], "layers": [...], "head": "softmax_magnitude" },
//!   "train": { "learning_rate": 1.0, "noise_multiplier": 1.0,
//!              "sampling_rate": 0.05, "clip_bound": 1.0, "steps": 16 },
//!   "outputs": { "progress_csv": "progress.csv", "checkpoint": "model.zdpc" }
//! }
//! ```
//!
//! Unknown keys are rejected at every level. Relative paths resolve against
//! the directory holding the config file.

use serde::Deserialize;
use std::path::{Path, PathBuf};
use zdp_core::data::{self, ComplexDataset, FourierConfig};
use zdp_core::nn::{Architecture, Network};
use zdp_core::trainer::TrainConfig;
use zdp_core::Rng;

use crate::UsageError;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Zdpc {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        /// Held-out examples split off `train` when no test file is given.
        #[serde(default)]
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
    PairedPrototypes {
        n_per_class: usize,
        noise_std: f64,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
    Fourier {
        n_per_class: usize,
        length: usize,
        keep: usize,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub progress_csv: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn read_json(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let value = read_json(path)?;
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        Network::new(self.architecture.clone()).map_err(|e| usage(format!("architecture: {e}")))?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Materializes the `(train, test)` datasets.
    pub fn datasets(&self) -> anyhow::Result<(ComplexDataset, Option<ComplexDataset>)> {
        let split = |ds: ComplexDataset, n_test: usize, rng: &mut Rng| -> anyhow::Result<_> {
            if n_test == 0 {
                return Ok((ds, None));
            }
            let (tr, te) = ds.split(n_test, rng).map_err(|e| usage(format!("dataset: {e}")))?;
            Ok((tr, Some(te)))
        };
        let load = |p: &Path| data::load_zdpc(p).map_err(|e| usage(format!("dataset {}: {e}", p.display())));
        let gen = |r: zdp_core::Result<ComplexDataset>| r.map_err(|e| usage(format!("dataset: {e}")));
        match &self.dataset {
            DatasetSpec::Zdpc {
                train,
                test,
                n_test,
                seed,
            } => {
                let path = self.resolve(train);
                let tr = load(&path)?;
                match test {
                    Some(t) => {
                        let path = self.resolve(t);
                        let te = load(&path)?;
                        Ok((tr, Some(te)))
                    }
                    None => split(tr, *n_test, &mut Rng::new(*seed, 0)),
                }
            }
            DatasetSpec::Blobs {
                n_per_class,
                classes,
                dim,
                separation,
                n_test,
                seed,
            } => {
                let mut rng = Rng::new(*seed, 0);
                let ds = gen(data::gen_complex_blobs(
                    *n_per_class,
                    *classes,
                    *dim,
                    *separation,
                    &mut rng,
                ))?;
                split(ds, *n_test, &mut rng)
            }
            DatasetSpec::PairedPrototypes {
                n_per_class,
                noise_std,
                n_test,
                seed,
            } => {
                let mut rng = Rng::new(*seed, 0);
                let ds = gen(data::gen_paired_prototypes(*n_per_class, *noise_std, &mut rng))?;
                split(ds, *n_test, &mut rng)
            }
            DatasetSpec::Fourier {
                n_per_class,
                length,
                keep,
                n_test,
                seed,
            } => {
                let mut rng = Rng::new(*seed, 0);
                let cfg = FourierConfig::new(*length, *keep);
                let ds = gen(data::gen_fourier_signals_with(*n_per_class, &cfg, &mut rng))?;
                split(ds, *n_test, &mut rng)
            }
        }
    }
}

/// Accepts either a bare architecture or a full run config.
pub fn load_architecture(path: &Path) -> anyhow::Result<Architecture> {
    let value = read_json(path)?;
    let arch = match value.get("architecture") {
        Some(a) => a.clone(),
        None => value,
    };
    let arch: Architecture = serde_json::from_value(arch).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Network::new(arch.clone()).map_err(|e| usage(format!("architecture: {e}")))?;
    Ok(arch)
}
