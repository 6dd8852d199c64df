//! Experiment orchestration: declarative configuration, the training
//! protocols, gap metrics, and reporting.

pub mod protocols;
pub mod report;
pub mod runner;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::rng;

/// Where a training phase draws its batches from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Full,
    PretrainHalf,
    Stage(usize),
    Blending,
}

/// One training phase: a data source, a budget, an optimizer, and what gets
/// reset when the phase starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub data_source: DataSource,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_true")]
    pub reset_optimizer_state_at_start: bool,
    #[serde(default)]
    pub reset_groups_at_start: Vec<u8>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    WarmStart,
    Fresh,
    Blending,
    Multistage,
    Reset,
    LrGrid,
    ArchSweep,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::WarmStart => "warm_start",
            Protocol::Fresh => "fresh",
            Protocol::Blending => "blending",
            Protocol::Multistage => "multistage",
            Protocol::Reset => "reset",
            Protocol::LrGrid => "lr_grid",
            Protocol::ArchSweep => "arch_sweep",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian blobs around margin-scaled class centers.
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_margin")]
        margin: f64,
        /// Optional reinterpretation of the flat features, e.g. [1, 8, 8].
        #[serde(default)]
        feature_shape: Option<Vec<usize>>,
    },
    /// IDX image/label file pairs (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// CIFAR-10 binary batches.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        test_file: Option<PathBuf>,
    },
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    200
}
fn default_input_dim() -> usize {
    64
}
fn default_margin() -> f64 {
    1.8
}

/// Protocol-specific sweep settings. Unused fields are ignored by the other
/// protocols.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolParams {
    /// Warm start: sweep over pretraining lengths (empty = single point).
    pub pretrain_epochs_sweep: Vec<usize>,
    /// Blending: the gamma grid.
    pub gammas: Vec<f64>,
    /// Blending: exponent scale in p(n) = 1 - gamma^(scale n / N).
    pub exponent_scale: f64,
    /// Multistage: how many pretraining stages.
    pub n_stages_list: Vec<usize>,
    /// Multistage: uniform-data ratios r.
    pub ratios: Vec<f64>,
    /// Multistage: budget scale; stage i gets ceil(epochs_per_stage * |D_i| / N).
    pub epochs_per_stage: usize,
    /// Reset: which group sets to redraw before tuning.
    pub reset_group_sets: Vec<Vec<u8>>,
    /// Learning-rate grid axes.
    pub pretrain_lrs: Vec<f64>,
    pub tune_lrs: Vec<f64>,
    /// Architecture sweep axes.
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            pretrain_epochs_sweep: Vec::new(),
            gammas: vec![0.5, 0.8, 0.9, 0.99],
            exponent_scale: 50.0,
            n_stages_list: vec![1, 2, 4, 8],
            ratios: vec![0.5],
            epochs_per_stage: 10,
            reset_group_sets: vec![
                vec![],
                vec![6],
                vec![5, 6],
                vec![4, 5, 6],
                vec![3, 4, 5, 6],
                vec![2, 3, 4, 5, 6],
                vec![1, 2, 3, 4, 5, 6],
            ],
            // 0.0018 is the pretraining rate that generalizes best in the
            // reference sweep.
            pretrain_lrs: vec![0.001, 0.0018, 0.0032],
            tune_lrs: vec![0.001, 0.01],
            widths: vec![4, 8, 16],
            depths: vec![1, 2],
        }
    }
}

/// Optional diagnostics run at phase boundaries on a 64-bit copy of the net.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub at_phase_end: bool,
    /// Minibatch size for the gradient-noise probe.
    pub batch_size: usize,
    pub num_batches_m: usize,
    /// Size of the fixed held-out batch the sharpness probe uses.
    pub probe_examples: usize,
    pub power_max_iters: usize,
    pub power_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            at_phase_end: false,
            batch_size: 128,
            num_batches_m: 8,
            probe_examples: 512,
            power_max_iters: 100,
            power_tol: 1e-6,
        }
    }
}

/// The declarative experiment description. Field names are the configuration
/// surface; TOML is the concrete syntax.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    /// Per-seed values; each becomes one independent run per arm.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_every")]
    pub eval_every_epochs: usize,
    /// Last-K evaluation window; default scales as tune_epochs / 5 (100 at
    /// the 500-epoch reference scale).
    #[serde(default)]
    pub last_k: Option<usize>,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_tune_epochs")]
    pub tune_epochs: usize,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    /// Explicit phase list; when set, warm-start style protocols take the
    /// pretrain/tune specs from here instead of the scalar fields.
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub protocol_params: ProtocolParams,
    #[serde(default)]
    pub probes: ProbeConfig,
    /// When true the fresh arm reuses the warm arm's seed streams.
    #[serde(default)]
    pub match_arm_seeds: bool,
    /// Diverged runs beyond this count fail the run with exit code 4.
    #[serde(default)]
    pub max_diverged_runs: usize,
    /// Record real wall-clock seconds in the per-epoch CSV. Off by default:
    /// reproducible output wins, timings then read 0.
    #[serde(default)]
    pub timing: bool,
    /// Per-channel standardization after load.
    #[serde(default)]
    pub standardize: bool,
    /// Config stub, intentionally unimplemented.
    #[serde(default)]
    pub augment: bool,
    /// Optional seeded subsampling of the training set after load.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

fn default_batch() -> usize {
    128
}
fn default_master_seed() -> u64 {
    1
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_eval_every() -> usize {
    1
}
fn default_pretrain_epochs() -> usize {
    50
}
fn default_tune_epochs() -> usize {
    100
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Ok(seed) = std::env::var("PLASBENCH_SEED") {
            let parsed = seed.parse::<u64>().map_err(|_| {
                Error::Config(format!("PLASBENCH_SEED must be a u64, got {seed:?}"))
            })?;
            cfg.master_seed = parsed;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every_epochs == 0 {
            return Err(Error::Config("eval_every_epochs must be positive".into()));
        }
        if self.tune_epochs == 0 {
            return Err(Error::Config("tune_epochs must be positive".into()));
        }
        if self.augment {
            return Err(Error::Config(
                "data augmentation is a config stub and not implemented".into(),
            ));
        }
        let k = self.resolved_last_k();
        if k == 0 || k > self.tune_epochs {
            return Err(Error::Config(format!(
                "last_k = {k} must lie in 1..=tune_epochs ({})",
                self.tune_epochs
            )));
        }
        if let Some(opt) = &self.optimizer {
            opt.validate()?;
        }
        for phase in &self.phases {
            if phase.epochs == 0 {
                return Err(Error::Config("phase epochs must be positive".into()));
            }
            phase.optimizer.validate()?;
        }
        Ok(())
    }

    pub fn resolved_last_k(&self) -> usize {
        self.last_k.unwrap_or_else(|| (self.tune_epochs / 5).max(1))
    }

    pub fn base_optimizer(&self) -> OptimizerConfig {
        self.optimizer
            .unwrap_or_else(|| OptimizerConfig::new(OptimizerKind::Adam, 1e-3))
    }

    /// Loads (train, test) datasets, reshaped to the model's input shape.
    pub fn load_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let (mut train, mut test) = match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                per_class,
                test_per_class,
                input_dim,
                margin,
                feature_shape,
            } => {
                let seed = rng::derive(self.master_seed, "dataset");
                let (mut train, mut test) = data::make_synthetic_split(
                    *num_classes,
                    *per_class,
                    *test_per_class,
                    *input_dim,
                    *margin,
                    seed,
                )?;
                if let Some(shape) = feature_shape {
                    train = train.with_feature_shape(shape.clone())?;
                    test = test.with_feature_shape(shape.clone())?;
                }
                (train, test)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                data::idx::load_idx(train_images, train_labels)?,
                data::idx::load_idx(test_images, test_labels)?,
            ),
            DatasetConfig::Cifar10 { dir, test_file } => {
                let train = data::cifar::load_cifar10_binary(dir)?;
                let test = match test_file {
                    Some(path) => data::cifar::load_cifar10_file(path)?,
                    None => data::cifar::load_cifar10_file(&dir.join("test_batch.bin"))?,
                };
                (train, test)
            }
        };
        if let Some(limit) = self.train_limit {
            train = subsample(&train, limit, rng::derive(self.master_seed, "train-limit"))?;
        }
        if self.standardize {
            train.standardize_per_channel();
            test.standardize_per_channel();
        }
        let want: Vec<usize> = self.model.input_shape.to_vec();
        let train = train.with_feature_shape(want.clone())?;
        let test = test.with_feature_shape(want)?;
        Ok((train, test))
    }
}

fn subsample(ds: &LabeledDataset, limit: usize, seed: u64) -> Result<LabeledDataset> {
    use rand::seq::SliceRandom;
    if limit == 0 || limit > ds.len() {
        return Err(Error::Config(format!(
            "train_limit {limit} out of range for {} examples",
            ds.len()
        )));
    }
    let mut idxs: Vec<u32> = (0..ds.len() as u32).collect();
    idxs.shuffle(&mut rng::rng_from(seed));
    let mut keep = idxs[..limit].to_vec();
    keep.sort_unstable();
    let per: usize = ds.feature_shape().iter().product();
    let mut features = Vec::with_capacity(limit * per);
    let mut labels = Vec::with_capacity(limit);
    for &i in &keep {
        features.extend_from_slice(ds.example(i as usize));
        labels.push(ds.label(i as usize));
    }
    LabeledDataset::new(
        format!("{}-sub{limit}", ds.name),
        ds.feature_shape().to_vec(),
        features,
        labels,
        ds.num_classes(),
    )
}

/// Arithmetic mean of the final K entries of a series.
pub fn last_k_mean(series: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > series.len() {
        return Err(Error::Config(format!(
            "last_k = {k} out of range for a series of {}",
            series.len()
        )));
    }
    Ok(series[series.len() - k..].iter().sum::<f64>() / k as f64)
}

/// Warm-vs-fresh gap summary at one sweep point. Negative gap means the
/// pretrained arm generalises worse.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapReport {
    pub sweep_key: String,
    pub warm_mean: f64,
    pub warm_std: f64,
    pub fresh_mean: f64,
    pub fresh_std: f64,
    /// warm_mean - fresh_mean.
    pub gap: f64,
    pub per_seed_warm: Vec<(u64, f64)>,
    pub per_seed_fresh: Vec<(u64, f64)>,
    pub diverged_excluded: usize,
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

impl GapReport {
    pub fn from_arms(
        sweep_key: String,
        per_seed_warm: Vec<(u64, f64)>,
        per_seed_fresh: Vec<(u64, f64)>,
        diverged_excluded: usize,
    ) -> Self {
        let warm: Vec<f64> = per_seed_warm.iter().map(|(_, v)| *v).collect();
        let fresh: Vec<f64> = per_seed_fresh.iter().map(|(_, v)| *v).collect();
        let (warm_mean, warm_std) = mean_std(&warm);
        let (fresh_mean, fresh_std) = mean_std(&fresh);
        GapReport {
            sweep_key,
            warm_mean,
            warm_std,
            fresh_mean,
            fresh_std,
            gap: warm_mean - fresh_mean,
            per_seed_warm,
            per_seed_fresh,
            diverged_excluded,
        }
    }
}
