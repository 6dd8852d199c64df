//! The experiment protocols: warm start, fresh baseline, smooth blending,
//! multi-stage pretraining, layer-group reset, learning-rate grids, and
//! width/depth sweeps. Each protocol compiles to independent training jobs
//! that run in parallel and aggregate into gap reports afterwards.

use rayon::prelude::*;
use serde_json::json;

use crate::data::{self, stages, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::optim::OptimizerConfig;
use crate::rng;

use super::runner::{self, run_job, PhaseExec, RunRecord, SourceExec, TrainJob};
use super::{DataSource, ExperimentConfig, GapReport, Protocol};

pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub gaps: Vec<GapReport>,
    pub detail: serde_json::Value,
}

impl ExperimentResult {
    pub fn diverged_count(&self) -> usize {
        self.runs.iter().filter(|r| r.diverged).count()
    }
}

/// Runs the configured protocol with `parallelism` concurrent jobs. Results
/// are deterministic for a fixed master seed regardless of the worker count.
pub fn run_experiment(config: &ExperimentConfig, parallelism: usize) -> Result<ExperimentResult> {
    run_experiment_to(config, parallelism, None)
}

/// Like [`run_experiment`], also writing protocol checkpoints (the reset
/// protocol's post-pretrain snapshots) under `out_dir` when given.
pub fn run_experiment_to(
    config: &ExperimentConfig,
    parallelism: usize,
    out_dir: Option<&std::path::Path>,
) -> Result<ExperimentResult> {
    config.validate()?;
    let (train, test) = config.load_datasets()?;
    match config.protocol {
        Protocol::WarmStart => warm_start(config, &train, &test, parallelism),
        Protocol::Fresh => fresh(config, &train, &test, parallelism),
        Protocol::Blending => blending(config, &train, &test, parallelism),
        Protocol::Multistage => multistage(config, &train, &test, parallelism),
        Protocol::Reset => reset(config, &train, &test, parallelism, out_dir),
        Protocol::LrGrid => lr_grid(config, &train, &test, parallelism),
        Protocol::ArchSweep => arch_sweep(config, &train, &test, parallelism),
    }
}

fn execute(
    jobs: Vec<TrainJob>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(job, train, test))
            .collect::<Result<Vec<_>>>()
    })
}

struct JobFactory<'a> {
    config: &'a ExperimentConfig,
    protocol: &'static str,
}

impl<'a> JobFactory<'a> {
    fn new(config: &'a ExperimentConfig) -> Self {
        JobFactory {
            config,
            protocol: config.protocol.name(),
        }
    }

    fn fresh_arm_tag(&self) -> String {
        if self.config.match_arm_seeds {
            "warm".into()
        } else {
            "fresh".into()
        }
    }

    fn job(&self, sweep_key: &str, seed_value: u64, arm: &str, phases: Vec<PhaseExec>) -> TrainJob {
        let c = self.config;
        TrainJob {
            run_id: format!("{}-{}-s{}-{}", self.protocol, sweep_key, seed_value, arm),
            protocol: self.protocol.to_string(),
            sweep_key: sweep_key.to_string(),
            seed_value,
            arm: arm.to_string(),
            model: c.model.clone(),
            phases,
            batch_size: c.batch_size,
            eval_every: c.eval_every_epochs,
            last_k: c.resolved_last_k(),
            master_seed: c.master_seed,
            timing: c.timing,
            probes: c.probes.clone(),
        }
    }

    /// The uniform half of the training set, seeded per (seed, warm arm) so
    /// replays and the fresh arm stay isolated.
    fn half_for(&self, train: &LabeledDataset, seed_value: u64) -> Result<Vec<u32>> {
        let arm_seed = runner::arm_stream(self.config.master_seed, seed_value, "warm");
        let (pretrain, _) = data::half_split(train, rng::derive(arm_seed, "half"))?;
        Ok(pretrain)
    }

    fn spec_for(&self, source: &DataSource) -> Option<&super::PhaseSpec> {
        self.config
            .phases
            .iter()
            .find(|p| &p.data_source == source)
    }

    fn pretrain_phase(&self, half: Vec<u32>, epochs: usize, lr: Option<f64>) -> PhaseExec {
        let spec = self.spec_for(&DataSource::PretrainHalf);
        let mut optimizer = spec.map(|s| s.optimizer).unwrap_or_else(|| self.config.base_optimizer());
        if let Some(lr) = lr {
            optimizer.lr = lr;
        }
        PhaseExec {
            tag: "pretrain".into(),
            source: SourceExec::Subset(half),
            epochs,
            optimizer,
            reset_optimizer_state: spec.map(|s| s.reset_optimizer_state_at_start).unwrap_or(true),
            reset_groups: spec.map(|s| s.reset_groups_at_start.clone()).unwrap_or_default(),
        }
    }

    fn tune_phase(&self, full: Vec<u32>, lr: Option<f64>) -> PhaseExec {
        let spec = self.spec_for(&DataSource::Full);
        let mut optimizer = spec.map(|s| s.optimizer).unwrap_or_else(|| self.config.base_optimizer());
        if let Some(lr) = lr {
            optimizer.lr = lr;
        }
        PhaseExec {
            tag: "tune".into(),
            source: SourceExec::Subset(full),
            epochs: spec.map(|s| s.epochs).unwrap_or(self.config.tune_epochs),
            optimizer,
            reset_optimizer_state: spec.map(|s| s.reset_optimizer_state_at_start).unwrap_or(true),
            reset_groups: spec.map(|s| s.reset_groups_at_start.clone()).unwrap_or_default(),
        }
    }
}

fn full_indices(train: &LabeledDataset) -> Vec<u32> {
    (0..train.len() as u32).collect()
}

/// Per-seed last-K accuracies for one (sweep_key, arm), diverged runs
/// excluded.
fn arm_values(runs: &[RunRecord], sweep_key: &str, arm: &str) -> (Vec<(u64, f64)>, usize) {
    let mut values = Vec::new();
    let mut diverged = 0;
    for r in runs {
        if r.sweep_key == sweep_key && r.arm == arm {
            match (r.diverged, r.last_k_test_acc) {
                (false, Some(v)) => values.push((r.seed, v)),
                _ => diverged += 1,
            }
        }
    }
    (values, diverged)
}

fn gap_between(
    runs: &[RunRecord],
    warm_key: &str,
    warm_arm: &str,
    fresh_key: &str,
    fresh_arm: &str,
) -> GapReport {
    let (warm, d1) = arm_values(runs, warm_key, warm_arm);
    let (fresh, d2) = arm_values(runs, fresh_key, fresh_arm);
    GapReport::from_arms(warm_key.to_string(), warm, fresh, d1 + d2)
}

fn warm_start(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<ExperimentResult> {
    let factory = JobFactory::new(config);
    let sweep: Vec<usize> = if config.protocol_params.pretrain_epochs_sweep.is_empty() {
        vec![config.pretrain_epochs]
    } else {
        config.protocol_params.pretrain_epochs_sweep.clone()
    };

    let mut jobs = Vec::new();
    for &pe in &sweep {
        for &seed in &config.seeds {
            let key = format!("pre{pe}");
            let mut phases = Vec::new();
            if pe > 0 {
                phases.push(factory.pretrain_phase(factory.half_for(train, seed)?, pe, None));
            }
            phases.push(factory.tune_phase(full_indices(train), None));
            jobs.push(factory.job(&key, seed, "warm", phases));
        }
    }
    let fresh_arm = factory.fresh_arm_tag();
    for &seed in &config.seeds {
        let phases = vec![factory.tune_phase(full_indices(train), None)];
        jobs.push(factory.job("fresh", seed, &fresh_arm, phases));
    }

    let runs = execute(jobs, train, test, parallelism)?;
    let gaps: Vec<GapReport> = sweep
        .iter()
        .map(|pe| gap_between(&runs, &format!("pre{pe}"), "warm", "fresh", &fresh_arm))
        .collect();
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps,
        detail: json!({ "pretrain_epochs_sweep": sweep }),
    })
}

fn fresh(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<ExperimentResult> {
    let factory = JobFactory::new(config);
    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        let phases = vec![factory.tune_phase(full_indices(train), None)];
        jobs.push(factory.job("fresh", seed, "fresh", phases));
    }
    let runs = execute(jobs, train, test, parallelism)?;
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps: Vec::new(),
        detail: json!({}),
    })
}

fn blending(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<ExperimentResult> {
    let factory = JobFactory::new(config);
    let mut jobs = Vec::new();
    for &gamma in &config.protocol_params.gammas {
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(Error::Config(format!("gamma {gamma} must lie in (0,1)")));
        }
        for &seed in &config.seeds {
            let key = format!("gamma{gamma}");
            let half = factory.half_for(train, seed)?;
            let tune = factory.tune_phase(full_indices(train), None);
            let phase = PhaseExec {
                tag: "tune".into(),
                source: SourceExec::Blending {
                    gamma,
                    exponent_scale: config.protocol_params.exponent_scale,
                    pretrain: half,
                },
                ..tune
            };
            jobs.push(factory.job(&key, seed, "warm", vec![phase]));
        }
    }
    let fresh_arm = factory.fresh_arm_tag();
    for &seed in &config.seeds {
        let phases = vec![factory.tune_phase(full_indices(train), None)];
        jobs.push(factory.job("fresh", seed, &fresh_arm, phases));
    }

    let runs = execute(jobs, train, test, parallelism)?;
    let gaps: Vec<GapReport> = config
        .protocol_params
        .gammas
        .iter()
        .map(|g| gap_between(&runs, &format!("gamma{g}"), "warm", "fresh", &fresh_arm))
        .collect();
    let realized: Vec<serde_json::Value> = runs
        .iter()
        .filter_map(|r| {
            r.blending_realized_fraction.map(|f| {
                json!({ "run_id": r.run_id, "realized_full_fraction": f })
            })
        })
        .collect();
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps,
        detail: json!({ "realized_sampling": realized }),
    })
}

fn multistage(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<ExperimentResult> {
    let factory = JobFactory::new(config);
    let params = &config.protocol_params;
    let mut jobs = Vec::new();
    for &n in &params.n_stages_list {
        for &r in &params.ratios {
            for &seed in &config.seeds {
                let key = format!("n{n}_r{r}");
                if n == 0 {
                    // No pretraining stages: exactly the fresh baseline.
                    let phases = vec![factory.tune_phase(full_indices(train), None)];
                    jobs.push(factory.job(&key, seed, "fresh", phases));
                    continue;
                }
                let arm_seed = runner::arm_stream(config.master_seed, seed, "warm");
                let plan = stages::build_stage_plan(
                    train,
                    n,
                    r,
                    rng::derive(arm_seed, "stage-plan"),
                )?;
                let mut phases = Vec::new();
                for i in 1..=n {
                    let stage_idxs = plan.stages[i - 1].clone();
                    // Budget proportional to the stage's share of the data.
                    let epochs = (params.epochs_per_stage * stage_idxs.len()).div_ceil(train.len());
                    let base = factory.pretrain_phase(stage_idxs, epochs.max(1), None);
                    phases.push(PhaseExec {
                        tag: format!("stage{i}"),
                        ..base
                    });
                }
                phases.push(factory.tune_phase(full_indices(train), None));
                jobs.push(factory.job(&key, seed, "warm", phases));
            }
        }
    }
    let fresh_arm = factory.fresh_arm_tag();
    for &seed in &config.seeds {
        let phases = vec![factory.tune_phase(full_indices(train), None)];
        jobs.push(factory.job("fresh", seed, &fresh_arm, phases));
    }

    let runs = execute(jobs, train, test, parallelism)?;
    let mut gaps = Vec::new();
    for &n in &params.n_stages_list {
        for &r in &params.ratios {
            let key = format!("n{n}_r{r}");
            let warm_arm = if n == 0 { "fresh" } else { "warm" };
            gaps.push(gap_between(&runs, &key, warm_arm, "fresh", &fresh_arm));
        }
    }
    // Stages that never reached full train accuracy, for the budget rule.
    let unconverged: Vec<serde_json::Value> = runs
        .iter()
        .flat_map(|r| {
            let mut flags = Vec::new();
            let mut last_by_phase: Vec<(&str, f64)> = Vec::new();
            for row in &r.rows {
                match last_by_phase.iter_mut().find(|(p, _)| *p == row.phase) {
                    Some(entry) => entry.1 = row.train_acc,
                    None => last_by_phase.push((&row.phase, row.train_acc)),
                }
            }
            for (phase, acc) in last_by_phase {
                if phase.starts_with("stage") && acc < 1.0 {
                    flags.push(json!({
                        "run_id": r.run_id,
                        "phase": phase,
                        "final_train_acc": acc,
                    }));
                }
            }
            flags
        })
        .collect();
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps,
        detail: json!({ "stages_below_full_train_accuracy": unconverged }),
    })
}

fn reset_key(ids: &[u8]) -> String {
    if ids.is_empty() {
        "reset_none".into()
    } else {
        format!(
            "reset_{}",
            ids.iter().map(|i| i.to_string()).collect::<String>()
        )
    }
}

fn reset(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
    out_dir: Option<&std::path::Path>,
) -> Result<ExperimentResult> {
    use crate::models::Network;
    use crate::optim::OptimizerState;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let factory = JobFactory::new(config);
    let group_sets = config.protocol_params.reset_group_sets.clone();
    let fresh_arm = factory.fresh_arm_tag();

    // Per seed: pretrain once, snapshot, then tune once per group set.
    // Seeds are the parallel unit; the fan-out shares the snapshot.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let per_seed: Vec<Vec<RunRecord>> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| -> Result<Vec<RunRecord>> {
                let mut records = Vec::new();
                let arm_seed = runner::arm_stream(config.master_seed, seed, "warm");
                let init_seed = rng::derive(arm_seed, "init");
                let mut net = Network::<f32>::build(config.model.clone(), init_seed)?;
                let mut state = OptimizerState::new(&net);

                let half = factory.half_for(train, seed)?;
                let pre_phase =
                    factory.pretrain_phase(half, config.pretrain_epochs, None);
                let pre_job = factory.job("pretrain", seed, "warm", vec![pre_phase.clone()]);
                let mut pre_rows = Vec::new();
                let outcome = runner::run_phase(
                    &mut net, &mut state, &pre_phase, train, test, &pre_job, arm_seed, 0,
                    &mut pre_rows,
                )?;
                let mut checkpoints = Vec::new();
                if let (Some(dir), false) = (out_dir, outcome.diverged) {
                    let path = dir.join(format!("{}.ckpt", pre_job.run_id));
                    crate::checkpoint::save(
                        &mut net,
                        Some((&state, pre_phase.optimizer.kind)),
                        &path,
                    )?;
                    checkpoints.push(path.display().to_string());
                }
                records.push(RunRecord {
                    run_id: pre_job.run_id.clone(),
                    seed,
                    protocol: pre_job.protocol.clone(),
                    sweep_key: "pretrain".into(),
                    arm: "warm".into(),
                    rows: pre_rows,
                    probe_rows: Vec::new(),
                    diverged: outcome.diverged,
                    total_steps: outcome.steps_done,
                    planned_steps: pre_phase.steps_per_epoch(train.len(), config.batch_size)
                        * pre_phase.epochs as u64,
                    last_k_test_acc: None,
                    blending_realized_fraction: None,
                    checkpoints,
                });
                if outcome.diverged {
                    return Ok(records);
                }
                let snapshot = net.clone();
                let pre_steps = outcome.steps_done;

                for ids in &group_sets {
                    let key = reset_key(ids);
                    let mut tuned = snapshot.clone();
                    let mut tune_state = OptimizerState::new(&tuned);
                    let mut tune_phase = factory.tune_phase(full_indices(train), None);
                    tune_phase.reset_groups = ids.clone();
                    let job = factory.job(&key, seed, "warm", vec![tune_phase.clone()]);
                    let mut rows = Vec::new();
                    let outcome = runner::run_phase(
                        &mut tuned,
                        &mut tune_state,
                        &tune_phase,
                        train,
                        test,
                        &job,
                        arm_seed,
                        pre_steps,
                        &mut rows,
                    )?;
                    let series: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
                    let last_k = if outcome.diverged {
                        None
                    } else {
                        Some(super::last_k_mean(
                            &series,
                            config.resolved_last_k().min(series.len()),
                        )?)
                    };
                    records.push(RunRecord {
                        run_id: job.run_id.clone(),
                        seed,
                        protocol: job.protocol.clone(),
                        sweep_key: key,
                        arm: "warm".into(),
                        rows,
                        probe_rows: Vec::new(),
                        diverged: outcome.diverged,
                        total_steps: outcome.steps_done,
                        planned_steps: tune_phase.steps_per_epoch(train.len(), config.batch_size)
                            * tune_phase.epochs as u64,
                        last_k_test_acc: last_k,
                        blending_realized_fraction: None,
                        checkpoints: Vec::new(),
                    });
                }
                Ok(records)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut runs: Vec<RunRecord> = per_seed.into_iter().flatten().collect();

    // Fresh baseline arm.
    let mut fresh_jobs = Vec::new();
    for &seed in &config.seeds {
        let phases = vec![factory.tune_phase(full_indices(train), None)];
        fresh_jobs.push(factory.job("fresh", seed, &fresh_arm, phases));
    }
    runs.extend(execute(fresh_jobs, train, test, parallelism)?);

    let gaps: Vec<GapReport> = group_sets
        .iter()
        .map(|ids| gap_between(&runs, &reset_key(ids), "warm", "fresh", &fresh_arm))
        .collect();
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps,
        detail: json!({ "group_sets": group_sets }),
    })
}

fn lr_grid(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<ExperimentResult> {
    let factory = JobFactory::new(config);
    let params = &config.protocol_params;
    if params.pretrain_lrs.is_empty() || params.tune_lrs.is_empty() {
        return Err(Error::Config("lr_grid needs nonempty lr lists".into()));
    }
    let mut jobs = Vec::new();
    for &lr_p in &params.pretrain_lrs {
        for &lr_t in &params.tune_lrs {
            for &seed in &config.seeds {
                let key = format!("lrp{lr_p}_lrt{lr_t}");
                let mut phases = Vec::new();
                if config.pretrain_epochs > 0 {
                    phases.push(factory.pretrain_phase(
                        factory.half_for(train, seed)?,
                        config.pretrain_epochs,
                        Some(lr_p),
                    ));
                }
                phases.push(factory.tune_phase(full_indices(train), Some(lr_t)));
                jobs.push(factory.job(&key, seed, "warm", phases));
            }
        }
    }
    let fresh_arm = factory.fresh_arm_tag();
    for &lr_t in &params.tune_lrs {
        for &seed in &config.seeds {
            let key = format!("fresh_lrt{lr_t}");
            let phases = vec![factory.tune_phase(full_indices(train), Some(lr_t))];
            jobs.push(factory.job(&key, seed, &fresh_arm, phases));
        }
    }

    let runs = execute(jobs, train, test, parallelism)?;
    let mut gaps = Vec::new();
    for &lr_p in &params.pretrain_lrs {
        for &lr_t in &params.tune_lrs {
            gaps.push(gap_between(
                &runs,
                &format!("lrp{lr_p}_lrt{lr_t}"),
                "warm",
                &format!("fresh_lrt{lr_t}"),
                &fresh_arm,
            ));
        }
    }
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps,
        detail: json!({
            "pretrain_lrs": params.pretrain_lrs,
            "tune_lrs": params.tune_lrs,
        }),
    })
}

fn arch_sweep(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallelism: usize,
) -> Result<ExperimentResult> {
    let factory = JobFactory::new(config);
    let params = &config.protocol_params;
    if params.widths.is_empty() || params.depths.is_empty() {
        return Err(Error::Config("arch_sweep needs nonempty width/depth grids".into()));
    }
    if config.model.kind == ModelKind::Mlp {
        return Err(Error::Config(
            "arch_sweep varies width_w/depth_d, which the mlp ignores; use cnn or mini_resnet"
                .into(),
        ));
    }
    let fresh_arm = factory.fresh_arm_tag();
    let mut jobs = Vec::new();
    for &w in &params.widths {
        for &d in &params.depths {
            let mut model = config.model.clone();
            model.width_w = w;
            model.depth_d = d;
            for &seed in &config.seeds {
                let key = format!("w{w}_d{d}");
                let mut warm_phases = vec![
                    factory.pretrain_phase(
                        factory.half_for(train, seed)?,
                        config.pretrain_epochs,
                        None,
                    ),
                    factory.tune_phase(full_indices(train), None),
                ];
                if config.pretrain_epochs == 0 {
                    warm_phases.remove(0);
                }
                let mut warm = factory.job(&key, seed, "warm", warm_phases);
                warm.model = model.clone();
                jobs.push(warm);

                let fresh_phases = vec![factory.tune_phase(full_indices(train), None)];
                let mut fresh =
                    factory.job(&format!("fresh_{key}"), seed, &fresh_arm, fresh_phases);
                fresh.model = model.clone();
                jobs.push(fresh);
            }
        }
    }

    let runs = execute(jobs, train, test, parallelism)?;
    let mut gaps = Vec::new();
    for &w in &params.widths {
        for &d in &params.depths {
            let key = format!("w{w}_d{d}");
            gaps.push(gap_between(
                &runs,
                &key,
                "warm",
                &format!("fresh_{key}"),
                &fresh_arm,
            ));
        }
    }
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        gaps,
        detail: json!({ "widths": params.widths, "depths": params.depths }),
    })
}

/// Optimizer config override used by grid protocols.
#[allow(dead_code)]
fn with_lr(mut cfg: OptimizerConfig, lr: f64) -> OptimizerConfig {
    cfg.lr = lr;
    cfg
}
