//! Phase and job execution: the sample / forward / backward / step loop,
//! per-epoch evaluation, divergence handling, and deterministic per-job seed
//! streams.

use std::time::Instant;

use serde::Serialize;

use crate::data::sampler::{BlendingSampler, BlendingSchedule, SubsetSampler};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{Mode, ModelConfig, Network};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::probes;
use crate::rng;
use crate::tape::Tape;

use super::ProbeConfig;

/// A phase with its data source fully resolved to index sets.
#[derive(Clone, Debug)]
pub struct PhaseExec {
    /// Phase tag: "pretrain", "tune", "stage1", ... Also the seed-stream key.
    pub tag: String,
    pub source: SourceExec,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub reset_optimizer_state: bool,
    pub reset_groups: Vec<u8>,
}

#[derive(Clone, Debug)]
pub enum SourceExec {
    Subset(Vec<u32>),
    Blending {
        gamma: f64,
        exponent_scale: f64,
        pretrain: Vec<u32>,
    },
}

impl PhaseExec {
    pub fn steps_per_epoch(&self, dataset_len: usize, batch_size: usize) -> u64 {
        match &self.source {
            SourceExec::Subset(idxs) => idxs.len().div_ceil(batch_size) as u64,
            // A blending "epoch" is one full-set pass worth of steps.
            SourceExec::Blending { .. } => dataset_len.div_ceil(batch_size) as u64,
        }
    }
}

/// One independent training job (one seed, one arm, one sweep point).
#[derive(Clone, Debug)]
pub struct TrainJob {
    pub run_id: String,
    pub protocol: String,
    pub sweep_key: String,
    pub seed_value: u64,
    /// Arm tag; also isolates this arm's derived seed streams.
    pub arm: String,
    pub model: ModelConfig,
    pub phases: Vec<PhaseExec>,
    pub batch_size: usize,
    pub eval_every: usize,
    pub last_k: usize,
    pub master_seed: u64,
    pub timing: bool,
    pub probes: ProbeConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub run_id: String,
    pub seed: u64,
    pub protocol: String,
    pub sweep_key: String,
    pub phase: String,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of this epoch.
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub run_id: String,
    pub probe_kind: String,
    pub value: f64,
    pub detail_json: String,
}

/// The full per-run record: metric rows plus bookkeeping for the budget and
/// divergence contracts.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub protocol: String,
    pub sweep_key: String,
    pub arm: String,
    pub rows: Vec<EpochRow>,
    pub probe_rows: Vec<ProbeRow>,
    pub diverged: bool,
    pub total_steps: u64,
    pub planned_steps: u64,
    /// Mean test accuracy over the last K epochs of the final phase, absent
    /// for diverged runs.
    pub last_k_test_acc: Option<f64>,
    /// Realized full-set draw fraction per blending phase, if any.
    pub blending_realized_fraction: Option<f64>,
    /// Checkpoint files written for this run.
    pub checkpoints: Vec<String>,
}

pub(crate) struct PhaseOutcome {
    pub diverged: bool,
    pub steps_done: u64,
    pub realized_fraction: Option<f64>,
}

enum Sampler {
    Subset(SubsetSampler),
    Blending(BlendingSampler),
}

/// Runs one phase in place: `epochs` x steps of sample / forward / backward /
/// step, evaluating test accuracy every `eval_every` epochs (and always on
/// the final epoch). Applies the phase-start resets. A non-finite loss stops
/// the phase and marks it diverged instead of crashing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_phase(
    net: &mut Network<f32>,
    state: &mut OptimizerState<f32>,
    phase: &PhaseExec,
    train: &LabeledDataset,
    eval_set: &LabeledDataset,
    job: &TrainJob,
    arm_seed: u64,
    step_offset: u64,
    rows: &mut Vec<EpochRow>,
) -> Result<PhaseOutcome> {
    if phase.epochs == 0 {
        return Err(Error::Config(format!(
            "phase {:?} must run at least one epoch",
            phase.tag
        )));
    }
    phase.optimizer.validate()?;
    if phase.reset_optimizer_state {
        state.reset();
    }
    if !phase.reset_groups.is_empty() {
        let reset_seed = rng::derive(arm_seed, &format!("{}/reset", phase.tag));
        net.reset_groups(&phase.reset_groups, reset_seed)?;
    }

    let order_seed = rng::derive(arm_seed, &format!("{}/order", phase.tag));
    let steps_per_epoch = phase.steps_per_epoch(train.len(), job.batch_size);
    let mut sampler = match &phase.source {
        SourceExec::Subset(idxs) => Sampler::Subset(SubsetSampler::new(idxs, order_seed)?),
        SourceExec::Blending {
            gamma,
            exponent_scale,
            pretrain,
        } => {
            let full: Vec<u32> = (0..train.len() as u32).collect();
            let total = steps_per_epoch * phase.epochs as u64;
            let mut schedule = BlendingSchedule::new(*gamma, total, pretrain.clone(), full)?;
            schedule.exponent_scale = *exponent_scale;
            Sampler::Blending(BlendingSampler::new(schedule, order_seed))
        }
    };

    let mut steps_done = 0u64;
    // Rows between evaluations carry the last measured accuracy forward, so
    // seed it with a phase-start measurement when epoch 1 will not evaluate.
    let mut last_test_acc = if job.eval_every > 1 {
        evaluate(net, eval_set, job.batch_size)?
    } else {
        f64::NAN
    };
    let phase_start = Instant::now();
    for epoch in 1..=phase.epochs {
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for _ in 0..steps_per_epoch {
            let batch = match &mut sampler {
                Sampler::Subset(s) => s.next_batch(job.batch_size),
                Sampler::Blending(s) => s.next_batch(steps_done, job.batch_size),
            };
            let (x, labels) = train.gather_batch::<f32>(&batch);
            let mut tape = Tape::new();
            let logits = net.forward(&mut tape, &x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).data[0];
            if !loss_val.is_finite() {
                return Ok(PhaseOutcome {
                    diverged: true,
                    steps_done,
                    realized_fraction: realized(&sampler),
                });
            }
            correct += count_correct(&tape.value(logits).data, &labels);
            seen += labels.len();
            loss_sum += loss_val as f64 * labels.len() as f64;
            tape.backward(loss)?;
            net.collect_grads(&tape)?;
            optim::step(net, state, &phase.optimizer)?;
            steps_done += 1;
        }

        let evaluate_now = epoch % job.eval_every == 0 || epoch == phase.epochs;
        if evaluate_now {
            last_test_acc = evaluate(net, eval_set, job.batch_size)?;
        }
        rows.push(EpochRow {
            run_id: job.run_id.clone(),
            seed: job.seed_value,
            protocol: job.protocol.clone(),
            sweep_key: job.sweep_key.clone(),
            phase: phase.tag.clone(),
            epoch,
            step: step_offset + steps_done,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: last_test_acc,
            lr: phase.optimizer.lr,
            wallclock_s: if job.timing {
                phase_start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(PhaseOutcome {
        diverged: false,
        steps_done,
        realized_fraction: realized(&sampler),
    })
}

fn realized(sampler: &Sampler) -> Option<f64> {
    match sampler {
        Sampler::Blending(s) => Some(s.realized_full_fraction()),
        Sampler::Subset(_) => None,
    }
}

fn count_correct(logits: &[f32], labels: &[u32]) -> usize {
    let k = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &logits[i * k..(i + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| j)
                .unwrap_or(0);
            argmax == y as usize
        })
        .count()
}

/// Accuracy over a dataset in eval mode (side-effect-free).
pub fn evaluate(net: &mut Network<f32>, ds: &LabeledDataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idxs: Vec<u32> = (0..ds.len() as u32).collect();
    for chunk in idxs.chunks(batch_size) {
        let (x, labels) = ds.gather_batch::<f32>(chunk);
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, &x, Mode::Eval)?;
        correct += count_correct(&tape.value(logits).data, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Seed stream roots for a job arm. Every stream a job consumes hangs off
/// (master, seed value, arm tag), so arms and sweep points never share
/// randomness unless arm tags deliberately coincide.
pub(crate) fn arm_stream(master_seed: u64, seed_value: u64, arm: &str) -> u64 {
    let job_seed = rng::derive_indexed(master_seed, "job", seed_value);
    rng::derive(job_seed, arm)
}

/// Runs a whole job: build, phase chain, probes, last-K summary.
pub fn run_job(job: &TrainJob, train: &LabeledDataset, eval_set: &LabeledDataset) -> Result<RunRecord> {
    let arm_seed = arm_stream(job.master_seed, job.seed_value, &job.arm);
    let init_seed = rng::derive(arm_seed, "init");
    let mut net = Network::<f32>::build(job.model.clone(), init_seed)?;
    let mut state = OptimizerState::new(&net);

    let planned_steps: u64 = job
        .phases
        .iter()
        .map(|p| p.steps_per_epoch(train.len(), job.batch_size) * p.epochs as u64)
        .sum();

    let mut rows = Vec::new();
    let mut probe_rows = Vec::new();
    let mut total_steps = 0u64;
    let mut diverged = false;
    let mut blending_fraction = None;
    for phase in &job.phases {
        let outcome = run_phase(
            &mut net,
            &mut state,
            phase,
            train,
            eval_set,
            job,
            arm_seed,
            total_steps,
            &mut rows,
        )?;
        total_steps += outcome.steps_done;
        if outcome.realized_fraction.is_some() {
            blending_fraction = outcome.realized_fraction;
        }
        if outcome.diverged {
            diverged = true;
            break;
        }
        if job.probes.at_phase_end {
            run_probes(&mut net, train, eval_set, job, phase, arm_seed, &mut probe_rows)?;
        }
    }

    let last_k_test_acc = if diverged {
        None
    } else {
        let final_phase = &job.phases.last().expect("jobs have phases").tag;
        let series: Vec<f64> = rows
            .iter()
            .filter(|r| &r.phase == final_phase)
            .map(|r| r.test_acc)
            .collect();
        Some(super::last_k_mean(&series, job.last_k.min(series.len()))?)
    };

    Ok(RunRecord {
        run_id: job.run_id.clone(),
        seed: job.seed_value,
        protocol: job.protocol.clone(),
        sweep_key: job.sweep_key.clone(),
        arm: job.arm.clone(),
        rows,
        probe_rows,
        diverged,
        total_steps,
        planned_steps,
        last_k_test_acc,
        blending_realized_fraction: blending_fraction,
        checkpoints: Vec::new(),
    })
}

fn run_probes(
    net: &mut Network<f32>,
    train: &LabeledDataset,
    eval_set: &LabeledDataset,
    job: &TrainJob,
    phase: &PhaseExec,
    arm_seed: u64,
    out: &mut Vec<ProbeRow>,
) -> Result<()> {
    let mut net64: Network<f64> = net.cast();
    let probe_seed = rng::derive(arm_seed, &format!("{}/probe", phase.tag));

    let view: Vec<u32> = (0..train.len() as u32).collect();
    let batch = job.probes.batch_size.min(train.len());
    let mut source = probes::NetworkGradientSource::new(&mut net64, train, view);
    let noise = probes::gradient_noise(&mut source, batch, job.probes.num_batches_m, probe_seed)?;
    out.push(ProbeRow {
        run_id: job.run_id.clone(),
        probe_kind: "gradient_noise".into(),
        value: noise.trace_variance,
        detail_json: format!(
            "{{\"phase\":\"{}\",\"relative_noise\":{},\"mean_grad_norm_sq\":{},\"m\":{}}}",
            phase.tag, noise.relative_noise, noise.mean_grad_norm_sq, noise.num_batches_m
        ),
    });

    let probe_n = job.probes.probe_examples.min(eval_set.len());
    let probe_idxs: Vec<u32> = (0..probe_n as u32).collect();
    let (x, labels) = eval_set.gather_batch::<f64>(&probe_idxs);
    let mut surface = probes::NetworkSurface::new(&mut net64, x, labels);
    let sharp = probes::top_eigenvalue(
        &mut surface,
        job.probes.power_max_iters,
        job.probes.power_tol,
        probe_seed,
    )?;
    out.push(ProbeRow {
        run_id: job.run_id.clone(),
        probe_kind: "top_hessian_eigenvalue".into(),
        value: sharp.top_eigenvalue,
        detail_json: format!(
            "{{\"phase\":\"{}\",\"converged\":{},\"iterations\":{},\"negative\":{}}}",
            phase.tag, sharp.converged, sharp.iterations_used, sharp.is_negative()
        ),
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_split;
    use crate::models::ModelKind;
    use crate::optim::OptimizerKind;

    fn tiny_job(tag: &str, epochs: usize, arm: &str) -> TrainJob {
        TrainJob {
            run_id: format!("test-{arm}"),
            protocol: "fresh".into(),
            sweep_key: "t".into(),
            seed_value: 0,
            arm: arm.into(),
            model: ModelConfig {
                kind: ModelKind::Mlp,
                width_w: 1,
                depth_d: 1,
                num_classes: 3,
                input_shape: [1, 1, 8],
                hidden_sizes: vec![16],
            },
            phases: vec![PhaseExec {
                tag: tag.into(),
                source: SourceExec::Subset((0..300).collect()),
                epochs,
                optimizer: OptimizerConfig::new(OptimizerKind::Adam, 1e-3),
                reset_optimizer_state: true,
                reset_groups: vec![],
            }],
            batch_size: 16,
            eval_every: 1,
            last_k: 3,
            master_seed: 7,
            timing: false,
            probes: ProbeConfig::default(),
        }
    }

    fn blobs() -> (LabeledDataset, LabeledDataset) {
        let (train, test) = make_synthetic_split(3, 100, 30, 8, 10.0, 5).unwrap();
        (
            train.with_feature_shape(vec![1, 1, 8]).unwrap(),
            test.with_feature_shape(vec![1, 1, 8]).unwrap(),
        )
    }

    #[test]
    fn separable_blobs_reach_full_train_accuracy() {
        let (train, test) = blobs();
        let job = tiny_job("tune", 20, "fresh");
        let record = run_job(&job, &train, &test).unwrap();
        assert!(!record.diverged);
        let best = record
            .rows
            .iter()
            .map(|r| r.train_acc)
            .fold(0.0f64, f64::max);
        assert_eq!(best, 1.0, "best train acc {best}");
    }

    #[test]
    fn budget_accounting_is_exact() {
        let (train, test) = blobs();
        let job = tiny_job("tune", 5, "fresh");
        let record = run_job(&job, &train, &test).unwrap();
        // 300 examples / batch 16 = 19 steps per epoch (ceil), 5 epochs.
        assert_eq!(record.planned_steps, 95);
        assert_eq!(record.total_steps, record.planned_steps);
        assert_eq!(record.rows.len(), 5);
    }

    #[test]
    fn identical_jobs_give_bit_identical_series() {
        let (train, test) = blobs();
        let job = tiny_job("tune", 6, "fresh");
        let a = run_job(&job, &train, &test).unwrap();
        let b = run_job(&job, &train, &test).unwrap();
        let key = |r: &RunRecord| -> Vec<(u64, u64, u64)> {
            r.rows
                .iter()
                .map(|row| {
                    (
                        row.train_loss.to_bits(),
                        row.train_acc.to_bits(),
                        row.test_acc.to_bits(),
                    )
                })
                .collect()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn arms_consume_independent_streams() {
        let (train, test) = blobs();
        let a = run_job(&tiny_job("tune", 3, "warm"), &train, &test).unwrap();
        let b = run_job(&tiny_job("tune", 3, "fresh"), &train, &test).unwrap();
        assert_ne!(
            a.rows.last().unwrap().train_loss.to_bits(),
            b.rows.last().unwrap().train_loss.to_bits()
        );
    }

    #[test]
    fn zero_epoch_phase_is_config_error() {
        let (train, test) = blobs();
        let job = tiny_job("tune", 0, "fresh");
        assert!(matches!(
            run_job(&job, &train, &test),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn optimizer_reset_makes_first_tune_step_match_fresh_state() {
        let (train, test) = blobs();
        let job = tiny_job("tune", 1, "fresh");
        let arm_seed = arm_stream(job.master_seed, 0, "fresh");
        let init_seed = rng::derive(arm_seed, "init");

        // Warm path: pollute optimizer state, then run the phase with
        // reset_optimizer_state = true.
        let mut net_a = Network::<f32>::build(job.model.clone(), init_seed).unwrap();
        let mut state_a = OptimizerState::new(&net_a);
        state_a.step_count = 99;
        for s in state_a.first.iter_mut().flatten() {
            *s = 123.0;
        }
        let mut rows = Vec::new();
        run_phase(
            &mut net_a, &mut state_a, &job.phases[0], &train, &test, &job, arm_seed, 0, &mut rows,
        )
        .unwrap();

        // Fresh path: brand-new state, same phase.
        let mut net_b = Network::<f32>::build(job.model.clone(), init_seed).unwrap();
        let mut state_b = OptimizerState::new(&net_b);
        let mut rows_b = Vec::new();
        run_phase(
            &mut net_b, &mut state_b, &job.phases[0], &train, &test, &job, arm_seed, 0, &mut rows_b,
        )
        .unwrap();

        let bits = |n: &Network<f32>| {
            n.flat_params()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&net_a), bits(&net_b));
    }

    #[test]
    fn eval_carry_forward_between_eval_epochs() {
        let (train, test) = blobs();
        let mut job = tiny_job("tune", 6, "fresh");
        job.eval_every = 3;
        let record = run_job(&job, &train, &test).unwrap();
        // Epochs 1-2 carry the phase-start measurement; epoch 3 evaluates;
        // epochs 4-5 carry epoch 3's value.
        assert_eq!(record.rows[0].test_acc, record.rows[1].test_acc);
        assert_eq!(record.rows[2].test_acc, record.rows[3].test_acc);
        assert_eq!(record.rows[3].test_acc, record.rows[4].test_acc);
    }
}
