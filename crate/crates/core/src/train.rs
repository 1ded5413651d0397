//! Pretraining on the capability task and fine-tuning on the retrieval task
//! under a pluggable regulariser.
//!
//! Steps are numbered from 1; step `t` is the state after the `t`-th
//! optimizer update and any merges applied at that step. Step 0 is the
//! starting point. A run is fully determined by its inputs: batches come from
//! a seeded generator and all reductions are sequential.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{DistanceMetric, MetricKind, OriginProbe};
use crate::error::{Error, Result};
use crate::merge::{back_merge_in_place, MergeReport};
use crate::model::{Example, ModelConfig, NgramLM};
use crate::params::{assert_compatible, Checkpoint, MaskKind, ParamStore};
use crate::tasks::{
    capability_accuracy, eval_capability, eval_retrieval, CapabilityTask, EvalReport,
    RetrievalEvalOptions, RetrievalWorld,
};

/// Upper bound on back-merges within one step. With a non-zero origin the
/// sign-dissimilarity loop ends long before this (f32 values collapse onto the
/// origin after a few hundred halvings).
const MAX_MERGES_PER_STEP: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    CosineWithWarmup {
        peak: f64,
        min: f64,
        warmup_steps: u64,
        decay_steps: u64,
    },
}

/// Learning rate for the update at 0-based `step`.
///
/// Warmup ramps linearly, reaching `peak * (step + 1) / warmup_steps`, so the
/// first update already moves and `step = warmup_steps` sits at the peak.
/// Cosine decay then runs from `peak` to `min` over `decay_steps`; `min`
/// afterwards.
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    match *schedule {
        LrSchedule::Constant { lr } => lr,
        LrSchedule::CosineWithWarmup {
            peak,
            min,
            warmup_steps,
            decay_steps,
        } => {
            if step < warmup_steps {
                peak * (step + 1) as f64 / warmup_steps as f64
            } else if step < warmup_steps + decay_steps {
                let progress = (step - warmup_steps) as f64 / decay_steps as f64;
                min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
            } else {
                min
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    SgdMomentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: Optimizer,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Decoupled weight decay on merge-included scalars (SID groups are left
    /// alone so they stay at their initial values when unused).
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive");
        }
        match self.schedule {
            LrSchedule::Constant { lr } if !(lr > 0.0 && lr.is_finite()) => {
                return bad("constant learning rate must be > 0")
            }
            LrSchedule::CosineWithWarmup {
                peak,
                min,
                warmup_steps,
                decay_steps,
            } => {
                if !(peak > 0.0 && peak.is_finite() && min >= 0.0 && min <= peak) {
                    return bad("cosine schedule needs 0 <= min <= peak and peak > 0");
                }
                if warmup_steps == 0 || decay_steps == 0 {
                    return bad("cosine schedule needs positive warmup and decay steps");
                }
                if warmup_steps + decay_steps > self.steps {
                    return bad("warmup_steps + decay_steps must not exceed steps");
                }
            }
            _ => {}
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if let Optimizer::SgdMomentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return bad("momentum beta must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerSpec {
    None,
    /// Adds `lambda * ||theta - theta_init||^2` over merge-included scalars.
    L2sp {
        lambda: f64,
    },
    /// Back-merge after every `cadence` optimizer steps.
    SoupToGo {
        cadence: u64,
    },
    /// After each checked step, back-merge while the distance to the origin
    /// exceeds the metric's threshold.
    Orbit {
        metric: DistanceMetric,
        #[serde(default = "default_check_every")]
        check_every: u64,
    },
}

fn default_check_every() -> u64 {
    1
}

impl RegularizerSpec {
    pub fn orbit(metric: DistanceMetric) -> Self {
        RegularizerSpec::Orbit {
            metric,
            check_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RegularizerSpec::None => Ok(()),
            RegularizerSpec::L2sp { lambda } if lambda > 0.0 && lambda.is_finite() => Ok(()),
            RegularizerSpec::L2sp { .. } => {
                Err(Error::InvalidConfig("l2sp lambda must be > 0".to_owned()))
            }
            RegularizerSpec::SoupToGo { cadence } if cadence > 0 => Ok(()),
            RegularizerSpec::SoupToGo { .. } => Err(Error::InvalidConfig(
                "soup-to-go cadence must be > 0".to_owned(),
            )),
            RegularizerSpec::Orbit {
                metric,
                check_every,
            } => {
                if check_every == 0 {
                    return Err(Error::InvalidConfig(
                        "orbit check_every must be > 0".to_owned(),
                    ));
                }
                metric.validate()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegularizerSpec::None => "none",
            RegularizerSpec::L2sp { .. } => "l2sp",
            RegularizerSpec::SoupToGo { .. } => "soup_to_go",
            RegularizerSpec::Orbit { .. } => "orbit",
        }
    }
}

/// A step at which one or more back-merges were applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub step: u64,
    pub merges_applied: u32,
    pub before: f64,
    pub after: f64,
}

/// Mutable optimisation state shared by pretraining and fine-tuning.
struct Trainer<'a> {
    model: NgramLM,
    config: &'a TrainConfig,
    velocity: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    fn new(model: NgramLM, config: &'a TrainConfig) -> Self {
        let velocity = match config.optimizer {
            Optimizer::Sgd => Vec::new(),
            Optimizer::SgdMomentum { .. } => vec![0.0; model.params().len()],
            Optimizer::Adam { .. } => vec![0.0; 2 * model.params().len()],
        };
        // Batch sampling uses its own stream so it never aliases model init.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            model,
            config,
            velocity,
            rng,
        }
    }

    fn sample(&mut self, examples: &[Example], buf: &mut Vec<Example>) {
        buf.clear();
        for _ in 0..self.config.batch_size {
            buf.push(examples[self.rng.random_range(0..examples.len())].clone());
        }
    }

    /// One optimizer update at 1-based `step`. `anchor` adds the L2-SP term.
    fn step(
        &mut self,
        step: u64,
        batch: &[Example],
        anchor: Option<(&ParamStore, f64)>,
    ) -> Result<f64> {
        let view = self.model.view();
        let (mut loss, mut grad) = view.loss_and_grad(batch)?;
        if let Some((init, lambda)) = anchor {
            loss += l2sp_penalty(self.model.params(), init, lambda, &mut grad)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let lr = lr_at(&self.config.schedule, step - 1);
        let values = self.model.params_mut().values_mut();
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (v, g) in values.iter_mut().zip(&grad) {
                    *v = (*v as f64 - lr * g) as f32;
                }
            }
            Optimizer::SgdMomentum { beta } => {
                for ((v, g), m) in values.iter_mut().zip(&grad).zip(self.velocity.iter_mut()) {
                    *m = beta * *m + g;
                    *v = (*v as f64 - lr * *m) as f32;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let n = values.len();
                let (m, s2) = self.velocity.split_at_mut(n);
                let c1 = 1.0 - beta1.powi(step as i32);
                let c2 = 1.0 - beta2.powi(step as i32);
                for i in 0..n {
                    let g = grad[i];
                    if g == 0.0 && m[i] == 0.0 && s2[i] == 0.0 {
                        continue;
                    }
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    s2[i] = beta2 * s2[i] + (1.0 - beta2) * g * g;
                    let upd = (m[i] / c1) / ((s2[i] / c2).sqrt() + eps);
                    values[i] = (values[i] as f64 - lr * upd) as f32;
                }
            }
        }
        if self.config.weight_decay > 0.0 {
            let shrink = 1.0 - lr * self.config.weight_decay;
            let params = self.model.params_mut();
            for range in params.masked_view(MaskKind::Merge) {
                for v in &mut params.values_mut()[range] {
                    *v = (*v as f64 * shrink) as f32;
                }
            }
        }
        if !self.model.params().all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: f64::NAN,
            });
        }
        grad.clear();
        Ok(loss)
    }
}

/// `lambda * ||theta - init||^2` over merge-included scalars; adds its
/// gradient into `grad`.
pub fn l2sp_penalty(
    params: &ParamStore,
    init: &ParamStore,
    lambda: f64,
    grad: &mut [f64],
) -> Result<f64> {
    assert_compatible(params, init)?;
    let mut penalty = 0.0;
    for range in params.masked_view(MaskKind::Merge) {
        for i in range {
            let d = params.values()[i] as f64 - init.values()[i] as f64;
            penalty += d * d;
            grad[i] += 2.0 * lambda * d;
        }
    }
    Ok(lambda * penalty)
}

fn is_due(step: u64, every: u64, last: u64) -> bool {
    step.is_multiple_of(every) || step == last
}

/// Record of one pretraining evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub step: u64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<PretrainReport>,
}

/// Trains a freshly initialised model on the capability task until an
/// evaluation reaches `target` held-out accuracy. Fails when no evaluation
/// within `config.steps` does.
pub fn pretrain(
    model_config: ModelConfig,
    task: &CapabilityTask,
    config: &TrainConfig,
    target: f64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let model = NgramLM::new(model_config, config.seed)?;
    let vocab = model.vocab();
    let examples = task.examples(&vocab, model_config.context, &task.train);
    if examples.is_empty() {
        return Err(Error::InvalidConfig(
            "capability task has no training queries".to_owned(),
        ));
    }
    let mut trainer = Trainer::new(model, config);
    let mut reports = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut running = 0.0;
    let mut since = 0u64;
    let mut stopped = config.steps;
    for step in 1..=config.steps {
        trainer.sample(&examples, &mut batch);
        running += trainer.step(step, &batch, None)?;
        since += 1;
        if is_due(step, config.eval_every, config.steps) {
            let view = trainer.model.view();
            let test_accuracy = if task.test.is_empty() {
                f64::NAN
            } else {
                eval_capability(&view, task)?
            };
            reports.push(PretrainReport {
                step,
                loss: running / since as f64,
                train_accuracy: capability_accuracy(&view, task, &task.train)?,
                test_accuracy,
            });
            running = 0.0;
            since = 0;
            if test_accuracy >= target {
                stopped = step;
                break;
            }
        }
    }
    let reached = reports.last().map_or(f64::NAN, |r| r.test_accuracy);
    if reached.is_nan() || reached < target {
        return Err(Error::TargetUnreached { reached, target });
    }
    let mut checkpoint = Checkpoint::new(trainer.model.into_params(), stopped);
    checkpoint.rng_seed = config.seed;
    checkpoint.tag = serde_json::to_string(&model_config)?;
    Ok(PretrainOutcome {
        checkpoint,
        reports,
    })
}

/// What fine-tuning evaluates against.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub world: &'a RetrievalWorld,
    pub capability: &'a CapabilityTask,
    pub retrieval: RetrievalEvalOptions,
}

/// Evaluates one parameter state against the origin.
pub fn evaluate(
    model_config: ModelConfig,
    params: &ParamStore,
    probe: &OriginProbe,
    ctx: &EvalContext<'_>,
    step: u64,
    cumulative_merges: u64,
) -> Result<EvalReport> {
    let model = NgramLM::from_params(model_config, params.clone())?;
    let view = model.view();
    let ranking = eval_retrieval(&view, ctx.world, &ctx.retrieval)?;
    Ok(EvalReport {
        step,
        capability_accuracy: eval_capability(&view, ctx.capability)?,
        recall_at_k: ranking.recall,
        ndcg_at_k: ranking.ndcg,
        k: ctx.retrieval.k,
        sd: probe.sd(params)?,
        l2: probe.l2(params)?,
        cumulative_merges,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub final_checkpoint: Checkpoint,
    pub reports: Vec<EvalReport>,
    pub events: Vec<MergeEvent>,
    /// Snapshots at step 0, every `checkpoint_every` steps and the last step.
    pub checkpoints: Vec<Checkpoint>,
    /// Largest number of back-merges needed within a single step.
    pub max_merges_per_step: u32,
    /// For sign-dissimilarity ORBIT: largest `recovery_bound` of a pre-merge
    /// state, to compare against `max_merges_per_step`.
    pub max_recovery_bound: u32,
}

/// Fine-tunes `init` on the retrieval task under `reg`.
pub fn finetune(
    model_config: ModelConfig,
    init: &Checkpoint,
    ctx: &EvalContext<'_>,
    config: &TrainConfig,
    reg: &RegularizerSpec,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    reg.validate()?;
    let model = NgramLM::from_params(model_config, init.store.clone())?;
    let origin = init.store.clone();
    let probe = OriginProbe::new(origin.clone());
    if let RegularizerSpec::Orbit { metric, .. } = reg {
        if metric.kind == MetricKind::Sd {
            let zeros = origin
                .masked_values(MaskKind::Distance)
                .filter(|v| *v == 0.0)
                .count();
            if zeros > 0 {
                return Err(Error::Domain(format!(
                    "origin has {zeros} zero-valued distance-included scalars; sign-dissimilarity merging cannot recover them"
                )));
            }
        }
    }
    let examples = ctx
        .world
        .train_examples(&model.vocab(), model_config.context);
    if examples.is_empty() {
        return Err(Error::InvalidConfig(
            "retrieval world has no training examples".to_owned(),
        ));
    }

    let tag = serde_json::to_string(&model_config)?;
    let snapshot = |params: &ParamStore, step: u64, merges: u64| Checkpoint {
        store: params.clone(),
        step,
        cumulative_merges: merges,
        rng_seed: config.seed,
        tag: tag.clone(),
    };

    let mut trainer = Trainer::new(model, config);
    let mut cumulative: u64 = 0;
    let mut events = Vec::new();
    let mut reports = vec![evaluate(model_config, &origin, &probe, ctx, 0, 0)?];
    let mut checkpoints = vec![snapshot(&origin, 0, 0)];
    let mut max_merges_per_step = 0u32;
    let mut max_recovery_bound = 0u32;
    let mut batch = Vec::with_capacity(config.batch_size);
    let anchor = match reg {
        RegularizerSpec::L2sp { lambda } => Some((&origin, *lambda)),
        _ => None,
    };

    for step in 1..=config.steps {
        trainer.sample(&examples, &mut batch);
        trainer.step(step, &batch, anchor)?;

        match *reg {
            RegularizerSpec::SoupToGo { cadence } if step % cadence == 0 => {
                let params = trainer.model.params_mut();
                let before = probe.sd(params)?;
                back_merge_in_place(params, &origin)?;
                cumulative += 1;
                events.push(MergeEvent {
                    step,
                    merges_applied: 1,
                    before,
                    after: probe.sd(params)?,
                });
                max_merges_per_step = max_merges_per_step.max(1);
            }
            RegularizerSpec::Orbit {
                metric,
                check_every,
            } if step % check_every == 0 => {
                let params = trainer.model.params_mut();
                let pre = params.clone();
                let report = merge_until_within(params, &origin, &probe, &metric, step)?;
                if report.merges_applied > 0 {
                    if metric.kind == MetricKind::Sd {
                        max_recovery_bound =
                            max_recovery_bound.max(crate::merge::recovery_bound(&pre, &origin)?);
                    }
                    cumulative += report.merges_applied as u64;
                    max_merges_per_step = max_merges_per_step.max(report.merges_applied);
                    events.push(MergeEvent {
                        step,
                        merges_applied: report.merges_applied,
                        before: report.pre_distance,
                        after: report.post_distance,
                    });
                }
            }
            _ => {}
        }

        if is_due(step, config.eval_every, config.steps) {
            reports.push(evaluate(
                model_config,
                trainer.model.params(),
                &probe,
                ctx,
                step,
                cumulative,
            )?);
        }
        if is_due(step, config.checkpoint_every, config.steps) {
            checkpoints.push(snapshot(trainer.model.params(), step, cumulative));
        }
    }

    let final_checkpoint = snapshot(trainer.model.params(), config.steps, cumulative);
    Ok(FinetuneOutcome {
        final_checkpoint,
        reports,
        events,
        checkpoints,
        max_merges_per_step,
        max_recovery_bound,
    })
}

/// Back-merges `params` toward `origin` until `metric` is within its
/// threshold.
pub fn merge_until_within(
    params: &mut ParamStore,
    origin: &ParamStore,
    probe: &OriginProbe,
    metric: &DistanceMetric,
    step: u64,
) -> Result<MergeReport> {
    assert_compatible(params, origin)?;
    let pre_distance = probe.measure(metric.kind, params)?;
    let mut distance = pre_distance;
    let mut merges_applied = 0u32;
    while distance > metric.threshold {
        if merges_applied == MAX_MERGES_PER_STEP {
            return Err(Error::MergeLoopRunaway {
                step,
                merges: merges_applied,
                distance,
            });
        }
        back_merge_in_place(params, origin)?;
        merges_applied += 1;
        distance = probe.measure(metric.kind, params)?;
    }
    Ok(MergeReport {
        merges_applied,
        pre_distance,
        post_distance: distance,
        metric: *metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_landmarks() {
        let s = LrSchedule::CosineWithWarmup {
            peak: 1.0,
            min: 0.1,
            warmup_steps: 10,
            decay_steps: 20,
        };
        assert!((lr_at(&s, 0) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(&s, 10), 1.0);
        assert_eq!(lr_at(&s, 9), 1.0);
        assert!((lr_at(&s, 30) - 0.1).abs() < 1e-15);
        assert!((lr_at(&s, 20) - 0.55).abs() < 1e-12);
        assert_eq!(lr_at(&s, 1000), 0.1);
        assert_eq!(lr_at(&LrSchedule::Constant { lr: 0.3 }, 77), 0.3);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig {
            steps: 30,
            batch_size: 4,
            schedule: LrSchedule::CosineWithWarmup {
                peak: 1.0,
                min: 0.0,
                warmup_steps: 10,
                decay_steps: 20,
            },
            optimizer: Optimizer::SgdMomentum { beta: 0.9 },
            eval_every: 10,
            checkpoint_every: 10,
            seed: 1,
            weight_decay: 0.0,
        };
        ok.validate().unwrap();
        let mut bad = ok;
        bad.steps = 29;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.schedule = LrSchedule::Constant { lr: 0.0 };
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.optimizer = Optimizer::SgdMomentum { beta: 1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn regularizer_validation() {
        assert!(RegularizerSpec::orbit(DistanceMetric::l2(0.0))
            .validate()
            .is_err());
        assert!(RegularizerSpec::orbit(DistanceMetric::sd(0.0))
            .validate()
            .is_ok());
        assert!(RegularizerSpec::SoupToGo { cadence: 0 }.validate().is_err());
        assert!(RegularizerSpec::L2sp { lambda: 0.0 }.validate().is_err());
    }

    #[test]
    fn regularizer_json_shape() {
        let r: RegularizerSpec =
            serde_json::from_str(r#"{"kind":"orbit","metric":{"kind":"sd","threshold":0.01}}"#)
                .unwrap();
        assert_eq!(r, RegularizerSpec::orbit(DistanceMetric::sd(0.01)));
        let inf: RegularizerSpec = serde_json::from_str(
            r#"{"kind":"orbit","metric":{"kind":"sd","threshold":"inf"},"check_every":1}"#,
        )
        .unwrap();
        assert_eq!(
            inf,
            RegularizerSpec::orbit(DistanceMetric::sd(f64::INFINITY))
        );
        assert!(serde_json::from_str::<RegularizerSpec>(
            r#"{"kind":"soup_to_go","cadence":3,"x":1}"#
        )
        .is_err());
    }
}
