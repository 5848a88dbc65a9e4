//! The training loop shared by every method: per-step batch sampling, group
//! rollouts under the pre-update parameter snapshot, method-dispatched
//! gradient accumulation, and the ascent update. All randomness derives from
//! (seed, step, lane) so runs are reproducible byte-for-byte.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    gpg_grad_into, grpo_grad_into, latro_grad_into, raftpp_grad_into, sft_grad_into,
    BaselineConfig,
};
use crate::error::{LabError, Result};
use crate::grad::GradAccum;
use crate::itro::{filter_valid, itro_step_grad_into, rollout_group, ItroConfig};
use crate::metrics::{eval_accuracy, Decode};
use crate::policy::{init_policy, ArchKind, Init, Policy};
use crate::tasks::{all_instances, sample_instance, TaskFamilySpec, TaskInstance, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Itro,
    Sft,
    Latro,
    Raftpp,
    Gpg,
    Grpo,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Itro => "itro",
            Method::Sft => "sft",
            Method::Latro => "latro",
            Method::Raftpp => "raftpp",
            Method::Gpg => "gpg",
            Method::Grpo => "grpo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itro" => Ok(Method::Itro),
            "sft" => Ok(Method::Sft),
            "latro" => Ok(Method::Latro),
            "raftpp" => Ok(Method::Raftpp),
            "gpg" => Ok(Method::Gpg),
            "grpo" => Ok(Method::Grpo),
            other => Err(LabError::InvalidParameter(format!(
                "unknown method '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub method: Method,
    pub task: TaskFamilySpec,
    pub arch: ArchKind,
    pub window: usize,
    pub init_noise: f64,
    pub itro: ItroConfig,
    pub baseline: BaselineConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(LabError::InvalidParameter("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(LabError::InvalidParameter(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.eval_every < 1 {
            return Err(LabError::InvalidParameter(
                "eval_every must be >= 1".into(),
            ));
        }
        self.task.validate()?;
        self.itro.validate()?;
        self.baseline.validate()?;
        Ok(())
    }
}

/// One line of the metrics stream. Wall-clock time is deliberately absent:
/// identical configs must produce identical streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub method: String,
    pub objective_value: f64,
    pub mean_reward: f64,
    pub accuracy: Option<f64>,
    pub mean_rationale_len: f64,
    pub mean_w: f64,
    pub clip_fraction: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub steps_run: usize,
    pub skipped_steps: usize,
    pub final_accuracy: f64,
}

/// Lane id reserved for evaluation-time sampling so it never collides with a
/// batch lane.
const EVAL_LANE: u64 = u64::MAX;

/// Independent stream per (seed, step, lane); ChaCha keying makes collisions
/// between lanes impossible rather than merely unlikely.
pub fn derived_rng(seed: u64, step: u64, lane: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&lane.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub struct Trainer {
    pub settings: TrainSettings,
    pub policy: Policy,
    /// Frozen copy of the initial parameters; KL reference for latro/grpo.
    pub initial_policy: Policy,
    pub vocab: Vocabulary,
    instances: Vec<TaskInstance>,
    step: usize,
    skipped_steps: usize,
}

impl Trainer {
    pub fn new(settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        let mut init_rng = derived_rng(settings.seed, 0, 0);
        let init = if settings.init_noise == 0.0 {
            Init::Uniform
        } else {
            Init::SeededNoise(settings.init_noise)
        };
        let policy = init_policy(
            settings.arch,
            &settings.task,
            settings.window,
            init,
            &mut init_rng,
        )?;
        let vocab = settings.task.vocab();
        let instances = all_instances(&settings.task);
        Ok(Trainer {
            initial_policy: policy.clone(),
            policy,
            vocab,
            instances,
            step: 0,
            skipped_steps: 0,
            settings,
        })
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn skipped_steps(&self) -> usize {
        self.skipped_steps
    }

    /// Greedy accuracy over the whole enumerable query family.
    pub fn greedy_accuracy(&self) -> Result<f64> {
        let mut rng = derived_rng(self.settings.seed, self.step as u64, EVAL_LANE);
        eval_accuracy(
            &self.policy,
            &self.instances,
            &self.vocab,
            Decode::Greedy,
            self.settings.itro.t_max,
            &mut rng,
        )
    }

    /// Mean length of correct sampled rationales at the current parameters,
    /// using the evaluation RNG lane.
    pub fn mean_correct_length(&self, k: usize) -> Result<Option<f64>> {
        let mut rng = derived_rng(self.settings.seed, self.step as u64, EVAL_LANE);
        crate::metrics::mean_correct_length(
            &self.policy,
            &self.instances,
            &self.vocab,
            k,
            self.settings.itro.temperature,
            self.settings.itro.t_max,
            &mut rng,
        )
    }

    /// Run one training iteration and return its metrics record.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        self.step += 1;
        let step = self.step;
        let s = &self.settings;
        let snapshot = self.policy.clone();
        let mut acc = GradAccum::new(self.policy.n_params());

        let mut objective = 0.0;
        let mut contributing = 0usize;
        let mut reward_sum = 0.0;
        let mut rollout_count = 0usize;
        let mut length_sum = 0usize;
        let mut w_sum = 0.0;
        let mut clip_sum = 0.0;
        let mut w_queries = 0usize;
        let scale = 1.0 / s.batch_size as f64;

        for lane in 0..s.batch_size {
            let mut rng = derived_rng(s.seed, step as u64, lane as u64);
            let instance = sample_instance(&s.task, &mut rng);
            let group = rollout_group(&snapshot, &instance, &self.vocab, &s.itro, lane, &mut rng)?;
            for r in &group.rationales {
                reward_sum += r.reward;
                length_sum += r.z.len();
                rollout_count += 1;
            }

            match s.method {
                Method::Sft => {
                    let stats = sft_grad_into(&snapshot, &instance, scale, &mut acc)?;
                    objective += stats.objective;
                    contributing += 1;
                }
                Method::Itro => {
                    let valid = filter_valid(&group);
                    if valid.is_empty() {
                        continue;
                    }
                    let (value, stats) = itro_step_grad_into(
                        &snapshot,
                        &instance,
                        &self.vocab,
                        &valid,
                        &s.itro,
                        &mut rng,
                        scale,
                        &mut acc,
                    )?;
                    objective += value;
                    w_sum += stats.mean_w;
                    clip_sum += stats.clip_fraction;
                    w_queries += 1;
                    contributing += 1;
                }
                Method::Raftpp => {
                    match raftpp_grad_into(
                        &snapshot, &snapshot, &instance, &group, &s.baseline, scale, &mut acc,
                    ) {
                        Ok(stats) => {
                            objective += stats.objective;
                            clip_sum += stats.clip_fraction;
                            w_queries += 1;
                            contributing += 1;
                        }
                        Err(LabError::EmptyFilteredSet) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Method::Grpo => {
                    let reference =
                        (s.baseline.beta_kl > 0.0).then_some(&self.initial_policy);
                    let stats = grpo_grad_into(
                        &snapshot,
                        &snapshot,
                        reference,
                        &instance,
                        &group,
                        &s.baseline,
                        scale,
                        &mut acc,
                    )?;
                    objective += stats.objective;
                    clip_sum += stats.clip_fraction;
                    w_queries += 1;
                    contributing += 1;
                }
                Method::Gpg => {
                    let stats =
                        gpg_grad_into(&snapshot, &instance, &group, &s.baseline, scale, &mut acc)?;
                    objective += stats.objective;
                    contributing += 1;
                }
                Method::Latro => {
                    let stats = latro_grad_into(
                        &snapshot,
                        &self.initial_policy,
                        &instance,
                        &self.vocab,
                        &group,
                        &s.baseline,
                        s.itro.t_max,
                        scale,
                        &mut acc,
                    )?;
                    objective += stats.objective;
                    contributing += 1;
                }
            }
        }

        let skipped = contributing == 0;
        if skipped {
            self.skipped_steps += 1;
        } else {
            acc.apply_to(&mut self.policy.params, s.itro.learning_rate);
        }

        let accuracy = if step % s.eval_every == 0 || step == s.steps {
            Some(self.greedy_accuracy()?)
        } else {
            None
        };

        let record = MetricsRecord {
            step,
            method: s.method.name().to_string(),
            objective_value: if contributing > 0 {
                objective / contributing as f64
            } else {
                0.0
            },
            mean_reward: reward_sum / rollout_count as f64,
            accuracy,
            mean_rationale_len: length_sum as f64 / rollout_count as f64,
            mean_w: if w_queries > 0 { w_sum / w_queries as f64 } else { 0.0 },
            clip_fraction: if w_queries > 0 { clip_sum / w_queries as f64 } else { 0.0 },
            skipped,
        };
        if !record.objective_value.is_finite() {
            return Err(LabError::NonFiniteLoss);
        }
        Ok(record)
    }

    /// Run the loop to completion; the sink receives every metrics record.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<TrainingReport> {
        while self.step < self.settings.steps {
            let record = self.step()?;
            sink(&record)?;
        }
        Ok(TrainingReport {
            steps_run: self.step,
            skipped_steps: self.skipped_steps,
            final_accuracy: self.greedy_accuracy()?,
        })
    }
}
