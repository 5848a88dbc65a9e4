//! Line-oriented `key = value` run configuration with dotted section keys.
//! Every field has a default; parsing returns a fully explicit config so the
//! run manifest can record exactly what influenced a run. Unknown keys are
//! hard errors with line numbers.

use serde::Serialize;

use crate::baselines::{BaselineConfig, FNorm};
use crate::error::{LabError, Result};
use crate::itro::{ItroConfig, RationaleAveraging};
use crate::policy::ArchKind;
use crate::tasks::{Family, TaskFamilySpec};
use crate::trainer::{Method, TrainSettings};

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub method: String,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub output_dir: String,
    pub lr: f64,
    pub task_family: String,
    pub task_base: u8,
    pub task_chain_length: usize,
    pub task_t_max: usize,
    pub policy_arch: String,
    pub policy_window: usize,
    pub policy_init_noise: f64,
    pub rollout_g: usize,
    pub rollout_temperature: f64,
    pub itro_n: usize,
    pub itro_clip_max: f64,
    pub itro_stop_grad_w: bool,
    pub itro_pool: bool,
    pub baseline_epsilon_clip: f64,
    pub baseline_beta_kl: f64,
    pub baseline_latro_kl_coef: f64,
    pub baseline_f_norm: String,
    pub baseline_advantage_epsilon: f64,
    pub eval_k: usize,
    pub eval_temperature: f64,
    pub oracle_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: "itro".into(),
            steps: 100,
            batch_size: 32,
            eval_every: 20,
            seed: 0,
            output_dir: "run_out".into(),
            lr: 0.05,
            task_family: "sum_chain".into(),
            task_base: 3,
            task_chain_length: 2,
            task_t_max: 4,
            policy_arch: "tabular".into(),
            policy_window: 3,
            policy_init_noise: 0.01,
            rollout_g: 4,
            rollout_temperature: 0.6,
            itro_n: 5,
            itro_clip_max: 200.0,
            itro_stop_grad_w: true,
            itro_pool: false,
            baseline_epsilon_clip: 0.2,
            baseline_beta_kl: 0.0,
            baseline_latro_kl_coef: 0.01,
            baseline_f_norm: "std".into(),
            baseline_advantage_epsilon: 1e-8,
            eval_k: 32,
            eval_temperature: 1.0,
            oracle_pairs: 50,
        }
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> LabError {
    LabError::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| cfg_err(line, format!("{key}: expected {kind}, got '{value}'")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(
            line,
            format!("{key}: expected true or false, got '{value}'"),
        )),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "method" => cfg.method = value.to_string(),
            "steps" => cfg.steps = parse_num(key, value, line_no, "a positive integer")?,
            "batch_size" => cfg.batch_size = parse_num(key, value, line_no, "a positive integer")?,
            "eval_every" => cfg.eval_every = parse_num(key, value, line_no, "a positive integer")?,
            "seed" => cfg.seed = parse_num(key, value, line_no, "a 64-bit unsigned integer")?,
            "output_dir" => cfg.output_dir = value.to_string(),
            "lr" => cfg.lr = parse_num(key, value, line_no, "a real number")?,
            "task.family" => cfg.task_family = value.to_string(),
            "task.base" => cfg.task_base = parse_num(key, value, line_no, "an integer in 2..=10")?,
            "task.chain_length" => {
                cfg.task_chain_length = parse_num(key, value, line_no, "a positive integer")?
            }
            "task.t_max" => cfg.task_t_max = parse_num(key, value, line_no, "a positive integer")?,
            "policy.arch" => cfg.policy_arch = value.to_string(),
            "policy.window" => {
                cfg.policy_window = parse_num(key, value, line_no, "a positive integer")?
            }
            "policy.init_noise" => {
                cfg.policy_init_noise = parse_num(key, value, line_no, "a real number")?
            }
            "rollout.G" => cfg.rollout_g = parse_num(key, value, line_no, "a positive integer")?,
            "rollout.temperature" => {
                cfg.rollout_temperature = parse_num(key, value, line_no, "a real number")?
            }
            "itro.n" => cfg.itro_n = parse_num(key, value, line_no, "a positive integer")?,
            "itro.clip_max" => cfg.itro_clip_max = parse_num(key, value, line_no, "a real number")?,
            "itro.stop_grad_w" => cfg.itro_stop_grad_w = parse_bool(key, value, line_no)?,
            "itro.pool" => cfg.itro_pool = parse_bool(key, value, line_no)?,
            "baseline.epsilon_clip" => {
                cfg.baseline_epsilon_clip = parse_num(key, value, line_no, "a real number")?
            }
            "baseline.beta_kl" => {
                cfg.baseline_beta_kl = parse_num(key, value, line_no, "a real number")?
            }
            "baseline.latro_kl_coef" => {
                cfg.baseline_latro_kl_coef = parse_num(key, value, line_no, "a real number")?
            }
            "baseline.f_norm" => cfg.baseline_f_norm = value.to_string(),
            "baseline.advantage_epsilon" => {
                cfg.baseline_advantage_epsilon = parse_num(key, value, line_no, "a real number")?
            }
            "eval.k" => cfg.eval_k = parse_num(key, value, line_no, "a positive integer")?,
            "eval.temperature" => {
                cfg.eval_temperature = parse_num(key, value, line_no, "a real number")?
            }
            "oracle.pairs" => {
                cfg.oracle_pairs = parse_num(key, value, line_no, "a positive integer")?
            }
            _ => return Err(cfg_err(line_no, format!("unknown key '{key}'"))),
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    // surface the invariant violations with config-level wording
    if cfg.itro_n < 1 {
        return Err(LabError::InvalidParameter("itro.n must be >= 1".into()));
    }
    if cfg.steps < 1 {
        return Err(LabError::InvalidParameter("steps must be >= 1".into()));
    }
    if cfg.batch_size < 1 {
        return Err(LabError::InvalidParameter("batch_size must be >= 1".into()));
    }
    if cfg.rollout_g < 1 {
        return Err(LabError::InvalidParameter("rollout.G must be >= 1".into()));
    }
    cfg.method.parse::<Method>()?;
    cfg.family()?;
    cfg.arch()?;
    cfg.f_norm()?;
    cfg.settings()?.validate()
}

impl RunConfig {
    pub fn family(&self) -> Result<Family> {
        match self.task_family.as_str() {
            "sum_chain" => Ok(Family::SumChain),
            other => Err(LabError::InvalidParameter(format!(
                "unknown task.family '{other}'"
            ))),
        }
    }

    pub fn arch(&self) -> Result<ArchKind> {
        match self.policy_arch.as_str() {
            "tabular" => Ok(ArchKind::Tabular),
            "linear" => Ok(ArchKind::Linear),
            other => Err(LabError::InvalidParameter(format!(
                "unknown policy.arch '{other}'"
            ))),
        }
    }

    pub fn f_norm(&self) -> Result<FNorm> {
        if self.baseline_f_norm == "std" {
            return Ok(FNorm::Std);
        }
        if let Some(c) = self.baseline_f_norm.strip_prefix("fixed:") {
            let c: f64 = c.parse().map_err(|_| {
                LabError::InvalidParameter(format!(
                    "baseline.f_norm: expected 'std' or 'fixed:<c>', got '{}'",
                    self.baseline_f_norm
                ))
            })?;
            return Ok(FNorm::Fixed(c));
        }
        Err(LabError::InvalidParameter(format!(
            "baseline.f_norm: expected 'std' or 'fixed:<c>', got '{}'",
            self.baseline_f_norm
        )))
    }

    pub fn task_spec(&self) -> Result<TaskFamilySpec> {
        TaskFamilySpec::new(
            self.family()?,
            self.task_base,
            self.task_chain_length,
            self.task_t_max,
        )
    }

    pub fn itro_config(&self) -> Result<ItroConfig> {
        let cfg = ItroConfig {
            group_size: self.rollout_g,
            n_candidates: self.itro_n,
            w_max: self.itro_clip_max,
            learning_rate: self.lr,
            temperature: self.rollout_temperature,
            t_max: self.task_t_max,
            stop_grad_through_w: self.itro_stop_grad_w,
            averaging: if self.itro_pool {
                RationaleAveraging::Pooled
            } else {
                RationaleAveraging::PerRationaleMean
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn baseline_config(&self) -> Result<BaselineConfig> {
        let cfg = BaselineConfig {
            epsilon_clip: self.baseline_epsilon_clip,
            beta_kl: self.baseline_beta_kl,
            latro_kl_coef: self.baseline_latro_kl_coef,
            f_norm: self.f_norm()?,
            advantage_epsilon: self.baseline_advantage_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            method: self.method.parse()?,
            task: self.task_spec()?,
            arch: self.arch()?,
            window: self.policy_window,
            init_noise: self.policy_init_noise,
            itro: self.itro_config()?,
            baseline: self.baseline_config()?,
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses_with_defaults() {
        let cfg = parse_config(
            "method = itro\nitro.n = 5\nitro.clip_max = 200\nrollout.G = 4\nseed = 7\nsteps = 100",
        )
        .unwrap();
        assert_eq!(cfg.method, "itro");
        assert_eq!(cfg.itro_n, 5);
        assert_eq!(cfg.itro_clip_max, 200.0);
        assert_eq!(cfg.rollout_g, 4);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.steps, 100);
        // defaults made explicit
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.rollout_temperature, 0.6);
        assert!(cfg.itro_stop_grad_w);
    }

    #[test]
    fn omitted_clip_max_defaults_to_200() {
        let cfg = parse_config("method = itro").unwrap();
        assert_eq!(cfg.itro_clip_max, 200.0);
        assert_eq!(cfg.itro_n, 5);
    }

    #[test]
    fn zero_n_is_rejected_with_message() {
        let err = parse_config("itro.n = 0").unwrap_err();
        assert!(err.to_string().contains("itro.n must be >= 1"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = parse_config("steps = 10\nitro.m = 3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("unknown key 'itro.m'"), "{msg}");
    }

    #[test]
    fn type_mismatch_reports_key_and_line() {
        let err = parse_config("steps = soon").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("steps"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("# a comment\n\n  seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn fixed_f_norm_parses() {
        let cfg = parse_config("baseline.f_norm = fixed:2.5").unwrap();
        assert_eq!(cfg.f_norm().unwrap(), FNorm::Fixed(2.5));
        assert!(parse_config("baseline.f_norm = weird").is_err());
    }

    #[test]
    fn settings_round_trip_all_fields() {
        let cfg = parse_config("method = grpo\nbaseline.beta_kl = 0.3\nlr = 0.2").unwrap();
        let s = cfg.settings().unwrap();
        assert_eq!(s.method, Method::Grpo);
        assert_eq!(s.baseline.beta_kl, 0.3);
        assert_eq!(s.itro.learning_rate, 0.2);
    }
}
