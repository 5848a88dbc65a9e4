//! Executable identity battery: every mathematical identity the library
//! relies on, checked by brute-force enumeration over seeded random policies
//! and instances, with per-identity maximum errors.

use serde::Serialize;
use std::collections::HashMap;

use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::itro::correction_factor;
use crate::oracle::{
    enumerate, fd_grad_coords, kl_true_vs_estimated, mll_grad_exact, posterior_grad_expect,
    true_posterior, valid_entries,
};
use crate::policy::{init_policy, Context, Init, Policy};
use crate::tasks::{sample_instance, TaskFamilySpec, TaskInstance, Token};
use crate::trainer::derived_rng;

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub identity: String,
    pub instances_tested: usize,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn report(identity: &str, tested: usize, max_err: f64, tol: f64) -> IdentityReport {
    IdentityReport {
        identity: identity.to_string(),
        instances_tested: tested,
        max_abs_err: max_err,
        tolerance: tol,
        pass: max_err <= tol,
    }
}

fn seeded_pair(
    task: &TaskFamilySpec,
    cfg: &RunConfig,
    lane: u64,
) -> Result<(Policy, TaskInstance)> {
    let mut rng = derived_rng(cfg.seed, 0x07ac1e, lane);
    let policy = init_policy(cfg.arch()?, task, cfg.policy_window, Init::SeededNoise(1.0), &mut rng)?;
    let instance = sample_instance(task, &mut rng);
    Ok((policy, instance))
}

/// Gradient identity: the exact marginal-log-likelihood gradient equals the
/// posterior expectation of the rationale score function.
fn check_gradient_identity(task: &TaskFamilySpec, cfg: &RunConfig) -> Result<IdentityReport> {
    let vocab = task.vocab();
    let mut max_err = 0.0f64;
    for lane in 0..cfg.oracle_pairs {
        let (policy, instance) = seeded_pair(task, cfg, lane as u64)?;
        let a = mll_grad_exact(&policy, &instance, task.t_max, &vocab)?;
        let b = posterior_grad_expect(&policy, &instance, task.t_max, &vocab)?;
        max_err = max_err.max(a.sub(&b).linf_norm());
    }
    Ok(report("gradient_identity", cfg.oracle_pairs, max_err, 1e-10))
}

/// Enumeration partitions probability: terminated plus truncated mass is 1.
fn check_mass_conservation(task: &TaskFamilySpec, cfg: &RunConfig) -> Result<IdentityReport> {
    let vocab = task.vocab();
    let mut max_err = 0.0f64;
    for lane in 0..cfg.oracle_pairs {
        let (policy, instance) = seeded_pair(task, cfg, lane as u64)?;
        let set = enumerate(&policy, &Context::query(&instance.x), task.t_max, vocab.eos())?;
        max_err = max_err.max((set.total_mass() - 1.0).abs());
    }
    Ok(report("enumeration_mass", cfg.oracle_pairs, max_err, 1e-9))
}

/// Posterior consistency: pi(z|x,y) * pi(y|x) recovers pi(z|x) on the valid
/// set, and the posterior sums to one.
fn check_bayes_consistency(task: &TaskFamilySpec, cfg: &RunConfig) -> Result<IdentityReport> {
    let vocab = task.vocab();
    let mut max_err = 0.0f64;
    for lane in 0..cfg.oracle_pairs {
        let (policy, instance) = seeded_pair(task, cfg, lane as u64)?;
        let ctx = Context::query(&instance.x);
        let set = enumerate(&policy, &ctx, task.t_max, vocab.eos())?;
        let valid = valid_entries(&set, instance.y, &vocab);
        let marg: f64 = valid.iter().map(|e| e.prob).sum();
        let probs: HashMap<&[Token], f64> =
            valid.iter().map(|e| (e.tokens.as_slice(), e.prob)).collect();
        let posterior = true_posterior(&policy, &instance, task.t_max, &vocab)?;
        let total: f64 = posterior.iter().map(|(_, p)| p).sum();
        max_err = max_err.max((total - 1.0).abs());
        for (z, p) in &posterior {
            let direct = probs[z.as_slice()];
            max_err = max_err.max((p * marg - direct).abs());
        }
    }
    Ok(report("bayes_consistency", cfg.oracle_pairs, max_err, 1e-12))
}

/// Analytic gradient vs central finite differences of the log-marginal, on
/// the touched coordinates (relative error).
fn check_grad_vs_fd(task: &TaskFamilySpec, cfg: &RunConfig) -> Result<IdentityReport> {
    let vocab = task.vocab();
    let pairs = cfg.oracle_pairs.min(5);
    let mut max_err = 0.0f64;
    for lane in 0..pairs {
        let (policy, instance) = seeded_pair(task, cfg, lane as u64)?;
        let g = mll_grad_exact(&policy, &instance, task.t_max, &vocab)?;
        // probe a deterministic subset of the active coordinates
        let coords: Vec<usize> = (0..policy.n_params())
            .filter(|i| g.0[*i].abs() > 1e-6)
            .step_by(7)
            .take(40)
            .collect();
        let mut loss = |p: &Policy| {
            Ok(crate::oracle::marginal(p, &instance, task.t_max, &vocab)?.ln())
        };
        let fd = fd_grad_coords(&mut loss, &policy, 1e-6, &coords)?;
        for (fd_v, &i) in fd.iter().zip(coords.iter()) {
            max_err = max_err.max(((fd_v - g.0[i]) / g.0[i]).abs());
        }
    }
    Ok(report("grad_vs_fd", pairs, max_err, 1e-5))
}

/// Sequence-level importance weight factorizes into per-token correction
/// factors: log w_seq = sum_t log w_t (unclipped).
fn check_factorization(task: &TaskFamilySpec, cfg: &RunConfig) -> Result<IdentityReport> {
    let vocab = task.vocab();
    let pairs = cfg.oracle_pairs.max(100);
    let mut max_err = 0.0f64;
    for lane in 0..pairs {
        let (policy, instance) = seeded_pair(task, cfg, lane as u64)?;
        let mut rng = derived_rng(cfg.seed, 0xfac7, lane as u64);
        let fwd_ctx = Context::query(&instance.x);
        let cond_ctx = Context::answer_conditioned(&instance, &vocab);
        let z = policy.sample_sequence(&fwd_ctx, 1.0, task.t_max, vocab.eos(), &mut rng)?;
        let log_w_seq = policy.logprob(&cond_ctx, &z)? - policy.logprob(&fwd_ctx, &z)?;
        let mut log_w_tokens = 0.0;
        for (t, tok) in z.iter().enumerate() {
            let w = correction_factor(&policy, &instance, &vocab, &z[..t], *tok, f64::INFINITY)?;
            log_w_tokens += w.ln();
        }
        max_err = max_err.max((log_w_seq - log_w_tokens).abs());
    }
    Ok(report("weight_factorization", pairs, max_err, 1e-9))
}

/// KL(true posterior vs estimated posterior) computed by the library against
/// an independent direct sum, plus nonnegativity.
fn check_kl_dual_route(task: &TaskFamilySpec, cfg: &RunConfig) -> Result<IdentityReport> {
    let vocab = task.vocab();
    let pairs = cfg.oracle_pairs.min(20);
    let mut max_err = 0.0f64;
    for lane in 0..pairs {
        let (policy, instance) = seeded_pair(task, cfg, lane as u64)?;
        let kl = kl_true_vs_estimated(&policy, &instance, task.t_max, &vocab)?;
        if kl.value < 0.0 {
            max_err = max_err.max(-kl.value);
        }
        // independent route: enumerate both distributions from scratch
        let p = true_posterior(&policy, &instance, task.t_max, &vocab)?;
        let cond = Context::answer_conditioned(&instance, &vocab);
        let q_set = enumerate(&policy, &cond, task.t_max, vocab.eos())?;
        let q_mass: f64 = q_set.entries.iter().filter(|e| e.terminated).map(|e| e.prob).sum();
        let q: HashMap<&[Token], f64> = q_set
            .entries
            .iter()
            .filter(|e| e.terminated)
            .map(|e| (e.tokens.as_slice(), e.prob / q_mass))
            .collect();
        let direct: f64 = p
            .iter()
            .map(|(z, pz)| pz * (pz / q[z.as_slice()]).ln())
            .sum();
        max_err = max_err.max((kl.value - direct).abs());
    }
    Ok(report("kl_dual_route", pairs, max_err, 1e-9))
}

/// Run the full battery; the boolean is the overall verdict.
pub fn run_oracle_check(cfg: &RunConfig) -> Result<(Vec<IdentityReport>, bool)> {
    let task = cfg.task_spec()?;
    let reports = vec![
        check_gradient_identity(&task, cfg)?,
        check_mass_conservation(&task, cfg)?,
        check_bayes_consistency(&task, cfg)?,
        check_grad_vs_fd(&task, cfg)?,
        check_factorization(&task, cfg)?,
        check_kl_dual_route(&task, cfg)?,
    ];
    let all_pass = reports.iter().all(|r| r.pass);
    Ok((reports, all_pass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    #[test]
    fn battery_passes_on_the_default_small_family() {
        let cfg = parse_config(
            "task.base = 2\ntask.chain_length = 1\ntask.t_max = 3\noracle.pairs = 10\nseed = 3",
        )
        .unwrap();
        let (reports, all_pass) = run_oracle_check(&cfg).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.pass, "{} failed with max err {}", r.identity, r.max_abs_err);
        }
        assert!(all_pass);
    }

    #[test]
    fn reports_serialize_as_json_lines() {
        let r = report("x", 3, 0.0, 1e-9);
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"identity\":\"x\""));
        assert!(line.contains("\"pass\":true"));
    }
}
