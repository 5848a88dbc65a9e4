//! Exact brute-force computations over the enumerable rationale space:
//! marginal likelihood, true Bayes posterior, exact gradients, and KL
//! divergences. Every estimator elsewhere in the crate is tested against
//! these.

use std::collections::HashMap;

use crate::error::{LabError, Result};
use crate::grad::GradAccum;
use crate::policy::{Context, GradientVector, Policy};
use crate::tasks::{answer_of, TaskInstance, Token, Vocabulary, ENUMERATION_BOUND};

/// Probabilities whose log falls below this are treated as exact zeros and
/// counted as underflows.
const LOG_UNDERFLOW: f64 = -745.0;

#[derive(Debug, Clone)]
pub struct RationaleEntry {
    pub tokens: Vec<Token>,
    pub logprob: f64,
    pub prob: f64,
    /// true when the sequence ends at its first EOS within T_max;
    /// false for truncated (no-EOS) outcomes carrying their prefix mass
    pub terminated: bool,
}

#[derive(Debug, Clone)]
pub struct RationaleSet {
    pub entries: Vec<RationaleEntry>,
    pub underflow_count: usize,
}

impl RationaleSet {
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.prob).sum()
    }
}

/// Exhaustively enumerate every outcome of ancestral sampling up to `t_max`
/// tokens, in lexicographic token order. Complete sequences end at their
/// first EOS; length-t_max sequences without EOS are carried as truncated
/// outcomes so the masses partition unity.
pub fn enumerate(policy: &Policy, ctx: &Context, t_max: usize, eos: Token) -> Result<RationaleSet> {
    let v = policy.vocab_size() as f64;
    let size = v.powi(t_max as i32);
    if size > ENUMERATION_BOUND {
        return Err(LabError::SpaceTooLarge {
            size,
            bound: ENUMERATION_BOUND,
        });
    }

    let mut set = RationaleSet {
        entries: Vec::new(),
        underflow_count: 0,
    };
    let mut prefix = Vec::with_capacity(t_max);
    walk(policy, ctx, t_max, eos, &mut prefix, 0.0, &mut set)?;
    Ok(set)
}

fn walk(
    policy: &Policy,
    ctx: &Context,
    t_max: usize,
    eos: Token,
    prefix: &mut Vec<Token>,
    logprob: f64,
    set: &mut RationaleSet,
) -> Result<()> {
    let dist = policy.next_dist(ctx, prefix)?;
    for tok in 0..policy.vocab_size() {
        let lp = logprob + dist.probs[tok].ln();
        prefix.push(tok);
        if tok == eos {
            push_entry(set, prefix.clone(), lp, true);
        } else if prefix.len() == t_max {
            push_entry(set, prefix.clone(), lp, false);
        } else {
            walk(policy, ctx, t_max, eos, prefix, lp, set)?;
        }
        prefix.pop();
    }
    Ok(())
}

fn push_entry(set: &mut RationaleSet, tokens: Vec<Token>, logprob: f64, terminated: bool) {
    let prob = if logprob < LOG_UNDERFLOW {
        set.underflow_count += 1;
        0.0
    } else {
        logprob.exp()
    };
    set.entries.push(RationaleEntry {
        tokens,
        logprob,
        prob,
        terminated,
    });
}

/// Valid set Z_y: terminated entries whose extracted answer equals y.
pub fn valid_entries<'a>(
    set: &'a RationaleSet,
    y: Token,
    vocab: &Vocabulary,
) -> Vec<&'a RationaleEntry> {
    set.entries
        .iter()
        .filter(|e| e.terminated && answer_of(&e.tokens, vocab) == Some(y))
        .collect()
}

/// Marginal likelihood of the correct answer: sum of forward probabilities
/// over all valid rationales.
pub fn marginal(
    policy: &Policy,
    instance: &TaskInstance,
    t_max: usize,
    vocab: &Vocabulary,
) -> Result<f64> {
    let ctx = Context::query(&instance.x);
    let set = enumerate(policy, &ctx, t_max, vocab.eos())?;
    Ok(valid_entries(&set, instance.y, vocab)
        .iter()
        .map(|e| e.prob)
        .sum())
}

/// True Bayes posterior over rationales given the answer:
/// pi(z|x,y) = pi(z|x) / pi(y|x) on Z_y, zero elsewhere.
pub fn true_posterior(
    policy: &Policy,
    instance: &TaskInstance,
    t_max: usize,
    vocab: &Vocabulary,
) -> Result<Vec<(Vec<Token>, f64)>> {
    let ctx = Context::query(&instance.x);
    let set = enumerate(policy, &ctx, t_max, vocab.eos())?;
    let valid = valid_entries(&set, instance.y, vocab);
    let marg: f64 = valid.iter().map(|e| e.prob).sum();
    if marg <= 0.0 {
        return Err(LabError::AnswerUnreachable);
    }
    Ok(valid
        .iter()
        .map(|e| (e.tokens.clone(), e.prob / marg))
        .collect())
}

/// Exact gradient of the marginal log-likelihood, accumulated directly from
/// the enumeration: sum over Z_y of [pi(z|x) / pi(y|x)] * grad log pi(z|x).
pub fn mll_grad_exact(
    policy: &Policy,
    instance: &TaskInstance,
    t_max: usize,
    vocab: &Vocabulary,
) -> Result<GradientVector> {
    let ctx = Context::query(&instance.x);
    let set = enumerate(policy, &ctx, t_max, vocab.eos())?;
    let valid = valid_entries(&set, instance.y, vocab);
    let marg: f64 = valid.iter().map(|e| e.prob).sum();
    if marg <= 0.0 {
        return Err(LabError::AnswerUnreachable);
    }
    let mut acc = GradAccum::new(policy.n_params());
    for e in valid {
        policy.grad_logprob_into(&ctx, &e.tokens, e.prob / marg, &mut acc)?;
    }
    Ok(acc.into_dense())
}

/// The posterior-expectation route: expectation of grad log pi(z|x) under the
/// true posterior. Identical to `mll_grad_exact` by the gradient identity.
pub fn posterior_grad_expect(
    policy: &Policy,
    instance: &TaskInstance,
    t_max: usize,
    vocab: &Vocabulary,
) -> Result<GradientVector> {
    let posterior = true_posterior(policy, instance, t_max, vocab)?;
    let ctx = Context::query(&instance.x);
    let mut acc = GradAccum::new(policy.n_params());
    for (z, weight) in &posterior {
        policy.grad_logprob_into(&ctx, z, *weight, &mut acc)?;
    }
    Ok(acc.into_dense())
}

/// KL between the true posterior and the estimated (answer-conditioned)
/// posterior, both as sequence distributions over length-<=T_max completions.
#[derive(Debug, Clone)]
pub struct KlResult {
    pub value: f64,
    pub support_size: usize,
    /// mass of complete sequences under the conditioned policy before
    /// renormalization
    pub q_complete_mass: f64,
}

pub fn kl_true_vs_estimated(
    policy: &Policy,
    instance: &TaskInstance,
    t_max: usize,
    vocab: &Vocabulary,
) -> Result<KlResult> {
    let cond = Context::answer_conditioned(instance, vocab);
    kl_true_vs_estimated_ctx(policy, instance, &cond, t_max, vocab)
}

/// Same computation with an explicit conditioned context, for toy state
/// spaces whose vocabularies carry no ANS/SEP tokens.
pub fn kl_true_vs_estimated_ctx(
    policy: &Policy,
    instance: &TaskInstance,
    conditioned: &Context,
    t_max: usize,
    vocab: &Vocabulary,
) -> Result<KlResult> {
    let p = true_posterior(policy, instance, t_max, vocab)?;

    let q_set = enumerate(policy, conditioned, t_max, vocab.eos())?;
    let q_complete_mass: f64 = q_set
        .entries
        .iter()
        .filter(|e| e.terminated)
        .map(|e| e.prob)
        .sum();
    let q_map: HashMap<&[Token], f64> = q_set
        .entries
        .iter()
        .filter(|e| e.terminated)
        .map(|e| (e.tokens.as_slice(), e.prob / q_complete_mass))
        .collect();

    let mut kl = 0.0;
    for (z, pz) in &p {
        if *pz == 0.0 {
            continue;
        }
        let qz = q_map.get(z.as_slice()).copied().unwrap_or(0.0);
        if qz <= 0.0 {
            return Err(LabError::AbsoluteContinuity);
        }
        kl += pz * (pz / qz).ln();
    }
    Ok(KlResult {
        value: kl,
        support_size: p.len(),
        q_complete_mass,
    })
}

/// Central finite differences of an arbitrary scalar loss over the policy
/// parameters.
pub fn fd_grad(
    loss_fn: &mut dyn FnMut(&Policy) -> Result<f64>,
    policy: &Policy,
    h: f64,
) -> Result<GradientVector> {
    let coords: Vec<usize> = (0..policy.n_params()).collect();
    let vals = fd_grad_coords(loss_fn, policy, h, &coords)?;
    Ok(GradientVector(vals))
}

/// Central finite differences restricted to selected coordinates.
pub fn fd_grad_coords(
    loss_fn: &mut dyn FnMut(&Policy) -> Result<f64>,
    policy: &Policy,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(LabError::InvalidParameter("fd step must be positive".into()));
    }
    let mut probe = policy.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let plus = loss_fn(&probe)?;
        probe.params[i] = orig - h;
        let minus = loss_fn(&probe)?;
        probe.params[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LabError::NonFiniteLoss);
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}
