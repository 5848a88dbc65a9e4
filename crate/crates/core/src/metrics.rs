//! Evaluation and diagnostics: accuracy under greedy or sampled decoding,
//! rationale-length statistics, and per-token annotations (probabilities under
//! both contexts, correction factors, forward entropy).

use rand::Rng;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::itro::correction_factor;
use crate::policy::{Context, Policy};
use crate::tasks::{answer_of, TaskInstance, Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, k: usize },
}

/// Per-position diagnostics for one rationale token.
#[derive(Debug, Clone, Serialize)]
pub struct TokenAnnotation {
    pub position: usize,
    pub token: Token,
    pub forward_prob: f64,
    pub conditioned_prob: f64,
    pub w: f64,
    pub entropy_bits: f64,
}

/// Fraction of instances answered correctly. Greedy mode scores the single
/// deterministic decode; sample mode averages correct-sample fractions over k
/// draws per instance (the toy analogue of avg@k).
pub fn eval_accuracy<R: Rng>(
    policy: &Policy,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
    decode: Decode,
    t_max: usize,
    rng: &mut R,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(LabError::InvalidParameter(
            "eval requires at least one instance".into(),
        ));
    }
    let mut total = 0.0;
    for instance in instances {
        let ctx = Context::query(&instance.x);
        match decode {
            Decode::Greedy => {
                let z = policy.greedy_sequence(&ctx, t_max, vocab.eos())?;
                if answer_of(&z, vocab) == Some(instance.y) {
                    total += 1.0;
                }
            }
            Decode::Sample { temperature, k } => {
                let mut correct = 0usize;
                for _ in 0..k {
                    let z =
                        policy.sample_sequence(&ctx, temperature, t_max, vocab.eos(), rng)?;
                    if answer_of(&z, vocab) == Some(instance.y) {
                        correct += 1;
                    }
                }
                total += correct as f64 / k as f64;
            }
        }
    }
    Ok(total / instances.len() as f64)
}

/// Mean sampled rationale length in tokens, EOS included, over k samples per
/// instance.
pub fn mean_rationale_length<R: Rng>(
    policy: &Policy,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
    k: usize,
    temperature: f64,
    t_max: usize,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 {
        return Err(LabError::InvalidParameter("k must be >= 1".into()));
    }
    let mut total = 0usize;
    for instance in instances {
        let ctx = Context::query(&instance.x);
        for _ in 0..k {
            total += policy
                .sample_sequence(&ctx, temperature, t_max, vocab.eos(), rng)?
                .len();
        }
    }
    Ok(total as f64 / (instances.len() * k) as f64)
}

/// Mean length of correctly answered sampled rationales. Returns None when no
/// sample is correct.
pub fn mean_correct_length<R: Rng>(
    policy: &Policy,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
    k: usize,
    temperature: f64,
    t_max: usize,
    rng: &mut R,
) -> Result<Option<f64>> {
    let mut total = 0usize;
    let mut count = 0usize;
    for instance in instances {
        let ctx = Context::query(&instance.x);
        for _ in 0..k {
            let z = policy.sample_sequence(&ctx, temperature, t_max, vocab.eos(), rng)?;
            if answer_of(&z, vocab) == Some(instance.y) {
                total += z.len();
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total as f64 / count as f64))
}

/// Annotate every position of a rationale with its probability under the
/// forward and answer-conditioned contexts, the clipped correction factor,
/// and the Shannon entropy (bits) of the forward next-token distribution.
pub fn annotate(
    policy: &Policy,
    instance: &TaskInstance,
    vocab: &Vocabulary,
    z: &[Token],
    w_max: f64,
) -> Result<Vec<TokenAnnotation>> {
    if z.is_empty() {
        return Err(LabError::InvalidParameter(
            "cannot annotate an empty rationale".into(),
        ));
    }
    let forward_ctx = Context::query(&instance.x);
    let conditioned_ctx = Context::answer_conditioned(instance, vocab);
    let mut out = Vec::with_capacity(z.len());
    for (t, tok) in z.iter().enumerate() {
        let fwd = policy.next_dist(&forward_ctx, &z[..t])?;
        let forward_prob = fwd.probs[*tok];
        if forward_prob <= 0.0 {
            return Err(LabError::InvalidParameter(format!(
                "zero forward probability at position {t}"
            )));
        }
        let conditioned_prob = policy.next_dist(&conditioned_ctx, &z[..t])?.probs[*tok];
        let w = correction_factor(policy, instance, vocab, &z[..t], *tok, w_max)?;
        out.push(TokenAnnotation {
            position: t,
            token: *tok,
            forward_prob,
            conditioned_prob,
            w,
            entropy_bits: fwd.entropy_bits(),
        });
    }
    Ok(out)
}
