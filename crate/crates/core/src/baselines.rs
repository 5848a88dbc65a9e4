//! Comparison objectives implemented over the same policy and rollout
//! substrate as the main trainer, so head-to-head runs differ only in the
//! loss: SFT on golden rationales, LaTRO-style rationale rewards, RAFT++
//! filtered updates with clipped ratios, GPG, and GRPO.

use crate::error::{LabError, Result};
use crate::grad::GradAccum;
use crate::itro::RolloutGroup;
use crate::policy::{Context, GradientVector, Policy};
use crate::tasks::{TaskInstance, Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FNorm {
    /// Population standard deviation with an epsilon guard.
    Std,
    /// Fixed constant divisor.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineConfig {
    pub epsilon_clip: f64,
    pub beta_kl: f64,
    pub latro_kl_coef: f64,
    pub f_norm: FNorm,
    pub advantage_epsilon: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epsilon_clip: 0.2,
            beta_kl: 0.0,
            latro_kl_coef: 0.01,
            f_norm: FNorm::Std,
            advantage_epsilon: 1e-8,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_clip <= 0.0 {
            return Err(LabError::InvalidParameter(
                "baseline.epsilon_clip must be > 0".into(),
            ));
        }
        if self.beta_kl < 0.0 {
            return Err(LabError::InvalidParameter(
                "baseline.beta_kl must be >= 0".into(),
            ));
        }
        if self.advantage_epsilon <= 0.0 {
            return Err(LabError::InvalidParameter(
                "baseline.advantage_epsilon must be > 0".into(),
            ));
        }
        if let FNorm::Fixed(c) = self.f_norm {
            if c <= 0.0 {
                return Err(LabError::InvalidParameter(
                    "baseline.f_norm fixed constant must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineStats {
    pub objective: f64,
    pub clip_fraction: f64,
    pub kl_penalty: f64,
}

/// Ascent gradient of the golden-rationale log-likelihood, length-normalized.
pub fn sft_grad_into(
    policy: &Policy,
    instance: &TaskInstance,
    scale: f64,
    acc: &mut GradAccum,
) -> Result<BaselineStats> {
    let golden = instance.golden.as_ref().ok_or(LabError::MissingGolden)?;
    let ctx = Context::query(&instance.x);
    let norm = 1.0 / golden.len() as f64;
    policy.grad_logprob_into(&ctx, golden, scale * norm, acc)?;
    Ok(BaselineStats {
        objective: norm * policy.logprob(&ctx, golden)?,
        ..Default::default()
    })
}

pub fn sft_grad(policy: &Policy, instance: &TaskInstance) -> Result<GradientVector> {
    let mut acc = GradAccum::new(policy.n_params());
    sft_grad_into(policy, instance, 1.0, &mut acc)?;
    Ok(acc.into_dense())
}

/// Group-relative advantages: (r - mean) / (std + eps) in std mode, or
/// (r - mean) / c with a fixed normalizer.
pub fn group_advantages(rewards: &[f64], mode: FNorm, advantage_epsilon: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let denom = match mode {
        FNorm::Std => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            var.sqrt() + advantage_epsilon
        }
        FNorm::Fixed(c) => c,
    };
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Rationale core for answer scoring: tokens before the first EOS, capped so
/// the ANS-marked scoring state stays addressable.
fn scoring_prefix(z: &[Token], vocab: &Vocabulary, t_max: usize) -> Vec<Token> {
    let cut = z
        .iter()
        .position(|t| *t == vocab.eos())
        .unwrap_or(z.len())
        .min(t_max.saturating_sub(1));
    z[..cut].to_vec()
}

/// Log-probability the policy assigns to the answer token after the rationale
/// and a terminal ANS marker.
pub fn latro_reward(
    policy: &Policy,
    instance: &TaskInstance,
    vocab: &Vocabulary,
    z: &[Token],
    t_max: usize,
) -> Result<f64> {
    let ans = vocab
        .ans()
        .ok_or_else(|| LabError::InvalidParameter("vocabulary has no ANS token".into()))?;
    let mut prefix = scoring_prefix(z, vocab, t_max);
    prefix.push(ans);
    let ctx = Context::query(&instance.x);
    let dist = policy.next_dist(&ctx, &prefix)?;
    Ok(dist.probs[instance.y].ln())
}

/// REINFORCE-style update on rationale rewards with a leave-one-out baseline
/// and a per-state KL penalty toward the initial policy.
#[allow(clippy::too_many_arguments)]
pub fn latro_grad_into(
    policy: &Policy,
    initial_policy: &Policy,
    instance: &TaskInstance,
    vocab: &Vocabulary,
    group: &RolloutGroup,
    config: &BaselineConfig,
    t_max: usize,
    scale: f64,
    acc: &mut GradAccum,
) -> Result<BaselineStats> {
    let g = group.rationales.len();
    if g < 2 {
        return Err(LabError::GroupTooSmall(g));
    }
    let ctx = Context::query(&instance.x);
    let rewards: Vec<f64> = group
        .rationales
        .iter()
        .map(|r| latro_reward(policy, instance, vocab, &r.z, t_max))
        .collect::<Result<_>>()?;

    let mut objective = 0.0;
    for (i, rollout) in group.rationales.iter().enumerate() {
        let baseline =
            (rewards.iter().sum::<f64>() - rewards[i]) / (g as f64 - 1.0);
        let advantage = rewards[i] - baseline;
        policy.grad_logprob_into(&ctx, &rollout.z, scale * advantage / g as f64, acc)?;
        objective += rewards[i] / g as f64;
    }

    let kl = per_state_kl_grad_into(
        policy,
        initial_policy,
        &ctx,
        group,
        -scale * config.latro_kl_coef,
        acc,
    )?;
    Ok(BaselineStats {
        objective: objective - config.latro_kl_coef * kl,
        clip_fraction: 0.0,
        kl_penalty: kl,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn latro_grad(
    policy: &Policy,
    initial_policy: &Policy,
    instance: &TaskInstance,
    vocab: &Vocabulary,
    group: &RolloutGroup,
    config: &BaselineConfig,
    t_max: usize,
) -> Result<GradientVector> {
    let mut acc = GradAccum::new(policy.n_params());
    latro_grad_into(
        policy, initial_policy, instance, vocab, group, config, t_max, 1.0, &mut acc,
    )?;
    Ok(acc.into_dense())
}

/// Mean per-visited-state KL(pi_theta || pi_ref) over the group's token
/// positions, with its analytic gradient accumulated at weight `coeff`.
/// dKL/dlogit_v = p_v * ((log p_v - log r_v) - KL).
fn per_state_kl_grad_into(
    policy: &Policy,
    reference: &Policy,
    ctx: &Context,
    group: &RolloutGroup,
    coeff: f64,
    acc: &mut GradAccum,
) -> Result<f64> {
    let positions: usize = group.rationales.iter().map(|r| r.z.len()).sum();
    if positions == 0 {
        return Ok(0.0);
    }
    let norm = 1.0 / positions as f64;
    let mut total_kl = 0.0;
    for rollout in &group.rationales {
        for t in 0..rollout.z.len() {
            let prefix = &rollout.z[..t];
            let state = policy.state_ref(ctx, prefix)?;
            let p = policy.next_dist(ctx, prefix)?.probs;
            let r = reference.next_dist(ctx, prefix)?.probs;
            let kl: f64 = p
                .iter()
                .zip(r.iter())
                .filter(|(pv, _)| **pv > 0.0)
                .map(|(pv, rv)| pv * (pv / rv).ln())
                .sum();
            total_kl += norm * kl;
            if coeff != 0.0 {
                let v = policy.vocab_size();
                match &state {
                    crate::policy::StateRef::Tabular { offset } => {
                        for u in 0..v {
                            let g = p[u] * ((p[u] / r[u]).ln() - kl);
                            acc.add(offset + u, coeff * norm * g);
                        }
                    }
                    crate::policy::StateRef::Linear { feats } => {
                        let fd = match &policy.arch {
                            crate::policy::PolicyArch::Linear(l) => l.feature_dim(),
                            _ => unreachable!(),
                        };
                        for u in 0..v {
                            let g = p[u] * ((p[u] / r[u]).ln() - kl);
                            for f in feats {
                                acc.add(u * fd + f, coeff * norm * g);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(total_kl)
}

/// Filtered PPO-style surrogate on positively rewarded rationales only, with
/// implicit advantage 1: min(r_t, clip(r_t, 1-eps, 1+eps)).
pub fn raftpp_grad_into(
    policy: &Policy,
    rollout_policy: &Policy,
    instance: &TaskInstance,
    group: &RolloutGroup,
    config: &BaselineConfig,
    scale: f64,
    acc: &mut GradAccum,
) -> Result<BaselineStats> {
    let filtered: Vec<&Vec<Token>> = group
        .rationales
        .iter()
        .filter(|r| r.reward == 1.0)
        .map(|r| &r.z)
        .collect();
    if filtered.is_empty() {
        return Err(LabError::EmptyFilteredSet);
    }
    let ctx = Context::query(&instance.x);
    let upper = 1.0 + config.epsilon_clip;
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    for z in &filtered {
        let per_token = 1.0 / (z.len() as f64 * filtered.len() as f64);
        for (t, tok) in z.iter().enumerate() {
            let prefix = &z[..t];
            let state = policy.state_ref(&ctx, prefix)?;
            let probs = policy.next_dist(&ctx, prefix)?.probs;
            let old = rollout_policy.next_dist(&ctx, prefix)?.probs[*tok];
            let ratio = probs[*tok] / old;
            tokens += 1;
            if ratio > upper {
                // surrogate flat above the clip: value contributes, gradient suppressed
                clipped += 1;
                objective += per_token * upper;
            } else {
                objective += per_token * ratio;
                policy.accumulate_token_grad(&state, &probs, *tok, scale * per_token * ratio, acc);
            }
        }
    }
    Ok(BaselineStats {
        objective,
        clip_fraction: clipped as f64 / tokens as f64,
        kl_penalty: 0.0,
    })
}

pub fn raftpp_grad(
    policy: &Policy,
    rollout_policy: &Policy,
    instance: &TaskInstance,
    group: &RolloutGroup,
    config: &BaselineConfig,
) -> Result<GradientVector> {
    let mut acc = GradAccum::new(policy.n_params());
    raftpp_grad_into(policy, rollout_policy, instance, group, config, 1.0, &mut acc)?;
    Ok(acc.into_dense())
}

/// Clipped group-relative surrogate with optional per-state KL penalty toward
/// a reference policy.
#[allow(clippy::too_many_arguments)]
pub fn grpo_grad_into(
    policy: &Policy,
    rollout_policy: &Policy,
    reference_policy: Option<&Policy>,
    instance: &TaskInstance,
    group: &RolloutGroup,
    config: &BaselineConfig,
    scale: f64,
    acc: &mut GradAccum,
) -> Result<BaselineStats> {
    let g = group.rationales.len() as f64;
    let advantages = group_advantages(&group.rewards(), FNorm::Std, config.advantage_epsilon);
    let ctx = Context::query(&instance.x);
    let (lo, hi) = (1.0 - config.epsilon_clip, 1.0 + config.epsilon_clip);

    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    for (rollout, adv) in group.rationales.iter().zip(advantages.iter()) {
        let per_token = 1.0 / (g * rollout.z.len() as f64);
        for (t, tok) in rollout.z.iter().enumerate() {
            let prefix = &rollout.z[..t];
            let state = policy.state_ref(&ctx, prefix)?;
            let probs = policy.next_dist(&ctx, prefix)?.probs;
            let old = rollout_policy.next_dist(&ctx, prefix)?.probs[*tok];
            let ratio = probs[*tok] / old;
            tokens += 1;
            let clipped_out = (*adv > 0.0 && ratio > hi) || (*adv < 0.0 && ratio < lo);
            if clipped_out {
                clipped += 1;
                objective += per_token * ratio.clamp(lo, hi) * adv;
            } else {
                objective += per_token * ratio * adv;
                policy.accumulate_token_grad(
                    &state,
                    &probs,
                    *tok,
                    scale * per_token * ratio * adv,
                    acc,
                );
            }
        }
    }

    let mut kl = 0.0;
    if let Some(reference) = reference_policy {
        kl = per_state_kl_grad_into(
            policy,
            reference,
            &ctx,
            group,
            -scale * config.beta_kl,
            acc,
        )?;
    }
    Ok(BaselineStats {
        objective: objective - config.beta_kl * kl,
        clip_fraction: if tokens > 0 { clipped as f64 / tokens as f64 } else { 0.0 },
        kl_penalty: kl,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn grpo_grad(
    policy: &Policy,
    rollout_policy: &Policy,
    reference_policy: Option<&Policy>,
    instance: &TaskInstance,
    group: &RolloutGroup,
    config: &BaselineConfig,
) -> Result<GradientVector> {
    let mut acc = GradAccum::new(policy.n_params());
    grpo_grad_into(
        policy,
        rollout_policy,
        reference_policy,
        instance,
        group,
        config,
        1.0,
        &mut acc,
    )?;
    Ok(acc.into_dense())
}

/// Token-length-normalized policy gradient with group-relative advantages.
pub fn gpg_grad_into(
    policy: &Policy,
    instance: &TaskInstance,
    group: &RolloutGroup,
    config: &BaselineConfig,
    scale: f64,
    acc: &mut GradAccum,
) -> Result<BaselineStats> {
    let advantages = group_advantages(&group.rewards(), config.f_norm, config.advantage_epsilon);
    let total_tokens: usize = group.rationales.iter().map(|r| r.z.len()).sum();
    if total_tokens == 0 {
        return Ok(BaselineStats::default());
    }
    let norm = 1.0 / total_tokens as f64;
    let ctx = Context::query(&instance.x);
    let mut objective = 0.0;
    for (rollout, adv) in group.rationales.iter().zip(advantages.iter()) {
        policy.grad_logprob_into(&ctx, &rollout.z, scale * norm * adv, acc)?;
        objective += norm * adv * policy.logprob(&ctx, &rollout.z)?;
    }
    Ok(BaselineStats {
        objective,
        ..Default::default()
    })
}

pub fn gpg_grad(
    policy: &Policy,
    instance: &TaskInstance,
    group: &RolloutGroup,
    config: &BaselineConfig,
) -> Result<GradientVector> {
    let mut acc = GradAccum::new(policy.n_params());
    gpg_grad_into(policy, instance, group, config, 1.0, &mut acc)?;
    Ok(acc.into_dense())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itro::{rollout_group, ItroConfig, Rollout};
    use crate::oracle::fd_grad;
    use crate::policy::{init_policy, ArchKind, Init, StateRef};
    use crate::tasks::{all_instances, Family, TaskFamilySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn family() -> (TaskFamilySpec, Vocabulary) {
        let spec = TaskFamilySpec::new(Family::SumChain, 2, 1, 3).unwrap();
        let vocab = spec.vocab();
        (spec, vocab)
    }

    fn noisy_policy(seed: u64) -> Policy {
        let (spec, _) = family();
        init_policy(ArchKind::Tabular, &spec, 0, Init::SeededNoise(0.6), &mut rng(seed)).unwrap()
    }

    fn sampled_group(policy: &Policy, instance: &TaskInstance, seed: u64) -> RolloutGroup {
        let (_, vocab) = family();
        let cfg = ItroConfig {
            t_max: 3,
            group_size: 6,
            ..ItroConfig::default()
        };
        rollout_group(policy, instance, &vocab, &cfg, 0, &mut rng(seed)).unwrap()
    }

    #[test]
    fn sft_grad_is_normalized_grad_logprob() {
        let (spec, _) = family();
        let p = noisy_policy(1);
        let inst = all_instances(&spec)[1].clone();
        let golden = inst.golden.clone().unwrap();
        let g = sft_grad(&p, &inst).unwrap();
        let mut direct = p.grad_logprob(&Context::query(&inst.x), &golden).unwrap();
        direct.scale(1.0 / golden.len() as f64);
        assert!(g.sub(&direct).linf_norm() < 1e-12);

        let no_golden = TaskInstance { golden: None, ..inst };
        assert!(matches!(sft_grad(&p, &no_golden), Err(LabError::MissingGolden)));
    }

    #[test]
    fn sft_grad_matches_fd() {
        let (spec, _) = family();
        let p = noisy_policy(2);
        let inst = all_instances(&spec)[0].clone();
        let golden = inst.golden.clone().unwrap();
        let g = sft_grad(&p, &inst).unwrap();
        let ctx = Context::query(&inst.x);
        let mut loss =
            |pol: &Policy| Ok(pol.logprob(&ctx, &golden)? / golden.len() as f64);
        let fd = fd_grad(&mut loss, &p, 1e-6).unwrap();
        for i in 0..p.n_params() {
            if g.0[i].abs() > 1e-8 {
                assert!(((fd.0[i] - g.0[i]) / g.0[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sft_grad_vanishes_when_golden_is_deterministic() {
        let (spec, _) = family();
        let mut p =
            init_policy(ArchKind::Tabular, &spec, 0, Init::Uniform, &mut rng(0)).unwrap();
        let inst = all_instances(&spec)[1].clone();
        let golden = inst.golden.clone().unwrap();
        let ctx = Context::query(&inst.x);
        for t in 0..golden.len() {
            if let StateRef::Tabular { offset } = p.state_ref(&ctx, &golden[..t]).unwrap() {
                p.params[offset + golden[t]] = 200.0;
            }
        }
        let g = sft_grad(&p, &inst).unwrap();
        assert!(g.linf_norm() < 1e-12);
    }

    #[test]
    fn advantages_known_case() {
        let adv = group_advantages(&[1.0, 0.0, 0.0, 1.0], FNorm::Std, 1e-8);
        for (a, e) in adv.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-7);
        }
        // all-equal rewards: zero advantages
        let adv = group_advantages(&[1.0, 1.0, 1.0], FNorm::Std, 1e-8);
        assert!(adv.iter().all(|a| *a == 0.0));
        // advantages sum to zero
        let adv = group_advantages(&[0.3, 0.9, 0.1, 0.5], FNorm::Std, 1e-8);
        assert!(adv.iter().sum::<f64>().abs() < 1e-9);
        let adv = group_advantages(&[1.0, 0.0], FNorm::Fixed(2.0), 1e-8);
        assert!((adv[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn raftpp_on_policy_equals_filtered_sft() {
        let (spec, _) = family();
        let p = noisy_policy(3);
        let inst = all_instances(&spec)[1].clone();
        let group = (17..64)
            .map(|seed| sampled_group(&p, &inst, seed))
            .find(|g| g.rationales.iter().any(|r| r.reward == 1.0))
            .expect("some seed yields a positive sample");
        let cfg = BaselineConfig::default();
        let g = raftpp_grad(&p, &p, &inst, &group, &cfg).unwrap();
        // filtered SFT on the same rationales
        let filtered: Vec<&Vec<Token>> = group
            .rationales
            .iter()
            .filter(|r| r.reward == 1.0)
            .map(|r| &r.z)
            .collect();
        let mut acc = crate::grad::GradAccum::new(p.n_params());
        let ctx = Context::query(&inst.x);
        for z in &filtered {
            p.grad_logprob_into(&ctx, z, 1.0 / (z.len() * filtered.len()) as f64, &mut acc)
                .unwrap();
        }
        assert!(g.sub(&acc.into_dense()).linf_norm() < 1e-12);
    }

    #[test]
    fn raftpp_clips_large_ratios() {
        let (spec, vocab) = family();
        let inst = all_instances(&spec)[1].clone();
        let old = noisy_policy(4);
        let mut new = old.clone();
        // push the first golden token hard so its ratio exceeds 1.2
        let golden = inst.golden.clone().unwrap();
        let ctx = Context::query(&inst.x);
        if let StateRef::Tabular { offset } = new.state_ref(&ctx, &[]).unwrap() {
            new.params[offset + golden[0]] += 2.0;
        }
        let group = RolloutGroup {
            query_index: 0,
            rationales: vec![Rollout { z: golden.clone(), reward: 1.0, valid: true }],
        };
        let cfg = BaselineConfig::default();
        let stats = {
            let mut acc = crate::grad::GradAccum::new(new.n_params());
            raftpp_grad_into(&new, &old, &inst, &group, &cfg, 1.0, &mut acc).unwrap()
        };
        assert!(stats.clip_fraction > 0.0);
        // a huge clip bound recovers unclipped importance-weighted SFT
        let wide = BaselineConfig { epsilon_clip: 1e9, ..cfg };
        let g_wide = raftpp_grad(&new, &old, &inst, &group, &wide).unwrap();
        let stats_wide = {
            let mut acc = crate::grad::GradAccum::new(new.n_params());
            raftpp_grad_into(&new, &old, &inst, &group, &wide, 1.0, &mut acc).unwrap()
        };
        assert_eq!(stats_wide.clip_fraction, 0.0);
        assert!(g_wide.linf_norm() > 0.0);
        let _ = vocab;
    }

    #[test]
    fn raftpp_no_positive_samples_is_an_error() {
        let (spec, _) = family();
        let p = noisy_policy(5);
        let inst = all_instances(&spec)[0].clone();
        let group = RolloutGroup {
            query_index: 0,
            rationales: vec![Rollout { z: vec![0], reward: 0.0, valid: false }],
        };
        assert!(matches!(
            raftpp_grad(&p, &p, &inst, &group, &BaselineConfig::default()),
            Err(LabError::EmptyFilteredSet)
        ));
    }

    #[test]
    fn grpo_on_policy_reduces_to_reinforce_with_baseline() {
        let (spec, _) = family();
        let p = noisy_policy(6);
        let inst = all_instances(&spec)[1].clone();
        let group = sampled_group(&p, &inst, 23);
        let cfg = BaselineConfig::default();
        let g = grpo_grad(&p, &p, None, &inst, &group, &cfg).unwrap();
        // direct REINFORCE-with-baseline computation
        let adv = group_advantages(&group.rewards(), FNorm::Std, cfg.advantage_epsilon);
        let ctx = Context::query(&inst.x);
        let mut acc = crate::grad::GradAccum::new(p.n_params());
        let gsz = group.rationales.len() as f64;
        for (r, a) in group.rationales.iter().zip(adv.iter()) {
            p.grad_logprob_into(&ctx, &r.z, a / (gsz * r.z.len() as f64), &mut acc)
                .unwrap();
        }
        assert!(g.sub(&acc.into_dense()).linf_norm() < 1e-12);
    }

    #[test]
    fn grpo_equal_rewards_leave_only_kl() {
        let (spec, _) = family();
        let p = noisy_policy(7);
        let reference = noisy_policy(8);
        let inst = all_instances(&spec)[0].clone();
        let mut group = sampled_group(&p, &inst, 29);
        for r in group.rationales.iter_mut() {
            r.reward = 1.0;
        }
        let cfg = BaselineConfig { beta_kl: 0.5, ..BaselineConfig::default() };
        let g = grpo_grad(&p, &p, Some(&reference), &inst, &group, &cfg).unwrap();
        // policy-gradient part vanishes; remaining gradient is -beta * dKL
        let mut acc = crate::grad::GradAccum::new(p.n_params());
        let kl = per_state_kl_grad_into(
            &p,
            &reference,
            &Context::query(&inst.x),
            &group,
            -cfg.beta_kl,
            &mut acc,
        )
        .unwrap();
        assert!(kl > 0.0);
        assert!(g.sub(&acc.into_dense()).linf_norm() < 1e-12);

        // pi_theta = pi_ref: KL gradient is exactly zero
        let g0 = grpo_grad(&p, &p, Some(&p), &inst, &group, &cfg).unwrap();
        assert!(g0.linf_norm() < 1e-12);
    }

    #[test]
    fn grpo_kl_grad_matches_fd() {
        let (spec, _) = family();
        let p = noisy_policy(9);
        let reference = noisy_policy(10);
        let inst = all_instances(&spec)[0].clone();
        let mut group = sampled_group(&p, &inst, 31);
        for r in group.rationales.iter_mut() {
            r.reward = 1.0; // zero advantages, isolate the KL term
        }
        let cfg = BaselineConfig { beta_kl: 0.7, ..BaselineConfig::default() };
        let g = grpo_grad(&p, &p, Some(&reference), &inst, &group, &cfg).unwrap();
        let ctx = Context::query(&inst.x);
        let frozen: Vec<Vec<Token>> = group.rationales.iter().map(|r| r.z.clone()).collect();
        let positions: usize = frozen.iter().map(|z| z.len()).sum();
        let mut loss = |pol: &Policy| {
            let mut total = 0.0;
            for z in &frozen {
                for t in 0..z.len() {
                    let pd = pol.next_dist(&ctx, &z[..t])?.probs;
                    let rd = reference.next_dist(&ctx, &z[..t])?.probs;
                    total += pd
                        .iter()
                        .zip(rd.iter())
                        .map(|(a, b)| a * (a / b).ln())
                        .sum::<f64>();
                }
            }
            Ok(-cfg.beta_kl * total / positions as f64)
        };
        let fd = fd_grad(&mut loss, &p, 1e-5).unwrap();
        for i in 0..p.n_params() {
            if g.0[i].abs() > 1e-7 {
                assert!(
                    ((fd.0[i] - g.0[i]) / g.0[i]).abs() < 1e-4,
                    "coord {i}: {} vs {}",
                    fd.0[i],
                    g.0[i]
                );
            }
        }
    }

    #[test]
    fn gpg_grad_cases_and_fd() {
        let (spec, _) = family();
        let p = noisy_policy(11);
        let inst = all_instances(&spec)[1].clone();
        let mut group = sampled_group(&p, &inst, 37);
        let cfg = BaselineConfig::default();

        // all rewards equal: zero gradient
        for r in group.rationales.iter_mut() {
            r.reward = 1.0;
        }
        let g = gpg_grad(&p, &inst, &group, &cfg).unwrap();
        assert!(g.linf_norm() < 1e-12);

        // single rationale: r - mean = 0, degenerate zero
        let single = RolloutGroup {
            query_index: 0,
            rationales: vec![group.rationales[0].clone()],
        };
        let cfg_fixed = BaselineConfig { f_norm: FNorm::Fixed(1.0), ..cfg };
        let g = gpg_grad(&p, &inst, &single, &cfg_fixed).unwrap();
        assert!(g.linf_norm() < 1e-12);

        // fd on the frozen-group surrogate
        let group = sampled_group(&p, &inst, 41);
        let g = gpg_grad(&p, &inst, &group, &cfg).unwrap();
        let adv = group_advantages(&group.rewards(), cfg.f_norm, cfg.advantage_epsilon);
        let ctx = Context::query(&inst.x);
        let total: usize = group.rationales.iter().map(|r| r.z.len()).sum();
        let frozen: Vec<(Vec<Token>, f64)> = group
            .rationales
            .iter()
            .zip(adv.iter())
            .map(|(r, a)| (r.z.clone(), *a))
            .collect();
        let mut loss = |pol: &Policy| {
            let mut s = 0.0;
            for (z, a) in &frozen {
                s += a * pol.logprob(&ctx, z)?;
            }
            Ok(s / total as f64)
        };
        let fd = fd_grad(&mut loss, &p, 1e-6).unwrap();
        for i in 0..p.n_params() {
            if g.0[i].abs() > 1e-7 {
                assert!(((fd.0[i] - g.0[i]) / g.0[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn latro_grad_cases_and_fd() {
        let (spec, vocab) = family();
        let p = noisy_policy(12);
        let initial = noisy_policy(13);
        let inst = all_instances(&spec)[1].clone();
        let group = sampled_group(&p, &inst, 43);
        let cfg = BaselineConfig::default();

        // group of one: no leave-one-out baseline
        let single = RolloutGroup {
            query_index: 0,
            rationales: vec![group.rationales[0].clone()],
        };
        assert!(matches!(
            latro_grad(&p, &initial, &inst, &vocab, &single, &cfg, 3),
            Err(LabError::GroupTooSmall(1))
        ));

        // pi = pi_0 and zero advantages: zero gradient
        let mut twin = group.clone();
        twin.rationales.truncate(2);
        twin.rationales[1] = twin.rationales[0].clone();
        let g = latro_grad(&p, &p, &inst, &vocab, &twin, &cfg, 3).unwrap();
        assert!(g.linf_norm() < 1e-10);

        // fd on the frozen-group composite surrogate
        let g = latro_grad(&p, &initial, &inst, &vocab, &group, &cfg, 3).unwrap();
        let rewards: Vec<f64> = group
            .rationales
            .iter()
            .map(|r| latro_reward(&p, &inst, &vocab, &r.z, 3).unwrap())
            .collect();
        let gsz = group.rationales.len() as f64;
        let advantages: Vec<f64> = rewards
            .iter()
            .map(|r| r - (rewards.iter().sum::<f64>() - r) / (gsz - 1.0))
            .collect();
        let ctx = Context::query(&inst.x);
        let frozen: Vec<Vec<Token>> = group.rationales.iter().map(|r| r.z.clone()).collect();
        let positions: usize = frozen.iter().map(|z| z.len()).sum();
        let mut loss = |pol: &Policy| {
            let mut s = 0.0;
            for (z, a) in frozen.iter().zip(advantages.iter()) {
                s += a * pol.logprob(&ctx, z)? / gsz;
            }
            let mut kl_total = 0.0;
            for z in &frozen {
                for t in 0..z.len() {
                    let pd = pol.next_dist(&ctx, &z[..t])?.probs;
                    let rd = initial.next_dist(&ctx, &z[..t])?.probs;
                    kl_total += pd
                        .iter()
                        .zip(rd.iter())
                        .map(|(x, y)| x * (x / y).ln())
                        .sum::<f64>();
                }
            }
            Ok(s - cfg.latro_kl_coef * kl_total / positions as f64)
        };
        let fd = fd_grad(&mut loss, &p, 1e-5).unwrap();
        for i in 0..p.n_params() {
            if g.0[i].abs() > 1e-6 {
                assert!(
                    ((fd.0[i] - g.0[i]) / g.0[i]).abs() < 1e-4,
                    "coord {i}: {} vs {}",
                    fd.0[i],
                    g.0[i]
                );
            }
        }
    }
}
