//! Autoregressive next-token policies with exact log-probabilities and
//! analytic parameter gradients. Two architectures: a tabular softmax where
//! every (context, z-prefix) state owns its logit block, and a linear softmax
//! over a fixed-window one-hot encoding whose weights are shared between the
//! generative and answer-conditioned contexts.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{LabError, Result};
use crate::grad::GradAccum;
use crate::tasks::{all_instances, TaskFamilySpec, TaskInstance, Token, Vocabulary};

/// Conditioning prefix: the query alone, or the query with the answer spliced
/// in as `x ++ [ANS, y, SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub prefix: Vec<Token>,
    pub conditioned: bool,
}

impl Context {
    pub fn query(x: &[Token]) -> Self {
        Context {
            prefix: x.to_vec(),
            conditioned: false,
        }
    }

    pub fn answer_conditioned(instance: &TaskInstance, vocab: &Vocabulary) -> Self {
        let ans = vocab.ans().expect("vocabulary has ANS");
        let sep = vocab.sep().expect("vocabulary has SEP");
        let mut prefix = instance.x.clone();
        prefix.push(ans);
        prefix.push(instance.y);
        prefix.push(sep);
        Context {
            prefix,
            conditioned: true,
        }
    }

    /// Arbitrary prefix, for toy state spaces in tests and oracles.
    pub fn raw(prefix: Vec<Token>, conditioned: bool) -> Self {
        Context {
            prefix,
            conditioned,
        }
    }
}

/// A next-token probability vector.
#[derive(Debug, Clone)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn entropy_bits(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.log2())
            .sum::<f64>()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Token {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (t, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return t;
            }
        }
        self.probs.len() - 1
    }

    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (t, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = t;
            }
        }
        best
    }
}

/// Real vector with the shape of the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        GradientVector(vec![0.0; n])
    }

    pub fn linf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &GradientVector, s: f64) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.0.iter_mut() {
            *a *= s;
        }
    }

    pub fn sub(&self, other: &GradientVector) -> GradientVector {
        GradientVector(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}

/// Enumerated state space for the tabular architecture. A state is the pair
/// (context prefix, rationale prefix); rationale prefixes up to
/// `max_prefix_len` are ranked arithmetically in lexicographic order.
#[derive(Debug, Clone)]
pub struct TabularLayout {
    pub vocab_size: usize,
    pub max_prefix_len: usize,
    pub contexts: Vec<Vec<Token>>,
    lookup: HashMap<Vec<Token>, usize>,
    /// offsets[l] = number of prefixes shorter than l
    offsets: Vec<usize>,
    prefixes_per_context: usize,
}

impl TabularLayout {
    pub fn new(vocab_size: usize, max_prefix_len: usize, contexts: Vec<Vec<Token>>) -> Self {
        let mut offsets = Vec::with_capacity(max_prefix_len + 2);
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..=max_prefix_len {
            offsets.push(total);
            total += level;
            level *= vocab_size;
        }
        offsets.push(total);
        let lookup = contexts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        TabularLayout {
            vocab_size,
            max_prefix_len,
            contexts,
            lookup,
            offsets,
            prefixes_per_context: total,
        }
    }

    /// Layout covering every query and every answer-conditioned context of
    /// the family, with rationale prefixes up to t_max.
    pub fn for_family(spec: &TaskFamilySpec) -> Self {
        let vocab = spec.vocab();
        let mut contexts = Vec::new();
        let instances = all_instances(spec);
        for inst in &instances {
            contexts.push(inst.x.clone());
        }
        for inst in &instances {
            for d in 0..spec.base {
                let mut conditioned = inst.clone();
                conditioned.y = vocab.digit(d);
                contexts.push(Context::answer_conditioned(&conditioned, &vocab).prefix);
            }
        }
        TabularLayout::new(vocab.size(), spec.t_max, contexts)
    }

    pub fn n_states(&self) -> usize {
        self.contexts.len() * self.prefixes_per_context
    }

    pub fn n_params(&self) -> usize {
        self.n_states() * self.vocab_size
    }

    fn prefix_rank(&self, z_prefix: &[Token]) -> Result<usize> {
        if z_prefix.len() > self.max_prefix_len {
            return Err(LabError::UnaddressableContext(format!(
                "rationale prefix of length {} exceeds max {}",
                z_prefix.len(),
                self.max_prefix_len
            )));
        }
        let mut value = 0usize;
        for t in z_prefix {
            if *t >= self.vocab_size {
                return Err(LabError::UnaddressableContext(format!(
                    "token {t} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
            value = value * self.vocab_size + t;
        }
        Ok(self.offsets[z_prefix.len()] + value)
    }

    pub fn state_index(&self, ctx_prefix: &[Token], z_prefix: &[Token]) -> Result<usize> {
        let ctx_idx = self.lookup.get(ctx_prefix).ok_or_else(|| {
            LabError::UnaddressableContext(format!("unknown context prefix {ctx_prefix:?}"))
        })?;
        Ok(ctx_idx * self.prefixes_per_context + self.prefix_rank(z_prefix)?)
    }
}

/// Fixed-window one-hot featurization for the linear architecture. The window
/// covers the last `window` tokens of context ++ prefix, padded on the left.
#[derive(Debug, Clone)]
pub struct LinearLayout {
    pub vocab_size: usize,
    pub window: usize,
}

impl LinearLayout {
    pub fn new(vocab_size: usize, window: usize) -> Self {
        LinearLayout { vocab_size, window }
    }

    /// One feature per window slot: token id, or vocab_size for padding.
    pub fn feature_dim(&self) -> usize {
        self.window * (self.vocab_size + 1)
    }

    pub fn n_params(&self) -> usize {
        self.vocab_size * self.feature_dim()
    }

    fn features(&self, ctx_prefix: &[Token], z_prefix: &[Token]) -> Vec<usize> {
        let pad = self.vocab_size;
        let total = ctx_prefix.len() + z_prefix.len();
        let mut feats = Vec::with_capacity(self.window);
        for slot in 0..self.window {
            // slot 0 is the oldest position in the window
            let pos = total as isize - self.window as isize + slot as isize;
            let tok = if pos < 0 {
                pad
            } else if (pos as usize) < ctx_prefix.len() {
                ctx_prefix[pos as usize]
            } else {
                z_prefix[pos as usize - ctx_prefix.len()]
            };
            feats.push(slot * (self.vocab_size + 1) + tok);
        }
        feats
    }
}

#[derive(Debug, Clone)]
pub enum PolicyArch {
    Tabular(Arc<TabularLayout>),
    Linear(LinearLayout),
}

/// Addressed state: where one next-token distribution lives in the parameter
/// vector, and how its gradient spreads.
#[derive(Debug, Clone)]
pub enum StateRef {
    Tabular { offset: usize },
    Linear { feats: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform,
    SeededNoise(f64),
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub arch: PolicyArch,
    pub params: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

impl Policy {
    pub fn new(arch: PolicyArch, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let n = match &arch {
            PolicyArch::Tabular(l) => l.n_params(),
            PolicyArch::Linear(l) => l.n_params(),
        };
        let params = match init {
            Init::Uniform => vec![0.0; n],
            Init::SeededNoise(sigma) => {
                if sigma < 0.0 {
                    return Err(LabError::InvalidParameter(format!(
                        "noise scale must be nonnegative, got {sigma}"
                    )));
                }
                (0..n).map(|_| rng.gen_range(-1.0..1.0) * sigma).collect()
            }
        };
        Ok(Policy { arch, params })
    }

    pub fn tabular(layout: TabularLayout, init: Init, rng: &mut impl Rng) -> Result<Self> {
        Policy::new(PolicyArch::Tabular(Arc::new(layout)), init, rng)
    }

    pub fn linear(layout: LinearLayout, init: Init, rng: &mut impl Rng) -> Result<Self> {
        Policy::new(PolicyArch::Linear(layout), init, rng)
    }

    pub fn vocab_size(&self) -> usize {
        match &self.arch {
            PolicyArch::Tabular(l) => l.vocab_size,
            PolicyArch::Linear(l) => l.vocab_size,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn state_ref(&self, ctx: &Context, z_prefix: &[Token]) -> Result<StateRef> {
        match &self.arch {
            PolicyArch::Tabular(l) => Ok(StateRef::Tabular {
                offset: l.state_index(&ctx.prefix, z_prefix)? * l.vocab_size,
            }),
            PolicyArch::Linear(l) => Ok(StateRef::Linear {
                feats: l.features(&ctx.prefix, z_prefix),
            }),
        }
    }

    pub fn logits(&self, state: &StateRef) -> Vec<f64> {
        let v = self.vocab_size();
        match state {
            StateRef::Tabular { offset } => self.params[*offset..offset + v].to_vec(),
            StateRef::Linear { feats } => {
                let fd = match &self.arch {
                    PolicyArch::Linear(l) => l.feature_dim(),
                    _ => unreachable!("linear state on linear arch"),
                };
                (0..v)
                    .map(|tok| feats.iter().map(|f| self.params[tok * fd + f]).sum())
                    .collect()
            }
        }
    }

    pub fn next_dist(&self, ctx: &Context, z_prefix: &[Token]) -> Result<Distribution> {
        let state = self.state_ref(ctx, z_prefix)?;
        Ok(Distribution {
            probs: softmax(&self.logits(&state)),
        })
    }

    fn next_dist_temp(&self, state: &StateRef, temperature: f64) -> Distribution {
        let mut logits = self.logits(state);
        for l in logits.iter_mut() {
            *l /= temperature;
        }
        Distribution {
            probs: softmax(&logits),
        }
    }

    /// Sum of per-token conditional log-probabilities.
    pub fn logprob(&self, ctx: &Context, z: &[Token]) -> Result<f64> {
        let mut total = 0.0;
        for (t, tok) in z.iter().enumerate() {
            let dist = self.next_dist(ctx, &z[..t])?;
            total += dist.probs[*tok].ln();
        }
        Ok(total)
    }

    /// Analytic gradient of a single next-token log-probability, scaled by
    /// `scale`, accumulated into `acc`. The softmax gradient is
    /// (onehot(token) - probs) on the addressed state's parameters.
    pub fn accumulate_token_grad(
        &self,
        state: &StateRef,
        probs: &[f64],
        token: Token,
        scale: f64,
        acc: &mut GradAccum,
    ) {
        let v = self.vocab_size();
        match state {
            StateRef::Tabular { offset } => {
                for u in 0..v {
                    let indicator = if u == token { 1.0 } else { 0.0 };
                    acc.add(offset + u, scale * (indicator - probs[u]));
                }
            }
            StateRef::Linear { feats } => {
                let fd = match &self.arch {
                    PolicyArch::Linear(l) => l.feature_dim(),
                    _ => unreachable!(),
                };
                for u in 0..v {
                    let indicator = if u == token { 1.0 } else { 0.0 };
                    let g = scale * (indicator - probs[u]);
                    for f in feats {
                        acc.add(u * fd + f, g);
                    }
                }
            }
        }
    }

    pub fn grad_logprob_into(
        &self,
        ctx: &Context,
        z: &[Token],
        scale: f64,
        acc: &mut GradAccum,
    ) -> Result<()> {
        for (t, tok) in z.iter().enumerate() {
            let state = self.state_ref(ctx, &z[..t])?;
            let probs = softmax(&self.logits(&state));
            self.accumulate_token_grad(&state, &probs, *tok, scale, acc);
        }
        Ok(())
    }

    pub fn grad_logprob(&self, ctx: &Context, z: &[Token]) -> Result<GradientVector> {
        let mut acc = GradAccum::new(self.n_params());
        self.grad_logprob_into(ctx, z, 1.0, &mut acc)?;
        Ok(acc.into_dense())
    }

    /// Ancestral sampling with temperature; stops at EOS or `max_len`.
    pub fn sample_sequence<R: Rng>(
        &self,
        ctx: &Context,
        temperature: f64,
        max_len: usize,
        eos: Token,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        let mut z = Vec::new();
        while z.len() < max_len {
            let state = self.state_ref(ctx, &z)?;
            let tok = self.next_dist_temp(&state, temperature).sample(rng);
            z.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(z)
    }

    /// Argmax decoding, ties broken by lowest token id.
    pub fn greedy_sequence(&self, ctx: &Context, max_len: usize, eos: Token) -> Result<Vec<Token>> {
        let mut z = Vec::new();
        while z.len() < max_len {
            let tok = self.next_dist(ctx, &z)?.argmax();
            z.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(z)
    }

    /// Snapshot for the rollout policy of a training step.
    pub fn snapshot(&self) -> Policy {
        self.clone()
    }
}

/// Build a policy for a task family.
pub fn init_policy(
    arch: ArchKind,
    spec: &TaskFamilySpec,
    window: usize,
    init: Init,
    rng: &mut impl Rng,
) -> Result<Policy> {
    match arch {
        ArchKind::Tabular => Policy::tabular(TabularLayout::for_family(spec), init, rng),
        ArchKind::Linear => {
            Policy::linear(LinearLayout::new(spec.vocab().size(), window), init, rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Tabular,
    Linear,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchKind::Tabular => write!(f, "tabular"),
            ArchKind::Linear => write!(f, "linear"),
        }
    }
}
