//! Synthetic chain-of-thought task families with a deterministic
//! answer-extraction function, so the full rationale space is enumerable and
//! every answer admits multiple valid rationales.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Token ids are dense indices into a [`Vocabulary`].
pub type Token = usize;

/// Hard cap on the enumerable sequence space, V^T_max.
pub const ENUMERATION_BOUND: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Digit(u8),
    Operator,
    Eq,
    Ans,
    Sep,
    Eos,
}

/// Token alphabet. Ids are 0..size-1 and dense; exactly one EOS.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    roles: Vec<Role>,
}

impl Vocabulary {
    /// Alphabet for the sum_chain family over base `base`:
    /// digits 0..base, then PLUS, EQ, ANS, SEP, EOS.
    pub fn sum_chain(base: u8) -> Self {
        let mut roles: Vec<Role> = (0..base).map(Role::Digit).collect();
        roles.push(Role::Operator);
        roles.push(Role::Eq);
        roles.push(Role::Ans);
        roles.push(Role::Sep);
        roles.push(Role::Eos);
        Vocabulary { roles }
    }

    /// Minimal alphabet for oracle toys: `n_digits` digit tokens plus EOS.
    pub fn toy(n_digits: u8) -> Self {
        let mut roles: Vec<Role> = (0..n_digits).map(Role::Digit).collect();
        roles.push(Role::Eos);
        Vocabulary { roles }
    }

    pub fn size(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, t: Token) -> Role {
        self.roles[t]
    }

    pub fn eos(&self) -> Token {
        self.roles
            .iter()
            .position(|r| *r == Role::Eos)
            .expect("vocabulary has exactly one EOS")
    }

    pub fn digit(&self, d: u8) -> Token {
        self.roles
            .iter()
            .position(|r| *r == Role::Digit(d))
            .expect("digit token present")
    }

    pub fn digit_value(&self, t: Token) -> Option<u8> {
        match self.roles.get(t) {
            Some(Role::Digit(d)) => Some(*d),
            _ => None,
        }
    }

    pub fn operator(&self) -> Option<Token> {
        self.roles.iter().position(|r| *r == Role::Operator)
    }

    pub fn eq(&self) -> Option<Token> {
        self.roles.iter().position(|r| *r == Role::Eq)
    }

    pub fn ans(&self) -> Option<Token> {
        self.roles.iter().position(|r| *r == Role::Ans)
    }

    pub fn sep(&self) -> Option<Token> {
        self.roles.iter().position(|r| *r == Role::Sep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SumChain,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::SumChain => write!(f, "sum_chain"),
        }
    }
}

/// Parameters of a task family. `t_max` bounds rationale length; the
/// sequence space of size V^t_max must stay enumerable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskFamilySpec {
    pub family: Family,
    pub base: u8,
    pub chain_length: usize,
    pub t_max: usize,
}

impl TaskFamilySpec {
    pub fn new(family: Family, base: u8, chain_length: usize, t_max: usize) -> Result<Self> {
        let spec = TaskFamilySpec {
            family,
            base,
            chain_length,
            t_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base < 2 || self.base > 10 {
            return Err(LabError::InvalidParameter(format!(
                "base must be in 2..=10, got {}",
                self.base
            )));
        }
        if self.chain_length < 1 {
            return Err(LabError::InvalidParameter(
                "chain_length must be >= 1".into(),
            ));
        }
        if self.t_max < 2 {
            return Err(LabError::InvalidParameter("t_max must be >= 2".into()));
        }
        // golden rationale has chain_length + 1 tokens and must fit
        if self.t_max < self.chain_length + 1 {
            return Err(LabError::InvalidParameter(format!(
                "t_max = {} cannot hold a golden rationale of length {}",
                self.t_max,
                self.chain_length + 1
            )));
        }
        let v = self.vocab().size() as f64;
        let size = v.powi(self.t_max as i32);
        if size > ENUMERATION_BOUND {
            return Err(LabError::SpaceTooLarge {
                size,
                bound: ENUMERATION_BOUND,
            });
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        match self.family {
            Family::SumChain => Vocabulary::sum_chain(self.base),
        }
    }

    /// Number of distinct queries in the family.
    pub fn num_queries(&self) -> usize {
        (self.base as usize).pow(self.chain_length as u32)
    }
}

/// One training/eval unit: query tokens, answer digit, optional golden rationale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub x: Vec<Token>,
    pub y: Token,
    pub golden: Option<Vec<Token>>,
}

fn instance_from_digits(spec: &TaskFamilySpec, digits: &[u8]) -> TaskInstance {
    let vocab = spec.vocab();
    let plus = vocab.operator().expect("sum_chain has PLUS");
    let eq = vocab.eq().expect("sum_chain has EQ");

    let mut x = Vec::with_capacity(2 * digits.len());
    for (i, d) in digits.iter().enumerate() {
        if i > 0 {
            x.push(plus);
        }
        x.push(vocab.digit(*d));
    }
    x.push(eq);

    let base = spec.base as u32;
    let answer = (digits.iter().map(|d| *d as u32).sum::<u32>() % base) as u8;
    let y = vocab.digit(answer);

    // Partial-sum announcement: s_2 .. s_L, then the answer, then EOS.
    let mut golden = Vec::with_capacity(digits.len() + 1);
    let mut running = digits[0] as u32;
    for d in &digits[1..] {
        running = (running + *d as u32) % base;
        golden.push(vocab.digit(running as u8));
    }
    golden.push(y);
    golden.push(vocab.eos());

    TaskInstance {
        x,
        y,
        golden: Some(golden),
    }
}

/// Draw a fresh instance with digits uniform in [0, base).
pub fn sample_instance<R: Rng>(spec: &TaskFamilySpec, rng: &mut R) -> TaskInstance {
    let digits: Vec<u8> = (0..spec.chain_length)
        .map(|_| rng.gen_range(0..spec.base))
        .collect();
    instance_from_digits(spec, &digits)
}

/// All instances of the family, in lexicographic digit order.
pub fn all_instances(spec: &TaskFamilySpec) -> Vec<TaskInstance> {
    let n = spec.num_queries();
    let base = spec.base as usize;
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut digits = vec![0u8; spec.chain_length];
        let mut rem = idx;
        for slot in digits.iter_mut().rev() {
            *slot = (rem % base) as u8;
            rem /= base;
        }
        out.push(instance_from_digits(spec, &digits));
    }
    out
}

/// Deterministic answer extraction: the last digit-role token strictly before
/// the first EOS. `None` when the sequence never terminates or carries no
/// digit, which marks the rationale invalid.
pub fn answer_of(z: &[Token], vocab: &Vocabulary) -> Option<Token> {
    let eos_pos = z.iter().position(|t| *t == vocab.eos())?;
    z[..eos_pos]
        .iter()
        .rev()
        .find(|t| vocab.digit_value(**t).is_some())
        .copied()
}
