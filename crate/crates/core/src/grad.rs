//! Sparse gradient accumulator. Training steps touch a few hundred parameters
//! of a much larger vector; tracking touched indices keeps per-step cost
//! proportional to the visited states.

use crate::policy::GradientVector;

#[derive(Debug, Clone)]
pub struct GradAccum {
    values: Vec<f64>,
    touched: Vec<usize>,
    is_touched: Vec<bool>,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        GradAccum {
            values: vec![0.0; n],
            touched: Vec::new(),
            is_touched: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, idx: usize, v: f64) {
        if !self.is_touched[idx] {
            self.is_touched[idx] = true;
            self.touched.push(idx);
        }
        self.values[idx] += v;
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i] = 0.0;
            self.is_touched[i] = false;
        }
        self.touched.clear();
    }

    /// Fold another accumulator in, scaled.
    pub fn add_scaled_accum(&mut self, other: &GradAccum, s: f64) {
        for &i in &other.touched {
            self.add(i, s * other.values[i]);
        }
    }

    /// params += scale * self, touching only accumulated entries.
    pub fn apply_to(&self, params: &mut [f64], scale: f64) {
        for &i in &self.touched {
            params[i] += scale * self.values[i];
        }
    }

    pub fn scale(&mut self, s: f64) {
        for &i in &self.touched {
            self.values[i] *= s;
        }
    }

    pub fn into_dense(self) -> GradientVector {
        GradientVector(self.values)
    }

    pub fn to_dense(&self) -> GradientVector {
        GradientVector(self.values.clone())
    }
}
