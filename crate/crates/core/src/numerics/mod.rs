//! Dense f64 kernels shared by every loss, plus a small reverse-mode tape
//! and a central-difference gradient checker.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradients, GradCheck};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Clamp used inside logarithms (KL, entropy).
pub const EPS_LOG: f64 = 1e-8;
/// Below this norm a vector is treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Tolerance on the unit-sum invariant of [`Distribution`].
pub const DIST_SUM_TOL: f64 = 1e-9;

/// A value together with a degeneracy flag raised by norm guards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub degenerate: bool,
}

/// Class-probability vector: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!(
                    "probability {p} at class {i} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Builds from non-negative weights by dividing by their sum.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidInput(format!(
                "weights sum to {sum}; cannot normalize"
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidInput("negative weight".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| (w / sum).min(1.0)).collect(),
        })
    }

    pub fn uniform(class_count: usize) -> Self {
        assert!(class_count > 0);
        Self {
            probs: vec![1.0 / class_count as f64; class_count],
        }
    }

    pub fn one_hot(class_count: usize, class: usize) -> Self {
        assert!(class < class_count);
        let mut probs = vec![0.0; class_count];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties resolve to the lowest class id.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * yr;
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(r).iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Distribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax over zero classes".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            coordinate: i,
            detail: "non-finite logit".into(),
        });
    }
    Ok(Distribution {
        probs: softmax_raw(logits, temperature),
    })
}

pub(crate) fn softmax_raw(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Cosine similarity `a·b / (‖a‖‖b‖ + ε)`, clamped to `[-1, 1]`.
///
/// Returns zero with the degeneracy flag set when either norm is at or below
/// [`EPS_NORM`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<Flagged<f64>> {
    check_len(a.len(), b.len())?;
    Ok(cosine_raw(a, b))
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> Flagged<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Flagged {
            value: 0.0,
            degenerate: true,
        };
    }
    Flagged {
        value: (dot(a, b) / (na * nb + EPS_NORM)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Scales to unit length; degenerate inputs map to the zero vector.
pub fn l2_normalize(a: &[f64]) -> Flagged<Vec<f64>> {
    let n = norm(a);
    if n <= EPS_NORM {
        Flagged {
            value: vec![0.0; a.len()],
            degenerate: true,
        }
    } else {
        Flagged {
            value: a.iter().map(|v| v / n).collect(),
            degenerate: false,
        }
    }
}

/// `KL(t ‖ p)`; zero-mass target entries contribute nothing and `p` is
/// clamped below at [`EPS_LOG`].
pub fn kl_divergence(t: &Distribution, p: &Distribution) -> Result<f64> {
    check_len(t.class_count(), p.class_count())?;
    Ok(kl_raw(t.probs(), p.probs()))
}

pub(crate) fn kl_raw(t: &[f64], p: &[f64]) -> f64 {
    t.iter()
        .zip(p)
        .filter(|(&tc, _)| tc > 0.0)
        .map(|(&tc, &pc)| tc * (tc.ln() - pc.max(EPS_LOG).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// `-Σ p log(p + ε)`
pub fn entropy(p: &Distribution) -> f64 {
    entropy_raw(p.probs())
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter().map(|&pc| pc * (pc + EPS_LOG).ln()).sum::<f64>()
}
