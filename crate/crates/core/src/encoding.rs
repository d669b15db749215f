//! Label encoding: confusion matrices and the label generator matrix.
//!
//! Training labels are re-encoded every epoch as `L·G`, where `G` is a
//! generator matrix driven by the normalized soft-confusion matrix of the
//! current network on a small validation set:
//!
//! ```text
//! S  = Lᵀ·Y               soft confusion matrix (probability mass, not counts)
//! S' = S / n_p  (per row) normalized by validation class sizes
//! C  = S' − I             cost matrix
//! G  ← (1 − μ)·G + μ·(I − ε·C)
//! ```
//!
//! Starting from `G = I`, a full-mode generator keeps rows summing to one
//! with a diagonal of at least one and non-positive off-diagonals, so an
//! encoded label puts extra weight on its own class and a negative,
//! cost-proportional weight on the classes it is confused with.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-class instance counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts(pub Vec<usize>);

impl ClassCounts {
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut n = vec![0; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::ClassIndex {
                    index: l,
                    num_classes,
                });
            }
            n[l] += 1;
        }
        Ok(Self(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// First class with no instances, if any.
    pub fn first_empty(&self) -> Option<usize> {
        self.0.iter().position(|&n| n == 0)
    }
}

/// Which parts of the generator matrix are allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// Diagonal and off-diagonal entries both follow the update.
    Full,
    /// Off-diagonals pinned to zero: pure per-class re-weighting.
    ReWeighting,
    /// Diagonal pinned to one: pure misclassification costs.
    CostSensitive,
    /// `G` stays the identity, i.e. plain one-hot training.
    Baseline,
}

impl EncodingMode {
    pub const ALL: [EncodingMode; 4] = [
        EncodingMode::Baseline,
        EncodingMode::ReWeighting,
        EncodingMode::CostSensitive,
        EncodingMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingMode::Full => "full",
            EncodingMode::ReWeighting => "re_weighting",
            EncodingMode::CostSensitive => "cost_sensitive",
            EncodingMode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown encoding mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    g: Matrix,
    mu: f64,
    epsilon: f64,
    mode: EncodingMode,
}

impl GeneratorState {
    /// Identity generator for `num_classes` classes.
    pub fn new(num_classes: usize, mu: f64, epsilon: f64, mode: EncodingMode) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::invalid(format!("mu must be in (0, 1], got {mu}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        Ok(Self {
            g: Matrix::identity(num_classes),
            mu,
            epsilon,
            mode,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.g
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> EncodingMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.g.rows()
    }

    /// Moves `G` towards `I − ε·C` at rate `μ`, then applies the mode's
    /// projection.
    ///
    /// The blend is evaluated as `G + μ·(T − G)`, which is algebraically
    /// `(1 − μ)·G + μ·T` but leaves an identity `G` bit-exact when `ε = 0`.
    pub fn update(&mut self, cost: &Matrix) -> Result<()> {
        let n = self.g.rows();
        if cost.shape() != (n, n) {
            return Err(Error::Shape {
                op: "update_generator",
                lhs: self.g.shape(),
                rhs: cost.shape(),
            });
        }
        if self.mode == EncodingMode::Baseline {
            return Ok(());
        }
        for p in 0..n {
            for q in 0..n {
                let eye = if p == q { 1.0 } else { 0.0 };
                let target = eye - self.epsilon * cost.get(p, q);
                let old = self.g.get(p, q);
                self.g.set(p, q, old + self.mu * (target - old));
            }
        }
        match self.mode {
            EncodingMode::ReWeighting => {
                for p in 0..n {
                    for q in (0..n).filter(|&q| q != p) {
                        self.g.set(p, q, 0.0);
                    }
                }
            }
            EncodingMode::CostSensitive => {
                for p in 0..n {
                    self.g.set(p, p, 1.0);
                }
            }
            EncodingMode::Full | EncodingMode::Baseline => {}
        }
        Ok(())
    }
}

/// Functional form of [`GeneratorState::update`].
pub fn update_generator(state: &GeneratorState, cost: &Matrix) -> Result<GeneratorState> {
    let mut next = state.clone();
    next.update(cost)?;
    Ok(next)
}

pub fn one_hot(class_indices: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(class_indices.len(), num_classes);
    for (i, &c) in class_indices.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::ClassIndex {
                index: c,
                num_classes,
            });
        }
        m.set(i, c, 1.0);
    }
    Ok(m)
}

fn check_confusion_inputs(op: &'static str, labels: &Matrix, outputs: &Matrix) -> Result<()> {
    if labels.shape() != outputs.shape() {
        return Err(Error::Shape {
            op,
            lhs: labels.shape(),
            rhs: outputs.shape(),
        });
    }
    Ok(())
}

/// `S = LᵀY`: entry `(p, q)` sums the predicted probability of class `q`
/// over every instance whose true class is `p`.
pub fn soft_confusion_matrix(labels_onehot: &Matrix, outputs: &Matrix) -> Result<Matrix> {
    check_confusion_inputs("soft_confusion_matrix", labels_onehot, outputs)?;
    labels_onehot.transpose_left_matmul(outputs)
}

/// The ordinary count-based confusion matrix, computed as `LᵀY'` where
/// `Y'` one-hots each output row at its argmax.
pub fn hard_confusion_matrix(labels_onehot: &Matrix, outputs: &Matrix) -> Result<Matrix> {
    check_confusion_inputs("hard_confusion_matrix", labels_onehot, outputs)?;
    let predicted = outputs.argmax_rows()?;
    let hard = one_hot(&predicted, outputs.cols())?;
    labels_onehot.transpose_left_matmul(&hard)
}

/// Divides row `p` by the number of validation instances of class `p`.
pub fn normalize_scm(scm: &Matrix, counts: &ClassCounts) -> Result<Matrix> {
    if counts.len() != scm.rows() {
        return Err(Error::invalid(format!(
            "normalize_scm: {} class counts for a matrix with {} rows",
            counts.len(),
            scm.rows()
        )));
    }
    if let Some(class) = counts.first_empty() {
        return Err(Error::EmptyClass { class });
    }
    let mut out = scm.clone();
    for (p, &n) in counts.as_slice().iter().enumerate() {
        let n = n as f64;
        for v in out.row_mut(p) {
            *v /= n;
        }
    }
    Ok(out)
}

/// `C = S' − I`.
pub fn cost_matrix(scm_normalized: &Matrix) -> Result<Matrix> {
    let (r, c) = scm_normalized.shape();
    if r != c {
        return Err(Error::Shape {
            op: "cost_matrix",
            lhs: (r, c),
            rhs: (r, r),
        });
    }
    let mut out = scm_normalized.clone();
    for p in 0..r {
        out.set(p, p, out.get(p, p) - 1.0);
    }
    Ok(out)
}

/// `Lᵉ = L·G`. For a one-hot row of class `p` this selects row `p` of `G`.
pub fn encode_labels(labels_onehot: &Matrix, state: &GeneratorState) -> Result<Matrix> {
    labels_onehot.matmul(state.matrix())
}
