use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("causal strength must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("causal strength entry [{row}][{col}] = {value} violates strict lower triangularity")]
    NotStrictlyLower { row: usize, col: usize, value: f64 },
    #[error("dialogue {id}: cause pair ({effect}, {cause}) must have cause < effect < {n}")]
    BadCausePair { id: String, effect: usize, cause: usize, n: usize },
    #[error("dialogue {id}: embeddings have {rows} rows for {n} utterances")]
    EmbeddingRows { id: String, rows: usize, n: usize },
    #[error("dialogue {id}: implicit causes shaped {got:?}, expected {expected:?}")]
    ImplicitShape { id: String, got: (usize, usize), expected: (usize, usize) },
    #[error("shape mismatch: causal strength is {n}x{n} but exogenous matrix has {rows} rows")]
    ForwardShape { n: usize, rows: usize },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("template pair ({effect}, {cause}) references a later-or-equal cause")]
    BadTemplatePair { effect: usize, cause: usize },
}

/// Strictly lower triangular matrix of utterance-to-utterance effect
/// weights. Entry `[i][j]` is the weight of utterance `j` on utterance
/// `i` (row = effect, column = cause); acyclicity follows from the
/// temporal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct CausalStrength {
    weights: Matrix,
}

impl TryFrom<Matrix> for CausalStrength {
    type Error = ScmError;

    fn try_from(weights: Matrix) -> Result<Self, ScmError> {
        Self::new(weights)
    }
}

impl From<CausalStrength> for Matrix {
    fn from(cs: CausalStrength) -> Matrix {
        cs.weights
    }
}

impl CausalStrength {
    pub fn new(weights: Matrix) -> Result<Self, ScmError> {
        if weights.rows() != weights.cols() {
            return Err(ScmError::NotSquare { rows: weights.rows(), cols: weights.cols() });
        }
        for r in 0..weights.rows() {
            for c in r..weights.cols() {
                if weights.get(r, c) != 0.0 {
                    return Err(ScmError::NotStrictlyLower {
                        row: r,
                        col: c,
                        value: weights.get(r, c),
                    });
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn zeros(n: usize) -> Self {
        Self { weights: Matrix::zeros(n, n) }
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn get(&self, effect: usize, cause: usize) -> f64 {
        self.weights.get(effect, cause)
    }

    /// Sets the weight of `cause` on `effect`; `cause` must precede.
    pub fn set(&mut self, effect: usize, cause: usize, w: f64) -> Result<(), ScmError> {
        if cause >= effect || effect >= self.n() {
            return Err(ScmError::BadCausePair {
                id: String::new(),
                effect,
                cause,
                n: self.n(),
            });
        }
        self.weights.set(effect, cause, w);
        Ok(())
    }
}

/// Causal structure tag of a simulated dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkeletonTag {
    I,
    II,
    III,
    IV,
}

impl SkeletonTag {
    pub const ALL: [SkeletonTag; 4] = [Self::I, Self::II, Self::III, Self::IV];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        }
    }
}

impl std::fmt::Display for SkeletonTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SkeletonTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "I" => Ok(Self::I),
            "II" => Ok(Self::II),
            "III" => Ok(Self::III),
            "IV" => Ok(Self::IV),
            other => Err(format!("unknown skeleton tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// An ordered conversation with its representation matrix and cause labels.
/// Cause pairs are `(effect, cause)` with the cause strictly preceding the
/// effect; indices are 0-based in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    /// N x D utterance representations.
    pub embeddings: Matrix,
    pub cause_pairs: BTreeSet<(usize, usize)>,
    /// Ground-truth exogenous terms, when known (synthetic data).
    pub implicit_causes: Option<Matrix>,
    pub skeleton: Option<SkeletonTag>,
}

impl Dialogue {
    pub fn new(
        id: String,
        utterances: Vec<Utterance>,
        embeddings: Matrix,
        cause_pairs: BTreeSet<(usize, usize)>,
        implicit_causes: Option<Matrix>,
        skeleton: Option<SkeletonTag>,
    ) -> Result<Self, ScmError> {
        let d = Self { id, utterances, embeddings, cause_pairs, implicit_causes, skeleton };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn emotion_flags(&self) -> Vec<Option<bool>> {
        self.utterances.iter().map(|u| u.emotion).collect()
    }

    pub fn validate(&self) -> Result<(), ScmError> {
        let n = self.utterances.len();
        for &(effect, cause) in &self.cause_pairs {
            if cause >= effect || effect >= n {
                return Err(ScmError::BadCausePair {
                    id: self.id.clone(),
                    effect,
                    cause,
                    n,
                });
            }
        }
        if self.embeddings.rows() != n {
            return Err(ScmError::EmbeddingRows {
                id: self.id.clone(),
                rows: self.embeddings.rows(),
                n,
            });
        }
        if let Some(e) = &self.implicit_causes {
            if e.shape() != self.embeddings.shape() {
                return Err(ScmError::ImplicitShape {
                    id: self.id.clone(),
                    got: e.shape(),
                    expected: self.embeddings.shape(),
                });
            }
        }
        Ok(())
    }
}
