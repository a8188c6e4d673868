//! Distillation point sets: the query tensors a teacher and student both
//! decode during knowledge transfer, plus the strategy markers for the
//! baseline pairing schemes that do not use a shared set.
//!
//! Points are sampled once at setup and never touched by an optimizer. The
//! set is immutable after construction; per-point loss weights are computed
//! fresh each step by the loss module and live in its reports, not here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DetrModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// General points concatenated with the teacher's learned queries.
    Combined,
    GeneralOnly,
    SpecificOnly,
    /// No shared set: each model pairs its own detection outputs index-wise.
    Inconsistent,
    /// No shared set: matched (foreground) predictions paired via ground truth.
    SimilarForeground,
    /// SimilarForeground plus one averaged-negative-prediction pair.
    SimilarGeneral,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Combined,
        Strategy::GeneralOnly,
        Strategy::SpecificOnly,
        Strategy::Inconsistent,
        Strategy::SimilarForeground,
        Strategy::SimilarGeneral,
    ];

    /// Strategies that decode a shared point set; the rest are resolved
    /// per image inside the loss.
    pub fn uses_shared_points(self) -> bool {
        matches!(
            self,
            Strategy::Combined | Strategy::GeneralOnly | Strategy::SpecificOnly
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Combined => "combined",
            Strategy::GeneralOnly => "general_only",
            Strategy::SpecificOnly => "specific_only",
            Strategy::Inconsistent => "inconsistent",
            Strategy::SimilarForeground => "similar_foreground",
            Strategy::SimilarGeneral => "similar_general",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    General,
    Specific,
}

/// Frozen query stack shared by teacher and student, stored row-major
/// `M x width` with one provenance tag per row. For the baseline strategies
/// the set is empty and only the strategy tag matters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationPointSet {
    pub strategy: Strategy,
    pub width: usize,
    pub points: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

/// `m_g x d` values i.i.d. uniform on [0, 1) from the seeded generator; the
/// caller owns seed derivation.
pub fn sample_general(m_g: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::seeded(seed);
    (0..m_g * d).map(|_| rng.next_f64()).collect()
}

/// Detached copy of the teacher's learned query embeddings; later teacher
/// updates do not reach the copy.
pub fn sample_specific(teacher: &DetrModel) -> Tensor {
    teacher.query_snapshot()
}

/// Builds the point set for `strategy`. `d` is the consuming student's
/// hidden width; a teacher whose width differs cannot share points and is
/// rejected at setup.
pub fn build(
    strategy: Strategy,
    m_g: usize,
    d: usize,
    seed: u64,
    teacher: Option<&DetrModel>,
) -> Result<DistillationPointSet> {
    let needs_teacher = matches!(strategy, Strategy::Combined | Strategy::SpecificOnly);
    let teacher = match (needs_teacher, teacher) {
        (true, None) => {
            return Err(Error::Setup(format!(
                "strategy {strategy} requires a trained teacher"
            )))
        }
        (true, Some(t)) => {
            if t.cfg.hidden_dim != d {
                return Err(Error::Setup(format!(
                    "teacher width {} does not match student width {d}",
                    t.cfg.hidden_dim
                )));
            }
            Some(t)
        }
        (false, t) => t,
    };

    let mut points = Vec::new();
    let mut provenance = Vec::new();
    match strategy {
        Strategy::Combined | Strategy::GeneralOnly => {
            points.extend(sample_general(m_g, d, seed));
            provenance.extend(std::iter::repeat(Provenance::General).take(m_g));
        }
        _ => {}
    }
    if matches!(strategy, Strategy::Combined | Strategy::SpecificOnly) {
        let q = sample_specific(teacher.expect("checked above"));
        points.extend_from_slice(q.values());
        provenance.extend(std::iter::repeat(Provenance::Specific).take(q.rows()));
    }

    Ok(DistillationPointSet {
        strategy,
        width: d,
        points,
        provenance,
    })
}

impl DistillationPointSet {
    /// Number of points M.
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// The points as an `[M, width]` tensor for binding onto a tape as a
    /// constant.
    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.width], self.points.clone())
    }

    /// FNV-1a over the little-endian point bytes; equal hashes across the
    /// teacher and student forwards of one step certify both consumed the
    /// same values.
    pub fn byte_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.points {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
