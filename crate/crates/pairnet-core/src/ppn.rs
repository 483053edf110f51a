//! Pair Proposal Network: subject/object projectors, the cosine rough pair
//! matrix, a convolutional matrix learner that sharpens it into logits, the
//! binary ground-truth pair matrix, the positively-reweighted BCE loss, and
//! top-k pair selection.

use crate::error::{Error, Result};
use crate::nn::{LinearParams, ParamId, ParamStore, Tape, Tensor, Value};
use crate::oracle::QueryAssignment;
use crate::scene::SceneGraph;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Norm guard for cosine similarity: rows shorter than this divide by it
/// instead, keeping zero embeddings finite.
pub const COSINE_EPS: f64 = 1e-8;

/// A 3-layer MLP (width-preserving, ReLU between layers) that projects
/// object queries into subject or object embedding space.
#[derive(Debug, Clone)]
pub struct MlpProjector {
    layers: [LinearParams; 3],
}

impl MlpProjector {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                LinearParams::new(store, &format!("{prefix}.l1"), width, width, rng)?,
                LinearParams::new(store, &format!("{prefix}.l2"), width, width, rng)?,
                LinearParams::new(store, &format!("{prefix}.l3"), width, width, rng)?,
            ],
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Value) -> Result<Value> {
        let h1 = self.layers[0].apply(tape, store, x)?;
        let a1 = tape.relu(h1);
        let h2 = self.layers[1].apply(tape, store, a1)?;
        let a2 = tape.relu(h2);
        self.layers[2].apply(tape, store, a2)
    }
}

/// Cosine similarity between every subject row and every object row:
/// out[i][j] = <sub[i], obj[j]> / (max(|sub[i]|, eps) * max(|obj[j]|, eps)).
pub fn rough_matrix(tape: &mut Tape, e_sub: Value, e_obj: Value) -> Result<Value> {
    let ns = tape.normalize_rows(e_sub, COSINE_EPS)?;
    let no = tape.normalize_rows(e_obj, COSINE_EPS)?;
    tape.matmul_nt(ns, no)
}

/// Architecture of the matrix learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixLearnerKind {
    /// 3 convolutions, channels 1 -> 64 -> 64 -> 1, 7x7 kernels.
    CnnTiny,
    /// 3 convolutions, channels 1 -> 256 -> 256 -> 1, 7x7 kernels.
    CnnBase,
    /// Row-wise 3-layer MLP over matrix rows.
    Mlp,
}

impl MatrixLearnerKind {
    fn channels(self) -> usize {
        match self {
            MatrixLearnerKind::CnnTiny => 64,
            MatrixLearnerKind::CnnBase => 256,
            MatrixLearnerKind::Mlp => 0,
        }
    }
}

const LEARNER_KERNEL: usize = 7;

/// Refines the rough cosine matrix into pair logits. ReLU between layers,
/// no terminal activation: the output is a logit map of the same extent.
#[derive(Debug, Clone)]
pub struct MatrixLearner {
    pub kind: MatrixLearnerKind,
    convs: Vec<(ParamId, ParamId)>,
    mlp: Option<[LinearParams; 3]>,
}

impl MatrixLearner {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: MatrixLearnerKind,
        n_obj: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        match kind {
            MatrixLearnerKind::CnnTiny | MatrixLearnerKind::CnnBase => {
                let c = kind.channels();
                let plan = [(1usize, c), (c, c), (c, 1usize)];
                let mut convs = Vec::with_capacity(3);
                for (i, &(cin, cout)) in plan.iter().enumerate() {
                    let bound = 1.0 / ((cin * LEARNER_KERNEL * LEARNER_KERNEL) as f64).sqrt();
                    let kernels = store.register(
                        format!("{prefix}.conv{}.k", i + 1),
                        Tensor::uniform(&[cout, cin, LEARNER_KERNEL, LEARNER_KERNEL], bound, rng),
                    )?;
                    let bias = store.register(
                        format!("{prefix}.conv{}.b", i + 1),
                        Tensor::zeros(&[cout]),
                    )?;
                    convs.push((kernels, bias));
                }
                Ok(Self {
                    kind,
                    convs,
                    mlp: None,
                })
            }
            MatrixLearnerKind::Mlp => Ok(Self {
                kind,
                convs: Vec::new(),
                mlp: Some([
                    LinearParams::new(store, &format!("{prefix}.l1"), n_obj, n_obj, rng)?,
                    LinearParams::new(store, &format!("{prefix}.l2"), n_obj, n_obj, rng)?,
                    LinearParams::new(store, &format!("{prefix}.l3"), n_obj, n_obj, rng)?,
                ]),
            }),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, m_rough: Value) -> Result<Value> {
        let shape = tape.value(m_rough).shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape(
                "matrix_learner",
                format!("expected a square matrix, got {shape:?}"),
            ));
        }
        let n = shape[0];
        match self.kind {
            MatrixLearnerKind::CnnTiny | MatrixLearnerKind::CnnBase => {
                let mut x = tape.reshape(m_rough, &[1, n, n])?;
                for (i, &(kid, bid)) in self.convs.iter().enumerate() {
                    let k = store.bind(tape, kid);
                    let b = store.bind(tape, bid);
                    x = tape.conv2d(x, k, b)?;
                    if i + 1 < self.convs.len() {
                        x = tape.relu(x);
                    }
                }
                tape.reshape(x, &[n, n])
            }
            MatrixLearnerKind::Mlp => {
                let layers = self.mlp.as_ref().expect("mlp learner has layers");
                let h1 = layers[0].apply(tape, store, m_rough)?;
                let a1 = tape.relu(h1);
                let h2 = layers[1].apply(tape, store, a1)?;
                let a2 = tape.relu(h2);
                layers[2].apply(tape, store, a2)
            }
        }
    }
}

/// What a pair matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMatrixKind {
    /// Cosine similarities in [-1, 1].
    Rough,
    /// Unbounded logits from the matrix learner.
    FilteredLogits,
    /// Binary supervision targets with a zero diagonal.
    GroundTruth,
}

/// A square pair matrix tagged with its meaning.
#[derive(Debug, Clone)]
pub struct PairMatrix {
    pub values: Tensor,
    pub kind: PairMatrixKind,
}

impl PairMatrix {
    pub fn new(values: Tensor, kind: PairMatrixKind) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape(
                "pair matrix",
                format!("expected square rank-2, got {shape:?}"),
            ));
        }
        let m = Self { values, kind };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.values.shape()[0];
        match self.kind {
            PairMatrixKind::Rough => {
                // Cosines live in [-1, 1] up to round-off.
                if self
                    .values
                    .data()
                    .iter()
                    .any(|&v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v))
                {
                    return Err(Error::shape(
                        "pair matrix",
                        "rough values must lie in [-1, 1]".to_string(),
                    ));
                }
            }
            PairMatrixKind::GroundTruth => {
                for i in 0..n {
                    for j in 0..n {
                        let v = self.values.at2(i, j);
                        if v != 0.0 && v != 1.0 {
                            return Err(Error::shape(
                                "pair matrix",
                                format!("ground truth must be binary, cell ({i},{j}) = {v}"),
                            ));
                        }
                        if i == j && v != 0.0 {
                            return Err(Error::shape(
                                "pair matrix",
                                format!("ground truth diagonal must be zero, cell ({i},{i})"),
                            ));
                        }
                    }
                }
            }
            PairMatrixKind::FilteredLogits => {}
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Builds the binary supervision matrix: cell (slot(sub), slot(obj)) is 1
/// for every ground-truth triplet; multiple relations on one pair still set
/// a single 1.
pub fn build_gt_matrix(
    assignment: &QueryAssignment,
    graph: &SceneGraph,
    n_obj: usize,
) -> Result<PairMatrix> {
    let mut values = Tensor::zeros(&[n_obj, n_obj]);
    {
        let data = values.data_mut();
        for t in &graph.triplets {
            let slot = |segment: u32| -> Result<usize> {
                assignment
                    .slot_of_segment
                    .get((segment - 1) as usize)
                    .copied()
                    .ok_or_else(|| {
                        Error::shape(
                            "build_gt_matrix",
                            format!(
                                "triplet ({}, {}, {}) references unassigned segment {segment}",
                                t.subject, t.relation, t.object
                            ),
                        )
                    })
            };
            let (si, oj) = (slot(t.subject)?, slot(t.object)?);
            data[si * n_obj + oj] = 1.0;
        }
    }
    PairMatrix::new(values, PairMatrixKind::GroundTruth)
}

/// The positive-cell weight: total cells over positive cells (the
/// reciprocal of the target matrix's density), or 0 when there are no
/// positives (the positive term then vanishes).
pub fn ppn_positive_weight(m_gt: &Tensor) -> f64 {
    let total = m_gt.numel() as f64;
    let positives: f64 = m_gt.data().iter().sum();
    if positives == 0.0 {
        0.0
    } else {
        total / positives
    }
}

/// Positively-reweighted binary cross-entropy between pair logits and the
/// binary target matrix, mean-reduced over all cells.
pub fn ppn_loss(
    tape: &mut Tape,
    filtered_logits: Value,
    m_gt: &Tensor,
    positive_weight: f64,
) -> Result<Value> {
    tape.weighted_bce_loss(filtered_logits, m_gt, positive_weight)
}

/// The k highest-scoring off-diagonal cells, descending; ties resolve in
/// row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection {
    pub cells: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

pub fn top_k_pairs(m_filtered: &Tensor, k: usize) -> Result<TopKSelection> {
    let shape = m_filtered.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(
            "top_k_pairs",
            format!("expected square rank-2, got {shape:?}"),
        ));
    }
    let n = shape[0];
    let available = n * n - n;
    if k > available {
        return Err(Error::config(format!(
            "top-k of {k} exceeds the {available} off-diagonal cells of a {n}x{n} matrix"
        )));
    }
    let mut order: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .collect();
    // Descending score; row-major (i, j) breaks ties. sort is stable but the
    // comparator makes the rule explicit.
    order.sort_by(|&a, &b| {
        m_filtered
            .at2(b.0, b.1)
            .total_cmp(&m_filtered.at2(a.0, a.1))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let scores = order.iter().map(|&(i, j)| m_filtered.at2(i, j)).collect();
    Ok(TopKSelection {
        cells: order,
        scores,
    })
}

/// Gathers the subject and object query rows for each selected cell. The
/// gather routes gradients back into the query matrix, accumulating over
/// repeated rows.
pub fn select_pairs(
    tape: &mut Tape,
    q_obj: Value,
    selection: &TopKSelection,
) -> Result<(Value, Value)> {
    let subs: Vec<usize> = selection.cells.iter().map(|&(i, _)| i).collect();
    let objs: Vec<usize> = selection.cells.iter().map(|&(_, j)| j).collect();
    let q_s = tape.gather_rows(q_obj, &subs)?;
    let q_o = tape.gather_rows(q_obj, &objs)?;
    Ok((q_s, q_o))
}
