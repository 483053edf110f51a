//! Full model assembly: frozen object queries feed the pair-proposal stage
//! (projectors, cosine matrix, matrix learner, top-k selection); the
//! selected query rows feed the relation decoder and its classification
//! head. One struct owns every trainable parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    build_matched_targets, classify_relations, concat_pairs, rank_triplets, relation_loss,
    total_loss, triplet_matching, triplet_score, LossTerms, LossWeights, RelationDecoderParams,
    RelationLossConfig, SeesawCounts, TripletClasses, TripletPrediction,
};
use crate::nn::{LinearParams, ParamStore, Tape, Tensor, Value};
use crate::oracle::{assign_queries, ObjectQuerySet, QueryAssignment};
use crate::ppn::{
    build_gt_matrix, ppn_loss, ppn_positive_weight, rough_matrix, select_pairs, top_k_pairs,
    MatrixLearner, MatrixLearnerKind, MlpProjector, TopKSelection,
};
use crate::rng::{hash_str, stream};
use crate::scene::{PanopticScene, SceneGraph};

/// Architectural extents and switches of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Object query slots emitted by the segmenter.
    pub n_obj: usize,
    /// Embedding width d shared by queries, projectors, and the decoder.
    pub width: usize,
    /// Pair slots selected by top-k; also the relation query count.
    pub n_rel: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Object vocabulary size x (classes 1..=x; logits carry x+1 columns).
    pub object_classes: usize,
    /// Relation vocabulary size y (classes 1..=y; logits carry y+1 columns).
    pub relation_classes: usize,
    pub matrix_learner: MatrixLearnerKind,
    /// Folds the sigmoid of the selected pair logit into the ranking score
    /// as a fourth factor (ablation switch; off by default).
    pub fold_pair_score: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_obj: 16,
            width: 32,
            n_rel: 24,
            decoder_layers: 2,
            heads: 4,
            object_classes: 8,
            relation_classes: 6,
            matrix_learner: MatrixLearnerKind::CnnTiny,
            fold_pair_score: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_obj < 2 || self.width == 0 || self.decoder_layers == 0 {
            return Err(Error::config(format!(
                "model extents must be positive (n_obj >= 2), got n_obj={} width={} layers={}",
                self.n_obj, self.width, self.decoder_layers
            )));
        }
        if self.n_rel == 0 || self.n_rel > self.n_obj * self.n_obj - self.n_obj {
            return Err(Error::config(format!(
                "pair budget {} must lie in 1..={} (off-diagonal cells of a {1}x{1} matrix ... n_obj={})",
                self.n_rel,
                self.n_obj * self.n_obj - self.n_obj,
                self.n_obj
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be divisible by head count {}",
                self.width, self.heads
            )));
        }
        if self.object_classes < 1 || self.relation_classes < 1 {
            return Err(Error::config(
                "need at least one object class and one relation class".to_string(),
            ));
        }
        Ok(())
    }
}

/// The trainable model: pair-proposal stage plus relation decoder and head.
pub struct PairNetModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub subject_projector: MlpProjector,
    pub object_projector: MlpProjector,
    pub matrix_learner: MatrixLearner,
    pub decoder: RelationDecoderParams,
    pub relation_head: LinearParams,
}

/// Tape values and snapshots produced by one forward pass.
pub struct ForwardPass {
    pub q_obj: Value,
    pub m_rough: Value,
    pub m_filtered: Value,
    pub selection: TopKSelection,
    pub decoded: Value,
    pub rel_logits: Value,
    pub cross_maps: Vec<Tensor>,
}

/// Scalar components of one image's loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub subject: f64,
    pub object: f64,
    pub relation: f64,
    pub ppn: f64,
}

/// One training forward pass: the differentiable total loss plus the
/// snapshots the trainer records.
pub struct TrainStep {
    pub loss: Value,
    pub components: LossComponents,
    pub selection: TopKSelection,
    /// Per-slot relation targets (no-relation 0 for unmatched slots); the
    /// trainer feeds these to the seesaw counts between optimizer steps.
    pub relation_targets: Vec<usize>,
}

/// Ranked predictions plus the intermediate maps worth inspecting.
pub struct Inference {
    pub predictions: Vec<TripletPrediction>,
    /// Gram matrix of the raw object queries.
    pub gram: Tensor,
    pub m_rough: Tensor,
    pub m_filtered_sigmoid: Tensor,
    pub selection: TopKSelection,
    /// Per-layer cross-attention maps [heads, n_rel, 2*n_rel].
    pub cross_maps: Vec<Tensor>,
}

impl PairNetModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[hash_str("model-init")]);
        let subject_projector =
            MlpProjector::new(&mut store, "ppn.subject", config.width, &mut rng)?;
        let object_projector = MlpProjector::new(&mut store, "ppn.object", config.width, &mut rng)?;
        let matrix_learner = MatrixLearner::new(
            &mut store,
            "ppn.learner",
            config.matrix_learner,
            config.n_obj,
            &mut rng,
        )?;
        let decoder = RelationDecoderParams::new(
            &mut store,
            "fusion",
            config.n_rel,
            config.width,
            config.decoder_layers,
            config.heads,
            &mut rng,
        )?;
        let relation_head = LinearParams::new(
            &mut store,
            "fusion.head",
            config.width,
            config.relation_classes + 1,
            &mut rng,
        )?;
        Ok(PairNetModel {
            config,
            store,
            subject_projector,
            object_projector,
            matrix_learner,
            decoder,
            relation_head,
        })
    }

    fn check_query_set(&self, query_set: &ObjectQuerySet) -> Result<()> {
        query_set.validate()?;
        let q = query_set.queries.shape();
        let l = query_set.class_logits.shape();
        if q != [self.config.n_obj, self.config.width]
            || l[1] != self.config.object_classes + 1
        {
            return Err(Error::shape(
                "pair_net_forward",
                format!(
                    "query set extents {q:?}/{l:?} vs model n_obj={} width={} classes={}",
                    self.config.n_obj, self.config.width, self.config.object_classes
                ),
            ));
        }
        Ok(())
    }

    /// Runs the shared trunk on one image's (frozen) query embeddings.
    pub fn forward(&self, tape: &mut Tape, query_set: &ObjectQuerySet) -> Result<ForwardPass> {
        self.check_query_set(query_set)?;
        let q_obj = tape.leaf(query_set.queries.clone());
        let e_sub = self.subject_projector.apply(tape, &self.store, q_obj)?;
        let e_obj = self.object_projector.apply(tape, &self.store, q_obj)?;
        let m_rough = rough_matrix(tape, e_sub, e_obj)?;
        let m_filtered = self.matrix_learner.apply(tape, &self.store, m_rough)?;
        let selection = top_k_pairs(tape.value(m_filtered), self.config.n_rel)?;
        let (q_s, q_o) = select_pairs(tape, q_obj, &selection)?;
        let q_pair = concat_pairs(tape, q_s, q_o)?;
        let (decoded, cross_maps) = self.decoder.decode(tape, &self.store, q_pair)?;
        let rel_logits = classify_relations(tape, &self.store, &self.relation_head, decoded)?;
        Ok(ForwardPass {
            q_obj,
            m_rough,
            m_filtered,
            selection,
            decoded,
            rel_logits,
            cross_maps,
        })
    }

    /// Gathers the segmenter class-logit rows behind each selected pair
    /// slot: (subject rows, object rows), each [n_rel, x+1].
    fn slot_class_logits(
        &self,
        query_set: &ObjectQuerySet,
        selection: &TopKSelection,
    ) -> (Tensor, Tensor) {
        let cols = self.config.object_classes + 1;
        let gather = |side: fn(&(usize, usize)) -> usize| {
            let mut data = Vec::with_capacity(selection.cells.len() * cols);
            for cell in &selection.cells {
                let row = side(cell);
                data.extend_from_slice(
                    &query_set.class_logits.data()[row * cols..(row + 1) * cols],
                );
            }
            Tensor::new(vec![selection.cells.len(), cols], data).unwrap()
        };
        (gather(|c| c.0), gather(|c| c.1))
    }

    /// Ground-truth triplets as class triples, in graph order.
    fn gt_classes(scene: &PanopticScene, graph: &SceneGraph) -> Result<Vec<TripletClasses>> {
        graph
            .triplets
            .iter()
            .map(|t| {
                Ok((
                    scene.class_of(t.subject)?,
                    t.relation,
                    scene.class_of(t.object)?,
                ))
            })
            .collect()
    }

    /// Builds the composite training loss for one image.
    ///
    /// The segmenter is frozen, so the subject/object classification terms
    /// are computed on constant logit rows and only regularize the matching;
    /// `positive_weight_override` replaces the density-derived positive
    /// weight of the pair-matrix loss when set (ablation switch).
    #[allow(clippy::too_many_arguments)]
    pub fn train_forward(
        &self,
        tape: &mut Tape,
        scene: &PanopticScene,
        graph: &SceneGraph,
        query_set: &ObjectQuerySet,
        loss_cfg: &RelationLossConfig,
        counts: &SeesawCounts,
        weights: &LossWeights,
        positive_weight_override: Option<f64>,
    ) -> Result<TrainStep> {
        let pass = self.forward(tape, query_set)?;
        let assignment = assign_queries(scene, query_set)?;
        let m_gt = build_gt_matrix(&assignment, graph, self.config.n_obj)?;
        let positive_weight =
            positive_weight_override.unwrap_or_else(|| ppn_positive_weight(&m_gt.values));
        let l_ppn = ppn_loss(tape, pass.m_filtered, &m_gt.values, positive_weight)?;

        let gt = Self::gt_classes(scene, graph)?;
        let (sub_slot_logits, obj_slot_logits) = self.slot_class_logits(query_set, &pass.selection);
        let rel_snapshot = tape.value(pass.rel_logits).clone();
        let matching = triplet_matching(&sub_slot_logits, &obj_slot_logits, &rel_snapshot, &gt)?;
        let targets = build_matched_targets(&matching, &gt, self.config.n_rel)?;

        let l_rel = relation_loss(tape, pass.rel_logits, &targets.relation_targets, loss_cfg, counts)?;
        let (l_sub, l_obj) = if targets.matched_slots.is_empty() {
            (tape.constant_scalar(0.0), tape.constant_scalar(0.0))
        } else {
            let gather_rows = |src: &Tensor| {
                let cols = src.shape()[1];
                let mut data = Vec::with_capacity(targets.matched_slots.len() * cols);
                for &slot in &targets.matched_slots {
                    data.extend_from_slice(&src.data()[slot * cols..(slot + 1) * cols]);
                }
                Tensor::new(vec![targets.matched_slots.len(), cols], data).unwrap()
            };
            let sub_rows = tape.leaf(gather_rows(&sub_slot_logits));
            let obj_rows = tape.leaf(gather_rows(&obj_slot_logits));
            (
                tape.ce_loss(sub_rows, &targets.subject_cols)?,
                tape.ce_loss(obj_rows, &targets.object_cols)?,
            )
        };
        let loss = total_loss(
            tape,
            &LossTerms {
                subject: l_sub,
                object: l_obj,
                relation: l_rel,
                ppn: l_ppn,
                original: None,
            },
            weights,
        )?;
        Ok(TrainStep {
            components: LossComponents {
                total: tape.value(loss).item(),
                subject: tape.value(l_sub).item(),
                object: tape.value(l_obj).item(),
                relation: tape.value(l_rel).item(),
                ppn: tape.value(l_ppn).item(),
            },
            loss,
            selection: pass.selection,
            relation_targets: targets.relation_targets,
        })
    }

    /// Full inference on one image: ranked triplet predictions plus the
    /// diagnostic maps.
    pub fn infer(&self, query_set: &ObjectQuerySet) -> Result<Inference> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, query_set)?;
        let gram_v = tape.matmul_nt(pass.q_obj, pass.q_obj)?;
        let sigmoid_v = tape.sigmoid(pass.m_filtered);

        let (h, w) = (
            query_set.soft_masks.shape()[1],
            query_set.soft_masks.shape()[2],
        );
        let rel_logits = tape.value(pass.rel_logits);
        let cols = self.config.object_classes + 1;
        let mut predictions = Vec::with_capacity(pass.selection.cells.len());
        for (t, &(i, j)) in pass.selection.cells.iter().enumerate() {
            let class_row = |r: usize| {
                crate::fusion::softmax_dist(
                    &query_set.class_logits.data()[r * cols..(r + 1) * cols],
                )
            };
            let rel_cols = self.config.relation_classes + 1;
            let rel_dist = crate::fusion::softmax_dist(
                &rel_logits.data()[t * rel_cols..(t + 1) * rel_cols],
            );
            let sub_dist = class_row(i);
            let obj_dist = class_row(j);
            let pair_confidence = self.config.fold_pair_score.then(|| {
                let logit = pass.selection.scores[t];
                1.0 / (1.0 + (-logit).exp())
            });
            let score = triplet_score(&sub_dist, &obj_dist, &rel_dist, pair_confidence)?;
            predictions.push(TripletPrediction {
                pair_index: t,
                sub_query: i,
                obj_query: j,
                sub_dist,
                obj_dist,
                rel_dist,
                sub_mask: Tensor::new(vec![h, w], query_set.mask_of(i).to_vec())?,
                obj_mask: Tensor::new(vec![h, w], query_set.mask_of(j).to_vec())?,
                score,
            });
        }
        Ok(Inference {
            predictions: rank_triplets(predictions),
            gram: tape.value(gram_v).clone(),
            m_rough: tape.value(pass.m_rough).clone(),
            m_filtered_sigmoid: tape.value(sigmoid_v).clone(),
            selection: pass.selection,
            cross_maps: pass.cross_maps,
        })
    }
}

/// Recovers the query-to-segment assignment used for supervision; exposed
/// for evaluation code that needs it alongside inference.
pub fn query_assignment(
    scene: &PanopticScene,
    query_set: &ObjectQuerySet,
) -> Result<QueryAssignment> {
    assign_queries(scene, query_set)
}
