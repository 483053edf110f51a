//! Relation decoder and triplet-level losses.
//!
//! Selected subject/object queries are concatenated into a pair sequence; a
//! bank of learnable relation queries cross-attends to that sequence through a
//! stack of pre-norm transformer layers, and a linear head scores each slot
//! over the relation vocabulary (index 0 = no relation). Predictions are
//! matched to ground-truth triplets with the Hungarian assignment, and the
//! matched/unmatched split drives the classification losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hungarian::min_cost_assignment;
use crate::nn::{AttentionParams, LinearParams, ParamStore, Tape, Tensor, Value};

/// One decoder layer: self-attention over relation queries, cross-attention
/// into the pair sequence, then a two-layer feed-forward block. All three are
/// residual with layer normalization applied to the sublayer input.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
}

/// Relation decoder: `n_rel` learnable relation queries refined through `L`
/// layers against a pair sequence of `2 * n_rel` rows.
///
/// The pair sequence is order-aligned with the relation queries: rows `i` and
/// `n_rel + i` both belong to slot `i`. The decoder leans on that alignment
/// by sharing one learned slot code per relation slot across the attention
/// sites: `slot_pos[i]` is the positional term of relation query `i` and of
/// cross-attention key rows `i` and `n_rel + i`, while `role_pos` (two rows)
/// separates the subject half of the keys from the object half. Routing each
/// relation query to its own pair then only requires aligning one bilinear
/// form with the shared codes instead of learning `n_rel` independent
/// query/key correspondences. Values carry content only.
#[derive(Clone, Debug)]
pub struct RelationDecoderParams {
    pub n_rel: usize,
    pub d: usize,
    pub heads: usize,
    pub rel_queries: crate::nn::ParamId,
    pub slot_pos: crate::nn::ParamId,
    pub role_pos: crate::nn::ParamId,
    pub layers: Vec<DecoderLayerParams>,
}

impl RelationDecoderParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_rel: usize,
        d: usize,
        layers: usize,
        heads: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        if n_rel == 0 || d == 0 || layers == 0 {
            return Err(Error::config(format!(
                "relation decoder needs positive extents, got n_rel={n_rel} d={d} layers={layers}"
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let rel_queries = store.register(
            format!("{prefix}.rel_queries"),
            Tensor::normal(&[n_rel, d], scale, rng),
        )?;
        let slot_pos = store.register(
            format!("{prefix}.slot_pos"),
            Tensor::normal(&[n_rel, d], scale, rng),
        )?;
        let role_pos = store.register(
            format!("{prefix}.role_pos"),
            Tensor::normal(&[2, d], scale, rng),
        )?;
        let mut layer_params = Vec::with_capacity(layers);
        for l in 0..layers {
            layer_params.push(DecoderLayerParams {
                self_attn: AttentionParams::new(
                    store,
                    &format!("{prefix}.layer{l}.self"),
                    d,
                    heads,
                    rng,
                )?,
                cross_attn: AttentionParams::new(
                    store,
                    &format!("{prefix}.layer{l}.cross"),
                    d,
                    heads,
                    rng,
                )?,
                ffn1: LinearParams::new(store, &format!("{prefix}.layer{l}.ffn1"), d, 4 * d, rng)?,
                ffn2: LinearParams::new(store, &format!("{prefix}.layer{l}.ffn2"), 4 * d, d, rng)?,
            });
        }
        Ok(RelationDecoderParams {
            n_rel,
            d,
            heads,
            rel_queries,
            slot_pos,
            role_pos,
            layers: layer_params,
        })
    }

    /// Runs the decoder against a pair sequence of shape `[2*n_rel, d]`.
    /// Returns the decoded relation queries `[n_rel, d]` and, per layer, a
    /// snapshot of the cross-attention weights `[heads, n_rel, 2*n_rel]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_pair: Value,
    ) -> Result<(Value, Vec<Tensor>)> {
        let shape = tape.value(q_pair).shape().to_vec();
        if shape != [2 * self.n_rel, self.d] {
            return Err(Error::shape(
                "relation_decode",
                format!(
                    "pair sequence {:?}, expected [{}, {}]",
                    shape,
                    2 * self.n_rel,
                    self.d
                ),
            ));
        }
        let slot_pos = store.bind(tape, self.slot_pos);
        let role_pos = store.bind(tape, self.role_pos);
        let self_v_pos = tape.leaf(Tensor::zeros(&[self.n_rel, self.d]));
        let cross_v_pos = tape.leaf(Tensor::zeros(&[2 * self.n_rel, self.d]));

        // Key positions for the pair sequence: slot code repeated for the
        // subject and object halves, plus the half's role row.
        let mut sel = vec![0.0; 2 * self.n_rel * 2];
        for r in 0..2 * self.n_rel {
            sel[r * 2 + r / self.n_rel] = 1.0;
        }
        let sel = tape.leaf(Tensor::new(vec![2 * self.n_rel, 2], sel)?);
        let zero_bias = tape.leaf(Tensor::zeros(&[self.d]));
        let role_rows = tape.linear(sel, role_pos, zero_bias)?;
        let dup_slots = tape.concat_rows(slot_pos, slot_pos)?;
        let key_pos = tape.add(dup_slots, role_rows)?;

        let mut x = store.bind(tape, self.rel_queries);
        let mut cross_maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = tape.layer_norm(x, 1)?;
            let (sa, _) =
                layer
                    .self_attn
                    .apply(tape, store, h, h, slot_pos, slot_pos, self_v_pos)?;
            x = tape.add(x, sa)?;

            let h = tape.layer_norm(x, 1)?;
            let (ca, attn) =
                layer
                    .cross_attn
                    .apply(tape, store, h, q_pair, slot_pos, key_pos, cross_v_pos)?;
            x = tape.add(x, ca)?;
            cross_maps.push(attn);

            let h = tape.layer_norm(x, 1)?;
            let f = layer.ffn1.apply(tape, store, h)?;
            let f = tape.relu(f);
            let f = layer.ffn2.apply(tape, store, f)?;
            x = tape.add(x, f)?;
        }
        Ok((x, cross_maps))
    }
}

/// Stacks the selected subject queries on top of the object queries:
/// rows `0..n_rel` are subjects, rows `n_rel..2*n_rel` are objects.
pub fn concat_pairs(tape: &mut Tape, q_sub: Value, q_obj: Value) -> Result<Value> {
    let s = tape.value(q_sub).shape().to_vec();
    let o = tape.value(q_obj).shape().to_vec();
    if s.len() != 2 || s != o {
        return Err(Error::shape(
            "concat_pairs",
            format!("subject rows {s:?} vs object rows {o:?}"),
        ));
    }
    tape.concat_rows(q_sub, q_obj)
}

/// Single affine layer mapping decoded relation queries to relation logits
/// over `y + 1` classes (column 0 = no relation).
pub fn classify_relations(
    tape: &mut Tape,
    store: &ParamStore,
    head: &LinearParams,
    decoded: Value,
) -> Result<Value> {
    head.apply(tape, store, decoded)
}

/// Ground-truth triplet as class indices: (subject class, relation class,
/// object class), all 1-based.
pub type TripletClasses = (u32, u32, u32);

/// Optimal injective assignment of ground-truth triplets to prediction
/// slots. `assignment[g]` is the slot matched to ground-truth triplet `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletAssignment {
    pub pred_of_gt: Vec<usize>,
    pub total_cost: f64,
}

/// Matches `N` ground-truth triplets to `K >= N` prediction slots, minimizing
/// the summed cross-entropy of the subject, object, and relation
/// distributions against the ground-truth classes.
///
/// `sub_logits`/`obj_logits` are `[K, x+1]` rows of object-class logits for
/// the slot's subject and object query (class c at column c-1, no-object
/// last); `rel_logits` is `[K, y+1]` (relation r at column r, no-relation at
/// column 0).
pub fn triplet_matching(
    sub_logits: &Tensor,
    obj_logits: &Tensor,
    rel_logits: &Tensor,
    gt: &[TripletClasses],
) -> Result<TripletAssignment> {
    let (k, obj_cols) = match sub_logits.shape() {
        [k, c] => (*k, *c),
        s => {
            return Err(Error::shape(
                "triplet_matching",
                format!("subject logits must be rank 2, got {s:?}"),
            ))
        }
    };
    if obj_logits.shape() != [k, obj_cols] {
        return Err(Error::shape(
            "triplet_matching",
            format!(
                "object logits {:?} do not match subject logits {:?}",
                obj_logits.shape(),
                sub_logits.shape()
            ),
        ));
    }
    let rel_cols = match rel_logits.shape() {
        [kk, c] if *kk == k => *c,
        s => {
            return Err(Error::shape(
                "triplet_matching",
                format!("relation logits {s:?}, expected [{k}, _]"),
            ))
        }
    };
    let n = gt.len();
    if n > k {
        return Err(Error::config(format!(
            "{n} ground-truth triplets exceed {k} prediction slots; raise the pair budget"
        )));
    }
    for &(s, r, o) in gt {
        if s == 0 || (s as usize) >= obj_cols || o == 0 || (o as usize) >= obj_cols {
            return Err(Error::config(format!(
                "triplet endpoint class ({s}, {o}) outside 1..={}",
                obj_cols - 1
            )));
        }
        if r == 0 || (r as usize) >= rel_cols {
            return Err(Error::config(format!(
                "relation class {r} outside 1..={}",
                rel_cols - 1
            )));
        }
    }
    let mut costs = vec![0.0; n * k];
    for (g, &(s, r, o)) in gt.iter().enumerate() {
        for slot in 0..k {
            costs[g * k + slot] = row_ce(sub_logits, slot, s as usize - 1)
                + row_ce(obj_logits, slot, o as usize - 1)
                + row_ce(rel_logits, slot, r as usize);
        }
    }
    let (pred_of_gt, total_cost) = min_cost_assignment(&Tensor::new(vec![n, k], costs)?)?;
    Ok(TripletAssignment {
        pred_of_gt,
        total_cost,
    })
}

fn row_ce(logits: &Tensor, row: usize, col: usize) -> f64 {
    let c = logits.shape()[1];
    let data = &logits.data()[row * c..(row + 1) * c];
    let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + data.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - data[col]
}

/// Classification targets induced by a triplet assignment.
///
/// `relation_targets` covers every slot (unmatched slots get the no-relation
/// class 0); subject/object targets exist only for the matched slots, listed
/// in ground-truth order as logit column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedTargets {
    pub matched_slots: Vec<usize>,
    pub subject_cols: Vec<usize>,
    pub object_cols: Vec<usize>,
    pub relation_targets: Vec<usize>,
}

/// Expands an assignment into per-slot training targets.
pub fn build_matched_targets(
    assignment: &TripletAssignment,
    gt: &[TripletClasses],
    slots: usize,
) -> Result<MatchedTargets> {
    if assignment.pred_of_gt.len() != gt.len() {
        return Err(Error::shape(
            "build_matched_targets",
            format!(
                "{} assigned slots vs {} ground-truth triplets",
                assignment.pred_of_gt.len(),
                gt.len()
            ),
        ));
    }
    let mut relation_targets = vec![0usize; slots];
    let mut seen = vec![false; slots];
    let mut matched_slots = Vec::with_capacity(gt.len());
    let mut subject_cols = Vec::with_capacity(gt.len());
    let mut object_cols = Vec::with_capacity(gt.len());
    for (&slot, &(s, r, o)) in assignment.pred_of_gt.iter().zip(gt) {
        if slot >= slots || seen[slot] {
            return Err(Error::shape(
                "build_matched_targets",
                format!("assignment reuses or overflows slot {slot} of {slots}"),
            ));
        }
        seen[slot] = true;
        relation_targets[slot] = r as usize;
        matched_slots.push(slot);
        subject_cols.push(s as usize - 1);
        object_cols.push(o as usize - 1);
    }
    Ok(MatchedTargets {
        matched_slots,
        subject_cols,
        object_cols,
        relation_targets,
    })
}

/// Which per-slot relation classification loss to train with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationLossKind {
    CrossEntropy,
    Focal,
    Seesaw,
}

/// Relation loss selection and shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationLossConfig {
    pub kind: RelationLossKind,
    /// Focusing exponent of the focal loss; 0 reduces to cross-entropy.
    pub focal_gamma: f64,
    /// Seesaw mitigation exponent on the class-count ratio.
    pub seesaw_mitigation: f64,
    /// Seesaw compensation exponent on the predicted-probability ratio.
    pub seesaw_compensation: f64,
}

impl Default for RelationLossConfig {
    fn default() -> Self {
        RelationLossConfig {
            kind: RelationLossKind::Seesaw,
            focal_gamma: 2.0,
            seesaw_mitigation: 0.8,
            seesaw_compensation: 2.0,
        }
    }
}

impl RelationLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::config(format!(
                "focal gamma must be finite and >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(self.seesaw_mitigation.is_finite() && self.seesaw_mitigation >= 0.0)
            || !(self.seesaw_compensation.is_finite() && self.seesaw_compensation >= 0.0)
        {
            return Err(Error::config(format!(
                "seesaw exponents must be finite and >= 0, got ({}, {})",
                self.seesaw_mitigation, self.seesaw_compensation
            )));
        }
        Ok(())
    }
}

/// Running per-class target counts backing the seesaw mitigation ratio.
/// Updated between optimizer steps by the trainer; read-only during loss
/// evaluation. Class 0 (no relation) is counted but never mitigated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeesawCounts {
    counts: Vec<u64>,
}

impl SeesawCounts {
    pub fn new(classes: usize) -> Self {
        SeesawCounts {
            counts: vec![0; classes],
        }
    }

    /// Adds one observation per target class.
    pub fn observe(&mut self, targets: &[usize]) {
        for &t in targets {
            if t >= self.counts.len() {
                self.counts.resize(t + 1, 0);
            }
            self.counts[t] += 1;
        }
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts.get(class).copied().unwrap_or(0)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }
}

/// Per-sample, per-class weights applied to competing (negative) logits in
/// the seesaw loss. For true class `i` and negative class `j`, the weight is
/// `min(1, (count_j / count_i)^p_mit) * max(1, (p_j / p_i)^q_comp)` with
/// probabilities read from the current (detached) softmax rows; the count
/// ratio is skipped when either class is the no-relation class 0. The true
/// class keeps weight 1. Zero counts are clamped to 1 for the ratio.
pub fn seesaw_weights(
    logits: &Tensor,
    targets: &[usize],
    counts: &SeesawCounts,
    cfg: &RelationLossConfig,
) -> Result<Tensor> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => {
            return Err(Error::shape(
                "seesaw_weights",
                format!("logits must be rank 2, got {s:?}"),
            ))
        }
    };
    if targets.len() != n {
        return Err(Error::shape(
            "seesaw_weights",
            format!("{} targets vs {n} rows", targets.len()),
        ));
    }
    let mut weights = vec![1.0; n * c];
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::shape(
                "seesaw_weights",
                format!("target {t} >= {c}"),
            ));
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p_t = exps[t] / sum;
        let cnt_t = counts.count(t).max(1) as f64;
        for j in 0..c {
            if j == t {
                continue;
            }
            let mitigation = if t == 0 || j == 0 {
                1.0
            } else {
                let ratio = counts.count(j).max(1) as f64 / cnt_t;
                ratio.powf(cfg.seesaw_mitigation).min(1.0)
            };
            let p_j = exps[j] / sum;
            let compensation = if cfg.seesaw_compensation == 0.0 {
                1.0
            } else {
                (p_j / p_t.max(f64::MIN_POSITIVE))
                    .powf(cfg.seesaw_compensation)
                    .max(1.0)
            };
            weights[r * c + j] = mitigation * compensation;
        }
    }
    Tensor::new(vec![n, c], weights)
}

/// Mean relation classification loss over every prediction slot.
pub fn relation_loss(
    tape: &mut Tape,
    rel_logits: Value,
    targets: &[usize],
    cfg: &RelationLossConfig,
    counts: &SeesawCounts,
) -> Result<Value> {
    cfg.validate()?;
    match cfg.kind {
        RelationLossKind::CrossEntropy => tape.ce_loss(rel_logits, targets),
        RelationLossKind::Focal => tape.focal_loss(rel_logits, targets, cfg.focal_gamma),
        RelationLossKind::Seesaw => {
            let weights = seesaw_weights(tape.value(rel_logits), targets, counts, cfg)?;
            tape.weighted_negative_ce_loss(rel_logits, targets, &weights)
        }
    }
}

/// Scalar multipliers combining the per-image loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub subject: f64,
    pub object: f64,
    pub relation: f64,
    pub ppn: f64,
    pub original: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            subject: 4.0,
            object: 4.0,
            relation: 2.0,
            ppn: 5.0,
            original: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.subject,
            self.object,
            self.relation,
            self.ppn,
            self.original,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Scalar loss terms of one image. `original` is the segmenter's own loss;
/// it is `None` when the segmenter is frozen (the oracle), which zeroes that
/// term out of the total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub subject: Value,
    pub object: Value,
    pub relation: Value,
    pub ppn: Value,
    pub original: Option<Value>,
}

/// Weighted sum of the per-image loss terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Value> {
    weights.validate()?;
    let mut parts = vec![
        (terms.subject, weights.subject),
        (terms.object, weights.object),
        (terms.relation, weights.relation),
        (terms.ppn, weights.ppn),
    ];
    if let Some(original) = terms.original {
        parts.push((original, weights.original));
    }
    tape.weighted_sum(&parts)
}

/// One scored triplet prediction, self-contained for ranking and evaluation.
#[derive(Clone, Debug)]
pub struct TripletPrediction {
    /// Pair slot this prediction came from.
    pub pair_index: usize,
    /// Query indices of the subject and object behind the slot.
    pub sub_query: usize,
    pub obj_query: usize,
    /// Softmax class distributions: subject/object over x+1 object classes
    /// (no-object last), relation over y+1 classes (no-relation first).
    pub sub_dist: Vec<f64>,
    pub obj_dist: Vec<f64>,
    pub rel_dist: Vec<f64>,
    /// Soft masks of the subject and object queries, shape [H, W].
    pub sub_mask: Tensor,
    pub obj_mask: Tensor,
    pub score: f64,
}

impl TripletPrediction {
    /// Hard (subject, relation, object) class labels: the argmax over real
    /// classes only — the no-object column is skipped for endpoints and the
    /// no-relation column for the relation. Labels are 1-based.
    pub fn labels(&self) -> (u32, u32, u32) {
        let argmax = |xs: &[f64]| {
            let mut best = 0usize;
            for (i, &v) in xs.iter().enumerate() {
                if v > xs[best] {
                    best = i;
                }
            }
            best
        };
        let sub = argmax(&self.sub_dist[..self.sub_dist.len() - 1]) as u32 + 1;
        let obj = argmax(&self.obj_dist[..self.obj_dist.len() - 1]) as u32 + 1;
        let rel = argmax(&self.rel_dist[1..]) as u32 + 1;
        (sub, rel, obj)
    }
}

/// Numerically stable softmax of one logits row.
pub fn softmax_dist(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Confidence of a triplet: the product of the subject's and object's best
/// real-class probability (no-object column excluded) and the relation's best
/// real-relation probability (no-relation column excluded). An optional pair
/// confidence in [0, 1] can be folded in as a fourth factor.
pub fn triplet_score(
    sub_dist: &[f64],
    obj_dist: &[f64],
    rel_dist: &[f64],
    pair_confidence: Option<f64>,
) -> Result<f64> {
    if sub_dist.len() < 2 || obj_dist.len() < 2 || rel_dist.len() < 2 {
        return Err(Error::shape(
            "triplet_score",
            "distributions need at least one real class".to_string(),
        ));
    }
    let max_of = |xs: &[f64]| xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = max_of(&sub_dist[..sub_dist.len() - 1]);
    let o = max_of(&obj_dist[..obj_dist.len() - 1]);
    let r = max_of(&rel_dist[1..]);
    let mut score = s * o * r;
    if let Some(p) = pair_confidence {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!(
                "pair confidence must lie in [0, 1], got {p}"
            )));
        }
        score *= p;
    }
    Ok(score)
}

/// Sorts predictions by descending score, breaking ties by ascending pair
/// slot index.
pub fn rank_triplets(mut predictions: Vec<TripletPrediction>) -> Vec<TripletPrediction> {
    predictions.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.pair_index.cmp(&b.pair_index))
    });
    predictions
}
