//! Evaluation protocol: mask IoU, ranked triplet recall (full, pair-only,
//! mean-per-class, and thing/stuff-categorical variants), detector-level
//! mask quality, and panoptic quality.
//!
//! Recall scans the top-K ranked predictions in order; a prediction claims
//! the first still-unclaimed ground-truth triplet (in ground-truth order)
//! whose subject, object, and relation classes all match and whose subject
//! and object masks both reach the IoU threshold. A maximum-bipartite
//! claiming variant is available as a cross-check ("optimal" in reports).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TripletPrediction;
use crate::nn::Tensor;
use crate::oracle::{ObjectQuerySet, QueryAssignment};
use crate::scene::{ObjectVocabulary, PanopticScene, SceneGraph};

/// Intersection-over-union of two equally sized binary (0/1) masks.
/// Two empty masks have no defined overlap and are rejected.
pub fn mask_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mask_iou",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if (x != 0.0 && x != 1.0) || (y != 0.0 && y != 1.0) {
            return Err(Error::shape(
                "mask_iou",
                "masks must be binary 0/1".to_string(),
            ));
        }
        let (px, py) = (x == 1.0, y == 1.0);
        inter += (px && py) as usize;
        union += (px || py) as usize;
    }
    if union == 0 {
        return Err(Error::Eval("IoU of two empty masks is undefined".to_string()));
    }
    Ok(inter as f64 / union as f64)
}

fn bool_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn binarized(values: &[f64]) -> Vec<bool> {
    values.iter().map(|&v| v >= 0.5).collect()
}

/// One ground-truth triplet unpacked for matching.
struct GtEntry {
    sub_class: u32,
    rel_class: u32,
    obj_class: u32,
    sub_mask: Vec<bool>,
    obj_mask: Vec<bool>,
    sub_thing: bool,
    obj_thing: bool,
}

fn gt_entries(
    scene: &PanopticScene,
    graph: &SceneGraph,
    objects: &ObjectVocabulary,
) -> Result<Vec<GtEntry>> {
    graph
        .triplets
        .iter()
        .map(|t| {
            let sub_class = scene.class_of(t.subject)?;
            let obj_class = scene.class_of(t.object)?;
            Ok(GtEntry {
                sub_class,
                rel_class: t.relation,
                obj_class,
                sub_mask: binarized(scene.mask_of(t.subject)?.data()),
                obj_mask: binarized(scene.mask_of(t.object)?.data()),
                sub_thing: objects.is_thing(sub_class),
                obj_thing: objects.is_thing(obj_class),
            })
        })
        .collect()
}

/// A prediction's matching-relevant view: hard labels and binarized masks.
struct PredEntry {
    sub_class: u32,
    rel_class: u32,
    obj_class: u32,
    sub_mask: Vec<bool>,
    obj_mask: Vec<bool>,
}

fn pred_entries(
    predictions: &[TripletPrediction],
    scene: &PanopticScene,
) -> Result<Vec<PredEntry>> {
    predictions
        .iter()
        .map(|p| {
            for mask in [&p.sub_mask, &p.obj_mask] {
                if mask.shape() != [scene.height, scene.width] {
                    return Err(Error::shape(
                        "prediction mask",
                        format!(
                            "{:?} vs raster [{}, {}]",
                            mask.shape(),
                            scene.height,
                            scene.width
                        ),
                    ));
                }
            }
            let (sub_class, rel_class, obj_class) = p.labels();
            Ok(PredEntry {
                sub_class,
                rel_class,
                obj_class,
                sub_mask: binarized(p.sub_mask.data()),
                obj_mask: binarized(p.obj_mask.data()),
            })
        })
        .collect()
}

/// Eligibility of the first `k` predictions against every ground-truth
/// triplet. With `require_relation` false the relation-class equality test
/// is dropped (pair recall).
fn eligibility(
    preds: &[PredEntry],
    gts: &[GtEntry],
    k: usize,
    iou_threshold: f64,
    require_relation: bool,
) -> Vec<Vec<bool>> {
    preds
        .iter()
        .take(k)
        .map(|p| {
            gts.iter()
                .map(|g| {
                    p.sub_class == g.sub_class
                        && p.obj_class == g.obj_class
                        && (!require_relation || p.rel_class == g.rel_class)
                        && bool_iou(&p.sub_mask, &g.sub_mask) >= iou_threshold
                        && bool_iou(&p.obj_mask, &g.obj_mask) >= iou_threshold
                })
                .collect()
        })
        .collect()
}

/// Greedy claiming: predictions in rank order each claim the first
/// still-unclaimed eligible ground-truth triplet, in ground-truth order.
pub fn claim_greedy(elig: &[Vec<bool>]) -> Vec<Option<usize>> {
    let gts = elig.first().map_or(0, Vec::len);
    let mut taken = vec![false; gts];
    elig.iter()
        .map(|row| {
            let pick = (0..gts).find(|&g| row[g] && !taken[g]);
            if let Some(g) = pick {
                taken[g] = true;
            }
            pick
        })
        .collect()
}

/// Maximum-bipartite claiming via augmenting paths: the largest possible
/// one-to-one prediction-to-ground-truth matching under the same
/// eligibility. Used as the cross-check oracle for the greedy rule.
pub fn claim_maximum(elig: &[Vec<bool>]) -> Vec<Option<usize>> {
    let preds = elig.len();
    let gts = elig.first().map_or(0, Vec::len);
    let mut owner: Vec<Option<usize>> = vec![None; gts];

    fn augment(
        p: usize,
        elig: &[Vec<bool>],
        visited: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for g in 0..elig[p].len() {
            if elig[p][g] && !visited[g] {
                visited[g] = true;
                if owner[g].is_none() || augment(owner[g].unwrap(), elig, visited, owner) {
                    owner[g] = Some(p);
                    return true;
                }
            }
        }
        false
    }

    for p in 0..preds {
        let mut visited = vec![false; gts];
        augment(p, elig, &mut visited, &mut owner);
    }
    let mut claim = vec![None; preds];
    for (g, o) in owner.iter().enumerate() {
        if let Some(p) = *o {
            claim[p] = Some(g);
        }
    }
    claim
}

/// Which claiming rule binds predictions to ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClaimRule {
    Greedy,
    Maximum,
}

/// Per-image recall outcome: which ground-truth triplets were recovered in
/// the top-K predictions, plus per-relation-class tallies.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecall {
    /// Claimed ground-truth triplet indices, ascending.
    pub hit_gt: Vec<usize>,
    pub gt_total: usize,
    /// Relation class -> hits among this image's ground truth.
    pub class_hits: BTreeMap<u32, u64>,
    /// Relation class -> ground-truth triplet count in this image.
    pub class_totals: BTreeMap<u32, u64>,
}

impl ImageRecall {
    /// Fraction of ground-truth triplets recovered; `None` when the image
    /// has no ground-truth relations.
    pub fn recall(&self) -> Option<f64> {
        if self.gt_total == 0 {
            None
        } else {
            Some(self.hit_gt.len() as f64 / self.gt_total as f64)
        }
    }
}

fn recall_from_claims(claims: &[Option<usize>], gts: &[GtEntry]) -> ImageRecall {
    let mut hit_gt: Vec<usize> = claims.iter().flatten().copied().collect();
    hit_gt.sort_unstable();
    let mut class_hits = BTreeMap::new();
    let mut class_totals = BTreeMap::new();
    for g in gts {
        *class_totals.entry(g.rel_class).or_insert(0) += 1;
    }
    for &g in &hit_gt {
        *class_hits.entry(gts[g].rel_class).or_insert(0) += 1;
    }
    ImageRecall {
        hit_gt,
        gt_total: gts.len(),
        class_hits,
        class_totals,
    }
}

fn image_recall(
    predictions: &[TripletPrediction],
    scene: &PanopticScene,
    graph: &SceneGraph,
    objects: &ObjectVocabulary,
    k: usize,
    iou_threshold: f64,
    require_relation: bool,
    rule: ClaimRule,
) -> Result<ImageRecall> {
    if k == 0 {
        return Err(Error::config("K must be positive".to_string()));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::config(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let gts = gt_entries(scene, graph, objects)?;
    let preds = pred_entries(predictions, scene)?;
    let elig = eligibility(&preds, &gts, k, iou_threshold, require_relation);
    let claims = match rule {
        ClaimRule::Greedy => claim_greedy(&elig),
        ClaimRule::Maximum => claim_maximum(&elig),
    };
    Ok(recall_from_claims(&claims, &gts))
}

/// Triplet recall: subject, object, and relation classes must all match and
/// both masks must reach the IoU threshold. Predictions must be ranked.
pub fn recall_at_k(
    predictions: &[TripletPrediction],
    scene: &PanopticScene,
    graph: &SceneGraph,
    objects: &ObjectVocabulary,
    k: usize,
    iou_threshold: f64,
) -> Result<ImageRecall> {
    image_recall(
        predictions,
        scene,
        graph,
        objects,
        k,
        iou_threshold,
        true,
        ClaimRule::Greedy,
    )
}

/// Pair recall: the same procedure with the relation-class equality test
/// removed.
pub fn pair_recall_at_k(
    predictions: &[TripletPrediction],
    scene: &PanopticScene,
    graph: &SceneGraph,
    objects: &ObjectVocabulary,
    k: usize,
    iou_threshold: f64,
) -> Result<ImageRecall> {
    image_recall(
        predictions,
        scene,
        graph,
        objects,
        k,
        iou_threshold,
        false,
        ClaimRule::Greedy,
    )
}

/// Hits and ground-truth size of one thing/stuff partition in one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CategoryTally {
    pub hits: u64,
    pub total: u64,
}

/// Per-image tallies of the four (subject, object) thing/stuff partitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CategoricalTallies {
    pub tt: CategoryTally,
    pub ts: CategoryTally,
    pub st: CategoryTally,
    pub ss: CategoryTally,
}

/// Partitions ground-truth triplets by the thing/stuff identity of subject
/// and object and tallies the full-triplet hits of each partition. Hits are
/// computed once with the ordinary greedy claiming.
pub fn categorical_recall_at_k(
    predictions: &[TripletPrediction],
    scene: &PanopticScene,
    graph: &SceneGraph,
    objects: &ObjectVocabulary,
    k: usize,
    iou_threshold: f64,
) -> Result<CategoricalTallies> {
    let gts = gt_entries(scene, graph, objects)?;
    let outcome = recall_at_k(predictions, scene, graph, objects, k, iou_threshold)?;
    let mut tallies = CategoricalTallies::default();
    for (g, entry) in gts.iter().enumerate() {
        let slot = match (entry.sub_thing, entry.obj_thing) {
            (true, true) => &mut tallies.tt,
            (true, false) => &mut tallies.ts,
            (false, true) => &mut tallies.st,
            (false, false) => &mut tallies.ss,
        };
        slot.total += 1;
        if outcome.hit_gt.binary_search(&g).is_ok() {
            slot.hits += 1;
        }
    }
    Ok(tallies)
}

/// Triplet-level mask quality of the underlying detector: mean IoU of the
/// assigned subject/object query masks against their segments, and the
/// fraction reaching IoU 0.5, averaged over every ground-truth triplet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub subject_iou: f64,
    pub object_iou: f64,
    pub subject_recall_05: f64,
    pub object_recall_05: f64,
}

pub fn detector_metrics(
    query_sets: &[ObjectQuerySet],
    assignments: &[QueryAssignment],
    scenes: &[PanopticScene],
    graphs: &[SceneGraph],
) -> Result<DetectorMetrics> {
    if query_sets.len() != scenes.len()
        || assignments.len() != scenes.len()
        || graphs.len() != scenes.len()
    {
        return Err(Error::shape(
            "detector_metrics",
            format!(
                "{} query sets, {} assignments, {} scenes, {} graphs",
                query_sets.len(),
                assignments.len(),
                scenes.len(),
                graphs.len()
            ),
        ));
    }
    let mut sums = [0.0f64; 2];
    let mut hits = [0u64; 2];
    let mut triplets = 0u64;
    for (((qs, asg), scene), graph) in query_sets
        .iter()
        .zip(assignments)
        .zip(scenes)
        .zip(graphs)
    {
        for t in &graph.triplets {
            for (side, seg) in [(0, t.subject), (1, t.object)] {
                let mask = binarized(qs.mask_of(asg.slot_of(seg)));
                let gt = binarized(scene.mask_of(seg)?.data());
                let iou = bool_iou(&mask, &gt);
                sums[side] += iou;
                hits[side] += (iou >= 0.5) as u64;
            }
            triplets += 1;
        }
    }
    if triplets == 0 {
        return Err(Error::Eval(
            "no ground-truth triplets to average detector quality over".to_string(),
        ));
    }
    let n = triplets as f64;
    Ok(DetectorMetrics {
        subject_iou: sums[0] / n,
        object_iou: sums[1] / n,
        subject_recall_05: hits[0] as f64 / n,
        object_recall_05: hits[1] as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, Default)]
struct PqClass {
    iou_sum: f64,
    tp: u64,
    fp: u64,
    fn_: u64,
}

/// Dataset-level panoptic quality accumulator. Per image, the query set is
/// converted to a panoptic prediction by per-pixel argmax over the soft
/// masks of queries not classified as no-object; predicted and ground-truth
/// segments of the same class match when their IoU exceeds 0.5 (such a
/// match is unique). Matches, misses, and false alarms accumulate per class
/// across images; the final value averages the per-class scores
/// sum(IoU) / (TP + FP/2 + FN/2) over classes that occur at all.
#[derive(Clone, Debug, Default)]
pub struct PqAccumulator {
    per_class: BTreeMap<u32, PqClass>,
}

/// Predicted panoptic segmentation: pixel -> winning query slot (if any),
/// plus each included query's class.
pub struct PanopticPrediction {
    /// Per pixel, the winning included query slot, or `None` when every
    /// query was classified no-object.
    pub winner: Vec<Option<usize>>,
    /// Included query slots with their predicted classes.
    pub segments: Vec<(usize, u32)>,
}

/// Converts a query set into a panoptic prediction. A query is included
/// unless its class-logit argmax is the no-object column; each pixel goes
/// to the included query with the highest soft mask score (earliest slot on
/// ties), and stays unlabeled when no included query reaches 0.5 there.
pub fn panoptic_prediction(queries: &ObjectQuerySet) -> Result<PanopticPrediction> {
    queries.validate()?;
    let n = queries.n_obj();
    let classes = queries.class_logits.shape()[1] - 1;
    let mut segments = Vec::new();
    for slot in 0..n {
        let row: Vec<f64> = (0..=classes)
            .map(|c| queries.class_logits.at2(slot, c))
            .collect();
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best < classes {
            segments.push((slot, best as u32 + 1));
        }
    }
    let hw = queries.soft_masks.shape()[1] * queries.soft_masks.shape()[2];
    let mut winner = vec![None; hw];
    for (slot, _) in &segments {
        let mask = queries.mask_of(*slot);
        for (p, w) in winner.iter_mut().enumerate() {
            let better = match *w {
                None => mask[p] >= 0.5,
                Some(cur) => mask[p] > queries.mask_of(cur)[p],
            };
            if better {
                *w = Some(*slot);
            }
        }
    }
    Ok(PanopticPrediction { winner, segments })
}

impl PqAccumulator {
    pub fn new() -> Self {
        PqAccumulator::default()
    }

    /// Scores one image's prediction against its ground-truth scene.
    pub fn add_image(&mut self, queries: &ObjectQuerySet, scene: &PanopticScene) -> Result<()> {
        let shape = queries.soft_masks.shape();
        if shape[1] != scene.height || shape[2] != scene.width {
            return Err(Error::shape(
                "panoptic_quality",
                format!(
                    "query raster [{}, {}] vs scene [{}, {}]",
                    shape[1], shape[2], scene.height, scene.width
                ),
            ));
        }
        let pred = panoptic_prediction(queries)?;
        // Pixel sets per predicted segment (dropping pixel-less queries) and
        // per ground-truth segment.
        let mut pred_pixels: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (p, w) in pred.winner.iter().enumerate() {
            if let Some(slot) = w {
                pred_pixels.entry(*slot).or_default().push(p);
            }
        }
        let preds: Vec<(u32, &Vec<usize>)> = pred
            .segments
            .iter()
            .filter_map(|(slot, class)| pred_pixels.get(slot).map(|px| (*class, px)))
            .collect();
        let mut gt_pixels: Vec<Vec<usize>> = vec![Vec::new(); scene.segments.len()];
        for (p, &id) in scene.segment_map.iter().enumerate() {
            gt_pixels[(id - 1) as usize].push(p);
        }

        let mut pred_matched = vec![false; preds.len()];
        for (seg, gt_px) in scene.segments.iter().zip(&gt_pixels) {
            let mut matched = false;
            for (i, (class, px)) in preds.iter().enumerate() {
                if *class != seg.class || pred_matched[i] {
                    continue;
                }
                let inter = intersection_size(gt_px, px);
                let union = gt_px.len() + px.len() - inter;
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    let entry = self.per_class.entry(seg.class).or_default();
                    entry.tp += 1;
                    entry.iou_sum += iou;
                    pred_matched[i] = true;
                    matched = true;
                    break;
                }
            }
            if !matched {
                self.per_class.entry(seg.class).or_default().fn_ += 1;
            }
        }
        for (i, (class, _)) in preds.iter().enumerate() {
            if !pred_matched[i] {
                self.per_class.entry(*class).or_default().fp += 1;
            }
        }
        Ok(())
    }

    /// Class-averaged panoptic quality; `None` before any image was added.
    pub fn value(&self) -> Option<f64> {
        let mut total = 0.0;
        let mut classes = 0usize;
        for stats in self.per_class.values() {
            if stats.tp + stats.fp + stats.fn_ == 0 {
                continue;
            }
            total +=
                stats.iou_sum / (stats.tp as f64 + 0.5 * stats.fp as f64 + 0.5 * stats.fn_ as f64);
            classes += 1;
        }
        if classes == 0 {
            None
        } else {
            Some(total / classes as f64)
        }
    }
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    // Both lists are ascending pixel indices.
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Single-image panoptic quality.
pub fn panoptic_quality(queries: &ObjectQuerySet, scene: &PanopticScene) -> Result<f64> {
    let mut acc = PqAccumulator::new();
    acc.add_image(queries, scene)?;
    acc.value()
        .ok_or_else(|| Error::Eval("no segments to score".to_string()))
}

/// Per-partition recall values; a partition with no ground truth anywhere in
/// the dataset is reported absent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoricalRecall {
    pub tt: Option<f64>,
    pub ts: Option<f64>,
    pub st: Option<f64>,
    pub ss: Option<f64>,
}

/// Full evaluation report. Dataset recall is the unweighted mean of
/// per-image recalls over images that have ground-truth relations; mean
/// recall averages dataset-level per-class recall over relation classes
/// present in the ground truth. Detector quality and panoptic quality are
/// attached when the underlying query sets are available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_count: usize,
    /// Images with at least one ground-truth relation (the recall
    /// denominator population).
    pub relation_image_count: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub mean_recall_at_k: BTreeMap<usize, f64>,
    pub per_class_recall_at_k: BTreeMap<usize, BTreeMap<u32, f64>>,
    pub pair_recall_at_k: BTreeMap<usize, f64>,
    pub categorical_recall_at_k: BTreeMap<usize, CategoricalRecall>,
    /// Maximum-bipartite claiming variants of the same quantities.
    pub optimal_recall_at_k: Option<BTreeMap<usize, f64>>,
    pub optimal_pair_recall_at_k: Option<BTreeMap<usize, f64>>,
    pub detector: Option<DetectorMetrics>,
    pub panoptic_quality: Option<f64>,
}

/// Everything the ranked-recall metrics need for one dataset split.
pub struct DatasetEvalInputs<'a> {
    /// Ranked predictions, one list per image, aligned with `scenes`.
    pub predictions: &'a [Vec<TripletPrediction>],
    pub scenes: &'a [PanopticScene],
    pub graphs: &'a [SceneGraph],
    pub objects: &'a ObjectVocabulary,
}

/// Computes every ranked-recall metric of the report. `ks` must be positive
/// and strictly ascending. Detector and panoptic quality fields start
/// `None`; callers with query sets fill them in.
pub fn compute_metrics(
    inputs: &DatasetEvalInputs,
    ks: &[usize],
    iou_threshold: f64,
    include_optimal: bool,
) -> Result<MetricsReport> {
    if inputs.predictions.len() != inputs.scenes.len()
        || inputs.graphs.len() != inputs.scenes.len()
    {
        return Err(Error::shape(
            "compute_metrics",
            format!(
                "{} prediction lists, {} scenes, {} graphs",
                inputs.predictions.len(),
                inputs.scenes.len(),
                inputs.graphs.len()
            ),
        ));
    }
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::config(format!(
            "K values must be positive and strictly ascending, got {ks:?}"
        )));
    }

    let mut recalls: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut pair_recalls: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut opt_recalls: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut opt_pair_recalls: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut class_hits: BTreeMap<usize, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut class_totals: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cat_recalls: BTreeMap<usize, [Vec<f64>; 4]> = BTreeMap::new();
    let mut relation_image_count = 0usize;

    for ((preds, scene), graph) in inputs
        .predictions
        .iter()
        .zip(inputs.scenes)
        .zip(inputs.graphs)
    {
        if graph.triplets.is_empty() {
            continue;
        }
        relation_image_count += 1;
        for (c, n) in gt_entries(scene, graph, inputs.objects)?
            .iter()
            .fold(BTreeMap::new(), |mut acc: BTreeMap<u32, u64>, g| {
                *acc.entry(g.rel_class).or_insert(0) += 1;
                acc
            })
        {
            *class_totals.entry(c).or_insert(0) += n;
        }
        for &k in ks {
            let full = recall_at_k(preds, scene, graph, inputs.objects, k, iou_threshold)?;
            let pair = pair_recall_at_k(preds, scene, graph, inputs.objects, k, iou_threshold)?;
            recalls.entry(k).or_default().push(full.recall().unwrap());
            pair_recalls
                .entry(k)
                .or_default()
                .push(pair.recall().unwrap());
            let hits = class_hits.entry(k).or_default();
            for (c, n) in &full.class_hits {
                *hits.entry(*c).or_insert(0) += n;
            }
            let cats =
                categorical_recall_at_k(preds, scene, graph, inputs.objects, k, iou_threshold)?;
            let lists = cat_recalls.entry(k).or_default();
            for (i, t) in [cats.tt, cats.ts, cats.st, cats.ss].iter().enumerate() {
                if t.total > 0 {
                    lists[i].push(t.hits as f64 / t.total as f64);
                }
            }
            if include_optimal {
                let of = image_recall(
                    preds,
                    scene,
                    graph,
                    inputs.objects,
                    k,
                    iou_threshold,
                    true,
                    ClaimRule::Maximum,
                )?;
                let op = image_recall(
                    preds,
                    scene,
                    graph,
                    inputs.objects,
                    k,
                    iou_threshold,
                    false,
                    ClaimRule::Maximum,
                )?;
                opt_recalls.entry(k).or_default().push(of.recall().unwrap());
                opt_pair_recalls
                    .entry(k)
                    .or_default()
                    .push(op.recall().unwrap());
            }
        }
    }
    if relation_image_count == 0 {
        return Err(Error::Eval(
            "no image has ground-truth relations; recall is undefined".to_string(),
        ));
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut report = MetricsReport {
        image_count: inputs.scenes.len(),
        relation_image_count,
        recall_at_k: recalls.iter().map(|(k, v)| (*k, mean(v))).collect(),
        mean_recall_at_k: BTreeMap::new(),
        per_class_recall_at_k: BTreeMap::new(),
        pair_recall_at_k: pair_recalls.iter().map(|(k, v)| (*k, mean(v))).collect(),
        categorical_recall_at_k: cat_recalls
            .iter()
            .map(|(k, lists)| {
                let val = |xs: &Vec<f64>| if xs.is_empty() { None } else { Some(mean(xs)) };
                (
                    *k,
                    CategoricalRecall {
                        tt: val(&lists[0]),
                        ts: val(&lists[1]),
                        st: val(&lists[2]),
                        ss: val(&lists[3]),
                    },
                )
            })
            .collect(),
        optimal_recall_at_k: include_optimal
            .then(|| opt_recalls.iter().map(|(k, v)| (*k, mean(v))).collect()),
        optimal_pair_recall_at_k: include_optimal
            .then(|| opt_pair_recalls.iter().map(|(k, v)| (*k, mean(v))).collect()),
        detector: None,
        panoptic_quality: None,
    };
    for &k in ks {
        let hits = class_hits.entry(k).or_default();
        let per_class: BTreeMap<u32, f64> = class_totals
            .iter()
            .map(|(c, total)| {
                (
                    *c,
                    hits.get(c).copied().unwrap_or(0) as f64 / *total as f64,
                )
            })
            .collect();
        let mr = per_class.values().sum::<f64>() / per_class.len() as f64;
        report.per_class_recall_at_k.insert(k, per_class);
        report.mean_recall_at_k.insert(k, mr);
    }
    Ok(report)
}
