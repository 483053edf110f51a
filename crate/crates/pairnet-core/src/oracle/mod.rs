//! Oracle segmenter: turns ground-truth scenes into object queries, class
//! logits, and soft masks, standing in for a trained panoptic segmenter.
//!
//! Each scene's segments are embedded (class embedding + per-segment
//! instance offset), scattered into a seeded random permutation of the
//! query slots, and corrupted by three independent, configurable noise
//! sources: Gaussian embedding noise, class flips, and boundary-pixel mask
//! perturbation. Unused slots carry "no object" logits, zero masks, and
//! noise-only embeddings. Supervision recovers the segment-to-slot map via
//! minimum-cost assignment, never from generation internals.

pub mod precomputed;

use crate::error::{Error, Result};
use crate::hungarian::min_cost_assignment;
use crate::nn::Tensor;
use crate::rng::{hash_str, stream};
use crate::scene::PanopticScene;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Logit magnitude for the oracle's class head: the believed class gets
/// +MAG, every other class -MAG.
const LOGIT_MAGNITUDE: f64 = 6.0;

/// Clamp for mask probabilities inside binary cross-entropy costs.
const MASK_PROB_FLOOR: f64 = 1e-7;

/// Noise knobs for the oracle segmenter. All-zero settings reproduce the
/// ground truth exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Standard deviation of Gaussian noise added to every query embedding.
    pub embedding_noise: f64,
    /// Probability that a segment's believed class is replaced by a uniform
    /// different class (affects both its embedding and its logits).
    pub class_flip_prob: f64,
    /// Probability that each mask boundary pixel (inner or outer) toggles.
    pub mask_perturb_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            embedding_noise: 0.1,
            class_flip_prob: 0.0,
            mask_perturb_rate: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.embedding_noise.is_finite() && self.embedding_noise >= 0.0) {
            return Err(Error::config(format!(
                "embedding noise must be >= 0, got {}",
                self.embedding_noise
            )));
        }
        for (name, p) in [
            ("class flip probability", self.class_flip_prob),
            ("mask perturbation rate", self.mask_perturb_rate),
        ] {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// The noiseless oracle: exact classes, exact masks, zero noise.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            embedding_noise: 0.0,
            class_flip_prob: 0.0,
            mask_perturb_rate: 0.0,
            seed,
        }
    }
}

/// Seed-derived embedding vectors: one row per object class (row 0, the
/// reserved "no object" row, is zero) plus one instance offset per query
/// slot, which separates same-class segments within a scene.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub class_embeddings: Tensor,
    pub instance_offsets: Tensor,
}

impl EmbeddingTable {
    pub fn new(object_classes: usize, n_obj: usize, d: usize, seed: u64) -> Result<Self> {
        if object_classes == 0 || n_obj == 0 || d == 0 {
            return Err(Error::config(format!(
                "embedding table needs positive extents, got {object_classes} classes, \
                 {n_obj} queries, width {d}"
            )));
        }
        let mut rng = stream(seed, &[hash_str("embedding")]);
        let scale = 1.0 / (d as f64).sqrt();
        let mut class_embeddings = Tensor::normal(&[object_classes + 1, d], scale, &mut rng);
        class_embeddings.data_mut()[..d].fill(0.0);
        let instance_offsets = Tensor::normal(&[n_obj, d], 0.5 * scale, &mut rng);
        Ok(Self {
            class_embeddings,
            instance_offsets,
        })
    }

    pub fn n_obj(&self) -> usize {
        self.instance_offsets.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.instance_offsets.shape()[1]
    }

    pub fn object_classes(&self) -> usize {
        self.class_embeddings.shape()[0] - 1
    }
}

/// The oracle's output for one scene.
#[derive(Debug, Clone)]
pub struct ObjectQuerySet {
    /// N_obj x d query embeddings.
    pub queries: Tensor,
    /// N_obj x (x + 1) class logits; column `c - 1` scores class `c`, the
    /// last column scores "no object".
    pub class_logits: Tensor,
    /// N_obj x H x W mask scores in [0, 1].
    pub soft_masks: Tensor,
}

impl ObjectQuerySet {
    pub fn validate(&self) -> Result<()> {
        let q = self.queries.shape();
        let l = self.class_logits.shape();
        let m = self.soft_masks.shape();
        if q.len() != 2 || l.len() != 2 || m.len() != 3 || q[0] != l[0] || q[0] != m[0] {
            return Err(Error::shape(
                "object query set",
                format!("queries {q:?}, logits {l:?}, masks {m:?}"),
            ));
        }
        if self.soft_masks.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::shape(
                "object query set",
                "mask scores must lie in [0, 1]".to_string(),
            ));
        }
        Ok(())
    }

    pub fn n_obj(&self) -> usize {
        self.queries.shape()[0]
    }

    /// One query's soft mask as a flat pixel slice.
    pub fn mask_of(&self, slot: usize) -> &[f64] {
        let hw = self.soft_masks.shape()[1] * self.soft_masks.shape()[2];
        &self.soft_masks.data()[slot * hw..(slot + 1) * hw]
    }
}

/// Query set plus the generating segment-to-slot map. The map is a
/// diagnostic for tests; training recovers it with [`assign_queries`].
#[derive(Debug, Clone)]
pub struct OracleOutput {
    pub query_set: ObjectQuerySet,
    /// `gt_slots[i]` is the slot of segment id `i + 1`.
    pub gt_slots: Vec<usize>,
}

/// Pixels whose 4-neighborhood crosses the mask border, on either side.
fn boundary_pixels(scene: &PanopticScene, id: u32) -> Vec<usize> {
    let (h, w) = (scene.height, scene.width);
    let inside = |y: usize, x: usize| scene.segment_map[y * w + x] == id;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let here = inside(y, x);
            let crosses = (y > 0 && inside(y - 1, x) != here)
                || (y + 1 < h && inside(y + 1, x) != here)
                || (x > 0 && inside(y, x - 1) != here)
                || (x + 1 < w && inside(y, x + 1) != here);
            if crosses {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Generates the oracle query set for one scene. Fails if the scene has
/// more segments than query slots.
pub fn oracle_queries(
    scene: &PanopticScene,
    table: &EmbeddingTable,
    cfg: &OracleConfig,
) -> Result<OracleOutput> {
    cfg.validate()?;
    let (n_obj, d) = (table.n_obj(), table.width());
    let classes = table.object_classes();
    let n = scene.segments.len();
    if n > n_obj {
        return Err(Error::scene(
            &scene.image_id,
            format!("{n} segments exceed {n_obj} object queries"),
        ));
    }
    let mut rng = stream(cfg.seed, &[hash_str("oracle"), hash_str(&scene.image_id)]);

    // Slot permutation: segment i lands in slots[i].
    let mut slots: Vec<usize> = (0..n_obj).collect();
    slots.shuffle(&mut rng);
    let gt_slots: Vec<usize> = slots[..n].to_vec();

    // Believed classes, possibly flipped to a uniform different class.
    let believed: Vec<u32> = scene
        .segments
        .iter()
        .map(|s| {
            if rng.gen::<f64>() < cfg.class_flip_prob {
                let step = rng.gen_range(1..classes as u32);
                (s.class - 1 + step) % classes as u32 + 1
            } else {
                s.class
            }
        })
        .collect();

    // Embeddings: noise everywhere, plus class + instance signal on slots
    // that carry a segment.
    let mut queries = Tensor::normal(&[n_obj, d], cfg.embedding_noise, &mut rng);
    {
        let qd = queries.data_mut();
        let ce = table.class_embeddings.data();
        let io = table.instance_offsets.data();
        for (i, &slot) in gt_slots.iter().enumerate() {
            let class_row = &ce[believed[i] as usize * d..(believed[i] as usize + 1) * d];
            let offset_row = &io[i * d..(i + 1) * d];
            for k in 0..d {
                qd[slot * d + k] += class_row[k] + offset_row[k];
            }
        }
    }

    // Logits: +MAG on the believed class column (or the trailing "no
    // object" column for empty slots), -MAG elsewhere.
    let mut class_logits = Tensor::filled(&[n_obj, classes + 1], -LOGIT_MAGNITUDE);
    {
        let ld = class_logits.data_mut();
        for slot in 0..n_obj {
            ld[slot * (classes + 1) + classes] = LOGIT_MAGNITUDE;
        }
        for (i, &slot) in gt_slots.iter().enumerate() {
            ld[slot * (classes + 1) + classes] = -LOGIT_MAGNITUDE;
            ld[slot * (classes + 1) + (believed[i] as usize - 1)] = LOGIT_MAGNITUDE;
        }
    }

    // Masks: the ground-truth mask with each boundary pixel independently
    // toggled at the configured rate. One uniform draw per boundary pixel
    // regardless of rate, so higher rates strictly grow the flipped set.
    let (h, w) = (scene.height, scene.width);
    let mut soft_masks = Tensor::zeros(&[n_obj, h, w]);
    {
        let md = soft_masks.data_mut();
        for (i, &slot) in gt_slots.iter().enumerate() {
            let id = i as u32 + 1;
            let base = slot * h * w;
            for (p, &v) in scene.segment_map.iter().enumerate() {
                md[base + p] = if v == id { 1.0 } else { 0.0 };
            }
            for p in boundary_pixels(scene, id) {
                if rng.gen::<f64>() < cfg.mask_perturb_rate {
                    md[base + p] = 1.0 - md[base + p];
                }
            }
        }
    }

    let query_set = ObjectQuerySet {
        queries,
        class_logits,
        soft_masks,
    };
    query_set.validate()?;
    Ok(OracleOutput {
        query_set,
        gt_slots,
    })
}

/// Minimum-cost map from ground-truth segments to query slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryAssignment {
    /// `slot_of_segment[i]` is the query slot of segment id `i + 1`.
    pub slot_of_segment: Vec<usize>,
    /// Slots without a segment, ascending.
    pub unmatched_slots: Vec<usize>,
}

impl QueryAssignment {
    pub fn slot_of(&self, segment_id: u32) -> usize {
        self.slot_of_segment[(segment_id - 1) as usize]
    }
}

/// Per-(segment, slot) matching cost: class cross-entropy plus mask binary
/// cross-entropy plus Dice loss, all unit-weighted. Public so the optimality
/// of [`assign_queries`] can be audited against exhaustive enumeration.
pub fn matching_cost(scene: &PanopticScene, qs: &ObjectQuerySet) -> Result<Tensor> {
    let n = scene.segments.len();
    let n_obj = qs.n_obj();
    let cols = qs.class_logits.shape()[1];
    let hw = scene.height * scene.width;
    let mut costs = vec![0.0; n * n_obj];
    for (i, seg) in scene.segments.iter().enumerate() {
        let gt: Vec<f64> = scene
            .segment_map
            .iter()
            .map(|&v| if v == seg.id { 1.0 } else { 0.0 })
            .collect();
        let gt_area: f64 = gt.iter().sum();
        let target_col = (seg.class - 1) as usize;
        for slot in 0..n_obj {
            let logits = &qs.class_logits.data()[slot * cols..(slot + 1) * cols];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            let ce = lse - logits[target_col];

            let mask = qs.mask_of(slot);
            let mut bce = 0.0;
            let mut inter = 0.0;
            let mut area = 0.0;
            for (p, &y) in gt.iter().enumerate() {
                let m = mask[p].clamp(MASK_PROB_FLOOR, 1.0 - MASK_PROB_FLOOR);
                bce -= y * m.ln() + (1.0 - y) * (1.0 - m).ln();
                inter += mask[p] * y;
                area += mask[p];
            }
            bce /= hw as f64;
            let dice = 1.0 - 2.0 * inter / (area + gt_area);
            costs[i * n_obj + slot] = ce + bce + dice;
        }
    }
    Tensor::new(vec![n, n_obj], costs)
}

/// Optimally assigns every segment to a distinct query slot by Hungarian
/// matching over classification + mask costs.
pub fn assign_queries(scene: &PanopticScene, qs: &ObjectQuerySet) -> Result<QueryAssignment> {
    qs.validate()?;
    let m = qs.soft_masks.shape();
    if m[1] != scene.height || m[2] != scene.width {
        return Err(Error::shape(
            "assign_queries",
            format!(
                "mask raster {}x{} vs scene {}x{}",
                m[1], m[2], scene.height, scene.width
            ),
        ));
    }
    let costs = matching_cost(scene, qs)?;
    let (slot_of_segment, _) = min_cost_assignment(&costs)?;
    let mut taken = vec![false; qs.n_obj()];
    for &s in &slot_of_segment {
        taken[s] = true;
    }
    let unmatched_slots = (0..qs.n_obj()).filter(|&s| !taken[s]).collect();
    Ok(QueryAssignment {
        slot_of_segment,
        unmatched_slots,
    })
}

/// Mean IoU between assigned query masks (thresholded at 0.5) and their
/// ground-truth segment masks, averaged over triplet subject slots.
pub fn mean_subject_iou(
    scenes: &[PanopticScene],
    graphs: &[crate::scene::SceneGraph],
    table: &EmbeddingTable,
    cfg: &OracleConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (scene, graph) in scenes.iter().zip(graphs) {
        let out = oracle_queries(scene, table, cfg)?;
        for t in &graph.triplets {
            let slot = out.gt_slots[(t.subject - 1) as usize];
            let mask = out.query_set.mask_of(slot);
            let gt = scene.mask_of(t.subject)?;
            let mut inter = 0usize;
            let mut union = 0usize;
            for (p, &g) in gt.data().iter().enumerate() {
                let pred = mask[p] >= 0.5;
                let is_gt = g >= 0.5;
                inter += (pred && is_gt) as usize;
                union += (pred || is_gt) as usize;
            }
            total += inter as f64 / union as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Eval("no triplets to average IoU over".to_string()));
    }
    Ok(total / count as f64)
}

/// Binary-searches the mask perturbation rate until the mean subject IoU on
/// the given batch hits the target. IoU decreases monotonically in the rate,
/// so bisection converges; 40 halvings pin the rate to ~1e-12.
pub fn calibrate_mask_perturbation(
    scenes: &[PanopticScene],
    graphs: &[crate::scene::SceneGraph],
    table: &EmbeddingTable,
    base: &OracleConfig,
    target_iou: f64,
) -> Result<f64> {
    if !(0.0 < target_iou && target_iou <= 1.0) {
        return Err(Error::config(format!(
            "target IoU must be in (0, 1], got {target_iou}"
        )));
    }
    let at = |rate: f64| -> Result<f64> {
        let cfg = OracleConfig {
            mask_perturb_rate: rate,
            ..*base
        };
        mean_subject_iou(scenes, graphs, table, &cfg)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? > target_iou {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
