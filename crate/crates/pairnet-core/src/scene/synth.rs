//! Synthetic dataset generation.
//!
//! Scenes are random rectangular tilings (recursive binary splits of the
//! raster), so every pixel is labeled and segments are axis-aligned blocks.
//! Relations are drawn from a power-law over relation classes, but which
//! relation a segment pair can carry is fixed by a hidden, seed-derived
//! affinity table over ordered class pairs. The table makes the task
//! learnable: relation identity is a deterministic function of the class
//! pair, and relation presence correlates with it.

use super::{
    Dataset, ObjectVocabulary, PanopticScene, RelationVocabulary, SceneGraph, Segment, Triplet,
};
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Generator settings. The defaults are the standard desk-scale dataset:
/// 500 train / 50 val scenes of 24x24 pixels, 8 object classes with the last
/// 3 as stuff, 6 relation classes, about 5.6 relations per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub object_classes: usize,
    /// The last `stuff_classes` object classes are stuff; the rest things.
    pub stuff_classes: usize,
    pub relation_classes: usize,
    pub mean_relations: f64,
    pub max_relations: usize,
    /// Power-law exponent over relation classes; 0 = uniform.
    pub skew: f64,
    pub segments_min: usize,
    pub segments_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_scenes: 500,
            val_scenes: 50,
            height: 24,
            width: 24,
            object_classes: 8,
            stuff_classes: 3,
            relation_classes: 6,
            mean_relations: 5.6,
            max_relations: 20,
            skew: 1.2,
            segments_min: 4,
            segments_max: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.object_classes < 2 || self.relation_classes < 2 {
            return bad(format!(
                "need at least 2 object and 2 relation classes, got {} and {}",
                self.object_classes, self.relation_classes
            ));
        }
        if self.stuff_classes > self.object_classes {
            return bad(format!(
                "{} stuff classes exceed {} object classes",
                self.stuff_classes, self.object_classes
            ));
        }
        if !(self.mean_relations.is_finite() && self.mean_relations > 0.0) {
            return bad(format!(
                "mean relations must be positive, got {}",
                self.mean_relations
            ));
        }
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return bad(format!("skew must be finite and >= 0, got {}", self.skew));
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty raster {}x{}", self.height, self.width));
        }
        if self.segments_min < 2 || self.segments_min > self.segments_max {
            return bad(format!(
                "segment count range [{}, {}] invalid (need 2 <= min <= max)",
                self.segments_min, self.segments_max
            ));
        }
        if self.segments_max > self.height * self.width {
            return bad(format!(
                "{} segments cannot tile a {}x{} raster",
                self.segments_max, self.height, self.width
            ));
        }
        Ok(())
    }
}

/// Hidden mapping from ordered (subject-class, object-class) pairs to the
/// single relation class that pair can carry. Built by shuffling all class
/// pairs and dealing them round-robin across relations, so every relation
/// owns an equal (within one) share of class pairs.
#[derive(Debug, Clone)]
pub struct AffinityTable {
    classes: usize,
    table: Vec<u32>,
}

impl AffinityTable {
    pub fn build(object_classes: usize, relation_classes: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[hash_str("affinity")]);
        let cells = object_classes * object_classes;
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut rng);
        let mut table = vec![0u32; cells];
        for (pos, &cell) in order.iter().enumerate() {
            table[cell] = (pos % relation_classes) as u32 + 1;
        }
        Self {
            classes: object_classes,
            table,
        }
    }

    /// Relation class for an ordered pair of 1-based object classes.
    pub fn relation_for(&self, subject_class: u32, object_class: u32) -> u32 {
        self.table[(subject_class as usize - 1) * self.classes + (object_class as usize - 1)]
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

/// Splits the raster into exactly `target` rectangles (fewer only if the
/// raster runs out of splittable cells, which validation prevents). Picks a
/// splittable rectangle with probability proportional to its area and cuts
/// the longer side more often, giving roughly balanced tiles.
fn bsp_tiling(height: usize, width: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    let mut rects = vec![Rect {
        y0: 0,
        x0: 0,
        h: height,
        w: width,
    }];
    while rects.len() < target {
        let splittable: Vec<usize> = (0..rects.len())
            .filter(|&i| rects[i].h >= 2 || rects[i].w >= 2)
            .collect();
        if splittable.is_empty() {
            break;
        }
        let total: usize = splittable.iter().map(|&i| rects[i].h * rects[i].w).sum();
        let mut ticket = rng.gen_range(0..total);
        let mut pick = splittable[splittable.len() - 1];
        for &i in &splittable {
            let area = rects[i].h * rects[i].w;
            if ticket < area {
                pick = i;
                break;
            }
            ticket -= area;
        }
        let r = rects[pick];
        let horizontal = if r.h >= 2 && r.w >= 2 {
            rng.gen_range(0..r.h + r.w) < r.h
        } else {
            r.h >= 2
        };
        let (a, b) = if horizontal {
            let cut = rng.gen_range(1..r.h);
            (
                Rect { h: cut, ..r },
                Rect {
                    y0: r.y0 + cut,
                    h: r.h - cut,
                    ..r
                },
            )
        } else {
            let cut = rng.gen_range(1..r.w);
            (
                Rect { w: cut, ..r },
                Rect {
                    x0: r.x0 + cut,
                    w: r.w - cut,
                    ..r
                },
            )
        };
        rects[pick] = a;
        rects.push(b);
    }
    // Reading order makes segment ids spatially coherent and deterministic.
    rects.sort_by_key(|r| (r.y0, r.x0));
    rects
}

/// Draws an index from unnormalized weights.
fn sample_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn synthesize_scene(
    cfg: &SynthConfig,
    table: &AffinityTable,
    image_id: String,
    rng: &mut ChaCha8Rng,
) -> (PanopticScene, SceneGraph) {
    let target = rng.gen_range(cfg.segments_min..=cfg.segments_max);
    let rects = bsp_tiling(cfg.height, cfg.width, target, rng);
    let segments: Vec<Segment> = rects
        .iter()
        .enumerate()
        .map(|(i, _)| Segment {
            id: i as u32 + 1,
            class: rng.gen_range(1..=cfg.object_classes as u32),
        })
        .collect();
    let mut segment_map = vec![0u32; cfg.height * cfg.width];
    for (i, r) in rects.iter().enumerate() {
        for y in r.y0..r.y0 + r.h {
            let row = y * cfg.width;
            for x in r.x0..r.x0 + r.w {
                segment_map[row + x] = i as u32 + 1;
            }
        }
    }
    let scene = PanopticScene {
        image_id,
        height: cfg.height,
        width: cfg.width,
        segment_map,
        segments,
    };

    // Ordered segment pairs; each carries exactly one possible relation via
    // the affinity table, so "pair used" and "triplet used" coincide.
    let n = scene.segments.len() as u32;
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity((n * (n - 1)) as usize);
    for i in 1..=n {
        for j in 1..=n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let cap = cfg.max_relations.min(pairs.len());
    let poisson = Poisson::new(cfg.mean_relations).expect("validated mean");
    let drawn: f64 = poisson.sample(rng);
    let count = (drawn as usize).min(cap);

    let weights: Vec<f64> = (1..=cfg.relation_classes)
        .map(|r| (r as f64).powf(-cfg.skew))
        .collect();
    let class_of = |id: u32| scene.segments[(id - 1) as usize].class;
    let mut used = vec![false; pairs.len()];
    let mut triplets = Vec::with_capacity(count);
    'next_triplet: for _ in 0..count {
        for _attempt in 0..50 {
            let r = sample_weighted(&weights, rng) as u32 + 1;
            let eligible: Vec<usize> = (0..pairs.len())
                .filter(|&p| {
                    !used[p] && table.relation_for(class_of(pairs[p].0), class_of(pairs[p].1)) == r
                })
                .collect();
            if !eligible.is_empty() {
                let p = eligible[rng.gen_range(0..eligible.len())];
                used[p] = true;
                triplets.push(Triplet {
                    subject: pairs[p].0,
                    relation: r,
                    object: pairs[p].1,
                });
                continue 'next_triplet;
            }
        }
        // The sampled relations have no unused class pair in this scene;
        // fall back to any unused pair and read its relation off the table.
        let unused: Vec<usize> = (0..pairs.len()).filter(|&p| !used[p]).collect();
        if unused.is_empty() {
            break;
        }
        let p = unused[rng.gen_range(0..unused.len())];
        used[p] = true;
        triplets.push(Triplet {
            subject: pairs[p].0,
            relation: table.relation_for(class_of(pairs[p].0), class_of(pairs[p].1)),
            object: pairs[p].1,
        });
    }
    (scene, SceneGraph { triplets })
}

/// Both splits of a generated dataset.
#[derive(Debug)]
pub struct SynthOutput {
    pub train: Dataset,
    pub val: Dataset,
}

/// Generates the train and validation splits. Deterministic: every scene
/// draws from its own stream derived from (seed, split, index), and the
/// affinity table from (seed) alone, so both splits share one hidden task.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let table = AffinityTable::build(cfg.object_classes, cfg.relation_classes, cfg.seed);
    let names: Vec<String> = (1..=cfg.object_classes)
        .map(|c| {
            if c > cfg.object_classes - cfg.stuff_classes {
                format!("stuff-{c}")
            } else {
                format!("thing-{c}")
            }
        })
        .collect();
    let thing_flags: Vec<bool> = (1..=cfg.object_classes)
        .map(|c| c <= cfg.object_classes - cfg.stuff_classes)
        .collect();
    let objects = ObjectVocabulary::new(names, thing_flags)?;
    let relations = RelationVocabulary::new(
        (1..=cfg.relation_classes)
            .map(|r| format!("rel-{r}"))
            .collect(),
    )?;

    // Scenes are independent — each derives its own generator stream from
    // the split name and index — so generation fans out per image and the
    // ordered collect keeps the output identical to a sequential loop.
    let make_split = |split: &str, count: usize| -> Result<Dataset> {
        let indices: Vec<usize> = (0..count).collect();
        let pairs = crate::par::try_map_ordered(&indices, |&i| {
            let image_id = format!("{split}-{i:04}");
            let mut rng = stream(cfg.seed, &[hash_str(split), i as u64]);
            let (scene, graph) = synthesize_scene(cfg, &table, image_id, &mut rng);
            scene.validate(cfg.object_classes)?;
            graph.validate(&scene, cfg.relation_classes)?;
            Ok((scene, graph))
        })?;
        let mut scenes = Vec::with_capacity(count);
        let mut graphs = Vec::with_capacity(count);
        for (scene, graph) in pairs {
            scenes.push(scene);
            graphs.push(graph);
        }
        Ok(Dataset {
            objects: objects.clone(),
            relations: relations.clone(),
            scenes,
            graphs,
        })
    };
    let mut train = make_split("train", cfg.train_scenes)?;
    let val_raw = make_split("val", cfg.val_scenes)?;
    train.relations.tally(&train.graphs);
    let mut val = val_raw;
    val.relations = train.relations.clone();
    Ok(SynthOutput { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            train_scenes: 40,
            val_scenes: 8,
            height: 8,
            width: 8,
            segments_min: 4,
            segments_max: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn equal_seeds_give_byte_identical_datasets() {
        let cfg = small_cfg();
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let bytes_a = serde_json::to_vec(&a.train.scenes).unwrap();
        let bytes_b = serde_json::to_vec(&b.train.scenes).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn different_seeds_change_the_relation_histogram() {
        let cfg = small_cfg();
        let other = SynthConfig {
            seed: 99,
            ..small_cfg()
        };
        let mut a = synthesize(&cfg).unwrap();
        let mut b = synthesize(&other).unwrap();
        a.train.relations.tally(&a.train.graphs);
        b.train.relations.tally(&b.train.graphs);
        assert_ne!(a.train.relations.train_counts, b.train.relations.train_counts);
    }

    #[test]
    fn zero_skew_relation_histogram_is_uniform_within_multinomial_bounds() {
        let cfg = SynthConfig {
            train_scenes: 400,
            skew: 0.0,
            seed: 11,
            ..small_cfg()
        };
        let out = synthesize(&cfg).unwrap();
        let mut counts = vec![0f64; cfg.relation_classes];
        let mut total = 0f64;
        for g in &out.train.graphs {
            for t in &g.triplets {
                counts[(t.relation - 1) as usize] += 1.0;
                total += 1.0;
            }
        }
        let p = 1.0 / cfg.relation_classes as f64;
        let sigma = (total * p * (1.0 - p)).sqrt();
        for (r, &c) in counts.iter().enumerate() {
            assert!(
                (c - total * p).abs() <= 3.0 * sigma,
                "class {}: count {c} vs expected {} (3 sigma = {})",
                r + 1,
                total * p,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn positive_skew_orders_the_histogram_head_heavy() {
        let cfg = SynthConfig {
            train_scenes: 400,
            skew: 1.2,
            seed: 3,
            ..small_cfg()
        };
        let out = synthesize(&cfg).unwrap();
        let mut counts = vec![0u64; cfg.relation_classes];
        for g in &out.train.graphs {
            for t in &g.triplets {
                counts[(t.relation - 1) as usize] += 1;
            }
        }
        assert!(
            counts[0] > 2 * counts[cfg.relation_classes - 1],
            "head class {} not dominant over tail {}",
            counts[0],
            counts[cfg.relation_classes - 1]
        );
    }

    #[test]
    fn sample_mean_triplets_per_scene_tracks_the_configured_mean() {
        let cfg = SynthConfig {
            train_scenes: 500,
            val_scenes: 0,
            seed: 5,
            ..SynthConfig::default()
        };
        let out = synthesize(&cfg).unwrap();
        let total: usize = out.train.graphs.iter().map(|g| g.triplets.len()).sum();
        let mean = total as f64 / cfg.train_scenes as f64;
        assert!(
            (5.0..=6.2).contains(&mean),
            "sample mean {mean} outside [5.0, 6.2]"
        );
    }

    #[test]
    fn every_triplet_follows_the_hidden_affinity_table() {
        let cfg = small_cfg();
        let table = AffinityTable::build(cfg.object_classes, cfg.relation_classes, cfg.seed);
        let out = synthesize(&cfg).unwrap();
        for (scene, graph) in out.train.scenes.iter().zip(&out.train.graphs) {
            for t in &graph.triplets {
                let sub_class = scene.class_of(t.subject).unwrap();
                let obj_class = scene.class_of(t.object).unwrap();
                assert_eq!(t.relation, table.relation_for(sub_class, obj_class));
            }
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = SynthConfig {
            height: 2,
            width: 2,
            segments_min: 5,
            segments_max: 9,
            ..SynthConfig::default()
        };
        assert!(synthesize(&cfg).is_err());
        let cfg = SynthConfig {
            mean_relations: 0.0,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            stuff_classes: 9,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stuff_classes_are_the_last_ones() {
        let out = synthesize(&small_cfg()).unwrap();
        let flags = &out.train.objects.thing_flags;
        assert_eq!(flags, &[true, true, true, true, true, false, false, false]);
        assert!(out.train.objects.names[7].starts_with("stuff"));
        assert!(out.train.objects.names[0].starts_with("thing"));
    }
}
