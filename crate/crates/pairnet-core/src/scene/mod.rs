//! Panoptic scenes, scene graphs, vocabularies, and the synthetic dataset
//! generator.
//!
//! A scene is a dense per-pixel segment-id map plus a segment table; a scene
//! graph is a list of (subject, relation, object) triplets over segment ids.
//! Class indices are 1-based everywhere in this module; 0 is reserved
//! (unlabeled pixels in maps, "no relation" in logit space).

pub mod io;
pub mod synth;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use serde::{Deserialize, Serialize};

/// One panoptic segment: a 1-based id unique within its scene and a 1-based
/// object class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub class: u32,
}

/// A fully-labeled scene: every pixel carries the id of exactly one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticScene {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major segment ids, one per pixel.
    pub segment_map: Vec<u32>,
    /// Sorted by id; ids are contiguous from 1.
    pub segments: Vec<Segment>,
}

impl PanopticScene {
    /// Checks the structural invariants: map extent, contiguous ids from 1,
    /// one table entry per id, classes within the vocabulary, and full pixel
    /// coverage with every segment owning at least one pixel.
    pub fn validate(&self, object_classes: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::scene(&self.image_id, reason));
        if self.height == 0 || self.width == 0 {
            return fail(format!("empty raster {}x{}", self.height, self.width));
        }
        if self.segment_map.len() != self.height * self.width {
            return fail(format!(
                "segment map has {} entries for a {}x{} raster",
                self.segment_map.len(),
                self.height,
                self.width
            ));
        }
        let n = self.segments.len();
        if n == 0 {
            return fail("no segments".to_string());
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.id as usize != i + 1 {
                return fail(format!(
                    "segment ids must be contiguous from 1 in table order; \
                     entry {i} has id {}",
                    seg.id
                ));
            }
            if seg.class == 0 || seg.class as usize > object_classes {
                return fail(format!(
                    "segment {} has class {} outside 1..={object_classes}",
                    seg.id, seg.class
                ));
            }
        }
        let mut pixels = vec![0usize; n + 1];
        for &v in &self.segment_map {
            if v == 0 || v as usize > n {
                return fail(format!("pixel labeled {v} but ids run 1..={n}"));
            }
            pixels[v as usize] += 1;
        }
        if let Some(id) = (1..=n).find(|&id| pixels[id] == 0) {
            return fail(format!("segment {id} covers no pixels"));
        }
        Ok(())
    }

    /// Binary mask of one segment as a rank-2 tensor (1.0 inside, 0.0 out).
    pub fn mask_of(&self, id: u32) -> Result<Tensor> {
        if id == 0 || id as usize > self.segments.len() {
            return Err(Error::scene(
                &self.image_id,
                format!("unknown segment id {id}"),
            ));
        }
        let data: Vec<f64> = self
            .segment_map
            .iter()
            .map(|&v| if v == id { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data)
    }

    /// The 1-based class of a segment id.
    pub fn class_of(&self, id: u32) -> Result<u32> {
        self.segments
            .get(id.checked_sub(1).ok_or_else(|| {
                Error::scene(&self.image_id, "segment id 0 is reserved".to_string())
            })? as usize)
            .map(|s| s.class)
            .ok_or_else(|| Error::scene(&self.image_id, format!("unknown segment id {id}")))
    }
}

/// One directed relation between two distinct segments of the same scene.
/// `relation` is 1-based; 0 ("no relation") never appears in ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
}

/// The relations of one scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub triplets: Vec<Triplet>,
}

impl SceneGraph {
    /// Checks referential integrity against a scene: both endpoints exist,
    /// subject differs from object, relation class is in range, and no exact
    /// duplicate triplets.
    pub fn validate(&self, scene: &PanopticScene, relation_classes: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::scene(&scene.image_id, reason));
        let n = scene.segments.len() as u32;
        let mut seen = std::collections::HashSet::new();
        for t in &self.triplets {
            if t.subject == 0 || t.subject > n || t.object == 0 || t.object > n {
                return fail(format!(
                    "triplet ({}, {}, {}) references a segment outside 1..={n}",
                    t.subject, t.relation, t.object
                ));
            }
            if t.subject == t.object {
                return fail(format!(
                    "triplet ({}, {}, {}) relates a segment to itself",
                    t.subject, t.relation, t.object
                ));
            }
            if t.relation == 0 || t.relation as usize > relation_classes {
                return fail(format!(
                    "triplet relation {} outside 1..={relation_classes}",
                    t.relation
                ));
            }
            if !seen.insert(*t) {
                return fail(format!(
                    "duplicate triplet ({}, {}, {})",
                    t.subject, t.relation, t.object
                ));
            }
        }
        Ok(())
    }
}

/// Object-class names and their thing/stuff flags, both indexed by
/// `class - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectVocabulary {
    pub names: Vec<String>,
    pub thing_flags: Vec<bool>,
}

impl ObjectVocabulary {
    pub fn new(names: Vec<String>, thing_flags: Vec<bool>) -> Result<Self> {
        if names.is_empty() || names.len() != thing_flags.len() {
            return Err(Error::config(format!(
                "object vocabulary needs matching non-empty names ({}) and thing flags ({})",
                names.len(),
                thing_flags.len()
            )));
        }
        Ok(Self { names, thing_flags })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Thing/stuff flag for a 1-based class index.
    pub fn is_thing(&self, class: u32) -> bool {
        self.thing_flags[(class - 1) as usize]
    }
}

/// Frequency group of a relation class over the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyGroup {
    Head,
    Body,
    Tail,
}

/// Counts strictly above this are head classes.
pub const HEAD_THRESHOLD: u64 = 10_000;
/// Counts from this up to [`HEAD_THRESHOLD`] inclusive are body classes;
/// below are tail.
pub const BODY_THRESHOLD: u64 = 500;

/// Tags each class count as head/body/tail. Both boundary counts fall in
/// body, so the three groups partition every possible count.
pub fn split_head_body_tail(
    counts: &[u64],
    head_above: u64,
    body_from: u64,
) -> Vec<FrequencyGroup> {
    counts
        .iter()
        .map(|&c| {
            if c > head_above {
                FrequencyGroup::Head
            } else if c >= body_from {
                FrequencyGroup::Body
            } else {
                FrequencyGroup::Tail
            }
        })
        .collect()
}

/// Relation-class names plus training-split frequency bookkeeping, indexed
/// by `relation - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocabulary {
    pub names: Vec<String>,
    pub train_counts: Vec<u64>,
    pub groups: Vec<FrequencyGroup>,
    pub head_threshold: u64,
    pub body_threshold: u64,
}

impl RelationVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("empty relation vocabulary".to_string()));
        }
        let n = names.len();
        Ok(Self {
            names,
            train_counts: vec![0; n],
            groups: vec![FrequencyGroup::Tail; n],
            head_threshold: HEAD_THRESHOLD,
            body_threshold: BODY_THRESHOLD,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Recomputes occurrence counts (and head/body/tail groups) from a
    /// training split.
    pub fn tally(&mut self, graphs: &[SceneGraph]) {
        self.train_counts = vec![0; self.names.len()];
        for g in graphs {
            for t in &g.triplets {
                self.train_counts[(t.relation - 1) as usize] += 1;
            }
        }
        self.groups =
            split_head_body_tail(&self.train_counts, self.head_threshold, self.body_threshold);
    }
}

/// A validated split: scene `i` pairs with graph `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub objects: ObjectVocabulary,
    pub relations: RelationVocabulary,
    pub scenes: Vec<PanopticScene>,
    pub graphs: Vec<SceneGraph>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}
