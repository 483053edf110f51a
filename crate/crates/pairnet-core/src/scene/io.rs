//! Annotation file I/O.
//!
//! The on-disk format is UTF-8 JSON with a flat top level: object-class
//! names, per-class thing flags, relation-class names, and a list of images.
//! Each image carries its raster extents, the dense row-major segment-id
//! map, the segment table, and relations as `[subject, relation, object]`
//! triples. All class and segment indices in files are 1-based; 0 is
//! reserved.

use super::{
    Dataset, ObjectVocabulary, PanopticScene, RelationVocabulary, SceneGraph, Segment, Triplet,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct FileRoot {
    object_classes: Vec<String>,
    thing_flags: Vec<bool>,
    relation_classes: Vec<String>,
    images: Vec<FileImage>,
}

#[derive(Serialize, Deserialize)]
struct FileImage {
    image_id: String,
    height: usize,
    width: usize,
    segment_map: Vec<u32>,
    segments: Vec<Segment>,
    relations: Vec<[u32; 3]>,
}

/// An image dropped during loading, with the reason it failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRejection {
    pub image_id: String,
    pub reason: String,
}

/// A loaded dataset plus the per-image diagnostics for anything skipped.
#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub rejected: Vec<ImageRejection>,
}

/// Reads an annotation file. File-level problems (unreadable, bad JSON,
/// inconsistent vocabularies) fail hard; per-image invariant violations
/// drop only that image and are reported in the outcome.
pub fn load_dataset(path: &Path) -> Result<LoadOutcome> {
    let file = File::open(path)?;
    let root: FileRoot = serde_json::from_reader(BufReader::new(file))?;
    let objects = ObjectVocabulary::new(root.object_classes, root.thing_flags)?;
    let relations = RelationVocabulary::new(root.relation_classes)?;

    let mut scenes = Vec::new();
    let mut graphs = Vec::new();
    let mut rejected = Vec::new();
    for img in root.images {
        let mut segments = img.segments;
        segments.sort_by_key(|s| s.id);
        let scene = PanopticScene {
            image_id: img.image_id,
            height: img.height,
            width: img.width,
            segment_map: img.segment_map,
            segments,
        };
        let graph = SceneGraph {
            triplets: img
                .relations
                .iter()
                .map(|&[subject, relation, object]| Triplet {
                    subject,
                    relation,
                    object,
                })
                .collect(),
        };
        let check = scene
            .validate(objects.len())
            .and_then(|()| graph.validate(&scene, relations.len()));
        match check {
            Ok(()) => {
                scenes.push(scene);
                graphs.push(graph);
            }
            Err(err) => {
                let reason = match &err {
                    Error::Scene { reason, .. } => reason.clone(),
                    other => other.to_string(),
                };
                rejected.push(ImageRejection {
                    image_id: scene.image_id,
                    reason,
                });
            }
        }
    }
    Ok(LoadOutcome {
        dataset: Dataset {
            objects,
            relations,
            scenes,
            graphs,
        },
        rejected,
    })
}

/// Writes a dataset in the annotation schema. Relation counts and frequency
/// groups are derived data and are not persisted.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let images: Vec<FileImage> = dataset
        .scenes
        .iter()
        .zip(&dataset.graphs)
        .map(|(scene, graph)| FileImage {
            image_id: scene.image_id.clone(),
            height: scene.height,
            width: scene.width,
            segment_map: scene.segment_map.clone(),
            segments: scene.segments.clone(),
            relations: graph
                .triplets
                .iter()
                .map(|t| [t.subject, t.relation, t.object])
                .collect(),
        })
        .collect();
    let root = FileRoot {
        object_classes: dataset.objects.names.clone(),
        thing_flags: dataset.objects.thing_flags.clone(),
        relation_classes: dataset.relations.names.clone(),
        images,
    };
    let file = File::create(path)?;
    serde_json::to_writer(BufWriter::new(file), &root)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "object_classes": ["cup", "table"],
            "thing_flags": [true, false],
            "relation_classes": ["on", "beside"],
            "images": [{
                "image_id": "img-0",
                "height": 2,
                "width": 2,
                "segment_map": [1, 1, 2, 2],
                "segments": [{"id": 1, "class": 1}, {"id": 2, "class": 2}],
                "relations": [[1, 1, 2]]
            }]
        }"#
    }

    #[test]
    fn minimal_file_parses_into_validated_structures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let outcome = load_dataset(&path).unwrap();
        assert!(outcome.rejected.is_empty());
        let ds = outcome.dataset;
        assert_eq!(ds.objects.names, vec!["cup", "table"]);
        assert!(ds.objects.is_thing(1) && !ds.objects.is_thing(2));
        assert_eq!(ds.relations.names, vec!["on", "beside"]);
        assert_eq!(ds.scenes.len(), 1);
        assert_eq!(ds.scenes[0].segments.len(), 2);
        assert_eq!(
            ds.graphs[0].triplets,
            vec![Triplet {
                subject: 1,
                relation: 1,
                object: 2
            }]
        );
    }

    #[test]
    fn image_with_dangling_triplet_is_rejected_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let json = minimal_json().replace("[[1, 1, 2]]", "[[1, 1, 9]]");
        std::fs::write(&path, json).unwrap();
        let outcome = load_dataset(&path).unwrap();
        assert!(outcome.dataset.scenes.is_empty());
        assert_eq!(outcome.rejected.len(), 1);
        assert_eq!(outcome.rejected[0].image_id, "img-0");
        assert!(outcome.rejected[0].reason.contains('9'));
    }

    #[test]
    fn save_then_load_is_structurally_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let original = load_dataset(&path).unwrap().dataset;

        let copy_path = dir.path().join("copy.json");
        save_dataset(&original, &copy_path).unwrap();
        let reloaded = load_dataset(&copy_path).unwrap();
        assert!(reloaded.rejected.is_empty());
        assert_eq!(reloaded.dataset, original);
    }

    #[test]
    fn file_level_problems_fail_hard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(load_dataset(&path).is_err());

        // Vocabulary arrays of different lengths are a file-level error.
        let mismatched = minimal_json().replace("[true, false]", "[true]");
        std::fs::write(&path, mismatched).unwrap();
        assert!(load_dataset(&path).is_err());

        assert!(load_dataset(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn out_of_order_segment_tables_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let json = minimal_json().replace(
            r#"[{"id": 1, "class": 1}, {"id": 2, "class": 2}]"#,
            r#"[{"id": 2, "class": 2}, {"id": 1, "class": 1}]"#,
        );
        std::fs::write(&path, json).unwrap();
        let outcome = load_dataset(&path).unwrap();
        assert!(outcome.rejected.is_empty());
        assert_eq!(outcome.dataset.scenes[0].segments[0].id, 1);
    }
}
