//! Dataset-level evaluation: oracle queries, inference, and metric
//! aggregation for a whole split, plus the prediction-dump interchange
//! format the CLI reads and writes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{rank_triplets, softmax_dist, triplet_score, TripletPrediction};
use crate::metrics::{
    compute_metrics, detector_metrics, DatasetEvalInputs, MetricsReport, PqAccumulator,
};
use crate::model::{query_assignment, PairNetModel};
use crate::nn::checkpoint::{read_records, write_records};
use crate::nn::tensor::Tensor;
use crate::oracle::{oracle_queries, EmbeddingTable, ObjectQuerySet, OracleConfig, QueryAssignment};
use crate::par::try_map_ordered;
use crate::scene::{Dataset, PanopticScene, SceneGraph};

/// Everything one evaluation pass produces. The per-image pieces are kept so
/// callers can dump predictions or drill into single images without paying
/// for a second inference sweep.
#[derive(Debug)]
pub struct EvalOutputs {
    pub report: MetricsReport,
    /// Ranked predictions per image, aligned with the dataset's scene order.
    pub predictions: Vec<Vec<TripletPrediction>>,
    pub query_sets: Vec<ObjectQuerySet>,
    pub assignments: Vec<QueryAssignment>,
}

fn check_vocab(model: &PairNetModel, data: &Dataset) -> Result<()> {
    if model.config.object_classes != data.objects.len() {
        return Err(Error::config(format!(
            "model expects {} object classes but the dataset vocabulary has {}",
            model.config.object_classes,
            data.objects.len()
        )));
    }
    if model.config.relation_classes != data.relations.len() {
        return Err(Error::config(format!(
            "model expects {} relation classes but the dataset vocabulary has {}",
            model.config.relation_classes,
            data.relations.len()
        )));
    }
    Ok(())
}

/// Runs the full inference path over a split and aggregates every metric the
/// report carries: recall family, detector quality, and panoptic quality.
/// Per-image work fans out over the thread pool when the `parallel` feature
/// is on; results are order-stable either way.
pub fn evaluate_model(
    model: &PairNetModel,
    data: &Dataset,
    table: &EmbeddingTable,
    oracle: &OracleConfig,
    ks: &[usize],
    iou_threshold: f64,
    include_optimal: bool,
) -> Result<EvalOutputs> {
    check_vocab(model, data)?;
    if data.scenes.is_empty() {
        return Err(Error::Eval("evaluation split has no images".to_string()));
    }
    let indices: Vec<usize> = (0..data.scenes.len()).collect();
    let per_image = try_map_ordered(&indices, |&i| {
        let scene = &data.scenes[i];
        let out = oracle_queries(scene, table, oracle)?;
        let inference = model.infer(&out.query_set)?;
        let assignment = query_assignment(scene, &out.query_set)?;
        Ok((out.query_set, inference.predictions, assignment))
    })?;

    let mut query_sets = Vec::with_capacity(per_image.len());
    let mut predictions = Vec::with_capacity(per_image.len());
    let mut assignments = Vec::with_capacity(per_image.len());
    for (qs, preds, asg) in per_image {
        query_sets.push(qs);
        predictions.push(preds);
        assignments.push(asg);
    }

    let inputs = DatasetEvalInputs {
        predictions: &predictions,
        scenes: &data.scenes,
        graphs: &data.graphs,
        objects: &data.objects,
    };
    let mut report = compute_metrics(&inputs, ks, iou_threshold, include_optimal)?;
    report.detector = Some(detector_metrics(
        &query_sets,
        &assignments,
        &data.scenes,
        &data.graphs,
    )?);
    let mut pq = PqAccumulator::new();
    for (qs, scene) in query_sets.iter().zip(&data.scenes) {
        pq.add_image(qs, scene)?;
    }
    report.panoptic_quality = pq.value();

    Ok(EvalOutputs {
        report,
        predictions,
        query_sets,
        assignments,
    })
}

/// Expected pair recall of a selector that picks its pair slots uniformly at
/// random among the off-diagonal cells: with perfect classes and masks, each
/// annotated pair lands in the top min(k, slots) with probability
/// min(k, slots) / (n_obj^2 - n_obj). This is the floor a learned proposal
/// network must clear.
pub fn random_pair_baseline(n_obj: usize, pair_slots: usize, k: usize) -> f64 {
    let cells = (n_obj * n_obj - n_obj) as f64;
    (k.min(pair_slots) as f64 / cells).min(1.0)
}

/// Builds predictions straight from the annotations: each annotated triplet
/// becomes one prediction whose subject/object class distributions come from
/// the oracle's logits, whose relation distribution is a one-hot at the
/// annotated predicate, and whose masks are the assigned queries' soft
/// masks. Bypassing the learned pipeline this way isolates the evaluation
/// stack: with a noiseless oracle it must score perfect recall.
pub fn gt_injected_predictions(
    scene: &PanopticScene,
    graph: &SceneGraph,
    query_set: &ObjectQuerySet,
    relation_classes: usize,
) -> Result<Vec<TripletPrediction>> {
    let assignment = query_assignment(scene, query_set)?;
    let (h, w) = (scene.height, scene.width);
    let cols = query_set.class_logits.shape()[1];
    let logit_row = |slot: usize| -> Vec<f64> {
        query_set.class_logits.data()[slot * cols..(slot + 1) * cols].to_vec()
    };
    let mut preds = Vec::with_capacity(graph.triplets.len());
    for (t, trip) in graph.triplets.iter().enumerate() {
        let sub_slot = assignment.slot_of(trip.subject);
        let obj_slot = assignment.slot_of(trip.object);
        let sub_dist = softmax_dist(&logit_row(sub_slot));
        let obj_dist = softmax_dist(&logit_row(obj_slot));
        let mut rel_dist = vec![0.0; relation_classes + 1];
        let r = trip.relation as usize;
        if r == 0 || r > relation_classes {
            return Err(Error::scene(
                &scene.image_id,
                format!("relation class {r} outside 1..={relation_classes}"),
            ));
        }
        rel_dist[r] = 1.0;
        let score = triplet_score(&sub_dist, &obj_dist, &rel_dist, None)?;
        preds.push(TripletPrediction {
            pair_index: t,
            sub_query: sub_slot,
            obj_query: obj_slot,
            sub_dist,
            obj_dist,
            rel_dist,
            sub_mask: Tensor::new(vec![h, w], query_set.mask_of(sub_slot).to_vec())?,
            obj_mask: Tensor::new(vec![h, w], query_set.mask_of(obj_slot).to_vec())?,
            score,
        });
    }
    Ok(rank_triplets(preds))
}

/// One dumped triplet: query indices, argmax class labels, and the ranking
/// score. Classes use the on-disk convention (objects 1-based, relations
/// 1-based with 0 reserved for "no relation").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDump {
    pub sub_query: usize,
    pub obj_query: usize,
    pub sub_class: u32,
    pub obj_class: u32,
    pub rel_class: u32,
    pub score: f64,
}

/// One image's dumped predictions plus the name of the sidecar binary file
/// holding the referenced query masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDump {
    pub image_id: String,
    pub triplets: Vec<TripletDump>,
    pub mask_file: String,
}

fn mask_record_name(image_id: &str, slot: usize) -> String {
    format!("{image_id}/q{slot}")
}

/// Writes ranked predictions as a JSON array of per-image entries plus one
/// binary mask file (same record container as checkpoints) holding each
/// referenced query mask once per image.
pub fn dump_predictions(
    json_path: &Path,
    mask_path: &Path,
    image_ids: &[String],
    predictions: &[Vec<TripletPrediction>],
) -> Result<()> {
    if image_ids.len() != predictions.len() {
        return Err(Error::shape(
            "dump_predictions",
            format!(
                "{} image ids vs {} prediction lists",
                image_ids.len(),
                predictions.len()
            ),
        ));
    }
    let mask_name = mask_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::config(format!("bad mask path {}", mask_path.display())))?
        .to_string();

    let mut dumps = Vec::with_capacity(image_ids.len());
    let mut records: Vec<(String, Tensor)> = Vec::new();
    for (image_id, preds) in image_ids.iter().zip(predictions) {
        let mut triplets = Vec::with_capacity(preds.len());
        let mut stored: BTreeMap<usize, Tensor> = BTreeMap::new();
        for p in preds {
            let (sub_class, rel_class, obj_class) = p.labels();
            triplets.push(TripletDump {
                sub_query: p.sub_query,
                obj_query: p.obj_query,
                sub_class,
                obj_class,
                rel_class,
                score: p.score,
            });
            stored.entry(p.sub_query).or_insert_with(|| p.sub_mask.clone());
            stored.entry(p.obj_query).or_insert_with(|| p.obj_mask.clone());
        }
        for (slot, mask) in stored {
            records.push((mask_record_name(image_id, slot), mask));
        }
        dumps.push(ImageDump {
            image_id: image_id.clone(),
            triplets,
            mask_file: mask_name.clone(),
        });
    }
    write_records(mask_path, records.iter().map(|(n, t)| (n.as_str(), t)))?;
    let json = serde_json::to_string_pretty(&dumps)?;
    std::fs::write(json_path, json)?;
    Ok(())
}

/// Reads a prediction dump back from disk.
pub fn load_prediction_dump(json_path: &Path) -> Result<Vec<ImageDump>> {
    let text = std::fs::read_to_string(json_path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds rankable predictions from a dump. Class distributions come back
/// as one-hots at the dumped labels, which preserves every label-based
/// metric decision; scores and rank order are taken from the dump.
pub fn rebuild_predictions(
    dumps: &[ImageDump],
    mask_dir: &Path,
    object_classes: usize,
    relation_classes: usize,
) -> Result<Vec<(String, Vec<TripletPrediction>)>> {
    let mut mask_cache: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    let mut out = Vec::with_capacity(dumps.len());
    for dump in dumps {
        if !mask_cache.contains_key(&dump.mask_file) {
            let records = read_records(&mask_dir.join(&dump.mask_file))?;
            mask_cache.insert(dump.mask_file.clone(), records.into_iter().collect());
        }
        let masks = &mask_cache[&dump.mask_file];
        let mask_for = |slot: usize| -> Result<Tensor> {
            let name = mask_record_name(&dump.image_id, slot);
            masks
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("mask record {name}")))
        };
        let mut preds = Vec::with_capacity(dump.triplets.len());
        for (i, t) in dump.triplets.iter().enumerate() {
            for (what, class, limit) in [
                ("subject", t.sub_class, object_classes),
                ("object", t.obj_class, object_classes),
                ("relation", t.rel_class, relation_classes),
            ] {
                if class == 0 || class as usize > limit {
                    return Err(Error::config(format!(
                        "{what} class {class} outside 1..={limit} in dump for {}",
                        dump.image_id
                    )));
                }
            }
            let one_hot = |len: usize, at: usize| {
                let mut v = vec![0.0; len];
                v[at] = 1.0;
                v
            };
            preds.push(TripletPrediction {
                pair_index: i,
                sub_query: t.sub_query,
                obj_query: t.obj_query,
                sub_dist: one_hot(object_classes + 1, t.sub_class as usize - 1),
                obj_dist: one_hot(object_classes + 1, t.obj_class as usize - 1),
                rel_dist: one_hot(relation_classes + 1, t.rel_class as usize),
                sub_mask: mask_for(t.sub_query)?,
                obj_mask: mask_for(t.obj_query)?,
                score: t.score,
            });
        }
        out.push((dump.image_id.clone(), preds));
    }
    Ok(out)
}

/// Scores a prediction dump against a ground-truth dataset. Dumped images
/// must exist in the dataset; dataset images missing from the dump count as
/// images with zero predictions. Detector and panoptic metrics need the raw
/// query sets, which a dump does not carry, so they stay absent.
pub fn report_from_dump(
    dumps: &[ImageDump],
    mask_dir: &Path,
    data: &Dataset,
    ks: &[usize],
    iou_threshold: f64,
    include_optimal: bool,
) -> Result<MetricsReport> {
    let rebuilt = rebuild_predictions(dumps, mask_dir, data.objects.len(), data.relations.len())?;
    let index_of: BTreeMap<&str, usize> = data
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image_id.as_str(), i))
        .collect();
    let mut predictions: Vec<Vec<TripletPrediction>> = vec![Vec::new(); data.scenes.len()];
    for (image_id, preds) in rebuilt {
        let &i = index_of
            .get(image_id.as_str())
            .ok_or_else(|| Error::NotFound(format!("image {image_id} in ground-truth data")))?;
        predictions[i] = preds;
    }
    let inputs = DatasetEvalInputs {
        predictions: &predictions,
        scenes: &data.scenes,
        graphs: &data.graphs,
        objects: &data.objects,
    };
    compute_metrics(&inputs, ks, iou_threshold, include_optimal)
}
