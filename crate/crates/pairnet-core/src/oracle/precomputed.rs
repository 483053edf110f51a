//! Binary persistence for per-image query sets.
//!
//! Reuses the checkpoint record container: each image contributes three
//! records named `{image_id}/queries`, `{image_id}/class_logits`, and
//! `{image_id}/soft_masks`, in image order. This is the integration point
//! for swapping in a real segmenter later: anything that can produce this
//! file can feed the pipeline.

use super::ObjectQuerySet;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_records, write_records};
use std::path::Path;

/// Expected extents for every query set in a precomputed file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecomputedSpec {
    pub n_obj: usize,
    pub width: usize,
    pub object_classes: usize,
    pub height: usize,
    pub raster_width: usize,
}

pub fn save_precomputed(path: &Path, items: &[(String, ObjectQuerySet)]) -> Result<()> {
    let mut records = Vec::with_capacity(items.len() * 3);
    let mut names = Vec::with_capacity(items.len() * 3);
    for (image_id, qs) in items {
        qs.validate()?;
        names.push(format!("{image_id}/queries"));
        names.push(format!("{image_id}/class_logits"));
        names.push(format!("{image_id}/soft_masks"));
        records.push(&qs.queries);
        records.push(&qs.class_logits);
        records.push(&qs.soft_masks);
    }
    write_records(
        path,
        names.iter().map(String::as_str).zip(records.into_iter()),
    )
}

/// Loads per-image query sets, validating every extent against the spec.
pub fn load_precomputed(
    path: &Path,
    spec: &PrecomputedSpec,
) -> Result<Vec<(String, ObjectQuerySet)>> {
    let records = read_records(path)?;
    if records.len() % 3 != 0 {
        return Err(Error::config(format!(
            "precomputed file {} holds {} records, expected a multiple of 3",
            path.display(),
            records.len()
        )));
    }
    let mut out = Vec::with_capacity(records.len() / 3);
    for chunk in records.chunks_exact(3) {
        let image_id = match chunk[0].0.strip_suffix("/queries") {
            Some(id) => id.to_string(),
            None => {
                return Err(Error::config(format!(
                    "record '{}' should be an image's '/queries' entry",
                    chunk[0].0
                )))
            }
        };
        for (rec, suffix) in chunk.iter().zip(["/queries", "/class_logits", "/soft_masks"]) {
            let want = format!("{image_id}{suffix}");
            if rec.0 != want {
                return Err(Error::config(format!(
                    "record '{}' out of order, expected '{want}'",
                    rec.0
                )));
            }
        }
        let qs = ObjectQuerySet {
            queries: chunk[0].1.clone(),
            class_logits: chunk[1].1.clone(),
            soft_masks: chunk[2].1.clone(),
        };
        let want_q = [spec.n_obj, spec.width];
        let want_l = [spec.n_obj, spec.object_classes + 1];
        let want_m = [spec.n_obj, spec.height, spec.raster_width];
        if qs.queries.shape() != want_q
            || qs.class_logits.shape() != want_l
            || qs.soft_masks.shape() != want_m
        {
            return Err(Error::config(format!(
                "image '{image_id}': extents queries {:?} / logits {:?} / masks {:?} do not \
                 match expected {want_q:?} / {want_l:?} / {want_m:?}",
                qs.queries.shape(),
                qs.class_logits.shape(),
                qs.soft_masks.shape()
            )));
        }
        qs.validate()?;
        out.push((image_id, qs));
    }
    Ok(out)
}
