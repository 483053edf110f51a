//! Diagnostic heatmap export. Renders the pair-proposal matrices (raw query
//! similarity, projected cosine similarity, learned filter output, and the
//! supervision target) plus the last decoder layer's mean cross-attention
//! map as binary PGM images, with a JSON sidecar recording normalization
//! bounds and each pair slot's argmax labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{query_assignment, PairNetModel};
use crate::nn::Tensor;
use crate::oracle::ObjectQuerySet;
use crate::ppn::build_gt_matrix;
use crate::scene::{PanopticScene, SceneGraph};

/// Value range a heatmap was normalized from; recorded in the sidecar so
/// byte images remain interpretable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBounds {
    pub min: f64,
    pub max: f64,
}

/// Maps a rank-2 tensor onto bytes by min-max normalization: the minimum
/// becomes 0, the maximum 255. A constant matrix has no range and maps to
/// mid-gray 128 everywhere.
pub fn normalize_to_bytes(t: &Tensor) -> Result<(Vec<u8>, HeatmapBounds)> {
    if t.rank() != 2 {
        return Err(Error::shape(
            "normalize_to_bytes",
            format!("want a rank-2 matrix, got shape {:?}", t.shape()),
        ));
    }
    let data = t.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes = if min == max {
        vec![128u8; data.len()]
    } else {
        let span = max - min;
        data.iter()
            .map(|v| ((v - min) / span * 255.0).round() as u8)
            .collect()
    };
    Ok((bytes, HeatmapBounds { min, max }))
}

/// Writes one byte-per-pixel image as binary PGM ("P5", maxval 255).
pub fn write_pgm(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != height * width {
        return Err(Error::shape(
            "write_pgm",
            format!("{}x{} image wants {} bytes, got {}", height, width, height * width, bytes.len()),
        ));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(bytes)?;
    Ok(())
}

/// Parses a binary PGM file: magic "P5"; then width, height, and maxval
/// tokens separated by whitespace (with `#` comments allowed between them);
/// then a single whitespace byte and `width * height` raster bytes.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |offset: usize, reason: &str| Error::BinaryFormat {
        path: path.display().to_string(),
        offset: offset as u64,
        reason: reason.to_string(),
    };

    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(bad(0, "missing P5 magic"));
    }
    let mut pos = 2usize;
    let next_token = |pos: &mut usize| -> Result<usize> {
        // Skip whitespace and comment lines.
        loop {
            while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < buf.len() && buf[*pos] == b'#' {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < buf.len() && buf[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(bad(start, "expected a decimal header token"));
        }
        std::str::from_utf8(&buf[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "unparseable header token"))
    };

    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(bad(pos, "maxval must be 255"));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(bad(pos, "missing whitespace before raster"));
    }
    pos += 1;
    let want = width * height;
    if buf.len() - pos != want {
        return Err(bad(pos, "raster length does not match header extents"));
    }
    Ok((height, width, buf[pos..].to_vec()))
}

/// Normalizes a matrix and writes it as PGM, returning the bounds.
pub fn write_heatmap(path: &Path, matrix: &Tensor) -> Result<HeatmapBounds> {
    let (bytes, bounds) = normalize_to_bytes(matrix)?;
    write_pgm(path, matrix.shape()[0], matrix.shape()[1], &bytes)?;
    Ok(bounds)
}

/// Argmax labels of one pair slot's classification heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotLabels {
    pub slot: usize,
    pub sub_query: usize,
    pub obj_query: usize,
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
}

/// Sidecar metadata for one image's heatmap dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectSidecar {
    pub image_id: String,
    /// Normalization bounds per emitted PGM file name.
    pub bounds: BTreeMap<String, HeatmapBounds>,
    /// Pair slots in slot order.
    pub slots: Vec<SlotLabels>,
}

/// Paths and metadata produced by one [`inspect_image`] call.
#[derive(Debug, Clone)]
pub struct InspectOutputs {
    pub files: Vec<PathBuf>,
    pub sidecar_path: PathBuf,
    pub sidecar: InspectSidecar,
}

/// Runs inference on one image and dumps five heatmaps into `out_dir`:
/// the raw query Gram matrix, the projected cosine matrix, the sigmoid of
/// the learned filter output, the ground-truth pair matrix, and the last
/// decoder layer's cross-attention averaged over heads. A `<image>.json`
/// sidecar carries the per-file bounds and the per-slot argmax labels.
pub fn inspect_image(
    model: &PairNetModel,
    scene: &PanopticScene,
    graph: &SceneGraph,
    query_set: &ObjectQuerySet,
    out_dir: &Path,
) -> Result<InspectOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let inference = model.infer(query_set)?;
    let assignment = query_assignment(scene, query_set)?;
    let m_gt = build_gt_matrix(&assignment, graph, model.config.n_obj)?;

    let attention = inference
        .cross_maps
        .last()
        .ok_or_else(|| Error::Eval("decoder produced no attention maps".to_string()))?;
    let mean_attention = mean_over_heads(attention)?;

    let panels: [(&str, &Tensor); 5] = [
        ("gram", &inference.gram),
        ("rough", &inference.m_rough),
        ("filtered", &inference.m_filtered_sigmoid),
        ("gt_pairs", &m_gt.values),
        ("attention", &mean_attention),
    ];

    let mut files = Vec::with_capacity(panels.len());
    let mut bounds = BTreeMap::new();
    for (name, matrix) in panels {
        let file_name = format!("{}.{name}.pgm", scene.image_id);
        let path = out_dir.join(&file_name);
        let b = write_heatmap(&path, matrix)?;
        bounds.insert(file_name, b);
        files.push(path);
    }

    let mut slots: Vec<SlotLabels> = inference
        .predictions
        .iter()
        .map(|p| {
            let (subject, relation, object) = p.labels();
            SlotLabels {
                slot: p.pair_index,
                sub_query: p.sub_query,
                obj_query: p.obj_query,
                subject,
                relation,
                object,
            }
        })
        .collect();
    slots.sort_by_key(|s| s.slot);

    let sidecar = InspectSidecar {
        image_id: scene.image_id.clone(),
        bounds,
        slots,
    };
    let sidecar_path = out_dir.join(format!("{}.json", scene.image_id));
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(InspectOutputs {
        files,
        sidecar_path,
        sidecar,
    })
}

fn mean_over_heads(maps: &Tensor) -> Result<Tensor> {
    if maps.rank() != 3 {
        return Err(Error::shape(
            "mean_over_heads",
            format!("want [heads, rows, cols], got {:?}", maps.shape()),
        ));
    }
    let (heads, rows, cols) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut out = vec![0.0; rows * cols];
    for h in 0..heads {
        let plane = &maps.data()[h * rows * cols..(h + 1) * rows * cols];
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    let inv = 1.0 / heads as f64;
    for o in &mut out {
        *o *= inv;
    }
    Tensor::new(vec![rows, cols], out)
}
