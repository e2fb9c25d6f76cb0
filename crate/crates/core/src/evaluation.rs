//! Target-scene inference, classification metrics, distribution-gap
//! diagnostics, and map rendering.
//!
//! Inference uses the discriminator alone: patches around labeled pixels (or
//! every pixel in full-map mode) are classified in chunks, and projection
//! embeddings are exported for separability analysis. The distribution gap
//! between domains is measured with an unbiased kernel two-sample estimator,
//! reported per class in both the original (flattened patch) space and the
//! projection space.

use crate::data::{extract_patches_at, labeled_positions, PatchBatch, RasterCube};
use crate::discriminator::{classify, embed, project, Domain, DiscriminatorParams, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::trainer::ModelState;
use crate::PATCH_SIZE;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Confusion-matrix-derived classification metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `C×C` counts, rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<u64>>,
    /// Per-class accuracy; 0 for absent classes (see `absent_classes`).
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    /// Cohen's kappa.
    pub kappa: f64,
    pub sample_count: usize,
    /// Classes with no ground-truth samples (their accuracy is reported 0).
    pub absent_classes: Vec<u16>,
}

/// Confusion matrix, per-class accuracy, overall accuracy, and Cohen's kappa
/// for 1-based labels in [1, C].
pub fn compute_metrics(predicted: &[u16], truth: &[u16], class_count: usize) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions but {} truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&l| l == 0 || l as usize > class_count) {
        return Err(Error::invalid(format!(
            "truth label {bad} outside [1, {class_count}]"
        )));
    }
    if let Some(&bad) = predicted
        .iter()
        .find(|&&l| l == 0 || l as usize > class_count)
    {
        return Err(Error::invalid(format!(
            "predicted label {bad} outside [1, {class_count}]"
        )));
    }

    let c = class_count;
    let mut confusion = vec![vec![0u64; c]; c];
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        confusion[t as usize - 1][p as usize - 1] += 1;
    }
    let total: u64 = predicted.len() as u64;
    let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let overall = trace as f64 / total as f64;

    let mut absent = Vec::new();
    let per_class: Vec<f64> = (0..c)
        .map(|i| {
            let row: u64 = confusion[i].iter().sum();
            if row == 0 {
                absent.push(i as u16 + 1);
                0.0
            } else {
                confusion[i][i] as f64 / row as f64
            }
        })
        .collect();

    // chance agreement from row/column marginals
    let pe: f64 = (0..c)
        .map(|i| {
            let row: u64 = confusion[i].iter().sum();
            let col: u64 = (0..c).map(|j| confusion[j][i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (total as f64 * total as f64);
    let kappa = if (1.0 - pe).abs() < f64::EPSILON {
        1.0
    } else {
        (overall - pe) / (1.0 - pe)
    };

    if !absent.is_empty() {
        log::warn!("classes {absent:?} absent from ground truth; their accuracy is reported 0");
    }
    Ok(MetricsReport {
        confusion,
        per_class_accuracy: per_class,
        overall_accuracy: overall,
        kappa,
        sample_count: predicted.len(),
        absent_classes: absent,
    })
}

// ---------------------------------------------------------------------------
// Scene prediction
// ---------------------------------------------------------------------------

/// Scene inference output: a predicted label raster (0 where not predicted)
/// plus the projection embeddings of every classified pixel in raster order.
#[derive(Clone, Debug)]
pub struct ScenePrediction {
    pub labels: ndarray::Array2<u16>,
    pub embeddings: EmbeddingBatch,
    /// Pixel positions aligned with the embedding rows.
    pub positions: Vec<(usize, usize)>,
}

/// Classify a scene with the trained discriminator (the generator plays no
/// role at inference). In labeled mode only pixels with ground truth are
/// classified; in full-map mode every pixel is.
pub fn predict_scene(model: &ModelState, cube: &RasterCube, full_map: bool) -> Result<ScenePrediction> {
    if cube.band_count() != model.disc.d {
        return Err(Error::BandMismatch {
            expected: model.disc.d,
            got: cube.band_count(),
        });
    }
    let positions: Vec<(usize, usize)> = if full_map {
        (0..cube.height())
            .flat_map(|r| (0..cube.width()).map(move |c| (r, c)))
            .collect()
    } else {
        labeled_positions(cube)
    };

    let mut labels = ndarray::Array2::<u16>::zeros((cube.height(), cube.width()));
    let dim = model.disc.arch.projection_dim;
    let mut vectors = Array2::<f64>::zeros((positions.len(), dim));
    let mut out_labels = Vec::with_capacity(positions.len());

    let chunk = 1024;
    for chunk_start in (0..positions.len()).step_by(chunk) {
        let chunk_end = (chunk_start + chunk).min(positions.len());
        let window = &positions[chunk_start..chunk_end];
        let patches = extract_patches_at(cube, PATCH_SIZE, window)?;
        let batch = PatchBatch {
            patches,
            labels: vec![1; window.len()],
            patch_size: PATCH_SIZE,
        };
        let features = embed(&batch, &model.disc)?;
        let preds = classify(features.view(), &model.disc)?;
        let emb = project(
            features.view(),
            &model.disc,
            preds.labels.clone(),
            vec![Domain::Source; window.len()],
        )?;
        for (i, (&(r, c), &label)) in window.iter().zip(preds.labels.iter()).enumerate() {
            labels[[r, c]] = label;
            vectors
                .row_mut(chunk_start + i)
                .assign(&emb.vectors.row(i));
            out_labels.push(label);
        }
    }

    Ok(ScenePrediction {
        labels,
        embeddings: EmbeddingBatch {
            vectors,
            labels: out_labels,
            domains: vec![Domain::Source; positions.len()],
        },
        positions,
    })
}

/// Evaluate a trained model against a cube's ground truth.
pub fn evaluate_scene(model: &ModelState, cube: &RasterCube) -> Result<(MetricsReport, ScenePrediction)> {
    let prediction = predict_scene(model, cube, false)?;
    let truth: Vec<u16> = prediction
        .positions
        .iter()
        .map(|&(r, c)| cube.labels[[r, c]])
        .collect();
    let metrics = compute_metrics(&prediction.embeddings.labels, &truth, cube.class_count)?;
    Ok((metrics, prediction))
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

/// Kernel for the two-sample estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdKernel {
    Rbf,
    Linear,
}

/// RBF bandwidth selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample.
    Median,
    Fixed(f64),
}

fn sq_dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.dim().0 + b.dim().0;
    let row = |i: usize| if i < a.dim().0 { (a, i) } else { (b, i - a.dim().0) };
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let (xa, ia) = row(i);
            let (xb, ib) = row(j);
            dists.push(sq_dist(xa, ia, xb, ib).sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let m = dists[dists.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Squared maximum mean discrepancy between two samples, unbiased estimator.
/// For equal sample sizes the paired U-statistic is used (identically equal
/// samples give exactly zero); otherwise the general unbiased form. May be
/// slightly negative.
pub fn mmd(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    kernel: MmdKernel,
    bandwidth: Bandwidth,
) -> Result<f64> {
    let (n, ka) = a.dim();
    let (m, kb) = b.dim();
    if ka != kb {
        return Err(Error::shape(format!(
            "mmd: feature dims differ ({ka} vs {kb})"
        )));
    }
    if n < 2 || m < 2 {
        return Err(Error::invalid("mmd needs at least 2 samples per side"));
    }
    let h = match (kernel, bandwidth) {
        (MmdKernel::Rbf, Bandwidth::Median) => median_bandwidth(a, b),
        (MmdKernel::Rbf, Bandwidth::Fixed(v)) => {
            if v <= 0.0 {
                return Err(Error::invalid("bandwidth must be positive"));
            }
            v
        }
        (MmdKernel::Linear, _) => 1.0,
    };
    let k = |xa: ArrayView2<f64>, i: usize, xb: ArrayView2<f64>, j: usize| -> f64 {
        match kernel {
            MmdKernel::Linear => xa.row(i).dot(&xb.row(j)),
            MmdKernel::Rbf => (-sq_dist(xa, i, xb, j) / (2.0 * h * h)).exp(),
        }
    };

    if n == m {
        // paired U-statistic: h(i,j) = k(x_i,x_j) + k(y_i,y_j) − k(x_i,y_j) − k(x_j,y_i)
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                acc += k(a, i, a, j) + k(b, i, b, j) - k(a, i, b, j) - k(a, j, b, i);
            }
        }
        Ok(acc / (n * (n - 1)) as f64)
    } else {
        let mut xx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(a, i, a, j);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += k(b, i, b, j);
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..m {
                xy += k(a, i, b, j);
            }
        }
        Ok(xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64)
    }
}

/// One class's distribution-gap entry: distances in the original (flattened
/// patch) space and in the projection space, with the raw squared estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MmdRow {
    pub class: u16,
    pub origin: f64,
    pub projection: f64,
    pub origin_squared: f64,
    pub projection_squared: f64,
}

/// Per-class distribution gap between two aligned batches, plus a mean row.
/// Distances are `sqrt(max(estimate, 0))`; the raw squared estimates are kept
/// alongside since the unbiased estimator may dip below zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MmdReport {
    pub rows: Vec<MmdRow>,
    pub mean_origin: f64,
    pub mean_projection: f64,
}

fn flattened_class_rows(batch: &PatchBatch, class: u16) -> Array2<f64> {
    let idx: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.labels[i] == class)
        .collect();
    let (_, p, _, d) = batch.patches.dim();
    let mut out = Array2::zeros((idx.len(), p * p * d));
    for (row, &i) in idx.iter().enumerate() {
        let flat: Vec<f64> = batch
            .patches
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .map(|&v| v as f64)
            .collect();
        out.row_mut(row).assign(&ndarray::Array1::from_vec(flat));
    }
    out
}

fn projection_class_rows(
    batch: &PatchBatch,
    disc: &DiscriminatorParams,
    class: u16,
) -> Result<Array2<f64>> {
    let idx: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.labels[i] == class)
        .collect();
    let sub = batch.select(&idx);
    let features = embed(&sub, disc)?;
    let emb = project(
        features.view(),
        disc,
        sub.labels.clone(),
        vec![Domain::Source; sub.len()],
    )?;
    Ok(emb.vectors)
}

/// Per-class distribution gap between a source batch and a comparison batch
/// (extended or target), in original and projection space.
pub fn mmd_report(
    model: &ModelState,
    sd: &PatchBatch,
    other: &PatchBatch,
    kernel: MmdKernel,
    bandwidth: Bandwidth,
) -> Result<MmdReport> {
    let classes: std::collections::BTreeSet<u16> = sd
        .labels
        .iter()
        .copied()
        .filter(|c| other.labels.contains(c))
        .collect();
    if classes.is_empty() {
        return Err(Error::invalid("no shared classes between batches"));
    }
    let mut rows = Vec::new();
    for &class in &classes {
        let a_count = sd.labels.iter().filter(|&&l| l == class).count();
        let b_count = other.labels.iter().filter(|&&l| l == class).count();
        if a_count < 2 || b_count < 2 {
            log::warn!("class {class} has fewer than 2 samples on one side; skipped");
            continue;
        }
        let origin_sq = mmd(
            flattened_class_rows(sd, class).view(),
            flattened_class_rows(other, class).view(),
            kernel,
            bandwidth,
        )?;
        let proj_sq = mmd(
            projection_class_rows(sd, &model.disc, class)?.view(),
            projection_class_rows(other, &model.disc, class)?.view(),
            kernel,
            bandwidth,
        )?;
        rows.push(MmdRow {
            class,
            origin: origin_sq.max(0.0).sqrt(),
            projection: proj_sq.max(0.0).sqrt(),
            origin_squared: origin_sq,
            projection_squared: proj_sq,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("no class had enough samples on both sides"));
    }
    let mean_origin = rows.iter().map(|r| r.origin).sum::<f64>() / rows.len() as f64;
    let mean_projection = rows.iter().map(|r| r.projection).sum::<f64>() / rows.len() as f64;
    Ok(MmdReport {
        rows,
        mean_origin,
        mean_projection,
    })
}

// ---------------------------------------------------------------------------
// Rendering and embedding export
// ---------------------------------------------------------------------------

/// Render a label raster as an 8-bit RGB PNG. Background (label 0) is black;
/// classes use the palette in order.
pub fn render_map(labels: &ndarray::Array2<u16>, palette: &[[u8; 3]], path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > palette.len()) {
        return Err(Error::invalid(format!(
            "label {bad} exceeds palette size {}",
            palette.len()
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let l = labels[[r, c]] as usize;
            let color = if l == 0 { [0, 0, 0] } else { palette[l - 1] };
            img.put_pixel(c as u32, r as u32, image::Rgb(color));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

/// Default palette: distinct colors for up to 12 classes.
pub fn default_palette(class_count: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
        [170, 110, 40],
    ];
    (0..class_count).map(|i| BASE[i % BASE.len()]).collect()
}

/// Export embeddings in the cube binary convention: `meta.json` plus raw
/// little-endian f32 vectors and u16 labels.
pub fn save_embeddings(embeddings: &EmbeddingBatch, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (count, dim) = embeddings.vectors.dim();
    let meta = serde_json::json!({
        "count": count,
        "dim": dim,
        "dtype": "f32",
        "byte_order": "little",
    });
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut bytes = Vec::with_capacity(count * dim * 4);
    for &v in embeddings.vectors.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(dir.join("embeddings.bin"), bytes)?;
    let mut lbytes = Vec::with_capacity(count * 2);
    for &l in embeddings.labels.iter() {
        lbytes.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(dir.join("labels.bin"), lbytes)?;
    Ok(())
}
