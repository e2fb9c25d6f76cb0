//! Raster cubes, patch batches, and seeded synthetic scene pairs.
//!
//! A scene is an `H×W×d` reflectance cube plus an aligned integer label
//! raster (0 = unlabeled background, 1..C = classes). Patches of odd side
//! length are extracted around every labeled pixel with mirror padding at
//! scene borders.
//!
//! On-disk cube format: a directory holding `meta.json` (height, width,
//! bands, classes, dtype `"f32"`, byte_order `"little"`), `bands.bin` (raw
//! little-endian f32, C-order row→col→band) and `labels.bin` (raw
//! little-endian u16, C-order row→col).

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// A scene: reflectance bands `[H, W, d]` with aligned labels `[H, W]`.
#[derive(Clone, Debug)]
pub struct RasterCube {
    pub bands: Array3<f32>,
    pub labels: Array2<u16>,
    pub class_count: usize,
}

impl RasterCube {
    /// Build a cube, validating the shared height/width and label range.
    pub fn new(bands: Array3<f32>, labels: Array2<u16>, class_count: usize) -> Result<Self> {
        let (h, w, _) = bands.dim();
        if labels.dim() != (h, w) {
            return Err(Error::shape(format!(
                "bands are {h}×{w} but labels are {}×{}",
                labels.dim().0,
                labels.dim().1
            )));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > class_count) {
            return Err(Error::invalid(format!(
                "label {bad} exceeds class count {class_count}"
            )));
        }
        if bands.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedCube("non-finite band value".into()));
        }
        Ok(Self {
            bands,
            labels,
            class_count,
        })
    }

    pub fn height(&self) -> usize {
        self.bands.dim().0
    }

    pub fn width(&self) -> usize {
        self.bands.dim().1
    }

    pub fn band_count(&self) -> usize {
        self.bands.dim().2
    }

    /// Count of labeled (non-background) pixels.
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// Min-max normalize each band to [0,1] in place. A constant band maps
    /// to all zeros.
    pub fn normalize_bands(&mut self) {
        let d = self.band_count();
        for b in 0..d {
            let mut lane = self.bands.index_axis_mut(Axis(2), b);
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in lane.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let range = hi - lo;
            if range > 0.0 {
                lane.mapv_inplace(|v| (v - lo) / range);
            } else {
                lane.fill(0.0);
            }
        }
    }
}

/// A batch of `N` square patches `[N, P, P, d]` with 1-based class labels.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub patches: Array4<f32>,
    pub labels: Vec<u16>,
    pub patch_size: usize,
}

impl PatchBatch {
    pub fn new(patches: Array4<f32>, labels: Vec<u16>) -> Result<Self> {
        let (n, p, p2, _) = patches.dim();
        if p != p2 || p % 2 == 0 {
            return Err(Error::invalid(format!(
                "patches must be square with odd side, got {p}×{p2}"
            )));
        }
        if n != labels.len() {
            return Err(Error::shape(format!(
                "{n} patches but {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l == 0) {
            return Err(Error::invalid("patch labels must be ≥ 1"));
        }
        Ok(Self {
            patch_size: p,
            patches,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn band_count(&self) -> usize {
        self.patches.dim().3
    }

    /// Sub-batch at the given indices (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> PatchBatch {
        PatchBatch {
            patches: self.patches.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            patch_size: self.patch_size,
        }
    }

    /// Patches as an `f64` dynamic array for the tape.
    pub fn to_f64(&self) -> ArrayD<f64> {
        self.patches.mapv(|v| v as f64).into_dyn()
    }

    /// Zero-based label vector (class 1 → 0) for loss computations.
    pub fn zero_based_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize - 1).collect()
    }
}

// ---------------------------------------------------------------------------
// Cube directory I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CubeMeta {
    height: usize,
    width: usize,
    bands: usize,
    classes: usize,
    dtype: String,
    byte_order: String,
}

/// Write a cube directory (`meta.json`, `bands.bin`, `labels.bin`).
pub fn save_cube(cube: &RasterCube, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CubeMeta {
        height: cube.height(),
        width: cube.width(),
        bands: cube.band_count(),
        classes: cube.class_count,
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;

    let mut bands = Vec::with_capacity(cube.bands.len() * 4);
    for &v in cube.bands.as_standard_layout().iter() {
        bands.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(dir.join("bands.bin"))?.write_all(&bands)?;

    let mut labels = Vec::with_capacity(cube.labels.len() * 2);
    for &l in cube.labels.as_standard_layout().iter() {
        labels.extend_from_slice(&l.to_le_bytes());
    }
    fs::File::create(dir.join("labels.bin"))?.write_all(&labels)?;
    Ok(())
}

/// Load a cube directory and min-max normalize each band to [0,1]. The label
/// raster is loaded unmodified.
pub fn load_cube(dir: &Path) -> Result<RasterCube> {
    let meta_raw = fs::read(dir.join("meta.json"))
        .map_err(|e| Error::MalformedCube(format!("missing meta.json in {dir:?}: {e}")))?;
    let meta: CubeMeta = serde_json::from_slice(&meta_raw)
        .map_err(|e| Error::MalformedCube(format!("bad meta.json: {e}")))?;
    if meta.dtype != "f32" || meta.byte_order != "little" {
        return Err(Error::MalformedCube(format!(
            "unsupported dtype/byte_order {}/{}",
            meta.dtype, meta.byte_order
        )));
    }
    let (h, w, d) = (meta.height, meta.width, meta.bands);

    let mut band_bytes = Vec::new();
    fs::File::open(dir.join("bands.bin"))?.read_to_end(&mut band_bytes)?;
    if band_bytes.len() != h * w * d * 4 {
        return Err(Error::shape(format!(
            "bands.bin holds {} values but meta declares {h}×{w}×{d}",
            band_bytes.len() / 4
        )));
    }
    let mut label_bytes = Vec::new();
    fs::File::open(dir.join("labels.bin"))?.read_to_end(&mut label_bytes)?;
    if label_bytes.len() != h * w * 2 {
        return Err(Error::shape(format!(
            "labels.bin holds {} values but meta declares {h}×{w}",
            label_bytes.len() / 2
        )));
    }

    let bands_vec: Vec<f32> = band_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if bands_vec.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedCube("non-finite value in bands.bin".into()));
    }
    let labels_vec: Vec<u16> = label_bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let bands = Array3::from_shape_vec((h, w, d), bands_vec)
        .map_err(|e| Error::shape(e.to_string()))?;
    let labels = Array2::from_shape_vec((h, w), labels_vec)
        .map_err(|e| Error::shape(e.to_string()))?;
    let mut cube = RasterCube::new(bands, labels, meta.classes)?;
    cube.normalize_bands();
    Ok(cube)
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// Mirror index for reflection padding (edge pixel not duplicated).
#[inline]
pub(crate) fn mirror(i: isize, len: usize) -> usize {
    let n = len as isize;
    let m = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&m));
    m as usize
}

/// Copy the patch centered at (row, col) into `out` (length P·P·d).
pub(crate) fn copy_patch(cube: &RasterCube, row: usize, col: usize, patch: usize, out: &mut [f32]) {
    let (h, w, d) = cube.bands.dim();
    let off = (patch / 2) as isize;
    let bands = cube.bands.as_slice().expect("contiguous bands");
    let mut k = 0usize;
    for di in -off..=off {
        let r = mirror(row as isize + di, h);
        for dj in -off..=off {
            let c = mirror(col as isize + dj, w);
            let src = (r * w + c) * d;
            out[k..k + d].copy_from_slice(&bands[src..src + d]);
            k += d;
        }
    }
}

/// Validate a patch size against a scene.
fn validate_patch_size(cube: &RasterCube, patch_size: usize) -> Result<()> {
    if patch_size % 2 == 0 {
        return Err(Error::invalid(format!("patch size {patch_size} is even")));
    }
    let min_dim = cube.height().min(cube.width());
    if patch_size > 2 * min_dim {
        return Err(Error::invalid(format!(
            "patch size {patch_size} exceeds twice the smallest scene dimension {min_dim}"
        )));
    }
    Ok(())
}

/// Extract one patch per labeled pixel in row-major order; borders are
/// mirror-padded, labels come from the center pixel.
pub fn extract_patches(cube: &RasterCube, patch_size: usize) -> Result<PatchBatch> {
    let positions: Vec<(usize, usize)> = labeled_positions(cube);
    extract_patches_at(cube, patch_size, &positions).map(|patches| PatchBatch {
        patches,
        labels: positions.iter().map(|&(r, c)| cube.labels[[r, c]]).collect(),
        patch_size,
    })
}

/// Labeled pixel coordinates in row-major order.
pub fn labeled_positions(cube: &RasterCube) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..cube.height() {
        for c in 0..cube.width() {
            if cube.labels[[r, c]] > 0 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Extract patches at explicit positions (used for scene-wide inference).
pub fn extract_patches_at(
    cube: &RasterCube,
    patch_size: usize,
    positions: &[(usize, usize)],
) -> Result<Array4<f32>> {
    validate_patch_size(cube, patch_size)?;
    let d = cube.band_count();
    let plane = patch_size * patch_size * d;
    let mut out = Array4::zeros((positions.len(), patch_size, patch_size, d));
    if positions.is_empty() {
        return Ok(out);
    }
    out.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(plane)
        .zip(positions.par_iter())
        .for_each(|(slot, &(r, c))| copy_patch(cube, r, c, patch_size, slot));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Split and augmentation
// ---------------------------------------------------------------------------

/// Stratified train/validation split, deterministic under `seed`. Classes
/// with fewer than two samples go entirely to training (with a warning);
/// otherwise each class contributes `round(ratio·n)` samples to training,
/// keeping at least one sample on each side.
pub fn split_train_val(
    batch: &PatchBatch,
    ratio: f64,
    seed: u64,
) -> Result<(PatchBatch, PatchBatch)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0,1)")));
    }
    let max_class = batch.labels.iter().copied().max().unwrap_or(0);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in 1..=max_class {
        let mut members: Vec<usize> = (0..batch.len())
            .filter(|&i| batch.labels[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            log::warn!(
                "class {class} has {} sample(s); keeping all in training",
                members.len()
            );
            train_idx.extend_from_slice(&members);
            continue;
        }
        let mut rng = rng::stream(seed, &[tags::SPLIT, class as u64]);
        shuffle(&mut members, &mut rng);
        let n_train =
            ((ratio * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        val_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((batch.select(&train_idx), batch.select(&val_idx)))
}

/// Fisher-Yates shuffle driven by a deterministic stream.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Replicate a batch `factor` times; every replica is independently flipped
/// (horizontal/vertical, when enabled) and scaled by a per-patch illumination
/// factor drawn from `Normal(1, radiation_noise_sigma)`, then clipped to
/// [0,1]. Output order is replica-major.
pub fn augment(
    batch: &PatchBatch,
    flips: bool,
    radiation_noise_sigma: f64,
    factor: usize,
    seed: u64,
) -> Result<PatchBatch> {
    if factor < 1 {
        return Err(Error::invalid("augmentation factor must be ≥ 1"));
    }
    if radiation_noise_sigma < 0.0 {
        return Err(Error::invalid("radiation noise sigma must be ≥ 0"));
    }
    let (n, p, _, d) = batch.patches.dim();
    let plane = p * p * d;
    let mut out = Array4::zeros((factor * n, p, p, d));
    let src = batch.patches.as_slice().expect("contiguous");
    out.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(row, slot)| {
            let (rep, i) = (row / n, row % n);
            let sample = &src[i * plane..(i + 1) * plane];
            let mut rng = rng::stream(seed, &[tags::AUGMENT, rep as u64, i as u64]);
            let (hflip, vflip) = if flips {
                (rng.random::<bool>(), rng.random::<bool>())
            } else {
                (false, false)
            };
            let illum = if radiation_noise_sigma > 0.0 {
                Normal::new(1.0, radiation_noise_sigma)
                    .expect("valid sigma")
                    .sample(&mut rng)
            } else {
                1.0
            };
            for r in 0..p {
                let sr = if vflip { p - 1 - r } else { r };
                for c in 0..p {
                    let sc = if hflip { p - 1 - c } else { c };
                    let from = (sr * p + sc) * d;
                    let to = (r * p + c) * d;
                    for b in 0..d {
                        let v = sample[from + b] as f64 * illum;
                        slot[to + b] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        });
    let labels: Vec<u16> = (0..factor)
        .flat_map(|_| batch.labels.iter().copied())
        .collect();
    Ok(PatchBatch {
        patches: out,
        labels,
        patch_size: p,
    })
}

// ---------------------------------------------------------------------------
// Synthetic scene pairs
// ---------------------------------------------------------------------------

/// Recipe for a seeded synthetic source/target scene pair with a controlled
/// sensor-style shift (per-band affine gain/offset, reflectance exponent,
/// fresh noise).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub band_count: usize,
    pub scene: (usize, usize),
    pub blobs_per_class: usize,
    /// Per-band multiplicative gain applied to the target copy.
    pub gain: Vec<f64>,
    /// Per-band additive offset applied to the target copy.
    pub offset: Vec<f64>,
    /// Reflectance exponent applied to the target copy.
    pub exponent: f64,
    /// Standard deviation of additive per-pixel noise (both scenes).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Benchmark default: 5 classes, 16 bands, gain ramp up to 1.3×,
    /// exponent 1.2.
    pub fn with_seed(seed: u64) -> Self {
        let band_count = 16;
        let gain = (0..band_count)
            .map(|b| 1.0 + 0.3 * b as f64 / (band_count - 1) as f64)
            .collect();
        Self {
            class_count: 5,
            band_count,
            scene: (40, 40),
            blobs_per_class: 4,
            gain,
            offset: vec![0.0; band_count],
            exponent: 1.2,
            noise_sigma: 0.02,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("synthetic spec needs at least 2 classes"));
        }
        if self.band_count == 0 || self.scene.0 == 0 || self.scene.1 == 0 {
            return Err(Error::invalid("synthetic spec has empty dimensions"));
        }
        if self.gain.len() != self.band_count || self.offset.len() != self.band_count {
            return Err(Error::invalid("gain/offset length must equal band count"));
        }
        if self.gain.iter().any(|&g| g <= 0.0) {
            return Err(Error::invalid("every band gain must be positive"));
        }
        if self.exponent <= 0.0 {
            return Err(Error::invalid("exponent must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be ≥ 0"));
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

/// Generate an aligned (source, target) scene pair. Both scenes share blob
/// geometry and class signatures; the target applies the spec's per-band
/// gain/offset, reflectance exponent, and fresh noise.
pub fn synth_pair(spec: &SyntheticSpec) -> Result<(RasterCube, RasterCube)> {
    spec.validate()?;
    let (h, w) = spec.scene;
    let (c, d) = (spec.class_count, spec.band_count);
    let mut rng = rng::stream(spec.seed, &[tags::SYNTH]);

    // Class signatures: Gaussian bump over the band axis, plus jitter.
    // Row 0 is the unlabeled background. Kept below ~0.72 so a 1.3× gain
    // stays inside [0,1] without clipping.
    let mut signatures = Array2::<f64>::zeros((c + 1, d));
    for b in 0..d {
        signatures[[0, b]] = 0.16 + 0.04 * b as f64 / d as f64;
    }
    for class in 1..=c {
        let amp = 0.28 + 0.26 * rng.random::<f64>();
        let center =
            d as f64 * (class as f64 - 0.5 + 0.3 * (rng.random::<f64>() - 0.5)) / c as f64;
        let width = d as f64 * (0.10 + 0.08 * rng.random::<f64>());
        for b in 0..d {
            let z = (b as f64 - center) / width;
            let jitter = 0.04 * (rng.random::<f64>() - 0.5);
            signatures[[class, b]] =
                (0.15 + amp * (-0.5 * z * z).exp() + jitter).clamp(0.02, 0.72);
        }
    }

    // Blob geometry: rotated ellipses painted per class; later classes
    // overwrite earlier ones where they overlap.
    let mut labels = Array2::<u16>::zeros((h, w));
    let rmin = (h.min(w) as f64 / 16.0).max(2.0);
    let rmax = (h.min(w) as f64 / 8.0).max(3.0);
    for class in 1..=c {
        for _ in 0..spec.blobs_per_class {
            let cy = rng.random::<f64>() * h as f64;
            let cx = rng.random::<f64>() * w as f64;
            let ra = rmin + (rmax - rmin) * rng.random::<f64>();
            let rb = rmin + (rmax - rmin) * rng.random::<f64>();
            let theta = std::f64::consts::PI * rng.random::<f64>();
            let (st, ct) = theta.sin_cos();
            for r in 0..h {
                for col in 0..w {
                    let dy = r as f64 + 0.5 - cy;
                    let dx = col as f64 + 0.5 - cx;
                    let u = (dx * ct + dy * st) / ra;
                    let v = (-dx * st + dy * ct) / rb;
                    if u * u + v * v <= 1.0 {
                        labels[[r, col]] = class as u16;
                    }
                }
            }
        }
    }

    let clean = |r: usize, col: usize, b: usize| signatures[[labels[[r, col]] as usize, b]];

    let mut sd = Array3::<f32>::zeros((h, w, d));
    let mut td = Array3::<f32>::zeros((h, w, d));
    let mut sd_noise = rng::stream(spec.seed, &[tags::SYNTH, 1]);
    let mut td_noise = rng::stream(spec.seed, &[tags::SYNTH, 2]);
    let normal = Normal::new(0.0f64, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    for r in 0..h {
        for col in 0..w {
            for b in 0..d {
                let base = clean(r, col, b);
                let n1 = if spec.noise_sigma > 0.0 {
                    normal.sample(&mut sd_noise)
                } else {
                    0.0
                };
                sd[[r, col, b]] = (base + n1).clamp(0.0, 1.0) as f32;

                let shifted = (spec.gain[b] * base + spec.offset[b]).max(0.0);
                let curved = if spec.exponent == 1.0 {
                    shifted
                } else {
                    shifted.powf(spec.exponent)
                };
                let n2 = if spec.noise_sigma > 0.0 {
                    normal.sample(&mut td_noise)
                } else {
                    0.0
                };
                td[[r, col, b]] = (curved + n2).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let sd_cube = RasterCube::new(sd, labels.clone(), c)?;
    let td_cube = RasterCube::new(td, labels, c)?;
    Ok((sd_cube, td_cube))
}
