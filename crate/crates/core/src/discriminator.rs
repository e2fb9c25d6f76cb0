//! Discriminator: shared feature extractor, classification head, and
//! projection head.
//!
//! The extractor stacks two conv→relu→maxpool blocks (13→6→3 spatially) and
//! two fully connected layers; the classification head is a single affine
//! map to class probabilities, the projection head a single affine map to a
//! unit-normalized embedding used by the contrastive objectives.

use crate::autodiff::{Tape, Var};
use crate::data::PatchBatch;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::PATCH_SIZE;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use rand::Rng;

/// Architecture widths. The defaults are deliberately small (two conv blocks,
/// shallow heads) to keep desk-scale training cheap; tests may shrink them
/// further.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscArch {
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

impl Default for DiscArch {
    fn default() -> Self {
        Self {
            conv1: 64,
            conv2: 128,
            fc1: 256,
            feature_dim: 128,
            projection_dim: 64,
        }
    }
}

/// Trainable discriminator tensors: extractor (θ_f), classification head
/// (θ_C), and projection head (θ_P).
#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    pub d: usize,
    pub class_count: usize,
    pub arch: DiscArch,
    pub conv1_w: ArrayD<f64>,
    pub conv1_b: ArrayD<f64>,
    pub conv2_w: ArrayD<f64>,
    pub conv2_b: ArrayD<f64>,
    pub fc1_w: ArrayD<f64>,
    pub fc1_b: ArrayD<f64>,
    pub fc2_w: ArrayD<f64>,
    pub fc2_b: ArrayD<f64>,
    pub cls_w: ArrayD<f64>,
    pub cls_b: ArrayD<f64>,
    pub proj_w: ArrayD<f64>,
    pub proj_b: ArrayD<f64>,
}

fn uniform(rng: &mut impl Rng, bound: f64, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

fn kaiming(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f64> {
    uniform(rng, (6.0 / fan_in as f64).sqrt(), shape)
}

impl DiscriminatorParams {
    pub fn init(d: usize, class_count: usize, seed: u64) -> Self {
        Self::init_with_arch(d, class_count, DiscArch::default(), seed)
    }

    pub fn init_with_arch(d: usize, class_count: usize, arch: DiscArch, seed: u64) -> Self {
        assert!(d >= 1 && class_count >= 1);
        let mut r = rng::stream(seed, &[tags::INIT_DISCRIMINATOR]);
        let flat = arch.conv2 * 3 * 3;
        Self {
            d,
            class_count,
            arch,
            conv1_w: kaiming(&mut r, 9 * d, &[9 * d, arch.conv1]),
            conv1_b: ArrayD::zeros(IxDyn(&[arch.conv1])),
            conv2_w: kaiming(&mut r, 9 * arch.conv1, &[9 * arch.conv1, arch.conv2]),
            conv2_b: ArrayD::zeros(IxDyn(&[arch.conv2])),
            fc1_w: kaiming(&mut r, flat, &[flat, arch.fc1]),
            fc1_b: ArrayD::zeros(IxDyn(&[arch.fc1])),
            fc2_w: kaiming(&mut r, arch.fc1, &[arch.fc1, arch.feature_dim]),
            fc2_b: ArrayD::zeros(IxDyn(&[arch.feature_dim])),
            cls_w: kaiming(&mut r, arch.feature_dim, &[arch.feature_dim, class_count]),
            cls_b: ArrayD::zeros(IxDyn(&[class_count])),
            proj_w: kaiming(
                &mut r,
                arch.feature_dim,
                &[arch.feature_dim, arch.projection_dim],
            ),
            proj_b: ArrayD::zeros(IxDyn(&[arch.projection_dim])),
        }
    }

    /// Named tensors in a fixed order (checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<(&'static str, &ArrayD<f64>)> {
        vec![
            ("disc.conv1_w", &self.conv1_w),
            ("disc.conv1_b", &self.conv1_b),
            ("disc.conv2_w", &self.conv2_w),
            ("disc.conv2_b", &self.conv2_b),
            ("disc.fc1_w", &self.fc1_w),
            ("disc.fc1_b", &self.fc1_b),
            ("disc.fc2_w", &self.fc2_w),
            ("disc.fc2_b", &self.fc2_b),
            ("disc.cls_w", &self.cls_w),
            ("disc.cls_b", &self.cls_b),
            ("disc.proj_w", &self.proj_w),
            ("disc.proj_b", &self.proj_b),
        ]
    }

    /// Mutable tensors in [`Self::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.proj_w,
            &mut self.proj_b,
        ]
    }

    /// Register every tensor on a tape (tracked when training the
    /// discriminator).
    pub fn as_vars(&self, tape: &Tape, tracked: bool) -> DiscVars {
        let reg = |a: &ArrayD<f64>| {
            if tracked {
                tape.param(a.clone())
            } else {
                tape.leaf(a.clone())
            }
        };
        DiscVars {
            conv1_w: reg(&self.conv1_w),
            conv1_b: reg(&self.conv1_b),
            conv2_w: reg(&self.conv2_w),
            conv2_b: reg(&self.conv2_b),
            fc1_w: reg(&self.fc1_w),
            fc1_b: reg(&self.fc1_b),
            fc2_w: reg(&self.fc2_w),
            fc2_b: reg(&self.fc2_b),
            cls_w: reg(&self.cls_w),
            cls_b: reg(&self.cls_b),
            proj_w: reg(&self.proj_w),
            proj_b: reg(&self.proj_b),
        }
    }
}

/// Tape handles for the discriminator tensors.
pub struct DiscVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl DiscVars {
    /// Handles in [`DiscriminatorParams::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
            self.cls_w,
            self.cls_b,
            self.proj_w,
            self.proj_b,
        ]
    }

    pub fn from_slice(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 12, "discriminator has 12 tensors");
        DiscVars {
            conv1_w: vars[0],
            conv1_b: vars[1],
            conv2_w: vars[2],
            conv2_b: vars[3],
            fc1_w: vars[4],
            fc1_b: vars[5],
            fc2_w: vars[6],
            fc2_b: vars[7],
            cls_w: vars[8],
            cls_b: vars[9],
            proj_w: vars[10],
            proj_b: vars[11],
        }
    }
}

/// Class probabilities and argmax labels for a batch.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `[N, C]`, each row on the probability simplex.
    pub probs: Array2<f64>,
    /// 1-based argmax class per sample.
    pub labels: Vec<u16>,
}

impl Predictions {
    pub fn from_probs(probs: Array2<f64>) -> Self {
        let labels = probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u16 + 1
            })
            .collect();
        Self { probs, labels }
    }
}

/// Sample provenance for contrastive set construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    Source,
    Extended,
    Intermediate,
}

/// Unit-norm projection embeddings with labels and domain provenance.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    /// `[N, projection_dim]`, rows have unit L2 norm.
    pub vectors: Array2<f64>,
    /// 1-based class labels.
    pub labels: Vec<u16>,
    /// Domain tag per sample.
    pub domains: Vec<Domain>,
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Feature extractor forward: `[N,13,13,d]` → `[N, feature_dim]`.
pub fn embed_on_tape(tape: &Tape, x: Var, disc: &DiscVars) -> Var {
    let sh = tape.shape(x);
    assert_eq!(
        (sh[1], sh[2]),
        (PATCH_SIZE, PATCH_SIZE),
        "extractor expects {PATCH_SIZE}×{PATCH_SIZE} patches"
    );
    let n = sh[0];
    let c1 = tape.max_pool2(tape.relu(tape.conv2d_same(x, disc.conv1_w, disc.conv1_b, 3)));
    let c2 = tape.max_pool2(tape.relu(tape.conv2d_same(c1, disc.conv2_w, disc.conv2_b, 3)));
    let sh2 = tape.shape(c2);
    let flat = tape.reshape(c2, &[n, sh2[1] * sh2[2] * sh2[3]]);
    let h = tape.relu(tape.linear(flat, disc.fc1_w, disc.fc1_b));
    tape.linear(h, disc.fc2_w, disc.fc2_b)
}

/// Classification head: features → class probabilities.
pub fn classify_on_tape(tape: &Tape, features: Var, disc: &DiscVars) -> Var {
    let logits = tape.linear(features, disc.cls_w, disc.cls_b);
    tape.softmax_rows(logits)
}

/// Projection head: features → unit-normalized embeddings.
pub fn project_on_tape(tape: &Tape, features: Var, disc: &DiscVars) -> Var {
    let raw = tape.linear(features, disc.proj_w, disc.proj_b);
    tape.l2_normalize_rows(raw)
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

fn check_patch_batch(batch: &PatchBatch, params: &DiscriminatorParams) -> Result<()> {
    if batch.patch_size != PATCH_SIZE {
        return Err(Error::shape(format!(
            "discriminator expects {PATCH_SIZE}×{PATCH_SIZE} patches, got {}",
            batch.patch_size
        )));
    }
    if batch.band_count() != params.d {
        return Err(Error::BandMismatch {
            expected: params.d,
            got: batch.band_count(),
        });
    }
    Ok(())
}

/// Deterministic feature extraction: `[N, feature_dim]`.
pub fn embed(batch: &PatchBatch, params: &DiscriminatorParams) -> Result<Array2<f64>> {
    check_patch_batch(batch, params)?;
    let tape = Tape::new();
    let disc = params.as_vars(&tape, false);
    let x = tape.leaf(batch.to_f64());
    let f = embed_on_tape(&tape, x, &disc);
    Ok(tape
        .value(f)
        .into_dimensionality()
        .expect("features are 2-D"))
}

/// Softmax class probabilities for extracted features.
pub fn classify(features: ArrayView2<f64>, params: &DiscriminatorParams) -> Result<Predictions> {
    if features.dim().1 != params.arch.feature_dim {
        return Err(Error::shape(format!(
            "classify expects {} features, got {}",
            params.arch.feature_dim,
            features.dim().1
        )));
    }
    let tape = Tape::new();
    let disc = params.as_vars(&tape, false);
    let f = tape.leaf(features.to_owned().into_dyn());
    let p = classify_on_tape(&tape, f, &disc);
    Ok(Predictions::from_probs(
        tape.value(p).into_dimensionality().expect("probs are 2-D"),
    ))
}

/// Unit-normalized projections for extracted features. Labels/domains are
/// attached by the caller.
pub fn project(
    features: ArrayView2<f64>,
    params: &DiscriminatorParams,
    labels: Vec<u16>,
    domains: Vec<Domain>,
) -> Result<EmbeddingBatch> {
    if features.dim().1 != params.arch.feature_dim {
        return Err(Error::shape(format!(
            "project expects {} features, got {}",
            params.arch.feature_dim,
            features.dim().1
        )));
    }
    if labels.len() != features.dim().0 || domains.len() != features.dim().0 {
        return Err(Error::shape("project: labels/domains must match rows"));
    }
    let tape = Tape::new();
    let disc = params.as_vars(&tape, false);
    let f = tape.leaf(features.to_owned().into_dyn());
    let z = project_on_tape(&tape, f, &disc);
    Ok(EmbeddingBatch {
        vectors: tape.value(z).into_dimensionality().expect("2-D"),
        labels,
        domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_gradients, CheckOpts};
    use ndarray::{Array4, Axis};

    fn tiny_arch() -> DiscArch {
        DiscArch {
            conv1: 4,
            conv2: 6,
            fc1: 10,
            feature_dim: 8,
            projection_dim: 5,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> PatchBatch {
        let mut r = rng::stream(seed, &[66]);
        let patches =
            Array4::from_shape_fn((n, PATCH_SIZE, PATCH_SIZE, d), |_| r.random::<f32>());
        PatchBatch::new(patches, (0..n).map(|i| (i % 2 + 1) as u16).collect()).unwrap()
    }

    #[test]
    fn embed_output_shape() {
        let params = DiscriminatorParams::init_with_arch(3, 2, tiny_arch(), 0);
        let f = embed(&batch(4, 3, 1), &params).unwrap();
        assert_eq!(f.dim(), (4, 8));
    }

    #[test]
    fn embed_zero_weights_zero_features() {
        let mut params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 0);
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
        let f = embed(&batch(3, 2, 2), &params).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_patches_identical_features() {
        let params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 3);
        let mut b = batch(2, 2, 4);
        let first = b.patches.index_axis(Axis(0), 0).to_owned();
        b.patches.index_axis_mut(Axis(0), 1).assign(&first);
        let f = embed(&b, &params).unwrap();
        assert_eq!(f.row(0).to_vec(), f.row(1).to_vec());
    }

    #[test]
    fn embed_rejects_wrong_patch_size() {
        let params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 5);
        let patches = Array4::from_elem((2, 9, 9, 2), 0.1f32);
        let b = PatchBatch::new(patches, vec![1, 2]).unwrap();
        assert!(matches!(embed(&b, &params), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn embed_rejects_band_mismatch() {
        let params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 5);
        assert!(matches!(
            embed(&batch(2, 3, 6), &params),
            Err(Error::BandMismatch { .. })
        ));
    }

    #[test]
    fn classify_zero_weights_uniform_probs() {
        let mut params = DiscriminatorParams::init_with_arch(2, 4, tiny_arch(), 7);
        params.cls_w.fill(0.0);
        params.cls_b.fill(0.0);
        let features = Array2::from_elem((3, 8), 0.3);
        let preds = classify(features.view(), &params).unwrap();
        assert!(preds.probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn classify_hand_softmax() {
        // logits (2,0) → probs (e², 1)/(e² + 1) ≈ (0.8808, 0.1192)
        let mut params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 8);
        params.cls_w.fill(0.0);
        params.cls_b = ndarray::array![2.0, 0.0].into_dyn();
        let features = Array2::zeros((1, 8));
        let preds = classify(features.view(), &params).unwrap();
        assert!((preds.probs[[0, 0]] - 0.8807970779778823).abs() < 1e-12);
        assert!((preds.probs[[0, 1]] - 0.11920292202211755).abs() < 1e-12);
        assert_eq!(preds.labels, vec![1]);
    }

    #[test]
    fn classify_shift_invariant() {
        let params = DiscriminatorParams::init_with_arch(2, 3, tiny_arch(), 9);
        let features = Array2::from_shape_fn((2, 8), |(i, j)| (i + j) as f64 * 0.1);
        let p1 = classify(features.view(), &params).unwrap();
        let mut shifted = params.clone();
        shifted.cls_b.mapv_inplace(|b| b + 7.5);
        let p2 = classify(features.view(), &shifted).unwrap();
        for (a, b) in p1.probs.iter().zip(p2.probs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_rows_sum_to_one() {
        let params = DiscriminatorParams::init_with_arch(3, 5, tiny_arch(), 10);
        let f = embed(&batch(6, 3, 11), &params).unwrap();
        let preds = classify(f.view(), &params).unwrap();
        for row in preds.probs.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn project_rows_are_unit_norm_and_scale_invariant() {
        let params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 12);
        let f = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.05 - 0.4);
        let scaled = f.mapv(|v| v * 10.0);
        let mut zero_bias = params.clone();
        zero_bias.proj_b.fill(0.0);
        let e1 = project(f.view(), &zero_bias, vec![1, 1, 2], vec![Domain::Source; 3]).unwrap();
        let e2 =
            project(scaled.view(), &zero_bias, vec![1, 1, 2], vec![Domain::Source; 3]).unwrap();
        for row in e1.vectors.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        for (a, b) in e1.vectors.iter().zip(e2.vectors.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn project_zero_row_falls_back_to_basis() {
        let mut params = DiscriminatorParams::init_with_arch(2, 2, tiny_arch(), 13);
        params.proj_w.fill(0.0);
        params.proj_b.fill(0.0);
        let f = Array2::from_elem((2, 8), 0.5);
        let e = project(f.view(), &params, vec![1, 2], vec![Domain::Source; 2]).unwrap();
        assert_eq!(e.vectors.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let params = DiscriminatorParams::init_with_arch(2, 3, tiny_arch(), 14);
        let b = batch(5, 2, 15);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = b.select(&perm);
        let f = embed(&b, &params).unwrap();
        let fp = embed(&permuted, &params).unwrap();
        for (out_row, &src) in perm.iter().enumerate() {
            for j in 0..f.dim().1 {
                assert!((fp[[out_row, j]] - f[[src, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_classify_cross_entropy_gradients() {
        // small end-to-end gradient check through conv/pool/fc/softmax
        let arch = DiscArch {
            conv1: 2,
            conv2: 3,
            fc1: 5,
            feature_dim: 4,
            projection_dim: 3,
        };
        let params = DiscriminatorParams::init_with_arch(2, 2, arch, 16);
        let b = batch(2, 2, 17);
        let x = b.to_f64();
        let labels = b.zero_based_labels();
        let mut inputs = vec![x];
        inputs.extend(params.tensors().iter().map(|(_, t)| (*t).clone()));
        let report = check_gradients(
            |t, vs| {
                let disc = DiscVars::from_slice(&vs[1..]);
                let f = embed_on_tape(t, vs[0], &disc);
                let p = classify_on_tape(t, f, &disc);
                let picked = t.select_per_row(p, &labels);
                let logp = t.ln_clamped(picked, 1e-12);
                t.neg(t.mean_all(logp))
            },
            &inputs,
            CheckOpts {
                max_per_tensor: 60,
                ..CheckOpts::default()
            },
        );
        assert!(report.ok(), "worst rel {}", report.worst_rel);
    }
}
