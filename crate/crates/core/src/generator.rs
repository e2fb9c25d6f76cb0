//! Domain-expansion generator.
//!
//! Maps a source-domain patch batch to an extended-domain batch through three
//! flows, concatenated and decoded back to patch space:
//!
//! - spatial flow: 1×1 reduction to 3 channels, style randomization against a
//!   random minibatch partner (adaptive mix of channel means/stds), expansion
//!   to `d_se` channels;
//! - spectral flow: full-patch convolution down to a `d_se` spectral vector,
//!   content replacement from a random partner while keeping own statistics,
//!   deconvolution back to patch size;
//! - morph flow: 1×1 reduction to a single plane, learnable opening/closing
//!   branches built from dilation/erosion layers, top-hat and black-hat
//!   residuals, and noise-driven AdaIN over the four template maps.
//!
//! The intermediate domain is a per-sample convex mix of source and extended
//! patches.

use crate::autodiff::{Tape, Var};
use crate::data::PatchBatch;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::PATCH_SIZE;
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, IxDyn};
use rand::Rng;

/// Stabilizer added under the square root in every standard deviation.
pub const STD_EPSILON: f64 = 1e-5;

/// Dimension of the noise vector feeding the morph AdaIN affine maps.
pub const NOISE_DIM: usize = 64;

/// Per-channel style statistics of a feature map.
#[derive(Clone, Debug)]
pub struct StyleStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub epsilon: f64,
}

/// Channel-wise mean and epsilon-stabilized standard deviation over the
/// spatial axes of an `[H, W, C]` map.
pub fn channel_stats(z: ArrayView3<f64>) -> StyleStats {
    let (h, w, c) = z.dim();
    let count = (h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut std = Array1::zeros(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for r in 0..h {
            for col in 0..w {
                sum += z[[r, col, ch]];
            }
        }
        let mu = sum / count;
        let mut var = 0.0;
        for r in 0..h {
            for col in 0..w {
                let d = z[[r, col, ch]] - mu;
                var += d * d;
            }
        }
        mean[ch] = mu;
        std[ch] = (var / count + STD_EPSILON).sqrt();
    }
    StyleStats {
        mean,
        std,
        epsilon: STD_EPSILON,
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Flow switches and the printed-formula compatibility flag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenOptions {
    /// Replace both semantic flows with zeros (decoder width unchanged).
    pub no_semantic: bool,
    /// Replace the morph template channels with zeros.
    pub no_morph: bool,
    /// Use the spatial-randomization formula exactly as printed (scale by the
    /// mixed mean, shift by the mixed std) instead of the conventional
    /// scale-by-std/shift-by-mean roles.
    pub spar_verbatim_eq8: bool,
}

/// All trainable generator tensors. Shapes are fixed by the band count `d`
/// and the semantic embedding width `d_se`.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub d: usize,
    pub d_se: usize,
    /// Unconstrained scalar; the mixing coefficient is `sigmoid(alpha_raw)`,
    /// keeping it inside (0,1).
    pub alpha_raw: ArrayD<f64>,
    pub spatial_reduce_w: ArrayD<f64>,
    pub spatial_reduce_b: ArrayD<f64>,
    pub spa_expand_w: ArrayD<f64>,
    pub spa_expand_b: ArrayD<f64>,
    pub spectral_compress_w: ArrayD<f64>,
    pub spectral_compress_b: ArrayD<f64>,
    pub spe_expand_w: ArrayD<f64>,
    pub spe_expand_b: ArrayD<f64>,
    pub morph_reduce_w: ArrayD<f64>,
    pub morph_reduce_b: ArrayD<f64>,
    /// Structural elements, all 3×3, none shared: opening branch
    /// [dil, ero, dil, ero] then closing branch [ero, dil, ero, dil].
    pub morph_elems: Vec<ArrayD<f64>>,
    pub noise_scale_w: ArrayD<f64>,
    pub noise_scale_b: ArrayD<f64>,
    pub noise_shift_w: ArrayD<f64>,
    pub noise_shift_b: ArrayD<f64>,
    pub dec1_w: ArrayD<f64>,
    pub dec1_b: ArrayD<f64>,
    pub dec2_w: ArrayD<f64>,
    pub dec2_b: ArrayD<f64>,
    pub dec3_w: ArrayD<f64>,
    pub dec3_b: ArrayD<f64>,
}

const MORPH_ELEM_NAMES: [&str; 8] = [
    "gen.morph_open_d1",
    "gen.morph_open_e1",
    "gen.morph_open_d2",
    "gen.morph_open_e2",
    "gen.morph_close_e1",
    "gen.morph_close_d1",
    "gen.morph_close_e2",
    "gen.morph_close_d2",
];

fn uniform(rng: &mut impl Rng, bound: f64, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

fn kaiming(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f64> {
    uniform(rng, (6.0 / fan_in as f64).sqrt(), shape)
}

impl GeneratorParams {
    /// Fresh parameters. `alpha_raw` starts at 0 (mixing coefficient 0.5),
    /// structural elements start in U(−0.01, 0.01), the noise-to-scale map
    /// starts with unit bias so the morph AdaIN is near identity scale.
    pub fn init(d: usize, d_se: usize, seed: u64) -> Self {
        assert!(d >= 1 && d_se >= 2, "need d ≥ 1 and d_se ≥ 2");
        let p = PATCH_SIZE;
        let mut r = rng::stream(seed, &[tags::INIT_GENERATOR]);
        let dec_in = 2 * d_se + 4;
        Self {
            d,
            d_se,
            alpha_raw: ArrayD::zeros(IxDyn(&[1])),
            spatial_reduce_w: kaiming(&mut r, d, &[d, 3]),
            spatial_reduce_b: ArrayD::zeros(IxDyn(&[3])),
            spa_expand_w: kaiming(&mut r, 3, &[3, d_se]),
            spa_expand_b: ArrayD::zeros(IxDyn(&[d_se])),
            spectral_compress_w: kaiming(&mut r, p * p * d, &[p * p * d, d_se]),
            spectral_compress_b: ArrayD::zeros(IxDyn(&[d_se])),
            spe_expand_w: kaiming(&mut r, d_se, &[d_se, p * p * d_se]),
            spe_expand_b: ArrayD::zeros(IxDyn(&[d_se])),
            morph_reduce_w: kaiming(&mut r, d, &[d, 1]),
            morph_reduce_b: ArrayD::zeros(IxDyn(&[1])),
            morph_elems: (0..8).map(|_| uniform(&mut r, 0.01, &[3, 3])).collect(),
            noise_scale_w: uniform(&mut r, 0.05, &[NOISE_DIM, 4]),
            noise_scale_b: ArrayD::ones(IxDyn(&[4])),
            noise_shift_w: uniform(&mut r, 0.05, &[NOISE_DIM, 4]),
            noise_shift_b: ArrayD::zeros(IxDyn(&[4])),
            dec1_w: kaiming(&mut r, 9 * dec_in, &[9 * dec_in, d_se]),
            dec1_b: ArrayD::zeros(IxDyn(&[d_se])),
            dec2_w: kaiming(&mut r, 9 * d_se, &[9 * d_se, d_se]),
            dec2_b: ArrayD::zeros(IxDyn(&[d_se])),
            dec3_w: kaiming(&mut r, d_se, &[d_se, d]),
            dec3_b: ArrayD::zeros(IxDyn(&[d])),
        }
    }

    /// Current mixing coefficient α = sigmoid(alpha_raw).
    pub fn alpha(&self) -> f64 {
        let x = self.alpha_raw[[0]];
        1.0 / (1.0 + (-x).exp())
    }

    /// Named tensors in a fixed order (checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<(&'static str, &ArrayD<f64>)> {
        let mut out = vec![
            ("gen.alpha_raw", &self.alpha_raw),
            ("gen.spatial_reduce_w", &self.spatial_reduce_w),
            ("gen.spatial_reduce_b", &self.spatial_reduce_b),
            ("gen.spa_expand_w", &self.spa_expand_w),
            ("gen.spa_expand_b", &self.spa_expand_b),
            ("gen.spectral_compress_w", &self.spectral_compress_w),
            ("gen.spectral_compress_b", &self.spectral_compress_b),
            ("gen.spe_expand_w", &self.spe_expand_w),
            ("gen.spe_expand_b", &self.spe_expand_b),
            ("gen.morph_reduce_w", &self.morph_reduce_w),
            ("gen.morph_reduce_b", &self.morph_reduce_b),
        ];
        for (name, elem) in MORPH_ELEM_NAMES.iter().zip(self.morph_elems.iter()) {
            out.push((name, elem));
        }
        out.extend([
            ("gen.noise_scale_w", &self.noise_scale_w),
            ("gen.noise_scale_b", &self.noise_scale_b),
            ("gen.noise_shift_w", &self.noise_shift_w),
            ("gen.noise_shift_b", &self.noise_shift_b),
            ("gen.dec1_w", &self.dec1_w),
            ("gen.dec1_b", &self.dec1_b),
            ("gen.dec2_w", &self.dec2_w),
            ("gen.dec2_b", &self.dec2_b),
            ("gen.dec3_w", &self.dec3_w),
            ("gen.dec3_b", &self.dec3_b),
        ]);
        out
    }

    /// Mutable tensors in [`Self::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut out = vec![
            &mut self.alpha_raw,
            &mut self.spatial_reduce_w,
            &mut self.spatial_reduce_b,
            &mut self.spa_expand_w,
            &mut self.spa_expand_b,
            &mut self.spectral_compress_w,
            &mut self.spectral_compress_b,
            &mut self.spe_expand_w,
            &mut self.spe_expand_b,
            &mut self.morph_reduce_w,
            &mut self.morph_reduce_b,
        ];
        out.extend(self.morph_elems.iter_mut());
        out.extend([
            &mut self.noise_scale_w,
            &mut self.noise_scale_b,
            &mut self.noise_shift_w,
            &mut self.noise_shift_b,
            &mut self.dec1_w,
            &mut self.dec1_b,
            &mut self.dec2_w,
            &mut self.dec2_b,
            &mut self.dec3_w,
            &mut self.dec3_b,
        ]);
        out
    }

    /// Register every tensor on a tape (tracked when training the generator).
    pub fn as_vars(&self, tape: &Tape, tracked: bool) -> GenVars {
        let reg = |a: &ArrayD<f64>| {
            if tracked {
                tape.param(a.clone())
            } else {
                tape.leaf(a.clone())
            }
        };
        GenVars {
            alpha_raw: reg(&self.alpha_raw),
            spatial_reduce_w: reg(&self.spatial_reduce_w),
            spatial_reduce_b: reg(&self.spatial_reduce_b),
            spa_expand_w: reg(&self.spa_expand_w),
            spa_expand_b: reg(&self.spa_expand_b),
            spectral_compress_w: reg(&self.spectral_compress_w),
            spectral_compress_b: reg(&self.spectral_compress_b),
            spe_expand_w: reg(&self.spe_expand_w),
            spe_expand_b: reg(&self.spe_expand_b),
            morph_reduce_w: reg(&self.morph_reduce_w),
            morph_reduce_b: reg(&self.morph_reduce_b),
            morph_elems: self.morph_elems.iter().map(reg).collect(),
            noise_scale_w: reg(&self.noise_scale_w),
            noise_scale_b: reg(&self.noise_scale_b),
            noise_shift_w: reg(&self.noise_shift_w),
            noise_shift_b: reg(&self.noise_shift_b),
            dec1_w: reg(&self.dec1_w),
            dec1_b: reg(&self.dec1_b),
            dec2_w: reg(&self.dec2_w),
            dec2_b: reg(&self.dec2_b),
            dec3_w: reg(&self.dec3_w),
            dec3_b: reg(&self.dec3_b),
            d_se: self.d_se,
        }
    }
}

/// Tape handles for the generator tensors, in [`GeneratorParams::tensors`]
/// order via [`GenVars::all`].
pub struct GenVars {
    pub alpha_raw: Var,
    pub spatial_reduce_w: Var,
    pub spatial_reduce_b: Var,
    pub spa_expand_w: Var,
    pub spa_expand_b: Var,
    pub spectral_compress_w: Var,
    pub spectral_compress_b: Var,
    pub spe_expand_w: Var,
    pub spe_expand_b: Var,
    pub morph_reduce_w: Var,
    pub morph_reduce_b: Var,
    pub morph_elems: Vec<Var>,
    pub noise_scale_w: Var,
    pub noise_scale_b: Var,
    pub noise_shift_w: Var,
    pub noise_shift_b: Var,
    pub dec1_w: Var,
    pub dec1_b: Var,
    pub dec2_w: Var,
    pub dec2_b: Var,
    pub dec3_w: Var,
    pub dec3_b: Var,
    pub d_se: usize,
}

impl GenVars {
    /// Handles in [`GeneratorParams::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.alpha_raw,
            self.spatial_reduce_w,
            self.spatial_reduce_b,
            self.spa_expand_w,
            self.spa_expand_b,
            self.spectral_compress_w,
            self.spectral_compress_b,
            self.spe_expand_w,
            self.spe_expand_b,
            self.morph_reduce_w,
            self.morph_reduce_b,
        ];
        out.extend(self.morph_elems.iter().copied());
        out.extend([
            self.noise_scale_w,
            self.noise_scale_b,
            self.noise_shift_w,
            self.noise_shift_b,
            self.dec1_w,
            self.dec1_b,
            self.dec2_w,
            self.dec2_b,
            self.dec3_w,
            self.dec3_b,
        ]);
        out
    }

    /// Rebuild handles from a slice in [`GeneratorParams::tensors`] order.
    pub fn from_slice(vars: &[Var], d_se: usize) -> Self {
        assert_eq!(vars.len(), 29, "generator has 29 tensors");
        GenVars {
            alpha_raw: vars[0],
            spatial_reduce_w: vars[1],
            spatial_reduce_b: vars[2],
            spa_expand_w: vars[3],
            spa_expand_b: vars[4],
            spectral_compress_w: vars[5],
            spectral_compress_b: vars[6],
            spe_expand_w: vars[7],
            spe_expand_b: vars[8],
            morph_reduce_w: vars[9],
            morph_reduce_b: vars[10],
            morph_elems: vars[11..19].to_vec(),
            noise_scale_w: vars[19],
            noise_scale_b: vars[20],
            noise_shift_w: vars[21],
            noise_shift_b: vars[22],
            dec1_w: vars[23],
            dec1_b: vars[24],
            dec2_w: vars[25],
            dec2_b: vars[26],
            dec3_w: vars[27],
            dec3_b: vars[28],
            d_se,
        }
    }
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Broadcast a per-sample per-channel `[N,C]` node over `[N,H,W,C]`.
fn bcast_nc(tape: &Tape, v: Var, n: usize, h: usize, w: usize, c: usize) -> Var {
    let r = tape.reshape(v, &[n, 1, 1, c]);
    tape.broadcast_to(r, &[n, h, w, c])
}

/// Per-sample channel statistics of `[N,H,W,C]`: mean and stabilized std,
/// both `[N,C]`.
pub fn stats_nhwc(tape: &Tape, z: Var) -> (Var, Var) {
    let sh = tape.shape(z);
    let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let mu = tape.mean_axes(z, &[1, 2]);
    let mu_b = bcast_nc(tape, mu, n, h, w, c);
    let diff = tape.sub(z, mu_b);
    let var = tape.mean_axes(tape.square(diff), &[1, 2]);
    let sigma = tape.sqrt_shifted(var, STD_EPSILON);
    (mu, sigma)
}

/// AdaIN over `[N,H,W,C]` with per-sample per-channel scale/shift `[N,C]`.
pub fn adain_nhwc(tape: &Tape, z: Var, scale: Var, shift: Var) -> Var {
    let sh = tape.shape(z);
    let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let (mu, sigma) = stats_nhwc(tape, z);
    let norm = tape.div(
        tape.sub(z, bcast_nc(tape, mu, n, h, w, c)),
        bcast_nc(tape, sigma, n, h, w, c),
    );
    tape.add(
        tape.mul(norm, bcast_nc(tape, scale, n, h, w, c)),
        bcast_nc(tape, shift, n, h, w, c),
    )
}

/// Spatial style randomization: mix own channel statistics with a minibatch
/// partner's under the adaptive coefficient, then re-style the normalized
/// map. `alpha01` is a length-1 node already in (0,1).
pub fn spatial_randomize_on_tape(
    tape: &Tape,
    z: Var,
    partner: &[usize],
    alpha01: Var,
    verbatim_eq8: bool,
) -> Var {
    let sh = tape.shape(z);
    let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let (mu, sigma) = stats_nhwc(tape, z);
    let mu_p = tape.index_rows(mu, partner);
    let sigma_p = tape.index_rows(sigma, partner);

    let a = tape.broadcast_to(alpha01, &[n, c]);
    let one_minus_a = tape.add_scalar(tape.neg(a), 1.0);
    let mu_hat = tape.add(tape.mul(a, mu), tape.mul(one_minus_a, mu_p));
    let sigma_hat = tape.add(tape.mul(a, sigma), tape.mul(one_minus_a, sigma_p));

    let norm = tape.div(
        tape.sub(z, bcast_nc(tape, mu, n, h, w, c)),
        bcast_nc(tape, sigma, n, h, w, c),
    );
    let (scale, shift) = if verbatim_eq8 {
        (mu_hat, sigma_hat) // as printed: scale by mixed mean, shift by mixed std
    } else {
        (sigma_hat, mu_hat)
    };
    tape.add(
        tape.mul(norm, bcast_nc(tape, scale, n, h, w, c)),
        bcast_nc(tape, shift, n, h, w, c),
    )
}

/// Spectral content randomization on `[N, d_se]` vectors: keep own mean/std,
/// take the partner's normalized content.
pub fn spectral_randomize_on_tape(tape: &Tape, z: Var, partner: &[usize]) -> Var {
    let sh = tape.shape(z);
    let (n, dse) = (sh[0], sh[1]);
    assert!(dse >= 2, "spectral randomization needs d_se ≥ 2");
    let mu = tape.reshape(tape.mean_axes(z, &[1]), &[n, 1]);
    let diff = tape.sub(z, tape.broadcast_to(mu, &[n, dse]));
    let var = tape.reshape(tape.mean_axes(tape.square(diff), &[1]), &[n, 1]);
    let sigma = tape.sqrt_shifted(var, STD_EPSILON);

    let z_p = tape.index_rows(z, partner);
    let mu_p = tape.index_rows(mu, partner);
    let sigma_p = tape.index_rows(sigma, partner);

    let normalized_partner = tape.div(
        tape.sub(z_p, tape.broadcast_to(mu_p, &[n, dse])),
        tape.broadcast_to(sigma_p, &[n, dse]),
    );
    tape.add(
        tape.mul(normalized_partner, tape.broadcast_to(sigma, &[n, dse])),
        tape.broadcast_to(mu, &[n, dse]),
    )
}

/// 1×1 convolution on `[N,H,W,Cin]` as a reshaped affine map.
fn conv1x1(tape: &Tape, x: Var, w: Var, b: Var) -> Var {
    let sh = tape.shape(x);
    let (n, h, wd, c) = (sh[0], sh[1], sh[2], sh[3]);
    let m = tape.shape(w)[1];
    let flat = tape.reshape(x, &[n * h * wd, c]);
    let y = tape.linear(flat, w, b);
    tape.reshape(y, &[n, h, wd, m])
}

/// The four-map morphological template of `[N,P,P]` planes: opening branch
/// (dilation→erosion, twice), closing branch (erosion→dilation, twice),
/// top-hat and black-hat residuals, concatenated as `[N,P,P,4]`.
pub fn morph_template_on_tape(tape: &Tape, zm: Var, elems: &[Var]) -> Var {
    assert_eq!(elems.len(), 8, "morph template uses 8 structural elements");
    let sh = tape.shape(zm);
    let (n, h, w) = (sh[0], sh[1], sh[2]);

    let open1 = tape.erode(tape.dilate(zm, elems[0]), elems[1]);
    let opening = tape.erode(tape.dilate(open1, elems[2]), elems[3]);
    let close1 = tape.dilate(tape.erode(zm, elems[4]), elems[5]);
    let closing = tape.dilate(tape.erode(close1, elems[6]), elems[7]);
    let top_hat = tape.sub(zm, opening);
    let black_hat = tape.sub(closing, zm);

    let plane = |v: Var| tape.reshape(v, &[n, h, w, 1]);
    tape.concat(
        &[plane(opening), plane(closing), plane(top_hat), plane(black_hat)],
        3,
    )
}

/// Morph encoder: reduce to one plane, build the template, randomize it with
/// noise-driven AdaIN. `noise` is an `[N, NOISE_DIM]` constant.
pub fn morph_encode_on_tape(tape: &Tape, x: Var, g: &GenVars, noise: Var) -> Var {
    let sh = tape.shape(x);
    let (n, h, w) = (sh[0], sh[1], sh[2]);
    let zm4 = conv1x1(tape, x, g.morph_reduce_w, g.morph_reduce_b);
    let zm = tape.reshape(zm4, &[n, h, w]);
    let template = morph_template_on_tape(tape, zm, &g.morph_elems);
    let scale = tape.linear(noise, g.noise_scale_w, g.noise_scale_b);
    let shift = tape.linear(noise, g.noise_shift_w, g.noise_shift_b);
    adain_nhwc(tape, template, scale, shift)
}

/// Per-call randomness for [`generate_ed_on_tape`]: independent partner
/// shuffles for the two semantic flows and fresh per-sample morph noise.
#[derive(Clone, Debug)]
pub struct EdRandomness {
    pub partner_spa: Vec<usize>,
    pub partner_spe: Vec<usize>,
    pub noise: Array2<f64>,
}

impl EdRandomness {
    pub fn draw(seed: u64, n: usize) -> Self {
        let mut spa: Vec<usize> = (0..n).collect();
        let mut spe: Vec<usize> = (0..n).collect();
        crate::data::shuffle(&mut spa, &mut rng::stream(seed, &[tags::SPATIAL_SHUFFLE]));
        crate::data::shuffle(&mut spe, &mut rng::stream(seed, &[tags::SPECTRAL_SHUFFLE]));
        let mut noise_rng = rng::stream(seed, &[tags::MORPH_NOISE]);
        let noise = Array2::from_shape_fn((n, NOISE_DIM), |_| {
            standard_normal(&mut noise_rng)
        });
        Self {
            partner_spa: spa,
            partner_spe: spe,
            noise,
        }
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Full generator forward on the tape: `x` is a `[N,13,13,d]` node, output
/// is the extended-domain batch in [0,1] with the same shape.
pub fn generate_ed_on_tape(
    tape: &Tape,
    x: Var,
    g: &GenVars,
    rnd: &EdRandomness,
    opts: &GenOptions,
) -> Var {
    let sh = tape.shape(x);
    let (n, p) = (sh[0], sh[1]);
    let d_se = g.d_se;
    assert_eq!(p, PATCH_SIZE, "generator expects {PATCH_SIZE}×{PATCH_SIZE} patches");
    assert!(n >= 2, "randomization pairs samples within the minibatch");

    let (spa_feat, spe_feat) = if opts.no_semantic {
        let zeros = tape.leaf(ArrayD::zeros(IxDyn(&[n, p, p, d_se])));
        (zeros, tape.leaf(ArrayD::zeros(IxDyn(&[n, p, p, d_se]))))
    } else {
        let alpha = tape.sigmoid(g.alpha_raw);
        let z_spa = conv1x1(tape, x, g.spatial_reduce_w, g.spatial_reduce_b);
        let spa_rand = spatial_randomize_on_tape(
            tape,
            z_spa,
            &rnd.partner_spa,
            alpha,
            opts.spar_verbatim_eq8,
        );
        let spa_feat = conv1x1(tape, spa_rand, g.spa_expand_w, g.spa_expand_b);

        let z_spe = tape.conv2d_valid_full(x, g.spectral_compress_w, g.spectral_compress_b);
        let spe_rand = spectral_randomize_on_tape(tape, z_spe, &rnd.partner_spe);
        let spe_flat = tape.matmul(spe_rand, g.spe_expand_w);
        let spe_map = tape.reshape(spe_flat, &[n, p, p, d_se]);
        let bias = tape.broadcast_to(g.spe_expand_b, &[n, p, p, d_se]);
        (spa_feat, tape.add(spe_map, bias))
    };

    let morph_feat = if opts.no_morph {
        tape.leaf(ArrayD::zeros(IxDyn(&[n, p, p, 4])))
    } else {
        let noise = tape.leaf(rnd.noise.clone().into_dyn());
        morph_encode_on_tape(tape, x, g, noise)
    };

    let cat = tape.concat(&[spa_feat, spe_feat, morph_feat], 3);
    let h1 = tape.relu(tape.conv2d_same(cat, g.dec1_w, g.dec1_b, 3));
    let h2 = tape.relu(tape.conv2d_same(h1, g.dec2_w, g.dec2_b, 3));
    tape.sigmoid(conv1x1(tape, h2, g.dec3_w, g.dec3_b))
}

/// Mix source and extended patches on the tape with fixed per-sample weights.
pub fn mix_on_tape(tape: &Tape, sd: Var, ed: Var, weights: &[f64]) -> Var {
    let sh = tape.shape(sd);
    let n = sh[0];
    assert_eq!(weights.len(), n);
    let w = tape.leaf(
        Array1::from_vec(weights.to_vec())
            .into_shape_with_order(IxDyn(&[n, 1, 1, 1]))
            .expect("weight shape")
            .into_dyn(),
    );
    let wb = tape.broadcast_to(w, &sh);
    let one_minus = tape.add_scalar(tape.neg(wb), 1.0);
    tape.add(tape.mul(wb, sd), tape.mul(one_minus, ed))
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

fn leaf3(tape: &Tape, z: ArrayView3<f64>) -> Var {
    let (h, w, c) = z.dim();
    tape.leaf(
        z.to_owned()
            .into_shape_with_order(IxDyn(&[1, h, w, c]))
            .expect("leaf3")
            .into_dyn(),
    )
}

fn value3(tape: &Tape, v: Var) -> Array3<f64> {
    let sh = tape.shape(v);
    tape.value(v)
        .into_shape_with_order((sh[1], sh[2], sh[3]))
        .expect("value3")
}

/// AdaIN on a single `[H,W,C]` map with per-channel scale/shift.
pub fn adain(z: ArrayView3<f64>, scale: &[f64], shift: &[f64]) -> Result<Array3<f64>> {
    let c = z.dim().2;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "adain: {c} channels but scale/shift have {}/{}",
            scale.len(),
            shift.len()
        )));
    }
    let tape = Tape::new();
    let zv = leaf3(&tape, z);
    let sv = tape.leaf(
        Array1::from_vec(scale.to_vec())
            .into_shape_with_order(IxDyn(&[1, c]))
            .unwrap(),
    );
    let hv = tape.leaf(
        Array1::from_vec(shift.to_vec())
            .into_shape_with_order(IxDyn(&[1, c]))
            .unwrap(),
    );
    Ok(value3(&tape, adain_nhwc(&tape, zv, sv, hv)))
}

/// Spatial randomization of `z` against explicit partner `z_prime`.
pub fn spatial_randomize(
    z: ArrayView3<f64>,
    z_prime: ArrayView3<f64>,
    alpha: f64,
    verbatim_eq8: bool,
) -> Result<Array3<f64>> {
    if z.dim() != z_prime.dim() {
        return Err(Error::shape("spatial_randomize: shapes differ"));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} not in (0,1)")));
    }
    let (h, w, c) = z.dim();
    let tape = Tape::new();
    let mut stacked = ndarray::Array4::zeros((2, h, w, c));
    stacked.index_axis_mut(ndarray::Axis(0), 0).assign(&z);
    stacked.index_axis_mut(ndarray::Axis(0), 1).assign(&z_prime);
    let zv = tape.leaf(stacked.into_dyn());
    let av = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), alpha));
    let out = spatial_randomize_on_tape(&tape, zv, &[1, 0], av, verbatim_eq8);
    let full = tape.value(out);
    Ok(full
        .index_axis(ndarray::Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("3-D"))
}

/// Spectral randomization of vector `z` against explicit partner `z_prime`.
pub fn spectral_randomize(z: &[f64], z_prime: &[f64]) -> Result<Array1<f64>> {
    if z.len() != z_prime.len() {
        return Err(Error::shape("spectral_randomize: lengths differ"));
    }
    if z.len() < 2 {
        return Err(Error::invalid(
            "spectral_randomize needs at least 2 channels",
        ));
    }
    let tape = Tape::new();
    let mut stacked = Array2::zeros((2, z.len()));
    stacked.row_mut(0).assign(&Array1::from_vec(z.to_vec()));
    stacked.row_mut(1).assign(&Array1::from_vec(z_prime.to_vec()));
    let zv = tape.leaf(stacked.into_dyn());
    let out = spectral_randomize_on_tape(&tape, zv, &[1, 0]);
    let full = tape.value(out);
    Ok(full.index_axis(ndarray::Axis(0), 0).to_owned().into_dimensionality().expect("1-D"))
}

/// Grayscale dilation of a single map: windowed maximum of point-wise sums
/// with the structural element, zero padding. `w` must be square with odd
/// side.
pub fn dilation2d(z: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let z3 = z.to_owned().insert_axis(ndarray::Axis(0));
    let (out, _) = crate::autodiff::kernels::dilate_forward(z3.view(), w);
    out.index_axis(ndarray::Axis(0), 0).to_owned()
}

/// Grayscale erosion: windowed minimum of point-wise differences.
pub fn erosion2d(z: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let z3 = z.to_owned().insert_axis(ndarray::Axis(0));
    let (out, _) = crate::autodiff::kernels::erode_forward(z3.view(), w);
    out.index_axis(ndarray::Axis(0), 0).to_owned()
}

/// Morph template (pre-AdaIN) of one `[13,13,d]` patch: `[13,13,4]`.
pub fn morph_template(patch: ArrayView3<f64>, params: &GeneratorParams) -> Array3<f64> {
    let tape = Tape::new();
    let g = params.as_vars(&tape, false);
    let x = leaf3(&tape, patch);
    let sh = tape.shape(x);
    let zm4 = conv1x1(&tape, x, g.morph_reduce_w, g.morph_reduce_b);
    let zm = tape.reshape(zm4, &[sh[0], sh[1], sh[2]]);
    value3(&tape, morph_template_on_tape(&tape, zm, &g.morph_elems))
}

/// Morph encoder on one patch with explicit noise: template plus
/// noise-driven AdaIN, `[13,13,4]`.
pub fn morph_encode(
    patch: ArrayView3<f64>,
    params: &GeneratorParams,
    noise: &[f64],
) -> Result<Array3<f64>> {
    if noise.len() != NOISE_DIM {
        return Err(Error::shape(format!(
            "morph noise must have {NOISE_DIM} entries, got {}",
            noise.len()
        )));
    }
    let tape = Tape::new();
    let g = params.as_vars(&tape, false);
    let x = leaf3(&tape, patch);
    let noise_v = tape.leaf(
        Array1::from_vec(noise.to_vec())
            .into_shape_with_order(IxDyn(&[1, NOISE_DIM]))
            .unwrap(),
    );
    Ok(value3(&tape, morph_encode_on_tape(&tape, x, &g, noise_v)))
}

/// Generate the extended-domain batch for `batch`; deterministic under
/// `seed`, labels copied from the input.
pub fn generate_ed(
    batch: &PatchBatch,
    params: &GeneratorParams,
    opts: &GenOptions,
    seed: u64,
) -> Result<PatchBatch> {
    if batch.len() < 2 {
        return Err(Error::invalid(
            "generate_ed needs at least 2 samples for minibatch randomization",
        ));
    }
    if batch.band_count() != params.d {
        return Err(Error::BandMismatch {
            expected: params.d,
            got: batch.band_count(),
        });
    }
    let tape = Tape::new();
    let g = params.as_vars(&tape, false);
    let x = tape.leaf(batch.to_f64());
    let rnd = EdRandomness::draw(seed, batch.len());
    let out = generate_ed_on_tape(&tape, x, &g, &rnd, opts);
    let value = tape.value(out);
    let patches = value
        .mapv(|v| v as f32)
        .into_dimensionality()
        .expect("4-D");
    Ok(PatchBatch {
        patches,
        labels: batch.labels.clone(),
        patch_size: batch.patch_size,
    })
}

/// Convex per-sample mix of aligned source/extended batches with explicit
/// weights in [0,1].
pub fn mix_id_with_weights(
    sd: &PatchBatch,
    ed: &PatchBatch,
    weights: &[f64],
) -> Result<PatchBatch> {
    if sd.patches.dim() != ed.patches.dim() || sd.labels != ed.labels {
        return Err(Error::shape(
            "mix_id: source and extended batches are not aligned",
        ));
    }
    if weights.len() != sd.len() {
        return Err(Error::shape("mix_id: one weight per sample required"));
    }
    if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::invalid("mix weights must lie in [0,1]"));
    }
    let mut patches = sd.patches.clone();
    for (i, &w) in weights.iter().enumerate() {
        let mut slab = patches.index_axis_mut(ndarray::Axis(0), i);
        let eslab = ed.patches.index_axis(ndarray::Axis(0), i);
        slab.zip_mut_with(&eslab, |s, &e| {
            *s = (w * (*s as f64) + (1.0 - w) * (e as f64)) as f32;
        });
    }
    Ok(PatchBatch {
        patches,
        labels: sd.labels.clone(),
        patch_size: sd.patch_size,
    })
}

/// Draw fresh `Uniform(0,1)` weights and mix; returns the mixed batch and the
/// weights used.
pub fn mix_id(sd: &PatchBatch, ed: &PatchBatch, seed: u64) -> Result<(PatchBatch, Vec<f64>)> {
    let mut r = rng::stream(seed, &[tags::MIX_WEIGHTS]);
    let weights: Vec<f64> = (0..sd.len()).map(|_| r.random::<f64>()).collect();
    let mixed = mix_id_with_weights(sd, ed, &weights)?;
    Ok((mixed, weights))
}

/// Smallest |best − runner-up| over all morphology windows of `z` under
/// element `w`; used to guard finite-difference checks away from ties.
pub fn morph_tie_gap(z: ArrayView2<f64>, w: ArrayView2<f64>, dilate: bool) -> f64 {
    let (h, wd) = z.dim();
    let k = w.dim().0;
    let half = (k / 2) as isize;
    let mut gap = f64::INFINITY;
    for p in 0..h {
        for q in 0..wd {
            let mut values = Vec::with_capacity(k * k);
            for ki in 0..k {
                for kj in 0..k {
                    let ip = p as isize + ki as isize - half;
                    let jq = q as isize + kj as isize - half;
                    let zv = if ip >= 0 && jq >= 0 && (ip as usize) < h && (jq as usize) < wd {
                        z[[ip as usize, jq as usize]]
                    } else {
                        0.0
                    };
                    let e = w[[ki, kj]];
                    values.push(if dilate { zv + e } else { zv - e });
                }
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pair_gap = if dilate {
                values[values.len() - 1] - values[values.len() - 2]
            } else {
                values[1] - values[0]
            };
            gap = gap.min(pair_gap.abs());
        }
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_gradients, CheckOpts};
    use ndarray::{array, Array, Array4, Axis};

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut r = rng::stream(seed, &[991]);
        Array::from_shape_fn((h, w, c), |_| r.random::<f64>())
    }

    #[test]
    fn channel_stats_hand_case() {
        // one channel [[1,3],[1,3]] → mean 2, std sqrt(1 + eps)
        let z = array![[[1.0], [3.0]], [[1.0], [3.0]]];
        let s = channel_stats(z.view());
        assert!((s.mean[0] - 2.0).abs() < 1e-12);
        assert!((s.std[0] - (1.0 + STD_EPSILON).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_constant_channel() {
        let z = Array3::from_elem((3, 3, 1), 7.0);
        let s = channel_stats(z.view());
        assert!((s.mean[0] - 7.0).abs() < 1e-12);
        assert!((s.std[0] - STD_EPSILON.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_channels_independent() {
        let z = random_map(4, 5, 3, 7);
        let swapped = {
            let mut s = z.clone();
            let c0 = z.index_axis(Axis(2), 0).to_owned();
            let c2 = z.index_axis(Axis(2), 2).to_owned();
            s.index_axis_mut(Axis(2), 0).assign(&c2);
            s.index_axis_mut(Axis(2), 2).assign(&c0);
            s
        };
        let a = channel_stats(z.view());
        let b = channel_stats(swapped.view());
        assert!((a.mean[0] - b.mean[2]).abs() < 1e-12);
        assert!((a.std[2] - b.std[0]).abs() < 1e-12);
        assert!((a.mean[1] - b.mean[1]).abs() < 1e-12);
    }

    #[test]
    fn adain_self_reconstruction() {
        let z = random_map(5, 5, 2, 3);
        let s = channel_stats(z.view());
        let out = adain(z.view(), s.std.as_slice().unwrap(), s.mean.as_slice().unwrap()).unwrap();
        let max_dev = (&out - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev <= 1e-3, "max deviation {max_dev}");
    }

    #[test]
    fn adain_hand_case() {
        // z = [1,3] single channel (μ=2, σ≈1), scale 2, shift 5 → ≈ [3,7]
        let z = array![[[1.0]], [[3.0]]]; // 2×1×1
        let out = adain(z.view(), &[2.0], &[5.0]).unwrap();
        assert!((out[[0, 0, 0]] - 3.0).abs() < 1e-3);
        assert!((out[[1, 0, 0]] - 7.0).abs() < 1e-3);
    }

    #[test]
    fn adain_output_stats_match_scale_shift() {
        let z = random_map(6, 6, 3, 5);
        let out = adain(z.view(), &[1.5, 0.7, 2.2], &[0.3, -1.0, 4.0]).unwrap();
        let s = channel_stats(out.view());
        for (got, want) in s.mean.iter().zip([0.3, -1.0, 4.0]) {
            assert!((got - want).abs() < 1e-3);
        }
        for (got, want) in s.std.iter().zip([1.5, 0.7, 2.2]) {
            assert!((got - want).abs() < 1e-2);
        }
    }

    #[test]
    fn adain_shape_mismatch_rejected() {
        let z = random_map(3, 3, 2, 1);
        assert!(adain(z.view(), &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn spatial_randomize_identity_when_partner_is_self() {
        let z = random_map(5, 5, 3, 11);
        for alpha in [0.2, 0.5, 0.9] {
            let out = spatial_randomize(z.view(), z.view(), alpha, false).unwrap();
            let max_dev = (&out - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_dev <= 1e-3, "alpha {alpha}: deviation {max_dev}");
        }
    }

    #[test]
    fn spatial_randomize_alpha_near_one_keeps_own_style() {
        let z = random_map(5, 5, 3, 13);
        let zp = random_map(5, 5, 3, 14);
        let out = spatial_randomize(z.view(), zp.view(), 0.999999, false).unwrap();
        let max_dev = (&out - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev <= 1e-3, "deviation {max_dev}");
    }

    /// Map with exact population mean `mu` and std ~sqrt(s²+eps) built from
    /// a ±1 checkerboard.
    fn styled_map(mu: f64, sigma: f64) -> Array3<f64> {
        Array::from_shape_fn((2, 2, 1), |(r, c, _)| {
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            mu + sigma * sign
        })
    }

    #[test]
    fn spatial_randomize_mixes_stats_at_half() {
        let z = styled_map(0.0, 1.0);
        let zp = styled_map(4.0, 3.0);
        let out = spatial_randomize(z.view(), zp.view(), 0.5, false).unwrap();
        let s = channel_stats(out.view());
        assert!((s.mean[0] - 2.0).abs() < 1e-3, "mean {}", s.mean[0]);
        assert!((s.std[0] - 2.0).abs() < 1e-2, "std {}", s.std[0]);
    }

    #[test]
    fn spatial_randomize_verbatim_swaps_roles() {
        let z = styled_map(0.0, 1.0);
        let zp = styled_map(4.0, 3.0);
        // α=0.25: mixed mean 3, mixed std 2.5
        let conventional = spatial_randomize(z.view(), zp.view(), 0.25, false).unwrap();
        let verbatim = spatial_randomize(z.view(), zp.view(), 0.25, true).unwrap();
        let cs = channel_stats(conventional.view());
        let vs = channel_stats(verbatim.view());
        assert!((cs.mean[0] - 3.0).abs() < 1e-3 && (cs.std[0] - 2.5).abs() < 1e-2);
        assert!((vs.mean[0] - 2.5).abs() < 1e-3 && (vs.std[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn spectral_randomize_identity_and_hand_case() {
        let z = [0.3, 0.9, 0.1, 0.5];
        let out = spectral_randomize(&z, &z).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - b).abs() <= 1e-3);
        }
        // z = [0,2] (μ=1,σ≈1), z' = [10,14] (μ=12,σ≈2) → ≈ [0,2]
        let out = spectral_randomize(&[0.0, 2.0], &[10.0, 14.0]).unwrap();
        assert!((out[0] - 0.0).abs() < 1e-3, "got {}", out[0]);
        assert!((out[1] - 2.0).abs() < 1e-3, "got {}", out[1]);
    }

    #[test]
    fn spectral_randomize_keeps_own_stats() {
        let mut r = rng::stream(5, &[17]);
        let z: Vec<f64> = (0..8).map(|_| r.random::<f64>() * 3.0).collect();
        let zp: Vec<f64> = (0..8).map(|_| r.random::<f64>() * 5.0 - 1.0).collect();
        let out = spectral_randomize(&z, &zp).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64 + STD_EPSILON)
                .sqrt()
        };
        assert!((mean(out.as_slice().unwrap()) - mean(&z)).abs() < 1e-6);
        assert!((std(out.as_slice().unwrap()) - std(&z)).abs() < 1e-3);
    }

    #[test]
    fn spectral_randomize_rejects_single_channel() {
        assert!(spectral_randomize(&[1.0], &[2.0]).is_err());
    }

    /// Naive sliding-window oracle with zero padding, independent of the
    /// kernel implementation.
    fn sliding_extreme(z: &Array2<f64>, k: usize, max: bool) -> Array2<f64> {
        let (h, w) = z.dim();
        let half = (k / 2) as isize;
        Array2::from_shape_fn((h, w), |(p, q)| {
            let mut best = if max { f64::NEG_INFINITY } else { f64::INFINITY };
            for di in -half..=half {
                for dj in -half..=half {
                    let (ip, jq) = (p as isize + di, q as isize + dj);
                    let v = if ip >= 0 && jq >= 0 && (ip as usize) < h && (jq as usize) < w {
                        z[[ip as usize, jq as usize]]
                    } else {
                        0.0
                    };
                    best = if max { best.max(v) } else { best.min(v) };
                }
            }
            best
        })
    }

    #[test]
    fn dilation_zero_element_is_sliding_max() {
        let mut r = rng::stream(21, &[3]);
        let z = Array::from_shape_fn((8, 8), |_| r.random::<f64>());
        let w = Array2::zeros((3, 3));
        let got = dilation2d(z.view(), w.view());
        let want = sliding_extreme(&z, 3, true);
        assert_eq!(got, want);
    }

    #[test]
    fn erosion_zero_element_is_sliding_min() {
        let mut r = rng::stream(22, &[3]);
        let z = Array::from_shape_fn((8, 8), |_| r.random::<f64>());
        let w = Array2::zeros((3, 3));
        let got = erosion2d(z.view(), w.view());
        let want = sliding_extreme(&z, 3, false);
        assert_eq!(got, want);
    }

    #[test]
    fn degenerate_window_shifts_by_constant() {
        let mut r = rng::stream(23, &[3]);
        let z = Array::from_shape_fn((5, 5), |_| r.random::<f64>());
        let w = Array2::from_elem((1, 1), 0.37);
        let dil = dilation2d(z.view(), w.view());
        let ero = erosion2d(z.view(), w.view());
        for ((a, b), zv) in dil.iter().zip(ero.iter()).zip(z.iter()) {
            assert!((a - (zv + 0.37)).abs() < 1e-15);
            assert!((b - (zv - 0.37)).abs() < 1e-15);
        }
    }

    #[test]
    fn erosion_dilation_duality_exact() {
        let mut r = rng::stream(24, &[3]);
        for _ in 0..5 {
            let z = Array::from_shape_fn((7, 6), |_| r.random::<f64>() * 2.0 - 1.0);
            let w = Array::from_shape_fn((3, 3), |_| r.random::<f64>() * 0.2 - 0.1);
            let ero = erosion2d(z.view(), w.view());
            let neg_dil = dilation2d(z.mapv(|v| -v).view(), w.view()).mapv(|v| -v);
            assert_eq!(ero, neg_dil);
        }
    }

    #[test]
    fn dilation_is_monotone() {
        let mut r = rng::stream(25, &[3]);
        let z1 = Array::from_shape_fn((6, 6), |_| r.random::<f64>());
        let bump = Array::from_shape_fn((6, 6), |_| r.random::<f64>() * 0.5);
        let z2 = &z1 + &bump;
        let w = Array::from_shape_fn((3, 3), |_| r.random::<f64>() * 0.1);
        let d1 = dilation2d(z1.view(), w.view());
        let d2 = dilation2d(z2.view(), w.view());
        assert!(d1.iter().zip(d2.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn morph_template_constant_input_all_elems_zero() {
        let mut params = GeneratorParams::init(2, 4, 0);
        for e in params.morph_elems.iter_mut() {
            e.fill(0.0);
        }
        // make the reduction produce a constant plane
        params.morph_reduce_w.fill(0.0);
        params.morph_reduce_b.fill(0.6);
        let patch = random_map(PATCH_SIZE, PATCH_SIZE, 2, 9);
        let t = morph_template(patch.view(), &params);
        // interior of opening/closing equals z_m where padding cannot win;
        // top/black hats vanish there
        let interior = |c: usize| {
            let mut worst = 0.0f64;
            for r in 3..PATCH_SIZE - 3 {
                for q in 3..PATCH_SIZE - 3 {
                    let want = match c {
                        0 | 1 => 0.6,
                        _ => 0.0,
                    };
                    worst = worst.max((t[[r, q, c]] - want).abs());
                }
            }
            worst
        };
        for c in 0..4 {
            assert!(interior(c) < 1e-12, "channel {c} deviates by {}", interior(c));
        }
    }

    #[test]
    fn morph_encode_output_shape_any_band_count() {
        for d in [1usize, 3, 7] {
            let params = GeneratorParams::init(d, 4, d as u64);
            let patch = random_map(PATCH_SIZE, PATCH_SIZE, d, 40 + d as u64);
            let noise = vec![0.1; NOISE_DIM];
            let out = morph_encode(patch.view(), &params, &noise).unwrap();
            assert_eq!(out.dim(), (PATCH_SIZE, PATCH_SIZE, 4));
        }
    }

    #[test]
    fn morph_template_passes_through_self_styled_adain() {
        let params = GeneratorParams::init(3, 4, 2);
        let patch = random_map(PATCH_SIZE, PATCH_SIZE, 3, 77);
        let template = morph_template(patch.view(), &params);
        let s = channel_stats(template.view());
        let out = adain(
            template.view(),
            s.std.as_slice().unwrap(),
            s.mean.as_slice().unwrap(),
        )
        .unwrap();
        let max_dev = (&out - &template)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev <= 1e-3, "max deviation {max_dev}");
    }

    fn small_batch(n: usize, d: usize, seed: u64) -> PatchBatch {
        let mut r = rng::stream(seed, &[55]);
        let patches = Array4::from_shape_fn((n, PATCH_SIZE, PATCH_SIZE, d), |_| {
            r.random::<f32>()
        });
        let labels = (0..n).map(|i| (i % 3 + 1) as u16).collect();
        PatchBatch::new(patches, labels).unwrap()
    }

    #[test]
    fn generate_ed_shape_range_and_determinism() {
        let batch = small_batch(6, 5, 1);
        let params = GeneratorParams::init(5, 4, 3);
        let opts = GenOptions::default();
        let ed1 = generate_ed(&batch, &params, &opts, 42).unwrap();
        let ed2 = generate_ed(&batch, &params, &opts, 42).unwrap();
        assert_eq!(ed1.patches.dim(), batch.patches.dim());
        assert!(ed1.patches.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ed1.patches, ed2.patches);
        assert_eq!(ed1.labels, batch.labels);
        let ed3 = generate_ed(&batch, &params, &opts, 43).unwrap();
        assert_ne!(ed1.patches, ed3.patches);
    }

    #[test]
    fn generate_ed_rejects_single_sample() {
        let batch = small_batch(1, 3, 2);
        let params = GeneratorParams::init(3, 4, 0);
        assert!(generate_ed(&batch, &params, &GenOptions::default(), 0).is_err());
    }

    #[test]
    fn no_morph_ignores_structural_elements() {
        let batch = small_batch(4, 3, 5);
        let mut params = GeneratorParams::init(3, 4, 7);
        let opts = GenOptions {
            no_morph: true,
            ..GenOptions::default()
        };
        let a = generate_ed(&batch, &params, &opts, 9).unwrap();
        for e in params.morph_elems.iter_mut() {
            e.fill(5.0); // would radically change the template if used
        }
        params.noise_scale_b.fill(100.0);
        let b = generate_ed(&batch, &params, &opts, 9).unwrap();
        assert_eq!(a.patches, b.patches);
    }

    #[test]
    fn no_semantic_ignores_semantic_weights() {
        let batch = small_batch(4, 3, 6);
        let mut params = GeneratorParams::init(3, 4, 8);
        let opts = GenOptions {
            no_semantic: true,
            ..GenOptions::default()
        };
        let a = generate_ed(&batch, &params, &opts, 9).unwrap();
        params.alpha_raw.fill(3.0);
        params.spatial_reduce_w.fill(2.0);
        params.spectral_compress_w.fill(-1.0);
        params.spe_expand_w.fill(0.5);
        let b = generate_ed(&batch, &params, &opts, 9).unwrap();
        assert_eq!(a.patches, b.patches);
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let sd = small_batch(3, 4, 10);
        let params = GeneratorParams::init(4, 4, 1);
        let ed = generate_ed(&sd, &params, &GenOptions::default(), 4).unwrap();
        let all_sd = mix_id_with_weights(&sd, &ed, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(all_sd.patches, sd.patches);
        let all_ed = mix_id_with_weights(&sd, &ed, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(all_ed.patches, ed.patches);
    }

    #[test]
    fn mix_hand_case_midpoint() {
        let mut sd = small_batch(2, 2, 11);
        let mut ed = sd.clone();
        sd.patches.fill(0.2);
        ed.patches.fill(0.6);
        let mixed = mix_id_with_weights(&sd, &ed, &[0.5, 0.5]).unwrap();
        assert!(mixed.patches.iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn mix_output_between_sources() {
        let sd = small_batch(5, 3, 12);
        let params = GeneratorParams::init(3, 4, 2);
        let ed = generate_ed(&sd, &params, &GenOptions::default(), 13).unwrap();
        let (id, weights) = mix_id(&sd, &ed, 14).unwrap();
        assert!(weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        for ((i, s), e) in id.patches.iter().zip(sd.patches.iter()).zip(ed.patches.iter()) {
            let (lo, hi) = (s.min(*e), s.max(*e));
            assert!(*i >= lo - 1e-6 && *i <= hi + 1e-6);
        }
    }

    #[test]
    fn mix_fresh_weights_per_call() {
        let sd = small_batch(4, 3, 15);
        let params = GeneratorParams::init(3, 4, 3);
        let ed = generate_ed(&sd, &params, &GenOptions::default(), 16).unwrap();
        let (_, w1) = mix_id(&sd, &ed, 1).unwrap();
        let (_, w2) = mix_id(&sd, &ed, 2).unwrap();
        assert_ne!(w1, w2);
    }

    // ----- gradient checks (small, fast cases; the acceptance suite runs
    // the full list at spec tolerances) -----

    #[test]
    fn adain_gradients_match_finite_differences() {
        let z = random_map(3, 3, 2, 31).into_dyn().into_shape_with_order(IxDyn(&[1, 3, 3, 2])).unwrap();
        let scale = array![[1.3, 0.7]].into_dyn();
        let shift = array![[0.2, -0.4]].into_dyn();
        let report = check_gradients(
            |t, vs| {
                let out = adain_nhwc(t, vs[0], vs[1], vs[2]);
                t.mean_all(t.square(out))
            },
            &[z, scale, shift],
            CheckOpts::default(),
        );
        assert!(report.ok(), "worst rel {}", report.worst_rel);
    }

    #[test]
    fn spatial_randomize_gradients_match_finite_differences() {
        let mut r = rng::stream(33, &[1]);
        let z = Array::from_shape_fn((3, 4, 4, 2), |_| r.random::<f64>()).into_dyn();
        let alpha_raw = array![0.3].into_dyn();
        let report = check_gradients(
            |t, vs| {
                let alpha = t.sigmoid(vs[1]);
                let out = spatial_randomize_on_tape(t, vs[0], &[2, 0, 1], alpha, false);
                t.mean_all(t.square(out))
            },
            &[z, alpha_raw],
            CheckOpts::default(),
        );
        assert!(report.ok(), "worst rel {}", report.worst_rel);
    }

    #[test]
    fn spectral_randomize_gradients_match_finite_differences() {
        let mut r = rng::stream(34, &[1]);
        let z = Array::from_shape_fn((4, 5), |_| r.random::<f64>() * 2.0).into_dyn();
        let report = check_gradients(
            |t, vs| {
                let out = spectral_randomize_on_tape(t, vs[0], &[1, 2, 3, 0]);
                t.mean_all(t.square(out))
            },
            &[z],
            CheckOpts::default(),
        );
        assert!(report.ok(), "worst rel {}", report.worst_rel);
    }

    #[test]
    fn morphology_gradients_match_finite_differences() {
        // z on a 0.05 lattice and strictly distinct element entries on a
        // 0.002 lattice keep every window's best/runner-up gap ≥ 0.002,
        // so the finite-difference step cannot flip a winner.
        let mut r = rng::stream(35, &[1]);
        let z = Array::from_shape_fn((1, 6, 6), |_| {
            0.05 * (r.random_range(1..=19) as f64)
        })
        .into_dyn();
        let w = Array::from_shape_fn((3, 3), |(i, j)| 0.002 * (i * 3 + j) as f64 - 0.008)
            .into_dyn();
        let z2 = z.clone().into_shape_with_order((6, 6)).unwrap();
        let w2 = w.clone().into_shape_with_order((3, 3)).unwrap();
        assert!(morph_tie_gap(z2.view(), w2.view(), true) > 1e-3);
        assert!(morph_tie_gap(z2.view(), w2.view(), false) > 1e-3);

        for dilate in [true, false] {
            let report = check_gradients(
                |t, vs| {
                    let out = if dilate {
                        t.dilate(vs[0], vs[1])
                    } else {
                        t.erode(vs[0], vs[1])
                    };
                    t.mean_all(t.square(out))
                },
                &[z.clone(), w.clone()],
                CheckOpts::default(),
            );
            assert!(report.ok(), "dilate={dilate}: worst rel {}", report.worst_rel);
        }
    }
}
