//! Alternating minimax training with deterministic seeding and
//! bit-reproducible checkpoints.
//!
//! Each training step runs one discriminator update (classification losses on
//! all three domains plus the supervised contrastive term; generator held
//! fixed) followed by one generator update (extended-domain classification
//! plus the adversarial contrastive term, with gradients flowing through the
//! frozen discriminator). Extended/intermediate batches are regenerated with
//! fresh randomization for the generator step.
//!
//! All parameters and Adam moments are rounded to f32-representable values
//! after every update, so the f32 checkpoint blocks round-trip exactly and a
//! resumed run continues bit-identically. Randomness is derived from
//! (seed, purpose, step) streams rather than stateful generators, which makes
//! resume replay exact as well.

use crate::autodiff::Tape;
use crate::data::PatchBatch;
use crate::discriminator::{
    classify_on_tape, embed_on_tape, project_on_tape, DiscriminatorParams, Domain,
};
use crate::error::{Error, Result};
use crate::generator::{
    generate_ed_on_tape, mix_on_tape, EdRandomness, GenOptions, GeneratorParams,
};
use crate::losses::{cross_entropy_on_tape, supcon_on_tape, LossConfig};
use crate::rng::{self, tags};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Flow and loss switches for the ablation study. `no_se`/`no_me` zero the
/// semantic/morph encoder outputs; `no_con`/`no_adv` drop the contrastive and
/// adversarial terms. With both encoders disabled the generator carries no
/// signal, so training degenerates to a plain source-only classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_se: bool,
    pub no_me: bool,
    pub no_con: bool,
    pub no_adv: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 5] = ["full", "no_se", "no_me", "no_con", "no_adv"];

    /// Parse a named variant: `full`, `no_se`, `no_me`, `no_con`, `no_adv`,
    /// or `baseline` (all four switches).
    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no_se" => a.no_se = true,
            "no_me" => a.no_me = true,
            "no_con" => a.no_con = true,
            "no_adv" => a.no_adv = true,
            "baseline" => {
                a = Ablation {
                    no_se: true,
                    no_me: true,
                    no_con: true,
                    no_adv: true,
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown ablation '{other}' (expected full|no_se|no_me|no_con|no_adv|baseline)"
                )))
            }
        }
        Ok(a)
    }

    pub fn name(&self) -> String {
        if self.source_only() && self.no_con && self.no_adv {
            return "baseline".into();
        }
        let mut parts = Vec::new();
        if self.no_se {
            parts.push("no_se");
        }
        if self.no_me {
            parts.push("no_me");
        }
        if self.no_con {
            parts.push("no_con");
        }
        if self.no_adv {
            parts.push("no_adv");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    /// Both encoders disabled: the generator has no signal path and training
    /// reduces to supervised learning on the source domain alone.
    pub fn source_only(&self) -> bool {
        self.no_se && self.no_me
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base learning rate (both optimizers).
    pub eta: f64,
    /// L2 coefficient applied to every parameter.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Semantic embedding width; 0 selects 16 for narrow cubes (≤ 8 bands)
    /// and 64 otherwise.
    pub d_se: usize,
    pub ablation: Ablation,
    /// Adaptive-moment coefficients.
    pub beta1: f64,
    pub beta2: f64,
    pub spar_verbatim_eq8: bool,
    /// Skip generator updates entirely (diagnostics only).
    pub freeze_generator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            d_se: 0,
            ablation: Ablation::default(),
            beta1: 0.9,
            beta2: 0.999,
            spar_verbatim_eq8: false,
            freeze_generator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size < 4 {
            return Err(Error::invalid("batch size must be at least 4"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epoch count must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment coefficients must lie in [0,1)"));
        }
        self.loss.validate()
    }

    /// Effective semantic width for a cube with `d` bands.
    pub fn resolve_d_se(&self, d: usize) -> usize {
        if self.d_se > 0 {
            self.d_se
        } else if d <= 8 {
            16
        } else {
            64
        }
    }

    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            no_semantic: self.ablation.no_se,
            no_morph: self.ablation.no_me,
            spar_verbatim_eq8: self.spar_verbatim_eq8,
        }
    }

    fn effective_lambda1(&self) -> f64 {
        if self.ablation.no_con {
            0.0
        } else {
            self.loss.lambda1
        }
    }

    fn effective_lambda2(&self) -> f64 {
        if self.ablation.no_adv {
            0.0
        } else {
            self.loss.lambda2
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Round to the nearest f32-representable value (keeps checkpoints exact).
fn quantize_f32(a: &mut ArrayD<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

/// Adaptive-moment estimation state for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(shapes: &[&ArrayD<f64>]) -> Self {
        Self {
            m: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            v: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update over aligned (parameter, gradient) lists. Applies L2 weight
    /// decay, bias-corrected moments, and f32 quantization of parameters and
    /// moments.
    pub fn step(
        &mut self,
        params: Vec<&mut ArrayD<f64>>,
        grads: &[ArrayD<f64>],
        eta: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut *p)
                .and(g)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|pv, &gv, mv, vv| {
                    let g_eff = gv + weight_decay * *pv;
                    *mv = beta1 * *mv + (1.0 - beta1) * g_eff;
                    *vv = beta2 * *vv + (1.0 - beta2) * g_eff * g_eff;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv -= eta * m_hat / (v_hat.sqrt() + 1e-8);
                });
            quantize_f32(p);
            quantize_f32(m);
            quantize_f32(v);
        }
    }
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

/// Everything that evolves during training: both parameter sets, both
/// optimizers, and the step counters that key the random streams.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub gen: GeneratorParams,
    pub disc: DiscriminatorParams,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn init(d: usize, class_count: usize, config: &TrainConfig) -> Self {
        let d_se = config.resolve_d_se(d);
        let mut gen = GeneratorParams::init(d, d_se, config.seed);
        let mut disc = DiscriminatorParams::init(d, class_count, config.seed);
        for t in gen.tensors_mut() {
            quantize_f32(t);
        }
        for t in disc.tensors_mut() {
            quantize_f32(t);
        }
        let opt_g = AdamState::zeros_like(&gen.tensors().iter().map(|(_, a)| *a).collect::<Vec<_>>());
        let opt_d =
            AdamState::zeros_like(&disc.tensors().iter().map(|(_, a)| *a).collect::<Vec<_>>());
        Self {
            gen,
            disc,
            opt_g,
            opt_d,
            epoch: 0,
            step: 0,
            seed: config.seed,
        }
    }
}

/// Loss components of one alternating step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_sd: f64,
    pub l_ed: f64,
    pub l_id: f64,
    pub l_supcon: f64,
    pub d_obj: f64,
    pub l_ed_g: f64,
    pub l_adv: f64,
    pub g_obj: f64,
    pub adv_domain: Option<Domain>,
    pub alpha: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.l_sd,
            self.l_ed,
            self.l_id,
            self.l_supcon,
            self.d_obj,
            self.l_ed_g,
            self.l_adv,
            self.g_obj,
            self.alpha,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Evaluate the generator without tracking gradients: extended batch plus the
/// randomness that produced it.
fn generate_ed_values(
    x: &ArrayD<f64>,
    gen: &GeneratorParams,
    opts: &GenOptions,
    seed: u64,
) -> ArrayD<f64> {
    let tape = Tape::new();
    let g = gen.as_vars(&tape, false);
    let xv = tape.leaf(x.clone());
    let rnd = EdRandomness::draw(seed, x.shape()[0]);
    let ed = generate_ed_on_tape(&tape, xv, &g, &rnd, opts);
    tape.value(ed)
}

fn mix_values(sd: &ArrayD<f64>, ed: &ArrayD<f64>, weights: &[f64]) -> ArrayD<f64> {
    let mut out = sd.clone();
    for (i, &w) in weights.iter().enumerate() {
        let mut slab = out.index_axis_mut(Axis(0), i);
        let eslab = ed.index_axis(Axis(0), i);
        slab.zip_mut_with(&eslab, |s, &e| *s = w * *s + (1.0 - w) * e);
    }
    out
}

fn draw_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[tags::MIX_WEIGHTS]);
    (0..n).map(|_| r.random::<f64>()).collect()
}

/// Discriminator update (Eq.-17-style objective). The generator is evaluated
/// without gradient tracking.
pub fn d_step(batch: &PatchBatch, state: &mut ModelState, config: &TrainConfig) -> Result<StepMetrics> {
    let n = batch.len();
    let labels = batch.labels.clone();
    let labels0: Vec<usize> = batch.zero_based_labels();
    let lambda1 = config.effective_lambda1();
    let floor = config.loss.prob_floor;
    let step_seed = rng::mix(state.seed, &[tags::D_STEP, state.step]);

    let x_sd = batch.to_f64();
    let tape = Tape::new();
    let disc = state.disc.as_vars(&tape, true);

    let (joint, joint_labels, joint_labels0, domains) = if config.ablation.source_only() {
        (x_sd.clone(), labels.clone(), labels0.clone(), 1usize)
    } else {
        let ed = generate_ed_values(&x_sd, &state.gen, &config.gen_options(), step_seed);
        let weights = draw_weights(step_seed, n);
        let id = mix_values(&x_sd, &ed, &weights);
        let joint = ndarray::concatenate(
            Axis(0),
            &[x_sd.view(), ed.view(), id.view()],
        )
        .expect("domain concat");
        let mut jl = labels.clone();
        jl.extend_from_slice(&labels);
        jl.extend_from_slice(&labels);
        let mut jl0 = labels0.clone();
        jl0.extend_from_slice(&labels0);
        jl0.extend_from_slice(&labels0);
        (joint.into_dyn(), jl, jl0, 3usize)
    };

    let x = tape.leaf(joint);
    let f = embed_on_tape(&tape, x, &disc);
    let probs = classify_on_tape(&tape, f, &disc);
    let picked = tape.select_per_row(probs, &joint_labels0);
    let logp = tape.ln_clamped(picked, floor);

    let domain_loss = |d: usize| {
        let idx: Vec<usize> = (d * n..(d + 1) * n).collect();
        tape.neg(tape.mean_all(tape.index_rows(logp, &idx)))
    };
    let l_sd_v = domain_loss(0);
    let (l_ed_v, l_id_v) = if domains == 3 {
        (Some(domain_loss(1)), Some(domain_loss(2)))
    } else {
        (None, None)
    };

    let mut loss = l_sd_v;
    if let (Some(ed), Some(id)) = (l_ed_v, l_id_v) {
        loss = tape.add(loss, tape.add(ed, id));
    }
    let l_supcon_v = if lambda1 > 0.0 {
        let z = project_on_tape(&tape, f, &disc);
        let sup = supcon_on_tape(&tape, z, &joint_labels, &config.loss)?;
        loss = tape.add(loss, tape.scale(sup, lambda1));
        Some(sup)
    } else {
        None
    };

    let metrics = StepMetrics {
        l_sd: tape.scalar(l_sd_v),
        l_ed: l_ed_v.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_id: l_id_v.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_supcon: l_supcon_v.map(|v| tape.scalar(v)).unwrap_or(0.0),
        d_obj: tape.scalar(loss),
        l_ed_g: 0.0,
        l_adv: 0.0,
        g_obj: 0.0,
        adv_domain: None,
        alpha: state.gen.alpha(),
    };

    let grads = tape.backward(loss);
    let all = disc.all();
    let grad_list: Vec<ArrayD<f64>> = all
        .iter()
        .zip(state.disc.tensors().iter())
        .map(|(v, (_, t))| grads.wrt_or_zeros(*v, t.shape()))
        .collect();
    state.opt_d.step(
        state.disc.tensors_mut(),
        &grad_list,
        config.eta,
        config.weight_decay,
        config.beta1,
        config.beta2,
    );
    Ok(metrics)
}

/// Generator update (Eq.-18-style objective): fresh extended/intermediate
/// batches, discriminator frozen, gradients flow through it into the
/// generator.
pub fn g_step(batch: &PatchBatch, state: &mut ModelState, config: &TrainConfig) -> Result<StepMetrics> {
    let n = batch.len();
    let labels = batch.labels.clone();
    let labels0 = batch.zero_based_labels();
    let lambda2 = config.effective_lambda2();
    let floor = config.loss.prob_floor;
    let step_seed = rng::mix(state.seed, &[tags::G_STEP, state.step]);

    let tape = Tape::new();
    let gen = state.gen.as_vars(&tape, true);
    let disc = state.disc.as_vars(&tape, false);
    let x = tape.leaf(batch.to_f64());

    let rnd = EdRandomness::draw(step_seed, n);
    let ed = generate_ed_on_tape(&tape, x, &gen, &rnd, &config.gen_options());
    let f_ed = embed_on_tape(&tape, ed, &disc);
    let probs_ed = classify_on_tape(&tape, f_ed, &disc);
    let l_ed_v = cross_entropy_on_tape(&tape, probs_ed, &labels0, floor);

    let mut loss = l_ed_v;
    let mut l_adv = 0.0;
    let mut adv_domain = None;
    if lambda2 > 0.0 {
        let choose_ed = rng::stream(step_seed, &[tags::ADV_DOMAIN]).random::<bool>();
        let z_sd = project_on_tape(&tape, embed_on_tape(&tape, x, &disc), &disc);
        let z_neg = if choose_ed {
            adv_domain = Some(Domain::Extended);
            project_on_tape(&tape, f_ed, &disc)
        } else {
            adv_domain = Some(Domain::Intermediate);
            let weights = draw_weights(step_seed, n);
            let id = mix_on_tape(&tape, x, ed, &weights);
            let f_id = embed_on_tape(&tape, id, &disc);
            project_on_tape(&tape, f_id, &disc)
        };
        let adv = crate::losses::adv_on_tape(&tape, z_sd, &labels, z_neg, &labels, &config.loss)?;
        l_adv = tape.scalar(adv);
        loss = tape.add(loss, tape.scale(adv, lambda2));
    }

    let metrics = StepMetrics {
        l_sd: 0.0,
        l_ed: 0.0,
        l_id: 0.0,
        l_supcon: 0.0,
        d_obj: 0.0,
        l_ed_g: tape.scalar(l_ed_v),
        l_adv,
        g_obj: tape.scalar(loss),
        adv_domain,
        alpha: state.gen.alpha(),
    };

    let grads = tape.backward(loss);
    let all = gen.all();
    let grad_list: Vec<ArrayD<f64>> = all
        .iter()
        .zip(state.gen.tensors().iter())
        .map(|(v, (_, t))| grads.wrt_or_zeros(*v, t.shape()))
        .collect();
    state.opt_g.step(
        state.gen.tensors_mut(),
        &grad_list,
        config.eta,
        config.weight_decay,
        config.beta1,
        config.beta2,
    );
    Ok(metrics)
}

/// One alternating step: discriminator update, then (unless the generator is
/// frozen or has no signal path) generator update with fresh randomization.
/// Increments the state's step counter.
pub fn train_step(
    batch: &PatchBatch,
    state: &mut ModelState,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::invalid("training batch needs at least 2 samples"));
    }
    let mut metrics = d_step(batch, state, config)?;
    if !config.freeze_generator && !config.ablation.source_only() {
        let g = g_step(batch, state, config)?;
        metrics.l_ed_g = g.l_ed_g;
        metrics.l_adv = g.l_adv;
        metrics.g_obj = g.g_obj;
        metrics.adv_domain = g.adv_domain;
        metrics.alpha = g.alpha;
    }
    state.step += 1;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

/// One epoch's aggregated losses and validation accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_sd: f64,
    pub l_ed: f64,
    pub l_id: f64,
    pub l_supcon: f64,
    pub d_obj: f64,
    pub l_ed_g: f64,
    pub l_adv: f64,
    pub g_obj: f64,
    pub alpha: f64,
    pub val_oa: f64,
    pub is_best: bool,
}

/// Validation overall accuracy through the discriminator alone.
pub fn validation_oa(batch: &PatchBatch, disc: &DiscriminatorParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("validation batch is empty"));
    }
    let mut correct = 0usize;
    let chunk = 512;
    let mut start = 0;
    while start < batch.len() {
        let end = (start + chunk).min(batch.len());
        let idx: Vec<usize> = (start..end).collect();
        let sub = batch.select(&idx);
        let features = crate::discriminator::embed(&sub, disc)?;
        let preds = crate::discriminator::classify(features.view(), disc)?;
        correct += preds
            .labels
            .iter()
            .zip(sub.labels.iter())
            .filter(|(a, b)| a == b)
            .count();
        start = end;
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Train on shuffled minibatches; after each epoch compute validation OA and
/// retain the best-validation state. Returns the best state and the per-epoch
/// log. Non-finite losses abort with diagnostics.
pub fn fit(
    sd_train: &PatchBatch,
    sd_val: &PatchBatch,
    class_count: usize,
    config: &TrainConfig,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    config.validate()?;
    if sd_train.len() < config.batch_size.min(4) {
        return Err(Error::invalid(format!(
            "training split has only {} samples",
            sd_train.len()
        )));
    }
    let d = sd_train.band_count();
    let mut state = ModelState::init(d, class_count, config);
    let mut best_state = state.clone();
    let mut best_oa = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..sd_train.len()).collect();
        crate::data::shuffle(
            &mut order,
            &mut rng::stream(config.seed, &[tags::EPOCH_SHUFFLE, epoch as u64]),
        );

        let mut sums = [0.0f64; 8];
        let mut steps = 0usize;
        let mut alpha = state.gen.alpha();
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("skipping undersized tail batch of {}", chunk.len());
                continue;
            }
            let batch = sd_train.select(chunk);
            let metrics = train_step(&batch, &mut state, config).map_err(|e| match e {
                Error::DegenerateBatch(msg) => Error::DegenerateBatch(format!(
                    "epoch {epoch}, batch {batch_idx}: {msg}"
                )),
                other => other,
            })?;
            if !metrics.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("{metrics:?}"),
                });
            }
            sums[0] += metrics.l_sd;
            sums[1] += metrics.l_ed;
            sums[2] += metrics.l_id;
            sums[3] += metrics.l_supcon;
            sums[4] += metrics.d_obj;
            sums[5] += metrics.l_ed_g;
            sums[6] += metrics.l_adv;
            sums[7] += metrics.g_obj;
            alpha = metrics.alpha;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::invalid("no usable batches in epoch"));
        }
        let val_oa = validation_oa(sd_val, &state.disc)?;
        let is_best = val_oa > best_oa;
        if is_best {
            best_oa = val_oa;
            best_state = state.clone();
            best_state.epoch = epoch + 1;
        }
        let k = steps as f64;
        let record = EpochRecord {
            epoch,
            l_sd: sums[0] / k,
            l_ed: sums[1] / k,
            l_id: sums[2] / k,
            l_supcon: sums[3] / k,
            d_obj: sums[4] / k,
            l_ed_g: sums[5] / k,
            l_adv: sums[6] / k,
            g_obj: sums[7] / k,
            alpha,
            val_oa,
            is_best,
        };
        log::info!(
            "epoch {epoch}: d_obj {:.4}, g_obj {:.4}, val OA {:.4}{}",
            record.d_obj,
            record.g_obj,
            val_oa,
            if is_best { " (best)" } else { "" }
        );
        log.push(record);
    }
    Ok((best_state, log))
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDE1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    d: usize,
    class_count: usize,
    d_se: usize,
    epoch: usize,
    step: u64,
    seed: u64,
    adam_t_g: u64,
    adam_t_d: u64,
    arch: [usize; 5],
    config_echo: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn named_state_tensors(state: &ModelState) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    for (name, t) in state.gen.tensors() {
        out.push((name.to_string(), t.clone()));
    }
    for (name, t) in state.disc.tensors() {
        out.push((name.to_string(), t.clone()));
    }
    let push_moments = |out: &mut Vec<(String, ArrayD<f64>)>,
                        prefix: &str,
                        names: Vec<&'static str>,
                        opt: &AdamState| {
        for (name, m) in names.iter().zip(opt.m.iter()) {
            out.push((format!("{prefix}.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(opt.v.iter()) {
            out.push((format!("{prefix}.v.{name}"), v.clone()));
        }
    };
    push_moments(
        &mut out,
        "opt_g",
        state.gen.tensors().iter().map(|(n, _)| *n).collect(),
        &state.opt_g,
    );
    push_moments(
        &mut out,
        "opt_d",
        state.disc.tensors().iter().map(|(n, _)| *n).collect(),
        &state.opt_d,
    );
    out
}

/// Write the state as a single binary container: magic, manifest length,
/// JSON manifest, then raw little-endian f32 blocks in manifest order.
pub fn save_checkpoint(
    state: &ModelState,
    config_echo: &serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let tensors = named_state_tensors(state);
    let manifest = CheckpointManifest {
        version: 1,
        d: state.gen.d,
        class_count: state.disc.class_count,
        d_se: state.gen.d_se,
        epoch: state.epoch,
        step: state.step,
        seed: state.seed,
        adam_t_g: state.opt_g.t,
        adam_t_d: state.opt_d.t,
        arch: [
            state.disc.arch.conv1,
            state.disc.arch.conv2,
            state.disc.arch.fc1,
            state.disc.arch.feature_dim,
            state.disc.arch.projection_dim,
        ],
        config_echo: config_echo.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut blob = Vec::new();
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    blob.extend_from_slice(&manifest_bytes);
    for (_, t) in &tensors {
        for &x in t.iter() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelState, serde_json::Value)> {
    let blob = std::fs::read(path)?;
    if blob.len() < 8 || &blob[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mlen = u32::from_le_bytes([blob[4], blob[5], blob[6], blob[7]]) as usize;
    if blob.len() < 8 + mlen {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&blob[8..8 + mlen])
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

    let mut offset = 8 + mlen;
    let mut values: std::collections::HashMap<String, ArrayD<f64>> =
        std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product::<usize>().max(1);
        let nbytes = count * 4;
        if blob.len() < offset + nbytes {
            return Err(Error::Checkpoint(format!(
                "truncated block for {}",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[offset..offset + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += nbytes;
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad shape for {}: {e}", entry.name)))?;
        values.insert(entry.name.clone(), arr);
    }

    let arch = crate::discriminator::DiscArch {
        conv1: manifest.arch[0],
        conv2: manifest.arch[1],
        fc1: manifest.arch[2],
        feature_dim: manifest.arch[3],
        projection_dim: manifest.arch[4],
    };
    let mut gen = GeneratorParams::init(manifest.d, manifest.d_se, manifest.seed);
    let mut disc =
        DiscriminatorParams::init_with_arch(manifest.d, manifest.class_count, arch, manifest.seed);

    let mut take = |name: String| -> Result<ArrayD<f64>> {
        values
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let gen_names: Vec<&'static str> = gen.tensors().iter().map(|(n, _)| *n).collect();
    for (name, slot) in gen_names.iter().zip(gen.tensors_mut()) {
        *slot = take(name.to_string())?;
    }
    let disc_names: Vec<&'static str> = disc.tensors().iter().map(|(n, _)| *n).collect();
    for (name, slot) in disc_names.iter().zip(disc.tensors_mut()) {
        *slot = take(name.to_string())?;
    }

    let mut opt_g = AdamState::zeros_like(&gen.tensors().iter().map(|(_, a)| *a).collect::<Vec<_>>());
    opt_g.t = manifest.adam_t_g;
    for (name, slot) in gen_names.iter().zip(opt_g.m.iter_mut()) {
        *slot = take(format!("opt_g.m.{name}"))?;
    }
    for (name, slot) in gen_names.iter().zip(opt_g.v.iter_mut()) {
        *slot = take(format!("opt_g.v.{name}"))?;
    }
    let mut opt_d =
        AdamState::zeros_like(&disc.tensors().iter().map(|(_, a)| *a).collect::<Vec<_>>());
    opt_d.t = manifest.adam_t_d;
    for (name, slot) in disc_names.iter().zip(opt_d.m.iter_mut()) {
        *slot = take(format!("opt_d.m.{name}"))?;
    }
    for (name, slot) in disc_names.iter().zip(opt_d.v.iter_mut()) {
        *slot = take(format!("opt_d.v.{name}"))?;
    }

    Ok((
        ModelState {
            gen,
            disc,
            opt_g,
            opt_d,
            epoch: manifest.epoch,
            step: manifest.step,
            seed: manifest.seed,
        },
        manifest.config_echo,
    ))
}
