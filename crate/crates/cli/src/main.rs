//! Command-line entry points: synthetic data generation, training,
//! target-scene evaluation, the ablation grid, and map rendering.
//!
//! Configuration comes from an optional JSON file (`--config`) overlaid with
//! command-line flags (flags win). Every command writes the fully resolved
//! configuration into its output directory so a run can be reproduced
//! exactly. Exit codes: 0 success, 2 argument error, 3 runtime failure.

use clap::{Parser, Subcommand};
use sdenet_core::data::{
    augment, extract_patches, load_cube, save_cube, split_train_val, synth_pair, SyntheticSpec,
};
use sdenet_core::error::Error as CoreError;
use sdenet_core::evaluation::{
    default_palette, evaluate_scene, mmd_report, render_map, save_embeddings, Bandwidth,
    MmdKernel,
};
use sdenet_core::generator::generate_ed;
use sdenet_core::losses::SupconDenominator;
use sdenet_core::trainer::{
    fit, load_checkpoint, save_checkpoint, Ablation, EpochRecord, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Resolved run configuration: JSON file defaults overlaid by flags. An empty
/// config file yields the default run (η=1e−3, λ=0.1, τ=0.1, patch 13,
/// embedding width selected per band count).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    eta: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    tau: f64,
    lambda: f64,
    /// Adversarial weight; `None` keeps it equal to `lambda`.
    lambda2: Option<f64>,
    d_se: usize,
    ablation: String,
    spar_verbatim_eq8: bool,
    supcon_denominator: SupconDenominator,
    split_ratio: f64,
    augment_factor: usize,
    augment_flips: bool,
    augment_sigma: f64,
    patch_size: usize,
    seeds: Vec<u64>,
    synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            tau: 0.1,
            lambda: 0.1,
            lambda2: None,
            d_se: 0,
            ablation: "full".into(),
            spar_verbatim_eq8: false,
            supcon_denominator: SupconDenominator::default(),
            split_ratio: 0.8,
            augment_factor: 1,
            augment_flips: true,
            augment_sigma: 0.1,
            patch_size: sdenet_core::PATCH_SIZE,
            seeds: vec![0, 1, 2],
            synth: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    fn train_config(&self) -> Result<TrainConfig, CoreError> {
        let mut tc = TrainConfig {
            eta: self.eta,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            d_se: self.d_se,
            ablation: Ablation::variant(&self.ablation)?,
            spar_verbatim_eq8: self.spar_verbatim_eq8,
            ..TrainConfig::default()
        };
        tc.loss.tau = self.tau;
        tc.loss.lambda1 = self.lambda;
        tc.loss.lambda2 = self.lambda2.unwrap_or(self.lambda);
        tc.loss.supcon_denominator = self.supcon_denominator;
        tc.validate()?;
        if self.patch_size != sdenet_core::PATCH_SIZE {
            return Err(CoreError::InvalidArgument(format!(
                "model requires patch size {}, got {}",
                sdenet_core::PATCH_SIZE,
                self.patch_size
            )));
        }
        Ok(tc)
    }
}

#[derive(Parser)]
#[command(
    name = "sdenet",
    about = "Domain-expansion training for cross-scene raster classification",
    version
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ablation variant: full|no_se|no_me|no_con|no_adv|baseline.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Base learning rate.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Contrastive/adversarial weight λ.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Semantic embedding width (0 = auto per band count).
    #[arg(long, global = true)]
    dse: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an aligned synthetic source/target cube pair.
    Synth {
        /// Number of classes (≥ 2).
        #[arg(long)]
        classes: Option<usize>,
        /// Number of spectral bands.
        #[arg(long)]
        bands: Option<usize>,
        /// Square scene side length.
        #[arg(long)]
        scene: Option<usize>,
        /// Elliptical blobs painted per class.
        #[arg(long)]
        blobs: Option<usize>,
    },
    /// Train on a source cube and write checkpoint + log.
    Train {
        /// Source cube directory.
        #[arg(long)]
        sd: PathBuf,
    },
    /// Evaluate a checkpoint on a target cube.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target cube directory.
        #[arg(long)]
        td: PathBuf,
        /// Also render the predicted classification map.
        #[arg(long)]
        render_map: bool,
        /// Also export projection embeddings.
        #[arg(long)]
        export_embeddings: bool,
        /// Also write per-class distribution-gap diagnostics (needs --sd).
        #[arg(long)]
        mmd: bool,
        /// Source cube directory (for --mmd).
        #[arg(long)]
        sd: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant over the seed list.
    Ablate {
        /// Source cube directory (omit to synthesize the default pair).
        #[arg(long)]
        sd: Option<PathBuf>,
        /// Target cube directory (required when --sd is given).
        #[arg(long)]
        td: Option<PathBuf>,
        /// Seeds (comma separated); defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also run the source-only baseline (all four switches).
        #[arg(long)]
        include_baseline: bool,
    },
    /// Render a cube's ground-truth label raster as a PNG.
    RenderMap {
        /// Cube directory.
        #[arg(long)]
        cube: PathBuf,
    },
}

fn load_run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut rc: RunConfig = match &cli.config {
        Some(path) => {
            let raw = std::fs::read(path)
                .map_err(|e| anyhow::anyhow!("cannot read config {path:?}: {e}"))?;
            serde_json::from_slice(&raw)
                .map_err(|e| anyhow::anyhow!("bad config {path:?}: {e}"))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        rc.seed = seed;
        rc.synth.seed = seed;
    }
    if let Some(ablation) = &cli.ablation {
        rc.ablation = ablation.clone();
    }
    if let Some(eta) = cli.eta {
        rc.eta = eta;
    }
    if let Some(lambda) = cli.lambda {
        rc.lambda = lambda;
    }
    if let Some(dse) = cli.dse {
        rc.d_se = dse;
    }
    if let Some(epochs) = cli.epochs {
        rc.epochs = epochs;
    }
    if let Some(bs) = cli.batch_size {
        rc.batch_size = bs;
    }
    Ok(rc)
}

fn write_resolved_config(rc: &RunConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("resolved_config.json"),
        serde_json::to_vec_pretty(rc)?,
    )?;
    Ok(())
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Prepare train/val splits from a source cube directory.
fn prepare_splits(
    sd_dir: &Path,
    rc: &RunConfig,
) -> anyhow::Result<(
    sdenet_core::data::PatchBatch,
    sdenet_core::data::PatchBatch,
    usize,
)> {
    let cube = load_cube(sd_dir)?;
    let patches = extract_patches(&cube, rc.patch_size)?;
    log::info!(
        "loaded {}: {} labeled pixels, {} bands, {} classes",
        sd_dir.display(),
        patches.len(),
        cube.band_count(),
        cube.class_count
    );
    let (train, val) = split_train_val(&patches, rc.split_ratio, rc.seed)?;
    let train = if rc.augment_factor > 1 {
        augment(
            &train,
            rc.augment_flips,
            rc.augment_sigma,
            rc.augment_factor,
            rc.seed,
        )?
    } else {
        train
    };
    Ok((train, val, cube.class_count))
}

fn cmd_synth(rc: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (sd, td) = synth_pair(&rc.synth)?;
    save_cube(&sd, &out.join("sd"))?;
    save_cube(&td, &out.join("td"))?;
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_vec_pretty(&rc.synth)?,
    )?;
    log::info!(
        "wrote {} ({} labeled px) and {} to {}",
        "sd",
        sd.labeled_count(),
        "td",
        out.display()
    );
    println!(
        "synthesized pair: {} classes, {} bands, {}x{} scene, {} labeled pixels -> {}",
        rc.synth.class_count,
        rc.synth.band_count,
        rc.synth.scene.0,
        rc.synth.scene.1,
        sd.labeled_count(),
        out.display()
    );
    Ok(())
}

fn write_log(log: &[EpochRecord], path: &Path) -> anyhow::Result<()> {
    let mut lines = String::new();
    for r in log {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(path, lines)?;
    Ok(())
}

fn cmd_train(rc: &RunConfig, sd_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let tc = rc.train_config()?;
    let (train, val, class_count) = prepare_splits(sd_dir, rc)?;
    let (state, log) = fit(&train, &val, class_count, &tc)?;
    let echo = serde_json::to_value(rc)?;
    save_checkpoint(&state, &echo, &out.join("checkpoint.bin"))?;
    write_log(&log, &out.join("log.jsonl"))?;
    let best = log
        .iter()
        .filter(|r| r.is_best)
        .next_back()
        .map(|r| r.val_oa)
        .unwrap_or(0.0);
    println!(
        "trained {} epochs ({} variant); best validation OA {:.4} -> {}",
        log.len(),
        tc.ablation.name(),
        best,
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    rc: &RunConfig,
    checkpoint: &Path,
    td_dir: &Path,
    render: bool,
    export_emb: bool,
    want_mmd: bool,
    sd_dir: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let (state, echo) = load_checkpoint(checkpoint)?;
    let cube = load_cube(td_dir)?;
    let (metrics, prediction) = evaluate_scene(&state, &cube)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_vec_pretty(&metrics)?,
    )?;
    println!(
        "target scene: OA {:.4}, kappa {:.4}, {} samples",
        metrics.overall_accuracy, metrics.kappa, metrics.sample_count
    );
    for (i, ca) in metrics.per_class_accuracy.iter().enumerate() {
        println!("  class {} accuracy {:.4}", i + 1, ca);
    }
    if render {
        let palette = default_palette(cube.class_count);
        render_map(&prediction.labels, &palette, &out.join("map.png"))?;
    }
    if export_emb {
        save_embeddings(&prediction.embeddings, &out.join("embeddings"))?;
    }
    if want_mmd {
        let sd_dir = sd_dir.ok_or_else(|| {
            CoreError::InvalidArgument("--mmd needs --sd to locate source patches".into())
        })?;
        let sd_cube = load_cube(sd_dir)?;
        let sd_patches = extract_patches(&sd_cube, rc.patch_size)?;
        // regenerate an extended batch with the checkpointed generator; the
        // echoed training config supplies the flow switches
        let opts = echo
            .clone()
            .pipe(|v| serde_json::from_value::<RunConfig>(v).ok())
            .and_then(|c| c.train_config().ok())
            .map(|tc| tc.gen_options())
            .unwrap_or_default();
        let ed = generate_ed(&sd_patches, &state.gen, &opts, rc.seed)?;
        let ed_report = mmd_report(&state, &sd_patches, &ed, MmdKernel::Rbf, Bandwidth::Median)?;
        let td_patches = extract_patches(&cube, rc.patch_size)?;
        let td_report = mmd_report(
            &state,
            &sd_patches,
            &td_patches,
            MmdKernel::Rbf,
            Bandwidth::Median,
        )
        .ok();
        std::fs::write(
            out.join("mmd.json"),
            serde_json::to_vec_pretty(&serde_json::json!({
                "sd_vs_ed": ed_report,
                "sd_vs_td": td_report,
            }))?,
        )?;
        println!(
            "distribution gap SD vs ED: origin {:.4}, projection {:.4}",
            ed_report.mean_origin, ed_report.mean_projection
        );
    }
    Ok(())
}

/// Small function-application helper for optional parsing chains.
trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    seed: u64,
    oa: f64,
    kappa: f64,
}

fn cmd_ablate(
    rc: &RunConfig,
    sd_dir: Option<&Path>,
    td_dir: Option<&Path>,
    seeds: Option<Vec<u64>>,
    include_baseline: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let seeds = seeds.unwrap_or_else(|| rc.seeds.clone());
    if seeds.is_empty() {
        return Err(CoreError::InvalidArgument("ablation needs at least one seed".into()).into());
    }
    let (sd_cube, td_cube) = match (sd_dir, td_dir) {
        (Some(s), Some(t)) => (load_cube(s)?, load_cube(t)?),
        (None, None) => {
            let (sd, td) = synth_pair(&rc.synth)?;
            let sd_path = out.join("synth/sd");
            let td_path = out.join("synth/td");
            save_cube(&sd, &sd_path)?;
            save_cube(&td, &td_path)?;
            (load_cube(&sd_path)?, load_cube(&td_path)?)
        }
        _ => {
            return Err(CoreError::InvalidArgument(
                "--sd and --td must be given together".into(),
            )
            .into())
        }
    };

    let mut variants: Vec<&str> = Ablation::VARIANTS.to_vec();
    if include_baseline {
        variants.push("baseline");
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in &seeds {
        let mut seeded = rc.clone();
        seeded.seed = seed;
        let patches = extract_patches(&sd_cube, rc.patch_size)?;
        let (train, val) = split_train_val(&patches, rc.split_ratio, seed)?;
        for variant in &variants {
            let mut vc = seeded.clone();
            vc.ablation = variant.to_string();
            let tc = vc.train_config()?;
            let (state, _) = fit(&train, &val, sd_cube.class_count, &tc)?;
            let (metrics, _) = evaluate_scene(&state, &td_cube)?;
            log::info!(
                "ablate {variant} seed {seed}: OA {:.4}, kappa {:.4}",
                metrics.overall_accuracy,
                metrics.kappa
            );
            rows.push(AblationRow {
                variant: variant.to_string(),
                seed,
                oa: metrics.overall_accuracy,
                kappa: metrics.kappa,
            });
        }
    }

    std::fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&rows)?)?;
    println!("{:<10} {:>6} {:>8} {:>8}", "variant", "seed", "OA", "KC");
    for r in &rows {
        println!(
            "{:<10} {:>6} {:>8.4} {:>8.4}",
            r.variant, r.seed, r.oa, r.kappa
        );
    }
    println!("---");
    for variant in &variants {
        let vs: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == variant).collect();
        let mean_oa = vs.iter().map(|r| r.oa).sum::<f64>() / vs.len() as f64;
        let mean_kc = vs.iter().map(|r| r.kappa).sum::<f64>() / vs.len() as f64;
        println!("{variant:<10} {:>6} {mean_oa:>8.4} {mean_kc:>8.4}", "mean");
    }
    Ok(())
}

fn cmd_render_map(cube_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let cube = load_cube(cube_dir)?;
    let palette = default_palette(cube.class_count);
    let target = out.join("ground_truth.png");
    render_map(&cube.labels, &palette, &target)?;
    println!("wrote {}", target.display());
    Ok(())
}

fn is_argument_error(err: &anyhow::Error) -> bool {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::InvalidArgument(_))
        | Some(CoreError::ShapeMismatch(_))
        | Some(CoreError::BandMismatch { .. })
        | Some(CoreError::MalformedCube(_)) => true,
        _ => false,
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("SDENET_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| CoreError::InvalidArgument("SDENET_THREADS must be an integer".into()))?;
        sdenet_core::init_thread_pool(n);
    }
    let rc = load_run_config(&cli)?;

    match &cli.command {
        Command::Synth {
            classes,
            bands,
            scene,
            blobs,
        } => {
            let mut rc = rc;
            if let Some(c) = classes {
                rc.synth.class_count = *c;
            }
            if let Some(b) = bands {
                let old = rc.synth.band_count;
                rc.synth.band_count = *b;
                if rc.synth.gain.len() == old {
                    rc.synth.gain = (0..*b)
                        .map(|i| 1.0 + 0.3 * i as f64 / (*b as f64 - 1.0).max(1.0))
                        .collect();
                    rc.synth.offset = vec![0.0; *b];
                }
            }
            if let Some(s) = scene {
                rc.synth.scene = (*s, *s);
            }
            if let Some(b) = blobs {
                rc.synth.blobs_per_class = *b;
            }
            let out = out_dir(&cli, "synth_out");
            write_resolved_config(&rc, &out)?;
            cmd_synth(&rc, &out)
        }
        Command::Train { sd } => {
            let out = out_dir(&cli, "train_out");
            write_resolved_config(&rc, &out)?;
            cmd_train(&rc, sd, &out)
        }
        Command::Eval {
            checkpoint,
            td,
            render_map,
            export_embeddings,
            mmd,
            sd,
        } => {
            let out = out_dir(&cli, "eval_out");
            write_resolved_config(&rc, &out)?;
            cmd_eval(
                &rc,
                checkpoint,
                td,
                *render_map,
                *export_embeddings,
                *mmd,
                sd.as_deref(),
                &out,
            )
        }
        Command::Ablate {
            sd,
            td,
            seeds,
            include_baseline,
        } => {
            let out = out_dir(&cli, "ablate_out");
            write_resolved_config(&rc, &out)?;
            cmd_ablate(
                &rc,
                sd.as_deref(),
                td.as_deref(),
                seeds.clone(),
                *include_baseline,
                &out,
            )
        }
        Command::RenderMap { cube } => {
            let out = out_dir(&cli, "render_out");
            write_resolved_config(&rc, &out)?;
            cmd_render_map(cube, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_argument_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
