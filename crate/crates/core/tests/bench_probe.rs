//! Temporary tuning probe for the synthetic benchmark (not part of the suite).
use sdenet_core::data::*;
use sdenet_core::evaluation::*;
use sdenet_core::trainer::*;
use std::time::Instant;

fn run_variant(sd: &RasterCube, td: &RasterCube, variant: &str, seed: u64, epochs: usize) -> (f64, f64) {
    let patches = extract_patches(sd, 13).unwrap();
    let (train, val) = split_train_val(&patches, 0.8, seed).unwrap();
    let mut config = TrainConfig {
        epochs,
        batch_size: 128,
        seed,
        d_se: 16,
        ablation: Ablation::variant(variant).unwrap(),
        ..TrainConfig::default()
    };
    config.loss.lambda1 = 0.1;
    config.loss.lambda2 = 0.1;
    let t0 = Instant::now();
    let (state, log) = fit(&train, &val, sd.class_count, &config).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (metrics, _) = evaluate_scene(&state, td).unwrap();
    let val_best = log.iter().map(|r| r.val_oa).fold(0.0f64, f64::max);
    println!("  variant {variant} seed {seed}: TD OA {:.4} (val {:.3}) in {:.1}s", metrics.overall_accuracy, val_best, secs);
    (metrics.overall_accuracy, secs)
}

#[test]
#[ignore]
fn probe_benchmark() {
    let spec = SyntheticSpec::with_seed(0);
    let (sd, td) = synth_pair(&spec).unwrap();
    println!("labeled px: {}", sd.labeled_count());
    let t0 = Instant::now();
    for seed in [0u64, 1] {
        run_variant(&sd, &td, "baseline", seed, 30);
        run_variant(&sd, &td, "full", seed, 30);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
