//! Black-box quality probe (manual).
use liitr::blackbox::{BlackboxConfig, BlackboxModel};
use liitr::numkit::Rng;
use liitr::simgen::{self, SimConfig};

#[test]
#[ignore = "manual probe"]
fn bb_quality() {
    let n_train: usize = std::env::var("BB_N").ok().and_then(|v| v.parse().ok()).unwrap_or(2_000);
    let hidden: Vec<usize> = std::env::var("BB_HIDDEN")
        .unwrap_or_else(|_| "64,64".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let epochs: usize = std::env::var("BB_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let patience: usize = std::env::var("BB_PATIENCE").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let lr: f64 = std::env::var("BB_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let decay: f64 = std::env::var("BB_DECAY").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let batch: usize = std::env::var("BB_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(256);
    let wd: f64 = std::env::var("BB_WD").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let swa: usize = std::env::var("BB_SWA").ok().and_then(|v| v.parse().ok()).unwrap_or(0);

    let (data, truth) = simgen::generate(&SimConfig {
        n: n_train + 1_000,
        seed: 2024,
        ..SimConfig::default()
    })
    .unwrap();
    let train = data.slice(0, n_train).unwrap();
    let cfg = BlackboxConfig {
        hidden: hidden.clone(),
        max_epochs: epochs,
        patience,
        learning_rate: lr,
        lr_decay: decay,
        batch_size: batch,
        weight_decay: wd,
        swa_epochs: swa,
        ..BlackboxConfig::default()
    };
    let t0 = std::time::Instant::now();
    let bb = BlackboxModel::fit(&train, &cfg, Rng::new(2024).child("blackbox")).unwrap();

    let mut agree = 0usize;
    let mut delta_err = 0.0;
    for i in n_train..n_train + 1_000 {
        let x = data.x.row(i);
        let rec = bb.itr(x).unwrap();
        let oracle = simgen::oracle_optimal_treatment(x, &truth);
        agree += usize::from(rec == oracle);
        let mut d1 = vec![1.0];
        d1.extend_from_slice(x);
        let mut d0 = vec![0.0];
        d0.extend_from_slice(x);
        let delta_hat = bb.predict(&d1).unwrap() - bb.predict(&d0).unwrap();
        delta_err += (delta_hat - truth.treatment_effect(x)).abs();
    }
    println!(
        "hidden {:?} epochs_run {} val_r2 {:.4} itr_agree {:.3} mean|Δ̂−Δ| {:.3} elapsed {:?}",
        hidden,
        bb.train_log.len(),
        bb.val_r2,
        agree as f64 / 1_000.0,
        delta_err / 1_000.0,
        t0.elapsed()
    );
}
