//! Scratch diagnostics for tuning desk-scale defaults. Ignored by default;
//! run with `cargo test -p ngcl-core --test scratch_tune -- --ignored --nocapture`.

use ngcl_core::datagen::SyntheticSpec;
use ngcl_core::metrics::metrics_report;
use ngcl_core::model::{forward_infer, Method};
use ngcl_core::rng::Rng;
use ngcl_core::trainer::{train, DataSource, SyntheticSource, ACTIVATION_EPS};
use ngcl_core::verify::{self, VerifyConfig};

fn method_cfg(method: Method, seed: u64) -> VerifyConfig {
    let mut cfg = VerifyConfig::desk_bayes(seed);
    cfg.train.strategy = method.strategy(cfg.train.rho, 1.0);
    cfg.model.nonneg = method.nonneg();
    if !cfg.train.strategy.uses_gate() {
        cfg.train.lambda = 0.0;
    }
    cfg
}

fn run_method(method: Method, seed: u64) -> (f64, f64, Vec<f64>) {
    let cfg = method_cfg(method, seed);
    let mut source = SyntheticSource::new(cfg.spec.clone(), cfg.batches_per_epoch).unwrap();
    let out = train(&cfg.train, &cfg.model, &mut source).unwrap();
    let eval = source.eval_set(cfg.eval_samples).unwrap();
    let mut rng = Rng::with_stream(seed, 777);
    let fwd = forward_infer(
        &out.encoder,
        out.gate.as_ref(),
        cfg.train.strategy,
        &eval.anchors,
        &mut rng,
    )
    .unwrap();
    let report = metrics_report(&fwd.z_gated, &eval.labels, ACTIVATION_EPS).unwrap();
    let losses: Vec<f64> = out.epoch_rows.iter().map(|r| r.total).collect();
    (report.sc_mean, report.activation_ratio, losses)
}

#[test]
#[ignore]
fn methods_overview() {
    for method in [Method::Cl, Method::Ncl, Method::BayesnclSte] {
        for seed in [1u64, 2, 3] {
            let (sc, act, losses) = run_method(method, seed);
            let first = losses.first().copied().unwrap_or(f64::NAN);
            let last = losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "{:<14} seed {}  SC {:.3}  act {:.2}  loss {:.3} -> {:.3}",
                method.label(),
                seed,
                sc,
                act,
                first,
                last
            );
        }
    }
}

#[test]
#[ignore]
fn gradient_probe_overview() {
    for seed in [1u64, 2, 3] {
        let cfg = VerifyConfig::desk_ncl(seed);
        let report = verify::probe_gradient_instability(&cfg).unwrap();
        println!("seed {seed}:");
        for c in &report.claims {
            println!("  [{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
}

#[test]
#[ignore]
fn filtering_overview() {
    let cfg = VerifyConfig::desk_bayes(0);
    let report = verify::filtering_sweep(&cfg, &[0.5, 0.7, 0.9, 0.95, 0.99], &[1, 2, 3]).unwrap();
    for pi in [0.5, 0.7, 0.9, 0.95, 0.99] {
        println!(
            "pi {:.2}: median bg alpha {:?}",
            pi,
            report.median_bg_alpha(pi)
        );
    }
    for p in &report.points {
        println!(
            "  pi {:.2} seed {}: bg {:.3} signal {:.3}",
            p.pi, p.seed, p.bg_alpha, p.signal_alpha
        );
    }
    for c in &report.claims {
        println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("gamma {:?}", report.gamma);
}

#[test]
#[ignore]
fn alpha_trajectory() {
    // Watch mean alpha on background vs signal dims across training.
    let cfg = VerifyConfig::desk_bayes(1);
    let mut source = SyntheticSource::new(cfg.spec.clone(), cfg.batches_per_epoch).unwrap();
    let mut c = cfg.train.clone();
    c.stats_every = 0;
    for epochs in [5usize, 10, 20, 40] {
        c.epochs = epochs;
        let mut src = SyntheticSource::new(cfg.spec.clone(), cfg.batches_per_epoch).unwrap();
        let out = train(&c, &cfg.model, &mut src).unwrap();
        let eval = src.eval_set(cfg.eval_samples).unwrap();
        let z = ngcl_core::model::encode(&out.encoder, &eval.anchors).unwrap();
        let alpha = ngcl_core::model::gate_alpha(out.gate.as_ref().unwrap(), &z).unwrap();
        let (px, pl) = verify::balanced_probe_set(&cfg.spec, cfg.eval_samples).unwrap();
        let pz = ngcl_core::model::encode(&out.encoder, &px).unwrap();
        let assign = verify::assign_dims(&pz, &pl, cfg.spec.m, 0.2);
        let bg = assign.background_dims();
        let sig = assign.signal_dims();
        let mean_over = |dims: &[usize]| -> f64 {
            if dims.is_empty() {
                return f64::NAN;
            }
            let mut acc = 0.0;
            for &j in dims {
                for i in 0..alpha.rows() {
                    acc += alpha.get(i, j);
                }
            }
            acc / (dims.len() * alpha.rows()) as f64
        };
        println!(
            "epochs {:>3}: bg dims {:?} alpha {:.3}; signal dims {} alpha {:.3}; unassigned {}",
            epochs,
            bg,
            mean_over(&bg),
            sig.len(),
            mean_over(&sig),
            alpha.cols() - bg.len() - sig.len()
        );
    }
    let _ = source.train_batch(4);
}
