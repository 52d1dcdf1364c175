use anyhow::{anyhow, bail, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use zdp_core::accountant::{self, Accounting, DeltaSpec, PrivacyLedger, SamplingMode};
use zdp_core::ctensor::{sample_circular_gaussian, CTensor};
use zdp_core::mechanism::CircularityAudit;
use zdp_core::nn::{ActivationKind, Model, Network};
use zdp_core::trainer::{self, CheckpointMeta, TrainConfig, UNCLIPPED_BOUND};
use zdp_core::wirtinger::{self, UnaryOp};
use zdp_core::{Rng, C64};

use crate::config::{self, RunConfig};
use crate::{AccountingArg, Cli, Command, Mode, UsageError};

/// Statistics must lie within this many standard errors of their targets.
const AUDIT_SIGMAS: f64 = 4.0;
/// Monte-Carlo delta must lie within this many standard errors.
const DELTA_SIGMAS: f64 = 3.0;
/// Inputs closer than this to a non-differentiable point are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const KINK_RETRIES: usize = 100;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Calibrate {
            sensitivity,
            eps,
            delta,
        } => calibrate(*sensitivity, *eps, *delta),
        Command::Account {
            sigma,
            sampling_rate,
            steps,
            delta,
            mode,
            accounting,
            profile,
            sensitivity,
            eps,
        } => {
            let accounting = match accounting {
                AccountingArg::Published => Accounting::Published,
                AccountingArg::Circular => Accounting::Circular,
            };
            if *profile {
                let eps = eps.ok_or_else(|| usage("--profile needs --eps"))?;
                account_profile(*sensitivity, *sigma, eps, accounting)
            } else {
                let mode = match mode {
                    Mode::Poisson => SamplingMode::Poisson,
                    Mode::Uniform => SamplingMode::Uniform,
                };
                account(*sigma, *sampling_rate, *steps, *delta, mode, accounting)
            }
        }
        Command::AuditNoise { sigma, n, inject_scale } => audit_noise(*sigma, *n, *inject_scale, seed),
        Command::AuditDelta {
            sensitivity,
            sigma,
            eps,
            n,
            complex_dim,
        } => audit_delta(*sensitivity, *sigma, *eps, *n, *complex_dim, seed),
        Command::Gradcheck { arch, seeds, tol } => gradcheck(arch, *seeds, *tol, seed),
        Command::Train {
            config,
            no_dp,
            progress,
            checkpoint,
        } => {
            let mut cfg = RunConfig::load(config)?;
            apply_overrides(&mut cfg.train, cli, *no_dp);
            train(
                &cfg,
                progress.as_deref(),
                checkpoint.as_deref(),
                cli.deterministic_output,
            )
        }
        Command::BenchActivations { config, repeats } => {
            let mut cfg = RunConfig::load(config)?;
            apply_overrides(&mut cfg.train, cli, false);
            bench_activations(&cfg, *repeats, cli.deterministic_output)
        }
    }
}

fn apply_overrides(train: &mut TrainConfig, cli: &Cli, no_dp: bool) {
    if let Some(s) = cli.seed {
        train.seed = s;
    }
    if cli.workers.is_some() {
        train.workers = cli.workers;
    }
    if no_dp {
        train.noise_multiplier = 0.0;
        train.clip_bound = UNCLIPPED_BOUND;
        train.non_private = true;
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(usage(format!("delta out of range: {delta} is not in (0, 1)")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(usage(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(usage(format!("eps must be non-negative, got {eps}")));
    }
    Ok(())
}

fn calibrate(sensitivity: f64, eps: f64, delta: f64) -> Result<()> {
    check_delta(delta)?;
    check_positive("sensitivity", sensitivity)?;
    check_eps(eps)?;
    let sigma = accountant::calibrate_sigma(sensitivity, eps, delta)?;
    println!("sigma={sigma}");
    Ok(())
}

fn account_profile(sensitivity: f64, sigma: f64, eps: f64, accounting: Accounting) -> Result<()> {
    check_positive("sensitivity", sensitivity)?;
    check_positive("sigma", sigma)?;
    check_eps(eps)?;
    let delta = match accounting {
        Accounting::Published => accountant::delta_of_epsilon(sensitivity, sigma, eps)?,
        Accounting::Circular => accountant::circular_delta_of_epsilon(sensitivity, sigma, eps)?,
    };
    println!("delta={delta}");
    Ok(())
}

fn account(sigma: f64, q: f64, steps: u64, delta: f64, mode: SamplingMode, accounting: Accounting) -> Result<()> {
    check_delta(delta)?;
    check_positive("sigma", sigma)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(usage(format!("sampling-rate must lie in (0, 1], got {q}")));
    }
    let mut ledger = PrivacyLedger::new(DeltaSpec::Fixed(delta), mode)?;
    if steps == 0 {
        println!("epsilon=0");
        println!("best_alpha=none");
    } else {
        ledger.record(accounting.effective_sigma(sigma), q, steps)?;
        let dp = ledger.epsilon()?;
        println!("epsilon={}", dp.epsilon);
        println!("best_alpha={}", dp.alpha);
    }
    println!("delta={delta}");
    if let Some(note) = ledger.label() {
        println!("note={note}");
    }
    Ok(())
}

fn audit_noise(sigma: f64, n: usize, inject_scale: f64, seed: u64) -> Result<()> {
    check_positive("sigma", sigma)?;
    if n < 2 {
        return Err(usage("n must be at least 2"));
    }
    let variance = sigma * sigma;
    let mut draws = sample_circular_gaussian(&[n], variance, &mut Rng::new(seed, 0))?
        .data()
        .to_vec();
    if inject_scale != 1.0 {
        for z in &mut draws {
            z.im *= inject_scale;
        }
    }
    let a = CircularityAudit::from_samples(&draws, variance)?;
    let half = variance / 2.0;
    let checks = [
        ("var_re", a.var_re, half, a.se_var_re),
        ("var_im", a.var_im, half, a.se_var_im),
        ("cov", a.cov, 0.0, a.se_cov),
        ("pseudo_re", a.pseudo_variance.0, 0.0, a.se_pseudo.0),
        ("pseudo_im", a.pseudo_variance.1, 0.0, a.se_pseudo.1),
    ];
    println!("samples={n}");
    let mut failed = Vec::new();
    for (name, value, target, se) in checks {
        let z = (value - target) / se;
        println!("{name}={value:.6e} target={target:.6e} se={se:.3e} z={z:.3}");
        if z.abs() > AUDIT_SIGMAS {
            failed.push(format!("{name} is {z:.1} standard errors from {target}"));
        }
    }
    if failed.is_empty() {
        println!("result=PASS");
        Ok(())
    } else {
        println!("result=FAIL");
        bail!("noise audit failed: {}", failed.join("; "))
    }
}

fn audit_delta(sensitivity: f64, sigma: f64, eps: f64, n: usize, complex_dim: Option<usize>, seed: u64) -> Result<()> {
    check_positive("sensitivity", sensitivity)?;
    check_positive("sigma", sigma)?;
    check_eps(eps)?;
    if n < accountant::MIN_MC_SAMPLES {
        return Err(usage(format!("n must be at least {}", accountant::MIN_MC_SAMPLES)));
    }
    let rng = Rng::new(seed, 0);
    let (mc, analytic, reference) = match complex_dim {
        None => (
            accountant::mc_privacy_loss_delta(sensitivity, sigma, eps, n, &rng)?,
            accountant::delta_of_epsilon(sensitivity, sigma, eps)?,
            "published",
        ),
        Some(0) => return Err(usage("complex-dim must be at least 1")),
        Some(d) => {
            let mut dir_rng = rng.fork(u64::MAX);
            let raw: Vec<C64> = (0..d).map(|_| C64::new(dir_rng.normal(), dir_rng.normal())).collect();
            let norm = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let shifted: Vec<C64> = raw.iter().map(|z| z * (sensitivity / norm)).collect();
            let origin = vec![C64::new(0.0, 0.0); d];
            (
                accountant::mc_mechanism_delta(&origin, &shifted, sigma, eps, n, &rng)?,
                accountant::circular_delta_of_epsilon(sensitivity, sigma, eps)?,
                "circular",
            )
        }
    };
    let z = (mc.delta - analytic) / mc.resolution();
    println!("samples={}", mc.samples);
    println!("delta_hat={:.6e}", mc.delta);
    println!("std_error={:.3e}", mc.std_error);
    println!("delta_analytic={analytic:.6e}");
    println!("reference={reference}");
    println!("z={z:.3}");
    if z.abs() <= DELTA_SIGMAS {
        println!("result=PASS");
        Ok(())
    } else {
        println!("result=FAIL");
        bail!("Monte-Carlo delta is {z:.1} standard errors from the analytic value")
    }
}

fn gradcheck(path: &std::path::Path, seeds: u64, tol: f64, base_seed: u64) -> Result<()> {
    let arch = config::load_architecture(path)?;
    let net = Network::new(arch.clone())?;
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let seed = base_seed + s;
        let mut rng = Rng::new(seed, 0);
        let params = net.init_params(&mut rng)?;
        let mut attempts = 0;
        let report = loop {
            let x = sample_circular_gaussian(&arch.input_shape, 1.0, &mut rng)?;
            let y = rng.below(net.classes() as u64) as usize;
            let report = wirtinger::gradcheck(
                |t, v| net.loss(t, v, &x, y),
                &params.tensors,
                wirtinger::DEFAULT_FD_STEP,
            )?;
            if report.kink_margin >= KINK_MARGIN {
                break report;
            }
            attempts += 1;
            if attempts >= KINK_RETRIES {
                bail!("seed {seed}: no input found at least {KINK_MARGIN} away from every kink");
            }
        };
        println!(
            "seed={seed} max_rel_error={:.3e} entries={} resampled={attempts}",
            report.max_rel_error, report.entries_checked
        );
        worst = worst.max(report.max_rel_error);
    }

    let mut rng = Rng::new(base_seed, 1);
    let z = C64::new(rng.normal(), rng.normal());
    let (_, g) = wirtinger::value_and_grad(&[CTensor::vector(vec![z])], |t, v| {
        let s = t.unary(v[0], UnaryOp::AbsSq);
        Ok(t.sum(s))
    })?;
    let wirt = g.norm();
    let flat = (2.0 * z.re).hypot(2.0 * z.im);
    println!("zzbar_wirtinger_norm={wirt:.12}");
    println!("zzbar_r2_norm={flat:.12}");
    println!("zzbar_ratio={:.12}", flat / wirt);

    println!("max_rel_error={worst:.3e}");
    if worst <= tol {
        println!("result=PASS");
        Ok(())
    } else {
        println!("result=FAIL");
        bail!("gradient check error {worst:.3e} exceeds {tol:.1e}")
    }
}

fn train(
    cfg: &RunConfig,
    progress: Option<&std::path::Path>,
    checkpoint: Option<&std::path::Path>,
    deterministic: bool,
) -> Result<()> {
    let start = Instant::now();
    let (tr, te) = cfg.datasets()?;
    let progress = progress
        .map(|p| p.to_path_buf())
        .or_else(|| cfg.outputs.progress_csv.as_ref().map(|p| cfg.resolve(p)));
    let checkpoint = checkpoint
        .map(|p| p.to_path_buf())
        .or_else(|| cfg.outputs.checkpoint.as_ref().map(|p| cfg.resolve(p)));

    let mut sink = match &progress {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| usage(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => None,
    };
    let (net, report) = trainer::train(
        &tr,
        te.as_ref(),
        &cfg.architecture,
        &cfg.train,
        sink.as_mut().map(|w| w as &mut (dyn Write + Send)),
    )
    .map_err(|e| match e {
        zdp_core::Error::Domain(m) | zdp_core::Error::Config(m) => usage(m),
        other => anyhow!(other),
    })?;
    if let Some(mut w) = sink {
        w.flush()?;
    }

    println!("train_examples={}", tr.len());
    println!("test_examples={}", te.as_ref().map_or(0, |d| d.len()));
    println!("steps={}", report.steps.len());
    match report.steps.iter().rev().find_map(|s| s.loss) {
        Some(l) => println!("final_loss={l:.6}"),
        None => println!("final_loss=none"),
    }
    if let Some(m) = &report.metrics {
        println!("accuracy={:.4}", m.accuracy);
        if let Some(auc) = m.roc_auc {
            println!("roc_auc={auc:.4}");
        }
    }
    match (&report.privacy, cfg.train.is_private()) {
        (Some(p), _) => {
            println!("epsilon={:.4}", p.epsilon);
            println!("delta={:e}", p.delta);
            println!("best_alpha={}", p.best_alpha);
            if let Some(note) = p.note {
                println!("note={note}");
            }
        }
        (None, false) => println!("epsilon=inf"),
        (None, true) => println!("epsilon=none"),
    }

    if let Some(path) = checkpoint {
        let meta = CheckpointMeta {
            names: report.params.names.clone(),
            shapes: net.param_shapes(),
            kinds: report.params.kinds.clone(),
            architecture: Some(cfg.architecture.clone()),
            config: cfg.train.clone(),
            ledger: report.ledger.clone(),
        };
        trainer::save_checkpoint(&path, &report.params, &meta)?;
        println!("checkpoint={}", path.display());
    }
    if !deterministic {
        println!("elapsed_s={:.3}", start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn bench_activations(cfg: &RunConfig, repeats: u64, deterministic: bool) -> Result<()> {
    if repeats == 0 {
        return Err(usage("repeats must be at least 1"));
    }
    let start = Instant::now();
    let (tr, te) = cfg.datasets()?;
    let te = te.ok_or_else(|| usage("bench-activations needs held-out data (n_test > 0 or a test file)"))?;
    let seeds: Vec<u64> = (0..repeats).map(|i| cfg.train.seed + i).collect();
    let mut rows = Vec::new();
    for kind in ActivationKind::ALL {
        let arch = cfg.architecture.with_activation(kind);
        let mut accs = Vec::new();
        for &seed in &seeds {
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (_, report) = trainer::train(&tr, Some(&te), &arch, &tc, None)?;
            accs.push(report.metrics.map(|m| m.accuracy).unwrap_or(f64::NAN));
        }
        let (mean, std) = mean_std(&accs);
        rows.push((kind, mean, std));
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    println!(
        "seeds={}",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
    );
    println!("activation,accuracy_mean,accuracy_std,summary");
    for (kind, mean, std) in rows {
        println!("{},{mean:.4},{std:.4},{mean:.4}±{std:.4}", kind.key());
    }
    if !deterministic {
        println!("elapsed_s={:.3}", start.elapsed().as_secs_f64());
    }
    Ok(())
}
