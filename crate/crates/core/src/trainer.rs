//! Private SGD over complex parameters.
//!
//! Each step samples a lot, computes per-sample conjugate gradients,
//! clips them, adds circular noise once to the sum, averages, and descends.
//! Random streams are keyed by purpose and step index so that results do
//! not depend on the worker count.

use crate::accountant::{Accounting, DeltaSpec, DpConversion, PrivacyLedger, SamplingMode};
use crate::ctensor::CTensor;
use crate::data::{self, ComplexDataset};
use crate::error::{domain, Error, Result};
use crate::mechanism;
use crate::nn::{Architecture, Model, Network, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::wirtinger::{value_and_grad, ConjugateGradient};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1 << 62;
const NOISE_STREAM: u64 = 1 << 63;

/// Multiply the learning rate by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub factor: f64,
    pub every: usize,
}

fn default_delta() -> DeltaSpec {
    DeltaSpec::Fixed(1e-5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub clip_bound: f64,
    pub steps: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: DeltaSpec,
    #[serde(default)]
    pub accounting: Accounting,
    /// Must be set for `noise_multiplier = 0`.
    #[serde(default)]
    pub non_private: bool,
    /// Worker threads for per-sample gradients; `None` uses the global pool.
    #[serde(default)]
    pub workers: Option<usize>,
}

/// Clip bound standing in for "no clipping" in the non-private baseline.
pub const UNCLIPPED_BOUND: f64 = 1e12;

impl TrainConfig {
    pub fn private(
        learning_rate: f64,
        noise_multiplier: f64,
        sampling_rate: f64,
        clip_bound: f64,
        steps: usize,
    ) -> Self {
        Self {
            learning_rate,
            lr_decay: None,
            noise_multiplier,
            sampling_rate,
            clip_bound,
            steps,
            sampling: SamplingMode::Poisson,
            seed: 0,
            delta: default_delta(),
            accounting: Accounting::Published,
            non_private: false,
            workers: None,
        }
    }

    /// Plain SGD: no noise and an effectively infinite clip bound.
    pub fn non_private(learning_rate: f64, sampling_rate: f64, steps: usize) -> Self {
        Self {
            non_private: true,
            ..Self::private(learning_rate, 0.0, sampling_rate, UNCLIPPED_BOUND, steps)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad(format!(
                "noise_multiplier must be non-negative, got {}",
                self.noise_multiplier
            ));
        }
        if self.noise_multiplier == 0.0 && !self.non_private {
            return bad("noise_multiplier = 0 requires non_private = true".into());
        }
        if self.non_private && self.noise_multiplier != 0.0 {
            return bad("non_private runs must use noise_multiplier = 0".into());
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad(format!("sampling_rate must lie in (0, 1], got {}", self.sampling_rate));
        }
        if !(self.clip_bound > 0.0) {
            return bad(format!("clip_bound must be positive, got {}", self.clip_bound));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0) || d.every == 0 {
                return bad("lr_decay needs factor > 0 and every >= 1".into());
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        self.delta.value().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((step / d.every) as i32),
            None => self.learning_rate,
        }
    }

    pub fn is_private(&self) -> bool {
        self.noise_multiplier > 0.0
    }
}

/// Draws the indices of one lot, ascending.
pub fn sample_lot(n: usize, rate: f64, mode: SamplingMode, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(domain(format!("sampling rate must lie in (0, 1], got {rate}")));
    }
    match mode {
        SamplingMode::Poisson => Ok((0..n).filter(|_| rng.bernoulli(rate)).collect()),
        SamplingMode::Uniform => {
            let k = (rate * n as f64).round() as usize;
            if k == 0 {
                return Err(domain(format!("uniform lot of round({rate}·{n}) = 0 examples")));
            }
            let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Averaging denominator: expected lot size under Poisson sampling, exact
/// size under uniform sampling.
pub fn lot_denominator(n: usize, rate: f64, mode: SamplingMode, lot_size: usize) -> f64 {
    match mode {
        SamplingMode::Poisson => ((rate * n as f64).round()).max(1.0),
        SamplingMode::Uniform => lot_size.max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean per-sample loss before the update; `None` for an empty lot.
    pub loss: Option<f64>,
    pub lot_size: usize,
}

/// Per-sample losses and conjugate gradients, in lot order.
pub fn per_sample_gradients<M: Model>(
    model: &M,
    params: &[CTensor],
    data: &ComplexDataset,
    lot: &[usize],
) -> Result<Vec<(f64, ConjugateGradient)>> {
    lot.par_iter()
        .map(|&i| {
            let (x, y) = data
                .get(i)
                .ok_or_else(|| domain(format!("lot index {i} out of range")))?;
            value_and_grad(params, |t, v| model.loss(t, v, x, y))
        })
        .collect()
}

/// One ζ-DP-SGD step on `lot`. Appends to `ledger` when the step is private.
pub fn train_step<M: Model>(
    model: &M,
    params: &mut ParamSet,
    data: &ComplexDataset,
    lot: &[usize],
    cfg: &TrainConfig,
    step: usize,
    ledger: Option<&mut PrivacyLedger>,
) -> Result<StepStats> {
    let results = per_sample_gradients(model, &params.tensors, data, lot)?;
    let mut total = 0.0;
    for (k, (loss, g)) in results.iter().enumerate() {
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("sample {} produced loss {loss}", lot[k]),
            });
        }
        total += loss;
    }
    let grads: Vec<ConjugateGradient> = results.into_iter().map(|(_, g)| g).collect();
    let zero = ConjugateGradient::zeros_like(&params.tensors);
    let denom = lot_denominator(data.len(), cfg.sampling_rate, cfg.sampling, lot.len());
    let mut noise_rng = Rng::new(cfg.seed, NOISE_STREAM | step as u64);
    let update = mechanism::privatize_lot(
        &grads,
        &zero,
        cfg.clip_bound,
        cfg.noise_multiplier,
        denom,
        &mut noise_rng,
    )?;
    let lr = cfg.lr_at(step);
    for (p, g) in params.tensors.iter_mut().zip(&update.grads) {
        *p = p.sub(&g.scale_real(lr))?;
    }
    params.project();
    if cfg.is_private() {
        if let Some(l) = ledger {
            l.record(
                cfg.accounting.effective_sigma(cfg.noise_multiplier),
                cfg.sampling_rate,
                1,
            )?;
        }
    }
    Ok(StepStats {
        step,
        loss: (!lot.is_empty()).then(|| total / lot.len() as f64),
        lot_size: lot.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Binary tasks only.
    pub roc_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyReport {
    pub epsilon: f64,
    pub delta: f64,
    pub best_alpha: f64,
    pub accounting: Accounting,
    pub note: Option<&'static str>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub params: ParamSet,
    pub ledger: Option<PrivacyLedger>,
    /// Present iff the run was private and took at least one step.
    pub privacy: Option<PrivacyReport>,
    pub metrics: Option<Metrics>,
}

fn privacy_report(ledger: &PrivacyLedger, accounting: Accounting) -> Result<PrivacyReport> {
    let DpConversion { epsilon, delta, alpha } = ledger.epsilon()?;
    Ok(PrivacyReport {
        epsilon,
        delta,
        best_alpha: alpha,
        accounting,
        note: ledger.label(),
    })
}

pub const PROGRESS_HEADER: &str = "step,loss,lot_size,eps_so_far";

/// Runs `cfg.steps` steps from `params`. Progress rows go to `progress` when
/// given, with `eps_so_far` empty for non-private runs.
pub fn train_model<M: Model>(
    model: &M,
    mut params: ParamSet,
    train: &ComplexDataset,
    test: Option<&ComplexDataset>,
    cfg: &TrainConfig,
    mut progress: Option<&mut (dyn Write + Send)>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(domain("training set is empty"));
    }
    let mut run = || -> Result<TrainReport> {
        let mut ledger = if cfg.is_private() {
            Some(PrivacyLedger::new(cfg.delta, cfg.sampling)?)
        } else {
            None
        };
        if let Some(w) = progress.as_deref_mut() {
            writeln!(w, "{PROGRESS_HEADER}")?;
        }
        let mut steps = Vec::with_capacity(cfg.steps);
        for t in 0..cfg.steps {
            let mut srng = Rng::new(cfg.seed, SAMPLE_STREAM | t as u64);
            let lot = sample_lot(train.len(), cfg.sampling_rate, cfg.sampling, &mut srng)?;
            let stats = train_step(model, &mut params, train, &lot, cfg, t, ledger.as_mut())?;
            if let Some(w) = progress.as_deref_mut() {
                let eps = match &ledger {
                    Some(l) => l.epsilon()?.epsilon.to_string(),
                    None => String::new(),
                };
                let loss = stats.loss.map(|l| l.to_string()).unwrap_or_default();
                writeln!(w, "{},{},{},{}", t, loss, stats.lot_size, eps)?;
            }
            steps.push(stats);
        }
        let privacy = match &ledger {
            Some(l) if l.total_steps() > 0 => Some(privacy_report(l, cfg.accounting)?),
            _ => None,
        };
        let metrics = test.map(|d| evaluate(model, &params.tensors, d)).transpose()?;
        Ok(TrainReport {
            steps,
            params: params.clone(),
            ledger,
            privacy,
            metrics,
        })
    };
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Builds the network, initializes it from the config seed, and trains.
pub fn train(
    train: &ComplexDataset,
    test: Option<&ComplexDataset>,
    arch: &Architecture,
    cfg: &TrainConfig,
    progress: Option<&mut (dyn Write + Send)>,
) -> Result<(Network, TrainReport)> {
    let net = Network::new(arch.clone())?;
    if arch.input_shape != train.shape() {
        return Err(domain(format!(
            "architecture expects {:?} inputs, data has {:?}",
            arch.input_shape,
            train.shape()
        )));
    }
    if net.classes() != train.classes() {
        return Err(domain(format!(
            "network has {} classes, data has {}",
            net.classes(),
            train.classes()
        )));
    }
    let params = net.init_params(&mut Rng::new(cfg.seed, INIT_STREAM))?;
    let report = train_model(&net, params, train, test, cfg, progress)?;
    Ok((net, report))
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(domain("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(domain("ROC-AUC needs both classes present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain("ROC-AUC scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// First index of the largest score.
pub fn argmax(s: &[f64]) -> usize {
    (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best })
}

/// Argmax accuracy, plus ROC-AUC of the class-1 score for binary tasks.
pub fn evaluate<M: Model>(model: &M, params: &[CTensor], data: &ComplexDataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(domain("evaluation set is empty"));
    }
    let scores: Vec<Vec<f64>> = data
        .examples()
        .par_iter()
        .map(|x| model.scores(params, x))
        .collect::<Result<_>>()?;
    let correct = scores
        .iter()
        .zip(data.labels())
        .filter(|(s, &l)| argmax(s) == l)
        .count();
    let roc_auc = if data.classes() == 2 {
        let pos: Vec<bool> = data.labels().iter().map(|&l| l == 1).collect();
        let s1: Vec<f64> = scores.iter().map(|s| s[1]).collect();
        Some(roc_auc(&s1, &pos)?)
    } else {
        None
    };
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        roc_auc,
    })
}

/// JSON sidecar written next to a checkpoint's ZDPC payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub kinds: Vec<ParamKind>,
    pub architecture: Option<Architecture>,
    pub config: TrainConfig,
    pub ledger: Option<PrivacyLedger>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes all parameters as one flattened ZDPC example at `path` and the
/// metadata to `path` with a `.json` extension.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    let flat: Vec<_> = params.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    let ds = ComplexDataset::new(vec![CTensor::vector(flat)], vec![0], 2)?;
    data::save_zdpc(path, &ds)?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let ds = data::load_zdpc(path)?;
    let flat = ds
        .examples()
        .first()
        .ok_or_else(|| domain("checkpoint holds no payload"))?
        .data();
    let total: usize = meta.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.len() != total || meta.names.len() != meta.shapes.len() || meta.kinds.len() != meta.shapes.len() {
        return Err(domain("checkpoint payload does not match its metadata"));
    }
    let mut tensors = Vec::with_capacity(meta.shapes.len());
    let mut at = 0;
    for s in &meta.shapes {
        let n: usize = s.iter().product();
        tensors.push(CTensor::new(s.clone(), flat[at..at + n].to_vec())?);
        at += n;
    }
    let params = ParamSet {
        tensors,
        kinds: meta.kinds.clone(),
        names: meta.names.clone(),
    };
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::C64;
    use crate::nn::{ActivationKind, HeadSpec};
    use crate::wirtinger::{Tape, UnaryOp, Var};

    #[test]
    fn sample_lot_examples() {
        let mut rng = Rng::new(1, 0);
        assert_eq!(
            sample_lot(50, 1.0, SamplingMode::Poisson, &mut rng).unwrap(),
            (0..50).collect::<Vec<_>>()
        );
        let u = sample_lot(100, 0.1, SamplingMode::Uniform, &mut rng).unwrap();
        assert_eq!(u.len(), 10);
        assert!(u.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_lot(10, 0.01, SamplingMode::Uniform, &mut rng).is_err());
        assert!(sample_lot(10, 0.0, SamplingMode::Poisson, &mut rng).is_err());

        let sizes: Vec<f64> = (0..100)
            .map(|_| sample_lot(10_000, 0.05, SamplingMode::Poisson, &mut rng).unwrap().len() as f64)
            .collect();
        let mean = sizes.iter().sum::<f64>() / 100.0;
        assert!((mean - 500.0).abs() <= 4.0 * (500.0f64 * 0.95).sqrt());
    }

    /// `L = (θ − x)(θ − x)‾` per sample; the conjugate gradient is `θ − x`.
    struct Toy;

    impl Model for Toy {
        fn loss(&self, t: &mut Tape, p: &[Var], x: &CTensor, _y: usize) -> Result<Var> {
            let c = t.constant(x.clone());
            let d = t.sub(p[0], c)?;
            let s = t.unary(d, UnaryOp::AbsSq);
            Ok(t.sum(s))
        }

        fn scores(&self, _p: &[CTensor], _x: &CTensor) -> Result<Vec<f64>> {
            Ok(vec![0.5, 0.5])
        }

        fn param_kinds(&self) -> Vec<ParamKind> {
            vec![ParamKind::Complex]
        }
    }

    fn toy_data(points: &[C64]) -> ComplexDataset {
        let ex = points.iter().map(|&z| CTensor::vector(vec![z])).collect();
        ComplexDataset::new(ex, vec![0; points.len()], 2).unwrap()
    }

    fn toy_params(z: C64) -> ParamSet {
        ParamSet {
            tensors: vec![CTensor::vector(vec![z])],
            kinds: vec![ParamKind::Complex],
            names: vec!["theta".into()],
        }
    }

    #[test]
    fn toy_step_matches_hand_computation() {
        let pts = [C64::new(1.0, 0.0), C64::new(0.0, 3.0), C64::new(-0.2, 0.1)];
        let data = toy_data(&pts);
        let theta = C64::new(0.5, 0.5);
        let mut p = toy_params(theta);
        let mut cfg = TrainConfig::non_private(0.1, 1.0, 1);
        cfg.clip_bound = 1.0;
        train_step(&Toy, &mut p, &data, &[0, 1, 2], &cfg, 0, None).unwrap();
        let mut expect = C64::new(0.0, 0.0);
        for x in pts {
            let g = theta - x;
            expect += g / g.norm().max(1.0);
        }
        let want = theta - 0.1 * expect / 3.0;
        assert!((p.tensors[0].data()[0] - want).norm() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let data = toy_data(&[C64::new(1.0, 2.0)]);
        let mut p = toy_params(C64::new(0.3, -0.1));
        let before = p.clone();
        let cfg = TrainConfig::private(0.0, 1.0, 1.0, 1.0, 1);
        let mut ledger = PrivacyLedger::new(cfg.delta, cfg.sampling).unwrap();
        train_step(&Toy, &mut p, &data, &[0], &cfg, 0, Some(&mut ledger)).unwrap();
        assert_eq!(p, before);
        assert_eq!(ledger.total_steps(), 1);
    }

    #[test]
    fn non_private_matches_plain_sgd() {
        let mut rng = Rng::new(3, 0);
        let pts: Vec<C64> = (0..20).map(|_| C64::new(rng.normal(), rng.normal())).collect();
        let data = toy_data(&pts);
        let cfg = TrainConfig::non_private(0.05, 0.25, 10).with_seed(4);
        let mut p = toy_params(C64::new(2.0, -1.0));
        let mut plain = C64::new(2.0, -1.0);
        let n = pts.len() as f64;
        for t in 0..10 {
            let lot = sample_lot(
                pts.len(),
                0.25,
                SamplingMode::Poisson,
                &mut Rng::new(4, SAMPLE_STREAM | t as u64),
            )
            .unwrap();
            train_step(&Toy, &mut p, &data, &lot, &cfg, t, None).unwrap();
            let g: C64 = lot.iter().map(|&i| plain - pts[i]).sum();
            plain -= 0.05 * g / (0.25 * n).round();
        }
        let report = train_model(&Toy, toy_params(C64::new(2.0, -1.0)), &data, None, &cfg, None).unwrap();
        assert!((p.tensors[0].data()[0] - plain).norm() < 1e-10);
        assert_eq!(report.params, p);
        assert!(report.privacy.is_none());
    }

    #[test]
    fn permuting_a_lot_keeps_the_noiseless_update() {
        let mut rng = Rng::new(5, 0);
        let pts: Vec<C64> = (0..12).map(|_| C64::new(3.0 * rng.normal(), rng.normal())).collect();
        let data = toy_data(&pts);
        let cfg = TrainConfig {
            clip_bound: 1.5,
            ..TrainConfig::non_private(0.3, 1.0, 1)
        };
        let mut a = toy_params(C64::new(0.0, 0.0));
        let mut b = a.clone();
        let lot: Vec<usize> = (0..12).collect();
        let mut rev = lot.clone();
        rev.reverse();
        train_step(&Toy, &mut a, &data, &lot, &cfg, 0, None).unwrap();
        train_step(&Toy, &mut b, &data, &rev, &cfg, 0, None).unwrap();
        assert!((a.tensors[0].data()[0] - b.tensors[0].data()[0]).norm() < 1e-12);
    }

    #[test]
    fn nan_loss_aborts() {
        let data = toy_data(&[C64::new(f64::NAN, 0.0)]);
        let mut p = toy_params(C64::new(0.0, 0.0));
        let cfg = TrainConfig::non_private(0.1, 1.0, 1);
        match train_step(&Toy, &mut p, &data, &[0], &cfg, 7, None) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::private(0.1, 1.0, 0.05, 1.0, 10).validate().is_ok());
        assert!(TrainConfig::private(0.1, 0.0, 0.05, 1.0, 10).validate().is_err());
        assert!(TrainConfig::private(0.1, 1.0, 0.0, 1.0, 10).validate().is_err());
        assert!(TrainConfig::private(0.1, 1.0, 0.05, 0.0, 10).validate().is_err());
        assert!(TrainConfig::non_private(0.1, 0.5, 3).validate().is_ok());
        let decayed = TrainConfig {
            lr_decay: Some(StepDecay { factor: 0.5, every: 10 }),
            ..TrainConfig::private(0.4, 1.0, 0.05, 1.0, 10)
        };
        assert_eq!(decayed.lr_at(9), 0.4);
        assert_eq!(decayed.lr_at(25), 0.1);
        let json = serde_json::to_string(&decayed).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), decayed);
        assert!(serde_json::from_str::<TrainConfig>(
            r#"{"learning_rate":1,"noise_multiplier":1,"sampling_rate":0.1,"clip_bound":1,"steps":1,"bogus":1}"#
        )
        .is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());

        let mut rng = Rng::new(6, 0);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = Rng::new(7, 0);
        for _ in 0..20 {
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| (rng.uniform() * 5.0).floor()).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            if pairs > 0.0 {
                assert!((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_predictions_score_majority_fraction() {
        let data = toy_data(&[C64::new(0.0, 0.0); 5]);
        let relabeled = ComplexDataset::new(data.examples().to_vec(), vec![0, 0, 0, 1, 0], 2).unwrap();
        // Toy scores tie; argmax picks the first class.
        let m = evaluate(&Toy, &[CTensor::zeros(&[1])], &relabeled).unwrap();
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.roc_auc, Some(0.5));
    }

    fn small_blobs() -> (ComplexDataset, ComplexDataset) {
        let mut rng = Rng::new(21, 0);
        let ds = data::gen_complex_blobs(150, 2, 4, 5.0, &mut rng).unwrap();
        ds.split(100, &mut rng).unwrap()
    }

    #[test]
    fn zero_steps_returns_init_without_epsilon() {
        let (tr, _) = small_blobs();
        let arch = Architecture::mlp(4, &[8], 2, ActivationKind::Cardioid, HeadSpec::SoftmaxMagnitude);
        let cfg = TrainConfig::private(0.1, 1.0, 0.1, 1.0, 0);
        let (net, report) = train(&tr, None, &arch, &cfg, None).unwrap();
        let init = net.init_params(&mut Rng::new(0, INIT_STREAM)).unwrap();
        assert_eq!(report.params, init);
        assert!(report.privacy.is_none());
    }

    #[test]
    fn epsilon_ignores_data_and_doubles_with_steps() {
        let (tr, te) = small_blobs();
        let other = data::gen_complex_blobs(100, 2, 4, 1.0, &mut Rng::new(99, 0)).unwrap();
        let arch = Architecture::mlp(4, &[8], 2, ActivationKind::SigLog, HeadSpec::SoftmaxMagnitude);
        let cfg = TrainConfig::private(0.5, 1.2, 0.1, 1.0, 6);
        let (_, a) = train(&tr, Some(&te), &arch, &cfg, None).unwrap();
        let (_, b) = train(&other, None, &arch, &cfg, None).unwrap();
        assert_eq!(a.privacy.as_ref().unwrap().epsilon, b.privacy.as_ref().unwrap().epsilon);
        let doubled = TrainConfig {
            steps: 12,
            ..cfg.clone()
        };
        let (_, c) = train(&tr, None, &arch, &doubled, None).unwrap();
        let ca = a.ledger.unwrap().curve().unwrap();
        let cc = c.ledger.unwrap().curve().unwrap();
        for (x, y) in ca.rhos.iter().zip(&cc.rhos) {
            if x.is_finite() {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let (tr, _) = small_blobs();
        let arch = Architecture::mlp(4, &[6], 2, ActivationKind::IGaussian, HeadSpec::SoftmaxMagnitude);
        let one = TrainConfig {
            workers: Some(1),
            ..TrainConfig::private(0.3, 1.0, 0.2, 1.0, 4).with_seed(11)
        };
        let three = TrainConfig {
            workers: Some(3),
            ..one.clone()
        };
        let (_, a) = train(&tr, None, &arch, &one, None).unwrap();
        let (_, b) = train(&tr, None, &arch, &three, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn progress_csv_and_checkpoint_round_trip() {
        let (tr, te) = small_blobs();
        let arch = Architecture::mlp(
            4,
            &[6],
            1,
            ActivationKind::TrainableCardioidPerFeature,
            HeadSpec::MagnitudeSigmoid,
        );
        let cfg = TrainConfig {
            sampling: SamplingMode::Uniform,
            ..TrainConfig::private(0.3, 1.0, 0.2, 1.0, 3)
        };
        let mut csv = Vec::new();
        let (net, report) = train(&tr, Some(&te), &arch, &cfg, Some(&mut csv)).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PROGRESS_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].split(',').all(|f| !f.is_empty()));
        assert!(report.metrics.unwrap().roc_auc.is_some());
        assert!(report.privacy.as_ref().unwrap().note.is_some());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.zdpc");
        let meta = CheckpointMeta {
            names: report.params.names.clone(),
            shapes: net.param_shapes(),
            kinds: report.params.kinds.clone(),
            architecture: Some(arch.clone()),
            config: cfg.clone(),
            ledger: report.ledger.clone(),
        };
        save_checkpoint(&path, &report.params, &meta).unwrap();
        let (p, m) = load_checkpoint(&path).unwrap();
        assert_eq!(p, report.params);
        assert_eq!(m.config, cfg);
        assert!(p
            .tensors
            .iter()
            .zip(&p.kinds)
            .all(|(t, k)| *k == ParamKind::Complex || t.data().iter().all(|z| z.im == 0.0)));
    }
}
