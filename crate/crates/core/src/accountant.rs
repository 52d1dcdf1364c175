//! Privacy accounting for the complex Gaussian mechanism.
//!
//! The analytic (ε, δ) profile and Rényi curve are expressed in terms of the
//! sensitivity `Δ` and the noise scale `σ`. Subsampled steps use the
//! integer-order Poisson bound and compose additively on a shared α-grid
//! before conversion to (ε, δ).
//!
//! The closed forms treat `σ` as the standard deviation of the privacy-loss
//! geometry along the difference direction. For circular noise
//! `N_C(0, σ²)`, whose real and imaginary parts each carry `σ²/2`, the exact
//! profile is the same formula at `σ/√2`; see [`circular_delta_of_epsilon`]
//! and [`Accounting`].

use crate::ctensor::C64;
use crate::error::{domain, Result};
use crate::rng::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, using the asymptotic tail series where `Φ` underflows.
pub fn ln_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return normal_cdf(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
    -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
}

fn check_mech(sensitivity: f64, sigma: f64) -> Result<()> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(domain(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Tight `δ(ε) = Φ(Δ/2σ − εσ/Δ) − e^ε Φ(−Δ/2σ − εσ/Δ)`.
pub fn delta_of_epsilon(sensitivity: f64, sigma: f64, epsilon: f64) -> Result<f64> {
    check_mech(sensitivity, sigma)?;
    if !(epsilon >= 0.0) {
        return Err(domain(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if epsilon == f64::INFINITY {
        return Ok(0.0);
    }
    let a = sensitivity / (2.0 * sigma);
    let b = epsilon * sigma / sensitivity;
    let first = normal_cdf(a - b);
    let second = (epsilon + ln_normal_cdf(-a - b)).exp();
    Ok((first - second).max(0.0))
}

/// Exact profile of `N_C(0, σ²)` noise, whose components each carry `σ²/2`.
pub fn circular_delta_of_epsilon(sensitivity: f64, sigma: f64, epsilon: f64) -> Result<f64> {
    delta_of_epsilon(sensitivity, sigma * FRAC_1_SQRT_2, epsilon)
}

/// Smallest `σ` with `δ(ε; σ) ≤ δ`, found by bisection to full precision.
pub fn calibrate_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(domain(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let d = |s: f64| delta_of_epsilon(sensitivity, s, epsilon);
    let (mut lo, mut hi) = (1e-3 * sensitivity, 1e3 * sensitivity);
    let mut guard = 0;
    while d(hi)? > delta {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(domain("no sigma reaches the target delta"));
        }
    }
    while d(lo)? <= delta {
        hi = lo;
        lo /= 2.0;
        guard += 1;
        if guard > 400 || lo == 0.0 {
            return Ok(hi);
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if d(mid)? <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `ρ = αΔ²/(2σ²)`.
pub fn rdp_gaussian(alpha: f64, sensitivity: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(domain(format!("Renyi order must exceed 1, got {alpha}")));
    }
    check_mech(sensitivity, sigma)?;
    Ok(alpha * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// Exact Rényi divergence between `N_C(μ₀, σ²)` and `N_C(μ₁, σ²)`.
pub fn circular_rdp(alpha: f64, sensitivity: f64, sigma: f64) -> Result<f64> {
    rdp_gaussian(alpha, sensitivity, sigma * FRAC_1_SQRT_2)
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    // exact enough for n ≤ 10⁴ through summed logs
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

fn logsumexp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Integer-order RDP of the Poisson-subsampled Gaussian at sensitivity 1:
/// `1/(α−1) · log Σ_k C(α,k) (1−q)^{α−k} q^k e^{(k²−k)/(2σ²)}`.
///
/// The binomial weights sum to one, so the log is evaluated as
/// `log1p(Σ_{k≥2} C(α,k) (1−q)^{α−k} q^k (e^{(k²−k)/(2σ²)} − 1))` in
/// log-space, which stays accurate as `q → 0`.
pub fn rdp_subsampled_gaussian(alpha: f64, q: f64, sigma: f64) -> Result<f64> {
    if !(alpha >= 2.0 && alpha.fract() == 0.0 && alpha < 1e6) {
        return Err(domain(format!(
            "subsampled bound needs an integer order >= 2, got {alpha}"
        )));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(domain(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(domain(format!("sigma must be positive, got {sigma}")));
    }
    let a = alpha as u64;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_s2 = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (2..=a)
        .filter_map(|k| {
            let rest = a - k;
            let weight = if rest == 0 { 0.0 } else { rest as f64 * ln_1mq };
            if weight == f64::NEG_INFINITY {
                return None;
            }
            let kf = k as f64;
            Some(ln_binomial(a, k) + weight + kf * ln_q + ln_expm1((kf * kf - kf) / two_s2))
        })
        .collect();
    Ok(softplus(logsumexp(&terms)) / (alpha - 1.0))
}

/// `ln(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 40.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + e^s)`.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Integers `2..=256` plus `{1.25, 1.5, 1.75}`, ascending.
pub fn default_alphas() -> Vec<f64> {
    let mut a = vec![1.25, 1.5, 1.75];
    a.extend((2..=256).map(f64::from));
    a
}

/// `1 + step, 1 + 2·step, …` up to `max`, for fine conversions of
/// full-batch curves.
pub fn dense_alphas(step: f64, max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && max > 1.0 + step) {
        return Err(domain("dense grid needs step > 0 and max > 1 + step"));
    }
    let n = ((max - 1.0) / step).floor() as usize;
    Ok((1..=n).map(|i| 1.0 + i as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub alphas: Vec<f64>,
    /// `INFINITY` where the bound is undefined at that order.
    pub rhos: Vec<f64>,
}

impl RdpCurve {
    /// One step of the sampled Gaussian at noise multiplier `sigma` and rate `q`.
    /// Fractional orders are only used when `q = 1`.
    pub fn step(alphas: &[f64], sigma: f64, q: f64) -> Result<Self> {
        let mut rhos = Vec::with_capacity(alphas.len());
        for &a in alphas {
            rhos.push(if q == 1.0 {
                rdp_gaussian(a, 1.0, sigma)?
            } else if a.fract() == 0.0 && a >= 2.0 {
                rdp_subsampled_gaussian(a, q, sigma)?
            } else {
                f64::INFINITY
            });
        }
        Ok(Self {
            alphas: alphas.to_vec(),
            rhos,
        })
    }

    pub fn scaled(&self, steps: u64) -> Self {
        Self {
            alphas: self.alphas.clone(),
            rhos: self.rhos.iter().map(|r| r * steps as f64).collect(),
        }
    }
}

/// Pointwise sum on a common grid.
pub fn compose(curves: &[RdpCurve]) -> Result<RdpCurve> {
    let first = curves.first().ok_or_else(|| domain("nothing to compose"))?;
    let mut rhos = vec![0.0; first.alphas.len()];
    for c in curves {
        if c.alphas != first.alphas {
            return Err(domain("curves must share an alpha grid"));
        }
        for (r, x) in rhos.iter_mut().zip(&c.rhos) {
            *r += x;
        }
    }
    Ok(RdpCurve {
        alphas: first.alphas.clone(),
        rhos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConversion {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
}

/// `ε = min_α ρ(α) + ln(1/δ)/(α−1)`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<DpConversion> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let mut best = DpConversion {
        epsilon: f64::INFINITY,
        delta,
        alpha: f64::NAN,
    };
    for (&a, &r) in curve.alphas.iter().zip(&curve.rhos) {
        let e = r + (1.0 / delta).ln() / (a - 1.0);
        if e < best.epsilon {
            best.epsilon = e;
            best.alpha = a;
        }
    }
    if !best.epsilon.is_finite() {
        return Err(domain("curve has no finite order"));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Poisson,
    /// Fixed-size lots without replacement. The Poisson bound is applied
    /// anyway and reports are marked approximate.
    Uniform,
}

/// How the noise multiplier maps onto the accountant's `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accounting {
    /// The multiplier is used as `σ` directly.
    #[default]
    Published,
    /// `σ/√2`, exact for circular noise with `σ²/2` per component.
    Circular,
}

impl Accounting {
    pub fn effective_sigma(self, sigma: f64) -> f64 {
        match self {
            Self::Published => sigma,
            Self::Circular => sigma * FRAC_1_SQRT_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSpec {
    Fixed(f64),
    /// `N^{-1.1}` for a dataset of `N` records.
    PowerOfN(usize),
}

impl DeltaSpec {
    pub fn value(self) -> Result<f64> {
        let d = match self {
            Self::Fixed(d) => d,
            Self::PowerOfN(n) => (n as f64).powf(-1.1),
        };
        if !(d > 0.0 && d < 1.0) {
            return Err(domain(format!("delta must lie in (0, 1), got {d}")));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepGroup {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
}

/// Running record of mechanism invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    groups: Vec<StepGroup>,
    delta: DeltaSpec,
    sampling: SamplingMode,
    #[serde(skip, default = "default_alphas")]
    alphas: Vec<f64>,
}

pub const UNIFORM_LABEL: &str = "approximate under uniform sampling";

impl PrivacyLedger {
    pub fn new(delta: DeltaSpec, sampling: SamplingMode) -> Result<Self> {
        delta.value()?;
        Ok(Self {
            groups: Vec::new(),
            delta,
            sampling,
            alphas: default_alphas(),
        })
    }

    pub fn with_alphas(mut self, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 1.0)) {
            return Err(domain("alpha grid must be non-empty with every order > 1"));
        }
        self.alphas = alphas;
        Ok(self)
    }

    /// Appends `steps` invocations at `(σ, q)`, merging with the last group
    /// when both match.
    pub fn record(&mut self, sigma: f64, q: f64, steps: u64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(domain(format!("ledger sigma must be positive, got {sigma}")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(domain(format!("sampling rate must lie in (0, 1], got {q}")));
        }
        match self.groups.last_mut() {
            Some(g) if g.sigma == sigma && g.q == q => g.steps += steps,
            _ => self.groups.push(StepGroup { sigma, q, steps }),
        }
        Ok(())
    }

    pub fn groups(&self) -> &[StepGroup] {
        &self.groups
    }

    pub fn total_steps(&self) -> u64 {
        self.groups.iter().map(|g| g.steps).sum()
    }

    pub fn delta(&self) -> Result<f64> {
        self.delta.value()
    }

    pub fn sampling(&self) -> SamplingMode {
        self.sampling
    }

    /// `None` under Poisson sampling.
    pub fn label(&self) -> Option<&'static str> {
        (self.sampling == SamplingMode::Uniform).then_some(UNIFORM_LABEL)
    }

    pub fn curve(&self) -> Result<RdpCurve> {
        if self.groups.is_empty() {
            return Err(domain("privacy ledger is empty"));
        }
        let curves = self
            .groups
            .iter()
            .map(|g| RdpCurve::step(&self.alphas, g.sigma, g.q).map(|c| c.scaled(g.steps)))
            .collect::<Result<Vec<_>>>()?;
        compose(&curves)
    }

    pub fn epsilon(&self) -> Result<DpConversion> {
        rdp_to_dp(&self.curve()?, self.delta()?)
    }

    /// One row per step group followed by a summary row.
    pub fn to_csv(&self) -> Result<String> {
        let conv = self.epsilon()?;
        let mut out = String::from("row,sigma,q,steps,epsilon,delta,best_alpha,note\n");
        for g in &self.groups {
            let _ = writeln!(out, "group,{},{},{},,,,", g.sigma, g.q, g.steps);
        }
        let _ = writeln!(
            out,
            "summary,,,,{},{},{},{}",
            conv.epsilon,
            conv.delta,
            conv.alpha,
            self.label().unwrap_or("")
        );
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub delta: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// Standard error floored at `1/n`, so zero-hit tails still carry the
    /// resolution of the sample.
    pub fn resolution(&self) -> f64 {
        self.std_error.max(1.0 / self.samples as f64)
    }
}

pub const MIN_MC_SAMPLES: usize = 100_000;
const MC_CHUNK: usize = 1 << 18;

fn mc_mean<F>(n: usize, rng: &Rng, draw: F) -> McEstimate
where
    F: Fn(&mut Rng) -> f64 + Sync,
{
    let chunks = n.div_ceil(MC_CHUNK);
    let (sum, sum_sq) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.fork(rng.counter().wrapping_add((c as u64) << 32));
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let y = draw(&mut r);
                s += y;
                s2 += y * y;
            }
            (s, s2)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    McEstimate {
        delta: mean,
        std_error: (var / nf).sqrt(),
        samples: n,
    }
}

fn hinge(epsilon: f64, omega: f64) -> f64 {
    (1.0 - (epsilon - omega).exp()).max(0.0)
}

/// Monte-Carlo estimate of `E[(1 − e^{ε−Ω})₊]` with
/// `Ω ~ N(Δ²/(2σ²), Δ²/σ²)`.
pub fn mc_privacy_loss_delta(sensitivity: f64, sigma: f64, epsilon: f64, n: usize, rng: &Rng) -> Result<McEstimate> {
    check_mech(sensitivity, sigma)?;
    if n < MIN_MC_SAMPLES {
        return Err(domain(format!("need at least {MIN_MC_SAMPLES} samples, got {n}")));
    }
    let mu = sensitivity * sensitivity / (2.0 * sigma * sigma);
    let sd = sensitivity / sigma;
    Ok(mc_mean(n, rng, |r| hinge(epsilon, mu + sd * r.normal())))
}

/// End-to-end estimate for the mechanism on complex outputs: draws
/// `O = f(D) + ξ` with circular `ξ ~ N_C(0, σ²)` and evaluates the
/// log-likelihood ratio against `f(D')`.
pub fn mc_mechanism_delta(
    f_d: &[C64],
    f_dprime: &[C64],
    sigma: f64,
    epsilon: f64,
    n: usize,
    rng: &Rng,
) -> Result<McEstimate> {
    if f_d.len() != f_dprime.len() || f_d.is_empty() {
        return Err(domain("neighbouring outputs must have equal non-zero length"));
    }
    let diff: Vec<C64> = f_d.iter().zip(f_dprime).map(|(a, b)| a - b).collect();
    let sens = crate::ctensor::l2_norm(&diff);
    check_mech(sens, sigma)?;
    if n < MIN_MC_SAMPLES {
        return Err(domain(format!("need at least {MIN_MC_SAMPLES} samples, got {n}")));
    }
    let s2 = sigma * sigma;
    let sd = sigma * FRAC_1_SQRT_2;
    Ok(mc_mean(n, rng, |r| {
        // densities ∝ exp(−‖o − μ‖²/σ²); o − f(D) = ξ
        let mut omega = 0.0;
        for d in &diff {
            let (a, b) = r.normal_pair();
            let xi = C64::new(sd * a, sd * b);
            omega += ((xi + d).norm_sqr() - xi.norm_sqr()) / s2;
        }
        hinge(epsilon, omega)
    }))
}
