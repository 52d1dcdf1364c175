//! The complex Gaussian mechanism and per-sample conjugate-gradient clipping.

use crate::ctensor::{self, CTensor, C64};
use crate::error::{domain, Result};
use crate::rng::Rng;
use crate::wirtinger::ConjugateGradient;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    bound: f64,
}

impl ClipSpec {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(domain(format!("clip bound must be positive, got {bound}")));
        }
        Ok(Self { bound })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Sensitivity `Δ` and noise standard deviation `σ` of a mechanism release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    sensitivity: f64,
    sigma: f64,
}

impl MechanismSpec {
    pub fn new(sensitivity: f64, sigma: f64) -> Result<Self> {
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(domain(format!("sensitivity must be positive, got {sensitivity}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(domain(format!("noise scale must be positive, got {sigma}")));
        }
        Ok(Self { sensitivity, sigma })
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// `g / max(1, ‖g‖/B)`.
pub fn clip_conjugate_gradient(g: &ConjugateGradient, bound: f64) -> Result<ConjugateGradient> {
    if !(bound > 0.0) {
        return Err(domain(format!("clip bound must be positive, got {bound}")));
    }
    if !g.is_finite() {
        return Err(domain("cannot clip a non-finite gradient"));
    }
    let n = g.norm();
    if n <= bound {
        return Ok(g.clone());
    }
    Ok(g.scale(bound / n))
}

/// Releases `value + ξ` with `ξ ~ N_C(0, σ² I)`.
pub fn gaussian_mechanism(value: &CTensor, spec: &MechanismSpec, rng: &mut Rng) -> Result<CTensor> {
    let noise = ctensor::sample_circular_gaussian(value.shape(), spec.sigma * spec.sigma, rng)?;
    value.add(&noise)
}

/// Sum of per-sample gradients, each re-clipped to `bound`, in slice order.
pub fn clipped_sum(
    per_sample: &[ConjugateGradient],
    zero: &ConjugateGradient,
    bound: f64,
) -> Result<ConjugateGradient> {
    let mut acc = zero.clone();
    for g in per_sample {
        acc.add_assign(&clip_conjugate_gradient(g, bound)?)?;
    }
    Ok(acc)
}

/// `(Σ clip(g_i) + N_C(0, σ²B² I)) / L`.
///
/// `zero` fixes the parameter shapes so that an empty Poisson lot still
/// releases noise. `sigma = 0` adds no noise and is only meaningful for the
/// non-private baseline.
pub fn privatize_lot(
    per_sample: &[ConjugateGradient],
    zero: &ConjugateGradient,
    bound: f64,
    sigma: f64,
    denominator: f64,
    rng: &mut Rng,
) -> Result<ConjugateGradient> {
    if !(denominator > 0.0) {
        return Err(domain(format!("lot denominator must be positive, got {denominator}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(domain(format!("noise multiplier must be non-negative, got {sigma}")));
    }
    let mut acc = clipped_sum(per_sample, zero, bound)?;
    if sigma > 0.0 {
        let variance = sigma * sigma * bound * bound;
        for g in &mut acc.grads {
            let noise = ctensor::sample_circular_gaussian(g.shape(), variance, rng)?;
            *g = g.add(&noise)?;
        }
    }
    Ok(acc.scale(1.0 / denominator))
}

/// Moment checks of a complex noise sample against `N_C(0, variance)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircularityAudit {
    pub samples: usize,
    pub target_variance: f64,
    pub var_re: f64,
    pub var_im: f64,
    pub cov: f64,
    /// Empirical `E[X²]`; zero for a circular distribution.
    pub pseudo_variance: (f64, f64),
    pub se_var_re: f64,
    pub se_var_im: f64,
    pub se_cov: f64,
    pub se_pseudo: (f64, f64),
}

struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn new() -> Self {
        Self {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        }
    }

    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn se(&self) -> f64 {
        let m = self.mean();
        ((self.sum_sq / self.n - m * m).max(0.0) / self.n).sqrt()
    }
}

impl CircularityAudit {
    pub fn from_samples(samples: &[C64], target_variance: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(domain("audit needs at least two samples"));
        }
        let (mut xx, mut yy, mut xy, mut pr) = (Moments::new(), Moments::new(), Moments::new(), Moments::new());
        for z in samples {
            xx.push(z.re * z.re);
            yy.push(z.im * z.im);
            xy.push(z.re * z.im);
            pr.push(z.re * z.re - z.im * z.im);
        }
        Ok(Self {
            samples: samples.len(),
            target_variance,
            var_re: xx.mean(),
            var_im: yy.mean(),
            cov: xy.mean(),
            pseudo_variance: (pr.mean(), 2.0 * xy.mean()),
            se_var_re: xx.se(),
            se_var_im: yy.se(),
            se_cov: xy.se(),
            se_pseudo: (pr.se(), 2.0 * xy.se()),
        })
    }

    /// Every statistic within `k` standard errors of its circular target.
    pub fn passes(&self, k: f64) -> bool {
        let half = self.target_variance / 2.0;
        (self.var_re - half).abs() <= k * self.se_var_re
            && (self.var_im - half).abs() <= k * self.se_var_im
            && self.cov.abs() <= k * self.se_cov
            && self.pseudo_variance.0.abs() <= k * self.se_pseudo.0
            && self.pseudo_variance.1.abs() <= k * self.se_pseudo.1
    }
}

/// Draws `n` samples from the circular sampler and audits them.
pub fn audit_noise(n: usize, variance: f64, rng: &mut Rng) -> Result<CircularityAudit> {
    let t = ctensor::sample_circular_gaussian(&[n.max(1)], variance, rng)?;
    CircularityAudit::from_samples(t.data(), variance)
}
