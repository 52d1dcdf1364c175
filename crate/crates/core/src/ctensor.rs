//! Dense complex tensors.
//!
//! Storage is row-major with each scalar held as an interleaved `(re, im)`
//! pair of `f64` (the layout of [`num_complex::Complex64`]).

use crate::error::{domain, Error, Result};
use crate::rng::Rng;
use num_complex::Complex64;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(domain(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(domain(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, ZERO)
    }

    pub fn filled(shape: &[usize], value: C64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: C64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<C64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_real(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<C64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: C64) -> Self {
        self.map(|z| z * c)
    }

    pub fn scale_real(&self, c: f64) -> Self {
        self.map(|z| z * c)
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }

    /// Elementwise modulus, stored as real-valued complex entries.
    pub fn abs(&self) -> Self {
        self.map(|z| C64::new(z.norm(), 0.0))
    }

    /// Elementwise phase in `(-π, π]`; `arg(0) = 0`.
    pub fn arg(&self) -> Self {
        self.map(|z| C64::new(arg(z), 0.0))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Contracts the last axis of `self` with the first axis of `other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![ZERO; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let src = &other.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape[..self.shape.len() - 1].to_vec();
        shape.extend_from_slice(&other.shape[1..]);
        Ok(Self { shape, data: out })
    }

    /// Hermitian L2 norm `sqrt(Σ z z̄)`.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    /// Squared Hermitian norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Inner product `Σ a_i conj(b_i)`.
    pub fn dot_conj(&self, other: &Self) -> Result<C64> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b.conj()).sum())
    }
}

/// Output spatial size of a valid (unpadded) convolution.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input >= kernel && stride > 0).then(|| (input - kernel) / stride + 1)
}

/// Valid cross-correlation of `input` `[C×H×W]` with `kernels` `[O×C×KH×KW]`
/// plus a per-channel `bias` `[O]`, producing `[O×H'×W']`.
pub fn conv2d_valid(input: &CTensor, kernels: &CTensor, bias: &CTensor, stride: usize) -> Result<CTensor> {
    let shape_err = || Error::Shape {
        op: "conv2d",
        left: input.shape().to_vec(),
        right: kernels.shape().to_vec(),
    };
    let (&[c, h, w], &[o, kc, kh, kw]) = (input.shape(), kernels.shape()) else {
        return Err(shape_err());
    };
    if kc != c || bias.shape() != [o] {
        return Err(shape_err());
    }
    let (Some(oh), Some(ow)) = (conv_out_dim(h, kh, stride), conv_out_dim(w, kw, stride)) else {
        return Err(shape_err());
    };
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![ZERO; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias.data()[oc];
                for ic in 0..c {
                    for p in 0..kh {
                        let xrow = (ic * h + i * stride + p) * w + j * stride;
                        let krow = ((oc * c + ic) * kh + p) * kw;
                        for q in 0..kw {
                            acc += k[krow + q] * x[xrow + q];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    CTensor::new(vec![o, oh, ow], out)
}

/// `(m, k, n)` for the contraction of `left` against `right`.
pub(crate) fn matmul_dims(left: &[usize], right: &[usize]) -> Result<(usize, usize, usize)> {
    let shape_err = || Error::Shape {
        op: "matmul",
        left: left.to_vec(),
        right: right.to_vec(),
    };
    let (&k, prefix) = left.split_last().ok_or_else(shape_err)?;
    let (&k2, suffix) = right.split_first().ok_or_else(shape_err)?;
    if k != k2 {
        return Err(shape_err());
    }
    Ok((prefix.iter().product(), k, suffix.iter().product()))
}

pub fn l2_norm(values: &[C64]) -> f64 {
    // Scaled accumulation keeps the sum finite for very large entries.
    let scale = values.iter().fold(0.0f64, |m, z| m.max(z.re.abs()).max(z.im.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = values.iter().map(|z| (z / scale).norm_sqr()).sum();
    scale * s.sqrt()
}

/// Phase of `z`, with `arg(0) = 0`.
pub fn arg(z: C64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        0.0
    } else {
        z.im.atan2(z.re)
    }
}

/// Circularly symmetric complex Gaussian noise `N_C(0, variance)`: each entry
/// is `A + Bi` with `A, B ~ N(0, variance / 2)` independent.
pub fn sample_circular_gaussian(shape: &[usize], variance: f64, rng: &mut Rng) -> Result<CTensor> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(domain(format!("noise variance must be positive, got {variance}")));
    }
    if shape.contains(&0) {
        return Err(domain(format!("zero-sized dimension in shape {shape:?}")));
    }
    let sd = (variance / 2.0).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let (a, b) = rng.normal_pair();
            C64::new(sd * a, sd * b)
        })
        .collect();
    CTensor::new(shape.to_vec(), data)
}

/// First `keep` coefficients of `X_k = Σ_n x_n exp(-2πi kn/N)`.
pub fn dft_1d(signal: &CTensor, keep: usize) -> Result<CTensor> {
    if signal.rank() != 1 {
        return Err(domain(format!(
            "dft_1d needs a rank-1 signal, got shape {:?}",
            signal.shape()
        )));
    }
    let n = signal.len();
    if keep == 0 || keep > n {
        return Err(domain(format!("keep must be in 1..={n}, got {keep}")));
    }
    let x = signal.data();
    let data = (0..keep)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    // Reduce kn mod N before scaling keeps the angle small.
                    let idx = (k * t) % n;
                    let theta = -std::f64::consts::TAU * idx as f64 / n as f64;
                    v * C64::from_polar(1.0, theta)
                })
                .sum()
        })
        .collect();
    CTensor::new(vec![keep], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn norm_examples() {
        assert_eq!(CTensor::vector(vec![c(3.0, 4.0)]).l2_norm(), 5.0);
        let t = CTensor::vector(vec![c(1.0, 0.0), c(0.0, 1.0)]);
        assert!((t.l2_norm() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(CTensor::zeros(&[3]).l2_norm(), 0.0);
    }

    #[test]
    fn arithmetic_examples() {
        assert_eq!(c(1.0, 2.0).conj(), c(1.0, -2.0));
        let a = CTensor::vector(vec![c(1.0, 1.0)]);
        let b = CTensor::vector(vec![c(1.0, -1.0)]);
        assert_eq!(a.mul(&b).unwrap().data()[0], c(2.0, 0.0));
        assert!(a.add(&CTensor::zeros(&[2])).is_err());
    }

    #[test]
    fn matmul_row_times_column() {
        let a = CTensor::new(vec![1, 2], vec![c(0.0, 1.0), c(1.0, 0.0)]).unwrap();
        let b = CTensor::new(vec![2, 1], vec![c(1.0, 0.0), c(0.0, 1.0)]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.data()[0], c(0.0, 2.0));
    }

    #[test]
    fn matmul_vector_matrix() {
        // [2] · [2×3] → [3]
        let v = CTensor::vector(vec![c(1.0, 0.0), c(0.0, 1.0)]);
        let m = CTensor::new(vec![2, 3], (0..6).map(|i| c(i as f64, 0.0)).collect()).unwrap();
        let p = v.matmul(&m).unwrap();
        assert_eq!(p.shape(), &[3]);
        assert_eq!(p.data()[2], c(2.0, 5.0));
        assert!(m.matmul(&v).is_err());
    }

    #[test]
    fn arg_of_zero_is_zero() {
        assert_eq!(arg(ZERO), 0.0);
        assert!((arg(c(-1.0, 0.0)) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn reshape_checks_size() {
        let t = CTensor::zeros(&[2, 3]);
        assert_eq!(t.reshape(&[6]).unwrap().shape(), &[6]);
        assert!(t.reshape(&[4]).is_err());
        assert!(CTensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn dft_examples() {
        let ones = CTensor::from_real(&[4], &[1.0; 4]).unwrap();
        let f = dft_1d(&ones, 2).unwrap();
        assert!((f.data()[0] - c(4.0, 0.0)).norm() < 1e-14);
        assert!(f.data()[1].norm() < 1e-14);

        let imp = CTensor::from_real(&[4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let f = dft_1d(&imp, 4).unwrap();
        assert!(f.data().iter().all(|&z| (z - ONE).norm() < 1e-15));

        assert!(dft_1d(&ones, 5).is_err());
    }

    #[test]
    fn dft_matches_direct_sum() {
        let mut rng = Rng::new(5, 0);
        let x = sample_circular_gaussian(&[8], 1.0, &mut rng).unwrap();
        let got = dft_1d(&x, 8).unwrap();
        for k in 0..8 {
            // Oracle: unreduced angle, explicit cos/sin.
            let mut acc = ZERO;
            for (t, v) in x.data().iter().enumerate() {
                let th = -2.0 * std::f64::consts::PI * (k * t) as f64 / 8.0;
                acc += v * c(th.cos(), th.sin());
            }
            assert!((got.data()[k] - acc).norm() < 1e-10);
        }
    }

    #[test]
    fn sampler_rejects_bad_variance() {
        let mut rng = Rng::new(0, 0);
        assert!(sample_circular_gaussian(&[2], 0.0, &mut rng).is_err());
        assert!(sample_circular_gaussian(&[2], -1.0, &mut rng).is_err());
    }

    #[test]
    fn sampler_tiny_variance_collapses() {
        let mut rng = Rng::new(0, 0);
        let t = sample_circular_gaussian(&[16], 1e-300, &mut rng).unwrap();
        assert!(t.l2_norm() < 1e-140);
    }

    #[test]
    fn sampler_is_deterministic() {
        let a = sample_circular_gaussian(&[64], 2.0, &mut Rng::new(9, 1)).unwrap();
        let b = sample_circular_gaussian(&[64], 2.0, &mut Rng::new(9, 1)).unwrap();
        let bits = |t: &CTensor| {
            t.data()
                .iter()
                .flat_map(|z| [z.re.to_bits(), z.im.to_bits()])
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn sampler_moments_law_of_large_numbers() {
        let n = 1_000_000;
        let t = sample_circular_gaussian(&[n], 1.0, &mut Rng::new(42, 0)).unwrap();
        let nf = n as f64;
        let pseudo: C64 = t.data().iter().map(|z| z * z).sum::<C64>() / nf;
        let power: f64 = t.norm_sqr() / nf;
        assert!(pseudo.norm() < 4.0 / nf.sqrt(), "pseudo-variance {pseudo}");
        assert!((power - 1.0).abs() < 4.0 / nf.sqrt(), "power {power}");
    }

    #[test]
    fn sampler_component_variance_for_sigma_sq_two() {
        let n = 400_000;
        let t = sample_circular_gaussian(&[n], 2.0, &mut Rng::new(3, 0)).unwrap();
        let nf = n as f64;
        let vr = t.data().iter().map(|z| z.re * z.re).sum::<f64>() / nf;
        let vi = t.data().iter().map(|z| z.im * z.im).sum::<f64>() / nf;
        let se = (2.0f64 / nf).sqrt();
        assert!((vr - 1.0).abs() < 4.0 * se);
        assert!((vi - 1.0).abs() < 4.0 * se);
    }

    fn arb_tensor() -> impl Strategy<Value = CTensor> {
        prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)
            .prop_map(|v| CTensor::vector(v.into_iter().map(|(a, b)| c(a, b)).collect()))
    }

    proptest! {
        #[test]
        fn norm_matches_componentwise(t in arb_tensor()) {
            let oracle: f64 = t.data().iter().map(|z| z.re * z.re + z.im * z.im).sum();
            let n = t.l2_norm();
            prop_assert!(n >= 0.0);
            prop_assert!((n * n - oracle).abs() <= 1e-12 * oracle.max(1e-300));
        }

        #[test]
        fn norm_is_phase_invariant(t in arb_tensor(), phi in -10.0f64..10.0) {
            let u = C64::from_polar(1.0, phi);
            let a = t.l2_norm();
            let b = t.scale(u).l2_norm();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn norm_zero_iff_zero(t in arb_tensor()) {
            let all_zero = t.data().iter().all(|z| z.re == 0.0 && z.im == 0.0);
            prop_assert_eq!(t.l2_norm() == 0.0, all_zero);
        }
    }
}
