//! Complex datasets, the ZDPC container format, and synthetic task generators.
//!
//! ZDPC layout, all integers little-endian:
//!
//! ```text
//! magic   "ZDPC"            4 bytes
//! version u16 = 1
//! count   u64               number of examples
//! classes u16
//! rank    u8
//! dims    u64 × rank
//! labels  u16 × count
//! payload f64 re, f64 im    count · ∏dims pairs, row-major
//! ```

use crate::ctensor::{self, CTensor, C64};
use crate::error::{domain, Result};
use crate::rng::Rng;
use rand::seq::SliceRandom;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ZDPC";
pub const VERSION: u16 = 1;
/// Largest rank accepted by the reader.
pub const MAX_RANK: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(u16),
    Truncated,
    TooFewClasses(u16),
    RankOverflow(u8),
    ZeroDimension,
    SizeOverflow,
    LabelOutOfRange { label: u16, classes: u16 },
    TrailingBytes,
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic => write!(f, "bad magic"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Self::Truncated => write!(f, "truncated"),
            Self::TooFewClasses(c) => write!(f, "class count {c} below 2"),
            Self::RankOverflow(r) => write!(f, "rank {r} exceeds {MAX_RANK}"),
            Self::ZeroDimension => write!(f, "zero dimension"),
            Self::SizeOverflow => write!(f, "size overflow"),
            Self::LabelOutOfRange { label, classes } => write!(f, "label {label} out of range for {classes} classes"),
            Self::TrailingBytes => write!(f, "trailing bytes"),
        }
    }
}

/// Malformed ZDPC input, with the byte offset where parsing stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("ZDPC format error: {kind} at byte {offset}")]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub offset: u64,
}

/// Labeled examples of a common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexDataset {
    examples: Vec<CTensor>,
    labels: Vec<usize>,
    classes: usize,
    shape: Vec<usize>,
}

impl ComplexDataset {
    pub fn new(examples: Vec<CTensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = examples
            .first()
            .map(|e| e.shape().to_vec())
            .ok_or_else(|| domain("dataset needs at least one example to fix its shape"))?;
        Self::with_shape(shape, examples, labels, classes)
    }

    /// Like [`ComplexDataset::new`] but accepts an empty example list.
    pub fn with_shape(shape: Vec<usize>, examples: Vec<CTensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(domain(format!("need at least two classes, got {classes}")));
        }
        if classes > usize::from(u16::MAX) {
            return Err(domain(format!("class count {classes} does not fit in u16")));
        }
        if examples.len() != labels.len() {
            return Err(domain(format!(
                "{} examples but {} labels",
                examples.len(),
                labels.len()
            )));
        }
        if shape.contains(&0) {
            return Err(domain(format!("invalid example shape {shape:?}")));
        }
        if let Some(e) = examples.iter().find(|e| e.shape() != shape.as_slice()) {
            return Err(domain(format!("example shape {:?} differs from {shape:?}", e.shape())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(domain(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            examples,
            labels,
            classes,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn examples(&self) -> &[CTensor] {
        &self.examples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Option<(&CTensor, usize)> {
        Some((self.examples.get(i)?, self.labels[i]))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut ex = Vec::with_capacity(indices.len());
        let mut lab = Vec::with_capacity(indices.len());
        for &i in indices {
            let (e, l) = self.get(i).ok_or_else(|| domain(format!("index {i} out of range")))?;
            ex.push(e.clone());
            lab.push(l);
        }
        Self::with_shape(self.shape.clone(), ex, lab, self.classes)
    }

    /// Random split into `(train, test)` with `n_test` test examples.
    pub fn split(&self, n_test: usize, rng: &mut Rng) -> Result<(Self, Self)> {
        if n_test > self.len() {
            return Err(domain(format!("cannot hold out {n_test} of {} examples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn all_finite(&self) -> bool {
        self.examples.iter().all(CTensor::is_finite)
    }
}

/// Serializes a dataset to ZDPC bytes.
pub fn encode_zdpc(ds: &ComplexDataset) -> Result<Vec<u8>> {
    let rank = u8::try_from(ds.shape.len())
        .ok()
        .filter(|r| *r <= MAX_RANK)
        .ok_or_else(|| domain(format!("rank {} exceeds {MAX_RANK}", ds.shape.len())))?;
    let per: usize = ds.shape.iter().product();
    let mut out = Vec::with_capacity(4 + 2 + 8 + 2 + 1 + 8 * ds.shape.len() + 2 * ds.len() + 16 * per * ds.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u16).to_le_bytes());
    out.push(rank);
    for &d in &ds.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for e in &ds.examples {
        for z in e.data() {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, kind: FormatErrorKind) -> FormatError {
        FormatError {
            kind,
            offset: self.pos as u64,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(FormatErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses ZDPC bytes.
pub fn decode_zdpc(bytes: &[u8]) -> Result<ComplexDataset, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(r.err(FormatErrorKind::BadMagic));
    }
    r.pos = 4;
    let at = r.pos;
    let version = r.u16()?;
    if version != VERSION {
        r.pos = at;
        return Err(r.err(FormatErrorKind::UnsupportedVersion(version)));
    }
    let count_at = r.pos;
    let count = r.u64()?;
    let classes_at = r.pos;
    let classes = r.u16()?;
    if classes < 2 {
        r.pos = classes_at;
        return Err(r.err(FormatErrorKind::TooFewClasses(classes)));
    }
    let rank_at = r.pos;
    let rank = r.u8()?;
    if rank > MAX_RANK {
        r.pos = rank_at;
        return Err(r.err(FormatErrorKind::RankOverflow(rank)));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut per: u64 = 1;
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u64()?;
        if d == 0 {
            r.pos = at;
            return Err(r.err(FormatErrorKind::ZeroDimension));
        }
        per = per.checked_mul(d).ok_or_else(|| {
            r.pos = at;
            r.err(FormatErrorKind::SizeOverflow)
        })?;
        shape.push(usize::try_from(d).map_err(|_| r.err(FormatErrorKind::SizeOverflow))?);
    }
    let overflow = FormatError {
        kind: FormatErrorKind::SizeOverflow,
        offset: count_at as u64,
    };
    let label_bytes = count.checked_mul(2).ok_or(overflow)?;
    let payload_bytes = count.checked_mul(per).and_then(|v| v.checked_mul(16)).ok_or(overflow)?;
    if label_bytes > r.remaining() as u64 {
        r.pos = r.buf.len();
        return Err(r.err(FormatErrorKind::Truncated));
    }
    let count = count as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let l = r.u16()?;
        if l >= classes {
            r.pos = at;
            return Err(r.err(FormatErrorKind::LabelOutOfRange { label: l, classes }));
        }
        labels.push(usize::from(l));
    }
    if payload_bytes > r.remaining() as u64 {
        r.pos = r.buf.len();
        return Err(r.err(FormatErrorKind::Truncated));
    }
    let per = per as usize;
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut data = Vec::with_capacity(per);
        for _ in 0..per {
            let re = r.f64()?;
            let im = r.f64()?;
            data.push(C64::new(re, im));
        }
        examples.push(CTensor::new(shape.clone(), data).map_err(|_| r.err(FormatErrorKind::SizeOverflow))?);
    }
    if r.remaining() != 0 {
        return Err(r.err(FormatErrorKind::TrailingBytes));
    }
    let shape_for_err = r.err(FormatErrorKind::SizeOverflow);
    ComplexDataset::with_shape(shape, examples, labels, usize::from(classes)).map_err(|_| shape_for_err)
}

pub fn save_zdpc(path: impl AsRef<Path>, ds: &ComplexDataset) -> Result<()> {
    std::fs::write(path, encode_zdpc(ds)?)?;
    Ok(())
}

pub fn load_zdpc(path: impl AsRef<Path>) -> Result<ComplexDataset> {
    let bytes = std::fs::read(path)?;
    Ok(decode_zdpc(&bytes)?)
}

/// Classes of the paired-prototype task.
pub const PROTOTYPE_CLASSES: usize = 10;
/// Feature dimension of the paired-prototype task.
pub const PROTOTYPE_DIM: usize = 16;

/// Unit-norm Sylvester–Hadamard row `c + 1` of order 16. Rows are mutually
/// orthogonal; row 0 (all ones) is skipped.
pub fn prototype(c: usize) -> Vec<f64> {
    let row = c + 1;
    (0..PROTOTYPE_DIM)
        .map(|j| {
            if (row & j).count_ones().is_multiple_of(2) {
                0.25
            } else {
                -0.25
            }
        })
        .collect()
}

/// Index of the prototype feeding the imaginary part of class `c`.
pub fn imag_prototype_index(c: usize) -> usize {
    PROTOTYPE_CLASSES - 1 - c
}

/// Ten classes; class `c` has real part near `P_c` and imaginary part near
/// `P_{9−c}`. Examples are shuffled.
pub fn gen_paired_prototypes(n_per_class: usize, noise_std: f64, rng: &mut Rng) -> Result<ComplexDataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(domain(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let mut examples = Vec::with_capacity(n_per_class * PROTOTYPE_CLASSES);
    let mut labels = Vec::with_capacity(examples.capacity());
    for c in 0..PROTOTYPE_CLASSES {
        let re = prototype(c);
        let im = prototype(imag_prototype_index(c));
        for _ in 0..n_per_class {
            let data = re
                .iter()
                .zip(&im)
                .map(|(a, b)| C64::new(a + noise_std * rng.normal(), b + noise_std * rng.normal()))
                .collect();
            examples.push(CTensor::vector(data));
            labels.push(c);
        }
    }
    shuffled(vec![PROTOTYPE_DIM], examples, labels, PROTOTYPE_CLASSES, rng)
}

fn shuffled(
    shape: Vec<usize>,
    examples: Vec<CTensor>,
    labels: Vec<usize>,
    classes: usize,
    rng: &mut Rng,
) -> Result<ComplexDataset> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut ex: Vec<Option<CTensor>> = examples.into_iter().map(Some).collect();
    let examples = order.iter().map(|&i| ex[i].take().expect("permutation")).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    ComplexDataset::with_shape(shape, examples, labels, classes)
}

/// Class means on the complex sphere of radius `separation` in `ℂ^dim`,
/// samples are mean plus `N_C(0, 1)` noise. Examples are shuffled.
pub fn gen_complex_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<ComplexDataset> {
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(domain(format!("separation must be non-negative, got {separation}")));
    }
    if dim == 0 {
        return Err(domain("blob dimension must be positive"));
    }
    let means: Vec<CTensor> = (0..classes)
        .map(|_| {
            let dir = ctensor::sample_circular_gaussian(&[dim], 1.0, rng)?;
            let n = dir.l2_norm();
            Ok(dir.scale_real(separation / n))
        })
        .collect::<Result<_>>()?;
    let mut examples = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(examples.capacity());
    for (c, m) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            examples.push(m.add(&ctensor::sample_circular_gaussian(&[dim], 1.0, rng)?)?);
            labels.push(c);
        }
    }
    shuffled(vec![dim], examples, labels, classes, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierConfig {
    pub length: usize,
    pub keep: usize,
    /// Amplitude scale of the sinusoids placed in bins `[length/4, length/2)`.
    pub hf_noise: f64,
    /// Standard deviation of additive white noise.
    pub white_noise: f64,
}

impl FourierConfig {
    pub fn new(length: usize, keep: usize) -> Self {
        Self {
            length,
            keep,
            hf_noise: 1.0,
            white_noise: 0.05,
        }
    }
}

/// Base frequency (in DFT bins) of each class of the Fourier task.
pub const FOURIER_BASE_BINS: [usize; 2] = [2, 3];

/// Clean low-band signal and the additive noise of one example, before
/// featurization.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalParts {
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SignalParts {
    pub fn signal(&self) -> Vec<f64> {
        self.clean.iter().zip(&self.noise).map(|(a, b)| a + b).collect()
    }
}

fn check_fourier(cfg: &FourierConfig) -> Result<()> {
    if cfg.length < 16 {
        return Err(domain(format!("signal length must be at least 16, got {}", cfg.length)));
    }
    if cfg.keep == 0 || cfg.keep > cfg.length {
        return Err(domain(format!("keep must lie in 1..={}, got {}", cfg.length, cfg.keep)));
    }
    if !(cfg.hf_noise >= 0.0 && cfg.white_noise >= 0.0) {
        return Err(domain("noise levels must be non-negative"));
    }
    Ok(())
}

/// Draws one class-`c` signal: base and second harmonic with random
/// amplitude and phase, plus high-frequency and white noise.
pub fn fourier_signal_parts(class: usize, cfg: &FourierConfig, rng: &mut Rng) -> Result<SignalParts> {
    check_fourier(cfg)?;
    let f = *FOURIER_BASE_BINS
        .get(class)
        .ok_or_else(|| domain(format!("Fourier task has two classes, got class {class}")))?;
    let n = cfg.length;
    let w = 2.0 * PI / n as f64;
    let a1 = 0.8 + 0.4 * rng.uniform();
    let a2 = 0.3 + 0.4 * rng.uniform();
    let (p1, p2) = (2.0 * PI * rng.uniform(), 2.0 * PI * rng.uniform());
    let clean = (0..n)
        .map(|t| {
            let t = t as f64;
            a1 * (w * f as f64 * t + p1).cos() + a2 * (w * 2.0 * f as f64 * t + p2).cos()
        })
        .collect();
    let lo = n / 4;
    let hi = n / 2;
    let tones: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let bin = lo + rng.below((hi - lo) as u64) as usize;
            (bin as f64, cfg.hf_noise * rng.uniform(), 2.0 * PI * rng.uniform())
        })
        .collect();
    let noise = (0..n)
        .map(|t| {
            let t = t as f64;
            tones.iter().map(|(b, a, p)| a * (w * b * t + p).cos()).sum::<f64>() + cfg.white_noise * rng.normal()
        })
        .collect();
    Ok(SignalParts { clean, noise })
}

/// First `keep` DFT coefficients scaled by `2/length`, so a unit sinusoid on
/// an integer bin has magnitude one.
pub fn fourier_features(signal: &[f64], keep: usize) -> Result<CTensor> {
    let t = CTensor::from_real(&[signal.len()], signal)?;
    Ok(ctensor::dft_1d(&t, keep)?.scale_real(2.0 / signal.len() as f64))
}

pub fn gen_fourier_signals(n_per_class: usize, length: usize, keep: usize, rng: &mut Rng) -> Result<ComplexDataset> {
    gen_fourier_signals_with(n_per_class, &FourierConfig::new(length, keep), rng)
}

pub fn gen_fourier_signals_with(n_per_class: usize, cfg: &FourierConfig, rng: &mut Rng) -> Result<ComplexDataset> {
    check_fourier(cfg)?;
    let mut examples = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for c in 0..2 {
        for _ in 0..n_per_class {
            let parts = fourier_signal_parts(c, cfg, rng)?;
            examples.push(fourier_features(&parts.signal(), cfg.keep)?);
            labels.push(c);
        }
    }
    shuffled(vec![cfg.keep], examples, labels, 2, rng)
}
