//! Complex-valued layers, activation functions, output heads and losses.

use crate::ctensor::{self, CTensor, C64, ONE, ZERO};
use crate::error::{domain, Error, Result};
use crate::rng::Rng;
use crate::wirtinger::{sigmoid, Partials, Tape, UnaryOp, Var};
use serde::{Deserialize, Serialize};

/// Guards divisions by `|z|` near the origin.
pub const EPS_GUARD: f64 = 1e-12;
/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    SepSigmoid,
    #[serde(rename = "zrelu")]
    ZRelu,
    #[serde(rename = "modrelu")]
    ModRelu,
    #[serde(rename = "trainable_modrelu")]
    TrainableModRelu,
    Cardioid,
    TrainableCardioidSingle,
    TrainableCardioidPerFeature,
    #[serde(rename = "siglog")]
    SigLog,
    #[serde(rename = "crelu")]
    CRelu,
    #[serde(rename = "igaussian")]
    IGaussian,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 10] = [
        Self::SepSigmoid,
        Self::ZRelu,
        Self::ModRelu,
        Self::TrainableModRelu,
        Self::Cardioid,
        Self::TrainableCardioidSingle,
        Self::TrainableCardioidPerFeature,
        Self::SigLog,
        Self::CRelu,
        Self::IGaussian,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Self::SepSigmoid => "Separable Sigmoid",
            Self::ZRelu => "zReLU",
            Self::ModRelu => "ModReLU",
            Self::TrainableModRelu => "Trainable ModReLU (per-feature bias)",
            Self::Cardioid => "Cardioid",
            Self::TrainableCardioidSingle => "Trainable Cardioid (single bias)",
            Self::TrainableCardioidPerFeature => "Trainable Cardioid (per-feature bias)",
            Self::SigLog => "SigLog",
            Self::CRelu => "cReLU",
            Self::IGaussian => "iGaussian",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::SepSigmoid => "sep_sigmoid",
            Self::ZRelu => "zrelu",
            Self::ModRelu => "modrelu",
            Self::TrainableModRelu => "trainable_modrelu",
            Self::Cardioid => "cardioid",
            Self::TrainableCardioidSingle => "trainable_cardioid_single",
            Self::TrainableCardioidPerFeature => "trainable_cardioid_per_feature",
            Self::SigLog => "siglog",
            Self::CRelu => "crelu",
            Self::IGaussian => "igaussian",
        }
    }

    /// Number of trainable bias entries for a layer with `features` features.
    pub fn param_count(self, features: usize) -> usize {
        match self {
            Self::TrainableModRelu | Self::TrainableCardioidPerFeature => features,
            Self::TrainableCardioidSingle => 1,
            _ => 0,
        }
    }

    /// Kinds built only from smooth maps away from the origin.
    pub fn is_smooth(self) -> bool {
        matches!(
            self,
            Self::SepSigmoid
                | Self::Cardioid
                | Self::TrainableCardioidSingle
                | Self::TrainableCardioidPerFeature
                | Self::SigLog
                | Self::IGaussian
        )
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| domain(format!("unknown activation {s:?}")))
    }
}

/// Fixed shape parameters of the activation zoo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationConfig {
    /// Bias of the non-trainable ModReLU.
    pub modrelu_bias: f64,
    /// Width of the iGaussian.
    pub igaussian_sigma: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            modrelu_bias: 0.0,
            igaussian_sigma: 1.0,
        }
    }
}

/// `w = h(r) z` with `r = |z|`, given `h` and `h'`.
fn radial(z: C64, r: f64, h: f64, hp: f64) -> Partials {
    Partials::smooth(z * h, C64::new(h + 0.5 * hp * r, 0.0), z * z * (hp / (2.0 * r)))
}

/// `w = c(θ) z` with `θ = arg z`, given `c` and `c'`.
fn phase_scaled(z: C64, r: f64, c: f64, cp: f64) -> Partials {
    let i = C64::new(0.0, 1.0);
    Partials::smooth(z * c, C64::new(c, -0.5 * cp), i * z * z * (cp / (2.0 * r * r)))
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Value and Wirtinger pair of an activation at `z`, plus `∂w/∂b` for the
/// trainable bias `b` (zero for fixed kinds).
pub fn activation_partials(kind: ActivationKind, z: C64, b: f64, cfg: &ActivationConfig) -> (Partials, C64) {
    let (x, y) = (z.re, z.im);
    let r = z.norm();
    let origin = || (Partials::smooth(ZERO, ZERO, ZERO).with_kink(0.0), ZERO);
    match kind {
        ActivationKind::SepSigmoid => {
            let (sx, sy) = (sigmoid(x), sigmoid(y));
            let p = Partials::from_jacobian(C64::new(sx, sy), sx * (1.0 - sx), 0.0, 0.0, sy * (1.0 - sy));
            (p, ZERO)
        }
        ActivationKind::ZRelu => {
            let kink = x.abs().min(y.abs());
            if x >= 0.0 && y >= 0.0 {
                let d = if x > 0.0 && y > 0.0 { ONE } else { ZERO };
                (Partials::smooth(z, d, ZERO).with_kink(kink), ZERO)
            } else {
                (Partials::smooth(ZERO, ZERO, ZERO).with_kink(kink), ZERO)
            }
        }
        ActivationKind::ModRelu | ActivationKind::TrainableModRelu => {
            let b = if kind == ActivationKind::ModRelu {
                cfg.modrelu_bias
            } else {
                b
            };
            if r == 0.0 {
                return origin();
            }
            let s = r + b;
            let kink = s.abs().min(r);
            if s <= 0.0 {
                return (Partials::smooth(ZERO, ZERO, ZERO).with_kink(kink), ZERO);
            }
            let d = r + EPS_GUARD;
            let h = s / d;
            let hp = (EPS_GUARD - b) / (d * d);
            (radial(z, r, h, hp).with_kink(kink), z / d)
        }
        ActivationKind::Cardioid
        | ActivationKind::TrainableCardioidSingle
        | ActivationKind::TrainableCardioidPerFeature => {
            let b = if kind == ActivationKind::Cardioid { 0.0 } else { b };
            if r == 0.0 {
                return origin();
            }
            let th = ctensor::arg(z) + b;
            let c = 0.5 * (1.0 + th.cos());
            let cp = -0.5 * th.sin();
            (phase_scaled(z, r, c, cp).with_kink(r), z * cp)
        }
        ActivationKind::SigLog => {
            if r == 0.0 {
                return (Partials::smooth(ZERO, ONE, ZERO), ZERO);
            }
            let h = 1.0 / (1.0 + r);
            (radial(z, r, h, -h * h), ZERO)
        }
        ActivationKind::CRelu => {
            let kink = x.abs().min(y.abs());
            let ux = if x > 0.0 { 1.0 } else { 0.0 };
            let vy = if y > 0.0 { 1.0 } else { 0.0 };
            let p = Partials::from_jacobian(C64::new(relu(x), relu(y)), ux, 0.0, 0.0, vy).with_kink(kink);
            (p, ZERO)
        }
        ActivationKind::IGaussian => {
            if r == 0.0 {
                return (Partials::smooth(ZERO, ZERO, ZERO), ZERO);
            }
            let s2 = cfg.igaussian_sigma * cfg.igaussian_sigma;
            let e = (-r * r / (2.0 * s2)).exp();
            let g = -(-r * r / (2.0 * s2)).exp_m1();
            let gp = r / s2 * e;
            let d = r + EPS_GUARD;
            let h = g / d;
            let hp = gp / d - g / (d * d);
            (radial(z, r, h, hp), ZERO)
        }
    }
}

/// Evaluates an activation at one point. `params` holds the trainable bias
/// (one entry) for trainable kinds and is ignored otherwise.
pub fn apply_activation(kind: ActivationKind, z: C64, params: &[f64], cfg: &ActivationConfig) -> Result<C64> {
    let needs = kind.param_count(1);
    if params.len() < needs {
        return Err(domain(format!("{} needs a bias parameter", kind.key())));
    }
    let b = params.first().copied().unwrap_or(0.0);
    Ok(activation_partials(kind, z, b, cfg).0.value)
}

/// Records an activation on the tape; `bias` is required for trainable kinds.
pub fn activation_on_tape(
    tape: &mut Tape,
    input: Var,
    kind: ActivationKind,
    bias: Option<Var>,
    cfg: &ActivationConfig,
) -> Result<Var> {
    let cfg = *cfg;
    match (kind.param_count(1), bias) {
        (0, _) => Ok(tape.elementwise(input, kind.key(), move |z| activation_partials(kind, z, 0.0, &cfg).0)),
        (_, Some(b)) => tape.elementwise_param(input, b, kind.key(), move |z, b| activation_partials(kind, z, b, &cfg)),
        (_, None) => Err(domain(format!("{} needs a bias parameter", kind.key()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in × out]`
    pub weights: CTensor,
    /// `[out]`
    pub bias: CTensor,
}

/// `input · W + b` for a rank-1 input.
pub fn dense_forward(layer: &DenseLayer, input: &CTensor) -> Result<CTensor> {
    layer.bias.add(&input.matmul(&layer.weights)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `[out_ch × in_ch × kh × kw]`
    pub kernels: CTensor,
    /// `[out_ch]`
    pub bias: CTensor,
    pub stride: usize,
}

/// Valid cross-correlation of a `[in_ch × h × w]` input.
pub fn conv2d_forward(layer: &Conv2dLayer, input: &CTensor) -> Result<CTensor> {
    if layer.stride == 0 {
        return Err(domain("stride must be at least 1"));
    }
    ctensor::conv2d_valid(input, &layer.kernels, &layer.bias, layer.stride)
}

/// `σ(|z| − centering)`.
pub fn magnitude_sigmoid_head(logit: C64, centering: f64) -> f64 {
    sigmoid(logit.norm() - centering)
}

/// Softmax over the magnitudes of the logits.
pub fn softmax_magnitude_head(logits: &[C64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(domain("softmax head needs at least two logits"));
    }
    let mags: Vec<f64> = logits.iter().map(|z| z.norm()).collect();
    let max = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mags.iter().map(|m| (m - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = probabilities.get(label).ok_or_else(|| {
        domain(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        ))
    })?;
    Ok(-clamp_p(*p).ln())
}

pub fn bce(probability: f64, label: usize) -> Result<f64> {
    let p = clamp_p(probability);
    match label {
        0 => Ok(-(1.0 - p).ln()),
        1 => Ok(-p.ln()),
        _ => Err(domain(format!("binary label must be 0 or 1, got {label}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
    },
    Activation {
        kind: ActivationKind,
    },
    Flatten,
    /// 2×2 max pooling by magnitude.
    MaxPool2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSpec {
    SoftmaxMagnitude,
    MagnitudeSigmoid,
}

/// Declarative network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
    #[serde(default)]
    pub activation: ActivationConfig,
}

impl Architecture {
    /// Dense stack `input → hidden… → outputs` with one activation kind.
    pub fn mlp(input: usize, hidden: &[usize], outputs: usize, kind: ActivationKind, head: HeadSpec) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            layers.push(LayerSpec::Activation { kind });
        }
        layers.push(LayerSpec::Dense { units: outputs });
        Self {
            input_shape: vec![input],
            layers,
            head,
            activation: ActivationConfig::default(),
        }
    }

    pub fn with_activation(&self, kind: ActivationKind) -> Self {
        let mut a = self.clone();
        for l in &mut a.layers {
            if let LayerSpec::Activation { kind: k } = l {
                *k = kind;
            }
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Complex,
    /// Real-valued; imaginary parts are discarded after every update.
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<CTensor>,
    pub kinds: Vec<ParamKind>,
    pub names: Vec<String>,
}

impl ParamSet {
    /// Drops imaginary parts of real parameters.
    pub fn project(&mut self) {
        for (t, k) in self.tensors.iter_mut().zip(&self.kinds) {
            if *k == ParamKind::Real {
                t.data_mut().iter_mut().for_each(|z| z.im = 0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Dense { w: usize, b: usize },
    Conv2d { k: usize, b: usize, stride: usize },
    Activation { kind: ActivationKind, bias: Option<usize> },
    Flatten { len: usize },
    MaxPool2 { in_shape: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq)]
struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    fan_in: Option<usize>,
}

/// A validated architecture with its parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    steps: Vec<Step>,
    decls: Vec<ParamDecl>,
    centering: Option<usize>,
    classes: usize,
}

/// Anything trainable by the private SGD loop.
pub trait Model: Sync {
    /// Per-sample loss recorded on `tape`, with parameter leaves `params`.
    fn loss(&self, tape: &mut Tape, params: &[Var], input: &CTensor, label: usize) -> Result<Var>;

    /// Class scores (probabilities) for one input.
    fn scores(&self, params: &[CTensor], input: &CTensor) -> Result<Vec<f64>>;

    fn param_kinds(&self) -> Vec<ParamKind>;
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self> {
        if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
            return Err(domain(format!("invalid input shape {:?}", arch.input_shape)));
        }
        if !(arch.activation.igaussian_sigma > 0.0) {
            return Err(domain("igaussian_sigma must be positive"));
        }
        let mut shape = arch.input_shape.clone();
        let mut steps = Vec::new();
        let mut decls: Vec<ParamDecl> = Vec::new();
        let declare = |decls: &mut Vec<ParamDecl>, name: String, shape: Vec<usize>, kind, fan_in| {
            decls.push(ParamDecl {
                name,
                shape,
                kind,
                fan_in,
            });
            decls.len() - 1
        };
        for (li, layer) in arch.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { units } => {
                    let [n] = shape[..] else {
                        return Err(domain(format!("layer {li}: dense needs a rank-1 input, got {shape:?}")));
                    };
                    if units == 0 {
                        return Err(domain(format!("layer {li}: dense with zero units")));
                    }
                    let w = declare(
                        &mut decls,
                        format!("l{li}.weight"),
                        vec![n, units],
                        ParamKind::Complex,
                        Some(n),
                    );
                    let b = declare(&mut decls, format!("l{li}.bias"), vec![units], ParamKind::Complex, None);
                    steps.push(Step::Dense { w, b });
                    shape = vec![units];
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel: [kh, kw],
                    stride,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(domain(format!(
                            "layer {li}: conv2d needs a [C×H×W] input, got {shape:?}"
                        )));
                    };
                    if filters == 0 || kh == 0 || kw == 0 || stride == 0 {
                        return Err(domain(format!("layer {li}: conv2d sizes must be positive")));
                    }
                    let (Some(oh), Some(ow)) = (
                        ctensor::conv_out_dim(h, kh, stride),
                        ctensor::conv_out_dim(w, kw, stride),
                    ) else {
                        return Err(domain(format!("layer {li}: kernel larger than input {shape:?}")));
                    };
                    let k = declare(
                        &mut decls,
                        format!("l{li}.kernel"),
                        vec![filters, c, kh, kw],
                        ParamKind::Complex,
                        Some(c * kh * kw),
                    );
                    let b = declare(
                        &mut decls,
                        format!("l{li}.bias"),
                        vec![filters],
                        ParamKind::Complex,
                        None,
                    );
                    steps.push(Step::Conv2d { k, b, stride });
                    shape = vec![filters, oh, ow];
                }
                LayerSpec::Activation { kind } => {
                    let n = kind.param_count(shape[0]);
                    let bias =
                        (n > 0).then(|| declare(&mut decls, format!("l{li}.act_bias"), vec![n], ParamKind::Real, None));
                    steps.push(Step::Activation { kind, bias });
                }
                LayerSpec::Flatten => {
                    let len = shape.iter().product();
                    steps.push(Step::Flatten { len });
                    shape = vec![len];
                }
                LayerSpec::MaxPool2 => {
                    let [c, h, w] = shape[..] else {
                        return Err(domain(format!(
                            "layer {li}: max_pool2 needs a [C×H×W] input, got {shape:?}"
                        )));
                    };
                    if h < 2 || w < 2 {
                        return Err(domain(format!("layer {li}: max_pool2 input too small {shape:?}")));
                    }
                    steps.push(Step::MaxPool2 { in_shape: [c, h, w] });
                    shape = vec![c, h / 2, w / 2];
                }
            }
        }
        let [outputs] = shape[..] else {
            return Err(domain(format!("network output must be rank-1, got {shape:?}")));
        };
        let (classes, centering) = match arch.head {
            HeadSpec::SoftmaxMagnitude => {
                if outputs < 2 {
                    return Err(domain("softmax head needs at least two outputs"));
                }
                (outputs, None)
            }
            HeadSpec::MagnitudeSigmoid => {
                if outputs != 1 {
                    return Err(domain("magnitude-sigmoid head needs exactly one output"));
                }
                let c = declare(&mut decls, "head.centering".into(), vec![1], ParamKind::Real, None);
                (2, Some(c))
            }
        };
        Ok(Self {
            arch,
            steps,
            decls,
            centering,
            classes,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.decls.iter().map(|d| d.shape.clone()).collect()
    }

    /// Weights `N_C(0, 1/fan_in)`, biases and activation parameters zero.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamSet> {
        let mut tensors = Vec::with_capacity(self.decls.len());
        for d in &self.decls {
            tensors.push(match d.fan_in {
                Some(f) => ctensor::sample_circular_gaussian(&d.shape, 1.0 / f as f64, rng)?,
                None => CTensor::zeros(&d.shape),
            });
        }
        Ok(ParamSet {
            tensors,
            kinds: self.decls.iter().map(|d| d.kind).collect(),
            names: self.decls.iter().map(|d| d.name.clone()).collect(),
        })
    }

    /// Records the layer stack and returns the output logits.
    pub fn forward_logits(&self, tape: &mut Tape, params: &[Var], input: &CTensor) -> Result<Var> {
        if params.len() != self.decls.len() {
            return Err(domain(format!(
                "expected {} parameters, got {}",
                self.decls.len(),
                params.len()
            )));
        }
        if input.shape() != self.arch.input_shape.as_slice() {
            return Err(Error::Shape {
                op: "network input",
                left: input.shape().to_vec(),
                right: self.arch.input_shape.clone(),
            });
        }
        let mut x = tape.constant(input.clone());
        for step in &self.steps {
            x = match *step {
                Step::Dense { w, b } => {
                    let y = tape.matmul(x, params[w])?;
                    tape.add(y, params[b])?
                }
                Step::Conv2d { k, b, stride } => tape.conv2d(x, params[k], params[b], stride)?,
                Step::Activation { kind, bias } => {
                    activation_on_tape(tape, x, kind, bias.map(|i| params[i]), &self.arch.activation)?
                }
                Step::Flatten { len } => tape.reshape(x, &[len])?,
                Step::MaxPool2 { in_shape: [c, h, w] } => {
                    let (oh, ow) = (h / 2, w / 2);
                    let vals = tape.value(x).data();
                    let mut idx = Vec::with_capacity(c * oh * ow);
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let cands = [
                                    (ch * h + 2 * i) * w + 2 * j,
                                    (ch * h + 2 * i) * w + 2 * j + 1,
                                    (ch * h + 2 * i + 1) * w + 2 * j,
                                    (ch * h + 2 * i + 1) * w + 2 * j + 1,
                                ];
                                let best = cands
                                    .into_iter()
                                    .reduce(|a, b| if vals[b].norm() > vals[a].norm() { b } else { a })
                                    .expect("four candidates");
                                idx.push(best);
                            }
                        }
                    }
                    tape.gather(x, idx, &[c, oh, ow])?
                }
            };
        }
        Ok(x)
    }

    fn head_probabilities(&self, logits: &[C64], params: &[CTensor]) -> Result<Vec<f64>> {
        match self.arch.head {
            HeadSpec::SoftmaxMagnitude => softmax_magnitude_head(logits),
            HeadSpec::MagnitudeSigmoid => {
                let c = self.centering.map(|i| params[i].data()[0].re).unwrap_or(0.0);
                let p = magnitude_sigmoid_head(logits[0], c);
                Ok(vec![1.0 - p, p])
            }
        }
    }
}

impl Model for Network {
    fn loss(&self, tape: &mut Tape, params: &[Var], input: &CTensor, label: usize) -> Result<Var> {
        if label >= self.classes {
            return Err(domain(format!(
                "label {label} out of range for {} classes",
                self.classes
            )));
        }
        let logits = self.forward_logits(tape, params, input)?;
        let lo = -(1.0 - P_CLAMP).ln();
        let hi = -P_CLAMP.ln();
        let raw = match self.arch.head {
            HeadSpec::SoftmaxMagnitude => {
                // −log softmax(|z|)_label = logsumexp(|z|) − |z|_label
                let mags = tape.abs(logits);
                let max = tape
                    .value(mags)
                    .data()
                    .iter()
                    .map(|z| z.re)
                    .fold(f64::NEG_INFINITY, f64::max);
                let shifted = tape.unary(mags, UnaryOp::AddConst(C64::new(-max, 0.0)));
                let e = tape.exp(shifted);
                let s = tape.sum(e);
                let lse = tape.log(s);
                let picked = tape.index(shifted, label)?;
                tape.sub(lse, picked)?
            }
            HeadSpec::MagnitudeSigmoid => {
                // BCE on p = σ(t), t = |z| − c:  softplus(t) − y·t
                let c = params[self.centering.expect("sigmoid head declares centering")];
                let mag = tape.abs(logits);
                let mag = tape.reshape(mag, &[1])?;
                let c = tape.unary(c, UnaryOp::Re);
                let t = tape.sub(mag, c)?;
                let sp = tape.unary(t, UnaryOp::Softplus);
                let l = if label == 1 { tape.sub(sp, t)? } else { sp };
                tape.sum(l)
            }
        };
        Ok(tape.unary(raw, UnaryOp::ClampRe { lo, hi }))
    }

    fn scores(&self, params: &[CTensor], input: &CTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let logits = self.forward_logits(&mut tape, &vars, input)?;
        self.head_probabilities(tape.value(logits).data(), params)
    }

    fn param_kinds(&self) -> Vec<ParamKind> {
        self.decls.iter().map(|d| d.kind).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wirtinger::{gradcheck, value_and_grad};
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn act(kind: ActivationKind, z: C64) -> C64 {
        apply_activation(kind, z, &[0.0], &ActivationConfig::default()).unwrap()
    }

    #[test]
    fn activation_examples() {
        assert_eq!(act(ActivationKind::CRelu, c(1.0, -2.0)), c(1.0, 0.0));
        assert_eq!(act(ActivationKind::ZRelu, c(-1.0, 3.0)), ZERO);
        let r = 2.5;
        assert!((act(ActivationKind::Cardioid, c(r, 0.0)) - c(r, 0.0)).norm() < 1e-15);
        assert!(act(ActivationKind::Cardioid, C64::from_polar(r, PI)).norm() < 1e-15);
        for z in [c(1e-3, 0.0), c(3.0, 4.0), c(300.0, -300.0)] {
            assert!(act(ActivationKind::IGaussian, z).norm() < 1.0);
        }
        // 1 - 1e-12/r is not representable past r ~ 1e4 and rounds to one
        assert!(act(ActivationKind::IGaussian, c(1e6, -1e6)).norm() <= 1.0);
        assert!((act(ActivationKind::IGaussian, c(1e3, 0.0)).norm() - 1.0).abs() < 1e-9);
        assert_eq!(act(ActivationKind::SigLog, c(3.0, 4.0)), c(0.5, 4.0 / 6.0));
    }

    #[test]
    fn crelu_partials_in_fourth_quadrant() {
        let (p, _) = activation_partials(ActivationKind::CRelu, c(0.5, -0.3), 0.0, &ActivationConfig::default());
        assert_eq!(p.dz, c(0.5, 0.0));
        assert_eq!(p.dzbar, c(0.5, 0.0));
    }

    #[test]
    fn phase_scaled_outputs_vanish_at_origin() {
        let cfg = ActivationConfig {
            modrelu_bias: 0.3,
            ..Default::default()
        };
        for kind in ActivationKind::ALL {
            let out = apply_activation(kind, ZERO, &[0.7], &cfg).unwrap();
            if kind != ActivationKind::SepSigmoid {
                assert_eq!(out, ZERO, "{kind:?}");
            }
        }
    }

    #[test]
    fn trainable_kinds_need_params() {
        let cfg = ActivationConfig::default();
        assert!(apply_activation(ActivationKind::TrainableCardioidSingle, ONE, &[], &cfg).is_err());
        assert_eq!(ActivationKind::TrainableModRelu.param_count(7), 7);
        assert_eq!(ActivationKind::TrainableCardioidSingle.param_count(7), 1);
        assert_eq!(ActivationKind::CRelu.param_count(7), 0);
    }

    #[test]
    fn activation_names_round_trip() {
        for k in ActivationKind::ALL {
            assert_eq!(k.key().parse::<ActivationKind>().unwrap(), k);
            let js = serde_json::to_string(&k).unwrap();
            assert_eq!(js, format!("\"{}\"", k.key()));
        }
    }

    #[test]
    fn every_activation_passes_gradcheck_at_smooth_points() {
        let cfg = ActivationConfig {
            modrelu_bias: -0.2,
            ..Default::default()
        };
        let mut rng = Rng::new(17, 0);
        for kind in ActivationKind::ALL {
            let mut accepted = 0;
            while accepted < 100 {
                let z = c(2.0 * rng.normal(), 2.0 * rng.normal());
                let b = 0.5 * rng.normal();
                let (p, _) = activation_partials(kind, z, b, &cfg);
                if p.kink < 1e-3 {
                    continue;
                }
                let w = c(rng.normal(), rng.normal());
                let mut params = vec![CTensor::vector(vec![z])];
                if kind.param_count(1) > 0 {
                    params.push(CTensor::vector(vec![c(b, 0.0)]));
                }
                let r = gradcheck(
                    |t, v| {
                        let y = activation_on_tape(t, v[0], kind, v.get(1).copied(), &cfg)?;
                        let k = t.constant(CTensor::vector(vec![w]));
                        let m = t.mul(y, k)?;
                        let re = t.unary(m, UnaryOp::Re);
                        Ok(t.sum(re))
                    },
                    &params,
                    1e-5,
                )
                .unwrap();
                assert!(r.max_rel_error <= 1e-5, "{kind:?} at {z} (b={b}): {r:?}");
                accepted += 1;
            }
        }
    }

    #[test]
    fn boundedness_and_phase_preservation() {
        let cfg = ActivationConfig::default();
        let mut rng = Rng::new(23, 0);
        for _ in 0..10_000 {
            let s = 10f64.powf(4.0 * rng.uniform() - 2.0);
            let z = c(s * rng.normal(), s * rng.normal());
            let val = |k| activation_partials(k, z, 0.0, &cfg).0.value;
            assert!(val(ActivationKind::SepSigmoid).norm() <= 2f64.sqrt());
            assert!(val(ActivationKind::SigLog).norm() < 1.0);
            assert!(val(ActivationKind::IGaussian).norm() < 1.0);
            assert!(val(ActivationKind::Cardioid).norm() <= z.norm() * (1.0 + 1e-15));
            for k in [ActivationKind::ModRelu, ActivationKind::IGaussian] {
                let w = val(k);
                if w != ZERO {
                    let d = (ctensor::arg(w) - ctensor::arg(z)).rem_euclid(2.0 * PI);
                    assert!(d.min(2.0 * PI - d) < 1e-9, "{k:?} {z}");
                }
            }
            if z.re > 0.0 && z.im > 0.0 {
                assert_eq!(val(ActivationKind::ZRelu), z);
                assert_eq!(val(ActivationKind::CRelu), z);
            }
        }
    }

    #[test]
    fn dense_identity_and_conv_scalar() {
        let eye = CTensor::new(vec![2, 2], vec![ONE, ZERO, ZERO, ONE]).unwrap();
        let layer = DenseLayer {
            weights: eye,
            bias: CTensor::zeros(&[2]),
        };
        let x = CTensor::vector(vec![c(1.0, 2.0), c(-3.0, 0.5)]);
        assert_eq!(dense_forward(&layer, &x).unwrap(), x);

        let conv = Conv2dLayer {
            kernels: CTensor::new(vec![1, 1, 1, 1], vec![c(0.0, 1.0)]).unwrap(),
            bias: CTensor::new(vec![1], vec![c(0.5, 0.0)]).unwrap(),
            stride: 1,
        };
        let inp = CTensor::new(vec![1, 1, 1], vec![c(2.0, 0.0)]).unwrap();
        assert_eq!(conv2d_forward(&conv, &inp).unwrap().data()[0], c(0.5, 2.0));
        assert!(conv2d_forward(&conv, &CTensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = Rng::new(31, 0);
        let x = ctensor::sample_circular_gaussian(&[3, 4, 4], 1.0, &mut rng).unwrap();
        let k = ctensor::sample_circular_gaussian(&[2, 3, 3, 3], 1.0, &mut rng).unwrap();
        let b = ctensor::sample_circular_gaussian(&[2], 1.0, &mut rng).unwrap();
        let layer = Conv2dLayer {
            kernels: k.clone(),
            bias: b.clone(),
            stride: 1,
        };
        let got = conv2d_forward(&layer, &x).unwrap();
        assert_eq!(got.shape(), &[2, 2, 2]);
        let at = |t: &CTensor, idx: &[usize]| {
            let mut flat = 0;
            for (d, i) in t.shape().iter().zip(idx) {
                flat = flat * d + i;
            }
            t.data()[flat]
        };
        for o in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = b.data()[o];
                    for ch in 0..3 {
                        for p in 0..3 {
                            for q in 0..3 {
                                acc += at(&k, &[o, ch, p, q]) * at(&x, &[ch, i + p, j + q]);
                            }
                        }
                    }
                    assert!((at(&got, &[o, i, j]) - acc).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_examples() {
        assert_eq!(magnitude_sigmoid_head(ZERO, 0.0), 0.5);
        assert_eq!(magnitude_sigmoid_head(c(1e6, 0.0), 0.0), 1.0);
        assert_eq!(magnitude_sigmoid_head(c(3.0, 4.0), 5.0), 0.5);

        let p = softmax_magnitude_head(&[c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0)]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mut logits = vec![ZERO; 10];
        logits[0] = c(10.0, 0.0);
        let p = softmax_magnitude_head(&logits).unwrap();
        let argmax = (0..10).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(argmax, 0);
        assert!(softmax_magnitude_head(&[ONE]).is_err());
    }

    #[test]
    fn softmax_normalized_and_phase_invariant() {
        let mut rng = Rng::new(5, 0);
        for _ in 0..100 {
            let z = ctensor::sample_circular_gaussian(&[7], 4.0, &mut rng).unwrap();
            let p = softmax_magnitude_head(z.data()).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let rot = z.scale(C64::from_polar(1.0, 6.0 * rng.uniform()));
            let q = softmax_magnitude_head(rot.data()).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), -(1.0 - P_CLAMP).ln());
        assert!(cross_entropy(&[0.0, 1.0], 1).unwrap() < 1e-11);
        assert!((cross_entropy(&[0.1; 10], 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((bce(0.5, 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.5, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(bce(0.5, 2).is_err());
        assert!(bce(0.0, 1).unwrap().is_finite());
    }

    #[test]
    fn init_statistics_and_determinism() {
        let net = Network::new(Architecture::mlp(
            100,
            &[],
            1000,
            ActivationKind::Cardioid,
            HeadSpec::SoftmaxMagnitude,
        ))
        .unwrap();
        let p = net.init_params(&mut Rng::new(1, 0)).unwrap();
        let w = &p.tensors[0];
        let n = w.len() as f64;
        let mean_sq = w.norm_sqr() / n;
        // E|w|² = 0.01, Var|w|² = 0.01² for a circular Gaussian
        assert!((mean_sq - 0.01).abs() < 4.0 * 0.01 / n.sqrt(), "{mean_sq}");
        assert!(p.tensors[1].data().iter().all(|&z| z == ZERO));
        let q = net.init_params(&mut Rng::new(1, 0)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn network_losses_match_plain_functions() {
        let mut rng = Rng::new(2, 0);
        for head in [HeadSpec::SoftmaxMagnitude, HeadSpec::MagnitudeSigmoid] {
            let outs = if head == HeadSpec::SoftmaxMagnitude { 3 } else { 1 };
            let net = Network::new(Architecture::mlp(4, &[5], outs, ActivationKind::IGaussian, head)).unwrap();
            let mut p = net.init_params(&mut rng).unwrap();
            if let Some(c) = p.tensors.last_mut().filter(|_| head == HeadSpec::MagnitudeSigmoid) {
                c.data_mut()[0] = C64::new(0.3, 0.0);
            }
            let x = ctensor::sample_circular_gaussian(&[4], 1.0, &mut rng).unwrap();
            let probs = net.scores(&p.tensors, &x).unwrap();
            for label in 0..net.classes() {
                let expected = if head == HeadSpec::SoftmaxMagnitude {
                    cross_entropy(&probs, label).unwrap()
                } else {
                    bce(probs[1], label).unwrap()
                };
                let (loss, _) = value_and_grad(&p.tensors, |t, v| net.loss(t, v, &x, label)).unwrap();
                assert!((loss - expected).abs() < 1e-12, "{head:?}: {loss} vs {expected}");
            }
        }
    }

    #[test]
    fn network_gradcheck_with_trainable_params() {
        let mut rng = Rng::new(9, 0);
        for kind in [
            ActivationKind::TrainableCardioidPerFeature,
            ActivationKind::TrainableCardioidSingle,
            ActivationKind::SigLog,
        ] {
            let net = Network::new(Architecture::mlp(3, &[4], 1, kind, HeadSpec::MagnitudeSigmoid)).unwrap();
            let mut p = net.init_params(&mut rng).unwrap();
            for (t, k) in p.tensors.iter_mut().zip(&p.kinds) {
                if *k == ParamKind::Real {
                    t.data_mut()
                        .iter_mut()
                        .for_each(|z| *z = C64::new(0.3 * rng.normal(), 0.0));
                }
            }
            let x = ctensor::sample_circular_gaussian(&[3], 1.0, &mut rng).unwrap();
            let r = gradcheck(|t, v| net.loss(t, v, &x, 1), &p.tensors, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn conv_network_builds_and_differentiates() {
        let arch = Architecture {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 2,
                    kernel: [3, 3],
                    stride: 1,
                },
                LayerSpec::Activation {
                    kind: ActivationKind::IGaussian,
                },
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
            head: HeadSpec::SoftmaxMagnitude,
            activation: ActivationConfig::default(),
        };
        let net = Network::new(arch).unwrap();
        let mut rng = Rng::new(4, 0);
        let p = net.init_params(&mut rng).unwrap();
        let x = ctensor::sample_circular_gaussian(&[1, 6, 6], 1.0, &mut rng).unwrap();
        let r = gradcheck(|t, v| net.loss(t, v, &x, 2), &p.tensors, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn invalid_architectures_rejected() {
        let bad = Architecture::mlp(4, &[], 1, ActivationKind::CRelu, HeadSpec::SoftmaxMagnitude);
        assert!(Network::new(bad).is_err());
        let mut conv_on_vec = Architecture::mlp(4, &[], 2, ActivationKind::CRelu, HeadSpec::SoftmaxMagnitude);
        conv_on_vec.layers.insert(
            0,
            LayerSpec::Conv2d {
                filters: 1,
                kernel: [1, 1],
                stride: 1,
            },
        );
        assert!(Network::new(conv_on_vec).is_err());
    }
}
