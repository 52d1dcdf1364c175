//! Reverse-mode automatic differentiation over ℂℝ (Wirtinger) calculus.
//!
//! Every node `w = f(z)` carries the Wirtinger pair `(∂w/∂z, ∂w/∂z̄)`. Only
//! the conjugate adjoint `a = ∂L/∂(·)̄` is propagated; for a real loss the
//! other adjoint is its conjugate. The update for an input `z` of node `w` is
//!
//! ```text
//! a_z += conj(a_w) · ∂w/∂z̄ + a_w · conj(∂w/∂z)
//! ```
//!
//! which reduces to `a_z = a_w · conj(f'(z))` for holomorphic `f`.
//!
//! The gradient returned for a parameter `θ` is `∂L/∂θ̄` itself. It is *not*
//! doubled: for `L = z z̄` the adjoint is `z`, with norm `|z|`, whereas the
//! gradient of the same function over `ℝ²` has norm `2|z|`.
//!
//! Differentiating the real part of the root is what makes the rule exact,
//! so the root is seeded with `∂Re(w)/∂w̄ = ½`. Intermediate nodes may use
//! holomorphic extensions of real functions (`exp`, `log`, sigmoid).

use crate::ctensor::{self, conv_out_dim, matmul_dims, CTensor, C64, ONE, ZERO};
use crate::error::{domain, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value and Wirtinger pair of a scalar map at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partials {
    pub value: C64,
    /// `∂w/∂z`
    pub dz: C64,
    /// `∂w/∂z̄`
    pub dzbar: C64,
    /// Distance of the input from the nearest point where the map is not
    /// differentiable; `INFINITY` for smooth maps.
    pub kink: f64,
}

impl Partials {
    pub fn smooth(value: C64, dz: C64, dzbar: C64) -> Self {
        Self {
            value,
            dz,
            dzbar,
            kink: f64::INFINITY,
        }
    }

    pub fn holomorphic(value: C64, derivative: C64) -> Self {
        Self::smooth(value, derivative, ZERO)
    }

    /// Builds the pair from the real Jacobian of `u + iv` in `(x, y)`.
    pub fn from_jacobian(value: C64, ux: f64, uy: f64, vx: f64, vy: f64) -> Self {
        Self::smooth(
            value,
            C64::new(0.5 * (ux + vy), 0.5 * (vx - uy)),
            C64::new(0.5 * (ux - vy), 0.5 * (vx + uy)),
        )
    }

    pub fn with_kink(mut self, kink: f64) -> Self {
        self.kink = kink;
        self
    }
}

/// Registered elementwise maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Conj,
    Square,
    /// `z z̄`
    AbsSq,
    Abs,
    Re,
    Im,
    Exp,
    Log,
    /// Logistic sigmoid, holomorphically extended.
    Sigmoid,
    /// `ln(1 + e^z)`, holomorphically extended.
    Softplus,
    AddConst(C64),
    /// Real part clamped into `[lo, hi]`; zero derivative outside.
    ClampRe {
        lo: f64,
        hi: f64,
    },
}

impl UnaryOp {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Neg => "neg",
            Self::Conj => "conj",
            Self::Square => "square",
            Self::AbsSq => "abs_sq",
            Self::Abs => "abs",
            Self::Re => "re",
            Self::Im => "im",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::AddConst(_) => "add_const",
            Self::ClampRe { .. } => "clamp_re",
        }
    }

    pub fn is_holomorphic(&self) -> bool {
        matches!(
            self,
            Self::Neg | Self::Square | Self::Exp | Self::Log | Self::Sigmoid | Self::Softplus | Self::AddConst(_)
        )
    }

    pub fn eval(&self, z: C64) -> Partials {
        let half = C64::new(0.5, 0.0);
        match *self {
            Self::Neg => Partials::holomorphic(-z, -ONE),
            Self::Conj => Partials::smooth(z.conj(), ZERO, ONE),
            Self::Square => Partials::holomorphic(z * z, 2.0 * z),
            Self::AbsSq => Partials::smooth(C64::new(z.norm_sqr(), 0.0), z.conj(), z),
            Self::Abs => {
                let r = z.norm();
                if r == 0.0 {
                    Partials::smooth(ZERO, ZERO, ZERO).with_kink(0.0)
                } else {
                    Partials::smooth(C64::new(r, 0.0), z.conj() / (2.0 * r), z / (2.0 * r)).with_kink(r)
                }
            }
            Self::Re => Partials::smooth(C64::new(z.re, 0.0), half, half),
            Self::Im => Partials::smooth(C64::new(z.im, 0.0), C64::new(0.0, -0.5), C64::new(0.0, 0.5)),
            Self::Exp => {
                let e = z.exp();
                Partials::holomorphic(e, e)
            }
            Self::Log => Partials::holomorphic(z.ln(), z.inv()),
            Self::Sigmoid => {
                let s = sigmoid_c(z);
                Partials::holomorphic(s, s * (ONE - s))
            }
            Self::Softplus => Partials::holomorphic(softplus_c(z), sigmoid_c(z)),
            Self::AddConst(c) => Partials::holomorphic(z + c, ONE),
            Self::ClampRe { lo, hi } => {
                let x = z.re;
                let kink = (x - lo).abs().min((x - hi).abs());
                if x < lo {
                    Partials::smooth(C64::new(lo, 0.0), ZERO, ZERO).with_kink(kink)
                } else if x > hi {
                    Partials::smooth(C64::new(hi, 0.0), ZERO, ZERO).with_kink(kink)
                } else {
                    Partials::smooth(C64::new(x, 0.0), half, half).with_kink(kink)
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_c(z: C64) -> C64 {
    if z.im == 0.0 {
        return C64::new(sigmoid(z.re), 0.0);
    }
    if z.re >= 0.0 {
        (ONE + (-z).exp()).inv()
    } else {
        let e = z.exp();
        e / (ONE + e)
    }
}

fn softplus_c(z: C64) -> C64 {
    if z.re > 0.0 {
        z + (ONE + (-z).exp()).ln()
    } else {
        (ONE + z.exp()).ln()
    }
}

/// Identity of the operation that produced a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    /// Hadamard product.
    Mul,
    Scale(C64),
    MatMul,
    Conv2d,
    Sum,
    Reshape,
    Index,
    Gather,
    Unary(UnaryOp),
    /// Elementwise map registered by name (activations).
    Elementwise(&'static str),
    /// A value recorded without derivative rules.
    Opaque(&'static str),
}

impl Primitive {
    /// Wirtinger pair of the primitive viewed as a scalar map of its first
    /// operand, with `partner` standing in for the other operand where one
    /// exists. `None` for primitives without a scalar form.
    pub fn scalar_partials(&self, z: C64, partner: C64) -> Option<Partials> {
        Some(match self {
            Self::Add => Partials::holomorphic(z + partner, ONE),
            Self::Sub => Partials::holomorphic(z - partner, ONE),
            Self::Mul | Self::MatMul => Partials::holomorphic(z * partner, partner),
            Self::Scale(c) => Partials::holomorphic(z * c, *c),
            Self::Unary(op) => op.eval(z),
            _ => return None,
        })
    }

    pub fn is_holomorphic(&self) -> bool {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::MatMul | Self::Scale(_) | Self::Sum | Self::Reshape => true,
            Self::Unary(op) => op.is_holomorphic(),
            _ => false,
        }
    }
}

/// `max |∂w/∂z̄|` of a primitive's registered pair over the sample points.
pub fn holomorphy_residual(primitive: &Primitive, points: &[C64]) -> Option<f64> {
    let partner = C64::new(0.75, -1.25);
    points.iter().try_fold(0.0f64, |m, &z| {
        primitive.scalar_partials(z, partner).map(|p| m.max(p.dzbar.norm()))
    })
}

#[derive(Debug, Clone)]
enum Backward {
    None,
    Add,
    Sub,
    Mul,
    Scale(C64),
    MatMul,
    Conv2d {
        stride: usize,
    },
    Sum,
    Reshape,
    Index(usize),
    Gather(Vec<usize>),
    Elementwise {
        dz: Vec<C64>,
        dzbar: Vec<C64>,
    },
    /// Elementwise map with a real parameter vector; `feature_size` is the
    /// number of consecutive elements sharing one parameter entry.
    ElementwiseParam {
        dz: Vec<C64>,
        dzbar: Vec<C64>,
        dwdb: Vec<C64>,
        feature_size: usize,
    },
    Opaque,
}

#[derive(Debug, Clone)]
struct Node {
    prim: Primitive,
    inputs: Vec<Var>,
    value: CTensor,
    backward: Backward,
}

/// Recorded computation. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    root: Option<Var>,
    min_kink: f64,
}

/// Per-parameter conjugate gradients `∂L/∂θ̄`, aligned with the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateGradient {
    pub grads: Vec<CTensor>,
}

impl ConjugateGradient {
    pub fn zeros_like(params: &[CTensor]) -> Self {
        Self {
            grads: params.iter().map(|p| CTensor::zeros(p.shape())).collect(),
        }
    }

    /// Hermitian L2 norm over all parameters jointly.
    pub fn norm(&self) -> f64 {
        let scale = self
            .grads
            .iter()
            .flat_map(|g| g.data())
            .fold(0.0f64, |m, z| m.max(z.re.abs()).max(z.im.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return scale;
        }
        let s: f64 = self
            .grads
            .iter()
            .flat_map(|g| g.data())
            .map(|z| (z / scale).norm_sqr())
            .sum();
        scale * s.sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            grads: self.grads.iter().map(|g| g.scale_real(c)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(domain("gradient parameter counts differ"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a = a.add(b)?;
        }
        Ok(())
    }

    /// `∂L/∂θ`, the conjugate of the stored adjoints (valid for real `L`).
    pub fn holomorphic_part(&self) -> Self {
        Self {
            grads: self.grads.iter().map(|g| g.conj()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &C64> {
        self.grads.iter().flat_map(|g| g.data())
    }
}

/// Tolerance on the imaginary part of a real loss.
pub fn loss_is_real(v: C64) -> bool {
    v.im == 0.0 || v.im.abs() <= 1e-9 * (1.0 + v.re.abs())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            min_kink: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &CTensor {
        &self.nodes[v.0].value
    }

    pub fn primitive(&self, v: Var) -> &Primitive {
        &self.nodes[v.0].prim
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn root(&self) -> Option<Var> {
        self.root
    }

    /// Smallest distance of any recorded input from a non-differentiable
    /// point. Finite-difference checks are unreliable when this is below the
    /// step size.
    pub fn kink_margin(&self) -> f64 {
        self.min_kink
    }

    fn push(&mut self, prim: Primitive, inputs: Vec<Var>, value: CTensor, backward: Backward) -> Var {
        self.nodes.push(Node {
            prim,
            inputs,
            value,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: CTensor) -> Var {
        self.push(Primitive::Leaf, vec![], value, Backward::None)
    }

    /// Registers the next parameter leaf; parameters are numbered in call order.
    pub fn param(&mut self, value: CTensor) -> Var {
        let v = self.push(Primitive::Leaf, vec![], value, Backward::None);
        self.params.push(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Primitive::Add, vec![a, b], value, Backward::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Primitive::Sub, vec![a, b], value, Backward::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Primitive::Mul, vec![a, b], value, Backward::Mul))
    }

    pub fn scale(&mut self, a: Var, c: C64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Primitive::Scale(c), vec![a], value, Backward::Scale(c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Primitive::MatMul, vec![a, b], value, Backward::MatMul))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let value = ctensor::conv2d_valid(self.value(input), self.value(kernels), self.value(bias), stride)?;
        Ok(self.push(
            Primitive::Conv2d,
            vec![input, kernels, bias],
            value,
            Backward::Conv2d { stride },
        ))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: C64 = self.value(a).data().iter().sum();
        self.push(Primitive::Sum, vec![a], CTensor::scalar(s), Backward::Sum)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Primitive::Reshape, vec![a], value, Backward::Reshape))
    }

    /// Entry `i` of the flattened tensor, as a rank-0 tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let z = *t
            .data()
            .get(i)
            .ok_or_else(|| domain(format!("index {i} out of range for {} entries", t.len())))?;
        Ok(self.push(Primitive::Index, vec![a], CTensor::scalar(z), Backward::Index(i)))
    }

    /// Picks flat entries `indices` of `a` into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let data = indices
            .iter()
            .map(|&i| {
                src.get(i)
                    .copied()
                    .ok_or_else(|| domain(format!("gather index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let value = CTensor::new(shape.to_vec(), data)?;
        Ok(self.push(Primitive::Gather, vec![a], value, Backward::Gather(indices)))
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Var {
        self.elementwise_impl(a, Primitive::Unary(op), |z| op.eval(z))
    }

    /// Records a named elementwise map whose pair is supplied by `f`.
    pub fn elementwise(&mut self, a: Var, name: &'static str, f: impl Fn(C64) -> Partials) -> Var {
        self.elementwise_impl(a, Primitive::Elementwise(name), f)
    }

    fn elementwise_impl(&mut self, a: Var, prim: Primitive, f: impl Fn(C64) -> Partials) -> Var {
        let input = self.value(a);
        let n = input.len();
        let mut out = Vec::with_capacity(n);
        let mut dz = Vec::with_capacity(n);
        let mut dzbar = Vec::with_capacity(n);
        let mut kink = self.min_kink;
        for &z in input.data() {
            let p = f(z);
            out.push(p.value);
            dz.push(p.dz);
            dzbar.push(p.dzbar);
            kink = kink.min(p.kink);
        }
        let shape = input.shape().to_vec();
        self.min_kink = kink;
        let value = CTensor::new(shape, out).expect("shape preserved");
        self.push(prim, vec![a], value, Backward::Elementwise { dz, dzbar })
    }

    /// Elementwise map with a real parameter vector `param`. Element `k` uses
    /// parameter entry `k / (len / param_len)`. `f(z, b)` returns the pair in
    /// `z` together with the real derivative `∂w/∂b`.
    pub fn elementwise_param(
        &mut self,
        a: Var,
        param: Var,
        name: &'static str,
        f: impl Fn(C64, f64) -> (Partials, C64),
    ) -> Result<Var> {
        let input = self.value(a);
        let b = self.value(param);
        let n = input.len();
        if b.is_empty() || !n.is_multiple_of(b.len()) {
            return Err(Error::Shape {
                op: "elementwise_param",
                left: input.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let feature_size = n / b.len();
        let mut out = Vec::with_capacity(n);
        let mut dz = Vec::with_capacity(n);
        let mut dzbar = Vec::with_capacity(n);
        let mut dwdb = Vec::with_capacity(n);
        let mut kink = self.min_kink;
        for (k, &z) in input.data().iter().enumerate() {
            let (p, db) = f(z, b.data()[k / feature_size].re);
            out.push(p.value);
            dz.push(p.dz);
            dzbar.push(p.dzbar);
            dwdb.push(db);
            kink = kink.min(p.kink);
        }
        let value = CTensor::new(input.shape().to_vec(), out)?;
        self.min_kink = kink;
        Ok(self.push(
            Primitive::Elementwise(name),
            vec![a, param],
            value,
            Backward::ElementwiseParam {
                dz,
                dzbar,
                dwdb,
                feature_size,
            },
        ))
    }

    /// Records a value with no derivative rule. Backpropagating a nonzero
    /// adjoint into it is an error.
    pub fn opaque(&mut self, name: &'static str, inputs: Vec<Var>, value: CTensor) -> Var {
        self.push(Primitive::Opaque(name), inputs, value, Backward::Opaque)
    }

    // Convenience wrappers.

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Log)
    }

    /// Marks `v` as the loss. It must be a single entry with zero imaginary part.
    pub fn set_root(&mut self, v: Var) -> Result<f64> {
        let t = self.value(v);
        let z = t
            .item()
            .ok_or_else(|| Error::Contract(format!("loss must be scalar, got shape {:?}", t.shape())))?;
        if !loss_is_real(z) {
            return Err(Error::Contract(format!("loss must be real, got {z}")));
        }
        self.root = Some(v);
        Ok(z.re)
    }

    /// Propagates conjugate adjoints from the root to every parameter.
    pub fn backward(&self) -> Result<ConjugateGradient> {
        let root = self
            .root
            .ok_or_else(|| Error::Contract("tape has no loss root".into()))?;
        let mut adj: Vec<Option<Vec<C64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![C64::new(0.5, 0.0)]);

        for idx in (0..=root.0).rev() {
            let Some(aw) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.backward, Backward::None) {
                adj[idx] = Some(aw);
                continue;
            }
            self.propagate(node, &aw, &mut adj)?;
            adj[idx] = Some(aw);
        }

        let grads = self
            .params
            .iter()
            .map(|p| {
                let shape = self.nodes[p.0].value.shape().to_vec();
                match adj[p.0].take() {
                    Some(a) => CTensor::new(shape, a).expect("adjoint matches parameter"),
                    None => CTensor::zeros(&shape),
                }
            })
            .collect();
        Ok(ConjugateGradient { grads })
    }

    fn propagate(&self, node: &Node, aw: &[C64], adj: &mut [Option<Vec<C64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [C64])| {
            let len = self.nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![ZERO; len]);
            f(slot);
        };
        let ins = &node.inputs;
        match &node.backward {
            Backward::None => {}
            Backward::Add => {
                acc(ins[0], &mut |s| s.iter_mut().zip(aw).for_each(|(s, a)| *s += a));
                acc(ins[1], &mut |s| s.iter_mut().zip(aw).for_each(|(s, a)| *s += a));
            }
            Backward::Sub => {
                acc(ins[0], &mut |s| s.iter_mut().zip(aw).for_each(|(s, a)| *s += a));
                acc(ins[1], &mut |s| s.iter_mut().zip(aw).for_each(|(s, a)| *s -= a));
            }
            Backward::Mul => {
                let x = self.nodes[ins[0].0].value.data();
                let y = self.nodes[ins[1].0].value.data();
                acc(ins[0], &mut |s| {
                    for ((s, a), b) in s.iter_mut().zip(aw).zip(y) {
                        *s += a * b.conj();
                    }
                });
                acc(ins[1], &mut |s| {
                    for ((s, a), b) in s.iter_mut().zip(aw).zip(x) {
                        *s += a * b.conj();
                    }
                });
            }
            Backward::Scale(c) => {
                let cc = c.conj();
                acc(ins[0], &mut |s| s.iter_mut().zip(aw).for_each(|(s, a)| *s += a * cc));
            }
            Backward::MatMul => {
                let left = &self.nodes[ins[0].0].value;
                let right = &self.nodes[ins[1].0].value;
                let (m, k, n) = matmul_dims(left.shape(), right.shape())?;
                let (l, r) = (left.data(), right.data());
                // a_L = a_W · R^H
                acc(ins[0], &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = ZERO;
                            for j in 0..n {
                                t += aw[i * n + j] * r[p * n + j].conj();
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                // a_R = L^H · a_W
                acc(ins[1], &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let lc = l[i * k + p].conj();
                            for j in 0..n {
                                s[p * n + j] += lc * aw[i * n + j];
                            }
                        }
                    }
                });
            }
            Backward::Conv2d { stride } => {
                let stride = *stride;
                let x = &self.nodes[ins[0].0].value;
                let kern = &self.nodes[ins[1].0].value;
                let (&[c, h, w], &[o, _, kh, kw]) = (x.shape(), kern.shape()) else {
                    return Err(Error::Contract("conv2d node with malformed shapes".into()));
                };
                let oh = conv_out_dim(h, kh, stride).expect("checked in forward");
                let ow = conv_out_dim(w, kw, stride).expect("checked in forward");
                let (xd, kd) = (x.data(), kern.data());
                acc(ins[0], &mut |s| {
                    for oc in 0..o {
                        for i in 0..oh {
                            for j in 0..ow {
                                let a = aw[(oc * oh + i) * ow + j];
                                for ic in 0..c {
                                    for p in 0..kh {
                                        for q in 0..kw {
                                            let kv = kd[((oc * c + ic) * kh + p) * kw + q];
                                            s[(ic * h + i * stride + p) * w + j * stride + q] += a * kv.conj();
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(ins[1], &mut |s| {
                    for oc in 0..o {
                        for i in 0..oh {
                            for j in 0..ow {
                                let a = aw[(oc * oh + i) * ow + j];
                                for ic in 0..c {
                                    for p in 0..kh {
                                        for q in 0..kw {
                                            let xv = xd[(ic * h + i * stride + p) * w + j * stride + q];
                                            s[((oc * c + ic) * kh + p) * kw + q] += a * xv.conj();
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(ins[2], &mut |s| {
                    for oc in 0..o {
                        s[oc] += aw[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<C64>();
                    }
                });
            }
            Backward::Sum => {
                let a = aw[0];
                acc(ins[0], &mut |s| s.iter_mut().for_each(|s| *s += a));
            }
            Backward::Reshape => {
                acc(ins[0], &mut |s| s.iter_mut().zip(aw).for_each(|(s, a)| *s += a));
            }
            Backward::Index(i) => {
                let i = *i;
                acc(ins[0], &mut |s| s[i] += aw[0]);
            }
            Backward::Gather(indices) => {
                acc(ins[0], &mut |s| {
                    for (&i, a) in indices.iter().zip(aw) {
                        s[i] += a;
                    }
                });
            }
            Backward::Elementwise { dz, dzbar } => {
                acc(ins[0], &mut |s| {
                    for k in 0..s.len() {
                        s[k] += aw[k].conj() * dzbar[k] + aw[k] * dz[k].conj();
                    }
                });
            }
            Backward::ElementwiseParam {
                dz,
                dzbar,
                dwdb,
                feature_size,
            } => {
                acc(ins[0], &mut |s| {
                    for k in 0..s.len() {
                        s[k] += aw[k].conj() * dzbar[k] + aw[k] * dz[k].conj();
                    }
                });
                // Real parameter: ∂L/∂b̄ = ½ dL/db = Re(conj(a_w) ∂w/∂b).
                let fs = *feature_size;
                acc(ins[1], &mut |s| {
                    for (k, db) in dwdb.iter().enumerate() {
                        s[k / fs] += C64::new((aw[k].conj() * db).re, 0.0);
                    }
                });
            }
            Backward::Opaque => {
                if aw.iter().any(|a| *a != ZERO) {
                    return Err(Error::Contract(format!(
                        "unregistered primitive {:?} has no derivative rule",
                        node.prim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Runs `model_fn` on a fresh tape whose parameter leaves hold `params`,
/// returning the real loss and the tape.
pub fn forward<F>(params: &[CTensor], model_fn: F) -> Result<(f64, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = model_fn(&mut tape, &vars)?;
    let loss = tape.set_root(out)?;
    Ok((loss, tape))
}

pub fn backward(tape: &Tape) -> Result<ConjugateGradient> {
    tape.backward()
}

pub fn value_and_grad<F>(params: &[CTensor], model_fn: F) -> Result<(f64, ConjugateGradient)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let (loss, tape) = forward(params, model_fn)?;
    Ok((loss, tape.backward()?))
}

/// Relative error used by gradient checks.
pub fn relative_error(a: C64, b: C64) -> f64 {
    (a - b).norm() / (1e-8 + a.norm() + b.norm())
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Worst relative error; `INFINITY` when a difference was not finite.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Kink margin of the unperturbed forward pass.
    pub kink_margin: f64,
    pub entries_checked: usize,
}

/// Compares backward adjoints with central differences combined as
/// `½(Dx + i·Dy)`.
pub fn gradcheck<F>(model_fn: F, params: &[CTensor], step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(domain(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, tape) = forward(params, &model_fn)?;
    let grad = tape.backward()?;
    let kink_margin = tape.kink_margin();

    let eval = |ps: &[CTensor]| -> Result<f64> { forward(ps, &model_fn).map(|(l, _)| l) };
    let mut work: Vec<CTensor> = params.to_vec();
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for p in 0..params.len() {
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            let mut diff = |delta: C64| -> Result<f64> {
                work[p].data_mut()[k] = orig + delta;
                let plus = eval(&work)?;
                work[p].data_mut()[k] = orig - delta;
                let minus = eval(&work)?;
                work[p].data_mut()[k] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let dx = diff(C64::new(step, 0.0))?;
            let dy = diff(C64::new(0.0, step))?;
            let fd = C64::new(0.5 * dx, 0.5 * dy);
            let a = grad.grads[p].data()[k];
            let err = if fd.re.is_finite() && fd.im.is_finite() && a.re.is_finite() && a.im.is_finite() {
                relative_error(a, fd)
            } else {
                f64::INFINITY
            };
            checked += 1;
            if worst.is_none() || err > max_err {
                max_err = err;
                worst = Some((p, k));
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_error: max_err,
        worst,
        kink_margin,
        entries_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn zzbar(tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let s = tape.unary(v[0], UnaryOp::AbsSq);
        Ok(tape.sum(s))
    }

    #[test]
    fn zzbar_loss_and_adjoint() {
        let z = CTensor::vector(vec![c(3.0, 4.0)]);
        let (loss, tape) = forward(&[z], zzbar).unwrap();
        assert_eq!(loss, 25.0);
        let g = tape.backward().unwrap();
        assert_eq!(g.grads[0].data()[0], c(3.0, 4.0));
        assert_eq!(g.norm(), 5.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let z = CTensor::vector(vec![c(1.0, -2.0)]);
        let (loss, tape) = forward(std::slice::from_ref(&z), |t, _| Ok(t.constant(CTensor::scalar(ZERO)))).unwrap();
        assert_eq!(loss, 0.0);
        let g = tape.backward().unwrap();
        assert_eq!(g.grads[0].data()[0], ZERO);
        let r = gradcheck(|t, _| Ok(t.constant(CTensor::scalar(ZERO))), &[z], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn real_part_of_scaled_input() {
        // L = Re(2z) → ∂L/∂z̄ = 1
        let z = CTensor::vector(vec![c(0.3, -0.7)]);
        let (_, g) = value_and_grad(&[z], |t, v| {
            let s = t.scale(v[0], c(2.0, 0.0));
            let r = t.unary(s, UnaryOp::Re);
            Ok(t.sum(r))
        })
        .unwrap();
        assert!((g.grads[0].data()[0] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn holomorphic_chain_matches_finite_differences() {
        // L = |z²|² via w = z², L = w w̄
        let z = CTensor::vector(vec![c(0.8, -1.3)]);
        let f = |t: &mut Tape, v: &[Var]| {
            let w = t.unary(v[0], UnaryOp::Square);
            let l = t.unary(w, UnaryOp::AbsSq);
            Ok(t.sum(l))
        };
        let r = gradcheck(f, std::slice::from_ref(&z), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        // closed form: ∂|z|⁴/∂z̄ = 2 z |z|²
        let (_, g) = value_and_grad(std::slice::from_ref(&z), f).unwrap();
        let zz = z.data()[0];
        assert!((g.grads[0].data()[0] - 2.0 * zz * zz.norm_sqr()).norm() < 1e-12);
    }

    #[test]
    fn non_scalar_or_complex_loss_rejected() {
        let z = CTensor::vector(vec![c(1.0, 1.0), c(2.0, 0.0)]);
        assert!(matches!(
            forward(std::slice::from_ref(&z), |_, v| Ok(v[0])),
            Err(Error::Contract(_))
        ));
        let err = forward(&[z], |t, v| Ok(t.sum(v[0]))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn opaque_node_blocks_backward() {
        let z = CTensor::vector(vec![c(1.0, 1.0)]);
        let (_, tape) = forward(&[z], |t, v| {
            let o = t.opaque("mystery", vec![v[0]], CTensor::vector(vec![c(2.0, 0.0)]));
            Ok(t.sum(o))
        })
        .unwrap();
        assert!(matches!(tape.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn holomorphy_residuals() {
        let pts = [c(1.0, 1.0), c(-0.3, 2.0), c(0.0, -1.0)];
        for p in [
            Primitive::Add,
            Primitive::Scale(c(0.0, 2.0)),
            Primitive::MatMul,
            Primitive::Unary(UnaryOp::Square),
        ] {
            assert!(p.is_holomorphic());
            assert_eq!(holomorphy_residual(&p, &pts), Some(0.0));
        }
        let sq = UnaryOp::Square.eval(c(1.0, 1.0));
        assert_eq!(sq.dz, c(2.0, 2.0));
        assert_eq!(sq.dzbar, ZERO);
        let cj = UnaryOp::Conj.eval(c(1.0, 1.0));
        assert_eq!((cj.dz, cj.dzbar), (ZERO, ONE));
        assert!(!Primitive::Unary(UnaryOp::Conj).is_holomorphic());
        assert_eq!(holomorphy_residual(&Primitive::Conv2d, &pts), None);
    }

    #[test]
    fn unary_ops_pass_gradcheck() {
        let ops = [
            UnaryOp::Neg,
            UnaryOp::Conj,
            UnaryOp::Square,
            UnaryOp::AbsSq,
            UnaryOp::Abs,
            UnaryOp::Re,
            UnaryOp::Im,
            UnaryOp::Exp,
            UnaryOp::Log,
            UnaryOp::Sigmoid,
            UnaryOp::Softplus,
            UnaryOp::AddConst(c(0.5, -0.25)),
        ];
        let z = CTensor::vector(vec![c(0.7, -0.4), c(-1.1, 0.9)]);
        let weights = CTensor::vector(vec![c(0.3, 0.8), c(-0.6, 0.2)]);
        for op in ops {
            // L = Re(Σ weights ⊙ op(z)) gives a generic real loss.
            let f = |t: &mut Tape, v: &[Var]| {
                let w = t.constant(weights.clone());
                let y = t.unary(v[0], op);
                let p = t.mul(y, w)?;
                let r = t.unary(p, UnaryOp::Re);
                Ok(t.sum(r))
            };
            let r = gradcheck(f, std::slice::from_ref(&z), DEFAULT_FD_STEP).unwrap();
            assert!(r.max_rel_error < 1e-6, "{}: {r:?}", op.name());
        }
    }

    #[test]
    fn matmul_and_conv_pass_gradcheck() {
        let mut rng = crate::rng::Rng::new(3, 0);
        let a = ctensor::sample_circular_gaussian(&[2, 3], 1.0, &mut rng).unwrap();
        let b = ctensor::sample_circular_gaussian(&[3, 2], 1.0, &mut rng).unwrap();
        let r = gradcheck(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let s = t.unary(m, UnaryOp::AbsSq);
                Ok(t.sum(s))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");

        let x = ctensor::sample_circular_gaussian(&[2, 5, 4], 1.0, &mut rng).unwrap();
        let k = ctensor::sample_circular_gaussian(&[3, 2, 2, 2], 0.5, &mut rng).unwrap();
        let bias = ctensor::sample_circular_gaussian(&[3], 1.0, &mut rng).unwrap();
        let r = gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2)?;
                let s = t.unary(y, UnaryOp::AbsSq);
                Ok(t.sum(s))
            },
            &[x, k, bias],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn gather_index_reshape_pass_gradcheck() {
        let mut rng = crate::rng::Rng::new(4, 0);
        let a = ctensor::sample_circular_gaussian(&[2, 3], 1.0, &mut rng).unwrap();
        let r = gradcheck(
            |t, v| {
                let flat = t.reshape(v[0], &[6])?;
                let g = t.gather(flat, vec![5, 0, 0, 2], &[4])?;
                let i = t.index(flat, 3)?;
                let gs = t.unary(g, UnaryOp::AbsSq);
                let is = t.unary(i, UnaryOp::AbsSq);
                let a = t.sum(gs);
                let b = t.sum(is);
                t.sub(a, b)
            },
            &[a],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn real_param_adjoint_is_real_half_derivative() {
        // w = z·(1 + b), L = |w|²;  dL/db = 2|z|²(1+b), adjoint = ½ of that.
        let z = CTensor::vector(vec![c(0.6, 0.8)]);
        let b = CTensor::vector(vec![c(0.5, 0.0)]);
        let (_, g) = value_and_grad(&[z, b], |t, v| {
            let y = t.elementwise_param(v[0], v[1], "lin", |z, b| {
                (Partials::holomorphic(z * (1.0 + b), C64::new(1.0 + b, 0.0)), z)
            })?;
            let s = t.unary(y, UnaryOp::AbsSq);
            Ok(t.sum(s))
        })
        .unwrap();
        let gb = g.grads[1].data()[0];
        assert_eq!(gb.im, 0.0);
        assert!((gb.re - 1.5).abs() < 1e-12);
    }

    #[test]
    fn topological_order_holds() {
        let z = CTensor::vector(vec![c(1.0, 0.5)]);
        let (_, tape) = forward(&[z], |t, v| {
            let a = t.unary(v[0], UnaryOp::Square);
            let b = t.mul(a, v[0])?;
            let r = t.unary(b, UnaryOp::Re);
            Ok(t.sum(r))
        })
        .unwrap();
        for i in 0..tape.len() {
            assert!(tape.inputs(Var(i)).iter().all(|v| v.index() < i));
        }
    }
}
