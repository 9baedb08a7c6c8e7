use std::collections::BTreeMap;

use super::conv::{col2im_add, conv2d_impl, gemm, ConvGeom, Transpose};
use super::{numel, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// tanh approximation
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }
}

/// A differentiable operation defined outside the tape, e.g. a fused loss.
pub trait CustomOp<S: Real> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[(&[S], &[usize])]) -> Result<(Vec<S>, Vec<usize>), TensorError>;

    /// Vector-Jacobian product; returns one entry per input, `None` where
    /// `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[(&[S], &[usize])],
        grad_out: &[S],
        needs: &[bool],
    ) -> Vec<Option<Vec<S>>>;
}

enum Op<S: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        cols: Vec<S>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AbsDiff(Var, Var),
    Scale(Var, S),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    ChannelsFirst(Var),
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<S>>,
    },
}

struct Node<S: Real> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Per-parameter gradients produced by [`Tape::backward`], keyed by the
/// parameter key passed to [`Tape::param`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<S> {
    by_key: BTreeMap<usize, Vec<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, key: usize) -> Option<&[S]> {
        self.by_key.get(&key).map(|v| v.as_slice())
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_key.keys().copied()
    }

    /// Accumulates into the `grad` field of `params[key]`.
    pub fn apply_to(&self, params: &mut [&mut Tensor<S>]) -> Result<(), TensorError> {
        for (&key, g) in &self.by_key {
            let p = params.get_mut(key).ok_or_else(|| {
                TensorError::invalid("Gradients::apply_to", format!("no parameter {key}"))
            })?;
            p.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Linear record of executed operations. Inputs always precede the nodes that
/// consume them, so a reverse sweep is a valid topological order.
pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<S: Real>(op: &'static str, v: &[S]) -> Result<(), TensorError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// 0.5 * (1 + tanh(z)) == sigmoid(2z), which needs a single exp
fn gelu_fwd<S: Real>(x: S) -> S {
    let c = S::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    x * sigmoid(c * (x + k * x * x * x))
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let s = sigmoid(c * (x + k * x * x * x));
    s + x * s * (S::one() - s) * c * (S::one() + S::lit(3.0) * k * x * x)
}

fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Calls `f(input_index, output_index)` for every element of a pixel
/// shuffle of an input with shape `shape_in`.
fn for_each_shuffle(shape_in: &[usize], r: usize, mut f: impl FnMut(usize, usize)) {
    let (b, c_in, h, w) = (shape_in[0], shape_in[1], shape_in[2], shape_in[3]);
    let c = c_in / (r * r);
    let (ho, wo) = (h * r, w * r);
    for n in 0..b {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..h {
                        let src = ((n * c_in + ch * r * r + i * r + j) * h + y) * w;
                        let dst = ((n * c + ch) * ho + y * r + i) * wo + j;
                        for x in 0..w {
                            f(src + x, dst + x * r);
                        }
                    }
                }
            }
        }
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradients; parameters bind as constants.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad: needs_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::shape(
                "constant",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    /// Records a parameter leaf. Gradients for it are reported under `key`.
    pub fn param(&mut self, key: usize, t: &Tensor<S>) -> Var {
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(key);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, TensorError> {
        let keep_cols = self.needs(w);
        let (out, shape, cols) = conv2d_impl(
            self.value(x),
            self.shape(x),
            self.value(w),
            self.shape(w),
            self.value(b),
            pad,
            keep_cols,
        )?;
        if self.shape(b).len() != 1 {
            return Err(TensorError::shape("conv2d", "bias must be rank 1"));
        }
        ensure_finite("conv2d", &out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, shape, Op::Conv2d { x, w, b, pad, cols }, ng))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(TensorError::invalid(
                "pixel_shuffle",
                format!("shape {s:?} not divisible into r^2 groups for r={r}"),
            ));
        }
        let src = self.value(x);
        let mut out = vec![S::zero(); src.len()];
        for_each_shuffle(&s, r, |i, o| out[o] = src[i]);
        let shape = vec![s[0], s[1] / (r * r), s[2] * r, s[3] * r];
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::PixelShuffle { x, r }, ng))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(TensorError::invalid(
                "pixel_unshuffle",
                format!("spatial dims of {s:?} not divisible by r={r}"),
            ));
        }
        let shape = vec![s[0], s[1] * r * r, s[2] / r, s[3] / r];
        let src = self.value(x);
        let mut out = vec![S::zero(); src.len()];
        for_each_shuffle(&shape, r, |i, o| out[i] = src[o]);
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::PixelUnshuffle { x, r }, ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        let out: Vec<S> = match kind {
            Activation::Gelu => self.value(x).iter().map(|&v| gelu_fwd(v)).collect(),
            Activation::Relu => self.value(x).iter().map(|&v| v.max(S::zero())).collect(),
        };
        ensure_finite(kind.name(), &out)?;
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::Act { x, kind }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out: Vec<S> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::Sigmoid(x), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        ensure_finite(name, &out)?;
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("abs_diff", a, b, |x, y| (x - y).abs(), Op::AbsDiff(a, b))
    }

    pub fn scalar_mul(&mut self, x: Var, s: S) -> Result<Var, TensorError> {
        let out: Vec<S> = self.value(x).iter().map(|&v| v * s).collect();
        ensure_finite("scalar_mul", &out)?;
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::Scale(x, s), ng))
    }

    /// Mean over all elements, producing a rank-0 scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let sum: S = self.value(x).iter().copied().sum();
        let ng = self.needs(x);
        Ok(self.push(vec![sum / S::lit(n as f64)], vec![], Op::Mean(x), ng))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Selects one entry along the leading `index.len()` axes, keeping a unit
    /// leading axis: `[D0, D1, rest..] -> [1, rest..]`.
    pub fn select(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if index.is_empty() || index.len() >= s.len() {
            return Err(TensorError::invalid(
                "select",
                format!("{} indices for shape {s:?}", index.len()),
            ));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&s) {
            if i >= d {
                return Err(TensorError::invalid(
                    "select",
                    format!("index {index:?} out of range for shape {s:?}"),
                ));
            }
            flat = flat * d + i;
        }
        let rest = &s[index.len()..];
        let inner: usize = rest.iter().product();
        let offset = flat * inner;
        let out = self.value(x)[offset..offset + inner].to_vec();
        let mut shape = vec![1];
        shape.extend_from_slice(rest);
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::Slice { x, offset }, ng))
    }

    /// `[B, H, W, C] -> [B, C, H, W]`
    pub fn channels_first(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("channels_first", format!("rank-4 expected, got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x);
        let mut out = vec![S::zero(); src.len()];
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        out[((n * c + ch) * h + y) * w + xx] = src[((n * h + y) * w + xx) * c + ch];
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![b, c, h, w], Op::ChannelsFirst(x), ng))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(TensorError::invalid(
                "upsample_nearest",
                format!("shape {s:?}, factor {factor}"),
            ));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x);
        let mut out = vec![S::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = src[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![b, c, ho, wo], Op::UpsampleNearest { x, factor }, ng))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<S>>) -> Result<Var, TensorError> {
        let args: Vec<(&[S], &[usize])> =
            inputs.iter().map(|&v| (self.value(v), self.shape(v))).collect();
        let (out, shape) = op.forward(&args)?;
        if numel(&shape) != out.len() {
            return Err(TensorError::shape(op.name(), "custom op output/shape disagree"));
        }
        ensure_finite(op.name(), &out)?;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            shape,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::invalid("backward", "empty tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = Gradients::default();
        let nodes = std::mem::take(&mut self.nodes);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(key) = node.param {
                match out.by_key.get_mut(&key) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        out.by_key.insert(key, g);
                    }
                }
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(out)
    }
}

fn accumulate<S: Real>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
    f(slot);
}

fn backprop_node<S: Real>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) -> Result<(), TensorError> {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, pad, cols } => {
            let xs = &nodes[x.0].shape;
            let (batch, geom) = ConvGeom::check(xs, &nodes[w.0].shape, &nodes[b.0].shape, *pad)?;
            let hw = geom.pixels();
            let rows = geom.col_rows();
            let wv = &nodes[w.0].value;
            accumulate(nodes, grads, *b, |gb| {
                for n in 0..batch {
                    for (co, plane) in g[n * geom.cout * hw..(n + 1) * geom.cout * hw]
                        .chunks(hw)
                        .enumerate()
                    {
                        gb[co] = gb[co] + plane.iter().copied().sum::<S>();
                    }
                }
            });
            accumulate(nodes, grads, *w, |gw| {
                for n in 0..batch {
                    gemm(
                        Transpose::No,
                        Transpose::Yes,
                        geom.cout,
                        hw,
                        rows,
                        S::one(),
                        &g[n * geom.cout * hw..(n + 1) * geom.cout * hw],
                        &cols[n * rows * hw..(n + 1) * rows * hw],
                        S::one(),
                        gw,
                    );
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let mut dcol = vec![S::zero(); rows * hw];
                for n in 0..batch {
                    let gout = &g[n * geom.cout * hw..(n + 1) * geom.cout * hw];
                    let dst = &mut gx[n * geom.cin * hw..(n + 1) * geom.cin * hw];
                    if geom.k == 1 {
                        gemm(
                            Transpose::Yes,
                            Transpose::No,
                            rows,
                            geom.cout,
                            hw,
                            S::one(),
                            wv,
                            gout,
                            S::one(),
                            dst,
                        );
                    } else {
                        gemm(
                            Transpose::Yes,
                            Transpose::No,
                            rows,
                            geom.cout,
                            hw,
                            S::one(),
                            wv,
                            gout,
                            S::zero(),
                            &mut dcol,
                        );
                        col2im_add(&geom, &dcol, dst);
                    }
                }
            });
        }
        Op::PixelShuffle { x, r } => {
            let xs = nodes[x.0].shape.clone();
            accumulate(nodes, grads, *x, |gx| {
                for_each_shuffle(&xs, *r, |i, o| gx[i] = gx[i] + g[o]);
            });
        }
        Op::PixelUnshuffle { x, r } => {
            let shuffled = node.shape.clone();
            accumulate(nodes, grads, *x, |gx| {
                for_each_shuffle(&shuffled, *r, |i, o| gx[o] = gx[o] + g[i]);
            });
        }
        Op::Act { x, kind } => {
            let xv = &nodes[x.0].value;
            accumulate(nodes, grads, *x, |gx| match kind {
                Activation::Gelu => {
                    for ((d, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        *d = *d + go * gelu_grad(v);
                    }
                }
                Activation::Relu => {
                    for ((d, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        if v > S::zero() {
                            *d = *d + go;
                        }
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &s), &go) in gx.iter_mut().zip(y).zip(g) {
                    *d = *d + go * s * (S::one() - s);
                }
            });
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                accumulate(nodes, grads, *v, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, &go)| *d = *d + go)
                });
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &go)| *d = *d + go)
            });
            accumulate(nodes, grads, *b, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &go)| *d = *d - go)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, grads, *a, |gx| {
                for ((d, &o), &go) in gx.iter_mut().zip(bv).zip(g) {
                    *d = *d + go * o;
                }
            });
            accumulate(nodes, grads, *b, |gx| {
                for ((d, &o), &go) in gx.iter_mut().zip(av).zip(g) {
                    *d = *d + go * o;
                }
            });
        }
        Op::AbsDiff(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let sign = |x: S, y: S| {
                if x > y {
                    S::one()
                } else if x < y {
                    -S::one()
                } else {
                    S::zero()
                }
            };
            accumulate(nodes, grads, *a, |gx| {
                for (i, d) in gx.iter_mut().enumerate() {
                    *d = *d + g[i] * sign(av[i], bv[i]);
                }
            });
            accumulate(nodes, grads, *b, |gx| {
                for (i, d) in gx.iter_mut().enumerate() {
                    *d = *d - g[i] * sign(av[i], bv[i]);
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &go)| *d = *d + go * *s)
            });
        }
        Op::Mean(x) => {
            let n = S::lit(nodes[x.0].value.len() as f64);
            let share = g[0] / n;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d = *d + share));
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let total = node.shape[*axis] * inner;
            let mut start = 0;
            for v in inputs {
                let chunk = nodes[v.0].shape[*axis] * inner;
                accumulate(nodes, grads, *v, |gx| {
                    for o in 0..outer {
                        let src = &g[o * total + start..o * total + start + chunk];
                        gx[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &go)| *d = *d + go);
                    }
                });
                start += chunk;
            }
        }
        Op::Slice { x, offset } => {
            accumulate(nodes, grads, *x, |gx| {
                gx[*offset..*offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &go)| *d = *d + go)
            });
        }
        Op::ChannelsFirst(x) => {
            let s = &nodes[x.0].shape;
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            accumulate(nodes, grads, *x, |gx| {
                for n in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            for ch in 0..c {
                                let src = ((n * c + ch) * h + y) * w + xx;
                                let dst = ((n * h + y) * w + xx) * c + ch;
                                gx[dst] = gx[dst] + g[src];
                            }
                        }
                    }
                }
            });
        }
        Op::UpsampleNearest { x, factor } => {
            let s = &nodes[x.0].shape;
            let (h, w) = (s[2], s[3]);
            let planes = s[0] * s[1];
            let (ho, wo) = (h * factor, w * factor);
            accumulate(nodes, grads, *x, |gx| {
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let d = (p * h + y / factor) * w + xx / factor;
                            gx[d] = gx[d] + g[(p * ho + y) * wo + xx];
                        }
                    }
                }
            });
        }
        Op::Custom { inputs, op } => {
            let args: Vec<(&[S], &[usize])> = inputs
                .iter()
                .map(|v| (nodes[v.0].value.as_slice(), nodes[v.0].shape.as_slice()))
                .collect();
            let needs: Vec<bool> = inputs.iter().map(|v| nodes[v.0].needs_grad).collect();
            let contribs = op.backward(&args, g, &needs);
            for (v, c) in inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    accumulate(nodes, grads, *v, |gx| {
                        gx.iter_mut().zip(&c).for_each(|(d, &go)| *d = *d + go)
                    });
                }
            }
        }
    }
    Ok(())
}
