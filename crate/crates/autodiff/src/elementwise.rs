//! Pointwise unary and broadcasting binary primitives.

use crate::error::{AutodiffError, Result};
use crate::tape::{Op, Var};
use crate::tensor::{broadcast_shape, Bcast, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Abs,
    Sigmoid,
    Relu,
    Sin,
    Cos,
    Sqrt,
    Square,
    /// `x^e` for a constant exponent.
    Powf(f32),
    /// `mul * x + add`.
    Affine { mul: f32, add: f32 },
    /// Saturating clamp; gradient passes inside `[lo, hi]` and is zero outside.
    Clamp { lo: f32, hi: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryKind {
    pub(crate) fn eval(self, x: f32) -> f32 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Powf(e) => x.powf(e),
            UnaryKind::Affine { mul, add } => mul * x + add,
            UnaryKind::Clamp { lo, hi } => x.clamp(lo, hi),
        }
    }

    /// d out / d x given input `x` and output `y`.
    pub(crate) fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Powf(e) => e * x.powf(e - 1.0),
            UnaryKind::Affine { mul, .. } => mul,
            UnaryKind::Clamp { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl BinaryKind {
    pub(crate) fn eval(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
            BinaryKind::Pow => a.powf(b),
            // Ties resolve to the left operand.
            BinaryKind::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
            BinaryKind::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partials (d/da, d/db) at one element.
    pub(crate) fn partials(self, a: f32, b: f32, y: f32) -> (f32, f32) {
        match self {
            BinaryKind::Add => (1.0, 1.0),
            BinaryKind::Sub => (1.0, -1.0),
            BinaryKind::Mul => (b, a),
            BinaryKind::Div => (1.0 / b, -a / (b * b)),
            BinaryKind::Pow => {
                let da = if b == 0.0 { 0.0 } else { b * a.powf(b - 1.0) };
                let db = if a > 0.0 { y * a.ln() } else { 0.0 };
                (da, db)
            }
            BinaryKind::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinaryKind::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Pow => "pow",
            BinaryKind::Min => "min",
            BinaryKind::Max => "max",
        }
    }
}

/// `f(a[i_a(k)], b[i_b(k)])` for every output index `k`, with chunked loops
/// for the layouts that dominate in practice.
fn combine(
    ad: &[f32],
    ma: &Bcast,
    bd: &[f32],
    mb: &Bcast,
    total: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(total);
    match (ma, mb) {
        (Bcast::Same, Bcast::Same) => out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y))),
        (Bcast::Same, Bcast::Repeat(r)) => {
            for (chunk, &y) in ad.chunks_exact(*r).zip(bd) {
                out.extend(chunk.iter().map(|&x| f(x, y)));
            }
        }
        (Bcast::Repeat(r), Bcast::Same) => {
            for (chunk, &x) in bd.chunks_exact(*r).zip(ad) {
                out.extend(chunk.iter().map(|&y| f(x, y)));
            }
        }
        (Bcast::Same, Bcast::Tile(p)) => {
            for chunk in ad.chunks_exact(*p) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Tile(p), Bcast::Same) => {
            for chunk in bd.chunks_exact(*p) {
                out.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => out.extend((0..total).map(|k| f(ad[ma.index(k)], bd[mb.index(k)]))),
    }
    out
}

fn combine_kind(kind: BinaryKind, ad: &[f32], ma: &Bcast, bd: &[f32], mb: &Bcast, total: usize) -> Vec<f32> {
    // One monomorphized loop per kind keeps the dispatch out of the loop.
    match kind {
        BinaryKind::Add => combine(ad, ma, bd, mb, total, |x, y| x + y),
        BinaryKind::Sub => combine(ad, ma, bd, mb, total, |x, y| x - y),
        BinaryKind::Mul => combine(ad, ma, bd, mb, total, |x, y| x * y),
        BinaryKind::Div => combine(ad, ma, bd, mb, total, |x, y| x / y),
        other => combine(ad, ma, bd, mb, total, |x, y| other.eval(x, y)),
    }
}

pub(crate) fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: kind.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
    let total: usize = out_shape.iter().product();
    let ma = Bcast::new(a.shape(), &out_shape);
    let mb = Bcast::new(b.shape(), &out_shape);
    let data = combine_kind(kind, a.data(), &ma, b.data(), &mb, total);
    Tensor::new(out_shape, data)
}

/// Sum a per-output-element gradient back onto a broadcast operand.
pub(crate) fn unbroadcast(src_shape: &[usize], out_shape: &[usize], g: Vec<f32>) -> Vec<f32> {
    let n: usize = src_shape.iter().product();
    if n == g.len() {
        return g;
    }
    let mut acc = vec![0.0f64; n];
    match Bcast::new(src_shape, out_shape) {
        Bcast::Repeat(r) => {
            for (a, chunk) in acc.iter_mut().zip(g.chunks_exact(r)) {
                *a = chunk.iter().map(|&v| v as f64).sum();
            }
        }
        Bcast::Tile(p) => {
            for chunk in g.chunks_exact(p) {
                acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v as f64);
            }
        }
        map => {
            for (k, &v) in g.iter().enumerate() {
                acc[map.index(k)] += v as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Gradients for the operands of a binary op; `None` where not wanted.
pub(crate) fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    y: &Tensor,
    g: &[f32],
    want: (bool, bool),
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let out_shape = y.shape();
    let (ad, bd, yd) = (a.data(), b.data(), y.data());
    let ma = Bcast::new(a.shape(), out_shape);
    let mb = Bcast::new(b.shape(), out_shape);
    let partial = |k: usize| kind.partials(ad[ma.index(k)], bd[mb.index(k)], yd[k]);
    let total = g.len();
    let ga = want.0.then(|| {
        let raw = match kind {
            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
            BinaryKind::Mul => combine(g, &Bcast::Same, bd, &mb, total, |x, y| x * y),
            _ => (0..g.len()).map(|k| g[k] * partial(k).0).collect(),
        };
        unbroadcast(a.shape(), out_shape, raw)
    });
    let gb = want.1.then(|| {
        let raw = match kind {
            BinaryKind::Add => g.to_vec(),
            BinaryKind::Sub => g.iter().map(|&v| -v).collect(),
            BinaryKind::Mul => combine(g, &Bcast::Same, ad, &ma, total, |x, y| x * y),
            _ => (0..g.len()).map(|k| g[k] * partial(k).1).collect(),
        };
        unbroadcast(b.shape(), out_shape, raw)
    });
    (ga, gb)
}

impl<'t> Var<'t> {
    pub fn unary(self, kind: UnaryKind) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| kind.eval(v));
        self.tape.push(
            out,
            Op::Unary {
                input: self.id,
                kind,
            },
            &[self.id],
        )
    }

    pub fn binary(self, kind: BinaryKind, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let out = binary_forward(kind, &self.value(), &rhs.value())?;
        Ok(self.tape.push(
            out,
            Op::Binary {
                lhs: self.id,
                rhs: rhs.id,
                kind,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, rhs)
    }

    pub fn pow(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Pow, rhs)
    }

    pub fn minimum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Min, rhs)
    }

    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Max, rhs)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Log)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(UnaryKind::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(UnaryKind::Cos)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn powf(self, exponent: f32) -> Var<'t> {
        self.unary(UnaryKind::Powf(exponent))
    }

    /// `mul * self + add`.
    pub fn affine(self, mul: f32, add: f32) -> Var<'t> {
        self.unary(UnaryKind::Affine { mul, add })
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        self.affine(1.0, c)
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f32) -> Var<'t> {
        self.affine(-1.0, c)
    }

    pub fn clamp(self, lo: f32, hi: f32) -> Var<'t> {
        self.unary(UnaryKind::Clamp { lo, hi })
    }

    pub fn clamp01(self) -> Var<'t> {
        self.clamp(0.0, 1.0)
    }

    /// Multiply by a constant tensor (broadcasting).
    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>> {
        let c = self.tape.constant(c);
        self.mul(c)
    }

    /// Add a constant tensor (broadcasting).
    pub fn add_const(self, c: Tensor) -> Result<Var<'t>> {
        let c = self.tape.constant(c);
        self.add(c)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), Some(0.5));
        y.backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn clamp01_saturated_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.7));
        let y = x.clamp01();
        assert_eq!(y.item(), Some(1.0));
        y.backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), Some(0.0));
    }

    #[test]
    fn add_and_sum_gradients() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c = a.add(b).unwrap();
        assert_eq!(c.value().data(), &[4.0, 6.0]);
        c.sum().backward().unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 3]));
        let b = tape.param(Tensor::new(vec![2, 1], vec![2.0, 5.0]).unwrap());
        a.mul(b).unwrap().sum().backward().unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn max_tie_routes_to_left_operand() {
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(1.0));
        let b = tape.param(Tensor::scalar(1.0));
        a.maximum(b).unwrap().backward().unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), Some(1.0));
        assert_eq!(tape.grad(b).unwrap().item(), Some(0.0));
    }
}
