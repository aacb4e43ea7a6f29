//! Differentiable tensor operations.
//!
//! Elementwise binary ops broadcast like NumPy. Reductions keep the reduced
//! axis with length one.

use ndarray::{concatenate, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn, Order, Slice, Zip};

use super::{Op, Tensor, Var};
use crate::kernels::{self, ConvGeom, Exec};

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn reshape_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    t.to_shape((IxDyn(shape), Order::RowMajor))
        .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", t.shape(), shape))
        .into_owned()
}

/// Sums `t` down to `shape` following broadcasting rules in reverse.
pub fn sum_to_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    assert!(
        t.ndim() >= shape.len(),
        "sum_to {:?} -> {:?}",
        t.shape(),
        shape
    );
    let mut out = t.clone();
    for _ in 0..(t.ndim() - shape.len()) {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(out.shape(), shape, "sum_to: incompatible shapes");
    out
}

fn needs_any(needs: &[bool], i: usize) -> bool {
    needs.get(i).copied().unwrap_or(false)
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        (0..2)
            .map(|i| needs[i].then(|| sum_to(gy, inputs[i].shape())))
            .collect()
    }
}

pub fn add(a: &Var, b: &Var) -> Var {
    let v = standard(a.value() + b.value());
    Var::from_op(v, AddOp, vec![a.clone(), b.clone()])
}

struct SubOp;
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| sum_to(gy, inputs[0].shape())),
            needs[1].then(|| neg(&sum_to(gy, inputs[1].shape()))),
        ]
    }
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let v = standard(a.value() - b.value());
    Var::from_op(v, SubOp, vec![a.clone(), b.clone()])
}

struct MulOp;
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| sum_to(&mul(gy, &inputs[1]), inputs[0].shape())),
            needs[1].then(|| sum_to(&mul(gy, &inputs[0]), inputs[1].shape())),
        ]
    }
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let v = standard(a.value() * b.value());
    Var::from_op(v, MulOp, vec![a.clone(), b.clone()])
}

struct DivOp;
impl Op for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, inputs: &[Var], output: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| sum_to(&div(gy, b), a.shape())),
            needs[1].then(|| {
                // d(a/b)/db = -(a/b)/b
                sum_to(&neg(&div(&mul(gy, output), b)), b.shape())
            }),
        ]
    }
}

pub fn div(a: &Var, b: &Var) -> Var {
    let v = standard(a.value() / b.value());
    Var::from_op(v, DivOp, vec![a.clone(), b.clone()])
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(scale(gy, self.0))]
    }
}

/// `c * x` for a constant `c`.
pub fn scale(x: &Var, c: f64) -> Var {
    Var::from_op(x.value() * c, ScaleOp(c), vec![x.clone()])
}

pub fn neg(x: &Var) -> Var {
    scale(x, -1.0)
}

struct AddScalarOp;
impl Op for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(gy.clone())]
    }
}

pub fn add_scalar(x: &Var, c: f64) -> Var {
    Var::from_op(x.value() + c, AddScalarOp, vec![x.clone()])
}

struct ExpOp;
impl Op for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[Var], output: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(mul(gy, output))]
    }
}

pub fn exp(x: &Var) -> Var {
    Var::from_op(x.value().mapv(f64::exp), ExpOp, vec![x.clone()])
}

struct LnOp;
impl Op for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(div(gy, &inputs[0]))]
    }
}

pub fn ln(x: &Var) -> Var {
    Var::from_op(x.value().mapv(f64::ln), LnOp, vec![x.clone()])
}

struct PowfOp(f64);
impl Op for PowfOp {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let p = self.0;
        vec![Some(mul(gy, &scale(&powf(&inputs[0], p - 1.0), p)))]
    }
}

/// Elementwise `x^p` for a constant exponent.
pub fn powf(x: &Var, p: f64) -> Var {
    let v = if p == 2.0 {
        x.value().mapv(|a| a * a)
    } else {
        x.value().mapv(|a| a.powf(p))
    };
    Var::from_op(v, PowfOp(p), vec![x.clone()])
}

pub fn sqrt(x: &Var) -> Var {
    powf(x, 0.5)
}

struct ReluOp;
impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let mask = inputs[0].value().mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
        vec![Some(mul(gy, &Var::constant(mask)))]
    }
}

pub fn relu(x: &Var) -> Var {
    Var::from_op(x.value().mapv(|a| a.max(0.0)), ReluOp, vec![x.clone()])
}

// ---------------------------------------------------------------------------
// shape manipulation

struct ReshapeOp;
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(reshape(gy, inputs[0].shape()))]
    }
}

/// Row-major reshape.
pub fn reshape(x: &Var, shape: &[usize]) -> Var {
    if x.shape() == shape {
        return x.clone();
    }
    Var::from_op(reshape_tensor(x.value(), shape), ReshapeOp, vec![x.clone()])
}

struct PermuteOp(Vec<usize>);
impl Op for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let mut inv = vec![0; self.0.len()];
        for (i, &a) in self.0.iter().enumerate() {
            inv[a] = i;
        }
        vec![Some(permute(gy, &inv))]
    }
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Var, axes: &[usize]) -> Var {
    let v = standard(x.value().view().permuted_axes(IxDyn(axes)).to_owned());
    Var::from_op(v, PermuteOp(axes.to_vec()), vec![x.clone()])
}

/// Transpose of a 2-D tensor.
pub fn t(x: &Var) -> Var {
    permute(x, &[1, 0])
}

struct SumToOp;
impl Op for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(broadcast_to(gy, inputs[0].shape()))]
    }
}

pub fn sum_to(x: &Var, shape: &[usize]) -> Var {
    if x.shape() == shape {
        return x.clone();
    }
    Var::from_op(sum_to_tensor(x.value(), shape), SumToOp, vec![x.clone()])
}

struct BroadcastToOp;
impl Op for BroadcastToOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(sum_to(gy, inputs[0].shape()))]
    }
}

pub fn broadcast_to(x: &Var, shape: &[usize]) -> Var {
    if x.shape() == shape {
        return x.clone();
    }
    let v = x
        .value()
        .broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", x.shape(), shape))
        .to_owned();
    Var::from_op(standard(v), BroadcastToOp, vec![x.clone()])
}

/// Sum of all entries as a 0-d tensor.
pub fn sum_all(x: &Var) -> Var {
    sum_to(x, &[])
}

pub fn mean_all(x: &Var) -> Var {
    let n = x.len() as f64;
    scale(&sum_all(x), 1.0 / n)
}

struct SumAxisOp;
impl Op for SumAxisOp {
    fn name(&self) -> &'static str {
        "sum_axis"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(broadcast_to(gy, inputs[0].shape()))]
    }
}

/// Sum along `axis`, keeping it with length one.
pub fn sum_axis(x: &Var, axis: usize) -> Var {
    let v = x.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
    Var::from_op(v, SumAxisOp, vec![x.clone()])
}

pub fn mean_axis(x: &Var, axis: usize) -> Var {
    let n = x.shape()[axis] as f64;
    scale(&sum_axis(x, axis), 1.0 / n)
}

struct MaxAxisOp(usize);
impl Op for MaxAxisOp {
    fn name(&self) -> &'static str {
        "max_axis"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let x = inputs[0].value();
        let mut mask = Tensor::zeros(x.raw_dim());
        Zip::from(x.lanes(Axis(self.0)))
            .and(mask.lanes_mut(Axis(self.0)))
            .for_each(|lane, mut m| {
                let mut best = 0;
                for (i, &v) in lane.iter().enumerate() {
                    if v > lane[best] {
                        best = i;
                    }
                }
                m[best] = 1.0;
            });
        vec![Some(mul(
            &broadcast_to(gy, x.shape()),
            &Var::constant(mask),
        ))]
    }
}

/// Maximum along `axis` (keepdim). The gradient goes to the first maximal
/// entry of each lane.
pub fn max_axis(x: &Var, axis: usize) -> Var {
    let v = x
        .value()
        .map_axis(Axis(axis), |lane| {
            lane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .insert_axis(Axis(axis));
    Var::from_op(v, MaxAxisOp(axis), vec![x.clone()])
}

pub fn min_axis(x: &Var, axis: usize) -> Var {
    neg(&max_axis(&neg(x), axis))
}

struct IndexSelectOp {
    axis: usize,
    indices: Vec<usize>,
}
impl Op for IndexSelectOp {
    fn name(&self) -> &'static str {
        "index_select"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let len = inputs[0].shape()[self.axis];
        vec![Some(index_add(gy, self.axis, &self.indices, len))]
    }
}

/// Picks entries `indices` along `axis`.
pub fn index_select(x: &Var, axis: usize, indices: &[usize]) -> Var {
    let v = x.value().select(Axis(axis), indices);
    Var::from_op(
        v,
        IndexSelectOp {
            axis,
            indices: indices.to_vec(),
        },
        vec![x.clone()],
    )
}

struct IndexAddOp {
    axis: usize,
    indices: Vec<usize>,
}
impl Op for IndexAddOp {
    fn name(&self) -> &'static str {
        "index_add"
    }
    fn backward(&self, _: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(index_select(gy, self.axis, &self.indices))]
    }
}

/// Scatter-add: a zero tensor of length `len` along `axis`, with slice `j`
/// of `x` added at position `indices[j]`.
pub fn index_add(x: &Var, axis: usize, indices: &[usize], len: usize) -> Var {
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Tensor::zeros(IxDyn(&shape));
    for (j, &i) in indices.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(axis), i);
        dst += &x.value().index_axis(Axis(axis), j);
    }
    Var::from_op(
        out,
        IndexAddOp {
            axis,
            indices: indices.to_vec(),
        },
        vec![x.clone()],
    )
}

struct SliceOp {
    axis: usize,
    start: usize,
}
impl Op for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let full = inputs[0].shape()[self.axis];
        vec![Some(embed(gy, self.axis, self.start, full))]
    }
}

/// Entries `start..end` along `axis`.
pub fn slice(x: &Var, axis: usize, start: usize, end: usize) -> Var {
    let v = x
        .value()
        .slice_axis(Axis(axis), Slice::from(start..end))
        .to_owned();
    Var::from_op(standard(v), SliceOp { axis, start }, vec![x.clone()])
}

struct EmbedOp {
    axis: usize,
    start: usize,
}
impl Op for EmbedOp {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let n = inputs[0].shape()[self.axis];
        vec![Some(slice(gy, self.axis, self.start, self.start + n))]
    }
}

/// Places `x` at offset `start` of a zero tensor of length `full` along `axis`.
pub fn embed(x: &Var, axis: usize, start: usize, full: usize) -> Var {
    let mut shape = x.shape().to_vec();
    let n = shape[axis];
    shape[axis] = full;
    let mut out = Tensor::zeros(IxDyn(&shape));
    out.slice_axis_mut(Axis(axis), Slice::from(start..start + n))
        .assign(x.value());
    Var::from_op(out, EmbedOp { axis, start }, vec![x.clone()])
}

struct ConcatOp(usize);
impl Op for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let mut start = 0;
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let n = x.shape()[self.0];
                let g = needs_any(needs, i).then(|| slice(gy, self.0, start, start + n));
                start += n;
                g
            })
            .collect()
    }
}

pub fn concat(xs: &[Var], axis: usize) -> Var {
    let views: Vec<_> = xs.iter().map(|x| x.value().view()).collect();
    let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    Var::from_op(standard(v), ConcatOp(axis), xs.to_vec())
}

// ---------------------------------------------------------------------------
// linear algebra

struct MatmulOp;
impl Op for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| matmul(gy, &t(&inputs[1]))),
            needs[1].then(|| matmul(&t(&inputs[0]), gy)),
        ]
    }
}

/// Product of 2-D tensors (m×k)·(k×n).
pub fn matmul(a: &Var, b: &Var) -> Var {
    let av = a
        .value()
        .view()
        .into_dimensionality::<Ix2>()
        .expect("matmul lhs not 2-D");
    let bv = b
        .value()
        .view()
        .into_dimensionality::<Ix2>()
        .expect("matmul rhs not 2-D");
    assert_eq!(
        av.ncols(),
        bv.nrows(),
        "matmul {:?}·{:?}",
        a.shape(),
        b.shape()
    );
    Var::from_op(av.dot(&bv).into_dyn(), MatmulOp, vec![a.clone(), b.clone()])
}

struct BmmOp;
impl Op for BmmOp {
    fn name(&self) -> &'static str {
        "bmm"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| bmm(gy, &permute(&inputs[1], &[0, 2, 1]))),
            needs[1].then(|| bmm(&permute(&inputs[0], &[0, 2, 1]), gy)),
        ]
    }
}

/// Batched product (B×m×k)·(B×k×n).
pub fn bmm(a: &Var, b: &Var) -> Var {
    let av = a
        .value()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("bmm lhs not 3-D");
    let bv = b
        .value()
        .view()
        .into_dimensionality::<Ix3>()
        .expect("bmm rhs not 3-D");
    let v = kernels::bmm(Exec::default(), av, bv).into_dyn();
    Var::from_op(v, BmmOp, vec![a.clone(), b.clone()])
}

/// `x·w + b` for x: N×in, w: in×out, b: out.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Var {
    let y = matmul(x, w);
    match b {
        Some(b) => add(&y, b),
        None => y,
    }
}

// ---------------------------------------------------------------------------
// convolution

fn view4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-D tensor")
}

struct Conv2dOp(ConvGeom);
impl Op for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Var], _: &Var, gy: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let hw = (x.shape()[2], x.shape()[3]);
        vec![
            needs[0].then(|| conv2d_grad_input(gy, w, hw, self.0)),
            needs[1].then(|| conv2d_grad_weight(x, gy, w.shape()[2], self.0)),
        ]
    }
}

/// 2-D cross-correlation of N×C×H×W input with O×C×k×k weights.
pub fn conv2d(x: &Var, w: &Var, geom: ConvGeom) -> Var {
    let v = kernels::conv2d(Exec::default(), view4(x.value()), view4(w.value()), geom);
    Var::from_op(v.into_dyn(), Conv2dOp(geom), vec![x.clone(), w.clone()])
}

struct Conv2dGradInputOp {
    geom: ConvGeom,
}
impl Op for Conv2dGradInputOp {
    fn name(&self) -> &'static str {
        "conv2d_grad_input"
    }
    fn backward(&self, inputs: &[Var], _: &Var, ggx: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (gy, w) = (&inputs[0], &inputs[1]);
        vec![
            needs[0].then(|| conv2d(ggx, w, self.geom)),
            needs[1].then(|| conv2d_grad_weight(ggx, gy, w.shape()[2], self.geom)),
        ]
    }
}

pub fn conv2d_grad_input(gy: &Var, w: &Var, hw: (usize, usize), geom: ConvGeom) -> Var {
    let v = kernels::conv2d_grad_input(
        Exec::default(),
        view4(gy.value()),
        view4(w.value()),
        hw,
        geom,
    );
    Var::from_op(
        v.into_dyn(),
        Conv2dGradInputOp { geom },
        vec![gy.clone(), w.clone()],
    )
}

struct Conv2dGradWeightOp {
    geom: ConvGeom,
}
impl Op for Conv2dGradWeightOp {
    fn name(&self) -> &'static str {
        "conv2d_grad_weight"
    }
    fn backward(&self, inputs: &[Var], _: &Var, ggw: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        let hw = (x.shape()[2], x.shape()[3]);
        vec![
            needs[0].then(|| conv2d_grad_input(gy, ggw, hw, self.geom)),
            needs[1].then(|| conv2d(x, ggw, self.geom)),
        ]
    }
}

pub fn conv2d_grad_weight(x: &Var, gy: &Var, k: usize, geom: ConvGeom) -> Var {
    let v = kernels::conv2d_grad_weight(
        Exec::default(),
        view4(x.value()),
        view4(gy.value()),
        k,
        geom,
    );
    Var::from_op(
        v.into_dyn(),
        Conv2dGradWeightOp { geom },
        vec![x.clone(), gy.clone()],
    )
}

// ---------------------------------------------------------------------------
// composites

/// Softmax along `axis`. The max shift is treated as a constant, which
/// leaves both value and gradient unchanged.
pub fn softmax(x: &Var, axis: usize) -> Var {
    let m = Var::constant(max_axis(&x.detach(), axis).value().clone());
    let e = exp(&sub(x, &m));
    div(&e, &sum_axis(&e, axis))
}

pub fn log_softmax(x: &Var, axis: usize) -> Var {
    let m = Var::constant(max_axis(&x.detach(), axis).value().clone());
    let shifted = sub(x, &m);
    sub(&shifted, &ln(&sum_axis(&exp(&shifted), axis)))
}

/// One-hot matrix (N×k) for the given class indices.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(IxDyn(&[labels.len(), k]));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, l]] = 1.0;
    }
    t
}

/// Per-row entry `x[i, labels[i]]` of an N×k tensor, as an N-vector.
pub fn pick(x: &Var, labels: &[usize]) -> Var {
    let k = x.shape()[1];
    let picked = sum_axis(&mul(x, &Var::constant(one_hot(labels, k))), 1);
    reshape(&picked, &[labels.len()])
}

pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch")
}
