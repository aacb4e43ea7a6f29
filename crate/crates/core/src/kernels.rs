//! Raw numeric kernels behind the differentiable ops.
//!
//! Each batched kernel splits work across samples. With the `parallel`
//! feature the per-sample work runs on the rayon pool; otherwise (or when
//! [`Exec::Sequential`] is passed explicitly) it runs in a plain loop.
//! Reductions over the batch are always folded in sample order, so results
//! are bit-identical between the two modes.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for batched kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Stride and zero padding of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: ArrayView3<f64>, k: usize, geom: ConvGeom, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().unwrap();
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    for ox in 0..wo {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeom,
) -> Array3<f64> {
    let ho = geom.out_size(h, k);
    let wo = geom.out_size(w, k);
    let mut img = Array3::<f64>::zeros((c, h, w));
    let (stride, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            img[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

fn weight_matrix(w: ArrayView4<f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = w.dim();
    w.to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap()
}

fn stack(parts: Vec<Array3<f64>>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut out = Array4::<f64>::zeros(shape);
    for (n, p) in parts.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), n).assign(&p);
    }
    out
}

/// Cross-correlation of `x` (N×C×H×W) with `w` (O×C×k×k).
pub fn conv2d(exec: Exec, x: ArrayView4<f64>, w: ArrayView4<f64>, geom: ConvGeom) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (co, ci, k, k2) = w.dim();
    assert_eq!(c, ci, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let (ho, wo) = (geom.out_size(h, k), geom.out_size(wd, k));
    let wm = weight_matrix(w);
    let parts = map_indexed(exec, n, |i| {
        let xi = x.index_axis(Axis(0), i);
        let y = if geom.is_pointwise(k) {
            let flat = xi.to_shape((c, h * wd)).unwrap();
            wm.dot(&flat)
        } else {
            wm.dot(&im2col(xi, k, geom, ho, wo))
        };
        y.into_shape_with_order((co, ho, wo)).unwrap()
    });
    stack(parts, (n, co, ho, wo))
}

/// Gradient of `conv2d` with respect to its input; `hw` is the input's
/// spatial size.
pub fn conv2d_grad_input(
    exec: Exec,
    gy: ArrayView4<f64>,
    w: ArrayView4<f64>,
    hw: (usize, usize),
    geom: ConvGeom,
) -> Array4<f64> {
    let (n, co, ho, wo) = gy.dim();
    let (co2, c, k, _) = w.dim();
    assert_eq!(co, co2, "conv2d_grad_input channel mismatch");
    let wt = weight_matrix(w).reversed_axes();
    let parts = map_indexed(exec, n, |i| {
        let g = gy.index_axis(Axis(0), i);
        let g = g.to_shape((co, ho * wo)).unwrap();
        let dcols = wt.dot(&g);
        if geom.is_pointwise(k) {
            dcols.into_shape_with_order((c, hw.0, hw.1)).unwrap()
        } else {
            col2im(dcols.view(), c, hw.0, hw.1, k, geom)
        }
    });
    stack(parts, (n, c, hw.0, hw.1))
}

/// Gradient of `conv2d` with respect to its weight (O×C×k×k).
pub fn conv2d_grad_weight(
    exec: Exec,
    x: ArrayView4<f64>,
    gy: ArrayView4<f64>,
    k: usize,
    geom: ConvGeom,
) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (_, co, ho, wo) = gy.dim();
    let parts = map_indexed(exec, n, |i| {
        let g = gy.index_axis(Axis(0), i);
        let g = g.to_shape((co, ho * wo)).unwrap();
        let xi = x.index_axis(Axis(0), i);
        if geom.is_pointwise(k) {
            let flat = xi.to_shape((c, h * wd)).unwrap();
            g.dot(&flat.t())
        } else {
            g.dot(&im2col(xi, k, geom, ho, wo).t())
        }
    });
    let mut acc = Array2::<f64>::zeros((co, c * k * k));
    for p in parts {
        acc += &p;
    }
    acc.into_shape_with_order((co, c, k, k)).unwrap()
}

/// Batched matrix product: (B×m×k)·(B×k×n) → B×m×n.
pub fn bmm(exec: Exec, a: ArrayView3<f64>, b: ArrayView3<f64>) -> Array3<f64> {
    let (nb, m, _) = a.dim();
    let (nb2, _, n) = b.dim();
    assert_eq!(nb, nb2, "bmm batch mismatch");
    let parts = map_indexed(exec, nb, |i| {
        a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i))
    });
    let mut out = Array3::<f64>::zeros((nb, m, n));
    for (i, p) in parts.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&p);
    }
    out
}

/// Adaptive average pooling of N×C×H×W to N×C×oh×ow. Requires the input
/// size to be a multiple of the output size, so every output cell averages
/// an equal, non-overlapping block.
pub fn adaptive_avg_pool(x: ArrayView4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(
        h % oh == 0 && w % ow == 0,
        "pool size {h}x{w} not divisible by {oh}x{ow}"
    );
    if (h, w) == (oh, ow) {
        return x.to_owned();
    }
    let (bh, bw) = (h / oh, w / ow);
    let norm = (bh * bw) as f64;
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    for ((ni, ci, y, xx), v) in out.indexed_iter_mut() {
        let block = x.slice(s![ni, ci, y * bh..(y + 1) * bh, xx * bw..(xx + 1) * bw]);
        *v = block.sum() / norm;
    }
    out
}
