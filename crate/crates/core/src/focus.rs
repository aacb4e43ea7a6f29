//! Gradient-based attention maps and the focus-consistency loss.

use ndarray::{Axis, IxDyn};

use crate::autograd::{self as ag, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;
pub const COS_EPS: f64 = 1e-8;

/// Channel mean of ∂(Σ_n S[n, y_n])/∂f for N×C×H×W features, giving N×H×W.
/// With `create_graph` the result stays differentiable with respect to
/// everything upstream of `scores`.
pub fn attention_map(
    scores: &Var,
    labels: &[usize],
    feature: &Var,
    create_graph: bool,
) -> Result<Var> {
    if scores.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} score rows",
            labels.len(),
            scores.shape()[0]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.shape()[1]) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {} classes",
            scores.shape()[1]
        )));
    }
    let s = ag::sum_all(&ag::pick(scores, labels));
    let g = ag::grad(&s, &[feature], create_graph)
        .pop()
        .flatten()
        .ok_or_else(|| {
            Error::Disconnected("branch scores do not depend on the branch feature".into())
        })?;
    let sh = feature.shape();
    Ok(ag::reshape(&ag::mean_axis(&g, 1), &[sh[0], sh[2], sh[3]]))
}

/// Per-sample min-max normalization of N×H×W maps, flattened to N×HW.
pub fn normalize_map(m: &Var) -> Var {
    let n = m.shape()[0];
    let hw = m.len() / n.max(1);
    let flat = ag::reshape(m, &[n, hw]);
    let lo = ag::min_axis(&flat, 1);
    let hi = ag::max_axis(&flat, 1);
    ag::div(
        &ag::sub(&flat, &lo),
        &ag::add_scalar(&ag::sub(&hi, &lo), NORM_EPS),
    )
}

fn nonzero_rows(t: &Tensor) -> Tensor {
    let v: Vec<f64> = t
        .axis_iter(Axis(0))
        .map(|r| {
            if r.iter().any(|&x| x != 0.0) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(&[v.len(), 1]), v).unwrap()
}

/// Per-sample cosine of N×D rows, zero where either row is all zeros.
pub fn masked_cosine(u: &Var, v: &Var) -> Var {
    let mask = &nonzero_rows(u.value()) * &nonzero_rows(v.value());
    // rows excluded by the mask get a unit offset so the norm stays differentiable
    let offset = Var::constant(mask.mapv(|m| 1.0 - m));
    let mask = Var::constant(mask);
    let norm = |x: &Var| ag::sqrt(&ag::add(&ag::sum_axis(&ag::mul(x, x), 1), &offset));
    let dot = ag::sum_axis(&ag::mul(u, v), 1);
    let cos = ag::div(&dot, &ag::add_scalar(&ag::mul(&norm(u), &norm(v)), COS_EPS));
    let n = u.shape()[0];
    ag::reshape(&ag::mul(&cos, &mask), &[n])
}

/// L_f = −cos(norm(M_a + M_o), norm(M_c)), averaged over the batch.
pub fn focused_loss(m_a: &Var, m_o: &Var, m_c: &Var) -> Result<Var> {
    if m_a.shape() != m_o.shape() || m_a.shape() != m_c.shape() {
        return Err(Error::Shape(format!(
            "attention maps differ in shape: {:?}, {:?}, {:?}",
            m_a.shape(),
            m_o.shape(),
            m_c.shape()
        )));
    }
    let u = normalize_map(&ag::add(m_a, m_o));
    let v = normalize_map(m_c);
    Ok(ag::neg(&ag::mean_all(&masked_cosine(&u, &v))))
}
