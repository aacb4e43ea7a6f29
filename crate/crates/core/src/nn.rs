//! Parameter storage and the small layer types the model is built from.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{self as ag, Tensor, Var};
use crate::kernels::ConvGeom;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Receives gradients and optimizer updates.
    pub trainable: bool,
    /// Subject to weight decay.
    pub decay: bool,
}

/// Ordered collection of named tensors: trainable weights plus
/// non-trainable state (batch-norm running statistics, frozen tables).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Graph leaves for one pass: trainable entries become differentiable
    /// leaves, the rest constants.
    pub fn bind(&self) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if p.trainable {
                        Var::leaf(p.value.clone())
                    } else {
                        Var::constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Parameters bound into a graph for one forward/backward pass.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform(-b, b) tensor with b = 1/sqrt(fan_in).
pub fn scaled_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.random_range(-b..b)).collect(),
    )
    .unwrap()
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

/// Fully connected layer, `x·W + b` with W stored as in×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            scaled_uniform(rng, &[d_in, d_out], d_in),
            true,
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), zeros(&[d_out]), true, true));
        Linear { weight, bias }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        ag::linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            scaled_uniform(rng, &[c_out, c_in, kernel, kernel], fan_in),
            true,
            true,
        );
        let bias = store.add(format!("{name}.bias"), zeros(&[c_out]), true, true);
        Conv2d {
            weight,
            bias,
            geom: ConvGeom { stride, pad },
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let w = p.var(self.weight);
        let y = ag::conv2d(x, w, self.geom);
        let c = w.shape()[0];
        ag::add(&y, &ag::reshape(p.var(self.bias), &[1, c, 1, 1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the first axis of N×D inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm1d {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::ones(IxDyn(&[dim])),
                true,
                false,
            ),
            beta: store.add(format!("{name}.beta"), zeros(&[dim]), true, false),
            running_mean: store.add(format!("{name}.running_mean"), zeros(&[dim]), false, false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(IxDyn(&[dim])),
                false,
                false,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var, mode: Mode, updates: &mut Vec<StatUpdate>) -> Var {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = ag::mean_axis(x, 0);
                let centered = ag::sub(x, &mean);
                let var = ag::mean_axis(&ag::mul(&centered, &centered), 0);
                let n = x.shape()[0] as f64;
                let m = self.momentum;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let d = x.shape()[1];
                let rm = p.var(self.running_mean).value() * (1.0 - m)
                    + mean.value().to_shape(IxDyn(&[d])).unwrap().mapv(|v| v * m);
                let rv = p.var(self.running_var).value() * (1.0 - m)
                    + var
                        .value()
                        .to_shape(IxDyn(&[d]))
                        .unwrap()
                        .mapv(|v| v * m * unbiased);
                updates.push(StatUpdate {
                    id: self.running_mean,
                    value: rm,
                });
                updates.push(StatUpdate {
                    id: self.running_var,
                    value: rv,
                });
                (mean, var)
            }
            Mode::Eval => (
                p.var(self.running_mean).clone(),
                p.var(self.running_var).clone(),
            ),
        };
        let xhat = ag::div(
            &ag::sub(x, &mean),
            &ag::sqrt(&ag::add_scalar(&var, self.eps)),
        );
        ag::add(&ag::mul(&xhat, p.var(self.gamma)), p.var(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_marks_only_trainable_entries() {
        let mut s = ParamStore::new();
        let a = s.add("a", zeros(&[2]), true, true);
        let b = s.add("b", zeros(&[2]), false, false);
        let p = s.bind();
        assert!(p.var(a).requires_grad());
        assert!(!p.var(b).requires_grad());
        assert_eq!(s.find("b"), Some(b));
    }

    #[test]
    fn batch_norm_eval_is_per_sample() {
        let mut s = ParamStore::new();
        let bn = BatchNorm1d::new(&mut s, "bn", 3);
        *s.get_mut(bn.running_mean) = ag::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        *s.get_mut(bn.running_var) = ag::from_vec(&[3], vec![4.0, 1.0, 0.25]);
        let p = s.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = scaled_uniform(&mut rng, &[5, 3], 1);
        let mut u = Vec::new();
        let full = bn.forward(&p, &Var::constant(x.clone()), Mode::Eval, &mut u);
        for i in 0..5 {
            let row = x.slice(ndarray::s![i..i + 1, ..]).to_owned().into_dyn();
            let single = bn.forward(&p, &Var::constant(row), Mode::Eval, &mut u);
            for j in 0..3 {
                assert!((single.value()[[0, j]] - full.value()[[i, j]]).abs() < 1e-12);
            }
        }
        assert!(u.is_empty());
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut s = ParamStore::new();
        let bn = BatchNorm1d::new(&mut s, "bn", 2);
        let p = s.bind();
        let x = ag::from_vec(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let mut u = Vec::new();
        let y = bn.forward(&p, &Var::constant(x), Mode::Train, &mut u);
        for j in 0..2 {
            let col = y.value().index_axis(ndarray::Axis(1), j).to_owned();
            assert!(col.mean().unwrap().abs() < 1e-12);
        }
        assert_eq!(u.len(), 2);
        assert!((u[0].value[0] - 0.25).abs() < 1e-12);
    }
}
