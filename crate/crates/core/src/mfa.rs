//! Multi-level feature aggregation: per-branch mixing weights over feature
//! levels and the weighted mix of aligned features.

use std::fmt;
use std::str::FromStr;

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::splitmix;

/// Branch count; rows of the weight matrix are [attribute, composition, object].
pub const N_BRANCHES: usize = 3;
pub const BRANCH_NAMES: [&str; N_BRANCHES] = ["attribute", "composition", "object"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationStrategy {
    Learned,
    /// Highest level only.
    Standard,
    Mean,
    /// Independent one-hot row per sample and pass.
    Random,
    /// Independent uniform draw from the simplex per row.
    RandomSimplex,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 5] = [
        AggregationStrategy::Learned,
        AggregationStrategy::Standard,
        AggregationStrategy::Mean,
        AggregationStrategy::Random,
        AggregationStrategy::RandomSimplex,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationStrategy::Learned => "learned",
            AggregationStrategy::Standard => "standard",
            AggregationStrategy::Mean => "mean",
            AggregationStrategy::Random => "random",
            AggregationStrategy::RandomSimplex => "random-simplex",
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation strategy `{s}`")))
    }
}

/// Stage of the predictor: strided conv, ReLU, conv, residual add, ReLU.
#[derive(Clone, Debug)]
struct PredictorStage {
    down: Conv2d,
    conv: Conv2d,
}

/// Lightweight staged CNN mapping the raw image to N_b·N_f logits.
#[derive(Clone, Debug)]
pub struct Predictor {
    stages: Vec<PredictorStage>,
    head: Linear,
    pub n_levels: usize,
}

impl Predictor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: &[usize],
        n_levels: usize,
    ) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Config(format!(
                "invalid predictor channels {channels:?}"
            )));
        }
        let mut c_in = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let st = PredictorStage {
                    down: Conv2d::new(store, rng, &format!("predictor.{i}.down"), c_in, c, 3, 2, 1),
                    conv: Conv2d::new(store, rng, &format!("predictor.{i}.conv"), c, c, 3, 1, 1),
                };
                c_in = c;
                st
            })
            .collect();
        let head = Linear::new(
            store,
            rng,
            "predictor.head",
            c_in,
            N_BRANCHES * n_levels,
            true,
        );
        Ok(Predictor {
            stages,
            head,
            n_levels,
        })
    }

    /// Raw logits P(x), N×N_b×N_f.
    pub fn logits(&self, p: &Bound, images: &Var) -> Var {
        let mut x = images.clone();
        for st in &self.stages {
            let y = ag::relu(&st.down.forward(p, &x));
            x = ag::relu(&ag::add(&st.conv.forward(p, &y), &y));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw = x.shape()[2] * x.shape()[3];
        let gap = ag::reshape(&ag::mean_axis(&ag::reshape(&x, &[n, c, hw]), 2), &[n, c]);
        ag::reshape(&self.head.forward(p, &gap), &[n, N_BRANCHES, self.n_levels])
    }
}

/// Row-wise softmax(logits/τ) over the level axis of N×N_b×N_f logits.
pub fn weights_from_logits(logits: &Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    Ok(ag::softmax(&ag::scale(logits, 1.0 / tau), 2))
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Seed of the random strategies for one sample in one pass.
pub fn draw_seed(run_seed: u64, pass: u64, sample: u64) -> u64 {
    splitmix(
        splitmix(run_seed ^ 0x5eed_a66e)
            ^ splitmix(pass.wrapping_add(1))
            ^ splitmix(sample.wrapping_mul(0x9E37).wrapping_add(7)),
    )
}

/// Identifies one forward pass for the random strategies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DrawKey {
    pub seed: u64,
    pub pass: u64,
}

/// Aggregation weights for a batch, N×N_b×N_f. `sample_ids` index the
/// random streams so results do not depend on batch composition.
pub fn predict_weights(
    p: &Bound,
    predictor: &Predictor,
    images: &Var,
    strategy: AggregationStrategy,
    tau: f64,
    sample_ids: &[u64],
    key: DrawKey,
) -> Result<Var> {
    check_tau(tau)?;
    let n = images.shape()[0];
    let nf = predictor.n_levels;
    if sample_ids.len() != n {
        return Err(Error::Shape(format!(
            "{} sample ids for a batch of {n}",
            sample_ids.len()
        )));
    }
    let fixed = |f: &dyn Fn(usize, usize, &mut ChaCha8Rng) -> Vec<f64>| {
        let mut t = Tensor::zeros(IxDyn(&[n, N_BRANCHES, nf]));
        for (i, &id) in sample_ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(key.seed, key.pass, id));
            for b in 0..N_BRANCHES {
                for (k, v) in f(i, b, &mut rng).into_iter().enumerate() {
                    t[[i, b, k]] = v;
                }
            }
        }
        Var::constant(t)
    };
    Ok(match strategy {
        AggregationStrategy::Learned => weights_from_logits(&predictor.logits(p, images), tau)?,
        AggregationStrategy::Standard => fixed(&|_, _, _| {
            let mut row = vec![0.0; nf];
            row[nf - 1] = 1.0;
            row
        }),
        AggregationStrategy::Mean => fixed(&|_, _, _| vec![1.0 / nf as f64; nf]),
        AggregationStrategy::Random => fixed(&|_, _, rng| {
            let mut row = vec![0.0; nf];
            row[rng.random_range(0..nf)] = 1.0;
            row
        }),
        AggregationStrategy::RandomSimplex => fixed(&|_, _, rng| {
            let e: Vec<f64> = (0..nf).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }),
    })
}

/// f′ = w·f̂ per sample: N×N_b×N_f times N×N_f×D gives N×N_b×D.
pub fn aggregate(w: &Var, f_hat: &Var) -> Result<Var> {
    let (ws, fs) = (w.shape(), f_hat.shape());
    if ws.len() != 3 || fs.len() != 3 || ws[0] != fs[0] || ws[2] != fs[1] {
        return Err(Error::Shape(format!(
            "cannot aggregate weights {ws:?} with features {fs:?}"
        )));
    }
    Ok(ag::bmm(w, f_hat))
}

/// Splits N×N_b×(C·H·W) into per-branch N×C×H×W maps.
pub fn split_branches(f_prime: &Var, channels: usize, grid: usize) -> [Var; N_BRANCHES] {
    let n = f_prime.shape()[0];
    std::array::from_fn(|b| {
        ag::reshape(&ag::slice(f_prime, 1, b, b + 1), &[n, channels, grid, grid])
    })
}
