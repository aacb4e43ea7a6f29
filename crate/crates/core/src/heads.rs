//! Primitive classifiers and score fusion.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, Bound, Linear, Mode, ParamStore, StatUpdate};

/// Linear, batch norm, ReLU, linear.
#[derive(Clone, Debug)]
pub struct MlpClassifier {
    pub hidden: Linear,
    pub norm: BatchNorm1d,
    pub out: Linear,
}

impl MlpClassifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        classes: usize,
    ) -> Self {
        MlpClassifier {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_in, hidden, true),
            norm: BatchNorm1d::new(store, &format!("{name}.bn"), hidden),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, classes, true),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var, mode: Mode, updates: &mut Vec<StatUpdate>) -> Var {
        let h = self
            .norm
            .forward(p, &self.hidden.forward(p, x), mode, updates);
        self.out.forward(p, &ag::relu(&h))
    }
}

/// Per-branch scores for a batch: N×|A|, N×|O|, N×|Y|.
#[derive(Clone, Debug)]
pub struct BranchScores {
    pub attr: Var,
    pub obj: Var,
    pub comp: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    /// Raw sum of branch scores.
    Sum,
    /// Sum of per-branch softmax probabilities.
    Softmax,
}

impl fmt::Display for FuseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseMode::Sum => "sum",
            FuseMode::Softmax => "softmax",
        })
    }
}

impl FromStr for FuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FuseMode::Sum),
            "softmax" => Ok(FuseMode::Softmax),
            other => Err(Error::Config(format!("unknown fuse mode `{other}`"))),
        }
    }
}

/// S_total[y] = S_c[y] + S_a[y_a] + S_o[y_o], N×|Y|.
pub fn fuse_scores(scores: &BranchScores, ls: &LabelSpace, mode: FuseMode) -> Var {
    let (a, o, c) = match mode {
        FuseMode::Sum => (scores.attr.clone(), scores.obj.clone(), scores.comp.clone()),
        FuseMode::Softmax => (
            ag::softmax(&scores.attr, 1),
            ag::softmax(&scores.obj, 1),
            ag::softmax(&scores.comp, 1),
        ),
    };
    let ai: Vec<usize> = ls.compositions.iter().map(|p| p.0).collect();
    let oi: Vec<usize> = ls.compositions.iter().map(|p| p.1).collect();
    ag::add(
        &ag::add(&c, &ag::index_select(&a, 1, &ai)),
        &ag::index_select(&o, 1, &oi),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::from_vec;

    fn ls() -> LabelSpace {
        LabelSpace::new(
            vec!["a0".into(), "a1".into()],
            vec!["o0".into(), "o1".into()],
            vec![(0, 0), (1, 0), (0, 1)],
            vec![true, true, true],
        )
        .unwrap()
    }

    fn scores(a: Vec<f64>, o: Vec<f64>, c: Vec<f64>) -> BranchScores {
        BranchScores {
            attr: Var::constant(from_vec(&[1, 2], a)),
            obj: Var::constant(from_vec(&[1, 2], o)),
            comp: Var::constant(from_vec(&[1, 3], c)),
        }
    }

    #[test]
    fn hand_enumerated_sum() {
        let s = scores(vec![1.0, 2.0], vec![10.0, 20.0], vec![0.1, 0.2, 0.3]);
        let t = fuse_scores(&s, &ls(), FuseMode::Sum);
        for (v, e) in t.value().iter().zip([11.1, 12.2, 21.3]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_primitive_scores_pass_composition_through() {
        let s = scores(vec![0.0; 2], vec![0.0; 2], vec![0.5, -1.0, 2.0]);
        assert_eq!(
            fuse_scores(&s, &ls(), FuseMode::Sum)
                .value()
                .as_slice()
                .unwrap(),
            &[0.5, -1.0, 2.0]
        );
    }

    #[test]
    fn attribute_shift_shifts_every_total() {
        let s = scores(vec![1.0, 2.0], vec![10.0, 20.0], vec![0.1, 0.2, 0.3]);
        let shifted = scores(vec![4.0, 5.0], vec![10.0, 20.0], vec![0.1, 0.2, 0.3]);
        let a = fuse_scores(&s, &ls(), FuseMode::Sum);
        let b = fuse_scores(&shifted, &ls(), FuseMode::Sum);
        for (x, y) in a.value().iter().zip(b.value()) {
            assert!((y - x - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mode_sums_probabilities() {
        let s = scores(vec![0.0; 2], vec![0.0; 2], vec![0.0; 3]);
        let t = fuse_scores(&s, &ls(), FuseMode::Softmax);
        assert!(t
            .value()
            .iter()
            .all(|&v| (v - (1.0 / 3.0 + 1.0)).abs() < 1e-12));
    }
}
