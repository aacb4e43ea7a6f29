//! Calibrated-bias evaluation: seen/unseen accuracy as a bias on unseen
//! compositions sweeps from −∞ to +∞, and the derived S, U, AUC and HM.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::mfa::{DrawKey, BRANCH_NAMES};
use crate::model::{FeatureBank, Model};

/// Scores of every test sample over the closed-world compositions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// N×|Y|.
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
    /// Seen flag per composition.
    pub comp_seen: Vec<bool>,
}

impl ScoreTable {
    pub fn new(scores: Array2<f64>, labels: Vec<usize>, comp_seen: Vec<bool>) -> Result<Self> {
        if scores.nrows() != labels.len() || scores.ncols() != comp_seen.len() {
            return Err(Error::Shape(format!(
                "score table {:?} does not match {} labels and {} compositions",
                scores.dim(),
                labels.len(),
                comp_seen.len()
            )));
        }
        if labels.iter().any(|&l| l >= comp_seen.len()) {
            return Err(Error::Evaluation("label out of range".into()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(
                "score table contains non-finite values".into(),
            ));
        }
        Ok(ScoreTable {
            scores,
            labels,
            comp_seen,
        })
    }

    pub fn from_label_space(
        scores: Array2<f64>,
        labels: Vec<usize>,
        ls: &LabelSpace,
    ) -> Result<Self> {
        Self::new(scores, labels, ls.seen.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Whether sample i's true composition is seen.
    pub fn label_seen(&self, i: usize) -> bool {
        self.comp_seen[self.labels[i]]
    }

    pub fn n_seen_samples(&self) -> usize {
        (0..self.len()).filter(|&i| self.label_seen(i)).count()
    }

    pub fn n_unseen_samples(&self) -> usize {
        self.len() - self.n_seen_samples()
    }
}

/// Argmax of score + b·[unseen] per sample, ties to the lowest index.
pub fn predict_with_bias(table: &ScoreTable, b: f64) -> Vec<usize> {
    table
        .scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (y, &s) in row.iter().enumerate() {
                let v = if table.comp_seen[y] { s } else { s + b };
                if v > best_v {
                    best_v = v;
                    best = y;
                }
            }
            best
        })
        .collect()
}

/// (seen accuracy, unseen accuracy) of a prediction vector.
pub fn accuracies(table: &ScoreTable, pred: &[usize]) -> (f64, f64) {
    let (mut hs, mut ns, mut hu, mut nu) = (0usize, 0usize, 0usize, 0usize);
    for (i, (&p, &l)) in pred.iter().zip(&table.labels).enumerate() {
        if table.label_seen(i) {
            ns += 1;
            hs += usize::from(p == l);
        } else {
            nu += 1;
            hu += usize::from(p == l);
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    (frac(hs, ns), frac(hu, nu))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

/// Curve points sorted by bias.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
}

impl EvalCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bias,seen_acc,unseen_acc\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.bias, p.seen_acc, p.unseen_acc).unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SweepMode {
    /// Every bias at which some prediction can change.
    #[default]
    Exact,
    /// K evenly spaced biases spanning the thresholds.
    Grid(usize),
}

/// Per-sample summary: predictions switch from the best seen to the best
/// unseen composition exactly when b crosses `flip`.
struct Flip {
    flip: f64,
    correct_below: bool,
    correct_above: bool,
    seen: bool,
}

fn flips(table: &ScoreTable) -> Vec<Flip> {
    table
        .scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let arg = |want_seen: bool| {
                let mut best: Option<(usize, f64)> = None;
                for (y, &s) in row.iter().enumerate() {
                    if table.comp_seen[y] == want_seen && best.is_none_or(|(_, v)| s > v) {
                        best = Some((y, s));
                    }
                }
                best.unwrap()
            };
            let (ys, vs) = arg(true);
            let (yu, vu) = arg(false);
            let seen = table.label_seen(i);
            Flip {
                flip: vs - vu,
                correct_below: seen && ys == table.labels[i],
                correct_above: !seen && yu == table.labels[i],
                seen,
            }
        })
        .collect()
}

/// Accuracies at a bias that is not equal to any sample's flip point.
fn accuracy_at(flips: &[Flip], b: f64, n_seen: usize, n_unseen: usize) -> (f64, f64) {
    let hs = flips
        .iter()
        .filter(|f| f.seen && f.correct_below && b < f.flip)
        .count();
    let hu = flips
        .iter()
        .filter(|f| !f.seen && f.correct_above && b > f.flip)
        .count();
    (hs as f64 / n_seen as f64, hu as f64 / n_unseen as f64)
}

/// Bias sweep over the table.
pub fn sweep(table: &ScoreTable, mode: SweepMode) -> Result<EvalCurve> {
    let (n_seen, n_unseen) = (table.n_seen_samples(), table.n_unseen_samples());
    if n_seen == 0 {
        return Err(Error::Evaluation(
            "no seen-labeled samples in the score table".into(),
        ));
    }
    if n_unseen == 0 {
        return Err(Error::Evaluation(
            "no unseen-labeled samples in the score table".into(),
        ));
    }
    if !table.comp_seen.iter().any(|&s| !s) || !table.comp_seen.iter().any(|&s| s) {
        return Err(Error::Evaluation(
            "need both seen and unseen compositions".into(),
        ));
    }
    let seen_ix: Vec<usize> = (0..table.comp_seen.len())
        .filter(|&y| table.comp_seen[y])
        .collect();
    let unseen_ix: Vec<usize> = (0..table.comp_seen.len())
        .filter(|&y| !table.comp_seen[y])
        .collect();
    let mut thresholds: Vec<f64> =
        Vec::with_capacity(table.len() * seen_ix.len() * unseen_ix.len());
    for row in table.scores.rows() {
        for &ys in &seen_ix {
            for &yu in &unseen_ix {
                thresholds.push(row[ys] - row[yu]);
            }
        }
    }
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let lo = thresholds[0];
    let hi = *thresholds.last().unwrap();
    let biases: Vec<f64> = match mode {
        SweepMode::Exact => {
            let mut b = Vec::with_capacity(thresholds.len() + 1);
            b.push(lo - 1.0 - lo.abs());
            b.extend(thresholds.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            b.push(hi + 1.0 + hi.abs());
            b
        }
        SweepMode::Grid(k) => {
            let k = k.max(2);
            let (a, z) = (lo - 1.0 - lo.abs(), hi + 1.0 + hi.abs());
            (0..k)
                .map(|i| a + (z - a) * i as f64 / (k - 1) as f64)
                .collect()
        }
    };
    let fl = flips(table);
    // flip points are a subset of the thresholds, so no midpoint coincides
    // with one; grid points may, and are then resolved by direct argmax
    let exact_hits: std::collections::HashSet<u64> = fl.iter().map(|f| f.flip.to_bits()).collect();
    let points = biases
        .into_iter()
        .map(|b| {
            let (seen_acc, unseen_acc) = if exact_hits.contains(&b.to_bits()) {
                accuracies(table, &predict_with_bias(table, b))
            } else {
                accuracy_at(&fl, b, n_seen, n_unseen)
            };
            CurvePoint {
                bias: b,
                seen_acc,
                unseen_acc,
            }
        })
        .collect();
    Ok(EvalCurve { points })
}

/// S, U, AUC and HM of a curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
    #[serde(skip)]
    pub curve: EvalCurve,
}

fn hits(acc: f64, n: usize) -> u64 {
    (acc * n as f64).round() as u64
}

/// Area under seen accuracy as a function of unseen accuracy, with
/// duplicate abscissae collapsed to their maximum seen accuracy. Summed in
/// integer hit counts, so the result is the correctly rounded exact area.
pub fn auc(curve: &EvalCurve, n_seen: usize, n_unseen: usize) -> f64 {
    if n_seen == 0 || n_unseen == 0 {
        return 0.0;
    }
    let mut pts: Vec<(u64, u64)> = curve
        .points
        .iter()
        .map(|p| (hits(p.unseen_acc, n_unseen), hits(p.seen_acc, n_seen)))
        .collect();
    pts.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    pts.dedup_by(|later, first| later.0 == first.0);
    let twice: u128 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as u128 * (w[0].1 + w[1].1) as u128)
        .sum();
    twice as f64 / (2 * n_seen as u128 * n_unseen as u128) as f64
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Best harmonic mean over the curve, as the correctly rounded exact value
/// 2·hs·hu / (hs·n_u + hu·n_s).
fn best_harmonic_mean(curve: &EvalCurve, n_seen: usize, n_unseen: usize) -> f64 {
    let mut best: Option<(u128, u128)> = None;
    for p in &curve.points {
        let (hs, hu) = (
            hits(p.seen_acc, n_seen) as u128,
            hits(p.unseen_acc, n_unseen) as u128,
        );
        let num = 2 * hs * hu;
        let den = hs * n_unseen as u128 + hu * n_seen as u128;
        if num == 0 {
            continue;
        }
        if best.is_none_or(|(bn, bd)| num * bd > bn * den) {
            best = Some((num, den));
        }
    }
    best.map_or(0.0, |(n, d)| n as f64 / d as f64)
}

pub fn summarize(curve: EvalCurve, n_seen: usize, n_unseen: usize) -> EvalReport {
    let s = curve.points.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
    let u = curve
        .points
        .iter()
        .map(|p| p.unseen_acc)
        .fold(0.0, f64::max);
    EvalReport {
        s,
        u,
        auc: auc(&curve, n_seen, n_unseen),
        hm: best_harmonic_mean(&curve, n_seen, n_unseen),
        n_seen,
        n_unseen,
        alpha: 0.0,
        tau: 0.0,
        seed: 0,
        curve,
    }
}

/// Sweep and summarize in one call.
pub fn report(table: &ScoreTable, mode: SweepMode) -> Result<EvalReport> {
    let curve = sweep(table, mode)?;
    Ok(summarize(
        curve,
        table.n_seen_samples(),
        table.n_unseen_samples(),
    ))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Aggregation weights of every evaluated sample, N×N_b×N_f.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightLog {
    pub weights: Array3<f64>,
}

impl WeightLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,branch,level,weight\n");
        for ((n, b, k), w) in self.weights.indexed_iter() {
            writeln!(out, "{n},{},{k},{w}", BRANCH_NAMES[b]).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Validation(format!("weight log line {}: malformed", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let n: usize = f[0].parse().map_err(|_| bad())?;
            let b = BRANCH_NAMES
                .iter()
                .position(|&x| x == f[1])
                .ok_or_else(bad)?;
            let k: usize = f[2].parse().map_err(|_| bad())?;
            let w: f64 = f[3].parse().map_err(|_| bad())?;
            rows.push((n, b, k, w));
        }
        if rows.is_empty() {
            return Err(Error::Validation("weight log is empty".into()));
        }
        let n = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let k = rows.iter().map(|r| r.2).max().unwrap() + 1;
        let mut weights = Array3::from_elem((n, BRANCH_NAMES.len(), k), f64::NAN);
        for (s, b, l, w) in rows {
            weights[[s, b, l]] = w;
        }
        if weights.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("weight log is missing entries".into()));
        }
        Ok(WeightLog { weights })
    }
}

/// Evaluation of a model on one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub fused: EvalReport,
    /// Composition branch alone.
    pub composition_only: EvalReport,
    pub weights: WeightLog,
}

pub fn evaluate_model(
    model: &Model,
    bank: &FeatureBank,
    mode: SweepMode,
    batch_size: usize,
    alpha: f64,
) -> Result<Evaluation> {
    let out = model.evaluate_bank(
        bank,
        batch_size,
        DrawKey {
            seed: model.config.seed,
            pass: u64::MAX,
        },
    )?;
    let ls = &model.label_space;
    let finish = |scores: Array2<f64>| -> Result<EvalReport> {
        let table = ScoreTable::from_label_space(scores, bank.comps.clone(), ls)?;
        let mut r = report(&table, mode)?;
        r.alpha = alpha;
        r.tau = model.config.tau;
        r.seed = model.config.seed;
        Ok(r)
    };
    Ok(Evaluation {
        fused: finish(out.fused)?,
        composition_only: finish(out.comp)?,
        weights: WeightLog {
            weights: out.weights,
        },
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Sample 0 is seen-labeled (comp 0), sample 1 unseen-labeled (comp 2).
    fn perfect() -> ScoreTable {
        ScoreTable::new(
            array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            vec![0, 2],
            vec![true, true, false],
        )
        .unwrap()
    }

    #[test]
    fn perfect_separation_scores_one() {
        let r = report(&perfect(), SweepMode::Exact).unwrap();
        assert_eq!((r.s, r.u, r.auc, r.hm), (1.0, 1.0, 1.0, 1.0));
        assert!(r
            .curve
            .points
            .iter()
            .any(|p| p.seen_acc == 1.0 && p.unseen_acc == 1.0));
    }

    #[test]
    fn bias_extremes() {
        let t = perfect();
        assert_eq!(predict_with_bias(&t, 0.0), vec![0, 2]);
        assert!(predict_with_bias(&t, 1e9).iter().all(|&p| !t.comp_seen[p]));
        // hand enumeration: flips at 1 (sample 0) and −1 (sample 1)
        assert_eq!(predict_with_bias(&t, -2.0), vec![0, 0]);
        assert_eq!(predict_with_bias(&t, 2.0), vec![2, 2]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = ScoreTable::new(array![[0.5, 0.5, 0.5]], vec![0], vec![true, true, false]).unwrap();
        assert_eq!(predict_with_bias(&t, 0.0), vec![0]);
    }

    #[test]
    fn missing_side_is_named() {
        let t = ScoreTable::new(array![[1.0, 0.0]], vec![0], vec![true, false]).unwrap();
        let e = sweep(&t, SweepMode::Exact).unwrap_err();
        assert!(e.to_string().contains("unseen"), "{e}");
    }

    #[test]
    fn all_zero_seen_gives_zero_auc_hm() {
        let curve = EvalCurve {
            points: vec![
                CurvePoint {
                    bias: 0.0,
                    seen_acc: 0.0,
                    unseen_acc: 0.2,
                },
                CurvePoint {
                    bias: 1.0,
                    seen_acc: 0.0,
                    unseen_acc: 0.9,
                },
            ],
        };
        let r = summarize(curve, 1, 10);
        assert_eq!((r.auc, r.hm), (0.0, 0.0));
    }

    #[test]
    fn auc_collapses_duplicate_abscissae() {
        let curve = EvalCurve {
            points: vec![
                CurvePoint {
                    bias: 0.0,
                    seen_acc: 0.5,
                    unseen_acc: 0.0,
                },
                CurvePoint {
                    bias: 1.0,
                    seen_acc: 1.0,
                    unseen_acc: 0.0,
                },
                CurvePoint {
                    bias: 2.0,
                    seen_acc: 0.0,
                    unseen_acc: 1.0,
                },
            ],
        };
        assert_eq!(auc(&curve, 2, 1), 0.5);
    }

    #[test]
    fn report_json_round_trip() {
        let r = report(&perfect(), SweepMode::Exact).unwrap();
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(
            (back.s, back.u, back.auc, back.hm, back.n_seen),
            (r.s, r.u, r.auc, r.hm, r.n_seen)
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for k in [
            "S", "U", "AUC", "HM", "n_seen", "n_unseen", "alpha", "tau", "seed",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn weight_log_csv_round_trip() {
        let w = WeightLog {
            weights: Array3::from_shape_fn((2, 3, 3), |(n, b, k)| (n + b + k) as f64 / 10.0),
        };
        let csv = w.to_csv();
        assert_eq!(csv.lines().count(), 1 + 18);
        assert_eq!(WeightLog::parse_csv(&csv).unwrap(), w);
        assert!(WeightLog::parse_csv("sample,branch,level,weight\n").is_err());
    }
}
