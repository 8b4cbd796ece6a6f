//! Second-order gradient boosting of depth-1 regression trees under the
//! logistic loss, with exact greedy split search.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Parameters per stump: split dimension, split value and two leaf values.
pub const PARAMS_PER_STUMP: usize = 4;

/// Floor for per-sample hessians, as in common boosting libraries.
const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams { n_trees: 100, learning_rate: 0.3, lambda: 1.0, min_child_weight: 1.0 }
    }
}

impl BoostParams {
    pub fn with_trees(self, n_trees: usize) -> Self {
        BoostParams { n_trees, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Invalid("n_trees must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Invalid(format!("learning_rate {} not in (0, 1]", self.learning_rate)));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 || self.min_child_weight.is_nan() || self.min_child_weight < 0.0 {
            return Err(Error::Invalid("lambda and min_child_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// `x[feature] < threshold` goes left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left_value: f64,
    pub right_value: f64,
}

impl Stump {
    const ZERO: Stump = Stump { feature: 0, threshold: 0.0, left_value: 0.0, right_value: 0.0 };

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        if x[self.feature] < self.threshold {
            self.left_value
        } else {
            self.right_value
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub n_features: usize,
    pub base_score: f64,
    pub learning_rate: f64,
    pub lambda: f64,
    pub trees: Vec<Stump>,
}

impl StumpEnsemble {
    /// An ensemble with no trees and the given prior log-odds.
    pub fn constant(n_features: usize, base_score: f64) -> Self {
        let p = BoostParams::default();
        StumpEnsemble { n_features, base_score, learning_rate: p.learning_rate, lambda: p.lambda, trees: Vec::new() }
    }

    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Shape(format!("feature vector length {} != {}", x.len(), self.n_features)));
        }
        Ok(self.margin_unchecked(x))
    }

    #[inline]
    pub(crate) fn margin_unchecked(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.eval(x)).sum::<f64>()
    }
}

#[inline]
pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Probability of the positive class.
pub fn predict_score(model: &StumpEnsemble, x: &[f64]) -> Result<f64> {
    model.margin(x).map(sigmoid)
}

pub fn param_count(model: &StumpEnsemble) -> usize {
    PARAMS_PER_STUMP * model.trees.len()
}

/// Mean logistic loss of margins against 0/1 targets.
pub fn log_loss(margins: &[f64], y: &[f64]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            // log(1 + e^m) - t * m, computed stably.
            let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
            softplus - t * m
        })
        .sum();
    total / margins.len() as f64
}

/// Per-round diagnostics of a fit.
#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Training log-loss before any tree and after each round.
    pub losses: Vec<f64>,
    /// Rounds that found no positive-gain split.
    pub empty_rounds: usize,
}

/// Column-sorted view of a feature matrix, shared across rounds.
struct SortedColumns {
    n: usize,
    values: Vec<f64>,
    index: Vec<u32>,
}

impl SortedColumns {
    fn new(x: ArrayView2<'_, f64>) -> Self {
        let (n, d) = x.dim();
        let columns = par::map_range(d, |f| {
            let col = x.column(f);
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            let vals: Vec<f64> = order.iter().map(|&i| col[i as usize]).collect();
            (vals, order)
        });
        let mut values = Vec::with_capacity(n * d);
        let mut index = Vec::with_capacity(n * d);
        for (v, i) in columns {
            values.extend(v);
            index.extend(i);
        }
        SortedColumns { n, values, index }
    }

    fn column(&self, f: usize) -> (&[f64], &[u32]) {
        let r = f * self.n..(f + 1) * self.n;
        (&self.values[r.clone()], &self.index[r])
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
    grad_left: f64,
    hess_left: f64,
}

fn best_split_in_column(
    vals: &[f64],
    idx: &[u32],
    grad: &[f64],
    hess: &[f64],
    totals: (f64, f64),
    params: &BoostParams,
    feature: usize,
) -> Option<Split> {
    let (g_total, h_total) = totals;
    let lambda = params.lambda;
    let parent = g_total * g_total / (h_total + lambda);
    let mut best: Option<Split> = None;
    let (mut gl, mut hl) = (0.0, 0.0);
    for i in 0..vals.len() - 1 {
        let s = idx[i] as usize;
        gl += grad[s];
        hl += hess[s];
        let (a, b) = (vals[i], vals[i + 1]);
        if a == b || hl < params.min_child_weight {
            continue;
        }
        let hr = h_total - hl;
        if hr < params.min_child_weight {
            // Right side only shrinks from here on.
            break;
        }
        let gr = g_total - gl;
        let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
        if gain > best.map_or(0.0, |b| b.gain) {
            let mid = a + (b - a) * 0.5;
            let threshold = if mid > a { mid } else { b };
            best = Some(Split { gain, feature, threshold, grad_left: gl, hess_left: hl });
        }
    }
    best
}

/// Fits `params.n_trees` stumps. Labels are 0 (real) or 1 (fake).
pub fn fit_stumps(x: ArrayView2<'_, f64>, y: &[f64], params: &BoostParams) -> Result<StumpEnsemble> {
    fit_stumps_traced(x, y, params).map(|(m, _)| m)
}

pub fn fit_stumps_traced(x: ArrayView2<'_, f64>, y: &[f64], params: &BoostParams) -> Result<(StumpEnsemble, FitTrace)> {
    params.validate()?;
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", y.len())));
    }
    if n < 2 || d == 0 {
        return Err(Error::Shape(format!("need at least 2 samples and 1 feature, got {n}x{d}")));
    }
    if y.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    let positives = y.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature value".into()));
    }

    let prior = positives as f64 / n as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let sorted = SortedColumns::new(x);
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut trace = FitTrace { losses: vec![log_loss(&margins, y)], empty_rounds: 0 };

    for _ in 0..params.n_trees {
        let (mut g_total, mut h_total) = (0.0, 0.0);
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - y[i];
            hess[i] = (p * (1.0 - p)).max(MIN_HESSIAN);
            g_total += grad[i];
            h_total += hess[i];
        }
        let per_feature = par::map_range(d, |f| {
            let (vals, idx) = sorted.column(f);
            best_split_in_column(vals, idx, &grad, &hess, (g_total, h_total), params, f)
        });
        // Strict improvement in feature order keeps the lowest feature on ties.
        let best = per_feature.into_iter().flatten().fold(None::<Split>, |acc, s| match acc {
            Some(a) if a.gain >= s.gain => Some(a),
            _ => Some(s),
        });
        let stump = match best {
            Some(s) => {
                let gr = g_total - s.grad_left;
                let hr = h_total - s.hess_left;
                Stump {
                    feature: s.feature,
                    threshold: s.threshold,
                    left_value: -params.learning_rate * s.grad_left / (s.hess_left + params.lambda),
                    right_value: -params.learning_rate * gr / (hr + params.lambda),
                }
            }
            None => {
                trace.empty_rounds += 1;
                Stump::ZERO
            }
        };
        if stump != Stump::ZERO {
            let col = x.column(stump.feature);
            for (m, &v) in margins.iter_mut().zip(col.iter()) {
                *m += if v < stump.threshold { stump.left_value } else { stump.right_value };
            }
        }
        trees.push(stump);
        trace.losses.push(log_loss(&margins, y));
    }

    Ok((
        StumpEnsemble { n_features: d, base_score, learning_rate: params.learning_rate, lambda: params.lambda, trees },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable() -> (Array2<f64>, Vec<f64>) {
        // min_child_weight = 1 stops splitting once a side's hessian sum
        // drops below 1, so confident scores need a few hundred points.
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 - 499.5) / 100.0).collect();
        let y = xs.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        (Array2::from_shape_vec((1000, 1), xs).unwrap(), y)
    }

    fn noisy(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
        let y = x
            .rows()
            .into_iter()
            .map(|r| {
                let s = r[0] + 0.5 * r[d - 1] + 0.3 * rng.random::<f64>();
                if s > 0.9 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        (x, y)
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let (x, y) = separable();
        let m = fit_stumps(x.view(), &y, &BoostParams::default()).unwrap();
        assert_eq!(m.trees.len(), 100);
        for (row, &t) in x.rows().into_iter().zip(&y) {
            let p = predict_score(&m, row.as_slice().unwrap()).unwrap();
            if t == 1.0 {
                assert!(p > 0.99, "{p}");
            } else {
                assert!(p < 0.01, "{p}");
            }
        }
        // The first split lands between the two classes.
        assert_eq!(m.trees[0].feature, 0);
        assert!(m.trees[0].threshold.abs() < 0.1);
    }

    #[test]
    fn empty_ensemble_balanced_prior() {
        let m = StumpEnsemble::constant(3, 0.0);
        assert_eq!(predict_score(&m, &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(param_count(&m), 0);
    }

    #[test]
    fn base_score_is_prior_log_odds() {
        let x = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let m = fit_stumps(x.view(), &[0.0, 0.0, 0.0, 1.0], &BoostParams::default().with_trees(1)).unwrap();
        assert!((m.base_score - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn param_count_is_four_per_tree() {
        let (x, y) = noisy(60, 3, 1);
        for t in [1, 7, 100, 300] {
            let m = fit_stumps(x.view(), &y, &BoostParams::default().with_trees(t)).unwrap();
            assert_eq!(param_count(&m), 4 * t);
        }
    }

    #[test]
    fn loss_never_increases() {
        let (x, y) = noisy(300, 5, 2);
        let (_, trace) = fit_stumps_traced(x.view(), &y, &BoostParams::default()).unwrap();
        assert_eq!(trace.losses.len(), 101);
        for w in trace.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn no_gain_rounds_emit_zero_stumps() {
        // One feature with a single distinct value cannot be split.
        let x = Array2::from_elem((10, 1), 3.0);
        let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let (m, trace) = fit_stumps_traced(x.view(), &y, &BoostParams::default().with_trees(5)).unwrap();
        assert_eq!(trace.empty_rounds, 5);
        assert!(m.trees.iter().all(|t| *t == Stump::ZERO));
        assert_eq!(param_count(&m), 20);
    }

    #[test]
    fn errors() {
        let x = Array2::zeros((4, 2));
        assert!(matches!(fit_stumps(x.view(), &[1.0; 4], &BoostParams::default()), Err(Error::SingleClass)));
        assert!(matches!(fit_stumps(x.view(), &[1.0, 0.0], &BoostParams::default()), Err(Error::Shape(_))));
        assert!(fit_stumps(x.view(), &[1.0, 0.0, 1.0, 0.0], &BoostParams::default().with_trees(0)).is_err());
        let m = StumpEnsemble::constant(2, 0.0);
        assert!(matches!(predict_score(&m, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn tie_break_prefers_lowest_feature() {
        // Two identical columns: the split must land on feature 0.
        let (x1, y) = separable();
        let x = Array2::from_shape_fn((1000, 2), |(i, _)| x1[[i, 0]]);
        let m = fit_stumps(x.view(), &y, &BoostParams::default().with_trees(10)).unwrap();
        assert!(m.trees.iter().all(|t| t.feature == 0));
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = noisy(200, 4, 3);
        let a = fit_stumps(x.view(), &y, &BoostParams::default()).unwrap();
        let b = fit_stumps(x.view(), &y, &BoostParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_records() {
        let (x, y) = separable();
        let m = fit_stumps(x.view(), &y, &BoostParams::default().with_trees(2)).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        let t = &v["trees"][0];
        for key in ["feature", "threshold", "left_value", "right_value"] {
            assert!(t.get(key).is_some(), "{key}");
        }
        assert_eq!(serde_json::from_value::<StumpEnsemble>(v).unwrap(), m);
    }
}
