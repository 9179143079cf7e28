use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EvalError;

/// Optimizer settings shared by the probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

impl From<&crate::config::EvalConfig> for ProbeOptions {
    fn from(c: &crate::config::EvalConfig) -> Self {
        Self {
            l2: c.l2,
            max_iter: c.max_iter,
            tol: c.tol,
        }
    }
}

/// Per-column z-scoring fitted on training rows. Constant columns map to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let m = c.sum() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut c) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            c.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        out
    }
}

/// Linear regression with an L2 penalty on the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeProbe {
    pub standardizer: Standardizer,
    pub weights: DVector<f64>,
    pub bias: f64,
    pub iterations: usize,
}

/// Largest eigenvalue of `x^T x / n`.
fn gram_lmax(xs: &DMatrix<f64>) -> f64 {
    let gram = xs.tr_mul(xs) / xs.nrows() as f64;
    SymmetricEigen::new(gram).eigenvalues.max().max(0.0)
}

/// Minimizes `mean (x w + b - y)^2 + l2 |w|^2` on standardized features by
/// full-batch gradient descent from zero with step `1 / L`. The bias is the
/// label mean, exact because training columns are centred. Stops when the
/// largest gradient entry falls below `tol` or after `max_iter` steps.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], opts: &ProbeOptions) -> Result<RidgeProbe, EvalError> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(EvalError::Invalid(format!("{} rows for {} labels", x.nrows(), y.len())));
    }
    let st = Standardizer::fit(x);
    let xs = st.apply(x);
    let n = xs.nrows() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let step = 1.0 / (2.0 * gram_lmax(&xs) + 2.0 * opts.l2);
    let mut w = DVector::<f64>::zeros(xs.ncols());
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let resid = &xs * &w - &yc;
        let g = xs.tr_mul(&resid) * (2.0 / n) + &w * (2.0 * opts.l2);
        if g.amax() < opts.tol {
            break;
        }
        w -= g * step;
    }
    Ok(RidgeProbe {
        standardizer: st,
        weights: w,
        bias: y_mean,
        iterations,
    })
}

impl RidgeProbe {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let xs = self.standardizer.apply(x);
        (xs * &self.weights).iter().map(|v| v + self.bias).collect()
    }
}

/// Multinomial logistic regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    pub standardizer: Standardizer,
    pub classes: Vec<i64>,
    /// `[p x K]`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub iterations: usize,
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut r in logits.row_iter_mut() {
        let m = r.max();
        r.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s = r.sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
}

/// Minimizes `mean cross-entropy + l2 |W|^2` by full-batch gradient descent
/// from zero with a fixed step from the curvature bound. Stops when the
/// largest gradient entry falls below `tol` or after `max_iter` steps.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[i64], opts: &ProbeOptions, task: &str) -> Result<LogisticProbe, EvalError> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(EvalError::Invalid(format!("{} rows for {} labels", x.nrows(), y.len())));
    }
    let mut classes: Vec<i64> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(EvalError::SingleClass { task: task.into() });
    }
    let k = classes.len();
    let st = Standardizer::fit(x);
    let xs = st.apply(x);
    let n = xs.nrows() as f64;
    let mut onehot = DMatrix::<f64>::zeros(xs.nrows(), k);
    for (i, label) in y.iter().enumerate() {
        let c = classes.binary_search(label).expect("class present");
        onehot[(i, c)] = 1.0;
    }
    // Softmax curvature is at most 1/2 per unit of the design's top
    // eigenvalue; centred columns decouple the bias, whose own curvature is 1.
    let step = 1.0 / (0.5 * gram_lmax(&xs).max(1.0) + 2.0 * opts.l2);
    let mut w = DMatrix::<f64>::zeros(xs.ncols(), k);
    let mut b = DVector::<f64>::zeros(k);
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let mut probs = &xs * &w;
        for mut r in probs.row_iter_mut() {
            r += b.transpose();
        }
        softmax_rows(&mut probs);
        let resid = probs - &onehot;
        let gw = xs.tr_mul(&resid) / n + &w * (2.0 * opts.l2);
        let gb = DVector::from_iterator(k, resid.column_iter().map(|c| c.sum() / n));
        if gw.amax().max(gb.amax()) < opts.tol {
            break;
        }
        w -= gw * step;
        b -= gb * step;
    }
    Ok(LogisticProbe {
        standardizer: st,
        classes,
        weights: w,
        bias: b,
        iterations,
    })
}

impl LogisticProbe {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<i64> {
        let xs = self.standardizer.apply(x);
        let mut logits = xs * &self.weights;
        for mut r in logits.row_iter_mut() {
            r += self.bias.transpose();
        }
        logits
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

/// Unweighted mean of per-class F1 in percent, over every class that occurs
/// in the truth or the predictions.
pub fn macro_f1(truth: &[i64], pred: &[i64]) -> f64 {
    let mut classes: Vec<i64> = truth.iter().chain(pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        total += if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    100.0 * total / classes.len() as f64
}

pub fn mse(truth: &[f64], pred: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / truth.len() as f64
}
