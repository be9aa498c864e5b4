//! Multinomial logistic regression head trained with L-BFGS.
//!
//! Objective: mean softmax cross-entropy + (l2/2)·‖W‖²_F, bias unpenalized.
//! Zero initialization and full-batch steps make training deterministic.

use super::MitigationError;
use crate::matrix::Matrix;

pub const DEFAULT_L2: f64 = 1e-2;
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 10_000;
const HISTORY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub hypothesis_id: String,
    /// d_Φ × C.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub l2: f64,
    pub train_loss: f64,
    pub n_train: usize,
    pub iterations: usize,
}

impl LinearHead {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (zc, w) in z.iter_mut().zip(self.weights.row(j)) {
                    *zc += xj * w;
                }
            }
        }
        z
    }

    /// Argmax class; ties go to the lower class index.
    pub fn predict_row(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn predict(&self, features: &Matrix) -> Vec<usize> {
        (0..features.rows()).map(|i| self.predict_row(features.row(i))).collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let lse = log_sum_exp(&z);
        z.iter().map(|v| (v - lse).exp()).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// The training problem restricted to the selected rows.
pub(crate) struct Problem<'a> {
    x: &'a Matrix,
    labels: &'a [usize],
    rows: &'a [usize],
    n_classes: usize,
    l2: f64,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(x: &'a Matrix, labels: &'a [usize], rows: &'a [usize], n_classes: usize, l2: f64) -> Self {
        Self { x, labels, rows, n_classes, l2 }
    }

    pub(crate) fn n_params(&self) -> usize {
        (self.x.cols() + 1) * self.n_classes
    }

    /// Objective and gradient at θ = [W row-major (d×C), b (C)].
    pub(crate) fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.cols();
        let c = self.n_classes;
        let (w, b) = theta.split_at(d * c);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; c];
        for &i in self.rows {
            let xi = self.x.row(i);
            z.copy_from_slice(b);
            for (j, &xj) in xi.iter().enumerate() {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk += xj * w[j * c + k];
                }
            }
            let lse = log_sum_exp(&z);
            let y = self.labels[i];
            loss += lse - z[y];
            for k in 0..c {
                let r = (z[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
                for (j, &xj) in xi.iter().enumerate() {
                    grad[j * c + k] += r * xj;
                }
                grad[d * c + k] += r;
            }
        }
        let n = self.rows.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        let mut penalty = 0.0;
        for (g, &wk) in grad[..d * c].iter_mut().zip(w) {
            *g += self.l2 * wk;
            penalty += wk * wk;
        }
        loss / n + 0.5 * self.l2 * penalty
    }

    #[cfg(test)]
    pub(crate) fn loss(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; theta.len()];
        self.eval(theta, &mut g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes the problem from θ = 0. Returns (θ, loss, iterations).
pub(crate) fn lbfgs(problem: &Problem) -> (Vec<f64>, f64, usize) {
    let n = problem.n_params();
    let mut theta = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut f = problem.eval(&theta, &mut grad);
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(HISTORY);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(HISTORY);
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut iter = 0;
    while iter < MAX_ITERATIONS && dot(&grad, &grad).sqrt() > GRAD_TOLERANCE {
        iter += 1;
        // two-loop recursion
        let mut q = grad.clone();
        let mut alpha = vec![0.0; s_hist.len()];
        for k in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            alpha[k] = rho * dot(&s_hist[k], &q);
            q.iter_mut().zip(&y_hist[k]).for_each(|(qi, yi)| *qi -= alpha[k] * yi);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / inf_norm(&grad).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for k in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            let beta = rho * dot(&y_hist[k], &q);
            q.iter_mut().zip(&s_hist[k]).for_each(|(qi, si)| *qi += (alpha[k] - beta) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // curvature pairs went stale; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            dir = grad.iter().map(|g| -g / inf_norm(&grad).max(1.0)).collect();
            slope = dot(&grad, &dir);
        }

        let mut step = 1.0;
        let accepted = loop {
            trial.iter_mut().zip(theta.iter().zip(&dir)).for_each(|(t, (x, d))| *t = x + step * d);
            let ft = problem.eval(&trial, &mut trial_grad);
            if ft <= f + 1e-4 * step * slope {
                break Some(ft);
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some(f_new) = accepted else {
            if s_hist.is_empty() {
                // no descent possible at machine precision
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if s_hist.len() == HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        f = f_new;
    }
    (theta, f, iter)
}

/// Trains a softmax head on `features[indices]`.
pub fn train_head(
    hypothesis_id: &str,
    features: &Matrix,
    labels: &[usize],
    indices: &[usize],
    n_classes: usize,
    l2: f64,
) -> Result<LinearHead, MitigationError> {
    if indices.is_empty() {
        return Err(MitigationError::EmptyTrainingSet);
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(MitigationError::InvalidL2(l2));
    }
    if labels.len() != features.rows() {
        return Err(MitigationError::LengthMismatch { expected: features.rows(), actual: labels.len() });
    }
    let first = labels[indices[0]];
    if indices.iter().all(|&i| labels[i] == first) {
        return Err(MitigationError::SingleClassSet(first));
    }
    if let Some(&bad) = indices.iter().map(|&i| &labels[i]).find(|&&l| l >= n_classes) {
        return Err(MitigationError::BadLabel(bad));
    }
    let problem = Problem::new(features, labels, indices, n_classes, l2);
    let (theta, loss, iterations) = lbfgs(&problem);
    let d = features.cols();
    Ok(LinearHead {
        hypothesis_id: hypothesis_id.to_string(),
        weights: Matrix::from_vec(d, n_classes, theta[..d * n_classes].to_vec()),
        bias: theta[d * n_classes..].to_vec(),
        l2,
        train_loss: loss,
        n_train: indices.len(),
        iterations,
    })
}
