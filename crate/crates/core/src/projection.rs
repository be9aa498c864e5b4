//! Affine map from classifier feature space into the vision-language image space.
//!
//! The fit is the closed-form ridge solution of
//! `mean_i ||W^T x_i + b - y_i||^2 + ridge * ||W||_F^2` with `b` unpenalized.
//! Centering both sides removes `b` from the system, leaving one shared
//! `d_phi x d_phi` Gram matrix that is factored once and reused for every
//! target column.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_embeddings, save_embeddings, CorpusError, EmbeddingMatrix};
use crate::fsutil::write_atomic;
use crate::matrix::Matrix;

pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("normal equations are singular; use a positive ridge")]
    SingularSystem,
    #[error("ridge must be finite and non-negative, got {0}")]
    InvalidRidge(f64),
    #[error("need at least one training row")]
    NoRows,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("projector metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineProjector {
    /// `d_phi x d_psi`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub ridge: f64,
    pub fit_rmse: f64,
}

#[derive(Serialize, Deserialize)]
struct ProjectorHeader {
    d_phi: usize,
    d_psi: usize,
    ridge: f64,
    fit_rmse: f64,
    weights: String,
    bias: String,
}

impl AffineProjector {
    pub fn identity(dim: usize) -> Self {
        let mut weights = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weights.set(i, i, 1.0);
        }
        Self {
            weights,
            bias: vec![0.0; dim],
            ridge: 0.0,
            fit_rmse: 0.0,
        }
    }

    pub fn d_phi(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_psi(&self) -> usize {
        self.weights.cols()
    }

    pub fn project_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.weights.row(j)) {
                *o += xj * w;
            }
        }
        out
    }

    /// Root of the mean (over rows) squared residual norm.
    pub fn rmse(&self, features: &Matrix, targets: &Matrix) -> f64 {
        (self.residual_sum(features, targets) / features.rows().max(1) as f64).sqrt()
    }

    /// The regularized objective the fit minimizes.
    pub fn objective(&self, features: &Matrix, targets: &Matrix) -> f64 {
        let frob: f64 = self.weights.as_slice().iter().map(|w| w * w).sum();
        self.residual_sum(features, targets) / features.rows() as f64 + self.ridge * frob
    }

    fn residual_sum(&self, features: &Matrix, targets: &Matrix) -> f64 {
        (0..features.rows())
            .map(|i| {
                self.project_row(features.row(i))
                    .iter()
                    .zip(targets.row(i))
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Writes `projector.json`, `W.ladremb` and `b.ladremb` into `dir`.
    /// Weights are stored at f32 precision.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ProjectionError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| ProjectionError::Metadata(e.to_string()))?;
        let w = EmbeddingMatrix::from_rows(
            self.d_psi(),
            &(0..self.d_phi()).map(|i| self.weights.row(i)).collect::<Vec<_>>(),
        )?;
        let b = EmbeddingMatrix::from_rows(self.d_psi(), &[self.bias.as_slice()])?;
        save_embeddings(&w, dir.join("W.ladremb"))?;
        save_embeddings(&b, dir.join("b.ladremb"))?;
        let header = ProjectorHeader {
            d_phi: self.d_phi(),
            d_psi: self.d_psi(),
            ridge: self.ridge,
            fit_rmse: self.fit_rmse,
            weights: "W.ladremb".into(),
            bias: "b.ladremb".into(),
        };
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        write_atomic(&dir.join("projector.json"), json.as_bytes())
            .map_err(|e| ProjectionError::Metadata(e.to_string()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ProjectionError> {
        let dir = dir.as_ref();
        let header_path = dir.join("projector.json");
        if !header_path.exists() {
            return Err(CorpusError::MissingFile(header_path).into());
        }
        let text = fs::read_to_string(&header_path).map_err(|e| ProjectionError::Metadata(e.to_string()))?;
        let header: ProjectorHeader =
            serde_json::from_str(&text).map_err(|e| ProjectionError::Metadata(e.to_string()))?;
        let w = load_embeddings(dir.join(&header.weights))?;
        let b = load_embeddings(dir.join(&header.bias))?;
        if w.rows() != header.d_phi || w.dim() != header.d_psi || b.rows() != 1 || b.dim() != header.d_psi {
            return Err(ProjectionError::ShapeMismatch(format!(
                "stored blobs {}x{} / {}x{} disagree with header {}x{}",
                w.rows(),
                w.dim(),
                b.rows(),
                b.dim(),
                header.d_phi,
                header.d_psi
            )));
        }
        Ok(Self {
            weights: w.to_matrix(),
            bias: b.row_f64(0),
            ridge: header.ridge,
            fit_rmse: header.fit_rmse,
        })
    }
}

pub fn fit_projection(features: &Matrix, targets: &Matrix, ridge: f64) -> Result<AffineProjector, ProjectionError> {
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(ProjectionError::InvalidRidge(ridge));
    }
    if features.rows() != targets.rows() {
        return Err(ProjectionError::ShapeMismatch(format!(
            "{} feature rows vs {} target rows",
            features.rows(),
            targets.rows()
        )));
    }
    let n = features.rows();
    if n == 0 {
        return Err(ProjectionError::NoRows);
    }
    let (p, q) = (features.cols(), targets.cols());
    let x_mean = column_means(features);
    let y_mean = column_means(targets);

    let xc = DMatrix::from_fn(n, p, |i, j| features.get(i, j) - x_mean[j]);
    let yc = DMatrix::from_fn(n, q, |i, j| targets.get(i, j) - y_mean[j]);
    let inv_n = 1.0 / n as f64;
    let mut gram = xc.tr_mul(&xc) * inv_n;
    for j in 0..p {
        gram[(j, j)] += ridge;
    }
    let rhs = xc.tr_mul(&yc) * inv_n;

    let chol = gram.cholesky().ok_or(ProjectionError::SingularSystem)?;
    if ridge == 0.0 {
        // A numerically rank-deficient Gram can still factor; reject tiny pivots.
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().cloned().fold(0.0f64, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) || (min / max).powi(2) < 1e-13 {
            return Err(ProjectionError::SingularSystem);
        }
    }
    let w = chol.solve(&rhs);

    let mut weights = Matrix::zeros(p, q);
    for j in 0..p {
        for k in 0..q {
            weights.set(j, k, w[(j, k)]);
        }
    }
    let bias: Vec<f64> = (0..q)
        .map(|k| y_mean[k] - (0..p).map(|j| x_mean[j] * w[(j, k)]).sum::<f64>())
        .collect();

    let mut projector = AffineProjector {
        weights,
        bias,
        ridge,
        fit_rmse: 0.0,
    };
    if projector.weights.as_slice().iter().chain(&projector.bias).any(|v| !v.is_finite()) {
        return Err(ProjectionError::SingularSystem);
    }
    projector.fit_rmse = projector.rmse(features, targets);
    Ok(projector)
}

pub fn project(projector: &AffineProjector, features: &Matrix) -> Result<Matrix, ProjectionError> {
    if features.cols() != projector.d_phi() {
        return Err(ProjectionError::ShapeMismatch(format!(
            "features have dim {}, projector expects {}",
            features.cols(),
            projector.d_phi()
        )));
    }
    let mut out = Matrix::zeros(features.rows(), projector.d_psi());
    for i in 0..features.rows() {
        out.row_mut(i).copy_from_slice(&projector.project_row(features.row(i)));
    }
    Ok(out)
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    let n = m.rows().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
    }

    /// Independent oracle: explicit augmented normal equations
    /// `[X 1]^T [X 1] + diag(n*ridge, .., n*ridge, 0)` solved by Gauss-Jordan
    /// elimination with partial pivoting.
    fn normal_equations_oracle(x: &Matrix, y: &Matrix, ridge: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (n, p, q) = (x.rows(), x.cols(), y.cols());
        let m = p + 1;
        let aug = |i: usize, j: usize| if j == p { 1.0 } else { x.get(i, j) };
        let mut a = vec![vec![0.0; m + q]; m];
        for r in 0..m {
            for c in 0..m {
                a[r][c] = (0..n).map(|i| aug(i, r) * aug(i, c)).sum();
            }
            if r < p {
                a[r][r] += n as f64 * ridge;
            }
            for k in 0..q {
                a[r][m + k] = (0..n).map(|i| aug(i, r) * y.get(i, k)).sum();
            }
        }
        for col in 0..m {
            let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            let d = a[col][col];
            for v in a[col].iter_mut() {
                *v /= d;
            }
            for r in 0..m {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let w = (0..p).map(|j| a[j][m..].to_vec()).collect();
        (w, a[p][m..].to_vec())
    }

    #[test]
    fn identity_targets_give_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 30, 4);
        let p = fit_projection(&x, &x, 0.0).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((p.weights.get(j, k) - expect).abs() < 1e-10);
            }
        }
        assert!(p.bias.iter().all(|b| b.abs() < 1e-10));
        assert!(p.fit_rmse < 1e-10);
    }

    fn exact_example() -> (Matrix, Matrix) {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        // W* = diag(2, 3), b* = (1, -1)
        let y = Matrix::from_rows(&[[3.0, -1.0], [1.0, 2.0], [3.0, 2.0]]);
        (x, y)
    }

    #[test]
    fn recovers_exact_affine_map() {
        let (x, y) = exact_example();
        let p = fit_projection(&x, &y, 0.0).unwrap();
        let w = [[2.0, 0.0], [0.0, 3.0]];
        for j in 0..2 {
            for k in 0..2 {
                assert!((p.weights.get(j, k) - w[j][k]).abs() < 1e-9);
            }
        }
        assert!((p.bias[0] - 1.0).abs() < 1e-9 && (p.bias[1] + 1.0).abs() < 1e-9);
        assert!(p.fit_rmse <= 1e-9);
        let out = project(&p, &Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-9 && (out.get(0, 1) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_normal_equation_oracle_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = gaussian(&mut rng, 200, 8);
        let w_true = gaussian(&mut rng, 8, 5);
        let noise = gaussian(&mut rng, 200, 5);
        let mut y = Matrix::zeros(200, 5);
        for i in 0..200 {
            for k in 0..5 {
                let v: f64 = (0..8).map(|j| x.get(i, j) * w_true.get(j, k)).sum::<f64>() + 0.5 + 0.01 * noise.get(i, k);
                y.set(i, k, v);
            }
        }
        let p = fit_projection(&x, &y, 1e-3).unwrap();
        let (w, b) = normal_equations_oracle(&x, &y, 1e-3);
        for j in 0..8 {
            for k in 0..5 {
                assert!((p.weights.get(j, k) - w[j][k]).abs() <= 1e-8, "W[{j}][{k}]");
            }
        }
        for k in 0..5 {
            assert!((p.bias[k] - b[k]).abs() <= 1e-8);
        }
    }

    #[test]
    fn fitted_projector_is_a_local_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&mut rng, 60, 3);
        let y = gaussian(&mut rng, 60, 2);
        let p = fit_projection(&x, &y, 0.05).unwrap();
        let base = p.objective(&x, &y);
        for j in 0..3 {
            for k in 0..2 {
                for delta in [1e-3, -1e-3] {
                    let mut q = p.clone();
                    q.weights.set(j, k, q.weights.get(j, k) + delta);
                    assert!(q.objective(&x, &y) >= base - 1e-12);
                }
            }
        }
        for k in 0..2 {
            for delta in [1e-3, -1e-3] {
                let mut q = p.clone();
                q.bias[k] += delta;
                assert!(q.objective(&x, &y) >= base - 1e-12);
            }
        }
    }

    #[test]
    fn constant_map_and_identity_projection() {
        let mut p = AffineProjector::identity(2);
        let m = Matrix::from_rows(&[[0.3, -4.0], [7.0, 1.0]]);
        assert_eq!(project(&p, &m).unwrap(), m);
        p.weights = Matrix::zeros(2, 2);
        p.bias = vec![5.0, 5.0];
        let out = project(&p, &m).unwrap();
        assert_eq!(out.row(1), &[5.0, 5.0]);
    }

    #[test]
    fn error_paths() {
        let (x, y) = exact_example();
        assert!(matches!(
            fit_projection(&x, &Matrix::zeros(2, 2), 0.0),
            Err(ProjectionError::ShapeMismatch(_))
        ));
        assert!(matches!(fit_projection(&x, &y, -1.0), Err(ProjectionError::InvalidRidge(_))));
        let dup = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        assert!(matches!(fit_projection(&dup, &y, 0.0), Err(ProjectionError::SingularSystem)));
        assert!(fit_projection(&dup, &y, 1e-3).is_ok());
        let p = fit_projection(&x, &y, 0.0).unwrap();
        assert!(matches!(project(&p, &Matrix::zeros(1, 3)), Err(ProjectionError::ShapeMismatch(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = exact_example();
        let p = fit_projection(&x, &y, 0.0).unwrap();
        p.save(dir.path()).unwrap();
        let back = AffineProjector::load(dir.path()).unwrap();
        assert_eq!(back.d_phi(), 2);
        for (a, b) in back.weights.as_slice().iter().zip(p.weights.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(AffineProjector::load(dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn ridge_never_lowers_training_rmse(seed in any::<u64>(), lo in 0.0f64..1.0, step in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 25, 3);
            let y = gaussian(&mut rng, 25, 2);
            let a = fit_projection(&x, &y, lo).unwrap();
            let b = fit_projection(&x, &y, lo + step).unwrap();
            prop_assert!(b.fit_rmse >= a.fit_rmse - 1e-12);
        }

        #[test]
        fn projection_is_affine(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 20, 3);
            let y = gaussian(&mut rng, 20, 2);
            let p = fit_projection(&x, &y, 0.01).unwrap();
            let a = gaussian(&mut rng, 4, 3);
            let b = gaussian(&mut rng, 4, 3);
            let combo = Matrix::from_vec(4, 3, a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| alpha * u + beta * v).collect());
            let mut linear = p.clone();
            linear.bias = vec![0.0; 2];
            let (pa, pb) = (project(&linear, &a).unwrap(), project(&linear, &b).unwrap());
            let lhs = project(&p, &combo).unwrap();
            for i in 0..4 {
                for k in 0..2 {
                    let rhs = alpha * pa.get(i, k) + beta * pb.get(i, k) + p.bias[k];
                    prop_assert!((lhs.get(i, k) - rhs).abs() < 1e-9);
                }
            }
        }
    }
}
