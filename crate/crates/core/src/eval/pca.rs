use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EvalError;

/// Principal axes of a set of rows. Components beyond the data rank are
/// zero, so projections are padded with zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `[d x p]`, one unit component per row, by decreasing variance.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    pub rank: usize,
}

const RANK_TOL: f64 = 1e-10;

/// Fits `d` components on the rows of `x`.
pub fn fit_pca(x: &DMatrix<f64>, d: usize) -> Result<Pca, EvalError> {
    if x.nrows() < 2 {
        return Err(EvalError::Invalid("PCA needs at least two rows".into()));
    }
    let n = x.nrows() as f64;
    let p = x.ncols();
    let mean = DVector::from_iterator(p, x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = xc.tr_mul(&xc) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .count();
    let mut components = DMatrix::zeros(d, p);
    let mut explained_variance = vec![0.0; d];
    for (k, &i) in order.iter().take(d.min(rank)).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        components.row_mut(k).copy_from(&v.transpose());
        explained_variance[k] = eig.eigenvalues[i];
    }
    if d > rank {
        log::warn!("PCA: requested {d} components, data rank is {rank}; padding with zeros");
    }
    Ok(Pca {
        mean,
        components,
        explained_variance,
        rank,
    })
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// `[n x p] -> [n x d]`.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut xc = x.clone();
        for mut r in xc.row_iter_mut() {
            r -= self.mean.transpose();
        }
        xc * self.components.transpose()
    }

    /// Mean squared reconstruction error per row.
    pub fn reconstruction_error(&self, x: &DMatrix<f64>) -> f64 {
        let z = self.project(x);
        let mut rec = z * &self.components;
        for mut r in rec.row_iter_mut() {
            r += self.mean.transpose();
        }
        (x - rec).norm_squared() / x.nrows() as f64
    }
}
