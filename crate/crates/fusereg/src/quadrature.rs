//! Gauss-Hermite quadrature for normal-mixture conditional expectations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default node count per dimension; keeps the logistic-family quadrature
/// error below 1e-8 for the coefficient magnitudes this crate works with.
pub const DEFAULT_NODES: usize = 32;

/// A one-dimensional Gauss-Hermite rule: integrates e^{-x^2} f(x) over the
/// real line as sum w_i f(x_i).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an `n`-node rule via Golub-Welsch: the nodes are eigenvalues of
    /// the symmetrized Jacobi matrix (zero diagonal, sqrt(k/2) off-diagonal)
    /// and the weights come from the first eigenvector components.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature rule needs at least one node");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 0..n - 1 {
            let off = ((k as f64 + 1.0) * 0.5).sqrt();
            jacobi[(k, k + 1)] = off;
            jacobi[(k + 1, k)] = off;
        }
        let eigen = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = eigen
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let v0 = eigen.eigenvectors[(0, j)];
                (x, v0 * v0 * std::f64::consts::PI.sqrt())
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Raw integral of e^{-x^2} f(x).
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// E[f(X)] for X ~ Normal(mu, sigma^2).
    pub fn expect_normal<F: Fn(f64) -> f64>(&self, mu: f64, sigma: f64, f: F) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sigma;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * inv_sqrt_pi * f(mu + scale * x))
            .sum()
    }

    /// Probabilist's points for X ~ Normal(mu, sigma^2): pairs (x_k, w_k)
    /// with sum of weights 1.
    pub fn normal_points(&self, mu: f64, sigma: f64) -> Vec<(f64, f64)> {
        let scale = std::f64::consts::SQRT_2 * sigma;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (mu + scale * x, w * inv_sqrt_pi))
            .collect()
    }
}

/// A product Gauss-Hermite grid for a p-variate Normal(mu, Sigma).
///
/// Offsets are precomputed as sqrt(2) * A z over the tensor grid, where
/// A A^T = Sigma, so evaluating the expectation at a new mean only shifts
/// the points. Grids are limited to p <= 3; beyond that the product-grid
/// cost is ruled out and callers fall back to Monte Carlo.
#[derive(Debug, Clone)]
pub struct NormalGrid {
    /// Offset vectors from the mean, one per grid point (p-dimensional).
    offsets: Vec<DVector<f64>>,
    /// Probability weights summing to 1.
    weights: Vec<f64>,
}

impl NormalGrid {
    pub fn new(rule: &GaussHermite, sigma: &DMatrix<f64>) -> Result<Self> {
        let p = sigma.nrows();
        if sigma.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                p,
                sigma.ncols()
            )));
        }
        if p > 3 {
            return Err(Error::QuadratureUnsupported(format!(
                "product Gauss-Hermite grid limited to 3 dimensions, got {p}"
            )));
        }
        let factor = psd_factor(sigma);
        let m = rule.len();
        let total = m.pow(p as u32);
        let inv_sqrt_pi_p = std::f64::consts::PI.powf(-(p as f64) / 2.0);
        let mut offsets = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut index = vec![0usize; p];
        for _ in 0..total {
            let mut z = DVector::<f64>::zeros(p);
            let mut w = inv_sqrt_pi_p;
            for (d, &k) in index.iter().enumerate() {
                z[d] = rule.nodes[k];
                w *= rule.weights[k];
            }
            offsets.push(&factor * z * std::f64::consts::SQRT_2);
            weights.push(w);
            // advance the mixed-radix counter
            for d in (0..p).rev() {
                index[d] += 1;
                if index[d] < m {
                    break;
                }
                index[d] = 0;
            }
        }
        Ok(NormalGrid { offsets, weights })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Iterate (point, weight) for the distribution centered at `mu`.
    pub fn points_at<'a>(
        &'a self,
        mu: &'a DVector<f64>,
    ) -> impl Iterator<Item = (DVector<f64>, f64)> + 'a {
        self.offsets
            .iter()
            .zip(self.weights.iter())
            .map(move |(off, &w)| (mu + off, w))
    }
}

/// Factor A with A A^T = Sigma for a symmetric PSD matrix, tolerating
/// semidefiniteness (zero residual covariance collapses the grid onto the
/// mean, which is the correct degenerate limit).
pub(crate) fn psd_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = sigma.clone().cholesky() {
        return chol.l();
    }
    let eigen = sigma.clone().symmetric_eigen();
    let mut scaled = eigen.eigenvectors.clone();
    for (j, &lambda) in eigen.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn integrates_monomials_exactly() {
        let rule = GaussHermite::new(10);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert_abs_diff_eq!(rule.integrate(|_| 1.0), sqrt_pi, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.integrate(|x| x), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.integrate(|x| x * x), sqrt_pi / 2.0, epsilon = 1e-12);
        // x^8: exact value sqrt(pi) * 7!! / 2^4
        assert_abs_diff_eq!(
            rule.integrate(|x| x.powi(8)),
            sqrt_pi * 105.0 / 16.0,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(rule.integrate(|x| x.powi(9)), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn normal_expectations() {
        let rule = GaussHermite::new(32);
        assert_abs_diff_eq!(rule.expect_normal(2.0, 3.0, |x| x), 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(
            rule.expect_normal(2.0, 3.0, |x| x * x),
            4.0 + 9.0,
            epsilon = 1e-9
        );
        // E[e^X] = e^{mu + sigma^2/2} for lognormal moments
        assert_abs_diff_eq!(
            rule.expect_normal(0.1, 0.5, |x| x.exp()),
            (0.1f64 + 0.125).exp(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn grid_matches_univariate_rule() {
        let rule = GaussHermite::new(16);
        let sigma = DMatrix::from_element(1, 1, 0.25);
        let grid = NormalGrid::new(&rule, &sigma).unwrap();
        let mu = DVector::from_element(1, 1.5);
        let by_grid: f64 = grid.points_at(&mu).map(|(l, w)| w * l[0] * l[0]).sum();
        assert_abs_diff_eq!(by_grid, 1.5 * 1.5 + 0.25, epsilon = 1e-10);
    }

    #[test]
    fn grid_handles_correlated_covariance() {
        let rule = GaussHermite::new(12);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]);
        let grid = NormalGrid::new(&rule, &sigma).unwrap();
        let mu = DVector::from_row_slice(&[1.0, -1.0]);
        let cov: f64 = grid
            .points_at(&mu)
            .map(|(l, w)| w * (l[0] - 1.0) * (l[1] + 1.0))
            .sum();
        assert_abs_diff_eq!(cov, 0.2, epsilon = 1e-10);
    }

    #[test]
    fn grid_rejects_high_dimension() {
        let rule = GaussHermite::new(4);
        let sigma = DMatrix::<f64>::identity(4, 4);
        assert!(matches!(
            NormalGrid::new(&rule, &sigma),
            Err(Error::QuadratureUnsupported(_))
        ));
    }

    #[test]
    fn zero_covariance_collapses_to_mean() {
        let rule = GaussHermite::new(8);
        let sigma = DMatrix::from_element(1, 1, 0.0);
        let grid = NormalGrid::new(&rule, &sigma).unwrap();
        let mu = DVector::from_element(1, 3.0);
        let mean: f64 = grid.points_at(&mu).map(|(l, w)| w * l[0]).sum();
        assert_abs_diff_eq!(mean, 3.0, epsilon = 1e-12);
    }
}
