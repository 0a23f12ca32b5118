//! Covariance Matrix Adaptation Evolution Strategy with an ask/tell interface.
//!
//! This is the plain (μ/μ_w, λ) variant with cumulative step-size adaptation,
//! rank-one and rank-μ covariance updates and positive recombination weights
//! over the best ⌊λ/2⌋ candidates. There is no active update, no bound
//! handling and no restart logic.
//!
//! The state owns its random generator, so cloning a state and asking both
//! copies yields bitwise-identical candidates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss of candidate {index} is not finite ({value})")]
    NonFiniteLoss { index: usize, value: f64 },
    #[error("covariance lost positive definiteness (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
}

/// Default population size `⌊4 + 3 ln d⌋`.
pub fn default_population(dim: usize) -> usize {
    (4.0 + 3.0 * (dim as f64).ln()).floor() as usize
}

/// Strategy constants derived from the dimension and population size.
#[derive(Debug, Clone, PartialEq)]
struct Params {
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Params {
    fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff)).min(1.0 - c_1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Self {
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// One CMA-ES optimizer instance.
#[derive(Debug, Clone)]
pub struct CmaState {
    dim: usize,
    lambda: usize,
    params: Params,
    mean: DVector<f64>,
    sigma: f64,
    covariance: DMatrix<f64>,
    /// Eigenvectors of the covariance (columns).
    basis: DMatrix<f64>,
    /// Square roots of the covariance eigenvalues.
    scales: DVector<f64>,
    path_c: DVector<f64>,
    path_sigma: DVector<f64>,
    generation: u64,
    evaluations: u64,
    best: Option<(DVector<f64>, f64)>,
    rng: ChaCha8Rng,
}

impl CmaState {
    /// Fresh state with zero mean and identity covariance.
    ///
    /// `lambda` overrides the default population `⌊4 + 3 ln d⌋`.
    pub fn new(dim: usize, sigma: f64, lambda: Option<usize>, seed: u64) -> Result<Self, CmaError> {
        if dim == 0 {
            return Err(CmaError::InvalidArgument("dimension must be positive".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CmaError::InvalidArgument(format!(
                "step size must be positive and finite, got {sigma}"
            )));
        }
        let lambda = lambda.unwrap_or_else(|| default_population(dim));
        if lambda < 2 {
            return Err(CmaError::InvalidArgument(format!(
                "population must be at least 2, got {lambda}"
            )));
        }
        Ok(Self {
            dim,
            lambda,
            params: Params::new(dim, lambda),
            mean: DVector::zeros(dim),
            sigma,
            covariance: DMatrix::identity(dim, dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
            path_c: DVector::zeros(dim),
            path_sigma: DVector::zeros(dim),
            generation: 0,
            evaluations: 0,
            best: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Replaces the initial mean. Only meaningful before the first tell.
    pub fn with_mean(mut self, mean: &[f64]) -> Result<Self, CmaError> {
        if mean.len() != self.dim {
            return Err(CmaError::InvalidArgument(format!(
                "mean has length {}, expected {}",
                mean.len(),
                self.dim
            )));
        }
        self.mean = DVector::from_column_slice(mean);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population(&self) -> usize {
        self.lambda
    }

    pub fn parents(&self) -> usize {
        self.params.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.weights
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn path_c(&self) -> &[f64] {
        self.path_c.as_slice()
    }

    pub fn path_sigma(&self) -> &[f64] {
        self.path_sigma.as_slice()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Best candidate seen across all tells and its loss.
    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    /// Smallest eigenvalue of the current covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.scales.iter().map(|s| s * s).fold(f64::INFINITY, f64::min)
    }

    /// Samples λ candidates from `N(mean, σ² C)`.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let bd = &self.basis * DMatrix::from_diagonal(&self.scales);
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut self.rng));
                let x = &self.mean + self.sigma * (&bd * z);
                x.as_slice().to_vec()
            })
            .collect()
    }

    /// Updates the distribution from a full evaluated population.
    ///
    /// Only the ordering of `losses` is used; ties keep submission order.
    pub fn tell(&mut self, candidates: &[Vec<f64>], losses: &[f64]) -> Result<(), CmaError> {
        if candidates.len() != self.lambda || losses.len() != self.lambda {
            return Err(CmaError::InvalidArgument(format!(
                "expected {} candidates and losses, got {} and {}",
                self.lambda,
                candidates.len(),
                losses.len()
            )));
        }
        if let Some(bad) = candidates.iter().position(|c| c.len() != self.dim) {
            return Err(CmaError::InvalidArgument(format!(
                "candidate {bad} has length {}, expected {}",
                candidates[bad].len(),
                self.dim
            )));
        }
        if let Some((index, &value)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(CmaError::NonFiniteLoss { index, value });
        }

        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));

        let top = order[0];
        if self.best.as_ref().is_none_or(|(_, f)| losses[top] < *f) {
            self.best = Some((DVector::from_column_slice(&candidates[top]), losses[top]));
        }

        let p = &self.params;
        let n = self.dim as f64;
        let old_mean = self.mean.clone();

        let steps: Vec<DVector<f64>> = order[..p.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old_mean) / self.sigma)
            .collect();
        let mut mean_step = DVector::zeros(self.dim);
        for (w, y) in p.weights.iter().zip(&steps) {
            mean_step.axpy(*w, y, 1.0);
        }
        self.mean = &old_mean + self.sigma * &mean_step;

        // C^{-1/2} y = B D^{-1} B^T y
        let inv_scales = self.scales.map(|s| 1.0 / s);
        let whitened = &self.basis * inv_scales.component_mul(&(self.basis.transpose() * &mean_step));
        self.path_sigma =
            (1.0 - p.c_sigma) * &self.path_sigma + (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt() * whitened;

        let ps_norm = self.path_sigma.norm();
        let decay = 1.0 - (1.0 - p.c_sigma).powf(2.0 * (self.generation + 1) as f64);
        let h_sigma = if ps_norm / decay.sqrt() < (1.4 + 2.0 / (n + 1.0)) * p.chi_n {
            1.0
        } else {
            0.0
        };

        self.path_c = (1.0 - p.c_c) * &self.path_c + h_sigma * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt() * &mean_step;

        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in p.weights.iter().zip(&steps) {
            rank_mu.ger(*w, y, y, 1.0);
        }
        let delta_h = (1.0 - h_sigma) * p.c_c * (2.0 - p.c_c);
        let keep = 1.0 - p.c_1 - p.c_mu + p.c_1 * delta_h;
        let mut cov = keep * &self.covariance + p.c_mu * rank_mu;
        cov.ger(p.c_1, &self.path_c, &self.path_c, 1.0);
        self.covariance = (&cov + cov.transpose()) * 0.5;

        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();

        self.generation += 1;
        self.evaluations += self.lambda as u64;
        self.refresh_eigen()
    }

    fn refresh_eigen(&mut self) -> Result<(), CmaError> {
        let eigen = SymmetricEigen::new(self.covariance.clone());
        let min = eigen.eigenvalues.min();
        if !(min > 0.0) || !self.sigma.is_finite() || !(self.sigma > 0.0) {
            return Err(CmaError::NotPositiveDefinite(min));
        }
        self.scales = eigen.eigenvalues.map(f64::sqrt);
        self.basis = eigen.eigenvectors;
        Ok(())
    }
}
