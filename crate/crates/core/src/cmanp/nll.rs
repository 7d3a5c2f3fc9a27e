use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::numerics::linalg::{cholesky, inverse_from_cholesky, log_det_from_cholesky, solve_lower, solve_lower_transposed};
use crate::numerics::{Tensor, Var};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    /// Per-output variances `[M, y_dim]`.
    Diagonal { var: Tensor },
    /// `Σ = F·Fᵀ + diag(d)` over the `M·y_dim` outputs, row-major by point.
    LowRank { factor: Tensor, diag: Tensor },
}

/// Predictive Gaussian over a set of targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPred {
    /// `[M, y_dim]`.
    pub mean: Tensor,
    pub cov: Covariance,
}

impl GaussianPred {
    /// Marginal variances `[M, y_dim]`.
    pub fn variance(&self) -> Tensor {
        match &self.cov {
            Covariance::Diagonal { var } => var.clone(),
            Covariance::LowRank { factor, diag } => {
                let v: Vec<f64> = (0..factor.rows())
                    .map(|i| diag.data()[i] + factor.row(i).iter().map(|a| a * a).sum::<f64>())
                    .collect();
                Tensor::raw(self.mean.shape().to_vec(), v)
            }
        }
    }

    /// Dense covariance `[M·y_dim, M·y_dim]`.
    pub fn dense_cov(&self) -> Result<Tensor> {
        match &self.cov {
            Covariance::Diagonal { var } => {
                let n = var.len();
                let mut d = vec![0.0; n * n];
                for (i, v) in var.data().iter().enumerate() {
                    d[i * n + i] = *v;
                }
                Tensor::new(&[n, n], d)
            }
            Covariance::LowRank { factor, diag } => low_rank_dense(factor, diag),
        }
    }

    /// Total log density of `ys` (not averaged).
    pub fn log_likelihood(&self, ys: &Tensor) -> Result<f64> {
        if ys.shape() != self.mean.shape() {
            return shape_err("log_likelihood", format!("{:?} vs {:?}", ys.shape(), self.mean.shape()));
        }
        match &self.cov {
            Covariance::Diagonal { var } => Ok(-diag_terms(self.mean.data(), var.data(), ys.data())),
            Covariance::LowRank { factor, diag } => {
                let l = cholesky(&low_rank_dense(factor, diag)?)?;
                Ok(-joint_terms(&l, self.mean.data(), ys.data()))
            }
        }
    }

    /// One draw, shaped like the mean.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let n = self.mean.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let noise = match &self.cov {
            Covariance::Diagonal { var } => var.data().iter().zip(&z).map(|(v, z)| v.sqrt() * z).collect(),
            Covariance::LowRank { .. } => {
                let l = cholesky(&self.dense_cov()?)?;
                let ld = l.data();
                (0..n).map(|i| (0..=i).map(|k| ld[i * n + k] * z[k]).sum()).collect::<Vec<f64>>()
            }
        };
        let s: Vec<f64> = self.mean.data().iter().zip(noise).map(|(m, e)| m + e).collect();
        Tensor::new(self.mean.shape(), s)
    }
}

fn low_rank_dense(factor: &Tensor, diag: &Tensor) -> Result<Tensor> {
    let n = factor.rows();
    if diag.len() != n {
        return shape_err("low_rank_dense", format!("factor {:?} diag {:?}", factor.shape(), diag.shape()));
    }
    let mut s = factor.matmul_nt(factor)?.to_vec();
    for (i, d) in diag.data().iter().enumerate() {
        s[i * n + i] += d;
    }
    Tensor::new(&[n, n], s)
}

/// `Σ_i 0.5·(log 2π + log v_i + r_i²/v_i)`.
fn diag_terms(mean: &[f64], var: &[f64], ys: &[f64]) -> f64 {
    mean.iter()
        .zip(var)
        .zip(ys)
        .map(|((m, v), y)| 0.5 * (LN_2PI + v.ln() + (y - m) * (y - m) / v))
        .sum()
}

/// `0.5·(n log 2π + log det Σ + rᵀΣ⁻¹r)` from the Cholesky factor of Σ.
fn joint_terms(l: &Tensor, mean: &[f64], ys: &[f64]) -> f64 {
    let r: Vec<f64> = ys.iter().zip(mean).map(|(y, m)| y - m).collect();
    let w = solve_lower(l, &r);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    0.5 * (r.len() as f64 * LN_2PI + log_det_from_cholesky(l) + quad)
}

/// Mean NLL per target point under independent Gaussians.
pub fn gaussian_nll_diag(pred: &GaussianPred, ys: &Tensor) -> Result<f64> {
    let var = pred.variance();
    if ys.shape() != pred.mean.shape() {
        return shape_err("gaussian_nll_diag", format!("{:?} vs {:?}", ys.shape(), pred.mean.shape()));
    }
    Ok(diag_terms(pred.mean.data(), var.data(), ys.data()) / ys.rows() as f64)
}

/// Mean NLL per target point under the joint Gaussian, via Cholesky of Σ.
pub fn gaussian_nll_joint(pred: &GaussianPred, ys: &Tensor) -> Result<f64> {
    Ok(-pred.log_likelihood(ys)? / ys.rows() as f64)
}

/// Differentiable diagonal NLL; `std` is the standard deviation.
pub fn nll_diag_var(mean: &Var, std: &Var, ys: &Tensor) -> Result<Var> {
    if mean.shape() != ys.shape() || std.shape() != ys.shape() {
        return shape_err("nll_diag", format!("mean {:?} std {:?} y {:?}", mean.shape(), std.shape(), ys.shape()));
    }
    let m = ys.rows() as f64;
    let var: Vec<f64> = std.value().data().iter().map(|s| s * s).collect();
    let value = diag_terms(mean.value().data(), &var, ys.data()) / m;
    let ys = ys.clone();
    Ok(Var::custom(
        Tensor::scalar(value),
        &[mean, std],
        move |g, x, _, need| {
            let g = g.item()? / m;
            let (mu, sd) = (x[0].data(), x[1].data());
            let r: Vec<f64> = ys.data().iter().zip(mu).map(|(y, m)| y - m).collect();
            let d_mean = need[0]
                .then(|| {
                    let v = r.iter().zip(sd).map(|(r, s)| -g * r / (s * s)).collect();
                    Tensor::new(x[0].shape(), v)
                })
                .transpose()?;
            let d_std = need[1]
                .then(|| {
                    let v = r.iter().zip(sd).map(|(r, s)| g * (1.0 / s - r * r / (s * s * s))).collect();
                    Tensor::new(x[1].shape(), v)
                })
                .transpose()?;
            Ok(vec![d_mean, d_std])
        },
    ))
}

/// Differentiable joint NLL for `Σ = F·Fᵀ + diag(d)`.
///
/// With `α = Σ⁻¹r` and `G = ½(Σ⁻¹ − ααᵀ)`: `∂/∂μ = −α`, `∂/∂F = 2GF`,
/// `∂/∂d = diag(G)`, all divided by the number of target points.
pub fn nll_joint_var(mean: &Var, factor: &Var, diag: &Var, ys: &Tensor) -> Result<Var> {
    let n = ys.len();
    if mean.shape() != ys.shape() || factor.shape().first() != Some(&n) || diag.shape() != [n] {
        return shape_err(
            "nll_joint",
            format!("mean {:?} factor {:?} diag {:?} y {:?}", mean.shape(), factor.shape(), diag.shape(), ys.shape()),
        );
    }
    let m = ys.rows() as f64;
    let l = cholesky(&low_rank_dense(factor.value(), diag.value())?)?;
    let value = joint_terms(&l, mean.value().data(), ys.data()) / m;
    let ys = ys.clone();
    Ok(Var::custom(
        Tensor::scalar(value),
        &[mean, factor, diag],
        move |g, x, _, need| {
            let g = g.item()? / m;
            let l = cholesky(&low_rank_dense(x[1], x[2])?)?;
            let r: Vec<f64> = ys.data().iter().zip(x[0].data()).map(|(y, m)| y - m).collect();
            let alpha = solve_lower_transposed(&l, &solve_lower(&l, &r));
            let d_mean = need[0]
                .then(|| Tensor::new(x[0].shape(), alpha.iter().map(|a| -g * a).collect()))
                .transpose()?;
            if !need[1] && !need[2] {
                return Ok(vec![d_mean, None, None]);
            }
            let inv = inverse_from_cholesky(&l)?;
            let gm: Vec<f64> = inv
                .data()
                .iter()
                .enumerate()
                .map(|(idx, v)| g * 0.5 * (v - alpha[idx / n] * alpha[idx % n]))
                .collect();
            let gm = Tensor::new(&[n, n], gm)?;
            let d_factor = need[1].then(|| gm.matmul(x[1])?.scale(2.0)).transpose()?;
            let d_diag = need[2]
                .then(|| Tensor::new(&[n], (0..n).map(|i| gm.data()[i * n + i]).collect()))
                .transpose()?;
            Ok(vec![d_mean, d_factor, d_diag])
        },
    ))
}
