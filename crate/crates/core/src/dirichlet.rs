//! Dirichlet sampling with pathwise gradients w.r.t. concentration
//! parameters, via implicit differentiation of the Gamma CDF, plus the
//! closed-form moment formulas and the pairwise-product matrix.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strictly positive floor applied to concentrations before sampling; mixed
/// labels can carry exact zeros.
pub const CONCENTRATION_FLOOR: f64 = 1e-6;
/// Box constraint on log-space concentration parameters.
pub const LOG_BETA_CLAMP: f64 = 30.0;
/// Gamma draws are clamped below to keep downstream ratios finite.
const GAMMA_DRAW_FLOOR: f64 = 1e-300;

/// Global concentration vector stored in log-space so gradient ascent can
/// never produce an invalid (non-positive) Dirichlet parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    log_beta: Vec<f64>,
}

impl DirichletParams {
    pub fn from_log(log_beta: Vec<f64>) -> Result<Self> {
        if log_beta.is_empty() {
            return Err(Error::InvalidArgument("empty concentration vector".into()));
        }
        if log_beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "DirichletParams::from_log".into() });
        }
        let log_beta = log_beta
            .into_iter()
            .map(|v| v.clamp(-LOG_BETA_CLAMP, LOG_BETA_CLAMP))
            .collect();
        Ok(DirichletParams { log_beta })
    }

    pub fn from_beta(beta: &[f64]) -> Result<Self> {
        if beta.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidArgument("beta entries must be positive".into()));
        }
        Self::from_log(beta.iter().map(|b| b.ln()).collect())
    }

    /// Random init: log beta ~ Normal(0, 0.1^2).
    pub fn random_init<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        let log_beta = (0..k)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_log(log_beta)
    }

    pub fn k(&self) -> usize {
        self.log_beta.len()
    }

    pub fn log_beta(&self) -> &[f64] {
        &self.log_beta
    }

    pub fn beta(&self) -> Vec<f64> {
        self.log_beta.iter().map(|v| v.exp()).collect()
    }

    /// Gradient-ascent step on log beta, staying inside the clamp box.
    pub fn ascend(&mut self, grad_log_beta: &[f64], lr: f64) {
        for (lb, g) in self.log_beta.iter_mut().zip(grad_log_beta) {
            *lb = (*lb + lr * g).clamp(-LOG_BETA_CLAMP, LOG_BETA_CLAMP);
        }
    }
}

/// A point on the K-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    pub z: Vec<f64>,
}

/// One draw from Gamma(alpha, 1) by the Marsaglia-Tsang squeeze; alpha < 1
/// uses the boosting identity G(a) = G(a+1) * U^(1/a).
pub fn sample_gamma<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma shape must be positive, got {alpha}"
        )));
    }
    let (shape, boost) = if alpha < 1.0 {
        let u: f64 = rng.gen::<f64>();
        (alpha + 1.0, u.powf(1.0 / alpha))
    } else {
        (alpha, 1.0)
    };
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v3 = v * v * v;
        let u: f64 = rng.gen();
        if u < 1.0 - 0.0331 * x.powi(4)
            || u.ln() < 0.5 * x * x + d * (1.0 - v3 + v3.ln())
        {
            return Ok((d * v3 * boost).max(GAMMA_DRAW_FLOOR));
        }
    }
}

/// Draw from a Dirichlet with an explicit concentration vector. Returns the
/// simplex point together with the raw Gamma variates that produced it; the
/// backward pass differentiates exactly these draws.
pub fn sample_dirichlet_conc<R: Rng + ?Sized>(
    conc: &[f64],
    rng: &mut R,
) -> Result<(SimplexPoint, Vec<f64>)> {
    let mut draws = Vec::with_capacity(conc.len());
    for &c in conc {
        draws.push(sample_gamma(c.max(CONCENTRATION_FLOOR), rng)?);
    }
    let total: f64 = draws.iter().sum();
    let z = draws.iter().map(|g| g / total).collect();
    Ok((SimplexPoint { z }, draws))
}

pub fn sample_dirichlet<R: Rng + ?Sized>(
    params: &DirichletParams,
    rng: &mut R,
) -> Result<SimplexPoint> {
    Ok(sample_dirichlet_conc(&params.beta(), rng)?.0)
}

/// Mean and covariance of the Dirichlet: E[z_s] = b_s / b_0,
/// Cov[z_s, z_t] = -b_s b_t / (b_0^2 (b_0 + 1)) off-diagonal,
/// Var[z_s] = b_s (b_0 - b_s) / (b_0^2 (b_0 + 1)).
pub fn moments(params: &DirichletParams) -> (Vec<f64>, Tensor) {
    let beta = params.beta();
    let b0: f64 = beta.iter().sum();
    let mean: Vec<f64> = beta.iter().map(|b| b / b0).collect();
    let k = beta.len();
    let denom = b0 * b0 * (b0 + 1.0);
    let mut cov = vec![0.0; k * k];
    for s in 0..k {
        for t in 0..k {
            cov[s * k + t] = if s == t {
                beta[s] * (b0 - beta[s]) / denom
            } else {
                -beta[s] * beta[t] / denom
            };
        }
    }
    (mean, Tensor::new(vec![k, k], cov).expect("square matrix"))
}

/// Implicit derivative of one Gamma(alpha, 1) draw w.r.t. its shape:
/// dG/dalpha = -(dF/dalpha) / (dF/dG) at fixed CDF level, with dF/dalpha by
/// central differencing of the regularized lower incomplete gamma.
pub fn gamma_shape_grad(alpha: f64, draw: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(draw > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma_shape_grad needs alpha > 0 and draw > 0, got {alpha}, {draw}"
        )));
    }
    let h = (1e-4 * alpha.max(1.0)).min(alpha / 2.0);
    let df_dalpha = (gamma_lr(alpha + h, draw) - gamma_lr(alpha - h, draw)) / (2.0 * h);
    let log_pdf = (alpha - 1.0) * draw.ln() - draw - ln_gamma(alpha);
    let pdf = log_pdf.exp();
    if pdf <= 0.0 || !pdf.is_finite() {
        return Err(Error::NonFinite {
            context: format!("gamma density at alpha={alpha}, draw={draw}"),
        });
    }
    let g = -df_dalpha / pdf;
    if !g.is_finite() {
        return Err(Error::NonFinite {
            context: format!("implicit gamma gradient at alpha={alpha}"),
        });
    }
    Ok(g)
}

/// Full pathwise Jacobian d z_s / d c_k of the normalized sample with respect
/// to the concentration vector, given the raw Gamma draws of the sample.
/// Each Gamma marginal depends on its own concentration only, so the chain is
/// dz_s/dc_k = (dG_k/dc_k) (delta_sk - z_s) / sum(G).
pub fn pathwise_grad(conc: &[f64], gamma_draws: &[f64]) -> Result<Tensor> {
    let k = conc.len();
    if gamma_draws.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} draws for {} concentrations",
            gamma_draws.len(),
            k
        )));
    }
    let total: f64 = gamma_draws.iter().sum();
    let mut jac = vec![0.0; k * k];
    for col in 0..k {
        let alpha = conc[col].max(CONCENTRATION_FLOOR);
        let dg = gamma_shape_grad(alpha, gamma_draws[col]).map_err(|_| Error::NonFinite {
            context: format!("pathwise gradient at component {col}"),
        })?;
        for row in 0..k {
            let z_row = gamma_draws[row] / total;
            let delta = if row == col { 1.0 } else { 0.0 };
            jac[row * k + col] = dg * (delta - z_row) / total;
        }
    }
    Ok(Tensor::new(vec![k, k], jac).expect("square jacobian"))
}

/// Pairwise-product matrix M[s, t] = beta_s * beta_t; entries are
/// proportional to |Cov[z_s, z_t]| at fixed total concentration.
pub fn correlation_matrix(params: &DirichletParams) -> Tensor {
    let beta = params.beta();
    let k = beta.len();
    let mut m = vec![0.0; k * k];
    for s in 0..k {
        for t in 0..k {
            m[s * k + t] = beta[s] * beta[t];
        }
    }
    Tensor::new(vec![k, k], m).expect("square matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn gamma_rejects_bad_shape() {
        let mut rng = stream_rng(0, Stream::Eval, 0);
        assert!(sample_gamma(0.0, &mut rng).is_err());
        assert!(sample_gamma(-1.0, &mut rng).is_err());
    }

    #[test]
    fn gamma_mean_and_variance() {
        let mut rng = stream_rng(11, Stream::Eval, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_gamma(2.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
        assert!((var - 2.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn gamma_tiny_shape_stays_positive() {
        let mut rng = stream_rng(5, Stream::Eval, 0);
        let draws: Vec<f64> = (0..2000).map(|_| sample_gamma(0.01, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|&d| d > 0.0));
        let small = draws.iter().filter(|&&d| d < 1e-3).count();
        // Gamma(0.01) mass concentrates near zero
        assert!(small > draws.len() / 2, "only {small} tiny draws");
    }

    #[test]
    fn dirichlet_symmetric_mean_is_uniform() {
        let params = DirichletParams::from_beta(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut rng = stream_rng(3, Stream::Eval, 0);
        let n = 100_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..n {
            let s = sample_dirichlet(&params, &mut rng).unwrap();
            assert!((s.z.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, z) in acc.iter_mut().zip(&s.z) {
                *a += z;
            }
        }
        for a in acc {
            assert!((a / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn dirichlet_mean_follows_beta_ratio() {
        let params = DirichletParams::from_beta(&[2.0, 1.0, 1.0]).unwrap();
        let mut rng = stream_rng(4, Stream::Eval, 0);
        let n = 100_000;
        let mut acc = vec![0.0; 3];
        for _ in 0..n {
            let s = sample_dirichlet(&params, &mut rng).unwrap();
            for (a, z) in acc.iter_mut().zip(&s.z) {
                *a += z;
            }
        }
        let expect = [0.5, 0.25, 0.25];
        for (a, e) in acc.iter().zip(expect) {
            assert!((a / n as f64 - e).abs() < 0.01);
        }
    }

    #[test]
    fn moment_formulas() {
        let params = DirichletParams::from_beta(&[2.0, 1.0, 1.0]).unwrap();
        let (mean, cov) = moments(&params);
        assert_eq!(mean, vec![0.5, 0.25, 0.25]);
        // Cov[z_1, z_2] = -2 / (16 * 5)
        assert!((cov.data()[1] - (-0.025)).abs() < 1e-15);
        // one-hot limit
        let hot = DirichletParams::from_beta(&[1e6, 1e-6, 1e-6]).unwrap();
        let (m, _) = moments(&hot);
        assert!(m[0] > 0.999_999);
    }

    #[test]
    fn correlation_matrix_arithmetic() {
        let params = DirichletParams::from_beta(&[1.0, 2.0]).unwrap();
        let m = correlation_matrix(&params);
        assert_eq!(m.data(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn pathwise_jacobian_symmetry_k2() {
        // z_1 = G_1 / (G_1 + G_2) forces dz_1/dc_1 = -dz_1/dc_2 when G_1 = G_2
        let jac = pathwise_grad(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let (d11, d12) = (jac.data()[0], jac.data()[1]);
        assert!((d11 + d12).abs() < 1e-12, "{d11} vs {d12}");
        assert!(d11 > 0.0);
    }

    #[test]
    fn draws_are_deterministic_in_seed() {
        let params = DirichletParams::from_beta(&[0.5, 1.5, 3.0]).unwrap();
        let mut r1 = stream_rng(9, Stream::Eval, 1);
        let mut r2 = stream_rng(9, Stream::Eval, 1);
        let a = sample_dirichlet(&params, &mut r1).unwrap();
        let b = sample_dirichlet(&params, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    /// Invert the Gamma CDF at a fixed level by bisection; oracle for the
    /// implicit gradient.
    fn inverse_gamma_cdf(alpha: f64, u: f64) -> f64 {
        let (mut lo, mut hi) = (1e-12, 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma_lr(alpha, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn implicit_gradient_matches_cdf_inversion() {
        for &(alpha, draw) in &[(0.7, 0.3), (1.5, 1.2), (4.0, 3.5), (10.0, 9.0)] {
            let analytic = gamma_shape_grad(alpha, draw).unwrap();
            let u = gamma_lr(alpha, draw);
            let h = 1e-5 * alpha.max(1.0);
            let gp = inverse_gamma_cdf(alpha + h, u);
            let gm = inverse_gamma_cdf(alpha - h, u);
            let fd = (gp - gm) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
            assert!(rel < 1e-4, "alpha={alpha}: analytic {analytic} vs fd {fd}");
        }
    }

    #[test]
    fn pathwise_mean_derivative_matches_analytic() {
        // d E[z_1] / d beta_1 at beta = (2, 1, 1) is (b0 - b1) / b0^2 = 1/8
        let conc = [2.0, 1.0, 1.0];
        let mut rng = stream_rng(21, Stream::Eval, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let (_, draws) = sample_dirichlet_conc(&conc, &mut rng).unwrap();
            let jac = pathwise_grad(&conc, &draws).unwrap();
            let v = jac.data()[0]; // dz_1/dc_1
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - 0.125).abs() < 3.0 * se,
            "estimate {mean} +- {se} vs 0.125"
        );
    }
}
