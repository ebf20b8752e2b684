//! Short-term active beamforming.
//!
//! For fixed phase shifts and multipliers, the per-slot subproblem
//! minimizes `sum_k ||w_k||^2 + sum_k lambda_k (R_k - r_k)` over the
//! beamformers. The weighted-MMSE reformulation introduces receive scalars
//! `u_k` and weights `q_k`, and block-coordinate descent on (u, q, w) is run
//! for a fixed number of sweeps so the computation graph has a static shape.
//!
//! Rates are in bits/s/Hz throughout; the MMSE identity holds in natural
//! log, so the inner updates weight the MSE terms by `lambda / ln 2`.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

use crate::channel::{effective_channel, ChannelSample};
use crate::{CMatrix, CVector};

/// Per-slot problem data.
#[derive(Debug, Clone)]
pub struct ShortTermProblem {
    /// Effective channel per user, length M.
    pub h_eff: Vec<CVector>,
    /// Rate-constraint multipliers (bits/s/Hz domain), nonnegative.
    pub lambda: Vec<f64>,
    /// Rate targets in bits/s/Hz (only enter the reported objective).
    pub rate_targets: Vec<f64>,
    /// Noise power per user, watts.
    pub sigma2: Vec<f64>,
}

impl ShortTermProblem {
    pub fn from_sample(
        sample: &ChannelSample,
        theta: &DVector<f64>,
        lambda: &[f64],
        rate_targets: &[f64],
    ) -> Self {
        let h_eff = effective_channel(sample, theta);
        Self {
            h_eff,
            lambda: lambda.to_vec(),
            rate_targets: rate_targets.to_vec(),
            sigma2: sample.noise_vars.clone(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.h_eff.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.h_eff[0].len()
    }

    /// Multipliers converted to the natural-log domain used by the updates.
    pub fn lambda_nat(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l / LN_2).collect()
    }

    pub fn assert_valid(&self) {
        let k = self.num_users();
        assert!(k >= 1);
        assert_eq!(self.lambda.len(), k);
        assert_eq!(self.rate_targets.len(), k);
        assert_eq!(self.sigma2.len(), k);
        let m = self.num_antennas();
        assert!(self.h_eff.iter().all(|h| h.len() == m));
        assert!(self.lambda.iter().all(|l| *l >= 0.0));
        assert!(self.sigma2.iter().all(|s| *s > 0.0));
    }
}

/// Output of one solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShortTermSolution {
    #[serde(skip)]
    pub w: Vec<CVector>,
    #[serde(skip)]
    pub u: Vec<Complex64>,
    pub q: Vec<f64>,
    pub e: Vec<f64>,
    pub sinr: Vec<f64>,
    /// Achievable rates at the returned beamformers, bits/s/Hz.
    pub rates: Vec<f64>,
    /// Total transmit power, watts.
    pub power: f64,
    /// Value of the per-slot objective including the `sum lambda_k R_k`
    /// constant (reporting form).
    pub objective: f64,
}

/// Everything one BCD sweep produced, lent to an observer. `w_in` is the
/// beamformer set the sweep started from (inner products `s` refer to it),
/// `w_out` the set it produced.
pub struct LayerView<'a> {
    pub iteration: usize,
    /// s[(k, j)] = h_k^H w_in_j.
    pub s: &'a CMatrix,
    /// Interference-plus-noise denominators of the u update.
    pub d: &'a [f64],
    pub u: &'a [Complex64],
    pub e: &'a [f64],
    pub q: &'a [f64],
    /// Complex coefficients alpha_k = lambda'_k q_k u_k.
    pub alpha: &'a [Complex64],
    /// Real loadings beta_k = lambda'_k q_k |u_k|^2.
    pub beta: &'a [f64],
    /// Cholesky factor of A = I + sum_j beta_j h_j h_j^H.
    pub chol: &'a Cholesky<Complex64, Dyn>,
    /// x_k = A^{-1} h_k.
    pub x: &'a [CVector],
    pub w_in: &'a [CVector],
    pub w_out: &'a [CVector],
}

/// Matched-filter initialization `w_k = c h_k` with the common scale chosen
/// so the initial total power equals K watts; smooth in the channels, which
/// keeps the unrolled solve differentiable.
pub fn matched_filter_init(h_eff: &[CVector]) -> Vec<CVector> {
    let k = h_eff.len();
    let total: f64 = h_eff.iter().map(|h| h.norm_squared()).sum();
    let c = (k as f64 / total).sqrt();
    h_eff.iter().map(|h| h * Complex64::from(c)).collect()
}

/// Inner products s[(k, j)] = h_k^H w_j.
pub fn inner_products(h_eff: &[CVector], w: &[CVector]) -> CMatrix {
    let k = h_eff.len();
    DMatrix::from_fn(k, k, |row, col| h_eff[row].dotc(&w[col]))
}

/// MMSE receive scalars u_k = h_k^H w_k / (sum_j |h_k^H w_j|^2 + sigma_k^2).
pub fn update_u(prob: &ShortTermProblem, w: &[CVector]) -> Vec<Complex64> {
    let s = inner_products(&prob.h_eff, w);
    update_u_from_inner(prob, &s).0
}

pub(crate) fn update_u_from_inner(
    prob: &ShortTermProblem,
    s: &CMatrix,
) -> (Vec<Complex64>, Vec<f64>) {
    let k = prob.num_users();
    let mut u = Vec::with_capacity(k);
    let mut d = Vec::with_capacity(k);
    for row in 0..k {
        let denom: f64 =
            (0..k).map(|j| s[(row, j)].norm_sqr()).sum::<f64>() + prob.sigma2[row];
        d.push(denom);
        u.push(s[(row, row)] / denom);
    }
    (u, d)
}

/// MSE weights q_k = 1/e_k with the per-user MSE under receive scalars u.
pub fn update_q(
    prob: &ShortTermProblem,
    u: &[Complex64],
    w: &[CVector],
) -> (Vec<f64>, Vec<f64>) {
    let s = inner_products(&prob.h_eff, w);
    update_q_from_inner(prob, u, &s)
}

pub(crate) fn update_q_from_inner(
    prob: &ShortTermProblem,
    u: &[Complex64],
    s: &CMatrix,
) -> (Vec<f64>, Vec<f64>) {
    let e = mse_from_inner(prob, u, s);
    let q = e.iter().map(|e_k| 1.0 / e_k).collect();
    (q, e)
}

/// Per-user MSE e_k = |u_k^* s_kk - 1|^2 + sum_{j != k} |u_k^* s_kj|^2
/// + sigma_k^2 |u_k|^2.
pub(crate) fn mse_from_inner(
    prob: &ShortTermProblem,
    u: &[Complex64],
    s: &CMatrix,
) -> Vec<f64> {
    let k = prob.num_users();
    (0..k)
        .map(|row| {
            let uc = u[row].conj();
            let mut e = (uc * s[(row, row)] - Complex64::new(1.0, 0.0)).norm_sqr();
            for j in 0..k {
                if j != row {
                    e += (uc * s[(row, j)]).norm_sqr();
                }
            }
            e + prob.sigma2[row] * u[row].norm_sqr()
        })
        .collect()
}

/// Beamformer update from the first-order condition: one shared M x M
/// Hermitian solve for all users.
pub fn update_w(prob: &ShortTermProblem, u: &[Complex64], q: &[f64]) -> Vec<CVector> {
    update_w_full(prob, u, q).0
}

#[allow(clippy::type_complexity)]
pub(crate) fn update_w_full(
    prob: &ShortTermProblem,
    u: &[Complex64],
    q: &[f64],
) -> (
    Vec<CVector>,
    Vec<Complex64>,
    Vec<f64>,
    Cholesky<Complex64, Dyn>,
    Vec<CVector>,
) {
    let k = prob.num_users();
    let m = prob.num_antennas();
    let lambda_nat = prob.lambda_nat();
    let alpha: Vec<Complex64> = (0..k)
        .map(|i| u[i] * Complex64::from(lambda_nat[i] * q[i]))
        .collect();
    let beta: Vec<f64> = (0..k)
        .map(|i| lambda_nat[i] * q[i] * u[i].norm_sqr())
        .collect();
    let mut a: CMatrix = DMatrix::identity(m, m);
    for (i, b) in beta.iter().enumerate() {
        if *b != 0.0 {
            let h = &prob.h_eff[i];
            // A += beta_i h h^H (Hermitian rank-1)
            for col in 0..m {
                let f = Complex64::from(*b) * h[col].conj();
                for row in 0..m {
                    a[(row, col)] += h[row] * f;
                }
            }
        }
    }
    let chol = Cholesky::new(a).expect("I plus a PSD sum is positive definite");
    let x: Vec<CVector> = prob.h_eff.iter().map(|h| chol.solve(h)).collect();
    let w = (0..k).map(|i| &x[i] * alpha[i]).collect();
    (w, alpha, beta, chol, x)
}

/// SINR and achievable rate (bits/s/Hz) for each user at the given
/// beamformers, from precomputed inner products.
pub fn rates_from_inner(s: &CMatrix, sigma2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = sigma2.len();
    let mut sinr = Vec::with_capacity(k);
    let mut rates = Vec::with_capacity(k);
    for row in 0..k {
        let signal = s[(row, row)].norm_sqr();
        let interference: f64 = (0..k)
            .filter(|j| *j != row)
            .map(|j| s[(row, j)].norm_sqr())
            .sum();
        let g = signal / (interference + sigma2[row]);
        sinr.push(g);
        rates.push((1.0 + g).log2());
    }
    (sinr, rates)
}

/// SINR and per-user rate for a phase vector, beamformer set and channel
/// realization.
pub fn sinr_and_rate(
    theta: &DVector<f64>,
    w: &[CVector],
    sample: &ChannelSample,
) -> (Vec<f64>, Vec<f64>) {
    let h_eff = effective_channel(sample, theta);
    let s = inner_products(&h_eff, w);
    rates_from_inner(&s, &sample.noise_vars)
}

/// Variational objective of the MSE reformulation:
/// `sum ||w||^2 + sum_k (lambda_k / ln 2)(q_k e_k - ln q_k)`.
/// Non-increasing under each of the three block updates.
pub fn equivalent_objective(
    prob: &ShortTermProblem,
    w: &[CVector],
    u: &[Complex64],
    q: &[f64],
) -> f64 {
    let s = inner_products(&prob.h_eff, w);
    let e = mse_from_inner(prob, u, &s);
    let lambda_nat = prob.lambda_nat();
    let power: f64 = w.iter().map(|wk| wk.norm_squared()).sum();
    power
        + lambda_nat
            .iter()
            .zip(q.iter().zip(e.iter()))
            .map(|(l, (qk, ek))| l * (qk * ek - qk.ln()))
            .sum::<f64>()
}

/// Reported per-slot objective: `power + sum lambda_k (R_k - r_k)`.
pub fn lagrangian_objective(prob: &ShortTermProblem, power: f64, rates: &[f64]) -> f64 {
    power
        + prob
            .lambda
            .iter()
            .zip(prob.rate_targets.iter().zip(rates.iter()))
            .map(|(l, (r_t, r))| l * (r_t - r))
            .sum::<f64>()
}

/// Norm of the per-slot objective's gradient with respect to the stacked
/// beamformers (Wirtinger derivative w.r.t. w^*). Measures how far `w` is
/// from stationarity of the per-slot subproblem.
pub fn kkt_residual(prob: &ShortTermProblem, w: &[CVector]) -> f64 {
    let k = prob.num_users();
    let s = inner_products(&prob.h_eff, w);
    let lambda_nat = prob.lambda_nat();
    let mut denom = Vec::with_capacity(k);
    let mut gamma = Vec::with_capacity(k);
    for row in 0..k {
        let interference: f64 = (0..k)
            .filter(|j| *j != row)
            .map(|j| s[(row, j)].norm_sqr())
            .sum();
        let d = interference + prob.sigma2[row];
        denom.push(d);
        gamma.push(s[(row, row)].norm_sqr() / d);
    }
    let mut total = 0.0;
    for j in 0..k {
        let mut grad: CVector = w[j].clone();
        for kk in 0..k {
            let scale = lambda_nat[kk] / ((1.0 + gamma[kk]) * denom[kk]);
            if kk == j {
                grad -= &prob.h_eff[kk] * (s[(kk, kk)] * Complex64::from(scale));
            } else {
                grad += &prob.h_eff[kk] * (s[(kk, j)] * Complex64::from(scale * gamma[kk]));
            }
        }
        total += grad.norm_squared();
    }
    total.sqrt()
}

/// Runs exactly `iters` full (u, q, w) sweeps from the matched-filter
/// initialization (or `w_init`), handing every sweep's intermediates to
/// `observe`. The tape recorder in [`crate::unfold`] and the plain solver
/// share this code path, so their numerics are identical bit for bit.
pub fn solve_with_observer(
    prob: &ShortTermProblem,
    iters: usize,
    w_init: Option<&[CVector]>,
    mut observe: impl FnMut(&LayerView<'_>),
) -> ShortTermSolution {
    prob.assert_valid();
    assert!(iters >= 1, "need at least one sweep");
    let mut w = match w_init {
        Some(init) => {
            assert_eq!(init.len(), prob.num_users());
            init.to_vec()
        }
        None => matched_filter_init(&prob.h_eff),
    };
    for it in 0..iters {
        let s = inner_products(&prob.h_eff, &w);
        let (u_new, d) = update_u_from_inner(prob, &s);
        let (q_new, e_new) = update_q_from_inner(prob, &u_new, &s);
        let (w_new, alpha, beta, chol, x) = update_w_full(prob, &u_new, &q_new);
        observe(&LayerView {
            iteration: it,
            s: &s,
            d: &d,
            u: &u_new,
            e: &e_new,
            q: &q_new,
            alpha: &alpha,
            beta: &beta,
            chol: &chol,
            x: &x,
            w_in: &w,
            w_out: &w_new,
        });
        w = w_new;
    }
    // Reported receive scalars and MSE weights are the optimal responses to
    // the returned beamformers (what a receiver would apply to w^J); the
    // MMSE identity e_k = 1/(1 + SINR_k) then holds exactly.
    let s = inner_products(&prob.h_eff, &w);
    let (u, _) = update_u_from_inner(prob, &s);
    let (q, e) = update_q_from_inner(prob, &u, &s);
    let (sinr, rates) = rates_from_inner(&s, &prob.sigma2);
    let power: f64 = w.iter().map(|wk| wk.norm_squared()).sum();
    let objective = lagrangian_objective(prob, power, &rates);
    ShortTermSolution {
        w,
        u,
        q,
        e,
        sinr,
        rates,
        power,
        objective,
    }
}

/// Plain fixed-sweep WMMSE solve.
pub fn solve_short_term(
    prob: &ShortTermProblem,
    iters: usize,
    w_init: Option<&[CVector]>,
) -> ShortTermSolution {
    solve_with_observer(prob, iters, w_init, |_| {})
}
