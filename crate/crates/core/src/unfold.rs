//! Reverse-mode differentiation of the unrolled WMMSE solve.
//!
//! The J sweeps of the short-term solver form a J-layer computation graph
//! whose parameters are the phase shifts and the multipliers. Recording a
//! tape during the forward pass and back-propagating cotangents through the
//! three sub-layer updates (receive scalars, MSE weights, beamformers)
//! yields vector-Jacobian products of any real scalar of `w^J` with respect
//! to theta and lambda, at the cost of one extra pass per scalar.
//!
//! Cotangent convention: for a complex intermediate `z`, the stored
//! cotangent `zbar` satisfies `dS = Re(zbar^H dz)`; real intermediates carry
//! plain derivatives. All differentiated outputs are real scalars of the
//! real parameters, so no holomorphy assumptions are needed.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};
use num_complex::Complex64;
use std::f64::consts::LN_2;

use crate::channel::ChannelSample;
use crate::wmmse::{
    inner_products, solve_short_term, solve_with_observer, ShortTermProblem, ShortTermSolution,
};
use crate::{CMatrix, CVector};

/// Sub-layer record: MMSE receive update.
#[derive(Debug, Clone)]
pub struct ReceiveRecord {
    /// s[(k, j)] = h_k^H w_j with the layer's input beamformers.
    pub s: CMatrix,
    pub d: Vec<f64>,
    pub u: Vec<Complex64>,
}

/// Sub-layer record: MSE weight update.
#[derive(Debug, Clone)]
pub struct WeightRecord {
    pub e: Vec<f64>,
    pub q: Vec<f64>,
}

/// Sub-layer record: beamformer update.
#[derive(Debug, Clone)]
pub struct BeamformRecord {
    pub alpha: Vec<Complex64>,
    pub beta: Vec<f64>,
    pub chol: Cholesky<Complex64, Dyn>,
    pub x: Vec<CVector>,
    pub w_out: Vec<CVector>,
}

/// One unrolled iteration: three sub-layer records.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub receive: ReceiveRecord,
    pub weight: WeightRecord,
    pub beamform: BeamformRecord,
}

impl LayerRecord {
    /// Number of sub-layer records per layer (receive, weight, beamformer).
    pub const SUB_LAYERS: usize = 3;
}

/// Recorded computation graph of one short-term solve. Read-only after
/// recording; every reverse pass borrows it immutably.
#[derive(Debug, Clone)]
pub struct WmmseTape {
    /// Effective channels at the recording point.
    pub h_eff: Vec<CVector>,
    /// Per-user coupling V_k (M x N): column n is conj(G[n, :]) * h_r,k[n],
    /// so that h_k(theta) = V_k e^{-j theta} + h_d,k.
    pub coupling: Vec<CMatrix>,
    /// Multipliers in the bits/s/Hz domain.
    pub lambda: Vec<f64>,
    /// Multipliers scaled by 1/ln 2 (as used inside the updates).
    pub lambda_nat: Vec<f64>,
    pub rate_targets: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub theta: DVector<f64>,
    /// Matched-filter initialization and its normalization total.
    pub w0: Vec<CVector>,
    pub norm_total: f64,
    pub layers: Vec<LayerRecord>,
    pub w_final: Vec<CVector>,
    /// Inner products h_k^H w_j at the final beamformers.
    pub s_final: CMatrix,
}

/// Accumulated VJP results for one output scalar.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_theta: DVector<f64>,
    pub d_lambda: DVector<f64>,
}

/// Through-solution and direct parts of a rate gradient. The total
/// theta-gradient of `r_k(theta, w^J(theta, lambda))` is
/// `direct_theta + through.d_theta`; the lambda-gradient is
/// `through.d_lambda`.
#[derive(Debug, Clone)]
pub struct RateGradients {
    pub through: GradientBundle,
    pub direct_theta: DVector<f64>,
}

/// Per-user coupling matrices of the effective channel's dependence on the
/// phase vector.
pub fn coupling_matrices(sample: &ChannelSample) -> Vec<CMatrix> {
    let (m, n, k) = sample.dims();
    (0..k)
        .map(|user| {
            DMatrix::from_fn(m, n, |row, col| {
                sample.g[(col, row)].conj() * sample.h_r[user][col]
            })
        })
        .collect()
}

/// Projects effective-channel cotangents onto the phase vector:
/// `epsbar = sum_k V_k^H hbar_k`, then
/// `thetabar_n = Re(conj(epsbar_n) * (-j e^{-j theta_n}))`.
pub fn theta_pullback(
    coupling: &[CMatrix],
    theta: &DVector<f64>,
    hbar: &[CVector],
) -> DVector<f64> {
    let n = theta.len();
    let mut epsbar: CVector = DVector::zeros(n);
    for (v, hb) in coupling.iter().zip(hbar.iter()) {
        epsbar += v.ad_mul(hb);
    }
    DVector::from_fn(n, |i, _| {
        let deps = Complex64::new(0.0, -1.0) * Complex64::from_polar(1.0, -theta[i]);
        (epsbar[i].conj() * deps).re
    })
}

/// Runs the short-term solver while recording the tape. Numerics are
/// identical to [`solve_short_term`] because both run the same observed
/// code path.
pub fn record_and_solve(
    sample: &ChannelSample,
    theta: &DVector<f64>,
    lambda: &[f64],
    rate_targets: &[f64],
    iters: usize,
) -> (ShortTermSolution, WmmseTape) {
    let prob = ShortTermProblem::from_sample(sample, theta, lambda, rate_targets);
    let mut layers: Vec<LayerRecord> = Vec::with_capacity(iters);
    let mut w0: Vec<CVector> = Vec::new();
    let sol = solve_with_observer(&prob, iters, None, |view| {
        if view.iteration == 0 {
            w0 = view.w_in.to_vec();
        }
        layers.push(LayerRecord {
            receive: ReceiveRecord {
                s: view.s.clone(),
                d: view.d.to_vec(),
                u: view.u.to_vec(),
            },
            weight: WeightRecord {
                e: view.e.to_vec(),
                q: view.q.to_vec(),
            },
            beamform: BeamformRecord {
                alpha: view.alpha.to_vec(),
                beta: view.beta.to_vec(),
                chol: view.chol.clone(),
                x: view.x.to_vec(),
                w_out: view.w_out.to_vec(),
            },
        });
    });
    let norm_total: f64 = prob.h_eff.iter().map(|h| h.norm_squared()).sum();
    let s_final = inner_products(&prob.h_eff, &sol.w);
    let tape = WmmseTape {
        h_eff: prob.h_eff.clone(),
        coupling: coupling_matrices(sample),
        lambda: prob.lambda.clone(),
        lambda_nat: prob.lambda_nat(),
        rate_targets: prob.rate_targets.clone(),
        sigma2: prob.sigma2.clone(),
        theta: theta.clone(),
        w0,
        norm_total,
        layers,
        w_final: sol.w.clone(),
        s_final,
    };
    (sol, tape)
}

impl WmmseTape {
    pub fn num_users(&self) -> usize {
        self.h_eff.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.h_eff[0].len()
    }

    pub fn num_phases(&self) -> usize {
        self.theta.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Re-runs the recorded forward pass from the stored inputs. Bit-exact
    /// with respect to the stored `w_final` because the same code path is
    /// executed on the same inputs.
    pub fn replay(&self) -> Vec<CVector> {
        let prob = ShortTermProblem {
            h_eff: self.h_eff.clone(),
            lambda: self.lambda.clone(),
            rate_targets: self.rate_targets.clone(),
            sigma2: self.sigma2.clone(),
        };
        solve_short_term(&prob, self.layers.len(), None).w
    }

    /// Stored size in f64 equivalents (complex entries count twice); grows
    /// linearly with the number of layers.
    pub fn num_scalars(&self) -> usize {
        let (m, k) = (self.num_antennas(), self.num_users());
        let n = self.num_phases();
        let fixed = 2 * k * m          // h_eff
            + 2 * k * m * n            // coupling
            + 4 * k                    // lambda, lambda_nat, targets, sigma2
            + n                        // theta
            + 2 * k * m                // w0
            + 1                        // norm_total
            + 2 * k * m                // w_final
            + 2 * k * k; // s_final
        let per_layer = 2 * k * k      // s
            + k                        // d
            + 2 * k                    // u
            + 2 * k                    // e, q
            + 2 * k + k                // alpha, beta
            + 2 * m * m                // cholesky factor
            + 2 * k * m                // x
            + 2 * k * m; // w_out
        fixed + per_layer * self.layers.len()
    }

    fn w_in_of_layer(&self, layer: usize) -> &[CVector] {
        if layer == 0 {
            &self.w0
        } else {
            &self.layers[layer - 1].beamform.w_out
        }
    }
}

/// Back-propagates an arbitrary cotangent on the final beamformers through
/// all recorded layers and the matched-filter initialization, returning the
/// gradients with respect to theta and lambda. `wbar` holds one cotangent
/// vector per user with `dS = sum_k Re(wbar_k^H dw_k^J)`.
///
/// Full Jacobians, when needed for verification, fall out of this by
/// seeding unit cotangents.
pub fn vjp_from_wbar(tape: &WmmseTape, wbar: &[CVector]) -> GradientBundle {
    let k = tape.num_users();
    let m = tape.num_antennas();
    assert_eq!(wbar.len(), k);

    let mut wbar: Vec<CVector> = wbar.to_vec();
    let mut hbar: Vec<CVector> = vec![DVector::zeros(m); k];
    let mut lnat_bar = vec![0.0f64; k];

    for layer_idx in (0..tape.num_layers()).rev() {
        let layer = &tape.layers[layer_idx];
        let rec = &layer.receive;
        let wt = &layer.weight;
        let bf = &layer.beamform;
        let w_in = tape.w_in_of_layer(layer_idx);

        // Beamformer sub-layer: w_k = alpha_k x_k, x_k = A^{-1} h_k,
        // A = I + sum_j beta_j h_j h_j^H. Inverse pullback uses
        // d(A^{-1}) = -A^{-1} dA A^{-1} against the stored factorization.
        let mut alpha_bar = vec![Complex64::new(0.0, 0.0); k];
        let mut abar: CMatrix = DMatrix::zeros(m, m);
        for i in 0..k {
            alpha_bar[i] = bf.x[i].dotc(&wbar[i]);
            let xbar = &wbar[i] * bf.alpha[i].conj();
            let y = bf.chol.solve(&xbar);
            hbar[i] += &y;
            // abar -= y x^H
            for col in 0..m {
                let f = bf.x[i][col].conj();
                for row in 0..m {
                    abar[(row, col)] -= y[row] * f;
                }
            }
        }
        let abar_sym = &abar + abar.adjoint();
        let mut beta_bar = vec![0.0f64; k];
        for j in 0..k {
            let ah = &abar * &tape.h_eff[j];
            beta_bar[j] = tape.h_eff[j].dotc(&ah).re;
            if bf.beta[j] != 0.0 {
                hbar[j] += &abar_sym * &tape.h_eff[j] * Complex64::from(bf.beta[j]);
            }
        }

        // Coefficient pullbacks: alpha_k = l_k q_k u_k, beta_k = l_k q_k |u_k|^2.
        let mut qbar = vec![0.0f64; k];
        let mut ubar = vec![Complex64::new(0.0, 0.0); k];
        for i in 0..k {
            let l = tape.lambda_nat[i];
            let q = wt.q[i];
            let u = rec.u[i];
            let re_au = (alpha_bar[i].conj() * u).re;
            lnat_bar[i] += q * re_au + beta_bar[i] * q * u.norm_sqr();
            qbar[i] = l * re_au + beta_bar[i] * l * u.norm_sqr();
            ubar[i] = alpha_bar[i] * Complex64::from(l * q)
                + u * Complex64::from(2.0 * beta_bar[i] * l * q);
        }

        // Weight sub-layer: q = 1/e.
        let ebar: Vec<f64> = (0..k).map(|i| -qbar[i] * wt.q[i] * wt.q[i]).collect();

        // MSE formula: e_k = |u_k^* s_kk - 1|^2 + sum_{j!=k} |u_k^* s_kj|^2
        // + sigma_k^2 |u_k|^2.
        let mut sbar: CMatrix = DMatrix::zeros(k, k);
        for row in 0..k {
            let u = rec.u[row];
            let two_e = 2.0 * ebar[row];
            for j in 0..k {
                let t = u.conj() * rec.s[(row, j)];
                let g = if j == row {
                    t - Complex64::new(1.0, 0.0)
                } else {
                    t
                };
                ubar[row] += g.conj() * rec.s[(row, j)] * Complex64::from(two_e);
                sbar[(row, j)] += g * u * Complex64::from(two_e);
            }
            ubar[row] += u * Complex64::from(two_e * tape.sigma2[row]);
        }

        // Receive sub-layer: u_k = s_kk / d_k, d_k = sum_j |s_kj|^2 + sigma^2.
        for row in 0..k {
            sbar[(row, row)] += ubar[row] / Complex64::from(rec.d[row]);
            let cd = -(ubar[row].conj() * rec.u[row]).re / rec.d[row];
            for j in 0..k {
                sbar[(row, j)] += rec.s[(row, j)] * Complex64::from(2.0 * cd);
            }
        }

        // Inner products: s_kj = h_k^H w_in_j.
        let mut wbar_prev: Vec<CVector> = vec![DVector::zeros(m); k];
        for row in 0..k {
            for j in 0..k {
                let sb = sbar[(row, j)];
                if sb.norm_sqr() == 0.0 {
                    continue;
                }
                hbar[row] += &w_in[j] * sb.conj();
                wbar_prev[j] += &tape.h_eff[row] * sb;
            }
        }
        wbar = wbar_prev;
    }

    // Matched-filter initialization: w0_k = c h_k, c = sqrt(K / T),
    // T = sum_j ||h_j||^2.
    let c = (k as f64 / tape.norm_total).sqrt();
    let mut cbar = 0.0;
    for i in 0..k {
        cbar += wbar[i].dotc(&tape.h_eff[i]).re;
        hbar[i] += &wbar[i] * Complex64::from(c);
    }
    let tbar = -cbar * c / (2.0 * tape.norm_total);
    for i in 0..k {
        hbar[i] += &tape.h_eff[i] * Complex64::from(2.0 * tbar);
    }

    let d_theta = theta_pullback(&tape.coupling, &tape.theta, &hbar);
    let d_lambda = DVector::from_fn(k, |i, _| lnat_bar[i] / LN_2);
    GradientBundle { d_theta, d_lambda }
}

/// Gradients of the total transmit power `sum_k ||w_k^J||^2` with respect
/// to theta (through the solve only; power has no direct phase dependence)
/// and lambda.
pub fn vjp_power(tape: &WmmseTape) -> GradientBundle {
    let wbar: Vec<CVector> = tape
        .w_final
        .iter()
        .map(|w| w * Complex64::from(2.0))
        .collect();
    vjp_from_wbar(tape, &wbar)
}

/// Cotangent row on the final inner products for user `k`'s rate
/// (bits/s/Hz): `dS = sum_j Re(sbar_j^H ds_kj)`.
fn rate_inner_cotangents(s_final: &CMatrix, sigma2: &[f64], user: usize) -> Vec<Complex64> {
    let k = sigma2.len();
    let denom: f64 = (0..k)
        .filter(|j| *j != user)
        .map(|j| s_final[(user, j)].norm_sqr())
        .sum::<f64>()
        + sigma2[user];
    let gamma = s_final[(user, user)].norm_sqr() / denom;
    let c_r = 1.0 / ((1.0 + gamma) * LN_2);
    (0..k)
        .map(|j| {
            if j == user {
                s_final[(user, j)] * Complex64::from(2.0 * c_r / denom)
            } else {
                s_final[(user, j)] * Complex64::from(-2.0 * c_r * gamma / denom)
            }
        })
        .collect()
}

/// Gradients of user `k`'s achievable rate at the solved beamformers. The
/// through-solution part back-propagates `dr_k/dw` through all layers; the
/// direct part differentiates the SINR's own channel dependence with the
/// beamformers held fixed.
pub fn vjp_rate(tape: &WmmseTape, user: usize) -> RateGradients {
    let k = tape.num_users();
    let m = tape.num_antennas();
    assert!(user < k);
    let sbar = rate_inner_cotangents(&tape.s_final, &tape.sigma2, user);

    // Direct part: only h_k appears in r_k; s_kj = h_k^H w_j with w fixed.
    let mut hbar_direct: Vec<CVector> = vec![DVector::zeros(m); k];
    for j in 0..k {
        hbar_direct[user] += &tape.w_final[j] * sbar[j].conj();
    }
    let direct_theta = theta_pullback(&tape.coupling, &tape.theta, &hbar_direct);

    // Through-solution part: seed the beamformer cotangents.
    let wbar: Vec<CVector> = (0..k).map(|j| &tape.h_eff[user] * sbar[j]).collect();
    let through = vjp_from_wbar(tape, &wbar);
    RateGradients {
        through,
        direct_theta,
    }
}

/// Forward evaluation used by finite-difference checks: power and per-user
/// rates of the J-sweep solve at the given parameters.
pub fn forward_scalars(
    sample: &ChannelSample,
    theta: &DVector<f64>,
    lambda: &[f64],
    rate_targets: &[f64],
    iters: usize,
) -> (f64, Vec<f64>) {
    let prob = ShortTermProblem::from_sample(sample, theta, lambda, rate_targets);
    let sol = solve_short_term(&prob, iters, None);
    (sol.power, sol.rates)
}

/// One row of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub instance: usize,
    pub quantity: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Finite-difference verification of every VJP on seeded synthetic
/// instances.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Relative error with a floor guarding near-zero gradients.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every VJP (power and all rates, over theta and lambda) against
/// central finite differences on seeded synthetic instances. Differences
/// use both step sizes 1e-4 and 1e-5 and keep the smaller error per
/// coordinate (truncation aware).
pub fn gradcheck_suite(
    instances: usize,
    m: usize,
    n: usize,
    k: usize,
    iters: usize,
    tolerance: f64,
    master_seed: u64,
) -> GradcheckReport {
    use crate::rng::{derive_seed, SeedDomain};
    use rand::{Rng, SeedableRng};

    let mut rows = Vec::new();
    for inst in 0..instances {
        let seed = derive_seed(master_seed, SeedDomain::Gradcheck, inst as u64, 1);
        let sample = crate::channel::synthetic_sample(m, n, k, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let theta = DVector::from_fn(n, |_, _| rng.gen::<f64>() * std::f64::consts::TAU);
        let lambda: Vec<f64> = (0..k).map(|_| 0.5 + 1.5 * rng.gen::<f64>()).collect();
        let targets: Vec<f64> = vec![2.0; k];

        let (_, tape) = record_and_solve(&sample, &theta, &lambda, &targets, iters);
        let power_grad = vjp_power(&tape);
        let rate_grads: Vec<RateGradients> = (0..k).map(|u| vjp_rate(&tape, u)).collect();

        // quantity index 0 = power, 1..=k = rates
        let analytic_theta: Vec<DVector<f64>> = std::iter::once(power_grad.d_theta.clone())
            .chain(
                rate_grads
                    .iter()
                    .map(|g| &g.direct_theta + &g.through.d_theta),
            )
            .collect();
        let analytic_lambda: Vec<DVector<f64>> = std::iter::once(power_grad.d_lambda.clone())
            .chain(rate_grads.iter().map(|g| g.through.d_lambda.clone()))
            .collect();

        let scalars_at = |theta: &DVector<f64>, lambda: &[f64]| -> Vec<f64> {
            let (p, r) = forward_scalars(&sample, theta, lambda, &targets, iters);
            std::iter::once(p).chain(r).collect()
        };
        let mut theta_errs = vec![0.0f64; k + 1];
        let mut lambda_errs = vec![0.0f64; k + 1];
        for coord in 0..n {
            let mut best: Vec<f64> = vec![f64::INFINITY; k + 1];
            for h in [1e-4, 1e-5] {
                let mut tp = theta.clone();
                tp[coord] = theta[coord] + h;
                let up = scalars_at(&tp, &lambda);
                tp[coord] = theta[coord] - h;
                let dn = scalars_at(&tp, &lambda);
                for q in 0..=k {
                    let fd = (up[q] - dn[q]) / (2.0 * h);
                    best[q] = best[q].min(rel_err(analytic_theta[q][coord], fd));
                }
            }
            for q in 0..=k {
                theta_errs[q] = theta_errs[q].max(best[q]);
            }
        }
        for coord in 0..k {
            let mut best: Vec<f64> = vec![f64::INFINITY; k + 1];
            for h in [1e-4, 1e-5] {
                let mut lp = lambda.clone();
                lp[coord] = lambda[coord] + h;
                let up = scalars_at(&theta, &lp);
                lp[coord] = lambda[coord] - h;
                let dn = scalars_at(&theta, &lp);
                for q in 0..=k {
                    let fd = (up[q] - dn[q]) / (2.0 * h);
                    best[q] = best[q].min(rel_err(analytic_lambda[q][coord], fd));
                }
            }
            for q in 0..=k {
                lambda_errs[q] = lambda_errs[q].max(best[q]);
            }
        }
        for q in 0..=k {
            let name = if q == 0 {
                "power".to_string()
            } else {
                format!("rate_{q}")
            };
            rows.push(GradcheckRow {
                instance: inst,
                quantity: format!("{name}/theta"),
                max_rel_err: theta_errs[q],
                pass: theta_errs[q] <= tolerance,
            });
            rows.push(GradcheckRow {
                instance: inst,
                quantity: format!("{name}/lambda"),
                max_rel_err: lambda_errs[q],
                pass: lambda_errs[q] <= tolerance,
            });
        }
    }
    GradcheckReport { rows, tolerance }
}
