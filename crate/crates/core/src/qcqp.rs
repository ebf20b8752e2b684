//! Exact solver for the per-iteration convex subproblems.
//!
//! Objective and constraints are proximal quadratics: a linear term around
//! a shared expansion point plus `tau * ||x - center||^2`. Any nonnegative
//! combination of such functions keeps an identity-scaled Hessian, so the
//! box-constrained inner minimization has a coordinate-wise closed form;
//! the constrained problem is solved through its low-dimensional dual and
//! the feasibility subproblem through concave maximization over the weight
//! simplex.

use anyhow::{bail, Result};
use nalgebra::{DMatrix, DVector};

/// `constant + linear . (x - center) + tau * ||x - center||^2`.
#[derive(Debug, Clone)]
pub struct ProxQuadratic {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub tau: f64,
    pub center: DVector<f64>,
}

impl ProxQuadratic {
    pub fn new(constant: f64, linear: DVector<f64>, tau: f64, center: DVector<f64>) -> Self {
        assert!(tau > 0.0, "proximal weight must be positive");
        assert_eq!(linear.len(), center.len());
        Self {
            constant,
            linear,
            tau,
            center,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.center;
        self.constant + self.linear.dot(&dx) + self.tau * dx.norm_squared()
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let dx = x - &self.center;
        &self.linear + dx * (2.0 * self.tau)
    }
}

/// Per-coordinate bounds.
#[derive(Debug, Clone)]
pub struct BoxDomain {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxDomain {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(
            lower.iter().zip(upper.iter()).all(|(l, u)| l <= u),
            "lower bound exceeds upper bound"
        );
        Self { lower, upper }
    }

    /// Phase coordinates in [0, 2 pi], multipliers in [0, lambda_cap].
    pub fn for_long_term(n_phases: usize, k_users: usize, lambda_cap: f64) -> Self {
        let dim = n_phases + k_users;
        let lower = DVector::zeros(dim);
        let upper = DVector::from_fn(dim, |i, _| {
            if i < n_phases {
                std::f64::consts::TAU
            } else {
                lambda_cap
            }
        });
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clip(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }
}

/// Exact box-constrained minimizer of
/// `objective + sum_i weights[i] * constraints[i]` (objective weight 1 when
/// present). The combination keeps an identity-scaled Hessian, so the
/// minimizer is the clipped unconstrained stationary point.
pub fn inner_argmin(
    objective: Option<&ProxQuadratic>,
    weights: &[f64],
    constraints: &[ProxQuadratic],
    domain: &BoxDomain,
) -> DVector<f64> {
    assert_eq!(weights.len(), constraints.len());
    let dim = domain.dim();
    let mut curvature = 0.0;
    let mut num: DVector<f64> = DVector::zeros(dim);
    if let Some(obj) = objective {
        curvature += obj.tau;
        num += &obj.center * (2.0 * obj.tau) - &obj.linear;
    }
    for (w, c) in weights.iter().zip(constraints.iter()) {
        debug_assert!(*w >= 0.0);
        if *w > 0.0 {
            curvature += w * c.tau;
            num += (&c.center * (2.0 * c.tau) - &c.linear) * *w;
        }
    }
    assert!(
        curvature > 0.0,
        "all-zero effective curvature: give the objective or a positive weight"
    );
    domain.clip(&(num / (2.0 * curvature)))
}

/// Solver tolerances. Defaults match the subproblem accuracy the long-term
/// loop relies on; all fields are adjustable.
#[derive(Debug, Clone)]
pub struct QcqpSettings {
    /// Primal feasibility threshold (also the infeasibility decision level).
    pub feas_tol: f64,
    /// Complementary-slackness threshold |mu_k * f_k|.
    pub comp_tol: f64,
    /// Stationarity residual threshold (projected-gradient norm).
    pub stat_tol: f64,
    /// Duality-gap target of the minimax solver.
    pub minimax_gap_tol: f64,
    pub max_dual_iters: usize,
    pub max_minimax_iters: usize,
}

impl Default for QcqpSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-9,
            comp_tol: 1e-8,
            stat_tol: 1e-8,
            minimax_gap_tol: 1e-11,
            max_dual_iters: 20_000,
            max_minimax_iters: 50_000,
        }
    }
}

/// Outcome of the constrained subproblem.
#[derive(Debug, Clone)]
pub enum ConstrainedOutcome {
    Optimal {
        point: DVector<f64>,
        multipliers: DVector<f64>,
    },
    /// No point in the box satisfies every constraint; carries the minimax
    /// certificate.
    Infeasible { minimax: MinimaxSolution },
}

/// Result of minimizing the pointwise maximum of the constraints.
#[derive(Debug, Clone)]
pub struct MinimaxSolution {
    pub point: DVector<f64>,
    /// max_k f_k at `point`.
    pub value: f64,
    /// Optimal simplex weights of the dual.
    pub weights: DVector<f64>,
    /// Remaining primal-dual gap.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &val) in sorted.iter().enumerate() {
        cumsum += val;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if val - t > 0.0 {
            theta = t;
        }
    }
    DVector::from_fn(n, |i, _| (v[i] - theta).max(0.0))
}

/// Minimizes `max_k constraints[k]` over the box by maximizing the concave
/// dual `psi(w) = min_x sum_k w_k f_k(x)` over the weight simplex with
/// projected gradient ascent and an Armijo backtracking line search.
/// Always returns a point; `converged` reports whether the primal-dual gap
/// met the tolerance within the iteration budget.
pub fn solve_minimax(
    constraints: &[ProxQuadratic],
    domain: &BoxDomain,
    settings: &QcqpSettings,
) -> MinimaxSolution {
    assert!(!constraints.is_empty(), "need at least one constraint");
    let kc = constraints.len();
    let primal_max = |x: &DVector<f64>| {
        constraints
            .iter()
            .map(|c| c.eval(x))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    if kc == 1 {
        let x = inner_argmin(None, &[1.0], constraints, domain);
        return MinimaxSolution {
            value: primal_max(&x),
            point: x,
            weights: DVector::from_element(1, 1.0),
            gap: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let psi = |w: &DVector<f64>| -> (DVector<f64>, DVector<f64>, f64) {
        let x = inner_argmin(None, w.as_slice(), constraints, domain);
        let vals = DVector::from_fn(kc, |i, _| constraints[i].eval(&x));
        let value = w.dot(&vals);
        (x, vals, value)
    };
    let mut w = DVector::from_element(kc, 1.0 / kc as f64);
    let (mut x, mut vals, mut psi_w) = psi(&w);
    let mut best = MinimaxSolution {
        value: primal_max(&x),
        point: x.clone(),
        weights: w.clone(),
        gap: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    let mut step = 1.0;
    let scale = vals.amax().max(1.0);
    for iter in 0..settings.max_minimax_iters {
        let primal = primal_max(&x);
        if primal < best.value {
            best.value = primal;
            best.point = x.clone();
            best.weights = w.clone();
        }
        let gap = primal - psi_w;
        best.gap = gap;
        best.iterations = iter;
        if gap <= settings.minimax_gap_tol * scale {
            best.converged = true;
            break;
        }
        // Armijo backtracking along the projected ascent direction.
        let mut accepted = false;
        let mut t = step;
        for _ in 0..60 {
            let cand = project_simplex(&(&w + &vals * t));
            let dir = &cand - &w;
            if dir.amax() == 0.0 {
                break;
            }
            let (cx, cvals, cpsi) = psi(&cand);
            if cpsi >= psi_w + 1e-4 * vals.dot(&dir) {
                w = cand;
                x = cx;
                vals = cvals;
                psi_w = cpsi;
                step = (t * 2.0).min(1e6);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No ascent direction improves: at a kink optimum.
            best.converged = gap <= settings.minimax_gap_tol.max(1e-12) * scale * 10.0
                || gap <= f64::EPSILON * scale * 64.0;
            break;
        }
    }
    best
}

/// KKT quality of a primal-dual pair.
#[derive(Debug, Clone)]
pub struct KktReport {
    /// Norm of the projected Lagrangian gradient.
    pub stationarity: f64,
    /// max(0, max_k f_k).
    pub feasibility: f64,
    /// max_k |mu_k f_k|.
    pub complementarity: f64,
    pub dual_feasible: bool,
}

pub fn kkt_report(
    objective: &ProxQuadratic,
    constraints: &[ProxQuadratic],
    domain: &BoxDomain,
    x: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktReport {
    let mut grad = objective.grad(x);
    for (m, c) in mu.iter().zip(constraints.iter()) {
        grad += c.grad(x) * *m;
    }
    let projected = domain.clip(&(x - &grad));
    let stationarity = (x - projected).norm();
    let feasibility = constraints
        .iter()
        .map(|c| c.eval(x))
        .fold(0.0f64, |acc, v| acc.max(v));
    let complementarity = mu
        .iter()
        .zip(constraints.iter())
        .map(|(m, c)| (m * c.eval(x)).abs())
        .fold(0.0f64, f64::max);
    KktReport {
        stationarity,
        feasibility,
        complementarity,
        dual_feasible: mu.iter().all(|m| *m >= 0.0),
    }
}

/// Lagrangian dual value `g(mu) = min_x f_0 + mu . f` over the box.
pub fn dual_value(
    objective: &ProxQuadratic,
    constraints: &[ProxQuadratic],
    domain: &BoxDomain,
    mu: &DVector<f64>,
) -> f64 {
    let x = inner_argmin(Some(objective), mu.as_slice(), constraints, domain);
    objective.eval(&x)
        + mu.iter()
            .zip(constraints.iter())
            .map(|(m, c)| m * c.eval(&x))
            .sum::<f64>()
}

/// Solves `min f_0 s.t. f_k <= 0` over the box. Infeasibility is decided by
/// the minimax value exceeding `feas_tol`; otherwise the dual is maximized
/// by projected gradient ascent with periodic Newton polish on the active
/// set until the KKT thresholds hold.
pub fn solve_constrained(
    objective: &ProxQuadratic,
    constraints: &[ProxQuadratic],
    domain: &BoxDomain,
    settings: &QcqpSettings,
) -> Result<ConstrainedOutcome> {
    let kc = constraints.len();
    if kc == 0 {
        return Ok(ConstrainedOutcome::Optimal {
            point: inner_argmin(Some(objective), &[], &[], domain),
            multipliers: DVector::zeros(0),
        });
    }
    // Unconstrained prox step wins when it is already feasible.
    let x_unc = inner_argmin(Some(objective), &vec![0.0; kc], constraints, domain);
    if constraints.iter().all(|c| c.eval(&x_unc) <= 0.0) {
        return Ok(ConstrainedOutcome::Optimal {
            point: x_unc,
            multipliers: DVector::zeros(kc),
        });
    }
    let minimax = solve_minimax(constraints, domain, settings);
    if minimax.value > settings.feas_tol {
        return Ok(ConstrainedOutcome::Infeasible { minimax });
    }

    let eval_at = |mu: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let x = inner_argmin(Some(objective), mu.as_slice(), constraints, domain);
        let vals = DVector::from_fn(kc, |i, _| constraints[i].eval(&x));
        (x, vals)
    };
    let dual = |mu: &DVector<f64>, vals: &DVector<f64>, x: &DVector<f64>| -> f64 {
        objective.eval(x) + mu.dot(vals)
    };

    let mut mu: DVector<f64> = DVector::zeros(kc);
    let (mut x, mut vals) = eval_at(&mu);
    let mut g = dual(&mu, &vals, &x);
    let mut step = 1.0;
    for iter in 0..settings.max_dual_iters {
        let feas = vals.iter().fold(0.0f64, |acc, v| acc.max(*v));
        let comp = mu
            .iter()
            .zip(vals.iter())
            .map(|(m, v)| (m * v).abs())
            .fold(0.0f64, f64::max);
        if feas <= settings.feas_tol && comp <= settings.comp_tol {
            return Ok(ConstrainedOutcome::Optimal {
                point: x,
                multipliers: mu,
            });
        }
        // Newton polish on the active set every few iterations.
        if iter % 8 == 4 {
            if let Some((mu_p, x_p, vals_p)) = newton_polish(&mu, &eval_at, settings, kc) {
                let g_p = dual(&mu_p, &vals_p, &x_p);
                if g_p >= g - 1e-12 * g.abs().max(1.0) {
                    mu = mu_p;
                    x = x_p;
                    vals = vals_p;
                    g = g_p;
                    continue;
                }
            }
        }
        // Projected gradient ascent with Armijo backtracking.
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = DVector::from_fn(kc, |i, _| (mu[i] + t * vals[i]).max(0.0));
            let dir = &cand - &mu;
            if dir.amax() == 0.0 {
                break;
            }
            let (cx, cvals) = eval_at(&cand);
            let cg = dual(&cand, &cvals, &cx);
            if cg >= g + 1e-4 * vals.dot(&dir) {
                mu = cand;
                x = cx;
                vals = cvals;
                g = cg;
                step = (t * 2.0).min(1e9);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Gradient steps exhausted; force a Newton polish before giving up.
            match newton_polish(&mu, &eval_at, settings, kc) {
                Some((mu_p, x_p, vals_p)) => {
                    mu = mu_p;
                    x = x_p;
                    vals = vals_p;
                    g = dual(&mu, &vals, &x);
                }
                None => break,
            }
        }
    }
    let feas = vals.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let comp = mu
        .iter()
        .zip(vals.iter())
        .map(|(m, v)| (m * v).abs())
        .fold(0.0f64, f64::max);
    if feas <= settings.feas_tol && comp <= settings.comp_tol {
        return Ok(ConstrainedOutcome::Optimal {
            point: x,
            multipliers: mu,
        });
    }
    let report = kkt_report(objective, constraints, domain, &x, &mu);
    bail!(
        "dual ascent did not reach the KKT tolerances: stationarity {:.2e}, \
         feasibility {:.2e}, complementarity {:.2e}",
        report.stationarity,
        report.feasibility,
        report.complementarity
    )
}

/// Semismooth Newton step on the active constraints: solves
/// `f_A(x(mu)) = 0` with a finite-difference Jacobian in the dual variable.
#[allow(clippy::type_complexity)]
fn newton_polish(
    mu: &DVector<f64>,
    eval_at: &impl Fn(&DVector<f64>) -> (DVector<f64>, DVector<f64>),
    settings: &QcqpSettings,
    kc: usize,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let mut mu = mu.clone();
    let (mut x, mut vals) = eval_at(&mu);
    for _ in 0..40 {
        let active: Vec<usize> = (0..kc)
            .filter(|&i| mu[i] > 0.0 || vals[i] > -settings.comp_tol)
            .collect();
        if active.is_empty() {
            break;
        }
        let feas = vals.iter().fold(0.0f64, |acc, v| acc.max(*v));
        let comp = mu
            .iter()
            .zip(vals.iter())
            .map(|(m, v)| (m * v).abs())
            .fold(0.0f64, f64::max);
        if feas <= settings.feas_tol && comp <= settings.comp_tol {
            return Some((mu, x, vals));
        }
        let na = active.len();
        let mut jac = DMatrix::zeros(na, na);
        for (col, &b) in active.iter().enumerate() {
            let h = 1e-7 * mu[b].abs().max(1.0);
            let mut up = mu.clone();
            up[b] += h;
            let (_, vu) = eval_at(&up);
            let mut dn = mu.clone();
            dn[b] = (dn[b] - h).max(0.0);
            let actual_h = up[b] - dn[b];
            let (_, vd) = eval_at(&dn);
            for (row, &a) in active.iter().enumerate() {
                jac[(row, col)] = (vu[a] - vd[a]) / actual_h;
            }
        }
        let f_a = DVector::from_fn(na, |i, _| vals[active[i]]);
        let delta = jac.lu().solve(&(-&f_a))?;
        let mut improved = false;
        let mut damping = 1.0;
        let base_norm = f_a.norm();
        for _ in 0..20 {
            let mut cand = mu.clone();
            for (i, &a) in active.iter().enumerate() {
                cand[a] = (cand[a] + damping * delta[i]).max(0.0);
            }
            let (cx, cvals) = eval_at(&cand);
            let cand_norm = DVector::from_fn(na, |i, _| {
                let a = active[i];
                if cand[a] > 0.0 {
                    cvals[a]
                } else {
                    cvals[a].max(0.0)
                }
            })
            .norm();
            if cand_norm < base_norm * (1.0 - 1e-4 * damping) || cand_norm < settings.feas_tol {
                mu = cand;
                x = cx;
                vals = cvals;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if !improved {
            return None;
        }
    }
    let feas = vals.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let comp = mu
        .iter()
        .zip(vals.iter())
        .map(|(m, v)| (m * v).abs())
        .fold(0.0f64, f64::max);
    if feas <= settings.feas_tol && comp <= settings.comp_tol {
        Some((mu, x, vals))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_quad(dim: usize, rng: &mut ChaCha8Rng, center: &DVector<f64>) -> ProxQuadratic {
        ProxQuadratic::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0),
            0.05 + rng.gen::<f64>(),
            center.clone(),
        )
    }

    #[test]
    fn inner_argmin_zero_linear_returns_center() {
        let center = DVector::from_vec(vec![1.0, 2.0]);
        let obj = ProxQuadratic::new(0.3, DVector::zeros(2), 0.5, center.clone());
        let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 4.0));
        let x = inner_argmin(Some(&obj), &[], &[], &domain);
        assert_eq!(x, center);
    }

    #[test]
    fn inner_argmin_one_dimensional_calculus() {
        // min c + l (x - x0) + tau (x - x0)^2 => x = x0 - l / (2 tau), clipped
        let obj = ProxQuadratic::new(
            0.0,
            DVector::from_vec(vec![3.0]),
            0.5,
            DVector::from_vec(vec![1.0]),
        );
        let domain = BoxDomain::new(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![10.0]));
        let x = inner_argmin(Some(&obj), &[], &[], &domain);
        assert!((x[0] - 0.0).abs() < 1e-15); // unclipped would be 1 - 3 = -2
        let domain = BoxDomain::new(
            DVector::from_vec(vec![-10.0]),
            DVector::from_vec(vec![10.0]),
        );
        let x = inner_argmin(Some(&obj), &[], &[], &domain);
        assert!((x[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn inner_argmin_matches_projected_gradient_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dim = 5;
            let center = DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0);
            let obj = rand_quad(dim, &mut rng, &center);
            let cons: Vec<ProxQuadratic> =
                (0..3).map(|_| rand_quad(dim, &mut rng, &center)).collect();
            let weights: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let domain = BoxDomain::new(
                DVector::from_element(dim, 0.0),
                DVector::from_element(dim, 2.5),
            );
            let exact = inner_argmin(Some(&obj), &weights, &cons, &domain);
            // slow projected-gradient reference
            let mut x = center.clone();
            let total_tau =
                obj.tau + weights.iter().zip(&cons).map(|(w, c)| w * c.tau).sum::<f64>();
            let step = 0.4 / total_tau;
            for _ in 0..20_000 {
                let mut g = obj.grad(&x);
                for (w, c) in weights.iter().zip(&cons) {
                    g += c.grad(&x) * *w;
                }
                x = domain.clip(&(&x - &g * step));
            }
            assert!(
                (&x - &exact).amax() < 1e-8,
                "pg reference differs: {:?}",
                (&x - &exact).amax()
            );
        }
    }

    #[test]
    fn constrained_inactive_equals_prox_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let center = DVector::from_vec(vec![1.0, 1.0]);
        let obj = rand_quad(2, &mut rng, &center);
        // constraint that is satisfied everywhere in the box
        let cons = vec![ProxQuadratic::new(
            -100.0,
            DVector::zeros(2),
            0.1,
            center.clone(),
        )];
        let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 2.0));
        let out = solve_constrained(&obj, &cons, &domain, &QcqpSettings::default()).unwrap();
        match out {
            ConstrainedOutcome::Optimal { point, multipliers } => {
                let prox = inner_argmin(Some(&obj), &[0.0], &cons, &domain);
                assert_eq!(point, prox);
                assert_eq!(multipliers[0], 0.0);
            }
            _ => panic!("expected optimal"),
        }
    }

    #[test]
    fn constant_positive_constraint_is_infeasible() {
        let center = DVector::from_vec(vec![0.5, 0.5]);
        let obj = ProxQuadratic::new(0.0, DVector::zeros(2), 1.0, center.clone());
        let cons = vec![ProxQuadratic::new(
            1.0,
            DVector::zeros(2),
            0.5,
            center.clone(),
        )];
        let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 1.0));
        let out = solve_constrained(&obj, &cons, &domain, &QcqpSettings::default()).unwrap();
        match out {
            ConstrainedOutcome::Infeasible { minimax } => {
                // minimum of 1 + 0.5 ||x - c||^2 is 1 at the center
                assert!((minimax.value - 1.0).abs() < 1e-9);
                assert!((minimax.point - center).amax() < 1e-6);
            }
            _ => panic!("expected infeasible"),
        }
    }

    #[test]
    fn single_active_constraint_matches_hand_kkt() {
        // objective: 2 (x1 - 1) + ||x - (1,1)||^2
        // constraint: -1 - (x1 - 1) + 0.5 ||x - (1,1)||^2 <= 0
        // hand solution: x = (2 - sqrt(3), 1), mu = 2 (2 - sqrt(3)) / sqrt(3)
        let center = DVector::from_vec(vec![1.0, 1.0]);
        let obj = ProxQuadratic::new(0.0, DVector::from_vec(vec![2.0, 0.0]), 1.0, center.clone());
        let cons = vec![ProxQuadratic::new(
            -1.0,
            DVector::from_vec(vec![-1.0, 0.0]),
            0.5,
            center.clone(),
        )];
        let domain = BoxDomain::new(
            DVector::zeros(2),
            DVector::from_element(2, std::f64::consts::TAU),
        );
        let settings = QcqpSettings::default();
        let out = solve_constrained(&obj, &cons, &domain, &settings).unwrap();
        match out {
            ConstrainedOutcome::Optimal { point, multipliers } => {
                let x1 = 2.0 - 3.0f64.sqrt();
                let mu = 2.0 * (2.0 - 3.0f64.sqrt()) / 3.0f64.sqrt();
                assert!((point[0] - x1).abs() < 1e-8, "x1 {} vs {}", point[0], x1);
                assert!((point[1] - 1.0).abs() < 1e-8);
                assert!(
                    (multipliers[0] - mu).abs() < 1e-6,
                    "mu {} vs {}",
                    multipliers[0],
                    mu
                );
                let rep = kkt_report(&obj, &cons, &domain, &point, &multipliers);
                assert!(rep.stationarity <= settings.stat_tol);
                assert!(rep.feasibility <= settings.feas_tol);
                assert!(rep.complementarity <= settings.comp_tol);
                assert!(rep.dual_feasible);
            }
            _ => panic!("expected optimal"),
        }
    }

    #[test]
    fn minimax_trivial_cases() {
        let center = DVector::from_vec(vec![1.0, 1.0]);
        let c1 = ProxQuadratic::new(0.2, DVector::from_vec(vec![0.7, -0.3]), 0.4, center.clone());
        let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 2.0));
        let settings = QcqpSettings::default();
        // one constraint: plain prox minimization
        let one = solve_minimax(std::slice::from_ref(&c1), &domain, &settings);
        let prox = inner_argmin(None, &[1.0], std::slice::from_ref(&c1), &domain);
        assert!((&one.point - &prox).amax() < 1e-12);
        // duplicated constraint behaves like one
        let two = solve_minimax(&[c1.clone(), c1.clone()], &domain, &settings);
        assert!((two.value - one.value).abs() < 1e-9);

        // mirrored linear terms: optimum at the expansion point
        let mirrored = [
            ProxQuadratic::new(0.1, DVector::from_vec(vec![0.9, -0.2]), 0.3, center.clone()),
            ProxQuadratic::new(0.1, DVector::from_vec(vec![-0.9, 0.2]), 0.3, center.clone()),
        ];
        let sym = solve_minimax(&mirrored, &domain, &settings);
        assert!(
            (&sym.point - &center).amax() < 1e-6,
            "point {:?}",
            sym.point
        );
        assert!((sym.value - 0.1).abs() < 1e-9);
    }

    #[test]
    fn minimax_matches_fine_grid_in_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let settings = QcqpSettings::default();
        for trial in 0..10 {
            let center = DVector::from_fn(2, |_, _| 0.4 + rng.gen::<f64>() * 0.8);
            let cons: Vec<ProxQuadratic> = (0..2 + trial % 2)
                .map(|_| rand_quad(2, &mut rng, &center))
                .collect();
            let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 2.0));
            let sol = solve_minimax(&cons, &domain, &settings);
            // dense grid oracle, step 1e-3
            let steps = 2000;
            let mut best = f64::INFINITY;
            for i in 0..=steps {
                for j in 0..=steps {
                    let x = DVector::from_vec(vec![
                        2.0 * i as f64 / steps as f64,
                        2.0 * j as f64 / steps as f64,
                    ]);
                    let v = cons
                        .iter()
                        .map(|c| c.eval(&x))
                        .fold(f64::NEG_INFINITY, f64::max);
                    best = best.min(v);
                }
            }
            assert!(
                (sol.value - best).abs() < 1e-5,
                "trial {trial}: {} vs grid {}",
                sol.value,
                best
            );
        }
    }

    #[test]
    fn constrained_matches_fine_grid_in_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let settings = QcqpSettings::default();
        let mut optimal_seen = 0;
        for trial in 0..12 {
            let center = DVector::from_fn(2, |_, _| 0.4 + rng.gen::<f64>() * 0.8);
            let obj = rand_quad(2, &mut rng, &center);
            let cons: Vec<ProxQuadratic> = (0..2)
                .map(|_| {
                    let mut c = rand_quad(2, &mut rng, &center);
                    c.constant -= 0.3; // bias toward feasibility
                    c
                })
                .collect();
            let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 2.0));
            let out = solve_constrained(&obj, &cons, &domain, &settings).unwrap();
            // dense grid oracle, step 1e-3
            let steps = 2000;
            let mut best = f64::INFINITY;
            for i in 0..=steps {
                for j in 0..=steps {
                    let x = DVector::from_vec(vec![
                        2.0 * i as f64 / steps as f64,
                        2.0 * j as f64 / steps as f64,
                    ]);
                    if cons.iter().all(|c| c.eval(&x) <= 0.0) {
                        best = best.min(obj.eval(&x));
                    }
                }
            }
            match out {
                ConstrainedOutcome::Optimal { point, multipliers } => {
                    optimal_seen += 1;
                    assert!(
                        obj.eval(&point) - best < 1e-5 && best - obj.eval(&point) < 1e-3,
                        "trial {trial}: {} vs grid {best}",
                        obj.eval(&point)
                    );
                    let rep = kkt_report(&obj, &cons, &domain, &point, &multipliers);
                    assert!(rep.stationarity <= settings.stat_tol);
                    assert!(rep.feasibility <= settings.feas_tol);
                    assert!(rep.complementarity <= settings.comp_tol);
                }
                ConstrainedOutcome::Infeasible { minimax } => {
                    assert!(
                        best.is_infinite(),
                        "solver infeasible but grid found a point"
                    );
                    assert!(minimax.value > settings.feas_tol);
                }
            }
        }
        assert!(optimal_seen >= 6, "too few feasible trials: {optimal_seen}");
    }

    #[test]
    fn feasibility_decision_is_consistent_with_minimax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let settings = QcqpSettings::default();
        for _ in 0..30 {
            let center = DVector::from_fn(2, |_, _| rng.gen::<f64>() * 2.0);
            let obj = rand_quad(2, &mut rng, &center);
            let cons: Vec<ProxQuadratic> = (0..2)
                .map(|_| {
                    let mut c = rand_quad(2, &mut rng, &center);
                    c.constant += rng.gen::<f64>() * 0.6 - 0.3;
                    c
                })
                .collect();
            let domain = BoxDomain::new(DVector::zeros(2), DVector::from_element(2, 2.0));
            let mm = solve_minimax(&cons, &domain, &settings);
            let out = solve_constrained(&obj, &cons, &domain, &settings).unwrap();
            match out {
                ConstrainedOutcome::Infeasible { .. } => assert!(mm.value > settings.feas_tol),
                ConstrainedOutcome::Optimal { .. } => {
                    assert!(mm.value <= settings.feas_tol.max(1e-9))
                }
            }
        }
    }

    #[test]
    fn dual_function_is_concave_along_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let center = DVector::from_fn(3, |_, _| rng.gen::<f64>());
        let obj = rand_quad(3, &mut rng, &center);
        let cons: Vec<ProxQuadratic> = (0..3).map(|_| rand_quad(3, &mut rng, &center)).collect();
        let domain = BoxDomain::new(DVector::zeros(3), DVector::from_element(3, 2.0));
        for _ in 0..10 {
            let mu0 = DVector::from_fn(3, |_, _| rng.gen::<f64>() * 0.5);
            let dir = DVector::from_fn(3, |_, _| rng.gen::<f64>());
            let h = 0.05;
            let g = |s: f64| dual_value(&obj, &cons, &domain, &(&mu0 + &dir * s));
            for i in 0..8 {
                let s = i as f64 * h;
                let second = g(s) - 2.0 * g(s + h) + g(s + 2.0 * h);
                assert!(second <= 1e-10, "second difference {second} > 0");
            }
        }
    }
}
