//! Long-term optimization loop.
//!
//! Each iteration draws a mini-batch of channel samples, refreshes the
//! recursive surrogate accumulators from the unrolled short-term solves and
//! their VJPs (step 1), solves the convex proximal subproblem or its
//! feasibility fallback (step 2), and blends the iterate toward the
//! subproblem solution with a diminishing step (step 3).

use anyhow::{ensure, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::channel::{ChannelSample, ScsiModel};
use crate::qcqp::{
    solve_constrained, solve_minimax, BoxDomain, ConstrainedOutcome, ProxQuadratic, QcqpSettings,
};
use crate::rng::{derive_seed, stream, SeedDomain};
use crate::unfold::{record_and_solve, vjp_power, vjp_rate};

/// Diminishing step-size rule `min(1, scale / (offset + t)^exponent)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepSchedule {
    pub scale: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl StepSchedule {
    /// Surrogate-averaging schedule used in the experiments:
    /// `2 / (2 + t)^0.9`, clipped into (0, 1].
    pub fn default_rho() -> Self {
        Self {
            scale: 2.0,
            offset: 2.0,
            exponent: 0.9,
        }
    }

    /// Iterate-blending schedule `2 / (2 + t)`, clipped into (0, 1].
    pub fn default_gamma() -> Self {
        Self {
            scale: 2.0,
            offset: 2.0,
            exponent: 1.0,
        }
    }

    pub fn value(&self, t: usize) -> f64 {
        (self.scale / (self.offset + t as f64).powf(self.exponent)).min(1.0)
    }
}

/// Both step sizes at iteration `t`, clipped into (0, 1]. The stated
/// formulas exceed 1 at t = 0, so the clip realizes the required range.
pub fn step_sizes(t: usize, rho: &StepSchedule, gamma: &StepSchedule) -> (f64, f64) {
    (rho.value(t), gamma.value(t))
}

/// Configuration of the long-term loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongTermConfig {
    /// Mini-batch size B.
    pub batch_size: usize,
    /// Short-term sweeps J per sample.
    pub inner_iters: usize,
    /// Long-term iterations T.
    pub t_iters: usize,
    /// Proximal weight of every surrogate.
    pub tau: f64,
    pub rho: StepSchedule,
    pub gamma: StepSchedule,
    /// Upper bound of the multiplier box; diagnostic only and must stay
    /// inactive at convergence.
    pub lambda_cap: f64,
    /// Per-user average-rate targets, bits/s/Hz.
    pub rate_targets: Vec<f64>,
    #[serde(skip)]
    pub qcqp: QcqpSettings,
    /// Pins the phase block (multipliers still optimized); used by the
    /// discrete-phase re-run.
    #[serde(skip)]
    pub freeze_theta: Option<DVector<f64>>,
}

impl LongTermConfig {
    pub fn new(rate_targets: Vec<f64>) -> Self {
        Self {
            batch_size: 10,
            inner_iters: 10,
            t_iters: 200,
            tau: 0.01,
            rho: StepSchedule::default_rho(),
            gamma: StepSchedule::default_gamma(),
            lambda_cap: 1e6,
            rate_targets,
            qcqp: QcqpSettings::default(),
            freeze_theta: None,
        }
    }
}

/// Iterate and surrogate accumulators. Index 0 of every accumulator group
/// belongs to the power objective, 1..=K to the rate constraints.
#[derive(Debug, Clone)]
pub struct LongTermState {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Function-value accumulators f_k.
    pub f: Vec<f64>,
    /// Direct phase-gradient accumulators (all-zero for the objective).
    pub g_theta: Vec<DVector<f64>>,
    /// Through-solution phase-gradient accumulators.
    pub g_w: Vec<DVector<f64>>,
    /// Multiplier-gradient accumulators.
    pub g_lambda: Vec<DVector<f64>>,
    pub t: usize,
    pub rho_t: f64,
    pub gamma_t: f64,
}

impl LongTermState {
    pub fn new(theta: DVector<f64>, lambda: DVector<f64>) -> Self {
        let n = theta.len();
        let k = lambda.len();
        Self {
            theta,
            lambda,
            f: vec![0.0; k + 1],
            g_theta: vec![DVector::zeros(n); k + 1],
            g_w: vec![DVector::zeros(n); k + 1],
            g_lambda: vec![DVector::zeros(k); k + 1],
            t: 0,
            rho_t: 1.0,
            gamma_t: 1.0,
        }
    }

    pub fn num_phases(&self) -> usize {
        self.theta.len()
    }

    pub fn num_users(&self) -> usize {
        self.lambda.len()
    }

    /// Stacked (theta, lambda) point.
    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.theta, &self.lambda)
    }
}

pub fn stack(theta: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(theta.len() + lambda.len());
    v.rows_mut(0, theta.len()).copy_from(theta);
    v.rows_mut(theta.len(), lambda.len()).copy_from(lambda);
    v
}

pub fn split(point: &DVector<f64>, n: usize) -> (DVector<f64>, DVector<f64>) {
    (
        point.rows(0, n).into_owned(),
        point.rows(n, point.len() - n).into_owned(),
    )
}

/// Surrogate models at the current expansion point: index 0 the objective,
/// the rest one per rate constraint.
#[derive(Debug, Clone)]
pub struct SurrogateSet {
    pub objective: ProxQuadratic,
    pub constraints: Vec<ProxQuadratic>,
}

struct SampleContribution {
    power: f64,
    rate_gaps: Vec<f64>,
    power_theta: DVector<f64>,
    power_lambda: DVector<f64>,
    rate_direct_theta: Vec<DVector<f64>>,
    rate_through_theta: Vec<DVector<f64>>,
    rate_through_lambda: Vec<DVector<f64>>,
}

/// Step 1: solve the short-term problem on every batch sample at the
/// current iterate, extract VJPs, and fold batch means into the recursive
/// accumulators with weight `rho`. Returns the surrogate set expanded at
/// the current (theta, lambda).
pub fn update_surrogates(
    state: &mut LongTermState,
    batch: &[ChannelSample],
    inner_iters: usize,
    rate_targets: &[f64],
    tau: f64,
    rho: f64,
) -> SurrogateSet {
    assert!(!batch.is_empty());
    let k = state.num_users();
    assert_eq!(rate_targets.len(), k);
    let lambda: Vec<f64> = state.lambda.iter().copied().collect();
    let contributions: Vec<SampleContribution> = batch
        .par_iter()
        .map(|sample| {
            let (sol, tape) =
                record_and_solve(sample, &state.theta, &lambda, rate_targets, inner_iters);
            let pg = vjp_power(&tape);
            let mut rate_gaps = Vec::with_capacity(k);
            let mut rate_direct_theta = Vec::with_capacity(k);
            let mut rate_through_theta = Vec::with_capacity(k);
            let mut rate_through_lambda = Vec::with_capacity(k);
            for user in 0..k {
                rate_gaps.push(rate_targets[user] - sol.rates[user]);
                let rg = vjp_rate(&tape, user);
                rate_direct_theta.push(rg.direct_theta);
                rate_through_theta.push(rg.through.d_theta);
                rate_through_lambda.push(rg.through.d_lambda);
            }
            SampleContribution {
                power: sol.power,
                rate_gaps,
                power_theta: pg.d_theta,
                power_lambda: pg.d_lambda,
                rate_direct_theta,
                rate_through_theta,
                rate_through_lambda,
            }
        })
        .collect();

    let b = batch.len() as f64;
    let n = state.num_phases();
    let mut mean_power = 0.0;
    let mut mean_gap = vec![0.0; k];
    let mut mean_pow_theta: DVector<f64> = DVector::zeros(n);
    let mut mean_pow_lambda: DVector<f64> = DVector::zeros(k);
    let mut mean_dir_theta = vec![DVector::zeros(n); k];
    let mut mean_thr_theta = vec![DVector::zeros(n); k];
    let mut mean_thr_lambda = vec![DVector::zeros(k); k];
    for c in &contributions {
        mean_power += c.power / b;
        mean_pow_theta += &c.power_theta / b;
        mean_pow_lambda += &c.power_lambda / b;
        for user in 0..k {
            mean_gap[user] += c.rate_gaps[user] / b;
            // constraint is R_k - r_k, so rate gradients enter negated
            mean_dir_theta[user] -= &c.rate_direct_theta[user] / b;
            mean_thr_theta[user] -= &c.rate_through_theta[user] / b;
            mean_thr_lambda[user] -= &c.rate_through_lambda[user] / b;
        }
    }

    let keep = 1.0 - rho;
    state.f[0] = keep * state.f[0] + rho * mean_power;
    state.g_w[0] = &state.g_w[0] * keep + mean_pow_theta * rho;
    state.g_lambda[0] = &state.g_lambda[0] * keep + mean_pow_lambda * rho;
    // g_theta[0] stays identically zero: power has no direct phase term.
    for user in 0..k {
        state.f[user + 1] = keep * state.f[user + 1] + rho * mean_gap[user];
        state.g_theta[user + 1] =
            &state.g_theta[user + 1] * keep + &mean_dir_theta[user] * rho;
        state.g_w[user + 1] = &state.g_w[user + 1] * keep + &mean_thr_theta[user] * rho;
        state.g_lambda[user + 1] =
            &state.g_lambda[user + 1] * keep + &mean_thr_lambda[user] * rho;
    }

    surrogates_from_state(state, tau)
}

/// Builds the proximal quadratics from the current accumulators.
pub fn surrogates_from_state(state: &LongTermState, tau: f64) -> SurrogateSet {
    let center = state.stacked();
    let k = state.num_users();
    let objective = ProxQuadratic::new(
        state.f[0],
        stack(&(&state.g_theta[0] + &state.g_w[0]), &state.g_lambda[0]),
        tau,
        center.clone(),
    );
    let constraints = (0..k)
        .map(|user| {
            ProxQuadratic::new(
                state.f[user + 1],
                stack(
                    &(&state.g_theta[user + 1] + &state.g_w[user + 1]),
                    &state.g_lambda[user + 1],
                ),
                tau,
                center.clone(),
            )
        })
        .collect();
    SurrogateSet {
        objective,
        constraints,
    }
}

/// Step 2, main branch: the convex subproblem
/// `min f0_bar s.t. fk_bar <= 0` over the box. `Ok(None)` means infeasible.
pub fn solve_feasible_subproblem(
    surrogates: &SurrogateSet,
    domain: &BoxDomain,
    settings: &QcqpSettings,
) -> Result<Option<DVector<f64>>> {
    match solve_constrained(
        &surrogates.objective,
        &surrogates.constraints,
        domain,
        settings,
    )? {
        ConstrainedOutcome::Optimal { point, .. } => Ok(Some(point)),
        ConstrainedOutcome::Infeasible { .. } => Ok(None),
    }
}

/// Step 2, fallback branch: minimize the largest constraint surrogate to
/// pull the iterate toward feasibility. Always produces a point.
pub fn solve_fallback_subproblem(
    surrogates: &SurrogateSet,
    domain: &BoxDomain,
    settings: &QcqpSettings,
) -> DVector<f64> {
    solve_minimax(&surrogates.constraints, domain, settings).point
}

/// Step 3: convex combination toward the subproblem solution; stays in the
/// box for any gamma in (0, 1].
pub fn smooth_update(
    state: &mut LongTermState,
    theta_bar: &DVector<f64>,
    lambda_bar: &DVector<f64>,
    gamma: f64,
) {
    assert!(gamma > 0.0 && gamma <= 1.0);
    state.theta = &state.theta * (1.0 - gamma) + theta_bar * gamma;
    state.lambda = &state.lambda * (1.0 - gamma) + lambda_bar * gamma;
    for v in state.theta.iter_mut() {
        *v = v.clamp(0.0, TAU);
    }
    for v in state.lambda.iter_mut() {
        *v = v.max(0.0);
    }
    state.t += 1;
}

/// Which branch step 2 took at an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubproblemBranch {
    /// Constrained subproblem solved.
    Feasible,
    /// Constrained subproblem infeasible; minimax fallback used.
    Fallback,
    /// Solver diagnostics forced the fallback.
    FallbackDiagnostic,
}

impl SubproblemBranch {
    pub fn as_u8(self) -> u8 {
        match self {
            SubproblemBranch::Feasible => 0,
            SubproblemBranch::Fallback => 1,
            SubproblemBranch::FallbackDiagnostic => 2,
        }
    }
}

/// Per-iteration trace record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    /// Power-objective accumulator.
    pub f0: f64,
    /// Constraint accumulators (positive = target violated on average).
    pub f_constraints: Vec<f64>,
    pub branch: SubproblemBranch,
    pub gamma: f64,
    pub rho: f64,
    pub wall_ms: u64,
}

/// Result of the long-term loop.
#[derive(Debug, Clone)]
pub struct LongTermRun {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub trace: Vec<TraceRow>,
    pub state: LongTermState,
    pub fallback_iterations: usize,
    pub diagnostic_iterations: usize,
}

/// Wraps phases that landed exactly on the upper box edge back to zero;
/// phases are 2 pi periodic.
pub fn wrap_phases(theta: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(theta.len(), |i, _| {
        if theta[i] >= TAU {
            theta[i] - TAU
        } else {
            theta[i]
        }
    })
}

/// Runs the full long-term optimization. Deterministic in
/// (model, config, master_seed); mini-batch samples are derived per
/// iteration and sample index, so parallel execution cannot reorder
/// randomness.
pub fn optimize_long_term(
    scsi: &ScsiModel,
    cfg: &LongTermConfig,
    master_seed: u64,
) -> Result<LongTermRun> {
    scsi.validate()?;
    let n = scsi.dims.n();
    let k = scsi.dims.k;
    ensure!(cfg.rate_targets.len() == k, "rate target count mismatch");
    ensure!(cfg.t_iters >= 1 && cfg.batch_size >= 1 && cfg.inner_iters >= 1);

    let theta0 = match &cfg.freeze_theta {
        Some(frozen) => {
            ensure!(frozen.len() == n, "frozen phase vector length mismatch");
            frozen.clone()
        }
        None => {
            let mut rng = stream(master_seed, SeedDomain::Init, 0, 0);
            crate::channel::random_phases(n, &mut rng)
        }
    };
    let lambda0 = DVector::from_element(k, 1.0);
    let mut state = LongTermState::new(theta0, lambda0);

    let domain = match &cfg.freeze_theta {
        Some(frozen) => {
            let mut lower = DVector::zeros(n + k);
            let mut upper = DVector::from_element(n + k, cfg.lambda_cap);
            for i in 0..n {
                lower[i] = frozen[i];
                upper[i] = frozen[i];
            }
            BoxDomain::new(lower, upper)
        }
        None => BoxDomain::for_long_term(n, k, cfg.lambda_cap),
    };

    let mut trace = Vec::with_capacity(cfg.t_iters);
    let mut fallback_iterations = 0;
    let mut diagnostic_iterations = 0;
    for t in 0..cfg.t_iters {
        let started = std::time::Instant::now();
        let (rho, gamma) = step_sizes(t, &cfg.rho, &cfg.gamma);
        state.rho_t = rho;
        state.gamma_t = gamma;
        let batch: Vec<ChannelSample> = (0..cfg.batch_size)
            .map(|j| {
                scsi.sample_seeded(derive_seed(master_seed, SeedDomain::Train, t as u64, j as u64))
            })
            .collect();
        let surr = update_surrogates(
            &mut state,
            &batch,
            cfg.inner_iters,
            &cfg.rate_targets,
            cfg.tau,
            rho,
        );
        let (point, branch) = match solve_feasible_subproblem(&surr, &domain, &cfg.qcqp) {
            Ok(Some(point)) => (point, SubproblemBranch::Feasible),
            Ok(None) => {
                fallback_iterations += 1;
                (
                    solve_fallback_subproblem(&surr, &domain, &cfg.qcqp),
                    SubproblemBranch::Fallback,
                )
            }
            Err(_) => {
                diagnostic_iterations += 1;
                (
                    solve_fallback_subproblem(&surr, &domain, &cfg.qcqp),
                    SubproblemBranch::FallbackDiagnostic,
                )
            }
        };
        let (theta_bar, lambda_bar) = split(&point, n);
        smooth_update(&mut state, &theta_bar, &lambda_bar, gamma);
        trace.push(TraceRow {
            t,
            f0: state.f[0],
            f_constraints: state.f[1..].to_vec(),
            branch,
            gamma,
            rho,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    let cap_margin = cfg.lambda_cap * (1.0 - 1e-9);
    assert!(
        state.lambda.iter().all(|l| *l < cap_margin),
        "multiplier cap {} active at convergence; raise lambda_cap",
        cfg.lambda_cap
    );
    Ok(LongTermRun {
        theta: wrap_phases(&state.theta),
        lambda: state.lambda.clone(),
        trace,
        state,
        fallback_iterations,
        diagnostic_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{LosRatios, PathLossParams, ScsiModel, SystemDims};
    use crate::wmmse::{solve_short_term, ShortTermProblem};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(beta: f64) -> ScsiModel {
        let params = PathLossParams {
            c0_db: -30.0,
            alpha_au: 3.6,
            alpha_ai: 2.2,
            alpha_iu: 2.2,
            ap_position: [2.0, 0.0, 0.0],
            irs_position: [0.0, 50.0, 3.0],
            d_a: 0.5,
            d_i: 0.125,
            f_c: 5e9,
        };
        ScsiModel::from_geometry(
            SystemDims::new(2, 2, 2, 2).unwrap(),
            &params,
            &[[3.0, 49.0, 0.0], [1.0, 52.0, 0.0]],
            LosRatios {
                ap_irs: beta,
                ap_user: 0.0,
                irs_user: beta,
            },
            4,
            &[1e-11, 1e-11],
            3,
        )
        .unwrap()
    }

    #[test]
    fn step_size_values_and_ratio() {
        let rho = StepSchedule::default_rho();
        let gamma = StepSchedule::default_gamma();
        let (r0, g0) = step_sizes(0, &rho, &gamma);
        assert_eq!(r0, 1.0); // 2 / 2^0.9 = 1.0718 clipped
        assert_eq!(g0, 1.0);
        let (r2, g2) = step_sizes(2, &rho, &gamma);
        assert_relative_eq!(r2, 2.0 / 4f64.powf(0.9), max_relative = 1e-12);
        assert_relative_eq!(g2, 0.5, max_relative = 1e-12);
        // gamma/rho = (2 + t)^{-0.1} decays toward zero
        let ratio = |t: usize| {
            let (r, g) = step_sizes(t, &rho, &gamma);
            g / r
        };
        assert_relative_eq!(ratio(10_000), (2.0 + 10_000.0f64).powf(-0.1), max_relative = 1e-10);
        assert_relative_eq!(ratio(10_000), 0.398_084, max_relative = 1e-5);
        assert!(ratio(10_000) < ratio(100));
        assert!(ratio(100_000_000) < ratio(10_000));
        assert!((0.0..=1.0).contains(&ratio(0)));
    }

    #[test]
    fn first_update_equals_pure_batch_mean() {
        let model = tiny_model(0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = crate::channel::random_phases(4, &mut rng);
        let mut state = LongTermState::new(theta.clone(), DVector::from_element(2, 1.0));
        let batch: Vec<_> = (0..3).map(|j| model.sample_seeded(100 + j)).collect();
        let targets = [1.5, 1.5];
        // rho = 1: accumulators equal the plain batch means
        update_surrogates(&mut state, &batch, 4, &targets, 0.01, 1.0);
        let mut want_power = 0.0;
        for s in &batch {
            let prob = ShortTermProblem::from_sample(s, &theta, &[1.0, 1.0], &targets);
            want_power += solve_short_term(&prob, 4, None).power / 3.0;
        }
        assert_relative_eq!(state.f[0], want_power, max_relative = 1e-12);
        assert!(state.g_theta[0].amax() == 0.0);
    }

    #[test]
    fn recursion_geometry_on_identical_batches() {
        let model = tiny_model(0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = crate::channel::random_phases(4, &mut rng);
        let batch: Vec<_> = (0..2).map(|j| model.sample_seeded(200 + j)).collect();
        let targets = [1.5, 1.5];
        let mut state = LongTermState::new(theta.clone(), DVector::from_element(2, 1.0));
        update_surrogates(&mut state, &batch, 4, &targets, 0.01, 0.5);
        let after_one = state.f[0];
        update_surrogates(&mut state, &batch, 4, &targets, 0.01, 0.5);
        // (1 - 0.5) * 0.5 m + 0.5 m = 0.75 m
        assert_relative_eq!(state.f[0], 1.5 * after_one, max_relative = 1e-12);
    }

    #[test]
    fn surrogate_value_and_curvature_at_expansion_point() {
        let model = tiny_model(0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = crate::channel::random_phases(4, &mut rng);
        let mut state = LongTermState::new(theta, DVector::from_element(2, 1.0));
        let batch: Vec<_> = (0..2).map(|j| model.sample_seeded(300 + j)).collect();
        let surr = update_surrogates(&mut state, &batch, 4, &[1.0, 1.0], 0.02, 1.0);
        let center = state.stacked();
        assert_relative_eq!(surr.objective.eval(&center), state.f[0], max_relative = 1e-14);
        for (i, c) in surr.constraints.iter().enumerate() {
            assert_relative_eq!(c.eval(&center), state.f[i + 1], max_relative = 1e-14);
            assert_eq!(c.tau, 0.02);
        }
        // quadratic term coefficient equals tau: f(center + d) - f(center) - lin.d = tau ||d||^2
        let d = DVector::from_fn(6, |i, _| 0.1 * (i as f64 + 1.0));
        let lhs = surr.objective.eval(&(&center + &d))
            - surr.objective.eval(&center)
            - surr.objective.linear.dot(&d);
        assert_relative_eq!(lhs, 0.02 * d.norm_squared(), max_relative = 1e-12);
    }

    #[test]
    fn feasible_subproblem_edge_cases() {
        let n = 3;
        let k = 1;
        let center = DVector::from_fn(n + k, |i, _| 0.5 + i as f64 * 0.3);
        let tau = 0.01;
        let lin = DVector::from_fn(n + k, |i, _| 0.05 * (i as f64 - 1.0));
        let objective = ProxQuadratic::new(1.0, lin.clone(), tau, center.clone());
        let domain = BoxDomain::for_long_term(n, k, 1e6);
        let settings = QcqpSettings::default();

        // constraints deeply satisfied with zero gradients: clipped prox step
        let slack = vec![ProxQuadratic::new(
            -1.0,
            DVector::zeros(n + k),
            tau,
            center.clone(),
        )];
        let surr = SurrogateSet {
            objective: objective.clone(),
            constraints: slack,
        };
        let point = solve_feasible_subproblem(&surr, &domain, &settings)
            .unwrap()
            .expect("feasible");
        let want = domain.clip(&(&center - &lin / (2.0 * tau)));
        assert!((point - want).amax() < 1e-12);

        // constant positive constraint: infeasible
        let bad = vec![ProxQuadratic::new(
            1.0,
            DVector::zeros(n + k),
            tau,
            center.clone(),
        )];
        let surr = SurrogateSet {
            objective,
            constraints: bad,
        };
        assert!(solve_feasible_subproblem(&surr, &domain, &settings)
            .unwrap()
            .is_none());
        // the fallback still produces the prox-minimum of the constraint
        let fb = solve_fallback_subproblem(&surr, &domain, &settings);
        assert!((fb - center).amax() < 1e-9);
    }

    #[test]
    fn smooth_update_blends_and_stays_in_box() {
        let mut state = LongTermState::new(DVector::zeros(3), DVector::from_element(2, 1.0));
        let theta_bar = DVector::from_element(3, std::f64::consts::PI);
        let lambda_bar = DVector::from_vec(vec![3.0, 0.0]);
        smooth_update(&mut state, &theta_bar, &lambda_bar, 1.0);
        assert!((state.theta[0] - std::f64::consts::PI).abs() < 1e-15);
        assert!((state.lambda[0] - 3.0).abs() < 1e-15);

        let mut state = LongTermState::new(DVector::zeros(3), DVector::from_element(2, 1.0));
        smooth_update(&mut state, &theta_bar, &lambda_bar, 0.5);
        assert!((state.theta[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

        // componentwise between endpoints on random pairs
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = DVector::from_fn(4, |_, _| rng.gen::<f64>() * TAU);
            let b = DVector::from_fn(4, |_, _| rng.gen::<f64>() * TAU);
            let g: f64 = rng.gen::<f64>().max(1e-3);
            let mut st = LongTermState::new(a.clone(), DVector::from_element(1, 1.0));
            smooth_update(&mut st, &b, &DVector::from_element(1, 1.0), g);
            for i in 0..4 {
                let lo = a[i].min(b[i]) - 1e-12;
                let hi = a[i].max(b[i]) + 1e-12;
                assert!(st.theta[i] >= lo && st.theta[i] <= hi);
            }
        }
    }

    #[test]
    fn optimizer_is_deterministic_and_stays_in_box() {
        let model = tiny_model(0.6);
        let mut cfg = LongTermConfig::new(vec![1.0, 1.0]);
        cfg.batch_size = 2;
        cfg.inner_iters = 3;
        cfg.t_iters = 12;
        let a = optimize_long_term(&model, &cfg, 5).unwrap();
        let b = optimize_long_term(&model, &cfg, 5).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.trace.len(), 12);
        for (ra, rb) in a.trace.iter().zip(b.trace.iter()) {
            assert_eq!(ra.f0, rb.f0);
            assert_eq!(ra.branch, rb.branch);
        }
        assert!(a.theta.iter().all(|v| (0.0..TAU).contains(v)));
        assert!(a.lambda.iter().all(|v| *v >= 0.0));
        let c = optimize_long_term(&model, &cfg, 6).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn frozen_point_estimates_track_monte_carlo_mean() {
        let model = tiny_model(0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let theta = crate::channel::random_phases(4, &mut rng);
        let lambda = [0.8, 1.2];
        let targets = [1.5, 1.5];
        let inner = 4;
        // Monte-Carlo reference for E[power] at the frozen iterate.
        let mc_draws = 4000;
        let mut mc_power = 0.0;
        for i in 0..mc_draws {
            let s = model.sample_seeded(derive_seed(50, SeedDomain::Eval, i, 0));
            let prob = ShortTermProblem::from_sample(&s, &theta, &lambda, &targets);
            mc_power += solve_short_term(&prob, inner, None).power / mc_draws as f64;
        }
        let rho = StepSchedule::default_rho();
        let mut err_at_50 = Vec::new();
        let mut err_at_500 = Vec::new();
        for seed in 0..5u64 {
            let mut state =
                LongTermState::new(theta.clone(), DVector::from_vec(lambda.to_vec()));
            let mut e50 = f64::NAN;
            for t in 0..500 {
                let batch: Vec<_> = (0..4)
                    .map(|j| {
                        model.sample_seeded(derive_seed(seed, SeedDomain::Train, t as u64, j))
                    })
                    .collect();
                update_surrogates(&mut state, &batch, inner, &targets, 0.01, rho.value(t));
                if t == 49 {
                    e50 = (state.f[0] - mc_power).abs();
                }
            }
            let e500 = (state.f[0] - mc_power).abs();
            // estimates settle within 2% of the Monte-Carlo mean
            assert!(
                e500 < 0.02 * mc_power,
                "seed {seed}: f0 {} vs MC {mc_power}",
                state.f[0]
            );
            err_at_50.push(e50);
            err_at_500.push(e500);
        }
        let mean50: f64 = err_at_50.iter().sum::<f64>() / 5.0;
        let mean500: f64 = err_at_500.iter().sum::<f64>() / 5.0;
        assert!(
            mean500 < mean50,
            "estimate error did not shrink: {mean50} -> {mean500}"
        );
    }

    #[test]
    fn final_iterate_short_term_residual_shrinks_with_more_sweeps() {
        let model = tiny_model(0.6);
        let mut cfg = LongTermConfig::new(vec![1.0, 1.0]);
        cfg.batch_size = 2;
        cfg.inner_iters = 4;
        cfg.t_iters = 60;
        let run = optimize_long_term(&model, &cfg, 11).unwrap();
        let lambda: Vec<f64> = run.lambda.iter().copied().collect();
        let mut res5 = Vec::new();
        let mut res50 = Vec::new();
        for i in 0..100 {
            let s = model.sample_seeded(derive_seed(11, SeedDomain::Eval, i, 0));
            let prob = ShortTermProblem::from_sample(&s, &run.theta, &lambda, &cfg.rate_targets);
            res5.push(crate::wmmse::kkt_residual(
                &prob,
                &solve_short_term(&prob, 5, None).w,
            ));
            res50.push(crate::wmmse::kkt_residual(
                &prob,
                &solve_short_term(&prob, 50, None).w,
            ));
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(median(&mut res50) < median(&mut res5));
    }

    #[test]
    fn frozen_theta_pins_the_phase_block() {
        let model = tiny_model(0.6);
        let frozen = DVector::from_vec(vec![0.3, 1.2, 4.0, 5.5]);
        let mut cfg = LongTermConfig::new(vec![1.0, 1.0]);
        cfg.batch_size = 2;
        cfg.inner_iters = 3;
        cfg.t_iters = 10;
        cfg.freeze_theta = Some(frozen.clone());
        let run = optimize_long_term(&model, &cfg, 21).unwrap();
        assert_eq!(run.theta, frozen);
        assert!(run.lambda.iter().all(|l| *l >= 0.0));
    }

    #[test]
    fn wrap_maps_upper_edge_to_zero() {
        let theta = DVector::from_vec(vec![0.0, TAU, TAU - 1e-12, 3.0]);
        let wrapped = wrap_phases(&theta);
        assert_eq!(wrapped[0], 0.0);
        assert_eq!(wrapped[1], 0.0);
        assert!(wrapped[2] < TAU);
        assert_eq!(wrapped[3], 3.0);
    }
}
