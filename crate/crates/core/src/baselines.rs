//! Benchmark schemes.
//!
//! All three benchmarks pair per-slot minimum-power beamforming under
//! instantaneous SINR targets with a different phase-shift policy: random
//! per-slot phases, long-term sum-rate-maximized phases, or per-slot
//! alternating optimization on instantaneous CSI (a simplified
//! coordinate-update stand-in for the SDR-based method, labelled
//! "ao-simplified" in every output).
//!
//! Minimum-power beamforming is solved through the uplink-downlink duality
//! fixed point: virtual uplink powers converge monotonically, MMSE
//! directions are shared by both problems, and the downlink powers follow
//! from a K x K linear system with equality SINRs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_csi_delay, effective_channel, ChannelSample, ScsiModel};
use crate::cssca::StepSchedule;
use crate::qcqp::{inner_argmin, BoxDomain, ProxQuadratic};
use crate::rng::{derive_seed, stream, SeedDomain};
use crate::unfold::{coupling_matrices, rate_inner_cotangents, theta_pullback};
use crate::wmmse::{inner_products, rates_from_inner, solve_short_term, ShortTermProblem};
use crate::{CMatrix, CVector};

/// Per-user instantaneous SINR targets `2^R - 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinrTargets {
    pub gamma: Vec<f64>,
}

impl SinrTargets {
    pub fn from_rates(rates_bits: &[f64]) -> Self {
        Self {
            gamma: rates_bits.iter().map(|r| 2f64.powf(*r) - 1.0).collect(),
        }
    }
}

/// Feasible minimum-power beamforming solution.
#[derive(Debug, Clone)]
pub struct MinPowerSolution {
    pub w: Vec<CVector>,
    /// Total downlink power, watts.
    pub power: f64,
    /// Virtual uplink powers of the dual fixed point.
    pub uplink_powers: Vec<f64>,
    /// |sum p - sum q| / sum p at convergence.
    pub duality_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum MinPowerOutcome {
    Feasible(MinPowerSolution),
    /// Fixed point diverged: the target set is unreachable.
    Infeasible,
}

const UPLINK_DIVERGENCE_CAP: f64 = 1e12;
const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_MAX_ITERS: usize = 3000;

/// Minimum-power downlink beamforming under per-user SINR floors via the
/// uplink-downlink duality fixed point. The returned beamformers meet
/// every target with equality up to round-off (checked on every call).
pub fn min_power_beamforming(
    h_eff: &[CVector],
    sigma2: &[f64],
    targets: &SinrTargets,
) -> MinPowerOutcome {
    let k = h_eff.len();
    assert_eq!(sigma2.len(), k);
    assert_eq!(targets.gamma.len(), k);
    assert!(targets.gamma.iter().all(|g| *g >= 0.0));
    let m = h_eff[0].len();
    let active: Vec<usize> = (0..k).filter(|i| targets.gamma[*i] > 0.0).collect();
    let mut w = vec![DVector::zeros(m); k];
    if active.is_empty() {
        return MinPowerOutcome::Feasible(MinPowerSolution {
            w,
            power: 0.0,
            uplink_powers: vec![0.0; k],
            duality_gap: 0.0,
            iterations: 0,
        });
    }
    // Noise-normalized channels: unit-noise problem with identical SINRs.
    let g: Vec<CVector> = h_eff
        .iter()
        .zip(sigma2.iter())
        .map(|(h, s)| h / Complex64::from(s.sqrt()))
        .collect();

    // Fixed point q_k <- (gamma/(1+gamma)) / (g_k^H Phi(q)^{-1} g_k).
    let mut q = vec![0.0f64; k];
    let mut iterations = 0;
    let mut dirs: Vec<CVector> = vec![DVector::zeros(m); k];
    loop {
        iterations += 1;
        let mut phi: CMatrix = DMatrix::identity(m, m);
        for &i in &active {
            if q[i] > 0.0 {
                let gi = &g[i];
                for col in 0..m {
                    let f = Complex64::from(q[i]) * gi[col].conj();
                    for row in 0..m {
                        phi[(row, col)] += gi[row] * f;
                    }
                }
            }
        }
        let chol = nalgebra::linalg::Cholesky::new(phi)
            .expect("identity plus PSD is positive definite");
        let mut max_rel = 0.0f64;
        for &i in &active {
            let v = chol.solve(&g[i]);
            let quad = g[i].dotc(&v).re;
            let gamma = targets.gamma[i];
            let next = gamma / (1.0 + gamma) / quad;
            max_rel = max_rel.max((next - q[i]).abs() / next.max(1e-300));
            q[i] = next;
            dirs[i] = v;
        }
        let total: f64 = q.iter().sum();
        if total > UPLINK_DIVERGENCE_CAP {
            return MinPowerOutcome::Infeasible;
        }
        if max_rel < FIXED_POINT_TOL || iterations >= FIXED_POINT_MAX_ITERS {
            if max_rel >= 1e-9 {
                // Neither converged nor blown up within the budget:
                // treat as unreachable.
                return MinPowerOutcome::Infeasible;
            }
            break;
        }
    }

    // Downlink powers: equality SINRs with the normalized MMSE directions.
    let na = active.len();
    let dhat: Vec<CVector> = active.iter().map(|&i| &dirs[i] / dirs[i].norm()).collect();
    let mut mat = DMatrix::zeros(na, na);
    for (row, &i) in active.iter().enumerate() {
        for (col, _) in active.iter().enumerate() {
            let cross = g[i].dotc(&dhat[col]).norm_sqr();
            if row == col {
                mat[(row, col)] = cross / targets.gamma[i];
            } else {
                mat[(row, col)] = -cross;
            }
        }
    }
    let rhs = DVector::from_element(na, 1.0);
    let p = match mat.lu().solve(&rhs) {
        Some(p) if p.iter().all(|v| *v > 0.0) => p,
        _ => return MinPowerOutcome::Infeasible,
    };
    for (idx, &i) in active.iter().enumerate() {
        w[i] = &dhat[idx] * Complex64::from(p[idx].sqrt());
    }
    let power: f64 = p.iter().sum();
    let uplink_total: f64 = q.iter().sum();
    let duality_gap = (power - uplink_total).abs() / power.max(1e-300);

    // Post-check: every target met within tolerance.
    let s = inner_products(h_eff, &w);
    let (sinr, _) = rates_from_inner(&s, sigma2);
    for i in 0..k {
        assert!(
            sinr[i] >= targets.gamma[i] - 1e-6,
            "SINR target missed: {} < {}",
            sinr[i],
            targets.gamma[i]
        );
    }
    MinPowerOutcome::Feasible(MinPowerSolution {
        w,
        power,
        uplink_powers: q,
        duality_gap,
        iterations,
    })
}

/// Slot-level aggregates shared by every scheme. Rates average over
/// feasible slots only; infeasible slots contribute the configured power
/// cap and bump the counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotStats {
    pub slots: usize,
    pub mean_power_w: f64,
    pub mean_rates: Vec<f64>,
    pub worst_user_rate: f64,
    pub infeasible_slots: usize,
}

/// Outdated-CSI evaluation setup. The estimation delay of full-CSI schemes
/// is the effective-channel delay scaled by the dimension ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DelayModel {
    pub omega_ms: f64,
    pub speed_kmh: f64,
    pub f_c: f64,
}

/// Common slot-evaluation knobs.
#[derive(Debug, Clone)]
pub struct SlotEvalConfig {
    pub n_slots: usize,
    /// WMMSE sweeps for the multiplier-based scheme.
    pub inner_iters: usize,
    /// Fresh random-phase retries before declaring a slot infeasible.
    pub retry_limit: usize,
    /// Power recorded for infeasible slots, watts.
    pub infeasible_power_cap_w: f64,
    pub delay: Option<DelayModel>,
}

impl SlotEvalConfig {
    pub fn new(n_slots: usize, inner_iters: usize) -> Self {
        Self {
            n_slots,
            inner_iters,
            retry_limit: 10,
            infeasible_power_cap_w: 100.0,
            delay: None,
        }
    }
}

/// Phase policy of the minimum-power benchmark slots.
pub enum PhasePolicy<'a> {
    Fixed(&'a DVector<f64>),
    RandomPerSlot,
}

struct SlotAccumulator {
    power_sum: f64,
    rate_sums: Vec<f64>,
    feasible: usize,
    infeasible: usize,
}

impl SlotAccumulator {
    fn new(k: usize) -> Self {
        Self {
            power_sum: 0.0,
            rate_sums: vec![0.0; k],
            feasible: 0,
            infeasible: 0,
        }
    }

    fn record_feasible(&mut self, power: f64, rates: &[f64]) {
        self.power_sum += power;
        for (acc, r) in self.rate_sums.iter_mut().zip(rates) {
            *acc += r;
        }
        self.feasible += 1;
    }

    fn record_infeasible(&mut self, cap: f64) {
        self.power_sum += cap;
        self.infeasible += 1;
    }

    fn finish(self, slots: usize) -> SlotStats {
        let mean_rates: Vec<f64> = if self.feasible > 0 {
            self.rate_sums
                .iter()
                .map(|s| s / self.feasible as f64)
                .collect()
        } else {
            vec![0.0; self.rate_sums.len()]
        };
        let worst = mean_rates.iter().copied().fold(f64::INFINITY, f64::min);
        SlotStats {
            slots,
            mean_power_w: self.power_sum / slots as f64,
            mean_rates,
            worst_user_rate: if worst.is_finite() { worst } else { 0.0 },
            infeasible_slots: self.infeasible,
        }
    }
}

/// Estimated channel and (possibly delay-evolved) actual channel of a slot.
fn slot_channels(
    scsi: &ScsiModel,
    master_seed: u64,
    slot: u64,
    delay: Option<&DelayModel>,
    omega_scale: f64,
) -> (ChannelSample, ChannelSample) {
    let est = scsi.sample_seeded(derive_seed(master_seed, SeedDomain::Eval, slot, 0));
    let actual = match delay {
        None => est.clone(),
        Some(d) => {
            let innovation =
                scsi.sample_seeded(derive_seed(master_seed, SeedDomain::Eval, slot, 1));
            apply_csi_delay(&est, &innovation, d.omega_ms * omega_scale, d.speed_kmh, d.f_c)
                .expect("nonnegative delay")
        }
    };
    (est, actual)
}

/// Held-out evaluation of the multiplier-based policy: per slot, the
/// WMMSE solver runs on the estimated effective channel; rates are scored
/// on the actual channel.
pub fn run_multiplier_policy_slots(
    scsi: &ScsiModel,
    theta: &DVector<f64>,
    lambda: &[f64],
    rate_targets: &[f64],
    cfg: &SlotEvalConfig,
    master_seed: u64,
) -> SlotStats {
    let k = scsi.dims.k;
    let mut acc = SlotAccumulator::new(k);
    for slot in 0..cfg.n_slots {
        let (est, actual) = slot_channels(scsi, master_seed, slot as u64, cfg.delay.as_ref(), 1.0);
        let prob = ShortTermProblem::from_sample(&est, theta, lambda, rate_targets);
        let sol = solve_short_term(&prob, cfg.inner_iters, None);
        let (_, rates) = crate::wmmse::sinr_and_rate(theta, &sol.w, &actual);
        acc.record_feasible(sol.power, &rates);
    }
    acc.finish(cfg.n_slots)
}

/// Minimum-power slots with a fixed or per-slot random phase policy
/// (benchmark schemes 2 and 3).
pub fn run_min_power_slots(
    scsi: &ScsiModel,
    policy: PhasePolicy<'_>,
    targets: &SinrTargets,
    cfg: &SlotEvalConfig,
    master_seed: u64,
) -> SlotStats {
    let k = scsi.dims.k;
    let n = scsi.dims.n();
    let mut acc = SlotAccumulator::new(k);
    for slot in 0..cfg.n_slots {
        let (est, actual) = slot_channels(scsi, master_seed, slot as u64, cfg.delay.as_ref(), 1.0);
        let retries = match policy {
            PhasePolicy::Fixed(_) => 0,
            PhasePolicy::RandomPerSlot => cfg.retry_limit,
        };
        let mut done = false;
        for attempt in 0..=retries {
            let theta = match policy {
                PhasePolicy::Fixed(t) => t.clone(),
                PhasePolicy::RandomPerSlot => {
                    let mut rng = stream(
                        master_seed,
                        SeedDomain::Baseline,
                        slot as u64,
                        attempt as u64,
                    );
                    crate::channel::random_phases(n, &mut rng)
                }
            };
            let h_eff = effective_channel(&est, &theta);
            if let MinPowerOutcome::Feasible(sol) =
                min_power_beamforming(&h_eff, &est.noise_vars, targets)
            {
                let (_, rates) = crate::wmmse::sinr_and_rate(&theta, &sol.w, &actual);
                acc.record_feasible(sol.power, &rates);
                done = true;
                break;
            }
        }
        if !done {
            acc.record_infeasible(cfg.infeasible_power_cap_w);
        }
    }
    acc.finish(cfg.n_slots)
}

/// Configuration of the sum-rate-maximizing phase training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsrMaxConfig {
    /// Reference transmit budget of the matched-filter design, watts.
    pub p_ref_w: f64,
    pub t_iters: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub rho: StepSchedule,
    pub gamma: StepSchedule,
}

impl WsrMaxConfig {
    pub fn new() -> Self {
        Self {
            p_ref_w: 1.0, // 30 dBm
            t_iters: 200,
            batch_size: 10,
            tau: 0.01,
            rho: StepSchedule::default_rho(),
            gamma: StepSchedule::default_gamma(),
        }
    }
}

impl Default for WsrMaxConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// Sum rate and its phase gradient under equal-power matched filtering at
/// the reference budget. The gradient keeps both the direct SINR term and
/// the dependence through the matched filters.
pub fn wsr_sum_rate_and_grad(
    sample: &ChannelSample,
    theta: &DVector<f64>,
    p_ref_w: f64,
) -> (f64, DVector<f64>) {
    let (m, _, k) = sample.dims();
    let h_eff = effective_channel(sample, theta);
    let a = (p_ref_w / k as f64).sqrt();
    let norms: Vec<f64> = h_eff.iter().map(|h| h.norm()).collect();
    let w: Vec<CVector> = h_eff
        .iter()
        .zip(norms.iter())
        .map(|(h, n)| h * Complex64::from(a / n))
        .collect();
    let s = inner_products(&h_eff, &w);
    let (_, rates) = rates_from_inner(&s, &sample.noise_vars);
    let sum_rate: f64 = rates.iter().sum();

    let mut hbar: Vec<CVector> = vec![DVector::zeros(m); k];
    let mut wbar: Vec<CVector> = vec![DVector::zeros(m); k];
    for user in 0..k {
        let sbar = rate_inner_cotangents(&s, &sample.noise_vars, user);
        for j in 0..k {
            hbar[user] += &w[j] * sbar[j].conj();
            wbar[j] += &h_eff[user] * sbar[j];
        }
    }
    // matched-filter pullback: w = a h / ||h||
    for j in 0..k {
        let nj = norms[j];
        let radial = h_eff[j].dotc(&wbar[j]).re / (nj * nj * nj);
        hbar[j] += &wbar[j] * Complex64::from(a / nj) - &h_eff[j] * Complex64::from(a * radial);
    }
    let coupling = coupling_matrices(sample);
    (sum_rate, theta_pullback(&coupling, theta, &hbar))
}

/// Long-term phase training that maximizes the Monte-Carlo average sum
/// rate with the same recursive-surrogate machinery (objective only, so
/// the subproblem is the clipped prox step).
pub fn optimize_wsrmax_phases(
    scsi: &ScsiModel,
    cfg: &WsrMaxConfig,
    master_seed: u64,
) -> DVector<f64> {
    let n = scsi.dims.n();
    let mut rng = stream(master_seed, SeedDomain::Init, 1, 0);
    let mut theta = crate::channel::random_phases(n, &mut rng);
    let mut grad_acc: DVector<f64> = DVector::zeros(n);
    let domain = BoxDomain::new(
        DVector::zeros(n),
        DVector::from_element(n, std::f64::consts::TAU),
    );
    for t in 0..cfg.t_iters {
        let rho = cfg.rho.value(t);
        let gamma = cfg.gamma.value(t);
        let mut mean_grad: DVector<f64> = DVector::zeros(n);
        for j in 0..cfg.batch_size {
            let sample = scsi.sample_seeded(derive_seed(
                master_seed,
                SeedDomain::Train,
                t as u64,
                j as u64,
            ));
            let (_, grad) = wsr_sum_rate_and_grad(&sample, &theta, cfg.p_ref_w);
            // minimizing the negative sum rate
            mean_grad -= grad / cfg.batch_size as f64;
        }
        grad_acc = grad_acc * (1.0 - rho) + mean_grad * rho;
        let objective = ProxQuadratic::new(0.0, grad_acc.clone(), cfg.tau, theta.clone());
        let theta_bar = inner_argmin(Some(&objective), &[], &[], &domain);
        theta = theta * (1.0 - gamma) + theta_bar * gamma;
    }
    crate::cssca::wrap_phases(&theta)
}

/// Alternating-optimization settings for the instantaneous-CSI benchmark.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AoConfig {
    pub rounds: usize,
    /// Candidate phases per element sweep.
    pub phase_grid: usize,
}

impl Default for AoConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            phase_grid: 128,
        }
    }
}

/// Per-slot AO result; `round_powers` tracks the accepted beamforming
/// power after each round (non-increasing by construction).
#[derive(Debug, Clone)]
pub struct AoSlotResult {
    pub theta: DVector<f64>,
    pub w: Vec<CVector>,
    pub power: f64,
    pub round_powers: Vec<f64>,
}

/// Joint per-slot design on instantaneous CSI: alternate minimum-power
/// beamforming with one coordinate sweep of per-element phase updates that
/// maximize the worst SINR margin at fixed beamformers. A sweep that
/// would raise the re-solved power is reverted, so the per-slot power is
/// monotonically non-increasing across rounds.
pub fn ao_optimize_slot(
    sample: &ChannelSample,
    targets: &SinrTargets,
    theta0: DVector<f64>,
    cfg: &AoConfig,
) -> Option<AoSlotResult> {
    let (_, n, k) = sample.dims();
    let coupling = coupling_matrices(sample);
    let mut theta = theta0;
    let mut h_eff = effective_channel(sample, &theta);
    let mut best = match min_power_beamforming(&h_eff, &sample.noise_vars, targets) {
        MinPowerOutcome::Feasible(sol) => sol,
        MinPowerOutcome::Infeasible => return None,
    };
    let mut round_powers = vec![best.power];
    for _ in 0..cfg.rounds {
        // Coordinate sweep on the phases at fixed beamformers.
        let mut s = inner_products(&h_eff, &best.w);
        let margin_of = |s: &CMatrix| -> f64 {
            let (sinr, _) = rates_from_inner(s, &sample.noise_vars);
            (0..k)
                .map(|i| sinr[i] / targets.gamma[i].max(1e-300))
                .fold(f64::INFINITY, f64::min)
        };
        let theta_before = theta.clone();
        for elem in 0..n {
            // s_kj(phi) = rest_kj + e^{j phi} c_kj with c_kj = v_k[:,elem]^H w_j
            let mut c = DMatrix::zeros(k, k);
            let mut rest = s.clone();
            for row in 0..k {
                let v = coupling[row].column(elem);
                for col in 0..k {
                    let cc = v.dotc(&best.w[col]);
                    c[(row, col)] = cc;
                    rest[(row, col)] -= Complex64::from_polar(1.0, theta[elem]) * cc;
                }
            }
            let mut best_phi = theta[elem];
            let mut best_margin = margin_of(&s);
            for p in 0..cfg.phase_grid {
                let phi = std::f64::consts::TAU * p as f64 / cfg.phase_grid as f64;
                let rot = Complex64::from_polar(1.0, phi);
                let cand = DMatrix::from_fn(k, k, |r_i, c_i| rest[(r_i, c_i)] + rot * c[(r_i, c_i)]);
                let margin = margin_of(&cand);
                if margin > best_margin {
                    best_margin = margin;
                    best_phi = phi;
                }
            }
            if best_phi != theta[elem] {
                theta[elem] = best_phi;
                let rot = Complex64::from_polar(1.0, best_phi);
                for row in 0..k {
                    for col in 0..k {
                        s[(row, col)] = rest[(row, col)] + rot * c[(row, col)];
                    }
                }
            }
        }
        if theta == theta_before {
            break; // sweep changed nothing; AO has settled
        }
        let h_new = effective_channel(sample, &theta);
        match min_power_beamforming(&h_new, &sample.noise_vars, targets) {
            MinPowerOutcome::Feasible(sol)
                if sol.power <= best.power * (1.0 + 1e-9) =>
            {
                h_eff = h_new;
                best = sol;
                round_powers.push(best.power);
            }
            _ => {
                // Revert the sweep: keep the previous feasible design.
                theta = theta_before;
                round_powers.push(best.power);
                break;
            }
        }
    }
    Some(AoSlotResult {
        theta,
        w: best.w,
        power: best.power,
        round_powers,
    })
}

/// Instantaneous-CSI benchmark slots: AO designs (theta, w) on the
/// estimated channel (whose acquisition delay is the effective-channel
/// delay scaled by the full-CSI dimension ratio); rates are scored on the
/// actual channel.
pub fn run_icsi_ao_slots(
    scsi: &ScsiModel,
    targets: &SinrTargets,
    ao_cfg: &AoConfig,
    cfg: &SlotEvalConfig,
    master_seed: u64,
) -> SlotStats {
    let k = scsi.dims.k;
    let n = scsi.dims.n();
    let full_factor = crate::channel::csi_delay_factor(&scsi.dims);
    let mut acc = SlotAccumulator::new(k);
    for slot in 0..cfg.n_slots {
        let (est, actual) =
            slot_channels(scsi, master_seed, slot as u64, cfg.delay.as_ref(), full_factor);
        let mut rng = stream(master_seed, SeedDomain::Baseline, slot as u64, 0);
        let theta0 = crate::channel::random_phases(n, &mut rng);
        match ao_optimize_slot(&est, targets, theta0, ao_cfg) {
            Some(result) => {
                let (_, rates) = crate::wmmse::sinr_and_rate(&result.theta, &result.w, &actual);
                acc.record_feasible(result.power, &rates);
            }
            None => acc.record_infeasible(cfg.infeasible_power_cap_w),
        }
    }
    acc.finish(cfg.n_slots)
}
