//! Bessel function of the first kind, order zero.
//!
//! Needed for the Clarke/Jakes autoregressive fading correlation
//! `rho = J0(2 pi f_d omega)`. Power series below |x| = 16, Hankel
//! asymptotic expansion above; absolute error stays below 1e-9 over the
//! argument range the delay model produces.

use std::f64::consts::FRAC_PI_4;

pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 16.0 {
        // sum_k (-(x/2)^2)^k / (k!)^2; cancellation keeps ~1e-11 accuracy here.
        let q = -0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=80u32 {
            term *= q / ((k * k) as f64);
            sum += term;
            if term.abs() < 1e-18 * sum.abs().max(1.0) {
                break;
            }
        }
        sum
    } else {
        // J0(x) ~ sqrt(2/(pi x)) [P cos(x - pi/4) - Q sin(x - pi/4)]
        let inv = 1.0 / ax;
        let inv2 = inv * inv;
        let p = 1.0
            + inv2
                * (-9.0 / 128.0
                    + inv2 * (3675.0 / 32768.0 + inv2 * (-2_401_245.0 / 4_194_304.0)));
        let q = inv
            * (-1.0 / 8.0 + inv2 * (75.0 / 1024.0 + inv2 * (-59535.0 / 262_144.0)));
        let chi = ax - FRAC_PI_4;
        (2.0 / (std::f64::consts::PI * ax)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}
