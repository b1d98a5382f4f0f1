//! Closed-form certificates for the Gaussian-weighted surrogate.
//!
//! * [`lemma1_bound`]: `tau^2 / (2 sigma^2) + 2 e^{-tau} + sqrt(delta / 2)` bounds
//!   the expected weight deficit `E_{a ~ pi'}[1 - w]`.
//! * [`optimal_tau`]: the minimiser `tau* = W(2 sigma^2)` of that bound.
//! * [`hoeffding_deviation`]: finite-sample deviation of the batch surrogate.
//! * [`performance_lower_bound`]: the resulting lower bound on `J(pi')`.

use crate::error::{domain, Result};
use crate::surrogate::DampingScale;

/// Symbols shared by the bound calculators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    /// Bound on `|A(s, a)|`.
    pub eps_adv: f64,
    /// Per-state KL radius `max_s KL(mu || pi')`.
    pub delta: f64,
    /// Truncation threshold.
    pub tau: f64,
    /// Sample count.
    pub n: usize,
    /// Confidence level.
    pub alpha: f64,
}

impl BoundInputs {
    pub fn new(eps_adv: f64, delta: f64, tau: f64, n: usize, alpha: f64) -> Result<Self> {
        if !(eps_adv >= 0.0) {
            return Err(domain(format!("eps_adv must be >= 0, got {eps_adv}")));
        }
        if !(delta >= 0.0) {
            return Err(domain(format!("delta must be >= 0, got {delta}")));
        }
        if !(tau > 0.0) {
            return Err(domain(format!("tau must be > 0, got {tau}")));
        }
        if n == 0 {
            return Err(domain("sample count must be >= 1"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(domain(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self {
            eps_adv,
            delta,
            tau,
            n,
            alpha,
        })
    }
}

pub fn lemma1_bound(tau: f64, sigma: DampingScale, delta: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(domain(format!("tau must be > 0, got {tau}")));
    }
    if !(delta >= 0.0) {
        return Err(domain(format!("delta must be >= 0, got {delta}")));
    }
    let s = sigma.get();
    Ok(tau * tau / (2.0 * s * s) + 2.0 * (-tau).exp() + (delta / 2.0).sqrt())
}

/// Minimiser of the truncation penalty and the penalty value there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimalTau {
    pub tau: f64,
    /// `g(tau*) = tau* (tau* + 2) / (2 sigma^2)`.
    pub penalty: f64,
    /// `|tau* e^{tau*} - 2 sigma^2|` at termination.
    pub residual: f64,
}

/// Solves `tau e^tau = 2 sigma^2` (principal Lambert-W branch) by Newton's
/// method from `ln(1 + 2 sigma^2)`.
pub fn optimal_tau(sigma: DampingScale) -> OptimalTau {
    let s = sigma.get();
    let target = 2.0 * s * s;
    let f = |t: f64| t * t.exp() - target;
    let mut tau = target.ln_1p();
    let mut best = (f(tau).abs(), tau);
    for _ in 0..200 {
        let e = tau.exp();
        let fx = tau * e - target;
        let step = fx / (e * (1.0 + tau));
        let next = tau - step;
        let res = f(next).abs();
        if res < best.0 {
            best = (res, next);
        }
        if next == tau || res == 0.0 {
            break;
        }
        tau = next;
    }
    // Newton can stall one ulp away from the closest representable root; probe neighbours.
    let (mut residual, mut tau) = best;
    for _ in 0..4 {
        let up = f64::from_bits(tau.to_bits() + 1);
        let down = if tau > 0.0 { f64::from_bits(tau.to_bits() - 1) } else { tau };
        let (ru, rd) = (f(up).abs(), f(down).abs());
        if ru < residual && ru <= rd {
            residual = ru;
            tau = up;
        } else if rd < residual {
            residual = rd;
            tau = down;
        } else {
            break;
        }
    }
    OptimalTau {
        tau,
        penalty: tau * (tau + 2.0) / (2.0 * s * s),
        residual,
    }
}

/// High-probability deviation `eps e^{sigma^2/2} sqrt(2 ln(2/alpha) / N)`.
pub fn hoeffding_deviation(inputs: &BoundInputs, sigma: DampingScale) -> f64 {
    let s = sigma.get();
    inputs.eps_adv
        * (s * s / 2.0).exp()
        * (2.0 * (2.0 / inputs.alpha).ln() / inputs.n as f64).sqrt()
}

/// Inputs of the performance lower bound on `J(pi')`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerBoundInputs {
    /// The attenuated surrogate value `L~(pi')`.
    pub surrogate_value: f64,
    /// `max_s KL(mu || pi)`.
    pub kl_mu_pi_max: f64,
    /// `max_s KL(pi || pi')`.
    pub kl_pi_pinew_max: f64,
    /// `max_s KL(mu || pi')`, the Lemma radius.
    pub kl_mu_pinew_max: f64,
    pub eps_adv: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub tau: f64,
}

/// `L~ - C (sqrt(KL_mu_pi) sqrt(KL_pi_pi') + KL_pi_pi') - eps/(1-gamma) * lemma1_bound`,
/// with `C = 4 gamma eps / (1 - gamma)^2`.
pub fn performance_lower_bound(x: &LowerBoundInputs) -> Result<f64> {
    for (name, v) in [
        ("kl_mu_pi_max", x.kl_mu_pi_max),
        ("kl_pi_pinew_max", x.kl_pi_pinew_max),
        ("kl_mu_pinew_max", x.kl_mu_pinew_max),
        ("eps_adv", x.eps_adv),
    ] {
        if !(v >= 0.0) {
            return Err(domain(format!("{name} must be >= 0, got {v}")));
        }
    }
    if !(x.gamma > 0.0 && x.gamma < 1.0) {
        return Err(domain(format!("gamma must lie in (0, 1), got {}", x.gamma)));
    }
    let sigma = DampingScale::new(x.sigma)?;
    let c = 4.0 * x.gamma * x.eps_adv / (1.0 - x.gamma).powi(2);
    let mismatch =
        x.kl_mu_pi_max.sqrt() * x.kl_pi_pinew_max.sqrt() + x.kl_pi_pinew_max;
    let truncation = x.eps_adv / (1.0 - x.gamma) * lemma1_bound(x.tau, sigma, x.kl_mu_pinew_max)?;
    Ok(x.surrogate_value - c * mismatch - truncation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> DampingScale {
        DampingScale::new(x).unwrap()
    }

    #[test]
    fn attenuation_bound_examples() {
        let base = lemma1_bound(1.0, s(1.0), 0.0).unwrap();
        assert!((base - (0.5 + 2.0 / std::f64::consts::E)).abs() < 1e-15);
        assert!((base - 1.235_758_882_342_884_6).abs() < 1e-12);
        let shifted = lemma1_bound(1.0, s(1.0), 2.0).unwrap();
        assert!((shifted - base - 1.0).abs() < 1e-15);
        let far = lemma1_bound(1e4, s(1.0), 0.0).unwrap();
        assert!((far - 0.5e8).abs() < 1e-6);
        assert!(lemma1_bound(0.0, s(1.0), 0.0).is_err());
    }

    #[test]
    fn optimal_tau_examples() {
        // W(2) from an independent bisection on t e^t = 2.
        let (mut lo, mut hi) = (0.0f64, 2.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() < 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = optimal_tau(s(1.0));
        assert!((t.tau - lo).abs() < 1e-14);
        assert!((t.tau - 0.852_605_502_013_725_5).abs() < 1e-12);
        assert!(optimal_tau(s(1e-8)).tau < 1e-15);
        for sigma in [1e-3, 0.05, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let t = optimal_tau(s(sigma));
            assert!(t.residual < 1e-12, "sigma {sigma}: residual {}", t.residual);
            let direct = t.tau * t.tau / (2.0 * sigma * sigma) + 2.0 * (-t.tau).exp();
            assert!((direct - t.penalty).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn optimal_tau_minimises_bound() {
        for sigma in [0.25, 0.5, 1.0, 2.0] {
            let t = optimal_tau(s(sigma));
            let best = lemma1_bound(t.tau, s(sigma), 0.1).unwrap();
            for k in -1000..=1000 {
                let tau = t.tau * (1.0 + k as f64 * 1e-3);
                if tau <= 0.0 {
                    continue;
                }
                assert!(best <= lemma1_bound(tau, s(sigma), 0.1).unwrap() + 1e-10);
            }
        }
    }

    #[test]
    fn hoeffding_examples() {
        let inputs = BoundInputs::new(1.0, 0.0, 1.0, 1000, 0.05).unwrap();
        let got = hoeffding_deviation(&inputs, s(1.0));
        let expect = 0.5f64.exp() * (2.0 * 40f64.ln() / 1000.0).sqrt();
        assert!((got - expect).abs() < 1e-15);
        let quad = BoundInputs { n: 4000, ..inputs };
        assert!((hoeffding_deviation(&quad, s(1.0)) - got / 2.0).abs() < 1e-15);
        let zero = BoundInputs { eps_adv: 0.0, ..inputs };
        assert_eq!(hoeffding_deviation(&zero, s(1.0)), 0.0);
        assert!(BoundInputs::new(1.0, 0.0, 1.0, 0, 0.05).is_err());
        assert!(BoundInputs::new(1.0, 0.0, 1.0, 10, 1.0).is_err());
    }

    #[test]
    fn lower_bound_special_cases() {
        let sigma = 0.8;
        let tau = optimal_tau(s(sigma));
        let inputs = LowerBoundInputs {
            surrogate_value: -3.0,
            kl_mu_pi_max: 0.0,
            kl_pi_pinew_max: 0.0,
            kl_mu_pinew_max: 0.0,
            eps_adv: 0.7,
            gamma: 0.9,
            sigma,
            tau: tau.tau,
        };
        let lb = performance_lower_bound(&inputs).unwrap();
        assert!((lb - (-3.0 - 0.7 / 0.1 * tau.penalty)).abs() < 1e-12);
        let free = LowerBoundInputs {
            eps_adv: 0.0,
            kl_mu_pi_max: 0.3,
            kl_pi_pinew_max: 0.2,
            kl_mu_pinew_max: 0.4,
            ..inputs
        };
        assert_eq!(performance_lower_bound(&free).unwrap(), -3.0);
    }
}
