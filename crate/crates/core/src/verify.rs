//! Executable battery for the closed-form properties of the Gaussian weight
//! and its bounds.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::mdp::kl_divergence;
use crate::policy::log_softmax;
use crate::surrogate::{
    gaussian_weight, gipo_multiplier, hoeffding_deviation, lemma1_bound, optimal_tau, registry, BoundInputs,
    DampingScale, Gipo, Ratio, RHO_MAX, RHO_MIN,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} ({:.3}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = body();
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// `n` log-uniform ratios spanning the clamp range, endpoints included.
pub fn log_ratio_grid(n: usize) -> Vec<f64> {
    let (lo, hi) = (RHO_MIN.ln(), RHO_MAX.ln());
    (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Peak of the multiplier found on a grid and refined inside the grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakScan {
    pub sigma: f64,
    pub bound: f64,
    pub grid_max: f64,
    pub grid_argmax: f64,
    /// Largest grid value above the bound (0 when none exceeds it).
    pub grid_excess: f64,
    pub refined_max: f64,
    pub refined_argmax: f64,
    /// Grid spacing in `ln rho`.
    pub log_step: f64,
}

pub fn scan_peak(sigma: f64, grid: &[f64]) -> PeakScan {
    let s = DampingScale::new(sigma).expect("positive sigma");
    let m = |rho: f64| gipo_multiplier(Ratio::new(rho).expect("positive ratio"), s);
    let bound = (sigma * sigma / 2.0).exp();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut excess: f64 = 0.0;
    for (i, &rho) in grid.iter().enumerate() {
        let v = m(rho);
        excess = excess.max(v - bound);
        if v > best.0 {
            best = (v, i);
        }
    }
    let (grid_max, i) = best;
    let lo = grid[i.saturating_sub(1)].ln();
    let hi = grid[(i + 1).min(grid.len() - 1)].ln();
    let (x, refined_max) = golden_max(|x| m(x.exp()), lo, hi);
    PeakScan {
        sigma,
        bound,
        grid_max,
        grid_argmax: grid[i],
        grid_excess: excess,
        refined_max: refined_max.max(grid_max),
        refined_argmax: x.exp(),
        log_step: (grid[1].ln() - grid[0].ln()).abs(),
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// The multiplier peaks at `rho = e^{sigma^2}` with value `e^{sigma^2/2}`.
pub fn check_peak(sigmas: &[f64], grid_points: usize) -> CheckOutcome {
    timed("multiplier peak attainment", || {
        let grid = log_ratio_grid(grid_points);
        let mut ok = true;
        let mut parts = Vec::new();
        for &sigma in sigmas {
            let p = scan_peak(sigma, &grid);
            let located = (p.grid_argmax.ln() - sigma * sigma).abs() <= p.log_step
                && (p.refined_argmax.ln() - sigma * sigma).abs() <= p.log_step;
            let pass = p.grid_excess <= 1e-12 && (p.refined_max - p.bound).abs() <= 1e-9 && located;
            ok &= pass;
            parts.push(format!(
                "sigma={sigma}: peak gap {:.2e} (raw grid gap {:.2e}), argmax ln-error {:.2e}",
                (p.refined_max - p.bound).abs(),
                p.bound - p.grid_max,
                (p.refined_argmax.ln() - sigma * sigma).abs()
            ));
        }
        (ok, parts.join("; "))
    })
}

/// `w(rho) == w(1/rho)`.
pub fn check_symmetry(sigmas: &[f64], grid_points: usize) -> CheckOutcome {
    timed("log symmetry", || {
        let grid = log_ratio_grid(grid_points);
        let mut worst: f64 = 0.0;
        for &sigma in sigmas {
            let s = DampingScale::new(sigma).expect("positive sigma");
            for &rho in &grid {
                let a = gaussian_weight(Ratio::new(rho).expect("positive"), s);
                let b = gaussian_weight(Ratio::new(1.0 / rho).expect("positive"), s);
                worst = worst.max((a - b).abs());
            }
        }
        (worst <= 1e-12, format!("max |w(rho) - w(1/rho)| = {worst:.2e}"))
    })
}

/// Empirical violation count of the deviation bound for one `(N, alpha)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageRow {
    pub n: usize,
    pub alpha: f64,
    pub batches: usize,
    pub violations: usize,
    /// `P(Binomial(batches, alpha) >= violations)`.
    pub p_value: f64,
}

impl CoverageRow {
    pub fn rate(&self) -> f64 {
        self.violations as f64 / self.batches as f64
    }

    /// Fails when the violation count is implausibly high for rate `alpha`.
    pub fn passed(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

/// Simulates batch means of `w(rho) rho A` over a random discrete law with
/// `|A| <= eps_adv` and counts deviations beyond the bound.
pub fn hoeffding_coverage(n: usize, alpha: f64, batches: usize, sigma: f64, eps_adv: f64, seed: u64) -> CoverageRow {
    let s = DampingScale::new(sigma).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = 8;
    // Support includes the peak ratio with both advantage signs.
    let mut values: Vec<f64> = (0..support)
        .map(|k| {
            let rho = if k < 2 { (sigma * sigma).exp() } else { rng.random_range(-4.0f64..4.0).exp() };
            let adv = match k {
                0 => eps_adv,
                1 => -eps_adv,
                _ => rng.random_range(-eps_adv..=eps_adv),
            };
            gipo_multiplier(Ratio::new(rho).expect("positive"), s) * adv
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let weights: Vec<f64> = (0..support).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let mean: f64 = values.iter().zip(&weights).map(|(v, w)| v * w / total).sum();
    let dev = hoeffding_deviation(
        &BoundInputs::new(eps_adv, 0.0, 1.0, n, alpha).expect("valid inputs"),
        s,
    );
    let mut violations = 0;
    for _ in 0..batches {
        let mut acc = 0.0;
        for _ in 0..n {
            let u: f64 = rng.random();
            let k = cdf.iter().position(|&c| u < c).unwrap_or(support - 1);
            acc += values[k];
        }
        if (acc / n as f64 - mean).abs() > dev {
            violations += 1;
        }
    }
    let p_value = if violations == 0 {
        1.0
    } else {
        Binomial::new(alpha, batches as u64)
            .expect("valid binomial")
            .sf(violations as u64 - 1)
    };
    CoverageRow {
        n,
        alpha,
        batches,
        violations,
        p_value,
    }
}

pub fn check_hoeffding(batches: usize, seed: u64) -> CheckOutcome {
    timed("hoeffding coverage", || {
        let mut ok = true;
        let mut parts = Vec::new();
        for (i, (n, alpha)) in [(100, 0.05), (100, 0.01), (1000, 0.05), (1000, 0.01)].into_iter().enumerate() {
            let row = hoeffding_coverage(n, alpha, batches, 1.0, 1.0, seed.wrapping_add(i as u64));
            ok &= row.passed(1e-3) && row.rate() <= alpha;
            parts.push(format!("N={n} alpha={alpha}: rate {:.4} (p={:.3})", row.rate(), row.p_value));
        }
        (ok, parts.join("; "))
    })
}

/// `tau e^tau = 2 sigma^2` is solved to `1e-12` across `sigma in [1e-3, 10]`.
pub fn check_optimal_tau() -> CheckOutcome {
    timed("optimal tau residual", || {
        let mut worst: f64 = 0.0;
        for i in 0..=200 {
            let sigma = 10f64.powf(-3.0 + 4.0 * i as f64 / 200.0);
            let t = optimal_tau(DampingScale::new(sigma).expect("positive"));
            worst = worst.max(t.residual);
        }
        (worst < 1e-12, format!("max residual {worst:.2e}"))
    })
}

/// Outcome of the exact enumeration of the attenuation bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnumerationSummary {
    pub instances: usize,
    pub bound_violations: usize,
    /// Largest `bound(tau*) - min_grid bound(tau)`.
    pub worst_tau_gap: f64,
    /// Smallest slack `bound - E[1 - w]` seen.
    pub min_slack: f64,
}

/// Random `(mu, pi')` pairs over 4 to 16 actions and random `sigma`: the
/// exact `E_{pi'}[1 - w(pi'/mu)]` must stay below the bound at every `tau`
/// of a 20-point grid and at `tau*`, and `tau*` must not lose to the grid.
pub fn attenuation_enumeration(instances: usize, seed: u64) -> EnumerationSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taus: Vec<f64> = (0..20).map(|i| 10f64.powf(-2.0 + 3.0 * i as f64 / 19.0)).collect();
    let mut summary = EnumerationSummary {
        instances,
        bound_violations: 0,
        worst_tau_gap: f64::NEG_INFINITY,
        min_slack: f64::INFINITY,
    };
    for _ in 0..instances {
        let k = rng.random_range(4..=16);
        let temp_mu = rng.random_range(0.1..3.0);
        let temp_pi = rng.random_range(0.1..3.0);
        let mu: Vec<f64> = log_softmax(&(0..k).map(|_| temp_mu * gauss(&mut rng)).collect::<Vec<_>>())
            .into_iter()
            .map(f64::exp)
            .collect();
        let pi: Vec<f64> = log_softmax(&(0..k).map(|_| temp_pi * gauss(&mut rng)).collect::<Vec<_>>())
            .into_iter()
            .map(f64::exp)
            .collect();
        let sigma = DampingScale::new(10f64.powf(rng.random_range(-1.0..1.0))).expect("positive");
        let deficit: f64 = pi
            .iter()
            .zip(&mu)
            .map(|(p, m)| p * (1.0 - gaussian_weight(Ratio::new(p / m).expect("positive"), sigma)))
            .sum();
        let delta = kl_divergence(&mu, &pi);
        let star = optimal_tau(sigma);
        let mut grid_min = f64::INFINITY;
        for &tau in taus.iter().chain(std::iter::once(&star.tau)) {
            let b = lemma1_bound(tau, sigma, delta).expect("valid inputs");
            if deficit > b {
                summary.bound_violations += 1;
            }
            summary.min_slack = summary.min_slack.min(b - deficit);
            if tau != star.tau {
                grid_min = grid_min.min(b);
            }
        }
        let at_star = lemma1_bound(star.tau, sigma, delta).expect("valid inputs");
        summary.worst_tau_gap = summary.worst_tau_gap.max(at_star - grid_min);
    }
    summary
}

fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn check_attenuation(instances: usize, seed: u64) -> CheckOutcome {
    timed("attenuation bound enumeration", || {
        let s = attenuation_enumeration(instances, seed);
        (
            s.bound_violations == 0 && s.worst_tau_gap <= 1e-10,
            format!(
                "{} instances, {} violations, min slack {:.3e}, tau* excess over grid min {:.2e}",
                s.instances, s.bound_violations, s.min_slack, s.worst_tau_gap
            ),
        )
    })
}

/// Invalid scales are rejected on every entry point.
pub fn check_domain_errors(sigma: f64) -> CheckOutcome {
    timed("domain errors", || {
        let params = crate::registry::Params::from([("sigma".to_string(), sigma)]);
        let rejected = [
            DampingScale::new(sigma).is_err(),
            Gipo::new(sigma).is_err(),
            registry().build("gipo", &params).is_err(),
            Ratio::new(-1.0).is_err(),
            lemma1_bound(-1.0, DampingScale::new(1.0).expect("positive"), 0.0).is_err(),
        ];
        let n = rejected.iter().filter(|r| **r).count();
        (n == rejected.len(), format!("{n}/{} invalid inputs rejected (sigma={sigma})", rejected.len()))
    })
}

/// The full battery with its release settings.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let sigmas = [0.25, 0.5, 1.0, 2.0];
    vec![
        check_peak(&sigmas, 1_000_000),
        check_symmetry(&sigmas, 1_000_000),
        check_hoeffding(10_000, seed),
        check_optimal_tau(),
        check_attenuation(1000, seed),
        check_domain_errors(-1.0),
    ]
}
