//! Actor-side ratio handling.
//!
//! Each method maps an importance ratio `rho = pi(a|s) / mu(a|s)` and the sign
//! of the advantage to an effective multiplier `m` on `grad log pi * A`:
//!
//! | method     | multiplier                                            |
//! |------------|-------------------------------------------------------|
//! | `gipo`     | `exp(-(ln rho)^2 / (2 sigma^2)) * rho`                |
//! | `ppo_clip` | `rho`, or `0` when the clipped branch of the min wins |
//! | `sapo`     | `1 + tau * tanh((rho - 1) / tau)`, `tau` by sign of A |
//! | `no_clip`  | `rho`                                                 |
//!
//! Implementations are registered by name in [`registry`] and share the
//! [`Surrogate`] trait, which also builds the per-sample objective on an
//! autodiff tape with the method's stop-gradient convention.

pub mod bounds;

use std::fmt;
use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::policy::autodiff::{Tape, Var};
use crate::registry::{Params, Registry};

pub use bounds::{
    hoeffding_deviation, lemma1_bound, optimal_tau, performance_lower_bound, BoundInputs,
    LowerBoundInputs, OptimalTau,
};

/// Lower clamp applied to a ratio before taking its logarithm.
pub const RHO_MIN: f64 = 1e-6;
/// Upper clamp applied to a ratio before taking its logarithm.
pub const RHO_MAX: f64 = 1e6;

/// A strictly positive, finite importance ratio.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Ratio(f64);

impl Ratio {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(domain(format!("ratio must be positive and finite, got {value}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// The Gaussian damping scale `sigma > 0`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DampingScale(f64);

impl DampingScale {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(domain(format!("sigma must be positive and finite, got {sigma}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Sign of an advantage estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvSign {
    Negative,
    Zero,
    Positive,
}

impl AdvSign {
    pub fn of(adv: f64) -> Self {
        if adv > 0.0 {
            Self::Positive
        } else if adv < 0.0 {
            Self::Negative
        } else {
            Self::Zero
        }
    }
}

fn weight_raw(rho: f64, sigma: f64) -> f64 {
    let log_rho = rho.clamp(RHO_MIN, RHO_MAX).ln();
    let z = log_rho / sigma;
    (-0.5 * z * z).exp()
}

/// Gaussian trust weight `exp(-(ln rho)^2 / (2 sigma^2))` on the clamped ratio.
pub fn gaussian_weight(rho: Ratio, sigma: DampingScale) -> f64 {
    weight_raw(rho.0, sigma.0)
}

/// GIPO effective multiplier `w(rho) * rho`, bounded above by `exp(sigma^2 / 2)`.
pub fn gipo_multiplier(rho: Ratio, sigma: DampingScale) -> f64 {
    weight_raw(rho.0, sigma.0) * rho.0
}

fn ppo_raw(rho: f64, adv: AdvSign, eps: f64) -> f64 {
    match adv {
        AdvSign::Positive if rho > 1.0 + eps => 0.0,
        AdvSign::Negative if rho < 1.0 - eps => 0.0,
        _ => rho,
    }
}

/// Coefficient on `grad log pi * A` induced by `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
///
/// On the interval boundary both branches coincide; the unclipped one is reported.
pub fn ppo_effective_multiplier(rho: Ratio, adv: AdvSign, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(ppo_raw(rho.0, adv, eps))
}

fn sapo_raw(rho: f64, adv: AdvSign, tau_pos: f64, tau_neg: f64) -> f64 {
    let tau = match adv {
        AdvSign::Negative => tau_neg,
        _ => tau_pos,
    };
    1.0 + tau * ((rho - 1.0) / tau).tanh()
}

/// Smooth asymmetric soft clip: `1 + tau * tanh((rho - 1) / tau)` with `tau`
/// chosen by the advantage sign (`tau_pos` for `A >= 0`).
pub fn sapo_multiplier(rho: Ratio, adv: AdvSign, tau_pos: f64, tau_neg: f64) -> Result<f64> {
    check_positive("tau_pos", tau_pos)?;
    check_positive("tau_neg", tau_neg)?;
    Ok(sapo_raw(rho.0, adv, tau_pos, tau_neg))
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("clip radius must lie in (0, 1), got {eps}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{name} must be positive, got {v}")))
    }
}

/// Tagged choice of actor-side multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateKind {
    Gipo { sigma: f64 },
    PpoClip { eps: f64 },
    Sapo { tau_pos: f64, tau_neg: f64 },
    NoClip,
}

impl SurrogateKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gipo { .. } => "gipo",
            Self::PpoClip { .. } => "ppo_clip",
            Self::Sapo { .. } => "sapo",
            Self::NoClip => "no_clip",
        }
    }

    /// The method's principal scalar parameter (sigma, eps, tau_pos), if any.
    pub fn param(&self) -> Option<f64> {
        match *self {
            Self::Gipo { sigma } => Some(sigma),
            Self::PpoClip { eps } => Some(eps),
            Self::Sapo { tau_pos, .. } => Some(tau_pos),
            Self::NoClip => None,
        }
    }

    pub fn params(&self) -> Params {
        let pairs: Vec<(&str, f64)> = match *self {
            Self::Gipo { sigma } => vec![("sigma", sigma)],
            Self::PpoClip { eps } => vec![("eps", eps)],
            Self::Sapo { tau_pos, tau_neg } => vec![("tau_pos", tau_pos), ("tau_neg", tau_neg)],
            Self::NoClip => vec![],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn build(&self) -> Result<Box<dyn Surrogate>> {
        registry().build(self.name(), &self.params())
    }

    pub fn ppo_default() -> Self {
        Self::PpoClip { eps: 0.2 }
    }

    pub fn sapo_default() -> Self {
        Self::Sapo {
            tau_pos: 2.0,
            tau_neg: 1.0,
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Gipo { sigma } => write!(f, "gipo(sigma={sigma})"),
            Self::PpoClip { eps } => write!(f, "ppo_clip(eps={eps})"),
            Self::Sapo { tau_pos, tau_neg } => write!(f, "sapo(tau_pos={tau_pos},tau_neg={tau_neg})"),
            Self::NoClip => write!(f, "no_clip"),
        }
    }
}

/// An actor-side ratio-handling strategy.
pub trait Surrogate: Send + Sync + fmt::Debug {
    fn kind(&self) -> SurrogateKind;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Effective multiplier `m` on `grad log pi(a|s) * A` at ratio `rho`.
    fn multiplier(&self, rho: f64, adv: f64) -> f64;

    /// Per-sample objective (to be maximised) as a function of the live
    /// ratio, with every stop-gradient factor evaluated at `rho_detached`.
    /// Its derivative w.r.t. `ln rho` at `rho == rho_detached` is `m * A`.
    fn objective_value(&self, rho: f64, rho_detached: f64, adv: f64) -> f64;

    /// Builds the per-sample objective column on `tape` from an `n x 1`
    /// ratio node and matching advantages.
    fn objective(&self, tape: &mut Tape, ratio: Var, adv: &Array2<f64>) -> Var;
}

#[derive(Debug, Clone, Copy)]
pub struct Gipo {
    sigma: DampingScale,
}

impl Gipo {
    pub fn new(sigma: f64) -> Result<Self> {
        Ok(Self {
            sigma: DampingScale::new(sigma)?,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.get()
    }
}

impl Surrogate for Gipo {
    fn kind(&self) -> SurrogateKind {
        SurrogateKind::Gipo {
            sigma: self.sigma.get(),
        }
    }

    fn multiplier(&self, rho: f64, _adv: f64) -> f64 {
        weight_raw(rho, self.sigma.get()) * rho
    }

    fn objective_value(&self, rho: f64, rho_detached: f64, adv: f64) -> f64 {
        weight_raw(rho_detached, self.sigma.get()) * rho * adv
    }

    fn objective(&self, tape: &mut Tape, ratio: Var, adv: &Array2<f64>) -> Var {
        let sigma = self.sigma.get();
        let rho_bar = tape.detach(ratio);
        // The derivative is supplied so that only the detach keeps it off the ratio.
        let weight = tape.map(
            rho_bar,
            |r| weight_raw(r, sigma),
            |r| {
                if (RHO_MIN..=RHO_MAX).contains(&r) {
                    -weight_raw(r, sigma) * r.ln() / (sigma * sigma * r)
                } else {
                    0.0
                }
            },
        );
        let weighted = tape.mul(weight, ratio);
        let adv = tape.constant(adv.clone());
        tape.mul(weighted, adv)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PpoClip {
    eps: f64,
}

impl PpoClip {
    pub fn new(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(Self { eps })
    }
}

impl Surrogate for PpoClip {
    fn kind(&self) -> SurrogateKind {
        SurrogateKind::PpoClip { eps: self.eps }
    }

    fn multiplier(&self, rho: f64, adv: f64) -> f64 {
        ppo_raw(rho, AdvSign::of(adv), self.eps)
    }

    fn objective_value(&self, rho: f64, _rho_detached: f64, adv: f64) -> f64 {
        let clipped = rho.clamp(1.0 - self.eps, 1.0 + self.eps);
        (rho * adv).min(clipped * adv)
    }

    fn objective(&self, tape: &mut Tape, ratio: Var, adv: &Array2<f64>) -> Var {
        let adv = tape.constant(adv.clone());
        let unclipped = tape.mul(ratio, adv);
        let clipped = tape.clamp(ratio, 1.0 - self.eps, 1.0 + self.eps);
        let clipped = tape.mul(clipped, adv);
        tape.min(unclipped, clipped)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sapo {
    tau_pos: f64,
    tau_neg: f64,
}

impl Sapo {
    pub fn new(tau_pos: f64, tau_neg: f64) -> Result<Self> {
        check_positive("tau_pos", tau_pos)?;
        check_positive("tau_neg", tau_neg)?;
        Ok(Self { tau_pos, tau_neg })
    }

    fn coefficient(&self, rho: f64, adv: f64) -> f64 {
        sapo_raw(rho, AdvSign::of(adv), self.tau_pos, self.tau_neg) / rho
    }
}

impl Surrogate for Sapo {
    fn kind(&self) -> SurrogateKind {
        SurrogateKind::Sapo {
            tau_pos: self.tau_pos,
            tau_neg: self.tau_neg,
        }
    }

    fn multiplier(&self, rho: f64, adv: f64) -> f64 {
        sapo_raw(rho, AdvSign::of(adv), self.tau_pos, self.tau_neg)
    }

    fn objective_value(&self, rho: f64, rho_detached: f64, adv: f64) -> f64 {
        self.coefficient(rho_detached, adv) * rho * adv
    }

    fn objective(&self, tape: &mut Tape, ratio: Var, adv: &Array2<f64>) -> Var {
        // sg(m / rho) * rho * A has gradient m * grad log pi * A.
        let coef = ndarray::Zip::from(tape.value(ratio))
            .and(adv)
            .map_collect(|&r, &a| self.coefficient(r, a));
        let coef = tape.constant(coef);
        let weighted = tape.mul(coef, ratio);
        let adv = tape.constant(adv.clone());
        tape.mul(weighted, adv)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoClip;

impl Surrogate for NoClip {
    fn kind(&self) -> SurrogateKind {
        SurrogateKind::NoClip
    }

    fn multiplier(&self, rho: f64, _adv: f64) -> f64 {
        rho
    }

    fn objective_value(&self, rho: f64, _rho_detached: f64, adv: f64) -> f64 {
        rho * adv
    }

    fn objective(&self, tape: &mut Tape, ratio: Var, adv: &Array2<f64>) -> Var {
        let adv = tape.constant(adv.clone());
        tape.mul(ratio, adv)
    }
}

/// The global surrogate registry: `gipo`, `ppo_clip`, `sapo`, `no_clip`.
pub fn registry() -> &'static Registry<dyn Surrogate> {
    static REGISTRY: OnceLock<Registry<dyn Surrogate>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Surrogate> = Registry::new("surrogate");
        r.register(
            "gipo",
            "Gaussian trust weight in log-ratio space (sigma)",
            |p| Ok(Box::new(Gipo::new(p.get_or("sigma", 1.0))?)),
        )
        .register("ppo_clip", "PPO clipped surrogate (eps)", |p| {
            Ok(Box::new(PpoClip::new(p.get_or("eps", 0.2))?))
        })
        .register(
            "sapo",
            "asymmetric tanh soft clip (tau_pos, tau_neg)",
            |p| {
                Ok(Box::new(Sapo::new(
                    p.get_or("tau_pos", 2.0),
                    p.get_or("tau_neg", 1.0),
                )?))
            },
        )
        .register("no_clip", "plain importance sampling", |_| Ok(Box::new(NoClip)));
        r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn r(x: f64) -> Ratio {
        Ratio::new(x).unwrap()
    }
    fn s(x: f64) -> DampingScale {
        DampingScale::new(x).unwrap()
    }

    #[test]
    fn gaussian_weight_examples() {
        assert_eq!(gaussian_weight(r(1.0), s(1.0)), 1.0);
        assert!((gaussian_weight(r(E), s(1.0)) - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert_eq!(gaussian_weight(r(2.0), s(1.0)), gaussian_weight(r(0.5), s(1.0)));
    }

    #[test]
    fn domain_errors() {
        assert!(Ratio::new(0.0).is_err());
        assert!(Ratio::new(-1.0).is_err());
        assert!(Ratio::new(f64::INFINITY).is_err());
        assert!(DampingScale::new(-1.0).is_err());
        assert!(DampingScale::new(0.0).is_err());
        assert!(ppo_effective_multiplier(r(1.0), AdvSign::Positive, 1.5).is_err());
        assert!(sapo_multiplier(r(1.0), AdvSign::Positive, 0.0, 1.0).is_err());
    }

    #[test]
    fn gipo_multiplier_examples() {
        assert_eq!(gipo_multiplier(r(1.0), s(1.0)), 1.0);
        assert!((gipo_multiplier(r(E), s(1.0)) - 0.5f64.exp()).abs() < 1e-12);
        assert!(gipo_multiplier(r(1e6), s(1.0)) < 1e-6);
    }

    #[test]
    fn ppo_examples() {
        let m = |rho, sign| ppo_effective_multiplier(r(rho), sign, 0.2).unwrap();
        assert_eq!(m(1.3, AdvSign::Positive), 0.0);
        assert_eq!(m(1.1, AdvSign::Positive), 1.1);
        assert_eq!(m(1.3, AdvSign::Negative), 1.3);
        assert_eq!(m(0.7, AdvSign::Negative), 0.0);
        assert_eq!(m(0.7, AdvSign::Positive), 0.7);
        assert_eq!(m(5.0, AdvSign::Zero), 5.0);
    }

    #[test]
    fn sapo_examples() {
        let m = |rho, sign| sapo_multiplier(r(rho), sign, 2.0, 1.0).unwrap();
        assert_eq!(m(1.0, AdvSign::Positive), 1.0);
        assert_eq!(m(1.0, AdvSign::Negative), 1.0);
        assert!(m(3.0, AdvSign::Positive) >= m(3.0, AdvSign::Negative));
        // saturates at 1 + tau_pos
        assert!((m(1e6, AdvSign::Positive) - 3.0).abs() < 1e-12);
        assert!(m(1e-9, AdvSign::Negative) > 0.0);
    }

    #[test]
    fn registry_round_trips_kinds() {
        for kind in [
            SurrogateKind::Gipo { sigma: 0.5 },
            SurrogateKind::ppo_default(),
            SurrogateKind::sapo_default(),
            SurrogateKind::NoClip,
        ] {
            assert_eq!(kind.build().unwrap().kind(), kind);
        }
        assert_eq!(registry().names(), vec!["gipo", "no_clip", "ppo_clip", "sapo"]);
        assert!(SurrogateKind::Gipo { sigma: -1.0 }.build().is_err());
    }

    #[test]
    fn tape_objective_gradient_is_multiplier_times_advantage() {
        let ratios = [0.3, 0.9, 1.05, 1.5, 4.0];
        let advs = [1.0, -2.0, 0.5, -0.7, 1.3];
        for kind in [
            SurrogateKind::Gipo { sigma: 0.7 },
            SurrogateKind::ppo_default(),
            SurrogateKind::sapo_default(),
            SurrogateKind::NoClip,
        ] {
            let sur = kind.build().unwrap();
            let mut tape = Tape::new();
            let logr = tape.param(Array2::from_shape_fn((5, 1), |(i, _)| f64::ln(ratios[i])));
            let ratio = tape.exp(logr);
            let adv = Array2::from_shape_fn((5, 1), |(i, _)| advs[i]);
            let obj = sur.objective(&mut tape, ratio, &adv);
            let total = tape.row_sum(obj);
            let total = tape.mean(total);
            let g = tape.backward(total);
            let g = g.get(logr).unwrap();
            for i in 0..5 {
                let expect = sur.multiplier(ratios[i], advs[i]) * advs[i] / 5.0;
                assert!((g[[i, 0]] - expect).abs() < 1e-12, "{kind}: {i}");
                let v = sur.objective_value(ratios[i], ratios[i], advs[i]);
                assert!((tape.value(obj)[[i, 0]] - v).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn weight_in_unit_interval_and_symmetric(log_rho in -13.0f64..13.0, sigma in 0.05f64..20.0) {
            let rho = log_rho.exp();
            let w = gaussian_weight(r(rho), s(sigma));
            prop_assert!(w > 0.0 || log_rho.abs() / sigma > 38.0);
            prop_assert!(w <= 1.0);
            let w_inv = gaussian_weight(r(1.0 / rho), s(sigma));
            prop_assert!((w - w_inv).abs() < 1e-12);
        }

        #[test]
        fn weight_monotone_in_abs_log(a in 0.0f64..10.0, b in 0.0f64..10.0, sigma in 0.1f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(gaussian_weight(r(lo.exp()), s(sigma)) >= gaussian_weight(r(hi.exp()), s(sigma)));
        }

        #[test]
        fn gipo_multiplier_bounded(log_rho in -13.0f64..13.0, sigma in 0.05f64..3.0) {
            let m = gipo_multiplier(r(log_rho.exp()), s(sigma));
            prop_assert!(m <= (sigma * sigma / 2.0).exp() * (1.0 + 1e-14));
            prop_assert!(m >= 0.0);
        }
    }

    #[test]
    fn sigma_limits() {
        let mut lr = -3.0f64 * 10f64.ln();
        while lr <= 3.0 * 10f64.ln() {
            let rho = lr.exp();
            assert!(gaussian_weight(r(rho), s(1e6)) > 1.0 - 1e-6);
            if (rho - 1.0).abs() > 1e-3 {
                assert!(gaussian_weight(r(rho), s(1e-4)) < 1e-6);
            }
            lr += 0.01;
        }
    }
}
