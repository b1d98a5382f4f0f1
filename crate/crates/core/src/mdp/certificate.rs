//! Exact evaluation of the attenuated surrogate and its bias term.

use super::{expected_return, occupancy, solve_values, ExactMdp, PolicyTable};
use crate::error::Result;
use crate::surrogate::{gaussian_weight, DampingScale, Ratio};

/// `J(pi) + 1/(1-gamma) * E_{s~d_mu, a~mu}[omega(rho') rho' A_pi(s,a)]`
/// with `rho' = pi_new / mu`.
pub fn attenuated_surrogate(
    mdp: &ExactMdp,
    pi: &PolicyTable,
    mu: &PolicyTable,
    pi_new: &PolicyTable,
    sigma: DampingScale,
) -> Result<f64> {
    let values = solve_values(mdp, pi)?;
    let d_mu = occupancy(mdp, mu)?;
    let mut acc = 0.0;
    for (s, &ds) in d_mu.iter().enumerate() {
        for a in 0..mdp.n_actions() {
            let m = mu.prob(s, a);
            if m == 0.0 || pi_new.prob(s, a) == 0.0 {
                continue;
            }
            let rho = Ratio::new(pi_new.prob(s, a) / m)?;
            acc += ds * m * gaussian_weight(rho, sigma) * rho.get() * values.advantage[s][a];
        }
    }
    Ok(values.v[mdp.initial_state()] + acc / (1.0 - mdp.gamma()))
}

/// `E_{s~d_mu, a~pi_new}[1 - omega(rho')]`, the quantity bounded by the
/// attenuation bound.
pub fn attenuation_gap(
    mdp: &ExactMdp,
    mu: &PolicyTable,
    pi_new: &PolicyTable,
    sigma: DampingScale,
) -> Result<f64> {
    let d_mu = occupancy(mdp, mu)?;
    let mut acc = 0.0;
    for (s, &ds) in d_mu.iter().enumerate() {
        for a in 0..mdp.n_actions() {
            let p = pi_new.prob(s, a);
            if p == 0.0 {
                continue;
            }
            let rho = Ratio::new(p / mu.prob(s, a))?;
            acc += ds * p * (1.0 - gaussian_weight(rho, sigma));
        }
    }
    Ok(acc)
}

/// Exact `J(pi_new)`; convenience alias used alongside the surrogate.
pub fn performance(mdp: &ExactMdp, policy: &PolicyTable) -> Result<f64> {
    expected_return(mdp, policy)
}
