//! Exact bias and variance of one-step surrogate gradient estimators.

use std::io::Write;

use super::{solve_values, ExactMdp, PolicyTable};
use crate::error::{domain, Result};
use crate::policy::{GradientVector, SoftmaxTabularPolicy};
use crate::surrogate::{Surrogate, SurrogateKind};

/// Exact moments of `g(a) = m * score(s, a) * A(s, a)` under `a ~ mu(.|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub mean: GradientVector,
    pub true_grad: GradientVector,
    /// `||mean - true_grad||_2`.
    pub bias: f64,
    /// Trace of the covariance of `g`.
    pub variance: f64,
}

/// Enumerates actions at `eval_state`. The gradient is taken with respect to
/// the target's logits at that state only, with advantages of the target
/// policy from an exact Bellman solve.
pub fn exact_grad_stats(
    mdp: &ExactMdp,
    target: &SoftmaxTabularPolicy,
    behavior: &PolicyTable,
    method: &dyn Surrogate,
    eval_state: usize,
) -> Result<GradStats> {
    let pi = PolicyTable::from_softmax(target);
    let values = solve_values(mdp, &pi)?;
    grad_stats_with_advantage(target, behavior, method, eval_state, &values.advantage[eval_state])
}

fn grad_stats_with_advantage(
    target: &SoftmaxTabularPolicy,
    behavior: &PolicyTable,
    method: &dyn Surrogate,
    s: usize,
    advantage: &[f64],
) -> Result<GradStats> {
    if s >= target.n_states() || s >= behavior.n_states() {
        return Err(domain(format!("evaluation state {s} out of range")));
    }
    let pi = PolicyTable::from_softmax(target);
    let n_actions = advantage.len();
    if behavior.n_actions() != n_actions || pi.n_actions() != n_actions {
        return Err(domain("action counts disagree"));
    }
    if let Some(a) = (0..n_actions).find(|&a| !(behavior.prob(s, a) > 0.0) || !(pi.prob(s, a) > 0.0)) {
        return Err(domain(format!("action {a} has zero probability at state {s}; full support required")));
    }

    let mut samples = Vec::with_capacity(n_actions);
    let mut mean = GradientVector::zeros(n_actions);
    let mut true_grad = GradientVector::zeros(n_actions);
    for a in 0..n_actions {
        let score = GradientVector(target.score_block(s, a)?);
        let adv = advantage[a];
        let rho = pi.prob(s, a) / behavior.prob(s, a);
        let g = score.scaled(method.multiplier(rho, adv) * adv);
        mean.add_scaled(behavior.prob(s, a), &g);
        true_grad.add_scaled(pi.prob(s, a) * adv, &score);
        samples.push(g);
    }
    let variance = samples
        .iter()
        .enumerate()
        .map(|(a, g)| {
            let d = g - &mean;
            behavior.prob(s, a) * d.dot(&d)
        })
        .sum::<f64>();
    let bias = (&mean - &true_grad).norm();
    Ok(GradStats {
        mean,
        true_grad,
        bias,
        variance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasVarPoint {
    pub method: SurrogateKind,
    /// Principal parameter (sigma, eps or tau_pos); `None` for no clipping.
    pub parameter: Option<f64>,
    pub bias: f64,
    pub variance: f64,
    /// Not dominated by any other point of the sweep.
    pub on_frontier: bool,
}

impl BiasVarPoint {
    /// `self` is no worse in both coordinates and strictly better in one.
    pub fn dominates(&self, other: &BiasVarPoint) -> bool {
        self.bias <= other.bias
            && self.variance <= other.variance
            && (self.bias < other.bias || self.variance < other.variance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoSweep {
    pub case: String,
    pub points: Vec<BiasVarPoint>,
}

impl ParetoSweep {
    pub fn gipo_points(&self) -> impl Iterator<Item = &BiasVarPoint> {
        self.points.iter().filter(|p| matches!(p.method, SurrogateKind::Gipo { .. }))
    }

    pub fn point(&self, name: &str) -> Option<&BiasVarPoint> {
        self.points.iter().find(|p| p.method.name() == name)
    }

    /// GIPO points not dominated by another GIPO point.
    pub fn gipo_frontier(&self) -> Vec<&BiasVarPoint> {
        let gipo: Vec<_> = self.gipo_points().collect();
        gipo.iter()
            .filter(|p| !gipo.iter().any(|q| q.dominates(p)))
            .copied()
            .collect()
    }

    /// Some GIPO point is within `tol` of `baseline` in both coordinates, or
    /// the baseline is itself undominated by every GIPO point.
    pub fn gipo_dominates(&self, baseline: &BiasVarPoint, tol: f64) -> bool {
        let covered = self
            .gipo_points()
            .any(|g| g.bias <= baseline.bias + tol && g.variance <= baseline.variance + tol);
        covered || !self.gipo_points().any(|g| g.dominates(baseline))
    }

    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<()> {
        write_points_csv(out, &[self], header)
    }
}

/// Writes `case,method,param,bias,variance,on_frontier` rows.
pub fn write_points_csv<W: Write>(mut out: W, sweeps: &[&ParetoSweep], header: bool) -> Result<()> {
    if header {
        writeln!(out, "case,method,param,bias,variance,on_frontier")?;
    }
    for sweep in sweeps {
        for p in &sweep.points {
            let param = p.parameter.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                sweep.case,
                p.method.name(),
                param,
                p.bias,
                p.variance,
                p.on_frontier
            )?;
        }
    }
    Ok(())
}

/// One GIPO point per sigma plus one point per baseline, with frontier flags
/// computed over all points.
pub fn pareto_sweep(
    mdp: &ExactMdp,
    target: &SoftmaxTabularPolicy,
    case: &str,
    behavior: &PolicyTable,
    sigma_grid: &[f64],
    baselines: &[SurrogateKind],
    eval_state: usize,
) -> Result<ParetoSweep> {
    if sigma_grid.is_empty() {
        return Err(domain("sigma grid is empty"));
    }
    let pi = PolicyTable::from_softmax(target);
    let values = solve_values(mdp, &pi)?;
    let advantage = values
        .advantage
        .get(eval_state)
        .ok_or_else(|| domain(format!("evaluation state {eval_state} out of range")))?;

    let kinds = sigma_grid
        .iter()
        .map(|&sigma| SurrogateKind::Gipo { sigma })
        .chain(baselines.iter().copied());
    let mut points = Vec::new();
    for kind in kinds {
        let method = kind.build()?;
        let stats = grad_stats_with_advantage(target, behavior, method.as_ref(), eval_state, advantage)?;
        points.push(BiasVarPoint {
            method: kind,
            parameter: kind.param(),
            bias: stats.bias,
            variance: stats.variance,
            on_frontier: false,
        });
    }
    let flags: Vec<bool> = points
        .iter()
        .map(|p| !points.iter().any(|q| q.dominates(p)))
        .collect();
    for (p, flag) in points.iter_mut().zip(flags) {
        p.on_frontier = flag;
    }
    Ok(ParetoSweep {
        case: case.to_string(),
        points,
    })
}

/// The three baselines every sweep includes.
pub fn default_baselines() -> [SurrogateKind; 3] {
    [SurrogateKind::ppo_default(), SurrogateKind::sapo_default(), SurrogateKind::NoClip]
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(domain("log grid needs 0 < lo <= hi and n >= 1"));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{gridworld, BehaviorCase};
    use crate::surrogate::{Gipo, NoClip, PpoClip};

    fn setup() -> (ExactMdp, SoftmaxTabularPolicy) {
        (
            gridworld(2, 2, 0.99).unwrap(),
            SoftmaxTabularPolicy::uniform_logits(4, &[0.0, 1.0, 0.0, 1.0]).unwrap(),
        )
    }

    #[test]
    fn no_clip_is_unbiased_in_every_case() {
        let (mdp, pi) = setup();
        for case in BehaviorCase::standard() {
            let mu = case.table(4).unwrap();
            let st = exact_grad_stats(&mdp, &pi, &mu, &NoClip, 0).unwrap();
            assert!(st.bias < 1e-12, "case {}: {}", case.id, st.bias);
        }
    }

    #[test]
    fn on_policy_behavior_is_unbiased() {
        let (mdp, pi) = setup();
        let mu = PolicyTable::from_softmax(&pi);
        let on_policy = exact_grad_stats(&mdp, &pi, &mu, &NoClip, 0).unwrap();
        for method in [
            Box::new(Gipo::new(0.3).unwrap()) as Box<dyn Surrogate>,
            Box::new(PpoClip::new(0.2).unwrap()),
        ] {
            let st = exact_grad_stats(&mdp, &pi, &mu, method.as_ref(), 0).unwrap();
            assert!(st.bias < 1e-12);
            assert!((st.variance - on_policy.variance).abs() < 1e-12);
        }
    }

    #[test]
    fn ppo_clips_everything_in_case_a() {
        let (mdp, pi) = setup();
        let mu = BehaviorCase::a().table(4).unwrap();
        let st = exact_grad_stats(&mdp, &pi, &mu, &PpoClip::new(0.2).unwrap(), 0).unwrap();
        assert!(st.variance < 1e-15);
        assert!((st.bias - st.true_grad.norm()).abs() < 1e-12);
    }

    #[test]
    fn zero_support_is_rejected() {
        let (mdp, pi) = setup();
        let mut probs = vec![vec![0.0, 0.5, 0.0, 0.5]; 4];
        probs[3] = vec![0.25; 4];
        let mu = PolicyTable::new(probs).unwrap();
        assert!(exact_grad_stats(&mdp, &pi, &mu, &NoClip, 0).is_err());
    }

    #[test]
    fn sweep_limits_and_flags() {
        let (mdp, pi) = setup();
        let mu = BehaviorCase::a().table(4).unwrap();
        let sweep = pareto_sweep(&mdp, &pi, "A", &mu, &[1e-3, 1e3], &default_baselines(), 0).unwrap();
        assert_eq!(sweep.points.len(), 5);
        let tiny = &sweep.points[0];
        let huge = &sweep.points[1];
        let noclip = sweep.point("no_clip").unwrap();
        let g_true = exact_grad_stats(&mdp, &pi, &mu, &NoClip, 0).unwrap().true_grad.norm();
        assert!((tiny.bias - g_true).abs() < 1e-9);
        assert!(tiny.variance < 1e-12);
        assert!((huge.bias - noclip.bias).abs() < 1e-6);
        assert!((huge.variance - noclip.variance).abs() < 1e-6);
        for p in &sweep.points {
            assert_eq!(p.on_frontier, !sweep.points.iter().any(|q| q.dominates(p)));
        }
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("case,method,param,bias,variance,on_frontier\n"));
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("A,no_clip,,"));
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.05, 50.0, 25).unwrap();
        assert_eq!(g.len(), 25);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[24] - 50.0).abs() < 1e-12);
        assert!(log_grid(0.0, 1.0, 3).is_err());
    }
}
