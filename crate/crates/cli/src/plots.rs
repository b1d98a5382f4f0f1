//! Figure families, selected by name from a registry like every other
//! strategy in the workspace.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use anyhow::{bail, Result};

use gipo_core::diagnostics::window_mean;
use gipo_core::registry::Registry;
use gipo_core::surrogate::SurrogateKind;

use crate::svg::{render, Axis, Bars, Chart, Mark, Panel, Series};
use crate::table::Table;

/// Share of the env-step axis averaged for end-of-run summaries.
const FINAL_WINDOW: f64 = 0.2;

pub trait Plot: Send + Sync {
    /// Inputs the figure needs; zero means it is computed analytically.
    fn min_inputs(&self) -> usize {
        1
    }

    fn render(&self, inputs: &[Table]) -> Result<String>;
}

pub fn registry() -> &'static Registry<dyn Plot> {
    static REGISTRY: OnceLock<Registry<dyn Plot>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Plot> = Registry::new("plot kind");
        r.register("weight_curves", "effective multipliers vs rho and ln rho (sigma, eps)", |p| {
            Ok(Box::new(WeightCurves {
                sigma: p.get_or("sigma", 1.0),
                eps: p.get_or("eps", 0.2),
            }))
        })
        .register("biasvar_pareto", "bias vs variance per case with the GIPO frontier", |_| {
            Ok(Box::new(BiasVarPareto))
        })
        .register("learning_curves", "exact return vs env steps per metrics stream", |_| {
            Ok(Box::new(LearningCurves))
        })
        .register("utilization_bars", "final-window dead/suppressed/near-zero fractions", |_| {
            Ok(Box::new(UtilizationBars))
        })
        .register("kl_ess_scatter", "behavior KL vs normalized old-sample ESS", |_| {
            Ok(Box::new(Scatter {
                title: "Drift vs stale-sample ESS",
                x: "kl_to_behavior",
                y: "ess_old_norm",
            }))
        })
        .register("lag_tail_scatter", "version-gap p95 vs ratio tail drift", |_| {
            Ok(Box::new(Scatter {
                title: "Policy lag vs ratio tail",
                x: "old_gap_p95",
                y: "d95",
            }))
        })
        .register("sigma_sensitivity", "final-window return vs sigma from a sweep", |_| {
            Ok(Box::new(SigmaSensitivity))
        });
        r
    })
}

struct WeightCurves {
    sigma: f64,
    eps: f64,
}

impl Plot for WeightCurves {
    fn min_inputs(&self) -> usize {
        0
    }

    fn render(&self, _: &[Table]) -> Result<String> {
        let kinds = [
            (format!("GIPO sigma={}", self.sigma), SurrogateKind::Gipo { sigma: self.sigma }),
            (format!("PPO eps={}", self.eps), SurrogateKind::PpoClip { eps: self.eps }),
            ("SAPO".to_string(), SurrogateKind::sapo_default()),
            ("no clip".to_string(), SurrogateKind::NoClip),
        ];
        let mut linear = Vec::new();
        let mut logs = Vec::new();
        for (label, kind) in kinds {
            let s = kind.build()?;
            let signs: &[(f64, &str)] = match kind {
                SurrogateKind::Gipo { .. } | SurrogateKind::NoClip => &[(1.0, "")],
                _ => &[(1.0, " A>0"), (-1.0, " A<0")],
            };
            for (i, &(adv, suffix)) in signs.iter().enumerate() {
                let mark = if i == 0 { Mark::Line } else { Mark::Dashed };
                let on_rho = (1..=300).map(|k| k as f64 / 100.0).map(|r| (r, s.multiplier(r, adv))).collect();
                let on_log = (-300..=300)
                    .map(|k| k as f64 / 100.0)
                    .map(|x| (x, s.multiplier(x.exp(), adv)))
                    .collect();
                linear.push(Series::new(format!("{label}{suffix}"), on_rho, mark));
                logs.push(Series::new(format!("{label}{suffix}"), on_log, mark));
            }
        }
        Ok(render(
            "Effective gradient multipliers",
            &[
                Chart::Xy(Panel {
                    title: "vs ratio".into(),
                    x: Axis::linear("rho"),
                    y: Axis::linear("multiplier"),
                    series: linear,
                }),
                Chart::Xy(Panel {
                    title: "vs log ratio".into(),
                    x: Axis::linear("ln rho"),
                    y: Axis::linear("multiplier"),
                    series: logs,
                }),
            ],
        ))
    }
}

struct BiasVarPareto;

impl Plot for BiasVarPareto {
    fn render(&self, inputs: &[Table]) -> Result<String> {
        // case -> method -> points
        let mut cases: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
        for t in inputs {
            let (case, method) = (t.strings("case")?, t.strings("method")?);
            let (bias, var) = (t.floats("bias")?, t.floats("variance")?);
            for i in 0..t.len() {
                cases
                    .entry(case[i].clone())
                    .or_default()
                    .entry(method[i].clone())
                    .or_default()
                    .push((bias[i], var[i]));
            }
        }
        let charts = cases
            .into_iter()
            .map(|(case, methods)| {
                let mut series = Vec::new();
                if let Some(gipo) = methods.get("gipo") {
                    let mut frontier: Vec<(f64, f64)> = gipo
                        .iter()
                        .filter(|p| !gipo.iter().any(|q| dominates(q, p)))
                        .copied()
                        .collect();
                    frontier.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                    series.push(Series::new("GIPO sweep", gipo.clone(), Mark::Points));
                    series.push(Series::new("GIPO frontier", frontier, Mark::Dashed));
                }
                for (name, pts) in methods.iter().filter(|(m, _)| m.as_str() != "gipo") {
                    series.push(Series::new(name.clone(), pts.clone(), Mark::Points));
                }
                Chart::Xy(Panel {
                    title: format!("Case {case}"),
                    x: Axis::linear("bias"),
                    y: Axis::linear("variance"),
                    series,
                })
            })
            .collect::<Vec<_>>();
        Ok(render("Bias-variance trade-off", &charts))
    }
}

fn dominates(a: &(f64, f64), b: &(f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

fn series_label(t: &Table) -> Result<String> {
    let method = t.strings("method")?.into_iter().next().unwrap_or_default();
    let sigma = t.optional("sigma")?.into_iter().next().flatten();
    let label = t.label();
    Ok(match sigma {
        Some(s) => format!("{label} ({method}, sigma={s})"),
        None => format!("{label} ({method})"),
    })
}

/// `(env_steps, value)` pairs for the rows where `column` is present.
fn stream(t: &Table, column: &str) -> Result<Vec<(f64, f64)>> {
    let steps = t.floats("env_steps")?;
    Ok(t.optional(column)?
        .into_iter()
        .zip(steps)
        .filter_map(|(v, s)| v.map(|v| (s, v)))
        .collect())
}

fn final_mean(t: &Table, column: &str) -> Result<f64> {
    let pts: Vec<(u64, f64)> = stream(t, column)?.into_iter().map(|(s, v)| (s as u64, v)).collect();
    if pts.is_empty() {
        bail!("{}: column `{column}` has no values", t.path.display());
    }
    Ok(window_mean(&pts, FINAL_WINDOW)?)
}

struct LearningCurves;

impl Plot for LearningCurves {
    fn render(&self, inputs: &[Table]) -> Result<String> {
        let series = inputs
            .iter()
            .map(|t| Ok(Series::new(series_label(t)?, stream(t, "avg_return")?, Mark::Line)))
            .collect::<Result<Vec<_>>>()?;
        Ok(render(
            "Learning curves",
            &[Chart::Xy(Panel {
                title: "exact discounted return".into(),
                x: Axis::linear("env steps"),
                y: Axis::linear("return"),
                series,
            })],
        ))
    }
}

struct UtilizationBars;

impl Plot for UtilizationBars {
    fn render(&self, inputs: &[Table]) -> Result<String> {
        let columns = ["dead_frac", "suppressed_frac", "near_zero_frac"];
        let mut groups: Vec<(String, Vec<f64>)> = columns.iter().map(|c| (c.to_string(), Vec::new())).collect();
        for t in inputs {
            for (g, c) in groups.iter_mut().zip(columns) {
                g.1.push(final_mean(t, c)?);
            }
        }
        Ok(render(
            "Sample utilization (final window)",
            &[Chart::Bars(Bars {
                title: String::new(),
                y_label: "fraction of batch".into(),
                categories: inputs.iter().map(Table::label).collect(),
                groups,
            })],
        ))
    }
}

struct Scatter {
    title: &'static str,
    x: &'static str,
    y: &'static str,
}

impl Plot for Scatter {
    fn render(&self, inputs: &[Table]) -> Result<String> {
        let series = inputs
            .iter()
            .map(|t| {
                let pts = t
                    .optional(self.x)?
                    .into_iter()
                    .zip(t.optional(self.y)?)
                    .filter_map(|(x, y)| Some((x?, y?)))
                    .collect();
                Ok(Series::new(series_label(t)?, pts, Mark::Points))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(render(
            self.title,
            &[Chart::Xy(Panel {
                title: String::new(),
                x: Axis::linear(self.x),
                y: Axis::linear(self.y),
                series,
            })],
        ))
    }
}

struct SigmaSensitivity;

impl Plot for SigmaSensitivity {
    fn render(&self, inputs: &[Table]) -> Result<String> {
        let series = inputs
            .iter()
            .map(|t| {
                // Average seeds that share a sigma.
                let mut by_sigma: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
                for (s, r) in t.floats("sigma")?.into_iter().zip(t.floats("final_return")?) {
                    let e = by_sigma.entry(s.to_bits()).or_insert((s, 0.0, 0));
                    e.1 += r;
                    e.2 += 1;
                }
                let mut pts: Vec<(f64, f64)> = by_sigma.values().map(|(s, sum, k)| (*s, sum / *k as f64)).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Ok(Series::new(t.label(), pts, Mark::Line))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(render(
            "Sensitivity to sigma",
            &[Chart::Xy(Panel {
                title: String::new(),
                x: Axis::log("sigma"),
                y: Axis::linear("final-window return"),
                series,
            })],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gipo_core::registry::Params;
    use std::fs;

    #[test]
    fn every_kind_is_registered() {
        let names = registry().names();
        for kind in [
            "weight_curves",
            "biasvar_pareto",
            "learning_curves",
            "utilization_bars",
            "kl_ess_scatter",
            "lag_tail_scatter",
            "sigma_sensitivity",
        ] {
            assert!(names.contains(&kind), "{kind}");
        }
        assert!(registry().build("pie", &Params::new()).is_err());
    }

    #[test]
    fn weight_curves_are_deterministic() {
        let params = Params::from([("sigma".to_string(), 1.0), ("eps".to_string(), 0.2)]);
        let plot = registry().build("weight_curves", &params).unwrap();
        let a = plot.render(&[]).unwrap();
        assert_eq!(a, plot.render(&[]).unwrap());
        assert!(a.contains("GIPO sigma=1") && a.contains("PPO eps=0.2 A&lt;0"));
    }

    #[test]
    fn pareto_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        fs::write(
            &path,
            "case,method,param,bias,variance,on_frontier\nA,gipo,0.1,0.3,0.0,true\nA,gipo,1,0.1,0.2,true\n\
             A,gipo,2,0.2,0.3,false\nA,ppo_clip,0.2,0.3,0.1,false\n",
        )
        .unwrap();
        let t = Table::read(&path).unwrap();
        let svg = registry().build("biasvar_pareto", &Params::new()).unwrap().render(&[t]).unwrap();
        assert!(svg.contains("Case A") && svg.contains("stroke-dasharray"));
        assert_eq!(svg.matches("<circle").count(), 4);
    }
}
