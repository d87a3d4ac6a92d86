//! Analytic-vs-numeric gradient comparison.
//!
//! The graph under test is rebuilt from scratch for every perturbation, so
//! the numeric side never touches the backward rules it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// When set, each element is differenced with `step`, `step/10`,
    /// `step/100` and `step/1000`, and the first estimate that agrees with
    /// the next finer one to this relative amount is used. Near ReLU or
    /// max-pool switches the estimate drifts with the step (a crossed kink is
    /// not a derivative); elements with no agreeing pair are skipped,
    /// replaced by other random ones and counted in the report.
    pub consistency: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-7, max_elements: None, seed: 0, consistency: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// Elements whose difference estimate never settled across steps.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckEntry {
    /// No element of this input had a stable difference estimate.
    pub fn inconclusive(&self) -> bool {
        self.checked == 0 && self.skipped > 0
    }
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<6} {:<28} n={:<6} skipped={:<4} max_rel={:.3e} max_abs={:.3e}",
                if e.inconclusive() {
                    "SKIP"
                } else if e.passed {
                    "ok"
                } else {
                    "FAIL"
                },
                e.name,
                e.checked,
                e.skipped,
                e.max_rel_error,
                e.max_abs_error
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Checks `d(build(inputs))/d(inputs)` against central differences.
///
/// `build` receives a fresh tape and one parameter [`Var`] per input and must
/// return a scalar.
pub fn grad_check<F>(inputs: &[(&str, Tensor<f64>)], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| tape.grad(v).cloned().map_or_else(|| Tensor::zeros(t.dims().to_vec()), Ok))
        .collect::<Result<_>>()?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let n = values[k].numel();
        let wanted = cfg.max_elements.map_or(n, |m| m.min(n));
        // A random visiting order; without the consistency test only its prefix is used.
        let mut order = sample(&mut rng, n, n).into_vec();
        if cfg.consistency.is_none() {
            order.truncate(wanted);
            order.sort_unstable();
        }
        let steps: &[f64] = if cfg.consistency.is_some() {
            &[cfg.step, cfg.step / 10.0, cfg.step / 100.0, cfg.step / 1000.0]
        } else {
            &[cfg.step]
        };
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for &i in &order {
            if entry.checked == wanted {
                break;
            }
            let mut central = |step: f64| -> Result<f64> {
                let orig = values[k].data()[i];
                values[k].data_mut()[i] = orig + step;
                let plus = eval(&values)?;
                values[k].data_mut()[i] = orig - step;
                let minus = eval(&values)?;
                values[k].data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = match cfg.consistency {
                None => Some(central(steps[0])?),
                Some(tol) => {
                    let mut found = None;
                    let mut coarse = central(steps[0])?;
                    for &step in &steps[1..] {
                        let fine = central(step)?;
                        if relative_error(coarse, fine, cfg.abs_floor) <= tol {
                            found = Some(coarse);
                            break;
                        }
                        coarse = fine;
                    }
                    found
                }
            };
            let Some(numeric) = numeric else {
                entry.skipped += 1;
                continue;
            };
            let a = analytic[k].data()[i];
            let rel = relative_error(a, numeric, cfg.abs_floor);
            if !rel.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            entry.checked += 1;
            entry.max_abs_error = entry.max_abs_error.max((a - numeric).abs());
            if rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
        }
        entry.passed = entry.max_rel_error < cfg.tolerance && (entry.checked > 0 || n == 0);
        entries.push(entry);
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let x = Tensor::from_f64(vec![3], &[0.3, -0.7, 0.2]).unwrap();
        let w = Tensor::from_f64(vec![2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let b = Tensor::from_f64(vec![2], &[0.05, -0.05]).unwrap();
        let report = grad_check(
            &[("x", x), ("w", w), ("b", b)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                t.sum(y)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn step_ladder_settles_past_a_switch() {
        // 3e-6 sits inside the first two steps of the ReLU switch at zero
        let x = Tensor::from_f64(vec![3], &[0.5, 3e-6, -0.25]).unwrap();
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        };
        let plain = grad_check(&[("x", x.clone())], build, &GradCheckConfig { step: 1e-4, ..Default::default() }).unwrap();
        assert!(!plain.passed());
        let cfg = GradCheckConfig { step: 1e-4, consistency: Some(1e-4), ..Default::default() };
        let report = grad_check(&[("x", x)], build, &cfg).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!((report.entries[0].checked, report.entries[0].skipped), (3, 0));
    }
}
