use rand::seq::index::sample;

use super::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng::rng_for;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compare the tape gradient of the scalar built by `model_fn` against
/// central differences, for up to `samples_per_param` randomly chosen
/// entries of every parameter. The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)`.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    model_fn: F,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = model_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    grads.accumulate_into(&tape, &mut analytic)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = model_fn(&mut t, s)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let n = store.tensor(&name)?.len();
        let mut rng = rng_for(seed, &name);
        let picks = sample(&mut rng, n, samples_per_param.min(n));
        for idx in picks.iter() {
            let orig = probe.tensor(&name)?.data()[idx];
            probe.tensor_mut(&name)?.data_mut()[idx] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[idx] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let exact = analytic.get(&name).expect("param").gradient.data()[idx];
            let abs = (numeric - exact).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}
