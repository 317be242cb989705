use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries where one side of the stencil crossed a kink, so the
    /// one-sided difference on the smooth side was used.
    pub one_sided: usize,
    /// Entries where both sides crossed a kink.
    pub skipped: usize,
}

/// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks every parameter entry of `store` used by the scalar function `f`.
///
/// `f` records a forward pass on the supplied tape and returns its scalar
/// output. A perturbation that moves the evaluation onto a different smooth
/// piece (as reported by [`Tape::kink_signature`]) would compare against a
/// meaningless secant, so that side is dropped.
pub fn finite_difference_check<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let base = tape.value(out).data()[0];
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out, store)?;

    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = f(s, &mut t)?;
        Ok((t.value(v).data()[0], t.kink_signature()))
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + step;
            let (plus, sig_plus) = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - step;
            let (minus, sig_minus) = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = match (sig_plus == base_sig, sig_minus == base_sig) {
                (true, true) => (plus - minus) / (2.0 * step),
                (true, false) => {
                    report.one_sided += 1;
                    (plus - base) / step
                }
                (false, true) => {
                    report.one_sided += 1;
                    (base - minus) / step
                }
                (false, false) => {
                    report.skipped += 1;
                    continue;
                }
            };
            let analytic = grads.get(id).data()[k];
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
