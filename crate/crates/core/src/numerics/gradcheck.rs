use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - fd| / max(1, |fd|)` over every parameter coordinate.
    pub max_rel_error: f64,
    /// Name and flat index of the coordinate attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval<F>(f: &F, params: &ParamSet<f64>) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &'a ParamSet<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `step` on every coordinate of `params`.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, step: f64) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &'a ParamSet<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite("loss at the base point".into()));
        }
        tape.backward(loss)?.into_param_grads()
    };

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let up = eval(&f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let down = eval(&f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss when perturbing '{name}'[{i}]"
                )));
            }
            let fd = (up - down) / (2.0 * step);
            let an = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = (an - fd).abs() / fd.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
