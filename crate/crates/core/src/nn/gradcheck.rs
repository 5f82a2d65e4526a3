//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::{ParamGrads, ParamId, ParameterStore, Real};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum acceptable relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so components whose
    /// true gradient is ~0 are judged on absolute error.
    pub denominator_floor: f64,
    /// Elements probed per parameter; larger tensors are sampled with a
    /// fixed stride.
    pub max_elements_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            denominator_floor: 1e-2,
            max_elements_per_param: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len as f64 / max as f64;
    (0..max).map(|i| (i as f64 * stride) as usize).collect()
}

/// Compares the gradients returned by `f` against central differences of the
/// loss it returns.
pub fn grad_check<T, F>(
    params: &ParameterStore<T>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&ParameterStore<T>) -> Result<(T, ParamGrads<T>)>,
{
    let (_, analytic) = f(params)?;
    let mut work = params.clone();
    let h = T::lit(opts.step);
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
    };
    for i in 0..params.len() {
        let id = ParamId(i);
        let len = params.get(id).len();
        let mut worst: f64 = 0.0;
        let probes = probe_indices(len, opts.max_elements_per_param);
        for &j in &probes {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let (plus, _) = f(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let (minus, _) = f(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = ((plus - minus) / (h + h)).to_f64().unwrap_or(f64::NAN);
            let a = analytic[i]
                .as_ref()
                .map_or(0.0, |g| g.data()[j].to_f64().unwrap_or(f64::NAN));
            let err = relative_error(a, numeric, opts.denominator_floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst,
            checked: probes.len(),
        });
    }
    Ok(report)
}
