//! Central finite differences, the reference the tape's analytic gradients
//! are checked against.

use crate::error::Result;
use crate::graph::Gradients;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error, `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
    pub max_rel_err: f64,
    /// Tensor where `max_rel_err` occurred.
    pub worst: String,
    /// Number of scalar entries perturbed.
    pub entries: usize,
}

/// Gradient blocks whose infinity norm is below this are compared absolutely:
/// their exact value is (near) zero and the finite difference is pure
/// rounding noise, around `1e-16 · |loss| / h`.
pub const NORM_FLOOR: f64 = 1e-4;

/// Relative error between two gradient blocks, scaled by the larger of the
/// two infinity norms (floored at [`NORM_FLOOR`]).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    diff / scale.max(NORM_FLOOR)
}

/// `∂f/∂x` by central differences with step `h`.
pub fn numeric_gradient<F>(x: &Tensor, h: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Perturbs parameters of `store` one entry at a time and compares the
/// resulting slopes of `loss` against `grads`.
///
/// Tensors larger than `max_entries` are probed on an evenly strided subset
/// of entries. Parameters missing from `grads` are expected to have zero
/// numeric slope.
pub fn check_parameters<F>(
    store: &ParameterStore,
    names: &[String],
    grads: &Gradients,
    h: f64,
    max_entries: usize,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let analytic = grads.param_or_zero(store, name)?;
        let n = analytic.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            a.push(analytic.data()[i]);
            num.push((up - down) / (2.0 * h));
        }
        report.entries += idx.len();
        let err = relative_error(&a, &num);
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = name.clone();
            }
        }
    }
    Ok(report)
}
