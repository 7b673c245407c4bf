//! Central-difference gradient verification.

use crate::nn::Module;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > self.tolerance)
    }
}

/// Compares `analytic[i]` with central differences of `f` with respect to
/// `inputs[i]`, entry by entry.
pub fn grad_check<F>(
    names: &[&str],
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut work = inputs.to_vec();
    let mut entries = Vec::with_capacity(inputs.len());
    for (t, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[t].shape(), "gradient shape for input {t}");
        let mut worst = GradCheckEntry {
            name: names.get(t).map_or_else(|| format!("input{t}"), |s| s.to_string()),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let fp = f(&work);
            work[t].data_mut()[i] = orig - h;
            let fm = f(&work);
            work[t].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    GradCheckReport { entries, tolerance }
}

/// Checks every parameter gradient currently accumulated in `module` against
/// central differences of `loss`. `loss` must evaluate the module without
/// touching gradients (a plain forward) and be deterministic.
pub fn grad_check_module<M, F>(module: &mut M, h: f64, tolerance: f64, loss: F) -> GradCheckReport
where
    M: Module<f64>,
    F: FnMut(&mut M) -> f64,
{
    grad_check_module_sampled(module, h, tolerance, usize::MAX, loss)
}

/// Like [`grad_check_module`] but probes at most `per_param` evenly spaced
/// entries of each parameter, for networks too large to check exhaustively.
pub fn grad_check_module_sampled<M, F>(
    module: &mut M,
    h: f64,
    tolerance: f64,
    per_param: usize,
    mut loss: F,
) -> GradCheckReport
where
    M: Module<f64>,
    F: FnMut(&mut M) -> f64,
{
    let mut params = Vec::new();
    module.visit_params(&mut |p| params.push((p.name.clone(), p.numel(), p.grad.clone())));
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, numel, grad)) in params.into_iter().enumerate() {
        let mut worst = GradCheckEntry {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let probes = numel.min(per_param.max(1));
        for j in 0..probes {
            let i = j * numel / probes;
            let mut orig = 0.0;
            let mut k = 0;
            module.visit_params(&mut |p| {
                if k == pi {
                    orig = p.value.data()[i];
                }
                k += 1;
            });
            let set = |value: f64, module: &mut M| {
                let mut k = 0;
                module.visit_params_mut(&mut |p| {
                    if k == pi {
                        p.value.data_mut()[i] = value;
                    }
                    k += 1;
                });
            };
            set(orig + h, module);
            let fp = loss(module);
            set(orig - h, module);
            let fm = loss(module);
            set(orig, module);
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err || j == 0 {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    GradCheckReport { entries, tolerance }
}
