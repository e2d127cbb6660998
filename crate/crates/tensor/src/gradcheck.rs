use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Param, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Upper bound on perturbed entries per parameter; entries are taken at
    /// an even stride when a parameter is larger. `None` checks everything.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_diff: f64,
    pub max_abs_fd: f64,
    /// `max |g_analytic − g_fd| / (max |g_fd| + 1e-8)` over checked entries.
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::inference();
    let loss = f(&mut g, store)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::Contract(
            "grad_check needs a scalar loss".into(),
        ));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of every trainable parameter against
/// central finite differences. Leaves analytic gradients in `store`.
///
/// A tolerance of zero never passes.
pub fn grad_check<F>(
    f: F,
    store: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let first = eval(&f, store)?;
    let second = eval(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;

    let targets: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut params = Vec::with_capacity(targets.len());
    for id in targets {
        let Param {
            name, value, grad, ..
        } = store.get(id).clone();
        let n = value.numel();
        let analytic = grad.map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut max_abs_diff: f64 = 0.0;
        let mut max_abs_fd: f64 = 0.0;
        for &e in &entries {
            let orig = value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.step;
            let plus = eval(&f, store);
            store.get_mut(id).value.data_mut()[e] = orig - opts.step;
            let minus = eval(&f, store);
            store.get_mut(id).value.data_mut()[e] = orig;
            let fd = (plus? - minus?) / (2.0 * opts.step);
            max_abs_diff = max_abs_diff.max((analytic[e] - fd).abs());
            max_abs_fd = max_abs_fd.max(fd.abs());
        }
        let rel_err = max_abs_diff / (max_abs_fd + 1e-8);
        params.push(ParamCheck {
            name,
            checked: entries.len(),
            max_abs_diff,
            max_abs_fd,
            rel_err,
            passed: opts.tol > 0.0 && rel_err <= opts.tol,
        });
    }
    let passed = opts.tol > 0.0 && params.iter().all(|p| p.passed);
    Ok(GradCheckReport {
        tol: opts.tol,
        params,
        passed,
    })
}
