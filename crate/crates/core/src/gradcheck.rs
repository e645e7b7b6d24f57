//! Finite-difference verification of autodiff gradients.
//!
//! Entries are sampled per tensor and compared against central differences.
//! The reported error is `||a - n|| / max(||a||, ||n||)` over the vector of all
//! sampled entries, which stays meaningful when individual entries are near
//! zero. Per-tensor errors are kept for diagnosis.
//!
//! With piecewise-linear activations a perturbation of size `h` can move some
//! pre-activation across the knee, and the central difference then measures a
//! secant through two linear pieces rather than the derivative. Such entries
//! are detected from the graph's kink fingerprint at `x + h` and `x - h`,
//! skipped, and replaced by other entries of the same tensor.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{usage, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled from each tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Only tensors whose name starts with one of these are checked; empty means all.
    pub prefixes: Vec<String>,
    /// Cap on the total number of checked tensors, picked at random when exceeded.
    pub max_tensors: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            samples_per_tensor: 3,
            prefixes: Vec::new(),
            max_tensors: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Relative error of the whole sampled gradient vector.
    pub rel_error: f64,
    /// Largest per-tensor relative error and the tensor it came from.
    pub max_tensor_error: f64,
    pub worst: String,
    pub per_tensor: BTreeMap<String, f64>,
    pub entries_checked: usize,
    /// Entries rejected because the perturbation straddled a kink.
    pub kink_skips: usize,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

/// `||a - n|| / max(||a||, ||n||)`, or the plain difference norm when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

impl GradCheckReport {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let err = relative_error(analytic, numeric);
        self.entries_checked += analytic.len();
        if err >= self.max_tensor_error {
            self.max_tensor_error = err;
            self.worst = name.to_string();
        }
        self.per_tensor.insert(name.to_string(), err);
        self.analytic.extend_from_slice(analytic);
        self.numeric.extend_from_slice(numeric);
        self.rel_error = relative_error(&self.analytic, &self.numeric);
    }
}

fn eval_scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(usage("gradient check needs a scalar loss"));
    }
    Ok(t.item())
}

/// Central difference of `eval` at `orig`, or `None` when `x - h` and `x + h`
/// fall in different smooth pieces.
fn central<E>(mut eval: E, orig: f64, h: f64) -> Result<Option<f64>>
where
    E: FnMut(f64) -> Result<(f64, Option<u64>)>,
{
    let (plus, kp) = eval(orig + h)?;
    let (minus, km) = eval(orig - h)?;
    eval(orig)?;
    if kp != km {
        return Ok(None);
    }
    Ok(Some((plus - minus) / (2.0 * h)))
}

/// Up to `want` entries of `len` in random order, trying at most ten times as many.
fn candidates(rng: &mut ChaCha8Rng, len: usize, want: usize) -> Vec<usize> {
    let n = (want * 10).min(len);
    sample(rng, len, n).into_vec()
}

fn pick(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, n).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Compares parameter gradients of `loss` against central differences.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &Graph) -> Var,
{
    let g = Graph::new();
    let l = loss(store, &g);
    eval_scalar(&g, l)?;
    let grads = g.backward(l)?.params(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut names: Vec<String> = store
        .names()
        .filter(|n| opts.prefixes.is_empty() || opts.prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .cloned()
        .collect();
    if let Some(max) = opts.max_tensors {
        let keep = pick(&mut rng, names.len(), max);
        names = keep.into_iter().map(|i| names[i].clone()).collect();
    }

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let len = store.get(&name).map(Tensor::len).unwrap_or(0);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in candidates(&mut rng, len, opts.samples_per_tensor) {
            if numeric.len() == opts.samples_per_tensor {
                break;
            }
            let orig = store.get(&name).expect("listed").data()[i];
            let f = |v: f64| -> Result<(f64, Option<u64>)> {
                work.get_mut(&name).expect("listed").data_mut()[i] = v;
                let g = Graph::with_kink_tracking();
                let l = loss(&work, &g);
                Ok((eval_scalar(&g, l)?, g.kink_signature()))
            };
            match central(f, orig, opts.step)? {
                Some(n) => {
                    numeric.push(n);
                    analytic.push(grads.get(&name).map_or(0.0, |t| t.data()[i]));
                }
                None => report.kink_skips += 1,
            }
        }
        report.record(&name, &analytic, &numeric);
    }
    Ok(report)
}

/// Compares the gradient with respect to an input tensor against central differences.
pub fn check_input_gradient<F>(x: &Tensor, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Var,
{
    let g = Graph::new();
    let xv = g.input(x.clone());
    let l = f(&g, xv);
    eval_scalar(&g, l)?;
    let grads = g.backward(l)?;
    let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = x.clone();
    for i in candidates(&mut rng, x.len(), opts.samples_per_tensor) {
        if numeric.len() == opts.samples_per_tensor {
            break;
        }
        let eval = |v: f64| -> Result<(f64, Option<u64>)> {
            work.data_mut()[i] = v;
            let g = Graph::with_kink_tracking();
            let xv = g.constant(work.clone());
            let l = f(&g, xv);
            Ok((eval_scalar(&g, l)?, g.kink_signature()))
        };
        match central(eval, x.data()[i], opts.step)? {
            Some(n) => {
                numeric.push(n);
                analytic.push(gx.data()[i]);
            }
            None => report.kink_skips += 1,
        }
    }
    report.record("input", &analytic, &numeric);
    Ok(report)
}
