//! Central-difference checks of autograd gradients, meant for f64 models.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self, floor: f64) -> f64 {
        self.abs_error() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    /// Largest relative error, ignoring entries whose absolute error is
    /// already below `atol`.
    pub fn max_rel_error(&self, atol: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.abs_error() > atol)
            .map(|e| e.rel_error(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn worst(&self, atol: f64) -> Option<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| e.abs_error() > atol)
            .max_by(|a, b| a.rel_error(f64::MIN_POSITIVE).total_cmp(&b.rel_error(f64::MIN_POSITIVE)))
    }

    pub fn passes(&self, rtol: f64, atol: f64) -> bool {
        self.max_rel_error(atol) <= rtol
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}

fn pick(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if count >= n {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, count).into_vec();
        v.sort_unstable();
        v
    }
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn from_flat(v: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// Compares d f(x) / dx against central differences at up to `samples`
/// positions of `x`. `f` must return a scalar (any shape is summed).
pub fn check_input_gradient<F>(f: F, x: &Tensor, samples: usize, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let var = Var::from_tensor(x)?;
    let loss = f(var.as_tensor())?.sum_all()?;
    let grads = loss.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => flat(g)?,
        None => vec![0.0; x.elem_count()],
    };
    let base = flat(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in pick(base.len(), samples, &mut rng) {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            scalar(&f(&from_flat(v, x)?)?)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        entries.push(GradEntry {
            name: "input".into(),
            index: i,
            analytic: analytic[i],
            numeric,
        });
    }
    Ok(GradReport { entries })
}

/// Same check for every trainable parameter of `store`, `per_param` sampled
/// positions each. Parameters are restored afterwards.
pub fn check_param_gradient<F>(store: &ParamStore, f: F, per_param: usize, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    let params = store.trainable();
    if params.is_empty() {
        return Err(Error::Empty("store has no trainable parameters".into()));
    }
    let loss = f()?.sum_all()?;
    let grads = loss.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, var) in params {
        let original = var.as_tensor().copy()?;
        let base = flat(&original)?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?,
            None => vec![0.0; base.len()],
        };
        for i in pick(base.len(), per_param, &mut rng) {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&from_flat(v, &original)?)?;
                scalar(&f()?)
            };
            let plus = eval(eps);
            let minus = eval(-eps);
            var.set(&original)?;
            entries.push(GradEntry {
                name: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric: (plus? - minus?) / (2.0 * eps),
            });
        }
    }
    Ok(GradReport { entries })
}
