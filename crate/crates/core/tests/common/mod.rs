//! Helpers and independent reference implementations shared by test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use crackseg::data::refine::ImageSample;
use crackseg::metrics::ConfusionCounts;
use crackseg::nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn binary(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()
}

pub fn tensor(v: &[f64], shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Weight (row-major out×in) and bias of a linear layer.
pub fn linear_params(l: &Linear) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let (o, i) = l.weight.dims2().unwrap();
    (values(&l.weight), values(l.bias.as_ref().unwrap()), o, i)
}

/// `y[n][o] = Σ_i x[n][i] w[o][i] + b[o]` with explicit loops.
pub fn linear_loops(x: &[f64], rows: usize, l: &Linear) -> Vec<f64> {
    let (w, b, o, i) = linear_params(l);
    let mut y = vec![0.0; rows * o];
    for n in 0..rows {
        for oo in 0..o {
            let mut s = b[oo];
            for ii in 0..i {
                s += x[n * i + ii] * w[oo * i + ii];
            }
            y[n * o + oo] = s;
        }
    }
    y
}

/// Multi-head attention for one sequence written out element by element:
/// `softmax(Q Kᵀ / sqrt(d)) V` per head with `Q, K, V` given as N×C / M×C.
pub fn attention_loops(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, c: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let d = c / heads;
    let mut out = vec![0.0; n * c];
    let mut weights = vec![0.0; heads * n * m];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; m];
            for (j, s) in scores.iter_mut().enumerate() {
                for t in 0..d {
                    *s += q[i * c + h * d + t] * k[j * c + h * d + t];
                }
                *s /= (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..m {
                let a = exps[j] / z;
                weights[(h * n + i) * m + j] = a;
                for t in 0..d {
                    out[i * c + h * d + t] += a * v[j * c + h * d + t];
                }
            }
        }
    }
    (out, weights)
}

/// Groups every `r` consecutive tokens (zero-padding the tail) into one row
/// of width `c·r`, the literal form of the key/value sequence reduction.
pub fn group_tokens(x: &[f64], n: usize, c: usize, r: usize) -> (Vec<f64>, usize) {
    let m = n.div_ceil(r);
    let mut out = vec![0.0; m * c * r];
    for j in 0..m {
        for s in 0..r {
            let tok = j * r + s;
            if tok < n {
                out[j * c * r + s * c..j * c * r + (s + 1) * c].copy_from_slice(&x[tok * c..(tok + 1) * c]);
            }
        }
    }
    (out, m)
}

/// Series expansion of erf, adequate for |x| < 4.
pub fn erf(x: f64) -> f64 {
    if x.abs() > 4.0 {
        return x.signum();
    }
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Pixel-by-pixel confusion tally with a strict threshold.
pub fn brute_counts(pred: &[f64], target: &[f64], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        let p = pred[i] > threshold;
        let y = target[i] == 1.0;
        if p && y {
            c.tp += 1;
        } else if p {
            c.fp += 1;
        } else if y {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

/// Metric formulas written directly from the count definitions.
pub fn brute_metrics(c: &ConfusionCounts) -> [f64; 5] {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let div = |a: f64, b: f64| {
        if b == 0.0 {
            if tp + fp + fn_ == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            a / b
        }
    };
    [
        (tp + tn) / (tp + fp + fn_ + tn),
        div(tp, tp + fp),
        div(tp, tp + fn_),
        div(2.0 * tp, 2.0 * tp + fp + fn_),
        div(tp, tp + fp + fn_),
    ]
}

pub fn crack_samples(n: usize, side: u32, seed: u64) -> Vec<ImageSample> {
    use crackseg::data::synthetic::{crack_tiles, SyntheticConfig};
    crack_tiles(
        &SyntheticConfig {
            side,
            ..Default::default()
        },
        n,
        seed,
    )
}
