//! Named parameter store with seeded initialization.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal { std: f64 },
    /// He-normal scaled by `fan_out = out_channels * k * k` (ReLU gain).
    KaimingFanOut,
    /// Uniform on `±1/sqrt(fan_in)`, the usual default for layers without a
    /// following normalisation.
    UniformFanIn,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), keyed by dotted path in a sorted map so iteration order is
/// stable across runs.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    buffers: Mutex<BTreeSet<String>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Arc<Self> {
        Arc::new(Self {
            vars: Mutex::new(BTreeMap::new()),
            buffers: Mutex::new(BTreeSet::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(self: &Arc<Self>) -> Scope {
        Scope {
            store: Arc::clone(self),
            prefix: String::new(),
        }
    }

    /// Every entry, trainable or not, in name order.
    pub fn named(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        let buffers = self.buffers.lock().unwrap();
        self.named()
            .into_iter()
            .filter(|(k, _)| !buffers.contains(k))
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite an existing entry in place; shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init, buffer: bool) -> Result<Var> {
        let mut vars = self.vars.lock().unwrap();
        if vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let data = self.sample(&shape, init);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        vars.insert(name.clone(), var.clone());
        if buffer {
            self.buffers.lock().unwrap().insert(name);
        }
        Ok(var)
    }

    fn sample(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal { std } => self.normal(n, std, true),
            Init::KaimingFanOut => {
                let dims = shape.dims();
                let fan_out = dims[0] * dims[2..].iter().product::<usize>();
                self.normal(n, (2.0 / fan_out as f64).sqrt(), false)
            }
            Init::UniformFanIn => {
                let fan_in: usize = shape.dims()[1..].iter().product();
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let mut rng = self.rng.lock().unwrap();
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        }
    }

    fn normal(&self, n: usize, std: f64, truncate: bool) -> Vec<f64> {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut rng = self.rng.lock().unwrap();
        (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(&mut *rng);
                if !truncate || z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect()
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: Arc<ParamStore>,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        Scope {
            store: Arc::clone(&self.store),
            prefix: self.path(name.as_ref()),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self.store.create(self.path(name), shape.into(), init, false)?;
        Ok(var.as_tensor().clone())
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.create(self.path(name), shape.into(), init, true)
    }
}
