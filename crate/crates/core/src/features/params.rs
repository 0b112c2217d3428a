//! Parameter storage behind a `VarBuilder`.
//!
//! [`ParamStore`] creates every tensor on first request, either from a preset
//! map (checkpoint restore) or by sampling its init hint from a ChaCha stream
//! keyed by `(seed, tensor name)`. Construction order therefore never changes
//! the weights.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng;

/// Buffers that are tracked but never optimized.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

#[derive(Clone, Default)]
pub struct ParamStore {
    inner: Arc<StoreInner>,
}

#[derive(Default)]
struct StoreInner {
    seed: u64,
    preset: HashMap<String, Tensor>,
    vars: Mutex<BTreeMap<String, Var>>,
}

impl ParamStore {
    pub fn seeded(seed: u64) -> Self {
        ParamStore {
            inner: Arc::new(StoreInner {
                seed,
                ..Default::default()
            }),
        }
    }

    pub fn from_tensors(preset: HashMap<String, Tensor>) -> Self {
        ParamStore {
            inner: Arc::new(StoreInner {
                seed: 0,
                preset,
                vars: Mutex::default(),
            }),
        }
    }

    pub fn var_builder(&self, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, device.clone())
    }

    /// Every variable that receives gradient updates, in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.lock()
            .iter()
            .filter(|(name, _)| !is_buffer(name))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Deep copy of every tensor, buffers included.
    pub fn snapshot(&self) -> candle_core::Result<BTreeMap<String, Tensor>> {
        self.lock()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.lock().values().map(|v| v.elem_count()).sum()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Var>> {
        self.inner.vars.lock().expect("param store poisoned")
    }

    fn create(&self, shape: &Shape, name: &str, init: Init, dev: &Device) -> candle_core::Result<Tensor> {
        if let Some(t) = self.inner.preset.get(name) {
            if t.shape() != shape {
                candle_core::bail!(
                    "shape mismatch for {name}: stored {:?}, requested {:?}",
                    t.shape(),
                    shape
                );
            }
            return t.to_dtype(DType::F32)?.to_device(dev)?.copy();
        }
        if !self.inner.preset.is_empty() {
            candle_core::bail!("tensor {name} missing from preset parameters");
        }
        let values = sample_init(init, shape, self.inner.seed, name);
        Tensor::from_vec(values, shape.clone(), dev)
    }
}

fn sample_init(init: Init, shape: &Shape, seed: u64, name: &str) -> Vec<f32> {
    let n = shape.elem_count();
    let mut g = rng::stream(seed, rng::name_hash(name));
    match init {
        Init::Const(v) => vec![v as f32; n],
        Init::Randn { mean, stdev } => (0..n)
            .map(|_| (mean + stdev * g.sample::<f64, _>(StandardNormal)) as f32)
            .collect(),
        Init::Uniform { lo, up } => (0..n).map(|_| g.random_range(lo..up) as f32).collect(),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = match fan {
                FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
            };
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => (0..n)
                    .map(|_| (std * g.sample::<f64, _>(StandardNormal)) as f32)
                    .collect(),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| g.random_range(-bound..bound) as f32).collect()
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        if let Some(v) = self.lock().get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", v.shape(), s);
            }
            return Ok(v.as_tensor().clone());
        }
        let t = self.create(&s, name, h, dev)?;
        debug_assert_eq!(dtype, DType::F32);
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.lock().insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.lock().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("tensor {name} not initialized"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.lock().contains_key(name) || self.inner.preset.contains_key(name)
    }
}
