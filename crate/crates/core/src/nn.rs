//! Small neural-network toolkit on top of candle: a named parameter store
//! with per-parameter freeze flags, batch normalization, seeded
//! initialization and dropout, and Adam.
//!
//! Everything random goes through [`SeededRng`] because candle's CPU
//! sampling cannot be seeded.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Shape, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Named parameters and buffers. Frozen parameters are handed out detached,
/// so gradients never reach them and the optimizer never sees them.
#[derive(Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: &Tensor) -> Result<()> {
        let name = name.into();
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?.contiguous()?)?;
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {name}")))?;
        if self.frozen.contains(name) {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }

    pub fn buffer(&self, name: &str) -> Result<Tensor> {
        self.buffers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing buffer {name}")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn apply_updates(&mut self, updates: BufferUpdates) {
        for (name, value) in updates {
            self.buffers.insert(name, value);
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// `name -> frozen` for every parameter.
    pub fn freeze_map(&self) -> BTreeMap<String, bool> {
        self.vars.keys().map(|k| (k.clone(), self.frozen.contains(k))).collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Deep copy of all parameters and buffers.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        for (k, v) in &self.buffers {
            out.insert(k.clone(), v.copy()?);
        }
        Ok(out)
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in snapshot {
            if let Some(var) = self.vars.get(k) {
                var.set(v)?;
            } else {
                self.buffers.insert(k.clone(), v.copy()?);
            }
        }
        Ok(())
    }

    /// Shallow view of all parameters (detached) and buffers. The tensors
    /// share storage with the store, so later optimizer steps show through;
    /// use [`ParamStore::snapshot`] for a stable copy.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> =
            self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect();
        out.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Overwrites every entry not excluded by `skip` with the same-named
    /// tensor of `source`, checking shapes.
    pub fn load_from(&mut self, source: &BTreeMap<String, Tensor>, skip: impl Fn(&str) -> bool) -> Result<()> {
        for (name, current) in self.tensors() {
            if skip(&name) {
                continue;
            }
            let value = source
                .get(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("source lacks {name}")))?;
            if value.dims() != current.dims() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name} has shape {:?}, expected {:?}",
                    value.dims(),
                    current.dims()
                )));
            }
            let value = value.to_dtype(DType::F32)?.contiguous()?;
            match self.vars.get(&name) {
                Some(var) => var.set(&value)?,
                None => {
                    self.buffers.insert(name, value.copy()?);
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }
}

fn to_tensor(values: Vec<f32>, shape: impl Into<Shape>) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

/// He-normal initialization with the given fan.
pub fn kaiming_normal(shape: &[usize], fan: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let std = (2.0 / fan as f64).sqrt();
    let n: usize = shape.iter().product();
    to_tensor((0..n).map(|_| (rng.normal() * std) as f32).collect(), shape)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    to_tensor((0..n).map(|_| rng.uniform(-bound, bound) as f32).collect(), shape)
}

/// Default initialization of a dense layer: both weight and bias uniform in
/// `+-1/sqrt(fan_in)`.
pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert_param(format!("{prefix}.weight"), &uniform(&[fan_out, fan_in], bound, rng)?)?;
    store.insert_param(format!("{prefix}.bias"), &uniform(&[fan_out], bound, rng)?)?;
    Ok(())
}

pub fn linear(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let w = store.param(&format!("{prefix}.weight"))?;
    let y = x.broadcast_matmul(&w.t()?)?;
    match store.param(&format!("{prefix}.bias")) {
        Ok(b) => Ok(y.broadcast_add(&b)?),
        Err(_) => Ok(y),
    }
}

pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    let dev = Device::Cpu;
    store.insert_param(format!("{prefix}.weight"), &Tensor::ones(channels, DType::F32, &dev)?)?;
    store.insert_param(format!("{prefix}.bias"), &Tensor::zeros(channels, DType::F32, &dev)?)?;
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(channels, DType::F32, &dev)?);
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(channels, DType::F32, &dev)?);
    Ok(())
}

fn channel_shape(x: &Tensor) -> Vec<usize> {
    let mut shape = vec![1; x.rank()];
    shape[1] = x.dim(1).unwrap_or(1);
    shape
}

/// Batch normalization over dimension 1 with running statistics.
pub fn batch_norm_eval(x: &Tensor, store: &ParamStore, prefix: &str, eps: f64) -> Result<Tensor> {
    let shape = channel_shape(x);
    let gamma = store.param(&format!("{prefix}.weight"))?;
    let beta = store.param(&format!("{prefix}.bias"))?;
    let mean = store.buffer(&format!("{prefix}.running_mean"))?;
    let var = store.buffer(&format!("{prefix}.running_var"))?;
    let scale = gamma.broadcast_div(&(var + eps)?.sqrt()?)?;
    let shift = (beta - mean.mul(&scale)?)?;
    Ok(x.broadcast_mul(&scale.reshape(shape.as_slice())?)?.broadcast_add(&shift.reshape(shape.as_slice())?)?)
}

/// Running-statistic updates produced by a training-mode forward pass, to
/// be applied with [`ParamStore::apply_updates`].
pub type BufferUpdates = Vec<(String, Tensor)>;

/// Batch normalization with batch statistics. Pushes the new running mean
/// and unbiased running variance (given momentum) onto `updates`.
pub fn batch_norm_train(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    eps: f64,
    momentum: f64,
    updates: &mut BufferUpdates,
) -> Result<Tensor> {
    let shape = channel_shape(x);
    let c = x.dim(1)?;
    let per_channel = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
    let count = per_channel.dim(1)?;
    let mean = per_channel.mean(1)?;
    let centered = per_channel.broadcast_sub(&mean.unsqueeze(1)?)?;
    let var = centered.sqr()?.mean(1)?;
    let gamma = store.param(&format!("{prefix}.weight"))?;
    let beta = store.param(&format!("{prefix}.bias"))?;
    let inv = (var.clone() + eps)?.sqrt()?.recip()?;
    let scale = gamma.mul(&inv)?;
    let y = x
        .broadcast_sub(&mean.reshape(shape.as_slice())?)?
        .broadcast_mul(&scale.reshape(shape.as_slice())?)?
        .broadcast_add(&beta.reshape(shape.as_slice())?)?;

    let unbiased = (var.detach() * (count as f64 / (count.max(2) - 1) as f64))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let rm = ((store.buffer(&rm_name)? * (1.0 - momentum))? + (mean.detach() * momentum)?)?;
    let rv = ((store.buffer(&rv_name)? * (1.0 - momentum))? + (unbiased * momentum)?)?;
    updates.push((rm_name, rm));
    updates.push((rv_name, rv));
    Ok(y)
}

/// Inverted dropout with a seeded mask.
pub fn dropout(x: &Tensor, p: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..x.elem_count()).map(|_| if rng.bernoulli(keep) { scale } else { 0.0 }).collect();
    Ok(x.mul(&to_tensor(mask, x.shape().clone())?)?)
}

/// Mean cross-entropy; with class weights, the weighted mean
/// `sum(w_y * nll) / sum(w_y)`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32], class_weights: Option<&[f32]>) -> Result<Tensor> {
    let n = targets.len();
    let t = Tensor::from_vec(targets.to_vec(), n, &Device::Cpu)?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_probs.gather(&t.unsqueeze(1)?, 1)?.squeeze(1)?;
    match class_weights {
        None => Ok(picked.mean_all()?.neg()?),
        Some(w) => {
            let per: Vec<f32> = targets.iter().map(|&c| w[c as usize]).collect();
            let total: f32 = per.iter().sum();
            let weights = to_tensor(per, n)?;
            Ok((picked.mul(&weights)?.sum_all()?.neg()? / total as f64)?)
        }
    }
}

/// Adam with L2 regularization added to the gradient before the moment
/// updates (not the decoupled AdamW form).
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    state: Vec<(Var, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let state = vars
            .into_iter()
            .map(|v| {
                let z = v.as_tensor().zeros_like()?;
                Ok((v, z.clone(), z))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (var, m, v) in self.state.iter_mut() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&*m / bc1)?.div(&denom)? * self.lr)?;
            var.set(&(p - update)?)?;
        }
        Ok(())
    }
}

/// Reduces the learning rate by `factor` after `patience` epochs without
/// improvement of the monitored loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn observe(&mut self, loss: f64, optimizer: &mut Adam) {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                optimizer.set_learning_rate(optimizer.learning_rate() * self.factor);
                self.bad_epochs = 0;
            }
        }
    }
}

/// Row-wise softmax of a logit matrix, computed in f64.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// 3x3 stride-2 max pooling over an already padded `(N, C, H, W)` input.
/// Built from slices and elementwise maxima so it stays differentiable;
/// candle only backpropagates pools whose kernel equals the stride.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let mut m: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = x.narrow(2, dy, 2 * oh - 1)?.narrow(3, dx, 2 * ow - 1)?;
            m = Some(match m {
                None => s,
                Some(m) => m.maximum(&s)?,
            });
        }
    }
    // keep even positions of the stride-1 result
    let m = m.expect("nine windows").pad_with_same(2, 0, 1)?.pad_with_same(3, 0, 1)?;
    let m = m.reshape((n, c, oh, 2, ow, 2))?.narrow(3, 0, 1)?.narrow(5, 0, 1)?;
    Ok(m.reshape((n, c, oh, ow))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_pool_matches_candle_and_has_gradients() {
        let mut rng = SeededRng::new(3);
        for (h, w) in [(9, 9), (10, 7), (3, 4)] {
            let x = uniform(&[2, 3, h, w], 1.0, &mut rng).unwrap();
            let ours = max_pool_3x3_s2(&x).unwrap();
            let reference = x.max_pool2d_with_stride(3, 2).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
        let v = Var::from_tensor(&uniform(&[1, 1, 5, 5], 1.0, &mut rng).unwrap()).unwrap();
        let grads = max_pool_3x3_s2(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(v.as_tensor()).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(g, 4.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert_param("a", &Tensor::new(&[2f32], &Device::Cpu).unwrap()).unwrap();
        store.insert_param("b", &Tensor::new(&[3f32], &Device::Cpu).unwrap()).unwrap();
        store.set_frozen("a", true);
        let loss = (store.param("a").unwrap() * store.param("b").unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let trainable = store.trainable();
        assert_eq!(trainable.len(), 1);
        assert!(grads.get(trainable[0].1.as_tensor()).is_some());
        assert_eq!(store.freeze_map()["a"], true);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let var = Var::new(&[1f32, -1.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![var.clone()], 0.1, 0.0).unwrap();
        let loss = (var.as_tensor() * 5.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = var.as_tensor().to_vec1::<f32>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.1).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new();
        init_batch_norm(&mut store, "bn", 2).unwrap();
        let x = Tensor::new(&[[1f32, 10.0], [3.0, 30.0]], &Device::Cpu).unwrap();
        let mut updates = Vec::new();
        let y = batch_norm_train(&x, &store, "bn", 0.0, 0.1, &mut updates).unwrap().to_vec2::<f32>().unwrap();
        store.apply_updates(updates);
        assert!((y[0][0] + 1.0).abs() < 1e-5 && (y[1][1] - 1.0).abs() < 1e-5);
        let rm = store.buffer("bn.running_mean").unwrap().to_vec1::<f32>().unwrap();
        let rv = store.buffer("bn.running_var").unwrap().to_vec1::<f32>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-6 && (rm[1] - 2.0).abs() < 1e-5);
        // unbiased variance of [1,3] is 2
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn weighted_cross_entropy_matches_manual() {
        let logits = Tensor::new(&[[0f32, 0.0], [2.0, 0.0]], &Device::Cpu).unwrap();
        let plain = cross_entropy(&logits, &[0, 1], None).unwrap().to_scalar::<f32>().unwrap();
        let l0 = 2f64.ln();
        let l1 = 2.0 + (-2f64).exp().ln_1p(); // -log softmax([2, 0])[1]
        assert!((plain as f64 - (l0 + l1) / 2.0).abs() < 1e-5);
        let w = cross_entropy(&logits, &[0, 1], Some(&[1.0, 3.0])).unwrap().to_scalar::<f32>().unwrap();
        assert!((w as f64 - (l0 + 3.0 * l1) / 4.0).abs() < 1e-5);
    }

    #[test]
    fn dropout_is_seeded() {
        let x = Tensor::ones((4, 8), DType::F32, &Device::Cpu).unwrap();
        let a = dropout(&x, 0.5, &mut SeededRng::new(1)).unwrap().to_vec2::<f32>().unwrap();
        let b = dropout(&x, 0.5, &mut SeededRng::new(1)).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| *v == 0.0 || *v == 2.0));
    }
}
