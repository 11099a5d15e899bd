//! Minimal neural-network toolkit: a named parameter store, seeded layer
//! initializers, a GRU cell, and AdamW.
//!
//! Everything is built on explicitly seeded draws from [`crate::rng`], so a
//! run is reproducible down to the initial weights regardless of thread
//! scheduling. The optimizer exposes a scaled step so a caller can descend
//! one loss and ascend another from the same backward pass.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::rng;
use crate::Result;

/// Ordered, named collection of trainable variables.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self { vars: Vec::new(), device: device.clone() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a tensor as a trainable variable under a unique name.
    pub fn var(&mut self, name: &str, init: Tensor) -> Result<Var> {
        if self.vars.iter().any(|(n, _)| n == name) {
            return Err(crate::Error::DomainError(format!(
                "duplicate parameter name: {name}"
            )));
        }
        let var = Var::from_tensor(&init)?;
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// All variables in registration order, for the optimizer.
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Name and variable pairs in registration order.
    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Variables whose names start with `prefix`, in registration order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }

    /// SHA-256 over names and raw values; changes iff any weight changes.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            let flat: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            for v in flat {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex_string(&hasher.finalize()))
    }

    /// Writes all parameters to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads parameters saved by [`ParamStore::save`] into the existing
    /// variables; every registered name must be present with its shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        self.load_from_map(&map, path)
    }

    /// Restores every registered variable from a name-to-tensor map, for
    /// checkpoint files that bundle several stores together.
    pub fn load_from_map(&mut self, map: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
        for (name, var) in &self.vars {
            let t = map.get(name).ok_or_else(|| {
                crate::Error::Checkpoint(format!("missing parameter {name} in {path:?}"))
            })?;
            if t.dims() != var.as_tensor().dims() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} expected",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded normal tensor with the given standard deviation.
pub fn normal_init(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    std: f64,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = (0..n).map(|_| (rng::normal(rng) * std) as f32).collect();
    Ok(Tensor::from_vec(vals, shape, device)?)
}

/// Seeded uniform tensor on `[-bound, bound]`.
pub fn uniform_init(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    bound: f64,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = (0..n)
        .map(|_| ((2.0 * rng::uniform_open01(rng) - 1.0) * bound) as f32)
        .collect();
    Ok(Tensor::from_vec(vals, shape, device)?)
}

/// 2D convolution with bias, Kaiming-initialized for ReLU-family nets.
pub struct Conv2dLayer {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = normal_init(rng, &[out_c, in_c, kernel, kernel], std, store.device())?;
        let b = Tensor::zeros(out_c, DType::F32, store.device())?;
        Ok(Self {
            weight: store.var(&format!("{name}.weight"), w)?,
            bias: store.var(&format!("{name}.bias"), b)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let out_c = self.bias.as_tensor().elem_count();
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out_c, 1, 1))?)?)
    }
}

/// Fully connected layer, Xavier-initialized.
pub struct LinearLayer {
    weight: Var,
    bias: Var,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let std = (2.0 / (in_f + out_f) as f64).sqrt();
        let w = normal_init(rng, &[out_f, in_f], std, store.device())?;
        let b = Tensor::zeros(out_f, DType::F32, store.device())?;
        Ok(Self {
            weight: store.var(&format!("{name}.weight"), w)?,
            bias: store.var(&format!("{name}.bias"), b)?,
        })
    }

    /// `(..., in_f) -> (..., out_f)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().t()?.contiguous()?;
        Ok(x.broadcast_matmul(&w)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Group normalization with learned scale and shift.
pub struct GroupNormLayer {
    weight: Var,
    bias: Var,
    groups: usize,
    eps: f64,
}

impl GroupNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(crate::Error::DomainError(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        let w = Tensor::ones(channels, DType::F32, store.device())?;
        let b = Tensor::zeros(channels, DType::F32, store.device())?;
        Ok(Self {
            weight: store.var(&format!("{name}.weight"), w)?,
            bias: store.var(&format!("{name}.bias"), b)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let grouped = x.reshape((b, g, c / g * h * w))?;
        let mean = grouped.mean_keepdim(2)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = (&centered * &centered)?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let scale = self.weight.as_tensor().reshape((1, c, 1, 1))?;
        let shift = self.bias.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Single GRU cell (reset/update/candidate gating).
pub struct GruCell {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let dev = store.device().clone();
        Ok(Self {
            w_ih: store.var(&format!("{name}.w_ih"), uniform_init(rng, &[3 * hidden, input], bound, &dev)?)?,
            w_hh: store.var(&format!("{name}.w_hh"), uniform_init(rng, &[3 * hidden, hidden], bound, &dev)?)?,
            b_ih: store.var(&format!("{name}.b_ih"), Tensor::zeros(3 * hidden, DType::F32, &dev)?)?,
            b_hh: store.var(&format!("{name}.b_hh"), Tensor::zeros(3 * hidden, DType::F32, &dev)?)?,
            hidden,
        })
    }

    /// One recurrence step: `(x: (B, I), h: (B, H)) -> (B, H)`.
    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hs = self.hidden;
        let gi = x
            .broadcast_matmul(&self.w_ih.as_tensor().t()?.contiguous()?)?
            .broadcast_add(self.b_ih.as_tensor())?;
        let gh = h
            .broadcast_matmul(&self.w_hh.as_tensor().t()?.contiguous()?)?
            .broadcast_add(self.b_hh.as_tensor())?;
        let r = sigmoid(&(gi.narrow(1, 0, hs)? + gh.narrow(1, 0, hs)?)?)?;
        let z = sigmoid(&(gi.narrow(1, hs, hs)? + gh.narrow(1, hs, hs)?)?)?;
        let n = (gi.narrow(1, 2 * hs, hs)? + (r * gh.narrow(1, 2 * hs, hs)?)?)?.tanh()?;
        let one_minus_z = (1.0 - &z)?;
        Ok(((one_minus_z * &n)? + (z * h)?)?)
    }
}

/// Numerically plain logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let one = Tensor::ones_like(x)?;
    Ok((&one / (x.neg()?.exp()? + 1.0)?)?)
}

/// `ln(1 + e^x)` computed as `max(x, 0) + ln(1 + e^-|x|)` so large logits
/// neither overflow nor lose the tail.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let neg_abs = x.abs()?.neg()?;
    Ok((relu + (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    params: Vec<Var>,
    m: Vec<Var>,
    v: Vec<Var>,
    step_t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|p| Var::from_tensor(&p.as_tensor().zeros_like()?))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = params
            .iter()
            .map(|p| Var::from_tensor(&p.as_tensor().zeros_like()?))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            params,
            m,
            v,
            step_t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    /// Descends along the gradients in `grads`.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step_scaled(grads, 1.0)
    }

    /// Applies one update using `scale * grad`; a negative scale turns the
    /// step into ascent. Parameters without a gradient are left untouched.
    pub fn step_scaled(&mut self, grads: &GradStore, scale: f64) -> Result<()> {
        self.step_t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            let g = (g * scale)?;
            let m = ((self.m[i].as_tensor() * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((self.v[i].as_tensor() * self.beta2)? + ((&g * &g)? * (1.0 - self.beta2))?)?;
            self.m[i].set(&m)?;
            self.v[i].set(&v)?;
            let m_hat = (m / bc1)?;
            let v_hat = (v / bc2)?;
            let update = (m_hat.broadcast_div(&(v_hat.sqrt()? + self.eps)?))?;
            let mut new_p = (p.as_tensor() - (update * self.lr)?)?;
            if self.weight_decay != 0.0 {
                new_p = (new_p - (p.as_tensor() * (self.lr * self.weight_decay))?)?;
            }
            p.set(&new_p)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.step_t
    }

    /// Serializable snapshot of the moment estimates, keyed by `prefix`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(self.v.iter()).enumerate() {
            out.push((format!("{prefix}.m.{i}"), m.as_tensor().clone()));
            out.push((format!("{prefix}.v.{i}"), v.as_tensor().clone()));
        }
        out
    }

    /// Restores moment estimates written by [`AdamW::state_tensors`].
    pub fn load_state(
        &mut self,
        prefix: &str,
        map: &HashMap<String, Tensor>,
        step_t: usize,
    ) -> Result<()> {
        for i in 0..self.params.len() {
            let m = map.get(&format!("{prefix}.m.{i}")).ok_or_else(|| {
                crate::Error::Checkpoint(format!("missing optimizer state {prefix}.m.{i}"))
            })?;
            let v = map.get(&format!("{prefix}.v.{i}")).ok_or_else(|| {
                crate::Error::Checkpoint(format!("missing optimizer state {prefix}.v.{i}"))
            })?;
            self.m[i].set(m)?;
            self.v[i].set(v)?;
        }
        self.step_t = step_t;
        Ok(())
    }
}
