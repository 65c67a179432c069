//! Layers shared by the encoder, decoders and graph head.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernels;
use crate::params::{Init, Kind};
use crate::{Error, Result};

/// Forward-pass mode. Training mode normalizes with batch statistics,
/// updates running statistics and samples dropout masks from `rng`.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a RefCell<ChaCha8Rng> },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = c_out * kernel * kernel;
        let weight = init.kaiming("weight", &[c_out, c_in, kernel, kernel], fan_out)?;
        let bias = if bias {
            Some(init.zeros("bias", &[c_out])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Like [`Conv2d::new`] but with weights scaled by `gain` after He init.
    pub fn scaled(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
        bias: bool,
    ) -> Result<Self> {
        let std = gain * (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = init.normal("weight", &[c_out, c_in, kernel, kernel], std)?;
        let bias = if bias {
            Some(init.zeros("bias", &[c_out])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        let gamma = init.ones("weight", &[channels])?;
        let beta = init.zeros("bias", &[channels])?;
        let dev = Device::Cpu;
        let running_mean = init.put_var(
            "running_mean",
            Tensor::zeros(channels, DType::F64, &dev)?,
            Kind::Buffer,
        )?;
        let running_var = init.put_var(
            "running_var",
            Tensor::ones(channels, DType::F64, &dev)?,
            Kind::Buffer,
        )?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.gamma.elem_count();
        if mode.is_train() {
            let (y, stats) = kernels::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            let n = stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let dt = self.gamma.dtype();
            let batch_mean = Tensor::from_vec(stats.mean, c, x.device())?.to_dtype(dt)?;
            let batch_var = (Tensor::from_vec(stats.var, c, x.device())? * unbias)?.to_dtype(dt)?;
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (batch_var * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            Ok(y)
        } else {
            let inv = (self.running_var.as_tensor().detach() + self.eps)?
                .sqrt()?
                .recip()?;
            let scale = (&self.gamma * inv)?;
            let shift = (&self.beta - (self.running_mean.as_tensor().detach() * &scale)?)?;
            Ok(x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
                .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
        }
    }
}

/// Affine map `y = x·Wᵀ + b` on the last axis of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = init.uniform("weight", &[d_out, d_in], d_in)?;
        let bias = Some(init.uniform("bias", &[d_out], d_in)?);
        Ok(Self { weight, bias })
    }

    pub fn zeroed(init: &mut Init, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = init.zeros("weight", &[d_out, d_in])?;
        let bias = if bias {
            Some(init.zeros("bias", &[d_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn no_bias(init: &mut Init, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = init.uniform("weight", &[d_out, d_in], d_in)?;
        Ok(Self { weight, bias: None })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.in_features() {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {:?}",
                self.in_features(),
                x.dims()
            )));
        }
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Inverted dropout; identity in evaluation mode or when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, mode: Mode) -> Result<Tensor> {
    let Mode::Train { rng } = mode else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mut rng = rng.borrow_mut();
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Softmax along `dim`, shifted by the (detached) maximum.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, 0) + slope·min(x, 0)
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Fails with the stage name when `t` holds a NaN or infinity.
pub fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if flat.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}
