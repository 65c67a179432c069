use candle_core::backend::BackendStorage;
use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor};

use super::{check_dtype, contiguous, Real};

/// Per-channel batch statistics observed by a training-mode normalization.
/// `var` is the biased (population) variance used for normalizing.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Training-mode batch normalization of a B×C×H×W tensor with per-channel
/// affine parameters. Returns the output and the batch statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> candle_core::Result<(Tensor, BatchStats)> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        candle_core::bail!("batch_norm: affine parameters must have shape [{c}]");
    }
    let stats = Arc::new(Mutex::new(None));
    let op = BatchNorm {
        eps,
        stats: stats.clone(),
    };
    let y = x
        .contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let stats = stats
        .lock()
        .expect("stats lock")
        .take()
        .expect("forward records statistics");
    Ok((y, stats))
}

fn moments<T: Real>(x: &[T], dims: &[usize]) -> BatchStats {
    let (b, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let count = b * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = s / count as f64;
        let mut q = 0.0;
        for bi in 0..b {
            q += x[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count as f64;
    }
    BatchStats { mean, var, count }
}

struct BatchNorm {
    eps: f64,
    stats: Arc<Mutex<Option<BatchStats>>>,
}

impl BatchNorm {
    fn forward<T: Real>(&self, x: &[T], gamma: &[T], beta: &[T], dims: &[usize]) -> Vec<T> {
        let (b, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let st = moments(x, dims);
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let inv = 1.0 / (st.var[ch] + self.eps).sqrt();
            let scale = gamma[ch].as_f64() * inv;
            let shift = beta[ch].as_f64() - st.mean[ch] * scale;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for (o, v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = T::of(v.as_f64() * scale + shift);
                }
            }
        }
        *self.stats.lock().expect("stats lock") = Some(st);
        out
    }
}

impl CustomOp3 for BatchNorm {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        check_dtype(s1.dtype(), self.name())?;
        let dims = l1.dims();
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
                dims,
            )),
            _ => CpuStorage::F64(self.forward(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
                dims,
            )),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let c = gamma.elem_count();
        let packed =
            x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &BatchNormGrad { eps: self.eps })?;
        let gx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let gg = packed.narrow(0, n, c)?;
        let gb = packed.narrow(0, n + c, c)?;
        Ok((Some(gx), Some(gg), Some(gb)))
    }
}

/// Produces `[dx ‖ dγ ‖ dβ]` as one flat vector.
struct BatchNormGrad {
    eps: f64,
}

impl BatchNormGrad {
    fn run<T: Real>(&self, x: &[T], gamma: &[T], gy: &[T], dims: &[usize]) -> Vec<T> {
        let (b, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let st = moments(x, dims);
        let n = st.count as f64;
        let mut out = vec![T::zero(); x.len() + 2 * c];
        for ch in 0..c {
            let inv = 1.0 / (st.var[ch] + self.eps).sqrt();
            let m = st.mean[ch];
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for (g, v) in gy[off..off + hw].iter().zip(&x[off..off + hw]) {
                    let g = g.as_f64();
                    sum_g += g;
                    sum_gx += g * (v.as_f64() - m) * inv;
                }
            }
            let k = gamma[ch].as_f64() * inv;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x[i].as_f64() - m) * inv;
                    let g = gy[i].as_f64();
                    out[i] = T::of(k * (g - sum_g / n - xhat * sum_gx / n));
                }
            }
            out[x.len() + ch] = T::of(sum_gx);
            out[x.len() + c + ch] = T::of(sum_g);
        }
        out
    }
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-train-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let len = l1.shape().elem_count() + 2 * dims[1];
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.run(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
                dims,
            )),
            _ => CpuStorage::F64(self.run(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
                dims,
            )),
        };
        Ok((out, Shape::from(len)))
    }
}
