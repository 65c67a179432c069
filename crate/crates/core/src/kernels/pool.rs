use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use super::{check_dtype, contiguous, conv_output_size, Real};

/// Max pooling over `kernel`×`kernel` windows with the given stride; padded
/// positions never win the max.
pub fn max_pool2d(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    if padding >= kernel {
        candle_core::bail!("max_pool2d: padding {padding} must be smaller than kernel {kernel}");
    }
    x.contiguous()?.apply_op1(MaxPool {
        kernel,
        stride,
        padding,
    })
}

#[derive(Clone, Copy)]
struct MaxPool {
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl MaxPool {
    fn out_dims(&self, dims: &[usize]) -> candle_core::Result<(usize, usize, usize, usize)> {
        let [b, c, h, w] = dims else {
            candle_core::bail!("max_pool2d expects a 4d input, got {dims:?}");
        };
        Ok((
            b * c,
            conv_output_size(*h, self.kernel, self.stride, self.padding),
            conv_output_size(*w, self.kernel, self.stride, self.padding),
            h * w,
        ))
    }

    /// Calls `f(plane, out_index, argmax_in_plane)` for every output element.
    /// Ties resolve to the first position in row-major scan order.
    fn scan<T: Real>(&self, x: &[T], dims: &[usize], mut f: impl FnMut(usize, usize, usize, T)) {
        let (h, w) = (dims[2], dims[3]);
        let (planes, ho, wo, plane) = self.out_dims(dims).expect("checked dims");
        for p in 0..planes {
            let src = &x[p * plane..(p + 1) * plane];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut arg = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if arg == usize::MAX || src[idx] > best {
                                best = src[idx];
                                arg = idx;
                            }
                        }
                    }
                    f(p, oy * wo + ox, arg, best);
                }
            }
        }
    }

    fn forward<T: Real>(&self, x: &[T], dims: &[usize]) -> Vec<T> {
        let (planes, ho, wo, _) = self.out_dims(dims).expect("checked dims");
        let mut out = vec![T::zero(); planes * ho * wo];
        self.scan(x, dims, |p, o, _, v| out[p * ho * wo + o] = v);
        out
    }

    fn backward<T: Real>(&self, x: &[T], dims: &[usize], gy: &[T]) -> Vec<T> {
        let (planes, ho, wo, plane) = self.out_dims(dims).expect("checked dims");
        let mut gx = vec![T::zero(); planes * plane];
        self.scan(x, dims, |p, o, arg, _| {
            gx[p * plane + arg] += gy[p * ho * wo + o]
        });
        gx
    }
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        check_dtype(s.dtype(), self.name())?;
        let dims = l.dims();
        let (_, ho, wo, _) = self.out_dims(dims)?;
        let shape = Shape::from((dims[0], dims[1], ho, wo));
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward(contiguous(s, l)?, dims)),
            _ => CpuStorage::F64(self.forward(contiguous(s, l)?, dims)),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(
            &grad.contiguous()?,
            &MaxPoolGrad(*self),
        )?))
    }
}

struct MaxPoolGrad(MaxPool);

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool2d-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.0.backward(
                contiguous(s1, l1)?,
                dims,
                contiguous(s2, l2)?,
            )),
            _ => CpuStorage::F64(
                self.0
                    .backward(contiguous(s1, l1)?, dims, contiguous(s2, l2)?),
            ),
        };
        Ok((out, l1.shape().clone()))
    }
}
