use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use super::{check_dtype, contiguous, Real};

/// Two-point interpolation along one axis: `out = (1-frac)·in[lo] + frac·in[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre bilinear sampling positions (the `align_corners = false`
/// convention) for resizing an axis of length `src` to length `dst`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: if hi == lo { 0.0 } else { pos - lo as f64 },
            }
        })
        .collect()
}

/// Bilinear resize of a row-major `h`×`w` plane.
pub fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in &ty {
        for x in &tx {
            out.push(sample(src, w, y, x) as f32);
        }
    }
    out
}

fn sample<T: Real>(src: &[T], w: usize, y: &Tap, x: &Tap) -> f64 {
    let at = |r: usize, c: usize| src[r * w + c].as_f64();
    let top = at(y.lo, x.lo) * (1.0 - x.frac) + at(y.lo, x.hi) * x.frac;
    let bottom = at(y.hi, x.lo) * (1.0 - x.frac) + at(y.hi, x.hi) * x.frac;
    top * (1.0 - y.frac) + bottom * y.frac
}

/// Bilinear resize of the two trailing axes of a B×C×H×W tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(Resize { out_h, out_w })
}

#[derive(Clone, Copy)]
struct Resize {
    out_h: usize,
    out_w: usize,
}

impl Resize {
    fn forward<T: Real>(&self, x: &[T], dims: &[usize]) -> Vec<T> {
        let (h, w) = (dims[2], dims[3]);
        let ty = bilinear_taps(h, self.out_h);
        let tx = bilinear_taps(w, self.out_w);
        let planes = dims[0] * dims[1];
        let mut out = Vec::with_capacity(planes * self.out_h * self.out_w);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in &ty {
                for t in &tx {
                    out.push(T::of(sample(src, w, y, t)));
                }
            }
        }
        out
    }

    fn backward<T: Real>(&self, gy: &[T], dims: &[usize]) -> Vec<T> {
        let (h, w) = (dims[2], dims[3]);
        let ty = bilinear_taps(h, self.out_h);
        let tx = bilinear_taps(w, self.out_w);
        let planes = dims[0] * dims[1];
        let mut gx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            let src = &gy[p * self.out_h * self.out_w..];
            for (oy, y) in ty.iter().enumerate() {
                for (ox, x) in tx.iter().enumerate() {
                    let g = src[oy * self.out_w + ox].as_f64();
                    let wy = [(y.lo, 1.0 - y.frac), (y.hi, y.frac)];
                    let wx = [(x.lo, 1.0 - x.frac), (x.hi, x.frac)];
                    for (r, fy) in wy {
                        for (c, fx) in wx {
                            dst[r * w + c] += T::of(g * fy * fx);
                        }
                    }
                }
            }
        }
        gx
    }
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "resize-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        check_dtype(s.dtype(), self.name())?;
        let dims = l.dims();
        if dims.len() != 4 {
            candle_core::bail!("resize_bilinear expects a 4d input, got {dims:?}");
        }
        let shape = Shape::from((dims[0], dims[1], self.out_h, self.out_w));
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
            &ResizeGrad(*self),
        )?))
    }
}

struct ResizeGrad(Resize);

impl CustomOp2 for ResizeGrad {
    fn name(&self) -> &'static str {
        "resize-bilinear-grad"
    }

    fn cpu_fwd(
        &self,
        _s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let out = match s2 {
            CpuStorage::F32(_) => CpuStorage::F32(self.0.backward(contiguous(s2, l2)?, dims)),
            _ => CpuStorage::F64(self.0.backward(contiguous(s2, l2)?, dims)),
        };
        Ok((out, l1.shape().clone()))
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Tensor};

    use super::*;

    #[test]
    fn upsample_by_two_matches_half_pixel_convention() {
        // in = [0, 1]; out positions map to -0.25, 0.25, 0.75, 1.25
        let out = resize_plane(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn identity_size_is_noop() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_plane(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn constant_planes_stay_constant() -> candle_core::Result<()> {
        let x = Tensor::full(2.5f64, (2, 3, 5, 7), &Device::Cpu)?;
        let y = resize_bilinear(&x, 20, 28)?;
        for v in y.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 2.5).abs() < 1e-12);
        }
        let z = resize_bilinear(&x, 2, 3)?;
        assert_eq!(z.dims(), &[2, 3, 2, 3]);
        Ok(())
    }

    #[test]
    fn backward_is_adjoint_of_forward() -> candle_core::Result<()> {
        // <R x, g> == <x, Rᵀ g>
        let dev = Device::Cpu;
        let x = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 3, 5), &dev)?)?;
        let g = Tensor::randn(0f64, 1.0, (1, 2, 7, 4), &dev)?;
        let y = resize_bilinear(x.as_tensor(), 7, 4)?;
        let lhs = (&y * &g)?.sum_all()?;
        let grads = lhs.backward()?;
        let rt_g = grads.get(x.as_tensor()).unwrap();
        let rhs = (x.as_tensor() * rt_g)?.sum_all()?.to_scalar::<f64>()?;
        assert!((lhs.to_scalar::<f64>()? - rhs).abs() < 1e-10);
        Ok(())
    }
}
