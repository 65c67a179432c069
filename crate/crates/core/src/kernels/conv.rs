use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use super::{check_dtype, contiguous, matmul, Real};

/// Output length of a strided, zero-padded window along one axis.
pub fn conv_output_size(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            candle_core::bail!("conv2d expects 4d input and weight, got {x:?} and {w:?}");
        }
        if x[1] != w[1] {
            candle_core::bail!("conv2d channel mismatch: input {} vs weight {}", x[1], w[1]);
        }
        if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
            candle_core::bail!(
                "conv2d kernel {:?} larger than padded input {:?}",
                &w[2..],
                &x[2..]
            );
        }
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            ho: conv_output_size(x[2], w[2], stride, pad),
            wo: conv_output_size(x[3], w[3], stride, pad),
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn image(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// A 1×1, stride-1, unpadded convolution reads the image as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let pp = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * pp..(row + 1) * pp];
                    for oy in 0..self.ho {
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let pp = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * pp..(row + 1) * pp];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x` (B×C×H×W) with `weight` (O×C×kh×kw), no bias.
///
/// Implemented as im2col followed by a matrix product per image; the backward
/// pass uses the same decomposition (col2im for the input gradient).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, Conv2d { stride, padding })
}

struct Conv2d {
    stride: usize,
    padding: usize,
}

impl Conv2d {
    fn forward<T: Real>(&self, x: &[T], w: &[T], g: &Geom) -> Vec<T> {
        let (kk, pp) = (g.patch(), g.positions());
        let mut out = vec![T::zero(); g.batch * g.c_out * pp];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * pp]
        };
        for b in 0..g.batch {
            let img = &x[b * g.image()..(b + 1) * g.image()];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut cols);
                &cols
            };
            let dst = &mut out[b * g.c_out * pp..(b + 1) * g.c_out * pp];
            matmul(g.c_out, pp, kk, dst, w, (kk, 1), cols, (pp, 1), false);
        }
        out
    }
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        check_dtype(s1.dtype(), self.name())?;
        let g = Geom::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        let shape = Shape::from((g.batch, g.c_out, g.ho, g.wo));
        let out = match s1 {
            CpuStorage::F32(_) => {
                CpuStorage::F32(self.forward(contiguous(s1, l1)?, contiguous(s2, l2)?, &g))
            }
            _ => CpuStorage::F64(self.forward(contiguous(s1, l1)?, contiguous(s2, l2)?, &g)),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &ConvInputGrad {
                stride: self.stride,
                padding: self.padding,
                input: x.dims().to_vec(),
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvWeightGrad {
                stride: self.stride,
                padding: self.padding,
                weight: w.dims().to_vec(),
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ConvInputGrad {
    stride: usize,
    padding: usize,
    input: Vec<usize>,
}

impl ConvInputGrad {
    fn run<T: Real>(&self, gy: &[T], w: &[T], g: &Geom) -> Vec<T> {
        let (kk, pp) = (g.patch(), g.positions());
        let mut gx = vec![T::zero(); g.batch * g.image()];
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * pp }];
        for b in 0..g.batch {
            let gy_b = &gy[b * g.c_out * pp..(b + 1) * g.c_out * pp];
            let gx_b = &mut gx[b * g.image()..(b + 1) * g.image()];
            // cols = Wᵀ · gy
            if g.is_pointwise() {
                matmul(kk, pp, g.c_out, gx_b, w, (1, kk), gy_b, (pp, 1), false);
            } else {
                matmul(kk, pp, g.c_out, &mut cols, w, (1, kk), gy_b, (pp, 1), false);
                g.col2im(&cols, gx_b);
            }
        }
        gx
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geom::new(&self.input, l2.dims(), self.stride, self.padding)?;
        let out = match s1 {
            CpuStorage::F32(_) => {
                CpuStorage::F32(self.run(contiguous(s1, l1)?, contiguous(s2, l2)?, &g))
            }
            _ => CpuStorage::F64(self.run(contiguous(s1, l1)?, contiguous(s2, l2)?, &g)),
        };
        Ok((out, Shape::from(self.input.clone())))
    }
}

struct ConvWeightGrad {
    stride: usize,
    padding: usize,
    weight: Vec<usize>,
}

impl ConvWeightGrad {
    fn run<T: Real>(&self, x: &[T], gy: &[T], g: &Geom) -> Vec<T> {
        let (kk, pp) = (g.patch(), g.positions());
        let mut gw = vec![T::zero(); g.c_out * kk];
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * pp }];
        for b in 0..g.batch {
            let img = &x[b * g.image()..(b + 1) * g.image()];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut cols);
                &cols
            };
            let gy_b = &gy[b * g.c_out * pp..(b + 1) * g.c_out * pp];
            // gw += gy · colsᵀ
            matmul(
                g.c_out,
                kk,
                pp,
                &mut gw,
                gy_b,
                (pp, 1),
                cols,
                (1, pp),
                b > 0,
            );
        }
        gw
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geom::new(l1.dims(), &self.weight, self.stride, self.padding)?;
        let out = match s1 {
            CpuStorage::F32(_) => {
                CpuStorage::F32(self.run(contiguous(s1, l1)?, contiguous(s2, l2)?, &g))
            }
            _ => CpuStorage::F64(self.run(contiguous(s1, l1)?, contiguous(s2, l2)?, &g)),
        };
        Ok((out, Shape::from(self.weight.clone())))
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Tensor};

    use super::*;

    fn naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], s: usize, p: usize) -> Vec<f64> {
        let ho = conv_output_size(xs[2], ws[2], s, p);
        let wo = conv_output_size(xs[3], ws[3], s, p);
        let mut out = vec![0.0; xs[0] * ws[0] * ho * wo];
        for b in 0..xs[0] {
            for o in 0..ws[0] {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..xs[1] {
                            for ky in 0..ws[2] {
                                for kx in 0..ws[3] {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= xs[2] as isize
                                        || ix >= xs[3] as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((b * xs[1] + c) * xs[2] + iy as usize) * xs[3]
                                        + ix as usize;
                                    let wi = ((o * ws[1] + c) * ws[2] + ky) * ws[3] + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((b * ws[0] + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_summation() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0)] {
            let xs = [2, 3, 9, 7];
            let ws = [4, 3, k, k];
            let x = Tensor::randn(0.0, 1.0, &xs, &dev)?.to_dtype(DType::F64)?;
            let w = Tensor::randn(0.0, 1.0, &ws, &dev)?.to_dtype(DType::F64)?;
            let got = conv2d(&x, &w, s, p)?.flatten_all()?.to_vec1::<f64>()?;
            let want = naive(
                &x.flatten_all()?.to_vec1()?,
                xs,
                &w.flatten_all()?.to_vec1()?,
                ws,
                s,
                p,
            );
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "k={k} s={s}: {a} vs {b}");
            }
        }
        Ok(())
    }

    #[test]
    fn output_size_rule() {
        assert_eq!(conv_output_size(320, 7, 2, 3), 160);
        assert_eq!(conv_output_size(25, 3, 2, 1), 13);
        assert_eq!(conv_output_size(25, 1, 2, 0), 13);
    }
}
