//! Global reasoning in a latent interaction space.
//!
//! Coordinate features are softly assigned to `N` latent nodes, reasoned over
//! with a learned node adjacency and state update, and projected back onto the
//! feature map through a residual connection:
//!
//! ```text
//! B = softmax_nodes(theta(x))            N × hw
//! V = B · phi(x)ᵀ  (+ injected summary)  N × Cr
//! Z = ((I − A_g) V) W_g                  N × Cr
//! y = x + psi(Bᵀ Z)                      C × h × w
//! gisf = compress(mean_nodes(Z))         64
//! ```

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{ensure_finite, softmax, Conv2d, Linear};
use crate::params::Init;
use crate::{Error, Result};

/// Width of the global interaction-space feature.
pub const GISF_DIM: usize = 64;

/// Which latent node states the interaction-space summary is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GisfSource {
    /// After graph reasoning (Z).
    #[default]
    Reasoned,
    /// Before graph reasoning (V).
    Projected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GloReConfig {
    pub channels: usize,
    pub nodes: usize,
    pub latent: usize,
    pub gisf_dim: usize,
    pub gisf_source: GisfSource,
    /// Edge-feature width and injection width for scene-graph feature
    /// injection; `None` disables the port.
    pub injection: Option<InjectionConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionConfig {
    pub edge_dim: usize,
    pub width: usize,
}

impl GloReConfig {
    pub fn new(channels: usize, nodes: usize, latent: usize) -> Self {
        Self {
            channels,
            nodes,
            latent,
            gisf_dim: GISF_DIM,
            gisf_source: GisfSource::Reasoned,
            injection: None,
        }
    }
}

/// Result of one global reasoning pass.
#[derive(Debug, Clone)]
pub struct GloReOutput {
    /// Reasoned features, same shape as the input.
    pub y: Tensor,
    /// B × gisf_dim interaction-space summaries.
    pub gisf: Tensor,
    /// B × N × hw node assignment (softmax over nodes).
    pub assignment: Tensor,
}

#[derive(Debug, Clone)]
pub struct GloReUnit {
    config: GloReConfig,
    theta: Conv2d,
    phi: Conv2d,
    adjacency: Tensor,
    state: Tensor,
    psi: Conv2d,
    compress: Linear,
    summary: Option<Linear>,
    inject: Option<Linear>,
}

impl GloReUnit {
    pub fn new(init: &mut Init, config: GloReConfig) -> Result<Self> {
        let GloReConfig {
            channels: c,
            nodes: n,
            latent: cr,
            ..
        } = config;
        if n == 0 || cr == 0 || c == 0 {
            return Err(Error::invalid("global reasoning unit needs N, Cr, C ≥ 1"));
        }
        let theta = Conv2d::scaled(&mut init.sub("theta"), c, n, 1, 1.0, true)?;
        let phi = Conv2d::scaled(&mut init.sub("phi"), c, cr, 1, 1.0, true)?;
        let adjacency = init.normal("adjacency", &[n, n], 0.01)?;
        let state = init.normal("state", &[cr, cr], (1.0 / cr as f64).sqrt())?;
        let psi = Conv2d::scaled(&mut init.sub("psi"), cr, c, 1, 0.1, false)?;
        let compress = Linear::new(&mut init.sub("gisf"), cr, config.gisf_dim)?;
        let (summary, inject) = match config.injection {
            Some(inj) => (
                Some(Linear::new(
                    &mut init.sub("sg_summary"),
                    inj.edge_dim,
                    inj.width,
                )?),
                Some(Linear::zeroed(
                    &mut init.sub("inject"),
                    inj.width,
                    cr,
                    true,
                )?),
            ),
            None => (None, None),
        };
        Ok(Self {
            config,
            theta,
            phi,
            adjacency,
            state,
            psi,
            compress,
            summary,
            inject,
        })
    }

    pub fn config(&self) -> &GloReConfig {
        &self.config
    }

    /// Graph state update W_g (Cr × Cr).
    pub fn state_weight(&self) -> &Tensor {
        &self.state
    }

    /// Node adjacency A_g (N × N).
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn psi_weight(&self) -> &Tensor {
        self.psi.weight()
    }

    pub fn injection_weight(&self) -> Option<&Tensor> {
        self.inject.as_ref().map(|l| l.weight())
    }

    pub fn injection_bias(&self) -> Option<&Tensor> {
        self.inject.as_ref().and_then(|l| l.bias())
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "global reasoning unit built for {} channels, got {c}",
                self.config.channels
            )));
        }
        Ok((b, c, h, w))
    }

    fn assign(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = self.check_input(x)?;
        let logits = self
            .theta
            .forward(x)?
            .reshape((b, self.config.nodes, h * w))?;
        let a = softmax(&logits, 1)?;
        ensure_finite(&a, "glore.assignment")?;
        Ok(a)
    }

    /// Latent node states V (B × N × Cr), including the injected summary.
    pub fn latent_nodes(&self, x: &Tensor, injection: Option<&Tensor>) -> Result<Tensor> {
        let a = self.assign(x)?;
        self.project(x, &a, injection)
    }

    fn project(&self, x: &Tensor, a: &Tensor, injection: Option<&Tensor>) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let p = self
            .phi
            .forward(x)?
            .reshape((b, self.config.latent, h * w))?;
        let mut v = a.matmul(&p.transpose(1, 2)?.contiguous()?)?;
        if let Some(inj) = injection {
            let proj = self
                .inject
                .as_ref()
                .ok_or_else(|| Error::invalid("this unit has no scene-graph injection port"))?;
            if inj.dims() != [b, proj.in_features()] {
                return Err(Error::Shape(format!(
                    "injection must be {b}×{}, got {:?}",
                    proj.in_features(),
                    inj.dims()
                )));
            }
            v = v.broadcast_add(&proj.forward(inj)?.unsqueeze(1)?)?;
        }
        ensure_finite(&v, "glore.latent")?;
        Ok(v)
    }

    pub fn forward(&self, x: &Tensor, injection: Option<&Tensor>) -> Result<GloReOutput> {
        let (b, c, h, w) = self.check_input(x)?;
        let n = self.config.nodes;
        let a = self.assign(x)?;
        let v = self.project(x, &a, injection)?;
        let eye = Tensor::eye(n, self.adjacency.dtype(), &Device::Cpu)?;
        let mixing = (eye - &self.adjacency)?;
        let z = mixing.broadcast_matmul(&v)?.broadcast_matmul(&self.state)?;
        ensure_finite(&z, "glore.reasoning")?;
        // Zᵀ B: B × Cr × hw
        let back = z.transpose(1, 2)?.contiguous()?.matmul(&a)?;
        let back = back.reshape((b, self.config.latent, h, w))?;
        let y = (x + self.psi.forward(&back)?)?;
        ensure_finite(&y, "glore.reprojection")?;
        let pooled = match self.config.gisf_source {
            GisfSource::Reasoned => z.mean(1)?,
            GisfSource::Projected => v.mean(1)?,
        };
        let gisf = self.compress.forward(&pooled)?;
        debug_assert_eq!(y.dims(), [b, c, h, w]);
        Ok(GloReOutput {
            y,
            gisf,
            assignment: a,
        })
    }

    /// Mean-pools E×d edge features (zeros when E = 0) and maps the result to
    /// the injection width.
    pub fn summarize_edges(&self, edge_features: &Tensor) -> Result<Tensor> {
        let lin = self
            .summary
            .as_ref()
            .ok_or_else(|| Error::invalid("this unit has no scene-graph injection port"))?;
        let (e, d) = edge_features.dims2()?;
        if d != lin.in_features() {
            return Err(Error::Shape(format!(
                "edge features must be {} wide, got {d}",
                lin.in_features()
            )));
        }
        let pooled = if e == 0 {
            Tensor::zeros((1, d), edge_features.dtype(), edge_features.device())?
        } else {
            edge_features.mean_keepdim(0)?
        };
        Ok(lin.forward(&pooled)?.squeeze(0)?)
    }
}

/// Stacks per-edge feature vectors into an E×d matrix, rejecting
/// inconsistent widths. `width` is used for the empty case.
pub fn stack_edge_features(edges: &[Tensor], width: usize, dtype: DType) -> Result<Tensor> {
    if edges.is_empty() {
        return Ok(Tensor::zeros((0, width), dtype, &Device::Cpu)?);
    }
    for (i, e) in edges.iter().enumerate() {
        if e.dims() != [width] {
            return Err(Error::Shape(format!(
                "edge feature {i} has shape {:?}, expected [{width}]",
                e.dims()
            )));
        }
    }
    Ok(Tensor::stack(edges, 0)?)
}

/// Per-location sums of a B×N×hw assignment over the node axis.
pub fn assignment_column_sums(assignment: &Tensor) -> Result<Vec<f64>> {
    Ok(assignment
        .sum(1)?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamStore;

    fn unit(cfg: GloReConfig, seed: u64) -> (ParamStore, GloReUnit) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = GloReUnit::new(&mut Init::new(&mut store, &mut rng, "glore.t"), cfg).unwrap();
        (store, u)
    }

    #[test]
    fn shape_arithmetic_at_bottleneck_scale() -> Result<()> {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = GloReUnit::new(
            &mut Init::new(&mut store, &mut rng, "glore.c5"),
            GloReConfig::new(512, 16, 128),
        )?;
        let x = Tensor::randn(0f32, 1.0, (2, 512, 10, 13), &Device::Cpu)?;
        let out = u.forward(&x, None)?;
        assert_eq!(out.y.dims(), &[2, 512, 10, 13]);
        assert_eq!(out.gisf.dims(), &[2, 64]);
        assert_eq!(out.assignment.dims(), &[2, 16, 130]);
        Ok(())
    }

    #[test]
    fn zero_state_update_is_identity() -> Result<()> {
        let (store, u) = unit(GloReConfig::new(8, 3, 5), 1);
        store.get("glore.t.state").unwrap().set(&Tensor::zeros(
            (5, 5),
            DType::F64,
            &Device::Cpu,
        )?)?;
        let x = Tensor::randn(0f64, 1.0, (2, 8, 4, 3), &Device::Cpu)?;
        let out = u.forward(&x, None)?;
        assert_eq!(
            out.y.flatten_all()?.to_vec1::<f64>()?,
            x.flatten_all()?.to_vec1::<f64>()?
        );
        let bias = store.get("glore.t.gisf.bias").unwrap().to_vec1::<f64>()?;
        for row in out.gisf.to_vec2::<f64>()? {
            assert_eq!(row, bias);
        }
        Ok(())
    }

    #[test]
    fn assignment_is_normalized_per_location() -> Result<()> {
        let (_, u) = unit(GloReConfig::new(8, 3, 5), 2);
        let x = Tensor::randn(0f64, 3.0, (3, 8, 2, 5), &Device::Cpu)?;
        for s in assignment_column_sums(&u.forward(&x, None)?.assignment)? {
            assert!((s - 1.0).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (_, u) = unit(GloReConfig::new(8, 3, 5), 3);
        let x = Tensor::zeros((1, 7, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(u.forward(&x, None), Err(Error::Shape(_))));
    }

    fn with_injection(seed: u64) -> (ParamStore, GloReUnit) {
        let mut cfg = GloReConfig::new(8, 3, 5);
        cfg.injection = Some(InjectionConfig {
            edge_dim: 6,
            width: 4,
        });
        unit(cfg, seed)
    }

    #[test]
    fn zero_injection_through_fresh_projector_changes_nothing() -> Result<()> {
        let (_, u) = with_injection(4);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 3, 3), &Device::Cpu)?;
        let plain = u.forward(&x, None)?;
        let zero = Tensor::zeros((2, 4), DType::F64, &Device::Cpu)?;
        let injected = u.forward(&x, Some(&zero))?;
        assert_eq!(
            plain.y.flatten_all()?.to_vec1::<f64>()?,
            injected.y.flatten_all()?.to_vec1::<f64>()?
        );
        assert_eq!(
            plain.gisf.to_vec2::<f64>()?,
            injected.gisf.to_vec2::<f64>()?
        );
        Ok(())
    }

    #[test]
    fn injection_is_affine_at_latent_level() -> Result<()> {
        let (store, u) = with_injection(5);
        let dev = Device::Cpu;
        store
            .get("glore.t.inject.weight")
            .unwrap()
            .set(&Tensor::randn(0f64, 1.0, (5, 4), &dev)?)?;
        let x = Tensor::randn(0f64, 1.0, (1, 8, 3, 2), &dev)?;
        let v1 = Tensor::randn(0f64, 1.0, (1, 4), &dev)?;
        let v2 = Tensor::randn(0f64, 1.0, (1, 4), &dev)?;
        let zero = v1.zeros_like()?;
        let base = u.latent_nodes(&x, Some(&zero))?;
        let both = u.latent_nodes(&x, Some(&(&v1 + &v2)?))?;
        let one = u.latent_nodes(&x, Some(&v1))?;
        let two = u.latent_nodes(&x, Some(&v2))?;
        let expected = (one + (two - base)?)?;
        let diff = (both - expected)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-10, "{diff}");
        Ok(())
    }

    #[test]
    fn edge_summary_conventions() -> Result<()> {
        let (store, u) = with_injection(6);
        let dev = Device::Cpu;
        let empty = Tensor::zeros((0, 6), DType::F64, &dev)?;
        let bias = store
            .get("glore.t.sg_summary.bias")
            .unwrap()
            .to_vec1::<f64>()?;
        assert_eq!(u.summarize_edges(&empty)?.to_vec1::<f64>()?, bias);

        let e = Tensor::randn(0f64, 1.0, (1, 6), &dev)?;
        let twice = Tensor::cat(&[&e, &e], 0)?;
        let a = u.summarize_edges(&e)?.to_vec1::<f64>()?;
        let b = u.summarize_edges(&twice)?.to_vec1::<f64>()?;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }

        // hand-computed mean then affine map
        let three = Tensor::randn(0f64, 1.0, (3, 6), &dev)?.to_vec2::<f64>()?;
        let w = store
            .get("glore.t.sg_summary.weight")
            .unwrap()
            .to_vec2::<f64>()?;
        let mean: Vec<f64> = (0..6)
            .map(|j| three.iter().map(|r| r[j]).sum::<f64>() / 3.0)
            .collect();
        let want: Vec<f64> = (0..4)
            .map(|i| bias[i] + (0..6).map(|j| w[i][j] * mean[j]).sum::<f64>())
            .collect();
        let got = u
            .summarize_edges(&Tensor::new(three, &dev)?)?
            .to_vec1::<f64>()?;
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let narrow = Tensor::zeros((2, 5), DType::F64, &dev)?;
        assert!(u.summarize_edges(&narrow).is_err());
        Ok(())
    }

    #[test]
    fn stacking_rejects_mixed_widths() {
        let dev = Device::Cpu;
        let a = Tensor::zeros(3, DType::F64, &dev).unwrap();
        let b = Tensor::zeros(4, DType::F64, &dev).unwrap();
        assert!(stack_edge_features(&[a.clone(), b], 3, DType::F64).is_err());
        assert_eq!(
            stack_edge_features(&[a.clone(), a], 3, DType::F64)
                .unwrap()
                .dims(),
            &[2, 3]
        );
        assert_eq!(
            stack_edge_features(&[], 3, DType::F64).unwrap().dims(),
            &[0, 3]
        );
    }
}
