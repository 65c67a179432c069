//! Central finite-difference checks of analytic gradients.
//!
//! Each named fixture builds a small double-precision instance of one kernel
//! or layer and compares backpropagated gradients against
//! `(f(x+h) − f(x−h)) / 2h` on randomly sampled coordinates.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Encoder;
use crate::glore::{GloReConfig, GloReUnit, InjectionConfig};
use crate::kernels;
use crate::nn::Mode;
use crate::params::{Init, ParamStore};
use crate::scenegraph::{
    neighborhoods, EdgeMode, GraphAttention, GraphBundle, SceneGraphConfig, SceneGraphHead,
};
use crate::{Error, Result};

/// Fixture names accepted by [`run_fixture`].
pub const FIXTURES: [&str; 8] = [
    "glore",
    "graph_attention",
    "edge_readout",
    "conv2d",
    "max_pool2d",
    "resize_bilinear",
    "batch_norm",
    "encoder",
];

/// Largest difference step used for the full encoder.
pub const ENCODER_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled among parameters, and again among inputs.
    pub coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            coords: 20,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Deliberate corruption of one fixture's analytic gradients, used to show
/// the checker catches a wrong backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub fixture: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub var: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub fixture: String,
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl GradReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn read(var: &Var, i: usize) -> Result<f64> {
    Ok(var
        .as_tensor()
        .flatten_all()?
        .get(i)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

fn write(var: &Var, i: usize, v: f64) -> Result<()> {
    let t = var.as_tensor();
    let mut data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    data[i] = v;
    let next = Tensor::from_vec(data, t.shape(), t.device())?.to_dtype(t.dtype())?;
    var.set(&next)?;
    Ok(())
}

/// `n` (var, raw index) pairs, cycling through the non-empty vars.
fn sample(vars: &[(String, Var)], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let live: Vec<usize> = (0..vars.len())
        .filter(|&k| vars[k].1.elem_count() > 0)
        .collect();
    if live.is_empty() {
        return vec![];
    }
    (0..n)
        .map(|j| (live[j % live.len()], rng.random_range(0..usize::MAX)))
        .collect()
}

/// Compares the gradients of `loss` with respect to `params` and `inputs`
/// against central differences.
pub fn check_gradients(
    fixture: &str,
    params: &[(String, Var)],
    inputs: &[(String, Var)],
    loss: impl Fn() -> Result<Tensor>,
    cfg: &GradCheckConfig,
    fault: Option<&Fault>,
) -> Result<GradReport> {
    let start = Instant::now();
    let grads = loss()?.backward()?;
    let scale = match fault {
        Some(f) if f.fixture == fixture => f.scale,
        _ => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = Vec::new();
    for group in [params, inputs] {
        for (k, r) in sample(group, cfg.coords, &mut rng) {
            let (name, var) = &group[k];
            let index = r % var.elem_count();
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g
                    .flatten_all()?
                    .get(index)?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?,
                None => 0.0,
            } * scale;
            let x0 = read(var, index)?;
            write(var, index, x0 + cfg.step)?;
            let up = loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            write(var, index, x0 - cfg.step)?;
            let down = loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            write(var, index, x0)?;
            let numeric = (up - down) / (2.0 * cfg.step);
            coords.push(CoordCheck {
                var: name.clone(),
                index,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, cfg.floor),
            });
        }
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        fixture: fixture.to_string(),
        passed: !coords.is_empty() && coords.iter().all(|c| c.rel_err <= cfg.tolerance),
        max_rel_err,
        coords,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn input(name: &str, rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<(String, Var)> {
    Ok((name.to_string(), Var::from_tensor(&randn(rng, shape)?)?))
}

fn trainable(store: &ParamStore) -> Vec<(String, Var)> {
    store
        .trainable()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect()
}

/// Builds fixture `name` and checks it.
pub fn run_fixture(name: &str, cfg: &GradCheckConfig, fault: Option<&Fault>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut store = ParamStore::new(DType::F64);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match name {
        "glore" => {
            let mut gc = GloReConfig::new(8, 3, 5);
            gc.injection = Some(InjectionConfig {
                edge_dim: 6,
                width: 4,
            });
            let unit = GloReUnit::new(&mut Init::new(&mut store, &mut init_rng, "glore"), gc)?;
            // the injection projector starts at zero; give it a gradient path
            for (n, v) in store.trainable() {
                if n.contains("inject") {
                    v.set(&randn(&mut rng, v.dims())?.affine(0.1, 0.0)?)?;
                }
            }
            let x = input("x", &mut rng, &[2, 8, 4, 4])?;
            let inj = input("injection", &mut rng, &[2, 4])?;
            let (wy, wg) = (randn(&mut rng, &[2, 8, 4, 4])?, randn(&mut rng, &[2, 64])?);
            let params = trainable(&store);
            let (xv, iv) = (x.1.clone(), inj.1.clone());
            check_gradients(
                name,
                &params,
                &[x, inj],
                || {
                    let out = unit.forward(xv.as_tensor(), Some(iv.as_tensor()))?;
                    Ok(((out.y * &wy)?.sum_all()? + (out.gisf * &wg)?.sum_all()?)?)
                },
                cfg,
                fault,
            )
        }
        "graph_attention" => {
            let gat = GraphAttention::new(&mut Init::new(&mut store, &mut init_rng, "sg.gat"), 4)?;
            let h = input("h", &mut rng, &[3, 4])?;
            let adj = neighborhoods(3, &[[0, 1], [0, 2]]);
            let w = randn(&mut rng, &[3, 4])?;
            let params = trainable(&store);
            let hv = h.1.clone();
            check_gradients(
                name,
                &params,
                &[h],
                || Ok((gat.attend(hv.as_tensor(), &adj)?.0 * &w)?.sum_all()?),
                cfg,
                fault,
            )
        }
        "edge_readout" => {
            let sg = SceneGraphConfig {
                visual_dim: 6,
                semantic_dim: 4,
                fused_dim: 5,
                hidden: 7,
                extra_dim: 3,
                penultimate_dim: 3,
                edge_mode: EdgeMode::Gisf,
                ..Default::default()
            };
            let edge_dim = sg.edge_dim();
            let head = SceneGraphHead::new(&mut Init::new(&mut store, &mut init_rng, ""), sg)?;
            let ef = input("edge_features", &mut rng, &[2, edge_dim])?;
            let extra = input("extra", &mut rng, &[3])?;
            let w = randn(&mut rng, &[2, 13])?;
            let empty = Tensor::zeros((0, 1), DType::F64, &Device::Cpu)?;
            let params: Vec<_> = trainable(&store)
                .into_iter()
                .filter(|(n, _)| n.contains("readout") || n.starts_with("sg.out"))
                .collect();
            let (ev, xv) = (ef.1.clone(), extra.1.clone());
            check_gradients(
                name,
                &params,
                &[ef, extra],
                || {
                    let bundle = GraphBundle {
                        visual: empty.clone(),
                        semantic: empty.clone(),
                        fused: empty.clone(),
                        visual_attention: empty.clone(),
                        semantic_attention: empty.clone(),
                        edge_features: ev.as_tensor().clone(),
                    };
                    Ok((head.edge_readout(&bundle, Some(xv.as_tensor()))? * &w)?.sum_all()?)
                },
                cfg,
                fault,
            )
        }
        "conv2d" => {
            let x = input("x", &mut rng, &[2, 3, 7, 6])?;
            let k = input("weight", &mut rng, &[4, 3, 3, 3])?;
            let w = randn(&mut rng, &[2, 4, 4, 3])?;
            let (xv, kv) = (x.1.clone(), k.1.clone());
            check_gradients(
                name,
                &[k],
                &[x],
                || Ok((kernels::conv2d(xv.as_tensor(), kv.as_tensor(), 2, 1)? * &w)?.sum_all()?),
                cfg,
                fault,
            )
        }
        "max_pool2d" => {
            let x = input("x", &mut rng, &[2, 2, 7, 7])?;
            let w = randn(&mut rng, &[2, 2, 4, 4])?;
            let xv = x.1.clone();
            check_gradients(
                name,
                &[],
                &[x],
                || Ok((kernels::max_pool2d(xv.as_tensor(), 3, 2, 1)? * &w)?.sum_all()?),
                cfg,
                fault,
            )
        }
        "resize_bilinear" => {
            let x = input("x", &mut rng, &[1, 2, 3, 5])?;
            let w = randn(&mut rng, &[1, 2, 7, 4])?;
            let xv = x.1.clone();
            check_gradients(
                name,
                &[],
                &[x],
                || Ok((kernels::resize_bilinear(xv.as_tensor(), 7, 4)? * &w)?.sum_all()?),
                cfg,
                fault,
            )
        }
        "batch_norm" => {
            let x = input("x", &mut rng, &[3, 2, 3, 2])?;
            let gamma = input("gamma", &mut rng, &[2])?;
            let beta = input("beta", &mut rng, &[2])?;
            let w = randn(&mut rng, &[3, 2, 3, 2])?;
            let (xv, gv, bv) = (x.1.clone(), gamma.1.clone(), beta.1.clone());
            check_gradients(
                name,
                &[gamma, beta],
                &[x],
                || {
                    let (y, _) = kernels::batch_norm_train(
                        xv.as_tensor(),
                        gv.as_tensor(),
                        bv.as_tensor(),
                        1e-5,
                    )?;
                    Ok((y * &w)?.sum_all()?)
                },
                cfg,
                fault,
            )
        }
        "encoder" => {
            // Piecewise linear: a 1e-3 probe straddles ReLU and max-pool kinks.
            let cfg = &GradCheckConfig {
                step: cfg.step.min(ENCODER_STEP),
                ..*cfg
            };
            let enc = Encoder::new(&mut Init::new(&mut store, &mut init_rng, "encoder"))?;
            let x = input("image", &mut rng, &[1, 3, 32, 32])?;
            let xv = x.1.clone();
            check_gradients(
                name,
                &[],
                &[x],
                || Ok(enc.encode(xv.as_tensor(), Mode::Eval)?.c5.sum_all()?),
                cfg,
                fault,
            )
        }
        other => Err(Error::Config(format!(
            "unknown gradient fixture `{other}` (expected one of {})",
            FIXTURES.join(", ")
        ))),
    }
}
