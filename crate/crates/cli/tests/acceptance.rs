//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the report is printed in order and uncaptured.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use glore_mtl::datakit::{synth_generate, to_sample, write_dataset, ChannelStats, SynthConfig};
use glore_mtl::evaluate::evaluate;
use glore_mtl::glore::{GloReConfig, GloReUnit, GISF_DIM};
use glore_mtl::labels::{LabelMap, NUM_INTERACTIONS};
use glore_mtl::model::{ModelConfig, MultiTaskModel, Tasks};
use glore_mtl::mtlopt::{
    compose_kdmtl, compose_vmtl, encoder_kld, lr_at, LrSchedule, Regime, Session, Stage,
    TrainConfig, TrainData,
};
use glore_mtl::nn::Mode;
use glore_mtl::params::{Group, Init, ParamStore};
use glore_mtl::precision::Precision;
use glore_mtl::scenegraph::{
    average_precision, neighborhoods, sg_metrics, EdgeMode, GraphAttention, GraphBundle,
    SceneGraphConfig, SceneGraphHead, SceneSample,
};
use glore_mtl::seghead::{seg_metrics, SegVariant};
use glore_mtl_cli::commands::{train, LOG_FILE};
use glore_mtl_cli::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------- 1

struct FdStats {
    coords: usize,
    worst: f64,
}

/// Central differences at `per_group` random coordinates of the parameters and
/// again of the inputs.
fn finite_difference(
    params: &[Var],
    inputs: &[Var],
    loss: &dyn Fn() -> Tensor,
    per_group: usize,
    rng: &mut ChaCha8Rng,
) -> FdStats {
    let h = 1e-3;
    let grads = loss().backward().unwrap();
    let mut stats = FdStats {
        coords: 0,
        worst: 0.0,
    };
    for group in [params, inputs] {
        for j in 0..per_group {
            let var = &group[j % group.len()];
            let n = var.elem_count();
            let i = rng.random_range(0..n);
            let analytic = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i])
                .unwrap_or(0.0);
            let base = var
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let eval_at = |x: f64| {
                let mut v = base.clone();
                v[i] = x;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
                scalar(&loss())
            };
            let numeric = (eval_at(base[i] + h) - eval_at(base[i] - h)) / (2.0 * h);
            eval_at(base[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            stats.worst = stats.worst.max(rel);
            stats.coords += 1;
        }
    }
    stats
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut report = Vec::new();

    // GloRe: h = w = 4, C = 8, N = 3, Cr = 5
    let mut store = ParamStore::new(DType::F64);
    let mut init_rng = ChaCha8Rng::seed_from_u64(1);
    let unit = GloReUnit::new(
        &mut Init::new(&mut store, &mut init_rng, "glore"),
        GloReConfig::new(8, 3, 5),
    )
    .map_err(e2s)?;
    let params: Vec<Var> = store.trainable().map(|(_, v)| v.clone()).collect();
    let x = Var::from_tensor(&randn(&mut rng, &[2, 8, 4, 4])).unwrap();
    let glore_loss = || {
        let out = unit.forward(x.as_tensor(), None).unwrap();
        (out.y.sum_all().unwrap() + out.gisf.sum_all().unwrap()).unwrap()
    };
    let s = finite_difference(&params, std::slice::from_ref(&x), &glore_loss, 20, &mut rng);
    report.push(("GloRe", s));

    // graph attention, M = 3
    let mut store = ParamStore::new(DType::F64);
    let gat =
        GraphAttention::new(&mut Init::new(&mut store, &mut init_rng, "sg.gat"), 6).map_err(e2s)?;
    let params: Vec<Var> = store.trainable().map(|(_, v)| v.clone()).collect();
    let hv = Var::from_tensor(&randn(&mut rng, &[3, 6])).unwrap();
    let w = randn(&mut rng, &[3, 6]);
    let adj = neighborhoods(3, &[[0, 1], [0, 2]]);
    let gat_loss = || {
        (gat.attend(hv.as_tensor(), &adj).unwrap().0 * &w)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    let s = finite_difference(&params, std::slice::from_ref(&hv), &gat_loss, 20, &mut rng);
    report.push(("attention", s));

    // edge readout, E = 2, GISF mode
    let mut store = ParamStore::new(DType::F64);
    let cfg = SceneGraphConfig {
        visual_dim: 8,
        semantic_dim: 4,
        fused_dim: 6,
        hidden: 10,
        extra_dim: 5,
        penultimate_dim: 5,
        edge_mode: EdgeMode::Gisf,
        ..Default::default()
    };
    let edge_dim = cfg.edge_dim();
    let head =
        SceneGraphHead::new(&mut Init::new(&mut store, &mut init_rng, ""), cfg).map_err(e2s)?;
    let params: Vec<Var> = store
        .trainable()
        .filter(|(n, _)| n.starts_with("sg.readout") || n.starts_with("sg.out"))
        .map(|(_, v)| v.clone())
        .collect();
    let ef = Var::from_tensor(&randn(&mut rng, &[2, edge_dim])).unwrap();
    let extra = Var::from_tensor(&randn(&mut rng, &[5])).unwrap();
    let w = randn(&mut rng, &[2, NUM_INTERACTIONS]);
    let empty = Tensor::zeros((0, 1), DType::F64, &Device::Cpu).unwrap();
    let readout_loss = || {
        let bundle = GraphBundle {
            visual: empty.clone(),
            semantic: empty.clone(),
            fused: empty.clone(),
            visual_attention: empty.clone(),
            semantic_attention: empty.clone(),
            edge_features: ef.as_tensor().clone(),
        };
        (head.edge_readout(&bundle, Some(extra.as_tensor())).unwrap() * &w)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    let s = finite_difference(
        &params,
        &[ef.clone(), extra.clone()],
        &readout_loss,
        20,
        &mut rng,
    );
    report.push(("readout", s));

    let elapsed = start.elapsed();
    let detail = report
        .iter()
        .map(|(n, s)| format!("{n} {} coords max rel err {:.1e}", s.coords, s.worst))
        .collect::<Vec<_>>()
        .join("; ");
    let ok = report
        .iter()
        .all(|(_, s)| s.coords >= 20 && s.worst <= 1e-4)
        && elapsed < Duration::from_secs(60);
    check(
        ok,
        format!("{detail}; {:.1}s", elapsed.as_secs_f64()),
        detail,
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let sg = rng.random::<f64>() * 10.0;
        let seg = rng.random::<f64>() * 10.0;
        let kl = rng.random::<f64>() * 10.0;
        let v = compose_vmtl(sg, seg, 0.4).map_err(e2s)?;
        let k = compose_kdmtl(sg, seg, kl, 0.4).map_err(e2s)?;
        worst = worst.max((v - (0.4 * sg + 0.6 * seg)).abs());
        worst = worst.max((k - (0.4 * sg + seg + kl)).abs());
    }
    check(
        worst <= 1e-12,
        format!("1000 random inputs, max abs deviation {worst:.1e}"),
        format!("max abs deviation {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let kl = |s: &Tensor, t: &Tensor| scalar(&encoder_kld(s, t).unwrap());
    let mut self_worst: f64 = 0.0;
    let mut min_pair = f64::INFINITY;
    for _ in 0..1000 {
        let p = randn(&mut rng, &[2, 5, 2, 3]).affine(2.0, 0.0).unwrap();
        let q = randn(&mut rng, &[2, 5, 2, 3]).affine(2.0, 0.0).unwrap();
        self_worst = self_worst.max(kl(&p, &p).abs());
        min_pair = min_pair.min(kl(&p, &q));
    }
    // teacher logits [0, ln 3] → p_t = (1/4, 3/4); student uniform
    let t = Tensor::new(&[0.0f64, 3f64.ln()], &Device::Cpu)
        .unwrap()
        .reshape((1, 2, 1, 1))
        .unwrap();
    let s = Tensor::zeros((1, 2, 1, 1), DType::F64, &Device::Cpu).unwrap();
    let oracle = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    let toy = kl(&s, &t);
    check(
        self_worst <= 1e-9 && min_pair >= 0.0 && (toy - oracle).abs() <= 1e-9,
        format!("KL(p,p) ≤ {self_worst:.1e}, min over 1000 pairs {min_pair:.3}, toy {toy:.6} vs {oracle:.6}"),
        format!("KL(p,p) {self_worst:.1e}, min pair {min_pair}, toy {toy} vs {oracle}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut seg_bad = 0;
    for _ in 0..100 {
        let k = rng.random_range(1..=8u8);
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..k)).collect();
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..k)).collect();
        let m = seg_metrics(
            &LabelMap::new(1, 8, 8, pred.clone()).unwrap(),
            &LabelMap::new(1, 8, 8, gt.clone()).unwrap(),
        )
        .map_err(e2s)?;
        // brute-force confusion matrix
        let mut cm = [[0usize; 8]; 8];
        for (&p, &g) in pred.iter().zip(&gt) {
            cm[g as usize][p as usize] += 1;
        }
        let mut ious = Vec::new();
        let mut per_class = [0.0; 8];
        for c in 0..8 {
            let tp = cm[c][c];
            let fn_: usize = (0..8).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            let fp: usize = (0..8).filter(|&g| g != c).map(|g| cm[g][c]).sum();
            if tp + fn_ + fp > 0 {
                per_class[c] = tp as f64 / (tp + fn_ + fp) as f64;
                ious.push(per_class[c]);
            }
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let acc = (0..8).map(|c| cm[c][c]).sum::<usize>() as f64 / 64.0;
        if m.miou != miou || m.pixel_acc != acc || m.per_class_iou[..] != per_class[..] {
            seg_bad += 1;
        }
    }
    let mut sg_worst: f64 = 0.0;
    for _ in 0..200 {
        let e = rng.random_range(1..15);
        let scores: Vec<[f64; NUM_INTERACTIONS]> = (0..e)
            .map(|_| std::array::from_fn(|_| rng.random()))
            .collect();
        let targets: Vec<[u8; NUM_INTERACTIONS]> = (0..e)
            .map(|_| std::array::from_fn(|_| rng.random_bool(0.35) as u8))
            .collect();
        let m = sg_metrics(&scores, &targets).map_err(e2s)?;
        let (mut aps, mut recalls) = (Vec::new(), Vec::new());
        for c in 0..NUM_INTERACTIONS {
            let mut ranked: Vec<(f64, u8)> =
                (0..e).map(|i| (scores[i][c], targets[i][c])).collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let positives = ranked.iter().filter(|r| r.1 == 1).count();
            if positives == 0 {
                continue;
            }
            let mut hits = 0;
            let mut precisions = 0.0;
            for (rank, r) in ranked.iter().enumerate() {
                if r.1 == 1 {
                    hits += 1;
                    precisions += hits as f64 / (rank + 1) as f64;
                }
            }
            aps.push(precisions / positives as f64);
            let found = ranked.iter().filter(|r| r.1 == 1 && r.0 >= 0.5).count();
            recalls.push(found as f64 / positives as f64);
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let top1 = (0..e)
            .filter(|&i| {
                let best =
                    (0..NUM_INTERACTIONS)
                        .fold(0, |b, c| if scores[i][c] > scores[i][b] { c } else { b });
                targets[i][best] == 1
            })
            .count() as f64
            / e as f64;
        sg_worst = sg_worst.max((m.acc - top1).abs());
        sg_worst = sg_worst
            .max((m.map - mean(&aps)).abs())
            .max((m.recall - mean(&recalls)).abs());
    }
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap_or(f64::NAN);
    check(
        seg_bad == 0 && sg_worst <= 1e-9 && (ap - 0.8333).abs() < 5e-5,
        format!("100 seg maps exact, 200 score matrices within {sg_worst:.1e}, worked AP {ap:.4}"),
        format!("{seg_bad} seg mismatches, sg deviation {sg_worst:.1e}, AP {ap}"),
    )
}

// ---------------------------------------------------------------- 5

fn hash_groups(model: &MultiTaskModel, groups: &[Group]) -> String {
    let mut h = Sha256::new();
    for (name, var) in model.store().iter() {
        if Group::of(name).is_some_and(|g| groups.contains(&g)) {
            h.update(name.as_bytes());
            for v in var
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
            {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn tiny_samples(seed: u64, n: usize, h: usize, w: usize, dtype: DType) -> Vec<SceneSample> {
    let mut cfg = SynthConfig::new(seed, n);
    cfg.height = h;
    cfg.width = w;
    synth_generate(&cfg)
        .unwrap()
        .iter()
        .map(|f| to_sample(&f.raw(), &ChannelStats::default(), dtype).unwrap())
        .collect()
}

fn criterion_5() -> Outcome {
    let data = TrainData {
        train: tiny_samples(5, 4, 64, 64, DType::F64),
        val: vec![],
    };
    let mut model = MultiTaskModel::new(
        ModelConfig {
            variant: SegVariant::GR,
            ..Default::default()
        },
        DType::F64,
    )
    .map_err(e2s)?;
    let cfg = TrainConfig {
        regime: Regime::S,
        epochs: 2,
        stage_b_epochs: 3,
        batch: 2,
        lr: LrSchedule {
            base: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let groups = [Group::Shared, Group::Segmentation];
    let mut session = Session::new(&mut model, cfg).map_err(e2s)?;
    let a = session.run_epochs(&data, 2).map_err(e2s)?;
    if a.progress.stage != Stage::B {
        return Err(format!(
            "expected to stand at stage B, got {:?}",
            a.progress
        ));
    }
    let before = hash_groups(session.model(), &groups);
    let sg_before = hash_groups(session.model(), &[Group::SceneGraph]);
    let b = session.run(&data).map_err(e2s)?;
    let after = hash_groups(&model, &groups);
    let sg_after = hash_groups(&model, &[Group::SceneGraph]);
    check(
        before == after && sg_before != sg_after && b.progress.stage == Stage::Done,
        format!(
            "w_sh‖w_seg sha256 {}… unchanged over stage B, w_sg changed",
            &before[..12]
        ),
        format!(
            "before {before} after {after}; w_sg changed: {}",
            sg_before != sg_after
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut store = ParamStore::new(DType::F64);
    let mut init_rng = ChaCha8Rng::seed_from_u64(6);
    let unit = GloReUnit::new(
        &mut Init::new(&mut store, &mut init_rng, "glore"),
        GloReConfig::new(12, 4, 6),
    )
    .map_err(e2s)?;
    let state = store
        .iter()
        .find(|(n, _)| n.ends_with(".state"))
        .map(|(_, v)| v.clone())
        .ok_or("no state weight")?;
    state
        .set(&Tensor::zeros((6, 6), DType::F64, &Device::Cpu).unwrap())
        .unwrap();
    let mut identical = 0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..50 {
        let (b, h, w) = (
            rng.random_range(1..3),
            rng.random_range(1..7),
            rng.random_range(1..7),
        );
        let x = randn(&mut rng, &[b, 12, h, w]).affine(3.0, 0.0).unwrap();
        let out = unit.forward(&x, None).map_err(e2s)?;
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ys = out.y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        if xs.iter().zip(&ys).all(|(a, b)| a.to_bits() == b.to_bits()) {
            identical += 1;
        }
        // assignment is B × N × hw; sum over nodes
        let sums = out
            .assignment
            .sum(1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for s in sums {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }
    check(
        identical == 50 && worst_sum <= 1e-6,
        format!("50/50 bit-identical, assignment sums within {worst_sum:.1e} of 1"),
        format!("{identical}/50 identical, assignment deviation {worst_sum:.1e}"),
    )
}

// ---------------------------------------------------------------- 7

fn overfit_run(mode: EdgeMode, data: &TrainData) -> Result<(MultiTaskModel, f64, f64), String> {
    let mut model = MultiTaskModel::new(
        ModelConfig {
            variant: SegVariant::MSLRGR,
            edge_mode: mode,
            ..Default::default()
        },
        DType::F32,
    )
    .map_err(e2s)?;
    let cfg = TrainConfig {
        regime: Regime::S,
        epochs: 10,
        stage_b_epochs: 200,
        batch: 4,
        lr: LrSchedule {
            base: 1e-3,
            ..Default::default()
        },
        checkpoint_every: 0,
        ..Default::default()
    };
    Session::new(&mut model, cfg)
        .map_err(e2s)?
        .run(data)
        .map_err(e2s)?;
    let (report, _) = evaluate(&model, &data.train, 4, false).map_err(e2s)?;
    Ok((model, report.seg.pixel_acc, report.sg.acc))
}

fn criterion_7() -> Outcome {
    Precision::Fast.apply();
    let start = Instant::now();
    let data = TrainData {
        train: tiny_samples(7, 16, 160, 224, DType::F32),
        val: vec![],
    };
    let (gisf, p_acc, acc) = overfit_run(EdgeMode::Gisf, &data)?;
    let gisf_time = start.elapsed();
    let (none, _, _) = overfit_run(EdgeMode::None, &data)?;
    let mut max_diff: f64 = 0.0;
    for s in &data.train {
        let img = s.image.unsqueeze(0).unwrap();
        let a = gisf
            .forward(&img, &[&s.annotation], Tasks::BOTH, Mode::Eval)
            .map_err(e2s)?;
        let b = none
            .forward(&img, &[&s.annotation], Tasks::BOTH, Mode::Eval)
            .map_err(e2s)?;
        let d = (&a.interactions[0] - &b.interactions[0])
            .unwrap()
            .abs()
            .unwrap();
        if d.elem_count() > 0 {
            max_diff = max_diff.max(scalar(&d.max_all().unwrap()));
        }
    }
    Precision::Fixed.apply();
    let detail = format!(
        "P-Acc {p_acc:.4}, interaction acc {acc:.4} after 10+200 epochs; GISF run {:.0}s on {} core(s); \
         GISF vs NONE max logit diff {max_diff:.2e}",
        gisf_time.as_secs_f64(),
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    check(
        p_acc >= 0.95 && acc >= 0.90 && gisf_time < Duration::from_secs(15 * 60) && max_diff > 0.0,
        detail.clone(),
        detail,
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let image = Tensor::randn(0f32, 1.0, (1, 3, 320, 400), &Device::Cpu).unwrap();
    let mut shapes = Vec::new();
    for variant in [SegVariant::GR, SegVariant::MSGR, SegVariant::MSLRGR] {
        let m = MultiTaskModel::new(
            ModelConfig {
                variant,
                ..Default::default()
            },
            DType::F32,
        )
        .map_err(e2s)?;
        let out = m
            .forward(&image, &[], Tasks::SEGMENTATION, Mode::Eval)
            .map_err(e2s)?;
        shapes.push((
            variant,
            out.seg.logits.dims().to_vec(),
            out.seg.gisf.dims().to_vec(),
        ));
        for (h, w) in [(64, 96), (96, 160)] {
            let small = Tensor::randn(0f32, 1.0, (2, 3, h, w), &Device::Cpu).unwrap();
            let o = m
                .forward(&small, &[], Tasks::SEGMENTATION, Mode::Eval)
                .map_err(e2s)?;
            shapes.push((
                variant,
                o.seg.logits.dims().to_vec(),
                o.seg.gisf.dims().to_vec(),
            ));
        }
    }
    let ok = shapes.iter().all(|(_, l, g)| {
        l[1] == 8
            && g[1] == GISF_DIM
            && (l[2..] == [320, 400] || l[2..] == [64, 96] || l[2..] == [96, 160])
    }) && shapes
        .iter()
        .step_by(3)
        .all(|(_, l, _)| l == &[1, 8, 320, 400]);
    check(
        ok,
        "logits 1×8×320×400 for GR, MSGR, MSLRGR; GISF 64-wide at 320×400, 64×96, 96×160".into(),
        format!("{shapes:?}"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let points = [(0, 1e-5), (10, 9.8e-6), (25, 9.604e-6)];
    let exact = points
        .iter()
        .all(|&(e, want)| (lr_at(e) - want).abs() <= 1e-12 * want);
    let monotone = (1..130).all(|e| lr_at(e) <= lr_at(e - 1));
    check(
        exact && monotone,
        format!(
            "lr(0)={:.4e} lr(10)={:.4e} lr(25)={:.4e}; non-increasing over 130 epochs",
            lr_at(0),
            lr_at(10),
            lr_at(25)
        ),
        format!(
            "values {:?}, monotone {monotone}",
            points.map(|(e, _)| lr_at(e))
        ),
    )
}

// ---------------------------------------------------------------- 10

fn train_once(data: &Path, out: &Path) -> Result<String, String> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(&format!(
        "regime = S\nvariant = MSLRGR\nedge_mode = GISF\nepochs = 2\nstage_b_epochs = 2\nbatch = 2\n\
         lr = 0.001\nseed = 17\nprecision = fixed\nheight = 64\nwidth = 64\ndata = {}\nout = {}\n\
         train_sequences = 2\ntest_sequences = 1\n",
        data.display(),
        out.display()
    ))
    .map_err(e2s)?;
    let dir = train(&cfg, None).map_err(e2s)?;
    std::fs::read_to_string(dir.join(LOG_FILE)).map_err(e2s)
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut synth = SynthConfig::new(10, 5);
    synth.height = 64;
    synth.width = 64;
    synth.sequences = vec![1, 2];
    write_dataset(
        &tmp.path().join("data"),
        &synth_generate(&synth).map_err(e2s)?,
    )
    .map_err(e2s)?;
    let a = train_once(&tmp.path().join("data"), &tmp.path().join("a"))?;
    let b = train_once(&tmp.path().join("data"), &tmp.path().join("b"))?;
    let lines = a.lines().count();
    check(
        a == b && lines == 4,
        format!("two fixed-precision runs wrote identical {lines}-line epoch logs"),
        format!("logs differ or wrong length ({lines} lines)"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", criterion_1),
        ("loss exactness", criterion_2),
        ("KLD properties", criterion_3),
        ("metric oracles", criterion_4),
        ("S-MTL freeze contract", criterion_5),
        ("residual identity", criterion_6),
        ("synthetic overfit", criterion_7),
        ("shape law", criterion_8),
        ("learning-rate schedule", criterion_9),
        ("determinism", criterion_10),
    ];
    Precision::Fixed.apply();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
