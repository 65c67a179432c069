//! Built-in consistency suites run by the `selftest` command.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datakit::{synth_generate, to_sample, ChannelStats, SynthConfig};
use crate::geometry::NormBox;
use crate::gradcheck::{run_fixture, Fault, GradCheckConfig, FIXTURES};
use crate::labels::{LabelMap, NUM_INTERACTIONS, NUM_SEG_CLASSES};
use crate::model::{ModelConfig, MultiTaskModel};
use crate::mtlopt::{
    compose_kdmtl, compose_vmtl, encoder_kld, LrSchedule, Regime, Session, TrainConfig, TrainData,
};
use crate::params::{Init, ParamStore};
use crate::scenegraph::{sg_metrics, Annotation, SceneGraphConfig, SceneGraphHead};
use crate::seghead::{seg_metrics, SegVariant};
use crate::Result;

pub const SUITES: [&str; 6] = [
    "gradients",
    "metric-oracles",
    "loss-exactness",
    "kld",
    "freeze",
    "permutation",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    /// Failing checks, each naming the kernel or case involved.
    pub failures: Vec<String>,
    pub seconds: f64,
}

fn finish(suite: &str, start: Instant, failures: Vec<String>) -> SuiteResult {
    SuiteResult {
        suite: suite.to_string(),
        passed: failures.is_empty(),
        failures,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every suite. `fault` corrupts one gradient fixture's analytic
/// gradients.
pub fn run_all(fault: Option<&Fault>) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s, fault)).collect()
}

pub fn run_suite(suite: &str, fault: Option<&Fault>) -> Result<SuiteResult> {
    let start = Instant::now();
    let failures = match suite {
        "gradients" => gradients(fault)?,
        "metric-oracles" => metric_oracles()?,
        "loss-exactness" => loss_exactness()?,
        "kld" => kld()?,
        "freeze" => freeze()?,
        "permutation" => permutation()?,
        other => vec![format!("unknown suite `{other}`")],
    };
    Ok(finish(suite, start, failures))
}

fn gradients(fault: Option<&Fault>) -> Result<Vec<String>> {
    let cfg = GradCheckConfig::default();
    let mut failures = Vec::new();
    for name in FIXTURES {
        let r = run_fixture(name, &cfg, fault)?;
        if !r.passed {
            let w = r.worst().expect("coordinates were sampled");
            failures.push(format!(
                "kernel {name}: {}[{}] analytic {:.6e} vs numeric {:.6e} (rel err {:.2e})",
                w.var, w.index, w.analytic, w.numeric, w.rel_err
            ));
        }
    }
    Ok(failures)
}

fn random_map(rng: &mut ChaCha8Rng, classes: u8) -> LabelMap {
    let data = (0..64).map(|_| rng.random_range(0..classes)).collect();
    LabelMap::new(1, 8, 8, data).expect("64 labels")
}

/// Per-class pixel counting, independent of the confusion matrix.
fn iou_oracle(pred: &LabelMap, gt: &LabelMap, k: u8) -> Option<f64> {
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&p, &g)| p == k && g == k)
        .count();
    let union = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&p, &g)| p == k || g == k)
        .count();
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Precision at each positive counted pairwise, without sorting.
fn ap_oracle(scores: &[f64], targets: &[u8]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| targets[i] == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let above = scores.iter().filter(|&&s| s >= scores[i]).count();
            let hits = pos.iter().filter(|&&j| scores[j] >= scores[i]).count();
            hits as f64 / above as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn metric_oracles() -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    for case in 0..100 {
        // few classes per case so some are absent
        let classes = rng.random_range(1..=NUM_SEG_CLASSES as u8);
        let (pred, gt) = (random_map(&mut rng, classes), random_map(&mut rng, classes));
        let m = seg_metrics(&pred, &gt)?;
        let ious: Vec<Option<f64>> = (0..NUM_SEG_CLASSES as u8)
            .map(|k| iou_oracle(&pred, &gt, k))
            .collect();
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let acc = pred
            .data
            .iter()
            .zip(&gt.data)
            .filter(|(p, g)| p == g)
            .count() as f64
            / 64.0;
        let per_class_ok = ious
            .iter()
            .zip(&m.per_class_iou)
            .all(|(o, &v)| o.unwrap_or(0.0) == v);
        if !per_class_ok || m.miou != miou || m.pixel_acc != acc {
            failures.push(format!(
                "seg_metrics case {case}: got miou {} acc {}, oracle {miou} {acc}",
                m.miou, m.pixel_acc
            ));
        }
    }
    for case in 0..200 {
        let e = rng.random_range(1..12);
        let scores: Vec<[f64; NUM_INTERACTIONS]> = (0..e)
            .map(|_| std::array::from_fn(|_| rng.random()))
            .collect();
        let targets: Vec<[u8; NUM_INTERACTIONS]> = (0..e)
            .map(|_| std::array::from_fn(|_| rng.random_bool(0.3) as u8))
            .collect();
        let m = sg_metrics(&scores, &targets)?;
        let mut aps = Vec::new();
        let mut recalls = Vec::new();
        for c in 0..NUM_INTERACTIONS {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let tc: Vec<u8> = targets.iter().map(|t| t[c]).collect();
            if let Some(ap) = ap_oracle(&col, &tc) {
                aps.push(ap);
                let pos = tc.iter().filter(|&&t| t == 1).count() as f64;
                recalls.push((0..e).filter(|&i| tc[i] == 1 && col[i] >= 0.5).count() as f64 / pos);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        if (m.map - mean(&aps)).abs() > 1e-9 || (m.recall - mean(&recalls)).abs() > 1e-9 {
            failures.push(format!(
                "sg_metrics case {case}: map {} recall {}",
                m.map, m.recall
            ));
        }
    }
    let ap = crate::scenegraph::average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]);
    if (ap.unwrap_or(0.0) - 5.0 / 6.0).abs() > 1e-12 {
        failures.push(format!("worked AP example gave {ap:?}"));
    }
    Ok(failures)
}

fn loss_exactness() -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let (sg, seg, kl) = (
            rng.random::<f64>() * 5.0,
            rng.random::<f64>() * 5.0,
            rng.random::<f64>() * 5.0,
        );
        let v = compose_vmtl(sg, seg, 0.4)?;
        let k = compose_kdmtl(sg, seg, kl, 0.4)?;
        if (v - (0.4 * sg + 0.6 * seg)).abs() > 1e-12 || (k - (0.4 * sg + seg + kl)).abs() > 1e-12 {
            failures.push(format!(
                "composition mismatch at l_sg={sg} l_seg={seg} l_kld={kl}"
            ));
            break;
        }
    }
    let lr = LrSchedule::default();
    let mut prev = f64::INFINITY;
    for e in 0..130 {
        let v = lr.at(e);
        if v > prev {
            failures.push(format!("learning rate increases at epoch {e}"));
        }
        prev = v;
    }
    for (e, want) in [(0, 1e-5), (10, 9.8e-6), (25, 9.604e-6)] {
        if (lr.at(e) - want).abs() > 1e-18 {
            failures.push(format!("lr at epoch {e} is {}", lr.at(e)));
        }
    }
    Ok(failures)
}

fn kld() -> Result<Vec<String>> {
    let mut failures = Vec::new();
    let dev = Device::Cpu;
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
    for case in 0..1000u64 {
        let p = Tensor::randn(0f64, 2.0, (1, 4, 2, 2), &dev)?;
        let q = Tensor::randn(0f64, 2.0, (1, 4, 2, 2), &dev)?;
        let same = scalar(encoder_kld(&p, &p)?)?;
        let diff = scalar(encoder_kld(&p, &q)?)?;
        if same.abs() > 1e-9 || diff < 0.0 {
            failures.push(format!("case {case}: KLD(p,p)={same}, KLD(p,q)={diff}"));
            break;
        }
    }
    let t = Tensor::new(&[0.0f64, 3f64.ln()], &dev)?.reshape((1, 2, 1, 1))?;
    let s = Tensor::zeros((1, 2, 1, 1), DType::F64, &dev)?;
    let want = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    let got = scalar(encoder_kld(&s, &t)?)?;
    if (got - want).abs() > 1e-9 {
        failures.push(format!("two-point case: {got} vs {want}"));
    }
    Ok(failures)
}

fn freeze() -> Result<Vec<String>> {
    let mut cfg = SynthConfig::new(3, 2);
    cfg.height = 32;
    cfg.width = 48;
    let train = synth_generate(&cfg)?
        .iter()
        .map(|f| to_sample(&f.raw(), &ChannelStats::default(), DType::F64))
        .collect::<Result<Vec<_>>>()?;
    let mut model = MultiTaskModel::new(
        ModelConfig {
            variant: SegVariant::GR,
            ..Default::default()
        },
        DType::F64,
    )?;
    let tc = TrainConfig {
        regime: Regime::S,
        epochs: 1,
        stage_b_epochs: 1,
        batch: 2,
        ..Default::default()
    };
    let data = TrainData { train, val: vec![] };
    let summary = Session::new(&mut model, tc)?.run(&data)?;
    Ok(match summary.freeze_hashes {
        Some((a, b)) if a == b => vec![],
        Some((a, b)) => vec![format!(
            "encoder/segmentation hash changed during stage B: {a} → {b}"
        )],
        None => vec!["stage B did not run".into()],
    })
}

fn permutation() -> Result<Vec<String>> {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = SceneGraphConfig {
        visual_dim: 16,
        ..Default::default()
    };
    let head = SceneGraphHead::new(&mut Init::new(&mut store, &mut rng, ""), cfg)?;
    let boxes = vec![
        NormBox::new(0.1, 0.1, 0.7, 0.8),
        NormBox::new(0.6, 0.2, 0.9, 0.5),
        NormBox::new(0.0, 0.5, 0.3, 0.9),
        NormBox::new(0.4, 0.0, 0.6, 0.3),
    ];
    let ann = Annotation {
        boxes: boxes.clone(),
        semantics: vec![0, 2, 5, 7],
        edges: vec![[0, 1], [0, 2], [0, 3]],
        targets: vec![[0; NUM_INTERACTIONS]; 3],
    };
    let visual = Tensor::randn(0f64, 1.0, (4, 16), &Device::Cpu)?;
    let gisf = Tensor::randn(0f64, 1.0, 64, &Device::Cpu)?;
    let logits = head.edge_readout(&head.graphs(&visual, &ann)?, Some(&gisf))?;
    // node i moves to position perm[i]; edge order is kept
    let perm = [2usize, 3, 0, 1];
    let mut p_boxes = boxes.clone();
    let mut p_sem = ann.semantics.clone();
    let mut rows = vec![0u32; 4];
    for i in 0..4 {
        p_boxes[perm[i]] = boxes[i];
        p_sem[perm[i]] = ann.semantics[i];
        rows[perm[i]] = i as u32;
    }
    let p_ann = Annotation {
        boxes: p_boxes,
        semantics: p_sem,
        edges: ann.edges.iter().map(|e| [perm[e[0]], perm[e[1]]]).collect(),
        targets: ann.targets.clone(),
    };
    let p_visual = visual.index_select(&Tensor::new(rows.as_slice(), &Device::Cpu)?, 0)?;
    let p_logits = head.edge_readout(&head.graphs(&p_visual, &p_ann)?, Some(&gisf))?;
    let d = (logits - p_logits)?.abs()?.max_all()?.to_scalar::<f64>()?;
    Ok(if d > 1e-12 {
        vec![format!(
            "edge logits change under node relabeling (max diff {d:.3e})"
        )]
    } else {
        vec![]
    })
}
