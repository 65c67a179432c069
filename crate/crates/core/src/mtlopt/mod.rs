//! Multi-task optimization: loss composition, encoder distillation, the
//! learning-rate schedule and the training regimes.

mod adam;
mod train;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use train::{
    load_model, save_checkpoint, EpochLog, Progress, Session, Stage, TrainConfig, TrainData,
    TrainSummary,
};

use crate::nn::log_softmax;
use crate::{Error, Result};

/// Interaction-loss weight used by both joint regimes.
pub const DEFAULT_ALPHA: f64 = 0.4;

/// How the two task losses are combined and scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Regime {
    /// Weighted sum α·L_sg + (1−α)·L_seg.
    V,
    /// α·L_sg + L_seg + KL(teacher encoder ‖ student encoder).
    KD,
    /// Segmentation first, then the interaction head on frozen features.
    #[default]
    S,
    /// Segmentation only; also trains distillation teachers.
    STL,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::V => "V",
            Regime::KD => "KD",
            Regime::S => "S",
            Regime::STL => "STL",
        }
    }

    /// Whether both tasks are optimized through one combined loss.
    pub fn is_joint(self) -> bool {
        matches!(self, Regime::V | Regime::KD)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V" | "V-MTL" => Ok(Regime::V),
            "KD" | "KD-MTL" => Ok(Regime::KD),
            "S" | "S-MTL" => Ok(Regime::S),
            "STL" => Ok(Regime::STL),
            _ => Err(Error::Config(format!(
                "unknown regime `{s}` (expected V, KD, S or STL)"
            ))),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha {alpha} is outside (0, 1)")))
    }
}

/// α·l_sg + (1−α)·l_seg.
pub fn compose_vmtl(l_sg: f64, l_seg: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_sg + (1.0 - alpha) * l_seg)
}

/// α·l_sg + l_seg + l_kld.
pub fn compose_kdmtl(l_sg: f64, l_seg: f64, l_kld: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if l_kld < 0.0 {
        return Err(Error::invalid(format!(
            "a divergence cannot be negative (got {l_kld})"
        )));
    }
    Ok(alpha * l_sg + l_seg + l_kld)
}

/// Per-batch loss terms and the regime total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_sg: f64,
    pub l_kld: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBundle {
    /// Totals the terms the way `regime` (in `stage`) optimizes them.
    pub fn compose(
        regime: Regime,
        stage: Stage,
        l_seg: f64,
        l_sg: f64,
        l_kld: f64,
        alpha: f64,
    ) -> Result<Self> {
        let total = match (regime, stage) {
            (Regime::V, _) => compose_vmtl(l_sg, l_seg, alpha)?,
            (Regime::KD, _) => compose_kdmtl(l_sg, l_seg, l_kld, alpha)?,
            (_, Stage::B) => l_sg,
            _ => l_seg,
        };
        Ok(Self {
            l_seg,
            l_sg,
            l_kld,
            alpha,
            total,
        })
    }
}

/// Tensor version of the regime total, for backpropagation.
pub(crate) fn compose_tensor(
    regime: Regime,
    stage: Stage,
    l_seg: Option<&Tensor>,
    l_sg: Option<&Tensor>,
    l_kld: Option<&Tensor>,
    alpha: f64,
) -> Result<Tensor> {
    let need = |t: Option<&Tensor>, what: &str| {
        t.cloned()
            .ok_or_else(|| Error::invalid(format!("{what} is required")))
    };
    Ok(match (regime, stage) {
        (Regime::V, _) => {
            ((need(l_sg, "interaction loss")? * alpha)?
                + (need(l_seg, "segmentation loss")? * (1.0 - alpha))?)?
        }
        (Regime::KD, _) => {
            (((need(l_sg, "interaction loss")? * alpha)? + need(l_seg, "segmentation loss")?)?
                + need(l_kld, "distillation loss")?)?
        }
        (_, Stage::B) => need(l_sg, "interaction loss")?,
        _ => need(l_seg, "segmentation loss")?,
    })
}

/// Mean over spatial locations of KL(p_teacher ‖ p_student), where each
/// location's distribution is the softmax over channels.
pub fn encoder_kld(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::Shape(format!(
            "student map {:?} and teacher map {:?} differ",
            student.dims(),
            teacher.dims()
        )));
    }
    let (b, _, h, w) = student.dims4()?;
    let teacher = teacher.to_dtype(student.dtype())?.detach();
    let lt = log_softmax(&teacher, 1)?;
    let ls = log_softmax(student, 1)?;
    let kl = (lt.exp()? * (lt - ls)?)?.sum_all()?;
    Ok((kl / (b * h * w) as f64)?)
}

/// Step-decayed learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-5,
            decay: 0.98,
            every: 10,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Learning rate of `epoch` under the default schedule.
pub fn lr_at(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}
