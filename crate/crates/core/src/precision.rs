//! Numeric precision modes.
//!
//! `fixed` computes in double precision with single-threaded kernels, so a
//! run is reproducible bit for bit on any machine. `fast` computes in single
//! precision and lets matrix products use every core.

use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::{kernels, Error, Result};

pub const PRECISION_ENV: &str = "GLORE_MTL_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fixed,
    #[default]
    Fast,
}

impl Precision {
    /// Mode named by the environment, defaulting to `fast`.
    pub fn from_env() -> Result<Self> {
        match std::env::var(PRECISION_ENV) {
            Ok(v) => v.parse(),
            Err(std::env::VarError::NotPresent) => Ok(Precision::Fast),
            Err(e) => Err(Error::Config(format!("{PRECISION_ENV}: {e}"))),
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            Precision::Fixed => DType::F64,
            Precision::Fast => DType::F32,
        }
    }

    /// Configures kernel threading for this mode.
    pub fn apply(self) {
        kernels::set_parallel(self == Precision::Fast);
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fixed => "fixed",
            Precision::Fast => "fast",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixed" => Ok(Precision::Fixed),
            "fast" => Ok(Precision::Fast),
            other => Err(Error::Config(format!(
                "unknown precision mode `{other}` (expected fixed or fast)"
            ))),
        }
    }
}
