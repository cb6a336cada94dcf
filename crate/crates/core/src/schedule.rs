//! Time grids over `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("a schedule needs at least one step")]
    ZeroSteps,
    #[error("unknown schedule kind {0:?} (expected uniform or harmonic)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Uniform,
    Harmonic,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Harmonic => "harmonic",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(ScheduleKind::Uniform),
            "harmonic" => Ok(ScheduleKind::Harmonic),
            _ => Err(ScheduleError::UnknownKind(s.to_string())),
        }
    }
}

/// `T + 1` increasing times from 0 to 1 and the `T` step widths between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub times: Vec<f64>,
    pub widths: Vec<f64>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self, ScheduleError> {
        match kind {
            ScheduleKind::Uniform => Self::uniform(steps),
            ScheduleKind::Harmonic => Self::harmonic(steps),
        }
    }

    pub fn uniform(steps: usize) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::ZeroSteps);
        }
        let times = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        Ok(Self::from_times(ScheduleKind::Uniform, times))
    }

    /// Step widths proportional to `1, 1/2, ..., 1/T`: large steps near
    /// `t = 0`, fine resolution near `t = 1`.
    pub fn harmonic(steps: usize) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::ZeroSteps);
        }
        let raw: Vec<f64> = (1..=steps).map(|i| 1.0 / i as f64).collect();
        let total: f64 = raw.iter().sum();
        let mut times = Vec::with_capacity(steps + 1);
        times.push(0.0);
        let mut acc = 0.0;
        for w in &raw[..steps - 1] {
            acc += w / total;
            times.push(acc);
        }
        times.push(1.0);
        Ok(Self::from_times(ScheduleKind::Harmonic, times))
    }

    fn from_times(kind: ScheduleKind, mut times: Vec<f64>) -> Self {
        let last = times.len() - 1;
        times[last] = 1.0;
        let widths = times.windows(2).map(|w| w[1] - w[0]).collect();
        Self { kind, times, widths }
    }

    pub fn steps(&self) -> usize {
        self.widths.len()
    }
}
