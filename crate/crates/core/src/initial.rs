//! Named smooth periodic initial data.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SacError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum InitialPreset {
    /// `a Π_i cos(2π m x_i / R)`.
    Cos { amplitude: f64, wavenumber: u32 },
    /// `a tanh(cos(2π x_1 / R) / w)`: two smooth interfaces of width `w`.
    TanhLayer { amplitude: f64, width: f64 },
    Constant { value: f64 },
}

impl Default for InitialPreset {
    fn default() -> Self {
        InitialPreset::Cos {
            amplitude: 1.0,
            wavenumber: 1,
        }
    }
}

impl InitialPreset {
    pub fn eval(&self, x: &[f64], length: f64) -> f64 {
        match *self {
            InitialPreset::Cos {
                amplitude,
                wavenumber,
            } => {
                let w = 2.0 * PI * f64::from(wavenumber) / length;
                amplitude * x.iter().map(|xi| (w * xi).cos()).product::<f64>()
            }
            InitialPreset::TanhLayer { amplitude, width } => {
                amplitude * ((2.0 * PI * x[0] / length).cos() / width).tanh()
            }
            InitialPreset::Constant { value } => value,
        }
    }

    /// Preset name as written in config files.
    pub fn name(&self) -> String {
        match self {
            InitialPreset::Cos { .. } => "cos".into(),
            InitialPreset::TanhLayer { .. } => "tanh-layer".into(),
            InitialPreset::Constant { value } => format!("constant:{value}"),
        }
    }

    pub fn validate(&self) -> Result<(), SacError> {
        match *self {
            InitialPreset::Cos { amplitude, .. } if !amplitude.is_finite() => {
                Err(SacError::Config("x0_amplitude must be finite".into()))
            }
            InitialPreset::TanhLayer { width, .. } if !(width > 0.0) || !width.is_finite() => {
                Err(SacError::Config(format!("x0_width must be positive (got {width})")))
            }
            InitialPreset::TanhLayer { amplitude, .. } if !amplitude.is_finite() => {
                Err(SacError::Config("x0_amplitude must be finite".into()))
            }
            InitialPreset::Constant { value } if !value.is_finite() => {
                Err(SacError::Config("constant initial value must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InitialPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parses the preset name; parameters other than the constant's value take
/// their defaults and are set separately.
impl FromStr for InitialPreset {
    type Err = SacError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cos" => Ok(InitialPreset::default()),
            "tanh-layer" => Ok(InitialPreset::TanhLayer {
                amplitude: 1.0,
                width: 0.1,
            }),
            _ => match s.strip_prefix("constant:") {
                Some(v) => v
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(|value| InitialPreset::Constant { value })
                    .ok_or_else(|| SacError::Config(format!("invalid constant in x0 = {s:?}"))),
                None => Err(SacError::Config(format!(
                    "unknown x0 preset {s:?} (expected cos, tanh-layer or constant:<c>)"
                ))),
            },
        }
    }
}
