//! Parametric false-data bias generation for communication links.
//!
//! An attack adds a bias vector to the measurement copy a DER transmits to
//! one neighbor; the plant and local sensors are never touched. Biases are
//! deterministic functions of time, so identical scenarios replay exactly.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// Waveform family of an injected bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasShape {
    Step,
    Ramp,
    Sine,
    Triangle,
    Rectangle,
}

/// Measurement entries the bias lands on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetComponent {
    Voltage,
    Current,
    Both,
}

/// One bias waveform. The phase reference is `start_time`; the signal is zero
/// before it and outside `active_windows` (absolute seconds) when given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSignal {
    pub shape: BiasShape,
    #[serde(default)]
    pub amplitude: f64,
    /// Hz; used by the periodic shapes.
    #[serde(default)]
    pub frequency: f64,
    /// Units per second; used by the ramp.
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub start_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_windows: Option<Vec<(f64, f64)>>,
    pub target: TargetComponent,
}

/// A bias signal aimed at one directed communication link: the data DER
/// `sender` transmits to DER `receiver` is corrupted on arrival at the link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub receiver: u32,
    pub sender: u32,
    #[serde(flatten)]
    pub signal: BiasSignal,
}

impl BiasSignal {
    /// Scalar waveform value at absolute time `t`.
    fn scalar(&self, t: f64) -> f64 {
        if t < self.start_time {
            return 0.0;
        }
        if let Some(windows) = &self.active_windows {
            if !windows.iter().any(|&(on, off)| t >= on && t < off) {
                return 0.0;
            }
        }
        let tau = t - self.start_time;
        match self.shape {
            BiasShape::Step => self.amplitude,
            BiasShape::Ramp => self.slope * tau,
            BiasShape::Sine => {
                self.amplitude * (2.0 * std::f64::consts::PI * self.frequency * tau).sin()
            }
            BiasShape::Triangle => {
                let x = (self.frequency * tau).fract();
                let unit = if x < 0.25 {
                    4.0 * x
                } else if x < 0.75 {
                    2.0 - 4.0 * x
                } else {
                    4.0 * x - 4.0
                };
                self.amplitude * unit
            }
            BiasShape::Rectangle => {
                let x = (self.frequency * tau).fract();
                if x < 0.5 {
                    self.amplitude
                } else {
                    -self.amplitude
                }
            }
        }
    }

    /// Bias vector (voltage entry, current entry) at absolute time `t`.
    pub fn bias_value(&self, t: f64) -> Vector2<f64> {
        let v = self.scalar(t);
        match self.target {
            TargetComponent::Voltage => Vector2::new(v, 0.0),
            TargetComponent::Current => Vector2::new(0.0, v),
            TargetComponent::Both => Vector2::new(v, v),
        }
    }
}

/// Transmitted measurement for one link: the true output plus every active
/// bias aimed at it. Multiple specs on the same link sum.
pub fn apply_sfdia<'a>(
    y_true: Vector2<f64>,
    specs: impl IntoIterator<Item = &'a AttackSpec>,
    t: f64,
) -> Vector2<f64> {
    let mut y = y_true;
    for spec in specs {
        y += spec.signal.bias_value(t);
    }
    y
}
