//! Means, standard errors and directional claims over seeds.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / √n); 0 when n < 2.
    pub se: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            se: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = if n < 2 {
        0.0
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Summary { n, mean, se }
}

/// Absolute slack around the 2 SE band, so that exactly tied methods
/// (difference and SE both at rounding level) count as null, never positive.
pub const NULL_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Mean difference exceeds two standard errors (plus the floor).
    Positive,
    /// Mean difference within two standard errors of zero.
    Null,
}

impl Direction {
    pub fn holds(&self, s: &Summary) -> bool {
        if s.n < 2 || !s.mean.is_finite() {
            return false;
        }
        match self {
            Direction::Positive => s.mean > 2.0 * s.se + NULL_FLOOR,
            Direction::Null => s.mean.abs() <= 2.0 * s.se + NULL_FLOOR,
        }
    }
}
