use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-gamma * |a - b|^2)`
    Rbf { gamma: f64 },
    /// `a . b + bias`
    Linear { bias: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
            Kernel::Linear { bias } => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() + bias,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Kernel::Rbf { gamma } => gamma > 0.0 && gamma.is_finite(),
            Kernel::Linear { bias } => bias > 0.0 && bias.is_finite(),
        }
    }
}
