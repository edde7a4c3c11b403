use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Norm-bounding coefficient applied by the squash nonlinearity:
/// `squash(s) = k(|s|) * s / |s|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SquashKind {
    /// k(n) = n / (1 + n)
    #[default]
    Ratio,
    /// k(n) = 1 - exp(-n)
    Exp,
    /// k(n) = tanh(n)
    Tanh,
    /// k(n) = n, i.e. the identity map.
    None,
}

/// Largest coefficient of the bounded kinds, so computed norms stay below one.
pub const MAX_COEFFICIENT: f64 = 1.0 - 1e-12;

impl SquashKind {
    pub const ALL: [SquashKind; 4] =
        [SquashKind::Ratio, SquashKind::Exp, SquashKind::Tanh, SquashKind::None];

    /// Coefficient k(n).
    pub fn coefficient(self, n: f64) -> f64 {
        match self {
            SquashKind::Ratio => (n / (1.0 + n)).min(MAX_COEFFICIENT),
            SquashKind::Exp => (-(-n).exp_m1()).min(MAX_COEFFICIENT),
            SquashKind::Tanh => n.tanh().min(MAX_COEFFICIENT),
            SquashKind::None => n,
        }
    }

    pub fn is_bounded(self) -> bool {
        self != SquashKind::None
    }

    /// Scale factor h(n) = k(n)/n and its derivative h'(n), with the
    /// n -> 0 limits substituted near zero.
    pub(crate) fn scale_and_slope(self, n: f64) -> (f64, f64) {
        const SMALL: f64 = 1e-4;
        if self.is_bounded() && self.coefficient(n) >= MAX_COEFFICIENT {
            return (MAX_COEFFICIENT / n, -MAX_COEFFICIENT / (n * n));
        }
        match self {
            SquashKind::Ratio => {
                let h = 1.0 / (1.0 + n);
                (h, -h * h)
            }
            SquashKind::Exp => {
                if n < SMALL {
                    (1.0 - n / 2.0 + n * n / 6.0, -0.5 + n / 3.0)
                } else {
                    let k = -(-n).exp_m1();
                    let h = k / n;
                    (h, ((-n).exp() * n - k) / (n * n))
                }
            }
            SquashKind::Tanh => {
                if n < SMALL {
                    (1.0 - n * n / 3.0, -2.0 * n / 3.0)
                } else {
                    let t = n.tanh();
                    let sech2 = 1.0 - t * t;
                    (t / n, (sech2 * n - t) / (n * n))
                }
            }
            SquashKind::None => (1.0, 0.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SquashKind::Ratio => "|x|/(1+|x|)",
            SquashKind::Exp => "1-exp(-|x|)",
            SquashKind::Tanh => "tanh(|x|)",
            SquashKind::None => "None",
        }
    }
}

impl std::str::FromStr for SquashKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "ratio" => Ok(SquashKind::Ratio),
            "exp" => Ok(SquashKind::Exp),
            "tanh" => Ok(SquashKind::Tanh),
            "none" => Ok(SquashKind::None),
            other => Err(Error::Config(format!(
                "unknown squash kind {other:?} (expected ratio|exp|tanh|none)"
            ))),
        }
    }
}

impl std::fmt::Display for SquashKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SquashKind::Ratio => "ratio",
            SquashKind::Exp => "exp",
            SquashKind::Tanh => "tanh",
            SquashKind::None => "none",
        })
    }
}
