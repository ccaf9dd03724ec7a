use serde::{Deserialize, Serialize};

/// Vector norm order used by the removal loss and misalignment distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormOrder {
    #[default]
    L1,
    L2,
}

impl NormOrder {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormOrder::L1 => v.iter().map(|x| x.abs()).sum(),
            NormOrder::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// Norm of `a - b`.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.norm(&diff)
    }

    /// (Sub)gradient of the norm at `v`; zero where the norm is not differentiable.
    pub fn gradient(self, v: &[f64]) -> Vec<f64> {
        match self {
            NormOrder::L1 => v
                .iter()
                .map(|x| if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                .collect(),
            NormOrder::L2 => {
                let n = self.norm(v);
                if n == 0.0 {
                    vec![0.0; v.len()]
                } else {
                    v.iter().map(|x| x / n).collect()
                }
            }
        }
    }
}

impl TryFrom<u8> for NormOrder {
    type Error = String;

    fn try_from(p: u8) -> Result<Self, Self::Error> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(format!("norm order must be 1 or 2, got {other}")),
        }
    }
}

impl From<NormOrder> for u8 {
    fn from(p: NormOrder) -> u8 {
        match p {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

/// Mean squared error.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_and_l2() {
        assert_eq!(NormOrder::L1.norm(&[3.0, -4.0]), 7.0);
        assert_eq!(NormOrder::L2.norm(&[3.0, -4.0]), 5.0);
        assert_eq!(NormOrder::L2.gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn serde_as_integer() {
        assert_eq!(serde_json::to_string(&NormOrder::L2).unwrap(), "2");
        assert_eq!(serde_json::from_str::<NormOrder>("1").unwrap(), NormOrder::L1);
        assert!(serde_json::from_str::<NormOrder>("3").is_err());
    }

    #[test]
    fn mse_hand_value() {
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]), 2.5);
    }
}
