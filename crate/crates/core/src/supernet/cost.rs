//! Expected FLOPs of a mixture and the penalty that scales the
//! validation loss.

use prunas_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor of `ln(C / beta)` in the penalty.
pub const PENALTY_FLOOR: f64 = 0.05;

/// FLOPs of every candidate at the reference input, plus the fixed
/// stem/head cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub layers: Vec<Vec<u64>>,
    pub fixed: u64,
}

impl CostTable {
    /// `fixed + sum_l sum_j p[l][j] * cost[l][alive_j]`, where `p[l]`
    /// covers the alive candidates listed in `alive[l]`.
    pub fn expected(&self, p: &[Vec<f64>], alive: &[Vec<usize>]) -> Result<f64> {
        self.check(p.iter().map(Vec::len), alive)?;
        let mut c = self.fixed as f64;
        for (l, (pl, al)) in p.iter().zip(alive).enumerate() {
            for (w, &j) in pl.iter().zip(al) {
                c += w * self.layers[l][j] as f64;
            }
        }
        Ok(c)
    }

    /// Graph form of [`CostTable::expected`]; `p[l]` are `[n_alive]` vars.
    pub fn expected_var(&self, g: &mut Graph, p: &[Var], alive: &[Vec<usize>]) -> Result<Var> {
        let lens: Vec<usize> = p.iter().map(|v| g.value(*v).numel()).collect();
        self.check(lens.into_iter(), alive)?;
        let mut total = g.constant(Tensor::scalar(self.fixed as f64));
        for (l, (pl, al)) in p.iter().zip(alive).enumerate() {
            let costs = g.constant(Tensor::from_vec(
                al.iter().map(|&j| self.layers[l][j] as f64).collect(),
            ));
            let weighted = g.mul(*pl, costs)?;
            let s = g.sum(weighted)?;
            total = g.add(total, s)?;
        }
        Ok(total)
    }

    /// Total cost of one candidate per layer.
    pub fn single_path(&self, choice: &[usize]) -> Result<u64> {
        if choice.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} choices for {} layers",
                choice.len(),
                self.layers.len()
            )));
        }
        let mut total = self.fixed;
        for (l, &j) in choice.iter().enumerate() {
            total += *self.layers[l]
                .get(j)
                .ok_or_else(|| Error::Shape(format!("layer {l} has no candidate {j}")))?;
        }
        Ok(total)
    }

    fn check(&self, lens: impl Iterator<Item = usize>, alive: &[Vec<usize>]) -> Result<()> {
        let lens: Vec<usize> = lens.collect();
        if lens.len() != self.layers.len() || alive.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "mixture over {} layers, cost table has {}",
                lens.len(),
                self.layers.len()
            )));
        }
        for (l, (n, al)) in lens.iter().zip(alive).enumerate() {
            if *n != al.len() || al.iter().any(|&j| j >= self.layers[l].len()) {
                return Err(Error::Shape(format!(
                    "layer {l}: {n} weights for {} alive candidates",
                    al.len()
                )));
            }
        }
        Ok(())
    }
}

/// `max(ln(C / beta), floor)^gamma`.
pub fn cost_penalty(c: f64, beta: f64, gamma: f64) -> f64 {
    (c / beta).ln().max(PENALTY_FLOOR).powf(gamma)
}

/// Derivative of [`cost_penalty`] with respect to `C` (zero on the floor).
pub fn cost_penalty_grad(c: f64, beta: f64, gamma: f64) -> f64 {
    let u = (c / beta).ln();
    if u <= PENALTY_FLOOR || gamma == 0.0 {
        0.0
    } else {
        gamma * u.powf(gamma - 1.0) / c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn penalty_values() {
        assert!((cost_penalty(5.0, 5.0, 1.0) - PENALTY_FLOOR).abs() < 1e-15);
        assert!((cost_penalty(2.0, 5.0, 2.0) - PENALTY_FLOOR.powi(2)).abs() < 1e-15);
        assert!((cost_penalty(E * 3.0, 3.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((cost_penalty(E * E * 3.0, 3.0, 2.0) - 4.0).abs() < 1e-12);
        assert_eq!(cost_penalty(123.0, 1.0, 0.0), 1.0);
    }

    #[test]
    fn penalty_grad_matches_differences() {
        for (c, b, g) in [(10.0, 2.0, 1.0), (50.0, 3.0, 2.0), (7.0, 2.0, 0.5)] {
            let h = 1e-6;
            let fd = (cost_penalty(c + h, b, g) - cost_penalty(c - h, b, g)) / (2.0 * h);
            assert!((fd - cost_penalty_grad(c, b, g)).abs() < 1e-6);
        }
        assert_eq!(cost_penalty_grad(1.0, 2.0, 1.0), 0.0);
    }

    #[test]
    fn expectation() {
        let t = CostTable {
            layers: vec![vec![10, 30]],
            fixed: 0,
        };
        let c = t.expected(&[vec![0.5, 0.5]], &[vec![0, 1]]).unwrap();
        assert_eq!(c, 20.0);
        assert!(t.expected(&[vec![1.0]], &[vec![0, 1]]).is_err());
    }
}
