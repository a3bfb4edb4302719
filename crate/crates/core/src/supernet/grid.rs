//! The shrinking candidate set and its architecture logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockSpec, OperatorSpec};

/// Per-layer alive flags over a fixed candidate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub candidates: Vec<(BlockSpec, OperatorSpec)>,
    alive: Vec<Vec<bool>>,
}

impl CandidateGrid {
    pub fn new(candidates: Vec<(BlockSpec, OperatorSpec)>, layers: usize) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Space("no candidates".into()));
        }
        Ok(CandidateGrid {
            alive: vec![vec![true; candidates.len()]; layers],
            candidates,
        })
    }

    pub fn layers(&self) -> usize {
        self.alive.len()
    }

    pub fn is_alive(&self, layer: usize, j: usize) -> bool {
        self.alive[layer][j]
    }

    /// Indices of the alive candidates of a layer, in declaration order.
    pub fn alive(&self, layer: usize) -> Vec<usize> {
        (0..self.candidates.len())
            .filter(|&j| self.alive[layer][j])
            .collect()
    }

    pub fn alive_all(&self) -> Vec<Vec<usize>> {
        (0..self.layers()).map(|l| self.alive(l)).collect()
    }

    pub fn alive_counts(&self) -> Vec<usize> {
        self.alive
            .iter()
            .map(|a| a.iter().filter(|x| **x).count())
            .collect()
    }

    fn kill(&mut self, layer: usize, j: usize) {
        self.alive[layer][j] = false;
    }
}

/// Architecture logits, one per candidate (dead ones are ignored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub logits: Vec<Vec<f64>>,
    pub tau: f64,
}

impl ArchParams {
    pub fn zeros(layers: usize, candidates: usize, tau: f64) -> Self {
        ArchParams {
            logits: vec![vec![0.0; candidates]; layers],
            tau,
        }
    }

    pub fn alive_logits(&self, grid: &CandidateGrid, layer: usize) -> Vec<f64> {
        grid.alive(layer)
            .into_iter()
            .map(|j| self.logits[layer][j])
            .collect()
    }
}

/// How many of `alive` candidates a pruning round removes.
pub fn prune_count(alive: usize, ratio: f64, final_step: bool) -> usize {
    if alive < 2 {
        return 0;
    }
    let k = (ratio * alive as f64).floor() as usize;
    if k == 0 && final_step {
        1
    } else {
        k.min(alive - 1)
    }
}

/// Alive candidates ordered best first: logit descending, then index.
pub fn ranked(logits: &[f64], alive: &[usize]) -> Vec<usize> {
    let mut r = alive.to_vec();
    r.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
    r
}

/// Removes the lowest-logit candidates of every layer; returns the killed
/// indices per layer.
pub fn prune(
    grid: &mut CandidateGrid,
    arch: &ArchParams,
    ratio: f64,
    final_step: bool,
) -> Result<Vec<Vec<usize>>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(
            "prune_ratio",
            format!("must lie in (0, 1), got {ratio}"),
        ));
    }
    let mut killed = Vec::with_capacity(grid.layers());
    for l in 0..grid.layers() {
        let alive = grid.alive(l);
        let k = prune_count(alive.len(), ratio, final_step);
        let order = ranked(&arch.logits[l], &alive);
        let dead: Vec<usize> = order[order.len() - k..].to_vec();
        for &j in &dead {
            grid.kill(l, j);
        }
        killed.push(dead);
    }
    Ok(killed)
}

/// Highest alive logit of a layer, earliest declared on ties.
pub fn argmax_alive(logits: &[f64], alive: &[usize]) -> Option<usize> {
    ranked(logits, alive).first().copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, layers: usize) -> CandidateGrid {
        let c = (BlockSpec::Skip, OperatorSpec::depthwise(3));
        CandidateGrid::new(vec![c; n], layers).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(prune_count(6, 0.4, false), 2);
        assert_eq!(prune_count(4, 0.4, false), 1);
        assert_eq!(prune_count(3, 0.4, false), 1);
        assert_eq!(prune_count(2, 0.4, false), 0);
        assert_eq!(prune_count(2, 0.4, true), 1);
        assert_eq!(prune_count(1, 0.4, true), 0);
    }

    #[test]
    fn trace_six() {
        let mut g = grid(6, 2);
        let a = ArchParams {
            logits: vec![vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5]; 2],
            tau: 1.0,
        };
        let mut trace = vec![g.alive_counts()[0]];
        for s in 0..3 {
            prune(&mut g, &a, 0.4, s == 2).unwrap();
            trace.push(g.alive_counts()[0]);
        }
        assert_eq!(trace, vec![6, 4, 3, 2]);
        assert_eq!(g.alive(0), vec![2, 5]);
    }

    #[test]
    fn ties_prefer_early() {
        assert_eq!(argmax_alive(&[1.0, 1.0, 0.0], &[0, 1, 2]), Some(0));
        assert_eq!(argmax_alive(&[0.1, 2.0, -1.0], &[0, 1, 2]), Some(1));
        assert_eq!(argmax_alive(&[0.1, 2.0, -1.0], &[0, 2]), Some(0));
    }

    #[test]
    fn ratio_range() {
        let mut g = grid(3, 1);
        let a = ArchParams::zeros(1, 3, 1.0);
        assert!(prune(&mut g, &a, 0.0, false).is_err());
        assert!(prune(&mut g, &a, 1.0, false).is_err());
    }
}
