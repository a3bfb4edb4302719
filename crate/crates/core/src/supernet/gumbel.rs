//! Gumbel-Softmax relaxation of categorical sampling.

use prunas_tensor::{softmax_in_place, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

const U_MIN: f64 = 1e-12;

/// i.i.d. Gumbel(0, 1) draws `-ln(-ln U)`, with `U` clamped away from 0 and 1.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(U_MIN, 1.0 - U_MIN);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(
            "tau",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    Ok(())
}

/// `softmax((a + g) / tau)` on plain values.
pub fn gumbel_softmax(a: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if a.len() != noise.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits with {} noise values",
            a.len(),
            noise.len()
        )));
    }
    let mut z: Vec<f64> = a.iter().zip(noise).map(|(x, g)| (x + g) / tau).collect();
    softmax_in_place(&mut z);
    Ok(z)
}

/// Draws fresh noise and returns the mixture weights.
pub fn gumbel_sample<R: Rng + ?Sized>(a: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    let noise = gumbel_noise(a.len(), rng);
    gumbel_softmax(a, tau, &noise)
}

/// Graph form: differentiable in `a`, with the noise held constant.
pub fn gumbel_softmax_var(g: &mut Graph, a: Var, tau: f64, noise: &[f64]) -> Result<Var> {
    check_tau(tau)?;
    if g.shape(a) != [noise.len()] {
        return Err(Error::Shape(format!(
            "logits {:?} with {} noise values",
            g.shape(a),
            noise.len()
        )));
    }
    let gv = g.constant(Tensor::from_vec(noise.to_vec()));
    let z = g.add(a, gv)?;
    let z = g.scale(z, 1.0 / tau)?;
    Ok(g.softmax(z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{self, Stream};
    use prunas_tensor::Precision;

    #[test]
    fn simplex() {
        let mut r = seed::stream(4, Stream::Gumbel);
        for _ in 0..100 {
            let p = gumbel_sample(&[0.3, -2.0, 5.0, 0.0], 0.7, &mut r).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn rejects_bad_tau() {
        assert!(gumbel_softmax(&[0.0], 0.0, &[0.0]).is_err());
        assert!(gumbel_softmax(&[0.0], -1.0, &[0.0]).is_err());
    }

    #[test]
    fn graph_matches_values() {
        let a = [0.5, -0.25, 1.0];
        let noise = [0.1, 0.7, -0.3];
        let mut g = Graph::new(Precision::F64);
        let av = g.param(Tensor::from_vec(a.to_vec()));
        let p = gumbel_softmax_var(&mut g, av, 2.0, &noise).unwrap();
        let want = gumbel_softmax(&a, 2.0, &noise).unwrap();
        for (x, y) in g.value(p).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
