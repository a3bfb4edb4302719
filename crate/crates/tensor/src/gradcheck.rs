use rand::Rng;

use crate::conv::Conv2dAttrs;
use crate::error::{Result, TensorError};
use crate::graph::NormMode;
use crate::graph::{Graph, Var};
use crate::tensor::{Precision, Tensor};

/// Compares reverse-mode gradients of a scalar program against central
/// differences, in 64-bit mode.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over
/// every coordinate of every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::GradCheck(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(TensorError::GradCheck(
                "program produced a non-finite value".into(),
            ));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// Contracts `y` with a fixed pseudo-random tensor so that every output
/// coordinate reaches the scalar loss with a distinct weight.
fn contract(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n as u64)
        .map(|i| {
            let h = (i.wrapping_mul(2_654_435_761) ^ seed.wrapping_mul(0x9e37_79b9)) % 2001;
            h as f64 / 1000.0 - 1.0
        })
        .collect();
    let r = g.constant(Tensor::new(shape, w)?);
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Random tensor with every entry at least `margin` away from zero.
fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], margin: f64, r: &mut R) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, r);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - 0.1 } else { margin + 0.1 };
        }
    }
    t
}

/// Gradient-checks every primitive on random inputs drawn from `r`.
/// Returns the worst relative error per primitive.
pub fn primitive_suite<R: Rng + ?Sized>(r: &mut R, seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut checks: Vec<(&'static str, f64)> = Vec::new();
    let a = Tensor::randn(&[3, 4], 1.0, r);
    let b = Tensor::randn(&[4, 2], 1.0, r);
    checks.push((
        "matmul",
        finite_diff_check_many(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                contract(g, y, seed)
            },
            &[a.clone(), b.clone()],
            h,
        )?,
    ));
    let c = Tensor::randn(&[3, 4], 1.0, r);
    let bias = Tensor::randn(&[4], 1.0, r);
    checks.push((
        "add",
        finite_diff_check_many(
            |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.add(y, v[2])?;
                contract(g, y, seed)
            },
            &[a.clone(), c.clone(), bias],
            h,
        )?,
    ));
    let s = Tensor::scalar(0.7);
    checks.push((
        "scalar_mul",
        finite_diff_check_many(
            |g, v| {
                let y = g.scalar_mul(v[0], v[1])?;
                let y = g.scale(y, -1.3)?;
                contract(g, y, seed)
            },
            &[a.clone(), s],
            h,
        )?,
    ));
    let xr = away_from_zero(&[2, 3, 4], 10.0 * h, r);
    checks.push((
        "relu",
        finite_diff_check(
            |g, x| {
                let y = g.relu(x)?;
                contract(g, y, seed)
            },
            &xr,
            h,
        )?,
    ));
    let x = Tensor::randn(&[2, 4, 5, 5], 1.0, r);
    let w = Tensor::randn(&[4, 2, 3, 3], 0.5, r);
    checks.push((
        "conv2d",
        finite_diff_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Conv2dAttrs::new(2, 1, 2))?;
                contract(g, y, seed)
            },
            &[x.clone(), w],
            h,
        )?,
    ));
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, r);
    let beta = Tensor::randn(&[4], 1.0, r);
    checks.push((
        "batch_norm(train)",
        finite_diff_check_many(
            |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], &NormMode::Train { eps: 1e-5 })?;
                contract(g, y, seed)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            h,
        )?,
    ));
    let eval = NormMode::Eval {
        running_mean: vec![0.1, -0.2, 0.3, 0.0],
        running_var: vec![1.2, 0.8, 0.5, 2.0],
        eps: 1e-5,
    };
    checks.push((
        "batch_norm(eval)",
        finite_diff_check_many(
            |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], &eval)?;
                contract(g, y, seed)
            },
            &[x.clone(), gamma, beta],
            h,
        )?,
    ));
    checks.push((
        "global_avg_pool",
        finite_diff_check(
            |g, x| {
                let y = g.global_avg_pool(x)?;
                contract(g, y, seed)
            },
            &x,
            h,
        )?,
    ));
    checks.push((
        "channel_shuffle",
        finite_diff_check(
            |g, x| {
                let y = g.channel_shuffle(x, 2)?;
                contract(g, y, seed)
            },
            &x,
            h,
        )?,
    ));
    checks.push((
        "channel_split+concat",
        finite_diff_check(
            |g, x| {
                let parts = g.channel_split(x, &[1, 3])?;
                let a = g.scale(parts[0], 2.0)?;
                let y = g.concat(&[parts[1], a])?;
                contract(g, y, seed)
            },
            &x,
            h,
        )?,
    ));
    checks.push((
        "softmax",
        finite_diff_check(
            |g, x| {
                let y = g.softmax(x)?;
                contract(g, y, seed)
            },
            &a,
            h,
        )?,
    ));
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, r);
    checks.push((
        "log",
        finite_diff_check(
            |g, x| {
                let y = g.log(x)?;
                contract(g, y, seed)
            },
            &pos,
            h,
        )?,
    ));
    let probs = {
        let mut gg = Graph::new(Precision::F64);
        let v = gg.constant(a.clone());
        let p = gg.softmax(v)?;
        gg.value(p).clone()
    };
    checks.push((
        "cross_entropy(probs)",
        finite_diff_check(|g, p| g.cross_entropy(p, &[1, 0, 3], false), &probs, h)?,
    ));
    checks.push((
        "cross_entropy(logits)",
        finite_diff_check(|g, z| g.cross_entropy(z, &[1, 0, 3], true), &a, h)?,
    ));
    checks.push((
        "reshape+index",
        finite_diff_check(
            |g, x| {
                let y = g.reshape(x, &[4, 3])?;
                let e = g.index(y, 5)?;
                let y = g.scalar_mul(y, e)?;
                contract(g, y, seed)
            },
            &a,
            h,
        )?,
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        // dyadic inputs and step keep x +- h and the sums exact
        let x = Tensor::from_vec(vec![0.5, -1.75, 2.25, 8.0]);
        let err = finite_diff_check(|g, x| g.sum(x), &x, 2f64.powi(-16)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_vec(vec![0.5, -0.25, 1.5, -2.0, 0.01]);
        let err = finite_diff_check(
            |g, x| {
                let r = g.relu(x)?;
                g.sum(r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_finite_program_rejected() {
        let x = Tensor::from_vec(vec![1e-7]);
        // log(x - h) crosses zero
        let res = finite_diff_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(res.is_err());
    }
}
