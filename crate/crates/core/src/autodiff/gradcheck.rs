//! Finite-difference verification of the reverse-mode gradients. Runs in
//! double precision; single precision makes central differences unreliable.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences, coordinate by coordinate. Returns the
/// maximum relative error, with denominator max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let vx = g.leaf(x.clone(), true);
    let out = f(&mut g, vx)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic = match g.grad(vx) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let vx = g.leaf(Tensor::from_vec(x.shape(), data.to_vec())?, false);
        let out = f(&mut g, vx)?;
        Ok(g.value(out).item())
    };

    let mut probe = x.data().to_vec();
    let mut max_err = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = Σx² at x = [3]: analytic gradient 6.
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let zero = g.constant(Tensor::zeros(&[1]));
                let one = g.constant(Tensor::full(&[1], 1.0));
                g.masked_sse(v, zero, one)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn primitives_pass_on_many_random_shapes() {
        // Ten random (shape, seed) draws through a composite touching
        // matmul, bias, layer norm, softmax, relu and masked error.
        let mut s = 0xABCDEFu64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as usize
        };
        for trial in 0..10u64 {
            let rows = 2 + next() % 4;
            let cols = 2 + (next() % 5) & !1usize | 2; // even, ≥2
            let inner = 2 + next() % 4;
            let x = {
                let n = rows * cols;
                let data = (0..n)
                    .map(|i| ((i as f64 * 0.7133 + trial as f64).sin()) * 1.3)
                    .collect();
                Tensor::from_vec(&[rows, cols], data).unwrap()
            };
            let w_data: Vec<f64> =
                (0..cols * inner).map(|i| ((i as f64 * 1.93 + 0.2).cos()) * 0.8).collect();
            let gain: Vec<f64> = (0..inner).map(|i| 0.5 + 0.1 * i as f64).collect();
            let err = grad_check(
                |g, v| {
                    let w = g.constant(Tensor::from_vec(&[cols, inner], w_data.clone())?);
                    let h = g.matmul(v, w)?;
                    let gn = g.constant(Tensor::from_vec(&[inner], gain.clone())?);
                    let bs = g.constant(Tensor::zeros(&[inner]));
                    let h = g.layer_norm(h, gn, bs)?;
                    let h = g.softmax(h);
                    let h = g.relu(h);
                    let t = g.constant(Tensor::full(&[rows, inner], 0.3));
                    let m = g.constant(Tensor::full(&[rows, inner], 1.0));
                    g.masked_mse(h, t, m)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial} ({rows}x{cols}x{inner}): error {err:.2e}");
        }
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, v| Ok(g.relu(v)), &x, 1e-5);
        assert!(err.is_err());
    }
}
