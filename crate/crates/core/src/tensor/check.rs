//! Gradient verification against central finite differences.

use super::tape::Tape;
use super::Tensor;

/// Maximum relative error between the autodiff gradient of `f` at `point`
/// and central finite differences with step `eps`, taken over every
/// coordinate of `point`. The error is `|ad - fd| / max(1, |fd|)`.
///
/// `f` must produce a scalar from the tape-registered point.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let loss = f(&mut tape, &x);
    assert!(loss.is_scalar(), "grad_check wants a scalar-valued map");
    let grads = tape.backward(&loss).expect("loss is on tape");
    let ad = grads
        .grad(&x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |data: Vec<f64>| -> f64 {
        let t = Tensor::from_parts(point.shape().to_vec(), data);
        let mut probe = Tape::new();
        let x = probe.leaf(&t, false);
        f(&mut probe, &x).scalar_value()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] += eps;
        let mut minus = point.data().to_vec();
        minus[i] -= eps;
        let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
        let err = (ad.data()[i] - fd).abs() / fd.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn quadratic_gradient_checks() {
        let mut rng = Rng::new(2);
        let x = Tensor::random_normal(&[4], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul_elem(x, x);
                tape.sum_all(&sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn softmax_matmul_chain_checks() {
        let mut rng = Rng::new(4);
        let x = Tensor::random_normal(&[3, 3], 1.0, &mut rng);
        let w = Tensor::random_normal(&[3, 2], 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let y = tape.matmul(x, &w);
                let s = tape.softmax_rows(&y);
                let r = tape.relu(&s);
                let sq = tape.mul_elem(&r, &r);
                tape.sum_all(&sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-7, "err {err}");
    }
}
