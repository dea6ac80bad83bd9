use ndarray::Array2;

use super::{DenseNet, EngineError, Parameterized};

/// Gradients smaller than this (times the loss magnitude, when above 1) are
/// compared in absolute rather than relative terms. Round-off in a central
/// difference grows with |loss|, hence the scaling.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares analytic gradients against central differences for every
/// parameter of `model`.
///
/// `eval(model, with_grad)` must return the scalar loss; when `with_grad`
/// is true it must also leave `∂loss/∂θ` in the parameter gradients
/// (which are zeroed before the call).
pub fn grad_check<M, F>(model: &mut M, mut eval: F, eps: f64) -> Result<GradCheckReport, EngineError>
where
    M: Parameterized,
    F: FnMut(&mut M, bool) -> Result<f64, EngineError>,
{
    model.zero_grad();
    let base = eval(model, true)?;
    let floor = REL_FLOOR * base.abs().max(1.0);
    let analytic: Vec<Array2<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for (t, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let original = nth(model, t, k);
            set_nth(model, t, k, original + eps);
            let plus = eval(model, false)?;
            set_nth(model, t, k, original - eps);
            let minus = eval(model, false)?;
            set_nth(model, t, k, original);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (t, k);
            }
            report.checked += 1;
        }
    }
    model.zero_grad();
    Ok(report)
}

fn nth<M: Parameterized>(model: &M, t: usize, k: usize) -> f64 {
    model.params()[t].value.as_slice().expect("standard layout")[k]
}

fn set_nth<M: Parameterized>(model: &mut M, t: usize, k: usize, v: f64) {
    model.params_mut()[t].value.as_slice_mut().expect("standard layout")[k] = v;
}

/// [`grad_check`] for a single network and a loss on its output.
///
/// `loss_fn` maps the network output to `(loss, ∂loss/∂output)`.
pub fn grad_check_net<F>(
    net: &mut DenseNet,
    input: &Array2<f64>,
    loss_fn: F,
    eps: f64,
) -> Result<GradCheckReport, EngineError>
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    grad_check(
        net,
        |n, with_grad| {
            if with_grad {
                let y = n.forward(input)?;
                let (l, g) = loss_fn(&y);
                n.backward(&g)?;
                Ok(l)
            } else {
                Ok(loss_fn(&n.predict(input)?).0)
            }
        },
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, DenseNetSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn linear_loss(c: Array2<f64>) -> impl Fn(&Array2<f64>) -> (f64, Array2<f64>) {
        move |y| ((y * &c).sum(), c.clone())
    }

    #[test]
    fn linear_network_is_exact() {
        let mut net = DenseNet::new(DenseNetSpec::new(vec![4, 3], vec![Activation::Identity], 1)).unwrap();
        let x = random(2, 4, 2);
        let r = grad_check_net(&mut net, &x, linear_loss(random(2, 3, 3)), 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 15);
    }

    #[test]
    fn three_layer_sigmoid_net() {
        let spec = DenseNetSpec::new(vec![6, 8, 5, 3], vec![Activation::Sigmoid; 3], 9);
        let mut net = DenseNet::new(spec).unwrap();
        let x = random(4, 6, 4);
        let c = random(4, 3, 5);
        let loss = move |y: &Array2<f64>| {
            let d = y - &c;
            ((&d * &d).sum(), 2.0 * d)
        };
        let r = grad_check_net(&mut net, &x, loss, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let spec = DenseNetSpec::new(vec![6, 8, 3], vec![Activation::Sigmoid; 2], 9);
        let mut net = DenseNet::new(spec).unwrap();
        let x = random(4, 6, 4);
        let c = random(4, 3, 5);
        let r = grad_check(
            &mut net,
            |n, with_grad| {
                if with_grad {
                    let y = n.forward(&x)?;
                    n.backward(&c)?;
                    for p in n.params_mut() {
                        p.grad *= 1.1;
                    }
                    Ok((&y * &c).sum())
                } else {
                    Ok((&n.predict(&x)? * &c).sum())
                }
            },
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        assert!(!r.passes(1e-6));
    }
}
