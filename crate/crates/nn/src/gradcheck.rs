use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative. Pairs where
/// both magnitudes are below `1e-10` are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if denom < 1e-10 {
        diff
    } else {
        diff / denom
    }
}

/// Compares the reverse-mode gradient of a scalar function with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps` and returns the largest
/// elementwise relative error.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let out = f(&mut g, x)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(x).unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.variable(t);
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but also checks every trainable parameter of
/// `store` used by `f`. Parameters are perturbed in place and restored.
pub fn grad_check_with_params<F>(store: &mut ParamStore, input: &Tensor, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let out = f(&mut g, store, x)?;
    let grads = g.backward(out)?;
    let analytic_x = grads.get(x).unwrap_or_else(|| Tensor::zeros(input.shape()));
    store.zero_grads();
    grads.accumulate_into(store);
    let analytic_params: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let eval = |store: &ParamStore, t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.variable(t);
        let out = f(&mut g, store, x)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(store, plus)? - eval(store, minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic_x.data()[i], numeric));
    }
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(store, input.clone())?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(store, input.clone())?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic_params[id.index()][i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let s = g.sum_squares(v).unwrap();
        assert_eq!(g.backward(s).unwrap().get(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(|g, v| g.sum_squares(v), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.scale(v, 3.0)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relative_error_small_magnitudes() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
