//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Per-parameter comparison of analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` for every trainable parameter.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares the analytic gradient of `f` with central differences of step `eps`
/// for every trainable tensor in `store`.
///
/// The error of one parameter tensor is `‖a − d‖ / (‖a‖ + ‖d‖ + 1e-12)` with
/// Euclidean norms over its entries; the report keeps one value per tensor.
/// `store` is left exactly as it was passed in (values and gradients).
pub fn grad_check<T, F>(store: &mut ParamStore<T>, eps: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract(format!("grad_check step must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.scalar(loss).to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::Numeric { op: "grad_check", detail: format!("non-finite objective {v}") });
        }
        Ok(v)
    };

    let saved_grads: Vec<Option<Vec<T>>> = store.iter().map(|(_, t)| t.grad().map(<[T]>::to_vec)).collect();
    store.iter_mut().for_each(|(_, t)| t.clear_grad());
    eval(store)?;
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward_into(loss, store)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(_, t)| t.is_trainable())
        .map(|(n, t)| {
            let a = t.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.iter().map(|v| v.to_f64_lossy()).collect());
            (n.to_string(), a)
        })
        .collect();

    let h = T::from_f64_lossy(eps);
    let denom = 2.0 * eps;
    let mut per_param = Vec::with_capacity(analytic.len());
    for (name, a) in &analytic {
        let n = a.len();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut d2 = 0.0;
        for i in 0..n {
            let orig = store.get(name)?.data()[i];
            store.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(name)?.data_mut()[i] = orig;
            let d = (plus - minus) / denom;
            diff2 += (a[i] - d) * (a[i] - d);
            a2 += a[i] * a[i];
            d2 += d * d;
        }
        let err = diff2.sqrt() / (a2.sqrt() + d2.sqrt() + 1e-12);
        per_param.push((name.clone(), err));
    }

    for ((_, t), saved) in store.iter_mut().zip(saved_grads) {
        t.clear_grad();
        if let Some(s) = saved {
            t.accumulate_grad(&s)?;
        }
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("x", Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap().with_trainable(true))
            .unwrap();
        let rep = grad_check(&mut store, 1e-4, |g, s| {
            let x = g.param(s, "x")?;
            let sq = g.mul(x, x)?;
            let y = g.scale(sq, 3.0);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-9, "{rep:?}");
        assert!(store.get("x").unwrap().grad().is_none());
    }

    #[test]
    fn rejects_bad_step() {
        let mut store = ParamStore::<f64>::new();
        assert!(grad_check(&mut store, 0.0, |g, _| g.constant_from(1, 1, vec![0.0])).is_err());
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::ones(&[1, 1]).with_trainable(true)).unwrap();
        let err = grad_check(&mut store, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.scale(x, f64::INFINITY))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
