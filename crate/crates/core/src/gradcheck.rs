//! Central finite-difference verification of reverse-mode gradients.

use rayon::prelude::*;

use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const DEFAULT_EPS: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    pub worst_param: String,
    /// `(name, relative error)` in store order.
    pub per_param: Vec<(String, f64)>,
    pub loss_evaluations: usize,
}

fn set_coord(store: &mut ParamStore<f64>, name: &str, i: usize, x: f64) {
    store.get_mut(name).expect("probe mirrors the store").data_mut()[i] = x;
}

/// Compares autodiff gradients of the scalar `loss_fn` against central
/// differences with step `eps`, one parameter tensor at a time.
///
/// The error of a parameter is `‖g_ad − g_fd‖ / max(‖g_fd‖, 1e-8)` with
/// Euclidean norms over the tensor; a one-element parameter reduces to the
/// elementwise ratio. Frozen parameters are skipped. The loss is always
/// evaluated in eval mode so stochastic layers are inactive.
pub fn gradient_check<F>(store: &ParamStore<f64>, loss_fn: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be positive")));
    }
    let mut g = Graph::new(Mode::Eval, 0);
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    let mut analytic = ParamStore::new();
    for (name, t) in store.iter() {
        let mut z = t.clone();
        z.grad = None;
        analytic.insert(name.clone(), z);
    }
    g.accumulate_param_grads(&mut analytic);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval, 0);
        let l = loss_fn(&mut g, s)?;
        let v = g.value(l)[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "loss" })
        }
    };

    let mut per_param = Vec::new();
    let mut evaluations = 1;
    for (name, t) in store.iter() {
        if !t.requires_grad {
            continue;
        }
        let ad = analytic
            .get(name)
            .and_then(|a| a.grad.clone())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        // Coordinates are independent; each worker perturbs its own copy.
        let fd = (0..t.len())
            .into_par_iter()
            .map_init(
                || store.clone(),
                |probe, i| {
                    let orig = t.data()[i];
                    set_coord(probe, name, i, orig + eps);
                    let plus = eval(probe);
                    set_coord(probe, name, i, orig - eps);
                    let minus = eval(probe);
                    set_coord(probe, name, i, orig);
                    Ok((plus? - minus?) / (2.0 * eps))
                },
            )
            .collect::<Result<Vec<f64>>>()?;
        evaluations += 2 * t.len();
        let diff2: f64 = ad.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum();
        let fd2: f64 = fd.iter().map(|f| f * f).sum();
        per_param.push((name.clone(), diff2.sqrt() / fd2.sqrt().max(DENOM_FLOOR)));
    }
    let (worst_param, max_rel_error) = per_param
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        per_param,
        loss_evaluations: evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let report = gradient_check(
            &store,
            |g, s| {
                let x = g.param(s, "x")?;
                let sq = g.square(x)?;
                g.sum_all(sq)
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let report = gradient_check(
            &store,
            |g, s| {
                let _x = g.param(s, "x")?;
                g.constant_from(vec![], vec![4.0])
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![1], vec![1.0]).unwrap());
        let res = gradient_check(
            &store,
            |g, s| {
                let x = g.param(s, "x")?;
                let y = g.scale(x, f64::MAX)?;
                g.scale(y, 10.0)
            },
            DEFAULT_EPS,
        );
        assert!(res.is_err());
    }
}
