//! Central finite-difference gradient checking (64-bit).

use super::dense::Tensor;
use super::graph::{Graph, Var};
use super::param::ParamStore;
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Usage(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

/// Max relative error between backward gradients and central differences
/// of a scalar function of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        finite(g.value(out).item(), "function value")
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.deep_copy(), true)).collect();
    let out = f(&mut g, &vars)?;
    finite(g.value(out).item(), "function value")?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|gr| gr.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::deep_copy).collect();
    for (t, an) in analytic.iter().enumerate() {
        for (i, &a) in an.iter().enumerate() {
            finite(a, "analytic gradient")?;
            let base = work[t].to_vec();
            let mut plus = base.clone();
            plus[i] += eps;
            work[t] = Tensor::from_vec(plus, inputs[t].shape())?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[i] -= eps;
            work[t] = Tensor::from_vec(minus, inputs[t].shape())?;
            let fm = eval(&work)?;
            work[t] = Tensor::from_vec(base, inputs[t].shape())?;
            let num = finite((fp - fm) / (2.0 * eps), "numeric gradient")?;
            worst = worst.max(rel_err(a, num));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but differentiates with respect to every element of
/// every parameter in `store`. `f` builds the loss from the store.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_eps(eps)?;
    store.zero_grads();
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        finite(g.value(out).item(), "function value")?;
        g.backward(out)?;
    }
    let eval = || -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        finite(g.value(out).item(), "function value")
    };
    let mut worst = 0.0f64;
    for p in store.iter() {
        let analytic = p.grad.to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            finite(a, "analytic gradient")?;
            let mut idx = vec![0; p.value.ndim()];
            let mut rem = i;
            for (d, &n) in idx.iter_mut().zip(p.value.shape()).rev() {
                *d = rem % n;
                rem /= n;
            }
            let orig = p.value.get(&idx)?;
            p.value.set(&idx, orig + eps)?;
            let fp = eval()?;
            p.value.set(&idx, orig - eps)?;
            let fm = eval()?;
            p.value.set(&idx, orig)?;
            let num = finite((fp - fm) / (2.0 * eps), "numeric gradient")?;
            worst = worst.max(rel_err(a, num));
        }
    }
    store.zero_grads();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_linear() {
        let x = Tensor::from_f64(&[1.0, 2.0], &[2]).unwrap();
        let e = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-8, "{e}");
        let e = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap();
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::from_f64(&[1.0], &[1]).unwrap();
        assert!(matches!(grad_check(|g, v| Ok(g.sum(v[0])), &[x.clone()], 1e-2), Err(Error::Usage(_))));
        let r = grad_check(
            |g, v| {
                let s = g.mul_scalar(v[0], f64::INFINITY);
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
