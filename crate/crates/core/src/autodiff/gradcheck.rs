use crate::error::{GcldrError, Result};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Result of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares `analytic` gradients with central differences of `loss_fn`.
///
/// `params` are perturbed one entry at a time by `±eps`; `loss_fn` must be a
/// deterministic function of them. `analytic[t]` must have the shape of
/// `params[t]`.
pub fn finite_diff_check<F>(params: &[Tensor], analytic: &[Tensor], eps: f64, mut loss_fn: F) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(GcldrError::dim("one analytic gradient per parameter tensor"));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(GcldrError::dim(format!("gradient shape {:?} vs {:?}", g.shape(), p.shape())));
        }
    }
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for t in 0..work.len() {
        for e in 0..work[t].len() {
            let orig = work[t].data()[e];
            work[t].data_mut()[e] = orig + eps;
            let plus = loss_fn(&work)?;
            work[t].data_mut()[e] = orig - eps;
            let minus = loss_fn(&work)?;
            work[t].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[e];
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(GcldrError::Divergence { context: format!("non-finite gradient check at {t}:{e}") });
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn quadratic(p: &[Tensor]) -> f64 {
        // Σ (i+1)·x_i² + x_0·x_1
        let x = p[0].data();
        x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>() + x[0] * x[1]
    }

    fn quadratic_grad(p: &Tensor) -> Tensor {
        let x = p.data();
        let mut g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        g[0] += x[1];
        g[1] += x[0];
        Tensor::new(p.shape().to_vec(), g).unwrap()
    }

    #[test]
    fn exact_on_quadratics() {
        let p = vec![Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()];
        let g = vec![quadratic_grad(&p[0])];
        let r = finite_diff_check(&p, &g, 1e-5, |q| Ok(quadratic(q))).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn detects_corrupted_gradient() {
        let p = vec![Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()];
        let mut g = quadratic_grad(&p[0]);
        g.data_mut()[2] *= 2.0;
        let r = finite_diff_check(&p, &[g], 1e-5, |q| Ok(quadratic(q))).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst, (0, 2));
    }

    #[test]
    fn tape_gradient_matches_differences() {
        // loss = Σ tanh(x·w)², via the tape
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 1.0], vec![0.7, 0.1, -0.3]]).unwrap();
        let w = Tensor::from_rows(&[vec![0.5, -0.2], vec![0.3, 0.8], vec![-0.6, 0.1]]).unwrap();
        let eval = |ps: &[Tensor], grad: bool| {
            let mut t = Tape::new();
            let xv = t.leaf(ps[0].clone());
            let wv = t.leaf(ps[1].clone());
            let h = t.matmul(xv, wv).unwrap();
            let a = t.tanh(h);
            let s = t.square(a);
            let l = t.sum(s);
            let grads = grad.then(|| {
                let g = t.backward(l).unwrap();
                vec![g.get(xv), g.get(wv)]
            });
            (t.scalar(l), grads)
        };
        let params = vec![x, w];
        let analytic = eval(&params, true).1.unwrap();
        let r = finite_diff_check(&params, &analytic, 1e-5, |q| Ok(eval(q, false).0)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
