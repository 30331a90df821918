//! Episodic meta-learning over discovered domains.
//!
//! Domains are split into two groups. Stepping the extractors along one
//! group's soft-loss gradient and evaluating the other group's loss at the
//! stepped point rewards updates on which the groups agree.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::error::{GcldrError, Result};
use crate::ldd::soft_domain_loss;
use crate::model::{Features, Forward, Group, ModelBundle, ParamStore, Trainable};
use crate::tensor::Tensor;
use crate::trainer::{cd_heads, ci_heads, Posteriors};

/// Disjoint, covering, nonempty halves of `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
}

impl DomainSplit {
    pub fn new(s1: Vec<usize>, s2: Vec<usize>, k: usize) -> Result<Self> {
        let mut all: Vec<usize> = s1.iter().chain(&s2).copied().collect();
        all.sort_unstable();
        if s1.is_empty() || s2.is_empty() || all != (0..k).collect::<Vec<_>>() {
            return Err(GcldrError::config(format!("{s1:?} / {s2:?} is not a bipartition of 0..{k}")));
        }
        Ok(DomainSplit { s1, s2 })
    }

    pub fn swapped(&self) -> DomainSplit {
        DomainSplit { s1: self.s2.clone(), s2: self.s1.clone() }
    }
}

/// Uniformly random nonempty bipartition.
pub fn split_domains<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<DomainSplit> {
    if k < 2 {
        return Err(GcldrError::config(format!("cannot split {k} domains")));
    }
    loop {
        let side: Vec<bool> = (0..k).map(|_| rng.gen()).collect();
        if side.iter().all(|&s| s) || side.iter().all(|&s| !s) {
            continue;
        }
        let s1 = (0..k).filter(|&r| side[r]).collect();
        let s2 = (0..k).filter(|&r| !side[r]).collect();
        return Ok(DomainSplit { s1, s2 });
    }
}

/// `ℓ_s(r; cd) + ℓ_s(r; ci)` (only the cd term when there is no ci space).
pub fn merged_soft_loss(
    fwd: &mut Forward<'_>,
    bundle: &ModelBundle,
    f: &Features,
    y: &[usize],
    post: &Posteriors,
    r: usize,
) -> Result<crate::autodiff::Var> {
    let mut l = soft_domain_loss(fwd, &cd_heads(bundle)?, f.cd, y, &post.cd, r)?;
    if let (Some(f_ci), Some(rho)) = (f.ci, &post.ci) {
        let l_ci = soft_domain_loss(fwd, &ci_heads(bundle)?, f_ci, y, rho, r)?;
        l = fwd.tape.add(l, l_ci)?;
    }
    Ok(l)
}

fn set_loss(
    fwd: &mut Forward<'_>,
    bundle: &ModelBundle,
    f: &Features,
    y: &[usize],
    post: &Posteriors,
    set: &[usize],
) -> Result<crate::autodiff::Var> {
    let mut total = None;
    for &r in set {
        let l = merged_soft_loss(fwd, bundle, f, y, post, r)?;
        total = Some(match total {
            Some(t) => fwd.tape.add(t, l)?,
            None => l,
        });
    }
    let t = total.ok_or_else(|| GcldrError::config("empty domain set"))?;
    Ok(fwd.tape.scale(t, 1.0 / set.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradientMode {
    /// Gradient at the stepped point stands in for the gradient at θ.
    #[default]
    FirstOrder,
    /// Adds the inner-step Jacobian term through central-difference
    /// Hessian-vector products.
    FiniteDifferenceHvp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaOptions {
    pub gamma: f64,
    pub alpha: f64,
    pub mode: MetaGradientMode,
    pub dropout: bool,
}

/// Group-mean soft-loss gradients over the extractor parameters, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradients {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

struct Evaluator<'a> {
    bundle: &'a ModelBundle,
    x: &'a Tensor,
    y: &'a [usize],
    post: &'a Posteriors,
    seed: u64,
    dropout: bool,
    ids: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    fn new(bundle: &'a ModelBundle, x: &'a Tensor, y: &'a [usize], post: &'a Posteriors, seed: u64, dropout: bool) -> Self {
        Evaluator { bundle, x, y, post, seed, dropout, ids: bundle.select_group(Group::Extractors) }
    }

    fn forward<'p>(&self, params: &'p ParamStore, trainable: Trainable) -> Forward<'p>
    where
        'a: 'p,
    {
        let fwd = Forward::with_params(self.bundle, params, Mode::Train, trainable, self.seed);
        if self.dropout {
            fwd
        } else {
            fwd.without_dropout()
        }
    }

    /// Values and flattened extractor gradients of each set loss at `params`.
    fn grads(&self, params: &ParamStore, sets: &[&[usize]]) -> Result<Vec<(f64, Vec<f64>)>> {
        let mut fwd = self.forward(params, Trainable::Only(Group::Extractors));
        let f = self.bundle.forward_features(&mut fwd, self.x)?;
        let mut out = Vec::with_capacity(sets.len());
        for set in sets {
            let l = set_loss(&mut fwd, self.bundle, &f, self.y, self.post, set)?;
            let g = fwd.tape.backward(l)?;
            let flat: Vec<f64> = fwd.param_grads(&g, &self.ids).iter().flat_map(|t| t.data().to_vec()).collect();
            out.push((fwd.tape.scalar(l), flat));
        }
        Ok(out)
    }

    fn value(&self, params: &ParamStore, set: &[usize]) -> Result<f64> {
        let mut fwd = self.forward(params, Trainable::Nothing);
        let f = self.bundle.forward_features(&mut fwd, self.x)?;
        let l = set_loss(&mut fwd, self.bundle, &f, self.y, self.post, set)?;
        Ok(fwd.tape.scalar(l))
    }

    fn stepped(&self, dir: &[f64], alpha: f64) -> ParamStore {
        let mut p = self.bundle.params.clone();
        p.add_flat(&self.ids, -alpha, dir);
        p
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GcldrError::Divergence { context: format!("non-finite {what}") })
    }
}

/// `∇1`, `∇2` at the bundle's current parameters with posteriors held fixed.
pub fn meta_gradients(
    bundle: &ModelBundle,
    x: &Tensor,
    y: &[usize],
    post: &Posteriors,
    split: &DomainSplit,
    seed: u64,
    dropout: bool,
) -> Result<MetaGradients> {
    let ev = Evaluator::new(bundle, x, y, post, seed, dropout);
    let mut r = ev.grads(&bundle.params, &[&split.s1, &split.s2])?;
    let (_, g2) = r.pop().expect("two sets");
    let (_, g1) = r.pop().expect("two sets");
    check_finite(&g1, "meta gradient")?;
    check_finite(&g2, "meta gradient")?;
    Ok(MetaGradients { g1, g2 })
}

/// Value of `(γ/2)[mean_{S1} L_s(θ − α∇2) + mean_{S2} L_s(θ − α∇1)]` and its
/// gradient with respect to the extractor parameters, flattened.
pub fn meta_contribution(
    bundle: &ModelBundle,
    x: &Tensor,
    y: &[usize],
    post: &Posteriors,
    split: &DomainSplit,
    opts: &MetaOptions,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let ev = Evaluator::new(bundle, x, y, post, seed, opts.dropout);
    let mg = meta_gradients(bundle, x, y, post, split, seed, opts.dropout)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; mg.g1.len()];
    for (eval_set, step_set, step_dir) in [(&split.s1, &split.s2, &mg.g2), (&split.s2, &split.s1, &mg.g1)] {
        let stepped = ev.stepped(step_dir, opts.alpha);
        let (v, mut h) = ev.grads(&stepped, &[eval_set])?.pop().expect("one set");
        if opts.mode == MetaGradientMode::FiniteDifferenceHvp && opts.alpha > 0.0 {
            let hv = hessian_vector(&ev, step_set, &h)?;
            h.iter_mut().zip(&hv).for_each(|(a, b)| *a -= opts.alpha * b);
        }
        value += v;
        grad.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
    }
    let half = opts.gamma / 2.0;
    grad.iter_mut().for_each(|g| *g *= half);
    check_finite(&grad, "meta objective gradient")?;
    Ok((half * value, grad))
}

/// `H v` for the Hessian of `set`'s loss at θ, by central differences of gradients.
fn hessian_vector(ev: &Evaluator<'_>, set: &[usize], v: &[f64]) -> Result<Vec<f64>> {
    let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let theta_norm = ev.bundle.params.flatten(&ev.ids).iter().map(|a| a * a).sum::<f64>().sqrt();
    let eps = 1e-4 * (1.0 + theta_norm) / vn;
    let (_, gp) = ev.grads(&ev.stepped(v, -eps), &[set])?.pop().expect("one set");
    let (_, gm) = ev.grads(&ev.stepped(v, eps), &[set])?.pop().expect("one set");
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Meta objective evaluated by actually stepping the parameters.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_exact(
    bundle: &ModelBundle,
    x: &Tensor,
    y: &[usize],
    post: &Posteriors,
    split: &DomainSplit,
    gamma: f64,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    let ev = Evaluator::new(bundle, x, y, post, seed, false);
    let mg = meta_gradients(bundle, x, y, post, split, seed, false)?;
    let a = ev.value(&ev.stepped(&mg.g2, alpha), &split.s1)?;
    let b = ev.value(&ev.stepped(&mg.g1, alpha), &split.s2)?;
    Ok(gamma / 2.0 * (a + b))
}

/// First-order expansion `(γ/2)[mean_{S1} L_s + mean_{S2} L_s] − γα ∇1ᵀ∇2`.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_approx(
    bundle: &ModelBundle,
    x: &Tensor,
    y: &[usize],
    post: &Posteriors,
    split: &DomainSplit,
    gamma: f64,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    let ev = Evaluator::new(bundle, x, y, post, seed, false);
    let r = ev.grads(&bundle.params, &[&split.s1, &split.s2])?;
    let dot: f64 = r[0].1.iter().zip(&r[1].1).map(|(a, b)| a * b).sum();
    Ok(gamma / 2.0 * (r[0].0 + r[1].0) - gamma * alpha * dot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub alpha: f64,
    pub exact: f64,
    pub approx: f64,
    pub abs_error: f64,
    /// `err(previous α) / err(α)`; absent on the first row.
    pub decay_ratio: Option<f64>,
}

/// Compares [`meta_loss_exact`] with [`meta_loss_approx`] for each `α`, dropout off.
#[allow(clippy::too_many_arguments)]
pub fn verify_taylor(
    bundle: &ModelBundle,
    x: &Tensor,
    y: &[usize],
    post: &Posteriors,
    split: &DomainSplit,
    gamma: f64,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<TaylorRow>> {
    if alphas.windows(2).any(|w| w[1] >= w[0]) || alphas.iter().any(|a| *a < 0.0) {
        return Err(GcldrError::config("alphas must be nonnegative and strictly descending"));
    }
    let mut rows: Vec<TaylorRow> = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let exact = meta_loss_exact(bundle, x, y, post, split, gamma, alpha, seed)?;
        let approx = meta_loss_approx(bundle, x, y, post, split, gamma, alpha, seed)?;
        let abs_error = (exact - approx).abs();
        let decay_ratio = rows.last().map(|p| p.abs_error / abs_error);
        rows.push(TaylorRow { alpha, exact, approx, abs_error, decay_ratio });
    }
    Ok(rows)
}

pub fn write_taylor_csv<W: Write>(rows: &[TaylorRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "exact", "approx", "abs_error", "decay_ratio"]).map_err(std::io::Error::from)?;
    for r in rows {
        let ratio = r.decay_ratio.map_or(String::new(), |d| format!("{d:.17e}"));
        w.write_record([
            format!("{:e}", r.alpha),
            format!("{:.17e}", r.exact),
            format!("{:.17e}", r.approx),
            format!("{:.17e}", r.abs_error),
            ratio,
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_domains_always_split_in_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = split_domains(2, &mut rng).unwrap();
            assert_eq!(s.s1.len() + s.s2.len(), 2);
            assert_eq!(s.s1.len(), 1);
        }
        assert!(split_domains(1, &mut rng).is_err());
    }

    #[test]
    fn split_frequencies_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = [0usize; 4];
        for _ in 0..10_000 {
            let s = split_domains(4, &mut rng).unwrap();
            for r in s.s1 {
                hits[r] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / 1e4 - 0.5).abs() < 0.05, "{h}");
        }
    }

    #[test]
    fn split_validation() {
        assert!(DomainSplit::new(vec![0], vec![1], 2).is_ok());
        assert!(DomainSplit::new(vec![0, 1], vec![], 2).is_err());
        assert!(DomainSplit::new(vec![0], vec![0, 1], 2).is_err());
    }
}
