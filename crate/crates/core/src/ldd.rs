//! Latent-domain discovery.
//!
//! For one feature space, `k` local recognition heads model `p(y | f, R_l^r)`
//! and a discriminator models `p(z = r | f, D)`. Their Bayes combination gives
//! the posterior `ρ^{i,r}` that sample `i` belongs to latent domain `r`.
//! [`discovery_loss`] is the M-step objective with `ρ` held fixed;
//! [`elimination_loss`] recomputes `ρ` as a differentiable function of the
//! features and pulls it toward `1/k`.

use crate::autodiff::Var;
use crate::error::{GcldrError, Result};
use crate::model::{head_forward, Forward, Network};
use crate::tensor::Tensor;
use crate::LOG_FLOOR;

/// Which feature space a posterior was computed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    ClassDependent,
    ClassIndependent,
}

/// Soft domain assignments, one row per sample. Rows sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    rho: Tensor,
    pub space: Space,
}

impl PosteriorMatrix {
    pub fn new(rho: Tensor, space: Space) -> Result<Self> {
        if !rho.is_matrix() {
            return Err(GcldrError::dim("posterior must be b×k"));
        }
        for i in 0..rho.rows() {
            let row = rho.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
                return Err(GcldrError::DegeneratePosterior { row: i });
            }
        }
        Ok(PosteriorMatrix { rho, space })
    }

    /// Uniform `1/k` assignments.
    pub fn uniform(rows: usize, k: usize, space: Space) -> Self {
        PosteriorMatrix { rho: Tensor::full(&[rows, k], 1.0 / k as f64), space }
    }

    pub fn values(&self) -> &Tensor {
        &self.rho
    }

    pub fn rows(&self) -> usize {
        self.rho.rows()
    }

    pub fn domains(&self) -> usize {
        self.rho.cols()
    }

    /// Column `r` as `b×1`.
    pub fn column(&self, r: usize) -> Tensor {
        let data = (0..self.rows()).map(|i| self.rho.at(i, r)).collect();
        Tensor::matrix(self.rows(), 1, data).expect("nonempty")
    }
}

/// The local heads and discriminator of one space.
#[derive(Clone, Copy, Debug)]
pub struct LddHeads<'n> {
    pub local: &'n [Network],
    pub discriminator: &'n Network,
}

impl<'n> LddHeads<'n> {
    pub fn new(local: &'n [Network], discriminator: &'n Network) -> Result<Self> {
        if local.len() < 2 {
            return Err(GcldrError::config(format!("need k ≥ 2 local heads, got {}", local.len())));
        }
        Ok(LddHeads { local, discriminator })
    }

    pub fn k(&self) -> usize {
        self.local.len()
    }
}

/// `b×k` matrix whose entry `(i, r)` is the probability head `r` gives the true class of sample `i`.
pub fn local_likelihood(fwd: &mut Forward<'_>, heads: &LddHeads<'_>, f: Var, y: &[usize]) -> Result<Var> {
    let mut cols = Vec::with_capacity(heads.k());
    for head in heads.local {
        let p = head_forward(fwd, head, f)?;
        cols.push(fwd.tape.pick(p, y)?);
    }
    fwd.tape.concat_cols(&cols)
}

/// `log p(z=r | f, D) + log p(y | f, R_l^r)`, both floored at 1e-12.
fn log_joint(fwd: &mut Forward<'_>, heads: &LddHeads<'_>, f: Var, y: &[usize]) -> Result<(Var, Var, Var)> {
    let lik = local_likelihood(fwd, heads, f, y)?;
    let log_lik = fwd.tape.log_floor(lik);
    let d = head_forward(fwd, heads.discriminator, f)?;
    if fwd.tape.value(d).cols() != heads.k() {
        return Err(GcldrError::dim("discriminator width differs from k"));
    }
    let log_d = fwd.tape.log_floor(d);
    let joint = fwd.tape.add(log_lik, log_d)?;
    Ok((joint, log_lik, log_d))
}

/// Bayes posterior from discriminator probabilities and local likelihoods,
/// evaluated in log space with per-row max subtraction.
pub fn posterior_from_parts(disc: &Tensor, lik: &Tensor, space: Space) -> Result<PosteriorMatrix> {
    if disc.shape() != lik.shape() || !disc.is_matrix() {
        return Err(GcldrError::dim(format!("posterior parts {:?} vs {:?}", disc.shape(), lik.shape())));
    }
    let (b, k) = (disc.rows(), disc.cols());
    let mut rho = Vec::with_capacity(b * k);
    for i in 0..b {
        if disc.row(i).iter().chain(lik.row(i)).any(|v| !v.is_finite()) {
            return Err(GcldrError::DegeneratePosterior { row: i });
        }
        let logs: Vec<f64> = disc
            .row(i)
            .iter()
            .zip(lik.row(i))
            .map(|(&d, &l)| d.max(LOG_FLOOR).ln() + l.max(LOG_FLOOR).ln())
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(GcldrError::DegeneratePosterior { row: i });
        }
        let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(GcldrError::DegeneratePosterior { row: i });
        }
        rho.extend(e.into_iter().map(|v| v / s));
    }
    PosteriorMatrix::new(Tensor::matrix(b, k, rho)?, space)
}

/// E-step: posteriors as constants for the current batch.
pub fn compute_posteriors(
    fwd: &mut Forward<'_>,
    heads: &LddHeads<'_>,
    f: Var,
    y: &[usize],
    space: Space,
) -> Result<PosteriorMatrix> {
    let lik = local_likelihood(fwd, heads, f, y)?;
    let d = head_forward(fwd, heads.discriminator, f)?;
    posterior_from_parts(fwd.tape.value(d), fwd.tape.value(lik), space)
}

fn check_rho(rho: &PosteriorMatrix, b: usize, k: usize) -> Result<()> {
    if rho.rows() != b || rho.domains() != k {
        return Err(GcldrError::dim(format!(
            "posterior {}×{} for batch {b}, k {k}",
            rho.rows(),
            rho.domains()
        )));
    }
    Ok(())
}

/// Discovery loss: `−(1/b) Σ_i Σ_r ρ^{i,r} [log p(y^i | f, R_l^r) + log p(z=r | f, D)]`
/// with `ρ` a constant.
pub fn discovery_loss(
    fwd: &mut Forward<'_>,
    heads: &LddHeads<'_>,
    f: Var,
    y: &[usize],
    rho: &PosteriorMatrix,
) -> Result<Var> {
    check_rho(rho, y.len(), heads.k())?;
    let (joint, _, _) = log_joint(fwd, heads, f, y)?;
    let weighted = fwd.tape.mul_const(joint, rho.values().clone())?;
    let s = fwd.tape.sum(weighted);
    Ok(fwd.tape.scale(s, -1.0 / y.len() as f64))
}

/// Recognition half of [`discovery_loss`] (equals `Σ_r` [`soft_domain_loss`]).
pub fn discovery_recognition_part(
    fwd: &mut Forward<'_>,
    heads: &LddHeads<'_>,
    f: Var,
    y: &[usize],
    rho: &PosteriorMatrix,
) -> Result<Var> {
    check_rho(rho, y.len(), heads.k())?;
    let lik = local_likelihood(fwd, heads, f, y)?;
    let log_lik = fwd.tape.log_floor(lik);
    let weighted = fwd.tape.mul_const(log_lik, rho.values().clone())?;
    let s = fwd.tape.sum(weighted);
    Ok(fwd.tape.scale(s, -1.0 / y.len() as f64))
}

/// Elimination loss: `(1/b) Σ_i Σ_r (ρ^{i,r}(f) − 1/k)²`.
///
/// `ρ` is rebuilt on the tape so gradients reach `f`; whether the heads
/// receive gradients is decided by the [`Forward`]'s trainable set.
pub fn elimination_loss(fwd: &mut Forward<'_>, heads: &LddHeads<'_>, f: Var, y: &[usize]) -> Result<Var> {
    let (joint, _, _) = log_joint(fwd, heads, f, y)?;
    let rho = fwd.tape.softmax_rows(joint)?;
    let centred = fwd.tape.offset(rho, -1.0 / heads.k() as f64);
    let sq = fwd.tape.square(centred);
    let s = fwd.tape.sum(sq);
    Ok(fwd.tape.scale(s, 1.0 / y.len() as f64))
}

/// Per-domain soft recognition loss: `−(1/b) Σ_i ρ^{i,r} log p(y^i | f, R_l^r)`.
pub fn soft_domain_loss(
    fwd: &mut Forward<'_>,
    heads: &LddHeads<'_>,
    f: Var,
    y: &[usize],
    rho: &PosteriorMatrix,
    r: usize,
) -> Result<Var> {
    check_rho(rho, y.len(), heads.k())?;
    if r >= heads.k() {
        return Err(GcldrError::config(format!("domain {r} outside [0, {})", heads.k())));
    }
    let p = head_forward(fwd, &heads.local[r], f)?;
    let picked = fwd.tape.pick(p, y)?;
    let lp = fwd.tape.log_floor(picked);
    let weighted = fwd.tape.mul_const(lp, rho.column(r))?;
    let s = fwd.tape.sum(weighted);
    Ok(fwd.tape.scale(s, -1.0 / y.len() as f64))
}

/// Conditional expectation of the complete negative log-likelihood divided by
/// `b`, written out term by term:
///
/// `Q = −(1/b) Σ_i Σ_r Σ_j ρ^{i,r} I(y^i=j) [log p(z=r|f,D) + log p(y=j|f,R_l^r)]`.
///
/// `disc[i][r]` and `local[r][i][j]` are probabilities. Kept free of the tape
/// so it can serve as an independent check of [`discovery_loss`].
pub fn q_function(rho: &Tensor, disc: &Tensor, local: &[Tensor], y: &[usize]) -> f64 {
    let b = y.len();
    let k = local.len();
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        for (r, head) in local.iter().enumerate().take(k) {
            let c = head.cols();
            for j in 0..c {
                let indicator = if yi == j { 1.0 } else { 0.0 };
                if indicator == 0.0 {
                    continue;
                }
                let log_z = disc.at(i, r).max(LOG_FLOOR).ln();
                let log_y = head.at(i, j).max(LOG_FLOOR).ln();
                total += rho.at(i, r) * indicator * (log_z + log_y);
            }
        }
    }
    -total / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::model::{build_bundle, BundleConfig, ModelBundle, Trainable};

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn tiny() -> ModelBundle {
        build_bundle(&BundleConfig { mapping_width: 6, feature_width: 5, seed: 3, ..BundleConfig::new(4, 3, 2) }).unwrap()
    }

    #[test]
    fn posterior_direct_arithmetic() {
        let rho = posterior_from_parts(&t(&[vec![0.6, 0.4]]), &t(&[vec![0.9, 0.3]]), Space::ClassDependent).unwrap();
        assert!((rho.values().at(0, 0) - 9.0 / 11.0).abs() < 1e-15);
        assert!((rho.values().at(0, 1) - 2.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_symmetry_and_forcing() {
        let rho = posterior_from_parts(
            &t(&[vec![0.5, 0.5], vec![0.5, 0.5]]),
            &t(&[vec![0.3, 0.3], vec![0.8, 0.8]]),
            Space::ClassDependent,
        )
        .unwrap();
        assert!(rho.values().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let rho = posterior_from_parts(&t(&[vec![1.0, 0.0]]), &t(&[vec![0.2, 0.9]]), Space::ClassDependent).unwrap();
        assert!((rho.values().at(0, 0) - 1.0).abs() < 1e-10);
        assert!(rho.values().at(0, 1) < 1e-10);
    }

    #[test]
    fn posterior_rejects_nan() {
        let err = posterior_from_parts(&t(&[vec![f64::NAN, 0.5]]), &t(&[vec![0.5, 0.5]]), Space::ClassIndependent);
        assert!(err.is_err());
    }

    #[test]
    fn elimination_values() {
        let b = tiny();
        // hand-built heads are awkward, so check the closed forms on the
        // squared-deviation formula directly through a constant posterior path
        let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
        let rho = fwd.tape.constant(t(&[vec![9.0 / 11.0, 2.0 / 11.0]]));
        let c = fwd.tape.offset(rho, -0.5);
        let sq = fwd.tape.square(c);
        let s = fwd.tape.sum(sq);
        let v = fwd.tape.scalar(s);
        assert!((v - 2.0 * (9.0 / 11.0 - 0.5f64).powi(2)).abs() < 1e-15);
        assert!((v - 0.2025).abs() < 1e-4);
    }

    #[test]
    fn soft_loss_sums_to_recognition_part() {
        let b = tiny();
        let x = Tensor::from_rows(&[
            vec![0.1, -0.3, 0.8, 1.2],
            vec![-1.0, 0.4, 0.0, 0.3],
            vec![0.5, 0.5, -0.7, -0.2],
        ])
        .unwrap();
        let y = [0, 2, 1];
        let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
        let f = b.forward_features(&mut fwd, &x).unwrap();
        let heads = LddHeads::new(&b.local_cd, b.d_cd.as_ref().unwrap()).unwrap();
        let rho = compute_posteriors(&mut fwd, &heads, f.cd, &y, Space::ClassDependent).unwrap();
        let total: f64 = (0..2)
            .map(|r| {
                let l = soft_domain_loss(&mut fwd, &heads, f.cd, &y, &rho, r).unwrap();
                fwd.tape.scalar(l)
            })
            .sum();
        let rec = discovery_recognition_part(&mut fwd, &heads, f.cd, &y, &rho).unwrap();
        assert!((total - fwd.tape.scalar(rec)).abs() <= 1e-12);

        let zero = PosteriorMatrix::new(t(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]), Space::ClassDependent).unwrap();
        let l = soft_domain_loss(&mut fwd, &heads, f.cd, &y, &zero, 1).unwrap();
        assert_eq!(fwd.tape.scalar(l), 0.0);
        let l0 = soft_domain_loss(&mut fwd, &heads, f.cd, &y, &zero, 0).unwrap();
        let p = head_forward(&mut fwd, &heads.local[0], f.cd).unwrap();
        let ce = fwd.tape.cross_entropy(p, &y).unwrap();
        assert!((fwd.tape.scalar(l0) - fwd.tape.scalar(ce)).abs() < 1e-15);
        assert!(soft_domain_loss(&mut fwd, &heads, f.cd, &y, &zero, 2).is_err());
    }

    #[test]
    fn q_function_hard_assignments_collapse() {
        let disc = t(&[vec![0.7, 0.3], vec![0.2, 0.8]]);
        let local = vec![t(&[vec![0.6, 0.4], vec![0.5, 0.5]]), t(&[vec![0.1, 0.9], vec![0.25, 0.75]])];
        let y = [0, 1];
        let hard = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = q_function(&hard, &disc, &local, &y);
        let expect = -((0.7f64.ln() + 0.6f64.ln()) + (0.8f64.ln() + 0.75f64.ln())) / 2.0;
        assert!((q - expect).abs() < 1e-15);
    }

    #[test]
    fn uniform_everything_gives_two_ln2() {
        let disc = Tensor::full(&[3, 2], 0.5);
        let local = vec![Tensor::full(&[3, 2], 0.5), Tensor::full(&[3, 2], 0.5)];
        let rho = Tensor::full(&[3, 2], 0.5);
        let q = q_function(&rho, &disc, &local, &[0, 1, 1]);
        assert!((q - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn posterior_matrix_validation() {
        assert!(PosteriorMatrix::new(t(&[vec![0.7, 0.2]]), Space::ClassDependent).is_err());
        assert!(PosteriorMatrix::new(t(&[vec![1.2, -0.2]]), Space::ClassDependent).is_err());
        assert!(LddHeads::new(&[], tiny().d_cd.as_ref().unwrap()).is_err());
    }
}
