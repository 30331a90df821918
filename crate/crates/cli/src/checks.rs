//! Finite-difference checks of every training objective on a tiny model.

use gcldr_core::autodiff::{finite_diff_check, Mode, Var};
use gcldr_core::ldd;
use gcldr_core::model::{build_bundle, BundleConfig, Features, Forward, ModelBundle, ParamStore, Trainable};
use gcldr_core::trainer::{self, ci_heads, cd_heads, ClassPrior, Posteriors};
use gcldr_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub loss: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

/// A fixed tiny problem: `d = 8`, `P` width 16, `G` width 8, `c = 3`, `k = 2`, `b = 4`.
pub struct TinyProblem {
    pub bundle: ModelBundle,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub prior: ClassPrior,
    pub seed: u64,
}

impl TinyProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = BundleConfig { mapping_width: 16, feature_width: 8, seed, ..BundleConfig::new(8, 3, 2) };
        let bundle = build_bundle(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = Tensor::matrix(4, 8, (0..32).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())?;
        let y = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let prior = ClassPrior { probs: vec![0.5, 0.3, 0.2] };
        Ok(TinyProblem { bundle, x, y, prior, seed })
    }

    fn forward<'a>(&'a self, params: &'a ParamStore, trainable: Trainable) -> Forward<'a> {
        Forward::with_params(&self.bundle, params, Mode::Train, trainable, self.seed)
    }

    /// Posteriors at the current parameters, held fixed by every check.
    pub fn posteriors(&self) -> Result<Posteriors> {
        let mut fwd = self.forward(&self.bundle.params, Trainable::Nothing);
        let f = self.bundle.forward_features(&mut fwd, &self.x)?;
        trainer::e_step(&mut fwd, &self.bundle, &f, &self.y)
    }
}

type LossBuilder = fn(&mut Forward<'_>, &TinyProblem, &Features, &Posteriors) -> Result<Var>;

fn phase_one(fwd: &mut Forward<'_>, p: &TinyProblem, f: &Features, post: &Posteriors) -> Result<Var> {
    let b = &p.bundle;
    let a = trainer::loss_cd(fwd, b, f.cd, &p.y)?;
    let c = trainer::loss_ci(fwd, b, f.ci.expect("ci"), &p.y)?;
    let d = trainer::loss_d(fwd, b, f, &p.y, post)?;
    let s = fwd.tape.add(a, c)?;
    fwd.tape.add(s, d)
}

fn phase_two(fwd: &mut Forward<'_>, p: &TinyProblem, f: &Features, _: &Posteriors) -> Result<Var> {
    let b = &p.bundle;
    let a = trainer::loss_cd(fwd, b, f.cd, &p.y)?;
    let c = trainer::loss_ac(fwd, b, f.ci.expect("ci"), &p.prior)?;
    let u = trainer::loss_u(fwd, b, f, &p.y)?;
    let s = fwd.tape.add(a, c)?;
    fwd.tape.add(s, u)
}

/// Every objective, by name.
pub const LOSSES: [(&str, LossBuilder); 12] = [
    ("discovery_cd", |fwd, p, f, post| ldd::discovery_loss(fwd, &cd_heads(&p.bundle)?, f.cd, &p.y, &post.cd)),
    ("discovery_ci", |fwd, p, f, post| {
        ldd::discovery_loss(fwd, &ci_heads(&p.bundle)?, f.ci.expect("ci"), &p.y, post.ci.as_ref().expect("ci"))
    }),
    ("elimination_cd", |fwd, p, f, _| ldd::elimination_loss(fwd, &cd_heads(&p.bundle)?, f.cd, &p.y)),
    ("elimination_ci", |fwd, p, f, _| ldd::elimination_loss(fwd, &ci_heads(&p.bundle)?, f.ci.expect("ci"), &p.y)),
    ("loss_cd", |fwd, p, f, _| trainer::loss_cd(fwd, &p.bundle, f.cd, &p.y)),
    ("loss_ci", |fwd, p, f, _| trainer::loss_ci(fwd, &p.bundle, f.ci.expect("ci"), &p.y)),
    ("loss_ac", |fwd, p, f, _| trainer::loss_ac(fwd, &p.bundle, f.ci.expect("ci"), &p.prior)),
    ("soft_domain_0", |fwd, p, f, post| ldd::soft_domain_loss(fwd, &cd_heads(&p.bundle)?, f.cd, &p.y, &post.cd, 0)),
    ("soft_domain_1", |fwd, p, f, post| ldd::soft_domain_loss(fwd, &cd_heads(&p.bundle)?, f.cd, &p.y, &post.cd, 1)),
    ("loss_u", |fwd, p, f, _| trainer::loss_u(fwd, &p.bundle, f, &p.y)),
    ("phase_heads", phase_one),
    ("phase_extractors", phase_two),
];

/// Compares backprop with central differences for one objective over all parameters.
pub fn check_loss(p: &TinyProblem, name: &'static str, build: LossBuilder, corrupt: bool) -> Result<CheckRow> {
    let post = p.posteriors()?;
    let ids = p.bundle.params.all_ids();
    let mut analytic = {
        let mut fwd = p.forward(&p.bundle.params, Trainable::All);
        let f = p.bundle.forward_features(&mut fwd, &p.x)?;
        let loss = build(&mut fwd, p, &f, &post)?;
        let g = fwd.tape.backward(loss)?;
        fwd.param_grads(&g, &ids)
    };
    if corrupt {
        for g in analytic.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
        }
    }
    let values: Vec<Tensor> = ids.iter().map(|&i| p.bundle.params.value(i).clone()).collect();
    let mut store = p.bundle.params.clone();
    let res = finite_diff_check(&values, &analytic, FD_STEP, |ps| {
        for (&i, v) in ids.iter().zip(ps) {
            *store.value_mut(i) = v.clone();
        }
        let mut fwd = p.forward(&store, Trainable::Nothing);
        let f = p.bundle.forward_features(&mut fwd, &p.x)?;
        let l = build(&mut fwd, p, &f, &post)?;
        Ok(fwd.tape.scalar(l))
    })?;
    Ok(CheckRow {
        loss: name,
        seed: p.seed,
        max_rel_error: res.max_rel_error,
        checked: res.checked,
        passed: res.passes(GRADCHECK_TOLERANCE),
    })
}

/// All objectives over `seeds` tiny problems. `corrupt` perturbs the analytic
/// gradients so that every row should fail.
pub fn gradcheck_suite(seeds: usize, corrupt: bool) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::with_capacity(seeds * LOSSES.len());
    for seed in 0..seeds as u64 {
        let p = TinyProblem::new(seed)?;
        for (name, build) in LOSSES {
            rows.push(check_loss(&p, name, build, corrupt)?);
        }
    }
    Ok(rows)
}

