//! Alternating optimisation of the heads and the feature extractors.
//!
//! Each mini-batch runs an E-step (posteriors in both spaces, held fixed),
//! then one optimiser step on the heads and one on the extractors. The
//! extractor step minimises recognition in the class-dependent space while
//! pushing class predictions in the class-independent space toward the class
//! prior and domain posteriors toward uniform.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Optimizer, OptimizerKind, Var};
use crate::data::Samples;
use crate::error::{GcldrError, Result};
use crate::eval::{default_threshold, metrics, predict_variant};
use crate::ldd::{self, LddHeads, PosteriorMatrix, Space};
use crate::meta::{self, MetaGradientMode, MetaOptions};
use crate::model::{head_forward, Components, Features, Forward, Group, ModelBundle, ParamId, Trainable};
use crate::tensor::Tensor;

/// Training recipe. `Full` is the complete method; the others remove or
/// replace parts of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `P → G_cd → R_g_cd` with cross-entropy only.
    Direct,
    #[default]
    Full,
    SingleSpace,
    FeatureBased,
    ClassConfuse,
    NoUnification,
    Meta,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Direct,
        Variant::Full,
        Variant::SingleSpace,
        Variant::FeatureBased,
        Variant::ClassConfuse,
        Variant::NoUnification,
        Variant::Meta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Direct => "direct",
            Variant::Full => "full",
            Variant::SingleSpace => "single_space",
            Variant::FeatureBased => "feature_based",
            Variant::ClassConfuse => "class_confuse",
            Variant::NoUnification => "no_unification",
            Variant::Meta => "meta",
        }
    }

    pub fn components(self) -> Components {
        let c = |ci_space, global_cd, local_heads, discriminators| Components { ci_space, global_cd, local_heads, discriminators };
        match self {
            Variant::Direct => c(false, true, false, false),
            Variant::Full | Variant::Meta => Components::FULL,
            Variant::SingleSpace => c(false, true, true, true),
            Variant::FeatureBased => c(true, true, false, true),
            Variant::ClassConfuse => c(true, true, false, false),
            Variant::NoUnification => c(false, false, true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GcldrError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GcldrError::config(format!("unknown variant {s:?}")))
    }
}

/// Multipliers on each loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cd: f64,
    pub ci: f64,
    pub ac: f64,
    pub d: f64,
    pub u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cd: 1.0, ci: 1.0, ac: 1.0, d: 1.0, u: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub variant: Variant,
    pub gamma: f64,
    pub alpha: f64,
    pub weights: LossWeights,
    /// Stop after this many epochs without a better validation aAUC and
    /// restore the best parameters.
    pub patience: Option<usize>,
    pub meta_gradient: MetaGradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            variant: Variant::Full,
            gamma: 0.01,
            alpha: 1.0,
            weights: LossWeights::default(),
            patience: None,
            meta_gradient: MetaGradientMode::FirstOrder,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcldrError::config(m));
        if self.batch_size < 2 {
            return bad(format!("batch size must be ≥ 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        let w = &self.weights;
        if [w.cd, w.ci, w.ac, w.d, w.u].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and ≥ 0".into());
        }
        if self.patience == Some(0) {
            return bad("patience must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Class frequencies of the training labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub probs: Vec<f64>,
}

impl ClassPrior {
    pub fn uniform(classes: usize) -> Self {
        ClassPrior { probs: vec![1.0 / classes as f64; classes] }
    }
}

pub fn estimate_prior(labels: &[usize], classes: usize) -> Result<ClassPrior> {
    if labels.is_empty() {
        return Err(GcldrError::config("cannot estimate a prior from no labels"));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        *counts.get_mut(l).ok_or(GcldrError::Label { label: l, classes })? += 1;
    }
    let n = labels.len() as f64;
    Ok(ClassPrior { probs: counts.into_iter().map(|c| c as f64 / n).collect() })
}

/// E-step output for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    pub cd: PosteriorMatrix,
    pub ci: Option<PosteriorMatrix>,
}

fn need<'b, T>(part: &'b Option<T>, name: &str) -> Result<&'b T> {
    part.as_ref().ok_or_else(|| GcldrError::Contract(format!("bundle has no {name}")))
}

fn need_ci(f: &Features) -> Result<Var> {
    f.ci.ok_or_else(|| GcldrError::Contract("bundle has no class-independent space".into()))
}

pub fn cd_heads(bundle: &ModelBundle) -> Result<LddHeads<'_>> {
    LddHeads::new(&bundle.local_cd, need(&bundle.d_cd, "D_cd")?)
}

pub fn ci_heads(bundle: &ModelBundle) -> Result<LddHeads<'_>> {
    LddHeads::new(&bundle.local_ci, need(&bundle.d_ci, "D_ci")?)
}

/// Cross-entropy of the global class-dependent head.
pub fn loss_cd(fwd: &mut Forward<'_>, bundle: &ModelBundle, f_cd: Var, y: &[usize]) -> Result<Var> {
    let p = head_forward(fwd, need(&bundle.r_g_cd, "R_g_cd")?, f_cd)?;
    fwd.tape.cross_entropy(p, y)
}

/// Cross-entropy of the global class-independent head.
pub fn loss_ci(fwd: &mut Forward<'_>, bundle: &ModelBundle, f_ci: Var, y: &[usize]) -> Result<Var> {
    let p = head_forward(fwd, need(&bundle.r_g_ci, "R_g_ci")?, f_ci)?;
    fwd.tape.cross_entropy(p, y)
}

/// `(1/(bc)) Σ_i Σ_j (p(y=j | f_ci) − prior_j)²`.
pub fn loss_ac(fwd: &mut Forward<'_>, bundle: &ModelBundle, f_ci: Var, prior: &ClassPrior) -> Result<Var> {
    let p = head_forward(fwd, need(&bundle.r_g_ci, "R_g_ci")?, f_ci)?;
    let (b, c) = (fwd.tape.value(p).rows(), fwd.tape.value(p).cols());
    if prior.probs.len() != c {
        return Err(GcldrError::dim(format!("prior over {} classes, head over {c}", prior.probs.len())));
    }
    let target = fwd.tape.constant(Tensor::matrix(b, c, prior.probs.repeat(b))?);
    let diff = fwd.tape.sub(p, target)?;
    let sq = fwd.tape.square(diff);
    let s = fwd.tape.sum(sq);
    Ok(fwd.tape.scale(s, 1.0 / (b * c) as f64))
}

/// Discovery loss summed over the spaces the bundle has.
pub fn loss_d(fwd: &mut Forward<'_>, bundle: &ModelBundle, f: &Features, y: &[usize], post: &Posteriors) -> Result<Var> {
    let mut l = ldd::discovery_loss(fwd, &cd_heads(bundle)?, f.cd, y, &post.cd)?;
    if let (Some(f_ci), Some(rho)) = (f.ci, &post.ci) {
        let l_ci = ldd::discovery_loss(fwd, &ci_heads(bundle)?, f_ci, y, rho)?;
        l = fwd.tape.add(l, l_ci)?;
    }
    Ok(l)
}

/// Elimination loss summed over the spaces the bundle has.
pub fn loss_u(fwd: &mut Forward<'_>, bundle: &ModelBundle, f: &Features, y: &[usize]) -> Result<Var> {
    let mut l = ldd::elimination_loss(fwd, &cd_heads(bundle)?, f.cd, y)?;
    if let Some(f_ci) = f.ci {
        if bundle.d_ci.is_some() {
            let l_ci = ldd::elimination_loss(fwd, &ci_heads(bundle)?, f_ci, y)?;
            l = fwd.tape.add(l, l_ci)?;
        }
    }
    Ok(l)
}

/// Posteriors of both spaces for the current pass.
pub fn e_step(fwd: &mut Forward<'_>, bundle: &ModelBundle, f: &Features, y: &[usize]) -> Result<Posteriors> {
    let cd = ldd::compute_posteriors(fwd, &cd_heads(bundle)?, f.cd, y, Space::ClassDependent)?;
    let ci = match (f.ci, bundle.local_ci.is_empty()) {
        (Some(f_ci), false) => Some(ldd::compute_posteriors(fwd, &ci_heads(bundle)?, f_ci, y, Space::ClassIndependent)?),
        _ => None,
    };
    Ok(Posteriors { cd, ci })
}

/// Discriminator-only posterior used by the feature-based variant.
fn feature_posterior(fwd: &mut Forward<'_>, disc: &crate::model::Network, f: Var, space: Space) -> Result<PosteriorMatrix> {
    let d = head_forward(fwd, disc, f)?;
    PosteriorMatrix::new(fwd.tape.value(d).clone(), space)
}

/// `−(1/b) Σ ρ log D(f)`: the discriminator is trained toward its own detached output.
fn feature_discovery(fwd: &mut Forward<'_>, disc: &crate::model::Network, f: Var, rho: &PosteriorMatrix) -> Result<Var> {
    let d = head_forward(fwd, disc, f)?;
    let ld = fwd.tape.log_floor(d);
    let w = fwd.tape.mul_const(ld, rho.values().clone())?;
    let s = fwd.tape.sum(w);
    Ok(fwd.tape.scale(s, -1.0 / rho.rows() as f64))
}

/// `(1/b) Σ (D(f) − 1/k)²`.
fn feature_elimination(fwd: &mut Forward<'_>, disc: &crate::model::Network, f: Var) -> Result<Var> {
    let d = head_forward(fwd, disc, f)?;
    let (b, k) = (fwd.tape.value(d).rows(), fwd.tape.value(d).cols());
    let c = fwd.tape.offset(d, -1.0 / k as f64);
    let sq = fwd.tape.square(c);
    let s = fwd.tape.sum(sq);
    Ok(fwd.tape.scale(s, 1.0 / b as f64))
}

/// Loss values of one step, unweighted. Terms a variant does not use are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub l_cd: f64,
    pub l_ci: f64,
    pub l_ac: f64,
    pub l_d: f64,
    pub l_u: f64,
    pub l_meta: f64,
}

impl StepReport {
    fn add_scaled(&mut self, o: &StepReport, s: f64) {
        self.l_cd += s * o.l_cd;
        self.l_ci += s * o.l_ci;
        self.l_ac += s * o.l_ac;
        self.l_d += s * o.l_d;
        self.l_u += s * o.l_u;
        self.l_meta += s * o.l_meta;
    }
}

/// One optimiser per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub heads: Optimizer,
    pub extractors: Optimizer,
    head_ids: Vec<ParamId>,
    extractor_ids: Vec<ParamId>,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, cfg: &TrainConfig) -> Result<Self> {
        let head_ids = bundle.select_group(Group::Heads);
        let extractor_ids = bundle.select_group(Group::Extractors);
        let shapes = |ids: &[ParamId]| -> Vec<Vec<usize>> { ids.iter().map(|&i| bundle.params.value(i).shape().to_vec()).collect() };
        let hs = shapes(&head_ids);
        let es = shapes(&extractor_ids);
        fn refs(s: &[Vec<usize>]) -> Vec<&[usize]> {
            s.iter().map(Vec::as_slice).collect()
        }
        Ok(Optimizers {
            heads: Optimizer::new(cfg.optimizer, cfg.learning_rate, &refs(&hs))?,
            extractors: Optimizer::new(cfg.optimizer, cfg.learning_rate, &refs(&es))?,
            head_ids,
            extractor_ids,
        })
    }

    pub fn head_ids(&self) -> &[ParamId] {
        &self.head_ids
    }

    pub fn extractor_ids(&self) -> &[ParamId] {
        &self.extractor_ids
    }
}

/// Running weighted sum of loss terms on one tape.
struct Objective {
    total: Option<Var>,
}

impl Objective {
    fn new() -> Self {
        Objective { total: None }
    }

    fn add(&mut self, fwd: &mut Forward<'_>, term: Var, weight: f64) -> Result<f64> {
        let value = fwd.tape.scalar(term);
        let scaled = fwd.tape.scale(term, weight);
        self.total = Some(match self.total {
            Some(t) => fwd.tape.add(t, scaled)?,
            None => scaled,
        });
        Ok(value)
    }

    fn finish(self, fwd: &Forward<'_>, phase: &str) -> Result<Var> {
        let t = self.total.ok_or_else(|| GcldrError::Contract(format!("{phase} has no loss terms")))?;
        let v = fwd.tape.scalar(t);
        if !v.is_finite() {
            return Err(GcldrError::Divergence { context: format!("{phase} loss is {v}") });
        }
        Ok(t)
    }
}

fn check_batch(bundle: &ModelBundle, x: &Tensor, y: &[usize]) -> Result<()> {
    if y.len() < 2 {
        return Err(GcldrError::DegenerateBatch(y.len()));
    }
    if x.rows() != y.len() {
        return Err(GcldrError::dim(format!("{} rows for {} labels", x.rows(), y.len())));
    }
    let c = bundle.config.classes;
    if let Some(&l) = y.iter().find(|&&l| l >= c) {
        return Err(GcldrError::Label { label: l, classes: c });
    }
    Ok(())
}

/// Plain cross-entropy on both groups at once.
fn direct_step(bundle: &mut ModelBundle, x: &Tensor, y: &[usize], cfg: &TrainConfig, opts: &mut Optimizers, seed: u64) -> Result<StepReport> {
    let mut rep = StepReport::default();
    let (gh, ge, stats) = {
        let mut fwd = Forward::new(bundle, Mode::Train, Trainable::All, seed);
        let f = bundle.forward_features(&mut fwd, x)?;
        let mut obj = Objective::new();
        let l = loss_cd(&mut fwd, bundle, f.cd, y)?;
        rep.l_cd = obj.add(&mut fwd, l, cfg.weights.cd)?;
        let loss = obj.finish(&fwd, "direct")?;
        let g = fwd.tape.backward(loss)?;
        (fwd.param_grads(&g, &opts.head_ids), fwd.param_grads(&g, &opts.extractor_ids), std::mem::take(&mut fwd.batch_stats))
    };
    opts.heads.step(&mut bundle.params.values_mut(&opts.head_ids), &gh)?;
    opts.extractors.step(&mut bundle.params.values_mut(&opts.extractor_ids), &ge)?;
    bundle.update_running(&stats);
    Ok(rep)
}

/// One mini-batch of the alternating scheme. `seed` drives dropout masks
/// and the meta split.
pub fn train_step(
    bundle: &mut ModelBundle,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    opts: &mut Optimizers,
    prior: &ClassPrior,
    seed: u64,
) -> Result<StepReport> {
    check_batch(bundle, x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (seed1, seed2, split_seed): (u64, u64, u64) = (rng.gen(), rng.gen(), rng.gen());
    if cfg.variant == Variant::Direct {
        return direct_step(bundle, x, y, cfg, opts, seed1);
    }
    let v = cfg.variant;
    let w = &cfg.weights;
    let mut rep = StepReport::default();

    // E-step and phase 1: heads only.
    let (post, grads_h) = {
        let mut fwd = Forward::new(bundle, Mode::Train, Trainable::Only(Group::Heads), seed1);
        let f = bundle.forward_features(&mut fwd, x)?;
        let post = match v {
            Variant::ClassConfuse => None,
            Variant::FeatureBased => {
                let cd = feature_posterior(&mut fwd, need(&bundle.d_cd, "D_cd")?, f.cd, Space::ClassDependent)?;
                let ci = feature_posterior(&mut fwd, need(&bundle.d_ci, "D_ci")?, need_ci(&f)?, Space::ClassIndependent)?;
                Some(Posteriors { cd, ci: Some(ci) })
            }
            _ => Some(e_step(&mut fwd, bundle, &f, y)?),
        };
        let mut obj = Objective::new();
        if bundle.r_g_cd.is_some() {
            let l = loss_cd(&mut fwd, bundle, f.cd, y)?;
            rep.l_cd = obj.add(&mut fwd, l, w.cd)?;
        }
        if let (Some(f_ci), true) = (f.ci, bundle.r_g_ci.is_some()) {
            let l = loss_ci(&mut fwd, bundle, f_ci, y)?;
            rep.l_ci = obj.add(&mut fwd, l, w.ci)?;
        }
        if let Some(post) = &post {
            let l = if v == Variant::FeatureBased {
                let a = feature_discovery(&mut fwd, need(&bundle.d_cd, "D_cd")?, f.cd, &post.cd)?;
                let b = feature_discovery(&mut fwd, need(&bundle.d_ci, "D_ci")?, need_ci(&f)?, post.ci.as_ref().expect("ci posterior"))?;
                fwd.tape.add(a, b)?
            } else {
                loss_d(&mut fwd, bundle, &f, y, post)?
            };
            rep.l_d = obj.add(&mut fwd, l, w.d)?;
        }
        let loss = obj.finish(&fwd, "head phase")?;
        let g = fwd.tape.backward(loss)?;
        (post, fwd.param_grads(&g, &opts.head_ids))
    };
    opts.heads.step(&mut bundle.params.values_mut(&opts.head_ids), &grads_h)?;

    // Phase 2: extractors only.
    let (mut grads_e, stats) = {
        let mut fwd = Forward::new(bundle, Mode::Train, Trainable::Only(Group::Extractors), seed2);
        let f = bundle.forward_features(&mut fwd, x)?;
        let mut obj = Objective::new();
        if v == Variant::NoUnification {
            let l = loss_d(&mut fwd, bundle, &f, y, post.as_ref().expect("posteriors"))?;
            obj.add(&mut fwd, l, w.d)?;
        } else {
            let l = loss_cd(&mut fwd, bundle, f.cd, y)?;
            obj.add(&mut fwd, l, w.cd)?;
        }
        if let (Some(f_ci), true) = (f.ci, bundle.r_g_ci.is_some()) {
            let l = loss_ac(&mut fwd, bundle, f_ci, prior)?;
            rep.l_ac = obj.add(&mut fwd, l, w.ac)?;
        }
        match v {
            Variant::Full | Variant::Meta | Variant::SingleSpace => {
                let l = loss_u(&mut fwd, bundle, &f, y)?;
                rep.l_u = obj.add(&mut fwd, l, w.u)?;
            }
            Variant::FeatureBased => {
                let a = feature_elimination(&mut fwd, need(&bundle.d_cd, "D_cd")?, f.cd)?;
                let b = feature_elimination(&mut fwd, need(&bundle.d_ci, "D_ci")?, need_ci(&f)?)?;
                let l = fwd.tape.add(a, b)?;
                rep.l_u = obj.add(&mut fwd, l, w.u)?;
            }
            _ => {}
        }
        let loss = obj.finish(&fwd, "extractor phase")?;
        let g = fwd.tape.backward(loss)?;
        (fwd.param_grads(&g, &opts.extractor_ids), std::mem::take(&mut fwd.batch_stats))
    };

    if v == Variant::Meta {
        let post = post.as_ref().expect("posteriors");
        let mut split_rng = ChaCha8Rng::seed_from_u64(split_seed);
        let split = meta::split_domains(bundle.config.domains, &mut split_rng)?;
        let mopts = MetaOptions { gamma: cfg.gamma, alpha: cfg.alpha, mode: cfg.meta_gradient, dropout: true };
        let (value, flat) = meta::meta_contribution(bundle, x, y, post, &split, &mopts, seed2)?;
        rep.l_meta = value;
        let mut off = 0;
        for g in grads_e.iter_mut() {
            let n = g.len();
            for (a, b) in g.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *a += b;
            }
            off += n;
        }
    }
    opts.extractors.step(&mut bundle.params.values_mut(&opts.extractor_ids), &grads_e)?;
    bundle.update_running(&stats);
    Ok(rep)
}

/// Class probabilities from `P → G_cd → R_g_cd` in inference mode.
pub fn predict(bundle: &ModelBundle, x: &Tensor) -> Result<Tensor> {
    let head = need(&bundle.r_g_cd, "R_g_cd")?;
    let mut fwd = Forward::new(bundle, Mode::Infer, Trainable::Nothing, 0);
    let f = bundle.forward_features(&mut fwd, x)?;
    let p = head_forward(&mut fwd, head, f.cd)?;
    Ok(fwd.tape.value(p).clone())
}

/// Per-epoch means of the step losses plus validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_cd: f64,
    pub l_ci: f64,
    pub l_ac: f64,
    pub l_d: f64,
    pub l_u: f64,
    pub l_meta: f64,
    pub val_auc: Option<f64>,
    pub val_acc1: Option<f64>,
}

/// Trains `bundle` for `cfg.epochs` shuffled passes over `train`.
pub fn fit(mut bundle: ModelBundle, train: &Samples, val: Option<&Samples>, cfg: &TrainConfig) -> Result<(ModelBundle, Vec<HistoryRow>)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(GcldrError::DegenerateBatch(train.len()));
    }
    let components = cfg.variant.components();
    if bundle.components != components {
        return Err(GcldrError::config(format!("bundle was not built for variant {}", cfg.variant)));
    }
    let prior = estimate_prior(&train.y, bundle.config.classes)?;
    let mut opts = Optimizers::new(&bundle, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelBundle)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = StepReport::default();
        let mut steps = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let step_seed: u64 = rng.gen();
            let rep = train_step(&mut bundle, &batch.x, &batch.y, cfg, &mut opts, &prior, step_seed).map_err(|e| match e {
                GcldrError::Divergence { context } => GcldrError::Divergence { context: format!("epoch {epoch}, batch {bi}: {context}") },
                other => other,
            })?;
            sums.add_scaled(&rep, 1.0);
            steps += 1;
        }
        let mut means = StepReport::default();
        means.add_scaled(&sums, 1.0 / steps.max(1) as f64);
        let (val_auc, val_acc1) = match val {
            Some(v) if !v.is_empty() => {
                let p = predict_variant(&bundle, cfg.variant, &v.x)?;
                let m = metrics(&p, &v.y, default_threshold(bundle.config.classes))?;
                (Some(m.auc), Some(m.acc1))
            }
            _ => (None, None),
        };
        log::debug!("{} epoch {epoch}: L_cd {:.4} L_u {:.4} val aAUC {val_auc:?}", cfg.variant, means.l_cd, means.l_u);
        history.push(HistoryRow {
            epoch,
            l_cd: means.l_cd,
            l_ci: means.l_ci,
            l_ac: means.l_ac,
            l_d: means.l_d,
            l_u: means.l_u,
            l_meta: means.l_meta,
            val_auc,
            val_acc1,
        });
        if let (Some(p), Some(a)) = (cfg.patience, val_auc) {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, bundle.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    break;
                }
            }
        }
    }
    if let Some((_, b)) = best {
        bundle = b;
    }
    Ok((bundle, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_examples() {
        assert_eq!(estimate_prior(&[0, 0, 1], 2).unwrap().probs, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(estimate_prior(&[0, 1, 2, 2, 1, 0], 3).unwrap(), ClassPrior::uniform(3));
        assert!(estimate_prior(&[0, 3], 3).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("ours".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gamma: -0.1, ..Default::default() }.validate().is_err());
    }
}
