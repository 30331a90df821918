//! Recognition metrics and the ablation variants.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::error::{GcldrError, Result};
use crate::model::{build_with, head_forward, BundleConfig, Forward, ModelBundle, Trainable};
use crate::tensor::Tensor;
pub use crate::trainer::Variant;

/// One-vs-rest area under the ROC curve: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc_one_vs_rest(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(GcldrError::dim("one positive flag per score"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GcldrError::UndefinedAuc("NaN score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GcldrError::UndefinedAuc(format!("{n_pos} positives, {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the midrank keeps every quantity an integer
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank_x2 = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            if positives[o] {
                rank_sum_x2 += midrank_x2;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let u_x2 = rank_sum_x2 - n_pos * (n_pos + 1);
    Ok(u_x2 as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// Averages over the classes that have both positives and negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub far: f64,
    pub frr: f64,
    pub bfr: f64,
    pub acc1: f64,
    pub tau: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
}

/// `τ = 1/c`.
pub fn default_threshold(classes: usize) -> f64 {
    1.0 / classes as f64
}

pub fn metrics(probs: &Tensor, labels: &[usize], tau: f64) -> Result<MetricsReport> {
    if !probs.is_matrix() || probs.rows() != labels.len() || labels.is_empty() {
        return Err(GcldrError::dim(format!("probabilities {:?} for {} labels", probs.shape(), labels.len())));
    }
    let c = probs.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(GcldrError::Label { label: bad, classes: c });
    }
    let (mut auc, mut far, mut frr, mut used) = (0.0, 0.0, 0.0, 0usize);
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for j in 0..c {
        let scores: Vec<f64> = (0..labels.len()).map(|i| probs.at(i, j)).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == j).collect();
        let Ok(a) = auc_one_vs_rest(&scores, &pos) else {
            per_class.push(None);
            excluded.push(j);
            continue;
        };
        let (mut fa, mut fr, mut np, mut nn) = (0usize, 0usize, 0usize, 0usize);
        for (s, p) in scores.iter().zip(&pos) {
            if *p {
                np += 1;
                fr += (*s < tau) as usize;
            } else {
                nn += 1;
                fa += (*s >= tau) as usize;
            }
        }
        per_class.push(Some(a));
        auc += a;
        far += fa as f64 / nn as f64;
        frr += fr as f64 / np as f64;
        used += 1;
    }
    if used == 0 {
        return Err(GcldrError::UndefinedAuc("no class has both positives and negatives".into()));
    }
    let n = used as f64;
    let (far, frr) = (far / n, frr / n);
    let pred = probs.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(MetricsReport {
        auc: auc / n,
        far,
        frr,
        bfr: (far + frr) / 2.0,
        acc1: hits as f64 / labels.len() as f64,
        tau,
        per_class_auc: per_class,
        excluded_classes: excluded,
    })
}

/// Builds the bundle a variant trains.
pub fn make_variant(cfg: &BundleConfig, variant: Variant) -> Result<ModelBundle> {
    build_with(cfg, variant.components())
}

/// `Σ_r D_r · head_r`, row by row.
pub fn mixture_from_parts(disc: &Tensor, heads: &[Tensor]) -> Result<Tensor> {
    let k = heads.len();
    if !disc.is_matrix() || disc.cols() != k || heads.iter().any(|h| h.rows() != disc.rows()) {
        return Err(GcldrError::dim("discriminator needs one column per head"));
    }
    let (b, c) = (disc.rows(), heads[0].cols());
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        for (r, h) in heads.iter().enumerate() {
            let w = disc.at(i, r);
            for j in 0..c {
                out[i * c + j] += w * h.at(i, j);
            }
        }
    }
    Tensor::matrix(b, c, out)
}

/// Class probabilities of a bundle without global heads: each local head
/// weighted by the discriminator's belief in its domain.
pub fn predict_no_unification(bundle: &ModelBundle, x: &Tensor) -> Result<Tensor> {
    let Some(d_cd) = &bundle.d_cd else {
        return Err(GcldrError::Contract("bundle has no class-dependent discriminator".into()));
    };
    if bundle.local_cd.is_empty() {
        return Err(GcldrError::Contract("bundle has no local heads".into()));
    }
    let mut fwd = Forward::new(bundle, Mode::Infer, Trainable::Nothing, 0);
    let f = bundle.forward_features(&mut fwd, x)?;
    let d = head_forward(&mut fwd, d_cd, f.cd)?;
    let mut heads = Vec::with_capacity(bundle.local_cd.len());
    for h in &bundle.local_cd {
        let p = head_forward(&mut fwd, h, f.cd)?;
        heads.push(fwd.tape.value(p).clone());
    }
    mixture_from_parts(fwd.tape.value(d), &heads)
}

/// Inference path of `variant`.
pub fn predict_variant(bundle: &ModelBundle, variant: Variant, x: &Tensor) -> Result<Tensor> {
    match variant {
        Variant::NoUnification => predict_no_unification(bundle, x),
        _ => crate::trainer::predict(bundle, x),
    }
}
