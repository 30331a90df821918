use gcldr_core::autodiff::Mode;
use gcldr_core::data::Samples;
use gcldr_core::eval::{make_variant, predict_variant};
use gcldr_core::ldd::{discovery_loss, elimination_loss, q_function};
use gcldr_core::model::{head_forward, BundleConfig, Forward, Group, ModelBundle, Trainable};
use gcldr_core::trainer::{
    cd_heads, ci_heads, e_step, estimate_prior, fit, loss_ac, loss_cd, loss_ci, loss_d, loss_u, predict, train_step,
    ClassPrior, Optimizers, TrainConfig, Variant,
};
use gcldr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(seed: u64) -> BundleConfig {
    BundleConfig { mapping_width: 16, feature_width: 8, seed, ..BundleConfig::new(4, 3, 2) }
}

/// Three well separated Gaussian blobs in four dimensions.
fn blobs(n: usize, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = [[3.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0]];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        x.extend(centres[c].iter().map(|m| m + rng.gen_range(-0.5..0.5)));
        y.push(c);
    }
    Samples { x: Tensor::matrix(n, 4, x).unwrap(), y, domain: None }
}

fn snapshot(b: &ModelBundle, group: Group) -> Vec<Vec<u64>> {
    b.select_group(group).iter().map(|&i| b.params.value(i).data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn losses_on_known_inputs() {
    let b = make_variant(&cfg(0), Variant::Full).unwrap();
    let data = blobs(6, 1);
    let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
    let f = b.forward_features(&mut fwd, &data.x).unwrap();
    let f_ci = f.ci.unwrap();

    // the same head applied to the same features gives the same value through either entry point
    let a = loss_ci(&mut fwd, &b, f_ci, &data.y).unwrap();
    let p = head_forward(&mut fwd, b.r_g_ci.as_ref().unwrap(), f_ci).unwrap();
    let ce = fwd.tape.cross_entropy(p, &data.y).unwrap();
    assert_eq!(fwd.tape.scalar(a), fwd.tape.scalar(ce));

    // L_ac against an independent evaluation of the squared deviation
    let prior = ClassPrior { probs: vec![0.5, 0.3, 0.2] };
    let l = loss_ac(&mut fwd, &b, f_ci, &prior).unwrap();
    let probs = fwd.tape.value(p).clone();
    let mut want = 0.0;
    for i in 0..6 {
        for j in 0..3 {
            want += (probs.at(i, j) - prior.probs[j]).powi(2);
        }
    }
    assert!((fwd.tape.scalar(l) - want / 18.0).abs() < 1e-15);

    // L_d and L_u are the sums over both spaces
    let post = e_step(&mut fwd, &b, &f, &data.y).unwrap();
    let ld = loss_d(&mut fwd, &b, &f, &data.y, &post).unwrap();
    let a = discovery_loss(&mut fwd, &cd_heads(&b).unwrap(), f.cd, &data.y, &post.cd).unwrap();
    let c = discovery_loss(&mut fwd, &ci_heads(&b).unwrap(), f_ci, &data.y, post.ci.as_ref().unwrap()).unwrap();
    assert_eq!(fwd.tape.scalar(ld), fwd.tape.scalar(a) + fwd.tape.scalar(c));
    let lu = loss_u(&mut fwd, &b, &f, &data.y).unwrap();
    let a = elimination_loss(&mut fwd, &cd_heads(&b).unwrap(), f.cd, &data.y).unwrap();
    let c = elimination_loss(&mut fwd, &ci_heads(&b).unwrap(), f_ci, &data.y).unwrap();
    assert_eq!(fwd.tape.scalar(lu), fwd.tape.scalar(a) + fwd.tape.scalar(c));

    // L_d re-evaluated through the term-by-term Q sum in each space
    let mut q = 0.0;
    for (heads, feat, rho) in [(cd_heads(&b).unwrap(), f.cd, &post.cd), (ci_heads(&b).unwrap(), f_ci, post.ci.as_ref().unwrap())] {
        let d = head_forward(&mut fwd, heads.discriminator, feat).unwrap();
        let d = fwd.tape.value(d).clone();
        let local: Vec<Tensor> = heads
            .local
            .iter()
            .map(|h| {
                let p = head_forward(&mut fwd, h, feat).unwrap();
                fwd.tape.value(p).clone()
            })
            .collect();
        q += q_function(rho.values(), &d, &local, &data.y);
    }
    assert!((fwd.tape.scalar(ld) - q).abs() < 1e-12);
}

#[test]
fn loss_ac_two_class_example() {
    // head output (1, 0) against prior (0.5, 0.5): (0.25 + 0.25) / 2 per sample
    let b = make_variant(&BundleConfig { mapping_width: 4, feature_width: 2, ..BundleConfig::new(2, 2, 2) }, Variant::Full).unwrap();
    let mut b = b;
    let ids = b.r_g_ci.as_ref().unwrap().param_ids();
    b.params.value_mut(ids[0]).data_mut().iter_mut().for_each(|v| *v = 0.0);
    b.params.value_mut(ids[1]).data_mut().copy_from_slice(&[800.0, 0.0]);
    let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5]]).unwrap();
    let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
    let f = b.forward_features(&mut fwd, &x).unwrap();
    let l = loss_ac(&mut fwd, &b, f.ci.unwrap(), &ClassPrior::uniform(2)).unwrap();
    assert!((fwd.tape.scalar(l) - 0.25).abs() < 1e-15);
}

#[test]
fn phases_touch_only_their_group() {
    let data = blobs(8, 2);
    for v in [Variant::Full, Variant::SingleSpace, Variant::FeatureBased, Variant::ClassConfuse, Variant::NoUnification, Variant::Meta] {
        let mut b = make_variant(&cfg(3), v).unwrap();
        let tc = TrainConfig { variant: v, learning_rate: 0.01, ..Default::default() };
        let mut opts = Optimizers::new(&b, &tc).unwrap();
        let prior = estimate_prior(&data.y, 3).unwrap();
        let before_h = snapshot(&b, Group::Heads);
        let before_e = snapshot(&b, Group::Extractors);
        // run only a head step by zeroing the extractor learning rate
        let mut head_only = opts.clone();
        head_only.extractors.lr = 0.0;
        let mut probe = b.clone();
        train_step(&mut probe, &data.x, &data.y, &tc, &mut head_only, &prior, 5).unwrap();
        assert_eq!(snapshot(&probe, Group::Extractors), before_e, "{v}: extractors moved in the head phase");
        assert_ne!(snapshot(&probe, Group::Heads), before_h, "{v}: heads did not move");

        let mut extractor_only = opts.clone();
        extractor_only.heads.lr = 0.0;
        let mut probe = b.clone();
        train_step(&mut probe, &data.x, &data.y, &tc, &mut extractor_only, &prior, 5).unwrap();
        assert_eq!(snapshot(&probe, Group::Heads), before_h, "{v}: heads moved in the extractor phase");
        assert_ne!(snapshot(&probe, Group::Extractors), before_e, "{v}: extractors did not move");

        train_step(&mut b, &data.x, &data.y, &tc, &mut opts, &prior, 5).unwrap();
    }
}

#[test]
fn separable_toy_drives_cross_entropy_down() {
    let data = blobs(12, 4);
    let mut b = make_variant(&BundleConfig { dropout: 0.0, ..cfg(4) }, Variant::Full).unwrap();
    let tc = TrainConfig { learning_rate: 1e-2, ..Default::default() };
    let mut opts = Optimizers::new(&b, &tc).unwrap();
    let prior = estimate_prior(&data.y, 3).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..200 {
        last = train_step(&mut b, &data.x, &data.y, &tc, &mut opts, &prior, step).unwrap().l_cd;
    }
    assert!(last < 0.1, "L_cd after 200 steps: {last}");
}

#[test]
fn converged_toy_classifies_its_training_data() {
    let data = blobs(90, 6);
    let b = make_variant(&cfg(6), Variant::Full).unwrap();
    let tc = TrainConfig { epochs: 60, batch_size: 30, learning_rate: 1e-2, ..Default::default() };
    let (b, _) = fit(b, &data, None, &tc).unwrap();
    let p = predict(&b, &data.x).unwrap();
    let hits = p.argmax_rows().iter().zip(&data.y).filter(|(a, b)| a == b).count();
    assert!(hits as f64 / 90.0 >= 0.95, "{hits}/90");
    for i in 0..90 {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(predict(&b, &data.x).unwrap(), p);
}

#[test]
fn fit_is_deterministic_and_records_every_epoch() {
    let data = blobs(30, 7);
    let val = blobs(9, 8);
    let run = || {
        let b = make_variant(&cfg(9), Variant::Full).unwrap();
        fit(b, &data, Some(&val), &TrainConfig { epochs: 4, batch_size: 8, seed: 3, ..Default::default() }).unwrap()
    };
    let (b1, h1) = run();
    let (b2, h2) = run();
    assert_eq!(h1.len(), 4);
    assert_eq!(h1, h2);
    assert_eq!(b1, b2);
    assert!(h1.iter().all(|r| r.val_auc.is_some() && r.val_acc1.is_some()));
}

#[test]
fn meta_with_zero_gamma_follows_the_full_trajectory() {
    let data = blobs(24, 10);
    let val = blobs(9, 11);
    let run = |v: Variant| {
        let b = make_variant(&cfg(12), v).unwrap();
        fit(b, &data, Some(&val), &TrainConfig { variant: v, gamma: 0.0, epochs: 3, batch_size: 8, ..Default::default() }).unwrap()
    };
    let (bf, hf) = run(Variant::Full);
    let (bm, hm) = run(Variant::Meta);
    assert_eq!(bf.params, bm.params);
    for (a, b) in hf.iter().zip(&hm) {
        assert_eq!((a.l_cd, a.l_ci, a.l_ac, a.l_d, a.l_u), (b.l_cd, b.l_ci, b.l_ac, b.l_d, b.l_u));
        assert_eq!(a.val_auc, b.val_auc);
        assert_eq!(b.l_meta, 0.0);
    }
}

#[test]
fn class_confuse_never_evaluates_discovery_or_elimination() {
    let data = blobs(8, 13);
    let mut b = make_variant(&cfg(1), Variant::ClassConfuse).unwrap();
    assert!(b.local_cd.is_empty() && b.d_cd.is_none() && b.d_ci.is_none());
    let tc = TrainConfig { variant: Variant::ClassConfuse, ..Default::default() };
    let mut opts = Optimizers::new(&b, &tc).unwrap();
    let rep = train_step(&mut b, &data.x, &data.y, &tc, &mut opts, &ClassPrior::uniform(3), 0).unwrap();
    assert_eq!((rep.l_d, rep.l_u), (0.0, 0.0));
    assert!(rep.l_ac > 0.0 && rep.l_ci > 0.0);
}

#[test]
fn variant_bundles_have_the_right_parts() {
    let single = make_variant(&cfg(0), Variant::SingleSpace).unwrap();
    assert!(single.g_ci.is_none() && single.r_g_ci.is_none() && single.local_ci.is_empty() && single.d_ci.is_none());
    let no_uni = make_variant(&cfg(0), Variant::NoUnification).unwrap();
    assert!(no_uni.r_g_cd.is_none() && no_uni.g_ci.is_none() && no_uni.r_g_ci.is_none());
    assert_eq!(no_uni.local_cd.len(), 2);
    let x = blobs(5, 0).x;
    assert!(predict(&no_uni, &x).is_err());
    let p = predict_variant(&no_uni, Variant::NoUnification, &x).unwrap();
    assert!((0..5).all(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12));
    let fb = make_variant(&cfg(0), Variant::FeatureBased).unwrap();
    assert!(fb.local_cd.is_empty() && fb.local_ci.is_empty() && fb.d_cd.is_some() && fb.d_ci.is_some());
}

#[test]
fn fit_rejects_mismatched_bundle_and_nan() {
    let data = blobs(8, 0);
    let b = make_variant(&cfg(0), Variant::Direct).unwrap();
    assert!(fit(b, &data, None, &TrainConfig { epochs: 1, ..Default::default() }).is_err());

    let mut bad = data.clone();
    bad.x.data_mut()[0] = f64::NAN;
    let b = make_variant(&cfg(0), Variant::Direct).unwrap();
    let err = fit(b, &bad, None, &TrainConfig { variant: Variant::Direct, epochs: 1, ..Default::default() }).unwrap_err();
    assert!(matches!(err, gcldr_core::GcldrError::Divergence { .. }), "{err:?}");
}

#[test]
fn prior_is_order_invariant() {
    let mut y = vec![0, 1, 1, 2, 2, 2];
    let a = estimate_prior(&y, 3).unwrap();
    y.reverse();
    assert_eq!(estimate_prior(&y, 3).unwrap(), a);
}

#[test]
fn cross_entropy_of_uniform_prediction_is_ln_c() {
    let mut b = make_variant(&BundleConfig { mapping_width: 4, feature_width: 2, ..BundleConfig::new(2, 4, 2) }, Variant::Full).unwrap();
    for id in b.r_g_ci.as_ref().unwrap().param_ids() {
        b.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.4, 0.9]]).unwrap();
    let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
    let f = b.forward_features(&mut fwd, &x).unwrap();
    let l = loss_ci(&mut fwd, &b, f.ci.unwrap(), &[0, 3]).unwrap();
    assert!((fwd.tape.scalar(l) - 4f64.ln()).abs() < 1e-15);
    let c = loss_cd(&mut fwd, &b, f.cd, &[0, 3]).unwrap();
    assert!(fwd.tape.scalar(c).is_finite());
}
