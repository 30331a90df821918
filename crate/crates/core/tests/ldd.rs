use gcldr_core::autodiff::{finite_diff_check, Mode};
use gcldr_core::ldd::{
    compute_posteriors, discovery_loss, elimination_loss, local_likelihood, posterior_from_parts, q_function,
    soft_domain_loss, LddHeads, Space,
};
use gcldr_core::model::{build_bundle, head_forward, BundleConfig, Forward, ModelBundle, Trainable};
use gcldr_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle(seed: u64) -> ModelBundle {
    build_bundle(&BundleConfig { mapping_width: 16, feature_width: 8, seed, ..BundleConfig::new(8, 3, 2) }).unwrap()
}

fn batch(seed: u64, b: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::matrix(b, 8, (0..b * 8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let y = (0..b).map(|_| rng.gen_range(0..3)).collect();
    (x, y)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn local_likelihood_matches_softmax_then_index() {
    let b = bundle(4);
    let (x, y) = batch(4, 5);
    let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
    let f = b.forward_features(&mut fwd, &x).unwrap();
    let heads = LddHeads::new(&b.local_cd, b.d_cd.as_ref().unwrap()).unwrap();
    let lik = local_likelihood(&mut fwd, &heads, f.cd, &y).unwrap();
    let lik = fwd.tape.value(lik).clone();

    // recompute each head by hand from its weights
    let feats = fwd.tape.value(f.cd).clone();
    for (r, head) in b.local_cd.iter().enumerate() {
        let ids = head.param_ids();
        let (w, bias) = (b.params.value(ids[0]), b.params.value(ids[1]));
        for i in 0..5 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..8).map(|q| feats.at(i, q) * w.at(q, j)).sum::<f64>() + bias.data()[j])
                .collect();
            let p = softmax(&logits)[y[i]];
            assert!((lik.at(i, r) - p).abs() < 1e-14, "{} vs {p}", lik.at(i, r));
        }
    }
}

#[test]
fn discovery_loss_equals_q_function() {
    for seed in 0..20 {
        let b = bundle(seed);
        let (x, y) = batch(100 + seed, 6);
        let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
        let f = b.forward_features(&mut fwd, &x).unwrap();
        let heads = LddHeads::new(&b.local_cd, b.d_cd.as_ref().unwrap()).unwrap();
        let rho = compute_posteriors(&mut fwd, &heads, f.cd, &y, Space::ClassDependent).unwrap();
        let ld = discovery_loss(&mut fwd, &heads, f.cd, &y, &rho).unwrap();
        let d = head_forward(&mut fwd, b.d_cd.as_ref().unwrap(), f.cd).unwrap();
        let local: Vec<Tensor> = b
            .local_cd
            .iter()
            .map(|h| {
                let p = head_forward(&mut fwd, h, f.cd).unwrap();
                fwd.tape.value(p).clone()
            })
            .collect();
        let q = q_function(rho.values(), fwd.tape.value(d), &local, &y);
        assert!((fwd.tape.scalar(ld) - q).abs() <= 1e-9, "seed {seed}");
    }
}

#[test]
fn uniform_everything_gives_two_ln2() {
    let rho = Tensor::full(&[4, 2], 0.5);
    let q = q_function(&rho, &Tensor::full(&[4, 2], 0.5), &[Tensor::full(&[4, 2], 0.5), Tensor::full(&[4, 2], 0.5)], &[0, 1, 0, 1]);
    assert!((q - 2.0 * 2f64.ln()).abs() < 1e-15);
}

#[test]
fn log_space_posterior_matches_naive_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let disc = Tensor::matrix(1, 3, softmax(&[rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])).unwrap();
        let lik = Tensor::matrix(1, 3, (0..3).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
        let rho = posterior_from_parts(&disc, &lik, Space::ClassDependent).unwrap();
        let joint: Vec<f64> = (0..3).map(|r| disc.at(0, r) * lik.at(0, r)).collect();
        let z: f64 = joint.iter().sum();
        for r in 0..3 {
            assert!((rho.values().at(0, r) - joint[r] / z).abs() <= 1e-9);
        }
    }
}

fn gradient_check(which: &str) {
    for seed in 0..5 {
        let b = bundle(seed);
        let (x, y) = batch(50 + seed, 4);
        let heads = LddHeads::new(&b.local_cd, b.d_cd.as_ref().unwrap()).unwrap();
        let rho = {
            let mut fwd = Forward::new(&b, Mode::Train, Trainable::Nothing, seed);
            let f = b.forward_features(&mut fwd, &x).unwrap();
            compute_posteriors(&mut fwd, &heads, f.cd, &y, Space::ClassDependent).unwrap()
        };
        let ids = b.params.all_ids();
        let eval = |fwd: &mut Forward<'_>| {
            let f = b.forward_features(fwd, &x).unwrap();
            match which {
                "discovery" => discovery_loss(fwd, &heads, f.cd, &y, &rho).unwrap(),
                "elimination" => elimination_loss(fwd, &heads, f.cd, &y).unwrap(),
                _ => soft_domain_loss(fwd, &heads, f.cd, &y, &rho, 1).unwrap(),
            }
        };
        let analytic = {
            let mut fwd = Forward::new(&b, Mode::Train, Trainable::All, seed);
            let l = eval(&mut fwd);
            let g = fwd.tape.backward(l).unwrap();
            fwd.param_grads(&g, &ids)
        };
        let values: Vec<Tensor> = ids.iter().map(|&i| b.params.value(i).clone()).collect();
        let mut store = b.params.clone();
        let res = finite_diff_check(&values, &analytic, 1e-5, |ps| {
            for (&i, v) in ids.iter().zip(ps) {
                *store.value_mut(i) = v.clone();
            }
            let mut fwd = Forward::with_params(&b, &store, Mode::Train, Trainable::Nothing, seed);
            let l = eval(&mut fwd);
            Ok(fwd.tape.scalar(l))
        })
        .unwrap();
        assert!(res.passes(1e-4), "{which} seed {seed}: {}", res.max_rel_error);
    }
}

#[test]
fn discovery_gradient_matches_finite_differences() {
    gradient_check("discovery");
}

#[test]
fn elimination_gradient_matches_finite_differences() {
    gradient_check("elimination");
}

#[test]
fn soft_loss_gradient_matches_finite_differences() {
    gradient_check("soft");
}

#[test]
fn elimination_is_zero_for_identical_heads_and_uniform_discriminator() {
    let mut b = bundle(1);
    let src = b.local_cd[0].param_ids();
    let dst = b.local_cd[1].param_ids();
    for (s, d) in src.iter().zip(&dst) {
        *b.params.value_mut(*d) = b.params.value(*s).clone();
    }
    for id in b.d_cd.as_ref().unwrap().param_ids() {
        b.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (x, y) = batch(3, 6);
    let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
    let f = b.forward_features(&mut fwd, &x).unwrap();
    let heads = LddHeads::new(&b.local_cd, b.d_cd.as_ref().unwrap()).unwrap();
    let l = elimination_loss(&mut fwd, &heads, f.cd, &y).unwrap();
    assert!(fwd.tape.scalar(l).abs() < 1e-30);
    let rho = compute_posteriors(&mut fwd, &heads, f.cd, &y, Space::ClassDependent).unwrap();
    assert!(rho.values().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

fn rows_of(data: Vec<f64>, k: usize) -> Tensor {
    Tensor::matrix(data.len() / k, k, data).unwrap()
}

proptest! {
    #[test]
    fn posterior_rows_sum_to_one_for_extreme_logits(
        logits in prop::collection::vec(-50.0f64..50.0, 12),
        lik_logits in prop::collection::vec(-50.0f64..50.0, 12),
    ) {
        let k = 3;
        let disc: Vec<f64> = logits.chunks(k).flat_map(softmax).collect();
        let lik: Vec<f64> = lik_logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        let rho = posterior_from_parts(&rows_of(disc, k), &rows_of(lik, k), Space::ClassIndependent).unwrap();
        for i in 0..rho.rows() {
            let s: f64 = rho.values().row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(rho.values().row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn posterior_ignores_row_scaling_of_likelihoods(
        lik in prop::collection::vec(0.01f64..1.0, 8),
        disc_logits in prop::collection::vec(-4.0f64..4.0, 8),
        scale in 0.01f64..1.0,
    ) {
        let disc = rows_of(disc_logits.chunks(2).flat_map(softmax).collect(), 2);
        let a = posterior_from_parts(&disc, &rows_of(lik.clone(), 2), Space::ClassDependent).unwrap();
        let b = posterior_from_parts(&disc, &rows_of(lik.iter().map(|v| v * scale).collect(), 2), Space::ClassDependent).unwrap();
        for (p, q) in a.values().data().iter().zip(b.values().data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn elimination_loss_is_nonnegative_and_bounded(seed in 0u64..1000) {
        let b = bundle(seed % 7);
        let (x, y) = batch(seed, 5);
        let mut fwd = Forward::new(&b, Mode::Infer, Trainable::Nothing, 0);
        let f = b.forward_features(&mut fwd, &x).unwrap();
        let heads = LddHeads::new(&b.local_cd, b.d_cd.as_ref().unwrap()).unwrap();
        let l = elimination_loss(&mut fwd, &heads, f.cd, &y).unwrap();
        let v = fwd.tape.scalar(l);
        prop_assert!((0.0..=0.5 + 1e-12).contains(&v));
    }
}
