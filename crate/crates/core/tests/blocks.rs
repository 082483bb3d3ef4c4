use ctnet::blocks::checkpoint;
use ctnet::blocks::{
    class_feature_matrix, Ccm, ClassActivation, CtNet, Ctx, FusionHead, Init, Mce, NetworkConfig, NonLocal,
    ParamStore, Scm, Variant,
};
use ctnet::tensor::{Graph, PoolMode, Scalar, Tensor};
use ctnet::{Error, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{mce_oracle, nonlocal_oracle, rand_t, scm_oracle, vals};

/// Runs `f` with a fresh graph bound to `store`.
fn run<T: Scalar, R>(store: &ParamStore<T>, train: bool, f: impl FnOnce(&mut Ctx<'_, T>) -> R) -> (Graph<T>, R) {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let r = {
        let mut cx = Ctx::new(&mut g, store, &bound, train);
        f(&mut cx)
    };
    (g, r)
}

// ----- channel excitation -----------------------------------------------------------

fn make_mce(channels: usize, kernels: &[usize], seed: u64) -> (ParamStore<f64>, Mce) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mce = Mce::new(&mut store, &mut Init { rng: &mut rng }, "mce", channels, kernels, PoolMode::Avg).unwrap();
    (store, mce)
}

#[test]
fn mce_with_zero_fusion_gives_half_everywhere() {
    let (mut store, mce) = make_mce(8, &[3, 5], 1);
    *store.get_mut(mce.fuse_w) = Tensor::zeros(&[2, 1]);
    *store.get_mut(mce.fuse_b) = Tensor::zeros(&[8]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f64> = rand_t(&mut rng, &[2, 8, 3, 3]);
    let (g, out) = run(&store, false, |cx| {
        let v = cx.g.constant(x);
        mce.forward(cx, v).unwrap()
    });
    assert!(g.value(out).data().iter().all(|&v| v == 0.5));
}

#[test]
fn mce_matches_composition_oracle() {
    let (c, h, w) = (12, 3, 4);
    let (store, mce) = make_mce(c, &[3, 5, 9, 17], 3);
    // 17 exceeds 12 channels and is clipped to 11
    assert_eq!(mce.kernels, vec![3, 5, 9, 11]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f64> = rand_t(&mut rng, &[2, c, h, w]);
    let (g, out) = run(&store, false, |cx| {
        let v = cx.g.constant(x.clone());
        mce.forward(cx, v).unwrap()
    });
    let want = mce_oracle(&store, &mce, &x);
    for (i, (got, want)) in g.value(out).data().iter().zip(&want).enumerate() {
        assert!((got - want).abs() < 1e-12, "b={} ch={}", i / c, i % c);
    }
}

#[test]
fn mce_rejects_fewer_than_three_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let err = Mce::new(&mut store, &mut Init { rng: &mut rng }, "mce", 2, &[3], PoolMode::Avg).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }));
}

// ----- channel context module -------------------------------------------------------

fn make_ccm(c: usize, n: usize, seed: u64) -> (ParamStore<f64>, Ccm) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ccm = Ccm::new(
        &mut store,
        &mut Init { rng: &mut rng },
        "ccm",
        c,
        n,
        &[3, 5],
        PoolMode::Avg,
        ClassActivation::Sigmoid,
    )
    .unwrap();
    (store, ccm)
}

#[test]
fn unit_gate_leaves_features_unchanged() {
    let (store, ccm) = make_ccm(6, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Tensor<f64> = rand_t(&mut rng, &[2, 6, 4, 4]);
    let (g, out) = run(&store, false, |cx| {
        let v = cx.g.constant(x.clone());
        let gate = cx.g.constant(Tensor::ones(&[2, 6]));
        ccm.forward_with_gate(cx, v, gate).unwrap()
    });
    assert_eq!(g.value(out.x_c), &x);
}

#[test]
fn basis_vectors_give_single_entry_class_matrix() {
    let store = ParamStore::<f64>::new();
    let (g, m) = run(&store, false, |cx| {
        let c_m = cx.g.constant(Tensor::from_fn(&[1, 4], |i| if i == 1 { 1.0 } else { 0.0 }));
        let p_p = cx.g.constant(Tensor::from_fn(&[1, 3], |i| if i == 2 { 1.0 } else { 0.0 }));
        class_feature_matrix(cx, c_m, p_p).unwrap()
    });
    let m = g.value(m);
    assert_eq!(m.shape(), &[1, 4, 3]);
    for (i, &v) in m.data().iter().enumerate() {
        assert_eq!(v, if i == 3 + 2 { 1.0 } else { 0.0 });
    }
}

#[test]
fn class_matrix_columns_are_scaled_gates() {
    let (store, ccm) = make_ccm(8, 5, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Tensor<f64> = rand_t(&mut rng, &[3, 8, 2, 2]);
    let (g, out) = run(&store, false, |cx| {
        let v = cx.g.constant(x);
        ccm.forward(cx, v).unwrap()
    });
    let (c_m, p_p, m) = (g.value(out.c_m), g.value(out.p_p), g.value(out.m));
    for b in 0..3 {
        for ch in 0..8 {
            let cv = c_m.data()[b * 8 + ch];
            assert!(cv > 0.0 && cv < 1.0);
            for j in 0..5 {
                let pj = p_p.data()[b * 5 + j];
                assert!(pj > 0.0 && pj < 1.0);
                assert!((m.data()[(b * 8 + ch) * 5 + j] - pj * cv).abs() < 1e-12);
            }
        }
    }
}

// ----- spatial context module -------------------------------------------------------

fn make_scm<T: Scalar>(c: usize, r: usize, seed: u64) -> (ParamStore<T>, Scm) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let scm = Scm::new(&mut store, &mut Init { rng: &mut rng }, "scm", c, r).unwrap();
    // Non-trivial normalisation statistics so the oracle checks them too.
    let mean = rand_t(&mut rng, &[c]);
    let var: Tensor<T> = rand_t::<T>(&mut rng, &[c]).map(|v| v * v + T::from_f64(0.5));
    let gamma = rand_t(&mut rng, &[c]);
    let beta = rand_t(&mut rng, &[c]);
    *store.get_mut(scm.rho.norm.running_mean) = mean;
    *store.get_mut(scm.rho.norm.running_var) = var;
    *store.get_mut(scm.rho.norm.gamma) = gamma;
    *store.get_mut(scm.rho.norm.beta) = beta;
    *store.get_mut(scm.rho.norm.tracked) = Tensor::ones(&[1]);
    (store, scm)
}

fn scm_eval<T: Scalar>(store: &ParamStore<T>, scm: &Scm, x: &Tensor<T>, m: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (g, out) = run(store, false, |cx| {
        let xv = cx.g.constant(x.clone());
        let mv = cx.g.constant(m.clone());
        scm.forward(cx, xv, mv).unwrap()
    });
    (g.value(out.x_s).clone(), g.value(out.affinity).clone())
}

#[test]
fn scm_matches_double_loop_oracle_in_f32() {
    let (store, scm) = make_scm::<f32>(8, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_t(&mut rng, &[1, 8, 4, 4]);
    let m = rand_t(&mut rng, &[1, 8, 3]);
    let (x_s, aff) = scm_eval(&store, &scm, &x, &m);
    let (want, want_aff) = scm_oracle(&store, &scm, &x, &m);
    for (a, b) in vals(&x_s).iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    for (a, b) in vals(&aff).iter().zip(&want_aff) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn scm_matches_oracle_up_to_sixteen_channels() {
    let (store, scm) = make_scm::<f64>(16, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_t(&mut rng, &[2, 16, 8, 8]);
    let m = rand_t(&mut rng, &[2, 16, 8]);
    let (x_s, _) = scm_eval(&store, &scm, &x, &m);
    let (want, _) = scm_oracle(&store, &scm, &x, &m);
    for (a, b) in vals(&x_s).iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn scm_affinity_rows_are_stochastic() {
    let (store, scm) = make_scm::<f32>(8, 4, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x: Tensor<f32> = rand_t::<f32>(&mut rng, &[2, 8, 4, 4]).map(|v| v * 20.0);
    let m = rand_t(&mut rng, &[2, 8, 5]);
    let (_, aff) = scm_eval(&store, &scm, &x, &m);
    for row in aff.data().chunks(5) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn single_category_attention_is_spatially_constant() {
    let (store, scm) = make_scm::<f64>(8, 2, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_t(&mut rng, &[1, 8, 3, 3]);
    let m = rand_t(&mut rng, &[1, 8, 1]);
    let (x_s, aff) = scm_eval(&store, &scm, &x, &m);
    assert!(aff.data().iter().all(|&v| v == 1.0));
    for plane in x_s.data().chunks(9) {
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
    }
}

#[test]
fn scm_rejects_indivisible_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    assert!(Scm::new(&mut store, &mut Init { rng: &mut rng }, "scm", 10, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn scm_commutes_with_pixel_permutation(seed in 0u64..10_000, perm_seed in 0u64..10_000) {
        let (store, scm) = make_scm::<f64>(8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = rand_t(&mut rng, &[1, 8, 3, 4]);
        let m = rand_t(&mut rng, &[1, 8, 4]);
        let mut perm: Vec<usize> = (0..12).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..12).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[(i / 12) * 12 + perm[i % 12]]);
        let (a, _) = scm_eval(&store, &scm, &permute(&x), &m);
        let (b, _) = scm_eval(&store, &scm, &x, &m);
        for (u, v) in a.data().iter().zip(permute(&b).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_and_probabilities_stay_in_open_interval(seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let (store, ccm) = make_ccm(8, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = rand_t::<f64>(&mut rng, &[1, 8, 2, 2]).map(|v| v * scale);
        let (g, out) = run(&store, false, |cx| {
            let v = cx.g.constant(x);
            ccm.forward(cx, v).unwrap()
        });
        prop_assert!(g.value(out.c_m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(g.value(out.p_p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

// ----- non-local baseline ---------------------------------------------------------------

fn make_nonlocal(c: usize, r: usize, seed: u64) -> (ParamStore<f64>, NonLocal) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let nl = NonLocal::new(&mut store, &mut Init { rng: &mut rng }, "nl", c, r).unwrap();
    (store, nl)
}

fn nonlocal_eval(store: &ParamStore<f64>, nl: &NonLocal, x: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>), TensorError> {
    let (g, out) = run(store, false, |cx| {
        let v = cx.g.constant(x.clone());
        nl.forward(cx, v)
    });
    let out = out?;
    Ok((g.value(out.y).clone(), g.value(out.affinity).clone()))
}

#[test]
fn nonlocal_matches_double_loop_oracle() {
    let (store, nl) = make_nonlocal(16, 4, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (c, hw) = (16, 64);
    let x = rand_t(&mut rng, &[1, c, 8, 8]);
    let (y, aff) = nonlocal_eval(&store, &nl, &x).unwrap();
    let (want_y, want_aff) = nonlocal_oracle(&store, &nl, &x);
    for row in aff.data().chunks(hw) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for (a, b) in aff.data().iter().zip(&want_aff) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in y.data().iter().zip(&want_y) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn nonlocal_single_pixel_adds_projected_value() {
    let (store, nl) = make_nonlocal(8, 2, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_t(&mut rng, &[1, 8, 1, 1]);
    let (y, aff) = nonlocal_eval(&store, &nl, &x).unwrap();
    assert_eq!(aff.data(), &[1.0]);
    let p = |id| vals(store.get(id));
    let (wg, bg) = (p(nl.value.weight), p(nl.value.bias.unwrap()));
    let (wo, bo) = (p(nl.out.weight), p(nl.out.bias.unwrap()));
    let v: Vec<f64> = (0..4).map(|q| bg[q] + (0..8).map(|c| wg[q * 8 + c] * x.data()[c]).sum::<f64>()).collect();
    for c in 0..8 {
        let want = x.data()[c] + bo[c] + (0..4).map(|q| wo[c * 4 + q] * v[q]).sum::<f64>();
        assert!((y.data()[c] - want).abs() < 1e-12);
    }
}

#[test]
fn nonlocal_refuses_inputs_over_the_pixel_cap() {
    let (store, mut nl) = make_nonlocal(4, 2, 21);
    nl.pixel_cap = 15;
    let err = nonlocal_eval(&store, &nl, &Tensor::zeros(&[1, 4, 4, 4])).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }), "{err}");
}

// ----- fusion head ------------------------------------------------------------------

#[test]
fn fusion_head_shape_and_zero_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::<f64>::new();
    let head = FusionHead::new(&mut store, &mut Init { rng: &mut rng }, "head", 8, 5, true);
    let x_c = rand_t(&mut rng, &[2, 8, 3, 6]);
    let x_s = rand_t(&mut rng, &[2, 8, 3, 6]);
    let logits = |store: &ParamStore<f64>| {
        let (g, y) = run(store, true, |cx| {
            let a = cx.g.constant(x_c.clone());
            let b = cx.g.constant(x_s.clone());
            head.forward(cx, a, Some(b)).unwrap()
        });
        g.value(y).clone()
    };
    assert_eq!(logits(&store).shape(), &[2, 5, 3, 6]);
    *store.get_mut(head.classifier.weight) = Tensor::zeros(&[5, 8, 1, 1]);
    *store.get_mut(head.classifier.bias.unwrap()) = Tensor::zeros(&[5]);
    let z = logits(&store);
    assert!(z.data().iter().all(|&v| v == 0.0));
    let mut g = Graph::new();
    let v = g.constant(z);
    let p = g.softmax(v, 1).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

// ----- full network -------------------------------------------------------------------

#[test]
fn every_variant_produces_full_resolution_logits_deterministically() {
    for variant in Variant::ALL {
        let mut cfg = NetworkConfig::new(variant, 16, 4);
        cfg.seed = 3;
        let a = CtNet::<f32>::new(cfg.clone()).unwrap();
        let b = CtNet::<f32>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_t(&mut rng, &[2, 3, 16, 24]);
        let pa = a.predict(&img).unwrap();
        let pb = b.predict(&img).unwrap();
        assert_eq!(pa.main.shape(), &[2, 4, 16, 24], "{variant}");
        assert_eq!(pa.aux.shape(), &[2, 4, 16, 24]);
        assert_eq!(pa.main, pb.main, "{variant}");
        assert_eq!(pa.p_p.is_some(), variant.has_ccm());
    }
}

#[test]
fn indivisible_input_is_rejected_before_compute() {
    let net = CtNet::<f32>::new(NetworkConfig::new(Variant::Ctnet, 8, 3)).unwrap();
    let err = net.predict(&Tensor::zeros(&[1, 3, 12, 16])).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }), "{err}");
}

#[test]
fn prediction_does_not_modify_the_network() {
    let net = CtNet::<f32>::new(NetworkConfig::new(Variant::Ctnet, 8, 3)).unwrap();
    let before = net.store().checksum();
    net.predict(&Tensor::full(&[1, 3, 8, 8], 0.5)).unwrap();
    assert_eq!(net.store().checksum(), before);
}

#[test]
fn oversized_kernels_are_clipped_at_desk_scale() {
    let net = CtNet::<f32>::new(NetworkConfig::new(Variant::Ctnet, 64, 4)).unwrap();
    assert_eq!(net.mce_kernels(), vec![9, 17, 33, 63]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = NetworkConfig::new(Variant::Ctnet, 16, 4);
    cfg.stage_strides = vec![2, 2, 1, 1];
    assert!(CtNet::<f32>::new(cfg).is_err());
    let mut cfg = NetworkConfig::new(Variant::Ctnet, 16, 4);
    cfg.reduction = 3;
    assert!(CtNet::<f32>::new(cfg).is_err());
    let mut cfg = NetworkConfig::new(Variant::Ctnet, 16, 4);
    cfg.aux_tap = 4;
    assert!(CtNet::<f32>::new(cfg).is_err());
}

// ----- checkpoint container ------------------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = NetworkConfig::new(Variant::Panet, 16, 4);
    cfg.seed = 9;
    let net = CtNet::<f32>::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ctnt");
    checkpoint::save(net.store(), &path).unwrap();
    cfg.seed = 10;
    let mut other = CtNet::<f32>::new(cfg).unwrap();
    assert_ne!(other.store().checksum(), net.store().checksum());
    checkpoint::load(other.store_mut(), &path).unwrap();
    for ((_, n1, _, a), (_, n2, _, b)) in net.store().iter().zip(other.store().iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"CTNT");
    assert_eq!(checkpoint::encode(&checkpoint::decode(&bytes).unwrap()), bytes);
}

#[test]
fn damaged_checkpoints_are_reported() {
    let entries = vec![("a".to_string(), Tensor::<f32>::from_fn(&[2, 3], |i| i as f32))];
    let bytes = checkpoint::encode(&entries);
    for cut in [0, 3, 10, bytes.len() - 1] {
        assert!(matches!(checkpoint::decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let a = CtNet::<f32>::new(NetworkConfig::new(Variant::Ctnet, 16, 4)).unwrap();
    let mut b = CtNet::<f32>::new(NetworkConfig::new(Variant::Occm, 16, 4)).unwrap();
    let err = checkpoint::restore(b.store_mut(), checkpoint::entries_of(a.store())).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}
