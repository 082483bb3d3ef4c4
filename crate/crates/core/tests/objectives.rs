use ctnet::blocks::{CtNet, NetworkConfig, Variant};
use ctnet::objectives::{
    cp_loss, objective, seg_loss, target_class_probability, total_loss, ConfusionMatrix, LossWeights,
    ObjectiveConfig, IGNORE_LABEL,
};
use ctnet::tensor::gradcheck::{gradcheck, GradcheckConfig};
use ctnet::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{cp_loss_oracle, metrics_oracle, seg_loss_oracle};

fn seg(logits: Tensor<f64>, mask: &[u8]) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(logits);
    let l = seg_loss(&mut g, v, mask, IGNORE_LABEL).unwrap();
    g.value(l.loss).item()
}

fn cp(p: &[f64], t: &[f64], omega: f64) -> f64 {
    let n = p.len();
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_f64(&[n], p).unwrap());
    let l = cp_loss(&mut g, v, &Tensor::from_f64(&[n], t).unwrap(), omega).unwrap();
    g.value(l).item()
}

// ----- segmentation loss ---------------------------------------------------------------

#[test]
fn uniform_logits_give_log_n() {
    let mask = [0u8, 3, 2, 1, 1, 0];
    let l = seg(Tensor::zeros(&[1, 5, 2, 3]), &mask);
    assert!((l - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn saturated_correct_logits_give_tiny_loss() {
    let mask = [0u8, 1, 2, 1];
    let logits = Tensor::from_fn(&[1, 3, 2, 2], |i| if (i / 4) as u8 == mask[i % 4] { 10.0 } else { -10.0 });
    assert!(seg(logits, &mask) < 1e-4);
}

#[test]
fn seg_loss_matches_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, n, hw) = (2, 4, 6);
    let logits = Tensor::from_fn(&[b, n, 2, 3], |_| rng.random_range(-3.0..3.0));
    let mask: Vec<u8> = (0..b * hw)
        .map(|_| if rng.random_bool(0.2) { IGNORE_LABEL } else { rng.random_range(0..n as u8) })
        .collect();
    let want = seg_loss_oracle(&logits, &mask, IGNORE_LABEL);
    assert!((seg(logits, &mask) - want).abs() < 1e-10);
}

#[test]
fn fully_ignored_mask_gives_zero_with_flag() {
    let mut g = Graph::<f64>::new();
    let v = g.param(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64));
    let l = seg_loss(&mut g, v, &[IGNORE_LABEL; 4], IGNORE_LABEL).unwrap();
    assert!(l.all_ignored);
    assert_eq!(g.value(l.loss).item(), 0.0);
    g.backward(l.loss).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 0.0));
}

#[test]
fn seg_loss_decreases_as_correct_logits_grow() {
    let mask = [0u8, 1, 2, 0];
    let mut prev = f64::INFINITY;
    for k in 1..20 {
        let s = k as f64 * 0.5;
        let logits = Tensor::from_fn(&[1, 3, 2, 2], |i| if (i / 4) as u8 == mask[i % 4] { s } else { 0.0 });
        let l = seg(logits, &mask);
        assert!(l < prev);
        prev = l;
    }
}

// ----- class probability target ----------------------------------------------------------

#[test]
fn target_probability_hand_values() {
    let t = target_class_probability(&[0, 0, 1, 2], 3, IGNORE_LABEL).unwrap();
    assert_eq!(t.p, vec![0.5, 0.25, 0.25]);
    let t = target_class_probability(&[2; 9], 4, IGNORE_LABEL).unwrap();
    assert_eq!(t.p, vec![0.0, 0.0, 1.0, 0.0]);
    let t = target_class_probability(&[IGNORE_LABEL; 3], 2, IGNORE_LABEL).unwrap();
    assert!(t.empty);
    assert_eq!(t.p, vec![0.0, 0.0]);
}

proptest! {
    #[test]
    fn target_probability_matches_counts(mask in prop::collection::vec(prop_oneof![0u8..5, Just(IGNORE_LABEL)], 1..200)) {
        let t = target_class_probability(&mask, 5, IGNORE_LABEL).unwrap();
        let labelled = mask.iter().filter(|&&l| l != IGNORE_LABEL).count();
        for c in 0..5u8 {
            let count = mask.iter().filter(|&&l| l == c).count();
            let want = if labelled == 0 { 0.0 } else { count as f64 / labelled as f64 };
            prop_assert_eq!(t.p[c as usize], want);
        }
        if labelled > 0 {
            prop_assert!((t.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cp_loss_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 1..10), t in prop::collection::vec(0.0f64..=1.0, 10)) {
        let t = &t[..p.len()];
        prop_assert!(cp(&p, t, 1.0) >= 0.0);
    }

    #[test]
    fn total_loss_is_linear(l in -5.0f64..5.0, a in -5.0f64..5.0, c in -5.0f64..5.0, alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let w = LossWeights { alpha, beta };
        let mut g = Graph::<f64>::new();
        let (vl, va, vc) = (g.constant(Tensor::scalar(l)), g.constant(Tensor::scalar(a)), g.constant(Tensor::scalar(c)));
        let t = total_loss(&mut g, vl, va, Some(vc), w).unwrap();
        prop_assert!((g.value(t).item() - (l + alpha * a + beta * c)).abs() < 1e-12);
        prop_assert!((w.combine(l + 1.0, a, c) - w.combine(l, a, c) - 1.0).abs() < 1e-12);
        prop_assert!((w.combine(l, a + 1.0, c) - w.combine(l, a, c) - alpha).abs() < 1e-12);
        prop_assert!((w.combine(l, a, c + 1.0) - w.combine(l, a, c) - beta).abs() < 1e-12);
    }
}

// ----- class probability loss -------------------------------------------------------------

#[test]
fn cp_loss_hand_values() {
    let ln2 = 2f64.ln();
    assert!((cp(&[0.5; 3], &[0.5; 3], 1.0) - ln2).abs() < 1e-12);
    assert!((cp(&[0.5], &[0.0], 1.0) - ln2).abs() < 1e-12);
    assert!((cp(&[0.5], &[0.0], 2.0) - 2.0 * ln2).abs() < 1e-12);
}

#[test]
fn cp_loss_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..0.99)).collect();
    let t: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
    let want = cp_loss_oracle(&p, &t, 0.7);
    assert!((cp(&p, &t, 0.7) - want).abs() < 1e-12);
}

#[test]
fn cp_loss_clamps_saturated_probabilities() {
    let l = cp(&[0.0, 1.0], &[0.0, 1.0], 1.0);
    assert!(l.is_finite());
    assert!(l > 0.0 && l < 1e-6);
    let l = cp(&[0.0], &[1.0], 1.0);
    assert!((l + (1e-7f64).ln()).abs() < 1e-9);
}

#[test]
fn total_loss_defaults() {
    let w = LossWeights::default();
    assert!((w.combine(1.0, 1.0, 1.0) - 1.4).abs() < 1e-15);
    let no_cp = LossWeights { beta: 0.0, ..w };
    assert_eq!(no_cp.combine(2.0, 3.0, 100.0), 2.0 + 0.3 * 3.0);
}

// ----- metrics -------------------------------------------------------------------

#[test]
fn perfect_prediction_scores_one() {
    let mut cm = ConfusionMatrix::new(3);
    let gt = [0u8, 1, 2, 2, 1, IGNORE_LABEL];
    cm.add(&gt, &[0, 1, 2, 2, 1, 0], IGNORE_LABEL).unwrap();
    let m = cm.metrics();
    assert_eq!((m.miou, m.pix_acc), (1.0, 1.0));
    assert_eq!(cm.total(), 5);
}

#[test]
fn all_background_prediction_on_balanced_mask() {
    let mut cm = ConfusionMatrix::new(2);
    cm.add(&[0, 0, 1, 1], &[0, 0, 0, 0], IGNORE_LABEL).unwrap();
    let m = cm.metrics();
    assert_eq!(m.iou, vec![Some(0.5), Some(0.0)]);
    assert_eq!(m.miou, 0.25);
    assert_eq!(m.pix_acc, 0.5);
}

#[test]
fn absent_classes_are_excluded() {
    let mut cm = ConfusionMatrix::new(4);
    cm.add(&[0, 1], &[0, 1], IGNORE_LABEL).unwrap();
    let m = cm.metrics();
    assert_eq!(m.iou[2], None);
    assert_eq!(m.miou, 1.0);
}

proptest! {
    #[test]
    fn metrics_match_set_arithmetic(
        pairs in prop::collection::vec((prop_oneof![0u8..4, Just(IGNORE_LABEL)], 0u8..4), 1..120)
    ) {
        let gt: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&gt, &pred, IGNORE_LABEL).unwrap();
        let m = cm.metrics();
        let want = metrics_oracle(&gt, &pred, 4, IGNORE_LABEL);
        for (got, want) in m.iou.iter().zip(&want.iou) {
            match (got, want) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
        if gt.iter().any(|&l| l != IGNORE_LABEL) {
            prop_assert!((m.miou - want.miou).abs() < 1e-12);
            prop_assert!((m.pix_acc - want.pix_acc).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.pix_acc));
            prop_assert_eq!(m.miou == 1.0, want.pix_acc == 1.0);
        }
    }
}

#[test]
fn merging_is_order_independent() {
    let mut a = ConfusionMatrix::new(3);
    let mut b = ConfusionMatrix::new(3);
    a.add(&[0, 1, 2], &[0, 2, 2], IGNORE_LABEL).unwrap();
    b.add(&[1, 1], &[1, 0], IGNORE_LABEL).unwrap();
    let mut ab = a.clone();
    ab.merge(&b);
    let mut ba = b.clone();
    ba.merge(&a);
    assert_eq!(ab, ba);
    assert_eq!(ab.total(), 5);
}

// ----- full network gradient -------------------------------------------------------------

fn tiny_batch(seed: u64, classes: u8) -> (Tensor<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let mask = (0..2 * 16 * 16)
        .map(|i| if i % 37 == 0 { IGNORE_LABEL } else { ((i / 16 % 16) / 4) as u8 % classes })
        .collect();
    (img, mask)
}

fn full_loss_gradcheck(variant: Variant) {
    let mut cfg = NetworkConfig::tiny(variant, 8, 4);
    cfg.seed = 5;
    let net = CtNet::<f64>::new(cfg).unwrap();
    let (img, mask) = tiny_batch(6, 4);
    let obj = ObjectiveConfig::default();
    let inputs = net.store().param_tensors();
    let rep = gradcheck(
        &format!("{variant}_full_loss"),
        |g, vars| {
            let bound = net.store().bind_to(vars)?;
            let x = g.constant(img.clone());
            let out = net.forward(g, &bound, x, true)?;
            Ok(objective(g, &out, &mask, &obj)?.total)
        },
        &inputs,
        GradcheckConfig::default(),
    )
    .unwrap();
    assert!(rep.pass, "{}", rep.json_line());
}

#[test]
fn full_ctnet_loss_passes_gradcheck() {
    full_loss_gradcheck(Variant::Ctnet);
}

#[test]
fn ablation_variant_losses_pass_gradcheck() {
    for v in [Variant::Occm, Variant::Oscm, Variant::Panet] {
        full_loss_gradcheck(v);
    }
}
