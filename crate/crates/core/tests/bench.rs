use ctnet::bench::{
    compare, cost_csv, instrumented, nonlocal_cost, scm_cost, verify_counts, Block, CostConfig, CSV_HEADER,
};
use proptest::prelude::*;

#[test]
fn tiny_blocks_match_instrumented_counts_exactly() {
    let cfg = CostConfig::new(8, 4, 4, 3, 2);
    for block in [Block::Scm, Block::NonLocal] {
        let check = verify_counts(block, cfg).unwrap_or_else(|e| panic!("{e}"));
        assert!(check.is_exact());
        assert!(check.rows.iter().any(|r| r.item == "affinity"));
    }
}

#[test]
fn misspecified_formula_is_reported_per_sub_op() {
    let cfg = CostConfig::new(8, 4, 4, 3, 2);
    let mut wrong = scm_cost(cfg).unwrap();
    // forget the normalisation multiplies inside rho
    let rho = wrong.breakdown.iter_mut().find(|(k, _)| k == "rho").unwrap();
    rho.1 -= 8 * 16;
    wrong.macs -= 8 * 16;
    let check = compare(&wrong, &instrumented(Block::Scm, cfg).unwrap());
    assert!(!check.is_exact());
    let bad: Vec<&str> = check.mismatches().map(|r| r.item.as_str()).collect();
    assert_eq!(bad, ["rho", "macs"]);
    let text = check.to_string();
    assert!(text.contains("rho") && text.contains("MISMATCH") && text.contains("+128"), "{text}");
}

#[test]
fn doubling_categories_doubles_attention_terms() {
    let a = scm_cost(CostConfig::new(64, 32, 32, 21, 4)).unwrap();
    let b = scm_cost(CostConfig::new(64, 32, 32, 42, 4)).unwrap();
    assert_eq!(b.attention_macs(), 2 * a.attention_macs());
    for stage in ["proj_c", "proj_d", "affinity", "aggregation"] {
        assert_eq!(b.stage(stage).unwrap(), 2 * a.stage(stage).unwrap(), "{stage}");
    }
    assert_eq!(b.stage("proj_b"), a.stage("proj_b"));
}

#[test]
fn doubling_height_doubles_pixel_terms() {
    let c = 64u64;
    let a = scm_cost(CostConfig::new(64, 32, 32, 21, 4)).unwrap();
    let b = scm_cost(CostConfig::new(64, 64, 32, 21, 4)).unwrap();
    for stage in ["proj_b", "affinity", "aggregation"] {
        assert_eq!(b.stage(stage).unwrap(), 2 * a.stage(stage).unwrap(), "{stage}");
    }
    // rho carries two per-channel multiplies that do not scale with pixels
    assert_eq!(b.stage("rho").unwrap() - 2 * c, 2 * (a.stage("rho").unwrap() - 2 * c));
    assert_eq!(b.stage("proj_c"), a.stage("proj_c"));
    assert_eq!(b.attention_macs(), 2 * a.attention_macs());
}

#[test]
fn desk_scale_attention_ratio_is_pixels_over_categories() {
    let cfg = CostConfig::new(64, 64, 64, 21, 4);
    let s = scm_cost(cfg).unwrap();
    let nl = nonlocal_cost(cfg).unwrap();
    // (HW)²·C/r·2 against HW·N·C/r·2
    assert_eq!(nl.attention_macs(), 2 * 4096 * 4096 * 16);
    assert_eq!(s.attention_macs(), 2 * 4096 * 21 * 16);
    assert_eq!(nl.attention_macs() * 21, s.attention_macs() * 4096);
    let ratio = nl.attention_macs() as f64 / s.attention_macs() as f64;
    assert!((ratio - 195.047619).abs() < 1e-6);
}

#[test]
fn nonlocal_attention_grows_quadratically_in_pixels() {
    let at = |h: usize| nonlocal_cost(CostConfig::new(32, h, h, 8, 4)).unwrap().attention_macs();
    let sc = |h: usize| scm_cost(CostConfig::new(32, h, h, 8, 4)).unwrap().attention_macs();
    for h in [8, 16, 32] {
        assert_eq!(at(2 * h), 16 * at(h));
        assert_eq!(sc(2 * h), 4 * sc(h));
    }
}

#[test]
fn nonlocal_peak_holds_the_pixel_affinity() {
    let cfg = CostConfig::new(16, 8, 8, 4, 4);
    let nl = nonlocal_cost(cfg).unwrap();
    assert!(nl.peak_activation_scalars >= 64 * 64);
    assert!(nl.peak_activation_scalars > scm_cost(cfg).unwrap().peak_activation_scalars);
}

#[test]
fn indivisible_channels_are_rejected() {
    assert!(scm_cost(CostConfig::new(10, 4, 4, 3, 4)).is_err());
    assert!(nonlocal_cost(CostConfig::new(10, 4, 4, 3, 0)).is_err());
    assert!(verify_counts(Block::Scm, CostConfig::new(8, 4, 4, 0, 2)).is_err());
}

#[test]
fn csv_has_documented_columns() {
    let text = cost_csv(&[CostConfig::new(64, 64, 64, 21, 4), CostConfig::new(8, 4, 4, 3, 2)]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols.len(), CSV_HEADER.split(',').count());
    assert_eq!(&cols[..5], ["64", "64", "64", "21", "4"]);
    assert_eq!(cols[11], "195.047619");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn executable_sizes_match_exactly(
        c_in in 1usize..4, r in prop::sample::select(vec![1usize, 2, 4]),
        h in 1usize..5, w in 1usize..5, n in 1usize..5,
    ) {
        let cfg = CostConfig::new(4 * c_in, h, w, n, r);
        for block in [Block::Scm, Block::NonLocal] {
            let check = compare(
                &ctnet::bench::cost(block, cfg).unwrap(),
                &instrumented(block, cfg).unwrap(),
            );
            prop_assert!(check.is_exact(), "{}", check);
        }
    }

    #[test]
    fn scm_is_cheaper_whenever_categories_are_fewer_than_pixels(
        c_in in 1usize..32, h in 1usize..128, w in 1usize..128, n in 1usize..200,
    ) {
        prop_assume!(n < h * w);
        let cfg = CostConfig::new(4 * c_in, h, w, n, 4);
        let s = scm_cost(cfg).unwrap();
        let nl = nonlocal_cost(cfg).unwrap();
        prop_assert!(s.attention_macs() < nl.attention_macs());
        prop_assert_eq!(nl.attention_macs() as u128 * n as u128, s.attention_macs() as u128 * (h * w) as u128);
    }
}
