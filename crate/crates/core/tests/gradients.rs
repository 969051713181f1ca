use g2p_core::gradcheck::{check_encoder, check_heads, check_ops};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let reports = check_ops(17).unwrap();
    assert_eq!(reports.len(), 24);
    let failed: Vec<_> = reports.iter().filter(|(_, r)| !r.passes(TOL)).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn ops_pass_for_other_seeds() {
    for seed in [1, 99, 12345] {
        for (name, r) in check_ops(seed).unwrap() {
            assert!(r.passes(TOL), "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn full_encoder_matches_finite_differences() {
    let r = check_encoder(5).unwrap();
    assert!(r.checked > 500, "{r:?}");
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn each_head_matches_finite_differences() {
    for (arch, r) in check_heads(3).unwrap() {
        assert!(r.passes(TOL), "{arch:?}: {r:?}");
    }
}
