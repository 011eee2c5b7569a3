use fcce_core::gradcheck::{self, MAX_REL_ERR};

#[test]
fn every_gradient_matches_finite_differences() {
    let reports = gradcheck::run_suite(100, 2024).unwrap();
    assert_eq!(reports.len(), 17);
    for r in &reports {
        println!("{:<20} {:.3e}", r.mode, r.max_rel_err);
        assert_eq!(r.instances, 100);
    }
    for r in &reports {
        assert!(r.max_rel_err < MAX_REL_ERR, "{} worst relative error {:.3e}", r.mode, r.max_rel_err);
    }
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(gradcheck::run_suite(4, 9).unwrap(), gradcheck::run_suite(4, 9).unwrap());
}
