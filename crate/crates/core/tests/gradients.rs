use svtrv2::gradcheck::{composed_loss_check, run_suite, COMPOSED_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive_and_the_composed_loss_pass() {
    let entries = run_suite(0).unwrap();
    assert!(entries.len() >= 20);
    for e in &entries {
        assert!(e.passes(), "{}: {:?}", e.name, e.report);
    }
    assert!(entries.iter().filter(|e| e.tolerance == PRIMITIVE_TOL).count() >= 20);
}

#[test]
fn composed_loss_on_another_seed() {
    let r = composed_loss_check(7, Some(2)).unwrap();
    assert!(r.passes(COMPOSED_TOL), "{r:?}");
}
