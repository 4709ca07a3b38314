use lasoftmoe::gradsuite::{run_suite, suite_passed, GradScope, SuiteOptions};

fn check(scope: GradScope) {
    let entries = run_suite(scope, &SuiteOptions::default()).unwrap();
    assert!(!entries.is_empty());
    for e in &entries {
        assert!(e.report.passed, "{}: max rel error {:e}", e.component, e.report.max_rel_error);
    }
}

#[test]
fn every_op_passes() {
    check(GradScope::Ops);
}

#[test]
fn both_moe_variants_pass_end_to_end() {
    let entries = run_suite(GradScope::Moe, &SuiteOptions::default()).unwrap();
    assert_eq!(entries.len(), 2);
    assert!(suite_passed(&entries));
}

#[test]
fn encoder_blocks_pass() {
    check(GradScope::Block);
}

#[test]
fn corrupted_matmul_gradient_is_caught() {
    let opts = SuiteOptions {
        corrupt: Some(1.01),
        ..SuiteOptions::default()
    };
    let entries = run_suite(GradScope::Ops, &opts).unwrap();
    assert!(!suite_passed(&entries));
    assert!(entries.iter().any(|e| e.component.contains("matmul") && !e.report.passed));
}
