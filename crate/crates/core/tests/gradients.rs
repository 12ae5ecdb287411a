mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let errs = common::suites::gradient_errors(10, 3, 1e-5);
    assert_eq!(errs.len(), 12);
    for (name, err) in errs {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}
