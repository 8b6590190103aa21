//! Metrics-CSV parsing must never panic or hang; accepted rows must survive
//! a write/read cycle.

#![no_main]

use libfuzzer_sys::fuzz_target;

/// Bit-identical, except NaN payloads and signs need not survive formatting.
fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits()
}

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = rrpcp::report::read_metrics_csv(data) else {
        return;
    };
    let mut rewritten = Vec::new();
    rrpcp::report::write_metrics_csv(&mut rewritten, &rows).expect("rows re-serialize");
    let again = rrpcp::report::read_metrics_csv(rewritten.as_slice())
        .expect("re-serialized metrics re-parse");
    assert_eq!(again.len(), rows.len());
    for (a, b) in again.iter().zip(&rows) {
        assert_eq!(a.frame, b.frame);
        match (a.rel_err_s, b.rel_err_s) {
            (None, None) => {}
            (Some(x), Some(y)) => assert!(same(x, y), "rel_err_s altered"),
            _ => panic!("rel_err_s presence altered"),
        }
        assert!(same(a.rel_err_l, b.rel_err_l), "rel_err_l altered");
        assert!(same(a.epsilon, b.epsilon), "epsilon altered");
        assert_eq!(
            (a.extras_pred, a.misses_pred, a.extras_upd, a.misses_upd),
            (b.extras_pred, b.misses_pred, b.extras_upd, b.misses_upd)
        );
        assert_eq!(
            (a.rank, a.solver_iters, a.s_zero),
            (b.rank, b.solver_iters, b.s_zero)
        );
    }
});
