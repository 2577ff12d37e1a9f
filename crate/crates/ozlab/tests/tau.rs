//! Ordering and symmetry of fitted decay rates from Monte Carlo two-point estimates.

use ozlab::estimator::{finite_two_point_multi, tau_fit, TauEstimate, DEFAULT_MARGIN};
use ozlab::rc_measure::{BoundaryCondition, RCParams};

fn axis_tau(p: f64, sign: i64, stream: u64, r_max: i64) -> TauEstimate {
    let xs: Vec<Vec<i64>> = (1..=r_max).map(|r| vec![sign * r, 0]).collect();
    let rows = finite_two_point_multi(
        &xs,
        2,
        &RCParams::new(1.0, p).unwrap(),
        &BoundaryCondition::Free,
        200_000,
        17,
        stream,
        DEFAULT_MARGIN,
    )
    .unwrap();
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.x[0].abs() as f64, r.estimate)).collect();
    tau_fit(&[sign as f64, 0.0], &pts, None).unwrap()
}

// In the supercritical phase a finite connection needs a closed dual circuit
// around both points, which gets costlier as p grows.
#[test]
fn tau_increases_with_p_above_threshold() {
    let lo = axis_tau(0.55, 1, 0, 5);
    let hi = axis_tau(0.6, 1, 1, 5);
    assert!(
        hi.tau - lo.tau > 2.0 * (hi.err.hypot(lo.err)),
        "{} ± {} vs {} ± {}",
        lo.tau,
        lo.err,
        hi.tau,
        hi.err
    );
}

#[test]
fn tau_is_symmetric_under_reflection() {
    let a = axis_tau(0.6, 1, 2, 5);
    let b = axis_tau(0.6, -1, 3, 5);
    assert!(
        (a.tau - b.tau).abs() < 4.0 * a.err.hypot(b.err),
        "{} ± {} vs {} ± {}",
        a.tau,
        a.err,
        b.tau,
        b.err
    );
}
