//! Pareto extraction against brute force, DTIP arithmetic and selection
//! invariants.

#[path = "support/oracles.rs"]
mod oracles;

use oracles::brute_pareto;
use orbit_core::analysis::{
    dtip, merge_schedule_trace, pareto_indices, select_index, NormBounds, PerfPoint,
};
use orbit_core::train::MergeEvent;
use proptest::prelude::*;

/// Coarse grid values so ties and duplicates are common.
fn point() -> impl Strategy<Value = PerfPoint> {
    (0u64..50, 0u32..20, 0u32..20)
        .prop_map(|(s, t, r)| PerfPoint::new(s, t as f64 / 19.0, r as f64 / 19.0))
}

fn affine(p: &PerfPoint, (a, b, c, d): (f64, f64, f64, f64)) -> PerfPoint {
    PerfPoint::new(p.step, a * p.text + b, c * p.retrieval + d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pareto_matches_brute_force(points in prop::collection::vec(point(), 1..1000)) {
        prop_assert_eq!(pareto_indices(&points).unwrap(), brute_pareto(&points));
    }

    #[test]
    fn pareto_matches_brute_force_on_continuous_values(
        points in prop::collection::vec((0u64..9, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(s, t, r)| PerfPoint::new(s, t, r)), 1..300)
    ) {
        prop_assert_eq!(pareto_indices(&points).unwrap(), brute_pareto(&points));
    }

    #[test]
    fn dtip_is_monotone(p in point(), dt in 0.0f64..0.5, dr in 0.0f64..0.5) {
        let b = NormBounds::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let q = PerfPoint::new(p.step, p.text + dt, p.retrieval + dr);
        prop_assert!(dtip(&q, &b) <= dtip(&p, &b));
    }

    #[test]
    fn selection_is_invariant_under_positive_affine_rescaling(
        points in prop::collection::vec(point(), 1..200),
        a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
    ) {
        let bounds = NormBounds::new(0.2, 0.9, 0.1, 0.8).unwrap();
        let scaled: Vec<_> = points.iter().map(|p| affine(p, (a, b, c, d))).collect();
        let scaled_bounds = NormBounds::new(a * 0.2 + b, a * 0.9 + b, c * 0.1 + d, c * 0.8 + d).unwrap();
        let i = select_index(&points, &bounds).unwrap();
        let j = select_index(&scaled, &scaled_bounds).unwrap();
        // Rescaling can perturb the last bit of a DTIP; only exact ties may move.
        let (di, dj) = (dtip(&points[i], &bounds), dtip(&points[j], &bounds));
        prop_assert!((di - dj).abs() <= 1e-12, "{i} ({di}) vs {j} ({dj})");
    }

    #[test]
    fn selected_point_is_on_the_front_and_minimal(points in prop::collection::vec(point(), 1..300)) {
        let bounds = NormBounds::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let i = select_index(&points, &bounds).unwrap();
        let front = brute_pareto(&points);
        prop_assert!(front.contains(&i));
        let best = dtip(&points[i], &bounds);
        prop_assert!(points.iter().all(|p| dtip(p, &bounds) >= best));
    }
}

#[test]
fn dtip_worked_example() {
    let b = NormBounds::new(0.2, 0.8, 0.0, 0.5).unwrap();
    let d = dtip(&PerfPoint::new(0, 0.5, 0.25), &b);
    assert!((d - 0.5f64.sqrt()).abs() < 1e-15);
    let d = dtip(&PerfPoint::new(0, 0.65, 0.25), &b);
    assert!((d - 0.3125f64.sqrt()).abs() < 1e-15 && (d - 0.559017).abs() < 1e-6);
    // Clamped at both ends.
    assert_eq!(dtip(&PerfPoint::new(0, 2.0, 9.0), &b), 0.0);
    assert_eq!(dtip(&PerfPoint::new(0, -2.0, -9.0), &b), 2f64.sqrt());
}

#[test]
fn selection_ties_go_to_the_earlier_step() {
    let b = NormBounds::new(0.0, 1.0, 0.0, 1.0).unwrap();
    let points = [
        PerfPoint::new(9, 0.5, 0.5),
        PerfPoint::new(3, 0.5, 0.5),
        PerfPoint::new(1, 0.1, 0.1),
    ];
    assert_eq!(select_index(&points, &b).unwrap(), 1);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(NormBounds::new(1.0, 1.0, 0.0, 1.0).is_err());
    assert!(pareto_indices(&[]).is_err());
    assert!(pareto_indices(&[PerfPoint::new(0, f64::NAN, 0.0)]).is_err());
}

#[test]
fn merge_trace_is_the_gap_sequence() {
    let ev = |step| MergeEvent {
        step,
        merges_applied: 1,
        before: 0.3,
        after: 0.1,
    };
    assert_eq!(
        merge_schedule_trace(&[ev(3), ev(5), ev(12)]).unwrap(),
        vec![2, 7]
    );
    assert!(merge_schedule_trace(&[ev(3), ev(3)]).is_err());
    assert!(merge_schedule_trace(&[]).unwrap().is_empty());
}

#[test]
fn worked_examples() {
    let b = NormBounds::new(15.0, 35.0, 0.0, 4.0).unwrap();
    assert!((dtip(&PerfPoint::new(0, 25.0, 3.0), &b) - 0.3125f64.sqrt()).abs() < 1e-15);
    assert!((dtip(&PerfPoint::new(0, 25.0, 3.0), &b) - 0.55902).abs() < 5e-6);
    assert_eq!(dtip(&PerfPoint::new(0, 35.0, 4.0), &b), 0.0);
    assert_eq!(dtip(&PerfPoint::new(0, 15.0, 0.0), &b), 2f64.sqrt());

    let pts = [
        PerfPoint::new(0, 1.0, 0.0),
        PerfPoint::new(1, 0.0, 1.0),
        PerfPoint::new(2, 0.5, 0.5),
        PerfPoint::new(3, 0.4, 0.4),
    ];
    assert_eq!(pareto_indices(&pts).unwrap(), vec![0, 1, 2]);

    let unit = NormBounds::new(0.0, 1.0, 0.0, 1.0).unwrap();
    let pts = [PerfPoint::new(0, 0.9, 0.1), PerfPoint::new(1, 0.5, 0.5)];
    assert_eq!(select_index(&pts, &unit).unwrap(), 1);
    assert!(
        (dtip(&pts[0], &unit) - 0.9055).abs() < 1e-4
            && (dtip(&pts[1], &unit) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15
    );
    let same = [
        PerfPoint::new(7, 0.3, 0.3),
        PerfPoint::new(2, 0.3, 0.3),
        PerfPoint::new(5, 0.3, 0.3),
    ];
    assert_eq!(select_index(&same, &unit).unwrap(), 1);

    let ev = |step| MergeEvent {
        step,
        merges_applied: 1,
        before: 0.3,
        after: 0.1,
    };
    assert_eq!(
        merge_schedule_trace(&[ev(100), ev(300), ev(600)]).unwrap(),
        vec![200, 300]
    );
    assert!(merge_schedule_trace(&[ev(100)]).unwrap().is_empty());
}
