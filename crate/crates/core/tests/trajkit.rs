use locpred::trajkit::{plan_user, sessionize, Anchor, Mode, PlanarPoint, PlanarTrack, SessionParams, SynthConfig};
use proptest::prelude::*;

fn track(points: Vec<PlanarPoint>) -> PlanarTrack {
    PlanarTrack { user_id: "u".into(), mode: Mode::Walk, points }
}

/// Timestamps from a list of steps; steps above 180 s are session gaps.
fn steps_strategy() -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(prop_oneof![4 => 1i64..=180, 1 => 181i64..2000], 1..80)
}

fn build(steps: &[i64]) -> Vec<PlanarPoint> {
    let mut t = 1_000;
    let mut pts = vec![PlanarPoint::new(0.0, 0.0, t)];
    for (i, s) in steps.iter().enumerate() {
        t += s;
        pts.push(PlanarPoint::new(i as f64 * 3.5, (i as f64).sin() * 20.0, t));
    }
    pts
}

proptest! {
    #[test]
    fn sessions_have_exact_spacing(steps in steps_strategy()) {
        let sessions = sessionize(&track(build(&steps)), SessionParams::default()).unwrap();
        prop_assert_eq!(sessions.len(), 1 + steps.iter().filter(|&&s| s > 180).count());
        for s in &sessions {
            for w in s.points.windows(2) {
                prop_assert_eq!(w[1].t - w[0].t, 60);
            }
        }
    }

    #[test]
    fn resessionizing_own_output_is_stable(steps in steps_strategy()) {
        let params = SessionParams::default();
        let first = sessionize(&track(build(&steps)), params).unwrap();
        let joined: Vec<PlanarPoint> = first.iter().flat_map(|s| s.points.iter().copied()).collect();
        let again = sessionize(&track(joined), params).unwrap();
        prop_assert_eq!(first, again);
    }

    #[test]
    fn projection_round_trip(
        alat in -60.0f64..60.0, alon in -179.0f64..179.0,
        dlat in -0.2f64..0.2, dlon in -0.2f64..0.2,
    ) {
        let anchor = Anchor::new(alat, alon).unwrap();
        let (x, y) = anchor.project(alat + dlat, alon + dlon);
        let (lat, lon) = anchor.unproject(x, y);
        prop_assert!((lat - (alat + dlat)).abs() <= 1e-9);
        prop_assert!((lon - (alon + dlon)).abs() <= 1e-9);
    }

    #[test]
    fn projection_is_injective_nearby(
        alat in -60.0f64..60.0,
        a in (-0.1f64..0.1, -0.1f64..0.1),
        b in (-0.1f64..0.1, -0.1f64..0.1),
    ) {
        prop_assume!(a != b);
        let anchor = Anchor::new(alat, 10.0).unwrap();
        let pa = anchor.project(alat + a.0, 10.0 + a.1);
        let pb = anchor.project(alat + b.0, 10.0 + b.1);
        prop_assert_ne!(pa, pb);
    }
}

#[test]
fn anchors_depend_on_seed_and_index_only() {
    let cfg = SynthConfig { seed: 5, ..SynthConfig::default() };
    let other = SynthConfig { seed: 6, ..SynthConfig::default() };
    let longer = SynthConfig { duration_minutes: 600, n_users: 50, ..cfg.clone() };
    for u in 0..10 {
        assert_eq!(plan_user(&cfg, u), plan_user(&cfg, u));
        assert_eq!(plan_user(&cfg, u), plan_user(&longer, u));
    }
    assert!((0..10).any(|u| plan_user(&cfg, u).anchors != plan_user(&other, u).anchors));
}
