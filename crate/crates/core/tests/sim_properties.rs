use dlo_core::flexibility::EstimationRig;
use dlo_core::sim::{
    init_rope, settle_quasi_static, step, Grasp, RingConfig, RopeParams, RopeState, Vec3, World, CONTACT_MARGIN,
};
use proptest::prelude::*;

/// Depth of `p` inside the solid annulus (zero when outside).
fn ring_penetration(ring: &RingConfig, p: &Vec3) -> f64 {
    let e = ring.axis();
    let r = p - ring.center;
    let s = r.dot(&e);
    let rho = (r - e * s).norm();
    let depth = (ring.depth / 2.0 - s.abs()).min(rho - ring.inner_radius).min(ring.outer_radius - rho);
    depth.max(0.0)
}

fn segment_errors(state: &RopeState, rest: f64) -> impl Iterator<Item = f64> + '_ {
    state.positions.windows(2).map(move |w| ((w[1] - w[0]).norm() - rest).abs())
}

fn held_rope(params: &RopeParams, grasp: usize) -> RopeState {
    let base = Vec3::new(-(grasp as f64) * params.rest_len, 0.0, 0.5);
    let mut state = init_rope(params, base, Vec3::x()).unwrap();
    state.grasp = Some(Grasp::jaw(grasp, Vec3::new(0.0, 0.0, 0.5), Vec3::x()));
    state
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn settling_keeps_segments_near_rest_length(s in 0.5f64..=1.0, grasp in 0usize..10) {
        let params = RopeParams::from_sweep(s, 20);
        let mut state = held_rope(&params, grasp);
        for _ in 0..400 {
            step(&mut state, &params, &World::floor_only()).unwrap();
            for e in segment_errors(&state, params.rest_len) {
                prop_assert!(e <= 0.05 * params.rest_len, "segment error {e}");
            }
        }
    }

    #[test]
    fn grasped_particle_is_pinned_exactly(
        s in 0.0f64..=1.0,
        target in (-0.2f64..0.2, -0.2f64..0.2, 0.1f64..0.6),
        grasp in 0usize..20,
    ) {
        let params = RopeParams::from_sweep(s, 20);
        let mut state = init_rope(&params, Vec3::new(0.0, 0.0, 0.3), Vec3::x()).unwrap();
        let t = Vec3::new(target.0, target.1, target.2);
        state.grasp = Some(Grasp::point(grasp, t));
        for _ in 0..30 {
            step(&mut state, &params, &World::floor_only()).unwrap();
            prop_assert_eq!(state.positions[grasp], t);
        }
    }

    #[test]
    fn particles_never_sink_into_ring_or_floor(
        s in 0.0f64..=1.0,
        angle in 0.0f64..2.3,
        radius in 0.01f64..0.025,
        offset in -0.05f64..0.05,
        height in 0.02f64..0.15,
    ) {
        let ring = RingConfig::new(Vec3::new(0.0, 0.0, 0.2), angle, radius);
        let world = World::with_ring(ring.clone());
        let params = RopeParams::from_sweep(s, 30);
        let base = ring.center + Vec3::new(-0.15, 0.0, height) + ring.horizontal() * offset;
        let mut state = init_rope(&params, base, ring.horizontal()).unwrap();
        for _ in 0..300 {
            step(&mut state, &params, &world).unwrap();
            for p in &state.positions {
                prop_assert!(p.z >= -CONTACT_MARGIN - 1e-12, "below floor: {}", p.z);
                prop_assert!(ring_penetration(&ring, p) <= CONTACT_MARGIN + 1e-12, "inside ring at {p:?}");
            }
        }
    }

    #[test]
    fn stepping_is_bitwise_deterministic(s in 0.0f64..=1.0, angle in 0.0f64..2.3) {
        let ring = RingConfig::new(Vec3::new(0.0, 0.0, 0.2), angle, 0.02);
        let world = World::with_ring(ring);
        let params = RopeParams::from_sweep(s, 25);
        let run = || {
            let mut st = init_rope(&params, Vec3::new(-0.1, 0.0, 0.3), Vec3::x()).unwrap();
            st.grasp = Some(Grasp::jaw(3, Vec3::new(-0.064, 0.0, 0.3), Vec3::x()));
            for _ in 0..200 {
                step(&mut st, &params, &world).unwrap();
            }
            st
        };
        let (a, b) = (run(), run());
        prop_assert!(a.positions.iter().zip(&b.positions).all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| x.to_bits() == y.to_bits())));
    }
}

#[test]
fn droop_is_non_increasing_in_bend_stiffness() {
    let base = RopeParams::from_sweep(0.5, 20);
    let mut last = f64::INFINITY;
    for k in 0..10 {
        let params = RopeParams { bend_stiffness: 0.1 + 0.1 * k as f64, ..base.clone() };
        let mut state = held_rope(&params, 0);
        let report = settle_quasi_static(&mut state, &params, &World::floor_only(), 4000, 1e-4).unwrap();
        assert!(report.converged, "level {k} did not settle");
        let droop = 0.5 - state.positions[params.n - 1].z;
        assert!(droop <= last + 1e-9, "level {k}: droop {droop} > {last}");
        last = droop;
    }
}

#[test]
fn rig_hold_matches_manual_hold() {
    let rig = EstimationRig::default();
    let params = RopeParams::from_sweep(0.7, 20);
    let shape = rig.hold(&params, 0).unwrap();
    let grip = shape.state.grasp_target().unwrap();
    assert!((grip - Vec3::new(0.0, 0.0, rig.grasp_height)).norm() < 1e-12);
    assert!(shape.state.positions[params.n - 1].z < rig.grasp_height);
}
