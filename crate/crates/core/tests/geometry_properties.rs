mod common;

use common::{monte_carlo_iou, random_box, rng};
use eon_core::geometry::{
    box_to_object_frame, box_to_scene_frame, distance, points_in_box, rotate_points_about, rotated_iou, OrientedBox,
    PointSet,
};
use eon_core::rotgroup::{wrap_angle, CyclicGroup};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = OrientedBox> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        prop::array::uniform3(0.1f64..2.0),
        -4.0f64..4.0,
    )
        .prop_map(|(c, s, y)| OrientedBox::new(c, s, y, 0).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = rotated_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - rotated_iou(&b, &a)).abs() <= 1e-12);
        prop_assert!((rotated_iou(&a, &a) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn iou_invariant_under_rigid_yaw_motion(a in arb_box(), b in arb_box(), yaw in -3.0f64..3.0, t in prop::array::uniform3(-2.0f64..2.0)) {
        let (s, c) = yaw.sin_cos();
        let move_box = |x: &OrientedBox| {
            let p = x.center;
            let center = [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1], p[2] + t[2]];
            OrientedBox::new(center, x.size, x.yaw + yaw, 0).unwrap()
        };
        prop_assert!((rotated_iou(&a, &b) - rotated_iou(&move_box(&a), &move_box(&b))).abs() <= 1e-9);
    }

    #[test]
    fn scene_and_object_frames_are_inverse(b in arb_box(), k in 0usize..4, r in prop::array::uniform3(-3.0f64..3.0)) {
        let h = CyclicGroup::new(4).unwrap().element(k).unwrap();
        let back = box_to_object_frame(&box_to_scene_frame(&b, &h, r), &h, r);
        for i in 0..3 {
            prop_assert!((back.center[i] - b.center[i]).abs() <= 1e-12);
            prop_assert_eq!(back.size[i], b.size[i]);
        }
        prop_assert!(wrap_angle(back.yaw - b.yaw).abs() <= 1e-12);
    }

    #[test]
    fn rotation_preserves_pairwise_distances(pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..12), yaw in -7.0f64..7.0, pivot in prop::array::uniform3(-2.0f64..2.0)) {
        let set = PointSet::new(pts.clone()).unwrap();
        let moved = rotate_points_about(&set, pivot, yaw);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let before = distance(pts[i], pts[j]);
                let after = distance(moved.positions[i], moved.positions[j]);
                prop_assert!((before - after).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn offset_unit_cubes_have_iou_one_third() {
    let a = OrientedBox::new([0.0; 3], [1.0; 3], 0.0, 0).unwrap();
    let b = OrientedBox::new([0.5, 0.0, 0.0], [1.0; 3], 0.0, 0).unwrap();
    assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    assert!((monte_carlo_iou(&a, &b, 100_000, 1) - 1.0 / 3.0).abs() < 0.01);
}

#[test]
fn iou_agrees_with_monte_carlo_on_random_pairs() {
    let mut r = rng(11);
    for i in 0..20 {
        let (a, b) = (random_box(&mut r), random_box(&mut r));
        let mc = monte_carlo_iou(&a, &b, 100_000, 100 + i);
        assert!((rotated_iou(&a, &b) - mc).abs() <= 0.01, "pair {i}");
    }
}

#[test]
fn point_outside_rotated_cube_corner() {
    let b = OrientedBox::new([0.0; 3], [1.0; 3], std::f64::consts::FRAC_PI_4, 0).unwrap();
    let pts = PointSet::new(vec![[0.6, 0.6, 0.0], [0.3, 0.3, 0.0]]).unwrap();
    assert_eq!(points_in_box(&pts, &b), vec![false, true]);
}
