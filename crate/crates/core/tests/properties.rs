use std::f64::consts::PI;

use nalgebra::{Matrix3x4, Rotation3, Vector3};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

use autolabel3d::geometry::{frustum_filter, Box2D, Box3D, CameraModel, Frame, Frustum, PointCloud, Size3};
use autolabel3d::kitti_io::{
    box3d_to_label, label_to_box3d, parse_calib, parse_labels, to_rectified, write_calib, write_labels, CalibRecord,
};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3..1e3f64, -1e-3..1e-3f64, Just(0.0), Just(1.0)]
}

fn rigid() -> impl Strategy<Value = Matrix3x4<f64>> {
    (-PI..PI, -PI..PI, -PI..PI, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b, c, x, y, z)| {
        let r = Rotation3::from_euler_angles(a, b, c).into_inner();
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.set_column(3, &Vector3::new(x, y, z));
        m
    })
}

fn box3d() -> impl Strategy<Value = Box3D> {
    (-20.0..20.0f64, -2.0..3.0f64, 1.0..70.0f64, 0.3..3.0f64, 0.3..3.0f64, 0.3..6.0f64, -10.0..10.0f64)
        .prop_map(|(x, y, z, h, w, l, t)| Box3D::new(Vector3::new(x, y, z), Size3::new(h, w, l), t).unwrap())
}

fn heading_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn calib_text_roundtrips_exactly(p in prop::array::uniform12(finite()), r in rigid(), t in rigid()) {
        let calib = CalibRecord {
            p2: Matrix3x4::from_row_slice(&p),
            r0_rect: r.fixed_view::<3, 3>(0, 0).into_owned(),
            tr_velo_to_cam: t,
            extra: [("P0".to_string(), p.to_vec())].into_iter().collect(),
        };
        prop_assert_eq!(parse_calib(&write_calib(&calib)).unwrap(), calib);
    }

    #[test]
    fn label_text_is_a_fixed_point(b in box3d(), score in prop::option::of(0.0..1.0f64)) {
        let rec = box3d_to_label(&b, "Car", Box2D::new(10.0, 20.0, 110.5, 90.25).unwrap(), score);
        let once = write_labels(&[rec]);
        let parsed = parse_labels(&once).unwrap();
        prop_assert_eq!(parsed.len(), 1);
        prop_assert_eq!(write_labels(&parsed), once);
    }

    #[test]
    fn box_survives_label_conversion(b in box3d()) {
        let back = label_to_box3d(&box3d_to_label(&b, "Car", Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap(), None)).unwrap();
        prop_assert!((back.center - b.center).norm() < 1e-9);
        prop_assert_eq!(back.size, b.size);
        prop_assert!(heading_gap(back.heading, b.heading) < 1e-9);
        // corners permute under a half turn, so compare as sets
        for p in back.corners() {
            prop_assert!(b.corners().iter().any(|q| (p - q).norm() < 1e-9));
        }
    }

    #[test]
    fn rectification_is_rigid(t in rigid(), pts in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64), 2..20)) {
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect(), Frame::Sensor).unwrap();
        let calib = CalibRecord { tr_velo_to_cam: t, ..CalibRecord::identity() };
        let out = to_rectified(&cloud, &calib).unwrap();
        prop_assert_eq!(out.frame, Frame::RectifiedCamera);
        for i in 0..cloud.len() {
            for j in 0..cloud.len() {
                let a = (cloud.points[i] - cloud.points[j]).norm();
                let b = (out.points[i] - out.points[j]).norm();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frustum_matches_brute_force_projection(
        f in 300.0..1500.0f64,
        (x1, y1, w, h) in (0.0..1000.0f64, 0.0..300.0f64, 5.0..300.0f64, 5.0..150.0f64),
        pts in prop::collection::vec((-40.0..40.0f64, -5.0..5.0f64, -10.0..90.0f64), 1..300),
    ) {
        let cam = CameraModel::pinhole(f, 620.0, 187.0, 1242, 375).unwrap();
        let b = Box2D::new(x1, y1, x1 + w, y1 + h).unwrap();
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect(), Frame::RectifiedCamera).unwrap();
        let kept = frustum_filter(&Frustum::new(cam, b), &cloud).unwrap();
        let expected: Vec<Vector3<f64>> = cloud
            .points
            .iter()
            .filter(|p| {
                if p.z <= 0.0 || p.z > 70.0 {
                    return false;
                }
                let (u, v) = (f * p.x / p.z + 620.0, f * p.y / p.z + 187.0);
                u >= b.x1 && u <= b.x2 && v >= b.y1 && v <= b.y2
            })
            .copied()
            .collect();
        prop_assert_eq!(kept.points, expected);
    }
}

#[test]
fn thousand_boxes_roundtrip_through_label_text() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = prop::collection::vec(box3d(), 1000);
    let boxes = strategy.new_tree(&mut runner).unwrap().current();
    let recs: Vec<_> = boxes.iter().map(|b| box3d_to_label(b, "Car", Box2D::new(0.0, 0.0, 5.0, 5.0).unwrap(), None)).collect();
    let parsed = parse_labels(&write_labels(&recs)).unwrap();
    for (b, r) in boxes.iter().zip(&parsed) {
        let back = label_to_box3d(r).unwrap();
        // two-decimal text: centre within half a centimetre per axis plus the half-height rounding
        assert!((back.center - b.center).amax() < 0.011, "{b:?} {back:?}");
        assert!(heading_gap(back.heading, b.heading) < 0.006);
    }
}
