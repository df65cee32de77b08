use coca3d::metrics::{iou3d, nms, Box3D};
use coca3d::pointcloud::{coverage_radius, farthest_point_sample, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    PointCloud::from_rows(&rows).unwrap()
}

#[test]
fn coverage_radius_non_increasing_in_m() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(8..60);
        let c = cloud(&mut rng, n);
        let mut last = f64::INFINITY;
        for m in 1..=n {
            let r = coverage_radius(&c, &farthest_point_sample(&c, m, 0).unwrap());
            assert!(r <= last, "m={m}: {r} > {last}");
            last = r;
        }
        assert_eq!(last, 0.0);
    }
}

#[test]
fn fps_deterministic_and_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let n = rng.gen_range(2..40);
        let c = cloud(&mut rng, n);
        let start = rng.gen_range(0..n);
        let a = farthest_point_sample(&c, n / 2 + 1, start).unwrap();
        assert_eq!(a, farthest_point_sample(&c, n / 2 + 1, start).unwrap());
        assert_eq!(a[0], start);
        let mut all = farthest_point_sample(&c, n, start).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
    let c = cloud(&mut rng, 5);
    assert!(farthest_point_sample(&c, 0, 0).is_err());
    assert!(farthest_point_sample(&c, 6, 0).is_err());
}

fn cube(x: f64) -> Box3D {
    Box3D::new([x, 0.0, 0.0], [1.0; 3]).unwrap()
}

#[test]
fn iou_closed_forms() {
    assert_eq!(iou3d(&cube(0.0), &cube(0.0)), 1.0);
    assert!((iou3d(&cube(0.0), &cube(0.5)) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou3d(&cube(0.0), &cube(2.0)), 0.0);
    assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
}

#[test]
fn nms_keeps_one_of_identical_boxes() {
    assert_eq!(nms(&[cube(0.0), cube(0.0)], &[0.4, 0.9], 0.5), vec![1]);
    assert_eq!(nms(&[cube(0.0), cube(0.5)], &[0.9, 0.4], 0.5), vec![0, 1]);
    assert_eq!(nms(&[cube(0.0), cube(0.5)], &[0.9, 0.4], 0.3), vec![0]);
}
