use proptest::prelude::*;

use trend_core::config::RunConfig;
use trend_core::diffcore::{alpha_value, stencil, trilinear_interpolate, BoundsPolicy, ParamStore, Tensor};
use trend_core::encoder::{mask_augment, GridGeometry};
use trend_core::lidarsim::{read_cloud, transform_to_frame, write_cloud, EgoAction, PointCloud, Pose2};
use trend_core::renderer::{alpha_from_sdf, render_depth_values, transmittance};
use trend_core::trainer::{cosine_lr, curriculum_stage, AdamState, Checkpoint};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64]
}

fn pose() -> impl Strategy<Value = Pose2> {
    (-30.0..30.0f64, -30.0..30.0f64, -3.2..3.2f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
}

proptest! {
    #[test]
    fn stencil_weights_partition_unity(
        x in -1.0..5.0f64, y in -1.0..4.0f64, z in -1.0..3.0f64,
    ) {
        let s = stencil([x, y, z], [3, 4, 5], BoundsPolicy::Clamp).unwrap();
        let total: f64 = s.weight.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(s.weight.iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn constant_grid_interpolates_to_constant(
        c in -10.0..10.0f64, x in 0.0..4.0f64, y in 0.0..3.0f64, z in 0.0..2.0f64,
    ) {
        let grid = Tensor::new(vec![3, 4, 5, 1], vec![c; 60]).unwrap();
        let v = trilinear_interpolate([x, y, z], &grid, BoundsPolicy::Clamp).unwrap();
        prop_assert!((v[0] - c).abs() < 1e-12);
    }

    #[test]
    fn render_weights_are_bounded(
        s in prop::collection::vec(-3.0..3.0f64, 2..40),
        z in 0.1..200.0f64,
    ) {
        let r: Vec<f64> = (0..s.len()).map(|i| 0.3 + i as f64 * 0.5).collect();
        let (depth, w) = render_depth_values(&s, &r, z).unwrap();
        let total: f64 = w.iter().sum();
        prop_assert!(total <= 1.0 + 1e-10);
        prop_assert!(w.iter().all(|w| (0.0..=1.0).contains(w)));
        prop_assert!(depth >= 0.0 && depth <= r[r.len() - 2] + 1e-9);
        let t = transmittance(&alpha_from_sdf(&s, z));
        prop_assert!(t.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn alpha_is_an_opacity(a in -5.0..5.0f64, b in -5.0..5.0f64, z in 0.01..500.0f64) {
        let v = alpha_value(a, b, z);
        prop_assert!((0.0..=1.0).contains(&v));
        if b >= a {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn frame_change_preserves_distances(
        pts in prop::collection::vec(point(), 2..8), from in pose(), to in pose(),
    ) {
        let n = pts.len();
        let cloud = PointCloud::new(pts.clone(), vec![0.0; n], 1, 0.0, from).unwrap();
        let moved = transform_to_frame(&cloud, to);
        for i in 0..n {
            for j in 0..n {
                let before = dist(pts[i], pts[j]);
                let after = dist(moved.points[i], moved.points[j]);
                prop_assert!((before - after).abs() < 1e-9);
            }
            // the world position of each point is unchanged
            let w0 = from.to_world(pts[i]);
            let w1 = to.to_world(moved.points[i]);
            prop_assert!(dist(w0, w1) < 1e-9);
        }
    }

    #[test]
    fn pose_composition_inverts(p in pose(), dx in -3.0..3.0f64, dy in -3.0..3.0f64, dt in -0.5..0.5f64) {
        let a = EgoAction::new(dx, dy, dt).unwrap();
        let q = p.then(&a);
        let back = p.action_to(&q);
        prop_assert!((back.dx - dx).abs() < 1e-9 && (back.dy - dy).abs() < 1e-9 && (back.dtheta - dt).abs() < 1e-9);
    }

    #[test]
    fn cloud_files_round_trip(
        pts in prop::collection::vec(point(), 0..20),
        ts in 0.0..100.0f64, p in pose(),
    ) {
        // rows are stored as f32, so start from f32-representable values
        let pts: Vec<[f64; 3]> = pts.iter().map(|q| q.map(|v| v as f32 as f64)).collect();
        let feats: Vec<f64> = pts.iter().map(|q| (q[0] * 0.1) as f32 as f64).collect();
        let cloud = PointCloud::new(pts, feats, 1, ts, p).unwrap();
        let mut bytes = Vec::new();
        write_cloud(&cloud, &mut bytes).unwrap();
        let back = read_cloud(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.points.len(), cloud.points.len());
        for (a, b) in back.points.iter().zip(&cloud.points) {
            for k in 0..3 {
                prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        prop_assert_eq!(&back.features, &cloud.features);
        prop_assert_eq!(back.timestamp.to_bits(), cloud.timestamp.to_bits());
        let mut again = Vec::new();
        write_cloud(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn masking_keeps_a_subset(
        pts in prop::collection::vec([0.0..40.0f64, -20.0..20.0f64, -2.0..2.0f64], 1..60),
        rate in 0.0..0.99f64, seed in any::<u64>(),
    ) {
        let n = pts.len();
        let cloud = PointCloud::new(pts, vec![1.0; n], 1, 0.0, Pose2::default()).unwrap();
        let geom = GridGeometry::default();
        let masked = mask_augment(&cloud, rate, seed, &geom).unwrap();
        prop_assert!(masked.len() <= cloud.len());
        prop_assert!(masked.points.iter().all(|p| cloud.points.contains(p)));
        prop_assert_eq!(&masked, &mask_augment(&cloud, rate, seed, &geom).unwrap());
    }

    #[test]
    fn curriculum_is_monotone(e in 0usize..200, n1 in 1usize..20, n2 in 1usize..40, k in 1usize..5) {
        let a = curriculum_stage(e, [n1, n2], k);
        let b = curriculum_stage(e + 1, [n1, n2], k);
        prop_assert!(a <= b && b <= k && a >= 1);
    }

    #[test]
    fn cosine_lr_stays_in_range(total in 1u64..10_000, frac in 0.0..=1.0f64, lr in 1e-6..1.0f64) {
        let step = (total as f64 * frac) as u64;
        let v = cosine_lr(step, total, lr);
        prop_assert!((0.0..=lr).contains(&v));
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(), lr in 1e-7..1.0f64, mask in 0.0..0.99f64,
        rec in any::<bool>(), far in prop::option::of(1.0..100.0f64), dims in [1usize..9, 1usize..40, 1usize..40],
    ) {
        let mut c = RunConfig::default();
        c.set("seed", &seed.to_string()).unwrap();
        c.train.lr = lr;
        c.train.mask_rate = mask;
        c.train.model.recurrent = rec;
        c.train.far = far;
        c.train.model.grid.dims = dims;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(any::<f64>(), 1..30), step in any::<u64>(), t in any::<u64>()) {
        let mut params = ParamStore::new();
        params.add("w", Tensor::vector(vals.clone())).unwrap();
        let mut adam = AdamState::new(&params);
        adam.t = t;
        adam.m[0] = vals.iter().map(|v| -v).collect();
        let ck = Checkpoint { step, config_hash: [3; 32], params, adam };
        let bytes = ck.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}
