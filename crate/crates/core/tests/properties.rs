//! Property tests for the module invariants.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcbev::fusion::{detection_loss, fuse_bev_features, iou_bev, match_radar_to_heatmap, DetectionBox, Heatmap};
use rcbev::geometry::{project_points, rasterize_depth_map, transform_ego, CameraRig, EgoPose, Vec3};
use rcbev::kan::{camera_gates, BSplineBasis, DepthNetConfig, DepthNetParams, KanLayer};
use rcbev::nnprims::{depth_refine, softmax_over_depth};
use rcbev::voxelpool::{pool, pool_aligned_frames, pool_reference, BevGridConfig, FeaturedPoints, PoolMethod};
use rcbev::Tensor;

fn grid(nx: usize, ny: usize) -> BevGridConfig {
    BevGridConfig {
        x_range: (-20.0, 20.0),
        y_range: (-16.0, 16.0),
        nx,
        ny,
    }
}

fn random_points(rng: &mut ChaCha8Rng, m: usize, c: usize) -> FeaturedPoints {
    let positions = (0..m)
        .map(|_| [rng.random_range(-24.0..24.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0)])
        .collect();
    let features = (0..m * c).map(|_| rng.random_range(-5.0..5.0)).collect();
    FeaturedPoints::new(positions, features, c).unwrap()
}

fn boxed(rng: &mut ChaCha8Rng) -> DetectionBox {
    DetectionBox {
        center: [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.5],
        size: [rng.random_range(0.2..4.0), rng.random_range(0.2..6.0), 1.5],
        yaw: rng.random_range(-3.0..3.0),
        velocity: [0.0, 0.0],
        class_id: 0,
        score: 1.0,
        attribute_id: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalised_positive_and_shift_invariant(
        seed in any::<u64>(), cd in 1usize..30, h in 1usize..5, w in 1usize..5, shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[cd, h, w], |_| rng.random_range(-20.0..20.0));
        let before = logits.clone();
        let p = softmax_over_depth(&logits).unwrap();
        prop_assert_eq!(&logits, &before);
        let shifted = Tensor::from_fn(&[cd, h, w], |i| logits.data()[i] + shift);
        let q = softmax_over_depth(&shifted).unwrap();
        for pix in 0..h * w {
            let s: f64 = (0..cd).map(|l| p.data()[l * h * w + pix]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
        prop_assert!(p.max_abs_diff(&q) <= 1e-12);
    }

    #[test]
    fn identity_refine_kernel_is_bitwise_identity(seed in any::<u64>(), c in 1usize..4, cd in 3usize..10, h in 1usize..4, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::from_fn(&[c, cd, h, w], |_| rng.random_range(-1.0..1.0));
        let mut k = Tensor::zeros(&[3, 3]);
        k.set(&[1, 1], 1.0);
        prop_assert_eq!(depth_refine(&f, &k).unwrap(), f);
    }

    #[test]
    fn reference_pooling_is_permutation_invariant(seed in any::<u64>(), m in 0usize..2000, c in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(17, 11);
        let pts = random_points(&mut rng, m, c);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let shuffled = FeaturedPoints::new(
            order.iter().map(|&i| pts.positions[i]).collect(),
            order.iter().flat_map(|&i| pts.row(i).to_vec()).collect(),
            c,
        ).unwrap();
        let a = pool_reference(&pts, &cfg).unwrap();
        let b = pool_reference(&shuffled, &cfg).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
        prop_assert_eq!(a.dropped, b.dropped);
    }

    #[test]
    fn every_method_conserves_mass(seed in any::<u64>(), m in 0usize..3000, c in 1usize..6, workers in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(23, 9);
        let pts = random_points(&mut rng, m, c);
        let inside: f64 = (0..m)
            .filter(|&i| cfg.cell_of(pts.positions[i][0], pts.positions[i][1]).is_some())
            .map(|i| pts.row(i).iter().sum::<f64>())
            .sum();
        for method in PoolMethod::ALL {
            let g = pool(&pts, &cfg, method, workers).unwrap();
            let bound = if method == PoolMethod::Concurrent { 1e-6 } else { 1e-9 };
            prop_assert!((g.data.sum() - inside).abs() < bound, "{:?}", method);
        }
    }

    #[test]
    fn aligning_a_frame_to_its_own_pose_changes_nothing(seed in any::<u64>(), yaw in -3.1f64..3.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = grid(16, 16);
        let pts = random_points(&mut rng, 500, 2);
        let pose = EgoPose::planar(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), yaw, 0.0);
        let aligned = pool_aligned_frames(&[(pts.clone(), pose.clone())], &pose, &cfg, PoolMethod::Reference, 1).unwrap();
        let direct = pool_reference(&pts, &cfg).unwrap();
        prop_assert!(aligned.max_abs_diff(&direct) < 1e-9);
    }

    #[test]
    fn ego_transform_is_rigid(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = || EgoPose::planar(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-3.1..3.1), 0.0);
        let (a, b) = (pose(), pose());
        let pts: Vec<Vec3> = (0..20).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-2.0..2.0)]).collect();
        let moved = transform_ego(&pts, &a, &b);
        let dist = |p: &Vec3, q: &Vec3| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        for i in 0..pts.len() {
            for j in 0..i {
                prop_assert!((dist(&pts[i], &pts[j]) - dist(&moved[i], &moved[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rasterization_ignores_point_order(seed in any::<u64>(), n in 0usize..600) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = CameraRig::looking_along(rng.random_range(-3.0..3.0), [0.0, 0.0, 1.5], 1.2, (48, 80)).unwrap();
        let mut pts: Vec<Vec3> = (0..n).map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-1.0..3.0)]).collect();
        let a = rasterize_depth_map(&project_points(&pts, &rig).unwrap().rows, rig.image_size);
        pts.shuffle(&mut rng);
        let b = rasterize_depth_map(&project_points(&pts, &rig).unwrap().rows, rig.image_size);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kan_layer_is_linear_in_its_coefficients(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = BSplineBasis::uniform(6, 3, -1.0, 1.0).unwrap();
        let l1 = KanLayer::random(3, 4, basis.clone(), 1.0, &mut rng);
        let l2 = KanLayer::random(3, 4, basis.clone(), 1.0, &mut rng);
        let mix = |f: fn(&KanLayer) -> &Vec<f64>| -> Vec<f64> { f(&l1).iter().zip(f(&l2)).map(|(a, b)| alpha * a + beta * b).collect() };
        let mixed = KanLayer::new(3, 4, basis, mix(|l| &l.spline_coeffs), mix(|l| &l.shortcut_weights)).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
        let (f1, f2, fm) = (l1.forward(&x).unwrap(), l2.forward(&x).unwrap(), mixed.forward(&x).unwrap());
        for j in 0..4 {
            prop_assert!((fm[j] - (alpha * f1[j] + beta * f2[j])).abs() <= 1e-12);
        }
    }

    #[test]
    fn gates_stay_inside_the_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DepthNetConfig { feature_channels: 8, depth_bins: 4, context_channels: 2, kan_hidden: vec![4], ..DepthNetConfig::default() };
        let params = DepthNetParams::random(&cfg, seed).unwrap();
        let cam: Vec<f64> = (0..27).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = camera_gates(&cam, &params).unwrap();
        prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bev_iou_is_symmetric_bounded_and_reflexive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (boxed(&mut rng), boxed(&mut rng));
        let (ab, ba) = (iou_bev(&a, &b), iou_bev(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_order_free(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let (a, b, c) = (t(), t(), t());
        let abc = fuse_bev_features(&a, &b, &c).unwrap().data;
        for (x, y, z) in [(&b, &a, &c), (&c, &b, &a), (&a, &c, &b)] {
            prop_assert!(fuse_bev_features(x, y, z).unwrap().data.max_abs_diff(&abc) <= 1e-15);
        }
    }

    #[test]
    fn radar_matches_respect_thresholds(seed in any::<u64>(), iou_thresh in 0.0f64..0.6, score_thresh in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BevGridConfig { x_range: (-10.0, 10.0), y_range: (-10.0, 10.0), nx: 10, ny: 10 };
        let heat = Heatmap::new(Tensor::from_fn(&[2, 10, 10], |_| rng.random_range(0.0..1.0))).unwrap();
        let boxes: Vec<DetectionBox> = (0..15).map(|_| boxed(&mut rng)).collect();
        let m = match_radar_to_heatmap(&boxes, &heat, &cfg, score_thresh, iou_thresh).unwrap();
        prop_assert_eq!(&m, &match_radar_to_heatmap(&boxes, &heat, &cfg, score_thresh, iou_thresh).unwrap());
        for x in &m {
            prop_assert!(x.iou >= iou_thresh && x.iou > 0.0);
            prop_assert!(heat.cell_max(x.cell) >= score_thresh);
        }
    }

    #[test]
    fn detection_loss_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Heatmap::new(Tensor::from_fn(&[2, 3, 3], |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 })).unwrap();
        let pred = Heatmap::new(Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(0.0..1.0))).unwrap();
        let pairs = vec![(boxed(&mut rng), boxed(&mut rng))];
        let l = detection_loss(&pred, &gt, &pairs).unwrap();
        prop_assert!(l.total >= 0.0 && l.heatmap >= 0.0 && l.bbox >= 0.0);
        let perfect = detection_loss(&gt, &gt, &[(pairs[0].1.clone(), pairs[0].1.clone())]).unwrap();
        prop_assert!(perfect.total < 1e-5, "{}", perfect.total);
    }
}
