use std::path::Path;

use boundseg::boundary::{
    annotate_boundary_gt, bpm_loss, parse_bnd, perturb_random_flip, to_bnd_string, BoundaryField, BoundaryRule,
};
use boundseg::cloud::{parse_pts, to_pts_string};
use boundseg::encode::{global_aggregation, masked_local_aggregation, Aggregator};
use boundseg::geoconv::{gco_forward, kernel_init};
use boundseg::knn::{knn_index, knn_index_points, relative_positions, relative_positions_points};
use boundseg::nn::Activation;
use boundseg::PointCloud;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(seed: u64, n: usize, classes: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
    let colors = Array2::from_shape_fn((n, 3), |_| rng.random_range(0.0..=1.0));
    // spatially coherent labels so boundaries are a thin set
    let labels = (0..n)
        .map(|i| {
            ((positions[[i, 0]] + 2.0) / 4.0 * classes as f64)
                .floor()
                .min(classes as f64 - 1.0) as usize
        })
        .collect();
    PointCloud::new(positions, colors, Some(labels), classes).unwrap()
}

fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // random unit quaternion
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / norm);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pts_text_round_trips(seed in any::<u64>(), n in 1usize..60, classes in 2usize..6, labeled in any::<bool>()) {
        let mut cloud = random_cloud(seed, n, classes);
        if !labeled {
            cloud = cloud.without_labels();
        }
        // nine significant digits: text is a fixed point, values agree to 1e-8 relative
        let text = to_pts_string(&cloud);
        let back = parse_pts(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(to_pts_string(&back), text);
        prop_assert_eq!(back.labels(), cloud.labels());
        prop_assert_eq!(back.num_classes(), cloud.num_classes());
        let pairs = back.positions().iter().zip(cloud.positions()).chain(back.colors().iter().zip(cloud.colors()));
        for (a, b) in pairs {
            prop_assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300), "{} vs {}", a, b);
        }
    }

    #[test]
    fn bnd_text_round_trips(seed in any::<u64>(), n in 1usize..80, soft in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = if soft {
            BoundaryField::from_soft((0..n).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap()
        } else {
            BoundaryField::from_hard((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap()
        };
        let back = parse_bnd(&to_bnd_string(&field), Path::new("mem")).unwrap();
        prop_assert_eq!(back, field);
    }

    #[test]
    fn annotation_follows_point_permutation(seed in any::<u64>(), n in 40usize..120) {
        let cloud = random_cloud(seed, n, 3);
        let rule = BoundaryRule { k: 8, ratio: 0.4 };
        let base = annotate_boundary_gt(&cloud, &knn_index(&cloud, 8).unwrap(), &rule).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let permuted = cloud.permuted(&order).unwrap();
        let field = annotate_boundary_gt(&permuted, &knn_index(&permuted, 8).unwrap(), &rule).unwrap();
        let (a, b) = (base.hard().unwrap(), field.hard().unwrap());
        for (new, &old) in order.iter().enumerate() {
            prop_assert_eq!(b[new], a[old]);
        }
    }

    #[test]
    fn raising_the_ratio_never_adds_boundary_points(seed in any::<u64>(), lo in 0.05f64..0.9, step in 0.0f64..0.09) {
        let cloud = random_cloud(seed, 80, 4);
        let idx = knn_index(&cloud, 10).unwrap();
        let loose = annotate_boundary_gt(&cloud, &idx, &BoundaryRule { k: 10, ratio: lo }).unwrap();
        let strict = annotate_boundary_gt(&cloud, &idx, &BoundaryRule { k: 10, ratio: lo + step }).unwrap();
        for (s, l) in strict.boundary_mask().iter().zip(loose.boundary_mask()) {
            prop_assert!(!s || l);
        }
    }

    #[test]
    fn flipping_twice_with_one_seed_restores(seed in any::<u64>(), n in 1usize..200, f in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = BoundaryField::from_hard((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let once = perturb_random_flip(&field, f, seed).unwrap();
        let twice = perturb_random_flip(&once, f, seed).unwrap();
        prop_assert_eq!(twice.hard(), field.hard());
        let changed = once.hard().unwrap().iter().zip(field.hard().unwrap()).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (f * n as f64).round() as usize);
    }

    #[test]
    fn boundary_loss_is_non_negative(seed in any::<u64>(), n in 1usize..50, w1 in 0.1f64..20.0, w2 in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = BoundaryField::from_soft((0..n).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let truth = BoundaryField::from_hard((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let (loss, grad) = bpm_loss(&pred, &truth, w1, w2).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gco_ignores_uniform_scale(seed in any::<u64>(), m in 2usize..5, scale_exp in -1.0f64..1.0) {
        let cloud = random_cloud(seed, 30, 2);
        let s = 10f64.powf(scale_exp);
        let scaled = cloud.map_positions(|p| p.map(|v| v * s)).unwrap();
        let bank = kernel_init(m, 3, seed).unwrap();
        let out = |c: &PointCloud| {
            let idx = knn_index(c, m).unwrap();
            gco_forward(&relative_positions(c, &idx).unwrap(), &bank, Activation::Identity).unwrap().0
        };
        let (a, b) = (out(&cloud), out(&scaled));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn gco_ignores_joint_rotation(seed in any::<u64>(), m in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(seed, 30, 2);
        let r = rotation(&mut rng);
        let turned = cloud.map_positions(|p| rotate(&r, p)).unwrap();
        let bank = kernel_init(m, 3, seed).unwrap();
        let mut turned_bank = bank.clone();
        for mut row in turned_bank.vectors.value.rows_mut() {
            let v = rotate(&r, [row[0], row[1], row[2]]);
            row.assign(&ndarray::arr1(&v));
        }
        let idx = knn_index(&cloud, m).unwrap();
        let a = gco_forward(&relative_positions(&cloud, &idx).unwrap(), &bank, Activation::Identity).unwrap().0;
        let b = gco_forward(&relative_positions(&turned, &idx).unwrap(), &turned_bank, Activation::Identity).unwrap().0;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn masked_sources_never_reach_outputs(seed in any::<u64>(), n in 12usize..40, k in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let idx = knn_index_points(positions.view(), k).unwrap();
        let rel = relative_positions_points(positions.view(), &idx).unwrap();
        let agg = Aggregator::new(5, 4, 3, 6, 7, &mut rng);
        let hard: Vec<u8> = (0..n).map(|_| u8::from(!rng.random_bool(0.3))).collect();
        let mask = BoundaryField::from_hard(hard.clone()).unwrap();
        let mut features = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0));
        let before = masked_local_aggregation(&agg, &features, &idx, &rel, &mask).unwrap();
        for (i, &g) in hard.iter().enumerate() {
            if g == 0 {
                features.row_mut(i).mapv_inplace(|_| rng.random_range(-50.0..50.0));
            }
        }
        let after = masked_local_aggregation(&agg, &features, &idx, &rel, &mask).unwrap();
        prop_assert_eq!(before, after);
        let ones = BoundaryField::from_hard(vec![1; n]).unwrap();
        prop_assert_eq!(
            masked_local_aggregation(&agg, &features, &idx, &rel, &ones).unwrap(),
            global_aggregation(&agg, &features, &idx, &rel).unwrap()
        );
    }
}
