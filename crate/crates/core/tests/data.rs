use m3cs::data::*;
use m3cs::geometry::{chamfer_value, Point, PointCloud};
use m3cs::rng::seeded;
use rand_distr::{Distribution, StandardNormal};

fn families() -> Vec<String> {
    FAMILIES.map(String::from).to_vec()
}

fn random_rotation(rng: &mut m3cs::rng::Rng) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn spin(points: &[Point<f64>], r: &[[f64; 3]; 3]) -> Vec<Point<f64>> {
    points.iter().map(|p| [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])).collect()
}

#[test]
fn augmentation_bounds_hold_over_10k_draws() {
    // corners of a cube: all points survive resampling to 8, so per-axis
    // extent and midpoint expose the scale and translation directly
    let corners: Vec<Point<f64>> = (0..8).map(|i| [0, 1, 2].map(|b| if i >> b & 1 == 1 { 1.0 } else { -1.0 })).collect();
    let cloud = PointCloud::new(corners).unwrap();
    let cfg = AugmentConfig { points: 8, ..AugmentConfig::default() };
    let half = 1.0 / 3f64.sqrt();
    let mut rng = seeded(11);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let out = augment(&cloud, &cfg, &mut rng);
        assert_eq!(out.len(), 8);
        for axis in 0..3 {
            let v: Vec<f64> = out.points().iter().map(|p| p[axis]).collect();
            let (min, max) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let scale = (max - min) / (2.0 * half);
            let shift = (max + min) / 2.0;
            assert!((0.8 - 1e-12..=1.2 + 1e-12).contains(&scale), "scale {scale}");
            assert!(shift.abs() <= 0.1 + 1e-12, "shift {shift}");
            lo = lo.min(scale);
            hi = hi.max(scale);
        }
    }
    assert!(lo < 0.801 && hi > 1.199, "range [{lo}, {hi}] not explored");
}

#[test]
fn default_augmentation_yields_1024_points() {
    let data = gen_shapes::<f32>(&families(), 1, 300, Split::Train, 3).unwrap();
    for (c, _) in &data.items {
        assert_eq!(augment(c, &AugmentConfig::default(), &mut seeded(1)).len(), 1024);
    }
}

#[test]
fn same_family_is_closer_than_other_family() {
    let mut rng = seeded(21);
    let (mut intra, mut inter) = (0.0, 0.0);
    for _ in 0..50 {
        let (a, _) = sample_shape("sphere", 256, &mut rng).unwrap();
        let (b, _) = sample_shape("sphere", 256, &mut rng).unwrap();
        let (c, _) = sample_shape("cube", 256, &mut rng).unwrap();
        intra += chamfer_value(&a, &b).unwrap();
        inter += chamfer_value(&a, &c).unwrap();
    }
    assert!(intra < inter, "intra {intra} inter {inter}");
}

#[test]
fn nearest_medoid_chamfer_classifier_recognizes_families() {
    // unit-sphere clouds; distance to a class medoid minimized over rotations
    let prep = |d: Dataset<f64>| d.items.into_iter().map(|(c, l)| (normalize(&c), l)).collect::<Vec<_>>();
    let train = prep(gen_shapes(&families(), 10, 128, Split::Train, 1).unwrap());
    let test = prep(gen_shapes(&families(), 25, 128, Split::Test, 1).unwrap());
    let medoids: Vec<PointCloud<f64>> = (0..4)
        .map(|k| {
            let members: Vec<&PointCloud<f64>> = train.iter().filter(|(_, l)| *l == k).map(|(c, _)| c).collect();
            let cost = |a: &PointCloud<f64>| members.iter().map(|m| chamfer_value(a.points(), m.points()).unwrap()).sum::<f64>();
            (*members.iter().min_by(|a, b| cost(a).total_cmp(&cost(b))).unwrap()).clone()
        })
        .collect();
    let mut rng = seeded(5);
    let rotations: Vec<_> = (0..64).map(|_| random_rotation(&mut rng)).collect();
    let spun: Vec<Vec<Vec<Point<f64>>>> = medoids.iter().map(|m| rotations.iter().map(|r| spin(m.points(), r)).collect()).collect();
    let hits = test
        .iter()
        .filter(|(c, l)| {
            let d: Vec<f64> = spun
                .iter()
                .map(|views| views.iter().map(|v| chamfer_value(c.points(), v).unwrap()).fold(f64::INFINITY, f64::min))
                .collect();
            let best = (0..4).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            best == *l
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn sphere_samples_lie_on_the_surface() {
    let mut rng = seeded(4);
    for _ in 0..10 {
        let (pts, params) = sample_shape("sphere", 500, &mut rng).unwrap();
        let ShapeParams::Sphere { radius } = params else { panic!("{params:?}") };
        for p in pts {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - radius).abs() < 1e-6);
        }
    }
}

#[test]
fn generation_is_seed_deterministic_and_splits_differ() {
    let a = gen_shapes::<f32>(&families(), 3, 64, Split::Train, 9).unwrap();
    let b = gen_shapes::<f32>(&families(), 3, 64, Split::Train, 9).unwrap();
    let t = gen_shapes::<f32>(&families(), 3, 64, Split::Test, 9).unwrap();
    assert_eq!(a.items, b.items);
    assert_ne!(a.items[0].0, t.items[0].0);
    assert!(gen_shapes::<f32>(&["pyramid".to_string()], 1, 64, Split::Train, 9).is_err());
}

#[test]
fn xyz_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_shapes::<f32>(&families(), 2, 50, Split::Train, 2).unwrap();
    let path = dir.path().join("a.xyz");
    save_xyz(&path, &data.items[0].0).unwrap();
    let back: PointCloud<f32> = load_xyz(&path).unwrap();
    for (p, q) in data.items[0].0.points().iter().zip(back.points()) {
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() <= 1e-6 * p[i].abs().max(1.0));
        }
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.ends_with('\n') && text.lines().all(|l| l.split(' ').count() == 3));

    std::fs::write(&path, "").unwrap();
    assert!(load_xyz::<f32>(&path).is_err());
    std::fs::write(&path, "0.5 1.0 -2.25\n").unwrap();
    assert_eq!(load_xyz::<f64>(&path).unwrap().points(), &[[0.5, 1.0, -2.25]]);
    std::fs::write(&path, "0 0 0\n1 x 2\n").unwrap();
    let err = load_xyz::<f64>(&path).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");

    save_dir(dir.path().join("set"), &data).unwrap();
    let again: m3cs::Dataset32 = load_dir(dir.path().join("set"), Split::Train).unwrap();
    assert_eq!(again.len(), data.len());
    let mut names = data.class_names.clone();
    names.sort();
    assert_eq!(again.class_names, names);
}
