//! Synthetic shape datasets, `.xyz` files, directory manifests, and
//! training-time augmentation.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::{derive, Rng};
use crate::scalar::Scalar;

pub const FAMILIES: [&str; 4] = ["sphere", "cube", "torus", "cylinder"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub items: Vec<(PointCloud<T>, usize)>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Item indices grouped by label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, (_, l)) in self.items.iter().enumerate() {
            out[*l].push(i);
        }
        out
    }

    pub fn clouds(&self) -> Vec<PointCloud<T>> {
        self.items.iter().map(|(c, _)| c.clone()).collect()
    }
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = [0.0; 4];
    loop {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Size of a sampled shape, needed by surface-membership checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeParams {
    Sphere { radius: f64 },
    Cube { side: f64 },
    Torus { major: f64, minor: f64 },
    Cylinder { radius: f64, height: f64 },
}

/// Uniform surface samples of one shape with random size and orientation,
/// centered at the origin.
pub fn sample_shape(family: &str, points: usize, rng: &mut Rng) -> Result<(Vec<[f64; 3]>, ShapeParams)> {
    let params = match family {
        "sphere" => ShapeParams::Sphere { radius: rng.random_range(0.6..1.0) },
        "cube" => ShapeParams::Cube { side: rng.random_range(0.8..1.4) },
        "torus" => ShapeParams::Torus { major: rng.random_range(0.5..0.8), minor: rng.random_range(0.15..0.3) },
        "cylinder" => ShapeParams::Cylinder { radius: rng.random_range(0.3..0.6), height: rng.random_range(0.8..1.6) },
        other => return Err(invalid(format!("unknown shape family {other:?}"))),
    };
    let rot = random_rotation(rng);
    let mut out = Vec::with_capacity(points);
    while out.len() < points {
        let p = match params {
            ShapeParams::Sphere { radius } => unit_vector(rng).map(|c| c * radius),
            ShapeParams::Cube { side } => {
                let h = side / 2.0;
                let face = rng.random_range(0..6);
                let (u, v) = (rng.random_range(-h..h), rng.random_range(-h..h));
                let s = if face % 2 == 0 { h } else { -h };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            ShapeParams::Torus { major, minor } => {
                // rejection on the area element (major + minor cos v)
                let (u, v) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                if rng.random_range(0.0..major + minor) > major + minor * v.cos() {
                    continue;
                }
                let r = major + minor * v.cos();
                [r * u.cos(), r * u.sin(), minor * v.sin()]
            }
            ShapeParams::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let pick = rng.random_range(0.0..side + 2.0 * cap);
                if pick < side {
                    let a = rng.random_range(0.0..2.0 * PI);
                    [radius * a.cos(), radius * a.sin(), rng.random_range(-height / 2.0..height / 2.0)]
                } else {
                    let a = rng.random_range(0.0..2.0 * PI);
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if pick < side + cap { height / 2.0 } else { -height / 2.0 };
                    [r * a.cos(), r * a.sin(), z]
                }
            }
        };
        out.push(rotate(&rot, p));
    }
    Ok((out, params))
}

fn to_cloud<T: Scalar>(pts: &[[f64; 3]]) -> Result<PointCloud<T>> {
    PointCloud::new(pts.iter().map(|p| p.map(T::from_f64_lossy)).collect())
}

/// `per_class` clouds of each family, labels in family order.
pub fn gen_shapes<T: Scalar>(families: &[String], per_class: usize, points: usize, split: Split, seed: u64) -> Result<Dataset<T>> {
    if families.is_empty() {
        return Err(invalid("no shape families requested"));
    }
    let split_key = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut items = Vec::with_capacity(families.len() * per_class);
    for (label, fam) in families.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = derive(seed, &[split_key, label as u64, i as u64]);
            let (pts, _) = sample_shape(fam, points, &mut rng)?;
            items.push((to_cloud(&pts)?.with_label(label), label));
        }
    }
    Ok(Dataset {
        items,
        class_names: families.to_vec(),
        split,
    })
}

/// Parses ASCII `x y z` lines. Blank lines are skipped.
pub fn parse_xyz<T: Scalar>(text: &str, path: &str) -> Result<PointCloud<T>> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.replace('\u{2212}', "-").parse::<f64>().map_err(|e| err(format!("{tok:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 3 {
            return Err(err(format!("expected 3 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite coordinate".into()));
        }
        pts.push([vals[0], vals[1], vals[2]].map(T::from_f64_lossy));
    }
    if pts.is_empty() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: "file contains no points".into(),
        });
    }
    PointCloud::new(pts)
}

pub fn load_xyz<T: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    parse_xyz(&fs::read_to_string(path)?, &path.display().to_string())
}

/// One point per line, coordinates separated by single spaces. Values are
/// printed with the shortest representation that parses back exactly.
pub fn save_xyz<T: Scalar>(path: impl AsRef<Path>, cloud: &PointCloud<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `manifest.csv` (`path,label`) in `dir`. Class names are the sorted
/// distinct labels.
pub fn load_dir<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(invalid(format!("{}: header must be path,label", dir.join("manifest.csv").display())));
    }
    let mut rows: Vec<(PathBuf, String)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        rows.push((dir.join(&rec[0]), rec[1].to_string()));
    }
    let mut class_names: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let mut items = Vec::with_capacity(rows.len());
    for (path, label) in rows {
        let l = class_names.binary_search(&label).expect("label present");
        items.push((load_xyz::<T>(&path)?.with_label(l), l));
    }
    if items.is_empty() {
        return Err(invalid(format!("{}: manifest lists no clouds", dir.display())));
    }
    Ok(Dataset {
        items,
        class_names,
        split,
    })
}

/// Writes every cloud as `.xyz` plus `manifest.csv`.
pub fn save_dir<T: Scalar>(dir: impl AsRef<Path>, data: &Dataset<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(["path", "label"])?;
    for (i, (cloud, label)) in data.items.iter().enumerate() {
        let name = format!("{}_{i:05}.xyz", data.class_names[*label]);
        save_xyz(dir.join(&name), cloud)?;
        w.write_record([name.as_str(), data.class_names[*label].as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    pub translate: f64,
    pub points: usize,
    /// Only resample to `points`; no scaling or translation.
    pub identity: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.8, 1.2),
            translate: 0.1,
            points: 1024,
            identity: false,
        }
    }
}

/// Exactly `points` points: a random subset when the cloud is larger,
/// sampling with replacement for the shortfall when it is smaller.
pub fn resample<T: Scalar>(cloud: &PointCloud<T>, points: usize, rng: &mut Rng) -> PointCloud<T> {
    let n = cloud.len();
    let pts = cloud.points();
    let mut idx: Vec<usize> = if points <= n {
        sample(rng, n, points).into_vec()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.extend((n..points).map(|_| rng.random_range(0..n)));
        all
    };
    idx.sort_unstable();
    let out = PointCloud::new(idx.iter().map(|&i| pts[i]).collect()).expect("non-empty");
    match cloud.label {
        Some(l) => out.with_label(l),
        None => out,
    }
}

/// Centroid at the origin and largest distance from it equal to one.
pub fn normalize<T: Scalar>(cloud: &PointCloud<T>) -> PointCloud<T> {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let mean: [f64; 3] = [0, 1, 2].map(|k| pts.iter().map(|p| p[k].to_f64_lossy()).sum::<f64>() / n);
    let centered: Vec<[f64; 3]> = pts.iter().map(|p| [0, 1, 2].map(|k| p[k].to_f64_lossy() - mean[k])).collect();
    let radius = centered.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let mut out = PointCloud::new(centered.iter().map(|p| p.map(|v| T::from_f64_lossy(v * s))).collect()).expect("non-empty");
    out.label = cloud.label;
    out
}

/// Unit-sphere normalization, random per-axis scale and translation, then
/// resampling to a fixed count.
pub fn augment<T: Scalar>(cloud: &PointCloud<T>, cfg: &AugmentConfig, rng: &mut Rng) -> PointCloud<T> {
    if cfg.identity {
        if cloud.len() == cfg.points {
            return cloud.clone();
        }
        return resample(cloud, cfg.points, rng);
    }
    let s: [f64; 3] = [0; 3].map(|_| rng.random_range(cfg.scale.0..=cfg.scale.1));
    let t: [f64; 3] = [0; 3].map(|_| rng.random_range(-cfg.translate..=cfg.translate));
    let cloud = normalize(cloud);
    let moved: Vec<Point<T>> = cloud
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|i| T::from_f64_lossy(p[i].to_f64_lossy() * s[i] + t[i])))
        .collect();
    let mut out = PointCloud::new(moved).expect("non-empty");
    out.label = cloud.label;
    resample(&out, cfg.points, rng)
}

/// Deterministic fixed-size, unit-sphere view used at evaluation time.
pub fn prepare_eval<T: Scalar>(cloud: &PointCloud<T>, points: usize) -> PointCloud<T> {
    let cloud = normalize(cloud);
    if cloud.len() == points {
        return cloud;
    }
    resample(&cloud, points, &mut derive(0, &[cloud.len() as u64, points as u64]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sphere_points_on_surface() {
        let (pts, params) = sample_shape("sphere", 500, &mut seeded(1)).unwrap();
        let ShapeParams::Sphere { radius } = params else { panic!() };
        for p in pts {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - radius).abs() < 1e-6);
        }
    }

    #[test]
    fn class_counts_exact_and_deterministic() {
        let fams: Vec<String> = FAMILIES.map(String::from).to_vec();
        let a = gen_shapes::<f32>(&fams, 3, 64, Split::Train, 5).unwrap();
        assert_eq!(a.len(), 12);
        assert!(a.by_class().iter().all(|c| c.len() == 3));
        let b = gen_shapes::<f32>(&fams, 3, 64, Split::Train, 5).unwrap();
        assert_eq!(a.items[7].0, b.items[7].0);
        let t = gen_shapes::<f32>(&fams, 3, 64, Split::Test, 5).unwrap();
        assert_ne!(a.items[0].0, t.items[0].0);
        assert!(gen_shapes::<f32>(&["cone".to_string()], 1, 8, Split::Train, 0).is_err());
    }

    #[test]
    fn xyz_parsing() {
        let c = parse_xyz::<f64>("0.5 1.0 \u{2212}2.25\n", "t").unwrap();
        assert_eq!(c.points(), &[[0.5, 1.0, -2.25]]);
        assert!(parse_xyz::<f64>("", "t").is_err());
        let err = parse_xyz::<f64>("1 2 3\n1 2\n", "t").unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn augment_sizes() {
        let (pts, _) = sample_shape("cube", 300, &mut seeded(2)).unwrap();
        let cloud = to_cloud::<f32>(&pts).unwrap();
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&cloud, &cfg, &mut seeded(3)).len(), 1024);
        let small = AugmentConfig { points: 100, ..cfg };
        assert_eq!(augment(&cloud, &small, &mut seeded(3)).len(), 100);
        let ident = AugmentConfig { points: 300, identity: true, ..cfg };
        assert_eq!(augment(&cloud, &ident, &mut seeded(3)), cloud);
    }
}
