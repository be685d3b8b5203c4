//! Point clouds, farthest point sampling, k-NN grouping into patches, and the
//! Chamfer reconstruction loss.

use std::cmp::Ordering;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Point<T> = [T; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point<T>>,
    pub label: Option<usize>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("point cloud contains non-finite coordinates"));
        }
        Ok(Self { points, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `N x 3` tensor of the coordinates.
    pub fn to_tensor(&self) -> Tensor<T> {
        flatten(&self.points)
    }
}

pub fn flatten<T: Scalar>(points: &[Point<T>]) -> Tensor<T> {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(&[points.len(), 3], data).expect("n x 3")
}

pub fn sq_dist<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling. Each new index maximizes its squared
/// distance to the already selected set; ties go to the lower index.
pub fn fps<T: Scalar>(cloud: &PointCloud<T>, count: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if count == 0 || count > n {
        return Err(invalid(format!("fps: cannot select {count} of {n} points")));
    }
    if start >= n {
        return Err(invalid(format!("fps: start index {start} out of range for {n} points")));
    }
    let pts = cloud.points();
    let mut min_d = vec![T::infinity(); n];
    let mut chosen = Vec::with_capacity(count);
    let mut current = start;
    for _ in 0..count {
        chosen.push(current);
        min_d[current] = T::neg_infinity();
        let mut best = None::<(usize, T)>;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == T::neg_infinity() {
                continue;
            }
            let d = sq_dist(p, &pts[current]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        match best {
            Some((i, _)) => current = i,
            None => break,
        }
    }
    Ok(chosen)
}

/// Indices of the `k` nearest cloud points to each query, ascending by
/// squared distance, ties broken by lower index.
pub fn knn<T: Scalar>(queries: &[Point<T>], cloud: &PointCloud<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if k > n {
        return Err(invalid(format!("knn: k = {k} exceeds cloud size {n}")));
    }
    Ok(queries.iter().map(|q| nearest(q, cloud.points(), k, None)).collect())
}

fn nearest<T: Scalar>(q: &Point<T>, pts: &[Point<T>], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<(T, usize)> = pts
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (sq_dist(q, p), i))
        .collect();
    let cmp = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order.into_iter().map(|(_, i)| i).collect()
}

/// `G` patches of `S` points each: a center plus its `S - 1` nearest
/// neighbours, with coordinates relative to the center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub centers: Vec<Point<T>>,
    /// `G * S` center-relative points, patch-major.
    pub groups: Vec<Point<T>>,
    /// `G * S` indices into the source cloud; entry `i * S` is center `i`.
    pub source_indices: Vec<usize>,
    pub group_size: usize,
}

impl<T: Scalar> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn group(&self, i: usize) -> &[Point<T>] {
        &self.groups[i * self.group_size..(i + 1) * self.group_size]
    }

    pub fn indices(&self, i: usize) -> &[usize] {
        &self.source_indices[i * self.group_size..(i + 1) * self.group_size]
    }

    /// `G x 3`.
    pub fn centers_tensor(&self) -> Tensor<T> {
        flatten(&self.centers)
    }

    /// `(G * S) x 3` relative coordinates.
    pub fn groups_tensor(&self) -> Tensor<T> {
        flatten(&self.groups)
    }

    /// `(|rows| * S) x 3` relative coordinates of the selected patches.
    pub fn groups_tensor_of(&self, rows: &[usize]) -> Tensor<T> {
        let pts: Vec<Point<T>> = rows.iter().flat_map(|&r| self.group(r).iter().copied()).collect();
        flatten(&pts)
    }
}

pub fn group<T: Scalar>(cloud: &PointCloud<T>, count: usize, size: usize, start: usize) -> Result<PatchSet<T>> {
    let n = cloud.len();
    if size == 0 || size > n {
        return Err(invalid(format!("group: patch size {size} invalid for {n} points")));
    }
    let centers_idx = fps(cloud, count, start)?;
    let pts = cloud.points();
    let mut centers = Vec::with_capacity(count);
    let mut groups = Vec::with_capacity(count * size);
    let mut source_indices = Vec::with_capacity(count * size);
    for &ci in &centers_idx {
        let c = pts[ci];
        centers.push(c);
        source_indices.push(ci);
        source_indices.extend(nearest(&c, pts, size - 1, Some(ci)));
    }
    for (gi, &ci) in centers_idx.iter().enumerate() {
        let c = pts[ci];
        for &j in &source_indices[gi * size..(gi + 1) * size] {
            let p = pts[j];
            groups.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(PatchSet {
        centers,
        groups,
        source_indices,
        group_size: size,
    })
}

/// Differentiable symmetric Chamfer distance between two point sets.
pub fn chamfer<T: Scalar>(graph: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    graph.chamfer(pred, target)
}

/// Chamfer distance of two plain point sets.
pub fn chamfer_value<T: Scalar>(pred: &[Point<T>], target: &[Point<T>]) -> Result<T> {
    if pred.is_empty() || target.is_empty() {
        return Err(invalid("chamfer: empty point set"));
    }
    let mut g = Graph::new();
    let p = g.constant(flatten(pred));
    let t = g.constant(flatten(target));
    let l = g.chamfer(p, t)?;
    Ok(g.value(l).item())
}
