//! Superpixels from cosine-distance K-means over a layer's spatial
//! feature vectors.
//!
//! Points are assigned to the centroid at minimal cosine distance
//! `1 - p.mu / ((|p| + eps)(|mu| + eps))` and centroids are the arithmetic
//! mean of their members. That pair is not a proper Lloyd pair (the mean
//! does not minimise the cosine cost of its cluster), so the objective of a
//! partition is always evaluated at its mean centroids and an iteration
//! that would raise it is rejected. The objective trace is therefore
//! non-increasing. `spherical` switches to mean-of-unit-vectors centroids,
//! which do minimise the cluster cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bundle::LayerRecord;
use crate::error::{Error, Result};
use crate::resize::nearest_resize;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-12;

/// Superpixel assignment grid of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub layer_name: String,
    /// `[h, w]`, values in `[0, m)`.
    pub labels: Tensor<i32>,
    /// Number of centroids requested.
    pub m: usize,
}

impl LabelMap {
    pub fn new(layer_name: impl Into<String>, labels: Tensor<i32>, m: usize) -> Result<Self> {
        if labels.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "label maps are [h, w], got {:?}",
                labels.shape()
            )));
        }
        if m == 0 || labels.data().iter().any(|&l| l < 0 || l as usize >= m) {
            return Err(Error::InvalidArgument(format!(
                "labels must lie in [0, {m})"
            )));
        }
        Ok(Self {
            layer_name: layer_name.into(),
            labels,
            m,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.labels.shape()[0], self.labels.shape()[1])
    }

    /// Nearest-cell resize; never introduces a label absent from `self`.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<Self> {
        Ok(Self {
            layer_name: self.layer_name.clone(),
            labels: nearest_resize(&self.labels, out_h, out_w)?,
            m: self.m,
        })
    }
}

pub fn nearest_resize_labels(src: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    src.resized(out_h, out_w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub spherical: bool,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-5,
            restarts: 1,
            spherical: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per point, canonicalised by first occurrence.
    pub labels: Vec<i32>,
    /// `[m, d]`, rows in canonical label order.
    pub centroids: Tensor<f32>,
    pub objective: f64,
    /// Objective after each accepted iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when the returned labels are exactly the nearest-centroid
    /// assignment of the returned centroids.
    pub converged: bool,
}

struct Points<'a> {
    data: &'a [f32],
    n: usize,
    d: usize,
    norms: Vec<f64>,
}

impl<'a> Points<'a> {
    fn new(t: &'a Tensor<f32>) -> Result<Self> {
        let (n, d) = match t.shape() {
            [n, d] => (*n, *d),
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "points must be [n, d], got {other:?}"
                )))
            }
        };
        let data = t.data();
        let norms = data
            .chunks_exact(d)
            .map(|p| {
                p.iter()
                    .map(|&x| f64::from(x) * f64::from(x))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(Self { data, n, d, norms })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Cosine distance with the epsilon-padded norms. Zero vectors are at
/// distance exactly 1 from everything.
pub fn cosine_distance(p: &[f32], p_norm: f64, mu: &[f64], mu_norm: f64) -> f64 {
    let dot: f64 = p.iter().zip(mu).map(|(&a, &b)| f64::from(a) * b).sum();
    1.0 - dot / ((p_norm + NORM_EPS) * (mu_norm + NORM_EPS))
}

#[derive(Clone)]
struct Centroids {
    d: usize,
    values: Vec<f64>,
    norms: Vec<f64>,
}

impl Centroids {
    fn from_rows(rows: Vec<Vec<f64>>, d: usize) -> Self {
        let norms = rows
            .iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self {
            d,
            values: rows.into_iter().flatten().collect(),
            norms,
        }
    }

    fn m(&self) -> usize {
        self.norms.len()
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.d..(j + 1) * self.d]
    }

    fn distance(&self, pts: &Points, i: usize, j: usize) -> f64 {
        cosine_distance(pts.row(i), pts.norms[i], self.row(j), self.norms[j])
    }

    /// Nearest centroid, ties to the lowest index.
    fn nearest(&self, pts: &Points, i: usize) -> (usize, f64) {
        let mut best = (0, self.distance(pts, i, 0));
        for j in 1..self.m() {
            let dist = self.distance(pts, i, j);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best
    }
}

fn assign(pts: &Points, c: &Centroids) -> Vec<usize> {
    (0..pts.n)
        .into_par_iter()
        .map(|i| c.nearest(pts, i).0)
        .collect()
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from clusters that keep at least one member.
fn repair_empty(pts: &Points, c: &Centroids, labels: &mut [usize]) {
    let m = c.m();
    let mut counts = vec![0usize; m];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..m {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] < 2 {
                continue;
            }
            let dist = c.distance(pts, i, l);
            if best.is_none_or(|(_, bd)| dist > bd) {
                best = Some((i, dist));
            }
        }
        if let Some((i, _)) = best {
            counts[labels[i]] -= 1;
            labels[i] = j;
            counts[j] = 1;
        }
    }
}

fn update(pts: &Points, labels: &[usize], m: usize, spherical: bool) -> Centroids {
    let d = pts.d;
    let mut sums = vec![vec![0.0f64; d]; m];
    let mut counts = vec![0usize; m];
    // Sequential in point order so sums do not depend on the thread count.
    for (i, &l) in labels.iter().enumerate() {
        let scale = if spherical {
            if pts.norms[i] == 0.0 {
                continue;
            }
            1.0 / pts.norms[i]
        } else {
            1.0
        };
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(pts.row(i)) {
            *s += f64::from(x) * scale;
        }
    }
    for (row, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for x in row.iter_mut() {
                *x /= n as f64;
            }
        }
    }
    Centroids::from_rows(sums, d)
}

fn objective(pts: &Points, c: &Centroids, labels: &[usize]) -> f64 {
    let dists: Vec<f64> = (0..pts.n)
        .into_par_iter()
        .map(|i| c.distance(pts, i, labels[i]))
        .collect();
    dists.iter().sum()
}

/// k-means++ style seeding under cosine distance.
fn init_centroids(pts: &Points, m: usize, rng: &mut ChaCha8Rng) -> Centroids {
    let nonzero: Vec<usize> = (0..pts.n).filter(|&i| pts.norms[i] > 0.0).collect();
    let to_row = |i: usize| -> Vec<f64> { pts.row(i).iter().map(|&x| f64::from(x)).collect() };

    let mut chosen = vec![nonzero[rng.random_range(0..nonzero.len())]];
    let mut nearest = vec![f64::INFINITY; pts.n];
    while chosen.len() < m {
        let last = Centroids::from_rows(vec![to_row(*chosen.last().unwrap())], pts.d);
        for &i in &nonzero {
            nearest[i] = nearest[i].min(last.distance(pts, i, 0).max(0.0));
        }
        let weights: Vec<f64> = nonzero.iter().map(|&i| nearest[i] * nearest[i]).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = *nonzero.last().unwrap();
            for (&i, &w) in nonzero.iter().zip(&weights) {
                if w > 0.0 {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
            }
            pick
        } else {
            // Fewer distinct directions than clusters.
            (0..pts.n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    Centroids::from_rows(chosen.into_iter().map(to_row).collect(), pts.d)
}

struct Run {
    labels: Vec<usize>,
    centroids: Centroids,
    objective: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn run_once(pts: &Points, m: usize, opts: &KMeansOptions, rng: &mut ChaCha8Rng) -> Run {
    let seeds = init_centroids(pts, m, rng);
    let step = |from: &Centroids| -> (Vec<usize>, Centroids, f64) {
        let mut labels = assign(pts, from);
        repair_empty(pts, from, &mut labels);
        let c = update(pts, &labels, m, opts.spherical);
        let j = objective(pts, &c, &labels);
        (labels, c, j)
    };

    let (mut labels, mut centroids, mut j) = step(&seeds);
    let mut trace = vec![j];
    let mut iterations = 1;
    let mut converged = false;
    while iterations < opts.max_iter {
        let (next_labels, next_c, next_j) = step(&centroids);
        iterations += 1;
        if next_labels == labels {
            converged = true;
            break;
        }
        if next_j > j {
            break;
        }
        let decrease = j - next_j;
        labels = next_labels;
        centroids = next_c;
        j = next_j;
        trace.push(j);
        if decrease < opts.tol {
            let mut check = assign(pts, &centroids);
            repair_empty(pts, &centroids, &mut check);
            converged = check == labels;
            break;
        }
    }
    Run {
        labels,
        centroids,
        objective: j,
        trace,
        iterations,
        converged,
    }
}

/// Renumbers clusters by first occurrence in point order.
fn canonicalize(labels: &[usize], centroids: &Centroids) -> (Vec<i32>, Vec<Vec<f64>>) {
    let m = centroids.m();
    let mut remap = vec![usize::MAX; m];
    let mut next = 0;
    for &l in labels {
        if remap[l] == usize::MAX {
            remap[l] = next;
            next += 1;
        }
    }
    for slot in remap.iter_mut() {
        if *slot == usize::MAX {
            *slot = next;
            next += 1;
        }
    }
    let mut rows = vec![Vec::new(); m];
    for (old, &new) in remap.iter().enumerate() {
        rows[new] = centroids.row(old).to_vec();
    }
    (labels.iter().map(|&l| remap[l] as i32).collect(), rows)
}

/// Cosine K-means over the rows of `points` (`[n, d]`).
pub fn kmeans_cosine(
    points: &Tensor<f32>,
    m: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    let pts = Points::new(points)?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one cluster".into()));
    }
    if pts.n < m {
        return Err(Error::TooFewPoints {
            points: pts.n,
            clusters: m,
        });
    }
    if pts.norms.iter().all(|&n| n == 0.0) {
        return Err(Error::DegenerateInput);
    }

    let mut best: Option<Run> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let run = run_once(&pts, m, opts, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    let (labels, rows) = canonicalize(&run.labels, &run.centroids);
    let centroids = Tensor::new(
        vec![m, pts.d],
        rows.into_iter().flatten().map(|x| x as f32).collect(),
    )?;
    Ok(KMeansResult {
        labels,
        centroids,
        objective: run.objective,
        trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
    })
}

/// Clusters the `h * w` feature vectors of a layer into at most `m` superpixels.
pub fn cluster_layer(
    layer: &LayerRecord,
    m: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<LabelMap> {
    let (h, w) = layer.features.hw()?;
    let k = layer.features.channels()?;
    let points = layer.features.clone().reshape(vec![h * w, k])?;
    let result = kmeans_cosine(&points, m, seed, opts)?;
    LabelMap::new(
        layer.name.clone(),
        Tensor::new(vec![h, w], result.labels)?,
        m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f32]]) -> Tensor<f32> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn distinct_unit_vectors_each_alone() {
        let p = pts(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = kmeans_cosine(&p, 3, 7, &KMeansOptions::default()).unwrap();
        assert_eq!(r.labels, vec![0, 1, 2]);
        assert!(r.objective.abs() < 1e-9);
        assert!(r.converged);
    }

    #[test]
    fn identical_points_one_cluster() {
        let p = pts(&[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]]);
        let r = kmeans_cosine(&p, 1, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(r.labels, vec![0; 4]);
        assert!(r.objective.abs() < 1e-9);
        assert_eq!(r.centroids.data(), &[2.0, -1.0]);
    }

    #[test]
    fn errors() {
        let p = pts(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            kmeans_cosine(&p, 3, 0, &KMeansOptions::default()),
            Err(Error::TooFewPoints {
                points: 2,
                clusters: 3
            })
        ));
        let z = pts(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            kmeans_cosine(&z, 1, 0, &KMeansOptions::default()),
            Err(Error::DegenerateInput)
        ));
    }

    #[test]
    fn zero_vector_distance_is_one() {
        assert_eq!(cosine_distance(&[0.0, 0.0], 0.0, &[3.0, 4.0], 5.0), 1.0);
        // ties with every centroid go to the lowest index
        let c = Centroids::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let p = pts(&[&[0.0, 0.0]]);
        let points = Points::new(&p).unwrap();
        assert_eq!(c.nearest(&points, 0), (0, 1.0));
    }

    #[test]
    fn empty_cluster_steals_farthest_point() {
        let p = pts(&[&[1.0, 0.0], &[1.0, 0.1], &[0.0, 1.0]]);
        let points = Points::new(&p).unwrap();
        let c = Centroids::from_rows(vec![vec![1.0, 0.0], vec![-1.0, -1.0]], 2);
        let mut labels = vec![0, 0, 0];
        repair_empty(&points, &c, &mut labels);
        assert_eq!(labels, vec![0, 0, 1]);
    }

    #[test]
    fn labels_are_canonical() {
        let p = pts(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, 2.0], &[3.0, 0.0]]);
        for seed in 0..10 {
            let r = kmeans_cosine(&p, 2, seed, &KMeansOptions::default()).unwrap();
            assert_eq!(r.labels, vec![0, 1, 0, 1]);
        }
    }

    #[test]
    fn cluster_layer_m1_is_all_zero() {
        let layer = LayerRecord {
            name: "b".into(),
            features: Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f32 + 1.0).collect())
                .unwrap(),
        };
        let lm = cluster_layer(&layer, 1, 5, &KMeansOptions::default()).unwrap();
        assert_eq!(lm.labels.shape(), &[2, 3]);
        assert!(lm.labels.data().iter().all(|&l| l == 0));
    }
}
