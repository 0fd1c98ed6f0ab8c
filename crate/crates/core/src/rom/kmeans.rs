use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

/// Partition of points (element centers) into `k` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vector3<f64>>,
    /// Within-cluster sum of squared distances.
    pub objective: f64,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.k];
        for &c in &self.assignment {
            n[c] += 1;
        }
        n
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (e, &c) in self.assignment.iter().enumerate() {
            m[c].push(e);
        }
        m
    }

    /// Rebuild centroids and objective from an assignment.
    pub fn from_assignment(points: &[Vector3<f64>], k: usize, assignment: Vec<usize>) -> Result<Self> {
        if assignment.len() != points.len() {
            return Err(Error::Config(format!(
                "assignment covers {} of {} points",
                assignment.len(),
                points.len()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::Config(format!("cluster id {bad} out of range for k = {k}")));
        }
        let centroids = means(points, &assignment, k);
        if let Some(empty) = centroids.iter().position(Option::is_none) {
            return Err(Error::Config(format!("cluster {empty} is empty")));
        }
        let centroids: Vec<_> = centroids.into_iter().map(Option::unwrap).collect();
        let objective = objective(points, &assignment, &centroids);
        Ok(Clustering {
            k,
            assignment,
            centroids,
            objective,
        })
    }

    /// CSV `element_id,cluster_id`; `element_ids[e]` labels element `e`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, element_ids: &[usize]) -> Result<()> {
        writeln!(w, "element_id,cluster_id")?;
        for (id, c) in element_ids.iter().zip(&self.assignment) {
            writeln!(w, "{id},{c}")?;
        }
        Ok(())
    }

    /// Pairs `(element_id, cluster_id)` in file order.
    pub fn read_csv(text: &str) -> Result<Vec<(usize, usize)>> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("element_id,cluster_id") {
            return Err(Error::Format("clustering header mismatch".into()));
        }
        lines
            .map(|l| {
                let bad = || Error::Format(format!("clustering row {l:?}"));
                let (a, b) = l.trim().split_once(',').ok_or_else(bad)?;
                Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

fn means(points: &[Vector3<f64>], assignment: &[usize], k: usize) -> Vec<Option<Vector3<f64>>> {
    let mut sum = vec![Vector3::zeros(); k];
    let mut count = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        sum[c] += p;
        count[c] += 1;
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect()
}

fn objective(points: &[Vector3<f64>], assignment: &[usize], centroids: &[Vector3<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| dist2(p, &centroids[c]))
        .sum()
}

fn nearest(p: &Vector3<f64>, centers: &[Vector3<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Lloyd's algorithm from `k` distinct seeded random points.
pub fn kmeans(points: &[Vector3<f64>], k: usize, seed: u64) -> Result<Clustering> {
    kmeans_traced(points, k, seed).map(|(c, _)| c)
}

/// As [`kmeans`], also returning the objective after every iteration.
pub fn kmeans_traced(points: &[Vector3<f64>], k: usize, seed: u64) -> Result<(Clustering, Vec<f64>)> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "cluster count {k} must lie in [1, {}]",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vector3<f64>> = rand::seq::index::sample(&mut rng, points.len(), k)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        let mut next = next;
        repair_empty(points, &mut next, &centers, k);
        let changed = next != assignment;
        assignment = next;
        for (c, m) in centers.iter_mut().zip(means(points, &assignment, k)) {
            *c = m.expect("empty clusters repaired");
        }
        trace.push(objective(points, &assignment, &centers));
        if !changed {
            break;
        }
    }
    let objective = *trace.last().expect("at least one iteration");
    Ok((
        Clustering {
            k,
            assignment,
            centroids: centers,
            objective,
        },
        trace,
    ))
}

/// Give every empty cluster the point farthest from its own center, taken
/// from a cluster that keeps at least one other point.
fn repair_empty(points: &[Vector3<f64>], assignment: &mut [usize], centers: &[Vector3<f64>], k: usize) {
    let mut count = vec![0usize; k];
    for &c in assignment.iter() {
        count[c] += 1;
    }
    for j in 0..k {
        if count[j] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| count[assignment[i]] > 1)
            .max_by(|&a, &b| {
                dist2(&points[a], &centers[assignment[a]])
                    .total_cmp(&dist2(&points[b], &centers[assignment[b]]))
            })
            .expect("k <= point count");
        count[assignment[far]] -= 1;
        assignment[far] = j;
        count[j] = 1;
    }
}
