//! DBSCAN with fixed, order-defined semantics.
//!
//! Seeds are scanned in ascending index order, cluster expansion uses a FIFO
//! queue fed with neighbors in ascending index order, and a border point
//! belongs to the first cluster that reaches it. Neighborhoods are closed
//! balls (`distance <= eps`) and include the point itself.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const NOISE: i32 = -1;
pub const DEFAULT_MIN_PTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        let p = ClusterParams { eps, min_pts };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::invalid("min_pts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// `-1` for noise, otherwise the cluster number in discovery order.
    pub labels: Vec<i32>,
    pub params: ClusterParams,
    pub num_clusters: usize,
    pub noise_count: usize,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<i32>, params: ClusterParams) -> Self {
        let num_clusters = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(0) as usize;
        let noise_count = labels.iter().filter(|&&l| l == NOISE).count();
        ClusterAssignment {
            labels,
            params,
            num_clusters,
            noise_count,
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// Squared Euclidean distance in `f64`, summed in coordinate order.
///
/// Both DBSCAN implementations must use this exact function so that
/// borderline distances compare identically.
#[inline]
pub fn distance_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s
}

pub(crate) fn check_points(points: &Matrix) -> Result<()> {
    if let Some(i) = points.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "clustering input".into(),
            index: i / points.cols().max(1),
        });
    }
    Ok(())
}

/// Range queries over points sorted by their first coordinate.
struct SweepIndex<'a> {
    points: &'a Matrix,
    order: Vec<usize>,
    keys: Vec<f64>,
    eps_sq: f64,
    window: f64,
}

impl<'a> SweepIndex<'a> {
    fn new(points: &'a Matrix, eps: f64) -> Self {
        let key = |i: usize| {
            if points.cols() == 0 {
                0.0
            } else {
                points.get(i, 0) as f64
            }
        };
        let mut order: Vec<usize> = (0..points.rows()).collect();
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        let keys = order.iter().map(|&i| key(i)).collect();
        SweepIndex {
            points,
            order,
            keys,
            eps_sq: eps * eps,
            // Slightly wider than eps so pruning never drops a pair that the
            // exact squared-distance test would accept.
            window: eps * (1.0 + 1e-9),
        }
    }

    fn neighbors(&self, p: usize, out: &mut Vec<usize>) {
        out.clear();
        let row = self.points.row(p);
        let k = if row.is_empty() { 0.0 } else { row[0] as f64 };
        let lo = self.keys.partition_point(|&v| v < k - self.window);
        let hi = self.keys.partition_point(|&v| v <= k + self.window);
        for &q in &self.order[lo..hi] {
            if distance_sq(row, self.points.row(q)) <= self.eps_sq {
                out.push(q);
            }
        }
        out.sort_unstable();
    }
}

pub fn dbscan(points: &Matrix, params: ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    check_points(points)?;
    const UNVISITED: i32 = i32::MIN;
    let n = points.rows();
    let index = SweepIndex::new(points, params.eps);
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0i32;
    let mut nb = Vec::new();
    let mut queue = VecDeque::new();

    for p in 0..n {
        if labels[p] != UNVISITED {
            continue;
        }
        index.neighbors(p, &mut nb);
        if nb.len() < params.min_pts {
            labels[p] = NOISE;
            continue;
        }
        labels[p] = cluster;
        queue.clear();
        queue.extend(nb.iter().copied());
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster;
                continue;
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            index.neighbors(q, &mut nb);
            if nb.len() >= params.min_pts {
                queue.extend(nb.iter().copied());
            }
        }
        cluster += 1;
    }
    Ok(ClusterAssignment::from_labels(labels, params))
}

/// Brute-force DBSCAN used as a test oracle.
///
/// Formulated differently from [`dbscan`]: core points are found by an
/// all-pairs count, clusters are connected components of the core graph
/// numbered by their smallest core index, and each border point joins the
/// lowest-numbered cluster owning a core point within `eps`.
pub fn dbscan_reference(points: &Matrix, params: ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    check_points(points)?;
    let n = points.rows();
    let eps_sq = params.eps * params.eps;
    let near = |a: usize, b: usize| distance_sq(points.row(a), points.row(b)) <= eps_sq;

    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= params.min_pts)
        .collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        let mut stack = vec![seed];
        labels[seed] = next;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && labels[j] == NOISE && near(i, j) {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }

    for i in 0..n {
        if core[i] {
            continue;
        }
        labels[i] = (0..n)
            .filter(|&j| core[j] && near(i, j))
            .map(|j| labels[j])
            .min()
            .unwrap_or(NOISE);
    }
    Ok(ClusterAssignment::from_labels(labels, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSummary {
    pub eps: f64,
    pub num_clusters: usize,
    pub noise_count: usize,
    pub cluster_sizes: Vec<usize>,
}

impl From<&ClusterAssignment> for EpsSummary {
    fn from(a: &ClusterAssignment) -> Self {
        EpsSummary {
            eps: a.params.eps,
            num_clusters: a.num_clusters,
            noise_count: a.noise_count,
            cluster_sizes: a.cluster_sizes(),
        }
    }
}

/// One DBSCAN summary per `eps`, in input order.
pub fn sweep_eps(points: &Matrix, eps_values: &[f64], min_pts: usize) -> Result<Vec<EpsSummary>> {
    eps_values
        .iter()
        .map(|&eps| {
            let a = dbscan(points, ClusterParams::new(eps, min_pts)?)?;
            Ok(EpsSummary::from(&a))
        })
        .collect()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}
