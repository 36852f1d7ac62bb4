//! Reference implementations kept deliberately naive so they share no code
//! with the library.

use std::collections::BTreeMap;

pub const NOISE: i32 = -1;

/// Logits of a ReLU MLP computed in f64, one scalar loop at a time.
pub fn logits(dims: &[usize], weights: &[Vec<f64>], biases: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = weights.len() - 1;
    for l in 0..weights.len() {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = biases[l][o];
            for i in 0..n_in {
                s += weights[l][o * n_in + i] * a[i];
            }
            z[o] = if l == last { s } else { s.max(0.0) };
        }
        a = z;
    }
    a
}

/// Central finite difference of one logit.
pub fn fd_gradient(dims: &[usize], w: &[Vec<f64>], b: &[Vec<f64>], x: &[f64], label: usize, h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            xp[j] = x[j] + h;
            let up = logits(dims, w, b, &xp)[label];
            xp[j] = x[j] - h;
            let down = logits(dims, w, b, &xp)[label];
            xp[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// DBSCAN through connected components of the core graph.
///
/// Clusters are numbered by their lowest-index core point and a border
/// point joins the lowest-numbered cluster among its core neighbors, which
/// is what an index-order scan with breadth-first expansion produces.
pub fn dbscan(points: &[Vec<f32>], eps: f64, min_pts: usize) -> Vec<i32> {
    let n = points.len();
    let eps_sq = eps * eps;
    let close = |a: &[f32], b: &[f32]| {
        let d: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        d <= eps_sq
    };
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| close(&points[i], &points[j])).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &neighbors[i] {
            if core[j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut id_of_root = BTreeMap::new();
    let mut labels = vec![NOISE; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = id_of_root.len() as i32;
            labels[i] = *id_of_root.entry(r).or_insert(next);
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = neighbors[i]
                .iter()
                .filter(|&&j| core[j])
                .map(|&j| labels[j])
                .min()
                .unwrap_or(NOISE);
        }
    }
    labels
}

/// Fraction of clustered instances whose cluster's majority true label matches theirs.
pub fn majority_agreement(clusters: &[i32], truth: &[u16]) -> f64 {
    let mut votes: BTreeMap<i32, BTreeMap<u16, usize>> = BTreeMap::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        if c != NOISE {
            *votes.entry(c).or_default().entry(t).or_default() += 1;
        }
    }
    let total: usize = votes.values().flat_map(|v| v.values()).sum();
    let agree: usize = votes.values().map(|v| v.values().max().copied().unwrap_or(0)).sum();
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}
