use rand::Rng;

use crate::error::{BgError, Result};
use crate::seeded_rng;
use crate::tensor::Tensor2;

/// Learnable cluster centroids with the Student-t kernel dof.
#[derive(Clone, Debug)]
pub struct ClusterState {
    /// K x d_z centroid rows.
    pub centroids: Tensor2,
    pub alpha: f64,
}

impl ClusterState {
    pub fn new(centroids: Tensor2) -> Self {
        ClusterState {
            centroids,
            alpha: 1.0,
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Student-t soft assignment:
/// q_ij ∝ (1 + ‖z_i − μ_j‖²/α)^{−(α+1)/2}, rows normalized to 1.
pub fn soft_assign(z: &Tensor2, cs: &ClusterState) -> Result<Tensor2> {
    if z.cols() != cs.centroids.cols() {
        return Err(BgError::ShapeMismatch {
            op: "soft_assign",
            detail: format!(
                "embedding dim {} vs centroid dim {}",
                z.cols(),
                cs.centroids.cols()
            ),
        });
    }
    let (n, k) = (z.rows(), cs.k());
    let expo = -(cs.alpha + 1.0) / 2.0;
    let mut q = Tensor2::zeros(n, k);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..k {
            let v = (1.0 + dist2(z.row(i), cs.centroids.row(j)) / cs.alpha).powf(expo);
            q.set(i, j, v);
            sum += v;
        }
        for j in 0..k {
            q.set(i, j, q.get(i, j) / sum);
        }
    }
    Ok(q)
}

/// Sharpened target: p_ij ∝ q_ij²/f_j with f_j the soft cluster mass.
pub fn target_distribution(q: &Tensor2) -> Result<Tensor2> {
    let (n, k) = (q.rows(), q.cols());
    let mut f = vec![0.0; k];
    for i in 0..n {
        for (j, fj) in f.iter_mut().enumerate() {
            *fj += q.get(i, j);
        }
    }
    for (j, &fj) in f.iter().enumerate() {
        if fj == 0.0 {
            return Err(BgError::DegenerateCluster { cluster: j });
        }
    }
    let mut p = Tensor2::zeros(n, k);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..k {
            let v = q.get(i, j) * q.get(i, j) / f[j];
            p.set(i, j, v);
            sum += v;
        }
        for j in 0..k {
            p.set(i, j, p.get(i, j) / sum);
        }
    }
    Ok(p)
}

/// KL(P ‖ Q) summed over all cells, with 0·log(0/q) = 0.
pub fn dec_loss(p: &Tensor2, q: &Tensor2) -> Result<f64> {
    if (p.rows(), p.cols()) != (q.rows(), q.cols()) {
        return Err(BgError::ShapeMismatch {
            op: "dec_loss",
            detail: format!(
                "{}x{} vs {}x{}",
                p.rows(),
                p.cols(),
                q.rows(),
                q.cols()
            ),
        });
    }
    let mut total = 0.0;
    for (pv, qv) in p.data().iter().zip(q.data()) {
        if *pv == 0.0 {
            continue;
        }
        if *qv == 0.0 {
            return Err(BgError::NonFinite {
                part: "dec_loss".into(),
            });
        }
        total += pv * (pv / qv).ln();
    }
    if !total.is_finite() {
        return Err(BgError::NonFinite {
            part: "dec_loss".into(),
        });
    }
    Ok(total)
}

/// K-means with greedy farthest-first seeding, at most 100 Lloyd iterations,
/// deterministic under the seed. Empty clusters steal the point farthest from
/// its current centroid.
pub fn init_centroids(z: &Tensor2, k: usize, seed: u64) -> Result<ClusterState> {
    if k < 2 {
        return Err(BgError::Config(format!("need at least 2 clusters, got {k}")));
    }
    let n = z.rows();
    if n < k {
        return Err(BgError::InsufficientCells {
            needed: k,
            k,
            got: n,
        });
    }
    let mut rng = seeded_rng(seed);
    let first = rng.gen_range(0..n);
    let mut chosen = vec![first];
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(z.row(i), z.row(first))).collect();
    while chosen.len() < k {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            let d = dist2(z.row(i), z.row(best));
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    let mut centroids = z.gather_rows(&chosen);

    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best_j = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let d = dist2(z.row(i), centroids.row(j));
                if d < best_d {
                    best_d = d;
                    best_j = j;
                }
            }
            if assign[i] != best_j {
                assign[i] = best_j;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // steal the point farthest from its own centroid, but never
            // empty another cluster
            let mut worst = None;
            let mut worst_d = f64::NEG_INFINITY;
            for i in 0..n {
                if counts[assign[i]] <= 1 {
                    continue;
                }
                let d = dist2(z.row(i), centroids.row(assign[i]));
                if d > worst_d {
                    worst_d = d;
                    worst = Some(i);
                }
            }
            if let Some(i) = worst {
                counts[assign[i]] -= 1;
                assign[i] = j;
                counts[j] = 1;
                changed = true;
            }
        }
        let mut sums = Tensor2::zeros(k, z.cols());
        for i in 0..n {
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            let c = counts[j] as f64;
            for s in sums.row_mut(j) {
                *s /= c;
            }
        }
        centroids = sums;
        if !changed {
            break;
        }
    }
    Ok(ClusterState::new(centroids))
}

/// Row argmax with ties to the smallest index.
pub fn predict_labels(q: &Tensor2) -> Vec<usize> {
    (0..q.rows())
        .map(|i| {
            let row = q.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let codes = labels
        .iter()
        .map(|&l| match seen.iter().position(|&s| s == l) {
            Some(p) => p,
            None => {
                seen.push(l);
                seen.len() - 1
            }
        })
        .collect();
    (codes, seen.len())
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian algorithm
/// with potentials). Returns the column matched to each row.
fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based, 0 = none)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn check_lengths(op: &'static str, pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(BgError::ShapeMismatch {
            op,
            detail: format!("{} predictions vs {} truths", pred.len(), truth.len()),
        });
    }
    Ok(())
}

/// Clustering accuracy under the best one-to-one cluster-to-class mapping.
pub fn metric_acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths("metric_acc", pred, truth)?;
    let (pc, kp) = compact(pred);
    let (tc, kt) = compact(truth);
    let k = kp.max(kt);
    let mut confusion = vec![vec![0i64; k]; k];
    for (&a, &b) in pc.iter().zip(&tc) {
        confusion[a][b] += 1;
    }
    let cost: Vec<Vec<i64>> = confusion
        .iter()
        .map(|row| row.iter().map(|&c| -c).collect())
        .collect();
    let matching = hungarian_min(&cost);
    let matched: i64 = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| confusion[i][j])
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn metric_ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths("metric_ari", pred, truth)?;
    let (pc, kp) = compact(pred);
    let (tc, kt) = compact(truth);
    let n = pred.len();
    let mut table = vec![vec![0.0_f64; kt]; kp];
    let mut a = vec![0.0_f64; kp];
    let mut b = vec![0.0_f64; kt];
    for (&x, &y) in pc.iter().zip(&tc) {
        table[x][y] += 1.0;
        a[x] += 1.0;
        b[y] += 1.0;
    }
    let index: f64 = table
        .iter()
        .flat_map(|row| row.iter())
        .map(|&c| comb2(c))
        .sum();
    let sum_a: f64 = a.iter().map(|&x| comb2(x)).sum();
    let sum_b: f64 = b.iter().map(|&x| comb2(x)).sum();
    let expected = sum_a * sum_b / comb2(n as f64);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        // both partitions trivial (all-singletons or all-one-cluster)
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}
