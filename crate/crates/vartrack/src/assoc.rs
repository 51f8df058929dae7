//! Candidate measurement partitions and ranked association maps. A scan
//! is carved into clusters by a DBSCAN parameter sweep plus one
//! track-gated partition; clusters whose Doppler profile is inconsistent
//! with a single rigid body spawn split variants. Murty's algorithm ranks
//! the k best track-to-cluster assignments on a cost matrix of negative
//! log likelihood factors.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Detection, VehicleState, OC_FRONT, OC_REAR};

/// Largest Doppler residual, in m/s, a cluster may show against the
/// fitted rigid-body profile before it is split. Three sigma of the
/// simulator Doppler noise.
pub const DOPPLER_RESIDUAL_THRESHOLD: f64 = 0.45;

/// One way of carving a scan into clusters. Clusters hold detection
/// indices; detections in no cluster are implicitly clutter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clusters: Vec<Vec<usize>>,
}

impl Partition {
    /// Sort clusters and their members so equal partitions compare equal.
    pub fn canonicalize(&mut self) {
        for c in &mut self.clusters {
            c.sort_unstable();
        }
        self.clusters.sort();
        debug_assert!(self.is_valid());
    }

    /// Clusters are non-empty and mutually disjoint.
    pub fn is_valid(&self) -> bool {
        let mut seen = HashSet::new();
        self.clusters.iter().all(|c| !c.is_empty() && c.iter().all(|&i| seen.insert(i)))
    }
}

/// Association of tracks to clusters: per track either 0 (misdetection)
/// or the 1-based cluster index. Positive values are unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMap(pub Vec<usize>);

impl AssociationMap {
    pub fn cluster_of(&self, track: usize) -> Option<usize> {
        match self.0[track] {
            0 => None,
            j => Some(j - 1),
        }
    }
}

/// Negative log likelihood factors per track: one column per cluster,
/// the misdetection column last. `f64::INFINITY` forbids an assignment.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: Vec<Vec<f64>>,
    n_clusters: usize,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>, n_clusters: usize) -> Result<Self> {
        for r in &rows {
            if r.len() != n_clusters + 1 {
                return Err(Error::DimensionMismatch { expected: n_clusters + 1, got: r.len() });
            }
            if r.iter().any(|c| c.is_nan()) {
                return Err(Error::Format("cost matrix contains NaN".into()));
            }
        }
        Ok(CostMatrix { rows, n_clusters })
    }

    pub fn n_tracks(&self) -> usize {
        self.rows.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// Total cost of one association map under this matrix.
    pub fn cost_of(&self, map: &AssociationMap) -> f64 {
        map.0
            .iter()
            .enumerate()
            .map(|(i, &a)| match a {
                0 => self.rows[i][self.n_clusters],
                j => self.rows[i][j - 1],
            })
            .sum()
    }
}

pub type RankedAssignments = Vec<(AssociationMap, f64)>;

/// Density-based clustering. Returns the clusters and the noise points,
/// both ordered by first appearance.
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    assert!(eps > 0.0 && min_pts >= 1);
    let n = points.len();
    let eps2 = eps * eps;
    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                dx * dx + dy * dy <= eps2
            })
            .collect()
    };
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let neighbors = region(i);
        if neighbors.len() < min_pts {
            continue; // may still become a border point later
        }
        let id = clusters.len();
        clusters.push(Vec::new());
        assigned[i] = Some(id);
        clusters[id].push(i);
        let mut queue: Vec<usize> = neighbors;
        let mut qi = 0;
        while qi < queue.len() {
            let q = queue[qi];
            qi += 1;
            if !visited[q] {
                visited[q] = true;
                let nq = region(q);
                if nq.len() >= min_pts {
                    queue.extend(nq);
                }
            }
            if assigned[q].is_none() {
                assigned[q] = Some(id);
                clusters[id].push(q);
            }
        }
    }
    let noise = (0..n).filter(|&i| assigned[i].is_none()).collect();
    (clusters, noise)
}

/// Candidate partitions of a scan: one per DBSCAN eps value plus one
/// partition gating detections to the predicted tracks (rectangles
/// inflated by `gate_margin`, conflicts to the nearest track), all
/// deduplicated. Detections and track means share the sensor frame.
pub fn generate_partitions(
    detections: &[Detection],
    tracks: &[VehicleState],
    eps_grid: &[f64],
    gate_margin: f64,
) -> Vec<Partition> {
    assert!(!eps_grid.is_empty());
    if detections.is_empty() {
        return vec![Partition { clusters: Vec::new() }];
    }
    let points: Vec<(f64, f64)> =
        detections.iter().map(|z| (z.d * z.alpha.cos(), z.d * z.alpha.sin())).collect();

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |mut p: Partition, out: &mut Vec<Partition>| {
        p.canonicalize();
        if seen.insert(p.clusters.clone()) {
            out.push(p);
        }
    };

    for &eps in eps_grid {
        let (clusters, _) = dbscan(&points, eps, 1);
        push(Partition { clusters }, &mut out);
    }

    // track-gated partition: same inflated-rectangle test as the training
    // gate, nearest box center on conflict, leftovers are clutter
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); tracks.len()];
    for (zi, &(px, py)) in points.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (ti, s) in tracks.iter().enumerate() {
            let (sin, cos) = s.kin.phi.sin_cos();
            let dx = px - s.kin.x;
            let dy = py - s.kin.y;
            let ox = cos * dx + sin * dy;
            let oy = -sin * dx + cos * dy;
            let inside = ox >= OC_REAR * s.ext.b - gate_margin
                && ox <= OC_FRONT * s.ext.b + gate_margin
                && oy.abs() <= 0.5 * s.ext.a + gate_margin;
            if inside {
                let cx = 0.5 * (OC_FRONT + OC_REAR) * s.ext.b;
                let dist = (ox - cx).hypot(oy);
                if best.map_or(true, |(d, _)| dist < d) {
                    best = Some((dist, ti));
                }
            }
        }
        if let Some((_, ti)) = best {
            clusters[ti].push(zi);
        }
    }
    clusters.retain(|c| !c.is_empty());
    push(Partition { clusters }, &mut out);
    out
}

/// Check a cluster against the rigid-body Doppler profile
/// v_D(alpha) = c1 cos(alpha) + c2 sin(alpha). The fit is trimmed
/// greedily: refit and peel the worst residual until all remaining ones
/// stay under the threshold, so one strong outlier cannot mask itself by
/// dragging the least-squares solution. A cluster spanning only a narrow
/// bearing arc cannot support both coefficients; the coarse singular
/// value cutoff collapses such fits to the consensus direction instead
/// of letting the second coefficient chase the outlier. Peeled
/// detections become singleton subclusters. Returns index lists into
/// `cluster`, sorted; a single list means no split.
pub fn doppler_split(cluster: &[Detection], residual_threshold: f64) -> Vec<Vec<usize>> {
    let n = cluster.len();
    if n < 2 {
        return vec![(0..n).collect()];
    }
    let mut active: Vec<usize> = (0..n).collect();
    let mut outliers = Vec::new();
    loop {
        let k = active.len();
        let design = DMatrix::from_fn(k, 2, |i, j| {
            if j == 0 {
                cluster[active[i]].alpha.cos()
            } else {
                cluster[active[i]].alpha.sin()
            }
        });
        let rhs = DVector::from_fn(k, |i, _| cluster[active[i]].vd);
        let svd = design.clone().svd(true, true);
        let coef =
            svd.solve(&rhs, 0.1 * svd.singular_values[0]).expect("svd computed both factors");
        let residuals = rhs - design * coef;
        let (worst, r) = residuals
            .iter()
            .map(|r| r.abs())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("active set never empties");
        if r <= residual_threshold || k == 1 {
            break;
        }
        outliers.push(active.remove(worst));
    }
    if outliers.is_empty() {
        return vec![active];
    }
    let mut parts = Vec::with_capacity(1 + outliers.len());
    if !active.is_empty() {
        parts.push(active);
    }
    for o in outliers {
        parts.push(vec![o]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts.sort();
    parts
}

/// Supplement partitions with Doppler-split variants: every cluster that
/// splits produces an additional partition with the cluster replaced by
/// its subclusters, keeping the original too.
pub fn augment_with_doppler_splits(
    partitions: Vec<Partition>,
    detections: &[Detection],
    residual_threshold: f64,
) -> Vec<Partition> {
    let mut seen: HashSet<Vec<Vec<usize>>> = partitions.iter().map(|p| p.clusters.clone()).collect();
    let mut out = partitions;
    let mut extra = Vec::new();
    for p in &out {
        for (ci, cluster) in p.clusters.iter().enumerate() {
            let dets: Vec<Detection> = cluster.iter().map(|&i| detections[i]).collect();
            let parts = doppler_split(&dets, residual_threshold);
            if parts.len() <= 1 {
                continue;
            }
            let mut clusters = p.clusters.clone();
            clusters.remove(ci);
            for sub in parts {
                clusters.push(sub.into_iter().map(|i| cluster[i]).collect());
            }
            let mut cand = Partition { clusters };
            cand.canonicalize();
            if seen.insert(cand.clusters.clone()) {
                extra.push(cand);
            }
        }
    }
    out.extend(extra);
    out
}

/// Min-cost assignment of every row to a distinct column by shortest
/// augmenting paths over potentials. Columns may outnumber rows;
/// infinite costs forbid a pairing. Returns the column per row.
fn assign_min_cost(cost: &[Vec<f64>]) -> Option<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0 {
        return Some((Vec::new(), 0.0));
    }
    let m = cost[0].len();
    if m < n {
        return None;
    }
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = 1-based row assigned to column j; p[0] holds the row being inserted
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
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
            }
            if delta == f64::INFINITY {
                return None; // no augmenting path: forbidden everywhere
            }
            for j in 0..=m {
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
    let mut cols = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] > 0 {
            cols[p[j] - 1] = j - 1;
            total += cost[p[j] - 1][j - 1];
        }
    }
    if !total.is_finite() {
        return None;
    }
    Some((cols, total))
}

struct MurtyNode {
    cost: f64,
    seq: usize,
    cols: Vec<usize>,
    matrix: Vec<Vec<f64>>,
}

impl PartialEq for MurtyNode {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.seq == other.seq
    }
}
impl Eq for MurtyNode {}
impl PartialOrd for MurtyNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MurtyNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want the cheapest first
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// The k lowest-cost association maps in non-decreasing cost order,
/// fewer if fewer exist. The misdetection column is shareable between
/// tracks; cluster columns are exclusive.
pub fn murty(cost: &CostMatrix, k: usize) -> Result<RankedAssignments> {
    assert!(k >= 1);
    let n = cost.n_tracks();
    let m = cost.n_clusters();
    if n == 0 {
        return Ok(vec![(AssociationMap(Vec::new()), 0.0)]);
    }
    // expand the shared misdetection column into one exclusive column per
    // track so every valid map is exactly one assignment
    let expanded: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = cost.rows[i][..m].to_vec();
            for t in 0..n {
                row.push(if t == i { cost.rows[i][m] } else { f64::INFINITY });
            }
            row
        })
        .collect();

    let to_map = |cols: &[usize]| {
        AssociationMap(cols.iter().map(|&c| if c < m { c + 1 } else { 0 }).collect())
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    let (cols, total) = assign_min_cost(&expanded).ok_or(Error::InfeasibleAssignment)?;
    heap.push(MurtyNode { cost: total, seq, cols, matrix: expanded });
    let mut out = Vec::with_capacity(k);
    while let Some(node) = heap.pop() {
        out.push((to_map(&node.cols), node.cost));
        if out.len() == k {
            break;
        }
        // partition the remaining solution space: child t keeps rows < t
        // fixed to this solution and forbids row t its current column
        for t in 0..n {
            let mut child = node.matrix.clone();
            for (r, row) in child.iter_mut().enumerate().take(t) {
                let keep = node.cols[r];
                for (c, val) in row.iter_mut().enumerate() {
                    if c != keep {
                        *val = f64::INFINITY;
                    }
                }
            }
            child[t][node.cols[t]] = f64::INFINITY;
            if let Some((cols, total)) = assign_min_cost(&child) {
                seq += 1;
                heap.push(MurtyNode { cost: total, seq, cols, matrix: child });
            }
        }
    }
    Ok(out)
}
