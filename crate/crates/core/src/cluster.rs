//! k-means over the latent matrix; the resulting cluster ids are the
//! pseudo-labels that guide batching.

use gsimclr_tensor::exec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dae::LatentMatrix;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    /// Row-major `k × dim`.
    centroids: Vec<f64>,
    inertia: f64,
    iterations_run: usize,
    /// Inertia after every assignment step, in order.
    inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::InvalidArgument(format!(
                "{k} centroids of dimension {dim} need {} values, got {}",
                k * dim,
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("centroids must be finite".into()));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            inertia: 0.0,
            iterations_run: 0,
            inertia_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    /// Nearest centroid and squared distance; ties go to the lower index.
    fn nearest(&self, point: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d = sq_dist(point, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }
}

fn sq_dist(point: &[f32], centroid: &[f64]) -> f64 {
    point
        .iter()
        .zip(centroid)
        .map(|(&p, &c)| {
            let d = p as f64 - c;
            d * d
        })
        .sum()
}

/// Per-image cluster ids plus cluster sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl PseudoLabelAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0; k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidArgument(format!(
                    "image {i} has cluster label {l}, outside [0, {k})"
                )));
            }
            counts[l] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn nonempty_clusters(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

fn check_dims(model: &ClusterModel, y: &LatentMatrix) -> Result<()> {
    if y.cols() != model.dim {
        return Err(Error::InvalidArgument(format!(
            "latent matrix has {} columns, cluster model expects {}",
            y.cols(),
            model.dim
        )));
    }
    Ok(())
}

fn assign_all(model: &ClusterModel, y: &LatentMatrix) -> Vec<(usize, f64)> {
    exec::map_indexed(y.rows(), |i| model.nearest(y.row(i)))
}

/// Nearest-centroid labels for every row of `y`.
pub fn assign(model: &ClusterModel, y: &LatentMatrix) -> Result<PseudoLabelAssignment> {
    check_dims(model, y)?;
    let labels = assign_all(model, y).into_iter().map(|(l, _)| l).collect();
    PseudoLabelAssignment::new(labels, model.k)
}

/// k-means++ seeding: first centre uniform, then each next centre drawn
/// with probability proportional to squared distance from the nearest
/// chosen centre.
fn kmeans_plus_plus(y: &LatentMatrix, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (n, d) = (y.rows(), y.cols());
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend(y.row(first).iter().map(|&v| v as f64));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(y.row(i), &centroids[..d])).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Round-off can leave the target past the final sum.
            chosen.unwrap_or_else(|| dist.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..n)
        };
        let row: Vec<f64> = y.row(pick).iter().map(|&v| v as f64).collect();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(y.row(i), &row));
        }
        centroids.extend(row);
        debug_assert_eq!(centroids.len(), (c + 1) * d);
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start. Stops once no centroid moves
/// more than `tol` (L2) or after `max_iter` updates. A cluster left empty
/// is re-seeded at the point farthest from its assigned centroid.
pub fn kmeans_fit(y: &LatentMatrix, config: &KMeansConfig, seed: u64) -> Result<ClusterModel> {
    let (n, d, k) = (y.rows(), y.cols(), config.k);
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means with k = {k} needs at least {k} points, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("latent matrix has no columns".into()));
    }
    if let Some(i) = y.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("latent matrix value {i} is not finite")));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("kmeans")]));
    let mut model = ClusterModel::new(k, d, kmeans_plus_plus(y, k, &mut rng))?;

    let mut assigned = assign_all(&model, y);
    model.inertia_history.push(assigned.iter().map(|a| a.1).sum());
    for _ in 0..config.max_iter {
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(l, _)) in assigned.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(y.row(i)) {
                *s += v as f64;
            }
        }
        let mut next = model.centroids.clone();
        let mut taken = vec![false; n];
        for j in 0..k {
            let slot = &mut next[j * d..(j + 1) * d];
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in slot.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *c = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if assigned[b].1 >= assigned[i].1 => Some(b),
                        _ => Some(i),
                    })
                    .expect("n >= k leaves a free point");
                taken[far] = true;
                for (c, &v) in slot.iter_mut().zip(y.row(far)) {
                    *c = v as f64;
                }
                log::debug!("k-means: re-seeded empty cluster {j} at point {far}");
            }
        }
        let shift = (0..k)
            .map(|j| {
                model.centroids[j * d..(j + 1) * d]
                    .iter()
                    .zip(&next[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        model.centroids = next;
        model.iterations_run += 1;
        assigned = assign_all(&model, y);
        model.inertia_history.push(assigned.iter().map(|a| a.1).sum());
        if shift < config.tol {
            break;
        }
    }
    model.inertia = *model.inertia_history.last().expect("at least one assignment");
    Ok(model)
}

/// `(image_index, cluster_label)` rows in image order.
pub fn pseudo_label_table(assignment: &PseudoLabelAssignment) -> Vec<(usize, usize)> {
    assignment.labels.iter().copied().enumerate().collect()
}

pub fn write_pseudo_labels_csv<W: std::io::Write>(table: &[(usize, usize)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["image_index", "cluster_label"])?;
    for (i, l) in table {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_pseudo_labels_csv<R: std::io::Read>(reader: R) -> Result<Vec<(usize, usize)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: (usize, usize) = rec?;
        rows.push(row);
    }
    Ok(rows)
}

/// Rebuilds an assignment from a table whose indices are `0..n` in order.
pub fn assignment_from_table(table: &[(usize, usize)], k: usize) -> Result<PseudoLabelAssignment> {
    let mut labels = Vec::with_capacity(table.len());
    for (pos, &(i, l)) in table.iter().enumerate() {
        if i != pos {
            return Err(Error::InvalidArgument(format!(
                "pseudo-label row {pos} carries image index {i}"
            )));
        }
        labels.push(l);
    }
    PseudoLabelAssignment::new(labels, k)
}
