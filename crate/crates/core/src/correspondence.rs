//! Real-to-synthetic correspondences: 3D point assignment for real
//! features, per-point feature clusters, per-cluster whitening and
//! k-nearest-neighbour training pairs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Descriptor, FeatureRecord, Origin};
use crate::geometry::{ImagePoint, ProjectionMatrix, ScenePoint};

/// Scene point quantised to a cubic lattice, used as a cluster identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey(pub [i64; 3]);

impl ClusterKey {
    pub fn of(x: &ScenePoint, lattice: f64) -> Self {
        ClusterKey([
            (x.x / lattice).floor() as i64,
            (x.y / lattice).floor() as i64,
            (x.z / lattice).floor() as i64,
        ])
    }
}

/// All features of one origin attached to one scene point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCluster {
    pub key: ClusterKey,
    /// Mean of the members' scene points.
    pub scene_point: ScenePoint,
    pub origin: Origin,
    pub members: Vec<FeatureRecord>,
}

impl FeatureCluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn descriptors(&self) -> Vec<Vec<f64>> {
        self.members.iter().map(|m| m.descriptor.to_f64()).collect()
    }
}

/// Projection-based scene point lookup for one image. Projections of the
/// candidate set are computed once and reused for every query.
pub struct PointAssigner<'a> {
    points: &'a [ScenePoint],
    projected: Vec<Option<ImagePoint>>,
}

impl<'a> PointAssigner<'a> {
    pub fn new(p: &ProjectionMatrix, points: &'a [ScenePoint]) -> Self {
        let m = p.matrix().fixed_view::<3, 3>(0, 0).into_owned();
        let sign = m.determinant().signum();
        let projected = points
            .iter()
            .map(|x| {
                let h = p.homogeneous(x);
                // depth-positive points only; the sign of det(M) fixes the
                // orientation of an arbitrarily scaled P
                if h.z * sign <= crate::geometry::PROJECTION_EPS {
                    None
                } else {
                    Some(ImagePoint::new(h.x / h.z, h.y / h.z))
                }
            })
            .collect();
        PointAssigner { points, projected }
    }

    /// Index and pixel error of the nearest projected point, or `None` when
    /// nothing projects within `max_px`. Ties resolve to the lower index.
    pub fn assign(&self, u: &ImagePoint, max_px: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, q) in self.projected.iter().enumerate() {
            if let Some(q) = q {
                let e = (q - u).norm();
                if best.is_none_or(|(_, b)| e < b) {
                    best = Some((i, e));
                }
            }
        }
        best.filter(|&(_, e)| e <= max_px)
    }

    pub fn point(&self, i: usize) -> &ScenePoint {
        &self.points[i]
    }
}

/// Nearest candidate by reprojection error; `None` when the best is farther
/// than `max_px` or behind the camera.
pub fn assign_scene_point(
    feature: &FeatureRecord,
    p: &ProjectionMatrix,
    points: &[ScenePoint],
    max_px: f64,
) -> Option<ScenePoint> {
    let a = PointAssigner::new(p, points);
    a.assign(&feature.u, max_px).map(|(i, _)| points[i])
}

/// Groups features by (lattice key, origin), in key order. Features without
/// a scene point are skipped.
pub fn build_clusters(features: &[FeatureRecord], lattice: f64) -> Vec<FeatureCluster> {
    let mut groups: BTreeMap<(ClusterKey, Origin), Vec<&FeatureRecord>> = BTreeMap::new();
    for f in features {
        if let Some(x) = &f.scene_point {
            groups.entry((ClusterKey::of(x, lattice), f.origin)).or_default().push(f);
        }
    }
    groups
        .into_iter()
        .map(|((key, origin), members)| {
            let n = members.len() as f64;
            let sum = members
                .iter()
                .fold(nalgebra::Vector3::zeros(), |acc, f| acc + f.scene_point.expect("filtered").coords);
            FeatureCluster {
                key,
                scene_point: ScenePoint::from(sum / n),
                origin,
                members: members.into_iter().cloned().collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningKind {
    /// `W = Λ^(-1/2) Eᵀ`
    Pca,
    /// `W = E Λ^(-1/2) Eᵀ`
    Zca,
}

/// Affine map `x -> W (x - mean)` that decorrelates a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    pub matrix: DMatrix<f64>,
    /// Absolute regulariser added to the covariance diagonal.
    pub epsilon: f64,
}

impl WhiteningTransform {
    /// Fits on `samples` (rows). The regulariser is `epsilon · trace(C)/D`,
    /// or `epsilon` itself when the covariance vanishes.
    pub fn fit(samples: &[Vec<f64>], epsilon: f64, kind: WhiteningKind) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::ClusterTooSmall(n));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let trace = cov.trace();
        let eps = if trace > 0.0 { epsilon * trace / d as f64 } else { epsilon };
        let reg = cov + DMatrix::identity(d, d) * eps;
        let eig = reg.symmetric_eigen();

        // descending eigenvalues, eigenvector sign fixed by its largest entry
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut e = DMatrix::zeros(d, d);
        let mut inv_sqrt = DVector::zeros(d);
        for (col, &src) in order.iter().enumerate() {
            let mut v = eig.eigenvectors.column(src).into_owned();
            let lead = v.iter().cloned().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
            if lead < 0.0 {
                v.neg_mut();
            }
            e.set_column(col, &v);
            inv_sqrt[col] = 1.0 / eig.eigenvalues[src].max(eps).sqrt();
        }
        let pca = DMatrix::from_diagonal(&inv_sqrt) * e.transpose();
        let matrix = match kind {
            WhiteningKind::Pca => pca,
            WhiteningKind::Zca => &e * pca,
        };
        Ok(WhiteningTransform {
            mean,
            matrix,
            epsilon: eps,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(x) - &self.mean;
        (&self.matrix * v).iter().copied().collect()
    }

    pub fn apply_all(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if xs.is_empty() {
            return Vec::new();
        }
        let d = self.mean.len();
        let mut m = DMatrix::from_fn(d, xs.len(), |j, i| xs[i][j]);
        for mut col in m.column_iter_mut() {
            col -= &self.mean;
        }
        let out = &self.matrix * m;
        out.column_iter().map(|c| c.iter().copied().collect()).collect()
    }
}

pub fn fit_whitening(cluster: &FeatureCluster, epsilon: f64, kind: WhiteningKind) -> Result<WhiteningTransform> {
    WhiteningTransform::fit(&cluster.descriptors(), epsilon, kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationParams {
    pub gamma: f64,
    pub k_min: usize,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams { gamma: 0.2, k_min: 1 }
    }
}

/// `max(k_min, ⌊γ √|C_s|⌋)`, capped at the cluster size.
pub fn compute_k(cluster_size: usize, params: &AugmentationParams) -> usize {
    let raw = (params.gamma * (cluster_size as f64).sqrt()).floor() as usize;
    raw.max(params.k_min).min(cluster_size)
}

/// How real features are paired with synthetic members of their cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingSpace {
    /// Nearest neighbours after whitening each cluster separately.
    Whitened(WhiteningKind),
    /// Nearest neighbours on the raw descriptors.
    Raw,
}

/// Raw real descriptor paired with a raw synthetic descriptor of the same
/// scene point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Descriptor,
    pub target: Descriptor,
    pub cluster_key: ClusterKey,
    pub scene_point: ScenePoint,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest candidates, ties broken by lower index.
pub fn k_nearest(query: &[f64], candidates: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = candidates.iter().enumerate().map(|(i, c)| (sq_dist(query, c), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(k).map(|(_, i)| i).collect()
}

/// For every real member, its `k = compute_k(|syn|)` nearest synthetic
/// members in the chosen space, emitted with the raw descriptors.
pub fn make_training_pairs(
    real: &FeatureCluster,
    syn: &FeatureCluster,
    params: &AugmentationParams,
    space: PairingSpace,
    epsilon: f64,
) -> Result<Vec<TrainingPair>> {
    if syn.is_empty() {
        return Err(Error::ClusterTooSmall(0));
    }
    let k = compute_k(syn.len(), params);
    let real_raw = real.descriptors();
    let syn_raw = syn.descriptors();
    let (queries, candidates) = match space {
        _ if syn.len() == 1 => (real_raw, syn_raw),
        PairingSpace::Raw => (real_raw, syn_raw),
        PairingSpace::Whitened(kind) => {
            let wr = WhiteningTransform::fit(&real_raw, epsilon, kind)?;
            let ws = WhiteningTransform::fit(&syn_raw, epsilon, kind)?;
            (wr.apply_all(&real_raw), ws.apply_all(&syn_raw))
        }
    };
    let mut pairs = Vec::with_capacity(real.len() * k);
    for (ri, q) in queries.iter().enumerate() {
        for si in k_nearest(q, &candidates, k) {
            pairs.push(TrainingPair {
                input: real.members[ri].descriptor.clone(),
                target: syn.members[si].descriptor.clone(),
                cluster_key: syn.key,
                scene_point: syn.scene_point,
            });
        }
    }
    Ok(pairs)
}

/// Per-cluster entry of the pair log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLogEntry {
    pub key: ClusterKey,
    pub real_size: usize,
    pub syn_size: usize,
    pub k: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub augmentation: AugmentationParams,
    pub min_real: usize,
    pub min_syn: usize,
    pub epsilon: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            augmentation: AugmentationParams::default(),
            min_real: 2,
            min_syn: 2,
            epsilon: 1e-8,
        }
    }
}

/// Pairs every real cluster with the synthetic cluster of the same key.
/// Clusters below the minimum sizes are skipped. Output is in key order.
pub fn build_training_pairs(
    real: &[FeatureCluster],
    syn: &[FeatureCluster],
    space: PairingSpace,
    cfg: &PairingConfig,
) -> Result<(Vec<TrainingPair>, Vec<PairLogEntry>)> {
    let by_key: BTreeMap<ClusterKey, &FeatureCluster> = syn.iter().map(|c| (c.key, c)).collect();
    let mut jobs: Vec<(&FeatureCluster, &FeatureCluster)> = real
        .iter()
        .filter(|r| r.len() >= cfg.min_real)
        .filter_map(|r| by_key.get(&r.key).filter(|s| s.len() >= cfg.min_syn).map(|s| (r, *s)))
        .collect();
    jobs.sort_by_key(|(r, _)| r.key);
    let results = crate::par::try_map(&jobs, |(r, s)| {
        make_training_pairs(r, s, &cfg.augmentation, space, cfg.epsilon).map(|p| {
            let entry = PairLogEntry {
                key: r.key,
                real_size: r.len(),
                syn_size: s.len(),
                k: compute_k(s.len(), &cfg.augmentation),
                pairs: p.len(),
            };
            (p, entry)
        })
    })?;
    let mut pairs = Vec::new();
    let mut log = Vec::with_capacity(results.len());
    for (p, e) in results {
        pairs.extend(p);
        log.push(e);
    }
    Ok((pairs, log))
}

/// Splits pairs into two index-aligned record lists (inputs as REAL,
/// targets as SYNTHETIC) for the feature store.
pub fn pairs_to_records(pairs: &[TrainingPair]) -> (Vec<FeatureRecord>, Vec<FeatureRecord>) {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let u = ImagePoint::origin();
            (
                FeatureRecord::new(p.input.clone(), u, i as u32, Origin::Real, Some(p.scene_point)),
                FeatureRecord::new(p.target.clone(), u, i as u32, Origin::Synthetic, Some(p.scene_point)),
            )
        })
        .unzip()
}
