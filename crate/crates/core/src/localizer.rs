//! Pose recovery from 2D-3D matches (DLT, Gauss-Newton refinement, RANSAC)
//! and the evaluation metrics: matching accuracy, position error and
//! orientation error.

use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Vector3, Vector6};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orientation_error, position_error, ImagePoint, Intrinsics, Pose, ScenePoint};
use crate::matcher::MatchCandidate;

pub const MINIMAL_SAMPLE: usize = 6;

/// Relative size of the second singular value of the centred point cloud
/// below which the points count as collinear.
const COLLINEAR_TOL: f64 = 1e-6;
/// Relative thickness below which a point set is treated as planar.
const PLANAR_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub inlier_px: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_px: 3.0,
            confidence: 0.99,
            max_iters: 2000,
            min_inliers: 6,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::DegenerateConfiguration("confidence must lie in (0, 1)".into()));
        }
        if !(self.inlier_px > 0.0) {
            return Err(Error::DegenerateConfiguration("inlier_px must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    /// `None` when no hypothesis gathered `min_inliers` inliers.
    pub pose: Option<Pose>,
    pub inliers: usize,
    pub iterations: usize,
    pub time_ms: f64,
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to `target`.
fn normalizer<const N: usize>(pts: &[nalgebra::SVector<f64, N>], target: f64) -> (nalgebra::SVector<f64, N>, f64) {
    let n = pts.len() as f64;
    let c = pts.iter().fold(nalgebra::SVector::<f64, N>::zeros(), |a, p| a + p) / n;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 { target / mean } else { 1.0 };
    (c, s)
}

fn reprojection_sq(k: &Intrinsics, pose: &Pose, x: &ScenePoint, u: &ImagePoint) -> f64 {
    let c = pose.to_camera(x);
    if c.z <= crate::geometry::PROJECTION_EPS {
        return f64::INFINITY;
    }
    let du = k.fx * c.x / c.z + k.cx - u.x;
    let dv = k.fy * c.y / c.z + k.cy - u.y;
    du * du + dv * dv
}

/// Summed squared reprojection error; infinite if any point is behind
/// the camera.
pub fn total_error(pose: &Pose, matches: &[(ImagePoint, ScenePoint)], k: &Intrinsics) -> f64 {
    matches.iter().map(|(u, x)| reprojection_sq(k, pose, x, u)).sum()
}

/// Linear pose estimate from at least six correspondences, with Hartley
/// normalisation in calibrated coordinates.
pub fn solve_pnp_dlt(matches: &[(ImagePoint, ScenePoint)], k: &Intrinsics) -> Result<Pose> {
    let n = matches.len();
    if n < MINIMAL_SAMPLE {
        return Err(Error::DegenerateConfiguration(format!("{n} correspondences, need {MINIMAL_SAMPLE}")));
    }
    let rays: Vec<nalgebra::Vector2<f64>> = matches
        .iter()
        .map(|(u, _)| nalgebra::Vector2::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy))
        .collect();
    let pts: Vec<Vector3<f64>> = matches.iter().map(|(_, x)| x.coords).collect();
    let (c2, s2) = normalizer(&rays, std::f64::consts::SQRT_2);
    let (c3, s3) = normalizer(&pts, 3f64.sqrt());

    let spread = DMatrix::from_fn(n, 3, |i, j| (pts[i][j] - c3[j]) * s3);
    let spread_svd = spread.svd(false, true);
    let sv = &spread_svd.singular_values;
    if sv[1] < COLLINEAR_TOL * sv[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateConfiguration("scene points are collinear".into()));
    }
    if sv[2] < PLANAR_TOL * sv[0] {
        let v_t = spread_svd.v_t.as_ref().expect("requested V");
        let e1 = Vector3::new(v_t[(0, 0)], v_t[(0, 1)], v_t[(0, 2)]);
        let e2 = Vector3::new(v_t[(1, 0)], v_t[(1, 1)], v_t[(1, 2)]);
        return planar_pose(&rays, &pts, &c3, &e1, &e2);
    }

    let mut a = DMatrix::zeros(2 * n, 12);
    for i in 0..n {
        let r = (rays[i] - c2) * s2;
        let x = ((pts[i] - c3) * s3).push(1.0);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -r.x * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -r.y * x[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let (last, second) = {
        let mut s: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        (s[0], s[1])
    };
    // a second null direction means the solution is not unique
    if second.0 <= 1e-10 * svd.singular_values.max() {
        return Err(Error::DegenerateConfiguration("correspondences do not determine the pose".into()));
    }
    let h = v_t.row(last.1);
    let ph = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    // undo the normalisations: P = T2⁻¹ P̂ T3
    let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
    let mut t3 = nalgebra::Matrix4::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-c3 * s3));
    let mut p = t2_inv * ph * t3;

    let mut m = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let scale = svd.singular_values.mean();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateConfiguration("vanishing rotation block".into()));
    }
    let rotation = crate::geometry::nearest_rotation(&m)?;
    let translation = p.column(3) / scale;
    let pose = Pose::new(rotation, translation.into_owned())?;

    let behind = pts.iter().filter(|x| pose.to_camera(&ScenePoint::from(**x)).z <= 0.0).count();
    if 2 * behind > n {
        return Err(Error::DegenerateConfiguration("points behind the camera".into()));
    }
    Ok(pose)
}

/// Pose from points on one plane via the plane-to-image homography.
/// `e1`, `e2` span the plane through `origin`.
fn planar_pose(
    rays: &[nalgebra::Vector2<f64>],
    pts: &[Vector3<f64>],
    origin: &Vector3<f64>,
    e1: &Vector3<f64>,
    e2: &Vector3<f64>,
) -> Result<Pose> {
    let n = rays.len();
    let e2 = (e2 - e1 * e1.dot(e2)).normalize();
    let e3 = e1.cross(&e2);
    let plane: Vec<nalgebra::Vector2<f64>> = pts
        .iter()
        .map(|x| nalgebra::Vector2::new(e1.dot(&(x - origin)), e2.dot(&(x - origin))))
        .collect();
    let (c2, s2) = normalizer(rays, std::f64::consts::SQRT_2);
    let (cq, sq) = normalizer(&plane, std::f64::consts::SQRT_2);
    let mut a = DMatrix::zeros(2 * n, 9);
    for i in 0..n {
        let r = (rays[i] - c2) * s2;
        let q = ((plane[i] - cq) * sq).push(1.0);
        for j in 0..3 {
            a[(2 * i, j)] = q[j];
            a[(2 * i, 6 + j)] = -r.x * q[j];
            a[(2 * i + 1, 3 + j)] = q[j];
            a[(2 * i + 1, 6 + j)] = -r.y * q[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let mut s: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    if s[1].0 <= 1e-10 * svd.singular_values.max() {
        return Err(Error::DegenerateConfiguration("correspondences do not determine the pose".into()));
    }
    let h = v_t.row(s[0].1);
    let hn = Matrix3::from_fn(|r, c| h[3 * r + c]);
    let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
    let tq = Matrix3::new(sq, 0.0, -cq.x * sq, 0.0, sq, -cq.y * sq, 0.0, 0.0, 1.0);
    let mut hm = t2_inv * hn * tq;

    // columns of H are λ(r1, r2, t) in the plane frame
    let lambda = 2.0 / (hm.column(0).norm() + hm.column(1).norm());
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::DegenerateConfiguration("vanishing homography".into()));
    }
    hm *= lambda;
    if hm[(2, 2)] < 0.0 {
        hm = -hm;
    }
    let r1 = hm.column(0).into_owned();
    let r2 = hm.column(1).into_owned();
    let approx = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let r_plane = crate::geometry::nearest_rotation(&approx)?;
    let t_plane = hm.column(2).into_owned();
    let basis = Matrix3::from_columns(&[*e1, e2, e3]);
    let rotation = r_plane * basis.transpose();
    let translation = t_plane - rotation * origin;
    let pose = Pose::new(rotation, translation)?;
    let behind = pts.iter().filter(|x| pose.to_camera(&ScenePoint::from(**x)).z <= 0.0).count();
    if 2 * behind > n {
        return Err(Error::DegenerateConfiguration("points behind the camera".into()));
    }
    Ok(pose)
}

/// Gauss-Newton on the summed squared reprojection error over a local
/// increment `(ω, δt)`. Steps that do not lower the error are halved; the
/// result never has a larger error than `init`.
pub fn refine_pose(init: &Pose, matches: &[(ImagePoint, ScenePoint)], k: &Intrinsics, iters: usize) -> Pose {
    let mut pose = *init;
    let mut err = total_error(&pose, matches, k);
    if !err.is_finite() || matches.len() < 3 {
        return pose;
    }
    for _ in 0..iters {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (u, x) in matches {
            let c = pose.to_camera(x);
            let iz = 1.0 / c.z;
            let r = nalgebra::Vector2::new(k.fx * c.x * iz + k.cx - u.x, k.fy * c.y * iz + k.cy - u.y);
            let jp = nalgebra::Matrix2x3::new(k.fx * iz, 0.0, -k.fx * c.x * iz * iz, 0.0, k.fy * iz, -k.fy * c.y * iz * iz);
            // d(camera point) / d(ω, δt) = [-[c]ₓ | I]
            let mut jc = nalgebra::Matrix3x6::zeros();
            jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&-c.cross_matrix());
            jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = jp * jc;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let s = step * scale;
            let omega = Vector3::new(s[0], s[1], s[2]);
            let dt = Vector3::new(s[3], s[4], s[5]);
            if let Ok(candidate) = pose.perturbed(&omega, &dt) {
                let e = total_error(&candidate, matches, k);
                if e <= err {
                    let gain = err - e;
                    pose = candidate;
                    err = e;
                    accepted = gain > 0.0;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted || step.norm() < 1e-14 {
            break;
        }
    }
    pose
}

/// Indices of matches reprojecting strictly within `px`.
pub fn inliers(pose: &Pose, matches: &[(ImagePoint, ScenePoint)], k: &Intrinsics, px: f64) -> Vec<usize> {
    let px2 = px * px;
    matches
        .iter()
        .enumerate()
        .filter(|(_, (u, x))| reprojection_sq(k, pose, x, u) < px2)
        .map(|(i, _)| i)
        .collect()
}

fn iteration_bound(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w = inlier_ratio.powi(MINIMAL_SAMPLE as i32);
    if w >= 1.0 {
        return 1;
    }
    if w <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// RANSAC over minimal six-point DLT hypotheses; the best hypothesis is
/// refined on its inliers.
pub fn ransac_pnp(candidates: &[MatchCandidate], k: &Intrinsics, cfg: &RansacConfig) -> LocalizationResult {
    let pairs: Vec<(ImagePoint, ScenePoint)> = candidates.iter().map(|c| (c.u, c.scene_point)).collect();
    ransac_pairs(&pairs, k, cfg)
}

pub fn ransac_pairs(pairs: &[(ImagePoint, ScenePoint)], k: &Intrinsics, cfg: &RansacConfig) -> LocalizationResult {
    let start = Instant::now();
    let n = pairs.len();
    let mut result = LocalizationResult {
        pose: None,
        inliers: 0,
        iterations: 0,
        time_ms: 0.0,
    };
    if n < cfg.min_inliers.max(MINIMAL_SAMPLE) {
        result.time_ms = start.elapsed().as_secs_f64() * 1e3;
        return result;
    }
    let mut rng = crate::seed::rng(cfg.seed, "ransac", 0);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut bound = cfg.max_iters;
    let mut iter = 0;
    let mut sample = Vec::with_capacity(MINIMAL_SAMPLE);
    while iter < bound {
        iter += 1;
        sample.clear();
        let mut idx = index::sample(&mut rng, n, MINIMAL_SAMPLE).into_vec();
        idx.sort_unstable();
        sample.extend(idx.iter().map(|&i| pairs[i]));
        let Ok(hyp) = solve_pnp_dlt(&sample, k) else {
            continue;
        };
        let found = inliers(&hyp, pairs, k, cfg.inlier_px);
        if best.as_ref().is_none_or(|(_, b)| found.len() > b.len()) {
            bound = iteration_bound(found.len() as f64 / n as f64, cfg.confidence, cfg.max_iters);
            best = Some((hyp, found));
        }
    }
    result.iterations = iter;
    if let Some((hyp, found)) = best.filter(|(_, f)| f.len() >= cfg.min_inliers) {
        let support: Vec<_> = found.iter().map(|&i| pairs[i]).collect();
        let mut pose = refine_pose(&hyp, &support, k, 20);
        let mut count = found.len();
        let grown = inliers(&pose, pairs, k, cfg.inlier_px);
        if grown.len() > count {
            let support: Vec<_> = grown.iter().map(|&i| pairs[i]).collect();
            pose = refine_pose(&pose, &support, k, 20);
            count = inliers(&pose, pairs, k, cfg.inlier_px).len().max(grown.len());
        }
        result.pose = Some(pose);
        result.inliers = count;
    }
    result.time_ms = start.elapsed().as_secs_f64() * 1e3;
    result
}

/// Fraction of matches whose scene point reprojects under the true pose
/// strictly within `threshold_px` of the query point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingAccuracy {
    pub value: f64,
    /// Set when the match set was empty.
    pub warn: bool,
}

pub fn matching_accuracy(
    matches: &[(ImagePoint, ScenePoint)],
    gt: &Pose,
    k: &Intrinsics,
    threshold_px: f64,
) -> MatchingAccuracy {
    if matches.is_empty() {
        return MatchingAccuracy { value: 0.0, warn: true };
    }
    let ok = matches.iter().filter(|(u, x)| reprojection_sq(k, gt, x, u) < threshold_px * threshold_px).count();
    MatchingAccuracy {
        value: ok as f64 / matches.len() as f64,
        warn: false,
    }
}

/// Per-image outcome of one method, before comparison with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub image_id: u32,
    pub fold: usize,
    pub accuracy: MatchingAccuracy,
    pub result: LocalizationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: u32,
    pub fold: usize,
    pub ma: f64,
    pub ma_warn: bool,
    /// `None` for a failed localization.
    pub pe_cm: Option<f64>,
    pub oe_deg: Option<f64>,
    pub inliers: usize,
    #[serde(skip)]
    pub time_ms: f64,
}

impl ImageScore {
    pub fn failed(&self) -> bool {
        self.pe_cm.is_none()
    }
}

pub fn score_images(outcomes: &[ImageOutcome], gt: &[Pose]) -> Result<Vec<ImageScore>> {
    if outcomes.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "results and ground-truth poses",
            left: outcomes.len(),
            right: gt.len(),
        });
    }
    Ok(outcomes
        .iter()
        .zip(gt)
        .map(|(o, g)| ImageScore {
            image_id: o.image_id,
            fold: o.fold,
            ma: o.accuracy.value,
            ma_warn: o.accuracy.warn,
            pe_cm: o.result.pose.as_ref().map(|p| position_error(p, g)),
            oe_deg: o.result.pose.as_ref().map(|p| orientation_error(p, g)),
            inliers: o.result.inliers,
            time_ms: o.result.time_ms,
        })
        .collect())
}

/// Element at index `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Median,
}

/// One summary line. Failed poses enter PE/OE as +∞.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub descriptor: String,
    pub statistic: Statistic,
    pub ma_percent: f64,
    pub pe_cm: f64,
    pub oe_deg: f64,
    /// `None` when timing is excluded from the report.
    pub time_ms: Option<f64>,
    pub failures: usize,
}

pub fn summarize(method: &str, descriptor: &str, scores: &[ImageScore], with_time: bool) -> [SummaryRow; 2] {
    let ma: Vec<f64> = scores.iter().map(|s| s.ma * 100.0).collect();
    let pe: Vec<f64> = scores.iter().map(|s| s.pe_cm.unwrap_or(f64::INFINITY)).collect();
    let oe: Vec<f64> = scores.iter().map(|s| s.oe_deg.unwrap_or(f64::INFINITY)).collect();
    let time: Vec<f64> = scores.iter().map(|s| s.time_ms).collect();
    let failures = scores.iter().filter(|s| s.failed()).count();
    let row = |statistic, f: fn(&[f64]) -> f64| SummaryRow {
        method: method.to_string(),
        descriptor: descriptor.to_string(),
        statistic,
        ma_percent: f(&ma),
        pe_cm: f(&pe),
        oe_deg: f(&oe),
        time_ms: with_time.then(|| f(&time)),
        failures,
    };
    [row(Statistic::Mean, mean), row(Statistic::Median, lower_median)]
}

pub const METHODS: [&str; 3] = ["naive", "rest_no_whitening", "rest_whitening"];

fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else if v.is_nan() {
        serde_json::Value::Null
    } else if v > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

fn csv_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v.is_nan() {
        String::new()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl SummaryRow {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "descriptor": self.descriptor,
            "statistic": self.statistic,
            "MA_percent": json_number(self.ma_percent),
            "PE_cm": json_number(self.pe_cm),
            "OE_deg": json_number(self.oe_deg),
            "time_ms": self.time_ms.map_or(serde_json::Value::Null, json_number),
            "failures": self.failures,
            "infinite_mean": self.statistic == Statistic::Mean && (self.pe_cm.is_infinite() || self.oe_deg.is_infinite()),
        })
    }

    pub fn to_csv(&self) -> String {
        let stat = match self.statistic {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.descriptor,
            stat,
            csv_number(self.ma_percent),
            csv_number(self.pe_cm),
            csv_number(self.oe_deg),
            self.time_ms.map_or(String::new(), csv_number),
            self.failures
        )
    }
}

pub const CSV_HEADER: &str = "method,descriptor,statistic,MA_percent,PE_cm,OE_deg,time_ms,failures";

/// Scores of every method, pooled and per fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub descriptor: String,
    pub with_time: bool,
    /// `(method, per-image scores)` in method order.
    pub methods: Vec<(String, Vec<ImageScore>)>,
}

impl Report {
    pub fn pooled(&self) -> Vec<SummaryRow> {
        self.methods
            .iter()
            .flat_map(|(m, s)| summarize(m, &self.descriptor, s, self.with_time))
            .collect()
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.methods.iter().flat_map(|(_, s)| s.iter().map(|x| x.fold)).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn per_fold(&self, fold: usize) -> Vec<SummaryRow> {
        self.methods
            .iter()
            .flat_map(|(m, s)| {
                let scores: Vec<ImageScore> = s.iter().filter(|x| x.fold == fold).cloned().collect();
                summarize(m, &self.descriptor, &scores, self.with_time)
            })
            .collect()
    }

    pub fn row(&self, method: &str, statistic: Statistic) -> Option<SummaryRow> {
        self.pooled().into_iter().find(|r| r.method == method && r.statistic == statistic)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let folds: Vec<serde_json::Value> = self
            .folds()
            .into_iter()
            .map(|f| {
                serde_json::json!({
                    "fold": f,
                    "rows": self.per_fold(f).iter().map(SummaryRow::to_json).collect::<Vec<_>>(),
                })
            })
            .collect();
        let images: serde_json::Map<String, serde_json::Value> = self
            .methods
            .iter()
            .map(|(m, s)| {
                let rows = s
                    .iter()
                    .map(|x| {
                        serde_json::json!({
                            "image_id": x.image_id,
                            "fold": x.fold,
                            "MA_percent": json_number(x.ma * 100.0),
                            "MA_warn": x.ma_warn,
                            "PE_cm": x.pe_cm.map_or(serde_json::Value::Null, json_number),
                            "OE_deg": x.oe_deg.map_or(serde_json::Value::Null, json_number),
                            "inliers": x.inliers,
                            "failed": x.failed(),
                        })
                    })
                    .collect();
                (m.clone(), serde_json::Value::Array(rows))
            })
            .collect();
        serde_json::json!({
            "descriptor": self.descriptor,
            "rows": self.pooled().iter().map(SummaryRow::to_json).collect::<Vec<_>>(),
            "folds": folds,
            "images": images,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.pooled() {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(800.0, 800.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn gt() -> Pose {
        let c = Point3::new(5.0, 170.0, 48.0);
        let f = Vector3::new(0.08, -1.0, 0.02);
        Pose::look_along(&c, &f, &Vector3::z()).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScenePoint> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-40.0..40.0), rng.random_range(0.0..15.0), rng.random_range(10.0..90.0)))
            .collect()
    }

    fn observe(pose: &Pose, pts: &[ScenePoint]) -> Vec<(ImagePoint, ScenePoint)> {
        let p = crate::geometry::ProjectionMatrix::from_camera(&k(), pose);
        pts.iter().map(|x| (crate::geometry::project(&p, x).unwrap(), *x)).collect()
    }

    fn pose_gap(a: &Pose, b: &Pose) -> (f64, f64) {
        (position_error(a, b), orientation_error(a, b))
    }

    #[test]
    fn dlt_recovers_exact_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = observe(&gt(), &scene(&mut rng, 20));
        let est = solve_pnp_dlt(&m, &k()).unwrap();
        let refined = refine_pose(&est, &m, &k(), 20);
        let (pe, oe) = pose_gap(&refined, &gt());
        assert!(pe < 1e-6 && oe < 1e-6, "{pe} {oe}");
        let mut shuffled = m.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        let other = refine_pose(&solve_pnp_dlt(&shuffled, &k()).unwrap(), &shuffled, &k(), 20);
        assert!((other.rotation() - refined.rotation()).amax() < 1e-9);
        assert!((other.translation() - refined.translation()).amax() < 1e-9);
    }

    #[test]
    fn dlt_rejects_degenerate_input() {
        let line: Vec<ScenePoint> = (0..10).map(|i| Point3::new(i as f64 * 3.0 - 15.0, 0.0, 50.0)).collect();
        let m = observe(&gt(), &line);
        assert!(matches!(solve_pnp_dlt(&m, &k()), Err(Error::DegenerateConfiguration(_))));
        assert!(solve_pnp_dlt(&m[..5], &k()).is_err());
    }

    #[test]
    fn dlt_handles_planar_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for plane_y in [0.0, 10.0] {
            let pts: Vec<ScenePoint> = (0..12)
                .map(|_| Point3::new(rng.random_range(-40.0..40.0), plane_y, rng.random_range(10.0..90.0)))
                .collect();
            let m = observe(&gt(), &pts);
            let (pe, oe) = pose_gap(&solve_pnp_dlt(&m, &k()).unwrap(), &gt());
            assert!(pe < 1e-6 && oe < 1e-6, "{pe} {oe}");
            let (pe, oe) = pose_gap(&solve_pnp_dlt(&m[..6], &k()).unwrap(), &gt());
            assert!(pe < 1e-6 && oe < 1e-6, "{pe} {oe}");
        }
    }

    #[test]
    fn refinement_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = observe(&gt(), &scene(&mut rng, 30));
        let same = refine_pose(&gt(), &m, &k(), 20);
        assert!((same.rotation() - gt().rotation()).amax() < 1e-9);
        assert!((same.translation() - gt().translation()).amax() < 1e-9);

        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let off = gt().perturbed(&(axis * 1f64.to_radians()), &Vector3::new(0.6, -0.5, 0.6)).unwrap();
        let back = refine_pose(&off, &m, &k(), 20);
        let (pe, oe) = pose_gap(&back, &gt());
        assert!(pe < 1e-6 && oe < 1e-6, "{pe} {oe}");

        // noisy data: error never rises as the iteration budget grows
        let noisy: Vec<_> = m.iter().map(|(u, x)| (ImagePoint::new(u.x + rng.random_range(-2.0..2.0), u.y), *x)).collect();
        let mut last = total_error(&off, &noisy, &k());
        for it in 0..8 {
            let e = total_error(&refine_pose(&off, &noisy, &k(), it), &noisy, &k());
            assert!(e <= last + 1e-9);
            last = e;
        }
    }

    fn candidates(pairs: &[(ImagePoint, ScenePoint)]) -> Vec<MatchCandidate> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (u, x))| MatchCandidate {
                query_index: i,
                u: *u,
                scene_point: *x,
                class: i,
                confidence: 1.0,
            })
            .collect()
    }

    #[test]
    fn ransac_outlier_free_and_too_few() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = observe(&gt(), &scene(&mut rng, 100));
        let r = ransac_pnp(&candidates(&m), &k(), &RansacConfig::default());
        let (pe, oe) = pose_gap(&r.pose.unwrap(), &gt());
        assert!(pe < 1e-6 && oe < 1e-6);
        assert_eq!(r.inliers, 100);
        let few = ransac_pnp(&candidates(&m[..5]), &k(), &RansacConfig::default());
        assert!(few.pose.is_none());
    }

    #[test]
    fn ransac_survives_forty_percent_outliers() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let mut m = observe(&gt(), &scene(&mut rng, 60));
            for x in scene(&mut rng, 40) {
                m.push((ImagePoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)), x));
            }
            let cfg = RansacConfig { seed, ..RansacConfig::default() };
            let r = ransac_pnp(&candidates(&m), &k(), &cfg);
            let (pe, oe) = pose_gap(&r.pose.unwrap(), &gt());
            assert!(pe < 1e-3 && oe < 1e-3, "{pe} {oe}");
            assert!(r.inliers >= 58);
            let again = ransac_pnp(&candidates(&m), &k(), &cfg);
            assert_eq!(again.pose, r.pose);
            assert_eq!(again.iterations, r.iterations);
        }
    }

    #[test]
    fn three_pixel_rule() {
        let x = Point3::new(0.0, 0.0, 50.0);
        let u = observe(&gt(), &[x])[0].0;
        let at = |dx: f64| matching_accuracy(&[(ImagePoint::new(u.x + dx, u.y), x)], &gt(), &k(), 3.0).value;
        assert_eq!(at(2.9), 1.0);
        assert_eq!(at(3.1), 0.0);
        let empty = matching_accuracy(&[], &gt(), &k(), 3.0);
        assert_eq!(empty, MatchingAccuracy { value: 0.0, warn: true });
    }

    #[test]
    fn medians_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..30 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(lower_median(&v), s[(n - 1) / 2]);
        }
        assert_eq!(lower_median(&[1.0, f64::INFINITY, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn report_structure() {
        let pose = gt();
        let ok = ImageOutcome {
            image_id: 0,
            fold: 0,
            accuracy: MatchingAccuracy { value: 0.5, warn: false },
            result: LocalizationResult { pose: Some(pose), inliers: 30, iterations: 5, time_ms: 1.0 },
        };
        let failed = ImageOutcome {
            image_id: 1,
            fold: 1,
            accuracy: MatchingAccuracy { value: 0.1, warn: false },
            result: LocalizationResult { pose: None, inliers: 0, iterations: 2000, time_ms: 3.0 },
        };
        let single = score_images(std::slice::from_ref(&ok), &[pose]).unwrap();
        assert_eq!(single[0].pe_cm, Some(0.0));
        assert_eq!(single[0].oe_deg, Some(0.0));
        assert!(score_images(&[ok.clone()], &[]).is_err());

        let scores = score_images(&[ok, failed], &[pose, pose]).unwrap();
        let report = Report {
            descriptor: "sift".into(),
            with_time: false,
            methods: METHODS.iter().map(|m| (m.to_string(), scores.clone())).collect(),
        };
        let rows = report.pooled();
        assert_eq!(rows.len(), 6);
        let mean = report.row("naive", Statistic::Mean).unwrap();
        assert!(mean.pe_cm.is_infinite());
        assert_eq!(mean.failures, 1);
        assert!((mean.ma_percent - 30.0).abs() < 1e-12);
        let median = report.row("naive", Statistic::Median).unwrap();
        assert_eq!(median.pe_cm, 0.0);
        let json = report.to_json();
        assert_eq!(json["rows"][0]["PE_cm"], "inf");
        assert_eq!(json["rows"][0]["infinite_mean"], true);
        assert_eq!(json["folds"].as_array().unwrap().len(), 2);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("naive,sift,mean,30.000000,inf,inf,,1"));
        let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        for m in METHODS {
            assert_eq!(methods.iter().filter(|x| **x == m).count(), 2);
        }
    }
}
