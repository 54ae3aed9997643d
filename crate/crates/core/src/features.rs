//! Keypoint detection, gradient-histogram description, binary descriptor
//! adaptation, representative subset selection, external dataset ingestion
//! and the binary feature store.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correspondence::FeatureCluster;
use crate::error::{Error, Result};
use crate::geometry::{ImagePoint, ProjectionMatrix, ScenePoint};
use crate::image::{GrayImage, RgbImage};

/// Minimum distance from a keypoint to the image border, in pixels.
pub const BORDER: usize = 16;
pub const DESCRIPTOR_DIM: usize = 128;

const PATCH: usize = 16;
const CELLS: usize = 4;
const BINS: usize = 8;
const CLIP: f32 = 0.2;

/// Real-valued feature descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(Vec<f32>);

impl Descriptor {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("descriptor", "non-finite component"));
        }
        Ok(Descriptor(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Descriptor::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Real,
    Synthetic,
}

/// A descriptor with its image location and, once known, its 3D point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub descriptor: Descriptor,
    pub u: ImagePoint,
    pub image_id: u32,
    pub origin: Origin,
    pub scene_point: Option<ScenePoint>,
}

impl FeatureRecord {
    /// Coordinates are rounded to `f32` so records survive the feature
    /// store unchanged.
    pub fn new(
        descriptor: Descriptor,
        u: ImagePoint,
        image_id: u32,
        origin: Origin,
        scene_point: Option<ScenePoint>,
    ) -> Self {
        FeatureRecord {
            descriptor,
            u: ImagePoint::new(u.x as f32 as f64, u.y as f32 as f64),
            image_id,
            origin,
            scene_point: scene_point.map(round_point),
        }
    }

    pub fn with_scene_point(mut self, x: Option<ScenePoint>) -> Self {
        self.scene_point = x.map(round_point);
        self
    }
}

fn round_point(x: ScenePoint) -> ScenePoint {
    ScenePoint::new(x.x as f32 as f64, x.y as f32 as f64, x.z as f32 as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub harris_k: f64,
    pub window_sigma: f64,
    /// Fraction of the strongest response below which corners are dropped.
    pub relative_threshold: f64,
    pub nms_radius: usize,
    pub max_features: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            harris_k: 0.04,
            window_sigma: 1.5,
            relative_threshold: 0.01,
            nms_radius: 5,
            max_features: 800,
        }
    }
}

/// Harris corners with non-maximum suppression and sub-pixel peak
/// refinement, strongest first.
pub fn detect_keypoints(image: &GrayImage, cfg: &DetectorConfig) -> Vec<ImagePoint> {
    let (w, h) = (image.width(), image.height());
    if w < 2 * BORDER + 1 || h < 2 * BORDER + 1 || cfg.max_features == 0 {
        return Vec::new();
    }
    let mut ixx = GrayImage::new(w, h);
    let mut iyy = GrayImage::new(w, h);
    let mut ixy = GrayImage::new(w, h);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| image.get((x as isize + dx) as usize, (y as isize + dy) as usize);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            ixx.set(x, y, gx * gx);
            iyy.set(x, y, gy * gy);
            ixy.set(x, y, gx * gy);
        }
    }
    let (sxx, syy, sxy) = (
        ixx.gaussian_blur(cfg.window_sigma),
        iyy.gaussian_blur(cfg.window_sigma),
        ixy.gaussian_blur(cfg.window_sigma),
    );
    let response = GrayImage::from_fn(w, h, |x, y| {
        let (a, b, c) = (sxx.get(x, y), syy.get(x, y), sxy.get(x, y));
        a * b - c * c - cfg.harris_k * (a + b) * (a + b)
    });

    let max = response.data().iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Vec::new();
    }
    let threshold = cfg.relative_threshold * max;
    let r = cfg.nms_radius as isize;
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = response.get(x, y);
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let o = response.get(xx as usize, yy as usize);
                    // ties go to the earlier pixel in raster order
                    if o > v || (o == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                peaks.push((v, x, y));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    peaks.truncate(cfg.max_features);
    peaks
        .into_iter()
        .map(|(_, x, y)| {
            let fit = |m: f64, c: f64, p: f64| {
                let denom = m - 2.0 * c + p;
                if denom.abs() < 1e-12 {
                    0.0
                } else {
                    (0.5 * (m - p) / denom).clamp(-0.5, 0.5)
                }
            };
            let c = response.get(x, y);
            let dx = fit(response.get(x - 1, y), c, response.get(x + 1, y));
            let dy = fit(response.get(x, y - 1), c, response.get(x, y + 1));
            ImagePoint::new(x as f64 + dx, y as f64 + dy)
        })
        .collect()
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as usize, y0 as usize);
    let a = img.get(xi, yi);
    let b = img.get(xi + 1, yi);
    let c = img.get(xi, yi + 1);
    let d = img.get(xi + 1, yi + 1);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

fn in_bounds(image: &GrayImage, u: &ImagePoint) -> bool {
    let m = BORDER as f64;
    u.x >= m && u.y >= m && u.x <= (image.width() - 1) as f64 - m && u.y <= (image.height() - 1) as f64 - m
}

/// 128-dimensional gradient-orientation histogram over a 16 × 16 patch:
/// 4 × 4 cells of 8 orientation bins, Gaussian weighted, trilinearly
/// interpolated, L2-normalised, clipped at 0.2 and renormalised.
///
/// A patch without any gradient yields the uniform unit vector.
pub fn describe(image: &GrayImage, keypoint: &ImagePoint) -> Result<Descriptor> {
    if !in_bounds(image, keypoint) {
        return Err(Error::BorderViolation {
            x: keypoint.x,
            y: keypoint.y,
            margin: BORDER,
        });
    }
    let mut hist = [0f64; DESCRIPTOR_DIM];
    let half = PATCH as f64 / 2.0;
    let sigma = half;
    let cell = (PATCH / CELLS) as f64;
    for j in 0..PATCH {
        for i in 0..PATCH {
            // sample offsets centred on the keypoint
            let ox = i as f64 - half + 0.5;
            let oy = j as f64 - half + 0.5;
            let (sx, sy) = (keypoint.x + ox, keypoint.y + oy);
            let gx = bilinear(image, sx + 1.0, sy) - bilinear(image, sx - 1.0, sy);
            let gy = bilinear(image, sx, sy + 1.0) - bilinear(image, sx, sy - 1.0);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let ob = angle / std::f64::consts::TAU * BINS as f64 - 0.5;
            let cx = (ox + half) / cell - 0.5;
            let cy = (oy + half) / cell - 0.5;
            let (x0, y0, o0) = (cx.floor(), cy.floor(), ob.floor());
            let (fx, fy, fo) = (cx - x0, cy - y0, ob - o0);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let yy = y0 as isize + dy;
                if !(0..CELLS as isize).contains(&yy) {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let xx = x0 as isize + dx;
                    if !(0..CELLS as isize).contains(&xx) {
                        continue;
                    }
                    for (dob, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let bin = (o0 as isize + dob).rem_euclid(BINS as isize) as usize;
                        let idx = (yy as usize * CELLS + xx as usize) * BINS + bin;
                        hist[idx] += mag * weight * wx * wy * wo;
                    }
                }
            }
        }
    }
    Ok(normalize_clip(&hist))
}

fn normalize_clip(hist: &[f64]) -> Descriptor {
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        let v = (1.0 / hist.len() as f64).sqrt() as f32;
        return Descriptor(vec![v; hist.len()]);
    }
    let clipped: Vec<f64> = hist.iter().map(|v| (v / norm).min(CLIP as f64)).collect();
    let n2 = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
    Descriptor(clipped.iter().map(|v| (v / n2) as f32).collect())
}

/// Detects and describes; keypoints too close to the border are skipped.
pub fn extract(image: &GrayImage, cfg: &DetectorConfig) -> Vec<(ImagePoint, Descriptor)> {
    detect_keypoints(image, cfg)
        .into_iter()
        .filter_map(|u| describe(image, &u).ok().map(|d| (u, d)))
        .collect()
}

/// Packed binary descriptor, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDescriptor {
    bits: usize,
    bytes: Vec<u8>,
}

impl BinaryDescriptor {
    pub fn new(bits: usize, bytes: Vec<u8>) -> Result<Self> {
        if bits == 0 || bytes.len() != bits.div_ceil(8) {
            return Err(Error::format("binary descriptor", "byte count does not match bit count"));
        }
        Ok(BinaryDescriptor { bits, bytes })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        BinaryDescriptor::new(bits.len(), bytes)
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn hamming(&self, other: &BinaryDescriptor) -> u32 {
        (0..self.bits.min(other.bits)).filter(|&i| self.bit(i) != other.bit(i)).count() as u32
    }
}

/// One real component in {0, 1} per bit, unnormalised.
pub fn binary_to_float(bits: &BinaryDescriptor) -> Descriptor {
    Descriptor((0..bits.len()).map(|i| if bits.bit(i) { 1.0 } else { 0.0 }).collect())
}

/// Keeps `budget` medoids per cluster (k-medoids, Euclidean). Clusters no
/// larger than the budget are returned unchanged.
pub fn select_representative(clusters: &[FeatureCluster], budget: usize) -> Vec<FeatureCluster> {
    let budget = budget.max(1);
    crate::par::map(clusters, |c| {
        if c.members.len() <= budget {
            return c.clone();
        }
        let keep = k_medoids(&c.members.iter().map(|f| &f.descriptor).collect::<Vec<_>>(), budget);
        FeatureCluster {
            key: c.key,
            scene_point: c.scene_point,
            origin: c.origin,
            members: keep.into_iter().map(|i| c.members[i].clone()).collect(),
        }
    })
}

/// Greedy BUILD initialisation followed by alternating assignment and
/// medoid update until the medoid set is stable. Returns sorted indices.
pub fn k_medoids(points: &[&Descriptor], k: usize) -> Vec<usize> {
    let n = points.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = points[i].squared_distance(points[j]).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let d = |i: usize, j: usize| dist[i * n + j];

    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    for _ in 0..k {
        let mut best = (f64::INFINITY, usize::MAX);
        for cand in 0..n {
            if medoids.contains(&cand) {
                continue;
            }
            let cost: f64 = (0..n).map(|i| nearest[i].min(d(i, cand))).sum();
            if cost < best.0 {
                best = (cost, cand);
            }
        }
        medoids.push(best.1);
        for i in 0..n {
            nearest[i] = nearest[i].min(d(i, best.1));
        }
    }

    for _ in 0..100 {
        let assign: Vec<usize> = (0..n)
            .map(|i| {
                (0..k)
                    .min_by(|&a, &b| d(i, medoids[a]).total_cmp(&d(i, medoids[b])).then(a.cmp(&b)))
                    .unwrap_or(0)
            })
            .collect();
        let mut changed = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            let mut best = (members.iter().map(|&j| d(*medoid, j)).sum::<f64>(), *medoid);
            for &cand in &members {
                let cost: f64 = members.iter().map(|&j| d(cand, j)).sum();
                if cost < best.0 - 1e-12 {
                    best = (cost, cand);
                }
            }
            if best.1 != *medoid {
                *medoid = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    medoids.sort_unstable();
    medoids
}

/// One image of an external dataset.
#[derive(Debug, Clone)]
pub struct ExternalImage {
    pub path: PathBuf,
    pub image: RgbImage,
    pub projection: ProjectionMatrix,
    pub lighting: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    image: PathBuf,
    #[serde(rename = "P")]
    p: Vec<f64>,
    lighting: String,
}

/// Reads a JSON manifest `[{"image": path, "P": [12 numbers], "lighting": label}]`.
/// Relative image paths resolve against the manifest's directory.
pub fn load_external_dataset(manifest_path: &Path) -> Result<Vec<ExternalImage>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::ManifestParse {
        path: manifest_path.to_owned(),
        message: e.to_string(),
    })?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::ManifestParse {
        path: manifest_path.to_owned(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .enumerate()
        .map(|(index, e)| {
            if e.p.len() != 12 {
                return Err(Error::MalformedMatrix {
                    index,
                    count: e.p.len(),
                });
            }
            let projection = ProjectionMatrix::from_row_major(&e.p).map_err(|err| Error::ManifestParse {
                path: manifest_path.to_owned(),
                message: format!("entry {index}: {err}"),
            })?;
            let path = base.join(&e.image);
            if !path.is_file() {
                return Err(Error::MissingImage { index, path });
            }
            Ok(ExternalImage {
                image: RgbImage::read_ppm(&path)?,
                path,
                projection,
                lighting: e.lighting,
            })
        })
        .collect()
}

const STORE_MAGIC: &[u8; 4] = b"FSTR";
const STORE_VERSION: u32 = 1;

/// Serialises records in the little-endian feature-store layout.
pub fn write_feature_store(w: &mut impl Write, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + records.len() * (26 + 4 * dim));
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        if r.descriptor.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.descriptor.dim(),
            });
        }
        buf.extend_from_slice(&r.image_id.to_le_bytes());
        buf.extend_from_slice(&(r.u.x as f32).to_le_bytes());
        buf.extend_from_slice(&(r.u.y as f32).to_le_bytes());
        buf.push(match r.origin {
            Origin::Real => 0,
            Origin::Synthetic => 1,
        });
        buf.push(r.scene_point.is_some() as u8);
        let x = r.scene_point.unwrap_or(ScenePoint::origin());
        for c in [x.x, x.y, x.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for &v in r.descriptor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::format("feature store", e.to_string()))
}

pub fn read_feature_store(r: &mut impl Read) -> Result<(usize, Vec<FeatureRecord>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::format("feature store", e.to_string()))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != STORE_MAGIC {
        return Err(Error::format("feature store", "bad magic"));
    }
    let version = cur.u32()?;
    if version != STORE_VERSION {
        return Err(Error::format("feature store", format!("unsupported version {version}")));
    }
    let dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let image_id = cur.u32()?;
        let (ux, uy) = (cur.f32()?, cur.f32()?);
        let origin = match cur.u8()? {
            0 => Origin::Real,
            1 => Origin::Synthetic,
            o => return Err(Error::format("feature store", format!("bad origin tag {o}"))),
        };
        let has_point = cur.u8()?;
        let p = [cur.f32()?, cur.f32()?, cur.f32()?];
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(cur.f32()?);
        }
        records.push(FeatureRecord {
            descriptor: Descriptor::new(values)?,
            u: ImagePoint::new(ux as f64, uy as f64),
            image_id,
            origin,
            scene_point: (has_point != 0).then(|| ScenePoint::new(p[0] as f64, p[1] as f64, p[2] as f64)),
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::format("feature store", "trailing bytes"));
    }
    Ok((dim, records))
}

pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("binary", "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_feature_store(path: &Path, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_feature_store(&mut f, dim, records)?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_feature_store(path: &Path) -> Result<(usize, Vec<FeatureRecord>)> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_owned()));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    read_feature_store(&mut f)
}
