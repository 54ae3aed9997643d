//! Procedural scene, illumination grid, camera grid, software rendering and
//! per-pixel ray casting.
//!
//! World frame: +z is up, the facade lies in the plane y = 0 and faces +y.
//! Cameras stand in front of it (y > 0) and look toward -y at yaw 180°.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImagePoint, Intrinsics, Pose, ProjectionMatrix, ScenePoint};
use crate::image::RgbImage;
use crate::seed;

const RAY_EPS: f64 = 1e-9;

/// Linear RGB texture with values in [0, 1], sampled bilinearly.
#[derive(Debug, Clone)]
pub struct Texture {
    width: usize,
    height: usize,
    texels: Vec<[f64; 3]>,
}

impl Texture {
    pub fn new(width: usize, height: usize, texels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || texels.len() != width * height {
            return Err(Error::InvalidScene("texture must be nonempty and match its size".into()));
        }
        Ok(Texture {
            width,
            height,
            texels,
        })
    }

    pub fn uniform(rgb: [f64; 3]) -> Self {
        Texture {
            width: 1,
            height: 1,
            texels: vec![rgb],
        }
    }

    pub fn from_image(img: &RgbImage) -> Result<Self> {
        let texels = img
            .as_raw()
            .chunks_exact(3)
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Texture::new(img.width(), img.height(), texels)
    }

    /// Randomly coloured checkerboard overlaid with random rectangles and
    /// per-texel noise.
    pub fn procedural(spec: &ProceduralTexture) -> Self {
        let n = spec.size;
        let mut rng = seed::rng(spec.seed, "texture", 0);
        let cells = n.div_ceil(spec.cell_texels);
        let colors: Vec<[f64; 3]> = (0..cells * cells)
            .map(|_| {
                [
                    rng.random_range(0.08..0.95),
                    rng.random_range(0.08..0.95),
                    rng.random_range(0.08..0.95),
                ]
            })
            .collect();
        let mut texels: Vec<[f64; 3]> = (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                colors[(y / spec.cell_texels) * cells + x / spec.cell_texels]
            })
            .collect();
        for _ in 0..spec.rectangles {
            let w = rng.random_range(spec.cell_texels / 3..=spec.cell_texels * 2);
            let h = rng.random_range(spec.cell_texels / 3..=spec.cell_texels * 2);
            let x0 = rng.random_range(0..n.saturating_sub(w).max(1));
            let y0 = rng.random_range(0..n.saturating_sub(h).max(1));
            let c = [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ];
            for y in y0..(y0 + h).min(n) {
                for x in x0..(x0 + w).min(n) {
                    texels[y * n + x] = c;
                }
            }
        }
        if spec.noise > 0.0 {
            for t in texels.iter_mut() {
                let d = rng.random_range(-spec.noise..spec.noise);
                for c in t.iter_mut() {
                    *c = (*c + d).clamp(0.0, 1.0);
                }
            }
        }
        Texture {
            width: n,
            height: n,
            texels,
        }
    }

    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let x = (u.clamp(0.0, 1.0) * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v.clamp(0.0, 1.0) * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let t = |x: usize, y: usize| self.texels[y * self.width + x];
        let (a, b, c, d) = (t(x0, y0), t(x1, y0), t(x0, y1), t(x1, y1));
        let mut out = [0.0; 3];
        for i in 0..3 {
            let top = a[i] * (1.0 - fx) + b[i] * fx;
            let bottom = c[i] * (1.0 - fx) + d[i] * fx;
            out[i] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralTexture {
    pub seed: u64,
    #[serde(default = "default_texture_size")]
    pub size: usize,
    #[serde(default = "default_cell_texels")]
    pub cell_texels: usize,
    #[serde(default = "default_rectangles")]
    pub rectangles: usize,
    #[serde(default = "default_texture_noise")]
    pub noise: f64,
}

fn default_texture_size() -> usize {
    512
}
fn default_cell_texels() -> usize {
    24
}
fn default_rectangles() -> usize {
    160
}
fn default_texture_noise() -> f64 {
    0.02
}

impl Default for ProceduralTexture {
    fn default() -> Self {
        ProceduralTexture {
            seed: 7,
            size: default_texture_size(),
            cell_texels: default_cell_texels(),
            rectangles: default_rectangles(),
            noise: default_texture_noise(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub vertices: [ScenePoint; 3],
    pub uv: [[f64; 2]; 3],
    normal: Vector3<f64>,
}

impl Triangle {
    pub fn new(vertices: [ScenePoint; 3], uv: [[f64; 2]; 3]) -> Result<Self> {
        let n = (vertices[1] - vertices[0]).cross(&(vertices[2] - vertices[0]));
        if !(n.norm() > 1e-12) {
            return Err(Error::InvalidScene("degenerate triangle".into()));
        }
        if uv.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidScene("texture coordinates must lie in [0,1]".into()));
        }
        Ok(Triangle {
            vertices,
            uv,
            normal: n.normalize(),
        })
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    /// Möller–Trumbore; returns (distance, barycentric b1, b2).
    fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let e1 = self.vertices[1] - self.vertices[0];
        let e2 = self.vertices[2] - self.vertices[0];
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let s = origin - self.vertices[0];
        let b1 = s.dot(&p) * inv;
        if !(-RAY_EPS..=1.0 + RAY_EPS).contains(&b1) {
            return None;
        }
        let q = s.cross(&e1);
        let b2 = dir.dot(&q) * inv;
        if b2 < -RAY_EPS || b1 + b2 > 1.0 + RAY_EPS {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > RAY_EPS).then_some((t, b1, b2))
    }
}

/// Immutable triangle mesh with a single texture.
#[derive(Debug, Clone)]
pub struct Scene {
    triangles: Vec<Triangle>,
    texture: Texture,
    albedo: [f64; 3],
    ambient: f64,
}

pub struct Hit<'a> {
    pub point: ScenePoint,
    pub distance: f64,
    pub triangle: &'a Triangle,
    pub texel: [f64; 3],
}

impl Scene {
    pub fn new(triangles: Vec<Triangle>, texture: Texture, albedo: [f64; 3], ambient: f64) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidScene("scene needs at least one triangle".into()));
        }
        if albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidScene("albedo must lie in [0,1]".into()));
        }
        if !(ambient >= 0.0) {
            return Err(Error::InvalidScene("ambient must be non-negative".into()));
        }
        Ok(Scene {
            triangles,
            texture,
            albedo,
            ambient,
        })
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn from_config(cfg: &SceneConfig, base_dir: &Path) -> Result<Self> {
        let texture = match &cfg.texture {
            TextureSource::Procedural(p) => Texture::procedural(p),
            TextureSource::File { path } => {
                let p = base_dir.join(path);
                Texture::from_image(&RgbImage::read_ppm(&p)?)?
            }
        };
        let mut triangles = Vec::new();
        if let Some(f) = &cfg.facade {
            triangles.extend(facade_triangles(f)?);
            for (i, b) in cfg.boxes.iter().enumerate() {
                triangles.extend(box_triangles(b, f, i)?);
            }
        } else if !cfg.boxes.is_empty() {
            return Err(Error::InvalidScene("boxes require a facade".into()));
        }
        for t in &cfg.triangles {
            triangles.push(Triangle::new(
                [
                    Point3::from(t.vertices[0]),
                    Point3::from(t.vertices[1]),
                    Point3::from(t.vertices[2]),
                ],
                t.uv,
            )?);
        }
        Scene::new(triangles, texture, cfg.albedo, cfg.ambient)
    }

    /// The default 100 cm × 100 cm textured facade with box protrusions.
    pub fn default_facade() -> Self {
        Scene::from_config(&SceneConfig::default(), Path::new("."))
            .expect("default scene config is valid")
    }

    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<Hit<'_>> {
        let mut best: Option<(f64, f64, f64, &Triangle)> = None;
        for tri in &self.triangles {
            if let Some((t, b1, b2)) = tri.intersect(origin, dir) {
                if best.is_none_or(|(bt, ..)| t < bt) {
                    best = Some((t, b1, b2, tri));
                }
            }
        }
        best.map(|(t, b1, b2, tri)| {
            let b0 = 1.0 - b1 - b2;
            let u = b0 * tri.uv[0][0] + b1 * tri.uv[1][0] + b2 * tri.uv[2][0];
            let v = b0 * tri.uv[0][1] + b1 * tri.uv[1][1] + b2 * tri.uv[2][1];
            Hit {
                point: origin + dir * t,
                distance: t,
                triangle: tri,
                texel: self.texture.sample(u, v),
            }
        })
    }
}

fn facade_triangles(f: &FacadeConfig) -> Result<Vec<Triangle>> {
    let (x0, x1) = (-f.width / 2.0, f.width / 2.0);
    let (z0, z1) = (0.0, f.height);
    let p = |x: f64, z: f64| Point3::new(x, 0.0, z);
    // counter-clockwise seen from +y so the normal points toward the cameras
    Ok(vec![
        Triangle::new([p(x0, z0), p(x0, z1), p(x1, z0)], [[0.0, 1.0], [0.0, 0.0], [1.0, 1.0]])?,
        Triangle::new([p(x1, z0), p(x0, z1), p(x1, z1)], [[1.0, 1.0], [0.0, 0.0], [1.0, 0.0]])?,
    ])
}

/// Five visible faces of an axis-aligned box (the back face is against the
/// facade). Each face gets a texture window offset so faces do not repeat
/// the facade pattern beneath them.
fn box_triangles(b: &BoxConfig, f: &FacadeConfig, index: usize) -> Result<Vec<Triangle>> {
    let [x0, y0, z0] = b.min;
    let [x1, y1, z1] = b.max;
    if !(x1 > x0 && y1 > y0 && z1 > z0) {
        return Err(Error::InvalidScene(format!("box {index} has non-positive extent")));
    }
    let span = f.width.max(f.height);
    let mut out = Vec::new();
    // (corner, edge a, edge b) with a × b pointing outward
    let faces: [(Point3<f64>, Vector3<f64>, Vector3<f64>); 5] = [
        (Point3::new(x1, y1, z0), Vector3::new(x0 - x1, 0.0, 0.0), Vector3::new(0.0, 0.0, z1 - z0)), // +y front
        (Point3::new(x0, y0, z1), Vector3::new(0.0, y1 - y0, 0.0), Vector3::new(x1 - x0, 0.0, 0.0)), // +z top
        (Point3::new(x0, y0, z0), Vector3::new(x1 - x0, 0.0, 0.0), Vector3::new(0.0, y1 - y0, 0.0)), // -z bottom
        (Point3::new(x1, y0, z0), Vector3::new(0.0, y1 - y0, 0.0), Vector3::new(0.0, 0.0, z1 - z0)), // +x side
        (Point3::new(x0, y1, z0), Vector3::new(0.0, y0 - y1, 0.0), Vector3::new(0.0, 0.0, z1 - z0)), // -x side
    ];
    for (fi, (c, a, e)) in faces.iter().enumerate() {
        let (ua, ub) = (a.norm() / span, e.norm() / span);
        if ua > 1.0 || ub > 1.0 {
            return Err(Error::InvalidScene(format!("box {index} is larger than the facade")));
        }
        // deterministic window placement inside the texture
        let h = (index * 5 + fi) as f64;
        let ou = ((h * 0.618_034).fract()) * (1.0 - ua);
        let ov = ((h * 0.414_214 + 0.3).fract()) * (1.0 - ub);
        let uv = |s: f64, t: f64| [ou + s * ua, ov + (1.0 - t) * ub];
        let (p00, p10, p01, p11) = (*c, c + a, c + e, c + a + e);
        out.push(Triangle::new([p00, p10, p11], [uv(0.0, 0.0), uv(1.0, 0.0), uv(1.0, 1.0)])?);
        out.push(Triangle::new([p00, p11, p01], [uv(0.0, 0.0), uv(1.0, 1.0), uv(0.0, 1.0)])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacadeConfig {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriangleConfig {
    pub vertices: [[f64; 3]; 3],
    pub uv: [[f64; 2]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSource {
    Procedural(ProceduralTexture),
    File { path: String },
}

/// Scene description as stored in the JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub facade: Option<FacadeConfig>,
    #[serde(default)]
    pub boxes: Vec<BoxConfig>,
    #[serde(default)]
    pub triangles: Vec<TriangleConfig>,
    pub texture: TextureSource,
    #[serde(default = "unit_albedo")]
    pub albedo: [f64; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
}

fn unit_albedo() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_ambient() -> f64 {
    0.25
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            facade: Some(FacadeConfig {
                width: 100.0,
                height: 100.0,
            }),
            boxes: vec![
                BoxConfig {
                    min: [-38.0, 0.0, 58.0],
                    max: [-16.0, 10.0, 78.0],
                },
                BoxConfig {
                    min: [14.0, 0.0, 16.0],
                    max: [38.0, 8.0, 34.0],
                },
                BoxConfig {
                    min: [-8.0, 0.0, 84.0],
                    max: [12.0, 14.0, 96.0],
                },
            ],
            triangles: Vec::new(),
            texture: TextureSource::Procedural(ProceduralTexture::default()),
            albedo: unit_albedo(),
            ambient: default_ambient(),
        }
    }
}

/// Direction of light *travel* for a source at latitude `theta` and
/// longitude `phi` (degrees), with +z up.
pub fn light_direction(theta: f64, phi: f64) -> Vector3<f64> {
    let (t, p) = (theta.to_radians(), phi.to_radians());
    -Vector3::new(t.cos() * p.cos(), t.cos() * p.sin(), t.sin())
}

/// One fixed light from above plus one moving light at (theta, phi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightingCondition {
    pub theta: f64,
    pub phi: f64,
    pub top_intensity: f64,
    pub moving_intensity: f64,
}

pub const DEFAULT_TOP_INTENSITY: f64 = 0.6;
pub const DEFAULT_MOVING_INTENSITY: f64 = 0.8;

impl LightingCondition {
    pub fn new(theta: f64, phi: f64, top_intensity: f64, moving_intensity: f64) -> Result<Self> {
        if !(0.0..=90.0).contains(&theta) || !(0.0..360.0).contains(&phi) {
            return Err(Error::InvalidScene(format!("lighting angles out of range: θ={theta}, φ={phi}")));
        }
        Ok(LightingCondition {
            theta,
            phi,
            top_intensity,
            moving_intensity,
        })
    }

    /// (travel direction, intensity) for both sources.
    pub fn lights(&self) -> [(Vector3<f64>, f64); 2] {
        [
            (light_direction(90.0, 0.0), self.top_intensity),
            (light_direction(self.theta, self.phi), self.moving_intensity),
        ]
    }

    pub fn label(&self) -> String {
        format!("theta{:.0}_phi{:.0}", self.theta, self.phi)
    }
}

pub const LIGHT_THETAS: [f64; 8] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
pub const LIGHT_PHIS: [f64; 7] = [0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0];

/// The 8 × 7 = 56 conditions, row-major by θ then φ.
pub fn generate_lighting_grid() -> Vec<LightingCondition> {
    lighting_grid(DEFAULT_TOP_INTENSITY, DEFAULT_MOVING_INTENSITY)
}

pub fn lighting_grid(top_intensity: f64, moving_intensity: f64) -> Vec<LightingCondition> {
    LIGHT_THETAS
        .iter()
        .flat_map(|&theta| {
            LIGHT_PHIS.iter().map(move |&phi| LightingCondition {
                theta,
                phi,
                top_intensity,
                moving_intensity,
            })
        })
        .collect()
}

/// Rectangle of camera positions at a fixed height plus the yaw set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraExtents {
    /// Lateral (x) range in cm.
    pub lateral: [f64; 2],
    /// Distance (y) range from the facade in cm.
    pub distance: [f64; 2],
    pub height: f64,
    pub positions_per_axis: usize,
    /// Yaw angles in degrees; 180 looks straight at the facade.
    pub yaws: Vec<f64>,
}

impl Default for CameraExtents {
    fn default() -> Self {
        CameraExtents {
            lateral: [-24.0, 24.0],
            distance: [150.0, 195.0],
            height: 50.0,
            positions_per_axis: 4,
            yaws: vec![170.0, 175.0, 180.0, 185.0, 190.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPose {
    pub position_index: usize,
    pub yaw: f64,
    pub pose: Pose,
}

pub fn camera_forward(yaw_deg: f64) -> Vector3<f64> {
    let y = yaw_deg.to_radians();
    Vector3::new(y.sin(), y.cos(), 0.0)
}

pub fn camera_pose(center: &ScenePoint, yaw_deg: f64) -> Result<Pose> {
    Pose::look_along(center, &camera_forward(yaw_deg), &Vector3::z())
}

/// Positions row-major by distance then lateral offset, yaws innermost.
pub fn generate_camera_grid(extents: &CameraExtents) -> Result<Vec<GridPose>> {
    let n = extents.positions_per_axis;
    if n == 0 || extents.yaws.is_empty() {
        return Err(Error::InvalidScene("camera grid is empty".into()));
    }
    let lerp = |r: [f64; 2], i: usize| {
        if n == 1 {
            (r[0] + r[1]) / 2.0
        } else {
            r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n * extents.yaws.len());
    for di in 0..n {
        for li in 0..n {
            let c = Point3::new(lerp(extents.lateral, li), lerp(extents.distance, di), extents.height);
            for &yaw in &extents.yaws {
                out.push(GridPose {
                    position_index: di * n + li,
                    yaw,
                    pose: camera_pose(&c, yaw)?,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RenderMode {
    Synthetic,
    PseudoReal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderProfile {
    pub mode: RenderMode,
    pub specular_strength: f64,
    pub specular_exponent: f64,
    pub gamma: [f64; 3],
    pub noise_sigma: f64,
    pub vignette_strength: f64,
    pub seed: u64,
}

impl RenderProfile {
    pub fn synthetic() -> Self {
        RenderProfile {
            mode: RenderMode::Synthetic,
            specular_strength: 0.0,
            specular_exponent: 1.0,
            gamma: [1.0; 3],
            noise_sigma: 0.0,
            vignette_strength: 0.0,
            seed: 0,
        }
    }

    pub fn pseudo_real(seed: u64) -> Self {
        RenderProfile {
            mode: RenderMode::PseudoReal,
            specular_strength: 0.3,
            specular_exponent: 16.0,
            gamma: [1.1, 1.0, 0.9],
            noise_sigma: 2.0,
            vignette_strength: 0.15,
            seed,
        }
    }

    /// SYNTHETIC mode ignores every perturbation.
    pub fn normalized(&self) -> Self {
        match self.mode {
            RenderMode::Synthetic => RenderProfile {
                seed: self.seed,
                specular_exponent: self.specular_exponent,
                ..RenderProfile::synthetic()
            },
            RenderMode::PseudoReal => *self,
        }
    }
}

/// A camera with its lighting and rendering profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub id: usize,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub projection: ProjectionMatrix,
    pub lighting: LightingCondition,
    pub profile: RenderProfile,
}

impl CameraView {
    pub fn new(id: usize, intrinsics: Intrinsics, pose: Pose, lighting: LightingCondition, profile: RenderProfile) -> Self {
        CameraView {
            id,
            intrinsics,
            pose,
            projection: ProjectionMatrix::from_camera(&intrinsics, &pose),
            lighting,
            profile: profile.normalized(),
        }
    }

    /// World-space ray through an image point (pixel centres at integers).
    pub fn ray(&self, u: &ImagePoint) -> (Point3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let d = Vector3::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy, 1.0);
        (self.pose.center(), (self.pose.rotation().transpose() * d).normalize())
    }
}

/// Nearest surface point seen through `pixel`, or `None` for a miss.
pub fn raycast(scene: &Scene, view: &CameraView, pixel: &ImagePoint) -> Option<ScenePoint> {
    let (o, d) = view.ray(pixel);
    scene.intersect(&o, &d).map(|h| h.point)
}

fn shade(scene: &Scene, view: &CameraView, hit: &Hit<'_>, ray_dir: &Vector3<f64>) -> [f64; 3] {
    let mut n = *hit.triangle.normal();
    if n.dot(ray_dir) > 0.0 {
        n = -n;
    }
    let mut diffuse = scene.ambient;
    let mut specular = 0.0;
    let prof = &view.profile;
    for (travel, intensity) in view.lighting.lights() {
        let to_light = -travel;
        let ndl = n.dot(&to_light);
        if ndl <= 0.0 {
            continue;
        }
        diffuse += intensity * ndl;
        if prof.specular_strength > 0.0 {
            let reflected = 2.0 * ndl * n - to_light;
            let rv = reflected.dot(&(-ray_dir)).max(0.0);
            specular += prof.specular_strength * intensity * rv.powf(prof.specular_exponent);
        }
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = diffuse * scene.albedo[c] * hit.texel[c] + specular;
    }
    out
}

/// Renders one view. Pixel values are linear shading in [0, 1] mapped to 8
/// bits; PSEUDO_REAL adds specular highlights, per-channel gamma, radial
/// vignetting and seeded Gaussian noise in that order.
pub fn render(scene: &Scene, view: &CameraView) -> Result<RgbImage> {
    let k = &view.intrinsics;
    let (w, h) = (k.width, k.height);
    let prof = view.profile;
    let mut img = RgbImage::new(w, h);
    let mut rng = seed::rng(prof.seed, "render-noise", view.id as u64);
    let noise = Normal::new(0.0, prof.noise_sigma.max(0.0)).map_err(|e| Error::InvalidScene(e.to_string()))?;
    let r_max2 = (k.cx.max(w as f64 - k.cx)).powi(2) + (k.cy.max(h as f64 - k.cy)).powi(2);
    let mut any_hit = false;
    for y in 0..h {
        for x in 0..w {
            let u = ImagePoint::new(x as f64, y as f64);
            let (o, d) = view.ray(&u);
            let mut rgb = match scene.intersect(&o, &d) {
                Some(hit) => {
                    any_hit = true;
                    shade(scene, view, &hit, &d)
                }
                None => [0.0; 3],
            };
            if prof.mode == RenderMode::PseudoReal {
                let r2 = ((x as f64 - k.cx).powi(2) + (y as f64 - k.cy).powi(2)) / r_max2;
                let vig = 1.0 - prof.vignette_strength * r2;
                for c in 0..3 {
                    rgb[c] = rgb[c].clamp(0.0, 1.0).powf(prof.gamma[c]) * vig;
                }
            }
            let mut px = [0u8; 3];
            for c in 0..3 {
                let mut v = rgb[c] * 255.0;
                if prof.mode == RenderMode::PseudoReal && prof.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put(x, y, px);
        }
    }
    if !any_hit {
        return Err(Error::EmptyView(view.id));
    }
    Ok(img)
}
