//! End-to-end experiment: rendering, database construction, per-fold
//! training, localization and cross-validated evaluation. Every stage reads
//! and writes artifacts under the configured output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correspondence::{
    build_clusters, build_training_pairs, AugmentationParams, FeatureCluster, PairLogEntry, PairingConfig,
    PairingSpace, PointAssigner, WhiteningKind,
};
use crate::error::{Error, Result};
use crate::features::{
    self, extract, load_feature_store, save_feature_store, DetectorConfig, FeatureRecord, Origin,
};
use crate::geometry::{ImagePoint, Intrinsics, Pose, ProjectionMatrix};
use crate::image::RgbImage;
use crate::localizer::{
    matching_accuracy, ransac_pnp, score_images, ImageOutcome, LocalizationResult, MatchingAccuracy, RansacConfig,
    Report, Statistic, METHODS,
};
use crate::matcher::{filter_matches, select_classes, train_forest_oob, ForestConfig, RandomForestModel};
use crate::restnet::{init_network, train, RestNetwork, TrainConfig, TrainHistory};
use crate::scene::{
    self, generate_camera_grid, lighting_grid, CameraExtents, CameraView, LightingCondition, RenderMode,
    RenderProfile, Scene, SceneConfig,
};
use crate::seed;

/// Localization method: which transform is applied to real descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    RestNoWhitening,
    RestWhitening,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Naive, Method::RestNoWhitening, Method::RestWhitening];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => METHODS[0],
            Method::RestNoWhitening => METHODS[1],
            Method::RestWhitening => METHODS[2],
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Use the full 56-condition × 80-pose grid instead of the desk subset.
    pub full: bool,
    /// Desk-scale moving-light angles `[theta, phi]`.
    pub lighting: Vec<[f64; 2]>,
    pub top_intensity: f64,
    pub moving_intensity: f64,
    pub camera: CameraExtents,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            full: false,
            // phi 0 and 180 graze the facade and leave it lit by ambient
            // alone, so the desk subset skips them
            lighting: [20.0, 60.0]
                .iter()
                .flat_map(|&t| [30.0, 60.0, 120.0, 150.0].map(|p| [t, p]))
                .collect(),
            top_intensity: scene::DEFAULT_TOP_INTENSITY,
            moving_intensity: scene::DEFAULT_MOVING_INTENSITY,
            camera: CameraExtents::default(),
        }
    }
}

/// Perturbations of the pseudo-real rendering profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoRealProfile {
    pub specular_strength: f64,
    pub specular_exponent: f64,
    pub gamma: [f64; 3],
    pub noise_sigma: f64,
    pub vignette_strength: f64,
}

impl Default for PseudoRealProfile {
    fn default() -> Self {
        let p = RenderProfile::pseudo_real(0);
        PseudoRealProfile {
            specular_strength: p.specular_strength,
            specular_exponent: p.specular_exponent,
            gamma: p.gamma,
            noise_sigma: p.noise_sigma,
            vignette_strength: p.vignette_strength,
        }
    }
}

impl PseudoRealProfile {
    fn profile(&self, seed: u64) -> RenderProfile {
        RenderProfile {
            mode: RenderMode::PseudoReal,
            specular_strength: self.specular_strength,
            specular_exponent: self.specular_exponent,
            gamma: self.gamma,
            noise_sigma: self.noise_sigma,
            vignette_strength: self.vignette_strength,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RealSource {
    PseudoReal,
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealConfig {
    pub source: RealSource,
    pub count: usize,
    pub profile: PseudoRealProfile,
    /// Moving-light angles to draw test lighting from; the database
    /// lighting when absent.
    pub lighting: Option<Vec<[f64; 2]>>,
    /// Uniform jitter (cm) added to each coordinate of a grid position.
    pub position_jitter: f64,
    /// Uniform jitter (degrees) added to the grid yaw.
    pub yaw_jitter: f64,
}

impl Default for RealConfig {
    fn default() -> Self {
        RealConfig {
            source: RealSource::PseudoReal,
            count: 60,
            profile: PseudoRealProfile::default(),
            lighting: None,
            position_jitter: 3.0,
            yaw_jitter: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatabaseConfig {
    pub representative_budget: usize,
    pub min_db_size: usize,
    /// Edge of the cubic lattice that identifies scene points (cm).
    pub lattice: f64,
}

impl Default for DatabaseConfig {
    fn default() -> Self {
        DatabaseConfig {
            representative_budget: 24,
            min_db_size: 5,
            lattice: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingSettings {
    pub gamma: f64,
    pub k_min: usize,
    pub min_real: usize,
    pub min_syn: usize,
    pub epsilon: f64,
    pub whitening: WhiteningKind,
    /// Largest reprojection error (px) for attaching a real feature to a
    /// database point.
    pub assign_max_px: f64,
}

impl Default for PairingSettings {
    fn default() -> Self {
        let p = PairingConfig::default();
        PairingSettings {
            gamma: p.augmentation.gamma,
            k_min: p.augmentation.k_min,
            min_real: p.min_real,
            min_syn: p.min_syn,
            epsilon: p.epsilon,
            whitening: WhiteningKind::Pca,
            assign_max_px: 3.0,
        }
    }
}

impl PairingSettings {
    fn pairing(&self) -> PairingConfig {
        PairingConfig {
            augmentation: AugmentationParams {
                gamma: self.gamma,
                k_min: self.k_min,
            },
            min_real: self.min_real,
            min_syn: self.min_syn,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub descriptor: String,
    /// Include wall-clock localization time in the report. Off by default
    /// so that reruns produce identical reports; timings are always written
    /// to a separate file.
    pub include_timing: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            descriptor: "sift128".into(),
            include_timing: false,
        }
    }
}

/// Whole-experiment configuration, read from one JSON document. Component
/// seeds are derived from `seed`; the `seed` fields of the nested REST,
/// forest and RANSAC sections are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Scene description; the built-in facade when absent.
    pub scene: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub grid: GridConfig,
    pub real: RealConfig,
    pub detector: DetectorConfig,
    pub database: DatabaseConfig,
    pub pairing: PairingSettings,
    pub rest: TrainConfig,
    pub forest: ForestConfig,
    pub ransac: RansacConfig,
    pub match_cap: usize,
    pub ma_threshold_px: f64,
    pub cv_folds: usize,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            intrinsics: Intrinsics {
                fx: 800.0,
                fy: 800.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            grid: GridConfig::default(),
            real: RealConfig::default(),
            detector: DetectorConfig::default(),
            database: DatabaseConfig::default(),
            pairing: PairingSettings::default(),
            rest: TrainConfig::default(),
            forest: ForestConfig::default(),
            ransac: RansacConfig::default(),
            match_cap: 100,
            ma_threshold_px: 3.0,
            cv_folds: 5,
            report: ReportConfig::default(),
        }
    }
}

fn json_string<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable value")
}

/// A loaded configuration together with the directory its relative paths
/// resolve against.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub config_path: PathBuf,
    pub base_dir: PathBuf,
}

impl Pipeline {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_owned(),
            field: "<file>".into(),
            message: e.to_string(),
        })?;
        let config: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.to_owned(),
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Pipeline::new(config, path.to_owned(), base_dir)
    }

    pub fn new(config: PipelineConfig, config_path: PathBuf, base_dir: PathBuf) -> Result<Self> {
        let p = Pipeline {
            config,
            config_path,
            base_dir,
        };
        p.validate()?;
        Ok(p)
    }

    fn invalid(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: self.config_path.clone(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.cv_folds < 2 {
            return Err(self.invalid("cv_folds", "must be at least 2"));
        }
        if let RealSource::PseudoReal = c.real.source {
            if c.real.count < c.cv_folds {
                return Err(self.invalid("real.count", "fewer real images than folds"));
            }
        }
        c.intrinsics.validate().map_err(|e| self.invalid("intrinsics", e.to_string()))?;
        c.rest.validate().map_err(|e| self.invalid("rest", e.to_string()))?;
        c.ransac.validate().map_err(|e| self.invalid("ransac", e.to_string()))?;
        if c.match_cap == 0 {
            return Err(self.invalid("match_cap", "must be positive"));
        }
        if !(c.ma_threshold_px > 0.0) {
            return Err(self.invalid("ma_threshold_px", "must be positive"));
        }
        if c.database.representative_budget == 0 {
            return Err(self.invalid("database.representative_budget", "must be positive"));
        }
        if !(c.database.lattice > 0.0) {
            return Err(self.invalid("database.lattice", "must be positive"));
        }
        if c.forest.trees == 0 {
            return Err(self.invalid("forest.trees", "must be positive"));
        }
        if !(c.pairing.gamma >= 0.0) || c.pairing.k_min == 0 {
            return Err(self.invalid("pairing", "gamma must be non-negative and k_min positive"));
        }
        if c.grid.lighting.is_empty() && !c.grid.full {
            return Err(self.invalid("grid.lighting", "desk grid needs at least one lighting condition"));
        }
        for (field, list) in [("grid.lighting", Some(&c.grid.lighting)), ("real.lighting", c.real.lighting.as_ref())] {
            for l in list.into_iter().flatten() {
                LightingCondition::new(l[0], l[1], 0.0, 0.0).map_err(|e| self.invalid(field, e.to_string()))?;
            }
        }
        generate_camera_grid(&c.grid.camera).map_err(|e| self.invalid("grid.camera", e.to_string()))?;
        if let Some(s) = &c.scene {
            let p = self.base_dir.join(s);
            if !p.is_file() {
                return Err(self.invalid("scene", format!("{} does not exist", p.display())));
            }
        }
        if let RealSource::Manifest { path } = &c.real.source {
            let p = self.base_dir.join(path);
            if !p.is_file() {
                return Err(self.invalid("real.source.manifest.path", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical configuration.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(&self.config).expect("serialisable config"));
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.output_dir().join(rel)
    }

    fn fold_dir(&self, fold: usize) -> PathBuf {
        self.output_dir().join(format!("fold_{fold}"))
    }

    fn derived(&self, label: &str, index: u64) -> u64 {
        seed::derive(self.config.seed, label, index)
    }

    pub fn scene(&self) -> Result<Scene> {
        match &self.config.scene {
            None => Ok(Scene::default_facade()),
            Some(rel) => {
                let path = self.base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let cfg: SceneConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
                    path: path.clone(),
                    field: "<document>".into(),
                    message: e.to_string(),
                })?;
                Scene::from_config(&cfg, path.parent().unwrap_or(Path::new(".")))
            }
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_owned()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Serialisable camera metadata of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub id: usize,
    pub file: PathBuf,
    pub mode: RenderMode,
    pub lighting: LightingCondition,
    pub intrinsics: Intrinsics,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Row-major 3×4 projection matrix.
    pub projection: [f64; 12],
    pub noise_seed: u64,
}

impl ViewRecord {
    fn from_view(view: &CameraView, file: PathBuf) -> Self {
        let r = view.pose.rotation();
        let t = view.pose.translation();
        ViewRecord {
            id: view.id,
            file,
            mode: view.profile.mode,
            lighting: view.lighting,
            intrinsics: view.intrinsics,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [t.x, t.y, t.z],
            projection: view.projection.to_row_major(),
            noise_seed: view.profile.seed,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::from_approx(&Matrix3::from_row_slice(&self.rotation), Vector3::from(self.translation))
    }

    pub fn projection(&self) -> Result<ProjectionMatrix> {
        ProjectionMatrix::from_row_major(&self.projection)
    }
}

/// All views of an experiment, as written by the render stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub config_hash: String,
    pub lighting_conditions: usize,
    pub camera_poses: usize,
    pub synthetic: Vec<ViewRecord>,
    pub real: Vec<ViewRecord>,
}

struct PlannedView {
    view: CameraView,
    file: PathBuf,
}

impl Pipeline {
    fn database_lighting(&self, full: bool) -> Vec<LightingCondition> {
        let g = &self.config.grid;
        if full {
            lighting_grid(g.top_intensity, g.moving_intensity)
        } else {
            g.lighting
                .iter()
                .map(|l| LightingCondition {
                    theta: l[0],
                    phi: l[1],
                    top_intensity: g.top_intensity,
                    moving_intensity: g.moving_intensity,
                })
                .collect()
        }
    }

    /// Synthetic views are lighting-major. The desk grid keeps one view per
    /// camera position, cycling through the yaw set.
    fn synthetic_views(&self, full: bool) -> Result<(usize, usize, Vec<PlannedView>)> {
        let c = &self.config;
        let grid = generate_camera_grid(&c.grid.camera)?;
        let yaws = c.grid.camera.yaws.len();
        let poses: Vec<Pose> = if full {
            grid.iter().map(|g| g.pose).collect()
        } else {
            grid.chunks(yaws).enumerate().map(|(i, chunk)| chunk[i % yaws].pose).collect()
        };
        let lighting = self.database_lighting(full);
        let profile = RenderProfile::synthetic();
        let mut views = Vec::with_capacity(lighting.len() * poses.len());
        for l in &lighting {
            for pose in &poses {
                let id = views.len();
                views.push(PlannedView {
                    view: CameraView::new(id, c.intrinsics, *pose, *l, profile),
                    file: PathBuf::from(format!("render/synthetic/{id:05}.ppm")),
                });
            }
        }
        Ok((lighting.len(), poses.len(), views))
    }

    /// Pseudo-real test views: distinct grid poses with jitter, lighting
    /// drawn uniformly from `real.lighting`, or from the database lighting
    /// when that is unset.
    fn pseudo_real_views(&self, full: bool) -> Result<Vec<PlannedView>> {
        let c = &self.config;
        let grid = generate_camera_grid(&c.grid.camera)?;
        let lights: Vec<LightingCondition> = match &c.real.lighting {
            Some(list) => list
                .iter()
                .map(|l| LightingCondition {
                    theta: l[0],
                    phi: l[1],
                    top_intensity: c.grid.top_intensity,
                    moving_intensity: c.grid.moving_intensity,
                })
                .collect(),
            None => self.database_lighting(full),
        };
        let mut rng = seed::rng(c.seed, "real-views", 0);
        let picks: Vec<usize> = if c.real.count <= grid.len() {
            index::sample(&mut rng, grid.len(), c.real.count).into_vec()
        } else {
            (0..c.real.count).map(|_| rng.random_range(0..grid.len())).collect()
        };
        let profile = c.real.profile.profile(self.derived("render-noise", 0));
        picks
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let mut r = seed::rng(c.seed, "real-jitter", id as u64);
                let j = c.real.position_jitter;
                let mut jitter = || if j > 0.0 { r.random_range(-j..=j) } else { 0.0 };
                let center = grid[g].pose.center() + Vector3::new(jitter(), jitter(), jitter());
                let yj = c.real.yaw_jitter;
                let yaw = grid[g].yaw + if yj > 0.0 { r.random_range(-yj..=yj) } else { 0.0 };
                let light = lights[r.random_range(0..lights.len())];
                let pose = scene::camera_pose(&center, yaw)?;
                Ok(PlannedView {
                    view: CameraView::new(id, c.intrinsics, pose, light, profile),
                    file: PathBuf::from(format!("render/real/{id:03}.ppm")),
                })
            })
            .collect()
    }

    /// Metadata for every view without rendering anything.
    pub fn plan(&self, full: bool) -> Result<ViewPlan> {
        let full = full || self.config.grid.full;
        let (lighting_conditions, camera_poses, syn) = self.synthetic_views(full)?;
        let real = match &self.config.real.source {
            RealSource::PseudoReal => self
                .pseudo_real_views(full)?
                .iter()
                .map(|p| ViewRecord::from_view(&p.view, p.file.clone()))
                .collect(),
            RealSource::Manifest { path } => self.manifest_views(&self.base_dir.join(path))?,
        };
        Ok(ViewPlan {
            config_hash: self.config_hash(),
            lighting_conditions,
            camera_poses,
            synthetic: syn.iter().map(|p| ViewRecord::from_view(&p.view, p.file.clone())).collect(),
            real,
        })
    }

    fn manifest_views(&self, manifest: &Path) -> Result<Vec<ViewRecord>> {
        let images = features::load_external_dataset(manifest)?;
        images
            .into_iter()
            .enumerate()
            .map(|(id, e)| {
                let (k, pose) = crate::geometry::decompose_projection(&e.projection)?;
                let intrinsics = Intrinsics::new(
                    k[(0, 0)],
                    k[(1, 1)],
                    k[(0, 2)],
                    k[(1, 2)],
                    e.image.width(),
                    e.image.height(),
                )?;
                let r = pose.rotation();
                let t = pose.translation();
                Ok(ViewRecord {
                    id,
                    file: std::path::absolute(&e.path).map_err(|err| Error::io(&e.path, err))?,
                    mode: RenderMode::PseudoReal,
                    lighting: LightingCondition {
                        theta: f64::NAN,
                        phi: f64::NAN,
                        top_intensity: 0.0,
                        moving_intensity: 0.0,
                    },
                    intrinsics,
                    rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
                    translation: [t.x, t.y, t.z],
                    projection: e.projection.to_row_major(),
                    noise_seed: 0,
                })
            })
            .collect()
    }

    /// Renders the database and pseudo-real images and writes the view
    /// metadata. With `dry_run` only the metadata is written.
    pub fn render(&self, full: bool, dry_run: bool) -> Result<ViewPlan> {
        let plan = self.plan(full)?;
        ensure_dir(&self.output_dir())?;
        if !dry_run {
            let scene = self.scene()?;
            let full = full || self.config.grid.full;
            let (_, _, syn) = self.synthetic_views(full)?;
            let mut jobs = syn;
            if let RealSource::PseudoReal = self.config.real.source {
                jobs.extend(self.pseudo_real_views(full)?);
            }
            ensure_dir(&self.path("render/synthetic"))?;
            ensure_dir(&self.path("render/real"))?;
            crate::par::try_map(&jobs, |job| {
                let img = scene::render(&scene, &job.view)?;
                img.write_ppm(&self.output_dir().join(&job.file))
            })?;
        }
        let name = if dry_run { "views_plan.json" } else { "views.json" };
        write_text(&self.path(name), &json_string(&plan))?;
        Ok(plan)
    }

    pub fn views(&self) -> Result<ViewPlan> {
        read_json(&self.path("views.json"))
    }

    fn image_path(&self, rec: &ViewRecord) -> PathBuf {
        self.output_dir().join(&rec.file)
    }
}

/// Summary of the database stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSummary {
    pub config_hash: String,
    pub synthetic_features: usize,
    pub dropped_misses: usize,
    pub clusters: usize,
    pub classes: usize,
    pub database_features: usize,
    pub real_features: usize,
}

impl Pipeline {
    /// Extracts synthetic features, attaches ray-cast scene points, clusters
    /// and prunes them; also extracts the real-image features.
    pub fn build_db(&self) -> Result<DatabaseSummary> {
        let plan = self.views()?;
        let scene = self.scene()?;
        let det = self.config.detector;
        let per_view = crate::par::try_map(&plan.synthetic, |rec| -> Result<(Vec<FeatureRecord>, usize)> {
            let path = self.image_path(rec);
            if !path.is_file() {
                return Err(Error::MissingArtifact(path));
            }
            let gray = RgbImage::read_ppm(&path)?.to_gray();
            let view = CameraView::new(rec.id, rec.intrinsics, rec.pose()?, rec.lighting, RenderProfile::synthetic());
            let mut out = Vec::new();
            let mut misses = 0;
            for (u, d) in extract(&gray, &det) {
                match scene::raycast(&scene, &view, &u) {
                    Some(x) => out.push(FeatureRecord::new(d, u, rec.id as u32, Origin::Synthetic, Some(x))),
                    None => misses += 1,
                }
            }
            Ok((out, misses))
        })?;
        let dropped_misses = per_view.iter().map(|(_, m)| m).sum();
        let synthetic: Vec<FeatureRecord> = per_view.into_iter().flat_map(|(v, _)| v).collect();
        let dim = synthetic.first().map_or(features::DESCRIPTOR_DIM, |r| r.descriptor.dim());
        ensure_dir(&self.path("db"))?;
        save_feature_store(&self.path("db/synthetic.fstr"), dim, &synthetic)?;

        // cluster from the stored (f32) scene points so reloads agree
        let (_, stored) = load_feature_store(&self.path("db/synthetic.fstr"))?;
        let clusters = build_clusters(&stored, self.config.database.lattice);
        let pruned = features::select_representative(&clusters, self.config.database.representative_budget);
        let classes = select_classes(pruned, self.config.database.min_db_size);
        let db_records: Vec<FeatureRecord> = classes.iter().flat_map(|c| c.members.iter().cloned()).collect();
        save_feature_store(&self.path("db/database.fstr"), dim, &db_records)?;

        let real = self.extract_real(&plan)?;
        // a forest trained on an earlier database is stale now
        let stale = self.path("models/forest.frst");
        if stale.is_file() {
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        let summary = DatabaseSummary {
            config_hash: self.config_hash(),
            synthetic_features: synthetic.len(),
            dropped_misses,
            clusters: clusters.len(),
            classes: self.database()?.len(),
            database_features: db_records.len(),
            real_features: real,
        };
        write_text(&self.path("db/summary.json"), &json_string(&summary))?;
        Ok(summary)
    }

    fn extract_real(&self, plan: &ViewPlan) -> Result<usize> {
        let det = self.config.detector;
        let per_view = crate::par::try_map(&plan.real, |rec| -> Result<Vec<FeatureRecord>> {
            let path = self.image_path(rec);
            if !path.is_file() {
                return Err(Error::MissingArtifact(path));
            }
            let gray = RgbImage::read_ppm(&path)?.to_gray();
            Ok(extract(&gray, &det)
                .into_iter()
                .map(|(u, d)| FeatureRecord::new(d, u, rec.id as u32, Origin::Real, None))
                .collect())
        })?;
        let real: Vec<FeatureRecord> = per_view.into_iter().flatten().collect();
        let dim = real.first().map_or(features::DESCRIPTOR_DIM, |r| r.descriptor.dim());
        ensure_dir(&self.path("real"))?;
        save_feature_store(&self.path("real/features.fstr"), dim, &real)?;
        Ok(real.len())
    }

    /// Database classes in class-index order.
    pub fn database(&self) -> Result<Vec<FeatureCluster>> {
        let (_, records) = load_feature_store(&self.path("db/database.fstr"))?;
        Ok(build_clusters(&records, self.config.database.lattice))
    }

    /// Unpruned synthetic clusters of the database classes.
    fn synthetic_clusters(&self, classes: &[FeatureCluster]) -> Result<Vec<FeatureCluster>> {
        let keys: BTreeSet<_> = classes.iter().map(|c| c.key).collect();
        let (_, records) = load_feature_store(&self.path("db/synthetic.fstr"))?;
        Ok(build_clusters(&records, self.config.database.lattice)
            .into_iter()
            .filter(|c| keys.contains(&c.key))
            .collect())
    }

    fn real_features(&self) -> Result<BTreeMap<u32, Vec<FeatureRecord>>> {
        let (_, records) = load_feature_store(&self.path("real/features.fstr"))?;
        let mut by_image: BTreeMap<u32, Vec<FeatureRecord>> = BTreeMap::new();
        for r in records {
            by_image.entry(r.image_id).or_default().push(r);
        }
        Ok(by_image)
    }
}

/// Train/test image ids of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` dealt round-robin into `k` folds.
pub fn make_folds(n: usize, k: usize, root_seed: u64) -> Vec<FoldSplit> {
    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut seed::rng(root_seed, "folds", 0));
    (0..k)
        .map(|f| {
            let mut test: Vec<usize> = ids.iter().enumerate().filter(|(i, _)| i % k == f).map(|(_, &id)| id).collect();
            test.sort_unstable();
            let mut train: Vec<usize> = ids.iter().enumerate().filter(|(i, _)| i % k != f).map(|(_, &id)| id).collect();
            train.sort_unstable();
            FoldSplit { fold: f, train, test }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLog {
    pub space: String,
    pub total_pairs: usize,
    pub clusters: Vec<PairLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub fold: usize,
    pub train_images: usize,
    pub assigned_real_features: usize,
    pub classes: usize,
    pub forest_oob_accuracy: f64,
    pub pairs_whitened: usize,
    pub pairs_raw: usize,
    pub history_whitened: TrainHistory,
    pub history_raw: TrainHistory,
}

fn model_name(method: Method) -> Option<&'static str> {
    match method {
        Method::Naive => None,
        Method::RestNoWhitening => Some("rest_no_whitening.rest"),
        Method::RestWhitening => Some("rest_whitening.rest"),
    }
}

impl Pipeline {
    pub fn folds(&self) -> Result<Vec<FoldSplit>> {
        let n = self.views()?.real.len();
        if n < self.config.cv_folds {
            return Err(self.invalid("cv_folds", format!("only {n} real images for {} folds", self.config.cv_folds)));
        }
        Ok(make_folds(n, self.config.cv_folds, self.config.seed))
    }

    fn fold(&self, fold: usize) -> Result<FoldSplit> {
        self.folds()?
            .into_iter()
            .nth(fold)
            .ok_or_else(|| self.invalid("--fold", format!("fold {fold} out of range 0..{}", self.config.cv_folds)))
    }

    /// Trains the forest on the database. It depends only on the database,
    /// so one model is shared by every fold and method.
    pub fn train_forest(&self) -> Result<f64> {
        let classes = self.database()?;
        if classes.len() < 2 {
            return Err(Error::TooFewClasses(classes.len()));
        }
        let cfg = ForestConfig {
            seed: self.derived("forest", 0),
            ..self.config.forest.clone()
        };
        let (model, oob) = train_forest_oob(&classes, &cfg)?;
        ensure_dir(&self.path("models"))?;
        model.save(&self.path("models/forest.frst"))?;
        write_text(&self.path("models/forest.json"), &json_string(&serde_json::json!({ "oob_accuracy": oob })))?;
        Ok(oob)
    }

    fn forest(&self) -> Result<(RandomForestModel, f64)> {
        let shared = self.path("models/forest.frst");
        if !shared.is_file() {
            self.train_forest()?;
        }
        let meta: serde_json::Value = read_json(&self.path("models/forest.json"))?;
        Ok((RandomForestModel::load(&shared)?, meta["oob_accuracy"].as_f64().unwrap_or(f64::NAN)))
    }

    /// Builds training pairs for the fold, trains both REST variants and
    /// the forest, and stores them in the fold directory.
    pub fn train_fold(&self, fold: usize) -> Result<TrainSummary> {
        let split = self.fold(fold)?;
        let plan = self.views()?;
        let classes = self.database()?;
        if classes.len() < 2 {
            return Err(Error::TooFewClasses(classes.len()));
        }
        let points: Vec<_> = classes.iter().map(|c| c.scene_point).collect();
        let real = self.real_features()?;

        let mut assigned = Vec::new();
        for &id in &split.train {
            let rec = &plan.real[id];
            let assigner = PointAssigner::new(&rec.projection()?, &points);
            for f in real.get(&(id as u32)).into_iter().flatten() {
                if let Some((i, _)) = assigner.assign(&f.u, self.config.pairing.assign_max_px) {
                    assigned.push(f.clone().with_scene_point(Some(points[i])));
                }
            }
        }
        let real_clusters = build_clusters(&assigned, self.config.database.lattice);
        let syn_clusters = self.synthetic_clusters(&classes)?;
        let pairing = self.config.pairing.pairing();
        let whitened_space = PairingSpace::Whitened(self.config.pairing.whitening);
        let (pairs_w, log_w) = build_training_pairs(&real_clusters, &syn_clusters, whitened_space, &pairing)?;
        let (pairs_r, log_r) = build_training_pairs(&real_clusters, &syn_clusters, PairingSpace::Raw, &pairing)?;
        if pairs_w.is_empty() || pairs_r.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }

        let dir = self.fold_dir(fold);
        ensure_dir(&dir)?;
        for (name, space, pairs, log) in [
            ("pairs_rest_whitening.json", format!("{whitened_space:?}"), &pairs_w, log_w),
            ("pairs_rest_no_whitening.json", "Raw".to_string(), &pairs_r, log_r),
        ] {
            let entry = PairLog {
                space,
                total_pairs: pairs.len(),
                clusters: log,
            };
            write_text(&dir.join(name), &json_string(&entry))?;
        }
        log::info!("fold {fold}: {} whitened pairs, {} raw pairs", pairs_w.len(), pairs_r.len());

        let pretrain: Vec<_> = classes.iter().flat_map(|c| c.members.iter().map(|m| m.descriptor.clone())).collect();
        let d = pretrain.first().map_or(features::DESCRIPTOR_DIM, |f| f.dim());
        let rest_cfg = TrainConfig {
            seed: self.derived("rest-train", fold as u64),
            ..self.config.rest.clone()
        };
        let init = init_network(d, &rest_cfg.hidden, self.derived("rest-init", fold as u64));
        let jobs = [(&pairs_w, "rest_whitening.rest"), (&pairs_r, "rest_no_whitening.rest")];
        let mut trained = crate::par::try_map(&jobs, |(pairs, name)| -> Result<TrainHistory> {
            let (net, hist) = train(&init, &pretrain, pairs, &rest_cfg)?;
            net.save(&dir.join(name))?;
            Ok(hist)
        })?;
        let hist_r = trained.pop().expect("two jobs");
        let hist_w = trained.pop().expect("two jobs");

        let (forest, oob) = self.forest()?;
        forest.save(&dir.join("forest.frst"))?;

        let summary = TrainSummary {
            config_hash: self.config_hash(),
            fold,
            train_images: split.train.len(),
            assigned_real_features: assigned.len(),
            classes: classes.len(),
            forest_oob_accuracy: oob,
            pairs_whitened: pairs_w.len(),
            pairs_raw: pairs_r.len(),
            history_whitened: hist_w,
            history_raw: hist_r,
        };
        write_text(&dir.join("train_summary.json"), &json_string(&summary))?;
        Ok(summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: usize,
    pub matches: usize,
    pub ma: f64,
    pub ma_warn: bool,
    pub pose: Option<PoseRecord>,
    pub inliers: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeOutput {
    pub config_hash: String,
    pub fold: usize,
    pub method: Method,
    /// Number of network forward passes performed; zero for the naive path.
    pub rest_calls: usize,
    pub images: Vec<ImageResult>,
}

impl Pipeline {
    /// Matches and localizes every test image of the fold with one method.
    pub fn localize(&self, fold: usize, method: Method) -> Result<LocalizeOutput> {
        let split = self.fold(fold)?;
        let plan = self.views()?;
        let dir = self.fold_dir(fold);
        let forest = RandomForestModel::load(&dir.join("forest.frst"))?;
        let net = match model_name(method) {
            Some(name) => Some(RestNetwork::load(&dir.join(name))?),
            None => None,
        };
        let real = self.real_features()?;
        let empty = Vec::new();
        let runs = crate::par::try_map(&split.test, |&id| -> Result<(ImageResult, f64, usize)> {
            let rec = &plan.real[id];
            let feats = real.get(&(id as u32)).unwrap_or(&empty);
            let descriptors: Vec<_> = feats.iter().map(|f| f.descriptor.clone()).collect();
            let (queries, calls) = match &net {
                Some(n) if !descriptors.is_empty() => (n.transform_all(&descriptors)?, 1),
                _ => (descriptors, 0),
            };
            let with_pos: Vec<(ImagePoint, _)> = feats.iter().map(|f| f.u).zip(queries).collect();
            let start = Instant::now();
            let candidates = filter_matches(forest.match_features(&with_pos)?, self.config.match_cap);
            let pairs: Vec<_> = candidates.iter().map(|c| (c.u, c.scene_point)).collect();
            let gt = rec.pose()?;
            let ma: MatchingAccuracy = matching_accuracy(&pairs, &gt, &rec.intrinsics, self.config.ma_threshold_px);
            let ransac = RansacConfig {
                seed: self.derived("ransac", id as u64),
                ..self.config.ransac
            };
            let result = ransac_pnp(&candidates, &rec.intrinsics, &ransac);
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            let pose = result.pose.map(|p| PoseRecord {
                rotation: std::array::from_fn(|i| p.rotation()[(i / 3, i % 3)]),
                translation: [p.translation().x, p.translation().y, p.translation().z],
            });
            Ok((
                ImageResult {
                    image_id: id,
                    matches: candidates.len(),
                    ma: ma.value,
                    ma_warn: ma.warn,
                    pose,
                    inliers: result.inliers,
                    iterations: result.iterations,
                },
                elapsed,
                calls,
            ))
        })?;
        let output = LocalizeOutput {
            config_hash: self.config_hash(),
            fold,
            method,
            rest_calls: runs.iter().map(|r| r.2).sum(),
            images: runs.iter().map(|r| r.0.clone()).collect(),
        };
        let timing: BTreeMap<usize, f64> = runs.iter().map(|r| (r.0.image_id, r.1)).collect();
        write_text(&dir.join(format!("localize_{}.json", method.name())), &json_string(&output))?;
        write_text(&dir.join(format!("timing_{}.json", method.name())), &json_string(&timing))?;
        Ok(output)
    }
}

/// Evaluation result with the rendered report files' contents.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: Report,
    pub json: String,
    pub csv: String,
    pub summary: String,
}

impl Evaluation {
    pub fn median_ma(&self, method: Method) -> f64 {
        self.report.row(method.name(), Statistic::Median).map_or(f64::NAN, |r| r.ma_percent)
    }
}

impl Pipeline {
    /// Pools every fold's localization results into the report files.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let folds = self.folds()?;
        let plan = self.views()?;
        let mut missing = Vec::new();
        let mut outputs: BTreeMap<(Method, usize), LocalizeOutput> = BTreeMap::new();
        for method in Method::ALL {
            for f in &folds {
                let path = self.fold_dir(f.fold).join(format!("localize_{}.json", method.name()));
                if path.is_file() {
                    outputs.insert((method, f.fold), read_json(&path)?);
                } else {
                    missing.push(format!("fold {} / {}", f.fold, method.name()));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::IncompleteFolds(missing));
        }
        let with_time = self.config.report.include_timing;
        let mut methods = Vec::new();
        for method in Method::ALL {
            let mut outcomes = Vec::new();
            let mut gts = Vec::new();
            for f in &folds {
                let out = &outputs[&(method, f.fold)];
                let timing: BTreeMap<usize, f64> = if with_time {
                    read_json(&self.fold_dir(f.fold).join(format!("timing_{}.json", method.name())))?
                } else {
                    BTreeMap::new()
                };
                for img in &out.images {
                    let pose = match &img.pose {
                        Some(p) => Some(Pose::from_approx(&Matrix3::from_row_slice(&p.rotation), Vector3::from(p.translation))?),
                        None => None,
                    };
                    outcomes.push(ImageOutcome {
                        image_id: img.image_id as u32,
                        fold: f.fold,
                        accuracy: MatchingAccuracy {
                            value: img.ma,
                            warn: img.ma_warn,
                        },
                        result: LocalizationResult {
                            pose,
                            inliers: img.inliers,
                            iterations: img.iterations,
                            time_ms: timing.get(&img.image_id).copied().unwrap_or(0.0),
                        },
                    });
                    gts.push(plan.real[img.image_id].pose()?);
                }
            }
            methods.push((method.name().to_string(), score_images(&outcomes, &gts)?));
        }
        let report = Report {
            descriptor: self.config.report.descriptor.clone(),
            with_time,
            methods,
        };
        let mut json = report.to_json();
        json["config_hash"] = serde_json::json!(self.config_hash());
        let naive = report.row(Method::Naive.name(), Statistic::Median).map_or(f64::NAN, |r| r.ma_percent);
        let rest = report.row(Method::RestWhitening.name(), Statistic::Median).map_or(f64::NAN, |r| r.ma_percent);
        json["median_ma_improvement_pp"] = serde_json::json!(rest - naive);
        let json = json_string(&json);
        let csv = report.to_csv();
        let summary = summary_text(&report);
        ensure_dir(&self.path("report"))?;
        write_text(&self.path("report/report.json"), &json)?;
        write_text(&self.path("report/report.csv"), &csv)?;
        write_text(&self.path("report/summary.txt"), &summary)?;
        Ok(Evaluation {
            report,
            json,
            csv,
            summary,
        })
    }

    /// The plain-text summary of the last evaluation.
    pub fn report_text(&self) -> Result<String> {
        let path = self.path("report/summary.txt");
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    /// All stages in order.
    pub fn run_all(&self) -> Result<Evaluation> {
        self.render(false, false)?;
        self.build_db()?;
        let folds = self.folds()?;
        self.train_forest()?;
        crate::par::try_map(&folds, |f| self.train_fold(f.fold))?;
        for f in &folds {
            for m in Method::ALL {
                self.localize(f.fold, m)?;
            }
        }
        self.evaluate()
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

fn summary_text(report: &Report) -> String {
    let mut s = format!(
        "{:<18} {:<7} {:>8} {:>10} {:>10} {:>9}\n",
        "method", "stat", "MA %", "PE cm", "OE deg", "failures"
    );
    for r in report.pooled() {
        let stat = match r.statistic {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
        };
        s.push_str(&format!(
            "{:<18} {:<7} {:>8} {:>10} {:>10} {:>9}\n",
            r.method,
            stat,
            fmt_value(r.ma_percent),
            fmt_value(r.pe_cm),
            fmt_value(r.oe_deg),
            r.failures
        ));
    }
    let median = |m: Method| report.row(m.name(), Statistic::Median).map_or(f64::NAN, |r| r.ma_percent);
    s.push_str(&format!(
        "median MA improvement (rest_whitening - naive): {:+.2} percentage points\n",
        median(Method::RestWhitening) - median(Method::Naive)
    ));
    s
}
