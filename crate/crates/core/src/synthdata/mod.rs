//! Paired synthetic scenes: a pinhole image and a LiDAR sweep of the same
//! handful of coloured primitives, with point-pixel correspondences, rays,
//! class labels and occupancy queries.

mod camera;
mod geometry;
mod io;
mod occupancy;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::seed::{derive_seed, rng_for};

pub use camera::{project_points, Calibration, Projected, Projection};
pub use geometry::{normalize, raycast, raycast_indexed, Primitive, Shape, Vec3, UNIT_TOLERANCE};
pub use io::{load_dataset, read_dataset, serialize_dataset, write_dataset, Dataset, SCHEMA_VERSION};
pub use occupancy::{query_label, sample_occupancy_queries, OccupancyQuery};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no primitive visible after {attempts} layouts (seed {seed})")]
    EmptyScene { seed: u64, attempts: usize },
    #[error("ray direction must be unit length, got norm {0}")]
    NonUnitDirection(f64),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed dataset at byte {offset} (line {line}, column {column}): {message}")]
    Parse { offset: usize, line: usize, column: usize, message: String },
    #[error("malformed scene record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("dataset schema version {found:?}, this reader understands {expected:?}")]
    Version { found: String, expected: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cuboid,
}

/// One entry of the class palette. Spheres use `size` as the radius range;
/// boxes use `size` for the footprint side and `height` for the vertical extent
/// (`None` makes a cube).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: Vec3,
    pub size: [f64; 2],
    #[serde(default)]
    pub height: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// `(H, W)`.
    pub image_size: [usize; 2],
    pub focal: f64,
    pub camera_height: f64,
    pub n_rays: usize,
    /// Ray draws allowed per requested hit.
    pub ray_attempts_per_hit: usize,
    /// Inclusive range.
    pub primitives: [usize; 2],
    /// Distance of object centres along the viewing axis.
    pub depth_range: [f64; 2],
    pub classes: Vec<ClassSpec>,
    /// Per-channel uniform jitter applied to each object's base colour.
    pub color_jitter: f64,
    pub max_layout_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let class = |name: &str, shape, color, size, height| ClassSpec { name: name.into(), shape, color, size, height };
        Self {
            image_size: [32, 32],
            focal: 28.0,
            camera_height: 1.5,
            n_rays: 512,
            ray_attempts_per_hit: 20,
            primitives: [3, 8],
            depth_range: [4.0, 11.0],
            classes: vec![
                class("small-sphere", ShapeKind::Sphere, [0.85, 0.22, 0.2], [0.4, 0.7], None),
                class("large-sphere", ShapeKind::Sphere, [0.25, 0.75, 0.3], [1.0, 1.4], None),
                class("cube", ShapeKind::Cuboid, [0.2, 0.35, 0.85], [0.8, 1.4], None),
                class("pillar", ShapeKind::Cuboid, [0.9, 0.8, 0.2], [0.5, 0.8], Some([1.8, 2.6])),
            ],
            color_jitter: 0.08,
            max_layout_retries: 8,
        }
    }
}

impl SceneConfig {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.focal > 0.0) {
            return bad(format!("focal {} must be positive", self.focal));
        }
        if self.primitives[0] > self.primitives[1] {
            return bad(format!("primitive range {:?} is empty", self.primitives));
        }
        if self.classes.is_empty() {
            return bad("class palette is empty".into());
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[0] <= self.depth_range[1]) {
            return bad(format!("depth range {:?}", self.depth_range));
        }
        if self.n_rays == 0 {
            return bad("n_rays must be positive".into());
        }
        for c in &self.classes {
            let ranges = std::iter::once(c.size).chain(c.height);
            for r in ranges {
                if !(r[0] > 0.0 && r[0] <= r[1]) {
                    return bad(format!("class {} has size range {:?}", c.name, r));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point_index: usize,
    pub pixel_row: usize,
    pub pixel_col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub hit_distance: f64,
}

impl Ray {
    pub fn at(&self, d: f64) -> Vec3 {
        [0, 1, 2].map(|k| self.origin[k] + d * self.direction[k])
    }
}

/// One paired observation.
///
/// `image` is `(H·W)×3`, pixels in row-major order. `rays[i]` produced
/// `points` row `i` and `labels[i]` is its class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub points: Matrix,
    pub image: Matrix,
    pub calib: Calibration,
    pub correspondences: Vec<Correspondence>,
    pub rays: Vec<Ray>,
    pub labels: Vec<usize>,
    pub scene_seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSample {
    pub fn n_points(&self) -> usize {
        self.points.rows()
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.calib.image_size
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Contract(m));
        self.calib.validate()?;
        let n = self.points.rows();
        let [h, w] = self.calib.image_size;
        if self.points.cols() != 3 || self.labels.len() != n || self.rays.len() != n {
            return bad(format!("{} points, {} labels, {} rays", n, self.labels.len(), self.rays.len()));
        }
        if self.image.shape() != (h * w, 3) {
            return bad(format!("image shape {:?} for size {h}x{w}", self.image.shape()));
        }
        for c in &self.correspondences {
            if c.point_index >= n || c.pixel_row >= h || c.pixel_col >= w {
                return bad(format!("correspondence {c:?} out of range"));
            }
            let p = self.points.row(c.point_index);
            if self.calib.world_to_camera([p[0], p[1], p[2]])[2] <= 0.0 {
                return bad(format!("corresponded point {} is behind the camera", c.point_index));
            }
        }
        for (i, r) in self.rays.iter().enumerate() {
            geometry::check_unit(r.direction)?;
            let p = self.points.row(i);
            let q = r.at(r.hit_distance);
            let err = (0..3).map(|k| (p[k] - q[k]).abs()).fold(0.0, f64::max);
            if !(r.hit_distance > 0.0) || err > 1e-6 {
                return bad(format!("ray {i} does not reproduce its point"));
            }
        }
        Ok(())
    }
}

/// Generates one scene; retries with perturbed layouts when nothing is visible.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneSample, SynthError> {
    config.validate()?;
    let attempts = config.max_layout_retries + 1;
    for attempt in 0..attempts {
        let mut rng = rng_for(seed, "scene-layout", attempt as u64);
        if let Some(sample) = try_generate(config, seed, &mut rng) {
            return Ok(sample);
        }
        log::debug!("scene {seed}: layout {attempt} has no visible primitive, retrying");
    }
    Err(SynthError::EmptyScene { seed, attempts })
}

/// `n` scenes with seeds fanned out from `root_seed`.
pub fn generate_dataset(config: &SceneConfig, n: usize, root_seed: u64) -> Result<Vec<SceneSample>, SynthError> {
    (0..n).map(|i| generate_scene(config, derive_seed(root_seed, "scene", i as u64))).collect()
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn place_primitives<R: Rng>(config: &SceneConfig, calib: &Calibration, rng: &mut R) -> Vec<Primitive> {
    let count = rng.random_range(config.primitives[0]..=config.primitives[1]);
    let center = calib.center();
    let forward = calib.rotation[2];
    let right = calib.rotation[0];
    // Keep objects comfortably inside the horizontal field of view.
    let half_fov = 0.8 * (config.image_size[1] as f64 / 2.0) / config.focal;
    let mut placed: Vec<Primitive> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..50 {
            let class_id = rng.random_range(0..config.classes.len());
            let spec = &config.classes[class_id];
            let depth = uniform(rng, config.depth_range);
            let lateral = rng.random_range(-half_fov..half_fov) * depth;
            let base = [
                center[0] + depth * forward[0] + lateral * right[0],
                center[2] + depth * forward[2] + lateral * right[2],
            ];
            let shape = match spec.shape {
                ShapeKind::Sphere => {
                    let r = uniform(rng, spec.size);
                    Shape::Sphere { center: [base[0], r, base[1]], radius: r }
                }
                ShapeKind::Cuboid => {
                    let side = uniform(rng, spec.size);
                    let height = spec.height.map_or(side, |h| uniform(rng, h));
                    let half = side / 2.0;
                    Shape::Cuboid { min: [base[0] - half, 0.0, base[1] - half], max: [base[0] + half, height, base[1] + half] }
                }
            };
            let (c, r) = shape.footprint();
            let overlaps = placed.iter().any(|p| {
                let (c2, r2) = p.shape.footprint();
                ((c[0] - c2[0]).powi(2) + (c[1] - c2[1]).powi(2)).sqrt() < r + r2 + 0.1
            });
            if overlaps {
                continue;
            }
            let j = config.color_jitter;
            let color = spec.color.map(|v| (v + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 }).clamp(0.0, 1.0));
            placed.push(Primitive { shape, class_id, color });
            break;
        }
    }
    placed
}

const LIGHT: Vec3 = [0.3714, 0.7428, -0.5571];

fn shade(calib: &Calibration, primitives: &[Primitive], row: f64, col: f64) -> Vec3 {
    let dir = calib.pixel_ray(row, col);
    let origin = calib.center();
    match raycast_indexed(origin, dir, primitives).expect("pixel rays are unit length") {
        Some((t, i)) => {
            let p = [0, 1, 2].map(|k| origin[k] + t * dir[k]);
            let n = primitives[i].shape.normal_at(p);
            let lambert = geometry::dot3(n, LIGHT).max(0.0);
            primitives[i].color.map(|c| (c * (0.35 + 0.65 * lambert)).clamp(0.0, 1.0))
        }
        None if dir[1] < 0.0 => [0.45, 0.42, 0.38],
        None => {
            let s = dir[1].min(1.0);
            [0.75 - 0.2 * s, 0.82 - 0.1 * s, 0.92]
        }
    }
}

fn try_generate<R: Rng>(config: &SceneConfig, seed: u64, rng: &mut R) -> Option<SceneSample> {
    let [h, w] = config.image_size;
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let cam_xz = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    let calib = Calibration::looking_horizontally(config.focal, config.image_size, [cam_xz[0], config.camera_height, cam_xz[1]], yaw);
    let primitives = place_primitives(config, &calib, rng);

    let mut image = Matrix::zeros(h * w, 3);
    for r in 0..h {
        for c in 0..w {
            let rgb = shade(&calib, &primitives, r as f64, c as f64);
            image.row_mut(r * w + c).copy_from_slice(&rgb);
        }
    }

    // LiDAR rays leave from the camera centre through a slightly wider window
    // than the image, so a few points fall outside it.
    let origin = calib.center();
    let margin = 2.0;
    let mut rays = Vec::with_capacity(config.n_rays);
    let mut labels = Vec::with_capacity(config.n_rays);
    let mut coords = Vec::with_capacity(3 * config.n_rays);
    if !primitives.is_empty() {
        for _ in 0..config.n_rays * config.ray_attempts_per_hit {
            if rays.len() == config.n_rays {
                break;
            }
            let row = rng.random_range(-0.5 - margin..h as f64 - 0.5 + margin);
            let col = rng.random_range(-0.5 - margin..w as f64 - 0.5 + margin);
            let direction = calib.pixel_ray(row, col);
            if let Some((t, i)) = raycast_indexed(origin, direction, &primitives).expect("unit ray") {
                let ray = Ray { origin, direction, hit_distance: t };
                coords.extend_from_slice(&ray.at(t));
                rays.push(ray);
                labels.push(primitives[i].class_id);
            }
        }
    }
    let n = rays.len();
    let points = Matrix::from_vec(n, 3, coords).expect("three coordinates per hit");
    let correspondences: Vec<Correspondence> = project_points(&points, &calib)
        .visible
        .iter()
        .map(|p| {
            let (pixel_row, pixel_col) = p.pixel();
            Correspondence { point_index: p.index, pixel_row, pixel_col }
        })
        .collect();
    if n == 0 || correspondences.is_empty() {
        return None;
    }
    Some(SceneSample { points, image, calib, correspondences, rays, labels, scene_seed: seed, primitives })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_satisfies_invariants() {
        let s = generate_scene(&SceneConfig::default(), 7).unwrap();
        s.validate().unwrap();
        assert!(s.n_points() > 100, "only {} hits", s.n_points());
        assert!(s.correspondences.len() > 50);
        assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 7).unwrap(), generate_scene(&cfg, 7).unwrap());
        assert_ne!(generate_scene(&cfg, 7).unwrap(), generate_scene(&cfg, 8).unwrap());
    }

    #[test]
    fn zero_primitives_is_an_error() {
        let cfg = SceneConfig { primitives: [0, 0], max_layout_retries: 3, ..SceneConfig::default() };
        match generate_scene(&cfg, 1) {
            Err(SynthError::EmptyScene { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("expected empty scene, got {other:?}"),
        }
    }

    #[test]
    fn correspondences_reproject() {
        let s = generate_scene(&SceneConfig::default(), 11).unwrap();
        let proj = project_points(&s.points, &s.calib);
        for c in &s.correspondences {
            let p = proj.visible.iter().find(|p| p.index == c.point_index).unwrap();
            assert!((p.row - c.pixel_row as f64).abs() <= 0.5);
            assert!((p.col - c.pixel_col as f64).abs() <= 0.5);
        }
    }

    #[test]
    fn points_lie_on_labelled_primitive() {
        let s = generate_scene(&SceneConfig::default(), 3).unwrap();
        for (i, ray) in s.rays.iter().enumerate() {
            let (t, j) = raycast_indexed(ray.origin, ray.direction, &s.primitives).unwrap().unwrap();
            assert_eq!(t, ray.hit_distance);
            assert_eq!(s.primitives[j].class_id, s.labels[i]);
        }
    }
}
