//! Seeded synthetic scenes standing in for a driving dataset.
//!
//! A scene is a short ego trajectory, a ring of cameras, labelled objects,
//! unlabelled background walls, one lidar sweep and one radar sweep of the
//! current frame, and random backbone feature maps for every frame. Lidar
//! reaches less far than radar, so distant structure is seen by radar alone.
//!
//! On disk a bundle is a directory holding `scene.json`, `lidar.pc4d`,
//! `radar.pc4d`, `features_f{k}.tnsr` and `gt.json`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::fusion::DetectionBox;
use crate::geometry::{CameraRig, EgoPose, Vec3};
use crate::io;
use crate::metrics::{attribute_names, DetectionFile, EvalBox, CLASS_NAMES};
use crate::nnprims::Tensor;

/// Nominal `(w, l, h)` per class, in the order of [`CLASS_NAMES`].
pub const CLASS_SIZES: [Vec3; 10] = [
    [1.9, 4.6, 1.7],
    [2.5, 7.0, 3.0],
    [2.9, 11.0, 3.5],
    [2.9, 12.0, 3.9],
    [2.8, 6.5, 3.2],
    [0.7, 0.7, 1.8],
    [0.8, 2.1, 1.5],
    [0.6, 1.7, 1.3],
    [0.4, 0.4, 1.0],
    [2.5, 0.5, 1.0],
];

const TYPICAL_SPEED: [f64; 10] = [8.0, 6.0, 6.0, 4.0, 1.0, 1.2, 6.0, 4.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Number of frames; the last one is the current frame.
    pub frames: usize,
    pub frame_interval: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub cameras: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub feature_stride: usize,
    pub feature_channels: usize,
    pub objects: usize,
    /// Planar distance band for object centers.
    pub object_range: (f64, f64),
    pub walls: usize,
    pub wall_range: (f64, f64),
    /// Expected lidar returns per sweep.
    pub lidar_density: f64,
    pub lidar_range: f64,
    /// Share of lidar returns on the ground.
    pub lidar_ground_share: f64,
    /// Expected radar returns per sweep.
    pub radar_density: f64,
    pub radar_range: f64,
    /// Share of radar returns that are ground clutter.
    pub radar_clutter_share: f64,
    /// Standard deviation of radial radar range noise, meters.
    pub radar_range_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            frames: 2,
            frame_interval: 0.5,
            ego_speed: 8.0,
            ego_yaw_rate: 0.05,
            cameras: 6,
            image_size: (128, 352),
            hfov_deg: 70.0,
            camera_height: 1.5,
            feature_stride: 16,
            feature_channels: 64,
            objects: 16,
            object_range: (4.0, 50.0),
            walls: 6,
            wall_range: (25.0, 56.0),
            lidar_density: 20_000.0,
            lidar_range: 30.0,
            lidar_ground_share: 0.6,
            radar_density: 1_500.0,
            radar_range: 60.0,
            radar_clutter_share: 0.2,
            radar_range_noise: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("scene needs at least one frame".into());
        }
        if self.cameras == 0 || self.cameras > 6 {
            return bad(format!("scene takes 1 to 6 cameras, got {}", self.cameras));
        }
        let (h, w) = self.image_size;
        if self.feature_stride == 0 || h % self.feature_stride != 0 || w % self.feature_stride != 0 || h == 0 || w == 0 {
            return bad(format!("image {h}x{w} is not a positive multiple of stride {}", self.feature_stride));
        }
        if self.feature_channels == 0 {
            return bad("feature_channels must be positive".into());
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad(format!("hfov_deg {} outside (0, 180)", self.hfov_deg));
        }
        for (name, (lo, hi)) in [("object_range", self.object_range), ("wall_range", self.wall_range)] {
            if !(lo >= 0.0 && hi > lo) {
                return bad(format!("{name} must satisfy 0 <= lo < hi"));
            }
        }
        for (name, v) in [
            ("lidar_density", self.lidar_density),
            ("radar_density", self.radar_density),
            ("radar_range_noise", self.radar_range_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        for (name, v) in [("lidar_range", self.lidar_range), ("radar_range", self.radar_range)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lidar_ground_share", self.lidar_ground_share),
            ("radar_clutter_share", self.radar_clutter_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_size.0 / self.feature_stride, self.image_size.1 / self.feature_stride)
    }

    pub fn token(&self) -> String {
        format!("scene-{:016x}", self.seed)
    }
}

/// A vertical rectangle facing the ego origin. Walls reflect sensors but are
/// not labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub center: [f64; 2],
    /// Direction along the wall face.
    pub heading: f64,
    pub length: f64,
    pub height: f64,
}

/// Everything except the point clouds and feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub spec: SceneSpec,
    pub token: String,
    /// One pose per frame; the last is the current frame.
    pub poses: Vec<EgoPose>,
    pub cameras: Vec<CameraRig>,
    /// `[cameras, C_F, H, W]`.
    pub feature_shape: [usize; 4],
    /// Labelled objects in the current ego frame.
    pub objects: Vec<DetectionBox>,
    pub walls: Vec<Wall>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub lidar: Vec<[f64; 4]>,
    pub radar: Vec<[f64; 4]>,
    /// One `[cameras, C_F, H, W]` tensor per frame.
    pub features: Vec<Tensor>,
    pub gt: DetectionFile,
}

impl Scene {
    pub fn current_pose(&self) -> &EgoPose {
        self.manifest.poses.last().expect("validated scenes have a frame")
    }

    /// The `C_F×H×W` map of camera `cam` in frame `frame`.
    pub fn camera_features(&self, frame: usize, cam: usize) -> Result<Tensor> {
        let [_, c, h, w] = self.manifest.feature_shape;
        let block = c * h * w;
        let data = self.features[frame].data()[cam * block..(cam + 1) * block].to_vec();
        Tensor::from_vec(&[c, h, w], data)
    }
}

fn random_object(rng: &mut ChaCha8Rng, spec: &SceneSpec, placed: &[DetectionBox]) -> DetectionBox {
    let class_id = rng.random_range(0..CLASS_NAMES.len());
    let mut center = [0.0; 3];
    // Keep centers a few meters apart; give up on spacing after a few tries.
    for _ in 0..20 {
        let r = rng.random_range(spec.object_range.0..spec.object_range.1);
        let a = rng.random_range(-PI..PI);
        center = [r * a.cos(), r * a.sin(), 0.0];
        if placed.iter().all(|b| (b.center[0] - center[0]).hypot(b.center[1] - center[1]) > 4.0) {
            break;
        }
    }
    let base = CLASS_SIZES[class_id];
    let size = base.map(|s| s * rng.random_range(0.9..1.1));
    center[2] = size[2] / 2.0;
    let yaw = rng.random_range(-PI..PI);
    let moving = TYPICAL_SPEED[class_id] > 0.0 && rng.random_bool(0.6);
    let speed = if moving { TYPICAL_SPEED[class_id] * rng.random_range(0.5..1.5) } else { 0.0 };
    let attrs = attribute_names(class_id);
    let attribute_id = match attrs.len() {
        0 => 0,
        _ if moving => 0,
        n => rng.random_range(1..n),
    };
    DetectionBox {
        center,
        size,
        yaw,
        velocity: [speed * yaw.cos(), speed * yaw.sin()],
        class_id,
        score: 1.0,
        attribute_id,
    }
}

fn random_wall(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Wall {
    let r = rng.random_range(spec.wall_range.0..spec.wall_range.1);
    let a = rng.random_range(-PI..PI);
    Wall {
        center: [r * a.cos(), r * a.sin()],
        heading: a + PI / 2.0 + rng.random_range(-0.3..0.3),
        length: rng.random_range(6.0..16.0),
        height: rng.random_range(3.0..8.0),
    }
}

/// Uniform sample on the four sides and top of a yawed box.
fn sample_box_surface(b: &DetectionBox, rng: &mut ChaCha8Rng) -> Vec3 {
    let [w, l, h] = b.size;
    let areas = [l * h, l * h, w * h, w * h, w * l];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let (u, v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let local = match face {
        0 => [u * l, 0.5 * w, v * h],
        1 => [u * l, -0.5 * w, v * h],
        2 => [0.5 * l, u * w, v * h],
        3 => [-0.5 * l, u * w, v * h],
        _ => [u * l, v * w, 0.5 * h],
    };
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] + c * local[0] - s * local[1],
        b.center[1] + s * local[0] + c * local[1],
        b.center[2] + local[2],
    ]
}

fn sample_wall(wall: &Wall, rng: &mut ChaCha8Rng) -> Vec3 {
    let t = rng.random_range(-0.5..0.5) * wall.length;
    let (s, c) = wall.heading.sin_cos();
    [wall.center[0] + t * c, wall.center[1] + t * s, rng.random_range(0.0..wall.height)]
}

enum Surface<'a> {
    Object(&'a DetectionBox),
    Wall(&'a Wall),
}

struct Sensor {
    density: f64,
    range: f64,
    ground_share: f64,
    intensity: (f64, f64),
    range_noise: f64,
}

/// Draws a Poisson number of returns, splits them between ground and the
/// reflecting surfaces within range, and drops anything beyond range.
fn sweep(sensor: &Sensor, surfaces: &[(Surface<'_>, f64)], rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    let n = if sensor.density > 0.0 {
        Poisson::new(sensor.density).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    let total_area: f64 = surfaces.iter().map(|(_, a)| a).sum();
    let noise = Normal::new(0.0, sensor.range_noise.max(1e-12)).expect("finite sigma");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let on_ground = total_area == 0.0 || rng.random_bool(sensor.ground_share);
        let mut p = if on_ground {
            let r = sensor.range * rng.random::<f64>().sqrt();
            let a = rng.random_range(-PI..PI);
            [r * a.cos(), r * a.sin(), 0.0]
        } else {
            let mut pick = rng.random_range(0.0..total_area);
            let mut chosen = &surfaces[surfaces.len() - 1].0;
            for (s, a) in surfaces {
                if pick < *a {
                    chosen = s;
                    break;
                }
                pick -= a;
            }
            match chosen {
                Surface::Object(b) => sample_box_surface(b, rng),
                Surface::Wall(w) => sample_wall(w, rng),
            }
        };
        if sensor.range_noise > 0.0 {
            let r = p[0].hypot(p[1]);
            if r > 0.0 {
                let k = (r + noise.sample(rng)).max(0.0) / r;
                p[0] *= k;
                p[1] *= k;
            }
        }
        if p[0].hypot(p[1]) > sensor.range {
            continue;
        }
        let intensity = rng.random_range(sensor.intensity.0..sensor.intensity.1);
        out.push([p[0], p[1], p[2], intensity]);
    }
    out
}

fn reflecting_surfaces<'a>(objects: &'a [DetectionBox], walls: &'a [Wall], range: f64) -> Vec<(Surface<'a>, f64)> {
    let mut out: Vec<(Surface<'a>, f64)> = Vec::new();
    for b in objects {
        if b.center[0].hypot(b.center[1]) <= range {
            let [w, l, h] = b.size;
            out.push((Surface::Object(b), 2.0 * (l + w) * h + w * l));
        }
    }
    for wall in walls {
        if wall.center[0].hypot(wall.center[1]) <= range {
            out.push((Surface::Wall(wall), wall.length * wall.height));
        }
    }
    out
}

pub fn camera_ring(spec: &SceneSpec) -> Result<Vec<CameraRig>> {
    (0..spec.cameras)
        .map(|i| {
            let yaw = 2.0 * PI * i as f64 / spec.cameras as f64;
            CameraRig::looking_along(yaw, [0.0, 0.0, spec.camera_height], spec.hfov_deg.to_radians(), spec.image_size)
        })
        .collect()
}

/// Builds a scene. Identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let current_t = (spec.frames - 1) as f64 * spec.frame_interval;
    let poses = (0..spec.frames)
        .map(|k| {
            let t = k as f64 * spec.frame_interval;
            let yaw = spec.ego_yaw_rate * t;
            let dist = spec.ego_speed * t;
            EgoPose::planar(dist * (0.5 * yaw).cos(), dist * (0.5 * yaw).sin(), yaw, t - current_t)
        })
        .collect::<Vec<_>>();
    let cameras = camera_ring(spec)?;

    let mut objects = Vec::with_capacity(spec.objects);
    for _ in 0..spec.objects {
        let b = random_object(&mut rng, spec, &objects);
        objects.push(b);
    }
    let walls: Vec<Wall> = (0..spec.walls).map(|_| random_wall(&mut rng, spec)).collect();

    let lidar = Sensor {
        density: spec.lidar_density,
        range: spec.lidar_range,
        ground_share: spec.lidar_ground_share,
        intensity: (0.0, 1.0),
        range_noise: 0.0,
    };
    let radar = Sensor {
        density: spec.radar_density,
        range: spec.radar_range,
        ground_share: spec.radar_clutter_share,
        intensity: (0.5, 10.0),
        range_noise: spec.radar_range_noise,
    };
    let lidar_points = sweep(&lidar, &reflecting_surfaces(&objects, &walls, spec.lidar_range), &mut rng);
    let radar_points = sweep(&radar, &reflecting_surfaces(&objects, &walls, spec.radar_range), &mut rng);

    let (fh, fw) = spec.feature_size();
    let feature_shape = [spec.cameras, spec.feature_channels, fh, fw];
    let features = (0..spec.frames)
        .map(|_| Tensor::from_fn(&feature_shape, |_| rng.random_range(-1.0..1.0)))
        .collect();

    let token = spec.token();
    let mut gt = DetectionFile::default();
    let boxes = objects
        .iter()
        .map(|b| EvalBox::from_detection(b, false))
        .collect::<Result<Vec<_>>>()?;
    gt.results.insert(token.clone(), boxes);

    Ok(Scene {
        manifest: SceneManifest {
            spec: spec.clone(),
            token,
            poses,
            cameras,
            feature_shape,
            objects,
            walls,
        },
        lidar: lidar_points,
        radar: radar_points,
        features,
        gt,
    })
}

pub const MANIFEST_FILE: &str = "scene.json";
pub const LIDAR_FILE: &str = "lidar.pc4d";
pub const RADAR_FILE: &str = "radar.pc4d";
pub const GT_FILE: &str = "gt.json";

pub fn features_file(frame: usize) -> String {
    format!("features_f{frame}.tnsr")
}

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&dir.join(MANIFEST_FILE), &scene.manifest)?;
    io::write_pc4d(&dir.join(LIDAR_FILE), &scene.lidar)?;
    io::write_pc4d(&dir.join(RADAR_FILE), &scene.radar)?;
    for (k, f) in scene.features.iter().enumerate() {
        io::write_tensor(&dir.join(features_file(k)), f)?;
    }
    io::write_json(&dir.join(GT_FILE), &scene.gt)
}

/// Loads a bundle and checks that its parts agree with the manifest. Errors
/// are tagged with the `load-scene` stage.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    read_bundle(dir).stage("load-scene")
}

fn read_bundle(dir: &Path) -> Result<Scene> {
    let manifest: SceneManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    manifest.spec.validate()?;
    if manifest.poses.len() != manifest.spec.frames || manifest.poses.is_empty() {
        return Err(Error::format(
            dir.join(MANIFEST_FILE),
            format!("{} poses for {} frames", manifest.poses.len(), manifest.spec.frames),
        ));
    }
    if manifest.cameras.is_empty() || manifest.cameras.len() != manifest.feature_shape[0] {
        return Err(Error::format(
            dir.join(MANIFEST_FILE),
            format!("{} cameras but feature shape {:?}", manifest.cameras.len(), manifest.feature_shape),
        ));
    }
    let lidar = io::read_points(&dir.join(LIDAR_FILE))?;
    let radar = io::read_points(&dir.join(RADAR_FILE))?;
    let mut features = Vec::with_capacity(manifest.poses.len());
    for k in 0..manifest.poses.len() {
        let path = dir.join(features_file(k));
        let t = io::read_tensor(&path)?;
        if t.shape() != manifest.feature_shape {
            return Err(Error::format(
                path,
                format!("shape {:?}, manifest says {:?}", t.shape(), manifest.feature_shape),
            ));
        }
        features.push(t);
    }
    let gt = io::read_json(&dir.join(GT_FILE))?;
    Ok(Scene {
        manifest,
        lidar,
        radar,
        features,
        gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            seed: 3,
            lidar_density: 3000.0,
            radar_density: 400.0,
            feature_channels: 4,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.lidar, c.lidar);
    }

    #[test]
    fn sensors_respect_their_ranges() {
        let s = generate_scene(&small()).unwrap();
        assert!(s.lidar.iter().all(|p| p[0].hypot(p[1]) <= 30.0));
        assert!(s.radar.iter().all(|p| p[0].hypot(p[1]) <= 60.0));
        assert!(s.radar.iter().any(|p| p[0].hypot(p[1]) > 30.0));
    }

    #[test]
    fn empty_scene_is_ground_only() {
        let s = generate_scene(&SceneSpec {
            objects: 0,
            walls: 0,
            ..small()
        })
        .unwrap();
        assert!(s.gt.results.values().all(Vec::is_empty));
        assert!(s.lidar.iter().chain(&s.radar).all(|p| p[2] == 0.0));
        assert!(!s.lidar.is_empty());
    }

    #[test]
    fn gt_mirrors_objects() {
        let s = generate_scene(&small()).unwrap();
        let gt = &s.gt.results[&s.manifest.token];
        assert_eq!(gt.len(), 16);
        for (g, o) in gt.iter().zip(&s.manifest.objects) {
            assert_eq!(g.translation, o.center);
            assert_eq!(g.detection_name, CLASS_NAMES[o.class_id]);
            assert!(g.detection_score.is_none());
        }
    }

    #[test]
    fn cameras_cover_the_ring() {
        let s = generate_scene(&small()).unwrap();
        assert_eq!(s.manifest.cameras.len(), 6);
        assert_eq!(s.manifest.feature_shape, [6, 4, 8, 22]);
        assert_eq!(s.features.len(), 2);
        assert_eq!(s.current_pose().timestamp, 0.0);
        assert_eq!(s.camera_features(1, 5).unwrap().shape(), &[4, 8, 22]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_scene(&SceneSpec { cameras: 7, ..small() }).is_err());
        assert!(generate_scene(&SceneSpec { frames: 0, ..small() }).is_err());
        assert!(generate_scene(&SceneSpec {
            image_size: (100, 352),
            ..small()
        })
        .is_err());
    }
}
