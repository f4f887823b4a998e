//! End-to-end run over a scene bundle.
//!
//! Stage order: radar pillars and pseudo image, depth net per camera and
//! frame, optional radar depth prior, softmax, lift, depth refinement,
//! ego-aligned BEV pooling, fusion, heatmap head, radar matching, peak
//! decoding, losses and evaluation.
//!
//! Parameters are not trained. They come from a seed in the config (or a
//! saved depth-net manifest), so runs are reproducible but detections are
//! not meant to be good.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::exec;
use crate::fusion::{
    concat_radar_rows, depth_bce_loss, detection_loss, fuse_bev_features, match_radar_to_heatmap, DetectionBox,
    DetectionLoss, Heatmap, RadarMatch,
};
use crate::geometry::{project_points, rasterize_depth_map, unproject_frustum, DepthMap, FrustumGrid, Vec3};
use crate::kan::{depthnet_forward, DepthNetConfig, DepthNetParams, EmbedNorm};
use crate::metrics::{self, match_center_distance, DetectionFile, EvalBox, EvalSummary, CLASS_NAMES};
use crate::nnprims::{conv_pointwise, depth_refine, lift_outer_product, sigmoid, softmax_over_depth, DepthBinSpec, Tensor};
use crate::pillars::{build_pillars, scatter_to_pseudo_image, vfe_forward, PillarGridConfig, RadarPointCloud, VfeParams};
use crate::scene::{Scene, CLASS_SIZES};
use crate::voxelpool::{pool, pool_aligned_frames, BevGridConfig, FeaturedPoints, PoolMethod, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "camera")]
    Camera,
    #[serde(rename = "camera+radar")]
    CameraRadar,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera" => Ok(Modality::Camera),
            "camera+radar" => Ok(Modality::CameraRadar),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl Modality {
    pub fn uses_radar(self) -> bool {
        self == Modality::CameraRadar
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::CameraRadar => "camera+radar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthStageConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
    pub context_channels: usize,
    pub kan_hidden: Vec<usize>,
    pub grid_intervals: usize,
    pub spline_degree: usize,
    pub init_scale: f64,
    pub embed: EmbedNorm,
    /// Depth-axis taps of the refinement kernel (previous, same, next bin).
    pub refine_taps: [f64; 3],
    /// Load depth-net parameters from this manifest directory instead of
    /// seeding them.
    pub params_dir: Option<PathBuf>,
}

impl Default for DepthStageConfig {
    fn default() -> Self {
        DepthStageConfig {
            d_min: 2.0,
            d_max: 58.0,
            bins: 112,
            context_channels: 80,
            kan_hidden: vec![16],
            grid_intervals: 8,
            spline_degree: 3,
            init_scale: 0.1,
            embed: EmbedNorm::default(),
            refine_taps: [0.25, 0.5, 0.25],
            params_dir: None,
        }
    }
}

impl DepthStageConfig {
    pub fn bins(&self) -> Result<DepthBinSpec> {
        DepthBinSpec::new(self.d_min, self.d_max, self.bins)
    }

    fn net_config(&self, feature_channels: usize) -> DepthNetConfig {
        DepthNetConfig {
            feature_channels,
            depth_bins: self.bins,
            context_channels: self.context_channels,
            kan_hidden: self.kan_hidden.clone(),
            grid_intervals: self.grid_intervals,
            spline_degree: self.spline_degree,
            embed: self.embed,
            init_scale: self.init_scale,
        }
    }
}

/// Gaussian bump added to the depth logits at feature pixels with a radar
/// return: `gain · exp(−(d_l − r)² / 2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarPriorConfig {
    pub gain: f64,
    pub sigma: f64,
}

impl Default for RadarPriorConfig {
    fn default() -> Self {
        RadarPriorConfig { gain: 4.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarStageConfig {
    /// Points per pillar.
    pub max_points: usize,
    pub max_pillars: usize,
    pub vfe_channels: usize,
}

impl Default for PillarStageConfig {
    fn default() -> Self {
        PillarStageConfig {
            max_points: 20,
            max_pillars: 12_000,
            vfe_channels: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub method: PoolMethod,
    pub workers: usize,
    pub reduction: Reduction,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            method: PoolMethod::Cumsum,
            workers: 4,
            reduction: Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Minimum peak score for a detection.
    pub score_thresh: f64,
    pub max_detections: usize,
    /// Heatmap score that marks a cell as a valid radar-matching region.
    pub match_score_thresh: f64,
    pub match_iou_thresh: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            score_thresh: 0.5,
            max_detections: 100,
            match_score_thresh: 0.3,
            match_iou_thresh: 0.1,
        }
    }
}

/// Stage-keyed run configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub modality: Modality,
    /// Seed for all untrained parameters and pillar sampling.
    pub params_seed: u64,
    pub depth: DepthStageConfig,
    pub radar_prior: RadarPriorConfig,
    pub pillars: PillarStageConfig,
    pub bev: BevGridConfig,
    pub pooling: PoolingConfig,
    pub head: HeadConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            modality: Modality::CameraRadar,
            params_seed: 0,
            depth: DepthStageConfig::default(),
            radar_prior: RadarPriorConfig::default(),
            pillars: PillarStageConfig::default(),
            bev: BevGridConfig {
                x_range: (-51.2, 51.2),
                y_range: (-51.2, 51.2),
                nx: 128,
                ny: 128,
            },
            pooling: PoolingConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.depth.bins()?;
        self.bev.validate()?;
        if self.depth.context_channels == 0 || self.pillars.vfe_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.radar_prior.sigma > 0.0) || !self.radar_prior.gain.is_finite() {
            return Err(Error::Config("radar prior needs sigma > 0 and a finite gain".into()));
        }
        if self.pooling.workers == 0 {
            return Err(Error::Config("pooling needs at least one worker".into()));
        }
        Ok(())
    }

    fn pillar_grid(&self) -> Result<PillarGridConfig> {
        PillarGridConfig::spanning(
            self.bev.x_range,
            self.bev.y_range,
            (self.bev.ny, self.bev.nx),
            self.pillars.max_points,
            self.pillars.max_pillars,
        )
    }
}

/// Seeded parameters outside the depth net.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub vfe: VfeParams,
    /// `C_C × C_vfe`: radar pseudo image to BEV channels.
    pub radar_proj: Tensor,
    /// `C_C × 1`: pooled depth mass to BEV channels.
    pub depth_proj: Tensor,
    /// `K × C_C` heatmap classifier.
    pub heatmap_kernel: Tensor,
    pub heatmap_bias: Vec<f64>,
}

impl HeadParams {
    pub fn random(cfg: &PipelineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.params_seed ^ 0x5eed_4ead);
        let cv = cfg.pillars.vfe_channels;
        let cc = cfg.depth.context_channels;
        let mut uniform = |shape: &[usize], scale: f64| Tensor::from_fn(shape, |_| rng.random_range(-scale..scale));
        let vfe_w = uniform(&[cv, 9], 1.0 / 3.0);
        let vfe_b = uniform(&[cv], 0.1).into_data();
        let radar_proj = uniform(&[cc, cv], 1.0 / (cv as f64).sqrt());
        let depth_proj = uniform(&[cc, 1], 1.0);
        let heatmap_kernel = uniform(&[CLASS_NAMES.len(), cc], 2.0 / (cc as f64).sqrt());
        let heatmap_bias = uniform(&[CLASS_NAMES.len()], 0.5).into_data();
        Ok(HeadParams {
            vfe: VfeParams::new(vfe_w, vfe_b)?,
            radar_proj,
            depth_proj,
            heatmap_kernel,
            heatmap_bias,
        })
    }
}

/// Projects `points` into every camera and keeps the nearest depth per
/// feature pixel.
pub fn sensor_depth_maps(points: &[[f64; 4]], scene: &Scene) -> Result<Vec<DepthMap>> {
    let xyz: Vec<Vec3> = points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let stride = scene.manifest.spec.feature_stride;
    scene
        .manifest
        .cameras
        .iter()
        .map(|rig| {
            let proj = project_points(&xyz, rig)?;
            let (map, _) = rasterize_depth_map(&proj.rows, rig.image_size);
            Ok(map.min_pool(stride))
        })
        .collect()
}

/// Adds the radar bump to one camera's `C_D×H×W` logits in place.
pub fn apply_radar_prior(logits: &mut Tensor, radar: &DepthMap, bins: &DepthBinSpec, prior: &RadarPriorConfig) -> Result<usize> {
    let (cd, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if cd != bins.count || h != radar.height || w != radar.width {
        return Err(Error::shape(
            "apply_radar_prior",
            format!("[{}, {}, {}]", bins.count, radar.height, radar.width),
            format!("{:?}", logits.shape()),
        ));
    }
    let hw = h * w;
    let data = logits.data_mut();
    let mut touched = 0;
    for pix in 0..hw {
        let Some(r) = radar.get(pix / w, pix % w) else {
            continue;
        };
        touched += 1;
        for l in 0..cd {
            let z = (bins.value(l) - r) / prior.sigma;
            data[l * hw + pix] += prior.gain * (-0.5 * z * z).exp();
        }
    }
    Ok(touched)
}

/// Feature pixels with no lidar return, and how many of them radar covers
/// with a depth inside the bin range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadarCoverage {
    pub lidar_uncovered: usize,
    pub radar_in_uncovered: usize,
}

impl RadarCoverage {
    pub fn fraction(&self) -> f64 {
        if self.lidar_uncovered == 0 {
            0.0
        } else {
            self.radar_in_uncovered as f64 / self.lidar_uncovered as f64
        }
    }
}

/// Current-frame depth estimate and its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthStage {
    pub gates: Vec<Vec<f64>>,
    pub raw_logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
    pub context: Vec<Tensor>,
    /// Per camera, lidar and radar depth merged by minimum.
    pub target: Vec<DepthMap>,
    pub bce: f64,
    pub supervised_pixels: usize,
    pub coverage: RadarCoverage,
    pub radar_prior_pixels: usize,
}

fn stack_cameras(probs: &[Tensor]) -> Result<Tensor> {
    let (cd, h, w) = (probs[0].shape()[0], probs[0].shape()[1], probs[0].shape()[2]);
    let n = probs.len();
    let mut out = Tensor::zeros(&[cd, n * h, w]);
    let hw = h * w;
    let dst = out.data_mut();
    for (cam, p) in probs.iter().enumerate() {
        for l in 0..cd {
            let src = &p.data()[l * hw..(l + 1) * hw];
            let at = l * n * hw + cam * hw;
            dst[at..at + hw].copy_from_slice(src);
        }
    }
    Ok(out)
}

fn stack_maps(maps: &[DepthMap]) -> DepthMap {
    DepthMap {
        height: maps.iter().map(|m| m.height).sum(),
        width: maps[0].width,
        values: maps.iter().flat_map(|m| m.values.iter().copied()).collect(),
    }
}

fn load_depth_params(cfg: &PipelineConfig, feature_channels: usize) -> Result<DepthNetParams> {
    let params = match &cfg.depth.params_dir {
        Some(dir) => DepthNetParams::load(dir)?,
        None => DepthNetParams::random(&cfg.depth.net_config(feature_channels), cfg.params_seed)?,
    };
    if params.depth_bins != cfg.depth.bins || params.context_channels != cfg.depth.context_channels {
        return Err(Error::Config(format!(
            "depth-net parameters produce {} bins / {} context channels, config expects {} / {}",
            params.depth_bins, params.context_channels, cfg.depth.bins, cfg.depth.context_channels
        )));
    }
    Ok(params)
}

fn frame_features(scene: &Scene, frame: usize) -> Result<Vec<Tensor>> {
    (0..scene.manifest.cameras.len()).map(|c| scene.camera_features(frame, c)).collect()
}

/// Runs the depth net on the current frame, applies the radar prior when the
/// modality uses radar, and scores the result against the merged lidar and
/// radar depth. The target is the same for both modalities so their losses
/// are comparable.
pub fn depth_stage(scene: &Scene, cfg: &PipelineConfig, modality: Modality) -> Result<DepthStage> {
    check_scene(scene).stage("scene")?;
    let params = load_depth_params(cfg, scene.manifest.feature_shape[1]).stage("depthnet")?;
    depth_stage_with(scene, cfg, modality, &params)
}

fn depth_stage_with(scene: &Scene, cfg: &PipelineConfig, modality: Modality, params: &DepthNetParams) -> Result<DepthStage> {
    let bins = cfg.depth.bins()?;
    let current = scene.manifest.poses.len() - 1;
    let out = depthnet_forward(&frame_features(scene, current)?, &scene.manifest.cameras, params).stage("depthnet")?;

    let lidar_maps = sensor_depth_maps(&scene.lidar, scene).stage("depth-target")?;
    let radar_maps = sensor_depth_maps(&scene.radar, scene).stage("depth-target")?;
    let target: Vec<DepthMap> = lidar_maps.iter().zip(&radar_maps).map(|(l, r)| l.merge_min(r)).collect();

    let mut coverage = RadarCoverage {
        lidar_uncovered: 0,
        radar_in_uncovered: 0,
    };
    for (l, r) in lidar_maps.iter().zip(&radar_maps) {
        for (lv, rv) in l.values.iter().zip(&r.values) {
            if *lv <= 0.0 {
                coverage.lidar_uncovered += 1;
                if bins.nearest_bin(*rv).is_some() {
                    coverage.radar_in_uncovered += 1;
                }
            }
        }
    }

    let mut logits = out.depth_logits.clone();
    let mut radar_prior_pixels = 0;
    if modality.uses_radar() {
        for (lg, r) in logits.iter_mut().zip(&radar_maps) {
            radar_prior_pixels += apply_radar_prior(lg, r, &bins, &cfg.radar_prior).stage("radar-prior")?;
        }
    }
    let probs = logits
        .iter()
        .map(softmax_over_depth)
        .collect::<Result<Vec<_>>>()
        .stage("softmax")?;

    let stacked_target = stack_maps(&target);
    let supervised_pixels = stacked_target
        .values
        .iter()
        .filter(|d| **d > 0.0 && bins.nearest_bin(**d).is_some())
        .count();
    let bce = depth_bce_loss(&stack_cameras(&probs)?, &stacked_target, &bins).stage("depth-loss")?;

    Ok(DepthStage {
        gates: out.gates,
        raw_logits: out.depth_logits,
        probs,
        context: out.context,
        target,
        bce,
        supervised_pixels,
        coverage,
        radar_prior_pixels,
    })
}

/// Runtime knobs that override the config without changing results beyond
/// float reassociation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub pooling: Option<PoolMethod>,
    pub workers: Option<usize>,
    pub modality: Option<Modality>,
    /// Single thread everywhere and one pooling worker.
    pub sequential: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            pooling: None,
            workers: None,
            modality: None,
            sequential: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadarStats {
    pub points: usize,
    pub pillars: usize,
    pub dropped_out_of_range: usize,
    pub truncated_pillars: usize,
    pub matches: Vec<RadarMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Losses {
    pub depth_bce: f64,
    pub depth_supervised_pixels: usize,
    pub detection: DetectionLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub token: String,
    pub modality: Modality,
    pub pooling: PoolMethod,
    pub workers: usize,
    pub sequential: bool,
    /// FNV-1a of every intermediate tensor, hex.
    pub checksums: BTreeMap<String, String>,
    pub radar: Option<RadarStats>,
    pub radar_coverage: RadarCoverage,
    pub losses: Losses,
    pub detections: usize,
    pub summary: EvalSummary,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub predictions: DetectionFile,
}

struct Recorder {
    checksums: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
    clock: Instant,
}

impl Recorder {
    fn new() -> Self {
        Recorder {
            checksums: BTreeMap::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        *self.timings.entry(stage.to_string()).or_default() += (now - self.clock).as_secs_f64();
        self.clock = now;
    }

    fn sum(&mut self, name: &str, tensors: &[&Tensor]) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in tensors {
            h ^= t.checksum();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.checksums.insert(name.to_string(), format!("{h:016x}"));
    }
}

/// `(positions, C_C features)` of every frustum sample of one camera.
fn frustum_points(lifted: &Tensor, positions: Vec<Vec3>) -> Result<FeaturedPoints> {
    let cc = lifted.shape()[0];
    let m = lifted.len() / cc;
    let src = lifted.data();
    let mut features = vec![0.0; m * cc];
    exec::for_each_chunk_mut(&mut features, cc, |i, row| {
        for (c, v) in row.iter_mut().enumerate() {
            *v = src[c * m + i];
        }
    });
    FeaturedPoints::new(positions, features, cc)
}

fn standardize_channels(t: &mut Tensor) {
    let c = t.shape()[0];
    let n = t.len() / c;
    exec::for_each_chunk_mut(t.data_mut(), n, |_, plane| {
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for v in plane.iter_mut() {
            *v = (*v - mean) / sd;
        }
    });
}

/// Local 3×3 maxima at or above `thresh`. Among equal neighbours the lowest
/// flat index wins. Results are sorted by descending score, then class, then
/// cell.
pub fn decode_peaks(heatmap: &Heatmap, thresh: f64, max_detections: usize) -> Vec<(usize, usize, f64)> {
    let s = heatmap.scores();
    let (k, ny, nx) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let n = ny * nx;
    let mut peaks = Vec::new();
    for class in 0..k {
        let plane = &s.data()[class * n..(class + 1) * n];
        for cell in 0..n {
            let v = plane[cell];
            if v < thresh {
                continue;
            }
            let (iy, ix) = ((cell / nx) as isize, (cell % nx) as isize);
            let mut is_peak = true;
            'nb: for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (y, x) = (iy + dy, ix + dx);
                    if (dy, dx) == (0, 0) || y < 0 || x < 0 || y >= ny as isize || x >= nx as isize {
                        continue;
                    }
                    let other = (y as usize) * nx + x as usize;
                    let u = plane[other];
                    if u > v || (u == v && other < cell) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((class, cell, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    peaks.truncate(max_detections);
    peaks
}

fn gt_heatmap(scene: &Scene, cfg: &BevGridConfig) -> Result<Heatmap> {
    let mut t = Tensor::zeros(&[CLASS_NAMES.len(), cfg.ny, cfg.nx]);
    for b in &scene.manifest.objects {
        if let Some((ix, iy)) = cfg.cell_xy(b.center[0], b.center[1]) {
            t.set(&[b.class_id, iy, ix], 1.0);
        }
    }
    Heatmap::new(t)
}

/// Runs every stage on `scene` and evaluates the decoded boxes against its
/// ground truth.
pub fn run_pipeline(scene: &Scene, cfg: &PipelineConfig, opts: RunOptions) -> Result<RunOutput> {
    if opts.sequential {
        exec::sequential(|| run_inner(scene, cfg, opts))
    } else {
        run_inner(scene, cfg, opts)
    }
}

fn check_scene(scene: &Scene) -> Result<()> {
    let m = &scene.manifest;
    if m.poses.is_empty() || m.poses.len() != scene.features.len() {
        return Err(Error::Invalid(format!("{} poses but {} feature frames", m.poses.len(), scene.features.len())));
    }
    if m.cameras.is_empty() || m.cameras.len() != m.feature_shape[0] {
        return Err(Error::Invalid(format!("{} cameras but feature shape {:?}", m.cameras.len(), m.feature_shape)));
    }
    if let Some(t) = scene.features.iter().find(|t| t.shape() != m.feature_shape) {
        return Err(Error::shape("scene features", format!("{:?}", m.feature_shape), format!("{:?}", t.shape())));
    }
    Ok(())
}

fn run_inner(scene: &Scene, cfg: &PipelineConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate().stage("config")?;
    check_scene(scene).stage("scene")?;
    let modality = opts.modality.unwrap_or(cfg.modality);
    let method = opts.pooling.unwrap_or(cfg.pooling.method);
    let workers = if opts.sequential { 1 } else { opts.workers.unwrap_or(cfg.pooling.workers) };
    if workers == 0 {
        return Err(Error::Config("pooling needs at least one worker".into()));
    }
    let bev = &cfg.bev;
    let cc = cfg.depth.context_channels;
    let bins = cfg.depth.bins()?;
    let head = HeadParams::random(cfg).stage("params")?;
    let mut rec = Recorder::new();

    // Radar branch.
    let mut f_radar = Tensor::zeros(&[cc, bev.ny, bev.nx]);
    let mut radar_stats = None;
    let mut radar_boxes = Vec::new();
    if modality.uses_radar() {
        let grid = cfg.pillar_grid().stage("pillars")?;
        let cloud = RadarPointCloud::new(scene.radar.clone()).stage("pillars")?;
        let built = build_pillars(&cloud, &grid, cfg.params_seed).stage("pillars")?;
        let pt = &built.pillars;
        let pillar_tensor = Tensor::from_vec(&[pt.len(), pt.max_points, 9], pt.features.clone())?;
        rec.sum("pillars", &[&pillar_tensor]);
        let vfe = vfe_forward(pt, &head.vfe).stage("vfe")?;
        rec.sum("vfe", &[&vfe]);
        let pseudo = scatter_to_pseudo_image(&vfe, &pt.coords, &grid).stage("scatter")?;
        rec.sum("pseudo_image", &[&pseudo.data]);
        let zero_bias = vec![0.0; cc];
        f_radar = conv_pointwise(&pseudo.data, &head.radar_proj, &zero_bias).stage("radar-projection")?;
        for p in 0..pt.len() {
            let n = pt.point_counts[p].min(pt.max_points);
            let mut c = [0.0; 3];
            for t in 0..n {
                let row = pt.row(p, t);
                for (ci, v) in c.iter_mut().zip(row) {
                    *ci += v / n as f64;
                }
            }
            radar_boxes.push(DetectionBox {
                center: c,
                size: [grid.pillar_size.1, grid.pillar_size.0, 1.0],
                yaw: 0.0,
                velocity: [0.0, 0.0],
                class_id: 0,
                score: 1.0,
                attribute_id: 0,
            });
        }
        radar_stats = Some(RadarStats {
            points: cloud.len(),
            pillars: pt.len(),
            dropped_out_of_range: built.dropped_out_of_range,
            truncated_pillars: built.truncated_pillars,
            matches: Vec::new(),
        });
    }
    rec.sum("f_radar", &[&f_radar]);
    rec.lap("radar");

    // Depth for every frame; the current frame also gets the loss.
    let params = load_depth_params(cfg, scene.manifest.feature_shape[1]).stage("depthnet")?;
    let current = scene.manifest.poses.len() - 1;
    let depth = depth_stage_with(scene, cfg, modality, &params)?;
    rec.sum("features", &[&scene.features[current]]);
    let gate_t: Vec<Tensor> = depth.gates.iter().map(|g| Tensor::from_vec(&[g.len()], g.clone())).collect::<Result<_>>()?;
    rec.sum("gates", &gate_t.iter().collect::<Vec<_>>());
    rec.sum("depth_logits_raw", &depth.raw_logits.iter().collect::<Vec<_>>());
    rec.sum("context", &depth.context.iter().collect::<Vec<_>>());
    rec.sum("depth_probs", &depth.probs.iter().collect::<Vec<_>>());
    rec.lap("depth");

    let mut per_frame: Vec<(Vec<Tensor>, Vec<Tensor>)> = Vec::with_capacity(scene.manifest.poses.len());
    for frame in 0..scene.manifest.poses.len() {
        if frame == current {
            per_frame.push((depth.probs.clone(), depth.context.clone()));
        } else {
            // Earlier frames have no radar sweep, so they get no prior.
            let out = depthnet_forward(&frame_features(scene, frame)?, &scene.manifest.cameras, &params).stage("depthnet")?;
            let probs = out
                .depth_logits
                .iter()
                .map(softmax_over_depth)
                .collect::<Result<Vec<_>>>()
                .stage("softmax")?;
            per_frame.push((probs, out.context));
        }
    }
    rec.lap("depth");

    // Lift, refine, unproject and pool every camera of every frame into the
    // current ego frame.
    let (fh, fw) = (scene.manifest.feature_shape[2], scene.manifest.feature_shape[3]);
    let frustum = FrustumGrid::lattice((fh, fw), scene.manifest.cameras[0].image_size, &bins.values()).stage("frustum")?;
    let mut refine = Tensor::zeros(&[3, 3]);
    for (a, tap) in cfg.depth.refine_taps.iter().enumerate() {
        refine.set(&[a, 1], *tap);
    }
    let mut f_bev = Tensor::zeros(&[cc, bev.ny, bev.nx]);
    let mut depth_mass = Tensor::zeros(&[1, bev.ny, bev.nx]);
    let mut lifted_sums = Vec::new();
    let now = scene.current_pose();
    for (frame, (probs, context)) in per_frame.iter().enumerate() {
        let pose = &scene.manifest.poses[frame];
        for (cam, rig) in scene.manifest.cameras.iter().enumerate() {
            let lifted = lift_outer_product(&context[cam], &probs[cam]).stage("lift")?;
            let refined = depth_refine(&lifted, &refine).stage("depth-refine")?;
            lifted_sums.push(refined.checksum());
            let positions = unproject_frustum(rig, &frustum).stage("unproject")?;
            let mass = FeaturedPoints::new(positions.clone(), probs[cam].data().to_vec(), 1)?;
            let pts = frustum_points(&refined, positions).stage("lift")?;
            let grid = pool_aligned_frames(&[(pts, pose.clone())], now, bev, method, workers).stage("voxel-pooling")?;
            let mgrid = pool_aligned_frames(&[(mass, pose.clone())], now, bev, method, workers).stage("voxel-pooling")?;
            for (a, b) in f_bev.data_mut().iter_mut().zip(grid.data.data()) {
                *a += b;
            }
            for (a, b) in depth_mass.data_mut().iter_mut().zip(mgrid.data.data()) {
                *a += b;
            }
        }
    }
    let lifted_digest = Tensor::from_vec(&[lifted_sums.len()], lifted_sums.iter().map(|h| f64::from_bits(*h)).collect())?;
    rec.sum("lifted", &[&lifted_digest]);
    if cfg.pooling.reduction == Reduction::Mean {
        // Per-cell mean needs the counts of every frustum point that landed
        // in the cell, which equal the pooled ones-channel.
        let mut ones = Tensor::zeros(&[1, bev.ny, bev.nx]);
        for (frame, _) in per_frame.iter().enumerate() {
            for rig in &scene.manifest.cameras {
                let positions = unproject_frustum(rig, &frustum)?;
                let n = positions.len();
                let pts = FeaturedPoints::new(positions, vec![1.0; n], 1)?;
                let g = pool_aligned_frames(&[(pts, scene.manifest.poses[frame].clone())], now, bev, PoolMethod::Cumsum, 1)?;
                for (a, b) in ones.data_mut().iter_mut().zip(g.data.data()) {
                    *a += b;
                }
            }
        }
        let n = bev.cells();
        exec::for_each_chunk_mut(f_bev.data_mut(), n, |_, plane| {
            for (v, c) in plane.iter_mut().zip(ones.data()) {
                if *c > 0.0 {
                    *v /= c;
                }
            }
        });
    }
    rec.sum("f_bev", &[&f_bev]);
    let f_depth = conv_pointwise(&depth_mass, &head.depth_proj, &vec![0.0; cc]).stage("depth-projection")?;
    rec.sum("f_depth", &[&f_depth]);
    rec.lap("lift_pool");

    // Fusion and head.
    let mut fused = fuse_bev_features(&f_bev, &f_radar, &f_depth).stage("fusion")?.data;
    rec.sum("fused", &[&fused]);
    standardize_channels(&mut fused);
    let logits = conv_pointwise(&fused, &head.heatmap_kernel, &head.heatmap_bias).stage("head")?;
    let scores = Tensor::from_vec(logits.shape(), logits.data().iter().map(|&v| sigmoid(v)).collect())?;
    let heatmap = Heatmap::new(scores).stage("head")?;
    rec.sum("heatmap", &[heatmap.scores()]);

    let matches = if modality.uses_radar() {
        match_radar_to_heatmap(&radar_boxes, &heatmap, bev, cfg.head.match_score_thresh, cfg.head.match_iou_thresh)
            .stage("radar-matching")?
    } else {
        Vec::new()
    };
    let augmented = concat_radar_rows(&fused, &matches).stage("radar-matching")?;
    rec.sum("fused_with_radar_rows", &[&augmented]);
    rec.lap("fusion_head");

    // Decoding: matched radar positions and velocities refine the box.
    let by_cell: BTreeMap<usize, &RadarMatch> = matches.iter().rev().map(|m| (m.cell, m)).collect();
    let detections: Vec<DetectionBox> = decode_peaks(&heatmap, cfg.head.score_thresh, cfg.head.max_detections)
        .into_iter()
        .map(|(class_id, cell, score)| {
            let (ix, iy) = (cell % bev.nx, cell / bev.nx);
            let (mut x, mut y) = bev.cell_center(ix, iy);
            let mut velocity = [0.0, 0.0];
            if let Some(m) = by_cell.get(&cell) {
                x = m.q[0];
                y = m.q[1];
                velocity = [m.q[2], m.q[3]];
            }
            let size = CLASS_SIZES[class_id];
            DetectionBox {
                center: [x, y, size[2] / 2.0],
                size,
                yaw: 0.0,
                velocity,
                class_id,
                score,
                attribute_id: 0,
            }
        })
        .collect();
    let mut predictions = DetectionFile::default();
    predictions.results.insert(
        scene.manifest.token.clone(),
        detections.iter().map(|d| EvalBox::from_detection(d, true)).collect::<Result<_>>()?,
    );
    rec.lap("decode");

    // Losses against the scene's labels.
    let gt_boxes = scene.gt.results.get(&scene.manifest.token).cloned().unwrap_or_default();
    let pred_boxes = &predictions.results[&scene.manifest.token];
    let mut pairs = Vec::new();
    for name in CLASS_NAMES {
        let p: Vec<(usize, EvalBox)> = pred_boxes.iter().cloned().enumerate().filter(|(_, b)| b.detection_name == name).collect();
        let g: Vec<(usize, EvalBox)> = gt_boxes.iter().cloned().enumerate().filter(|(_, b)| b.detection_name == name).collect();
        let pv: Vec<EvalBox> = p.iter().map(|x| x.1.clone()).collect();
        let gv: Vec<EvalBox> = g.iter().map(|x| x.1.clone()).collect();
        let m = match_center_distance(&pv, &gv, metrics::TP_THRESHOLD);
        for (pi, gi) in m.pairs() {
            let gt_obj = &scene.manifest.objects[g[gi].0];
            pairs.push((detections[p[pi].0].clone(), gt_obj.clone()));
        }
    }
    let detection = detection_loss(&heatmap, &gt_heatmap(scene, bev)?, &pairs).stage("detection-loss")?;
    rec.lap("losses");

    let summary = metrics::evaluate(&predictions, &scene.gt).stage("evaluation")?;
    rec.lap("evaluation");

    if let Some(stats) = radar_stats.as_mut() {
        stats.matches = matches;
    }
    let report = RunReport {
        token: scene.manifest.token.clone(),
        modality,
        pooling: method,
        workers,
        sequential: opts.sequential,
        checksums: rec.checksums,
        radar: radar_stats,
        radar_coverage: depth.coverage,
        losses: Losses {
            depth_bce: depth.bce,
            depth_supervised_pixels: depth.supervised_pixels,
            detection,
        },
        detections: detections.len(),
        summary,
        timings: rec.timings,
    };
    Ok(RunOutput { report, predictions })
}

/// Pools the raw frustum of one camera with every implementation; used by
/// the benchmark harness.
pub fn pool_camera_frustum(scene: &Scene, cfg: &PipelineConfig, cam: usize, method: PoolMethod, workers: usize) -> Result<f64> {
    let bins = cfg.depth.bins()?;
    let (fh, fw) = (scene.manifest.feature_shape[2], scene.manifest.feature_shape[3]);
    let rig = &scene.manifest.cameras[cam];
    let frustum = FrustumGrid::lattice((fh, fw), rig.image_size, &bins.values())?;
    let positions = unproject_frustum(rig, &frustum)?;
    let n = positions.len();
    let pts = FeaturedPoints::new(positions, vec![1.0; n], 1)?;
    Ok(pool(&pts, &cfg.bev, method, workers)?.data.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn tiny_scene() -> Scene {
        generate_scene(&SceneSpec {
            seed: 1,
            cameras: 2,
            feature_channels: 8,
            lidar_density: 4000.0,
            radar_density: 600.0,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            depth: DepthStageConfig {
                bins: 28,
                context_channels: 6,
                ..DepthStageConfig::default()
            },
            bev: BevGridConfig {
                x_range: (-51.2, 51.2),
                y_range: (-51.2, 51.2),
                nx: 32,
                ny: 32,
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn radar_prior_peaks_at_the_radar_depth() {
        let bins = DepthBinSpec::new(2.0, 10.0, 16).unwrap();
        let mut logits = Tensor::zeros(&[16, 1, 2]);
        let mut radar = DepthMap::empty(1, 2);
        radar.values[1] = 6.0;
        let n = apply_radar_prior(&mut logits, &radar, &bins, &RadarPriorConfig::default()).unwrap();
        assert_eq!(n, 1);
        let col: Vec<f64> = (0..16).map(|l| logits.get(&[l, 0, 1])).collect();
        let argmax = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(bins.value(argmax), 6.0);
        assert!((0..16).all(|l| logits.get(&[l, 0, 0]) == 0.0));
    }

    #[test]
    fn stacking_keeps_camera_blocks() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 3], |i| 10.0 + i as f64);
        let s = stack_cameras(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.get(&[1, 0, 2]), 5.0);
        assert_eq!(s.get(&[1, 1, 2]), 15.0);
    }

    #[test]
    fn peaks_break_ties_by_lower_cell() {
        let mut t = Tensor::zeros(&[1, 3, 3]);
        t.set(&[0, 1, 1], 0.8);
        t.set(&[0, 1, 2], 0.8);
        t.set(&[0, 0, 0], 0.6);
        let p = decode_peaks(&Heatmap::new(t).unwrap(), 0.5, 10);
        assert_eq!(p, vec![(0, 4, 0.8)]);
    }

    #[test]
    fn modalities_share_camera_stages() {
        let scene = tiny_scene();
        let cfg = tiny_cfg();
        let seq = RunOptions {
            sequential: true,
            ..RunOptions::default()
        };
        let cam = run_pipeline(&scene, &cfg, RunOptions { modality: Some(Modality::Camera), ..seq }).unwrap();
        let fused = run_pipeline(&scene, &cfg, RunOptions { modality: Some(Modality::CameraRadar), ..seq }).unwrap();
        assert!(cam.report.radar.is_none());
        assert!(fused.report.radar.is_some());
        for key in ["features", "gates", "depth_logits_raw", "context"] {
            assert_eq!(cam.report.checksums[key], fused.report.checksums[key], "{key}");
        }
        for key in ["f_radar", "depth_probs", "f_bev", "fused"] {
            assert_ne!(cam.report.checksums[key], fused.report.checksums[key], "{key}");
        }
        let mtps = cam.report.summary.mtps().map(|v| v.unwrap_or(1.0));
        assert!((cam.report.summary.nds - metrics::compose_nds(cam.report.summary.map, &mtps)).abs() < 1e-12);
    }

    #[test]
    fn missing_cameras_are_a_staged_error() {
        let mut scene = tiny_scene();
        scene.manifest.cameras.pop();
        let err = run_pipeline(&scene, &tiny_cfg(), RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("stage `scene`"), "{err}");
    }
}
