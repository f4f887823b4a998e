//! Detection-head fusion: multi-scale feature aggregation, BEV feature
//! summation, heatmap-guided radar matching and the training losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Vec3};
use crate::nnprims::{DepthBinSpec, Tensor};
use crate::voxelpool::BevGridConfig;

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Per-class BEV score maps, `K×ny×nx` with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    scores: Tensor,
}

impl Heatmap {
    pub fn new(scores: Tensor) -> Result<Self> {
        scores.expect_rank("Heatmap", 3)?;
        if let Some(i) = scores.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "heatmap score {} at flat index {i} is outside [0, 1]",
                scores.data()[i]
            )));
        }
        Ok(Heatmap { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.scores.shape()[1] * self.scores.shape()[2]
    }

    /// Highest class score at flat cell `cell`.
    pub fn cell_max(&self, cell: usize) -> f64 {
        let n = self.cells();
        (0..self.classes())
            .map(|k| self.scores.data()[k * n + cell])
            .fold(0.0, f64::max)
    }
}

/// A 3D box in ego coordinates. `size` is `(w, l, h)`; the BEV footprint
/// spans `l` along x and `w` along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
    pub attribute_id: usize,
}

impl DetectionBox {
    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Invalid(format!("box sizes must be positive, got {:?}", self.size)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Invalid(format!("box score {} outside [0, 1]", self.score)));
        }
        let finite = self.center.iter().chain(&self.velocity).chain([&self.yaw]).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("box has non-finite pose or velocity".into()));
        }
        Ok(())
    }

    /// `(x_min, x_max, y_min, y_max)` of the axis-aligned footprint.
    pub fn footprint(&self) -> (f64, f64, f64, f64) {
        let (hl, hw) = (self.size[1] / 2.0, self.size[0] / 2.0);
        (self.center[0] - hl, self.center[0] + hl, self.center[1] - hw, self.center[1] + hw)
    }

    /// Regression target layout: center, size, yaw, velocity.
    pub fn param_vector(&self) -> [f64; 9] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        let [vx, vy] = self.velocity;
        [x, y, z, w, l, h, self.yaw, vx, vy]
    }
}

/// `f_final`: the summed BEV feature map, `C×ny×nx`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBev {
    pub data: Tensor,
}

/// Weighted sum of per-reference feature vectors.
pub fn aggregate_image_features(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::Invalid("aggregate_image_features needs at least one feature".into()));
    };
    if features.len() != weights.len() {
        return Err(Error::shape("aggregate_image_features", features.len(), weights.len()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite { indices: vec![i] });
    }
    let c = first.len();
    let mut out = vec![0.0; c];
    for (f, w) in features.iter().zip(weights) {
        if f.len() != c {
            return Err(Error::shape("aggregate_image_features", c, f.len()));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Cellwise `f_bev + f_radar + f_depth`. The radar map must already be
/// projected to the BEV channel count.
pub fn fuse_bev_features(f_bev: &Tensor, f_radar: &Tensor, f_depth: &Tensor) -> Result<FusedBev> {
    f_bev.expect_rank("fuse_bev_features", 3)?;
    for other in [f_radar, f_depth] {
        if other.shape() != f_bev.shape() {
            return Err(Error::shape(
                "fuse_bev_features",
                format!("{:?}", f_bev.shape()),
                format!("{:?}", other.shape()),
            ));
        }
    }
    let data: Vec<f64> = f_bev
        .data()
        .iter()
        .zip(f_radar.data())
        .zip(f_depth.data())
        .map(|((a, b), c)| a + b + c)
        .collect();
    Ok(FusedBev {
        data: Tensor::from_vec(f_bev.shape(), data)?,
    })
}

fn footprint_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.2.max(b.2)).max(0.0);
    let inter = ix * iy;
    let union = (a.1 - a.0) * (a.3 - a.2) + (b.1 - b.0) * (b.3 - b.2) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Axis-aligned BEV IOU of the two footprints; yaw is ignored.
pub fn iou_bev(a: &DetectionBox, b: &DetectionBox) -> f64 {
    footprint_iou(a.footprint(), b.footprint())
}

/// One radar box attached to a valid heatmap cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadarMatch {
    pub radar_index: usize,
    pub cell: usize,
    pub iou: f64,
    /// `(x, y, vx, vy)` of the radar box.
    pub q: [f64; 4],
}

fn cell_footprint(cfg: &BevGridConfig, cell: usize) -> (f64, f64, f64, f64) {
    let (dx, dy) = cfg.cell_size();
    let (ix, iy) = (cell % cfg.nx, cell / cfg.nx);
    let x0 = cfg.x_range.0 + ix as f64 * dx;
    let y0 = cfg.y_range.0 + iy as f64 * dy;
    (x0, x0 + dx, y0, y0 + dy)
}

/// Matches each radar box to its highest-IOU valid cell. A cell is valid when
/// its best class score reaches `score_thresh`. A match needs a positive IOU
/// that also reaches `iou_thresh`; equal IOUs go to the lower flat cell index.
pub fn match_radar_to_heatmap(
    radar_boxes: &[DetectionBox],
    heatmap: &Heatmap,
    cfg: &BevGridConfig,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<RadarMatch>> {
    for (name, t) in [("score_thresh", score_thresh), ("iou_thresh", iou_thresh)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("{name} = {t} is outside [0, 1]")));
        }
    }
    let shape = heatmap.scores().shape();
    if shape[1] != cfg.ny || shape[2] != cfg.nx {
        return Err(Error::shape(
            "match_radar_to_heatmap",
            format!("{}x{}", cfg.ny, cfg.nx),
            format!("{}x{}", shape[1], shape[2]),
        ));
    }
    let (dx, dy) = cfg.cell_size();
    let index_range = |lo: f64, hi: f64, origin: f64, step: f64, n: usize| {
        let a = ((lo - origin) / step).floor().max(0.0) as usize;
        let b = (((hi - origin) / step).ceil().max(0.0) as usize).min(n);
        a..b
    };
    let mut out = Vec::new();
    for (radar_index, rb) in radar_boxes.iter().enumerate() {
        let fp = rb.footprint();
        let mut best: Option<(usize, f64)> = None;
        // Only cells intersecting the footprint can have a positive IOU;
        // visiting rows then columns keeps flat indices increasing.
        for iy in index_range(fp.2, fp.3, cfg.y_range.0, dy, cfg.ny) {
            for ix in index_range(fp.0, fp.1, cfg.x_range.0, dx, cfg.nx) {
                let cell = iy * cfg.nx + ix;
                if heatmap.cell_max(cell) < score_thresh {
                    continue;
                }
                let iou = footprint_iou(fp, cell_footprint(cfg, cell));
                if iou > 0.0 && iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((cell, iou));
                }
            }
        }
        if let Some((cell, iou)) = best {
            out.push(RadarMatch {
                radar_index,
                cell,
                iou,
                q: [rb.center[0], rb.center[1], rb.velocity[0], rb.velocity[1]],
            });
        }
    }
    Ok(out)
}

/// Appends four channels holding `q` at each matched cell (zero elsewhere).
pub fn concat_radar_rows(features: &Tensor, matches: &[RadarMatch]) -> Result<Tensor> {
    features.expect_rank("concat_radar_rows", 3)?;
    let (c, ny, nx) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let n = ny * nx;
    let mut data = features.data().to_vec();
    data.resize((c + 4) * n, 0.0);
    for m in matches {
        if m.cell >= n {
            return Err(Error::Invalid(format!("matched cell {} outside {}x{} grid", m.cell, ny, nx)));
        }
        for (k, v) in m.q.iter().enumerate() {
            data[(c + k) * n + m.cell] = *v;
        }
    }
    Tensor::from_vec(&[c + 4, ny, nx], data)
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionLoss {
    pub total: f64,
    pub heatmap: f64,
    pub bbox: f64,
    /// Set when no matched pairs were given, so `bbox` is zero by definition.
    pub no_matched_pairs: bool,
}

/// Mean heatmap BCE plus mean absolute box-parameter error over matched
/// `(pred, gt)` pairs.
pub fn detection_loss(pred: &Heatmap, gt: &Heatmap, pairs: &[(DetectionBox, DetectionBox)]) -> Result<DetectionLoss> {
    if pred.scores().shape() != gt.scores().shape() {
        return Err(Error::shape(
            "detection_loss",
            format!("{:?}", gt.scores().shape()),
            format!("{:?}", pred.scores().shape()),
        ));
    }
    let n = pred.scores().len().max(1) as f64;
    let heatmap = pred
        .scores()
        .data()
        .iter()
        .zip(gt.scores().data())
        .map(|(&p, &y)| bce(p, y))
        .sum::<f64>()
        / n;
    let bbox = if pairs.is_empty() {
        0.0
    } else {
        let total: f64 = pairs
            .iter()
            .map(|(p, g)| {
                p.param_vector()
                    .iter()
                    .zip(g.param_vector())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        total / (pairs.len() * 9) as f64
    };
    Ok(DetectionLoss {
        total: heatmap + bbox,
        heatmap,
        bbox,
        no_matched_pairs: pairs.is_empty(),
    })
}

/// BCE between a `C_D×H×W` depth distribution and the one-hot nearest-bin
/// encoding of `gt`, averaged over bins and then over supervised pixels.
/// Pixels whose depth falls outside the bin range carry no target and are
/// skipped like sentinel pixels.
pub fn depth_bce_loss(p_d: &Tensor, gt: &DepthMap, bins: &DepthBinSpec) -> Result<f64> {
    p_d.expect_rank("depth_bce_loss", 3)?;
    let (cd, h, w) = (p_d.shape()[0], p_d.shape()[1], p_d.shape()[2]);
    if cd != bins.count || h != gt.height || w != gt.width {
        return Err(Error::shape(
            "depth_bce_loss",
            format!("[{}, {}, {}]", bins.count, gt.height, gt.width),
            format!("{:?}", p_d.shape()),
        ));
    }
    let hw = h * w;
    let data = p_d.data();
    let mut total = 0.0;
    let mut supervised = 0usize;
    for pix in 0..hw {
        let Some(target) = gt.get(pix / w, pix % w).and_then(|d| bins.nearest_bin(d)) else {
            continue;
        };
        let per_pixel: f64 = (0..cd)
            .map(|l| bce(data[l * hw + pix], if l == target { 1.0 } else { 0.0 }))
            .sum();
        total += per_pixel / cd as f64;
        supervised += 1;
    }
    if supervised == 0 {
        return Err(Error::Invalid("depth_bce_loss: no supervised pixels".into()));
    }
    Ok(total / supervised as f64)
}
