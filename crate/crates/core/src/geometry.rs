//! Camera projection, depth supervision maps, frustum unprojection and ego
//! motion.
//!
//! Pixel convention: `(u, v)` is (column, row) with the origin at the top-left
//! corner; a continuous coordinate belongs to pixel `(⌊u⌋, ⌊v⌋)`.
//!
//! Projection returns depth-scaled homogeneous coordinates `(u·d, v·d, d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const ROTATION_TOL: f64 = 1e-9;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse by adjugate; `None` when the determinant vanishes.
pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    if d.abs() < 1e-300 || !d.is_finite() {
        return None;
    }
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / d)))
}

fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Rotation about +z by `yaw` radians.
pub fn rotation_z(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn check_rotation(r: &Mat3, what: &str) -> Result<()> {
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("{what} has non-finite entries")));
    }
    let rrt = mat_mul(r, &transpose(r));
    for (i, row) in rrt.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            if (v - want).abs() > ROTATION_TOL {
                return Err(Error::Invalid(format!("{what} is not orthonormal")));
            }
        }
    }
    if (det(r) - 1.0).abs() > ROTATION_TOL {
        return Err(Error::Invalid(format!("{what} has determinant {} (want 1)", det(r))));
    }
    Ok(())
}

/// Intrinsics, sensor→camera rotation and translation of one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRig")]
pub struct CameraRig {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

#[derive(Deserialize)]
struct RawRig {
    intrinsics: Mat3,
    rotation: Mat3,
    translation: Vec3,
    image_size: (usize, usize),
}

impl TryFrom<RawRig> for CameraRig {
    type Error = Error;

    fn try_from(r: RawRig) -> Result<Self> {
        CameraRig::new(r.intrinsics, r.rotation, r.translation, r.image_size)
    }
}

impl CameraRig {
    pub fn new(intrinsics: Mat3, rotation: Mat3, translation: Vec3, image_size: (usize, usize)) -> Result<Self> {
        let k = &intrinsics;
        if k.iter().flatten().any(|v| !v.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("camera rig has non-finite entries".into()));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::Invalid("intrinsics must be upper triangular".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0 && k[2][2] > 0.0) {
            return Err(Error::Invalid("intrinsics need a strictly positive diagonal".into()));
        }
        check_rotation(&rotation, "camera rotation")?;
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::Invalid("image size must be positive".into()));
        }
        Ok(CameraRig {
            intrinsics,
            rotation,
            translation,
            image_size,
        })
    }

    /// Unit intrinsics and identity extrinsics.
    pub fn identity(image_size: (usize, usize)) -> Self {
        CameraRig {
            intrinsics: IDENTITY,
            rotation: IDENTITY,
            translation: [0.0; 3],
            image_size,
        }
    }

    /// Camera at `position` (ego frame) looking horizontally along `yaw`,
    /// with x right, y down, z forward, and a symmetric pinhole of the given
    /// horizontal field of view.
    pub fn looking_along(yaw: f64, position: Vec3, hfov: f64, image_size: (usize, usize)) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let rp = mat_vec(&rotation, &position);
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        let f = 0.5 * w / (0.5 * hfov).tan();
        let intrinsics = [[f, 0.0, 0.5 * w], [0.0, f, 0.5 * h], [0.0, 0.0, 1.0]];
        CameraRig::new(intrinsics, rotation, [-rp[0], -rp[1], -rp[2]], image_size)
    }
}

/// Rigid ego→world transform at a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose")]
pub struct EgoPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub timestamp: f64,
}

#[derive(Deserialize)]
struct RawPose {
    rotation: Mat3,
    translation: Vec3,
    timestamp: f64,
}

impl TryFrom<RawPose> for EgoPose {
    type Error = Error;

    fn try_from(r: RawPose) -> Result<Self> {
        EgoPose::new(r.rotation, r.translation, r.timestamp)
    }
}

impl EgoPose {
    pub fn new(rotation: Mat3, translation: Vec3, timestamp: f64) -> Result<Self> {
        check_rotation(&rotation, "ego rotation")?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("ego translation is not finite".into()));
        }
        Ok(EgoPose {
            rotation,
            translation,
            timestamp,
        })
    }

    /// Planar pose: position `(x, y, 0)` and heading `yaw`.
    pub fn planar(x: f64, y: f64, yaw: f64, timestamp: f64) -> Self {
        EgoPose {
            rotation: rotation_z(yaw),
            translation: [x, y, 0.0],
            timestamp,
        }
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        add(&mat_vec(&self.rotation, p), &self.translation)
    }

    pub fn from_world(&self, p: &Vec3) -> Vec3 {
        mat_vec(&transpose(&self.rotation), &sub(p, &self.translation))
    }
}

/// Maps points expressed in the `src` ego frame into the `dst` ego frame.
pub fn transform_ego(points: &[Vec3], src: &EgoPose, dst: &EgoPose) -> Vec<Vec3> {
    // Fold both transforms into one rotation and offset.
    let dst_t = transpose(&dst.rotation);
    let rot = mat_mul(&dst_t, &src.rotation);
    let off = mat_vec(&dst_t, &sub(&src.translation, &dst.translation));
    points.iter().map(|p| add(&mat_vec(&rot, p), &off)).collect()
}

/// Projected rows `(u·d, v·d, d)` plus a front-of-camera flag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub rows: Vec<Vec3>,
    pub in_front: Vec<bool>,
}

impl Projection {
    /// `(u, v, d)` for every in-front row.
    pub fn pixels(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.rows
            .iter()
            .zip(&self.in_front)
            .filter(|(_, &f)| f)
            .map(|(r, _)| [r[0] / r[2], r[1] / r[2], r[2]])
    }
}

/// `K·(R·p + t)` for each point. Non-finite input is rejected listing every
/// offending point index.
pub fn project_points(points: &[Vec3], rig: &CameraRig) -> Result<Projection> {
    let bad: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.iter().any(|v| !v.is_finite()))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite { indices: bad });
    }
    let kr = mat_mul(&rig.intrinsics, &rig.rotation);
    let kt = mat_vec(&rig.intrinsics, &rig.translation);
    let rows: Vec<Vec3> = points.iter().map(|p| add(&mat_vec(&kr, p), &kt)).collect();
    let in_front = rows.iter().map(|r| r[2] > 0.0).collect();
    Ok(Projection { rows, in_front })
}

/// Per-pixel depth with [`DepthMap::SENTINEL`] marking unsupervised pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub const SENTINEL: f64 = -1.0;

    pub fn empty(height: usize, width: usize) -> Self {
        DepthMap {
            height,
            width,
            values: vec![Self::SENTINEL; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.width + col];
        (v > 0.0).then_some(v)
    }

    pub fn supervised(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// Nearest-depth pooling over `stride×stride` blocks. Partial blocks at
    /// the right/bottom edges are pooled over what exists.
    pub fn min_pool(&self, stride: usize) -> DepthMap {
        assert!(stride > 0);
        let (h, w) = (self.height.div_ceil(stride), self.width.div_ceil(stride));
        let mut out = DepthMap::empty(h, w);
        for row in 0..self.height {
            for col in 0..self.width {
                if let Some(d) = self.get(row, col) {
                    let slot = &mut out.values[(row / stride) * w + col / stride];
                    if *slot < 0.0 || d < *slot {
                        *slot = d;
                    }
                }
            }
        }
        out
    }

    /// Keeps the nearer depth of `self` and `other` per pixel.
    pub fn merge_min(&self, other: &DepthMap) -> DepthMap {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| match (a > 0.0, b > 0.0) {
                (true, true) => a.min(b),
                (true, false) => a,
                (false, true) => b,
                (false, false) => Self::SENTINEL,
            })
            .collect();
        DepthMap {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub written: usize,
    pub out_of_bounds: usize,
    pub behind_camera: usize,
}

/// Nearest-surface rasterization of projected rows at floor-pixel resolution.
pub fn rasterize_depth_map(projected: &[Vec3], image_size: (usize, usize)) -> (DepthMap, RasterStats) {
    let (h, w) = image_size;
    let mut map = DepthMap::empty(h, w);
    let mut stats = RasterStats::default();
    for r in projected {
        let d = r[2];
        if !(d > 0.0) {
            stats.behind_camera += 1;
            continue;
        }
        let (u, v) = (r[0] / d, r[1] / d);
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            stats.out_of_bounds += 1;
            continue;
        }
        let slot = &mut map.values[v.floor() as usize * w + u.floor() as usize];
        if *slot < 0.0 || d < *slot {
            *slot = d;
        }
        stats.written += 1;
    }
    (map, stats)
}

/// `(u, v, d)` samples over a feature-map lattice × depth bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumGrid {
    pub feature_size: (usize, usize),
    pub depths: Vec<f64>,
    /// Ordered depth-bin major, then row, then column, matching the
    /// `C_D×H×W` layout of depth distributions.
    pub samples: Vec<Vec3>,
}

impl FrustumGrid {
    /// Feature pixel `(row, col)` sits at image coordinates spread evenly
    /// over `[0, W_img − 1] × [0, H_img − 1]`.
    pub fn lattice(feature_size: (usize, usize), image_size: (usize, usize), depths: &[f64]) -> Result<Self> {
        let (fh, fw) = feature_size;
        if fh == 0 || fw == 0 {
            return Err(Error::Invalid("feature size must be positive".into()));
        }
        if depths.is_empty() || depths.windows(2).any(|w| !(w[1] > w[0])) || !(depths[0] > 0.0) {
            return Err(Error::Invalid("depth bins must be positive and strictly increasing".into()));
        }
        let spread = |n: usize, extent: usize| {
            move |i: usize| {
                if n == 1 {
                    0.0
                } else {
                    i as f64 * (extent as f64 - 1.0) / (n as f64 - 1.0)
                }
            }
        };
        let (us, vs) = (spread(fw, image_size.1), spread(fh, image_size.0));
        let mut samples = Vec::with_capacity(depths.len() * fh * fw);
        for &d in depths {
            for row in 0..fh {
                for col in 0..fw {
                    samples.push([us(col), vs(row), d]);
                }
            }
        }
        Ok(FrustumGrid {
            feature_size,
            depths: depths.to_vec(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Inverse of [`project_points`] for `(u, v, d)` samples.
pub fn unproject_frustum(rig: &CameraRig, frustum: &FrustumGrid) -> Result<Vec<Vec3>> {
    unproject_samples(rig, &frustum.samples)
}

pub fn unproject_samples(rig: &CameraRig, samples: &[Vec3]) -> Result<Vec<Vec3>> {
    let k_inv = inverse(&rig.intrinsics).ok_or(Error::Singular("camera intrinsics"))?;
    let r_t = transpose(&rig.rotation);
    let back = mat_mul(&r_t, &k_inv);
    let off = mat_vec(&r_t, &rig.translation);
    Ok(samples
        .iter()
        .map(|&[u, v, d]| sub(&mat_vec(&back, &[u * d, v * d, d]), &off))
        .collect())
}
