//! Kolmogorov–Arnold blocks and the camera-aware depth net.
//!
//! Per camera, the flattened camera parameters go through a KAN stack whose
//! sigmoid output gates the backbone feature channels (SE-style); a 1×1
//! convolution then splits the gated features into depth logits and context
//! features.

mod layer;
mod spline;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layer::{shortcut_activation, shortcut_activation_derivative, KanLayer, KanStack};
pub use spline::{BSplineBasis, BasisEval};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::CameraRig;
use crate::io;
use crate::nnprims::{conv_pointwise, se_excite, sigmoid, Tensor};

pub const CAMERA_VECTOR_LEN: usize = 27;
const PAD_SLOTS: std::ops::Range<usize> = 21..27;

/// Divisors applied to each parameter group before it enters the KAN.
///
/// The defaults map rotation entries into `[-0.5, 0.5]` and typical
/// translations and focal lengths well inside the spline domain, away from
/// the clamp at `±1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedNorm {
    pub rotation: f64,
    pub translation: f64,
    pub intrinsics: f64,
}

impl Default for EmbedNorm {
    fn default() -> Self {
        EmbedNorm {
            rotation: 2.0,
            translation: 20.0,
            intrinsics: 2000.0,
        }
    }
}

/// Flattened camera parameters: rotation (9, row-major), translation (3),
/// intrinsics (9, row-major), then 6 reserved zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParamVector {
    pub values: [f64; CAMERA_VECTOR_LEN],
    pub norm: EmbedNorm,
}

impl CameraParamVector {
    pub fn padding(&self) -> &[f64] {
        &self.values[PAD_SLOTS]
    }
}

/// Raw (unnormalised) slot layout of a rig.
pub fn flatten_camera_params(rig: &CameraRig) -> [f64; CAMERA_VECTOR_LEN] {
    let mut v = [0.0; CAMERA_VECTOR_LEN];
    v[..9].copy_from_slice(rig.rotation.as_flattened());
    v[9..12].copy_from_slice(&rig.translation);
    v[12..21].copy_from_slice(rig.intrinsics.as_flattened());
    v
}

pub fn embed_camera_params(rig: &CameraRig, norm: EmbedNorm) -> CameraParamVector {
    let mut values = flatten_camera_params(rig);
    values[..9].iter_mut().for_each(|v| *v /= norm.rotation);
    values[9..12].iter_mut().for_each(|v| *v /= norm.translation);
    values[12..21].iter_mut().for_each(|v| *v /= norm.intrinsics);
    CameraParamVector { values, norm }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    /// Backbone channels `C_F`; also the KAN output width.
    pub feature_channels: usize,
    pub depth_bins: usize,
    pub context_channels: usize,
    pub kan_hidden: Vec<usize>,
    pub grid_intervals: usize,
    pub spline_degree: usize,
    pub embed: EmbedNorm,
    pub init_scale: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            feature_channels: 512,
            depth_bins: 112,
            context_channels: 80,
            kan_hidden: vec![64],
            grid_intervals: 8,
            spline_degree: 3,
            embed: EmbedNorm::default(),
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNetParams {
    pub kan: KanStack,
    pub embed: EmbedNorm,
    /// `(C_D + C_C) × C_F`; the first `C_D` rows produce depth logits.
    pub conv_kernel: Tensor,
    pub conv_bias: Vec<f64>,
    pub depth_bins: usize,
    pub context_channels: usize,
}

impl DepthNetParams {
    pub fn new(kan: KanStack, embed: EmbedNorm, conv_kernel: Tensor, conv_bias: Vec<f64>, depth_bins: usize, context_channels: usize) -> Result<Self> {
        if kan.in_dim() != CAMERA_VECTOR_LEN {
            return Err(Error::shape("DepthNetParams", CAMERA_VECTOR_LEN, kan.in_dim()));
        }
        let out = depth_bins + context_channels;
        if conv_kernel.shape() != [out, kan.out_dim()] {
            return Err(Error::shape(
                "DepthNetParams",
                format!("[{out}, {}] kernel", kan.out_dim()),
                format!("{:?}", conv_kernel.shape()),
            ));
        }
        if conv_bias.len() != out {
            return Err(Error::shape("DepthNetParams", out, conv_bias.len()));
        }
        Ok(DepthNetParams {
            kan,
            embed,
            conv_kernel,
            conv_bias,
            depth_bins,
            context_channels,
        })
    }

    /// Seeded initialisation.
    pub fn random(cfg: &DepthNetConfig, seed: u64) -> Result<Self> {
        let basis = BSplineBasis::uniform(cfg.grid_intervals, cfg.spline_degree, -1.0, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![CAMERA_VECTOR_LEN];
        widths.extend(&cfg.kan_hidden);
        widths.push(cfg.feature_channels);
        let layers = widths
            .windows(2)
            .map(|w| KanLayer::random(w[0], w[1], basis.clone(), cfg.init_scale, &mut rng))
            .collect();
        let out = cfg.depth_bins + cfg.context_channels;
        let s = 1.0 / (cfg.feature_channels as f64).sqrt();
        use rand::Rng;
        let kernel = Tensor::from_fn(&[out, cfg.feature_channels], |_| rng.random_range(-s..s));
        let bias = (0..out).map(|_| rng.random_range(-0.1..0.1)).collect();
        DepthNetParams::new(KanStack::new(layers)?, cfg.embed, kernel, bias, cfg.depth_bins, cfg.context_channels)
    }

    pub fn feature_channels(&self) -> usize {
        self.kan.out_dim()
    }

    pub fn to_blocks(&self) -> BTreeMap<String, Tensor> {
        let mut blocks = BTreeMap::new();
        for (i, l) in self.kan.layers.iter().enumerate() {
            let nb = l.basis.n_basis();
            blocks.insert(
                format!("kan.{i}.spline"),
                Tensor::from_vec(&[l.out_dim, l.in_dim, nb], l.spline_coeffs.clone()).unwrap(),
            );
            blocks.insert(
                format!("kan.{i}.shortcut"),
                Tensor::from_vec(&[l.out_dim, l.in_dim], l.shortcut_weights.clone()).unwrap(),
            );
        }
        blocks.insert("depth_conv.weight".into(), self.conv_kernel.clone());
        blocks.insert(
            "depth_conv.bias".into(),
            Tensor::from_vec(&[self.conv_bias.len()], self.conv_bias.clone()).unwrap(),
        );
        blocks
    }

    pub fn from_blocks(blocks: &BTreeMap<String, Tensor>, meta: &DepthNetManifest) -> Result<Self> {
        let basis = BSplineBasis::from_knots(meta.knots.clone(), meta.spline_degree)?;
        let get = |name: &str| {
            blocks
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter block `{name}`")))
        };
        let mut layers = Vec::with_capacity(meta.kan_layers);
        for i in 0..meta.kan_layers {
            let spline = get(&format!("kan.{i}.spline"))?;
            let shortcut = get(&format!("kan.{i}.shortcut"))?;
            if spline.rank() != 3 || spline.shape()[2] != basis.n_basis() {
                return Err(Error::shape("kan spline block", basis.n_basis(), format!("{:?}", spline.shape())));
            }
            let (out, inp) = (spline.shape()[0], spline.shape()[1]);
            layers.push(KanLayer::new(inp, out, basis.clone(), spline.data().to_vec(), shortcut.data().to_vec())?);
        }
        DepthNetParams::new(
            KanStack::new(layers)?,
            meta.embed,
            get("depth_conv.weight")?.clone(),
            get("depth_conv.bias")?.data().to_vec(),
            meta.depth_bins,
            meta.context_channels,
        )
    }

    pub fn manifest(&self) -> DepthNetManifest {
        let basis = &self.kan.layers[0].basis;
        DepthNetManifest {
            knots: basis.knots().to_vec(),
            spline_degree: basis.degree(),
            kan_layers: self.kan.layers.len(),
            depth_bins: self.depth_bins,
            context_channels: self.context_channels,
            embed: self.embed,
        }
    }

    /// Writes `manifest.json` plus one TNSR file per parameter block.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_param_blocks(dir, &self.to_blocks(), &self.manifest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (blocks, meta) = load_param_blocks::<DepthNetManifest>(dir)?;
        DepthNetParams::from_blocks(&blocks, &meta)
    }
}

/// Basis configuration and shapes stored next to the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthNetManifest {
    pub knots: Vec<f64>,
    pub spline_degree: usize,
    pub kan_layers: usize,
    pub depth_bins: usize,
    pub context_channels: usize,
    pub embed: EmbedNorm,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<M> {
    config: M,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// Saves named tensors as `<name>.tnsr` with a `manifest.json` index.
pub fn save_param_blocks<M: Serialize>(dir: &Path, blocks: &BTreeMap<String, Tensor>, config: &M) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, t) in blocks {
        let file = format!("{name}.tnsr");
        io::write_tensor(&dir.join(&file), t)?;
        entries.push(BlockEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    io::write_json(&dir.join("manifest.json"), &Manifest { config, blocks: entries })
}

pub fn load_param_blocks<M: serde::de::DeserializeOwned>(dir: &Path) -> Result<(BTreeMap<String, Tensor>, M)> {
    let manifest: Manifest<M> = io::read_json(&dir.join("manifest.json"))?;
    let mut blocks = BTreeMap::new();
    for entry in manifest.blocks {
        let path = dir.join(&entry.file);
        let t = io::read_tensor(&path)?;
        if t.shape() != entry.shape {
            return Err(Error::format(path, format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape)));
        }
        blocks.insert(entry.name, t);
    }
    Ok((blocks, manifest.config))
}

/// Depth logits, context features and SE gates, one entry per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNetOutputs {
    pub depth_logits: Vec<Tensor>,
    pub context: Vec<Tensor>,
    pub gates: Vec<Vec<f64>>,
}

/// Sigmoid of the KAN response to one camera vector.
pub fn camera_gates(cam: &[f64], params: &DepthNetParams) -> Result<Vec<f64>> {
    Ok(params.kan.forward(cam)?.into_iter().map(sigmoid).collect())
}

/// Forward pass for one camera from its embedded parameter vector.
pub fn camera_forward(features: &Tensor, cam: &[f64], params: &DepthNetParams) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let gates = camera_gates(cam, params)?;
    let (logits, context) = gated_split(features, &gates, params)?;
    Ok((logits, context, gates))
}

/// SE gating followed by the 1×1 conv split.
pub fn gated_split(features: &Tensor, gates: &[f64], params: &DepthNetParams) -> Result<(Tensor, Tensor)> {
    features.expect_rank("depthnet_forward", 3)?;
    if features.shape()[0] != params.feature_channels() {
        return Err(Error::shape("depthnet_forward", params.feature_channels(), features.shape()[0]));
    }
    let excited = se_excite(features, gates)?;
    let out = conv_pointwise(&excited, &params.conv_kernel, &params.conv_bias)?;
    let (h, w) = (features.shape()[1], features.shape()[2]);
    let split = params.depth_bins * h * w;
    let data = out.into_data();
    let logits = Tensor::from_vec(&[params.depth_bins, h, w], data[..split].to_vec())?;
    let context = Tensor::from_vec(&[params.context_channels, h, w], data[split..].to_vec())?;
    Ok((logits, context))
}

/// Runs the depth net for 1–6 cameras. Cameras are evaluated independently;
/// the result does not depend on evaluation order.
pub fn depthnet_forward(features: &[Tensor], rigs: &[CameraRig], params: &DepthNetParams) -> Result<DepthNetOutputs> {
    if features.is_empty() || features.len() > 6 {
        return Err(Error::Invalid(format!("depth net takes 1 to 6 cameras, got {}", features.len())));
    }
    if features.len() != rigs.len() {
        return Err(Error::shape("depthnet_forward", format!("{} rigs", features.len()), rigs.len()));
    }
    let per_cam = exec::map_range(features.len(), |i| {
        let cam = embed_camera_params(&rigs[i], params.embed);
        camera_forward(&features[i], &cam.values, params)
    });
    let mut out = DepthNetOutputs {
        depth_logits: Vec::new(),
        context: Vec::new(),
        gates: Vec::new(),
    };
    for r in per_cam {
        let (l, c, g) = r?;
        out.depth_logits.push(l);
        out.context.push(c);
        out.gates.push(g);
    }
    Ok(out)
}

/// Analytic Jacobian of the flattened `[logits; context]` output of one
/// camera with respect to `[features (C_F·H·W); camera vector (27)]`.
pub fn camera_jacobian(features: &Tensor, cam: &[f64], params: &DepthNetParams) -> Result<Tensor> {
    let cf = params.feature_channels();
    features.expect_rank("camera_jacobian", 3)?;
    if features.shape()[0] != cf {
        return Err(Error::shape("camera_jacobian", cf, features.shape()[0]));
    }
    let hw = features.shape()[1] * features.shape()[2];
    let gates = camera_gates(cam, params)?;
    let kan_j = params.kan.jacobian(cam)?;
    let cout = params.depth_bins + params.context_channels;
    let n_in = cf * hw + CAMERA_VECTOR_LEN;
    let (w, f) = (params.conv_kernel.data(), features.data());
    let mut jac = Tensor::zeros(&[cout * hw, n_in]);
    let dgate: Vec<f64> = gates.iter().map(|g| g * (1.0 - g)).collect();
    for o in 0..cout {
        for p in 0..hw {
            let row = &mut jac.data_mut()[(o * hw + p) * n_in..(o * hw + p + 1) * n_in];
            for i in 0..cf {
                let wi = w[o * cf + i];
                row[i * hw + p] = wi * gates[i];
                let scale = wi * f[i * hw + p] * dgate[i];
                if scale != 0.0 {
                    for m in 0..CAMERA_VECTOR_LEN {
                        row[cf * hw + m] += scale * kan_j.data()[i * CAMERA_VECTOR_LEN + m];
                    }
                }
            }
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraRig, IDENTITY};
    use crate::nnprims::{finite_diff_jacobian, max_relative_error, softmax_over_depth, DEFAULT_STEP};
    use rand::Rng;

    fn toy_config() -> DepthNetConfig {
        DepthNetConfig {
            feature_channels: 8,
            depth_bins: 4,
            context_channels: 3,
            kan_hidden: vec![6],
            ..DepthNetConfig::default()
        }
    }

    #[test]
    fn identity_rig_embedding() {
        let rig = CameraRig::identity((4, 4));
        let norm = EmbedNorm::default();
        let v = embed_camera_params(&rig, norm);
        let eye = IDENTITY.as_flattened().to_vec();
        let rot: Vec<f64> = eye.iter().map(|x| x / norm.rotation).collect();
        let k: Vec<f64> = eye.iter().map(|x| x / norm.intrinsics).collect();
        assert_eq!(&v.values[..9], &rot[..]);
        assert_eq!(&v.values[9..12], &[0.0; 3]);
        assert_eq!(&v.values[12..21], &k[..]);
        assert_eq!(v.padding(), &[0.0; 6]);
        assert_eq!(v, embed_camera_params(&rig.clone(), norm));
    }

    #[test]
    fn intrinsic_perturbation_touches_one_slot() {
        let rig = CameraRig::looking_along(0.2, [0.0, 0.0, 1.5], 1.1, (64, 128)).unwrap();
        let base = flatten_camera_params(&rig);
        for (r, c) in [(0, 0), (0, 2), (1, 1), (1, 2)] {
            let mut moved = rig.clone();
            moved.intrinsics[r][c] += 3.0;
            let changed: Vec<usize> = flatten_camera_params(&moved)
                .iter()
                .zip(&base)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(changed, vec![12 + 3 * r + c]);
        }
    }

    #[test]
    fn zero_features_give_bias_only_logits() {
        let cfg = toy_config();
        let mut params = DepthNetParams::random(&cfg, 1).unwrap();
        params.conv_bias.iter_mut().for_each(|b| *b = 0.25);
        let feats = Tensor::zeros(&[8, 2, 3]);
        let rig = CameraRig::identity((32, 48));
        let out = depthnet_forward(&[feats], &[rig], &params).unwrap();
        assert!(out.context[0].data().iter().all(|&v| v == 0.25));
        let p = softmax_over_depth(&out.depth_logits[0]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gates_in_unit_interval_and_saturation() {
        let cfg = toy_config();
        let mut params = DepthNetParams::random(&cfg, 2).unwrap();
        let rig = CameraRig::looking_along(0.0, [0.0, 0.0, 1.5], 1.1, (64, 128)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::from_fn(&[8, 2, 2], |_| rng.random_range(-1.0..1.0));
        let out = depthnet_forward(&[feats.clone()], &[rig.clone()], &params).unwrap();
        assert!(out.gates[0].iter().all(|&g| g > 0.0 && g < 1.0));

        // Drive every KAN output far positive so the gates saturate at 1.
        let last = params.kan.layers.last_mut().unwrap();
        last.spline_coeffs.iter_mut().for_each(|c| *c = 10.0);
        let out = depthnet_forward(&[feats.clone()], &[rig], &params).unwrap();
        assert!(out.gates[0].iter().all(|&g| g == 1.0));
        let plain = conv_pointwise(&feats, &params.conv_kernel, &params.conv_bias).unwrap();
        let split = 4 * 4;
        assert_eq!(out.depth_logits[0].data(), &plain.data()[..split]);
        assert_eq!(out.context[0].data(), &plain.data()[split..]);
    }

    #[test]
    fn camera_count_checked() {
        let params = DepthNetParams::random(&toy_config(), 0).unwrap();
        assert!(depthnet_forward(&[], &[], &params).is_err());
        let f = Tensor::zeros(&[8, 1, 1]);
        let r = CameraRig::identity((4, 4));
        assert!(depthnet_forward(&vec![f; 7], &vec![r; 7], &params).is_err());
    }

    #[test]
    fn camera_jacobian_matches_finite_differences() {
        let params = DepthNetParams::random(&toy_config(), 4).unwrap();
        let rig = CameraRig::looking_along(0.7, [0.5, 0.0, 1.5], 1.1, (64, 128)).unwrap();
        let cam = embed_camera_params(&rig, params.embed).values;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = Tensor::from_fn(&[8, 1, 3], |_| rng.random_range(-1.0..1.0));
        let n_feat = feats.len();
        let f = |x: &[f64]| {
            let fe = Tensor::from_vec(&[8, 1, 3], x[..n_feat].to_vec()).unwrap();
            let (l, c, _) = camera_forward(&fe, &x[n_feat..], &params).unwrap();
            l.data().iter().chain(c.data()).copied().collect()
        };
        let x: Vec<f64> = feats.data().iter().chain(&cam).copied().collect();
        let fd = finite_diff_jacobian(f, &x, DEFAULT_STEP).unwrap();
        let an = camera_jacobian(&feats, &cam, &params).unwrap();
        assert!(max_relative_error(&an, &fd, 1e-3) < 1e-5);
    }

    #[test]
    fn params_round_trip_through_manifest() {
        let params = DepthNetParams::random(&toy_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        params.save(dir.path()).unwrap();
        assert_eq!(DepthNetParams::load(dir.path()).unwrap(), params);
    }
}
