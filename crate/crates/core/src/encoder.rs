//! Conv backbone, projection head, ROI pooling and the EMA shadow encoder.
//!
//! Parameters live in a flat list of tensors:
//!
//! | index | tensor                      |
//! |-------|-----------------------------|
//! | 0, 1  | conv1 weight `[16,3,3,3]`, bias |
//! | 2, 3  | conv2 weight `[32,16,3,3]`, bias |
//! | 4, 5  | conv3 weight `[64,32,3,3]`, bias |
//! | 6, 7  | head fc1 weight `[hidden,64]`, bias |
//! | 8, 9  | head fc2 weight `[d_proj,hidden]`, bias |
//!
//! Indices `0..6` are the backbone, `6..10` the projection head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthdata::{crop_resize, PatchBox, SynthImage};
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-12;
pub const BACKBONE_TENSORS: usize = 6;
const CONV: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_d_proj")]
    pub d_proj: usize,
}

fn default_input_size() -> usize {
    32
}
fn default_in_channels() -> usize {
    3
}
fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_hidden() -> usize {
    64
}
fn default_d_proj() -> usize {
    32
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: default_input_size(),
            in_channels: default_in_channels(),
            widths: default_widths(),
            hidden: default_hidden(),
            d_proj: default_d_proj(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 {
            return Err(Error::Config("backbone needs exactly 3 conv widths".into()));
        }
        if self.input_size % 8 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.d_proj == 0 || self.hidden == 0 || self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let [w1, w2, w3] = [self.widths[0], self.widths[1], self.widths[2]];
        vec![
            vec![w1, self.in_channels, 3, 3],
            vec![w1],
            vec![w2, w1, 3, 3],
            vec![w2],
            vec![w3, w2, 3, 3],
            vec![w3],
            vec![self.hidden, w3],
            vec![self.hidden],
            vec![self.d_proj, self.hidden],
            vec![self.d_proj],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// Kaiming-uniform (fan-in) weights, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0xE4C0]);
        let tensors = config
            .shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("shape/product agree")
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn check_same_shapes(&self, other: &EncoderParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                op: "encoder params",
                left: vec![self.tensors.len()],
                right: vec![other.tensors.len()],
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "encoder params",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Raw little-endian bytes of the backbone tensors, for freeze checks.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.tensors[..BACKBONE_TENSORS]
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Put every tensor on `g`, as trainable params or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundEncoder {
            vars,
            config: self.config.clone(),
        }
    }
}

/// Encoder parameters placed on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub vars: Vec<Var>,
    pub config: EncoderConfig,
}

/// Output of the backbone on one image.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Last conv activation `[d_feat, H', W']`.
    pub u: Var,
    /// Spatial mean of `u`.
    pub v: Var,
}

impl BoundEncoder {
    pub fn image_var(g: &mut Graph, image: &SynthImage) -> Var {
        g.constant(
            Tensor::new(
                vec![image.channels, image.size, image.size],
                image.pixels.clone(),
            )
            .expect("image buffer matches its shape"),
        )
    }

    /// Backbone forward. Accepts any input side divisible by 8; the model
    /// input size is enforced by [`BoundEncoder::encode`].
    pub fn backbone(&self, g: &mut Graph, x: Var) -> Result<Encoded> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels || shape[1] % 8 != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: shape,
                right: vec![self.config.in_channels, self.config.input_size, self.config.input_size],
            });
        }
        let mut h = x;
        for layer in 0..3 {
            let c = g.conv2d(h, self.vars[2 * layer], self.vars[2 * layer + 1], CONV)?;
            h = g.relu(c);
        }
        let v = g.mean_pool(h)?;
        Ok(Encoded { u: h, v })
    }

    pub fn encode(&self, g: &mut Graph, image: &SynthImage) -> Result<Encoded> {
        if image.size != self.config.input_size || image.channels != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![image.channels, image.size, image.size],
                right: vec![self.config.in_channels, self.config.input_size, self.config.input_size],
            });
        }
        let x = Self::image_var(g, image);
        self.backbone(g, x)
    }

    /// `g_γ(v)` without normalisation.
    pub fn head(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let h = g.matvec(self.vars[6], v)?;
        let h = g.add(h, self.vars[7])?;
        let h = g.relu(h);
        let o = g.matvec(self.vars[8], h)?;
        g.add(o, self.vars[9])
    }

    /// `z = normalize(g_γ(v))`.
    pub fn project(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let o = self.head(g, v)?;
        g.l2_normalize(o, NORM_EPS)
    }

    /// Average `u` over the cells a box covers, then project with the same
    /// head as [`BoundEncoder::project`].
    pub fn roi_pool_project(&self, g: &mut Graph, u: Var, bbox: &PatchBox) -> Result<Var> {
        let s = g.value(u).shape().to_vec();
        let cells = roi_cells(bbox, s[1], s[2])?;
        let pooled = g.roi_pool(u, cells)?;
        self.project(g, pooled)
    }

    /// `project(encode(crop_resize(image, box, out_size)).v)`.
    pub fn embed_patch(
        &self,
        g: &mut Graph,
        image: &SynthImage,
        bbox: &PatchBox,
        out_size: usize,
    ) -> Result<Var> {
        let crop = crop_resize(image, bbox, out_size);
        let x = Self::image_var(g, &crop);
        let enc = self.backbone(g, x)?;
        self.project(g, enc.v)
    }
}

/// Flat indices (`row * w + col`) of the feature cells at least half covered
/// by `bbox`.
pub fn roi_cells(bbox: &PatchBox, h: usize, w: usize) -> Result<Vec<usize>> {
    if !bbox.is_valid() {
        return Err(Error::DegenerateBox(format!("{bbox:?} is not inside the unit square")));
    }
    let (ch, cw) = (1.0 / h as f64, 1.0 / w as f64);
    let mut cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let cell = PatchBox {
                cx: (c as f64 + 0.5) * cw,
                cy: (r as f64 + 0.5) * ch,
                w: cw,
                h: ch,
            };
            // small slack so exact half-covers survive rounding
            if bbox.overlap(&cell) >= 0.5 * ch * cw - 1e-12 {
                cells.push(r * w + c);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::DegenerateBox(format!(
            "{bbox:?} covers no {h}×{w} feature cell by half"
        )));
    }
    Ok(cells)
}

/// Exponential moving average of the online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaEncoder {
    pub shadow: EncoderParams,
    pub momentum: f64,
}

impl EmaEncoder {
    pub fn new(online: &EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            shadow: online.clone(),
            momentum,
        })
    }

    /// `shadow ← m·shadow + (1 − m)·online`.
    pub fn update(&mut self, online: &EncoderParams) -> Result<()> {
        self.shadow.check_same_shapes(online)?;
        let m = self.momentum;
        for (s, o) in self.shadow.tensors.iter_mut().zip(&online.tensors) {
            for (sv, ov) in s.data_mut().iter_mut().zip(o.data()) {
                *sv = m * *sv + (1.0 - m) * ov;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`EmaEncoder::update`].
pub fn ema_update(online: &EncoderParams, ema: &mut EmaEncoder) -> Result<()> {
    ema.update(online)
}

/// Run the backbone + head once without keeping gradients; returns `(v, z)`.
pub fn embed_image(params: &EncoderParams, image: &SynthImage) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let enc = params.bind(&mut g, false);
    let e = enc.encode(&mut g, image)?;
    let z = enc.project(&mut g, e.v)?;
    Ok((g.value(e.v).data().to_vec(), g.value(z).data().to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub encoder: EncoderConfig,
    pub shapes: Vec<Vec<usize>>,
    pub d_proj: usize,
    pub seed: u64,
    pub step: u64,
}

const CHECKPOINT_FORMAT: &str = "ltcl-checkpoint-v1";

/// Header length (u64 LE) + JSON header + f64 LE parameter blob.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        encoder: params.config.clone(),
        shapes: params.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        d_proj: params.config.d_proj,
        seed,
        step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in &params.tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint. With `expect = Some(cfg)` the stored layer shapes
/// must match `cfg` exactly.
pub fn load_checkpoint(
    path: &Path,
    expect: Option<&EncoderConfig>,
) -> Result<(CheckpointHeader, EncoderParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    if hlen > 1 << 24 {
        return Err(Error::Format(format!("implausible header length {hlen}")));
    }
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {}", header.format)));
    }
    if header.shapes != header.encoder.shapes() {
        return Err(Error::Format("checkpoint shapes disagree with its encoder config".into()));
    }
    if let Some(cfg) = expect {
        let want = cfg.shapes();
        if let Some((a, b)) = header.shapes.iter().zip(&want).find(|(a, b)| a != b) {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                left: a.clone(),
                right: b.clone(),
            });
        }
        if header.shapes.len() != want.len() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                left: vec![header.shapes.len()],
                right: vec![want.len()],
            });
        }
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Format(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            total * 8
        )));
    }
    let mut vals = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = header
        .shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), vals.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let params = EncoderParams {
        config: header.encoder.clone(),
        tensors,
    };
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::tensor::dot;

    fn image(seed: u64, size: usize) -> SynthImage {
        let mut rng = seed::rng(seed, &[]);
        let px = (0..3 * size * size)
            .map(|_| rng.gen_range(0.0f32..1.0) as f64)
            .collect();
        SynthImage::from_pixels(px, 3, size, 0)
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_size: 8,
            in_channels: 3,
            widths: vec![3, 4, 5],
            hidden: 6,
            d_proj: 4,
        }
    }

    #[test]
    fn zero_image_with_zero_bias_pools_to_zero() {
        let p = EncoderParams::init(&EncoderConfig::default(), 1).unwrap();
        let img = SynthImage::from_pixels(vec![0.0; 3 * 32 * 32], 3, 32, 0);
        let mut g = Graph::new();
        let enc = p.bind(&mut g, false);
        let e = enc.encode(&mut g, &img).unwrap();
        assert!(g.value(e.v).data().iter().all(|&x| x == 0.0));
        assert_eq!(g.value(e.u).shape(), &[64, 4, 4]);
    }

    #[test]
    fn pooled_vector_is_spatial_mean() {
        let p = EncoderParams::init(&EncoderConfig::default(), 2).unwrap();
        let mut g = Graph::new();
        let enc = p.bind(&mut g, false);
        let e = enc.encode(&mut g, &image(3, 32)).unwrap();
        let u = g.value(e.u).data();
        for (c, &vc) in g.value(e.v).data().iter().enumerate() {
            let mut s = 0.0;
            for k in 0..16 {
                s += u[c * 16 + k];
            }
            assert!((s / 16.0 - vc).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_input_size_is_structural_error() {
        let p = EncoderParams::init(&EncoderConfig::default(), 2).unwrap();
        let mut g = Graph::new();
        let enc = p.bind(&mut g, false);
        assert!(matches!(
            enc.encode(&mut g, &image(1, 16)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn per_sample_purity_and_determinism() {
        let p = EncoderParams::init(&EncoderConfig::default(), 4).unwrap();
        let (a, b) = (image(10, 32), image(11, 32));
        let za = embed_image(&p, &a).unwrap();
        let zb = embed_image(&p, &b).unwrap();
        assert_eq!(embed_image(&p, &a).unwrap(), za);
        assert_eq!(embed_image(&p, &b).unwrap(), zb);
        assert_ne!(za, zb);
    }

    #[test]
    fn projection_is_unit_norm() {
        let p = EncoderParams::init(&EncoderConfig::default(), 5).unwrap();
        let mut rng = seed::rng(5, &[1]);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let enc = p.bind(&mut g, false);
            let vv = g.constant(Tensor::vector(v));
            let z = enc.project(&mut g, vv).unwrap();
            let zd = g.value(z).data();
            assert!((dot(zd, zd).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_head_is_scale_invariant() {
        let cfg = EncoderConfig {
            hidden: 64,
            d_proj: 64,
            ..EncoderConfig::default()
        };
        let mut p = EncoderParams::init(&cfg, 0).unwrap();
        let eye: Vec<f64> = (0..64 * 64).map(|i| if i % 65 == 0 { 1.0 } else { 0.0 }).collect();
        p.tensors[6] = Tensor::matrix(64, 64, eye.clone()).unwrap();
        p.tensors[8] = Tensor::matrix(64, 64, eye).unwrap();
        let v: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |v: Vec<f64>| {
            let mut g = Graph::new();
            let enc = p.bind(&mut g, false);
            let vv = g.constant(Tensor::vector(v));
            let z = enc.project(&mut g, vv).unwrap();
            g.value(z).data().to_vec()
        };
        let z1 = run(v.clone());
        let z2 = run(v.iter().map(|x| 2.0 * x).collect());
        for (a, b) in z1.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn project_gradient_matches_finite_differences() {
        let p = EncoderParams::init(&small_cfg(), 6).unwrap();
        let probe: Vec<f64> = (0..4).map(|i| 0.3 * i as f64 - 0.4).collect();
        let mut params = p.tensors[6..].to_vec();
        params.push(Tensor::vector((0..5).map(|i| 0.2 + 0.1 * i as f64).collect()));
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let enc = BoundEncoder {
                vars: vec![v[0]; 6].into_iter().chain(v[..4].iter().copied()).collect(),
                config: small_cfg(),
            };
            let z = enc.project(g, v[4])?;
            let a = g.constant(Tensor::vector(probe.clone()));
            g.dot(a, z)
        };
        assert!(finite_difference_check(f, &params, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn full_box_roi_equals_global_pool() {
        let p = EncoderParams::init(&EncoderConfig::default(), 7).unwrap();
        let mut g = Graph::new();
        let enc = p.bind(&mut g, false);
        let e = enc.encode(&mut g, &image(8, 32)).unwrap();
        let z = enc.project(&mut g, e.v).unwrap();
        let c = enc.roi_pool_project(&mut g, e.u, &PatchBox::FULL).unwrap();
        assert_eq!(g.value(z).data(), g.value(c).data());
    }

    #[test]
    fn roi_cells_enumeration() {
        // box covering exactly the top-left two cells of a 4×4 map
        let b = PatchBox {
            cx: 0.25,
            cy: 0.125,
            w: 0.5,
            h: 0.25,
        };
        assert_eq!(roi_cells(&b, 4, 4).unwrap(), vec![0, 1]);
        let tiny = PatchBox {
            cx: 0.25,
            cy: 0.25,
            w: 0.1,
            h: 0.1,
        };
        assert!(matches!(roi_cells(&tiny, 4, 4), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn roi_pool_is_enumerated_mean_and_constant_maps_give_equal_c() {
        let p = EncoderParams::init(&EncoderConfig::default(), 9).unwrap();
        let mut rng = seed::rng(9, &[]);
        let udata: Vec<f64> = (0..64 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(vec![64, 4, 4], udata.clone()).unwrap());
        let b = PatchBox {
            cx: 0.25,
            cy: 0.125,
            w: 0.5,
            h: 0.25,
        };
        let cells = roi_cells(&b, 4, 4).unwrap();
        let pooled = g.roi_pool(u, cells).unwrap();
        for c in 0..64 {
            let want = (udata[c * 16] + udata[c * 16 + 1]) / 2.0;
            assert!((g.value(pooled).data()[c] - want).abs() < 1e-15);
        }

        let enc = p.bind(&mut g, false);
        let flat: Vec<f64> = (0..64).flat_map(|c| vec![0.1 + c as f64 * 0.01; 16]).collect();
        let uc = g.constant(Tensor::new(vec![64, 4, 4], flat).unwrap());
        let c1 = enc.roi_pool_project(&mut g, uc, &b).unwrap();
        let c2 = enc.roi_pool_project(&mut g, uc, &PatchBox::FULL).unwrap();
        for (a, bb) in g.value(c1).data().iter().zip(g.value(c2).data()) {
            assert!((a - bb).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_boundaries_and_arithmetic() {
        let cfg = small_cfg();
        let online = EncoderParams::init(&cfg, 1).unwrap();
        let mut ema = EmaEncoder::new(&EncoderParams::init(&cfg, 2).unwrap(), 1.0).unwrap();
        let before = ema.shadow.clone();
        ema_update(&online, &mut ema).unwrap();
        assert_eq!(ema.shadow, before);

        ema.momentum = 0.0;
        ema_update(&online, &mut ema).unwrap();
        assert_eq!(ema.shadow, online);

        let mut zero = online.clone();
        let mut ones = online.clone();
        for t in &mut zero.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for t in &mut ones.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut ema = EmaEncoder::new(&zero, 0.999).unwrap();
        ema.update(&ones).unwrap();
        for t in &ema.shadow.tensors {
            assert!(t.data().iter().all(|&v| (v - 0.001).abs() < 1e-15));
        }
        assert!(EmaEncoder::new(&zero, 1.5).is_err());
    }

    #[test]
    fn ema_geometric_series() {
        let cfg = small_cfg();
        let s0 = EncoderParams::init(&cfg, 3).unwrap();
        let w = EncoderParams::init(&cfg, 4).unwrap();
        let m: f64 = 0.9;
        let mut ema = EmaEncoder::new(&s0, m).unwrap();
        let steps = 37;
        for _ in 0..steps {
            ema.update(&w).unwrap();
        }
        let mt = m.powi(steps);
        for ((s, a), b) in ema.shadow.tensors.iter().zip(&s0.tensors).zip(&w.tensors) {
            for ((sv, av), bv) in s.data().iter().zip(a.data()).zip(b.data()) {
                assert!((sv - (mt * av + (1.0 - mt) * bv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let a = EncoderParams::init(&small_cfg(), 0).unwrap();
        let b = EncoderParams::init(&EncoderConfig::default(), 0).unwrap();
        let mut ema = EmaEncoder::new(&a, 0.5).unwrap();
        assert!(matches!(ema.update(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn embed_patch_identity_crop_and_gradient() {
        let cfg = small_cfg();
        let mut p = EncoderParams::init(&cfg, 11).unwrap();
        // nonzero biases keep relu pre-activations off the kink
        for t in p.tensors.iter_mut().filter(|t| t.shape().len() == 1) {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.05 + 0.013 * i as f64;
            }
        }
        let img = image(12, 8);
        let mut g = Graph::new();
        let enc = p.bind(&mut g, false);
        let s = enc.embed_patch(&mut g, &img, &PatchBox::FULL, 8).unwrap();
        let e = enc.encode(&mut g, &img).unwrap();
        let z = enc.project(&mut g, e.v).unwrap();
        assert_eq!(g.value(s).data(), g.value(z).data());
        let sd = g.value(s).data();
        assert!((dot(sd, sd).sqrt() - 1.0).abs() < 1e-9);

        let b = PatchBox {
            cx: 0.4,
            cy: 0.55,
            w: 0.6,
            h: 0.7,
        };
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let enc = BoundEncoder {
                vars: v.to_vec(),
                config: small_cfg(),
            };
            let s = enc.embed_patch(g, &img, &b, 8)?;
            let probe = g.constant(Tensor::vector(vec![0.5, -0.3, 0.8, 0.1]));
            g.dot(probe, s)
        };
        let err = finite_difference_check(f, &p.tensors, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let p = EncoderParams::init(&EncoderConfig::default(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &p, 13, 77).unwrap();
        let (h, back) = load_checkpoint(&path, Some(&EncoderConfig::default())).unwrap();
        assert_eq!(back, p);
        assert_eq!((h.seed, h.step, h.d_proj), (13, 77, 32));
        let other = EncoderConfig {
            d_proj: 16,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
