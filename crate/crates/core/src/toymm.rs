//! Procedural stand-in for a 3D morphable model pipeline.
//!
//! [`render_synthetic`] paints a face-like image from a low-dimensional
//! parameter vector, and [`realism_transform`] is the hidden deterministic
//! mapping that defines the "real" target domain. Because the transform is a
//! known function, the quality of a learned synthetic-to-real mapping can be
//! scored exactly on held-out inputs.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_ID_DIM: usize = 8;
pub const DEFAULT_EX_DIM: usize = 2;

/// Latent parameters of one rendered face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphParams {
    /// PCA-like identity coefficients, shared by all images of one identity.
    pub identity_coeffs: Vec<f64>,
    pub expression_coeffs: Vec<f64>,
    /// (yaw-proxy shear in [-1,1], in-plane rotation in radians)
    pub pose: (f64, f64),
    /// (light direction angle in radians, strength in [0,1])
    pub lighting: (f64, f64),
    pub identity_label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Synthetic,
    Generated,
    Real,
}

/// A batch of images with a domain tag. Pixels are `[B, C, H, W]` in [0,1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub domain: DomainTag,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn from_images(images: &[Array3<f64>], domain: DomainTag, labels: Vec<u32>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image list".into()));
        }
        if labels.len() != images.len() {
            return Err(Error::InvalidArgument("labels length must equal batch size".into()));
        }
        let (c, h, w) = images[0].dim();
        let mut pixels = Array4::<f64>::zeros((images.len(), c, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (c, h, w) {
                return Err(Error::Structure("inconsistent image shapes in batch".into()));
            }
            pixels.index_axis_mut(Axis(0), i).assign(img);
        }
        let batch = ImageBatch { pixels, domain, labels };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, c, h, w) = self.pixels.dim();
        if h != w {
            return Err(Error::Structure(format!("images must be square, got {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Structure(format!("channels must be 1 or 3, got {c}")));
        }
        if self.labels.len() != b {
            return Err(Error::Structure("labels length must equal batch size".into()));
        }
        if self.pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Numeric("pixel outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One synthetic sample: latent parameters plus the rendered image.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub params: MorphParams,
    pub image: Array3<f64>,
}

/// The four dataset splits used for training and evaluation.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub unpaired_synthetic: Vec<SynthItem>,
    /// (identity label, image). Labels are disjoint from the synthetic pool.
    pub unpaired_real: Vec<(u32, Array3<f64>)>,
    /// (synthetic render, its oracle translation)
    pub paired: Vec<(Array3<f64>, Array3<f64>)>,
    /// (params, synthetic render, oracle translation) on identities unseen
    /// anywhere else.
    pub heldout: Vec<(MorphParams, Array3<f64>, Array3<f64>)>,
}

/// Counts, seeds and identity ranges for [`build_datasets`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub synth_ids: usize,
    pub synth_per_id: usize,
    pub real_ids: usize,
    pub real_per_id: usize,
    pub paired_count: usize,
    pub heldout_ids: usize,
    pub heldout_per_id: usize,
    pub synth_id_base: u32,
    pub real_id_base: u32,
    pub paired_id_base: u32,
    pub heldout_id_base: u32,
    pub pretrain_id_base: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            image_size: 32,
            channels: 1,
            synth_ids: 200,
            synth_per_id: 20,
            real_ids: 200,
            real_per_id: 20,
            paired_count: 100,
            heldout_ids: 50,
            heldout_per_id: 2,
            synth_id_base: 0,
            real_id_base: 100_000,
            paired_id_base: 200_000,
            heldout_id_base: 300_000,
            pretrain_id_base: 400_000,
        }
    }
}

pub(crate) fn fnv1a(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for byte in p.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn clampf(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

fn sstep(t: f64) -> f64 {
    let t = clampf(t, 0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Draw `num_ids * per_id` parameter sets. Identity coefficients are drawn
/// once per identity from a unit Gaussian; expression, pose and lighting are
/// drawn per image. Deterministic in `seed`.
pub fn sample_params(seed: u64, num_ids: usize, per_id: usize) -> Result<Vec<MorphParams>> {
    sample_params_with(seed, num_ids, per_id, 0)
}

/// As [`sample_params`], with identity labels starting at `first_id`.
pub fn sample_params_with(
    seed: u64,
    num_ids: usize,
    per_id: usize,
    first_id: u32,
) -> Result<Vec<MorphParams>> {
    if num_ids == 0 || per_id == 0 {
        return Err(Error::InvalidArgument("num_ids and per_id must be positive".into()));
    }
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(num_ids * per_id);
    for i in 0..num_ids {
        let label = first_id + i as u32;
        let mut id_rng = ChaCha8Rng::seed_from_u64(fnv1a(&[seed, 0x1d, label as u64]));
        let identity: Vec<f64> = (0..DEFAULT_ID_DIM).map(|_| unit.sample(&mut id_rng)).collect();
        for k in 0..per_id {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[seed, 0xff, label as u64, k as u64]));
            let expression: Vec<f64> =
                (0..DEFAULT_EX_DIM).map(|_| unit.sample(&mut rng)).collect();
            let shear = clampf(0.25 * unit.sample(&mut rng), -1.0, 1.0);
            let rot = 0.12 * unit.sample(&mut rng);
            let angle = 1.2 * unit.sample(&mut rng);
            let strength = clampf((0.3 * unit.sample(&mut rng)).abs(), 0.0, 1.0);
            out.push(MorphParams {
                identity_coeffs: identity.clone(),
                expression_coeffs: expression,
                pose: (shear, rot),
                lighting: (angle, strength),
                identity_label: label,
            });
        }
    }
    Ok(out)
}

struct FaceGeometry {
    head_w: f64,
    head_h: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_w: f64,
    nose_len: f64,
    skin: f64,
}

fn geometry_from(params: &MorphParams) -> FaceGeometry {
    let z = |i: usize| clampf(params.identity_coeffs.get(i).copied().unwrap_or(0.0), -2.5, 2.5);
    FaceGeometry {
        head_w: 0.62 + 0.05 * z(0),
        head_h: 0.80 + 0.05 * z(1),
        eye_dx: 0.26 + 0.035 * z(2),
        eye_y: -0.18 + 0.035 * z(3),
        eye_r: 0.075 + 0.012 * z(4),
        mouth_w: 0.26 + 0.045 * z(5),
        nose_len: 0.20 + 0.04 * z(6),
        skin: 0.72 + 0.05 * z(7),
    }
}

/// Deterministically paint a face image of shape `[channels, size, size]`.
pub fn render_synthetic(params: &MorphParams, size: usize, channels: usize) -> Result<Array3<f64>> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("size must be >= 16, got {size}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument("channels must be 1 or 3".into()));
    }
    let g = geometry_from(params);
    let ex = |i: usize| params.expression_coeffs.get(i).copied().unwrap_or(0.0);
    let mouth_curv = 0.18 * ex(0).tanh();
    let eye_open = clampf(1.0 + 0.45 * ex(1), 0.25, 1.7);
    let shear = params.pose.0 * 0.35;
    let (sin_r, cos_r) = params.pose.1.sin_cos();
    let (light_a, light_s) = params.lighting;
    let (ld_x, ld_y) = (light_a.cos(), light_a.sin());

    let mut img = Array3::<f64>::zeros((channels, size, size));
    let tint = [1.0, 0.94, 0.88];
    for r in 0..size {
        let v = (r as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for c in 0..size {
            let u = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            // undo in-plane rotation, then yaw-proxy shear
            let u1 = cos_r * u + sin_r * v;
            let v1 = -sin_r * u + cos_r * v;
            let x = u1 - shear * v1;
            let y = v1;

            let mut val = 0.12;
            let head = (x / g.head_w).powi(2) + (y / g.head_h).powi(2);
            val = lerp(val, g.skin, sstep((1.0 - head) / 0.10));
            // nose
            let nose = sstep((0.035 - x.abs()) / 0.02)
                * sstep((y + 0.02) / 0.04)
                * sstep((g.nose_len - y) / 0.04);
            val = lerp(val, g.skin * 0.82, nose);
            // eyes
            for sx in [-1.0f64, 1.0] {
                let fe = ((x - sx * g.eye_dx) / g.eye_r).powi(2)
                    + ((y - g.eye_y) / (g.eye_r * 0.6 * eye_open)).powi(2);
                val = lerp(val, 0.15, sstep((1.0 - fe) / 0.2));
            }
            // mouth
            let mx = x / g.mouth_w;
            let dy = y - (0.34 + mouth_curv * (mx * mx - 0.5));
            let mouth = sstep((1.0 - mx * mx) / 0.2) * sstep((0.035 - dy.abs()) / 0.02);
            val = lerp(val, 0.22, mouth);
            // directional shading in the image frame
            let t = clampf(-(ld_x * u + ld_y * v), 0.0, 1.0);
            val *= 1.0 - light_s * t * 0.7;
            let val = clampf(val, 0.0, 1.0);
            for ch in 0..channels {
                img[[ch, r, c]] = clampf(val * tint[ch], 0.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// The hidden domain transform `T`: tone curve, identity-keyed texture,
/// background composite and a mild blur. Deterministic per (image, params).
pub fn realism_transform(image: &Array3<f64>, params: &MorphParams) -> Result<Array3<f64>> {
    let (channels, h, w) = image.dim();
    if h != w {
        return Err(Error::Structure("image must be square".into()));
    }
    let label = params.identity_label as u64;
    let nuisance: Vec<u64> = params
        .expression_coeffs
        .iter()
        .chain([params.pose.0, params.pose.1, params.lighting.0, params.lighting.1].iter())
        .map(|f| f.to_bits())
        .collect();
    let mut tex_rng = ChaCha8Rng::seed_from_u64(fnv1a(&[0x7e, label]));
    let mut all_parts = vec![0x4bu64, label];
    all_parts.extend_from_slice(&nuisance);
    let mut img_rng = ChaCha8Rng::seed_from_u64(fnv1a(&all_parts));

    let fu: f64 = tex_rng.gen_range(1.5..4.5);
    let fv: f64 = tex_rng.gen_range(1.5..4.5);
    let phase: f64 = tex_rng.gen_range(0.0..std::f64::consts::TAU);
    let gu: f64 = img_rng.gen_range(0.5..2.0);
    let gv: f64 = img_rng.gen_range(0.5..2.0);
    let gphase: f64 = img_rng.gen_range(0.0..std::f64::consts::TAU);

    let mut out = Array3::<f64>::zeros((channels, h, w));
    for r in 0..h {
        let v = (r as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        for c in 0..w {
            let u = (c as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let tex = 0.06 * (std::f64::consts::TAU * (fu * u + fv * v) + phase).sin();
            let bgv = 0.35 + 0.25 * (std::f64::consts::TAU * (gu * u + gv * v) + gphase).sin();
            for ch in 0..channels {
                let orig = image[[ch, r, c]];
                let mut val = orig.max(0.0).powf(0.65) + tex;
                let bg_mask = sstep((0.18 - orig) / 0.06);
                val = lerp(val, bgv, 0.8 * bg_mask);
                out[[ch, r, c]] = val;
            }
        }
    }
    // 3x3 binomial blur with replicated edges
    let mut blurred = Array3::<f64>::zeros((channels, h, w));
    let kern = [1.0, 2.0, 1.0];
    for ch in 0..channels {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (di, kv) in kern.iter().enumerate() {
                    let rr = (r as isize + di as isize - 1).clamp(0, h as isize - 1) as usize;
                    for (dj, kh) in kern.iter().enumerate() {
                        let cc = (c as isize + dj as isize - 1).clamp(0, w as isize - 1) as usize;
                        acc += kv * kh * out[[ch, rr, cc]];
                    }
                }
                blurred[[ch, r, c]] = clampf(acc / 16.0, 0.0, 1.0);
            }
        }
    }
    Ok(blurred)
}

/// Render an identity's params and push them through the hidden transform.
pub fn render_real(params: &MorphParams, size: usize, channels: usize) -> Result<Array3<f64>> {
    let synth = render_synthetic(params, size, channels)?;
    realism_transform(&synth, params)
}

impl DataConfig {
    fn id_ranges(&self) -> Vec<(u32, u32, &'static str)> {
        vec![
            (self.synth_id_base, self.synth_id_base + self.synth_ids as u32, "synthetic"),
            (self.real_id_base, self.real_id_base + self.real_ids as u32, "real"),
            (self.paired_id_base, self.paired_id_base + self.paired_count as u32, "paired"),
            (self.heldout_id_base, self.heldout_id_base + self.heldout_ids as u32, "heldout"),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be >= 16".into()));
        }
        let ranges = self.id_ranges();
        for i in 0..ranges.len() {
            for j in (i + 1)..ranges.len() {
                let (a0, a1, an) = ranges[i];
                let (b0, b1, bn) = ranges[j];
                if a0 < b1 && b0 < a1 {
                    return Err(Error::Config(format!(
                        "identity ranges overlap: {an} [{a0},{a1}) vs {bn} [{b0},{b1})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Build all dataset splits deterministically from the config.
pub fn build_datasets(cfg: &DataConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let size = cfg.image_size;
    let ch = cfg.channels;

    let synth_params = sample_params_with(cfg.seed, cfg.synth_ids, cfg.synth_per_id, cfg.synth_id_base)?;
    let unpaired_synthetic = synth_params
        .into_iter()
        .map(|p| {
            let image = render_synthetic(&p, size, ch)?;
            Ok(SynthItem { params: p, image })
        })
        .collect::<Result<Vec<_>>>()?;

    let real_params =
        sample_params_with(cfg.seed.wrapping_add(1), cfg.real_ids, cfg.real_per_id, cfg.real_id_base)?;
    let unpaired_real = real_params
        .iter()
        .map(|p| Ok((p.identity_label, render_real(p, size, ch)?)))
        .collect::<Result<Vec<_>>>()?;

    let paired_params =
        sample_params_with(cfg.seed.wrapping_add(2), cfg.paired_count, 1, cfg.paired_id_base)?;
    let paired = paired_params
        .iter()
        .map(|p| {
            let s = render_synthetic(p, size, ch)?;
            let r = realism_transform(&s, p)?;
            Ok((s, r))
        })
        .collect::<Result<Vec<_>>>()?;

    let heldout_params = sample_params_with(
        cfg.seed.wrapping_add(3),
        cfg.heldout_ids,
        cfg.heldout_per_id,
        cfg.heldout_id_base,
    )?;
    let heldout = heldout_params
        .into_iter()
        .map(|p| {
            let s = render_synthetic(&p, size, ch)?;
            let r = realism_transform(&s, &p)?;
            Ok((p, s, r))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DatasetBundle { unpaired_synthetic, unpaired_real, paired, heldout })
}

pub const AUGMENT_CROP_RATIO: f64 = 96.0 / 108.0;

/// Output side length of [`augment`] for a given input side length.
pub fn augment_output_size(input: usize) -> usize {
    (input as f64 * AUGMENT_CROP_RATIO).floor() as usize
}

/// Mirror an image horizontally. Applying it twice is the identity.
pub fn flip_horizontal(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out
}

fn rotate_bilinear(image: &Array3<f64>, angle: f64) -> Array3<f64> {
    let (ch, h, w) = image.dim();
    let (sin_a, cos_a) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::<f64>::zeros((ch, h, w));
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = cy + (-sin_a * dx + cos_a * dy);
            let sx = cx + (cos_a * dx + sin_a * dy);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let ty = sy - y0;
            let tx = sx - x0;
            let pick = |yy: f64, xx: f64| {
                let yi = (yy.max(0.0) as usize).min(h - 1);
                let xi = (xx.max(0.0) as usize).min(w - 1);
                (yi, xi)
            };
            for chan in 0..ch {
                let g = |yy: f64, xx: f64| {
                    let (yi, xi) = pick(yy, xx);
                    image[[chan, yi, xi]]
                };
                let top = lerp(g(y0, x0), g(y0, x0 + 1.0), tx);
                let bot = lerp(g(y0 + 1.0, x0), g(y0 + 1.0, x0 + 1.0), tx);
                out[[chan, r, c]] = lerp(top, bot, ty);
            }
        }
    }
    out
}

/// Random rotate (±10°), crop to the 96/108 ratio and horizontal flip with
/// probability 0.5. Deterministic in `seed`.
pub fn augment(image: &Array3<f64>, seed: u64) -> Result<Array3<f64>> {
    let (_ch, h, w) = image.dim();
    let out_size = augment_output_size(h.min(w));
    if out_size == 0 || out_size > h || out_size > w {
        return Err(Error::InvalidArgument(format!(
            "crop size {out_size} does not fit input {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rot = 10.0f64.to_radians();
    let angle: f64 = rng.gen_range(-max_rot..max_rot);
    let r0 = rng.gen_range(0..=(h - out_size));
    let c0 = rng.gen_range(0..=(w - out_size));
    let flip: bool = rng.gen_bool(0.5);

    let rotated = rotate_bilinear(image, angle);
    let cropped = rotated
        .slice(ndarray::s![.., r0..r0 + out_size, c0..c0 + out_size])
        .to_owned();
    Ok(if flip { flip_horizontal(&cropped) } else { cropped })
}
