//! Procedural two-domain face generator. Source faces are frontal, evenly
//! lit and unoccluded on flat backgrounds; target faces add rotation,
//! horizontal squash, uneven lighting, occluders and textured backgrounds.
//! Every sample is a pure function of `(global seed, domain, split, index)`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_new_definition, compute_scale, crop_mirror, similarity_align, LandmarkSet, CANVAS, INNER_EYE_CORNERS,
    LIP_CORNERS, TEMPLATE,
};
use crate::networks::Domain;
use crate::tensor::{adtn, Tensor};
use crate::Real;

/// One step of the SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Integer-only generator; identical streams on every platform.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.state);
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// Evaluated AU subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuSet {
    /// AUs 1, 2, 4, 6, 12, 17.
    Bp4d6,
    /// AUs 2, 6, 12, 17.
    Gft4,
}

impl AuSet {
    pub fn aus(self) -> &'static [u8] {
        match self {
            AuSet::Bp4d6 => &[1, 2, 4, 6, 12, 17],
            AuSet::Gft4 => &[2, 6, 12, 17],
        }
    }

    /// Training-set occurrence rates of the reference benchmark.
    pub fn default_rates(self) -> &'static [f64] {
        match self {
            AuSet::Bp4d6 => &[0.184, 0.146, 0.198, 0.440, 0.540, 0.342],
            AuSet::Gft4 => &[0.147, 0.292, 0.303, 0.287],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bp4d6" => Ok(AuSet::Bp4d6),
            "gft4" => Ok(AuSet::Gft4),
            _ => Err(Error::Config(format!("unknown AU set '{s}' (expected bp4d6 or gft4)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

fn domain_tag(domain: Domain) -> u64 {
    match domain {
        Domain::Source => 0x5151,
        Domain::Target => 0x7474,
    }
}

/// Per-person face shape and colouring.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    /// Head ellipse half-axes on the 200 canvas.
    pub face_axes: [f64; 2],
    /// Horizontal spread of eyes and brows about the midline.
    pub eye_spacing: f64,
    pub brow_height: f64,
    pub nose_length: f64,
    pub mouth_width: f64,
    pub mouth_height: f64,
    pub skin: [f64; 3],
    /// Grey level of facial strokes.
    pub stroke: f64,
}

impl Identity {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            face_axes: [rng.random_range(62.0..68.0), rng.random_range(84.0..92.0)],
            eye_spacing: rng.random_range(0.92..1.08),
            brow_height: rng.random_range(-2.0..2.0),
            nose_length: rng.random_range(-3.0..3.0),
            mouth_width: rng.random_range(0.92..1.08),
            mouth_height: rng.random_range(-2.0..2.0),
            skin: [rng.random_range(0.6..0.85), rng.random_range(0.45..0.65), rng.random_range(0.35..0.55)],
            stroke: rng.random_range(0.05..0.2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation_deg: f64,
    /// Horizontal compression about the midline, a yaw proxy.
    pub squash: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Illumination {
    pub contrast: f64,
    pub brightness: f64,
    /// Left-to-right brightness ramp.
    pub gradient: f64,
}

/// Axis-aligned occluder in fractions of the rendered side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occlusion {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    Flat([f64; 3]),
    /// Two colour gratings plus hashed pixel noise.
    Textured { freq: [[f64; 2]; 2], phase: [f64; 2], tint: [f64; 3], noise_seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub identity: Identity,
    /// Active AU numbers.
    pub active_aus: Vec<u8>,
    pub pose: Pose,
    pub illumination: Illumination,
    pub occlusion: Option<Occlusion>,
    pub background: Background,
}

/// AU displacement magnitude in units of scale.
pub const AU_SHIFT: f64 = 0.15;
/// Maximum occluder area fraction.
pub const MAX_OCCLUSION: f64 = 0.25;
/// Rendered side relative to the crop side.
pub const RENDER_MARGIN: f64 = 1.14;
const FACE_CENTER: [f64; 2] = [100.0, 112.0];

/// Landmark groups moved by each AU, with a unit direction per point
/// (x toward the midline is "inward").
fn au_moves(au: u8) -> Vec<(usize, [f64; 2])> {
    const UP: [f64; 2] = [0.0, -1.0];
    let diag = std::f64::consts::FRAC_1_SQRT_2;
    let inward = |i: usize, down: bool| {
        let sx = if TEMPLATE[i][0] < 100.0 { diag } else { -diag };
        (i, [sx, if down { diag } else { -diag }])
    };
    match au {
        1 => [3, 4, 5, 6].map(|i| (i, UP)).to_vec(),
        2 => [0, 1, 8, 9].map(|i| (i, UP)).to_vec(),
        4 => (0..10).map(|i| inward(i, true)).collect(),
        6 => [14, 15, 20, 21].map(|i| (i, UP)).to_vec(),
        // Lip corners up and outward.
        12 => LIP_CORNERS.map(|i| {
            let (_, [sx, _]) = inward(i, false);
            (i, [-sx, -diag])
        })
        .to_vec(),
        17 => [38, 39, 40, 41, 42, 46, 47, 48].map(|i| (i, UP)).to_vec(),
        _ => Vec::new(),
    }
}

/// Identity-shaped face before any AU.
pub fn neutral_landmarks(id: &Identity) -> LandmarkSet {
    let mut p = TEMPLATE;
    for (i, q) in p.iter_mut().enumerate() {
        match i {
            0..=21 => {
                q[0] = 100.0 + (q[0] - 100.0) * id.eye_spacing;
                if i < 10 {
                    q[1] += id.brow_height;
                }
            }
            22..=30 => {
                // Bridge top fixed; lower points stretch with the nose.
                let t = (q[1] - 90.0) / 37.0;
                q[1] += t * id.nose_length;
            }
            _ => {
                q[0] = 100.0 + (q[0] - 100.0) * id.mouth_width;
                q[1] += id.mouth_height;
            }
        }
    }
    LandmarkSet::new(p, CANVAS)
}

/// Physical landmark positions on the 200 canvas with AUs applied, before
/// pose. AU shifts never touch the inner eye corners, so scale is
/// AU-independent.
pub fn expressive_landmarks(params: &SceneParams) -> Result<LandmarkSet> {
    let mut lm = neutral_landmarks(&params.identity);
    let shift = AU_SHIFT * compute_scale(&lm)?;
    for &au in &params.active_aus {
        for (i, dir) in au_moves(au) {
            debug_assert!(!INNER_EYE_CORNERS.contains(&i));
            lm.points[i][0] += dir[0] * shift;
            lm.points[i][1] += dir[1] * shift;
        }
    }
    Ok(lm)
}

/// Label landmarks pre-pose: the AU-centre definition applied to the
/// frontal expressive face.
pub fn label_landmarks(params: &SceneParams) -> Result<LandmarkSet> {
    apply_new_definition(&expressive_landmarks(params)?)
}

/// Affine map canvas → rendered pixels: squash and rotate about the face
/// centre, then scale to `side`.
#[derive(Clone, Copy, Debug)]
struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn pose(pose: Pose, side: usize) -> Self {
        let k = side as f64 / CANVAS as f64;
        let (s, c) = pose.rotation_deg.to_radians().sin_cos();
        let m = [[k * c * pose.squash, -k * s], [k * s * pose.squash, k * c]];
        let [cx, cy] = FACE_CENTER;
        let t = [k * cx - (m[0][0] * cx + m[0][1] * cy), k * cy - (m[1][0] * cx + m[1][1] * cy)];
        Self { m, t }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0], self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1]]
    }

    fn inverse(&self) -> Self {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [-(m[0][0] * self.t[0] + m[0][1] * self.t[1]), -(m[1][0] * self.t[0] + m[1][1] * self.t[1])];
        Self { m, t }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Stroke polylines of the face; closed outlines repeat their first point.
fn strokes(lm: &LandmarkSet) -> Vec<Vec<[f64; 2]>> {
    let pts = |idx: &[usize]| idx.iter().map(|&i| lm.points[i]).collect::<Vec<_>>();
    vec![
        pts(&[0, 1, 2, 3, 4]),
        pts(&[5, 6, 7, 8, 9]),
        pts(&[10, 11, 12, 13, 14, 15, 10]),
        pts(&[16, 17, 18, 19, 20, 21, 16]),
        pts(&[22, 23, 24, 25]),
        pts(&[26, 27, 28, 29, 30]),
        pts(&[31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 31]),
        pts(&[31, 43, 44, 45, 37, 46, 47, 48, 31]),
    ]
}

fn smooth_edge(signed: f64, width: f64) -> f64 {
    (0.5 - signed / width).clamp(0.0, 1.0)
}

fn hash_unit(seed: u64, a: usize, b: usize) -> f64 {
    let h = splitmix64(seed ^ splitmix64(((a as u64) << 32) | b as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Side of the rendered, pre-crop image for crop side `l`.
pub fn render_side(l: usize) -> usize {
    (RENDER_MARGIN * l as f64).round() as usize
}

/// Rasterizes a face at `render_side(l)` pixels, values in [-1, 1].
/// Returns the image with label landmarks in the same pixel frame.
pub fn render_face(params: &SceneParams, l: usize) -> Result<(Tensor<Real>, LandmarkSet)> {
    if l < 32 || !l.is_multiple_of(4) {
        return Err(Error::Config(format!("image side {l} must be >= 32 and divisible by 4")));
    }
    let side = render_side(l);
    let physical = expressive_landmarks(params)?;
    let labels = apply_new_definition(&physical)?;
    let fwd = Affine::pose(params.pose, side);
    let inv = fwd.inverse();
    let lines = strokes(&physical);
    let pupils = [physical.mean_of(10..16), physical.mean_of(16..22)];
    let canvas_per_px = CANVAS as f64 / side as f64 / params.pose.squash.min(1.0);
    let (aa, stroke_w) = (canvas_per_px, 2.2f64.max(1.2 * canvas_per_px));
    let id = &params.identity;
    let ill = params.illumination;
    let mut data = vec![0.0 as Real; 3 * side * side];
    for v in 0..side {
        for u in 0..side {
            let c = inv.apply([u as f64, v as f64]);
            let mut rgb = match params.background {
                Background::Flat(col) => col,
                Background::Textured { freq, phase, tint, noise_seed } => {
                    let (x, y) = (u as f64 / side as f64, v as f64 / side as f64);
                    let g1 = (freq[0][0] * x + freq[0][1] * y + phase[0]).sin();
                    let g2 = (freq[1][0] * x + freq[1][1] * y + phase[1]).sin();
                    let n = hash_unit(noise_seed, u, v) - 0.5;
                    [0, 1, 2].map(|ch| (tint[ch] + 0.18 * g1 + 0.12 * g2 * (ch as f64 - 1.0) + 0.15 * n).clamp(0.0, 1.0))
                }
            };
            let e = ((c[0] - FACE_CENTER[0]) / id.face_axes[0]).hypot((c[1] - FACE_CENTER[1]) / id.face_axes[1]);
            let head = smooth_edge((e - 1.0) * id.face_axes[0], aa);
            if head > 0.0 {
                for (v, &skin) in rgb.iter_mut().zip(&id.skin) {
                    *v += head * (skin - *v);
                }
                let mut ink = 0.0f64;
                for line in &lines {
                    for w in line.windows(2) {
                        ink = ink.max(smooth_edge(segment_distance(c, w[0], w[1]) - stroke_w / 2.0, aa));
                    }
                }
                for p in pupils {
                    ink = ink.max(smooth_edge((c[0] - p[0]).hypot(c[1] - p[1]) - 2.5, aa));
                }
                let ink = ink * head;
                for ch in rgb.iter_mut() {
                    *ch += ink * (id.stroke - *ch);
                }
            }
            let ramp = ill.gradient * (u as f64 / side as f64 - 0.5);
            for (ch, val) in rgb.iter().enumerate() {
                let lit = (ill.contrast * (val - 0.5) + 0.5 + ill.brightness + ramp).clamp(0.0, 1.0);
                data[ch * side * side + v * side + u] = (2.0 * lit - 1.0) as Real;
            }
        }
    }
    if let Some(o) = params.occlusion {
        let (x0, y0, x1, y1) = occluder_pixels(&o, side);
        for ch in 0..3 {
            for v in y0..y1 {
                for u in x0..x1 {
                    data[ch * side * side + v * side + u] = (2.0 * o.color[ch] - 1.0) as Real;
                }
            }
        }
    }
    let landmarks = labels.map(side, |p| fwd.apply(p));
    Ok((Tensor::new(&[3, side, side], data)?, landmarks))
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` covered by an occluder.
pub fn occluder_pixels(o: &Occlusion, side: usize) -> (usize, usize, usize, usize) {
    let px = |f: f64| ((f * side as f64).round().max(0.0) as usize).min(side);
    let (x0, y0) = (px(o.x), px(o.y));
    let (x1, y1) = (px(o.x + o.w).max(x0), px(o.y + o.h).max(y0));
    (x0, y0, x1, y1)
}

/// Generation settings shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain: Domain,
    pub split: Split,
    pub image_size: usize,
    pub au_set: AuSet,
    /// Per-AU occurrence rates in AU-set order.
    pub rates: Vec<f64>,
    pub identities: usize,
    /// Pseudo-label flip probability; target records only.
    pub flip_rate: f64,
}

impl DomainConfig {
    pub fn new(domain: Domain, split: Split, image_size: usize, au_set: AuSet) -> Self {
        Self {
            domain,
            split,
            image_size,
            au_set,
            rates: au_set.default_rates().to_vec(),
            identities: 40,
            flip_rate: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!("image side {} must be >= 32 and divisible by 4", self.image_size)));
        }
        if self.rates.len() != self.au_set.aus().len() || self.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("one occurrence rate in [0, 1] per AU is required".into()));
        }
        if !(0.0..0.5).contains(&self.flip_rate) {
            return Err(Error::Config(format!("flip rate {} outside [0, 0.5)", self.flip_rate)));
        }
        if self.identities < 3 {
            return Err(Error::Config("at least three identities are needed for three splits".into()));
        }
        Ok(())
    }
}

/// Identity indices of a split: 70% / 15% / 15% of the pool, contiguous.
pub fn split_identities(split: Split, pool: usize) -> std::ops::Range<usize> {
    let train = (pool * 7).div_ceil(10);
    let val = (pool - train) / 2;
    match split {
        Split::Train => 0..train,
        Split::Val => train..train + val,
        Split::Test => train + val..pool,
    }
}

/// The `k`-th identity of a domain's pool.
pub fn pool_identity(domain: Domain, k: usize, global_seed: u64) -> Identity {
    let mut rng = SplitMix64::new(splitmix64(global_seed ^ splitmix64((domain_tag(domain) << 40) ^ k as u64)));
    Identity::draw(&mut rng)
}

/// Scene draw for one sample; the RNG is left positioned after the draw.
pub fn draw_scene(cfg: &DomainConfig, global_seed: u64, rng: &mut SplitMix64) -> SceneParams {
    let ids = split_identities(cfg.split, cfg.identities);
    let k = rng.random_range(ids);
    let identity = pool_identity(cfg.domain, k, global_seed);
    let active_aus: Vec<u8> =
        cfg.au_set.aus().iter().zip(&cfg.rates).filter(|(_, &r)| rng.random_bool(r)).map(|(&a, _)| a).collect();
    match cfg.domain {
        Domain::Source => {
            let g = rng.random_range(0.35..0.65);
            SceneParams {
                identity,
                active_aus,
                pose: Pose { rotation_deg: rng.random_range(-5.0..=5.0), squash: rng.random_range(0.95..=1.0) },
                illumination: Illumination {
                    contrast: rng.random_range(0.95..1.05),
                    brightness: rng.random_range(-0.03..0.03),
                    gradient: 0.0,
                },
                occlusion: None,
                background: Background::Flat([g, g, g]),
            }
        }
        Domain::Target => {
            let pose = Pose { rotation_deg: rng.random_range(-30.0..=30.0), squash: rng.random_range(0.7..=1.0) };
            let illumination = Illumination {
                contrast: rng.random_range(0.6..1.2),
                brightness: rng.random_range(-0.25..0.25),
                gradient: rng.random_range(-0.5..0.5),
            };
            let occlusion = rng.random_bool(0.5).then(|| {
                let area = rng.random_range(0.03..MAX_OCCLUSION);
                let aspect: f64 = rng.random_range(0.5..2.0);
                let w = (area * aspect).sqrt().min(0.9);
                let h = (area / w).min(0.9);
                Occlusion {
                    x: rng.random_range(0.0..1.0 - w),
                    y: rng.random_range(0.0..1.0 - h),
                    w,
                    h,
                    color: [rng.random(), rng.random(), rng.random()],
                }
            });
            let tau = std::f64::consts::TAU;
            let background = Background::Textured {
                freq: [
                    [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)],
                    [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)],
                ],
                phase: [rng.random_range(0.0..tau), rng.random_range(0.0..tau)],
                tint: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
                noise_seed: rng.next_u64(),
            };
            SceneParams { identity, active_aus, pose, illumination, occlusion, background }
        }
    }
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[3, l, l]` in [-1, 1].
    pub image: Tensor<Real>,
    /// Label landmarks (AU-centre definition) in crop pixels.
    pub landmarks: LandmarkSet,
    pub aus: Option<Vec<u8>>,
    pub pseudo_aus: Option<Vec<u8>>,
    pub domain: Domain,
}

/// Flips each bit independently with probability `flip_rate`.
pub fn make_pseudo_labels(labels: &[u8], flip_rate: f64, rng: &mut impl Rng) -> Result<Vec<u8>> {
    if !(0.0..0.5).contains(&flip_rate) {
        return Err(Error::Config(format!("flip rate {flip_rate} outside [0, 0.5)")));
    }
    Ok(labels.iter().map(|&b| if rng.random_bool(flip_rate) { 1 - b } else { b }).collect())
}

/// Per-sample RNG seed.
pub fn sample_seed(cfg: &DomainConfig, index: u64, global_seed: u64) -> u64 {
    // Hash the index before mixing so nearby seeds do not share samples.
    splitmix64(global_seed ^ splitmix64(index ^ (domain_tag(cfg.domain) << 48) ^ (cfg.split.tag() << 60)))
}

/// Renders, aligns and crops the `index`-th sample. Training crops take a
/// random offset; validation and test crops are centred.
pub fn sample_domain(cfg: &DomainConfig, index: u64, global_seed: u64) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(sample_seed(cfg, index, global_seed));
    let scene = draw_scene(cfg, global_seed, &mut rng);
    let l = cfg.image_size;
    let (image, lm) = render_face(&scene, l)?;
    let side = image.shape()[1];
    let (aligned, lm, _) = similarity_align(&image, &lm, side)?;
    let slack = side - l;
    let (ox, oy) = match cfg.split {
        Split::Train => (rng.random_range(0..=slack), rng.random_range(0..=slack)),
        _ => (slack / 2, slack / 2),
    };
    let (crop, landmarks) = crop_mirror(&aligned, &lm, l, ox, oy, false)?;
    let aus: Vec<u8> = cfg.au_set.aus().iter().map(|a| u8::from(scene.active_aus.contains(a))).collect();
    let pseudo_aus = match cfg.domain {
        Domain::Target => Some(make_pseudo_labels(&aus, cfg.flip_rate, &mut rng)?),
        Domain::Source => None,
    };
    let domain = match cfg.domain {
        Domain::Source => "source",
        Domain::Target => "target",
    };
    Ok(SampleRecord {
        id: format!("{domain}-{:?}-{index:06}", cfg.split).to_lowercase(),
        image: crop,
        landmarks,
        aus: Some(aus),
        pseudo_aus,
        domain: cfg.domain,
    })
}

/// Samples `start..start + count` sequentially.
pub fn generate(cfg: &DomainConfig, start: u64, count: usize, global_seed: u64) -> Result<Vec<SampleRecord>> {
    (start..start + count as u64).map(|i| sample_domain(cfg, i, global_seed)).collect()
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    image: String,
    landmarks: Vec<f64>,
    frame: usize,
    aus: Option<Vec<u8>>,
    pseudo_aus: Option<Vec<u8>>,
    domain: Domain,
}

/// Writes images as ADTN files plus a JSON-lines manifest.
pub fn write_dataset(records: &[SampleRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut out = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    for r in records {
        let rel = format!("{IMAGE_DIR}/{}.adtn", r.id);
        adtn::save(dir.join(&rel), &r.image)?;
        let line = ManifestLine {
            id: r.id.clone(),
            image: rel,
            landmarks: r.landmarks.to_flat(),
            frame: r.landmarks.frame,
            aus: r.aus.clone(),
            pseudo_aus: r.pseudo_aus.clone(),
            domain: r.domain,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset; manifest errors carry 1-based line numbers.
pub fn read_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(dir.join(MANIFEST_FILE))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |detail: String| Error::Parse { line: i + 1, detail };
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let landmarks = LandmarkSet::from_flat(&m.landmarks, m.frame).map_err(|e| parse(e.to_string()))?;
        let image: Tensor<Real> = adtn::load(dir.join(&m.image))?;
        if image.shape() != [3, m.frame, m.frame] {
            return Err(parse(format!("image {} has shape {:?}, frame is {}", m.image, image.shape(), m.frame)));
        }
        records.push(SampleRecord { id: m.id, image, landmarks, aus: m.aus, pseudo_aus: m.pseudo_aus, domain: m.domain });
    }
    Ok(records)
}

/// Empirical positive rate per AU over records that carry labels.
pub fn empirical_rates(records: &[SampleRecord], m: usize) -> Vec<f64> {
    let rows: Vec<Vec<u8>> = records.iter().filter_map(|r| r.aus.clone()).collect();
    crate::losses::occurrence_rates(&rows, m)
}
