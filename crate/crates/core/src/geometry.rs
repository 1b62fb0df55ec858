//! Inner-landmark template, AU-centre rules, the AU-centred landmark
//! redefinition, response-map class indices, alignment and mirroring.
//!
//! Coordinates are pixels with pixel centres on integers; `x` grows right and
//! `y` grows down, so "above" is `-y`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of inner landmarks.
pub const N_LANDMARKS: usize = 49;
/// Side of the canvas the template and alignment anchors live on.
pub const CANVAS: usize = 200;

/// Index ranges of the facial parts within the 49 points.
pub const BROWS: std::ops::Range<usize> = 0..10;
pub const LEFT_EYE: std::ops::Range<usize> = 10..16;
pub const RIGHT_EYE: std::ops::Range<usize> = 16..22;
pub const NOSE: std::ops::Range<usize> = 22..31;
pub const MOUTH: std::ops::Range<usize> = 31..49;
/// Inner corners of the left and right eye.
pub const INNER_EYE_CORNERS: [usize; 2] = [13, 16];
/// Lip corners.
pub const LIP_CORNERS: [usize; 2] = [31, 37];

/// Canonical frontal template on the 200-pixel canvas. Left/right refer to
/// image sides. Symmetric about `x = 100`.
#[rustfmt::skip]
pub const TEMPLATE: [[f64; 2]; N_LANDMARKS] = [
    // brows, outer-left to outer-right
    [52.0, 76.0], [60.0, 71.0], [68.0, 69.0], [76.0, 70.0], [84.0, 73.0],
    [116.0, 73.0], [124.0, 70.0], [132.0, 69.0], [140.0, 71.0], [148.0, 76.0],
    // left eye: outer corner, upper lid, inner corner, lower lid
    [60.0, 90.0], [65.0, 87.0], [75.0, 87.0], [80.0, 90.0], [75.0, 93.0], [65.0, 93.0],
    // right eye: inner corner, upper lid, outer corner, lower lid
    [120.0, 90.0], [125.0, 87.0], [135.0, 87.0], [140.0, 90.0], [135.0, 93.0], [125.0, 93.0],
    // nose bridge, then nostril base left to right
    [100.0, 90.0], [100.0, 100.0], [100.0, 110.0], [100.0, 120.0],
    [90.0, 124.0], [95.0, 126.0], [100.0, 127.0], [105.0, 126.0], [110.0, 124.0],
    // outer lip clockwise from the left corner
    [82.0, 150.0], [87.0, 145.0], [93.0, 142.0], [100.0, 143.0], [107.0, 142.0], [113.0, 145.0],
    [118.0, 150.0], [113.0, 156.0], [107.0, 159.0], [100.0, 160.0], [93.0, 159.0], [87.0, 156.0],
    // inner lip
    [93.0, 148.0], [100.0, 148.0], [107.0, 148.0], [107.0, 152.0], [100.0, 152.0], [93.0, 152.0],
];

/// Index permutation under a horizontal flip; an involution.
#[rustfmt::skip]
pub const MIRROR: [usize; N_LANDMARKS] = [
    9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    19, 18, 17, 16, 21, 20, 13, 12, 11, 10, 15, 14,
    22, 23, 24, 25, 30, 29, 28, 27, 26,
    37, 36, 35, 34, 33, 32, 31, 42, 41, 40, 39, 38,
    45, 44, 43, 48, 47, 46,
];

/// Alignment targets on the 200 canvas: left eye centre, right eye centre,
/// mouth centre.
pub const ALIGN_ANCHORS: [[f64; 2]; 3] = [[70.0, 90.0], [130.0, 90.0], [100.0, 150.0]];

/// Eye centres of an aligned face may differ vertically by at most this.
pub const ALIGNED_TOLERANCE_PX: f64 = 2.0;

/// Where an AU centre sits: anchor landmarks (left, right) plus a vertical
/// offset in multiples of scale, positive downward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuCenterRule {
    pub au: u8,
    pub anchors: [usize; 2],
    pub offset: f64,
}

const fn rule(au: u8, anchors: [usize; 2], offset: f64) -> AuCenterRule {
    AuCenterRule { au, anchors, offset }
}

/// The fifteen AU-centre rules. Each centre replaces its own anchor landmark;
/// AUs sharing a location share anchors.
pub const AU_RULES: [AuCenterRule; 15] = [
    rule(1, [4, 5], -1.0 / 2.0),
    rule(2, [0, 9], -1.0 / 3.0),
    rule(4, [2, 7], 1.0 / 3.0),
    rule(5, [2, 7], 1.0 / 3.0),
    rule(6, [15, 20], 1.0),
    rule(7, [14, 21], 0.0),
    rule(9, [26, 30], -1.0 / 2.0),
    rule(10, [33, 35], 0.0),
    rule(12, LIP_CORNERS, 0.0),
    rule(14, LIP_CORNERS, 0.0),
    rule(15, LIP_CORNERS, 0.0),
    rule(17, [39, 41], 1.0 / 2.0),
    rule(20, LIP_CORNERS, 0.0),
    rule(23, [34, 40], 0.0),
    rule(24, [34, 40], 0.0),
];

/// The 49 points of one face in an `frame × frame` image.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: [[f64; 2]; N_LANDMARKS],
    pub frame: usize,
}

impl LandmarkSet {
    pub fn new(points: [[f64; 2]; N_LANDMARKS], frame: usize) -> Self {
        Self { points, frame }
    }

    /// The canonical template on the 200 canvas.
    pub fn template() -> Self {
        Self::new(TEMPLATE, CANVAS)
    }

    /// Builds from `x1 y1 … x49 y49`.
    pub fn from_flat(flat: &[f64], frame: usize) -> Result<Self> {
        if flat.len() != 2 * N_LANDMARKS {
            return Err(Error::Geometry(format!("expected {} coordinates, got {}", 2 * N_LANDMARKS, flat.len())));
        }
        let mut points = [[0.0; 2]; N_LANDMARKS];
        for (p, c) in points.iter_mut().zip(flat.chunks_exact(2)) {
            *p = [c[0], c[1]];
        }
        Ok(Self::new(points, frame))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn mean_of(&self, idx: impl IntoIterator<Item = usize>) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for i in idx {
            sx += self.points[i][0];
            sy += self.points[i][1];
            n += 1.0;
        }
        [sx / n, sy / n]
    }

    pub fn eye_centers(&self) -> [[f64; 2]; 2] {
        [self.mean_of(LEFT_EYE), self.mean_of(RIGHT_EYE)]
    }

    pub fn mouth_center(&self) -> [f64; 2] {
        self.mean_of(LIP_CORNERS)
    }

    /// Applies `f` to every point.
    pub fn map(&self, frame: usize, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self::new(self.points.map(f), frame)
    }

    /// Clamps every coordinate into `[0, frame]`.
    pub fn clamped(mut self) -> Self {
        let hi = self.frame as f64;
        for p in &mut self.points {
            p[0] = p[0].clamp(0.0, hi);
            p[1] = p[1].clamp(0.0, hi);
        }
        self
    }
}

/// Distance between the inner eye corners.
pub fn compute_scale(lm: &LandmarkSet) -> Result<f64> {
    let [a, b] = INNER_EYE_CORNERS.map(|i| lm.points[i]);
    let s = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    if s < 1.0 {
        return Err(Error::Geometry(format!("degenerate scale {s:.3} px")));
    }
    Ok(s)
}

fn check_aligned(lm: &LandmarkSet) -> Result<()> {
    let [l, r] = lm.eye_centers();
    let dy = (l[1] - r[1]).abs();
    if dy > ALIGNED_TOLERANCE_PX {
        return Err(Error::Geometry(format!("face not aligned: eye centres differ by {dy:.2} px vertically")));
    }
    Ok(())
}

/// One AU's pair of centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuCenter {
    pub au: u8,
    pub left: [f64; 2],
    pub right: [f64; 2],
}

pub fn compute_au_centers(lm: &LandmarkSet) -> Result<Vec<AuCenter>> {
    check_aligned(lm)?;
    let scale = compute_scale(lm)?;
    Ok(AU_RULES
        .iter()
        .map(|r| {
            let [left, right] = r.anchors.map(|i| [lm.points[i][0], lm.points[i][1] + r.offset * scale]);
            AuCenter { au: r.au, left, right }
        })
        .collect())
}

/// Replaces every anchor landmark by its AU centre.
pub fn apply_new_definition(lm: &LandmarkSet) -> Result<LandmarkSet> {
    let centers = compute_au_centers(lm)?;
    let mut out = lm.clone();
    for (r, c) in AU_RULES.iter().zip(&centers) {
        out.points[r.anchors[0]] = c.left;
        out.points[r.anchors[1]] = c.right;
    }
    Ok(out)
}

/// Indices touched by [`apply_new_definition`].
pub fn replaced_indices() -> Vec<usize> {
    let mut v: Vec<usize> = AU_RULES.iter().flat_map(|r| r.anchors).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn cell(coord: f64, l: usize, d: usize) -> usize {
    let k = (coord * d as f64 / l as f64).round();
    k.clamp(1.0, d as f64) as usize
}

/// 1-based response-map class of a point: `(ky - 1)·d + kx`, with each
/// rounded cell coordinate clamped into `[1, d]`.
pub fn encode_landmark_class(q: [f64; 2], l: usize, d: usize) -> usize {
    let (kx, ky) = (cell(q[0], l, d), cell(q[1], l, d));
    (ky - 1) * d + kx
}

/// Centre of a class's cell.
pub fn decode_landmark_class(y: usize, l: usize, d: usize) -> Result<[f64; 2]> {
    if y == 0 || y > d * d {
        return Err(Error::Label(format!("class index {y} outside [1, {}]", d * d)));
    }
    let (ky, kx) = ((y - 1) / d + 1, (y - 1) % d + 1);
    let step = l as f64 / d as f64;
    Ok([(kx as f64 - 0.5) * step, (ky as f64 - 0.5) * step])
}

/// Classes for all 49 points of a set, 1-based.
pub fn encode_landmarks(lm: &LandmarkSet, d: usize) -> Vec<usize> {
    lm.points.iter().map(|&q| encode_landmark_class(q, lm.frame, d)).collect()
}

/// `p ↦ [[a, -b], [b, a]]·p + t`: rotation, uniform scale and translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 };

    /// Rotation by `theta` radians about `center`, then scaling by `s`.
    pub fn about(center: [f64; 2], theta: f64, s: f64) -> Self {
        let (a, b) = (s * theta.cos(), s * theta.sin());
        Self { a, b, tx: center[0] - (a * center[0] - b * center[1]), ty: center[1] - (b * center[0] + a * center[1]) }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.a * p[0] - self.b * p[1] + self.tx, self.b * p[0] + self.a * p[1] + self.ty]
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-12 {
            return Err(Error::Geometry("singular similarity transform".into()));
        }
        let (a, b) = (self.a / det, -self.b / det);
        Ok(Self { a, b, tx: -(a * self.tx - b * self.ty), ty: -(b * self.tx + a * self.ty) })
    }

    /// Least-squares fit mapping `src[i]` onto `dst[i]`.
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Self> {
        if src.len() != dst.len() || src.len() < 2 {
            return Err(Error::Geometry("similarity fit needs at least two point pairs".into()));
        }
        let n = src.len() as f64;
        let mean = |pts: &[[f64; 2]]| {
            let s = pts.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
            [s[0] / n, s[1] / n]
        };
        let (ms, md) = (mean(src), mean(dst));
        let (mut sxx, mut num_a, mut num_b) = (0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let (sx, sy) = (s[0] - ms[0], s[1] - ms[1]);
            let (dx, dy) = (d[0] - md[0], d[1] - md[1]);
            sxx += sx * sx + sy * sy;
            num_a += sx * dx + sy * dy;
            num_b += sx * dy - sy * dx;
        }
        if sxx < 1e-12 {
            return Err(Error::Geometry("similarity fit on coincident points".into()));
        }
        let (a, b) = (num_a / sxx, num_b / sxx);
        Ok(Self { a, b, tx: md[0] - (a * ms[0] - b * ms[1]), ty: md[1] - (b * ms[0] + a * ms[1]) })
    }
}

/// Alignment anchors scaled onto a `canvas`-sided square.
pub fn align_targets(canvas: usize) -> [[f64; 2]; 3] {
    let k = canvas as f64 / CANVAS as f64;
    ALIGN_ANCHORS.map(|p| [p[0] * k, p[1] * k])
}

/// Samples a `[C, H, W]` image at `(x, y)` bilinearly, clamping to the border.
pub fn bilinear<T: Scalar>(image: &Tensor<T>, channel: usize, x: f64, y: f64) -> T {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let base = channel * h * w;
    let at = |yy: usize, xx: usize| image.data()[base + yy * w + xx].as_f64();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    T::of(top * (1.0 - fy) + bottom * fy)
}

/// Resamples `image` (`[C, H, W]`) onto a `side × side` canvas through
/// `forward` (source → destination coordinates).
pub fn warp<T: Scalar>(image: &Tensor<T>, forward: &Similarity, side: usize) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::Dimension { op: "warp", detail: format!("expected [C, H, W], got {:?}", image.shape()) });
    }
    let inv = forward.inverse()?;
    let c = image.shape()[0];
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for v in 0..side {
            for u in 0..side {
                let [x, y] = inv.apply([u as f64, v as f64]);
                out.push(bilinear(image, ch, x, y));
            }
        }
    }
    Tensor::new(&[c, side, side], out)
}

/// Maps the eye centres and mouth centre onto their template positions by a
/// least-squares similarity, resampling onto a `canvas × canvas` image.
pub fn similarity_align<T: Scalar>(
    image: &Tensor<T>,
    lm: &LandmarkSet,
    canvas: usize,
) -> Result<(Tensor<T>, LandmarkSet, Similarity)> {
    let [le, re] = lm.eye_centers();
    let src = [le, re, lm.mouth_center()];
    let t = Similarity::fit(&src, &align_targets(canvas))?;
    if t.scale() < 1e-6 {
        return Err(Error::Geometry("degenerate alignment".into()));
    }
    let warped = warp(image, &t, canvas)?;
    Ok((warped, lm.map(canvas, |p| t.apply(p)), t))
}

/// Crops `l × l` at `(ox, oy)` and optionally mirrors horizontally; mirrored
/// landmarks are re-indexed through [`MIRROR`].
pub fn crop_mirror<T: Scalar>(
    image: &Tensor<T>,
    lm: &LandmarkSet,
    l: usize,
    ox: usize,
    oy: usize,
    mirror: bool,
) -> Result<(Tensor<T>, LandmarkSet)> {
    let s = image.shape();
    if s.len() != 3 || ox + l > s[2] || oy + l > s[1] {
        return Err(Error::Dimension { op: "crop_mirror", detail: format!("{l}x{l} at ({ox},{oy}) in {s:?}") });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(c * l * l);
    for ch in 0..c {
        for y in 0..l {
            let row = ch * h * w + (oy + y) * w + ox;
            if mirror {
                out.extend(src[row..row + l].iter().rev());
            } else {
                out.extend_from_slice(&src[row..row + l]);
            }
        }
    }
    let shifted = lm.map(l, |p| [p[0] - ox as f64, p[1] - oy as f64]);
    let landmarks = if mirror { mirror_landmarks(&shifted) } else { shifted };
    Ok((Tensor::new(&[c, l, l], out)?, landmarks.clamped()))
}

/// `x ↦ frame - 1 - x` with left/right indices swapped.
pub fn mirror_landmarks(lm: &LandmarkSet) -> LandmarkSet {
    let w = lm.frame as f64 - 1.0;
    let mut points = [[0.0; 2]; N_LANDMARKS];
    for (i, p) in points.iter_mut().enumerate() {
        let q = lm.points[MIRROR[i]];
        *p = [w - q[0], q[1]];
    }
    LandmarkSet::new(points, lm.frame)
}

/// Uniform crop offset plus a fair-coin mirror.
pub fn random_crop_mirror<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    lm: &LandmarkSet,
    l: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, LandmarkSet)> {
    let s = image.shape();
    if s.len() != 3 || l > s[1] || l > s[2] {
        return Err(Error::Dimension { op: "random_crop_mirror", detail: format!("crop {l} from {s:?}") });
    }
    let ox = rng.random_range(0..=s[2] - l);
    let oy = rng.random_range(0..=s[1] - l);
    let mirror = rng.random_bool(0.5);
    crop_mirror(image, lm, l, ox, oy, mirror)
}

/// Writes faces one per line after a `# frame=L` header.
pub fn write_landmark_file(path: &Path, sets: &[LandmarkSet]) -> Result<()> {
    let frame = sets.first().map_or(0, |s| s.frame);
    if sets.iter().any(|s| s.frame != frame) {
        return Err(Error::Geometry("landmark sets in one file must share a frame".into()));
    }
    let mut text = format!("# frame={frame}\n");
    for s in sets {
        let line: Vec<String> = s.to_flat().iter().map(|v| format!("{v}")).collect();
        writeln!(text, "{}", line.join(" ")).expect("writing to a String");
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_landmark_file(path: &Path) -> Result<Vec<LandmarkSet>> {
    let text = std::fs::read_to_string(path)?;
    let mut frame = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(comment) = t.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("frame=") {
                let f = v.trim().parse().map_err(|e| Error::Parse { line: line_no, detail: format!("frame: {e}") })?;
                frame = Some(f);
            }
            continue;
        }
        let frame = frame.ok_or(Error::Parse { line: line_no, detail: "missing '# frame=L' header".into() })?;
        let flat = t
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
        let set = LandmarkSet::from_flat(&flat, frame).map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
        out.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn template_is_symmetric_under_mirror() {
        for i in 0..N_LANDMARKS {
            let (p, q) = (TEMPLATE[i], TEMPLATE[MIRROR[i]]);
            assert_abs_diff_eq!(p[0], 200.0 - q[0]);
            assert_abs_diff_eq!(p[1], q[1]);
            assert_eq!(MIRROR[MIRROR[i]], i);
        }
    }

    #[test]
    fn template_scale_and_anchors() {
        let t = LandmarkSet::template();
        assert_abs_diff_eq!(compute_scale(&t).unwrap(), 40.0);
        let [l, r] = t.eye_centers();
        assert_abs_diff_eq!(l[0], 70.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[0], 130.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.mouth_center()[1], 150.0);
    }

    #[test]
    fn scale_examples() {
        let mut t = LandmarkSet::template();
        t.points[13] = [60.0, 80.0];
        t.points[16] = [100.0, 80.0];
        assert_abs_diff_eq!(compute_scale(&t).unwrap(), 40.0);
        t.points[16] = [60.0, 80.0];
        assert!(matches!(compute_scale(&t), Err(Error::Geometry(_))));
    }

    #[test]
    fn misaligned_face_is_rejected() {
        let t = LandmarkSet::template();
        let rot = Similarity::about([100.0, 100.0], 0.3, 1.0);
        assert!(compute_au_centers(&t.map(200, |p| rot.apply(p))).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_landmark_class([88.0, 88.0], 176, 44), 946);
        assert_eq!(encode_landmark_class([176.0, 176.0], 176, 44), 1936);
        assert_eq!(encode_landmark_class([1.0, 1.0], 176, 44), 1);
        assert_eq!(encode_landmark_class([-50.0, 500.0], 176, 44), 43 * 44 + 1);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_landmark_class(1, 176, 44).unwrap(), [2.0, 2.0]);
        assert!(decode_landmark_class(0, 176, 44).is_err());
        assert!(decode_landmark_class(1937, 176, 44).is_err());
    }

    #[test]
    fn crop_without_mirror_translates() {
        let img = Tensor::<f32>::from_fn(&[1, 6, 6], |i| i as f32);
        let lm = LandmarkSet::template().map(6, |p| [p[0] / 50.0, p[1] / 50.0]);
        let (c, l2) = crop_mirror(&img, &lm, 4, 0, 0, false).unwrap();
        assert_eq!(c.data()[..4], [0.0, 1.0, 2.0, 3.0]);
        assert_eq!(c.data()[4], 6.0);
        assert_eq!(l2.points, lm.clone().map(4, |p| p).clamped().points);
    }
}
