//! Inference paths, frame-based F1, disentanglement probes and feature dumps.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_landmarks, N_LANDMARKS};
use crate::networks::{landmark_related_feature, BnMode, Bound, Forward, ModelParams, Module};
use crate::synthdata::SampleRecord;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::training::{Feed, Mode};
use crate::Real;

/// Binarization threshold on predicted probabilities.
pub const THRESHOLD: f64 = 0.5;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Eval-mode forward with every parameter bound as a constant.
fn frozen<'a>(tape: &'a mut Tape<Real>, model: &'a ModelParams<Real>, modules: &[Module]) -> (Bound, Forward<'a, Real>) {
    let bound = Bound::new().bind(tape, model, modules, false);
    (bound, Forward::new(tape, model, BnMode::Eval))
}

fn probabilities(tape: &Tape<Real>, logits: Var) -> Vec<Vec<f64>> {
    let t = tape.value(logits);
    let m = t.shape()[1];
    t.data().chunks_exact(m).map(|row| row.iter().map(|&z| sigmoid(f64::from(z))).collect()).collect()
}

/// `σ(F_a(E_f(g)))` for a `[B,3,l,l]` batch.
pub fn infer_source(model: &ModelParams<Real>, images: &Tensor<Real>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (bound, mut fwd) = frozen(&mut tape, model, &[Module::Ef, Module::Fa]);
    let img = fwd.tape.constant(images.clone());
    let x = fwd.encode_rich(&bound, img)?;
    let logits = fwd.detect_aus(&bound, x)?;
    drop(fwd);
    Ok(probabilities(&tape, logits))
}

/// Target inference: the latent feed scores `G(F̌_l(x), E_t(x))`, the raw
/// feed scores `x` itself.
pub fn infer_target(model: &ModelParams<Real>, images: &Tensor<Real>, feed: Feed) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (bound, mut fwd) = frozen(&mut tape, model, &[Module::Ef, Module::Fl, Module::Et, Module::G, Module::Fa]);
    let img = fwd.tape.constant(images.clone());
    let x = fwd.encode_rich(&bound, img)?;
    let feat = match feed {
        Feed::Raw => x,
        Feed::Latent => {
            let maps = fwd.detect_landmarks(&bound, x)?;
            let z_l = landmark_related_feature(fwd.tape, maps)?;
            let z_t = fwd.encode_texture(&bound, x)?;
            fwd.generate_latent(&bound, z_l, z_t)?
        }
    };
    let logits = fwd.detect_aus(&bound, feat)?;
    drop(fwd);
    Ok(probabilities(&tape, logits))
}

fn stack_images(records: &[SampleRecord]) -> Result<Tensor<Real>> {
    let refs: Vec<&Tensor<Real>> = records.iter().map(|r| &r.image).collect();
    Tensor::stack(&refs)
}

/// Probabilities for every record, `batch` at a time. Target records use
/// `feed`; source records always take the rich-feature path.
pub fn predict(model: &ModelParams<Real>, records: &[SampleRecord], feed: Option<Feed>, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let images = stack_images(chunk)?;
        out.extend(match feed {
            None => infer_source(model, &images)?,
            Some(f) => infer_target(model, &images, f)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    pub au: u8,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_au: Vec<AuMetrics>,
    /// Unweighted mean of per-AU F1.
    pub avg_f1: f64,
    pub samples: usize,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub feed: Option<Feed>,
}

/// Confusion counts of one AU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, zero when `P+R = 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Frame-based F1 per AU after thresholding. `aus` names the columns.
pub fn f1_frame(probs: &[Vec<f64>], labels: &[Vec<u8>], aus: &[u8], threshold: f64) -> Result<MetricsReport> {
    if probs.is_empty() {
        return Err(Error::InsufficientData("no predictions to score".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Label(format!("{} predictions but {} label rows", probs.len(), labels.len())));
    }
    let m = aus.len();
    if let Some(bad) = probs.iter().find(|r| r.len() != m) {
        return Err(Error::Label(format!("prediction row of length {} for {m} AUs", bad.len())));
    }
    if labels.iter().any(|r| r.len() != m) {
        return Err(Error::Label(format!("label rows must have {m} entries")));
    }
    let mut counts = vec![Confusion::default(); m];
    for (p, y) in probs.iter().zip(labels) {
        for j in 0..m {
            let c = &mut counts[j];
            match (p[j] >= threshold, y[j] == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    let per_au: Vec<AuMetrics> = aus
        .iter()
        .zip(&counts)
        .map(|(&au, c)| AuMetrics { au, f1: c.f1(), precision: c.precision(), recall: c.recall() })
        .collect();
    let avg_f1 = per_au.iter().map(|a| a.f1).sum::<f64>() / m as f64;
    Ok(MetricsReport { per_au, avg_f1, samples: probs.len(), mode: None, feed: None })
}

/// Intermediate features of one batch in eval mode.
pub struct Features {
    pub x: Tensor<Real>,
    /// Raw landmark response maps `[B,49,d,d]`.
    pub maps: Tensor<Real>,
    pub z_l: Tensor<Real>,
    pub z_t: Tensor<Real>,
    /// Raw `D_l(z_t)` maps.
    pub d_l: Tensor<Real>,
    /// `G(z_l, z_t)`.
    pub latent: Tensor<Real>,
}

pub fn extract_features(model: &ModelParams<Real>, images: &Tensor<Real>) -> Result<Features> {
    let mut tape = Tape::new();
    let modules = [Module::Ef, Module::Fl, Module::Et, Module::G, Module::Dl];
    let (bound, mut fwd) = frozen(&mut tape, model, &modules);
    let img = fwd.tape.constant(images.clone());
    let x = fwd.encode_rich(&bound, img)?;
    let maps = fwd.detect_landmarks(&bound, x)?;
    let z_l = landmark_related_feature(fwd.tape, maps)?;
    let z_t = fwd.encode_texture(&bound, x)?;
    let d_l = fwd.discriminate_landmarks(&bound, z_t)?;
    let latent = fwd.generate_latent(&bound, z_l, z_t)?;
    drop(fwd);
    let v = |var| tape.value(var).clone();
    Ok(Features { x: v(x), maps: v(maps), z_l: v(z_l), z_t: v(z_t), d_l: v(d_l), latent: v(latent) })
}

fn softmax_rows(data: &[Real], area: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(area) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Mean `|softmax(D_l(E_t(x))) − 1/d²|` over every map cell: zero when the
/// landmark discriminator is uniform everywhere.
pub fn landmark_uniformity_gap(model: &ModelParams<Real>, images: &Tensor<Real>) -> Result<f64> {
    let f = extract_features(model, images)?;
    let [_, _, h, w] = f.d_l.dims4("landmark_uniformity_gap")?;
    let area = h * w;
    let u = 1.0 / area as f64;
    let p = softmax_rows(f.d_l.data(), area);
    Ok(p.iter().map(|v| (v - u).abs()).sum::<f64>() / p.len() as f64)
}

/// Top-1 cell accuracy of F_l over all 49 landmarks of `records`.
pub fn landmark_accuracy(model: &ModelParams<Real>, records: &[SampleRecord], batch: usize) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in records.chunks(batch.max(1)) {
        let f = extract_features(model, &stack_images(chunk)?)?;
        let [_, _, d, _] = f.maps.dims4("landmark_accuracy")?;
        let area = d * d;
        let labels: Vec<usize> = chunk.iter().flat_map(|r| encode_landmarks(&r.landmarks, d)).collect();
        for (row, &y) in f.maps.data().chunks_exact(area).zip(&labels) {
            hit += usize::from(argmax(row) + 1 == y);
            total += 1;
        }
    }
    Ok(ratio(hit, total))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Minimum sample count for a probe.
pub const PROBE_MIN_SAMPLES: usize = 500;
pub const PROBE_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean held-out top-1 cell accuracy over landmarks.
    pub accuracy: f64,
    /// `1/classes`.
    pub chance: f64,
    pub train: usize,
    pub test: usize,
}

/// Softmax-regression probe from flattened features to every landmark's
/// cell. One linear map predicts all 49 landmarks; it is fitted by full-batch
/// gradient descent for [`PROBE_STEPS`] steps on 80% of the samples, and
/// scored on the rest.
///
/// The map `W = Xᵀ A` is kept in dual form, so each step costs one
/// `N × N` by `N × 49·classes` product regardless of feature width.
pub fn probe_disentanglement(features: &[Vec<Real>], labels: &[Vec<usize>], classes: usize, seed: u64) -> Result<ProbeReport> {
    let n = features.len();
    if n < PROBE_MIN_SAMPLES {
        return Err(Error::InsufficientData(format!("probe needs >= {PROBE_MIN_SAMPLES} samples, got {n}")));
    }
    if labels.len() != n || labels.iter().any(|l| l.len() != N_LANDMARKS || l.iter().any(|&y| y == 0 || y > classes)) {
        return Err(Error::Label(format!("probe needs {N_LANDMARKS} labels in [1, {classes}] per sample")));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension { op: "probe_disentanglement", detail: "ragged or empty features".into() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 4 / 5;
    let (train_idx, test_idx) = order.split_at(n_train);

    // Standardize with training statistics.
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for &i in train_idx {
        for (m, &v) in mean.iter_mut().zip(&features[i]) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train_idx {
        for ((s, &v), m) in var.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n_train as f64).sqrt().max(1e-6)).collect();
    let standardized = |idx: &[usize]| -> Vec<Real> {
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend(features[i].iter().zip(&mean).zip(&inv_std).map(|((&v, m), s)| ((f64::from(v) - m) * s) as Real));
        }
        out
    };
    let x_train = standardized(train_idx);
    let x_test = standardized(test_idx);
    let n_test = test_idx.len();

    // Gram matrices, scaled by 1/dim to keep logits O(1).
    let scale = 1.0 / dim as Real;
    let mut k_train = vec![0.0 as Real; n_train * n_train];
    Real::gemm(false, true, n_train, dim, n_train, scale, &x_train, &x_train, 0.0, &mut k_train);
    let mut k_test = vec![0.0 as Real; n_test * n_train];
    Real::gemm(false, true, n_test, dim, n_train, scale, &x_test, &x_train, 0.0, &mut k_test);

    // Primal gradient descent on W is `A -= η·(P − Y)/N` in dual form, stable
    // for η < 2N / λ_max(K).
    let lambda = power_iteration(&k_train, n_train);
    let eta = (n_train as f64 / lambda.max(1e-12)) as Real;
    let width = N_LANDMARKS * classes;
    let mut a = vec![0.0 as Real; n_train * width];
    let mut bias = vec![0.0 as Real; width];
    let mut logits = vec![0.0 as Real; n_train * width];
    for _ in 0..PROBE_STEPS {
        Real::gemm(false, false, n_train, n_train, width, 1.0, &k_train, &a, 0.0, &mut logits);
        let mut grad_bias = vec![0.0 as Real; width];
        for (row, &i) in logits.chunks_exact_mut(width).zip(train_idx) {
            for (lm, block) in row.chunks_exact_mut(classes).enumerate() {
                let b = &bias[lm * classes..(lm + 1) * classes];
                block.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
                softmax_in_place(block);
                block[labels[i][lm] - 1] -= 1.0;
                for (g, &v) in grad_bias[lm * classes..(lm + 1) * classes].iter_mut().zip(block.iter()) {
                    *g += v;
                }
            }
        }
        // `logits` now holds P − Y.
        let step = eta / n_train as Real;
        a.iter_mut().zip(&logits).for_each(|(w, &g)| *w -= step * g);
        bias.iter_mut().zip(&grad_bias).for_each(|(b, &g)| *b -= step * g);
    }
    let mut test_logits = vec![0.0 as Real; n_test * width];
    Real::gemm(false, false, n_test, n_train, width, 1.0, &k_test, &a, 0.0, &mut test_logits);
    let mut hits = 0usize;
    for (row, &i) in test_logits.chunks_exact(width).zip(test_idx) {
        for (lm, block) in row.chunks_exact(classes).enumerate() {
            let scores: Vec<Real> = block.iter().zip(&bias[lm * classes..(lm + 1) * classes]).map(|(&v, &b)| v + b).collect();
            hits += usize::from(argmax(&scores) + 1 == labels[i][lm]);
        }
    }
    Ok(ProbeReport {
        accuracy: hits as f64 / (n_test * N_LANDMARKS) as f64,
        chance: 1.0 / classes as f64,
        train: n_train,
        test: n_test,
    })
}

fn softmax_in_place(v: &mut [Real]) {
    let max = v.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

fn power_iteration(k: &[Real], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..30 {
        let w: Vec<f64> = k.chunks_exact(n).map(|row| row.iter().zip(&v).map(|(&a, b)| f64::from(a) * b).sum()).collect();
        lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lambda == 0.0 {
            break;
        }
        v = w.iter().map(|x| x / lambda).collect();
    }
    lambda
}

/// Channel sum of a `[C,H,W]` (or `[1,C,H,W]`) feature, min-max scaled to
/// 8-bit grey and written as binary PGM. A constant feature maps to mid-grey.
pub fn dump_feature_channelsum(feature: &Tensor<Real>, path: &Path) -> Result<()> {
    let s = feature.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::Dimension { op: "dump_feature_channelsum", detail: format!("shape {s:?}") }),
    };
    let area = h * w;
    let mut sum = vec![0.0f64; area];
    for ch in 0..c {
        for (acc, &v) in sum.iter_mut().zip(&feature.data()[ch * area..(ch + 1) * area]) {
            *acc += f64::from(v);
        }
    }
    let (lo, hi) = sum.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pixels: Vec<u8> = sum
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary 8-bit PGM as `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PGM header {fields:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM size '{s}'")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    Ok((w, h, data.to_vec()))
}

/// Local maxima strictly above all 8 neighbours and above `floor`.
pub fn count_peaks(pixels: &[u8], w: usize, h: usize, floor: u8) -> usize {
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            let v = pixels[y * w + x];
            if v <= floor {
                continue;
            }
            let mut is_peak = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        is_peak &= pixels[ny as usize * w + nx as usize] < v;
                    }
                }
            }
            count += usize::from(is_peak);
        }
    }
    count
}
