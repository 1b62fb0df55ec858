//! Training engine: mode table, Adam with two parameter groups, the
//! learning-rate schedule, one joint iteration and the epoch loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::geometry::{crop_mirror, encode_landmarks, N_LANDMARKS};
use crate::losses::{self, LossWeights, Term};
use crate::networks::{landmark_related_feature, Arch, BnMode, Bound, Domain, Forward, ModelParams, Module};
use crate::synthdata::{splitmix64, SampleRecord};
use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};
use crate::Real;

/// Training variants: the full method, its pseudo-label extension, the
/// ablation ladder and the feature-encoder-only baselines and upper bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Adld,
    AdldFull,
    BNet,
    BNetR,
    BNetRCc,
    BNetRCcAdl,
    BiS,
    BiSt,
    UiT,
    UiSt,
}

impl Mode {
    pub const ALL: [Mode; 10] = [
        Mode::Adld,
        Mode::AdldFull,
        Mode::BNet,
        Mode::BNetR,
        Mode::BNetRCc,
        Mode::BNetRCcAdl,
        Mode::BiS,
        Mode::BiSt,
        Mode::UiT,
        Mode::UiSt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Adld => "adld",
            Mode::AdldFull => "adld_full",
            Mode::BNet => "b_net",
            Mode::BNetR => "b_net_r",
            Mode::BNetRCc => "b_net_r_cc",
            Mode::BNetRCcAdl => "b_net_r_cc_adl",
            Mode::BiS => "bi_s",
            Mode::BiSt => "bi_st",
            Mode::UiT => "ui_t",
            Mode::UiSt => "ui_st",
        }
    }

    /// Whether the mode builds the disentangle-swap-translate graph.
    pub fn is_latent(self) -> bool {
        !matches!(self, Mode::BiS | Mode::BiSt | Mode::UiT | Mode::UiSt)
    }

    /// Whether source AU labels are consumed.
    pub fn uses_source_aus(self) -> bool {
        self != Mode::UiT
    }

    /// Whether target pseudo AU labels are consumed.
    pub fn uses_pseudo_aus(self) -> bool {
        matches!(self, Mode::AdldFull | Mode::UiT | Mode::UiSt)
    }

    pub fn uses_source(self) -> bool {
        self != Mode::UiT
    }

    pub fn uses_target(self) -> bool {
        self != Mode::BiS
    }

    /// Inference path used when no feed is requested explicitly.
    pub fn default_feed(self) -> Feed {
        if self.is_latent() {
            Feed::Latent
        } else {
            Feed::Raw
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Which feature the AU detector sees for target images at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feed {
    /// `G(z_l^t, z_t^t)`, the self-reconstructed latent feature.
    Latent,
    /// The rich feature `x^t` itself.
    Raw,
}

impl FromStr for Feed {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Feed::Latent),
            "raw" => Ok(Feed::Raw),
            _ => Err(Error::Config(format!("unknown feed '{s}' (expected latent or raw)"))),
        }
    }
}

/// One logged loss instance; also a metrics CSV column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossKey {
    /// AU loss on rich features: `x^s` with source labels, plus `x^t` with
    /// pseudo labels when the mode consumes them.
    LaSrc,
    /// AU loss on latent features: `x̃^t` with source labels, plus `x̃^s`
    /// with pseudo labels when the mode consumes them.
    LaLat,
    LlSrc,
    LlTgt,
    /// Landmark loss on `x̃^s` against target landmarks through frozen F_l.
    LlLatS,
    /// Landmark loss on `x̃^t` against source landmarks through frozen F_l.
    LlLatT,
    AdlD,
    AdlE,
    AdfDS,
    AdfDT,
    AdfG,
    RS,
    RT,
    CcS,
    CcT,
}

impl LossKey {
    pub const ALL: [LossKey; 15] = [
        LossKey::LaSrc,
        LossKey::LaLat,
        LossKey::LlSrc,
        LossKey::LlTgt,
        LossKey::LlLatS,
        LossKey::LlLatT,
        LossKey::AdlD,
        LossKey::AdlE,
        LossKey::AdfDS,
        LossKey::AdfDT,
        LossKey::AdfG,
        LossKey::RS,
        LossKey::RT,
        LossKey::CcS,
        LossKey::CcT,
    ];

    pub fn column(self) -> &'static str {
        match self {
            LossKey::LaSrc => "L_a_src",
            LossKey::LaLat => "L_a_lat",
            LossKey::LlSrc => "L_l_src",
            LossKey::LlTgt => "L_l_tgt",
            LossKey::LlLatS => "L_l_lat_s",
            LossKey::LlLatT => "L_l_lat_t",
            LossKey::AdlD => "L_adl_d",
            LossKey::AdlE => "L_adl_e",
            LossKey::AdfDS => "L_adf_d_s",
            LossKey::AdfDT => "L_adf_d_t",
            LossKey::AdfG => "L_adf_g",
            LossKey::RS => "L_r_s",
            LossKey::RT => "L_r_t",
            LossKey::CcS => "L_cc_s",
            LossKey::CcT => "L_cc_t",
        }
    }

    pub fn term(self) -> Term {
        match self {
            LossKey::LaSrc | LossKey::LaLat => Term::Au,
            LossKey::LlSrc | LossKey::LlTgt | LossKey::LlLatS | LossKey::LlLatT => Term::Landmark,
            LossKey::AdlD | LossKey::AdlE => Term::AdvLandmark,
            LossKey::AdfDS | LossKey::AdfDT | LossKey::AdfG => Term::AdvFeature,
            LossKey::RS | LossKey::RT => Term::Recon,
            LossKey::CcS | LossKey::CcT => Term::Cycle,
        }
    }

    /// Discriminator-side keys are minimized by the discriminators only.
    pub fn is_discriminator(self) -> bool {
        matches!(self, LossKey::AdlD | LossKey::AdfDS | LossKey::AdfDT)
    }
}

/// Active losses and trainable modules of a mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeGraph {
    pub mode: Mode,
    pub losses: BTreeSet<LossKey>,
    pub trainable: BTreeSet<Module>,
}

impl ModeGraph {
    pub fn has(&self, key: LossKey) -> bool {
        self.losses.contains(&key)
    }

    pub fn trains(&self, module: Module) -> bool {
        self.trainable.contains(&module)
    }
}

pub fn build_mode_graph(mode: Mode) -> ModeGraph {
    use LossKey::*;
    let base = [Module::Ef, Module::Fa, Module::Fl];
    let (losses, trainable): (&[LossKey], &[Module]) = match mode {
        Mode::BiS => (&[LaSrc, LlSrc], &base),
        Mode::BiSt => (&[LaSrc, LlSrc, LlTgt], &base),
        Mode::UiT => (&[LaSrc, LlTgt], &base),
        Mode::UiSt => (&[LaSrc, LlSrc, LlTgt], &base),
        Mode::BNet => (&[LaSrc, LaLat, LlSrc, LlTgt, LlLatS, LlLatT], &[Module::Ef, Module::Et, Module::G, Module::Fl, Module::Fa]),
        Mode::BNetR => (
            &[LaSrc, LaLat, LlSrc, LlTgt, LlLatS, LlLatT, RS, RT],
            &[Module::Ef, Module::Et, Module::G, Module::Fl, Module::Fa],
        ),
        Mode::BNetRCc => (
            &[LaSrc, LaLat, LlSrc, LlTgt, LlLatS, LlLatT, RS, RT, CcS, CcT],
            &[Module::Ef, Module::Et, Module::G, Module::Fl, Module::Fa],
        ),
        Mode::BNetRCcAdl => (
            &[LaSrc, LaLat, LlSrc, LlTgt, LlLatS, LlLatT, RS, RT, CcS, CcT, AdlD, AdlE],
            &[Module::Ef, Module::Et, Module::G, Module::Fl, Module::Fa, Module::Dl],
        ),
        Mode::Adld | Mode::AdldFull => (&LossKey::ALL, &Module::ALL),
    };
    ModeGraph { mode, losses: losses.iter().copied().collect(), trainable: trainable.iter().copied().collect() }
}

/// Adam hyper-parameters of one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamGroup {
    pub beta1: f64,
    pub beta2: f64,
    /// Learning rate before the epoch schedule is applied.
    pub lr: f64,
}

pub const ADAM_EPS: f64 = 1e-8;
/// Global gradient-norm ceiling per update.
pub const CLIP_NORM: f64 = 10.0;
/// Learning-rate factor of epochs 1..=10.
pub const LR_FACTORS: [f64; 10] = [1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.6, 0.4, 0.2, 0.2];

/// Generation and discrimination modules (group A) versus the AU-task
/// modules (group B).
pub fn in_group_a(module: Module) -> bool {
    matches!(module, Module::Et | Module::G | Module::Dl | Module::DfS | Module::DfT)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub group_a: AdamGroup,
    pub group_b: AdamGroup,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            group_a: AdamGroup { beta1: 0.5, beta2: 0.9, lr: 5e-5 },
            group_b: AdamGroup { beta1: 0.95, beta2: 0.999, lr: 1e-4 },
            eps: ADAM_EPS,
            clip_norm: CLIP_NORM,
        }
    }
}

/// Adam moments of one parameter; both vectors match the parameter's length.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }
}

/// Per-parameter Adam state plus the group settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimConfig,
    pub slots: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, slots: BTreeMap::new() }
    }

    pub fn group(&self, module: Module) -> AdamGroup {
        if in_group_a(module) {
            self.config.group_a
        } else {
            self.config.group_b
        }
    }
}

/// One bias-corrected Adam step. Errors on a non-finite gradient, naming it.
pub fn adam_update<T: Scalar>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    slot: &mut Moments<T>,
    group: AdamGroup,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if param.len() != grad.len() || slot.m.len() != param.len() || slot.v.len() != param.len() {
        return Err(Error::Dimension {
            op: "adam_update",
            detail: format!("'{name}': param {}, grad {}, moments {}", param.len(), grad.len(), slot.m.len()),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { term: format!("gradient of {name}") });
    }
    slot.step += 1;
    let t = slot.step as i32;
    let (b1, b2) = (T::of(group.beta1), T::of(group.beta2));
    let c1 = T::of(1.0 - group.beta1.powi(t));
    let c2 = T::of(1.0 - group.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut slot.m).zip(&mut slot.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning rate at a 1-based epoch: flat for five epochs, then stepping
/// down by a fifth per epoch to a floor of `0.2·base`.
pub fn lr_at(epoch: usize, base_lr: f64) -> Result<f64> {
    if !(1..=LR_FACTORS.len()).contains(&epoch) {
        return Err(Error::Config(format!("epoch {epoch} outside 1..={}", LR_FACTORS.len())));
    }
    Ok(base_lr * LR_FACTORS[epoch - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    /// Crop side `l`; response maps are `l/4` wide.
    pub image_size: usize,
    pub au_count: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Iterations per epoch; 0 derives `⌊|source| / batch⌋`.
    pub iters_per_epoch: usize,
    pub seed: u64,
    /// Random horizontal mirroring of training crops.
    pub mirror: bool,
    pub eval_feed: Feed,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Adld,
            weights: LossWeights::default(),
            image_size: 64,
            au_count: 6,
            batch_size: 16,
            epochs: 10,
            iters_per_epoch: 0,
            seed: 0,
            mirror: true,
            eval_feed: Feed::Latent,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.image_size < 32 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!("image size {} must be >= 32 and divisible by 4", self.image_size)));
        }
        if self.au_count == 0 || self.batch_size == 0 {
            return Err(Error::Config("AU count and batch size must be positive".into()));
        }
        if !(1..=LR_FACTORS.len()).contains(&self.epochs) {
            return Err(Error::Config(format!("epochs must lie in 1..={}", LR_FACTORS.len())));
        }
        if !self.mode.is_latent() && self.eval_feed == Feed::Latent {
            return Err(Error::Config(format!("mode {} has no generator; use feed raw", self.mode)));
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch { au_count: self.au_count }
    }

    pub fn map_side(&self) -> usize {
        self.image_size / 4
    }

    /// FNV-1a digest of the serialized config, used to match checkpoints.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
        format!("{hash:016x}")
    }
}

/// A mini-batch of one domain ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B,3,l,l]`.
    pub images: Tensor<T>,
    /// 1-based landmark cells, sample-major, `B·49` long.
    pub landmarks: Vec<usize>,
    /// Binary AU labels, sample-major, `B·m` long.
    pub aus: Option<Vec<u8>>,
}

/// Which AU annotation of a record a batch carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuLabels {
    True,
    Pseudo,
    None,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks records, mirroring those whose flag is set.
    pub fn assemble(records: &[&SampleRecord], map_side: usize, labels: AuLabels, mirror: &[bool]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let mut images = Vec::with_capacity(records.len());
        let mut landmarks = Vec::with_capacity(records.len() * N_LANDMARKS);
        let mut aus = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            let l = rec.image.shape()[1];
            let (img, lm) = if mirror.get(i).copied().unwrap_or(false) {
                crop_mirror(&rec.image, &rec.landmarks, l, 0, 0, true)?
            } else {
                (rec.image.clone(), rec.landmarks.clone())
            };
            images.push(img.cast::<T>());
            landmarks.extend(encode_landmarks(&lm, map_side));
            let row = match labels {
                AuLabels::True => Some(rec.aus.as_ref().ok_or_else(|| missing_labels(rec, "AU"))?),
                AuLabels::Pseudo => Some(rec.pseudo_aus.as_ref().ok_or_else(|| missing_labels(rec, "pseudo AU"))?),
                AuLabels::None => None,
            };
            if let Some(row) = row {
                aus.extend_from_slice(row);
            }
        }
        let refs: Vec<&Tensor<T>> = images.iter().collect();
        Ok(Self {
            images: Tensor::stack(&refs)?,
            landmarks,
            aus: (labels != AuLabels::None).then_some(aus),
        })
    }
}

fn missing_labels(rec: &SampleRecord, what: &str) -> Error {
    Error::Label(format!("record {} has no {what} labels", rec.id))
}

/// Fixed inputs of a training step besides the batches.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub graph: &'a ModeGraph,
    pub weights: &'a LossWeights,
    /// AU loss weights from source label rates.
    pub au_weights_source: &'a [f64],
    /// AU loss weights from target pseudo-label rates.
    pub au_weights_target: &'a [f64],
    pub lr_a: f64,
    pub lr_b: f64,
}

/// Loss values of one iteration, before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub losses: BTreeMap<LossKey, f64>,
    /// `Σ λ·loss` over every logged instance.
    pub total: f64,
    /// Whether either update had its gradient clipped.
    pub clipped: bool,
}

/// Feature values the discriminator step consumes as constants.
struct Snapshot<T> {
    x_s: Tensor<T>,
    x_t: Tensor<T>,
    xs_tilde: Tensor<T>,
    xt_tilde: Tensor<T>,
    zt_s: Tensor<T>,
    zt_t: Tensor<T>,
}

fn au_targets<'a>(batch: &'a Batch<impl Scalar>, what: &str) -> Result<&'a [u8]> {
    batch.aus.as_deref().ok_or_else(|| Error::Label(format!("{what} batch carries no AU labels")))
}

fn add_all<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    match vars {
        [one] => Ok(*one),
        _ => tape.elementwise_sum(vars),
    }
}

/// Clips to `max_norm` in place; returns whether clipping happened.
fn clip_global<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> bool {
    let norm = grads.iter().flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= k);
        log::debug!("gradient clipped: global norm {norm:.4} > {max_norm}");
        return true;
    }
    false
}

/// Backward from `objective`, clip, then Adam on every trainable binding.
fn apply_update<T: Scalar>(
    tape: &mut Tape<T>,
    objective: Var,
    bound: &Bound,
    model: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    lr_a: f64,
    lr_b: f64,
) -> Result<bool> {
    tape.backward(objective)?;
    let mut grads: Vec<Vec<T>> = bound
        .trainable()
        .iter()
        .map(|(_, v)| tape.grad(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(*v).numel()]))
        .collect();
    let clipped = clip_global(&mut grads, opt.config.clip_norm);
    let eps = opt.config.eps;
    for ((name, _), g) in bound.trainable().iter().zip(&grads) {
        let module = Module::of(name).ok_or_else(|| Error::Config(format!("unowned parameter '{name}'")))?;
        let group = opt.group(module);
        let lr = if in_group_a(module) { lr_a } else { lr_b };
        let param = model.params.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
        let slot = opt.slots.entry(name.clone()).or_insert_with(|| Moments::new(g.len()));
        adam_update(name, param.data_mut(), g, slot, group, lr, eps)?;
    }
    Ok(clipped)
}

fn check_value(key: LossKey, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { term: key.column().to_string() })
    }
}

/// One iteration: a discriminator update on detached features, then one
/// joint update of every other trainable module against the refreshed
/// discriminators. Both updates see the same pre-update generator, so this
/// equals running the discriminator step first.
pub fn train_step<T: Scalar>(
    model: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    src: &Batch<T>,
    tgt: &Batch<T>,
    ctx: &StepContext<'_>,
) -> Result<StepLog> {
    let g = ctx.graph;
    let mode = g.mode;
    let mut tape = Tape::new();
    let is_d = |m: &Module| matches!(m, Module::Dl | Module::DfS | Module::DfT);
    let main_modules: Vec<Module> = g.trainable.iter().copied().filter(|m| !is_d(m)).collect();
    let fixed_modules: Vec<Module> = Module::ALL.iter().copied().filter(|m| !is_d(m) && !g.trains(*m)).collect();
    let bound = Bound::new().bind(&mut tape, model, &main_modules, true).bind(&mut tape, model, &fixed_modules, false);
    let mut parts: Vec<(LossKey, Var)> = Vec::new();

    let mut fwd = Forward::new(&mut tape, model, BnMode::Train);
    let x_s = if mode.uses_source() {
        let img = fwd.tape.constant(src.images.clone());
        Some(fwd.encode_rich(&bound, img)?)
    } else {
        None
    };
    let x_t = if mode.uses_target() {
        let img = fwd.tape.constant(tgt.images.clone());
        Some(fwd.encode_rich(&bound, img)?)
    } else {
        None
    };

    let mut snapshot = None;
    if !mode.is_latent() {
        let mut au = Vec::new();
        if let (true, Some(x)) = (mode.uses_source_aus(), x_s) {
            let logits = fwd.detect_aus(&bound, x)?;
            au.push(losses::au_detection_loss(fwd.tape, logits, au_targets(src, "source")?, ctx.au_weights_source)?);
        }
        if let (true, Some(x)) = (mode.uses_pseudo_aus(), x_t) {
            let logits = fwd.detect_aus(&bound, x)?;
            au.push(losses::au_detection_loss(fwd.tape, logits, au_targets(tgt, "target")?, ctx.au_weights_target)?);
        }
        if g.has(LossKey::LaSrc) && !au.is_empty() {
            parts.push((LossKey::LaSrc, add_all(fwd.tape, &au)?));
        }
        if let (true, Some(x)) = (g.has(LossKey::LlSrc), x_s) {
            let maps = fwd.detect_landmarks(&bound, x)?;
            parts.push((LossKey::LlSrc, losses::landmark_cls_loss(fwd.tape, maps, &src.landmarks)?));
        }
        if let (true, Some(x)) = (g.has(LossKey::LlTgt), x_t) {
            let maps = fwd.detect_landmarks(&bound, x)?;
            parts.push((LossKey::LlTgt, losses::landmark_cls_loss(fwd.tape, maps, &tgt.landmarks)?));
        }
    } else {
        let (x_s, x_t) = (x_s.expect("source encoded"), x_t.expect("target encoded"));
        let full = mode.uses_pseudo_aus();
        // Disentangle.
        let maps_s = fwd.detect_landmarks(&bound, x_s)?;
        let maps_t = fwd.detect_landmarks(&bound, x_t)?;
        if g.has(LossKey::LlSrc) {
            parts.push((LossKey::LlSrc, losses::landmark_cls_loss(fwd.tape, maps_s, &src.landmarks)?));
        }
        if g.has(LossKey::LlTgt) {
            parts.push((LossKey::LlTgt, losses::landmark_cls_loss(fwd.tape, maps_t, &tgt.landmarks)?));
        }
        let zl_s = landmark_related_feature(fwd.tape, maps_s)?;
        let zl_t = landmark_related_feature(fwd.tape, maps_t)?;
        // E_t never passes gradient back into what feeds it.
        let xs_in = fwd.tape.stop_gradient(x_s);
        let xt_in = fwd.tape.stop_gradient(x_t);
        let zt_s = fwd.encode_texture(&bound, xs_in)?;
        let zt_t = fwd.encode_texture(&bound, xt_in)?;
        // Swap and translate.
        let xt_tilde = fwd.generate_latent(&bound, zl_s, zt_t)?;
        let xs_tilde = fwd.generate_latent(&bound, zl_t, zt_s)?;

        if g.has(LossKey::LaSrc) {
            let logits = fwd.detect_aus(&bound, x_s)?;
            let mut rich =
                vec![losses::au_detection_loss(fwd.tape, logits, au_targets(src, "source")?, ctx.au_weights_source)?];
            if full {
                let logits = fwd.detect_aus(&bound, x_t)?;
                rich.push(losses::au_detection_loss(fwd.tape, logits, au_targets(tgt, "target")?, ctx.au_weights_target)?);
            }
            parts.push((LossKey::LaSrc, add_all(fwd.tape, &rich)?));
        }
        if g.has(LossKey::LaLat) {
            let logits = fwd.detect_aus(&bound, xt_tilde)?;
            let mut lat =
                vec![losses::au_detection_loss(fwd.tape, logits, au_targets(src, "source")?, ctx.au_weights_source)?];
            if full {
                let logits = fwd.detect_aus(&bound, xs_tilde)?;
                lat.push(losses::au_detection_loss(fwd.tape, logits, au_targets(tgt, "target")?, ctx.au_weights_target)?);
            }
            parts.push((LossKey::LaLat, add_all(fwd.tape, &lat)?));
        }

        // F_l only constrains generated features: on them it is a constant,
        // and the landmark loss of x̃ reaches neither F_l nor E_f through
        // z_l either, so it is evaluated on a copy generated from detached
        // landmark features.
        let needs_frozen = g.has(LossKey::LlLatS) || g.has(LossKey::LlLatT) || g.has(LossKey::CcS) || g.has(LossKey::CcT);
        let frozen = if needs_frozen {
            Bound::new().bind(fwd.tape, fwd.model, &[Module::Fl], false)
        } else {
            Bound::new()
        };
        if g.has(LossKey::LlLatS) || g.has(LossKey::LlLatT) {
            let zl_s_c = fwd.tape.stop_gradient(zl_s);
            let zl_t_c = fwd.tape.stop_gradient(zl_t);
            if g.has(LossKey::LlLatS) {
                let xs_gen = fwd.generate_latent(&bound, zl_t_c, zt_s)?;
                let maps = fwd.detect_landmarks(&frozen, xs_gen)?;
                parts.push((LossKey::LlLatS, losses::landmark_cls_loss(fwd.tape, maps, &tgt.landmarks)?));
            }
            if g.has(LossKey::LlLatT) {
                let xt_gen = fwd.generate_latent(&bound, zl_s_c, zt_t)?;
                let maps = fwd.detect_landmarks(&frozen, xt_gen)?;
                parts.push((LossKey::LlLatT, losses::landmark_cls_loss(fwd.tape, maps, &src.landmarks)?));
            }
        }

        // Reconstruction targets are detached so E_f is shaped by the task
        // losses alone.
        let (xs_ref, xt_ref) = (xs_in, xt_in);
        if g.has(LossKey::RS) {
            let r_s = fwd.generate_latent(&bound, zl_s, zt_s)?;
            parts.push((LossKey::RS, losses::self_recon_loss(fwd.tape, r_s, xs_ref)?));
        }
        if g.has(LossKey::RT) {
            let r_t = fwd.generate_latent(&bound, zl_t, zt_t)?;
            parts.push((LossKey::RT, losses::self_recon_loss(fwd.tape, r_t, xt_ref)?));
        }
        if g.has(LossKey::CcS) || g.has(LossKey::CcT) {
            // Second disentangle-swap-translate: x̃^s holds z_l^t and the
            // texture of x^s, so swapping again restores both originals.
            let zl_s2 = {
                let m = fwd.detect_landmarks(&frozen, xs_tilde)?;
                landmark_related_feature(fwd.tape, m)?
            };
            let zl_t2 = {
                let m = fwd.detect_landmarks(&frozen, xt_tilde)?;
                landmark_related_feature(fwd.tape, m)?
            };
            let s_in = fwd.tape.stop_gradient(xs_tilde);
            let t_in = fwd.tape.stop_gradient(xt_tilde);
            let zt_s2 = fwd.encode_texture(&bound, s_in)?;
            let zt_t2 = fwd.encode_texture(&bound, t_in)?;
            if g.has(LossKey::CcS) {
                let xhat_s = fwd.generate_latent(&bound, zl_t2, zt_s2)?;
                parts.push((LossKey::CcS, losses::cross_cycle_loss(fwd.tape, xhat_s, xs_ref)?));
            }
            if g.has(LossKey::CcT) {
                let xhat_t = fwd.generate_latent(&bound, zl_s2, zt_t2)?;
                parts.push((LossKey::CcT, losses::cross_cycle_loss(fwd.tape, xhat_t, xt_ref)?));
            }
        }
        let value = |v: Var| fwd.tape.value(v).clone();
        snapshot = Some((
            Snapshot {
                x_s: value(x_s),
                x_t: value(x_t),
                xs_tilde: value(xs_tilde),
                xt_tilde: value(xt_tilde),
                zt_s: value(zt_s),
                zt_t: value(zt_t),
            },
            [xs_tilde, xt_tilde, zt_s, zt_t],
        ));
    }
    let stats: Vec<(String, BatchStats<T>)> = std::mem::take(&mut fwd.stats);
    drop(fwd);

    let mut log = BTreeMap::new();
    let mut clipped = false;
    let d_side = [LossKey::AdlD, LossKey::AdfDS, LossKey::AdfDT].iter().any(|k| g.has(*k));
    if let (true, Some((snap, _))) = (d_side, &snapshot) {
        let (d_log, d_clipped) = discriminator_step(model, opt, snap, src, tgt, ctx)?;
        log.extend(d_log);
        clipped |= d_clipped;
    }
    if let Some((_, [xs_tilde, xt_tilde, zt_s, zt_t])) = snapshot.as_ref().map(|(s, v)| (s, *v)) {
        let mut judges = Vec::new();
        if g.has(LossKey::AdlE) {
            judges.push(Module::Dl);
        }
        if g.has(LossKey::AdfG) {
            judges.extend([Module::DfS, Module::DfT]);
        }
        let dbound = Bound::new().bind(&mut tape, model, &judges, false);
        let mut fwd = Forward::new(&mut tape, model, BnMode::Train);
        if g.has(LossKey::AdlE) {
            let m_s = fwd.discriminate_landmarks(&dbound, zt_s)?;
            let m_t = fwd.discriminate_landmarks(&dbound, zt_t)?;
            let e_s = losses::landmark_adv_e_loss(fwd.tape, m_s)?;
            let e_t = losses::landmark_adv_e_loss(fwd.tape, m_t)?;
            parts.push((LossKey::AdlE, fwd.tape.add(e_s, e_t)?));
        }
        if g.has(LossKey::AdfG) {
            let f_s = fwd.discriminate_feature(&dbound, xs_tilde, Domain::Source)?;
            let f_t = fwd.discriminate_feature(&dbound, xt_tilde, Domain::Target)?;
            let g_s = losses::feature_adv_g_loss(fwd.tape, f_s)?;
            let g_t = losses::feature_adv_g_loss(fwd.tape, f_t)?;
            parts.push((LossKey::AdfG, fwd.tape.add(g_s, g_t)?));
        }
    }

    for &(key, v) in &parts {
        log.insert(key, check_value(key, tape.value(v).item().as_f64())?);
    }
    if !parts.is_empty() {
        let weighted: Vec<(Term, Var)> = parts.iter().map(|&(k, v)| (k.term(), v)).collect();
        let objective = losses::total_objective(&mut tape, &weighted, ctx.weights)?;
        clipped |= apply_update(&mut tape, objective, &bound, model, opt, ctx.lr_a, ctx.lr_b)?;
    }
    model.update_running_stats(&stats)?;

    let terms: Vec<(Term, f64)> = log.iter().map(|(k, &v)| (k.term(), v)).collect();
    let total = losses::total_value(&terms, ctx.weights)?;
    Ok(StepLog { losses: log, total, clipped })
}

fn discriminator_step<T: Scalar>(
    model: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    snap: &Snapshot<T>,
    src: &Batch<T>,
    tgt: &Batch<T>,
    ctx: &StepContext<'_>,
) -> Result<(BTreeMap<LossKey, f64>, bool)> {
    let g = ctx.graph;
    let mut tape = Tape::new();
    let mut needed = Vec::new();
    for (key, m) in [(LossKey::AdlD, Module::Dl), (LossKey::AdfDS, Module::DfS), (LossKey::AdfDT, Module::DfT)] {
        if g.has(key) {
            needed.push(m);
        }
    }
    let (train, fixed): (Vec<Module>, Vec<Module>) = needed.into_iter().partition(|m| g.trains(*m));
    let bound = Bound::new().bind(&mut tape, model, &train, true).bind(&mut tape, model, &fixed, false);
    let mut fwd = Forward::new(&mut tape, model, BnMode::Train);
    let mut parts = Vec::new();
    let mut c = |t: &Tensor<T>| fwd.tape.constant(t.clone());
    let (zt_s, zt_t, x_s, x_t, xs_tilde, xt_tilde) =
        (c(&snap.zt_s), c(&snap.zt_t), c(&snap.x_s), c(&snap.x_t), c(&snap.xs_tilde), c(&snap.xt_tilde));
    if g.has(LossKey::AdlD) {
        let m_s = fwd.discriminate_landmarks(&bound, zt_s)?;
        let m_t = fwd.discriminate_landmarks(&bound, zt_t)?;
        let d_s = losses::landmark_adv_d_loss(fwd.tape, m_s, &src.landmarks)?;
        let d_t = losses::landmark_adv_d_loss(fwd.tape, m_t, &tgt.landmarks)?;
        parts.push((LossKey::AdlD, fwd.tape.add(d_s, d_t)?));
    }
    for (key, real, fake, domain) in
        [(LossKey::AdfDS, x_s, xs_tilde, Domain::Source), (LossKey::AdfDT, x_t, xt_tilde, Domain::Target)]
    {
        if g.has(key) {
            let r = fwd.discriminate_feature(&bound, real, domain)?;
            let f = fwd.discriminate_feature(&bound, fake, domain)?;
            parts.push((key, losses::feature_adv_d_loss(fwd.tape, r, f)?));
        }
    }
    drop(fwd);
    let mut log = BTreeMap::new();
    for &(key, v) in &parts {
        log.insert(key, check_value(key, tape.value(v).item().as_f64())?);
    }
    let weighted: Vec<(Term, Var)> = parts.iter().map(|&(k, v)| (k.term(), v)).collect();
    let objective = losses::total_objective(&mut tape, &weighted, ctx.weights)?;
    let clipped = apply_update(&mut tape, objective, &bound, model, opt, ctx.lr_a, ctx.lr_b)?;
    Ok((log, clipped))
}

/// Metrics CSV header.
pub fn csv_header() -> String {
    let mut cols = vec!["iter", "epoch", "lr_A", "lr_B"];
    cols.extend(LossKey::ALL.iter().map(|k| k.column()));
    cols.push("total");
    cols.join(",")
}

/// One CSV row; inactive terms are left empty.
pub fn csv_row(iter: usize, epoch: usize, lr_a: f64, lr_b: f64, log: &StepLog) -> String {
    let mut cells = vec![iter.to_string(), epoch.to_string(), lr_a.to_string(), lr_b.to_string()];
    cells.extend(LossKey::ALL.iter().map(|k| log.losses.get(k).map(f64::to_string).unwrap_or_default()));
    cells.push(log.total.to_string());
    cells.join(",")
}

/// Derives an independent stream seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

const STREAM_INIT: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_MIRROR: u64 = 4;

/// Endless sequence of shuffled passes over one domain; the k-th pass is a
/// pure function of `(seed, k)`.
struct Sampler {
    seed: u64,
    len: usize,
    pass: usize,
    order: Vec<usize>,
}

impl Sampler {
    fn new(seed: u64, len: usize) -> Self {
        Self { seed, len, pass: usize::MAX, order: Vec::new() }
    }

    fn index(&mut self, position: usize) -> usize {
        let pass = position / self.len;
        if pass != self.pass {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, pass as u64));
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut rng);
            self.pass = pass;
        }
        self.order[position % self.len]
    }
}

/// AU loss weights from label rows; zero rates are raised to half a
/// positive so the inverse stays finite.
pub fn au_weights_from(rows: &[Vec<u8>], m: usize) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no AU label rows for loss weights".into()));
    }
    let floor = 0.5 / rows.len() as f64;
    let rates: Vec<f64> = losses::occurrence_rates(rows, m).into_iter().map(|r| r.max(floor)).collect();
    losses::compute_au_weights(&rates)
}

/// What the observer sees after each iteration.
pub struct Progress<'a> {
    pub iteration: usize,
    pub epoch: usize,
    pub log: &'a StepLog,
    pub model: &'a ModelParams<Real>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams<Real>,
    pub iterations: usize,
    pub clipped_steps: usize,
    pub last: Option<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Checkpoint directory of a 1-based epoch.
pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:02}"))
}

/// Latest checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    if !out.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.parse::<usize>().ok());
        if let (Some(e), true) = (epoch, path.join(checkpoint::INDEX_FILE).exists()) {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Keeps the header and rows up to `iteration`.
fn truncate_metrics(path: &Path, iteration: usize) -> Result<()> {
    let mut kept = Vec::new();
    if path.exists() {
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            let iter = line.split(',').next().and_then(|c| c.parse::<usize>().ok());
            if i == 0 || iter.is_some_and(|it| it <= iteration) {
                kept.push(line);
            }
        }
    }
    if kept.is_empty() {
        kept.push(csv_header());
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

/// Runs the epoch loop, writing `metrics.csv` and one checkpoint per epoch
/// under `out`. With `resume`, continues from the latest checkpoint.
pub fn train(
    cfg: &TrainConfig,
    source: &[SampleRecord],
    target: &[SampleRecord],
    out: &Path,
    resume: bool,
    observer: &mut dyn FnMut(&Progress<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let graph = build_mode_graph(cfg.mode);
    let mode = cfg.mode;
    if (mode.uses_source() && source.is_empty()) || (mode.uses_target() && target.is_empty()) {
        return Err(Error::InsufficientData(format!("mode {mode} needs non-empty source and target sets")));
    }
    for rec in source.iter().chain(target) {
        let l = rec.image.shape().get(1).copied().unwrap_or(0);
        if l != cfg.image_size {
            return Err(Error::Config(format!("record {} has side {l}, config expects {}", rec.id, cfg.image_size)));
        }
    }
    let m = cfg.au_count;
    let source_rows: Vec<Vec<u8>> = if mode.uses_source_aus() {
        source.iter().map(|r| r.aus.clone().ok_or_else(|| missing_labels(r, "AU"))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let pseudo_rows: Vec<Vec<u8>> = if mode.uses_pseudo_aus() {
        target.iter().map(|r| r.pseudo_aus.clone().ok_or_else(|| missing_labels(r, "pseudo AU"))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let w_src = if source_rows.is_empty() { vec![1.0 / m as f64; m] } else { au_weights_from(&source_rows, m)? };
    let w_tgt = if pseudo_rows.is_empty() { vec![1.0 / m as f64; m] } else { au_weights_from(&pseudo_rows, m)? };

    fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let (mut model, mut opt, start_epoch, mut iteration) = match resume.then(|| latest_checkpoint(out)).transpose()?.flatten() {
        Some(dir) => {
            let ck = Checkpoint::load(&dir)?;
            if ck.meta.config_digest != cfg.digest() {
                return Err(Error::Config(format!("checkpoint {} was written under a different config", dir.display())));
            }
            truncate_metrics(&metrics_path, ck.meta.iteration)?;
            log::info!("resuming from {} at iteration {}", dir.display(), ck.meta.iteration);
            (ck.model, ck.optimizer, ck.meta.epoch + 1, ck.meta.iteration)
        }
        None => {
            fs::write(&metrics_path, csv_header() + "\n")?;
            (ModelParams::init(cfg.arch(), stream_seed(cfg.seed, STREAM_INIT)), OptimizerState::new(cfg.optim), 1, 0)
        }
    };

    // An epoch is one pass over the source set, or the target set when the
    // mode sees no source images.
    let driver = if mode.uses_source() { source.len() } else { target.len() };
    let per_epoch = if cfg.iters_per_epoch > 0 { cfg.iters_per_epoch } else { (driver / cfg.batch_size).max(1) };
    let mut src_sampler = Sampler::new(stream_seed(cfg.seed, STREAM_SOURCE), source.len().max(1));
    let mut tgt_sampler = Sampler::new(stream_seed(cfg.seed, STREAM_TARGET), target.len().max(1));
    let mut csv = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let d = cfg.map_side();
    let b = cfg.batch_size;
    let src_labels = if mode.uses_source_aus() { AuLabels::True } else { AuLabels::None };
    let tgt_labels = if mode.uses_pseudo_aus() { AuLabels::Pseudo } else { AuLabels::None };
    let mut outcome_last = None;
    let mut clipped_steps = 0;
    let mut checkpoints = Vec::new();

    for epoch in start_epoch..=cfg.epochs {
        let lr_a = lr_at(epoch, cfg.optim.group_a.lr)?;
        let lr_b = lr_at(epoch, cfg.optim.group_b.lr)?;
        let ctx = StepContext {
            graph: &graph,
            weights: &cfg.weights,
            au_weights_source: &w_src,
            au_weights_target: &w_tgt,
            lr_a,
            lr_b,
        };
        for _ in 0..per_epoch {
            let base = iteration * b;
            iteration += 1;
            let mut flip_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_MIRROR ^ ((iteration as u64) << 8)));
            let flips: Vec<bool> = (0..2 * b).map(|_| cfg.mirror && flip_rng.random_bool(0.5)).collect();
            // A domain the mode ignores gets a stand-in batch that is never read.
            let draw = |recs: &[SampleRecord], sampler: &mut Sampler, labels, flips: &[bool]| {
                let picked: Vec<&SampleRecord> = (0..b).map(|j| &recs[sampler.index(base + j)]).collect();
                Batch::<Real>::assemble(&picked, d, labels, flips)
            };
            let (src, tgt) = match (mode.uses_source(), mode.uses_target()) {
                (true, true) => (
                    draw(source, &mut src_sampler, src_labels, &flips[..b])?,
                    draw(target, &mut tgt_sampler, tgt_labels, &flips[b..])?,
                ),
                (true, false) => {
                    let src = draw(source, &mut src_sampler, src_labels, &flips[..b])?;
                    (src.clone(), src)
                }
                (false, _) => {
                    let tgt = draw(target, &mut tgt_sampler, tgt_labels, &flips[b..])?;
                    (tgt.clone(), tgt)
                }
            };
            let log = train_step(&mut model, &mut opt, &src, &tgt, &ctx)?;
            clipped_steps += usize::from(log.clipped);
            writeln!(csv, "{}", csv_row(iteration, epoch, lr_a, lr_b, &log))?;
            observer(&Progress { iteration, epoch, log: &log, model: &model })?;
            if iteration % 50 == 0 {
                log::info!("epoch {epoch} iter {iteration} total {:.5}", log.total);
            }
            outcome_last = Some(log);
        }
        csv.flush()?;
        let dir = epoch_dir(out, epoch);
        let meta = CheckpointMeta { epoch, iteration, config_digest: cfg.digest(), config: cfg.clone() };
        Checkpoint { meta, model: model.clone(), optimizer: opt.clone() }.save(&dir)?;
        checkpoints.push(dir);
    }
    csv.flush()?;
    Ok(TrainOutcome { model, iterations: iteration, clipped_steps, last: outcome_last, checkpoints })
}
