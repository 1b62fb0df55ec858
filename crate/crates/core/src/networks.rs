//! The eight sub-networks as forward functions over named parameters.
//!
//! Every convolution is 3x3, stride 1, padding 1; only the two average pools
//! in the rich encoder change resolution, so response maps are `l/4` wide.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::N_LANDMARKS;
use crate::tensor::{BatchStats, Normalization, Scalar, Tape, Tensor, Var};

/// Channel width of x, z_t and latent features.
pub const FEATURE_CHANNELS: usize = 64;
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in a batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    /// Rich feature encoder E_f.
    Ef,
    /// Texture encoder E_t.
    Et,
    /// Generator G.
    G,
    /// Landmark detector F_l.
    Fl,
    /// AU detector F_a.
    Fa,
    /// Landmark discriminator D_l.
    Dl,
    /// Source feature discriminator D_f^s.
    DfS,
    /// Target feature discriminator D_f^t.
    DfT,
}

impl Module {
    pub const ALL: [Module; 8] =
        [Module::Ef, Module::Et, Module::G, Module::Fl, Module::Fa, Module::Dl, Module::DfS, Module::DfT];

    pub fn prefix(self) -> &'static str {
        match self {
            Module::Ef => "e_f",
            Module::Et => "e_t",
            Module::G => "g",
            Module::Fl => "f_l",
            Module::Fa => "f_a",
            Module::Dl => "d_l",
            Module::DfS => "d_f_s",
            Module::DfT => "d_f_t",
        }
    }

    /// The module owning a parameter name.
    pub fn of(name: &str) -> Option<Module> {
        let head = name.split('.').next()?;
        Module::ALL.into_iter().find(|m| m.prefix() == head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    Batch,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { cin: usize, cout: usize, norm: Norm, prelu: bool },
    Pool,
}

const fn conv(cin: usize, cout: usize, norm: Norm, prelu: bool) -> Layer {
    Layer::Conv { cin, cout, norm, prelu }
}

const EF_PLAN: [Layer; 6] = [
    conv(3, 32, Norm::Batch, true),
    conv(32, 32, Norm::Batch, true),
    Layer::Pool,
    conv(32, 64, Norm::Batch, true),
    conv(64, 64, Norm::None, false),
    Layer::Pool,
];
const LANDMARK_PLAN: [Layer; 5] = [
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, N_LANDMARKS, Norm::None, false),
];
const ET_PLAN: [Layer; 4] = [
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::None, false),
];
const G_PLAN: [Layer; 5] = [
    conv(65, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::Instance, true),
    conv(64, 64, Norm::None, false),
];
const FA_BRANCH_PLAN: [Layer; 4] = [
    conv(64, 32, Norm::Batch, true),
    conv(32, 32, Norm::Batch, true),
    conv(32, 16, Norm::Batch, true),
    conv(16, 16, Norm::Batch, true),
];
const FA_BRANCH_OUT: usize = 16;
const DF_PLAN: [Layer; 5] = [
    conv(64, 64, Norm::Instance, true),
    conv(64, 32, Norm::Instance, true),
    conv(32, 16, Norm::Instance, true),
    conv(16, 8, Norm::Instance, true),
    conv(8, 1, Norm::None, false),
];

fn plan(module: Module) -> &'static [Layer] {
    match module {
        Module::Ef => &EF_PLAN,
        Module::Et => &ET_PLAN,
        Module::G => &G_PLAN,
        Module::Fl | Module::Dl => &LANDMARK_PLAN,
        Module::Fa => &FA_BRANCH_PLAN,
        Module::DfS | Module::DfT => &DF_PLAN,
    }
}

/// Architecture hyper-parameters that vary between runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Number of AUs, `m`.
    pub au_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn stack_specs(prefix: &str, layers: &[Layer], out: &mut Vec<ParamSpec>, buffers: &mut Vec<ParamSpec>) {
    let mut k = 0;
    for layer in layers {
        let Layer::Conv { cin, cout, norm, prelu } = *layer else { continue };
        let p = |s: &str| format!("{prefix}.conv{k}.{s}");
        out.push(ParamSpec { name: p("weight"), shape: vec![cout, cin, 3, 3], init: Init::HeNormal { fan_in: cin * 9 } });
        out.push(ParamSpec { name: p("bias"), shape: vec![cout], init: Init::Zeros });
        if norm != Norm::None {
            let n = |s: &str| format!("{prefix}.norm{k}.{s}");
            out.push(ParamSpec { name: n("gamma"), shape: vec![cout], init: Init::Ones });
            out.push(ParamSpec { name: n("beta"), shape: vec![cout], init: Init::Zeros });
            if norm == Norm::Batch {
                buffers.push(ParamSpec { name: n("running_mean"), shape: vec![cout], init: Init::Zeros });
                buffers.push(ParamSpec { name: n("running_var"), shape: vec![cout], init: Init::Ones });
            }
        }
        if prelu {
            out.push(ParamSpec {
                name: format!("{prefix}.prelu{k}.slope"),
                shape: vec![cout],
                init: Init::Const(PRELU_INIT),
            });
        }
        k += 1;
    }
}

fn au_prefix(j: usize) -> String {
    format!("f_a.au{j}")
}

/// Parameter and buffer layout of one module, in initialization order.
pub fn module_specs(module: Module, arch: Arch) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
    let (mut params, mut buffers) = (Vec::new(), Vec::new());
    if module == Module::Fa {
        for j in 0..arch.au_count {
            let prefix = au_prefix(j);
            stack_specs(&prefix, &FA_BRANCH_PLAN, &mut params, &mut buffers);
            params.push(ParamSpec {
                name: format!("{prefix}.fc.weight"),
                shape: vec![1, FA_BRANCH_OUT],
                init: Init::HeNormal { fan_in: FA_BRANCH_OUT },
            });
            params.push(ParamSpec { name: format!("{prefix}.fc.bias"), shape: vec![1], init: Init::Zeros });
        }
    } else {
        stack_specs(module.prefix(), plan(module), &mut params, &mut buffers);
    }
    (params, buffers)
}

/// One row of the architecture table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescribeRow {
    pub module: Module,
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Every learnable tensor with its element count.
pub fn describe(arch: Arch) -> Vec<DescribeRow> {
    Module::ALL
        .into_iter()
        .flat_map(|m| {
            module_specs(m, arch).0.into_iter().map(move |s| DescribeRow {
                module: m,
                count: s.shape.iter().product(),
                name: s.name,
                shape: s.shape,
            })
        })
        .collect()
}

pub fn param_count(arch: Arch) -> usize {
    describe(arch).iter().map(|r| r.count).sum()
}

/// Named learnable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Arch,
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut params, mut buffers) = (BTreeMap::new(), BTreeMap::new());
        let fill = |spec: &ParamSpec, rng: &mut ChaCha8Rng| {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| T::of(normal.sample(rng))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Const(v) => vec![T::of(v); n],
            };
            Tensor::new(&spec.shape, data).expect("spec shape matches data")
        };
        for m in Module::ALL {
            let (p, b) = module_specs(m, arch);
            for s in &p {
                params.insert(s.name.clone(), fill(s, &mut rng));
            }
            for s in &b {
                buffers.insert(s.name.clone(), fill(s, &mut rng));
            }
        }
        Self { arch, params, buffers }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::Config(format!("missing buffer '{name}'")))
    }

    /// Names of the parameters belonging to `module`.
    pub fn names_of(&self, module: Module) -> impl Iterator<Item = &String> {
        self.params.keys().filter(move |n| Module::of(n) == Some(module))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds batch statistics into running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let (mom, rest) = (T::of(BN_MOMENTUM), T::of(1.0 - BN_MOMENTUM));
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self.buffers.get_mut(&name).ok_or_else(|| Error::Config(format!("missing buffer '{name}'")))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = mom * *r + rest * b;
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite) && self.buffers.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ModelParams { arch: self.arch, params: c(&self.params), buffers: c(&self.buffers) }
    }
}

/// Parameters placed on a tape, either trainable or as frozen constants.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places every parameter of `modules` on the tape.
    pub fn bind<T: Scalar>(
        mut self,
        tape: &mut Tape<T>,
        model: &ModelParams<T>,
        modules: &[Module],
        trainable: bool,
    ) -> Self {
        for &m in modules {
            for name in model.names_of(m) {
                let value = model.params[name].clone();
                let v = tape.leaf(value, trainable);
                if trainable {
                    self.trainable.push((name.clone(), v));
                }
                self.vars.insert(name.clone(), v);
            }
        }
        self
    }

    /// Overrides one binding with an existing tape variable.
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("parameter '{name}' is not bound")))
    }

    /// Trainable parameters in binding order.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }
}

/// How batch-norm layers obtain statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; collected for running-average updates.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Shared state of one forward pass.
pub struct Forward<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub model: &'a ModelParams<T>,
    pub bn: BnMode,
    /// Batch statistics gathered in [`BnMode::Train`], keyed by layer prefix.
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, model: &'a ModelParams<T>, bn: BnMode) -> Self {
        Self { tape, model, bn, stats: Vec::new() }
    }

    fn run_stack(&mut self, bound: &Bound, prefix: &str, layers: &[Layer], mut x: Var) -> Result<Var> {
        let mut k = 0;
        for layer in layers {
            x = match *layer {
                Layer::Pool => self.tape.avg_pool2x2(x)?,
                Layer::Conv { norm, prelu, .. } => {
                    let name = |s: &str| format!("{prefix}.conv{k}.{s}");
                    let mut y = self.tape.conv2d(x, bound.get(&name("weight"))?, bound.get(&name("bias"))?, 1, 1)?;
                    if norm != Norm::None {
                        let norm_prefix = format!("{prefix}.norm{k}");
                        let gamma = bound.get(&format!("{norm_prefix}.gamma"))?;
                        let beta = bound.get(&format!("{norm_prefix}.beta"))?;
                        let eps = T::of(NORM_EPS);
                        y = match (norm, self.bn) {
                            (Norm::Batch, BnMode::Train) => {
                                let (y, stats) = self.tape.normalize(y, Normalization::BatchTrain, gamma, beta, eps)?;
                                self.stats.push((norm_prefix, stats.expect("batch statistics in train mode")));
                                y
                            }
                            (Norm::Batch, BnMode::Eval) => {
                                let model = self.model;
                                let mean = model.buffer(&format!("{norm_prefix}.running_mean"))?.data();
                                let var = model.buffer(&format!("{norm_prefix}.running_var"))?.data();
                                self.tape.normalize(y, Normalization::BatchEval { mean, var }, gamma, beta, eps)?.0
                            }
                            _ => self.tape.normalize(y, Normalization::Instance, gamma, beta, eps)?.0,
                        };
                    }
                    if prelu {
                        y = self.tape.prelu(y, bound.get(&format!("{prefix}.prelu{k}.slope"))?)?;
                    }
                    k += 1;
                    y
                }
            };
        }
        Ok(x)
    }

    /// E_f: `[B,3,l,l]` image to rich feature x `[B,64,l/4,l/4]` in (-1,1).
    pub fn encode_rich(&mut self, bound: &Bound, image: Var) -> Result<Var> {
        let [_, c, h, w] = self.tape.value(image).dims4("encode_rich")?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Dimension {
                op: "encode_rich",
                detail: format!("expected [B,3,l,l] with l divisible by 4, got {:?}", self.tape.shape(image)),
            });
        }
        let x = self.run_stack(bound, "e_f", &EF_PLAN, image)?;
        Ok(self.tape.tanh(x))
    }

    /// F_l: raw landmark response maps `[B,49,d,d]`.
    pub fn detect_landmarks(&mut self, bound: &Bound, feat: Var) -> Result<Var> {
        self.run_stack(bound, "f_l", &LANDMARK_PLAN, feat)
    }

    /// D_l: raw landmark response maps computed from a texture feature.
    pub fn discriminate_landmarks(&mut self, bound: &Bound, z_t: Var) -> Result<Var> {
        self.run_stack(bound, "d_l", &LANDMARK_PLAN, z_t)
    }

    /// E_t: texture feature z_t `[B,64,d,d]` in (-1,1).
    pub fn encode_texture(&mut self, bound: &Bound, feat: Var) -> Result<Var> {
        let z = self.run_stack(bound, "e_t", &ET_PLAN, feat)?;
        Ok(self.tape.tanh(z))
    }

    /// G: latent feature from z_l `[B,1,d,d]` and z_t `[B,64,d,d]`.
    pub fn generate_latent(&mut self, bound: &Bound, z_l: Var, z_t: Var) -> Result<Var> {
        let joined = self.tape.concat_channels(z_l, z_t)?;
        let y = self.run_stack(bound, "g", &G_PLAN, joined)?;
        Ok(self.tape.tanh(y))
    }

    /// F_a: one independent branch per AU, logits `[B,m]`.
    pub fn detect_aus(&mut self, bound: &Bound, feat: Var) -> Result<Var> {
        let mut logits = Vec::with_capacity(self.model.arch.au_count);
        for j in 0..self.model.arch.au_count {
            let prefix = au_prefix(j);
            let h = self.run_stack(bound, &prefix, &FA_BRANCH_PLAN, feat)?;
            let pooled = self.tape.global_avg_pool(h)?;
            let w = bound.get(&format!("{prefix}.fc.weight"))?;
            let b = bound.get(&format!("{prefix}.fc.bias"))?;
            logits.push(self.tape.linear(pooled, w, b)?);
        }
        self.tape.concat_columns(&logits)
    }

    /// D_f^s or D_f^t: one realness score per sample, `[B,1]`.
    pub fn discriminate_feature(&mut self, bound: &Bound, feat: Var, domain: Domain) -> Result<Var> {
        let prefix = match domain {
            Domain::Source => "d_f_s",
            Domain::Target => "d_f_t",
        };
        let map = self.run_stack(bound, prefix, &DF_PLAN, feat)?;
        self.tape.global_avg_pool(map)
    }
}

/// z_l: per-map spatial softmax, summed over the 49 maps into one channel.
pub fn landmark_related_feature<T: Scalar>(tape: &mut Tape<T>, maps: Var) -> Result<Var> {
    let probs = tape.spatial_softmax(maps)?;
    tape.sum_channels(probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_prefixes_round_trip() {
        for m in Module::ALL {
            assert_eq!(Module::of(&format!("{}.conv0.weight", m.prefix())), Some(m));
        }
        assert_eq!(Module::of("f_a.au3.fc.bias"), Some(Module::Fa));
        assert_eq!(Module::of("nothing.x"), None);
    }

    #[test]
    fn buffers_exist_only_for_batch_norm() {
        let m = ModelParams::<f32>::init(Arch { au_count: 2 }, 0);
        assert!(m.buffers.keys().all(|k| k.starts_with("e_f.") || k.starts_with("f_a.")));
        assert_eq!(m.buffers.len(), 2 * (3 + 2 * 4));
    }
}
