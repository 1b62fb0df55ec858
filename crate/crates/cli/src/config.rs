//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [model]
//! image_size = 64
//! [train]
//! mode = adld
//! ```
//!
//! Every key has a default; unknown sections and keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use adld::losses::LossWeights;
use adld::synthdata::AuSet;
use adld::training::{Feed, Mode, OptimConfig, TrainConfig};
use adld::{Error, Result};

/// Full effective configuration of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub au_set: AuSet,
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub seed: u64,
    pub mirror: bool,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// `None` picks the mode's natural feed.
    pub feed: Option<Feed>,
    pub threshold: f64,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            image_size: t.image_size,
            au_set: AuSet::Bp4d6,
            mode: t.mode,
            batch_size: t.batch_size,
            epochs: t.epochs,
            iters_per_epoch: t.iters_per_epoch,
            seed: t.seed,
            mirror: t.mirror,
            weights: t.weights,
            optim: t.optim,
            source: None,
            target: None,
            feed: None,
            threshold: adld::evaluation::THRESHOLD,
            eval_batch: 32,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse { line, detail: format!("bad value '{value}' for '{key}'") })
}

fn au_set_name(s: AuSet) -> &'static str {
    match s {
        AuSet::Bp4d6 => "bp4d6",
        AuSet::Gft4 => "gft4",
    }
}

fn feed_name(f: Feed) -> &'static str {
    match f {
        Feed::Latent => "latent",
        Feed::Raw => "raw",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if !["model", "train", "data", "eval"].contains(&name) {
                    return Err(Error::Parse { line, detail: format!("unknown section [{name}]") });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse { line, detail: format!("expected key = value, got '{s}'") })?;
            cfg.set(line, &section, key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, line: usize, section: &str, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        let (a, b) = (&mut self.optim.group_a, &mut self.optim.group_b);
        match (section, key) {
            ("model", "image_size") => self.image_size = parse(line, key, value)?,
            ("model", "au_set") => self.au_set = AuSet::parse(value)?,
            ("train", "mode") => self.mode = parse(line, key, value)?,
            ("train", "batch_size") => self.batch_size = parse(line, key, value)?,
            ("train", "epochs") => self.epochs = parse(line, key, value)?,
            ("train", "iters_per_epoch") => self.iters_per_epoch = parse(line, key, value)?,
            ("train", "seed") => self.seed = parse(line, key, value)?,
            ("train", "mirror") => self.mirror = parse(line, key, value)?,
            ("train", "lambda_l") => w.lambda_l = parse(line, key, value)?,
            ("train", "lambda_ad_l") => w.lambda_ad_l = parse(line, key, value)?,
            ("train", "lambda_ad_f") => w.lambda_ad_f = parse(line, key, value)?,
            ("train", "lambda_r") => w.lambda_r = parse(line, key, value)?,
            ("train", "lambda_cc") => w.lambda_cc = parse(line, key, value)?,
            ("train", "lr_a") => a.lr = parse(line, key, value)?,
            ("train", "beta1_a") => a.beta1 = parse(line, key, value)?,
            ("train", "beta2_a") => a.beta2 = parse(line, key, value)?,
            ("train", "lr_b") => b.lr = parse(line, key, value)?,
            ("train", "beta1_b") => b.beta1 = parse(line, key, value)?,
            ("train", "beta2_b") => b.beta2 = parse(line, key, value)?,
            ("train", "adam_eps") => self.optim.eps = parse(line, key, value)?,
            ("train", "clip_norm") => self.optim.clip_norm = parse(line, key, value)?,
            ("data", "source") => self.source = Some(PathBuf::from(value)),
            ("data", "target") => self.target = Some(PathBuf::from(value)),
            ("eval", "feed") => self.feed = if value == "auto" { None } else { Some(parse(line, key, value)?) },
            ("eval", "threshold") => self.threshold = parse(line, key, value)?,
            ("eval", "batch") => self.eval_batch = parse(line, key, value)?,
            ("", _) => return Err(Error::Parse { line, detail: format!("key '{key}' outside any section") }),
            _ => return Err(Error::Parse { line, detail: format!("unknown key '{key}' in [{section}]") }),
        }
        Ok(())
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let (w, a, b) = (&self.weights, &self.optim.group_a, &self.optim.group_b);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        let _ = writeln!(s, "[model]\nimage_size = {}\nau_set = {}", self.image_size, au_set_name(self.au_set));
        let _ = writeln!(
            s,
            "\n[train]\nmode = {}\nbatch_size = {}\nepochs = {}\niters_per_epoch = {}\nseed = {}\nmirror = {}",
            self.mode, self.batch_size, self.epochs, self.iters_per_epoch, self.seed, self.mirror
        );
        let _ = writeln!(
            s,
            "lambda_l = {}\nlambda_ad_l = {}\nlambda_ad_f = {}\nlambda_r = {}\nlambda_cc = {}",
            w.lambda_l, w.lambda_ad_l, w.lambda_ad_f, w.lambda_r, w.lambda_cc
        );
        let _ = writeln!(s, "lr_a = {}\nbeta1_a = {}\nbeta2_a = {}", a.lr, a.beta1, a.beta2);
        let _ = writeln!(s, "lr_b = {}\nbeta1_b = {}\nbeta2_b = {}", b.lr, b.beta1, b.beta2);
        let _ = writeln!(s, "adam_eps = {}\nclip_norm = {}", self.optim.eps, self.optim.clip_norm);
        let _ = writeln!(s, "\n[data]");
        if let Some(p) = path(&self.source) {
            let _ = writeln!(s, "source = {p}");
        }
        if let Some(p) = path(&self.target) {
            let _ = writeln!(s, "target = {p}");
        }
        let _ = writeln!(
            s,
            "\n[eval]\nfeed = {}\nthreshold = {}\nbatch = {}",
            self.feed.map_or("auto", feed_name),
            self.threshold,
            self.eval_batch
        );
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            weights: self.weights,
            image_size: self.image_size,
            au_count: self.au_set.aus().len(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            iters_per_epoch: self.iters_per_epoch,
            seed: self.seed,
            mirror: self.mirror,
            eval_feed: self.feed.unwrap_or(self.mode.default_feed()),
            optim: self.optim,
        }
    }
}
