mod common;

use std::collections::BTreeSet;
use std::fs;

use adld::checkpoint::{Checkpoint, BLOB_FILE};
use adld::losses::LossWeights;
use adld::networks::{Arch, Module, ModelParams};
use adld::training::*;
use adld::{Error, Real};
use common::{batch, pair};

fn ctx<'a>(graph: &'a ModeGraph, weights: &'a LossWeights, w: &'a [f64]) -> StepContext<'a> {
    StepContext { graph, weights, au_weights_source: w, au_weights_target: w, lr_a: 1e-3, lr_b: 1e-3 }
}

/// Modules whose parameters differ between two models.
fn changed(a: &ModelParams<Real>, b: &ModelParams<Real>) -> BTreeSet<Module> {
    Module::ALL
        .into_iter()
        .filter(|&m| a.names_of(m).any(|n| a.params[n].data() != b.params[n].data()))
        .collect()
}

/// One step of `graph` from a fresh model; returns (before, after, log).
fn one_step(graph: &ModeGraph, weights: &LossWeights) -> (ModelParams<Real>, ModelParams<Real>, StepLog) {
    let (s, t) = pair(2);
    let src = batch(&s, AuLabels::True);
    let tgt = batch(&t, AuLabels::Pseudo);
    let before = ModelParams::<Real>::init(Arch { au_count: 6 }, 3);
    let mut model = before.clone();
    let mut opt = OptimizerState::new(OptimConfig::default());
    let w = vec![1.0 / 6.0; 6];
    let log = train_step(&mut model, &mut opt, &src, &tgt, &ctx(graph, weights, &w)).expect("step");
    (before, model, log)
}

fn custom(keys: &[LossKey]) -> ModeGraph {
    ModeGraph { mode: Mode::Adld, losses: keys.iter().copied().collect(), trainable: Module::ALL.into_iter().collect() }
}

fn group(beta1: f64, beta2: f64, lr: f64) -> AdamGroup {
    AdamGroup { beta1, beta2, lr }
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = vec![0.3f64, -1.2, 4.0];
    let mut slot = Moments::new(3);
    for _ in 0..5 {
        adam_update("p", &mut p, &[0.0; 3], &mut slot, group(0.9, 0.999, 0.1), 0.1, 1e-8).unwrap();
    }
    assert_eq!(p, vec![0.3, -1.2, 4.0]);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = vec![0.0f64];
    let mut slot = Moments::new(1);
    adam_update("p", &mut p, &[2.5], &mut slot, group(0.9, 0.999, 0.1), 0.1, 1e-8).unwrap();
    assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = vec![0.0f64; 2];
    let mut slot = Moments::new(2);
    let err = adam_update("w", &mut p, &[1.0, f64::NAN], &mut slot, group(0.9, 0.999, 0.1), 0.1, 1e-8).unwrap_err();
    assert!(matches!(err, Error::Divergence { ref term } if term.contains('w')), "{err}");
}

#[test]
fn adam_matches_scalar_reference_on_quadratic() {
    // f(x, y) = (x - 3)^2 + 2 (y + 1)^2
    let grad = |p: &[f64]| vec![2.0 * (p[0] - 3.0), 4.0 * (p[1] + 1.0)];
    let (b1, b2, lr, eps) = (0.9, 0.999, 0.05, 1e-8);
    let mut p = vec![0.0f64, 0.0];
    let mut slot = Moments::new(2);
    let (mut rx, mut rm, mut rv) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    for t in 1..=2000 {
        let g = grad(&p);
        adam_update("p", &mut p, &g, &mut slot, group(b1, b2, lr), lr, eps).unwrap();
        let rg = grad(&rx);
        for i in 0..2 {
            rm[i] = b1 * rm[i] + (1.0 - b1) * rg[i];
            rv[i] = b2 * rv[i] + (1.0 - b2) * rg[i] * rg[i];
            let mh = rm[i] / (1.0 - b1.powi(t));
            let vh = rv[i] / (1.0 - b2.powi(t));
            rx[i] -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - rx[0]).abs() < 1e-9 && (p[1] - rx[1]).abs() < 1e-9, "step {t}");
    }
    let dist = ((p[0] - 3.0).powi(2) + (p[1] + 1.0).powi(2)).sqrt();
    assert!(dist < 1e-3, "distance {dist}");
}

#[test]
fn learning_rate_schedule() {
    let base = 1e-4;
    for e in 1..=5 {
        assert_eq!(lr_at(e, base).unwrap(), base);
    }
    assert!((lr_at(6, base).unwrap() - 0.8 * base).abs() < 1e-18);
    assert!((lr_at(8, base).unwrap() - 0.4 * base).abs() < 1e-18);
    assert!((lr_at(9, base).unwrap() - 0.2 * base).abs() < 1e-18);
    assert!((lr_at(10, base).unwrap() - 0.2 * base).abs() < 1e-18);
    assert!(lr_at(0, base).is_err());
    assert!(lr_at(11, base).is_err());
}

#[test]
fn optimizer_groups() {
    let cfg = OptimConfig::default();
    assert_eq!(cfg.group_a, group(0.5, 0.9, 5e-5));
    assert_eq!(cfg.group_b, group(0.95, 0.999, 1e-4));
    assert_eq!(cfg.clip_norm, 10.0);
    for m in [Module::Et, Module::G, Module::Dl, Module::DfS, Module::DfT] {
        assert!(in_group_a(m));
    }
    for m in [Module::Ef, Module::Fa, Module::Fl] {
        assert!(!in_group_a(m));
    }
}

#[test]
fn mode_graph_examples() {
    use LossKey::*;
    let keys = |m: Mode| build_mode_graph(m).losses.into_iter().collect::<Vec<_>>();
    assert_eq!(keys(Mode::BiS), vec![LaSrc, LlSrc]);
    assert_eq!(keys(Mode::UiT), vec![LaSrc, LlTgt]);
    let bnet = build_mode_graph(Mode::BNet);
    assert!(!bnet.has(RS) && !bnet.has(CcS) && !bnet.has(AdlE) && !bnet.has(AdfG));
    assert!(!bnet.trains(Module::Dl));
    let adl = build_mode_graph(Mode::BNetRCcAdl);
    assert!(adl.has(AdlD) && adl.has(AdlE) && !adl.has(AdfG) && adl.trains(Module::Dl) && !adl.trains(Module::DfS));
    assert_eq!(build_mode_graph(Mode::Adld).losses.len(), LossKey::ALL.len());
    for m in Mode::ALL {
        assert_eq!(m.name().parse::<Mode>().unwrap(), m);
    }
    assert!("adld_plus".parse::<Mode>().is_err());
}

#[test]
fn reachability_matches_mode_graph() {
    let weights = LossWeights::default();
    for mode in Mode::ALL {
        let graph = build_mode_graph(mode);
        let (before, after, log) = one_step(&graph, &weights);
        let expected: BTreeSet<Module> = graph.trainable.clone();
        assert_eq!(changed(&before, &after), expected, "mode {mode}");
        let logged: BTreeSet<LossKey> = log.losses.keys().copied().collect();
        assert_eq!(logged, graph.losses, "mode {mode}");
    }
}

#[test]
fn landmark_detector_is_frozen_for_generated_features() {
    let (before, after, _) = one_step(&custom(&[LossKey::LlLatS, LossKey::LlLatT]), &LossWeights::default());
    let moved = changed(&before, &after);
    assert!(!moved.contains(&Module::Fl) && !moved.contains(&Module::Ef), "{moved:?}");
    assert!(moved.contains(&Module::G) && moved.contains(&Module::Et), "{moved:?}");
}

#[test]
fn texture_adversary_stops_at_texture_encoder_input() {
    let (before, after, _) = one_step(&custom(&[LossKey::AdlE]), &LossWeights::default());
    assert_eq!(changed(&before, &after), BTreeSet::from([Module::Et]));
}

#[test]
fn discriminator_updates_touch_only_discriminators() {
    let keys = [LossKey::AdlD, LossKey::AdfDS, LossKey::AdfDT];
    let (before, after, log) = one_step(&custom(&keys), &LossWeights::default());
    assert_eq!(changed(&before, &after), BTreeSet::from([Module::Dl, Module::DfS, Module::DfT]));
    assert_eq!(log.losses.len(), 3);

    // The converse: generator-side terms leave discriminators alone.
    let gen: Vec<LossKey> = LossKey::ALL.into_iter().filter(|k| !k.is_discriminator()).collect();
    let (before, after, _) = one_step(&custom(&gen), &LossWeights::default());
    let moved = changed(&before, &after);
    assert!(moved.iter().all(|m| !matches!(m, Module::Dl | Module::DfS | Module::DfT)), "{moved:?}");
}

#[test]
fn zero_texture_adversary_weight_degenerates_to_cycle_mode() {
    let (s, t) = pair(6);
    let base = |mode: Mode, adl: f64| TrainConfig {
        mode,
        weights: LossWeights { lambda_ad_l: adl, ..LossWeights::default() },
        image_size: 32,
        batch_size: 2,
        epochs: 1,
        iters_per_epoch: 3,
        seed: 5,
        eval_feed: Feed::Latent,
        ..TrainConfig::default()
    };
    let run = |cfg: TrainConfig| {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &s, &t, dir.path(), false, &mut |_| Ok(())).unwrap();
        (fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), out.model)
    };
    let (csv_a, model_a) = run(base(Mode::BNetRCcAdl, 0.0));
    let (csv_b, model_b) = run(base(Mode::BNetRCc, LossWeights::default().lambda_ad_l));
    let header: Vec<&str> = csv_a.lines().next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].starts_with("L_adl")).collect();
    for (ra, rb) in csv_a.lines().zip(csv_b.lines()).skip(1) {
        let (ca, cb): (Vec<&str>, Vec<&str>) = (ra.split(',').collect(), rb.split(',').collect());
        for &i in &keep {
            assert_eq!(ca[i], cb[i], "column {}", header[i]);
        }
    }
    for m in [Module::Ef, Module::Et, Module::G, Module::Fl, Module::Fa] {
        for n in model_a.names_of(m) {
            assert_eq!(model_a.params[n], model_b.params[n], "{n}");
        }
    }
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        image_size: 32,
        batch_size: 2,
        epochs: 2,
        iters_per_epoch: 2,
        seed: 9,
        eval_feed: mode.default_feed(),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (s, t) = pair(5);
    let cfg = small_config(Mode::Adld);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, &s, &t, a.path(), false, &mut |_| Ok(())).unwrap();
    train(&cfg, &s, &t, b.path(), false, &mut |_| Ok(())).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, METRICS_FILE), read(&b, METRICS_FILE));
    let blob = format!("epoch_02/{BLOB_FILE}");
    assert_eq!(read(&a, &blob), read(&b, &blob));
}

#[test]
fn interrupted_run_resumes_exactly() {
    let (s, t) = pair(5);
    let cfg = small_config(Mode::Adld);
    let whole = tempfile::tempdir().unwrap();
    let full = train(&cfg, &s, &t, whole.path(), false, &mut |_| Ok(())).unwrap();

    let cut = tempfile::tempdir().unwrap();
    let err = train(&cfg, &s, &t, cut.path(), false, &mut |p| {
        if p.iteration == 3 {
            Err(Error::Config("simulated crash".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(err.to_string().contains("simulated crash"));
    let resumed = train(&cfg, &s, &t, cut.path(), true, &mut |_| Ok(())).unwrap();

    assert_eq!(resumed.model, full.model);
    assert_eq!(
        fs::read_to_string(cut.path().join(METRICS_FILE)).unwrap(),
        fs::read_to_string(whole.path().join(METRICS_FILE)).unwrap()
    );

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(train(&other, &s, &t, cut.path(), true, &mut |_| Ok(())).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let (s, t) = pair(4);
    let mut cfg = small_config(Mode::BNet);
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &s, &t, dir.path(), false, &mut |_| Ok(())).unwrap();
    let path = latest_checkpoint(dir.path()).unwrap().unwrap();
    assert_eq!(path, epoch_dir(dir.path(), 1));
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.model, out.model);
    assert_eq!(ck.meta.iteration, 2);
    assert_eq!(ck.meta.config, cfg);
    let again = tempfile::tempdir().unwrap();
    ck.save(again.path()).unwrap();
    assert_eq!(Checkpoint::load(again.path()).unwrap(), ck);
}

#[test]
fn metrics_columns_follow_mode() {
    let (s, t) = pair(3);
    for mode in Mode::ALL {
        let mut cfg = small_config(mode);
        cfg.epochs = 1;
        cfg.iters_per_epoch = 1;
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &s, &t, dir.path(), false, &mut |_| Ok(())).unwrap();
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, csv_header());
        let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
        let graph = build_mode_graph(mode);
        for (i, key) in LossKey::ALL.iter().enumerate() {
            let cell = cells[4 + i];
            assert_eq!(!cell.is_empty(), graph.has(*key), "mode {mode}, column {}", key.column());
            if !cell.is_empty() {
                assert!(cell.parse::<f64>().unwrap().is_finite());
            }
        }
        assert!(cells.last().unwrap().parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn non_finite_input_reports_divergence() {
    let (s, t) = pair(2);
    let mut src = batch(&s, AuLabels::True);
    src.images.data_mut()[0] = Real::NAN;
    let tgt = batch(&t, AuLabels::Pseudo);
    let graph = build_mode_graph(Mode::BiS);
    let weights = LossWeights::default();
    let w = vec![1.0 / 6.0; 6];
    let mut model = ModelParams::<Real>::init(Arch { au_count: 6 }, 1);
    let mut opt = OptimizerState::new(OptimConfig::default());
    let err = train_step(&mut model, &mut opt, &src, &tgt, &ctx(&graph, &weights, &w)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn au_weights_floor_absent_classes() {
    let rows = vec![vec![1, 0], vec![1, 0], vec![0, 0], vec![1, 0]];
    let w = au_weights_from(&rows, 2).unwrap();
    // Rates 0.75 and the 0.125 floor; weights ∝ 1/rate.
    let inv = [1.0 / 0.75, 1.0 / 0.125];
    let s: f64 = inv.iter().sum();
    assert!((w[0] - inv[0] / s).abs() < 1e-12 && (w[1] - inv[1] / s).abs() < 1e-12, "{w:?}");
    assert!(au_weights_from(&[], 2).is_err());
}
