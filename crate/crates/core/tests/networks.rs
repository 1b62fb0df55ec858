use adld::networks::*;
use adld::tensor::{finite_diff_check_many, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARCH: Arch = Arch { au_count: 3 };

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn bound_all(tape: &mut Tape<f64>, model: &ModelParams<f64>) -> Bound {
    Bound::new().bind(tape, model, &Module::ALL, false)
}

#[test]
fn forward_shapes_and_ranges() {
    let model = ModelParams::<f64>::init(ARCH, 1);
    for l in [8usize, 16] {
        let d = l / 4;
        let mut tape = Tape::new();
        let b = bound_all(&mut tape, &model);
        let img = tape.constant(random(&[2, 3, l, l], 2, -1.0, 1.0));
        let mut f = Forward::new(&mut tape, &model, BnMode::Train);
        let x = f.encode_rich(&b, img).unwrap();
        let maps = f.detect_landmarks(&b, x).unwrap();
        let z_t = f.encode_texture(&b, x).unwrap();
        let dl = f.discriminate_landmarks(&b, z_t).unwrap();
        let z_l = landmark_related_feature(f.tape, maps).unwrap();
        let lat = f.generate_latent(&b, z_l, z_t).unwrap();
        let logits = f.detect_aus(&b, lat).unwrap();
        let ds = f.discriminate_feature(&b, lat, Domain::Source).unwrap();
        let dt = f.discriminate_feature(&b, x, Domain::Target).unwrap();
        assert_eq!(tape.shape(x), &[2, 64, d, d]);
        assert_eq!(tape.shape(maps), &[2, 49, d, d]);
        assert_eq!(tape.shape(dl), &[2, 49, d, d]);
        assert_eq!(tape.shape(z_t), &[2, 64, d, d]);
        assert_eq!(tape.shape(z_l), &[2, 1, d, d]);
        assert_eq!(tape.shape(lat), &[2, 64, d, d]);
        assert_eq!(tape.shape(logits), &[2, 3]);
        assert_eq!(tape.shape(ds), &[2, 1]);
        assert_eq!(tape.shape(dt), &[2, 1]);
        for v in [x, z_t, lat] {
            assert!(tape.value(v).data().iter().all(|a| a.abs() < 1.0));
        }
        assert!(tape.value(logits).all_finite());
        for s in 0..2 {
            let plane = &tape.value(z_l).data()[s * d * d..(s + 1) * d * d];
            assert!((plane.iter().sum::<f64>() - 49.0).abs() < 1e-3);
            assert!(plane.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn rejects_sizes_not_divisible_by_four() {
    let model = ModelParams::<f64>::init(ARCH, 1);
    let mut tape = Tape::new();
    let b = bound_all(&mut tape, &model);
    let img = tape.constant(Tensor::zeros(&[1, 3, 10, 10]));
    let mut f = Forward::new(&mut tape, &model, BnMode::Eval);
    assert!(f.encode_rich(&b, img).is_err());
}

#[test]
fn peaked_maps_give_49_peaks() {
    let d = 8;
    let mut maps = Tensor::<f64>::full(&[1, 49, d, d], -30.0);
    for i in 0..49 {
        maps.data_mut()[i * d * d + i] = 30.0;
    }
    let mut tape = Tape::new();
    let m = tape.constant(maps);
    let z = landmark_related_feature(&mut tape, m).unwrap();
    let peaks = tape.value(z).data().iter().filter(|&&v| v > 0.99).count();
    assert_eq!(peaks, 49);
}

#[test]
fn generator_depends_on_z_l() {
    let model = ModelParams::<f64>::init(ARCH, 4);
    let mut tape = Tape::new();
    let b = bound_all(&mut tape, &model);
    let z_t = tape.constant(random(&[1, 64, 4, 4], 5, -1.0, 1.0));
    let za = tape.constant(random(&[1, 1, 4, 4], 6, 0.0, 6.0));
    let zb = tape.constant(random(&[1, 1, 4, 4], 7, 0.0, 6.0));
    let mut f = Forward::new(&mut tape, &model, BnMode::Eval);
    let ga = f.generate_latent(&b, za, z_t).unwrap();
    let gb = f.generate_latent(&b, zb, z_t).unwrap();
    let diff: f64 = tape.value(ga).data().iter().zip(tape.value(gb).data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[test]
fn au_branches_are_independent() {
    let mut model = ModelParams::<f64>::init(ARCH, 8);
    let feat = random(&[2, 64, 4, 4], 9, -1.0, 1.0);
    let run = |model: &ModelParams<f64>| {
        let mut tape = Tape::new();
        let b = bound_all(&mut tape, model);
        let x = tape.constant(feat.clone());
        let mut f = Forward::new(&mut tape, model, BnMode::Eval);
        let y = f.detect_aus(&b, x).unwrap();
        tape.value(y).data().to_vec()
    };
    let before = run(&model);
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("f_a.au1.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let after = run(&model);
    for s in 0..2 {
        for j in 0..3 {
            let changed = before[s * 3 + j] != after[s * 3 + j];
            assert_eq!(changed, j == 1, "sample {s} logit {j}");
        }
    }
}

#[test]
fn parameter_groups_are_disjoint() {
    let model = ModelParams::<f32>::init(Arch { au_count: 6 }, 0);
    let fl: Vec<_> = model.names_of(Module::Fl).collect();
    let dl: Vec<_> = model.names_of(Module::Dl).collect();
    assert_eq!(fl.len(), dl.len());
    assert!(fl.iter().all(|n| !dl.contains(n)));
    let s: Vec<_> = model.names_of(Module::DfS).map(|n| n.trim_start_matches("d_f_s")).collect();
    let t: Vec<_> = model.names_of(Module::DfT).map(|n| n.trim_start_matches("d_f_t")).collect();
    assert_eq!(s, t);
    assert_ne!(model.param("d_f_s.conv0.weight").unwrap(), model.param("d_f_t.conv0.weight").unwrap());
}

/// Parameter count of a conv stack from its layer plan: weights, biases,
/// affine (gamma, beta) where normalized, and one prelu slope per channel.
fn hand_count(layers: &[(usize, usize, bool, bool)]) -> usize {
    layers
        .iter()
        .map(|&(cin, cout, norm, prelu)| cout * cin * 9 + cout + if norm { 2 * cout } else { 0 } + if prelu { cout } else { 0 })
        .sum()
}

#[test]
fn parameter_count_matches_layer_plan() {
    let e_f = hand_count(&[(3, 32, true, true), (32, 32, true, true), (32, 64, true, true), (64, 64, false, false)]);
    let landmark = hand_count(&[(64, 64, true, true); 4]) + hand_count(&[(64, 49, false, false)]);
    let e_t = hand_count(&[(64, 64, true, true); 3]) + hand_count(&[(64, 64, false, false)]);
    let g = hand_count(&[(65, 64, true, true)]) + hand_count(&[(64, 64, true, true); 3]) + hand_count(&[(64, 64, false, false)]);
    let branch = hand_count(&[(64, 32, true, true), (32, 32, true, true), (32, 16, true, true), (16, 16, true, true)]) + 17;
    let d_f = hand_count(&[(64, 64, true, true), (64, 32, true, true), (32, 16, true, true), (16, 8, true, true)])
        + hand_count(&[(8, 1, false, false)]);
    let total = e_f + 2 * landmark + e_t + g + 6 * branch + 2 * d_f;
    assert_eq!(total, 1_086_714);
    let arch = Arch { au_count: 6 };
    assert_eq!(param_count(arch), total);
    assert_eq!(ModelParams::<f32>::init(arch, 0).param_count(), total);
    assert!(total < 2_000_000);
}

#[test]
fn init_is_deterministic_and_weights_vary() {
    let a = ModelParams::<f32>::init(ARCH, 11);
    assert_eq!(a, ModelParams::<f32>::init(ARCH, 11));
    assert_ne!(a, ModelParams::<f32>::init(ARCH, 12));
    for (name, t) in &a.params {
        if name.ends_with(".weight") {
            let mean = t.mean();
            let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>();
            assert!(var > 0.0, "{name}");
        }
        if name.ends_with(".slope") {
            assert!(t.data().iter().all(|&v| v == 0.25));
        }
    }
}

#[test]
fn eval_mode_is_bitwise_deterministic() {
    let model = ModelParams::<f32>::init(ARCH, 3);
    let img: Tensor<f32> = random(&[2, 3, 16, 16], 1, -1.0, 1.0).cast();
    let run = || {
        let mut tape = Tape::new();
        let b = Bound::new().bind(&mut tape, &model, &Module::ALL, false);
        let x = tape.constant(img.clone());
        let mut f = Forward::new(&mut tape, &model, BnMode::Eval);
        let feat = f.encode_rich(&b, x).unwrap();
        let y = f.detect_aus(&b, feat).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn running_stats_follow_momentum() {
    let mut model = ModelParams::<f64>::init(ARCH, 3);
    let mut tape = Tape::new();
    let b = bound_all(&mut tape, &model);
    let img = tape.constant(random(&[2, 3, 8, 8], 1, -1.0, 1.0));
    let stats = {
        let mut f = Forward::new(&mut tape, &model, BnMode::Train);
        f.encode_rich(&b, img).unwrap();
        f.stats
    };
    assert_eq!(stats.len(), 3);
    let batch_mean = stats[0].1.mean[0];
    model.update_running_stats(&stats).unwrap();
    let running = model.buffer("e_f.norm0.running_mean").unwrap().data()[0];
    assert!((running - 0.1 * batch_mean).abs() < 1e-12);
}

/// Finite-difference check of `net` with respect to its input and the named
/// parameters; all other parameters are bound as constants.
fn check_net(
    input_shape: &[usize],
    names: &[&str],
    net: impl Fn(&mut Forward<'_, f64>, &Bound, Var) -> adld::Result<Var>,
) -> f64 {
    let model = ModelParams::<f64>::init(ARCH, 21);
    let mut inputs = vec![random(input_shape, 22, -0.9, 0.9)];
    inputs.extend(names.iter().map(|n| model.param(n).unwrap().clone()));
    let r = finite_diff_check_many(
        |tape, vars| {
            let mut b = Bound::new().bind(tape, &model, &Module::ALL, false);
            for (n, &v) in names.iter().zip(&vars[1..]) {
                b.insert(n, v);
            }
            let mut f = Forward::new(tape, &model, BnMode::Train);
            let y = net(&mut f, &b, vars[0])?;
            let shape = tape.shape(y).to_vec();
            let w = random(&shape, 23, 0.5, 1.5);
            let w = tape.constant(w);
            let p = tape.mul(y, w)?;
            Ok(tape.sum_all(p))
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn gradient_checks_through_each_network() {
    let cases: Vec<(&str, f64)> = vec![
        ("e_f", check_net(&[2, 3, 4, 4], &["e_f.conv3.bias", "e_f.norm0.gamma"], |f, b, x| f.encode_rich(b, x))),
        ("f_l", check_net(&[1, 64, 2, 2], &["f_l.conv4.bias", "f_l.prelu0.slope"], |f, b, x| f.detect_landmarks(b, x))),
        ("d_l", check_net(&[1, 64, 2, 2], &["d_l.norm3.beta"], |f, b, x| f.discriminate_landmarks(b, x))),
        ("e_t", check_net(&[1, 64, 2, 2], &["e_t.conv3.bias"], |f, b, x| f.encode_texture(b, x))),
        ("f_a", check_net(&[2, 64, 2, 2], &["f_a.au0.fc.weight", "f_a.au2.norm3.gamma"], |f, b, x| f.detect_aus(b, x))),
        (
            "d_f",
            check_net(&[1, 64, 2, 2], &["d_f_t.conv4.weight"], |f, b, x| f.discriminate_feature(b, x, Domain::Target)),
        ),
        (
            "g",
            check_net(&[1, 64, 2, 2], &["g.conv4.bias"], |f, b, x| {
                let maps = f.detect_landmarks(b, x)?;
                let z_l = landmark_related_feature(f.tape, maps)?;
                f.generate_latent(b, z_l, x)
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}
