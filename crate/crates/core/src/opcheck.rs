//! Named gradient checks for every differentiable primitive, plus randomly
//! composed three-layer stacks. Backs the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{finite_diff_check_many, GradCheck, Normalization, Scalar, Tape, Tensor, Var};

/// Relative-error bound every check must stay under.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const EPS: f64 = 1e-2;

/// Every named check, in reporting order.
pub const OPS: &[&str] = &[
    "conv2d",
    "avg_pool2x2",
    "normalize_instance",
    "normalize_batch",
    "prelu",
    "tanh",
    "sigmoid",
    "spatial_softmax",
    "global_avg_pool",
    "linear",
    "concat_channels",
    "l1_mean",
    "l2_mean",
    "elementwise_sum",
    "sum_channels",
    "concat_columns",
    "mul",
    "landmark_cls",
    "landmark_adv_d",
    "landmark_adv_e",
    "au_detection",
    "feature_adv_d",
    "feature_adv_g",
    "stack_a",
    "stack_b",
    "stack_c",
];

/// Uniform values with magnitude in `[lo, hi]` and random sign, which keeps
/// samples away from kinks at zero.
fn signed<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        T::of(if rng.random_bool(0.5) { m } else { -m })
    })
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

/// Contracts `y` with a fixed random cotangent so every output element
/// carries an O(1) weight into the scalar.
fn probe<T: Scalar>(tape: &mut Tape<T>, y: Var, weights: &Tensor<T>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

type CheckFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

struct Case<T> {
    inputs: Vec<Tensor<T>>,
    f: CheckFn<T>,
}

fn case<T: Scalar>(
    inputs: Vec<Tensor<T>>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static,
) -> Case<T> {
    let weights = uniform::<T>(rng, out_shape, 0.5, 1.5);
    Case {
        inputs,
        f: Box::new(move |tape, v| {
            let y = f(tape, v)?;
            probe(tape, y, &weights)
        }),
    }
}

/// Tanh whose backward rule is deliberately wrong (`1 - y` instead of
/// `1 - y^2`); used to show the checker catches a broken rule.
fn corrupted_tanh<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let value = tape.value(x).map(|v| v.tanh());
    tape.record(&[x], value, |ctx| {
        vec![Some(ctx.grad.iter().zip(ctx.output.data()).map(|(&g, &y)| g * (T::one() - y)).collect())]
    })
}

/// Layer kinds of a composed stack, fixed per stack index and independent of
/// the value seed: 0 conv, 1 instance norm, 2 batch norm, 3 prelu, 4 tanh,
/// 5 sigmoid.
///
/// A shift-carrying layer (conv bias, norm beta) directly before a norm has an
/// identically zero gradient, which relative error cannot score; such draws
/// are rejected.
pub fn stack_layers(stack: u64) -> [u8; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ac4 + stack);
    loop {
        let layers = [0, 1, 2].map(|_| rng.random_range(0..6u8));
        if layers.windows(2).all(|w| !(w[0] <= 2 && (w[1] == 1 || w[1] == 2))) {
            return layers;
        }
    }
}

fn random_stack<T: Scalar>(rng: &mut ChaCha8Rng, layers: [u8; 3]) -> Case<T> {
    let (b, c, hw) = (2, 2, 4);
    let mut inputs = vec![signed::<T>(rng, &[b, c, hw, hw], 0.1, 1.0)];
    for &layer in &layers {
        match layer {
            0 => {
                inputs.push(signed::<T>(rng, &[c, c, 3, 3], 0.2, 0.6));
                inputs.push(signed::<T>(rng, &[c], 0.0, 0.3));
            }
            1 | 2 => {
                inputs.push(uniform::<T>(rng, &[c], 0.5, 1.5));
                inputs.push(signed::<T>(rng, &[c], 0.0, 0.5));
            }
            3 => inputs.push(uniform::<T>(rng, &[c], 0.1, 0.4)),
            _ => {}
        }
    }
    let weights = uniform::<T>(rng, &[b, c, hw, hw], 0.5, 1.5);
    Case {
        inputs,
        f: Box::new(move |tape, v| {
            let mut x = v[0];
            let mut next = 1;
            for &layer in &layers {
                x = match layer {
                    0 => {
                        next += 2;
                        tape.conv2d(x, v[next - 2], v[next - 1], 1, 1)?
                    }
                    1 | 2 => {
                        next += 2;
                        let kind = if layer == 1 { Normalization::Instance } else { Normalization::BatchTrain };
                        tape.normalize(x, kind, v[next - 2], v[next - 1], T::of(1e-5))?.0
                    }
                    3 => {
                        next += 1;
                        tape.prelu(x, v[next - 1])?
                    }
                    4 => tape.tanh(x),
                    _ => tape.sigmoid(x),
                };
            }
            probe(tape, x, &weights)
        }),
    }
}

fn build_case<T: Scalar>(name: &str, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<Case<T>> {
    let eps = T::of(1e-5);
    Ok(match name {
        "conv2d" => {
            let inputs = vec![
                uniform(rng, &[1, 2, 5, 5], 0.2, 0.6),
                uniform(rng, &[3, 2, 3, 3], 0.2, 0.6),
                uniform(rng, &[3], 0.2, 0.6),
            ];
            case(inputs, &[1, 3, 5, 5], rng, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1))
        }
        "avg_pool2x2" => case(vec![signed(rng, &[2, 2, 4, 4], 0.0, 1.0)], &[2, 2, 2, 2], rng, |t, v| {
            t.avg_pool2x2(v[0])
        }),
        "normalize_instance" | "normalize_batch" => {
            let instance = name == "normalize_instance";
            let inputs = vec![
                signed(rng, &[2, 2, 3, 3], 0.0, 1.0),
                uniform(rng, &[2], 0.5, 1.5),
                signed(rng, &[2], 0.0, 0.5),
            ];
            case(inputs, &[2, 2, 3, 3], rng, move |t, v| {
                let kind = if instance { Normalization::Instance } else { Normalization::BatchTrain };
                Ok(t.normalize(v[0], kind, v[1], v[2], eps)?.0)
            })
        }
        "prelu" => {
            let inputs = vec![signed(rng, &[2, 3, 2, 2], 0.05, 1.0), uniform(rng, &[3], 0.1, 0.4)];
            case(inputs, &[2, 3, 2, 2], rng, |t, v| t.prelu(v[0], v[1]))
        }
        "tanh" => case(vec![signed(rng, &[1, 2, 3, 3], 0.0, 2.0)], &[1, 2, 3, 3], rng, move |t, v| {
            Ok(if corrupt { corrupted_tanh(t, v[0]) } else { t.tanh(v[0]) })
        }),
        "sigmoid" => case(vec![signed(rng, &[1, 2, 3, 3], 0.0, 2.0)], &[1, 2, 3, 3], rng, |t, v| Ok(t.sigmoid(v[0]))),
        "spatial_softmax" => case(vec![signed(rng, &[1, 2, 4, 4], 0.0, 2.0)], &[1, 2, 4, 4], rng, |t, v| {
            t.spatial_softmax(v[0])
        }),
        "global_avg_pool" => case(vec![signed(rng, &[2, 3, 2, 3], 0.0, 1.0)], &[2, 3], rng, |t, v| {
            t.global_avg_pool(v[0])
        }),
        "linear" => {
            let inputs = vec![uniform(rng, &[3, 4], 0.5, 1.5), uniform(rng, &[2, 4], 0.5, 1.5), uniform(rng, &[2], 0.5, 1.5)];
            case(inputs, &[3, 2], rng, |t, v| t.linear(v[0], v[1], v[2]))
        }
        "concat_channels" => {
            let inputs = vec![signed(rng, &[2, 1, 2, 2], 0.0, 1.0), signed(rng, &[2, 3, 2, 2], 0.0, 1.0)];
            case(inputs, &[2, 4, 2, 2], rng, |t, v| t.concat_channels(v[0], v[1]))
        }
        "l1_mean" | "l2_mean" => {
            let a: Tensor<T> = signed(rng, &[2, 3], 0.0, 1.0);
            // Offsets bounded away from zero keep the L1 kink out of reach.
            let offset: Tensor<T> = signed(rng, &[2, 3], 0.1, 1.0);
            let b = Tensor::from_fn(&[2, 3], |i| a.data()[i] + offset.data()[i]);
            let l1 = name == "l1_mean";
            Case {
                inputs: vec![a, b],
                f: Box::new(move |t, v| if l1 { t.l1_mean(v[0], v[1]) } else { t.l2_mean(v[0], v[1]) }),
            }
        }
        "elementwise_sum" => {
            let inputs = (0..3).map(|_| signed(rng, &[1, 2, 2, 2], 0.0, 1.0)).collect();
            case(inputs, &[1, 2, 2, 2], rng, |t, v| t.elementwise_sum(v))
        }
        "sum_channels" => case(vec![signed(rng, &[2, 3, 2, 2], 0.0, 1.0)], &[2, 1, 2, 2], rng, |t, v| {
            t.sum_channels(v[0])
        }),
        "concat_columns" => {
            let inputs = vec![signed(rng, &[2, 1], 0.0, 1.0), signed(rng, &[2, 3], 0.0, 1.0)];
            case(inputs, &[2, 4], rng, |t, v| t.concat_columns(v))
        }
        "mul" => {
            let inputs = vec![signed(rng, &[2, 3], 0.2, 1.0), signed(rng, &[2, 3], 0.2, 1.0)];
            case(inputs, &[2, 3], rng, |t, v| t.mul(v[0], v[1]))
        }
        "landmark_cls" | "landmark_adv_d" | "landmark_adv_e" => {
            let maps = signed(rng, &[1, 2, 2, 2], 0.3, 2.0);
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(1..=4)).collect();
            let which = name.to_string();
            Case {
                inputs: vec![maps],
                f: Box::new(move |t, v| match which.as_str() {
                    "landmark_cls" => losses::landmark_cls_loss(t, v[0], &labels),
                    "landmark_adv_d" => losses::landmark_adv_d_loss(t, v[0], &labels),
                    _ => losses::landmark_adv_e_loss(t, v[0]),
                }),
            }
        }
        "au_detection" => {
            let logits = signed(rng, &[3, 4], 0.0, 2.0);
            let labels: Vec<u8> = (0..12).map(|_| rng.random_range(0..2)).collect();
            let weights = losses::compute_au_weights(&[0.2, 0.4, 0.3, 0.6])?;
            Case { inputs: vec![logits], f: Box::new(move |t, v| losses::au_detection_loss(t, v[0], &labels, &weights)) }
        }
        // The fake score is detached inside the discriminator loss, so only
        // the real score is a checked input there.
        "feature_adv_d" => {
            let fake = signed::<T>(rng, &[3, 1], 0.0, 1.5);
            let real = signed(rng, &[3, 1], 0.0, 1.5);
            Case {
                inputs: vec![real],
                f: Box::new(move |t, v| {
                    let f = t.constant(fake.clone());
                    losses::feature_adv_d_loss(t, v[0], f)
                }),
            }
        }
        "feature_adv_g" => {
            Case { inputs: vec![signed(rng, &[3, 1], 0.0, 1.5)], f: Box::new(|t, v| losses::feature_adv_g_loss(t, v[0])) }
        }
        "stack_a" => random_stack(rng, stack_layers(0)),
        "stack_b" => random_stack(rng, stack_layers(1)),
        "stack_c" => random_stack(rng, stack_layers(2)),
        other => return Err(Error::Config(format!("unknown gradcheck op '{other}'"))),
    })
}

/// Runs one named check at one seed; returns the maximum relative error.
pub fn check_op<T: Scalar>(name: &str, seed: u64, corrupt: bool) -> Result<GradCheck> {
    check_op_eps::<T>(name, seed, corrupt, EPS)
}

/// [`check_op`] with an explicit finite-difference step.
pub fn check_op_eps<T: Scalar>(name: &str, seed: u64, corrupt: bool, eps: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
    let case = build_case::<T>(name, &mut rng, corrupt)?;
    finite_diff_check_many(&case.f, &case.inputs, T::of(eps))
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-op maximum relative error over `seeds` consecutive seeds.
pub fn run<T: Scalar>(ops: &[&str], base_seed: u64, seeds: u64, corrupt: bool) -> Result<Vec<(String, GradCheck)>> {
    ops.iter()
        .map(|&op| {
            let mut worst: Option<GradCheck> = None;
            for s in 0..seeds {
                let r = check_op::<T>(op, base_seed.wrapping_add(s), corrupt)?;
                if worst.is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            Ok((op.to_string(), worst.expect("at least one seed")))
        })
        .collect()
}
