//! Property suites shared by the integration tests and the acceptance run.
//! Each suite returns a one-line summary on success or the first violation.
#![allow(
    dead_code,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop
)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qunet_core::quant::{
    avg_bitwidth, effective_bitwidth, fake_quant_weight, QuantMeta, QuantParams,
};
use qunet_core::{Tape, Tensor, Var};

pub type Outcome = Result<String, String>;

pub const SEEDS: u64 = 25;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Uniform values whose magnitude is at least `gap`, so kinks are never
/// within a finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> qunet_core::Result<Var>;

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.value(loss).data()[0]
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input element. Where both gradients are below
/// `1e-8` in magnitude the absolute difference must stay under `1e-8`.
pub fn fd_max_rel_error(inputs: &[Tensor<f64>], h: f64, build: &Build) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe, build);
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe, build);
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let diff = (analytic[j] - numeric).abs();
            let scale = analytic[j].abs().max(numeric.abs());
            let err = if scale > 1e-8 {
                diff / scale
            } else if diff <= 1e-8 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// Scalar readout with a non-uniform upstream gradient: summed BCE of
/// `sigmoid(y)` against a fixed soft target, so gradients are O(1).
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> qunet_core::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a3);
    let t = tape.constant(uniform(&mut rng, &shape, 0.0, 1.0));
    let p = tape.sigmoid(y);
    let mean = tape.bce_loss(p, t)?;
    tape.weighted_sum(&[(mean, shape.iter().product::<usize>() as f64)])
}

struct OpCase {
    name: &'static str,
    tolerance: f64,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: fn(&mut Tape<f64>, &[Var], u64) -> qunet_core::Result<Var>,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            tolerance: 1e-4,
            inputs: |r| {
                let k = if r.gen_bool(0.25) { 1 } else { 3 };
                vec![
                    uniform(r, &[2, 2, 6, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, k, k], -0.5, 0.5),
                    uniform(r, &[3], -0.2, 0.2),
                ]
            },
            build: |t, v, s| {
                let pad = t.value(v[1]).shape()[2] / 2;
                let y = t.conv2d(v[0], v[1], v[2], pad)?;
                readout(t, y, s)
            },
        },
        OpCase {
            name: "conv_transpose2d",
            tolerance: 1e-4,
            inputs: |r| {
                vec![
                    uniform(r, &[2, 3, 3, 4], -1.0, 1.0),
                    uniform(r, &[3, 2, 2, 2], -0.5, 0.5),
                    uniform(r, &[2], -0.2, 0.2),
                ]
            },
            build: |t, v, s| {
                let y = t.conv_transpose2d(v[0], v[1], v[2])?;
                readout(t, y, s)
            },
        },
        OpCase {
            name: "maxpool2d",
            tolerance: 1e-4,
            inputs: |r| vec![uniform(r, &[2, 2, 6, 4], -1.0, 1.0)],
            build: |t, v, s| {
                let y = t.maxpool2d(v[0])?;
                readout(t, y, s)
            },
        },
        OpCase {
            name: "relu",
            tolerance: 1e-4,
            inputs: |r| vec![away_from_zero(r, &[2, 3, 4, 4], 1e-3)],
            build: |t, v, s| {
                let y = t.relu(v[0]);
                readout(t, y, s)
            },
        },
        OpCase {
            name: "sigmoid",
            tolerance: 1e-4,
            inputs: |r| vec![uniform(r, &[2, 3, 4, 4], -4.0, 4.0)],
            build: |t, v, s| {
                let y = t.sigmoid(v[0]);
                readout(t, y, s)
            },
        },
        OpCase {
            name: "concat",
            tolerance: 1e-4,
            inputs: |r| {
                vec![
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2, 1, 3, 3], -1.0, 1.0),
                ]
            },
            build: |t, v, s| {
                let y = t.concat_channels(v[0], v[1])?;
                readout(t, y, s)
            },
        },
        OpCase {
            name: "bce_loss",
            tolerance: 1e-5,
            inputs: |r| vec![uniform(r, &[2, 1, 4, 4], 0.05, 0.95)],
            build: |t, v, s| {
                let shape = t.value(v[0]).shape().to_vec();
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let target = t.constant(Tensor::from_fn(shape, |_| r.gen_bool(0.4) as u8 as f64));
                let l = t.bce_loss(v[0], target)?;
                t.weighted_sum(&[(l, 32.0)])
            },
        },
        OpCase {
            name: "dice_loss",
            tolerance: 1e-5,
            inputs: |r| vec![uniform(r, &[2, 1, 4, 4], 0.05, 0.95)],
            build: |t, v, s| {
                let shape = t.value(v[0]).shape().to_vec();
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let target = t.constant(Tensor::from_fn(shape, |_| r.gen_bool(0.4) as u8 as f64));
                let l = t.dice_loss(v[0], target, 1e-5)?;
                t.weighted_sum(&[(l, 32.0)])
            },
        },
    ]
}

/// Central finite differences (h = 1e-5, f64) for every differentiable op
/// over `SEEDS` random instances each.
pub fn gradient_suite() -> Outcome {
    let mut summary = Vec::new();
    for case in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            let build = case.build;
            let err = fd_max_rel_error(&inputs, 1e-5, &move |t, v| build(t, v, seed));
            if !(err < case.tolerance) {
                return Err(format!(
                    "{} seed {seed}: rel err {err:.3e} >= {:.0e}",
                    case.name, case.tolerance
                ));
            }
            worst = worst.max(err);
        }
        summary.push(format!("{} {worst:.1e}", case.name));
    }
    Ok(format!(
        "{} seeds each, max rel err: {}",
        SEEDS,
        summary.join(", ")
    ))
}

/// Kernel gradient of a 3x3 convolution over a `[1, 2, 5, 5]` input.
pub fn conv_kernel_gradient_small() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let k = uniform(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[2], -0.1, 0.1);
    let x_for_build = x.clone();
    let b_for_build = b.clone();
    let err = fd_max_rel_error(&[k], 1e-5, &move |t, v| {
        let xv = t.constant(x_for_build.clone());
        let bv = t.constant(b_for_build.clone());
        let y = t.conv2d(xv, v[0], bv, 1)?;
        readout(t, y, 3)
    });
    if err < 1e-6 {
        Ok(format!("max rel err {err:.2e}"))
    } else {
        Err(format!("rel err {err:.3e} >= 1e-6"))
    }
}

/// Grid membership, idempotence, straight-through gradients in closed form,
/// bitwidth clamping and the `1/L` gradient of the average bitwidth.
pub fn quantizer_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    for draw in 0..1000 {
        let n = rng.gen_range(1..64);
        let spread = 10f64.powf(rng.gen_range(-4.0..2.0));
        let w = uniform(&mut rng, &[n], -spread, spread);
        let p = QuantParams::new(rng.gen_range(0.0..10.0));
        let (wq, meta) = fake_quant_weight(&w, &p);
        for &v in wq.data() {
            let level = v / meta.scale;
            if (level - level.round()).abs() > 1e-9
                || level.round() < meta.q_min as f64
                || level.round() > meta.q_max as f64
            {
                return Err(format!(
                    "draw {draw}: {v} is not on the grid (level {level})"
                ));
            }
        }
        let (again, _) = fake_quant_weight(&wq, &p);
        if again.data() != wq.data() {
            return Err(format!("draw {draw}: re-quantization changed the tensor"));
        }
    }

    for draw in 0..200 {
        let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b_param = rng.gen_range(2.1..7.9);
        let mut tape = Tape::<f64>::new();
        let wv = tape.param(w.clone());
        let bv = tape.param(Tensor::scalar(b_param));
        let (y, meta) = tape.fake_quant_weight_meta(wv, bv).map_err(fail)?;
        let loss = tape.sum(y);
        let g = tape.backward(loss).map_err(fail)?;
        if g.get(wv).unwrap().data().iter().any(|&d| d != 1.0) {
            return Err(format!(
                "draw {draw}: weight gradient is not all ones on a per-tensor grid"
            ));
        }
        let q = meta.q_max as f64;
        let wq = tape.value(y);
        let dq: f64 = w
            .data()
            .iter()
            .zip(wq.data())
            .map(|(a, b)| (a - b) / q)
            .sum();
        let expected = dq * 2f64.powi(meta.b_eff as i32 - 1) * std::f64::consts::LN_2;
        let got = g.get(bv).unwrap().data()[0];
        if (got - expected).abs() > 1e-12 * expected.abs().max(1.0) {
            return Err(format!(
                "draw {draw}: bitwidth gradient {got} != closed form {expected}"
            ));
        }
    }

    // A fixed grid clamps: the gradient is 1 inside and 0 outside the range.
    let meta = QuantMeta {
        scale: 0.1,
        range: 0.7,
        q_min: -7,
        q_max: 7,
        b_eff: 4,
        signed: true,
    };
    let x = Tensor::new([8], vec![-1.5, -0.71, -0.69, -0.2, 0.0, 0.33, 0.69, 2.0]).map_err(fail)?;
    let mut tape = Tape::<f64>::new();
    let xv = tape.param(x.clone());
    let y = tape.fake_quant_act(xv, meta);
    let loss = tape.sum(y);
    let g = tape.backward(loss).map_err(fail)?;
    let expected: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| (v.abs() / 0.1 <= 7.0) as u8 as f64)
        .collect();
    if g.get(xv).unwrap().data() != expected.as_slice() {
        return Err(format!(
            "clamp mask {:?} != {:?}",
            g.get(xv).unwrap().data(),
            expected
        ));
    }

    let mut b = -20.0;
    while b <= 30.0 {
        let e = effective_bitwidth(&QuantParams::new(b));
        if !(2..=8).contains(&e) {
            return Err(format!("effective bitwidth of {b} is {e}"));
        }
        b += 0.01;
    }
    for b in [f64::NEG_INFINITY, f64::INFINITY] {
        let e = effective_bitwidth(&QuantParams::new(b));
        if !(2..=8).contains(&e) {
            return Err(format!("effective bitwidth of {b} is {e}"));
        }
    }

    let values: Vec<f64> = (0..23).map(|i| 2.2 + 0.25 * i as f64).collect();
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Var> = values
        .iter()
        .map(|&v| tape.param(Tensor::scalar(v)))
        .collect();
    let avg = tape.avg_bitwidth(&leaves).map_err(fail)?;
    let g = tape.backward(avg).map_err(fail)?;
    for (i, l) in leaves.iter().enumerate() {
        let d = g.get(*l).unwrap().data()[0];
        let want = if (2.0..8.0).contains(&values[i]) {
            1.0 / 23.0
        } else {
            0.0
        };
        if d != want {
            return Err(format!(
                "avg_bitwidth gradient of layer {i} is {d}, want {want}"
            ));
        }
    }
    let params: Vec<QuantParams> = values.iter().map(|&v| QuantParams::new(v)).collect();
    let mean = avg_bitwidth(&params).map_err(fail)?;
    if tape.value(avg).data()[0] != mean {
        return Err("tape and direct avg_bitwidth disagree".into());
    }

    Ok("1000 grid/idempotence draws, 200 closed-form STE draws, clamp mask, bitwidth range, 1/L gradient".into())
}

fn fail(e: qunet_core::Error) -> String {
    e.to_string()
}

/// BCE of a uniform 0.5 prediction, Dice of a perfect prediction and the
/// composition of the total loss.
pub fn loss_constants() -> Outcome {
    use qunet_core::loss::{bce_loss, compose_total, dice_loss, total_loss};
    let half = Tensor::<f64>::full([2, 1, 8, 8], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = Tensor::from_fn([2, 1, 8, 8], |_| rng.gen_bool(0.3) as u8 as f64);
    let bce = bce_loss(&half, &target).map_err(fail)?;
    if (bce - std::f64::consts::LN_2).abs() > 1e-9 {
        return Err(format!("bce(0.5) = {bce}, want ln 2"));
    }
    let dice = dice_loss(&target, &target, 1e-5).map_err(fail)?;
    if dice != 0.0 {
        return Err(format!("dice_loss(P = T) = {dice:e}, want 0"));
    }
    let empty = Tensor::<f64>::zeros([1, 1, 4, 4]);
    if dice_loss(&empty, &empty, 1e-5).map_err(fail)? != 0.0 {
        return Err("dice_loss of two empty masks is not 0".into());
    }
    if compose_total(0.5, 0.3, 4.0, 0.25) != 1.8 || compose_total(0.5, 0.3, 4.0, 0.0) != 0.8 {
        return Err("compose_total arithmetic".into());
    }

    let mut tape = Tape::<f64>::new();
    let pred = tape.param(Tensor::from_fn([2, 1, 8, 8], |i| {
        0.1 + 0.8 * ((i * 37 % 64) as f64 / 64.0)
    }));
    let t = tape.constant(target.clone());
    let bits: Vec<Var> = (0..23)
        .map(|i| tape.param(Tensor::scalar(3.0 + 0.1 * i as f64)))
        .collect();
    let (total, parts) = total_loss(&mut tape, pred, t, &bits, 0.25, 1e-5).map_err(fail)?;
    let logged = parts.bce + parts.dice + 0.25 * parts.bitwidth;
    if tape.value(total).data()[0] != logged || parts.total != logged {
        return Err(format!(
            "total {} != bce + dice + 0.25 * bits {logged}",
            parts.total
        ));
    }
    let g = tape.backward(total).map_err(fail)?;
    for b in &bits {
        if g.get(*b).unwrap().data()[0] != 0.25 / 23.0 {
            return Err("regularizer slope is not lambda / 23".into());
        }
    }
    Ok(format!(
        "bce(0.5) = {bce:.12}, dice(P=T) = 0, total identity exact"
    ))
}

/// 8-bit quantized forward against the float baseline with identical
/// weights, and a nonzero gradient on every bitwidth parameter.
pub fn model_properties() -> Outcome {
    use qunet_core::loss::total_loss;
    use qunet_core::{QuantUNet, UNetConfig};

    let cfg = UNetConfig {
        init_bitwidth: 7.9,
        ..UNetConfig::with_base(4)
    };
    let mut q = QuantUNet::build(cfg, 1).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f32>::from_fn([4, 1, 32, 32], |_| rng.gen_range(0.0..1.0));
    let y = x.map(|v| (v > 0.6) as u8 as f32);
    let mut f = q.clone();
    f.config.quantized = false;
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.cast());
    q.forward(&mut tape, xv, true).map_err(fail)?;
    q.set_frozen(true);
    let pq = q.predict::<f64>(&x).map_err(fail)?;
    let pf = f.predict::<f64>(&x).map_err(fail)?;
    let diff = pq
        .data()
        .iter()
        .zip(pf.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(diff < 0.05) {
        return Err(format!("8-bit vs float max abs diff {diff:.4} >= 0.05"));
    }

    let mut m = QuantUNet::build(UNetConfig::with_base(4), 2).map_err(fail)?;
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.cast());
    let yv = tape.constant(y.cast());
    let out = m.forward(&mut tape, xv, true).map_err(fail)?;
    let (loss, _) =
        total_loss(&mut tape, out.output, yv, &out.params.bits, 0.25, 1e-5).map_err(fail)?;
    let g = tape.backward(loss).map_err(fail)?;
    if out.params.bits.len() != 23 {
        return Err(format!(
            "{} bitwidth parameters, want 23",
            out.params.bits.len()
        ));
    }
    if let Some(i) = out
        .params
        .bits
        .iter()
        .position(|b| g.get(*b).is_none_or(|t| t.data()[0] == 0.0))
    {
        return Err(format!("bitwidth gradient of layer {i} is zero"));
    }

    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[2, 3, 8, 6], -2.0, 2.0);
        let maps: [fn(f64) -> f64; 3] = [|v| v.max(0.0), f64::tanh, |v| (3.0 * v).floor()];
        for f in maps {
            let a = qunet_core::ops::maxpool2d(&x.map(f)).map_err(fail)?.0;
            let b = qunet_core::ops::maxpool2d(&x).map_err(fail)?.0.map(f);
            if a.data() != b.data() {
                return Err(format!(
                    "maxpool does not commute with a monotone map (seed {seed})"
                ));
            }
        }
    }
    Ok(format!(
        "8-bit vs float max diff {diff:.4}, 23 nonzero bitwidth gradients, maxpool commutes"
    ))
}
