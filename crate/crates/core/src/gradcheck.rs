//! Finite-difference verification of every differentiable primitive and of
//! both networks, run in `f64`.
//!
//! Each primitive check contracts the op's output with a fixed random
//! tensor so that every output element contributes to the scalar loss, then
//! compares the tape gradient of each input with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{finite_difference_grad, max_relative_error, Mode, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::models::{init_params, Bound, Discriminator, Generator, ModelConfig, ParamKind, ParamSet};
use crate::trainer::{discriminator_loss, generator_loss};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const FLOOR: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-6;
/// Network checks redraw their point until every leaky ReLU input is at
/// least this far from zero.
pub const KINK_MARGIN: f64 = 20.0 * STEP;
const MAX_DRAWS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, checked: usize, max_rel_err: f64) -> Self {
        CheckResult {
            name: name.into(),
            checked,
            max_rel_err,
            passed: max_rel_err < TOLERANCE,
        }
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Checks `op` against finite differences in each of `inputs`.
pub fn check_op(name: &str, inputs: &[Tensor<f64>], op: &Build, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = op(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = Tensor::<f64>::uniform(probe_shape, -1.0, 1.0, rng);
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = op(tape, vars)?;
        let w = tape.leaf(&weights);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };
    let value_with = |k: usize, t: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| tape.leaf(if i == k { t } else { x }))
            .collect();
        let l = loss(&mut tape, &vars).expect("op succeeded at the base point");
        tape.value(l)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().requiring_grad())).collect();
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = finite_difference_grad(|t| value_with(k, t), x, STEP);
        worst = worst.max(max_relative_error(&analytic, numeric.data(), FLOOR));
        checked += x.len();
    }
    Ok(CheckResult::new(name, checked, worst))
}

/// Which network's weights a network check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Generator,
    Discriminator,
}

type NetLoss<'a> = dyn Fn(&mut Tape<f64>, &Generator<f64>, &Bound, &Discriminator<f64>, &Bound) -> Result<Var> + 'a;

/// Checks the gradient of `loss` with respect to every weight of `target`.
pub fn check_network(
    name: &str,
    g: &Generator<f64>,
    d: &Discriminator<f64>,
    target: Target,
    loss: &NetLoss,
) -> Result<CheckResult> {
    let eval = |g: &Generator<f64>, d: &Discriminator<f64>, train_g: bool, train_d: bool| -> Result<(Tape<f64>, Var, Bound, Bound)> {
        let mut tape = Tape::new();
        let gb = g.bind(&mut tape, train_g);
        let db = d.bind(&mut tape, train_d);
        let l = loss(&mut tape, g, &gb, d, &db)?;
        Ok((tape, l, gb, db))
    };
    let on_g = target == Target::Generator;
    let (tape, l, gb, db) = eval(g, d, on_g, !on_g)?;
    let grads = tape.backward(l)?;
    let (params, bound): (&ParamSet<f64>, &Bound) = if on_g { (&g.params, &gb) } else { (&d.params, &db) };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, p) in params.iter().enumerate() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let analytic = grads.get(bound.var(i)).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        let numeric = finite_difference_grad(
            |t| {
                let (mut g2, mut d2) = (g.clone(), d.clone());
                if on_g {
                    *g2.params.tensor_mut(i) = t.clone();
                } else {
                    *d2.params.tensor_mut(i) = t.clone();
                }
                let (tape, l, _, _) = eval(&g2, &d2, false, false).expect("loss succeeded at the base point");
                tape.value(l)[0]
            },
            &p.tensor,
            STEP,
        );
        worst = worst.max(max_relative_error(&analytic, numeric.data(), FLOOR));
        checked += p.tensor.len();
    }
    Ok(CheckResult::new(name, checked, worst))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, op: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_op(name, &inputs, op, rng)?);
        Ok(())
    };
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| uniform(shape, -1.0, 1.0, rng);

    let ins = vec![u(&[3, 4], rng), u(&[4, 5], rng), u(&[5], rng)];
    run("affine", ins, &|t, v| t.affine(v[0], v[1], Some(v[2])), rng)?;
    let ins = vec![u(&[2, 3, 6, 6], rng), u(&[4, 3, 4, 4], rng), u(&[4], rng)];
    run("conv2d", ins, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), rng)?;
    let ins = vec![u(&[2, 3, 3, 3], rng), u(&[3, 2, 4, 4], rng), u(&[2], rng)];
    run("deconv2d", ins, &|t, v| t.deconv2d(v[0], v[1], Some(v[2]), 2, 1), rng)?;
    let ins = vec![u(&[3, 2, 2, 2], rng), uniform(&[2], 0.5, 1.5, rng), u(&[2], rng)];
    run("batchnorm_train", ins, &|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2])?.0), rng)?;
    let (rm, rv) = ([0.1, -0.2], [0.8, 1.3]);
    let ins = vec![u(&[3, 2, 2, 2], rng), uniform(&[2], 0.5, 1.5, rng), u(&[2], rng)];
    run("batchnorm_infer", ins, &move |t, v| t.batchnorm_infer(v[0], v[1], v[2], &rm, &rv), rng)?;
    run("leaky_relu", vec![u(&[4, 6], rng)], &|t, v| t.leaky_relu(v[0], LEAKY_SLOPE), rng)?;
    run("tanh", vec![u(&[4, 6], rng)], &|t, v| t.tanh(v[0]), rng)?;
    run("sigmoid", vec![u(&[4, 6], rng)], &|t, v| t.sigmoid(v[0]), rng)?;
    run("scale", vec![u(&[4, 6], rng)], &|t, v| t.scale(v[0], -1.7), rng)?;
    run("offset", vec![u(&[4, 6], rng)], &|t, v| t.offset(v[0], 0.3), rng)?;
    run("one_minus", vec![u(&[4, 6], rng)], &|t, v| t.one_minus(v[0]), rng)?;
    let ins = vec![uniform(&[4, 6], 0.05, 2.0, rng)];
    run("clamped_log", ins, &|t, v| t.clamped_log(v[0], 1e-8), rng)?;
    run("add", vec![u(&[3, 5], rng), u(&[3, 5], rng)], &|t, v| t.add(v[0], v[1]), rng)?;
    run("mul", vec![u(&[3, 5], rng), u(&[3, 5], rng)], &|t, v| t.mul(v[0], v[1]), rng)?;
    run("sum", vec![u(&[3, 5], rng)], &|t, v| t.sum(v[0]), rng)?;
    run("mean", vec![u(&[3, 5], rng)], &|t, v| t.mean(v[0]), rng)?;
    let ins = vec![u(&[2, 3, 2, 2], rng), u(&[2, 1, 2, 2], rng)];
    run("concat", ins, &|t, v| t.concat(&[v[0], v[1]]), rng)?;
    run("reshape", vec![u(&[2, 3, 4], rng)], &|t, v| t.reshape(v[0], vec![6, 4]), rng)?;
    run("tile_spatial", vec![u(&[2, 3], rng)], &|t, v| t.tile_spatial(v[0], 4, 4), rng)?;
    let ins = vec![u(&[4, 5], rng)];
    run("softmax_cross_entropy", ins, &|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]), rng)?;
    Ok(out)
}

/// Fixed inputs for the network checks on the tiny 16x16 configuration.
struct NetInputs {
    z: Tensor<f64>,
    phi: Tensor<f64>,
    phi_mis: Tensor<f64>,
    real: Tensor<f64>,
}

fn net_inputs(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> NetInputs {
    let unit_rows = |rng: &mut ChaCha8Rng| {
        let mut t = uniform(&[n, cfg.text_dim], -1.0, 1.0, rng);
        for row in t.data_mut().chunks_mut(cfg.text_dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        t
    };
    let phi = unit_rows(rng);
    let phi_mis = unit_rows(rng);
    NetInputs {
        z: cfg.sample_noise(n, rng),
        phi,
        phi_mis,
        real: uniform(&[n, 3, cfg.image_size, cfg.image_size], -0.95, 0.95, rng),
    }
}

/// Draws networks and inputs whose full training graph keeps clear of
/// every leaky ReLU kink.
fn smooth_point(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Generator<f64>, Discriminator<f64>, NetInputs)> {
    for _ in 0..MAX_DRAWS {
        let (g, d) = init_params::<f64>(rng.random(), cfg)?;
        let inp = net_inputs(cfg, 3, rng);
        let mut t = Tape::new();
        let (gb, db) = (g.bind(&mut t, false), d.bind(&mut t, false));
        let (z, phi, phi_mis, x) = (t.leaf(&inp.z), t.leaf(&inp.phi), t.leaf(&inp.phi_mis), t.leaf(&inp.real));
        let img = g.forward(&mut t, &gb, z, phi, Mode::Train)?.output;
        for (im, p) in [(x, phi), (x, phi_mis), (img, phi)] {
            d.forward(&mut t, &db, im, p, Mode::Train)?;
        }
        if t.kink_margin().is_none_or(|m| m >= KINK_MARGIN) {
            return Ok((g, d, inp));
        }
    }
    Err(Error::contract(format!("no draw kept leaky ReLU inputs {KINK_MARGIN:e} away from zero")))
}

fn network_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig::tiny();
    let (g, d, inp) = smooth_point(&cfg, rng)?;
    let fake_of = |t: &mut Tape<f64>, g: &Generator<f64>, gb: &Bound| -> Result<(Var, Var)> {
        let z = t.leaf(&inp.z);
        let phi = t.leaf(&inp.phi);
        Ok((g.forward(t, gb, z, phi, Mode::Train)?.output, phi))
    };
    let mut out = Vec::new();
    out.push(check_network("generator (mean pixel)", &g, &d, Target::Generator, &|t, g, gb, _, _| {
        let (img, _) = fake_of(t, g, gb)?;
        t.mean(img)
    })?);
    out.push(check_network("discriminator (mean score)", &g, &d, Target::Discriminator, &|t, _, _, d, db| {
        let x = t.leaf(&inp.real);
        let phi = t.leaf(&inp.phi);
        let s = d.forward(t, db, x, phi, Mode::Train)?;
        t.mean(s.probs)
    })?);
    out.push(check_network("D(G(z)) wrt generator", &g, &d, Target::Generator, &|t, g, gb, d, db| {
        let (img, phi) = fake_of(t, g, gb)?;
        let s = d.forward(t, db, img, phi, Mode::Train)?;
        t.mean(s.probs)
    })?);
    out.push(check_network("generator loss", &g, &d, Target::Generator, &|t, g, gb, d, db| {
        let (img, phi) = fake_of(t, g, gb)?;
        let s = d.forward(t, db, img, phi, Mode::Train)?;
        generator_loss(t, s.probs)
    })?);
    out.push(check_network("discriminator loss", &g, &d, Target::Discriminator, &|t, g, gb, d, db| {
        let (img, phi) = fake_of(t, g, gb)?;
        let x = t.leaf(&inp.real);
        let phi_mis = t.leaf(&inp.phi_mis);
        let real = d.forward(t, db, x, phi, Mode::Train)?;
        let mis = d.forward(t, db, x, phi_mis, Mode::Train)?;
        let fake = d.forward(t, db, img, phi, Mode::Train)?;
        discriminator_loss(t, real.probs, mis.probs, fake.probs)
    })?);
    Ok(out)
}

/// Runs every primitive and network check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitive_checks(&mut rng)?;
    out.extend(network_checks(&mut rng)?);
    Ok(out)
}
