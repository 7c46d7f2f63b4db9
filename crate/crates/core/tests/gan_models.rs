use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2f_core::engine::{Mode, Tape, Tensor};
use t2f_core::models::{init_params, Discriminator, Generator, ModelConfig, NoiseKind, ParamKind};
use t2f_core::{Error, Scalar};

fn unit_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::uniform(vec![n, dim], -1.0, 1.0, rng);
    for row in t.data_mut().chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn run_generator<S: Scalar>(g: &Generator<S>, z: &Tensor<S>, phi: &Tensor<S>, mode: Mode) -> Result<Vec<S>, Error> {
    let mut tape = Tape::new();
    let b = g.bind(&mut tape, false);
    let (z, phi) = (tape.leaf(z), tape.leaf(phi));
    let out = g.forward(&mut tape, &b, z, phi, mode)?;
    Ok(tape.value(out.output).to_vec())
}

fn run_discriminator<S: Scalar>(
    d: &Discriminator<S>,
    x: &Tensor<S>,
    phi: &Tensor<S>,
    mode: Mode,
) -> Result<Vec<S>, Error> {
    let mut tape = Tape::new();
    let b = d.bind(&mut tape, false);
    let (x, phi) = (tape.leaf(x), tape.leaf(phi));
    let s = d.forward(&mut tape, &b, x, phi, mode)?;
    Ok(tape.value(s.probs).to_vec())
}

fn zero_weights<S: Scalar>(params: &mut t2f_core::models::ParamSet<S>) {
    for p in params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = S::zero());
    }
}

#[test]
fn full_scale_shapes_for_a_batch_of_64() {
    let cfg = ModelConfig::full(64);
    let (g, d) = init_params::<f32>(3, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = cfg.sample_noise::<f32>(64, &mut rng);
    let phi = unit_rows(64, 64, &mut rng).cast::<f32>();
    let imgs = g.generate(&z, &phi).unwrap();
    assert_eq!(imgs.len(), 64);
    assert!(imgs.iter().all(|i| i.shape() == [3, 64, 64]));
    let x = Tensor::stack(&imgs).unwrap();
    assert_eq!(x.shape(), &[64, 3, 64, 64]);
    let scores = run_discriminator(&d, &x, &phi, Mode::Train).unwrap();
    assert_eq!(scores.len(), 64);
    assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn zero_networks_give_zero_images_and_even_scores() {
    let cfg = ModelConfig::desk(32);
    let (mut g, mut d) = init_params::<f64>(1, &cfg).unwrap();
    zero_weights(&mut g.params);
    zero_weights(&mut d.params);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = cfg.sample_noise::<f64>(5, &mut rng);
    let phi = unit_rows(5, 32, &mut rng);
    for mode in [Mode::Train, Mode::Infer] {
        let img = run_generator(&g, &z, &phi, mode).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
        let x = Tensor::uniform(vec![5, 3, 16, 16], -1.0, 1.0, &mut rng);
        let s = run_discriminator(&d, &x, &phi, mode).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
    }
}

#[test]
fn out_of_range_images_are_rejected() {
    let cfg = ModelConfig::tiny();
    let (_, d) = init_params::<f64>(0, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let phi = unit_rows(2, cfg.text_dim, &mut rng);
    let mut x = Tensor::uniform(vec![2, 3, 16, 16], -1.0, 1.0, &mut rng);
    x.data_mut()[7] = 1.0 + 5e-5;
    assert!(run_discriminator(&d, &x, &phi, Mode::Train).is_ok());
    x.data_mut()[7] = 1.01;
    assert!(matches!(run_discriminator(&d, &x, &phi, Mode::Train), Err(Error::Contract(_))));
}

#[test]
fn wrong_embedding_length_is_a_contract_error() {
    let cfg = ModelConfig::tiny();
    let (g, d) = init_params::<f64>(0, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = cfg.sample_noise::<f64>(2, &mut rng);
    let phi = unit_rows(2, cfg.text_dim + 1, &mut rng);
    assert!(matches!(run_generator(&g, &z, &phi, Mode::Infer), Err(Error::Contract(_))));
    let x = Tensor::zeros(vec![2, 3, 16, 16]);
    assert!(matches!(run_discriminator(&d, &x, &phi, Mode::Infer), Err(Error::Contract(_))));
}

#[test]
fn scores_follow_a_batch_permutation() {
    let cfg = ModelConfig::desk(32);
    let (_, d) = init_params::<f64>(4, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 6;
    let x = Tensor::uniform(vec![n, 3, 16, 16], -1.0, 1.0, &mut rng);
    let phi = unit_rows(n, 32, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let w = t.len() / n;
        let data = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    for (mode, tol) in [(Mode::Infer, 0.0), (Mode::Train, 1e-12)] {
        let base = run_discriminator(&d, &x, &phi, mode).unwrap();
        let shuffled = run_discriminator(&d, &permute(&x), &permute(&phi), mode).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((shuffled[k] - base[i]).abs() <= tol, "{mode:?} row {i}");
        }
    }
}

#[test]
fn noise_kinds_cover_their_intervals() {
    let mut cfg = ModelConfig::desk(8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = cfg.sample_noise::<f64>(50, &mut rng);
    assert!(z.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    cfg.noise = NoiseKind::Symmetric;
    let z = cfg.sample_noise::<f64>(50, &mut rng);
    assert!(z.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
    assert!(z.data().iter().any(|&v| v < 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn outputs_stay_in_range(seed in any::<u64>()) {
        let cfg = ModelConfig::desk(16);
        let (g, d) = init_params::<f32>(seed, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let z = cfg.sample_noise::<f32>(4, &mut rng);
        let phi = unit_rows(4, 16, &mut rng).cast::<f32>();
        let img = run_generator(&g, &z, &phi, Mode::Train).unwrap();
        prop_assert!(img.iter().all(|&v| v > -1.0 && v < 1.0));
        let x = Tensor::new(vec![4, 3, 16, 16], img).unwrap();
        let s = run_discriminator(&d, &x, &phi, Mode::Train).unwrap();
        prop_assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

/// Central differences of the mean generated pixel against the tape
/// gradient, for every generator weight of the tiny configuration.
#[test]
fn generator_gradient_matches_central_differences() {
    let cfg = ModelConfig::tiny();
    let mut seed = 0;
    let (g, z, phi) = loop {
        assert!(seed < 500, "no draw kept clear of the leaky ReLU kinks");
        let (g, _) = init_params::<f64>(seed, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = cfg.sample_noise::<f64>(3, &mut rng);
        let phi = unit_rows(3, cfg.text_dim, &mut rng);
        let mut tape = Tape::new();
        let b = g.bind(&mut tape, false);
        let (zv, pv) = (tape.leaf(&z), tape.leaf(&phi));
        g.forward(&mut tape, &b, zv, pv, Mode::Train).unwrap();
        if tape.kink_margin().unwrap() > 1e-3 {
            break (g, z, phi);
        }
        seed += 1;
    };
    let loss = |g: &Generator<f64>| {
        let v = run_generator(g, &z, &phi, Mode::Train).unwrap();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut tape = Tape::new();
    let b = g.bind(&mut tape, true);
    let (zv, pv) = (tape.leaf(&z), tape.leaf(&phi));
    let out = g.forward(&mut tape, &b, zv, pv, Mode::Train).unwrap();
    let m = tape.mean(out.output).unwrap();
    let grads = tape.backward(m).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (i, p) in g.params.iter().enumerate() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let analytic = grads.get(b.var(i)).unwrap();
        for k in 0..p.tensor.len() {
            let mut plus = g.clone();
            plus.params.tensor_mut(i).data_mut()[k] += h;
            let mut minus = g.clone();
            minus.params.tensor_mut(i).data_mut()[k] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / numeric.abs().max(analytic[k].abs()).max(1e-3);
            assert!(err < 1e-6, "{}[{k}]: analytic {} numeric {numeric}", p.name, analytic[k]);
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn random_draws_are_deterministic_per_seed() {
    let cfg = ModelConfig::desk(16);
    let (g1, d1) = init_params::<f32>(11, &cfg).unwrap();
    let (g2, d2) = init_params::<f32>(11, &cfg).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(d1, d2);
    let (g3, _) = init_params::<f32>(12, &cfg).unwrap();
    assert_ne!(g1, g3);
    let w = g1.params.get("g.proj.w").unwrap().data();
    let std = (w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.001, "init std {std}");
}
