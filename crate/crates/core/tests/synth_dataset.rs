use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2f_core::caption::{compose_caption, Attribute, AttributeVector, ATTRIBUTE_COUNT};
use t2f_core::embedding::{embed_caption, EmbeddingConfig};
use t2f_core::engine::Tensor;
use t2f_core::synth::{
    generate_dataset, load_dataset_dir, probe_agreement, probe_attribute, render_procedural_face, write_dataset,
    Split, SynthConfig, BACKGROUND, HAIR_BLOND, MAX_JITTER, PROBE_ABLE, SKIN_OLD,
};
use t2f_core::Error;

fn random_vector(rng: &mut impl Rng) -> AttributeVector {
    let mut bits = [false; ATTRIBUTE_COUNT];
    for b in bits.iter_mut() {
        *b = rng.random_bool(0.5);
    }
    AttributeVector::from_bits(bits)
}

fn mean_colour(img: &Tensor<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> [f64; 3] {
    let s = img.shape()[1];
    let mut acc = [0.0; 3];
    let n = (rows.len() * cols.len()) as f64;
    for y in rows {
        for x in cols.clone() {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += (img.data()[c * s * s + y * s + x] + 1.0) / 2.0 / n;
            }
        }
    }
    acc
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let v = AttributeVector::with(&[Attribute::Male, Attribute::Smiling, Attribute::BlondHair]);
    let a = render_procedural_face(&v, 16, 9).unwrap();
    assert_eq!(a, render_procedural_face(&v, 16, 9).unwrap());
    assert_ne!(a, render_procedural_face(&v, 16, 10).unwrap());
    assert!(a.data().iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn all_false_is_a_plain_face_on_background() {
    let img = render_procedural_face(&AttributeVector::new(), 64, 0).unwrap();
    assert!(dist(mean_colour(&img, 40..60, 0..4), BACKGROUND) < 0.02);
    assert!(dist(mean_colour(&img, 28..36, 28..36), SKIN_OLD) < 0.05);
}

#[test]
fn blond_band_matches_constant() {
    let v = AttributeVector::with(&[Attribute::BlondHair]);
    for seed in 0..20 {
        let img = render_procedural_face(&v, 16, seed).unwrap();
        assert!(dist(mean_colour(&img, 0..3, 0..16), HAIR_BLOND) < 0.1);
    }
}

#[test]
fn renderer_probe_identity_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for size in [16, 32] {
        for i in 0..1000 {
            let v = random_vector(&mut rng);
            let img = render_procedural_face(&v, size, rng.random()).unwrap();
            for a in PROBE_ABLE {
                assert_eq!(probe_attribute(&img, a), Some(v.get(a)), "size {size} vector {i} attribute {a}");
            }
        }
    }
}

#[test]
fn uniform_noise_reads_as_all_absent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 2000;
    let mut all_false = 0;
    for _ in 0..trials {
        let noise = Tensor::<f64>::uniform(vec![3, 16, 16], -1.0, 1.0, &mut rng);
        if PROBE_ABLE.iter().all(|&a| probe_attribute(&noise, a) == Some(false)) {
            all_false += 1;
        }
    }
    assert!(all_false as f64 / trials as f64 > 0.99, "{all_false}/{trials}");
}

#[test]
fn flat_gray_reads_as_all_absent() {
    let gray = Tensor::<f32>::zeros(vec![3, 16, 16]);
    for a in PROBE_ABLE {
        assert_eq!(probe_attribute(&gray, a), Some(false), "{a}");
    }
}

#[test]
fn jitter_is_bounded() {
    assert!(MAX_JITTER <= 0.05);
}

#[test]
fn dataset_protocol() {
    let cfg = SynthConfig::default();
    let emb = EmbeddingConfig::default();
    let ds = generate_dataset(&cfg, &emb).unwrap();
    assert_eq!(ds.len(), 2000);
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Test);
    assert_eq!(train.len(), 1500);
    assert_eq!(test.len(), 500);
    let mut per_class = vec![(0, 0); 50];
    for r in &ds.records {
        match r.split {
            Split::Train => per_class[r.identity_class].0 += 1,
            Split::Test => per_class[r.identity_class].1 += 1,
        }
        assert_eq!(r.caption, compose_caption(&r.attributes));
        assert_eq!(r.embedding, embed_caption(&r.caption.text, &emb));
    }
    assert!(per_class.iter().all(|&c| c == (30, 10)));
    let again = generate_dataset(&cfg, &emb).unwrap();
    for (a, b) in ds.records.iter().zip(&again.records) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.attributes, b.attributes);
    }
    // an all-absent reader agrees only where attributes are false
    let blank: Vec<Tensor<f64>> = vec![Tensor::zeros(vec![3, 16, 16]); test.len()];
    let attrs: Vec<AttributeVector> = test.iter().map(|&i| ds.records[i].attributes.clone()).collect();
    assert!(probe_agreement(&blank, &attrs) <= 0.55);
}

#[test]
fn class_balance_within_one() {
    let cfg = SynthConfig {
        n: 103,
        classes: 10,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&cfg, &EmbeddingConfig::default()).unwrap();
    let mut counts = vec![0; 10];
    for r in &ds.records {
        counts[r.identity_class] += 1;
    }
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
}

#[test]
fn write_then_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 40,
        classes: 4,
        ..SynthConfig::default()
    };
    let emb = EmbeddingConfig::default();
    let ds = generate_dataset(&cfg, &emb).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset_dir(dir.path(), 16, &emb).unwrap();
    assert_eq!(back.len(), 40);
    assert_eq!(back.class_count, 4);
    for (a, b) in ds.records.iter().zip(&back.records) {
        assert_eq!(a.attributes.bits(), b.attributes.bits());
        assert_eq!(a.identity_class, b.identity_class);
        assert_eq!(a.split, b.split);
        assert_eq!(a.caption, b.caption);
        let max = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max <= 1.0 / 255.0 + 1e-12);
        for p in PROBE_ABLE {
            assert_eq!(probe_attribute(&b.image, p), Some(a.attributes.get(p)));
        }
    }
}

#[test]
fn missing_images_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 4,
        classes: 2,
        ..SynthConfig::default()
    };
    let emb = EmbeddingConfig::default();
    write_dataset(&generate_dataset(&cfg, &emb).unwrap(), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("images/000002.ppm")).unwrap();
    std::fs::remove_file(dir.path().join("images/000004.ppm")).unwrap();
    match load_dataset_dir(dir.path(), 16, &emb) {
        Err(Error::MissingFiles(f)) => assert_eq!(f, vec!["000002.ppm", "000004.ppm"]),
        other => panic!("{other:?}"),
    }
}
