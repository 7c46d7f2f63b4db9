use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2f_core::caption::{
    caption_corpus, compose_caption, compose_caption_counted, corpus_to_jsonl, corpus_to_tsv,
    extract_attributes, format_attr_file, parse_attr_text, Attribute, AttributeVector, CaptionGroup, Gender,
    ATTRIBUTE_COUNT,
};
use t2f_core::Error;
use Attribute::*;

fn random_vector(rng: &mut impl Rng) -> AttributeVector {
    let mut bits = [false; ATTRIBUTE_COUNT];
    for b in bits.iter_mut() {
        *b = rng.random_bool(0.5);
    }
    AttributeVector::from_bits(bits)
}

fn round_trips(v: &AttributeVector) -> bool {
    let cap = compose_caption(v);
    let ex = extract_attributes(&cap.text).unwrap();
    let mut want = v.mapped_only();
    if !cap.sentences.is_empty() {
        want.set(Male, v.get(Male));
    }
    ex.attributes == want
}

#[test]
fn worked_examples() {
    let v = AttributeVector::with(&[Male, Goatee, Mustache]);
    let c = compose_caption(&v);
    assert_eq!(c.sentences, vec!["He sports a goatee and mustache."]);
    assert_eq!(c.text, "He sports a goatee and mustache.");
    assert_eq!(c.gender, Gender::He);

    let c = compose_caption(&AttributeVector::with(&[Male, Sideburns]));
    assert_eq!(c.text, "He has sideburns.");
}

#[test]
fn only_male_gives_empty_caption() {
    let c = compose_caption(&AttributeVector::with(&[Male]));
    assert!(c.sentences.is_empty());
    assert_eq!(c.text, "");
    let unmapped = AttributeVector::with(&[Male, Blurry, NoBeard, BagsUnderEyes]);
    assert!(compose_caption(&unmapped).sentences.is_empty());
}

#[test]
fn figure_style_woman() {
    let v = AttributeVector::with(&[
        HighCheekbones,
        WavyHair,
        ArchedEyebrows,
        Young,
        Attractive,
        HeavyMakeup,
        WearingLipstick,
    ]);
    let c = compose_caption(&v);
    assert_eq!(
        c.sentences,
        vec![
            "The woman has high cheekbones.",
            "She has wavy hair.",
            "She has arched eyebrows.",
            "The young attractive woman has heavy makeup.",
            "She is wearing lipstick.",
        ]
    );
    assert_eq!(c.gender, Gender::She);
}

#[test]
fn template_sentence_shapes() {
    let she = |a: &[Attribute]| compose_caption(&AttributeVector::with(a)).text;
    let he = |a: &[Attribute]| {
        let mut v = AttributeVector::with(a);
        v.set(Male, true);
        compose_caption(&v).text
    };
    assert_eq!(she(&[WavyHair, BrownHair]), "She has wavy hair which is brown in colour.");
    assert_eq!(
        she(&[BigLips, PointyNose, ArchedEyebrows, MouthSlightlyOpen]),
        "She has big lips and pointy nose with arched eyebrows and a slightly open mouth."
    );
    assert_eq!(
        she(&[Smiling, Young, Attractive, HeavyMakeup]),
        "The smiling, young attractive woman has heavy makeup."
    );
    assert_eq!(he(&[Young, Attractive, Smiling]), "The young attractive man is smiling.");
    assert_eq!(he(&[Young, Attractive]), "The man looks young and attractive.");
    assert_eq!(she(&[WearingEarrings, WearingLipstick]), "She is wearing earrings and lipstick.");
    assert_eq!(he(&[Bald]), "He is bald.");
    assert_eq!(he(&[Bald, RecedingHairline]), "He is bald and has a receding hairline.");
    assert_eq!(
        she(&[StraightHair, BlackHair, GrayHair, Bangs]),
        "She has straight hair which is black and gray in colour with bangs."
    );
    assert_eq!(she(&[RosyCheeks, HeavyMakeup]), "The woman has rosy cheeks and heavy makeup.");
}

#[test]
fn facial_hair_exhaustive_round_trip() {
    let members = CaptionGroup::FacialHair.members();
    let mut cases = 0;
    for mask in 0..16u32 {
        for male in [false, true] {
            let mut v = AttributeVector::new();
            for (i, &a) in members.iter().enumerate() {
                v.set(a, mask & (1 << i) != 0);
            }
            v.set(Male, male);
            assert!(round_trips(&v), "mask {mask:04b} male {male}");
            let ex = extract_attributes(&compose_caption(&v).text).unwrap();
            if mask != 0 {
                assert_eq!(ex.gender, Some(if male { Gender::He } else { Gender::She }));
            }
            cases += 1;
        }
    }
    assert_eq!(cases, 32);
}

#[test]
fn ten_thousand_random_vectors_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10_000 {
        let v = random_vector(&mut rng);
        assert!(round_trips(&v), "vector {i}: {}", compose_caption(&v).text);
    }
}

#[test]
fn corpus_of_ten_thousand_is_fast_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vectors: Vec<AttributeVector> = (0..10_000).map(|_| random_vector(&mut rng)).collect();
    let start = Instant::now();
    let recs = caption_corpus(&vectors);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(recs.len(), 10_000);
    for v in &vectors {
        let (_, ops) = compose_caption_counted(v);
        assert!(ops <= 3 * ATTRIBUTE_COUNT);
    }
}

#[test]
fn empty_caption_extracts_to_all_false() {
    let ex = extract_attributes("").unwrap();
    assert_eq!(ex.attributes, AttributeVector::new());
    assert_eq!(ex.gender, None);
}

#[test]
fn corrupted_word_is_reported() {
    match extract_attributes("He sports a gotee and mustache.") {
        Err(Error::Extraction(msg)) => assert!(msg.contains("gotee"), "{msg}"),
        other => panic!("expected extraction error, got {other:?}"),
    }
    assert!(extract_attributes("He has sideburns. The woman has high cheekbones.").is_err());
    assert!(extract_attributes("She has bangs. She has bangs.").is_err());
}

#[test]
fn sentence_count_and_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..2000 {
        let v = random_vector(&mut rng);
        let c = compose_caption(&v);
        assert!(c.sentences.len() <= 6);
        assert_eq!(c.text, c.sentences.join(" "));
        let rendered: Vec<String> = CaptionGroup::ALL.iter().filter_map(|g| g.render(&v)).collect();
        assert_eq!(rendered, c.sentences);
    }
}

fn two_record_fixture() -> String {
    let mut s = String::from("2\n");
    s.push_str(
        &Attribute::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(" "),
    );
    s.push('\n');
    let row = |id: &str, on: &[Attribute]| {
        let vals: Vec<&str> = Attribute::ALL
            .iter()
            .map(|a| if on.contains(a) { "1" } else { "-1" })
            .collect();
        format!("{id} {}\n", vals.join(" "))
    };
    s.push_str(&row("000001.jpg", &[Male, Goatee, Mustache]));
    s.push_str(&row("000002.jpg", &[HighCheekbones, WavyHair]));
    s
}

#[test]
fn attr_file_parses_two_records() {
    let v = parse_attr_text(&two_record_fixture(), "fixture").unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v[0].source_id.as_deref(), Some("000001.jpg"));
    assert!(v[0].get(Goatee) && v[0].get(Male) && !v[0].get(Young));
    assert!(v[1].get(WavyHair) && !v[1].get(Male));
}

#[test]
fn attr_file_errors_carry_line_numbers() {
    let bad_value = two_record_fixture().replacen("000002.jpg -1", "000002.jpg 0", 1);
    match parse_attr_text(&bad_value, "f") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
    let bad_cols = two_record_fixture().replacen("000001.jpg -1", "000001.jpg", 1);
    match parse_attr_text(&bad_cols, "f") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let bad_name = two_record_fixture().replacen("Young", "Old", 1);
    match parse_attr_text(&bad_name, "f") {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("Old"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn corpus_formats() {
    let v = parse_attr_text(&two_record_fixture(), "fixture").unwrap();
    let recs = caption_corpus(&v);
    assert_eq!(
        corpus_to_tsv(&recs),
        "000001.jpg\tHe sports a goatee and mustache.\n000002.jpg\tThe woman has high cheekbones. She has wavy hair.\n"
    );
    let jsonl = corpus_to_jsonl(&recs);
    assert_eq!(jsonl.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["attribute_bits"].as_str().unwrap(), v[0].bit_string());
}

proptest! {
    #[test]
    fn attr_file_serialization_is_self_inverse(bits in proptest::collection::vec(any::<bool>(), ATTRIBUTE_COUNT * 3)) {
        let vectors: Vec<AttributeVector> = bits
            .chunks(ATTRIBUTE_COUNT)
            .enumerate()
            .map(|(i, c)| {
                let mut v = AttributeVector::from_bits(c.try_into().unwrap());
                v.source_id = Some(format!("{:06}.jpg", i + 1));
                v
            })
            .collect();
        let text = format_attr_file(&vectors);
        let parsed = parse_attr_text(&text, "gen").unwrap();
        prop_assert_eq!(&parsed, &vectors);
        prop_assert_eq!(format_attr_file(&parsed), text);
    }

    #[test]
    fn compose_is_deterministic(bits in proptest::collection::vec(any::<bool>(), ATTRIBUTE_COUNT)) {
        let v = AttributeVector::from_bits(bits.try_into().unwrap());
        prop_assert_eq!(compose_caption(&v), compose_caption(&v.clone()));
        prop_assert!(round_trips(&v));
    }
}
