//! Procedural "glyph faces": a synthetic, attribute-conditioned stand-in for
//! CelebA whose attributes can be read back from pixels.
//!
//! Faces are drawn in a 16x16 layout grid scaled to the image size, so every
//! mark covers whole grid cells at any multiple-of-16 resolution. Layout rows:
//!
//! | rows  | content                                                     |
//! |-------|-------------------------------------------------------------|
//! | 0-2   | hair band (colour, or skin when bald); hat over cols 2-13   |
//! | 3     | bangs                                                       |
//! | 4     | eyeshadow (Heavy_Makeup)                                    |
//! | 5-7   | eyes at row 6; eyeglasses rings and bridge                  |
//! | 4-8   | sideburns at cols 3 and 12                                  |
//! | 7-8   | bare skin at cols 7-8 (skin tone encodes Young)             |
//! | 8-9   | cheek marks (High_Cheekbones), earrings at cols 2 and 13    |
//! | 9     | mustache                                                    |
//! | 10-11 | mouth: corners raised (Smiling) or flat; red when lipstick  |
//! | 12    | dark gap (Mouth_Slightly_Open)                              |
//! | 9-13  | square jaw at cols 2-13 (Male)                              |
//! | 13    | goatee                                                      |
//! | 14    | necklace, necktie                                           |
//! | 15    | one cell per remaining attribute, dark when present         |
//!
//! The probe-able attributes are Male, Young, Smiling, Mouth_Slightly_Open,
//! Wearing_Lipstick, Heavy_Makeup and High_Cheekbones. Their marks never
//! overlap any other mark, so each probe reads its own cells.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{self, compose_caption, Attribute, AttributeVector, Caption};
use crate::embedding::{embed_caption, EmbeddingConfig, TextEmbedding};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::imageio;
use crate::scalar::Scalar;

type Rgb = [f64; 3];

pub const BACKGROUND: Rgb = [0.55, 0.62, 0.72];
pub const SKIN_YOUNG: Rgb = [0.98, 0.82, 0.66];
pub const SKIN_OLD: Rgb = [0.72, 0.63, 0.58];
pub const HAIR_BLOND: Rgb = [0.9, 0.86, 0.5];
pub const HAIR_BLACK: Rgb = [0.05, 0.05, 0.05];
pub const HAIR_BROWN: Rgb = [0.4, 0.25, 0.1];
pub const HAIR_GRAY: Rgb = [0.6, 0.6, 0.6];
pub const HAIR_DEFAULT: Rgb = [0.3, 0.2, 0.25];
const HAT: Rgb = [0.55, 0.1, 0.12];
const EYESHADOW: Rgb = [0.45, 0.2, 0.6];
const EYE: Rgb = [0.1, 0.1, 0.15];
const FRAME: Rgb = [0.15, 0.15, 0.15];
const CHEEK: Rgb = [0.95, 0.42, 0.45];
const GOLD: Rgb = [0.95, 0.8, 0.2];
const TIE: Rgb = [0.2, 0.1, 0.5];
const LIPSTICK: Rgb = [0.85, 0.05, 0.15];
const LIPS: Rgb = [0.6, 0.32, 0.34];
const MOUTH_GAP: Rgb = [0.12, 0.02, 0.04];
const MARK: Rgb = [0.05, 0.05, 0.05];

/// Attributes drawn as a dark cell in the bottom row, by column.
pub const BARCODE: [Attribute; 16] = {
    use Attribute::*;
    [
        Chubby,
        DoubleChin,
        OvalFace,
        FiveOClockShadow,
        StraightHair,
        WavyHair,
        RecedingHairline,
        BigLips,
        BigNose,
        PointyNose,
        NarrowEyes,
        ArchedEyebrows,
        BushyEyebrows,
        Attractive,
        PaleSkin,
        RosyCheeks,
    ]
};

pub const PROBE_ABLE: [Attribute; 7] = [
    Attribute::Male,
    Attribute::Young,
    Attribute::Smiling,
    Attribute::MouthSlightlyOpen,
    Attribute::WearingLipstick,
    Attribute::HeavyMakeup,
    Attribute::HighCheekbones,
];

/// Largest jitter offset as a fraction of the image size.
pub const MAX_JITTER: f64 = 0.005;
const SUPERSAMPLE: usize = 8;

fn hair_colour(a: &AttributeVector) -> Rgb {
    use Attribute::*;
    [(BlackHair, HAIR_BLACK), (BlondHair, HAIR_BLOND), (BrownHair, HAIR_BROWN), (GrayHair, HAIR_GRAY)]
        .into_iter()
        .find(|(attr, _)| a.get(*attr))
        .map_or(HAIR_DEFAULT, |(_, c)| c)
}

fn skin(a: &AttributeVector) -> Rgb {
    if a.get(Attribute::Young) {
        SKIN_YOUNG
    } else {
        SKIN_OLD
    }
}

fn cell(gx: f64, gy: f64, c0: f64, c1: f64, r0: f64, r1: f64) -> bool {
    gx >= c0 && gx < c1 && gy >= r0 && gy < r1
}

/// Colour at layout-grid coordinates `(gx, gy)` in `[0, 16)`.
fn paint(a: &AttributeVector, gx: f64, gy: f64) -> Rgb {
    use Attribute::*;
    let on = |x| a.get(x);
    let hair = hair_colour(a);
    let sk = skin(a);
    let pair = |c0: f64, c1: f64, r0: f64, r1: f64| cell(gx, gy, c0, c1, r0, r1) || cell(gx, gy, 16.0 - c1, 16.0 - c0, r0, r1);

    let mut c = BACKGROUND;
    let (ex, ey) = ((gx - 8.0) / 4.0, (gy - 8.5) / 5.8);
    if ex * ex + ey * ey <= 1.0 {
        c = sk;
    }
    if on(Male) && cell(gx, gy, 2.0, 14.0, 9.0, 14.0) {
        c = sk;
    }
    if gy < 3.0 {
        c = if on(Bald) { sk } else { hair };
    }
    if on(Bangs) && cell(gx, gy, 4.0, 12.0, 3.0, 4.0) {
        c = hair;
    }
    if on(WearingHat) && cell(gx, gy, 2.0, 14.0, 0.0, 3.0) {
        c = HAT;
    }
    if on(Sideburns) && pair(3.0, 4.0, 4.0, 9.0) {
        c = hair;
    }
    if on(HeavyMakeup) && pair(4.0, 7.0, 4.0, 5.0) {
        c = EYESHADOW;
    }
    if pair(5.0, 6.0, 6.0, 7.0) {
        c = EYE;
    }
    if on(Eyeglasses) && (pair(4.0, 7.0, 5.0, 8.0) && !pair(5.0, 6.0, 6.0, 7.0) || cell(gx, gy, 7.0, 9.0, 6.0, 7.0)) {
        c = FRAME;
    }
    if on(HighCheekbones) && pair(4.0, 6.0, 8.0, 10.0) {
        c = CHEEK;
    }
    if on(WearingEarrings) && pair(2.0, 3.0, 8.0, 10.0) {
        c = GOLD;
    }
    if on(Mustache) && cell(gx, gy, 6.0, 10.0, 9.0, 10.0) {
        c = hair;
    }
    let lips = if on(WearingLipstick) { LIPSTICK } else { LIPS };
    let mouth = if on(Smiling) {
        pair(5.0, 6.0, 10.0, 11.0) || cell(gx, gy, 6.0, 10.0, 11.0, 12.0)
    } else {
        cell(gx, gy, 5.0, 11.0, 11.0, 12.0)
    };
    if mouth {
        c = lips;
    }
    if on(MouthSlightlyOpen) && cell(gx, gy, 6.0, 10.0, 12.0, 13.0) {
        c = MOUTH_GAP;
    }
    if on(Goatee) && cell(gx, gy, 7.0, 9.0, 13.0, 14.0) {
        c = hair;
    }
    if on(WearingNecklace) && cell(gx, gy, 5.0, 11.0, 14.0, 15.0) {
        c = GOLD;
    }
    if on(WearingNecktie) && cell(gx, gy, 7.0, 9.0, 14.0, 15.0) {
        c = TIE;
    }
    if gy >= 15.0 {
        let col = gx.floor().clamp(0.0, 15.0) as usize;
        if on(BARCODE[col]) {
            c = MARK;
        }
    }
    c
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || size % 16 != 0 {
        return Err(Error::contract(format!("image size {size} must be a positive multiple of 16")));
    }
    Ok(())
}

/// Renders `attrs` at `size`x`size`, shifted by a per-seed offset of at most
/// [`MAX_JITTER`] of the size. Output is `[3, size, size]` in `[-1, 1]`.
pub fn render_procedural_face(attrs: &AttributeVector, size: usize, jitter_seed: u64) -> Result<Tensor<f64>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let dx = rng.random_range(-MAX_JITTER..=MAX_JITTER) * 16.0;
    let dy = rng.random_range(-MAX_JITTER..=MAX_JITTER) * 16.0;
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let scale = 16.0 / size as f64;
    let ss = SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let gx = (px as f64 + (sx as f64 + 0.5) / ss) * scale - dx;
                    let gy = (py as f64 + (sy as f64 + 0.5) / ss) * scale - dy;
                    let c = paint(attrs, gx, gy);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[k * plane + py * size + px] = acc[k] / (ss * ss) * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data)
}

// ---- probes -------------------------------------------------------------

/// Cells (in layout-grid units) with the colours allowed there when the
/// attribute is present and when it is absent.
struct ProbeRegion {
    cols: (usize, usize),
    rows: (usize, usize),
    present: &'static [Rgb],
    absent: &'static [Rgb],
}

const SKINS: &[Rgb] = &[SKIN_YOUNG, SKIN_OLD];
const ANY_LIPS: &[Rgb] = &[LIPS, LIPSTICK];

fn probe_regions(a: Attribute) -> Option<Vec<ProbeRegion>> {
    use Attribute::*;
    let r = |c0, c1, r0, r1, present, absent| ProbeRegion {
        cols: (c0, c1),
        rows: (r0, r1),
        present,
        absent,
    };
    Some(match a {
        Male => vec![r(2, 4, 11, 13, SKINS, &[BACKGROUND]), r(12, 14, 11, 13, SKINS, &[BACKGROUND])],
        Young => vec![r(7, 9, 7, 9, &[SKIN_YOUNG], &[SKIN_OLD])],
        HeavyMakeup => vec![
            r(4, 7, 4, 5, &[EYESHADOW], &[SKIN_YOUNG, SKIN_OLD, BACKGROUND]),
            r(9, 12, 4, 5, &[EYESHADOW], &[SKIN_YOUNG, SKIN_OLD, BACKGROUND]),
        ],
        HighCheekbones => vec![r(4, 6, 8, 10, &[CHEEK], SKINS), r(10, 12, 8, 10, &[CHEEK], SKINS)],
        Smiling => vec![
            r(5, 6, 10, 11, ANY_LIPS, SKINS),
            r(10, 11, 10, 11, ANY_LIPS, SKINS),
            r(5, 6, 11, 12, SKINS, ANY_LIPS),
            r(10, 11, 11, 12, SKINS, ANY_LIPS),
        ],
        MouthSlightlyOpen => vec![r(6, 10, 12, 13, &[MOUTH_GAP], SKINS)],
        WearingLipstick => vec![r(6, 10, 11, 12, &[LIPSTICK], &[LIPS])],
        _ => return None,
    })
}

/// Mean per-cell RGB distance above which "present" is never accepted.
pub const PROBE_TOLERANCE: f64 = 0.25;
/// "Present" must be this many times closer than "absent".
pub const PROBE_MARGIN: f64 = 0.8;

/// Mean colour of one layout-grid cell, mapped back to `[0, 1]`.
fn grid_cell(img: &[f64], size: usize, gx: usize, gy: usize) -> Rgb {
    let k = size / 16;
    let plane = size * size;
    let mut acc = [0.0; 3];
    for y in gy * k..(gy + 1) * k {
        for x in gx * k..(gx + 1) * k {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img[c * plane + y * size + x];
            }
        }
    }
    acc.map(|v| (v / (k * k) as f64 + 1.0) * 0.5)
}

fn dist(a: Rgb, b: Rgb) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean distance of each hypothesis (present, absent) to the image, over
/// the region's grid cells.
fn probe_scores(img: &[f64], size: usize, regions: &[ProbeRegion]) -> (f64, f64) {
    let (mut present, mut absent, mut n) = (0.0, 0.0, 0usize);
    for reg in regions {
        for y in reg.rows.0..reg.rows.1 {
            for x in reg.cols.0..reg.cols.1 {
                let p = grid_cell(img, size, x, y);
                let nearest = |set: &[Rgb]| set.iter().map(|c| dist(p, *c)).fold(f64::INFINITY, f64::min);
                present += nearest(reg.present);
                absent += nearest(reg.absent);
                n += 1;
            }
        }
    }
    (present / n as f64, absent / n as f64)
}

/// Reads one attribute back from an image. `None` for attributes outside
/// the probe-able subset. Present only when the image is clearly closer to
/// the "present" colours than to the "absent" ones and within tolerance.
pub fn probe_attribute<S: Scalar>(image: &Tensor<S>, attribute: Attribute) -> Option<bool> {
    let regions = probe_regions(attribute)?;
    let size = image.shape()[1];
    assert!(
        image.shape().len() == 3 && image.shape()[0] == 3 && size % 16 == 0,
        "probe needs a [3, s, s] image with s a multiple of 16"
    );
    let img = image.to_f64_vec();
    let (present, absent) = probe_scores(&img, size, &regions);
    Some(present < PROBE_MARGIN * absent && present <= PROBE_TOLERANCE)
}

/// Fraction of (image, probe-able attribute) pairs where the probe agrees
/// with the attribute vector.
pub fn probe_agreement<S: Scalar>(images: &[Tensor<S>], attrs: &[AttributeVector]) -> f64 {
    assert_eq!(images.len(), attrs.len());
    let mut hits = 0usize;
    for (img, a) in images.iter().zip(attrs) {
        for p in PROBE_ABLE {
            if probe_attribute(img, p) == Some(a.get(p)) {
                hits += 1;
            }
        }
    }
    hits as f64 / (images.len() * PROBE_ABLE.len()) as f64
}

// ---- datasets -----------------------------------------------------------

/// Approximate CelebA marginals, in canonical attribute order.
pub const MARGINALS: [f64; caption::ATTRIBUTE_COUNT] = [
    0.11, 0.27, 0.51, 0.20, 0.02, 0.15, 0.24, 0.23, 0.24, 0.15, 0.05, 0.21, 0.14, 0.06, 0.05, 0.07, 0.06,
    0.04, 0.39, 0.46, 0.42, 0.48, 0.04, 0.12, 0.83, 0.28, 0.04, 0.28, 0.08, 0.07, 0.06, 0.48, 0.21, 0.32,
    0.19, 0.05, 0.47, 0.12, 0.07, 0.77,
];

const HAIR_COLOURS: [Attribute; 4] = [
    Attribute::BlackHair,
    Attribute::BlondHair,
    Attribute::BrownHair,
    Attribute::GrayHair,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image: Tensor<f64>,
    pub attributes: AttributeVector,
    pub caption: Caption,
    pub embedding: TextEmbedding,
    pub identity_class: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub image_size: usize,
    pub class_count: usize,
    pub embedding: EmbeddingConfig,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Image tensor converted to the training precision.
    pub fn image<S: Scalar>(&self, i: usize) -> Vec<S> {
        self.records[i].image.data().iter().map(|&v| S::lit(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    pub size: usize,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            classes: 50,
            seed: 0,
            size: 16,
            train_fraction: 0.75,
        }
    }
}

/// One attribute vector per class. Each binary attribute is present in
/// exactly `round(p * classes)` classes, chosen by a seeded shuffle, so the
/// class-level marginals match [`MARGINALS`] as closely as the class count
/// allows. Hair colours are mutually exclusive.
pub fn class_attribute_vectors(classes: usize, rng: &mut impl Rng) -> Vec<AttributeVector> {
    let mut out = vec![AttributeVector::new(); classes];
    let take = |p: f64| ((p * classes as f64).round() as usize).min(classes);
    let mut order: Vec<usize> = (0..classes).collect();
    for a in Attribute::ALL {
        if HAIR_COLOURS.contains(&a) {
            continue;
        }
        order.shuffle(rng);
        for &c in &order[..take(MARGINALS[a.index()])] {
            out[c].set(a, true);
        }
    }
    order.shuffle(rng);
    let mut next = 0;
    for h in HAIR_COLOURS {
        let k = take(MARGINALS[h.index()]).min(classes - next);
        for &c in &order[next..next + k] {
            out[c].set(h, true);
        }
        next += k;
    }
    out
}

fn record_seed(seed: u64, index: usize) -> u64 {
    // splitmix-style mixing keeps per-record streams independent of n
    let mut x = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Splits each class's records with the first `round(f * k)` of a seeded
/// shuffle going to training.
fn stratified_split(classes: &[usize], class_count: usize, fraction: f64, rng: &mut impl Rng) -> Vec<Split> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &c) in classes.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut split = vec![Split::Test; classes.len()];
    for members in &mut by_class {
        members.shuffle(rng);
        let k = (members.len() as f64 * fraction).round() as usize;
        for &i in &members[..k] {
            split[i] = Split::Train;
        }
    }
    split
}

fn make_record(
    image_id: String,
    image: Tensor<f64>,
    attributes: AttributeVector,
    identity_class: usize,
    split: Split,
    emb: &EmbeddingConfig,
) -> DatasetRecord {
    let caption = compose_caption(&attributes);
    let embedding = embed_caption(&caption.text, emb);
    DatasetRecord {
        image_id,
        image,
        attributes,
        caption,
        embedding,
        identity_class,
        split,
    }
}

/// Record `i` belongs to class `i % classes`, so class sizes differ by at most one.
pub fn generate_dataset(config: &SynthConfig, emb: &EmbeddingConfig) -> Result<Dataset> {
    check_size(config.size)?;
    emb.validate()?;
    if config.classes == 0 || config.n < config.classes {
        return Err(Error::contract(format!(
            "need at least one record per class (n={}, classes={})",
            config.n, config.classes
        )));
    }
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::contract("train_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vectors = class_attribute_vectors(config.classes, &mut rng);
    let classes: Vec<usize> = (0..config.n).map(|i| i % config.classes).collect();
    let splits = stratified_split(&classes, config.classes, config.train_fraction, &mut rng);
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let image_id = format!("{:06}.ppm", i + 1);
        let mut attrs = vectors[classes[i]].clone();
        attrs.source_id = Some(image_id.clone());
        let image = render_procedural_face(&attrs, config.size, record_seed(config.seed, i))?;
        records.push(make_record(image_id, image, attrs, classes[i], splits[i], emb));
    }
    Ok(Dataset {
        records,
        image_size: config.size,
        class_count: config.classes,
        embedding: emb.clone(),
    })
}

// ---- CelebA-format files ------------------------------------------------

pub const IMAGE_DIR: &str = "images";
pub const ATTR_FILE: &str = "list_attr_celeba.txt";
pub const IDENTITY_FILE: &str = "identity_CelebA.txt";
pub const PARTITION_FILE: &str = "list_eval_partition.txt";
pub const CAPTIONS_FILE: &str = "captions.jsonl";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes images and the CelebA-style metadata files. Returns every file written.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut written = Vec::new();
    for r in &ds.records {
        let p = img_dir.join(&r.image_id);
        imageio::save_image(&r.image, &p)?;
        written.push(p);
    }
    let attrs: Vec<AttributeVector> = ds.records.iter().map(|r| r.attributes.clone()).collect();
    written.push(write(&dir.join(ATTR_FILE), caption::format_attr_file(&attrs))?);
    let ids: String = ds
        .records
        .iter()
        .map(|r| format!("{} {}\n", r.image_id, r.identity_class))
        .collect();
    written.push(write(&dir.join(IDENTITY_FILE), ids)?);
    let parts: String = ds
        .records
        .iter()
        .map(|r| format!("{} {}\n", r.image_id, if r.split == Split::Train { 0 } else { 2 }))
        .collect();
    written.push(write(&dir.join(PARTITION_FILE), parts)?);
    let corpus = caption::caption_corpus(&attrs);
    written.push(write(&dir.join(CAPTIONS_FILE), caption::corpus_to_jsonl(&corpus))?);
    Ok(written)
}

fn read_pairs(path: &Path) -> Result<HashMap<String, usize>> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in src.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = || Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("expected `<image> <integer>`, found {line:?}"),
        };
        if f.len() != 2 {
            return Err(bad());
        }
        out.insert(f[0].to_string(), f[1].parse().map_err(|_| bad())?);
    }
    Ok(out)
}

/// Loads images listed in a CelebA attribute file. Without an identity file
/// every image is its own class; without a partition file the split is a
/// per-class 75/25 split seeded with 0.
pub fn load_celeba_format(
    image_dir: &Path,
    attr_file: &Path,
    identity_file: Option<&Path>,
    partition_file: Option<&Path>,
    size: usize,
    emb: &EmbeddingConfig,
) -> Result<Dataset> {
    check_size(size)?;
    emb.validate()?;
    let vectors = caption::parse_attr_file(attr_file)?;
    let missing: Vec<String> = vectors
        .iter()
        .filter_map(|v| v.source_id.clone())
        .filter(|id| !image_dir.join(id).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let ids: Vec<String> = vectors.iter().map(|v| v.source_id.clone().unwrap_or_default()).collect();
    let classes: Vec<usize> = match identity_file {
        Some(p) => {
            let map = read_pairs(p)?;
            let raw: Vec<usize> = ids
                .iter()
                .map(|id| map.get(id).copied().ok_or_else(|| Error::contract(format!("{id} has no identity"))))
                .collect::<Result<_>>()?;
            // compact arbitrary identity numbers to 0..C in order of first use
            let mut dense = BTreeMap::new();
            for &c in &raw {
                let next = dense.len();
                dense.entry(c).or_insert(next);
            }
            raw.iter().map(|c| dense[c]).collect()
        }
        None => (0..ids.len()).collect(),
    };
    let class_count = classes.iter().max().map_or(0, |m| m + 1);
    let splits = match partition_file {
        Some(p) => {
            let map = read_pairs(p)?;
            ids.iter()
                .map(|id| match map.get(id) {
                    Some(0) => Split::Train,
                    _ => Split::Test,
                })
                .collect()
        }
        None => stratified_split(&classes, class_count, 0.75, &mut ChaCha8Rng::seed_from_u64(0)),
    };
    let mut records = Vec::with_capacity(vectors.len());
    for (i, attrs) in vectors.into_iter().enumerate() {
        let image = imageio::load_image(&image_dir.join(&ids[i]), size)?;
        records.push(make_record(ids[i].clone(), image, attrs, classes[i], splits[i], emb));
    }
    Ok(Dataset {
        records,
        image_size: size,
        class_count,
        embedding: emb.clone(),
    })
}

/// Loads a directory laid out by [`write_dataset`].
pub fn load_dataset_dir(dir: &Path, size: usize, emb: &EmbeddingConfig) -> Result<Dataset> {
    let opt = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
    let identity = opt(IDENTITY_FILE);
    let partition = opt(PARTITION_FILE);
    load_celeba_format(
        &dir.join(IMAGE_DIR),
        &dir.join(ATTR_FILE),
        identity.as_deref(),
        partition.as_deref(),
        size,
        emb,
    )
}
