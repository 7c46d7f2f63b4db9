//! Attribute vectors to multi-sentence captions, and back.
//!
//! Each of the six attribute groups renders at most one sentence. Sentences
//! are assembled with a token queue: the gendered opener goes in first, the
//! first present attribute is pushed directly, and every later attribute is
//! preceded by its conjunction. The phrase dictionary lives in
//! `data/phrases.tsv`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ATTRIBUTE_COUNT: usize = 40;

/// The 40 CelebA attributes in canonical file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    FiveOClockShadow,
    ArchedEyebrows,
    Attractive,
    BagsUnderEyes,
    Bald,
    Bangs,
    BigLips,
    BigNose,
    BlackHair,
    BlondHair,
    Blurry,
    BrownHair,
    BushyEyebrows,
    Chubby,
    DoubleChin,
    Eyeglasses,
    Goatee,
    GrayHair,
    HeavyMakeup,
    HighCheekbones,
    Male,
    MouthSlightlyOpen,
    Mustache,
    NarrowEyes,
    NoBeard,
    OvalFace,
    PaleSkin,
    PointyNose,
    RecedingHairline,
    RosyCheeks,
    Sideburns,
    Smiling,
    StraightHair,
    WavyHair,
    WearingEarrings,
    WearingHat,
    WearingLipstick,
    WearingNecklace,
    WearingNecktie,
    Young,
}

const NAMES: [&str; ATTRIBUTE_COUNT] = [
    "5_o_Clock_Shadow",
    "Arched_Eyebrows",
    "Attractive",
    "Bags_Under_Eyes",
    "Bald",
    "Bangs",
    "Big_Lips",
    "Big_Nose",
    "Black_Hair",
    "Blond_Hair",
    "Blurry",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Chubby",
    "Double_Chin",
    "Eyeglasses",
    "Goatee",
    "Gray_Hair",
    "Heavy_Makeup",
    "High_Cheekbones",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Oval_Face",
    "Pale_Skin",
    "Pointy_Nose",
    "Receding_Hairline",
    "Rosy_Cheeks",
    "Sideburns",
    "Smiling",
    "Straight_Hair",
    "Wavy_Hair",
    "Wearing_Earrings",
    "Wearing_Hat",
    "Wearing_Lipstick",
    "Wearing_Necklace",
    "Wearing_Necktie",
    "Young",
];

impl Attribute {
    pub const ALL: [Attribute; ATTRIBUTE_COUNT] = {
        use Attribute::*;
        [
            FiveOClockShadow,
            ArchedEyebrows,
            Attractive,
            BagsUnderEyes,
            Bald,
            Bangs,
            BigLips,
            BigNose,
            BlackHair,
            BlondHair,
            Blurry,
            BrownHair,
            BushyEyebrows,
            Chubby,
            DoubleChin,
            Eyeglasses,
            Goatee,
            GrayHair,
            HeavyMakeup,
            HighCheekbones,
            Male,
            MouthSlightlyOpen,
            Mustache,
            NarrowEyes,
            NoBeard,
            OvalFace,
            PaleSkin,
            PointyNose,
            RecedingHairline,
            RosyCheeks,
            Sideburns,
            Smiling,
            StraightHair,
            WavyHair,
            WearingEarrings,
            WearingHat,
            WearingLipstick,
            WearingNecklace,
            WearingNecktie,
            Young,
        ]
    };

    pub fn index(self) -> usize {
        self as usize
    }

    /// CelebA column name, e.g. `Mouth_Slightly_Open`.
    pub fn name(self) -> &'static str {
        NAMES[self as usize]
    }

    pub fn from_name(name: &str) -> Option<Attribute> {
        NAMES.iter().position(|n| *n == name).map(|i| Attribute::ALL[i])
    }

    /// Whether the attribute can appear in a caption. Male is not mapped: it
    /// only chooses pronouns.
    pub fn is_mapped(self) -> bool {
        phrase_table().entries[self as usize].is_some()
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    bits: [bool; ATTRIBUTE_COUNT],
    pub source_id: Option<String>,
}

impl Default for AttributeVector {
    fn default() -> Self {
        AttributeVector {
            bits: [false; ATTRIBUTE_COUNT],
            source_id: None,
        }
    }
}

impl AttributeVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bits(bits: [bool; ATTRIBUTE_COUNT]) -> Self {
        AttributeVector {
            bits,
            source_id: None,
        }
    }

    pub fn with(attrs: &[Attribute]) -> Self {
        let mut v = Self::new();
        for &a in attrs {
            v.set(a, true);
        }
        v
    }

    pub fn get(&self, a: Attribute) -> bool {
        self.bits[a as usize]
    }

    pub fn set(&mut self, a: Attribute, value: bool) {
        self.bits[a as usize] = value;
    }

    pub fn bits(&self) -> &[bool; ATTRIBUTE_COUNT] {
        &self.bits
    }

    pub fn present(&self) -> impl Iterator<Item = Attribute> + '_ {
        Attribute::ALL.into_iter().filter(|a| self.get(*a))
    }

    /// Copy keeping only attributes that captions can express.
    pub fn mapped_only(&self) -> AttributeVector {
        let mut out = AttributeVector::new();
        for a in self.present().filter(|a| a.is_mapped()) {
            out.set(a, true);
        }
        out
    }

    /// 40 characters of `0`/`1` in canonical order.
    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        if s.len() != ATTRIBUTE_COUNT {
            return Err(Error::contract(format!(
                "attribute bit string has {} characters, expected {ATTRIBUTE_COUNT}",
                s.len()
            )));
        }
        let mut bits = [false; ATTRIBUTE_COUNT];
        for (i, c) in s.chars().enumerate() {
            bits[i] = match c {
                '0' => false,
                '1' => true,
                other => return Err(Error::contract(format!("bad attribute bit {other:?}"))),
            };
        }
        Ok(Self::from_bits(bits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    He,
    She,
}

impl Gender {
    pub fn of(attrs: &AttributeVector) -> Gender {
        if attrs.get(Attribute::Male) {
            Gender::He
        } else {
            Gender::She
        }
    }

    fn pronoun(self) -> &'static str {
        match self {
            Gender::He => "He",
            Gender::She => "She",
        }
    }

    fn noun(self) -> &'static str {
        match self {
            Gender::He => "man",
            Gender::She => "woman",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaptionGroup {
    FaceStructure,
    FacialHair,
    HairStyle,
    OtherFeatures,
    Appearance,
    Accessories,
}

impl CaptionGroup {
    pub const ALL: [CaptionGroup; 6] = [
        CaptionGroup::FaceStructure,
        CaptionGroup::FacialHair,
        CaptionGroup::HairStyle,
        CaptionGroup::OtherFeatures,
        CaptionGroup::Appearance,
        CaptionGroup::Accessories,
    ];

    fn from_name(s: &str) -> Option<CaptionGroup> {
        CaptionGroup::ALL.into_iter().find(|g| format!("{g:?}") == s)
    }

    /// Member attributes in rendering order.
    pub fn members(self) -> &'static [Attribute] {
        &phrase_table().members[self as usize]
    }

    /// The group's sentence for `attrs`, or `None` when no member is present.
    pub fn render(self, attrs: &AttributeVector) -> Option<String> {
        self.render_counted(attrs, &mut 0)
    }

    fn render_counted(self, attrs: &AttributeVector, ops: &mut usize) -> Option<String> {
        let present: Vec<Attribute> = self.members().iter().copied().filter(|a| attrs.get(*a)).collect();
        if present.is_empty() {
            return None;
        }
        let g = Gender::of(attrs);
        let q = match self {
            CaptionGroup::FacialHair => facial_hair(g, &present),
            CaptionGroup::HairStyle => hair_style(g, &present),
            CaptionGroup::Appearance => appearance(g, &present),
            CaptionGroup::FaceStructure => {
                let mut q = Queue::opener(&["The", g.noun(), "has"]);
                q.push_all(&present);
                q
            }
            CaptionGroup::OtherFeatures => {
                let mut q = Queue::opener(&[g.pronoun(), "has"]);
                q.push_all(&present);
                q
            }
            CaptionGroup::Accessories => {
                let mut q = Queue::opener(&[g.pronoun(), "is", "wearing"]);
                q.push_all(&present);
                q
            }
        };
        *ops += q.ops;
        Some(q.sentence())
    }
}

// ---- phrase dictionary --------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct PhraseEntry {
    conjunction: Option<&'static str>,
    phrase: &'static str,
}

struct PhraseTable {
    entries: [Option<PhraseEntry>; ATTRIBUTE_COUNT],
    members: [Vec<Attribute>; 6],
}

const PHRASES_TSV: &str = include_str!("../data/phrases.tsv");

fn phrase_table() -> &'static PhraseTable {
    static TABLE: OnceLock<PhraseTable> = OnceLock::new();
    TABLE.get_or_init(|| parse_phrase_table(PHRASES_TSV).expect("bundled phrase table is valid"))
}

fn parse_phrase_table(src: &'static str) -> Result<PhraseTable> {
    let mut entries = [None; ATTRIBUTE_COUNT];
    let mut members: [Vec<Attribute>; 6] = Default::default();
    let mut seen = HashSet::new();
    for (i, line) in src.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: "data/phrases.tsv".into(),
            line: i + 1,
            msg,
        };
        let f: Vec<&'static str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", f.len())));
        }
        let attr = Attribute::from_name(f[0]).ok_or_else(|| bad(format!("unknown attribute {}", f[0])))?;
        if !seen.insert(attr) {
            return Err(bad(format!("duplicate attribute {attr}")));
        }
        if f[1] == "-" {
            continue;
        }
        let group = CaptionGroup::from_name(f[1]).ok_or_else(|| bad(format!("unknown group {}", f[1])))?;
        members[group as usize].push(attr);
        entries[attr as usize] = Some(PhraseEntry {
            conjunction: (f[2] != "-").then_some(f[2]),
            phrase: f[3],
        });
    }
    if seen.len() != ATTRIBUTE_COUNT {
        return Err(Error::contract("phrase table does not list every attribute"));
    }
    Ok(PhraseTable { entries, members })
}

fn phrase(a: Attribute) -> &'static str {
    phrase_table().entries[a as usize].expect("mapped attribute").phrase
}

fn conjunction(a: Attribute) -> &'static str {
    phrase_table().entries[a as usize]
        .and_then(|e| e.conjunction)
        .unwrap_or(",")
}

// ---- sentence queue -----------------------------------------------------

struct Queue {
    tokens: Vec<String>,
    tail_is_attribute: bool,
    ops: usize,
}

impl Queue {
    fn opener(words: &[&str]) -> Queue {
        Queue {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            tail_is_attribute: false,
            ops: words.len(),
        }
    }

    fn push_attribute(&mut self, conj: &str, text: String) {
        if self.tail_is_attribute {
            self.tokens.push(conj.to_string());
            self.ops += 1;
        }
        self.tokens.push(text);
        self.tail_is_attribute = true;
        self.ops += 1;
    }

    fn push_all(&mut self, attrs: &[Attribute]) {
        for &a in attrs {
            self.push_attribute(conjunction(a), phrase(a).to_string());
        }
    }

    fn back(&self) -> Option<&str> {
        self.tokens.last().map(String::as_str)
    }

    fn reset(&mut self, words: &[&str]) {
        self.tokens = words.iter().map(|w| w.to_string()).collect();
        self.ops += 1 + words.len();
    }

    /// Space-joined, commas attached to the previous token, first letter
    /// capitalized, terminated with a period.
    fn sentence(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            if !s.is_empty() && t != "," {
                s.push(' ');
            }
            s.push_str(t);
        }
        let mut chars = s.chars();
        let mut out: String = chars.next().map(|c| c.to_ascii_uppercase()).into_iter().collect();
        out.extend(chars);
        out.push('.');
        out
    }
}

fn facial_hair(g: Gender, present: &[Attribute]) -> Queue {
    let mut q = Queue::opener(&[g.pronoun(), "sports", "a"]);
    for &a in present {
        if q.back() == Some("a") {
            if a != Attribute::Sideburns {
                q.push_attribute(conjunction(a), phrase(a).to_string());
            } else {
                q.reset(&[g.pronoun(), "has", phrase(a)]);
                q.tail_is_attribute = true;
            }
        } else {
            q.push_attribute(conjunction(a), phrase(a).to_string());
        }
    }
    q
}

/// "a", "a and b", "a, b and c".
fn list_join(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn hair_style(g: Gender, present: &[Attribute]) -> Queue {
    use Attribute::*;
    let has = |a| present.contains(&a);
    let textures: Vec<&str> = [StraightHair, WavyHair].into_iter().filter(|a| has(*a)).map(phrase).collect();
    let colours: Vec<&str> = [BlackHair, BlondHair, BrownHair, GrayHair]
        .into_iter()
        .filter(|a| has(*a))
        .map(phrase)
        .collect();
    let hair = match (textures.is_empty(), colours.is_empty()) {
        (true, true) => None,
        (true, false) => Some(format!("hair which is {} in colour", list_join(&colours))),
        (false, true) => Some(format!("{} hair", list_join(&textures))),
        (false, false) => Some(format!(
            "{} hair which is {} in colour",
            list_join(&textures),
            list_join(&colours)
        )),
    };
    let extras: Vec<Attribute> = [Bangs, RecedingHairline].into_iter().filter(|a| has(*a)).collect();
    let any_items = hair.is_some() || !extras.is_empty();
    let mut q = if has(Bald) {
        let mut q = Queue::opener(&[g.pronoun(), "is", phrase(Bald)]);
        if any_items {
            q.tokens.extend(["and".to_string(), "has".to_string()]);
            q.ops += 2;
        }
        q
    } else {
        Queue::opener(&[g.pronoun(), "has"])
    };
    if let Some(h) = hair {
        q.push_attribute(",", h);
    }
    q.push_all(&extras);
    q
}

fn appearance(g: Gender, present: &[Attribute]) -> Queue {
    use Attribute::*;
    let has = |a| present.contains(&a);
    let adjectives: Vec<&str> = [Young, Attractive].into_iter().filter(|a| has(*a)).map(phrase).collect();
    let complements: Vec<Attribute> = [PaleSkin, RosyCheeks, HeavyMakeup].into_iter().filter(|a| has(*a)).collect();
    if !complements.is_empty() {
        let mut q = Queue::opener(&["The"]);
        if has(Smiling) {
            q.tokens.push(phrase(Smiling).into());
            if !adjectives.is_empty() {
                q.tokens.push(",".into());
            }
        }
        q.tokens.extend(adjectives.iter().map(|s| s.to_string()));
        q.tokens.extend([g.noun().to_string(), "has".to_string()]);
        q.ops = q.tokens.len();
        q.push_all(&complements);
        q
    } else if has(Smiling) {
        let mut q = Queue::opener(&["The"]);
        q.tokens.extend(adjectives.iter().map(|s| s.to_string()));
        q.tokens.extend([g.noun(), "is", phrase(Smiling)].map(String::from));
        q.ops = q.tokens.len();
        q
    } else {
        let mut q = Queue::opener(&["The", g.noun(), "looks"]);
        q.tokens.push(adjectives.join(" and "));
        q.ops += 1;
        q
    }
}

// ---- captions -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub sentences: Vec<String>,
    pub text: String,
    pub gender: Gender,
}

/// Renders every group in order and joins the sentences with single spaces.
pub fn compose_caption(attrs: &AttributeVector) -> Caption {
    compose_caption_counted(attrs).0
}

/// [`compose_caption`] plus the number of primitive queue operations used.
pub fn compose_caption_counted(attrs: &AttributeVector) -> (Caption, usize) {
    let mut ops = 0;
    let sentences: Vec<String> = CaptionGroup::ALL
        .iter()
        .filter_map(|g| g.render_counted(attrs, &mut ops))
        .collect();
    let text = sentences.join(" ");
    (
        Caption {
            sentences,
            text,
            gender: Gender::of(attrs),
        },
        ops,
    )
}

/// Result of inverting a caption. `gender` is `None` for the empty caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extraction {
    pub attributes: AttributeVector,
    pub gender: Option<Gender>,
}

struct ReverseTable {
    sentences: HashMap<String, (CaptionGroup, Gender, Vec<Attribute>)>,
    vocabulary: HashSet<String>,
}

fn words(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split_whitespace()
        .map(|w| w.trim_matches(|c| c == ',' || c == '.').to_ascii_lowercase())
        .filter(|w| !w.is_empty())
}

/// Every sentence the compiler can emit, found by enumerating each group's
/// member subsets for both genders.
fn reverse_table() -> &'static ReverseTable {
    static TABLE: OnceLock<ReverseTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut sentences = HashMap::new();
        let mut vocabulary = HashSet::new();
        for group in CaptionGroup::ALL {
            let members = group.members();
            for mask in 1u32..(1 << members.len()) {
                let chosen: Vec<Attribute> = (0..members.len())
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| members[i])
                    .collect();
                for gender in [Gender::He, Gender::She] {
                    let mut v = AttributeVector::with(&chosen);
                    v.set(Attribute::Male, gender == Gender::He);
                    let s = group.render(&v).expect("non-empty subset renders");
                    vocabulary.extend(words(&s));
                    let prev = sentences.insert(s.clone(), (group, gender, chosen.clone()));
                    assert!(prev.is_none(), "ambiguous caption sentence {s:?}");
                }
            }
        }
        ReverseTable { sentences, vocabulary }
    })
}

/// Inverts [`compose_caption`] on its output language.
pub fn extract_attributes(text: &str) -> Result<Extraction> {
    let table = reverse_table();
    let mut attrs = AttributeVector::new();
    let mut gender = None;
    let mut last_group: Option<CaptionGroup> = None;
    for raw in text.split('.').map(str::trim).filter(|s| !s.is_empty()) {
        let sentence = format!("{raw}.");
        let Some((group, g, chosen)) = table.sentences.get(&sentence) else {
            let unknown: Vec<String> = words(&sentence).filter(|w| !table.vocabulary.contains(w)).collect();
            return Err(Error::Extraction(if unknown.is_empty() {
                format!("unrecognized sentence {sentence:?}")
            } else {
                format!("unknown token(s) {} in {sentence:?}", unknown.join(", "))
            }));
        };
        if last_group.is_some_and(|l| l >= *group) {
            return Err(Error::Extraction(format!("sentence out of group order: {sentence:?}")));
        }
        if gender.is_some_and(|prev| prev != *g) {
            return Err(Error::Extraction(format!("inconsistent gender at {sentence:?}")));
        }
        last_group = Some(*group);
        gender = Some(*g);
        for &a in chosen {
            attrs.set(a, true);
        }
    }
    attrs.set(Attribute::Male, gender == Some(Gender::He));
    Ok(Extraction {
        attributes: attrs,
        gender,
    })
}

// ---- CelebA attribute files ---------------------------------------------

/// Parses the `list_attr_celeba` layout: record count, attribute names, then
/// `filename v1 … v40` rows with values in {-1, 1}.
pub fn parse_attr_file(path: &Path) -> Result<Vec<AttributeVector>> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_attr_text(&src, &path.display().to_string())
}

pub fn parse_attr_text(src: &str, origin: &str) -> Result<Vec<AttributeVector>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = src.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, count_line) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| err(1, format!("expected record count, found {count_line:?}")))?;
    let (_, names_line) = lines.next().ok_or_else(|| err(2, "missing attribute names".into()))?;
    let names: Vec<&str> = names_line.split_whitespace().collect();
    if names.len() != ATTRIBUTE_COUNT {
        return Err(err(2, format!("expected {ATTRIBUTE_COUNT} attribute names, found {}", names.len())));
    }
    let mut order = Vec::with_capacity(ATTRIBUTE_COUNT);
    for n in &names {
        order.push(Attribute::from_name(n).ok_or_else(|| err(2, format!("unknown attribute name {n:?}")))?);
    }
    let mut out = Vec::with_capacity(count);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != ATTRIBUTE_COUNT + 1 {
            return Err(err(
                ln,
                format!("expected {} columns, found {}", ATTRIBUTE_COUNT + 1, fields.len()),
            ));
        }
        let mut v = AttributeVector::new();
        v.source_id = Some(fields[0].to_string());
        for (a, f) in order.iter().zip(&fields[1..]) {
            match *f {
                "1" => v.set(*a, true),
                "-1" => v.set(*a, false),
                other => return Err(err(ln, format!("value {other:?} for {a} is not -1 or 1"))),
            }
        }
        out.push(v);
    }
    if out.len() != count {
        return Err(err(1, format!("header declares {count} records, found {}", out.len())));
    }
    Ok(out)
}

/// Writes vectors in canonical `list_attr_celeba` form. Records without a
/// source id are named by their 1-based index.
pub fn format_attr_file(vectors: &[AttributeVector]) -> String {
    let mut s = format!("{}\n{}\n", vectors.len(), NAMES.join(" "));
    for (i, v) in vectors.iter().enumerate() {
        s.push_str(&record_id(v, i));
        for &b in v.bits() {
            s.push_str(if b { "  1" } else { " -1" });
        }
        s.push('\n');
    }
    s
}

fn record_id(v: &AttributeVector, index: usize) -> String {
    v.source_id.clone().unwrap_or_else(|| format!("{:06}.jpg", index + 1))
}

// ---- caption corpus -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption_text: String,
    pub attribute_bits: String,
}

pub fn caption_corpus(vectors: &[AttributeVector]) -> Vec<CaptionRecord> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| CaptionRecord {
            image_id: record_id(v, i),
            caption_text: compose_caption(v).text,
            attribute_bits: v.bit_string(),
        })
        .collect()
}

pub fn corpus_to_jsonl(records: &[CaptionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain strings serialize"));
        s.push('\n');
    }
    s
}

pub fn corpus_to_tsv(records: &[CaptionRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{}\t{}\n", r.image_id, r.caption_text))
        .collect()
}

/// Reads either format written above; TSV rows carry no attribute bits.
pub fn read_corpus(path: &Path) -> Result<Vec<CaptionRecord>> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = if line.starts_with('{') {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?
        } else {
            let (id, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: origin.clone(),
                line: i + 1,
                msg: "expected JSON object or image_id<TAB>caption".into(),
            })?;
            CaptionRecord {
                image_id: id.to_string(),
                caption_text: text.to_string(),
                attribute_bits: String::new(),
            }
        };
        out.push(rec);
    }
    Ok(out)
}
