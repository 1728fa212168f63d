//! Procedural closed-world corpus: scenes rendered to small images, plus
//! captions, long chunks and annotated queries in every pseudo-language.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{build_vocab, LanguageTag, SurfaceMap, Vocab};

pub const NUM_SCENES: u32 = 1440;
pub const NUM_CLASSES: u32 = 360;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.as_str() == s)
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", Cyan => "cyan", Purple => "purple" });
word_enum!(Position { TopLeft => "top-left", TopRight => "top-right", BottomLeft => "bottom-left", BottomRight => "bottom-right", Center => "center" });
word_enum!(TimeTag { Today => "today", LastWeek => "last-week", LastMonth => "last-month", LastYear => "last-year" });
word_enum!(Intent { FindPhoto => "find_photo", FindDocument => "find_document", Chitchat => "chitchat" });
word_enum!(SlotType { Object => "OBJECT", Color => "COLOR", Count => "COUNT", Position => "POSITION", Time => "TIME" });

impl Color {
    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Purple => [1.0, 0.0, 1.0],
        }
    }
}

impl Position {
    fn words(self) -> &'static [&'static str] {
        match self {
            Position::TopLeft => &["top", "left"],
            Position::TopRight => &["top", "right"],
            Position::BottomLeft => &["bottom", "left"],
            Position::BottomRight => &["bottom", "right"],
            Position::Center => &["center"],
        }
    }

    /// Top-left pixel of the 16×16 cell.
    fn origin(self) -> (usize, usize) {
        match self {
            Position::TopLeft => (0, 0),
            Position::TopRight => (0, 16),
            Position::BottomLeft => (16, 0),
            Position::BottomRight => (16, 16),
            Position::Center => (8, 8),
        }
    }
}

impl TimeTag {
    fn words(self) -> &'static [&'static str] {
        match self {
            TimeTag::Today => &["today"],
            TimeTag::LastWeek => &["last", "week"],
            TimeTag::LastMonth => &["last", "month"],
            TimeTag::LastYear => &["last", "year"],
        }
    }
}

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

/// BIO slot label. Index 0 is `O`; `B-t` is `1 + 2t`, `I-t` is `2 + 2t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotLabel {
    O,
    B(SlotType),
    I(SlotType),
}

pub const NUM_SLOT_LABELS: usize = 1 + 2 * 5;
pub const NUM_INTENTS: usize = 3;

impl SlotLabel {
    pub fn index(self) -> usize {
        match self {
            SlotLabel::O => 0,
            SlotLabel::B(t) => 1 + 2 * t.index(),
            SlotLabel::I(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i == 0 {
            return Some(SlotLabel::O);
        }
        let t = SlotType::from_index((i - 1) / 2)?;
        Some(if i % 2 == 1 {
            SlotLabel::B(t)
        } else {
            SlotLabel::I(t)
        })
    }

    pub fn is_o(self) -> bool {
        self == SlotLabel::O
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "O" {
            return Some(SlotLabel::O);
        }
        let (bio, ty) = s.split_once('-')?;
        let ty = SlotType::parse(ty)?;
        match bio {
            "B" => Some(SlotLabel::B(ty)),
            "I" => Some(SlotLabel::I(ty)),
            _ => None,
        }
    }
}

impl std::fmt::Display for SlotLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SlotLabel::O => f.write_str("O"),
            SlotLabel::B(t) => write!(f, "B-{}", t.as_str()),
            SlotLabel::I(t) => write!(f, "I-{}", t.as_str()),
        }
    }
}

/// Rejects an `I-x` that does not continue a `B-x` or `I-x`.
pub fn check_bio(labels: &[SlotLabel]) -> Result<()> {
    let mut prev = SlotLabel::O;
    for (i, &l) in labels.iter().enumerate() {
        if let SlotLabel::I(t) = l {
            let ok = matches!(prev, SlotLabel::B(p) | SlotLabel::I(p) if p == t);
            if !ok {
                return Err(Error::InvalidBio(format!("I-{} at position {i}", t.as_str())));
            }
        }
        prev = l;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub scene_id: u32,
    pub shape: Shape,
    pub color: Color,
    pub count: u8,
    pub position: Position,
    pub time_tag: TimeTag,
}

impl SceneSpec {
    /// Index of the (shape, color, count, position) class; time is not visual.
    pub fn class_id(&self) -> u32 {
        self.scene_id / TimeTag::ALL.len() as u32
    }
}

/// Mixed-radix decode, most significant digit first:
/// shape, color, count, position, time tag.
pub fn decode_scene(scene_id: u32) -> Result<SceneSpec> {
    if scene_id >= NUM_SCENES {
        return Err(Error::SceneOutOfRange(scene_id));
    }
    let mut rest = scene_id as usize;
    let time = rest % 4;
    rest /= 4;
    let pos = rest % 5;
    rest /= 5;
    let count = rest % 3;
    rest /= 3;
    let color = rest % 6;
    let shape = rest / 6;
    Ok(SceneSpec {
        scene_id,
        shape: Shape::ALL[shape],
        color: Color::ALL[color],
        count: count as u8 + 1,
        position: Position::ALL[pos],
        time_tag: TimeTag::ALL[time],
    })
}

/// H×W×C image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub pixels: Vec<f32>,
}

impl ImageGrid {
    pub const LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != Self::LEN {
            return Err(Error::Shape(format!(
                "image has {} values, expected {}",
                pixels.len(),
                Self::LEN
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(ImageGrid { pixels })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        &self.pixels[i..i + CHANNELS]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::LEN * 4 {
            return Err(Error::Shape(format!("image file has {} bytes", bytes.len())));
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(pixels)
    }
}

const GLYPH: usize = 7;

fn glyph(shape: Shape) -> [&'static str; GLYPH] {
    match shape {
        Shape::Circle => [
            "..###..", ".#####.", "#######", "#######", "#######", ".#####.", "..###..",
        ],
        Shape::Square => [
            "#######", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", "#######",
        ],
        Shape::Triangle => [
            "...#...", "..###..", "..###..", ".#####.", ".#####.", "#######", "#######",
        ],
        Shape::Cross => [
            "#.....#", ".#...#.", "..#.#..", "...#...", "..#.#..", ".#...#.", "#.....#",
        ],
    }
}

/// Offsets of each copy inside the 16×16 cell.
fn slots(count: u8) -> &'static [(usize, usize)] {
    match count {
        1 => &[(4, 4)],
        2 => &[(4, 0), (4, 8)],
        _ => &[(0, 0), (0, 8), (8, 4)],
    }
}

/// Seeded low-amplitude noise background with `count` glyphs painted in the
/// position's cell.
pub fn render_image(spec: &SceneSpec, render_seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(render_seed);
    let mut pixels: Vec<f32> = (0..ImageGrid::LEN)
        .map(|_| rng.random_range(0.0f32..0.2))
        .collect();
    let rgb = spec.color.rgb();
    let (oy, ox) = spec.position.origin();
    let g = glyph(spec.shape);
    for &(sy, sx) in slots(spec.count) {
        for (gy, line) in g.iter().enumerate() {
            for (gx, ch) in line.bytes().enumerate() {
                if ch == b'#' {
                    let (y, x) = (oy + sy + gy, ox + sx + gx);
                    let i = (y * IMAGE_SIZE + x) * CHANNELS;
                    pixels[i..i + CHANNELS].copy_from_slice(&rgb);
                }
            }
        }
    }
    ImageGrid { pixels }
}

const PHOTO_PREFIXES: [&[&str]; 5] = [
    &["please", "find"],
    &["show", "me", "photos", "of"],
    &["i", "want", "pictures", "of"],
    &["search", "images", "with"],
    &["please", "show", "me", "the", "picture", "of"],
];
const DOCUMENT_PREFIXES: [&[&str]; 5] = [
    &["open", "documents", "about"],
    &["please", "find", "notes", "about"],
    &["show", "me", "files", "about"],
    &["search", "reports", "on"],
    &["i", "want", "the", "document", "about"],
];
const CHITCHAT: [&[&str]; 6] = [
    &["hello", "how", "are", "you"],
    &["thanks", "a", "lot"],
    &["good", "morning", "friend"],
    &["what", "a", "nice", "day"],
    &["tell", "me", "a", "joke"],
    &["how", "is", "your", "day"],
];
const SUFFIXES: [&[&str]; 4] = [&[], &["thanks"], &["please"], &["now"]];

const FILLERS: [&[&str]; 20] = [
    &["the", "meeting", "was", "moved", "to", "the", "small", "room"],
    &["our", "team", "reviewed", "the", "quarterly", "budget"],
    &["this", "page", "describes", "the", "travel", "plan"],
    &["several", "guests", "arrived", "before", "noon"],
    &["the", "report", "mentions", "a", "delayed", "shipment"],
    &["keep", "this", "record", "for", "future", "reference"],
    &["the", "garden", "needs", "water", "every", "morning"],
    &["a", "new", "library", "opened", "near", "the", "station"],
    &["the", "train", "was", "late", "because", "of", "snow"],
    &["we", "bought", "bread", "and", "cheese", "for", "lunch"],
    &["the", "museum", "is", "closed", "on", "holidays"],
    &["she", "wrote", "a", "long", "letter", "to", "her", "cousin"],
    &["the", "old", "bridge", "was", "painted", "again"],
    &["students", "gathered", "in", "the", "main", "hall"],
    &["the", "printer", "ran", "out", "of", "paper"],
    &["coffee", "was", "served", "after", "the", "talk"],
    &["the", "river", "flooded", "the", "lower", "road"],
    &["he", "fixed", "the", "broken", "chair", "quickly"],
    &["the", "festival", "attracted", "many", "visitors"],
    &["nobody", "answered", "the", "phone", "yesterday"],
];

/// Every word the generator can emit in the base language, sorted.
pub fn base_wordlist() -> Vec<&'static str> {
    let mut set: BTreeSet<&'static str> = BTreeSet::new();
    set.extend(COUNT_WORDS);
    set.extend(Shape::ALL.iter().map(|s| s.as_str()));
    set.extend(Color::ALL.iter().map(|c| c.as_str()));
    set.extend(Position::ALL.iter().flat_map(|p| p.words().iter().copied()));
    set.extend(TimeTag::ALL.iter().flat_map(|t| t.words().iter().copied()));
    set.extend(["at", "from"]);
    for pool in [&PHOTO_PREFIXES[..], &DOCUMENT_PREFIXES[..], &CHITCHAT[..], &SUFFIXES[..], &FILLERS[..]] {
        for phrase in pool {
            set.extend(phrase.iter().copied());
        }
    }
    set.into_iter().collect()
}

/// Template generator bound to one surface map.
#[derive(Clone, Debug)]
pub struct Generator {
    surface: SurfaceMap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedQuery {
    pub tokens: Vec<String>,
    pub lang: LanguageTag,
    pub intent: Intent,
    pub slots: Vec<SlotLabel>,
    pub semantic_text: Vec<String>,
}

impl Generator {
    pub fn new(n_langs: usize, lexicon_seed: u64) -> Self {
        Generator {
            surface: SurfaceMap::new(&base_wordlist(), n_langs, lexicon_seed),
        }
    }

    pub fn surface(&self) -> &SurfaceMap {
        &self.surface
    }

    fn realize(&self, words: &[&str], lang: &LanguageTag) -> Vec<String> {
        self.surface
            .map_all(words, lang)
            .expect("generator only emits base words")
    }

    fn caption_base(spec: &SceneSpec) -> Vec<&'static str> {
        let mut w = vec![
            COUNT_WORDS[spec.count as usize - 1],
            spec.color.as_str(),
            spec.shape.as_str(),
            "at",
        ];
        w.extend(spec.position.words());
        w
    }

    /// `<count> <color> <shape> at <position>`.
    pub fn caption(&self, spec: &SceneSpec, lang: &LanguageTag) -> Vec<String> {
        self.realize(&Self::caption_base(spec), lang)
    }

    /// 40–80 words: scene-agnostic filler sentences around the caption
    /// followed by `from <time>`.
    pub fn chunk(&self, spec: &SceneSpec, lang: &LanguageTag, chunk_seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed);
        let mut core = Self::caption_base(spec);
        core.push("from");
        core.extend(spec.time_tag.words());
        let target = rng.random_range(40..=70usize);
        let mut total = core.len();
        let mut sentences: Vec<&[&str]> = Vec::new();
        while total < target {
            let s = FILLERS[rng.random_range(0..FILLERS.len())];
            total += s.len();
            sentences.push(s);
        }
        let at = rng.random_range(0..=sentences.len());
        let mut words: Vec<&str> = Vec::with_capacity(total);
        for (i, s) in sentences.iter().enumerate() {
            if i == at {
                words.extend(&core);
            }
            words.extend(s.iter());
        }
        if at == sentences.len() {
            words.extend(&core);
        }
        self.realize(&words, lang)
    }

    /// Noise prefix + slot-bearing content for retrieval intents, noise only
    /// for chitchat. A count of one and the center position are left
    /// implicit, so the content words still identify the scene exactly.
    pub fn query(
        &self,
        spec: &SceneSpec,
        lang: &LanguageTag,
        intent: Intent,
        noise_seed: u64,
    ) -> AnnotatedQuery {
        let mut words: Vec<&str> = Vec::new();
        let mut slots: Vec<SlotLabel> = Vec::new();
        let mut push = |w: &[&'static str], ty: Option<SlotType>| {
            for (i, &word) in w.iter().enumerate() {
                words.push(word);
                slots.push(match ty {
                    None => SlotLabel::O,
                    Some(t) if i == 0 => SlotLabel::B(t),
                    Some(t) => SlotLabel::I(t),
                });
            }
        };
        let suffix_pick = (noise_seed / 6) as usize % SUFFIXES.len();
        match intent {
            Intent::Chitchat => {
                push(CHITCHAT[noise_seed as usize % CHITCHAT.len()], None);
            }
            Intent::FindPhoto | Intent::FindDocument => {
                let pool = if intent == Intent::FindPhoto {
                    &PHOTO_PREFIXES
                } else {
                    &DOCUMENT_PREFIXES
                };
                push(pool[noise_seed as usize % pool.len()], None);
                if spec.count > 1 {
                    push(&[COUNT_WORDS[spec.count as usize - 1]], Some(SlotType::Count));
                }
                push(&[spec.color.as_str()], Some(SlotType::Color));
                push(&[spec.shape.as_str()], Some(SlotType::Object));
                if spec.position != Position::Center {
                    push(&["at"], None);
                    push(spec.position.words(), Some(SlotType::Position));
                }
                push(&["from"], None);
                push(spec.time_tag.words(), Some(SlotType::Time));
            }
        }
        push(SUFFIXES[suffix_pick], None);
        let tokens = self.realize(&words, lang);
        let semantic_text = semantic_subsequence(&tokens, &slots);
        AnnotatedQuery {
            tokens,
            lang: lang.clone(),
            intent,
            slots,
            semantic_text,
        }
    }
}

pub(crate) fn semantic_subsequence(tokens: &[String], slots: &[SlotLabel]) -> Vec<String> {
    tokens
        .iter()
        .zip(slots)
        .filter(|(_, s)| !s.is_o())
        .map(|(t, _)| t.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub scene_id: u32,
    pub lang: String,
    pub caption: Vec<String>,
    pub chunk: Vec<String>,
    pub query_tokens: Vec<String>,
    pub intent: String,
    pub slots: Vec<String>,
    pub semantic_text: Vec<String>,
    pub image_ref: String,
}

impl CorpusRecord {
    pub fn spec(&self) -> Result<SceneSpec> {
        decode_scene(self.scene_id)
    }

    pub fn language(&self) -> Result<LanguageTag> {
        LanguageTag::parse(&self.lang)
            .ok_or_else(|| Error::Config(format!("bad language tag {:?}", self.lang)))
    }

    pub fn intent(&self) -> Result<Intent> {
        Intent::parse(&self.intent)
            .ok_or_else(|| Error::Config(format!("bad intent {:?}", self.intent)))
    }

    pub fn slot_labels(&self) -> Result<Vec<SlotLabel>> {
        self.slots
            .iter()
            .map(|s| SlotLabel::parse(s).ok_or_else(|| Error::InvalidBio(format!("unknown label {s:?}"))))
            .collect()
    }

    pub fn query(&self) -> Result<AnnotatedQuery> {
        Ok(AnnotatedQuery {
            tokens: self.query_tokens.clone(),
            lang: self.language()?,
            intent: self.intent()?,
            slots: self.slot_labels()?,
            semantic_text: self.semantic_text.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_langs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
    pub lexicon_seed: u64,
    /// Probability that a record's query is chitchat.
    pub chitchat_ratio: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_langs: 3,
            train_scenes: 256,
            val_scenes: 64,
            test_scenes: 128,
            seed: 0,
            lexicon_seed: 17,
            chitchat_ratio: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCount {
    pub split: Split,
    pub scenes: usize,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub splits: Vec<SplitCount>,
    pub images: usize,
    pub vocab_size: usize,
    pub languages: Vec<String>,
}

/// splitmix64 finalizer; derives independent per-record seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn image_file_name(scene_id: u32) -> String {
    format!("scene_{scene_id}.f32")
}

/// Scene ids per split, each split sorted ascending.
pub fn split_scenes(cfg: &CorpusConfig) -> Result<[Vec<u32>; 3]> {
    let needed = cfg.train_scenes + cfg.val_scenes + cfg.test_scenes;
    if needed > NUM_SCENES as usize {
        return Err(Error::Config(format!(
            "scene budget {needed} exceeds the {NUM_SCENES} available scenes"
        )));
    }
    let mut ids: Vec<u32> = (0..NUM_SCENES).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x51])));
    let take = |from: usize, n: usize| {
        let mut v = ids[from..from + n].to_vec();
        v.sort_unstable();
        v
    };
    let train = take(0, cfg.train_scenes);
    let val = take(cfg.train_scenes, cfg.val_scenes);
    let test = take(cfg.train_scenes + cfg.val_scenes, cfg.test_scenes);
    Ok([train, val, test])
}

fn pick_intent(cfg: &CorpusConfig, seed: u64) -> Intent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    if u < cfg.chitchat_ratio {
        Intent::Chitchat
    } else if u < cfg.chitchat_ratio + (1.0 - cfg.chitchat_ratio) / 2.0 {
        Intent::FindPhoto
    } else {
        Intent::FindDocument
    }
}

/// All records of one scene list, ordered by scene then language.
pub fn make_records(gen: &Generator, cfg: &CorpusConfig, scenes: &[u32]) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::with_capacity(scenes.len() * cfg.n_langs);
    for &sid in scenes {
        let spec = decode_scene(sid)?;
        let chunk_seed = mix_seed(&[cfg.seed, sid as u64, 1]);
        for l in 0..cfg.n_langs {
            let lang = LanguageTag::new(l);
            let intent = pick_intent(cfg, mix_seed(&[cfg.seed, sid as u64, l as u64, 2]));
            let noise_seed = mix_seed(&[cfg.seed, sid as u64, l as u64, 3]);
            let q = gen.query(&spec, &lang, intent, noise_seed);
            out.push(CorpusRecord {
                scene_id: sid,
                lang: lang.name.clone(),
                caption: gen.caption(&spec, &lang),
                chunk: gen.chunk(&spec, &lang, chunk_seed),
                query_tokens: q.tokens,
                intent: intent.as_str().to_string(),
                slots: q.slots.iter().map(ToString::to_string).collect(),
                semantic_text: q.semantic_text,
                image_ref: format!("images/{}", image_file_name(sid)),
            });
        }
    }
    Ok(out)
}

pub fn render_seed(cfg: &CorpusConfig, scene_id: u32) -> u64 {
    mix_seed(&[cfg.seed, scene_id as u64, 0])
}

/// Vocabulary over every text field of the training split.
pub fn corpus_vocab(train: &[CorpusRecord]) -> Result<Vocab> {
    let mut sentences: Vec<Vec<&str>> = Vec::with_capacity(train.len() * 3);
    for r in train {
        sentences.push(r.caption.iter().map(String::as_str).collect());
        sentences.push(r.chunk.iter().map(String::as_str).collect());
        sentences.push(r.query_tokens.iter().map(String::as_str).collect());
    }
    build_vocab(&sentences, 1)
}

/// Writes `{train,val,test}.jsonl`, `images/scene_<id>.f32`, `vocab.tsv`
/// and finally `manifest.json`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    if cfg.n_langs == 0 {
        return Err(Error::Config("at least one language is required".into()));
    }
    let splits = split_scenes(cfg)?;
    let gen = Generator::new(cfg.n_langs, cfg.lexicon_seed);
    fs::create_dir_all(out_dir.join("images"))?;
    // A stale manifest would make a half-written corpus look complete.
    match fs::remove_file(out_dir.join("manifest.json")) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let mut counts = Vec::new();
    let mut train_records = Vec::new();
    let mut images = 0;
    for (split, scenes) in Split::ALL.iter().zip(&splits) {
        let records = make_records(&gen, cfg, scenes)?;
        let mut buf = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        fs::write(out_dir.join(format!("{}.jsonl", split.name())), buf)?;
        for &sid in scenes {
            let img = render_image(&decode_scene(sid)?, render_seed(cfg, sid));
            fs::write(out_dir.join("images").join(image_file_name(sid)), img.to_le_bytes())?;
            images += 1;
        }
        counts.push(SplitCount {
            split: *split,
            scenes: scenes.len(),
            records: records.len(),
        });
        if *split == Split::Train {
            train_records = records;
        }
    }
    let vocab = corpus_vocab(&train_records)?;
    fs::write(out_dir.join("vocab.tsv"), vocab.to_tsv())?;
    let manifest = CorpusManifest {
        config: cfg.clone(),
        splits: counts,
        images,
        vocab_size: vocab.len(),
        languages: (0..cfg.n_langs).map(|l| LanguageTag::new(l).name).collect(),
    };
    let mut f = fs::File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

/// A generated corpus read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub vocab: Vocab,
    pub train: Vec<CorpusRecord>,
    pub val: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    images: HashMap<u32, ImageGrid>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: CorpusManifest =
            serde_json::from_reader(BufReader::new(fs::File::open(root.join("manifest.json"))?))?;
        let vocab = Vocab::read_tsv(BufReader::new(fs::File::open(root.join("vocab.tsv"))?))?;
        let read = |split: Split| -> Result<Vec<CorpusRecord>> {
            let f = fs::File::open(root.join(format!("{}.jsonl", split.name())))?;
            let mut out = Vec::new();
            for line in BufReader::new(f).lines() {
                let line = line?;
                if !line.is_empty() {
                    out.push(serde_json::from_str(&line)?);
                }
            }
            Ok(out)
        };
        let train = read(Split::Train)?;
        let val = read(Split::Val)?;
        let test = read(Split::Test)?;
        let mut images = HashMap::new();
        for r in train.iter().chain(&val).chain(&test) {
            if images.contains_key(&r.scene_id) {
                continue;
            }
            let path = root.join(&r.image_ref);
            let bytes = fs::read(&path).map_err(|_| Error::MissingImage(path.clone()))?;
            images.insert(r.scene_id, ImageGrid::from_le_bytes(&bytes)?);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            vocab,
            train,
            val,
            test,
            images,
        })
    }

    pub fn split(&self, split: Split) -> &[CorpusRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn image(&self, scene_id: u32) -> Result<&ImageGrid> {
        self.images
            .get(&scene_id)
            .ok_or_else(|| Error::MissingImage(self.root.join("images").join(image_file_name(scene_id))))
    }

    pub fn n_langs(&self) -> usize {
        self.manifest.config.n_langs
    }
}
