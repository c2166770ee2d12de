//! Synthetic shape-world image–caption corpus.
//!
//! Each item is a 32×32 RGB image holding one or two flat-colored shapes
//! on a black background, with a caption such as "a red circle is above
//! the blue square". The caption grammar assigns every word its POS tag.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_ften, write_ften, Dtype, Tensor};
use crate::textproc::{tokenize, TokenSequence, WordClass, CLS};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const CELL: i64 = 16;

pub const FORMAT_NAME: &str = "fda-corpus";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: u64,
    /// `[32, 32, 3]`, values in `[0, 1]`
    pub image: Tensor,
    pub caption: String,
    /// One tag per caption token, `[CLS]` excluded.
    pub pos_tags: Vec<WordClass>,
    pub split: Split,
}

impl CorpusItem {
    /// Tokenized caption carrying the stored tags.
    pub fn sequence(&self, max_len: usize) -> Result<TokenSequence> {
        let seq = tokenize(&self.caption, max_len)?;
        let mut tags = vec![WordClass::Other];
        tags.extend(self.pos_tags.iter().copied().take(seq.len() - 1));
        tags.resize(seq.len(), WordClass::Other);
        seq.with_tags(tags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn covers(self, dx: i64, dy: i64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= 36,
            Shape::Square => dx.abs() <= 5 && dy.abs() <= 5,
            // apex up, base at dy = 5
            Shape::Triangle => (-6..=5).contains(&dy) && 2 * dx.abs() <= dy + 6,
        }
    }
}

/// Palette entry: caption word and 8-bit RGB.
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("purple", [255, 0, 255]),
    ("white", [255, 255, 255]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    const ALL: [Relation; 4] = [
        Relation::Above,
        Relation::Below,
        Relation::LeftOf,
        Relation::RightOf,
    ];

    fn words(self) -> &'static [&'static str] {
        match self {
            Relation::Above => &["above"],
            Relation::Below => &["below"],
            Relation::LeftOf => &["to", "the", "left", "of"],
            Relation::RightOf => &["to", "the", "right", "of"],
        }
    }

    /// Grid cells (row, col) of the subject and the reference object.
    fn cells(self, free: usize) -> ((i64, i64), (i64, i64)) {
        let f = free as i64;
        match self {
            Relation::Above => ((0, f), (1, f)),
            Relation::Below => ((1, f), (0, f)),
            Relation::LeftOf => ((f, 0), (f, 1)),
            Relation::RightOf => ((f, 1), (f, 0)),
        }
    }
}

/// Closed vocabulary with its tag table.
#[derive(Debug, Clone)]
pub struct Grammar {
    tags: BTreeMap<&'static str, WordClass>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::new()
    }
}

impl Grammar {
    pub fn new() -> Self {
        let mut tags = BTreeMap::new();
        for s in Shape::ALL {
            tags.insert(s.word(), WordClass::Noun);
        }
        tags.insert("picture", WordClass::Noun);
        for (c, _) in COLORS {
            tags.insert(c, WordClass::Adj);
        }
        for w in ["sits", "rests"] {
            tags.insert(w, WordClass::Verb);
        }
        // Relation words listed in the function-word dictionary are FUNC.
        for w in ["a", "the", "is", "above", "below", "to", "of", "in"] {
            tags.insert(w, WordClass::Func);
        }
        for w in ["left", "right"] {
            tags.insert(w, WordClass::Other);
        }
        tags.insert(".", WordClass::Punct);
        Self { tags }
    }

    pub fn tag_of(&self, token: &str) -> WordClass {
        if token == CLS {
            return WordClass::Other;
        }
        self.tags.get(token).copied().unwrap_or(WordClass::Other)
    }

    /// Re-tags a tokenized sequence from the table; unknown words get OTHER.
    pub fn tag(&self, seq: TokenSequence) -> TokenSequence {
        let tags = seq.tokens().iter().map(|t| self.tag_of(t)).collect();
        seq.with_tags(tags).expect("tags are parallel by construction")
    }

    /// `[CLS]`, `[UNK]`, then every grammar word in sorted order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = vec![CLS.to_string(), "[UNK]".to_string()];
        v.extend(self.tags.keys().map(|s| s.to_string()));
        v
    }
}

struct Placed {
    shape: Shape,
    color: usize,
    cell: (i64, i64),
}

fn item_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id)
}

fn compose(rng: &mut ChaCha8Rng) -> (Vec<&'static str>, Vec<Placed>) {
    let article = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { "a" } else { "the" };
    let shape = |rng: &mut ChaCha8Rng| Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = |rng: &mut ChaCha8Rng| rng.random_range(0..COLORS.len());

    if rng.random_bool(0.25) {
        let (s, c) = (shape(rng), color(rng));
        let cell = (rng.random_range(0..2), rng.random_range(0..2));
        let words = vec!["a", COLORS[c].0, s.word(), "is", "in", "the", "picture"];
        return (words, vec![Placed { shape: s, color: c, cell }]);
    }

    let (s1, c1) = (shape(rng), color(rng));
    let (mut s2, mut c2) = (shape(rng), color(rng));
    while (s1, c1) == (s2, c2) {
        s2 = shape(rng);
        c2 = color(rng);
    }
    let rel = Relation::ALL[rng.random_range(0..Relation::ALL.len())];
    let verb = if rng.random_bool(0.7) { "is" } else if rng.random_bool(0.5) { "sits" } else { "rests" };
    let (cell1, cell2) = rel.cells(rng.random_range(0..2));

    let mut words = vec![article(rng), COLORS[c1].0, s1.word(), verb];
    words.extend_from_slice(rel.words());
    words.extend([article(rng), COLORS[c2].0, s2.word()]);
    let objs = vec![
        Placed {
            shape: s1,
            color: c1,
            cell: cell1,
        },
        Placed {
            shape: s2,
            color: c2,
            cell: cell2,
        },
    ];
    (words, objs)
}

fn render(objs: &[Placed], rng: &mut ChaCha8Rng) -> Tensor {
    let n = IMAGE_SIZE as i64;
    let mut px = vec![0u8; IMAGE_SIZE * IMAGE_SIZE * CHANNELS];
    for o in objs {
        let cy = o.cell.0 * CELL + CELL / 2 + rng.random_range(-1..=1);
        let cx = o.cell.1 * CELL + CELL / 2 + rng.random_range(-1..=1);
        let rgb = COLORS[o.color].1;
        for y in 0..n {
            for x in 0..n {
                if o.shape.covers(x - cx, y - cy) {
                    let base = ((y * n + x) as usize) * CHANNELS;
                    px[base..base + CHANNELS].copy_from_slice(&rgb);
                }
            }
        }
    }
    let data = px.into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).expect("fixed image shape")
}

/// Renders one item from `(seed, id)`.
pub fn generate_item(seed: u64, id: u64, split: Split, grammar: &Grammar) -> CorpusItem {
    let mut rng = item_rng(seed, id);
    let (words, objs) = compose(&mut rng);
    let image = render(&objs, &mut rng);
    CorpusItem {
        id,
        image,
        caption: words.join(" "),
        pos_tags: words.iter().map(|w| grammar.tag_of(w)).collect(),
        split,
    }
}

/// Number of test items for `n` items at `test_ratio`.
pub fn test_count(n: usize, test_ratio: f64) -> usize {
    ((n as f64) * test_ratio.clamp(0.0, 1.0)).round() as usize
}

/// `n` items with ids `0..n`; the last `round(n·test_ratio)` ids form the
/// test split.
pub fn generate(seed: u64, n: usize, test_ratio: f64) -> Result<Vec<CorpusItem>> {
    if n == 0 {
        return Err(Error::ZeroCount);
    }
    if !(0.0..=1.0).contains(&test_ratio) {
        return Err(Error::Range(format!("test ratio {test_ratio} outside [0, 1]")));
    }
    let n_train = n - test_count(n, test_ratio);
    let grammar = Grammar::new();
    Ok((0..n as u64)
        .into_par_iter()
        .map(|id| {
            let split = if (id as usize) < n_train { Split::Train } else { Split::Test };
            generate_item(seed, id, split, &grammar)
        })
        .collect())
}

pub fn split_of(items: &[CorpusItem], split: Split) -> Vec<CorpusItem> {
    items.iter().filter(|i| i.split == split).cloned().collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ImageRef {
    Inline(String),
    Path(String),
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    caption: String,
    #[serde(default)]
    pos_tags: Option<Vec<WordClass>>,
    split: Split,
    image: ImageRef,
}

/// How images are stored when saving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageStorage {
    /// base64 FTEN payload inside each record
    Inline,
    /// separate `.ften` files in a sibling `<stem>_images/` directory
    Files,
}

fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_ften(&mut buf, t, Dtype::F64)?;
    Ok(buf)
}

/// Writes a header line followed by one JSON record per item.
pub fn save_corpus(items: &[CorpusItem], path: &Path, storage: ImageStorage) -> Result<()> {
    let image_dir = image_dir_for(path);
    if storage == ImageStorage::Files {
        std::fs::create_dir_all(&image_dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        count: items.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
    for item in items {
        let bytes = encode_image(&item.image)?;
        let image = match storage {
            ImageStorage::Inline => ImageRef::Inline(B64.encode(&bytes)),
            ImageStorage::Files => {
                let name = format!("{:06}.ften", item.id);
                std::fs::write(image_dir.join(&name), &bytes)?;
                let dir_name = image_dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                ImageRef::Path(format!("{dir_name}/{name}"))
            }
        };
        let rec = Record {
            id: item.id,
            caption: item.caption.clone(),
            pos_tags: Some(item.pos_tags.clone()),
            split: item.split,
            image,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(json_err)?)?;
    }
    w.flush()?;
    Ok(())
}

fn image_dir_for(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    path.with_file_name(format!("{stem}_images"))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// Reads a corpus file. Any structural problem yields `Error::Format` and
/// no items.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty corpus file".into()))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(Error::Format(format!("not a corpus file (format `{}`)", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {}", header.version)));
    }

    let grammar = Grammar::new();
    let mut items = Vec::with_capacity(header.count);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("record {}: {e}", lineno + 1)))?;
        let bytes = match &rec.image {
            ImageRef::Inline(b) => B64
                .decode(b)
                .map_err(|e| Error::Format(format!("record {}: {e}", rec.id)))?,
            ImageRef::Path(p) => std::fs::read(base.join(p))?,
        };
        let image = read_ften(&mut bytes.as_slice())?;
        if image.rank() != 3 || image.shape()[2] != CHANNELS {
            return Err(Error::Format(format!(
                "record {}: image shape {:?} is not H×W×3",
                rec.id,
                image.shape()
            )));
        }
        let n_words = tokenize(&rec.caption, usize::MAX)
            .map_err(|e| Error::Format(format!("record {}: {e}", rec.id)))?
            .len()
            - 1;
        let pos_tags = match rec.pos_tags {
            Some(tags) if tags.len() == n_words => tags,
            Some(tags) => {
                return Err(Error::Format(format!(
                    "record {}: {} tags for {n_words} tokens",
                    rec.id,
                    tags.len()
                )))
            }
            None => {
                log::warn!(
                    "record {}: no POS tags; defaulting to OTHER",
                    rec.id
                );
                let _ = &grammar;
                vec![WordClass::Other; n_words]
            }
        };
        items.push(CorpusItem {
            id: rec.id,
            image,
            caption: rec.caption,
            pos_tags,
            split: rec.split,
        });
    }
    if items.len() != header.count {
        return Err(Error::Format(format!(
            "header declares {} records, found {}",
            header.count,
            items.len()
        )));
    }
    Ok(items)
}
