//! Closed caption grammar:
//!
//! ```text
//! caption := [COUNT] [COLOR] NOUN ["pointing" DIR] ["in" "the" ROW COL]
//! ```
//!
//! The noun is plural exactly when the count word is "two" or "three".

use sha2::{Digest, Sha256};

use super::attrs::{AttributeRecord, Cell, Color, Orientation, ShapeClass};
use crate::error::{CoreError, Result};

pub const VOCAB_VERSION: u32 = 1;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;

/// Token sequence length fed to the text encoder, including the class token.
pub const MAX_TOKENS: usize = 12;

pub const VOCABULARY: &[&str] = &[
    "<pad>",
    "<cls>",
    "one",
    "two",
    "three",
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "cyan",
    "circle",
    "square",
    "triangle",
    "circles",
    "squares",
    "triangles",
    "pointing",
    "up",
    "down",
    "left",
    "right",
    "in",
    "the",
    "top",
    "middle",
    "bottom",
    "center",
];

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];
const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
const COL_WORDS: [&str; 3] = ["left", "center", "right"];

pub fn vocab_size() -> usize {
    VOCABULARY.len()
}

/// SHA-256 of the versioned vocabulary; stored in corpus headers.
pub fn vocab_hash() -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(VOCAB_VERSION.to_le_bytes());
    for w in VOCABULARY {
        h.update(w.as_bytes());
        h.update([0]);
    }
    h.finalize().into()
}

/// What a caption says. Only the shape is mandatory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CaptionSpec {
    pub shape: ShapeClass,
    pub count: Option<u8>,
    pub color: Option<Color>,
    pub orientation: Option<Orientation>,
    pub cell: Option<Cell>,
}

impl CaptionSpec {
    /// Everything the record exposes visually.
    pub fn full(a: &AttributeRecord) -> Self {
        Self {
            shape: a.shape_class,
            count: Some(a.count),
            color: Some(a.color),
            orientation: a.orientation,
            cell: Some(a.cell),
        }
    }

    pub fn shape_only(shape: ShapeClass) -> Self {
        Self {
            shape,
            count: None,
            color: None,
            orientation: None,
            cell: None,
        }
    }

    pub fn render(&self) -> String {
        let mut words: Vec<&str> = Vec::new();
        if let Some(c) = self.count {
            words.push(COUNT_WORDS[c as usize - 1]);
        }
        if let Some(c) = self.color {
            words.push(c.word());
        }
        let plural = matches!(self.count, Some(n) if n > 1);
        words.push(if plural {
            self.shape.plural()
        } else {
            self.shape.word()
        });
        if let Some(o) = self.orientation {
            words.push("pointing");
            words.push(o.word());
        }
        if let Some(cell) = self.cell {
            words.extend(["in", "the", cell.row_word(), cell.col_word()]);
        }
        words.join(" ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        check_vocabulary(&words)?;
        let bad = |why: &str| CoreError::Grammar(format!("{why} in {text:?}"));
        let mut i = 0;
        let count = COUNT_WORDS
            .iter()
            .position(|w| Some(w) == words.first())
            .map(|p| {
                i += 1;
                p as u8 + 1
            });
        let color = words.get(i).and_then(|w| Color::from_word(w));
        if color.is_some() {
            i += 1;
        }
        let noun = words.get(i).ok_or_else(|| bad("missing noun"))?;
        let (shape, plural) = ShapeClass::ALL
            .iter()
            .find_map(|&s| {
                if *noun == s.word() {
                    Some((s, false))
                } else if *noun == s.plural() {
                    Some((s, true))
                } else {
                    None
                }
            })
            .ok_or_else(|| bad("expected a shape noun"))?;
        if plural != matches!(count, Some(n) if n > 1) {
            return Err(bad("noun number disagrees with count"));
        }
        i += 1;
        let mut orientation = None;
        if words.get(i) == Some(&"pointing") {
            let w = words.get(i + 1).ok_or_else(|| bad("missing direction"))?;
            orientation = Some(Orientation::from_word(w).ok_or_else(|| bad("bad direction"))?);
            i += 2;
        }
        let mut cell = None;
        if words.get(i) == Some(&"in") {
            if words.get(i + 1) != Some(&"the") || words.len() < i + 4 {
                return Err(bad("malformed position phrase"));
            }
            let row = ROW_WORDS.iter().position(|w| *w == words[i + 2]);
            let col = COL_WORDS.iter().position(|w| *w == words[i + 3]);
            let (Some(r), Some(c)) = (row, col) else {
                return Err(bad("bad position words"));
            };
            cell = Some(Cell::new(r as u8, c as u8));
            i += 4;
        }
        if i != words.len() {
            return Err(bad("trailing words"));
        }
        Ok(Self {
            shape,
            count,
            color,
            orientation,
            cell,
        })
    }
}

fn check_vocabulary(words: &[&str]) -> Result<()> {
    if words.is_empty() {
        return Err(CoreError::Grammar("empty caption".into()));
    }
    let oov: Vec<&str> = words
        .iter()
        .copied()
        .filter(|w| !VOCABULARY[2..].contains(w))
        .collect();
    if !oov.is_empty() {
        return Err(CoreError::OutOfVocabulary(oov.join(", ")));
    }
    Ok(())
}

/// Word ids of a caption (no class token, no padding).
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    check_vocabulary(&words)?;
    Ok(words
        .iter()
        .map(|w| VOCABULARY.iter().position(|v| v == w).expect("checked") as u32)
        .collect())
}

pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        match VOCABULARY.get(id as usize) {
            Some(w) if id != PAD && id != CLS => words.push(*w),
            _ => return Err(CoreError::OutOfVocabulary(format!("token id {id}"))),
        }
    }
    Ok(words.join(" "))
}

/// Fixed-length model input: class token, word ids, padding.
pub fn model_input(ids: &[u32]) -> Result<Vec<usize>> {
    if ids.is_empty() || ids.len() + 1 > MAX_TOKENS {
        return Err(CoreError::Grammar(format!(
            "caption of {} tokens does not fit {MAX_TOKENS}",
            ids.len()
        )));
    }
    if let Some(bad) = ids
        .iter()
        .find(|&&i| i as usize >= VOCABULARY.len() || i <= CLS)
    {
        return Err(CoreError::OutOfVocabulary(format!("token id {bad}")));
    }
    let mut out = Vec::with_capacity(MAX_TOKENS);
    out.push(CLS as usize);
    out.extend(ids.iter().map(|&i| i as usize));
    out.resize(MAX_TOKENS, PAD as usize);
    Ok(out)
}

pub fn caption_render(a: &AttributeRecord) -> String {
    CaptionSpec::full(a).render()
}

pub fn caption_tokenize(text: &str) -> Result<Vec<u32>> {
    CaptionSpec::parse(text)?;
    tokenize(text)
}
