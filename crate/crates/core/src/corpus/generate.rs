use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use un2clip_autograd::{RngStream, Tensor};

use super::attrs::{AttributeRecord, Cell, Color, Orientation, PatternFamily, ShapeClass, GRID};
use super::caption::{vocab_hash, MAX_TOKENS};
use super::render::{make_scene, ShapeScene, Split, CHANNELS, IMAGE_SIZE};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"UN2SHAPE";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_SIZE: usize = 8 + 4 + 4 + 8 + 3 * 8 + 8 + 32 + 32;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const CAPTION_SLOTS: usize = MAX_TOKENS - 1;
pub const RECORD_SIZE: usize = 8 + 1 + 8 + 7 + 1 + CAPTION_SLOTS + PIXELS * CHANNELS + PIXELS;
const NO_ORIENTATION: u8 = 255;

/// Requested corpus size, splits and attribute marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub size: usize,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    pub shape_weights: [f64; 3],
    pub color_weights: [f64; 6],
    pub count_weights: [f64; 3],
    /// Absolute frequency of each orientation over the whole corpus; must sum
    /// to the triangle frequency.
    pub orientation_weights: [f64; 4],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 4000,
            split: [0.8, 0.1, 0.1],
            shape_weights: [1.0 / 3.0; 3],
            color_weights: [1.0 / 6.0; 6],
            count_weights: [1.0 / 3.0; 3],
            orientation_weights: [1.0 / 12.0; 4],
        }
    }
}

fn check_distribution(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CoreError::Config(format!(
            "{name}: negative or non-finite weight"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(CoreError::Config(format!(
            "{name}: weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(CoreError::Config("corpus size must be positive".into()));
        }
        check_distribution("split", &self.split)?;
        check_distribution("shape_weights", &self.shape_weights)?;
        check_distribution("color_weights", &self.color_weights)?;
        check_distribution("count_weights", &self.count_weights)?;
        if self
            .orientation_weights
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(CoreError::Config(
                "orientation_weights: negative weight".into(),
            ));
        }
        let oriented: f64 = self.orientation_weights.iter().sum();
        let triangles = self.shape_weights[ShapeClass::Triangle.index()];
        if (oriented - triangles).abs() > 1e-6 {
            return Err(CoreError::UnreachableMarginals(format!(
                "orientation frequencies sum to {oriented:.4} but triangles make up {triangles:.4} of the corpus"
            )));
        }
        Ok(())
    }

    /// Scenes per split; the test split absorbs rounding.
    pub fn split_counts(&self) -> [usize; 3] {
        let train = (self.size as f64 * self.split[0]).round() as usize;
        let val = ((self.size as f64 * self.split[1]).round() as usize).min(self.size - train);
        [train, val, self.size - train - val]
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&json).into()
    }
}

/// Draws one attribute record.
pub fn sample_attributes(config: &CorpusConfig, rng: &mut RngStream) -> AttributeRecord {
    let shape_class = ShapeClass::ALL[rng.categorical(&config.shape_weights)];
    let color = Color::ALL[rng.categorical(&config.color_weights)];
    let count = rng.categorical(&config.count_weights) as u8 + 1;
    let row = rng.below(GRID) as u8;
    let col = rng.below(GRID + 1 - count as usize) as u8;
    let orientation = (shape_class == ShapeClass::Triangle)
        .then(|| Orientation::ALL[rng.categorical(&config.orientation_weights)]);
    let families: Vec<PatternFamily> = PatternFamily::ALL
        .iter()
        .copied()
        .filter(|f| *f != PatternFamily::Orientation || orientation.is_some())
        .collect();
    let pattern_family = families[rng.below(families.len())];
    AttributeRecord {
        shape_class,
        color,
        count,
        cell: Cell::new(row, col),
        orientation,
        pattern_family,
    }
}

/// Scenes sorted by id plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub scenes: Vec<ShapeScene>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&ShapeScene> {
        self.scenes.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.scenes {
            c[s.split.index()] += 1;
        }
        c
    }

    pub fn get(&self, scene_id: u64) -> Option<&ShapeScene> {
        self.scenes
            .binary_search_by_key(&scene_id, |s| s.scene_id)
            .ok()
            .map(|i| &self.scenes[i])
    }

    /// SHA-256 of the encoded corpus file.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_SIZE + self.scenes.len() * RECORD_SIZE);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(RECORD_SIZE as u32).to_le_bytes());
        out.extend_from_slice(&(self.scenes.len() as u64).to_le_bytes());
        for c in self.split_counts() {
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&vocab_hash());
        out.extend_from_slice(&self.config_hash);
        for s in &self.scenes {
            encode_record(s, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CoreError::CorpusFormat(m.to_string());
        if bytes.len() < HEADER_SIZE || &bytes[..8] != MAGIC {
            return Err(bad("not a shapes corpus (bad magic)"));
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32();
        if version != CORPUS_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        if r.u32() as usize != RECORD_SIZE {
            return Err(bad("record size mismatch"));
        }
        let n = r.u64() as usize;
        let counts = [r.u64() as usize, r.u64() as usize, r.u64() as usize];
        let seed = r.u64();
        if r.take(32) != vocab_hash() {
            return Err(bad("vocabulary hash mismatch"));
        }
        let config_hash: [u8; 32] = r.take(32).try_into().expect("32 bytes");
        if bytes.len() != HEADER_SIZE + n * RECORD_SIZE {
            return Err(bad("file length does not match scene count"));
        }
        let scenes = (0..n)
            .map(|i| decode_record(&bytes[HEADER_SIZE + i * RECORD_SIZE..][..RECORD_SIZE]))
            .collect::<Result<Vec<_>>>()?;
        let corpus = Corpus {
            seed,
            config_hash,
            scenes,
        };
        if corpus.split_counts() != counts {
            return Err(bad("split counts disagree with records"));
        }
        if corpus
            .scenes
            .windows(2)
            .any(|w| w[0].scene_id >= w[1].scene_id)
        {
            return Err(bad("records not sorted by unique scene id"));
        }
        Ok(corpus)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

fn encode_record(s: &ShapeScene, out: &mut Vec<u8>) {
    let a = &s.attrs;
    out.extend_from_slice(&s.scene_id.to_le_bytes());
    out.push(s.split.index() as u8);
    out.extend_from_slice(&s.render_seed.to_le_bytes());
    out.extend_from_slice(&[
        a.shape_class.index() as u8,
        a.color.index() as u8,
        a.count,
        a.cell.row,
        a.cell.col,
        a.orientation.map_or(NO_ORIENTATION, |o| o.index() as u8),
        a.pattern_family.index() as u8,
    ]);
    out.push(s.caption.len() as u8);
    let mut slots = [0u8; CAPTION_SLOTS];
    for (d, &id) in slots.iter_mut().zip(&s.caption) {
        *d = id as u8;
    }
    out.extend_from_slice(&slots);
    out.extend_from_slice(&s.rgb_bytes());
    out.extend_from_slice(&s.mask);
}

fn decode_record(bytes: &[u8]) -> Result<ShapeScene> {
    let bad = |m: &str| CoreError::CorpusFormat(m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    let scene_id = r.u64();
    let split = *Split::ALL
        .get(r.u8() as usize)
        .ok_or_else(|| bad("bad split"))?;
    let render_seed = r.u64();
    let shape_class = ShapeClass::from_index(r.u8() as usize).ok_or_else(|| bad("bad shape"))?;
    let color = Color::from_index(r.u8() as usize).ok_or_else(|| bad("bad color"))?;
    let count = r.u8();
    let cell = Cell::new(r.u8(), r.u8());
    let orientation = match r.u8() {
        NO_ORIENTATION => None,
        o => Some(Orientation::from_index(o as usize).ok_or_else(|| bad("bad orientation"))?),
    };
    let pattern_family =
        PatternFamily::from_index(r.u8() as usize).ok_or_else(|| bad("bad family"))?;
    let attrs = AttributeRecord {
        shape_class,
        color,
        count,
        cell,
        orientation,
        pattern_family,
    };
    attrs.validate()?;
    let len = r.u8() as usize;
    if len > CAPTION_SLOTS {
        return Err(bad("caption too long"));
    }
    let caption = r.take(CAPTION_SLOTS)[..len]
        .iter()
        .map(|&b| b as u32)
        .collect();
    let image: Vec<f32> = r
        .take(PIXELS * CHANNELS)
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let mask = r.take(PIXELS).to_vec();
    Ok(ShapeScene {
        scene_id,
        split,
        render_seed,
        attrs,
        caption,
        image: Tensor::from_vec(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], image)?,
        mask,
    })
}

/// Generates the corpus; a pure function of `(config, seed)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let root = RngStream::new(seed).split("corpus");
    let counts = config.split_counts();
    let mut order: Vec<usize> = (0..config.size).collect();
    root.split("split").shuffle(&mut order);
    let mut splits = vec![Split::Train; config.size];
    for (rank, &id) in order.iter().enumerate() {
        splits[id] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let scene_root = root.split("scene");
    let scenes = (0..config.size)
        .into_par_iter()
        .map(|id| {
            let mut rng = scene_root.split_index(id as u64);
            let attrs = sample_attributes(config, &mut rng);
            let render_seed = rng.next_seed();
            make_scene(id as u64, splits[id], attrs, render_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        seed,
        config_hash: config.hash(),
        scenes,
    })
}
