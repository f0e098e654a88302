//! Synthetic captioned shapes: attributes, caption grammar, rendering,
//! corpus files and blind-pair mining.

pub mod attrs;
pub mod caption;
pub mod generate;
pub mod mining;
pub mod render;

pub use attrs::{AttributeRecord, Cell, Color, Orientation, PatternFamily, ShapeClass, GRID};
pub use caption::{caption_render, caption_tokenize, CaptionSpec, MAX_TOKENS, VOCABULARY};
pub use generate::{generate_corpus, sample_attributes, Corpus, CorpusConfig};
pub use mining::{mine_blind_pairs, mine_with_embeddings, BlindPair, MinedPairs, MiningWarning};
pub use render::{render_scene, ShapeScene, Split, CHANNELS, IMAGE_SIZE};
