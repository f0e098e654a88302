use un2clip_autograd::{RngStream, Tensor};

use super::attrs::{AttributeRecord, Orientation, ShapeClass, GRID};
use super::caption::{caption_render, tokenize};
use crate::error::Result;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const CELL: usize = 10;
const MARGIN: usize = 1;
/// Half-extent of every shape in pixels. With one pixel of centre jitter this
/// keeps instances in neighbouring cells from touching.
const EXTENT: f64 = 3.3;
const SQUARE_HALF: f64 = 3.0;

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A rendered scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeScene {
    pub scene_id: u64,
    pub split: Split,
    pub render_seed: u64,
    pub attrs: AttributeRecord,
    /// Token ids of the full caption.
    pub caption: Vec<u32>,
    /// `[32, 32, 3]`, values in `[0, 1]`, each exactly `byte / 255`.
    pub image: Tensor<f32>,
    /// Row-major class map; 0 is background, otherwise `ShapeClass::label`.
    pub mask: Vec<u8>,
}

impl ShapeScene {
    pub fn rgb_bytes(&self) -> Vec<u8> {
        self.image
            .data()
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }
}

fn inside(shape: ShapeClass, orientation: Option<Orientation>, dx: f64, dy: f64) -> bool {
    match shape {
        ShapeClass::Circle => dx * dx + dy * dy <= EXTENT * EXTENT,
        ShapeClass::Square => dx.abs() <= SQUARE_HALF && dy.abs() <= SQUARE_HALF,
        ShapeClass::Triangle => {
            // rotate so the apex points to negative v
            let (u, v) = match orientation.unwrap_or(Orientation::Up) {
                Orientation::Up => (dx, dy),
                Orientation::Down => (dx, -dy),
                Orientation::Left => (dy, dx),
                Orientation::Right => (dy, -dx),
            };
            (-EXTENT..=EXTENT).contains(&v) && u.abs() <= (v + EXTENT) / 2.0
        }
    }
}

/// Draws the scene for `attrs`. Rendering is a pure function of
/// `(attrs, seed)`; the seed only moves each instance by up to one pixel.
pub fn render_scene(attrs: &AttributeRecord, seed: u64) -> Result<(Tensor<f32>, Vec<u8>)> {
    attrs.validate()?;
    let rng = RngStream::new(seed).split("render");
    let [r, g, b] = attrs.color.rgb();
    let rgb = [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0];
    let mut image = vec![0f32; IMAGE_SIZE * IMAGE_SIZE * CHANNELS];
    let mut mask = vec![0u8; IMAGE_SIZE * IMAGE_SIZE];
    for (i, cell) in attrs.occupied_cells().enumerate() {
        let mut jr = rng.split_index(i as u64);
        let jx = jr.below(3) as f64 - 1.0;
        let jy = jr.below(3) as f64 - 1.0;
        let cx = (MARGIN + CELL * cell.col as usize) as f64 + CELL as f64 / 2.0 + jx;
        let cy = (MARGIN + CELL * cell.row as usize) as f64 + CELL as f64 / 2.0 + jy;
        let x0 = MARGIN + CELL * cell.col as usize;
        let y0 = MARGIN + CELL * cell.row as usize;
        for y in y0..y0 + CELL {
            for x in x0..x0 + CELL {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if inside(attrs.shape_class, attrs.orientation, dx, dy) {
                    mask[y * IMAGE_SIZE + x] = attrs.shape_class.label();
                    image[(y * IMAGE_SIZE + x) * CHANNELS..][..CHANNELS].copy_from_slice(&rgb);
                }
            }
        }
    }
    const { assert!(GRID * CELL + 2 * MARGIN == IMAGE_SIZE) };
    let image = Tensor::from_vec(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], image)?;
    Ok((image, mask))
}

/// Renders a complete scene record.
pub fn make_scene(
    scene_id: u64,
    split: Split,
    attrs: AttributeRecord,
    seed: u64,
) -> Result<ShapeScene> {
    let (image, mask) = render_scene(&attrs, seed)?;
    let caption = tokenize(&caption_render(&attrs))?;
    Ok(ShapeScene {
        scene_id,
        split,
        render_seed: seed,
        attrs,
        caption,
        image,
        mask,
    })
}

/// 4-connected foreground components of a mask.
pub fn connected_components(mask: &[u8], size: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / size, p % size);
            let mut push = |q: usize| {
                if mask[q] != 0 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < size {
                push(p + 1);
            }
            if y > 0 {
                push(p - size);
            }
            if y + 1 < size {
                push(p + size);
            }
        }
    }
    count
}
