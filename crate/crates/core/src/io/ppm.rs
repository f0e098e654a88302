use std::path::Path;

use un2clip_autograd::Tensor;

use crate::error::{CoreError, Result};

/// Binary PPM (P6, maxval 255) of an `[H, W, 3]` image with values in
/// `[0, 1]`. Channel bytes are `round(v * 255)`, halves rounded away from zero.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [h, w, 3] = image.shape()[..] else {
        return Err(CoreError::Image(format!(
            "expected [H, W, 3], got {:?}",
            image.shape()
        )));
    };
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CoreError::Image(format!("value {v} outside [0, 1]")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn export_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_ppm(image)?)
}

/// Parses a P6 file written by [`encode_ppm`].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = || CoreError::Image("malformed PPM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(pos..).ok_or_else(bad)?;
    if body.len() != w * h * 3 {
        return Err(bad());
    }
    Ok(Tensor::from_vec(
        &[h, w, 3],
        body.iter().map(|&b| b as f32 / 255.0).collect(),
    )?)
}

/// Blends a label map over an `[H, W, 3]` image; label `l` takes colour
/// `palette[l]` at opacity `alpha`.
pub fn overlay(
    image: &Tensor<f32>,
    labels: &[u8],
    palette: &[[u8; 3]],
    alpha: f32,
) -> Result<Tensor<f32>> {
    let [h, w, 3] = image.shape()[..] else {
        return Err(CoreError::Image(format!(
            "expected [H, W, 3], got {:?}",
            image.shape()
        )));
    };
    if labels.len() != h * w {
        return Err(CoreError::Image(format!(
            "{} labels for {h}x{w} pixels",
            labels.len()
        )));
    }
    let mut out = image.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        let colour = palette
            .get(l as usize)
            .ok_or_else(|| CoreError::Image(format!("label {l} has no palette entry")))?;
        for c in 0..3 {
            let v = &mut out[i * 3 + c];
            *v = ((1.0 - alpha) * *v + alpha * colour[c] as f32 / 255.0).clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::from_vec(&[h, w, 3], out)?)
}

/// Tiles equally sized images into one sheet, one inner vector per row.
pub fn sheet(rows: &[Vec<Tensor<f32>>]) -> Result<Tensor<f32>> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| CoreError::Image("empty sheet".into()))?;
    let [h, w, c] = first.shape()[..] else {
        return Err(CoreError::Image("expected [H, W, C] tiles".into()));
    };
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (sh, sw) = (rows.len() * h, cols * w);
    let mut out = vec![0f32; sh * sw * c];
    for (r, row) in rows.iter().enumerate() {
        for (k, tile) in row.iter().enumerate() {
            if tile.shape() != first.shape() {
                return Err(CoreError::Image("tiles differ in shape".into()));
            }
            for y in 0..h {
                let dst = ((r * h + y) * sw + k * w) * c;
                out[dst..dst + w * c].copy_from_slice(&tile.data()[y * w * c..(y + 1) * w * c]);
            }
        }
    }
    Ok(Tensor::from_vec(&[sh, sw, c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(v: f32) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, 3], vec![v; 3]).unwrap()
    }

    #[test]
    fn white_and_black_pixels_are_exact() {
        let mut want = b"P6\n1 1\n255\n".to_vec();
        want.extend([0xFF, 0xFF, 0xFF]);
        assert_eq!(encode_ppm(&pixel(1.0)).unwrap(), want);
        let black = encode_ppm(&pixel(0.0)).unwrap();
        assert_eq!(&black[black.len() - 3..], &[0, 0, 0]);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let b = encode_ppm(&pixel(0.5)).unwrap();
        assert_eq!(b[b.len() - 1], 128);
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(encode_ppm(&pixel(1.0001)).is_err());
        assert!(encode_ppm(&pixel(-0.1)).is_err());
        assert!(encode_ppm(&pixel(f32::NAN)).is_err());
    }

    #[test]
    fn sheet_places_tiles() {
        let a = pixel(0.0);
        let b = pixel(1.0);
        let s = sheet(&[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.data()[3..6], [1.0; 3]);
        assert_eq!(s.data()[6..9], [1.0; 3]);
    }

    #[test]
    fn overlay_blends_palette() {
        let img = pixel(0.0);
        let o = overlay(&img, &[1], &[[0, 0, 0], [255, 0, 0]], 0.5).unwrap();
        assert_eq!(o.data(), &[0.5, 0.0, 0.0]);
        assert!(overlay(&img, &[2], &[[0, 0, 0]], 0.5).is_err());
        assert!(overlay(&img, &[0, 0], &[[0, 0, 0]], 0.5).is_err());
    }
}
