use std::path::Path;

use super::write_atomic;
use crate::env::Observation;
use crate::error::{Error, Result};

pub const SEPARATOR: usize = 2;
const SEPARATOR_VALUE: u8 = 255;

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format { offset: pos as u64, msg: "truncated PGM header".into() });
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Format { offset: 0, msg: format!("not a binary graymap: {}", fields[0]) });
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format { offset: 3, msg: format!("bad PGM field `{s}`") });
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format { offset: 3, msg: format!("maxval {maxval} unsupported") });
        }
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != width * height {
            return Err(Error::Format { offset: pos as u64, msg: format!("expected {} pixels, found {}", width * height, body.len()) });
        }
        Ok(Self { width, height, pixels: body.to_vec() })
    }
}

/// Tiles the newest frame of each state row-major, `columns` per row, with
/// 2-pixel separators between tiles.
pub fn image_grid(states: &[Observation], columns: usize) -> Result<GrayImage> {
    let first = states.first().ok_or_else(|| Error::input("image grid needs at least one state"))?;
    if columns == 0 {
        return Err(Error::input("image grid needs at least one column"));
    }
    let [_, h, w] = first.shape();
    if let Some(s) = states.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::dim(format!("grid states differ in shape: {:?} vs {:?}", s.shape(), first.shape())));
    }
    let cols = columns.min(states.len());
    let rows = states.len().div_ceil(cols);
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut pixels = vec![SEPARATOR_VALUE; width * height];
    for (i, s) in states.iter().enumerate() {
        let (ty, tx) = ((i / cols) * (h + SEPARATOR), (i % cols) * (w + SEPARATOR));
        let frame = s.frame(0);
        for r in 0..h {
            for c in 0..w {
                pixels[(ty + r) * width + tx + c] = (frame[r * w + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn write_image_grid(states: &[Observation], columns: usize, path: &Path) -> Result<()> {
    write_atomic(path, &image_grid(states, columns)?.to_pgm())
}

/// Grayscale heat map of per-pixel weights, scaled so the maximum is white.
pub fn heatmap(weights: &[f32], width: usize) -> GrayImage {
    let max = weights.iter().cloned().fold(0.0f32, f32::max);
    let pixels = weights.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }).collect();
    GrayImage { width, height: weights.len() / width, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn state(v: f32) -> Observation {
        let data = (0..2 * 32 * 32).map(|i| if i < 1024 { (i % 7) as f32 / 7.0 * v } else { 0.3 }).collect();
        Observation::new(Tensor::new(vec![2, 32, 32], data).unwrap()).unwrap()
    }

    #[test]
    fn single_state_is_32_square() {
        let g = image_grid(&[state(1.0)], 1).unwrap();
        assert_eq!((g.width, g.height), (32, 32));
    }

    #[test]
    fn four_states_two_columns() {
        let s = state(1.0);
        let g = image_grid(&[s.clone(), s.clone(), s.clone(), s], 2).unwrap();
        assert_eq!((g.width, g.height), (66, 66));
        assert_eq!(g.pixels[32], SEPARATOR_VALUE);
    }

    #[test]
    fn pgm_round_trip_reproduces_quantized_values() {
        let s = state(0.9);
        let g = image_grid(&[s.clone(), state(0.5), s], 2).unwrap();
        let back = GrayImage::from_pgm(&g.to_pgm()).unwrap();
        assert_eq!(back, g);
        for r in 0..32 {
            for c in 0..32 {
                let v = state(0.9).frame(0)[r * 32 + c];
                assert_eq!(back.pixels[r * back.width + c], (v * 255.0).round() as u8);
            }
        }
    }

    #[test]
    fn empty_grid_is_input_error() {
        assert!(matches!(image_grid(&[], 2), Err(Error::Input(_))));
    }
}
