//! Binary PGM/PPM images and score-map export.

use std::path::Path;

use ucad_core::tensor::{Image, ScoreMap};

use crate::error::{PipelineError, Result};
use crate::synthetic::Mask;

/// 8-bit P5 (1 channel) or P6 (3 channels); values clamped to `[0, 1]`.
pub fn encode_image(image: &Image<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(PipelineError::Data(format!("cannot write a {c}-channel image as PNM"))),
    };
    let mut out = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push((image.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

fn header_tokens(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(PipelineError::Data("truncated PNM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

/// Parses P5/P6 with maxval 255 into `[0, 1]` planar pixels.
pub fn decode_image(bytes: &[u8]) -> Result<Image<f64>> {
    let (t, start) = header_tokens(bytes)?;
    let channels = match t[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(PipelineError::Data(format!("unsupported PNM type {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| PipelineError::Data(format!("bad PNM header field `{s}`")));
    let (w, h, max) = (parse(&t[1])?, parse(&t[2])?, parse(&t[3])?);
    if max != 255 {
        return Err(PipelineError::Data(format!("PNM maxval {max}; only 255 supported")));
    }
    let need = w * h * channels;
    let body = bytes.get(start..start + need).ok_or_else(|| PipelineError::Data("truncated PNM payload".into()))?;
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = f64::from(body[(y * w + x) * channels + c]) / 255.0;
            }
        }
    }
    Ok(Image::new(channels, h, w, data)?)
}

pub fn read_image(path: &Path) -> Result<Image<f64>> {
    decode_image(&std::fs::read(path).map_err(|e| PipelineError::io(path, e))?)
}

pub fn write_image(path: &Path, image: &Image<f64>) -> Result<()> {
    std::fs::write(path, encode_image(image)?).map_err(|e| PipelineError::io(path, e))
}

pub fn mask_image(mask: &Mask) -> Image<f64> {
    let data = mask.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    Image::new(1, mask.height, mask.width, data).expect("mask dims are positive")
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let im = read_image(path)?;
    let (h, w) = (im.height(), im.width());
    let values = (0..h * w).map(|i| im.get(0, i / w, i % w) >= 0.5).collect();
    Ok(Mask { height: h, width: w, values })
}

/// 8-bit grayscale rendering, `round(255 * score)` after clamping to `[0, 1]`.
pub fn encode_map_pgm(map: &ScoreMap<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Lossless sidecar: row-major f32 LE values.
pub fn encode_map_raw(map: &ScoreMap<f64>) -> Vec<u8> {
    map.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Writes `<stem>.pgm` and `<stem>.f32`.
pub fn export_map(dir: &Path, stem: &str, map: &ScoreMap<f64>) -> Result<()> {
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&pgm, encode_map_pgm(map)).map_err(|e| PipelineError::io(&pgm, e))?;
    let raw = dir.join(format!("{stem}.f32"));
    std::fs::write(&raw, encode_map_raw(map)).map_err(|e| PipelineError::io(&raw, e))
}
