//! Binary PPM (P6) images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes row-major RGB values in `[0, 1]`.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape(format!("{} values for a {width}x{height} image", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Grey image from one value per pixel.
pub fn encode_gray_ppm(width: usize, height: usize, v: &[f64]) -> Result<Vec<u8>> {
    let rgb: Vec<f64> = v.iter().flat_map(|&x| [x, x, x]).collect();
    encode_ppm(width, height, &rgb)
}

fn next_token<'a>(data: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&data[start..*pos])
}

/// Decodes a P6 image into `(width, height, rgb in [0, 1])`.
pub fn decode_ppm(data: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    if next_token(data, &mut pos)? != b"P6" {
        return Err(Error::Format("not a binary PPM".into()));
    }
    let mut num = || -> Result<usize> {
        let t = next_token(data, &mut pos)?;
        std::str::from_utf8(t).ok().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format("bad PPM header number".into()))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {max}")));
    }
    let body = &data[pos + 1..];
    if body.len() < 3 * w * h {
        return Err(Error::Format("truncated PPM body".into()));
    }
    Ok((w, h, body[..3 * w * h].iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let bytes = encode_ppm(width, height, rgb)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_ppm(&std::fs::read(path)?)
}

/// Reads a mask image, taking the red channel.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, rgb) = read_ppm(path)?;
    Ok((w, h, rgb.chunks(3).map(|c| c[0]).collect()))
}

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
