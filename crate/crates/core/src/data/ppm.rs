//! Binary PPM (P6, maxval 255) encoding for `[3, H, W]` images in `[0, 1]`.

use crate::error::{LlipError, Result};
use crate::numerics::Tensor;

/// Quantizes a `[3, H, W]` image to 8-bit RGB and encodes it as P6.
pub fn write_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(LlipError::Dimension(format!("PPM needs [3, H, W], got {:?}", s))),
    };
    let rgb: Vec<u8> = interleave(image.data(), h, w)
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(encode_rgb(&rgb, w, h))
}

fn interleave(planar: &[f32], h: usize, w: usize) -> impl Iterator<Item = f32> + '_ {
    (0..h * w).flat_map(move |p| (0..3).map(move |c| planar[c * h * w + p]))
}

/// Encodes interleaved 8-bit RGB.
pub fn encode_rgb(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(rgb);
    out
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(LlipError::Format("malformed PPM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| LlipError::Format("malformed PPM header number".into()))
}

/// Decodes P6 into `(width, height, interleaved rgb)`.
pub fn decode_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(LlipError::Format("missing P6 magic".into()));
    }
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(LlipError::Format(format!("unsupported maxval {}", maxval)));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(LlipError::Format("missing separator after PPM header".into()));
    }
    pos += 1;
    let need = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() != need {
        return Err(LlipError::Format(format!(
            "PPM payload has {} bytes, expected {}",
            payload.len(),
            need
        )));
    }
    Ok((w, h, payload.to_vec()))
}

/// Decodes P6 into a `[3, H, W]` image in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, rgb) = decode_rgb(bytes)?;
    Ok(rgb_to_planar(&rgb, w, h))
}

pub fn rgb_to_planar(rgb: &[u8], w: usize, h: usize) -> Tensor<f32> {
    let mut data = vec![0f32; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            data[c * w * h + p] = f32::from(rgb[p * 3 + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("planar shape")
}
