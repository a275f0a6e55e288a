//! PNG (8/16-bit) and binary PNM images as `C×H×W` float tensors in [0, 1].

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn codec_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Codec { path: path.to_path_buf(), msg: msg.into() }
}

/// Round-half-up quantisation to 8 bits, clamping out-of-range values.
pub fn quantize8(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn quantize16(v: f32) -> u16 {
    (v as f64 * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Reads a PNG, PPM (P6) or PGM (P5) by content. Grey images are replicated
/// to three channels; alpha is dropped.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| codec_err(path, e.to_string()))?;
    decode_image(&bytes, path)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(bytes, path)
    } else {
        Err(codec_err(path, "unrecognised image signature"))
    }
}

fn to_rgb(samples: Vec<f32>, channels: usize, color: usize, w: usize, h: usize) -> Tensor<f32> {
    // interleaved HWC with `channels` samples per pixel, of which `color` carry colour
    let hw = w * h;
    let mut out = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            let src = if color == 1 { 0 } else { c };
            out[c * hw + p] = samples[p * channels + src];
        }
    }
    Tensor::new(vec![3, h, w], out).expect("sized above")
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| codec_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| codec_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| codec_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, color) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(codec_err(path, "palette was not expanded")),
    };
    let n = w * h * channels;
    let samples: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(codec_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(to_rgb(samples, channels, color, w, h))
}

struct PnmHeader {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(codec_err(path, "not a binary PNM")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(codec_err(path, "truncated PNM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| codec_err(path, "malformed PNM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(codec_err(path, "malformed PNM header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 || width == 0 || height == 0 {
        return Err(codec_err(path, format!("invalid PNM dimensions or maxval {maxval}")));
    }
    Ok(PnmHeader { channels, width, height, maxval, data_offset: pos + 1 })
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let hdr = parse_pnm_header(bytes, path)?;
    let wide = hdr.maxval > 255;
    let n = hdr.width * hdr.height * hdr.channels;
    let need = n * if wide { 2 } else { 1 };
    let payload = bytes
        .get(hdr.data_offset..hdr.data_offset + need)
        .ok_or_else(|| codec_err(path, "truncated PNM payload"))?;
    let scale = hdr.maxval as f32;
    let samples: Vec<f32> = if wide {
        payload.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale).collect()
    } else {
        payload.iter().map(|&b| b as f32 / scale).collect()
    };
    Ok(to_rgb(samples, hdr.channels, hdr.channels, hdr.width, hdr.height))
}

fn interleave(img: &Tensor<f32>, path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let (c, h, w) = img.dims3().map_err(|e| codec_err(path, e.to_string()))?;
    if c != 1 && c != 3 {
        return Err(codec_err(path, format!("cannot encode {c} channels")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(c * hw);
    for p in 0..hw {
        for ch in 0..c {
            out.push(img.data()[ch * hw + p]);
        }
    }
    Ok((c, h, w, out))
}

pub fn encode_png(img: &Tensor<f32>, depth: BitDepth, path: &Path) -> Result<Vec<u8>> {
    let (c, h, w, samples) = interleave(img, path)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        let data: Vec<u8> = match depth {
            BitDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                samples.iter().map(|&v| quantize8(v)).collect()
            }
            BitDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                samples.iter().flat_map(|&v| quantize16(v).to_be_bytes()).collect()
            }
        };
        let mut writer = enc.write_header().map_err(|e| codec_err(path, e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| codec_err(path, e.to_string()))?;
        writer.finish().map_err(|e| codec_err(path, e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_pnm(img: &Tensor<f32>, path: &Path) -> Result<Vec<u8>> {
    let (c, h, w, samples) = interleave(img, path)?;
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(samples.iter().map(|&v| quantize8(v)));
    Ok(out)
}

/// Writes by extension: `.ppm`/`.pgm`/`.pnm` as binary PNM, anything else as 8-bit PNG.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("ppm" | "pgm" | "pnm") => encode_pnm(img, path)?,
        _ => encode_png(img, BitDepth::Eight, path)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_png16(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let bytes = encode_png(img, BitDepth::Sixteen, path)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Preview of an arbitrary map: min-max normalised into [0, 1].
pub fn normalize_for_preview(map: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return map.map(|_| 0.0);
    }
    map.map(|v| (v - lo) / span)
}
