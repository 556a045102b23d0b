//! 8-bit image files: binary PPM (P6) and PNG.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{GdipError, Result};
use crate::tensor::Image;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    f64::from(v) / 255.0
}

fn to_bytes(img: &Image) -> Vec<u8> {
    img.data().iter().map(|&v| to_u8(v)).collect()
}

fn from_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Image> {
    Image::new(height, width, rgb.iter().map(|&b| from_u8(b)).collect())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_bytes(img));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |d: &str| GdipError::format("PPM", d.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    pos += 1;
    let n = width * height * 3;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?;
    from_bytes(width, height, raster)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| GdipError::format("PNG", e.to_string()))?;
        writer
            .write_image_data(&to_bytes(img))
            .map_err(|e| GdipError::format("PNG", e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let bad = |e: String| GdipError::format("PNG", e);
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(bad("unexpanded palette".into())),
    };
    from_bytes(w, h, &rgb)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a `.png` or PPM file (by extension).
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if is_png(path) {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

/// Writes PNG for `.png` paths and PPM otherwise.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = if is_png(path) {
        encode_png(img)?
    } else {
        encode_ppm(img)
    };
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize(img: &Image) -> Image {
    let data = img.data().iter().map(|&v| from_u8(to_u8(v))).collect();
    Image::new(img.height(), img.width(), data).expect("quantized values are valid")
}
