//! PNG import and export of [`ImageBuffer`]s.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};
use sr_distill_core::image::{ImageBuffer, CHANNELS};

use crate::error::{Result, ToolError};

/// Reads 8- or 16-bit gray, gray-alpha, RGB or RGBA. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| ToolError::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ToolError::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ToolError::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(ToolError::format(path, "unexpanded palette image")),
    };
    let sample = |i: usize| -> f32 {
        match info.bit_depth {
            BitDepth::Sixteen => u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f32 / 65535.0,
            _ => buf[i] as f32 / 255.0,
        }
    };
    let mut img = ImageBuffer::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * channels;
            for c in 0..CHANNELS {
                let src = if channels < 3 { 0 } else { c };
                img.set(c, y, x, sample(base + src));
            }
        }
    }
    Ok(img)
}

fn write(path: &Path, img: &ImageBuffer, depth: BitDepth) -> Result<()> {
    let file = File::create(path).map_err(|e| ToolError::io(path, e))?;
    let mut enc = Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    enc.set_color(ColorType::Rgb);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| ToolError::format(path, e))?;
    let (h, w) = (img.height(), img.width());
    let mut bytes = Vec::with_capacity(h * w * CHANNELS * 2);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let v = img.get(c, y, x).clamp(0.0, 1.0);
                match depth {
                    BitDepth::Sixteen => bytes.extend(((v * 65535.0).round() as u16).to_be_bytes()),
                    _ => bytes.push((v * 255.0).round() as u8),
                }
            }
        }
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| ToolError::format(path, e))?;
    writer.finish().map_err(|e| ToolError::format(path, e))
}

/// 16-bit RGB, used for datasets so the round trip error stays below 1e-5.
pub fn write_png16(path: &Path, img: &ImageBuffer) -> Result<()> {
    write(path, img, BitDepth::Sixteen)
}

/// 8-bit RGB, used for preview grids.
pub fn write_png8(path: &Path, img: &ImageBuffer) -> Result<()> {
    write(path, img, BitDepth::Eight)
}

/// Side-by-side strip of equally tall images with a 2-pixel white gutter.
/// Narrower images are nearest-neighbour scaled to the tallest height first.
pub fn hstack(images: &[&ImageBuffer]) -> ImageBuffer {
    const GUTTER: usize = 2;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let scaled: Vec<ImageBuffer> = images
        .iter()
        .map(|img| {
            if img.height() == h {
                (*img).clone()
            } else {
                nearest(img, h, img.width() * h / img.height().max(1))
            }
        })
        .collect();
    let w =
        scaled.iter().map(|i| i.width()).sum::<usize>() + GUTTER * scaled.len().saturating_sub(1);
    let mut out = ImageBuffer::filled(h, w, [1.0, 1.0, 1.0]);
    let mut x0 = 0;
    for img in &scaled {
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..img.width() {
                    out.set(c, y, x0 + x, img.get(c, y, x));
                }
            }
        }
        x0 += img.width() + GUTTER;
    }
    out
}

fn nearest(img: &ImageBuffer, h: usize, w: usize) -> ImageBuffer {
    let mut out = ImageBuffer::new(h, w);
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out.set(
                    c,
                    y,
                    x,
                    img.get(c, y * img.height() / h, x * img.width() / w),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ImageBuffer {
        let mut img = ImageBuffer::new(5, 7);
        for c in 0..CHANNELS {
            for y in 0..5 {
                for x in 0..7 {
                    img.set(c, y, x, ((c * 35 + y * 7 + x) as f32 * 0.0093) % 1.0);
                }
            }
        }
        img
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ramp();
        write_png16(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!((back.height(), back.width()), (5, 7));
        let err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err <= 0.5 / 65535.0 + 1e-7, "{err}");
    }

    #[test]
    fn png8_quantises() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        write_png8(&path, &ramp()).unwrap();
        let back = read_png(&path).unwrap();
        assert!(back
            .data()
            .iter()
            .all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-3));
    }

    #[test]
    fn hstack_layout() {
        let a = ImageBuffer::filled(4, 4, [0.0, 0.0, 0.0]);
        let b = ImageBuffer::filled(8, 8, [0.5, 0.5, 0.5]);
        let s = hstack(&[&a, &b]);
        assert_eq!((s.height(), s.width()), (8, 8 + 2 + 8));
        assert_eq!(s.get(0, 7, 7), 0.0);
        assert_eq!(s.get(0, 0, 9), 1.0);
        assert_eq!(s.get(0, 0, 10), 0.5);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            read_png(Path::new("/nonexistent/x.png")),
            Err(ToolError::Io { .. })
        ));
    }
}
