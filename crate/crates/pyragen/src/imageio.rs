//! PNG encoding and decoding for images and region masks.

use std::path::Path;

use pyragen_core::image::{Image, RegionMask};

use crate::error::{io_err, Error, Result};

/// Region-mask pixels above this value mark pixels to regenerate.
pub const REGION_THRESHOLD: u8 = 127;

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Decode any 8/16-bit PNG into an RGB image in `[-1, 1]`. Alpha is dropped
/// and gray is replicated.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let d = decode(bytes)?;
    let mut rgb = Vec::with_capacity(d.width * d.height * 3);
    for px in d.data.chunks(d.channels) {
        match d.channels {
            1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    Ok(Image::from_rgb8(d.width, d.height, &rgb)?)
}

fn encode_raw(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// 8-bit RGB PNG. Deterministic: equal images give equal bytes.
pub fn encode_image(image: &Image) -> Result<Vec<u8>> {
    encode_raw(
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        &image.to_rgb8(),
    )
}

/// Decode a mask PNG; the first channel above [`REGION_THRESHOLD`] marks a
/// regenerate pixel.
pub fn decode_region(bytes: &[u8]) -> Result<RegionMask> {
    let d = decode(bytes)?;
    let pixels = d
        .data
        .chunks(d.channels)
        .map(|px| px[0] > REGION_THRESHOLD)
        .collect();
    Ok(RegionMask::from_pixels(d.width, d.height, pixels)?)
}

/// Single-channel PNG with 255 for regenerate pixels and 0 elsewhere.
pub fn encode_region(region: &RegionMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = region
        .pixels()
        .iter()
        .map(|&p| if p { 255 } else { 0 })
        .collect();
    encode_raw(
        region.width(),
        region.height(),
        png::ColorType::Grayscale,
        &data,
    )
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_image(&bytes).map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_image(image)?).map_err(io_err(path))
}

pub fn read_region(path: &Path) -> Result<RegionMask> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_region(&bytes).map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_the_8bit_grid() {
        let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let im = Image::from_rgb8(4, 3, &rgb).unwrap();
        let back = decode_image(&encode_image(&im).unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), rgb);
        assert_eq!(encode_image(&im).unwrap(), encode_image(&back).unwrap());
    }

    #[test]
    fn region_threshold() {
        let data = [0u8, 127, 128, 255];
        let bytes = encode_raw(2, 2, png::ColorType::Grayscale, &data).unwrap();
        let r = decode_region(&bytes).unwrap();
        assert_eq!(r.pixels(), &[false, false, true, true]);
        assert_eq!(decode_region(&encode_region(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn garbage_is_a_png_error() {
        assert!(matches!(decode_image(b"not a png"), Err(Error::Png(_))));
    }
}
