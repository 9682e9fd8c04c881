use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Per-channel normalisation applied to every image.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::load(path, e))?;
    Ok(img.to_rgb8())
}

/// Bilinear resize then normalise to a [3, size, size] f32 tensor.
pub fn image_to_tensor(img: &RgbImage, size: usize) -> Result<Tensor> {
    let s = size as u32;
    let resized = if img.dimensions() == (s, s) {
        img.clone()
    } else {
        image::imageops::resize(img, s, s, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, size, size), &Device::Cpu)?)
}

/// Raw 8-bit sample values of a PNG without palette expansion, so indexed
/// annotation files yield their label indices.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::load(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::load(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::load(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        out.extend((0..w).map(|x| row[x * channels]));
    }
    Ok((h, w, out))
}

/// Binary mask file: any nonzero first-channel value is foreground.
pub fn read_mask_file(path: &Path) -> Result<BinaryMask> {
    let (h, w, data) = read_label_png(path)?;
    BinaryMask::from_vec(h, w, data)
}

/// Write a mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let img = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.to_gray_bytes(),
    )
    .ok_or_else(|| Error::Data("mask buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::load(path, e))
}
