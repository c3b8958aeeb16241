//! PNG/JPEG boundary: 8-bit files on one side, canonical floats on the other.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage, RgbaImage};

use super::{Image, Mask, Sketch, CHANNELS};
use crate::error::{shape_err, Error, Result};

/// Maps a byte to `2·(v/255) − 1`.
pub fn u8_to_unit(v: u8) -> f32 {
    (2.0 * (v as f64 / 255.0) - 1.0) as f32
}

/// Inverse of [`u8_to_unit`], rounded to the nearest byte.
pub fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_dynamic(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::Format(format!("cannot decode image: {e}")))
}

fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let dynamic = decode_dynamic(bytes)?;
    match dynamic {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageRgba8(_) => Ok(dynamic.to_rgb8()),
        other => Err(Error::Format(format!(
            "expected 8-bit RGB, got {:?}",
            other.color()
        ))),
    }
}

/// Decodes 8-bit RGB(A) PNG/JPEG bytes and resizes to `size × size`.
///
/// Resizing happens on the bytes (bilinear) so loaded values stay on the
/// 8-bit grid. An alpha channel, if present, is ignored.
pub fn decode_image(bytes: &[u8], size: usize) -> Result<Image> {
    let rgb = decode_rgb(bytes)?;
    let rgb = if rgb.dimensions() != (size as u32, size as u32) {
        imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    Ok(rgb_to_image(&rgb))
}

/// Decodes 8-bit RGB(A) bytes at their own size.
pub fn decode_image_native(bytes: &[u8]) -> Result<Image> {
    Ok(rgb_to_image(&decode_rgb(bytes)?))
}

fn rgb_to_image(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Image::from_fn(h, w, |c, y, x| u8_to_unit(rgb.get_pixel(x as u32, y as u32)[c]))
}

fn image_to_rgb(img: &Image) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| unit_to_u8(img.get(c, y as usize, x as usize));
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    decode_image(&read(path)?, size)
}

fn png_bytes(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    png_bytes(&DynamicImage::ImageRgb8(image_to_rgb(img)))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    write(path, &encode_png(img)?)
}

/// Decodes any raster as 8-bit grayscale (colour inputs are converted to luma).
pub fn gray_from_png(bytes: &[u8]) -> Result<GrayImage> {
    Ok(decode_dynamic(bytes)?.to_luma8())
}

/// Thresholds a grayscale bitmap: `≥ 128` is known, below is the hole.
pub fn decode_mask(bitmap: &GrayImage, expected: (usize, usize)) -> Result<Mask> {
    let (w, h) = bitmap.dimensions();
    if (h as usize, w as usize) != expected {
        return Err(shape_err!(
            "mask is {h}x{w}, expected {}x{}",
            expected.0,
            expected.1
        ));
    }
    let data = bitmap.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
    Mask::new(h as usize, w as usize, data)
}

/// Loads a mask file and checks it against `expected` (height, width).
pub fn load_mask(path: &Path, expected: (usize, usize)) -> Result<Mask> {
    decode_mask(&gray_from_png(&read(path)?)?, expected)
}

/// Writes the mask as a 0/255 grayscale PNG.
pub fn encode_mask_png(m: &Mask) -> Result<Vec<u8>> {
    let gray = GrayImage::from_raw(
        m.width() as u32,
        m.height() as u32,
        m.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("mask buffer size");
    png_bytes(&DynamicImage::ImageLuma8(gray))
}

pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    write(path, &encode_mask_png(m)?)
}

/// Decodes an RGBA sketch layer; alpha becomes stroke opacity.
pub fn decode_sketch(bytes: &[u8], expected: (usize, usize)) -> Result<Sketch> {
    let rgba: RgbaImage = decode_dynamic(bytes)?.to_rgba8();
    let (w, h) = rgba.dimensions();
    if (h as usize, w as usize) != expected {
        return Err(shape_err!(
            "sketch is {h}x{w}, expected {}x{}",
            expected.0,
            expected.1
        ));
    }
    let color = Image::from_fn(h as usize, w as usize, |c, y, x| {
        u8_to_unit(rgba.get_pixel(x as u32, y as u32)[c])
    });
    let alpha = rgba.pixels().map(|p| p[CHANNELS] as f32 / 255.0).collect();
    Sketch::new(color, alpha)
}

pub fn load_sketch(path: &Path, expected: (usize, usize)) -> Result<Sketch> {
    decode_sketch(&read(path)?, expected)
}

/// RGBA PNG of a sketch; inverse of [`decode_sketch`] on 8-bit sketches.
pub fn encode_sketch_png(s: &Sketch) -> Result<Vec<u8>> {
    let color = s.color();
    let (h, w) = (color.height(), color.width());
    let rgba = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let a = (s.alpha()[y * w + x] * 255.0).round() as u8;
        image::Rgba([
            unit_to_u8(color.get(0, y, x)),
            unit_to_u8(color.get(1, y, x)),
            unit_to_u8(color.get(2, y, x)),
            a,
        ])
    });
    let mut out = Vec::new();
    rgba.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::Format(format!("cannot encode sketch: {e}")))?;
    Ok(out)
}

pub fn save_sketch(s: &Sketch, path: &Path) -> Result<()> {
    write(path, &encode_sketch_png(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints_and_midpoint() {
        assert_eq!(u8_to_unit(255), 1.0);
        assert_eq!(u8_to_unit(0), -1.0);
        let want = 2.0 * (128.0 / 255.0) - 1.0;
        assert!((u8_to_unit(128) as f64 - want).abs() < 1e-7);
        assert!((u8_to_unit(128) - 0.00392).abs() < 1e-5);
        assert_eq!(unit_to_u8(1.0), 255);
        assert_eq!(unit_to_u8(-1.0), 0);
        for v in 0..=255u8 {
            assert_eq!(unit_to_u8(u8_to_unit(v)), v);
        }
    }

    #[test]
    fn save_load_round_trip_is_within_one_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_fn(9, 9, |c, y, x| ((c * 31 + y * 7 + x * 3) % 200) as f32 / 100.0 - 1.0);
        save_image(&img, &path).unwrap();
        let back = load_image(&path, 9).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 2.0 / 255.0 + 1e-6);
        }
        // a second trip is exact: values are already on the byte grid
        save_image(&back, &path).unwrap();
        assert_eq!(load_image(&path, 9).unwrap(), back);
    }

    #[test]
    fn load_resizes_and_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        save_image(&Image::filled(20, 20, [0.0; 3]), &path).unwrap();
        assert_eq!(load_image(&path, 8).unwrap().height(), 8);
        assert!(matches!(load_image(&dir.path().join("missing.png"), 8), Err(Error::Io { .. })));
        let gray = dir.path().join("gray.png");
        GrayImage::new(4, 4).save(&gray).unwrap();
        assert!(matches!(load_image(&gray, 4), Err(Error::Format(_))));
    }

    #[test]
    fn mask_threshold_and_round_trip() {
        let bitmap = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        let m = decode_mask(&bitmap, (1, 4)).unwrap();
        assert_eq!(m.data(), &[0, 0, 1, 1]);
        assert!(matches!(decode_mask(&bitmap, (4, 1)), Err(Error::Shape(_))));
        assert_eq!(decode_mask(&GrayImage::from_pixel(3, 3, image::Luma([255])), (3, 3)).unwrap(), Mask::ones(3, 3));
        assert_eq!(decode_mask(&GrayImage::new(3, 3), (3, 3)).unwrap(), Mask::zeros(3, 3));

        let m = Mask::from_fn(7, 5, |y, x| (y * 3 + x) % 4 != 0);
        let png = encode_mask_png(&m).unwrap();
        assert_eq!(decode_mask(&gray_from_png(&png).unwrap(), (7, 5)).unwrap(), m);
    }

    #[test]
    fn sketch_alpha_comes_from_png_alpha() {
        let mut rgba = RgbaImage::new(2, 1);
        rgba.put_pixel(0, 0, image::Rgba([255, 0, 0, 255]));
        rgba.put_pixel(1, 0, image::Rgba([0, 0, 0, 0]));
        let bytes = png_bytes(&DynamicImage::ImageRgba8(rgba)).unwrap();
        let s = decode_sketch(&bytes, (1, 2)).unwrap();
        assert_eq!(s.alpha(), &[1.0, 0.0]);
        assert_eq!(s.color().get(0, 0, 0), 1.0);
    }

    #[test]
    fn sketch_png_round_trip() {
        let mut rgba = RgbaImage::new(3, 2);
        for (i, p) in rgba.pixels_mut().enumerate() {
            *p = image::Rgba([i as u8 * 40, 200 - i as u8 * 30, 7, i as u8 * 50]);
        }
        let bytes = png_bytes(&DynamicImage::ImageRgba8(rgba)).unwrap();
        let s = decode_sketch(&bytes, (2, 3)).unwrap();
        let again = decode_sketch(&encode_sketch_png(&s).unwrap(), (2, 3)).unwrap();
        assert_eq!(again, s);
    }
}
