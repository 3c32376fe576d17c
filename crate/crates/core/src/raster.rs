//! Raster I/O (PNG) and conversion between rasters and model tensors.
//!
//! Model tensors are NCHW in the signed range `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::colorspace::{ColorSpace, ImagePlane, ImageStack, ValueRange};
use crate::error::{Error, Result};

fn stack_from_dynamic(img: DynamicImage) -> Result<ImageStack> {
    let rgb = img.into_rgb32f();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| (v as f64).clamp(0.0, 1.0))
        .collect();
    ImageStack::srgb(h as usize, w as usize, data)
}

/// Decodes any supported raster (PNG, JPEG) into a unit-range sRGB stack.
pub fn decode_stack(bytes: &[u8]) -> Result<ImageStack> {
    stack_from_dynamic(image::load_from_memory(bytes)?)
}

/// Decodes a raster into a unit-range grayscale plane (color inputs are
/// reduced with BT.601 luma).
pub fn decode_plane(bytes: &[u8]) -> Result<ImagePlane> {
    plane_from_dynamic(image::load_from_memory(bytes)?)
}

fn plane_from_dynamic(img: DynamicImage) -> Result<ImagePlane> {
    if img.color().has_color() {
        return crate::colorspace::to_grayscale(&stack_from_dynamic(img)?);
    }
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let data = luma
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / u16::MAX as f64)
        .collect();
    ImagePlane::new(h as usize, w as usize, ValueRange::Unit, data)
}

pub fn load_stack(path: &Path) -> Result<ImageStack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stack(&bytes)
}

pub fn load_plane(path: &Path) -> Result<ImagePlane> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_plane(&bytes)
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16
}

/// Encodes an sRGB stack as a 16-bit RGB PNG.
pub fn encode_stack_png(img: &ImageStack) -> Result<Vec<u8>> {
    if img.space() != ColorSpace::Srgb {
        return Err(Error::contract("only sRGB stacks can be written as PNG"));
    }
    let unit = img.to_range(ValueRange::Unit)?;
    let raw: Vec<u16> = unit.data().iter().map(|&v| quantize16(v)).collect();
    let buf: ImageBuffer<Rgb<u16>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .ok_or_else(|| Error::shape("raster buffer size"))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Encodes a plane as a 16-bit grayscale PNG.
pub fn encode_plane_png(img: &ImagePlane) -> Result<Vec<u8>> {
    let unit = img.to_range(ValueRange::Unit)?;
    let raw: Vec<u16> = unit.data().iter().map(|&v| quantize16(v)).collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .ok_or_else(|| Error::shape("raster buffer size"))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_stack(img: &ImageStack, path: &Path) -> Result<()> {
    std::fs::write(path, encode_stack_png(img)?).map_err(|e| Error::io(path, e))
}

pub fn save_plane(img: &ImagePlane, path: &Path) -> Result<()> {
    std::fs::write(path, encode_plane_png(img)?).map_err(|e| Error::io(path, e))
}

/// Bicubic (Catmull-Rom) resize of a unit-range sRGB stack.
pub fn resize_stack(img: &ImageStack, height: usize, width: usize) -> Result<ImageStack> {
    if img.dims() == (height, width) {
        return Ok(img.clone());
    }
    let unit = img.to_range(ValueRange::Unit)?;
    let raw: Vec<f32> = unit.data().iter().map(|&v| v as f32).collect();
    let buf: ImageBuffer<Rgb<f32>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .ok_or_else(|| Error::shape("raster buffer size"))?;
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
    let data = out
        .into_raw()
        .into_iter()
        .map(|v| (v as f64).clamp(0.0, 1.0))
        .collect();
    ImageStack::srgb(height, width, data)
}

/// Bicubic resize of a plane.
pub fn resize_plane(img: &ImagePlane, height: usize, width: usize) -> Result<ImagePlane> {
    if img.dims() == (height, width) {
        return Ok(img.clone());
    }
    let unit = img.to_range(ValueRange::Unit)?;
    let raw: Vec<f32> = unit.data().iter().map(|&v| v as f32).collect();
    let buf: ImageBuffer<Luma<f32>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .ok_or_else(|| Error::shape("raster buffer size"))?;
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
    let data = out
        .into_raw()
        .into_iter()
        .map(|v| (v as f64).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(height, width, ValueRange::Unit, data)
}

/// Crops a `height x width` window with top-left corner `(top, left)`.
pub fn crop_stack(
    img: &ImageStack,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<ImageStack> {
    if top + height > img.height() || left + width > img.width() {
        return Err(Error::shape(format!(
            "crop {height}x{width}@({top},{left}) outside {:?}",
            img.dims()
        )));
    }
    let mut data = Vec::with_capacity(height * width * 3);
    for y in top..top + height {
        let start = (y * img.width() + left) * 3;
        data.extend_from_slice(&img.data()[start..start + width * 3]);
    }
    ImageStack::new(height, width, img.space(), img.range(), data)
}

/// Stacks sRGB images into an `(N, 3, H, W)` signed tensor.
pub fn stacks_to_tensor(imgs: &[&ImageStack], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::shape("empty image batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
    for img in imgs {
        if img.dims() != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {:?} and {:?}",
                (h, w),
                img.dims()
            )));
        }
        let signed = img.to_range(ValueRange::Signed)?;
        for c in 0..3 {
            data.extend(signed.data().iter().skip(c).step_by(3).copied());
        }
    }
    Ok(Tensor::from_vec(data, (imgs.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn stack_to_tensor(img: &ImageStack, device: &Device, dtype: DType) -> Result<Tensor> {
    stacks_to_tensor(&[img], device, dtype)
}

/// Stacks planes into an `(N, 1, H, W)` signed tensor.
pub fn planes_to_tensor(imgs: &[&ImagePlane], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::shape("empty plane batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.dims() != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {:?} and {:?}",
                (h, w),
                img.dims()
            )));
        }
        data.extend_from_slice(img.to_range(ValueRange::Signed)?.data());
    }
    Ok(Tensor::from_vec(data, (imgs.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub fn plane_to_tensor(img: &ImagePlane, device: &Device, dtype: DType) -> Result<Tensor> {
    planes_to_tensor(&[img], device, dtype)
}

/// Converts an `(N, 3, H, W)` model tensor back to signed sRGB stacks,
/// clamping to `[-1, 1]`.
pub fn tensor_to_stacks(t: &Tensor) -> Result<Vec<ImageStack>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    (0..n)
        .map(|i| {
            let base = i * 3 * plane;
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    data.push(flat[base + ch * plane + p].clamp(-1.0, 1.0));
                }
            }
            ImageStack::new(h, w, ColorSpace::Srgb, ValueRange::Signed, data)
        })
        .collect()
}
