//! On-disk containers: `.npy` arrays, JSON sidecars, PNG renderings and
//! content digests.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use npyz::{AutoSerialize, Deserialize, WriterBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn write_npy<T: AutoSerialize + Copy>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!("npy shape {shape:?} vs {} values", data.len())));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let shape64: Vec<u64> = shape.iter().map(|&s| s as u64).collect();
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape64)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| Error::io(path, e))?;
    w.extend(data.iter().copied()).map_err(|e| Error::io(path, e))?;
    w.finish().map_err(|e| Error::io(path, e))
}

pub fn read_npy<T: Deserialize>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| Error::io(path, e))?;
    let shape = npy.shape().iter().map(|&s| s as usize).collect();
    let data = npy.into_vec::<T>().map_err(|e| Error::io(path, e))?;
    Ok((shape, data))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-channel `[0,1]` grid as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let buf: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::Shape(format!("{width}×{height} png from {} values", values.len())))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })
}

/// Writes a planar `C × H × W` `[0,1]` image; one channel gives grayscale,
/// three or more give RGB from the first three.
pub fn write_planar_png(path: &Path, width: usize, height: usize, channels: usize, values: &[f32]) -> Result<()> {
    let plane = width * height;
    if values.len() != plane * channels || channels == 2 || channels == 0 {
        return Err(Error::Shape(format!("{width}×{height}×{channels} png from {} values", values.len())));
    }
    if channels == 1 {
        return write_gray_png(path, width, height, values);
    }
    let buf: Vec<u8> = (0..plane).flat_map(|i| (0..3).map(move |c| to_u8(values[c * plane + i]))).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf).expect("sized above");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })
}

/// Blue→red heat colour for a `[0,1]` value.
pub fn heat_color(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// Renders a `[0,1]` grid as an 8-bit RGB heatmap PNG.
pub fn write_heatmap_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let buf: Vec<u8> = values.iter().flat_map(|&v| heat_color(v)).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::Shape(format!("{width}×{height} heatmap from {} values", values.len())))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
