//! On-disk formats: raw little-endian payloads with JSON sidecars, k-space
//! files, run manifests, PNG slice exports and config loading.
//!
//! A volume `name` is stored as `name.raw` (x fastest) plus `name.json`.
//! All writes go to a temporary file in the target directory and are renamed
//! into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, MocoError, Result};
use crate::geometry::AxisConvention;
use crate::pattern::{KSpaceData, SamplingPattern};
use crate::volume::{voxel_count, ComplexVolume3D, Dims, RealVolume3D, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Complex64,
    Complex128,
    Float32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Complex64 => 8,
            DType::Complex128 => 16,
            DType::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Image,
    Kspace,
}

/// JSON sidecar of a raw payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    /// Image grid, or `[n_readout, n_lines, 1]` for k-space.
    pub dims: Dims,
    pub voxel_size_mm: [f64; 3],
    pub dtype: DType,
    pub kind: PayloadKind,
    pub axis_convention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<SamplingPattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

impl VolumeHeader {
    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(MocoError::Format(format!("sidecar dims must be positive, got {:?}", self.dims)));
        }
        if self.voxel_size_mm.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MocoError::Format("sidecar voxel size must be positive".into()));
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| invalid_input(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| MocoError::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MocoError::Format(format!("{}: {e}", path.display())))
}

/// Loads a config from TOML or JSON, chosen by extension (TOML otherwise).
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| MocoError::Format(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| MocoError::Format(format!("{}: {e}", path.display())))
    }
}

fn encode_complex(data: &[C64], dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * dtype.size());
    match dtype {
        DType::Complex64 => {
            for v in data {
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }
        DType::Complex128 => {
            for v in data {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        DType::Float32 => return Err(invalid_input("complex data cannot be stored as float32")),
    }
    Ok(out)
}

fn decode_complex(bytes: &[u8], dtype: DType) -> Result<Vec<C64>> {
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as f64;
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let n = bytes.len() / dtype.size();
    Ok(match dtype {
        DType::Complex64 => (0..n).map(|i| C64::new(f32_at(8 * i), f32_at(8 * i + 4))).collect(),
        DType::Complex128 => (0..n).map(|i| C64::new(f64_at(16 * i), f64_at(16 * i + 8))).collect(),
        DType::Float32 => (0..n).map(|i| C64::new(f32_at(4 * i), 0.0)).collect(),
    })
}

fn read_payload(path: &Path, header: &VolumeHeader, count: usize) -> Result<Vec<u8>> {
    let raw = payload_path(path);
    let bytes = fs::read(&raw)?;
    let expected = count * header.dtype.size();
    if bytes.len() != expected {
        return Err(MocoError::Format(format!(
            "{}: payload has {} bytes, expected {expected}",
            raw.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn write_pair(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    write_atomic(&payload_path(path), payload)?;
    write_json(&sidecar_path(path), header)
}

fn image_header(dims: Dims, voxel_size: [f64; 3], dtype: DType) -> VolumeHeader {
    VolumeHeader {
        dims,
        voxel_size_mm: voxel_size,
        dtype,
        kind: PayloadKind::Image,
        axis_convention: AxisConvention::TAG.to_string(),
        pattern: None,
        noise_sigma: None,
    }
}

/// Writes a complex image; `path`'s extension is replaced by `.raw`/`.json`.
pub fn write_volume(path: &Path, vol: &ComplexVolume3D, dtype: DType) -> Result<()> {
    let payload = encode_complex(vol.data(), dtype)?;
    write_pair(path, &image_header(vol.dims(), vol.voxel_size(), dtype), &payload)
}

/// Writes a magnitude image as float32.
pub fn write_magnitude(path: &Path, vol: &RealVolume3D, voxel_size: [f64; 3]) -> Result<()> {
    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_pair(path, &image_header(vol.dims, voxel_size, DType::Float32), &payload)
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let h: VolumeHeader = read_json(&sidecar_path(path))?;
    h.validate()?;
    Ok(h)
}

/// Reads an image; float32 payloads become real-valued complex volumes.
pub fn read_volume(path: &Path) -> Result<ComplexVolume3D> {
    let h = read_header(path)?;
    if h.kind != PayloadKind::Image {
        return Err(MocoError::Format(format!("{} holds k-space, not an image", path.display())));
    }
    let bytes = read_payload(path, &h, voxel_count(h.dims))?;
    let data = decode_complex(&bytes, h.dtype)?;
    ComplexVolume3D::from_data(h.dims, h.voxel_size_mm, data)
}

pub fn write_kspace(path: &Path, data: &KSpaceData, dtype: DType) -> Result<()> {
    let p = data.pattern();
    let header = VolumeHeader {
        dims: [p.n_readout(), p.n_lines(), 1],
        voxel_size_mm: p.voxel_size(),
        dtype,
        kind: PayloadKind::Kspace,
        axis_convention: AxisConvention::TAG.to_string(),
        pattern: Some(p.clone()),
        noise_sigma: data.noise_sigma,
    };
    write_pair(path, &header, &encode_complex(data.samples(), dtype)?)
}

/// Re-validates a deserialised pattern.
pub fn validated_pattern(p: &SamplingPattern) -> Result<SamplingPattern> {
    SamplingPattern::new(p.dims(), p.voxel_size(), p.readout_axis(), p.pe_coords().to_vec(), p.kind())
}

pub fn read_kspace(path: &Path) -> Result<KSpaceData> {
    let h = read_header(path)?;
    if h.kind != PayloadKind::Kspace {
        return Err(MocoError::Format(format!("{} holds an image, not k-space", path.display())));
    }
    let pattern = validated_pattern(
        h.pattern
            .as_ref()
            .ok_or_else(|| MocoError::Format("k-space sidecar lacks a pattern".into()))?,
    )?;
    if h.dims != [pattern.n_readout(), pattern.n_lines(), 1] {
        return Err(MocoError::Format("k-space sidecar dims disagree with its pattern".into()));
    }
    let bytes = read_payload(path, &h, pattern.n_samples())?;
    KSpaceData::new(pattern, decode_complex(&bytes, h.dtype)?, h.noise_sigma)
}

pub fn write_pattern(path: &Path, pattern: &SamplingPattern) -> Result<()> {
    write_json(path, pattern)
}

pub fn read_pattern(path: &Path) -> Result<SamplingPattern> {
    validated_pattern(&read_json(path)?)
}

/// Everything needed to re-run a CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            tool: "moco".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Writes the manifest after checking that every referenced file exists.
    /// Relative paths are resolved against the manifest's directory.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in self.inputs.values().chain(self.outputs.values()) {
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            if !full.exists() {
                return Err(invalid_input(format!("manifest references missing file {}", full.display())));
            }
        }
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Value at quantile `q` (0..=1) by linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Encodes a 2D image (`dims[2] == 1`) as 8-bit grayscale PNG, mapping
/// `[0, window_max]` to `[0, 255]`. The second axis runs bottom to top.
pub fn encode_png(image: &RealVolume3D, window_max: f64) -> Result<Vec<u8>> {
    if image.dims[2] != 1 {
        return Err(invalid_input("PNG export needs a 2D slice"));
    }
    let (w, h) = (image.dims[0], image.dims[1]);
    let scale = if window_max > 0.0 { 255.0 / window_max } else { 0.0 };
    let mut pixels = Vec::with_capacity(w * h);
    for row in (0..h).rev() {
        for col in 0..w {
            let v = image.data[col + w * row] * scale;
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| MocoError::Format(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| MocoError::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Window used for PNG export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PngWindow {
    pub low: f64,
    pub high: f64,
    pub percentile: f64,
}

/// Writes `<prefix>_sagittal.png`, `<prefix>_coronal.png` and `<prefix>_axial.png`
/// from the central slices of the magnitude, windowed to `[0, p99.5]`.
pub fn write_png_triplet(dir: &Path, prefix: &str, vol: &ComplexVolume3D) -> Result<(Vec<PathBuf>, PngWindow)> {
    let mag = vol.magnitude();
    let window = PngWindow {
        low: 0.0,
        high: percentile(&mag.data, 0.995),
        percentile: 99.5,
    };
    let mut paths = Vec::with_capacity(3);
    for (axis, name) in [(0, "sagittal"), (1, "coronal"), (2, "axial")] {
        let slice = mag.slice(axis, mag.dims[axis] / 2)?;
        let path = dir.join(format!("{prefix}_{name}.png"));
        write_atomic(&path, &encode_png(&slice, window.high)?)?;
        paths.push(path);
    }
    Ok((paths, window))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn complex64_codec_is_lossless_on_f32_values() {
        let data: Vec<C64> = (0..10).map(|i| C64::new((i as f32 * 0.1f32) as f64, -(i as f64))).collect();
        let bytes = encode_complex(&data, DType::Complex64).unwrap();
        assert_eq!(decode_complex(&bytes, DType::Complex64).unwrap(), data);
    }
}
