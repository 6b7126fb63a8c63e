//! Raster input/output and synthetic scene generation.
//!
//! Cubes and label rasters live on disk as a pair of files: a text header
//! (`key=value` lines, `#` comments) next to a raw binary payload with the
//! same stem and a `.raw` extension. Cubes are little-endian float32 in
//! band-sequential (BSQ) order; labels are little-endian uint16.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Header {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: payload holds {actual} bytes, header declares {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite value at element {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("invalid raster dimensions: {0}")]
    BadShape(String),
    #[error("synthetic scene infeasible: {0}")]
    InfeasibleScene(String),
    #[error("class map is empty")]
    EmptyMap,
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// An H x W x B cube of spectral values, stored band-sequential: the value
/// at (row, col, band) lives at `band * H * W + row * W + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self, IoError> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(IoError::BadShape(format!(
                "cube dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(IoError::BadShape(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                bands
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.height * self.width + row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, value: f32) {
        self.data[band * self.height * self.width + row * self.width + col] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copies the spectrum of one pixel into `out` (length = bands).
    pub fn spectrum_into(&self, row: usize, col: usize, out: &mut [f32]) {
        let plane = self.height * self.width;
        let off = row * self.width + col;
        for (b, v) in out.iter_mut().enumerate() {
            *v = self.data[b * plane + off];
        }
    }
}

/// An H x W ground-truth raster. Label 0 marks unlabeled pixels;
/// `num_classes` is the largest label present.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub num_classes: u16,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self, IoError> {
        if labels.len() != height * width {
            return Err(IoError::BadShape(format!(
                "label count {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        let num_classes = labels.iter().copied().max().unwrap_or(0);
        Ok(Self {
            height,
            width,
            labels,
            num_classes,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }
}

/// A predicted per-pixel class map, same label conventions as `LabelRaster`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    Float32,
    Uint16,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Uint16 => "uint16",
        }
    }
    fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint16 => 2,
        }
    }
}

struct RasterHeader {
    height: usize,
    width: usize,
    bands: usize,
    dtype: Dtype,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn parse_header(path: &Path) -> Result<RasterHeader, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let herr = |line: usize, msg: String| IoError::Header {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut height = None;
    let mut width = None;
    let mut bands = None;
    let mut dtype = None;
    for (i, raw_line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| herr(lineno, format!("expected key=value, got `{line}`")))?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "height" | "width" | "bands" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| herr(lineno, format!("{key} must be a positive integer")))?;
                if n == 0 {
                    return Err(herr(lineno, format!("{key} must be positive")));
                }
                match key.as_str() {
                    "height" => height = Some(n),
                    "width" => width = Some(n),
                    _ => bands = Some(n),
                }
            }
            "dtype" => {
                dtype = Some(match value {
                    "float32" => Dtype::Float32,
                    "uint16" => Dtype::Uint16,
                    other => return Err(herr(lineno, format!("unsupported dtype `{other}`"))),
                })
            }
            "interleave" => {
                if value != "bsq" {
                    return Err(herr(lineno, format!("unsupported interleave `{value}`")));
                }
            }
            "byteorder" => {
                if value != "le" {
                    return Err(herr(lineno, format!("unsupported byteorder `{value}`")));
                }
            }
            other => return Err(herr(lineno, format!("unknown header key `{other}`"))),
        }
    }
    let need = |opt: Option<usize>, name: &str| {
        opt.ok_or_else(|| herr(0, format!("missing required key `{name}`")))
    };
    Ok(RasterHeader {
        height: need(height, "height")?,
        width: need(width, "width")?,
        bands: need(bands, "bands")?,
        dtype: dtype.ok_or_else(|| herr(0, "missing required key `dtype`".into()))?,
    })
}

fn write_header(path: &Path, h: usize, w: usize, b: usize, dtype: Dtype) -> Result<(), IoError> {
    let text = format!(
        "# jigsawhsi raster header\nheight={h}\nwidth={w}\nbands={b}\ndtype={}\ninterleave=bsq\nbyteorder=le\n",
        dtype.name()
    );
    fs::write(path, text).map_err(|e| file_err(path, e))
}

fn read_payload(header_path: &Path, header: &RasterHeader) -> Result<Vec<u8>, IoError> {
    let path = payload_path(header_path);
    let bytes = fs::read(&path).map_err(|e| file_err(&path, e))?;
    let expected = header.height * header.width * header.bands * header.dtype.size();
    if bytes.len() != expected {
        return Err(IoError::SizeMismatch {
            path,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Reads a float32 BSQ cube from its header file.
pub fn read_cube(header_path: &Path) -> Result<HsiCube, IoError> {
    let header = parse_header(header_path)?;
    if header.dtype != Dtype::Float32 {
        return Err(IoError::Header {
            path: header_path.to_path_buf(),
            line: 0,
            msg: "cube payload must be float32".into(),
        });
    }
    let bytes = read_payload(header_path, &header)?;
    let mut data = Vec::with_capacity(bytes.len() / 4);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(IoError::NonFinite {
                path: payload_path(header_path),
                index: i,
            });
        }
        data.push(v);
    }
    HsiCube::new(header.height, header.width, header.bands, data)
}

/// Writes a cube; `write_cube` then `read_cube` is a bit-exact round trip.
pub fn write_cube(cube: &HsiCube, header_path: &Path) -> Result<(), IoError> {
    write_header(
        header_path,
        cube.height,
        cube.width,
        cube.bands,
        Dtype::Float32,
    )?;
    let path = payload_path(header_path);
    let mut f = fs::File::create(&path).map_err(|e| file_err(&path, e))?;
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| file_err(&path, e))
}

/// Reads a uint16 label raster (bands must be 1).
pub fn read_labels(header_path: &Path) -> Result<LabelRaster, IoError> {
    let header = parse_header(header_path)?;
    if header.dtype != Dtype::Uint16 || header.bands != 1 {
        return Err(IoError::Header {
            path: header_path.to_path_buf(),
            line: 0,
            msg: "label raster must be uint16 with bands=1".into(),
        });
    }
    let bytes = read_payload(header_path, &header)?;
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelRaster::new(header.height, header.width, labels)
}

pub fn write_labels(raster: &LabelRaster, header_path: &Path) -> Result<(), IoError> {
    write_u16_raster(raster.height, raster.width, &raster.labels, header_path)
}

fn write_u16_raster(
    height: usize,
    width: usize,
    labels: &[u16],
    header_path: &Path,
) -> Result<(), IoError> {
    write_header(header_path, height, width, 1, Dtype::Uint16)?;
    let path = payload_path(header_path);
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for v in labels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| file_err(&path, e))
}

/// Writes a class map twice: as the uint16 raster format (`base.hdr` +
/// `base.raw`) and as an ASCII P2 graymap (`base.pgm`) with labels scaled
/// to 0..=255 for quick visual inspection.
pub fn write_class_map(map: &ClassMap, base_path: &Path) -> Result<(), IoError> {
    if map.labels.is_empty() {
        return Err(IoError::EmptyMap);
    }
    let header_path = base_path.with_extension("hdr");
    write_u16_raster(map.height, map.width, &map.labels, &header_path)?;

    let max_label = map.labels.iter().copied().max().unwrap_or(0).max(1) as u32;
    let pgm_path = base_path.with_extension("pgm");
    let mut text = format!("P2\n{} {}\n255\n", map.width, map.height);
    for row in 0..map.height {
        let mut line = String::new();
        for col in 0..map.width {
            let v = map.labels[row * map.width + col] as u32;
            let gray = (v * 255 + max_label / 2) / max_label;
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&gray.to_string());
        }
        line.push('\n');
        text.push_str(&line);
    }
    fs::write(&pgm_path, text).map_err(|e| file_err(&pgm_path, e))
}

/// Reads a class map back from its raster form.
pub fn read_class_map(base_path: &Path) -> Result<ClassMap, IoError> {
    let raster = read_labels(&base_path.with_extension("hdr"))?;
    Ok(ClassMap {
        height: raster.height,
        width: raster.width,
        labels: raster.labels,
    })
}

/// Per-class mean spectra used by the synthetic scene: Gaussian bumps at
/// distinct band centers, normalized to unit L2 norm.
pub fn synthetic_class_spectra(bands: usize, num_classes: u16) -> Vec<Vec<f32>> {
    let k = num_classes as usize;
    let mut out = Vec::with_capacity(k);
    let sigma = (bands as f64 / (2.5 * k as f64)).max(0.75);
    for class in 0..k {
        let center = (class as f64 + 0.5) * bands as f64 / k as f64;
        let mut spec: Vec<f64> = (0..bands)
            .map(|b| (-((b as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm = spec.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut spec {
            *v /= norm;
        }
        out.push(spec.into_iter().map(|v| v as f32).collect());
    }
    out
}

/// Generates a deterministic labeled scene: contiguous class blobs on a
/// background, each class with a distinct mean spectrum, plus additive
/// Gaussian noise. Background pixels keep label 0.
pub fn generate_synthetic_scene(
    height: usize,
    width: usize,
    bands: usize,
    num_classes: u16,
    blob_count: usize,
    noise_sigma: f32,
    seed: u64,
) -> Result<(HsiCube, LabelRaster), IoError> {
    let k = num_classes as usize;
    if k < 2 {
        return Err(IoError::InfeasibleScene("need at least 2 classes".into()));
    }
    if bands < k {
        return Err(IoError::InfeasibleScene(format!(
            "need bands >= classes, got {bands} < {k}"
        )));
    }
    if blob_count < k {
        return Err(IoError::InfeasibleScene(format!(
            "blob_count {blob_count} < {k} classes"
        )));
    }
    // Lay blobs on a grid of cells, one disc per cell, classes round-robin.
    let grid_x = (blob_count as f64).sqrt().ceil() as usize;
    let grid_y = blob_count.div_ceil(grid_x);
    let cell_w = width / grid_x;
    let cell_h = height / grid_y;
    if cell_w < 4 || cell_h < 4 {
        return Err(IoError::InfeasibleScene(format!(
            "{blob_count} blobs do not fit a {height}x{width} raster"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u16; height * width];
    for blob in 0..blob_count {
        let class = (blob % k) as u16 + 1;
        let cell_row = blob / grid_x;
        let cell_col = blob % grid_x;
        let base_r = 0.38 * cell_w.min(cell_h) as f64;
        let radius = base_r * rng.gen_range(0.85..1.0);
        let jitter = (0.5 * (cell_w.min(cell_h) as f64 - 2.0 * radius)).max(0.0);
        let cy = (cell_row * cell_h) as f64 + cell_h as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
        let cx = (cell_col * cell_w) as f64 + cell_w as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
        for row in 0..height {
            for col in 0..width {
                let dy = row as f64 - cy;
                let dx = col as f64 - cx;
                if dy * dy + dx * dx <= radius * radius {
                    labels[row * width + col] = class;
                }
            }
        }
    }

    // Every class must cover at least 1% of the raster, and some background
    // must remain.
    let total = height * width;
    let mut counts = vec![0usize; k + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    for class in 1..=k {
        if counts[class] * 100 < total {
            return Err(IoError::InfeasibleScene(format!(
                "class {class} covers {} of {total} pixels (< 1%)",
                counts[class]
            )));
        }
    }
    if counts[0] == 0 {
        return Err(IoError::InfeasibleScene("no background pixels left".into()));
    }

    let spectra = synthetic_class_spectra(bands, num_classes);
    let background = vec![0.05f32; bands];
    let noise = Normal::new(0.0f64, noise_sigma as f64)
        .map_err(|_| IoError::InfeasibleScene("noise_sigma must be non-negative".into()))?;
    let plane = height * width;
    let mut data = vec![0f32; plane * bands];
    for (pix, &label) in labels.iter().enumerate() {
        let mean: &[f32] = if label == 0 {
            &background
        } else {
            &spectra[label as usize - 1]
        };
        for (b, &m) in mean.iter().enumerate() {
            let n = if noise_sigma > 0.0 {
                noise.sample(&mut rng) as f32
            } else {
                0.0
            };
            data[b * plane + pix] = m + n;
        }
    }

    let cube = HsiCube::new(height, width, bands, data)?;
    let raster = LabelRaster::new(height, width, labels)?;
    Ok((cube, raster))
}
