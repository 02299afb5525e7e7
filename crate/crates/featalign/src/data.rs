//! Dataset ingestion: IDX parsing, synthetic corpora, and image folders.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imgio::read_pnm;
use crate::model::orthogonal_matrix;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory dataset: flattened examples in [0,1], per-example extent,
/// and optional class labels.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    /// [n, d] example matrix.
    pub images: Tensor,
    /// Per-example extent, e.g. [28, 28] or [2].
    pub cell_shape: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub class_count: Option<usize>,
}

impl DatasetHandle {
    pub fn new(
        images: Tensor,
        cell_shape: Vec<usize>,
        labels: Option<Vec<usize>>,
        class_count: Option<usize>,
    ) -> Result<Self> {
        if images.shape.len() != 2 {
            return Err(Error::shape(format!(
                "dataset images must be [n, d], got {:?}",
                images.shape
            )));
        }
        let d: usize = cell_shape.iter().product();
        if d != images.shape[1] {
            return Err(Error::shape(format!(
                "cell shape {:?} holds {} values but rows hold {}",
                cell_shape, d, images.shape[1]
            )));
        }
        if images.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0,1]".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.shape[0] {
                return Err(Error::Data(format!(
                    "count mismatch: {} images but {} labels",
                    images.shape[0],
                    labels.len()
                )));
            }
            let classes = class_count
                .ok_or_else(|| Error::Data("labeled dataset needs a class count".into()))?;
            if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes",
                    bad, classes
                )));
            }
        }
        Ok(DatasetHandle {
            images,
            cell_shape,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_len(&self) -> usize {
        self.images.shape[1]
    }

    /// Examples [start, start+count) as a fresh [count, d] tensor.
    pub fn batch(&self, start: usize, count: usize) -> Result<Tensor> {
        let d = self.input_len();
        if start + count > self.len() {
            return Err(Error::InvalidArg(format!(
                "batch [{}, {}) exceeds dataset of {} examples",
                start,
                start + count,
                self.len()
            )));
        }
        Tensor::new(
            vec![count, d],
            self.images.values[start * d..(start + count) * d].to_vec(),
        )
    }

    pub fn batch_labels(&self, start: usize, count: usize) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l[start..start + count].to_vec())
    }

    /// A copy of examples [start, start+count) as its own dataset.
    pub fn slice(&self, start: usize, count: usize) -> Result<DatasetHandle> {
        let images = self.batch(start, count)?;
        DatasetHandle::new(
            images,
            self.cell_shape.clone(),
            self.batch_labels(start, count),
            self.class_count,
        )
    }
}

fn read_u32s(bytes: &[u8], path: &Path, count: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * count {
        return Err(Error::Data(format!(
            "{}: truncated IDX header",
            path.display()
        )));
    }
    Ok((0..count)
        .map(|i| BigEndian::read_u32(&bytes[4 * i..]))
        .collect())
}

/// Parse an IDX image/label file pair into a normalized dataset. Pixels are
/// scaled to [0,1] by dividing by 255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle> {
    let img_bytes = fs::read(images_path)?;
    let header = read_u32s(&img_bytes, images_path, 4)?;
    if header[0] != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:#010x}, want {:#010x} (IDX images)",
            images_path.display(),
            header[0],
            IDX_IMAGES_MAGIC
        )));
    }
    let (n, rows, cols) = (header[1] as usize, header[2] as usize, header[3] as usize);
    let want = n * rows * cols;
    let payload = &img_bytes[16..];
    if payload.len() < want {
        return Err(Error::Data(format!(
            "{}: truncated payload ({} of {} pixel bytes)",
            images_path.display(),
            payload.len(),
            want
        )));
    }

    let lbl_bytes = fs::read(labels_path)?;
    let header = read_u32s(&lbl_bytes, labels_path, 2)?;
    if header[0] != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:#010x}, want {:#010x} (IDX labels)",
            labels_path.display(),
            header[0],
            IDX_LABELS_MAGIC
        )));
    }
    let ln = header[1] as usize;
    if lbl_bytes.len() < 8 + ln {
        return Err(Error::Data(format!(
            "{}: truncated payload ({} of {} label bytes)",
            labels_path.display(),
            lbl_bytes.len() - 8,
            ln
        )));
    }
    if ln != n {
        return Err(Error::Data(format!(
            "count mismatch: {} images but {} labels",
            n, ln
        )));
    }

    let values: Vec<f64> = payload[..want].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + ln].iter().map(|&b| b as usize).collect();
    DatasetHandle::new(
        Tensor::new(vec![n, rows * cols], values)?,
        vec![rows, cols],
        Some(labels),
        Some(10),
    )
}

/// Write a raw byte image set in IDX format.
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::InvalidArg(format!(
            "expected {} pixel bytes, got {}",
            n * rows * cols,
            pixels.len()
        )));
    }
    let mut header = [0u8; 16];
    BigEndian::write_u32(&mut header[0..], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut header[4..], n as u32);
    BigEndian::write_u32(&mut header[8..], rows as u32);
    BigEndian::write_u32(&mut header[12..], cols as u32);
    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(pixels)?;
    Ok(())
}

/// Write labels in IDX format.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut header = [0u8; 8];
    BigEndian::write_u32(&mut header[0..], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut header[4..], labels.len() as u32);
    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(labels)?;
    Ok(())
}

/// 5x7 bitmaps for the digits 0-9.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Render a deterministic 28x28 digit-glyph corpus and write it as an IDX
/// image/label file pair under `dir`. Returns (images path, labels path).
/// Each image is a 3x-scaled 5x7 digit bitmap at a random offset with a
/// random foreground intensity.
pub fn write_glyph_idx(dir: &Path, n: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    if n == 0 {
        return Err(Error::InvalidArg("glyph corpus needs n >= 1".into()));
    }
    const SIDE: usize = 28;
    const SCALE: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; n * SIDE * SIDE];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let digit = rng.gen_range(0..10usize);
        labels[i] = digit as u8;
        let dx = rng.gen_range(0..=SIDE - 5 * SCALE);
        let dy = rng.gen_range(0..=SIDE - 7 * SCALE);
        let fg: u8 = rng.gen_range(160..=255);
        let img = &mut pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE];
        for (row, bits) in GLYPHS[digit].iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) == 0 {
                    continue;
                }
                for sy in 0..SCALE {
                    for sx in 0..SCALE {
                        let y = dy + row * SCALE + sy;
                        let x = dx + col * SCALE + sx;
                        img[y * SIDE + x] = fg;
                    }
                }
            }
        }
    }
    let images_path = dir.join("train-images-idx3-ubyte");
    let labels_path = dir.join("train-labels-idx1-ubyte");
    write_idx_images(&images_path, &pixels, n, SIDE, SIDE)?;
    write_idx_labels(&labels_path, &labels)?;
    Ok((images_path, labels_path))
}

/// Standard normal draw truncated to |g| <= 4 by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let g: f64 = rng.sample(StandardNormal);
        if g.abs() <= 4.0 {
            return g;
        }
    }
}

/// Synthetic corpora. `ring` is an 8-mode Gaussian ring in 2-D (labels =
/// mode index); `mixed-latents` mixes truncated standard-normal latents
/// through a random orthogonal matrix. Both live in [0,1] and are
/// deterministic per seed.
pub fn synthetic_dataset(kind: &str, n: usize, seed: u64) -> Result<DatasetHandle> {
    if n == 0 {
        return Err(Error::InvalidArg("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        "ring" => {
            const MODES: usize = 8;
            const RADIUS: f64 = 0.35;
            const SIGMA: f64 = 0.02;
            let mut values = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let mode = rng.gen_range(0..MODES);
                let angle = 2.0 * std::f64::consts::PI * mode as f64 / MODES as f64;
                let cx = 0.5 + RADIUS * angle.cos();
                let cy = 0.5 + RADIUS * angle.sin();
                values.push(cx + SIGMA * truncated_normal(&mut rng));
                values.push(cy + SIGMA * truncated_normal(&mut rng));
                labels.push(mode);
            }
            DatasetHandle::new(
                Tensor::new(vec![n, 2], values)?,
                vec![2],
                Some(labels),
                Some(MODES),
            )
        }
        "mixed-latents" => {
            const DIM: usize = 8;
            const SCALE: f64 = 0.1;
            let q = orthogonal_matrix(&mut rng, DIM, DIM);
            let mut values = Vec::with_capacity(DIM * n);
            for _ in 0..n {
                // redraw the whole example if the mix leaves [0,1]
                loop {
                    let z: Vec<f64> = (0..DIM).map(|_| truncated_normal(&mut rng)).collect();
                    let x: Vec<f64> = (0..DIM)
                        .map(|j| {
                            0.5 + SCALE * (0..DIM).map(|i| z[i] * q[i * DIM + j]).sum::<f64>()
                        })
                        .collect();
                    if x.iter().all(|v| (0.0..=1.0).contains(v)) {
                        values.extend_from_slice(&x);
                        break;
                    }
                }
            }
            DatasetHandle::new(Tensor::new(vec![n, DIM], values)?, vec![DIM], None, None)
        }
        other => Err(Error::Data(format!("unknown synthetic dataset kind `{}`", other))),
    }
}

/// Read every `.pgm`/`.ppm` file in a directory (sorted by name) as one
/// dataset. All images must share an extent; no labels.
pub fn load_image_folder(dir: &Path) -> Result<DatasetHandle> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "{}: no .pgm/.ppm files found",
            dir.display()
        )));
    }
    let mut cell_shape: Option<Vec<usize>> = None;
    let mut values = Vec::new();
    for path in &paths {
        let (shape, pixels) = read_pnm(path)?;
        match &cell_shape {
            None => cell_shape = Some(shape),
            Some(first) if *first != shape => {
                return Err(Error::Data(format!(
                    "{}: extent {:?} differs from {:?}",
                    path.display(),
                    shape,
                    first
                )));
            }
            _ => {}
        }
        values.extend_from_slice(&pixels);
    }
    let cell_shape = cell_shape.unwrap();
    let d: usize = cell_shape.iter().product();
    DatasetHandle::new(
        Tensor::new(vec![paths.len(), d], values)?,
        cell_shape,
        None,
        None,
    )
}
