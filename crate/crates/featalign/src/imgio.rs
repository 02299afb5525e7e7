//! Binary PGM/PPM emission and parsing for image grids and folder datasets.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantize a [0,1] intensity to a byte: clamp, then round(v * 255).
fn to_byte(v: f64) -> u8 {
    let c = v.clamp(0.0, 1.0);
    (c * 255.0).round() as u8
}

/// Per-cell (channels, height, width) from a cell shape of [H,W], [1,H,W]
/// or [3,H,W].
fn cell_dims(cell_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match cell_shape {
        [h, w] => Ok((1, *h, *w)),
        [c @ (1 | 3), h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(format!(
            "image cells must be [H,W], [1,H,W] or [3,H,W], got {:?}",
            other
        ))),
    }
}

/// Lay `images` ([n, C*H*W], channel-major cells) out as a rows x cols grid
/// with a 2-pixel white gutter between cells and write it as binary PGM
/// (grayscale) or PPM (RGB). Values are clamped to [0,1] and scaled to
/// maxval 255.
pub fn emit_image_grid(
    images: &Tensor,
    cell_shape: &[usize],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<()> {
    let (c, h, w) = cell_dims(cell_shape)?;
    if images.shape.len() != 2 || images.shape[1] != c * h * w {
        return Err(Error::shape(format!(
            "expected images [n, {}] for cells {:?}, got {:?}",
            c * h * w,
            cell_shape,
            images.shape
        )));
    }
    let n = images.shape[0];
    if n == 0 {
        return Err(Error::InvalidArg("cannot emit a grid of zero images".into()));
    }
    if rows * cols < n {
        return Err(Error::InvalidArg(format!(
            "grid {}x{} holds {} cells, got {} images",
            rows, cols, rows * cols, n
        )));
    }
    const GUTTER: usize = 2;
    let gh = rows * h + (rows - 1) * GUTTER;
    let gw = cols * w + (cols - 1) * GUTTER;
    // white canvas; cells overwrite their rectangles
    let mut canvas = vec![255u8; gh * gw * c];
    for (idx, cell) in images.values.chunks(c * h * w).enumerate() {
        let (gr, gc) = (idx / cols, idx % cols);
        let (top, left) = (gr * (h + GUTTER), gc * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = ch * h * w + y * w + x;
                    // interleaved channels, as PPM wants them
                    let dst = ((top + y) * gw + left + x) * c + ch;
                    canvas[dst] = to_byte(cell[src]);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut file = fs::File::create(path)?;
    write!(file, "{}\n{} {}\n255\n", magic, gw, gh)?;
    file.write_all(&canvas)?;
    Ok(())
}

/// Interleave two equally-shaped image batches row-wise, pairing
/// (reconstruction, original) for side-by-side grids.
pub fn pair_interleave(recon: &Tensor, orig: &Tensor) -> Result<Tensor> {
    if recon.shape != orig.shape || recon.shape.len() != 2 {
        return Err(Error::shape(format!(
            "pair_interleave expects matching [n, d] batches, got {:?} and {:?}",
            recon.shape, orig.shape
        )));
    }
    let (n, d) = (recon.shape[0], recon.shape[1]);
    let mut values = Vec::with_capacity(2 * n * d);
    for i in 0..n {
        values.extend_from_slice(&recon.values[i * d..(i + 1) * d]);
        values.extend_from_slice(&orig.values[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![2 * n, d], values)
}

/// Parse a binary PGM (P5) or PPM (P6) file into a channel-major cell shape
/// and [0,1] pixel values.
pub fn read_pnm(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)
        .ok_or_else(|| Error::Data(format!("{}: missing PNM magic", path.display())))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported PNM magic `{}` (want binary P5/P6)",
                path.display(),
                other
            )))
        }
    };
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let tok = next_token(&bytes, &mut pos)
            .ok_or_else(|| Error::Data(format!("{}: truncated PNM header", path.display())))?;
        *d = tok
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad PNM header token `{}`", path.display(), tok)))?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!(
            "{}: unsupported PNM maxval {}",
            path.display(),
            maxval
        )));
    }
    // header ends with exactly one whitespace byte before the raster
    let body = &bytes[pos..];
    let want = w * h * channels;
    if body.len() < want {
        return Err(Error::Data(format!(
            "{}: truncated PNM raster ({} of {} bytes)",
            path.display(),
            body.len(),
            want
        )));
    }
    // interleaved raster -> channel-major cell
    let mut values = vec![0.0; want];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                let v = body[(y * w + x) * channels + ch] as f64 / maxval as f64;
                values[ch * h * w + y * w + x] = v;
            }
        }
    }
    let shape = if channels == 1 { vec![h, w] } else { vec![3, h, w] };
    Ok((shape, values))
}

/// Next whitespace-delimited header token, skipping `#` comment lines.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    let tok = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
    // consume the single whitespace that terminates the token
    if *pos < bytes.len() {
        *pos += 1;
    }
    Some(tok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // keep the dir alive by leaking it; tests are short-lived
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn single_black_cell_golden_bytes() {
        let images = Tensor::zeros(vec![1, 4]);
        let path = tmpfile("black.pgm");
        emit_image_grid(&images, &[2, 2], 1, 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\x00\x00\x00");
    }

    #[test]
    fn clamp_and_scale() {
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-0.1), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(0.5), 128);
    }

    #[test]
    fn gutter_is_white() {
        // two 1x1 cells side by side: 1 + 2 + 1 = 4 px wide, 1 px tall
        let images = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let path = tmpfile("gutter.pgm");
        emit_image_grid(&images, &[1, 1], 1, 2, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n4 1\n255\n\x00\xff\xff\x00");
    }

    #[test]
    fn rgb_emits_ppm() {
        let images = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        let path = tmpfile("pixel.ppm");
        emit_image_grid(&images, &[3, 1, 1], 1, 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\x00\x80");
    }

    #[test]
    fn grid_too_small_rejected() {
        let images = Tensor::zeros(vec![3, 4]);
        let path = tmpfile("overflow.pgm");
        let err = emit_image_grid(&images, &[2, 2], 1, 2, &path).unwrap_err();
        assert!(matches!(err, Error::InvalidArg(_)));
    }

    #[test]
    fn pair_interleave_orders_recon_then_orig() {
        let recon = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let orig = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let both = pair_interleave(&recon, &orig).unwrap();
        assert_eq!(both.shape, vec![4, 2]);
        assert_eq!(both.values, vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn pnm_round_trip() {
        let images = Tensor::new(vec![1, 6], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let path = tmpfile("round.pgm");
        emit_image_grid(&images, &[2, 3], 1, 1, &path).unwrap();
        let (shape, values) = read_pnm(&path).unwrap();
        assert_eq!(shape, vec![2, 3]);
        for (a, b) in values.iter().zip(images.values.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pnm_rgb_round_trip() {
        let images = Tensor::new(vec![1, 3], vec![0.25, 0.5, 0.75]).unwrap();
        let path = tmpfile("round.ppm");
        emit_image_grid(&images, &[3, 1, 1], 1, 1, &path).unwrap();
        let (shape, values) = read_pnm(&path).unwrap();
        assert_eq!(shape, vec![3, 1, 1]);
        for (a, b) in values.iter().zip(images.values.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pnm_rejects_ascii_and_truncation() {
        let path = tmpfile("ascii.pgm");
        fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(matches!(read_pnm(&path).unwrap_err(), Error::Data(_)));

        let path = tmpfile("short.pgm");
        fs::write(&path, b"P5\n2 2\n255\n\x00\x00").unwrap();
        assert!(matches!(read_pnm(&path).unwrap_err(), Error::Data(_)));
    }
}
