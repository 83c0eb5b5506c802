//! Binary grid and dictionary files, plus 16-bit PGM export.
//!
//! `DLGRID1`: magic, rows and cols as `u32`, spacing as `f32`, then
//! `rows·cols` row-major `f32` values. `DLDICT1`: magic, `m` and `k` as
//! `u32`, then `m·k·k` atom-major `f32` values. Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::operators::{Dictionary, ImageGrid};

pub const GRID_MAGIC: &[u8; 7] = b"DLGRID1";
pub const DICT_MAGIC: &[u8; 7] = b"DLDICT1";

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 7]) -> Result<()> {
    let mut b = [0u8; 7];
    read_exact(r, &mut b, "header")?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let bytes = count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf, "payload")?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

fn write_f32s<'a, W: Write>(w: &mut W, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in 32 bits")))
}

/// Writes a 2D array (image or sinogram) with its sample spacing.
pub fn write_grid<W: Write>(w: &mut W, values: &Array2<f64>, spacing: f64) -> Result<()> {
    let (rows, cols) = values.dim();
    w.write_all(GRID_MAGIC)?;
    w.write_all(&dim_u32(rows, "rows")?.to_le_bytes())?;
    w.write_all(&dim_u32(cols, "cols")?.to_le_bytes())?;
    w.write_all(&(spacing as f32).to_le_bytes())?;
    write_f32s(w, values.iter())
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<(Array2<f64>, f64)> {
    read_magic(r, GRID_MAGIC)?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "header")?;
    let spacing = f32::from_le_bytes(b) as f64;
    let data = read_f32s(r, rows * cols)?;
    let values = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((values, spacing))
}

pub fn write_dictionary<W: Write>(w: &mut W, dict: &Dictionary) -> Result<()> {
    w.write_all(DICT_MAGIC)?;
    w.write_all(&dim_u32(dict.atom_count(), "atom count")?.to_le_bytes())?;
    w.write_all(&dim_u32(dict.atom_side(), "atom side")?.to_le_bytes())?;
    write_f32s(w, dict.atoms().iter())
}

/// Reads a dictionary; atoms must be unit-norm up to single-precision rounding.
pub fn read_dictionary<R: Read>(r: &mut R) -> Result<Dictionary> {
    read_magic(r, DICT_MAGIC)?;
    let m = read_u32(r)? as usize;
    let k = read_u32(r)? as usize;
    if m == 0 || k == 0 {
        return Err(Error::Format(format!("empty dictionary header m={m} k={k}")));
    }
    let data = read_f32s(r, m * k * k)?;
    let atoms = Array3::from_shape_vec((m, k, k), data).map_err(|e| Error::Format(e.to_string()))?;
    Dictionary::new(atoms)
}

pub fn save_grid(path: &Path, values: &Array2<f64>, spacing: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, values, spacing)?;
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<(Array2<f64>, f64)> {
    read_grid(&mut BufReader::new(File::open(path)?))
}

pub fn save_image(path: &Path, image: &ImageGrid) -> Result<()> {
    save_grid(path, image.values(), image.pixel_spacing())
}

pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let (values, spacing) = load_grid(path)?;
    ImageGrid::new(values, spacing)
}

pub fn save_dictionary(path: &Path, dict: &Dictionary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dictionary(&mut w, dict)?;
    w.flush()?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    read_dictionary(&mut BufReader::new(File::open(path)?))
}

/// Binary 16-bit PGM with `lo → 0` and `hi → 65535`, clamped outside.
pub fn write_pgm16<W: Write>(w: &mut W, values: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    let (rows, cols) = values.dim();
    write!(w, "P5\n{cols} {rows}\n65535\n")?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in values.iter() {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        let level = if t.is_nan() { 0 } else { (t * 65535.0).round() as u16 };
        w.write_all(&level.to_be_bytes())?;
    }
    Ok(())
}

/// PGM export spanning the array's own min and max.
pub fn save_pgm16(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm16(&mut w, values, lo, hi)?;
    w.flush()?;
    Ok(())
}
