//! Portable graymap IO and on-disk dataset layout.
//!
//! Images are 8-bit binary PGM (P5); masks use only the values {0, 255}.
//! A dataset directory holds `image_NNNN.pgm` / `mask_NNNN.pgm` pairs plus
//! a `meta.txt` sidecar of key=value lines recording the seed and the
//! generator parameters of every record.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::lattice::MaskLattice;
use crate::pipeline::data::{GenMeta, SampleRecord};

/// Writes a lattice of [0,1] values as an 8-bit PGM.
pub fn write_pgm(path: &Path, l: &MaskLattice) -> Result<()> {
    assert!(l.is_probability(), "pgm output needs values in [0,1]");
    let mut bytes = format!("P5\n{} {}\n255\n", l.width(), l.height()).into_bytes();
    bytes.extend(l.as_slice().iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads an 8-bit PGM into a lattice of values in [0,1].
pub fn read_pgm(path: &Path) -> Result<MaskLattice> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Parse { line: 0, msg: format!("{}: {msg}", path.display()) })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<MaskLattice, String> {
    let mut pos = 0usize;

    // whitespace- and comment-tolerant token scanner
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
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
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P5" {
        return Err("not a binary graymap (missing P5 magic)".into());
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace byte after maxval
    if bytes.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    let data = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(MaskLattice::from_vec(h, w, data))
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("image_{i:04}.pgm"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:04}.pgm"))
}

/// Writes records plus the metadata sidecar into `dir` (created if needed).
pub fn write_dataset(dir: &Path, records: &[SampleRecord], seed: u64, clean: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut meta = String::new();
    meta.push_str(&format!("n={}\n", records.len()));
    if let Some(first) = records.first() {
        meta.push_str(&format!("side={}\n", first.image.width()));
    }
    meta.push_str(&format!("seed={seed}\n"));
    meta.push_str(&format!("clean={clean}\n"));
    for (i, r) in records.iter().enumerate() {
        write_pgm(&image_path(dir, i), &r.image)?;
        write_pgm(&mask_path(dir, i), &r.mask)?;
        meta.push_str(&format!("record_{i}.center_x={}\n", r.meta.center.0));
        meta.push_str(&format!("record_{i}.center_y={}\n", r.meta.center.1));
        meta.push_str(&format!("record_{i}.axis_a={}\n", r.meta.axes.0));
        meta.push_str(&format!("record_{i}.axis_b={}\n", r.meta.axes.1));
        meta.push_str(&format!("record_{i}.rotation={}\n", r.meta.rotation));
        meta.push_str(&format!("record_{i}.noise_seed={}\n", r.meta.noise_seed));
    }
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path.display().to_string(), e))
}

/// Loads a dataset directory written by `write_dataset`.
pub fn read_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let meta_path = dir.join("meta.txt");
    let meta_text =
        fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let lookup = |key: &str| -> Result<&str> {
        meta_text
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("meta.txt missing key '{key}'") })
    };
    let n: usize = lookup("n")?
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "bad record count in meta.txt".into() })?;

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let image = read_pgm(&image_path(dir, i))?;
        let mask = read_pgm(&mask_path(dir, i))?;
        if !mask.is_binary() {
            return Err(Error::Parse {
                line: 0,
                msg: format!("mask_{i:04}.pgm holds values other than 0 and 255"),
            });
        }
        let field = |name: &str| -> Result<f64> {
            lookup(&format!("record_{i}.{name}"))?
                .parse()
                .map_err(|_| Error::Parse { line: 0, msg: format!("bad record_{i}.{name}") })
        };
        let meta = GenMeta {
            center: (field("center_x")?, field("center_y")?),
            axes: (field("axis_a")?, field("axis_b")?),
            rotation: field("rotation")?,
            noise_seed: lookup(&format!("record_{i}.noise_seed"))?
                .parse()
                .map_err(|_| Error::Parse { line: 0, msg: format!("bad record_{i}.noise_seed") })?,
        };
        records.push(SampleRecord { image, mask, meta });
    }
    Ok(records)
}
