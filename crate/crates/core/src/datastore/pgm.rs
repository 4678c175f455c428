//! Importer for a directory of grayscale PGM images plus `labels.csv`.
//!
//! `labels.csv` has a header row and `file,label` records; files are read
//! in CSV order and rescaled from `[0, maxval]` to `[−0.5, 0.5]`.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::datastore::DatasetSplit;
use crate::diff::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Record {
    file: String,
    label: usize,
}

fn tokens(bytes: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    // Whitespace-separated header tokens with '#' comments, paired with the
    // offset just past each token.
    let mut pos = 0;
    std::iter::from_fn(move || {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Some((pos, &bytes[start..pos]))
    })
}

/// Parses a P2 (ASCII) or P5 (binary, 8- or 16-bit) image.
pub(crate) fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut it = tokens(bytes);
    let mut next = |what: &str| -> std::result::Result<(usize, String), String> {
        it.next()
            .map(|(p, t)| (p, String::from_utf8_lossy(t).into_owned()))
            .ok_or_else(|| format!("missing {what}"))
    };
    let (_, magic) = next("magic")?;
    let num = |s: String| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
    let width = num(next("width")?.1)?;
    let height = num(next("height")?.1)?;
    let (end, maxval) = next("maxval")?;
    let maxval = num(maxval)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let count = width * height;
    let raw: Vec<usize> = match magic.as_str() {
        "P5" => {
            let data = &bytes[(end + 1).min(bytes.len())..];
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if data.len() < need {
                return Err(format!("expected {need} pixel bytes, found {}", data.len()));
            }
            if wide {
                data[..need].chunks_exact(2).map(|c| usize::from(u16::from_be_bytes([c[0], c[1]]))).collect()
            } else {
                data[..need].iter().map(|&b| usize::from(b)).collect()
            }
        }
        "P2" => {
            let mut vals = Vec::with_capacity(count);
            for _ in 0..count {
                vals.push(num(next("pixel")?.1)?);
            }
            vals
        }
        other => return Err(format!("unsupported format {other}")),
    };
    if raw.iter().any(|&v| v > maxval) {
        return Err("pixel above maxval".into());
    }
    Ok((width, height, raw.iter().map(|&v| v as f64 / maxval as f64 - 0.5).collect()))
}

pub fn import_pgm_dir(dir: impl AsRef<Path>, num_classes: usize) -> Result<DatasetSplit<f32>> {
    let dir = dir.as_ref();
    let csv_path = dir.join("labels.csv");
    let mut reader = csv::Reader::from_path(&csv_path)
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims = None;
    for rec in reader.deserialize::<Record>() {
        let rec = rec.map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (w, h, px) = parse_pgm(&bytes).map_err(|e| Error::Domain(format!("{}: {e}", path.display())))?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::dim("pgm import", format!("{} is {h}x{w}, expected {}x{}", path.display(), d.0, d.1)))
            }
            _ => {}
        }
        data.extend(px.into_iter().map(|v| v as f32));
        labels.push(rec.label);
    }
    let (h, w) = dims.ok_or_else(|| Error::Domain(format!("{} lists no images", csv_path.display())))?;
    let images = Tensor::from_vec(Shape::new(labels.len(), 1, h, w), data)?;
    DatasetSplit::new(images, labels, num_classes, format!("pgm:{}", dir.display()), 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ascii_and_binary() {
        let (w, h, px) = parse_pgm(b"P2\n# c\n2 1\n255\n0 255\n").unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(px, vec![-0.5, 0.5]);
        let mut bin = b"P5 2 2 255\n".to_vec();
        bin.extend_from_slice(&[0, 51, 102, 255]);
        let (_, _, px) = parse_pgm(&bin).unwrap();
        assert!((px[1] - (51.0 / 255.0 - 0.5)).abs() < 1e-12);
        assert!(parse_pgm(b"P6 1 1 255\n\0\0\0").is_err());
    }

    #[test]
    fn imports_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), b"P2 2 2 255 0 0 0 0").unwrap();
        let mut bin = b"P5 2 2 255\n".to_vec();
        bin.extend_from_slice(&[255; 4]);
        fs::write(dir.path().join("b.pgm"), bin).unwrap();
        fs::write(dir.path().join("labels.csv"), "file,label\na.pgm,0\nb.pgm,1\n").unwrap();
        let split = import_pgm_dir(dir.path(), 2).unwrap();
        assert_eq!(split.labels, vec![0, 1]);
        assert_eq!(split.images.example(1), &[0.5; 4]);
    }
}
