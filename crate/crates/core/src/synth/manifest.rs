//! Dataset manifests and raw image files.
//!
//! A manifest is CSV with a header row, preceded by `#` comment lines that
//! carry the generator config hash and seed. Image files are a 4-byte magic,
//! `u32` rows and cols, then row-major little-endian `f32` pixels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::pipeline::{Image, Mode, Recording, Roi};

const IMAGE_MAGIC: &[u8; 4] = b"DNIM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path, relative to the manifest's directory.
    pub path: String,
    pub roi_row: f64,
    pub roi_col: f64,
    pub baseline: f64,
    pub mode: Mode,
    /// Empty for unlabeled recordings.
    pub label: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_string(&self) -> Result<String> {
        let mut out = format!("# config_hash={}\n# seed={}\n", self.config_hash, self.seed);
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)
                .map_err(|e| Error::Internal(format!("manifest write: {e}")))?;
        }
        let body = w
            .into_inner()
            .map_err(|e| Error::Internal(format!("manifest write: {e}")))?;
        if self.records.is_empty() {
            out.push_str("path,roi_row,roi_col,baseline,mode,label,split\n");
        }
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config_hash = String::new();
        let mut seed = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let kv = line.trim_start_matches('#').trim();
            if let Some(v) = kv.strip_prefix("config_hash=") {
                config_hash = v.to_string();
            } else if let Some(v) = kv.strip_prefix("seed=") {
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| Error::input("seed", format!("bad manifest seed `{v}`")))?,
                );
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let records = rdr
            .deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::data(format!("manifest record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Manifest {
            config_hash,
            seed: seed.unwrap_or(0),
            records,
        })
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    fs::write(path, m.to_string()?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}

pub fn image_bytes(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * image.data.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(image.rows as u32).to_le_bytes());
    out.extend_from_slice(&(image.cols as u32).to_le_bytes());
    for v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_image(bytes: &[u8]) -> Result<Image> {
    let mut r = ByteReader::new(bytes, "image");
    if r.take(4)? != IMAGE_MAGIC {
        return Err(r.error("not an image file (bad magic)"));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f32s(rows * cols)?;
    r.finish()?;
    Image::new(rows, cols, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, image_bytes(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_image(&bytes)
}

/// Writes images under `dir/images/` and the manifest to `dir/<split>.csv`.
pub fn write_dataset(
    dir: &Path,
    split: &str,
    recs: &[Recording],
    config_hash: &str,
    seed: u64,
) -> Result<(PathBuf, Manifest)> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let rel = format!("images/{split}_{i:05}.f32");
        write_image(&dir.join(&rel), &r.image)?;
        records.push(ManifestRecord {
            path: rel,
            roi_row: r.roi.row,
            roi_col: r.roi.col,
            baseline: r.baseline,
            mode: r.mode,
            label: r.label.clone().unwrap_or_default(),
            split: r.split.clone(),
        });
    }
    let m = Manifest {
        config_hash: config_hash.to_string(),
        seed,
        records,
    };
    let path = dir.join(format!("{split}.csv"));
    write_manifest(&path, &m)?;
    Ok((path, m))
}

/// Loads every recording of a manifest, resolving image paths next to it.
pub fn load_recordings(manifest_path: &Path) -> Result<Vec<Recording>> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    m.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let image = read_image(&base.join(&r.path))?;
            let rec = Recording {
                image,
                roi: Roi {
                    row: r.roi_row,
                    col: r.roi_col,
                },
                baseline: r.baseline,
                mode: r.mode,
                label: (!r.label.is_empty()).then(|| r.label.clone()),
                split: r.split.clone(),
            };
            rec.validate().map_err(|e| match e {
                Error::Input { field, message } => Error::Input {
                    field,
                    message: format!("record {} ({}): {message}", i + 1, r.path),
                },
                other => other,
            })?;
            Ok(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            config_hash: "abc".into(),
            seed: 42,
            records: vec![ManifestRecord {
                path: "images/a.f32".into(),
                roi_row: 12.345678901234,
                roi_col: 0.1,
                baseline: 0.5,
                mode: Mode::Tvd,
                label: "SEPT_E".into(),
                split: "train".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_string().unwrap()).unwrap(), m);
    }

    #[test]
    fn image_round_trip_and_corruption() {
        let img = Image::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]).unwrap();
        let bytes = image_bytes(&img);
        assert_eq!(parse_image(&bytes).unwrap(), img);
        assert!(parse_image(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_image(&bad).is_err());
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(4, 4, vec![0.25; 16]).unwrap();
        let rec = Recording {
            image: img,
            roi: Roi { row: 1.5, col: 2.0 },
            baseline: 0.7,
            mode: Mode::Cw,
            label: Some("AR".into()),
            split: "train".into(),
        };
        let (path, _) = write_dataset(dir.path(), "train", &[rec.clone()], "h", 1).unwrap();
        assert_eq!(load_recordings(&path).unwrap(), vec![rec]);
    }
}
