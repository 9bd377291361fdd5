//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json   spec, bank, bank hash, per-split labels and placements
//! <dir>/train.bin       "LTCL" | version u16 | ndim u16 | dims u64… | f32 LE data
//! <dir>/test.bin
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, MotifPlacement, PatternBank, SynthDataset, SynthImage};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTCL";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub file: String,
    pub labels: Vec<usize>,
    pub placements: Vec<Vec<MotifPlacement>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub bank_hash: String,
    pub bank: PatternBank,
    pub centroid_accuracy: f64,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

/// Write `shape` + `data` (narrowed to f32) in the LTCL tensor format.
pub fn write_tensor_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::ShapeMismatch {
            op: "write_tensor_file",
            left: shape.to_vec(),
            right: vec![data.len()],
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u16).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic {magic:?}", path.display())));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported LTCL version {version}")));
    }
    r.read_exact(&mut b2)?;
    let ndim = u16::from_le_bytes(b2) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((shape, data))
}

fn split_manifest(images: &[SynthImage], file: &str) -> SplitManifest {
    SplitManifest {
        file: file.to_string(),
        labels: images.iter().map(|i| i.label).collect(),
        placements: images.iter().map(|i| i.placements.clone()).collect(),
    }
}

fn write_split(dir: &Path, file: &str, images: &[SynthImage], spec: &DatasetSpec) -> Result<()> {
    let shape = [images.len(), spec.channels, spec.image_size, spec.image_size];
    let data: Vec<f64> = images.iter().flat_map(|i| i.pixels.iter().copied()).collect();
    write_tensor_file(&dir.join(file), &shape, &data)
}

pub fn save_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        spec: ds.spec.clone(),
        bank_hash: ds.bank.hash(),
        bank: ds.bank.clone(),
        centroid_accuracy: ds.centroid_accuracy,
        train: split_manifest(&ds.train, "train.bin"),
        test: split_manifest(&ds.test, "test.bin"),
    };
    write_split(dir, "train.bin", &ds.train, &ds.spec)?;
    write_split(dir, "test.bin", &ds.test, &ds.spec)?;
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

fn read_split(dir: &Path, split: &SplitManifest, spec: &DatasetSpec) -> Result<Vec<SynthImage>> {
    let (shape, data) = read_tensor_file(&dir.join(&split.file))?;
    let expect = vec![split.labels.len(), spec.channels, spec.image_size, spec.image_size];
    if shape != expect {
        return Err(Error::ShapeMismatch {
            op: "load_dataset",
            left: shape,
            right: expect,
        });
    }
    if split.placements.len() != split.labels.len() {
        return Err(Error::Format("placement list length differs from labels".into()));
    }
    let per = spec.channels * spec.image_size * spec.image_size;
    Ok(data
        .chunks_exact(per.max(1))
        .zip(&split.labels)
        .zip(&split.placements)
        .map(|((px, &label), pl)| SynthImage {
            pixels: px.to_vec(),
            channels: spec.channels,
            size: spec.image_size,
            label,
            placements: pl.clone(),
        })
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    let f = BufReader::new(File::open(dir.join("manifest.json"))?);
    let m: Manifest = serde_json::from_reader(f)?;
    m.spec.validate()?;
    if m.bank.hash() != m.bank_hash {
        return Err(Error::Format("bank hash does not match bank contents".into()));
    }
    let train = read_split(dir, &m.train, &m.spec)?;
    let test = read_split(dir, &m.test, &m.spec)?;
    Ok(SynthDataset {
        spec: m.spec,
        bank: m.bank,
        train,
        test,
        centroid_accuracy: m.centroid_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_pattern_bank, generate_dataset};

    #[test]
    fn dataset_round_trip_is_exact() {
        let spec = DatasetSpec::exponential(4, 12, 4.0, 16, 3, 3, 5).unwrap();
        let bank = build_pattern_bank(8, 4, 2, 5).unwrap();
        let ds = generate_dataset(&spec, &bank).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bytes = std::fs::read(dir.path().join("train.bin")).unwrap();
        assert_eq!(&bytes[..4], b"LTCL");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor_file(&p, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor_file(&p), Err(Error::Format(_))));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor_file(&p), Err(Error::Format(_))));
    }
}
