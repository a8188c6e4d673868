//! Dataset files. Byte layout, all integers and reals little-endian:
//!
//! ```text
//! u32             header length H
//! H bytes         UTF-8 JSON header: {"seed","count","image_size","k","max_objects"}
//! per sample, in index order:
//!   image_size^2 * 3 x f32    pixels, row-major height x width x RGB
//!   u32                       object count
//!   per object: u32 class, then f64 cx, cy, w, h
//! ```
//!
//! Pixels are stored at exactly the generator's f32 precision, so a write
//! followed by a read reproduces samples bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxCyWH;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::scenes::{SceneConfig, SceneSample};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub count: u64,
    pub image_size: u32,
    pub k: u32,
    pub max_objects: u32,
}

impl DatasetHeader {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size as usize,
            k: self.k as usize,
            max_objects: self.max_objects as usize,
        }
    }
}

pub fn write_dataset(
    path: &Path,
    seed: u64,
    cfg: &SceneConfig,
    samples: &[SceneSample],
) -> Result<()> {
    let header = DatasetHeader {
        seed,
        count: samples.len() as u64,
        image_size: cfg.image_size as u32,
        k: cfg.k as u32,
        max_objects: cfg.max_objects as u32,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for s in samples {
        let want = cfg.image_size * cfg.image_size * 3;
        if s.image.len() != want {
            return Err(Error::Contract(format!(
                "sample holds {} pixels, header implies {want}",
                s.image.len()
            )));
        }
        for &px in &s.image {
            w.write_all(&px.to_le_bytes())?;
        }
        w.write_all(&(s.objects.len() as u32).to_le_bytes())?;
        for &(class, b) in &s.objects {
            w.write_all(&(class as u32).to_le_bytes())?;
            for v in b.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("dataset file truncated reading {what}")))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len4 = [0u8; 4];
    read_exact_or_format(&mut r, &mut len4, "header length")?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbuf = vec![0u8; hlen];
    read_exact_or_format(&mut r, &mut hbuf, "header")?;
    let header: DatasetHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;

    let pixels = header.image_size as usize * header.image_size as usize * 3;
    let mut samples = Vec::with_capacity(header.count as usize);
    let mut pixbuf = vec![0u8; pixels * 4];
    for index in 0..header.count {
        read_exact_or_format(&mut r, &mut pixbuf, "image")?;
        let image: Vec<f32> = pixbuf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        read_exact_or_format(&mut r, &mut len4, "object count")?;
        let n_obj = u32::from_le_bytes(len4) as usize;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            read_exact_or_format(&mut r, &mut len4, "object class")?;
            let class = u32::from_le_bytes(len4) as usize;
            let mut coords = [0f64; 4];
            let mut b8 = [0u8; 8];
            for c in coords.iter_mut() {
                read_exact_or_format(&mut r, &mut b8, "object box")?;
                *c = f64::from_le_bytes(b8);
            }
            objects.push((class, BoxCxCyWH::from_slice(&coords)));
        }
        samples.push(SceneSample {
            image,
            objects,
            seed: derive_seed(header.seed, index),
        });
    }
    let mut one = [0u8; 1];
    if r.read(&mut one)? != 0 {
        return Err(Error::Format("trailing bytes after last sample".into()));
    }
    Ok((header, samples))
}
