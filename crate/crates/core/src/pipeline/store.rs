//! On-disk latent stores: the `(ŷ, σ̂)` of every image of a split, ready
//! for classifier training without touching the codec again.
//!
//! Layout, little-endian: `"LVST"`, version `u8`, quality `u8`, class count
//! `u16` followed by each class name (`u16` length + UTF-8), record count
//! `u32`, then the records. A record is class id `u16`, source id (`u16`
//! length + UTF-8), shape `3 × u16`, stream bytes `u32`, source pixels
//! `u32`, `ŷ` as `i16` values and `σ̂` as `f32` values.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use latentvision_nn::Tensor;

use crate::codec::LatentCode;
use crate::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"LVST";
pub const STORE_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub class_id: usize,
    /// Path of the source image relative to the dataset root.
    pub source_id: String,
    pub shape: [usize; 3],
    pub y_hat: Vec<i16>,
    pub sigma_hat: Vec<f32>,
    /// Size of the compressed stream.
    pub stream_bytes: u32,
    /// Pixels of the source image before padding.
    pub pixels: u32,
}

impl LatentRecord {
    pub fn from_code(
        code: &LatentCode,
        class_id: usize,
        source_id: String,
        stream_bytes: usize,
        pixels: usize,
    ) -> Result<Self> {
        let y_hat = code
            .y_hat
            .iter()
            .map(|&v| i16::try_from(v).map_err(|_| Error::Format(format!("symbol {v} does not fit in i16"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentRecord {
            class_id,
            source_id,
            shape: code.shape,
            y_hat,
            sigma_hat: code.sigma_hat.iter().map(|&s| s as f32).collect(),
            stream_bytes: stream_bytes as u32,
            pixels: pixels as u32,
        })
    }

    pub fn y_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.y_hat.iter().map(|&v| v as f64).collect())
    }

    pub fn sigma_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.sigma_hat.iter().map(|&v| v as f64).collect())
    }

    pub fn bpp(&self) -> f64 {
        8.0 * self.stream_bytes as f64 / self.pixels as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore {
    pub quality_index: u8,
    pub classes: Vec<String>,
    pub records: Vec<LatentRecord>,
}

impl LatentStore {
    pub fn new(quality_index: u8, classes: Vec<String>) -> Self {
        LatentStore {
            quality_index,
            classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Channel count shared by all records.
    pub fn latent_channels(&self) -> Option<usize> {
        self.records.first().map(|r| r.shape[0])
    }

    pub fn mean_bpp(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(LatentRecord::bpp).sum::<f64>() / self.records.len() as f64
    }

    pub fn push(&mut self, record: LatentRecord) -> Result<()> {
        if record.class_id >= self.classes.len() {
            return Err(Error::Dataset(format!("class id {} out of range", record.class_id)));
        }
        let n: usize = record.shape.iter().product();
        if record.y_hat.len() != n || record.sigma_hat.len() != n {
            return Err(Error::Shape(format!(
                "record data does not match shape {:?}",
                record.shape
            )));
        }
        if let Some(c) = self.latent_channels() {
            if record.shape[0] != c {
                return Err(Error::Shape(format!(
                    "record has {} channels, store has {c}",
                    record.shape[0]
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(STORE_MAGIC)?;
        w.write_all(&[STORE_VERSION, self.quality_index])?;
        write_u16(&mut w, self.classes.len())?;
        for c in &self.classes {
            write_str(&mut w, c)?;
        }
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            write_u16(&mut w, r.class_id)?;
            write_str(&mut w, &r.source_id)?;
            for &d in &r.shape {
                write_u16(&mut w, d)?;
            }
            w.write_all(&r.stream_bytes.to_le_bytes())?;
            w.write_all(&r.pixels.to_le_bytes())?;
            for &v in &r.y_hat {
                w.write_all(&v.to_le_bytes())?;
            }
            for &v in &r.sigma_hat {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("not a latent store".into()));
        }
        let mut vq = [0u8; 2];
        read_exact(&mut r, &mut vq)?;
        if vq[0] != STORE_VERSION {
            return Err(Error::Format(format!("unsupported latent store version {}", vq[0])));
        }
        let n_classes = read_u16(&mut r)?;
        let classes = (0..n_classes).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut store = LatentStore::new(vq[1], classes);
        let count = read_u32(&mut r)?;
        for _ in 0..count {
            let class_id = read_u16(&mut r)? as usize;
            let source_id = read_str(&mut r)?;
            let shape = [
                read_u16(&mut r)? as usize,
                read_u16(&mut r)? as usize,
                read_u16(&mut r)? as usize,
            ];
            let stream_bytes = read_u32(&mut r)?;
            let pixels = read_u32(&mut r)?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 2];
            read_exact(&mut r, &mut buf)?;
            let y_hat = buf.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
            let mut buf = vec![0u8; n * 4];
            read_exact(&mut r, &mut buf)?;
            let sigma_hat = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.push(LatentRecord {
                class_id,
                source_id,
                shape,
                y_hat,
                sigma_hat,
                stream_bytes,
                pixels,
            })?;
        }
        if r.read(&mut [0u8])? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Dataset(format!("cannot open latent store {}: {e}", path.display())))?;
        Self::read_from(f)
    }
}

fn write_u16<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u16")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u16(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated latent store".into()),
        _ => e.into(),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u16(r)? as usize;
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid UTF-8 in latent store".into()))
}
