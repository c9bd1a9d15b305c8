//! In-memory datasets and their binary container.
//!
//! ```text
//! b"SRNDATA1"  u32 n  u32 h  u32 w  u32 c  u32 labels
//! per sample: f32 image (h*w*c) | u8 split | target bits | mask bits
//!             | f32 (row, col) per label, NaN when absent
//! ```
//!
//! Bit vectors are packed little-endian into `ceil(labels / 8)` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SRNDATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_name(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Tensor,
    pub targets: Vec<bool>,
    /// `false` marks an unspecified label.
    pub mask: Vec<bool>,
    /// Glyph centre `(row, col)` in pixels for every present label.
    pub centers: Vec<Option<(f64, f64)>>,
    pub split: Split,
}

impl Sample {
    pub fn target_tensor(&self) -> Tensor {
        bools_to_tensor(&self.targets)
    }

    pub fn mask_tensor(&self) -> Tensor {
        bools_to_tensor(&self.mask)
    }

    pub fn num_present(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }
}

fn bools_to_tensor(b: &[bool]) -> Tensor {
    Tensor::new(&[b.len()], b.iter().map(|&v| v as u8 as f64).collect()).expect("nonempty label vector")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    pub num_labels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of the samples in one split, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [self.image_h, self.image_w, self.image_c];
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != shape {
                return Err(Error::Data(format!("sample {i}: image {:?}, expected {shape:?}", s.image.shape())));
            }
            if s.targets.len() != self.num_labels || s.mask.len() != self.num_labels || s.centers.len() != self.num_labels {
                return Err(Error::Data(format!("sample {i}: label vectors must have length {}", self.num_labels)));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(MAGIC)?;
        for v in [self.samples.len(), self.image_h, self.image_w, self.image_c, self.num_labels] {
            w.write_u32::<LE>(v as u32)?;
        }
        for s in &self.samples {
            for &v in s.image.data() {
                w.write_f32::<LE>(v as f32)?;
            }
            w.write_u8(s.split.code())?;
            w.write_all(&pack_bits(&s.targets))?;
            w.write_all(&pack_bits(&s.mask))?;
            for c in &s.centers {
                let (r, q) = c.unwrap_or((f64::NAN, f64::NAN));
                w.write_f32::<LE>(r as f32)?;
                w.write_f32::<LE>(q as f32)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let truncated = |_| Error::Data("dataset file truncated".into());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a dataset file (bad magic)".into()));
        }
        let mut head = [0u32; 5];
        r.read_u32_into::<LE>(&mut head).map_err(truncated)?;
        let [n, h, w, c, labels] = head.map(|v| v as usize);
        if h == 0 || w == 0 || c == 0 || labels == 0 {
            return Err(Error::Data(format!("dataset header has a zero dimension: {head:?}")));
        }
        let nbytes = labels.div_ceil(8);
        let mut samples = Vec::with_capacity(n);
        let mut pixels = vec![0f32; h * w * c];
        let mut bits = vec![0u8; nbytes];
        for i in 0..n {
            r.read_f32_into::<LE>(&mut pixels).map_err(truncated)?;
            let image = Tensor::new(&[h, w, c], pixels.iter().map(|&v| f64::from(v)).collect())?;
            let split = Split::from_code(r.read_u8().map_err(truncated)?)
                .ok_or_else(|| Error::Data(format!("sample {i}: bad split code")))?;
            r.read_exact(&mut bits).map_err(truncated)?;
            let targets = unpack_bits(&bits, labels);
            r.read_exact(&mut bits).map_err(truncated)?;
            let mask = unpack_bits(&bits, labels);
            let mut centers = Vec::with_capacity(labels);
            for _ in 0..labels {
                let row = r.read_f32::<LE>().map_err(truncated)?;
                let col = r.read_f32::<LE>().map_err(truncated)?;
                centers.push((!row.is_nan()).then(|| (f64::from(row), f64::from(col))));
            }
            samples.push(Sample { image, targets, mask, centers, split });
        }
        Ok(Dataset { image_h: h, image_w: w, image_c: c, num_labels: labels, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (k, &b) in bits.iter().enumerate() {
        if b {
            out[k / 8] |= 1 << (k % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(split: Split, seed: usize) -> Sample {
        let targets: Vec<bool> = (0..11).map(|k| (k * 7 + seed) % 3 == 0).collect();
        Sample {
            image: Tensor::from_fn(&[4, 5, 3], |k| ((k + seed) % 9) as f64 / 8.0),
            centers: targets.iter().map(|&t| t.then_some((1.5, 2.25))).collect(),
            mask: (0..11).map(|k| k != 4).collect(),
            targets,
            split,
        }
    }

    #[test]
    fn bits_round_trip() {
        let b: Vec<bool> = (0..19).map(|k| k % 3 == 1).collect();
        assert_eq!(unpack_bits(&pack_bits(&b), 19), b);
    }

    #[test]
    fn container_round_trip() {
        let ds = Dataset {
            image_h: 4,
            image_w: 5,
            image_c: 3,
            num_labels: 11,
            samples: vec![sample(Split::Train, 0), sample(Split::Val, 1), sample(Split::Test, 2)],
        };
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.indices(Split::Val), vec![1]);
        assert!(Dataset::read_from(&bytes[..bytes.len() - 1]).is_err());
        assert!(Dataset::read_from(&b"garbage!"[..]).is_err());
    }
}
