//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SRNCKPT1"  u32 version  u32 stage
//! u32 len, model config as TOML
//! u32 param count
//! per param: u32 len, name | u32 len, group | u32 ndim, u32 dims.. | f32 data..
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::{ParamGroup, ParamStore};
use crate::model::{ModelConfig, SrnModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SRNCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Last completed training stage, 0 for an untrained model.
    pub stage: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &SrnModel, stage: u32) -> Self {
        Checkpoint { stage, config: model.config.clone(), params: model.params.clone() }
    }

    pub fn into_model(self) -> Result<SrnModel> {
        SrnModel::with_params(self.config, self.params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u32::<LE>(self.stage)?;
        write_str(&mut w, &self.config.to_toml())?;
        w.write_u32::<LE>(self.params.len() as u32)?;
        for (_, p) in self.params.iter() {
            write_str(&mut w, &p.name)?;
            write_str(&mut w, p.group.name())?;
            w.write_u32::<LE>(p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_u32::<LE>(d as u32)?;
            }
            for &v in p.value.data() {
                w.write_f32::<LE>(v as f32)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Data("checkpoint truncated in header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let stage = r.read_u32::<LE>()?;
        let config = ModelConfig::from_toml(&read_str(&mut r)?)?;
        let count = r.read_u32::<LE>()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let group_name = read_str(&mut r)?;
            let group = ParamGroup::from_name(&group_name)
                .ok_or_else(|| Error::Data(format!("unknown parameter group {group_name:?}")))?;
            let ndim = r.read_u32::<LE>()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Data(format!("{name}: implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LE>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LE>(&mut data)
                .map_err(|_| Error::Data(format!("checkpoint truncated in {name}")))?;
            let tensor = Tensor::new(&shape, data.into_iter().map(f64::from).collect())
                .map_err(|e| Error::Data(format!("{name}: {e}")))?;
            params.add(&name, group, tensor)?;
        }
        Ok(Checkpoint { stage, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Data(format!("string of {len} bytes in checkpoint")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
}
