//! Checkpoint files: a 5-byte stage magic, a `u32` version, a `u32` record
//! count, then records of (`u32` name length, UTF-8 name, tensor dump). The
//! first record, `arch`, holds the integers needed to rebuild the network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::aps::{ApsConfig, ApsModel};
use super::fusion::{AblationVariant, FusionConfig, FusionModel};
use super::multitask::{MultiTaskConfig, MultiTaskModel};
use super::{ParamSet, LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

pub const VERSION: u32 = 1;
const ARCH: &str = "arch";

/// A network that can be written to and rebuilt from a checkpoint.
pub trait Checkpoint: Sized {
    const MAGIC: &'static [u8; 5];

    fn arch(&self) -> Vec<usize>;
    fn from_arch(arch: &[usize]) -> Result<Self>;
    fn param_set(&self) -> &ParamSet;
    fn param_set_mut(&mut self) -> &mut ParamSet;

    fn save(&self, path: &Path) -> Result<()> {
        let arch = self.arch();
        let arch = Tensor::new(vec![arch.len()], arch.iter().map(|&v| v as f64).collect())?;
        let mut records = vec![(ARCH, &arch)];
        records.extend(self.param_set().iter());
        write_records(path, Self::MAGIC, &records)
    }

    fn load(path: &Path) -> Result<Self> {
        let records = read_records(path, Self::MAGIC)?;
        let bad = |msg: String| Error::format(path, msg);
        let (name, arch) = records.first().ok_or_else(|| bad("empty checkpoint".into()))?;
        if name != ARCH {
            return Err(bad(format!("first record is '{name}', expected '{ARCH}'")));
        }
        let arch: Vec<usize> = arch.data().iter().map(|&v| v as usize).collect();
        let mut model = Self::from_arch(&arch).map_err(|e| bad(e.to_string()))?;
        let ps = model.param_set_mut();
        if records.len() - 1 != ps.len() {
            return Err(bad(format!("{} parameter records, network has {}", records.len() - 1, ps.len())));
        }
        for (name, t) in &records[1..] {
            let id = ps.find(name).ok_or_else(|| bad(format!("unknown parameter '{name}'")))?;
            if ps.get(id).shape() != t.shape() {
                return Err(bad(format!(
                    "parameter '{name}' has shape {:?}, network expects {:?}",
                    t.shape(),
                    ps.get(id).shape()
                )));
            }
            *ps.get_mut(id) = t.clone();
        }
        Ok(model)
    }
}

pub fn write_records(path: &Path, magic: &[u8; 5], records: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, t) in records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        w.flush()
    };
    go(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path, magic: &[u8; 5]) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::format(path, msg);
    let mut m = [0u8; 5];
    r.read_exact(&mut m).map_err(|e| bad(e.to_string()))?;
    if &m != magic {
        return Err(bad(format!(
            "magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(&mut r).map_err(bad)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r).map_err(bad)? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = read_u32(&mut r).map_err(bad)? as usize;
        if len > 4096 {
            return Err(bad(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let t = Tensor::read_from(&mut r).map_err(|e| bad(format!("record '{name}': {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last record".into()));
    }
    Ok(out)
}

fn channels(arch: &[usize]) -> Result<[usize; LEVELS]> {
    let c: [usize; LEVELS] = arch[..LEVELS].try_into().unwrap();
    if c.contains(&0) {
        return Err(Error::Config("zero channel width".into()));
    }
    Ok(c)
}

impl Checkpoint for MultiTaskModel {
    const MAGIC: &'static [u8; 5] = b"ZVOS1";

    fn arch(&self) -> Vec<usize> {
        self.config().channels.to_vec()
    }

    fn from_arch(arch: &[usize]) -> Result<Self> {
        if arch.len() != LEVELS {
            return Err(Error::Config(format!("stage-1 arch has {} entries", arch.len())));
        }
        Ok(MultiTaskModel::new(MultiTaskConfig { channels: channels(arch)? }, 0))
    }

    fn param_set(&self) -> &ParamSet {
        self.params()
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        self.params_mut()
    }
}

impl Checkpoint for FusionModel {
    const MAGIC: &'static [u8; 5] = b"ZVOS2";

    fn arch(&self) -> Vec<usize> {
        let c = self.config();
        let v = AblationVariant::ALL.iter().position(|&v| v == c.variant).unwrap();
        let mut a = c.channels.to_vec();
        a.extend([c.c_mid, v]);
        a
    }

    fn from_arch(arch: &[usize]) -> Result<Self> {
        if arch.len() != LEVELS + 2 {
            return Err(Error::Config(format!("stage-2 arch has {} entries", arch.len())));
        }
        let variant = *AblationVariant::ALL
            .get(arch[LEVELS + 1])
            .ok_or_else(|| Error::Config(format!("variant index {}", arch[LEVELS + 1])))?;
        let config = FusionConfig {
            channels: channels(arch)?,
            c_mid: arch[LEVELS],
            variant,
        };
        Ok(FusionModel::new(config, 0))
    }

    fn param_set(&self) -> &ParamSet {
        self.params()
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        self.params_mut()
    }
}

impl Checkpoint for ApsModel {
    const MAGIC: &'static [u8; 5] = b"ZVOS3";

    fn arch(&self) -> Vec<usize> {
        vec![self.config().width, self.config().blocks]
    }

    fn from_arch(arch: &[usize]) -> Result<Self> {
        match arch {
            &[width, blocks] if width > 0 => Ok(ApsModel::new(ApsConfig { width, blocks }, 0)),
            _ => Err(Error::Config(format!("bad stage-3 arch {arch:?}"))),
        }
    }

    fn param_set(&self) -> &ParamSet {
        self.params()
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        self.params_mut()
    }
}

/// The five-byte magic at the start of a checkpoint file.
pub fn peek_magic(path: &Path) -> Result<[u8; 5]> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut m = [0u8; 5];
    f.read_exact(&mut m).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(m)
}

/// Networks loaded from a set of checkpoint files, each placed by its magic.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub stage1: Option<MultiTaskModel>,
    pub stage2: Option<FusionModel>,
    pub stage3: Option<ApsModel>,
}

impl Loaded {
    pub fn from_paths(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let mut out = Loaded::default();
        for p in paths {
            let p = p.as_ref();
            let magic = peek_magic(p)?;
            let dup = || Error::Contract(format!("more than one checkpoint of kind {}", String::from_utf8_lossy(&magic)));
            match &magic {
                m if m == MultiTaskModel::MAGIC => {
                    if out.stage1.replace(MultiTaskModel::load(p)?).is_some() {
                        return Err(dup());
                    }
                }
                m if m == FusionModel::MAGIC => {
                    if out.stage2.replace(FusionModel::load(p)?).is_some() {
                        return Err(dup());
                    }
                }
                m if m == ApsModel::MAGIC => {
                    if out.stage3.replace(ApsModel::load(p)?).is_some() {
                        return Err(dup());
                    }
                }
                m => return Err(Error::format(p, format!("unknown checkpoint magic {:?}", String::from_utf8_lossy(m)))),
            }
        }
        Ok(out)
    }

    pub fn stage1(&self) -> Result<&MultiTaskModel> {
        self.stage1
            .as_ref()
            .ok_or_else(|| Error::Contract("a stage-1 checkpoint is required".into()))
    }
}
