//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MPCC" | version u32 | iteration u64 | seed u64 | data_dim u64
//! config: len u64 + UTF-8 text
//! sections: count u32, then per section
//!   name: len u32 + UTF-8 | tensors: count u32, then per tensor
//!     name: len u32 + UTF-8 | ndim u32 | dims u64 x ndim | values f64 x prod(dims)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{ParameterStore, Tensor};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::trainer::Model;

pub const MAGIC: &[u8; 4] = b"MPCC";
pub const FORMAT_VERSION: u32 = 1;

const PARAM_SECTIONS: [(&str, &str); 5] = [
    ("generator", "gen."),
    ("discriminator", "disc."),
    ("encoder", "enc."),
    ("trunk", "trunk."),
    ("prior", "prior."),
];
const ADAM_SECTIONS: [&str; 4] = ["adam.d", "adam.g", "adam.e", "adam.p"];
const PHI_NAME: &str = "prior.phi";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownParameter(format!("{}/{name}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub data_dim: u64,
    pub config_text: String,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownParameter(format!("section {name}")))
    }

    pub fn from_model(model: &Model) -> Result<Self> {
        let store = model.store();
        let mut sections = Vec::new();
        for (section, prefix) in PARAM_SECTIONS {
            let mut tensors: Vec<(String, Tensor)> = store
                .iter()
                .filter(|(_, p)| p.name.starts_with(prefix))
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect();
            if section == "prior" {
                let phi = model.prior().phi().to_vec();
                tensors.push((PHI_NAME.into(), Tensor::new(vec![phi.len()], phi)?));
            }
            sections.push(Section {
                name: section.into(),
                tensors,
            });
        }
        let ema = model.ema();
        sections.push(Section {
            name: "ema".into(),
            tensors: ema
                .params()
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    let shape = store.value(id).shape().to_vec();
                    Ok((store.get(id).name.clone(), Tensor::new(shape, ema.values(i).to_vec())?))
                })
                .collect::<Result<_>>()?,
        });
        for (name, opt) in ADAM_SECTIONS.iter().zip(model.optimizers()) {
            let mut tensors = vec![("t".to_string(), Tensor::new(vec![1], vec![opt.t as f64])?)];
            for (i, &id) in opt.params().iter().enumerate() {
                let (m, v) = opt.moment_tensors(store, i)?;
                let pname = &store.get(id).name;
                tensors.push((format!("{pname}.m"), m));
                tensors.push((format!("{pname}.v"), v));
            }
            sections.push(Section {
                name: (*name).into(),
                tensors,
            });
        }
        let l = model.last_losses();
        sections.push(Section {
            name: "state".into(),
            tensors: vec![(
                "last_losses".into(),
                Tensor::new(vec![5], vec![l.d_loss, l.g_adv_loss, l.enc_nll, l.cluster_ce, l.prior_reg])?,
            )],
        });
        Ok(Self {
            iteration: model.iteration(),
            seed: model.config().seed,
            data_dim: model.data_dim() as u64,
            config_text: model.config().to_text(),
            sections,
        })
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut config = TrainConfig::parse_unchecked(&self.config_text)?;
        config.seed = self.seed;
        let mut store = ParameterStore::new();
        for (section, _) in PARAM_SECTIONS {
            for (name, t) in &self.section(section)?.tensors {
                if name != PHI_NAME {
                    store.add(name.clone(), t.clone())?;
                }
            }
        }
        let mut model = Model::from_store(config, self.data_dim as usize, store)?;
        let ema_section = self.section("ema")?;
        let names: Vec<String> = model
            .ema()
            .params()
            .iter()
            .map(|&id| model.store().get(id).name.clone())
            .collect();
        for (i, name) in names.iter().enumerate() {
            model.ema_mut().set_values(i, ema_section.get(name)?.data().to_vec())?;
        }
        let param_names: Vec<Vec<String>> = model
            .optimizers()
            .iter()
            .map(|o| o.params().iter().map(|&id| model.store().get(id).name.clone()).collect())
            .collect();
        for ((section, opt), names) in ADAM_SECTIONS.iter().zip(model.optimizers_mut()).zip(&param_names) {
            let s = self.section(section)?;
            opt.t = s.get("t")?.item() as u64;
            for (i, name) in names.iter().enumerate() {
                let m = s.get(&format!("{name}.m"))?.data().to_vec();
                let v = s.get(&format!("{name}.v"))?.data().to_vec();
                opt.set_moments(i, m, v)?;
            }
        }
        let l = self.section("state")?.get("last_losses")?.data().to_vec();
        if l.len() != 5 {
            return Err(Error::InvalidArgument("last_losses must hold 5 values".into()));
        }
        model.last_losses = LossBreakdown {
            d_loss: l[0],
            g_adv_loss: l[1],
            enc_nll: l[2],
            cluster_ce: l[3],
            prior_reg: l[4],
        };
        model.set_iteration(self.iteration);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.iteration.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend(self.data_dim.to_le_bytes());
        out.extend((self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend((self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend((s.tensors.len() as u32).to_le_bytes());
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                out.extend((t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend((d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses `bytes`; `path` only labels error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let data_dim = r.u64()?;
        let config_len = r.u64()? as usize;
        let config_text = r.string(config_len)?;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let n_tensors = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n_tensors {
                let tlen = r.u32()? as usize;
                let tname = r.string(tlen)?;
                let ndim = r.u32()? as usize;
                let at = r.pos;
                let mut shape = Vec::with_capacity(ndim.min(16));
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let count = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| r.error(at, "tensor shape exceeds file size"))?;
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
                }
                let t = Tensor::new(shape, data).map_err(|e| r.error(at, &e.to_string()))?;
                tensors.push((tname, t));
            }
            sections.push(Section { name, tensors });
        }
        if r.remaining() != 0 {
            return Err(r.error(r.pos, "trailing bytes"));
        }
        Ok(Self {
            iteration,
            seed,
            data_dim,
            config_text,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl Reader<'_> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(self.error(self.pos, &format!("truncated: {n} bytes expected")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(len)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.error(at, "invalid UTF-8"))
    }
}
