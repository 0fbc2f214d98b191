//! MSCK1 checkpoint files.
//!
//! Layout: `"MSCK1"`, u32 version, u64 config length, UTF-8 INI text with
//! `[model]`, `[train]` and `[state]` sections, then records of
//! (u16 name length, name, u8 rank, u32 dims, f32 data), all little-endian.
//! Record names carry a `param/`, `momentum/` or `buffer/` prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{model_from_section, model_to_ini, parse_sections, train_from_section, train_to_ini};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::multistream::Model;
use crate::tensor::Tensor;

use super::optim::Sgd;
use super::{TrainConfig, TrainState, Trainer};
use crate::model_config::ModelConfig;

pub const MAGIC: &[u8; 5] = b"MSCK1";
pub const VERSION: u32 = 1;

type Named = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub params: Named,
    pub momentum: Named,
    pub buffers: Named,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("MSCK1", reason)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn state_to_ini(s: &TrainState) -> String {
    format!(
        "[state]\nstep = {}\nepoch = {}\nepoch_loss_sum = {}\nepoch_frames = {}\n",
        s.step, s.epoch, s.epoch_loss_sum, s.epoch_frames
    )
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = format!(
            "{}\n{}\n{}",
            model_to_ini(&self.model),
            train_to_ini(&self.train),
            state_to_ini(&self.state)
        );
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        let groups = [
            ("param/", &self.params),
            ("momentum/", &self.momentum),
            ("buffer/", &self.buffers),
        ];
        for (prefix, group) in groups {
            for (name, t) in group.iter() {
                let full = format!("{prefix}{name}");
                let len = u16::try_from(full.len()).map_err(|_| bad(format!("name too long: {full}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                let rank = u8::try_from(t.rank()).map_err(|_| bad("rank exceeds 255"))?;
                out.push(rank);
                for &d in t.shape() {
                    let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
                    out.extend_from_slice(&d.to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("missing MSCK1 magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| bad("config length overflows"))?;
        let blob = std::str::from_utf8(r.take(len)?).map_err(|_| bad("config blob is not UTF-8"))?;
        let sections = parse_sections(blob)?;
        let section = |n: &str| sections.get(n).ok_or_else(|| bad(format!("config blob lacks [{n}]")));
        let model = model_from_section(section("model")?)?;
        let train = train_from_section(section("train")?)?;
        let st = section("state")?;
        st.check_keys(&["step", "epoch", "epoch_loss_sum", "epoch_frames"])?;
        let need =
            |k: &str| -> Result<String> { Ok(st.raw(k).ok_or_else(|| bad(format!("[state] lacks {k}")))?.to_string()) };
        let num = |k: &str| -> Result<f64> {
            need(k)?
                .parse()
                .map_err(|_| bad(format!("[state] {k} is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            need(k)?
                .parse()
                .map_err(|_| bad(format!("[state] {k} is not an integer")))
        };
        let state = TrainState {
            step: int("step")?,
            epoch: int("epoch")? as usize,
            epoch_loss_sum: num("epoch_loss_sum")?,
            epoch_frames: int("epoch_frames")?,
        };
        let (mut params, mut momentum, mut buffers) = (Vec::new(), Vec::new(), Vec::new());
        while !r.done() {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| bad("record name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(count.checked_mul(4).ok_or_else(|| bad("record size overflows"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(&shape, data)?;
            let (group, rest) = if let Some(rest) = name.strip_prefix("param/") {
                (&mut params, rest)
            } else if let Some(rest) = name.strip_prefix("momentum/") {
                (&mut momentum, rest)
            } else if let Some(rest) = name.strip_prefix("buffer/") {
                (&mut buffers, rest)
            } else {
                return Err(bad(format!("record `{name}` has no known prefix")));
            };
            group.push((rest.to_string(), t));
        }
        Ok(Checkpoint {
            model,
            train,
            state,
            params,
            momentum,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Model with the stored parameters and buffers.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.model.clone())?;
        let mut params: BTreeMap<&str, &Tensor<f32>> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buffers: BTreeMap<&str, &Tensor<f32>> = self.buffers.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        model.visit_params_mut(&mut |name, p| match params.remove(name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(_) => {
                err = err
                    .take()
                    .or(Some(bad(format!("parameter `{name}` has the wrong shape"))))
            }
            None => err = err.take().or(Some(bad(format!("parameter `{name}` is missing")))),
        });
        model.visit_buffers_mut(&mut |name, b| match buffers.remove(name) {
            Some(t) if t.shape() == b.shape() => *b = t.clone(),
            Some(_) => err = err.take().or(Some(bad(format!("buffer `{name}` has the wrong shape")))),
            None => err = err.take().or(Some(bad(format!("buffer `{name}` is missing")))),
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(name) = params.keys().chain(buffers.keys()).next() {
            return Err(bad(format!("record `{name}` does not belong to the model")));
        }
        Ok(model)
    }

    pub fn from_model(model: &Model<f32>, train: TrainConfig) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |n, p| params.push((n.to_string(), p.value.clone())));
        let mut buffers = Vec::new();
        model.visit_buffers(&mut |n, b| buffers.push((n.to_string(), b.clone())));
        Checkpoint {
            model: model.config().clone(),
            train,
            state: TrainState::default(),
            params,
            momentum: Vec::new(),
            buffers,
        }
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state,
            momentum: self.optimizer.velocity().to_vec(),
            ..Checkpoint::from_model(&self.model, self.config.clone())
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.build_model()?;
        let mut names = Vec::new();
        model.visit_params(&mut |n, p| names.push((n.to_string(), p.value.shape().to_vec())));
        let ok = ckpt.momentum.is_empty()
            || (ckpt.momentum.len() == names.len()
                && ckpt
                    .momentum
                    .iter()
                    .zip(&names)
                    .all(|((a, t), (b, s))| a == b && t.shape() == s.as_slice()));
        if !ok {
            return Err(bad("momentum records do not match the model parameters"));
        }
        let mut opt = Sgd::new(ckpt.train.momentum);
        opt.set_velocity(ckpt.momentum.clone());
        Trainer::restore(model, ckpt.train.clone(), opt, ckpt.state)
    }
}
