//! Checkpoint file: `QCCKPT01`, a u32 format version, then tagged sections
//! (`u32 tag`, `u64 byte length`, payload). Readers skip unknown tags.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::config::AutoencoderConfig;
use super::model::Autoencoder;
use crate::autodiff::AdamState;
use crate::binio::{Reader, Writer};
use crate::cache::MapCache;
use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QCCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONFIG: u32 = 1;
const TAG_MESH: u32 = 2;
const TAG_CHANNELS: u32 = 3;
const TAG_PARAMS: u32 = 4;
const TAG_OPTIMIZER: u32 = 5;
const TAG_STEP: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical `key = value` text of the resolved configuration.
    pub config_text: String,
    pub mesh: Mesh,
    pub channels: usize,
    pub params: Vec<Vec<f64>>,
    pub optimizer: Option<AdamState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Autoencoder, optimizer: Option<&AdamState>, step: u64) -> Self {
        Checkpoint {
            config_text: model.config().to_run().to_text(),
            mesh: (**model.mesh()).clone(),
            channels: model.channels(),
            params: model.param_vectors(),
            optimizer: optimizer.cloned(),
            step,
        }
    }

    pub fn config(&self) -> Result<AutoencoderConfig> {
        AutoencoderConfig::from_run(&RunConfig::parse(&self.config_text)?, &self.mesh)
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn to_model(&self, cache: Option<&MapCache>) -> Result<Autoencoder> {
        let cfg = self.config()?;
        let mut model = Autoencoder::build(&cfg, Arc::new(self.mesh.clone()), self.channels, cache)?;
        model.set_param_vectors(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let section = |w: &mut Writer, tag: u32, payload: Vec<u8>| {
            w.u32(tag);
            w.u64(payload.len() as u64);
            w.bytes(&payload);
        };
        section(&mut w, TAG_CONFIG, self.config_text.as_bytes().to_vec());
        section(&mut w, TAG_MESH, self.mesh.to_bytes());
        let mut p = Writer::bare();
        p.u32(self.channels as u32);
        section(&mut w, TAG_CHANNELS, p.finish());
        section(&mut w, TAG_PARAMS, vectors(&self.params));
        if let Some(opt) = &self.optimizer {
            let mut p = Writer::bare();
            p.u64(opt.step_count());
            for x in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                p.f64(x);
            }
            let mut payload = p.finish();
            payload.extend(vectors(opt.first_moments()));
            payload.extend(vectors(opt.second_moments()));
            section(&mut w, TAG_OPTIMIZER, payload);
        }
        let mut p = Writer::bare();
        p.u64(self.step);
        section(&mut w, TAG_STEP, p.finish());
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, CHECKPOINT_MAGIC, "checkpoint")?;
        let version = r.u32()?;
        ensure!(
            version == CHECKPOINT_VERSION,
            Format,
            "checkpoint: unsupported version {version}"
        );
        let mut config_text = None;
        let mut mesh = None;
        let mut channels = None;
        let mut params = None;
        let mut optimizer = None;
        let mut step = 0;
        while !r.is_empty() {
            let tag = r.u32()?;
            let len = r.len_u64()?;
            let payload = r.take(len)?;
            let mut p = Reader::bare(payload, "checkpoint section");
            match tag {
                TAG_CONFIG => {
                    config_text = Some(
                        String::from_utf8(payload.to_vec())
                            .map_err(|_| Error::Format("checkpoint: config is not UTF-8".into()))?,
                    )
                }
                TAG_MESH => mesh = Some(Mesh::from_bytes(payload)?),
                TAG_CHANNELS => {
                    channels = Some(p.u32()? as usize);
                    p.expect_end()?;
                }
                TAG_PARAMS => {
                    params = Some(read_vectors(&mut p)?);
                    p.expect_end()?;
                }
                TAG_OPTIMIZER => {
                    let s = p.u64()?;
                    let (lr, b1, b2, eps) = (p.f64()?, p.f64()?, p.f64()?, p.f64()?);
                    let m = read_vectors(&mut p)?;
                    let v = read_vectors(&mut p)?;
                    p.expect_end()?;
                    optimizer = Some(AdamState::from_parts(lr, b1, b2, eps, s, m, v)?);
                }
                TAG_STEP => {
                    step = p.u64()?;
                    p.expect_end()?;
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::Format(format!("checkpoint: missing {what} section"));
        Ok(Checkpoint {
            config_text: config_text.ok_or_else(|| missing("config"))?,
            mesh: mesh.ok_or_else(|| missing("mesh"))?,
            channels: channels.ok_or_else(|| missing("channels"))?,
            params: params.ok_or_else(|| missing("parameter"))?,
            optimizer,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn vectors(vs: &[Vec<f64>]) -> Vec<u8> {
    let mut w = Writer::bare();
    w.u64(vs.len() as u64);
    for v in vs {
        w.u64(v.len() as u64);
        w.f64s(v);
    }
    w.finish()
}

fn read_vectors(r: &mut Reader) -> Result<Vec<Vec<f64>>> {
    let n = r.len_u64()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.len_u64()?;
        out.push(r.f64s(len)?);
    }
    Ok(out)
}
