use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModifierConfig;
use crate::codec::{IMG_DIM, LATENT_DIM, ROI_DIM, TEXT_DIM};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BRPL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrices get weight decay; vectors (biases, norm gains) do not.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Offsets of a `(out x in)` weight and its bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

/// Typed view of where every tensor lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Arch {
    pub width: usize,
    pub heads: usize,
    pub proj_brep: Lin,
    pub proj_roi: Lin,
    pub proj_img: Lin,
    pub proj_box: Lin,
    pub proj_text: Lin,
    pub proj_img_tgt: Lin,
    pub proj_brep_tgt: Lin,
    pub proj_out: Lin,
    pub enc: Vec<EncLayer>,
    pub enc_norm: Norm,
    pub dec: Vec<DecLayer>,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        self.total += shape.iter().product::<usize>();
        self.tensors.push(TensorInfo { name, offset, shape });
        offset
    }

    fn lin(&mut self, name: &str, n_in: usize, n_out: usize) -> Lin {
        Lin {
            w: self.tensor(format!("{name}.weight"), vec![n_out, n_in]),
            b: self.tensor(format!("{name}.bias"), vec![n_out]),
            n_in,
            n_out,
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.gain"), vec![n]),
            b: self.tensor(format!("{name}.bias"), vec![n]),
            n,
        }
    }

    fn attn(&mut self, name: &str, w: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), w, w),
            k: self.lin(&format!("{name}.k"), w, w),
            v: self.lin(&format!("{name}.v"), w, w),
            o: self.lin(&format!("{name}.o"), w, w),
        }
    }
}

impl Arch {
    pub fn new(config: &ModifierConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let proj_brep = b.lin("proj_brep", LATENT_DIM, w);
        let proj_roi = b.lin("proj_roi", ROI_DIM, w);
        let proj_img = b.lin("proj_img", IMG_DIM, w);
        let proj_box = b.lin("proj_box", 4, w);
        let proj_text = b.lin("proj_text", TEXT_DIM, w);
        let proj_img_tgt = b.lin("proj_img_tgt", IMG_DIM, w);
        let proj_brep_tgt = b.lin("proj_brep_tgt", LATENT_DIM, w);
        let proj_out = b.lin("proj_out", w, LATENT_DIM);
        let enc = (0..config.encoder_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLayer {
                    ln1: b.norm(&format!("{p}.norm1"), w),
                    attn: b.attn(&format!("{p}.attn"), w),
                    ln2: b.norm(&format!("{p}.norm2"), w),
                    ff1: b.lin(&format!("{p}.ff1"), w, 4 * w),
                    ff2: b.lin(&format!("{p}.ff2"), 4 * w, w),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.norm", w);
        let dec = (0..config.decoder_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecLayer {
                    ln1: b.norm(&format!("{p}.norm1"), w),
                    self_attn: b.attn(&format!("{p}.self_attn"), w),
                    ln2: b.norm(&format!("{p}.norm2"), w),
                    cross: b.attn(&format!("{p}.cross_attn"), w),
                    ln3: b.norm(&format!("{p}.norm3"), w),
                    ff1: b.lin(&format!("{p}.ff1"), w, 4 * w),
                    ff2: b.lin(&format!("{p}.ff2"), 4 * w, w),
                }
            })
            .collect();
        Ok(Self {
            width: w,
            heads: config.heads,
            proj_brep,
            proj_roi,
            proj_img,
            proj_box,
            proj_text,
            proj_img_tgt,
            proj_brep_tgt,
            proj_out,
            enc,
            enc_norm,
            dec,
            tensors: b.tensors,
            total: b.total,
        })
    }
}

/// All trainable weights plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifierParams {
    pub config: ModifierConfig,
    pub(crate) arch: Arch,
    pub(crate) data: Vec<f64>,
}

impl ModifierParams {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero biases, unit norm gains.
    pub fn init(config: &ModifierConfig) -> Result<Self> {
        let arch = Arch::new(config)?;
        let mut data = vec![0.0; arch.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for t in &arch.tensors {
            let slice = &mut data[t.offset..t.offset + t.len()];
            if t.is_matrix() {
                let bound = 1.0 / (t.shape[1] as f64).sqrt();
                slice.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            } else if t.name.ends_with(".gain") {
                slice.fill(1.0);
            }
        }
        Ok(Self { config: config.clone(), arch, data })
    }

    /// Same shapes, every value zero.
    pub fn zeros(config: &ModifierConfig) -> Result<Self> {
        let arch = Arch::new(config)?;
        Ok(Self {
            data: vec![0.0; arch.total],
            config: config.clone(),
            arch,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.arch.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let t = self.arch.tensors.iter().find(|t| t.name == name)?;
        Some(&self.data[t.offset..t.offset + t.len()])
    }

    pub fn head_dim(&self) -> usize {
        self.config.width / self.config.heads
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() * 8 + 4096);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.arch.tensors.len() as u32).to_le_bytes());
        for t in &self.arch.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &self.data[t.offset..t.offset + t.len()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&out)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to memory");
        out
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = cur.u32()? as usize;
        let config: ModifierConfig =
            serde_json::from_slice(cur.take(n)?).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let mut params = Self::zeros(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let by_name: HashMap<&str, &TensorInfo> = params.arch.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let count = cur.u32()? as usize;
        if count != by_name.len() {
            return Err(Error::Checkpoint(format!("{count} tensors, expected {}", by_name.len())));
        }
        let mut seen = std::collections::HashSet::new();
        let mut loaded = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::Checkpoint("tensor name".into()))?.to_owned();
            let dims = cur.u32()? as usize;
            let shape = (0..dims).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let info = by_name.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if info.shape != shape || !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {shape:?}")));
            }
            let values: Vec<f64> = cur
                .take(info.len() * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push((info.offset, values));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        for (offset, values) in loaded {
            params.data[offset..offset + values.len()].copy_from_slice(&values);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint".into()));
        }
        Ok(params)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
