//! Checkpoint container: named `f32` arrays with shapes, string metadata
//! and a format version, sealed by a SHA-256 trailer.
//!
//! Layout (little-endian):
//! `DVCK` | u32 version | u32 meta count | (u32 len, key, u32 len, value)* |
//! u32 array count | (u32 len, name, u32 ndim, u64 dims*, f32 values*)* |
//! 32-byte SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::align::AlignSettings;
use crate::error::{Error, Result};
use crate::flow::{FlowBackend, FlowEstimator, FlowPairing, FlowSettings};
use crate::initial::{InitialNet, InitialSettings};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::types::MaskMode;
use crate::videonet::{Ablation, Decoder, DecoderSettings, VideoNet};

pub const MAGIC: &[u8; 4] = b"DVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("checkpoint field `{key}` has bad value `{v}`")))
    }

    /// Fails unless `kind` metadata equals `expected`.
    pub fn expect_kind(&self, expected: &str) -> Result<()> {
        let k = self.meta("kind")?;
        if k != expected {
            return Err(Error::Format(format!(
                "expected a `{expected}` checkpoint, found `{k}`"
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {}", path.display())));
        }
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Git-style object hash of a byte string: SHA-256 over `blob <len>\0`
/// followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub const KIND_STAGE1: &str = "stage1";
pub const KIND_STAGE2: &str = "stage2";
pub const KIND_FLOW: &str = "flow";

/// Generator and discriminator under `net.` and `disc.` entries.
pub fn stage1_checkpoint(net: &InitialNet) -> Checkpoint {
    let mut p = ParamStore::new();
    p.merge_prefixed("net", &net.params);
    p.merge_prefixed("disc", &net.disc);
    let s = &net.settings;
    Checkpoint::new(p)
        .with_meta("kind", KIND_STAGE1)
        .with_meta("channels", s.channels)
        .with_meta("attention_channels", s.attention_channels)
        .with_meta("attention_steps", s.attention_steps)
}

pub fn stage1_from_checkpoint(c: &Checkpoint) -> Result<InitialNet> {
    c.expect_kind(KIND_STAGE1)?;
    let settings = InitialSettings {
        channels: c.meta_parse("channels")?,
        attention_channels: c.meta_parse("attention_channels")?,
        attention_steps: c.meta_parse("attention_steps")?,
    };
    let mut net = InitialNet::new(settings, 0);
    net.params = load_matching(&net.params, &c.params.extract_prefixed("net"))?;
    net.disc = load_matching(&net.disc, &c.params.extract_prefixed("disc"))?;
    Ok(net)
}

/// Checks every expected parameter is present with the expected shape.
fn load_matching(expected: &ParamStore, found: &ParamStore) -> Result<ParamStore> {
    for (k, v) in expected.iter() {
        let f = found.get(k).map_err(|_| Error::Format(format!("checkpoint lacks parameter `{k}`")))?;
        if f.shape() != v.shape() {
            return Err(Error::Format(format!(
                "parameter `{k}` has shape {:?}, model expects {:?}",
                f.shape(),
                v.shape()
            )));
        }
    }
    if found.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            found.len(),
            expected.len()
        )));
    }
    Ok(found.clone())
}

/// Alignment and decoder weights plus the structural settings of stage two.
pub fn stage2_checkpoint(net: &VideoNet) -> Checkpoint {
    let a = &net.ablation;
    Checkpoint::new(net.trainable_params())
        .with_meta("kind", KIND_STAGE2)
        .with_meta("feat_channels", net.align.settings.feat_channels)
        .with_meta("offset_bound", net.align.settings.offset_bound)
        .with_meta("kernel", net.align.settings.kernel)
        .with_meta("hidden_channels", net.decoder.settings.hidden_channels)
        .with_meta("residual", net.decoder.settings.residual)
        .with_meta("window_radius", net.window_radius)
        .with_meta("pairing", net.pairing.name())
        .with_meta("tau", net.tau)
        .with_meta("mask_mode", if net.mask_mode == MaskMode::Soft { "soft" } else { "hard" })
        .with_meta("no_mask", a.no_mask)
        .with_meta("no_initialnet", a.no_initialnet)
        .with_meta("no_alignment", a.no_alignment)
        .with_meta("no_temporal", a.no_temporal)
}

pub fn flow_checkpoint(flow: &FlowEstimator) -> Checkpoint {
    Checkpoint::new(flow.params.clone())
        .with_meta("kind", KIND_FLOW)
        .with_meta(
            "settings",
            serde_json::to_string(&flow.settings).expect("flow settings serialise"),
        )
}

pub fn flow_from_checkpoint(c: &Checkpoint) -> Result<FlowEstimator> {
    c.expect_kind(KIND_FLOW)?;
    let settings: FlowSettings = serde_json::from_str(c.meta("settings")?)?;
    let mut f = match settings.backend {
        FlowBackend::ToyTrainable => FlowEstimator::toy(settings.clone(), 0),
        FlowBackend::PretrainedExternal => FlowEstimator::pretrained_external(),
    };
    f.settings = settings;
    f.params = load_matching(&f.params, &c.params)?;
    Ok(f)
}

pub fn stage2_from_checkpoints(stage2: &Checkpoint, flow: &Checkpoint) -> Result<VideoNet> {
    stage2.expect_kind(KIND_STAGE2)?;
    let align = AlignSettings {
        feat_channels: stage2.meta_parse("feat_channels")?,
        offset_bound: stage2.meta_parse("offset_bound")?,
        kernel: stage2.meta_parse("kernel")?,
    };
    let mut net = VideoNet::new(flow_from_checkpoint(flow)?, align, 0);
    net.decoder = Decoder::new(
        DecoderSettings {
            feat_channels: net.align.settings.feat_channels,
            hidden_channels: stage2.meta_parse("hidden_channels")?,
            residual: stage2.meta_parse("residual")?,
        },
        0,
    );
    net.window_radius = stage2.meta_parse("window_radius")?;
    net.pairing = FlowPairing::parse(stage2.meta("pairing")?)?;
    net.tau = stage2.meta_parse("tau")?;
    net.mask_mode = match stage2.meta("mask_mode")? {
        "soft" => MaskMode::Soft,
        _ => MaskMode::Hard,
    };
    net.ablation = Ablation {
        no_mask: stage2.meta_parse("no_mask")?,
        no_initialnet: stage2.meta_parse("no_initialnet")?,
        no_alignment: stage2.meta_parse("no_alignment")?,
        no_temporal: stage2.meta_parse("no_temporal")?,
    };
    let params = load_matching(&net.trainable_params(), &stage2.params)?;
    net.set_trainable_params(&params);
    Ok(net)
}
