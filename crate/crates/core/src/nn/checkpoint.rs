//! Parameter checkpoint format, little-endian:
//!
//! ```text
//! magic "SNAVNET\0" | version u32 | kind tag u32 (V, M, S, C or B)
//! frame memory u32 | action memory u32 | obs height u32 | obs width u32
//! conv layers u32 | (channels, kernel, stride) u32 per layer
//! hidden u32 | outputs u32
//! blocks u32 | per block: rank u32, dims u32 * rank
//! f32 values of every block in order | crc32 of all preceding bytes
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::classifier::{Classifier, ClassifierConfig, ClassifierKind};
use super::layers::ConvSpec;
use super::qnet::{QNetConfig, QNetwork, Variant};
use super::Parameters;
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNAVNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Header {
    tag: u8,
    frame_memory: usize,
    action_memory: usize,
    obs_height: usize,
    obs_width: usize,
    conv: Vec<ConvSpec>,
    hidden: usize,
    outputs: usize,
}

fn encode<P: Parameters<f32>>(header: &Header, params: &P) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(header.tag as u32);
    for v in [header.frame_memory, header.action_memory, header.obs_height, header.obs_width] {
        w.len_u32(v);
    }
    w.len_u32(header.conv.len());
    for c in &header.conv {
        w.len_u32(c.channels);
        w.len_u32(c.kernel);
        w.len_u32(c.stride);
    }
    w.len_u32(header.hidden);
    w.len_u32(header.outputs);
    let shapes = params.block_shapes();
    w.len_u32(shapes.len());
    for s in &shapes {
        w.len_u32(s.len());
        for &d in s {
            w.len_u32(d);
        }
    }
    for block in params.blocks() {
        w.f32s(block);
    }
    w.finish()
}

fn decode_header(r: &mut Reader) -> std::result::Result<(Header, Vec<Vec<usize>>), String> {
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint file".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let tag = r.u32()?;
    let tag = u8::try_from(tag).map_err(|_| format!("unknown kind tag {tag}"))?;
    let frame_memory = r.usize()?;
    let action_memory = r.usize()?;
    let obs_height = r.usize()?;
    let obs_width = r.usize()?;
    let layers = r.usize()?;
    if layers > 64 {
        return Err(format!("implausible conv layer count {layers}"));
    }
    let mut conv = Vec::with_capacity(layers);
    for _ in 0..layers {
        conv.push(ConvSpec {
            channels: r.usize()?,
            kernel: r.usize()?,
            stride: r.usize()?,
        });
    }
    let hidden = r.usize()?;
    let outputs = r.usize()?;
    let blocks = r.usize()?;
    if blocks > 512 {
        return Err(format!("implausible block count {blocks}"));
    }
    let mut shapes = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let rank = r.usize()?;
        if rank > 8 {
            return Err(format!("implausible block rank {rank}"));
        }
        shapes.push((0..rank).map(|_| r.usize()).collect::<std::result::Result<Vec<_>, _>>()?);
    }
    let header = Header {
        tag,
        frame_memory,
        action_memory,
        obs_height,
        obs_width,
        conv,
        hidden,
        outputs,
    };
    Ok((header, shapes))
}

/// Rebuilds `params` (already shaped from the header) from the value blocks.
fn decode_blocks<P: Parameters<f32>>(
    r: &mut Reader,
    shapes: &[Vec<usize>],
    params: &mut P,
) -> std::result::Result<(), String> {
    if params.block_shapes() != shapes {
        return Err("parameter block shapes do not match the stored architecture".into());
    }
    for block in params.blocks_mut() {
        let values = r.f32s(block.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err("checkpoint holds non-finite parameters".into());
        }
        block.copy_from_slice(&values);
    }
    Ok(())
}

impl QNetwork<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let header = Header {
            tag: c.variant.tag(),
            frame_memory: c.frame_memory,
            action_memory: c.action_memory,
            obs_height: c.obs_height,
            obs_width: c.obs_width,
            conv: c.conv.clone(),
            hidden: c.hidden,
            outputs: self.num_actions(),
        };
        encode(&header, self)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: String| Error::load(origin, m);
        let mut r = Reader::new(bytes, "checkpoint");
        let (h, shapes) = decode_header(&mut r).map_err(fail)?;
        let variant = Variant::from_tag(h.tag)
            .ok_or_else(|| fail(format!("kind tag {:?} is not a Q-network", h.tag as char)))?;
        if h.outputs != variant.num_q_actions() {
            return Err(fail(format!("{variant} checkpoint with {} outputs", h.outputs)));
        }
        let config = QNetConfig {
            variant,
            frame_memory: h.frame_memory,
            action_memory: h.action_memory,
            obs_height: h.obs_height,
            obs_width: h.obs_width,
            conv: h.conv,
            hidden: h.hidden,
        };
        config.validate().map_err(|e| fail(e.to_string()))?;
        let mut net = QNetwork::new(config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| fail(e.to_string()))?;
        decode_blocks(&mut r, &shapes, &mut net).map_err(fail)?;
        r.finish().map_err(fail)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Loads a checkpoint and requires it to match `expected` exactly.
    pub fn load_expecting(path: &Path, expected: &QNetConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if net.config() != expected {
            return Err(Error::config(format!(
                "checkpoint {} was written for {} (n={}, m={}), configured {} (n={}, m={})",
                path.display(),
                net.config().variant,
                net.config().frame_memory,
                net.config().action_memory,
                expected.variant,
                expected.frame_memory,
                expected.action_memory
            )));
        }
        Ok(net)
    }
}

impl Classifier<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let header = Header {
            tag: c.kind.tag(),
            frame_memory: 0,
            action_memory: 0,
            obs_height: c.obs_height,
            obs_width: c.obs_width,
            conv: c.conv.clone(),
            hidden: c.hidden,
            outputs: c.kind.num_classes(),
        };
        encode(&header, self)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: String| Error::load(origin, m);
        let mut r = Reader::new(bytes, "checkpoint");
        let (h, shapes) = decode_header(&mut r).map_err(fail)?;
        let kind = ClassifierKind::from_tag(h.tag)
            .ok_or_else(|| fail(format!("kind tag {:?} is not a classifier", h.tag as char)))?;
        if h.outputs != kind.num_classes() || h.frame_memory != 0 || h.action_memory != 0 {
            return Err(fail("classifier header is inconsistent".into()));
        }
        let config = ClassifierConfig {
            kind,
            obs_height: h.obs_height,
            obs_width: h.obs_width,
            conv: h.conv,
            hidden: h.hidden,
        };
        let mut net = Classifier::new(config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| fail(e.to_string()))?;
        decode_blocks(&mut r, &shapes, &mut net).map_err(fail)?;
        r.finish().map_err(fail)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    pub fn load_expecting(path: &Path, expected: &ClassifierConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if net.config() != expected {
            return Err(Error::config(format!(
                "checkpoint {} does not match the configured {:?} classifier",
                path.display(),
                expected.kind
            )));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(n: usize, m: usize) -> QNetwork<f32> {
        let config = QNetConfig {
            conv: vec![ConvSpec { channels: 2, kernel: 3, stride: 2 }],
            hidden: 5,
            ..QNetConfig::new(Variant::M, n, m, 9, 9)
        };
        QNetwork::new(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let a = net(3, 2);
        let b = QNetwork::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(a, b);
        let bits = |n: &QNetwork<f32>| -> Vec<u32> { n.blocks().iter().flat_map(|b| b.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn memory_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        net(3, 2).save(&path).unwrap();
        let err = QNetwork::load_expecting(&path, net(1, 2).config()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(QNetwork::load_expecting(&path, net(3, 2).config()).is_ok());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = net(1, 1).to_bytes();
        let origin = Path::new("mem");
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0, 0]);
        assert!(matches!(QNetwork::from_bytes(&trailing, origin), Err(Error::Load { .. })));
        assert!(QNetwork::from_bytes(&bytes[..bytes.len() - 9], origin).is_err());
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(QNetwork::from_bytes(&flipped, origin).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        let err = QNetwork::from_bytes(&version, origin).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn kinds_are_not_interchangeable() {
        let q = net(0, 0).to_bytes();
        assert!(Classifier::from_bytes(&q, Path::new("mem")).is_err());
        let config = ClassifierConfig {
            conv: vec![ConvSpec { channels: 2, kernel: 3, stride: 2 }],
            hidden: 4,
            ..ClassifierConfig::new(ClassifierKind::Stop, 9, 9)
        };
        let c = Classifier::<f32>::new(config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let back = Classifier::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert!(QNetwork::from_bytes(&c.to_bytes(), Path::new("mem")).is_err());
    }
}
