//! Versioned binary model container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` payload length, payload, CRC32
//! of the payload. All integers and floats are little-endian; floats are
//! stored as raw 64-bit patterns, so a round trip is bit-exact.

use std::path::Path;

use crate::decoder::{C2fModel, LmfModel, Model, VanillaModel};
use crate::encoder::{Conv3x3, Encoder, TinyConv};
use crate::error::{Error, Result};
use crate::tensor::{Linear, Mlp};

const MAGIC: &[u8; 8] = b"LMFMODEL";
pub const FORMAT_VERSION: u32 = 1;

/// How a model was produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub meta: TrainingMeta,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn mlp(&mut self, m: &Mlp) {
        self.u32(m.layers().len());
        for l in m.layers() {
            self.u32(l.in_dim());
            self.u32(l.out_dim());
            self.floats(l.weight());
            self.floats(l.bias());
        }
        self.u32(m.modulated_layers().len());
        for &i in m.modulated_layers() {
            self.u32(i);
        }
    }
    fn encoder(&mut self, e: &Encoder) {
        match e {
            Encoder::IdentityUnfold { channels } => {
                self.u8(0);
                self.u32(*channels);
            }
            Encoder::TinyConv(t) => {
                self.u8(1);
                self.u32(t.layers().len());
                for l in t.layers() {
                    self.u32(l.in_ch());
                    self.u32(l.out_ch());
                    self.floats(l.weight());
                    self.floats(l.bias());
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// offset of `bytes[0]` within the file, for error messages
    base: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.base + self.pos,
                msg: "unexpected end of model data".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::InvalidModel("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let (i, o) = (self.u32()?, self.u32()?);
            let (w, b) = (self.floats()?, self.floats()?);
            layers.push(Linear::new(i, o, w, b)?);
        }
        let k = self.u32()?;
        let modulated = (0..k).map(|_| self.u32()).collect::<Result<_>>()?;
        Mlp::new(layers, modulated)
    }
    fn encoder(&mut self) -> Result<Encoder> {
        match self.u8()? {
            0 => Ok(Encoder::IdentityUnfold { channels: self.u32()? }),
            1 => {
                let n = self.u32()?;
                let mut layers = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    let (i, o) = (self.u32()?, self.u32()?);
                    let (w, b) = (self.floats()?, self.floats()?);
                    layers.push(Conv3x3::new(i, o, w, b)?);
                }
                Ok(Encoder::TinyConv(TinyConv::new(layers)?))
            }
            t => Err(Error::InvalidModel(format!("unknown encoder tag {t}"))),
        }
    }
}

pub fn encode_model(file: &ModelFile) -> Vec<u8> {
    let mut p = Writer::default();
    p.u64(file.meta.seed);
    p.u64(file.meta.steps);
    match &file.model {
        Model::Vanilla(m) => {
            p.u8(0);
            p.encoder(&m.encoder);
            p.mlp(&m.mlp);
        }
        Model::C2f(m) => {
            p.u8(1);
            p.encoder(&m.encoder);
            p.mlp(&m.latent);
            p.mlp(&m.render);
        }
        Model::Lmf(m) => {
            p.u8(2);
            let l = m.layout();
            p.u32(l.k);
            p.u32(l.hidden);
            p.u32(l.code);
            p.encoder(&m.encoder);
            p.mlp(&m.latent);
            p.mlp(&m.render);
        }
    }
    let payload = p.0;
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not an LMF model file".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() - 20 < len.saturating_add(4) {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: "truncated model file".into(),
        });
    }
    let payload = &bytes[20..20 + len];
    let stored = u32::from_le_bytes(bytes[20 + len..24 + len].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
        base: 20,
    };
    let meta = TrainingMeta {
        seed: r.u64()?,
        steps: r.u64()?,
    };
    let model = match r.u8()? {
        0 => Model::Vanilla(VanillaModel::new(r.encoder()?, r.mlp()?)?),
        1 => Model::C2f(C2fModel::new(r.encoder()?, r.mlp()?, r.mlp()?)?),
        2 => {
            let (k, hidden, code) = (r.u32()?, r.u32()?, r.u32()?);
            let m = LmfModel::new(r.encoder()?, r.mlp()?, r.mlp()?)?;
            let l = m.layout();
            if (l.k, l.hidden, l.code) != (k, hidden, code) {
                return Err(Error::InvalidModel(format!(
                    "stored K={k}, D_H={hidden}, D_c={code} disagree with the networks"
                )));
            }
            Model::Lmf(m)
        }
        t => return Err(Error::InvalidModel(format!("unknown decoder tag {t}"))),
    };
    if r.pos != payload.len() {
        return Err(Error::Parse {
            offset: 20 + r.pos,
            msg: "trailing bytes after model".into(),
        });
    }
    Ok(ModelFile { model, meta })
}

pub fn save_model(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(file))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderKind, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: DecoderKind) -> ModelFile {
        let mut cfg = ModelConfig::DESK;
        cfg.encoder_width = Some(5);
        ModelFile {
            model: Model::init(kind, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
            meta: TrainingMeta { seed: 9, steps: 1234 },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [DecoderKind::Lmf, DecoderKind::Vanilla, DecoderKind::C2f] {
            let f = sample(kind);
            let back = decode_model(&encode_model(&f)).unwrap();
            assert_eq!(back, f);
            let bits = |m: &Model| -> Vec<u64> { m.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect() };
            assert_eq!(bits(&back.model), bits(&f.model));
        }
        let mut f = sample(DecoderKind::Lmf);
        f.model = Model::Vanilla(VanillaModel::new(
            Encoder::IdentityUnfold { channels: 3 },
            Mlp::init(&[9 * 27 + 4, 8, 3], vec![], &mut ChaCha8Rng::seed_from_u64(2)).unwrap(),
        )
        .unwrap());
        assert_eq!(decode_model(&encode_model(&f)).unwrap(), f);
    }

    #[test]
    fn corruption_and_versions() {
        let bytes = encode_model(&sample(DecoderKind::Lmf));
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        assert!(matches!(decode_model(&bad), Err(Error::Checksum { .. })));
        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_model(&future),
            Err(Error::UnsupportedVersion { found: 7, supported: 1 })
        ));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 9]), Err(Error::Parse { .. })));
        assert!(matches!(decode_model(b"GIF89a.............."), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn shape_violations_rejected_even_with_valid_checksum() {
        let f = sample(DecoderKind::Lmf);
        let mut bytes = encode_model(&f);
        // K field lives right after seed, steps and the decoder tag
        let at = 20 + 17;
        bytes[at..at + 4].copy_from_slice(&5u32.to_le_bytes());
        let len = bytes.len();
        let crc = crc32fast::hash(&bytes[20..len - 4]);
        bytes[len - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(Error::InvalidModel(_))));
    }
}
