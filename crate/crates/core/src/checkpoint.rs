//! Binary checkpoint format.
//!
//! Layout (little-endian):
//! ```text
//! magic "SVDX" | version u32 | payload_crc32 u32 | global_step u64
//! rng: seed u64, stream u64, word_pos u128
//! config_len u32 | config JSON (TrainConfig)
//! tensor_count u32
//! per tensor: name_len u32, name utf-8, ndim u32, dims u32 * ndim
//! payload: all tensors' f32 values in table order
//! ```
//! The CRC covers the payload section only; the shape table is validated
//! against the model before any tensor is applied.

use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::model::Denoiser;
use crate::nn::Parameterized;
use crate::rng::RngState;
use crate::train::TrainConfig;

pub const CKPT_MAGIC: &[u8; 4] = b"SVDX";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Snapshot the model's named tensors together with run state.
    pub fn capture(
        model: &mut Denoiser<f32>,
        config: &TrainConfig,
        step: u64,
        rng: RngState,
    ) -> Self {
        let mut tensors = Vec::new();
        model.visit_params("", &mut |name, p| {
            tensors.push(TensorEntry {
                name,
                shape: p.value.shape().to_vec(),
                data: p.value.iter().copied().collect(),
            });
        });
        Checkpoint {
            config: config.clone(),
            step,
            rng,
            tensors,
        }
    }

    /// Copy tensors into a model whose parameter table must match exactly
    /// (same names, same shapes, same order).
    pub fn apply_to(&self, model: &mut Denoiser<f32>) -> Result<()> {
        let mut expect = Vec::new();
        model.visit_params("", &mut |name, p| {
            expect.push((name, p.value.shape().to_vec()))
        });
        if expect.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "model has {} tensors, checkpoint has {} (stm on/off or architecture differ)",
                expect.len(),
                self.tensors.len()
            )));
        }
        for (t, (name, shape)) in self.tensors.iter().zip(&expect) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::ConfigMismatch(format!(
                    "tensor table mismatch: checkpoint has {}{:?}, model expects {}{:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        let mut i = 0usize;
        model.visit_params("", &mut |_, p| {
            for (dst, &src) in p.value.iter_mut().zip(self.tensors[i].data.iter()) {
                *dst = src;
            }
            i += 1;
        });
        Ok(())
    }

    /// Build a fresh model from the stored config and load the tensors.
    pub fn build_model(&self) -> Result<Denoiser<f32>> {
        let mut rng = crate::rng::rng_from_seed(self.config.seed);
        let mut model = Denoiser::new(&self.config.model_config(), &mut rng)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config_json =
            serde_json::to_vec(&self.config).map_err(|e| format_err(e.to_string()))?;
        let mut payload: Vec<u8> = Vec::new();
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(format_err(format!(
                    "tensor {} shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&payload);
        let crc = hasher.finalize();

        let mut out = Vec::with_capacity(64 + config_json.len() + payload.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&config_json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parse and fully validate a checkpoint. Sizes are checked before any
    /// payload-sized allocation; the CRC must match the payload bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(format_err("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let crc_declared = r.u32()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let config_len = r.u32()? as usize;
        let config_bytes = r.take(config_len)?;
        let config: TrainConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| format_err(format!("config block: {e}")))?;
        let tensor_count = r.u32()? as usize;
        // Read the shape table first; payload length must match exactly.
        let mut metas: Vec<(String, Vec<usize>)> = Vec::new();
        let mut total: u64 = 0;
        for _ in 0..tensor_count {
            let name_len = r.u32()? as usize;
            if name_len > 4096 {
                return Err(format_err("unreasonable tensor name length"));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err("tensor name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(format_err("unreasonable tensor rank"));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: u64 = 1;
            for _ in 0..ndim {
                let d = r.u32()? as u64;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| format_err("tensor size overflow"))?;
                shape.push(d as usize);
            }
            total = total
                .checked_add(numel)
                .ok_or_else(|| format_err("payload size overflow"))?;
            metas.push((name, shape));
        }
        let remaining = (bytes.len() - r.pos) as u64;
        let expected = total
            .checked_mul(4)
            .ok_or_else(|| format_err("payload size overflow"))?;
        if remaining != expected {
            return Err(format_err(format!(
                "payload holds {remaining} bytes but the shape table wants {expected}"
            )));
        }
        let payload = &bytes[r.pos..];
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(payload);
        if hasher.finalize() != crc_declared {
            return Err(format_err("payload CRC mismatch (corrupted checkpoint)"));
        }
        let mut tensors = Vec::with_capacity(tensor_count);
        let mut off = 0usize;
        for (name, shape) in metas {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for chunk in payload[off..off + 4 * n].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            off += 4 * n;
            tensors.push(TensorEntry { name, shape, data });
        }
        Ok(Checkpoint {
            config,
            step,
            rng,
            tensors,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array5;

    fn toy_config(stm: bool) -> TrainConfig {
        let mut cfg = TrainConfig::toy_defaults();
        cfg.stm = stm;
        cfg
    }

    #[test]
    fn roundtrip_preserves_forward_bit_exactly() {
        let cfg = toy_config(true);
        let mut rng = rng_from_seed(cfg.seed);
        let mut model = Denoiser::<f32>::new(&cfg.model_config(), &mut rng).unwrap();
        model.randomize_all(0.05, &mut rng);
        let state = RngState::capture(cfg.seed, &rng);
        let ckpt = Checkpoint::capture(&mut model, &cfg, 123, state);
        assert!(ckpt.tensors.iter().any(|t| t.name.starts_with("stm.")));
        assert!(ckpt.tensors.iter().any(|t| t.name.starts_with("unet.")));
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 123);
        assert_eq!(back.rng, state);
        let restored = back.build_model().unwrap();

        let mut rng2 = rng_from_seed(99);
        let mut x = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        let mut y = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        crate::rng::fill_standard_normal(&mut rng2, x.as_slice_mut().unwrap());
        crate::rng::fill_standard_normal(&mut rng2, y.as_slice_mut().unwrap());
        let a = model.forward(&x, &y, &[4]).unwrap();
        let b = restored.forward(&x, &y, &[4]).unwrap();
        assert_eq!(a, b, "forward outputs must be bit-identical after reload");
    }

    #[test]
    fn payload_tamper_detected_by_crc() {
        let cfg = toy_config(false);
        let mut rng = rng_from_seed(cfg.seed);
        let mut model = Denoiser::<f32>::new(&cfg.model_config(), &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&mut model, &cfg, 1, RngState::capture(cfg.seed, &rng));
        let mut bytes = ckpt.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");
    }

    #[test]
    fn stm_checkpoint_rejected_by_stm_free_model() {
        let cfg_on = toy_config(true);
        let mut rng = rng_from_seed(cfg_on.seed);
        let mut model_on = Denoiser::<f32>::new(&cfg_on.model_config(), &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&mut model_on, &cfg_on, 5, RngState::capture(1, &rng));

        let cfg_off = toy_config(false);
        let mut model_off = Denoiser::<f32>::new(&cfg_off.model_config(), &mut rng).unwrap();
        let err = ckpt.apply_to(&mut model_off).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)), "{err}");
    }

    #[test]
    fn truncated_and_garbage_inputs_rejected() {
        assert!(Checkpoint::from_bytes(b"").is_err());
        assert!(Checkpoint::from_bytes(b"SVD").is_err());
        assert!(Checkpoint::from_bytes(b"XXXX\x01\x00\x00\x00").is_err());
        let cfg = toy_config(false);
        let mut rng = rng_from_seed(cfg.seed);
        let mut model = Denoiser::<f32>::new(&cfg.model_config(), &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&mut model, &cfg, 1, RngState::capture(1, &rng));
        let bytes = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }
}
