//! STMC checkpoint container.
//!
//! Layout (little-endian): magic `STMC`, version `u32`, model config as a
//! length-prefixed TOML string, epoch `u64`, generator state (32-byte seed,
//! stream `u64`, word position `u128`), Adam scalars (`β₁ β₂ ε` and base rate
//! as `f64`, step `u64`), the named parameter table, then the named moment
//! table. Strings are `u32`-length-prefixed UTF-8; each parameter stores its
//! rank, dims and `f64` values; each moment entry stores its length followed
//! by the first and second moment values.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StMoeModel};
use crate::nn::Module;
use crate::tensor::Tensor;
use crate::train::Adam;

pub const MAGIC: &[u8; 4] = b"STMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub optim: Adam,
    pub params: Vec<(String, Tensor)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("checkpoint {what} is not UTF-8")))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{what} too large")))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn capture(model: &StMoeModel, optim: &Adam, rng: &ChaCha8Rng, epoch: usize) -> Self {
        Checkpoint {
            config: model.config.clone(),
            epoch,
            rng: rng.clone(),
            optim: optim.clone(),
            params: model.named_parameters(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize)?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.str(&cfg)?;
        w.u64(self.epoch as u64);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let o = &self.optim;
        for v in [o.beta1, o.beta2, o.eps, o.base_lr] {
            w.f64(v);
        }
        w.u64(o.step);
        w.u32(self.params.len())?;
        for (name, t) in &self.params {
            w.str(name)?;
            w.u32(t.ndim())?;
            for &d in t.shape() {
                w.u32(d)?;
            }
            w.f64s(t.data());
        }
        w.u32(o.moments.len())?;
        for (name, (m, v)) in &o.moments {
            w.str(name)?;
            w.u32(m.len())?;
            w.f64s(m);
            w.f64s(v);
        }
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not an STMC checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let cfg_text = r.str("model config")?;
        let config: ModelConfig =
            toml::from_str(&cfg_text).map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let epoch = r.u64("epoch")? as usize;
        let seed: [u8; 32] = r.take(32, "generator seed")?.try_into().unwrap();
        let stream = r.u64("generator stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "generator position")?.try_into().unwrap());
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut optim = Adam::new(0.0);
        optim.beta1 = r.f64("adam beta1")?;
        optim.beta2 = r.f64("adam beta2")?;
        optim.eps = r.f64("adam eps")?;
        optim.base_lr = r.f64("adam base lr")?;
        optim.step = r.u64("adam step")?;

        let n = r.u32("parameter count")?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str("parameter name")?;
            let rank = r.u32("parameter rank")?;
            let shape = (0..rank).map(|_| r.u32("parameter dims")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f64s(numel, &name)?;
            params.push((name, Tensor::param(&shape, data)?));
        }
        let n = r.u32("moment count")?;
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let name = r.str("moment name")?;
            let len = r.u32("moment length")?;
            let m = r.f64s(len, &name)?;
            let v = r.f64s(len, &name)?;
            moments.insert(name, (m, v));
        }
        optim.moments = moments;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            epoch,
            rng,
            optim,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Errors if `expected` differs from the stored config, naming the field.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        match self.config.first_difference(expected) {
            None => Ok(()),
            Some(field) => Err(Error::Config(format!(
                "checkpoint model config differs in field `{field}`"
            ))),
        }
    }

    /// A model built from the stored config carrying the stored parameters.
    pub fn restore_model(&self) -> Result<StMoeModel> {
        let mut model = StMoeModel::new(self.config.clone())?;
        let stored: BTreeMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut result = Ok(());
        let mut used = 0;
        model.visit_mut("", &mut |name, p| {
            if result.is_err() {
                return;
            }
            match stored.get(name.as_str()) {
                Some(t) if t.shape() == p.shape() => {
                    *p = (*t).clone();
                    used += 1;
                }
                Some(t) => {
                    result = Err(Error::Format(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => result = Err(Error::Format(format!("checkpoint lacks parameter {name}"))),
            }
        });
        result?;
        if used != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors but the model uses {used}",
                stored.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::objective::LossWeights;
    use crate::ssm::SsmConfig;
    use crate::train::{TrainConfig, Trainer};

    fn setup() -> (ModelConfig, TrainConfig, Vec<crate::data::MotionSequence>) {
        let mc = ModelConfig {
            joints: 2,
            history: 4,
            total: 6,
            codec_hidden: 4,
            ssm: SsmConfig {
                expand: 1,
                state_dim: 2,
                conv_width: 2,
                dt_rank: None,
            },
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let data = synth_generate(&SynthSpec {
            sequences: 4,
            persons: 2,
            frames: 6,
            joints: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        (mc, tc, data)
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let (mc, tc, data) = setup();
        let mut tr = Trainer::new(StMoeModel::new(mc).unwrap(), tc, LossWeights::default()).unwrap();
        tr.fit(&data, &[], 2, None, &mut |_, _| Ok(())).unwrap();
        let bytes = tr.checkpoint().encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.epoch, 2);
        assert_eq!(back.optim, tr.optim);
        let model = back.restore_model().unwrap();
        for ((na, a), (nb, b)) in model.named_parameters().iter().zip(tr.model.named_parameters()) {
            assert_eq!((na, a), (&nb, &b));
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_training() {
        let (mc, tc, data) = setup();
        let mut full = Trainer::new(StMoeModel::new(mc.clone()).unwrap(), tc.clone(), LossWeights::default()).unwrap();
        let full_log = full.fit(&data, &[], 5, None, &mut |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(StMoeModel::new(mc).unwrap(), tc.clone(), LossWeights::default()).unwrap();
        first.fit(&data, &[], 3, None, &mut |_, _| Ok(())).unwrap();
        let cp = Checkpoint::decode(&first.checkpoint().encode().unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(cp, tc, LossWeights::default()).unwrap();
        let tail = resumed.fit(&data, &[], 2, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(tail, full_log[3..]);
        for ((_, a), (_, b)) in resumed
            .model
            .named_parameters()
            .iter()
            .zip(full.model.named_parameters())
        {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn corrupt_or_mismatched_checkpoints_are_rejected() {
        let (mc, _, _) = setup();
        let model = StMoeModel::new(mc.clone()).unwrap();
        let rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let cp = Checkpoint::capture(&model, &Adam::new(0.01), &rng, 0);
        let bytes = cp.encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("version"));
        let err = cp
            .check_config(&ModelConfig { moe_layers: 2, ..mc })
            .unwrap_err()
            .to_string();
        assert!(err.contains("moe_layers"), "{err}");
    }
}
