use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{efilm_tape, gate, time_embedding_batch, EquiLinear, Init, TFeat, TemporalConv};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::so3::{IrrepFeature, IrrepSeq, Signature};
use crate::tape::{Padding, Tape};

/// Shape of the temporal U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub horizon: usize,
    /// Signature of one frame of the noisy input (and of the output velocity).
    pub action_sig: Signature,
    /// Signature of the observation conditioning feature.
    pub cond_sig: Signature,
    pub time_dim: usize,
    /// Channel widths per resolution level; the last entry is the bottleneck.
    pub widths: Vec<Signature>,
    pub radius: usize,
    pub factor: usize,
    pub padding: Padding,
    /// Invariant frame-index channels appended to the input.
    pub pos_channels: usize,
    /// Start the output projection at zero, so the untrained field is zero.
    pub zero_head: bool,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn bottleneck_len(&self) -> usize {
        self.horizon / self.factor.pow(self.levels() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("U-Net needs at least one width entry".into()));
        }
        if self.factor == 0 || self.horizon == 0 {
            return Err(Error::Config("horizon and sampling factor must be positive".into()));
        }
        let total = self.factor.pow(self.levels() as u32);
        if self.horizon % total != 0 {
            return Err(Error::Config(format!(
                "horizon {} is not divisible by the total downsampling factor {total}",
                self.horizon
            )));
        }
        Ok(())
    }

    fn full_cond_sig(&self) -> Signature {
        self.cond_sig.concat(&Signature::new(self.time_dim, 0, 0))
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: TemporalConv,
    gamma: EquiLinear,
    beta: EquiLinear,
    skip: Option<EquiLinear>,
}

impl Block {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &UNetConfig,
        input: Signature,
        out: Signature,
        rng: &mut R,
    ) -> Self {
        let pre = Signature::new(out.0[0] + out.gate_count(), out.0[1], out.0[2]);
        let conv =
            TemporalConv::new(store, &format!("{prefix}.conv"), input, pre, cfg.radius, cfg.padding, true, rng);
        let cond = cfg.full_cond_sig();
        let normal = Init::Normal { gain: 1.0 };
        let gamma = EquiLinear::new(store, &format!("{prefix}.gamma"), cond, out, Some(1.0), normal, rng);
        let beta = EquiLinear::new(store, &format!("{prefix}.beta"), cond, out, Some(0.0), normal, rng);
        let skip = (input != out)
            .then(|| EquiLinear::new(store, &format!("{prefix}.skip"), input, out, None, normal, rng));
        Block { conv, gamma, beta, skip }
    }

    fn forward(&self, tape: &mut Tape, x: &TFeat, cond: &TFeat, len: usize) -> Result<TFeat> {
        let pre = self.conv.forward(tape, x, len);
        let h = gate(tape, &pre)?;
        let g = self.gamma.forward(tape, cond).tile(tape, len);
        let b = self.beta.forward(tape, cond).tile(tape, len);
        let h = efilm_tape(tape, &h, &g, &b, true);
        let res = match &self.skip {
            Some(s) => s.forward(tape, x),
            None => *x,
        };
        Ok(h.add(tape, &res))
    }
}

/// Temporal U-Net velocity field over irrep sequences.
///
/// Each block is temporal conv, gated nonlinearity, then FiLM from the
/// conditioning feature, plus a residual path. Down levels average-pool in
/// time, up levels repeat frames and concatenate the matching skip feature.
#[derive(Clone, Debug)]
pub struct EquiUNet {
    pub cfg: UNetConfig,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    head: EquiLinear,
}

impl EquiUNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let mut sig = cfg.action_sig.concat(&Signature::new(cfg.pos_channels, 0, 0));
        let mut down = Vec::with_capacity(levels);
        for i in 0..levels {
            down.push(Block::new(store, &format!("{prefix}.down{i}"), &cfg, sig, cfg.widths[i], rng));
            sig = cfg.widths[i];
        }
        let mid = Block::new(store, &format!("{prefix}.mid"), &cfg, sig, cfg.widths[levels], rng);
        sig = cfg.widths[levels];
        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let input = sig.concat(&cfg.widths[i]);
            up.push(Block::new(store, &format!("{prefix}.up{i}"), &cfg, input, cfg.widths[i], rng));
            sig = cfg.widths[i];
        }
        let init = if cfg.zero_head { Init::Zero } else { Init::Normal { gain: 1.0 } };
        let head = EquiLinear::new(store, &format!("{prefix}.head"), sig, cfg.action_sig, Some(0.0), init, rng);
        Ok(EquiUNet { cfg, down, mid, up, head })
    }

    fn positional(&self, batch: usize) -> Array2<f64> {
        let h = self.cfg.horizon;
        let denom = (h.max(2) - 1) as f64;
        Array2::from_shape_fn((self.cfg.pos_channels, batch * h), |(k, j)| {
            let tau = (j % h) as f64 / denom;
            if k == 0 {
                2.0 * tau - 1.0
            } else {
                (std::f64::consts::PI * k as f64 * tau).cos()
            }
        })
    }

    /// Batched forward. `x` holds `t.len()` sequences of `horizon` frames;
    /// `cond` holds one position per batch element.
    pub fn forward(&self, tape: &mut Tape, x: &TFeat, t: &[f64], cond: &TFeat) -> Result<TFeat> {
        let batch = t.len();
        let h = self.cfg.horizon;
        if x.npos != batch * h || cond.npos != batch {
            return Err(Error::Shape(format!(
                "U-Net got {} input positions and {} conditioning positions for batch {batch} x horizon {h}",
                x.npos, cond.npos
            )));
        }
        let xs = x.signature(tape);
        if xs != self.cfg.action_sig {
            return Err(Error::SignatureMismatch(format!("U-Net input {xs}, expected {}", self.cfg.action_sig)));
        }
        let cs = cond.signature(tape);
        if cs != self.cfg.cond_sig {
            return Err(Error::SignatureMismatch(format!("conditioning {cs}, expected {}", self.cfg.cond_sig)));
        }

        let temb = tape.constant(time_embedding_batch(t, self.cfg.time_dim));
        let cond = cond.concat(tape, &TFeat::scalars(temb, batch));
        let mut hcur = if self.cfg.pos_channels > 0 {
            let pos = tape.constant(self.positional(batch));
            x.concat(tape, &TFeat::scalars(pos, batch * h))
        } else {
            *x
        };

        let mut len = h;
        let mut skips = Vec::with_capacity(self.down.len());
        for block in &self.down {
            hcur = block.forward(tape, &hcur, &cond, len)?;
            skips.push((hcur, len));
            hcur = hcur.time_pool(tape, self.cfg.factor, len);
            len /= self.cfg.factor;
        }
        hcur = self.mid.forward(tape, &hcur, &cond, len)?;
        for block in &self.up {
            let (skip, skip_len) = skips.pop().expect("one skip per level");
            hcur = hcur.time_repeat(tape, self.cfg.factor, len);
            len = skip_len;
            hcur = hcur.concat(tape, &skip);
            hcur = block.forward(tape, &hcur, &cond, len)?;
        }
        Ok(self.head.forward(tape, &hcur))
    }

    /// Single-sample forward on plain values.
    pub fn forward_value(
        &self,
        store: &ParamStore,
        x_t: &IrrepSeq,
        t: f64,
        cond: &IrrepFeature,
    ) -> Result<IrrepSeq> {
        if x_t.len() != self.cfg.horizon {
            return Err(Error::Shape(format!("sequence length {} but horizon {}", x_t.len(), self.cfg.horizon)));
        }
        let mut tape = Tape::with_params(store);
        let x = TFeat::from_seq(&mut tape, x_t, false);
        let c = TFeat::from_feature(&mut tape, cond, false);
        let out = self.forward(&mut tape, &x, &[t], &c)?;
        Ok(out.to_seq(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            horizon: 8,
            action_sig: Signature::new(1, 3, 0),
            cond_sig: Signature::new(4, 2, 1),
            time_dim: 4,
            widths: vec![Signature::new(4, 2, 1), Signature::new(4, 2, 2), Signature::new(6, 3, 2)],
            radius: 2,
            factor: 2,
            padding: Padding::Replicate,
            pos_channels: 2,
            zero_head: true,
        }
    }

    #[test]
    fn bottleneck_length() {
        assert_eq!(small_cfg().bottleneck_len(), 2);
        let mut bad = small_cfg();
        bad.horizon = 6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = EquiUNet::new(&mut store, "u", small_cfg(), &mut rng).unwrap();
        let x = IrrepSeq::random(Signature::new(1, 3, 0), 8, &mut rng);
        let c = IrrepFeature::random(Signature::new(4, 2, 1), &mut rng);
        let v = net.forward_value(&store, &x, 0.3, &c).unwrap();
        assert_eq!(v.signature(), x.signature());
        assert_eq!(v.len(), 8);
        assert!(v.flatten().iter().all(|&z| z == 0.0));
    }
}
