use crate::error::{Error, Result};
use crate::hardconcrete::HardConcreteParams;
use crate::kv::{self, KvMap};
use crate::l0drop::GatePlacement;

/// Shape and regularization settings of the encoder-decoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    /// Depth of both the encoder and the decoder stack.
    pub layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Dropout on embeddings and sublayer outputs.
    pub dropout: f64,
    /// Dropout on attention probabilities.
    pub attn_dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
    /// Multiply embeddings by √d before adding positions.
    pub scale_embeddings: bool,
    pub positional_encoding: bool,
    pub ln_eps: f64,
    pub gate_placement: GatePlacement,
    pub hard_concrete: HardConcreteParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            ffn_dim: 256,
            heads: 4,
            layers: 2,
            src_vocab: 64,
            tgt_vocab: 64,
            dropout: 0.1,
            attn_dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 256,
            scale_embeddings: true,
            positional_encoding: true,
            ln_eps: 1e-6,
            gate_placement: GatePlacement::Top,
            hard_concrete: HardConcreteParams::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "d",
    "ffn_dim",
    "heads",
    "layers",
    "src_vocab",
    "tgt_vocab",
    "dropout",
    "attn_dropout",
    "label_smoothing",
    "max_len",
    "scale_embeddings",
    "positional_encoding",
    "ln_eps",
    "gate_placement",
    "gate_beta",
    "gate_eps",
];

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        self.hard_concrete.validate()?;
        crate::l0drop::place_gates(&self.gate_placement, self.layers)?;
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Applies one `key=value` entry; unknown keys are an error.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "d" => self.d = kv::value(key, raw)?,
            "ffn_dim" => self.ffn_dim = kv::value(key, raw)?,
            "heads" => self.heads = kv::value(key, raw)?,
            "layers" => self.layers = kv::value(key, raw)?,
            "src_vocab" => self.src_vocab = kv::value(key, raw)?,
            "tgt_vocab" => self.tgt_vocab = kv::value(key, raw)?,
            "dropout" => self.dropout = kv::value(key, raw)?,
            "attn_dropout" => self.attn_dropout = kv::value(key, raw)?,
            "label_smoothing" => self.label_smoothing = kv::value(key, raw)?,
            "max_len" => self.max_len = kv::value(key, raw)?,
            "scale_embeddings" => self.scale_embeddings = kv::flag(key, raw)?,
            "positional_encoding" => self.positional_encoding = kv::flag(key, raw)?,
            "ln_eps" => self.ln_eps = kv::value(key, raw)?,
            "gate_placement" => self.gate_placement = GatePlacement::parse(raw)?,
            "gate_beta" => self.hard_concrete.beta = kv::value(key, raw)?,
            "gate_eps" => self.hard_concrete.eps = kv::value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("d", self.d.to_string());
        put("ffn_dim", self.ffn_dim.to_string());
        put("heads", self.heads.to_string());
        put("layers", self.layers.to_string());
        put("src_vocab", self.src_vocab.to_string());
        put("tgt_vocab", self.tgt_vocab.to_string());
        // `{:?}` on f64 prints the shortest string that round-trips exactly.
        put("dropout", format!("{:?}", self.dropout));
        put("attn_dropout", format!("{:?}", self.attn_dropout));
        put("label_smoothing", format!("{:?}", self.label_smoothing));
        put("max_len", self.max_len.to_string());
        put("scale_embeddings", self.scale_embeddings.to_string());
        put("positional_encoding", self.positional_encoding.to_string());
        put("ln_eps", format!("{:?}", self.ln_eps));
        put("gate_placement", self.gate_placement.name());
        put("gate_beta", format!("{:?}", self.hard_concrete.beta));
        put("gate_eps", format!("{:?}", self.hard_concrete.eps));
        m
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_desk_shape() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d, c.ffn_dim, c.heads, c.layers), (64, 256, 4, 2));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig {
            d: 30,
            heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig {
            d: 16,
            heads: 2,
            dropout: 0.3,
            gate_placement: GatePlacement::PerLayer,
            scale_embeddings: false,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn bad_gate_layer_rejected() {
        let mut c = ModelConfig::default();
        c.set("gate_placement", "5").unwrap();
        assert!(c.validate().is_err());
    }
}
