use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::l0drop::place_gates;
use crate::numcore::{Graph, Real, RngState, Tensor, Var};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

/// Index of every parameter in [`ModelParams`], derived from the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub out_w: usize,
    pub out_b: usize,
    /// `(encoder layer, predictor weight)` for every gated layer, bottom up.
    pub gates: Vec<(usize, usize)>,
}

impl Layout {
    pub fn gate_for_layer(&self, layer: usize) -> Option<usize> {
        self.gates.iter().find(|(l, _)| *l == layer).map(|&(_, p)| p)
    }
}

enum Init {
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder<'a, T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: &'a mut RngState,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Xavier => {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| T::lit(self.rng.uniform_range(-limit, limit))).collect()
            }
            Init::Normal(std) => (0..n).map(|_| T::lit(self.rng.normal() * std)).collect(),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        self.names.push(name);
        self.tensors.push(Tensor::new(shape, data).expect("positive dims").parameter());
        self.tensors.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.add(format!("{prefix}.Wq"), &[d, d], Init::Xavier),
            wk: self.add(format!("{prefix}.Wk"), &[d, d], Init::Xavier),
            wv: self.add(format!("{prefix}.Wv"), &[d, d], Init::Xavier),
            wo: self.add(format!("{prefix}.Wo"), &[d, d], Init::Xavier),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, inner: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.W1"), &[d, inner], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), &[inner], Init::Zeros),
            w2: self.add(format!("{prefix}.W2"), &[inner, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }
}

/// All trainable tensors of one model, in a fixed creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Random initialization. Gate predictors are created last and start at
    /// zero, so they consume no random draws: a gated and an ungated model
    /// built from the same seed share every other tensor.
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut b = Builder {
            names: vec![],
            tensors: vec![],
            rng,
        };
        let emb_std = if config.scale_embeddings {
            (d as f64).powf(-0.5)
        } else {
            1.0
        };
        let src_embed = b.add("src_embed".into(), &[config.src_vocab, d], Init::Normal(emb_std));
        let tgt_embed = b.add("tgt_embed".into(), &[config.tgt_vocab, d], Init::Normal(emb_std));
        let encoder = (0..config.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayerIds {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.ffn_dim),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                DecoderLayerIds {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.ffn_dim),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                }
            })
            .collect();
        let out_w = b.add("output.W".into(), &[d, config.tgt_vocab], Init::Xavier);
        let out_b = b.add("output.b".into(), &[config.tgt_vocab], Init::Zeros);
        let plan = place_gates(&config.gate_placement, config.layers)?;
        let gates = plan
            .gated_layers
            .iter()
            .map(|&l| (l, b.add(format!("gate.layer{l}.w"), &[d, 1], Init::Zeros)))
            .collect();
        let layout = Layout {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_w,
            out_b,
            gates,
        };
        Ok(Self {
            config: config.clone(),
            layout,
            names: b.names,
            tensors: b.tensors,
        })
    }

    /// Rebuilds a parameter set from named tensors (e.g. a checkpoint). Every
    /// expected name must be present with the expected shape.
    pub fn from_named(config: &ModelConfig, mut named: HashMap<String, Tensor<T>>) -> Result<Self> {
        // Shapes and names come from a throwaway init; its values are replaced.
        let mut template = Self::init(config, &mut RngState::new(0))?;
        for (i, name) in template.names.iter().enumerate() {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != template.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    template.tensors[i].shape()
                )));
            }
            template.tensors[i] = t.parameter();
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        Ok(template)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>().parameter()).collect(),
        }
    }

    /// A copy with a different gate placement. Shared tensors are kept; new
    /// gate predictors start at zero.
    pub fn with_gate_placement(&self, placement: crate::l0drop::GatePlacement) -> Result<Self> {
        let mut config = self.config.clone();
        config.gate_placement = placement;
        let mut named: HashMap<String, Tensor<T>> = self
            .names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .filter(|(n, _)| !n.starts_with("gate."))
            .collect();
        for (l, _) in Self::init(&config, &mut RngState::new(0))?.layout.gates {
            named.insert(format!("gate.layer{l}.w"), Tensor::zeros(&[config.d, 1]));
        }
        Self::from_named(&config, named)
    }
}
