//! The gate layer over encoder outputs.
//!
//! Each source position `i` gets `log αᵢ = xᵢ · w` from a bias-free predictor.
//! In training the gate is a HardConcrete sample; at test time it is the
//! deterministic expected gate. Gated rows are `gᵢ · xᵢ`, so a closed gate
//! yields an exact zero row.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hardconcrete::{self, HardConcreteParams};
use crate::numcore::{kernels, Graph, Real, RngState, Tensor, Var};

/// Per-position gate state for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub log_alphas: Vec<f64>,
    pub gates: Vec<f64>,
    pub open_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
}

impl GateSet {
    fn from_parts(log_alphas: Vec<f64>, mut gates: Vec<f64>, pad_mask: Vec<bool>) -> Self {
        for (g, &pad) in gates.iter_mut().zip(&pad_mask) {
            if pad {
                *g = 0.0;
            }
        }
        let open_mask = gates.iter().map(|&g| g > 0.0).collect();
        Self {
            log_alphas,
            gates,
            open_mask,
            pad_mask,
        }
    }

    /// A set with every non-pad gate fixed open (gate 1), used when gating is
    /// disabled or to describe an unpruned baseline.
    pub fn all_open(n: usize) -> Self {
        Self::from_parts(vec![f64::INFINITY; n], vec![1.0; n], vec![false; n])
    }

    /// Binary gates from a deterministic keep/drop rule.
    pub fn from_binary(keep: &[bool]) -> Self {
        let gates = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let las = keep
            .iter()
            .map(|&k| if k { f64::INFINITY } else { f64::NEG_INFINITY })
            .collect();
        Self::from_parts(las, gates, vec![false; keep.len()])
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    /// Non-pad positions.
    pub fn source_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    /// Non-pad positions whose gate is exactly zero.
    pub fn closed_count(&self) -> usize {
        self.gates
            .iter()
            .zip(&self.pad_mask)
            .filter(|(&g, &p)| !p && g == 0.0)
            .count()
    }

    pub fn sparsity(&self) -> Result<f64> {
        sparsity_rate(std::slice::from_ref(self))
    }

    /// Expected number of open gates over non-pad positions.
    pub fn expected_l0(&self, params: &HardConcreteParams) -> f64 {
        let las: Vec<f64> = self
            .log_alphas
            .iter()
            .zip(&self.pad_mask)
            .filter(|(_, &p)| !p)
            .map(|(&la, _)| la)
            .collect();
        hardconcrete::expected_l0(&las, params)
    }

    /// One report line: `token:log_alpha:gate:open` entries separated by spaces.
    pub fn report_line(&self, tokens: &[String]) -> String {
        let mut line = String::new();
        for (i, tok) in tokens.iter().enumerate().take(self.len()) {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(
                line,
                "{}:{:.6}:{:.6}:{}",
                tok,
                self.log_alphas[i],
                self.gates[i],
                u8::from(self.open_mask[i])
            );
        }
        line
    }
}

/// Bias-free gate predictor; `w` has `d` entries and starts at zero, so every
/// initial `log α` is 0 (expected gate 0.5, `P(g=0)` ≈ 0.168).
#[derive(Debug, Clone, PartialEq)]
pub struct GatePredictor<T: Real> {
    pub w: Tensor<T>,
}

impl<T: Real> GatePredictor<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d, 1]),
        }
    }

    pub fn from_slice(w: &[T]) -> Result<Self> {
        Ok(Self {
            w: Tensor::new(&[w.len(), 1], w.to_vec())?,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.numel()
    }
}

fn pad_or_default(pad_mask: Option<&[bool]>, n: usize) -> Result<Vec<bool>> {
    match pad_mask {
        Some(m) if m.len() != n => Err(Error::shape("pad mask", &[n], &[m.len()])),
        Some(m) => Ok(m.to_vec()),
        None => Ok(vec![false; n]),
    }
}

/// `log αᵢ = xᵢ · w` for every row of an `N×d` encoding matrix.
pub fn predict_log_alpha<T: Real>(encodings: &Tensor<T>, w: &[T]) -> Result<Vec<f64>> {
    if encodings.shape().len() != 2 || encodings.cols() != w.len() {
        return Err(Error::shape("predict_log_alpha", encodings.shape(), &[w.len()]));
    }
    Ok((0..encodings.rows())
        .map(|i| kernels::dot(encodings.row(i), w).as_f64())
        .collect())
}

fn scale_rows<T: Real>(encodings: &Tensor<T>, gates: &[f64]) -> Tensor<T> {
    let mut out = encodings.clone();
    out.clear_grad();
    for (i, &g) in gates.iter().enumerate() {
        let g = T::lit(g);
        out.row_mut(i).iter_mut().for_each(|v| *v = *v * g);
    }
    out
}

/// Train-mode gating without gradient tracking: one uniform draw per position.
pub fn apply_gates_train<T: Real>(
    encodings: &Tensor<T>,
    predictor: &GatePredictor<T>,
    params: &HardConcreteParams,
    rng: &mut RngState,
    pad_mask: Option<&[bool]>,
) -> Result<(Tensor<T>, GateSet)> {
    let las = predict_log_alpha(encodings, predictor.w.data())?;
    let pad = pad_or_default(pad_mask, las.len())?;
    let gates = las
        .iter()
        .map(|&la| Ok(hardconcrete::sample_gate(la, params, rng.uniform_open())?.g))
        .collect::<Result<Vec<_>>>()?;
    let set = GateSet::from_parts(las, gates, pad);
    Ok((scale_rows(encodings, &set.gates), set))
}

/// Eval-mode gating: deterministic expected gates.
pub fn apply_gates_eval<T: Real>(
    encodings: &Tensor<T>,
    predictor: &GatePredictor<T>,
    params: &HardConcreteParams,
    pad_mask: Option<&[bool]>,
) -> Result<(Tensor<T>, GateSet)> {
    let las = predict_log_alpha(encodings, predictor.w.data())?;
    let pad = pad_or_default(pad_mask, las.len())?;
    let gates = las.iter().map(|&la| hardconcrete::expected_gate(la, params)).collect();
    let set = GateSet::from_parts(las, gates, pad);
    Ok((scale_rows(encodings, &set.gates), set))
}

/// Applies an externally supplied gate vector (e.g. a rule-based mask).
pub fn apply_fixed_gates<T: Real>(encodings: &Tensor<T>, gates: &GateSet) -> Result<Tensor<T>> {
    if gates.len() != encodings.rows() {
        return Err(Error::shape("fixed gates", encodings.shape(), &[gates.len()]));
    }
    Ok(scale_rows(encodings, &gates.gates))
}

/// Corpus sparsity: closed non-pad gates over all non-pad positions.
pub fn sparsity_rate(gate_sets: &[GateSet]) -> Result<f64> {
    let (closed, total) = gate_sets.iter().fold((0usize, 0usize), |(c, t), s| {
        (c + s.closed_count(), t + s.source_len())
    });
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(closed as f64 / total as f64)
}

/// How gates are applied during a tracked forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// No gate ops at all; the model behaves as the plain Transformer.
    Disabled,
    /// HardConcrete samples with fresh draws from the forward RNG.
    Sampled,
    /// HardConcrete samples with caller-supplied uniform draws, one vector per
    /// gate layer.
    Frozen(&'a [Vec<f64>]),
    /// Deterministic expected gates.
    Expected,
    /// Fixed binary gates for the top layer (rule-based patterns).
    Fixed(&'a [f64]),
}

/// Result of a tracked gate layer.
pub struct TrackedGates {
    pub gated: Var,
    pub log_alpha: Var,
    pub gates: Var,
    pub set: GateSet,
}

/// Tracked `log α` prediction; `w` is a `d×1` node.
pub fn predict_log_alpha_tracked<T: Real>(g: &mut Graph<T>, encodings: Var, w: Var) -> Result<Var> {
    g.matmul(encodings, w)
}

/// Tracked gating with the given uniform draws (one per row).
pub fn apply_gates_train_tracked<T: Real>(
    g: &mut Graph<T>,
    encodings: Var,
    w: Var,
    params: &HardConcreteParams,
    noise: &[f64],
    pad_mask: Option<&[bool]>,
) -> Result<TrackedGates> {
    let log_alpha = predict_log_alpha_tracked(g, encodings, w)?;
    let mut gates = hardconcrete::sample_gates_tracked(g, log_alpha, noise, params)?;
    gates = mask_pads(g, gates, pad_mask)?;
    finish_tracked(g, encodings, log_alpha, gates, pad_mask)
}

/// Tracked expected-gate path.
pub fn apply_gates_eval_tracked<T: Real>(
    g: &mut Graph<T>,
    encodings: Var,
    w: Var,
    params: &HardConcreteParams,
    pad_mask: Option<&[bool]>,
) -> Result<TrackedGates> {
    let log_alpha = predict_log_alpha_tracked(g, encodings, w)?;
    let s = g.sigmoid(log_alpha)?;
    let s = g.scale(s, T::lit(1.0 + 2.0 * params.eps))?;
    let s = g.add_scalar(s, T::lit(-params.eps))?;
    let mut gates = g.clamp(s, T::zero(), T::one())?;
    gates = mask_pads(g, gates, pad_mask)?;
    finish_tracked(g, encodings, log_alpha, gates, pad_mask)
}

fn mask_pads<T: Real>(g: &mut Graph<T>, gates: Var, pad_mask: Option<&[bool]>) -> Result<Var> {
    match pad_mask {
        Some(pad) if pad.iter().any(|&p| p) => {
            let shape = g.shape(gates).to_vec();
            let keep = pad.iter().map(|&p| if p { T::zero() } else { T::one() }).collect();
            let keep = g.constant(Tensor::new(&shape, keep)?);
            g.mul(gates, keep)
        }
        _ => Ok(gates),
    }
}

fn finish_tracked<T: Real>(
    g: &mut Graph<T>,
    encodings: Var,
    log_alpha: Var,
    gates: Var,
    pad_mask: Option<&[bool]>,
) -> Result<TrackedGates> {
    let gated = g.mul_col(encodings, gates)?;
    let n = g.value(gates).numel();
    let pad = pad_or_default(pad_mask, n)?;
    let set = GateSet::from_parts(
        g.value(log_alpha).data().iter().map(|v| v.as_f64()).collect(),
        g.value(gates).data().iter().map(|v| v.as_f64()).collect(),
        pad,
    );
    Ok(TrackedGates {
        gated,
        log_alpha,
        gates,
        set,
    })
}

/// Tracked expected-L0 penalty over non-pad positions.
pub fn penalty_tracked<T: Real>(
    g: &mut Graph<T>,
    log_alpha: Var,
    params: &HardConcreteParams,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let la = match pad_mask {
        Some(pad) if pad.iter().any(|&p| p) => {
            let keep: Vec<usize> = (0..pad.len()).filter(|&i| !pad[i]).collect();
            if keep.is_empty() {
                let zero = g.constant(Tensor::zeros(&[1]));
                return Ok(zero);
            }
            g.index_rows(log_alpha, &keep)?
        }
        _ => log_alpha,
    };
    hardconcrete::expected_l0_tracked(g, la, params)
}

/// Where gate layers sit in the encoder stack.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GatePlacement {
    /// No gate layers: the plain Transformer.
    None,
    /// One gate layer on the final encoder output.
    #[default]
    Top,
    /// A gate layer after every encoder layer.
    PerLayer,
    /// Gate layers after the listed (0-based) encoder layers.
    Layers(Vec<usize>),
}

impl GatePlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "top" => Ok(Self::Top),
            "per-layer" | "per_layer" => Ok(Self::PerLayer),
            other => {
                let layers = other
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Config(format!("unknown gate placement {other:?}")))?;
                Ok(Self::Layers(layers))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Top => "top".into(),
            Self::PerLayer => "per-layer".into(),
            Self::Layers(l) => l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        }
    }
}

/// Which encoder layer outputs are gated. Each gated layer owns a predictor
/// and the penalties of all gate layers are summed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatePlan {
    pub gated_layers: Vec<usize>,
}

impl GatePlan {
    pub fn is_gated(&self, layer: usize) -> bool {
        self.gated_layers.contains(&layer)
    }

    /// The layer whose gates decide which memory rows the decoder sees.
    pub fn top(&self) -> Option<usize> {
        self.gated_layers.last().copied()
    }
}

pub fn place_gates(placement: &GatePlacement, layers: usize) -> Result<GatePlan> {
    let gated_layers = match placement {
        GatePlacement::None => vec![],
        GatePlacement::Top if layers == 0 => {
            return Err(Error::Config("gate placement needs at least one encoder layer".into()))
        }
        GatePlacement::Top => vec![layers - 1],
        GatePlacement::PerLayer => (0..layers).collect(),
        GatePlacement::Layers(ls) => {
            let mut ls = ls.clone();
            ls.sort_unstable();
            ls.dedup();
            if let Some(&bad) = ls.iter().find(|&&l| l >= layers) {
                return Err(Error::Config(format!(
                    "gate layer index {bad} outside encoder depth {layers}"
                )));
            }
            ls
        }
    };
    Ok(GatePlan { gated_layers })
}
