//! Non-negative MLP encoder, gating head, and mask strategies.
//!
//! The trainable forward pass is expressed on a [`DiffGraph`]: parameters
//! are bound once per graph (so both views share them and gradients
//! accumulate), hard masks are sampled outside the graph and inserted as
//! constants, and the straight-through trick is spelled out with
//! `stop_gradient`:
//!
//! ```text
//! m_train = sg[m_hard - alpha] + alpha     // forward == m_hard, d/d alpha == 1
//! ```
//!
//! A plain tensor-level forward ([`forward_infer`]) mirrors the same
//! arithmetic for evaluation passes that never need gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DiffGraph, NodeId};
use crate::rng::Rng;
use crate::tensor::{stable_sigmoid, Tensor};

/// One affine layer: `weight` is in x out, `bias` is 1 x out.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        // Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases.
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Layer {
            weight: Tensor::from_vec(fan_in, fan_out, data),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

/// Feature encoder. Hidden activations are relu; the output activation is
/// relu in non-negative mode and identity otherwise (the plain-contrastive
/// baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub nonneg_output: bool,
}

impl EncoderParams {
    /// `dims` chains input through hiddens to the feature width K.
    pub fn init(dims: &[usize], nonneg_output: bool, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract("encoder needs at least one layer".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer::init(w[0], w[1], rng))
            .collect();
        Ok(EncoderParams {
            layers,
            nonneg_output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::shape("encoder", format!("layer {i} bias shape")));
            }
            if i > 0 && self.layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::shape(
                    "encoder",
                    format!("layer {} out {} != layer {i} in {}",
                        i - 1,
                        self.layers[i - 1].weight.cols(),
                        l.weight.rows()),
                ));
            }
        }
        Ok(())
    }
}

/// Gating head: depth in {1,2,3}, every width K, sigmoid on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub layers: Vec<Layer>,
}

impl GateParams {
    pub fn init(k: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(Error::Contract(format!("gate depth {depth} not in 1..=3")));
        }
        let layers = (0..depth).map(|_| Layer::init(k, k, rng)).collect();
        Ok(GateParams { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }
}

/// Which mask the forward pass applies to the raw features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Hard threshold of the gate probabilities with straight-through
    /// gradients.
    Ste,
    /// Binary-concrete relaxation with logistic noise at `temperature`.
    GumbelSigmoid { temperature: f64 },
    /// Continuous gating: the mask is the probability itself.
    Soft,
    /// Deterministic per-sample top-k of the raw features, k = round(rho*K).
    TopK { rho: f64 },
    /// No gating (plain contrastive / non-negative baselines).
    None,
}

impl MaskStrategy {
    pub fn uses_gate(&self) -> bool {
        matches!(
            self,
            MaskStrategy::Ste | MaskStrategy::GumbelSigmoid { .. } | MaskStrategy::Soft
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MaskStrategy::GumbelSigmoid { temperature } if *temperature <= 0.0 => Err(
                Error::Contract(format!("gumbel temperature {temperature} must be > 0")),
            ),
            MaskStrategy::TopK { rho } if !(0.0..=1.0).contains(rho) => {
                Err(Error::Contract(format!("topk rho {rho} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// The named method variants used in reports and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cl,
    Ncl,
    NclTopk,
    BayesnclSte,
    BayesnclGs,
    BayesnclSoft,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Cl,
        Method::Ncl,
        Method::NclTopk,
        Method::BayesnclSte,
        Method::BayesnclGs,
        Method::BayesnclSoft,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Cl => "cl",
            Method::Ncl => "ncl",
            Method::NclTopk => "ncl_topk",
            Method::BayesnclSte => "bayesncl_ste",
            Method::BayesnclGs => "bayesncl_gs",
            Method::BayesnclSoft => "bayesncl_soft",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label() == s)
    }

    /// Encoder output constrained non-negative for everything except the
    /// plain-contrastive baseline.
    pub fn nonneg(&self) -> bool {
        !matches!(self, Method::Cl)
    }

    pub fn strategy(&self, rho: f64, gumbel_temperature: f64) -> MaskStrategy {
        match self {
            Method::Cl | Method::Ncl => MaskStrategy::None,
            Method::NclTopk => MaskStrategy::TopK { rho },
            Method::BayesnclSte => MaskStrategy::Ste,
            Method::BayesnclGs => MaskStrategy::GumbelSigmoid {
                temperature: gumbel_temperature,
            },
            Method::BayesnclSoft => MaskStrategy::Soft,
        }
    }
}

/// All tensors produced by one inference forward.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Raw features, n x K; entrywise >= 0 in non-negative mode.
    pub z: Tensor,
    /// Gate probabilities in (0,1); absent for gateless strategies.
    pub alpha: Option<Tensor>,
    /// Forward mask. Binary for ste/gumbel/topk/none; equals alpha for soft.
    pub m_hard: Tensor,
    /// Mask the backward pass differentiates through; equals `m_hard`
    /// entrywise in ste mode.
    pub m_train: Tensor,
    /// z (.) m_train.
    pub z_gated: Tensor,
}

/// Pure-tensor encoder forward.
pub fn encode(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    params.validate()?;
    if x.cols() != params.input_dim() {
        return Err(Error::shape(
            "encode",
            format!("input cols {} != encoder in {}", x.cols(), params.input_dim()),
        ));
    }
    let mut h = x.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut a = h.matmul(&layer.weight)?;
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(layer.bias.row(0)) {
                *v += b;
            }
        }
        let activate = i < last || params.nonneg_output;
        h = if activate {
            a.map(|v| if v > 0.0 { v } else { 0.0 })
        } else {
            a
        };
    }
    Ok(h)
}

/// Pure-tensor gate probabilities alpha = sigmoid(MLP(z)). The `detach`
/// flag has no observable effect here (no gradients); it matters in the
/// graph builder.
pub fn gate_alpha(params: &GateParams, z: &Tensor) -> Result<Tensor> {
    if z.cols() != params.width() {
        return Err(Error::shape(
            "gate_alpha",
            format!("features {} != gate width {}", z.cols(), params.width()),
        ));
    }
    let mut h = z.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut a = h.matmul(&layer.weight)?;
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(layer.bias.row(0)) {
                *v += b;
            }
        }
        h = if i < last {
            a.map(|v| if v > 0.0 { v } else { 0.0 })
        } else {
            a.map(stable_sigmoid)
        };
    }
    Ok(h)
}

/// Threshold rule shared by every strategy: strictly greater than 1/2, so
/// alpha == 0.5 exactly gates OFF.
pub fn hard_threshold(alpha: &Tensor) -> Tensor {
    alpha.map(|a| if a > 0.5 { 1.0 } else { 0.0 })
}

/// Per-row indicator of the `k` largest entries; ties broken toward the
/// lower index for reproducibility.
pub fn topk_mask(z: &Tensor, rho: f64) -> Tensor {
    let k = (rho * z.cols() as f64).round() as usize;
    let k = k.min(z.cols());
    let mut mask = Tensor::zeros(z.rows(), z.cols());
    let mut order: Vec<usize> = Vec::with_capacity(z.cols());
    for i in 0..z.rows() {
        order.clear();
        order.extend(0..z.cols());
        let row = z.row(i);
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            mask.set(i, j, 1.0);
        }
    }
    mask
}

/// Logistic noise for the binary-concrete relaxation: g1 - g2 with both
/// draws standard Gumbel.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gumbel() - rng.gumbel())
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn gumbel_train_mask(alpha: &Tensor, noise: &Tensor, temperature: f64) -> Result<Tensor> {
    alpha.zip_map(noise, |a, g| {
        let logit = a.ln() - (1.0 - a).ln();
        stable_sigmoid((logit + g) / temperature)
    })
}

/// Build (m_hard, m_train) tensors for a strategy. `z` is consulted only by
/// the top-k rule; `rng` only by the gumbel rule.
pub fn make_mask(
    alpha: Option<&Tensor>,
    strategy: MaskStrategy,
    z: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    strategy.validate()?;
    let need_alpha = || {
        alpha.ok_or_else(|| Error::Contract("strategy requires gate probabilities".into()))
    };
    match strategy {
        MaskStrategy::Ste => {
            let hard = hard_threshold(need_alpha()?);
            Ok((hard.clone(), hard))
        }
        MaskStrategy::GumbelSigmoid { temperature } => {
            let alpha = need_alpha()?;
            let noise = gumbel_noise(alpha.rows(), alpha.cols(), rng);
            let train = gumbel_train_mask(alpha, &noise, temperature)?;
            let hard = hard_threshold(&train);
            Ok((hard, train))
        }
        MaskStrategy::Soft => {
            let a = need_alpha()?.clone();
            Ok((a.clone(), a))
        }
        MaskStrategy::TopK { rho } => {
            let mask = topk_mask(z, rho);
            Ok((mask.clone(), mask))
        }
        MaskStrategy::None => {
            let ones = Tensor::ones(z.rows(), z.cols());
            Ok((ones.clone(), ones))
        }
    }
}

/// Inference forward: encode, gate, mask, apply.
pub fn forward_infer(
    encoder: &EncoderParams,
    gate: Option<&GateParams>,
    strategy: MaskStrategy,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<ForwardOut> {
    let z = encode(encoder, x)?;
    let alpha = match (strategy.uses_gate(), gate) {
        (true, Some(g)) => Some(gate_alpha(g, &z)?),
        (true, None) => {
            return Err(Error::Contract(
                "strategy requires a gating head but none was given".into(),
            ))
        }
        (false, _) => None,
    };
    let (m_hard, m_train) = make_mask(alpha.as_ref(), strategy, &z, rng)?;
    let z_gated = z.mul_elem(&m_train)?;
    Ok(ForwardOut {
        z,
        alpha,
        m_hard,
        m_train,
        z_gated,
    })
}

/// Encoder parameters bound into a graph; reusable across views.
#[derive(Debug, Clone)]
pub struct EncoderBinding {
    layer_ids: Vec<(NodeId, NodeId)>,
    nonneg_output: bool,
}

impl EncoderBinding {
    pub fn bind(g: &mut DiffGraph, params: &EncoderParams) -> Result<Self> {
        params.validate()?;
        let layer_ids = params
            .layers
            .iter()
            .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
            .collect();
        Ok(EncoderBinding {
            layer_ids,
            nonneg_output: params.nonneg_output,
        })
    }

    /// Parameter node ids in (weight, bias) pairs, layer order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layer_ids.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Append the encoder computation for one input batch node.
    pub fn forward(&self, g: &mut DiffGraph, x: NodeId) -> Result<NodeId> {
        let n = g.value(x).rows();
        let ones = g.constant(Tensor::ones(n, 1));
        let mut h = x;
        let last = self.layer_ids.len() - 1;
        for (i, &(w, b)) in self.layer_ids.iter().enumerate() {
            let xw = g.matmul(h, w)?;
            let bias_rows = g.matmul(ones, b)?;
            let a = g.add(xw, bias_rows)?;
            h = if i < last || self.nonneg_output {
                g.relu(a)?
            } else {
                a
            };
        }
        Ok(h)
    }
}

/// Gating head bound into a graph.
#[derive(Debug, Clone)]
pub struct GateBinding {
    layer_ids: Vec<(NodeId, NodeId)>,
}

impl GateBinding {
    pub fn bind(g: &mut DiffGraph, params: &GateParams) -> Result<Self> {
        let layer_ids = params
            .layers
            .iter()
            .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
            .collect();
        Ok(GateBinding { layer_ids })
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layer_ids.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// alpha = sigmoid(MLP(input)); with `detach` the head consumes
    /// stop_gradient(z), so the sparsity term cannot reach the encoder.
    pub fn alpha(&self, g: &mut DiffGraph, z: NodeId, detach: bool) -> Result<NodeId> {
        let mut h = if detach { g.stop_gradient(z)? } else { z };
        let n = g.value(z).rows();
        let ones = g.constant(Tensor::ones(n, 1));
        let last = self.layer_ids.len() - 1;
        for (i, &(w, b)) in self.layer_ids.iter().enumerate() {
            let xw = g.matmul(h, w)?;
            let bias_rows = g.matmul(ones, b)?;
            let a = g.add(xw, bias_rows)?;
            h = if i < last { g.relu(a)? } else { g.sigmoid(a)? };
        }
        Ok(h)
    }
}

/// Node handles for one view's trainable forward.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub z: NodeId,
    pub alpha: Option<NodeId>,
    /// Sampled/thresholded forward mask (tensor, lives outside the graph
    /// for ste/topk/none; node value for gumbel/soft).
    pub m_hard: Tensor,
    pub m_train: Option<NodeId>,
    pub z_gated: NodeId,
}

/// Append one view's encode -> gate -> mask -> apply pipeline.
pub fn forward_graph(
    g: &mut DiffGraph,
    encoder: &EncoderBinding,
    gate: Option<&GateBinding>,
    strategy: MaskStrategy,
    x: NodeId,
    detach: bool,
    rng: &mut Rng,
) -> Result<ForwardGraph> {
    strategy.validate()?;
    let z = encoder.forward(g, x)?;
    let alpha = match (strategy.uses_gate(), gate) {
        (true, Some(gate)) => Some(gate.alpha(g, z, detach)?),
        (true, None) => {
            return Err(Error::Contract(
                "strategy requires a gating head but none was bound".into(),
            ))
        }
        (false, _) => None,
    };

    let (m_hard, m_train) = match strategy {
        MaskStrategy::Ste => {
            let a = alpha.unwrap();
            let hard = hard_threshold(g.value(a));
            let hard_const = g.constant(hard.clone());
            let diff = g.sub(hard_const, a)?;
            let pinned = g.stop_gradient(diff)?;
            let m_train = g.add(pinned, a)?;
            (hard, Some(m_train))
        }
        MaskStrategy::GumbelSigmoid { temperature } => {
            let a = crate::objective::build_alpha_guard(g, alpha.unwrap())?;
            let (rows, cols) = g.value(a).shape();
            let noise = g.constant(gumbel_noise(rows, cols, rng));
            let ones = g.constant(Tensor::ones(rows, cols));
            let log_a = g.log(a)?;
            let one_minus = g.sub(ones, a)?;
            let log_1ma = g.log(one_minus)?;
            let logit = g.sub(log_a, log_1ma)?;
            let shifted = g.add(logit, noise)?;
            let scaled = g.scale(shifted, 1.0 / temperature)?;
            let m_train = g.sigmoid(scaled)?;
            let hard = hard_threshold(g.value(m_train));
            (hard, Some(m_train))
        }
        MaskStrategy::Soft => {
            let a = alpha.unwrap();
            (g.value(a).clone(), Some(a))
        }
        MaskStrategy::TopK { rho } => {
            let mask = topk_mask(g.value(z), rho);
            let mask_const = g.constant(mask.clone());
            (mask, Some(mask_const))
        }
        MaskStrategy::None => {
            let (rows, cols) = g.value(z).shape();
            (Tensor::ones(rows, cols), None)
        }
    };

    let z_gated = match m_train {
        Some(m) => g.mul(z, m)?,
        None => z,
    };
    Ok(ForwardGraph {
        z,
        alpha,
        m_hard,
        m_train,
        z_gated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_encoder(nonneg: bool) -> EncoderParams {
        // Single identity-ish layer, 3 -> 3.
        EncoderParams {
            layers: vec![Layer {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(1, 3),
            }],
            nonneg_output: nonneg,
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let enc = EncoderParams {
            layers: vec![Layer {
                weight: Tensor::zeros(3, 2),
                bias: Tensor::zeros(1, 2),
            }],
            nonneg_output: true,
        };
        let z = encode(&enc, &Tensor::from_vec(2, 3, vec![1.0; 6])).unwrap();
        assert_eq!(z, Tensor::zeros(2, 2));
    }

    #[test]
    fn nonneg_mode_clamps_negatives() {
        let z = encode(
            &toy_encoder(true),
            &Tensor::from_vec(1, 3, vec![-2.0, 0.0, 1.5]),
        )
        .unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 1.5]);
        let z = encode(
            &toy_encoder(false),
            &Tensor::from_vec(1, 3, vec![-2.0, 0.0, 1.5]),
        )
        .unwrap();
        assert_eq!(z.data(), &[-2.0, 0.0, 1.5]);
    }

    #[test]
    fn zero_gate_outputs_half() {
        let gate = GateParams {
            layers: vec![Layer {
                weight: Tensor::zeros(3, 3),
                bias: Tensor::zeros(1, 3),
            }],
        };
        let alpha = gate_alpha(&gate, &Tensor::from_vec(1, 3, vec![1.0, -1.0, 7.0])).unwrap();
        assert_eq!(alpha.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn ste_threshold_rule() {
        let alpha = Tensor::from_vec(1, 3, vec![0.7, 0.3, 0.5]);
        let mut rng = Rng::new(0);
        let z = Tensor::ones(1, 3);
        let (hard, train) = make_mask(Some(&alpha), MaskStrategy::Ste, &z, &mut rng).unwrap();
        // 0.5 exactly gates OFF (strict inequality).
        assert_eq!(hard.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(train.data(), hard.data());
    }

    #[test]
    fn gumbel_zero_noise_recovers_alpha() {
        let alpha = Tensor::from_vec(1, 1, vec![0.7]);
        let noise = Tensor::zeros(1, 1);
        let m = gumbel_train_mask(&alpha, &noise, 1.0).unwrap();
        assert!((m.get(0, 0) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gumbel_temperature_contract() {
        let strategy = MaskStrategy::GumbelSigmoid { temperature: 0.0 };
        assert!(strategy.validate().is_err());
    }

    #[test]
    fn topk_cardinality_and_tie_breaking() {
        let z = Tensor::from_vec(2, 4, vec![0.5, 2.0, 2.0, 0.1, 3.0, 3.0, 3.0, 3.0]);
        let mask = topk_mask(&z, 0.5); // k = 2
        assert_eq!(mask.row(0), &[0.0, 1.0, 1.0, 0.0]);
        // All tied: lower indices win.
        assert_eq!(mask.row(1), &[1.0, 1.0, 0.0, 0.0]);
        for i in 0..2 {
            let count: f64 = mask.row(i).iter().sum();
            assert_eq!(count, 2.0);
        }
    }

    #[test]
    fn strategy_none_passes_features_through() {
        let enc = toy_encoder(true);
        let mut rng = Rng::new(1);
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.0, -1.0]);
        let out = forward_infer(&enc, None, MaskStrategy::None, &x, &mut rng).unwrap();
        assert_eq!(out.z_gated, out.z);
        assert!(out.alpha.is_none());
    }

    #[test]
    fn ste_forward_values_track_threshold() {
        // Gate biased hard positive -> all alpha > 0.5 -> z_gated == z.
        let enc = toy_encoder(true);
        let mut gate = GateParams::init(3, 1, &mut Rng::new(2)).unwrap();
        gate.layers[0].weight = Tensor::zeros(3, 3);
        gate.layers[0].bias = Tensor::filled(1, 3, 4.0);
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.1, 0.2]);
        let mut rng = Rng::new(3);
        let out =
            forward_infer(&enc, Some(&gate), MaskStrategy::Ste, &x, &mut rng).unwrap();
        assert_eq!(out.z_gated, out.z);
        // Biased hard negative -> all off.
        gate.layers[0].bias = Tensor::filled(1, 3, -4.0);
        let out =
            forward_infer(&enc, Some(&gate), MaskStrategy::Ste, &x, &mut rng).unwrap();
        assert_eq!(out.z_gated, Tensor::zeros(2, 3));
    }

    #[test]
    fn graph_ste_contract_forward_and_jacobian() {
        // m_train forward equals m_hard bit for bit; d(sum m_train)/d alpha
        // is exactly the identity, checked against the oracle.
        let mut g = DiffGraph::new();
        let alpha = g.param(Tensor::from_vec(1, 4, vec![0.9, 0.2, 0.51, 0.499]));
        let hard = hard_threshold(g.value(alpha));
        let hard_const = g.constant(hard.clone());
        let diff = g.sub(hard_const, alpha).unwrap();
        let pinned = g.stop_gradient(diff).unwrap();
        let m_train = g.add(pinned, alpha).unwrap();
        assert_eq!(g.value(m_train), &hard);
        let summed = g.row_sum(m_train).unwrap();
        let out = g.mean_all(summed).unwrap();
        let grads = g.backward(out).unwrap();
        for &v in grads.get(alpha).unwrap().data() {
            assert_eq!(v, 1.0);
        }
        // The surrogate is exactly linear in alpha, so the only finite
        // difference error is cancellation; eps = 1e-4 keeps it ~1e-12.
        let err = g.grad_check(out, 1e-4).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn detach_blocks_encoder_gradient_from_sparsity_path() {
        // f = mean(alpha(sg(z))): gradient w.r.t. encoder params must be
        // exactly absent when detached and generically nonzero otherwise.
        for detach in [true, false] {
            let mut g = DiffGraph::new();
            let mut rng = Rng::new(5);
            let enc_params = EncoderParams::init(&[2, 3], true, &mut rng).unwrap();
            let gate_params = GateParams::init(3, 2, &mut rng).unwrap();
            let enc = EncoderBinding::bind(&mut g, &enc_params).unwrap();
            let gate = GateBinding::bind(&mut g, &gate_params).unwrap();
            let x = g.constant(Tensor::from_vec(2, 2, vec![0.4, -0.3, 1.2, 0.8]));
            let z = enc.forward(&mut g, x).unwrap();
            let alpha = gate.alpha(&mut g, z, detach).unwrap();
            let out = g.mean_all(alpha).unwrap();
            let grads = g.backward(out).unwrap();
            let enc_weight_grad = grads.get(enc.param_ids()[0]);
            if detach {
                assert!(enc_weight_grad.is_none());
            } else {
                assert!(enc_weight_grad.unwrap().frob_norm() > 0.0);
            }
        }
    }

    #[test]
    fn gumbel_limit_matches_bernoulli() {
        // As T -> 0+, the hard mask is Bernoulli(alpha); 3-sigma binomial
        // band over 10^4 draws.
        let alpha = Tensor::from_vec(1, 1, vec![0.7]);
        let mut rng = Rng::new(12);
        let n = 10_000;
        let mut ones = 0usize;
        for _ in 0..n {
            let (hard, _) = make_mask(
                Some(&alpha),
                MaskStrategy::GumbelSigmoid { temperature: 1e-4 },
                &alpha,
                &mut rng,
            )
            .unwrap();
            if hard.get(0, 0) == 1.0 {
                ones += 1;
            }
        }
        let mean = ones as f64 / n as f64;
        let sigma = (0.7 * 0.3 / n as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * sigma, "mean {mean}");
    }
}
