//! Optimizers, the seeded training loop, and gradient-dynamics collection.
//!
//! Training is deterministic per (config, seed) in single-worker mode: all
//! randomness comes from ChaCha streams derived from the config seed, and
//! every float reduction runs in a fixed order.

use serde::{Deserialize, Serialize};

use crate::datagen::{make_batch, Dictionary, LatentState, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::DiffGraph;
use crate::metrics;
use crate::model::{
    forward_graph, EncoderBinding, EncoderParams, GateBinding, GateParams, MaskStrategy,
};
use crate::objective::{build_total_loss, SimilarityConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Feature-activation threshold used by every activation-based statistic.
pub const ACTIVATION_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Lars { trust_coef: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    /// Gate learning rate = gate_lr_scale * backbone_lr.
    pub gate_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda: f64,
    pub rho: f64,
    pub normalize: bool,
    /// Average both views' KL instead of the anchor's only.
    pub symmetric_kl: bool,
    /// Feed stop_gradient(z) to the gating head.
    pub detach: bool,
    pub strategy: MaskStrategy,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record AF/GV/SC every this many epochs; 0 disables collection.
    pub stats_every: usize,
    /// Evaluation-set size for statistics passes.
    pub stats_samples: usize,
    /// Epochs trained without the mask before gating engages. Keeps the
    /// encoder's bootstrap independent of an uncommitted gate.
    #[serde(default)]
    pub gate_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            backbone_lr: 0.1,
            gate_lr_scale: 0.25,
            momentum: 0.9,
            weight_decay: 0.0,
            tau: 0.5,
            lambda: 3e-5,
            rho: 0.8,
            normalize: true,
            symmetric_kl: false,
            detach: true,
            strategy: MaskStrategy::None,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            stats_every: 0,
            stats_samples: 256,
            gate_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn gate_lr(&self) -> f64 {
        self.gate_lr_scale * self.backbone_lr
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            temperature: self.tau,
            normalize: self.normalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("backbone_lr", self.backbone_lr),
            ("gate_lr_scale", self.gate_lr_scale),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if v < 0.0 {
                return Err(Error::Contract(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::Contract("tau must be > 0".into()));
        }
        if self.strategy.uses_gate() && !(0.0 < self.rho && self.rho < 1.0) {
            return Err(Error::Contract(format!("rho {} outside (0,1)", self.rho)));
        }
        if self.batch_size < 2 {
            return Err(Error::Contract("batch_size must be >= 2".into()));
        }
        self.strategy.validate()
    }
}

/// Encoder topology. Gating head width always equals `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub hidden: Vec<usize>,
    pub gate_depth: usize,
    pub nonneg: bool,
    /// Initial bias of the gating head's output layer. logit(rho) starts
    /// the posterior at the prior with every mask on, which avoids the
    /// noisy half-open transient of a zero init.
    #[serde(default)]
    pub gate_bias_init: f64,
}

impl ModelConfig {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.k);
        dims
    }
}

/// logit of a probability; handy for gate bias initialization at the prior.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub velocity: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn matching(params: &[&Tensor]) -> Self {
        OptState {
            velocity: params
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
            step: 0,
        }
    }
}

fn check_opt_shapes(params: &[&mut Tensor], grads: &[&Tensor], state: &OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape("optimizer", "param/grad/state counts differ"));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("optimizer", "tensor shape mismatch"));
        }
    }
    Ok(())
}

/// Momentum SGD: v <- momentum*v + grad + wd*w; w <- w - lr*v.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_opt_shapes(params, grads, state)?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// Layer-wise adaptive scaling: each tensor's step is multiplied by
/// trust_coef * |w| / (|g| + wd*|w| + 1e-9); zero-norm parameters stay put.
pub fn lars_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptState,
    lr: f64,
    trust_coef: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_opt_shapes(params, grads, state)?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let w_norm = p.frob_norm();
        let g_norm = g.frob_norm();
        let local_lr = if w_norm == 0.0 {
            0.0
        } else {
            trust_coef * w_norm / (g_norm + weight_decay * w_norm + 1e-9)
        };
        let eff = lr * local_lr;
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= eff * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// Fixed evaluation pairs plus ground truth for the statistics passes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub labels: Vec<usize>,
    pub latents: Option<Vec<LatentState>>,
}

/// Source of seeded training batches and a fixed evaluation set.
pub trait DataSource {
    fn input_dim(&self) -> usize;
    fn batches_per_epoch(&self) -> usize;
    fn train_batch(&mut self, n: usize) -> Result<(Tensor, Tensor)>;
    fn eval_set(&mut self, n: usize) -> Result<EvalSet>;
}

/// Infinite stream of synthetic pairs; the evaluation set is drawn once
/// from an independent stream and cached.
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
    pub dict: Dictionary,
    batches_per_epoch: usize,
    train_rng: Rng,
    eval_cache: Option<EvalSet>,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticSpec, batches_per_epoch: usize) -> Result<Self> {
        let dict = crate::datagen::build_dictionary(&spec)?;
        let train_rng = Rng::with_stream(spec.seed, 1);
        Ok(SyntheticSource {
            spec,
            dict,
            batches_per_epoch,
            train_rng,
            eval_cache: None,
        })
    }
}

impl DataSource for SyntheticSource {
    fn input_dim(&self) -> usize {
        self.spec.d
    }

    fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    fn train_batch(&mut self, n: usize) -> Result<(Tensor, Tensor)> {
        let (a, p, _) = make_batch(&self.spec, &self.dict, &mut self.train_rng, n)?;
        Ok((a, p))
    }

    fn eval_set(&mut self, n: usize) -> Result<EvalSet> {
        if self.eval_cache.as_ref().map(|e| e.labels.len()) != Some(n) {
            let mut rng = Rng::with_stream(self.spec.seed, 2);
            let (anchors, positives, latents) = make_batch(&self.spec, &self.dict, &mut rng, n)?;
            let labels = latents.iter().map(|l| l.class_id).collect();
            self.eval_cache = Some(EvalSet {
                anchors,
                positives,
                labels,
                latents: Some(latents),
            });
        }
        Ok(self.eval_cache.clone().unwrap())
    }
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub align: f64,
    pub sparsity: f64,
    pub total: f64,
    pub act_ratio: f64,
}

/// Per-dimension statistics captured at one checkpoint epoch.
///
/// Gradient statistics are collected across the checkpoint epoch's actual
/// training steps: each step contributes one per-dimension pull
/// `sum_i dL_batch/dz_ik` measured on the anchor view's raw features, and
/// GV is the variance of that pull over steps. The optimization conflict
/// manifests as step-to-step sign oscillation of these pulls;
/// within-batch per-sample dispersion does not expose it.
#[derive(Debug, Clone)]
pub struct GradStatsSnapshot {
    pub epoch: usize,
    /// Activation frequency: fraction of eval samples with z_k > eps.
    pub af: Vec<f64>,
    /// Variance across the epoch's steps of the per-dimension pull.
    pub gv: Vec<f64>,
    /// Mean across the epoch's steps of the per-dimension pull.
    pub grad_mean: Vec<f64>,
    /// Per-dimension semantic consistency on the raw features; None where
    /// the dimension never activates.
    pub sc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct GradStatsLog {
    pub snapshots: Vec<GradStatsSnapshot>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub encoder: EncoderParams,
    pub gate: Option<GateParams>,
    pub opt_encoder: OptState,
    pub opt_gate: Option<OptState>,
    pub stats: GradStatsLog,
    pub epoch_rows: Vec<EpochRow>,
}

fn collect_layer_tensors(enc: &EncoderParams) -> Vec<&Tensor> {
    enc.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

/// Build one training step's graph and return (graph, loss nodes, anchor z
/// node id) for gradient extraction.
fn step_graph(
    encoder: &EncoderParams,
    gate: Option<&GateParams>,
    cfg: &TrainConfig,
    anchors: &Tensor,
    positives: &Tensor,
    rng: &mut Rng,
) -> Result<(
    DiffGraph,
    crate::objective::LossNodes,
    crate::model::ForwardGraph,
    EncoderBinding,
    Option<GateBinding>,
)> {
    let mut g = DiffGraph::new();
    let enc_binding = EncoderBinding::bind(&mut g, encoder)?;
    let gate_binding = match gate {
        Some(gp) => Some(GateBinding::bind(&mut g, gp)?),
        None => None,
    };
    let xa = g.constant(anchors.clone());
    let xp = g.constant(positives.clone());
    let fwd_a = forward_graph(
        &mut g,
        &enc_binding,
        gate_binding.as_ref(),
        cfg.strategy,
        xa,
        cfg.detach,
        rng,
    )?;
    let fwd_p = forward_graph(
        &mut g,
        &enc_binding,
        gate_binding.as_ref(),
        cfg.strategy,
        xp,
        cfg.detach,
        rng,
    )?;
    let loss = build_total_loss(
        &mut g,
        &fwd_a,
        &fwd_p,
        &cfg.similarity(),
        cfg.lambda,
        cfg.rho,
        cfg.symmetric_kl,
    )?;
    Ok((g, loss, fwd_a, enc_binding, gate_binding))
}

fn first_nonfinite_diagnostic(g: &DiffGraph) -> String {
    for idx in 0..g.len() {
        let id = crate::graph::NodeId(idx);
        if let Some((r, c)) = g.value(id).first_nonfinite() {
            return format!("graph node {idx} at entry ({r}, {c})");
        }
    }
    "loss scalar".to_string()
}

/// Assemble a snapshot from an epoch's per-step gradient pulls plus an
/// evaluation pass for AF and SC on the raw features.
fn snapshot_from_pulls(
    encoder: &EncoderParams,
    eval: &EvalSet,
    epoch: usize,
    pulls: &[Vec<f64>],
) -> Result<GradStatsSnapshot> {
    let n = eval.anchors.rows();
    let k = encoder.output_dim();
    let z_full = crate::model::encode(encoder, &eval.anchors)?;

    let mut af = vec![0.0; k];
    for j in 0..k {
        let active = (0..n).filter(|&i| z_full.get(i, j) > ACTIVATION_EPS).count();
        af[j] = active as f64 / n as f64;
    }
    let sc = metrics::semantic_consistency(&z_full, &eval.labels, ACTIVATION_EPS)
        .map(|r| r.per_dim)
        .unwrap_or_else(|_| vec![None; k]);

    let steps = pulls.len().max(1) as f64;
    let mut gv = vec![0.0; k];
    let mut grad_mean = vec![0.0; k];
    for j in 0..k {
        let m = pulls.iter().map(|p| p[j]).sum::<f64>() / steps;
        let var = pulls.iter().map(|p| (p[j] - m) * (p[j] - m)).sum::<f64>() / steps;
        grad_mean[j] = m;
        gv[j] = var;
    }
    Ok(GradStatsSnapshot {
        epoch,
        af,
        gv,
        grad_mean,
        sc,
    })
}

/// Run the full loop. Deterministic per (config, seed); aborts on the first
/// non-finite loss with a diagnostic naming the offending tensor.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    source: &mut dyn DataSource,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut init_rng = Rng::with_stream(cfg.seed, 10);
    let mut encoder = EncoderParams::init(&model.dims(source.input_dim()), model.nonneg, &mut init_rng)?;
    let mut gate = if cfg.strategy.uses_gate() {
        let mut g = GateParams::init(model.k, model.gate_depth, &mut init_rng)?;
        if model.gate_bias_init != 0.0 {
            if let Some(last) = g.layers.last_mut() {
                last.bias = Tensor::filled(1, model.k, model.gate_bias_init);
            }
        }
        Some(g)
    } else {
        None
    };

    let mut opt_encoder = OptState::matching(&collect_layer_tensors(&encoder));
    let mut opt_gate = gate.as_ref().map(|gp| {
        OptState::matching(&gp.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect::<Vec<_>>())
    });

    let mut mask_rng = Rng::with_stream(cfg.seed, 11);
    let mut stats_rng = Rng::with_stream(cfg.seed, 12);
    let mut epoch_rows = Vec::with_capacity(cfg.epochs);
    let mut stats = GradStatsLog::default();
    let trust = match cfg.optimizer {
        OptimizerKind::Lars { trust_coef } => trust_coef,
        OptimizerKind::Sgd => 0.0,
    };

    let eval = if cfg.stats_every > 0 || cfg.epochs > 0 {
        Some(source.eval_set(cfg.stats_samples)?)
    } else {
        None
    };

    for epoch in 1..=cfg.epochs {
        let mut align_acc = 0.0;
        let mut sparsity_acc = 0.0;
        let steps = source.batches_per_epoch().max(1);
        let warming = epoch <= cfg.gate_warmup_epochs;
        let snapshot_epoch = cfg.stats_every > 0 && epoch % cfg.stats_every == 0;
        let mut pulls: Vec<Vec<f64>> = Vec::new();
        let step_cfg = if warming {
            let mut c = cfg.clone();
            c.strategy = MaskStrategy::None;
            c
        } else {
            cfg.clone()
        };
        for _ in 0..steps {
            let (anchors, positives) = source.train_batch(cfg.batch_size)?;
            let (g, loss, fwd_a, enc_binding, gate_binding) = step_graph(
                &encoder,
                if warming { None } else { gate.as_ref() },
                &step_cfg,
                &anchors,
                &positives,
                &mut mask_rng,
            )?;
            let breakdown = loss.breakdown(&g, cfg.lambda)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}: {}",
                    first_nonfinite_diagnostic(&g)
                )));
            }
            align_acc += breakdown.align;
            sparsity_acc += breakdown.sparsity;

            let grads = g.backward(loss.total)?;
            if snapshot_epoch {
                // Per-dimension pull over samples where the feature is
                // active: for a relu output this equals the bias gradient,
                // so it is free of the boundary shadow price of pinned
                // coordinates.
                let z = g.value(fwd_a.z);
                let k = z.cols();
                let pull = match grads.get(fwd_a.z) {
                    Some(zg) => (0..k)
                        .map(|j| {
                            (0..zg.rows())
                                .filter(|&i| z.get(i, j) > ACTIVATION_EPS)
                                .map(|i| zg.get(i, j))
                                .sum()
                        })
                        .collect(),
                    None => vec![0.0; k],
                };
                pulls.push(pull);
            }
            // Encoder update.
            {
                let ids = enc_binding.param_ids();
                let zeros: Vec<Tensor> = ids
                    .iter()
                    .map(|&id| Tensor::zeros(g.value(id).rows(), g.value(id).cols()))
                    .collect();
                let grad_refs: Vec<&Tensor> = ids
                    .iter()
                    .zip(&zeros)
                    .map(|(&id, z)| grads.get(id).unwrap_or(z))
                    .collect();
                let mut param_refs: Vec<&mut Tensor> = Vec::new();
                for layer in encoder.layers.iter_mut() {
                    param_refs.push(&mut layer.weight);
                    param_refs.push(&mut layer.bias);
                }
                match cfg.optimizer {
                    OptimizerKind::Sgd => sgd_step(
                        &mut param_refs,
                        &grad_refs,
                        &mut opt_encoder,
                        cfg.backbone_lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?,
                    OptimizerKind::Lars { .. } => lars_step(
                        &mut param_refs,
                        &grad_refs,
                        &mut opt_encoder,
                        cfg.backbone_lr,
                        trust,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?,
                }
            }
            // Gate update.
            if let (Some(gp), Some(binding), Some(state)) =
                (gate.as_mut(), gate_binding.as_ref(), opt_gate.as_mut())
            {
                let ids = binding.param_ids();
                let zeros: Vec<Tensor> = ids
                    .iter()
                    .map(|&id| Tensor::zeros(g.value(id).rows(), g.value(id).cols()))
                    .collect();
                let grad_refs: Vec<&Tensor> = ids
                    .iter()
                    .zip(&zeros)
                    .map(|(&id, z)| grads.get(id).unwrap_or(z))
                    .collect();
                let mut param_refs: Vec<&mut Tensor> = Vec::new();
                for layer in gp.layers.iter_mut() {
                    param_refs.push(&mut layer.weight);
                    param_refs.push(&mut layer.bias);
                }
                match cfg.optimizer {
                    OptimizerKind::Sgd => sgd_step(
                        &mut param_refs,
                        &grad_refs,
                        state,
                        cfg.gate_lr(),
                        cfg.momentum,
                        cfg.weight_decay,
                    )?,
                    OptimizerKind::Lars { .. } => lars_step(
                        &mut param_refs,
                        &grad_refs,
                        state,
                        cfg.gate_lr(),
                        trust,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?,
                }
            }
        }

        // Epoch bookkeeping on the fixed eval set: activation ratio of the
        // gated representation.
        let act_ratio = if let Some(eval) = &eval {
            let fwd = crate::model::forward_infer(
                &encoder,
                gate.as_ref(),
                cfg.strategy,
                &eval.anchors,
                &mut stats_rng,
            )?;
            metrics::activation_ratio(&fwd.z_gated, ACTIVATION_EPS)
        } else {
            0.0
        };
        let steps_f = steps as f64;
        let align = align_acc / steps_f;
        let sparsity = sparsity_acc / steps_f;
        epoch_rows.push(EpochRow {
            epoch,
            align,
            sparsity,
            total: align + cfg.lambda * sparsity,
            act_ratio,
        });

        if snapshot_epoch {
            let eval = eval.as_ref().expect("eval set present when stats_every > 0");
            stats
                .snapshots
                .push(snapshot_from_pulls(&encoder, eval, epoch, &pulls)?);
        }
    }

    Ok(TrainOutput {
        encoder,
        gate,
        opt_encoder,
        opt_gate,
        stats,
        epoch_rows,
    })
}

/// Serialize epoch rows as the `metrics.csv` format.
pub fn epoch_rows_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,align,sparsity,total,act_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.align, r.sparsity, r.total, r.act_ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_lr_keeps_params() {
        let mut w = Tensor::from_vec(1, 2, vec![1.0, -2.0]);
        let g = Tensor::from_vec(1, 2, vec![0.5, 0.5]);
        let mut state = OptState::matching(&[&w]);
        sgd_step(&mut [&mut w], &[&g], &mut state, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_no_momentum_is_plain_descent() {
        let mut w = Tensor::from_vec(1, 1, vec![2.0]);
        let g = Tensor::from_vec(1, 1, vec![0.5]);
        let mut state = OptState::matching(&[&w]);
        sgd_step(&mut [&mut w], &[&g], &mut state, 0.1, 0.0, 0.0).unwrap();
        assert!((w.get(0, 0) - 1.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_recurrence_by_hand() {
        // w=1, g=1, momentum 0.9, lr 0.1: after two steps w = 0.71.
        let mut w = Tensor::from_vec(1, 1, vec![1.0]);
        let g = Tensor::from_vec(1, 1, vec![1.0]);
        let mut state = OptState::matching(&[&w]);
        sgd_step(&mut [&mut w], &[&g], &mut state, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut [&mut w], &[&g], &mut state, 0.1, 0.9, 0.0).unwrap();
        assert!((w.get(0, 0) - 0.71).abs() < 1e-12, "{}", w.get(0, 0));
        assert_eq!(state.step, 2);
    }

    #[test]
    fn lars_local_lr_hand_values() {
        // w=2, g=1, wd=0, trust=0.001 -> local_lr ~= 0.002.
        let mut w = Tensor::from_vec(1, 1, vec![2.0]);
        let g = Tensor::from_vec(1, 1, vec![1.0]);
        let mut state = OptState::matching(&[&w]);
        lars_step(&mut [&mut w], &[&g], &mut state, 1.0, 0.001, 0.0, 0.0).unwrap();
        let step = 2.0 - w.get(0, 0);
        assert!((step - 0.002).abs() < 1e-8, "step {step}");
    }

    #[test]
    fn lars_zero_norm_param_is_frozen() {
        let mut w = Tensor::zeros(1, 3);
        let g = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let mut state = OptState::matching(&[&w]);
        lars_step(&mut [&mut w], &[&g], &mut state, 1.0, 0.001, 0.0, 0.0).unwrap();
        assert_eq!(w, Tensor::zeros(1, 3));
    }

    #[test]
    fn lars_step_scales_with_trust_coef() {
        let run = |trust: f64| {
            let mut w = Tensor::from_vec(1, 2, vec![1.0, 1.0]);
            let g = Tensor::from_vec(1, 2, vec![0.3, -0.4]);
            let mut state = OptState::matching(&[&w]);
            lars_step(&mut [&mut w], &[&g], &mut state, 1.0, trust, 0.0, 0.0).unwrap();
            1.0 - w.get(0, 0)
        };
        let s1 = run(0.001);
        let s2 = run(0.002);
        assert!((s2 / s1 - 2.0).abs() < 1e-9);
    }

    fn quick_cfg(strategy: MaskStrategy, epochs: usize, seed: u64) -> (TrainConfig, ModelConfig) {
        let cfg = TrainConfig {
            epochs,
            batch_size: 16,
            backbone_lr: 0.05,
            strategy,
            seed,
            stats_every: 0,
            stats_samples: 64,
            lambda: 1e-3,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            k: 12,
            hidden: vec![16],
            gate_depth: 2,
            nonneg: true,
            gate_bias_init: 0.0,
        };
        (cfg, model)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (cfg, model) = quick_cfg(MaskStrategy::None, 0, 3);
        let spec = SyntheticSpec::default_desk(3);
        let mut src = SyntheticSource::new(spec.clone(), 2).unwrap();
        let out = train(&cfg, &model, &mut src).unwrap();
        let mut init_rng = Rng::with_stream(3, 10);
        let fresh = EncoderParams::init(&model.dims(spec.d), true, &mut init_rng).unwrap();
        assert_eq!(out.encoder, fresh);
        assert!(out.epoch_rows.is_empty());
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let (cfg, model) = quick_cfg(MaskStrategy::Ste, 2, 5);
        let run = || {
            let mut src = SyntheticSource::new(SyntheticSpec::default_desk(5), 2).unwrap();
            train(&cfg, &model, &mut src).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.gate, b.gate);
        for (ra, rb) in a.epoch_rows.iter().zip(&b.epoch_rows) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        }
    }

    #[test]
    fn lr_zero_and_no_decay_keeps_params_across_epoch() {
        let (mut cfg, model) = quick_cfg(MaskStrategy::None, 1, 7);
        cfg.backbone_lr = 0.0;
        cfg.weight_decay = 0.0;
        let spec = SyntheticSpec::default_desk(7);
        let mut src = SyntheticSource::new(spec.clone(), 3).unwrap();
        let out = train(&cfg, &model, &mut src).unwrap();
        let mut init_rng = Rng::with_stream(7, 10);
        let fresh = EncoderParams::init(&model.dims(spec.d), true, &mut init_rng).unwrap();
        assert_eq!(out.encoder, fresh);
    }

    #[test]
    fn detach_keeps_sparsity_gradient_out_of_encoder() {
        // With detach on, perturbing lambda must not change encoder grads.
        let spec = SyntheticSpec::default_desk(11);
        let mut src = SyntheticSource::new(spec, 1).unwrap();
        let (mut cfg, model) = quick_cfg(MaskStrategy::Ste, 1, 11);
        cfg.detach = true;
        let (anchors, positives) = src.train_batch(8).unwrap();
        let mut rng = Rng::with_stream(11, 20);
        let mut enc_rng = Rng::with_stream(11, 10);
        let encoder = EncoderParams::init(&model.dims(64), true, &mut enc_rng).unwrap();
        let gate = GateParams::init(model.k, 2, &mut enc_rng).unwrap();

        let grads_at = |lambda: f64, rng: &mut Rng| {
            let mut c = cfg.clone();
            c.lambda = lambda;
            let (g, loss, _, enc_binding, _) =
                step_graph(&encoder, Some(&gate), &c, &anchors, &positives, rng).unwrap();
            let grads = g.backward(loss.total).unwrap();
            enc_binding
                .param_ids()
                .iter()
                .map(|&id| grads.get(id).cloned().unwrap())
                .collect::<Vec<_>>()
        };
        let mut rng2 = rng.clone();
        let g1 = grads_at(0.0, &mut rng);
        let g2 = grads_at(10.0, &mut rng2);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn af_is_monotone_in_eps() {
        let z = Tensor::from_vec(3, 2, vec![0.0, 0.5, 1e-6, 0.2, 0.3, 0.0]);
        let af_at = |eps: f64| {
            (0..2)
                .map(|j| {
                    (0..3).filter(|&i| z.get(i, j) > eps).count() as f64 / 3.0
                })
                .collect::<Vec<_>>()
        };
        let coarse = af_at(1e-1);
        let fine = af_at(1e-7);
        for (c, f) in coarse.iter().zip(&fine) {
            assert!(c <= f);
        }
    }

    #[test]
    fn stats_snapshots_recorded_on_schedule() {
        let (mut cfg, model) = quick_cfg(MaskStrategy::Ste, 4, 13);
        cfg.stats_every = 2;
        cfg.stats_samples = 32;
        let mut src = SyntheticSource::new(SyntheticSpec::default_desk(13), 2).unwrap();
        let out = train(&cfg, &model, &mut src).unwrap();
        let epochs: Vec<usize> = out.stats.snapshots.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![2, 4]);
        for snap in &out.stats.snapshots {
            assert_eq!(snap.af.len(), model.k);
            assert!(snap.af.iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert!(snap.gv.iter().all(|&v| v >= 0.0));
        }
    }
}
