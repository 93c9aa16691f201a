//! Interpretability metrics, linear probe, retrieval, and rank correlation.
//!
//! A dimension j is *active* on sample i when |z_ij| > eps. Per-dimension
//! scores are computed over each dimension's active set and averaged over
//! dimensions that activate at least once. Entropies are in nats.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Active-sample index sets per dimension.
fn active_sets(features: &Tensor, eps: f64) -> Vec<Vec<usize>> {
    (0..features.cols())
        .map(|j| {
            (0..features.rows())
                .filter(|&i| features.get(i, j).abs() > eps)
                .collect()
        })
        .collect()
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

#[derive(Debug, Clone)]
pub struct PerDimReport {
    /// Score per dimension; None where the dimension never activates.
    pub per_dim: Vec<Option<f64>>,
    /// Mean over active dimensions.
    pub mean: f64,
}

fn mean_over_active(per_dim: &[Option<f64>]) -> Result<f64> {
    let vals: Vec<f64> = per_dim.iter().filter_map(|v| *v).collect();
    if vals.is_empty() {
        return Err(Error::Contract("no active dimensions".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Dominance of the most frequent class among samples activating each
/// dimension.
pub fn semantic_consistency(
    features: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<PerDimReport> {
    if features.rows() != labels.len() {
        return Err(Error::shape("semantic_consistency", "labels/rows mismatch"));
    }
    if features.rows() == 0 {
        return Err(Error::Contract("empty feature set".into()));
    }
    let classes = class_count(labels);
    let per_dim: Vec<Option<f64>> = active_sets(features, eps)
        .into_iter()
        .map(|set| {
            if set.is_empty() {
                return None;
            }
            let mut counts = vec![0usize; classes];
            for &i in &set {
                counts[labels[i]] += 1;
            }
            let top = *counts.iter().max().unwrap();
            Some(top as f64 / set.len() as f64)
        })
        .collect();
    let mean = mean_over_active(&per_dim)?;
    Ok(PerDimReport { per_dim, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyMode {
    /// Distribution of total activation magnitude per class.
    Sum,
    /// Distribution of class-mean activation, normalized for imbalance.
    Mean,
    /// Distribution of activation counts per class.
    Freq,
}

/// Entropy (nats) of each dimension's class distribution under the chosen
/// weighting; 0 log 0 is taken as 0.
pub fn semantic_entropy(
    features: &Tensor,
    labels: &[usize],
    mode: EntropyMode,
    eps: f64,
) -> Result<PerDimReport> {
    if features.rows() != labels.len() {
        return Err(Error::shape("semantic_entropy", "labels/rows mismatch"));
    }
    let classes = class_count(labels);
    let mut class_sizes = vec![0usize; classes];
    for &y in labels {
        class_sizes[y] += 1;
    }
    let per_dim: Vec<Option<f64>> = active_sets(features, eps)
        .into_iter()
        .enumerate()
        .map(|(j, set)| {
            if set.is_empty() {
                return None;
            }
            let mut weight = vec![0.0f64; classes];
            for &i in &set {
                let mag = features.get(i, j).abs();
                match mode {
                    EntropyMode::Sum => weight[labels[i]] += mag,
                    EntropyMode::Mean => weight[labels[i]] += mag,
                    EntropyMode::Freq => weight[labels[i]] += 1.0,
                }
            }
            if mode == EntropyMode::Mean {
                for (w, &n) in weight.iter_mut().zip(&class_sizes) {
                    if n > 0 {
                        *w /= n as f64;
                    }
                }
            }
            let total: f64 = weight.iter().sum();
            if total <= 0.0 {
                return Some(0.0);
            }
            let h = weight
                .iter()
                .map(|&w| {
                    let p = w / total;
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            Some(h)
        })
        .collect();
    let mean = mean_over_active(&per_dim)?;
    Ok(PerDimReport { per_dim, mean })
}

/// Fraction of dimensions active on at least one sample.
pub fn activation_ratio(features: &Tensor, eps: f64) -> f64 {
    if features.cols() == 0 {
        return 0.0;
    }
    let active = active_sets(features, eps)
        .iter()
        .filter(|s| !s.is_empty())
        .count();
    active as f64 / features.cols() as f64
}

/// Aggregate interpretability report matching the CSV column order
/// `cons,h_sum,h_mean,h_freq,act`.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub sc_per_dim: Vec<Option<f64>>,
    pub sc_mean: f64,
    pub h_sum: f64,
    pub h_mean: f64,
    pub h_freq: f64,
    pub activation_ratio: f64,
    pub active_dims: Vec<usize>,
}

pub fn metrics_report(features: &Tensor, labels: &[usize], eps: f64) -> Result<MetricsReport> {
    let sc = semantic_consistency(features, labels, eps)?;
    let h_sum = semantic_entropy(features, labels, EntropyMode::Sum, eps)?.mean;
    let h_mean = semantic_entropy(features, labels, EntropyMode::Mean, eps)?.mean;
    let h_freq = semantic_entropy(features, labels, EntropyMode::Freq, eps)?.mean;
    let active_dims = sc
        .per_dim
        .iter()
        .enumerate()
        .filter_map(|(j, v)| v.map(|_| j))
        .collect();
    Ok(MetricsReport {
        sc_mean: sc.mean,
        sc_per_dim: sc.per_dim,
        h_sum,
        h_mean,
        h_freq,
        activation_ratio: activation_ratio(features, eps),
        active_dims,
    })
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.5,
            epochs: 200,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Multinomial logistic regression on frozen features by full-batch
/// gradient descent; deterministic (zero init, fixed order).
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::shape("linear_probe", "labels/rows mismatch"));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::shape("linear_probe", "train/test width mismatch"));
    }
    let classes = class_count(train_y).max(class_count(test_y));
    if classes < 2 {
        return Err(Error::Contract(
            "degenerate single-class training set".into(),
        ));
    }
    let (n, d) = train_x.shape();
    let mut w = Tensor::zeros(d, classes);
    let mut b = Tensor::zeros(1, classes);

    let softmax_rows = |logits: &mut Tensor| {
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    };

    for _ in 0..cfg.epochs {
        let mut logits = train_x.matmul(&w)?;
        for i in 0..n {
            for (v, bias) in logits.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        softmax_rows(&mut logits);
        // residual = P - Y
        for (i, &y) in train_y.iter().enumerate() {
            let v = logits.get(i, y);
            logits.set(i, y, v - 1.0);
        }
        let grad_w = train_x.transpose().matmul(&logits)?.scale(1.0 / n as f64);
        let mut grad_b = Tensor::zeros(1, classes);
        for i in 0..n {
            for (gb, &r) in grad_b.row_mut(0).iter_mut().zip(logits.row(i)) {
                *gb += r / n as f64;
            }
        }
        w = w
            .zip_map(&grad_w, |wv, gv| wv - cfg.lr * (gv + cfg.weight_decay * wv))
            .expect("shapes fixed");
        b = b.zip_map(&grad_b, |bv, gv| bv - cfg.lr * gv).expect("shapes fixed");
    }

    // Test accuracy.
    let mut logits = test_x.matmul(&w)?;
    for i in 0..logits.rows() {
        for (v, bias) in logits.row_mut(i).iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    let k_top = 5.min(classes);
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    for (i, &y) in test_y.iter().enumerate() {
        let row = logits.row(i);
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        if order[0] == y {
            top1_hits += 1;
        }
        if order[..k_top].contains(&y) {
            top5_hits += 1;
        }
    }
    let nt = test_y.len() as f64;
    Ok(ProbeResult {
        top1: top1_hits as f64 / nt,
        top5: top5_hits as f64 / nt,
        weights: w,
        bias: b,
    })
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// (k, precision@k) in the order requested.
    pub precision_at: Vec<(usize, f64)>,
    /// Feature dimensions actually used, by descending activation mass.
    pub selected_dims: Vec<usize>,
}

/// Label-match precision of exact cosine retrieval, optionally restricted
/// to the `select_dims` dimensions with the largest total activation mass
/// over the gallery (ties toward the lower index). A query is excluded from
/// its own gallery when the two sets are identical.
pub fn retrieval(
    query_x: &Tensor,
    query_y: &[usize],
    gallery_x: &Tensor,
    gallery_y: &[usize],
    ks: &[usize],
    select_dims: Option<usize>,
) -> Result<RetrievalResult> {
    if query_x.cols() != gallery_x.cols() {
        return Err(Error::shape("retrieval", "query/gallery width mismatch"));
    }
    if query_x.rows() != query_y.len() || gallery_x.rows() != gallery_y.len() {
        return Err(Error::shape("retrieval", "labels/rows mismatch"));
    }
    let k_dims = query_x.cols();
    let keep = select_dims.unwrap_or(k_dims);
    if keep > k_dims {
        return Err(Error::Contract(format!(
            "select_dims {keep} exceeds feature width {k_dims}"
        )));
    }
    let same_set = query_x == gallery_x && query_y == gallery_y;
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let available = gallery_x.rows() - usize::from(same_set);
    if max_k > available {
        return Err(Error::Contract(format!(
            "k {max_k} exceeds gallery size {available}"
        )));
    }

    // Rank dimensions by total |activation| over the gallery.
    let mut mass: Vec<(usize, f64)> = (0..k_dims)
        .map(|j| {
            let m = (0..gallery_x.rows())
                .map(|i| gallery_x.get(i, j).abs())
                .sum::<f64>();
            (j, m)
        })
        .collect();
    mass.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let selected: Vec<usize> = mass.iter().take(keep).map(|&(j, _)| j).collect();

    let project = |t: &Tensor, i: usize| -> Vec<f64> {
        selected.iter().map(|&j| t.get(i, j)).collect()
    };
    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let gallery_proj: Vec<Vec<f64>> = (0..gallery_x.rows()).map(|i| project(gallery_x, i)).collect();
    let mut precision_sums = vec![0.0f64; ks.len()];
    for qi in 0..query_x.rows() {
        let q = project(query_x, qi);
        let mut scored: Vec<(usize, f64)> = gallery_proj
            .iter()
            .enumerate()
            .filter(|&(gi, _)| !(same_set && gi == qi))
            .map(|(gi, g)| (gi, cosine(&q, g)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        for (slot, &k) in ks.iter().enumerate() {
            let hits = scored[..k]
                .iter()
                .filter(|&&(gi, _)| gallery_y[gi] == query_y[qi])
                .count();
            precision_sums[slot] += hits as f64 / k as f64;
        }
    }
    let nq = query_x.rows() as f64;
    Ok(RetrievalResult {
        precision_at: ks
            .iter()
            .zip(precision_sums)
            .map(|(&k, s)| (k, s / nq))
            .collect(),
        selected_dims: selected,
    })
}

/// Average ranks with ties sharing the mean of their positions (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", "length mismatch"));
    }
    if x.len() < 3 {
        return Err(Error::Contract(format!(
            "spearman needs length >= 3, got {}",
            x.len()
        )));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Contract("constant input".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
