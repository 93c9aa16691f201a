//! Synthetic compositional data with known latent structure, plus CIFAR-10
//! ingestion for one real-data run.
//!
//! Samples are built as `x = D * v + noise`, where `D` holds one unit-norm
//! atom per latent factor (class atoms first, then background atoms) and
//! `v` carries per-factor intensities. Both views of a pair share the
//! latent class and the set of active backgrounds; intensities and noise
//! are redrawn per view. Background factor `b` is active with probability
//! `prevalence[b]` globally, which is exactly the knob the gating theory
//! is about.

mod cifar;

pub use cifar::load_cifar10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Input dimensionality.
    pub d: usize,
    /// Latent class count.
    pub m: usize,
    /// Background factor count.
    pub b: usize,
    /// Per-background activation probability, length `b`, each in (0,1).
    pub prevalence: Vec<f64>,
    /// Intensity draw range `[lo, hi]` for active factors.
    pub intensity_range: (f64, f64),
    /// Stddev of additive Gaussian observation noise.
    pub noise_sigma: f64,
    /// Class prior, length `m`, sums to 1.
    pub class_prior: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk-scale defaults: high-prevalence backgrounds create conflicting
    /// dimensions by construction.
    pub fn default_desk(seed: u64) -> Self {
        let m = 10;
        SyntheticSpec {
            d: 64,
            m,
            b: 4,
            prevalence: vec![0.9; 4],
            intensity_range: (0.8, 1.2),
            noise_sigma: 0.05,
            class_prior: vec![1.0 / m as f64; m],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < self.m + self.b {
            return Err(Error::Contract(format!(
                "d = {} must be >= m + b = {}",
                self.d,
                self.m + self.b
            )));
        }
        if self.class_prior.len() != self.m {
            return Err(Error::Contract("class_prior length != m".into()));
        }
        let total: f64 = self.class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "class_prior sums to {total}, expected 1"
            )));
        }
        if self.prevalence.len() != self.b {
            return Err(Error::Contract("prevalence length != b".into()));
        }
        if self.prevalence.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Contract("prevalence entries must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.intensity_range;
        if lo > hi {
            return Err(Error::Contract(format!("intensity range [{lo}, {hi}] has lo > hi")));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Contract("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Total latent factor count m + b.
    pub fn factor_count(&self) -> usize {
        self.m + self.b
    }

    /// Global prevalence of every factor: class priors first, then
    /// background probabilities. This is the ground-truth pi vector the
    /// oracle similarity uses.
    pub fn factor_prevalence(&self) -> Vec<f64> {
        let mut pi = self.class_prior.clone();
        pi.extend_from_slice(&self.prevalence);
        pi
    }
}

/// Unit-norm atom dictionary, one column per latent factor. Class atoms
/// occupy the first `m` columns, background atoms the rest.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub atoms: Tensor,
    pub class_count: usize,
    pub background_count: usize,
    /// Largest off-diagonal |<a_i, a_j>|, reported at construction.
    pub mutual_coherence: f64,
}

/// Hidden ground truth attached to each sample pair; evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub class_id: usize,
    pub class_intensity: f64,
    pub bg_active: Vec<bool>,
    pub bg_intensity: Vec<f64>,
}

impl LatentState {
    /// 0/1 indicator over all m + b factors.
    pub fn factor_indicator(&self, class_count: usize) -> Vec<f64> {
        let mut v = vec![0.0; class_count + self.bg_active.len()];
        v[self.class_id] = 1.0;
        for (b, &on) in self.bg_active.iter().enumerate() {
            if on {
                v[class_count + b] = 1.0;
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub x: Vec<f64>,
    pub x_plus: Vec<f64>,
    pub latent: LatentState,
}

/// Feature/label set for probing and metrics.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub class_count: usize,
}

impl LabeledSet {
    pub fn validate(&self) -> Result<()> {
        if self.x.rows() != self.y.len() {
            return Err(Error::Contract("labels do not align with rows".into()));
        }
        if let Some(&bad) = self.y.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Contract(format!(
                "label {bad} out of range [0,{})",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// Seeded Gaussian atoms, orthogonalized by one Gram-Schmidt pass and
/// unit-normalized. Deterministic per spec seed.
pub fn build_dictionary(spec: &SyntheticSpec) -> Result<Dictionary> {
    spec.validate()?;
    let cols = spec.factor_count();
    let mut rng = Rng::with_stream(spec.seed, 0xD1C7);
    // Column-major scratch: each atom is a d-vector.
    let mut atoms: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..spec.d).map(|_| rng.normal()).collect())
        .collect();
    for j in 0..cols {
        for prev in 0..j {
            let dot: f64 = atoms[j].iter().zip(&atoms[prev]).map(|(a, b)| a * b).sum();
            let prev_atom = atoms[prev].clone();
            for (a, p) in atoms[j].iter_mut().zip(prev_atom) {
                *a -= dot * p;
            }
        }
        let norm: f64 = atoms[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Contract(
                "degenerate dictionary atom after orthogonalization".into(),
            ));
        }
        for a in atoms[j].iter_mut() {
            *a /= norm;
        }
    }
    let mut t = Tensor::zeros(spec.d, cols);
    for (j, atom) in atoms.iter().enumerate() {
        for (i, &v) in atom.iter().enumerate() {
            t.set(i, j, v);
        }
    }
    let mut coherence = 0.0_f64;
    for i in 0..cols {
        for j in (i + 1)..cols {
            let dot: f64 = atoms[i].iter().zip(&atoms[j]).map(|(a, b)| a * b).sum();
            coherence = coherence.max(dot.abs());
        }
    }
    Ok(Dictionary {
        atoms: t,
        class_count: spec.m,
        background_count: spec.b,
        mutual_coherence: coherence,
    })
}

fn render_view(
    spec: &SyntheticSpec,
    dict: &Dictionary,
    latent: &LatentState,
    rng: &mut Rng,
) -> (Vec<f64>, f64, Vec<f64>) {
    let (lo, hi) = spec.intensity_range;
    let class_intensity = rng.uniform_in(lo, hi);
    let bg_intensity: Vec<f64> = latent
        .bg_active
        .iter()
        .map(|&on| if on { rng.uniform_in(lo, hi) } else { 0.0 })
        .collect();
    let mut x = vec![0.0; spec.d];
    for i in 0..spec.d {
        let mut acc = class_intensity * dict.atoms.get(i, latent.class_id);
        for (b, &w) in bg_intensity.iter().enumerate() {
            if w != 0.0 {
                acc += w * dict.atoms.get(i, spec.m + b);
            }
        }
        x[i] = acc;
    }
    if spec.noise_sigma > 0.0 {
        for v in x.iter_mut() {
            *v += spec.noise_sigma * rng.normal();
        }
    }
    (x, class_intensity, bg_intensity)
}

/// Draw one positive pair: shared class and background set, independently
/// redrawn intensities and noise per view.
pub fn sample_pair(spec: &SyntheticSpec, dict: &Dictionary, rng: &mut Rng) -> SamplePair {
    let class_id = rng.categorical(&spec.class_prior);
    let bg_active: Vec<bool> = spec.prevalence.iter().map(|&p| rng.bernoulli(p)).collect();
    let proto = LatentState {
        class_id,
        class_intensity: 0.0,
        bg_active,
        bg_intensity: vec![0.0; spec.b],
    };
    let (x, ci, bi) = render_view(spec, dict, &proto, rng);
    let (x_plus, _, _) = render_view(spec, dict, &proto, rng);
    SamplePair {
        x,
        x_plus,
        latent: LatentState {
            class_intensity: ci,
            bg_intensity: bi,
            ..proto
        },
    }
}

/// Draw a pair that is semantically disjoint (different classes) but shares
/// an identical background-active set; used by the error-reduction check.
pub fn sample_disjoint_pair(
    spec: &SyntheticSpec,
    dict: &Dictionary,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>, LatentState, LatentState)> {
    if spec.m < 2 {
        return Err(Error::Contract(
            "need at least two classes for a disjoint pair".into(),
        ));
    }
    let c1 = rng.categorical(&spec.class_prior);
    let c2 = loop {
        let c = rng.categorical(&spec.class_prior);
        if c != c1 {
            break c;
        }
    };
    let bg_active: Vec<bool> = spec.prevalence.iter().map(|&p| rng.bernoulli(p)).collect();
    let mk = |class_id: usize| LatentState {
        class_id,
        class_intensity: 0.0,
        bg_active: bg_active.clone(),
        bg_intensity: vec![0.0; spec.b],
    };
    let proto1 = mk(c1);
    let proto2 = mk(c2);
    let (x1, i1, b1) = render_view(spec, dict, &proto1, rng);
    let (x2, i2, b2) = render_view(spec, dict, &proto2, rng);
    Ok((
        x1,
        x2,
        LatentState {
            class_intensity: i1,
            bg_intensity: b1,
            ..proto1
        },
        LatentState {
            class_intensity: i2,
            bg_intensity: b2,
            ..proto2
        },
    ))
}

/// Stack `n` independent pairs into row-aligned anchor/positive tensors.
pub fn make_batch(
    spec: &SyntheticSpec,
    dict: &Dictionary,
    rng: &mut Rng,
    n: usize,
) -> Result<(Tensor, Tensor, Vec<LatentState>)> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "batch size {n} < 2: every anchor needs at least one in-batch negative"
        )));
    }
    let mut anchors = Tensor::zeros(n, spec.d);
    let mut positives = Tensor::zeros(n, spec.d);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let pair = sample_pair(spec, dict, rng);
        anchors.row_mut(i).copy_from_slice(&pair.x);
        positives.row_mut(i).copy_from_slice(&pair.x_plus);
        latents.push(pair.latent);
    }
    Ok((anchors, positives, latents))
}

/// Write a labeled feature set as CSV with header `label,f0,...,f{d-1}`.
pub fn write_labeled_csv(set: &LabeledSet, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    set.validate()?;
    let mut out = String::new();
    out.push_str("label");
    for j in 0..set.x.cols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..set.x.rows() {
        out.push_str(&set.y[i].to_string());
        for &v in set.x.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a `label,f0,...` CSV back into a labeled set.
pub fn read_labeled_csv(path: &std::path::Path) -> Result<LabeledSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    let cols = header.split(',').count();
    if cols < 2 || !header.starts_with("label") {
        return Err(Error::Data {
            path: path.display().to_string(),
            detail: "expected header label,f0,...".into(),
        });
    }
    let d = cols - 1;
    let mut y = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data {
                path: path.display().to_string(),
                detail: format!("bad label on data line {}", lineno + 1),
            })?;
        let feats: Vec<f64> = fields
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data {
                path: path.display().to_string(),
                detail: format!("bad float on data line {}: {e}", lineno + 1),
            })?;
        if feats.len() != d {
            return Err(Error::Data {
                path: path.display().to_string(),
                detail: format!("line {} has {} features, expected {d}", lineno + 1, feats.len()),
            });
        }
        y.push(label);
        rows.push(feats);
    }
    let class_count = y.iter().copied().max().map_or(0, |m| m + 1);
    Ok(LabeledSet {
        x: Tensor::from_rows(&rows)?,
        y,
        class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_columns_unit_norm() {
        let spec = SyntheticSpec {
            d: 32,
            m: 10,
            b: 4,
            prevalence: vec![0.9; 4],
            intensity_range: (0.8, 1.2),
            noise_sigma: 0.05,
            class_prior: vec![0.1; 10],
            seed: 5,
        };
        let dict = build_dictionary(&spec).unwrap();
        assert_eq!(dict.atoms.shape(), (32, 14));
        for j in 0..14 {
            let norm: f64 = (0..32)
                .map(|i| dict.atoms.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-10, "column {j} norm {norm}");
        }
        assert!(dict.mutual_coherence < 0.3, "{}", dict.mutual_coherence);
    }

    #[test]
    fn dictionary_deterministic_per_seed() {
        let spec = SyntheticSpec::default_desk(42);
        let a = build_dictionary(&spec).unwrap();
        let b = build_dictionary(&spec).unwrap();
        assert_eq!(a.atoms, b.atoms);
    }

    #[test]
    fn dictionary_rejects_insufficient_dim() {
        let mut spec = SyntheticSpec::default_desk(1);
        spec.d = 8;
        spec.m = 6;
        spec.b = 4;
        spec.class_prior = vec![1.0 / 6.0; 6];
        assert!(build_dictionary(&spec).is_err());
    }

    #[test]
    fn degenerate_prevalence_zero_and_one() {
        let mut spec = SyntheticSpec::default_desk(3);
        spec.prevalence = vec![0.0; 4];
        let dict = build_dictionary(&spec).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let p = sample_pair(&spec, &dict, &mut rng);
            assert!(p.latent.bg_active.iter().all(|&b| !b));
        }
        spec.prevalence = vec![1.0; 4];
        for _ in 0..50 {
            let p = sample_pair(&spec, &dict, &mut rng);
            assert!(p.latent.bg_active.iter().all(|&b| b));
        }
    }

    #[test]
    fn background_rate_matches_bernoulli_mean() {
        let mut spec = SyntheticSpec::default_desk(17);
        spec.m = 2;
        spec.b = 1;
        spec.class_prior = vec![0.5, 0.5];
        spec.prevalence = vec![0.5];
        let dict = build_dictionary(&spec).unwrap();
        let mut rng = Rng::new(4);
        let n = 10_000;
        let mut active = 0usize;
        for _ in 0..n {
            if sample_pair(&spec, &dict, &mut rng).latent.bg_active[0] {
                active += 1;
            }
        }
        let rate = active as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn noiseless_unit_intensity_reconstructs_exactly() {
        let mut spec = SyntheticSpec::default_desk(23);
        spec.noise_sigma = 0.0;
        spec.intensity_range = (1.0, 1.0);
        let dict = build_dictionary(&spec).unwrap();
        let mut rng = Rng::new(7);
        let pair = sample_pair(&spec, &dict, &mut rng);
        let ind = pair.latent.factor_indicator(spec.m);
        for i in 0..spec.d {
            let expected: f64 = (0..spec.factor_count())
                .map(|f| ind[f] * dict.atoms.get(i, f))
                .sum();
            assert!((pair.x[i] - expected).abs() < 1e-12);
            assert!((pair.x_plus[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_shapes_and_determinism() {
        let spec = SyntheticSpec::default_desk(2);
        let dict = build_dictionary(&spec).unwrap();
        let (a1, p1, l1) = make_batch(&spec, &dict, &mut Rng::new(8), 4).unwrap();
        let (a2, p2, l2) = make_batch(&spec, &dict, &mut Rng::new(8), 4).unwrap();
        assert_eq!(a1.shape(), (4, 64));
        assert_eq!(p1.shape(), (4, 64));
        assert_eq!(a1, a2);
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert!(make_batch(&spec, &dict, &mut Rng::new(8), 1).is_err());
    }

    #[test]
    fn pair_views_share_latent_structure() {
        let spec = SyntheticSpec::default_desk(31);
        let dict = build_dictionary(&spec).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let p = sample_pair(&spec, &dict, &mut rng);
            // Shared class and background set is a construction invariant;
            // nothing here can fail unless render_view diverges from it.
            for (b, &on) in p.latent.bg_active.iter().enumerate() {
                if !on {
                    assert_eq!(p.latent.bg_intensity[b], 0.0);
                }
            }
        }
    }

    #[test]
    fn labeled_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.csv");
        let set = LabeledSet {
            x: Tensor::from_vec(2, 3, vec![0.5, 1.0, -2.0, 0.0, 3.25, 4.0]),
            y: vec![1, 0],
            class_count: 2,
        };
        write_labeled_csv(&set, &path).unwrap();
        let back = read_labeled_csv(&path).unwrap();
        assert_eq!(back.x, set.x);
        assert_eq!(back.y, set.y);
    }
}
