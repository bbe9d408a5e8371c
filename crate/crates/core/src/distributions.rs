//! Latent-state distributions, product-of-experts fusion, divergences,
//! differentiable sampling and the contrastive (InfoNCE) objective.
//!
//! All parameter types hold graph handles: the first axis indexes batch
//! rows. Gaussian parameters are `[N, D]`; categorical logits are
//! `[N, F, C]` (factors × classes) and samples are flattened to `[N, F·C]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to fused categorical probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

/// Latent family and its extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentFamily {
    Gaussian { dim: usize },
    Categorical { factors: usize, classes: usize },
}

impl LatentFamily {
    /// Width of a flattened latent sample.
    pub fn sample_dim(&self) -> usize {
        match *self {
            LatentFamily::Gaussian { dim } => dim,
            LatentFamily::Categorical { factors, classes } => factors * classes,
        }
    }

    /// Width of the raw head output that parameterizes the distribution.
    pub fn param_dim(&self) -> usize {
        match *self {
            LatentFamily::Gaussian { dim } => 2 * dim,
            LatentFamily::Categorical { factors, classes } => factors * classes,
        }
    }
}

/// How categorical experts are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CategoricalAveraging {
    /// Arithmetic mean of probabilities.
    #[default]
    Probability,
    /// Arithmetic mean of normalized log-probabilities.
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianParams {
    pub mean: Var,
    pub std: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoricalParams {
    pub logits: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentParams {
    Gaussian(GaussianParams),
    Categorical(CategoricalParams),
}

/// A latent draw. `value` is `[N, sample_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSample {
    pub value: Var,
    /// Whether gradients reach the distribution parameters through `value`.
    pub pathwise: bool,
}

impl CategoricalParams {
    pub fn probs<S: Scalar>(&self, g: &Graph<S>) -> Var {
        g.softmax(self.logits)
    }
}

impl LatentParams {
    /// Builds parameters from a raw head output `[N, param_dim]`.
    ///
    /// Gaussian: first half is the mean, second half maps to
    /// `softplus(raw) + min_std`.
    pub fn from_head<S: Scalar>(
        g: &Graph<S>,
        family: LatentFamily,
        raw: Var,
        min_std: f64,
    ) -> Result<Self> {
        let rows = g.shape(raw)[0];
        match family {
            LatentFamily::Gaussian { dim } => {
                let mean = g.slice(raw, 0, dim)?;
                let std = g.add_scalar(g.softplus(g.slice(raw, dim, 2 * dim)?), S::from_f64(min_std));
                Ok(LatentParams::Gaussian(GaussianParams { mean, std }))
            }
            LatentFamily::Categorical { factors, classes } => {
                let logits = g.reshape(raw, &[rows, factors, classes])?;
                Ok(LatentParams::Categorical(CategoricalParams { logits }))
            }
        }
    }

    pub fn rows<S: Scalar>(&self, g: &Graph<S>) -> usize {
        match self {
            LatentParams::Gaussian(p) => g.shape(p.mean)[0],
            LatentParams::Categorical(p) => g.shape(p.logits)[0],
        }
    }

    pub fn slice_rows<S: Scalar>(&self, g: &Graph<S>, start: usize, end: usize) -> Result<Self> {
        Ok(match self {
            LatentParams::Gaussian(p) => LatentParams::Gaussian(GaussianParams {
                mean: g.slice_rows(p.mean, start, end)?,
                std: g.slice_rows(p.std, start, end)?,
            }),
            LatentParams::Categorical(p) => LatentParams::Categorical(CategoricalParams {
                logits: g.slice_rows(p.logits, start, end)?,
            }),
        })
    }

    pub fn concat_rows<S: Scalar>(g: &Graph<S>, parts: &[Self]) -> Result<Self> {
        match parts.first() {
            None => Err(invalid("concat_rows of no distributions")),
            Some(LatentParams::Gaussian(_)) => {
                let (mut means, mut stds) = (Vec::new(), Vec::new());
                for p in parts {
                    let LatentParams::Gaussian(p) = p else {
                        return Err(invalid("mixed latent families"));
                    };
                    means.push(p.mean);
                    stds.push(p.std);
                }
                Ok(LatentParams::Gaussian(GaussianParams {
                    mean: g.concat_rows(&means)?,
                    std: g.concat_rows(&stds)?,
                }))
            }
            Some(LatentParams::Categorical(_)) => {
                let mut logits = Vec::new();
                for p in parts {
                    let LatentParams::Categorical(p) = p else {
                        return Err(invalid("mixed latent families"));
                    };
                    logits.push(p.logits);
                }
                Ok(LatentParams::Categorical(CategoricalParams {
                    logits: g.concat_rows(&logits)?,
                }))
            }
        }
    }

    pub fn stop_gradient<S: Scalar>(&self, g: &Graph<S>) -> Self {
        match self {
            LatentParams::Gaussian(p) => LatentParams::Gaussian(GaussianParams {
                mean: g.stop_gradient(p.mean),
                std: g.stop_gradient(p.std),
            }),
            LatentParams::Categorical(p) => LatentParams::Categorical(CategoricalParams {
                logits: g.stop_gradient(p.logits),
            }),
        }
    }

    /// Deterministic representative: the mean, or the per-factor argmax
    /// one-hot (with straight-through gradient to the probabilities).
    pub fn mode<S: Scalar>(&self, g: &Graph<S>) -> Result<Var> {
        match self {
            LatentParams::Gaussian(p) => Ok(p.mean),
            LatentParams::Categorical(p) => {
                let probs = p.probs(g);
                let shape = g.shape(probs);
                let classes = shape[2];
                let mut onehot = vec![S::ZERO; g.data(probs).len()];
                for (row, out) in g.data(probs).chunks(classes).zip(onehot.chunks_mut(classes)) {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    out[best] = S::ONE;
                }
                let st = g.straight_through(Tensor::new(&shape, onehot)?, probs)?;
                g.reshape(st, &[shape[0], shape[1] * classes])
            }
        }
    }
}

/// Precision-weighted fusion of diagonal Gaussians.
///
/// Per dimension: `μ = Σ(μ_v/σ_v²) / Σ(1/σ_v²)`, `σ² = 1 / Σ(1/σ_v²)`.
pub fn gaussian_poe<S: Scalar>(g: &Graph<S>, experts: &[GaussianParams]) -> Result<GaussianParams> {
    let first = experts.first().ok_or_else(|| invalid("product of experts needs at least one expert"))?;
    let shape = g.shape(first.mean);
    for e in experts {
        for v in [e.mean, e.std] {
            let s = g.shape(v);
            if s != shape {
                return Err(Error::ShapeMismatch {
                    op: "gaussian_poe",
                    lhs: shape.clone(),
                    rhs: s,
                });
            }
        }
    }
    if experts.len() == 1 {
        return Ok(*first);
    }
    let mut precision_sum = None;
    let mut weighted_sum = None;
    for e in experts {
        let precision = g.div(g.scalar(S::ONE), g.square(e.std))?;
        let weighted = g.mul(e.mean, precision)?;
        precision_sum = Some(match precision_sum {
            None => precision,
            Some(acc) => g.add(acc, precision)?,
        });
        weighted_sum = Some(match weighted_sum {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let (precision, weighted) = (precision_sum.unwrap(), weighted_sum.unwrap());
    let mean = g.div(weighted, precision)?;
    let std = g.sqrt(g.div(g.scalar(S::ONE), precision)?);
    Ok(GaussianParams { mean, std })
}

/// Fusion of categorical experts by per-(factor, class) averaging.
pub fn categorical_poe<S: Scalar>(
    g: &Graph<S>,
    experts: &[CategoricalParams],
    averaging: CategoricalAveraging,
) -> Result<CategoricalParams> {
    let first = experts.first().ok_or_else(|| invalid("product of experts needs at least one expert"))?;
    let shape = g.shape(first.logits);
    for e in experts {
        let s = g.shape(e.logits);
        if s != shape {
            return Err(Error::ShapeMismatch {
                op: "categorical_poe",
                lhs: shape.clone(),
                rhs: s,
            });
        }
    }
    if experts.len() == 1 {
        return Ok(*first);
    }
    let inv_n = S::from_f64(1.0 / experts.len() as f64);
    let mut total = None;
    for e in experts {
        let term = match averaging {
            CategoricalAveraging::Probability => g.softmax(e.logits),
            CategoricalAveraging::Logit => g.log_softmax(e.logits),
        };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let mean = g.scale(total.unwrap(), inv_n);
    let logits = match averaging {
        CategoricalAveraging::Probability => g.ln(g.clamp_min(mean, S::from_f64(PROB_FLOOR))),
        CategoricalAveraging::Logit => mean,
    };
    Ok(CategoricalParams { logits })
}

/// Product of experts for whichever family `experts` belong to.
pub fn poe<S: Scalar>(
    g: &Graph<S>,
    experts: &[LatentParams],
    averaging: CategoricalAveraging,
) -> Result<LatentParams> {
    match experts.first() {
        None => Err(invalid("product of experts needs at least one expert")),
        Some(LatentParams::Gaussian(_)) => {
            let gs = experts
                .iter()
                .map(|e| match e {
                    LatentParams::Gaussian(p) => Ok(*p),
                    _ => Err(invalid("mixed latent families")),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LatentParams::Gaussian(gaussian_poe(g, &gs)?))
        }
        Some(LatentParams::Categorical(_)) => {
            let cs = experts
                .iter()
                .map(|e| match e {
                    LatentParams::Categorical(p) => Ok(*p),
                    _ => Err(invalid("mixed latent families")),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LatentParams::Categorical(categorical_poe(g, &cs, averaging)?))
        }
    }
}

/// `KL(p ‖ q)` per batch row, shape `[N]`.
pub fn kl_divergence<S: Scalar>(g: &Graph<S>, p: &LatentParams, q: &LatentParams) -> Result<Var> {
    match (p, q) {
        (LatentParams::Gaussian(p), LatentParams::Gaussian(q)) => {
            // ln σq − ln σp + (σp² + (μp − μq)²) / (2σq²) − ½
            let log_ratio = g.sub(g.ln(q.std), g.ln(p.std))?;
            let num = g.add(g.square(p.std), g.squared_error(p.mean, q.mean)?)?;
            let den = g.scale(g.square(q.std), S::from_f64(2.0));
            let per_dim = g.add_scalar(g.add(log_ratio, g.div(num, den)?)?, S::from_f64(-0.5));
            Ok(g.sum_last(per_dim))
        }
        (LatentParams::Categorical(p), LatentParams::Categorical(q)) => {
            let shape = g.shape(p.logits);
            let qs = g.shape(q.logits);
            if shape != qs {
                return Err(Error::ShapeMismatch {
                    op: "kl_divergence",
                    lhs: shape,
                    rhs: qs,
                });
            }
            let log_p = g.log_softmax(p.logits);
            let log_q = g.log_softmax(q.logits);
            let probs = g.exp(log_p);
            let terms = g.mul(probs, g.sub(log_p, log_q)?)?;
            let flat = g.reshape(terms, &[shape[0], shape[1] * shape[2]])?;
            Ok(g.sum_last(flat))
        }
        _ => Err(invalid("kl_divergence between different latent families")),
    }
}

/// Differential entropy (Gaussian) or entropy (categorical) per row.
pub fn entropy<S: Scalar>(g: &Graph<S>, p: &LatentParams) -> Result<Var> {
    match p {
        LatentParams::Gaussian(p) => {
            let c = 0.5 * (1.0 + libm::log(2.0 * core::f64::consts::PI));
            Ok(g.sum_last(g.add_scalar(g.ln(p.std), S::from_f64(c))))
        }
        LatentParams::Categorical(p) => {
            let shape = g.shape(p.logits);
            let log_p = g.log_softmax(p.logits);
            let terms = g.neg(g.mul(g.exp(log_p), log_p)?);
            Ok(g.sum_last(g.reshape(terms, &[shape[0], shape[1] * shape[2]])?))
        }
    }
}

/// Draws one sample per row. Gaussian draws are reparameterized
/// (`μ + σ·ε`); categorical draws are one-hot per factor with a
/// straight-through gradient to the probabilities.
pub fn sample<S: Scalar, R: Rng + ?Sized>(g: &Graph<S>, p: &LatentParams, rng: &mut R) -> Result<LatentSample> {
    match p {
        LatentParams::Gaussian(p) => {
            let shape = g.shape(p.mean);
            let n: usize = shape.iter().product();
            let noise: Vec<S> = (0..n)
                .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let eps = g.constant_vec(&shape, noise)?;
            let value = g.add(p.mean, g.mul(p.std, eps)?)?;
            Ok(LatentSample { value, pathwise: true })
        }
        LatentParams::Categorical(p) => {
            let probs = p.probs(g);
            let shape = g.shape(probs);
            let classes = shape[2];
            let mut onehot = vec![S::ZERO; g.data(probs).len()];
            for (row, out) in g.data(probs).chunks(classes).zip(onehot.chunks_mut(classes)) {
                out[draw_index(row, rng)] = S::ONE;
            }
            let st = g.straight_through(Tensor::new(&shape, onehot)?, probs)?;
            let value = g.reshape(st, &[shape[0], shape[1] * classes])?;
            Ok(LatentSample { value, pathwise: true })
        }
    }
}

fn draw_index<S: Scalar, R: Rng + ?Sized>(probs: &[S], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.to_f64();
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum && p > 0.0 {
            return i;
        }
    }
    last_positive
}

/// InfoNCE over a bilinear score `s(a, x) = aᵀ W x`.
///
/// `anchors` is `[B, E]`, `candidates` `[N, E]`, `weight` `[E, E]`. For
/// every anchor and each of its positives the loss is the softmax
/// cross-entropy of that positive against all `N` candidates; the result is
/// the mean over anchors of the mean over their positives.
pub fn info_nce<S: Scalar>(
    g: &Graph<S>,
    anchors: Var,
    candidates: Var,
    positives: &[Vec<usize>],
    weight: Var,
) -> Result<Var> {
    let scores = g.matmul(g.matmul(anchors, weight)?, g.transpose(candidates)?)?;
    nce_from_scores(g, scores, positives)
}

/// InfoNCE from a precomputed `[B, N]` score matrix.
pub fn nce_from_scores<S: Scalar>(g: &Graph<S>, scores: Var, positives: &[Vec<usize>]) -> Result<Var> {
    let shape = g.shape(scores);
    let (b, n) = (shape[0], shape[1]);
    if positives.len() != b {
        return Err(invalid(format!(
            "{} positive sets for {} anchors",
            positives.len(),
            b
        )));
    }
    if n < 2 {
        return Err(invalid("InfoNCE needs at least two candidates"));
    }
    let mut mask = vec![S::ZERO; b * n];
    for (i, set) in positives.iter().enumerate() {
        if set.is_empty() {
            return Err(invalid(format!("anchor {i} has no positive candidate")));
        }
        let w = S::from_f64(1.0 / (set.len() * b) as f64);
        for &j in set {
            if j >= n {
                return Err(invalid(format!("positive index {j} out of {n} candidates")));
            }
            mask[i * n + j] += w;
        }
    }
    let mask = g.constant_vec(&[b, n], mask)?;
    let log_probs = g.log_softmax(scores);
    Ok(g.neg(g.sum(g.mul(log_probs, mask)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(g: &Graph<f64>, mean: &[f64], var: &[f64]) -> GaussianParams {
        let n = mean.len();
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        GaussianParams {
            mean: g.constant(&Tensor::from_f64(&[1, n], mean).unwrap()),
            std: g.constant(&Tensor::from_f64(&[1, n], &std).unwrap()),
        }
    }

    fn cat(g: &Graph<f64>, probs: &[f64], classes: usize) -> CategoricalParams {
        let logits: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln()).collect();
        let f = probs.len() / classes;
        CategoricalParams {
            logits: g.constant(&Tensor::from_f64(&[1, f, classes], &logits).unwrap()),
        }
    }

    #[test]
    fn gaussian_poe_examples() {
        let g = Graph::new();
        let a = gauss(&g, &[0.0], &[1.0]);
        let b = gauss(&g, &[0.0], &[1.0]);
        let f = gaussian_poe(&g, &[a, b]).unwrap();
        assert_eq!(g.data(f.mean)[0], 0.0);
        assert!((g.data(f.std)[0].powi(2) - 0.5).abs() < 1e-12);

        let c = gauss(&g, &[2.0], &[4.0]);
        let f = gaussian_poe(&g, &[a, c]).unwrap();
        assert!((g.data(f.mean)[0] - 0.4).abs() < 1e-12);
        assert!((g.data(f.std)[0].powi(2) - 0.8).abs() < 1e-12);

        let single = gaussian_poe(&g, &[c]).unwrap();
        assert_eq!(single, c);
    }

    #[test]
    fn poe_rejects_empty_and_mismatched() {
        let g = Graph::new();
        assert!(gaussian_poe::<f64>(&g, &[]).is_err());
        let a = gauss(&g, &[0.0], &[1.0]);
        let b = gauss(&g, &[0.0, 1.0], &[1.0, 1.0]);
        assert!(gaussian_poe(&g, &[a, b]).is_err());
        let c1 = cat(&g, &[0.5, 0.5], 2);
        let c2 = cat(&g, &[0.2, 0.3, 0.5], 3);
        assert!(categorical_poe(&g, &[c1, c2], CategoricalAveraging::Probability).is_err());
    }

    #[test]
    fn categorical_poe_examples() {
        let g = Graph::new();
        let a = cat(&g, &[1.0, 0.0], 2);
        let b = cat(&g, &[0.0, 1.0], 2);
        let f = categorical_poe(&g, &[a, b], CategoricalAveraging::Probability).unwrap();
        let p = g.softmax(f.logits);
        assert!((g.data(p)[0] - 0.5).abs() < 1e-12);

        let c = cat(&g, &[0.8, 0.2], 2);
        let d = cat(&g, &[0.6, 0.4], 2);
        let f = categorical_poe(&g, &[c, d], CategoricalAveraging::Probability).unwrap();
        let p = g.softmax(f.logits);
        assert!((g.data(p)[0] - 0.7).abs() < 1e-12);
        assert!((g.data(p)[1] - 0.3).abs() < 1e-12);

        let f = categorical_poe(&g, &[c, c], CategoricalAveraging::Probability).unwrap();
        let p = g.softmax(f.logits);
        assert!((g.data(p)[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_cases() {
        let g = Graph::new();
        let std_normal = LatentParams::Gaussian(gauss(&g, &[0.0], &[1.0]));
        let shifted = LatentParams::Gaussian(gauss(&g, &[1.0], &[1.0]));
        let wide = LatentParams::Gaussian(gauss(&g, &[0.0], &[4.0]));
        let kl = |p, q| g.data(kl_divergence(&g, p, q).unwrap())[0];
        assert_eq!(kl(&std_normal, &std_normal), 0.0);
        assert!((kl(&shifted, &std_normal) - 0.5).abs() < 1e-12);
        assert!((kl(&wide, &std_normal) - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-12);

        let c = LatentParams::Categorical(cat(&g, &[0.5, 0.5], 2));
        assert!(kl_divergence(&g, &std_normal, &c).is_err());
    }

    #[test]
    fn degenerate_samples() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LatentParams::Gaussian(GaussianParams {
            mean: g.constant(&Tensor::from_f64(&[1, 3], &[0.1, -2.0, 5.0]).unwrap()),
            std: g.zeros(&[1, 3]),
        });
        let s = sample(&g, &p, &mut rng).unwrap();
        assert_eq!(&*g.data(s.value), &[0.1, -2.0, 5.0]);

        let c = LatentParams::Categorical(cat(&g, &[1.0, 0.0], 2));
        for _ in 0..50 {
            let s = sample(&g, &c, &mut rng).unwrap();
            assert_eq!(&*g.data(s.value), &[1.0, 0.0]);
        }
    }

    #[test]
    fn info_nce_examples() {
        let g = Graph::<f64>::new();
        let uniform = g.zeros(&[3, 5]);
        let loss = nce_from_scores(&g, uniform, &[vec![0], vec![1, 2], vec![4]]).unwrap();
        assert!((g.item(loss) - 5f64.ln()).abs() < 1e-12);

        let s = g.constant(&Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let loss = nce_from_scores(&g, s, &[vec![0]]).unwrap();
        assert!((g.item(loss) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);

        let dominant = g.constant(&Tensor::from_f64(&[1, 3], &[80.0, 0.0, 1.0]).unwrap());
        let loss = nce_from_scores(&g, dominant, &[vec![0]]).unwrap();
        assert!(g.item(loss) < 1e-30);

        assert!(nce_from_scores(&g, s, &[vec![]]).is_err());
    }
}
