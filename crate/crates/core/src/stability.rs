//! Attention-stability quantities: top-k index sets, the top-k overlap
//! ratio, the differentiable top-k surrogate loss, distribution
//! divergences between next-token predictions, and attention JSD.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Additive floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
pub const PROBABILITY_TOLERANCE: f64 = 1e-8;

/// Non-negative weights over caption tokens that sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionVector(Vec<f64>);

impl AttentionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("attention vector is empty"));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(
                "attention entries must be finite and non-negative",
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::invalid(format!(
                "attention sums to {total}, expected 1"
            )));
        }
        Ok(AttentionVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for AttentionVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Indices of the `k` largest components, stored in increasing order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKSet {
    k: usize,
    indices: Vec<usize>,
}

impl TopKSet {
    /// Builds a set from explicit indices (must be distinct).
    pub fn from_indices(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() || indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(
                "top-k indices must be non-empty and distinct",
            ));
        }
        Ok(TopKSet {
            k: indices.len(),
            indices,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn intersection_size(&self, other: &TopKSet) -> usize {
        self.indices
            .iter()
            .filter(|i| other.indices.binary_search(i).is_ok())
            .count()
    }
}

/// Ties are broken toward the lower index.
pub fn topk_indices(v: &[f64], k: usize) -> Result<TopKSet> {
    if k == 0 || k > v.len() {
        return Err(Error::invalid(format!(
            "k = {k} out of range for length {}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    Ok(TopKSet { k, indices: order })
}

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `|T_k(a) ∩ T_k(b)| / k`.
pub fn overlap_ratio(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    check_lengths("overlap_ratio", a, b)?;
    let (ta, tb) = (topk_indices(a, k)?, topk_indices(b, k)?);
    Ok(ta.intersection_size(&tb) as f64 / k as f64)
}

/// Top-k surrogate loss with index sets taken from the inputs.
pub fn topk_surrogate_loss(omega: &[f64], omega_tilde: &[f64], k: usize) -> Result<f64> {
    check_lengths("topk_surrogate_loss", omega, omega_tilde)?;
    let zeta = topk_indices(omega, k)?;
    let zeta_tilde = topk_indices(omega_tilde, k)?;
    topk_surrogate_loss_with(omega, omega_tilde, &zeta, &zeta_tilde)
}

/// `(1/2k) (‖ω[ζ] − ω̃[ζ]‖₁ + ‖ω̃[ζ̃] − ω[ζ̃]‖₁)` with caller-supplied index
/// sets `ζ` (for `omega`) and `ζ̃` (for `omega_tilde`).
pub fn topk_surrogate_loss_with(
    omega: &[f64],
    omega_tilde: &[f64],
    zeta: &TopKSet,
    zeta_tilde: &TopKSet,
) -> Result<f64> {
    check_lengths("topk_surrogate_loss", omega, omega_tilde)?;
    if zeta.k != zeta_tilde.k {
        return Err(Error::invalid("index sets must have the same k"));
    }
    let n = omega.len();
    if zeta
        .indices
        .iter()
        .chain(&zeta_tilde.indices)
        .any(|&i| i >= n)
    {
        return Err(Error::invalid("index set exceeds vector length"));
    }
    let l1 = |idx: &[usize]| {
        idx.iter()
            .map(|&i| (omega[i] - omega_tilde[i]).abs())
            .sum::<f64>()
    };
    Ok((l1(&zeta.indices) + l1(&zeta_tilde.indices)) / (2.0 * zeta.k as f64))
}

/// Records the top-k surrogate loss on `graph`. Index sets are chosen from
/// the current values and held constant; gradients reach both inputs
/// through the gathered entries.
pub fn topk_surrogate_on(graph: &mut Graph, omega: Var, omega_tilde: Var, k: usize) -> Result<Var> {
    let n = graph.value(omega).numel();
    if graph.value(omega_tilde).numel() != n {
        return Err(Error::ShapeMismatch {
            op: "topk_surrogate_loss",
            lhs: graph.shape(omega).to_vec(),
            rhs: graph.shape(omega_tilde).to_vec(),
        });
    }
    let zeta = topk_indices(graph.value(omega).data(), k)?;
    let zeta_tilde = topk_indices(graph.value(omega_tilde).data(), k)?;
    let a = graph.reshape(omega, &[n])?;
    let b = graph.reshape(omega_tilde, &[n])?;
    let l1 = |graph: &mut Graph, src: Var, other: Var, idx: &[usize]| -> Result<Var> {
        let x = graph.gather(src, idx)?;
        let y = graph.gather(other, idx)?;
        let d = graph.sub(x, y)?;
        let d = graph.abs(d)?;
        graph.sum(d)
    };
    let first = l1(graph, a, b, zeta.indices())?;
    let second = l1(graph, b, a, zeta_tilde.indices())?;
    let total = graph.add(first, second)?;
    graph.scalar_mul(total, 1.0 / (2.0 * k as f64))
}

/// Distance between two sets of position-wise distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    /// Mean over positions of `Σ p ln((p + ε) / (q + ε))`.
    #[default]
    Kl,
    /// Mean over positions of `‖p − q‖²`.
    L2,
}

impl std::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Divergence::Kl),
            "l2" => Ok(Divergence::L2),
            other => Err(Error::invalid(format!("unknown divergence {other:?}"))),
        }
    }
}

pub fn divergence<P: AsRef<[f64]>>(p_set: &[P], q_set: &[P], choice: Divergence) -> Result<f64> {
    if p_set.len() != q_set.len() || p_set.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "divergence",
            lhs: vec![p_set.len()],
            rhs: vec![q_set.len()],
        });
    }
    let mut total = 0.0;
    for (p, q) in p_set.iter().zip(q_set) {
        let (p, q) = (p.as_ref(), q.as_ref());
        check_lengths("divergence", p, q)?;
        total += match choice {
            Divergence::Kl => p
                .iter()
                .zip(q)
                .map(|(&pi, &qi)| pi * ((pi + LOG_FLOOR) / (qi + LOG_FLOOR)).ln())
                .sum::<f64>(),
            Divergence::L2 => p
                .iter()
                .zip(q)
                .map(|(pi, qi)| (pi - qi).powi(2))
                .sum::<f64>(),
        };
    }
    Ok(total / p_set.len() as f64)
}

/// Graph version of [`divergence`] for `[positions, classes]` probability
/// tensors.
pub fn divergence_on(graph: &mut Graph, p: Var, q: Var, choice: Divergence) -> Result<Var> {
    if graph.shape(p) != graph.shape(q) {
        return Err(Error::ShapeMismatch {
            op: "divergence",
            lhs: graph.shape(p).to_vec(),
            rhs: graph.shape(q).to_vec(),
        });
    }
    let positions = graph.shape(p)[0] as f64;
    let per_entry = match choice {
        Divergence::Kl => {
            let lp = graph.add_scalar(p, LOG_FLOOR)?;
            let lp = graph.log(lp)?;
            let lq = graph.add_scalar(q, LOG_FLOOR)?;
            let lq = graph.log(lq)?;
            let ratio = graph.sub(lp, lq)?;
            graph.mul(p, ratio)?
        }
        Divergence::L2 => {
            let d = graph.sub(p, q)?;
            graph.mul(d, d)?
        }
    };
    let total = graph.sum(per_entry)?;
    graph.scalar_mul(total, 1.0 / positions)
}

fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * ((pi + LOG_FLOOR) / (qi + LOG_FLOOR)).ln())
        .sum()
}

/// Jensen–Shannon divergence (natural log), bounded by `ln 2`.
pub fn attention_jsd(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths("attention_jsd", a, b)?;
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let jsd = 0.5 * kl_floored(a, &m) + 0.5 * kl_floored(b, &m);
    Ok(jsd.max(0.0))
}

/// How perturbed inputs are produced during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Pgd,
    #[default]
    Rsr,
}

/// Which captions the autoregressive likelihood term is computed on during
/// fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransTarget {
    #[default]
    Original,
    Perturbed,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SatoConfig {
    /// Weight of the teacher-closeness term.
    pub lambda1: f64,
    /// Weight of the top-k attention surrogate.
    pub lambda2: f64,
    /// Weight of the prediction-robustness term.
    pub lambda3: f64,
    pub k: usize,
    pub d1: Divergence,
    pub d2: Divergence,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
    pub mode: PerturbMode,
    pub pgd_radius: f64,
    pub pgd_step_size: f64,
    pub pgd_steps: usize,
    pub trans_on: TransTarget,
}

impl Default for SatoConfig {
    fn default() -> Self {
        SatoConfig {
            lambda1: 0.1,
            lambda2: 0.2,
            lambda3: 0.05,
            k: 3,
            d1: Divergence::Kl,
            d2: Divergence::Kl,
            gamma1: 0.05,
            gamma2: 0.05,
            beta: 2.0 / 3.0,
            mode: PerturbMode::Rsr,
            pgd_radius: 0.05,
            pgd_step_size: 0.01,
            pgd_steps: 10,
            trans_on: TransTarget::Original,
        }
    }
}

impl SatoConfig {
    /// The best-scoring setting of a small weight sweep, which
    /// swaps the attention and robustness weights relative to the default.
    pub fn sweep_best() -> Self {
        SatoConfig {
            lambda1: 0.1,
            lambda2: 0.05,
            lambda3: 0.2,
            ..Self::default()
        }
    }

    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self.lambda3 = lambda3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid(
                "lambda weights must be finite and non-negative",
            ));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must lie in [0, 1]"));
        }
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::invalid("gamma thresholds must be non-negative"));
        }
        if self.mode == PerturbMode::Pgd {
            if !(self.pgd_radius > 0.0) {
                return Err(Error::invalid("PGD radius must be positive"));
            }
            if self.pgd_steps == 0 {
                return Err(Error::invalid("PGD needs at least one step"));
            }
        }
        Ok(())
    }
}

/// Whether the three stability conditions hold for measured quantities.
/// The thresholds are reported, never optimized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub prediction_robust: bool,
    pub prediction_close: bool,
    pub attention_robust: bool,
}

pub fn check_conditions(d1: f64, d2: f64, overlap: f64, config: &SatoConfig) -> ConditionCheck {
    ConditionCheck {
        prediction_robust: d1 <= config.gamma1,
        prediction_close: d2 <= config.gamma2,
        attention_robust: overlap >= config.beta,
    }
}

/// Convenience for turning a `[1, n]` attention row into an owned vector.
pub fn attention_from_tensor(t: &Tensor) -> Result<AttentionVector> {
    AttentionVector::new(t.data().to_vec())
}
