//! Caption perturbations: gradient-based attacks on word embeddings and
//! random synonym replacement, plus corpus-level statistics.

mod rsr;

use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{encode, encode_on, load_params, predict_distributions_on, ModelWeights};
use crate::stability::{divergence_on, topk_surrogate_on, SatoConfig};
use crate::toyworld::Caption;

pub use rsr::{
    caption_cosine_similarity, perturb_corpus, perturb_corpus_with, perturbation_stats,
    rsr_perturb, rsr_perturb_with, write_stats_report, ClassSubstitutions, PerturbationReport,
    PerturbationStats, RsrOptions,
};

/// An additive perturbation of the `n × d` word embeddings of one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub rho: Tensor,
    pub radius: f64,
}

impl Perturbation {
    pub fn norm(&self) -> f64 {
        self.rho.l2_norm()
    }
}

/// Nearest point to `rho` in the L2 ball of radius `radius`.
///
/// Points already inside are returned unchanged. Points outside are scaled
/// radially, with the scale shrunk by ulps if rounding would leave the
/// result outside, so projecting twice gives exactly the same tensor.
pub fn project_ball(rho: &Tensor, radius: f64) -> Result<Perturbation> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!(
            "ball radius must be finite and non-negative, got {radius}"
        )));
    }
    if !rho.is_finite() {
        return Err(Error::NonFinite { op: "project_ball" });
    }
    let norm = rho.l2_norm();
    if norm <= radius {
        return Ok(Perturbation {
            rho: rho.clone(),
            radius,
        });
    }
    let mut scale = radius / norm;
    loop {
        let data = rho.data().iter().map(|x| x * scale).collect();
        let scaled = Tensor::new(rho.shape().to_vec(), data)?;
        if scaled.l2_norm() <= radius {
            return Ok(Perturbation {
                rho: scaled,
                radius,
            });
        }
        scale *= 1.0 - f64::EPSILON;
    }
}

/// What a gradient attack needs beyond the model: the caption, the motion
/// tokens used to teacher-force the decoder, and the reference attention
/// the top-k term compares against. Without a reference the student's own
/// clean attention is used.
#[derive(Clone, Copy, Debug)]
pub struct PgdInput<'a> {
    pub caption: &'a Caption,
    pub motion: &'a [usize],
    pub reference_attention: Option<&'a [f64]>,
}

struct Objective {
    value: f64,
    gradient: Tensor,
}

struct PgdProblem<'a> {
    graph: Graph,
    params: crate::model::ParamVars,
    ids: Vec<usize>,
    prefix: &'a [usize],
    clean: crate::autograd::Var,
    reference: crate::autograd::Var,
    config: &'a SatoConfig,
    k: usize,
    shape: [usize; 2],
}

impl<'a> PgdProblem<'a> {
    fn new(input: &PgdInput<'a>, student: &ModelWeights, config: &'a SatoConfig) -> Result<Self> {
        let ids = student.vocab.encode(input.caption)?;
        if input.motion.is_empty() {
            return Err(Error::invalid("PGD needs at least one motion token"));
        }
        let prefix = &input.motion[..input.motion.len() - 1];
        let mut graph = Graph::new();
        let params = load_params(&mut graph, student, false);
        let enc = encode_on(&mut graph, &params, &ids, None)?;
        let clean = predict_distributions_on(&mut graph, &params, enc.text_embedding, prefix)?;
        let reference = match input.reference_attention {
            Some(r) if r.len() != ids.len() => {
                return Err(Error::ShapeMismatch {
                    op: "pgd_attack",
                    lhs: vec![ids.len()],
                    rhs: vec![r.len()],
                })
            }
            Some(r) => graph.constant(Tensor::matrix(1, r.len(), r.to_vec())?),
            None => enc.attention,
        };
        Ok(PgdProblem {
            k: config.k.min(ids.len()),
            shape: [ids.len(), student.config.d_model],
            graph,
            params,
            ids,
            prefix,
            clean,
            reference,
            config,
        })
    }

    fn evaluate(&mut self, rho: &Tensor, with_gradient: bool) -> Result<Objective> {
        let g = &mut self.graph;
        let rho_var = g.leaf(rho.clone(), with_gradient);
        let enc = encode_on(g, &self.params, &self.ids, Some(rho_var))?;
        let perturbed = predict_distributions_on(g, &self.params, enc.text_embedding, self.prefix)?;
        let drift = divergence_on(g, self.clean, perturbed, self.config.d2)?;
        let topk = topk_surrogate_on(g, self.reference, enc.attention, self.k)?;
        let objective = g.add(drift, topk)?;
        let value = g.value(objective).item();
        let gradient = if with_gradient {
            g.backward(objective)?;
            let grad = g
                .grad(rho_var)
                .unwrap_or_else(|| Tensor::zeros(&self.shape));
            if !grad.is_finite() {
                return Err(Error::NonFinite { op: "pgd_attack" });
            }
            grad
        } else {
            Tensor::zeros(&self.shape)
        };
        Ok(Objective { value, gradient })
    }
}

/// The attack's inner objective at `rho`: prediction drift under the
/// second divergence plus the top-k attention surrogate against the
/// reference attention.
pub fn pgd_objective(
    input: &PgdInput<'_>,
    student: &ModelWeights,
    rho: &Tensor,
    config: &SatoConfig,
) -> Result<f64> {
    let mut problem = PgdProblem::new(input, student, config)?;
    if rho.shape() != problem.shape {
        return Err(Error::ShapeMismatch {
            op: "pgd_objective",
            lhs: problem.shape.to_vec(),
            rhs: rho.shape().to_vec(),
        });
    }
    Ok(problem.evaluate(rho, false)?.value)
}

/// Projected gradient ascent on the word embeddings, starting from zero.
/// Each step moves by `pgd_step_size` times the raw gradient and projects
/// back onto the ball of radius `pgd_radius`.
pub fn pgd_attack(
    input: &PgdInput<'_>,
    student: &ModelWeights,
    config: &SatoConfig,
) -> Result<Perturbation> {
    if config.pgd_steps == 0 {
        return Err(Error::invalid("PGD needs at least one step"));
    }
    let mut problem = PgdProblem::new(input, student, config)?;
    let mut current = project_ball(&Tensor::zeros(&problem.shape), config.pgd_radius)?;
    for _ in 0..config.pgd_steps {
        let Objective { gradient, .. } = problem.evaluate(&current.rho, true)?;
        let stepped: Vec<f64> = current
            .rho
            .data()
            .iter()
            .zip(gradient.data())
            .map(|(r, g)| r + config.pgd_step_size * g)
            .collect();
        current = project_ball(
            &Tensor::new(problem.shape.to_vec(), stepped)?,
            config.pgd_radius,
        )?;
    }
    Ok(current)
}

/// Encodes `caption` with and without `perturbation` and returns the two
/// attention vectors.
pub fn attention_shift(
    caption: &Caption,
    weights: &ModelWeights,
    perturbation: &Perturbation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let clean = encode(caption, weights, None)?;
    let shifted = encode(caption, weights, Some(&perturbation.rho))?;
    Ok((
        clean.attention.values().to_vec(),
        shifted.attention.values().to_vec(),
    ))
}

#[cfg(test)]
mod tests;
