//! Optimisation: AdamW with linear warm-up, base training on the
//! autoregressive loss, and stability fine-tuning against a frozen teacher.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig};
use crate::model::{
    encode_on, load_params, predict_logits_on, snapshot_teacher, write_checkpoint_file,
    ModelWeights, ParamVars, Teacher, Vocabulary,
};
use crate::perturb::{pgd_attack, PgdInput};
use crate::stability::{divergence_on, topk_surrogate_on, PerturbMode, SatoConfig, TransTarget};
use crate::toyworld::{split_records, DatasetRecord, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub learning_rate: f64,
    pub warmup_iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Pick the checkpoint with the lowest `fid + fid_d` on the validation
    /// split instead of the last step.
    pub select_best: bool,
    pub history_capacity: usize,
    pub sato: SatoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_iterations: 2000,
            learning_rate: 3e-3,
            warmup_iterations: 100,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 0,
            select_best: false,
            history_capacity: 256,
            sato: SatoConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for fine-tuning: fewer steps at a lower rate.
    pub fn finetune() -> Self {
        TrainConfig {
            total_iterations: 1000,
            learning_rate: 1e-3,
            warmup_iterations: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.warmup_iterations > self.total_iterations {
            return Err(Error::invalid(
                "warmup_iterations cannot exceed total_iterations",
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "epsilon must be positive and weight_decay non-negative",
            ));
        }
        self.sato.validate()
    }
}

/// Learning rate at 1-based `step`: a linear ramp to the base rate over the
/// warm-up, constant afterwards.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if step < config.warmup_iterations {
        config.learning_rate * step as f64 / config.warmup_iterations as f64
    } else {
        config.learning_rate
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            first: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            second: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One AdamW step: decoupled weight decay, then the bias-corrected Adam
/// update.
pub fn adamw_update(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::invalid(format!(
            "adamw_update got {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_update",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.second[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.first[i].data(), state.second[i].data());
        for ((x, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *x *= decay;
            *x -= lr * (mj / c1) / ((vj / c2).sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Mean loss components of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_trans: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "step,l_trans,l1,l2,l3,total,lr")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.l_trans, r.l1, r.l2, r.l3, r.total, r.lr
        )?;
    }
    Ok(())
}

pub struct TrainState {
    pub step: usize,
    pub student: ModelWeights,
    pub optimizer: AdamState,
    pub teacher: Option<Teacher>,
    pub history: VecDeque<TraceRow>,
    history_capacity: usize,
}

impl TrainState {
    pub fn new(student: ModelWeights, teacher: Option<Teacher>, config: &TrainConfig) -> Self {
        let optimizer = AdamState::new(&student.tensors());
        TrainState {
            step: 0,
            student,
            optimizer,
            teacher,
            history: VecDeque::with_capacity(config.history_capacity),
            history_capacity: config.history_capacity.max(1),
        }
    }

    fn record(&mut self, row: TraceRow) {
        if self.history.len() == self.history_capacity {
            self.history.pop_front();
        }
        self.history.push_back(row);
    }
}

fn diverged(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::Diverged {
            step,
            what: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Shuffled passes over the training indices, one generator per run.
struct Batcher {
    indices: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..len).collect();
        indices.shuffle(&mut rng);
        Batcher {
            indices,
            cursor: 0,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.indices.len() {
                self.indices.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.indices[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct StepLoss {
    loss: Var,
    parts: [f64; 5],
}

fn apply_update(
    state: &mut TrainState,
    graph: &mut Graph,
    params: &ParamVars,
    step_loss: StepLoss,
    config: &TrainConfig,
) -> Result<TraceRow> {
    let step = state.step + 1;
    graph
        .backward(step_loss.loss)
        .map_err(|e| diverged(step, e))?;
    let grads = params.gradients(graph);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            what: "non-finite gradient".into(),
        });
    }
    let lr = lr_at(step, config);
    let mut tensors = state.student.tensors_mut();
    adamw_update(&mut tensors, &grads, &mut state.optimizer, lr, config)?;
    if !state.student.is_finite() {
        return Err(Error::Diverged {
            step,
            what: "non-finite weights after update".into(),
        });
    }
    state.step = step;
    let [l_trans, l1, l2, l3, total] = step_loss.parts;
    let row = TraceRow {
        step,
        l_trans,
        l1,
        l2,
        l3,
        total,
        lr,
    };
    state.record(row);
    Ok(row)
}

fn teacher_forced(
    graph: &mut Graph,
    params: &ParamVars,
    ids: &[usize],
    motion: &[usize],
    rho: Option<Var>,
) -> Result<(crate::model::EncodedVars, Var)> {
    if motion.is_empty() {
        return Err(Error::invalid("records need at least one motion token"));
    }
    let enc = encode_on(graph, params, ids, rho)?;
    let logits = predict_logits_on(
        graph,
        params,
        enc.text_embedding,
        &motion[..motion.len() - 1],
    )?;
    Ok((enc, logits))
}

fn mean_of(graph: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    graph.scalar_mul(total, 1.0 / terms.len() as f64)
}

/// One step on the autoregressive loss alone.
pub fn base_step(
    batch: &[&DatasetRecord],
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<TraceRow> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step = state.step + 1;
    let mut graph = Graph::new();
    let params = load_params(&mut graph, &state.student, true);
    let mut losses = Vec::with_capacity(batch.len());
    for r in batch {
        let ids = state.student.vocab.encode(&r.caption)?;
        let (_, logits) = teacher_forced(&mut graph, &params, &ids, r.motion.tokens(), None)
            .map_err(|e| diverged(step, e))?;
        losses.push(
            graph
                .cross_entropy(logits, r.motion.tokens())
                .map_err(|e| diverged(step, e))?,
        );
    }
    let loss = mean_of(&mut graph, &losses)?;
    let value = graph.value(loss).item();
    let parts = [value, 0.0, 0.0, 0.0, value];
    apply_update(state, &mut graph, &params, StepLoss { loss, parts }, config)
}

/// Teacher distributions for `records` under teacher forcing, computed on a
/// separate graph so no gradient can reach the teacher.
fn teacher_distributions(
    teacher: &ModelWeights,
    records: &[&DatasetRecord],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut graph = Graph::new();
    let params = load_params(&mut graph, teacher, false);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let ids = teacher.vocab.encode(&r.caption)?;
        let (enc, logits) = teacher_forced(&mut graph, &params, &ids, r.motion.tokens(), None)?;
        let probs = graph.softmax(logits, 1)?;
        out.push((
            graph.value(probs).clone(),
            graph.value(enc.attention).clone(),
        ));
    }
    Ok(out)
}

/// Graph nodes of the per-record fine-tuning objective.
#[derive(Clone, Copy, Debug)]
pub struct SatoTerms {
    pub l_trans: Var,
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub total: Var,
}

/// Records the fine-tuning objective of one record on `graph`.
/// `teacher_probs` holds the frozen teacher's next-token distributions for
/// the clean caption. With `rho` set the perturbed view is the clean
/// caption shifted in embedding space, otherwise it is the record's
/// perturbed caption. Terms with zero weight are recorded but left out of
/// `total`.
pub fn sato_objective_on(
    graph: &mut Graph,
    params: &ParamVars,
    vocab: &Vocabulary,
    record: &DatasetRecord,
    teacher_probs: &Tensor,
    rho: Option<&Tensor>,
    sato: &SatoConfig,
) -> Result<SatoTerms> {
    let motion = record.motion.tokens();
    let ids = vocab.encode(&record.caption)?;
    let (perturbed_ids, rho) = match rho {
        Some(rho) => (ids.clone(), Some(graph.constant(rho.clone()))),
        None => {
            let p = record
                .perturbed_caption
                .as_ref()
                .ok_or_else(|| Error::MissingPerturbation(record.id.clone()))?;
            (vocab.encode(p)?, None)
        }
    };
    if perturbed_ids.len() != ids.len() {
        return Err(Error::invalid(format!(
            "record {}: perturbation changes the caption length",
            record.id
        )));
    }
    let (clean_enc, clean_logits) = teacher_forced(graph, params, &ids, motion, None)?;
    let (pert_enc, pert_logits) = teacher_forced(graph, params, &perturbed_ids, motion, rho)?;
    let clean_probs = graph.softmax(clean_logits, 1)?;
    let pert_probs = graph.softmax(pert_logits, 1)?;

    let l_trans = match sato.trans_on {
        TransTarget::Original => graph.cross_entropy(clean_logits, motion)?,
        TransTarget::Perturbed => graph.cross_entropy(pert_logits, motion)?,
        TransTarget::Both => {
            let a = graph.cross_entropy(clean_logits, motion)?;
            let b = graph.cross_entropy(pert_logits, motion)?;
            let s = graph.add(a, b)?;
            graph.scalar_mul(s, 0.5)?
        }
    };
    let teacher_probs = graph.constant(teacher_probs.clone());
    let l1 = divergence_on(graph, clean_probs, teacher_probs, sato.d2)?;
    let k = sato.k.min(ids.len());
    let l2 = topk_surrogate_on(graph, clean_enc.attention, pert_enc.attention, k)?;
    let l3 = divergence_on(graph, clean_probs, pert_probs, sato.d1)?;

    let mut total = l_trans;
    for (weight, term) in [(sato.lambda1, l1), (sato.lambda2, l2), (sato.lambda3, l3)] {
        if weight != 0.0 {
            let scaled = graph.scalar_mul(term, weight)?;
            total = graph.add(total, scaled)?;
        }
    }
    Ok(SatoTerms {
        l_trans,
        l1,
        l2,
        l3,
        total,
    })
}

/// One stability fine-tuning step: the autoregressive loss plus the
/// weighted teacher-closeness (L1), top-k attention (L2) and
/// prediction-robustness (L3) terms. Terms with zero weight are reported in
/// the trace but left out of the optimised loss.
pub fn sato_step(
    batch: &[&DatasetRecord],
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<TraceRow> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let teacher = state
        .teacher
        .clone()
        .ok_or_else(|| Error::invalid("sato_step needs a teacher snapshot"))?;
    let sato = &config.sato;
    let step = state.step + 1;
    let fail = |e| diverged(step, e);
    let teacher_out = teacher_distributions(&teacher, batch).map_err(fail)?;

    // Perturbations come from the student as it is before this update.
    let mut pgd_rhos = Vec::new();
    if sato.mode == PerturbMode::Pgd {
        for (r, (_, teacher_attention)) in batch.iter().zip(&teacher_out) {
            let input = PgdInput {
                caption: &r.caption,
                motion: r.motion.tokens(),
                reference_attention: Some(teacher_attention.data()),
            };
            pgd_rhos.push(pgd_attack(&input, &state.student, sato).map_err(fail)?.rho);
        }
    }

    let mut graph = Graph::new();
    let params = load_params(&mut graph, &state.student, true);
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = [0.0; 4];
    for (i, r) in batch.iter().enumerate() {
        let rho = pgd_rhos.get(i);
        let terms = sato_objective_on(
            &mut graph,
            &params,
            &state.student.vocab,
            r,
            &teacher_out[i].0,
            rho,
            sato,
        )
        .map_err(fail)?;
        for (acc, v) in sums
            .iter_mut()
            .zip([terms.l_trans, terms.l1, terms.l2, terms.l3])
        {
            *acc += graph.value(v).item();
        }
        totals.push(terms.total);
    }
    let loss = mean_of(&mut graph, &totals)?;
    let n = batch.len() as f64;
    let parts = [
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        graph.value(loss).item(),
    ];
    apply_update(state, &mut graph, &params, StepLoss { loss, parts }, config)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Weights after the last step.
    pub final_weights: ModelWeights,
    /// Selected weights: the best validation checkpoint when selection is
    /// enabled, otherwise the final weights.
    pub weights: ModelWeights,
    pub best_step: usize,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Base,
    Sato,
}

fn run(
    mut state: TrainState,
    corpus: &[DatasetRecord],
    config: &TrainConfig,
    phase: Phase,
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate()?;
    let train = split_records(corpus, Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("corpus has no training records"));
    }
    let val: Vec<DatasetRecord> = split_records(corpus, Split::Val)
        .into_iter()
        .cloned()
        .collect();
    let selecting = config.select_best && config.checkpoint_every > 0 && val.len() >= 2;
    let eval_config = EvalConfig {
        k: config.sato.k,
        ..EvalConfig::default()
    };
    let mut best: Option<(f64, usize, ModelWeights)> = None;
    let consider =
        |state: &TrainState, best: &mut Option<(f64, usize, ModelWeights)>| -> Result<()> {
            if let Some(dir) = checkpoint_dir {
                let name = match phase {
                    Phase::Base => format!("base-step{:06}.ckpt", state.step),
                    Phase::Sato => format!("sato-step{:06}.ckpt", state.step),
                };
                write_checkpoint_file(&state.student, &dir.join(name))?;
            }
            if selecting {
                let report = evaluate(&state.student, &val, &eval_config)?;
                let score = report.fid + report.fid_d;
                if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                    *best = Some((score, state.step, state.student.clone()));
                }
            }
            Ok(())
        };
    if selecting {
        consider(&state, &mut best)?;
    }
    let mut batcher = Batcher::new(train.len(), config.seed ^ 0x5eed_ba7c);
    let mut trace = Vec::with_capacity(config.total_iterations);
    for _ in 0..config.total_iterations {
        let batch: Vec<&DatasetRecord> = batcher
            .next(config.batch_size)
            .into_iter()
            .map(|i| train[i])
            .collect();
        let row = match phase {
            Phase::Base => base_step(&batch, &mut state, config)?,
            Phase::Sato => sato_step(&batch, &mut state, config)?,
        };
        trace.push(row);
        if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
            consider(&state, &mut best)?;
        }
    }
    let (weights, best_step) = match best {
        Some((_, step, w)) => (w, step),
        None => (state.student.clone(), state.step),
    };
    Ok(RunOutcome {
        final_weights: state.student,
        weights,
        best_step,
        trace,
    })
}

/// Trains `init` on the training split with the autoregressive loss.
pub fn train_base(
    init: ModelWeights,
    corpus: &[DatasetRecord],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let state = TrainState::new(init, None, config);
    run(state, corpus, config, Phase::Base, checkpoint_dir)
}

/// Snapshots `base` as the teacher and fine-tunes a copy of it with
/// [`sato_step`].
pub fn finetune_sato(
    base: &ModelWeights,
    corpus: &[DatasetRecord],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let teacher = snapshot_teacher(base)?;
    let state = TrainState::new(base.clone(), Some(teacher), config);
    run(state, corpus, config, Phase::Sato, checkpoint_dir)
}
