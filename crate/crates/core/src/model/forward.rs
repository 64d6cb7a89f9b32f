use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::stability::AttentionVector;
use crate::toyworld::{Caption, DatasetRecord, MotionTokenSequence};

use super::ModelWeights;

/// Additive mask for attention to future positions. Large enough that its
/// softmax weight underflows to exactly zero.
const MASKED: f64 = -1e9;

pub struct HeadVars {
    query: Var,
    key: Var,
    value: Var,
}

pub struct LayerVars {
    heads: Vec<HeadVars>,
    out_proj: Var,
    out_bias: Var,
    mlp_in: Var,
    mlp_in_bias: Var,
    mlp_out: Var,
    mlp_out_bias: Var,
}

/// Model parameters recorded as leaves on a graph. `all` follows the order
/// of [`ModelWeights::tensors`].
pub struct ParamVars {
    pub all: Vec<Var>,
    embedding: Var,
    encoder_heads: Vec<HeadVars>,
    encoder_out: Var,
    encoder_out_bias: Var,
    cond_proj: Var,
    cond_bias: Var,
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<LayerVars>,
    logit_proj: Var,
    logit_bias: Var,
    head_scale: f64,
    max_len: usize,
}

impl ParamVars {
    /// Parameter gradients after [`Graph::backward`], in the order of
    /// [`ModelWeights::tensors`]. Parameters the loss does not reach get
    /// zeros.
    pub fn gradients(&self, graph: &Graph) -> Vec<Tensor> {
        self.all
            .iter()
            .map(|&v| {
                graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
            })
            .collect()
    }
}

/// Records every parameter of `weights` as a leaf. Trainable leaves receive
/// gradients; constants do not.
pub fn load_params(graph: &mut Graph, weights: &ModelWeights, trainable: bool) -> ParamVars {
    let all: Vec<Var> = weights
        .tensors()
        .into_iter()
        .map(|t| graph.leaf(t.clone(), trainable))
        .collect();
    let mut it = all.iter().copied();
    let mut next = || {
        it.next()
            .expect("parameter layout matches ModelWeights::tensors")
    };
    let head = |next: &mut dyn FnMut() -> Var| HeadVars {
        query: next(),
        key: next(),
        value: next(),
    };
    let embedding = next();
    let encoder_heads = (0..weights.encoder_heads.len())
        .map(|_| head(&mut next))
        .collect();
    let encoder_out = next();
    let encoder_out_bias = next();
    let cond_proj = next();
    let cond_bias = next();
    let token_embedding = next();
    let position_embedding = next();
    let layers = weights
        .layers
        .iter()
        .map(|layer| LayerVars {
            heads: (0..layer.heads.len()).map(|_| head(&mut next)).collect(),
            out_proj: next(),
            out_bias: next(),
            mlp_in: next(),
            mlp_in_bias: next(),
            mlp_out: next(),
            mlp_out_bias: next(),
        })
        .collect();
    let logit_proj = next();
    let logit_bias = next();
    ParamVars {
        embedding,
        encoder_heads,
        encoder_out,
        encoder_out_bias,
        cond_proj,
        cond_bias,
        token_embedding,
        position_embedding,
        layers,
        logit_proj,
        logit_bias,
        head_scale: 1.0 / (weights.config.head_dim() as f64).sqrt(),
        max_len: weights.config.max_motion_len,
        all,
    }
}

pub struct EncodedVars {
    /// Word embeddings after adding any perturbation, `[n, d]`.
    pub embeddings: Var,
    /// Token attention vector, `[1, n]`.
    pub attention: Var,
    /// Text embedding, `[1, d]`.
    pub text_embedding: Var,
    /// Per-head attention matrices, each `[n, n]`.
    pub head_weights: Vec<Var>,
}

fn attend(
    graph: &mut Graph,
    x: Var,
    head: &HeadVars,
    scale: f64,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let q = graph.matmul(x, head.query)?;
    let k = graph.matmul(x, head.key)?;
    let v = graph.matmul(x, head.value)?;
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let mut scores = graph.scalar_mul(scores, scale)?;
    if let Some(mask) = mask {
        scores = graph.add(scores, mask)?;
    }
    let weights = graph.softmax(scores, 1)?;
    let out = graph.matmul(weights, v)?;
    Ok((weights, out))
}

/// Encodes word indices. `rho`, if given, is added to the looked-up
/// embeddings and must be `[n, d]`.
pub fn encode_on(
    graph: &mut Graph,
    params: &ParamVars,
    word_ids: &[usize],
    rho: Option<Var>,
) -> Result<EncodedVars> {
    if word_ids.is_empty() {
        return Err(Error::invalid("cannot encode an empty caption"));
    }
    let mut embeddings = graph.gather(params.embedding, word_ids)?;
    if let Some(rho) = rho {
        embeddings = graph.add(embeddings, rho)?;
    }
    let mut head_weights = Vec::with_capacity(params.encoder_heads.len());
    let mut outputs = Vec::with_capacity(params.encoder_heads.len());
    for head in &params.encoder_heads {
        let (w, o) = attend(graph, embeddings, head, params.head_scale, None)?;
        head_weights.push(w);
        outputs.push(o);
    }
    let mut total = head_weights[0];
    for &w in &head_weights[1..] {
        total = graph.add(total, w)?;
    }
    let averaged = graph.scalar_mul(total, 1.0 / head_weights.len() as f64)?;
    let attention = graph.mean_rows(averaged)?;
    let joined = graph.concat(&outputs, 1)?;
    let projected = graph.matmul(joined, params.encoder_out)?;
    let projected = graph.add_bias(projected, params.encoder_out_bias)?;
    let text_embedding = graph.mean_rows(projected)?;
    Ok(EncodedVars {
        embeddings,
        attention,
        text_embedding,
        head_weights,
    })
}

fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::matrix(len, len, data).expect("positive length")
}

/// Decoder logits `[prefix.len() + 1, codebook]`. Row `i` is the
/// prediction for motion token `i` given the text embedding and
/// `prefix[..i]`.
pub fn predict_logits_on(
    graph: &mut Graph,
    params: &ParamVars,
    text_embedding: Var,
    prefix: &[usize],
) -> Result<Var> {
    let len = prefix.len() + 1;
    if len > params.max_len {
        return Err(Error::invalid(format!(
            "sequence of {len} positions exceeds the model maximum of {}",
            params.max_len
        )));
    }
    let cond = graph.matmul(text_embedding, params.cond_proj)?;
    let cond = graph.add_bias(cond, params.cond_bias)?;
    let mut x = if prefix.is_empty() {
        cond
    } else {
        let tokens = graph.gather(params.token_embedding, prefix)?;
        graph.concat(&[cond, tokens], 0)?
    };
    let positions: Vec<usize> = (0..len).collect();
    let pos = graph.gather(params.position_embedding, &positions)?;
    x = graph.add(x, pos)?;
    let mask = graph.constant(causal_mask(len));
    for layer in &params.layers {
        let mut outputs = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            outputs.push(attend(graph, x, head, params.head_scale, Some(mask))?.1);
        }
        let joined = graph.concat(&outputs, 1)?;
        let attended = graph.matmul(joined, layer.out_proj)?;
        let attended = graph.add_bias(attended, layer.out_bias)?;
        x = graph.add(x, attended)?;
        let hidden = graph.matmul(x, layer.mlp_in)?;
        let hidden = graph.add_bias(hidden, layer.mlp_in_bias)?;
        let hidden = graph.relu(hidden)?;
        let mlp = graph.matmul(hidden, layer.mlp_out)?;
        let mlp = graph.add_bias(mlp, layer.mlp_out_bias)?;
        x = graph.add(x, mlp)?;
    }
    let logits = graph.matmul(x, params.logit_proj)?;
    graph.add_bias(logits, params.logit_bias)
}

pub fn predict_distributions_on(
    graph: &mut Graph,
    params: &ParamVars,
    text_embedding: Var,
    prefix: &[usize],
) -> Result<Var> {
    let logits = predict_logits_on(graph, params, text_embedding, prefix)?;
    graph.softmax(logits, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub text_embedding: Vec<f64>,
    pub attention: AttentionVector,
    pub per_head_weights: Vec<Tensor>,
}

/// Encodes a caption. `rho` perturbs the word embeddings and must be
/// `[caption.len(), d_model]`.
pub fn encode(
    caption: &Caption,
    weights: &ModelWeights,
    rho: Option<&Tensor>,
) -> Result<EncoderOutput> {
    let ids = weights.vocab.encode(caption)?;
    let mut graph = Graph::new();
    let params = load_params(&mut graph, weights, false);
    let rho = match rho {
        Some(r) => {
            let expected = [ids.len(), weights.config.d_model];
            if r.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    lhs: expected.to_vec(),
                    rhs: r.shape().to_vec(),
                });
            }
            Some(graph.constant(r.clone()))
        }
        None => None,
    };
    let enc = encode_on(&mut graph, &params, &ids, rho)?;
    Ok(EncoderOutput {
        text_embedding: graph.value(enc.text_embedding).data().to_vec(),
        attention: AttentionVector::new(graph.value(enc.attention).data().to_vec())?,
        per_head_weights: enc
            .head_weights
            .iter()
            .map(|&w| graph.value(w).clone())
            .collect(),
    })
}

/// Predicted distributions for positions `0..=prefix.len()`.
pub fn predict_sequence(
    text_embedding: &[f64],
    weights: &ModelWeights,
    prefix: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if text_embedding.len() != weights.config.d_model {
        return Err(Error::ShapeMismatch {
            op: "predict_sequence",
            lhs: vec![weights.config.d_model],
            rhs: vec![text_embedding.len()],
        });
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= weights.config.codebook_size) {
        return Err(Error::invalid(format!(
            "motion token {bad} outside the codebook"
        )));
    }
    let mut graph = Graph::new();
    let params = load_params(&mut graph, weights, false);
    let ce = graph.constant(Tensor::matrix(
        1,
        text_embedding.len(),
        text_embedding.to_vec(),
    )?);
    let probs = predict_distributions_on(&mut graph, &params, ce, prefix)?;
    Ok(graph.value(probs).rows().map(<[f64]>::to_vec).collect())
}

fn argmax(row: &[f64]) -> usize {
    // First maximum wins so ties resolve to the lower token.
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `length` motion tokens.
pub fn greedy_decode(
    caption: &Caption,
    weights: &ModelWeights,
    length: usize,
) -> Result<MotionTokenSequence> {
    let ids = weights.vocab.encode(caption)?;
    let mut graph = Graph::new();
    let params = load_params(&mut graph, weights, false);
    let enc = encode_on(&mut graph, &params, &ids, None)?;
    let mut tokens = Vec::with_capacity(length);
    for _ in 0..length {
        let logits = predict_logits_on(&mut graph, &params, enc.text_embedding, &tokens)?;
        let value = graph.value(logits);
        let last = value.row(tokens.len());
        tokens.push(argmax(last));
    }
    MotionTokenSequence::new(tokens, weights.config.codebook_size)
}

/// Mean teacher-forced cross-entropy over `records`, each record's
/// positions averaged first.
pub fn transformer_loss(weights: &ModelWeights, records: &[DatasetRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("transformer loss over an empty set"));
    }
    let mut total = 0.0;
    for r in records {
        let ids = weights.vocab.encode(&r.caption)?;
        let motion = r.motion.tokens();
        if motion.is_empty() {
            return Err(Error::invalid(format!(
                "record {} has no motion tokens",
                r.id
            )));
        }
        let mut graph = Graph::new();
        let params = load_params(&mut graph, weights, false);
        let enc = encode_on(&mut graph, &params, &ids, None)?;
        let logits = predict_logits_on(
            &mut graph,
            &params,
            enc.text_embedding,
            &motion[..motion.len() - 1],
        )?;
        let loss = graph.cross_entropy(logits, motion)?;
        total += graph.value(loss).item();
    }
    Ok(total / records.len() as f64)
}
