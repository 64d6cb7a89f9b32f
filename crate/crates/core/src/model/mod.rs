//! Toy text encoder and autoregressive motion-token decoder.
//!
//! The encoder embeds caption words and runs one layer of multi-head
//! scaled dot-product self-attention. Its attention vector is the
//! per-head attention matrices averaged over heads and then over query
//! rows, giving one weight per caption token. The text embedding is the
//! mean over rows of the projected attention output.
//!
//! The decoder is a small causal transformer. Position 0 sees only the
//! projected text embedding; position `i > 0` additionally sees the
//! embeddings of motion tokens `0..i`. Row `i` of the output predicts
//! motion token `i`.

mod checkpoint;
mod forward;

use std::collections::HashMap;
use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::toyworld::{Caption, GrammarConfig, SynonymLexicon, DEFAULT_CODEBOOK_SIZE};

pub use checkpoint::{
    read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file,
    CHECKPOINT_VERSION,
};
pub use forward::{
    encode, encode_on, greedy_decode, load_params, predict_distributions_on, predict_logits_on,
    predict_sequence, transformer_loss, EncodedVars, EncoderOutput, ParamVars,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub mlp_hidden: usize,
    pub codebook_size: usize,
    pub max_motion_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            decoder_layers: 2,
            mlp_hidden: 64,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            max_motion_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "d_model must be a positive multiple of heads",
            ));
        }
        if self.mlp_hidden == 0 || self.codebook_size < 2 || self.max_motion_len == 0 {
            return Err(Error::invalid(
                "mlp_hidden, codebook_size and max_motion_len must be positive",
            ));
        }
        Ok(())
    }
}

/// Bijection between words and `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if words.is_empty() {
            return Err(Error::invalid("empty vocabulary"));
        }
        Ok(Vocabulary { words, index })
    }

    /// Every word the grammar and lexicon can produce, sorted.
    pub fn for_world(grammar: &GrammarConfig, lexicon: &SynonymLexicon) -> Self {
        let mut words: Vec<String> = grammar.filler_words();
        words.extend(lexicon.words().into_iter().map(str::to_string));
        words.sort();
        words.dedup();
        Vocabulary::from_words(words).expect("non-empty, deduplicated")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn encode(&self, caption: &Caption) -> Result<Vec<usize>> {
        caption.tokens().iter().map(|w| self.index_of(w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

/// Query/key/value projections of one attention head, each `d × d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub heads: Vec<HeadWeights>,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub role: Role,
    pub embedding: Tensor,
    pub encoder_heads: Vec<HeadWeights>,
    pub encoder_out: Tensor,
    pub encoder_out_bias: Tensor,
    pub cond_proj: Tensor,
    pub cond_bias: Tensor,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub logit_proj: Tensor,
    pub logit_bias: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
    bound: f64,
}

impl Init {
    fn uniform(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-self.bound..self.bound))
            .collect();
        Tensor::matrix(rows, cols, data).expect("positive dims")
    }

    fn head(&mut self, d: usize, dh: usize) -> HeadWeights {
        HeadWeights {
            query: self.uniform(d, dh),
            key: self.uniform(d, dh),
            value: self.uniform(d, dh),
        }
    }
}

impl ModelWeights {
    /// Seeded `uniform(-1/√d, 1/√d)` weights; biases start at zero.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.head_dim();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: 1.0 / (d as f64).sqrt(),
        };
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let embedding = init.uniform(vocab.len(), d);
        let encoder_heads = (0..config.heads).map(|_| init.head(d, dh)).collect();
        let encoder_out = init.uniform(d, d);
        let cond_proj = init.uniform(d, d);
        let token_embedding = init.uniform(config.codebook_size, d);
        let position_embedding = init.uniform(config.max_motion_len, d);
        let layers = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                heads: (0..config.heads).map(|_| init.head(d, dh)).collect(),
                out_proj: init.uniform(d, d),
                out_bias: zeros(d),
                mlp_in: init.uniform(d, config.mlp_hidden),
                mlp_in_bias: zeros(config.mlp_hidden),
                mlp_out: init.uniform(config.mlp_hidden, d),
                mlp_out_bias: zeros(d),
            })
            .collect();
        let logit_proj = init.uniform(d, config.codebook_size);
        Ok(ModelWeights {
            encoder_out_bias: zeros(d),
            cond_bias: zeros(d),
            logit_bias: zeros(config.codebook_size),
            config,
            vocab,
            role: Role::Student,
            embedding,
            encoder_heads,
            encoder_out,
            cond_proj,
            token_embedding,
            position_embedding,
            layers,
            logit_proj,
        })
    }

    /// Every parameter tensor with a stable name, in a fixed order shared by
    /// [`ModelWeights::tensors_mut`] and the checkpoint format.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding)];
        for (h, head) in self.encoder_heads.iter().enumerate() {
            out.push((format!("encoder.head{h}.query"), &head.query));
            out.push((format!("encoder.head{h}.key"), &head.key));
            out.push((format!("encoder.head{h}.value"), &head.value));
        }
        out.push(("encoder.out".into(), &self.encoder_out));
        out.push(("encoder.out_bias".into(), &self.encoder_out_bias));
        out.push(("decoder.cond".into(), &self.cond_proj));
        out.push(("decoder.cond_bias".into(), &self.cond_bias));
        out.push(("decoder.token_embedding".into(), &self.token_embedding));
        out.push((
            "decoder.position_embedding".into(),
            &self.position_embedding,
        ));
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("decoder.layer{l}.head{h}.query"), &head.query));
                out.push((format!("decoder.layer{l}.head{h}.key"), &head.key));
                out.push((format!("decoder.layer{l}.head{h}.value"), &head.value));
            }
            out.push((format!("decoder.layer{l}.out"), &layer.out_proj));
            out.push((format!("decoder.layer{l}.out_bias"), &layer.out_bias));
            out.push((format!("decoder.layer{l}.mlp_in"), &layer.mlp_in));
            out.push((format!("decoder.layer{l}.mlp_in_bias"), &layer.mlp_in_bias));
            out.push((format!("decoder.layer{l}.mlp_out"), &layer.mlp_out));
            out.push((
                format!("decoder.layer{l}.mlp_out_bias"),
                &layer.mlp_out_bias,
            ));
        }
        out.push(("decoder.logits".into(), &self.logit_proj));
        out.push(("decoder.logit_bias".into(), &self.logit_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        for head in &mut self.encoder_heads {
            out.extend([&mut head.query, &mut head.key, &mut head.value]);
        }
        out.extend([
            &mut self.encoder_out,
            &mut self.encoder_out_bias,
            &mut self.cond_proj,
            &mut self.cond_bias,
            &mut self.token_embedding,
            &mut self.position_embedding,
        ]);
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.extend([&mut head.query, &mut head.key, &mut head.value]);
            }
            out.extend([
                &mut layer.out_proj,
                &mut layer.out_bias,
                &mut layer.mlp_in,
                &mut layer.mlp_in_bias,
                &mut layer.mlp_out,
                &mut layer.mlp_out_bias,
            ]);
        }
        out.extend([&mut self.logit_proj, &mut self.logit_bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Zeroes every decoder parameter, making each predicted distribution
    /// uniform over the codebook.
    pub fn zero_decoder(&mut self) {
        let decoder: Vec<bool> = self
            .named_tensors()
            .iter()
            .map(|(name, _)| name.starts_with("decoder."))
            .collect();
        for (t, is_decoder) in self.tensors_mut().into_iter().zip(decoder) {
            if is_decoder {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// A frozen copy of a model. Cheap to clone and safe to share across
/// threads; there is no way to mutate the weights behind it.
#[derive(Clone, Debug)]
pub struct Teacher(Arc<ModelWeights>);

impl Teacher {
    pub fn weights(&self) -> &ModelWeights {
        &self.0
    }
}

impl Deref for Teacher {
    type Target = ModelWeights;

    fn deref(&self) -> &ModelWeights {
        &self.0
    }
}

pub fn snapshot_teacher(weights: &ModelWeights) -> Result<Teacher> {
    if !weights.is_finite() {
        return Err(Error::invalid(
            "cannot snapshot a teacher from non-finite weights",
        ));
    }
    let mut frozen = weights.clone();
    frozen.role = Role::Teacher;
    Ok(Teacher(Arc::new(frozen)))
}

#[cfg(test)]
mod tests;
