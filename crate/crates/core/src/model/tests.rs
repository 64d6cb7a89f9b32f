use super::*;
use crate::autograd::{finite_difference_check, Graph};
use crate::toyworld::{ground_truth_motion, DatasetRecord, Split};

fn toy_vocab() -> Vocabulary {
    Vocabulary::for_world(&GrammarConfig::default(), &SynonymLexicon::toy())
}

fn toy_model(seed: u64) -> ModelWeights {
    ModelWeights::init(ModelConfig::default(), toy_vocab(), seed).unwrap()
}

fn caption(text: &str) -> Caption {
    Caption::parse(text, &SynonymLexicon::toy())
}

#[test]
fn attention_is_a_distribution_over_tokens() {
    let w = toy_model(1);
    let out = encode(&caption("a man walks forward slowly"), &w, None).unwrap();
    assert_eq!(out.attention.len(), 5);
    assert!((out.attention.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(out.per_head_weights.len(), 4);
    for head in &out.per_head_weights {
        assert_eq!(head.shape(), &[5, 5]);
        for row in head.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(out.text_embedding.len(), 32);
}

#[test]
fn identical_embeddings_give_uniform_attention() {
    let mut w = toy_model(2);
    let d = w.config.d_model;
    let first: Vec<f64> = w.embedding.row(0).to_vec();
    for r in w.embedding.data_mut().chunks_mut(d) {
        r.copy_from_slice(&first);
    }
    let out = encode(&caption("a woman runs left quickly"), &w, None).unwrap();
    for &x in out.attention.values() {
        assert!((x - 0.2).abs() < 1e-12);
    }
}

#[test]
fn unknown_word_is_reported() {
    let w = toy_model(1);
    let err = encode(&caption("a robot walks forward"), &w, None).unwrap_err();
    assert!(matches!(err, Error::UnknownWord(ref word) if word == "robot"));
}

#[test]
fn zeroed_decoder_predicts_uniform_distributions() {
    let mut w = toy_model(3);
    w.zero_decoder();
    let enc = encode(&caption("a child jumps right"), &w, None).unwrap();
    let dists = predict_sequence(&enc.text_embedding, &w, &[4, 9]).unwrap();
    assert_eq!(dists.len(), 3);
    for d in &dists {
        assert_eq!(d.len(), 64);
        for &p in d {
            assert!((p - 1.0 / 64.0).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let w = toy_model(4);
    let enc = encode(&caption("a man spins backward"), &w, None).unwrap();
    let a = predict_sequence(&enc.text_embedding, &w, &[1, 2, 3, 4]).unwrap();
    let b = predict_sequence(&enc.text_embedding, &w, &[1, 2, 60, 61]).unwrap();
    for i in 0..3 {
        assert_eq!(a[i], b[i], "position {i} saw the future");
    }
    assert_ne!(a[3], b[3]);
}

#[test]
fn relabelling_the_vocabulary_changes_nothing() {
    let w = toy_model(5);
    let mut words = w.vocab.words().to_vec();
    words.reverse();
    let vocab = Vocabulary::from_words(words.clone()).unwrap();
    let mut permuted = w.clone();
    let d = w.config.d_model;
    for (new_row, word) in words.iter().enumerate() {
        let old_row = w.vocab.index_of(word).unwrap();
        permuted.embedding.data_mut()[new_row * d..(new_row + 1) * d]
            .copy_from_slice(w.embedding.row(old_row));
    }
    permuted.vocab = vocab;
    let c = caption("a lady dashes ahead hastily in a cheerful mood");
    assert_eq!(
        encode(&c, &w, None).unwrap(),
        encode(&c, &permuted, None).unwrap()
    );
}

#[test]
fn embedding_perturbation_shifts_the_encoding() {
    let w = toy_model(6);
    let c = caption("a man walks forward");
    let clean = encode(&c, &w, None).unwrap();
    let zero = encode(&c, &w, Some(&Tensor::zeros(&[4, 32]))).unwrap();
    assert_eq!(clean, zero);
    let bumped = encode(&c, &w, Some(&Tensor::filled(&[4, 32], 0.05))).unwrap();
    assert_ne!(clean.text_embedding, bumped.text_embedding);
    assert!(encode(&c, &w, Some(&Tensor::zeros(&[3, 32]))).is_err());
}

#[test]
fn greedy_decode_is_deterministic_and_sized() {
    let w = toy_model(7);
    let c = caption("a kid hops left carefully");
    let a = greedy_decode(&c, &w, 12).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a, greedy_decode(&c, &w, 12).unwrap());
    assert!(greedy_decode(&c, &w, 49).is_err());
}

#[test]
fn model_gradients_match_finite_differences() {
    let w = toy_model(8);
    let c = caption("a man walks forward slowly");
    let motion = ground_truth_motion(&c, 64, 0).unwrap();
    let ids = w.vocab.encode(&c).unwrap();
    let mut g = Graph::new();
    let params = load_params(&mut g, &w, true);
    let enc = encode_on(&mut g, &params, &ids, None).unwrap();
    let tokens = motion.tokens();
    let logits = predict_logits_on(
        &mut g,
        &params,
        enc.text_embedding,
        &tokens[..tokens.len() - 1],
    )
    .unwrap();
    let loss = g.cross_entropy(logits, tokens).unwrap();
    g.backward(loss).unwrap();
    let names = w.named_tensors();
    for (i, (name, _)) in names.iter().enumerate() {
        if [
            "encoder.head0.query",
            "encoder.out_bias",
            "decoder.layer1.mlp_in",
            "decoder.logit_bias",
        ]
        .contains(&name.as_str())
        {
            let err = finite_difference_check(&mut g, loss, params.all[i], 1e-6).unwrap();
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut w = toy_model(9);
    w.role = Role::Teacher;
    let mut buf = Vec::new();
    write_checkpoint(&w, &mut buf).unwrap();
    assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), w);

    let mut truncated = buf.clone();
    truncated.truncate(buf.len() - 3);
    assert!(read_checkpoint(truncated.as_slice()).is_err());
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(read_checkpoint(bad_magic.as_slice()).is_err());
    let mut trailing = buf;
    trailing.push(0);
    assert!(read_checkpoint(trailing.as_slice()).is_err());
}

#[test]
fn teacher_is_unaffected_by_later_student_updates() {
    let mut student = toy_model(10);
    let teacher = snapshot_teacher(&student).unwrap();
    assert_eq!(teacher.role, Role::Teacher);
    student.logit_bias.data_mut()[0] += 1.0;
    assert_ne!(teacher.logit_bias, student.logit_bias);
    let copy = teacher.clone();
    assert!(std::ptr::eq(copy.weights(), teacher.weights()));
}

#[test]
fn init_is_seeded_and_bounded() {
    let mut a = toy_model(11);
    assert_eq!(a, toy_model(11));
    assert_ne!(a, toy_model(12));
    let bound = 1.0 / 32f64.sqrt();
    assert!(a
        .tensors()
        .iter()
        .all(|t| t.data().iter().all(|x| x.abs() <= bound)));
    assert_eq!(a.tensors().len(), a.tensors_mut().len());
}

// Frozen from the first verified run; guards against silent changes to
// initialisation or the forward pass.
#[test]
fn golden_encoder_attention_and_loss() {
    let w = toy_model(0);
    let c = caption("a man walks forward slowly");
    let out = encode(&c, &w, None).unwrap();
    let golden = [
        0.1998900123920103,
        0.19985536841825766,
        0.20006570942765478,
        0.2000133865580037,
        0.20017552320407356,
    ];
    for (a, b) in out.attention.values().iter().zip(golden) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let rec = DatasetRecord {
        id: "g".into(),
        motion: ground_truth_motion(&c, 64, 0).unwrap(),
        caption: c,
        perturbed_caption: None,
        split: Split::Train,
    };
    let loss = transformer_loss(&w, &[rec]).unwrap();
    assert!((loss - 4.160230786229515).abs() < 1e-10, "{loss}");
}

#[test]
fn single_token_caption_attends_to_itself() {
    let w = toy_model(13);
    let out = encode(&caption("man"), &w, None).unwrap();
    assert_eq!(out.attention.values(), &[1.0]);
}

fn record(text: &str, motion: Vec<usize>) -> DatasetRecord {
    DatasetRecord {
        id: text.into(),
        caption: caption(text),
        perturbed_caption: None,
        motion: crate::toyworld::MotionTokenSequence::new(motion, 64).unwrap(),
        split: Split::Train,
    }
}

#[test]
fn loss_of_uniform_and_certain_predictions() {
    let mut w = toy_model(14);
    w.zero_decoder();
    let batch = [
        record("a man walks", vec![3, 1, 4, 1, 5]),
        record("a kid hops", vec![9, 2]),
    ];
    let uniform = transformer_loss(&w, &batch).unwrap();
    assert!((uniform - 64f64.ln()).abs() < 1e-12);
    // A huge bias on one token makes every prediction certain.
    w.logit_bias.data_mut()[7] = 1000.0;
    let certain = transformer_loss(&w, &[record("a man walks", vec![7, 7, 7])]).unwrap();
    assert_eq!(certain, 0.0);
    assert!(transformer_loss(&w, &[]).is_err());
}

#[test]
fn causality_holds_for_every_short_prefix_edit() {
    let w = toy_model(15);
    let enc = encode(&caption("a woman kicks left"), &w, None).unwrap();
    for len in 1..=5 {
        let base: Vec<usize> = (0..len).map(|i| (i * 7 + 3) % 64).collect();
        let reference = predict_sequence(&enc.text_embedding, &w, &base).unwrap();
        for j in 0..len {
            let mut edited = base.clone();
            edited[j] = (edited[j] + 31) % 64;
            let changed = predict_sequence(&enc.text_embedding, &w, &edited).unwrap();
            // Prefix token j feeds position j + 1 onwards.
            for i in 0..=j {
                assert_eq!(
                    reference[i], changed[i],
                    "len {len}, edit {j}, position {i}"
                );
            }
        }
    }
    assert!(predict_sequence(&enc.text_embedding, &w, &[64]).is_err());
}

#[test]
fn teacher_matches_student_at_snapshot_time() {
    let student = toy_model(16);
    let teacher = snapshot_teacher(&student).unwrap();
    let c = caption("a person sprints ahead swiftly");
    let s = encode(&c, &student, None).unwrap();
    let t = encode(&c, teacher.weights(), None).unwrap();
    assert_eq!(s, t);
    let ps = predict_sequence(&s.text_embedding, &student, &[1, 2]).unwrap();
    let pt = predict_sequence(&t.text_embedding, &teacher, &[1, 2]).unwrap();
    let d2 = crate::stability::divergence(&ps, &pt, crate::stability::Divergence::Kl).unwrap();
    assert_eq!(d2, 0.0);
}

#[test]
fn golden_three_token_attention() {
    let w = toy_model(0);
    let out = encode(&caption("man walks forward"), &w, None).unwrap();
    let golden = [0.333358316499137, 0.33332193159601825, 0.3333197519048447];
    for (a, b) in out.attention.values().iter().zip(golden) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
