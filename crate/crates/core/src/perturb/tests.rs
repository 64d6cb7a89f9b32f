use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelConfig, ModelWeights, Vocabulary};
use crate::toyworld::{
    generate_corpus, ground_truth_motion, DatasetRecord, GrammarConfig, PosTag, Split,
    SynonymClass, SynonymLexicon,
};

fn flat(values: &[f64]) -> Tensor {
    Tensor::vector(values.to_vec()).unwrap()
}

#[test]
fn projection_examples() {
    let inside = project_ball(&flat(&[0.015, 0.02]), 0.05).unwrap();
    assert_eq!(inside.rho.data(), &[0.015, 0.02]);

    let p = project_ball(&flat(&[0.3, 0.4]), 0.05).unwrap();
    assert!((p.rho.data()[0] - 0.03).abs() < 1e-15);
    assert!((p.rho.data()[1] - 0.04).abs() < 1e-15);
    assert!(p.norm() <= 0.05);

    let zero = project_ball(&flat(&[1.0, -2.0]), 0.0).unwrap();
    assert_eq!(zero.rho.data(), &[0.0, 0.0]);
    assert!(project_ball(&flat(&[1.0]), -1.0).is_err());
}

#[test]
fn projection_is_idempotent_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let n = rng.gen_range(1..20);
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let r = rng.gen_range(0.0..1.0);
        let once = project_ball(&flat(&v), r).unwrap();
        assert!(once.norm() <= r + 1e-12);
        let twice = project_ball(&once.rho, r).unwrap();
        assert_eq!(once.rho, twice.rho);
    }
}

#[test]
fn projection_matches_grid_search_in_two_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let r: f64 = rng.gen_range(0.1..1.5);
        // Brute force over a polar grid covering the closed ball.
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=400 {
            let rad = r * i as f64 / 400.0;
            for j in 0..720 {
                let t = j as f64 / 720.0 * std::f64::consts::TAU;
                let p = [rad * t.cos(), rad * t.sin()];
                let d = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2);
                if d < best.0 {
                    best = (d, p);
                }
            }
        }
        let got = project_ball(&flat(&x), r).unwrap();
        let g = got.rho.data();
        let dist_got = ((g[0] - x[0]).powi(2) + (g[1] - x[1]).powi(2)).sqrt();
        assert!(
            dist_got <= best.0.sqrt() + 1e-9,
            "projection is not the nearest point"
        );
        assert!((g[0] - best.1[0]).abs() < 0.01 && (g[1] - best.1[1]).abs() < 0.01);
    }
}

fn toy_model(seed: u64) -> ModelWeights {
    let vocab = Vocabulary::for_world(&GrammarConfig::default(), &SynonymLexicon::toy());
    ModelWeights::init(ModelConfig::default(), vocab, seed).unwrap()
}

#[test]
fn zero_radius_attack_returns_zero() {
    let lex = SynonymLexicon::toy();
    let w = toy_model(1);
    let caption = Caption::parse("a man walks forward slowly", &lex);
    let motion = ground_truth_motion(&caption, 64, 0).unwrap();
    let input = PgdInput {
        caption: &caption,
        motion: motion.tokens(),
        reference_attention: None,
    };
    let config = SatoConfig {
        pgd_radius: 0.0,
        ..SatoConfig::default()
    };
    let p = pgd_attack(&input, &w, &config).unwrap();
    assert!(p.rho.data().iter().all(|&x| x == 0.0));
    let zero_steps = SatoConfig {
        pgd_steps: 0,
        ..SatoConfig::default()
    };
    assert!(pgd_attack(&input, &w, &zero_steps).is_err());
}

#[test]
fn attack_ascends_and_stays_in_the_ball() {
    let lex = SynonymLexicon::toy();
    let corpus = generate_corpus(3, 10, &GrammarConfig::default(), &lex).unwrap();
    let student = toy_model(4);
    let reference_model = toy_model(5);
    let config = SatoConfig {
        pgd_step_size: 1.0,
        ..SatoConfig::default()
    };
    for r in &corpus {
        let reference = crate::model::encode(&r.caption, &reference_model, None).unwrap();
        let input = PgdInput {
            caption: &r.caption,
            motion: r.motion.tokens(),
            reference_attention: Some(reference.attention.values()),
        };
        let p = pgd_attack(&input, &student, &config).unwrap();
        assert!(p.norm() <= config.pgd_radius + 1e-12);
        let zero = Tensor::zeros(p.rho.shape());
        let base = pgd_objective(&input, &student, &zero, &config).unwrap();
        let attacked = pgd_objective(&input, &student, &p.rho, &config).unwrap();
        assert!(attacked >= base, "{attacked} < {base}");
    }
}

fn example_lexicon() -> SynonymLexicon {
    SynonymLexicon::new(vec![
        SynonymClass::new(0, PosTag::Noun, "man", &["human", "person"]),
        SynonymClass::new(1, PosTag::Verb, "flaps", &["waves", "flutters"]),
        SynonymClass::new(2, PosTag::Noun, "arms", &["limbs"]),
        SynonymClass::new(3, PosTag::Verb, "bending", &["stooping", "bowing"]),
    ])
    .unwrap()
}

// Seed chosen so the random walk replays the documented substitution: the
// subject noun and the second verb change, everything else survives.
const EXAMPLE_SEED: u64 = 124;

#[test]
fn reproduces_the_documented_substitution() {
    let lex = example_lexicon();
    let original = Caption::parse(
        "a man flaps his arms like a chicken while bending up and down",
        &lex,
    );
    let expected = "a human flaps his arms like a chicken while stooping up and down";
    let mut rng = ChaCha8Rng::seed_from_u64(EXAMPLE_SEED);
    let out = rsr_perturb(&original, &lex, &mut rng).unwrap();
    assert_eq!(out.text(), expected);
    assert_eq!(out.class_tags(), original.class_tags());
}

#[test]
fn single_tagged_word_is_always_replaced() {
    let lex = SynonymLexicon::toy();
    let c = Caption::parse("the man", &lex);
    for seed in 0..50 {
        let out = rsr_perturb(&c, &lex, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(out.tokens()[0], "the");
        assert_ne!(out.tokens()[1], "man");
        assert_eq!(lex.class_of(&out.tokens()[1]), Some(0));
    }
    assert!(rsr_perturb(
        &Caption::parse("the end", &lex),
        &lex,
        &mut ChaCha8Rng::seed_from_u64(0)
    )
    .is_err());
}

#[test]
fn perturbations_preserve_structure_and_motion() {
    let lex = SynonymLexicon::toy();
    let corpus = generate_corpus(11, 1000, &GrammarConfig::default(), &lex).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for r in &corpus {
        let out = rsr_perturb(&r.caption, &lex, &mut rng).unwrap();
        assert_eq!(out.len(), r.caption.len());
        assert_eq!(out.class_tags(), r.caption.class_tags());
        let mut differs = 0;
        for ((a, b), tag) in r
            .caption
            .tokens()
            .iter()
            .zip(out.tokens())
            .zip(r.caption.class_tags())
        {
            if a != b {
                differs += 1;
                assert!(tag.is_some(), "untagged word {a} changed");
                assert_eq!(lex.class_of(b), *tag);
            }
        }
        assert!(differs >= 1);
        assert_eq!(ground_truth_motion(&out, 64, 0).unwrap(), r.motion);
    }
}

fn fixture_record(
    id: &str,
    original: &str,
    perturbed: &str,
    lex: &SynonymLexicon,
) -> DatasetRecord {
    let caption = Caption::parse(original, lex);
    DatasetRecord {
        id: id.into(),
        motion: ground_truth_motion(&caption, 64, 0).unwrap(),
        caption,
        perturbed_caption: Some(Caption::parse(perturbed, lex)),
        split: Split::Test,
    }
}

#[test]
fn hand_counted_statistics() {
    let lex = SynonymLexicon::toy();
    let records = vec![
        fixture_record("a", "a man walks forward", "a human walks ahead", &lex),
        fixture_record("b", "a woman runs left", "a lady runs left", &lex),
        fixture_record("c", "a child jumps right", "a child jumps right", &lex),
        fixture_record(
            "d",
            "a child crawls backward",
            "a kid creeps backward",
            &lex,
        ),
    ];
    let report = perturbation_stats(&records, &lex).unwrap();
    // Word rates 2/4, 1/4, 0, 2/4; similarities 2/4, 3/4, 1, 2/4.
    assert_eq!(report.stats.caption_replacement_rate, 0.75);
    assert_eq!(report.stats.word_replacement_rate, 0.3125);
    assert_eq!(report.stats.mean_cosine_similarity, 0.6875);
    let counts: Vec<(usize, usize)> = report
        .per_class
        .iter()
        .filter(|c| c.substitutions > 0)
        .map(|c| (c.class_id, c.substitutions))
        .collect();
    assert_eq!(counts, vec![(0, 1), (1, 1), (2, 1), (6, 1), (9, 1)]);
}

#[test]
fn identical_captions_have_unit_similarity() {
    let lex = SynonymLexicon::toy();
    let c = Caption::parse("a man walks forward twice and then walks forward", &lex);
    assert_eq!(caption_cosine_similarity(&c, &c), 1.0);
}

#[test]
fn corpus_perturbation_is_reproducible_and_thorough() {
    let lex = SynonymLexicon::toy();
    let corpus = generate_corpus(5, 500, &GrammarConfig::default(), &lex).unwrap();
    let (a, report) = perturb_corpus(&corpus, &lex, 9).unwrap();
    let (b, _) = perturb_corpus(&corpus, &lex, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(report.stats.caption_replacement_rate, 1.0);
    assert!(report.stats.mean_cosine_similarity < 1.0);
    let mut buf = Vec::new();
    write_stats_report(&report, &mut buf).unwrap();
    let back: PerturbationReport = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back, report);
    assert!(perturb_corpus(&[], &lex, 0).is_err());
}
