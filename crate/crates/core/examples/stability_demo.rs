//! Trains a base model on a generated corpus, fine-tunes it for stability
//! and prints both evaluations as CSV.
//!
//! cargo run --release -p t2m-core --example stability_demo -- [seed]

use t2m_core::metrics::{evaluate, EvalConfig, EvalReport};
use t2m_core::model::{ModelConfig, ModelWeights, Vocabulary};
use t2m_core::perturb::perturb_corpus;
use t2m_core::toyworld::{generate_corpus, split_records, GrammarConfig, Split, SynonymLexicon};
use t2m_core::train::{finetune_sato, train_base, TrainConfig};

fn main() -> t2m_core::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map_or(0, |s| s.parse().expect("seed is an integer"));
    let lex = SynonymLexicon::toy();
    let grammar = GrammarConfig::default();
    let corpus = generate_corpus(seed, 2000, &grammar, &lex)?;
    let (corpus, _) = perturb_corpus(&corpus, &lex, seed + 100)?;
    let test: Vec<_> = split_records(&corpus, Split::Test)
        .into_iter()
        .cloned()
        .collect();

    let init = ModelWeights::init(
        ModelConfig::default(),
        Vocabulary::for_world(&grammar, &lex),
        seed,
    )?;
    let base_cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let base = train_base(init, &corpus, &base_cfg, None)?.weights;
    let tune_cfg = TrainConfig {
        seed,
        ..TrainConfig::finetune()
    };
    let tuned = finetune_sato(&base, &corpus, &tune_cfg, None)?.weights;

    println!("model,{}", EvalReport::csv_header());
    for (name, w) in [("base", &base), ("stable", &tuned)] {
        println!(
            "{name},{}",
            evaluate(w, &test, &EvalConfig::default())?.csv_row()
        );
    }
    Ok(())
}
