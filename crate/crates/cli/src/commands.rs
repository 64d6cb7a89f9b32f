use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use t2m_core::metrics::{evaluate, EvalReport};
use t2m_core::model::{read_checkpoint_file, write_checkpoint_file, ModelWeights, Vocabulary};
use t2m_core::perturb::{
    perturb_corpus_with, perturbation_stats, write_stats_report, PerturbationReport,
};
use t2m_core::stability::PerturbMode;
use t2m_core::toyworld::{
    generate_corpus, read_corpus_file, split_records, write_corpus_file, DatasetRecord, Split,
    SynonymLexicon,
};
use t2m_core::train::{finetune_sato, train_base, write_trace, RunOutcome, TrainConfig};

use crate::config::{read_text, write_echo, write_text, Provenance, RunConfig};
use crate::error::CliError;
use crate::report::{comparison_csv, comparison_text, scatter_csv, stats_csv, stats_text, Row};
use crate::{Command, Common, Mode, Optim, SplitArg};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Perturb(a) => perturb(a),
        Command::Stats(a) => stats(a),
        Command::TrainBase(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn lexicon(common: &Common) -> Result<SynonymLexicon, CliError> {
    match &common.lexicon {
        None => Ok(SynonymLexicon::toy()),
        Some(path) => {
            require(path)?;
            let file =
                File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            Ok(SynonymLexicon::read_from(BufReader::new(file))?)
        }
    }
}

fn load_corpus(path: &Path, lex: &SynonymLexicon) -> Result<Vec<DatasetRecord>, CliError> {
    require(path)?;
    Ok(read_corpus_file(path, lex)?)
}

fn load_model(path: &Path) -> Result<ModelWeights, CliError> {
    require(path)?;
    Ok(read_checkpoint_file(path)?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn gen_data(a: crate::GenData) -> Result<(), CliError> {
    let mut config = RunConfig::load(a.common.config.as_deref())?;
    if let Some(rate) = a.synonym_rate {
        config.grammar.synonym_rate = rate;
    }
    if let Some(k) = a.codebook_size {
        config.grammar.codebook_size = k;
    }
    let lex = lexicon(&a.common)?;
    let corpus = generate_corpus(a.common.seed, a.size, &config.grammar, &lex)?;
    write_corpus_file(&corpus, &a.out)?;
    write_echo(
        &a.out,
        &Provenance {
            command: "gen-data",
            seed: Some(a.common.seed),
            inputs: a.common.lexicon.iter().map(PathBuf::as_path).collect(),
            config: Some(&config),
        },
    )?;
    println!("wrote {} records to {}", corpus.len(), a.out.display());
    Ok(())
}

fn perturb(a: crate::Perturb) -> Result<(), CliError> {
    let mut config = RunConfig::load(a.common.config.as_deref())?;
    if let Some(p) = a.replace_prob {
        config.perturb.replace_prob = p;
    }
    let lex = lexicon(&a.common)?;
    let corpus = load_corpus(&a.input, &lex)?;
    let (perturbed, report) = perturb_corpus_with(&corpus, &lex, &config.perturb, a.common.seed)?;
    write_corpus_file(&perturbed, &a.out)?;
    write_echo(
        &a.out,
        &Provenance {
            command: "perturb",
            seed: Some(a.common.seed),
            inputs: vec![&a.input],
            config: Some(&config),
        },
    )?;
    print!("{}", stats_text(&report));
    Ok(())
}

fn stats(a: crate::Stats) -> Result<(), CliError> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let lex = lexicon(&a.common)?;
    let corpus = load_corpus(&a.input, &lex)?;
    let report = perturbation_stats(&corpus, &lex)?;
    let prov = Provenance {
        command: "stats",
        seed: None,
        inputs: vec![&a.input],
        config: Some(&config),
    };
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        write_stats_report(&report, &mut buf)?;
        fs::write(out, buf).map_err(io_err(out))?;
        write_echo(out, &prov)?;
    }
    if let Some(csv) = &a.csv {
        write_text(csv, &stats_csv(&report))?;
        write_echo(csv, &prov)?;
    }
    print!("{}", stats_text(&report));
    Ok(())
}

fn apply_optim(cfg: &mut TrainConfig, o: &Optim, seed: u64) {
    cfg.seed = seed;
    if let Some(v) = o.iterations {
        cfg.total_iterations = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.warmup {
        cfg.warmup_iterations = v;
    }
    if let Some(v) = o.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if o.select_best {
        cfg.select_best = true;
    }
}

fn checkpoint_dir(o: &Optim) -> Result<Option<&Path>, CliError> {
    match &o.checkpoint_dir {
        None => Ok(None),
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Ok(Some(dir.as_path()))
        }
    }
}

fn save_run(
    outcome: &RunOutcome,
    out: &Path,
    optim: &Optim,
    prov: &Provenance<'_>,
) -> Result<(), CliError> {
    write_checkpoint_file(&outcome.weights, out)?;
    write_echo(out, prov)?;
    let trace = optim
        .trace
        .clone()
        .unwrap_or_else(|| with_suffix(out, ".trace.csv"));
    let mut buf = Vec::new();
    write_trace(&outcome.trace, &mut buf)?;
    fs::write(&trace, buf).map_err(io_err(&trace))?;
    write_echo(&trace, prov)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "step {}: l_trans {:.5} total {:.5}; selected step {}; wrote {}",
            last.step,
            last.l_trans,
            last.total,
            outcome.best_step,
            out.display()
        );
    } else {
        println!("no steps run; wrote {}", out.display());
    }
    Ok(())
}

fn train(a: crate::TrainBase) -> Result<(), CliError> {
    let mut config = RunConfig::load(a.common.config.as_deref())?;
    apply_optim(&mut config.train, &a.optim, a.common.seed);
    let lex = lexicon(&a.common)?;
    let corpus = load_corpus(&a.data, &lex)?;
    let vocab = Vocabulary::for_world(&config.grammar, &lex);
    let init = ModelWeights::init(config.model.clone(), vocab, a.common.seed)?;
    let outcome = train_base(init, &corpus, &config.train, checkpoint_dir(&a.optim)?)?;
    let prov = Provenance {
        command: "train-base",
        seed: Some(a.common.seed),
        inputs: vec![&a.data],
        config: Some(&config),
    };
    save_run(&outcome, &a.out, &a.optim, &prov)
}

fn finetune(a: crate::Finetune) -> Result<(), CliError> {
    let mut config = RunConfig::load(a.common.config.as_deref())?;
    let cfg = &mut config.finetune;
    apply_optim(cfg, &a.optim, a.common.seed);
    let s = &mut cfg.sato;
    if let Some(m) = a.mode {
        s.mode = match m {
            Mode::Rsr => PerturbMode::Rsr,
            Mode::Pgd => PerturbMode::Pgd,
        };
    }
    for (slot, flag) in [
        (&mut s.lambda1, a.lambda1),
        (&mut s.lambda2, a.lambda2),
        (&mut s.lambda3, a.lambda3),
        (&mut s.pgd_radius, a.pgd_radius),
        (&mut s.pgd_step_size, a.pgd_step_size),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(k) = a.k {
        s.k = k;
    }
    if let Some(n) = a.pgd_steps {
        s.pgd_steps = n;
    }
    let lex = lexicon(&a.common)?;
    let corpus = load_corpus(&a.data, &lex)?;
    let base = load_model(&a.base)?;
    let outcome = finetune_sato(&base, &corpus, &config.finetune, checkpoint_dir(&a.optim)?)?;
    let prov = Provenance {
        command: "finetune",
        seed: Some(a.common.seed),
        inputs: vec![&a.data, &a.base],
        config: Some(&config),
    };
    save_run(&outcome, &a.out, &a.optim, &prov)
}

fn eval(a: crate::Eval) -> Result<(), CliError> {
    let mut config = RunConfig::load(a.common.config.as_deref())?;
    config.eval.diversity_seed = a.common.seed;
    if let Some(w) = a.workers {
        config.eval.workers = w;
    }
    let lex = lexicon(&a.common)?;
    let corpus = load_corpus(&a.data, &lex)?;
    let model = load_model(&a.model)?;
    let records: Vec<DatasetRecord> = match a.split {
        SplitArg::All => corpus,
        SplitArg::Train => owned(&corpus, Split::Train),
        SplitArg::Val => owned(&corpus, Split::Val),
        SplitArg::Test => owned(&corpus, Split::Test),
    };
    let report = evaluate(&model, &records, &config.eval)?;
    let prov = Provenance {
        command: "eval",
        seed: Some(a.common.seed),
        inputs: vec![&a.data, &a.model],
        config: Some(&config),
    };
    // The worker count never changes results, so it is left out of the
    // artifacts to keep them comparable across machines.
    let mut stored = report.clone();
    stored.config.workers = 1;
    let mut buf = Vec::new();
    stored.write_json(&mut buf)?;
    fs::write(&a.out, buf).map_err(io_err(&a.out))?;
    write_echo(&a.out, &prov)?;
    if let Some(csv) = &a.csv {
        let mut buf = Vec::new();
        stored.write_csv(&mut buf)?;
        fs::write(csv, buf).map_err(io_err(csv))?;
        write_echo(csv, &prov)?;
    }
    for (name, value) in report.metrics() {
        println!("{name:<26} {value}");
    }
    Ok(())
}

fn owned(corpus: &[DatasetRecord], split: Split) -> Vec<DatasetRecord> {
    split_records(corpus, split).into_iter().cloned().collect()
}

fn report(a: crate::Report) -> Result<(), CliError> {
    if !a.labels.is_empty() && a.labels.len() != a.compare.len() {
        return Err(CliError::Validation(format!(
            "{} labels for {} reports",
            a.labels.len(),
            a.compare.len()
        )));
    }
    let mut rows = Vec::with_capacity(a.compare.len());
    for (i, path) in a.compare.iter().enumerate() {
        let text = read_text(path)?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| stem(path));
        rows.push(Row { label, report });
    }
    let stats = match &a.stats {
        None => None,
        Some(path) => {
            let text = read_text(path)?;
            let r: PerturbationReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            Some(r)
        }
    };

    let table = comparison_text(&rows);
    print!("{table}");
    if let Some(s) = &stats {
        print!("\n{}", stats_text(s));
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut inputs: Vec<&Path> = a.compare.iter().map(PathBuf::as_path).collect();
        inputs.extend(a.stats.as_deref());
        let prov = Provenance {
            command: "report",
            seed: None,
            inputs,
            config: None,
        };
        let mut files = vec![
            ("comparison.txt", table.clone()),
            ("comparison.csv", comparison_csv(&rows)),
            ("fid_scatter.csv", scatter_csv(&rows)),
        ];
        if let Some(s) = &stats {
            files.push(("perturbation_stats.txt", stats_text(s)));
            files.push(("perturbation_stats.csv", stats_csv(s)));
        }
        for (name, body) in files {
            let path = dir.join(name);
            write_text(&path, &body)?;
            write_echo(&path, &prov)?;
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.split('.').next().unwrap_or(&name).to_string()
}
