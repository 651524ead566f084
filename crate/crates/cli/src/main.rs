use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lope::jsonl::{read_jsonl, write_jsonl};
use lope::ngram::{NGramModel, TrainOptions, UnitLevel, DEFAULT_ALPHA};
use lope::perturbgen::{self, PerturbationKind, PerturbationSource, PerturbationSpec, WordPool};
use lope::shaping::{emit_amplification, emit_curves, CurveSpec};
use lope::sim::{
    compare_strategies, evaluate, train, write_metrics_csv, write_paired_csv, ExperimentConfig,
    MetricsRecord, Strategy, SyntheticBank,
};
use lope::toy::{PolicyParams, QuestionSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "lope",
    version,
    about = "Prompt-perturbation resampling for group policy optimization on a toy policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate perturbation texts, one JSON object per line.
    GenPerturb(GenPerturb),
    /// Train, score with, or sample from an n-gram model.
    #[command(subcommand)]
    Ngram(NgramCommand),
    /// Run an experiment and write metrics.jsonl and params.json to DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate pass@G and mean@G of a policy on a question bank.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 8)]
        g: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seed-matched comparison of two configs.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write curves.csv and amplification.csv to DIR.
    Curves {
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        #[arg(long, default_value_t = 2001)]
        points: usize,
        #[arg(long, value_delimiter = ',')]
        pi_old: Option<Vec<f64>>,
        #[arg(long, default_value_t = 8)]
        g: usize,
        #[arg(long, default_value_t = 24)]
        g_prime: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a metrics.jsonl file to CSV.
    ExportCsv {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an experiment config on the synthetic question bank.
    InitConfig {
        #[arg(long, default_value = "lope")]
        strategy: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Seed of the bank generator.
        #[arg(long)]
        bank_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the question bank alone, for `eval`.
        #[arg(long)]
        bank_out: Option<PathBuf>,
        /// Also write the initial policy, for `eval`.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenPerturb {
    #[arg(long, default_value = "lorem")]
    kind: String,
    #[arg(long, default_value_t = 100)]
    min: usize,
    #[arg(long, default_value_t = 300)]
    max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Built-in pool name (lorem, english_top50, latin_top50, english_words) or a file.
    #[arg(long)]
    pool: Option<String>,
    /// Append the boundary instruction.
    #[arg(long)]
    boundary: bool,
    #[arg(long, default_value_t = perturbgen::DEFAULT_ASCII_CHUNK)]
    chunk_width: usize,
    /// Vocabulary entries excluded by random-token.
    #[arg(long)]
    special: Vec<String>,
    /// Model file for ngram, scorer for corpus-filtered.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [20.0, 30.0])]
    band: Vec<f64>,
    /// Print only the text, one perturbation per line.
    #[arg(long)]
    text: bool,
}

#[derive(Subcommand)]
enum NgramCommand {
    Train {
        /// One training sequence per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        char_level: bool,
        /// Do not model the end of a sequence.
        #[arg(long)]
        no_end: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints `ppl<TAB>logprob` for every line of the input.
    Score {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to standard input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

fn fail(msg: impl Into<String>) -> lope::Error {
    lope::Error::Config(msg.into())
}

fn load_pool(name: &str) -> lope::Result<WordPool> {
    match WordPool::builtin(name) {
        Some(p) => Ok(p),
        None => WordPool::load(Path::new(name)),
    }
}

fn perturbation_spec(args: &GenPerturb) -> lope::Result<PerturbationSpec> {
    let kind = PerturbationKind::from_name(&args.kind)
        .ok_or_else(|| fail(format!("unknown generator {}", args.kind)))?;
    let pool = |default: &str| load_pool(args.pool.as_deref().unwrap_or(default));
    let model = || {
        args.model
            .as_deref()
            .ok_or_else(|| fail(format!("{kind} needs --model")))
            .and_then(NGramModel::load)
    };
    let source = match kind {
        PerturbationKind::Lorem => PerturbationSource::Pool(pool("lorem")?),
        PerturbationKind::Unigram => PerturbationSource::Pool(pool("english_top50")?),
        PerturbationKind::FakeEnglish => PerturbationSource::Pool(pool("english_words")?),
        PerturbationKind::RandomAscii => PerturbationSource::Ascii {
            chunk_width: args.chunk_width,
        },
        PerturbationKind::RandomToken => PerturbationSource::Vocab {
            vocab: pool("english_words")?,
            special: args.special.iter().cloned().collect::<BTreeSet<_>>(),
        },
        PerturbationKind::Ngram => PerturbationSource::Ngram(model()?),
        PerturbationKind::CorpusFiltered => {
            let corpus = args
                .corpus
                .as_deref()
                .ok_or_else(|| fail("corpus-filtered needs --corpus"))?;
            PerturbationSource::Corpus {
                entries: perturbgen::read_corpus(corpus)?,
                scorer: model()?,
                band: [args.band[0], args.band[1]],
            }
        }
    };
    let spec = PerturbationSpec {
        kind,
        min_len: args.min,
        max_len: args.max,
        seed: args.seed,
        source,
        append_boundary: args.boundary,
    };
    spec.validate()?;
    Ok(spec)
}

fn gen_perturb(args: &GenPerturb) -> lope::Result<()> {
    let spec = perturbation_spec(args)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for i in 0..args.count {
        let p = perturbgen::generate(&spec.with_seed(args.seed.wrapping_add(i)))?;
        if args.text {
            writeln!(out, "{}", p.text)?;
        } else {
            serde_json::to_writer(&mut out, &p)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn ngram(cmd: &NgramCommand) -> lope::Result<()> {
    match cmd {
        NgramCommand::Train {
            corpus,
            order,
            alpha,
            char_level,
            no_end,
            out,
        } => {
            let level = if *char_level {
                UnitLevel::Char
            } else {
                UnitLevel::Word
            };
            let seqs: Vec<Vec<String>> = perturbgen::read_corpus(corpus)?
                .iter()
                .map(|l| level.split(l))
                .collect();
            let options = TrainOptions {
                end_marker: !no_end,
                level,
            };
            NGramModel::train_with(&seqs, *order, *alpha, options)?.save(out)?;
        }
        NgramCommand::Score { model, input } => {
            let model = NGramModel::load(model)?;
            let reader: Box<dyn BufRead> = match input {
                Some(p) => Box::new(BufReader::new(File::open(p)?)),
                None => Box::new(io::stdin().lock()),
            };
            let mut out = BufWriter::new(io::stdout().lock());
            for line in reader.lines() {
                let units = model.level().split(&line?);
                let lp = model.logprob(&units);
                let ppl = model.perplexity(&units).map_or(f64::INFINITY, |p| p);
                writeln!(out, "{ppl}\t{lp}")?;
            }
            out.flush()?;
        }
        NgramCommand::Sample {
            model,
            seed,
            max_len,
            count,
        } => {
            let model = NGramModel::load(model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for _ in 0..*count {
                println!("{}", model.level().join(&model.sample(&mut rng, *max_len)));
            }
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> lope::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn run(cli: Cli) -> lope::Result<()> {
    match cli.command {
        Command::GenPerturb(args) => gen_perturb(&args)?,
        Command::Ngram(cmd) => ngram(&cmd)?,
        Command::Train { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            fs::create_dir_all(&out)?;
            let run = train(&config)?;
            let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
            write_jsonl(&run.metrics, &mut metrics)?;
            metrics.flush()?;
            run.final_state.params.save(&out.join("params.json"))?;
            eprintln!(
                "{} steps, seed {}, wrote {}",
                run.metrics.len(),
                config.seed,
                out.display()
            );
        }
        Command::Eval {
            params,
            bank,
            g,
            temperature,
            seed,
        } => {
            let params = PolicyParams::load(&params)?;
            let bank: Vec<QuestionSpec> = serde_json::from_slice(&fs::read(&bank)?)?;
            for q in &bank {
                q.validate(&params)?;
            }
            let eval = evaluate(
                &params,
                &bank,
                g,
                temperature,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )?;
            println!("{}", serde_json::to_string_pretty(&eval)?);
        }
        Command::Compare { a, b, trials, out } => {
            let (a, b) = (ExperimentConfig::load(&a)?, ExperimentConfig::load(&b)?);
            let report = compare_strategies(&a, &b, trials)?;
            fs::create_dir_all(&out)?;
            let mut paired = BufWriter::new(File::create(out.join("paired.csv"))?);
            write_paired_csv(&report.rows, &mut paired)?;
            paired.flush()?;
            write_json(&out.join("report.json"), &report)?;
            let s = &report.question_pass_sign_test;
            println!(
                "{} vs {}: wins {} losses {} ties {}, sign test p = {:.3e} (two-sided), {:.3e} ({} > {})",
                a.strategy.name(),
                b.strategy.name(),
                s.wins,
                s.losses,
                s.ties,
                s.p_two_sided,
                s.p_greater,
                a.strategy.name(),
                b.strategy.name()
            );
        }
        Command::Curves {
            gamma,
            eps,
            points,
            pi_old,
            g,
            g_prime,
            out,
        } => {
            let mut spec = CurveSpec::new(gamma, eps, points);
            if let Some(p) = pi_old {
                spec.pi_old = p;
            }
            fs::create_dir_all(&out)?;
            let mut curves = BufWriter::new(File::create(out.join("curves.csv"))?);
            emit_curves(&spec, &mut curves)?;
            curves.flush()?;
            let mut amp = BufWriter::new(File::create(out.join("amplification.csv"))?);
            emit_amplification(g, g_prime, &mut amp)?;
            amp.flush()?;
        }
        Command::ExportCsv { metrics, out } => {
            let records: Vec<MetricsRecord> = read_jsonl(BufReader::new(File::open(&metrics)?))?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_metrics_csv(&records, &mut w)?;
            w.flush()?;
        }
        Command::InitConfig {
            strategy,
            steps,
            seed,
            bank_seed,
            out,
            bank_out,
            params_out,
        } => {
            let strategy = Strategy::from_name(&strategy)
                .ok_or_else(|| fail(format!("unknown strategy {strategy}")))?;
            let mut bank = SyntheticBank::default();
            if let Some(s) = bank_seed {
                bank.seed = s;
            }
            let config = bank.experiment(strategy, steps, seed)?;
            write_json(&out, &config)?;
            if let Some(p) = bank_out {
                write_json(&p, &config.question_bank)?;
            }
            if let Some(p) = params_out {
                config.policy.save(&p)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
