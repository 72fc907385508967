use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dsf_core::config::{ExperimentConfig, Method};
use dsf_core::eval::{self, EmbeddingTable, Split};
use dsf_core::experiments::{self, RunSummary};
use dsf_core::gradcheck::{self, GradCheckConfig};
use dsf_core::train::{self, MetricsRecord, TrainState, Trainer};
use dsf_core::DsfError;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "dsf",
    version,
    about = "Divergence-based similarity experiments"
)]
struct Cli {
    /// Experiment config (JSON). `compare` accepts it more than once.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Root seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Without it results go to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Text => "txt",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// InfoNCE at the cosine optimum over tau x K.
    Table1,
    /// Raw and stabilized concentration as functions of the mean resultant length.
    KappaCurves {
        #[arg(long, default_value_t = 128)]
        p: usize,
        #[arg(long, default_value_t = 0.95)]
        lambda_r: f64,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Randomized single-view divergence/cosine equivalence trials.
    TheoremCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        coords: usize,
    },
    /// Train one config; writes metrics, checkpoint, embeddings and evaluation.
    Train {
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint, or a pair of embedding tables.
    Eval {
        #[arg(long, conflicts_with_all = ["train_table", "test_table"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "test_table")]
        train_table: Option<PathBuf>,
        #[arg(long, requires = "train_table")]
        test_table: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train and evaluate several methods under a fixed `B x 2m` budget.
    Compare {
        /// Number of seeds, starting at the root seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Views per group swept by the default suite.
        #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_VIEW_SWEEP)]
        views: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug)]
enum Failure {
    Core(DsfError),
    Check(String),
}

impl From<DsfError> for Failure {
    fn from(e: DsfError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_VALIDATION
            })
        }
    }
}

/// Writes to `<out>/<name>` when an output directory is set, else to stdout.
fn emit(out: Option<&Path>, name: &str, body: &str) -> std::io::Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), body)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes())?;
            if !body.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match cli.config.as_slice() {
        [] => ExperimentConfig::default(),
        [one] => ExperimentConfig::load(one)?,
        _ => {
            return Err(DsfError::Config {
                field: "--config".into(),
                detail: "this command takes a single config".into(),
            }
            .into())
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Table1 => {
            let t = experiments::table1();
            let (name, body) = match cli.format.unwrap_or(Format::Text) {
                Format::Text => ("table1.txt", t.to_text()),
                Format::Csv => ("table1.csv", t.to_csv()),
                Format::Json => ("table1.json", json(&t)?),
            };
            emit(out, name, &body)?;
        }
        Cmd::KappaCurves {
            p,
            lambda_r,
            points,
        } => {
            let pts = experiments::kappa_curves(*p, *lambda_r, *points)?;
            match cli.format.unwrap_or(Format::Csv) {
                Format::Json => {
                    // the raw curve ends at infinity, which JSON cannot hold
                    let rows: Vec<serde_json::Value> = pts
                        .iter()
                        .map(|c| {
                            serde_json::json!({
                                "r_bar": c.r_bar,
                                "kappa_raw": c.kappa_raw.is_finite().then_some(c.kappa_raw),
                                "kappa_stabilized": c.kappa_stabilized,
                            })
                        })
                        .collect();
                    emit(out, "kappa_curves.json", &json(&rows)?)?
                }
                _ => emit(
                    out,
                    "kappa_curves.csv",
                    &experiments::kappa_curves_csv(&pts),
                )?,
            }
        }
        Cmd::TheoremCheck { trials } => {
            let report = experiments::theorem_check(cli.seed.unwrap_or(0), *trials)?;
            let format = cli.format.unwrap_or(Format::Json);
            let body = match format {
                Format::Json => json(&report)?,
                Format::Csv => {
                    let mut s = String::from("trial,p,tau,negatives,kappa,l_div,l_cos,abs_diff\n");
                    for r in &report.results {
                        s += &format!(
                            "{},{},{},{},{},{},{},{:e}\n",
                            r.trial, r.p, r.tau, r.negatives, r.kappa, r.l_div, r.l_cos, r.abs_diff
                        );
                    }
                    s
                }
                Format::Text => format!(
                    "{} trials, max |L_div - L_cos| = {}, tolerance {:e}: {}\n",
                    report.trials,
                    report
                        .max_abs_diff
                        .map_or("n/a".into(), |m| format!("{m:e}")),
                    report.tolerance,
                    if report.passed { "PASS" } else { "FAIL" }
                ),
            };
            emit(out, &format!("theorem_check.{}", format.ext()), &body)?;
            if !report.passed {
                return Err(Failure::Check(format!(
                    "max abs diff {:?} exceeds {:e}",
                    report.max_abs_diff, report.tolerance
                )));
            }
        }
        Cmd::Gradcheck { coords } => {
            let cfg = GradCheckConfig {
                coords: *coords,
                ..GradCheckConfig::default()
            };
            let cases = gradcheck::run_suite(cli.seed.unwrap_or(0), &cfg)?;
            let format = cli.format.unwrap_or(Format::Csv);
            let body = match format {
                Format::Json => json(&cases)?,
                _ => {
                    let mut s = String::from(
                        "loss,B,m,p,tau,coords,max_rel_error,max_tangent_residual,passed\n",
                    );
                    for c in &cases {
                        s += &format!(
                            "{},{},{},{},{},{},{:e},{:e},{}\n",
                            c.loss,
                            c.batch,
                            c.views_per_group,
                            c.dim,
                            c.tau,
                            c.report.coords_checked,
                            c.report.max_rel_error,
                            c.report.max_tangent_residual,
                            c.report.passed
                        );
                    }
                    s
                }
            };
            emit(out, &format!("gradcheck.{}", format.ext()), &body)?;
            let failed: Vec<_> = cases.iter().filter(|c| !c.report.passed).collect();
            if !failed.is_empty() {
                return Err(Failure::Check(format!(
                    "{} of {} gradient cases failed",
                    failed.len(),
                    cases.len()
                )));
            }
        }
        Cmd::Train {
            resume,
            method,
            epochs,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(m) = method {
                cfg.method = *m;
            }
            if let Some(e) = epochs {
                cfg.optimizer.epochs = *e;
            }
            cfg.validate()?;
            cmd_train(&cfg, resume.as_deref(), out.unwrap_or(&cfg.output.clone()))?;
        }
        Cmd::Eval {
            checkpoint,
            train_table,
            test_table,
            k,
        } => {
            let cfg = load_config(&cli)?;
            let (tr, te) = match (checkpoint, train_table, test_table) {
                (Some(ck), _, _) => {
                    let state = TrainState::load(ck)?;
                    let data = train::generate_dataset(&cfg.dataset, cfg.seed)?;
                    eval::embed_dataset(&state.encoder, &data)?
                }
                (None, Some(a), Some(b)) => (
                    EmbeddingTable::from_csv(&fs::read_to_string(a)?, Split::Train)?,
                    EmbeddingTable::from_csv(&fs::read_to_string(b)?, Split::Test)?,
                ),
                _ => {
                    return Err(DsfError::Config {
                        field: "--checkpoint".into(),
                        detail: "give --checkpoint or both --train-table and --test-table".into(),
                    }
                    .into())
                }
            };
            let result = eval::evaluate(
                &tr,
                &te,
                k.or(cfg.eval.knn_k),
                cfg.eval.probe_epochs,
                cfg.eval.probe_lr,
            )?;
            let format = cli.format.unwrap_or(Format::Json);
            let body = match format {
                Format::Json => json(&result)?,
                _ => format!(
                    "n_train,n_test,knn_k,knn_accuracy,probe_train_accuracy,probe_accuracy\n{},{},{},{},{},{}\n",
                    result.n_train,
                    result.n_test,
                    result.knn_k,
                    result.knn_accuracy,
                    result.probe_train_accuracy,
                    result.probe_accuracy
                ),
            };
            emit(out, &format!("eval.{}", format.ext()), &body)?;
        }
        Cmd::Compare {
            seeds,
            views,
            epochs,
        } => {
            let mut configs = if cli.config.len() > 1 {
                cli.config
                    .iter()
                    .map(|p| ExperimentConfig::load(p))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                let base = load_config(&cli)?;
                experiments::default_suite(&base, views)?
            };
            if let Some(e) = epochs {
                configs.iter_mut().for_each(|c| c.optimizer.epochs = *e);
            }
            let root = cli.seed.unwrap_or(configs[0].seed);
            let seed_list: Vec<u64> = (0..*seeds).map(|i| root + i).collect();
            let runs = experiments::compare(&configs, &seed_list)?;
            let summary = experiments::summarize(&runs);
            match cli.format.unwrap_or(Format::Csv) {
                Format::Json => emit(
                    out,
                    "compare.json",
                    &json(&serde_json::json!({ "runs": runs, "summary": summary }))?,
                )?,
                Format::Csv => {
                    emit(out, "compare.csv", &experiments::compare_csv(&runs))?;
                    if out.is_some() {
                        emit(
                            out,
                            "compare_summary.csv",
                            &experiments::summary_csv(&summary),
                        )?;
                    }
                }
                Format::Text => emit(
                    out,
                    "compare_summary.txt",
                    &experiments::summary_csv(&summary),
                )?,
            }
        }
    }
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>, dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)?;
    let data = train::generate_dataset(&cfg.dataset, cfg.seed)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &data, TrainState::load(p)?)?,
        None => Trainer::new(cfg, &data)?,
    };
    fs::write(dir.join("config.json"), cfg.to_json_pretty())?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(dir.join("metrics.jsonl"))?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    let spe = trainer.steps_per_epoch();
    trainer.run(|r| {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
        if (r.step + 1) % spe == 0 {
            eprintln!(
                "epoch {:>3}  loss {:.4}  margin {:.3}{}",
                r.epoch,
                r.loss,
                r.margin,
                r.mean_kappa
                    .map_or(String::new(), |k| format!("  kappa {k:.3}"))
            );
        }
        records.push(r.clone());
        Ok(())
    })?;
    let wall_secs = trainer.elapsed_secs();
    let state = trainer.into_state();
    state.save(&dir.join("checkpoint.json"))?;

    let mut csv = String::from(MetricsRecord::CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv += &r.csv_row();
        csv.push('\n');
    }
    fs::write(dir.join("metrics.csv"), csv)?;

    let (tr, te) = eval::embed_dataset(&state.encoder, &data)?;
    fs::write(dir.join("embeddings_train.csv"), tr.to_csv())?;
    fs::write(dir.join("embeddings_test.csv"), te.to_csv())?;
    let result = eval::evaluate(
        &tr,
        &te,
        cfg.eval.knn_k,
        cfg.eval.probe_epochs,
        cfg.eval.probe_lr,
    )?;
    fs::write(dir.join("eval.json"), json(&result)?)?;
    if let Some(last) = records.last() {
        let summary = RunSummary {
            method: cfg.method,
            views_per_group: cfg.augmentation.views_per_group,
            batch_size: cfg.optimizer.batch_size,
            seed: cfg.seed,
            temperature: cfg.temperature(),
            steps: state.step,
            final_loss: last.loss,
            last_epoch_loss: {
                let e: Vec<f64> = records
                    .iter()
                    .filter(|r| r.epoch == last.epoch)
                    .map(|r| r.loss)
                    .collect();
                e.iter().sum::<f64>() / e.len() as f64
            },
            final_margin: last.margin,
            max_kappa: records.iter().filter_map(|r| r.max_kappa).reduce(f64::max),
            eval: result.clone(),
            wall_secs,
        };
        fs::write(
            dir.join("summary.csv"),
            experiments::compare_csv(&[summary]),
        )?;
    }
    println!(
        "{} steps, kNN {:.4} (k={}), linear {:.4}; outputs in {}",
        state.step,
        result.knn_accuracy,
        result.knn_k,
        result.probe_accuracy,
        dir.display()
    );
    Ok(())
}
