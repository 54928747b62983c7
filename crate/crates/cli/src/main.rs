//! `distnet` command-line interface.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use distnet::data::csv::{read_table, to_csv_bytes};
use distnet::data::{separated_means, write_atomic};
use distnet::protocol::{ordering, stream_embeddings};
use distnet::{
    diffnet, fit, load_checkpoint, openness_sweep, save_checkpoint, synth_blobs, test_protocol,
    BlobSpec, ClassId, Dataset, ModelCheckpoint, RunConfig,
};

#[derive(Parser)]
#[command(name = "distnet", version, about = "Gaussian distribution networks for open set learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a run config and write the selected checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output.checkpoint` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream the test set through the model in several shuffled orders.
    Test {
        #[arg(long)]
        model: PathBuf,
        /// A run config (its test partition is used) or an `id,label,...` CSV table.
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `runs` from the config, else 10.
        #[arg(long)]
        runs: Option<usize>,
        /// Run r uses seed S+r. Defaults to `seeds.test` from the config, else 0.
        #[arg(long)]
        seed: Option<u64>,
        /// JSON report path. Without it the report goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the first run's predictions as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score a predictions CSV with `truth` and `prediction` columns.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Known classes, comma separated.
        #[arg(long, value_delimiter = ',', required_unless_present = "model", conflicts_with = "model")]
        known: Vec<u32>,
        /// Take the known classes from a checkpoint instead.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retrain with growing known-class sets and tabulate scores against openness.
    OpennessSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        known_counts: Vec<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON table path. Without it the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write latent vectors as CSV `id,label,z0,...`.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        /// A run config or an `id,label,...` CSV table.
        #[arg(long)]
        data: PathBuf,
        /// Partition to embed when `--data` is a run config.
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate isotropic Gaussian blobs as `train.csv` and `test.csv`.
    Synth {
        #[arg(long, default_value_t = 6)]
        classes: u32,
        #[arg(long, default_value_t = 20)]
        input_dim: usize,
        /// Pairwise mean distance in units of sigma.
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 150)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Validation,
    Test,
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    position: usize,
    id: usize,
    truth: u32,
    prediction: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut line = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !line.contains(&cause) {
                    if !line.is_empty() {
                        line.push_str(": ");
                    }
                    line.push_str(&cause);
                }
            }
            eprintln!("error: {}", line.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, out } => train(&config, out),
        Command::Test {
            model,
            data,
            runs,
            seed,
            report,
            predictions,
        } => test(&model, &data, runs, seed, report, predictions),
        Command::Eval {
            predictions,
            known,
            model,
            report,
        } => eval(&predictions, known, model, report),
        Command::OpennessSweep {
            config,
            known_counts,
            runs,
            seed,
            out,
        } => sweep(&config, &known_counts, runs, seed, out),
        Command::ExportEmbeddings { model, data, split, out } => export(&model, &data, split, &out),
        Command::Synth {
            classes,
            input_dim,
            separation,
            sigma,
            train_per_class,
            test_per_class,
            seed,
            out_dir,
        } => synth(classes, input_dim, separation, sigma, train_per_class, test_per_class, seed, &out_dir),
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn train(config_path: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let config = load_config(config_path)?;
    let out = out
        .or_else(|| config.output.checkpoint.clone())
        .context("no checkpoint path: pass --out or set output.checkpoint")?;
    let splits = config.splits()?;
    let train_config = config.train_config(splits.train.input_dim());
    let outcome = fit(&splits.train, &splits.validation, &train_config)?;
    println!("epoch        loss      dscore");
    for e in &outcome.log {
        println!("{:5} {:11.4} {:11.6}", e.epoch, e.loss, e.dscore);
    }
    save_checkpoint(&out, &outcome.checkpoint)?;
    println!(
        "selected epoch {} (dscore {:.6}); checkpoint written to {}",
        outcome.checkpoint.report.epoch,
        outcome.checkpoint.report.dscore,
        out.display()
    );
    Ok(())
}

/// Resolves `--data`: CSV tables are used whole, configs give one partition.
fn load_data(path: &Path, part: Part) -> anyhow::Result<(Dataset, Option<RunConfig>)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return Ok((read_table(path)?, None));
    }
    let config = load_config(path)?;
    let splits = config.splits()?;
    let data = match part {
        Part::Train => splits.train,
        Part::Validation => splits.validation,
        Part::Test => splits.test,
    };
    Ok((data, Some(config)))
}

fn check_input_dim(model: &ModelCheckpoint, data: &Dataset) -> anyhow::Result<()> {
    if model.network.input_dim != data.input_dim() {
        bail!(
            "model expects {} input features, data has {}",
            model.network.input_dim,
            data.input_dim()
        );
    }
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    match path {
        Some(p) => write_atomic(p, &bytes)?,
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(())
}

fn test(
    model_path: &Path,
    data_path: &Path,
    runs: Option<usize>,
    seed: Option<u64>,
    report: Option<PathBuf>,
    predictions: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = load_checkpoint(model_path)?;
    let (data, config) = load_data(data_path, Part::Test)?;
    check_input_dim(&model, &data)?;
    let runs = runs.or(config.as_ref().map(|c| c.runs)).unwrap_or(10);
    let seed = seed.or(config.as_ref().map(|c| c.seeds.test)).unwrap_or(0);
    let result = test_protocol(&model, &data, runs, seed)?;

    if let Some(path) = predictions {
        let embeddings = diffnet::embed(&model.network, &model.params, &data.samples)?;
        let order = ordering(data.len(), seed);
        let stream = stream_embeddings(&model, &embeddings, &order)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for (position, (&i, p)) in order.iter().zip(&stream.predictions).enumerate() {
            w.serialize(PredictionRow {
                position,
                id: data.ids[i],
                truth: data.labels[i].0,
                prediction: p.label.0,
            })?;
        }
        write_atomic(&path, &w.into_inner()?)?;
    }

    let a = &result.aggregate;
    let summary = format!(
        "{} runs: known F1-micro {:.4} ± {:.4}, mean unknown F1 {:.4} ± {:.4}, one-unknown F1 {:.4} ± {:.4}, novel classes {:.1} ± {:.1}",
        a.runs,
        a.f1_micro_known.mean,
        a.f1_micro_known.std,
        a.mean_unknown_f1.mean,
        a.mean_unknown_f1.std,
        a.one_unknown_f1.mean,
        a.one_unknown_f1.std,
        a.novel_classes_created.mean,
        a.novel_classes_created.std,
    );
    match &report {
        Some(path) => {
            write_json(Some(path), &result)?;
            println!("{summary}");
        }
        None => {
            write_json(None, &result)?;
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn eval(path: &Path, known: Vec<u32>, model: Option<PathBuf>, report: Option<PathBuf>) -> anyhow::Result<()> {
    let known: BTreeSet<ClassId> = match model {
        Some(m) => load_checkpoint(&m)?.known_classes().iter().copied().collect(),
        None => known.into_iter().map(ClassId).collect(),
    };
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: no `{name}` column", path.display()))
    };
    let (t, p) = (column("truth")?, column("prediction")?);
    let (mut truths, mut preds) = (Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> anyhow::Result<ClassId> {
            Ok(ClassId(rec[i].trim().parse().with_context(|| {
                format!("{}: row {}: bad label `{}`", path.display(), line + 1, &rec[i])
            })?))
        };
        truths.push(parse(t)?);
        preds.push(parse(p)?);
    }
    let result = distnet::metrics::evaluate(&preds, &truths, &known)?;
    write_json(report.as_deref(), &result)
}

fn sweep(config_path: &Path, counts: &[usize], runs: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let config = load_config(config_path)?;
    let (train_pool, test_pool) = config.load_pools()?;
    let base = config.train_config(train_pool.input_dim());
    let rows = openness_sweep(
        &train_pool,
        &test_pool,
        &config.split,
        &base,
        counts,
        runs.unwrap_or(config.runs),
        seed.unwrap_or(config.seeds.test),
    )?;
    let mut table = String::from("known  openness  dscore  known_f1  one_unknown_f1\n");
    for r in &rows {
        table.push_str(&format!(
            "{:5}  {:8.5}  {:6.3}  {:8.4}  {:14.4}\n",
            r.known_count, r.openness, r.dscore, r.aggregate.f1_micro_known.mean, r.aggregate.one_unknown_f1.mean
        ));
    }
    match &out {
        Some(path) => {
            write_json(Some(path), &rows)?;
            print!("{table}");
        }
        None => {
            write_json(None, &rows)?;
            eprint!("{table}");
        }
    }
    Ok(())
}

fn export(model_path: &Path, data_path: &Path, part: Part, out: &Path) -> anyhow::Result<()> {
    let model = load_checkpoint(model_path)?;
    let (data, _) = load_data(data_path, part)?;
    check_input_dim(&model, &data)?;
    let z = diffnet::embed(&model.network, &model.params, &data.samples)?;
    write_atomic(out, &to_csv_bytes(&data.ids, &data.labels, &z)?)?;
    println!("{} embeddings of dimension {} written to {}", z.rows(), z.cols(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    classes: u32,
    input_dim: usize,
    separation: f64,
    sigma: f64,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if !(sigma > 0.0 && separation > 0.0) || train_per_class == 0 || test_per_class == 0 {
        bail!("sigma, separation and per-class counts must be positive");
    }
    let means = separated_means(classes as usize, input_dim, separation * sigma)?;
    let specs = |count| -> Vec<BlobSpec> {
        means
            .iter()
            .enumerate()
            .map(|(i, m)| BlobSpec {
                label: ClassId(i as u32),
                mean: m.clone(),
                sigma,
                count,
            })
            .collect()
    };
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, count, s) in [("train.csv", train_per_class, seed), ("test.csv", test_per_class, seed.wrapping_add(1))] {
        let ds = synth_blobs(&specs(count), input_dim, s)?;
        let path = out_dir.join(name);
        write_atomic(&path, &to_csv_bytes(&ds.ids, &ds.labels, &ds.samples)?)?;
        println!("{} samples written to {}", ds.len(), path.display());
    }
    Ok(())
}
