//! Command-line entry point wiring corpus generation, decoder training,
//! masked pretraining, distillation, decoding, benchmarking, and the
//! oracle-backed verification suite.
//!
//! Every subcommand reads one JSON config (`--config`), writes its artifacts
//! under the output directory, and drops a `<artifact>.run.json` manifest
//! echoing the full config next to each artifact.

mod config;
mod render;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use markovgen_core::bench::{
    markovgen_decode, run_benchmark, BenchOptions, Variant, DEFAULT_PIN_STRENGTH,
};
use markovgen_core::datagen::{generate_merged, read_corpus, write_corpus};
use markovgen_core::teacher::{
    early_exit, progressive_decode, train_teacher, write_trace, TeacherModel,
};
use markovgen_core::tensor_file::{
    load_params, save_params, NamedTensor, TensorData, TensorFile, FORMAT_VERSION,
};
use markovgen_core::train::{train, TrainInput, TsvMetrics};
use markovgen_core::types::{MrfParams, TokenGrid, VocabSpec};
use markovgen_core::verify::run_default_suite;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "markovgen",
    version,
    about = "Structured token-grid decoding: train, decode, benchmark, verify"
)]
struct Cli {
    /// JSON run configuration (required).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where artifacts are written; overrides the config's output_dir.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file from the config's corpus section.
    GenCorpus,
    /// Train the progressive decoder on a corpus.
    TrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Stage-1 masked-token pretraining of the weight matrices.
    PretrainMrf {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Stage-2 distillation against decoder traces.
    DistillMrf {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        pretrained_mrf: PathBuf,
    },
    /// Decode token grids and render them.
    Decode {
        #[arg(long)]
        teacher: PathBuf,
        /// Trained weight matrices; required for the markovgen variant.
        #[arg(long)]
        mrf: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Cut step override (defaults to the schedule's cut_step).
        #[arg(long)]
        k: Option<usize>,
        /// Inference iterations override.
        #[arg(long)]
        mf_iters: Option<usize>,
        /// Number of grids to decode (seeds counted up from the run seed).
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Also export the full decode trace per grid.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Time and score full vs early-exit vs markovgen decoding.
    Bench {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        mrf: PathBuf,
        /// Conditions and co-occurrence reference come from this corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mf_iters: Option<usize>,
    },
    /// Run the oracle-backed property suite and print pass/fail per property.
    Verify,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MARKOVGEN_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!("--config PATH is required"))?;
    let config = RunConfig::load(config_path)?;
    let output_dir = cli
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&output_dir)
        .with_context(|| format!("creating output dir {}", output_dir.display()))?;
    let seed = cli.seed.unwrap_or(config.seed);

    match &cli.command {
        Command::GenCorpus => gen_corpus(&config, &output_dir, seed),
        Command::TrainTeacher { corpus } => train_teacher_cmd(&config, &output_dir, seed, corpus),
        Command::PretrainMrf { corpus } => pretrain_mrf(&config, &output_dir, seed, corpus),
        Command::DistillMrf {
            corpus,
            teacher,
            pretrained_mrf,
        } => distill_mrf(&config, &output_dir, seed, corpus, teacher, pretrained_mrf),
        Command::Decode {
            teacher,
            mrf,
            variant,
            k,
            mf_iters,
            count,
            dump_trace,
        } => decode_cmd(
            &config,
            &output_dir,
            seed,
            teacher,
            mrf.as_deref(),
            variant,
            *k,
            *mf_iters,
            *count,
            *dump_trace,
        ),
        Command::Bench {
            teacher,
            mrf,
            corpus,
            k,
            mf_iters,
        } => bench_cmd(
            &config,
            &output_dir,
            seed,
            teacher,
            mrf,
            corpus.as_deref(),
            *k,
            *mf_iters,
        ),
        Command::Verify => verify_cmd(&config, &output_dir, seed),
    }
}

/// `<artifact>.run.json`: format version, subcommand, and full config echo.
fn write_manifest(
    artifact: &Path,
    subcommand: &str,
    config: &RunConfig,
) -> anyhow::Result<()> {
    let manifest = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "subcommand": subcommand,
        "config": config,
    });
    let mut path = artifact.as_os_str().to_owned();
    path.push(".run.json");
    std::fs::write(PathBuf::from(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn metrics_file(path: &Path) -> anyhow::Result<TsvMetrics<BufWriter<File>>> {
    Ok(TsvMetrics::new(BufWriter::new(File::create(path)?)))
}

fn gen_corpus(config: &RunConfig, out: &Path, seed: u64) -> anyhow::Result<ExitCode> {
    let section = config.corpus()?;
    let specs = section.to_specs(seed);
    let corpus = generate_merged(&specs)?;
    let vocab = VocabSpec::new(section.vocab_size)?;
    let path = out.join("corpus.mgtf");
    write_corpus(&path, &corpus, vocab, &specs)?;
    write_manifest(&path, "gen-corpus", config)?;
    log::info!("wrote {} grids to {}", corpus.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn train_teacher_cmd(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    corpus_path: &Path,
) -> anyhow::Result<ExitCode> {
    let (corpus, sidecar) = read_corpus(corpus_path)?;
    let observed_conditions = corpus.iter().map(|&(_, c)| c as usize).max().unwrap_or(0) + 1;
    let condition_count = config
        .corpus
        .as_ref()
        .map(|c| c.condition_count)
        .unwrap_or(observed_conditions)
        .max(observed_conditions);
    let section = config.teacher.clone().unwrap_or_default();
    let teacher_config = section.to_config(condition_count, seed.wrapping_add(1));
    let mut metrics = metrics_file(&out.join("metrics_teacher.tsv"))?;
    let (model, report) = train_teacher(&corpus, &teacher_config, &mut metrics)?;
    let path = out.join("teacher.mgtf");
    model.save(&path)?;
    write_manifest(&path, "train-teacher", config)?;
    std::fs::write(
        out.join("teacher_report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "format_version": FORMAT_VERSION,
            "holdout_accuracy": report.holdout_accuracy,
            "baseline_accuracy": report.baseline_accuracy,
            "final_loss": report.final_loss,
            "parameter_count": model.parameter_count(),
            "vocab_size": sidecar.vocab_size,
        }))?,
    )?;
    log::info!(
        "teacher saved to {} (holdout accuracy {:.4}, baseline {:.4})",
        path.display(),
        report.holdout_accuracy,
        report.baseline_accuracy
    );
    Ok(ExitCode::SUCCESS)
}

fn pretrain_mrf(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    corpus_path: &Path,
) -> anyhow::Result<ExitCode> {
    let (corpus, sidecar) = read_corpus(corpus_path)?;
    let grids: Vec<TokenGrid> = corpus.into_iter().map(|(g, _)| g).collect();
    let geometry = grids[0].geometry();
    let vocab = VocabSpec::new(sidecar.vocab_size)?;
    let section = config.mrf.clone().unwrap_or_default();
    let train_config = section.to_train_config(section.pretrain_steps, seed.wrapping_add(2));
    let init = MrfParams::init_training(geometry, vocab, seed.wrapping_add(2));
    let mut metrics = metrics_file(&out.join("metrics_pretrain.tsv"))?;
    let params = train(TrainInput::Pretrain(&grids), init, &train_config, &mut metrics)?;
    let path = out.join("mrf_pretrained.mgtf");
    save_params(&path, &params)?;
    write_manifest(&path, "pretrain-mrf", config)?;
    log::info!("pretrained weights saved to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn distill_mrf(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    corpus_path: &Path,
    teacher_path: &Path,
    pretrained_path: &Path,
) -> anyhow::Result<ExitCode> {
    let (_, _sidecar) = read_corpus(corpus_path)?;
    let teacher = TeacherModel::load(teacher_path)?;
    let pretrained = load_params(pretrained_path)?;
    let section = config.mrf.clone().unwrap_or_default();
    let schedule = config
        .schedule_section()?
        .to_schedule(teacher.geometry().n())?;
    let runs: Vec<(u16, u64)> = (0..section.distill_decodes as u64)
        .map(|i| {
            (
                (i % teacher.condition_count() as u64) as u16,
                seed.wrapping_add(10_000 + i),
            )
        })
        .collect();
    log::info!("generating {} distillation traces", runs.len());
    let examples = markovgen_core::bench::distill_examples(
        &teacher,
        &schedule,
        section.distill_temperature,
        section.unary_strength_kappa,
        &runs,
    )?;
    let train_config = section.to_train_config(section.distill_steps, seed.wrapping_add(3));
    let mut metrics = metrics_file(&out.join("metrics_distill.tsv"))?;
    let params = train(
        TrainInput::Distill(&examples),
        pretrained,
        &train_config,
        &mut metrics,
    )?;
    let path = out.join("mrf_distilled.mgtf");
    save_params(&path, &params)?;
    write_manifest(&path, "distill-mrf", config)?;
    log::info!("distilled weights saved to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn decode_cmd(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    teacher_path: &Path,
    mrf_path: Option<&Path>,
    variant_name: &str,
    k: Option<usize>,
    mf_iters: Option<usize>,
    count: usize,
    dump_trace: bool,
) -> anyhow::Result<ExitCode> {
    let variant: Variant = variant_name.parse()?;
    let teacher = TeacherModel::load(teacher_path)?;
    let geometry = teacher.geometry();
    let mut schedule = config.schedule_section()?.to_schedule(geometry.n())?;
    if let Some(k) = k {
        schedule = schedule.with_cut_step(k)?;
    }
    let mrf = match (variant, mrf_path) {
        (Variant::Markovgen, Some(path)) => Some(load_params(path)?),
        (Variant::Markovgen, None) => bail!("--mrf is required for the markovgen variant"),
        (_, Some(path)) => Some(load_params(path)?),
        (_, None) => None,
    };
    let section = config.bench.clone().unwrap_or_default();
    let mf_iterations = mf_iters
        .or(config.mrf.as_ref().map(|m| m.num_iterations_mf))
        .unwrap_or(5);
    let pin = config
        .mrf
        .as_ref()
        .map(|m| m.unary_strength_kappa)
        .unwrap_or(DEFAULT_PIN_STRENGTH);
    let dir = out.join(format!("decode_{variant}"));
    std::fs::create_dir_all(&dir)?;
    let colors = render::palette(teacher.vocab().size(), seed);
    for i in 0..count {
        let decode_seed = seed.wrapping_add(i as u64);
        let condition = (i % teacher.condition_count()) as u16;
        let grid = match variant {
            Variant::Full => {
                let trace =
                    progressive_decode(&teacher, condition, &schedule, section.temperature, decode_seed)?;
                if dump_trace {
                    write_trace(dir.join(format!("trace_{i:03}.mgtf")), &trace)?;
                }
                trace.final_grid
            }
            Variant::EarlyExit => {
                let trace =
                    progressive_decode(&teacher, condition, &schedule, section.temperature, decode_seed)?;
                if dump_trace {
                    write_trace(dir.join(format!("trace_{i:03}.mgtf")), &trace)?;
                }
                early_exit(&trace, schedule.cut_step())?
            }
            Variant::Markovgen => {
                let params = mrf.as_ref().expect("checked above");
                markovgen_decode(
                    &teacher,
                    params,
                    condition,
                    &schedule,
                    mf_iterations,
                    decode_seed,
                    section.temperature,
                    pin,
                )?
            }
        };
        let grid_path = dir.join(format!("grid_{i:03}.mgtf"));
        let file = TensorFile::new(vec![NamedTensor::new(
            "labels",
            vec![geometry.height() as u32, geometry.width() as u32],
            TensorData::U16(grid.labels().to_vec()),
        )?]);
        file.write(&grid_path)?;
        std::fs::write(
            markovgen_core::teacher::sidecar_path(&grid_path),
            serde_json::to_string_pretty(&serde_json::json!({
                "format_version": FORMAT_VERSION,
                "variant": variant.to_string(),
                "condition": condition,
                "seed": decode_seed,
                "cut_step": schedule.cut_step(),
                "temperature": section.temperature,
            }))?,
        )?;
        render::write_ppm(dir.join(format!("grid_{i:03}.ppm")), &grid, &colors, 16)?;
        render::write_png(dir.join(format!("grid_{i:03}.png")), &grid, &colors, 16)?;
        write_manifest(&grid_path, "decode", config)?;
    }
    log::info!("decoded {count} grid(s) into {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    teacher_path: &Path,
    mrf_path: &Path,
    corpus_path: Option<&Path>,
    k: Option<usize>,
    mf_iters: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let teacher = TeacherModel::load(teacher_path)?;
    let mrf = load_params(mrf_path)?;
    let mut schedule = config
        .schedule_section()?
        .to_schedule(teacher.geometry().n())?;
    if let Some(k) = k {
        schedule = schedule.with_cut_step(k)?;
    }
    let section = config.bench.clone().unwrap_or_default();
    let mrf_section = config.mrf.clone().unwrap_or_default();
    let reference: Option<Vec<TokenGrid>> = match corpus_path {
        Some(path) => Some(read_corpus(path)?.0.into_iter().map(|(g, _)| g).collect()),
        None => None,
    };
    let conditions: Vec<u16> = match corpus_path {
        Some(path) => read_corpus(path)?.0.iter().map(|&(_, c)| c).collect(),
        None => (0..teacher.condition_count() as u16).collect(),
    };
    let decodes: Vec<(u16, u64)> = (0..section.decodes as u64)
        .map(|i| {
            (
                conditions[(i as usize) % conditions.len()],
                seed.wrapping_add(20_000 + i),
            )
        })
        .collect();
    let opts = BenchOptions {
        schedule,
        mf_iterations: mf_iters.unwrap_or(mrf_section.num_iterations_mf),
        repetitions: section.repetitions,
        prefix_temperature: section.temperature,
        pin_strength: mrf_section.unary_strength_kappa,
        variants: section.variants.clone(),
        decodes,
        parallel: section.parallel,
    };
    let report = run_benchmark(&teacher, &mrf, &opts, reference.as_deref())?;
    let json_path = out.join("bench_report.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "format_version": FORMAT_VERSION,
            "config_echo": config,
            "report": report,
        }))?,
    )?;
    let table = report.to_table_string();
    std::fs::write(out.join("bench_report.txt"), &table)?;
    print!("{table}");
    log::info!("bench report written to {}", json_path.display());
    if report.invariant_failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("benchmark invariant failures: {:?}", report.invariant_failures);
        Ok(ExitCode::FAILURE)
    }
}

fn verify_cmd(config: &RunConfig, out: &Path, seed: u64) -> anyhow::Result<ExitCode> {
    let results = run_default_suite(seed)?;
    let mut all_passed = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {} ({:.2}s): {}", r.name, r.seconds, r.details);
        all_passed &= r.passed;
    }
    let report: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            serde_json::json!({
                "name": r.name,
                "passed": r.passed,
                "details": r.details,
            })
        })
        .collect();
    let path = out.join("verify_report.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&serde_json::json!({
            "format_version": FORMAT_VERSION,
            "config_echo": config,
            "properties": report,
            "all_passed": all_passed,
        }))?,
    )?;
    println!(
        "{} of {} properties passed",
        results.iter().filter(|r| r.passed).count(),
        results.len()
    );
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}
