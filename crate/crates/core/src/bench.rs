//! Speed/quality harness: full decode, early-exit decode, and fast-forward
//! decode (decoder through the cut step, then one cheap inference pass over
//! the remaining positions), with wallclock and agreement metrics.
//!
//! Quality comparisons derive all variants from one shared trace per seed, so
//! differences are attributable only to the tail strategy. Timing runs each
//! variant end-to-end, single-threaded, with the first repetition discarded
//! as warmup.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{map_decode, mean_field_infer};
use crate::teacher::{
    decode_prefix, early_exit, progressive_decode_annealed, DecodeTrace, TeacherModel,
};
use crate::train::DistillExample;
use crate::types::{DecodeSchedule, MrfParams, TokenGrid, VocabSpec};

/// Logit strength used to pin committed tokens during fast-forward inference.
pub const DEFAULT_PIN_STRENGTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    EarlyExit,
    Markovgen,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::EarlyExit => write!(f, "early-exit"),
            Variant::Markovgen => write!(f, "markovgen"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "early-exit" => Ok(Variant::EarlyExit),
            "markovgen" => Ok(Variant::Markovgen),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}', expected full|early-exit|markovgen"
            ))),
        }
    }
}

/// Per-step temperatures for evaluation decodes: sampled prefix through the
/// cut step, deterministic (argmax) tail.
pub fn eval_temperatures(schedule: &DecodeSchedule, prefix_temperature: f64) -> Vec<f64> {
    (1..=schedule.total_steps())
        .map(|t| {
            if t <= schedule.cut_step() {
                prefix_temperature
            } else {
                0.0
            }
        })
        .collect()
}

/// Fast-forward tail applied to an existing trace: pin everything committed
/// through step `k` into the step-k logits, run inference, take the argmax,
/// and hard-restore the committed tokens.
pub fn markovgen_from_trace(
    trace: &DecodeTrace,
    mrf_params: &MrfParams,
    k: usize,
    mf_iterations: usize,
    pin_strength: f64,
) -> Result<TokenGrid> {
    if k == 0 || k > trace.steps.len() {
        return Err(Error::InvalidArgument(format!(
            "cut step {k} outside [1, {}]",
            trace.steps.len()
        )));
    }
    let committed = trace.committed_through(k);
    finish_with_inference(
        &trace.steps[k - 1].logits,
        &committed,
        mrf_params,
        mf_iterations,
        pin_strength,
    )
    .map(|(grid, _)| grid)
}

fn finish_with_inference(
    cut_logits: &crate::types::LogitField,
    committed: &[(usize, u16)],
    mrf_params: &MrfParams,
    mf_iterations: usize,
    pin_strength: f64,
) -> Result<(TokenGrid, f64)> {
    let started = Instant::now();
    let pinned = cut_logits.with_pinned_rows(committed.iter().copied(), pin_strength)?;
    let q = mean_field_infer(mrf_params, &pinned, mf_iterations)?;
    let mut labels = map_decode(&q).labels().to_vec();
    // Committed tokens are never changed by the inference output.
    for &(pos, label) in committed {
        labels[pos] = label;
    }
    let grid = TokenGrid::new(cut_logits.geometry(), labels, &cut_logits.vocab())?;
    Ok((grid, started.elapsed().as_secs_f64() * 1e3))
}

/// Component timings of one fast-forward decode.
#[derive(Debug, Clone)]
pub struct MarkovgenTiming {
    pub teacher_ms: Vec<f64>,
    pub mrf_ms: f64,
    pub bookkeeping_ms: f64,
    pub total_ms: f64,
}

/// Decoder steps 1..=cut, then one inference pass replaces the remaining
/// steps. Committed tokens are preserved exactly.
pub fn markovgen_decode(
    teacher: &TeacherModel,
    mrf_params: &MrfParams,
    condition: u16,
    schedule: &DecodeSchedule,
    mf_iterations: usize,
    seed: u64,
    prefix_temperature: f64,
    pin_strength: f64,
) -> Result<TokenGrid> {
    markovgen_decode_timed(
        teacher,
        mrf_params,
        condition,
        schedule,
        mf_iterations,
        seed,
        prefix_temperature,
        pin_strength,
    )
    .map(|(grid, _)| grid)
}

pub fn markovgen_decode_timed(
    teacher: &TeacherModel,
    mrf_params: &MrfParams,
    condition: u16,
    schedule: &DecodeSchedule,
    mf_iterations: usize,
    seed: u64,
    prefix_temperature: f64,
    pin_strength: f64,
) -> Result<(TokenGrid, MarkovgenTiming)> {
    mrf_params.check_compatible(&crate::types::LogitField::zeros(
        teacher.geometry(),
        teacher.vocab(),
    ))?;
    let started = Instant::now();
    let k = schedule.cut_step();
    let prefix = decode_prefix(teacher, condition, schedule, prefix_temperature, seed, k)?;
    let (grid, mrf_ms) = finish_with_inference(
        &prefix.logits_at_cut,
        &prefix.committed,
        mrf_params,
        mf_iterations,
        pin_strength,
    )?;
    let total_ms = started.elapsed().as_secs_f64() * 1e3;
    let teacher_total: f64 = prefix.teacher_ms.iter().sum();
    Ok((
        grid,
        MarkovgenTiming {
            teacher_ms: prefix.teacher_ms,
            mrf_ms,
            bookkeeping_ms: total_ms - teacher_total - mrf_ms,
            total_ms,
        },
    ))
}

/// One (cut-step logits with committed pins, final tokens) pair per decode,
/// generated with the evaluation temperature profile.
pub fn distill_examples(
    teacher: &TeacherModel,
    schedule: &DecodeSchedule,
    prefix_temperature: f64,
    pin_strength: f64,
    runs: &[(u16, u64)],
) -> Result<Vec<DistillExample>> {
    let temps = eval_temperatures(schedule, prefix_temperature);
    let k = schedule.cut_step();
    runs.par_iter()
        .map(|&(condition, seed)| {
            let trace = progressive_decode_annealed(teacher, condition, schedule, &temps, seed)?;
            let committed = trace.committed_through(k);
            let logits =
                trace.steps[k - 1]
                    .logits
                    .with_pinned_rows(committed.iter().copied(), pin_strength)?;
            Ok(DistillExample {
                logits,
                target: trace.final_grid,
            })
        })
        .collect()
}

/// Fraction of positions where two grids disagree.
pub fn token_disagreement(a: &TokenGrid, b: &TokenGrid) -> Result<f64> {
    if a.geometry() != b.geometry() {
        return Err(Error::DimensionMismatch(
            "grids must share geometry to compare".to_string(),
        ));
    }
    let differing = a
        .labels()
        .iter()
        .zip(b.labels())
        .filter(|(x, y)| x != y)
        .count();
    Ok(differing as f64 / a.geometry().n() as f64)
}

/// Symmetric distribution over 4-neighbor label pairs, normalized to sum 1.
pub fn neighbor_cooccurrence(grids: &[TokenGrid], vocab: VocabSpec) -> Result<Array2<f64>> {
    if grids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let v = vocab.size();
    let mut counts = Array2::<f64>::zeros((v, v));
    for grid in grids {
        grid.validate(&vocab)?;
        let geometry = grid.geometry();
        for row in 0..geometry.height() {
            for col in 0..geometry.width() {
                let i = row * geometry.width() + col;
                let a = grid.label(i) as usize;
                if col + 1 < geometry.width() {
                    let b = grid.label(i + 1) as usize;
                    counts[[a, b]] += 1.0;
                    counts[[b, a]] += 1.0;
                }
                if row + 1 < geometry.height() {
                    let b = grid.label(i + geometry.width()) as usize;
                    counts[[a, b]] += 1.0;
                    counts[[b, a]] += 1.0;
                }
            }
        }
    }
    let total = counts.sum();
    counts /= total;
    Ok(counts)
}

/// L1 distance between two co-occurrence distributions.
pub fn cooccurrence_l1(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(
            "co-occurrence matrices must share shape".to_string(),
        ));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum())
}

/// Mean disagreement of each tail strategy against the full decode, over a
/// set of shared traces.
#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub decode_count: usize,
    pub mean_disagreement: BTreeMap<String, f64>,
    /// L1 distance between each variant's neighbor co-occurrence distribution
    /// and the reference corpus, when a reference was supplied.
    pub cooccurrence_l1: Option<BTreeMap<String, f64>>,
}

/// Evaluate tail strategies on shared traces (quality only, no timing).
pub fn evaluate_quality(
    teacher: &TeacherModel,
    mrf_params: &MrfParams,
    schedule: &DecodeSchedule,
    mf_iterations: usize,
    prefix_temperature: f64,
    pin_strength: f64,
    runs: &[(u16, u64)],
    reference: Option<&[TokenGrid]>,
) -> Result<QualityReport> {
    if runs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let temps = eval_temperatures(schedule, prefix_temperature);
    let k = schedule.cut_step();
    let outputs: Vec<(TokenGrid, TokenGrid, TokenGrid)> = runs
        .par_iter()
        .map(|&(condition, seed)| {
            let trace = progressive_decode_annealed(teacher, condition, schedule, &temps, seed)?;
            let ee = early_exit(&trace, k)?;
            let mg = markovgen_from_trace(&trace, mrf_params, k, mf_iterations, pin_strength)?;
            Ok((trace.final_grid, ee, mg))
        })
        .collect::<Result<_>>()?;
    let mut ee_sum = 0.0;
    let mut mg_sum = 0.0;
    for (full, ee, mg) in &outputs {
        ee_sum += token_disagreement(ee, full)?;
        mg_sum += token_disagreement(mg, full)?;
    }
    let count = outputs.len() as f64;
    let mut mean_disagreement = BTreeMap::new();
    mean_disagreement.insert(Variant::Full.to_string(), 0.0);
    mean_disagreement.insert(Variant::EarlyExit.to_string(), ee_sum / count);
    mean_disagreement.insert(Variant::Markovgen.to_string(), mg_sum / count);

    let cooccurrence = match reference {
        Some(reference_grids) => {
            let reference_dist = neighbor_cooccurrence(reference_grids, teacher.vocab())?;
            let mut map = BTreeMap::new();
            for (variant, pick) in [
                (Variant::Full, 0usize),
                (Variant::EarlyExit, 1),
                (Variant::Markovgen, 2),
            ] {
                let grids: Vec<TokenGrid> = outputs
                    .iter()
                    .map(|t| match pick {
                        0 => t.0.clone(),
                        1 => t.1.clone(),
                        _ => t.2.clone(),
                    })
                    .collect();
                let dist = neighbor_cooccurrence(&grids, teacher.vocab())?;
                map.insert(
                    variant.to_string(),
                    cooccurrence_l1(&dist, &reference_dist)?,
                );
            }
            Some(map)
        }
        None => None,
    };
    Ok(QualityReport {
        decode_count: outputs.len(),
        mean_disagreement,
        cooccurrence_l1: cooccurrence,
    })
}

#[derive(Debug, Clone, Default)]
struct UnitSamples {
    wallclock: Vec<f64>,
    teacher_steps: Vec<f64>,
    mrf_infer: Vec<f64>,
    bookkeeping: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub samples: usize,
}

impl TimingStats {
    fn from_samples(mut samples: Vec<f64>) -> TimingStats {
        if samples.is_empty() {
            return TimingStats {
                mean_ms: 0.0,
                median_ms: 0.0,
                samples: 0,
            };
        }
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let median = if samples.len() % 2 == 1 {
            samples[samples.len() / 2]
        } else {
            0.5 * (samples[samples.len() / 2 - 1] + samples[samples.len() / 2])
        };
        TimingStats {
            mean_ms: mean,
            median_ms: median,
            samples: samples.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentStats {
    pub teacher_step_ms: TimingStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrf_infer_ms: Option<TimingStats>,
    pub bookkeeping_ms: TimingStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub wallclock: TimingStats,
    pub disagreement_vs_full: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cooccurrence_l1_vs_reference: Option<f64>,
    pub components: ComponentStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct MachineEcho {
    pub os: String,
    pub arch: String,
    pub rayon_threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfigEcho {
    pub schedule_commits: Vec<usize>,
    pub cut_step: usize,
    pub mf_iterations: usize,
    pub repetitions: usize,
    pub prefix_temperature: f64,
    pub pin_strength: f64,
    pub decode_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub variants: Vec<VariantReport>,
    /// Median-wallclock speedup of each variant relative to the full decode.
    pub speedup_vs_full: BTreeMap<String, f64>,
    pub invariant_failures: Vec<String>,
    pub machine: MachineEcho,
    pub config: BenchConfigEcho,
}

impl BenchReport {
    /// Aligned-column text rendering.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>12} {:>14} {:>12}",
            "variant", "mean ms", "median ms", "disagree", "speedup"
        );
        for v in &self.variants {
            let speedup = self
                .speedup_vs_full
                .get(&v.variant.to_string())
                .map(|s| format!("{s:.2}x"))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(
                out,
                "{:<12} {:>12.3} {:>12.3} {:>14.5} {:>12}",
                v.variant.to_string(),
                v.wallclock.mean_ms,
                v.wallclock.median_ms,
                v.disagreement_vs_full,
                speedup
            );
        }
        let _ = writeln!(out, "components (median ms per decode):");
        for v in &self.variants {
            let mrf = v
                .components
                .mrf_infer_ms
                .as_ref()
                .map(|s| format!("{:.3}", s.median_ms))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(
                out,
                "  {:<12} teacher step {:>10.3}  inference {:>10}  bookkeeping {:>10.3}",
                v.variant.to_string(),
                v.components.teacher_step_ms.median_ms,
                mrf,
                v.components.bookkeeping_ms.median_ms
            );
        }
        if !self.invariant_failures.is_empty() {
            let _ = writeln!(out, "INVARIANT FAILURES:");
            for f in &self.invariant_failures {
                let _ = writeln!(out, "  {f}");
            }
        }
        out
    }
}

/// Options for [`run_benchmark`].
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub schedule: DecodeSchedule,
    pub mf_iterations: usize,
    /// End-to-end timing repetitions per decode unit; the first is warmup.
    pub repetitions: usize,
    pub prefix_temperature: f64,
    pub pin_strength: f64,
    pub variants: Vec<Variant>,
    /// (condition, seed) decode units.
    pub decodes: Vec<(u16, u64)>,
    /// Fan timing runs out across decode units (per-decode timers still
    /// apply). Default off: sequential runs give stabler numbers.
    pub parallel: bool,
}

/// Time each requested variant end-to-end and per component, and score
/// quality against the full decode on shared traces at the same seeds.
/// Timing runs single-threaded for stable numbers.
pub fn run_benchmark(
    teacher: &TeacherModel,
    mrf_params: &MrfParams,
    opts: &BenchOptions,
    reference: Option<&[TokenGrid]>,
) -> Result<BenchReport> {
    if opts.repetitions < 3 {
        return Err(Error::InvalidArgument(
            "repetitions must be >= 3 (first is warmup)".to_string(),
        ));
    }
    if opts.decodes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if opts.variants.is_empty() {
        return Err(Error::InvalidArgument("no variants requested".to_string()));
    }
    let schedule = &opts.schedule;
    let k = schedule.cut_step();
    let temps = eval_temperatures(schedule, opts.prefix_temperature);
    let mut invariant_failures = Vec::new();

    // Quality pass: one shared trace per decode unit.
    let quality = evaluate_quality(
        teacher,
        mrf_params,
        schedule,
        opts.mf_iterations,
        opts.prefix_temperature,
        opts.pin_strength,
        &opts.decodes,
        reference,
    )?;
    if quality.mean_disagreement[&Variant::Full.to_string()] != 0.0 {
        invariant_failures.push("full decode disagrees with itself".to_string());
    }

    // Committed-token preservation: every committed position survives the
    // fast-forward output, on every decode unit.
    for &(condition, seed) in &opts.decodes {
        let trace = progressive_decode_annealed(teacher, condition, schedule, &temps, seed)?;
        let mg = markovgen_from_trace(&trace, mrf_params, k, opts.mf_iterations, opts.pin_strength)?;
        for (pos, label) in trace.committed_through(k) {
            if mg.label(pos) != label {
                invariant_failures.push(format!(
                    "seed {seed}: committed position {pos} changed by fast-forward"
                ));
                break;
            }
        }
        let ee = early_exit(&trace, k)?;
        for (pos, label) in trace.committed_through(k) {
            if ee.label(pos) != label {
                invariant_failures.push(format!(
                    "seed {seed}: committed position {pos} changed by early exit"
                ));
                break;
            }
        }
        // Seed parity: an independent prefix decode reproduces the trace
        // commitments exactly.
        let prefix = decode_prefix(
            teacher,
            condition,
            schedule,
            opts.prefix_temperature,
            seed,
            k,
        )?;
        if prefix.committed != trace.committed_through(k) {
            invariant_failures.push(format!("seed {seed}: prefix diverged from shared trace"));
        }
    }

    // Timing pass.
    let mut variant_reports = Vec::new();
    let mut medians: BTreeMap<String, f64> = BTreeMap::new();
    for &variant in &opts.variants {
        let time_unit = |&(condition, seed): &(u16, u64)| -> Result<UnitSamples> {
            let mut samples = UnitSamples::default();
            for rep in 0..opts.repetitions {
                let warmup = rep == 0;
                match variant {
                    Variant::Full => {
                        let started = Instant::now();
                        let trace = progressive_decode_annealed(
                            teacher, condition, schedule, &temps, seed,
                        )?;
                        let total = started.elapsed().as_secs_f64() * 1e3;
                        if !warmup {
                            samples.wallclock.push(total);
                            let teacher_ms: f64 = trace.steps.iter().map(|s| s.teacher_ms).sum();
                            samples
                                .teacher_steps
                                .extend(trace.steps.iter().map(|s| s.teacher_ms));
                            samples.bookkeeping.push(total - teacher_ms);
                        }
                    }
                    Variant::EarlyExit => {
                        let started = Instant::now();
                        let prefix = decode_prefix(
                            teacher,
                            condition,
                            schedule,
                            opts.prefix_temperature,
                            seed,
                            k,
                        )?;
                        let committed: Vec<(usize, u16)> = prefix.committed.clone();
                        let logits = prefix.logits_at_cut;
                        let mut labels: Vec<u16> = (0..teacher.geometry().n())
                            .map(|i| crate::teacher::argmax_row(logits.values().row(i)) as u16)
                            .collect();
                        for (pos, label) in committed {
                            labels[pos] = label;
                        }
                        let grid = TokenGrid::new(teacher.geometry(), labels, &teacher.vocab())?;
                        let total = started.elapsed().as_secs_f64() * 1e3;
                        std::hint::black_box(&grid);
                        if !warmup {
                            samples.wallclock.push(total);
                            let teacher_ms: f64 = prefix.teacher_ms.iter().sum();
                            samples.teacher_steps.extend(prefix.teacher_ms.iter().copied());
                            samples.bookkeeping.push(total - teacher_ms);
                        }
                    }
                    Variant::Markovgen => {
                        let (grid, timing) = markovgen_decode_timed(
                            teacher,
                            mrf_params,
                            condition,
                            schedule,
                            opts.mf_iterations,
                            seed,
                            opts.prefix_temperature,
                            opts.pin_strength,
                        )?;
                        std::hint::black_box(&grid);
                        if !warmup {
                            samples.wallclock.push(timing.total_ms);
                            samples.teacher_steps.extend(timing.teacher_ms.iter().copied());
                            samples.mrf_infer.push(timing.mrf_ms);
                            samples.bookkeeping.push(timing.bookkeeping_ms);
                        }
                    }
                }
            }
            Ok(samples)
        };
        let units: Vec<UnitSamples> = if opts.parallel {
            opts.decodes.par_iter().map(time_unit).collect::<Result<_>>()?
        } else {
            opts.decodes.iter().map(time_unit).collect::<Result<_>>()?
        };
        let mut wallclock = Vec::new();
        let mut teacher_steps = Vec::new();
        let mut mrf_infer = Vec::new();
        let mut bookkeeping = Vec::new();
        for unit in units {
            wallclock.extend(unit.wallclock);
            teacher_steps.extend(unit.teacher_steps);
            mrf_infer.extend(unit.mrf_infer);
            bookkeeping.extend(unit.bookkeeping);
        }
        let stats = TimingStats::from_samples(wallclock);
        medians.insert(variant.to_string(), stats.median_ms);
        variant_reports.push(VariantReport {
            variant,
            wallclock: stats,
            disagreement_vs_full: quality.mean_disagreement[&variant.to_string()],
            cooccurrence_l1_vs_reference: quality
                .cooccurrence_l1
                .as_ref()
                .map(|m| m[&variant.to_string()]),
            components: ComponentStats {
                teacher_step_ms: TimingStats::from_samples(teacher_steps),
                mrf_infer_ms: if mrf_infer.is_empty() {
                    None
                } else {
                    Some(TimingStats::from_samples(mrf_infer))
                },
                bookkeeping_ms: TimingStats::from_samples(bookkeeping),
            },
        });
    }
    let mut speedup_vs_full = BTreeMap::new();
    if let Some(&full_median) = medians.get(&Variant::Full.to_string()) {
        for (name, &median) in &medians {
            if median > 0.0 {
                speedup_vs_full.insert(name.clone(), full_median / median);
            }
        }
    }
    Ok(BenchReport {
        variants: variant_reports,
        speedup_vs_full,
        invariant_failures,
        machine: MachineEcho {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            rayon_threads: rayon::current_num_threads(),
        },
        config: BenchConfigEcho {
            schedule_commits: schedule.commits_per_step().to_vec(),
            cut_step: k,
            mf_iterations: opts.mf_iterations,
            repetitions: opts.repetitions,
            prefix_temperature: opts.prefix_temperature,
            pin_strength: opts.pin_strength,
            decode_count: opts.decodes.len(),
        },
    })
}
