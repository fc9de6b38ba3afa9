//! Oracle-backed property checks over the inference, gradient, and decoding
//! machinery. Each runner takes its sizes and tolerances as arguments and
//! reports pass/fail with details; the CLI runs the default suite, and the
//! acceptance tests run the same checks at their own parameters.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bench::{markovgen_from_trace, token_disagreement};
use crate::error::Result;
use crate::mrf::{
    energy, map_decode, mean_field_infer, variational_free_energy,
};
use crate::oracle::{enumerate_partition, exact_map, exact_marginals, gibbs_sample};
use crate::teacher::{early_exit, progressive_decode, train_teacher, TeacherConfig};
use crate::tensor_file::{NamedTensor, TensorData, TensorFile};
use crate::train::{mean_field_backward, random_mask};
use crate::types::{
    DecodeSchedule, GridGeometry, LogitField, MarginalField, MrfParams, TokenGrid, VocabSpec,
};

/// Outcome of one property check.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl PropertyResult {
    fn finish(name: &str, started: Instant, passed: bool, details: String) -> PropertyResult {
        PropertyResult {
            name: name.to_string(),
            passed,
            details,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

pub(crate) fn random_instance(
    geometry: GridGeometry,
    vocab: VocabSpec,
    weight_std: f64,
    logit_std: f64,
    rng: &mut ChaCha8Rng,
) -> (MrfParams, LogitField) {
    let n = geometry.n();
    let v = vocab.size();
    let wdist = Normal::new(0.0, weight_std).expect("valid stddev");
    let fdist = Normal::new(0.0, logit_std).expect("valid stddev");
    let ws = Array2::from_shape_fn((n, n), |_| wdist.sample(rng));
    let wc = Array2::from_shape_fn((v, v), |_| wdist.sample(rng));
    let f = Array2::from_shape_fn((n, v), |_| fdist.sample(rng));
    (
        MrfParams::new(geometry, vocab, ws, wc).expect("finite by construction"),
        LogitField::new(geometry, vocab, f).expect("finite by construction"),
    )
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Inference with all-zero weights must reproduce softmax(f) for any
/// iteration count.
pub fn zero_weight_fixed_point(
    instances: usize,
    geometry: GridGeometry,
    vocab: VocabSpec,
    iteration_counts: &[usize],
    tolerance: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MrfParams::zeros(geometry, vocab);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (_, logits) = random_instance(geometry, vocab, 0.0, 1.0, &mut rng);
        let reference = row_softmax(logits.values());
        for &iters in iteration_counts {
            let q = mean_field_infer(&params, &logits, iters)?;
            for (a, b) in q.values().iter().zip(reference.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(PropertyResult::finish(
        "zero-weight fixed point",
        started,
        worst <= tolerance,
        format!("max deviation {worst:.3e} (tolerance {tolerance:.1e}) over {instances} fields"),
    ))
}

/// Compare one analytic gradient matrix against central finite differences.
fn grads_match(
    analytic: &Array2<f64>,
    reference: &Array2<f64>,
    rel_tol: f64,
    abs_tol: f64,
) -> Option<String> {
    for ((i, j), (&a, &r)) in analytic
        .indexed_iter()
        .map(|(idx, v)| (idx, (v, &reference[idx])))
    {
        if r.abs() < abs_tol {
            if (a - r).abs() > abs_tol {
                return Some(format!("entry ({i},{j}): {a} vs {r} (absolute)"));
            }
        } else if (a - r).abs() / r.abs() > rel_tol {
            return Some(format!(
                "entry ({i},{j}): {a} vs {r} (relative {:.3e})",
                (a - r).abs() / r.abs()
            ));
        }
    }
    None
}

/// Reverse-mode gradients through the unrolled inference match central finite
/// differences of a linear probe loss, entry by entry.
pub fn gradient_check(
    instances: usize,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    for case in 0..instances {
        let geometry = if case % 2 == 0 {
            GridGeometry::new(2, 2)?
        } else {
            GridGeometry::new(3, 3)?
        };
        let vocab = VocabSpec::new(3 + case % 2)?;
        let iters = 1 + case % 3;
        let (params, logits) = random_instance(geometry, vocab, 0.3, 1.0, &mut rng);
        let n = geometry.n();
        let v = vocab.size();
        let probe = Array2::from_shape_fn((n, v), |_| rng.random::<f64>() * 2.0 - 1.0);
        let bundle = mean_field_backward(&params, &logits, iters, &probe)?;
        let loss_of = |p: &MrfParams, f: &LogitField| -> Result<f64> {
            Ok((mean_field_infer(p, f, iters)?.values() * &probe).sum())
        };

        let mut fd_ws = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut plus = params.w_spatial().clone();
                plus[[i, j]] += h;
                let mut minus = params.w_spatial().clone();
                minus[[i, j]] -= h;
                let lp = loss_of(
                    &MrfParams::new(geometry, vocab, plus, params.w_label().clone())?,
                    &logits,
                )?;
                let lm = loss_of(
                    &MrfParams::new(geometry, vocab, minus, params.w_label().clone())?,
                    &logits,
                )?;
                fd_ws[[i, j]] = (lp - lm) / (2.0 * h);
            }
        }
        if let Some(bad) = grads_match(&bundle.d_w_spatial, &fd_ws, rel_tol, abs_tol) {
            return Ok(PropertyResult::finish(
                "gradient check",
                started,
                false,
                format!("case {case} spatial weights: {bad}"),
            ));
        }

        let mut fd_wc = Array2::zeros((v, v));
        for i in 0..v {
            for j in 0..v {
                let mut plus = params.w_label().clone();
                plus[[i, j]] += h;
                let mut minus = params.w_label().clone();
                minus[[i, j]] -= h;
                let lp = loss_of(
                    &MrfParams::new(geometry, vocab, params.w_spatial().clone(), plus)?,
                    &logits,
                )?;
                let lm = loss_of(
                    &MrfParams::new(geometry, vocab, params.w_spatial().clone(), minus)?,
                    &logits,
                )?;
                fd_wc[[i, j]] = (lp - lm) / (2.0 * h);
            }
        }
        if let Some(bad) = grads_match(&bundle.d_w_label, &fd_wc, rel_tol, abs_tol) {
            return Ok(PropertyResult::finish(
                "gradient check",
                started,
                false,
                format!("case {case} label weights: {bad}"),
            ));
        }

        let mut fd_f = Array2::zeros((n, v));
        for i in 0..n {
            for k in 0..v {
                let mut plus = logits.values().clone();
                plus[[i, k]] += h;
                let mut minus = logits.values().clone();
                minus[[i, k]] -= h;
                let lp = loss_of(&params, &LogitField::new(geometry, vocab, plus)?)?;
                let lm = loss_of(&params, &LogitField::new(geometry, vocab, minus)?)?;
                fd_f[[i, k]] = (lp - lm) / (2.0 * h);
            }
        }
        if let Some(bad) = grads_match(&bundle.d_logits, &fd_f, rel_tol, abs_tol) {
            return Ok(PropertyResult::finish(
                "gradient check",
                started,
                false,
                format!("case {case} logits: {bad}"),
            ));
        }
        checked += n * n + v * v + n * v;
    }
    Ok(PropertyResult::finish(
        "gradient check",
        started,
        true,
        format!("{checked} gradient entries matched finite differences over {instances} instances"),
    ))
}

/// Refined marginals should not raise the variational free energy above the
/// initial softmax state, in at least `required_fraction` of instances
/// (parallel updates forfeit a per-instance guarantee).
pub fn free_energy_descent(
    instances: usize,
    weight_std: f64,
    iterations: usize,
    slack: f64,
    required_fraction: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(2, 2)?;
    let vocab = VocabSpec::new(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0usize;
    for _ in 0..instances {
        let (params, logits) = random_instance(geometry, vocab, weight_std, 1.0, &mut rng);
        let q0 = MarginalField::new(geometry, vocab, row_softmax(logits.values()))?;
        let q = mean_field_infer(&params, &logits, iterations)?;
        let f0 = variational_free_energy(&params, &logits, &q0)?;
        let f = variational_free_energy(&params, &logits, &q)?;
        if f <= f0 + slack {
            ok += 1;
        }
    }
    let fraction = ok as f64 / instances as f64;
    Ok(PropertyResult::finish(
        "free-energy descent",
        started,
        fraction >= required_fraction,
        format!(
            "free energy non-increasing in {ok}/{instances} instances ({fraction:.2} vs required {required_fraction:.2})"
        ),
    ))
}

/// Weak coupling: refined marginals close to exact marginals on every
/// instance.
pub fn mean_field_accuracy(
    instances: usize,
    weight_std: f64,
    iterations: usize,
    tolerance: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(2, 2)?;
    let vocab = VocabSpec::new(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (params, logits) = random_instance(geometry, vocab, weight_std, 1.0, &mut rng);
        let exact = exact_marginals(&params, &logits)?;
        let q = mean_field_infer(&params, &logits, iterations)?;
        for (a, b) in q.values().iter().zip(exact.values().iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(PropertyResult::finish(
        "mean-field marginal accuracy",
        started,
        worst <= tolerance,
        format!("max |Q - exact| = {worst:.4} (tolerance {tolerance}) over {instances} instances"),
    ))
}

/// Weak coupling with dominant unaries: the argmax of the refined marginals
/// agrees with the exact minimum-energy assignment on most instances.
pub fn map_agreement(
    instances: usize,
    weight_std: f64,
    unary_gap: f64,
    iterations: usize,
    required_fraction: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(2, 2)?;
    let vocab = VocabSpec::new(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0usize;
    for _ in 0..instances {
        let (params, _) = random_instance(geometry, vocab, weight_std, 1.0, &mut rng);
        let mut f = Array2::zeros((geometry.n(), vocab.size()));
        for i in 0..geometry.n() {
            let preferred = rng.random_range(0..vocab.size());
            f[[i, preferred]] = unary_gap + rng.random::<f64>();
        }
        let logits = LogitField::new(geometry, vocab, f)?;
        let approximate = map_decode(&mean_field_infer(&params, &logits, iterations)?);
        let brute = exact_map(&params, &logits)?;
        if approximate.labels() == brute.labels() {
            agree += 1;
        }
    }
    let fraction = agree as f64 / instances as f64;
    Ok(PropertyResult::finish(
        "MAP agreement with oracle",
        started,
        fraction >= required_fraction,
        format!("agreement {agree}/{instances} ({fraction:.2} vs required {required_fraction:.2})"),
    ))
}

/// Every guarded instance normalizes: sum over assignments of
/// exp(-E - log Z) = 1 within tolerance.
pub fn oracle_normalization(
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..instances {
        let (geometry, vocab) = if case % 2 == 0 {
            (GridGeometry::new(2, 2)?, VocabSpec::new(3)?)
        } else {
            (GridGeometry::new(3, 3)?, VocabSpec::new(2)?)
        };
        let (params, logits) = random_instance(geometry, vocab, 0.3, 1.0, &mut rng);
        let log_z = enumerate_partition(&params, &logits)?;
        let n = geometry.n();
        let v = vocab.size();
        let mut total = 0.0;
        let mut labels = vec![0u16; n];
        loop {
            let grid = TokenGrid::new(geometry, labels.clone(), &vocab)?;
            total += (-energy(&params, &logits, &grid)? - log_z).exp();
            let mut site = n;
            let mut done = true;
            while site > 0 {
                site -= 1;
                if (labels[site] as usize) + 1 < v {
                    labels[site] += 1;
                    done = false;
                    break;
                }
                labels[site] = 0;
            }
            if done {
                break;
            }
        }
        worst = worst.max((total - 1.0).abs());
    }
    Ok(PropertyResult::finish(
        "oracle normalization",
        started,
        worst <= tolerance,
        format!("max |sum P - 1| = {worst:.3e} (tolerance {tolerance:.1e}) over {instances} instances"),
    ))
}

/// Gibbs empirical marginals converge to the exact marginals.
pub fn gibbs_stationarity(
    num_samples: usize,
    burn_in: usize,
    tolerance: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(2, 2)?;
    let vocab = VocabSpec::new(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, logits) = random_instance(geometry, vocab, 0.2, 1.0, &mut rng);
    let exact = exact_marginals(&params, &logits)?;
    let samples = gibbs_sample(&params, &logits, burn_in, num_samples, seed ^ 0x9b)?;
    let mut counts = Array2::<f64>::zeros((geometry.n(), vocab.size()));
    for s in &samples {
        for (i, &l) in s.labels().iter().enumerate() {
            counts[[i, l as usize]] += 1.0;
        }
    }
    counts /= samples.len() as f64;
    let worst = exact
        .values()
        .iter()
        .zip(counts.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(PropertyResult::finish(
        "Gibbs stationarity",
        started,
        worst <= tolerance,
        format!(
            "max |empirical - exact| = {worst:.4} (tolerance {tolerance}) at {num_samples} samples"
        ),
    ))
}

/// Relabeling the vocabulary by a permutation (conjugating the label matrix,
/// permuting logit columns) permutes the refined marginals identically.
pub fn permutation_equivariance(
    instances: usize,
    iterations: usize,
    tolerance: f64,
    seed: u64,
) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(2, 3)?;
    let vocab = VocabSpec::new(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab.size();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (params, logits) = random_instance(geometry, vocab, 0.3, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..v).collect();
        for k in (1..v).rev() {
            let j = rng.random_range(0..=k);
            perm.swap(k, j);
        }
        let mut wc_p = Array2::zeros((v, v));
        let mut f_p = Array2::zeros(logits.values().dim());
        for a in 0..v {
            for b in 0..v {
                wc_p[[perm[a], perm[b]]] = params.w_label()[[a, b]];
            }
        }
        for i in 0..geometry.n() {
            for a in 0..v {
                f_p[[i, perm[a]]] = logits.values()[[i, a]];
            }
        }
        let params_p =
            MrfParams::new(geometry, vocab, params.w_spatial().clone(), wc_p)?;
        let logits_p = LogitField::new(geometry, vocab, f_p)?;
        let q = mean_field_infer(&params, &logits, iterations)?;
        let q_p = mean_field_infer(&params_p, &logits_p, iterations)?;
        for i in 0..geometry.n() {
            for a in 0..v {
                worst = worst
                    .max((q.values()[[i, a]] - q_p.values()[[i, perm[a]]]).abs());
            }
        }
    }
    Ok(PropertyResult::finish(
        "permutation equivariance",
        started,
        worst <= tolerance,
        format!("max deviation {worst:.3e} (tolerance {tolerance:.1e})"),
    ))
}

/// One-hot marginals make the variational free energy coincide with the
/// assignment energy exactly.
pub fn energy_consistency(instances: usize, seed: u64) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(2, 2)?;
    let vocab = VocabSpec::new(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (params, logits) = random_instance(geometry, vocab, 0.5, 1.0, &mut rng);
        let labels: Vec<u16> = (0..geometry.n())
            .map(|_| rng.random_range(0..vocab.size()) as u16)
            .collect();
        let grid = TokenGrid::new(geometry, labels.clone(), &vocab)?;
        let mut qv = Array2::zeros((geometry.n(), vocab.size()));
        for (i, &l) in labels.iter().enumerate() {
            qv[[i, l as usize]] = 1.0;
        }
        let q = MarginalField::new(geometry, vocab, qv)?;
        let fe = variational_free_energy(&params, &logits, &q)?;
        let e = energy(&params, &logits, &grid)?;
        worst = worst.max((fe - e).abs());
    }
    Ok(PropertyResult::finish(
        "one-hot free energy equals energy",
        started,
        worst <= 1e-9,
        format!("max |F - E| = {worst:.3e}"),
    ))
}

/// Inference output rows stay normalized for arbitrary finite inputs.
pub fn row_stochastic(instances: usize, seed: u64) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(3, 3)?;
    let vocab = VocabSpec::new(5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..instances {
        let std = [0.01, 0.3, 2.0][case % 3];
        let (params, logits) = random_instance(geometry, vocab, std, 3.0, &mut rng);
        let q = mean_field_infer(&params, &logits, 8)?;
        for row in q.values().rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    Ok(PropertyResult::finish(
        "row-stochastic inference output",
        started,
        worst <= 1e-6,
        format!("max |row sum - 1| = {worst:.3e}"),
    ))
}

/// Location index round-trip over a full grid.
pub fn index_roundtrip() -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(16, 16)?;
    let mut ok = true;
    for i in 0..geometry.n() {
        let (r, c) = geometry.index_to_rowcol(i)?;
        if geometry.rowcol_to_index(r, c)? != i {
            ok = false;
        }
    }
    let corner = geometry.index_to_rowcol(255)?;
    Ok(PropertyResult::finish(
        "index round-trip",
        started,
        ok && corner == (15, 15),
        format!("corner index 255 -> {corner:?}"),
    ))
}

/// Exactly floor(fraction * n) positions masked.
pub fn mask_count_rule() -> Result<PropertyResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mask = random_mask(256, 0.20, &mut rng);
    let count = mask.iter().filter(|&&m| m).count();
    Ok(PropertyResult::finish(
        "masked-count rule",
        started,
        count == 51,
        format!("256 positions at fraction 0.20 -> {count} masked (expected 51)"),
    ))
}

/// Container write-then-read is bit-identical.
pub fn container_roundtrip(seed: u64) -> Result<PropertyResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Array2::from_shape_fn((5, 7), |_| rng.random::<f64>() * 4.0 - 2.0);
    let file = TensorFile::new(vec![
        NamedTensor::from_matrix("weights", &m),
        NamedTensor::new(
            "labels",
            vec![3, 4],
            TensorData::U16((0..12).map(|i| (i * 31 % 9) as u16).collect()),
        )?,
    ]);
    let mut bytes = Vec::new();
    file.write_to(&mut bytes)?;
    let back = TensorFile::read_from(&bytes[..])?;
    let mut bytes2 = Vec::new();
    back.write_to(&mut bytes2)?;
    Ok(PropertyResult::finish(
        "container round-trip",
        started,
        bytes == bytes2 && back == file,
        format!("{} bytes stable across write-read-write", bytes.len()),
    ))
}

/// Decode invariants on a quickly trained micro decoder: commitments
/// partition the grid, committed tokens never change, early exit at the final
/// step reproduces the full decode, and zero-weight fast-forward equals early
/// exit.
pub fn decode_invariants(seed: u64) -> Result<PropertyResult> {
    let started = Instant::now();
    let geometry = GridGeometry::new(4, 4)?;
    let vocab = VocabSpec::new(2)?;
    let corpus: Vec<(TokenGrid, u16)> = (0..24)
        .map(|_| {
            let labels: Vec<u16> = (0..16).map(|i| (((i / 4) + (i % 4)) % 2) as u16).collect();
            Ok((TokenGrid::new(geometry, labels, &vocab)?, 0u16))
        })
        .collect::<Result<_>>()?;
    let config = TeacherConfig {
        embed_dim: 8,
        hidden_dim: 64,
        window_radius: 1,
        batch_size: 4,
        steps: 120,
        max_targets_per_example: 16,
        seed,
        ..TeacherConfig::default()
    };
    let (model, _) = train_teacher(&corpus, &config, &mut crate::train::NullMetrics)?;
    let schedule = DecodeSchedule::cosine(16, 4, 2)?;
    let zero = MrfParams::zeros(geometry, vocab);
    let mut details = Vec::new();
    let mut passed = true;
    for s in 0..4u64 {
        let trace = progressive_decode(&model, 0, &schedule, 1.0, s)?;
        if let Err(e) = trace.validate_against(&schedule) {
            passed = false;
            details.push(format!("seed {s}: {e}"));
            continue;
        }
        let ee_final = early_exit(&trace, 4)?;
        if ee_final != trace.final_grid {
            passed = false;
            details.push(format!("seed {s}: early exit at final step diverged"));
        }
        let ee = early_exit(&trace, 2)?;
        let mg = markovgen_from_trace(&trace, &zero, 2, 5, 10.0)?;
        if token_disagreement(&ee, &mg)? != 0.0 {
            passed = false;
            details.push(format!("seed {s}: zero-weight fast-forward != early exit"));
        }
    }
    Ok(PropertyResult::finish(
        "decode invariants",
        started,
        passed,
        if details.is_empty() {
            "partition, commitment stability, final-step early exit, zero-weight equivalence"
                .to_string()
        } else {
            details.join("; ")
        },
    ))
}

/// The default suite run by the CLI: every property at fast sizes.
pub fn run_default_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let g16 = GridGeometry::new(4, 4)?;
    let v8 = VocabSpec::new(8)?;
    Ok(vec![
        index_roundtrip()?,
        mask_count_rule()?,
        container_roundtrip(seed)?,
        zero_weight_fixed_point(50, g16, v8, &[0, 1, 5, 10], 1e-6, seed)?,
        row_stochastic(12, seed)?,
        permutation_equivariance(10, 6, 1e-9, seed)?,
        energy_consistency(20, seed)?,
        gradient_check(6, 1e-3, 1e-4, 1e-6, seed)?,
        free_energy_descent(60, 0.1, 10, 1e-9, 0.9, seed)?,
        mean_field_accuracy(40, 0.01, 10, 0.05, seed)?,
        map_agreement(40, 0.01, 5.0, 10, 0.95, seed)?,
        oracle_normalization(10, 1e-9, seed)?,
        gibbs_stationarity(20_000, 300, 0.05, seed)?,
        decode_invariants(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        let g = GridGeometry::new(4, 4).unwrap();
        let v = VocabSpec::new(8).unwrap();
        let results = vec![
            index_roundtrip().unwrap(),
            mask_count_rule().unwrap(),
            container_roundtrip(3).unwrap(),
            zero_weight_fixed_point(10, g, v, &[0, 1, 5], 1e-6, 3).unwrap(),
            row_stochastic(6, 3).unwrap(),
            permutation_equivariance(4, 4, 1e-9, 3).unwrap(),
            energy_consistency(8, 3).unwrap(),
            gradient_check(2, 1e-3, 1e-4, 1e-6, 3).unwrap(),
            free_energy_descent(20, 0.1, 10, 1e-9, 0.9, 3).unwrap(),
            mean_field_accuracy(10, 0.01, 10, 0.05, 3).unwrap(),
            map_agreement(10, 0.01, 5.0, 10, 0.9, 3).unwrap(),
            oracle_normalization(4, 1e-9, 3).unwrap(),
        ];
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.details);
        }
    }
}
