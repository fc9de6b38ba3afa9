//! Brute-force ground truth on tiny instances: exact partition function,
//! exact marginals, exact MAP, and a single-site Gibbs sampler.
//!
//! Enumeration refuses instances with more than `ENUMERATION_GUARD` states.
//! All arithmetic stays in the log domain until probabilities are needed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mrf::energy;
use crate::types::{LogitField, MarginalField, MrfParams, TokenGrid};

/// Maximum number of assignments exhaustive operations will visit.
pub const ENUMERATION_GUARD: f64 = 1e7;

fn guard(params: &MrfParams) -> Result<()> {
    let states = (params.vocab().size() as f64).powi(params.geometry().n() as i32);
    if states > ENUMERATION_GUARD {
        return Err(Error::InstanceTooLarge {
            states,
            limit: ENUMERATION_GUARD,
        });
    }
    Ok(())
}

/// Visit every assignment in lexicographic label order (last site fastest).
fn for_each_assignment<F: FnMut(&[u16])>(n: usize, v: usize, mut visit: F) {
    let mut labels = vec![0u16; n];
    loop {
        visit(&labels);
        let mut site = n;
        loop {
            if site == 0 {
                return;
            }
            site -= 1;
            if (labels[site] as usize) + 1 < v {
                labels[site] += 1;
                break;
            }
            labels[site] = 0;
        }
    }
}

struct RunningLogSumExp {
    max: f64,
    scaled_sum: f64,
}

impl RunningLogSumExp {
    fn new() -> Self {
        RunningLogSumExp {
            max: f64::NEG_INFINITY,
            scaled_sum: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        if x <= self.max {
            self.scaled_sum += (x - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.scaled_sum.ln()
    }
}

/// log Z = log sum over all assignments of exp(-E(x)).
pub fn enumerate_partition(params: &MrfParams, logits: &LogitField) -> Result<f64> {
    params.check_compatible(logits)?;
    guard(params)?;
    let n = params.geometry().n();
    let v = params.vocab().size();
    let geometry = params.geometry();
    let vocab = params.vocab();
    let mut lse = RunningLogSumExp::new();
    let mut err = None;
    for_each_assignment(n, v, |labels| {
        if err.is_some() {
            return;
        }
        let grid = TokenGrid::new(geometry, labels.to_vec(), &vocab).expect("labels in range");
        match energy(params, logits, &grid) {
            Ok(e) => lse.add(-e),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(lse.value())
}

/// Exact per-location marginals `P_i(k)` by full enumeration.
pub fn exact_marginals(params: &MrfParams, logits: &LogitField) -> Result<MarginalField> {
    let log_z = enumerate_partition(params, logits)?;
    let n = params.geometry().n();
    let v = params.vocab().size();
    let geometry = params.geometry();
    let vocab = params.vocab();
    let mut acc = Array2::<f64>::zeros((n, v));
    for_each_assignment(n, v, |labels| {
        let grid = TokenGrid::new(geometry, labels.to_vec(), &vocab).expect("labels in range");
        let p = (-energy(params, logits, &grid).expect("validated inputs") - log_z).exp();
        for (i, &label) in labels.iter().enumerate() {
            acc[[i, label as usize]] += p;
        }
    });
    for mut row in acc.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    MarginalField::new(geometry, vocab, acc)
}

/// Exact minimum-energy assignment; ties break to the lexicographically
/// smallest label sequence.
pub fn exact_map(params: &MrfParams, logits: &LogitField) -> Result<TokenGrid> {
    params.check_compatible(logits)?;
    guard(params)?;
    let n = params.geometry().n();
    let v = params.vocab().size();
    let geometry = params.geometry();
    let vocab = params.vocab();
    let mut best: Option<(f64, Vec<u16>)> = None;
    for_each_assignment(n, v, |labels| {
        let grid = TokenGrid::new(geometry, labels.to_vec(), &vocab).expect("labels in range");
        let e = energy(params, logits, &grid).expect("validated inputs");
        // Lexicographic visit order: a strict improvement keeps the earliest,
        // i.e. lexicographically smallest, minimizer.
        if best.as_ref().is_none_or(|(be, _)| e < *be) {
            best = Some((e, labels.to_vec()));
        }
    });
    let (_, labels) = best.expect("at least one assignment");
    TokenGrid::new(geometry, labels, &vocab)
}

/// Negative local energies at site `i`: both ordered pairwise terms touching
/// the site plus the self term.
fn site_logits(
    params: &MrfParams,
    logits: &LogitField,
    labels: &[u16],
    site: usize,
    neighbors: &[usize],
) -> Vec<f64> {
    let f = logits.values();
    let ws = params.w_spatial();
    let wc = params.w_label();
    let v = params.vocab().size();
    let mut out = Vec::with_capacity(v);
    for k in 0..v {
        let mut value = f[[site, k]] + wc[[k, k]] * ws[[site, site]];
        for &j in neighbors {
            let xj = labels[j] as usize;
            value += wc[[k, xj]] * ws[[site, j]] + wc[[xj, k]] * ws[[j, site]];
        }
        out.push(value);
    }
    out
}

fn sample_categorical_from_logits(rng: &mut ChaCha8Rng, logits: &[f64]) -> u16 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return k as u16;
        }
    }
    (weights.len() - 1) as u16
}

/// Single-site Gibbs sampling in row-major sweep order. One grid is recorded
/// per sweep after `burn_in` sweeps. Works at any size; deterministic per seed.
pub fn gibbs_sample(
    params: &MrfParams,
    logits: &LogitField,
    burn_in: usize,
    num_samples: usize,
    seed: u64,
) -> Result<Vec<TokenGrid>> {
    params.check_compatible(logits)?;
    let n = params.geometry().n();
    let geometry = params.geometry();
    let vocab = params.vocab();
    let ws = params.w_spatial();
    // Skip zero couplings; corpus-generating fields are sparse.
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && (ws[[i, j]] != 0.0 || ws[[j, i]] != 0.0))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Initialize each site from its unary-only distribution.
    let mut labels: Vec<u16> = (0..n)
        .map(|i| {
            let row: Vec<f64> = logits.values().row(i).to_vec();
            sample_categorical_from_logits(&mut rng, &row)
        })
        .collect();
    let mut samples = Vec::with_capacity(num_samples);
    for sweep in 0..burn_in + num_samples {
        for site in 0..n {
            let local = site_logits(params, logits, &labels, site, &neighbors[site]);
            labels[site] = sample_categorical_from_logits(&mut rng, &local);
        }
        if sweep >= burn_in {
            samples.push(TokenGrid::new(geometry, labels.clone(), &vocab)?);
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrf::{log_unnormalized_prob, map_decode, mean_field_infer};
    use crate::types::{GridGeometry, VocabSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn random_instance(
        geometry: GridGeometry,
        vocab: VocabSpec,
        weight_std: f64,
        seed: u64,
    ) -> (MrfParams, LogitField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wdist = Normal::new(0.0, weight_std).unwrap();
        let fdist = Normal::new(0.0, 1.0).unwrap();
        let n = geometry.n();
        let v = vocab.size();
        let ws = Array2::from_shape_fn((n, n), |_| wdist.sample(&mut rng));
        let wc = Array2::from_shape_fn((v, v), |_| wdist.sample(&mut rng));
        let f = Array2::from_shape_fn((n, v), |_| fdist.sample(&mut rng));
        (
            MrfParams::new(geometry, vocab, ws, wc).unwrap(),
            LogitField::new(geometry, vocab, f).unwrap(),
        )
    }

    #[test]
    fn partition_uniform_counts_states() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let params = MrfParams::zeros(g, v);
        let logits = LogitField::zeros(g, v);
        let log_z = enumerate_partition(&params, &logits).unwrap();
        assert_abs_diff_eq!(log_z, 9.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn partition_single_site_logsumexp() {
        let g = GridGeometry::new(1, 1).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let params = MrfParams::zeros(g, v);
        let (a, b) = (0.7, -1.3);
        let logits = LogitField::new(g, v, array![[a, b]]).unwrap();
        let log_z = enumerate_partition(&params, &logits).unwrap();
        let expected = ((a as f64).exp() + (b as f64).exp()).ln();
        assert_abs_diff_eq!(log_z, expected, epsilon = 1e-12);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let g = GridGeometry::new(16, 16).unwrap();
        let v = VocabSpec::new(64).unwrap();
        let params = MrfParams::zeros(g, v);
        let logits = LogitField::zeros(g, v);
        assert!(matches!(
            enumerate_partition(&params, &logits),
            Err(Error::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 0.3, 11);
        let log_z = enumerate_partition(&params, &logits).unwrap();
        let mut total = 0.0;
        for_each_assignment(4, 3, |labels| {
            let grid = TokenGrid::new(g, labels.to_vec(), &v).unwrap();
            total += (log_unnormalized_prob(&params, &logits, &grid).unwrap() - log_z).exp();
        });
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn marginals_uniform_for_zero_instance() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let params = MrfParams::zeros(g, v);
        let logits = LogitField::zeros(g, v);
        let m = exact_marginals(&params, &logits).unwrap();
        for &p in m.values() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attractive_pair_concentrates_joint_not_marginals() {
        // Two fully connected sites, strong attractive identity compatibility,
        // no unaries: marginals stay uniform by symmetry while the joint mass
        // sits on the agreeing assignments.
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let params = MrfParams::new(
            g,
            v,
            array![[0.0, 1.0], [1.0, 0.0]],
            array![[10.0, 0.0], [0.0, 10.0]],
        )
        .unwrap();
        let logits = LogitField::zeros(g, v);
        let m = exact_marginals(&params, &logits).unwrap();
        for &p in m.values() {
            assert_abs_diff_eq!(p, 0.5, epsilon = 1e-9);
        }
        let log_z = enumerate_partition(&params, &logits).unwrap();
        let agree = TokenGrid::new(g, vec![0, 0], &v).unwrap();
        let p_agree =
            (log_unnormalized_prob(&params, &logits, &agree).unwrap() - log_z).exp();
        let disagree = TokenGrid::new(g, vec![0, 1], &v).unwrap();
        let p_disagree =
            (log_unnormalized_prob(&params, &logits, &disagree).unwrap() - log_z).exp();
        assert!(p_agree > 0.49 && p_disagree < 1e-8);
    }

    #[test]
    fn map_separable_is_per_site_argmax() {
        let g = GridGeometry::new(1, 3).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let params = MrfParams::zeros(g, v);
        let logits = LogitField::new(
            g,
            v,
            array![[0.1, 2.0, -1.0], [5.0, 0.0, 0.0], [0.0, 0.0, 3.0]],
        )
        .unwrap();
        let map = exact_map(&params, &logits).unwrap();
        assert_eq!(map.labels(), &[1, 0, 2]);
    }

    #[test]
    fn map_uniform_is_all_zero() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let params = MrfParams::zeros(g, v);
        let logits = LogitField::zeros(g, v);
        assert_eq!(exact_map(&params, &logits).unwrap().labels(), &[0, 0]);
    }

    #[test]
    fn map_beats_random_assignments() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 0.3, 21);
        let map = exact_map(&params, &logits).unwrap();
        let e_map = energy(&params, &logits, &map).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let labels: Vec<u16> = (0..4).map(|_| rng.random_range(0..3) as u16).collect();
            let grid = TokenGrid::new(g, labels, &v).unwrap();
            assert!(e_map <= energy(&params, &logits, &grid).unwrap() + 1e-12);
        }
    }

    #[test]
    fn gibbs_matches_exact_marginals() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 0.2, 5);
        let exact = exact_marginals(&params, &logits).unwrap();
        let samples = gibbs_sample(&params, &logits, 200, 20_000, 31).unwrap();
        let mut counts = Array2::<f64>::zeros((4, 3));
        for s in &samples {
            for (i, &l) in s.labels().iter().enumerate() {
                counts[[i, l as usize]] += 1.0;
            }
        }
        counts /= samples.len() as f64;
        for (e, c) in exact.values().iter().zip(counts.iter()) {
            assert_abs_diff_eq!(e, c, epsilon = 0.05);
        }
    }

    #[test]
    fn gibbs_deterministic_per_seed() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 0.2, 5);
        let a = gibbs_sample(&params, &logits, 10, 5, 7).unwrap();
        let b = gibbs_sample(&params, &logits, 10, 5, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_field_close_to_exact_when_weakly_coupled() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 0.01, 17);
        let exact = exact_marginals(&params, &logits).unwrap();
        let mf = mean_field_infer(&params, &logits, 10).unwrap();
        let max_err = exact
            .values()
            .iter()
            .zip(mf.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.05, "max marginal error {max_err}");
    }

    #[test]
    fn strong_unaries_map_agreement() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wdist = Normal::new(0.0, 0.01).unwrap();
        let ws = Array2::from_shape_fn((4, 4), |_| wdist.sample(&mut rng));
        let wc = Array2::from_shape_fn((3, 3), |_| wdist.sample(&mut rng));
        let params = MrfParams::new(g, v, ws, wc).unwrap();
        let mut f = Array2::zeros((4, 3));
        for i in 0..4 {
            f[[i, (i * 7 % 3) as usize]] = 5.0;
        }
        let logits = LogitField::new(g, v, f).unwrap();
        let mf_map = map_decode(&mean_field_infer(&params, &logits, 10).unwrap());
        let brute = exact_map(&params, &logits).unwrap();
        assert_eq!(mf_map.labels(), brute.labels());
    }
}
