//! Synthetic token-grid corpora with known structure, plus corpus file I/O.
//!
//! Patterns: checkerboard and stripes alternate labels drawn from two halves
//! of the palette; blobs grow contiguous random regions; `gt_mrf` samples a
//! ground-truth random field via the Gibbs sampler. Each token is then
//! independently corrupted to a uniform random label with the configured
//! noise rate.
//!
//! When a corpus uses more than one condition label, each condition owns a
//! disjoint slice of the vocabulary, so the condition carries real signal.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::gibbs_sample;
use crate::tensor_file::{grids_to_tensor, tensor_to_grids, TensorFile, FORMAT_VERSION};
use crate::types::{GridGeometry, LogitField, MrfParams, TokenGrid, VocabSpec};

/// Pattern family for one corpus slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusKind {
    Checkerboard,
    Stripes,
    Blobs {
        #[serde(default = "default_regions_min")]
        regions_min: usize,
        #[serde(default = "default_regions_max")]
        regions_max: usize,
    },
    GtMrf {
        coupling: f64,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
    },
}

fn default_regions_min() -> usize {
    4
}

fn default_regions_max() -> usize {
    7
}

fn default_burn_in() -> usize {
    150
}

/// Specification of one generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(flatten)]
    pub kind: CorpusKind,
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    /// Condition label attached to every grid of this slice.
    #[serde(default)]
    pub condition: u16,
    /// Number of distinct conditions the merged corpus will carry; conditions
    /// partition the palette when greater than 1.
    #[serde(default = "default_condition_count")]
    pub condition_count: usize,
    pub count: usize,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_condition_count() -> usize {
    1
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let geometry = GridGeometry::new(self.height, self.width)?;
        let vocab = VocabSpec::new(self.vocab_size)?;
        let _ = (geometry, vocab);
        if self.count == 0 {
            return Err(Error::EmptyCorpus);
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidArgument(format!(
                "noise_rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        if self.condition_count == 0 || (self.condition as usize) >= self.condition_count {
            return Err(Error::UnknownCondition {
                condition: self.condition,
                count: self.condition_count,
            });
        }
        if self.vocab_size < 2 * self.condition_count && self.condition_count > 1 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {} cannot give {} conditions two labels each",
                self.vocab_size, self.condition_count
            )));
        }
        if let CorpusKind::Blobs {
            regions_min,
            regions_max,
        } = self.kind
        {
            if regions_min == 0 || regions_max < regions_min {
                return Err(Error::InvalidArgument(
                    "blob region bounds must satisfy 1 <= min <= max".to_string(),
                ));
            }
        }
        Ok(())
    }

    fn geometry(&self) -> GridGeometry {
        GridGeometry::new(self.height, self.width).expect("validated")
    }

    fn vocab(&self) -> VocabSpec {
        VocabSpec::new(self.vocab_size).expect("validated")
    }

    /// Labels this slice's condition may use.
    fn palette(&self) -> std::ops::Range<u16> {
        if self.condition_count <= 1 {
            0..self.vocab_size as u16
        } else {
            let per = self.vocab_size / self.condition_count;
            let start = self.condition as usize * per;
            let end = if (self.condition as usize) + 1 == self.condition_count {
                self.vocab_size
            } else {
                start + per
            };
            start as u16..end as u16
        }
    }
}

fn pick_in(rng: &mut ChaCha8Rng, range: &std::ops::Range<u16>) -> u16 {
    rng.random_range(range.start..range.end)
}

/// Two distinct labels from the palette (falls back to repeating when the
/// palette has one label, which validation precludes for real vocabularies).
fn pick_two(rng: &mut ChaCha8Rng, range: &std::ops::Range<u16>) -> (u16, u16) {
    let a = pick_in(rng, range);
    if range.end - range.start <= 1 {
        return (a, a);
    }
    loop {
        let b = pick_in(rng, range);
        if b != a {
            return (a, b);
        }
    }
}

fn checkerboard(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let palette = spec.palette();
    let half = (palette.end - palette.start) / 2;
    let (a, b) = if half >= 1 && palette.end - palette.start >= 2 {
        let lo = palette.start..palette.start + half;
        let hi = palette.start + half..palette.end;
        (pick_in(rng, &lo), pick_in(rng, &hi))
    } else {
        (palette.start, palette.start)
    };
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for row in 0..spec.height {
        for col in 0..spec.width {
            labels.push(if (row + col) % 2 == 0 { a } else { b });
        }
    }
    labels
}

fn stripes(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let palette = spec.palette();
    let (a, b) = pick_two(rng, &palette);
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for row in 0..spec.height {
        let label = if row % 2 == 0 { a } else { b };
        labels.extend(std::iter::repeat_n(label, spec.width));
    }
    labels
}

fn blobs(spec: &CorpusSpec, regions_min: usize, regions_max: usize, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let geometry = spec.geometry();
    let n = geometry.n();
    let palette = spec.palette();
    let region_count = rng.random_range(regions_min..=regions_max).min(n);
    let mut labels: Vec<Option<u16>> = vec![None; n];
    // Multi-source random flood fill: seeds first, then grow a random
    // frontier cell at a time.
    let mut frontier: Vec<(usize, u16)> = Vec::new();
    for _ in 0..region_count {
        let pos = rng.random_range(0..n);
        let label = pick_in(rng, &palette);
        frontier.push((pos, label));
    }
    while let Some(pick) = if frontier.is_empty() {
        None
    } else {
        Some(rng.random_range(0..frontier.len()))
    } {
        let (pos, label) = frontier.swap_remove(pick);
        if labels[pos].is_some() {
            continue;
        }
        labels[pos] = Some(label);
        let row = pos / spec.width;
        let col = pos % spec.width;
        if row > 0 {
            frontier.push((pos - spec.width, label));
        }
        if row + 1 < spec.height {
            frontier.push((pos + spec.width, label));
        }
        if col > 0 {
            frontier.push((pos - 1, label));
        }
        if col + 1 < spec.width {
            frontier.push((pos + 1, label));
        }
    }
    // Unreached cells only occur if the frontier drained early; fill evenly.
    labels
        .into_iter()
        .map(|l| l.unwrap_or(palette.start))
        .collect()
}

/// Ground-truth field for `gt_mrf` corpora: 4-neighbor spatial couplings with
/// an attractive identity label compatibility restricted to the palette.
pub fn attractive_neighbor_params(
    geometry: GridGeometry,
    vocab: VocabSpec,
    coupling: f64,
    palette: std::ops::Range<u16>,
) -> MrfParams {
    let n = geometry.n();
    let v = vocab.size();
    let mut w_spatial = Array2::zeros((n, n));
    for row in 0..geometry.height() {
        for col in 0..geometry.width() {
            let i = row * geometry.width() + col;
            if col + 1 < geometry.width() {
                w_spatial[[i, i + 1]] = 1.0;
                w_spatial[[i + 1, i]] = 1.0;
            }
            if row + 1 < geometry.height() {
                let j = i + geometry.width();
                w_spatial[[i, j]] = 1.0;
                w_spatial[[j, i]] = 1.0;
            }
        }
    }
    let mut w_label = Array2::zeros((v, v));
    for k in palette {
        w_label[[k as usize, k as usize]] = coupling;
    }
    MrfParams::new(geometry, vocab, w_spatial, w_label).expect("valid by construction")
}

/// Sample one corpus slice from an explicit ground-truth field.
pub fn generate_gt_mrf(
    spec: &CorpusSpec,
    params: &MrfParams,
    burn_in: usize,
) -> Result<Vec<(TokenGrid, u16)>> {
    spec.validate()?;
    let geometry = spec.geometry();
    let vocab = spec.vocab();
    if params.geometry() != geometry || params.vocab() != vocab {
        return Err(Error::DimensionMismatch(
            "ground-truth field does not match the corpus spec".to_string(),
        ));
    }
    // Bias unaries to the palette so samples stay condition-consistent.
    let palette = spec.palette();
    let mut f = Array2::zeros((geometry.n(), vocab.size()));
    if spec.condition_count > 1 {
        for i in 0..geometry.n() {
            for k in 0..vocab.size() {
                if !(palette.start as usize..palette.end as usize).contains(&k) {
                    f[[i, k]] = -6.0;
                }
            }
        }
    }
    let logits = LogitField::new(geometry, vocab, f)?;
    let grids: Vec<Vec<TokenGrid>> = (0..spec.count)
        .into_par_iter()
        .map(|index| {
            gibbs_sample(
                params,
                &logits,
                burn_in,
                1,
                spec.seed.wrapping_add(index as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(grids
        .into_iter()
        .flatten()
        .map(|g| (g, spec.condition))
        .collect())
}

fn apply_noise(labels: &mut [u16], vocab: VocabSpec, noise_rate: f64, rng: &mut ChaCha8Rng) {
    if noise_rate <= 0.0 {
        return;
    }
    for l in labels.iter_mut() {
        if rng.random::<f64>() < noise_rate {
            *l = rng.random_range(0..vocab.size()) as u16;
        }
    }
}

/// Generate one corpus slice. Grids are produced in parallel with per-grid
/// derived seeds, so output is a pure function of the spec.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<(TokenGrid, u16)>> {
    spec.validate()?;
    let geometry = spec.geometry();
    let vocab = spec.vocab();
    if let CorpusKind::GtMrf { coupling, burn_in } = spec.kind {
        let params = attractive_neighbor_params(geometry, vocab, coupling, spec.palette());
        let mut out = generate_gt_mrf(spec, &params, burn_in)?;
        // Noise on top of the sampled grids, seeded independently per grid.
        out = out
            .into_par_iter()
            .enumerate()
            .map(|(index, (grid, condition))| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f ^ (index as u64) << 1);
                let mut labels = grid.labels().to_vec();
                apply_noise(&mut labels, vocab, spec.noise_rate, &mut rng);
                Ok((TokenGrid::new(geometry, labels, &vocab)?, condition))
            })
            .collect::<Result<_>>()?;
        return Ok(out);
    }
    (0..spec.count)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index as u64));
            let mut labels = match &spec.kind {
                CorpusKind::Checkerboard => checkerboard(spec, &mut rng),
                CorpusKind::Stripes => stripes(spec, &mut rng),
                CorpusKind::Blobs {
                    regions_min,
                    regions_max,
                } => blobs(spec, *regions_min, *regions_max, &mut rng),
                CorpusKind::GtMrf { .. } => unreachable!("handled above"),
            };
            apply_noise(&mut labels, vocab, spec.noise_rate, &mut rng);
            Ok((TokenGrid::new(geometry, labels, &vocab)?, spec.condition))
        })
        .collect()
}

/// Generate and merge several slices (one per condition, typically).
pub fn generate_merged(specs: &[CorpusSpec]) -> Result<Vec<(TokenGrid, u16)>> {
    let mut out = Vec::new();
    for spec in specs {
        out.extend(generate(spec)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

/// Sidecar schema for a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSidecar {
    pub format_version: u32,
    /// Echo of the generating specs (absent for externally built corpora).
    pub specs: Vec<CorpusSpec>,
    pub vocab_size: usize,
    pub conditions: Vec<u16>,
}

/// Write grids as a `[count, h, w]` uint16 tensor plus a JSON sidecar at
/// `<path>.json` holding the spec echo and condition labels.
pub fn write_corpus(
    path: impl AsRef<Path>,
    corpus: &[(TokenGrid, u16)],
    vocab: VocabSpec,
    specs: &[CorpusSpec],
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let grids: Vec<TokenGrid> = corpus.iter().map(|(g, _)| g.clone()).collect();
    let mut file = TensorFile::default();
    file.push(grids_to_tensor("labels", &grids)?);
    file.write(&path)?;
    let sidecar = CorpusSidecar {
        format_version: FORMAT_VERSION,
        specs: specs.to_vec(),
        vocab_size: vocab.size(),
        conditions: corpus.iter().map(|&(_, c)| c).collect(),
    };
    std::fs::write(
        crate::teacher::sidecar_path(path.as_ref()),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Read a corpus written by [`write_corpus`]; labels round-trip exactly.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<(Vec<(TokenGrid, u16)>, CorpusSidecar)> {
    let file = TensorFile::read(&path)?;
    let sidecar: CorpusSidecar = serde_json::from_str(&std::fs::read_to_string(
        crate::teacher::sidecar_path(path.as_ref()),
    )?)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: sidecar.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let vocab = VocabSpec::new(sidecar.vocab_size)?;
    let grids = tensor_to_grids(file.get("labels")?, &vocab)?;
    if grids.len() != sidecar.conditions.len() {
        return Err(Error::MalformedFile(format!(
            "{} grids but {} condition labels",
            grids.len(),
            sidecar.conditions.len()
        )));
    }
    Ok((
        grids
            .into_iter()
            .zip(sidecar.conditions.iter().copied())
            .collect(),
        sidecar,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec(kind: CorpusKind) -> CorpusSpec {
        CorpusSpec {
            kind,
            height: 8,
            width: 8,
            vocab_size: 2,
            condition: 0,
            condition_count: 1,
            count: 4,
            noise_rate: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn checkerboard_is_parity_pattern() {
        let corpus = generate(&base_spec(CorpusKind::Checkerboard)).unwrap();
        for (grid, _) in &corpus {
            for row in 0..8 {
                for col in 0..8 {
                    assert_eq!(grid.label(row * 8 + col), ((row + col) % 2) as u16);
                }
            }
        }
    }

    #[test]
    fn stripes_alternate_rows() {
        let corpus = generate(&base_spec(CorpusKind::Stripes)).unwrap();
        for (grid, _) in &corpus {
            for row in 0..8 {
                let first = grid.label(row * 8);
                for col in 1..8 {
                    assert_eq!(grid.label(row * 8 + col), first);
                }
            }
            assert_ne!(grid.label(0), grid.label(8));
        }
    }

    #[test]
    fn blobs_cover_grid_and_are_contiguousish() {
        let mut spec = base_spec(CorpusKind::Blobs {
            regions_min: 3,
            regions_max: 5,
        });
        spec.vocab_size = 16;
        let corpus = generate(&spec).unwrap();
        for (grid, _) in &corpus {
            // Neighbor agreement well above the uniform baseline.
            let mut same = 0usize;
            let mut total = 0usize;
            for row in 0..8 {
                for col in 0..7 {
                    same += (grid.label(row * 8 + col) == grid.label(row * 8 + col + 1)) as usize;
                    total += 1;
                }
            }
            assert!(same as f64 / total as f64 > 0.5);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = base_spec(CorpusKind::Blobs {
            regions_min: 3,
            regions_max: 5,
        });
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn noise_changes_tokens_at_roughly_the_requested_rate() {
        let mut spec = base_spec(CorpusKind::Checkerboard);
        spec.count = 50;
        spec.vocab_size = 8;
        spec.noise_rate = 0.5;
        let clean = {
            let mut s = spec.clone();
            s.noise_rate = 0.0;
            generate(&s).unwrap()
        };
        let noisy = generate(&spec).unwrap();
        let mut changed = 0usize;
        let mut total = 0usize;
        for ((a, _), (b, _)) in clean.iter().zip(noisy.iter()) {
            for (x, y) in a.labels().iter().zip(b.labels()) {
                changed += (x != y) as usize;
                total += 1;
            }
        }
        let rate = changed as f64 / total as f64;
        // Uniform relabeling can restore the original token: expected visible
        // change rate is noise * (V-1)/V = 0.4375.
        assert!((rate - 0.4375).abs() < 0.05, "observed change rate {rate}");
    }

    #[test]
    fn gt_mrf_grids_cluster_same_labels() {
        let spec = CorpusSpec {
            kind: CorpusKind::GtMrf {
                coupling: 1.2,
                burn_in: 80,
            },
            height: 6,
            width: 6,
            vocab_size: 4,
            condition: 0,
            condition_count: 1,
            count: 12,
            noise_rate: 0.0,
            seed: 9,
        };
        let corpus = generate(&spec).unwrap();
        let mut same = 0usize;
        let mut total = 0usize;
        for (grid, _) in &corpus {
            for row in 0..6 {
                for col in 0..5 {
                    same += (grid.label(row * 6 + col) == grid.label(row * 6 + col + 1)) as usize;
                    total += 1;
                }
            }
        }
        let rate = same as f64 / total as f64;
        assert!(
            rate > 1.0 / 4.0 + 0.1,
            "same-label adjacency {rate} not above uniform baseline 0.25"
        );
    }

    #[test]
    fn conditions_partition_palette() {
        let mut spec = base_spec(CorpusKind::Blobs {
            regions_min: 3,
            regions_max: 5,
        });
        spec.vocab_size = 16;
        spec.condition_count = 4;
        spec.condition = 2;
        let corpus = generate(&spec).unwrap();
        for (grid, condition) in &corpus {
            assert_eq!(*condition, 2);
            for &l in grid.labels() {
                assert!((8..12).contains(&l), "label {l} outside palette 8..12");
            }
        }
    }

    #[test]
    fn corpus_file_roundtrip() {
        let spec = base_spec(CorpusKind::Checkerboard);
        let corpus = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.mgtf");
        let vocab = VocabSpec::new(spec.vocab_size).unwrap();
        write_corpus(&path, &corpus, vocab, std::slice::from_ref(&spec)).unwrap();
        let (back, sidecar) = read_corpus(&path).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(sidecar.specs, vec![spec]);
    }

    #[test]
    fn empty_corpus_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.mgtf");
        let vocab = VocabSpec::new(2).unwrap();
        assert!(matches!(
            write_corpus(&path, &[], vocab, &[]),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn corrupted_magic_is_malformed() {
        let spec = base_spec(CorpusKind::Checkerboard);
        let corpus = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.mgtf");
        let vocab = VocabSpec::new(spec.vocab_size).unwrap();
        write_corpus(&path, &corpus, vocab, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_corpus(&path), Err(Error::MalformedFile(_))));
    }
}
