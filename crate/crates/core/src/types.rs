//! Shared value types: grids, logits, marginals, parameters, masks, schedules.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards; operations produce new values. The marginal row-sum tolerance
//! is 1e-6.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for marginal rows summing to 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// The discrete token vocabulary: labels are indices in `[0, size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    size: usize,
}

impl VocabSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        Ok(VocabSpec { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, label: u16) -> bool {
        (label as usize) < self.size
    }
}

/// Grid shape with row-major location indexing `i in [0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    height: usize,
    width: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(GridGeometry { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of locations, `height * width`.
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    /// Row-major index to (row, col).
    pub fn index_to_rowcol(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.n() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.n(),
            });
        }
        Ok((index / self.width, index % self.width))
    }

    /// (row, col) to row-major index. Inverse of [`index_to_rowcol`](Self::index_to_rowcol).
    pub fn rowcol_to_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.height || col >= self.width {
            return Err(Error::IndexOutOfRange {
                index: row * self.width + col,
                len: self.n(),
            });
        }
        Ok(row * self.width + col)
    }
}

/// A complete token assignment over a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    geometry: GridGeometry,
    labels: Vec<u16>,
}

impl TokenGrid {
    pub fn new(geometry: GridGeometry, labels: Vec<u16>, vocab: &VocabSpec) -> Result<Self> {
        if labels.len() != geometry.n() {
            return Err(Error::DimensionMismatch(format!(
                "token grid holds {} labels for {} locations",
                labels.len(),
                geometry.n()
            )));
        }
        for (position, &label) in labels.iter().enumerate() {
            if !vocab.contains(label) {
                return Err(Error::LabelOutOfRange {
                    position,
                    label,
                    vocab_size: vocab.size(),
                });
            }
        }
        Ok(TokenGrid { geometry, labels })
    }

    /// All-zero-label grid.
    pub fn zeros(geometry: GridGeometry) -> Self {
        TokenGrid {
            labels: vec![0; geometry.n()],
            geometry,
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> u16 {
        self.labels[index]
    }

    /// Re-check label validity under a vocabulary.
    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        for (position, &label) in self.labels.iter().enumerate() {
            if !vocab.contains(label) {
                return Err(Error::LabelOutOfRange {
                    position,
                    label,
                    vocab_size: vocab.size(),
                });
            }
        }
        Ok(())
    }
}

/// A token grid with a hidden/unknown mask (`true` = hidden).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTokenGrid {
    grid: TokenGrid,
    mask: Vec<bool>,
}

impl MaskedTokenGrid {
    pub fn new(grid: TokenGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.geometry().n() {
            return Err(Error::DimensionMismatch(format!(
                "mask holds {} entries for {} locations",
                mask.len(),
                grid.geometry().n()
            )));
        }
        Ok(MaskedTokenGrid { grid, mask })
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.mask[index]
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

// Shape check shared by logit and marginal fields.
fn check_field_shape(
    what: &str,
    geometry: GridGeometry,
    vocab: VocabSpec,
    values: &Array2<f64>,
) -> Result<()> {
    let (rows, cols) = values.dim();
    if rows != geometry.n() || cols != vocab.size() {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {rows}x{cols}, expected {}x{}",
            geometry.n(),
            vocab.size()
        )));
    }
    Ok(())
}

/// Per-location, per-label real scores `f_i(k)`: the source of unaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    geometry: GridGeometry,
    vocab: VocabSpec,
    values: Array2<f64>,
}

impl LogitField {
    pub fn new(geometry: GridGeometry, vocab: VocabSpec, values: Array2<f64>) -> Result<Self> {
        check_field_shape("logit field", geometry, vocab, &values)?;
        if let Some(((i, k), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit ({i}, {k}) = {v}")));
        }
        Ok(LogitField {
            geometry,
            vocab,
            values,
        })
    }

    pub fn zeros(geometry: GridGeometry, vocab: VocabSpec) -> Self {
        LogitField {
            geometry,
            vocab,
            values: Array2::zeros((geometry.n(), vocab.size())),
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Copy with the given rows replaced by `strength`-pinned one-hot logits:
    /// the pinned label gets `strength`, every other label 0.
    pub fn with_pinned_rows<I>(&self, pins: I, strength: f64) -> Result<LogitField>
    where
        I: IntoIterator<Item = (usize, u16)>,
    {
        let mut values = self.values.clone();
        for (index, label) in pins {
            if index >= self.geometry.n() {
                return Err(Error::IndexOutOfRange {
                    index,
                    len: self.geometry.n(),
                });
            }
            if !self.vocab.contains(label) {
                return Err(Error::LabelOutOfRange {
                    position: index,
                    label,
                    vocab_size: self.vocab.size(),
                });
            }
            values.row_mut(index).fill(0.0);
            values[[index, label as usize]] = strength;
        }
        LogitField::new(self.geometry, self.vocab, values)
    }
}

/// Per-location categorical distributions `Q_i(.)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    geometry: GridGeometry,
    vocab: VocabSpec,
    values: Array2<f64>,
}

impl MarginalField {
    pub fn new(geometry: GridGeometry, vocab: VocabSpec, values: Array2<f64>) -> Result<Self> {
        check_field_shape("marginal field", geometry, vocab, &values)?;
        for (row, r) in values.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for (col, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("marginal ({row}, {col}) = {v}")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::EntryOutOfRange {
                        row,
                        col,
                        value: v,
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowNotNormalized { row, sum });
            }
        }
        Ok(MarginalField {
            geometry,
            vocab,
            values,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// The two learnable weight matrices: spatial similarity `W^s` (n x n) and
/// label compatibility `W^c` (V x V). No symmetry is enforced on either.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfParams {
    geometry: GridGeometry,
    vocab: VocabSpec,
    w_spatial: Array2<f64>,
    w_label: Array2<f64>,
}

impl MrfParams {
    pub fn new(
        geometry: GridGeometry,
        vocab: VocabSpec,
        w_spatial: Array2<f64>,
        w_label: Array2<f64>,
    ) -> Result<Self> {
        let n = geometry.n();
        let v = vocab.size();
        if w_spatial.dim() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "spatial weights are {:?}, expected ({n}, {n})",
                w_spatial.dim()
            )));
        }
        if w_label.dim() != (v, v) {
            return Err(Error::DimensionMismatch(format!(
                "label weights are {:?}, expected ({v}, {v})",
                w_label.dim()
            )));
        }
        if let Some((idx, v)) = w_spatial.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "spatial weight ({}, {}) = {v}",
                idx.0, idx.1
            )));
        }
        if let Some((idx, v)) = w_label.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "label weight ({}, {}) = {v}",
                idx.0, idx.1
            )));
        }
        Ok(MrfParams {
            geometry,
            vocab,
            w_spatial,
            w_label,
        })
    }

    /// All-zero weights. Mean-field inference with these is the identity
    /// refinement: it returns `softmax(f)` for any iteration count.
    pub fn zeros(geometry: GridGeometry, vocab: VocabSpec) -> Self {
        MrfParams {
            geometry,
            vocab,
            w_spatial: Array2::zeros((geometry.n(), geometry.n())),
            w_label: Array2::zeros((vocab.size(), vocab.size())),
        }
    }

    /// Training initialization: `W^c = 0.1 I`, `W^s ~ N(0, 0.01^2)` with zero
    /// diagonal. Joint zero init is a saddle (a zero label matrix blocks all
    /// gradient flow into the spatial matrix), so the label matrix starts as a
    /// small identity.
    pub fn init_training(geometry: GridGeometry, vocab: VocabSpec, seed: u64) -> Self {
        let n = geometry.n();
        let v = vocab.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid stddev");
        let mut w_spatial = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w_spatial[[i, j]] = normal.sample(&mut rng);
                }
            }
        }
        let mut w_label = Array2::zeros((v, v));
        for k in 0..v {
            w_label[[k, k]] = 0.1;
        }
        MrfParams {
            geometry,
            vocab,
            w_spatial,
            w_label,
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn w_spatial(&self) -> &Array2<f64> {
        &self.w_spatial
    }

    pub fn w_label(&self) -> &Array2<f64> {
        &self.w_label
    }

    /// Check that a logit field shares this parameter set's shape.
    pub fn check_compatible(&self, logits: &LogitField) -> Result<()> {
        if logits.geometry() != self.geometry || logits.vocab() != self.vocab {
            return Err(Error::DimensionMismatch(
                "logit field does not match parameter geometry/vocabulary".to_string(),
            ));
        }
        Ok(())
    }
}

/// Progressive-decoding schedule: per-step token-commit counts summing to the
/// grid size, plus the cut step after which inference replaces decoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    commits_per_step: Vec<usize>,
    cut_step: usize,
}

impl DecodeSchedule {
    pub fn new(commits_per_step: Vec<usize>, cut_step: usize, n: usize) -> Result<Self> {
        if commits_per_step.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".to_string(),
            ));
        }
        let total: usize = commits_per_step.iter().sum();
        if total != n {
            return Err(Error::InvalidArgument(format!(
                "schedule commits {total} tokens for a grid of {n}"
            )));
        }
        if cut_step == 0 || cut_step > commits_per_step.len() {
            return Err(Error::InvalidArgument(format!(
                "cut step {cut_step} outside [1, {}]",
                commits_per_step.len()
            )));
        }
        Ok(DecodeSchedule {
            commits_per_step,
            cut_step,
        })
    }

    /// Cosine-spaced commit counts (fewest early, most late): the masked count
    /// after step t of T is `round(n * cos(pi/2 * t/T))`.
    pub fn cosine(n: usize, total_steps: usize, cut_step: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".to_string(),
            ));
        }
        let mut masked_after = Vec::with_capacity(total_steps + 1);
        for t in 0..=total_steps {
            let frac = (std::f64::consts::FRAC_PI_2 * t as f64 / total_steps as f64).cos();
            masked_after.push((n as f64 * frac).round() as usize);
        }
        masked_after[0] = n;
        masked_after[total_steps] = 0;
        // Rounding can break monotonicity on tiny grids; clamp.
        for t in 1..=total_steps {
            if masked_after[t] > masked_after[t - 1] {
                masked_after[t] = masked_after[t - 1];
            }
        }
        let commits = (1..=total_steps)
            .map(|t| masked_after[t - 1] - masked_after[t])
            .collect();
        DecodeSchedule::new(commits, cut_step, n)
    }

    /// Single-step schedule committing everything at once.
    pub fn one_shot(n: usize) -> Self {
        DecodeSchedule {
            commits_per_step: vec![n],
            cut_step: 1,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.commits_per_step.len()
    }

    pub fn cut_step(&self) -> usize {
        self.cut_step
    }

    /// Copy with a different cut step.
    pub fn with_cut_step(&self, cut_step: usize) -> Result<Self> {
        DecodeSchedule::new(self.commits_per_step.clone(), cut_step, self.n())
    }

    pub fn commits_per_step(&self) -> &[usize] {
        &self.commits_per_step
    }

    /// Commit count of step `step` (1-based).
    pub fn commits_at(&self, step: usize) -> usize {
        self.commits_per_step[step - 1]
    }

    /// Grid size the schedule covers.
    pub fn n(&self) -> usize {
        self.commits_per_step.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn geometry_row_major_indexing() {
        let g = GridGeometry::new(4, 4).unwrap();
        assert_eq!(g.index_to_rowcol(0).unwrap(), (0, 0));
        assert_eq!(g.index_to_rowcol(5).unwrap(), (1, 1));
        let g16 = GridGeometry::new(16, 16).unwrap();
        assert_eq!(g16.index_to_rowcol(255).unwrap(), (15, 15));
        assert!(g.index_to_rowcol(16).is_err());
    }

    #[test]
    fn geometry_roundtrip() {
        let g = GridGeometry::new(3, 5).unwrap();
        for i in 0..g.n() {
            let (r, c) = g.index_to_rowcol(i).unwrap();
            assert_eq!(g.rowcol_to_index(r, c).unwrap(), i);
        }
    }

    #[test]
    fn token_grid_validates_labels() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v4 = VocabSpec::new(4).unwrap();
        assert!(TokenGrid::new(g, vec![0, 1, 2, 3], &v4).is_ok());
        let err = TokenGrid::new(g, vec![0, 1, 2, 4], &v4).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { .. }));
    }

    #[test]
    fn logit_field_rejects_nan() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let err = LogitField::new(g, v, array![[0.0, f64::NAN], [0.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("non-finite entry"));
    }

    #[test]
    fn marginal_field_rejects_unnormalized_row() {
        let g = GridGeometry::new(1, 1).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let err = MarginalField::new(g, v, array![[0.25, 0.25]]).unwrap_err();
        assert!(err.to_string().contains("row not normalized"));
        assert!(MarginalField::new(g, v, array![[0.5, 0.5]]).is_ok());
    }

    #[test]
    fn vocab_requires_two_labels() {
        assert!(VocabSpec::new(1).is_err());
        assert!(VocabSpec::new(2).is_ok());
    }

    #[test]
    fn params_shape_checked() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let bad = MrfParams::new(g, v, Array2::zeros((3, 3)), Array2::zeros((2, 2)));
        assert!(bad.is_err());
        let ok = MrfParams::new(g, v, Array2::zeros((2, 2)), Array2::zeros((2, 2)));
        assert!(ok.is_ok());
    }

    #[test]
    fn init_training_opens_gradient_path() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let p = MrfParams::init_training(g, v, 7);
        for k in 0..3 {
            assert_eq!(p.w_label()[[k, k]], 0.1);
        }
        for i in 0..4 {
            assert_eq!(p.w_spatial()[[i, i]], 0.0);
        }
        // Seed determinism.
        let p2 = MrfParams::init_training(g, v, 7);
        assert_eq!(p.w_spatial(), p2.w_spatial());
    }

    #[test]
    fn cosine_schedule_conserves_and_grows() {
        let s = DecodeSchedule::cosine(256, 8, 5).unwrap();
        assert_eq!(s.total_steps(), 8);
        assert_eq!(s.commits_per_step().iter().sum::<usize>(), 256);
        for t in 1..8 {
            assert!(s.commits_at(t) <= s.commits_at(t + 1));
        }
        let s24 = DecodeSchedule::cosine(256, 24, 20).unwrap();
        assert_eq!(s24.total_steps(), 24);
        assert_eq!(s24.n(), 256);
    }

    #[test]
    fn schedule_rejects_bad_totals() {
        assert!(DecodeSchedule::new(vec![2, 2], 1, 5).is_err());
        assert!(DecodeSchedule::new(vec![2, 3], 3, 5).is_err());
        assert!(DecodeSchedule::new(vec![2, 3], 0, 5).is_err());
    }

    #[test]
    fn pinned_rows_override() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let f = LogitField::new(g, v, array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let pinned = f.with_pinned_rows([(1, 2u16)], 10.0).unwrap();
        assert_eq!(pinned.values().row(0).to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(pinned.values().row(1).to_vec(), vec![0.0, 0.0, 10.0]);
    }
}
