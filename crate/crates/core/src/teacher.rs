//! A desk-scale learned token predictor wrapped in progressive parallel
//! decoding.
//!
//! The predictor is a windowed context aggregator: every location embeds the
//! tokens in its surrounding window (with dedicated embeddings for hidden and
//! out-of-bounds cells), appends a conditioning-label embedding, and runs a
//! two-layer MLP shared across locations. Prediction is a pure function of
//! (masked grid, condition, parameters).
//!
//! Decoding iterates: predict logits everywhere, sample a candidate per
//! hidden position, commit the highest-confidence candidates per the
//! schedule, repeat until the grid is full.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_file::{NamedTensor, TensorData, TensorFile};
use crate::train::{adam_update_flat, MetricsSink, TrainStage};
use crate::types::{
    DecodeSchedule, GridGeometry, LogitField, MaskedTokenGrid, TokenGrid, VocabSpec,
};

/// Hyperparameters for the predictor and its training loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TeacherConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Cells within Chebyshev distance `window_radius` feed each prediction.
    pub window_radius: usize,
    pub condition_count: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Cross-entropy targets per example are capped at this count.
    pub max_targets_per_example: usize,
    /// Fraction of the corpus reserved for the held-out accuracy check.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            embed_dim: 16,
            hidden_dim: 3072,
            window_radius: 3,
            condition_count: 1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 6,
            steps: 500,
            max_targets_per_example: 96,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Token-embedding rows past the vocabulary: hidden cell, out-of-bounds cell.
const EXTRA_EMBEDDINGS: usize = 2;

/// The trained predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    vocab: VocabSpec,
    geometry: GridGeometry,
    condition_count: usize,
    window_radius: usize,
    embed_dim: usize,
    hidden_dim: usize,
    token_embed: Array2<f64>,
    cond_embed: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl TeacherModel {
    fn window_cells(&self) -> usize {
        let side = 2 * self.window_radius + 1;
        side * side
    }

    fn input_dim(&self) -> usize {
        (self.window_cells() + 1) * self.embed_dim
    }

    pub fn init(geometry: GridGeometry, vocab: VocabSpec, config: &TeacherConfig) -> Result<Self> {
        if config.condition_count == 0 {
            return Err(Error::InvalidArgument(
                "condition_count must be >= 1".into(),
            ));
        }
        if config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "embed_dim and hidden_dim must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cells = {
            let side = 2 * config.window_radius + 1;
            side * side
        };
        let d_in = (cells + 1) * config.embed_dim;
        let embed_init = Normal::new(0.0, 0.5).expect("valid stddev");
        let w1_init = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("valid stddev");
        let w2_init =
            Normal::new(0.0, (1.0 / config.hidden_dim as f64).sqrt()).expect("valid stddev");
        Ok(TeacherModel {
            vocab,
            geometry,
            condition_count: config.condition_count,
            window_radius: config.window_radius,
            embed_dim: config.embed_dim,
            hidden_dim: config.hidden_dim,
            token_embed: Array2::from_shape_fn(
                (vocab.size() + EXTRA_EMBEDDINGS, config.embed_dim),
                |_| embed_init.sample(&mut rng),
            ),
            cond_embed: Array2::from_shape_fn((config.condition_count, config.embed_dim), |_| {
                embed_init.sample(&mut rng)
            }),
            w1: Array2::from_shape_fn((d_in, config.hidden_dim), |_| w1_init.sample(&mut rng)),
            b1: Array1::zeros(config.hidden_dim),
            w2: Array2::from_shape_fn((config.hidden_dim, vocab.size()), |_| {
                w2_init.sample(&mut rng)
            }),
            b2: Array1::zeros(vocab.size()),
        })
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn condition_count(&self) -> usize {
        self.condition_count
    }

    pub fn parameter_count(&self) -> usize {
        self.token_embed.len()
            + self.cond_embed.len()
            + self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
    }

    /// Serialize into the tensor container (f32 weights plus a u16 config
    /// tensor holding the structural hyperparameters).
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        file.push(
            NamedTensor::new(
                "config",
                vec![7],
                TensorData::U16(vec![
                    self.geometry.height() as u16,
                    self.geometry.width() as u16,
                    self.vocab.size() as u16,
                    self.condition_count as u16,
                    self.window_radius as u16,
                    self.embed_dim as u16,
                    self.hidden_dim as u16,
                ]),
            )
            .expect("config tensor"),
        );
        file.push(NamedTensor::from_matrix("token_embed", &self.token_embed));
        file.push(NamedTensor::from_matrix("cond_embed", &self.cond_embed));
        file.push(NamedTensor::from_matrix("w1", &self.w1));
        file.push(
            NamedTensor::new(
                "b1",
                vec![self.b1.len() as u32],
                TensorData::F32(self.b1.iter().map(|&v| v as f32).collect()),
            )
            .expect("b1 tensor"),
        );
        file.push(NamedTensor::from_matrix("w2", &self.w2));
        file.push(
            NamedTensor::new(
                "b2",
                vec![self.b2.len() as u32],
                TensorData::F32(self.b2.iter().map(|&v| v as f32).collect()),
            )
            .expect("b2 tensor"),
        );
        file
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let config = file.get("config")?.as_u16()?;
        if config.len() != 7 {
            return Err(Error::MalformedFile(
                "teacher config tensor must hold 7 values".to_string(),
            ));
        }
        let geometry = GridGeometry::new(config[0] as usize, config[1] as usize)?;
        let vocab = VocabSpec::new(config[2] as usize)?;
        let [condition_count, window_radius, embed_dim, hidden_dim] =
            [config[3], config[4], config[5], config[6]].map(|v| v as usize);
        let vec1 = |name: &str| -> Result<Array1<f64>> {
            let t = file.get(name)?;
            Ok(Array1::from_vec(
                t.as_f32()?.iter().map(|&v| v as f64).collect(),
            ))
        };
        let model = TeacherModel {
            vocab,
            geometry,
            condition_count,
            window_radius,
            embed_dim,
            hidden_dim,
            token_embed: file.get("token_embed")?.to_matrix()?,
            cond_embed: file.get("cond_embed")?.to_matrix()?,
            w1: file.get("w1")?.to_matrix()?,
            b1: vec1("b1")?,
            w2: file.get("w2")?.to_matrix()?,
            b2: vec1("b2")?,
        };
        let d_in = model.input_dim();
        if model.token_embed.dim() != (vocab.size() + EXTRA_EMBEDDINGS, embed_dim)
            || model.cond_embed.dim() != (condition_count, embed_dim)
            || model.w1.dim() != (d_in, hidden_dim)
            || model.b1.len() != hidden_dim
            || model.w2.dim() != (hidden_dim, vocab.size())
            || model.b2.len() != vocab.size()
        {
            return Err(Error::MalformedFile(
                "teacher tensor shapes do not match config".to_string(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

/// Embedding row index for one window cell.
fn cell_token_index(
    masked: &MaskedTokenGrid,
    geometry: GridGeometry,
    vocab: VocabSpec,
    row: i64,
    col: i64,
) -> usize {
    if row < 0 || col < 0 || row >= geometry.height() as i64 || col >= geometry.width() as i64 {
        vocab.size() + 1
    } else {
        let i = row as usize * geometry.width() + col as usize;
        if masked.is_masked(i) {
            vocab.size()
        } else {
            masked.grid().label(i) as usize
        }
    }
}

/// Gathered window + condition embeddings for the given positions.
fn gather_features(
    model: &TeacherModel,
    masked: &MaskedTokenGrid,
    condition: u16,
    positions: &[usize],
) -> Array2<f64> {
    let d_e = model.embed_dim;
    let r = model.window_radius as i64;
    let geometry = model.geometry;
    let mut x = Array2::zeros((positions.len(), model.input_dim()));
    for (p, &pos) in positions.iter().enumerate() {
        let row = (pos / geometry.width()) as i64;
        let col = (pos % geometry.width()) as i64;
        let mut offset = 0;
        for dr in -r..=r {
            for dc in -r..=r {
                let idx = cell_token_index(masked, geometry, model.vocab, row + dr, col + dc);
                x.row_mut(p)
                    .slice_mut(ndarray::s![offset..offset + d_e])
                    .assign(&model.token_embed.row(idx));
                offset += d_e;
            }
        }
        x.row_mut(p)
            .slice_mut(ndarray::s![offset..offset + d_e])
            .assign(&model.cond_embed.row(condition as usize));
    }
    x
}

struct ForwardPass {
    x: Array2<f64>,
    hidden: Array2<f64>,
    logits: Array2<f64>,
}

fn forward_positions(
    model: &TeacherModel,
    masked: &MaskedTokenGrid,
    condition: u16,
    positions: &[usize],
) -> ForwardPass {
    let x = gather_features(model, masked, condition, positions);
    let mut hidden = x.dot(&model.w1);
    hidden += &model.b1;
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut logits = hidden.dot(&model.w2);
    logits += &model.b2;
    ForwardPass { x, hidden, logits }
}

fn check_inputs(model: &TeacherModel, masked: &MaskedTokenGrid, condition: u16) -> Result<()> {
    if masked.grid().geometry() != model.geometry {
        return Err(Error::DimensionMismatch(
            "masked grid does not match the model geometry".to_string(),
        ));
    }
    masked.grid().validate(&model.vocab)?;
    if condition as usize >= model.condition_count {
        return Err(Error::UnknownCondition {
            condition,
            count: model.condition_count,
        });
    }
    Ok(())
}

/// Logits for every position (committed positions included). Deterministic.
pub fn predict_logits(
    model: &TeacherModel,
    masked: &MaskedTokenGrid,
    condition: u16,
) -> Result<LogitField> {
    check_inputs(model, masked, condition)?;
    let positions: Vec<usize> = (0..model.geometry.n()).collect();
    let pass = forward_positions(model, masked, condition, &positions);
    LogitField::new(model.geometry, model.vocab, pass.logits)
}

#[derive(Debug, Clone)]
struct TeacherGrads {
    token_embed: Array2<f64>,
    cond_embed: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl TeacherGrads {
    fn zeros(model: &TeacherModel) -> Self {
        TeacherGrads {
            token_embed: Array2::zeros(model.token_embed.dim()),
            cond_embed: Array2::zeros(model.cond_embed.dim()),
            w1: Array2::zeros(model.w1.dim()),
            b1: Array1::zeros(model.b1.len()),
            w2: Array2::zeros(model.w2.dim()),
            b2: Array1::zeros(model.b2.len()),
        }
    }

    fn add_assign(&mut self, other: &TeacherGrads) {
        self.token_embed += &other.token_embed;
        self.cond_embed += &other.cond_embed;
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    fn scale(&mut self, factor: f64) {
        self.token_embed *= factor;
        self.cond_embed *= factor;
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }
}

/// Mean cross-entropy at the target positions, with gradients for every
/// parameter tensor.
fn masked_ce_loss_grads(
    model: &TeacherModel,
    masked: &MaskedTokenGrid,
    condition: u16,
    targets: &[(usize, u16)],
) -> (f64, TeacherGrads) {
    let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let pass = forward_positions(model, masked, condition, &positions);
    let count = targets.len() as f64;

    let mut loss = 0.0;
    let mut dz = Array2::zeros(pass.logits.dim());
    for (row, &(_, label)) in targets.iter().enumerate() {
        let logits_row = pass.logits.row(row);
        let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits_row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p_target = exps[label as usize] / sum;
        loss -= p_target.max(1e-300).ln() / count;
        for (k, &e) in exps.iter().enumerate() {
            let softmax = e / sum;
            dz[[row, k]] = (softmax - if k == label as usize { 1.0 } else { 0.0 }) / count;
        }
    }

    let mut grads = TeacherGrads::zeros(model);
    grads.b2 = dz.sum_axis(ndarray::Axis(0));
    grads.w2 = pass.hidden.t().dot(&dz);
    let mut dh = dz.dot(&model.w2.t());
    ndarray::Zip::from(&mut dh)
        .and(&pass.hidden)
        .for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
    grads.b1 = dh.sum_axis(ndarray::Axis(0));
    grads.w1 = pass.x.t().dot(&dh);
    let dx = dh.dot(&model.w1.t());

    // Scatter feature gradients back into the embedding tables.
    let d_e = model.embed_dim;
    let r = model.window_radius as i64;
    let geometry = model.geometry;
    for (row, &pos) in positions.iter().enumerate() {
        let prow = (pos / geometry.width()) as i64;
        let pcol = (pos % geometry.width()) as i64;
        let src = dx.row(row);
        let mut offset = 0;
        for dr in -r..=r {
            for dc in -r..=r {
                let idx = cell_token_index(masked, geometry, model.vocab, prow + dr, pcol + dc);
                let mut target = grads.token_embed.row_mut(idx);
                for d in 0..d_e {
                    target[d] += src[offset + d];
                }
                offset += d_e;
            }
        }
        let mut target = grads.cond_embed.row_mut(condition as usize);
        for d in 0..d_e {
            target[d] += src[offset + d];
        }
    }
    (loss, grads)
}

struct TeacherAdam {
    m: TeacherGrads,
    v: TeacherGrads,
    step: u64,
}

impl TeacherAdam {
    fn new(model: &TeacherModel) -> Self {
        TeacherAdam {
            m: TeacherGrads::zeros(model),
            v: TeacherGrads::zeros(model),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut TeacherModel, grads: &TeacherGrads, config: &TeacherConfig) {
        self.step += 1;
        let pairs: [(&mut [f64], &[f64], &mut [f64], &mut [f64]); 6] = [
            (
                model.token_embed.as_slice_mut().unwrap(),
                grads.token_embed.as_slice().unwrap(),
                self.m.token_embed.as_slice_mut().unwrap(),
                self.v.token_embed.as_slice_mut().unwrap(),
            ),
            (
                model.cond_embed.as_slice_mut().unwrap(),
                grads.cond_embed.as_slice().unwrap(),
                self.m.cond_embed.as_slice_mut().unwrap(),
                self.v.cond_embed.as_slice_mut().unwrap(),
            ),
            (
                model.w1.as_slice_mut().unwrap(),
                grads.w1.as_slice().unwrap(),
                self.m.w1.as_slice_mut().unwrap(),
                self.v.w1.as_slice_mut().unwrap(),
            ),
            (
                model.b1.as_slice_mut().unwrap(),
                grads.b1.as_slice().unwrap(),
                self.m.b1.as_slice_mut().unwrap(),
                self.v.b1.as_slice_mut().unwrap(),
            ),
            (
                model.w2.as_slice_mut().unwrap(),
                grads.w2.as_slice().unwrap(),
                self.m.w2.as_slice_mut().unwrap(),
                self.v.w2.as_slice_mut().unwrap(),
            ),
            (
                model.b2.as_slice_mut().unwrap(),
                grads.b2.as_slice().unwrap(),
                self.m.b2.as_slice_mut().unwrap(),
                self.v.b2.as_slice_mut().unwrap(),
            ),
        ];
        for (param, grad, m, v) in pairs {
            adam_update_flat(
                param,
                grad,
                m,
                v,
                self.step,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_epsilon,
            );
        }
    }
}

/// Accuracy summary from the end of teacher training.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TeacherTrainReport {
    /// Masked-prediction accuracy on the held-out split.
    pub holdout_accuracy: f64,
    /// Accuracy of always predicting the corpus-wide most frequent label.
    pub baseline_accuracy: f64,
    pub final_loss: f64,
}

/// Mask ratio for one training example: cosine-weighted toward fully masked,
/// matching the ratios the decoder visits.
fn sample_mask_ratio(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    (std::f64::consts::FRAC_PI_2 * u).cos().clamp(0.02, 1.0)
}

fn mask_exactly(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let count = count.clamp(1, n);
    let mut indices: Vec<usize> = (0..n).collect();
    for k in 0..count {
        let j = rng.random_range(k..n);
        indices.swap(k, j);
    }
    let mut mask = vec![false; n];
    for &i in &indices[..count] {
        mask[i] = true;
    }
    mask
}

/// Masked-prediction accuracy of the model over the given examples, plus the
/// matching most-frequent-label baseline. Half the positions are hidden.
pub fn masked_accuracy(
    model: &TeacherModel,
    examples: &[(TokenGrid, u16)],
    baseline_label: u16,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.geometry.n();
    let mut correct = 0usize;
    let mut baseline_correct = 0usize;
    let mut total = 0usize;
    for (grid, condition) in examples {
        let mask = mask_exactly(n, n / 2, &mut rng);
        let masked = MaskedTokenGrid::new(grid.clone(), mask)?;
        let logits = predict_logits(model, &masked, *condition)?;
        for i in masked.masked_indices() {
            if argmax_row(logits.values().row(i)) as u16 == grid.label(i) {
                correct += 1;
            }
            if baseline_label == grid.label(i) {
                baseline_correct += 1;
            }
            total += 1;
        }
    }
    Ok((
        correct as f64 / total as f64,
        baseline_correct as f64 / total as f64,
    ))
}

/// Most frequent label across the corpus; ties break to the lowest label.
pub fn most_frequent_label(corpus: &[(TokenGrid, u16)], vocab: VocabSpec) -> u16 {
    let mut counts = vec![0usize; vocab.size()];
    for (grid, _) in corpus {
        for &l in grid.labels() {
            counts[l as usize] += 1;
        }
    }
    let mut best = 0usize;
    for (k, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = k;
        }
    }
    best as u16
}

/// Train the predictor with masked-token cross-entropy under random mask
/// ratios. Batch gradients are evaluated in parallel and reduced in
/// example-index order; the whole run is a pure function of the config seed.
pub fn train_teacher(
    corpus: &[(TokenGrid, u16)],
    config: &TeacherConfig,
    metrics: &mut dyn MetricsSink,
) -> Result<(TeacherModel, TeacherTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let geometry = corpus[0].0.geometry();
    let mut vocab_max = 0u16;
    for (grid, condition) in corpus {
        if grid.geometry() != geometry {
            return Err(Error::DimensionMismatch(
                "corpus grids must share geometry".to_string(),
            ));
        }
        if *condition as usize >= config.condition_count {
            return Err(Error::UnknownCondition {
                condition: *condition,
                count: config.condition_count,
            });
        }
        vocab_max = vocab_max.max(grid.labels().iter().copied().max().unwrap_or(0));
    }
    let vocab = VocabSpec::new((vocab_max as usize + 1).max(2))?;
    let mut model = TeacherModel::init(geometry, vocab, config)?;
    let n = geometry.n();

    // Deterministic split: shuffled indices, holdout from the tail.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7465616368);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for k in (1..order.len()).rev() {
        let j = rng.random_range(0..=k);
        order.swap(k, j);
    }
    let holdout_len = ((corpus.len() as f64 * config.holdout_fraction).round() as usize)
        .min(corpus.len().saturating_sub(1));
    let (train_idx, holdout_idx) = order.split_at(corpus.len() - holdout_len);
    let holdout: Vec<(TokenGrid, u16)> = if holdout_idx.is_empty() {
        train_idx.iter().map(|&i| corpus[i].clone()).collect()
    } else {
        holdout_idx.iter().map(|&i| corpus[i].clone()).collect()
    };

    let mut adam = TeacherAdam::new(&model);
    let mut last_loss = f64::NAN;
    for step in 0..config.steps {
        let started = Instant::now();
        // Draw the whole batch up front so the RNG stream is independent of
        // the parallel execution order.
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pick = train_idx[rng.random_range(0..train_idx.len())];
            let (grid, condition) = &corpus[pick];
            let ratio = sample_mask_ratio(&mut rng);
            let mask = mask_exactly(n, (ratio * n as f64).round() as usize, &mut rng);
            let masked = MaskedTokenGrid::new(grid.clone(), mask)?;
            let all_masked = masked.masked_indices();
            let mut targets: Vec<(usize, u16)> =
                all_masked.iter().map(|&i| (i, grid.label(i))).collect();
            if targets.len() > config.max_targets_per_example {
                for k in 0..config.max_targets_per_example {
                    let j = rng.random_range(k..targets.len());
                    targets.swap(k, j);
                }
                targets.truncate(config.max_targets_per_example);
            }
            batch.push((masked, *condition, targets));
        }
        let results: Vec<(f64, TeacherGrads)> = batch
            .par_iter()
            .map(|(masked, condition, targets)| {
                masked_ce_loss_grads(&model, masked, *condition, targets)
            })
            .collect();
        let mut mean_loss = 0.0;
        let mut mean_grads = TeacherGrads::zeros(&model);
        for (loss, grads) in &results {
            mean_loss += loss;
            mean_grads.add_assign(grads);
        }
        let scale = 1.0 / config.batch_size as f64;
        mean_loss *= scale;
        mean_grads.scale(scale);
        adam.update(&mut model, &mean_grads, config);
        last_loss = mean_loss;
        metrics.record(
            step as u64,
            TrainStage::Teacher,
            mean_loss,
            started.elapsed().as_secs_f64() * 1e3,
        );
    }

    let baseline_label = most_frequent_label(corpus, vocab);
    let (holdout_accuracy, baseline_accuracy) =
        masked_accuracy(&model, &holdout, baseline_label, config.seed ^ 0xacc)?;
    log::info!(
        "teacher trained: holdout accuracy {holdout_accuracy:.4}, most-frequent baseline {baseline_accuracy:.4}"
    );
    Ok((
        model,
        TeacherTrainReport {
            holdout_accuracy,
            baseline_accuracy,
            final_loss: last_loss,
        },
    ))
}

/// One decode step: the emitted logits and the newly committed tokens.
#[derive(Debug, Clone)]
pub struct DecodeStep {
    /// 1-based step index.
    pub step: usize,
    pub logits: LogitField,
    pub committed_positions: Vec<usize>,
    pub committed_labels: Vec<u16>,
    pub wallclock_ms: f64,
    /// Portion of the step spent in the predictor.
    pub teacher_ms: f64,
}

/// Full record of one progressive decode.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub steps: Vec<DecodeStep>,
    pub final_grid: TokenGrid,
    pub condition: u16,
    pub seed: u64,
}

impl DecodeTrace {
    /// Check committed sets partition the grid per the schedule.
    pub fn validate_against(&self, schedule: &DecodeSchedule) -> Result<()> {
        if self.steps.len() != schedule.total_steps() {
            return Err(Error::DimensionMismatch(format!(
                "trace has {} steps, schedule {}",
                self.steps.len(),
                schedule.total_steps()
            )));
        }
        let n = self.final_grid.geometry().n();
        let mut seen = vec![false; n];
        for (t, step) in self.steps.iter().enumerate() {
            if step.committed_positions.len() != schedule.commits_at(t + 1) {
                return Err(Error::InvalidArgument(format!(
                    "step {} committed {} tokens, schedule says {}",
                    t + 1,
                    step.committed_positions.len(),
                    schedule.commits_at(t + 1)
                )));
            }
            for (&pos, &label) in step.committed_positions.iter().zip(&step.committed_labels) {
                if seen[pos] {
                    return Err(Error::InvalidArgument(format!(
                        "position {pos} committed twice"
                    )));
                }
                seen[pos] = true;
                if self.final_grid.label(pos) != label {
                    return Err(Error::InvalidArgument(format!(
                        "position {pos} changed after commitment"
                    )));
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidArgument(
                "commitments do not cover the grid".to_string(),
            ));
        }
        Ok(())
    }

    /// All (position, label) pairs committed through step `k` (1-based),
    /// ascending by position.
    pub fn committed_through(&self, k: usize) -> Vec<(usize, u16)> {
        let mut out = Vec::new();
        for step in &self.steps[..k] {
            out.extend(
                step.committed_positions
                    .iter()
                    .copied()
                    .zip(step.committed_labels.iter().copied()),
            );
        }
        out.sort_by_key(|&(i, _)| i);
        out
    }
}

pub(crate) fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0usize;
    let mut best_v = row[0];
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

fn softmax_vec(row: ndarray::ArrayView1<'_, f64>, temperature: f64) -> Vec<f64> {
    let scale = 1.0 / temperature;
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&v| ((v - max) * scale).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Run the decode loop through `stop_after` steps.
fn decode_engine(
    model: &TeacherModel,
    condition: u16,
    schedule: &DecodeSchedule,
    step_temperatures: &[f64],
    seed: u64,
    stop_after: usize,
) -> Result<(Vec<DecodeStep>, Vec<Option<u16>>)> {
    let n = model.geometry.n();
    if schedule.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "schedule covers {} tokens, grid has {n}",
            schedule.n()
        )));
    }
    if step_temperatures.len() != schedule.total_steps() {
        return Err(Error::DimensionMismatch(
            "one temperature per schedule step required".to_string(),
        ));
    }
    if stop_after == 0 || stop_after > schedule.total_steps() {
        return Err(Error::InvalidArgument(format!(
            "stop step {stop_after} outside [1, {}]",
            schedule.total_steps()
        )));
    }
    for &t in step_temperatures {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {t} < 0")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut committed: Vec<Option<u16>> = vec![None; n];
    let mut steps = Vec::with_capacity(stop_after);
    for step in 1..=stop_after {
        let started = Instant::now();
        let placeholder: Vec<u16> = committed.iter().map(|c| c.unwrap_or(0)).collect();
        let mask: Vec<bool> = committed.iter().map(|c| c.is_none()).collect();
        let masked = MaskedTokenGrid::new(
            TokenGrid::new(model.geometry, placeholder, &model.vocab)?,
            mask,
        )?;
        let logits = predict_logits(model, &masked, condition)?;
        let teacher_ms = started.elapsed().as_secs_f64() * 1e3;

        let temperature = step_temperatures[step - 1];
        // Candidate token and confidence per hidden position, visited in
        // ascending position order so the RNG stream is well-defined.
        let mut candidates: Vec<(usize, u16, f64)> = Vec::new();
        for i in 0..n {
            if committed[i].is_some() {
                continue;
            }
            let row = logits.values().row(i);
            let (label, confidence) = if temperature == 0.0 {
                let label = argmax_row(row);
                (label, softmax_vec(row, 1.0)[label])
            } else {
                let probs = softmax_vec(row, temperature);
                let mut u = rng.random::<f64>();
                let mut label = probs.len() - 1;
                for (k, &p) in probs.iter().enumerate() {
                    u -= p;
                    if u <= 0.0 {
                        label = k;
                        break;
                    }
                }
                (label, probs[label])
            };
            candidates.push((i, label as u16, confidence));
        }
        let commit_count = schedule.commits_at(step);
        if commit_count > candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "step {step} commits {commit_count} but only {} positions remain",
                candidates.len()
            )));
        }
        // Highest confidence first; ties break to the lower position index.
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut chosen: Vec<(usize, u16)> = candidates[..commit_count]
            .iter()
            .map(|&(i, l, _)| (i, l))
            .collect();
        chosen.sort_by_key(|&(i, _)| i);
        for &(i, label) in &chosen {
            committed[i] = Some(label);
        }
        steps.push(DecodeStep {
            step,
            logits,
            committed_positions: chosen.iter().map(|&(i, _)| i).collect(),
            committed_labels: chosen.iter().map(|&(_, l)| l).collect(),
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
            teacher_ms,
        });
    }
    Ok((steps, committed))
}

/// Progressive parallel decode with a per-step temperature sequence.
pub fn progressive_decode_annealed(
    model: &TeacherModel,
    condition: u16,
    schedule: &DecodeSchedule,
    step_temperatures: &[f64],
    seed: u64,
) -> Result<DecodeTrace> {
    let (steps, committed) = decode_engine(
        model,
        condition,
        schedule,
        step_temperatures,
        seed,
        schedule.total_steps(),
    )?;
    let labels: Vec<u16> = committed
        .into_iter()
        .map(|c| c.expect("full schedule commits every position"))
        .collect();
    let final_grid = TokenGrid::new(model.geometry, labels, &model.vocab)?;
    Ok(DecodeTrace {
        steps,
        final_grid,
        condition,
        seed,
    })
}

/// Progressive parallel decode at a constant sampling temperature
/// (`temperature = 0` selects the argmax).
pub fn progressive_decode(
    model: &TeacherModel,
    condition: u16,
    schedule: &DecodeSchedule,
    temperature: f64,
    seed: u64,
) -> Result<DecodeTrace> {
    let temps = vec![temperature; schedule.total_steps()];
    progressive_decode_annealed(model, condition, schedule, &temps, seed)
}

/// Outcome of running only the first `k` decode steps.
#[derive(Debug, Clone)]
pub struct PrefixDecode {
    /// Everything committed through step k, ascending by position.
    pub committed: Vec<(usize, u16)>,
    /// The logits emitted at step k.
    pub logits_at_cut: LogitField,
    pub teacher_ms: Vec<f64>,
    pub bookkeeping_ms: f64,
}

/// Run the decoder through step `k` only, keeping the step-k logits.
pub fn decode_prefix(
    model: &TeacherModel,
    condition: u16,
    schedule: &DecodeSchedule,
    temperature: f64,
    seed: u64,
    k: usize,
) -> Result<PrefixDecode> {
    let temps = vec![temperature; schedule.total_steps()];
    let (steps, committed) = decode_engine(model, condition, schedule, &temps, seed, k)?;
    let logits_at_cut = steps.last().expect("k >= 1").logits.clone();
    let teacher_ms: Vec<f64> = steps.iter().map(|s| s.teacher_ms).collect();
    let bookkeeping_ms = steps.iter().map(|s| s.wallclock_ms - s.teacher_ms).sum();
    let committed: Vec<(usize, u16)> = committed
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|l| (i, l)))
        .collect();
    Ok(PrefixDecode {
        committed,
        logits_at_cut,
        teacher_ms,
        bookkeeping_ms,
    })
}

/// Early-exit completion: keep tokens committed through step `k` (1-based)
/// and fill every still-hidden position from the step-k logits by argmax.
pub fn early_exit(trace: &DecodeTrace, k: usize) -> Result<TokenGrid> {
    if k == 0 || k > trace.steps.len() {
        return Err(Error::InvalidArgument(format!(
            "early-exit step {k} outside [1, {}]",
            trace.steps.len()
        )));
    }
    let cut_logits = &trace.steps[k - 1].logits;
    let geometry = cut_logits.geometry();
    let n = geometry.n();
    let mut labels: Vec<Option<u16>> = vec![None; n];
    for (pos, label) in trace.committed_through(k) {
        labels[pos] = Some(label);
    }
    let filled: Vec<u16> = labels
        .iter()
        .enumerate()
        .map(|(i, c)| match c {
            Some(l) => *l,
            None => argmax_row(cut_logits.values().row(i)) as u16,
        })
        .collect();
    TokenGrid::new(geometry, filled, &cut_logits.vocab())
}

/// Decode a batch of (condition, seed) pairs in parallel; one trace each.
pub fn decode_batch(
    model: &TeacherModel,
    schedule: &DecodeSchedule,
    step_temperatures: &[f64],
    runs: &[(u16, u64)],
) -> Result<Vec<DecodeTrace>> {
    runs.par_iter()
        .map(|&(condition, seed)| {
            progressive_decode_annealed(model, condition, schedule, step_temperatures, seed)
        })
        .collect()
}

/// Sidecar path convention: `.json` appended to the full file name.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Write a trace as tensors plus a JSON step index sidecar at `<path>.json`.
pub fn write_trace(path: impl AsRef<Path>, trace: &DecodeTrace) -> Result<()> {
    let mut file = TensorFile::default();
    let geometry = trace.final_grid.geometry();
    let mut index_steps = Vec::new();
    for step in &trace.steps {
        let logits_name = format!("step_{:03}_logits", step.step);
        let positions_name = format!("step_{:03}_positions", step.step);
        let labels_name = format!("step_{:03}_labels", step.step);
        file.push(NamedTensor::from_matrix(&logits_name, step.logits.values()));
        file.push(NamedTensor::new(
            positions_name.clone(),
            vec![step.committed_positions.len() as u32],
            TensorData::U16(
                step.committed_positions
                    .iter()
                    .map(|&p| p as u16)
                    .collect(),
            ),
        )?);
        file.push(NamedTensor::new(
            labels_name.clone(),
            vec![step.committed_labels.len() as u32],
            TensorData::U16(step.committed_labels.clone()),
        )?);
        index_steps.push(serde_json::json!({
            "step": step.step,
            "logits": logits_name,
            "positions": positions_name,
            "labels": labels_name,
        }));
    }
    file.push(NamedTensor::new(
        "final",
        vec![geometry.height() as u32, geometry.width() as u32],
        TensorData::U16(trace.final_grid.labels().to_vec()),
    )?);
    file.write(&path)?;
    let sidecar = serde_json::json!({
        "format_version": crate::tensor_file::FORMAT_VERSION,
        "condition": trace.condition,
        "seed": trace.seed,
        "steps": index_steps,
        "final": "final",
    });
    std::fs::write(
        sidecar_path(path.as_ref()),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Read a trace written by [`write_trace`]. Logits come back f32-rounded.
pub fn read_trace(path: impl AsRef<Path>, vocab: VocabSpec) -> Result<DecodeTrace> {
    let file = TensorFile::read(&path)?;
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path.as_ref()))?)?;
    let final_tensor = file.get(
        sidecar["final"]
            .as_str()
            .ok_or_else(|| Error::MalformedFile("sidecar missing 'final'".to_string()))?,
    )?;
    if final_tensor.dims.len() != 2 {
        return Err(Error::MalformedFile("final grid must be rank 2".to_string()));
    }
    let geometry = GridGeometry::new(final_tensor.dims[0] as usize, final_tensor.dims[1] as usize)?;
    let final_grid = TokenGrid::new(geometry, final_tensor.as_u16()?.to_vec(), &vocab)?;
    let steps_index = sidecar["steps"]
        .as_array()
        .ok_or_else(|| Error::MalformedFile("sidecar missing 'steps'".to_string()))?;
    let mut steps = Vec::with_capacity(steps_index.len());
    for entry in steps_index {
        let name = |key: &str| -> Result<&str> {
            entry[key]
                .as_str()
                .ok_or_else(|| Error::MalformedFile(format!("sidecar step missing '{key}'")))
        };
        let logits = LogitField::new(geometry, vocab, file.get(name("logits")?)?.to_matrix()?)?;
        let positions: Vec<usize> = file
            .get(name("positions")?)?
            .as_u16()?
            .iter()
            .map(|&p| p as usize)
            .collect();
        let labels = file.get(name("labels")?)?.as_u16()?.to_vec();
        steps.push(DecodeStep {
            step: entry["step"]
                .as_u64()
                .ok_or_else(|| Error::MalformedFile("sidecar step missing index".to_string()))?
                as usize,
            logits,
            committed_positions: positions,
            committed_labels: labels,
            wallclock_ms: 0.0,
            teacher_ms: 0.0,
        });
    }
    Ok(DecodeTrace {
        steps,
        final_grid,
        condition: sidecar["condition"].as_u64().unwrap_or(0) as u16,
        seed: sidecar["seed"].as_u64().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::NullMetrics;

    fn checkerboard_corpus(
        height: usize,
        width: usize,
        count: usize,
        condition: u16,
    ) -> Vec<(TokenGrid, u16)> {
        let geometry = GridGeometry::new(height, width).unwrap();
        let vocab = VocabSpec::new(2).unwrap();
        (0..count)
            .map(|_| {
                let labels: Vec<u16> = (0..geometry.n())
                    .map(|i| (((i / width) + (i % width)) % 2) as u16)
                    .collect();
                (TokenGrid::new(geometry, labels, &vocab).unwrap(), condition)
            })
            .collect()
    }

    fn micro_config(steps: usize) -> TeacherConfig {
        TeacherConfig {
            embed_dim: 8,
            hidden_dim: 64,
            window_radius: 1,
            batch_size: 4,
            steps,
            max_targets_per_example: 16,
            seed: 11,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn teacher_learns_checkerboard() {
        let corpus = checkerboard_corpus(4, 4, 32, 0);
        let (model, report) =
            train_teacher(&corpus, &micro_config(200), &mut NullMetrics).unwrap();
        assert!(
            report.holdout_accuracy >= 0.95,
            "holdout accuracy {}",
            report.holdout_accuracy
        );
        assert!(report.holdout_accuracy > report.baseline_accuracy);
        // Fully observed reconstruction: argmax matches the observed token.
        let (grid, condition) = &corpus[0];
        let masked = MaskedTokenGrid::new(grid.clone(), vec![false; 16]).unwrap();
        let logits = predict_logits(&model, &masked, *condition).unwrap();
        let mut agree = 0;
        for i in 0..16 {
            if argmax_row(logits.values().row(i)) as u16 == grid.label(i) {
                agree += 1;
            }
        }
        assert!(agree >= 15, "fully observed reconstruction agree {agree}/16");
    }

    #[test]
    fn teacher_memorizes_single_grid() {
        let corpus = checkerboard_corpus(4, 4, 1, 0);
        let (_, report) = train_teacher(&corpus, &micro_config(200), &mut NullMetrics).unwrap();
        assert!(
            report.holdout_accuracy >= 0.95,
            "single-grid accuracy {}",
            report.holdout_accuracy
        );
    }

    #[test]
    fn teacher_is_condition_sensitive() {
        // Condition 0: checkerboard. Condition 1: row stripes.
        let geometry = GridGeometry::new(4, 4).unwrap();
        let vocab = VocabSpec::new(2).unwrap();
        let mut corpus = checkerboard_corpus(4, 4, 24, 0);
        for _ in 0..24 {
            let labels: Vec<u16> = (0..16).map(|i| ((i / 4) % 2) as u16).collect();
            corpus.push((TokenGrid::new(geometry, labels, &vocab).unwrap(), 1));
        }
        let config = TeacherConfig {
            condition_count: 2,
            ..micro_config(300)
        };
        let (model, _) = train_teacher(&corpus, &config, &mut NullMetrics).unwrap();
        // Fully masked input: the condition label is the only signal left, so
        // the correct condition must reconstruct its own pattern better.
        let checker = &corpus[0].0;
        let masked = MaskedTokenGrid::new(checker.clone(), vec![true; 16]).unwrap();
        let score = |condition: u16| {
            let logits = predict_logits(&model, &masked, condition).unwrap();
            (0..16)
                .filter(|&i| argmax_row(logits.values().row(i)) as u16 == checker.label(i))
                .count()
        };
        assert!(
            score(0) > score(1),
            "correct-condition accuracy {} <= swapped {}",
            score(0),
            score(1)
        );
    }

    #[test]
    fn predict_is_deterministic_and_checks_condition() {
        let corpus = checkerboard_corpus(4, 4, 4, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(20), &mut NullMetrics).unwrap();
        let masked = MaskedTokenGrid::new(corpus[0].0.clone(), vec![true; 16]).unwrap();
        let a = predict_logits(&model, &masked, 0).unwrap();
        let b = predict_logits(&model, &masked, 0).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(matches!(
            predict_logits(&model, &masked, 5),
            Err(Error::UnknownCondition { .. })
        ));
    }

    #[test]
    fn decode_trace_partitions_and_is_deterministic() {
        let corpus = checkerboard_corpus(4, 4, 16, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(120), &mut NullMetrics).unwrap();
        let schedule = DecodeSchedule::cosine(16, 4, 3).unwrap();
        let a = progressive_decode(&model, 0, &schedule, 1.0, 99).unwrap();
        a.validate_against(&schedule).unwrap();
        let b = progressive_decode(&model, 0, &schedule, 1.0, 99).unwrap();
        assert_eq!(a.final_grid, b.final_grid);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.committed_positions, sb.committed_positions);
            assert_eq!(sa.committed_labels, sb.committed_labels);
        }
        // Temperature 0: identical decodes regardless of seed.
        let c = progressive_decode(&model, 0, &schedule, 0.0, 1).unwrap();
        let d = progressive_decode(&model, 0, &schedule, 0.0, 2).unwrap();
        assert_eq!(c.final_grid, d.final_grid);
    }

    #[test]
    fn one_shot_schedule_decodes_in_one_step() {
        let corpus = checkerboard_corpus(4, 4, 8, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(40), &mut NullMetrics).unwrap();
        let schedule = DecodeSchedule::one_shot(16);
        let trace = progressive_decode(&model, 0, &schedule, 0.0, 5).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].committed_positions.len(), 16);
        let ee = early_exit(&trace, 1).unwrap();
        assert_eq!(ee, trace.final_grid);
    }

    #[test]
    fn early_exit_at_final_step_equals_full() {
        let corpus = checkerboard_corpus(4, 4, 16, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(80), &mut NullMetrics).unwrap();
        let schedule = DecodeSchedule::cosine(16, 4, 2).unwrap();
        let trace = progressive_decode(&model, 0, &schedule, 1.0, 123).unwrap();
        let ee = early_exit(&trace, 4).unwrap();
        assert_eq!(ee, trace.final_grid);
        assert!(early_exit(&trace, 0).is_err());
        assert!(early_exit(&trace, 5).is_err());
    }

    #[test]
    fn prefix_matches_full_trace() {
        let corpus = checkerboard_corpus(4, 4, 16, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(80), &mut NullMetrics).unwrap();
        let schedule = DecodeSchedule::cosine(16, 4, 2).unwrap();
        let trace = progressive_decode(&model, 0, &schedule, 1.0, 77).unwrap();
        let prefix = decode_prefix(&model, 0, &schedule, 1.0, 77, 2).unwrap();
        assert_eq!(prefix.committed, trace.committed_through(2));
        assert_eq!(
            prefix.logits_at_cut.values(),
            trace.steps[1].logits.values()
        );
    }

    #[test]
    fn model_roundtrips_through_container() {
        let corpus = checkerboard_corpus(4, 4, 4, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(10), &mut NullMetrics).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.mgtf");
        model.save(&path).unwrap();
        let loaded = TeacherModel::load(&path).unwrap();
        // f32 storage: saving the loaded model again is bit-stable.
        let path2 = dir.path().join("teacher2.mgtf");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        assert_eq!(loaded.geometry(), model.geometry());
        assert_eq!(loaded.condition_count(), model.condition_count());
    }

    #[test]
    fn trace_roundtrips_through_container() {
        let corpus = checkerboard_corpus(4, 4, 8, 0);
        let (model, _) = train_teacher(&corpus, &micro_config(30), &mut NullMetrics).unwrap();
        let schedule = DecodeSchedule::cosine(16, 3, 2).unwrap();
        let trace = progressive_decode(&model, 0, &schedule, 1.0, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.mgtf");
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path, model.vocab()).unwrap();
        assert_eq!(back.final_grid, trace.final_grid);
        assert_eq!(back.steps.len(), trace.steps.len());
        for (a, b) in back.steps.iter().zip(&trace.steps) {
            assert_eq!(a.committed_positions, b.committed_positions);
            assert_eq!(a.committed_labels, b.committed_labels);
        }
        // Re-exporting the imported trace is byte-stable.
        let path2 = dir.path().join("trace2.mgtf");
        write_trace(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let geometry = GridGeometry::new(2, 3).unwrap();
        let vocab = VocabSpec::new(3).unwrap();
        let config = TeacherConfig {
            embed_dim: 3,
            hidden_dim: 5,
            window_radius: 1,
            condition_count: 2,
            seed: 3,
            ..TeacherConfig::default()
        };
        let model = TeacherModel::init(geometry, vocab, &config).unwrap();
        let grid = TokenGrid::new(geometry, vec![0, 1, 2, 2, 1, 0], &vocab).unwrap();
        let masked =
            MaskedTokenGrid::new(grid, vec![true, false, true, false, true, false]).unwrap();
        let targets = vec![(0usize, 0u16), (2, 2), (4, 1)];
        let (_, grads) = masked_ce_loss_grads(&model, &masked, 1, &targets);
        let h = 1e-5;
        let loss_at = |m: &TeacherModel| masked_ce_loss_grads(m, &masked, 1, &targets).0;
        let checks: Vec<(&str, Vec<(usize, usize)>)> = vec![
            ("w1", vec![(0, 0), (5, 3), (20, 4)]),
            ("w2", vec![(0, 0), (3, 2)]),
            ("token_embed", vec![(0, 0), (3, 1), (4, 2)]),
            ("cond_embed", vec![(1, 0), (1, 2)]),
        ];
        for (tensor, coords) in checks {
            for (i, j) in coords {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let analytic = match tensor {
                    "w1" => {
                        plus.w1[[i, j]] += h;
                        minus.w1[[i, j]] -= h;
                        grads.w1[[i, j]]
                    }
                    "w2" => {
                        plus.w2[[i, j]] += h;
                        minus.w2[[i, j]] -= h;
                        grads.w2[[i, j]]
                    }
                    "token_embed" => {
                        plus.token_embed[[i, j]] += h;
                        minus.token_embed[[i, j]] -= h;
                        grads.token_embed[[i, j]]
                    }
                    "cond_embed" => {
                        plus.cond_embed[[i, j]] += h;
                        minus.cond_embed[[i, j]] -= h;
                        grads.cond_embed[[i, j]]
                    }
                    _ => unreachable!(),
                };
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                assert!(
                    (analytic - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "{tensor}[{i},{j}]: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }
}
