//! Training of the weight matrices: exact reverse-mode gradients through the
//! unrolled mean-field loop, the masked-token pretraining loss, the
//! distillation loss against a decoder's final tokens, and an ADAM loop.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mrf::mean_field_forward;
use crate::types::{GridGeometry, LogitField, MaskedTokenGrid, MrfParams, TokenGrid, VocabSpec};

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    /// Mean-field iterations unrolled in every forward/backward pass.
    pub num_iterations_mf: usize,
    /// Fraction of positions hidden per pretraining example.
    pub mask_fraction: f64,
    /// Logit strength pinning observed tokens.
    pub unary_strength_kappa: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            num_iterations_mf: 5,
            mask_fraction: 0.20,
            unary_strength_kappa: 10.0,
            steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be in (0,1)")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("adam_epsilon must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.num_iterations_mf == 0 {
            return Err(Error::InvalidArgument(
                "num_iterations_mf must be >= 1".into(),
            ));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::InvalidArgument("mask_fraction must be in (0,1)".into()));
        }
        if self.unary_strength_kappa <= 0.0 {
            return Err(Error::InvalidArgument(
                "unary_strength_kappa must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients with respect to the two weight matrices and (for diagnostics)
/// the input logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_w_spatial: Array2<f64>,
    pub d_w_label: Array2<f64>,
    pub d_logits: Array2<f64>,
}

impl GradientBundle {
    pub fn zeros(geometry: GridGeometry, vocab: VocabSpec) -> Self {
        let n = geometry.n();
        let v = vocab.size();
        GradientBundle {
            d_w_spatial: Array2::zeros((n, n)),
            d_w_label: Array2::zeros((v, v)),
            d_logits: Array2::zeros((n, v)),
        }
    }

    fn add_assign(&mut self, other: &GradientBundle) {
        self.d_w_spatial += &other.d_w_spatial;
        self.d_w_label += &other.d_w_label;
        self.d_logits += &other.d_logits;
    }

    fn scale(&mut self, factor: f64) {
        self.d_w_spatial *= factor;
        self.d_w_label *= factor;
        self.d_logits *= factor;
    }

    fn check_finite(&self) -> Result<()> {
        let all = self
            .d_w_spatial
            .iter()
            .chain(self.d_w_label.iter())
            .chain(self.d_logits.iter());
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite(
                    "gradient contains a non-finite entry".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian product of a row-wise softmax: for each row,
/// `dx = y * (dy - <dy, y>)`.
fn softmax_rows_vjp(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for (mut dx_row, y_row) in dx.rows_mut().into_iter().zip(y.rows()) {
        let inner: f64 = dx_row.iter().zip(y_row.iter()).map(|(a, b)| a * b).sum();
        for (d, &q) in dx_row.iter_mut().zip(y_row.iter()) {
            *d = q * (*d - inner);
        }
    }
    dx
}

/// Exact reverse-mode gradients of a scalar loss through `num_iterations`
/// unrolled mean-field steps, given the loss gradient on the final marginals.
pub fn mean_field_backward(
    params: &MrfParams,
    logits: &LogitField,
    num_iterations: usize,
    loss_grad_on_q: &Array2<f64>,
) -> Result<GradientBundle> {
    params.check_compatible(logits)?;
    let n = params.geometry().n();
    let v = params.vocab().size();
    if loss_grad_on_q.dim() != (n, v) {
        return Err(Error::DimensionMismatch(format!(
            "loss gradient is {:?}, expected ({n}, {v})",
            loss_grad_on_q.dim()
        )));
    }
    if let Some(bad) = loss_grad_on_q.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss gradient entry {bad}")));
    }
    let trace = mean_field_forward(params, logits, num_iterations)?;
    let ws = params.w_spatial();
    let wc = params.w_label();

    let mut bundle = GradientBundle::zeros(params.geometry(), params.vocab());
    let mut dq = loss_grad_on_q.clone();
    for t in (1..=num_iterations).rev() {
        let q_out = &trace.qs[t];
        let q_in = &trace.qs[t - 1];
        let mixed = &trace.spatial[t - 1];
        let dc = softmax_rows_vjp(q_out, &dq);
        bundle.d_logits += &dc;
        // label mixing: b = a (W^c)^T
        bundle.d_w_label += &dc.t().dot(mixed);
        let da = dc.dot(wc);
        // spatial mixing: a = W^s q_in
        bundle.d_w_spatial += &da.dot(&q_in.t());
        dq = ws.t().dot(&da);
    }
    // Initial Q = softmax(f).
    bundle.d_logits += &softmax_rows_vjp(&trace.qs[0], &dq);
    bundle.check_finite()?;
    Ok(bundle)
}

/// Unaries for masked-token pretraining: an observed position with label t
/// gets `f(t) = kappa` and 0 elsewhere; masked positions get all-zero rows.
pub fn observed_unaries(
    masked: &MaskedTokenGrid,
    vocab: VocabSpec,
    kappa: f64,
) -> Result<LogitField> {
    let geometry = masked.grid().geometry();
    let mut values = Array2::zeros((geometry.n(), vocab.size()));
    for i in 0..geometry.n() {
        if !masked.is_masked(i) {
            let label = masked.grid().label(i);
            if !vocab.contains(label) {
                return Err(Error::LabelOutOfRange {
                    position: i,
                    label,
                    vocab_size: vocab.size(),
                });
            }
            values[[i, label as usize]] = kappa;
        }
    }
    LogitField::new(geometry, vocab, values)
}

/// Masked-token prediction loss: mean categorical cross-entropy of the
/// inferred marginals at masked positions against the hidden labels.
pub fn pretrain_loss(
    params: &MrfParams,
    masked: &MaskedTokenGrid,
    config: &TrainConfig,
) -> Result<(f64, GradientBundle)> {
    if masked.grid().geometry() != params.geometry() {
        return Err(Error::DimensionMismatch(
            "masked grid does not match parameter geometry".to_string(),
        ));
    }
    let masked_positions = masked.masked_indices();
    if masked_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let vocab = params.vocab();
    let logits = observed_unaries(masked, vocab, config.unary_strength_kappa)?;
    let trace = mean_field_forward(params, &logits, config.num_iterations_mf)?;
    let q = trace.qs.last().expect("at least one state");

    let inv_count = 1.0 / masked_positions.len() as f64;
    let mut loss = 0.0;
    let mut grad_q = Array2::zeros(q.dim());
    for &i in &masked_positions {
        let target = masked.grid().label(i) as usize;
        let p = q[[i, target]];
        loss -= inv_count * p.ln();
        grad_q[[i, target]] = -inv_count / p;
    }
    let bundle = mean_field_backward(params, &logits, config.num_iterations_mf, &grad_q)?;
    Ok((loss, bundle))
}

/// Distillation loss: run inference on the decoder's cut-step logits and
/// score the marginals against its final committed tokens. KL against one-hot
/// targets equals the mean cross-entropy over positions.
pub fn distill_loss(
    params: &MrfParams,
    teacher_logits_at_k: &LogitField,
    teacher_final: &TokenGrid,
    config: &TrainConfig,
) -> Result<(f64, GradientBundle)> {
    params.check_compatible(teacher_logits_at_k)?;
    if teacher_final.geometry() != params.geometry() {
        return Err(Error::DimensionMismatch(
            "final token grid does not match parameter geometry".to_string(),
        ));
    }
    teacher_final.validate(&params.vocab())?;
    let trace = mean_field_forward(params, teacher_logits_at_k, config.num_iterations_mf)?;
    let q = trace.qs.last().expect("at least one state");
    let n = params.geometry().n();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_q = Array2::zeros(q.dim());
    for i in 0..n {
        let target = teacher_final.label(i) as usize;
        let p = q[[i, target]];
        loss -= inv_n * p.ln();
        grad_q[[i, target]] = -inv_n / p;
    }
    let bundle =
        mean_field_backward(params, teacher_logits_at_k, config.num_iterations_mf, &grad_q)?;
    Ok((loss, bundle))
}

/// ADAM first/second moments for both weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m_spatial: Array2<f64>,
    v_spatial: Array2<f64>,
    m_label: Array2<f64>,
    v_label: Array2<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(geometry: GridGeometry, vocab: VocabSpec) -> Self {
        let n = geometry.n();
        let v = vocab.size();
        AdamState {
            m_spatial: Array2::zeros((n, n)),
            v_spatial: Array2::zeros((n, n)),
            m_label: Array2::zeros((v, v)),
            v_label: Array2::zeros((v, v)),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// In-place ADAM update with bias correction over flat parameter storage.
pub(crate) fn adam_update_flat(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
}

fn adam_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    t: u64,
    config: &TrainConfig,
) {
    adam_update_flat(
        param.as_slice_mut().expect("standard layout"),
        grad.as_slice().expect("standard layout"),
        m.as_slice_mut().expect("standard layout"),
        v.as_slice_mut().expect("standard layout"),
        t,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
}

/// One ADAM update with bias correction, applied independently to the spatial
/// and label matrices. Returns the updated parameters and state.
pub fn adam_step(
    params: &MrfParams,
    grads: &GradientBundle,
    state: &AdamState,
    config: &TrainConfig,
) -> Result<(MrfParams, AdamState)> {
    config.validate()?;
    if grads.d_w_spatial.dim() != params.w_spatial().dim()
        || grads.d_w_label.dim() != params.w_label().dim()
    {
        return Err(Error::DimensionMismatch(
            "gradient shapes do not match parameters".to_string(),
        ));
    }
    let mut state = state.clone();
    state.step += 1;
    let mut w_spatial = params.w_spatial().clone();
    let mut w_label = params.w_label().clone();
    adam_update(
        &mut w_spatial,
        &grads.d_w_spatial,
        &mut state.m_spatial,
        &mut state.v_spatial,
        state.step,
        config,
    );
    adam_update(
        &mut w_label,
        &grads.d_w_label,
        &mut state.m_label,
        &mut state.v_label,
        state.step,
        config,
    );
    let params = MrfParams::new(params.geometry(), params.vocab(), w_spatial, w_label)
        .map_err(|_| Error::NonFinite("ADAM produced a non-finite update".to_string()))?;
    Ok((params, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Pretrain,
    Distill,
    /// Decoder training; shares the metrics log format.
    Teacher,
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainStage::Pretrain => write!(f, "pretrain"),
            TrainStage::Distill => write!(f, "distill"),
            TrainStage::Teacher => write!(f, "teacher"),
        }
    }
}

/// One distillation example: the decoder's cut-step logits (with committed
/// positions already pinned) and its final token grid.
#[derive(Debug, Clone)]
pub struct DistillExample {
    pub logits: LogitField,
    pub target: TokenGrid,
}

/// Training corpus for one stage.
pub enum TrainInput<'a> {
    Pretrain(&'a [TokenGrid]),
    Distill(&'a [DistillExample]),
}

impl TrainInput<'_> {
    fn len(&self) -> usize {
        match self {
            TrainInput::Pretrain(c) => c.len(),
            TrainInput::Distill(c) => c.len(),
        }
    }

    fn stage(&self) -> TrainStage {
        match self {
            TrainInput::Pretrain(_) => TrainStage::Pretrain,
            TrainInput::Distill(_) => TrainStage::Distill,
        }
    }
}

/// Receives one record per optimizer step.
pub trait MetricsSink {
    fn record(&mut self, step: u64, stage: TrainStage, loss: f64, wallclock_ms: f64);
}

/// Discards all records.
pub struct NullMetrics;

impl MetricsSink for NullMetrics {
    fn record(&mut self, _: u64, _: TrainStage, _: f64, _: f64) {}
}

/// Appends `step<TAB>stage<TAB>loss<TAB>wallclock_ms` lines.
pub struct TsvMetrics<W: Write> {
    writer: W,
}

impl<W: Write> TsvMetrics<W> {
    pub fn new(writer: W) -> Self {
        TsvMetrics { writer }
    }
}

impl<W: Write> MetricsSink for TsvMetrics<W> {
    fn record(&mut self, step: u64, stage: TrainStage, loss: f64, wallclock_ms: f64) {
        // Training proceeds even if the metrics stream breaks.
        let _ = writeln!(self.writer, "{step}\t{stage}\t{loss}\t{wallclock_ms:.3}");
    }
}

/// Collects records in memory.
#[derive(Default)]
pub struct VecMetrics {
    pub records: Vec<(u64, TrainStage, f64)>,
}

impl MetricsSink for VecMetrics {
    fn record(&mut self, step: u64, stage: TrainStage, loss: f64, _wallclock_ms: f64) {
        self.records.push((step, stage, loss));
    }
}

/// Mask of exactly `floor(fraction * n)` positions chosen uniformly without
/// replacement.
pub fn random_mask(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let count = (fraction * n as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    for k in 0..count.min(n) {
        let j = rng.random_range(k..n);
        indices.swap(k, j);
    }
    let mut mask = vec![false; n];
    for &i in &indices[..count.min(n)] {
        mask[i] = true;
    }
    mask
}

/// Minibatch ADAM over the chosen stage. Batch gradients are evaluated in
/// parallel and reduced in example-index order, so the result is a pure
/// function of the config seed.
pub fn train(
    input: TrainInput<'_>,
    init: MrfParams,
    config: &TrainConfig,
    metrics: &mut dyn MetricsSink,
) -> Result<MrfParams> {
    config.validate()?;
    if input.len() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let stage = input.stage();
    let mut params = init;
    let mut state = AdamState::new(params.geometry(), params.vocab());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = params.geometry().n();

    for step in 0..config.steps {
        let started = Instant::now();
        let picks: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..input.len()))
            .collect();
        let results: Vec<Result<(f64, GradientBundle)>> = match &input {
            TrainInput::Pretrain(corpus) => {
                let batch: Vec<MaskedTokenGrid> = picks
                    .iter()
                    .map(|&i| {
                        let mask = random_mask(n, config.mask_fraction, &mut rng);
                        MaskedTokenGrid::new(corpus[i].clone(), mask)
                    })
                    .collect::<Result<_>>()?;
                batch
                    .par_iter()
                    .map(|example| pretrain_loss(&params, example, config))
                    .collect()
            }
            TrainInput::Distill(examples) => picks
                .par_iter()
                .map(|&i| distill_loss(&params, &examples[i].logits, &examples[i].target, config))
                .collect(),
        };
        let mut mean_loss = 0.0;
        let mut mean_grads = GradientBundle::zeros(params.geometry(), params.vocab());
        for r in results {
            let (loss, grads) = r?;
            mean_loss += loss;
            mean_grads.add_assign(&grads);
        }
        let scale = 1.0 / config.batch_size as f64;
        mean_loss *= scale;
        mean_grads.scale(scale);
        let (next_params, next_state) = adam_step(&params, &mean_grads, &state, config)?;
        params = next_params;
        state = next_state;
        metrics.record(
            step as u64,
            stage,
            mean_loss,
            started.elapsed().as_secs_f64() * 1e3,
        );
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrf::mean_field_infer;
    use crate::types::GridGeometry;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn random_instance(
        geometry: GridGeometry,
        vocab: VocabSpec,
        seed: u64,
    ) -> (MrfParams, LogitField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wdist = Normal::new(0.0, 0.3).unwrap();
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

    /// Central finite differences of a scalar loss over both weight matrices.
    fn fd_weight_grads(
        loss: impl Fn(&MrfParams) -> f64,
        params: &MrfParams,
        h: f64,
    ) -> (Array2<f64>, Array2<f64>) {
        let perturbed = |ws: Array2<f64>, wc: Array2<f64>| {
            MrfParams::new(params.geometry(), params.vocab(), ws, wc).unwrap()
        };
        let n = params.geometry().n();
        let v = params.vocab().size();
        let mut d_ws = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut plus = params.w_spatial().clone();
                plus[[i, j]] += h;
                let mut minus = params.w_spatial().clone();
                minus[[i, j]] -= h;
                let lp = loss(&perturbed(plus, params.w_label().clone()));
                let lm = loss(&perturbed(minus, params.w_label().clone()));
                d_ws[[i, j]] = (lp - lm) / (2.0 * h);
            }
        }
        let mut d_wc = Array2::zeros((v, v));
        for i in 0..v {
            for j in 0..v {
                let mut plus = params.w_label().clone();
                plus[[i, j]] += h;
                let mut minus = params.w_label().clone();
                minus[[i, j]] -= h;
                let lp = loss(&perturbed(params.w_spatial().clone(), plus));
                let lm = loss(&perturbed(params.w_spatial().clone(), minus));
                d_wc[[i, j]] = (lp - lm) / (2.0 * h);
            }
        }
        (d_ws, d_wc)
    }

    fn assert_grads_close(analytic: &Array2<f64>, reference: &Array2<f64>) {
        for (idx, (&a, &r)) in analytic.iter().zip(reference.iter()).enumerate() {
            if r.abs() < 1e-6 {
                assert!((a - r).abs() <= 1e-6, "entry {idx}: {a} vs {r}");
            } else {
                let rel = (a - r).abs() / r.abs();
                assert!(rel <= 1e-4, "entry {idx}: {a} vs {r}, rel {rel}");
            }
        }
    }

    #[test]
    fn zero_loss_grad_gives_zero_bundle() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 1);
        let zeros = Array2::zeros((4, 3));
        let bundle = mean_field_backward(&params, &logits, 3, &zeros).unwrap();
        assert_eq!(bundle.d_w_spatial.sum(), 0.0);
        assert_eq!(bundle.d_w_label.sum(), 0.0);
        assert_eq!(bundle.d_logits.sum(), 0.0);
    }

    #[test]
    fn zero_label_matrix_blocks_spatial_gradient() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (mut_params, logits) = random_instance(g, v, 2);
        let params = MrfParams::new(
            g,
            v,
            mut_params.w_spatial().clone(),
            Array2::zeros((3, 3)),
        )
        .unwrap();
        let grad = Array2::from_elem((4, 3), 0.5);
        let bundle = mean_field_backward(&params, &logits, 1, &grad).unwrap();
        assert_eq!(bundle.d_w_spatial.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert!(bundle.d_w_label.iter().map(|v| v.abs()).sum::<f64>() > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_linear_loss() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let weight = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        for iters in [1, 2, 3] {
            let bundle = mean_field_backward(&params, &logits, iters, &weight).unwrap();
            let loss = |p: &MrfParams| {
                let q = mean_field_infer(p, &logits, iters).unwrap();
                (q.values() * &weight).sum()
            };
            let (fd_ws, fd_wc) = fd_weight_grads(loss, &params, 1e-3);
            assert_grads_close(&bundle.d_w_spatial, &fd_ws);
            assert_grads_close(&bundle.d_w_label, &fd_wc);
        }
    }

    #[test]
    fn backward_logit_gradient_matches_finite_differences() {
        let g = GridGeometry::new(1, 3).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let weight = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() - 0.5);
        let iters = 2;
        let bundle = mean_field_backward(&params, &logits, iters, &weight).unwrap();
        let h = 1e-3;
        let mut fd = Array2::zeros((3, 3));
        for i in 0..3 {
            for k in 0..3 {
                let mut plus = logits.values().clone();
                plus[[i, k]] += h;
                let mut minus = logits.values().clone();
                minus[[i, k]] -= h;
                let lp = {
                    let f = LogitField::new(g, v, plus).unwrap();
                    (mean_field_infer(&params, &f, iters).unwrap().values() * &weight).sum()
                };
                let lm = {
                    let f = LogitField::new(g, v, minus).unwrap();
                    (mean_field_infer(&params, &f, iters).unwrap().values() * &weight).sum()
                };
                fd[[i, k]] = (lp - lm) / (2.0 * h);
            }
        }
        assert_grads_close(&bundle.d_logits, &fd);
    }

    #[test]
    fn pretrain_loss_gradients_match_finite_differences() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, _) = random_instance(g, v, 5);
        let grid = TokenGrid::new(g, vec![0, 2, 1, 1], &v).unwrap();
        let masked =
            MaskedTokenGrid::new(grid, vec![true, false, true, false]).unwrap();
        let config = TrainConfig {
            num_iterations_mf: 2,
            ..TrainConfig::default()
        };
        let (_, bundle) = pretrain_loss(&params, &masked, &config).unwrap();
        let loss = |p: &MrfParams| pretrain_loss(p, &masked, &config).unwrap().0;
        let (fd_ws, fd_wc) = fd_weight_grads(loss, &params, 1e-3);
        assert_grads_close(&bundle.d_w_spatial, &fd_ws);
        assert_grads_close(&bundle.d_w_label, &fd_wc);
    }

    #[test]
    fn distill_loss_gradients_match_finite_differences() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let (params, logits) = random_instance(g, v, 6);
        let target = TokenGrid::new(g, vec![2, 0, 1, 0], &v).unwrap();
        let config = TrainConfig {
            num_iterations_mf: 2,
            ..TrainConfig::default()
        };
        let (_, bundle) = distill_loss(&params, &logits, &target, &config).unwrap();
        let loss = |p: &MrfParams| distill_loss(p, &logits, &target, &config).unwrap().0;
        let (fd_ws, fd_wc) = fd_weight_grads(loss, &params, 1e-3);
        assert_grads_close(&bundle.d_w_spatial, &fd_ws);
        assert_grads_close(&bundle.d_w_label, &fd_wc);
    }

    #[test]
    fn pretrain_all_masked_zero_params_is_log_v() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(4).unwrap();
        let params = MrfParams::zeros(g, v);
        let grid = TokenGrid::new(g, vec![1, 2, 3, 0], &v).unwrap();
        let masked = MaskedTokenGrid::new(grid, vec![true; 4]).unwrap();
        let (loss, _) = pretrain_loss(&params, &masked, &TrainConfig::default()).unwrap();
        assert_abs_diff_eq!(loss, 4.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn pretrain_requires_masked_positions() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let params = MrfParams::zeros(g, v);
        let grid = TokenGrid::new(g, vec![0, 1], &v).unwrap();
        let masked = MaskedTokenGrid::new(grid, vec![false, false]).unwrap();
        assert!(matches!(
            pretrain_loss(&params, &masked, &TrainConfig::default()),
            Err(Error::NoMaskedPositions)
        ));
    }

    #[test]
    fn distill_zero_loss_on_matching_onehot() {
        // At large pinned logits the marginals are numerically one-hot on the
        // target, so the loss collapses toward zero.
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(3).unwrap();
        let params = MrfParams::zeros(g, v);
        let target = TokenGrid::new(g, vec![1, 2], &v).unwrap();
        let mut values = Array2::zeros((2, 3));
        values[[0, 1]] = 50.0;
        values[[1, 2]] = 50.0;
        let logits = LogitField::new(g, v, values).unwrap();
        let (loss, _) = distill_loss(&params, &logits, &target, &TrainConfig::default()).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn mask_rule_floor_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = random_mask(256, 0.20, &mut rng);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 51);
        let mask2 = random_mask(10, 0.25, &mut rng);
        assert_eq!(mask2.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let params = MrfParams::zeros(g, v);
        let config = TrainConfig::default();
        let mut grads = GradientBundle::zeros(g, v);
        grads.d_w_spatial[[0, 1]] = 0.7;
        grads.d_w_label[[1, 0]] = -0.2;
        let state = AdamState::new(g, v);
        let (next, state) = adam_step(&params, &grads, &state, &config).unwrap();
        assert_eq!(state.step_count(), 1);
        let lr = config.learning_rate;
        let eps = config.adam_epsilon;
        assert_abs_diff_eq!(
            next.w_spatial()[[0, 1]],
            -lr * 0.7 / (0.7 + eps),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            next.w_label()[[1, 0]],
            lr * 0.2 / (0.2 + eps),
            epsilon = 1e-12
        );
    }

    #[test]
    fn adam_zero_grads_keep_params() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let params = MrfParams::init_training(g, v, 1);
        let grads = GradientBundle::zeros(g, v);
        let state = AdamState::new(g, v);
        let (next, state) = adam_step(&params, &grads, &state, &TrainConfig::default()).unwrap();
        assert_eq!(next.w_spatial(), params.w_spatial());
        assert_eq!(next.w_label(), params.w_label());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_shrinks_quadratic() {
        // Entries start well above the step size so every update moves
        // strictly toward zero (an ADAM step never exceeds the learning rate).
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let mut params = MrfParams::new(
            g,
            v,
            Array2::from_shape_fn((2, 2), |(i, j)| if (i + j) % 2 == 0 { 0.5 } else { -0.4 }),
            Array2::from_elem((2, 2), 0.6),
        )
        .unwrap();
        let mut state = AdamState::new(g, v);
        let config = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let norm = |p: &MrfParams| {
            (p.w_spatial().iter().map(|x| x * x).sum::<f64>()
                + p.w_label().iter().map(|x| x * x).sum::<f64>())
            .sqrt()
        };
        let mut prev = norm(&params);
        for _ in 0..100 {
            let grads = GradientBundle {
                d_w_spatial: params.w_spatial() * 2.0,
                d_w_label: params.w_label() * 2.0,
                d_logits: Array2::zeros((2, 2)),
            };
            let (p, s) = adam_step(&params, &grads, &state, &config).unwrap();
            params = p;
            state = s;
            let cur = norm(&params);
            assert!(cur < prev, "norm should strictly decrease");
            prev = cur;
        }
    }

    #[test]
    fn train_zero_steps_returns_init() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let corpus = vec![TokenGrid::new(g, vec![0, 1, 1, 0], &v).unwrap()];
        let init = MrfParams::init_training(g, v, 9);
        let config = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(
            TrainInput::Pretrain(&corpus),
            init.clone(),
            &config,
            &mut NullMetrics,
        )
        .unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn train_is_seed_deterministic() {
        let g = GridGeometry::new(2, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let corpus: Vec<TokenGrid> = (0..4)
            .map(|i| {
                TokenGrid::new(
                    g,
                    (0..4).map(|j| (((i + j) % 2) as u16)).collect(),
                    &v,
                )
                .unwrap()
            })
            .collect();
        let config = TrainConfig {
            steps: 20,
            batch_size: 3,
            mask_fraction: 0.5,
            num_iterations_mf: 2,
            seed: 1234,
            ..TrainConfig::default()
        };
        let run = || {
            train(
                TrainInput::Pretrain(&corpus),
                MrfParams::init_training(g, v, 7),
                &config,
                &mut NullMetrics,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.w_spatial(), b.w_spatial());
        assert_eq!(a.w_label(), b.w_label());
    }

    #[test]
    fn train_rejects_empty_corpus() {
        let g = GridGeometry::new(1, 2).unwrap();
        let v = VocabSpec::new(2).unwrap();
        let corpus: Vec<TokenGrid> = vec![];
        let err = train(
            TrainInput::Pretrain(&corpus),
            MrfParams::zeros(g, v),
            &TrainConfig::default(),
            &mut NullMetrics,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
    }

    #[test]
    fn metrics_lines_format() {
        let mut buf = Vec::new();
        {
            let mut sink = TsvMetrics::new(&mut buf);
            sink.record(3, TrainStage::Pretrain, 0.5, 12.25);
        }
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line, "3\tpretrain\t0.5\t12.250\n");
    }
}
