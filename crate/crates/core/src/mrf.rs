//! Energy model over token grids and the parallel mean-field inference loop.
//!
//! The energy of an assignment x is
//!
//! ```text
//! E(x) = sum_i -f_i(x_i)  +  sum_i sum_j -c(x_i, x_j) * s(i, j)
//! ```
//!
//! with both sums over the full ordered index range, including i = j. The
//! assignment probability is exp(-E(x)) / Z.
//!
//! Inference refines per-location marginals Q in parallel:
//!
//! ```text
//! Q <- softmax(f)                     (rows)
//! repeat num_iterations times:
//!   Q <- W^s Q                        (spatial mixing)
//!   Q_i(k) <- sum_k' W^c[k, k'] Q_i(k')   (label mixing)
//!   Q <- Q + f
//!   Q <- softmax(Q)                   (rows)
//! ```
//!
//! Everything here is a pure function of its inputs: fixed inputs give
//! bit-identical outputs across runs.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{LogitField, MarginalField, MrfParams, TokenGrid};

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
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

fn check_assignment(params: &MrfParams, assignment: &TokenGrid) -> Result<()> {
    if assignment.geometry() != params.geometry() {
        return Err(Error::DimensionMismatch(
            "assignment does not match parameter geometry".to_string(),
        ));
    }
    assignment.validate(&params.vocab())
}

/// Energy of a complete assignment: unaries plus all ordered pairwise terms.
pub fn energy(params: &MrfParams, logits: &LogitField, assignment: &TokenGrid) -> Result<f64> {
    params.check_compatible(logits)?;
    check_assignment(params, assignment)?;
    let f = logits.values();
    let ws = params.w_spatial();
    let wc = params.w_label();
    let labels = assignment.labels();
    let n = labels.len();
    let mut unary = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        unary -= f[[i, label as usize]];
    }
    let mut pairwise = 0.0;
    for i in 0..n {
        let xi = labels[i] as usize;
        for j in 0..n {
            let xj = labels[j] as usize;
            pairwise -= wc[[xi, xj]] * ws[[i, j]];
        }
    }
    Ok(unary + pairwise)
}

/// Log of the unnormalized Gibbs probability, `-E(x)`.
pub fn log_unnormalized_prob(
    params: &MrfParams,
    logits: &LogitField,
    assignment: &TokenGrid,
) -> Result<f64> {
    Ok(-energy(params, logits, assignment)?)
}

/// Per-iteration forward activations kept for the backward pass.
pub(crate) struct MeanFieldTrace {
    /// q[0] = softmax(f); q[t] = output of iteration t. Length iters + 1.
    pub qs: Vec<Array2<f64>>,
    /// Spatially mixed activations per iteration (input to label mixing).
    pub spatial: Vec<Array2<f64>>,
}

pub(crate) fn mean_field_forward(
    params: &MrfParams,
    logits: &LogitField,
    num_iterations: usize,
) -> Result<MeanFieldTrace> {
    params.check_compatible(logits)?;
    let f = logits.values();
    let ws = params.w_spatial();
    let wc = params.w_label();
    let mut qs = Vec::with_capacity(num_iterations + 1);
    let mut spatial = Vec::with_capacity(num_iterations);
    qs.push(softmax_rows(f));
    for iter in 0..num_iterations {
        let q = &qs[iter];
        let mixed = ws.dot(q);
        let labeled = mixed.dot(&wc.t());
        if labeled.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mean-field iteration {} produced a non-finite intermediate",
                iter + 1
            )));
        }
        let next = softmax_rows(&(&labeled + f));
        spatial.push(mixed);
        qs.push(next);
    }
    Ok(MeanFieldTrace { qs, spatial })
}

/// Parallel mean-field inference; `num_iterations = 0` returns `softmax(f)`.
pub fn mean_field_infer(
    params: &MrfParams,
    logits: &LogitField,
    num_iterations: usize,
) -> Result<MarginalField> {
    let trace = mean_field_forward(params, logits, num_iterations)?;
    let q = trace.qs.into_iter().next_back().expect("at least one state");
    MarginalField::new(logits.geometry(), logits.vocab(), q)
}

/// Per-location argmax of the marginals; ties break toward the lowest label.
pub fn map_decode(q: &MarginalField) -> TokenGrid {
    let values = q.values();
    let labels = values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u16
        })
        .collect();
    TokenGrid::new(q.geometry(), labels, &q.vocab()).expect("argmax labels are in range")
}

/// Variational free energy `F(Q) = E_Q[E] - H(Q)`, with `0 log 0 = 0`.
pub fn variational_free_energy(
    params: &MrfParams,
    logits: &LogitField,
    q: &MarginalField,
) -> Result<f64> {
    params.check_compatible(logits)?;
    if q.geometry() != params.geometry() || q.vocab() != params.vocab() {
        return Err(Error::DimensionMismatch(
            "marginals do not match parameter geometry/vocabulary".to_string(),
        ));
    }
    let f = logits.values();
    let qv = q.values();
    let unary = -(qv * f).sum();
    // sum_ij s(i,j) * [Q W^c Q^T]_ij
    let qc = qv.dot(params.w_label());
    let joint = qc.dot(&qv.t());
    let pairwise = -(params.w_spatial() * &joint).sum();
    let neg_entropy: f64 = qv
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    Ok(unary + pairwise + neg_entropy)
}
