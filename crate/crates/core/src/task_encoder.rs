//! The task encoder: sparse label distributions from cosine similarity to
//! `K` row-orthonormal prototypes.
//!
//! Prototypes are derived from an unconstrained `K x d1` matrix by modified
//! Gram-Schmidt, and every stage (Gram-Schmidt, temperature scaling,
//! sparsemax) has a hand-written reverse pass so the outer optimizer can
//! differentiate the labeling with respect to the raw parameters.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivot norms below this make [`orthonormalize`] fail.
pub const MIN_PIVOT_NORM: f64 = 1e-10;

/// Euclidean projection of `z` onto the probability simplex, written into
/// `out`. Returns the support size.
pub fn sparsemax_into(z: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) -> usize {
    let threshold = sparsemax_threshold(z);
    let mut support = 0;
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        if v > threshold {
            *o = v - threshold;
            support += 1;
        } else {
            *o = 0.0;
        }
    }
    support
}

pub fn sparsemax(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut out = Array1::zeros(z.len());
    sparsemax_into(z, out.view_mut());
    out
}

/// Threshold `t` such that `max(z - t, 0)` sums to one.
fn sparsemax_threshold(z: ArrayView1<'_, f64>) -> f64 {
    let mut sorted: Vec<f64> = z.to_vec();
    // stable sort, descending
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut best_sum = sorted[0];
    let mut best_k = 1;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            best_k = i + 1;
            best_sum = cumsum;
        }
    }
    (best_sum - 1.0) / best_k as f64
}

/// `diag(s) - s s^T / |S|` with `s` the support indicator of `sparsemax(z)`.
pub fn sparsemax_jacobian(z: ArrayView1<'_, f64>) -> Array2<f64> {
    let p = sparsemax(z);
    let k = z.len();
    let support: Vec<bool> = p.iter().map(|&v| v > 0.0).collect();
    let size = support.iter().filter(|&&s| s).count() as f64;
    Array2::from_shape_fn(
        (k, k),
        |(i, j)| {
            if support[i] && support[j] {
                f64::from(u8::from(i == j)) - 1.0 / size
            } else {
                0.0
            }
        },
    )
}

/// Vector-Jacobian product through sparsemax, using the output `p` to
/// recover the support. The Jacobian is symmetric so this is also `J v`.
pub fn sparsemax_vjp(p: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) {
    let mut sum = 0.0;
    let mut size = 0usize;
    for (&pk, &vk) in p.iter().zip(v.iter()) {
        if pk > 0.0 {
            sum += vk;
            size += 1;
        }
    }
    let mean = sum / size.max(1) as f64;
    for ((o, &pk), &vk) in out.iter_mut().zip(p.iter()).zip(v.iter()) {
        *o = if pk > 0.0 { vk - mean } else { 0.0 };
    }
}

pub(crate) fn sparsemax_rows_in_place(logits: &mut Array2<f64>) {
    let mut buf = Array1::zeros(logits.ncols());
    for mut row in logits.axis_iter_mut(Axis(0)) {
        sparsemax_into(row.view(), buf.view_mut());
        row.assign(&buf);
    }
}

pub(crate) fn sparsemax_vjp_rows(probs: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, v), o) in probs.axis_iter(Axis(0)).zip(upstream.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0))) {
        sparsemax_vjp(p, v, o);
    }
    out
}

/// Forward record of a modified Gram-Schmidt pass, enough to run it backwards.
#[derive(Clone, Debug)]
pub struct GramSchmidtTape {
    q: Array2<f64>,
    pivots: Vec<f64>,
    /// `coeffs[[i, j]]` is the projection of row `i` onto `q_j` (`j < i`) as
    /// applied during the pass.
    coeffs: Array2<f64>,
}

/// Row-orthonormalizes `m` by modified Gram-Schmidt. The row span is kept.
pub fn orthonormalize(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    orthonormalize_with_tape(m).map(|(q, _)| q)
}

pub fn orthonormalize_with_tape(m: ArrayView2<'_, f64>) -> Result<(Array2<f64>, GramSchmidtTape)> {
    let (k, d) = m.dim();
    let mut q = m.to_owned();
    let mut pivots = vec![0.0; k];
    let mut coeffs = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..i {
            let (done, mut rest) = q.view_mut().split_at(Axis(0), i);
            let qj = done.row(j);
            let mut v = rest.row_mut(0);
            let c = qj.dot(&v);
            v.scaled_add(-c, &qj);
            coeffs[[i, j]] = c;
        }
        let mut v = q.row_mut(i);
        let norm = v.dot(&v).sqrt();
        if norm.is_nan() || norm < MIN_PIVOT_NORM {
            return Err(Error::Degenerate { row: i, pivot: norm });
        }
        v /= norm;
        pivots[i] = norm;
    }
    debug_assert_eq!(q.ncols(), d);
    let tape = GramSchmidtTape { q: q.clone(), pivots, coeffs };
    Ok((q, tape))
}

impl GramSchmidtTape {
    pub fn output(&self) -> &Array2<f64> {
        &self.q
    }

    /// Pulls a gradient with respect to the orthonormal rows back to the raw
    /// parameter matrix. Intermediate vectors are rebuilt from the stored
    /// projection coefficients rather than kept.
    pub fn backward(&self, q_bar: ArrayView2<'_, f64>) -> Array2<f64> {
        let (k, d) = self.q.dim();
        let mut q_bar = q_bar.to_owned();
        let mut m_bar = Array2::zeros((k, d));
        for i in (0..k).rev() {
            let qi = self.q.row(i);
            let r = self.pivots[i];
            let g = q_bar.row(i).to_owned();
            let mut a = (&g - &(&qi * qi.dot(&g))) / r;
            let mut v = &qi * r;
            for j in (0..i).rev() {
                let qj = self.q.row(j);
                let c = self.coeffs[[i, j]];
                // v was produced as v_prev - c q_j
                v.scaled_add(c, &qj);
                let qa = qj.dot(&a);
                let mut qbj = q_bar.row_mut(j);
                qbj.scaled_add(-c, &a);
                qbj.scaled_add(-qa, &v);
                a.scaled_add(-qa, &qj);
            }
            m_bar.row_mut(i).assign(&a);
        }
        m_bar
    }
}

/// Frobenius norm of `W W^T - I`.
pub fn orthonormality_defect(w: ArrayView2<'_, f64>) -> f64 {
    let gram = w.dot(&w.t());
    let mut acc = 0.0;
    for ((i, j), &v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        acc += (v - target) * (v - target);
    }
    acc.sqrt()
}

/// Trainable task encoder. `params` is unconstrained; prototypes are its
/// Gram-Schmidt orthonormalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "EncoderRecord", try_from = "EncoderRecord")]
pub struct TaskEncoder {
    params: Array2<f64>,
    gamma: f64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct EncoderRecord {
    K: usize,
    d1: usize,
    gamma: f64,
    M: Vec<f64>,
    seed: u64,
}

impl From<TaskEncoder> for EncoderRecord {
    fn from(e: TaskEncoder) -> Self {
        let (k, d1) = e.params.dim();
        EncoderRecord { K: k, d1, gamma: e.gamma, M: e.params.iter().copied().collect(), seed: e.seed }
    }
}

impl TryFrom<EncoderRecord> for TaskEncoder {
    type Error = Error;

    fn try_from(r: EncoderRecord) -> Result<Self> {
        let params =
            Array2::from_shape_vec((r.K, r.d1), r.M).map_err(|e| Error::Input(format!("encoder matrix: {e}")))?;
        TaskEncoder::new(params, r.gamma, r.seed)
    }
}

impl TaskEncoder {
    pub fn new(params: Array2<f64>, gamma: f64, seed: u64) -> Result<Self> {
        let (k, d1) = params.dim();
        if k == 0 || k > d1 {
            return Err(Error::Config(format!("need 1 <= K <= d1, got K={k}, d1={d1}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {gamma}")));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite encoder parameters".into()));
        }
        Ok(Self { params, gamma, seed })
    }

    /// Standard-normal draw, orthonormalized. Deterministic in `seed`.
    pub fn ortho_rand(k: usize, d1: usize, gamma: f64, seed: u64) -> Result<Self> {
        if k == 0 || k > d1 {
            return Err(Error::Config(format!("need 1 <= K <= d1, got K={k}, d1={d1}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = Array2::from_shape_simple_fn((k, d1), || StandardNormal.sample(&mut rng));
        let params = orthonormalize(draw.view())?;
        Self::new(params, gamma, seed)
    }

    pub fn k(&self) -> usize {
        self.params.nrows()
    }

    pub fn d1(&self) -> usize {
        self.params.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        assert!(gamma > 0.0, "temperature must be positive");
        self.gamma = gamma;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &Array2<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Array2<f64> {
        &mut self.params
    }

    pub fn prototypes(&self) -> Result<Array2<f64>> {
        orthonormalize(self.params.view())
    }

    /// Labels every row of `phi1_hat` (unit-norm rows).
    pub fn encode(&self, phi1_hat: ArrayView2<'_, f64>) -> Result<Labeling> {
        let w1 = self.prototypes()?;
        encode_with(w1.view(), self.gamma, phi1_hat).map(Labeling::from_probs)
    }
}

/// `sparsemax(x W1^T / gamma)` row by row.
pub fn encode_with(w1: ArrayView2<'_, f64>, gamma: f64, phi1_hat: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if phi1_hat.ncols() != w1.ncols() {
        return Err(Error::Input(format!("phi1 has dim {}, encoder expects {}", phi1_hat.ncols(), w1.ncols())));
    }
    let mut probs = phi1_hat.dot(&w1.t());
    probs /= gamma;
    sparsemax_rows_in_place(&mut probs);
    Ok(probs)
}

/// Soft labels on the simplex plus their argmax view.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    pub probs: Array2<f64>,
    pub hard: Vec<usize>,
}

impl Labeling {
    pub fn from_probs(probs: Array2<f64>) -> Self {
        let hard = probs.axis_iter(Axis(0)).map(argmax).collect();
        Self { probs, hard }
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
