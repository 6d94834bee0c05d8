//! Hash coding layers.
//!
//! Each training-time layer is a forward rule `U -> B` plus a backward rule
//! mapping the upstream gradient `dL/dB` to `dL/dU`:
//!
//! | variant      | forward (training)                    | backward                      |
//! |--------------|---------------------------------------|-------------------------------|
//! | `BiHalf`     | per bit, top ⌈M/2⌉ of the batch → +1   | `dL/dB + γ (U - B)`           |
//! | `Sign`       | `sign(U)`                             | `dL/dB` (straight-through)    |
//! | `MedianEma`  | `sign(U - t)`, `t` = EMA of medians    | `dL/dB` (straight-through)    |
//! | `TanhCont`   | `tanh(β U)`                           | `dL/dB · β (1 - tanh²(β U))`  |
//! | `Relaxation` | `U`                                   | `dL/dB`                       |
//!
//! At inference every variant is the deterministic `sign(U)` (shifted by the
//! EMA median for `MedianEma`), so a code never depends on which other items
//! share its batch. `sign(0) = +1` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argsort_stable, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerVariant {
    BiHalf,
    Sign,
    MedianEma,
    TanhCont,
    Relaxation,
}

impl QuantizerVariant {
    pub fn name(self) -> &'static str {
        match self {
            QuantizerVariant::BiHalf => "bi-half",
            QuantizerVariant::Sign => "sign",
            QuantizerVariant::MedianEma => "median-ema",
            QuantizerVariant::TanhCont => "tanh-cont",
            QuantizerVariant::Relaxation => "relaxation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub variant: QuantizerVariant,
    /// Scale of the proxy term `γ (U - B)`; only read by `BiHalf`.
    pub gamma: f64,
    /// Sharpness of `tanh(β U)`.
    pub beta: f64,
    pub ema_decay: f64,
}

impl QuantizerConfig {
    pub const DEFAULT_BETA: f64 = 1.0;
    pub const DEFAULT_EMA_DECAY: f64 = 0.9;

    pub fn new(variant: QuantizerVariant) -> Self {
        Self {
            variant,
            gamma: 0.0,
            beta: Self::DEFAULT_BETA,
            ema_decay: Self::DEFAULT_EMA_DECAY,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// `γ = 3 / (N · K)` for `N` training items and `K` bits.
    pub fn default_gamma(n_train: usize, bits: usize) -> f64 {
        3.0 / (n_train as f64 * bits as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Running per-bit median estimate for the `MedianEma` variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaMedianState {
    pub medians: Vec<f64>,
    pub updates: u64,
}

impl EmaMedianState {
    pub fn zeros(bits: usize) -> Self {
        Self {
            medians: vec![0.0; bits],
            updates: 0,
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn require_batch(u: &Matrix, op: &'static str) -> Result<()> {
    if u.rows() == 0 {
        return Err(Error::invalid(format!("{op} needs at least one row")));
    }
    if u.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// Balanced assignment: per column the ⌈M/2⌉ largest entries become +1.
///
/// Ordering is by value descending, ties by lower row index first, so the
/// result is fully determined by `U`.
pub fn bihalf_forward(u: &Matrix) -> Result<Matrix> {
    require_batch(u, "bihalf_forward")?;
    let (m, k) = u.shape();
    let positives = m.div_ceil(2);
    let mut b = Matrix::filled(m, k, -1.0);
    let mut column = vec![0.0; m];
    for c in 0..k {
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = -u.get(r, c);
        }
        for &r in argsort_stable(&column)?.iter().take(positives) {
            b.set(r, c, 1.0);
        }
    }
    Ok(b)
}

/// `dL/dU = dL/dB + γ (U - B)`, elementwise.
pub fn bihalf_backward(grad_b: &Matrix, u: &Matrix, b: &Matrix, gamma: f64) -> Result<Matrix> {
    grad_b.ensure_same_shape(u, "bihalf_backward")?;
    grad_b.ensure_same_shape(b, "bihalf_backward")?;
    let data = grad_b
        .as_slice()
        .iter()
        .zip(u.as_slice().iter().zip(b.as_slice()))
        .map(|(&g, (&uv, &bv))| g + gamma * (uv - bv))
        .collect();
    Matrix::new(u.rows(), u.cols(), data)
}

pub fn sign_forward(u: &Matrix) -> Result<Matrix> {
    if u.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("sign_forward"));
    }
    Ok(u.map(sign))
}

/// Straight-through: the upstream gradient passes unchanged.
pub fn sign_backward(grad_b: &Matrix, u: &Matrix, b: &Matrix) -> Result<Matrix> {
    grad_b.ensure_same_shape(u, "sign_backward")?;
    grad_b.ensure_same_shape(b, "sign_backward")?;
    Ok(grad_b.clone())
}

/// Median of a column; the mean of the middle pair for even length.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn batch_medians(u: &Matrix) -> Vec<f64> {
    (0..u.cols()).map(|c| median(&mut u.column(c))).collect()
}

/// Folds one batch into the running medians.
///
/// A state with zero updates is seeded from the batch medians directly;
/// afterwards `t ← decay·t + (1 - decay)·median`.
pub fn median_ema_update(u: &Matrix, state: &mut EmaMedianState, decay: f64) -> Result<()> {
    require_batch(u, "median_ema_update")?;
    if state.medians.len() != u.cols() {
        return Err(Error::Shape {
            op: "median_ema_update",
            expected: (1, u.cols()),
            got: (1, state.medians.len()),
        });
    }
    let medians = batch_medians(u);
    if state.updates == 0 {
        state.medians = medians;
    } else {
        for (t, m) in state.medians.iter_mut().zip(medians) {
            *t = decay * *t + (1.0 - decay) * m;
        }
    }
    state.updates += 1;
    Ok(())
}

pub fn median_ema_encode(u: &Matrix, state: &EmaMedianState) -> Result<Matrix> {
    if state.medians.len() != u.cols() {
        return Err(Error::Shape {
            op: "median_ema_encode",
            expected: (1, u.cols()),
            got: (1, state.medians.len()),
        });
    }
    let mut b = u.clone();
    for row in 0..b.rows() {
        for (v, &t) in b.row_mut(row).iter_mut().zip(&state.medians) {
            *v = sign(*v - t);
        }
    }
    Ok(b)
}

pub fn tanh_continuation_forward(u: &Matrix, beta: f64) -> Matrix {
    u.map(|v| (beta * v).tanh())
}

pub fn tanh_continuation_backward(grad_b: &Matrix, u: &Matrix, beta: f64) -> Result<Matrix> {
    grad_b.zip_map(u, "tanh_continuation_backward", |g, v| {
        let t = (beta * v).tanh();
        g * beta * (1.0 - t * t)
    })
}

pub fn relaxation_forward(u: &Matrix) -> Matrix {
    u.clone()
}

pub fn relaxation_backward(grad_b: &Matrix, u: &Matrix) -> Result<Matrix> {
    grad_b.ensure_same_shape(u, "relaxation_backward")?;
    Ok(grad_b.clone())
}

/// Deterministic test-time codes.
pub fn inference_encode(u: &Matrix, config: &QuantizerConfig, state: Option<&EmaMedianState>) -> Result<Matrix> {
    match config.variant {
        QuantizerVariant::MedianEma => {
            let state = state.ok_or_else(|| Error::invalid("median-EMA encoding requires the running median state"))?;
            if u.as_slice().iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("inference_encode"));
            }
            median_ema_encode(u, state)
        }
        _ => sign_forward(u),
    }
}

/// Training-time quantizer: a config plus the state it carries across steps.
#[derive(Clone, Debug)]
pub struct Quantizer {
    config: QuantizerConfig,
    ema: Option<EmaMedianState>,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig, bits: usize) -> Result<Self> {
        config.validate()?;
        let ema = (config.variant == QuantizerVariant::MedianEma).then(|| EmaMedianState::zeros(bits));
        Ok(Self { config, ema })
    }

    pub fn with_state(config: QuantizerConfig, ema: Option<EmaMedianState>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, ema })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    pub fn ema_state(&self) -> Option<&EmaMedianState> {
        self.ema.as_ref()
    }

    /// Training forward pass. For `MedianEma` this also folds the batch into
    /// the running medians before thresholding.
    pub fn forward_train(&mut self, u: &Matrix) -> Result<Matrix> {
        match self.config.variant {
            QuantizerVariant::BiHalf => bihalf_forward(u),
            QuantizerVariant::Sign => sign_forward(u),
            QuantizerVariant::MedianEma => {
                let decay = self.config.ema_decay;
                let state = self.ema.get_or_insert_with(|| EmaMedianState::zeros(u.cols()));
                median_ema_update(u, state, decay)?;
                median_ema_encode(u, state)
            }
            QuantizerVariant::TanhCont => {
                u.ensure_finite("tanh_continuation_forward")?;
                Ok(tanh_continuation_forward(u, self.config.beta))
            }
            QuantizerVariant::Relaxation => {
                u.ensure_finite("relaxation_forward")?;
                Ok(relaxation_forward(u))
            }
        }
    }

    /// Maps `dL/dB` to `dL/dU` using the `U`, `B` pair of the same forward.
    pub fn backward(&self, grad_b: &Matrix, u: &Matrix, b: &Matrix) -> Result<Matrix> {
        match self.config.variant {
            QuantizerVariant::BiHalf => bihalf_backward(grad_b, u, b, self.config.gamma),
            QuantizerVariant::Sign | QuantizerVariant::MedianEma => sign_backward(grad_b, u, b),
            QuantizerVariant::TanhCont => tanh_continuation_backward(grad_b, u, self.config.beta),
            QuantizerVariant::Relaxation => relaxation_backward(grad_b, u),
        }
    }

    pub fn encode(&self, u: &Matrix) -> Result<Matrix> {
        inference_encode(u, &self.config, self.ema.as_ref())
    }
}
