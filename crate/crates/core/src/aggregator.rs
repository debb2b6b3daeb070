//! Softmax-weighted summation of layer representations.
//!
//! With `w = softmax(λ)`:
//!
//! * finetuned mode: `h*_t = Σ_{i=1..L} w_i · h_{i,t}`
//! * pretrained mode: `h*_t = Σ_{i=1..L} w_i · h_{i,t} + w_{L+1} · LN(h_{L,t})`
//!
//! where `LN` is layer normalization over the feature dimension with
//! population variance, `(h − μ) / √(σ² + ε) · γ + β`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Whether the frontend was used as pretrained (extra final-norm term) or
/// finetuned (encoder layers only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationMode {
    Pretrained,
    Finetuned,
}

impl AggregationMode {
    /// Number of λ entries for `num_layers` encoder layers.
    pub fn weight_count(self, num_layers: usize) -> usize {
        match self {
            AggregationMode::Pretrained => num_layers + 1,
            AggregationMode::Finetuned => num_layers,
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Pretrained => "pretrained",
            AggregationMode::Finetuned => "finetuned",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pretrained" => Ok(AggregationMode::Pretrained),
            "finetuned" => Ok(AggregationMode::Finetuned),
            other => Err(Error::arg(format!(
                "unknown mode `{other}` (expected pretrained or finetuned)"
            ))),
        }
    }
}

/// Trainable layer logits plus the fixed layer-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    mode: AggregationMode,
    lambdas: Vec<T>,
    /// `None` means γ = 1.
    ln_gamma: Option<Vec<T>>,
    /// `None` means β = 0.
    ln_beta: Option<Vec<T>>,
    ln_eps: T,
}

impl<T: Scalar> LayerWeights<T> {
    /// All-zero λ (uniform weights) for `num_layers` encoder layers.
    pub fn uniform(mode: AggregationMode, num_layers: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::arg("need at least one layer"));
        }
        Self::new(mode, vec![T::zero(); mode.weight_count(num_layers)])
    }

    pub fn new(mode: AggregationMode, lambdas: Vec<T>) -> Result<Self> {
        let min = mode.weight_count(1);
        if lambdas.len() < min {
            return Err(Error::arg(format!(
                "{mode} mode needs at least {min} lambdas, got {}",
                lambdas.len()
            )));
        }
        if lambdas.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("lambdas must be finite"));
        }
        Ok(Self {
            mode,
            lambdas,
            ln_gamma: None,
            ln_beta: None,
            ln_eps: T::of(DEFAULT_LN_EPS),
        })
    }

    /// Supply the frontend's final layer-norm affine parameters.
    pub fn with_layer_norm(mut self, gamma: Vec<T>, beta: Vec<T>, eps: T) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::arg("gamma and beta lengths differ"));
        }
        self.ln_gamma = Some(gamma);
        self.ln_beta = Some(beta);
        self.with_eps(eps)
    }

    pub fn with_eps(mut self, eps: T) -> Result<Self> {
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::arg("layer-norm eps must be positive and finite"));
        }
        self.ln_eps = eps;
        Ok(self)
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn ln_eps(&self) -> T {
        self.ln_eps
    }

    /// Number of encoder layers these weights aggregate.
    pub fn num_layers(&self) -> usize {
        match self.mode {
            AggregationMode::Pretrained => self.lambdas.len() - 1,
            AggregationMode::Finetuned => self.lambdas.len(),
        }
    }

    /// Normalized weights `softmax(λ)`.
    pub fn weights(&self) -> Vec<T> {
        softmax_weights(&self.lambdas).expect("lambdas non-empty by construction")
    }

    /// Apply a gradient step to λ. Used by the trainer only.
    pub(crate) fn lambdas_mut(&mut self) -> &mut [T] {
        &mut self.lambdas
    }

    pub fn layer_norm_frame(&self, h: &[T]) -> Vec<T> {
        layer_norm(h, self.ln_gamma.as_deref(), self.ln_beta.as_deref(), self.ln_eps)
    }

    /// Text form: `mode=…`, `eps=…`, then the space-separated λ values.
    pub fn to_text(&self) -> String {
        let lambdas: Vec<String> = self.lambdas.iter().map(|v| v.to_string()).collect();
        format!("mode={}\neps={}\n{}\n", self.mode, self.ln_eps, lambdas.join(" "))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(format!("weights file missing `{key}` line")))?;
            match key {
                "lambdas" => Ok(line.to_string()),
                _ => line
                    .strip_prefix(key)
                    .and_then(|r| r.strip_prefix('='))
                    .map(str::to_string)
                    .ok_or_else(|| Error::format(format!("expected `{key}=…`, got `{line}`"))),
            }
        };
        let mode: AggregationMode = field("mode")?.parse()?;
        let eps_text = field("eps")?;
        let eps: T = eps_text
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("bad eps `{eps_text}`")))?;
        let lambdas = field("lambdas")?
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<T>()
                    .map_err(|_| Error::format(format!("bad lambda `{tok}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        Self::new(mode, lambdas)?.with_eps(eps)
    }
}

/// `w_i = exp(λ_i) / Σ_j exp(λ_j)`, with max-subtraction.
pub fn softmax_weights<T: Scalar>(lambdas: &[T]) -> Result<Vec<T>> {
    if lambdas.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    let max = lambdas.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = lambdas.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Layer normalization of one frame. `None` for γ/β means the identity affine.
pub fn layer_norm<T: Scalar>(h: &[T], gamma: Option<&[T]>, beta: Option<&[T]>, eps: T) -> Vec<T> {
    let n = T::of_usize(h.len());
    let mean = h.iter().copied().sum::<T>() / n;
    let var = h.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = (var + eps).sqrt().recip();
    h.iter()
        .enumerate()
        .map(|(d, &v)| {
            let g = gamma.map_or(T::one(), |g| g[d]);
            let b = beta.map_or(T::zero(), |b| b[d]);
            (v - mean) * inv * g + b
        })
        .collect()
}

fn check_layers<T: Scalar>(layers: &[Matrix<T>], weights: &LayerWeights<T>) -> Result<(usize, usize)> {
    let first = layers.first().ok_or_else(|| Error::arg("no layers given"))?;
    let (t, d) = (first.rows(), first.cols());
    if layers.iter().any(|m| m.rows() != t || m.cols() != d) {
        return Err(Error::arg("layers disagree on frame count or dimension"));
    }
    if weights.num_layers() != layers.len() {
        return Err(Error::arg(format!(
            "{} weights ({} lambdas) for {} layers",
            weights.mode,
            weights.lambdas.len(),
            layers.len()
        )));
    }
    if let Some(g) = &weights.ln_gamma {
        if g.len() != d {
            return Err(Error::arg("layer-norm gamma length differs from feature dim"));
        }
    }
    Ok((t, d))
}

fn normalized_last_layer<T: Scalar>(layers: &[Matrix<T>], weights: &LayerWeights<T>) -> Matrix<T> {
    let last = layers.last().expect("checked non-empty");
    let mut out = Matrix::zeros(last.rows(), last.cols());
    for t in 0..last.rows() {
        out.row_mut(t).copy_from_slice(&weights.layer_norm_frame(last.row(t)));
    }
    out
}

/// Aggregate `L` frame-aligned `T × D` layer matrices into one `T × D` matrix.
pub fn weighted_sum<T: Scalar>(layers: &[Matrix<T>], weights: &LayerWeights<T>) -> Result<Matrix<T>> {
    let (t, d) = check_layers(layers, weights)?;
    let w = weights.weights();
    let mut out = Matrix::zeros(t, d);
    for (layer, &wi) in layers.iter().zip(&w) {
        for (o, &h) in out.as_mut_slice().iter_mut().zip(layer.as_slice()) {
            *o += wi * h;
        }
    }
    if weights.mode == AggregationMode::Pretrained {
        let wn = w[layers.len()];
        let normed = normalized_last_layer(layers, weights);
        for (o, &h) in out.as_mut_slice().iter_mut().zip(normed.as_slice()) {
            *o += wn * h;
        }
    }
    Ok(out)
}

/// Gradient of a loss with respect to λ, given `upstream = ∂loss/∂h*`.
///
/// With `s_i = Σ_t ⟨upstream_t, h_{i,t}⟩` (the final-norm term is layer
/// `L+1` in pretrained mode), `∂loss/∂λ_k = w_k (s_k − Σ_i w_i s_i)`.
pub fn weighted_sum_grad<T: Scalar>(
    layers: &[Matrix<T>],
    weights: &LayerWeights<T>,
    upstream: &Matrix<T>,
) -> Result<Vec<T>> {
    let (t, d) = check_layers(layers, weights)?;
    if upstream.rows() != t || upstream.cols() != d {
        return Err(Error::arg(format!(
            "upstream gradient is {}x{}, expected {t}x{d}",
            upstream.rows(),
            upstream.cols()
        )));
    }
    let dot = |m: &Matrix<T>| -> T {
        m.as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(&a, &b)| a * b)
            .sum()
    };
    let mut scores: Vec<T> = layers.iter().map(dot).collect();
    if weights.mode == AggregationMode::Pretrained {
        scores.push(dot(&normalized_last_layer(layers, weights)));
    }
    let w = weights.weights();
    let mean: T = w.iter().zip(&scores).map(|(&wi, &si)| wi * si).sum();
    Ok(w.iter().zip(&scores).map(|(&wi, &si)| wi * (si - mean)).collect())
}
