//! Patch-level model alignment: distillation between successive models and
//! reconstruction of old-class features from current patch tokens.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vit::TokenBatch;

/// Denominators of the relative similarity delta below this are excluded.
/// It caps the delta at 200, so no retrieved weight can underflow to zero.
pub const DELTA_EPS: f64 = 1e-2;

/// `(π − arccos(−cos(a, b))) / π`: 0 for parallel vectors, 0.5 for
/// orthogonal ones, 1 for opposite ones.
///
/// Evaluated as `θ / π` with `θ = 2 atan2(‖â − b̂‖, ‖â + b̂‖)`, which keeps
/// full precision near parallel and anti-parallel inputs where `arccos`
/// loses about half the digits.
pub fn angular_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("angular_similarity", a.len(), b.len()));
    }
    let na = tensor::checked_norm("angular_similarity", a)?;
    let nb = tensor::checked_norm("angular_similarity", b)?;
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()) / std::f64::consts::PI)
}

/// Distance between the unit-normalized vectors, in `[0, 2]`.
pub fn hypersphere_drift(new: &[f64], old: &[f64]) -> Result<f64> {
    if new.len() != old.len() {
        return Err(Error::dim("hypersphere_drift", new.len(), old.len()));
    }
    let nn = tensor::checked_norm("hypersphere_drift", new)?;
    let no = tensor::checked_norm("hypersphere_drift", old)?;
    Ok(new
        .iter()
        .zip(old)
        .map(|(a, b)| (a / nn - b / no).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Tokens of the same image under the current model and the previous one.
#[derive(Clone, Debug)]
pub struct DriftPair {
    pub new_tokens: TokenBatch,
    pub old_tokens: TokenBatch,
}

impl DriftPair {
    pub fn new(new_tokens: TokenBatch, old_tokens: TokenBatch) -> Result<Self> {
        if new_tokens.tokens().shape() != old_tokens.tokens().shape() {
            return Err(Error::dim(
                "DriftPair",
                format!("{:?}", new_tokens.tokens().shape()),
                format!("{:?}", old_tokens.tokens().shape()),
            ));
        }
        Ok(Self { new_tokens, old_tokens })
    }
}

/// Distillation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdlVariant {
    /// Angular-weighted drift averaged over patch tokens.
    #[default]
    Patch,
    /// As `Patch`, averaged over the class token too. The class token's
    /// weight against itself is always 0, so it is given weight 1 instead.
    WithCls,
    /// Mean absolute difference over all raw token entries.
    FullTokenL1,
}

impl FromStr for PdlVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "with_cls" => Ok(Self::WithCls),
            "full_token_l1" => Ok(Self::FullTokenL1),
            other => Err(Error::usage(format!(
                "unknown distillation variant `{other}` (expected patch, with_cls or full_token_l1)"
            ))),
        }
    }
}

impl std::fmt::Display for PdlVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Patch => "patch",
            Self::WithCls => "with_cls",
            Self::FullTokenL1 => "full_token_l1",
        })
    }
}

/// Angular-weighted hypersphere drift, averaged over patch tokens.
pub fn pdl_loss(pair: &DriftPair) -> Result<f64> {
    pdl_variant_loss(pair, PdlVariant::Patch)
}

pub fn pdl_variant_loss(pair: &DriftPair, variant: PdlVariant) -> Result<f64> {
    let (new, old) = (&pair.new_tokens, &pair.old_tokens);
    match variant {
        PdlVariant::FullTokenL1 => {
            let (a, b) = (new.tokens().data(), old.tokens().data());
            Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
        }
        PdlVariant::Patch | PdlVariant::WithCls => {
            let cls = new.class_token();
            let mut total = 0.0;
            for j in 0..new.patch_count() {
                let p = new.patch_token(j);
                total += angular_similarity(cls, p)? * hypersphere_drift(p, old.patch_token(j))?;
            }
            let mut count = new.patch_count();
            if variant == PdlVariant::WithCls {
                total += hypersphere_drift(cls, old.class_token())?;
                count += 1;
            }
            Ok(total / count as f64)
        }
    }
}

/// Batched distillation loss on a tape, averaged over images.
///
/// `new` and `old` are `[B*(L+1), d]` token matrices; `old` should be a
/// constant. The angular weights are computed from the values of `new` and
/// enter as constants.
pub fn pdl_loss_tape(tape: &mut Tape, new: Var, old: Var, seq_len: usize, variant: PdlVariant) -> Result<Var> {
    let weights = pdl_weights(tape.value(new), seq_len, variant)?;
    pdl_loss_weighted(tape, new, old, seq_len, variant, &weights)
}

/// Per-token weights of the distilled rows of a `[B*(L+1), d]` token
/// matrix, in image-major order: the class token first when `variant`
/// includes it, then every patch token. Empty for the full-token variant.
pub fn pdl_weights(tokens: &Tensor, seq_len: usize, variant: PdlVariant) -> Result<Vec<f64>> {
    if seq_len == 0 || tokens.rows() % seq_len != 0 {
        return Err(Error::dim("pdl_weights", format!("multiple of {seq_len} rows"), tokens.rows()));
    }
    let mut weights = Vec::new();
    if variant == PdlVariant::FullTokenL1 {
        return Ok(weights);
    }
    for b in 0..tokens.rows() / seq_len {
        let cls = tokens.row(b * seq_len);
        if variant == PdlVariant::WithCls {
            weights.push(1.0);
        }
        for j in 1..seq_len {
            weights.push(angular_similarity(cls, tokens.row(b * seq_len + j))?);
        }
    }
    Ok(weights)
}

/// [`pdl_loss_tape`] with the angular weights supplied by the caller, as
/// laid out by [`pdl_weights`].
pub fn pdl_loss_weighted(
    tape: &mut Tape,
    new: Var,
    old: Var,
    seq_len: usize,
    variant: PdlVariant,
    weights: &[f64],
) -> Result<Var> {
    let (vn, vo) = (tape.value(new), tape.value(old));
    if vn.shape() != vo.shape() || seq_len == 0 || vn.rows() % seq_len != 0 {
        return Err(Error::dim("pdl_loss", format!("{:?}", vn.shape()), format!("{:?}", vo.shape())));
    }
    if variant == PdlVariant::FullTokenL1 {
        let diff = tape.sub(new, old)?;
        let diff = tape.abs(diff)?;
        return tape.mean(diff);
    }
    let include_cls = variant == PdlVariant::WithCls;
    let rows: Vec<usize> = (0..vn.rows()).filter(|r| include_cls || r % seq_len != 0).collect();
    if weights.len() != rows.len() {
        return Err(Error::dim("pdl_loss weights", rows.len(), weights.len()));
    }
    let weights = tape.constant(Tensor::new([rows.len()], weights.to_vec())?);
    let old_rows = tape.gather_rows(old, rows.clone())?;
    let old_unit = tape.l2_normalize(old_rows)?;
    let old_unit = tape.detach(old_unit);
    let new_rows = tape.gather_rows(new, rows)?;
    let new_unit = tape.l2_normalize(new_rows)?;
    let diff = tape.sub(new_unit, old_unit)?;
    let drift = tape.row_norm(diff)?;
    let weighted = tape.mul(drift, weights)?;
    tape.mean(weighted)
}

/// Relative similarity of a patch token to a prototype versus to its own
/// class token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimilarityDelta {
    Value(f64),
    /// The similarity sum was negative or too close to zero.
    Excluded,
}

impl SimilarityDelta {
    /// `max(0, delta)`, with excluded tokens mapped to 0.
    pub fn clamped(self) -> f64 {
        match self {
            Self::Value(v) => v.max(0.0),
            Self::Excluded => 0.0,
        }
    }
}

fn delta_from_cosines(to_proto: f64, to_cls: f64) -> SimilarityDelta {
    let den = to_proto + to_cls;
    if den < 0.0 || den.abs() < DELTA_EPS {
        SimilarityDelta::Excluded
    } else {
        SimilarityDelta::Value((to_proto - to_cls) / den)
    }
}

/// `(cos(mu, p) − cos(p_cls, p)) / (cos(mu, p) + cos(p_cls, p))`.
pub fn relative_similarity_delta(mu: &[f64], p_cls: &[f64], p_patch: &[f64]) -> Result<SimilarityDelta> {
    let a = tensor::cosine("relative_similarity_delta", mu, p_patch)?;
    let b = tensor::cosine("relative_similarity_delta", p_cls, p_patch)?;
    Ok(delta_from_cosines(a, b))
}

/// Patch tokens of a training batch, prepared for repeated reconstruction
/// queries.
#[derive(Clone, Debug)]
pub struct TokenPool {
    dim: usize,
    /// `[n, d]` raw patch tokens.
    tokens: Vec<f64>,
    /// Unit-normalized patch tokens.
    units: Vec<f64>,
    /// Cosine of each patch token with its own image's class token.
    to_cls: Vec<f64>,
}

impl TokenPool {
    pub fn new(images: &[TokenBatch]) -> Result<Self> {
        let dim = images.first().map_or(0, |t| t.tokens().cols());
        let mut pool = Self {
            dim,
            tokens: Vec::new(),
            units: Vec::new(),
            to_cls: Vec::new(),
        };
        for img in images {
            if img.tokens().cols() != dim {
                return Err(Error::dim("TokenPool", dim, img.tokens().cols()));
            }
            let cls = img.class_token();
            for j in 0..img.patch_count() {
                let p = img.patch_token(j);
                let n = tensor::checked_norm("TokenPool", p)?;
                pool.to_cls.push(tensor::cosine("TokenPool", cls, p)?);
                pool.tokens.extend_from_slice(p);
                pool.units.extend(p.iter().map(|x| x / n));
            }
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.to_cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_cls.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PfrDiagnostics {
    pub pool: usize,
    pub retrieved: usize,
    pub excluded: usize,
    /// The prototype was returned unchanged because nothing was retrieved.
    pub fallback: bool,
}

impl PfrDiagnostics {
    pub fn accumulate(&mut self, other: &PfrDiagnostics) {
        self.pool += other.pool;
        self.retrieved += other.retrieved;
        self.excluded += other.excluded;
        self.fallback |= other.fallback;
    }
}

/// Retrieved pool indices with their softmax weights.
pub fn pfr_weights(mu: &[f64], pool: &TokenPool) -> Result<(Vec<(usize, f64)>, PfrDiagnostics)> {
    let mut diag = PfrDiagnostics {
        pool: pool.len(),
        ..Default::default()
    };
    if pool.is_empty() {
        diag.fallback = true;
        return Ok((Vec::new(), diag));
    }
    if mu.len() != pool.dim {
        return Err(Error::dim("pfr_reconstruct", pool.dim, mu.len()));
    }
    let mu_norm = tensor::checked_norm("pfr_reconstruct", mu)?;
    let mut picked = Vec::new();
    for i in 0..pool.len() {
        let unit = &pool.units[i * pool.dim..(i + 1) * pool.dim];
        let to_proto = (tensor::dot(mu, unit) / mu_norm).clamp(-1.0, 1.0);
        match delta_from_cosines(to_proto, pool.to_cls[i]) {
            SimilarityDelta::Excluded => diag.excluded += 1,
            SimilarityDelta::Value(v) if v > 0.0 => picked.push((i, v)),
            SimilarityDelta::Value(_) => {}
        }
    }
    diag.retrieved = picked.len();
    diag.fallback = picked.is_empty();
    let mut w: Vec<f64> = picked.iter().map(|p| p.1).collect();
    tensor::softmax_in_place(&mut w);
    Ok((picked.into_iter().map(|p| p.0).zip(w).collect(), diag))
}

/// `beta * mu + (1 − beta) * Σ ω p` over retrieved tokens, or `mu` itself
/// when nothing is retrieved.
pub fn pfr_reconstruct(mu: &[f64], pool: &TokenPool, beta: f64) -> Result<(Tensor, PfrDiagnostics)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::usage(format!("beta must lie in [0, 1], got {beta}")));
    }
    let (weights, diag) = pfr_weights(mu, pool)?;
    if weights.is_empty() {
        return Ok((Tensor::new([mu.len()], mu.to_vec())?, diag));
    }
    let mut out: Vec<f64> = mu.iter().map(|m| beta * m).collect();
    for (i, w) in weights {
        let c = (1.0 - beta) * w;
        out.iter_mut().zip(pool.token(i)).for_each(|(o, p)| *o += c * p);
    }
    Ok((Tensor::new([mu.len()], out)?, diag))
}

/// Per-class feature mean and diagonal variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Draws `mean + sqrt(var) ⊙ z` with `z` standard normal.
pub fn gaussian_baseline_sample<R: Rng>(stats: &ClassStats, rng: &mut R) -> Tensor {
    let data = stats
        .mean
        .data()
        .iter()
        .zip(stats.var.data())
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(rng);
            m + v.max(0.0).sqrt() * z
        })
        .collect();
    Tensor::from_parts(stats.mean.shape().to_vec(), data)
}
