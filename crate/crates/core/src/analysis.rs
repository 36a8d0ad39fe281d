//! Factorization checks for adapter weights.
//!
//! A linear adapter `o = Wᵀ p` with `W = W_down W_up = U diag(σ) V` can be
//! rewritten as `o = Vᵀ g(p)` with `g(p) = diag(σ) Uᵀ p`: the output is a
//! combination of the rows of `V`. With the ReLU in between, the same holds
//! for `W_up = U_up diag(σ_up) V_up` and
//! `g(p) = diag(σ_up) U_upᵀ ReLU(W_downᵀ p)`. The functions here evaluate
//! both sides on probe vectors and report the worst residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, Purpose};
use crate::svd::{svd, Svd};
use crate::tensor::{self, Tensor};
use crate::tsai::AdapterBank;

/// Residual tolerance used by the checks and the `analyze` command.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Relative singular-value threshold for the effective rank.
pub const RANK_TOL: f64 = 1e-10;
pub const PROBE_COUNT: usize = 128;
pub const PROBE_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentityKind {
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub task: usize,
    pub block: usize,
    pub kind: IdentityKind,
    pub singular_values: Vec<f64>,
    /// Largest entry of `|U diag(σ) V − W|` for the factorized matrix.
    pub reconstruction_residual: f64,
    /// Largest `‖o − Vᵀ g(p)‖` over the probes.
    pub identity_residual: f64,
    /// Largest distance of an adapter output from the row space of `V`.
    pub subspace_residual: f64,
    pub effective_rank: usize,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `count` unit vectors of length `dim` drawn from a fixed seeded Gaussian.
pub fn standard_probes(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seeds::stream(seed, Purpose::Probes, &[dim as u64]);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = tensor::norm(&v);
            if n > 1e-6 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// `mᵀ x` for a matrix `m` `[k, n]` and `x` of length `k`.
fn mat_t_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = m.cols();
    let mut out = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, v)| *o += xi * v);
    }
    out
}

/// `m x` for a matrix `m` `[k, n]` and `x` of length `n`.
fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| tensor::dot(m.row(i), x)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Length of the component of `o` outside the span of the rows of `v`,
/// `‖o − Vᵀ V o‖`. The rows of `v` must be orthonormal.
pub fn subspace_residual(o: &[f64], v: &Tensor) -> Result<f64> {
    if v.cols() != o.len() {
        return Err(Error::dim("subspace_residual", v.cols(), o.len()));
    }
    let coeff = mat_vec(v, o);
    let proj = mat_t_vec(v, &coeff);
    Ok(distance(o, &proj))
}

fn check_shapes(w_down: &Tensor, w_up: &Tensor, probes: &[Vec<f64>]) -> Result<()> {
    let (d, r) = (w_down.rows(), w_down.cols());
    if w_up.shape() != [r, d] {
        return Err(Error::dim("factorization", format!("W_up [{r}, {d}]"), format!("{:?}", w_up.shape())));
    }
    if probes.is_empty() {
        return Err(Error::usage("factorization checks need at least one probe"));
    }
    if let Some(p) = probes.iter().find(|p| p.len() != d) {
        return Err(Error::dim("factorization", d, p.len()));
    }
    Ok(())
}

fn report(kind: IdentityKind, f: &Svd, target: &Tensor, identity: f64, subspace: f64, probes: usize) -> FactorizationReport {
    let reconstruction = f.reconstruct().max_abs_diff(target);
    FactorizationReport {
        task: 0,
        block: 0,
        kind,
        singular_values: f.sigma.clone(),
        reconstruction_residual: reconstruction,
        identity_residual: identity,
        subspace_residual: subspace,
        effective_rank: f.effective_rank(RANK_TOL),
        probes,
        tolerance: IDENTITY_TOL,
        passed: identity < IDENTITY_TOL && subspace < IDENTITY_TOL,
    }
}

/// Checks `Wᵀ p = Vᵀ diag(σ) Uᵀ p` for `W = W_down W_up`.
pub fn verify_linear_identity(w_down: &Tensor, w_up: &Tensor, probes: &[Vec<f64>]) -> Result<FactorizationReport> {
    check_shapes(w_down, w_up, probes)?;
    let w = w_down.matmul(w_up)?;
    let f = svd(&w)?;
    let (mut identity, mut subspace) = (0.0f64, 0.0f64);
    for p in probes {
        let direct = mat_t_vec(&w, p);
        let g: Vec<f64> = mat_t_vec(&f.u, p).iter().zip(&f.sigma).map(|(x, s)| x * s).collect();
        let factored = mat_t_vec(&f.v, &g);
        identity = identity.max(distance(&direct, &factored));
        subspace = subspace.max(subspace_residual(&direct, &f.v)?);
    }
    Ok(report(IdentityKind::Linear, &f, &w, identity, subspace, probes.len()))
}

/// Checks `W_upᵀ ReLU(W_downᵀ p) = V_upᵀ diag(σ_up) U_upᵀ ReLU(W_downᵀ p)`.
pub fn verify_nonlinear_identity(w_down: &Tensor, w_up: &Tensor, probes: &[Vec<f64>]) -> Result<FactorizationReport> {
    check_shapes(w_down, w_up, probes)?;
    let f = svd(w_up)?;
    let (mut identity, mut subspace) = (0.0f64, 0.0f64);
    for p in probes {
        let hidden: Vec<f64> = mat_t_vec(w_down, p).into_iter().map(|x| x.max(0.0)).collect();
        let direct = mat_t_vec(w_up, &hidden);
        let g: Vec<f64> = mat_t_vec(&f.u, &hidden).iter().zip(&f.sigma).map(|(x, s)| x * s).collect();
        let factored = mat_t_vec(&f.v, &g);
        identity = identity.max(distance(&direct, &factored));
        subspace = subspace.max(subspace_residual(&direct, &f.v)?);
    }
    Ok(report(IdentityKind::Nonlinear, &f, w_up, identity, subspace, probes.len()))
}

/// Both checks for every `(task, block)` adapter of a bank, on the standard
/// probe set.
pub fn analyze_bank(bank: &AdapterBank) -> Result<Vec<FactorizationReport>> {
    let probes = standard_probes(bank.dim(), PROBE_COUNT, PROBE_SEED);
    let mut out = Vec::new();
    for task in 0..bank.task_count() {
        for block in 0..bank.depth() {
            let a = &bank.entry(block, task).adapter;
            for mut r in [
                verify_linear_identity(&a.w_down, &a.w_up, &probes)?,
                verify_nonlinear_identity(&a.w_down, &a.w_up, &probes)?,
            ] {
                r.task = task;
                r.block = block;
                out.push(r);
            }
        }
    }
    Ok(out)
}
