//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const MAX_SWEEPS: usize = 100;

/// `W = U · diag(sigma) · V` with `U` `m×r`, `V` `r×n`, `r = min(m, n)`.
///
/// Columns of `U` and rows of `V` are orthonormal and `sigma` is
/// non-negative and descending. Columns of `U` paired with zero singular
/// values are an arbitrary orthonormal completion.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    /// `U · diag(sigma) · V`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.shape()[0], self.u.shape()[1]);
        let mut us = self.u.clone();
        for i in 0..m {
            for j in 0..r {
                us.data_mut()[i * r + j] *= self.sigma[j];
            }
        }
        us.matmul(&self.v).expect("factor shapes agree")
    }

    /// Number of singular values above `tol * sigma_max`.
    pub fn effective_rank(&self, tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > tol * top).count()
    }
}

pub fn svd(w: &Tensor) -> Result<Svd> {
    let (m, n) = match w.shape() {
        &[m, n] => (m, n),
        s => return Err(Error::dim("svd", "rank-2 tensor", format!("{s:?}"))),
    };
    if m >= n {
        let (u, sigma, vt) = jacobi_tall(w.data(), m, n)?;
        // vt holds right singular vectors as columns (n×n); V wants them as rows.
        let v = tensor::transpose(&vt, n, n);
        Ok(Svd {
            u: Tensor::from_parts(vec![m, n], u),
            sigma,
            v: Tensor::from_parts(vec![n, n], v),
        })
    } else {
        // Wᵀ = U' Σ V'ᵀ  ⇒  W = V' Σ U'ᵀ
        let wt = tensor::transpose(w.data(), m, n);
        let (u2, sigma, v2) = jacobi_tall(&wt, n, m)?;
        Ok(Svd {
            u: Tensor::from_parts(vec![m, m], v2),
            sigma,
            v: Tensor::from_parts(vec![m, n], tensor::transpose(&u2, n, m)),
        })
    }
}

/// One-sided Jacobi on a tall `m×n` matrix (`m >= n`). Returns `U` (`m×n`,
/// column-major semantics stored row-major), `sigma`, and the `n×n` matrix
/// whose columns are right singular vectors.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    // Work column-wise: cols[j] is column j of A.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut last_off = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        last_off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = tensor::dot(&cols[p], &cols[p]);
                let beta = tensor::dot(&cols[q], &cols[q]);
                let gamma = tensor::dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                last_off = last_off.max(off);
                if off <= f64::EPSILON * m as f64 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            op: "svd",
            detail: format!("no convergence after {MAX_SWEEPS} sweeps on {m}x{n}; max off-diagonal cosine {last_off:e}"),
        });
    }

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (tensor::norm(c), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let floor = sigma_max * f64::EPSILON * (m.max(n) as f64);

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut vsorted = Vec::with_capacity(n);
    for &(s, j) in &order {
        if s > floor && s > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            ucols.push(Vec::new());
            sigma.push(0.0);
        }
        vsorted.push(vcols[j].clone());
    }
    complete_orthonormal(&mut ucols, m);

    let mut u = vec![0.0; m * n];
    for (j, c) in ucols.iter().enumerate() {
        for i in 0..m {
            u[i * n + j] = c[i];
        }
    }
    let mut v = vec![0.0; n * n];
    for (j, c) in vsorted.iter().enumerate() {
        for i in 0..n {
            v[i * n + j] = c[i];
        }
    }
    Ok((u, sigma, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills empty columns with unit vectors orthogonal to all others, via
/// modified Gram-Schmidt against the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], m: usize) {
    let mut basis = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        loop {
            assert!(basis < m, "orthonormal completion exhausted the basis");
            let mut e = vec![0.0; m];
            e[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = tensor::dot(&e, other);
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let nrm = tensor::norm(&e);
            if nrm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= nrm);
                cols[j] = e;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_postconditions(w: &Tensor, f: &Svd) {
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let r = m.min(n);
        assert_eq!(f.u.shape(), &[m, r]);
        assert_eq!(f.v.shape(), &[r, n]);
        assert_eq!(f.sigma.len(), r);
        let rec = f.reconstruct();
        let scale = w.frobenius_norm().max(1e-300);
        let err = rec.max_abs_diff(w).max(0.0);
        let frob: f64 = rec.data().iter().zip(w.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(frob / scale < 1e-8 || (w.frobenius_norm() == 0.0 && err == 0.0), "reconstruction {}", frob / scale);
        for s in f.sigma.windows(2) {
            assert!(s[0] >= s[1]);
        }
        assert!(f.sigma.iter().all(|&s| s >= 0.0));
        let utu = f.u.transpose().unwrap().matmul(&f.u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::identity(r)) < 1e-8, "U not orthonormal");
        let vvt = f.v.matmul(&f.v.transpose().unwrap()).unwrap();
        assert!(vvt.max_abs_diff(&Tensor::identity(r)) < 1e-8, "V not orthonormal");
    }

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let f = svd(&w).unwrap();
        assert!((f.sigma[0] - 3.0).abs() < 1e-15 && (f.sigma[1] - 1.0).abs() < 1e-15);
        for x in f.u.data().iter().chain(f.v.data()) {
            assert!(x.abs() < 1e-15 || (x.abs() - 1.0).abs() < 1e-15);
        }
        check_postconditions(&w, &f);
        // reversed order gets sorted
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![3.0, 1.0]);
        check_postconditions(&w, &f);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5];
        let v = [2.0, 1.0, -1.0, 3.0];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let w = Tensor::matrix(3, 4, data).unwrap();
        let f = svd(&w).unwrap();
        let expect = tensor::norm(&u) * tensor::norm(&v);
        assert!((f.sigma[0] - expect).abs() < 1e-12);
        assert!(f.sigma[1..].iter().all(|&s| s < 1e-12));
        assert_eq!(f.effective_rank(1e-10), 1);
        check_postconditions(&w, &f);
    }

    #[test]
    fn random_8x6_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_tensor(&mut rng, &[8, 6]);
        let f = svd(&w).unwrap();
        check_postconditions(&w, &f);
        let wt = w.transpose().unwrap();
        check_postconditions(&wt, &svd(&wt).unwrap());
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let w = Tensor::zeros([4, 3]);
        let f = svd(&w).unwrap();
        assert!(f.sigma.iter().all(|&s| s == 0.0));
        assert_eq!(f.effective_rank(1e-10), 0);
        check_postconditions(&w, &f);
    }

    #[test]
    fn low_rank_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_tensor(&mut rng, &[16, 4]);
        let b = random_tensor(&mut rng, &[4, 16]);
        let w = a.matmul(&b).unwrap();
        let f = svd(&w).unwrap();
        check_postconditions(&w, &f);
        assert_eq!(f.effective_rank(1e-10), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn postconditions_hold(m in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(&mut rng, &[m, n]);
            let f = svd(&w).unwrap();
            check_postconditions(&w, &f);
        }
    }
}
