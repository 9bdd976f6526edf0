//! Compressed sparse row matrices and the Krylov solvers used by the
//! finite-volume and deformation subsystems.
//!
//! The systems here are small (thousands of unknowns) and assembled from mesh
//! adjacency, so a fixed-pattern CSR filled in place plus Jacobi-preconditioned
//! CG/BiCGSTAB covers every solve in the crate.

use crate::error::LinalgError;
use crate::scalar::Scalar;

/// Square CSR matrix with a fixed sparsity pattern.
#[derive(Clone, Debug)]
pub struct Csr<S> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<S>,
}

impl<S: Scalar> Csr<S> {
    /// Build the pattern from per-row column lists (need not be sorted or
    /// contain the diagonal; both are fixed up here). Values start at zero.
    pub fn from_adjacency(neighbors: &[Vec<usize>]) -> Self {
        let n = neighbors.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (i, nbrs) in neighbors.iter().enumerate() {
            let mut cols: Vec<usize> = nbrs.clone();
            cols.push(i);
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend_from_slice(&cols);
            row_ptr.push(col_idx.len());
        }
        let vals = vec![S::zero(); col_idx.len()];
        Self {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Storage slot of entry (i, j); panics if (i, j) is outside the pattern.
    pub fn slot(&self, i: usize, j: usize) -> usize {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        let k = self.col_idx[lo..hi]
            .binary_search(&j)
            .expect("entry outside sparsity pattern");
        lo + k
    }

    #[inline]
    pub fn set_all(&mut self, v: S) {
        self.vals.iter_mut().for_each(|x| *x = v);
    }

    #[inline]
    pub fn add_at(&mut self, slot: usize, v: S) {
        self.vals[slot] += v;
    }

    #[inline]
    pub fn val(&self, slot: usize) -> S {
        self.vals[slot]
    }

    #[inline]
    pub fn set_at(&mut self, slot: usize, v: S) {
        self.vals[slot] = v;
    }

    /// Zero a whole row (used for Dirichlet rows before setting the diagonal).
    pub fn zero_row(&mut self, i: usize) {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            self.vals[k] = S::zero();
        }
    }

    pub fn mul_vec(&self, x: &[S], y: &mut [S]) {
        for i in 0..self.n {
            let mut acc = S::zero();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<S> {
        let mut d = vec![S::zero(); self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    /// Residual 1-norm |b - A x|.
    pub fn residual_l1(&self, x: &[S], b: &[S]) -> S {
        let mut r = S::zero();
        for i in 0..self.n {
            let mut acc = b[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc -= self.vals[k] * x[self.col_idx[k]];
            }
            r += acc.abs();
        }
        r
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct SolveStats {
    pub iters: usize,
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradient for SPD systems.
pub fn cg<S: Scalar>(
    a: &Csr<S>,
    b: &[S],
    x: &mut [S],
    rtol: S,
    max_iter: usize,
) -> Result<SolveStats, LinalgError> {
    let n = a.n();
    let bnorm = norm2(b);
    if bnorm == S::zero() {
        x.iter_mut().for_each(|v| *v = S::zero());
        return Ok(SolveStats {
            iters: 0,
            rel_residual: 0.0,
        });
    }
    let diag = a.diagonal();
    let minv: Vec<S> = diag
        .iter()
        .map(|d| {
            if d.abs() > S::zero() {
                S::one() / *d
            } else {
                S::one()
            }
        })
        .collect();

    let mut r = vec![S::zero(); n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<S> = r.iter().zip(&minv).map(|(ri, mi)| *ri * *mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![S::zero(); n];
    let target = rtol * bnorm;

    for it in 0..max_iter {
        let rnorm = norm2(&r);
        if rnorm <= target {
            return Ok(SolveStats {
                iters: it,
                rel_residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
            });
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= S::zero() {
            return Err(LinalgError::Breakdown {
                solver: "cg",
                msg: "non-positive curvature (matrix not SPD?)".into(),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * minv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = norm2(&r);
    if rnorm <= target {
        return Ok(SolveStats {
            iters: max_iter,
            rel_residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
        });
    }
    Err(LinalgError::NotConverged {
        solver: "cg",
        iters: max_iter,
        residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
        target: rtol.to_f64().unwrap_or(f64::NAN),
    })
}

/// Jacobi-preconditioned BiCGSTAB for the nonsymmetric momentum systems.
pub fn bicgstab<S: Scalar>(
    a: &Csr<S>,
    b: &[S],
    x: &mut [S],
    rtol: S,
    max_iter: usize,
) -> Result<SolveStats, LinalgError> {
    let n = a.n();
    let bnorm = norm2(b);
    if bnorm == S::zero() {
        x.iter_mut().for_each(|v| *v = S::zero());
        return Ok(SolveStats {
            iters: 0,
            rel_residual: 0.0,
        });
    }
    let diag = a.diagonal();
    let minv: Vec<S> = diag
        .iter()
        .map(|d| {
            if d.abs() > S::zero() {
                S::one() / *d
            } else {
                S::one()
            }
        })
        .collect();

    let mut r = vec![S::zero(); n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r0 = r.clone();
    let mut rho = S::one();
    let mut alpha = S::one();
    let mut omega = S::one();
    let mut v = vec![S::zero(); n];
    let mut p = vec![S::zero(); n];
    let mut phat = vec![S::zero(); n];
    let mut shat = vec![S::zero(); n];
    let mut t = vec![S::zero(); n];
    let target = rtol * bnorm;
    let tiny = S::epsilon() * S::epsilon();

    for it in 0..max_iter {
        let rnorm = norm2(&r);
        if rnorm <= target {
            return Ok(SolveStats {
                iters: it,
                rel_residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
            });
        }
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < tiny * bnorm * bnorm {
            return Err(LinalgError::Breakdown {
                solver: "bicgstab",
                msg: "rho underflow".into(),
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        for i in 0..n {
            phat[i] = p[i] * minv[i];
        }
        a.mul_vec(&phat, &mut v);
        let r0v = dot(&r0, &v);
        if r0v.abs() < tiny * bnorm * bnorm {
            return Err(LinalgError::Breakdown {
                solver: "bicgstab",
                msg: "stagnated search direction".into(),
            });
        }
        alpha = rho / r0v;
        // s = r - alpha v (reuse r)
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if norm2(&r) <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok(SolveStats {
                iters: it + 1,
                rel_residual: (norm2(&r) / bnorm).to_f64().unwrap_or(f64::NAN),
            });
        }
        for i in 0..n {
            shat[i] = r[i] * minv[i];
        }
        a.mul_vec(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt == S::zero() {
            return Err(LinalgError::Breakdown {
                solver: "bicgstab",
                msg: "t vanished".into(),
            });
        }
        omega = dot(&t, &r) / tt;
        if omega == S::zero() {
            return Err(LinalgError::Breakdown {
                solver: "bicgstab",
                msg: "omega vanished".into(),
            });
        }
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] -= omega * t[i];
        }
    }
    let rnorm = norm2(&r);
    if rnorm <= target {
        return Ok(SolveStats {
            iters: max_iter,
            rel_residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
        });
    }
    Err(LinalgError::NotConverged {
        solver: "bicgstab",
        iters: max_iter,
        residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
        target: rtol.to_f64().unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1D Poisson matrix as a stand-in for the FV pressure systems.
    fn poisson1d(n: usize) -> Csr<f64> {
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        let mut a = Csr::from_adjacency(&neighbors);
        for i in 0..n {
            a.add_at(a.slot(i, i), 2.0);
            if i > 0 {
                a.add_at(a.slot(i, i - 1), -1.0);
            }
            if i + 1 < n {
                a.add_at(a.slot(i, i + 1), -1.0);
            }
        }
        a
    }

    #[test]
    fn cg_solves_poisson() {
        let n = 64;
        let a = poisson1d(n);
        let xref: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&xref, &mut b);
        let mut x = vec![0.0; n];
        let stats = cg(&a, &b, &mut x, 1e-12, 1000).unwrap();
        assert!(stats.iters <= n + 2);
        for i in 0..n {
            assert!((x[i] - xref[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn bicgstab_solves_advection_diffusion() {
        // Upwinded 1D advection-diffusion: nonsymmetric but diagonally dominant.
        let n = 80;
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        let mut a = Csr::from_adjacency(&neighbors);
        let pe = 1.5;
        for i in 0..n {
            a.add_at(a.slot(i, i), 2.0 + pe);
            if i > 0 {
                a.add_at(a.slot(i, i - 1), -1.0 - pe);
            }
            if i + 1 < n {
                a.add_at(a.slot(i, i + 1), -1.0);
            }
        }
        let xref: Vec<f64> = (0..n).map(|i| ((i * i) % 17) as f64 / 17.0).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&xref, &mut b);
        let mut x = vec![0.0; n];
        bicgstab(&a, &b, &mut x, 1e-12, 2000).unwrap();
        for i in 0..n {
            assert!((x[i] - xref[i]).abs() < 1e-8, "i={i} {} vs {}", x[i], xref[i]);
        }
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let a = poisson1d(8);
        let b = vec![0.0; 8];
        let mut x = vec![1.0; 8];
        cg(&a, &b, &mut x, 1e-12, 10).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pattern_slots() {
        let a = poisson1d(4);
        assert_eq!(a.val(a.slot(1, 2)), -1.0);
        assert_eq!(a.val(a.slot(2, 2)), 2.0);
    }
}
