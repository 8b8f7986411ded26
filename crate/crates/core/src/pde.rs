//! Schrödinger operator `L v = ∇·(D∇v) − q v` with homogeneous Neumann
//! boundary conditions, discretised with a five-point flux stencil.
//!
//! The operator is stored in its symmetric "weighted" form `S = M·A`, where
//! `A = −L` is the stencil operator and `M` the diagonal of trapezoidal
//! quadrature weights. The mirror ghost-node treatment of ∂Ω makes `S`
//! exactly symmetric and `A` self-adjoint in the discrete L² inner product.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

/// Relative residual target for conjugate gradients.
pub const CG_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct EllipticOperator {
    grid: Grid,
    diag: Vec<f64>,
    /// Coupling between node `k` and `k + 1` (zero on the last column).
    east: Vec<f64>,
    /// Coupling between node `k` and `k + n` (zero on the last row).
    north: Vec<f64>,
    face_dx: Vec<f64>,
    face_dy: Vec<f64>,
    weights: Vec<f64>,
    q: Vec<f64>,
    killing: bool,
}

/// Assemble `A = −L_{D,q}` on the grid of `d`.
///
/// Face diffusivities are arithmetic means of the two adjacent nodal
/// values. Requires `min D > 0` and `min q ≥ 0`.
pub fn assemble(d: &ScalarField, q: &ScalarField) -> Result<EllipticOperator> {
    let grid = d.grid();
    if q.grid() != grid {
        return Err(Error::config("D and q live on different grids"));
    }
    if !(d.min() > 0.0) {
        return Err(Error::domain(format!("diffusivity must be positive (min D = {})", d.min())));
    }
    if q.min() < 0.0 {
        return Err(Error::domain(format!("killing rate must be nonnegative (min q = {})", q.min())));
    }
    let n = grid.n();
    let len = grid.len();
    let dv = d.values();
    let weights = grid.weights();
    let mut diag = vec![0.0; len];
    let mut east = vec![0.0; len];
    let mut north = vec![0.0; len];
    let mut face_dx = vec![0.0; len];
    let mut face_dy = vec![0.0; len];
    for j in 0..n {
        for i in 0..n {
            let k = grid.index(i, j);
            if i + 1 < n {
                let df = 0.5 * (dv[k] + dv[k + 1]);
                let c = grid.edge_factor(j) * df;
                face_dx[k] = df;
                east[k] = -c;
                diag[k] += c;
                diag[k + 1] += c;
            }
            if j + 1 < n {
                let df = 0.5 * (dv[k] + dv[k + n]);
                let c = grid.edge_factor(i) * df;
                face_dy[k] = df;
                north[k] = -c;
                diag[k] += c;
                diag[k + n] += c;
            }
        }
    }
    let qv = q.values().to_vec();
    for k in 0..len {
        diag[k] += qv[k] * weights[k];
    }
    let killing = qv.iter().any(|&v| v > 0.0);
    Ok(EllipticOperator { grid, diag, east, north, face_dx, face_dy, weights, q: qv, killing })
}

impl EllipticOperator {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Quadrature weights (the diagonal mass matrix).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn killing_rate(&self) -> &[f64] {
        &self.q
    }

    /// Face diffusivities `(x-faces, y-faces)`, indexed by the lower-left node.
    pub fn face_diffusivities(&self) -> (&[f64], &[f64]) {
        (&self.face_dx, &self.face_dy)
    }

    /// True when q vanishes identically (the operator is singular).
    pub fn is_singular(&self) -> bool {
        !self.killing
    }

    /// `out = S·v` for the symmetric weighted operator.
    pub fn apply_weighted(&self, v: &[f64], out: &mut [f64]) {
        let n = self.grid.n();
        let len = v.len();
        for k in 0..len {
            out[k] = self.diag[k] * v[k];
        }
        for k in 0..len {
            let e = self.east[k];
            if e != 0.0 {
                out[k] += e * v[k + 1];
                out[k + 1] += e * v[k];
            }
            let no = self.north[k];
            if no != 0.0 {
                out[k] += no * v[k + n];
                out[k + n] += no * v[k];
            }
        }
    }

    /// Stencil application `A·f` (so that `A·1 = q`).
    pub fn apply(&self, f: &ScalarField) -> ScalarField {
        let mut out = vec![0.0; f.values().len()];
        self.apply_weighted(f.values(), &mut out);
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o /= w;
        }
        ScalarField::from_vec_unchecked(self.grid, out)
    }

    /// Stored entry `S(r, c)` (zero outside the five-point pattern).
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        let n = self.grid.n();
        if r == c {
            self.diag[r]
        } else if c == r + 1 && r % n != n - 1 {
            self.east[r]
        } else if r == c + 1 && c % n != n - 1 {
            self.east[c]
        } else if c == r + n {
            self.north[r]
        } else if r == c + n {
            self.north[c]
        } else {
            0.0
        }
    }

    /// All structurally nonzero entries `(row, col, value)` of `S`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let n = self.grid.n();
        let mut t = Vec::with_capacity(5 * self.diag.len());
        for k in 0..self.diag.len() {
            t.push((k, k, self.diag[k]));
            if k % n != n - 1 {
                t.push((k, k + 1, self.east[k]));
                t.push((k + 1, k, self.east[k]));
            }
            if k + n < self.diag.len() {
                t.push((k, k + n, self.north[k]));
                t.push((k + n, k, self.north[k]));
            }
        }
        t
    }

    fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive
/// (semi)definite system. With `singular` set, residuals are projected onto
/// the complement of the constant vector.
pub(crate) fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
    singular: bool,
) -> Result<CgReport> {
    let len = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![0.0; len];
    apply(x, &mut r);
    for k in 0..len {
        r[k] = b[k] - r[k];
    }
    if singular {
        remove_mean(&mut r);
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; len];
    let mut res = norm(&r) / bnorm;
    let mut it = 0;
    while res > tol {
        if it >= max_iter {
            return Err(Error::Solver { iterations: it, residual: res });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Solver { iterations: it, residual: res });
        }
        let alpha = rz / pap;
        for k in 0..len {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if singular {
            remove_mean(&mut r);
        }
        for k in 0..len {
            z[k] = r[k] / diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..len {
            p[k] = z[k] + beta * p[k];
        }
        res = norm(&r) / bnorm;
        it += 1;
    }
    Ok(CgReport { iterations: it, residual: res })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn remove_mean(r: &mut [f64]) {
    let m = r.iter().sum::<f64>() / r.len() as f64;
    r.iter_mut().for_each(|v| *v -= m);
}

#[derive(Debug, Clone)]
pub struct EllipticSolution {
    pub field: ScalarField,
    pub report: CgReport,
}

/// Solve `A u = φ`, i.e. `∇·(D∇u) − q u = −φ` with Neumann conditions.
pub fn solve_elliptic(op: &EllipticOperator, phi: &ScalarField) -> Result<ScalarField> {
    Ok(solve_elliptic_with(op, phi, None, CG_TOLERANCE)?.field)
}

/// As [`solve_elliptic`], optionally warm-started from `initial`.
///
/// When q ≡ 0 the source must integrate to zero (|∫φ| < 1e−10) and the
/// returned solution has zero mean.
pub fn solve_elliptic_with(
    op: &EllipticOperator,
    phi: &ScalarField,
    initial: Option<&ScalarField>,
    tol: f64,
) -> Result<EllipticSolution> {
    let grid = op.grid();
    if phi.grid() != grid {
        return Err(Error::config("source and operator live on different grids"));
    }
    let singular = op.is_singular();
    let mut b: Vec<f64> = phi.values().iter().zip(op.weights()).map(|(p, w)| p * w).collect();
    if singular {
        let mass: f64 = b.iter().sum();
        if mass.abs() >= 1e-10 {
            return Err(Error::Singular(format!("q ≡ 0 requires a source with zero integral (∫φ = {mass:.3e})")));
        }
        // exact projection onto the range of S
        for (bk, w) in b.iter_mut().zip(op.weights()) {
            *bk -= w * mass;
        }
    }
    let mut x = match initial {
        Some(u0) if u0.grid() == grid => u0.values().to_vec(),
        _ => vec![0.0; grid.len()],
    };
    let max_iter = 10 * grid.len();
    let report = pcg(|v, out| op.apply_weighted(v, out), op.diagonal(), &b, &mut x, tol, max_iter, singular)?;
    if singular {
        let mean: f64 = x.iter().zip(op.weights()).map(|(v, w)| v * w).sum();
        x.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(EllipticSolution { field: ScalarField::from_vec_unchecked(grid, x), report })
}

#[derive(Debug, Clone)]
pub struct ParabolicTrajectory {
    pub dt: f64,
    pub t_final: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<ScalarField>,
}

impl ParabolicTrajectory {
    /// Trapezoidal time integral `∫₀ᵀ v(t) dt`.
    pub fn time_integral(&self) -> ScalarField {
        let grid = self.snapshots[0].grid();
        let mut acc = vec![0.0; grid.len()];
        for (s, w) in self.snapshots.windows(2).zip(self.times.windows(2)) {
            let dt = w[1] - w[0];
            for (a, (u, v)) in acc.iter_mut().zip(s[0].values().iter().zip(s[1].values())) {
                *a += 0.5 * dt * (u + v);
            }
        }
        ScalarField::from_vec_unchecked(grid, acc)
    }

    pub fn last(&self) -> &ScalarField {
        self.snapshots.last().expect("trajectory holds at least the initial state")
    }
}

/// Step count and effective step for a horizon `t_final`.
fn time_steps(t_final: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !(t_final >= dt) {
        return Err(Error::config(format!("need dt > 0 and T ≥ dt (T = {t_final}, dt = {dt})")));
    }
    let steps = (t_final / dt).round().max(1.0) as usize;
    Ok((steps, t_final / steps as f64))
}

/// March `(I + dt·A) v_{k+1} = v_k` from `v₀ = φ` with `v' = L v` using
/// backward Euler, recording every step.
pub fn solve_parabolic(
    d: &ScalarField,
    q: &ScalarField,
    phi: &ScalarField,
    t_final: f64,
    dt: f64,
) -> Result<ParabolicTrajectory> {
    let op = assemble(d, q)?;
    let (steps, dt) = time_steps(t_final, dt)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::with_capacity(steps + 1);
    times.push(0.0);
    snapshots.push(phi.clone());
    march(&op, phi, steps, dt, |k, v| {
        times.push(k as f64 * dt);
        snapshots.push(v.clone());
    })?;
    if let Some(t) = times.last_mut() {
        *t = t_final;
    }
    Ok(ParabolicTrajectory { dt, t_final, times, snapshots })
}

fn march(
    op: &EllipticOperator,
    phi: &ScalarField,
    steps: usize,
    dt: f64,
    mut visit: impl FnMut(usize, &ScalarField),
) -> Result<()> {
    let grid = op.grid();
    let w = op.weights();
    let diag: Vec<f64> = op.diagonal().iter().zip(w).map(|(s, m)| m + dt * s).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        op.apply_weighted(v, out);
        for k in 0..v.len() {
            out[k] = w[k] * v[k] + dt * out[k];
        }
    };
    let mut v = phi.values().to_vec();
    let mut b = vec![0.0; v.len()];
    for k in 1..=steps {
        for m in 0..v.len() {
            b[m] = w[m] * v[m];
        }
        pcg(apply, &diag, &b, &mut v, CG_TOLERANCE, 10 * grid.len(), false)?;
        visit(k, &ScalarField::from_vec_unchecked(grid, v.clone()));
    }
    Ok(())
}

/// Trapezoidal time integral of the parabolic trajectory, accumulated
/// without storing the snapshots.
pub fn time_average(d: &ScalarField, q: &ScalarField, phi: &ScalarField, t_final: f64, dt: f64) -> Result<ScalarField> {
    if !q.values().iter().any(|&v| v > 0.0) {
        return Err(Error::domain("time average needs q > 0 somewhere"));
    }
    let op = assemble(d, q)?;
    let (steps, dt) = time_steps(t_final, dt)?;
    let mut acc: Vec<f64> = phi.values().iter().map(|v| 0.5 * dt * v).collect();
    march(&op, phi, steps, dt, |k, v| {
        let c = if k == steps { 0.5 * dt } else { dt };
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += c * x;
        }
    })?;
    Ok(ScalarField::from_vec_unchecked(phi.grid(), acc))
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub field: ScalarField,
}

const EIGEN_MAX_ITER: usize = 3000;
const EIGEN_TOL: f64 = 1e-9;

/// The `m ≤ 10` smallest eigenpairs of `A`, by shifted inverse iteration
/// with deflation followed by a Rayleigh–Ritz clean-up. Eigenfields are
/// orthonormal in the discrete L² inner product.
pub fn eigen_smallest(op: &EllipticOperator, m: usize) -> Result<Vec<EigenPair>> {
    if m == 0 || m > 10 {
        return Err(Error::config(format!("eigenpair count must be in 1..=10, got {m}")));
    }
    let grid = op.grid();
    let len = grid.len();
    let w = op.weights();
    let shift = if op.is_singular() { 1.0 } else { 0.0 };
    let diag: Vec<f64> = op.diagonal().iter().zip(w).map(|(s, m)| s + shift * m).collect();
    let shifted = |v: &[f64], out: &mut [f64]| {
        op.apply_weighted(v, out);
        for k in 0..v.len() {
            out[k] += shift * w[k] * v[k];
        }
    };
    let inner = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), m)| x * y * m).sum() };
    let rayleigh = |v: &[f64], sv: &mut [f64]| -> f64 {
        op.apply_weighted(v, sv);
        dot(v, sv)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut sv = vec![0.0; len];
    let mut rhs = vec![0.0; len];
    for index in 0..m {
        let mut v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
        let orthonormalize = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
            for _ in 0..2 {
                for b in basis {
                    let c = inner(v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let nv = inner(v, v).sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
        };
        orthonormalize(&mut v, &basis);
        let mut lambda = rayleigh(&v, &mut sv);
        let mut residual = f64::INFINITY;
        for _ in 0..EIGEN_MAX_ITER {
            for k in 0..len {
                rhs[k] = w[k] * v[k];
            }
            let mut x: Vec<f64> = v.iter().map(|a| a / (lambda + shift).max(1e-12)).collect();
            pcg(shifted, &diag, &rhs, &mut x, 1e-12, 10 * len, false)?;
            v = x;
            orthonormalize(&mut v, &basis);
            lambda = rayleigh(&v, &mut sv);
            residual = (0..len).map(|k| (sv[k] - lambda * w[k] * v[k]).powi(2) / w[k]).sum::<f64>().sqrt();
            if residual <= EIGEN_TOL * lambda.abs().max(1.0) {
                break;
            }
        }
        if residual > 1e3 * EIGEN_TOL * lambda.abs().max(1.0) {
            return Err(Error::Eigen { index, residual });
        }
        basis.push(v);
    }

    // Rayleigh–Ritz in the converged subspace: sorts and separates clusters.
    let mut proj = DMatrix::<f64>::zeros(m, m);
    let images: Vec<Vec<f64>> = basis
        .iter()
        .map(|b| {
            let mut out = vec![0.0; len];
            op.apply_weighted(b, &mut out);
            out
        })
        .collect();
    for a in 0..m {
        for b in 0..m {
            proj[(a, b)] = 0.5 * (dot(&basis[a], &images[b]) + dot(&basis[b], &images[a]));
        }
    }
    let eig = SymmetricEigen::new(proj);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let pairs = order
        .into_iter()
        .map(|c| {
            let mut field = vec![0.0; len];
            for (a, b) in basis.iter().enumerate() {
                let coef = eig.eigenvectors[(a, c)];
                field.iter_mut().zip(b).for_each(|(f, x)| *f += coef * x);
            }
            let nv = inner(&field, &field).sqrt();
            field.iter_mut().for_each(|x| *x /= nv);
            EigenPair { value: eig.eigenvalues[c].max(0.0), field: ScalarField::from_vec_unchecked(grid, field) }
        })
        .collect();
    Ok(pairs)
}
