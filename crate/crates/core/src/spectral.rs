//! Dense symmetric eigendecomposition, rank truncation and spectral proximity columns.
//!
//! A learned scalar filter `rho` acting on the eigenvalues defines the proximity
//! operator `U diag(rho(sigma)) U^T`; this module only needs the values
//! `rho(sigma_i)`, never the operator itself.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GesfError, Result};

const JACOBI_MAX_SWEEPS: usize = 30;
const JACOBI_OFF_TOL: f64 = 1e-10;
const QL_MAX_ITERS: usize = 60;
const SYMMETRY_TOL: f64 = 1e-12;
/// Above this order the Householder/QL route replaces Jacobi under `EigenSolver::Auto`.
pub const JACOBI_AUTO_LIMIT: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenSolver {
    #[default]
    Auto,
    Jacobi,
    Tridiagonal,
}

/// Which eigenvalues survive truncation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Largest absolute value; ties by larger algebraic value.
    #[default]
    Magnitude,
    /// Largest algebraic value.
    Algebraic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub solver: EigenSolver,
    pub selection: Selection,
}

/// Truncated eigenpairs of a symmetric matrix; column `i` of `vectors` pairs with `eigenvalues[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    pub eigenvalues: Vec<f64>,
    pub vectors: Array2<f64>,
    pub source_hash: String,
}

impl SpectralBasis {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn node_count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = BasisDoc {
            n: self.node_count(),
            r: self.rank(),
            sigma: self.eigenvalues.clone(),
            u: self.vectors.iter().copied().collect(),
            hash: self.source_hash.clone(),
        };
        fs::write(path, serde_json::to_string(&doc)?).map_err(|e| GesfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GesfError::io(path, e))?;
        let doc: BasisDoc = serde_json::from_str(&text)?;
        if doc.sigma.len() != doc.r || doc.u.len() != doc.n * doc.r {
            return Err(GesfError::Validation(format!(
                "{}: inconsistent spectral cache dimensions",
                path.display()
            )));
        }
        let vectors = Array2::from_shape_vec((doc.n, doc.r), doc.u)
            .map_err(|e| GesfError::Validation(e.to_string()))?;
        Ok(SpectralBasis {
            eigenvalues: doc.sigma,
            vectors,
            source_hash: doc.hash,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisDoc {
    n: usize,
    r: usize,
    sigma: Vec<f64>,
    u: Vec<f64>,
    hash: String,
}

/// SHA-256 over the shape and the IEEE bit patterns of every entry.
pub fn matrix_hash(a: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((a.nrows() as u64).to_le_bytes());
    hasher.update((a.ncols() as u64).to_le_bytes());
    for x in a.iter() {
        hasher.update(x.to_bits().to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `D^{-1/2} A D^{-1/2}`; rows of isolated nodes stay zero.
pub fn normalized_adjacency(a: &Array2<f64>) -> Array2<f64> {
    let scale: Vec<f64> = a
        .rows()
        .into_iter()
        .map(|r| {
            let d = r.sum();
            if d > 0.0 {
                d.sqrt().recip()
            } else {
                0.0
            }
        })
        .collect();
    Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * scale[i] * scale[j])
}

fn check_symmetric(a: &Array2<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(GesfError::Argument(format!(
            "matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(GesfError::Argument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(GesfError::Argument("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Full eigendecomposition by cyclic Jacobi rotations.
///
/// Returns unsorted eigenvalues and the eigenvectors as rows of the second
/// matrix (row `i` pairs with eigenvalue `i`).
pub fn jacobi_eigh(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    check_symmetric(a)?;
    let n = a.nrows();
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_OFF_TOL * frob.max(1.0);

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += m[p * n + q] * m[p * n + q];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut off = off_norm(&m);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off <= tol {
            let eig = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((eig, Array2::from_shape_vec((n, n), vt).unwrap()));
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta.is_infinite() { 0.0 } else { t };
                if t == 0.0 {
                    continue;
                }
                let c = (t * t + 1.0).sqrt().recip();
                let s = t * c;

                let (head, tail) = m.split_at_mut(q * n);
                let row_p = &mut head[p * n..p * n + n];
                let row_q = &mut tail[..n];
                for k in 0..n {
                    let xp = row_p[k];
                    let xq = row_q[k];
                    row_p[k] = c * xp - s * xq;
                    row_q[k] = s * xp + c * xq;
                }
                for k in 0..n {
                    if k != p && k != q {
                        m[k * n + p] = m[p * n + k];
                        m[k * n + q] = m[q * n + k];
                    }
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                let (head, tail) = vt.split_at_mut(q * n);
                let vp = &mut head[p * n..p * n + n];
                let vq = &mut tail[..n];
                for k in 0..n {
                    let xp = vp[k];
                    let xq = vq[k];
                    vp[k] = c * xp - s * xq;
                    vq[k] = s * xp + c * xq;
                }
            }
        }
        off = off_norm(&m);
    }
    if off <= tol {
        let eig = (0..n).map(|i| m[i * n + i]).collect();
        return Ok((eig, Array2::from_shape_vec((n, n), vt).unwrap()));
    }
    Err(GesfError::Numeric(format!(
        "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal norm {off:.3e})"
    )))
}

/// Full eigendecomposition by Householder tridiagonalization and implicit QL.
///
/// Same return convention as [`jacobi_eigh`].
pub fn tridiagonal_eigh(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    check_symmetric(a)?;
    let n = a.nrows();
    // column-major: v[j * n + k] is entry (k, j)
    let mut v: Vec<f64> = a.t().iter().copied().collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n == 1 {
        return Ok((vec![a[[0, 0]]], Array2::from_elem((1, 1), 1.0)));
    }
    let at = |k: usize, j: usize| j * n + k;

    // Householder reduction to tridiagonal form.
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in &d[..i] {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in &mut d[..i] {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in &mut e[..i] {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                let col = &v[j * n..j * n + n];
                for k in (j + 1)..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let col = &mut v[j * n..j * n + n];
                for k in j..i {
                    col[k] -= f * e[k] + g * d[k];
                }
                d[j] = col[i - 1];
                col[i] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate transformations.
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let (left, right) = v.split_at_mut((i + 1) * n);
                let col_next = &right[..n];
                let col_j = &mut left[j * n..j * n + n];
                let mut g = 0.0;
                for k in 0..=i {
                    g += col_next[k] * col_j[k];
                }
                for k in 0..=i {
                    col_j[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;

    // Implicit QL on the tridiagonal matrix.
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITERS {
                    return Err(GesfError::Numeric(format!(
                        "QL iteration did not converge for eigenvalue {l} (subdiagonal {:.3e})",
                        e[l]
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in &mut d[l + 2..n] {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    let (left, right) = v.split_at_mut((i + 1) * n);
                    let col_i = &mut left[i * n..i * n + n];
                    let col_next = &mut right[..n];
                    for k in 0..n {
                        let hk = col_next[k];
                        col_next[k] = s * col_i[k] + c * hk;
                        col_i[k] = c * col_i[k] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    // Column-major storage already holds eigenvectors as contiguous runs.
    Ok((d, Array2::from_shape_vec((n, n), v).unwrap()))
}

/// Indices of `values` ordered per `selection`.
fn selection_order(values: &[f64], selection: Selection) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    match selection {
        Selection::Algebraic => {
            order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
        }
        Selection::Magnitude => {
            order.sort_by(|&i, &j| {
                values[j]
                    .abs()
                    .total_cmp(&values[i].abs())
                    .then(i.cmp(&j))
            });
            // Magnitudes equal up to rounding count as ties: reorder by algebraic value.
            let mut start = 0;
            while start < order.len() {
                let lead = values[order[start]].abs();
                let mut end = start + 1;
                while end < order.len()
                    && (lead - values[order[end]].abs()) <= 1e-12 * lead.max(1.0)
                {
                    end += 1;
                }
                order[start..end]
                    .sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
                start = end;
            }
        }
    }
    order
}

/// The `rank` leading eigenpairs of symmetric `a` (by magnitude, see [`Selection`]).
pub fn eigh_truncated(a: &Array2<f64>, rank: usize) -> Result<SpectralBasis> {
    eigh_truncated_with(a, rank, SpectralOptions::default())
}

pub fn eigh_truncated_with(
    a: &Array2<f64>,
    rank: usize,
    opts: SpectralOptions,
) -> Result<SpectralBasis> {
    let n = a.nrows();
    if rank == 0 || rank > n {
        return Err(GesfError::Argument(format!(
            "rank {rank} outside 1..={n}"
        )));
    }
    let solver = match opts.solver {
        EigenSolver::Auto if n <= JACOBI_AUTO_LIMIT => EigenSolver::Jacobi,
        EigenSolver::Auto => EigenSolver::Tridiagonal,
        s => s,
    };
    let (values, rows) = match solver {
        EigenSolver::Jacobi => jacobi_eigh(a)?,
        _ => tridiagonal_eigh(a)?,
    };
    let order = selection_order(&values, opts.selection);
    let mut vectors = Array2::zeros((n, rank));
    let mut eigenvalues = Vec::with_capacity(rank);
    for (col, &idx) in order.iter().take(rank).enumerate() {
        let v = rows.row(idx);
        // sign convention: the largest-magnitude entry is non-negative
        let mut pivot = 0;
        for k in 1..n {
            if v[k].abs() > v[pivot].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, col]] = sign * v[k];
        }
        eigenvalues.push(values[idx]);
    }
    let basis = SpectralBasis {
        eigenvalues,
        vectors,
        source_hash: matrix_hash(a),
    };
    check_residual(a, &basis)?;
    Ok(basis)
}

fn check_residual(a: &Array2<f64>, basis: &SpectralBasis) -> Result<()> {
    let av = a.dot(&basis.vectors);
    for (i, &s) in basis.eigenvalues.iter().enumerate() {
        let res = av
            .column(i)
            .iter()
            .zip(basis.vectors.column(i))
            .map(|(x, u)| (x - s * u).abs())
            .fold(0.0, f64::max);
        if res > 1e-7 * s.abs().max(1.0) {
            return Err(GesfError::Numeric(format!(
                "eigenpair {i} residual {res:.3e} exceeds tolerance"
            )));
        }
    }
    Ok(())
}

fn check_filter(basis: &SpectralBasis, len: usize, v: usize) -> Result<()> {
    if len != basis.rank() {
        return Err(GesfError::Argument(format!(
            "filter has {len} entries, basis rank is {}",
            basis.rank()
        )));
    }
    if v >= basis.node_count() {
        return Err(GesfError::Argument(format!(
            "node {v} out of range 0..{}",
            basis.node_count()
        )));
    }
    Ok(())
}

/// Column `v` of `U diag(filt) U^T`.
pub fn proximity_column(basis: &SpectralBasis, filt: &[f64], v: usize) -> Result<Vec<f64>> {
    check_filter(basis, filt.len(), v)?;
    let w: Array1<f64> = basis
        .vectors
        .row(v)
        .iter()
        .zip(filt)
        .map(|(u, f)| u * f)
        .collect();
    Ok(basis.vectors.dot(&w).to_vec())
}

/// Gradient of `<upstream, proximity_column(basis, filt, v)>` with respect to `filt`.
pub fn proximity_column_grad(
    basis: &SpectralBasis,
    v: usize,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_filter(basis, basis.rank(), v)?;
    if upstream.len() != basis.node_count() {
        return Err(GesfError::Argument(format!(
            "upstream has {} entries, expected {}",
            upstream.len(),
            basis.node_count()
        )));
    }
    let projected = basis.vectors.t().dot(&ArrayView1::from(upstream));
    Ok(projected
        .iter()
        .zip(basis.vectors.row(v))
        .map(|(p, u)| p * u)
        .collect())
}
