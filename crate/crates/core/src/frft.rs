//! Discrete fractional Fourier transform on periodic grids.
//!
//! The order-N transform is built from an orthonormal eigenbasis of the
//! centered DFT matrix C[m,k] = exp(-2*pi*i*(m-c)(k-c)/N)/sqrt(N) with
//! c = floor(N/2). Because C = P F P^T for the plain DFT F and the cyclic
//! index shift P: y[m] = x[(m-c) mod N], an eigenbasis is obtained from
//! the shift-conjugated Harper matrix
//!
//!   B[j,j]         = 2 cos(2*pi*(j-c)/N)
//!   B[j,(j+-1)%N] += 1
//!
//! which commutes with C exactly. Eigenvectors of B sorted by descending
//! eigenvalue run from smoothest to most oscillatory, mirroring the
//! Hermite functions that diagonalize the continuous transform; each is
//! tagged with a Hermite index k so its C eigenvalue is exp(-i*pi*k/2),
//! and the fractional power T_alpha = E diag(exp(-i*pi*alpha*k/2)) E^T
//! interpolates smoothly between identity (alpha=0) and C (alpha=1).
//!
//! Degenerate B eigenvalues (they occur for even N) are refined by
//! re-diagonalizing Re(C), then Im(C), inside each eigenspace; both
//! commute with everything involved, so the result is a joint eigenbasis.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::tensor::{Dtype, PrimitiveOp, Result, Tensor, TensorError};

/// Eigenbasis of the order-N centered DFT. Row k of `et` is the
/// components of eigenvector k; `hermite[k]` is its Hermite index.
#[derive(Clone, Debug)]
pub struct FrftBasis {
    n: usize,
    et: Vec<f64>,
    hermite: Vec<usize>,
}

/// Hermite index set actually used for order n: {0..n-2} plus n-1 when n
/// is odd, n when n is even.
fn hermite_index_set(n: usize) -> Vec<usize> {
    let mut set: Vec<usize> = (0..n - 1).collect();
    set.push(if n % 2 == 0 { n } else { n - 1 });
    set
}

/// Centered DFT matrix, row-major n x n.
pub fn centered_dft_matrix(n: usize) -> Vec<Complex64> {
    let c = (n / 2) as f64;
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for m in 0..n {
        for k in 0..n {
            let phase = -2.0 * PI * (m as f64 - c) * (k as f64 - c) / n as f64;
            out[m * n + k] = Complex64::from_polar(scale, phase);
        }
    }
    out
}

fn invalid(detail: String) -> TensorError {
    TensorError::Invalid { op: "build_basis", detail }
}

/// Builds the eigenbasis for order n (n >= 2). Orthonormality and the
/// reconstruction of the centered DFT from the tagged eigenpairs are
/// verified before returning.
pub fn build_basis(n: usize) -> Result<FrftBasis> {
    if n < 2 {
        return Err(invalid(format!("order {n} too small")));
    }
    let c = n / 2;

    let mut b = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        b[(j, j)] = 2.0 * (2.0 * PI * (j as f64 - c as f64) / n as f64).cos();
        b[(j, (j + 1) % n)] += 1.0;
        b[(j, (j + n - 1) % n)] += 1.0;
    }

    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (slot, &src) in order.iter().enumerate() {
        vectors.set_column(slot, &eig.eigenvectors.column(src));
    }
    let sorted_vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let cmat = centered_dft_matrix(n);
    let re_c = DMatrix::<f64>::from_fn(n, n, |i, j| cmat[i * n + j].re);
    let im_c = DMatrix::<f64>::from_fn(n, n, |i, j| cmat[i * n + j].im);

    // Cluster nearly equal B eigenvalues and refine each cluster into a
    // joint eigenbasis of (B, Re C, Im C). Over-clustering is harmless:
    // everything commutes, so refinement never mixes distinct B spaces
    // beyond rotations inside true C eigenspaces.
    let gap = 1e-7 * (1.0 + sorted_vals.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (sorted_vals[end - 1] - sorted_vals[end]).abs() < gap {
            end += 1;
        }
        if end - start > 1 {
            refine_cluster(&mut vectors, start, end, &re_c);
            refine_cluster(&mut vectors, start, end, &im_c);
        }
        start = end;
    }

    // Classify each vector by its C Rayleigh quotient and hand out the
    // smallest unused Hermite index of the matching residue class.
    let mut queues: [Vec<usize>; 4] = Default::default();
    for k in hermite_index_set(n).into_iter().rev() {
        queues[k % 4].push(k);
    }
    let mut hermite = vec![0usize; n];
    let mut et = vec![0.0f64; n * n];
    for j in 0..n {
        let v = vectors.column(j);
        let mut ray = Complex64::new(0.0, 0.0);
        for m in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                acc += cmat[m * n + k] * v[k];
            }
            ray += v[m] * acc;
        }
        let mut class = 0usize;
        let mut best = f64::INFINITY;
        for q in 0..4 {
            let lam = Complex64::from_polar(1.0, -PI * q as f64 / 2.0);
            let d = (ray - lam).norm();
            if d < best {
                best = d;
                class = q;
            }
        }
        if best > 0.1 {
            return Err(invalid(format!(
                "order {n}: vector {j} has Rayleigh quotient {ray} off every unit eigenvalue"
            )));
        }
        let Some(k) = queues[class].pop() else {
            return Err(invalid(format!("order {n}: eigenvalue class {class} over-assigned")));
        };
        hermite[j] = k;

        // Deterministic sign: largest-magnitude component positive.
        let mut pivot = 0;
        for m in 1..n {
            if v[m].abs() > v[pivot].abs() {
                pivot = m;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for m in 0..n {
            et[j * n + m] = sign * v[m];
        }
    }

    let basis = FrftBasis { n, et, hermite };
    basis.validate(&cmat)?;
    Ok(basis)
}

/// Rotates columns [start, end) of `vectors` into eigenvectors of `sym`
/// restricted to their span, ordered by descending restricted eigenvalue.
fn refine_cluster(vectors: &mut DMatrix<f64>, start: usize, end: usize, sym: &DMatrix<f64>) {
    let s = end - start;
    let sub = vectors.columns(start, s).into_owned();
    let m = {
        let raw = sub.transpose() * sym * &sub;
        0.5 * (&raw + raw.transpose())
    };
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut w = DMatrix::<f64>::zeros(s, s);
    for (slot, &src) in order.iter().enumerate() {
        w.set_column(slot, &eig.eigenvectors.column(src));
    }
    let rotated = sub * w;
    for j in 0..s {
        vectors.set_column(start + j, &rotated.column(j));
    }
}

impl FrftBasis {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn hermite_indices(&self) -> &[usize] {
        &self.hermite
    }

    /// Components of eigenvector k.
    pub fn vector(&self, k: usize) -> &[f64] {
        &self.et[k * self.n..(k + 1) * self.n]
    }

    /// C^alpha eigenvalue attached to eigenvector k.
    pub fn eigenvalue(&self, k: usize, alpha: f64) -> Complex64 {
        Complex64::from_polar(1.0, -PI * alpha * self.hermite[k] as f64 / 2.0)
    }

    fn validate(&self, cmat: &[Complex64]) -> Result<()> {
        let n = self.n;
        let mut max_ortho = 0.0f64;
        for a in 0..n {
            let va = self.vector(a);
            for b in a..n {
                let dot: f64 = va.iter().zip(self.vector(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                max_ortho = max_ortho.max((dot - want).abs());
            }
        }
        if max_ortho > 1e-9 {
            return Err(invalid(format!("order {n}: basis not orthonormal (residual {max_ortho:.3e})")));
        }

        let rebuilt = self.transform_matrix(1.0);
        let mut max_rec = 0.0f64;
        for i in 0..n * n {
            max_rec = max_rec.max((rebuilt[i] - cmat[i]).norm());
        }
        if max_rec > 1e-8 {
            return Err(invalid(format!(
                "order {n}: eigenpairs do not reconstruct the centered DFT (residual {max_rec:.3e})"
            )));
        }
        Ok(())
    }

    /// Full T_alpha, row-major n x n.
    pub fn transform_matrix(&self, alpha: f64) -> Vec<Complex64> {
        let all: Vec<usize> = (0..self.n).collect();
        self.transform_rows(alpha, &all)
    }

    /// Selected rows of T_alpha: out[ri*n + m] = T_alpha[rows[ri], m].
    pub fn transform_rows(&self, alpha: f64, rows: &[usize]) -> Vec<Complex64> {
        self.weighted_rows(rows, |k| self.eigenvalue(k, alpha))
    }

    /// Selected rows of dT_alpha/dalpha.
    pub fn d_transform_rows(&self, alpha: f64, rows: &[usize]) -> Vec<Complex64> {
        self.weighted_rows(rows, |k| {
            let h = self.hermite[k] as f64;
            self.eigenvalue(k, alpha) * Complex64::new(0.0, -PI * h / 2.0)
        })
    }

    fn weighted_rows(&self, rows: &[usize], weight: impl Fn(usize) -> Complex64) -> Vec<Complex64> {
        let n = self.n;
        let mut out = vec![Complex64::new(0.0, 0.0); rows.len() * n];
        for k in 0..n {
            let wk = weight(k);
            let vk = self.vector(k);
            for (ri, &r) in rows.iter().enumerate() {
                let f = wk * vk[r];
                let orow = &mut out[ri * n..(ri + 1) * n];
                orow.iter_mut().zip(vk).for_each(|(o, &v)| *o += f * v);
            }
        }
        out
    }
}

/// 1D fractional transform of a length-n signal.
pub fn frft1(basis: &FrftBasis, x: &[Complex64], alpha: f64) -> Vec<Complex64> {
    assert_eq!(x.len(), basis.n, "frft1 length mismatch");
    let t = basis.transform_matrix(alpha);
    let n = basis.n;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for m in 0..n {
        let row = &t[m * n..(m + 1) * n];
        out[m] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

/// Eager 2D fractional transform of a (C,H,W) complex tensor, the same
/// order applied along both axes.
pub fn frft2(bh: &Arc<FrftBasis>, bw: &Arc<FrftBasis>, x: &Tensor, alpha: f64) -> Result<Tensor> {
    let op = Frft2Op { bh: bh.clone(), bw: bw.clone(), sign: 1.0 };
    let a = Tensor::scalar(alpha);
    op.eval(&[x, &a])
}

// ── mode sets ───────────────────────────────────────────────────────────

/// Low-then-high frequency kept set along the leading axis:
/// {0..kmax-1} then {h-kmax+1..h-1}, deduplicated in that order. Slot j
/// corresponds to a fixed signed frequency whenever h >= 2*kmax-1, which
/// is what makes weights transfer across resolutions.
pub fn fno_kept_rows(h: usize, kmax: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(2 * kmax - 1);
    for k in 0..kmax.min(h) {
        out.push(k);
    }
    for k in (h.saturating_sub(kmax - 1))..h {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Non-negative frequency kept set along the trailing axis: {0..kmax-1}.
pub fn fno_kept_cols(w: usize, kmax: usize) -> Vec<usize> {
    (0..kmax.min(w)).collect()
}

/// The same slots relocated to the centered transform's sample indexing:
/// slot j maps to (kept[j] + floor(n/2)) mod n.
pub fn shift_kept(kept: &[usize], n: usize) -> Vec<usize> {
    kept.iter().map(|&k| (k + n / 2) % n).collect()
}

/// True when the kept sets at (h, w) neither clamp nor overlap, so slot
/// enumeration is resolution independent.
pub fn kept_unclamped(h: usize, w: usize, kmax: usize) -> bool {
    kmax >= 1 && h >= 2 * kmax - 1 && w >= kmax
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeOrdering {
    /// Keep {0..kmax-1} u {n-kmax+1..n-1} on axis 0 and {0..kmax-1} on
    /// axis 1 of the coefficient array.
    Frequency,
    /// Keep the leading kmax x kmax block of the coefficient array.
    Hermite,
}

/// Zeroes every coefficient of a (C,H,W) array outside the kept set for
/// the given ordering. Pure array operation on already-transformed data.
pub fn truncate_modes(x: &Tensor, kmax: usize, ordering: ModeOrdering) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(TensorError::Invalid {
            op: "truncate_modes",
            detail: format!("want rank 3, got {:?}", x.shape()),
        });
    }
    if kmax == 0 {
        return Err(TensorError::Invalid { op: "truncate_modes", detail: "kmax must be positive".into() });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (keep_r, keep_c): (Vec<bool>, Vec<bool>) = match ordering {
        ModeOrdering::Hermite => (
            (0..h).map(|r| r < kmax).collect(),
            (0..w).map(|q| q < kmax).collect(),
        ),
        ModeOrdering::Frequency => {
            let rows = fno_kept_rows(h, kmax);
            let cols = fno_kept_cols(w, kmax);
            let mut kr = vec![false; h];
            let mut kc = vec![false; w];
            rows.iter().for_each(|&r| kr[r] = true);
            cols.iter().for_each(|&q| kc[q] = true);
            (kr, kc)
        }
    };

    let mut out = x.clone();
    for ch in 0..c {
        for r in 0..h {
            for q in 0..w {
                if keep_r[r] && keep_c[q] {
                    continue;
                }
                let flat = (ch * h + r) * w + q;
                match out.dtype() {
                    Dtype::Real => out.set_component(flat, 0.0),
                    Dtype::Complex => {
                        out.set_component(2 * flat, 0.0);
                        out.set_component(2 * flat + 1, 0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ── complex matmul helpers on raw row-major slices ──────────────────────

/// (m,k) x (k,n) -> (m,n)
fn cmm(a: &[Complex64], m: usize, k: usize, b: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

/// (m,k) x (n,k)^T -> (m,n)
fn cmm_bt(a: &[Complex64], m: usize, k: usize, b: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// (k,m)^T x (k,n) -> (m,n)
fn cmm_at(a: &[Complex64], k: usize, m: usize, b: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

/// Sum over elements of Re(conj(g) * d): the alpha gradient contraction.
fn re_inner(g: &[Complex64], d: &[Complex64]) -> f64 {
    g.iter().zip(d).map(|(a, b)| (a.conj() * b).re).sum()
}

// ── tape primitives ─────────────────────────────────────────────────────

fn check_chw(op: &'static str, x: &Tensor, h: usize, w: usize) -> Result<()> {
    if x.dtype() != Dtype::Complex {
        return Err(TensorError::WrongDtype { op, expected: Dtype::Complex });
    }
    if x.shape().len() != 3 || x.shape()[1] != h || x.shape()[2] != w {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![x.shape().first().copied().unwrap_or(0), h, w],
        });
    }
    Ok(())
}

fn alpha_of(op: &'static str, t: &Tensor) -> Result<f64> {
    if t.dtype() != Dtype::Real || t.numel() != 1 {
        return Err(TensorError::Invalid { op, detail: "order parameter must be a real scalar".into() });
    }
    Ok(t.real_data()[0])
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse { p.plan_fft_inverse(n) } else { p.plan_fft_forward(n) }
    })
}

fn fft2_channels(data: &mut [Complex64], c: usize, h: usize, w: usize, inverse: bool) {
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for ch in 0..c {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            row_fft.process(&mut plane[r * w..(r + 1) * w]);
        }
        for q in 0..w {
            for r in 0..h {
                col[r] = plane[r * w + q];
            }
            col_fft.process(&mut col);
            for r in 0..h {
                plane[r * w + q] = col[r];
            }
        }
        if inverse {
            let s = 1.0 / (h * w) as f64;
            plane.iter_mut().for_each(|z| *z *= s);
        }
    }
}

/// Unnormalized forward / (1/(H*W))-normalized inverse 2D DFT over the
/// trailing two axes of a (C,H,W) complex tensor.
#[derive(Clone, Copy, Debug)]
pub struct Fft2Op {
    pub inverse: bool,
}

impl PrimitiveOp for Fft2Op {
    fn name(&self) -> &'static str {
        if self.inverse { "ifft2" } else { "fft2" }
    }

    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.dtype() != Dtype::Complex || x.shape().len() != 3 {
            return Err(TensorError::Invalid {
                op: "fft2",
                detail: format!("want complex rank 3, got {:?} {}", x.shape(), x.dtype()),
            });
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut data = x.complex_data().to_vec();
        fft2_channels(&mut data, c, h, w, self.inverse);
        Tensor::complex(x.shape(), data)
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, cot: &Tensor) -> Result<Vec<Option<Tensor>>> {
        // Adjoint of the unnormalized forward DFT is the unnormalized
        // inverse; with the 1/(HW) convention that is HW * ifft2 for the
        // forward op and (1/HW) * fft2 for the inverse op.
        let x = inputs[0];
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut data = cot.complex_data().to_vec();
        fft2_channels(&mut data, c, h, w, !self.inverse);
        let s = if self.inverse { 1.0 / (h * w) as f64 } else { (h * w) as f64 };
        data.iter_mut().for_each(|z| *z *= s);
        Ok(vec![Some(Tensor::complex(cot.shape(), data)?)])
    }
}

/// Full 2D fractional transform with a learnable order. Inputs: the
/// (C,H,W) complex field and a real scalar; the applied order is
/// sign * alpha, so one parameter can drive a forward (+1) and an
/// inverse (-1) transform pair.
#[derive(Clone)]
pub struct Frft2Op {
    pub bh: Arc<FrftBasis>,
    pub bw: Arc<FrftBasis>,
    pub sign: f64,
}

impl PrimitiveOp for Frft2Op {
    fn name(&self) -> &'static str {
        "frft2"
    }

    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (h, w) = (self.bh.size(), self.bw.size());
        check_chw("frft2", x, h, w)?;
        let a = self.sign * alpha_of("frft2", inputs[1])?;
        let c = x.shape()[0];
        let th = self.bh.transform_matrix(a);
        let tw = self.bw.transform_matrix(a);
        let xd = x.complex_data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let t = cmm(&th, h, h, plane, w);
            out.extend(cmm_bt(&t, h, w, &tw, w));
        }
        Tensor::complex(x.shape(), out)
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, cot: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (h, w) = (self.bh.size(), self.bw.size());
        let a = self.sign * alpha_of("frft2", inputs[1])?;
        let c = x.shape()[0];
        let xd = x.complex_data();
        let gd = cot.complex_data();

        let th_neg = self.bh.transform_matrix(-a);
        let tw_neg = self.bw.transform_matrix(-a);
        let th = self.bh.transform_matrix(a);
        let tw = self.bw.transform_matrix(a);
        let all_h: Vec<usize> = (0..h).collect();
        let all_w: Vec<usize> = (0..w).collect();
        let dth = self.bh.d_transform_rows(a, &all_h);
        let dtw = self.bw.d_transform_rows(a, &all_w);

        let mut gx = Vec::with_capacity(c * h * w);
        let mut galpha = 0.0f64;
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let g = &gd[ch * h * w..(ch + 1) * h * w];
            // Unitary linear map: the input cotangent is the transform at
            // the negated order (conjugate transpose of a symmetric T).
            let t = cmm(&th_neg, h, h, g, w);
            gx.extend(cmm_bt(&t, h, w, &tw_neg, w));

            let tx = cmm(&th, h, h, plane, w);
            let dtx = cmm(&dth, h, h, plane, w);
            let dy1 = cmm_bt(&dtx, h, w, &tw, w);
            let dy2 = cmm_bt(&tx, h, w, &dtw, w);
            galpha += re_inner(g, &dy1) + re_inner(g, &dy2);
        }
        Ok(vec![
            Some(Tensor::complex(x.shape(), gx)?),
            Some(Tensor::scalar(self.sign * galpha)),
        ])
    }
}

/// Fractional transform fused with truncation to a kept sample block:
/// rows x cols of T_(sign*alpha) X T_(sign*alpha)^T per channel, without
/// materializing the full transform. (C,H,W) -> (C, rows, cols).
#[derive(Clone)]
pub struct KeptFrft2Op {
    pub bh: Arc<FrftBasis>,
    pub bw: Arc<FrftBasis>,
    pub rows: Arc<Vec<usize>>,
    pub cols: Arc<Vec<usize>>,
    pub sign: f64,
}

impl PrimitiveOp for KeptFrft2Op {
    fn name(&self) -> &'static str {
        "kept_frft2"
    }

    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (h, w) = (self.bh.size(), self.bw.size());
        check_chw("kept_frft2", x, h, w)?;
        let a = self.sign * alpha_of("kept_frft2", inputs[1])?;
        let c = x.shape()[0];
        let (nr, nc) = (self.rows.len(), self.cols.len());
        let ta = self.bh.transform_rows(a, &self.rows);
        let tb = self.bw.transform_rows(a, &self.cols);
        let xd = x.complex_data();
        let mut out = Vec::with_capacity(c * nr * nc);
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let t = cmm(&ta, nr, h, plane, w);
            out.extend(cmm_bt(&t, nr, w, &tb, nc));
        }
        Tensor::complex(&[c, nr, nc], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, cot: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (h, w) = (self.bh.size(), self.bw.size());
        let a = self.sign * alpha_of("kept_frft2", inputs[1])?;
        let c = x.shape()[0];
        let (nr, nc) = (self.rows.len(), self.cols.len());
        let xd = x.complex_data();
        let gd = cot.complex_data();

        let ta_neg = self.bh.transform_rows(-a, &self.rows);
        let tb_neg = self.bw.transform_rows(-a, &self.cols);
        let ta = self.bh.transform_rows(a, &self.rows);
        let tb = self.bw.transform_rows(a, &self.cols);
        let dta = self.bh.d_transform_rows(a, &self.rows);
        let dtb = self.bw.d_transform_rows(a, &self.cols);

        let mut gx = Vec::with_capacity(c * h * w);
        let mut galpha = 0.0f64;
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let g = &gd[ch * nr * nc..(ch + 1) * nr * nc];
            // gx = conj(A)^T G conj(B), and conj of a row block at order a
            // is the same block at order -a.
            let u = cmm_at(&ta_neg, nr, h, g, nc);
            gx.extend(cmm(&u, h, nc, &tb_neg, w));

            let ax = cmm(&ta, nr, h, plane, w);
            let dax = cmm(&dta, nr, h, plane, w);
            let dy1 = cmm_bt(&dax, nr, w, &tb, nc);
            let dy2 = cmm_bt(&ax, nr, w, &dtb, nc);
            galpha += re_inner(g, &dy1) + re_inner(g, &dy2);
        }
        Ok(vec![
            Some(Tensor::complex(x.shape(), gx)?),
            Some(Tensor::scalar(self.sign * galpha)),
        ])
    }
}

/// Adjoint-side fusion: scatters a kept (C, rows, cols) block onto the
/// transform-domain grid and applies T_(sign*alpha) along both axes in
/// one step, producing (C,H,W). With sign = -1 this is the inverse of
/// `KeptFrft2Op` restricted to the kept block.
#[derive(Clone)]
pub struct EmbedFrft2Op {
    pub bh: Arc<FrftBasis>,
    pub bw: Arc<FrftBasis>,
    pub rows: Arc<Vec<usize>>,
    pub cols: Arc<Vec<usize>>,
    pub sign: f64,
}

impl PrimitiveOp for EmbedFrft2Op {
    fn name(&self) -> &'static str {
        "embed_frft2"
    }

    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (nr, nc) = (self.rows.len(), self.cols.len());
        if x.dtype() != Dtype::Complex {
            return Err(TensorError::WrongDtype { op: "embed_frft2", expected: Dtype::Complex });
        }
        if x.shape().len() != 3 || x.shape()[1] != nr || x.shape()[2] != nc {
            return Err(TensorError::ShapeMismatch {
                op: "embed_frft2",
                lhs: x.shape().to_vec(),
                rhs: vec![x.shape().first().copied().unwrap_or(0), nr, nc],
            });
        }
        let a = self.sign * alpha_of("embed_frft2", inputs[1])?;
        let (h, w) = (self.bh.size(), self.bw.size());
        let c = x.shape()[0];
        // y = B0^T Xk C0 with B0 = T_a[rows,:], C0 = T_a[cols,:]; selecting
        // columns of the symmetric T is selecting rows, so this is exactly
        // "embed then transform" at cost |rows|,|cols| instead of h,w.
        let b0 = self.bh.transform_rows(a, &self.rows);
        let c0 = self.bw.transform_rows(a, &self.cols);
        let xd = x.complex_data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let xk = &xd[ch * nr * nc..(ch + 1) * nr * nc];
            let u = cmm_at(&b0, nr, h, xk, nc);
            out.extend(cmm(&u, h, nc, &c0, w));
        }
        Tensor::complex(&[c, h, w], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, cot: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let a = self.sign * alpha_of("embed_frft2", inputs[1])?;
        let (h, w) = (self.bh.size(), self.bw.size());
        let c = x.shape()[0];
        let (nr, nc) = (self.rows.len(), self.cols.len());
        let xd = x.complex_data();
        let gd = cot.complex_data();

        let b0_neg = self.bh.transform_rows(-a, &self.rows);
        let c0_neg = self.bw.transform_rows(-a, &self.cols);
        let b0 = self.bh.transform_rows(a, &self.rows);
        let c0 = self.bw.transform_rows(a, &self.cols);
        let db0 = self.bh.d_transform_rows(a, &self.rows);
        let dc0 = self.bw.d_transform_rows(a, &self.cols);

        let mut gx = Vec::with_capacity(c * nr * nc);
        let mut galpha = 0.0f64;
        for ch in 0..c {
            let xk = &xd[ch * nr * nc..(ch + 1) * nr * nc];
            let g = &gd[ch * h * w..(ch + 1) * h * w];
            let u = cmm(&b0_neg, nr, h, g, w);
            gx.extend(cmm_bt(&u, nr, w, &c0_neg, nc));

            let ub = cmm_at(&db0, nr, h, xk, nc);
            let dy1 = cmm(&ub, h, nc, &c0, w);
            let uc = cmm_at(&b0, nr, h, xk, nc);
            let dy2 = cmm(&uc, h, nc, &dc0, w);
            galpha += re_inner(g, &dy1) + re_inner(g, &dy2);
        }
        Ok(vec![
            Some(Tensor::complex(x.shape(), gx)?),
            Some(Tensor::scalar(self.sign * galpha)),
        ])
    }
}
