//! Dense third-order tensors and the multilinear kernels built on them.
//!
//! Storage order: the first index varies fastest, so entry `(i, j, k)` of an
//! `I1 x I2 x I3` tensor lives at `i + I1 * (j + I2 * k)`. Mode-m
//! matricization and the Khatri-Rao column ordering are tied to this layout:
//! with it, `X_(1) = A (C ⊙ B)ᵀ`, `X_(2) = B (C ⊙ A)ᵀ` and `X_(3) = C (B ⊙ A)ᵀ`
//! for `X = ⟦A, B, C⟧`.
//!
//! All indices in this API are zero-based.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default tolerance for the frontal-slice symmetry invariant.
pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-8;

#[derive(Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor3 {:?} {:?}", self.dims, self.data)
    }
}

impl Tensor3 {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Shape(format!("tensor dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Shape(format!(
                "{} values cannot fill a tensor of dims {dims:?}",
                data.len()
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self> {
        Tensor3::new(dims, vec![0.0; dims.0 * dims.1 * dims.2])
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for k in 0..dims.2 {
            for j in 0..dims.1 {
                for i in 0..dims.0 {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor3::new(dims, data)
    }

    /// Stacks equally-shaped matrices as frontal slices along the third mode.
    pub fn from_frontal_slices(slices: &[Matrix]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("no slices to stack".into()))?;
        let (rows, cols) = first.shape();
        if let Some((k, s)) = slices.iter().enumerate().find(|(_, s)| s.shape() != (rows, cols)) {
            return Err(Error::Shape(format!(
                "slice {k} is {}x{}, expected {rows}x{cols}",
                s.rows(),
                s.cols()
            )));
        }
        Tensor3::from_fn((rows, cols, slices.len()), |i, j, k| slices[k][(i, j)])
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        self.check_index(i, j, k)?;
        Ok(self.data[self.offset(i, j, k)])
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) -> Result<()> {
        self.check_index(i, j, k)?;
        let o = self.offset(i, j, k);
        self.data[o] = value;
        Ok(())
    }

    #[inline]
    pub(crate) fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    fn check_index(&self, i: usize, j: usize, k: usize) -> Result<()> {
        if i >= self.dims.0 || j >= self.dims.1 || k >= self.dims.2 {
            return Err(Error::OutOfRange {
                i,
                j,
                k,
                dims: self.dims,
            });
        }
        Ok(())
    }

    /// The `I1 x I2` matrix at third index `k`.
    pub fn frontal_slice(&self, k: usize) -> Result<Matrix> {
        if k >= self.dims.2 {
            return Err(Error::OutOfRange {
                i: 0,
                j: 0,
                k,
                dims: self.dims,
            });
        }
        Ok(Matrix::from_fn(self.dims.0, self.dims.1, |i, j| self.at(i, j, k)))
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("tensor dims {:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor3::new(self.dims, data)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("tensor dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// `sqrt` of the sum of squared entries.
pub fn frobenius_norm(t: &Tensor3) -> f64 {
    t.frobenius_sq().sqrt()
}

fn mode_index(mode: usize) -> Result<usize> {
    match mode {
        1..=3 => Ok(mode - 1),
        m => Err(Error::InvalidMode(m)),
    }
}

/// Column index of entry `(i, j, k)` in the mode-`mode` unfolding: the
/// remaining indices are combined with the lower mode varying fastest.
#[inline]
fn unfold_col(dims: (usize, usize, usize), mode: usize, i: usize, j: usize, k: usize) -> (usize, usize) {
    match mode {
        1 => (i, j + dims.1 * k),
        2 => (j, i + dims.0 * k),
        _ => (k, i + dims.0 * j),
    }
}

/// Mode-`mode` matricization (`mode` in 1..=3).
pub fn matricize(t: &Tensor3, mode: usize) -> Result<Matrix> {
    mode_index(mode)?;
    let (d1, d2, d3) = t.dims;
    let (rows, cols) = match mode {
        1 => (d1, d2 * d3),
        2 => (d2, d1 * d3),
        _ => (d3, d1 * d2),
    };
    let mut out = Matrix::zeros(rows, cols);
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..d1 {
                out[unfold_col(t.dims, mode, i, j, k)] = t.at(i, j, k);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`matricize`].
pub fn refold(m: &Matrix, mode: usize, dims: (usize, usize, usize)) -> Result<Tensor3> {
    mode_index(mode)?;
    let expected = match mode {
        1 => (dims.0, dims.1 * dims.2),
        2 => (dims.1, dims.0 * dims.2),
        _ => (dims.2, dims.0 * dims.1),
    };
    if m.shape() != expected {
        return Err(Error::Shape(format!(
            "a {}x{} matrix is not a mode-{mode} unfolding of dims {dims:?}",
            m.rows(),
            m.cols()
        )));
    }
    Tensor3::from_fn(dims, |i, j, k| m[unfold_col(dims, mode, i, j, k)])
}

/// Column-wise Kronecker product; `b`'s row index varies fastest.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "Khatri-Rao needs equal column counts, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let r = a.cols();
    let mut out = Matrix::zeros(a.rows() * b.rows(), r);
    for ia in 0..a.rows() {
        let ar = a.row(ia);
        for ib in 0..b.rows() {
            let br = b.row(ib);
            let row = out.row_mut(ia * b.rows() + ib);
            for c in 0..r {
                row[c] = ar[c] * br[c];
            }
        }
    }
    Ok(out)
}

/// Elementwise product of equally-shaped matrices.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

/// Factor matrices of a rank-`R` CP model of a third-order tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CpFactors {
    factors: [Matrix; 3],
}

impl CpFactors {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let r = a.cols();
        if b.cols() != r || c.cols() != r {
            return Err(Error::Shape(format!(
                "factor ranks differ: {}, {}, {}",
                a.cols(),
                b.cols(),
                c.cols()
            )));
        }
        if r == 0 {
            return Err(Error::InvalidArgument("CP rank must be at least 1".into()));
        }
        Ok(CpFactors { factors: [a, b, c] })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].cols()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.factors[0].rows(), self.factors[1].rows(), self.factors[2].rows())
    }

    /// Factor of mode `mode` (1..=3).
    pub fn factor(&self, mode: usize) -> &Matrix {
        &self.factors[mode - 1]
    }

    pub fn factors(&self) -> &[Matrix; 3] {
        &self.factors
    }

    pub fn into_factors(self) -> [Matrix; 3] {
        self.factors
    }

    pub(crate) fn factor_mut(&mut self, mode: usize) -> &mut Matrix {
        &mut self.factors[mode - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.factors.iter().all(Matrix::is_finite)
    }
}

/// `Σ_r a_r ∘ b_r ∘ c_r`.
pub fn cp_reconstruct(f: &CpFactors) -> Tensor3 {
    let [a, b, c] = &f.factors;
    let r = f.rank();
    let dims = f.dims();
    let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    let mut w = vec![0.0; r];
    for k in 0..dims.2 {
        for j in 0..dims.1 {
            for (x, (bj, ck)) in w.iter_mut().zip(b.row(j).iter().zip(c.row(k))) {
                *x = bj * ck;
            }
            for i in 0..dims.0 {
                data.push(dot(a.row(i), &w));
            }
        }
    }
    Tensor3 { dims, data }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn check_model_shape(t: &Tensor3, a: &Matrix, b: &Matrix, c: &Matrix) -> Result<()> {
    let r = a.cols();
    if b.cols() != r || c.cols() != r {
        return Err(Error::Shape("factor column counts differ".into()));
    }
    if (a.rows(), b.rows(), c.rows()) != t.dims {
        return Err(Error::Shape(format!(
            "factor rows ({}, {}, {}) do not match tensor dims {:?}",
            a.rows(),
            b.rows(),
            c.rows(),
            t.dims
        )));
    }
    Ok(())
}

/// `‖t − ⟦a, b, c⟧‖²_F`, evaluated entrywise without materializing the model.
pub fn residual_sq(t: &Tensor3, a: &Matrix, b: &Matrix, c: &Matrix) -> Result<f64> {
    check_model_shape(t, a, b, c)?;
    let (d1, d2, d3) = t.dims;
    let mut w = vec![0.0; a.cols()];
    let mut total = 0.0;
    for k in 0..d3 {
        for j in 0..d2 {
            for (x, (bj, ck)) in w.iter_mut().zip(b.row(j).iter().zip(c.row(k))) {
                *x = bj * ck;
            }
            let base = d1 * (j + d2 * k);
            for i in 0..d1 {
                let e = t.data[base + i] - dot(a.row(i), &w);
                total += e * e;
            }
        }
    }
    Ok(total)
}

/// Matricized tensor times Khatri-Rao product for mode `mode`.
///
/// `first` and `second` are the factors of the two remaining modes in
/// increasing mode order, so that
/// - mode 1: `X_(1) (second ⊙ first)` with `first: I2 x R`, `second: I3 x R`
/// - mode 2: `X_(2) (second ⊙ first)` with `first: I1 x R`, `second: I3 x R`
/// - mode 3: `X_(3) (second ⊙ first)` with `first: I1 x R`, `second: I2 x R`
pub fn mttkrp(t: &Tensor3, mode: usize, first: &Matrix, second: &Matrix) -> Result<Matrix> {
    mode_index(mode)?;
    let (d1, d2, d3) = t.dims;
    let r = first.cols();
    if second.cols() != r {
        return Err(Error::Shape("mttkrp factor column counts differ".into()));
    }
    let (need_first, need_second) = match mode {
        1 => (d2, d3),
        2 => (d1, d3),
        _ => (d1, d2),
    };
    if first.rows() != need_first || second.rows() != need_second {
        return Err(Error::Shape(format!(
            "mttkrp mode {mode}: factors {}x{r} and {}x{r} do not fit dims {:?}",
            first.rows(),
            second.rows(),
            t.dims
        )));
    }
    let x = &t.data;
    let mut acc = vec![0.0; r];
    match mode {
        1 => {
            let mut out = Matrix::zeros(d1, r);
            let o = out.as_mut_slice();
            for k in 0..d3 {
                let ck = second.row(k);
                for j in 0..d2 {
                    for (w, (bj, c)) in acc.iter_mut().zip(first.row(j).iter().zip(ck)) {
                        *w = bj * c;
                    }
                    let base = d1 * (j + d2 * k);
                    for i in 0..d1 {
                        let v = x[base + i];
                        for (oo, w) in o[i * r..(i + 1) * r].iter_mut().zip(&acc) {
                            *oo += v * w;
                        }
                    }
                }
            }
            Ok(out)
        }
        2 => {
            let mut out = Matrix::zeros(d2, r);
            for k in 0..d3 {
                let ck = second.row(k);
                for j in 0..d2 {
                    acc.iter_mut().for_each(|w| *w = 0.0);
                    let base = d1 * (j + d2 * k);
                    for i in 0..d1 {
                        let v = x[base + i];
                        for (w, ai) in acc.iter_mut().zip(first.row(i)) {
                            *w += v * ai;
                        }
                    }
                    for ((oo, w), c) in out.row_mut(j).iter_mut().zip(&acc).zip(ck) {
                        *oo += w * c;
                    }
                }
            }
            Ok(out)
        }
        _ => {
            let mut out = Matrix::zeros(d3, r);
            for k in 0..d3 {
                let row = out.row_mut(k);
                for j in 0..d2 {
                    acc.iter_mut().for_each(|w| *w = 0.0);
                    let base = d1 * (j + d2 * k);
                    for i in 0..d1 {
                        let v = x[base + i];
                        for (w, ai) in acc.iter_mut().zip(first.row(i)) {
                            *w += v * ai;
                        }
                    }
                    for ((oo, w), bj) in row.iter_mut().zip(&acc).zip(second.row(j)) {
                        *oo += w * bj;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Result of a partial-symmetry check on modes 1 and 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetryCheck {
    pub symmetric: bool,
    pub max_asymmetry: f64,
    /// Slice attaining `max_asymmetry`.
    pub worst_slice: usize,
}

pub fn check_partial_symmetry(t: &Tensor3, tol: f64) -> Result<SymmetryCheck> {
    let (d1, d2, d3) = t.dims;
    if d1 != d2 {
        return Err(Error::Shape(format!(
            "partial symmetry needs square frontal slices, got {d1}x{d2}"
        )));
    }
    let mut max_asymmetry = 0.0;
    let mut worst_slice = 0;
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..j {
                let a = (t.at(i, j, k) - t.at(j, i, k)).abs();
                if a > max_asymmetry || a.is_nan() {
                    max_asymmetry = a;
                    worst_slice = k;
                }
            }
        }
    }
    Ok(SymmetryCheck {
        symmetric: max_asymmetry <= tol,
        max_asymmetry,
        worst_slice,
    })
}

/// One view's `N` symmetric `M x M` affinity matrices stacked as an
/// `M x M x N` partially-symmetric tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphViewTensor {
    tensor: Tensor3,
}

impl GraphViewTensor {
    /// Validates finiteness and slice symmetry within `tol`.
    pub fn new(tensor: Tensor3, tol: f64) -> Result<Self> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite("affinity tensor has non-finite entries".into()));
        }
        let check = check_partial_symmetry(&tensor, tol)?;
        if !check.symmetric {
            return Err(Error::Asymmetric {
                slice: check.worst_slice,
                asymmetry: check.max_asymmetry,
                tol,
            });
        }
        Ok(GraphViewTensor { tensor })
    }

    /// Accepts slices whose asymmetry is at most `accept_tol` and replaces
    /// each by `(W + Wᵀ)/2`, leaving exactly symmetric slices.
    pub fn symmetrized(tensor: Tensor3, accept_tol: f64) -> Result<Self> {
        let t = GraphViewTensor::new(tensor, accept_tol)?.tensor;
        let (m, _, n) = t.dims;
        let sym = Tensor3::from_fn((m, m, n), |i, j, k| 0.5 * (t.at(i, j, k) + t.at(j, i, k)))?;
        Ok(GraphViewTensor { tensor: sym })
    }

    pub fn from_slices(slices: &[Matrix], tol: f64) -> Result<Self> {
        GraphViewTensor::new(Tensor3::from_frontal_slices(slices)?, tol)
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.tensor
    }

    /// `M`
    pub fn node_count(&self) -> usize {
        self.tensor.dims.0
    }

    /// `N`
    pub fn subject_count(&self) -> usize {
        self.tensor.dims.2
    }
}
