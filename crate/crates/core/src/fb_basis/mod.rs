//! Fixed Fourier-Bessel filter bank.
//!
//! Each basis is a real disk harmonic `J_n(λ_{n,k}·r/R)·cos(nθ)` or
//! `J_n(λ_{n,k}·r/R)·sin(nθ)` sampled on the pixel centres of an `s×s` grid
//! with disk radius `R = s/2`. Samples outside the disk are zero and every
//! sampled grid has unit Frobenius norm. Bases are selected in ascending
//! `λ` (cosine before sine on ties), built for every size in the bank and
//! zero-padded, centred, into the largest size.
//!
//! Bank index `b = size_index · count + basis_index`, so the first `count`
//! entries belong to the smallest size.

mod bessel;

use std::fmt::Write as _;

use nalgebra::DMatrix;

pub use bessel::{bessel_j, bessel_zero, BesselOrder, MAX_ORDER};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bases whose `λ` exceeds this would need orders above [`MAX_ORDER`]
/// (the first zero of `J_9` is ≈ 13.35).
const LAMBDA_CAP: f64 = 13.0;

const MIN_SINGULAR_VALUE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Parity {
    Cos,
    Sin,
}

/// Identifies one Fourier-Bessel function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbIndex {
    pub n: BesselOrder,
    pub k: u32,
    pub parity: Parity,
    /// `k`-th positive zero of `J_n`.
    pub lambda: f64,
}

impl FbIndex {
    pub fn new(n: u32, k: u32, parity: Parity) -> Result<Self> {
        let order = BesselOrder::new(n)?;
        if parity == Parity::Sin && n == 0 {
            return Err(Error::Domain("sine parity requires n >= 1".into()));
        }
        Ok(Self {
            n: order,
            k,
            parity,
            lambda: bessel_zero(order, k)?,
        })
    }

    pub fn label(&self) -> String {
        let p = match self.parity {
            Parity::Cos => "cos",
            Parity::Sin => "sin",
        };
        format!("n{}_k{}_{p}", self.n.get(), self.k)
    }
}

/// A basis sampled on an `s×s` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis2D {
    pub index: FbIndex,
    pub size: usize,
    /// Row-major `size × size` samples.
    pub grid: Vec<f64>,
}

impl Basis2D {
    /// Samples and normalises one basis.
    pub fn sample(index: FbIndex, size: usize) -> Result<Self> {
        if size < 3 || size.is_multiple_of(2) {
            return Err(Error::Domain(format!("basis size must be odd and >= 3, got {size}")));
        }
        let centre = (size as f64 - 1.0) / 2.0;
        let radius = size as f64 / 2.0;
        let n = index.n.get() as f64;
        let mut grid = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                let y = i as f64 - centre;
                let x = j as f64 - centre;
                let r = y.hypot(x);
                if r > radius {
                    continue;
                }
                let theta = y.atan2(x);
                let angular = match index.parity {
                    Parity::Cos => (n * theta).cos(),
                    Parity::Sin => (n * theta).sin(),
                };
                grid[i * size + j] = bessel_j(index.n, index.lambda * r / radius)? * angular;
            }
        }
        let norm = grid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Basis(format!(
                "{} vanishes on a {size}x{size} grid",
                index.label()
            )));
        }
        grid.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { index, size, grid })
    }

    /// Centred zero-padding into a `target × target` frame.
    pub fn padded(&self, target: usize) -> Vec<f64> {
        let off = (target - self.size) / 2;
        let mut out = vec![0.0; target * target];
        for i in 0..self.size {
            let src = &self.grid[i * self.size..(i + 1) * self.size];
            out[(i + off) * target + off..(i + off) * target + off + self.size].copy_from_slice(src);
        }
        out
    }

    /// Row-major CSV with 17 significant digits.
    pub fn to_csv(&self) -> String {
        grid_csv(&self.grid, self.size)
    }
}

pub fn grid_csv(grid: &[f64], size: usize) -> String {
    let mut out = String::new();
    for row in grid.chunks(size) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// The first `count` Fourier-Bessel functions in ascending `λ`.
pub fn select_indices(count: usize) -> Result<Vec<FbIndex>> {
    if count == 0 {
        return Err(Error::Domain("basis count must be >= 1".into()));
    }
    let mut all = Vec::new();
    for n in 0..=MAX_ORDER {
        for k in 1..=6 {
            let cos = FbIndex::new(n, k, Parity::Cos)?;
            if cos.lambda > LAMBDA_CAP {
                break;
            }
            all.push(cos);
            if n > 0 {
                all.push(FbIndex { parity: Parity::Sin, ..cos });
            }
        }
    }
    all.sort_by(|a, b| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(a.parity.cmp(&b.parity))
    });
    if count > all.len() {
        return Err(Error::Domain(format!(
            "basis count {count} exceeds the {} supported functions",
            all.len()
        )));
    }
    all.truncate(count);
    Ok(all)
}

/// Least-squares coefficients of a kernel plus the reconstruction residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub coeffs: Vec<f64>,
    /// `‖kernel − flatᵀ·coeffs‖₂`
    pub residual: f64,
}

/// Immutable multi-size basis bank.
#[derive(Debug, Clone)]
pub struct BasisBank {
    sizes: Vec<usize>,
    count: usize,
    bases: Vec<Basis2D>,
    max_size: usize,
    /// `len() × max_size²`, one padded basis per row.
    flat: Vec<f64>,
    /// Lower Cholesky factor of `flat · flatᵀ`.
    gram_chol: Vec<f64>,
    min_singular: f64,
}

impl Default for BasisBank {
    fn default() -> Self {
        Self::new(&[3, 5, 7, 9], 6).expect("default bank is well conditioned")
    }
}

impl BasisBank {
    pub fn new(sizes: &[usize], count: usize) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Domain("bank needs at least one size".into()));
        }
        if let Some(bad) = sizes.iter().find(|&&s| s < 3 || s % 2 == 0) {
            return Err(Error::Domain(format!("basis size must be odd and >= 3, got {bad}")));
        }
        let indices = select_indices(count)?;
        let max_size = *sizes.iter().max().expect("non-empty");
        let mut bases = Vec::with_capacity(sizes.len() * count);
        for &s in sizes {
            for &idx in &indices {
                bases.push(Basis2D::sample(idx, s)?);
            }
        }
        let cols = max_size * max_size;
        let flat: Vec<f64> = bases.iter().flat_map(|b| b.padded(max_size)).collect();

        let rows = bases.len();
        let min_singular = if rows <= cols {
            let m = DMatrix::from_row_slice(rows, cols, &flat);
            m.singular_values().min()
        } else {
            0.0
        };
        if !(min_singular > MIN_SINGULAR_VALUE) {
            return Err(Error::Basis(format!(
                "flat basis matrix is rank deficient (smallest singular value {min_singular:e})"
            )));
        }
        let gram_chol = cholesky(&gram(&flat, rows, cols), rows)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            count,
            bases,
            max_size,
            flat,
            gram_chol,
            min_singular,
        })
    }

    /// Number of bases, `|F|·|S|`.
    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn count_per_size(&self) -> usize {
        self.count
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn bases(&self) -> &[Basis2D] {
        &self.bases
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn padded(&self, b: usize) -> &[f64] {
        let cols = self.max_size * self.max_size;
        &self.flat[b * cols..(b + 1) * cols]
    }

    pub fn smallest_singular_value(&self) -> f64 {
        self.min_singular
    }

    /// Position of bank entry `b` in [`sizes`](Self::sizes).
    pub fn size_slot(&self, b: usize) -> usize {
        b / self.count
    }

    /// The bank as a fixed `len() × 1 × max × max` convolution kernel.
    pub fn conv_weight(&self) -> Tensor {
        Tensor::new(&[self.len(), 1, self.max_size, self.max_size], self.flat.clone())
            .expect("flat matrix matches bank dimensions")
    }

    /// `flatᵀ · coeffs` reshaped to `max × max`.
    pub fn reconstruct_kernel(&self, coeffs: &[f64]) -> Result<Tensor> {
        if coeffs.len() != self.len() {
            return Err(Error::shape(
                "reconstruct_kernel",
                format!("{} coefficients for {} bases", coeffs.len(), self.len()),
            ));
        }
        let cols = self.max_size * self.max_size;
        let mut out = vec![0.0; cols];
        for (row, &c) in self.flat.chunks(cols).zip(coeffs) {
            if c != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o += c * v);
            }
        }
        Tensor::new(&[self.max_size, self.max_size], out)
    }

    /// Least-squares fit of `kernel` in the span of the bank.
    pub fn decompose_kernel(&self, kernel: &Tensor) -> Result<Decomposition> {
        if kernel.shape() != [self.max_size, self.max_size] {
            return Err(Error::shape(
                "decompose_kernel",
                format!("kernel {:?}, bank expects {s}x{s}", kernel.shape(), s = self.max_size),
            ));
        }
        let cols = self.max_size * self.max_size;
        let rhs: Vec<f64> = self
            .flat
            .chunks(cols)
            .map(|row| row.iter().zip(kernel.data()).map(|(a, b)| a * b).sum())
            .collect();
        let coeffs = cholesky_solve(&self.gram_chol, self.len(), &rhs);
        let recon = self.reconstruct_kernel(&coeffs)?;
        let residual = recon
            .data()
            .iter()
            .zip(kernel.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(Decomposition { coeffs, residual })
    }
}

fn gram(flat: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    crate::autodiff::gemm(rows, cols, rows, flat, false, flat, true, 0.0, &mut g);
    g
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return Err(Error::Basis("Gram matrix is not positive definite".into()));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}
