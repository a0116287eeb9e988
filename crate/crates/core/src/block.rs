//! Block-diagonal operators with equally sized square blocks.
//!
//! A dense matrix is the one-block case. Dilated ODE Hamiltonians are
//! block-diagonal in the Fourier basis of the ξ-register, so every
//! propagator and term operator is stored in this form.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::linalg::{self, c, CMat, CVec};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockOp {
    size: usize,
    blocks: Vec<CMat>,
}

impl BlockOp {
    pub fn dense(m: CMat) -> Self {
        assert!(m.is_square(), "block must be square");
        Self {
            size: m.nrows(),
            blocks: vec![m],
        }
    }

    pub fn from_blocks(blocks: Vec<CMat>) -> Self {
        assert!(!blocks.is_empty(), "need at least one block");
        let size = blocks[0].nrows();
        assert!(
            blocks.iter().all(|b| b.nrows() == size && b.ncols() == size),
            "blocks must share a square shape"
        );
        Self { size, blocks }
    }

    pub fn identity(size: usize, count: usize) -> Self {
        Self::from_blocks(vec![linalg::identity(size); count])
    }

    pub fn zeros(size: usize, count: usize) -> Self {
        Self::from_blocks(vec![CMat::zeros(size, size); count])
    }

    pub fn dim(&self) -> usize {
        self.size * self.blocks.len()
    }

    pub fn block_size(&self) -> usize {
        self.size
    }

    pub fn blocks(&self) -> &[CMat] {
        &self.blocks
    }

    pub fn mul_vec(&self, v: &CVec) -> CVec {
        if self.blocks.len() == 1 {
            return &self.blocks[0] * v;
        }
        let b = self.size;
        let mut out = CVec::zeros(v.len());
        for (p, blk) in self.blocks.iter().enumerate() {
            out.rows_mut(p * b, b).copy_from(&(blk * v.rows(p * b, b)));
        }
        out
    }

    /// `self · m`.
    pub fn mul_mat(&self, m: &CMat) -> CMat {
        if self.blocks.len() == 1 {
            return &self.blocks[0] * m;
        }
        let b = self.size;
        let mut out = CMat::zeros(m.nrows(), m.ncols());
        for (p, blk) in self.blocks.iter().enumerate() {
            out.rows_mut(p * b, b).copy_from(&(blk * m.rows(p * b, b)));
        }
        out
    }

    /// `self · m · self†`.
    pub fn conjugate(&self, m: &CMat) -> CMat {
        let left = self.mul_mat(m);
        self.mul_mat(&left.adjoint()).adjoint()
    }

    pub fn adjoint(&self) -> Self {
        Self {
            size: self.size,
            blocks: self.blocks.iter().map(|b| b.adjoint()).collect(),
        }
    }

    /// `self · rhs`.
    pub fn compose(&self, rhs: &BlockOp) -> Self {
        assert_eq!(self.size, rhs.size);
        assert_eq!(self.blocks.len(), rhs.blocks.len());
        Self {
            size: self.size,
            blocks: self
                .blocks
                .iter()
                .zip(&rhs.blocks)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        let a = c(alpha, 0.0);
        for x in &mut self.blocks {
            *x *= a;
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &BlockOp) {
        let a = c(alpha, 0.0);
        for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
            *x += y * a;
        }
    }

    pub fn to_dense(&self) -> CMat {
        if self.blocks.len() == 1 {
            return self.blocks[0].clone();
        }
        let n = self.dim();
        let b = self.size;
        let mut out = CMat::zeros(n, n);
        for (p, blk) in self.blocks.iter().enumerate() {
            out.view_mut((p * b, p * b), (b, b)).copy_from(blk);
        }
        out
    }

    /// Eigendecomposition of a Hermitian block operator.
    pub fn eigh(&self) -> BlockEigen {
        let mut values = Vec::with_capacity(self.dim());
        let mut vectors = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (vals, vecs) = linalg::eigh(blk);
            values.extend(vals.iter().copied());
            vectors.push(vecs);
        }
        BlockEigen {
            values,
            vectors: BlockOp::from_blocks(vectors),
        }
    }

    /// `exp(−i self t)` for Hermitian `self`.
    pub fn expm_hermitian(&self, t: f64) -> Self {
        self.eigh().exp(t)
    }

    pub fn max_abs_diff(&self, other: &BlockOp) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues (block-major) and block-diagonal eigenvector matrix.
#[derive(Clone, Debug)]
pub struct BlockEigen {
    pub values: Vec<f64>,
    pub vectors: BlockOp,
}

impl BlockEigen {
    /// `V diag(e^{−iλt}) V†`.
    pub fn exp(&self, t: f64) -> BlockOp {
        self.map(|lam| Complex64::from_polar(1.0, -lam * t))
    }

    pub fn map(&self, f: impl Fn(f64) -> Complex64) -> BlockOp {
        let b = self.vectors.size;
        let blocks = self
            .vectors
            .blocks
            .iter()
            .enumerate()
            .map(|(p, vecs)| {
                let vals = DVector::from_iterator(b, self.values[p * b..(p + 1) * b].iter().copied());
                linalg::spectral_map(&vals, vecs, &f)
            })
            .collect();
        BlockOp::from_blocks(blocks)
    }

    /// Coordinates `V† v` in the eigenbasis.
    pub fn coords(&self, v: &CVec) -> CVec {
        self.vectors.adjoint().mul_vec(v)
    }

    /// Diagonal `⟨h_l| m |h_l⟩` of `m` in the eigenbasis.
    pub fn diagonal_of(&self, m: &CMat) -> Vec<Complex64> {
        let b = self.vectors.size;
        let mut out = Vec::with_capacity(self.values.len());
        for (p, vecs) in self.vectors.blocks.iter().enumerate() {
            let sub = m.view((p * b, p * b), (b, b));
            let mv = sub * vecs;
            for l in 0..b {
                out.push(vecs.column(l).dotc(&mv.column(l)));
            }
        }
        out
    }
}
