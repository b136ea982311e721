//! Computable generalization bounds for multiview and co-regularized
//! regression.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::kernels::max_asymmetry;

/// Gram blocks of two views with the unlabeled rows first:
///
/// ```text
/// K1 = [ A  C ]    K2 = [ D  F ]
///      [ C' B ]         [ F' E ]
/// ```
///
/// `A`, `D` are `u x u`; `B`, `E` are `l x l`; `C`, `F` are `u x l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramBlocks {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl GramBlocks {
    pub fn unlabeled(&self) -> usize {
        self.a.nrows()
    }

    pub fn labeled(&self) -> usize {
        self.b.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (u, l) = (self.unlabeled(), self.labeled());
        for (name, m, rows, cols) in [
            ("A", &self.a, u, u),
            ("D", &self.d, u, u),
            ("B", &self.b, l, l),
            ("E", &self.e, l, l),
            ("C", &self.c, u, l),
            ("F", &self.f, u, l),
        ] {
            if m.shape() != (rows, cols) {
                return Err(Error::DimensionMismatch(format!(
                    "block {name} is {:?}, expected {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
        }
        for (name, m) in [("A", &self.a), ("B", &self.b), ("D", &self.d), ("E", &self.e)] {
            let asym = max_asymmetry(m);
            if asym > 1e-10 * m.amax().max(1.0) {
                return Err(Error::Numerical(format!("block {name} is not symmetric (max |m - m'| = {asym:e})")));
            }
        }
        Ok(())
    }

    /// Reassembles `(K1, K2)` in the unlabeled-first layout.
    pub fn assemble(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let join = |top_left: &DMatrix<f64>, off: &DMatrix<f64>, bottom_right: &DMatrix<f64>| {
            let (u, l) = (top_left.nrows(), bottom_right.nrows());
            let mut k = DMatrix::zeros(u + l, u + l);
            k.view_mut((0, 0), (u, u)).copy_from(top_left);
            k.view_mut((0, u), (u, l)).copy_from(off);
            k.view_mut((u, 0), (l, u)).copy_from(&off.transpose());
            k.view_mut((u, u), (l, l)).copy_from(bottom_right);
            k
        };
        (join(&self.a, &self.c, &self.b), join(&self.d, &self.f, &self.e))
    }
}

/// Splits two `(l + u) x (l + u)` Gram matrices into [`GramBlocks`].
///
/// Without `ordering`, the first `u = n - labeled` rows are the unlabeled
/// ones. With `ordering`, row `ordering[i]` of the inputs becomes row `i` of
/// the unlabeled-first layout.
pub fn split_gram_blocks(
    k1: &DMatrix<f64>,
    k2: &DMatrix<f64>,
    labeled: usize,
    ordering: Option<&[usize]>,
) -> Result<GramBlocks> {
    let n = k1.nrows();
    if k1.shape() != (n, n) || k2.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "gram matrices must be square and equal in size, got {:?} and {:?}",
            k1.shape(),
            k2.shape()
        )));
    }
    if labeled > n {
        return Err(Error::DimensionMismatch(format!("{labeled} labeled rows exceed matrix size {n}")));
    }
    let (k1, k2) = match ordering {
        Some(p) => {
            check_dims("ordering length", n, p.len())?;
            let mut seen = vec![false; n];
            for &i in p {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidParameter("ordering is not a permutation".into()));
                }
            }
            (permute(k1, p), permute(k2, p))
        }
        None => (k1.clone(), k2.clone()),
    };
    let u = n - labeled;
    let block = |k: &DMatrix<f64>, r: usize, c: usize, nr: usize, nc: usize| k.view((r, c), (nr, nc)).into_owned();
    Ok(GramBlocks {
        a: block(&k1, 0, 0, u, u),
        c: block(&k1, 0, u, u, labeled),
        b: block(&k1, u, u, labeled, labeled),
        d: block(&k2, 0, 0, u, u),
        f: block(&k2, 0, u, u, labeled),
        e: block(&k2, u, u, labeled, labeled),
    })
}

fn permute(k: &DMatrix<f64>, p: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(p[i], p[j])])
}

/// Pieces of the squared Rademacher bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RademacherBound {
    /// `(tr B / a1 + tr E / a2 - reduction) / l^2`
    pub bound_sq: f64,
    /// `(tr B / a1 + tr E / a2) / l^2`, the value without unlabeled data.
    pub supervised_sq: f64,
    /// `sum_i |C_i - F_i|^2` in the `(I / a_co + A / a1 + D / a2)^{-1}` norm,
    /// before dividing by `l^2`.
    pub reduction: f64,
}

fn check_coefficients(a1: f64, a2: f64, a_co: f64) -> Result<()> {
    for (name, v) in [("a1", a1), ("a2", a2), ("a_co", a_co)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(())
}

/// Squared Rademacher complexity bound of the co-regularized class.
///
/// One Cholesky factorization of `I / a_co + A / a1 + D / a2` is shared by all
/// labeled columns; per-column norms are summed in column order.
///
/// The difference columns are unweighted `C - F`. With `a1 = a2 = 1` the
/// result is a trace of a Schur complement and hence nonnegative; for larger
/// coefficients the subtracted term can exceed the supervised one.
pub fn rademacher_bound(blocks: &GramBlocks, a1: f64, a2: f64, a_co: f64) -> Result<RademacherBound> {
    blocks.validate()?;
    check_coefficients(a1, a2, a_co)?;
    let (u, l) = (blocks.unlabeled(), blocks.labeled());
    if l == 0 {
        return Err(Error::InsufficientData("the bound needs at least one labeled row".into()));
    }
    let supervised = blocks.b.trace() / a1 + blocks.e.trace() / a2;
    let reduction = if u == 0 {
        0.0
    } else {
        let mut m = &blocks.a / a1 + &blocks.d / a2;
        for i in 0..u {
            m[(i, i)] += 1.0 / a_co;
        }
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::Singular("I/a_co + A/a1 + D/a2 is not positive definite; are A and D PSD?".into()))?;
        let diff = &blocks.c - &blocks.f;
        let solved = chol.solve(&diff);
        (0..l).map(|i| diff.column(i).dot(&solved.column(i))).sum()
    };
    let l2 = (l * l) as f64;
    Ok(RademacherBound {
        bound_sq: (supervised - reduction) / l2,
        supervised_sq: supervised / l2,
        reduction,
    })
}

pub fn rademacher_bound_sq(blocks: &GramBlocks, a1: f64, a2: f64, a_co: f64) -> Result<f64> {
    Ok(rademacher_bound(blocks, a1, a2, a_co)?.bound_sq)
}

/// `5 epsilon + sum(lambda_i^2) / n`.
pub fn multiview_excess_risk_bound(epsilon: f64, correlations: &[f64], n: usize) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be at least 1".into()));
    }
    let sum_sq: f64 = correlations.iter().map(|l| l * l).sum();
    Ok(5.0 * epsilon + sum_sq / n as f64)
}

/// Linear (dot-product) Gram matrix of feature rows.
pub fn linear_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x * x.transpose()
}
