//! Helpers shared by the integration tests: seeded random instances and
//! independent oracles built on nalgebra.

#![allow(dead_code)]

use lorm_core::fcil::TaskHead;
use lorm_core::linalg::{GramStat, Matrix};
use lorm_core::peft::{LinearLayer, Residual};
use lorm_core::seed::{rng_for, Stream};
use lorm_core::train::MlpModel;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    rng_for(seed, Stream::Test, &[tag])
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// 2-norm condition number.
pub fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Least-squares solve of `A x = b` through the SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().svd(true, true).solve(b, 1e-14).expect("svd solve")
}

/// Raw inputs `k x n` for several contributors whose summed Gram has
/// condition number below `max_cond`.
pub fn random_inputs(rng: &mut ChaCha8Rng, k: usize, contributors: usize, max_cond: f64) -> Vec<Matrix> {
    loop {
        let xs: Vec<Matrix> = (0..contributors)
            .map(|_| {
                let n = rng.random_range(1..=k + 3);
                let scale = rng.random_range(0.5..2.0);
                Matrix::gaussian(k, n, scale, rng)
            })
            .collect();
        let total: usize = xs.iter().map(Matrix::cols).sum();
        if total < k {
            continue;
        }
        let g = gram_sum(&xs);
        if condition(&to_na(&g.gram)) < max_cond {
            return xs;
        }
    }
}

pub fn grams_of(xs: &[Matrix]) -> Vec<GramStat> {
    xs.iter().map(GramStat::from_inputs).collect()
}

pub fn gram_sum(xs: &[Matrix]) -> GramStat {
    GramStat::sum(grams_of(xs).iter()).expect("same dims")
}

/// RegMean oracle straight from the least-squares definition on raw inputs:
/// stack `W X_i ≈ W_i X_i` over contributors and solve `X^T W^T = Y^T`.
pub fn regmean_oracle(weights: &[Matrix], xs: &[Matrix]) -> DMatrix<f64> {
    let x = DMatrix::from_columns(
        &xs.iter()
            .flat_map(|x| to_na(x).column_iter().map(|c| c.into_owned()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    let y = DMatrix::from_columns(
        &weights
            .iter()
            .zip(xs)
            .flat_map(|(w, x)| (to_na(w) * to_na(x)).column_iter().map(|c| c.into_owned()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    lstsq(&x.transpose(), &y.transpose()).transpose()
}

/// Row-major vectorization.
fn vec_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.len(), 1, m.transpose().as_slice())
}

fn unvec_rows(v: &DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

/// Kronecker-form oracle for the `B` merge under fixed `A`: minimizes
/// `Σ ||B A X_i - B_i A X_i||^2` over `vec(B)` by stacking
/// `(I_d ⊗ (A X_i)^T) vec(B) = vec(B_i A X_i)`.
pub fn b_merge_oracle(bs: &[Matrix], a: &Matrix, xs: &[Matrix]) -> DMatrix<f64> {
    let d = bs[0].rows();
    let r = a.rows();
    let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = bs
        .iter()
        .zip(xs)
        .map(|(b, x)| {
            let z = to_na(a) * to_na(x);
            let lhs = DMatrix::<f64>::identity(d, d).kronecker(&z.transpose());
            let rhs = vec_rows(&(to_na(b) * &z));
            (lhs, rhs)
        })
        .collect();
    let rows: usize = blocks.iter().map(|(l, _)| l.nrows()).sum();
    let mut lhs = DMatrix::zeros(rows, d * r);
    let mut rhs = DMatrix::zeros(rows, 1);
    let mut at = 0;
    for (l, r_) in blocks {
        lhs.rows_mut(at, l.nrows()).copy_from(&l);
        rhs.rows_mut(at, r_.nrows()).copy_from(&r_);
        at += l.nrows();
    }
    unvec_rows(&lstsq(&lhs, &rhs), d, r)
}

/// Kronecker-form oracle for the `A` merge under a shared `B`: minimizes
/// `Σ ||B A X_i - B A_i X_i||^2` over `vec(A)` through
/// `(B ⊗ X_i^T) vec(A) = vec(B A_i X_i)`.
pub fn a_merge_oracle(a_list: &[Matrix], b: &Matrix, xs: &[Matrix]) -> DMatrix<f64> {
    let (r, k) = a_list[0].shape();
    let bn = to_na(b);
    let mut lhs_blocks = Vec::new();
    let mut rhs_blocks = Vec::new();
    for (a, x) in a_list.iter().zip(xs) {
        let xn = to_na(x);
        lhs_blocks.push(bn.kronecker(&xn.transpose()));
        rhs_blocks.push(vec_rows(&(&bn * to_na(a) * &xn)));
    }
    let rows: usize = lhs_blocks.iter().map(DMatrix::nrows).sum();
    let mut lhs = DMatrix::zeros(rows, r * k);
    let mut rhs = DMatrix::zeros(rows, 1);
    let mut at = 0;
    for (l, rr) in lhs_blocks.iter().zip(&rhs_blocks) {
        lhs.rows_mut(at, l.nrows()).copy_from(l);
        rhs.rows_mut(at, rr.nrows()).copy_from(rr);
        at += l.nrows();
    }
    unvec_rows(&lstsq(&lhs, &rhs), r, k)
}

/// `(Σ P_i G_i)(Σ G_i)^-1` written out with an explicit inverse.
pub fn literal_regmean(payloads: &[DMatrix<f64>], grams: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut num = DMatrix::zeros(payloads[0].nrows(), grams[0].ncols());
    let mut den = DMatrix::zeros(grams[0].nrows(), grams[0].ncols());
    for (p, g) in payloads.iter().zip(grams) {
        num += p * g;
        den += g;
    }
    num * den.try_inverse().expect("invertible")
}

/// `diag(v) M` by explicit loops.
pub fn scale_rows_literal(v: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] = v[i] * m[(i, j)];
        }
    }
    out
}

/// Row mean of the elementwise ratio `M ⊘ R`.
pub fn ratio_row_mean_literal(m: &DMatrix<f64>, reference: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] / reference[(i, j)]).sum::<f64>() / m.ncols() as f64)
        .collect()
}

/// Gaussian matrix with every entry at least `floor` in magnitude.
pub fn bounded_away_from_zero(rows: usize, cols: usize, floor: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = rng.random_range(floor..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Three backbone layers (`dims[0] -> dims[1] -> dims[2] -> dims[3]`) with
/// the residual built by `make`, a frozen past head and a current head.
pub fn toy_model(dims: [usize; 4], make: impl Fn(usize, usize, &mut ChaCha8Rng) -> Residual, seed: u64) -> MlpModel {
    let mut rng = rng(seed, 0);
    let layers = (0..3)
        .map(|l| {
            let (k, d) = (dims[l], dims[l + 1]);
            let w0 = Matrix::gaussian(d, k, 0.7, &mut rng);
            let bias = random_vec(d, &mut rng);
            let residual = make(d, k, &mut rng);
            LinearLayer::new(w0, bias, residual).expect("valid layer")
        })
        .collect();
    let feat = dims[3];
    let heads = vec![
        TaskHead {
            task_id: 1,
            class_ids: vec![0, 1],
            weight: Matrix::gaussian(2, feat, 0.5, &mut rng),
            bias: random_vec(2, &mut rng),
        },
        TaskHead {
            task_id: 2,
            class_ids: vec![2, 3, 4],
            weight: Matrix::gaussian(3, feat, 0.5, &mut rng),
            bias: random_vec(3, &mut rng),
        },
    ];
    MlpModel::new(layers, heads).expect("valid model")
}
