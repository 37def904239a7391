//! Closed-form merges driven by Gram statistics.
//!
//! All of them minimize the regression objective
//! `Ω(W) = Σ_i ||W X_i - W_i X_i||²`, written in Gram form as
//! `Σ_i tr[(W - W_i) G_i (W - W_i)^T]` with `G_i = X_i X_i^T`, over a
//! different parametrization of `W`:
//!
//! | merge                  | free variable        | solved system                        |
//! |------------------------|----------------------|--------------------------------------|
//! | [`regmean_merge`]      | full `W`             | `W ΣG = Σ W_i G_i`                   |
//! | [`merge_b_fixed_a`]    | `B`, shared `A`      | `B (A ΣG A^T) = (Σ B_i A G_i) A^T`   |
//! | [`merge_a_fixed_b`]    | `A`, shared `B`      | `A ΣG = Σ A_i G_i`                   |
//! | [`merge_task_residuals`] | dense task deltas  | same as [`regmean_merge`]            |
//!
//! The VeRA and (IA)^3 merges solve the matching dense system and then read
//! the scaling vector back out with a row mean of the elementwise ratio.

use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::linalg::{solve_right, GramStat, Matrix};

/// Entries whose magnitude is at or below this cannot be divided by.
pub const DIVISION_GUARD: f64 = 1e-12;

/// One contributor to a merge: its weight payload and its input Gram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub payload: Matrix,
    pub gram: GramStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeInput {
    pub contributors: Vec<Contributor>,
}

impl MergeInput {
    pub fn new(contributors: Vec<Contributor>) -> Result<Self> {
        let input = MergeInput { contributors };
        input.validate()?;
        Ok(input)
    }

    pub fn from_parts(payloads: &[Matrix], grams: &[GramStat]) -> Result<Self> {
        if payloads.len() != grams.len() {
            return Err(LormError::invalid(format!(
                "{} payloads but {} gram statistics",
                payloads.len(),
                grams.len()
            )));
        }
        MergeInput::new(
            payloads
                .iter()
                .zip(grams)
                .map(|(p, g)| Contributor {
                    payload: p.clone(),
                    gram: g.clone(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.contributors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contributors.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .contributors
            .first()
            .ok_or_else(|| LormError::invalid("merge needs at least one contributor"))?;
        let shape = first.payload.shape();
        for c in &self.contributors {
            if c.payload.shape() != shape {
                return Err(LormError::DimensionMismatch {
                    op: "MergeInput",
                    left: shape,
                    right: c.payload.shape(),
                });
            }
            if c.gram.dim() != shape.1 {
                return Err(LormError::DimensionMismatch {
                    op: "MergeInput gram",
                    left: shape,
                    right: c.gram.gram.shape(),
                });
            }
        }
        Ok(())
    }

    fn payload_shape(&self) -> (usize, usize) {
        self.contributors[0].payload.shape()
    }

    /// `(Σ W_i G_i, Σ G_i)`.
    fn normal_equation_terms(&self) -> Result<(Matrix, Matrix)> {
        let (d, k) = self.payload_shape();
        let mut numerator = Matrix::zeros(d, k);
        let mut denominator = Matrix::zeros(k, k);
        for c in &self.contributors {
            numerator.axpy(1.0, &c.payload.matmul(&c.gram.gram)?)?;
            denominator.axpy(1.0, &c.gram.gram)?;
        }
        Ok((numerator, denominator))
    }
}

/// Gram-form regression objective `Σ_i tr[(W - W_i) G_i (W - W_i)^T]`.
pub fn objective_omega(candidate: &Matrix, contributors: &MergeInput) -> Result<f64> {
    contributors.validate()?;
    if candidate.shape() != contributors.payload_shape() {
        return Err(LormError::DimensionMismatch {
            op: "objective_omega",
            left: candidate.shape(),
            right: contributors.payload_shape(),
        });
    }
    let mut total = 0.0;
    for c in &contributors.contributors {
        let diff = candidate.sub(&c.payload)?;
        let projected = diff.matmul(&c.gram.gram)?;
        total += diff
            .as_slice()
            .iter()
            .zip(projected.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    Ok(total)
}

/// Gradient of [`objective_omega`] with respect to the candidate,
/// `2 Σ_i (W - W_i) G_i`.
pub fn objective_gradient(candidate: &Matrix, contributors: &MergeInput) -> Result<Matrix> {
    contributors.validate()?;
    let (d, k) = contributors.payload_shape();
    if candidate.shape() != (d, k) {
        return Err(LormError::DimensionMismatch {
            op: "objective_gradient",
            left: candidate.shape(),
            right: (d, k),
        });
    }
    let mut grad = Matrix::zeros(d, k);
    for c in &contributors.contributors {
        grad.axpy(2.0, &candidate.sub(&c.payload)?.matmul(&c.gram.gram)?)?;
    }
    Ok(grad)
}

/// Returns the common payload when every contributor sent the same one.
/// It already reaches `Ω = 0`, and skipping the solve keeps the ridge from
/// perturbing it.
fn consensus<'a, T: PartialEq + 'a>(mut items: impl Iterator<Item = &'a T>) -> Option<&'a T> {
    let first = items.next()?;
    items.all(|x| x == first).then_some(first)
}

/// RegMean: `W_M = (Σ W_i G_i)(Σ G_i)^-1`.
pub fn regmean_merge(contributors: &MergeInput, ridge: f64) -> Result<Matrix> {
    contributors.validate()?;
    if let Some(w) = consensus(contributors.contributors.iter().map(|c| &c.payload)) {
        return Ok(w.clone());
    }
    let (numerator, denominator) = contributors.normal_equation_terms()?;
    solve_right(&numerator, &denominator, ridge)
}

fn check_grams(grams: &[GramStat], n: usize, k: usize, op: &'static str) -> Result<()> {
    if grams.len() != n {
        return Err(LormError::invalid(format!(
            "{op}: {n} payloads but {} gram statistics",
            grams.len()
        )));
    }
    if n == 0 {
        return Err(LormError::invalid(format!("{op}: no contributors")));
    }
    for g in grams {
        if g.dim() != k {
            return Err(LormError::DimensionMismatch {
                op,
                left: (k, k),
                right: g.gram.shape(),
            });
        }
    }
    Ok(())
}

/// Merges client `B_i` under a shared, frozen `A`:
/// `B_M = (Σ B_i A G_i) A^T (A (Σ G_i) A^T)^-1`.
pub fn merge_b_fixed_a(bs: &[Matrix], a: &Matrix, grams: &[GramStat], ridge: f64) -> Result<Matrix> {
    let (r, k) = a.shape();
    check_grams(grams, bs.len(), k, "merge_b_fixed_a")?;
    let d = bs[0].rows();
    let mut inner = Matrix::zeros(d, k);
    let mut gram_sum = Matrix::zeros(k, k);
    for (b, g) in bs.iter().zip(grams) {
        if b.shape() != (d, r) {
            return Err(LormError::DimensionMismatch {
                op: "merge_b_fixed_a",
                left: (d, r),
                right: b.shape(),
            });
        }
        inner.axpy(1.0, &b.matmul(&a.matmul(&g.gram)?)?)?;
        gram_sum.axpy(1.0, &g.gram)?;
    }
    if let Some(b) = consensus(bs.iter()) {
        return Ok(b.clone());
    }
    let numerator = inner.matmul_t(a)?;
    let denominator = a.matmul(&gram_sum)?.matmul_t(a)?;
    solve_right(&numerator, &denominator, ridge)
}

/// Merges client `A_i` under a shared, frozen `B`:
/// `A_M = (Σ A_i G_i)(Σ G_i)^-1`. `B` cancels out, so it is not an argument.
pub fn merge_a_fixed_b(a_list: &[Matrix], grams: &[GramStat], ridge: f64) -> Result<Matrix> {
    let input = MergeInput::from_parts(a_list, grams)?;
    regmean_merge(&input, ridge)
}

/// Cross-task merge of dense task residuals `ΔW^t = B_M^t A_M^t` with the
/// per-task global Grams: `ΔW = (Σ_t ΔW^t G^t)(Σ_t G^t)^-1`.
pub fn merge_task_residuals(deltas: &[Matrix], task_grams: &[GramStat], ridge: f64) -> Result<Matrix> {
    let input = MergeInput::from_parts(deltas, task_grams)?;
    regmean_merge(&input, ridge)
}

/// Row mean of `solved ⊙ 1/reference`, guarded against tiny reference entries.
/// How a solved matrix `M ≈ (λ 1) ⊙ R` is reduced to the scaling vector `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleProjection {
    /// Row mean of the elementwise ratio `M ⊘ R`.
    #[default]
    RatioMean,
    /// Per-row least-squares fit `λ_j = <M_j, R_j> / <R_j, R_j>`; no
    /// per-entry division, so small entries of `R` do not amplify noise.
    LeastSquares,
}

impl std::str::FromStr for ScaleProjection {
    type Err = LormError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio-mean" => Ok(ScaleProjection::RatioMean),
            "least-squares" => Ok(ScaleProjection::LeastSquares),
            other => Err(LormError::Config(format!(
                "unknown scale projection '{other}' (expected ratio-mean or least-squares)"
            ))),
        }
    }
}

fn project_scale(solved: &Matrix, reference: &Matrix, projection: ScaleProjection, op: &'static str) -> Result<Vec<f64>> {
    match projection {
        ScaleProjection::RatioMean => ratio_row_mean(solved, reference, op),
        ScaleProjection::LeastSquares => {
            check_division(reference, op)?;
            Ok((0..reference.rows())
                .map(|i| {
                    let r = reference.row(i);
                    let num: f64 = solved.row(i).iter().zip(r).map(|(s, r)| s * r).sum();
                    num / r.iter().map(|v| v * v).sum::<f64>()
                })
                .collect())
        }
    }
}

fn ratio_row_mean(solved: &Matrix, reference: &Matrix, op: &'static str) -> Result<Vec<f64>> {
    check_division(reference, op)?;
    let cols = reference.cols() as f64;
    Ok((0..reference.rows())
        .map(|i| {
            solved
                .row(i)
                .iter()
                .zip(reference.row(i))
                .map(|(s, r)| s / r)
                .sum::<f64>()
                / cols
        })
        .collect())
}

fn check_division(reference: &Matrix, op: &'static str) -> Result<()> {
    for i in 0..reference.rows() {
        for j in 0..reference.cols() {
            let v = reference.get(i, j);
            if v.abs() <= DIVISION_GUARD {
                return Err(LormError::NearZeroEntry { op, row: i, col: j, value: v });
            }
        }
    }
    Ok(())
}

fn check_vectors(vectors: &[Vec<f64>], len: usize, op: &'static str) -> Result<()> {
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(LormError::DimensionMismatch {
            op,
            left: (len, 1),
            right: (v.len(), 1),
        });
    }
    Ok(())
}

/// VeRA `lambda_d` merge with `lambda_b` fixed.
///
/// Solves `M = (Σ ((λ_i 1) ⊙ A) G_i)(Σ G_i)^-1`, then
/// `λ_j = (1/k) Σ_c M_jc / A_jc`.
pub fn merge_vera_lambda_d(
    lambda_ds: &[Vec<f64>],
    a_frozen: &Matrix,
    grams: &[GramStat],
    ridge: f64,
) -> Result<Vec<f64>> {
    merge_vera_lambda_d_with(lambda_ds, a_frozen, grams, ridge, ScaleProjection::RatioMean)
}

/// [`merge_vera_lambda_d`] with a chosen reduction of the solved matrix.
pub fn merge_vera_lambda_d_with(
    lambda_ds: &[Vec<f64>],
    a_frozen: &Matrix,
    grams: &[GramStat],
    ridge: f64,
    projection: ScaleProjection,
) -> Result<Vec<f64>> {
    let (r, k) = a_frozen.shape();
    check_grams(grams, lambda_ds.len(), k, "merge_vera_lambda_d")?;
    check_vectors(lambda_ds, r, "merge_vera_lambda_d")?;
    check_division(a_frozen, "merge_vera_lambda_d")?;
    let payloads = lambda_ds
        .iter()
        .map(|l| a_frozen.scale_rows(l))
        .collect::<Result<Vec<_>>>()?;
    let solved = regmean_merge(&MergeInput::from_parts(&payloads, grams)?, ridge)?;
    project_scale(&solved, a_frozen, projection, "merge_vera_lambda_d")
}

/// VeRA `lambda_b` merge with `lambda_d` fixed.
///
/// With `𝒜 = (λ_d 1) ⊙ A`, solves
/// `M = (Σ ((λ_i 1) ⊙ B) 𝒜 G_i 𝒜^T)(Σ 𝒜 G_i 𝒜^T)^-1` and returns
/// `λ_j = (1/r) Σ_c M_jc / B_jc`.
pub fn merge_vera_lambda_b(
    lambda_bs: &[Vec<f64>],
    lambda_d: &[f64],
    a_frozen: &Matrix,
    b_frozen: &Matrix,
    grams: &[GramStat],
    ridge: f64,
) -> Result<Vec<f64>> {
    merge_vera_lambda_b_with(lambda_bs, lambda_d, a_frozen, b_frozen, grams, ridge, ScaleProjection::RatioMean)
}

/// [`merge_vera_lambda_b`] with a chosen reduction of the solved matrix.
pub fn merge_vera_lambda_b_with(
    lambda_bs: &[Vec<f64>],
    lambda_d: &[f64],
    a_frozen: &Matrix,
    b_frozen: &Matrix,
    grams: &[GramStat],
    ridge: f64,
    projection: ScaleProjection,
) -> Result<Vec<f64>> {
    let (r, k) = a_frozen.shape();
    let d = b_frozen.rows();
    if b_frozen.cols() != r || lambda_d.len() != r {
        return Err(LormError::DimensionMismatch {
            op: "merge_vera_lambda_b",
            left: b_frozen.shape(),
            right: a_frozen.shape(),
        });
    }
    check_grams(grams, lambda_bs.len(), k, "merge_vera_lambda_b")?;
    check_vectors(lambda_bs, d, "merge_vera_lambda_b")?;
    check_division(b_frozen, "merge_vera_lambda_b")?;
    if let Some(lb) = consensus(lambda_bs.iter()) {
        return Ok(lb.clone());
    }
    let scaled_a = a_frozen.scale_rows(lambda_d)?;
    let mut numerator = Matrix::zeros(d, r);
    let mut denominator = Matrix::zeros(r, r);
    for (lb, g) in lambda_bs.iter().zip(grams) {
        let projected = scaled_a.matmul(&g.gram)?.matmul_t(&scaled_a)?;
        numerator.axpy(1.0, &b_frozen.scale_rows(lb)?.matmul(&projected)?)?;
        denominator.axpy(1.0, &projected)?;
    }
    let solved = solve_right(&numerator, &denominator, ridge)?;
    project_scale(&solved, b_frozen, projection, "merge_vera_lambda_b")
}

/// (IA)^3 merge: `M = (Σ ((ℓ_i 1) ⊙ W0) G_i)(Σ G_i)^-1`, `ℓ_j = (1/k) Σ_c M_jc / W0_jc`.
pub fn merge_ia3(ells: &[Vec<f64>], w0: &Matrix, grams: &[GramStat], ridge: f64) -> Result<Vec<f64>> {
    merge_ia3_with(ells, w0, grams, ridge, ScaleProjection::RatioMean)
}

/// [`merge_ia3`] with a chosen reduction of the solved matrix.
pub fn merge_ia3_with(
    ells: &[Vec<f64>],
    w0: &Matrix,
    grams: &[GramStat],
    ridge: f64,
    projection: ScaleProjection,
) -> Result<Vec<f64>> {
    let (d, k) = w0.shape();
    check_grams(grams, ells.len(), k, "merge_ia3")?;
    check_vectors(ells, d, "merge_ia3")?;
    check_division(w0, "merge_ia3")?;
    let payloads = ells
        .iter()
        .map(|l| w0.scale_rows(l))
        .collect::<Result<Vec<_>>>()?;
    let solved = regmean_merge(&MergeInput::from_parts(&payloads, grams)?, ridge)?;
    project_scale(&solved, w0, projection, "merge_ia3")
}

/// Unified classifier: task heads stacked row-wise in task order.
pub fn assemble_classifier(task_heads: &[Matrix]) -> Result<Matrix> {
    if task_heads.is_empty() {
        return Err(LormError::invalid("no task heads to assemble"));
    }
    Matrix::vstack(task_heads)
}

/// Sample-weighted arithmetic mean, the FedAvg aggregation rule.
pub fn weighted_mean(payloads: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    if payloads.is_empty() || payloads.len() != weights.len() {
        return Err(LormError::invalid("weighted_mean needs one weight per payload"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(LormError::invalid("weights must sum to a positive value"));
    }
    let (r, c) = payloads[0].shape();
    let mut out = Matrix::zeros(r, c);
    for (p, w) in payloads.iter().zip(weights) {
        out.axpy(w / total, p)?;
    }
    Ok(out)
}

/// [`weighted_mean`] over plain vectors.
pub fn weighted_mean_vec(vectors: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let as_cols = vectors
        .iter()
        .map(|v| Matrix::column(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(weighted_mean(&as_cols, weights)?.into_vec())
}
