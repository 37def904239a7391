//! Residual parameter-efficient modules attached to a frozen linear layer.
//!
//! Every module starts with a zero residual: LoRA's `B`, VeRA's `lambda_b`
//! and the (IA)^3 vector are zero-initialized, so a fresh module leaves the
//! pre-trained layer untouched.

use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};
use crate::linalg::Matrix;
use crate::seed::{rng_for, Stream};

/// Standard deviation of the Gaussian LoRA `A` initialization.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Low-rank residual `ΔW = B A` with `B: d x r`, `A: r x k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraModule {
    pub b: Matrix,
    pub a: Matrix,
}

impl LoraModule {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(LormError::DimensionMismatch {
                op: "LoraModule::new",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(LoraModule { b, a })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn trainable_parameters(&self) -> usize {
        self.b.rows() * self.rank() + self.rank() * self.a.cols()
    }
}

/// Builds a LoRA module with `B = 0` and `A ~ N(0, 0.02^2)` drawn from `seed`.
pub fn init_lora(d: usize, k: usize, r: usize, seed: u64) -> Result<LoraModule> {
    if r == 0 || r > d.min(k) {
        return Err(LormError::invalid(format!(
            "rank {r} must lie in 1..={} for a {d}x{k} layer",
            d.min(k)
        )));
    }
    let mut rng = rng_for(seed, Stream::Adapter, &[d as u64, k as u64, r as u64]);
    Ok(LoraModule {
        b: Matrix::zeros(d, r),
        a: Matrix::gaussian(r, k, LORA_A_INIT_STD, &mut rng),
    })
}

/// VeRA residual `diag(lambda_b) B diag(lambda_d) A` over frozen random factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeraModule {
    pub b_frozen: Matrix,
    pub a_frozen: Matrix,
    pub lambda_b: Vec<f64>,
    pub lambda_d: Vec<f64>,
}

impl VeraModule {
    pub fn new(
        b_frozen: Matrix,
        a_frozen: Matrix,
        lambda_b: Vec<f64>,
        lambda_d: Vec<f64>,
    ) -> Result<Self> {
        if b_frozen.cols() != a_frozen.rows()
            || lambda_b.len() != b_frozen.rows()
            || lambda_d.len() != a_frozen.rows()
        {
            return Err(LormError::DimensionMismatch {
                op: "VeraModule::new",
                left: b_frozen.shape(),
                right: a_frozen.shape(),
            });
        }
        Ok(VeraModule {
            b_frozen,
            a_frozen,
            lambda_b,
            lambda_d,
        })
    }

    /// `(lambda_b 1) ⊙ B`.
    pub fn scaled_b(&self) -> Matrix {
        self.b_frozen
            .scale_rows(&self.lambda_b)
            .expect("lambda_b length checked on construction")
    }

    /// `(lambda_d 1) ⊙ A`.
    pub fn scaled_a(&self) -> Matrix {
        self.a_frozen
            .scale_rows(&self.lambda_d)
            .expect("lambda_d length checked on construction")
    }
}

/// Frozen factors are Gaussian with std `1/sqrt(r)`; `lambda_b = 0`, `lambda_d = 1`.
pub fn init_vera(d: usize, k: usize, r: usize, seed: u64) -> Result<VeraModule> {
    if r == 0 || r > d.min(k) {
        return Err(LormError::invalid(format!(
            "rank {r} must lie in 1..={} for a {d}x{k} layer",
            d.min(k)
        )));
    }
    let mut rng = rng_for(seed, Stream::Adapter, &[d as u64, k as u64, r as u64, 1]);
    let std = 1.0 / (r as f64).sqrt();
    let b_frozen = Matrix::gaussian(d, r, std, &mut rng);
    let a_frozen = Matrix::gaussian(r, k, std, &mut rng);
    Ok(VeraModule {
        b_frozen,
        a_frozen,
        lambda_b: vec![0.0; d],
        lambda_d: vec![1.0; r],
    })
}

/// (IA)^3 in zero-shifted residual form: `ΔW = (ell 1) ⊙ W0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ia3Module {
    pub ell: Vec<f64>,
}

pub fn init_ia3(d: usize) -> Ia3Module {
    Ia3Module { ell: vec![0.0; d] }
}

/// Trainable part attached to a linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Residual {
    None,
    Lora(LoraModule),
    Vera(VeraModule),
    Ia3(Ia3Module),
    /// Unconstrained `d x k` delta, used by the full fine-tuning baselines.
    Dense(Matrix),
}

impl Residual {
    pub fn kind(&self) -> &'static str {
        match self {
            Residual::None => "none",
            Residual::Lora(_) => "lora",
            Residual::Vera(_) => "vera",
            Residual::Ia3(_) => "ia3",
            Residual::Dense(_) => "dense",
        }
    }
}

/// Dense `ΔW` of a residual module (`w0` is only read by (IA)^3).
pub fn residual_matrix(residual: &Residual, w0: &Matrix) -> Matrix {
    let (d, k) = w0.shape();
    match residual {
        Residual::None => Matrix::zeros(d, k),
        Residual::Lora(m) => m.b.matmul(&m.a).expect("LoRA factor shapes checked"),
        Residual::Vera(m) => m.scaled_b().matmul(&m.scaled_a()).expect("VeRA shapes checked"),
        Residual::Ia3(m) => w0.scale_rows(&m.ell).expect("ell length matches d"),
        Residual::Dense(delta) => delta.clone(),
    }
}

/// Frozen `W0` and bias plus a trainable residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub w0: Matrix,
    pub bias: Vec<f64>,
    pub residual: Residual,
}

impl LinearLayer {
    pub fn new(w0: Matrix, bias: Vec<f64>, residual: Residual) -> Result<Self> {
        if bias.len() != w0.rows() {
            return Err(LormError::DimensionMismatch {
                op: "LinearLayer::new",
                left: w0.shape(),
                right: (bias.len(), 1),
            });
        }
        let layer = LinearLayer { w0, bias, residual };
        layer.check_residual()?;
        Ok(layer)
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    fn check_residual(&self) -> Result<()> {
        let (d, k) = self.w0.shape();
        let ok = match &self.residual {
            Residual::None => true,
            Residual::Lora(m) => m.b.rows() == d && m.a.cols() == k,
            Residual::Vera(m) => m.b_frozen.rows() == d && m.a_frozen.cols() == k,
            Residual::Ia3(m) => m.ell.len() == d,
            Residual::Dense(delta) => delta.shape() == (d, k),
        };
        if ok {
            Ok(())
        } else {
            Err(LormError::invalid(format!(
                "{} residual does not fit a {d}x{k} layer",
                self.residual.kind()
            )))
        }
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.rows() != self.in_dim() {
            return Err(LormError::DimensionMismatch {
                op,
                left: self.w0.shape(),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Pre-activation output `W0 X + ΔW X + bias`, dispatching on the residual kind.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match &self.residual {
            Residual::None => {
                self.check_input(x, "forward")?;
                self.w0.matmul(x)?.add_to_rows(&self.bias)
            }
            Residual::Lora(_) => lora_forward(self, x),
            Residual::Vera(_) => vera_forward(self, x),
            Residual::Ia3(_) => ia3_forward(self, x),
            Residual::Dense(delta) => {
                self.check_input(x, "forward")?;
                self.w0.add(delta)?.matmul(x)?.add_to_rows(&self.bias)
            }
        }
    }

    pub fn residual_matrix(&self) -> Matrix {
        residual_matrix(&self.residual, &self.w0)
    }
}

/// `W0 X + B (A X) + bias`, low-rank product first.
pub fn lora_forward(layer: &LinearLayer, x: &Matrix) -> Result<Matrix> {
    let Residual::Lora(m) = &layer.residual else {
        return Err(LormError::invalid("lora_forward on a non-LoRA layer"));
    };
    layer.check_input(x, "lora_forward")?;
    let low = m.b.matmul(&m.a.matmul(x)?)?;
    layer.w0.matmul(x)?.add(&low)?.add_to_rows(&layer.bias)
}

/// `W0 X + ((lambda_b 1) ⊙ B) ((lambda_d 1) ⊙ A) X + bias`.
pub fn vera_forward(layer: &LinearLayer, x: &Matrix) -> Result<Matrix> {
    let Residual::Vera(m) = &layer.residual else {
        return Err(LormError::invalid("vera_forward on a non-VeRA layer"));
    };
    layer.check_input(x, "vera_forward")?;
    let inner = m.a_frozen.matmul(x)?.scale_rows(&m.lambda_d)?;
    let low = m.b_frozen.matmul(&inner)?.scale_rows(&m.lambda_b)?;
    layer.w0.matmul(x)?.add(&low)?.add_to_rows(&layer.bias)
}

/// `(1 + ell) ⊙ (W0 X) + bias`.
pub fn ia3_forward(layer: &LinearLayer, x: &Matrix) -> Result<Matrix> {
    let Residual::Ia3(m) = &layer.residual else {
        return Err(LormError::invalid("ia3_forward on a non-(IA)^3 layer"));
    };
    layer.check_input(x, "ia3_forward")?;
    let scale: Vec<f64> = m.ell.iter().map(|l| 1.0 + l).collect();
    layer.w0.matmul(x)?.scale_rows(&scale)?.add_to_rows(&layer.bias)
}
