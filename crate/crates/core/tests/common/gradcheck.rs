//! Central finite-difference gradient checks for tape operations.
//!
//! The analytic gradient of `L = Σ w ⊙ op(x)` (fixed random `w`) is compared
//! against `(L(x + h) − L(x − h)) / 2h` evaluated on an `f64` tape. For the
//! `f32` run the inputs are first rounded to `f32` so both sides see the same
//! point.

use mmtp::tensor::{Real, Tape, Var};
use mmtp::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor for the elementwise relative error, so that gradients
/// that are zero up to rounding do not produce spurious ratios.
pub const REL_FLOOR: f64 = 1e-2;

pub trait Build {
    fn build<T: Real>(&self, tape: &mut Tape<T>, xs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Extended,
}

fn loss<T: Real, B: Build>(
    op: &B,
    inputs: &[Tensor<f64>],
    weight_seed: u64,
    grads: bool,
) -> Result<(Tape<T>, Var, Vec<Var>)> {
    let mut tape = Tape::<T>::new();
    let xs: Vec<Var> =
        inputs.iter().map(|t| if grads { tape.leaf(t.cast()) } else { tape.constant(t.cast()) }).collect();
    let y = op.build(&mut tape, &xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let shape = tape.shape(y).to_vec();
    let w: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::from_f64(shape, &w)?);
    let yw = tape.mul(y, w)?;
    let l = tape.sum_all(yw);
    Ok((tape, l, xs))
}

/// Largest elementwise relative error between analytic and numeric gradients.
pub fn max_rel_error<B: Build>(op: &B, inputs: &[Tensor<f64>], precision: Precision, seed: u64) -> Result<f64> {
    let inputs: Vec<Tensor<f64>> = match precision {
        Precision::Single => inputs.iter().map(|t| t.cast::<f32>().cast::<f64>()).collect(),
        Precision::Extended => inputs.to_vec(),
    };
    let analytic: Vec<Vec<f64>> = match precision {
        Precision::Single => analytic_grads::<f32, B>(op, &inputs, seed)?,
        Precision::Extended => analytic_grads::<f64, B>(op, &inputs, seed)?,
    };
    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let lp = eval64(op, &plus, seed)?;
            let lm = eval64(op, &minus, seed)?;
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval64<B: Build>(op: &B, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let (tape, l, _) = loss::<f64, B>(op, inputs, seed, false)?;
    tape.value(l).item()
}

fn analytic_grads<T: Real, B: Build>(op: &B, inputs: &[Tensor<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
    let (tape, l, xs) = loss::<T, B>(op, inputs, seed, true)?;
    let grads = tape.backward(l)?;
    Ok(xs
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}
