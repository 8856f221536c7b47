#![allow(dead_code)]

pub mod attention;
pub mod gradcam;
pub mod gradsuite;

use lesionaware::nn::{Binding, ParamId, ParamSet};
use lesionaware::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign, away from kinks at 0.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

pub fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

pub fn one_hot_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor<f64> {
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        data[i * k + rng.random_range(0..k)] = 1.0;
    }
    Tensor::from_f64(vec![n, k], &data).unwrap()
}

/// A forward pass built from a list of input tensors: the tape, its output,
/// and the tape variables holding the inputs.
pub struct Probe {
    pub tape: Tape<f64>,
    pub out: Var,
    pub inputs: Vec<Var>,
}

/// Builds a probe where every input becomes a tracked tape leaf.
pub fn leaves(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> Probe {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    Probe { tape, out, inputs: vars }
}

/// Copies `inputs[offset..]` into the parameters `ids` of a clone of `params`.
pub fn with_values(params: &ParamSet<f64>, ids: &[ParamId], values: &[Tensor<f64>]) -> ParamSet<f64> {
    let mut p = params.clone();
    for (&id, v) in ids.iter().zip(values) {
        p.get_mut(id).value = v.clone();
    }
    p
}

/// Tape variables that parameters `ids` were bound to.
pub fn bound(binding: &Binding, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| binding.var(id).expect("parameter used in the pass")).collect()
}

/// Fixed projection weights so non-scalar outputs reduce to a scalar whose
/// gradient exercises every output element differently.
fn projection(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.3 + ((i * 7919 + 13) % 29) as f64 / 29.0).collect()
}

fn projected(p: &Probe) -> f64 {
    let v = p.tape.value(p.out).to_f64_vec();
    projection(v.len()).iter().zip(&v).map(|(r, x)| r * x).sum()
}

/// Largest error between the tape gradient and central differences over all
/// input elements, measured as `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn fd_check(inputs: &[Tensor<f64>], build: &dyn Fn(&[Tensor<f64>]) -> Probe) -> f64 {
    let mut probe = build(inputs);
    let n_out = probe.tape.value(probe.out).numel();
    let shape = probe.tape.shape(probe.out).to_vec();
    let r = probe
        .tape
        .constant(Tensor::from_f64(shape, &projection(n_out)).unwrap());
    let prod = probe.tape.mul(probe.out, r).unwrap();
    let loss = probe.tape.sum(prod).unwrap();
    let grads = probe.tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = probe.inputs.iter().map(|&v| grads.wrt(v).to_f64_vec()).collect();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let num = (projected(&build(&plus)) - projected(&build(&minus))) / (2.0 * FD_STEP);
            let a = analytic[k][j];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}
