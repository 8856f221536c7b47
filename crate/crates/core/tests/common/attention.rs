//! Randomly initialized attention blocks for oracle and invariance checks.

use lesionaware::lanet::{CamParams, SamParams};
use lesionaware::nn::{Mode, ParamSet, Session};
use lesionaware::tensor::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)`, with running variances kept in `[0.5, 2)`.
pub fn randomize(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let e = params.get_mut(id);
        let positive = e.name.ends_with("running_var");
        for v in e.value.data_mut() {
            *v = if positive { rng.random_range(0.5..2.0) } else { rng.random_range(-1.0..1.0) };
        }
    }
}

pub fn cam_setup(c: usize, width: usize, reduction: usize, seed: u64) -> (ParamSet<f64>, CamParams) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CamParams::new(&mut params, &mut rng, "cam", width.max(c), reduction).unwrap();
    randomize(&mut params, &mut rng);
    (params, cam)
}

pub fn sam_setup(seed: u64) -> (ParamSet<f64>, SamParams) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sam = SamParams::new(&mut params, &mut rng, "sam", 7).unwrap();
    randomize(&mut params, &mut rng);
    (params, sam)
}

pub fn run_on(
    params: &ParamSet<f64>,
    f: &Tensor<f64>,
    op: impl FnOnce(&mut Session<'_, f64>, Var) -> lesionaware::Result<Var>,
) -> Tensor<f64> {
    let mut s = Session::new(params, Mode::Eval);
    let x = s.tape.constant(f.clone());
    let y = op(&mut s, x).unwrap();
    s.tape.value(y).clone()
}

pub fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Same pixel permutation applied to every `(n, c)` plane of an NCHW tensor.
pub fn shuffle_pixels(f: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = f.shape();
    let plane = s[2] * s[3];
    let mut perm: Vec<usize> = (0..plane).collect();
    perm.shuffle(rng);
    let mut out = f.clone();
    for p in 0..s[0] * s[1] {
        for (dst, &src) in perm.iter().enumerate() {
            out.data_mut()[p * plane + dst] = f.data()[p * plane + src];
        }
    }
    out
}

/// Same channel permutation applied to every sample of an NCHW tensor.
pub fn shuffle_channels(f: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = f.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(rng);
    let mut out = f.clone();
    for n in 0..s[0] {
        for (dst, &src) in perm.iter().enumerate() {
            let (d, o) = ((n * c + dst) * plane, (n * c + src) * plane);
            out.data_mut()[d..d + plane].copy_from_slice(&f.data()[o..o + plane]);
        }
    }
    out
}
