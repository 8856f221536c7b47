//! Explicit-loop Grad-CAM oracle for a two-channel toy model.

use lesionaware::saliency::{grad_cam_on_tape, normalize_heatmap};
use lesionaware::tensor::{Tape, Tensor};

use super::{rng, uniform};

pub fn bilinear(v: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, inp: usize, out: usize| {
        if out == 1 || inp == 1 {
            0.0
        } else {
            o as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (r, s) = (src(i, h, oh), src(j, w, ow));
            let (r0, s0) = (r.floor() as usize, s.floor() as usize);
            let (r1, s1) = ((r0 + 1).min(h - 1), (s0 + 1).min(w - 1));
            let (tr, ts) = (r - r0 as f64, s - s0 as f64);
            let top = v[r0 * w + s0] * (1.0 - ts) + v[r0 * w + s1] * ts;
            let bot = v[r1 * w + s0] * (1.0 - ts) + v[r1 * w + s1] * ts;
            out[i * ow + j] = top * (1.0 - tr) + bot * tr;
        }
    }
    out
}

pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Worst absolute gap between the library and the loop oracle, raw and
/// normalized, for `A = relu(conv3x3(x) + b)` and `score = sum(B * sigmoid(A))`.
pub fn toy_gradcam_error(seed: u64) -> f64 {
    let (h, w) = (5usize, 6usize);
    let mut rng = rng(seed);
    let x = uniform(&mut rng, &[1, 1, h, w], -1.0, 1.0);
    let kernel: Vec<f64> = vec![
        0.5, -0.25, 0.1, 0.3, 0.8, -0.4, 0.2, 0.0, 0.6, //
        -0.3, 0.7, 0.2, 0.1, -0.5, 0.9, 0.4, 0.3, -0.2,
    ];
    let bias = [0.1, -0.05];
    let b = uniform(&mut rng, &[1, 2, h, w], -0.5, 2.0);

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let kv = tape.constant(Tensor::from_f64(vec![2, 1, 3, 3], &kernel).unwrap());
    let bv = tape.constant(Tensor::from_f64(vec![2], &bias).unwrap());
    let pre = tape.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
    let a = tape.relu(pre).unwrap();
    let sig = tape.sigmoid(a).unwrap();
    let bc = tape.constant(b.clone());
    let prod = tape.mul(sig, bc).unwrap();
    let score = tape.sum(prod).unwrap();
    let (raw, rh, rw) = grad_cam_on_tape(&tape, a, score).unwrap();
    assert_eq!((rh, rw), (h, w));

    let xd = x.data();
    let mut act = vec![0.0; 2 * h * w];
    for k in 0..2 {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[k];
                for di in 0..3 {
                    for dj in 0..3 {
                        let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                            acc += kernel[k * 9 + di * 3 + dj] * xd[si as usize * w + sj as usize];
                        }
                    }
                }
                act[(k * h + i) * w + j] = acc.max(0.0);
            }
        }
    }
    let mut cam = vec![0.0; h * w];
    for k in 0..2 {
        let mut wk = 0.0;
        for p in 0..h * w {
            let s = 1.0 / (1.0 + (-act[k * h * w + p]).exp());
            wk += b.data()[k * h * w + p] * s * (1.0 - s);
        }
        wk /= (h * w) as f64;
        for p in 0..h * w {
            cam[p] += wk * act[k * h * w + p];
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    assert!(cam.iter().any(|&v| v > 0.0), "toy map is flat for seed {seed}");

    let (vals, degenerate) = normalize_heatmap(&raw, h, w, 11, 13);
    assert!(!degenerate);
    let want = min_max(&bilinear(&cam, h, w, 11, 13));
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    gap(&raw, &cam).max(gap(&vals, &want))
}
