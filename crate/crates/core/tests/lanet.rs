mod common;

use common::attention::{bits, cam_setup, randomize, run_on, sam_setup, shuffle_channels, shuffle_pixels};
use common::uniform;
use lesionaware::fex::{FeaturePyramid, FexConfig};
use lesionaware::lanet::{
    cam_attention, cam_refine, cbam, sam_attention, sam_refine, CamParams, CamSharing, CbamFlags, LaNet,
    LaNetConfig, SamParams,
};
use lesionaware::nn::{Mode, ParamSet, Session};
use lesionaware::tensor::Tensor;
use lesionaware::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

/// Plain NCHW array used by the loop oracles.
#[derive(Clone, Debug)]
struct Map {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Map {
    fn of(t: &Tensor<f64>) -> Map {
        let s = t.shape();
        Map { n: s[0], c: s[1], h: s[2], w: s[3], d: t.data().to_vec() }
    }
    fn zeros(n: usize, c: usize, h: usize, w: usize) -> Map {
        Map { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }
    fn idx(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }
    fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.d[self.idx(n, c, i, j)]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn value(params: &ParamSet<f64>, id: lesionaware::nn::ParamId) -> Vec<f64> {
    params.get(id).value.data().to_vec()
}

/// `y = W x + b` with `W` stored `[out, in]`.
fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let din = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + (0..din).map(|i| w[o * din + i] * x[i]).sum::<f64>())
        .collect()
}

fn cam_oracle(f: &Map, params: &ParamSet<f64>, cam: &CamParams) -> Vec<Vec<f64>> {
    let (w1, b1) = (value(params, cam.fc1.weight), value(params, cam.fc1.bias.unwrap()));
    let (w2, b2) = (value(params, cam.fc2.weight), value(params, cam.fc2.bias.unwrap()));
    let mlp = |v: &[f64]| {
        let mut padded = v.to_vec();
        padded.resize(cam.width, 0.0);
        let h: Vec<f64> = dense(&w1, &b1, &padded).into_iter().map(|x| x.max(0.0)).collect();
        dense(&w2, &b2, &h)
    };
    (0..f.n)
        .map(|n| {
            let mut mx = vec![f64::NEG_INFINITY; f.c];
            let mut av = vec![0.0; f.c];
            for c in 0..f.c {
                for i in 0..f.h {
                    for j in 0..f.w {
                        mx[c] = mx[c].max(f.at(n, c, i, j));
                        av[c] += f.at(n, c, i, j);
                    }
                }
                av[c] /= (f.h * f.w) as f64;
            }
            let (a, b) = (mlp(&mx), mlp(&av));
            (0..f.c).map(|c| sigmoid(a[c] + b[c])).collect()
        })
        .collect()
}

fn conv_oracle(x: &Map, w: &[f64], b: Option<&[f64]>, c_out: usize, k: usize, pad: usize) -> Map {
    let mut y = Map::zeros(x.n, c_out, x.h + 2 * pad - k + 1, x.w + 2 * pad - k + 1);
    for n in 0..x.n {
        for o in 0..c_out {
            for i in 0..y.h {
                for j in 0..y.w {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..x.c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (r, s) = ((i + di) as isize - pad as isize, (j + dj) as isize - pad as isize);
                                if r >= 0 && s >= 0 && (r as usize) < x.h && (s as usize) < x.w {
                                    acc += x.at(n, c, r as usize, s as usize) * w[((o * x.c + c) * k + di) * k + dj];
                                }
                            }
                        }
                    }
                    let at = y.idx(n, o, i, j);
                    y.d[at] = acc;
                }
            }
        }
    }
    y
}

fn sam_oracle(f: &Map, params: &ParamSet<f64>, sam: &SamParams) -> Map {
    let mut pooled = Map::zeros(f.n, 2, f.h, f.w);
    for n in 0..f.n {
        for i in 0..f.h {
            for j in 0..f.w {
                let vals: Vec<f64> = (0..f.c).map(|c| f.at(n, c, i, j)).collect();
                let (a, b) = (pooled.idx(n, 0, i, j), pooled.idx(n, 1, i, j));
                pooled.d[a] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                pooled.d[b] = vals.iter().sum::<f64>() / f.c as f64;
            }
        }
    }
    let w = value(params, sam.conv.weight);
    let b = value(params, sam.conv.bias.unwrap());
    let k = (w.len() / 2).isqrt();
    let mut s = conv_oracle(&pooled, &w, Some(&b), 1, k, k / 2);
    s.d.iter_mut().for_each(|v| *v = sigmoid(*v));
    s
}

fn cam_refine_oracle(f: &Map, params: &ParamSet<f64>, cam: &CamParams) -> Map {
    let a = cam_oracle(f, params, cam);
    let mut out = f.clone();
    for n in 0..f.n {
        for c in 0..f.c {
            for i in 0..f.h {
                for j in 0..f.w {
                    let at = f.idx(n, c, i, j);
                    out.d[at] *= a[n][c];
                }
            }
        }
    }
    out
}

fn sam_refine_oracle(f: &Map, params: &ParamSet<f64>, sam: &SamParams) -> Map {
    let s = sam_oracle(f, params, sam);
    let mut out = f.clone();
    for n in 0..f.n {
        for c in 0..f.c {
            for i in 0..f.h {
                for j in 0..f.w {
                    let at = f.idx(n, c, i, j);
                    out.d[at] *= s.at(n, 0, i, j);
                }
            }
        }
    }
    out
}

fn resize_oracle(x: &Map, oh: usize, ow: usize) -> Map {
    let src = |o: usize, inp: usize, out: usize| {
        if out == 1 || inp == 1 {
            0.0
        } else {
            o as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let mut y = Map::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..oh {
                for j in 0..ow {
                    let (r, s) = (src(i, x.h, oh), src(j, x.w, ow));
                    let (r0, s0) = (r.floor() as usize, s.floor() as usize);
                    let (r1, s1) = ((r0 + 1).min(x.h - 1), (s0 + 1).min(x.w - 1));
                    let (tr, ts) = (r - r0 as f64, s - s0 as f64);
                    let top = x.at(n, c, r0, s0) * (1.0 - ts) + x.at(n, c, r0, s1) * ts;
                    let bot = x.at(n, c, r1, s0) * (1.0 - ts) + x.at(n, c, r1, s1) * ts;
                    let at = y.idx(n, c, i, j);
                    y.d[at] = top * (1.0 - tr) + bot * tr;
                }
            }
        }
    }
    y
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    let worst = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "max deviation {worst}");
}

/// Overwrites every parameter with random values; running variances stay positive.
fn zero(params: &mut ParamSet<f64>, id: lesionaware::nn::ParamId) {
    params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn zeroed_cam_perceptron_halves_the_input() {
    let (mut params, cam) = cam_setup(8, 8, 2, 1);
    for id in [cam.fc1.weight, cam.fc1.bias.unwrap(), cam.fc2.weight, cam.fc2.bias.unwrap()] {
        zero(&mut params, id);
    }
    let f = uniform(&mut common::rng(2), &[2, 8, 3, 5], -2.0, 2.0);
    let y = run_on(&params, &f, |s, x| cam_refine(s, x, &cam));
    let half: Vec<f64> = f.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(y.to_f64_vec(), half);
}

#[test]
fn zeroed_sam_kernel_halves_the_input() {
    let (mut params, sam) = sam_setup(3);
    zero(&mut params, sam.conv.weight);
    zero(&mut params, sam.conv.bias.unwrap());
    let f = uniform(&mut common::rng(4), &[1, 5, 6, 6], -2.0, 2.0);
    let y = run_on(&params, &f, |s, x| sam_refine(s, x, &sam));
    let half: Vec<f64> = f.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(y.to_f64_vec(), half);
}

#[test]
fn constant_channels_make_both_pooling_paths_agree() {
    let (params, cam) = cam_setup(4, 4, 2, 5);
    let consts = [0.3, -1.2, 2.0, 0.0];
    let mut data = Vec::new();
    for &c in &consts {
        data.extend(std::iter::repeat_n(c, 9));
    }
    let f = Tensor::from_f64(vec![1, 4, 3, 3], &data).unwrap();
    let a = run_on(&params, &f, |s, x| cam_attention(s, x, &cam));
    let (w1, b1) = (value(&params, cam.fc1.weight), value(&params, cam.fc1.bias.unwrap()));
    let (w2, b2) = (value(&params, cam.fc2.weight), value(&params, cam.fc2.bias.unwrap()));
    let h: Vec<f64> = dense(&w1, &b1, &consts).into_iter().map(|x| x.max(0.0)).collect();
    let want: Vec<f64> = dense(&w2, &b2, &h).iter().map(|&m| sigmoid(2.0 * m)).collect();
    assert_close(&a.to_f64_vec(), &want, TOL);
}

#[test]
fn single_channel_sam_sees_two_identical_channels() {
    let (params, sam) = sam_setup(6);
    let f = uniform(&mut common::rng(7), &[1, 1, 5, 5], -1.0, 1.0);
    let got = run_on(&params, &f, |s, x| sam_attention(s, x, &sam));
    let w = value(&params, sam.conv.weight);
    let folded: Vec<f64> = (0..49).map(|i| w[i] + w[49 + i]).collect();
    let b = value(&params, sam.conv.bias.unwrap());
    let mut want = conv_oracle(&Map::of(&f), &folded, Some(&b), 1, 7, 3);
    want.d.iter_mut().for_each(|v| *v = sigmoid(*v));
    assert_close(&got.to_f64_vec(), &want.d, TOL);
}

#[test]
fn cam_matches_loop_oracle() {
    for seed in 0..10 {
        let mut rng = common::rng(100 + seed);
        let c = rng.random_range(1..10);
        let (params, cam) = cam_setup(c, c, rng.random_range(1..4), seed);
        let f = uniform(&mut rng, &[2, c, 4, 3], -2.0, 2.0);
        let got = run_on(&params, &f, |s, x| cam_refine(s, x, &cam));
        assert_close(&got.to_f64_vec(), &cam_refine_oracle(&Map::of(&f), &params, &cam).d, TOL);
    }
}

#[test]
fn shared_width_cam_matches_zero_padded_oracle() {
    let (params, cam) = cam_setup(3, 8, 2, 11);
    let f = uniform(&mut common::rng(12), &[2, 3, 4, 4], -2.0, 2.0);
    let got = run_on(&params, &f, |s, x| cam_refine(s, x, &cam));
    assert_close(&got.to_f64_vec(), &cam_refine_oracle(&Map::of(&f), &params, &cam).d, TOL);
}

#[test]
fn cam_rejects_too_many_channels() {
    let (params, cam) = cam_setup(4, 4, 2, 0);
    let mut s = Session::new(&params, Mode::Eval);
    let x = s.tape.constant(Tensor::zeros(vec![1, 5, 2, 2]));
    assert!(matches!(cam_refine(&mut s, x, &cam), Err(Error::Dimension(_))));
}

#[test]
fn sam_matches_loop_oracle() {
    for seed in 0..10 {
        let mut rng = common::rng(200 + seed);
        let (params, sam) = sam_setup(seed);
        let c = rng.random_range(1..6);
        let shape = [2, c, rng.random_range(1..9), rng.random_range(1..9)];
        let f = uniform(&mut rng, &shape, -2.0, 2.0);
        let got = run_on(&params, &f, |s, x| sam_refine(s, x, &sam));
        assert_close(&got.to_f64_vec(), &sam_refine_oracle(&Map::of(&f), &params, &sam).d, TOL);
    }
}

#[test]
fn cbam_composes_the_oracles_and_bypasses_exactly() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cam = CamParams::new(&mut params, &mut rng, "cam", 6, 2).unwrap();
    let sam = SamParams::new(&mut params, &mut rng, "sam", 7).unwrap();
    randomize(&mut params, &mut rng);
    let f = uniform(&mut common::rng(22), &[2, 6, 5, 5], -2.0, 2.0);
    let flags = |c, s| CbamFlags { bypass_cam: c, bypass_sam: s };

    let full = run_on(&params, &f, |s, x| cbam(s, x, &cam, &sam, flags(false, false)));
    let m = Map::of(&f);
    let want = sam_refine_oracle(&cam_refine_oracle(&m, &params, &cam), &params, &sam);
    assert_close(&full.to_f64_vec(), &want.d, TOL);

    let none = run_on(&params, &f, |s, x| cbam(s, x, &cam, &sam, flags(true, true)));
    assert_eq!(none.to_f64_vec(), f.to_f64_vec());

    let sam_only = run_on(&params, &f, |s, x| cbam(s, x, &cam, &sam, flags(true, false)));
    let direct = run_on(&params, &f, |s, x| sam_refine(s, x, &sam));
    assert_eq!(sam_only.to_f64_vec(), direct.to_f64_vec());

    let cam_only = run_on(&params, &f, |s, x| cbam(s, x, &cam, &sam, flags(false, true)));
    let direct = run_on(&params, &f, |s, x| cam_refine(s, x, &cam));
    assert_eq!(cam_only.to_f64_vec(), direct.to_f64_vec());
}

fn tiny_fex() -> FexConfig {
    FexConfig {
        n_stages: 2,
        in_channels: 1,
        stem_channels: 4,
        channels_per_stage: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        input_size: 16,
    }
}

fn lanet_setup(sharing: CamSharing, seed: u64) -> (ParamSet<f64>, LaNet) {
    let cfg = LaNetConfig { reduction: 2, cam_sharing: sharing, ..LaNetConfig::default() };
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lanet = LaNet::build(&cfg, &tiny_fex(), &mut params, &mut rng).unwrap();
    randomize(&mut params, &mut rng);
    (params, lanet)
}

fn pyramid(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tensor<f64>> {
    vec![uniform(rng, &[n, 4, 8, 8], -1.0, 1.0), uniform(rng, &[n, 8, 4, 4], -1.0, 1.0)]
}

fn predict(params: &ParamSet<f64>, lanet: &LaNet, maps: &[Tensor<f64>], mode: Mode) -> Tensor<f64> {
    let mut s = Session::new(params, mode);
    let vars = maps.iter().map(|m| s.tape.constant(m.clone())).collect();
    let mask = lanet.fuse_predict(&mut s, &FeaturePyramid { maps: vars }).unwrap();
    s.tape.value(mask).clone()
}

fn fuse_oracle(params: &ParamSet<f64>, lanet: &LaNet, maps: &[Tensor<f64>]) -> Vec<f64> {
    let out = 4;
    let mut merged: Option<Map> = None;
    for (level, t) in maps.iter().enumerate() {
        let f = Map::of(t);
        let refined = sam_refine_oracle(&cam_refine_oracle(&f, params, lanet.cam(level)), params, lanet.sam());
        let sq = lanet.squeeze(level);
        let q = conv_oracle(&refined, &value(params, sq.weight), Some(&value(params, sq.bias.unwrap())), 1, 1, 0);
        let r = resize_oracle(&q, out, out);
        merged = Some(match merged {
            None => r,
            Some(m) => {
                let mut cat = Map::zeros(m.n, m.c + 1, out, out);
                for n in 0..m.n {
                    for i in 0..out {
                        for j in 0..out {
                            for c in 0..m.c {
                                let at = cat.idx(n, c, i, j);
                                cat.d[at] = m.at(n, c, i, j);
                            }
                            let at = cat.idx(n, m.c, i, j);
                            cat.d[at] = r.at(n, 0, i, j);
                        }
                    }
                }
                cat
            }
        });
    }
    let merged = merged.unwrap();
    let w = value(params, params.id("lanet.head.conv.weight").unwrap());
    let h = conv_oracle(&merged, &w, None, 1, 3, 1);
    let get = |name: &str| value(params, params.id(&format!("lanet.head.bn.{name}")).unwrap())[0];
    let (g, b, mu, var) = (get("gamma"), get("beta"), get("running_mean"), get("running_var"));
    h.d.iter().map(|&x| sigmoid(g * (x - mu) / (var + 1e-5).sqrt() + b)).collect()
}

#[test]
fn fuse_predict_matches_loop_oracle() {
    for sharing in [CamSharing::PerLevel, CamSharing::Shared] {
        for seed in 0..3 {
            let (params, lanet) = lanet_setup(sharing, seed);
            let maps = pyramid(&mut common::rng(300 + seed), 2);
            let got = predict(&params, &lanet, &maps, Mode::Eval);
            assert_eq!(got.shape(), &[2, 1, 4, 4]);
            assert_close(&got.to_f64_vec(), &fuse_oracle(&params, &lanet, &maps), TOL);
        }
    }
}

#[test]
fn zero_head_on_zero_input_predicts_one_half() {
    let (mut params, lanet) = lanet_setup(CamSharing::PerLevel, 7);
    let id = |name: &str| params.id(name).unwrap();
    let (w, beta, gamma) = (id("lanet.head.conv.weight"), id("lanet.head.bn.beta"), id("lanet.head.bn.gamma"));
    let mean = id("lanet.head.bn.running_mean");
    zero(&mut params, w);
    zero(&mut params, beta);
    zero(&mut params, mean);
    params.get_mut(gamma).value.data_mut()[0] = 3.7;
    let maps = vec![Tensor::zeros(vec![1, 4, 8, 8]), Tensor::zeros(vec![1, 8, 4, 4])];
    for mode in [Mode::Eval, Mode::Train] {
        let mask = predict(&params, &lanet, &maps, mode);
        assert!(mask.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn mask_has_top_map_size_and_values_inside_the_unit_interval() {
    for (n_stages, m) in [(2, 32), (3, 32), (4, 64)] {
        let fex = FexConfig::truncated(n_stages, m);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lanet = LaNet::build(&LaNetConfig::default(), &fex, &mut params, &mut rng).unwrap();
        let maps: Vec<Tensor<f64>> = fex
            .pyramid_sizes()
            .iter()
            .zip(&fex.channels_per_stage)
            .map(|(&s, &c)| uniform(&mut rng, &[3, c, s, s], -3.0, 3.0))
            .collect();
        for mode in [Mode::Eval, Mode::Train] {
            let mask = predict(&params, &lanet, &maps, mode);
            let s = fex.top_size();
            assert_eq!(mask.shape(), &[3, 1, s, s]);
            assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn level_count_mismatch_is_a_config_error() {
    let (params, lanet) = lanet_setup(CamSharing::PerLevel, 0);
    let mut s = Session::new(&params, Mode::Eval);
    let only = s.tape.constant(Tensor::zeros(vec![1, 4, 8, 8]));
    let r = lanet.fuse_predict(&mut s, &FeaturePyramid { maps: vec![only] });
    assert!(matches!(r, Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cam_attention_ignores_pixel_order(seed in any::<u64>(), c in 1usize..12, h in 1usize..6, w in 1usize..6) {
        let (params, cam) = cam_setup(c, c, 4, seed);
        let mut rng = common::rng(seed ^ 1);
        let f = uniform(&mut rng, &[2, c, h, w], -3.0, 3.0);
        let shuffled = shuffle_pixels(&f, &mut rng);
        let a = run_on(&params, &f, |s, x| cam_attention(s, x, &cam));
        let b = run_on(&params, &shuffled, |s, x| cam_attention(s, x, &cam));
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn sam_attention_ignores_channel_order(seed in any::<u64>(), c in 1usize..12, h in 1usize..8) {
        let (params, sam) = sam_setup(seed);
        let mut rng = common::rng(seed ^ 2);
        let f = uniform(&mut rng, &[2, c, h, h], -3.0, 3.0);
        let shuffled = shuffle_channels(&f, &mut rng);
        let a = run_on(&params, &f, |s, x| sam_attention(s, x, &sam));
        let b = run_on(&params, &shuffled, |s, x| sam_attention(s, x, &sam));
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn cam_attention_lies_in_the_open_unit_interval(seed in any::<u64>(), c in 1usize..10) {
        let (params, cam) = cam_setup(c, c, 2, seed);
        let f = uniform(&mut common::rng(seed), &[1, c, 3, 3], -3.0, 3.0);
        let a = run_on(&params, &f, |s, x| cam_attention(s, x, &cam));
        prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
