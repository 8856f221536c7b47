//! Finite-difference checks for every differentiable primitive and the
//! composite heads, shared by the gradient tests and the acceptance run.

use lesionaware::classifier::{classify, mam_enhance, ClassifierParams};
use lesionaware::fex::FexConfig;
use lesionaware::lanet::{CamSharing, LaNet, LaNetConfig};
use lesionaware::model::{Heads, Model, ModelConfig};
use lesionaware::nn::{Mode, ParamId, ParamSet, Session};
use lesionaware::fex::FeaturePyramid;
use lesionaware::tensor::{BatchNormMode, PoolKind, Tape, Tensor, Window};
use lesionaware::training::{classification_loss, hybrid_loss, localization_loss, semi_localization_loss};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{binary, bound, fd_check, leaves, one_hot_rows, signed, uniform, with_values, Probe};

pub struct Case {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> f64,
}

pub const INSTANCES: usize = 20;

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn add_broadcast(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let a = uniform(rng, &[n, c, h, h], -1.0, 1.0);
    let b = uniform(rng, &[1, c, 1, 1], -1.0, 1.0);
    fd_check(&[a, b], &|x| leaves(x, |t, v| t.add(v[0], v[1]).unwrap()))
}

fn mul_broadcast(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let a = uniform(rng, &[n, c, h, h], -1.0, 1.0);
    let b = uniform(rng, &[n, 1, h, h], -1.0, 1.0);
    fd_check(&[a, b], &|x| leaves(x, |t, v| t.mul(v[0], v[1]).unwrap()))
}

fn mul_same(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
    let a = uniform(rng, &shape, -1.0, 1.0);
    let b = uniform(rng, &shape, -1.0, 1.0);
    fd_check(&[a, b], &|x| leaves(x, |t, v| t.mul(v[0], v[1]).unwrap()))
}

fn scale_shift(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 5)];
    let a = uniform(rng, &shape, -1.0, 1.0);
    let (k, c) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
    fd_check(&[a], &|x| {
        leaves(x, |t, v| {
            let s = t.scale(v[0], k).unwrap();
            t.add_scalar(s, c).unwrap()
        })
    })
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 3), dims(rng, 2, 6)];
    let a = signed(rng, &shape, 0.05, 1.0);
    fd_check(&[a], &|x| leaves(x, |t, v| t.relu(v[0]).unwrap()))
}

fn sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 3), dims(rng, 2, 6)];
    let a = uniform(rng, &shape, -3.0, 3.0);
    fd_check(&[a], &|x| leaves(x, |t, v| t.sigmoid(v[0]).unwrap()))
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 2), dims(rng, 2, 4), dims(rng, 1, 3)];
    let axis = dims(rng, 0, 2);
    let a = uniform(rng, &shape, -2.0, 2.0);
    fd_check(&[a], &|x| leaves(x, |t, v| t.softmax(v[0], axis).unwrap()))
}

fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    let a = uniform(rng, &[m, k], -1.0, 1.0);
    let b = uniform(rng, &[k, n], -1.0, 1.0);
    fd_check(&[a, b], &|x| leaves(x, |t, v| t.matmul(v[0], v[1]).unwrap()))
}

fn linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, din, dout) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4));
    let x = uniform(rng, &[n, din], -1.0, 1.0);
    let w = uniform(rng, &[dout, din], -1.0, 1.0);
    let b = uniform(rng, &[dout], -1.0, 1.0);
    if rng.random_bool(0.5) {
        fd_check(&[x, w, b], &|x| leaves(x, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()))
    } else {
        fd_check(&[x, w], &|x| leaves(x, |t, v| t.linear(v[0], v[1], None).unwrap()))
    }
}

fn conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let (n, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let (h, w) = (dims(rng, 3, 6), dims(rng, 3, 6));
    let k = dims(rng, 1, 3);
    let (stride, pad) = (dims(rng, 1, 2), dims(rng, 0, 1));
    let x = uniform(rng, &[n, ci, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[co, ci, k, k], -1.0, 1.0);
    let b = uniform(rng, &[co], -1.0, 1.0);
    if rng.random_bool(0.5) {
        fd_check(&[x, wt, b], &|x| {
            leaves(x, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap())
        })
    } else {
        fd_check(&[x, wt], &|x| leaves(x, |t, v| t.conv2d(v[0], v[1], None, stride, pad).unwrap()))
    }
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h) = (dims(rng, 2, 3), dims(rng, 1, 3), dims(rng, 1, 3));
    let x = uniform(rng, &[n, c, h, h], -1.0, 1.0);
    let g = uniform(rng, &[c], 0.5, 1.5);
    let b = uniform(rng, &[c], -0.5, 0.5);
    fd_check(&[x, g, b], &|x| {
        leaves(x, |t, v| t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 }).unwrap().0)
    })
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
    let x = uniform(rng, &[n, c, h, h], -1.0, 1.0);
    let g = uniform(rng, &[c], 0.5, 1.5);
    let b = uniform(rng, &[c], -0.5, 0.5);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    fd_check(&[x, g, b], &|x| {
        leaves(x, |t, v| {
            let mode = BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 };
            t.batch_norm(v[0], v[1], v[2], mode).unwrap().0
        })
    })
}

fn pool(rng: &mut ChaCha8Rng, kind: PoolKind) -> f64 {
    let k = dims(rng, 1, 2);
    let h = k * dims(rng, 1, 3);
    let window = if rng.random_bool(0.5) { Window::Global } else { Window::Square(k) };
    let shape = [dims(rng, 1, 2), dims(rng, 1, 3), h, h];
    let x = uniform(rng, &shape, -1.0, 1.0);
    fd_check(&[x], &|x| leaves(x, |t, v| t.pool2d(v[0], kind, window).unwrap()))
}

fn max_pool(rng: &mut ChaCha8Rng) -> f64 {
    pool(rng, PoolKind::Max)
}

fn avg_pool(rng: &mut ChaCha8Rng) -> f64 {
    pool(rng, PoolKind::Avg)
}

fn channel_pool(rng: &mut ChaCha8Rng, kind: PoolKind) -> f64 {
    let shape = [dims(rng, 1, 2), dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3)];
    let x = uniform(rng, &shape, -1.0, 1.0);
    fd_check(&[x], &|x| leaves(x, |t, v| t.channel_pool(v[0], kind).unwrap()))
}

fn channel_max(rng: &mut ChaCha8Rng) -> f64 {
    channel_pool(rng, PoolKind::Max)
}

fn channel_avg(rng: &mut ChaCha8Rng) -> f64 {
    channel_pool(rng, PoolKind::Avg)
}

fn resize(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 1, 4), dims(rng, 1, 4)];
    let x = uniform(rng, &shape, -1.0, 1.0);
    let (oh, ow) = (dims(rng, 1, 6), dims(rng, 1, 6));
    fd_check(&[x], &|x| leaves(x, |t, v| t.resize_bilinear(v[0], oh, ow).unwrap()))
}

fn concat(rng: &mut ChaCha8Rng) -> f64 {
    let axis = dims(rng, 0, 1);
    let (n, h) = (dims(rng, 1, 2), dims(rng, 1, 3));
    let shape_a = if axis == 0 { [n, 2, h, h] } else { [n, 1, h, h] };
    let shape_b = if axis == 0 { [1, 2, h, h] } else { [n, 3, h, h] };
    let a = uniform(rng, &shape_a, -1.0, 1.0);
    let b = uniform(rng, &shape_b, -1.0, 1.0);
    fd_check(&[a, b], &|x| leaves(x, |t, v| t.concat(&[v[0], v[1]], axis).unwrap()))
}

fn reshape_narrow(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (dims(rng, 2, 4), dims(rng, 1, 3));
    let x = uniform(rng, &[n, c, 2, 2], -1.0, 1.0);
    let start = dims(rng, 0, n - 2);
    fd_check(&[x], &|x| {
        leaves(x, |t, v| {
            let y = t.narrow(v[0], 0, start, 2).unwrap();
            t.reshape(y, &[2, c * 4]).unwrap()
        })
    })
}

fn sum_mean(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 4)];
    let x = uniform(rng, &shape, -1.0, 1.0);
    fd_check(&[x], &|x| {
        leaves(x, |t, v| {
            let s = t.sum(v[0]).unwrap();
            let m = t.mean(v[0]).unwrap();
            let m = t.scale(m, 3.0).unwrap();
            t.add(s, m).unwrap()
        })
    })
}

fn bce(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 3), 1, dims(rng, 1, 3), dims(rng, 1, 3)];
    let p = uniform(rng, &shape, 0.05, 0.95);
    let y = binary(rng, &shape);
    fd_check(&[p], &|x| leaves(x, |t, v| t.bce(v[0], &y).unwrap()))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (dims(rng, 1, 4), dims(rng, 2, 4));
    let p = uniform(rng, &[n, k], 0.05, 0.95);
    let y = one_hot_rows(rng, n, k);
    fd_check(&[p], &|x| leaves(x, |t, v| t.cross_entropy(v[0], &y).unwrap()))
}

// ---- composites -----------------------------------------------------------------

/// Cross-entropy through classify(mam_enhance(f, mask)) w.r.t. f, the mask
/// and the classifier weights.
fn mam_classifier(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, s, k) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 2, 3));
    let mut base = ParamSet::<f64>::new();
    let head = ClassifierParams::build(&mut base, rng, c, k).unwrap();
    let ids: Vec<ParamId> = [Some(head.fc.weight), head.fc.bias].into_iter().flatten().collect();
    let f = signed(rng, &[n, c, s, s], 0.05, 1.0);
    let mask = uniform(rng, &[n, 1, s, s], 0.05, 0.95);
    let w = uniform(rng, &[k, c], -1.0, 1.0);
    let b = uniform(rng, &[k], -0.5, 0.5);
    let y = one_hot_rows(rng, n, k);
    fd_check(&[f, mask, w, b], &|x| {
        let params = with_values(&base, &ids, &x[2..]);
        let mut sess = Session::new(&params, Mode::Train);
        let fv = sess.tape.variable(x[0].clone());
        let mv = sess.tape.variable(x[1].clone());
        let att = mam_enhance(&mut sess.tape, fv, mv).unwrap();
        let out = classify(&mut sess, att, &head).unwrap();
        let loss = classification_loss(&mut sess.tape, out.probs, &y).unwrap();
        let (tape, binding, _) = sess.finish();
        let mut inputs = vec![fv, mv];
        inputs.extend(bound(&binding, &ids));
        Probe { tape, out: loss, inputs }
    })
}

/// Localization BCE of a sigmoid mask against a binary target.
fn localization(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 1, 3), 1, dims(rng, 2, 4), dims(rng, 2, 4)];
    let logits = uniform(rng, &shape, -2.5, 2.5);
    let y = binary(rng, &shape);
    fd_check(&[logits], &|x| {
        leaves(x, |t, v| {
            let p = t.sigmoid(v[0]).unwrap();
            localization_loss(t, p, &y).unwrap()
        })
    })
}

/// Logits whose sigmoid stays clear of the pseudo-label threshold.
fn logits_off_threshold(rng: &mut ChaCha8Rng, shape: &[usize], tau: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let z: f64 = rng.random_range(-3.0..3.0);
            if (1.0 / (1.0 + (-z).exp()) - tau).abs() > 1e-3 {
                break z;
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Hybrid loss with labeled and pseudo-labeled mask parts.
fn hybrid(rng: &mut ChaCha8Rng) -> f64 {
    let (m, mu, s, k) = (dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 2, 3), dims(rng, 2, 3));
    let n = m + mu;
    let tau = 0.8;
    let alpha = rng.random_range(0.05..0.5);
    let lambda = rng.random_range(0.0..1.0);
    let mask_logits = logits_off_threshold(rng, &[n, 1, s, s], tau);
    let cls_logits = uniform(rng, &[n, k], -2.0, 2.0);
    let gt = binary(rng, &[m, 1, s, s]);
    let y = one_hot_rows(rng, n, k);
    fd_check(&[mask_logits, cls_logits], &|x| {
        leaves(x, |t, v| {
            let mask = t.sigmoid(v[0]).unwrap();
            let probs = t.softmax(v[1], 1).unwrap();
            let cls = classification_loss(t, probs, &y).unwrap();
            let lab = t.narrow(mask, 0, 0, m).unwrap();
            let unl = t.narrow(mask, 0, m, mu).unwrap();
            let semi = semi_localization_loss(t, Some((lab, &gt)), Some(unl), alpha, tau).unwrap();
            hybrid_loss(t, cls, semi.total, lambda).unwrap()
        })
    })
}

fn tiny_fex(channels: [usize; 2]) -> FexConfig {
    FexConfig {
        n_stages: 2,
        in_channels: 1,
        stem_channels: 4,
        channels_per_stage: channels.to_vec(),
        blocks_per_stage: vec![1, 1],
        input_size: 16,
    }
}

/// BCE of the fused lesion mask w.r.t. the pyramid and every branch parameter.
fn lanet_head(rng: &mut ChaCha8Rng) -> f64 {
    let fex = tiny_fex([4, 8]);
    let sharing = if rng.random_bool(0.5) { CamSharing::PerLevel } else { CamSharing::Shared };
    let cfg = LaNetConfig {
        cam_sharing: sharing,
        reduction: 2,
        ..LaNetConfig::default()
    };
    let mut base = ParamSet::<f64>::new();
    let net = LaNet::build(&cfg, &fex, &mut base, rng).unwrap();
    let ids = base.trainable_with_prefix(&["lanet."]);
    let n = 2;
    let mut inputs = vec![signed(rng, &[n, 4, 8, 8], 0.05, 1.0), signed(rng, &[n, 8, 4, 4], 0.05, 1.0)];
    for &id in &ids {
        let shape = base.get(id).value.shape().to_vec();
        inputs.push(uniform(rng, &shape, -0.5, 0.5));
    }
    let y = binary(rng, &[n, 1, 4, 4]);
    fd_check(&inputs, &|x| {
        let params = with_values(&base, &ids, &x[2..]);
        let mut sess = Session::new(&params, Mode::Train);
        let f1 = sess.tape.variable(x[0].clone());
        let f2 = sess.tape.variable(x[1].clone());
        let pyramid = FeaturePyramid { maps: vec![f1, f2] };
        let mask = net.fuse_predict(&mut sess, &pyramid).unwrap();
        let loss = localization_loss(&mut sess.tape, mask, &y).unwrap();
        let (tape, binding, _) = sess.finish();
        let mut vars = vec![f1, f2];
        vars.extend(bound(&binding, &ids));
        Probe { tape, out: loss, inputs: vars }
    })
}

/// Hybrid loss of the whole model w.r.t. the input images.
fn full_model(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = ModelConfig {
        fex: tiny_fex([4, 8]),
        lanet: Some(LaNetConfig {
            reduction: 2,
            ..LaNetConfig::default()
        }),
        num_classes: 2,
        use_mam: true,
    };
    let model = Model::<f64>::build(&cfg, rng.random()).unwrap();
    let images = uniform(rng, &[2, 1, 16, 16], 0.0, 1.0);
    let gt = binary(rng, &[1, 1, 4, 4]);
    let y = one_hot_rows(rng, 2, 2);
    fd_check(&[images], &|x| {
        let mut sess = Session::new(&model.params, Mode::Train);
        let xv = sess.tape.variable(x[0].clone());
        let out = model.forward(&mut sess, xv, Heads::All).unwrap();
        let mask = out.mask.unwrap();
        let t: &mut Tape<f64> = &mut sess.tape;
        let cls = classification_loss(t, out.class.unwrap().probs, &y).unwrap();
        let lab = t.narrow(mask, 0, 0, 1).unwrap();
        let unl = t.narrow(mask, 0, 1, 1).unwrap();
        let semi = semi_localization_loss(t, Some((lab, &gt)), Some(unl), 0.1, 0.8).unwrap();
        let loss = hybrid_loss(t, cls, semi.total, 0.5).unwrap();
        let (tape, _, _) = sess.finish();
        Probe { tape, out: loss, inputs: vec![xv] }
    })
}

pub fn primitives() -> Vec<Case> {
    vec![
        Case { name: "add (broadcast)", run: add_broadcast },
        Case { name: "mul (broadcast)", run: mul_broadcast },
        Case { name: "mul", run: mul_same },
        Case { name: "scale + add_scalar", run: scale_shift },
        Case { name: "relu", run: relu },
        Case { name: "sigmoid", run: sigmoid },
        Case { name: "softmax", run: softmax },
        Case { name: "matmul", run: matmul },
        Case { name: "linear", run: linear },
        Case { name: "conv2d", run: conv2d },
        Case { name: "batch_norm (train)", run: batch_norm_train },
        Case { name: "batch_norm (eval)", run: batch_norm_eval },
        Case { name: "max pool", run: max_pool },
        Case { name: "avg pool", run: avg_pool },
        Case { name: "channel max", run: channel_max },
        Case { name: "channel avg", run: channel_avg },
        Case { name: "resize_bilinear", run: resize },
        Case { name: "concat", run: concat },
        Case { name: "narrow + reshape", run: reshape_narrow },
        Case { name: "sum + mean", run: sum_mean },
        Case { name: "bce", run: bce },
        Case { name: "cross_entropy", run: cross_entropy },
    ]
}

pub fn composites() -> Vec<Case> {
    vec![
        Case { name: "mask attention + classifier", run: mam_classifier },
        Case { name: "localization loss", run: localization },
        Case { name: "hybrid loss", run: hybrid },
        Case { name: "lesion-aware head", run: lanet_head },
        Case { name: "full model", run: full_model },
    ]
}

/// Worst error of each case over `instances` random draws.
pub fn run(cases: &[Case], instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = super::rng(seed.wrapping_add(1000 * i as u64));
            let worst = (0..instances).map(|_| (c.run)(&mut rng)).fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}
