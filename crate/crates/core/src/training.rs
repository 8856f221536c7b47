//! Losses, the Adam optimizer, and the two-stage training procedure.
//!
//! Stage 1 pre-trains the extractor and lesion-aware branch on samples with
//! location labels. Stage 2 trains all networks on every sample with the
//! hybrid loss; samples without location labels contribute through
//! thresholded pseudo-labels of their own predicted masks.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch_images, location_target, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{Heads, Model};
use crate::nn::{Binding, Mode, ParamId, ParamSet, Session};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub repeats: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            alpha: 0.1,
            tau: 0.8,
            lr: 1e-3,
            batch_labeled: 8,
            batch_unlabeled: 8,
            stage1_epochs: 20,
            stage2_epochs: 100,
            val_fraction: 0.15,
            seed: 0,
            repeats: 3,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0,1]", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be non-negative", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0,1)", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val fraction {} outside (0,1)", self.val_fraction));
        }
        if self.repeats == 0 {
            return bad("repeats must be positive".into());
        }
        Ok(())
    }
}

// ---- losses ------------------------------------------------------------------

fn check_binary<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    match t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::Validation(format!("{what} must be binary, found {v}"))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy between the predicted mask and a binary target.
pub fn localization_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    check_binary(gt, "location target")?;
    tape.bce(pred, gt)
}

/// Mean over the batch of `-log p_true`.
pub fn classification_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &Tensor<T>) -> Result<Var> {
    check_binary(labels, "one-hot labels")?;
    let k = *labels.shape().last().unwrap_or(&0);
    if labels.shape().len() != 2
        || labels
            .data()
            .chunks(k.max(1))
            .any(|row| row.iter().filter(|&&v| v == T::one()).count() != 1)
    {
        return Err(Error::Validation(format!(
            "labels of shape {:?} are not one-hot rows",
            labels.shape()
        )));
    }
    tape.cross_entropy(probs, labels)
}

/// Pseudo-label: 1 where `p >= tau`, else 0. The result is a plain constant.
pub fn binarize<T: Scalar>(pred: &Tensor<T>, tau: f64) -> Tensor<T> {
    let tau = T::from_f64(tau);
    pred.map(|p| if p >= tau { T::one() } else { T::zero() })
}

/// Terms of the semi-supervised localization loss.
pub struct SemiLocTerms {
    pub total: Var,
    pub labeled: Option<Var>,
    /// Unweighted BCE against the pseudo-labels.
    pub pseudo: Option<Var>,
}

/// `BCE(labeled) + alpha * BCE(unlabeled, binarize(unlabeled, tau))`; an
/// absent part contributes 0.
pub fn semi_localization_loss<T: Scalar>(
    tape: &mut Tape<T>,
    labeled: Option<(Var, &Tensor<T>)>,
    unlabeled: Option<Var>,
    alpha: f64,
    tau: f64,
) -> Result<SemiLocTerms> {
    let lab = match labeled {
        Some((p, gt)) => Some(localization_loss(tape, p, gt)?),
        None => None,
    };
    let pseudo = match unlabeled {
        Some(p) => {
            let target = binarize(tape.value(p), tau);
            Some(tape.bce(p, &target)?)
        }
        None => None,
    };
    let total = match (lab, pseudo) {
        (Some(l), Some(u)) => {
            let w = tape.scale(u, T::from_f64(alpha))?;
            tape.add(l, w)?
        }
        (Some(l), None) => l,
        (None, Some(u)) => tape.scale(u, T::from_f64(alpha))?,
        (None, None) => {
            return Err(Error::Usage(
                "semi-supervised localization loss needs a labeled or unlabeled part".into(),
            ))
        }
    };
    Ok(SemiLocTerms {
        total,
        labeled: lab,
        pseudo,
    })
}

/// `lambda * cls + (1 - lambda) * semi_loc`.
pub fn hybrid_loss<T: Scalar>(tape: &mut Tape<T>, cls: Var, semi_loc: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
    }
    let a = tape.scale(cls, T::from_f64(lambda))?;
    let b = tape.scale(semi_loc, T::from_f64(1.0 - lambda))?;
    tape.add(a, b)
}

pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * k];
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::Validation(format!("class {c} outside [0, {k})")));
        }
        data[i * k + c] = T::one();
    }
    Tensor::new(vec![labels.len(), k], data)
}

// ---- optimizer ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction; moments are kept per parameter position.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: vec![None; num_params],
        }
    }

    /// Updates the parameters `ids` from their accumulated gradients.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let e = params.get(id);
            if e.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {}", e.name)));
            }
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for &id in ids {
            let e = params.get_mut(id);
            let n = e.grad.len();
            let mom = self.moments[id.0].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let values = e.value.data_mut();
            for i in 0..n {
                let g = e.grad[i];
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * g * g;
                let mhat = mom.m[i] / c1;
                let vhat = mom.v[i] / c2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---- batches -----------------------------------------------------------------

/// Seeded endless stream over a pool of indices, reshuffled on every pass.
struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(pool: Vec<usize>, rng: ChaCha8Rng) -> Self {
        Cycler {
            order: Vec::new(),
            pos: 0,
            pool,
            rng,
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Batch<T> {
    images: Tensor<T>,
    onehot: Tensor<T>,
    /// Targets for the first `n_labeled` samples, `[n_labeled,1,S,S]`.
    targets: Option<Tensor<T>>,
    n_labeled: usize,
    n_unlabeled: usize,
}

fn build_batch<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    labeled: &[usize],
    unlabeled: &[usize],
    aug: Option<&mut ChaCha8Rng>,
) -> Result<Batch<T>> {
    let picked: Vec<&Sample> = labeled
        .iter()
        .chain(unlabeled)
        .map(|&i| &dataset.samples[i])
        .collect();
    let owned: Vec<Sample> = match aug {
        Some(rng) => picked.iter().map(|s| augment(s, rng)).collect(),
        None => picked.iter().map(|&s| s.clone()).collect(),
    };
    let refs: Vec<&Sample> = owned.iter().collect();
    let fex = &model.config.fex;
    let images = batch_images(&refs, fex.in_channels)?;
    let labels: Vec<usize> = refs.iter().map(|s| s.class_label).collect();
    let onehot = one_hot(&labels, model.config.num_classes)?;
    let s = fex.top_size();
    let targets = if labeled.is_empty() {
        None
    } else {
        let mut data = Vec::with_capacity(labeled.len() * s * s);
        for smp in &refs[..labeled.len()] {
            let loc = smp.location.as_ref().ok_or_else(|| {
                Error::Internal(format!("sample {} has no location label", smp.id))
            })?;
            let t = location_target(loc, smp.image.width, smp.image.height, s)?;
            data.extend(t.into_iter().map(T::from_f64));
        }
        Some(Tensor::new(vec![labeled.len(), 1, s, s], data)?)
    };
    Ok(Batch {
        images,
        onehot,
        targets,
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
    })
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

type Pass<T> = (Gradients<T>, Binding, Vec<(ParamId, Tensor<T>)>);

/// Runs backward from `loss` and closes the session.
fn conclude<T: Scalar>(s: Session<'_, T>, loss: Var) -> Result<Pass<T>> {
    let grads = s.tape.backward(loss)?;
    let (_, binding, updates) = s.finish();
    Ok((grads, binding, updates))
}

/// Steps Adam on the pass gradients and applies queued running statistics.
fn apply_step<T: Scalar>(model: &mut Model<T>, pass: Pass<T>, adam: &mut Adam<T>, ids: &[ParamId]) -> Result<()> {
    let (grads, binding, updates) = pass;
    model.params.zero_grad();
    model.params.accumulate(&binding, &grads);
    adam.step(&mut model.params, ids)?;
    model.params.commit(updates);
    Ok(())
}

// ---- stage 1 -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage1Record {
    pub epoch: usize,
    pub l_loc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Called after every epoch with the current model.
pub type EpochHook<'h, T> = dyn FnMut(Stage, usize, &Model<T>) -> Result<()> + 'h;

/// Minimizes the localization loss over extractor and branch parameters on
/// the samples of `dataset` that carry a location label.
pub fn train_stage1<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<Vec<Stage1Record>> {
    cfg.validate()?;
    if model.lanet.is_none() {
        return Err(Error::Config("stage 1 needs the lesion-aware branch".into()));
    }
    let located: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].location.is_some())
        .collect();
    if located.is_empty() {
        return Err(Error::Usage("stage 1 needs at least one located sample".into()));
    }
    dataset.check_image_size(model.config.fex.input_size)?;
    let ids = model.params.trainable_with_prefix(&["fex.", "lanet."]);
    let mut adam = Adam::new(cfg.lr, model.params.len());
    let mut order_rng = rng_for(cfg.seed, 11);
    let mut aug_rng = rng_for(cfg.seed, 12);
    let mut log = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 1..=cfg.stage1_epochs {
        let mut order = located.clone();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_labeled) {
            let batch = build_batch(model, dataset, chunk, &[], cfg.augment.then_some(&mut aug_rng))?;
            let mut s = Session::new(&model.params, Mode::Train);
            let x = s.tape.constant(batch.images);
            let out = model.forward(&mut s, x, Heads::Localization)?;
            let mask = out.mask.expect("branch present");
            let target = batch.targets.expect("labeled batch");
            let loss = localization_loss(&mut s.tape, mask, &target)?;
            total += s.tape.value(loss).item().as_f64();
            steps += 1;
            let pass = conclude(s, loss)?;
            apply_step(model, pass, &mut adam, &ids)?;
        }
        log.push(Stage1Record {
            epoch,
            l_loc: total / steps as f64,
        });
        hook(Stage::One, epoch, model)?;
    }
    Ok(log)
}

// ---- stage 2 -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_loc_labeled: Option<f64>,
    pub l_loc_pseudo: Option<f64>,
    pub l_hyb: f64,
    pub val_accuracy: f64,
    pub val_jsi: Option<f64>,
}

pub struct Stage2Outcome<T> {
    pub log: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation accuracy.
    pub best_epoch: Option<usize>,
    /// Parameters at `best_epoch` (the final ones when no epoch ran).
    pub best_params: ParamSet<T>,
    pub adam: Adam<T>,
}

#[derive(Default)]
struct Running {
    cls: f64,
    lab: f64,
    lab_steps: usize,
    pseudo: f64,
    hyb: f64,
    steps: usize,
}

/// Trains all networks on `train` with the hybrid loss, keeping the epoch
/// with the best accuracy on `val`.
pub fn train_stage2<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<Stage2Outcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("stage 2 needs nonempty train and validation sets".into()));
    }
    train.check_image_size(model.config.fex.input_size)?;
    let has_branch = model.lanet.is_some();
    let labeled: Vec<usize> = (0..train.len())
        .filter(|&i| train.samples[i].location.is_some())
        .collect();
    let unlabeled: Vec<usize> = (0..train.len())
        .filter(|&i| train.samples[i].location.is_none())
        .collect();
    let loc_terms = has_branch && !labeled.is_empty();
    if has_branch && labeled.is_empty() {
        warn!("no location labels in the training set; stage 2 reduces to classification");
    }
    let m = if labeled.is_empty() { 0 } else { cfg.batch_labeled.min(labeled.len()) };
    let mu = if unlabeled.is_empty() { 0 } else { cfg.batch_unlabeled.min(unlabeled.len()) };
    let steps = train.len().div_ceil(m + mu);
    let ids = model.params.trainable_with_prefix(&["fex.", "lanet.", "classifier."]);
    let mut adam = Adam::new(cfg.lr, model.params.len());
    let mut lab_stream = Cycler::new(labeled, rng_for(cfg.seed, 21));
    let mut unl_stream = Cycler::new(unlabeled, rng_for(cfg.seed, 22));
    let mut aug_rng = rng_for(cfg.seed, 23);
    let mut log = Vec::with_capacity(cfg.stage2_epochs);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut best_params = model.params.clone();
    let eval_opts = EvalOptions::default();
    for epoch in 1..=cfg.stage2_epochs {
        let mut run = Running::default();
        for _ in 0..steps {
            let li = lab_stream.take(m);
            let ui = unl_stream.take(mu);
            let batch = build_batch(model, train, &li, &ui, cfg.augment.then_some(&mut aug_rng))?;
            let mut s = Session::new(&model.params, Mode::Train);
            let x = s.tape.constant(batch.images);
            let out = model.forward(&mut s, x, Heads::All)?;
            let class = out.class.expect("all heads");
            let l_cls = classification_loss(&mut s.tape, class.probs, &batch.onehot)?;
            run.cls += s.tape.value(l_cls).item().as_f64();
            let loss = if loc_terms {
                let mask = out.mask.expect("branch present");
                let lab_part = if batch.n_labeled > 0 {
                    let p = s.tape.narrow(mask, 0, 0, batch.n_labeled)?;
                    Some(p)
                } else {
                    None
                };
                let unl_part = if batch.n_unlabeled > 0 {
                    Some(s.tape.narrow(mask, 0, batch.n_labeled, batch.n_unlabeled)?)
                } else {
                    None
                };
                let targets = batch.targets.as_ref();
                let semi = semi_localization_loss(
                    &mut s.tape,
                    lab_part.zip(targets),
                    unl_part,
                    cfg.alpha,
                    cfg.tau,
                )?;
                if let Some(l) = semi.labeled {
                    run.lab += s.tape.value(l).item().as_f64();
                    run.lab_steps += 1;
                }
                if let Some(u) = semi.pseudo {
                    run.pseudo += s.tape.value(u).item().as_f64();
                }
                hybrid_loss(&mut s.tape, l_cls, semi.total, cfg.lambda)?
            } else if has_branch {
                s.tape.scale(l_cls, T::from_f64(cfg.lambda))?
            } else {
                l_cls
            };
            run.hyb += s.tape.value(loss).item().as_f64();
            run.steps += 1;
            let pass = conclude(s, loss)?;
            apply_step(model, pass, &mut adam, &ids)?;
        }
        let report = evaluate(model, val, &eval_opts)?;
        let acc = report.classification.accuracy;
        let jsi = report.jsi;
        let n = run.steps as f64;
        log.push(EpochRecord {
            epoch,
            l_cls: run.cls / n,
            l_loc_labeled: loc_terms.then(|| run.lab / run.lab_steps.max(1) as f64),
            l_loc_pseudo: loc_terms.then(|| run.pseudo / n),
            l_hyb: run.hyb / n,
            val_accuracy: acc,
            val_jsi: jsi,
        });
        let key_jsi = jsi.unwrap_or(0.0);
        let better = match best {
            None => true,
            Some((_, a, j)) => acc > a || (acc == a && key_jsi > j),
        };
        if better {
            best = Some((epoch, acc, key_jsi));
            best_params = model.params.clone();
        }
        hook(Stage::Two, epoch, model)?;
    }
    Ok(Stage2Outcome {
        log,
        best_epoch: best.map(|b| b.0),
        best_params,
        adam,
    })
}

// ---- full procedure --------------------------------------------------------------

pub struct FitOutcome<T: Scalar> {
    pub stage1: Vec<Stage1Record>,
    pub stage2: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Model at the selected epoch.
    pub best: Model<T>,
    pub adam: Adam<T>,
}

/// Stage 1 (when the model has a branch and there are located samples),
/// then stage 2. `model` holds the final-epoch parameters afterwards.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<FitOutcome<T>> {
    let stage1 = if model.lanet.is_some() && train.num_located() > 0 && cfg.stage1_epochs > 0 {
        train_stage1(model, train, cfg, hook)?
    } else {
        Vec::new()
    };
    let out = train_stage2(model, train, val, cfg, hook)?;
    let mut best = model.clone();
    best.params = out.best_params;
    Ok(FitOutcome {
        stage1,
        stage2: out.log,
        best_epoch: out.best_epoch,
        best,
        adam: out.adam,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn stage1_csv(log: &[Stage1Record]) -> String {
    let mut out = String::from("epoch,L_loc\n");
    for r in log {
        let _ = writeln!(out, "{},{}", r.epoch, r.l_loc);
    }
    out
}

pub fn stage2_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L_cls,L_loc_labeled,L_loc_pseudo,L_hyb,val_accuracy,val_JSI\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.l_cls,
            opt(r.l_loc_labeled),
            opt(r.l_loc_pseudo),
            r.l_hyb,
            r.val_accuracy,
            opt(r.val_jsi)
        );
    }
    out
}
