//! Mask-attention enhancement of the top feature map and the classification
//! head (global average pooling, one fully-connected layer, softmax).

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{Linear, ParamSet, Session};
use crate::tensor::{PoolKind, Scalar, Tape, Var, Window};

/// `f_att = f_n * (1 + mask)`, the single-channel mask broadcast over channels.
pub fn mam_enhance<T: Scalar>(tape: &mut Tape<T>, f_top: Var, mask: Var) -> Result<Var> {
    let fs = tape.shape(f_top).to_vec();
    let ms = tape.shape(mask).to_vec();
    if fs.len() != 4 || ms.len() != 4 || ms[1] != 1 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(dim_err!(
            "mask {ms:?} does not match top feature map {fs:?}"
        ));
    }
    let gain = tape.add_scalar(mask, T::one())?;
    tape.mul(f_top, gain)
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub fc: Linear,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl ClassifierParams {
    pub fn build<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(ClassifierParams {
            fc: Linear::new(params, rng, "classifier.fc", in_channels, num_classes, true)?,
            num_classes,
            in_channels,
        })
    }
}

pub struct ClassOutput {
    /// Pre-softmax scores `[N,K]`.
    pub logits: Var,
    /// Row-stochastic class probabilities `[N,K]`.
    pub probs: Var,
}

pub fn classify<T: Scalar>(
    s: &mut Session<'_, T>,
    features: Var,
    params: &ClassifierParams,
) -> Result<ClassOutput> {
    let shape = s.tape.shape(features).to_vec();
    if shape.len() != 4 || shape[1] != params.in_channels {
        return Err(dim_err!(
            "classifier expects [N, {}, S, S], got {shape:?}",
            params.in_channels
        ));
    }
    let pooled = s.tape.pool2d(features, PoolKind::Avg, Window::Global)?;
    let flat = s.tape.reshape(pooled, &[shape[0], shape[1]])?;
    let logits = params.fc.forward(s, flat)?;
    let probs = s.tape.softmax(logits, 1)?;
    Ok(ClassOutput { logits, probs })
}
