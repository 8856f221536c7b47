//! The full network: feature extractor, optional lesion-aware branch, and
//! classifier, sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify, mam_enhance, ClassOutput, ClassifierParams};
use crate::error::{Error, Result};
use crate::fex::{FeatureExtractor, FeaturePyramid, FexConfig};
use crate::lanet::{LaNet, LaNetConfig};
use crate::nn::{Mode, ParamSet, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fex: FexConfig,
    /// `None` builds the vanilla classifier without a localization branch.
    pub lanet: Option<LaNetConfig>,
    pub num_classes: usize,
    /// When false the classifier reads the raw top feature map.
    pub use_mam: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fex: FexConfig::default(),
            lanet: Some(LaNetConfig::default()),
            num_classes: 2,
            use_mam: true,
        }
    }
}

impl ModelConfig {
    /// Compact two-stage model used for 64-pixel desk experiments.
    pub fn desk(input_size: usize) -> Self {
        ModelConfig {
            fex: FexConfig::truncated(2, input_size),
            ..Self::default()
        }
    }

    pub fn vanilla(mut self) -> Self {
        self.lanet = None;
        self.use_mam = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.fex.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.use_mam && self.lanet.is_none() {
            return Err(Error::Config("mask attention needs the lesion-aware branch".into()));
        }
        Ok(())
    }

    pub fn has_localization(&self) -> bool {
        self.lanet.is_some()
    }
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    /// Lesion mask only (stage-1 training).
    Localization,
    /// Mask (when the branch exists) and class probabilities.
    All,
}

pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub mask: Option<crate::tensor::Var>,
    pub class: Option<ClassOutput>,
}

/// Per-sample predictions from an eval-mode pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Lesion probabilities at `S_n x S_n`, row-major.
    pub mask: Option<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub fex: FeatureExtractor,
    pub lanet: Option<LaNet>,
    pub classifier: ClassifierParams,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every network from `seed`.
    ///
    /// Each network draws from its own stream, so a vanilla model has the
    /// same extractor weights as the full model with the same seed.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let fex = FeatureExtractor::build(&config.fex, &mut params, &mut stream_rng(seed, 1))?;
        let lanet = match &config.lanet {
            Some(c) => Some(LaNet::build(c, &config.fex, &mut params, &mut stream_rng(seed, 2))?),
            None => None,
        };
        let classifier = ClassifierParams::build(
            &mut params,
            &mut stream_rng(seed, 3),
            config.fex.top_channels(),
            config.num_classes,
        )?;
        Ok(Model {
            config: config.clone(),
            params,
            fex,
            lanet,
            classifier,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session<'_, T>,
        images: crate::tensor::Var,
        heads: Heads,
    ) -> Result<ForwardOutput> {
        let pyramid = self.fex.extract(s, images)?;
        let mask = match &self.lanet {
            Some(l) => Some(l.fuse_predict(s, &pyramid)?),
            None => None,
        };
        if heads == Heads::Localization && mask.is_none() {
            return Err(Error::Config("model has no localization branch".into()));
        }
        let class = match heads {
            Heads::Localization => None,
            Heads::All => {
                let top = pyramid.top();
                let features = match (self.config.use_mam, mask) {
                    (true, Some(m)) => mam_enhance(&mut s.tape, top, m)?,
                    _ => top,
                };
                Some(classify(s, features, &self.classifier)?)
            }
        };
        Ok(ForwardOutput {
            pyramid,
            mask,
            class,
        })
    }

    /// Eval-mode predictions for a `[N,C,M,M]` batch, processed in chunks.
    pub fn predict(&self, images: &Tensor<T>, chunk: usize) -> Result<Vec<Prediction>> {
        let n = images.shape()[0];
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let parts = (start..start + len)
                .map(|i| images.sample(i))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&parts)?;
            let mut s = Session::new(&self.params, Mode::Eval);
            let x = s.tape.constant(batch);
            let fo = self.forward(&mut s, x, Heads::All)?;
            let class = fo.class.expect("all heads evaluated");
            let probs = s.tape.value(class.probs).to_f64_vec();
            let k = self.config.num_classes;
            let masks = fo.mask.map(|m| s.tape.value(m).to_f64_vec());
            for i in 0..len {
                let mask = masks.as_ref().map(|m| {
                    let per = m.len() / len;
                    m[i * per..(i + 1) * per].to_vec()
                });
                out.push(Prediction {
                    mask,
                    probs: probs[i * k..(i + 1) * k].to_vec(),
                });
            }
            start += len;
        }
        Ok(out)
    }
}
