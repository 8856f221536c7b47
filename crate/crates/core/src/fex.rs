//! Residual feature extractor producing the multi-scale feature pyramid.
//!
//! A stride-2 stem convolution is followed by `n_stages` stages of basic
//! residual blocks. The first stage keeps the stem resolution and every later
//! stage halves it, so an `M x M` input yields maps of size
//! `M/2, M/4, ..., M/2^n`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_map, BatchNorm2d, Conv2d, ParamSet, Session};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FexConfig {
    pub n_stages: usize,
    /// 1 for grayscale input, 3 for RGB-stored datasets.
    pub in_channels: usize,
    pub stem_channels: usize,
    pub channels_per_stage: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Side length `M` of the square input.
    pub input_size: usize,
}

impl Default for FexConfig {
    fn default() -> Self {
        FexConfig {
            n_stages: 4,
            in_channels: 1,
            stem_channels: 16,
            channels_per_stage: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            input_size: 256,
        }
    }
}

impl FexConfig {
    /// Default four-stage extractor for the given input size.
    pub fn with_input(input_size: usize) -> Self {
        FexConfig {
            input_size,
            ..Self::default()
        }
    }

    /// ResNet18-shaped preset: 64-channel stem, two blocks per stage.
    pub fn resnet18_like(input_size: usize) -> Self {
        FexConfig {
            n_stages: 4,
            in_channels: 1,
            stem_channels: 64,
            channels_per_stage: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            input_size,
        }
    }

    /// The first `n` stages of the default channel plan.
    pub fn truncated(n_stages: usize, input_size: usize) -> Self {
        let channels = (0..n_stages).map(|i| 16usize << i).collect();
        FexConfig {
            n_stages,
            in_channels: 1,
            stem_channels: 16,
            channels_per_stage: channels,
            blocks_per_stage: vec![1; n_stages],
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 2 {
            return Err(Error::Config(format!(
                "n_stages must be at least 2, got {}",
                self.n_stages
            )));
        }
        if self.channels_per_stage.len() != self.n_stages
            || self.blocks_per_stage.len() != self.n_stages
        {
            return Err(Error::Config(format!(
                "expected {} entries in channels_per_stage and blocks_per_stage, got {} and {}",
                self.n_stages,
                self.channels_per_stage.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.channels_per_stage.contains(&0)
            || self.blocks_per_stage.contains(&0)
            || self.stem_channels == 0
            || self.in_channels == 0
        {
            return Err(Error::Config("channel and block counts must be positive".into()));
        }
        let div = 1usize << self.n_stages;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by 2^{} = {div}",
                self.input_size, self.n_stages
            )));
        }
        Ok(())
    }

    /// Spatial sizes `S_1..S_n` of the emitted maps.
    pub fn pyramid_sizes(&self) -> Vec<usize> {
        (0..self.n_stages)
            .map(|i| self.input_size >> (i + 1))
            .collect()
    }

    pub fn top_size(&self) -> usize {
        self.input_size >> self.n_stages
    }

    pub fn top_channels(&self) -> usize {
        *self.channels_per_stage.last().expect("validated config")
    }
}

/// Two 3x3 conv + BN layers with an identity or 1x1-projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(params, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false)?;
        let bn1 = BatchNorm2d::new(params, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv2d::new(params, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false)?;
        let bn2 = BatchNorm2d::new(params, &format!("{name}.bn2"), c_out)?;
        let shortcut = if stride != 1 || c_in != c_out {
            let conv = Conv2d::new(params, rng, &format!("{name}.down.conv"), c_in, c_out, 1, stride, 0, false)?;
            let bn = BatchNorm2d::new(params, &format!("{name}.down.bn"), c_out)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let p = conv.forward(s, x)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let sum = s.tape.add(h, skip)?;
        s.tape.relu(sum)
    }
}

/// Ordered feature maps `f_1..f_n`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Var>,
}

impl FeaturePyramid {
    pub fn top(&self) -> Var {
        *self.maps.last().expect("pyramid is never empty")
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: FexConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

impl FeatureExtractor {
    /// Registers all extractor parameters under the `fex.` prefix.
    pub fn build<T: Scalar>(
        config: &FexConfig,
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(
            params,
            rng,
            "fex.stem.conv",
            config.in_channels,
            config.stem_channels,
            3,
            2,
            1,
            false,
        )?;
        let stem_bn = BatchNorm2d::new(params, "fex.stem.bn", config.stem_channels)?;
        let mut stages = Vec::with_capacity(config.n_stages);
        let mut c_in = config.stem_channels;
        for (i, (&c_out, &blocks)) in config
            .channels_per_stage
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let name = format!("fex.stage{}.block{b}", i + 1);
                stage.push(BasicBlock::new(params, rng, &name, c_in, c_out, stride)?);
                c_in = c_out;
            }
            stages.push(stage);
        }
        Ok(FeatureExtractor {
            config: config.clone(),
            stem,
            stem_bn,
            stages,
        })
    }

    pub fn config(&self) -> &FexConfig {
        &self.config
    }

    /// Runs the extractor on `[N, C_in, M, M]` images.
    pub fn extract<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var) -> Result<FeaturePyramid> {
        expect_map(
            &s.tape,
            images,
            self.config.in_channels,
            Some(self.config.input_size),
            "feature extractor",
        )?;
        let h = self.stem.forward(s, images)?;
        let h = self.stem_bn.forward(s, h)?;
        let mut h = s.tape.relu(h)?;
        let mut maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                h = block.forward(s, h)?;
            }
            maps.push(h);
        }
        Ok(FeaturePyramid { maps })
    }
}
