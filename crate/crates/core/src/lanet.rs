//! Lesion-aware branch: attention refinement of every pyramid level followed
//! by a fusion head that predicts the lesion-probability mask at the
//! resolution of the top feature map.
//!
//! Each level goes through channel attention (CAM) and then spatial attention
//! (SAM), is squeezed to one channel by a 1x1 convolution, and is resized to
//! `S_n x S_n`. The squeezed maps are concatenated and passed through a 3x3
//! convolution, batch normalization and a sigmoid.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::fex::{FeaturePyramid, FexConfig};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet, Session};
use crate::tensor::{PoolKind, Scalar, Tensor, Var, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CamSharing {
    /// One perceptron per pyramid level.
    #[default]
    PerLevel,
    /// One perceptron over the widest level; narrower levels are zero-padded
    /// into it and read back from the leading outputs.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaNetConfig {
    pub reduction: usize,
    pub sam_kernel: usize,
    pub cam_sharing: CamSharing,
    pub bypass_cam: bool,
    pub bypass_sam: bool,
}

impl Default for LaNetConfig {
    fn default() -> Self {
        LaNetConfig {
            reduction: 16,
            sam_kernel: 7,
            cam_sharing: CamSharing::PerLevel,
            bypass_cam: false,
            bypass_sam: false,
        }
    }
}

/// Shared two-layer perceptron of the channel attention module.
#[derive(Clone, Debug)]
pub struct CamParams {
    pub fc1: Linear,
    pub fc2: Linear,
    /// Input/output width of the perceptron.
    pub width: usize,
    pub hidden: usize,
}

impl CamParams {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (width / reduction.max(1)).max(1);
        Ok(CamParams {
            fc1: Linear::new(params, rng, &format!("{name}.fc1"), width, hidden, true)?,
            fc2: Linear::new(params, rng, &format!("{name}.fc2"), hidden, width, true)?,
            width,
            hidden,
        })
    }
}

/// The 2-channel-in, 1-channel-out convolution of the spatial attention module.
#[derive(Clone, Debug)]
pub struct SamParams {
    pub conv: Conv2d,
}

impl SamParams {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("SAM kernel must be odd, got {kernel}")));
        }
        Ok(SamParams {
            conv: Conv2d::new(params, rng, name, 2, 1, kernel, 1, kernel / 2, true)?,
        })
    }
}

/// Identity-padding embedding `[c, width]` used by the shared perceptron.
fn embedding<T: Scalar>(c: usize, width: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); c * width];
    for i in 0..c {
        data[i * width + i] = T::one();
    }
    Tensor::from_parts(vec![c, width], data)
}

/// Channel attention vector `sigmoid(MLP(maxpool f) + MLP(avgpool f))` as `[N,C,1,1]`.
pub fn cam_attention<T: Scalar>(s: &mut Session<'_, T>, f: Var, cam: &CamParams) -> Result<Var> {
    let shape = s.tape.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(dim_err!("CAM expects [N,C,H,W], got {shape:?}"));
    }
    let (n, c) = (shape[0], shape[1]);
    if c > cam.width {
        return Err(dim_err!(
            "CAM perceptron of width {} cannot take {c} channels",
            cam.width
        ));
    }
    let embed = (c != cam.width).then(|| embedding::<T>(c, cam.width));
    let branch = |kind: PoolKind, s: &mut Session<'_, T>| -> Result<Var> {
        let pooled = s.tape.pool2d(f, kind, Window::Global)?;
        let mut v = s.tape.reshape(pooled, &[n, c])?;
        if let Some(e) = &embed {
            let e = s.tape.constant(e.clone());
            v = s.tape.matmul(v, e)?;
        }
        let h = cam.fc1.forward(s, v)?;
        let h = s.tape.relu(h)?;
        cam.fc2.forward(s, h)
    };
    let from_max = branch(PoolKind::Max, s)?;
    let from_avg = branch(PoolKind::Avg, s)?;
    let mut logits = s.tape.add(from_max, from_avg)?;
    if embed.is_some() {
        let mut et = vec![T::zero(); c * cam.width];
        for i in 0..c {
            et[i * c + i] = T::one();
        }
        let back = s.tape.constant(Tensor::from_parts(vec![cam.width, c], et));
        logits = s.tape.matmul(logits, back)?;
    }
    let a = s.tape.sigmoid(logits)?;
    s.tape.reshape(a, &[n, c, 1, 1])
}

pub fn cam_refine<T: Scalar>(s: &mut Session<'_, T>, f: Var, cam: &CamParams) -> Result<Var> {
    let a = cam_attention(s, f, cam)?;
    s.tape.mul(f, a)
}

/// Spatial attention map `sigmoid(conv([chanmax f, chanavg f]))` as `[N,1,H,W]`.
pub fn sam_attention<T: Scalar>(s: &mut Session<'_, T>, f: Var, sam: &SamParams) -> Result<Var> {
    let mx = s.tape.channel_pool(f, PoolKind::Max)?;
    let av = s.tape.channel_pool(f, PoolKind::Avg)?;
    let both = s.tape.concat(&[mx, av], 1)?;
    let logits = sam.conv.forward(s, both)?;
    s.tape.sigmoid(logits)
}

pub fn sam_refine<T: Scalar>(s: &mut Session<'_, T>, f: Var, sam: &SamParams) -> Result<Var> {
    let m = sam_attention(s, f, sam)?;
    s.tape.mul(f, m)
}

/// Which attention stages run; a bypassed stage is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CbamFlags {
    pub bypass_cam: bool,
    pub bypass_sam: bool,
}

pub fn cbam<T: Scalar>(
    s: &mut Session<'_, T>,
    f: Var,
    cam: &CamParams,
    sam: &SamParams,
    flags: CbamFlags,
) -> Result<Var> {
    let f = if flags.bypass_cam { f } else { cam_refine(s, f, cam)? };
    if flags.bypass_sam {
        Ok(f)
    } else {
        sam_refine(s, f, sam)
    }
}

#[derive(Clone, Debug)]
pub struct LaNet {
    config: LaNetConfig,
    level_channels: Vec<usize>,
    out_size: usize,
    cams: Vec<CamParams>,
    sam: SamParams,
    squeezes: Vec<Conv2d>,
    head_conv: Conv2d,
    head_bn: BatchNorm2d,
}

impl LaNet {
    /// Registers all branch parameters under the `lanet.` prefix.
    pub fn build<T: Scalar>(
        config: &LaNetConfig,
        fex: &FexConfig,
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.reduction == 0 {
            return Err(Error::Config("CAM reduction ratio must be positive".into()));
        }
        let levels = fex.channels_per_stage.clone();
        let cams = match config.cam_sharing {
            CamSharing::PerLevel => levels
                .iter()
                .enumerate()
                .map(|(i, &c)| CamParams::new(params, rng, &format!("lanet.cam{}", i + 1), c, config.reduction))
                .collect::<Result<Vec<_>>>()?,
            CamSharing::Shared => {
                let widest = *levels.iter().max().expect("validated config");
                vec![CamParams::new(params, rng, "lanet.cam", widest, config.reduction)?]
            }
        };
        let sam = SamParams::new(params, rng, "lanet.sam", config.sam_kernel)?;
        let squeezes = levels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(params, rng, &format!("lanet.squeeze{}", i + 1), c, 1, 1, 1, 0, true))
            .collect::<Result<Vec<_>>>()?;
        let n = levels.len();
        let head_conv = Conv2d::new(params, rng, "lanet.head.conv", n, 1, 3, 1, 1, false)?;
        let head_bn = BatchNorm2d::new(params, "lanet.head.bn", 1)?;
        Ok(LaNet {
            config: config.clone(),
            level_channels: levels,
            out_size: fex.top_size(),
            cams,
            sam,
            squeezes,
            head_conv,
            head_bn,
        })
    }

    pub fn config(&self) -> &LaNetConfig {
        &self.config
    }

    pub fn cam(&self, level: usize) -> &CamParams {
        match self.config.cam_sharing {
            CamSharing::PerLevel => &self.cams[level],
            CamSharing::Shared => &self.cams[0],
        }
    }

    pub fn sam(&self) -> &SamParams {
        &self.sam
    }

    pub fn squeeze(&self, level: usize) -> &Conv2d {
        &self.squeezes[level]
    }

    pub fn flags(&self) -> CbamFlags {
        CbamFlags {
            bypass_cam: self.config.bypass_cam,
            bypass_sam: self.config.bypass_sam,
        }
    }

    /// Predicts the `[N,1,S_n,S_n]` lesion-probability mask.
    pub fn fuse_predict<T: Scalar>(&self, s: &mut Session<'_, T>, pyramid: &FeaturePyramid) -> Result<Var> {
        if pyramid.maps.len() != self.level_channels.len() {
            return Err(Error::Config(format!(
                "LA-Net built for {} levels, pyramid has {}",
                self.level_channels.len(),
                pyramid.maps.len()
            )));
        }
        let mut squeezed = Vec::with_capacity(pyramid.maps.len());
        for (level, &f) in pyramid.maps.iter().enumerate() {
            let c = s.tape.shape(f)[1];
            if c != self.level_channels[level] {
                return Err(dim_err!(
                    "level {} has {c} channels, expected {}",
                    level + 1,
                    self.level_channels[level]
                ));
            }
            let refined = cbam(s, f, self.cam(level), &self.sam, self.flags())?;
            let q = self.squeezes[level].forward(s, refined)?;
            squeezed.push(s.tape.resize_bilinear(q, self.out_size, self.out_size)?);
        }
        let merged = s.tape.concat(&squeezed, 1)?;
        let h = self.head_conv.forward(s, merged)?;
        let h = self.head_bn.forward(s, h)?;
        s.tape.sigmoid(h)
    }
}
