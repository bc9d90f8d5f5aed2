//! Dual attention fusion.
//!
//! Channel attention recalibrates a decoder feature map with a squeeze-and-
//! excitation gate:
//!
//! ```text
//! z_c = mean_{i,j} f_c(i, j)
//! ω   = σ(W_U · relu(W_D · z))
//! F̂_c = ω_c · f_c
//! ```
//!
//! Spatial attention then blends a 3-channel projection of `F̂` with the
//! masked input resized to the same scale:
//!
//! ```text
//! x' = downsample(W_C · x_q)
//! α  = σ(A([W_K · F̂, x']))        A = three 3×3 convolutions
//! Ŷ  = α ⊙ W_K·F̂ + (1 − α) ⊙ x'
//! ```

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{area_downsample, sigmoid, Builder, Conv2d, Init};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DafConfig {
    /// Channel reduction of the gate bottleneck.
    pub reduction: usize,
    /// Width of the two hidden layers of `A`.
    pub attn_hidden: usize,
    /// Initial bias of the last layer of `A`. Negative values start α near
    /// 0, so an untrained module passes the resized input through.
    pub alpha_bias: f64,
    /// Initial bias of `W_K`, the starting grey level of the image branch.
    pub image_bias: f64,
}

impl Default for DafConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            attn_hidden: 16,
            alpha_bias: -2.0,
            image_bias: 0.5,
        }
    }
}

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct Daf {
    channels: usize,
    w_down: Tensor,
    w_up: Tensor,
    w_c: Conv2d,
    w_k: Conv2d,
    attn: [Conv2d; 3],
}

impl Daf {
    pub fn new(b: &Builder, channels: usize, config: DafConfig) -> Result<Self> {
        if config.reduction == 0 || channels % config.reduction != 0 {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible by reduction {}",
                config.reduction
            )));
        }
        if config.attn_hidden == 0 {
            return Err(Error::Config("attention hidden width must be positive".into()));
        }
        let squeezed = channels / config.reduction;
        let hidden = config.attn_hidden;
        let two_c = 2 * IMAGE_CHANNELS;
        Ok(Self {
            channels,
            w_down: b.get("w_down", &[squeezed, channels, 1, 1], Init::He(channels))?,
            w_up: b.get(
                "w_up",
                &[channels, squeezed, 1, 1],
                Init::Normal((1.0 / squeezed as f64).sqrt()),
            )?,
            w_c: Conv2d::new(
                &b.pp("w_c"),
                IMAGE_CHANNELS,
                IMAGE_CHANNELS,
                1,
                1,
                Init::Identity,
                true,
            )?,
            w_k: Conv2d::with_bias(
                &b.pp("w_k"),
                channels,
                IMAGE_CHANNELS,
                1,
                1,
                Init::Normal((1.0 / channels as f64).sqrt()),
                Some(Init::Const(config.image_bias)),
            )?,
            attn: [
                Conv2d::new(&b.pp("attn0"), two_c, hidden, 3, 1, Init::He(two_c * 9), true)?,
                Conv2d::new(&b.pp("attn1"), hidden, hidden, 3, 1, Init::He(hidden * 9), true)?,
                Conv2d::with_bias(
                    &b.pp("attn2"),
                    hidden,
                    IMAGE_CHANNELS,
                    3,
                    1,
                    Init::Normal(0.1 * (1.0 / (hidden * 9) as f64).sqrt()),
                    Some(Init::Const(config.alpha_bias)),
                )?,
            ],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel statistics `z = mean over (h, w)`, shape `[B, C, 1, 1]`.
    pub fn squeeze(feature: &Tensor) -> Result<Tensor> {
        Ok(feature.mean_keepdim(3)?.mean_keepdim(2)?)
    }

    /// Per-channel gate `ω = σ(W_U relu(W_D z))`, shape `[B, C, 1, 1]`.
    pub fn channel_gate(&self, feature: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = feature.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "fusion expects {} feature channels, got {c}",
                self.channels
            )));
        }
        let z = Self::squeeze(feature)?;
        let hidden = z.conv2d(&self.w_down, 0, 1, 1, 1)?.relu()?;
        sigmoid(&hidden.conv2d(&self.w_up, 0, 1, 1, 1)?)
    }

    pub fn channel_attention(&self, feature: &Tensor) -> Result<Tensor> {
        Ok(feature.broadcast_mul(&self.channel_gate(feature)?)?)
    }

    /// `x' = downsample(W_C x_q)` by area averaging to `feature`'s size.
    pub fn resize_input(&self, x_q: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let (_, c, h, w) = x_q.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("input image has {c} channels, expected 3")));
        }
        if height == 0 || height > h || h % height != 0 || w % width != 0 || h / height != w / width {
            return Err(Error::Shape(format!(
                "cannot area-downsample {h}x{w} to {height}x{width}"
            )));
        }
        area_downsample(&self.w_c.forward(x_q)?, h / height)
    }

    /// `W_K F̂`, the 3-channel image branch.
    pub fn project(&self, f_hat: &Tensor) -> Result<Tensor> {
        self.w_k.forward(f_hat)
    }

    /// Pre-sigmoid output of `A` on `[W_K F̂, x']`.
    pub fn attention_logits(&self, projected: &Tensor, x_resized: &Tensor) -> Result<Tensor> {
        if projected.dims() != x_resized.dims() {
            return Err(Error::Shape(format!(
                "branches misaligned: {:?} vs {:?}",
                projected.dims(),
                x_resized.dims()
            )));
        }
        let x = Tensor::cat(&[projected, x_resized], 1)?;
        let x = self.attn[0].forward(&x)?.relu()?;
        let x = self.attn[1].forward(&x)?.relu()?;
        self.attn[2].forward(&x)
    }

    /// `(Ŷ, α)` from the recalibrated feature map and the resized input.
    pub fn fuse(&self, f_hat: &Tensor, x_resized: &Tensor) -> Result<(Tensor, Tensor)> {
        let projected = self.project(f_hat)?;
        let alpha = sigmoid(&self.attention_logits(&projected, x_resized)?)?;
        let y = blend(&alpha, &projected, x_resized)?;
        Ok((y, alpha))
    }

    /// Full fusion at the scale of `feature`; `x_q` is the full-size input.
    pub fn forward(&self, feature: &Tensor, x_q: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = feature.dims4()?;
        let f_hat = self.channel_attention(feature)?;
        let x_resized = self.resize_input(x_q, h, w)?;
        self.fuse(&f_hat, &x_resized)
    }
}

/// `α ⊙ a + (1 − α) ⊙ b`.
pub fn blend(alpha: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if alpha.dims() != a.dims() || a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "blend operands disagree: {:?}, {:?}, {:?}",
            alpha.dims(),
            a.dims(),
            b.dims()
        )));
    }
    let one_minus = alpha.affine(-1.0, 1.0)?;
    Ok(((alpha * a)? + (one_minus * b)?)?)
}
