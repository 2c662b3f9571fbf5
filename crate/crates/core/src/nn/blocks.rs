//! Composite blocks: residual convolutional block, offset heads, aligned
//! feature aggregation, aligned context modelling and the segmentation head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::layers::{conv1x1, conv3x3, path, Conv, ConvBn, ConvTranspose, Ctx};
use crate::ops::conv::ConvGeom;
use crate::params::ParamStore;
use crate::tensor::Real;

/// Residual convolutional block: a 1x1 reduction `r`, then
/// `r + conv_b(relu(conv_a(r)))` with batchnorm after each convolution.
#[derive(Clone, Debug)]
pub struct Rcb {
    pub reduce: ConvBn,
    pub conv_a: ConvBn,
    pub conv_b: ConvBn,
}

impl Rcb {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_mid: usize,
        c_inner: usize,
    ) -> Result<Self> {
        Ok(Self {
            reduce: ConvBn::new(store, rng, &path(name, "reduce"), c_in, c_mid, conv1x1(), true)?,
            conv_a: ConvBn::new(store, rng, &path(name, "conv_a"), c_mid, c_inner, conv3x3(1), true)?,
            conv_b: ConvBn::new(store, rng, &path(name, "conv_b"), c_inner, c_mid, conv3x3(1), false)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.value(x).c();
        if c != self.reduce.conv.c_in {
            return Err(Error::shape(
                "rcb",
                format!("input has {c} channels, block expects {}", self.reduce.conv.c_in),
            ));
        }
        let r = self.reduce.forward(ctx, x)?;
        let y = self.conv_a.forward(ctx, r)?;
        let y = self.conv_b.forward(ctx, y)?;
        ctx.graph.add(r, y)
    }

    pub fn c_out(&self) -> usize {
        self.reduce.c_out()
    }
}

/// `conv3x3 -> ReLU -> conv3x3` over the channel concatenation of its
/// inputs. The last convolution starts at exactly zero.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub conv_a: Conv,
    pub conv_b: Conv,
}

impl OffsetHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        width: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv_a: Conv::new(store, rng, &path(name, "conv_a"), c_in, width, conv3x3(1), true)?,
            conv_b: Conv::zeroed(store, &path(name, "conv_b"), width, c_out, conv3x3(1))?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, inputs: &[Var]) -> Result<Var> {
        let x = ctx.graph.concat_channels(inputs)?;
        let y = self.conv_a.forward(ctx, x)?;
        let y = ctx.graph.relu(y)?;
        self.conv_b.forward(ctx, y)
    }
}

/// Offsets predicted for one aggregation step.
#[derive(Clone, Copy, Debug)]
pub struct OffsetPair {
    /// Applied to the upsampled low-resolution feature.
    pub delta_f: Var,
    /// Applied to the high-resolution feature (absent in low-only mode).
    pub delta_a: Option<Var>,
}

/// How a low-resolution feature is merged into the 1/4-resolution pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    /// Bilinear upsampling, then addition.
    Rgs,
    /// Learned transposed-convolution upsampling, then addition.
    Deconv,
    /// Both features warped by predicted offsets before addition.
    AlignFa,
    /// Only the upsampled feature is warped.
    AlignFaLowOnly,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Rgs,
        Aggregation::Deconv,
        Aggregation::AlignFa,
        Aggregation::AlignFaLowOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Rgs => "rgs",
            Aggregation::Deconv => "deconv",
            Aggregation::AlignFa => "alignfa",
            Aggregation::AlignFaLowOnly => "alignfa_low_only",
        }
    }

    pub fn predicts_offsets(self) -> bool {
        matches!(self, Aggregation::AlignFa | Aggregation::AlignFaLowOnly)
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation mode {s:?} (rgs, deconv, alignfa, alignfa_low_only)")))
    }
}

/// One aggregation step of the high-resolution pathway.
#[derive(Clone, Debug)]
pub struct AlignFa {
    pub mode: Aggregation,
    pub ratio: usize,
    pub head: Option<OffsetHead>,
    pub deconv: Vec<ConvTranspose>,
}

impl AlignFa {
    /// `ratio` is the resolution ratio between the two inputs (2, 4 or 8).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        mode: Aggregation,
        channels: usize,
        ratio: usize,
        head_width: usize,
    ) -> Result<Self> {
        if !matches!(ratio, 2 | 4 | 8) {
            return Err(Error::invalid(format!("resolution ratio {ratio} is not 2, 4 or 8")));
        }
        let head = if mode.predicts_offsets() {
            Some(OffsetHead::new(store, rng, &path(name, "head"), 2 * channels, head_width, 4)?)
        } else {
            None
        };
        let deconv = if mode == Aggregation::Deconv {
            (0..ratio.trailing_zeros())
                .map(|i| {
                    ConvTranspose::new(
                        store,
                        rng,
                        &path(name, &format!("deconv{i}")),
                        channels,
                        channels,
                        ConvGeom::new(4, 2, 1),
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            mode,
            ratio,
            head,
            deconv,
        })
    }

    /// Merges `f_low` into `a_high`. Returns the aggregate and, for the
    /// aligning modes, the predicted offsets.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, a_high: Var, f_low: Var) -> Result<(Var, Option<OffsetPair>)> {
        let [an, ac, ah, aw] = ctx.value(a_high).dims();
        let [fnn, fc, fh, fw] = ctx.value(f_low).dims();
        if an != fnn || ac != fc {
            return Err(Error::shape(
                "alignfa",
                format!("batch/channels differ: {an}x{ac} vs {fnn}x{fc}"),
            ));
        }
        if fh * self.ratio != ah || fw * self.ratio != aw {
            return Err(Error::shape(
                "alignfa",
                format!("{fh}x{fw} is not 1/{} of {ah}x{aw}", self.ratio),
            ));
        }
        match self.mode {
            Aggregation::Rgs => {
                let up = ctx.graph.bilinear_resize(f_low, ah, aw)?;
                Ok((ctx.graph.add(up, a_high)?, None))
            }
            Aggregation::Deconv => {
                let mut up = f_low;
                for layer in &self.deconv {
                    up = layer.forward(ctx, up)?;
                }
                Ok((ctx.graph.add(up, a_high)?, None))
            }
            Aggregation::AlignFa | Aggregation::AlignFaLowOnly => {
                let up = ctx.graph.bilinear_resize(f_low, ah, aw)?;
                let (delta_f, delta_a) = predict_offsets_fa(ctx, self.head.as_ref().expect("aligning mode has a head"), a_high, up)?;
                let warped_f = ctx.graph.align_sample(up, delta_f)?;
                if self.mode == Aggregation::AlignFa {
                    let warped_a = ctx.graph.align_sample(a_high, delta_a)?;
                    let out = ctx.graph.add(warped_f, warped_a)?;
                    Ok((out, Some(OffsetPair { delta_f, delta_a: Some(delta_a) })))
                } else {
                    let out = ctx.graph.add(warped_f, a_high)?;
                    Ok((out, Some(OffsetPair { delta_f, delta_a: None })))
                }
            }
        }
    }
}

/// Runs a 4-channel offset head on `concat(a_high, f_up)` and splits the
/// result into the field for the upsampled feature (channels 0..2) and the
/// field for the high-resolution feature (channels 2..4).
pub fn predict_offsets_fa<T: Real>(
    ctx: &mut Ctx<'_, T>,
    head: &OffsetHead,
    a_high: Var,
    f_up: Var,
) -> Result<(Var, Var)> {
    let (a, f) = (ctx.value(a_high).dims(), ctx.value(f_up).dims());
    if (a[0], a[2], a[3]) != (f[0], f[2], f[3]) {
        return Err(Error::shape("predict_offsets", format!("{a:?} vs {f:?}")));
    }
    let offsets = head.forward(ctx, &[a_high, f_up])?;
    let delta_f = ctx.graph.channels(offsets, 0, 2)?;
    let delta_a = ctx.graph.channels(offsets, 2, 4)?;
    Ok((delta_f, delta_a))
}

/// Pooled context, upsampled, optionally warped per pixel, and concatenated
/// after a local feature. Output channels: `c_in + c_ctx`.
#[derive(Clone, Debug)]
pub struct AlignCm {
    pub ctx_conv: ConvBn,
    pub local_conv: ConvBn,
    pub head: Option<OffsetHead>,
    pub bin_size: usize,
}

impl AlignCm {
    /// Without `with_head` the block is the plain pooling baseline.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_ctx: usize,
        bin_size: usize,
        head_width: usize,
        with_head: bool,
    ) -> Result<Self> {
        if bin_size == 0 {
            return Err(Error::invalid("bin size must be at least 1"));
        }
        let local_conv = ConvBn::new(store, rng, &path(name, "local"), c_in, c_in, conv3x3(1), true)?;
        let ctx_conv = ConvBn::new(store, rng, &path(name, "context"), c_in, c_ctx, conv1x1(), true)?;
        let head = if with_head {
            Some(OffsetHead::new(store, rng, &path(name, "head"), c_in + c_ctx, head_width, 2)?)
        } else {
            None
        };
        Ok(Self {
            ctx_conv,
            local_conv,
            head,
            bin_size,
        })
    }

    pub fn c_out(&self) -> usize {
        self.local_conv.c_out() + self.ctx_conv.c_out()
    }

    /// Returns the output and, when aligning, the offset field.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var, with_alignment: bool) -> Result<(Var, Option<Var>)> {
        self.forward_with_bins(ctx, f, with_alignment, self.bin_size)
    }

    pub fn forward_with_bins<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        f: Var,
        with_alignment: bool,
        bins: usize,
    ) -> Result<(Var, Option<Var>)> {
        let [_, _, h, w] = ctx.value(f).dims();
        if bins > h || bins > w {
            return Err(Error::invalid(format!(
                "bin size {bins} exceeds the {h}x{w} context input"
            )));
        }
        let pooled = ctx.graph.avg_pool_to_bins(f, bins)?;
        let context = self.ctx_conv.forward(ctx, pooled)?;
        let context = ctx.graph.bilinear_resize(context, h, w)?;
        let local = self.local_conv.forward(ctx, f)?;
        if !with_alignment {
            return Ok((ctx.graph.concat_channels(&[local, context])?, None));
        }
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("context block was built without an offset head"))?;
        let delta = head.forward(ctx, &[local, context])?;
        let aligned = ctx.graph.align_sample(context, delta)?;
        Ok((ctx.graph.concat_channels(&[local, aligned])?, Some(delta)))
    }
}

/// `conv3x3 + BN + ReLU`, `conv1x1` to class logits, bilinear resize to the
/// requested output extent. The classifier starts at zero.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub conv: ConvBn,
    pub classifier: Conv,
}

impl SegHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(store, rng, &path(name, "conv"), c_in, width, conv3x3(1), true)?,
            classifier: Conv::zeroed(store, &path(name, "classifier"), width, num_classes, conv1x1())?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.classifier.forward(ctx, y)?;
        ctx.graph.bilinear_resize(y, h_out, w_out)
    }
}
