//! The dual-pathway segmentation network.
//!
//! A small backbone produces `X` at 1/4 resolution and `F1..F3` at 1/8, 1/16
//! and 1/32; a context stage turns `F3` into `F4` (also 1/32). A second
//! pathway starts at `A0 = X` and stays at 1/4: step `t` passes `A(t-1)` and
//! `F(t)` through residual convolutional blocks and aggregates them into
//! `A(t)`. `A4` feeds the segmentation head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{conv3x3, path, ConvBn, Ctx};
use crate::nn::{Aggregation, AlignCm, AlignFa, OffsetPair, Rcb, SegHead};
use crate::ops::conv::ConvGeom;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor4};

/// Spatial divisor the input is padded to.
pub const INPUT_DIVISOR: usize = 32;

/// Number of aggregation steps in the high-resolution pathway.
pub const PATHWAY_STEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextMode {
    /// `F4 = F3`.
    None,
    /// Pooled context concatenated without alignment.
    Pool,
    /// Pooled context warped by predicted offsets.
    AlignCm,
}

impl ContextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::Pool => "pool",
            ContextMode::AlignCm => "aligncm",
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextMode::None),
            "pool" => Ok(ContextMode::Pool),
            "aligncm" => Ok(ContextMode::AlignCm),
            _ => Err(Error::Config(format!("unknown context mode {s:?} (none, pool, aligncm)"))),
        }
    }
}

/// Architecture knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Channels of `X`; the first stem convolution uses half.
    pub stem_channels: usize,
    /// Channels of `F1`, `F2`, `F3` and `F4`. For the pool and aligncm
    /// context modes the context branch width is `F4 - F3`; with no context
    /// stage `F4 = F3` and the last entry is unused.
    pub block_channels: [usize; 4],
    /// Channel width of the high-resolution pathway.
    pub pathway_width: usize,
    /// Inner width of the residual convolutional blocks.
    pub rcb_inner: usize,
    /// Hidden width of the offset-prediction heads.
    pub offset_head_width: usize,
    /// Hidden width of the segmentation heads.
    pub head_width: usize,
    pub aggregation: Aggregation,
    pub context: ContextMode,
    pub bin_size: usize,
    pub deep_supervision: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            stem_channels: 64,
            block_channels: [64, 96, 128, 160],
            pathway_width: 64,
            rcb_inner: 16,
            offset_head_width: 64,
            head_width: 128,
            aggregation: Aggregation::AlignFa,
            context: ContextMode::AlignCm,
            bin_size: 3,
            deep_supervision: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("num_classes must fit below the ignore label 255".into()));
        }
        let widths = [
            self.stem_channels,
            self.pathway_width,
            self.rcb_inner,
            self.offset_head_width,
            self.head_width,
        ];
        if widths.contains(&0) || self.block_channels[..3].contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.stem_channels < 2 {
            return Err(Error::Config("stem_channels must be at least 2".into()));
        }
        if self.context != ContextMode::None && self.block_channels[3] <= self.block_channels[2] {
            return Err(Error::Config(format!(
                "block_channels[3] ({}) must exceed block_channels[2] ({}) to leave room for the context branch",
                self.block_channels[3], self.block_channels[2]
            )));
        }
        if self.bin_size == 0 {
            return Err(Error::Config("bin_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the pooled-context branch.
    pub fn context_channels(&self) -> usize {
        self.block_channels[3] - self.block_channels[2]
    }

    /// Channels of `F4`.
    pub fn f4_channels(&self) -> usize {
        match self.context {
            ContextMode::None => self.block_channels[2],
            _ => self.block_channels[3],
        }
    }
}

/// Stride-2 residual stage of the backbone.
#[derive(Clone, Debug)]
struct DownBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: ConvBn,
}

impl DownBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: ConvBn::new(store, rng, &path(name, "conv1"), c_in, c_out, conv3x3(2), true)?,
            conv2: ConvBn::new(store, rng, &path(name, "conv2"), c_out, c_out, conv3x3(1), false)?,
            shortcut: ConvBn::new(store, rng, &path(name, "shortcut"), c_in, c_out, ConvGeom::new(1, 2, 0), false)?,
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let s = self.shortcut.forward(ctx, x)?;
        let y = ctx.graph.add(y, s)?;
        ctx.graph.relu(y)
    }
}

/// Intermediate features of one forward pass.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `X`, 1/4 resolution.
    pub x: Var,
    /// `F1..F4` at 1/8, 1/16, 1/32, 1/32.
    pub f: [Var; 4],
    /// `A0..A4`, all at 1/4.
    pub a: [Var; 5],
}

/// Offsets predicted in one forward pass.
#[derive(Clone, Debug, Default)]
pub struct PredictedOffsets {
    /// One entry per aggregation step (1-based step index) in aligning modes.
    pub steps: Vec<(usize, OffsetPair)>,
    /// The context-stage field when the context mode is aligncm.
    pub context: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N x classes x H x W` at the (unpadded) input resolution.
    pub logits: Var,
    pub aux_logits: Option<Var>,
    pub pyramid: FeaturePyramid,
    pub offsets: PredictedOffsets,
    /// Input extent after padding to the divisor.
    pub padded: (usize, usize),
}

/// Parameters plus the module layout that uses them.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<T>,
    stem: [ConvBn; 2],
    stages: Vec<DownBlock>,
    context: Option<AlignCm>,
    rcb_a: Vec<Rcb>,
    rcb_f: Vec<Rcb>,
    steps: Vec<AlignFa>,
    head: SegHead,
    aux: Option<SegHead>,
}

impl<T: Real> Network<T> {
    /// Builds and initialises the network. Parameter creation order (and so
    /// every initial value) is a function of `cfg` and `seed` alone.
    ///
    /// The context block and the aggregation steps draw from a second random
    /// stream, so two configurations that differ only in `aggregation` or in
    /// `context` (pool vs aligncm) start from identical shared weights.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let side = &mut ChaCha8Rng::seed_from_u64(seed);
        side.set_stream(1);
        let s = cfg.stem_channels;
        let stem = [
            ConvBn::new(&mut store, rng, "stem.conv1", 3, s / 2, conv3x3(2), true)?,
            ConvBn::new(&mut store, rng, "stem.conv2", s / 2, s, conv3x3(2), true)?,
        ];
        let mut stages = Vec::new();
        let mut c_prev = s;
        for (i, &c) in cfg.block_channels[..3].iter().enumerate() {
            stages.push(DownBlock::new(&mut store, rng, &format!("stage{}", i + 1), c_prev, c)?);
            c_prev = c;
        }
        let context = match cfg.context {
            ContextMode::None => None,
            mode => Some(AlignCm::new(
                &mut store,
                side,
                "context",
                cfg.block_channels[2],
                cfg.context_channels(),
                cfg.bin_size,
                cfg.offset_head_width,
                mode == ContextMode::AlignCm,
            )?),
        };
        let f_channels = [
            cfg.block_channels[0],
            cfg.block_channels[1],
            cfg.block_channels[2],
            cfg.f4_channels(),
        ];
        let ratios = [2, 4, 8, 8];
        let pw = cfg.pathway_width;
        let mut rcb_a = Vec::new();
        let mut rcb_f = Vec::new();
        let mut steps = Vec::new();
        for t in 0..PATHWAY_STEPS {
            let name = format!("path.step{}", t + 1);
            let a_in = if t == 0 { s } else { pw };
            rcb_a.push(Rcb::new(&mut store, rng, &path(&name, "rcb_a"), a_in, pw, cfg.rcb_inner)?);
            rcb_f.push(Rcb::new(&mut store, rng, &path(&name, "rcb_f"), f_channels[t], pw, cfg.rcb_inner)?);
            steps.push(AlignFa::new(
                &mut store,
                side,
                &path(&name, "agg"),
                cfg.aggregation,
                pw,
                ratios[t],
                cfg.offset_head_width,
            )?);
        }
        let head = SegHead::new(&mut store, rng, "head", pw, cfg.head_width, cfg.num_classes)?;
        let aux = if cfg.deep_supervision {
            Some(SegHead::new(&mut store, rng, "aux", cfg.block_channels[2], cfg.head_width, cfg.num_classes)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            stages,
            context,
            rcb_a,
            rcb_f,
            steps,
            head,
            aux,
        })
    }

    /// Trainable parameters in creation order with dotted names.
    pub fn enumerate_params(&self) -> Vec<(String, ParamId)> {
        self.store
            .trainable_ids()
            .map(|id| (self.store.entry(id).name.clone(), id))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            context: self.context.clone(),
            rcb_a: self.rcb_a.clone(),
            rcb_f: self.rcb_f.clone(),
            steps: self.steps.clone(),
            head: self.head.clone(),
            aux: self.aux.clone(),
        }
    }

    /// Zeroes the last layer of every offset head.
    pub fn zero_offset_heads(&mut self) {
        let heads = self
            .steps
            .iter()
            .filter_map(|s| s.head.as_ref())
            .chain(self.context.iter().filter_map(|c| c.head.as_ref()));
        for h in heads {
            h.conv_b.zero(&mut self.store);
        }
    }

    /// Offset-head final layers, for inspection: `(name, conv)` per head.
    pub fn offset_head_outputs(&self) -> Vec<(String, crate::nn::Conv)> {
        let mut out: Vec<(String, crate::nn::Conv)> = self
            .steps
            .iter()
            .enumerate()
            .filter_map(|(t, s)| s.head.as_ref().map(|h| (format!("step{}", t + 1), h.conv_b.clone())))
            .collect();
        if let Some(h) = self.context.as_ref().and_then(|c| c.head.as_ref()) {
            out.push(("context".into(), h.conv_b.clone()));
        }
        out
    }

    /// Bin size actually used for a context input of `h x w`: the configured
    /// size, reduced to fit small inputs.
    pub fn effective_bin_size(&self, h: usize, w: usize) -> usize {
        self.cfg.bin_size.min(h).min(w).max(1)
    }

    /// Runs the network on `N x 3 x H x W` images. The input is
    /// reflection-padded to a multiple of 32 and the logits are cropped back.
    pub fn forward(&mut self, graph: &mut Graph<T>, image: &Tensor4<T>, train: bool) -> Result<ForwardOutput> {
        let [_, c, h, w] = image.dims();
        if h == 0 || w == 0 {
            return Err(Error::invalid("input image has a zero extent"));
        }
        if c != 3 {
            return Err(Error::shape("network", format!("expected 3 input channels, got {c}")));
        }
        let padded = reflect_pad_to(image, INPUT_DIVISOR);
        let (ph, pw) = (padded.h(), padded.w());
        let Network {
            cfg,
            store,
            stem,
            stages,
            context,
            rcb_a,
            rcb_f,
            steps,
            head,
            aux,
        } = self;
        let mut ctx = Ctx::new(graph, store, train);
        let input = ctx.graph.input(padded)?;
        let y = stem[0].forward(&mut ctx, input)?;
        let x = stem[1].forward(&mut ctx, y)?;
        let f1 = stages[0].forward(&mut ctx, x)?;
        let f2 = stages[1].forward(&mut ctx, f1)?;
        let f3 = stages[2].forward(&mut ctx, f2)?;
        let mut offsets = PredictedOffsets::default();
        let f4 = match (cfg.context, context.as_ref()) {
            (ContextMode::None, _) | (_, None) => f3,
            (mode, Some(block)) => {
                let [_, _, ch, cw] = ctx.value(f3).dims();
                let bins = cfg.bin_size.min(ch).min(cw).max(1);
                let (out, delta) = block.forward_with_bins(&mut ctx, f3, mode == ContextMode::AlignCm, bins)?;
                offsets.context = delta;
                out
            }
        };
        let f = [f1, f2, f3, f4];
        let mut a = [x; 5];
        for t in 0..PATHWAY_STEPS {
            let a_tilde = rcb_a[t].forward(&mut ctx, a[t])?;
            let f_tilde = rcb_f[t].forward(&mut ctx, f[t])?;
            let (next, pair) = steps[t].forward(&mut ctx, a_tilde, f_tilde)?;
            if let Some(pair) = pair {
                offsets.steps.push((t + 1, pair));
            }
            a[t + 1] = next;
        }
        let logits = head.forward(&mut ctx, a[PATHWAY_STEPS], ph, pw)?;
        let logits = ctx.graph.crop(logits, h, w)?;
        let aux_logits = match aux {
            Some(aux) => {
                let l = aux.forward(&mut ctx, f3, ph, pw)?;
                Some(ctx.graph.crop(l, h, w)?)
            }
            None => None,
        };
        Ok(ForwardOutput {
            logits,
            aux_logits,
            pyramid: FeaturePyramid { x, f, a },
            offsets,
            padded: (ph, pw),
        })
    }
}

/// Mirror index for reflection padding (edge pixel not repeated).
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Pads bottom and right by reflection to the next multiple of `divisor`.
pub fn reflect_pad_to<T: Real>(x: &Tensor4<T>, divisor: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let ph = h.div_ceil(divisor) * divisor;
    let pw = w.div_ceil(divisor) * divisor;
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor4::from_fn([n, c, ph, pw], |a, b, yy, xx| x.at(a, b, reflect(yy, h), reflect(xx, w)))
}
