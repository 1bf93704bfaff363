//! Inter-frame local attention (ILA).
//!
//! For every pixel `(i, j)` of the target map `f_k`, ILA scores each offset
//! `(dy, dx)` of an `L × L` window by the inner product
//! `h(f_k)(i, j) · h(f_t)(i + dy, j + dx)`, normalises the scores with a
//! softmax over the in-bounds offsets, and returns the weighted sum of
//! `f_t` over the same window. `h` is a single 3×3 convolution applied to
//! both maps.
//!
//! Offsets that fall outside the map are masked out of the softmax rather
//! than attending to zero padding, so each pixel's weights sum to one over
//! real pixels only.

use rand::Rng;

use crate::autodiff::kernels::WindowGeom;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::reference::{self, MacCounter};
use crate::tensor::{ConvParams, Tensor};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_GLOBAL_CAP: usize = 64 * 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    MaskOutOfBounds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IlaConfig {
    /// Odd window side `L`.
    pub window: usize,
    pub boundary: Boundary,
    /// Channel count `C` of the propagated features (kept by `h`).
    pub channels: usize,
    /// Multiplier on the inner products before the softmax.
    pub logit_scale: f64,
    /// Largest `H * W` accepted by [`global_attention`].
    pub global_cap: usize,
}

impl IlaConfig {
    pub fn new(channels: usize, window: usize) -> Result<Self> {
        let cfg = Self {
            window,
            boundary: Boundary::MaskOutOfBounds,
            channels,
            logit_scale: 1.0,
            global_cap: DEFAULT_GLOBAL_CAP,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd and positive, got {}", self.window)));
        }
        if self.channels == 0 {
            return Err(Error::Config("ILA channels must be positive".into()));
        }
        if !self.logit_scale.is_finite() {
            return Err(Error::Config("logit scale must be finite".into()));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.window * self.window
    }
}

/// Softmax-normalised window weights, `[B, L², H, W]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub values: Tensor,
    pub valid_mask: Vec<bool>,
    pub window: usize,
}

impl AttentionWeights {
    /// Weight for batch `b`, window slot `slot`, pixel `(i, j)`.
    pub fn at(&self, b: usize, slot: usize, i: usize, j: usize) -> f64 {
        self.values.at4(b, slot, i, j)
    }

    pub fn is_valid(&self, b: usize, slot: usize, i: usize, j: usize) -> bool {
        let s = self.values.shape();
        self.valid_mask[((b * s[1] + slot) * s[2] + i) * s[3] + j]
    }

    /// Window offset `(dy, dx)` of a slot.
    pub fn offset(&self, slot: usize) -> (isize, isize) {
        let r = (self.window / 2) as isize;
        ((slot / self.window) as isize - r, (slot % self.window) as isize - r)
    }
}

/// An ILA operator: one shared 3×3 embedding convolution plus its config.
#[derive(Clone, Debug)]
pub struct IlaModule {
    pub h: ConvParams,
    pub config: IlaConfig,
}

impl IlaModule {
    pub fn new(h: ConvParams, config: IlaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        if h.weight.shape() != [c, c, 3, 3] || h.stride != 1 || h.padding != 1 {
            return Err(Error::Config(format!(
                "h must be a 3x3, {c}->{c}, stride 1, pad 1 convolution; got weight {:?}, stride {}, pad {}",
                h.weight.shape(),
                h.stride,
                h.padding
            )));
        }
        Ok(Self { h, config })
    }

    /// He-normal `h` with a zero bias.
    pub fn random<R: Rng + ?Sized>(config: IlaConfig, rng: &mut R) -> Result<Self> {
        let c = config.channels;
        let w = Tensor::randn(&[c, c, 3, 3], (2.0 / (9 * c) as f64).sqrt(), rng);
        let h = ConvParams::new(w, Some(Tensor::zeros(&[c])), 1, 1)?;
        Self::new(h, config)
    }

    fn bind(&self, g: &mut Graph) -> (Var, Option<Var>) {
        let w = g.constant(self.h.weight.clone());
        let b = self.h.bias.as_ref().map(|b| g.constant(b.clone()));
        (w, b)
    }
}

fn check_inputs(g: &Graph, f_t: Var, f_k: Var, config: &IlaConfig) -> Result<(usize, usize, usize, usize)> {
    if g.shape(f_t) != g.shape(f_k) {
        return Err(Error::Shape(format!(
            "f_t {:?} and f_k {:?} must have the same shape",
            g.shape(f_t),
            g.shape(f_k)
        )));
    }
    let (b, c, h, w) = g.value(f_t).dims4()?;
    if c != config.channels {
        return Err(Error::Shape(format!(
            "feature channels {c} do not match ILA channels {}",
            config.channels
        )));
    }
    Ok((b, c, h, w))
}

/// Window weights on the graph; `h_w`/`h_b` are the shared embedding.
pub fn weights_vars(
    g: &mut Graph,
    h_w: Var,
    h_b: Option<Var>,
    f_k: Var,
    f_t: Var,
    config: &IlaConfig,
) -> Result<(Var, Vec<bool>)> {
    let (b, c, height, width) = check_inputs(g, f_t, f_k, config)?;
    let max_window = 2 * height.min(width) - 1;
    if config.window > max_window {
        return Err(Error::Config(format!(
            "window {} exceeds 2*min(H, W) - 1 = {max_window}",
            config.window
        )));
    }
    let e_k = g.conv2d(f_k, h_w, h_b, 1, 1)?;
    let e_t = g.conv2d(f_t, h_w, h_b, 1, 1)?;
    let mut logits = g.local_logits(e_k, e_t, config.window)?;
    if config.logit_scale != 1.0 {
        logits = g.scale(logits, config.logit_scale);
    }
    let mask = WindowGeom { batch: b, channels: c, height, width, window: config.window }.mask();
    let weights = g.softmax(logits, 1, Some(&mask))?;
    Ok((weights, mask))
}

/// `f_{t→k}` on the graph.
pub fn ila_vars(g: &mut Graph, h_w: Var, h_b: Option<Var>, f_t: Var, f_k: Var, config: &IlaConfig) -> Result<Var> {
    let (weights, _) = weights_vars(g, h_w, h_b, f_k, f_t, config)?;
    g.local_aggregate(weights, f_t, config.window)
}

/// Dense (whole-map) attention on the graph.
pub fn global_vars(g: &mut Graph, h_w: Var, h_b: Option<Var>, f_t: Var, f_k: Var, config: &IlaConfig) -> Result<Var> {
    let (_, _, height, width) = check_inputs(g, f_t, f_k, config)?;
    if height * width > config.global_cap {
        return Err(Error::Config(format!(
            "global attention over {}x{} = {} pixels exceeds the cap of {}",
            height,
            width,
            height * width,
            config.global_cap
        )));
    }
    let e_k = g.conv2d(f_k, h_w, h_b, 1, 1)?;
    let e_t = g.conv2d(f_t, h_w, h_b, 1, 1)?;
    let mut logits = g.global_logits(e_k, e_t)?;
    if config.logit_scale != 1.0 {
        logits = g.scale(logits, config.logit_scale);
    }
    let weights = g.softmax(logits, 1, None)?;
    g.global_aggregate(weights, f_t)
}

pub fn compute_weights(module: &IlaModule, f_k: &Tensor, f_t: &Tensor) -> Result<AttentionWeights> {
    let mut g = Graph::new();
    let (w, b) = module.bind(&mut g);
    let fk = g.constant(f_k.clone());
    let ft = g.constant(f_t.clone());
    let (weights, valid_mask) = weights_vars(&mut g, w, b, fk, ft, &module.config)?;
    Ok(AttentionWeights {
        values: g.value(weights).clone(),
        valid_mask,
        window: module.config.window,
    })
}

pub fn propagate(f_t: &Tensor, weights: &AttentionWeights) -> Result<Tensor> {
    let (b, _, h, w) = f_t.dims4()?;
    let expected = [b, weights.window * weights.window, h, w];
    if weights.values.shape() != expected {
        return Err(Error::Shape(format!(
            "weights {:?} do not match features {:?} (expected {:?})",
            weights.values.shape(),
            f_t.shape(),
            expected
        )));
    }
    let mut g = Graph::new();
    let wv = g.constant(weights.values.clone());
    let ft = g.constant(f_t.clone());
    let out = g.local_aggregate(wv, ft, weights.window)?;
    Ok(g.value(out).clone())
}

/// Propagates `f_t` onto the pixel grid of `f_k`.
pub fn ila_forward(module: &IlaModule, f_t: &Tensor, f_k: &Tensor) -> Result<Tensor> {
    let weights = compute_weights(module, f_k, f_t)?;
    propagate(f_t, &weights)
}

/// Nested-loop oracle with the same contract as [`ila_forward`].
pub fn ila_reference(module: &IlaModule, f_t: &Tensor, f_k: &Tensor) -> Result<Tensor> {
    ila_reference_counted(module, f_t, f_k, &MacCounter::new())
}

pub fn ila_reference_counted(module: &IlaModule, f_t: &Tensor, f_k: &Tensor, macs: &MacCounter) -> Result<Tensor> {
    let (_, c, h, w) = f_t.dims4()?;
    if f_k.shape() != f_t.shape() {
        return Err(Error::Shape(format!(
            "f_t {:?} and f_k {:?} must have the same shape",
            f_t.shape(),
            f_k.shape()
        )));
    }
    if c != module.config.channels {
        return Err(Error::Shape(format!("feature channels {c} do not match ILA channels {}", module.config.channels)));
    }
    if module.config.window > 2 * h.min(w) - 1 {
        return Err(Error::Config(format!("window {} exceeds 2*min(H, W) - 1", module.config.window)));
    }
    reference::ila_naive(&module.h, f_t, f_k, module.config.window, module.config.logit_scale, macs)
}

/// Attention over the entire map. Cost grows as `(H·W)²·C`, so maps above
/// `config.global_cap` pixels are refused.
pub fn global_attention(module: &IlaModule, f_t: &Tensor, f_k: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (w, b) = module.bind(&mut g);
    let ft = g.constant(f_t.clone());
    let fk = g.constant(f_k.clone());
    let out = global_vars(&mut g, w, b, ft, fk, &module.config)?;
    Ok(g.value(out).clone())
}
