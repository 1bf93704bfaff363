//! Static multiply-accumulate, FLOP and parameter accounting.
//!
//! Convention: every dense tap is one MAC, including taps that land on
//! zero padding and attention slots outside the map. Elementwise ops
//! (ReLU, SE scaling, upsampling) are not counted. Softmax exponentials
//! and divides count one FLOP each and are not MACs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::{Branch, NetworkConfig, Propagation, ScheduleEntry};
use crate::tensor::conv_out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CountingMode {
    #[default]
    MacAs1,
    MacAs2,
}

impl CountingMode {
    pub fn multiplier(self) -> u64 {
        match self {
            CountingMode::MacAs1 => 1,
            CountingMode::MacAs2 => 2,
        }
    }
}

/// Cost of one layer invocation plus how often it ran.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    /// FLOPs that are not multiply-accumulates (softmax).
    pub extra_flops: u64,
    pub params: u64,
    pub invocations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportEntry {
    pub name: String,
    /// Total over all invocations.
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub invocations: u64,
}

/// A published figure carried verbatim for comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct PublishedRow {
    pub method: &'static str,
    pub input_size: &'static str,
    pub gflops: &'static str,
    pub convs: &'static str,
    pub params: &'static str,
}

pub const PUBLISHED_LABEL: &str = "published, not computed";

pub fn published_rows() -> Vec<PublishedRow> {
    let row = |method, input_size, gflops, convs, params| PublishedRow { method, input_size, gflops, convs, params };
    vec![
        row("optical flow", "258x512", "7.5", "23", "38M"),
        row("SVC", "258x512", "5.4", "3", "3M"),
        row("ILA", "258x512", "0.2", "1", "0.2M"),
        row("optical flow", "1024x2048", "71.2", "23", "38M"),
        row("SVC", "1024x2048", "108", "3", "3M"),
        row("ILA", "1024x2048", "5.4", "1", "0.2M"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub entries: Vec<ReportEntry>,
    pub mode: CountingMode,
    /// Frames the entries were accumulated over.
    pub frames: u64,
    pub published: Vec<PublishedRow>,
}

impl FlopReport {
    pub fn new(mode: CountingMode, frames: u64) -> Self {
        Self { entries: Vec::new(), mode, frames, published: published_rows() }
    }

    pub fn push(&mut self, layer: &LayerCost) {
        let m = self.mode.multiplier();
        self.entries.push(ReportEntry {
            name: layer.name.clone(),
            macs: layer.macs * layer.invocations,
            flops: (layer.macs * m + layer.extra_flops) * layer.invocations,
            params: layer.params,
            invocations: layer.invocations,
        });
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn gflops_per_frame(&self) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        self.total_flops() as f64 / self.frames as f64 / 1e9
    }

    pub fn to_text(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>14}  {:>14}  {:>10}", "layer", "calls", "macs", "flops", "params");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6}  {:>14}  {:>14}  {:>10}",
                e.name, e.invocations, e.macs, e.flops, e.params
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>14}  {:>14}  {:>10}",
            "total",
            self.frames,
            self.total_macs(),
            self.total_flops(),
            self.total_params()
        );
        let _ = writeln!(s, "GFLOPs per frame ({:?}): {:.6}", self.mode, self.gflops_per_frame());
        let _ = writeln!(s, "\nfeature propagation, {PUBLISHED_LABEL}:");
        for r in &self.published {
            let _ = writeln!(
                s,
                "  {:<12} {:>9}  {:>5} GFLOPs  {:>2} conv  {:>4} params  ({PUBLISHED_LABEL})",
                r.method, r.input_size, r.gflops, r.convs, r.params
            );
        }
        s
    }

    /// CSV with columns `layer,macs,flops,params`; published rows follow
    /// with their label in the layer column and empty count columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,macs,flops,params\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{}", e.name, e.macs, e.flops, e.params);
        }
        let _ = writeln!(s, "total,{},{},{}", self.total_macs(), self.total_flops(), self.total_params());
        for r in &self.published {
            let _ = writeln!(
                s,
                "\"{} {} ({PUBLISHED_LABEL}): {} GFLOPs, {} conv, {} params\",,,",
                r.method, r.input_size, r.gflops, r.convs, r.params
            );
        }
        s
    }
}

fn positive(values: &[(usize, &str)]) -> Result<()> {
    for &(v, name) in values {
        if v == 0 {
            return Err(Error::Config(format!("{name} must be positive")));
        }
    }
    Ok(())
}

/// `(macs, params)` of a biased convolution.
#[allow(clippy::too_many_arguments)]
pub fn count_conv(
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(u64, u64)> {
    positive(&[(h, "H"), (w, "W"), (c_in, "Cin"), (c_out, "Cout"), (kh, "kh"), (kw, "kw"), (stride, "stride")])?;
    let ho = conv_out_extent(h, kh, stride, padding, "height")?;
    let wo = conv_out_extent(w, kw, stride, padding, "width")?;
    let taps = (c_out * c_in * kh * kw) as u64;
    Ok(((ho * wo) as u64 * taps, taps + c_out as u64))
}

/// `(macs, params)` of one local attention edge: the 3×3 embedding applied
/// to both maps, the window inner products and the weighted sum.
pub fn count_ila(h: usize, w: usize, c: usize, window: usize) -> Result<(u64, u64)> {
    positive(&[(h, "H"), (w, "W"), (c, "C"), (window, "L")])?;
    if window % 2 == 0 {
        return Err(Error::Config(format!("window must be odd, got {window}")));
    }
    let (hw, c, l2) = ((h * w) as u64, c as u64, (window * window) as u64);
    Ok((2 * hw * c * c * 9 + 2 * hw * l2 * c, c * c * 9 + c))
}

/// Non-MAC softmax FLOPs of a local attention edge.
pub fn ila_softmax_flops(h: usize, w: usize, window: usize) -> u64 {
    2 * (h * w * window * window) as u64
}

/// The attention part of [`count_ila`] alone (no embedding conv).
pub fn ila_attention_macs(h: usize, w: usize, c: usize, window: usize) -> u64 {
    2 * (h * w * window * window * c) as u64
}

pub fn count_global_attention(h: usize, w: usize, c: usize) -> Result<u64> {
    positive(&[(h, "H"), (w, "W"), (c, "C")])?;
    let (hw, c) = ((h * w) as u64, c as u64);
    Ok(2 * hw * c * c * 9 + 2 * hw * hw * c)
}

pub fn global_attention_macs(h: usize, w: usize, c: usize) -> u64 {
    let hw = (h * w) as u64;
    2 * hw * hw * c as u64
}

struct Counter {
    layers: Vec<LayerCost>,
}

impl Counter {
    fn layer(&mut self, name: String, macs: u64, extra_flops: u64, params: u64) -> usize {
        self.layers.push(LayerCost { name, macs, extra_flops, params, invocations: 0 });
        self.layers.len() - 1
    }
}

struct Layout {
    slow: Vec<usize>,
    fast: Vec<usize>,
    /// Per task: SE and decoder layers (every frame), key edge, prev edge.
    always: Vec<Vec<usize>>,
    key_edge: Vec<usize>,
    prev_edge: Vec<usize>,
}

fn encoder_layers(counter: &mut Counter, config: &NetworkConfig, branch: Branch, hw: (usize, usize)) -> Result<Vec<usize>> {
    let enc = config.encoder(branch);
    let prefix = match branch {
        Branch::Slow => "slow",
        Branch::Fast => "fast",
    };
    let (mut h, mut w, mut c) = (hw.0, hw.1, config.in_channels);
    let mut ids = Vec::new();
    for (i, s) in enc.stages.iter().enumerate() {
        let k = s.kernel();
        let (macs, params) = count_conv(h, w, c, s.out_channels, k, k, s.stride, 1)?;
        ids.push(counter.layer(format!("{prefix}.conv{i}"), macs, 0, params));
        h = conv_out_extent(h, k, s.stride, 1, "height")?;
        w = conv_out_extent(w, k, s.stride, 1, "width")?;
        c = s.out_channels;
    }
    Ok(ids)
}

fn build_layout(counter: &mut Counter, config: &NetworkConfig, input_hw: (usize, usize)) -> Result<Layout> {
    config.validate()?;
    let s = config.total_stride();
    let (h, w) = (input_hw.0 / s, input_hw.1 / s);
    if input_hw.0 % s != 0 || input_hw.1 % s != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("input {input_hw:?} is not a positive multiple of stride {s}")));
    }
    let slow = encoder_layers(counter, config, Branch::Slow, input_hw)?;
    let fast = encoder_layers(counter, config, Branch::Fast, input_hw)?;
    let c = config.feature_channels();
    let hidden = config.se_hidden();
    let (d1, d2) = config.decoder_widths;
    let mut always = Vec::new();
    let mut key_edge = Vec::new();
    let mut prev_edge = Vec::new();
    for (t, kind) in config.tasks.iter().enumerate() {
        let p = format!("task{t}.{}", kind.name());
        let mut ids = Vec::new();
        let (m, q) = count_conv(1, 1, c, hidden, 1, 1, 1, 0)?;
        ids.push(counter.layer(format!("{p}.se.reduce"), m, 0, q));
        let (m, q) = count_conv(1, 1, hidden, c, 1, 1, 1, 0)?;
        ids.push(counter.layer(format!("{p}.se.expand"), m, 0, q));
        for (edge, list) in [("ila_key", &mut key_edge), ("ila_prev", &mut prev_edge)] {
            let (macs, extra) = match config.propagation {
                Propagation::Global => (count_global_attention(h, w, c)?, 2 * (h * w * h * w) as u64),
                _ => (count_ila(h, w, c, config.window)?.0, ila_softmax_flops(h, w, config.window)),
            };
            let params = (c * c * 9 + c) as u64;
            list.push(counter.layer(format!("{p}.{edge}"), macs, extra, params));
        }
        let (m, q) = count_conv(h, w, 3 * c, d1, 3, 3, 1, 1)?;
        ids.push(counter.layer(format!("{p}.dec0"), m, 0, q));
        let (m, q) = count_conv(h, w, d1, d2, 1, 1, 1, 0)?;
        ids.push(counter.layer(format!("{p}.dec1"), m, 0, q));
        let (m, q) = count_conv(h, w, d2, kind.out_channels(), 1, 1, 1, 0)?;
        ids.push(counter.layer(format!("{p}.head"), m, 0, q));
        always.push(ids);
    }
    Ok(Layout { slow, fast, always, key_edge, prev_edge })
}

/// Accumulates per-layer costs along every frame's path of `schedule`.
/// Every model layer appears once, with zero invocations if never run, so
/// the parameter total covers the whole model.
pub fn model_report(
    config: &NetworkConfig,
    input_hw: (usize, usize),
    schedule: &[ScheduleEntry],
    mode: CountingMode,
) -> Result<FlopReport> {
    if schedule.is_empty() {
        return Err(Error::Config("empty schedule".into()));
    }
    let mut counter = Counter { layers: Vec::new() };
    let layout = build_layout(&mut counter, config, input_hw)?;
    let propagate = config.propagation != Propagation::None;
    for entry in schedule {
        let enc = if entry.is_keyframe() { &layout.slow } else { &layout.fast };
        for &i in enc {
            counter.layers[i].invocations += 1;
        }
        for t in 0..layout.always.len() {
            for &i in &layout.always[t] {
                counter.layers[i].invocations += 1;
            }
            if propagate && entry.keyframe_source.is_some() {
                counter.layers[layout.key_edge[t]].invocations += 1;
            }
            if propagate && entry.previous_source.is_some() {
                counter.layers[layout.prev_edge[t]].invocations += 1;
            }
        }
    }
    let mut report = FlopReport::new(mode, schedule.len() as u64);
    for layer in &counter.layers {
        report.push(layer);
    }
    Ok(report)
}

/// Per-frame FLOPs of one frame in steady state: a keyframe or a
/// non-keyframe with both propagation sources present.
pub fn frame_flops(config: &NetworkConfig, input_hw: (usize, usize), branch: Branch, mode: CountingMode) -> Result<u64> {
    let keyframe = branch == Branch::Slow;
    let entry = ScheduleEntry {
        frame_index: 1,
        branch,
        keyframe_source: if keyframe { None } else { Some(0) },
        previous_source: Some(0),
    };
    Ok(model_report(config, input_hw, &[entry], mode)?.total_flops())
}
