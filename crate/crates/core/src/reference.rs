//! Direct nested-loop implementations used as test oracles.
//!
//! Nothing here shares code with the kernels in `autodiff`. Each routine
//! walks the dense iteration space (zero padding and out-of-window slots
//! included) and counts one multiply-accumulate per visited product in a
//! [`MacCounter`], so these loops also serve as the ground truth for the
//! static FLOP formulas.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor};

#[derive(Debug, Default)]
pub struct MacCounter(Cell<u64>);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn reset(&self) {
        self.0.set(0);
    }
}

fn padded_at(x: &Tensor, b: usize, c: usize, y: isize, xx: isize) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s[2] as isize || xx >= s[3] as isize {
        0.0
    } else {
        x.at4(b, c, y as usize, xx as usize)
    }
}

pub fn conv2d_naive(x: &Tensor, p: &ConvParams, macs: &MacCounter) -> Result<Tensor> {
    let (b, ci, h, w) = x.dims4()?;
    let (co, wci, kh, kw) = p.weight.dims4()?;
    if wci != ci {
        return Err(Error::Shape(format!("in_channels {ci} vs kernel {wci}")));
    }
    let ho = crate::tensor::conv_out_extent(h, kh, p.stride, p.padding, "height")?;
    let wo = crate::tensor::conv_out_extent(w, kw, p.stride, p.padding, "width")?;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = p.bias.as_ref().map_or(0.0, |bias| bias.data()[o]);
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * p.stride + ky) as isize - p.padding as isize;
                                let ix = (xx * p.stride + kx) as isize - p.padding as isize;
                                acc += p.weight.at4(o, i, ky, kx) * padded_at(x, n, i, iy, ix);
                                macs.add(1);
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Local attention propagation from `f_t` onto the grid of `f_k`:
/// embed both maps with `h`, score every window slot by inner product,
/// softmax over in-bounds slots, and take the weighted sum of `f_t`.
pub fn ila_naive(
    h: &ConvParams,
    f_t: &Tensor,
    f_k: &Tensor,
    window: usize,
    logit_scale: f64,
    macs: &MacCounter,
) -> Result<Tensor> {
    let (b, c, height, width) = f_t.dims4()?;
    if f_k.shape() != f_t.shape() {
        return Err(Error::Shape("f_t and f_k differ in shape".into()));
    }
    let e_k = conv2d_naive(f_k, h, macs)?;
    let e_t = conv2d_naive(f_t, h, macs)?;
    let ce = e_k.shape()[1];
    let r = (window / 2) as isize;
    let mut out = Tensor::zeros(&[b, c, height, width]);
    let mut logits = vec![0.0; window * window];
    let mut valid = vec![false; window * window];
    for n in 0..b {
        for i in 0..height {
            for j in 0..width {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let slot = ((dy + r) * window as isize + (dx + r)) as usize;
                        let (y, x) = (i as isize + dy, j as isize + dx);
                        valid[slot] = y >= 0 && x >= 0 && y < height as isize && x < width as isize;
                        let mut dot = 0.0;
                        for ch in 0..ce {
                            dot += e_k.at4(n, ch, i, j) * padded_at(&e_t, n, ch, y, x);
                            macs.add(1);
                        }
                        logits[slot] = logit_scale * dot;
                    }
                }
                let max = (0..logits.len())
                    .filter(|&s| valid[s])
                    .map(|s| logits[s])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..logits.len()).filter(|&s| valid[s]).map(|s| (logits[s] - max).exp()).sum();
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let slot = ((dy + r) * window as isize + (dx + r)) as usize;
                            let weight = if valid[slot] { (logits[slot] - max).exp() / z } else { 0.0 };
                            acc += weight * padded_at(f_t, n, ch, i as isize + dy, j as isize + dx);
                            macs.add(1);
                        }
                    }
                    out.data_mut()[((n * c + ch) * height + i) * width + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Dense attention between every pixel of `f_k` and every pixel of `f_t`.
pub fn global_naive(
    h: &ConvParams,
    f_t: &Tensor,
    f_k: &Tensor,
    logit_scale: f64,
    macs: &MacCounter,
) -> Result<Tensor> {
    let (b, c, height, width) = f_t.dims4()?;
    let e_k = conv2d_naive(f_k, h, macs)?;
    let e_t = conv2d_naive(f_t, h, macs)?;
    let ce = e_k.shape()[1];
    let hw = height * width;
    let mut out = Tensor::zeros(&[b, c, height, width]);
    let mut logits = vec![0.0; hw];
    for n in 0..b {
        for i in 0..height {
            for j in 0..width {
                for (p, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for ch in 0..ce {
                        dot += e_k.at4(n, ch, i, j) * e_t.at4(n, ch, p / width, p % width);
                        macs.add(1);
                    }
                    *l = logit_scale * dot;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (p, l) in logits.iter().enumerate() {
                        acc += (l - max).exp() / z * f_t.at4(n, ch, p / width, p % width);
                        macs.add(1);
                    }
                    out.data_mut()[((n * c + ch) * height + i) * width + j] = acc;
                }
            }
        }
    }
    Ok(out)
}
