//! Raw slice kernels behind the differentiable ops. Layout is always
//! `[B, C, H, W]`, row-major.

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Half-open range of output columns whose tap `k` lands inside `[0, extent)`.
    fn valid_range(k: usize, stride: usize, padding: usize, extent: usize, out: usize) -> (usize, usize) {
        // input index = o*stride + k - padding
        let lo = if k >= padding {
            0
        } else {
            (padding - k).div_ceil(stride)
        };
        let hi = if extent + padding < k + 1 {
            0
        } else {
            ((extent - 1 + padding - k) / stride + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image into a `[Cin * kh * kw, Ho * Wo]` matrix whose row
/// order matches the weight layout; padded taps are zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height, g.out_width);
    let plane = ho * wo;
    let mut cols = vec![0.0; g.in_channels * g.kh * g.kw * plane];
    for ci in 0..g.in_channels {
        let x_plane = &x[ci * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = ConvGeom::valid_range(ky, g.stride, g.padding, g.height, ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = ConvGeom::valid_range(kx, g.stride, g.padding, g.width, wo);
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let src = &x_plane[(oy * g.stride + ky - g.padding) * g.width..][..g.width];
                    let dst = &mut row[oy * wo..][..wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    cols
}

/// Adds the `[Cin * kh * kw, Ho * Wo]` matrix back onto one image.
fn col2im_add(cols: &[f64], dx: &mut [f64], g: &ConvGeom) {
    let (ho, wo) = (g.out_height, g.out_width);
    let plane = ho * wo;
    for ci in 0..g.in_channels {
        let d_plane = &mut dx[ci * g.height * g.width..][..g.height * g.width];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = ConvGeom::valid_range(ky, g.stride, g.padding, g.height, ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = ConvGeom::valid_range(kx, g.stride, g.padding, g.width, wo);
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let dst = &mut d_plane[(oy * g.stride + ky - g.padding) * g.width..][..g.width];
                    let src = &row[oy * wo..][..wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

/// Dot product with four independent partial sums so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_height * g.out_width;
    let taps = g.in_channels * g.kh * g.kw;
    let in_size = g.in_channels * g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    for b in 0..g.batch {
        let cols = im2col(&x[b * in_size..][..in_size], g);
        for co in 0..g.out_channels {
            let out_plane = &mut out[(b * g.out_channels + co) * plane..][..plane];
            if let Some(bias) = bias {
                out_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for (k, &wv) in w[co * taps..][..taps].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (o, c) in out_plane.iter_mut().zip(&cols[k * plane..][..plane]) {
                    *o += wv * c;
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; each is computed only when requested.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.out_height * g.out_width;
    let taps = g.in_channels * g.kh * g.kw;
    let in_size = g.in_channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = need_db.then(|| vec![0.0; g.out_channels]);
    for b in 0..g.batch {
        let d_b = &dout[b * g.out_channels * plane..][..g.out_channels * plane];
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += d_b[co * plane..][..plane].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(&x[b * in_size..][..in_size], g);
            for co in 0..g.out_channels {
                let d_plane = &d_b[co * plane..][..plane];
                for k in 0..taps {
                    dw[co * taps + k] += dot(d_plane, &cols[k * plane..][..plane]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![0.0; taps * plane];
            for (k, row) in dcols.chunks_exact_mut(plane).enumerate() {
                for co in 0..g.out_channels {
                    let wv = w[co * taps + k];
                    if wv == 0.0 {
                        continue;
                    }
                    for (r, d) in row.iter_mut().zip(&d_b[co * plane..][..plane]) {
                        *r += wv * d;
                    }
                }
            }
            col2im_add(&dcols, &mut dx[b * in_size..][..in_size], g);
        }
    }
    (dx, dw, db)
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-stabilised softmax along `axis`. Masked entries (mask == false) are
/// excluded from the normalisation and set to exactly zero. Returns `None`
/// if some slice has no unmasked entries.
pub fn softmax_forward(x: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    for o in 0..outer {
        for r in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + r;
            let mut max = f64::NEG_INFINITY;
            for k in 0..n {
                if keep(idx(k)) {
                    max = max.max(x[idx(k)]);
                }
            }
            if max == f64::NEG_INFINITY {
                return None;
            }
            let mut total = 0.0;
            for k in 0..n {
                let i = idx(k);
                if keep(i) {
                    let e = (x[i] - max).exp();
                    y[i] = e;
                    total += e;
                }
            }
            for k in 0..n {
                y[idx(k)] /= total;
            }
        }
    }
    Some(y)
}

pub fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + r;
            let dot: f64 = (0..n).map(|k| y[idx(k)] * dy[idx(k)]).sum();
            for k in 0..n {
                let i = idx(k);
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    dx
}

/// Geometry of a local attention window around each query pixel.
#[derive(Clone, Copy, Debug)]
pub struct WindowGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl WindowGeom {
    pub fn radius(&self) -> isize {
        (self.window / 2) as isize
    }

    pub fn positions(&self) -> usize {
        self.window * self.window
    }

    /// Offset `(dy, dx)` for window slot `o`; slots are row-major over
    /// `dy, dx ∈ [-r, r]`.
    pub fn offset(&self, o: usize) -> (isize, isize) {
        let r = self.radius();
        ((o / self.window) as isize - r, (o % self.window) as isize - r)
    }

    /// Range of query coordinates `i` for which `i + d` stays inside `[0, extent)`.
    pub fn valid(d: isize, extent: usize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (extent as isize - d.max(0)).max(0) as usize;
        (lo.min(hi), hi)
    }

    /// In-bounds mask, shape `[B, L*L, H, W]`.
    pub fn mask(&self) -> Vec<bool> {
        let (h, w, p) = (self.height, self.width, self.positions());
        let mut m = vec![false; self.batch * p * h * w];
        for b in 0..self.batch {
            for o in 0..p {
                let (dy, dx) = self.offset(o);
                let (y0, y1) = Self::valid(dy, h);
                let (x0, x1) = Self::valid(dx, w);
                for i in y0..y1 {
                    let row = ((b * p + o) * h + i) * w;
                    m[row + x0..row + x1].iter_mut().for_each(|v| *v = true);
                }
            }
        }
        m
    }
}

/// `out[b, o, i, j] = Σ_c query[b, c, i, j] · key[b, c, i + dy_o, j + dx_o]`;
/// zero where the offset leaves the map.
pub fn local_logits_forward(query: &[f64], key: &[f64], g: &WindowGeom) -> Vec<f64> {
    let (h, w, c, p) = (g.height, g.width, g.channels, g.positions());
    let hw = h * w;
    let mut out = vec![0.0; g.batch * p * hw];
    for b in 0..g.batch {
        for o in 0..p {
            let (dy, dx) = g.offset(o);
            let (y0, y1) = WindowGeom::valid(dy, h);
            let (x0, x1) = WindowGeom::valid(dx, w);
            let out_plane = &mut out[(b * p + o) * hw..][..hw];
            for ch in 0..c {
                let q = &query[(b * c + ch) * hw..][..hw];
                let k = &key[(b * c + ch) * hw..][..hw];
                for i in y0..y1 {
                    let ki = (i as isize + dy) as usize;
                    let orow = &mut out_plane[i * w + x0..i * w + x1];
                    let qrow = &q[i * w + x0..i * w + x1];
                    let kstart = (ki * w) as isize + x0 as isize + dx;
                    let krow = &k[kstart as usize..kstart as usize + (x1 - x0)];
                    for ((o, qv), kv) in orow.iter_mut().zip(qrow).zip(krow) {
                        *o += qv * kv;
                    }
                }
            }
        }
    }
    out
}

pub fn local_logits_backward(
    query: &[f64],
    key: &[f64],
    dout: &[f64],
    g: &WindowGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c, p) = (g.height, g.width, g.channels, g.positions());
    let hw = h * w;
    let mut dq = vec![0.0; query.len()];
    let mut dk = vec![0.0; key.len()];
    for b in 0..g.batch {
        for o in 0..p {
            let (dy, dx) = g.offset(o);
            let (y0, y1) = WindowGeom::valid(dy, h);
            let (x0, x1) = WindowGeom::valid(dx, w);
            let d_plane = &dout[(b * p + o) * hw..][..hw];
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in y0..y1 {
                    let ki = (i as isize + dy) as usize;
                    for j in x0..x1 {
                        let kj = (j as isize + dx) as usize;
                        let d = d_plane[i * w + j];
                        dq[base + i * w + j] += d * key[base + ki * w + kj];
                        dk[base + ki * w + kj] += d * query[base + i * w + j];
                    }
                }
            }
        }
    }
    (dq, dk)
}

/// `out[b, c, i, j] = Σ_o weights[b, o, i, j] · values[b, c, i + dy_o, j + dx_o]`
/// over in-bounds offsets.
pub fn local_aggregate_forward(weights: &[f64], values: &[f64], g: &WindowGeom) -> Vec<f64> {
    let (h, w, c, p) = (g.height, g.width, g.channels, g.positions());
    let hw = h * w;
    let mut out = vec![0.0; values.len()];
    for b in 0..g.batch {
        for o in 0..p {
            let (dy, dx) = g.offset(o);
            let (y0, y1) = WindowGeom::valid(dy, h);
            let (x0, x1) = WindowGeom::valid(dx, w);
            let wp = &weights[(b * p + o) * hw..][..hw];
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in y0..y1 {
                    let ki = (i as isize + dy) as usize;
                    let vstart = (base + ki * w) as isize + x0 as isize + dx;
                    let vrow = &values[vstart as usize..vstart as usize + (x1 - x0)];
                    let wrow = &wp[i * w + x0..i * w + x1];
                    let orow = &mut out[base + i * w + x0..base + i * w + x1];
                    for ((o, wv), v) in orow.iter_mut().zip(wrow).zip(vrow) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
    out
}

pub fn local_aggregate_backward(
    weights: &[f64],
    values: &[f64],
    dout: &[f64],
    g: &WindowGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c, p) = (g.height, g.width, g.channels, g.positions());
    let hw = h * w;
    let mut dw = vec![0.0; weights.len()];
    let mut dv = vec![0.0; values.len()];
    for b in 0..g.batch {
        for o in 0..p {
            let (dy, dx) = g.offset(o);
            let (y0, y1) = WindowGeom::valid(dy, h);
            let (x0, x1) = WindowGeom::valid(dx, w);
            let wbase = (b * p + o) * hw;
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in y0..y1 {
                    let ki = (i as isize + dy) as usize;
                    for j in x0..x1 {
                        let kj = (j as isize + dx) as usize;
                        let d = dout[base + i * w + j];
                        dw[wbase + i * w + j] += d * values[base + ki * w + kj];
                        dv[base + ki * w + kj] += d * weights[wbase + i * w + j];
                    }
                }
            }
        }
    }
    (dw, dv)
}

/// Dense similarities: `out[b, p, n] = Σ_c query[b, c, n] · key[b, c, p]`,
/// shape `[B, H*W, H, W]` (source pixel `p` along the channel axis).
pub fn global_logits_forward(query: &[f64], key: &[f64], batch: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * hw * hw];
    for b in 0..batch {
        for ch in 0..c {
            let q = &query[(b * c + ch) * hw..][..hw];
            let k = &key[(b * c + ch) * hw..][..hw];
            for (p, kv) in k.iter().enumerate() {
                let orow = &mut out[(b * hw + p) * hw..][..hw];
                for (o, qv) in orow.iter_mut().zip(q) {
                    *o += kv * qv;
                }
            }
        }
    }
    out
}

pub fn global_logits_backward(
    query: &[f64],
    key: &[f64],
    dout: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dq = vec![0.0; query.len()];
    let mut dk = vec![0.0; key.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for p in 0..hw {
                let drow = &dout[(b * hw + p) * hw..][..hw];
                let kv = key[base + p];
                let mut acc = 0.0;
                for n in 0..hw {
                    dq[base + n] += drow[n] * kv;
                    acc += drow[n] * query[base + n];
                }
                dk[base + p] += acc;
            }
        }
    }
    (dq, dk)
}

/// `out[b, c, n] = Σ_p weights[b, p, n] · values[b, c, p]`.
pub fn global_aggregate_forward(weights: &[f64], values: &[f64], batch: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for p in 0..hw {
                let v = values[base + p];
                let wrow = &weights[(b * hw + p) * hw..][..hw];
                let orow = &mut out[base..base + hw];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += wv * v;
                }
            }
        }
    }
    out
}

pub fn global_aggregate_backward(
    weights: &[f64],
    values: &[f64],
    dout: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; weights.len()];
    let mut dv = vec![0.0; values.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let drow = &dout[base..base + hw];
            for p in 0..hw {
                let wrow = &weights[(b * hw + p) * hw..][..hw];
                let dwrow = &mut dw[(b * hw + p) * hw..][..hw];
                let v = values[base + p];
                let mut acc = 0.0;
                for n in 0..hw {
                    dwrow[n] += drow[n] * v;
                    acc += drow[n] * wrow[n];
                }
                dv[base + p] += acc;
            }
        }
    }
    (dw, dv)
}
