//! Fused forward/backward kernels for the few operations that would be slow
//! or numerically awkward if composed from primitive graph ops.

use crate::par;
use crate::real::Real;
use crate::tensor::Matrix;

/// Layout of a multi-scale value map and the sampling pattern of one
/// deformable attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGeom {
    pub heads: usize,
    /// `(H_l, W_l)` per level, finest first.
    pub levels: Vec<(usize, usize)>,
    pub points: usize,
    pub channels: usize,
}

impl DeformGeom {
    pub fn new(heads: usize, levels: Vec<(usize, usize)>, points: usize, channels: usize) -> Self {
        assert!(heads > 0 && channels % heads == 0, "channels must split evenly over heads");
        DeformGeom {
            heads,
            levels,
            points,
            channels,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Sampling weights per query: `heads * levels * points`.
    pub fn weights_per_query(&self) -> usize {
        self.heads * self.levels.len() * self.points
    }

    pub fn level_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.levels.len());
        let mut acc = 0;
        for &(h, w) in &self.levels {
            starts.push(acc);
            acc += h * w;
        }
        starts
    }

    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|(h, w)| h * w).sum()
    }
}

#[derive(Clone, Copy)]
struct Corner {
    row: usize,
    w: f64,
    /// d w / d x and d w / d y in pixel units.
    dwx: f64,
    dwy: f64,
}

/// Bilinear corners of a normalized location with zero padding, using the
/// half-pixel convention (`x_pix = x * W - 0.5`).
#[inline]
fn corners(lx: f64, ly: f64, h: usize, w: usize, start: usize) -> ([Corner; 4], usize) {
    let x = lx * w as f64 - 0.5;
    let y = ly * h as f64 - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0i = x0 as i64;
    let y0i = y0 as i64;
    let cand = [
        (x0i, y0i, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0i + 1, y0i, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0i, y0i + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0i + 1, y0i + 1, fx * fy, fy, fx),
    ];
    let mut out = [Corner {
        row: 0,
        w: 0.0,
        dwx: 0.0,
        dwy: 0.0,
    }; 4];
    let mut n = 0;
    for (cx, cy, wt, dwx, dwy) in cand {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            out[n] = Corner {
                row: start + cy as usize * w + cx as usize,
                w: wt,
                dwx,
                dwy,
            };
            n += 1;
        }
    }
    (out, n)
}

/// Multi-scale deformable sampling.
///
/// * `value`: `tokens x channels`, levels concatenated row-wise.
/// * `loc`: `queries x (heads*levels*points*2)`, normalized `(x, y)` pairs.
/// * `attn`: `queries x (heads*levels*points)`, already normalized.
///
/// Head `h` reads and writes channels `h*dh .. (h+1)*dh`.
pub fn deform_sample_forward<T: Real>(
    g: &DeformGeom,
    value: &Matrix<T>,
    loc: &Matrix<T>,
    attn: &Matrix<T>,
) -> Matrix<T> {
    let nq = loc.rows;
    let d = g.channels;
    let dh = g.head_dim();
    let nl = g.num_levels();
    let starts = g.level_starts();
    assert_eq!(value.cols, d);
    assert_eq!(value.rows, g.total_tokens());
    assert_eq!(loc.cols, g.weights_per_query() * 2);
    assert_eq!(attn.cols, g.weights_per_query());
    assert_eq!(attn.rows, nq);
    let mut out = Matrix::zeros(nq, d);
    par::for_each_row_mut(&mut out.data, d, |q, orow| {
        let lrow = loc.row(q);
        let arow = attn.row(q);
        for h in 0..g.heads {
            let o = &mut orow[h * dh..(h + 1) * dh];
            for l in 0..nl {
                let (lh, lw) = g.levels[l];
                for p in 0..g.points {
                    let idx = (h * nl + l) * g.points + p;
                    let a = arow[idx];
                    let (cs, n) = corners(lrow[2 * idx].f64(), lrow[2 * idx + 1].f64(), lh, lw, starts[l]);
                    for c in &cs[..n] {
                        let wgt = a * T::of(c.w);
                        let v = &value.row(c.row)[h * dh..(h + 1) * dh];
                        for (oc, &vc) in o.iter_mut().zip(v) {
                            *oc += wgt * vc;
                        }
                    }
                }
            }
        }
    });
    out
}

pub struct DeformGrads<T> {
    pub value: Matrix<T>,
    pub loc: Matrix<T>,
    pub attn: Matrix<T>,
}

pub fn deform_sample_backward<T: Real>(
    g: &DeformGeom,
    value: &Matrix<T>,
    loc: &Matrix<T>,
    attn: &Matrix<T>,
    gout: &Matrix<T>,
) -> DeformGrads<T> {
    let nq = loc.rows;
    let dh = g.head_dim();
    let nl = g.num_levels();
    let starts = g.level_starts();
    let mut gv = Matrix::zeros(value.rows, value.cols);
    let mut gl = Matrix::zeros(loc.rows, loc.cols);
    let mut ga = Matrix::zeros(attn.rows, attn.cols);
    let mut sample = vec![T::zero(); dh];
    let mut dsx = vec![T::zero(); dh];
    let mut dsy = vec![T::zero(); dh];
    for q in 0..nq {
        let grow = gout.row(q);
        for h in 0..g.heads {
            let go = &grow[h * dh..(h + 1) * dh];
            for l in 0..nl {
                let (lh, lw) = g.levels[l];
                for p in 0..g.points {
                    let idx = (h * nl + l) * g.points + p;
                    let a = attn.at(q, idx);
                    let (cs, n) = corners(loc.at(q, 2 * idx).f64(), loc.at(q, 2 * idx + 1).f64(), lh, lw, starts[l]);
                    sample.iter_mut().for_each(|v| *v = T::zero());
                    dsx.iter_mut().for_each(|v| *v = T::zero());
                    dsy.iter_mut().for_each(|v| *v = T::zero());
                    for c in &cs[..n] {
                        let (w, wx, wy) = (T::of(c.w), T::of(c.dwx), T::of(c.dwy));
                        let v = &value.row(c.row)[h * dh..(h + 1) * dh];
                        for k in 0..dh {
                            sample[k] += w * v[k];
                            dsx[k] += wx * v[k];
                            dsy[k] += wy * v[k];
                        }
                        let gvr = &mut gv.row_mut(c.row)[h * dh..(h + 1) * dh];
                        let s = a * w;
                        for k in 0..dh {
                            gvr[k] += s * go[k];
                        }
                    }
                    let mut dot_s = T::zero();
                    let mut dot_x = T::zero();
                    let mut dot_y = T::zero();
                    for k in 0..dh {
                        dot_s += go[k] * sample[k];
                        dot_x += go[k] * dsx[k];
                        dot_y += go[k] * dsy[k];
                    }
                    ga.set(q, idx, dot_s);
                    gl.set(q, 2 * idx, a * dot_x * T::of(lw as f64));
                    gl.set(q, 2 * idx + 1, a * dot_y * T::of(lh as f64));
                }
            }
        }
    }
    DeformGrads {
        value: gv,
        loc: gl,
        attn: ga,
    }
}

/// Patch extraction for a square-kernel convolution on an `(H*W) x C` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

pub fn im2col_forward<T: Real>(g: &ConvGeom, x: &Matrix<T>) -> Matrix<T> {
    assert_eq!(x.rows, g.height * g.width);
    assert_eq!(x.cols, g.channels);
    let (ho, wo) = (g.out_height(), g.out_width());
    let pl = g.patch_len();
    let mut out = Matrix::zeros(ho * wo, pl);
    par::for_each_row_mut(&mut out.data, pl, |r, row| {
        let (oy, ox) = (r / wo, r % wo);
        for ky in 0..g.kernel {
            let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
            if iy < 0 || iy as usize >= g.height {
                continue;
            }
            for kx in 0..g.kernel {
                let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                if ix < 0 || ix as usize >= g.width {
                    continue;
                }
                let src = x.row(iy as usize * g.width + ix as usize);
                let dst = (ky * g.kernel + kx) * g.channels;
                row[dst..dst + g.channels].copy_from_slice(src);
            }
        }
    });
    out
}

pub fn im2col_backward<T: Real>(g: &ConvGeom, gout: &Matrix<T>) -> Matrix<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut gx = Matrix::zeros(g.height * g.width, g.channels);
    for r in 0..ho * wo {
        let (oy, ox) = (r / wo, r % wo);
        let grow = gout.row(r);
        for ky in 0..g.kernel {
            let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
            if iy < 0 || iy as usize >= g.height {
                continue;
            }
            for kx in 0..g.kernel {
                let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                if ix < 0 || ix as usize >= g.width {
                    continue;
                }
                let dst = gx.row_mut(iy as usize * g.width + ix as usize);
                let src = (ky * g.kernel + kx) * g.channels;
                for (d, &s) in dst.iter_mut().zip(&grow[src..src + g.channels]) {
                    *d += s;
                }
            }
        }
    }
    gx
}

/// Sigmoid focal loss parameters. `alpha < 0` disables class balancing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and d loss / d logit for one cell.
#[inline]
pub fn focal_cell(x: f64, t: f64, fp: FocalParams) -> (f64, f64) {
    let p = sigmoid(x);
    let ce = softplus(x) - t * x;
    let pt = p * t + (1.0 - p) * (1.0 - t);
    let m = 1.0 - pt;
    let at = if fp.alpha >= 0.0 {
        fp.alpha * t + (1.0 - fp.alpha) * (1.0 - t)
    } else {
        1.0
    };
    let mg = if fp.gamma == 0.0 { 1.0 } else { m.powf(fp.gamma) };
    let loss = at * ce * mg;
    let dm = -(2.0 * t - 1.0) * p * (1.0 - p);
    let dmg = if fp.gamma == 0.0 {
        0.0
    } else {
        fp.gamma * m.powf(fp.gamma - 1.0) * dm
    };
    let grad = at * ((p - t) * mg + ce * dmg);
    (loss, grad)
}

/// Summed focal loss over a logit grid, with its gradient.
pub fn focal_forward_backward<T: Real>(
    logits: &Matrix<T>,
    targets: &Matrix<T>,
    fp: FocalParams,
) -> (f64, Matrix<T>) {
    assert_eq!(logits.shape(), targets.shape());
    let mut total = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for ((x, t), g) in logits.data.iter().zip(&targets.data).zip(grad.data.iter_mut()) {
        let (l, d) = focal_cell(x.f64(), t.f64(), fp);
        total += l;
        *g = T::of(d);
    }
    (total, grad)
}

/// `1 - GIoU` of a predicted `cxcywh` box against a fixed target and its
/// gradient with respect to the prediction.
pub fn giou_loss_cell(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let (x0, y0, x1, y1) = (p[0] - p[2] / 2.0, p[1] - p[3] / 2.0, p[0] + p[2] / 2.0, p[1] + p[3] / 2.0);
    let (tx0, ty0, tx1, ty1) = (t[0] - t[2] / 2.0, t[1] - t[3] / 2.0, t[0] + t[2] / 2.0, t[1] + t[3] / 2.0);
    let iw_raw = x1.min(tx1) - x0.max(tx0);
    let ih_raw = y1.min(ty1) - y0.max(ty0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = (x1 - x0) * (y1 - y0);
    let area_t = (tx1 - tx0) * (ty1 - ty0);
    let union = area_p + area_t - inter;
    let cw = x1.max(tx1) - x0.min(tx0);
    let ch = y1.max(ty1) - y0.min(ty0);
    let hull = cw * ch;
    const EPS: f64 = 1e-12;
    let union_s = union.max(EPS);
    let hull_s = hull.max(EPS);
    let g = inter / union_s - (hull - union) / hull_s;
    let loss = 1.0 - g;

    let dg_di = 1.0 / union_s + inter / (union_s * union_s) - 1.0 / hull_s;
    let dg_da = -inter / (union_s * union_s) + 1.0 / hull_s;
    let dg_dc = -union / (hull_s * hull_s);

    // d/d(x0, y0, x1, y1)
    let mut d = [0.0f64; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x0 > tx0 {
            d[0] -= ih * dg_di;
        }
        if x1 < tx1 {
            d[2] += ih * dg_di;
        }
        if y0 > ty0 {
            d[1] -= iw * dg_di;
        }
        if y1 < ty1 {
            d[3] += iw * dg_di;
        }
    }
    let (pw, ph) = (x1 - x0, y1 - y0);
    d[0] -= ph * dg_da;
    d[2] += ph * dg_da;
    d[1] -= pw * dg_da;
    d[3] += pw * dg_da;
    if x0 < tx0 {
        d[0] -= ch * dg_dc;
    }
    if x1 > tx1 {
        d[2] += ch * dg_dc;
    }
    if y0 < ty0 {
        d[1] -= cw * dg_dc;
    }
    if y1 > ty1 {
        d[3] += cw * dg_dc;
    }
    // chain to (cx, cy, w, h) and negate for the loss
    let grad = [
        -(d[0] + d[2]),
        -(d[1] + d[3]),
        -(d[2] - d[0]) / 2.0,
        -(d[3] - d[1]) / 2.0,
    ];
    (loss, grad)
}

pub fn giou_loss_forward_backward<T: Real>(pred: &Matrix<T>, target: &Matrix<T>) -> (f64, Matrix<T>) {
    assert_eq!(pred.cols, 4);
    assert_eq!(pred.shape(), target.shape());
    let mut total = 0.0;
    let mut grad = Matrix::zeros(pred.rows, 4);
    for r in 0..pred.rows {
        let p: [f64; 4] = std::array::from_fn(|k| pred.at(r, k).f64());
        let t: [f64; 4] = std::array::from_fn(|k| target.at(r, k).f64());
        let (l, g) = giou_loss_cell(p, t);
        total += l;
        for (k, gk) in g.iter().enumerate() {
            grad.set(r, k, T::of(*gk));
        }
    }
    (total, grad)
}
