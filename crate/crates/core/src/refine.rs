//! Differentiable score refinement: a small head that sharpens coarse
//! per-class score maps with a 3D max filter across adjacent scales.
//!
//! Per level `s` of the input logit pyramid `x`:
//!
//! ```text
//! coarse  = sigmoid(x)
//! h       = groupnorm(conv3x3_a(x))
//! m       = max_filter_3d(h)            // across the whole pyramid
//! refined = sigmoid(conv3x3_b(x + m))   // single channel
//! out[c]  = coarse[c] * refined         // broadcast over channels
//! ```
//!
//! `backward` computes exact reverse-mode gradients of this composition.
//! The max filter routes its gradient to the first argmax in
//! `(level, row, col)` scan order; bilinear resizing distributes gradient by
//! its interpolation weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pyramid::{
    max_filter_3d_tape, src_coord, FeaturePyramid, FilterParams, Grid, MaxSource,
};

const GN_EPS: f64 = 1e-5;

/// Standard group-norm group count; callers with fewer channels use
/// [`default_groups`].
pub const DEFAULT_GN_GROUPS: usize = 32;

/// Largest divisor of `channels` not exceeding the standard 32 groups.
pub fn default_groups(channels: usize) -> usize {
    (1..=DEFAULT_GN_GROUPS.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Learnable parameters of the refinement head.
#[derive(Clone, Debug)]
pub struct RefineWeights {
    channels: usize,
    /// First 3x3 conv, `[C, C, 3, 3]` as out, in, ky, kx.
    pub conv1: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub gn_scale: Vec<f64>,
    pub gn_shift: Vec<f64>,
    /// Channel groups of the normalization; must divide `channels`.
    pub groups: usize,
    /// Second 3x3 conv, `[1, C, 3, 3]`.
    pub conv2: Vec<f64>,
    pub conv2_bias: f64,
    pub filter: FilterParams,
}

impl RefineWeights {
    pub fn zeros(channels: usize, groups: usize, filter: FilterParams) -> Result<Self> {
        if channels == 0 || groups == 0 || channels % groups != 0 {
            return Err(Error::shape(format!(
                "groups ({groups}) must divide channels ({channels})"
            )));
        }
        Ok(RefineWeights {
            channels,
            conv1: vec![0.0; channels * channels * 9],
            conv1_bias: vec![0.0; channels],
            gn_scale: vec![1.0; channels],
            gn_shift: vec![0.0; channels],
            groups,
            conv2: vec![0.0; channels * 9],
            conv2_bias: 0.0,
            filter,
        })
    }

    /// Randomly initialized weights, uniform in `+-1/sqrt(9 C)`.
    pub fn seeded(channels: usize, groups: usize, filter: FilterParams, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(channels, groups, filter)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = 1.0 / (9.0 * channels as f64).sqrt();
        for v in w.conv1.iter_mut().chain(w.conv2.iter_mut()) {
            *v = rng.random_range(-limit..limit);
        }
        Ok(w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn validate(&self, features: &FeaturePyramid) -> Result<()> {
        let c = self.channels;
        if features.channels() != c {
            return Err(Error::shape(format!(
                "weights built for {c} channels, pyramid has {}",
                features.channels()
            )));
        }
        if self.conv1.len() != c * c * 9
            || self.conv1_bias.len() != c
            || self.gn_scale.len() != c
            || self.gn_shift.len() != c
            || self.conv2.len() != c * 9
        {
            return Err(Error::shape("weight buffers do not match channel count"));
        }
        if self.groups == 0 || c % self.groups != 0 {
            return Err(Error::shape(format!(
                "groups ({}) must divide channels ({c})",
                self.groups
            )));
        }
        Ok(())
    }
}

/// Gradients mirroring [`RefineWeights`] plus the input features.
#[derive(Clone, Debug)]
pub struct RefineGradients {
    pub features: FeaturePyramid,
    pub conv1: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub gn_scale: Vec<f64>,
    pub gn_shift: Vec<f64>,
    pub conv2: Vec<f64>,
    pub conv2_bias: f64,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// 3x3 convolution with zero padding and stride 1.
fn conv3x3(input: &Grid, weights: &[f64], bias: &[f64], out_channels: usize) -> Grid {
    let (c_in, h, w) = (input.channels(), input.height(), input.width());
    let mut out = Grid::zeros(out_channels, h, w);
    for o in 0..out_channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for ci in 0..c_in {
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weights[((o * c_in + ci) * 3 + ky) * 3 + kx]
                                * input.get(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, y, x, acc);
            }
        }
    }
    out
}

/// Scatters conv gradients back onto the input, the kernel and the bias.
fn conv3x3_backward(
    input: &Grid,
    weights: &[f64],
    d_out: &Grid,
    d_input: &mut Grid,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) {
    let (c_in, h, w) = (input.channels(), input.height(), input.width());
    let out_channels = d_out.channels();
    for o in 0..out_channels {
        for y in 0..h {
            for x in 0..w {
                let g = d_out.get(o, y, x);
                if g == 0.0 {
                    continue;
                }
                d_bias[o] += g;
                for ci in 0..c_in {
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let widx = ((o * c_in + ci) * 3 + ky) * 3 + kx;
                            d_input.add(ci, iy as usize, ix as usize, weights[widx] * g);
                            d_weights[widx] += input.get(ci, iy as usize, ix as usize) * g;
                        }
                    }
                }
            }
        }
    }
}

struct GroupStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn group_norm(t: &Grid, groups: usize, scale: &[f64], shift: &[f64]) -> (Grid, GroupStats) {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let per_group = c / groups;
    let n = (per_group * h * w) as f64;
    let mut mean = vec![0.0; groups];
    let mut inv_std = vec![0.0; groups];
    let mut out = Grid::zeros(c, h, w);
    for g in 0..groups {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for ci in g * per_group..(g + 1) * per_group {
            for y in 0..h {
                for x in 0..w {
                    let v = t.get(ci, y, x);
                    sum += v;
                    sum_sq += v * v;
                }
            }
        }
        let mu = sum / n;
        let var = (sum_sq / n - mu * mu).max(0.0);
        let is = 1.0 / (var + GN_EPS).sqrt();
        mean[g] = mu;
        inv_std[g] = is;
        for ci in g * per_group..(g + 1) * per_group {
            for y in 0..h {
                for x in 0..w {
                    let normalized = (t.get(ci, y, x) - mu) * is;
                    out.set(ci, y, x, scale[ci] * normalized + shift[ci]);
                }
            }
        }
    }
    (out, GroupStats { mean, inv_std })
}

#[allow(clippy::too_many_arguments)]
fn group_norm_backward(
    t: &Grid,
    stats: &GroupStats,
    groups: usize,
    scale: &[f64],
    d_h: &Grid,
    d_t: &mut Grid,
    d_scale: &mut [f64],
    d_shift: &mut [f64],
) {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let per_group = c / groups;
    let n = (per_group * h * w) as f64;
    for g in 0..groups {
        let mu = stats.mean[g];
        let is = stats.inv_std[g];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ci in g * per_group..(g + 1) * per_group {
            for y in 0..h {
                for x in 0..w {
                    let xhat = (t.get(ci, y, x) - mu) * is;
                    let dh = d_h.get(ci, y, x);
                    d_scale[ci] += dh * xhat;
                    d_shift[ci] += dh;
                    let dxhat = dh * scale[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
        }
        let mean_dxhat = sum_dxhat / n;
        let mean_dxhat_xhat = sum_dxhat_xhat / n;
        for ci in g * per_group..(g + 1) * per_group {
            for y in 0..h {
                for x in 0..w {
                    let xhat = (t.get(ci, y, x) - mu) * is;
                    let dxhat = d_h.get(ci, y, x) * scale[ci];
                    d_t.add(
                        ci,
                        y,
                        x,
                        is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat),
                    );
                }
            }
        }
    }
}

struct Tape {
    coarse: Vec<Grid>,
    t: Vec<Grid>,
    stats: Vec<GroupStats>,
    h: FeaturePyramid,
    argmax: Vec<Vec<MaxSource>>,
    u: Vec<Grid>,
    refined: Vec<Grid>,
    out: FeaturePyramid,
    min_gap: f64,
}

fn forward_tape(features: &FeaturePyramid, weights: &RefineWeights) -> Result<Tape> {
    weights.validate(features)?;
    let c = weights.channels;

    let mut coarse = Vec::with_capacity(features.len());
    let mut t = Vec::with_capacity(features.len());
    let mut stats = Vec::with_capacity(features.len());
    let mut h_levels = Vec::with_capacity(features.len());
    for s in 0..features.len() {
        let x = features.level(s);
        coarse.push(x.map(sigmoid));
        let ts = conv3x3(x, &weights.conv1, &weights.conv1_bias, c);
        let (hs, st) = group_norm(&ts, weights.groups, &weights.gn_scale, &weights.gn_shift);
        t.push(ts);
        stats.push(st);
        h_levels.push(hs);
    }
    let h = FeaturePyramid::new(h_levels, features.strides().to_vec())?;
    let tape = max_filter_3d_tape(&h, &weights.filter);

    let mut u = Vec::with_capacity(features.len());
    let mut refined = Vec::with_capacity(features.len());
    let mut out_levels = Vec::with_capacity(features.len());
    for s in 0..features.len() {
        let x = features.level(s);
        let m = tape.output.level(s);
        let mut us = x.clone();
        for (uv, mv) in us.values_mut().iter_mut().zip(m.values()) {
            *uv += mv;
        }
        let r = conv3x3(&us, &weights.conv2, &[weights.conv2_bias], 1);
        let rf = r.map(sigmoid);
        let (hgt, wid) = (x.height(), x.width());
        let mut o = Grid::zeros(c, hgt, wid);
        for ci in 0..c {
            for y in 0..hgt {
                for x_ in 0..wid {
                    o.set(ci, y, x_, coarse[s].get(ci, y, x_) * rf.get(0, y, x_));
                }
            }
        }
        u.push(us);
        refined.push(rf);
        out_levels.push(o);
    }
    let out = FeaturePyramid::new(out_levels, features.strides().to_vec())?;

    Ok(Tape {
        coarse,
        t,
        stats,
        h,
        argmax: tape.argmax,
        u,
        refined,
        out,
        min_gap: tape.min_gap,
    })
}

/// Runs the refinement head, producing a score pyramid shaped like the input.
pub fn forward(features: &FeaturePyramid, weights: &RefineWeights) -> Result<FeaturePyramid> {
    Ok(forward_tape(features, weights)?.out)
}

/// Forward pass plus the smallest best-vs-second gap seen inside the max
/// filter; near-zero gaps make finite differencing unreliable.
pub fn forward_diagnostics(
    features: &FeaturePyramid,
    weights: &RefineWeights,
) -> Result<(FeaturePyramid, f64)> {
    let tape = forward_tape(features, weights)?;
    Ok((tape.out, tape.min_gap))
}

/// Exact reverse-mode gradients of [`forward`] with respect to the input
/// features and every weight.
pub fn backward(
    features: &FeaturePyramid,
    weights: &RefineWeights,
    upstream: &FeaturePyramid,
) -> Result<RefineGradients> {
    weights.validate(features)?;
    if upstream.len() != features.len() {
        return Err(Error::shape("upstream pyramid has wrong level count"));
    }
    for s in 0..features.len() {
        let (a, b) = (features.level(s), upstream.level(s));
        if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
            return Err(Error::shape(format!("upstream level {s} has wrong shape")));
        }
    }

    let tape = forward_tape(features, weights)?;
    let c = weights.channels;

    let mut d_features = features.zeros_like();
    let mut d_conv1 = vec![0.0; weights.conv1.len()];
    let mut d_conv1_bias = vec![0.0; c];
    let mut d_gn_scale = vec![0.0; c];
    let mut d_gn_shift = vec![0.0; c];
    let mut d_conv2 = vec![0.0; weights.conv2.len()];
    let mut d_conv2_bias = vec![0.0; 1];

    // Gradient flowing into the max-filter output of each level.
    let mut d_m: Vec<Grid> = Vec::with_capacity(features.len());

    for s in 0..features.len() {
        let x = features.level(s);
        let up = upstream.level(s);
        let (hgt, wid) = (x.height(), x.width());
        let coarse = &tape.coarse[s];
        let refined = &tape.refined[s];

        // out = coarse * refined  (refined broadcast over channels)
        let mut d_refined = Grid::zeros(1, hgt, wid);
        for ci in 0..c {
            for y in 0..hgt {
                for x_ in 0..wid {
                    let g = up.get(ci, y, x_);
                    if g == 0.0 {
                        continue;
                    }
                    let cv = coarse.get(ci, y, x_);
                    let rv = refined.get(0, y, x_);
                    // coarse = sigmoid(x): chain directly into the features
                    d_features
                        .level_mut(s)
                        .add(ci, y, x_, g * rv * cv * (1.0 - cv));
                    d_refined.add(0, y, x_, g * cv);
                }
            }
        }

        // refined = sigmoid(r)
        let mut d_r = Grid::zeros(1, hgt, wid);
        for y in 0..hgt {
            for x_ in 0..wid {
                let rv = refined.get(0, y, x_);
                d_r.set(0, y, x_, d_refined.get(0, y, x_) * rv * (1.0 - rv));
            }
        }

        // r = conv2(u) with u = x + m
        let mut d_u = Grid::zeros(c, hgt, wid);
        conv3x3_backward(
            &tape.u[s],
            &weights.conv2,
            &d_r,
            &mut d_u,
            &mut d_conv2,
            &mut d_conv2_bias,
        );
        for ci in 0..c {
            for y in 0..hgt {
                for x_ in 0..wid {
                    d_features.level_mut(s).add(ci, y, x_, d_u.get(ci, y, x_));
                }
            }
        }
        d_m.push(d_u);
    }

    // Max filter: route each output cell's gradient to its argmax source,
    // through the bilinear resize when the source lives on another level.
    let mut d_h: Vec<Grid> = (0..features.len())
        .map(|s| {
            let g = features.level(s);
            Grid::zeros(c, g.height(), g.width())
        })
        .collect();
    for s in 0..features.len() {
        let (hgt, wid) = (features.level(s).height(), features.level(s).width());
        let mut cursor = 0usize;
        for ci in 0..c {
            for _y in 0..hgt {
                for _x in 0..wid {
                    let g = d_m[s].get(ci, _y, _x);
                    let source = tape.argmax[s][cursor];
                    cursor += 1;
                    if g == 0.0 {
                        continue;
                    }
                    match source {
                        MaxSource::Pad => {}
                        MaxSource::Cell(k, ry, rx) => {
                            if k == s {
                                d_h[s].add(ci, ry, rx, g);
                            } else {
                                let src = tape.h.level(k);
                                let sy = src_coord(ry, src.height(), hgt);
                                let sx = src_coord(rx, src.width(), wid);
                                let y0 = sy.floor();
                                let x0 = sx.floor();
                                let dy = sy - y0;
                                let dx = sx - x0;
                                let clamp = |v: isize, hi: usize| {
                                    v.clamp(0, hi as isize - 1) as usize
                                };
                                let y0c = clamp(y0 as isize, src.height());
                                let y1c = clamp(y0 as isize + 1, src.height());
                                let x0c = clamp(x0 as isize, src.width());
                                let x1c = clamp(x0 as isize + 1, src.width());
                                d_h[k].add(ci, y0c, x0c, g * (1.0 - dy) * (1.0 - dx));
                                d_h[k].add(ci, y0c, x1c, g * (1.0 - dy) * dx);
                                d_h[k].add(ci, y1c, x0c, g * dy * (1.0 - dx));
                                d_h[k].add(ci, y1c, x1c, g * dy * dx);
                            }
                        }
                    }
                }
            }
        }
    }

    // Group norm, then the first conv, back onto the features.
    for s in 0..features.len() {
        let x = features.level(s);
        let mut d_t = Grid::zeros(c, x.height(), x.width());
        group_norm_backward(
            &tape.t[s],
            &tape.stats[s],
            weights.groups,
            &weights.gn_scale,
            &d_h[s],
            &mut d_t,
            &mut d_gn_scale,
            &mut d_gn_shift,
        );
        conv3x3_backward(
            x,
            &weights.conv1,
            &d_t,
            d_features.level_mut(s),
            &mut d_conv1,
            &mut d_conv1_bias,
        );
    }

    Ok(RefineGradients {
        features: d_features,
        conv1: d_conv1,
        conv1_bias: d_conv1_bias,
        gn_scale: d_gn_scale,
        gn_shift: d_gn_shift,
        conv2: d_conv2,
        conv2_bias: d_conv2_bias[0],
    })
}

/// Scalar objective `sum(upstream * forward(features))`, the quantity
/// differentiated by the finite-difference check.
pub fn objective(
    features: &FeaturePyramid,
    weights: &RefineWeights,
    upstream: &FeaturePyramid,
) -> Result<f64> {
    let out = forward(features, weights)?;
    let mut total = 0.0;
    for s in 0..out.len() {
        for (o, u) in out.level(s).values().iter().zip(upstream.level(s).values()) {
            total += o * u;
        }
    }
    Ok(total)
}

/// Outcome of a central finite-difference comparison against [`backward`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err_features: f64,
    pub max_rel_err_weights: f64,
    pub coords_checked: usize,
    /// Smallest max-filter tie gap seen; tiny gaps mean the check is
    /// unreliable and should be skipped.
    pub min_tie_gap: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err_features.max(self.max_rel_err_weights)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences over every feature element and every weight.
pub fn finite_diff_check(
    features: &FeaturePyramid,
    weights: &RefineWeights,
    upstream: &FeaturePyramid,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = backward(features, weights, upstream)?;
    let (_, min_tie_gap) = forward_diagnostics(features, weights)?;
    let mut checked = 0usize;

    let mut max_feat = 0.0f64;
    for s in 0..features.len() {
        for i in 0..features.level(s).values().len() {
            let mut plus = features.clone();
            plus.level_mut(s).values_mut()[i] += step;
            let mut minus = features.clone();
            minus.level_mut(s).values_mut()[i] -= step;
            let fd = (objective(&plus, weights, upstream)?
                - objective(&minus, weights, upstream)?)
                / (2.0 * step);
            max_feat = max_feat.max(rel_err(analytic.features.level(s).values()[i], fd));
            checked += 1;
        }
    }

    let mut max_w = 0.0f64;
    let mut check_weight = |mutate: &dyn Fn(&mut RefineWeights, f64), grad: f64| -> Result<()> {
        let mut plus = weights.clone();
        mutate(&mut plus, step);
        let mut minus = weights.clone();
        mutate(&mut minus, -step);
        let fd = (objective(features, &plus, upstream)? - objective(features, &minus, upstream)?)
            / (2.0 * step);
        max_w = max_w.max(rel_err(grad, fd));
        checked += 1;
        Ok(())
    };

    for i in 0..weights.conv1.len() {
        check_weight(&|w, d| w.conv1[i] += d, analytic.conv1[i])?;
    }
    for i in 0..weights.conv1_bias.len() {
        check_weight(&|w, d| w.conv1_bias[i] += d, analytic.conv1_bias[i])?;
    }
    for i in 0..weights.gn_scale.len() {
        check_weight(&|w, d| w.gn_scale[i] += d, analytic.gn_scale[i])?;
    }
    for i in 0..weights.gn_shift.len() {
        check_weight(&|w, d| w.gn_shift[i] += d, analytic.gn_shift[i])?;
    }
    for i in 0..weights.conv2.len() {
        check_weight(&|w, d| w.conv2[i] += d, analytic.conv2[i])?;
    }
    check_weight(&|w, d| w.conv2_bias += d, analytic.conv2_bias)?;

    Ok(GradCheckReport {
        max_rel_err_features: max_feat,
        max_rel_err_weights: max_w,
        coords_checked: checked,
        min_tie_gap,
    })
}
