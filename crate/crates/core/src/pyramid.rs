//! Multi-scale feature grids, cross-scale bilinear gathering and the 3D max
//! filter over a scale/space neighbour tube.

use crate::error::{Error, Result};

/// Dense per-level feature map, row-major `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "grid {channels}x{height}x{width} wants {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid values must be finite"));
        }
        Ok(Grid {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Grid {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.values[i] = v;
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.values[i] += v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Ordered stack of grids with strictly doubling strides, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Grid>,
    strides: Vec<f64>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Grid>, strides: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid must have at least one level"));
        }
        if levels.len() != strides.len() {
            return Err(Error::shape(format!(
                "{} levels but {} strides",
                levels.len(),
                strides.len()
            )));
        }
        let channels = levels[0].channels();
        if levels.iter().any(|g| g.channels() != channels) {
            return Err(Error::shape("all levels must share a channel count"));
        }
        if strides[0] <= 0.0 {
            return Err(Error::invalid("strides must be positive"));
        }
        for w in strides.windows(2) {
            if (w[1] / w[0] - 2.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "strides must strictly double, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(FeaturePyramid { levels, strides })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn level(&self, s: usize) -> &Grid {
        &self.levels[s]
    }

    pub fn level_mut(&mut self, s: usize) -> &mut Grid {
        &mut self.levels[s]
    }

    pub fn levels(&self) -> &[Grid] {
        &self.levels
    }

    pub fn strides(&self) -> &[f64] {
        &self.strides
    }

    pub fn stride(&self, s: usize) -> f64 {
        self.strides[s]
    }

    /// Same-shaped pyramid with all values replaced by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|g| g.map(f)).collect(),
            strides: self.strides.clone(),
        }
    }

    pub fn zeros_like(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|g| Grid::zeros(g.channels(), g.height(), g.width()))
                .collect(),
            strides: self.strides.clone(),
        }
    }
}

/// Neighbour-tube shape of the 3D max filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterParams {
    /// Scale span: `tau / 2` levels on each side, clamped at pyramid ends.
    pub tau: usize,
    /// Odd spatial window width.
    pub phi: usize,
}

impl FilterParams {
    pub fn new(tau: usize, phi: usize) -> Result<Self> {
        if phi % 2 == 0 || phi == 0 {
            return Err(Error::invalid(format!("phi must be odd, got {phi}")));
        }
        if tau % 2 != 0 {
            return Err(Error::invalid(format!("tau must be even, got {tau}")));
        }
        Ok(FilterParams { tau, phi })
    }

    /// Levels `[s - tau/2, s + tau/2]` clamped into `[0, len)`.
    pub fn tube_levels(&self, s: usize, len: usize) -> std::ops::RangeInclusive<usize> {
        let half = self.tau / 2;
        let lo = s.saturating_sub(half);
        let hi = (s + half).min(len - 1);
        lo..=hi
    }
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams { tau: 2, phi: 3 }
    }
}

/// One bilinear sample with half-pixel-center alignment and edge clamping.
///
/// Written as two nested lerps; callers that need bit-exact agreement must
/// evaluate the same form.
#[inline]
pub fn bilinear_sample(src: &Grid, c: usize, sy: f64, sx: f64) -> f64 {
    let h = src.height() as isize;
    let w = src.width() as isize;
    let y0 = sy.floor();
    let x0 = sx.floor();
    let dy = sy - y0;
    let dx = sx - x0;
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let y0c = clamp(y0 as isize, h);
    let y1c = clamp(y0 as isize + 1, h);
    let x0c = clamp(x0 as isize, w);
    let x1c = clamp(x0 as isize + 1, w);
    let v00 = src.get(c, y0c, x0c);
    let v01 = src.get(c, y0c, x1c);
    let v10 = src.get(c, y1c, x0c);
    let v11 = src.get(c, y1c, x1c);
    let top = v00 + dx * (v01 - v00);
    let bot = v10 + dx * (v11 - v10);
    top + dy * (bot - top)
}

/// Source coordinate of destination pixel `i` under half-pixel alignment.
#[inline]
pub fn src_coord(dst_i: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst_i as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5
}

/// Bilinear resize with half-pixel-center sampling. Constant grids map to
/// constant grids; same-size resize is the identity.
pub fn bilinear_resize(src: &Grid, dst_h: usize, dst_w: usize) -> Result<Grid> {
    if src.is_empty() {
        return Err(Error::invalid("cannot resize an empty grid"));
    }
    if dst_h == 0 || dst_w == 0 {
        return Err(Error::invalid("destination size must be at least 1x1"));
    }
    let mut out = Grid::zeros(src.channels(), dst_h, dst_w);
    for c in 0..src.channels() {
        for y in 0..dst_h {
            let sy = src_coord(y, src.height(), dst_h);
            for x in 0..dst_w {
                let sx = src_coord(x, src.width(), dst_w);
                out.set(c, y, x, bilinear_sample(src, c, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Where a 3D max came from: a cell of a (resized) tube level, or the
/// zero padding outside the spatial window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxSource {
    /// `(tube level, row, col)` in the coordinates of the output level.
    Cell(usize, usize, usize),
    Pad,
}

pub(crate) struct MaxFilterTape {
    pub output: FeaturePyramid,
    /// Per level: argmax source of every `(channel, row, col)` output cell,
    /// in the same row-major order as grid values.
    pub argmax: Vec<Vec<MaxSource>>,
    /// Smallest gap between the best and second-best tube value over all
    /// output cells; infinite when every tube is a singleton.
    pub min_gap: f64,
}

/// 3D max filter with argmax bookkeeping for the backward pass.
///
/// For each level the tube levels are bilinearly resized to that level's
/// resolution, then every output cell takes the max over the `phi x phi`
/// window across tube levels. Positions outside the grid contribute a single
/// shared padding value of zero, which competes after the in-bounds values.
/// Ties resolve to the first in-bounds source in `(level, row, col)` scan
/// order.
pub(crate) fn max_filter_3d_tape(p: &FeaturePyramid, params: &FilterParams) -> MaxFilterTape {
    let half = (params.phi / 2) as isize;
    let mut out_levels = Vec::with_capacity(p.len());
    let mut argmax = Vec::with_capacity(p.len());
    let mut min_gap = f64::INFINITY;

    for s in 0..p.len() {
        let base = p.level(s);
        let (h, w) = (base.height(), base.width());
        let tube: Vec<usize> = params.tube_levels(s, p.len()).collect();
        let resized: Vec<Grid> = tube
            .iter()
            .map(|&k| {
                if k == s {
                    p.level(k).clone()
                } else {
                    bilinear_resize(p.level(k), h, w).expect("pyramid levels are non-empty")
                }
            })
            .collect();

        let mut out = Grid::zeros(base.channels(), h, w);
        let mut arg = vec![MaxSource::Pad; base.channels() * h * w];
        let mut cursor = 0usize;
        for c in 0..base.channels() {
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    let mut source = MaxSource::Pad;
                    let mut has_pad = false;
                    for (ti, grid) in resized.iter().enumerate() {
                        for wy in -half..=half {
                            for wx in -half..=half {
                                let yy = y as isize + wy;
                                let xx = x as isize + wx;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    has_pad = true;
                                    continue;
                                }
                                let v = grid.get(c, yy as usize, xx as usize);
                                if v > best {
                                    second = best;
                                    best = v;
                                    source = MaxSource::Cell(tube[ti], yy as usize, xx as usize);
                                } else if v > second {
                                    second = v;
                                }
                            }
                        }
                    }
                    // All out-of-window positions share one constant padding
                    // value, so padding enters the competition exactly once.
                    if has_pad {
                        if 0.0 > best {
                            second = best;
                            best = 0.0;
                            source = MaxSource::Pad;
                        } else if 0.0 > second {
                            second = 0.0;
                        }
                    }
                    if second.is_finite() && best - second < min_gap {
                        min_gap = best - second;
                    }
                    out.set(c, y, x, best);
                    arg[cursor] = source;
                    cursor += 1;
                }
            }
        }
        out_levels.push(out);
        argmax.push(arg);
    }

    MaxFilterTape {
        output: FeaturePyramid {
            levels: out_levels,
            strides: p.strides().to_vec(),
        },
        argmax,
        min_gap,
    }
}

/// Max over a 3D neighbour tube spanning `tau` adjacent scales and a
/// `phi x phi` spatial window, per channel.
pub fn max_filter_3d(p: &FeaturePyramid, params: &FilterParams) -> FeaturePyramid {
    max_filter_3d_tape(p, params).output
}

/// Hard duplicate removal: keep a value only where it equals its own 3D
/// tube max, zero elsewhere.
pub fn hard_max_filter(p: &FeaturePyramid, params: &FilterParams) -> FeaturePyramid {
    let filtered = max_filter_3d(p, params);
    let mut out = p.zeros_like();
    for s in 0..p.len() {
        let src = p.level(s);
        let flt = filtered.level(s);
        let dst = out.level_mut(s);
        for c in 0..src.channels() {
            for y in 0..src.height() {
                for x in 0..src.width() {
                    let v = src.get(c, y, x);
                    if v == flt.get(c, y, x) {
                        dst.set(c, y, x, v);
                    }
                }
            }
        }
    }
    out
}
