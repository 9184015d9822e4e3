//! Weak and strong views of an image.
//!
//! Both pipelines work on channel-major `[0, 1]` floats and standardize at
//! the end. The strong view runs the weak pipeline and then two operations
//! drawn from [`STRONG_OPS`] with random magnitudes.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels-last bytes to channel-major floats in `[0, 1]`.
pub(crate) fn to_chw_unit(img: &[u8], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    for (p, px) in img.chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + p] = v as f32 / 255.0;
        }
    }
    out
}

fn sample_plane(p: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resampling of the window `(y0, x0, side_h, side_w)` to
/// `oh x ow`, optionally mirrored horizontally. Pixel centres sit at `+0.5`.
#[allow(clippy::too_many_arguments)]
fn crop_resize(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    window: (f32, f32, f32, f32),
    oh: usize,
    ow: usize,
    flip: bool,
) -> Vec<f32> {
    let (y0, x0, sh, sw) = window;
    let mut out = Vec::with_capacity(c * oh * ow);
    for p in x.chunks(h * w).take(c) {
        for oy in 0..oh {
            let sy = y0 + (oy as f32 + 0.5) * sh / oh as f32 - 0.5;
            for ox in 0..ow {
                let col = if flip { ow - 1 - ox } else { ox };
                let sx = x0 + (col as f32 + 0.5) * sw / ow as f32 - 0.5;
                out.push(sample_plane(p, h, w, sy, sx));
            }
        }
    }
    out
}

/// Bilinear resize of a channel-major image.
pub fn resize_bilinear(x: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    crop_resize(x, c, h, w, (0.0, 0.0, h as f32, w as f32), oh, ow, false)
}

/// Resizes every image of an NCHW batch to `res x res`.
pub fn resize_batch(batch: &Tensor, res: usize) -> Result<Tensor> {
    let [n, c, h, w] = match batch.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        s => return Err(Error::Dimension(format!("expected an NCHW batch, got {s:?}"))),
    };
    if (h, w) == (res, res) {
        return Ok(batch.clone());
    }
    let mut data = Vec::with_capacity(n * c * res * res);
    for img in batch.data().chunks(c * h * w) {
        data.extend(resize_bilinear(img, c, h, w, res, res));
    }
    Tensor::new(vec![n, c, res, res], data)
}

/// Random choices of the weak pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakParams {
    pub flip: bool,
    /// Crop window `(top, left, height, width)` in source pixels.
    pub crop: (f32, f32, f32, f32),
    pub brightness: f32,
    pub contrast: f32,
}

impl WeakParams {
    /// No flip, full-image crop, no jitter.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            flip: false,
            crop: (0.0, 0.0, h as f32, w as f32),
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    /// Horizontal flip with probability 0.5, a square-aspect crop covering
    /// 70-100% of the area, brightness and contrast factors in `[0.8, 1.2]`.
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let flip = rng.random_bool(0.5);
        let side = rng.random_range(0.7f32..=1.0).sqrt();
        let (ch, cw) = (h as f32 * side, w as f32 * side);
        let top = rng.random_range(0.0..=h as f32 - ch);
        let left = rng.random_range(0.0..=w as f32 - cw);
        Self {
            flip,
            crop: (top, left, ch, cw),
            brightness: rng.random_range(0.8..=1.2),
            contrast: rng.random_range(0.8..=1.2),
        }
    }

    /// Applies the choices to channel-major `[0, 1]` pixels.
    pub fn apply(&self, x: &[f32], c: usize, h: usize, w: usize, res: usize) -> Vec<f32> {
        let mut y = crop_resize(x, c, h, w, self.crop, res, res, self.flip);
        if self.brightness != 1.0 {
            y.iter_mut().for_each(|v| *v = (*v * self.brightness).clamp(0.0, 1.0));
        }
        if self.contrast != 1.0 {
            adjust_contrast(&mut y, self.contrast);
        }
        y
    }
}

fn adjust_contrast(x: &mut [f32], factor: f32) {
    let mean = x.iter().sum::<f32>() / x.len() as f32;
    x.iter_mut().for_each(|v| *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0));
}

fn finish(mut x: Vec<f32>, c: usize, res: usize, norm: &Normalizer) -> Result<Tensor> {
    norm.apply_chw(&mut x, res * res);
    Tensor::new(vec![c, res, res], x)
}

/// Weak view `[C, res, res]` of a channels-last image.
pub fn weak_augment(
    img: &[u8],
    (h, w, c): (usize, usize, usize),
    rng: &mut impl Rng,
    res: usize,
    norm: &Normalizer,
) -> Result<Tensor> {
    let params = WeakParams::sample(rng, h, w);
    let x = params.apply(&to_chw_unit(img, h, w, c), c, h, w, res);
    finish(x, c, res, norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrongOp {
    Posterize,
    Solarize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Contrast,
    Brightness,
    Sharpness,
    Cutout,
}

pub const STRONG_OPS: [StrongOp; 11] = [
    StrongOp::Posterize,
    StrongOp::Solarize,
    StrongOp::Rotate,
    StrongOp::ShearX,
    StrongOp::ShearY,
    StrongOp::TranslateX,
    StrongOp::TranslateY,
    StrongOp::Contrast,
    StrongOp::Brightness,
    StrongOp::Sharpness,
    StrongOp::Cutout,
];

const FILL: f32 = 0.5;

/// Maps every output pixel through `src(y, x)` (source coordinates in
/// pixel-centre units); samples outside the image take the fill value.
fn warp(x: &mut [f32], c: usize, res: usize, src: impl Fn(f32, f32) -> (f32, f32)) {
    let r = res as f32;
    for p in x.chunks_mut(res * res).take(c) {
        let orig = p.to_vec();
        for oy in 0..res {
            for ox in 0..res {
                let (sy, sx) = src(oy as f32, ox as f32);
                p[oy * res + ox] = if sy < -0.5 || sx < -0.5 || sy > r - 0.5 || sx > r - 0.5 {
                    FILL
                } else {
                    sample_plane(&orig, res, res, sy, sx)
                };
            }
        }
    }
}

fn signed(rng: &mut impl Rng, m: f32) -> f32 {
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

impl StrongOp {
    /// Applies the op with magnitude `m` in `[0, 1]`.
    pub fn apply(self, x: &mut [f32], c: usize, res: usize, m: f32, rng: &mut impl Rng) {
        let centre = (res as f32 - 1.0) / 2.0;
        match self {
            StrongOp::Posterize => {
                let bits = 8 - (m * 4.0).round() as u32;
                let step = (1u32 << (8 - bits)) as f32;
                x.iter_mut()
                    .for_each(|v| *v = ((*v * 255.0).round() / step).floor() * step / 255.0);
            }
            StrongOp::Solarize => {
                let threshold = 1.0 - m;
                x.iter_mut().for_each(|v| {
                    if *v >= threshold {
                        *v = 1.0 - *v
                    }
                });
            }
            StrongOp::Rotate => {
                let a = signed(rng, m * 30.0).to_radians();
                let (s, co) = a.sin_cos();
                warp(x, c, res, |y, xx| {
                    let (dy, dx) = (y - centre, xx - centre);
                    (centre + co * dy - s * dx, centre + s * dy + co * dx)
                });
            }
            StrongOp::ShearX => {
                let k = signed(rng, m * 0.3);
                warp(x, c, res, |y, xx| (y, xx + k * (y - centre)));
            }
            StrongOp::ShearY => {
                let k = signed(rng, m * 0.3);
                warp(x, c, res, |y, xx| (y + k * (xx - centre), xx));
            }
            StrongOp::TranslateX => {
                let t = signed(rng, m * 0.3) * res as f32;
                warp(x, c, res, |y, xx| (y, xx - t));
            }
            StrongOp::TranslateY => {
                let t = signed(rng, m * 0.3) * res as f32;
                warp(x, c, res, |y, xx| (y - t, xx));
            }
            StrongOp::Contrast => adjust_contrast(x, 1.0 + signed(rng, m * 0.9)),
            StrongOp::Brightness => {
                let f = 1.0 + signed(rng, m * 0.9);
                x.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
            StrongOp::Sharpness => {
                let f = 1.0 + signed(rng, m * 0.9);
                for p in x.chunks_mut(res * res).take(c) {
                    let orig = p.to_vec();
                    for y in 1..res.saturating_sub(1) {
                        for xx in 1..res - 1 {
                            let mut s = 4.0 * orig[y * res + xx];
                            for (dy, dx) in [(0, 1), (2, 1), (1, 0), (1, 2), (0, 0), (0, 2), (2, 0), (2, 2)] {
                                s += orig[(y + dy - 1) * res + xx + dx - 1];
                            }
                            let smooth = s / 12.0;
                            p[y * res + xx] = (smooth + f * (orig[y * res + xx] - smooth)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            StrongOp::Cutout => {
                let side = ((0.25 * m).sqrt() * res as f32).round() as usize;
                if side == 0 {
                    return;
                }
                let cy = rng.random_range(0..res);
                let cx = rng.random_range(0..res);
                let (y0, x0) = (cy.saturating_sub(side / 2), cx.saturating_sub(side / 2));
                for p in x.chunks_mut(res * res).take(c) {
                    for y in y0..(y0 + side).min(res) {
                        for xx in x0..(x0 + side).min(res) {
                            p[y * res + xx] = FILL;
                        }
                    }
                }
            }
        }
    }
}

/// Strong view: the weak pipeline followed by two random ops.
pub fn strong_augment(
    img: &[u8],
    (h, w, c): (usize, usize, usize),
    rng: &mut impl Rng,
    res: usize,
    norm: &Normalizer,
) -> Result<Tensor> {
    let params = WeakParams::sample(rng, h, w);
    let mut x = params.apply(&to_chw_unit(img, h, w, c), c, h, w, res);
    for _ in 0..2 {
        let op = *STRONG_OPS.choose(rng).unwrap();
        let m = rng.random_range(0.0f32..=1.0);
        op.apply(&mut x, c, res, m, rng);
    }
    finish(x, c, res, norm)
}
