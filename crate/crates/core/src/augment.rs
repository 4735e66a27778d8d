//! Text-configured augmentation pipeline for (patch, mask) training pairs.
//!
//! A pipeline is a list of ops, one per line: `<kind> key=value ...` with
//! `#` comments and blank lines ignored. Geometric ops move patch and mask
//! with the identical sampled transform — bilinear for the patch, nearest
//! neighbor for the mask so it stays {0,1}. Color ops touch only the first
//! three patch channels. Every op consumes a fixed number of RNG draws
//! determined by the pipeline text and patch size alone, so a given seed
//! replays exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::{blur_separable, gaussian_kernel};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rot90K {
    Random,
    Fixed(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorAxis {
    /// Flip left-right (x -> w-1-x).
    H,
    /// Flip top-bottom (y -> h-1-y).
    V,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Rot90 {
        k: Rot90K,
    },
    Mirror {
        axis: MirrorAxis,
        p: f64,
    },
    Elastic {
        alpha: f64,
        sigma: f64,
    },
    Color {
        brightness: f64,
        contrast: f64,
        gray_mix: f64,
    },
}

/// Ordered op list plus the text it was parsed from. Equality compares the
/// ops only, so `parse(render(p)) == p` holds regardless of formatting.
#[derive(Debug, Clone)]
pub struct AugmentPipeline {
    ops: Vec<AugmentOp>,
    source: String,
}

impl PartialEq for AugmentPipeline {
    fn eq(&self, other: &Self) -> bool {
        self.ops == other.ops
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::AugmentParse {
        line,
        msg: msg.into(),
    }
}

/// Splits `key=value` tokens for one op line into (key, value) pairs,
/// rejecting duplicates.
fn parse_kv<'a>(line_no: usize, tokens: &[&'a str]) -> Result<Vec<(&'a str, &'a str)>> {
    let mut out: Vec<(&str, &str)> = Vec::new();
    for tok in tokens {
        let Some((k, v)) = tok.split_once('=') else {
            return Err(parse_err(line_no, format!("malformed token {tok:?}")));
        };
        if k.is_empty() || v.is_empty() {
            return Err(parse_err(line_no, format!("malformed token {tok:?}")));
        }
        if out.iter().any(|(ek, _)| *ek == k) {
            return Err(parse_err(line_no, format!("duplicate key {k:?}")));
        }
        out.push((k, v));
    }
    Ok(out)
}

struct KvReader<'a> {
    line_no: usize,
    pairs: Vec<(&'a str, &'a str)>,
    used: Vec<bool>,
}

impl<'a> KvReader<'a> {
    fn take(&mut self, key: &str) -> Result<&'a str> {
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            if *k == key {
                self.used[i] = true;
                return Ok(v);
            }
        }
        Err(parse_err(self.line_no, format!("missing key {key:?}")))
    }

    fn float(&mut self, key: &str, lo: f64, hi: f64) -> Result<f64> {
        let raw = self.take(key)?;
        let v: f64 = raw
            .parse()
            .map_err(|_| parse_err(self.line_no, format!("bad value for {key:?}")))?;
        if !v.is_finite() || v < lo || v > hi {
            return Err(parse_err(self.line_no, format!("{key} out of range")));
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        for (i, (k, _)) in self.pairs.iter().enumerate() {
            if !self.used[i] {
                return Err(parse_err(self.line_no, format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }
}

fn parse_op(line_no: usize, line: &str) -> Result<AugmentOp> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let kind = tokens[0];
    let pairs = parse_kv(line_no, &tokens[1..])?;
    let used = vec![false; pairs.len()];
    let mut kv = KvReader {
        line_no,
        pairs,
        used,
    };
    let op = match kind {
        "rot90" => {
            let raw = kv.take("k")?;
            let k = if raw == "random" {
                Rot90K::Random
            } else {
                let n: u8 = raw
                    .parse()
                    .map_err(|_| parse_err(line_no, "bad value for \"k\""))?;
                if n > 3 {
                    return Err(parse_err(line_no, "k out of range"));
                }
                Rot90K::Fixed(n)
            };
            AugmentOp::Rot90 { k }
        }
        "mirror" => {
            let axis = match kv.take("axis")? {
                "h" => MirrorAxis::H,
                "v" => MirrorAxis::V,
                "random" => MirrorAxis::Random,
                _ => return Err(parse_err(line_no, "bad value for \"axis\"")),
            };
            let p = kv.float("p", 0.0, 1.0)?;
            AugmentOp::Mirror { axis, p }
        }
        "elastic" => {
            let alpha = kv.float("alpha", 0.0, f64::INFINITY)?;
            let sigma = kv.float("sigma", f64::MIN_POSITIVE, f64::INFINITY)?;
            AugmentOp::Elastic { alpha, sigma }
        }
        "color" => {
            let brightness = kv.float("brightness", 0.0, 1.0)?;
            let contrast = kv.float("contrast", 0.0, 1.0)?;
            let gray_mix = kv.float("gray_mix", 0.0, 1.0)?;
            AugmentOp::Color {
                brightness,
                contrast,
                gray_mix,
            }
        }
        other => return Err(parse_err(line_no, format!("unknown op kind {other:?}"))),
    };
    kv.finish()?;
    Ok(op)
}

impl AugmentPipeline {
    /// Empty pipeline: `apply` is the identity and consumes no RNG.
    pub fn identity() -> Self {
        AugmentPipeline {
            ops: Vec::new(),
            source: String::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            ops.push(parse_op(i + 1, line)?);
        }
        Ok(AugmentPipeline {
            ops,
            source: text.to_string(),
        })
    }

    /// Canonical one-op-per-line text; `parse` of it yields equal ops.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            match op {
                AugmentOp::Rot90 { k } => match k {
                    Rot90K::Random => out.push_str("rot90 k=random\n"),
                    Rot90K::Fixed(n) => out.push_str(&format!("rot90 k={n}\n")),
                },
                AugmentOp::Mirror { axis, p } => {
                    let a = match axis {
                        MirrorAxis::H => "h",
                        MirrorAxis::V => "v",
                        MirrorAxis::Random => "random",
                    };
                    out.push_str(&format!("mirror axis={a} p={p}\n"));
                }
                AugmentOp::Elastic { alpha, sigma } => {
                    out.push_str(&format!("elastic alpha={alpha} sigma={sigma}\n"));
                }
                AugmentOp::Color {
                    brightness,
                    contrast,
                    gray_mix,
                } => {
                    out.push_str(&format!(
                        "color brightness={brightness} contrast={contrast} gray_mix={gray_mix}\n"
                    ));
                }
            }
        }
        out
    }

    pub fn ops(&self) -> &[AugmentOp] {
        &self.ops
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Applies every op in order. Geometric ops transform both rasters
    /// identically; color ops transform the patch only.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        patch: &Raster,
        mask: &Raster,
        rng: &mut R,
    ) -> Result<(Raster, Raster)> {
        if patch.width() != mask.width() || patch.height() != mask.height() {
            return Err(Error::DimensionMismatch(
                "patch and mask dimensions differ".into(),
            ));
        }
        let mut patch = patch.clone();
        let mut mask = mask.clone();
        for op in &self.ops {
            match *op {
                AugmentOp::Rot90 { k } => {
                    let k = match k {
                        Rot90K::Fixed(n) => n as u32,
                        Rot90K::Random => rng.random_range(0..4u32),
                    };
                    for _ in 0..k {
                        patch = rot90_cw(&patch)?;
                        mask = rot90_cw(&mask)?;
                    }
                }
                AugmentOp::Mirror { axis, p } => {
                    let apply = rng.random_bool(p);
                    let axis = match axis {
                        MirrorAxis::Random => {
                            if rng.random_range(0..2u32) == 0 {
                                MirrorAxis::H
                            } else {
                                MirrorAxis::V
                            }
                        }
                        fixed => fixed,
                    };
                    if apply {
                        patch = mirror(&patch, axis)?;
                        mask = mirror(&mask, axis)?;
                    }
                }
                AugmentOp::Elastic { alpha, sigma } => {
                    let (p2, m2) = elastic_transform(&patch, &mask, alpha, sigma, rng)?;
                    patch = p2;
                    mask = m2;
                }
                AugmentOp::Color {
                    brightness,
                    contrast,
                    gray_mix,
                } => {
                    patch = color_jitter(&patch, brightness, contrast, gray_mix, rng)?;
                }
            }
        }
        Ok((patch, mask))
    }
}

/// One clockwise quarter turn; (x, y) lands at (h-1-y, x).
fn rot90_cw(r: &Raster) -> Result<Raster> {
    let (w, h, c) = (r.width(), r.height(), r.channels());
    let src = r.bytes()?;
    let (ow, oh) = (h, w);
    let mut out = vec![0u8; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = (h - 1 - y, x);
            for ch in 0..c {
                out[(oy * ow + ox) * c + ch] = src[(y * w + x) * c + ch];
            }
        }
    }
    Raster::from_bytes(ow, oh, c, out)
}

fn mirror(r: &Raster, axis: MirrorAxis) -> Result<Raster> {
    let (w, h, c) = (r.width(), r.height(), r.channels());
    let src = r.bytes()?;
    let mut out = vec![0u8; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                MirrorAxis::H => (w - 1 - x, y),
                MirrorAxis::V => (x, h - 1 - y),
                MirrorAxis::Random => unreachable!("resolved before use"),
            };
            for ch in 0..c {
                out[(y * w + x) * c + ch] = src[(sy * w + sx) * c + ch];
            }
        }
    }
    Raster::from_bytes(w, h, c, out)
}

/// Backward warp by a smoothed random displacement field. dx and dy are
/// sampled i.i.d. uniform [-1, 1] per pixel, Gaussian-blurred with the
/// given sigma (pixels), independently rescaled to max-abs 1, and scaled by
/// alpha — so alpha is the peak per-axis displacement in pixels. Samples
/// falling outside the patch clamp to the edge.
pub fn elastic_transform<R: Rng + ?Sized>(
    patch: &Raster,
    mask: &Raster,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<(Raster, Raster)> {
    if alpha < 0.0 {
        return Err(Error::invalid("alpha out of range"));
    }
    let (w, h) = (patch.width(), patch.height());
    if mask.width() != w || mask.height() != h {
        return Err(Error::DimensionMismatch(
            "patch and mask dimensions differ".into(),
        ));
    }
    let kernel = gaussian_kernel(sigma)?;
    let mut dx: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut dy: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..=1.0)).collect();
    blur_separable(&mut dx, w, h, &kernel);
    blur_separable(&mut dy, w, h, &kernel);
    for field in [&mut dx, &mut dy] {
        let m = field.iter().fold(0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            for v in field.iter_mut() {
                *v = *v / m * alpha;
            }
        }
    }

    let src = patch.bytes()?;
    let c = patch.channels();
    let mut out = vec![0u8; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + dx[i]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + dy[i]).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let v00 = src[(y0 * w + x0) * c + ch] as f64;
                let v01 = src[(y0 * w + x1) * c + ch] as f64;
                let v10 = src[(y1 * w + x0) * c + ch] as f64;
                let v11 = src[(y1 * w + x1) * c + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
                out[i * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let msrc = mask.bytes()?;
    let mc = mask.channels();
    let mut mout = vec![0u8; w * h * mc];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + dx[i]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + dy[i]).clamp(0.0, (h - 1) as f64);
            let nx = sx.round() as usize;
            let ny = sy.round() as usize;
            for ch in 0..mc {
                mout[i * mc + ch] = msrc[(ny * w + nx) * mc + ch];
            }
        }
    }
    Ok((
        Raster::from_bytes(w, h, c, out)?,
        Raster::from_bytes(w, h, mc, mout)?,
    ))
}

/// Per-pixel jitter: v' = clamp((1-g)(c(v-128)+128 + 255b) + g*luma).
#[inline]
fn jitter_value(v: f64, b: f64, c: f64, g: f64, luma: f64) -> u8 {
    let adjusted = c * (v - 128.0) + 128.0 + 255.0 * b;
    ((1.0 - g) * adjusted + g * luma).round().clamp(0.0, 255.0) as u8
}

/// Samples b in [-brightness, +brightness], c in [1-contrast, 1+contrast],
/// g in [0, gray_mix], then maps the first three channels; any further
/// channels pass through untouched. Luma is 0.299 R + 0.587 G + 0.114 B of
/// the original pixel.
pub fn color_jitter<R: Rng + ?Sized>(
    patch: &Raster,
    brightness: f64,
    contrast: f64,
    gray_mix: f64,
    rng: &mut R,
) -> Result<Raster> {
    let b = rng.random_range(-brightness..=brightness);
    let c = rng.random_range((1.0 - contrast)..=(1.0 + contrast));
    let g = rng.random_range(0.0..=gray_mix);
    let (w, h, ch) = (patch.width(), patch.height(), patch.channels());
    let src = patch.bytes()?;
    let mut out = src.to_vec();
    let color_ch = ch.min(3);
    for px in 0..w * h {
        let base = px * ch;
        let luma = if ch >= 3 {
            0.299 * src[base] as f64 + 0.587 * src[base + 1] as f64 + 0.114 * src[base + 2] as f64
        } else {
            // Not a color image; gray already equals the channel itself.
            src[base] as f64
        };
        for k in 0..color_ch {
            out[base + k] = jitter_value(src[base + k] as f64, b, c, g, luma);
        }
    }
    Raster::from_bytes(w, h, ch, out)
}
