//! Deterministic synthetic slide generator with exact ground truth.
//!
//! Slides are rasterized once at 0.5 mpp and downsampled to the coarser
//! levels, so every level is a pure function of the parameters and seed.
//! Each slide carries:
//!
//! * an H&E-like RGB rendering (stroma texture, pale benign glands with a
//!   dark rim ring, saturated rimless cancer glands, and small ambiguous
//!   glands whose class is only visible from neighborhood context),
//! * immunofluorescence channels (epithelial interior signal, punctate
//!   basal dots that concentrate on benign rims, an AMACR channel that is
//!   deliberately noisier and occasionally lights up spuriously), and
//! * exact masks: "wob" (glandular tissue without basal cells),
//!   "idcp_override" (cancer glands that retain their basal rim and are
//!   labeled positive by fiat), and "tissue".
//!
//! The immunofluorescence amplitudes below are calibrated against the
//! default annotation pipeline (sigma 15 um, agreement band 0.25,
//! threshold 0.5) so that the generated-mask boundary lands on the gland
//! edge; see the constants commented inline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{downsample2, downsample2_mask, Raster};
use crate::slide::{save_slide, slide_dir, ChannelRole, Level, MaskKind, Slide};

/// Pyramid resolutions every generated slide carries, finest first.
pub const LEVEL_MPPS: [f64; 3] = [0.5, 1.0, 2.0];

/// Channel order in every generated slide.
pub const CHANNELS: usize = 7;

const MPP0: f64 = 0.5;

// --- Immunofluorescence calibration ------------------------------------
// Unit-amplitude constants, chosen so the default annotation parameters
// reproduce the geometric gland boundary:
// * epithelial interior level; after a 15 um blur a gland interior sits
//   near 0.5 * E0 at the edge and ~m0 * E0 at the center,
const EPITHELIAL_LEVEL: f64 = 0.25;
// * AMACR is rendered at twice the epithelial level inside cancer glands,
//   which pins the AMACR ratio heatmap near 2/3 over the whole gland,
const AMACR_MAX: f64 = 0.5;
// * rim dot duty cycle: blurred rim contribution pushes benign centers
//   below the binarization threshold while keeping the raw rim annulus
//   mean far above 5x the wash mean (the wash density itself lives in
//   NoiseAmplitudes::basal_wash; the basal ratio crosses the agreement
//   band where the blurred epithelial field passes ~0.71x the wash).
const RIM_DUTY: f64 = 0.8;
// Benign glands that light up in AMACR anyway (the channel is unreliable).
const SPURIOUS_AMACR_FRAC: f64 = 0.2;
const SPURIOUS_AMACR_LEVEL: f64 = 0.5;
const DAPI_BYTE: u8 = 60;

// --- Geometry ------------------------------------------------------------
/// Placement jitter inside a grid cell, micrometers.
const JITTER_UM: f64 = 12.0;
/// Guaranteed edge-to-edge clearance between grid glands, micrometers
/// (2.5 blur sigmas, so neighboring rims do not leak into a gland).
const MIN_GAP_UM: f64 = 38.0;
/// Extra clearance between a gland and the tissue boundary so the basal
/// wash is uniform over the annotation kernel's support.
const WASH_MARGIN_UM: f64 = 30.0;
/// Ambiguous-gland radius range, micrometers.
const AMBIG_RADIUS_UM: (f64, f64) = (3.5, 4.5);
const PLACEMENT_ROUNDS: usize = 5;

// --- RGB palette ---------------------------------------------------------
const BG_TINT: [f64; 3] = [242.0, 243.0, 245.0];
const STROMA_A: [f64; 3] = [225.0, 183.0, 205.0];
const STROMA_B: [f64; 3] = [211.0, 168.0, 186.0];
const BENIGN_TINT: [f64; 3] = [236.0, 214.0, 228.0];
const WOB_TINT: [f64; 3] = [176.0, 96.0, 152.0];
const RING_TINT: [f64; 3] = [94.0, 64.0, 122.0];
/// Hard-subpopulation tint: WOB lerped toward benign, a deliberately
/// subtle positive so error-weighted sampling has something to find.
const HARD_LERP: f64 = 0.55;
/// Value-noise texture amplitude (bytes) on stroma and glands.
const VALUE_NOISE_AMP: f64 = 9.0;
const VALUE_NOISE_PITCH_PX: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueDomain {
    /// Large rounded tissue blob, the default.
    ProstatectomyA,
    /// Narrow horizontal strip with a shifted stroma tone.
    BiopsyB,
}

/// Per-channel noise amplitudes. RGB noise is in byte units; epithelial
/// noise is additive in unit-intensity units; the basal channel's noise is
/// its tissue-wide punctate dot density (per pixel at 0.5 mpp); AMACR noise
/// is multiplicative (relative), deliberately the largest of the set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseAmplitudes {
    pub rgb: f64,
    pub epithelial: f64,
    pub basal_wash: f64,
    pub amacr_mult: f64,
}

impl Default for NoiseAmplitudes {
    fn default() -> Self {
        NoiseAmplitudes {
            rgb: 6.0,
            epithelial: 0.02,
            basal_wash: 0.11,
            amacr_mult: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width_um: f64,
    pub height_um: f64,
    /// Inclusive range for the number of full-size glands.
    pub gland_count: (usize, usize),
    /// Probability that a full-size gland keeps its basal rim (benign).
    pub rim_probability: f64,
    /// Probability that a rimmed gland is IDC-P (cancer inside a duct).
    pub idcp_probability: f64,
    pub noise: NoiseAmplitudes,
    /// Length scale of the neighborhood cue that disambiguates small
    /// glands; must fit the compound head's receptive field (<= 20 um).
    pub context_cue_scale_um: f64,
    pub seed: u64,
    pub domain: TissueDomain,
    /// Small glands attached to a host gland (context reads "crowded").
    pub ambiguous_attached: usize,
    /// Small glands far from everything (context reads "isolated").
    pub ambiguous_isolated: usize,
    /// Fraction of rimless cancer glands rendered with the subtle tint.
    pub hard_fraction: f64,
    /// Semi-axis range for full-size glands, micrometers.
    pub gland_radius_um: (f64, f64),
    pub rim_thickness_um: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width_um: 1000.0,
            height_um: 750.0,
            gland_count: (24, 30),
            rim_probability: 0.6,
            idcp_probability: 0.06,
            noise: NoiseAmplitudes::default(),
            context_cue_scale_um: 10.0,
            seed: 0,
            domain: TissueDomain::ProstatectomyA,
            ambiguous_attached: 3,
            ambiguous_isolated: 3,
            hard_fraction: 0.25,
            gland_radius_um: (17.0, 20.0),
            rim_thickness_um: 3.5,
        }
    }
}

impl SynthParams {
    /// Smaller slides with many ambiguous glands, for measuring how much
    /// neighborhood context is worth.
    pub fn context_benchmark(seed: u64) -> Self {
        SynthParams {
            width_um: 600.0,
            height_um: 450.0,
            gland_count: (9, 12),
            ambiguous_attached: 8,
            ambiguous_isolated: 8,
            gland_radius_um: (14.0, 18.0),
            seed,
            ..SynthParams::default()
        }
    }

    /// Narrow strips with a shifted stroma tone and smaller glands.
    pub fn biopsy(seed: u64) -> Self {
        SynthParams {
            width_um: 700.0,
            height_um: 400.0,
            gland_count: (7, 10),
            domain: TissueDomain::BiopsyB,
            gland_radius_um: (15.0, 19.0),
            ambiguous_attached: 2,
            ambiguous_isolated: 2,
            noise: NoiseAmplitudes {
                rgb: 8.0,
                ..NoiseAmplitudes::default()
            },
            seed,
            ..SynthParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
            Ok(())
        };
        prob("rim_probability", self.rim_probability)?;
        prob("idcp_probability", self.idcp_probability)?;
        prob("hard_fraction", self.hard_fraction)?;
        if !(self.width_um > 0.0 && self.height_um > 0.0) {
            return Err(Error::InvalidConfig("slide dimensions must be positive".into()));
        }
        if !(self.context_cue_scale_um > 0.0 && self.context_cue_scale_um <= 20.0) {
            return Err(Error::InvalidConfig(format!(
                "context_cue_scale_um must lie in (0, 20], got {}",
                self.context_cue_scale_um
            )));
        }
        let (lo, hi) = self.gland_radius_um;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig("bad gland radius range".into()));
        }
        if self.gland_count.0 > self.gland_count.1 || self.gland_count.0 == 0 {
            return Err(Error::InvalidConfig("bad gland count range".into()));
        }
        if !(self.rim_thickness_um > 0.0) {
            return Err(Error::InvalidConfig("rim thickness must be positive".into()));
        }
        if !(self.noise.rgb >= 0.0 && self.noise.epithelial >= 0.0 && self.noise.amacr_mult >= 0.0)
        {
            return Err(Error::InvalidConfig("noise amplitudes must be >= 0".into()));
        }
        prob("noise.basal_wash", self.noise.basal_wash)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlandSpec {
    pub center_um: (f64, f64),
    /// Ellipse semi-axes, micrometers.
    pub radii_um: (f64, f64),
    pub rotation: f64,
    pub has_basal_rim: bool,
    pub rim_thickness_um: f64,
    pub is_idcp: bool,
    pub amacr_level: f64,
}

impl GlandSpec {
    /// Ground-truth label: glandular tissue without basal cells, with
    /// IDC-P included by definition.
    pub fn is_wob(&self) -> bool {
        !self.has_basal_rim || self.is_idcp
    }

    /// Elliptical radius of a point: <= 1 inside the gland.
    pub fn rho(&self, x_um: f64, y_um: f64) -> f64 {
        let dx = x_um - self.center_um.0;
        let dy = y_um - self.center_um.1;
        let (s, c) = self.rotation.sin_cos();
        let u = (c * dx + s * dy) / self.radii_um.0;
        let v = (-s * dx + c * dy) / self.radii_um.1;
        (u * u + v * v).sqrt()
    }

    pub fn contains(&self, x_um: f64, y_um: f64) -> bool {
        self.rho(x_um, y_um) <= 1.0
    }

    fn mean_radius(&self) -> f64 {
        (self.radii_um.0 + self.radii_um.1) / 2.0
    }

    fn max_radius(&self) -> f64 {
        self.radii_um.0.max(self.radii_um.1)
    }

    /// Basal rim band: a thin shell just outside the interior.
    fn in_rim(&self, x_um: f64, y_um: f64) -> bool {
        if !self.has_basal_rim {
            return false;
        }
        let rho = self.rho(x_um, y_um);
        rho > 1.0 && rho <= 1.0 + self.rim_thickness_um / self.mean_radius()
    }
}

/// How a gland is drawn in RGB; not part of the geometric ground truth.
#[derive(Debug, Clone, Copy)]
pub struct RenderStyle {
    /// Rendered with the attenuated cancer tint.
    pub hard: bool,
    /// Small gland drawn with the full cancer tint and no rim ring no
    /// matter its true class; only neighborhood context disambiguates.
    pub ambiguous: bool,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn sub_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Is the point inside the tissue region (glass margin excluded)?
fn tissue_contains(params: &SynthParams, x_um: f64, y_um: f64) -> bool {
    tissue_inset_contains(params, x_um, y_um, 0.0)
}

/// Tissue test with the boundary pulled inward by `inset` micrometers.
fn tissue_inset_contains(params: &SynthParams, x_um: f64, y_um: f64, inset: f64) -> bool {
    let (w, h) = (params.width_um, params.height_um);
    match params.domain {
        TissueDomain::ProstatectomyA => {
            let ax = 0.46 * w - inset;
            let ay = 0.46 * h - inset;
            if ax <= 0.0 || ay <= 0.0 {
                return false;
            }
            let u = (x_um - w / 2.0) / ax;
            let v = (y_um - h / 2.0) / ay;
            u.powi(4) + v.powi(4) <= 1.0
        }
        TissueDomain::BiopsyB => {
            let half = 0.33 * h - inset;
            let margin_x = 0.04 * w + inset;
            half > 0.0
                && (y_um - h / 2.0).abs() <= half
                && x_um >= margin_x
                && x_um <= w - margin_x
        }
    }
}

struct Placement {
    specs: Vec<GlandSpec>,
    styles: Vec<RenderStyle>,
}

fn place_glands(params: &SynthParams) -> Result<Placement> {
    let mut rng = sub_rng(params.seed, 1);
    let (r_lo, r_hi) = params.gland_radius_um;
    let pitch = 2.0 * r_hi + 2.0 * JITTER_UM + MIN_GAP_UM;
    let margin = r_hi + JITTER_UM + params.rim_thickness_um + WASH_MARGIN_UM;

    let cols = (params.width_um / pitch).floor() as usize;
    let rows = (params.height_um / pitch).floor() as usize;
    let mut cells = Vec::new();
    for j in 0..rows {
        for i in 0..cols {
            let cx = (i as f64 + 0.5) * pitch;
            let cy = (j as f64 + 0.5) * pitch;
            if tissue_inset_contains(params, cx, cy, margin) {
                cells.push((cx, cy));
            }
        }
    }

    let count = rng.random_range(params.gland_count.0..=params.gland_count.1);
    let mut last_err = format!(
        "gland placement failed: slide has room for {} glands, {count} requested",
        cells.len()
    );
    'rounds: for _ in 0..PLACEMENT_ROUNDS {
        if count > cells.len() {
            break; // retrying cannot create more sites
        }
        let mut order = cells.clone();
        order.shuffle(&mut rng);
        let mut specs: Vec<GlandSpec> = Vec::with_capacity(count);
        let mut styles = Vec::with_capacity(count);
        for &(cx, cy) in order.iter().take(count) {
            // Fixed draw count per gland keeps the stream stable.
            let jx = rng.random_range(-JITTER_UM..=JITTER_UM);
            let jy = rng.random_range(-JITTER_UM..=JITTER_UM);
            let rx = rng.random_range(r_lo..=r_hi);
            let ry = rng.random_range(r_lo..=r_hi);
            let rot = rng.random_range(0.0..std::f64::consts::TAU);
            let rim_u: f64 = rng.random();
            let idcp_u: f64 = rng.random();
            let spurious_u: f64 = rng.random();
            let hard_u: f64 = rng.random();

            let has_basal_rim = rim_u < params.rim_probability;
            let is_idcp = has_basal_rim && idcp_u < params.idcp_probability;
            let wob = !has_basal_rim || is_idcp;
            let amacr_level = if wob {
                1.0
            } else if spurious_u < SPURIOUS_AMACR_FRAC {
                SPURIOUS_AMACR_LEVEL
            } else {
                0.0
            };
            specs.push(GlandSpec {
                center_um: (cx + jx, cy + jy),
                radii_um: (rx, ry),
                rotation: rot,
                has_basal_rim,
                rim_thickness_um: params.rim_thickness_um,
                is_idcp,
                amacr_level,
            });
            styles.push(RenderStyle {
                hard: wob && !is_idcp && hard_u < params.hard_fraction,
                ambiguous: false,
            });
        }
        // The grid guarantees clearance; verify anyway.
        for i in 0..specs.len() {
            for j in 0..i {
                let (a, b) = (&specs[i], &specs[j]);
                let d = ((a.center_um.0 - b.center_um.0).powi(2)
                    + (a.center_um.1 - b.center_um.1).powi(2))
                .sqrt();
                if d < a.max_radius() + b.max_radius() + MIN_GAP_UM - 1e-9 {
                    last_err = "gland placement failed: overlapping glands".into();
                    continue 'rounds;
                }
            }
        }
        return finish_placement(params, &mut rng, specs, styles);
    }
    Err(Error::invalid(format!(
        "{last_err} (after {PLACEMENT_ROUNDS} rounds)"
    )))
}

/// Adds the small ambiguous glands. Attached ones hug a host gland and are
/// mostly rimless (cancer); isolated ones are mostly rimmed (benign); both
/// rules collapse to certainty when rim_probability is 0 or 1 so the
/// trivial-parameter contracts still hold.
fn finish_placement(
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
    mut specs: Vec<GlandSpec>,
    mut styles: Vec<RenderStyle>,
) -> Result<Placement> {
    let n_full = specs.len();
    let cue = params.context_cue_scale_um;
    let p = params.rim_probability;
    let attached_rim_p = 1.0 - (1.0 - p).powf(0.25);
    let isolated_rim_p = p.powf(0.25);

    let push_ambiguous = |specs: &mut Vec<GlandSpec>,
                              styles: &mut Vec<RenderStyle>,
                              rng: &mut ChaCha8Rng,
                              attached: bool|
     -> Result<()> {
        for attempt in 0.. {
            if attempt >= 80 {
                return Err(Error::invalid(
                    "gland placement failed: no room for an ambiguous gland \
                     (after 80 retries)",
                ));
            }
            let r_amb = rng.random_range(AMBIG_RADIUS_UM.0..=AMBIG_RADIUS_UM.1);
            let rim_u: f64 = rng.random();
            let center = if attached {
                if n_full == 0 {
                    return Err(Error::invalid(
                        "gland placement failed: attached ambiguous glands need \
                         at least one full-size gland",
                    ));
                }
                let host = &specs[rng.random_range(0..n_full)];
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let gap = cue * rng.random_range(0.4..0.5);
                // Point on the host boundary plus its outward normal.
                let (s, c) = host.rotation.sin_cos();
                let (bx, by) = (host.radii_um.0 * phi.cos(), host.radii_um.1 * phi.sin());
                let px = host.center_um.0 + c * bx - s * by;
                let py = host.center_um.1 + s * bx + c * by;
                let (nx, ny) = (phi.cos() / host.radii_um.0, phi.sin() / host.radii_um.1);
                let (gx, gy) = (c * nx - s * ny, s * nx + c * ny);
                let norm = (gx * gx + gy * gy).sqrt();
                (px + gx / norm * (gap + r_amb), py + gy / norm * (gap + r_amb))
            } else {
                (
                    rng.random_range(0.0..params.width_um),
                    rng.random_range(0.0..params.height_um),
                )
            };
            if !tissue_inset_contains(params, center.0, center.1, r_amb + 6.0) {
                continue;
            }
            let mut ok = true;
            let mut nearest_full = f64::INFINITY;
            for (k, g) in specs.iter().enumerate() {
                let d = ((center.0 - g.center_um.0).powi(2)
                    + (center.1 - g.center_um.1).powi(2))
                .sqrt()
                    - g.max_radius()
                    - r_amb;
                if k < n_full {
                    nearest_full = nearest_full.min(d);
                }
                // Hard overlap with anything is rejected. The attached
                // host itself sits at a positive gap by construction, but
                // the gap is measured along the boundary normal, so accept
                // any clearly-positive clearance from a full-size gland.
                if d < 2.0 && !(attached && k < n_full && d > 0.3 * cue) {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            if attached {
                // The cue must be unambiguous: exactly one close neighbor.
                if !(nearest_full <= 0.5 * cue) {
                    continue;
                }
            } else if nearest_full < 3.0 * cue {
                continue;
            }
            let rim_p = if attached { attached_rim_p } else { isolated_rim_p };
            let has_basal_rim = rim_u < rim_p;
            specs.push(GlandSpec {
                center_um: center,
                radii_um: (r_amb, r_amb),
                rotation: 0.0,
                has_basal_rim,
                rim_thickness_um: params.rim_thickness_um.min(0.6 * r_amb),
                is_idcp: false,
                amacr_level: if has_basal_rim { 0.0 } else { 1.0 },
            });
            styles.push(RenderStyle {
                hard: false,
                ambiguous: true,
            });
            return Ok(());
        }
        unreachable!()
    };

    for _ in 0..params.ambiguous_attached {
        push_ambiguous(&mut specs, &mut styles, rng, true)?;
    }
    for _ in 0..params.ambiguous_isolated {
        push_ambiguous(&mut specs, &mut styles, rng, false)?;
    }
    Ok(Placement { specs, styles })
}

/// Coarse random lattice interpolated bilinearly: cheap band-limited
/// texture so stroma is not flat.
struct ValueNoise {
    grid: Vec<f64>,
    gw: usize,
}

impl ValueNoise {
    fn new(seed: u64, w: usize, h: usize) -> Self {
        let gw = w / VALUE_NOISE_PITCH_PX + 2;
        let gh = h / VALUE_NOISE_PITCH_PX + 2;
        let mut rng = sub_rng(seed, 2);
        let grid = (0..gw * gh).map(|_| rng.random_range(-1.0..=1.0)).collect();
        ValueNoise { grid, gw }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let p = VALUE_NOISE_PITCH_PX;
        let (gx, gy) = (x / p, y / p);
        let (fx, fy) = ((x % p) as f64 / p as f64, (y % p) as f64 / p as f64);
        let i = gy * self.gw + gx;
        let (a, b) = (self.grid[i], self.grid[i + 1]);
        let (c, d) = (self.grid[i + self.gw], self.grid[i + self.gw + 1]);
        a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
    }
}

fn px_to_um(p: usize) -> f64 {
    (p as f64 + 0.5) * MPP0
}

fn unit_to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn render_slide(params: &SynthParams, placement: &Placement, id: &str) -> Result<Slide> {
    let w = (params.width_um / MPP0).round() as usize;
    let h = (params.height_um / MPP0).round() as usize;
    let mut data = vec![0u8; w * h * CHANNELS];
    let vn = ValueNoise::new(params.seed, w, h);
    let stroma = match params.domain {
        TissueDomain::ProstatectomyA => STROMA_A,
        TissueDomain::BiopsyB => STROMA_B,
    };

    // Background, stroma, DAPI placeholder, and the basal wash.
    let mut rng_fill = sub_rng(params.seed, 3);
    let mut rng_wash = sub_rng(params.seed, 4);
    let mut tissue_bits = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (ux, uy) = (px_to_um(x), px_to_um(y));
            let in_tissue = tissue_contains(params, ux, uy);
            tissue_bits[i] = in_tissue as u8;
            let n: [f64; 3] = [
                rng_fill.random_range(-1.0..=1.0),
                rng_fill.random_range(-1.0..=1.0),
                rng_fill.random_range(-1.0..=1.0),
            ];
            let wash_u: f64 = rng_wash.random();
            let base = if in_tissue { stroma } else { BG_TINT };
            let texture = if in_tissue { vn.at(x, y) * VALUE_NOISE_AMP } else { 0.0 };
            for c in 0..3 {
                data[i * CHANNELS + c] =
                    (base[c] + texture + n[c] * params.noise.rgb).round().clamp(0.0, 255.0) as u8;
            }
            if in_tissue && wash_u < params.noise.basal_wash {
                data[i * CHANNELS + 4] = 255;
            }
            data[i * CHANNELS + 6] = DAPI_BYTE;
        }
    }

    // Glands: RGB tint + ring, epithelial interior, rim dots, AMACR.
    for (gi, (g, style)) in placement.specs.iter().zip(&placement.styles).enumerate() {
        let mut rng_g = sub_rng(params.seed, 0x100 + gi as u64);
        let reach = g.max_radius() + g.rim_thickness_um + 2.0;
        let x0 = (((g.center_um.0 - reach) / MPP0).floor().max(0.0)) as usize;
        let y0 = (((g.center_um.1 - reach) / MPP0).floor().max(0.0)) as usize;
        let x1 = (((g.center_um.0 + reach) / MPP0).ceil() as usize).min(w);
        let y1 = (((g.center_um.1 + reach) / MPP0).ceil() as usize).min(h);
        let interior_tint = if style.ambiguous {
            WOB_TINT
        } else if g.is_wob() {
            if style.hard {
                let mut t = [0.0; 3];
                for c in 0..3 {
                    t[c] = WOB_TINT[c] + HARD_LERP * (BENIGN_TINT[c] - WOB_TINT[c]);
                }
                t
            } else {
                WOB_TINT
            }
        } else {
            BENIGN_TINT
        };
        let draw_ring = g.has_basal_rim && !style.ambiguous;
        let ring_half_um = params.rim_thickness_um / 2.0;

        for y in y0..y1 {
            for x in x0..x1 {
                // Fixed draws per bounding-box pixel: stream stays aligned
                // no matter which branch applies.
                let n: [f64; 3] = [
                    rng_g.random_range(-1.0..=1.0),
                    rng_g.random_range(-1.0..=1.0),
                    rng_g.random_range(-1.0..=1.0),
                ];
                let rim_u: f64 = rng_g.random();
                let amacr_u: f64 = rng_g.random_range(-1.0..=1.0);
                let epi_u: f64 = rng_g.random_range(-1.0..=1.0);

                let i = y * w + x;
                let (ux, uy) = (px_to_um(x), px_to_um(y));
                let rho = g.rho(ux, uy);
                if rho <= 1.0 {
                    let texture = vn.at(x, y) * VALUE_NOISE_AMP * 0.5;
                    for c in 0..3 {
                        data[i * CHANNELS + c] = (interior_tint[c]
                            + texture
                            + n[c] * params.noise.rgb)
                            .round()
                            .clamp(0.0, 255.0) as u8;
                    }
                    data[i * CHANNELS + 3] =
                        unit_to_byte(EPITHELIAL_LEVEL + params.noise.epithelial * epi_u);
                    if g.amacr_level > 0.0 {
                        let v = g.amacr_level
                            * AMACR_MAX
                            * (1.0 + params.noise.amacr_mult * amacr_u);
                        data[i * CHANNELS + 5] = unit_to_byte(v.max(0.0));
                    }
                }
                if draw_ring && (rho - 1.0).abs() * g.mean_radius() <= ring_half_um {
                    let texture = vn.at(x, y) * VALUE_NOISE_AMP * 0.3;
                    for c in 0..3 {
                        data[i * CHANNELS + c] = (RING_TINT[c]
                            + texture
                            + n[c] * params.noise.rgb)
                            .round()
                            .clamp(0.0, 255.0) as u8;
                    }
                }
                if g.in_rim(ux, uy) && rim_u < RIM_DUTY {
                    data[i * CHANNELS + 4] = 255;
                }
            }
        }
    }

    // Exact masks at the finest level.
    let mut wob_bits = vec![0u8; w * h];
    let mut idcp_bits = vec![0u8; w * h];
    for g in &placement.specs {
        if !g.is_wob() && !g.is_idcp {
            continue;
        }
        let reach = g.max_radius() + 1.0;
        let x0 = (((g.center_um.0 - reach) / MPP0).floor().max(0.0)) as usize;
        let y0 = (((g.center_um.1 - reach) / MPP0).floor().max(0.0)) as usize;
        let x1 = (((g.center_um.0 + reach) / MPP0).ceil() as usize).min(w);
        let y1 = (((g.center_um.1 + reach) / MPP0).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if g.contains(px_to_um(x), px_to_um(y)) {
                    let i = y * w + x;
                    if g.is_wob() {
                        wob_bits[i] = 1;
                    }
                    if g.is_idcp {
                        idcp_bits[i] = 1;
                    }
                }
            }
        }
    }

    let level0 = Raster::from_bytes(w, h, CHANNELS, data)?;
    let level1 = downsample2(&level0);
    let level2 = downsample2(&level1);
    let roles: BTreeMap<usize, ChannelRole> = [
        (0, ChannelRole::Red),
        (1, ChannelRole::Green),
        (2, ChannelRole::Blue),
        (3, ChannelRole::Epithelial),
        (4, ChannelRole::Basal),
        (5, ChannelRole::Amacr),
        (6, ChannelRole::Dapi),
    ]
    .into();
    let mut slide = Slide::new(
        id,
        vec![
            Level { mpp: LEVEL_MPPS[0], raster: level0 },
            Level { mpp: LEVEL_MPPS[1], raster: level1 },
            Level { mpp: LEVEL_MPPS[2], raster: level2 },
        ],
        roles,
    )?;

    for (name, bits) in [
        ("wob", wob_bits),
        ("idcp_override", idcp_bits),
        ("tissue", tissue_bits),
    ] {
        let m0 = Raster::from_bytes(w, h, 1, bits)?;
        let m1 = downsample2_mask(&m0)?;
        let m2 = downsample2_mask(&m1)?;
        slide.set_mask(name, MaskKind::Binary, 0, m0)?;
        slide.set_mask(name, MaskKind::Binary, 1, m1)?;
        slide.set_mask(name, MaskKind::Binary, 2, m2)?;
    }
    Ok(slide)
}

/// Generates one slide plus the gland specs behind it (exposed so tests
/// can check the geometry-level invariants directly).
pub fn generate_slide_with_specs(
    params: &SynthParams,
    id: &str,
) -> Result<(Slide, Vec<GlandSpec>, Vec<RenderStyle>)> {
    params.validate()?;
    let placement = place_glands(params)?;
    let slide = render_slide(params, &placement, id)?;
    Ok((slide, placement.specs, placement.styles))
}

pub fn generate_slide(params: &SynthParams, id: &str) -> Result<Slide> {
    Ok(generate_slide_with_specs(params, id)?.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideEntry {
    pub id: String,
    /// Slide directory, relative to the listing file.
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetListing {
    pub master_seed: u64,
    pub train: Vec<SlideEntry>,
    pub test: Vec<SlideEntry>,
}

impl DatasetListing {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("dataset listing: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("dataset listing: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Writes `n_train` + `n_test` slides with per-slide seeds derived from the
/// master seed, plus a `dataset.json` split listing, into `out_dir`.
pub fn generate_dataset(
    params: &SynthParams,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetListing> {
    if n_train == 0 {
        return Err(Error::EmptySplit("n_train is 0".into()));
    }
    if n_test == 0 {
        return Err(Error::EmptySplit("n_test is 0".into()));
    }
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut listing = DatasetListing {
        master_seed: params.seed,
        train: Vec::new(),
        test: Vec::new(),
    };
    let emit = |split: &str, count: usize, tag_base: u64| -> Result<Vec<SlideEntry>> {
        let mut entries = Vec::new();
        for i in 0..count {
            let id = format!("{split}_{i:03}");
            let seed = splitmix64(params.seed ^ (tag_base + i as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            let slide_params = SynthParams { seed, ..params.clone() };
            let slide = generate_slide(&slide_params, &id)?;
            save_slide(&slide, &slide_dir(out_dir, &id))?;
            let path = format!("{id}.slab");
            entries.push(SlideEntry { id, path, seed });
        }
        Ok(entries)
    };
    listing.train = emit("train", n_train, 1)?;
    listing.test = emit("test", n_test, 0x8000_0001)?;
    listing.save(&out_dir.join("dataset.json"))?;
    Ok(listing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{generate_wob_mask, mask_iou, AnnotateParams};

    fn small_params(seed: u64) -> SynthParams {
        SynthParams {
            width_um: 560.0,
            height_um: 460.0,
            gland_count: (4, 6),
            ambiguous_attached: 1,
            ambiguous_isolated: 1,
            seed,
            ..SynthParams::default()
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let p = small_params(5);
        let a = generate_slide(&p, "s").unwrap();
        let b = generate_slide(&p, "s").unwrap();
        for li in 0..3 {
            assert_eq!(
                a.levels()[li].raster.bytes().unwrap(),
                b.levels()[li].raster.bytes().unwrap(),
                "level {li}"
            );
            for name in ["wob", "idcp_override", "tissue"] {
                assert_eq!(
                    a.mask(name, li).unwrap().bytes().unwrap(),
                    b.mask(name, li).unwrap().bytes().unwrap(),
                    "{name} level {li}"
                );
            }
        }
        let c = generate_slide(&SynthParams { seed: 6, ..p }, "s").unwrap();
        assert_ne!(
            a.levels()[0].raster.bytes().unwrap(),
            c.levels()[0].raster.bytes().unwrap()
        );
    }

    #[test]
    fn all_rims_means_empty_wob() {
        let p = SynthParams {
            rim_probability: 1.0,
            idcp_probability: 0.0,
            ..small_params(11)
        };
        let (slide, specs, _) = generate_slide_with_specs(&p, "s").unwrap();
        assert!(specs.iter().all(|g| g.has_basal_rim && !g.is_wob()));
        for li in 0..3 {
            assert!(
                slide.mask("wob", li).unwrap().bytes().unwrap().iter().all(|&v| v == 0),
                "level {li}"
            );
        }
    }

    #[test]
    fn no_rims_means_wob_covers_every_gland() {
        let p = SynthParams {
            rim_probability: 0.0,
            ..small_params(12)
        };
        let (slide, specs, _) = generate_slide_with_specs(&p, "s").unwrap();
        assert!(specs.iter().all(|g| g.is_wob()));
        let wob = slide.mask("wob", 0).unwrap();
        let (w, h) = (wob.width(), wob.height());
        let bits = wob.bytes().unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = specs.iter().any(|g| g.contains(px_to_um(x), px_to_um(y)));
                assert_eq!(bits[y * w + x] == 1, inside, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn label_exactness_against_geometry() {
        let (slide, specs, _) = generate_slide_with_specs(&small_params(13), "s").unwrap();
        let wob = slide.mask("wob", 0).unwrap();
        let (w, h) = (wob.width(), wob.height());
        let bits = wob.bytes().unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = specs
                    .iter()
                    .filter(|g| g.is_wob())
                    .any(|g| g.contains(px_to_um(x), px_to_um(y)));
                assert_eq!(bits[y * w + x] == 1, inside, "pixel ({x},{y})");
            }
        }
        // IDC-P implies a retained rim, and the override mask is exactly
        // the union of IDC-P interiors.
        assert!(specs.iter().all(|g| !g.is_idcp || g.has_basal_rim));
        let idcp = slide.mask("idcp_override", 0).unwrap().bytes().unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = specs
                    .iter()
                    .filter(|g| g.is_idcp)
                    .any(|g| g.contains(px_to_um(x), px_to_um(y)));
                assert_eq!(idcp[y * w + x] == 1, inside, "idcp pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn rim_annulus_basal_signal_dominates_wash() {
        // Force a mixed population. The invariant: every rimmed non-IDC-P
        // gland's rim annulus mean is > 5x the mean inside WOB interiors.
        let p = SynthParams {
            rim_probability: 0.5,
            ..small_params(14)
        };
        let (slide, specs, _) = generate_slide_with_specs(&p, "s").unwrap();
        let raster = &slide.levels()[0].raster;
        let (w, h) = (raster.width(), raster.height());

        let mut wob_sum = 0f64;
        let mut wob_n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let (ux, uy) = (px_to_um(x), px_to_um(y));
                if specs.iter().any(|g| g.is_wob() && g.contains(ux, uy)) {
                    wob_sum += raster.get_byte(x, y, 4) as f64;
                    wob_n += 1;
                }
            }
        }
        assert!(wob_n > 0, "need some WOB area");
        let wob_mean = wob_sum / wob_n as f64;

        let mut checked = 0;
        for g in specs.iter().filter(|g| g.has_basal_rim && !g.is_idcp) {
            let reach = g.max_radius() + g.rim_thickness_um + 2.0;
            let x0 = ((g.center_um.0 - reach) / MPP0).floor().max(0.0) as usize;
            let y0 = ((g.center_um.1 - reach) / MPP0).floor().max(0.0) as usize;
            let x1 = (((g.center_um.0 + reach) / MPP0).ceil() as usize).min(w);
            let y1 = (((g.center_um.1 + reach) / MPP0).ceil() as usize).min(h);
            let mut rim_sum = 0f64;
            let mut rim_n = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    if g.in_rim(px_to_um(x), px_to_um(y)) {
                        rim_sum += raster.get_byte(x, y, 4) as f64;
                        rim_n += 1;
                    }
                }
            }
            assert!(rim_n > 0);
            let rim_mean = rim_sum / rim_n as f64;
            assert!(
                rim_mean > 5.0 * wob_mean,
                "gland at {:?}: rim mean {rim_mean:.1} vs wob mean {wob_mean:.1}",
                g.center_um
            );
            checked += 1;
        }
        assert!(checked > 0, "need at least one rimmed gland");
    }

    #[test]
    fn wob_prevalence_is_low_but_nonzero() {
        let (slide, _, _) = generate_slide_with_specs(&SynthParams::default(), "s").unwrap();
        let bits = slide.mask("wob", 1).unwrap();
        let frac = bits.bytes().unwrap().iter().map(|&v| v as usize).sum::<usize>() as f64
            / (bits.width() * bits.height()) as f64;
        assert!(
            (0.005..=0.05).contains(&frac),
            "wob prevalence {frac:.4} outside (0.5%, 5%]"
        );
    }

    #[test]
    fn generated_annotation_recovers_ground_truth() {
        // The end-to-end calibration check: default synthesis, default
        // annotation, IoU against the exact mask.
        let (slide, _, _) = generate_slide_with_specs(&SynthParams::default(), "s").unwrap();
        let generated = generate_wob_mask(&slide, &AnnotateParams::default()).unwrap();
        let truth = slide.mask("wob", 0).unwrap();
        let iou = mask_iou(&generated, truth).unwrap();
        assert!(iou >= 0.90, "IoU {iou:.4} below 0.90");

        // Manual-override glands must be fully included.
        let idcp = slide.mask("idcp_override", 0).unwrap().bytes().unwrap();
        let gen = generated.bytes().unwrap();
        assert!(
            idcp.iter().zip(gen).all(|(&o, &g)| o == 0 || g == 1),
            "an override pixel is missing from the generated mask"
        );
    }

    #[test]
    fn context_styles_mark_ambiguous_glands() {
        let p = SynthParams::context_benchmark(3);
        let (_, specs, styles) = generate_slide_with_specs(&p, "s").unwrap();
        let n_amb = styles.iter().filter(|s| s.ambiguous).count();
        assert_eq!(n_amb, p.ambiguous_attached + p.ambiguous_isolated);
        // Ambiguous glands are small; full glands are not.
        for (g, s) in specs.iter().zip(&styles) {
            if s.ambiguous {
                assert!(g.max_radius() <= AMBIG_RADIUS_UM.1 + 1e-9);
                assert!(!g.is_idcp);
            } else {
                assert!(g.max_radius() >= p.gland_radius_um.0 - 1e-9);
            }
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let p = SynthParams {
            width_um: 240.0,
            height_um: 200.0,
            gland_count: (40, 40),
            ambiguous_attached: 0,
            ambiguous_isolated: 0,
            ..SynthParams::default()
        };
        let err = generate_slide(&p, "s").unwrap_err();
        assert!(
            err.to_string().contains("placement failed"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn parameter_validation() {
        let bad = SynthParams {
            rim_probability: 1.2,
            ..SynthParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthParams {
            context_cue_scale_um: 25.0,
            ..SynthParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthParams {
            gland_count: (5, 3),
            ..SynthParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(SynthParams::default().validate().is_ok());
        assert!(SynthParams::context_benchmark(0).validate().is_ok());
        assert!(SynthParams::biopsy(0).validate().is_ok());
    }

    /// Calibration harness: sweeps the basal wash density and reports how
    /// the generated annotation disagrees with the geometric truth. Run
    /// manually with --ignored --nocapture when retuning constants.
    #[test]
    #[ignore]
    fn calibration_sweep() {
        for seed_tag in 0..10u64 {
            let mut p = SynthParams::default();
            p.seed = splitmix64((seed_tag + 1).wrapping_mul(0xA24B_AED4_963E_E407));
            let wash = p.noise.basal_wash;
            let (slide, specs, styles) = generate_slide_with_specs(&p, "s").unwrap();
            let generated = generate_wob_mask(&slide, &AnnotateParams::default()).unwrap();
            let truth = slide.mask("wob", 0).unwrap();
            let iou = mask_iou(&generated, truth).unwrap();

            let (w, h) = (truth.width(), truth.height());
            let (gen, tru) = (generated.bytes().unwrap(), truth.bytes().unwrap());
            let mut fp_benign = 0usize; // inside or near a benign gland
            let mut fp_halo = 0usize; // near a WOB gland
            let mut fp_other = 0usize;
            let mut fn_full = 0usize; // inside a full-size WOB gland
            let mut fn_amb = 0usize; // inside an ambiguous WOB gland
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (ux, uy) = (px_to_um(x), px_to_um(y));
                    if gen[i] == 1 && tru[i] == 0 {
                        if specs
                            .iter()
                            .any(|g| !g.is_wob() && g.rho(ux, uy) <= 1.3)
                        {
                            fp_benign += 1;
                        } else if specs
                            .iter()
                            .any(|g| g.is_wob() && g.rho(ux, uy) <= 1.8)
                        {
                            fp_halo += 1;
                        } else {
                            fp_other += 1;
                        }
                    } else if gen[i] == 0 && tru[i] == 1 {
                        let amb = specs
                            .iter()
                            .zip(&styles)
                            .any(|(g, s)| s.ambiguous && g.contains(ux, uy));
                        if amb {
                            fn_amb += 1;
                        } else {
                            fn_full += 1;
                        }
                    }
                }
            }
            let truth_px: usize = tru.iter().map(|&v| v as usize).sum();
            println!(
                "wash {wash:.4}: IoU {iou:.4} truth {truth_px} | FP benign {fp_benign} halo {fp_halo} other {fp_other} | FN full {fn_full} amb {fn_amb}"
            );
        }
    }

    #[test]
    fn dataset_round_trip_and_split_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams {
            seed: 7,
            ..small_params(7)
        };
        let out1 = dir.path().join("d1");
        let listing = generate_dataset(&p, 2, 1, &out1).unwrap();
        assert_eq!(listing.train.len(), 2);
        assert_eq!(listing.test.len(), 1);
        assert_eq!(listing.train[0].id, "train_000");
        assert_eq!(listing.train[0].path, "train_000.slab");
        let loaded = DatasetListing::load(&out1.join("dataset.json")).unwrap();
        assert_eq!(loaded.master_seed, 7);
        assert_eq!(loaded.train.len(), 2);

        // Per-slide seeds differ, and a rerun reproduces identical bytes.
        assert_ne!(listing.train[0].seed, listing.train[1].seed);
        assert_ne!(listing.train[0].seed, listing.test[0].seed);
        let out2 = dir.path().join("d2");
        generate_dataset(&p, 2, 1, &out2).unwrap();
        for entry in listing.train.iter().chain(&listing.test) {
            let a = crate::slide::open_slide(&out1.join(&entry.path)).unwrap();
            let b = crate::slide::open_slide(&out2.join(&entry.path)).unwrap();
            for li in 0..3 {
                assert_eq!(
                    a.levels()[li].raster.bytes().unwrap(),
                    b.levels()[li].raster.bytes().unwrap()
                );
            }
        }

        assert!(matches!(
            generate_dataset(&p, 0, 1, &dir.path().join("d3")),
            Err(Error::EmptySplit(_))
        ));
        assert!(matches!(
            generate_dataset(&p, 1, 0, &dir.path().join("d4")),
            Err(Error::EmptySplit(_))
        ));
    }
}
