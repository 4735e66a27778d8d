//! Mask generation from immunofluorescence channels.
//!
//! The epithelial, basal, and AMACR channels are each smoothed by a
//! gland-scale Gaussian density filter, combined into two ratio heatmaps
//! (epithelial-vs-basal and AMACR-vs-epithelial), merged with basal
//! priority on disagreement, thresholded, cleaned of small connected
//! components, and finally unioned with a manual override mask.

use crate::error::{Error, Result};
use crate::filter::{blur_separable, gaussian_kernel};
use crate::raster::Raster;
use crate::slide::{ChannelRole, MaskKind, Slide};

/// A Gaussian-smoothed channel, values in [0, 1].
#[derive(Debug, Clone)]
pub struct DensityField {
    pub values: Raster,
    /// Truncation radius of the kernel, in micrometers.
    pub kernel_radius_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    BasalRatio,
    AmacrRatio,
    Combined,
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub values: Raster,
    pub kind: HeatmapKind,
}

/// Knobs for the mask-generation pipeline, all surfaced as CLI flags.
#[derive(Debug, Clone)]
pub struct AnnotateParams {
    /// Density-filter standard deviation, micrometers.
    pub sigma_um: f64,
    /// Ratio stabilizer.
    pub eps: f64,
    /// Epithelial-density gate: at or below this the pixel is not tissue
    /// of interest and the combined heatmap is 0.
    pub tissue_tau: f64,
    /// Heatmap agreement band: within it the two heatmaps are averaged,
    /// outside it the basal heatmap wins.
    pub agree_delta: f64,
    /// Binarization threshold on the combined heatmap.
    pub tau: f64,
    /// Connected components smaller than this are dropped.
    pub min_area_um2: f64,
    /// Pyramid level the pipeline runs at.
    pub level_mpp: f64,
    /// Override mask to union in: `None` uses "idcp_override" when the
    /// slide has it; naming a mask makes it required.
    pub override_mask: Option<String>,
}

impl Default for AnnotateParams {
    fn default() -> Self {
        AnnotateParams {
            sigma_um: 15.0,
            eps: 1e-6,
            tissue_tau: 0.05,
            agree_delta: 0.25,
            tau: 0.5,
            min_area_um2: 100.0,
            level_mpp: 0.5,
            override_mask: None,
        }
    }
}

/// Name of the mask `annotate_slide` writes.
pub const GENERATED_MASK: &str = "wob_generated";

fn unit_values(channel: &Raster) -> Result<Vec<f64>> {
    if channel.channels() != 1 {
        return Err(Error::invalid("density filter expects a single channel"));
    }
    Ok(match channel.bytes() {
        Ok(b) => b.iter().map(|&v| v as f64 / 255.0).collect(),
        Err(_) => channel.floats()?.iter().map(|&v| v as f64).collect(),
    })
}

/// Gaussian smoothing with sigma given in micrometers: sigma_px =
/// sigma_um / mpp, kernel truncated at 3 sigma, separable passes,
/// reflective boundary.
pub fn density_filter(channel: &Raster, sigma_um: f64, mpp: f64) -> Result<DensityField> {
    if !(mpp > 0.0) {
        return Err(Error::invalid("mpp must be positive"));
    }
    let sigma_px = sigma_um / mpp;
    let kernel = gaussian_kernel(sigma_px)?;
    let mut values = unit_values(channel)?;
    blur_separable(&mut values, channel.width(), channel.height(), &kernel);
    let out: Vec<f32> = values
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Ok(DensityField {
        values: Raster::from_floats(channel.width(), channel.height(), 1, out)?,
        kernel_radius_um: ((kernel.len() / 2) as f64) * mpp,
    })
}

fn ratio_heatmap(
    num: &DensityField,
    den_extra: &DensityField,
    eps: f64,
    kind: HeatmapKind,
) -> Result<Heatmap> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let a = num.values.floats()?;
    let b = den_extra.values.floats()?;
    if num.values.width() != den_extra.values.width()
        || num.values.height() != den_extra.values.height()
    {
        return Err(Error::DimensionMismatch(
            "density fields have different dimensions".into(),
        ));
    }
    let out: Vec<f32> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let v = x as f64 / (x as f64 + y as f64 + eps);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Heatmap {
        values: Raster::from_floats(num.values.width(), num.values.height(), 1, out)?,
        kind,
    })
}

/// D_E / (D_E + D_B + eps): high where epithelium lacks basal cells.
pub fn heatmap_basal(d_e: &DensityField, d_b: &DensityField, eps: f64) -> Result<Heatmap> {
    ratio_heatmap(d_e, d_b, eps, HeatmapKind::BasalRatio)
}

/// D_A / (D_A + D_E + eps): high where AMACR dominates the epithelium.
pub fn heatmap_amacr(d_a: &DensityField, d_e: &DensityField, eps: f64) -> Result<Heatmap> {
    ratio_heatmap(d_a, d_e, eps, HeatmapKind::AmacrRatio)
}

/// Merge rule: no epithelial density -> 0; heatmaps within `agree_delta`
/// of each other -> their mean; otherwise the basal heatmap wins.
pub fn combine_heatmaps(
    h_basal: &Heatmap,
    h_amacr: &Heatmap,
    d_e: &DensityField,
    tissue_tau: f64,
    agree_delta: f64,
) -> Result<Heatmap> {
    let hb = h_basal.values.floats()?;
    let ha = h_amacr.values.floats()?;
    let de = d_e.values.floats()?;
    if hb.len() != ha.len() || hb.len() != de.len() {
        return Err(Error::DimensionMismatch(
            "heatmap dimensions differ".into(),
        ));
    }
    let out: Vec<f32> = (0..hb.len())
        .map(|i| {
            if de[i] as f64 <= tissue_tau {
                0.0
            } else if (hb[i] as f64 - ha[i] as f64).abs() <= agree_delta {
                ((hb[i] as f64 + ha[i] as f64) / 2.0) as f32
            } else {
                hb[i]
            }
        })
        .collect();
    Ok(Heatmap {
        values: Raster::from_floats(
            h_basal.values.width(),
            h_basal.values.height(),
            1,
            out,
        )?,
        kind: HeatmapKind::Combined,
    })
}

/// Union-find over the thresholded plane; components under the area floor
/// (min_area_um2 / mpp^2 pixels) are erased.
pub fn binarize_mask(h: &Heatmap, tau: f64, min_area_um2: f64, mpp: f64) -> Result<Raster> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("tau must lie strictly between 0 and 1"));
    }
    if !(mpp > 0.0) {
        return Err(Error::invalid("mpp must be positive"));
    }
    let (w, hgt) = (h.values.width(), h.values.height());
    let vals = h.values.floats()?;
    let mut mask: Vec<u8> = vals.iter().map(|&v| (v as f64 >= tau) as u8).collect();

    let min_px = min_area_um2 / (mpp * mpp);
    if min_px > 1.0 {
        // Label 4-connected components with a scanline flood fill.
        let mut label = vec![0u32; w * hgt];
        let mut areas: Vec<usize> = vec![0]; // label 0 = background
        let mut stack = Vec::new();
        for start in 0..w * hgt {
            if mask[start] == 0 || label[start] != 0 {
                continue;
            }
            let id = areas.len() as u32;
            areas.push(0);
            stack.push(start);
            label[start] = id;
            while let Some(i) = stack.pop() {
                areas[id as usize] += 1;
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if mask[j] == 1 && label[j] == 0 {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < hgt {
                    visit(i + w);
                }
            }
        }
        for i in 0..w * hgt {
            if mask[i] == 1 && (areas[label[i] as usize] as f64) < min_px {
                mask[i] = 0;
            }
        }
    }
    Raster::from_bytes(w, hgt, 1, mask)
}

/// Pixelwise union of two binary masks.
pub fn apply_idcp_override(mask: &Raster, override_mask: &Raster) -> Result<Raster> {
    if mask.width() != override_mask.width() || mask.height() != override_mask.height() {
        return Err(Error::DimensionMismatch(
            "override mask dimensions differ".into(),
        ));
    }
    let a = mask.bytes()?;
    let b = override_mask.bytes()?;
    let out: Vec<u8> = a.iter().zip(b).map(|(&x, &y)| (x | y) & 1).collect();
    Raster::from_bytes(mask.width(), mask.height(), 1, out)
}

/// Full pipeline over the slide's immunofluorescence channels at
/// `params.level_mpp`. Pure: the caller decides where the mask goes.
pub fn generate_wob_mask(slide: &Slide, params: &AnnotateParams) -> Result<Raster> {
    let li = slide.level_index(params.level_mpp)?;
    let raster = &slide.levels()[li].raster;
    let mpp = slide.levels()[li].mpp;
    let epi = raster.extract_channel(slide.channel_with_role(ChannelRole::Epithelial)?)?;
    let bas = raster.extract_channel(slide.channel_with_role(ChannelRole::Basal)?)?;
    let ama = raster.extract_channel(slide.channel_with_role(ChannelRole::Amacr)?)?;

    let d_e = density_filter(&epi, params.sigma_um, mpp)?;
    let d_b = density_filter(&bas, params.sigma_um, mpp)?;
    let d_a = density_filter(&ama, params.sigma_um, mpp)?;

    let hb = heatmap_basal(&d_e, &d_b, params.eps)?;
    let ha = heatmap_amacr(&d_a, &d_e, params.eps)?;
    let combined = combine_heatmaps(&hb, &ha, &d_e, params.tissue_tau, params.agree_delta)?;
    let mut mask = binarize_mask(&combined, params.tau, params.min_area_um2, mpp)?;

    match &params.override_mask {
        Some(name) => {
            let ov = slide
                .mask(name, li)
                .ok_or_else(|| Error::MissingMask(name.clone()))?;
            mask = apply_idcp_override(&mask, ov)?;
        }
        None => {
            if let Some(ov) = slide.mask("idcp_override", li) {
                mask = apply_idcp_override(&mask, ov)?;
            }
        }
    }
    Ok(mask)
}

/// Runs `generate_wob_mask` and stores the result on the slide as
/// "wob_generated" at the configured level.
pub fn annotate_slide(slide: &mut Slide, params: &AnnotateParams) -> Result<()> {
    let mask = generate_wob_mask(slide, params)?;
    let li = slide.level_index(params.level_mpp)?;
    slide.set_mask(GENERATED_MASK, MaskKind::Binary, li, mask)
}

/// Intersection over union of two binary masks (1.0 when both are empty).
pub fn mask_iou(a: &Raster, b: &Raster) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch("mask dimensions differ".into()));
    }
    let (av, bv) = (a.bytes()?, b.bytes()?);
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in av.iter().zip(bv) {
        inter += (x == 1 && y == 1) as u64;
        union += (x == 1 || y == 1) as u64;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}
