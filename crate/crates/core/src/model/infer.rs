//! Whole-slide inference: halo'd tiling and the compound two-resolution mode.
//!
//! Tiles are expanded by a halo of at least the receptive-field radius and
//! their window origins are snapped to the pooling alignment, so every
//! interior pixel sees exactly the dependency cone it would see in a
//! whole-image pass. Tiled output is therefore bit-identical to the
//! untiled forward for any tile size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::quantize_prob;
use crate::model::net::{forward, tensor_from_patch};
use crate::model::Params;
use crate::raster::{downsample2, Raster};
use crate::slide::{ChannelRole, Level, MaskKind, Slide};

/// Default (base mpp, head mpp) pair for compound models.
pub const COMPOUND_CHANNEL_LEVELS: (f64, f64) = (1.0, 2.0);

/// Single-channel probability plane at a known resolution.
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub mpp: f64,
    pub raster: Raster,
}

#[derive(Debug, Clone, Copy)]
pub struct InferOpts {
    pub tile: usize,
    pub halo: usize,
}

impl InferOpts {
    /// Minimal correct halo for `config`, with a tile sized for a roomy
    /// interior.
    pub fn auto(config: &crate::model::FcnConfig) -> Self {
        let a = config.pool_alignment();
        let halo = config.receptive_radius().div_ceil(a) * a;
        InferOpts {
            tile: 192 + 2 * halo,
            halo,
        }
    }
}

pub fn predict_slide(
    params: &Params,
    slide: &Slide,
    level_mpp: f64,
    opts: &InferOpts,
) -> Result<ProbMap> {
    let cfg = &params.config;
    cfg.validate()?;
    if params.values.len() != cfg.param_count() {
        return Err(Error::invalid("parameter vector length mismatch"));
    }
    let li = slide.level_index(level_mpp)?;
    let raster = &slide.levels()[li].raster;
    if raster.channels() < cfg.input_channels {
        return Err(Error::DimensionMismatch(format!(
            "level has {} channels, model wants {}",
            raster.channels(),
            cfg.input_channels
        )));
    }
    let r = cfg.receptive_radius();
    let a = cfg.pool_alignment();
    if opts.halo < r {
        return Err(Error::invalid(format!(
            "halo too small: {} < receptive-field radius {r}",
            opts.halo
        )));
    }
    let halo = opts.halo.div_ceil(a) * a;
    if opts.tile <= 2 * halo {
        return Err(Error::invalid(format!(
            "tile {} must exceed twice the halo {halo}",
            opts.tile
        )));
    }
    let step = (opts.tile - 2 * halo) / a * a;
    if step == 0 {
        return Err(Error::invalid(format!(
            "tile {} too small for pooling alignment {a}",
            opts.tile
        )));
    }

    let (w, h) = (raster.width(), raster.height());
    let mut origins = Vec::new();
    let mut iy = 0;
    while iy < h {
        let mut ix = 0;
        while ix < w {
            origins.push((ix, iy));
            ix += step;
        }
        iy += step;
    }

    let tiles: Vec<Result<((usize, usize, usize, usize), Vec<f32>)>> = origins
        .par_iter()
        .map(|&(ix, iy)| {
            let ie_x = (ix + step).min(w);
            let ie_y = (iy + step).min(h);
            let x0 = ix.saturating_sub(halo) / a * a;
            let y0 = iy.saturating_sub(halo) / a * a;
            let x1 = (ie_x + halo).min(w);
            let y1 = (ie_y + halo).min(h);
            let window = raster
                .crop(x0, y0, x1 - x0, y1 - y0)?
                .take_channels(cfg.input_channels)?;
            let input = tensor_from_patch(&window)?;
            let out = forward(params, &input, false)?.output;
            let ww = x1 - x0;
            let mut interior = Vec::with_capacity((ie_x - ix) * (ie_y - iy));
            for y in iy..ie_y {
                for x in ix..ie_x {
                    interior.push(out.data[(y - y0) * ww + (x - x0)] as f32);
                }
            }
            Ok(((ix, iy, ie_x, ie_y), interior))
        })
        .collect();

    let mut out = vec![0f32; w * h];
    for tile in tiles {
        let ((ix, iy, ie_x, ie_y), values) = tile?;
        let mut it = values.into_iter();
        for y in iy..ie_y {
            for x in ix..ie_x {
                out[y * w + x] = it.next().unwrap();
            }
        }
    }
    Ok(ProbMap {
        mpp: slide.levels()[li].mpp,
        raster: Raster::from_floats(w, h, 1, out)?,
    })
}

/// Runs the base model at `base_mpp`, quantizes its downsampled output, and
/// stacks it as a fourth channel onto the RGB of the level at twice that
/// mpp. The returned single-level slide carries copies of every mask the
/// source slide has at that level, so it can be trained on and evaluated
/// like any other slide.
pub fn materialize_compound_view(
    base: &Params,
    slide: &Slide,
    base_mpp: f64,
    opts: &InferOpts,
) -> Result<Slide> {
    if base.config.input_channels != 3 {
        return Err(Error::InvalidConfig(
            "compound base model must take 3 channels".into(),
        ));
    }
    let head_mpp = base_mpp * 2.0;
    let head_li = slide.level_index(head_mpp)?;
    let head_raster = &slide.levels()[head_li].raster;

    let base_map = predict_slide(base, slide, base_mpp, opts)?;
    let down = downsample2(&base_map.raster);
    let (w, h) = (head_raster.width(), head_raster.height());
    if down.width() != w || down.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "downsampled base output {}x{} vs head level {w}x{h}",
            down.width(),
            down.height()
        )));
    }

    let ri = slide.channel_with_role(ChannelRole::Red)?;
    let gi = slide.channel_with_role(ChannelRole::Green)?;
    let bi = slide.channel_with_role(ChannelRole::Blue)?;
    let probs = down.floats()?;
    let mut data = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            data.push(head_raster.get_byte(x, y, ri));
            data.push(head_raster.get_byte(x, y, gi));
            data.push(head_raster.get_byte(x, y, bi));
            data.push(quantize_prob(probs[y * w + x]));
        }
    }
    let stacked = Raster::from_bytes(w, h, 4, data)?;
    let roles = [
        (0, ChannelRole::Red),
        (1, ChannelRole::Green),
        (2, ChannelRole::Blue),
    ]
    .into();
    let mut view = Slide::new(
        slide.id.clone(),
        vec![Level {
            mpp: head_mpp,
            raster: stacked,
        }],
        roles,
    )?;
    let names: Vec<String> = slide.mask_names().map(|s| s.to_string()).collect();
    for name in names {
        if let Some(m) = slide.mask(&name, head_li) {
            let kind = slide.mask_kind(&name).unwrap_or(MaskKind::Binary);
            view.set_mask(name, kind, 0, m.clone())?;
        }
    }
    Ok(view)
}

/// Base model at `base_mpp`, head model on the stacked view at twice that.
pub fn compound_predict(
    base: &Params,
    head: &Params,
    slide: &Slide,
    base_mpp: f64,
    opts: &InferOpts,
) -> Result<ProbMap> {
    if head.config.input_channels != 4 {
        return Err(Error::InvalidConfig(
            "compound head model must take 4 channels".into(),
        ));
    }
    let view = materialize_compound_view(base, slide, base_mpp, opts)?;
    let head_opts = InferOpts::auto(&head.config);
    predict_slide(head, &view, base_mpp * 2.0, &head_opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::{forward, tensor_from_patch};
    use crate::model::{init_params, FcnConfig};
    use crate::raster::downsample2_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_raster(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Raster {
        let data: Vec<u8> = (0..w * h * c).map(|_| rng.random()).collect();
        Raster::from_bytes(w, h, c, data).unwrap()
    }

    fn random_params(cfg: &FcnConfig, seed: u64) -> Params {
        let mut p = init_params(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for v in &mut p.values {
            *v += rng.random_range(-0.05..0.05);
        }
        p
    }

    fn rgb_roles() -> BTreeMap<usize, ChannelRole> {
        [
            (0, ChannelRole::Red),
            (1, ChannelRole::Green),
            (2, ChannelRole::Blue),
        ]
        .into()
    }

    fn single_level_slide(raster: Raster, mpp: f64) -> Slide {
        Slide::new("t", vec![Level { mpp, raster }], rgb_roles()).unwrap()
    }

    /// Untiled reference: one forward pass over the whole level.
    fn whole_image(params: &Params, slide: &Slide, mpp: f64) -> Vec<f32> {
        let li = slide.level_index(mpp).unwrap();
        let full = slide.levels()[li]
            .raster
            .take_channels(params.config.input_channels)
            .unwrap();
        let out = forward(params, &tensor_from_patch(&full).unwrap(), false)
            .unwrap()
            .output;
        out.data.iter().map(|&v| v as f32).collect()
    }

    #[test]
    fn tiled_prediction_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for (cfg, seed) in [
            (FcnConfig::base_reference(), 1u64),
            (FcnConfig::head_reference(), 2u64),
        ] {
            let params = random_params(&cfg, seed);
            let raster = random_raster(&mut rng, 53, 37, cfg.input_channels);
            let slide = single_level_slide(raster, 1.0);
            let want = whole_image(&params, &slide, 1.0);
            let r = cfg.receptive_radius();
            for (tile, halo) in [(24, r), (31, r + 3), (160, r), (17, r)] {
                let opts = InferOpts { tile, halo };
                let got = predict_slide(&params, &slide, 1.0, &opts).unwrap();
                assert_eq!(got.mpp, 1.0);
                assert_eq!(
                    got.raster.floats().unwrap(),
                    &want[..],
                    "tile {tile} halo {halo} ({cfg:?})"
                );
            }
        }
    }

    #[test]
    fn auto_opts_cover_both_references() {
        for cfg in [FcnConfig::base_reference(), FcnConfig::head_reference()] {
            let opts = InferOpts::auto(&cfg);
            let params = random_params(&cfg, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let raster = random_raster(&mut rng, 40, 25, cfg.input_channels);
            let slide = single_level_slide(raster, 2.0);
            let want = whole_image(&params, &slide, 2.0);
            let got = predict_slide(&params, &slide, 2.0, &opts).unwrap();
            assert_eq!(got.raster.floats().unwrap(), &want[..]);
        }
    }

    #[test]
    fn tiling_parameter_errors() {
        let cfg = FcnConfig::head_reference();
        let params = random_params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let slide = single_level_slide(random_raster(&mut rng, 20, 20, 4), 1.0);

        let small_halo = InferOpts { tile: 32, halo: cfg.receptive_radius() - 1 };
        let err = predict_slide(&params, &slide, 1.0, &small_halo).unwrap_err();
        assert!(err.to_string().contains("halo too small"), "{err}");

        let tiny_tile = InferOpts { tile: 12, halo: 6 };
        assert!(predict_slide(&params, &slide, 1.0, &tiny_tile).is_err());

        let missing_level = InferOpts::auto(&cfg);
        assert!(predict_slide(&params, &slide, 4.0, &missing_level).is_err());
    }

    /// Head weights that copy the probability channel through the sigmoid:
    /// conv1 puts channel 3 on every feature map, conv2 averages them back.
    fn passthrough_head() -> Params {
        let cfg = FcnConfig {
            input_channels: 4,
            layers: vec![
                Layer::Conv { in_ch: 4, out_ch: 2 },
                Layer::Relu,
                Layer::Conv { in_ch: 2, out_ch: 1 },
                Layer::Sigmoid,
            ],
        };
        let mut p = init_params(&cfg, 0).unwrap();
        for v in &mut p.values {
            *v = 0.0;
        }
        // conv1: out[oc] = center tap of input channel 3.
        for oc in 0..2 {
            let base = (oc * 4 + 3) * 9 + 4; // center of the 3x3 kernel
            p.values[base] = 1.0;
        }
        // conv2: out = 0.5 * (f0 + f1), center taps.
        let off2 = 2 * 4 * 9 + 2;
        p.values[off2 + 4] = 0.5; // ic 0 center
        p.values[off2 + 9 + 4] = 0.5; // ic 1 center
        p
    }

    use crate::model::Layer;

    #[test]
    fn compound_view_stacks_quantized_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base_cfg = FcnConfig::base_reference();
        let base = random_params(&base_cfg, 6);

        let l0 = random_raster(&mut rng, 21, 14, 3);
        let l1_w = 11;
        let l1_h = 7;
        let l1 = random_raster(&mut rng, l1_w, l1_h, 3);
        let mask0: Vec<u8> = (0..21 * 14).map(|_| rng.random_range(0..2u8)).collect();
        let mask0 = Raster::from_bytes(21, 14, 1, mask0).unwrap();
        let mask1 = downsample2_mask(&mask0).unwrap();
        let mut slide = Slide::new(
            "c",
            vec![
                Level { mpp: 1.0, raster: l0 },
                Level { mpp: 2.0, raster: l1 },
            ],
            rgb_roles(),
        )
        .unwrap();
        slide.set_mask("wob", MaskKind::Binary, 0, mask0).unwrap();
        slide
            .set_mask("wob", MaskKind::Binary, 1, mask1.clone())
            .unwrap();

        let opts = InferOpts::auto(&base_cfg);
        let view = materialize_compound_view(&base, &slide, 1.0, &opts).unwrap();
        assert_eq!(view.levels().len(), 1);
        assert_eq!(view.levels()[0].mpp, 2.0);
        let vr = &view.levels()[0].raster;
        assert_eq!((vr.width(), vr.height(), vr.channels()), (l1_w, l1_h, 4));

        // RGB channels are the head level's, channel 3 is the quantized
        // downsampled base probability.
        let base_map = predict_slide(&base, &slide, 1.0, &opts).unwrap();
        let down = downsample2(&base_map.raster);
        let probs = down.floats().unwrap();
        let head_raster = &slide.levels()[1].raster;
        for y in 0..l1_h {
            for x in 0..l1_w {
                for c in 0..3 {
                    assert_eq!(vr.get_byte(x, y, c), head_raster.get_byte(x, y, c));
                }
                assert_eq!(
                    vr.get_byte(x, y, 3),
                    quantize_prob(probs[y * l1_w + x]),
                    "prob channel at ({x},{y})"
                );
            }
        }
        // The head-level mask came along.
        assert_eq!(
            view.mask("wob", 0).unwrap().bytes().unwrap(),
            mask1.bytes().unwrap()
        );

        // A passthrough head reproduces sigmoid(prob channel / 255).
        let head = passthrough_head();
        let out = compound_predict(&base, &head, &slide, 1.0, &opts).unwrap();
        let got = out.raster.floats().unwrap();
        assert_eq!(out.mpp, 2.0);
        for i in 0..l1_w * l1_h {
            let q = quantize_prob(probs[i]) as f64 / 255.0;
            let want = 1.0 / (1.0 + (-q).exp());
            assert!((got[i] as f64 - want).abs() < 1e-7, "pixel {i}");
        }
    }

    #[test]
    fn compound_channel_requirements() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let slide = single_level_slide(random_raster(&mut rng, 10, 10, 3), 1.0);
        let base = random_params(&FcnConfig::base_reference(), 1);
        let head4 = random_params(&FcnConfig::head_reference(), 1);
        // Head must take 4 channels.
        let bad_head = random_params(&FcnConfig::base_reference(), 1);
        let opts = InferOpts::auto(&base.config);
        assert!(compound_predict(&base, &bad_head, &slide, 1.0, &opts).is_err());
        // Base must take 3.
        assert!(materialize_compound_view(&head4, &slide, 1.0, &opts).is_err());
    }
}
