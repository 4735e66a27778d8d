//! Quasi-online hard-example mining.
//!
//! Training is organized as a two-worker pipeline. An *error worker*
//! repeatedly picks a slide (favoring slides with many false positives)
//! and computes a per-pixel error map with the most recently synchronized
//! parameters. A *training worker* concurrently samples patches from the
//! previous cycle's error map — biased toward high-error pixels and
//! balanced across classes — pushes them through the augmentation
//! pipeline into a bounded decorrelation pool, and runs minibatch
//! iterations on the pool. The two workers meet at an end-of-cycle
//! rendezvous where parameters flow training → error worker and the
//! per-cycle patch quota `k` is adjusted to minimize idle time.
//!
//! A single-threaded simulated-clock mode executes the same cycle
//! structure deterministically (phase durations come from a cost model
//! instead of wall time) and is the substrate for all protocol tests.

use std::io::Write as _;
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPipeline;
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_grad, FcnConfig, InferOpts, Params, Sgd};
use crate::model::predict_slide;
use crate::raster::Raster;
use crate::slide::Slide;
use crate::synth::sub_rng;

/// Upper bound on the patch quota, as a multiple of the batch size.
pub const K_MAX_FACTOR: usize = 64;
/// Floor applied to the training-phase duration in the quota ratio.
pub const TIME_EPS: f64 = 1e-9;

/// How phase durations are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    /// Wall-clock timing with the two workers on real threads.
    Real,
    /// Deterministic single-thread execution; durations come from a
    /// linear cost model.
    Simulated {
        sec_per_error_pixel: f64,
        sec_per_train_patch: f64,
    },
}

/// Configuration of the sampling/training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Side length of square training patches, in pixels.
    pub patch_size: usize,
    pub batch_size: usize,
    /// Initial per-cycle patch quota.
    pub k0: usize,
    /// Minimum pool fill before training iterations may begin.
    pub n_min: usize,
    /// Pool capacity (ring buffer; oldest entries are overwritten).
    pub capacity: usize,
    /// Additive floor on per-pixel sampling weights (exploration).
    pub eps_floor: f64,
    /// Fraction of sampled centers taken from the positive class.
    pub class_balance: f64,
    /// Resolution (microns per pixel) of the level used for error maps
    /// and patch extraction.
    pub level_mpp: f64,
    /// Total number of training iterations after which the run stops
    /// (the final cycle is allowed to overshoot by less than one cycle).
    pub total_iterations: u64,
    pub clock: ClockMode,
    /// Ablation switch: ignore error magnitudes and sample centers
    /// uniformly (still class-balanced). Used as a control arm.
    pub uniform_sampling: bool,
    /// Name of the ground-truth mask on every training slide.
    pub mask_name: String,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let batch = 32;
        let n_min = 8 * batch;
        SamplerConfig {
            patch_size: 188,
            batch_size: batch,
            k0: batch,
            n_min,
            capacity: 16 * n_min,
            eps_floor: 0.01,
            class_balance: 0.5,
            level_mpp: 1.0,
            total_iterations: 1_000_000,
            clock: ClockMode::Real,
            uniform_sampling: false,
            mask_name: "wob".into(),
            learning_rate: 0.02,
            momentum: 0.9,
        }
    }
}

impl SamplerConfig {
    /// Small-footprint defaults used throughout the test suite.
    pub fn desk() -> Self {
        let batch = 8;
        let n_min = 8 * batch;
        SamplerConfig {
            patch_size: 64,
            batch_size: batch,
            k0: batch,
            n_min,
            capacity: 16 * n_min,
            total_iterations: 2_000,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch_size must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.k0 == 0 {
            return Err(Error::InvalidConfig("k0 must be >= 1".into()));
        }
        if self.n_min == 0 {
            return Err(Error::InvalidConfig("n_min must be >= 1".into()));
        }
        if self.n_min < self.batch_size {
            return Err(Error::InvalidConfig(
                "n_min must be at least one batch".into(),
            ));
        }
        if self.capacity < self.n_min {
            return Err(Error::PoolInfeasible {
                capacity: self.capacity,
                n_min: self.n_min,
            });
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::InvalidConfig("class_balance must be in [0,1]".into()));
        }
        if !(self.eps_floor >= 0.0) {
            return Err(Error::InvalidConfig("eps_floor must be >= 0".into()));
        }
        if !(self.level_mpp > 0.0) {
            return Err(Error::InvalidConfig("level_mpp must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if let ClockMode::Simulated {
            sec_per_error_pixel,
            sec_per_train_patch,
        } = self.clock
        {
            if !(sec_per_error_pixel >= 0.0) || !(sec_per_train_patch >= 0.0) {
                return Err(Error::InvalidConfig(
                    "simulated cost model must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn k_min(&self) -> usize {
        self.batch_size
    }

    pub fn k_max(&self) -> usize {
        K_MAX_FACTOR * self.batch_size
    }
}

/// Cumulative sampling table over the pixels of one class. Only pixels
/// with strictly positive weight are admitted, so the cumulative sums are
/// strictly increasing.
#[derive(Debug, Clone)]
struct CumTable {
    /// Flat pixel indices (row-major) with positive weight.
    idx: Vec<u32>,
    /// Cumulative weights, parallel to `idx`; strictly increasing.
    cum: Vec<f64>,
}

impl CumTable {
    fn new() -> Self {
        CumTable {
            idx: Vec::new(),
            cum: Vec::new(),
        }
    }

    fn push(&mut self, flat: u32, weight: f64) {
        if weight <= 0.0 {
            return;
        }
        let total = self.cum.last().copied().unwrap_or(0.0) + weight;
        self.idx.push(flat);
        self.cum.push(total);
    }

    fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    /// Inverse-CDF draw of one flat pixel index.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        debug_assert!(!self.is_empty());
        let u = rng.random_range(0.0..self.total());
        let pos = self.cum.partition_point(|&c| c <= u);
        self.idx[pos.min(self.idx.len() - 1)]
    }
}

/// Per-slide error field with class-conditional sampling tables.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub slide_id: String,
    pub level_mpp: f64,
    /// Per-pixel error e = |p - y| as a unit-float plane.
    pub error: Raster,
    /// Pixels predicted positive (p >= 0.5) whose label is 0.
    pub fp_count: u64,
    /// Number of completed parameter rendezvous at the time the snapshot
    /// used to compute this map was taken (provenance audit).
    pub params_version: u64,
    positive: CumTable,
    negative: CumTable,
}

impl ErrorMap {
    pub fn width(&self) -> usize {
        self.error.width()
    }

    pub fn height(&self) -> usize {
        self.error.height()
    }
}

/// Runs inference on one slide level and builds the error map against the
/// named ground-truth mask. Sampling weight per pixel is e + eps_floor;
/// zero-weight pixels are left out of the tables.
pub fn compute_error_map(
    params: &Params,
    slide: &Slide,
    level_mpp: f64,
    mask_name: &str,
    eps_floor: f64,
) -> Result<ErrorMap> {
    compute_error_map_mode(params, slide, level_mpp, mask_name, eps_floor, false)
}

fn compute_error_map_mode(
    params: &Params,
    slide: &Slide,
    level_mpp: f64,
    mask_name: &str,
    eps_floor: f64,
    uniform: bool,
) -> Result<ErrorMap> {
    let li = slide.level_index(level_mpp)?;
    let mask = slide
        .mask(mask_name, li)
        .ok_or_else(|| Error::MissingMask(mask_name.to_string()))?;
    let opts = InferOpts::auto(&params.config);
    let prob = predict_slide(params, slide, level_mpp, &opts)?;
    let p = prob.raster.floats()?;
    let y = mask.bytes()?;
    if p.len() != y.len() {
        return Err(Error::DimensionMismatch(
            "probability map and mask differ in size".into(),
        ));
    }
    let (w, h) = (prob.raster.width(), prob.raster.height());
    let mut err = vec![0f32; p.len()];
    let mut positive = CumTable::new();
    let mut negative = CumTable::new();
    let mut fp_count = 0u64;
    for i in 0..p.len() {
        let pi = p[i] as f64;
        let yi = y[i];
        let e = (pi - yi as f64).abs();
        err[i] = e as f32;
        if pi >= 0.5 && yi == 0 {
            fp_count += 1;
        }
        let weight = if uniform { 1.0 } else { e + eps_floor };
        if yi != 0 {
            positive.push(i as u32, weight);
        } else {
            negative.push(i as u32, weight);
        }
    }
    Ok(ErrorMap {
        slide_id: slide.id.clone(),
        level_mpp,
        error: Raster::from_floats(w, h, 1, err)?,
        fp_count,
        params_version: 0,
        positive,
        negative,
    })
}

/// Draws `n` patch centers: round(n * class_balance) from the positive
/// table and the rest from the negative table, each by inverse CDF. If one
/// class has no admissible pixels, all centers come from the other.
/// Returns (x, y, is_positive) triples.
pub fn sample_centers<R: Rng + ?Sized>(
    map: &ErrorMap,
    n: usize,
    class_balance: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize, bool)>> {
    if n == 0 {
        return Err(Error::invalid("cannot sample zero centers"));
    }
    if !(0.0..=1.0).contains(&class_balance) {
        return Err(Error::InvalidConfig("class_balance must be in [0,1]".into()));
    }
    if map.positive.is_empty() && map.negative.is_empty() {
        return Err(Error::invalid("empty error map: no pixels to sample"));
    }
    let mut n_pos = (n as f64 * class_balance).round() as usize;
    n_pos = n_pos.min(n);
    if map.positive.is_empty() {
        n_pos = 0;
    } else if map.negative.is_empty() {
        n_pos = n;
    }
    let w = map.width();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_pos {
        let flat = map.positive.draw(rng) as usize;
        out.push((flat % w, flat / w, true));
    }
    for _ in n_pos..n {
        let flat = map.negative.draw(rng) as usize;
        out.push((flat % w, flat / w, false));
    }
    Ok(out)
}

/// Crops a patch_size x patch_size window (image + ground-truth mask)
/// around `center` at the given level. Windows that would cross the slide
/// boundary are shifted minimally inward.
pub fn extract_training_patch(
    slide: &Slide,
    level_mpp: f64,
    mask_name: &str,
    center: (usize, usize),
    patch_size: usize,
) -> Result<(Raster, Raster)> {
    let li = slide.level_index(level_mpp)?;
    let raster = &slide.levels()[li].raster;
    let (w, h) = (raster.width(), raster.height());
    if patch_size == 0 {
        return Err(Error::InvalidConfig("patch_size must be >= 1".into()));
    }
    if patch_size > w || patch_size > h {
        return Err(Error::OutOfBounds(format!(
            "patch size {patch_size} exceeds level dimensions {w}x{h}"
        )));
    }
    let mask = slide
        .mask(mask_name, li)
        .ok_or_else(|| Error::MissingMask(mask_name.to_string()))?;
    let half = patch_size / 2;
    let x0 = center.0.saturating_sub(half).min(w - patch_size);
    let y0 = center.1.saturating_sub(half).min(h - patch_size);
    let patch = raster.crop(x0, y0, patch_size, patch_size)?;
    let mask = mask.crop(x0, y0, patch_size, patch_size)?;
    Ok((patch, mask))
}

/// Picks the next slide for the error worker. Slides that have never been
/// visited (fp count `None`) are taken first in index order; once all have
/// been visited, selection is random with probability proportional to
/// fp_count + 1.
pub fn choose_next_slide<R: Rng + ?Sized>(
    fp_counts: &[Option<u64>],
    rng: &mut R,
) -> Result<usize> {
    if fp_counts.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if let Some(i) = fp_counts.iter().position(|c| c.is_none()) {
        return Ok(i);
    }
    let weights: Vec<u64> = fp_counts
        .iter()
        .map(|c| c.unwrap().saturating_add(1))
        .collect();
    let total: u64 = weights.iter().sum();
    let mut u = rng.random_range(0..total);
    for (i, &wt) in weights.iter().enumerate() {
        if u < wt {
            return Ok(i);
        }
        u -= wt;
    }
    Ok(fp_counts.len() - 1)
}

/// Updates the patch quota from the previous cycle's phase durations:
/// k_n = clamp(round(k_prev * clamp(T_error / max(T_train, eps), 0.5, 2.0)),
/// batch_size, 64 * batch_size). A slow error worker grows the training
/// side's quota; a slow training side shrinks it.
pub fn adjust_k(k_prev: usize, t_error: f64, t_train: f64, batch_size: usize) -> usize {
    let ratio = (t_error / t_train.max(TIME_EPS)).clamp(0.5, 2.0);
    let k = (k_prev as f64 * ratio).round() as i64;
    let k_min = batch_size as i64;
    let k_max = (K_MAX_FACTOR * batch_size) as i64;
    k.clamp(k_min, k_max) as usize
}

/// One training example held by the pool.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub patch: Raster,
    pub mask: Raster,
    pub slide_id: String,
    /// Content fingerprint used to keep batches free of byte-identical
    /// duplicates where the pool allows it.
    hash: u64,
}

impl PoolEntry {
    pub fn new(patch: Raster, mask: Raster, slide_id: String) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        if let Ok(b) = patch.bytes() {
            eat(b);
        }
        if let Ok(b) = mask.bytes() {
            eat(b);
        }
        PoolEntry {
            patch,
            mask,
            slide_id,
            hash: h,
        }
    }

    fn same_content(&self, other: &PoolEntry) -> bool {
        self.hash == other.hash
            && self.patch.bytes().ok() == other.patch.bytes().ok()
            && self.mask.bytes().ok() == other.mask.bytes().ok()
    }
}

/// Bounded ring buffer of training examples. Insertions overwrite the
/// oldest entry once the pool is full.
#[derive(Debug)]
pub struct PatchPool {
    capacity: usize,
    n_min: usize,
    entries: Vec<PoolEntry>,
    write: usize,
}

impl PatchPool {
    pub fn new(capacity: usize, n_min: usize) -> Result<Self> {
        if n_min == 0 {
            return Err(Error::InvalidConfig("n_min must be >= 1".into()));
        }
        if capacity < n_min {
            return Err(Error::PoolInfeasible { capacity, n_min });
        }
        Ok(PatchPool {
            capacity,
            n_min,
            entries: Vec::new(),
            write: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_min(&self) -> usize {
        self.n_min
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True once the fill has reached n_min (training may begin).
    pub fn is_ready(&self) -> bool {
        self.entries.len() >= self.n_min
    }

    pub fn push(&mut self, entry: PoolEntry) {
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.write] = entry;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    /// Draws `batch` distinct entries uniformly without replacement.
    /// Among the drawn entries, byte-identical duplicates are swapped for
    /// unused entries when the pool holds enough distinct content.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<&PoolEntry>> {
        if batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if batch > self.entries.len() {
            return Err(Error::invalid(format!(
                "batch {} exceeds pool fill {}",
                batch,
                self.entries.len()
            )));
        }
        let n = self.entries.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..batch {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        // Replace in-batch duplicates with unused entries when possible.
        let mut spare = batch;
        for i in 1..batch {
            let mut dup = (0..i).any(|p| {
                self.entries[order[p]].same_content(&self.entries[order[i]])
            });
            while dup && spare < n {
                order.swap(i, spare);
                spare += 1;
                dup = (0..i).any(|p| {
                    self.entries[order[p]].same_content(&self.entries[order[i]])
                });
            }
        }
        Ok(order[..batch].iter().map(|&i| &self.entries[i]).collect())
    }
}

/// Per-cycle protocol accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleStats {
    pub cycle: usize,
    /// Patch quota in effect during this cycle.
    pub k_n: usize,
    /// Duration of the error-map phase (seconds, wall or simulated).
    pub t_error: f64,
    /// Duration of the sampling + training phase.
    pub t_train: f64,
    /// Time the error worker spent waiting at the rendezvous.
    pub idle_error: f64,
    /// Time the training worker spent waiting at the rendezvous.
    pub idle_train: f64,
    /// Pool fill at the rendezvous.
    pub pool_fill: usize,
    /// Mean minibatch loss over this cycle's iterations (0 when the cycle
    /// ran no iterations).
    pub loss_mean: f64,
}

/// Writes the per-cycle statistics as CSV.
pub fn write_stats_csv(path: &Path, stats: &[CycleStats]) -> Result<()> {
    let mut out = String::from(
        "cycle,k_n,T_error,T_train,idle_error,idle_train,pool_fill,loss_mean\n",
    );
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.cycle,
            s.k_n,
            s.t_error,
            s.t_train,
            s.idle_error,
            s.idle_train,
            s.pool_fill,
            s.loss_mean
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Outcome of the sampling + training phase of one cycle.
struct TrainPhase {
    sampled: usize,
    iterations: usize,
    loss_mean: f64,
}

/// Shared state owned by the training worker.
struct Trainer<'a> {
    slides: &'a [Slide],
    cfg: &'a SamplerConfig,
    pipeline: &'a AugmentPipeline,
    pool: PatchPool,
    params: Params,
    opt: Sgd,
    rng: rand_chacha::ChaCha8Rng,
    iters_done: u64,
}

impl<'a> Trainer<'a> {
    /// Samples `k` patches from `map` (belonging to `slide_idx`) into the
    /// pool, then — once the pool is ready — runs ceil(k / batch)
    /// iterations. The readiness gate is evaluated before this cycle's
    /// sampling so training never starts on an under-filled pool.
    fn run_phase(&mut self, pending: Option<(usize, &ErrorMap)>, k: usize) -> Result<TrainPhase> {
        let cfg = self.cfg;
        let ready = self.pool.is_ready();
        let mut sampled = 0usize;
        if let Some((slide_idx, map)) = pending {
            let slide = &self.slides[slide_idx];
            let centers = sample_centers(map, k, cfg.class_balance, &mut self.rng)?;
            let in_ch = self.params.config.input_channels;
            for (x, y, _) in centers {
                let (patch, mask) = extract_training_patch(
                    slide,
                    cfg.level_mpp,
                    &cfg.mask_name,
                    (x, y),
                    cfg.patch_size,
                )?;
                let patch = patch.take_channels(in_ch)?;
                let (patch, mask) = self.pipeline.apply(&patch, &mask, &mut self.rng)?;
                self.pool
                    .push(PoolEntry::new(patch, mask, slide.id.clone()));
                sampled += 1;
            }
        }
        let mut iterations = 0usize;
        let mut loss_sum = 0.0;
        if ready && pending.is_some() {
            let iters = k.div_ceil(cfg.batch_size);
            for _ in 0..iters {
                let entries = self.pool.sample_batch(cfg.batch_size, &mut self.rng)?;
                let batch: Vec<(&Raster, &Raster)> =
                    entries.iter().map(|e| (&e.patch, &e.mask)).collect();
                let (loss, grad) = loss_and_grad(&self.params, &batch)?;
                self.opt.step(&mut self.params, &grad);
                loss_sum += loss;
                iterations += 1;
                self.iters_done += 1;
            }
        }
        Ok(TrainPhase {
            sampled,
            iterations,
            loss_mean: if iterations > 0 {
                loss_sum / iterations as f64
            } else {
                0.0
            },
        })
    }
}

fn precheck_dataset(slides: &[Slide], cfg: &SamplerConfig) -> Result<()> {
    if slides.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    for slide in slides {
        let li = slide.level_index(cfg.level_mpp)?;
        if slide.mask(&cfg.mask_name, li).is_none() {
            return Err(Error::MissingMask(format!(
                "{} (slide {})",
                cfg.mask_name, slide.id
            )));
        }
        let raster = &slide.levels()[li].raster;
        if cfg.patch_size > raster.width() || cfg.patch_size > raster.height() {
            return Err(Error::OutOfBounds(format!(
                "patch size {} exceeds slide {} level dimensions {}x{}",
                cfg.patch_size,
                slide.id,
                raster.width(),
                raster.height()
            )));
        }
    }
    Ok(())
}

fn initial_params(model_cfg: &FcnConfig, init: Option<Params>, seed: u64) -> Result<Params> {
    match init {
        Some(p) => {
            if p.config != *model_cfg {
                return Err(Error::InvalidConfig(
                    "initial parameters were built for a different predictor config".into(),
                ));
            }
            Ok(p)
        }
        None => init_params(model_cfg, crate::synth::splitmix64(seed ^ 0x1217_90D5_BA1C_71A5)),
    }
}

/// Runs the full two-worker protocol and returns the trained parameters
/// plus per-cycle statistics. `init` warm-starts the parameters (used for
/// finetuning); otherwise they are freshly initialized from `seed`.
pub fn run_protocol(
    slides: &[Slide],
    cfg: &SamplerConfig,
    pipeline: &AugmentPipeline,
    model_cfg: &FcnConfig,
    init: Option<Params>,
    seed: u64,
) -> Result<(Params, Vec<CycleStats>)> {
    run_protocol_impl(slides, cfg, pipeline, model_cfg, init, seed, None)
}

pub(crate) fn run_protocol_impl(
    slides: &[Slide],
    cfg: &SamplerConfig,
    pipeline: &AugmentPipeline,
    model_cfg: &FcnConfig,
    init: Option<Params>,
    seed: u64,
    mut version_probe: Option<&mut Vec<(usize, u64)>>,
) -> Result<(Params, Vec<CycleStats>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    precheck_dataset(slides, cfg)?;
    let params = initial_params(model_cfg, init, seed)?;
    if cfg.total_iterations == 0 {
        return Ok((params, Vec::new()));
    }
    let pool = PatchPool::new(cfg.capacity, cfg.n_min)?;
    let n_params = params.values.len();
    let trainer = Trainer {
        slides,
        cfg,
        pipeline,
        pool,
        params,
        opt: Sgd::new(n_params, cfg.learning_rate, cfg.momentum),
        rng: sub_rng(seed, 0x7261_696e),
        iters_done: 0,
    };
    let rng_err = sub_rng(seed, 0x6572_726f);
    match cfg.clock {
        ClockMode::Simulated {
            sec_per_error_pixel,
            sec_per_train_patch,
        } => run_simulated(
            trainer,
            rng_err,
            sec_per_error_pixel,
            sec_per_train_patch,
            &mut version_probe,
        ),
        ClockMode::Real => run_real(trainer, rng_err),
    }
}

fn cycle_stats(
    cycle: usize,
    k: usize,
    t_error: f64,
    t_train: f64,
    pool_fill: usize,
    loss_mean: f64,
) -> CycleStats {
    CycleStats {
        cycle,
        k_n: k,
        t_error,
        t_train,
        idle_error: (t_train - t_error).max(0.0),
        idle_train: (t_error - t_train).max(0.0),
        pool_fill,
        loss_mean,
    }
}

fn run_simulated(
    mut trainer: Trainer<'_>,
    mut rng_err: rand_chacha::ChaCha8Rng,
    sec_per_error_pixel: f64,
    sec_per_train_patch: f64,
    version_probe: &mut Option<&mut Vec<(usize, u64)>>,
) -> Result<(Params, Vec<CycleStats>)> {
    let cfg = trainer.cfg;
    let mut fp: Vec<Option<u64>> = vec![None; trainer.slides.len()];
    let mut stats = Vec::new();
    let mut pending: Option<(usize, ErrorMap)> = None;
    let mut k = cfg.k0;
    let mut version = 0u64;
    let mut cycle = 0usize;
    loop {
        // Error phase. Runs on the parameter snapshot from the last
        // rendezvous, which in a sequential simulation is simply the
        // params before this cycle's training updates.
        let slide_idx = choose_next_slide(&fp, &mut rng_err)?;
        let mut map = compute_error_map_mode(
            &trainer.params,
            &trainer.slides[slide_idx],
            cfg.level_mpp,
            &cfg.mask_name,
            cfg.eps_floor,
            cfg.uniform_sampling,
        )?;
        map.params_version = version;
        if let Some(probe) = version_probe.as_deref_mut() {
            probe.push((cycle, map.params_version));
        }
        let t_error = (map.width() * map.height()) as f64 * sec_per_error_pixel;

        // Training phase, concurrent in the real pipeline.
        let phase = trainer.run_phase(pending.as_ref().map(|(i, m)| (*i, m)), k)?;
        let t_train =
            (phase.sampled + phase.iterations * cfg.batch_size) as f64 * sec_per_train_patch;

        // Rendezvous.
        version += 1;
        fp[slide_idx] = Some(map.fp_count);
        stats.push(cycle_stats(
            cycle,
            k,
            t_error,
            t_train,
            trainer.pool.len(),
            phase.loss_mean,
        ));
        if phase.iterations > 0 {
            k = adjust_k(k, t_error, t_train, cfg.batch_size);
        }
        pending = Some((slide_idx, map));
        cycle += 1;
        if trainer.iters_done >= cfg.total_iterations {
            return Ok((trainer.params, stats));
        }
    }
}

/// Message sent to the error worker at each rendezvous (`run_real`).
struct ErrorJob {
    params: Params,
    version: u64,
}

/// Result returned by the error worker.
struct ErrorDone {
    slide_idx: usize,
    map: ErrorMap,
    t_error: f64,
}

fn run_real(
    mut trainer: Trainer<'_>,
    mut rng_err: rand_chacha::ChaCha8Rng,
) -> Result<(Params, Vec<CycleStats>)> {
    let cfg = trainer.cfg;
    let slides = trainer.slides;
    let (job_tx, job_rx) = mpsc::channel::<ErrorJob>();
    let (done_tx, done_rx) = mpsc::channel::<Result<ErrorDone>>();
    std::thread::scope(|scope| -> Result<(Params, Vec<CycleStats>)> {
        // Error worker: owns slide choice and fp bookkeeping; sees only
        // complete parameter snapshots delivered at rendezvous.
        scope.spawn(move || {
            let mut fp: Vec<Option<u64>> = vec![None; slides.len()];
            while let Ok(job) = job_rx.recv() {
                let started = Instant::now();
                let result = choose_next_slide(&fp, &mut rng_err).and_then(|slide_idx| {
                    let mut map = compute_error_map_mode(
                        &job.params,
                        &slides[slide_idx],
                        cfg.level_mpp,
                        &cfg.mask_name,
                        cfg.eps_floor,
                        cfg.uniform_sampling,
                    )?;
                    map.params_version = job.version;
                    fp[slide_idx] = Some(map.fp_count);
                    Ok(ErrorDone {
                        slide_idx,
                        map,
                        t_error: started.elapsed().as_secs_f64(),
                    })
                });
                if done_tx.send(result).is_err() {
                    break;
                }
            }
        });

        let mut stats = Vec::new();
        let mut pending: Option<(usize, ErrorMap)> = None;
        let mut k = cfg.k0;
        let mut version = 0u64;
        let mut cycle = 0usize;
        loop {
            job_tx
                .send(ErrorJob {
                    params: trainer.params.clone(),
                    version,
                })
                .map_err(|_| Error::invalid("error worker exited unexpectedly"))?;

            let started = Instant::now();
            let phase = trainer.run_phase(pending.as_ref().map(|(i, m)| (*i, m)), k)?;
            let t_train = started.elapsed().as_secs_f64();

            // Rendezvous: wait for the error worker and exchange.
            let done = done_rx
                .recv()
                .map_err(|_| Error::invalid("error worker exited unexpectedly"))??;
            version += 1;
            stats.push(cycle_stats(
                cycle,
                k,
                done.t_error,
                t_train,
                trainer.pool.len(),
                phase.loss_mean,
            ));
            if phase.iterations > 0 {
                k = adjust_k(k, done.t_error, t_train, cfg.batch_size);
            }
            pending = Some((done.slide_idx, done.map));
            cycle += 1;
            if trainer.iters_done >= cfg.total_iterations {
                drop(job_tx);
                return Ok((trainer.params, stats));
            }
        }
    })
}
