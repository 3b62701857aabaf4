//! Content-adaptive multi-scale rendering.
//!
//! The mean absolute shift modulation of a latent code is used as a proxy for
//! local signal complexity. A [`Scale2ModsTable`] maps intervals of that
//! (normalized) statistic to the smallest rendering scale whose bilinear
//! upsampling stays within an MSE threshold of a full-resolution render.
//! [`cmsr_render`] uses the table to render each region only at its minimal
//! scale and bilinearly chains the partial results up to the target.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::coord::{bilinear_resize, cell_of, feature_unfold, nearest_index, output_extent, pixel_center};
use crate::cost::StageCosts;
use crate::decoder::{latent_stage_counted, render_stage_counted, LmfModel, Mask, ModulationGrid, RenderRequest};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;

/// Affine map from raw mean-|beta| values to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub min: f64,
    pub max: f64,
}

impl Calibration {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut it = values.into_iter();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Calibration { min, max })
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.min < self.max)
    }

    /// Clamped to `[0, 1]`; a degenerate calibration maps everything to 0.
    pub fn normalize(&self, raw: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    fn merge(self, other: Calibration) -> Calibration {
        Calibration {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Per-latent-code modulation intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMeanMap {
    height: usize,
    width: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
    pub calibration: Calibration,
    /// set when the calibration range is empty and all normalized values are 0
    pub degenerate: bool,
}

impl ModulationMeanMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw(&self, y: usize, x: usize) -> f64 {
        self.raw[y * self.width + x]
    }

    pub fn normalized(&self, y: usize, x: usize) -> f64 {
        self.normalized[y * self.width + x]
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized_values(&self) -> &[f64] {
        &self.normalized
    }

    /// Normalized mean of the code nearest to every pixel of an `out_h x out_w` image.
    pub fn per_pixel(&self, out_h: usize, out_w: usize) -> Vec<f64> {
        governing_codes(self.height, self.width, out_h, out_w)
            .map(|i| self.normalized[i])
            .collect()
    }
}

/// Row-major index of the governing (nearest) latent code for each output pixel.
pub fn governing_codes(h: usize, w: usize, out_h: usize, out_w: usize) -> impl Iterator<Item = usize> {
    let cols: Vec<usize> = (0..out_w).map(|x| nearest_index(pixel_center(x, out_w), w)).collect();
    (0..out_h).flat_map(move |y| {
        let row = nearest_index(pixel_center(y, out_h), h) * w;
        cols.clone().into_iter().map(move |c| row + c)
    })
}

/// Mean of |beta| over every modulated layer and channel, per code.
pub fn raw_shift_means(mods: &ModulationGrid) -> Vec<f64> {
    let n = (mods.layout.k * mods.layout.hidden).max(1) as f64;
    let mut out = Vec::with_capacity(mods.height() * mods.width());
    for y in 0..mods.height() {
        for x in 0..mods.width() {
            out.push(mods.betas(y, x).map(f64::abs).sum::<f64>() / n);
        }
    }
    out
}

pub fn shift_modulation_means(mods: &ModulationGrid, calib: Option<Calibration>) -> ModulationMeanMap {
    let raw = raw_shift_means(mods);
    let calibration = calib
        .or_else(|| Calibration::from_values(raw.iter().copied()))
        .unwrap_or(Calibration { min: 0.0, max: 0.0 });
    let degenerate = calibration.is_degenerate();
    if degenerate {
        log::warn!("degenerate modulation-mean calibration; normalized map is flat");
    }
    let normalized = raw.iter().map(|&m| calibration.normalize(m)).collect();
    ModulationMeanMap {
        height: mods.height(),
        width: mods.width(),
        raw,
        normalized,
        calibration,
        degenerate,
    }
}

/// MSE over the masked pixels and all channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteredMse {
    pub mse: f64,
    pub pixels: usize,
}

impl FilteredMse {
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

pub fn filtered_mse(a: &Image, b: &Image, mask: &Mask) -> Result<FilteredMse> {
    if a.dims() != b.dims() || (mask.height, mask.width) != (a.height(), a.width()) {
        return Err(Error::shape("filtered_mse needs equal dims"));
    }
    let c = a.channels();
    let mut sum = 0.0;
    let mut pixels = 0;
    for (i, &on) in mask.bits().iter().enumerate() {
        if on {
            pixels += 1;
            for k in 0..c {
                let d = a.data()[i * c + k] - b.data()[i * c + k];
                sum += d * d;
            }
        }
    }
    let mse = if pixels == 0 { 0.0 } else { sum / (pixels * c) as f64 };
    Ok(FilteredMse { mse, pixels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleInterval {
    pub scale: f64,
    pub m_min: f64,
    pub m_max: f64,
}

impl ScaleInterval {
    /// Half-open `[m_min, m_max)`; closed at the top when the interval reaches 1.
    pub fn contains(&self, m: f64) -> bool {
        m >= self.m_min && (m < self.m_max || (self.m_max >= 1.0 && m <= self.m_max))
    }
}

/// Outcome of a table query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleChoice {
    Scale(f64),
    /// above every interval: render at the requested target scale
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scale2ModsTable {
    entries: Vec<ScaleInterval>,
    pub tau: f64,
    pub u: f64,
    pub calibration: Calibration,
}

const TABLE_MAGIC: &str = "scale2mods";
const TABLE_VERSION: u32 = 1;

impl Scale2ModsTable {
    pub fn new(entries: Vec<ScaleInterval>, tau: f64, u: f64, calibration: Calibration) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("table needs at least one scale"));
        }
        if entries[0].m_min != 0.0 {
            return Err(Error::domain("first interval must start at 0"));
        }
        for (i, e) in entries.iter().enumerate() {
            if !(e.scale >= 1.0) || !e.scale.is_finite() {
                return Err(Error::domain(format!("scale {} must be >= 1", e.scale)));
            }
            if !(e.m_min <= e.m_max) || e.m_max > 1.0 {
                return Err(Error::domain(format!("interval for scale {} is malformed", e.scale)));
            }
            if i > 0 {
                let prev = &entries[i - 1];
                if !(prev.scale < e.scale) {
                    return Err(Error::domain("scales must be strictly increasing"));
                }
                if prev.m_max != e.m_min {
                    return Err(Error::domain(format!(
                        "intervals not contiguous at scale {}: {} != {}",
                        e.scale, prev.m_max, e.m_min
                    )));
                }
            }
        }
        if !(tau > 0.0) || !(u > 0.0 && u <= 1.0) {
            return Err(Error::domain("need tau > 0 and 0 < u <= 1"));
        }
        Ok(Scale2ModsTable {
            entries,
            tau,
            u,
            calibration,
        })
    }

    /// Every mean mapped to a single scale.
    pub fn single(scale: f64, calibration: Calibration) -> Result<Self> {
        Scale2ModsTable::new(
            vec![ScaleInterval {
                scale,
                m_min: 0.0,
                m_max: 1.0,
            }],
            f64::INFINITY,
            0.01,
            calibration,
        )
    }

    pub fn entries(&self) -> &[ScaleInterval] {
        &self.entries
    }

    pub fn scales(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.scale).collect()
    }

    /// Index of the smallest scale whose interval contains `m`.
    pub fn assign(&self, m: f64) -> Option<usize> {
        self.entries.iter().position(|e| e.contains(m))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TABLE_MAGIC} v{TABLE_VERSION}");
        let _ = writeln!(s, "tau {:.16e}", self.tau);
        let _ = writeln!(s, "u {:.16e}", self.u);
        let _ = writeln!(
            s,
            "calibration {:.16e} {:.16e}",
            self.calibration.min, self.calibration.max
        );
        let _ = writeln!(s, "scales {}", self.entries.len());
        for e in &self.entries {
            let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", e.scale, e.m_min, e.m_max);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').map(|l| {
            let start = offset;
            offset += l.len();
            (start, l.trim())
        });
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            loop {
                match lines.next() {
                    Some((_, "")) => continue,
                    Some((at, l)) => return Ok((at, l.split_whitespace().collect())),
                    None => {
                        return Err(Error::Parse {
                            offset: text.len(),
                            msg: format!("missing {what}"),
                        })
                    }
                }
            }
        };
        let num = |at: usize, tok: &str| -> Result<f64> {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                offset: at,
                msg: format!("bad number '{tok}'"),
            })
        };
        let (at, head) = next("header")?;
        if head.first() != Some(&TABLE_MAGIC) || head.len() != 2 {
            return Err(Error::Parse {
                offset: at,
                msg: "not a scale2mods table".into(),
            });
        }
        let version: u32 = head[1]
            .strip_prefix('v')
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: at,
                msg: "bad version".into(),
            })?;
        if version != TABLE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: TABLE_VERSION,
            });
        }
        let mut field = |key: &str, n: usize| -> Result<(usize, Vec<String>)> {
            let (at, toks) = next(key)?;
            if toks.first() != Some(&key) || toks.len() != n + 1 {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("expected '{key}' with {n} values"),
                });
            }
            Ok((at, toks[1..].iter().map(|s| s.to_string()).collect()))
        };
        let (at, t) = field("tau", 1)?;
        let tau = num(at, &t[0])?;
        let (at, t) = field("u", 1)?;
        let u = num(at, &t[0])?;
        let (at, t) = field("calibration", 2)?;
        let calibration = Calibration {
            min: num(at, &t[0])?,
            max: num(at, &t[1])?,
        };
        let (at, t) = field("scales", 1)?;
        let n: usize = t[0].parse().map_err(|_| Error::Parse {
            offset: at,
            msg: "bad scale count".into(),
        })?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let (at, toks) = next("scale row")?;
            if toks.len() != 3 {
                return Err(Error::Parse {
                    offset: at,
                    msg: "scale row needs 3 values".into(),
                });
            }
            entries.push(ScaleInterval {
                scale: num(at, toks[0])?,
                m_min: num(at, toks[1])?,
                m_max: num(at, toks[2])?,
            });
        }
        Scale2ModsTable::new(entries, tau, u, calibration)
    }
}

/// Smallest table scale covering `m`, or the target-scale sentinel.
pub fn query_min_scale(table: &Scale2ModsTable, m: f64) -> ScaleChoice {
    match table.assign(m) {
        Some(k) => ScaleChoice::Scale(table.entries[k].scale),
        None => ScaleChoice::Target,
    }
}

/// Mean grid `{0, u, 2u, ...}` clipped to `[0, 1]`.
fn mean_grid(u: f64) -> Vec<f64> {
    let n = (1.0 / u + 1e-9).floor() as usize;
    (0..=n)
        .map(|l| {
            let m = l as f64 * u;
            if (m - 1.0).abs() < 1e-9 {
                1.0
            } else {
                m
            }
        })
        .collect()
}

/// Bucket `l` holds means in `[m_l - u/2, m_l + u/2)`.
fn bucket_of(m: f64, grid: &[f64], u: f64) -> Option<usize> {
    let guess = (m / u + 0.5).floor();
    if guess < 0.0 {
        return None;
    }
    let g = guess as usize;
    for l in [g.wrapping_sub(1), g, g + 1] {
        if let Some(&c) = grid.get(l) {
            if m >= c - u / 2.0 && m < c + u / 2.0 {
                return Some(l);
            }
        }
    }
    None
}

fn encode_unfolded(model: &LmfModel, img: &Image, costs: &mut StageCosts) -> Result<FeatureMap> {
    img.ensure_finite()?;
    if img.channels() != model.encoder.in_channels() {
        return Err(Error::shape("image channels do not match the model"));
    }
    Ok(feature_unfold(&model.encoder.encode_counted(img, &mut costs.encoder)?))
}

fn extent(img: &Image, s: f64) -> Result<(usize, usize)> {
    Ok((output_extent(img.height(), s)?, output_extent(img.width(), s)?))
}

fn render_full(model: &LmfModel, unfolded: &FeatureMap, out_h: usize, out_w: usize) -> Result<Image> {
    let mut costs = StageCosts::default();
    let mods = latent_stage_counted(model, unfolded, cell_of(out_h, out_w)?, &mut costs.latent)?;
    Ok(render_stage_counted(model, &mods, &RenderRequest::full(out_h, out_w))?.0)
}

/// Per-image data for table construction: per-bucket error sums at every scale.
struct ImageProfile {
    /// `[scale][bucket] -> (squared error sum, pixels)`
    buckets: Vec<Vec<(f64, usize)>>,
}

/// Build a Scale2Mods table under MSE threshold `tau`.
///
/// The reference for each image is a full render at the largest scale. Scales
/// are processed in ascending order; each scans mean buckets upward from the
/// previous scale's reach and stops at the first bucket whose error exceeds
/// `tau` on any image. Buckets with no pixels do not stop the scan.
pub fn build_scale2mods_table(
    model: &LmfModel,
    images: &[Image],
    tau: f64,
    scales: &[f64],
    u: f64,
) -> Result<Scale2ModsTable> {
    if images.is_empty() {
        return Err(Error::domain("table construction needs at least one image"));
    }
    if scales.is_empty() || scales.windows(2).any(|w| !(w[0] < w[1])) || scales[0] < 1.0 {
        return Err(Error::domain("scales must be non-empty, >= 1 and strictly increasing"));
    }
    if !(tau > 0.0) || !(u > 0.0 && u <= 1.0) {
        return Err(Error::domain("need tau > 0 and 0 < u <= 1"));
    }
    let s_top = *scales.last().unwrap();

    // raw means at the reference cell, and the shared calibration
    let prepared: Vec<(FeatureMap, ModulationGrid, (usize, usize))> = images
        .par_iter()
        .map(|img| {
            let unfolded = encode_unfolded(model, img, &mut StageCosts::default())?;
            let (th, tw) = extent(img, s_top)?;
            let mods = latent_stage_counted(model, &unfolded, cell_of(th, tw)?, &mut Default::default())?;
            Ok((unfolded, mods, (th, tw)))
        })
        .collect::<Result<_>>()?;
    let calibration = prepared
        .iter()
        .filter_map(|(_, mods, _)| Calibration::from_values(raw_shift_means(mods)))
        .reduce(Calibration::merge)
        .expect("non-empty image list");
    if calibration.is_degenerate() {
        log::warn!("all training codes share one modulation mean; table maps everything to the first bucket");
    }

    let grid = mean_grid(u);
    let profiles: Vec<ImageProfile> = prepared
        .par_iter()
        .map(|(unfolded, mods, (th, tw))| {
            let means = shift_modulation_means(mods, Some(calibration)).per_pixel(*th, *tw);
            let bucket: Vec<Option<usize>> = means.iter().map(|&m| bucket_of(m, &grid, u)).collect();
            let reference = render_stage_counted(model, mods, &RenderRequest::full(*th, *tw))?.0;
            let c = reference.channels();
            let mut buckets = Vec::with_capacity(scales.len());
            for &s in scales {
                let (h, w) = (
                    output_extent(unfolded.height(), s)?,
                    output_extent(unfolded.width(), s)?,
                );
                let approx = if (h, w) == (*th, *tw) {
                    reference.clone()
                } else {
                    bilinear_resize(&render_full(model, unfolded, h, w)?, *th, *tw)?
                };
                let mut acc = vec![(0.0, 0usize); grid.len()];
                for (i, b) in bucket.iter().enumerate() {
                    if let Some(l) = *b {
                        let mut e = 0.0;
                        for k in 0..c {
                            let d = reference.data()[i * c + k] - approx.data()[i * c + k];
                            e += d * d;
                        }
                        acc[l].0 += e;
                        acc[l].1 += c;
                    }
                }
                buckets.push(acc);
            }
            Ok(ImageProfile { buckets })
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(scales.len());
    let mut m_min_idx: Option<usize> = Some(0);
    let mut m_min = 0.0;
    for (k, &s) in scales.iter().enumerate() {
        let mut m_max = m_min;
        if let Some(start) = m_min_idx {
            let reach = profiles
                .iter()
                .map(|p| {
                    let mut last = None;
                    for l in start..grid.len() {
                        let (sum, n) = p.buckets[k][l];
                        if n > 0 && sum / n as f64 > tau {
                            break;
                        }
                        last = Some(l);
                    }
                    last
                })
                .min()
                .flatten();
            if let Some(l) = reach {
                m_max = grid[l];
                m_min_idx = Some(l);
            }
        }
        entries.push(ScaleInterval { scale: s, m_min, m_max });
        m_min = m_max;
    }
    let table = Scale2ModsTable::new(entries, tau, u, calibration)?;
    debug_assert!(table.entries.windows(2).all(|w| w[0].m_max == w[1].m_min));
    Ok(table)
}

/// Result of a CMSR pass with its cost and coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct CmsrOutput {
    pub image: Image,
    /// render-MLP pixel evaluations across every stage
    pub rendered_pixels: usize,
    /// pixels a full render at the target would evaluate
    pub full_pixels: usize,
    pub costs: StageCosts,
    /// `(scale, rendered pixels)` per executed stage
    pub stages: Vec<(f64, usize)>,
    /// per target pixel: the table index it was assigned to, `None` for the target sentinel
    pub assignment: Vec<Option<usize>>,
    /// per target pixel: normalized mean of its governing code
    pub pixel_means: Vec<f64>,
}

pub fn cmsr_render(model: &LmfModel, img_lr: &Image, s_target: f64, table: &Scale2ModsTable) -> Result<Image> {
    cmsr_render_detailed(model, img_lr, s_target, table).map(|o| o.image)
}

/// Multi-scale rendering following the table's scale ladder.
///
/// Stage `k` bilinearly upsamples the running image to scale `s_k` and
/// re-renders only pixels whose governing code is assigned to `s_k`, with
/// modulations recomputed at that stage's cell. Once a ladder scale exceeds the
/// target, or the ladder runs out, the running image is resized to the target
/// and every pixel not yet assigned is rendered there.
pub fn cmsr_render_detailed(
    model: &LmfModel,
    img_lr: &Image,
    s_target: f64,
    table: &Scale2ModsTable,
) -> Result<CmsrOutput> {
    let mut costs = StageCosts::default();
    let (th, tw) = extent(img_lr, s_target)?;
    let unfolded = encode_unfolded(model, img_lr, &mut costs)?;
    let (h, w) = (unfolded.height(), unfolded.width());
    let target_mods = latent_stage_counted(model, &unfolded, cell_of(th, tw)?, &mut costs.latent)?;
    let means = shift_modulation_means(&target_mods, Some(table.calibration));
    let code_assign: Vec<Option<usize>> = means.normalized_values().iter().map(|&m| table.assign(m)).collect();

    let mut rendered = 0;
    let mut stages = Vec::new();
    let mut stage = |buffer: Image, s: f64, pick: &dyn Fn(Option<usize>) -> bool, costs: &mut StageCosts| -> Result<Image> {
        let (oh, ow) = (buffer.height(), buffer.width());
        let codes: Vec<usize> = governing_codes(h, w, oh, ow).collect();
        let mask = Mask::from_fn(oh, ow, |y, x| pick(code_assign[codes[y * ow + x]]));
        let n = mask.count();
        stages.push((s, n));
        if n == 0 {
            return Ok(buffer);
        }
        let own;
        let mods = if (oh, ow) == (th, tw) {
            &target_mods
        } else {
            own = latent_stage_counted(model, &unfolded, cell_of(oh, ow)?, &mut costs.latent)?;
            &own
        };
        let req = RenderRequest {
            out_h: oh,
            out_w: ow,
            mask: Some(mask),
            buffer: Some(buffer),
        };
        let (out, stats) = render_stage_counted(model, mods, &req)?;
        costs.render += stats.costs.render;
        rendered += stats.rendered_pixels;
        Ok(out)
    };

    let mut prev = img_lr.clone();
    let mut result = None;
    for (k, e) in table.entries().iter().enumerate() {
        if e.scale > s_target {
            let sr = bilinear_resize(&prev, th, tw)?;
            let remaining = move |a: Option<usize>| a.is_none_or(|j| j >= k);
            result = Some(stage(sr, s_target, &remaining, &mut costs)?);
            break;
        }
        let cur = bilinear_resize(&prev, output_extent(h, e.scale)?, output_extent(w, e.scale)?)?;
        prev = stage(cur, e.scale, &move |a: Option<usize>| a == Some(k), &mut costs)?;
        if code_assign.iter().all(|a| a.is_some_and(|j| j <= k)) {
            result = Some(bilinear_resize(&prev, th, tw)?);
            break;
        }
    }
    let image = match result {
        Some(img) => img,
        None => {
            let sr = bilinear_resize(&prev, th, tw)?;
            stage(sr, s_target, &|a: Option<usize>| a.is_none(), &mut costs)?
        }
    };
    let target_codes: Vec<usize> = governing_codes(h, w, th, tw).collect();
    Ok(CmsrOutput {
        image,
        rendered_pixels: rendered,
        full_pixels: th * tw,
        costs,
        stages,
        assignment: target_codes.iter().map(|&i| code_assign[i]).collect(),
        pixel_means: target_codes.iter().map(|&i| means.normalized_values()[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{upsample, ModLayout, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> LmfModel {
        let cfg = ModelConfig {
            channels: 3,
            encoder_width: Some(4),
            encoder_layers: 2,
            latent_layers: 2,
            layout: ModLayout {
                k: 2,
                hidden: 6,
                code: 5,
            },
        };
        LmfModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| r.gen())
    }

    fn grid_with_betas(vals: &[f64]) -> ModulationGrid {
        let layout = ModLayout {
            k: 2,
            hidden: 2,
            code: 1,
        };
        let mut data = Vec::new();
        for &b in vals {
            // alpha1, beta1, alpha2, beta2, z
            data.extend([9.0, 9.0, b, -b, 9.0, 9.0, b, b, 7.0]);
        }
        ModulationGrid::from_packed(1, vals.len(), layout, data).unwrap()
    }

    #[test]
    fn mean_of_absolute_shifts() {
        let zero = shift_modulation_means(&grid_with_betas(&[0.0, 0.0]), None);
        assert_eq!(zero.raw_values(), &[0.0, 0.0]);
        assert!(zero.degenerate);
        assert_eq!(zero.normalized_values(), &[0.0, 0.0]);
        let c = shift_modulation_means(&grid_with_betas(&[0.3, 0.3, 0.3]), None);
        assert!(c.raw_values().iter().all(|&m| (m - 0.3).abs() < 1e-15));
        assert!(c.degenerate);
        let m = shift_modulation_means(&grid_with_betas(&[0.1, 0.5, 0.3]), None);
        assert!(!m.degenerate);
        let n = m.normalized_values();
        assert!((n[0] - 0.0).abs() < 1e-12 && (n[1] - 1.0).abs() < 1e-12 && (n[2] - 0.5).abs() < 1e-12);
        let cal = Calibration { min: 0.2, max: 0.4 };
        let m = shift_modulation_means(&grid_with_betas(&[0.1, 0.5, 0.3]), Some(cal));
        assert_eq!(m.normalized_values()[0], 0.0);
        assert_eq!(m.normalized_values()[1], 1.0);
    }

    #[test]
    fn filtered_mse_examples() {
        let a = Image::new(2, 3, 3);
        let b = Image::filled(2, 3, 3, 1.0);
        let full = Mask::full(2, 3);
        assert_eq!(filtered_mse(&a, &a, &full).unwrap().mse, 0.0);
        assert_eq!(filtered_mse(&a, &b, &full).unwrap().mse, 1.0);
        let e = filtered_mse(&a, &b, &Mask::empty(2, 3)).unwrap();
        assert!(e.is_empty() && e.mse == 0.0);
        assert!(filtered_mse(&a, &Image::new(2, 2, 3), &full).is_err());

        let x = noise(5, 4, 1);
        let y = noise(5, 4, 2);
        let mask = Mask::from_fn(5, 4, |r, c| (r * c) % 3 == 1);
        let mut sum = 0.0;
        let mut n = 0;
        for r in 0..5 {
            for c in 0..4 {
                if mask.get(r, c) {
                    for k in 0..3 {
                        sum += (x.get(r, c, k) - y.get(r, c, k)).powi(2);
                        n += 1;
                    }
                }
            }
        }
        assert!((filtered_mse(&x, &y, &mask).unwrap().mse - sum / n as f64).abs() <= 1e-12);
    }

    fn table(rows: &[(f64, f64, f64)]) -> Scale2ModsTable {
        let e = rows
            .iter()
            .map(|&(scale, m_min, m_max)| ScaleInterval { scale, m_min, m_max })
            .collect();
        Scale2ModsTable::new(e, 1e-4, 0.01, Calibration { min: 0.0, max: 1.0 }).unwrap()
    }

    #[test]
    fn query_conventions() {
        let t = table(&[(2.0, 0.0, 0.2), (3.0, 0.2, 0.5), (4.0, 0.5, 0.7)]);
        assert_eq!(query_min_scale(&t, 0.0), ScaleChoice::Scale(2.0));
        assert_eq!(query_min_scale(&t, 0.3), ScaleChoice::Scale(3.0));
        assert_eq!(query_min_scale(&t, 0.5), ScaleChoice::Scale(4.0));
        assert_eq!(query_min_scale(&t, 0.7), ScaleChoice::Target);
        assert_eq!(query_min_scale(&t, 1.0), ScaleChoice::Target);
        let all = table(&[(2.0, 0.0, 1.0)]);
        assert_eq!(query_min_scale(&all, 1.0), ScaleChoice::Scale(2.0));
    }

    #[test]
    fn table_validation() {
        let cal = Calibration { min: 0.0, max: 1.0 };
        let mk = |rows: Vec<(f64, f64, f64)>| {
            Scale2ModsTable::new(
                rows.into_iter()
                    .map(|(scale, m_min, m_max)| ScaleInterval { scale, m_min, m_max })
                    .collect(),
                1e-4,
                0.01,
                cal,
            )
        };
        assert!(mk(vec![(2.0, 0.0, 0.3), (3.0, 0.2, 0.5)]).is_err());
        assert!(mk(vec![(3.0, 0.0, 0.3), (2.0, 0.3, 0.5)]).is_err());
        assert!(mk(vec![(2.0, 0.1, 0.3)]).is_err());
        assert!(mk(vec![(2.0, 0.0, 1.5)]).is_err());
        assert!(mk(vec![]).is_err());
    }

    #[test]
    fn table_text_round_trip() {
        let t = Scale2ModsTable::new(
            vec![
                ScaleInterval {
                    scale: 2.0,
                    m_min: 0.0,
                    m_max: 0.1 + 0.2,
                },
                ScaleInterval {
                    scale: 3.5,
                    m_min: 0.1 + 0.2,
                    m_max: 1.0 / 3.0,
                },
            ],
            2e-5,
            0.01,
            Calibration {
                min: std::f64::consts::PI / 100.0,
                max: std::f64::consts::E,
            },
        )
        .unwrap();
        let text = t.to_text();
        let back = Scale2ModsTable::from_text(&text).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            Scale2ModsTable::from_text(&text.replace("v1", "v9")),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let bad = text.replace("tau", "tao");
        match Scale2ModsTable::from_text(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.find("tau").unwrap()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bucket_edges_half_open() {
        let g = mean_grid(0.01);
        assert_eq!(g.len(), 101);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(bucket_of(0.0, &g, 0.01), Some(0));
        assert_eq!(bucket_of(0.005, &g, 0.01), Some(1));
        assert_eq!(bucket_of(0.0049, &g, 0.01), Some(0));
        assert_eq!(bucket_of(1.0, &g, 0.01), Some(100));
        let g = mean_grid(0.25);
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn infinite_threshold_maps_everything_to_first_scale() {
        let m = model(3);
        let imgs = vec![noise(4, 4, 4), noise(3, 5, 5)];
        let t = build_scale2mods_table(&m, &imgs, f64::INFINITY, &[2.0, 3.0, 4.0], 0.05).unwrap();
        assert_eq!(t.entries()[0].m_max, 1.0);
        assert_eq!(t.assign(0.7), Some(0));
        assert!(t.entries()[1..].iter().all(|e| e.m_min == 1.0 && e.m_max == 1.0));
    }

    #[test]
    fn table_contiguity_and_threshold_monotonicity() {
        let m = model(6);
        let imgs = vec![noise(5, 5, 7), noise(4, 6, 8)];
        let scales = [1.5, 2.0, 3.0];
        let mut prev_top = 0.0;
        for tau in [1e-6, 1e-4, 1e-2, 1.0] {
            let t = build_scale2mods_table(&m, &imgs, tau, &scales, 0.05).unwrap();
            let e = t.entries();
            assert_eq!(e[0].m_min, 0.0);
            for w in e.windows(2) {
                assert_eq!(w[0].m_max, w[1].m_min);
            }
            assert!(e[0].m_max >= prev_top);
            prev_top = e[0].m_max;
        }
        assert!(build_scale2mods_table(&m, &[], 1e-4, &scales, 0.05).is_err());
        assert!(build_scale2mods_table(&m, &imgs, 1e-4, &[2.0, 2.0], 0.05).is_err());
    }

    /// Render network whose output is the constant `c` for every input.
    fn constant_render(seed: u64, c: f64) -> LmfModel {
        let mut m = model(seed);
        let n = m.render.params().len();
        let mut p = m.render.params_mut();
        p[n - 2].iter_mut().for_each(|v| *v = 0.0);
        p[n - 1].iter_mut().for_each(|v| *v = c);
        m
    }

    #[test]
    fn constant_images_map_to_first_scale() {
        let m = constant_render(9, 0.25);
        let imgs = vec![Image::filled(4, 4, 3, 0.25), Image::filled(5, 3, 3, 0.25)];
        let t = build_scale2mods_table(&m, &imgs, 1e-12, &[2.0, 4.0], 0.1).unwrap();
        assert!(t.calibration.is_degenerate());
        assert_eq!(t.entries()[0].m_max, 1.0);
        assert_eq!(t.assign(0.0), Some(0));
    }

    #[test]
    fn strict_table_is_bit_identical_to_upsample() {
        let m = model(10);
        let img = noise(5, 6, 11);
        let cal = Calibration { min: 0.0, max: 1.0 };
        for s in [2.0, 2.5, 3.0] {
            let full = upsample(&m, &img, s).unwrap();
            let same = cmsr_render_detailed(&m, &img, s, &Scale2ModsTable::single(s, cal).unwrap()).unwrap();
            assert_eq!(same.image, full);
            assert_eq!(same.rendered_pixels, same.full_pixels);
            let above = cmsr_render(&m, &img, s, &Scale2ModsTable::single(s + 1.0, cal).unwrap()).unwrap();
            assert_eq!(above, full);
        }
    }

    #[test]
    fn rendered_pixels_never_exceed_full_render() {
        let m = model(12);
        let img = noise(6, 6, 13);
        let s = 4.0;
        let probe = shift_modulation_means(
            &crate::decoder::latent_stage(
                &m,
                &feature_unfold(&m.encoder.encode(&img).unwrap()),
                cell_of(24, 24).unwrap(),
            )
            .unwrap(),
            None,
        );
        let t = Scale2ModsTable::new(
            vec![
                ScaleInterval {
                    scale: 2.0,
                    m_min: 0.0,
                    m_max: 0.5,
                },
                ScaleInterval {
                    scale: 3.0,
                    m_min: 0.5,
                    m_max: 0.8,
                },
            ],
            1e-4,
            0.01,
            probe.calibration,
        )
        .unwrap();
        let out = cmsr_render_detailed(&m, &img, s, &t).unwrap();
        assert!(out.assignment.iter().any(|a| a.is_some()));
        assert!(out.rendered_pixels < out.full_pixels);
        assert_eq!(out.image.dims(), (24, 24, 3));
        let sum: usize = out.stages.iter().map(|s| s.1).sum();
        assert_eq!(sum, out.rendered_pixels);
        // pixels left to the target are rendered exactly there
        let full = upsample(&m, &img, s).unwrap();
        for (i, a) in out.assignment.iter().enumerate() {
            if a.is_none() {
                assert_eq!(&out.image.data()[i * 3..i * 3 + 3], &full.data()[i * 3..i * 3 + 3]);
            }
        }
    }

    #[test]
    fn constant_image_all_first_scale_follows_bilinear_chain() {
        let cal = Calibration { min: 0.0, max: 1.0 };
        let t = Scale2ModsTable::single(2.0, cal).unwrap();
        let img = Image::filled(4, 4, 3, 0.6);
        let m = model(14);
        let out = cmsr_render(&m, &img, 4.0, &t).unwrap();
        let chain = bilinear_resize(&upsample(&m, &img, 2.0).unwrap(), 16, 16).unwrap();
        assert_eq!(out, chain);
        // with a constant-reproducing renderer the chain equals the full render
        let m = constant_render(15, 0.6);
        let out = cmsr_render(&m, &img, 4.0, &t).unwrap();
        let full = upsample(&m, &img, 4.0).unwrap();
        // equal up to the rounding of the ensemble weight sum
        assert!(out.data().iter().zip(full.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}
