//! Coordinate decoders over a latent feature grid.
//!
//! Three decoders share the same plumbing:
//!
//! * **vanilla**: one MLP per output pixel over `[unfolded code, rel coord, rel cell]`;
//! * **coarse-to-fine**: a latent MLP runs once per code and its output replaces
//!   the unfolded code as the render input (no modulation);
//! * **LMF**: the latent MLP runs once per code on `[unfolded code, rel cell]`
//!   and emits `[alpha_1, beta_1, ..., alpha_K, beta_K, z_c]`. A tiny render MLP
//!   consumes `[z_c, rel coord, rel cell]` under that code's FiLM parameters.
//!
//! Every output pixel merges four corner evaluations with local-ensemble area
//! weights. Relative coordinates and cells are scaled by the latent grid
//! extent, so their magnitude does not depend on the output resolution.

use rand::Rng;
use rayon::prelude::*;

use crate::coord::{cell_of, ensemble_corners, feature_unfold, make_coord_grid, output_extent, Cell};
use crate::cost::{MacTally, StageCosts};
use crate::encoder::{Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{FilmParams, Mlp, Scratch};

/// Split of the latent network output into FiLM parameters and compressed code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModLayout {
    /// number of modulated render layers
    pub k: usize,
    /// width of each modulated layer
    pub hidden: usize,
    /// compressed code width
    pub code: usize,
}

impl ModLayout {
    pub fn film_len(&self) -> usize {
        2 * self.k * self.hidden
    }

    pub fn total(&self) -> usize {
        self.film_len() + self.code
    }
}

/// FiLM parameters and compressed code of one latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModulation {
    pub film: FilmParams,
    pub z_c: Vec<f64>,
}

impl LatentModulation {
    /// Split `[alpha_1, beta_1, ..., alpha_K, beta_K, z_c]`.
    pub fn split(packed: &[f64], layout: &ModLayout) -> Result<Self> {
        if packed.len() != layout.total() {
            return Err(Error::shape(format!(
                "latent output has {} entries, layout needs {}",
                packed.len(),
                layout.total()
            )));
        }
        let (film, z_c) = packed.split_at(layout.film_len());
        Ok(LatentModulation {
            film: FilmParams::unpack(film, &vec![layout.hidden; layout.k]),
            z_c: z_c.to_vec(),
        })
    }
}

/// Per-code vectors produced by the first decoding stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGrid {
    height: usize,
    width: usize,
    stride: usize,
    /// leading entries of each vector that are FiLM parameters
    film_len: usize,
    values: Vec<f64>,
}

impl CodeGrid {
    pub(crate) fn new(height: usize, width: usize, stride: usize, film_len: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width * stride);
        CodeGrid {
            height,
            width,
            stride,
            film_len,
            values,
        }
    }

    fn from_features(fm: FeatureMap) -> Self {
        let (h, w, d) = (fm.height(), fm.width(), fm.depth());
        CodeGrid::new(h, w, d, 0, fm.values().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Width of each per-code vector.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn film_len(&self) -> usize {
        self.film_len
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.stride;
        &self.values[i..i + self.stride]
    }

    pub fn vector_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.stride;
        &mut self.values[i..i + self.stride]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Grid of latent modulations, one per latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationGrid {
    pub(crate) codes: CodeGrid,
    pub layout: ModLayout,
}

impl ModulationGrid {
    pub fn height(&self) -> usize {
        self.codes.height
    }

    pub fn width(&self) -> usize {
        self.codes.width
    }

    /// Packed `[alpha_1, beta_1, ..., alpha_K, beta_K, z_c]` of one code.
    pub fn packed(&self, y: usize, x: usize) -> &[f64] {
        self.codes.vector(y, x)
    }

    pub fn get(&self, y: usize, x: usize) -> LatentModulation {
        LatentModulation::split(self.packed(y, x), &self.layout).expect("layout checked at construction")
    }

    /// All shift entries of one code, layer by layer.
    pub fn betas(&self, y: usize, x: usize) -> impl Iterator<Item = f64> + '_ {
        let v = self.packed(y, x);
        let hd = self.layout.hidden;
        (0..self.layout.k).flat_map(move |k| v[(2 * k + 1) * hd..(2 * k + 2) * hd].iter().copied())
    }

    /// Build a grid from explicit per-code vectors (row-major).
    pub fn from_packed(height: usize, width: usize, layout: ModLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * layout.total() {
            return Err(Error::shape("modulation buffer does not match grid and layout"));
        }
        Ok(ModulationGrid {
            codes: CodeGrid::new(height, width, layout.total(), layout.film_len(), values),
            layout,
        })
    }

    pub fn codes(&self) -> &CodeGrid {
        &self.codes
    }
}

/// Output-pixel selection for partial rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Mask { height, width, bits }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Target resolution plus optional partial-render mask and destination buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRequest {
    pub out_h: usize,
    pub out_w: usize,
    pub mask: Option<Mask>,
    /// pixels outside the mask keep these values (zeros when absent)
    pub buffer: Option<Image>,
}

impl RenderRequest {
    pub fn full(out_h: usize, out_w: usize) -> Self {
        RenderRequest {
            out_h,
            out_w,
            mask: None,
            buffer: None,
        }
    }
}

/// Cost and coverage of one render call.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RenderStats {
    pub costs: StageCosts,
    pub rendered_pixels: usize,
}

/// Borrowed view of any decoder as `encoder -> unfold -> [latent] -> render`.
#[derive(Clone, Copy)]
pub(crate) struct Net<'a> {
    pub encoder: &'a Encoder,
    pub latent: Option<&'a Mlp>,
    /// latent input carries the relative cell after the unfolded code
    pub latent_cell: bool,
    pub render: &'a Mlp,
    pub film_len: usize,
}

impl Net<'_> {
    /// Run the first stage on an unfolded feature map.
    pub(crate) fn stage_one(&self, unfolded: FeatureMap, cell: Cell, tally: &mut MacTally) -> Result<CodeGrid> {
        let Some(latent) = self.latent else {
            return Ok(CodeGrid::from_features(unfolded));
        };
        let (h, w) = (unfolded.height(), unfolded.width());
        let extra = if self.latent_cell { 2 } else { 0 };
        if latent.input_dim() != unfolded.depth() + extra {
            return Err(Error::shape(format!(
                "latent MLP takes {} inputs, unfolded code provides {}",
                latent.input_dim(),
                unfolded.depth() + extra
            )));
        }
        let rel_cell = [cell.h * h as f64, cell.w * w as f64];
        let stride = latent.output_dim();
        let rows: Vec<(Vec<f64>, MacTally)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut scratch = Scratch::new(latent);
                let mut input = vec![0.0; latent.input_dim()];
                let mut row = Vec::with_capacity(w * stride);
                let mut t = MacTally::default();
                for x in 0..w {
                    let code = unfolded.code(y, x);
                    input[..code.len()].copy_from_slice(code);
                    if self.latent_cell {
                        input[code.len()..].copy_from_slice(&rel_cell);
                    }
                    row.extend_from_slice(latent.run(&input, None, &mut scratch, &mut t));
                }
                (row, t)
            })
            .collect();
        let mut values = Vec::with_capacity(h * w * stride);
        for (row, t) in rows {
            values.extend(row);
            *tally += t;
        }
        Ok(CodeGrid::new(h, w, stride, self.film_len, values))
    }

    pub(crate) fn check_render(&self, codes: &CodeGrid) -> Result<()> {
        let needed = codes.stride - codes.film_len + 4;
        if self.render.input_dim() != needed {
            return Err(Error::shape(format!(
                "render MLP takes {} inputs, code + coordinate + cell give {needed}",
                self.render.input_dim()
            )));
        }
        if codes.film_len != self.render.film_len() {
            return Err(Error::ModulationArity {
                expected: self.render.modulated_layers().len(),
                got: codes.film_len / (2 * self.render.layers()[0].out_dim()).max(1),
            });
        }
        Ok(())
    }

    /// Ensemble of the four corner renders at query `q`, written to `px`.
    #[allow(clippy::too_many_arguments)]
    fn eval_point(
        &self,
        codes: &CodeGrid,
        (qy, qx): (f64, f64),
        rel_cell: [f64; 2],
        input: &mut [f64],
        scratch: &mut Scratch,
        tally: &mut MacTally,
        px: &mut [f64],
    ) {
        let (gh, gw) = (codes.height as f64, codes.width as f64);
        let zc = input.len() - 4;
        let code_off = codes.film_len;
        let corners = ensemble_corners((qy, qx), codes.height, codes.width);
        px.iter_mut().for_each(|v| *v = 0.0);
        for c in &corners.corners {
            let v = codes.vector(c.iy, c.ix);
            input[..zc].copy_from_slice(&v[code_off..]);
            input[zc] = (qy - c.center.0) * gh;
            input[zc + 1] = (qx - c.center.1) * gw;
            input[zc + 2..].copy_from_slice(&rel_cell);
            let film = (code_off > 0).then(|| &v[..code_off]);
            let y = self.render.run(input, film, scratch, tally);
            for (p, yv) in px.iter_mut().zip(y) {
                *p += c.weight * yv;
            }
            tally.overhead += px.len() as u128;
        }
    }

    pub(crate) fn render(&self, codes: &CodeGrid, req: &RenderRequest) -> Result<(Image, RenderStats)> {
        self.check_render(codes)?;
        let (out_h, out_w) = (req.out_h, req.out_w);
        let channels = self.render.output_dim();
        if let Some(m) = &req.mask {
            if (m.height, m.width) != (out_h, out_w) {
                return Err(Error::shape(format!(
                    "mask {}x{} does not match target {out_h}x{out_w}",
                    m.height, m.width
                )));
            }
        }
        let mut out = match &req.buffer {
            Some(b) => {
                if b.dims() != (out_h, out_w, channels) {
                    return Err(Error::shape("render buffer does not match target"));
                }
                b.clone()
            }
            None => Image::new(out_h, out_w, channels),
        };
        let grid = make_coord_grid(out_h, out_w)?;
        let cell = cell_of(out_h, out_w)?;
        let rel_cell = [cell.h * codes.height as f64, cell.w * codes.width as f64];
        let tallies: Vec<(MacTally, usize)> = out
            .data_mut()
            .par_chunks_mut(out_w * channels)
            .enumerate()
            .map(|(oy, row)| {
                let mut scratch = Scratch::new(self.render);
                let mut input = vec![0.0; self.render.input_dim()];
                let mut tally = MacTally::default();
                let mut rendered = 0;
                for (ox, px) in row.chunks_exact_mut(channels).enumerate() {
                    if let Some(m) = &req.mask {
                        if !m.get(oy, ox) {
                            continue;
                        }
                    }
                    rendered += 1;
                    self.eval_point(codes, grid.coord(oy, ox), rel_cell, &mut input, &mut scratch, &mut tally, px);
                }
                (tally, rendered)
            })
            .collect();
        let mut stats = RenderStats::default();
        for (t, n) in tallies {
            stats.costs.render += t;
            stats.rendered_pixels += n;
        }
        Ok((out, stats))
    }
}

fn check_unfoldable(fm: &FeatureMap) -> Result<()> {
    if fm.height() == 0 || fm.width() == 0 || fm.depth() == 0 {
        return Err(Error::domain("empty feature map"));
    }
    if !fm.is_finite() {
        return Err(Error::Data("feature map contains non-finite values".into()));
    }
    Ok(())
}

/// Vanilla decoder: `theta` evaluated at four corners of every output pixel.
pub fn decode_vanilla(fm: &FeatureMap, out_h: usize, out_w: usize, theta: &Mlp) -> Result<Image> {
    decode_vanilla_counted(fm, out_h, out_w, theta).map(|(img, _)| img)
}

pub fn decode_vanilla_counted(
    fm: &FeatureMap,
    out_h: usize,
    out_w: usize,
    theta: &Mlp,
) -> Result<(Image, RenderStats)> {
    check_unfoldable(fm)?;
    let enc = Encoder::IdentityUnfold { channels: 0 };
    let net = Net {
        encoder: &enc,
        latent: None,
        latent_cell: false,
        render: theta,
        film_len: 0,
    };
    let codes = CodeGrid::from_features(feature_unfold(fm));
    net.render(&codes, &RenderRequest::full(out_h, out_w))
}

/// Coarse-to-fine decoder: `theta_l` per code, `theta_r` per pixel without modulation.
pub fn decode_c2f(fm: &FeatureMap, out_h: usize, out_w: usize, theta_l: &Mlp, theta_r: &Mlp) -> Result<Image> {
    decode_c2f_counted(fm, out_h, out_w, theta_l, theta_r).map(|(img, _)| img)
}

pub fn decode_c2f_counted(
    fm: &FeatureMap,
    out_h: usize,
    out_w: usize,
    theta_l: &Mlp,
    theta_r: &Mlp,
) -> Result<(Image, RenderStats)> {
    check_unfoldable(fm)?;
    if theta_l.output_dim() + 4 != theta_r.input_dim() {
        return Err(Error::shape(format!(
            "latent output {} + 4 does not match render input {}",
            theta_l.output_dim(),
            theta_r.input_dim()
        )));
    }
    let enc = Encoder::IdentityUnfold { channels: 0 };
    let net = Net {
        encoder: &enc,
        latent: Some(theta_l),
        latent_cell: false,
        render: theta_r,
        film_len: 0,
    };
    let mut latent = MacTally::default();
    let codes = net.stage_one(feature_unfold(fm), cell_of(out_h, out_w)?, &mut latent)?;
    let (img, mut stats) = net.render(&codes, &RenderRequest::full(out_h, out_w))?;
    stats.costs.latent = latent;
    Ok((img, stats))
}

/// Widths of a model built by [`LmfModel::init`] and friends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    /// `None` selects the identity-unfold encoder
    pub encoder_width: Option<usize>,
    pub encoder_layers: usize,
    /// latent network depth; hidden width equals its output width
    pub latent_layers: usize,
    pub layout: ModLayout,
}

impl ModelConfig {
    /// Small CPU-trainable configuration.
    pub const DESK: ModelConfig = ModelConfig {
        channels: 3,
        encoder_width: Some(16),
        encoder_layers: 3,
        latent_layers: 2,
        layout: ModLayout {
            k: 3,
            hidden: 16,
            code: 16,
        },
    };

    /// 64-channel features, 578-208-208 latent network, 20-16x6-3 render network.
    pub const LM_LIIF: ModelConfig = ModelConfig {
        channels: 3,
        encoder_width: Some(64),
        encoder_layers: 1,
        latent_layers: 2,
        layout: ModLayout {
            k: 6,
            hidden: 16,
            code: 16,
        },
    };

    pub fn feature_depth(&self) -> usize {
        match self.encoder_width {
            Some(w) => w,
            None => 9 * self.channels,
        }
    }

    fn encoder<R: Rng + ?Sized>(&self, rng: &mut R) -> Encoder {
        match self.encoder_width {
            Some(w) => Encoder::tiny_conv(self.channels, w, self.encoder_layers, rng),
            None => Encoder::IdentityUnfold {
                channels: self.channels,
            },
        }
    }
}

/// Two-stage latent-modulated decoder with its encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LmfModel {
    pub encoder: Encoder,
    pub latent: Mlp,
    pub render: Mlp,
    layout: ModLayout,
}

impl LmfModel {
    pub fn new(encoder: Encoder, latent: Mlp, render: Mlp) -> Result<Self> {
        let mods = render.modulated_layers();
        let k = mods.len();
        let hidden = mods.first().map(|&m| render.layers()[m].out_dim()).unwrap_or(0);
        if mods.iter().any(|&m| render.layers()[m].out_dim() != hidden) {
            return Err(Error::InvalidModel("modulated render layers differ in width".into()));
        }
        let code = render
            .input_dim()
            .checked_sub(4)
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::InvalidModel("render input must hold code, coordinate and cell".into()))?;
        let layout = ModLayout { k, hidden, code };
        if latent.output_dim() != layout.total() {
            return Err(Error::InvalidModel(format!(
                "latent output {} != 2*K*D_H + D_c = {}",
                latent.output_dim(),
                layout.total()
            )));
        }
        if latent.input_dim() != 9 * encoder.out_depth() + 2 {
            return Err(Error::InvalidModel(format!(
                "latent input {} != 9 * {} + 2",
                latent.input_dim(),
                encoder.out_depth()
            )));
        }
        if render.output_dim() != encoder.in_channels() {
            return Err(Error::InvalidModel(format!(
                "render output {} != image channels {}",
                render.output_dim(),
                encoder.in_channels()
            )));
        }
        Ok(LmfModel {
            encoder,
            latent,
            render,
            layout,
        })
    }

    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = cfg.encoder(rng);
        let l = cfg.layout;
        let mut latent_w = vec![9 * cfg.feature_depth() + 2];
        latent_w.extend(std::iter::repeat_n(l.total(), cfg.latent_layers.max(1)));
        let latent = Mlp::init(&latent_w, vec![], rng)?;
        let mut render_w = vec![l.code + 4];
        render_w.extend(std::iter::repeat_n(l.hidden, l.k));
        render_w.push(cfg.channels);
        let render = Mlp::init(&render_w, (0..l.k).collect(), rng)?;
        LmfModel::new(encoder, latent, render)
    }

    pub fn layout(&self) -> ModLayout {
        self.layout
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            encoder: &self.encoder,
            latent: Some(&self.latent),
            latent_cell: true,
            render: &self.render,
            film_len: self.layout.film_len(),
        }
    }
}

/// Stage 1: one modulation per latent code for the given target cell.
pub fn latent_stage(model: &LmfModel, fm_unfolded: &FeatureMap, cell: Cell) -> Result<ModulationGrid> {
    latent_stage_counted(model, fm_unfolded, cell, &mut MacTally::default())
}

pub fn latent_stage_counted(
    model: &LmfModel,
    fm_unfolded: &FeatureMap,
    cell: Cell,
    tally: &mut MacTally,
) -> Result<ModulationGrid> {
    if fm_unfolded.depth() != 9 * model.encoder.out_depth() {
        return Err(Error::shape(format!(
            "unfolded depth {} != 9 * {}",
            fm_unfolded.depth(),
            model.encoder.out_depth()
        )));
    }
    let codes = model.net().stage_one(fm_unfolded.clone(), cell, tally)?;
    Ok(ModulationGrid {
        codes,
        layout: model.layout,
    })
}

/// Stage 2: modulated rendering of the requested (masked) pixels.
pub fn render_stage(model: &LmfModel, mods: &ModulationGrid, req: &RenderRequest) -> Result<Image> {
    render_stage_counted(model, mods, req).map(|(img, _)| img)
}

pub fn render_stage_counted(
    model: &LmfModel,
    mods: &ModulationGrid,
    req: &RenderRequest,
) -> Result<(Image, RenderStats)> {
    if mods.layout != model.layout {
        return Err(Error::shape("modulation layout does not match the model"));
    }
    model.net().render(&mods.codes, req)
}

/// Render one continuous query `q` in `[-1, 1]^2` with pixel footprint `cell`.
pub fn render_point(model: &LmfModel, mods: &ModulationGrid, q: (f64, f64), cell: Cell) -> Result<Vec<f64>> {
    let net = model.net();
    net.check_render(&mods.codes)?;
    if !(q.0.is_finite() && q.1.is_finite()) {
        return Err(Error::domain("query must be finite"));
    }
    let rel_cell = [cell.h * mods.height() as f64, cell.w * mods.width() as f64];
    let mut input = vec![0.0; net.render.input_dim()];
    let mut px = vec![0.0; net.render.output_dim()];
    let mut scratch = Scratch::new(net.render);
    net.eval_point(&mods.codes, q, rel_cell, &mut input, &mut scratch, &mut MacTally::default(), &mut px);
    Ok(px)
}

/// Encode, unfold and run the latent stage for a target extent.
pub fn modulations_for(
    model: &LmfModel,
    img: &Image,
    out_h: usize,
    out_w: usize,
    costs: &mut StageCosts,
) -> Result<ModulationGrid> {
    img.ensure_finite()?;
    let fm = model.encoder.encode_counted(img, &mut costs.encoder)?;
    latent_stage_counted(model, &feature_unfold(&fm), cell_of(out_h, out_w)?, &mut costs.latent)
}

/// Full LMF upsampling by `s` (output `round(s*h) x round(s*w)`).
pub fn upsample(model: &LmfModel, img: &Image, s: f64) -> Result<Image> {
    upsample_counted(model, img, s).map(|(img, _)| img)
}

pub fn upsample_counted(model: &LmfModel, img: &Image, s: f64) -> Result<(Image, RenderStats)> {
    let (out_h, out_w) = (output_extent(img.height(), s)?, output_extent(img.width(), s)?);
    let mut costs = StageCosts::default();
    let mods = modulations_for(model, img, out_h, out_w, &mut costs)?;
    let (out, mut stats) = render_stage_counted(model, &mods, &RenderRequest::full(out_h, out_w))?;
    costs.render = stats.costs.render;
    stats.costs = costs;
    Ok((out, stats))
}

/// Single-MLP decoder with its encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaModel {
    pub encoder: Encoder,
    pub mlp: Mlp,
}

impl VanillaModel {
    pub fn new(encoder: Encoder, mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() != 9 * encoder.out_depth() + 4 || !mlp.modulated_layers().is_empty() {
            return Err(Error::InvalidModel(format!(
                "vanilla MLP input {} != 9 * {} + 4",
                mlp.input_dim(),
                encoder.out_depth()
            )));
        }
        if mlp.output_dim() != encoder.in_channels() {
            return Err(Error::InvalidModel("vanilla MLP output != image channels".into()));
        }
        Ok(VanillaModel { encoder, mlp })
    }

    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, hidden: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let encoder = cfg.encoder(rng);
        let mut w = vec![9 * cfg.feature_depth() + 4];
        w.extend(std::iter::repeat_n(hidden, depth.max(2) - 1));
        w.push(cfg.channels);
        VanillaModel::new(encoder, Mlp::init(&w, vec![], rng)?)
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            encoder: &self.encoder,
            latent: None,
            latent_cell: false,
            render: &self.mlp,
            film_len: 0,
        }
    }

    pub fn upsample_counted(&self, img: &Image, s: f64) -> Result<(Image, RenderStats)> {
        img.ensure_finite()?;
        let (out_h, out_w) = (output_extent(img.height(), s)?, output_extent(img.width(), s)?);
        let mut enc = MacTally::default();
        let fm = self.encoder.encode_counted(img, &mut enc)?;
        let (out, mut stats) = decode_vanilla_counted(&fm, out_h, out_w, &self.mlp)?;
        stats.costs.encoder = enc;
        Ok((out, stats))
    }
}

/// Coarse-to-fine decoder with its encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct C2fModel {
    pub encoder: Encoder,
    pub latent: Mlp,
    pub render: Mlp,
}

impl C2fModel {
    pub fn new(encoder: Encoder, latent: Mlp, render: Mlp) -> Result<Self> {
        if latent.input_dim() != 9 * encoder.out_depth() || latent.output_dim() + 4 != render.input_dim() {
            return Err(Error::InvalidModel("coarse-to-fine widths do not chain".into()));
        }
        if !render.modulated_layers().is_empty() || render.output_dim() != encoder.in_channels() {
            return Err(Error::InvalidModel("coarse-to-fine render MLP is malformed".into()));
        }
        Ok(C2fModel {
            encoder,
            latent,
            render,
        })
    }

    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, hidden: usize, render_depth: usize, rng: &mut R) -> Result<Self> {
        let encoder = cfg.encoder(rng);
        let l = cfg.layout.total();
        let mut lw = vec![9 * cfg.feature_depth()];
        lw.extend(std::iter::repeat_n(l, cfg.latent_layers.max(1)));
        let mut rw = vec![l + 4];
        rw.extend(std::iter::repeat_n(hidden, render_depth.max(2) - 1));
        rw.push(cfg.channels);
        C2fModel::new(encoder, Mlp::init(&lw, vec![], rng)?, Mlp::init(&rw, vec![], rng)?)
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            encoder: &self.encoder,
            latent: Some(&self.latent),
            latent_cell: false,
            render: &self.render,
            film_len: 0,
        }
    }

    pub fn upsample_counted(&self, img: &Image, s: f64) -> Result<(Image, RenderStats)> {
        img.ensure_finite()?;
        let (out_h, out_w) = (output_extent(img.height(), s)?, output_extent(img.width(), s)?);
        let mut enc = MacTally::default();
        let fm = self.encoder.encode_counted(img, &mut enc)?;
        let (out, mut stats) = decode_c2f_counted(&fm, out_h, out_w, &self.latent, &self.render)?;
        stats.costs.encoder = enc;
        Ok((out, stats))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Vanilla,
    C2f,
    Lmf,
}

impl DecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Vanilla => "vanilla",
            DecoderKind::C2f => "c2f",
            DecoderKind::Lmf => "lmf",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(DecoderKind::Vanilla),
            "c2f" => Ok(DecoderKind::C2f),
            "lmf" => Ok(DecoderKind::Lmf),
            other => Err(Error::domain(format!("unknown decoder '{other}'"))),
        }
    }
}

/// Any trainable decoder with its encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vanilla(VanillaModel),
    C2f(C2fModel),
    Lmf(LmfModel),
}

impl Model {
    pub fn kind(&self) -> DecoderKind {
        match self {
            Model::Vanilla(_) => DecoderKind::Vanilla,
            Model::C2f(_) => DecoderKind::C2f,
            Model::Lmf(_) => DecoderKind::Lmf,
        }
    }

    pub fn init<R: Rng + ?Sized>(kind: DecoderKind, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            DecoderKind::Lmf => Model::Lmf(LmfModel::init(cfg, rng)?),
            DecoderKind::Vanilla => Model::Vanilla(VanillaModel::init(cfg, 64, 4, rng)?),
            DecoderKind::C2f => Model::C2f(C2fModel::init(cfg, 64, 4, rng)?),
        })
    }

    pub(crate) fn net(&self) -> Net<'_> {
        match self {
            Model::Vanilla(m) => m.net(),
            Model::C2f(m) => m.net(),
            Model::Lmf(m) => m.net(),
        }
    }

    pub fn encoder(&self) -> &Encoder {
        self.net().encoder
    }

    pub fn as_lmf(&self) -> Option<&LmfModel> {
        match self {
            Model::Lmf(m) => Some(m),
            _ => None,
        }
    }

    pub fn upsample_counted(&self, img: &Image, s: f64) -> Result<(Image, RenderStats)> {
        match self {
            Model::Vanilla(m) => m.upsample_counted(img, s),
            Model::C2f(m) => m.upsample_counted(img, s),
            Model::Lmf(m) => upsample_counted(m, img, s),
        }
    }

    pub fn upsample(&self, img: &Image, s: f64) -> Result<Image> {
        self.upsample_counted(img, s).map(|(i, _)| i)
    }

    /// Every trainable tensor: encoder, latent network, render network.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let (enc, latent, render) = match self {
            Model::Vanilla(m) => (&mut m.encoder, None, &mut m.mlp),
            Model::C2f(m) => (&mut m.encoder, Some(&mut m.latent), &mut m.render),
            Model::Lmf(m) => (&mut m.encoder, Some(&mut m.latent), &mut m.render),
        };
        let mut out = enc.params_mut();
        if let Some(l) = latent {
            out.extend(l.params_mut());
        }
        out.extend(render.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let net = self.net();
        let mut out = net.encoder.params();
        if let Some(l) = net.latent {
            out.extend(l.params());
        }
        out.extend(net.render.params());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
