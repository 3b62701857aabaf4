//! Desk-scale training: continuous-scale patch sampling, L1 loss and Adam.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::Hasher;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coord::{cell_of, ensemble_corners, feature_unfold, feature_unfold_adjoint, pixel_center, Cell};
use crate::cost::MacTally;
use crate::decoder::{Model, Net};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{MlpGrads, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// low-resolution patch side
    pub patch: usize,
    pub pixels_per_patch: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// halve the learning rate every this many steps (0 disables)
    pub decay_every: usize,
    pub decay: f64,
    pub seed: u64,
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale_min: 1.0,
            scale_max: 4.0,
            patch: 16,
            pixels_per_patch: 256,
            batch: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            decay_every: 1000,
            decay: 0.5,
            seed: 0,
            flips: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min >= 1.0 && self.scale_max >= self.scale_min && self.scale_max.is_finite()) {
            return Err(Error::domain("scale range must satisfy 1 <= min <= max"));
        }
        if self.patch < 4 {
            return Err(Error::domain("patch side must be at least 4"));
        }
        if self.pixels_per_patch == 0 || self.batch == 0 {
            return Err(Error::domain("pixels per patch and batch must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return Err(Error::domain("learning rate must be finite and >= 0, eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::domain("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            n => self.lr * self.decay.powi((step / n) as i32),
        }
    }
}

/// One low-resolution patch with supervised high-resolution queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub lr_patch: Image,
    pub coords: Vec<(f64, f64)>,
    /// `coords.len() * channels` values, pixel-interleaved
    pub targets: Vec<f64>,
    /// cell of the high-resolution crop
    pub cell: Cell,
    pub scale: f64,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output taps `(first input index, normalized weights)` along one axis.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    // widen the kernel when shrinking so it also low-passes
    let support = ratio.max(1.0);
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let lo = (center - 2.0 * support).floor() as isize;
            let hi = (center + 2.0 * support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let w = cubic((center - j as f64) / support);
                    (w != 0.0).then(|| (j.clamp(0, n_in as isize - 1) as usize, w))
                })
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

/// Separable Catmull-Rom resampling to an explicit size, replicate borders.
pub fn bicubic_resize_to(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::domain("bicubic output must be at least 1x1"));
    }
    let (h, w, c) = img.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let tx = cubic_taps(w, out_w);
    let ty = cubic_taps(h, out_h);
    let mut rows = Image::new(h, out_w, c);
    for y in 0..h {
        for (x, taps) in tx.iter().enumerate() {
            for k in 0..c {
                let v = taps.iter().map(|&(j, wt)| wt * img.get(y, j, k)).sum();
                rows.set(y, x, k, v);
            }
        }
    }
    let mut out = Image::new(out_h, out_w, c);
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..out_w {
            for k in 0..c {
                let v = taps.iter().map(|&(j, wt)| wt * rows.get(j, x, k)).sum();
                out.set(y, x, k, v);
            }
        }
    }
    Ok(out)
}

/// Downscale by `s` to `round(h / s) x round(w / s)`.
pub fn bicubic_downsample(img: &Image, s: f64) -> Result<Image> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::domain(format!("downsampling factor {s} must be >= 1")));
    }
    let oh = (img.height() as f64 / s + 0.5).floor() as usize;
    let ow = (img.width() as f64 / s + 0.5).floor() as usize;
    bicubic_resize_to(img, oh, ow)
}

/// Scale factor drawn uniformly from the configured range.
pub fn draw_scale<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> f64 {
    if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    }
}

pub fn sample_training_batch<R: Rng + ?Sized>(dataset: &[Image], cfg: &TrainConfig, rng: &mut R) -> Vec<TrainSample> {
    let mut out = Vec::with_capacity(cfg.batch);
    if dataset.is_empty() {
        return out;
    }
    for _ in 0..cfg.batch {
        let img = &dataset[rng.gen_range(0..dataset.len())];
        let s = draw_scale(cfg, rng);
        let side = (cfg.patch as f64 * s + 0.5).floor() as usize;
        if img.height() < side || img.width() < side {
            log::debug!("image {}x{} too small for a {side} crop", img.height(), img.width());
            continue;
        }
        let y0 = rng.gen_range(0..=img.height() - side);
        let x0 = rng.gen_range(0..=img.width() - side);
        let mut crop = img.crop(y0, x0, side, side).expect("crop within bounds");
        if cfg.flips {
            if rng.gen_bool(0.5) {
                crop = crop.flip_horizontal();
            }
            if rng.gen_bool(0.5) {
                crop = crop.flip_vertical();
            }
        }
        let lr_patch = bicubic_resize_to(&crop, cfg.patch, cfg.patch).expect("patch >= 4");
        let n = side * side;
        let picks: Vec<usize> = if cfg.pixels_per_patch <= n {
            index::sample(rng, n, cfg.pixels_per_patch).into_vec()
        } else {
            (0..cfg.pixels_per_patch).map(|_| rng.gen_range(0..n)).collect()
        };
        let c = crop.channels();
        let mut coords = Vec::with_capacity(picks.len());
        let mut targets = Vec::with_capacity(picks.len() * c);
        for p in picks {
            let (y, x) = (p / side, p % side);
            coords.push((pixel_center(y, side), pixel_center(x, side)));
            targets.extend_from_slice(crop.pixel(y, x));
        }
        out.push(TrainSample {
            lr_patch,
            coords,
            targets,
            cell: cell_of(side, side).expect("side > 0"),
            scale: side as f64 / cfg.patch as f64,
        });
    }
    out
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "loss needs equal non-empty shapes, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

#[inline]
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(pred - target) / N`, zero at ties.
pub fn l1_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| sign(p - t) / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hyper: &AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::domain("Adam steps count from 1"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("parameter, gradient and state counts differ"));
    }
    let c1 = 1.0 - hyper.beta1.powi(t as i32);
    let c2 = 1.0 - hyper.beta2.powi(t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape("gradient tensor does not match its parameter"));
        }
        for i in 0..p.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

struct Grads {
    encoder: Vec<Vec<f64>>,
    latent: Option<MlpGrads>,
    render: MlpGrads,
}

impl Grads {
    fn zeros(net: &Net<'_>) -> Self {
        Grads {
            encoder: net.encoder.zero_grads(),
            latent: net.latent.map(|l| l.zero_grads()),
            render: net.render.zero_grads(),
        }
    }

    fn add(&mut self, other: &Grads) {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        self.encoder.iter_mut().zip(&other.encoder).for_each(|(a, b)| add(a, b));
        if let (Some(a), Some(b)) = (self.latent.as_mut(), other.latent.as_ref()) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(a, b)| add(a, b));
            a.biases.iter_mut().zip(&b.biases).for_each(|(a, b)| add(a, b));
        }
        let (a, b) = (&mut self.render, &other.render);
        a.weights.iter_mut().zip(&b.weights).for_each(|(a, b)| add(a, b));
        a.biases.iter_mut().zip(&b.biases).for_each(|(a, b)| add(a, b));
    }

    /// Flattened in the order of [`Model::params`].
    fn flatten(self) -> Vec<Vec<f64>> {
        let mut out = self.encoder;
        let mlp = |g: MlpGrads| g.weights.into_iter().zip(g.biases).flat_map(|(w, b)| [w, b]);
        if let Some(l) = self.latent {
            out.extend(mlp(l));
        }
        out.extend(mlp(self.render));
        out
    }
}

struct Pass {
    loss: f64,
    grads: Option<Grads>,
    /// hash of every ReLU gate and residual sign; equal signatures mean the
    /// loss is smooth between the two evaluations
    signature: u64,
}

/// Sum of absolute errors of one sample scaled by `inv_n`, with gradients when requested.
fn sample_pass(net: &Net<'_>, s: &TrainSample, inv_n: f64, want_grad: bool) -> Result<Pass> {
    let mut tally = MacTally::default();
    let mut sig = DefaultHasher::new();
    let (fm, enc_tape) = net.encoder.forward_traced(&s.lr_patch, &mut tally)?;
    enc_tape.hash_gates(&mut sig);
    let (h, w, depth) = (fm.height(), fm.width(), fm.depth());
    let unfolded = feature_unfold(&fm);
    let rel_cell = [s.cell.h * h as f64, s.cell.w * w as f64];

    let mut latent_tapes: Vec<Tape> = Vec::new();
    let (codes, stride): (Vec<f64>, usize) = match net.latent {
        None => (unfolded.values().to_vec(), unfolded.depth()),
        Some(l) => {
            let mut input = vec![0.0; l.input_dim()];
            let mut codes = Vec::with_capacity(h * w * l.output_dim());
            for y in 0..h {
                for x in 0..w {
                    let u = unfolded.code(y, x);
                    if u.len() + if net.latent_cell { 2 } else { 0 } != input.len() {
                        return Err(Error::shape("latent MLP input width does not match the encoder"));
                    }
                    input[..u.len()].copy_from_slice(u);
                    if net.latent_cell {
                        input[u.len()..].copy_from_slice(&rel_cell);
                    }
                    let tape = l.forward_traced(&input, None, &mut tally)?;
                    tape.hash_gates(&mut sig);
                    codes.extend_from_slice(tape.output());
                    latent_tapes.push(tape);
                }
            }
            (codes, l.output_dim())
        }
    };
    let film_len = net.film_len;
    let render = net.render;
    let zc = stride - film_len;
    if render.input_dim() != zc + 4 {
        return Err(Error::shape("render MLP input width does not match the codes"));
    }
    let ch = render.output_dim();
    if s.targets.len() != s.coords.len() * ch {
        return Err(Error::shape("targets do not match coordinates"));
    }

    let mut grads = want_grad.then(|| Grads::zeros(net));
    let mut d_codes = if want_grad { vec![0.0; codes.len()] } else { Vec::new() };
    let mut input = vec![0.0; render.input_dim()];
    let mut d_in = vec![0.0; render.input_dim()];
    let mut d_film = vec![0.0; film_len];
    let mut loss = 0.0;
    let mut pred = vec![0.0; ch];
    let mut g = vec![0.0; ch];
    let mut up = vec![0.0; ch];
    let (gh, gw) = (h as f64, w as f64);
    for (q, &(qy, qx)) in s.coords.iter().enumerate() {
        let corners = ensemble_corners((qy, qx), h, w);
        pred.iter_mut().for_each(|v| *v = 0.0);
        let mut tapes = Vec::with_capacity(4);
        for c in &corners.corners {
            let base = (c.iy * w + c.ix) * stride;
            let v = &codes[base..base + stride];
            input[..zc].copy_from_slice(&v[film_len..]);
            input[zc] = (qy - c.center.0) * gh;
            input[zc + 1] = (qx - c.center.1) * gw;
            input[zc + 2..].copy_from_slice(&rel_cell);
            let film = (film_len > 0).then(|| &v[..film_len]);
            let tape = render.forward_traced(&input, film, &mut tally)?;
            tape.hash_gates(&mut sig);
            for (p, y) in pred.iter_mut().zip(tape.output()) {
                *p += c.weight * y;
            }
            tapes.push((base, c.weight, tape));
        }
        let target = &s.targets[q * ch..(q + 1) * ch];
        for k in 0..ch {
            let r = pred[k] - target[k];
            loss += r.abs();
            g[k] = sign(r) * inv_n;
            sig.write_i8(g[k].signum() as i8);
        }
        if let Some(gr) = grads.as_mut() {
            for (base, wt, tape) in &tapes {
                for k in 0..ch {
                    up[k] = wt * g[k];
                }
                d_in.iter_mut().for_each(|v| *v = 0.0);
                d_film.iter_mut().for_each(|v| *v = 0.0);
                let df = (film_len > 0).then_some(d_film.as_mut_slice());
                render.backward_accumulate(tape, &up, &mut gr.render, Some(&mut d_in), df)?;
                let dc = &mut d_codes[*base..*base + stride];
                for (a, b) in dc[film_len..].iter_mut().zip(&d_in[..zc]) {
                    *a += b;
                }
                for (a, b) in dc[..film_len].iter_mut().zip(&d_film) {
                    *a += b;
                }
            }
        }
    }
    let loss = loss * inv_n;
    let signature = sig.finish();
    let Some(mut gr) = grads else {
        return Ok(Pass {
            loss,
            grads: None,
            signature,
        });
    };

    let ud = unfolded.depth();
    let mut d_unf = FeatureMap::zeros(h, w, ud);
    match net.latent {
        None => d_unf.values_mut().copy_from_slice(&d_codes),
        Some(l) => {
            let lg = gr.latent.as_mut().expect("latent grads allocated");
            let mut d_x = vec![0.0; l.input_dim()];
            for (i, tape) in latent_tapes.iter().enumerate() {
                let dc = &d_codes[i * stride..(i + 1) * stride];
                if dc.iter().all(|&v| v == 0.0) {
                    continue;
                }
                d_x.iter_mut().for_each(|v| *v = 0.0);
                l.backward_accumulate(tape, dc, lg, Some(&mut d_x), None)?;
                d_unf.values_mut()[i * ud..(i + 1) * ud].copy_from_slice(&d_x[..ud]);
            }
        }
    }
    let d_fm = feature_unfold_adjoint(&d_unf, depth);
    net.encoder.backward(&enc_tape, &d_fm, &mut gr.encoder)?;
    Ok(Pass {
        loss,
        grads: Some(gr),
        signature,
    })
}

fn total_targets(samples: &[TrainSample]) -> Result<f64> {
    let n: usize = samples.iter().map(|s| s.targets.len()).sum();
    if n == 0 {
        return Err(Error::domain("batch has no supervised pixels"));
    }
    Ok(n as f64)
}

/// Mean L1 loss of the model over every target in `samples`.
pub fn batch_loss(model: &Model, samples: &[TrainSample]) -> Result<f64> {
    batch_loss_signed(model, samples).map(|r| r.0)
}

fn batch_loss_signed(model: &Model, samples: &[TrainSample]) -> Result<(f64, u64)> {
    let inv_n = 1.0 / total_targets(samples)?;
    let net = model.net();
    let parts: Vec<Pass> = samples
        .par_iter()
        .map(|s| sample_pass(&net, s, inv_n, false))
        .collect::<Result<_>>()?;
    let mut sig = DefaultHasher::new();
    let mut loss = 0.0;
    for p in parts {
        loss += p.loss;
        sig.write_u64(p.signature);
    }
    Ok((loss, sig.finish()))
}

/// Loss and its gradient, laid out like [`Model::params`]. Per-sample
/// results are reduced in sample order, so the outcome is independent of the
/// thread count.
pub fn loss_and_grad(model: &Model, samples: &[TrainSample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let inv_n = 1.0 / total_targets(samples)?;
    let net = model.net();
    let parts: Vec<Pass> = samples
        .par_iter()
        .map(|s| sample_pass(&net, s, inv_n, true))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total = Grads::zeros(&net);
    for p in parts {
        loss += p.loss;
        total.add(&p.grads.expect("gradient requested"));
    }
    Ok((loss, total.flatten()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<StepRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e}", r.step, r.loss, r.lr);
        }
        s
    }

    /// Mean loss over a window at the start and the end of training.
    pub fn first_last_mean(&self, window: usize) -> (f64, f64) {
        let n = self.records.len();
        let w = window.clamp(1, n.max(1));
        let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len().max(1) as f64;
        (mean(&self.records[..w.min(n)]), mean(&self.records[n.saturating_sub(w)..]))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: LossCurve,
}

pub fn train(model: Model, dataset: &[Image], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, cfg, |_| {})
}

/// Joint encoder and decoder training; `on_step` sees every record.
pub fn train_with(
    mut model: Model,
    dataset: &[Image],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    for img in dataset {
        img.ensure_finite()?;
    }
    let side = (cfg.patch as f64 * cfg.scale_max + 0.5).floor() as usize;
    if !dataset.iter().any(|i| i.height() >= side && i.width() >= side) {
        return Err(Error::domain(format!("no training image holds a {side}x{side} crop")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut state = AdamState::new(&shapes);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let mut batch = sample_training_batch(dataset, cfg, &mut rng);
        while batch.is_empty() {
            batch = sample_training_batch(dataset, cfg, &mut rng);
        }
        let (loss, grads) = loss_and_grad(&model, &batch)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss or gradient at step {step} (loss {loss})")));
        }
        let lr = cfg.lr_at(step);
        let hyper = AdamHyper { lr, ..cfg.adam() };
        adam_step(&mut model.params_mut(), &grads, &mut state, &hyper, step as u64 + 1)?;
        let rec = StepRecord { step, loss, lr };
        on_step(&rec);
        curve.records.push(rec);
    }
    Ok(TrainOutcome { model, curve })
}

/// One audited parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    /// draws rejected because the perturbation crossed a ReLU or L1 kink
    pub kinked: usize,
}

impl AuditReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&AuditEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Reverse-mode gradients against central differences on `count` randomly
/// chosen parameters, drawn tensor-first so small tensors are represented.
///
/// Central differences are only meaningful where the loss is smooth over
/// `[p - step, p + step]`. A draw whose perturbation flips any ReLU gate or
/// residual sign is rejected and redrawn, and counted in `kinked`.
pub fn gradient_audit<R: Rng + ?Sized>(
    model: &Model,
    samples: &[TrainSample],
    count: usize,
    step: f64,
    rng: &mut R,
) -> Result<AuditReport> {
    let (_, grads) = loss_and_grad(model, samples)?;
    let (_, base_sig) = batch_loss_signed(model, samples)?;
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(count);
    let mut kinked = 0;
    while entries.len() < count {
        if kinked > 10 * count.max(10) {
            return Err(Error::Numeric("too many kink crossings; reduce the audit step".into()));
        }
        let tensor = rng.gen_range(0..shapes.len());
        let index = rng.gen_range(0..shapes[tensor]);
        let orig = probe.params()[tensor][index];
        probe.params_mut()[tensor][index] = orig + step;
        let (up, up_sig) = batch_loss_signed(&probe, samples)?;
        probe.params_mut()[tensor][index] = orig - step;
        let (down, down_sig) = batch_loss_signed(&probe, samples)?;
        probe.params_mut()[tensor][index] = orig;
        if up_sig != base_sig || down_sig != base_sig {
            kinked += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[tensor][index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        entries.push(AuditEntry {
            tensor,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(AuditReport { entries, kinked })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() || a.data().is_empty() {
        return Err(Error::shape("mse needs equal non-empty images"));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// RGB PSNR with unit peak; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coord::bilinear_resize;
    use crate::decoder::{DecoderKind, ModLayout, ModelConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        Image::from_fn(h, w, 3, |_, _, _| r.gen())
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            channels: 3,
            encoder_width: Some(4),
            encoder_layers: 2,
            latent_layers: 2,
            layout: ModLayout {
                k: 2,
                hidden: 6,
                code: 4,
            },
        }
    }

    #[test]
    fn catmull_rom_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn bicubic_identity_and_constants() {
        let img = noise(7, 5, 1);
        assert_eq!(bicubic_downsample(&img, 1.0).unwrap(), img);
        let c = Image::filled(12, 10, 3, 0.37);
        for s in [1.5, 2.0, 3.0, 3.7] {
            let d = bicubic_downsample(&c, s).unwrap();
            assert!(d.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
        }
        assert!(bicubic_downsample(&img, 20.0).is_err());
        assert!(bicubic_downsample(&img, 0.5).is_err());
    }

    #[test]
    fn bicubic_ramp_matches_scalar_reference() {
        let (h, w) = (8, 12);
        let img = Image::from_fn(h, w, 1, |y, x, _| 0.1 * x as f64 + 0.03 * y as f64);
        let out = bicubic_downsample(&img, 2.0).unwrap();
        assert_eq!(out.dims(), (4, 6, 1));
        // direct 2-D convolution with the 2x-widened kernel
        let k = |t: f64| cubic(t / 2.0);
        for oy in 0..4 {
            for ox in 0..6 {
                let cy = 2.0 * oy as f64 + 0.5;
                let cx = 2.0 * ox as f64 + 0.5;
                let (mut acc, mut norm_y, mut norm_x) = (0.0, 0.0, 0.0);
                for j in -6i32..20 {
                    norm_y += k(cy - j as f64);
                }
                for i in -6i32..20 {
                    norm_x += k(cx - i as f64);
                }
                for j in -6i32..20 {
                    for i in -6i32..20 {
                        let wy = k(cy - j as f64) / norm_y;
                        let wx = k(cx - i as f64) / norm_x;
                        let sy = j.clamp(0, h as i32 - 1) as usize;
                        let sx = i.clamp(0, w as i32 - 1) as usize;
                        acc += wy * wx * img.get(sy, sx, 0);
                    }
                }
                assert!((out.get(oy, ox, 0) - acc).abs() < 1e-10, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn unit_scale_samples_reproduce_crop() {
        let img = noise(20, 20, 2);
        let cfg = TrainConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            patch: 8,
            pixels_per_patch: 64,
            batch: 3,
            ..TrainConfig::default()
        };
        let batch = sample_training_batch(std::slice::from_ref(&img), &cfg, &mut rng(3));
        assert_eq!(batch.len(), 3);
        for s in &batch {
            assert_eq!(s.lr_patch.dims(), (8, 8, 3));
            assert_eq!(s.coords.len(), 64);
            // every pixel of the patch is sampled exactly once
            for (q, &(cy, cx)) in s.coords.iter().enumerate() {
                let y = ((cy + 1.0) * 4.0 - 0.5).round() as usize;
                let x = ((cx + 1.0) * 4.0 - 0.5).round() as usize;
                assert_eq!(&s.targets[q * 3..q * 3 + 3], s.lr_patch.pixel(y, x));
            }
        }
    }

    #[test]
    fn batch_shape_law_and_small_images() {
        let cfg = TrainConfig {
            patch: 6,
            pixels_per_patch: 50,
            batch: 5,
            ..TrainConfig::default()
        };
        let data = vec![noise(30, 30, 4)];
        let b = sample_training_batch(&data, &cfg, &mut rng(5));
        assert_eq!(b.len(), 5);
        for s in &b {
            assert_eq!(s.lr_patch.dims(), (6, 6, 3));
            assert_eq!(s.coords.len(), 50);
            assert_eq!(s.targets.len(), 150);
            assert!(s.coords.iter().all(|&(y, x)| y.abs() <= 1.0 && x.abs() <= 1.0));
            assert!(s.scale >= 1.0 && s.scale <= 4.1);
        }
        let tiny = vec![Image::new(5, 5, 3)];
        assert!(sample_training_batch(&tiny, &cfg, &mut rng(6)).is_empty());
    }

    #[test]
    fn l1_examples() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        assert!((l1_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(l1_grad(&[1.0, 0.0, 2.0], &[0.0, 0.0, 3.0]).unwrap(), vec![1.0 / 3.0, 0.0, -1.0 / 3.0]);
        assert!(l1_loss(&a, &[0.0]).is_err());
    }

    #[test]
    fn adam_examples() {
        let hyper = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [p.as_mut_slice()], &[vec![0.0, 0.0]], &mut st, &hyper, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut st = AdamState::new(&[2]);
        adam_step(&mut [p.as_mut_slice()], &[vec![3.0, -1e-3]], &mut st, &hyper, 1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 1.9).abs() < 1e-4);

        // scalar oracle: g1 = 2, g2 = -1 from x = 0.5, lr 0.01
        let hyper = AdamHyper { lr: 0.01, ..hyper };
        let mut x = vec![0.5];
        let mut st = AdamState::new(&[1]);
        adam_step(&mut [x.as_mut_slice()], &[vec![2.0]], &mut st, &hyper, 1).unwrap();
        let x1 = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((x[0] - x1).abs() < 1e-15);
        adam_step(&mut [x.as_mut_slice()], &[vec![-1.0]], &mut st, &hyper, 2).unwrap();
        // m2 = 0.08, v2 = 0.004996; m̂ = 0.08/0.19, v̂ = 0.004996/0.001999
        let expected = x1 - 0.01 * (0.08 / 0.19) / ((0.004996f64 / 0.001999).sqrt() + 1e-8);
        assert!((x[0] - expected).abs() < 1e-12);
        assert!(adam_step(&mut [x.as_mut_slice()], &[vec![1.0]], &mut st, &hyper, 0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = noise(4, 4, 7);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = Image::filled(3, 3, 3, 0.2);
        let o = Image::filled(3, 3, 3, 0.3);
        assert!((psnr(&z, &o).unwrap() - 20.0).abs() < 1e-9);
        let b = noise(4, 4, 8);
        let mut sum = 0.0;
        for i in 0..a.data().len() {
            sum += (a.data()[i] - b.data()[i]).powi(2);
        }
        let reference = 10.0 * (1.0 / (sum / a.data().len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-9);
    }

    fn audit_setup(kind: DecoderKind, seed: u64) -> (Model, Vec<TrainSample>) {
        let model = Model::init(kind, &small_cfg(), &mut rng(seed)).unwrap();
        let cfg = TrainConfig {
            patch: 5,
            pixels_per_patch: 20,
            batch: 2,
            scale_max: 2.5,
            ..TrainConfig::default()
        };
        let data = vec![noise(16, 16, seed + 1)];
        (model, sample_training_batch(&data, &cfg, &mut rng(seed + 2)))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, kind) in [DecoderKind::Lmf, DecoderKind::Vanilla, DecoderKind::C2f].into_iter().enumerate() {
            let (model, batch) = audit_setup(kind, 10 + i as u64);
            let report = gradient_audit(&model, &batch, 80, 1e-5, &mut rng(99)).unwrap();
            assert!(report.max_rel_err() <= 1e-4, "{kind:?} {:?}", report.worst());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, _) = audit_setup(DecoderKind::Lmf, 20);
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            patch: 4,
            pixels_per_patch: 16,
            batch: 1,
            scale_max: 2.0,
            ..TrainConfig::default()
        };
        let out = train(model.clone(), &[noise(12, 12, 21)], &cfg).unwrap();
        assert_eq!(out.model.params(), model.params());
        assert_eq!(out.curve.records.len(), 3);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig {
            steps: 60,
            patch: 6,
            pixels_per_patch: 36,
            batch: 2,
            scale_max: 2.0,
            lr: 5e-3,
            decay_every: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let img = Image::from_fn(12, 12, 3, |y, x, c| ((x + y + c) % 4) as f64 / 4.0);
        let (model, _) = audit_setup(DecoderKind::Lmf, 30);
        let a = train(model.clone(), std::slice::from_ref(&img), &cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train(model, std::slice::from_ref(&img), &cfg).unwrap());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.params(), b.model.params());
        let (first, last) = a.curve.first_last_mean(10);
        assert!(last < first, "{first} -> {last}");
        assert!(a.curve.to_csv().starts_with("step,loss,lr\n0,"));
    }

    #[test]
    fn nan_data_rejected() {
        let (model, _) = audit_setup(DecoderKind::Lmf, 40);
        let mut img = noise(12, 12, 41);
        img.set(3, 3, 0, f64::NAN);
        assert!(matches!(train(model, &[img], &TrainConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn bilinear_baseline_is_reachable() {
        let img = noise(8, 8, 50);
        let lr = bicubic_downsample(&img, 2.0).unwrap();
        let up = bilinear_resize(&lr, 8, 8).unwrap();
        assert!(psnr(&img, &up).unwrap().is_finite());
    }
}
