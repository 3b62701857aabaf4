//! Closed-form multiply-accumulate counts for the vanilla and latent-modulated
//! decoders, plus the runtime tally the decoders fill in while executing.
//!
//! Only linear-layer multiplications enter the closed forms. FiLM scaling and
//! ensemble weighting are tallied separately as `overhead`.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::coord::output_extent;
use crate::error::{Error, Result};

/// Runtime multiply-accumulate counter for one stage of a decode.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacTally {
    pub linear: u128,
    pub overhead: u128,
}

impl Add for MacTally {
    type Output = MacTally;

    fn add(self, rhs: MacTally) -> MacTally {
        MacTally {
            linear: self.linear + rhs.linear,
            overhead: self.overhead + rhs.overhead,
        }
    }
}

impl AddAssign for MacTally {
    fn add_assign(&mut self, rhs: MacTally) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for MacTally {
    fn sum<I: Iterator<Item = MacTally>>(iter: I) -> MacTally {
        iter.fold(MacTally::default(), Add::add)
    }
}

/// Per-stage tallies of one decode invocation.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct StageCosts {
    pub encoder: MacTally,
    pub latent: MacTally,
    pub render: MacTally,
}

impl StageCosts {
    /// Linear-layer multiply-accumulates of the decoder (latent + render),
    /// the quantity the closed forms describe.
    pub fn decoder_linear(&self) -> u128 {
        self.latent.linear + self.render.linear
    }

    pub fn overhead(&self) -> u128 {
        self.encoder.overhead + self.latent.overhead + self.render.overhead
    }
}

impl AddAssign for StageCosts {
    fn add_assign(&mut self, rhs: StageCosts) {
        self.encoder += rhs.encoder;
        self.latent += rhs.latent;
        self.render += rhs.render;
    }
}

/// Dimensions of a single-MLP decoder evaluated at every output pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VanillaDims {
    pub d_in: u64,
    pub d_h: u64,
    pub d_out: u64,
    /// number of linear layers
    pub k: u64,
}

/// Dimensions of a two-stage latent-modulated decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmfDims {
    pub d_in_l: u64,
    pub d_l: u64,
    pub k_l: u64,
    /// render network input width (compressed code + coordinate + cell)
    pub d_c: u64,
    pub d_r: u64,
    pub k_r: u64,
    pub d_out: u64,
}

impl VanillaDims {
    /// 580-256-256-256-256-3 decoder over 3x3-unfolded 64-channel features.
    pub const LIIF: VanillaDims = VanillaDims {
        d_in: 580,
        d_h: 256,
        d_out: 3,
        k: 5,
    };

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_h == 0 || self.d_out == 0 || self.k < 2 {
            return Err(Error::domain(format!("invalid decoder dims {self:?}")));
        }
        Ok(())
    }

    /// Layer widths `d_in, d_h x (k-1), d_out`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_in as usize];
        w.extend(std::iter::repeat_n(self.d_h as usize, self.k as usize - 1));
        w.push(self.d_out as usize);
        w
    }

    /// Multiply-accumulates for one output pixel (four ensemble corners).
    pub fn per_pixel(&self) -> Result<u128> {
        self.validate()?;
        let (d_in, d_h, d_out, k) = (
            self.d_in as u128,
            self.d_h as u128,
            self.d_out as u128,
            self.k as u128,
        );
        let single = checked_sum(&[(d_in, d_h, 1), (k - 2, d_h, d_h), (d_h, d_out, 1)])?;
        times(single, 4)
    }
}

impl LmfDims {
    /// 578-208-208 latent network, 20-16x6-3 render network with 6 modulated layers.
    pub const LM_LIIF: LmfDims = LmfDims {
        d_in_l: 578,
        d_l: 208,
        k_l: 2,
        d_c: 20,
        d_r: 16,
        k_r: 7,
        d_out: 3,
    };

    pub fn validate(&self) -> Result<()> {
        let positive = [self.d_in_l, self.d_l, self.k_l, self.d_c, self.d_r, self.d_out];
        if positive.contains(&0) || self.k_r < 2 {
            return Err(Error::domain(format!("invalid decoder dims {self:?}")));
        }
        Ok(())
    }

    pub fn latent_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_in_l as usize];
        w.extend(std::iter::repeat_n(self.d_l as usize, self.k_l as usize));
        w
    }

    pub fn render_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_c as usize];
        w.extend(std::iter::repeat_n(self.d_r as usize, self.k_r as usize - 1));
        w.push(self.d_out as usize);
        w
    }

    /// Multiply-accumulates for one latent code.
    pub fn per_code(&self) -> Result<u128> {
        self.validate()?;
        let (d_in, d_l, k_l) = (self.d_in_l as u128, self.d_l as u128, self.k_l as u128);
        checked_sum(&[(d_in, d_l, 1), (k_l - 1, d_l, d_l)])
    }

    /// Multiply-accumulates for one output pixel (four ensemble corners).
    pub fn per_pixel(&self) -> Result<u128> {
        self.validate()?;
        let (d_c, d_r, k_r, d_out) = (
            self.d_c as u128,
            self.d_r as u128,
            self.k_r as u128,
            self.d_out as u128,
        );
        let single = checked_sum(&[(d_c, d_r, 1), (k_r - 2, d_r, d_r), (d_r, d_out, 1)])?;
        times(single, 4)
    }
}

/// Sum of triple products, failing on overflow.
fn checked_sum(terms: &[(u128, u128, u128)]) -> Result<u128> {
    terms.iter().try_fold(0u128, |acc, &(a, b, c)| {
        a.checked_mul(b)
            .and_then(|ab| ab.checked_mul(c))
            .and_then(|abc| acc.checked_add(abc))
            .ok_or(Error::CostOverflow)
    })
}

fn times(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::CostOverflow)
}

fn pixels(h: usize, w: usize, s: f64) -> Result<(u128, u128)> {
    let codes = (h as u128) * (w as u128);
    let out = output_extent(h, s)? as u128 * output_extent(w, s)? as u128;
    Ok((codes, out))
}

/// `4 (d_in d_h + (k-2) d_h^2 + d_h d_out) * out_h * out_w`, where the output
/// extent is `round(s * h) x round(s * w)` (`s^2 h w` for integral scales).
pub fn macs_vanilla(dims: &VanillaDims, h: usize, w: usize, s: f64) -> Result<u128> {
    let (_, out) = pixels(h, w, s)?;
    times(dims.per_pixel()?, out)
}

/// `(d_in d_l + (k_l-1) d_l^2) h w + 4 (d_c d_r + (k_r-2) d_r^2 + d_r d_out) out_h out_w`.
pub fn macs_lmf(dims: &LmfDims, h: usize, w: usize, s: f64) -> Result<u128> {
    let (codes, out) = pixels(h, w, s)?;
    let latent = times(dims.per_code()?, codes)?;
    let render = times(dims.per_pixel()?, out)?;
    latent.checked_add(render).ok_or(Error::CostOverflow)
}

/// Latent-stage share of [`macs_lmf`].
pub fn macs_lmf_latent(dims: &LmfDims, h: usize, w: usize) -> Result<u128> {
    times(dims.per_code()?, (h as u128) * (w as u128))
}

/// Analytic and (optionally) instrumented cost of one decode.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub decoder: String,
    pub h: usize,
    pub w: usize,
    pub scale: f64,
    pub analytic_total: u128,
    pub analytic_latent: u128,
    pub analytic_render: u128,
    pub instrumented: Option<StageCosts>,
}

impl CostReport {
    pub fn vanilla(dims: &VanillaDims, h: usize, w: usize, s: f64) -> Result<Self> {
        let total = macs_vanilla(dims, h, w, s)?;
        Ok(CostReport {
            decoder: "vanilla".into(),
            h,
            w,
            scale: s,
            analytic_total: total,
            analytic_latent: 0,
            analytic_render: total,
            instrumented: None,
        })
    }

    pub fn lmf(dims: &LmfDims, h: usize, w: usize, s: f64) -> Result<Self> {
        let total = macs_lmf(dims, h, w, s)?;
        let latent = macs_lmf_latent(dims, h, w)?;
        Ok(CostReport {
            decoder: "lmf".into(),
            h,
            w,
            scale: s,
            analytic_total: total,
            analytic_latent: latent,
            analytic_render: total - latent,
            instrumented: None,
        })
    }

    pub fn with_instrumented(mut self, costs: StageCosts) -> Self {
        self.instrumented = Some(costs);
        self
    }

    /// Instrumented linear-layer count equals the closed form.
    pub fn matches(&self) -> Option<bool> {
        self.instrumented
            .map(|c| c.decoder_linear() == self.analytic_total)
    }

    /// Human-readable report, one quantity per line.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "decoder          {}", self.decoder);
        let _ = writeln!(out, "input            {}x{}", self.h, self.w);
        let _ = writeln!(out, "scale            {}", self.scale);
        let _ = writeln!(out, "analytic total   {}", self.analytic_total);
        let _ = writeln!(out, "analytic latent  {}", self.analytic_latent);
        let _ = writeln!(out, "analytic render  {}", self.analytic_render);
        if let Some(c) = &self.instrumented {
            let _ = writeln!(out, "measured latent  {}", c.latent.linear);
            let _ = writeln!(out, "measured render  {}", c.render.linear);
            let _ = writeln!(out, "measured encoder {}", c.encoder.linear);
            let _ = writeln!(out, "measured overhead {}", c.overhead());
            let _ = writeln!(
                out,
                "agreement        {}",
                if self.matches() == Some(true) { "exact" } else { "MISMATCH" }
            );
        }
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "decoder={}", self.decoder);
        let _ = writeln!(out, "h={}", self.h);
        let _ = writeln!(out, "w={}", self.w);
        let _ = writeln!(out, "scale={}", self.scale);
        let _ = writeln!(out, "analytic_total={}", self.analytic_total);
        let _ = writeln!(out, "analytic_latent={}", self.analytic_latent);
        let _ = writeln!(out, "analytic_render={}", self.analytic_render);
        if let Some(c) = &self.instrumented {
            let _ = writeln!(out, "instrumented_total={}", c.decoder_linear());
            let _ = writeln!(out, "instrumented_latent={}", c.latent.linear);
            let _ = writeln!(out, "instrumented_render={}", c.render.linear);
            let _ = writeln!(out, "instrumented_encoder={}", c.encoder.linear);
            let _ = writeln!(out, "overhead={}", c.overhead());
        }
        out
    }
}

/// Parse `key=value` lines produced by [`CostReport::to_key_values`].
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
