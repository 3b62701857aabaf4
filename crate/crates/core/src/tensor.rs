//! Dense kernels: multilayer perceptrons, FiLM modulation and reverse-mode
//! gradients for both.
//!
//! Layer order for a modulated network is
//! `linear -> (1 + alpha) * h + beta -> relu -> next linear`. The final layer is
//! never rectified and never modulated.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::cost::MacTally;
use crate::error::{Error, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// One dense layer. `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::shape("linear layer dims must be positive"));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "linear {in_dim}->{out_dim}: weight has {} entries, bias {}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, row) in self.weight.chunks_exact(self.in_dim).enumerate() {
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out[o] = acc;
        }
    }
}

/// Parameters of a dense MLP together with the set of layers whose outputs
/// receive FiLM modulation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    modulated: Vec<usize>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.modulated == other.modulated
    }
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, modulated: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::LayerShape {
                    layer: i + 1,
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        let last = layers.len() - 1;
        for pair in modulated.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::shape("modulated layer indices must be strictly increasing"));
            }
        }
        if let Some(&m) = modulated.iter().find(|&&m| m >= last) {
            return Err(Error::shape(format!(
                "layer {m} cannot be modulated: only hidden layers 0..{last} accept FiLM"
            )));
        }
        Ok(Mlp {
            layers,
            modulated,
            version: fresh_version(),
        })
    }

    /// Randomly initialised network with layer widths `dims[0] -> dims[1] -> ...`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], modulated: Vec<usize>, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid MLP widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp::new(layers, modulated)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn modulated_layers(&self) -> &[usize] {
        &self.modulated
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer widths as `in, hidden..., out`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    /// Linear-layer multiply-accumulates of one forward pass.
    pub fn macs_per_forward(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.in_dim * l.out_dim) as u64)
            .sum()
    }

    /// Total FiLM width, `2 * sum(width of each modulated layer)`.
    pub fn film_len(&self) -> usize {
        self.modulated
            .iter()
            .map(|&m| 2 * self.layers[m].out_dim)
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Mutable views of every weight and bias tensor, in layer order
    /// `w0, b0, w1, b1, ...`. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = fresh_version();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Position of `layer` within the modulated set.
    fn film_slot(&self, layer: usize) -> Option<usize> {
        self.modulated.iter().position(|&m| m == layer)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn check_film(&self, film: &[f64]) -> Result<()> {
        if film.len() != self.film_len() {
            return Err(Error::shape(format!(
                "packed FiLM vector has {} entries, network expects {}",
                film.len(),
                self.film_len()
            )));
        }
        Ok(())
    }

    /// Plain forward pass. Modulated layers behave as if alpha = beta = 0.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut scratch = Scratch::new(self);
        Ok(self
            .run(input, None, &mut scratch, &mut MacTally::default())
            .to_vec())
    }

    /// Forward pass with per-layer FiLM parameters.
    pub fn forward_modulated(&self, input: &[f64], film: &FilmParams) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if film.len() != self.modulated.len() {
            return Err(Error::ModulationArity {
                expected: self.modulated.len(),
                got: film.len(),
            });
        }
        for (k, &layer) in self.modulated.iter().enumerate() {
            let width = self.layers[layer].out_dim;
            if film.alpha[k].len() != width || film.beta[k].len() != width {
                return Err(Error::LayerShape {
                    layer,
                    expected: width,
                    got: film.alpha[k].len().max(film.beta[k].len()),
                });
            }
        }
        let packed = film.pack();
        let mut scratch = Scratch::new(self);
        Ok(self
            .run(input, Some(&packed), &mut scratch, &mut MacTally::default())
            .to_vec())
    }

    /// Forward pass with a packed FiLM vector `[alpha_1, beta_1, ..., alpha_K, beta_K]`,
    /// writing into reusable scratch buffers.
    pub fn forward_packed<'s>(
        &self,
        input: &[f64],
        film: Option<&[f64]>,
        scratch: &'s mut Scratch,
        tally: &mut MacTally,
    ) -> Result<&'s [f64]> {
        self.check_input(input)?;
        if let Some(f) = film {
            self.check_film(f)?;
        }
        Ok(self.run(input, film, scratch, tally))
    }

    pub(crate) fn run<'s>(
        &self,
        input: &[f64],
        film: Option<&[f64]>,
        scratch: &'s mut Scratch,
        tally: &mut MacTally,
    ) -> &'s [f64] {
        let last = self.layers.len() - 1;
        let mut film_off = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (prev, cur) = scratch.split(i);
            let x = if i == 0 { input } else { prev };
            layer.forward_into(x, cur);
            tally.linear += (layer.in_dim * layer.out_dim) as u128;
            if i == last {
                break;
            }
            let modulated = self.film_slot(i).is_some();
            match film {
                Some(f) if modulated => {
                    let w = layer.out_dim;
                    let (alpha, beta) = f[film_off..film_off + 2 * w].split_at(w);
                    film_off += 2 * w;
                    for ((h, a), b) in cur.iter_mut().zip(alpha).zip(beta) {
                        *h = relu((1.0 + a) * *h + b);
                    }
                    tally.overhead += w as u128;
                }
                _ => {
                    for h in cur.iter_mut() {
                        *h = relu(*h);
                    }
                }
            }
        }
        &scratch.bufs[last]
    }

    /// Forward pass that records everything the reverse pass needs.
    pub fn forward_traced(
        &self,
        input: &[f64],
        film: Option<&[f64]>,
        tally: &mut MacTally,
    ) -> Result<Tape> {
        self.check_input(input)?;
        if let Some(f) = film {
            self.check_film(f)?;
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut gated = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        let mut film_off = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = vec![0.0; layer.out_dim];
            layer.forward_into(&x, &mut h);
            tally.linear += (layer.in_dim * layer.out_dim) as u128;
            inputs.push(std::mem::take(&mut x));
            if i == last {
                x = h.clone();
                pre.push(h);
                gated.push(Vec::new());
                break;
            }
            let g: Vec<f64> = match film {
                Some(f) if self.film_slot(i).is_some() => {
                    let w = layer.out_dim;
                    let (alpha, beta) = f[film_off..film_off + 2 * w].split_at(w);
                    film_off += 2 * w;
                    tally.overhead += w as u128;
                    h.iter()
                        .zip(alpha)
                        .zip(beta)
                        .map(|((h, a), b)| (1.0 + a) * h + b)
                        .collect()
                }
                _ => h.clone(),
            };
            x = g.iter().map(|&v| relu(v)).collect();
            pre.push(h);
            gated.push(g);
        }
        Ok(Tape {
            version: self.version,
            widths: self.widths(),
            inputs,
            pre,
            gated,
            film: film.map(<[f64]>::to_vec),
            output: x,
        })
    }

    /// Reverse pass. Gradients are added into `grads`, `d_input` and `d_film`
    /// when provided.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut MlpGrads,
        mut d_input: Option<&mut [f64]>,
        mut d_film: Option<&mut [f64]>,
    ) -> Result<()> {
        if tape.version != self.version || tape.widths != self.widths() {
            return Err(Error::StaleTape(
                "tape was recorded against different parameters".into(),
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::LayerShape {
                layer: self.layers.len() - 1,
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if let Some(df) = d_film.as_deref() {
            if tape.film.is_none() || df.len() != self.film_len() {
                return Err(Error::shape("FiLM gradient buffer does not match the tape"));
            }
        }
        let last = self.layers.len() - 1;
        let film_offsets: Vec<usize> = {
            let mut off = 0;
            self.modulated
                .iter()
                .map(|&m| {
                    let o = off;
                    off += 2 * self.layers[m].out_dim;
                    o
                })
                .collect()
        };
        // gradient w.r.t. the output of layer i (after activation for hidden layers)
        let mut d_out = upstream.to_vec();
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let mut d_pre = d_out;
            if i != last {
                let g = &tape.gated[i];
                for (d, &gv) in d_pre.iter_mut().zip(g) {
                    if gv <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let (Some(film), Some(slot)) = (tape.film.as_deref(), self.film_slot(i)) {
                    let w = layer.out_dim;
                    let off = film_offsets[slot];
                    let alpha = &film[off..off + w];
                    let h = &tape.pre[i];
                    if let Some(df) = d_film.as_deref_mut() {
                        for j in 0..w {
                            df[off + j] += d_pre[j] * h[j];
                            df[off + w + j] += d_pre[j];
                        }
                    }
                    for (d, a) in d_pre.iter_mut().zip(alpha) {
                        *d *= 1.0 + a;
                    }
                }
            }
            let x = &tape.inputs[i];
            let gw = &mut grads.weights[i];
            let gb = &mut grads.biases[i];
            for (o, &d) in d_pre.iter().enumerate() {
                gb[o] += d;
                if d != 0.0 {
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        *g += d * xv;
                    }
                }
            }
            if i == 0 && d_input.is_none() {
                break;
            }
            let mut d_x = vec![0.0; layer.in_dim];
            for (o, &d) in d_pre.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (dx, &w) in d_x.iter_mut().zip(row) {
                        *dx += d * w;
                    }
                }
            }
            if i == 0 {
                if let Some(di) = d_input.as_deref_mut() {
                    for (a, b) in di.iter_mut().zip(&d_x) {
                        *a += b;
                    }
                }
                break;
            }
            d_out = d_x;
        }
        Ok(())
    }

    /// Reverse pass returning fresh gradients.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<Backward> {
        let mut params = self.zero_grads();
        let mut input = vec![0.0; self.input_dim()];
        let mut film = tape.film.as_ref().map(|f| vec![0.0; f.len()]);
        self.backward_accumulate(
            tape,
            upstream,
            &mut params,
            Some(&mut input),
            film.as_deref_mut(),
        )?;
        let film = film.map(|packed| FilmParams::unpack(&packed, &self.film_widths()));
        Ok(Backward {
            params,
            input,
            film,
        })
    }

    pub fn film_widths(&self) -> Vec<usize> {
        self.modulated
            .iter()
            .map(|&m| self.layers[m].out_dim)
            .collect()
    }
}

/// Reusable per-layer output buffers for [`Mlp::forward_packed`].
#[derive(Debug, Clone)]
pub struct Scratch {
    bufs: Vec<Vec<f64>>,
}

impl Scratch {
    pub fn new(mlp: &Mlp) -> Self {
        Scratch {
            bufs: mlp.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    fn split(&mut self, i: usize) -> (&[f64], &mut [f64]) {
        let (head, tail) = self.bufs.split_at_mut(i);
        let prev: &[f64] = if i == 0 { &[] } else { &head[i - 1] };
        (prev, tail[0].as_mut_slice())
    }
}

/// Element-wise FiLM parameters, one `(alpha, beta)` pair per modulated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl FilmParams {
    pub fn zeros(widths: &[usize]) -> Self {
        FilmParams {
            alpha: widths.iter().map(|&w| vec![0.0; w]).collect(),
            beta: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    /// Number of modulated layers.
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// `[alpha_1, beta_1, ..., alpha_K, beta_K]`
    pub fn pack(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .flat_map(|(a, b)| a.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn unpack(packed: &[f64], widths: &[usize]) -> Self {
        let mut alpha = Vec::with_capacity(widths.len());
        let mut beta = Vec::with_capacity(widths.len());
        let mut off = 0;
        for &w in widths {
            alpha.push(packed[off..off + w].to_vec());
            beta.push(packed[off + w..off + 2 * w].to_vec());
            off += 2 * w;
        }
        FilmParams { alpha, beta }
    }
}

/// `(1 + alpha) * h + beta`, element-wise. The activation is applied by the caller.
pub fn film_apply(h: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if h.len() != alpha.len() || h.len() != beta.len() {
        return Err(Error::shape(format!(
            "FiLM widths differ: h {}, alpha {}, beta {}",
            h.len(),
            alpha.len(),
            beta.len()
        )));
    }
    Ok(h.iter()
        .zip(alpha)
        .zip(beta)
        .map(|((h, a), b)| (1.0 + a) * h + b)
        .collect())
}

/// Primal values recorded by [`Mlp::forward_traced`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    widths: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    gated: Vec<Vec<f64>>,
    film: Option<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    /// Feeds the on/off state of every ReLU into `h`.
    pub fn hash_gates<H: std::hash::Hasher>(&self, h: &mut H) {
        for v in self.gated.iter().flatten() {
            h.write_u8((*v > 0.0) as u8);
        }
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Parameter gradients laid out like [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn clear(&mut self) {
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub params: MlpGrads,
    pub input: Vec<f64>,
    pub film: Option<FilmParams>,
}
