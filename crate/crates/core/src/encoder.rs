//! Feature extractors that turn an image into a grid of latent codes.

use rand::Rng;

use crate::coord::feature_unfold;
use crate::cost::MacTally;
use crate::error::{Error, Result};
use crate::image::Image;

/// `height x width` grid of `depth`-wide latent codes, code-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        FeatureMap {
            height,
            width,
            depth,
            values: vec![0.0; height * width * depth],
        }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * depth {
            return Err(Error::shape(format!(
                "feature buffer holds {} values, {height}x{width}x{depth} needs {}",
                values.len(),
                height * width * depth
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            depth,
            values,
        })
    }

    pub fn from_image(img: &Image) -> Self {
        FeatureMap {
            height: img.height(),
            width: img.width(),
            depth: img.channels(),
            values: img.data().to_vec(),
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn code(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.depth;
        &self.values[i..i + self.depth]
    }

    #[inline]
    pub fn code_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.depth;
        &mut self.values[i..i + self.depth]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// 3x3 correlation with replicate padding. Weights are laid out
/// `[out][ky][kx][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    in_ch: usize,
    out_ch: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn new(in_ch: usize, out_ch: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || weight.len() != out_ch * 9 * in_ch || bias.len() != out_ch {
            return Err(Error::shape(format!(
                "conv {in_ch}->{out_ch}: weight {} bias {}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Conv3x3 {
            in_ch,
            out_ch,
            weight,
            bias,
        })
    }

    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((9 * in_ch) as f64).sqrt();
        Conv3x3 {
            in_ch,
            out_ch,
            weight: (0..out_ch * 9 * in_ch)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            bias: (0..out_ch).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    /// Center tap copies input channel `o` to output channel `o`.
    pub fn identity(in_ch: usize, out_ch: usize) -> Self {
        let mut weight = vec![0.0; out_ch * 9 * in_ch];
        for o in 0..out_ch.min(in_ch) {
            weight[(o * 9 + 4) * in_ch + o] = 1.0;
        }
        Conv3x3 {
            in_ch,
            out_ch,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn forward(&self, input: &FeatureMap, tally: &mut MacTally) -> FeatureMap {
        let (h, w) = (input.height, input.width);
        let mut out = FeatureMap::zeros(h, w, self.out_ch);
        for y in 0..h {
            for x in 0..w {
                let dst = out.code_mut(y, x);
                dst.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    for kx in 0..3 {
                        let sx = (x + kx).saturating_sub(1).min(w - 1);
                        let src = input.code(sy, sx);
                        let tap = ky * 3 + kx;
                        for (o, d) in dst.iter_mut().enumerate() {
                            let row = &self.weight[(o * 9 + tap) * self.in_ch..][..self.in_ch];
                            *d += row.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        tally.linear += (h * w * 9 * self.in_ch * self.out_ch) as u128;
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(
        &self,
        input: &FeatureMap,
        d_pre: &FeatureMap,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        want_input: bool,
    ) -> Option<FeatureMap> {
        let (h, w) = (input.height, input.width);
        let mut d_in = want_input.then(|| FeatureMap::zeros(h, w, self.in_ch));
        for y in 0..h {
            for x in 0..w {
                let g = d_pre.code(y, x);
                for (b, gv) in d_bias.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..3 {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    for kx in 0..3 {
                        let sx = (x + kx).saturating_sub(1).min(w - 1);
                        let src = input.code(sy, sx);
                        let tap = ky * 3 + kx;
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let off = (o * 9 + tap) * self.in_ch;
                            for (dw, s) in d_weight[off..off + self.in_ch].iter_mut().zip(src) {
                                *dw += gv * s;
                            }
                            if let Some(d_in) = d_in.as_mut() {
                                let row = &self.weight[off..off + self.in_ch];
                                for (di, wv) in d_in.code_mut(sy, sx).iter_mut().zip(row) {
                                    *di += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Stack of 3x3 correlations with a rectifier between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyConv {
    layers: Vec<Conv3x3>,
}

impl TinyConv {
    pub fn new(layers: Vec<Conv3x3>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("tiny_conv needs at least one layer"));
        }
        for (i, p) in layers.windows(2).enumerate() {
            if p[0].out_ch != p[1].in_ch {
                return Err(Error::LayerShape {
                    layer: i + 1,
                    expected: p[0].out_ch,
                    got: p[1].in_ch,
                });
            }
        }
        Ok(TinyConv { layers })
    }

    pub fn init<R: Rng + ?Sized>(in_ch: usize, width: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth.max(1))
            .map(|i| Conv3x3::init(if i == 0 { in_ch } else { width }, width, rng))
            .collect();
        TinyConv { layers }
    }

    pub fn layers(&self) -> &[Conv3x3] {
        &self.layers
    }
}

/// Activations recorded by [`Encoder::forward_traced`].
#[derive(Debug, Clone)]
pub struct EncoderTape {
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
}

impl EncoderTape {
    /// Feeds the on/off state of every ReLU into `h`.
    pub fn hash_gates<H: std::hash::Hasher>(&self, h: &mut H) {
        let n = self.pre.len().saturating_sub(1);
        for v in self.pre[..n].iter().flat_map(|p| p.values()) {
            h.write_u8((*v > 0.0) as u8);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    /// 3x3 unfolding of the raw channels; output depth `9 * channels`.
    IdentityUnfold { channels: usize },
    TinyConv(TinyConv),
}

impl Encoder {
    pub fn tiny_conv<R: Rng + ?Sized>(in_ch: usize, width: usize, depth: usize, rng: &mut R) -> Self {
        Encoder::TinyConv(TinyConv::init(in_ch, width, depth, rng))
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Encoder::IdentityUnfold { channels } => *channels,
            Encoder::TinyConv(t) => t.layers[0].in_ch,
        }
    }

    pub fn out_depth(&self) -> usize {
        match self {
            Encoder::IdentityUnfold { channels } => 9 * channels,
            Encoder::TinyConv(t) => t.layers[t.layers.len() - 1].out_ch,
        }
    }

    fn check(&self, img: &Image) -> Result<()> {
        if img.channels() != self.in_channels() {
            return Err(Error::shape(format!(
                "encoder expects {} channels, image has {}",
                self.in_channels(),
                img.channels()
            )));
        }
        if img.height() == 0 || img.width() == 0 {
            return Err(Error::domain("empty image"));
        }
        Ok(())
    }

    pub fn encode(&self, img: &Image) -> Result<FeatureMap> {
        self.encode_counted(img, &mut MacTally::default())
    }

    pub fn encode_counted(&self, img: &Image, tally: &mut MacTally) -> Result<FeatureMap> {
        self.check(img)?;
        let src = FeatureMap::from_image(img);
        Ok(match self {
            Encoder::IdentityUnfold { .. } => feature_unfold(&src),
            Encoder::TinyConv(t) => {
                let last = t.layers.len() - 1;
                let mut x = src;
                for (i, layer) in t.layers.iter().enumerate() {
                    x = layer.forward(&x, tally);
                    if i != last {
                        relu_in_place(&mut x);
                    }
                }
                x
            }
        })
    }

    pub fn forward_traced(&self, img: &Image, tally: &mut MacTally) -> Result<(FeatureMap, EncoderTape)> {
        self.check(img)?;
        let src = FeatureMap::from_image(img);
        match self {
            Encoder::IdentityUnfold { .. } => Ok((
                feature_unfold(&src),
                EncoderTape {
                    inputs: vec![],
                    pre: vec![],
                },
            )),
            Encoder::TinyConv(t) => {
                let last = t.layers.len() - 1;
                let mut inputs = Vec::new();
                let mut pre = Vec::new();
                let mut x = src;
                for (i, layer) in t.layers.iter().enumerate() {
                    let p = layer.forward(&x, tally);
                    inputs.push(x);
                    x = p.clone();
                    if i != last {
                        relu_in_place(&mut x);
                    }
                    pre.push(p);
                }
                Ok((x, EncoderTape { inputs, pre }))
            }
        }
    }

    /// Accumulates gradients of the encoder parameters given the gradient of
    /// its output feature map.
    pub fn backward(&self, tape: &EncoderTape, d_out: &FeatureMap, grads: &mut [Vec<f64>]) -> Result<()> {
        let Encoder::TinyConv(t) = self else {
            return Ok(());
        };
        if tape.inputs.len() != t.layers.len() || grads.len() != 2 * t.layers.len() {
            return Err(Error::StaleTape("encoder tape does not match the network".into()));
        }
        let last = t.layers.len() - 1;
        let mut d = d_out.clone();
        for i in (0..=last).rev() {
            if i != last {
                for (g, &p) in d.values.iter_mut().zip(&tape.pre[i].values) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (dw, db) = grads[2 * i..2 * i + 2].split_at_mut(1);
            let next = t.layers[i].backward(&tape.inputs[i], &d, &mut dw[0], &mut db[0], i > 0);
            match next {
                Some(n) => d = n,
                None => break,
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Encoder::IdentityUnfold { .. } => vec![],
            Encoder::TinyConv(t) => t
                .layers
                .iter()
                .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Encoder::IdentityUnfold { .. } => vec![],
            Encoder::TinyConv(t) => t
                .layers
                .iter_mut()
                .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

fn relu_in_place(fm: &mut FeatureMap) {
    for v in fm.values.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen())
    }

    #[test]
    fn identity_unfold_on_constant_image() {
        let img = Image::filled(5, 4, 3, 0.6);
        let fm = Encoder::IdentityUnfold { channels: 3 }.encode(&img).unwrap();
        assert_eq!((fm.height(), fm.width(), fm.depth()), (5, 4, 27));
        assert!(fm.values().iter().all(|&v| v == 0.6));
    }

    #[test]
    fn identity_kernel_projects_channels() {
        let img = random_image(4, 6, 1);
        let enc = Encoder::TinyConv(TinyConv::new(vec![Conv3x3::identity(3, 5)]).unwrap());
        let fm = enc.encode(&img).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let code = fm.code(y, x);
                assert_eq!(&code[..3], img.pixel(y, x));
                assert_eq!(&code[3..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn spatial_dims_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(7, 3, 2);
        for enc in [
            Encoder::IdentityUnfold { channels: 3 },
            Encoder::tiny_conv(3, 8, 3, &mut rng),
        ] {
            let fm = enc.encode(&img).unwrap();
            assert_eq!((fm.height(), fm.width(), fm.depth()), (7, 3, enc.out_depth()));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let img = Image::new(3, 3, 1);
        assert!(Encoder::IdentityUnfold { channels: 3 }.encode(&img).is_err());
    }

    #[test]
    fn interior_translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::tiny_conv(3, 4, 2, &mut rng);
        let big = random_image(10, 10, 4);
        let shifted = Image::from_fn(10, 10, 3, |y, x, c| big.get(y, (x + 1).min(9), c));
        let a = enc.encode(&big).unwrap();
        let b = enc.encode(&shifted).unwrap();
        // two layers of 3x3 reach two pixels; stay clear of both borders
        for y in 2..8 {
            for x in 2..7 {
                assert_eq!(a.code(y, x + 1), b.code(y, x));
            }
        }
    }

    #[test]
    fn conv_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut enc = Encoder::tiny_conv(3, 4, 3, &mut rng);
        let img = random_image(4, 4, 9);
        let probe: Vec<f64> = (0..4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |e: &Encoder| -> f64 {
            e.encode(&img).unwrap().values().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = enc.forward_traced(&img, &mut MacTally::default()).unwrap();
        let d_out = FeatureMap::from_vec(4, 4, 4, probe.clone()).unwrap();
        let mut grads = enc.zero_grads();
        enc.backward(&tape, &d_out, &mut grads).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for t in 0..grads.len() {
            for j in 0..grads[t].len() {
                let orig = enc.params()[t][j];
                enc.params_mut()[t][j] = orig + step;
                let up = objective(&enc);
                enc.params_mut()[t][j] = orig - step;
                let down = objective(&enc);
                enc.params_mut()[t][j] = orig;
                let numeric = (up - down) / (2.0 * step);
                let err = (grads[t][j] - numeric).abs() / grads[t][j].abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn encoder_macs_are_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::tiny_conv(3, 8, 2, &mut rng);
        let mut tally = MacTally::default();
        enc.encode_counted(&random_image(5, 6, 1), &mut tally).unwrap();
        assert_eq!(tally.linear, (30 * 9 * (3 * 8 + 8 * 8)) as u128);
    }
}
