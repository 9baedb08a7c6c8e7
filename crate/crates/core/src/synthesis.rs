//! Upsampling decoder: conv → pixel shuffle → activation blocks, optional
//! per-stage grid embeddings, and a sigmoid head producing RGB.

use rand::Rng;

use crate::tensor::{Activation, Real, Tape, Tensor, TensorError, Var};

/// Per-stage widths at `width_mult = 1`; longer nets repeat the last entry.
pub const DEFAULT_CHANNELS: [usize; 5] = [64, 48, 32, 24, 16];

pub const KERNEL: usize = 3;

/// Width schedule for `stages` blocks scaled by `width_mult`.
pub fn default_channels(stages: usize, width_mult: f64) -> Vec<usize> {
    (0..stages)
        .map(|i| {
            let base = DEFAULT_CHANNELS[i.min(DEFAULT_CHANNELS.len() - 1)] as f64;
            ((base * width_mult).round() as usize).max(1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// latent channels entering the first block
    pub in_channels: usize,
    pub upscales: Vec<usize>,
    pub channels: Vec<usize>,
    pub activation: Activation,
    /// grid-embedding channels; 0 disables the embeddings
    pub ge_channels: usize,
    /// latent grid geometry, needed for the embedding grids
    pub frames: usize,
    pub views: usize,
    pub h: usize,
    pub w: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.upscales.is_empty() || self.upscales.len() != self.channels.len() {
            return Err(TensorError::invalid(
                "NetConfig",
                format!(
                    "{} upscales vs {} channel entries",
                    self.upscales.len(),
                    self.channels.len()
                ),
            ));
        }
        if self.upscales.iter().any(|&s| s == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(TensorError::invalid("NetConfig", "zero upscale or channel width"));
        }
        if self.in_channels == 0 || self.h == 0 || self.w == 0 {
            return Err(TensorError::invalid("NetConfig", "empty latent geometry"));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.upscales.len()
    }

    pub fn ge_enabled(&self) -> bool {
        self.ge_channels > 0
    }

    pub fn total_upscale(&self) -> usize {
        self.upscales.iter().product()
    }

    pub fn output_size(&self) -> (usize, usize) {
        let s = self.total_upscale();
        (self.h * s, self.w * s)
    }

    /// `(h_k, w_k, C_k)` after each block.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.h, self.w);
        self.upscales
            .iter()
            .zip(&self.channels)
            .map(|(&s, &c)| {
                h *= s;
                w *= s;
                (h, w, c)
            })
            .collect()
    }

    /// Parameter count of the conv stack and head from the closed form.
    pub fn conv_param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for (&s, &c) in self.upscales.iter().zip(&self.channels) {
            let cout = c * s * s;
            total += cout * cin * KERNEL * KERNEL + cout;
            cin = c;
        }
        total + 3 * cin * KERNEL * KERNEL + 3
    }

    /// Embedding grids and their 1×1 projections.
    pub fn ge_param_count(&self) -> usize {
        if !self.ge_enabled() {
            return 0;
        }
        let grid = self.frames * self.views * self.h * self.w * self.ge_channels;
        self.channels[..self.stages() - 1]
            .iter()
            .map(|&c| grid + c * self.ge_channels + c)
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.conv_param_count() + self.ge_param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Real> ConvLayer<S> {
    /// Uniform `±1/sqrt(fan_in)` for weight and bias.
    fn random(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let mut draw = |_| S::lit(rng.random_range(-bound..=bound));
        ConvLayer {
            weight: Tensor::from_fn(vec![cout, cin, k, k], &mut draw).into_param(),
            bias: Tensor::from_fn(vec![cout], &mut draw).into_param(),
        }
    }

    fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(vec![cout, cin, k, k]).into_param(),
            bias: Tensor::zeros(vec![cout]).into_param(),
        }
    }
}

/// Grid embedding for one stage: a `[T, N, h, w, ge]` grid projected by a
/// 1×1 conv to the stage width and nearest-upsampled to stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEmbedding<S> {
    pub grid: Tensor<S>,
    pub proj: ConvLayer<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisNet<S> {
    pub config: NetConfig,
    pub blocks: Vec<ConvLayer<S>>,
    pub embeddings: Vec<GridEmbedding<S>>,
    pub head: ConvLayer<S>,
}

/// Tape handles for one conv layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct NetVars {
    pub blocks: Vec<ConvVars>,
    pub embeddings: Vec<(Var, ConvVars)>,
    pub head: ConvVars,
}

impl<S: Real> SynthesisNet<S> {
    fn build(
        config: NetConfig,
        mut layer: impl FnMut(usize, usize, usize) -> ConvLayer<S>,
        mut grid: impl FnMut(Vec<usize>) -> Tensor<S>,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut blocks = Vec::new();
        for (&s, &c) in config.upscales.iter().zip(&config.channels) {
            blocks.push(layer(c * s * s, cin, KERNEL));
            cin = c;
        }
        let mut embeddings = Vec::new();
        if config.ge_enabled() {
            for &c in &config.channels[..config.stages() - 1] {
                embeddings.push(GridEmbedding {
                    grid: grid(vec![
                        config.frames,
                        config.views,
                        config.h,
                        config.w,
                        config.ge_channels,
                    ]),
                    proj: layer(c, config.ge_channels, 1),
                });
            }
        }
        let head = layer(3, cin, KERNEL);
        Ok(SynthesisNet {
            config,
            blocks,
            embeddings,
            head,
        })
    }

    pub fn random(config: NetConfig, rng: &mut impl Rng) -> Result<Self, TensorError> {
        // one generator shared by layers and grids, drawn in construction order
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            config,
            |co, ci, k| ConvLayer::random(co, ci, k, &mut *rng.borrow_mut()),
            |shape| {
                let mut r = rng.borrow_mut();
                let b = crate::multigrid::GRID_INIT;
                Tensor::from_fn(shape, |_| S::lit(r.random_range(-b..=b))).into_param()
            },
        )
    }

    pub fn zeros(config: NetConfig) -> Result<Self, TensorError> {
        Self::build(config, ConvLayer::zeros, |s| Tensor::zeros(s).into_param())
    }

    /// `(name, tensor)` in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.weight));
            out.push((format!("block{i}.bias"), &b.bias));
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            out.push((format!("ge{i}.grid"), &e.grid));
            out.push((format!("ge{i}.proj.weight"), &e.proj.weight));
            out.push((format!("ge{i}.proj.bias"), &e.proj.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for e in &mut self.embeddings {
            out.push(&mut e.grid);
            out.push(&mut e.proj.weight);
            out.push(&mut e.proj.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every tensor with consecutive keys starting at `base`, in
    /// [`Self::named_tensors`] order.
    pub fn bind(&self, tape: &mut Tape<S>, base: usize) -> NetVars {
        let mut key = base;
        let mut next = |tape: &mut Tape<S>, t: &Tensor<S>| {
            let v = tape.param(key, t);
            key += 1;
            v
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let weight = next(tape, &b.weight);
            let bias = next(tape, &b.bias);
            blocks.push(ConvVars { weight, bias });
        }
        let mut embeddings = Vec::with_capacity(self.embeddings.len());
        for e in &self.embeddings {
            let grid = next(tape, &e.grid);
            let weight = next(tape, &e.proj.weight);
            let bias = next(tape, &e.proj.bias);
            embeddings.push((grid, ConvVars { weight, bias }));
        }
        let weight = next(tape, &self.head.weight);
        let bias = next(tape, &self.head.bias);
        NetVars {
            blocks,
            embeddings,
            head: ConvVars { weight, bias },
        }
    }

    /// `latent` is `[1, h, w, c]` channels-last; returns `[1, 3, H, W]` in `[0, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &NetVars,
        latent: Var,
        t: usize,
        v: usize,
    ) -> Result<Var, TensorError> {
        let cfg = &self.config;
        let want = [1, cfg.h, cfg.w, cfg.in_channels];
        if tape.shape(latent) != want {
            return Err(TensorError::shape(
                "synthesis",
                format!("latent {:?}, expected {:?}", tape.shape(latent), want),
            ));
        }
        let mut x = tape.channels_first(latent)?;
        let mut scale = 1;
        for (k, (block, &s)) in vars.blocks.iter().zip(&cfg.upscales).enumerate() {
            x = tape.conv2d(x, block.weight, block.bias, KERNEL / 2)?;
            x = tape.pixel_shuffle(x, s)?;
            x = tape.activation(x, cfg.activation)?;
            scale *= s;
            if let Some((grid, proj)) = vars.embeddings.get(k) {
                let g = tape.select(*grid, &[t, v])?;
                let g = tape.channels_first(g)?;
                // 1×1 projection commutes with nearest upsampling
                let g = tape.conv2d(g, proj.weight, proj.bias, 0)?;
                let g = tape.upsample_nearest(g, scale)?;
                x = tape.add(x, g)?;
            }
        }
        let x = tape.conv2d(x, vars.head.weight, vars.head.bias, KERNEL / 2)?;
        tape.sigmoid(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: usize, w: usize, ups: Vec<usize>, ch: Vec<usize>, ge: usize) -> NetConfig {
        NetConfig {
            in_channels: 5,
            upscales: ups,
            channels: ch,
            activation: Activation::Gelu,
            ge_channels: ge,
            frames: 3,
            views: 2,
            h,
            w,
        }
    }

    #[test]
    fn stage_geometry() {
        let c = cfg(3, 4, vec![2, 2, 2], vec![16, 12, 8], 2);
        assert_eq!(c.stage_shapes(), vec![(6, 8, 16), (12, 16, 12), (24, 32, 8)]);
        assert_eq!(c.output_size(), (24, 32));
        let full_hd = cfg(9, 16, vec![5, 3, 2, 2, 2], default_channels(5, 1.0), 2);
        assert_eq!(full_hd.output_size(), (1080, 1920));
        assert_eq!(full_hd.stage_shapes()[0].0, 45);
        assert_eq!(full_hd.stage_shapes()[0].1, 80);
    }

    #[test]
    fn conv_count_formula_matches_enumeration() {
        for ge in [0, 2] {
            let c = cfg(3, 4, vec![2, 3, 2], vec![7, 5, 4], ge);
            let net = SynthesisNet::<f32>::zeros(c.clone()).unwrap();
            let enumerated: usize = net
                .named_tensors()
                .iter()
                .filter(|(n, _)| !n.starts_with("ge"))
                .map(|(_, t)| t.numel())
                .sum();
            assert_eq!(enumerated, c.conv_param_count());
            assert_eq!(net.param_count(), c.param_count());
        }
    }

    #[test]
    fn desk_output_shape_and_zero_net() {
        let c = cfg(3, 4, vec![2, 2, 2], vec![6, 5, 4], 2);
        let net = SynthesisNet::<f32>::zeros(c).unwrap();
        let mut tape = Tape::inference();
        let vars = net.bind(&mut tape, 0);
        let lat = tape.constant(vec![1, 3, 4, 5], vec![0.3; 60]).unwrap();
        let out = net.forward(&mut tape, &vars, lat, 1, 1).unwrap();
        assert_eq!(tape.shape(out), &[1, 3, 24, 32]);
        assert!(tape.value(out).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_deterministic_and_bounded() {
        let c = cfg(2, 3, vec![2, 2], vec![4, 3], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = SynthesisNet::<f32>::random(c, &mut rng).unwrap();
        let run = || {
            let mut tape = Tape::inference();
            let vars = net.bind(&mut tape, 0);
            let data: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin() * 5.0).collect();
            let lat = tape.constant(vec![1, 2, 3, 5], data).unwrap();
            let out = net.forward(&mut tape, &vars, lat, 2, 0).unwrap();
            tape.value(out).to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn without_ge_indices_do_not_matter() {
        let c = cfg(2, 3, vec![2, 2], vec![4, 3], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = SynthesisNet::<f32>::random(c, &mut rng).unwrap();
        let run = |t, v| {
            let mut tape = Tape::inference();
            let vars = net.bind(&mut tape, 0);
            let lat = tape.constant(vec![1, 2, 3, 5], vec![0.2; 30]).unwrap();
            let out = net.forward(&mut tape, &vars, lat, t, v).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(0, 0), run(2, 1));
    }

    #[test]
    fn wrong_latent_shape_rejected() {
        let net = SynthesisNet::<f32>::zeros(cfg(2, 3, vec![2], vec![4], 0)).unwrap();
        let mut tape = Tape::inference();
        let vars = net.bind(&mut tape, 0);
        let lat = tape.constant(vec![1, 2, 3, 4], vec![0.0; 24]).unwrap();
        assert!(net.forward(&mut tape, &vars, lat, 0, 0).is_err());
    }
}
