//! The full representation: latent grids plus synthesis net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Frame, VideoSequence};
use crate::multigrid::{GridConfig, GridVars, MultiGrid};
use crate::synthesis::{NetConfig, NetVars, SynthesisNet};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub grid: MultiGrid<S>,
    pub net: SynthesisNet<S>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub grid: GridVars,
    pub net: NetVars,
}

impl<S: Real> Model<S> {
    /// Seeded initialization: grids first, then the net, from one ChaCha8 stream.
    pub fn random(grid: GridConfig, net: NetConfig, seed: u64) -> Result<Self, TensorError> {
        check_configs(&grid, &net)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = MultiGrid::random(grid, &mut rng);
        let net = SynthesisNet::random(net, &mut rng)?;
        Ok(Model { grid, net })
    }

    pub fn zeros(grid: GridConfig, net: NetConfig) -> Result<Self, TensorError> {
        check_configs(&grid, &net)?;
        Ok(Model {
            grid: MultiGrid::zeros(grid),
            net: SynthesisNet::zeros(net)?,
        })
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.net.config.output_size()
    }

    /// Every tensor in serialization order: the four grids, then the net.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = MultiGrid::<S>::NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(self.grid.tensors())
            .collect();
        out.extend(self.net.named_tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = self.grid.tensors_mut().into_iter().collect();
        out.extend(self.net.tensors_mut());
        out
    }

    pub fn tensor_count(&self) -> usize {
        4 + self.net.named_tensors().len()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds all tensors with keys equal to their [`Self::named_tensors`] index.
    pub fn bind(&self, tape: &mut Tape<S>) -> ModelVars {
        ModelVars {
            grid: self.grid.bind(tape, 0),
            net: self.net.bind(tape, 4),
        }
    }

    /// `[1, 3, H, W]` reconstruction of frame `t` of view `v`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        t: usize,
        v: usize,
    ) -> Result<Var, TensorError> {
        let latent = self.grid.assemble(tape, &vars.grid, t, v)?;
        self.net.forward(tape, &vars.net, latent, t, v)
    }

    pub fn render(&self, t: usize, v: usize) -> Result<Frame, TensorError> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, t, v)?;
        let (h, w) = self.output_size();
        Ok(Frame::from_planar(h, w, tape.value(out)))
    }

    pub fn render_all(&self) -> Result<VideoSequence, TensorError> {
        let cfg = &self.grid.config;
        let mut frames = Vec::with_capacity(cfg.views * cfg.frames);
        for v in 0..cfg.views {
            for t in 0..cfg.frames {
                frames.push(self.render(t, v)?);
            }
        }
        VideoSequence::new(cfg.views, cfg.frames, frames)
            .map_err(|e| TensorError::invalid("render_all", e.to_string()))
    }

    pub fn cast<T: Real>(&self) -> Model<T> {
        let mut out = Model::<T>::zeros(self.grid.config.clone(), self.net.config.clone())
            .expect("configs already validated");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }
}

fn check_configs(grid: &GridConfig, net: &NetConfig) -> Result<(), TensorError> {
    net.validate()?;
    let same = net.in_channels == grid.channels()
        && net.frames == grid.frames
        && net.views == grid.views
        && net.h == grid.h
        && net.w == grid.w;
    if !same {
        return Err(TensorError::invalid(
            "Model",
            format!("grid {grid:?} does not match net input geometry"),
        ));
    }
    Ok(())
}
