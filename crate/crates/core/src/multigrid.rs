//! Time-indexed, view-indexed and integrated time-view latent grids.
//!
//! For a frame `t` of view `v` the input latent is
//! `concat(concat(G1[t], G2[t/2]) + Gview[v], Gtv[t, v])`, channels-last.

use rand::Rng;

use crate::synthesis::NetConfig;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridConfig {
    pub frames: usize,
    pub views: usize,
    pub h: usize,
    pub w: usize,
    /// channels of the time/view latents
    pub c1: usize,
    /// channels of the integrated time-view latent
    pub c2: usize,
}

impl GridConfig {
    /// Default 9:1 split of `c` total latent channels.
    pub fn with_channels(
        frames: usize,
        views: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Self, TensorError> {
        if c < 2 {
            return Err(TensorError::invalid("GridConfig", "a 9:1 split needs c >= 2"));
        }
        let c2 = ((c as f64 / 10.0).round() as usize).max(1);
        let c1 = c.saturating_sub(c2);
        Self::custom(frames, views, h, w, c1, c2)
    }

    /// Explicit split. One of `c1`, `c2` may be zero to ablate that family.
    pub fn custom(
        frames: usize,
        views: usize,
        h: usize,
        w: usize,
        c1: usize,
        c2: usize,
    ) -> Result<Self, TensorError> {
        if frames == 0 || views == 0 || h == 0 || w == 0 || c1 + c2 == 0 {
            return Err(TensorError::invalid(
                "GridConfig",
                format!("T={frames} N={views} h={h} w={w} c={} must all be >= 1", c1 + c2),
            ));
        }
        Ok(GridConfig {
            frames,
            views,
            h,
            w,
            c1,
            c2,
        })
    }

    pub fn channels(&self) -> usize {
        self.c1 + self.c2
    }

    /// channels of the full-rate temporal grid
    pub fn ct1(&self) -> usize {
        self.c1.div_ceil(2)
    }

    /// channels of the half-rate temporal grid
    pub fn ct2(&self) -> usize {
        self.c1 / 2
    }

    pub fn half_frames(&self) -> usize {
        self.frames.div_ceil(2)
    }

    pub fn time_params(&self) -> usize {
        (self.frames * self.ct1() + self.half_frames() * self.ct2()) * self.h * self.w
    }

    pub fn view_params(&self) -> usize {
        self.views * self.h * self.w * self.c1
    }

    pub fn tv_params(&self) -> usize {
        self.frames * self.views * self.h * self.w * self.c2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiGrid<S> {
    pub config: GridConfig,
    pub time1: Tensor<S>,
    pub time2: Tensor<S>,
    pub view: Tensor<S>,
    pub tv: Tensor<S>,
}

/// Initialization bound for every grid entry.
pub const GRID_INIT: f64 = 1e-2;

impl<S: Real> MultiGrid<S> {
    pub fn zeros(config: GridConfig) -> Self {
        let (h, w) = (config.h, config.w);
        MultiGrid {
            time1: Tensor::zeros(vec![config.frames, h, w, config.ct1()]).into_param(),
            time2: Tensor::zeros(vec![config.half_frames(), h, w, config.ct2()]).into_param(),
            view: Tensor::zeros(vec![config.views, h, w, config.c1]).into_param(),
            tv: Tensor::zeros(vec![config.frames, config.views, h, w, config.c2]).into_param(),
            config,
        }
    }

    /// Uniform in `[-GRID_INIT, GRID_INIT]`.
    pub fn random(config: GridConfig, rng: &mut impl Rng) -> Self {
        let mut g = Self::zeros(config);
        for t in g.tensors_mut() {
            for v in t.data_mut() {
                *v = S::lit(rng.random_range(-GRID_INIT..=GRID_INIT));
            }
        }
        g
    }

    pub const NAMES: [&'static str; 4] = ["grid.time1", "grid.time2", "grid.view", "grid.tv"];

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.time1, &self.time2, &self.view, &self.tv]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 4] {
        [&mut self.time1, &mut self.time2, &mut self.view, &mut self.tv]
    }

    fn check_t(&self, t: usize) -> Result<(), TensorError> {
        if t >= self.config.frames {
            return Err(TensorError::invalid(
                "multigrid",
                format!("frame index {t} out of range (T={})", self.config.frames),
            ));
        }
        Ok(())
    }

    fn check_v(&self, v: usize) -> Result<(), TensorError> {
        if v >= self.config.views {
            return Err(TensorError::invalid(
                "multigrid",
                format!("view index {v} out of range (N={})", self.config.views),
            ));
        }
        Ok(())
    }

    /// Records the four grids on `tape` using parameter keys `base..base+4`.
    pub fn bind(&self, tape: &mut Tape<S>, base: usize) -> GridVars {
        GridVars {
            time1: tape.param(base, &self.time1),
            time2: tape.param(base + 1, &self.time2),
            view: tape.param(base + 2, &self.view),
            tv: tape.param(base + 3, &self.tv),
        }
    }

    /// `[1, h, w, c1]`: full-rate row `t` next to half-rate row `t/2`.
    pub fn lookup_time(
        &self,
        tape: &mut Tape<S>,
        vars: &GridVars,
        t: usize,
    ) -> Result<Var, TensorError> {
        self.check_t(t)?;
        let a = tape.select(vars.time1, &[t])?;
        let b = tape.select(vars.time2, &[t / 2])?;
        tape.concat(&[a, b], 3)
    }

    /// `[1, h, w, c1]`
    pub fn lookup_view(
        &self,
        tape: &mut Tape<S>,
        vars: &GridVars,
        v: usize,
    ) -> Result<Var, TensorError> {
        self.check_v(v)?;
        tape.select(vars.view, &[v])
    }

    /// `[1, h, w, c2]`
    pub fn lookup_tv(
        &self,
        tape: &mut Tape<S>,
        vars: &GridVars,
        t: usize,
        v: usize,
    ) -> Result<Var, TensorError> {
        self.check_t(t)?;
        self.check_v(v)?;
        tape.select(vars.tv, &[t, v])
    }

    /// `[1, h, w, c1 + c2]` input latent for frame `t` of view `v`.
    pub fn assemble(
        &self,
        tape: &mut Tape<S>,
        vars: &GridVars,
        t: usize,
        v: usize,
    ) -> Result<Var, TensorError> {
        self.check_t(t)?;
        self.check_v(v)?;
        let mut parts = Vec::with_capacity(2);
        if self.config.c1 > 0 {
            let time = self.lookup_time(tape, vars, t)?;
            let view = self.lookup_view(tape, vars, v)?;
            parts.push(tape.add(time, view)?);
        }
        if self.config.c2 > 0 {
            parts.push(self.lookup_tv(tape, vars, t, v)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, 3)
    }

    /// Assembled latent as a standalone tensor.
    pub fn latent(&self, t: usize, v: usize) -> Result<Tensor<S>, TensorError> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, 0);
        let out = self.assemble(&mut tape, &vars, t, v)?;
        Ok(tape.to_tensor(out))
    }
}

/// Tape handles for the grid tensors, in [`MultiGrid::NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct GridVars {
    pub time1: Var,
    pub time2: Var,
    pub view: Var,
    pub tv: Var,
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub g_time: usize,
    pub g_view: usize,
    pub g_tv: usize,
    /// conv stack, head and grid embeddings
    pub synthesis: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.g_time + self.g_view + self.g_tv + self.synthesis
    }

    /// `[g_time, g_view, g_tv, synthesis]` as percent of the total.
    pub fn percentages(&self) -> [f64; 4] {
        let t = self.total() as f64;
        [self.g_time, self.g_view, self.g_tv, self.synthesis].map(|c| 100.0 * c as f64 / t)
    }
}

pub fn param_breakdown(grid: &GridConfig, net: &NetConfig) -> ParamBreakdown {
    ParamBreakdown {
        g_time: grid.time_params(),
        g_view: grid.view_params(),
        g_tv: grid.tv_params(),
        synthesis: net.param_count(),
    }
}
