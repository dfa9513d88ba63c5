//! The recurrent super-resolution network.
//!
//! One timestep consumes a window of three low-resolution frames plus the
//! recurrent state, and emits a `scale×` frame:
//!
//! 1. local features are extracted jointly from the window and re-weighted by
//!    spatial then channel attention;
//! 2. the target frame is fused with the hidden state and the space-to-depth
//!    transform of the previous output;
//! 3. both feature sets are refined by a stack of dual-duct residual blocks
//!    that exchange information at every block;
//! 4. the two refined ducts are turned into residues by pixel shuffle, merged,
//!    and added to the bilinear upsampling of the target frame.

use crate::erp::{bilinear_upsample_tensor, ErpFrame};
use crate::error::{Result, S3poError};
use crate::model::graph::{Gradients, Graph, Var};
use crate::model::params::{layout, DualDuct, Layers, ModelConfig, ParameterSet, Residual};
use crate::tensor::{FeatureMap, Tensor};

/// Hidden feature plane and the previous output frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub hidden: FeatureMap,
    pub prev_hr: Tensor,
}

impl RecurrentState {
    /// State before the first timestep: zero hidden features and the bilinear
    /// upsampling of the first frame as the "previous" output.
    pub fn initial(first: &ErpFrame, cfg: &ModelConfig) -> Result<Self> {
        Ok(RecurrentState {
            hidden: Tensor::zeros(first.height(), first.width(), cfg.base_channels),
            prev_hr: bilinear_upsample_tensor(first.pixels(), cfg.scale)?,
        })
    }
}

/// State carried on a graph during unrolled evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub hidden: Var,
    pub prev_hr: Var,
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParameterSet,
}

/// Outputs of the refinement stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub hidden: FeatureMap,
    pub local: FeatureMap,
    pub global: FeatureMap,
}

impl Model {
    /// Randomly initialized model, seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParameterSet::init(&config);
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParameterSet::zeros(&config);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches that do not change the parameter layout (ablations, cyclic
    /// treatment, padding) may be changed freely.
    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParameterSet) {
        (self.config, self.params)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    fn net(&self) -> Net<'_> {
        let (layers, _) = layout(&self.config);
        Net {
            cfg: &self.config,
            layers,
        }
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params, self.config.conv_padding)
    }

    fn check_window(&self, window: &[ErpFrame; 3]) -> Result<()> {
        let (h, w) = (window[1].height(), window[1].width());
        if window.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(S3poError::invalid("window frames differ in size"));
        }
        Ok(())
    }

    /// Jointly extracted local features of a three-frame window, `H×W×C`.
    pub fn extract_local_features(&self, window: &[ErpFrame; 3]) -> Result<FeatureMap> {
        self.check_window(window)?;
        let mut g = self.graph();
        let vars = window.clone().map(|f| g.input(f.into_pixels()));
        let out = self.net().extract(&mut g, vars)?;
        Ok(g.value(out).clone())
    }

    /// Spatial then channel attention. Identity when attention is disabled.
    pub fn apply_attention(&self, feat: &FeatureMap) -> Result<FeatureMap> {
        if feat.channels() != self.config.base_channels {
            return Err(S3poError::shape(format!(
                "attention expects {} channels, got {}",
                self.config.base_channels,
                feat.channels()
            )));
        }
        let mut g = self.graph();
        let x = g.input(feat.clone());
        let out = self.net().attention(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// Spatial attention map alone, `H×W×1` in `(0, 1)`.
    pub fn spatial_attention_map(&self, feat: &FeatureMap) -> Result<Tensor> {
        let mut g = self.graph();
        let x = g.input(feat.clone());
        let out = self.net().spatial_map(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// Fusion of the target frame with the recurrent state.
    pub fn fuse_global(&self, frame: &ErpFrame, state: &RecurrentState) -> Result<FeatureMap> {
        self.check_state(frame, state)?;
        let mut g = self.graph();
        let f = g.input(frame.pixels().clone());
        let s = StateVars {
            hidden: g.input(state.hidden.clone()),
            prev_hr: g.input(state.prev_hr.clone()),
        };
        let out = self.net().fuse(&mut g, f, s)?;
        Ok(g.value(out).clone())
    }

    /// Block `index` of the refinement stack.
    pub fn dual_duct_block(
        &self,
        index: usize,
        local: &FeatureMap,
        global: &FeatureMap,
    ) -> Result<(FeatureMap, FeatureMap)> {
        let net = self.net();
        let block = *net
            .layers
            .blocks
            .get(index)
            .ok_or_else(|| S3poError::invalid(format!("no refinement block {index}")))?;
        let mut g = self.graph();
        let (l, gl) = (g.input(local.clone()), g.input(global.clone()));
        let (a, b) = net.dual_duct(&mut g, &block, l, gl)?;
        Ok((g.value(a).clone(), g.value(b).clone()))
    }

    pub fn refine_stack(&self, local: &FeatureMap, global: &FeatureMap) -> Result<Refined> {
        let mut g = self.graph();
        let (l, gl) = (g.input(local.clone()), g.input(global.clone()));
        let (h, lf, gf) = self.net().refine(&mut g, l, gl)?;
        Ok(Refined {
            hidden: g.value(h).clone(),
            local: g.value(lf).clone(),
            global: g.value(gf).clone(),
        })
    }

    /// Upsampled output from the two refined ducts and the target frame.
    pub fn reconstruct_hr(
        &self,
        local: &FeatureMap,
        global: &FeatureMap,
        frame: &ErpFrame,
    ) -> Result<ErpFrame> {
        let mut g = self.graph();
        let (l, gl) = (g.input(local.clone()), g.input(global.clone()));
        let base = g.input(bilinear_upsample_tensor(frame.pixels(), self.config.scale)?);
        let out = self.net().reconstruct(&mut g, l, gl, base)?;
        ErpFrame::new(g.value(out).clone())
    }

    fn check_state(&self, frame: &ErpFrame, state: &RecurrentState) -> Result<()> {
        let c = &self.config;
        let (h, w) = (frame.height(), frame.width());
        if state.hidden.shape() != (h, w, c.base_channels) {
            return Err(S3poError::shape(format!(
                "hidden state {:?} does not fit a {h}x{w} frame with {} channels",
                state.hidden.shape(),
                c.base_channels
            )));
        }
        if state.prev_hr.shape() != (h * c.scale, w * c.scale, 3) {
            return Err(S3poError::shape(format!(
                "previous output {:?} does not fit a {h}x{w} frame at scale {}",
                state.prev_hr.shape(),
                c.scale
            )));
        }
        Ok(())
    }

    /// One recurrent timestep. Returns the unclamped output frame and the
    /// state for the next step.
    pub fn step(
        &self,
        window: &[ErpFrame; 3],
        state: &RecurrentState,
    ) -> Result<(ErpFrame, RecurrentState)> {
        self.check_window(window)?;
        self.check_state(&window[1], state)?;
        let mut g = self.graph();
        let s = StateVars {
            hidden: g.input(state.hidden.clone()),
            prev_hr: g.input(state.prev_hr.clone()),
        };
        let (hr, next) = self.net().step(&mut g, window, s)?;
        let hr_t = g.value(hr).clone();
        let new_state = RecurrentState {
            hidden: g.value(next.hidden).clone(),
            prev_hr: hr_t.clone(),
        };
        Ok((ErpFrame::new(hr_t)?, new_state))
    }

    /// Super-resolves a whole clip, one timestep per frame. The window at the
    /// clip boundaries repeats the first or last frame. Outputs are unclamped.
    pub fn forward_clip(&self, frames: &[ErpFrame]) -> Result<Vec<ErpFrame>> {
        let first = frames
            .first()
            .ok_or_else(|| S3poError::invalid("cannot run on an empty clip"))?;
        let mut state = RecurrentState::initial(first, &self.config)?;
        let mut out = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let (hr, next) = self.step(&window_at(frames, t), &state)?;
            out.push(hr);
            state = next;
        }
        Ok(out)
    }

    /// Unrolls the clip on `g` and returns the output node of every timestep.
    /// The recurrent state is detached every `truncation` steps when given.
    pub fn unroll<'a>(
        &self,
        g: &mut Graph<'a>,
        frames: &[ErpFrame],
        truncation: Option<usize>,
    ) -> Result<Vec<Var>> {
        let first = frames
            .first()
            .ok_or_else(|| S3poError::invalid("cannot run on an empty clip"))?;
        let init = RecurrentState::initial(first, &self.config)?;
        let mut state = StateVars {
            hidden: g.input(init.hidden),
            prev_hr: g.input(init.prev_hr),
        };
        let net = self.net();
        let mut outputs = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            if let Some(k) = truncation {
                if t > 0 && k > 0 && t % k == 0 {
                    state = StateVars {
                        hidden: g.input(g.value(state.hidden).clone()),
                        prev_hr: g.input(g.value(state.prev_hr).clone()),
                    };
                }
            }
            let (hr, next) = net.step(g, &window_at(frames, t), state)?;
            outputs.push(hr);
            state = next;
        }
        Ok(outputs)
    }

    /// Parameter gradients of `loss(step(window, state))` where `seed` is
    /// `∂loss/∂HR_t`. Used by gradient checks.
    pub fn step_gradients(
        &self,
        window: &[ErpFrame; 3],
        state: &RecurrentState,
        seed: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Gradients)> {
        let mut g = self.graph();
        let s = StateVars {
            hidden: g.input(state.hidden.clone()),
            prev_hr: g.input(state.prev_hr.clone()),
        };
        let (hr, _) = self.net().step(&mut g, window, s)?;
        let out = g.value(hr).clone();
        let upstream = seed(&out)?;
        let grads = g.backward(&[(hr, upstream)])?;
        Ok((out, grads))
    }
}

/// `[F_{t-1}, F_t, F_{t+1}]` with edge replication at the clip boundaries.
pub fn window_at(frames: &[ErpFrame], t: usize) -> [ErpFrame; 3] {
    let last = frames.len() - 1;
    [
        frames[t.saturating_sub(1)].clone(),
        frames[t].clone(),
        frames[(t + 1).min(last)].clone(),
    ]
}

/// Graph builders for each stage.
struct Net<'c> {
    cfg: &'c ModelConfig,
    layers: Layers,
}

impl Net<'_> {
    fn extract(&self, g: &mut Graph<'_>, frames: [Var; 3]) -> Result<Var> {
        let l = &self.layers;
        let mut joint = None;
        for (conv, &f) in l.joint.iter().zip(&frames) {
            let c = g.conv(f, *conv)?;
            let r = g.relu(c);
            joint = Some(match joint {
                None => r,
                Some(acc) => g.add(acc, r)?,
            });
        }
        let joint = joint.expect("three frames");
        let correlated = |g: &mut Graph<'_>, f: Var| -> Result<Var> {
            let c = g.conv(f, l.correlate)?;
            g.add(joint, c)
        };
        let prev = correlated(g, frames[0])?;
        let curr = correlated(g, frames[1])?;
        let next = correlated(g, frames[2])?;
        let lf1 = g.concat(&[prev, curr])?;
        let lf2 = g.concat(&[next, curr])?;
        let a = g.conv(lf1, l.local[0])?;
        let a = g.relu(a);
        let b = g.conv(lf2, l.local[1])?;
        let b = g.relu(b);
        g.add(a, b)
    }

    fn spatial_map(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mx = g.channel_max(x);
        let avg = g.channel_mean(x);
        let pooled = g.concat(&[mx, avg])?;
        let logits = g.conv(pooled, self.layers.spatial_attention)?;
        Ok(g.sigmoid(logits))
    }

    fn attention(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if !self.cfg.attention_enabled {
            return Ok(x);
        }
        let l = &self.layers;
        let map = self.spatial_map(g, x)?;
        let spatial = g.mul_spatial(x, map)?;

        let descriptor = |g: &mut Graph<'_>, d: Var| -> Result<Var> {
            let a = g.conv(d, l.channel_reduce)?;
            let a = g.relu(a);
            g.conv(a, l.channel_expand)
        };
        let mx = g.global_max(spatial);
        let avg = g.global_mean(spatial);
        let a = descriptor(g, mx)?;
        let b = descriptor(g, avg)?;
        let mut gate = g.add(a, b)?;
        if self.cfg.channel_attention_sigmoid {
            gate = g.sigmoid(gate);
        }
        g.mul_channel(spatial, gate)
    }

    fn local_branch(&self, g: &mut Graph<'_>, window: &[ErpFrame; 3], swap: bool) -> Result<Var> {
        let mut vars = [None; 3];
        for (slot, f) in vars.iter_mut().zip(window) {
            let v = g.input(f.pixels().clone());
            *slot = Some(if swap { g.cyclic_swap(v)? } else { v });
        }
        let feat = self.extract(g, vars.map(|v| v.expect("filled")))?;
        let out = self.attention(g, feat)?;
        if swap {
            g.cyclic_swap(out)
        } else {
            Ok(out)
        }
    }

    fn fuse(&self, g: &mut Graph<'_>, frame: Var, state: StateVars) -> Result<Var> {
        let hidden = if self.cfg.hidden_state_enabled {
            state.hidden
        } else {
            let shape = g.value(state.hidden).shape();
            g.input(Tensor::zeros(shape.0, shape.1, shape.2))
        };
        let hr = g.pixel_unshuffle(state.prev_hr, self.cfg.scale)?;
        let cat = g.concat(&[frame, hidden, hr])?;
        let c = g.conv(cat, self.layers.fuse)?;
        Ok(g.relu(c))
    }

    fn residual(&self, g: &mut Graph<'_>, r: &Residual, x: Var) -> Result<Var> {
        let a = g.conv(x, r.conv1)?;
        let a = g.relu(a);
        g.conv(a, r.conv2)
    }

    fn dual_duct(
        &self,
        g: &mut Graph<'_>,
        block: &DualDuct,
        local: Var,
        global: Var,
    ) -> Result<(Var, Var)> {
        let ra = self.residual(g, &block.local_self, local)?;
        let mut out_local = g.add(local, ra)?;
        let rc = self.residual(g, &block.global_self, global)?;
        let mut out_global = g.add(global, rc)?;
        if self.cfg.mutual_exchange_enabled {
            let rb = self.residual(g, &block.local_cross, global)?;
            out_local = g.add(out_local, rb)?;
            let rd = self.residual(g, &block.global_cross, local)?;
            out_global = g.add(out_global, rd)?;
        }
        Ok((out_local, out_global))
    }

    fn refine(&self, g: &mut Graph<'_>, local: Var, global: Var) -> Result<(Var, Var, Var)> {
        let l = &self.layers;
        let (mut ff_local, mut ff_global) = (local, global);
        for block in &l.blocks {
            (ff_local, ff_global) = self.dual_duct(g, block, ff_local, ff_global)?;
        }
        let hl = g.conv(ff_local, l.hidden_local)?;
        let hl = g.relu(hl);
        let hg = g.conv(ff_global, l.hidden_global)?;
        let hg = g.relu(hg);
        let hidden = g.add(hl, hg)?;
        let lf = g.conv(ff_local, l.head_local)?;
        let gf = g.conv(ff_global, l.head_global)?;
        Ok((hidden, lf, gf))
    }

    fn reconstruct(&self, g: &mut Graph<'_>, lf: Var, gf: Var, base: Var) -> Result<Var> {
        let l = &self.layers;
        let r = self.cfg.scale;
        let a = g.conv(lf, l.duct_local)?;
        let a = g.pixel_shuffle(a, r)?;
        let b = g.conv(gf, l.duct_global)?;
        let b = g.pixel_shuffle(b, r)?;
        let cat = g.concat(&[a, b])?;
        let m = g.conv(cat, l.merge[0])?;
        let residue = g.conv(m, l.merge[1])?;
        g.add(residue, base)
    }

    fn step(
        &self,
        g: &mut Graph<'_>,
        window: &[ErpFrame; 3],
        state: StateVars,
    ) -> Result<(Var, StateVars)> {
        let mut g_local = self.local_branch(g, window, false)?;
        if self.cfg.cyclic_enabled {
            let swapped = self.local_branch(g, window, true)?;
            g_local = g.add(g_local, swapped)?;
        }
        let target = g.input(window[1].pixels().clone());
        let g_global = self.fuse(g, target, state)?;
        let (hidden, lf, gf) = self.refine(g, g_local, g_global)?;
        let base = g.input(bilinear_upsample_tensor(window[1].pixels(), self.cfg.scale)?);
        let hr = self.reconstruct(g, lf, gf, base)?;
        Ok((
            hr,
            StateVars {
                hidden,
                prev_hr: hr,
            },
        ))
    }
}
