//! The spatio-temporal transformer denoiser.

use serde::{Deserialize, Serialize};
use wmlab_tensor::{Element, Tape, Tensor, Var};

use super::condition::ConditionSet;
use super::embed::{grid_embedding, patchify, sinusoid, SkipRopePlan};
use super::params::{Bound, Init, ParamStore};
use crate::diffusion::Denoiser;
use crate::error::{config_err, contract_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub t_max: usize,
    pub text_vocab: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep and scalar features.
    pub freq_dim: usize,
    pub rope_base: f64,
    /// Exclusive upper bound on rotary positions.
    pub max_original_index: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 128,
            heads: 4,
            patch: 2,
            channels: 3,
            t_max: 1000,
            text_vocab: 64,
            mlp_ratio: 4,
            freq_dim: 64,
            rope_base: 10000.0,
            max_original_index: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.depth == 0 {
            errs.push("depth must be >= 1".to_string());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            errs.push(format!("hidden {} must be divisible by heads {}", self.hidden, self.heads));
        } else if !(self.hidden / self.heads).is_multiple_of(2) {
            errs.push(format!("head width {} must be even", self.hidden / self.heads));
        }
        if !self.hidden.is_multiple_of(4) {
            errs.push(format!("hidden {} must be a multiple of 4", self.hidden));
        }
        for (name, v) in [
            ("patch", self.patch),
            ("channels", self.channels),
            ("t_max", self.t_max),
            ("text_vocab", self.text_vocab),
            ("mlp_ratio", self.mlp_ratio),
            ("max_original_index", self.max_original_index),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            errs.push(format!("freq_dim {} must be even and >= 2", self.freq_dim));
        }
        if !(self.rope_base > 1.0) {
            errs.push(format!("rope_base {} must exceed 1", self.rope_base));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(config_err!("{}", errs.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new(store: &mut impl FnMut(&str, &[usize], Init) -> Result<usize>, name: &str, din: usize, dout: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: store(&format!("{name}.w"), &[din, dout], init)?,
            b: store(&format!("{name}.b"), &[dout], Init::Zeros)?,
        })
    }

    fn apply<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.linear(&p.var(self.w), Some(&p.var(self.b)))?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    spatial_qkv: Linear,
    spatial_out: Linear,
    temporal_qkv: Linear,
    temporal_out: Linear,
    cross_gain: usize,
    cross_bias: usize,
    cross_q: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    cross_gate: usize,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    x_embed: Linear,
    t_in: Linear,
    t_out: Linear,
    fps_embed: Linear,
    height_embed: Linear,
    width_embed: Linear,
    text_table: usize,
    command_table: usize,
    null_token: usize,
    blocks: Vec<Block>,
    final_mod: Linear,
    final_out: Linear,
}

/// Raw model outputs over all frames, `(L, C, H, W)` each.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput<'t, T: Element> {
    pub eps_hat: Var<'t, T>,
    pub v_hat: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

const LN_EPS: f64 = 1e-6;

fn layout(config: &ModelConfig, store: &mut impl FnMut(&str, &[usize], Init) -> Result<usize>) -> Result<Layout> {
    let h = config.hidden;
    let f = config.freq_dim;
    let x_embed = Linear::new(store, "x_embed", config.patch_dim(), h, Init::Xavier)?;
    let t_in = Linear::new(store, "t_embed.fc1", f, h, Init::Normal(0.02))?;
    let t_out = Linear::new(store, "t_embed.fc2", h, h, Init::Normal(0.02))?;
    let fps_embed = Linear::new(store, "fps_embed", f, h, Init::Normal(0.02))?;
    let height_embed = Linear::new(store, "height_embed", f, h, Init::Normal(0.02))?;
    let width_embed = Linear::new(store, "width_embed", f, h, Init::Normal(0.02))?;
    let text_table = store("text_embed", &[config.text_vocab, h], Init::Normal(0.02))?;
    let command_table = store("command_embed", &[3, h], Init::Normal(0.02))?;
    let null_token = store("null_embed", &[1, h], Init::Normal(0.02))?;
    let mut blocks = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let n = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(Block {
            modulation: Linear::new(store, &n("modulation"), h, 9 * h, Init::Zeros)?,
            spatial_qkv: Linear::new(store, &n("spatial.qkv"), h, 3 * h, Init::Xavier)?,
            spatial_out: Linear::new(store, &n("spatial.out"), h, h, Init::Xavier)?,
            temporal_qkv: Linear::new(store, &n("temporal.qkv"), h, 3 * h, Init::Xavier)?,
            temporal_out: Linear::new(store, &n("temporal.out"), h, h, Init::Xavier)?,
            cross_gain: store(&n("cross.norm.gain"), &[h], Init::Ones)?,
            cross_bias: store(&n("cross.norm.bias"), &[h], Init::Zeros)?,
            cross_q: Linear::new(store, &n("cross.q"), h, h, Init::Xavier)?,
            cross_kv: Linear::new(store, &n("cross.kv"), h, 2 * h, Init::Xavier)?,
            cross_out: Linear::new(store, &n("cross.out"), h, h, Init::Xavier)?,
            cross_gate: store(&n("cross.gate"), &[h], Init::Zeros)?,
            mlp_in: Linear::new(store, &n("mlp.fc1"), h, config.mlp_ratio * h, Init::Xavier)?,
            mlp_out: Linear::new(store, &n("mlp.fc2"), config.mlp_ratio * h, h, Init::Xavier)?,
        });
    }
    let final_mod = Linear::new(store, "final.modulation", h, 2 * h, Init::Zeros)?;
    let final_out = Linear::new(store, "final.out", h, 2 * config.patch_dim(), Init::Zeros)?;
    Ok(Layout {
        x_embed,
        t_in,
        t_out,
        fps_embed,
        height_embed,
        width_embed,
        text_table,
        command_table,
        null_token,
        blocks,
        final_mod,
        final_out,
    })
}

/// `[B, N, heads*dh] -> [B, heads, N, dh]`
fn split_heads<'t, T: Element>(x: &Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    Ok(x.reshape([s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])?)
}

/// `[B, heads, N, dh] -> [B, N, heads*dh]`
fn merge_heads<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    Ok(x.permute(&[0, 2, 1, 3])?.reshape([s[0], s[2], s[1] * s[3]])?)
}

fn attend<'t, T: Element>(q: &Var<'t, T>, k: &Var<'t, T>, v: &Var<'t, T>) -> Result<Var<'t, T>> {
    let dh = q.shape()[3] as f64;
    let logits = q.matmul(&k.transpose_last()?)?.scale(1.0 / dh.sqrt())?;
    Ok(logits.softmax(3)?.matmul(v)?)
}

fn modulate<'t, T: Element>(x: &Var<'t, T>, shift: &Var<'t, T>, scale: &Var<'t, T>) -> Result<Var<'t, T>> {
    let n = x.layer_norm(None, None, 2, LN_EPS)?;
    Ok(n.mul(&scale.add_scalar(1.0)?)?.add(shift)?)
}

impl<T: Element> Model<T> {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = layout(&config, &mut |name, shape, init| params.init(seed, name, shape, init))?;
        Ok(Self { config, params, layout })
    }

    /// Model over existing parameters; names and shapes must match the
    /// layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut expected = Vec::new();
        let layout = layout(&config, &mut |name, shape, _| {
            expected.push((name.to_string(), shape.to_vec()));
            Ok(expected.len() - 1)
        })?;
        if expected.len() != params.len() {
            return Err(contract_err!("expected {} tensors, found {}", expected.len(), params.len()));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(contract_err!(
                    "parameter {have} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    shape
                ));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_inputs(&self, xt: &Tensor<T>, t: &[usize], cond: &ConditionSet, plan: &SkipRopePlan) -> Result<()> {
        let s = xt.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels {
            return Err(contract_err!("input {:?} is not (L, {}, H, W)", s, c.channels));
        }
        if !s[2].is_multiple_of(c.patch) || !s[3].is_multiple_of(c.patch) {
            return Err(config_err!("frame {}x{} is not divisible into {}-pixel patches", s[2], s[3], c.patch));
        }
        if t.len() != s[0] {
            return Err(contract_err!("{} timesteps for {} frames", t.len(), s[0]));
        }
        if let Some(&bad) = t.iter().find(|&&k| k > c.t_max) {
            return Err(contract_err!("timestep {bad} outside [0, {}]", c.t_max));
        }
        if plan.len() != s[0] {
            return Err(contract_err!("rope plan covers {} frames, clip has {}", plan.len(), s[0]));
        }
        if plan.indices().last().is_some_and(|&p| p >= c.max_original_index) {
            return Err(contract_err!("rope position exceeds limit {}", c.max_original_index));
        }
        cond.validate(c.text_vocab, s[0])
    }

    /// Per-frame conditioning vectors `(L, hidden)` from timesteps and the
    /// clip scalars.
    pub fn frame_conditioning<'t>(&self, p: &Bound<'t, T>, t: &[usize], cond: &ConditionSet) -> Result<Var<'t, T>> {
        let tape = p.var(0).tape();
        let l = &self.layout;
        let f = self.config.freq_dim;
        let steps: Vec<f64> = t.iter().map(|&k| k as f64).collect();
        let te = tape.constant(sinusoid(&steps, f)?);
        let te = l.t_out.apply(p, &l.t_in.apply(p, &te)?.silu()?)?;
        let scalar = |lin: &Linear, v: f64| -> Result<Var<'t, T>> { lin.apply(p, &tape.constant(sinusoid(&[v], f)?)) };
        let s = scalar(&l.fps_embed, cond.fps)?
            .add(&scalar(&l.height_embed, cond.height as f64)?)?
            .add(&scalar(&l.width_embed, cond.width as f64)?)?;
        Ok(te.add(&s)?)
    }

    /// Cross-attention context `(L, N, hidden)`: caption tokens plus the
    /// frame's command, or the single null token.
    fn context<'t>(&self, p: &Bound<'t, T>, cond: &ConditionSet, frames: usize) -> Result<Var<'t, T>> {
        let h = self.config.hidden;
        let l = &self.layout;
        if cond.null {
            return Ok(p.var(l.null_token).reshape([1, 1, h])?.broadcast_to(&[frames, 1, h])?);
        }
        let ids: Vec<usize> = cond.commands.iter().map(|c| c.id()).collect();
        let cmd = p.var(l.command_table).gather(&ids)?.reshape([frames, 1, h])?;
        if cond.text_tokens.is_empty() {
            return Ok(cmd);
        }
        let n = cond.text_tokens.len();
        let text = p
            .var(l.text_table)
            .gather(&cond.text_tokens)?
            .reshape([1, n, h])?
            .broadcast_to(&[frames, n, h])?;
        Ok(Var::concat(&[text, cmd], 1)?)
    }

    /// Pre-softmax temporal attention logits `(S, heads, L, L)` of block
    /// `block` for already-modulated tokens `x` of shape `(L, S, hidden)`.
    pub fn temporal_logits<'t>(&self, p: &Bound<'t, T>, block: usize, x: &Var<'t, T>, plan: &SkipRopePlan) -> Result<Var<'t, T>> {
        let (q, k, _) = self.temporal_qkv(p, block, x, plan)?;
        let dh = self.config.head_dim() as f64;
        Ok(q.matmul(&k.transpose_last()?)?.scale(1.0 / dh.sqrt())?)
    }

    #[allow(clippy::type_complexity)]
    fn temporal_qkv<'t>(
        &self,
        p: &Bound<'t, T>,
        block: usize,
        x: &Var<'t, T>,
        plan: &SkipRopePlan,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let b = self.layout.blocks.get(block).ok_or_else(|| contract_err!("no block {block}"))?;
        let (h, heads) = (self.config.hidden, self.config.heads);
        if plan.len() != x.shape()[0] {
            return Err(contract_err!("rope plan covers {} frames, input has {}", plan.len(), x.shape()[0]));
        }
        let (cos, sin) = plan.tables::<T>(self.config.head_dim())?;
        let xs = x.permute(&[1, 0, 2])?;
        let qkv = b.temporal_qkv.apply(p, &xs)?;
        let q = split_heads(&qkv.slice(2, 0, h)?, heads)?.rotary(&cos, &sin)?;
        let k = split_heads(&qkv.slice(2, h, h)?, heads)?.rotary(&cos, &sin)?;
        let v = split_heads(&qkv.slice(2, 2 * h, h)?, heads)?;
        Ok((q, k, v))
    }

    /// Ungated spatial self-attention of block `block` over the tokens of
    /// each frame of `y` (`(L, S, hidden)`).
    pub fn spatial_attention<'t>(&self, p: &Bound<'t, T>, block: usize, y: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.layout.blocks.get(block).ok_or_else(|| contract_err!("no block {block}"))?;
        let (h, heads) = (self.config.hidden, self.config.heads);
        let qkv = b.spatial_qkv.apply(p, y)?;
        let q = split_heads(&qkv.slice(2, 0, h)?, heads)?;
        let k = split_heads(&qkv.slice(2, h, h)?, heads)?;
        let v = split_heads(&qkv.slice(2, 2 * h, h)?, heads)?;
        b.spatial_out.apply(p, &merge_heads(&attend(&q, &k, &v)?)?)
    }

    fn block<'t>(
        &self,
        p: &Bound<'t, T>,
        i: usize,
        x: Var<'t, T>,
        c: &Var<'t, T>,
        ctx: &Var<'t, T>,
        plan: &SkipRopePlan,
    ) -> Result<Var<'t, T>> {
        let b = &self.layout.blocks[i];
        let (h, heads) = (self.config.hidden, self.config.heads);
        let frames = x.shape()[0];
        let m = b.modulation.apply(p, c)?.reshape([frames, 1, 9 * h])?;
        let chunk = |j: usize| m.slice(2, j * h, h);

        // spatial: tokens of one frame attend to each other
        let y = modulate(&x, &chunk(0)?, &chunk(1)?)?;
        let a = self.spatial_attention(p, i, &y)?;
        let x = x.add(&a.mul(&chunk(2)?)?)?;

        // temporal: each spatial position attends across frames
        let y = modulate(&x, &chunk(3)?, &chunk(4)?)?;
        let (q, k, v) = self.temporal_qkv(p, i, &y, plan)?;
        let a = b.temporal_out.apply(p, &merge_heads(&attend(&q, &k, &v)?)?)?;
        let x = x.add(&a.permute(&[1, 0, 2])?.mul(&chunk(5)?)?)?;

        // cross-attention to caption and command
        let y = x.layer_norm(Some(&p.var(b.cross_gain)), Some(&p.var(b.cross_bias)), 2, LN_EPS)?;
        let q = split_heads(&b.cross_q.apply(p, &y)?, heads)?;
        let kv = b.cross_kv.apply(p, ctx)?;
        let k = split_heads(&kv.slice(2, 0, h)?, heads)?;
        let v = split_heads(&kv.slice(2, h, h)?, heads)?;
        let a = b.cross_out.apply(p, &merge_heads(&attend(&q, &k, &v)?)?)?;
        let x = x.add(&a.mul(&p.var(b.cross_gate))?)?;

        let y = modulate(&x, &chunk(6)?, &chunk(7)?)?;
        let a = b.mlp_out.apply(p, &b.mlp_in.apply(p, &y)?.gelu()?)?;
        Ok(x.add(&a.mul(&chunk(8)?)?)?)
    }

    /// Embedded tokens `(L, S, hidden)` before the first block.
    pub fn embed_tokens<'t>(&self, p: &Bound<'t, T>, xt: &Tensor<T>) -> Result<Var<'t, T>> {
        let tape = p.var(0).tape();
        let s = xt.shape();
        let (gh, gw) = (s[2] / self.config.patch, s[3] / self.config.patch);
        let tokens = tape.constant(patchify(xt, self.config.patch)?);
        let pos = tape.constant(grid_embedding(gh, gw, self.config.hidden)?);
        Ok(self.layout.x_embed.apply(p, &tokens)?.add(&pos)?)
    }

    fn run_blocks<'t>(
        &self,
        p: &Bound<'t, T>,
        xt: &Tensor<T>,
        c: &Var<'t, T>,
        cond: &ConditionSet,
        plan: &SkipRopePlan,
    ) -> Result<Var<'t, T>> {
        let mut x = self.embed_tokens(p, xt)?;
        let ctx = self.context(p, cond, xt.shape()[0])?;
        for i in 0..self.config.depth {
            x = self.block(p, i, x, c, &ctx, plan)?;
        }
        Ok(x)
    }

    /// Tokens `(L, S, hidden)` after the last block, before the output head.
    pub fn trunk<'t>(
        &self,
        p: &Bound<'t, T>,
        xt: &Tensor<T>,
        t: &[usize],
        cond: &ConditionSet,
        plan: &SkipRopePlan,
    ) -> Result<Var<'t, T>> {
        self.check_inputs(xt, t, cond, plan)?;
        let c = self.frame_conditioning(p, t, cond)?.silu()?;
        self.run_blocks(p, xt, &c, cond, plan)
    }

    /// Predicts noise and variance coefficients for every frame of `xt`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        xt: &Tensor<T>,
        t: &[usize],
        cond: &ConditionSet,
        plan: &SkipRopePlan,
    ) -> Result<ModelOutput<'t, T>> {
        self.check_inputs(xt, t, cond, plan)?;
        let s = xt.shape().to_vec();
        let (frames, ch, hh, ww) = (s[0], s[1], s[2], s[3]);
        let (h, patch) = (self.config.hidden, self.config.patch);
        let (gh, gw) = (hh / patch, ww / patch);

        let c = self.frame_conditioning(p, t, cond)?.silu()?;
        let x = self.run_blocks(p, xt, &c, cond, plan)?;
        let l = &self.layout;
        let m = l.final_mod.apply(p, &c)?.reshape([frames, 1, 2 * h])?;
        let y = modulate(&x, &m.slice(2, 0, h)?, &m.slice(2, h, h)?)?;
        let out = l
            .final_out
            .apply(p, &y)?
            .reshape([frames, gh, gw, 2 * ch, patch, patch])?
            .permute(&[0, 3, 1, 4, 2, 5])?
            .reshape([frames, 2 * ch, hh, ww])?;
        Ok(ModelOutput {
            eps_hat: out.slice(1, 0, ch)?,
            v_hat: out.slice(1, ch, ch)?.sigmoid()?,
        })
    }
}

/// Adapts a model plus fixed conditioning to the sampler interface.
pub struct ModelDenoiser<'m, T: Element> {
    pub model: &'m Model<T>,
    pub cond: ConditionSet,
    pub plan: SkipRopePlan,
}

impl<T: Element> Denoiser<T> for ModelDenoiser<'_, T> {
    fn predict(&self, xt: &Tensor<T>, t: &[usize], drop_condition: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let p = self.model.params().bind(&tape, false);
        let cond = if drop_condition { self.cond.dropped() } else { self.cond.clone() };
        let out = self.model.forward(&p, xt, t, &cond, &self.plan)?;
        Ok((out.eps_hat.to_tensor(), out.v_hat.to_tensor()))
    }
}
