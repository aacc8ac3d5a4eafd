//! DiT backbone: adaLN-modulated self-attention and MLP branches with audio
//! and identity cross-attention, audio scoped to the whole clip or to each
//! latent frame.

use crate::alignment::{block_mask, segment_audio, AudioVideoMap};
use crate::config::{DiTConfig, Stage};
use crate::encoders::{identity_encoder_graph, im2col_stride2, init_encoder_params, AudioTokenSequence};
use crate::error::{Error, Result};
use crate::motion::{init_motion_params, motion_embed_graph, MotionCoefficients, MOTION_EXPANSION};
use crate::numerics::{xavier, Graph, Params, Real, RngState, Tensor, Var};

/// How audio keys and values are scoped for each video query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioScope {
    /// Every video token sees the whole audio sequence.
    Clip,
    /// Tokens of latent frame `i` attend only to audio segment `i`, computed per frame.
    Frame,
    /// The same restriction expressed as a block-diagonal mask over clip attention.
    MaskedClip,
}

impl From<Stage> for AudioScope {
    fn from(s: Stage) -> Self {
        match s {
            Stage::ClipLevel => AudioScope::Clip,
            Stage::FrameLevel => AudioScope::Frame,
        }
    }
}

/// Conditions for one clip. `None` entries use the learned null embeddings
/// (or zero tokens for the reference).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub audio: Option<AudioTokenSequence>,
    /// `[S, S, 3]` face crop of the reference frame.
    pub identity: Option<Tensor<f32>>,
    pub motion: MotionCoefficients,
    /// Reference frame latents `[h·w × C]`, broadcast over every latent frame.
    pub reference: Option<Tensor<f32>>,
    pub scope: AudioScope,
}

/// The six per-block modulation vectors, each `[1 × c]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift1: Var,
    pub scale1: Var,
    pub gate1: Var,
    pub shift2: Var,
    pub scale2: Var,
    pub gate2: Var,
}

/// Values of [`Modulation`] lifted out of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams<R: Real = f32> {
    pub shift1: Tensor<R>,
    pub scale1: Tensor<R>,
    pub gate1: Tensor<R>,
    pub shift2: Tensor<R>,
    pub scale2: Tensor<R>,
    pub gate2: Tensor<R>,
}

/// Fresh parameters. Modulation heads, the motion expansion and the output
/// projection start at zero.
pub fn init_params(cfg: &DiTConfig, rng: &mut RngState) -> Result<Params<f32>> {
    cfg.validate()?;
    let (c, ch, ca) = (cfg.width_model, cfg.latent_channels(), cfg.audio_width);
    let hidden = cfg.mlp_ratio * c;
    let mut p = Params::new();
    let lin = |p: &mut Params<f32>, rng: &mut RngState, name: String, din: usize, dout: usize, zero: bool| {
        let w = if zero { Tensor::zeros(vec![din, dout]) } else { xavier(rng, din, dout) };
        p.insert(format!("{name}.w"), w);
        p.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
    };
    lin(&mut p, rng, "in".into(), 2 * ch, c, false);
    p.insert("pos", rng.normal_tensor::<f32>(vec![cfg.tokens(), c]).map(|x| 0.02 * x));
    lin(&mut p, rng, "time.fc1".into(), c, c, false);
    lin(&mut p, rng, "time.fc2".into(), c, c, false);
    for i in 0..cfg.depth {
        let b = |s: &str| format!("blocks.{i}.{s}");
        lin(&mut p, rng, b("mod"), c, 6 * c, true);
        lin(&mut p, rng, b("attn.qkv"), c, 3 * c, false);
        lin(&mut p, rng, b("attn.out"), c, c, false);
        p.insert(b("cross.norm.g"), Tensor::ones(vec![c]));
        p.insert(b("cross.norm.b"), Tensor::zeros(vec![c]));
        lin(&mut p, rng, b("cross.q"), c, c, false);
        lin(&mut p, rng, b("cross.audio.k"), ca, c, false);
        lin(&mut p, rng, b("cross.audio.v"), ca, c, false);
        lin(&mut p, rng, b("cross.audio.out"), c, c, false);
        lin(&mut p, rng, b("cross.id.k"), c, c, false);
        lin(&mut p, rng, b("cross.id.v"), c, c, false);
        lin(&mut p, rng, b("cross.id.out"), c, c, false);
        lin(&mut p, rng, b("mlp.fc1"), c, hidden, false);
        lin(&mut p, rng, b("mlp.fc2"), hidden, c, false);
    }
    lin(&mut p, rng, "final.mod".into(), c, 2 * c, true);
    lin(&mut p, rng, "final.out".into(), c, ch, true);
    p.insert("null.audio", rng.normal_tensor(vec![1, ca]));
    p.insert("null.id", rng.normal_tensor(vec![cfg.n_id, c]));
    init_motion_params(c, rng, &mut p);
    init_encoder_params(cfg, rng, &mut p);
    Ok(p)
}

/// Closed-form scalar parameter count of [`init_params`].
pub fn parameter_count(cfg: &DiTConfig) -> usize {
    let (c, ch, ca, n) = (cfg.width_model, cfg.latent_channels(), cfg.audio_width, cfg.tokens());
    let hidden = cfg.mlp_ratio * c;
    let lin = |i: usize, o: usize| i * o + o;
    let per_block = lin(c, 6 * c)
        + lin(c, 3 * c)
        + lin(c, c)
        + 2 * c
        + lin(c, c)
        + 2 * lin(ca, c)
        + lin(c, c)
        + 3 * lin(c, c)
        + lin(c, hidden)
        + lin(hidden, c);
    let stem = lin(2 * ch, c) + n * c + 2 * lin(c, c);
    let head = lin(c, 2 * c) + lin(c, ch);
    let nulls = ca + cfg.n_id * c;
    let motion = lin(2, c) + 3 * lin(c, c) + lin(c, MOTION_EXPANSION * c);
    let encoders = lin(3, ca) + lin(27, cfg.id_channels) + lin(cfg.id_channels, c) + cfg.n_id * c + 4 * lin(c, c);
    stem + cfg.depth * per_block + head + nulls + motion + encoders
}

/// Sinusoidal features of `1000·t`, width `dim` (cosines then sines).
pub fn sinusoidal_features<R: Real>(t: f64, dim: usize) -> Tensor<R> {
    let half = dim / 2;
    let x = 1000.0 * t;
    let mut out = vec![R::zero(); dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = R::of((x * freq).cos());
        out[half + k] = R::of((x * freq).sin());
    }
    Tensor::new(vec![1, dim], out).expect("dim > 0")
}

fn lin<R: Real>(g: &mut Graph<R>, p: &Params<R>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Conditioning vector `[1 × c]`: timestep MLP plus motion embedding.
pub fn conditioning_vector<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    p: &Params<R>,
    t: f64,
    motion: MotionCoefficients,
) -> Result<Var> {
    check_t(t)?;
    let feats = g.constant(sinusoidal_features(t, cfg.width_model));
    let h = lin(g, p, "time.fc1", feats)?;
    let h = g.silu(h);
    let temb = lin(g, p, "time.fc2", h)?;
    let omega = g.constant(motion.as_row());
    let memb = motion_embed_graph(g, p, omega)?;
    g.add(temb, memb)
}

pub fn block_modulation<R: Real>(g: &mut Graph<R>, cfg: &DiTConfig, p: &Params<R>, block: usize, cond: Var) -> Result<Modulation> {
    let c = cfg.width_model;
    let s = g.silu(cond);
    let m = lin(g, p, &format!("blocks.{block}.mod"), s)?;
    let mut part = |k: usize| g.slice_cols(m, k * c, c);
    Ok(Modulation {
        shift1: part(0)?,
        scale1: part(1)?,
        gate1: part(2)?,
        shift2: part(3)?,
        scale2: part(4)?,
        gate2: part(5)?,
    })
}

/// Conditioned timestep embedding and every block's modulation vectors.
pub fn timestep_embedding<R: Real>(
    cfg: &DiTConfig,
    p: &Params<R>,
    t: f64,
    motion: MotionCoefficients,
) -> Result<(Tensor<R>, Vec<ModulationParams<R>>)> {
    let mut g = Graph::new();
    let cond = conditioning_vector(&mut g, cfg, p, t, motion)?;
    let mut mods = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let m = block_modulation(&mut g, cfg, p, i, cond)?;
        let v = |x: Var| g.value(x).clone();
        mods.push(ModulationParams {
            shift1: v(m.shift1),
            scale1: v(m.scale1),
            gate1: v(m.gate1),
            shift2: v(m.shift2),
            scale2: v(m.scale2),
            gate2: v(m.gate2),
        });
    }
    let c = cfg.width_model;
    Ok((g.value(cond).clone().reshape(vec![c])?, mods))
}

/// `norm(x) ⊙ (1 + scale) + shift`.
fn modulate<R: Real>(g: &mut Graph<R>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.normalize_rows(x);
    let s = g.add_scalar(scale, R::one());
    let y = g.mul_row(n, s)?;
    g.add_row(y, shift)
}

/// Graph inputs shared by every block.
#[derive(Clone, Copy, Debug)]
pub struct BlockInputs {
    /// Audio tokens `[l × c_a]` (real or null).
    pub audio: Var,
    /// Identity tokens `[n_id × c]` (real or null).
    pub identity: Var,
    pub scope: AudioScope,
    pub lambda_audio: f64,
    pub lambda_id: f64,
}

/// Audio (`A`) and identity (`B`) cross-attention increments at hidden state `z`.
pub fn cross_increments<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    p: &Params<R>,
    block: usize,
    z: Var,
    inputs: &BlockInputs,
) -> Result<(Var, Var)> {
    let name = |s: &str| format!("blocks.{block}.{s}");
    let gain = g.param(p, &name("cross.norm.g"))?;
    let bias = g.param(p, &name("cross.norm.b"))?;
    let zn = g.layer_norm(z, gain, bias)?;
    let q = lin(g, p, &name("cross.q"), zn)?;

    let ka = lin(g, p, &name("cross.audio.k"), inputs.audio)?;
    let va = lin(g, p, &name("cross.audio.v"), inputs.audio)?;
    let l = g.shape(inputs.audio)[0];
    let (f, hw) = (cfg.latent_frames(), cfg.frame_tokens());
    let a = match inputs.scope {
        AudioScope::Clip => g.attention(q, ka, va, None, cfg.heads)?,
        AudioScope::MaskedClip => {
            let map = segment_audio(l, f)?;
            g.attention(q, ka, va, Some(&block_mask(&map, cfg.latent_h(), cfg.latent_w())), cfg.heads)?
        }
        AudioScope::Frame => {
            let map = segment_audio(l, f)?;
            frame_attention(g, cfg, &map, hw, q, ka, va)?
        }
    };
    let a = lin(g, p, &name("cross.audio.out"), a)?;

    let kb = lin(g, p, &name("cross.id.k"), inputs.identity)?;
    let vb = lin(g, p, &name("cross.id.v"), inputs.identity)?;
    let b = g.attention(q, kb, vb, None, cfg.heads)?;
    let b = lin(g, p, &name("cross.id.out"), b)?;
    Ok((a, b))
}

fn frame_attention<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    map: &AudioVideoMap,
    hw: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(map.frames());
    for i in 0..map.frames() {
        let qi = g.slice_rows(q, i * hw, hw)?;
        let seg = map.segment(i);
        let ki = g.slice_rows(k, seg.start, seg.len())?;
        let vi = g.slice_rows(v, seg.start, seg.len())?;
        outs.push(g.attention(qi, ki, vi, None, cfg.heads)?);
    }
    g.concat_rows(&outs)
}

/// Self-attention branch followed by the weighted cross-attention update.
pub fn block_pre_mlp<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    p: &Params<R>,
    block: usize,
    z: Var,
    m: &Modulation,
    inputs: &BlockInputs,
) -> Result<Var> {
    let c = cfg.width_model;
    let name = |s: &str| format!("blocks.{block}.{s}");
    let x = modulate(g, z, m.shift1, m.scale1)?;
    let qkv = lin(g, p, &name("attn.qkv"), x)?;
    let q = g.slice_cols(qkv, 0, c)?;
    let k = g.slice_cols(qkv, c, c)?;
    let v = g.slice_cols(qkv, 2 * c, c)?;
    let sa = g.attention(q, k, v, None, cfg.heads)?;
    let sa = lin(g, p, &name("attn.out"), sa)?;
    let sa = g.mul_row(sa, m.gate1)?;
    let z = g.add(z, sa)?;

    let (a, b) = cross_increments(g, cfg, p, block, z, inputs)?;
    let mut z = z;
    if inputs.lambda_audio != 0.0 {
        let a = g.scale(a, R::of(inputs.lambda_audio));
        z = g.add(z, a)?;
    }
    if inputs.lambda_id != 0.0 {
        let b = g.scale(b, R::of(inputs.lambda_id));
        z = g.add(z, b)?;
    }
    Ok(z)
}

pub fn dit_block<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    p: &Params<R>,
    block: usize,
    z: Var,
    m: &Modulation,
    inputs: &BlockInputs,
) -> Result<Var> {
    let z = block_pre_mlp(g, cfg, p, block, z, m, inputs)?;
    let name = |s: &str| format!("blocks.{block}.{s}");
    let x = modulate(g, z, m.shift2, m.scale2)?;
    let h = lin(g, p, &name("mlp.fc1"), x)?;
    let h = g.silu(h);
    let h = lin(g, p, &name("mlp.fc2"), h)?;
    let h = g.mul_row(h, m.gate2)?;
    g.add(z, h)
}

/// Puts the conditioning streams of `bundle` into the graph.
pub fn bundle_inputs<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    p: &Params<R>,
    bundle: &ConditioningBundle,
) -> Result<BlockInputs> {
    let l = cfg.audio_tokens();
    let audio = match &bundle.audio {
        Some(a) => {
            if a.data.shape() != [l, cfg.audio_width] {
                return Err(Error::shape("audio tokens", a.data.shape(), &[l, cfg.audio_width]));
            }
            g.constant(a.data.cast())
        }
        None => {
            let null = g.param(p, "null.audio")?;
            g.repeat_rows(null, l)?
        }
    };
    let identity = match &bundle.identity {
        Some(crop) => {
            if crop.shape() != [cfg.crop_size, cfg.crop_size, 3] {
                return Err(Error::Input(format!("face crop {:?} does not match config", crop.shape())));
            }
            identity_encoder_graph(g, p, cfg, &im2col_stride2(crop)?)?
        }
        None => g.param(p, "null.id")?,
    };
    Ok(BlockInputs {
        audio,
        identity,
        scope: bundle.scope,
        lambda_audio: cfg.lambda_audio as f64,
        lambda_id: cfg.lambda_id as f64,
    })
}

/// Velocity prediction `[N × C]` for noisy latents `z_t` at time `t`.
pub fn model_forward_graph<R: Real>(
    g: &mut Graph<R>,
    cfg: &DiTConfig,
    p: &Params<R>,
    z_t: Var,
    t: f64,
    bundle: &ConditioningBundle,
) -> Result<Var> {
    let (n, ch, hw) = (cfg.tokens(), cfg.latent_channels(), cfg.frame_tokens());
    if g.shape(z_t) != [n, ch] {
        return Err(Error::shape("model input", g.shape(z_t), &[n, ch]));
    }
    let reference = match &bundle.reference {
        Some(r) => {
            if r.shape() != [hw, ch] {
                return Err(Error::shape("reference tokens", r.shape(), &[hw, ch]));
            }
            let r = g.constant(r.cast());
            g.repeat_rows(r, cfg.latent_frames())?
        }
        None => g.constant(Tensor::zeros(vec![n, ch])),
    };
    let x = g.concat_cols(&[z_t, reference])?;
    let x = lin(g, p, "in", x)?;
    let pos = g.param(p, "pos")?;
    let mut z = g.add(x, pos)?;

    let cond = conditioning_vector(g, cfg, p, t, bundle.motion)?;
    let inputs = bundle_inputs(g, cfg, p, bundle)?;
    for i in 0..cfg.depth {
        let m = block_modulation(g, cfg, p, i, cond)?;
        z = dit_block(g, cfg, p, i, z, &m, &inputs)?;
    }
    let s = g.silu(cond);
    let fm = lin(g, p, "final.mod", s)?;
    let c = cfg.width_model;
    let shift = g.slice_cols(fm, 0, c)?;
    let scale = g.slice_cols(fm, c, c)?;
    let z = modulate(g, z, shift, scale)?;
    lin(g, p, "final.out", z)
}

pub fn model_forward<R: Real>(
    cfg: &DiTConfig,
    p: &Params<R>,
    z_t: &Tensor<R>,
    t: f64,
    bundle: &ConditioningBundle,
) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let z = g.constant(z_t.clone());
    let out = model_forward_graph(&mut g, cfg, p, z, t, bundle)?;
    Ok(g.value(out).clone())
}
