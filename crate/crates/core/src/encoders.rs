//! Stand-ins for frozen pretrained encoders: a linear video patchifier, a
//! windowed-feature audio encoder and a small convolutional identity encoder
//! with learned queries.

use crate::config::DiTConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Params, Real, RngState, Tensor, Var};

/// Handcrafted features per audio token: window mean, window change, RMS.
pub const AUDIO_FEATURES: usize = 3;

/// RGB video with values in `[0, 1]`, stored `[F, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    tensor: Tensor<f32>,
}

impl PixelVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self {
            tensor: Tensor::new(vec![frames, height, width, 3], data)?,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(vec![frames, height, width, 3]),
        }
    }

    pub fn from_tensor(tensor: Tensor<f32>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape("pixel video", s, &[0, 0, 0, 3]));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.tensor.data_mut()
    }

    fn offset(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height() + y) * self.width() + x) * 3
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f32; 3] {
        let o = self.offset(f, y, x);
        let d = self.data();
        [d[o], d[o + 1], d[o + 2]]
    }

    pub fn set_pixel(&mut self, f: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let o = self.offset(f, y, x);
        self.data_mut()[o..o + 3].copy_from_slice(&rgb);
    }

    /// Channel-mean intensity of one pixel.
    pub fn intensity(&self, f: usize, y: usize, x: usize) -> f32 {
        let [r, g, b] = self.pixel(f, y, x);
        (r + g + b) / 3.0
    }

    /// Single-frame video holding frame `f`.
    pub fn frame(&self, f: usize) -> PixelVideo {
        let n = self.height() * self.width() * 3;
        PixelVideo::new(1, self.height(), self.width(), self.data()[f * n..(f + 1) * n].to_vec()).expect("frame slice")
    }

    /// Repeats a single frame `frames` times.
    pub fn repeat_frame(&self, frames: usize) -> PixelVideo {
        let n = self.height() * self.width() * 3;
        let src = &self.data()[..n];
        let data = (0..frames).flat_map(|_| src.iter().copied()).collect();
        PixelVideo::new(frames, self.height(), self.width(), data).expect("repeat")
    }

    /// Square `[size, size, 3]` crop of frame `f` at `(top, left)`.
    pub fn crop(&self, f: usize, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
        if top + size > self.height() || left + size > self.width() {
            return Err(Error::Input(format!(
                "crop {size}x{size} at ({top}, {left}) exceeds {}x{} frame",
                self.height(),
                self.width()
            )));
        }
        let mut out = Vec::with_capacity(size * size * 3);
        for y in top..top + size {
            for x in left..left + size {
                out.extend_from_slice(&self.pixel(f, y, x));
            }
        }
        Tensor::new(vec![size, size, 3], out)
    }

    pub fn clamp_unit(&mut self) -> f64 {
        let mut over = 0usize;
        for v in self.data_mut() {
            if !(0.0..=1.0).contains(v) {
                over += 1;
                *v = v.clamp(0.0, 1.0);
            }
        }
        over as f64 / self.data().len() as f64
    }
}

/// Latent token grid, frame-major then row-major over the spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideoTokens<R: Real = f32> {
    pub f: usize,
    pub h: usize,
    pub w: usize,
    /// `[f·h·w × c]`.
    pub data: Tensor<R>,
}

impl<R: Real> LatentVideoTokens<R> {
    pub fn new(f: usize, h: usize, w: usize, data: Tensor<R>) -> Result<Self> {
        if data.rows() != f * h * w || data.shape().len() != 2 {
            return Err(Error::shape("latent tokens", data.shape(), &[f * h * w, 0]));
        }
        Ok(Self { f, h, w, data })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn token_index(&self, frame: usize, y: usize, x: usize) -> usize {
        (frame * self.h + y) * self.w + x
    }
}

/// Affine map between flattened `ts × p × p × 3` patches and latent vectors,
/// with its decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub temporal_stride: usize,
    /// `[patch_dim × c]`.
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    /// `[c × patch_dim]`.
    pub decode_weight: Tensor<f32>,
    pub decode_bias: Tensor<f32>,
}

impl PatchEmbed {
    pub fn patch_dim(patch: usize, temporal_stride: usize) -> usize {
        temporal_stride * patch * patch * 3
    }

    /// `gain·mean(k×k block) + offset` per channel, decoded by replicating
    /// each latent value over its block (the pseudo-inverse of the pooling).
    fn pooled_affine(patch: usize, temporal_stride: usize, pool: usize, gain: f32, offset: f32) -> Self {
        let d = Self::patch_dim(patch, temporal_stride);
        let q = patch / pool;
        let c = temporal_stride * q * q * 3;
        // Latent channel fed by patch element `i` (layout dt, y, x, rgb).
        let target = |i: usize| {
            let (rgb, rest) = (i % 3, i / 3);
            let (x, rest) = (rest % patch, rest / patch);
            let (y, dt) = (rest % patch, rest / patch);
            ((dt * q + y / pool) * q + x / pool) * 3 + rgb
        };
        let share = gain / (pool * pool) as f32;
        let weight = Tensor::from_fn(vec![d, c], |k| if target(k / c) == k % c { share } else { 0.0 });
        let decode_weight = Tensor::from_fn(vec![c, d], |k| if target(k % d) == k / d { 1.0 / gain } else { 0.0 });
        Self {
            patch,
            temporal_stride,
            weight,
            bias: Tensor::full(vec![c], offset),
            decode_weight,
            decode_bias: Tensor::full(vec![d], -offset / gain),
        }
    }

    /// Exact identity: latent vector = raw patch.
    pub fn identity(patch: usize, temporal_stride: usize) -> Self {
        Self::pooled_affine(patch, temporal_stride, 1, 1.0, 0.0)
    }

    /// Block means over `pool × pool` pixels rescaled to `[-1, 1]`.
    pub fn centered_pooled(patch: usize, temporal_stride: usize, pool: usize) -> Self {
        Self::pooled_affine(patch, temporal_stride, pool, 2.0, -1.0)
    }

    /// The fixed latent space of a model configuration.
    pub fn for_config(cfg: &DiTConfig) -> Self {
        Self::centered_pooled(cfg.patch, cfg.temporal_stride, cfg.latent_pool)
    }

    pub fn channels(&self) -> usize {
        self.weight.cols()
    }
}

fn affine_rows(x: &[f32], rows: usize, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (din, dout) = (w.rows(), w.cols());
    let mut out = vec![0.0f32; rows * dout];
    crate::numerics::gemm(
        1.0,
        crate::numerics::MatRef::dense(x, rows, din),
        crate::numerics::MatRef::dense(w.data(), din, dout),
        0.0,
        crate::numerics::MatMut::dense(&mut out, rows, dout),
    );
    for row in out.chunks_exact_mut(dout) {
        for (o, &bb) in row.iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    out
}

/// Splits a video into non-overlapping `ts × p × p` patches and embeds each.
pub fn patchify_video(video: &PixelVideo, embed: &PatchEmbed) -> Result<LatentVideoTokens> {
    let (p, ts) = (embed.patch, embed.temporal_stride);
    let (nf, nh, nw) = (video.frames(), video.height(), video.width());
    if p == 0 || ts == 0 || nh % p != 0 || nw % p != 0 || nf % ts != 0 {
        return Err(Error::Config(format!(
            "video {nf}x{nh}x{nw} is not divisible by patch {p} / temporal stride {ts}"
        )));
    }
    let (f, h, w) = (nf / ts, nh / p, nw / p);
    let d = PatchEmbed::patch_dim(p, ts);
    if embed.weight.rows() != d {
        return Err(Error::shape("patchify", embed.weight.shape(), &[d, 0]));
    }
    let mut patches = Vec::with_capacity(f * h * w * d);
    for t in 0..f {
        for i in 0..h {
            for j in 0..w {
                for dt in 0..ts {
                    for py in 0..p {
                        for px in 0..p {
                            patches.extend_from_slice(&video.pixel(t * ts + dt, i * p + py, j * p + px));
                        }
                    }
                }
            }
        }
    }
    let data = affine_rows(&patches, f * h * w, &embed.weight, &embed.bias);
    LatentVideoTokens::new(f, h, w, Tensor::new(vec![f * h * w, embed.channels()], data)?)
}

/// Inverse layout of [`patchify_video`] through the decoder map.
pub fn unpatchify(tokens: &LatentVideoTokens, embed: &PatchEmbed) -> Result<PixelVideo> {
    let (p, ts) = (embed.patch, embed.temporal_stride);
    if tokens.channels() != embed.decode_weight.rows() {
        return Err(Error::shape("unpatchify", tokens.data.shape(), embed.decode_weight.shape()));
    }
    let n = tokens.f * tokens.h * tokens.w;
    let patches = affine_rows(tokens.data.data(), n, &embed.decode_weight, &embed.decode_bias);
    let d = PatchEmbed::patch_dim(p, ts);
    let mut video = PixelVideo::zeros(tokens.f * ts, tokens.h * p, tokens.w * p);
    for t in 0..tokens.f {
        for i in 0..tokens.h {
            for j in 0..tokens.w {
                let base = tokens.token_index(t, i, j) * d;
                let mut k = base;
                for dt in 0..ts {
                    for py in 0..p {
                        for px in 0..p {
                            let rgb = [patches[k], patches[k + 1], patches[k + 2]];
                            video.set_pixel(t * ts + dt, i * p + py, j * p + px, rgb);
                            k += 3;
                        }
                    }
                }
            }
        }
    }
    Ok(video)
}

/// Audio tokens `[l × c_a]` with their sample rate metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTokenSequence<R: Real = f32> {
    pub data: Tensor<R>,
    pub samples_per_token: usize,
}

impl<R: Real> AudioTokenSequence<R> {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.data.cols()
    }
}

/// Per-token window features `[l × 3]`: mean, last − first, RMS. Token `i`
/// reads only samples `[i·spt, (i+1)·spt)`.
pub fn audio_features(envelope: &[f32], tokens: usize, samples_per_token: usize) -> Result<Tensor<f32>> {
    if tokens == 0 || samples_per_token == 0 {
        return Err(Error::Input("audio token count and rate must be positive".into()));
    }
    if envelope.len() < tokens * samples_per_token {
        return Err(Error::Input(format!(
            "envelope has {} samples, {tokens} tokens of {samples_per_token} need {}",
            envelope.len(),
            tokens * samples_per_token
        )));
    }
    let mut out = Vec::with_capacity(tokens * AUDIO_FEATURES);
    for win in envelope.chunks_exact(samples_per_token).take(tokens) {
        let n = win.len() as f64;
        let mean = win.iter().map(|&x| x as f64).sum::<f64>() / n;
        let change = (win[win.len() - 1] - win[0]) as f64;
        let rms = (win.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n).sqrt();
        out.extend([mean as f32, change as f32, rms as f32]);
    }
    Tensor::new(vec![tokens, AUDIO_FEATURES], out)
}

/// Windowed features through the learned projection `audio.proj`.
pub fn encode_audio<R: Real>(
    envelope: &[f32],
    tokens: usize,
    samples_per_token: usize,
    params: &Params<R>,
) -> Result<AudioTokenSequence<R>> {
    let feats = audio_features(envelope, tokens, samples_per_token)?;
    let mut g = Graph::new();
    let x = g.constant(feats.cast());
    let y = audio_projection(&mut g, params, x)?;
    Ok(AudioTokenSequence {
        data: g.value(y).clone(),
        samples_per_token,
    })
}

pub(crate) fn audio_projection<R: Real>(g: &mut Graph<R>, params: &Params<R>, features: Var) -> Result<Var> {
    let w = g.param(params, "audio.proj.w")?;
    let b = g.param(params, "audio.proj.b")?;
    g.linear(features, w, b)
}

/// Identity embedding `[n_id × c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTokens<R: Real = f32> {
    pub data: Tensor<R>,
}

/// 3×3, stride 2, zero-padded patches of an `[S, S, 3]` crop: `[(S/2)² × 27]`.
pub fn im2col_stride2(crop: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = crop.shape();
    if s.len() != 3 || s[2] != 3 || s[0] != s[1] || s[0] % 2 != 0 {
        return Err(Error::Input(format!("face crop must be [S, S, 3] with even S, got {s:?}")));
    }
    let n = s[0];
    let m = n / 2;
    let d = crop.data();
    let mut out = Vec::with_capacity(m * m * 27);
    for oy in 0..m {
        for ox in 0..m {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (2 * oy + ky) as isize - 1;
                    let x = (2 * ox + kx) as isize - 1;
                    if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
                        out.extend([0.0; 3]);
                    } else {
                        let o = (y as usize * n + x as usize) * 3;
                        out.extend_from_slice(&d[o..o + 3]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![m * m, 27], out)
}

pub(crate) fn identity_encoder_graph<R: Real>(
    g: &mut Graph<R>,
    params: &Params<R>,
    cfg: &DiTConfig,
    columns: &Tensor<f32>,
) -> Result<Var> {
    let x = g.constant(columns.cast());
    let w1 = g.param(params, "id.conv.w")?;
    let b1 = g.param(params, "id.conv.b")?;
    let h = g.linear(x, w1, b1)?;
    let h = g.silu(h);
    let w2 = g.param(params, "id.feat.w")?;
    let b2 = g.param(params, "id.feat.b")?;
    let feats = g.linear(h, w2, b2)?;
    let queries = g.param(params, "id.queries")?;
    let proj = |g: &mut Graph<R>, name: &str, x: Var| -> Result<Var> {
        let w = g.param(params, &format!("id.attn.{name}.w"))?;
        let b = g.param(params, &format!("id.attn.{name}.b"))?;
        g.linear(x, w, b)
    };
    let q = proj(g, "q", queries)?;
    let k = proj(g, "k", feats)?;
    let v = proj(g, "v", feats)?;
    let a = g.attention(q, k, v, None, cfg.heads)?;
    proj(g, "o", a)
}

/// Face crop → identity tokens through the `id.*` parameters.
pub fn encode_identity<R: Real>(crop: &Tensor<f32>, cfg: &DiTConfig, params: &Params<R>) -> Result<IdentityTokens<R>> {
    if crop.shape() != [cfg.crop_size, cfg.crop_size, 3] {
        return Err(Error::Input(format!(
            "face crop {:?} does not match configured size {}",
            crop.shape(),
            cfg.crop_size
        )));
    }
    let cols = im2col_stride2(crop)?;
    let mut g = Graph::new();
    let v = identity_encoder_graph(&mut g, params, cfg, &cols)?;
    Ok(IdentityTokens { data: g.value(v).clone() })
}

/// Fresh parameters for the audio projection and identity encoder.
pub fn init_encoder_params<R: Real>(cfg: &DiTConfig, rng: &mut RngState, params: &mut Params<R>) {
    let c = cfg.width_model;
    params.insert("audio.proj.w", crate::numerics::xavier(rng, AUDIO_FEATURES, cfg.audio_width));
    params.insert("audio.proj.b", Tensor::zeros(vec![cfg.audio_width]));
    params.insert("id.conv.w", crate::numerics::xavier(rng, 27, cfg.id_channels));
    params.insert("id.conv.b", Tensor::zeros(vec![cfg.id_channels]));
    params.insert("id.feat.w", crate::numerics::xavier(rng, cfg.id_channels, c));
    params.insert("id.feat.b", Tensor::zeros(vec![c]));
    params.insert("id.queries", rng.normal_tensor(vec![cfg.n_id, c]));
    for name in ["q", "k", "v", "o"] {
        params.insert(format!("id.attn.{name}.w"), crate::numerics::xavier(rng, c, c));
        params.insert(format!("id.attn.{name}.b"), Tensor::zeros(vec![c]));
    }
}
