//! Euler integration of the learned flow from noise to video, with audio
//! classifier-free guidance.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::DiTCheckpoint;
use crate::config::{DiTConfig, SampleConfig};
use crate::encoders::{encode_audio, patchify_video, unpatchify, LatentVideoTokens, PatchEmbed, PixelVideo};
use crate::error::{Error, Result};
use crate::model::{model_forward, AudioScope, ConditioningBundle};
use crate::motion::MotionCoefficients;
use crate::numerics::{Params, RngState, Tensor};

const TAG_NOISE: u64 = 0x4e4f_4953;

/// `v_u + s·(v_c − v_u)`; `s = 1` and `s = 0` return the endpoints unchanged.
pub fn cfg_velocity(v_cond: &Tensor<f32>, v_uncond: &Tensor<f32>, s: f32) -> Result<Tensor<f32>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::shape("cfg_velocity", v_cond.shape(), v_uncond.shape()));
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    let data = v_cond.data().iter().zip(v_uncond.data()).map(|(&c, &u)| u + s * (c - u)).collect();
    Tensor::new(v_cond.shape().to_vec(), data)
}

/// A time-dependent velocity field with a conditional and an unconditional branch.
pub trait VelocityField {
    fn conditional(&self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>>;
    fn unconditional(&self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>>;

    /// Guided velocity; the unconditional branch is skipped when `s = 1`.
    fn guided(&self, z: &Tensor<f32>, t: f64, s: f32) -> Result<Tensor<f32>> {
        if s == 1.0 {
            return self.conditional(z, t);
        }
        if s == 0.0 {
            return self.unconditional(z, t);
        }
        cfg_velocity(&self.conditional(z, t)?, &self.unconditional(z, t)?, s)
    }
}

/// Integrates `dz/dt = v` from `t = 1` to `t = 0` in `steps` uniform Euler steps.
pub fn euler_integrate<V: VelocityField>(field: &V, z1: Tensor<f32>, steps: usize, s: f32) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::Config("sampling steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.guided(&z, t, s)?;
        let h = dt as f32;
        z.data_mut().iter_mut().zip(v.data()).for_each(|(zi, &vi)| *zi -= h * vi);
    }
    Ok(z)
}

/// The trained network as a velocity field for fixed conditions.
pub struct DitField<'a> {
    pub cfg: &'a DiTConfig,
    pub params: &'a Params<f32>,
    pub cond: ConditioningBundle,
    pub uncond: ConditioningBundle,
}

impl VelocityField for DitField<'_> {
    fn conditional(&self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        model_forward(self.cfg, self.params, z, t, &self.cond)
    }

    fn unconditional(&self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        model_forward(self.cfg, self.params, z, t, &self.uncond)
    }
}

/// Generated video plus the fraction of pixel channels clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub video: PixelVideo,
    pub latents: Tensor<f32>,
    pub overflow: f64,
}

/// Sampling from one checkpoint, with optional inference-time overrides.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    checkpoint: &'a DiTCheckpoint,
    model: DiTConfig,
    scope: AudioScope,
}

impl<'a> Sampler<'a> {
    /// Audio scope follows the last trained stage: frame-level once any
    /// frame-level step has run, clip-level otherwise.
    pub fn new(checkpoint: &'a DiTCheckpoint) -> Self {
        let scope = if checkpoint.progress.frame_steps > 0 {
            AudioScope::Frame
        } else {
            AudioScope::Clip
        };
        Self {
            checkpoint,
            model: checkpoint.model.clone(),
            scope,
        }
    }

    pub fn with_scope(mut self, scope: AudioScope) -> Self {
        self.scope = scope;
        self
    }

    /// Overrides the identity cross-attention weight.
    pub fn with_lambda_id(mut self, lambda: f32) -> Self {
        self.model.lambda_id = lambda;
        self
    }

    pub fn scope(&self) -> AudioScope {
        self.scope
    }

    pub fn model(&self) -> &DiTConfig {
        &self.model
    }

    /// Conditions and guidance pair built from a reference frame and an envelope.
    pub fn bundles(
        &self,
        reference: &PixelVideo,
        envelope: &[f32],
        sc: &SampleConfig,
    ) -> Result<(ConditioningBundle, ConditioningBundle)> {
        let cfg = &self.model;
        if reference.frames() != 1 || reference.height() != cfg.height || reference.width() != cfg.width {
            return Err(Error::Input(format!(
                "reference must be one {}x{} frame, got {} frames of {}x{}",
                cfg.height,
                cfg.width,
                reference.frames(),
                reference.height(),
                reference.width()
            )));
        }
        if envelope.len() != cfg.envelope_len() {
            return Err(Error::Input(format!(
                "audio envelope has {} samples, the model expects {}",
                envelope.len(),
                cfg.envelope_len()
            )));
        }
        let embed = PatchEmbed::for_config(cfg);
        let ref_tokens = patchify_video(&reference.repeat_frame(cfg.temporal_stride), &embed)?.data;
        let crop = reference.crop(0, cfg.crop_top, cfg.crop_left, cfg.crop_size)?;
        let audio = encode_audio(envelope, cfg.audio_tokens(), cfg.samples_per_token, &self.checkpoint.params)?;
        let cond = ConditioningBundle {
            audio: Some(audio),
            identity: Some(crop),
            motion: MotionCoefficients::new(sc.motion_l, sc.motion_b),
            reference: Some(ref_tokens),
            scope: self.scope,
        };
        let mut uncond = cond.clone();
        uncond.audio = None;
        if sc.joint_uncond {
            uncond.identity = None;
            uncond.reference = None;
        }
        Ok((cond, uncond))
    }

    /// Initial noise for a seed.
    pub fn noise(&self, seed: u64) -> Tensor<f32> {
        let cfg = &self.model;
        RngState::new(seed)
            .derive(TAG_NOISE, 0)
            .normal_tensor(vec![cfg.tokens(), cfg.latent_channels()])
    }

    pub fn sample(&self, reference: &PixelVideo, envelope: &[f32], sc: &SampleConfig) -> Result<SampleOutput> {
        sc.validate()?;
        let (cond, uncond) = self.bundles(reference, envelope, sc)?;
        let field = DitField {
            cfg: &self.model,
            params: &self.checkpoint.params,
            cond,
            uncond,
        };
        let z0 = euler_integrate(&field, self.noise(sc.seed), sc.steps, sc.cfg_scale)?;
        if !z0.all_finite() {
            return Err(Error::NonFinite {
                name: "sampled latents".into(),
            });
        }
        self.decode(z0)
    }

    /// Latents to pixels, clamped into `[0, 1]`.
    pub fn decode(&self, latents: Tensor<f32>) -> Result<SampleOutput> {
        let cfg = &self.model;
        let tokens = LatentVideoTokens::new(cfg.latent_frames(), cfg.latent_h(), cfg.latent_w(), latents.clone())?;
        let mut video = unpatchify(&tokens, &PatchEmbed::for_config(cfg))?;
        let overflow = video.clamp_unit();
        Ok(SampleOutput { video, latents, overflow })
    }
}

/// `sample` with the checkpoint's default inference settings.
pub fn sample(reference: &PixelVideo, envelope: &[f32], sc: &SampleConfig, checkpoint: &DiTCheckpoint) -> Result<SampleOutput> {
    Sampler::new(checkpoint).sample(reference, envelope, sc)
}

/// Writes frame `f` as a binary PPM.
pub fn write_ppm(video: &PixelVideo, f: usize, path: &Path) -> Result<()> {
    if f >= video.frames() {
        return Err(Error::Input(format!("frame {f} out of range ({} frames)", video.frames())));
    }
    let mut out = format!("P6\n{} {}\n255\n", video.width(), video.height()).into_bytes();
    for y in 0..video.height() {
        for x in 0..video.width() {
            for c in video.pixel(f, y, x) {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary (P6, maxval 255) PPM as a one-frame video.
pub fn read_ppm(path: &Path) -> Result<PixelVideo> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format("PPM image", format!("{}: {d}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let body = &bytes[(i + 1).min(bytes.len())..];
    if body.len() != w * h * 3 {
        return Err(bad("pixel data length does not match the header"));
    }
    PixelVideo::new(1, h, w, body.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Writes the video as a raw tensor file plus one PPM per frame named `<stem>_fNN.ppm`.
pub fn write_video(video: &PixelVideo, dir: &Path, stem: &str, frames: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = dir.join(format!("{stem}.bin"));
    let mut file = fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
    video.tensor().write_to(&mut file).map_err(|e| Error::io(&raw, e))?;
    file.flush().map_err(|e| Error::io(&raw, e))?;
    if frames {
        for f in 0..video.frames() {
            write_ppm(video, f, &dir.join(format!("{stem}_f{f:02}.ppm")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Progress;
    use crate::config::TrainConfig;
    use crate::model::init_params;
    use crate::synthdata::{corpus_specs, generate_sample};
    use proptest::prelude::*;

    /// Constant field `ε − z` of the straight path that starts at `ε`.
    struct Straight {
        target: Tensor<f32>,
        start: Tensor<f32>,
    }

    impl VelocityField for Straight {
        fn conditional(&self, _z: &Tensor<f32>, _t: f64) -> Result<Tensor<f32>> {
            let d = self.start.data().iter().zip(self.target.data()).map(|(e, z)| e - z).collect();
            Tensor::new(self.start.shape().to_vec(), d)
        }
        fn unconditional(&self, z: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
            self.conditional(z, t)
        }
    }

    proptest! {
        #[test]
        fn straight_field_lands_on_target(seed in any::<u64>(), steps in 1usize..40) {
            let mut rng = RngState::new(seed);
            let target: Tensor<f32> = rng.normal_tensor(vec![6, 4]);
            let start: Tensor<f32> = rng.normal_tensor(vec![6, 4]);
            let field = Straight { target: target.clone(), start: start.clone() };
            let z0 = euler_integrate(&field, start, steps, 4.5).unwrap();
            prop_assert!(z0.max_abs_diff(&target) < 1e-5);
        }
    }

    /// `v = a·z` with the unconditional branch at `b·z`.
    struct Linear {
        a: f32,
        b: f32,
    }

    impl VelocityField for Linear {
        fn conditional(&self, z: &Tensor<f32>, _t: f64) -> Result<Tensor<f32>> {
            Ok(z.map(|x| self.a * x))
        }
        fn unconditional(&self, z: &Tensor<f32>, _t: f64) -> Result<Tensor<f32>> {
            Ok(z.map(|x| self.b * x))
        }
    }

    #[test]
    fn one_step_is_a_single_euler_update() {
        let z1 = Tensor::new(vec![1, 2], vec![1.0f32, -2.0]).unwrap();
        let z0 = euler_integrate(&Linear { a: 0.5, b: 0.0 }, z1, 1, 1.0).unwrap();
        assert_eq!(z0.data(), &[0.5, -1.0]);
    }

    #[test]
    fn euler_matches_closed_form_product() {
        // Each step multiplies by 1 − h·(b + s(a − b)).
        let (a, b, s, n) = (0.8f32, 0.2f32, 3.0f32, 5usize);
        let z0 = euler_integrate(&Linear { a, b }, Tensor::ones(vec![1, 1]), n, s).unwrap();
        let k = b + s * (a - b);
        let expect = (1.0 - k as f64 / n as f64).powi(n as i32);
        assert!((z0.data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(euler_integrate(&Linear { a: 1.0, b: 1.0 }, Tensor::ones(vec![1, 1]), 0, 1.0).is_err());
    }

    #[test]
    fn cfg_endpoints_and_midpoint() {
        let c = Tensor::new(vec![3], vec![1.0f32, 2.0, -3.0]).unwrap();
        let u = Tensor::new(vec![3], vec![0.5f32, -1.0, 0.25]).unwrap();
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        let h = cfg_velocity(&c, &u, 2.0).unwrap();
        assert_eq!(h.data(), &[1.5, 5.0, -6.25]);
        assert!(cfg_velocity(&c, &Tensor::zeros(vec![2]), 1.0).is_err());
    }

    fn tiny_checkpoint(frame_steps: usize) -> DiTCheckpoint {
        let cfg = DiTConfig::tiny();
        let mut params = init_params(&cfg, &mut RngState::new(1)).unwrap();
        for name in ["final.out.w", "final.mod.w", "blocks.0.mod.w"] {
            let t = params.get_mut(name).unwrap();
            let noise: Tensor<f32> = RngState::new(2).normal_tensor(t.shape().to_vec());
            *t = noise.map(|x| 0.2 * x);
        }
        DiTCheckpoint {
            model: cfg,
            train: TrainConfig::default(),
            motion_norm: None,
            progress: Progress { clip_steps: 1, frame_steps },
            rng: RngState::new(0).snapshot(),
            params,
            optimizer: None,
        }
    }

    fn tiny_inputs(cfg: &DiTConfig) -> (PixelVideo, Vec<f32>) {
        let s = generate_sample(cfg, &corpus_specs(cfg, 1, 3)[0]).unwrap();
        (s.video.frame(0), s.spec.envelope.clone())
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let ck = tiny_checkpoint(1);
        let (r, env) = tiny_inputs(&ck.model);
        let sc = SampleConfig { steps: 4, ..SampleConfig::default() };
        let a = sample(&r, &env, &sc, &ck).unwrap();
        let b = sample(&r, &env, &sc, &ck).unwrap();
        assert_eq!(a, b);
        assert!(a.video.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!((0.0..=1.0).contains(&a.overflow));
        let c = sample(&r, &env, &SampleConfig { seed: 1, ..sc }, &ck).unwrap();
        assert_ne!(a.video, c.video);
    }

    #[test]
    fn scope_follows_last_trained_stage() {
        assert_eq!(Sampler::new(&tiny_checkpoint(0)).scope(), AudioScope::Clip);
        assert_eq!(Sampler::new(&tiny_checkpoint(3)).scope(), AudioScope::Frame);
    }

    #[test]
    fn guidance_scale_reaches_the_model() {
        let ck = tiny_checkpoint(1);
        let (r, env) = tiny_inputs(&ck.model);
        let base = SampleConfig { steps: 2, ..SampleConfig::default() };
        assert_eq!(base.cfg_scale, 4.5);
        let a = sample(&r, &env, &base, &ck).unwrap();
        let b = sample(&r, &env, &SampleConfig { cfg_scale: 1.0, ..base }, &ck).unwrap();
        assert_ne!(a.latents, b.latents);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let ck = tiny_checkpoint(1);
        let (r, env) = tiny_inputs(&ck.model);
        let sc = SampleConfig::default();
        assert!(matches!(sample(&r, &env[1..], &sc, &ck), Err(Error::Input(_))));
        assert!(matches!(sample(&PixelVideo::zeros(1, 4, 4), &env, &sc, &ck), Err(Error::Input(_))));
    }

    #[test]
    fn ppm_dump_has_header_and_payload() {
        let mut v = PixelVideo::zeros(2, 3, 4);
        v.set_pixel(1, 0, 0, [1.0, 0.5, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        write_video(&v, dir.path(), "clip", true).unwrap();
        let bytes = fs::read(dir.path().join("clip_f01.ppm")).unwrap();
        let header = b"P6\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 36);
        assert_eq!(&bytes[header.len()..header.len() + 3], &[255, 128, 0]);
        let img = read_ppm(&dir.path().join("clip_f01.ppm")).unwrap();
        assert_eq!(img.pixel(0, 0, 0), [1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(img.pixel(0, 2, 3), [0.0; 3]);
        let raw = fs::read(dir.path().join("clip.bin")).unwrap();
        let back = Tensor::<f32>::read_from(&mut raw.as_slice()).unwrap();
        assert_eq!(&back, v.tensor());
    }
}
