//! Flow-matching training: noising, the lip-masked gated loss, condition
//! dropout, Adam, and the clip-level then frame-level schedule.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alignment::LipMask;
use crate::checkpoint::{AdamState, DiTCheckpoint, MotionNorm, Progress};
use crate::config::{DiTConfig, Stage, TrainConfig};
use crate::encoders::{encode_audio, patchify_video, AudioTokenSequence, PatchEmbed};
use crate::error::{Error, Result};
use crate::model::{model_forward_graph, AudioScope, ConditioningBundle};
use crate::motion::{MotionCoefficients, NormStats};
use crate::numerics::{Graph, Params, Real, RngState, Tensor, Var};
use crate::synthdata::Sample;

const TAG_STEP: u64 = 0x5354_4550;
const TAG_BATCH: u64 = 1;
const TAG_GATE: u64 = 2;
const TAG_SAMPLE: u64 = 3;

/// Parameters that never receive updates: the audio feature projection
/// stands in for a frozen pretrained audio encoder.
pub fn is_frozen(name: &str) -> bool {
    name.starts_with("audio.proj.")
}

/// `√α·z + √(1−α)·ε`.
pub fn ddpm_noise<R: Real>(z: &Tensor<R>, eps: &Tensor<R>, alpha: f64) -> Result<Tensor<R>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha {alpha} outside [0, 1]")));
    }
    if z.shape() != eps.shape() {
        return Err(Error::shape("ddpm_noise", z.shape(), eps.shape()));
    }
    let (a, b) = (R::of(alpha.sqrt()), R::of((1.0 - alpha).sqrt()));
    Tensor::new(z.shape().to_vec(), z.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect())
}

/// Straight path `z_t = (1−t)·z + t·ε` and its velocity `ε − z`.
pub fn flow_noise_and_target<R: Real>(z: &Tensor<R>, eps: &Tensor<R>, t: f64) -> Result<(Tensor<R>, Tensor<R>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("t {t} outside [0, 1]")));
    }
    if z.shape() != eps.shape() {
        return Err(Error::shape("flow_noise_and_target", z.shape(), eps.shape()));
    }
    let (a, b) = (R::of(1.0 - t), R::of(t));
    let zt = z.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    let v = z.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
    Ok((Tensor::new(z.shape().to_vec(), zt)?, Tensor::new(z.shape().to_vec(), v)?))
}

/// Outcome of the lip-mask gate for one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    /// The mask-weighted branch was selected.
    pub masked: bool,
    /// The masked branch was selected but the mask was empty, so the plain mean was used.
    pub empty_mask: bool,
}

/// Draws `p ~ U[0, 1)`; the masked branch applies when `p > η`.
pub fn gate_draw(eta: f64, rng: &mut RngState) -> bool {
    rng.uniform() > eta
}

fn mask_sum(mask: &Tensor<f32>) -> f64 {
    mask.data().iter().map(|&m| m as f64).sum()
}

/// Per-element weights broadcasting a per-token mask over `channels`.
fn mask_weights<R: Real>(mask: &Tensor<f32>, channels: usize) -> Vec<R> {
    mask.data()
        .iter()
        .flat_map(|&m| std::iter::repeat_n(R::of(m as f64), channels))
        .collect()
}

/// Masked-or-plain mean of a per-element loss `[tokens × c]` (any shape with
/// `tokens·c` entries) under a per-token latent mask.
pub fn masked_gated_loss(
    per_element: &Tensor<f64>,
    mask: &Tensor<f32>,
    eta: f64,
    rng: &mut RngState,
) -> Result<(f64, GateOutcome)> {
    let masked = gate_draw(eta, rng);
    let mut g = Graph::new();
    let l = g.constant(per_element.clone());
    let (v, outcome) = gated_reduce(&mut g, l, mask, masked)?;
    Ok((g.value(v).data()[0], outcome))
}

/// Mean of `l` if `masked` is false, else `Σ M⊙L / max(ΣM·c, 1)`.
pub fn gated_reduce<R: Real>(g: &mut Graph<R>, l: Var, mask: &Tensor<f32>, masked: bool) -> Result<(Var, GateOutcome)> {
    let n = g.value(l).len();
    let tokens = mask.len();
    if tokens == 0 || n % tokens != 0 {
        return Err(Error::shape("masked loss", g.shape(l), mask.shape()));
    }
    let c = n / tokens;
    let total = mask_sum(mask);
    if !masked || total == 0.0 {
        return Ok((
            g.mean(l),
            GateOutcome {
                masked,
                empty_mask: masked,
            },
        ));
    }
    let s = g.weighted_sum(l, &mask_weights(mask, c))?;
    let denom = (total * c as f64).max(1.0);
    Ok((
        g.scale(s, R::one() / R::of(denom)),
        GateOutcome {
            masked: true,
            empty_mask: false,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutProbs {
    pub audio: f64,
    pub identity: f64,
    pub reference: f64,
}

impl DropoutProbs {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            audio: c.drop_audio as f64,
            identity: c.drop_identity as f64,
            reference: c.drop_reference as f64,
        }
    }
}

/// Independently replaces each condition with its null version.
pub fn condition_dropout(bundle: &ConditioningBundle, probs: &DropoutProbs, rng: &mut RngState) -> ConditioningBundle {
    let mut out = bundle.clone();
    let (da, di, dr) = (rng.bernoulli(probs.audio), rng.bernoulli(probs.identity), rng.bernoulli(probs.reference));
    if da {
        out.audio = None;
    }
    if di {
        out.identity = None;
    }
    if dr {
        out.reference = None;
    }
    out
}

/// A training clip in latent form with its conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// `[N × C]`.
    pub latents: Tensor<f32>,
    pub audio: AudioTokenSequence,
    pub face_crop: Tensor<f32>,
    /// First-frame latents `[h·w × C]`.
    pub reference: Tensor<f32>,
    pub motion: MotionCoefficients,
    /// Latent lip mask `[f, h, w]`.
    pub lip_mask: Tensor<f32>,
}

impl TrainExample {
    pub fn from_sample(sample: &Sample, cfg: &DiTConfig, params: &Params<f32>) -> Result<Self> {
        let embed = PatchEmbed::for_config(cfg);
        let latents = patchify_video(&sample.video, &embed)?.data;
        let first = sample.video.frame(0).repeat_frame(cfg.temporal_stride);
        let reference = patchify_video(&first, &embed)?.data;
        let audio = encode_audio(&sample.spec.envelope, cfg.audio_tokens(), cfg.samples_per_token, params)?;
        let mask = LipMask::from_pixel(sample.lip_mask.clone(), cfg.latent_frames(), cfg.latent_h(), cfg.latent_w())?;
        Ok(Self {
            latents,
            audio,
            face_crop: sample.face_crop.clone(),
            reference,
            motion: sample.spec.motion(),
            lip_mask: mask.latent,
        })
    }

    pub fn bundle(&self, scope: AudioScope) -> ConditioningBundle {
        ConditioningBundle {
            audio: Some(self.audio.clone()),
            identity: Some(self.face_crop.clone()),
            motion: self.motion,
            reference: Some(self.reference.clone()),
            scope,
        }
    }
}

/// Corpus range of landmark and joint variances.
pub fn motion_norm(samples: &[Sample]) -> Result<MotionNorm> {
    let lip = samples.iter().map(|s| s.landmarks.raw_variance()).collect::<Result<Vec<_>>>()?;
    let body = samples.iter().map(|s| s.joints.raw_variance()).collect::<Result<Vec<_>>>()?;
    Ok(MotionNorm {
        lip: NormStats::from_raw(lip)?,
        body: NormStats::from_raw(body)?,
    })
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    /// The lip-mask gate selected the masked branch.
    pub masked: bool,
    pub empty_mask: bool,
    /// Mean latent lip-mask coverage over the batch.
    pub coverage: f64,
}

/// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub state: AdamState,
}

impl Adam {
    pub const BETA1: f32 = 0.9;
    pub const BETA2: f32 = 0.999;
    pub const EPS: f32 = 1e-8;

    pub fn new(params: &Params<f32>) -> Self {
        let zeros = |p: &Params<f32>| {
            p.iter()
                .filter(|(k, _)| !is_frozen(k))
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect()
        };
        Self {
            state: AdamState {
                t: 0,
                m: zeros(params),
                v: zeros(params),
            },
        }
    }

    /// Applies one update; parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f32) {
        let st = &mut self.state;
        st.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(st.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(st.t as i32);
        for (name, p) in params.iter_mut() {
            let (Some(m), Some(v)) = (st.m.get_mut(name), st.v.get_mut(name)) else {
                continue;
            };
            let g = grads.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Parameters, optimizer and progress of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DiTConfig,
    pub train: TrainConfig,
    pub params: Params<f32>,
    pub adam: Adam,
    pub progress: Progress,
    pub motion_norm: Option<MotionNorm>,
    root: RngState,
}

impl Trainer {
    /// Uses the cross-attention weights of `train` for the model.
    pub fn new(model: &DiTConfig, train: &TrainConfig, params: Params<f32>) -> Result<Self> {
        train.validate()?;
        let mut model = model.clone();
        model.lambda_audio = train.lambda_audio;
        model.lambda_id = train.lambda_id;
        model.validate()?;
        Ok(Self {
            adam: Adam::new(&params),
            model,
            train: train.clone(),
            params,
            progress: Progress::default(),
            motion_norm: None,
            root: RngState::new(train.seed),
        })
    }

    pub fn from_checkpoint(c: &DiTCheckpoint) -> Result<Self> {
        let adam = match &c.optimizer {
            Some(s) => Adam { state: s.clone() },
            None => Adam::new(&c.params),
        };
        Ok(Self {
            model: c.model.clone(),
            train: c.train.clone(),
            params: c.params.clone(),
            adam,
            progress: c.progress,
            motion_norm: c.motion_norm,
            root: RngState::restore(c.rng),
        })
    }

    pub fn checkpoint(&self) -> DiTCheckpoint {
        DiTCheckpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            motion_norm: self.motion_norm,
            progress: self.progress,
            rng: self.root.snapshot(),
            params: self.params.clone(),
            optimizer: Some(self.adam.state.clone()),
        }
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[TrainExample], stage: Stage) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let step = self.progress.total();
        let rng = self.root.derive(TAG_STEP, step as u64);
        let mut pick = rng.derive(TAG_BATCH, 0);
        let batch: Vec<&TrainExample> = (0..self.train.batch_size).map(|_| &data[pick.below(data.len())]).collect();
        let masked_gate = match stage {
            Stage::ClipLevel => false,
            Stage::FrameLevel => gate_draw(self.train.eta as f64, &mut rng.derive(TAG_GATE, 0)),
        };
        let probs = DropoutProbs::from_config(&self.train);
        let scope = AudioScope::from(stage);

        let mut grads: Params<f32> = Params::new();
        let (mut loss_sum, mut coverage, mut empty) = (0.0f64, 0.0f64, false);
        for (b, ex) in batch.iter().enumerate() {
            let mut sub = rng.derive(TAG_SAMPLE, b as u64);
            let t = sub.uniform();
            let eps: Tensor<f32> = sub.normal_tensor(ex.latents.shape().to_vec());
            let (zt, target) = flow_noise_and_target(&ex.latents, &eps, t)?;
            let bundle = condition_dropout(&ex.bundle(scope), &probs, &mut sub);

            let mut g = Graph::new();
            let zv = g.constant(zt);
            let pred = model_forward_graph(&mut g, &self.model, &self.params, zv, t, &bundle)?;
            let tv = g.constant(target);
            let d = g.sub(pred, tv)?;
            let sq = g.square(d);
            let (loss, outcome) = gated_reduce(&mut g, sq, &ex.lip_mask, masked_gate)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("loss at step {step} ({}, batch item {b}, t = {t:.4})", stage.as_str()),
                });
            }
            g.backward(loss)?;
            for (name, gr) in g.param_grads() {
                if is_frozen(&name) {
                    continue;
                }
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, &x)| *a += x),
                    None => grads.insert(name, gr),
                }
            }
            loss_sum += lv;
            coverage += ex.lip_mask.mean() as f64;
            empty |= outcome.empty_mask;
        }
        let inv = 1.0 / batch.len() as f32;
        for (_, gr) in grads.iter_mut() {
            gr.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        self.adam.update(&mut self.params, &grads, self.train.learning_rate);
        match stage {
            Stage::ClipLevel => self.progress.clip_steps += 1,
            Stage::FrameLevel => self.progress.frame_steps += 1,
        }
        Ok(LossReport {
            step,
            stage,
            loss: loss_sum / batch.len() as f64,
            masked: masked_gate,
            empty_mask: empty,
            coverage: coverage / batch.len() as f64,
        })
    }

    /// Runs the remaining clip-level steps, then the remaining frame-level
    /// steps. `on_checkpoint` receives a checkpoint at each stage boundary and
    /// every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        data: &[TrainExample],
        mut log: Option<&mut dyn Write>,
        mut on_checkpoint: impl FnMut(&DiTCheckpoint) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        for (stage, target) in [
            (Stage::ClipLevel, self.train.steps_clip),
            (Stage::FrameLevel, self.train.steps_frame),
        ] {
            let done = |p: &Progress| match stage {
                Stage::ClipLevel => p.clip_steps,
                Stage::FrameLevel => p.frame_steps,
            };
            if done(&self.progress) >= target {
                continue;
            }
            while done(&self.progress) < target {
                let r = self.train_step(data, stage)?;
                if let Some(w) = log.as_deref_mut() {
                    let line = serde_json::to_string(&r).map_err(|e| Error::format("loss log", e.to_string()))?;
                    writeln!(w, "{line}").map_err(|e| Error::format("loss log", e.to_string()))?;
                }
                reports.push(r);
                let every = self.train.checkpoint_every;
                if every > 0 && self.progress.total() % every == 0 && done(&self.progress) < target {
                    on_checkpoint(&self.checkpoint())?;
                }
            }
            on_checkpoint(&self.checkpoint())?;
        }
        Ok(reports)
    }
}

/// Clip-level then frame-level training from `params`; returns the final checkpoint.
pub fn run_two_stage(
    data: &[TrainExample],
    model: &DiTConfig,
    train: &TrainConfig,
    params: Params<f32>,
) -> Result<(DiTCheckpoint, Vec<LossReport>)> {
    let mut t = Trainer::new(model, train, params)?;
    let reports = t.run(data, None, |_| Ok(()))?;
    Ok((t.checkpoint(), reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synthdata::{corpus_specs, generate_sample};
    use proptest::prelude::*;

    #[test]
    fn ddpm_endpoints_and_midpoint() {
        let z = Tensor::new(vec![3], vec![2.0f64, -1.0, 0.5]).unwrap();
        let e = Tensor::new(vec![3], vec![0.3f64, 0.7, -2.0]).unwrap();
        assert_eq!(ddpm_noise(&z, &e, 1.0).unwrap(), z);
        assert_eq!(ddpm_noise(&z, &e, 0.0).unwrap(), e);
        let one = ddpm_noise(&Tensor::new(vec![1], vec![2.0f64]).unwrap(), &Tensor::zeros(vec![1]), 0.5).unwrap();
        assert!((one.data()[0] - 1.41421356).abs() < 1e-8);
        assert!(ddpm_noise(&z, &e, 1.5).is_err());
    }

    #[test]
    fn flow_endpoints_and_example() {
        let z = Tensor::new(vec![2], vec![1.0f64, -3.0]).unwrap();
        let e = Tensor::new(vec![2], vec![3.0f64, 0.5]).unwrap();
        let (z0, v) = flow_noise_and_target(&z, &e, 0.0).unwrap();
        assert_eq!(z0, z);
        assert_eq!(v.data(), &[2.0, 3.5]);
        assert_eq!(flow_noise_and_target(&z, &e, 1.0).unwrap().0, e);
        let (zq, vq) = flow_noise_and_target(&z, &e, 0.25).unwrap();
        assert_eq!((zq.data()[0], vq.data()[0]), (1.5, 2.0));
    }

    proptest! {
        #[test]
        fn path_derivative_is_the_target(seed in any::<u64>(), t in 0.0f64..0.99) {
            let mut rng = RngState::new(seed);
            let z: Tensor<f64> = rng.normal_tensor(vec![5, 3]);
            let e: Tensor<f64> = rng.normal_tensor(vec![5, 3]);
            let h = 1e-3;
            let (a, v) = flow_noise_and_target(&z, &e, t).unwrap();
            let (b, _) = flow_noise_and_target(&z, &e, t + h).unwrap();
            for i in 0..a.len() {
                prop_assert!(((b.data()[i] - a.data()[i]) / h - v.data()[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn full_mask_branches_agree(seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let l: Tensor<f64> = rng.uniform_tensor(vec![12, 5], 0.0, 2.0);
            let mask = Tensor::<f32>::ones(vec![3, 2, 2]);
            let (a, oa) = masked_gated_loss(&l, &mask, 0.0, &mut rng).unwrap();
            let (b, ob) = masked_gated_loss(&l, &mask, 1.0, &mut rng).unwrap();
            prop_assert!(oa.masked && !ob.masked);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn gate_endpoints_and_frequency() {
        let mut rng = RngState::new(1);
        assert!((0..1000).all(|_| !gate_draw(1.0, &mut rng)));
        assert!((0..1000).all(|_| gate_draw(0.0, &mut rng)));
        let hits = (0..10_000).filter(|_| gate_draw(0.2, &mut rng)).count();
        assert!((hits as f64 / 10_000.0 - 0.8).abs() <= 0.02, "{hits}");
    }

    #[test]
    fn masked_branch_normalizes_by_mask_mass() {
        let l = Tensor::from_fn(vec![4, 2], |i| i as f64);
        let mask = Tensor::new(vec![4], vec![0.0f32, 1.0, 0.5, 0.0]).unwrap();
        let (v, o) = masked_gated_loss(&l, &mask, 0.0, &mut RngState::new(2)).unwrap();
        // (2 + 3)·1 + (4 + 5)·0.5 over 1.5·2
        assert!(o.masked && !o.empty_mask);
        assert!((v - 9.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_falls_back_with_flag() {
        let l = Tensor::from_fn(vec![4, 2], |i| i as f64);
        let (v, o) = masked_gated_loss(&l, &Tensor::zeros(vec![4]), 0.0, &mut RngState::new(3)).unwrap();
        assert!(o.empty_mask);
        assert_eq!(v, 3.5);
    }

    #[test]
    fn masked_gradient_vanishes_off_mask() {
        let mut rng = RngState::new(4);
        let x: Tensor<f64> = rng.normal_tensor(vec![6, 3]);
        let mask = Tensor::new(vec![6], vec![0.0f32, 1.0, 0.25, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let sq = g.square(xv);
        let (l, _) = gated_reduce(&mut g, sq, &mask, true).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(xv).unwrap();
        for (tok, &m) in mask.data().iter().enumerate() {
            for c in 0..3 {
                let v = gr.data()[tok * 3 + c];
                assert_eq!(v == 0.0, m == 0.0 || g.value(xv).data()[tok * 3 + c] == 0.0);
            }
        }
    }

    fn example_bundle() -> ConditioningBundle {
        ConditioningBundle {
            audio: Some(AudioTokenSequence {
                data: Tensor::zeros(vec![4, 2]),
                samples_per_token: 1,
            }),
            identity: Some(Tensor::zeros(vec![4, 4, 3])),
            motion: MotionCoefficients::new(0.5, 0.5),
            reference: Some(Tensor::zeros(vec![2, 2])),
            scope: AudioScope::Clip,
        }
    }

    #[test]
    fn dropout_endpoints() {
        let b = example_bundle();
        let mut rng = RngState::new(5);
        let none = DropoutProbs { audio: 0.0, identity: 0.0, reference: 0.0 };
        assert_eq!(condition_dropout(&b, &none, &mut rng), b);
        let all = DropoutProbs { audio: 1.0, identity: 1.0, reference: 1.0 };
        let d = condition_dropout(&b, &all, &mut rng);
        assert!(d.audio.is_none() && d.identity.is_none() && d.reference.is_none());
        assert_eq!(d.motion, b.motion);
    }

    #[test]
    fn dropout_rates_and_independence() {
        let b = example_bundle();
        let probs = DropoutProbs { audio: 0.1, identity: 0.1, reference: 0.1 };
        let mut rng = RngState::new(6);
        let n = 10_000;
        let mut counts = [0usize; 3];
        let mut joint = [[0usize; 2]; 2];
        let mut joint_ir = [[0usize; 2]; 2];
        for _ in 0..n {
            let d = condition_dropout(&b, &probs, &mut rng);
            let flags = [d.audio.is_none(), d.identity.is_none(), d.reference.is_none()];
            for k in 0..3 {
                counts[k] += flags[k] as usize;
            }
            joint[flags[0] as usize][flags[1] as usize] += 1;
            joint_ir[flags[1] as usize][flags[2] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() <= 0.01, "{counts:?}");
        }
        // Chi-square test of independence, 1 dof; 6.635 is the 0.01 critical value.
        for table in [joint, joint_ir] {
            let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
            let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
            let mut chi = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let e = rows[i] as f64 * cols[j] as f64 / n as f64;
                    chi += (table[i][j] as f64 - e).powi(2) / e;
                }
            }
            assert!(chi < 6.635, "chi2 = {chi}");
        }
    }

    fn tiny_data(n: usize, params: &Params<f32>) -> Vec<TrainExample> {
        let cfg = DiTConfig::tiny();
        corpus_specs(&cfg, n, 9)
            .iter()
            .map(|s| TrainExample::from_sample(&generate_sample(&cfg, s).unwrap(), &cfg, params).unwrap())
            .collect()
    }

    fn tiny_trainer(lr: f32, batch: usize) -> (Trainer, Vec<TrainExample>) {
        let cfg = DiTConfig::tiny();
        let params = init_params(&cfg, &mut RngState::new(10)).unwrap();
        let data = tiny_data(4, &params);
        let train = TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            steps_clip: 3,
            steps_frame: 3,
            ..TrainConfig::default()
        };
        (Trainer::new(&cfg, &train, params).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut t, data) = tiny_trainer(0.0, 2);
        let before = t.params.clone();
        let r = t.train_step(&data, Stage::FrameLevel).unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
        assert_eq!(t.params, before);
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let run = || {
            let (mut t, data) = tiny_trainer(1e-3, 2);
            t.run(&data, None, |_| Ok(())).unwrap().iter().map(|r| r.loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    /// Mean loss over fixed `(t, ε)` draws, without dropout.
    fn held_loss(t: &Trainer, ex: &TrainExample) -> f64 {
        let mut rng = RngState::new(99);
        let mut total = 0.0;
        for k in 0..16 {
            let time = (k as f64 + 0.5) / 16.0;
            let eps: Tensor<f32> = rng.normal_tensor(ex.latents.shape().to_vec());
            let (zt, v) = flow_noise_and_target(&ex.latents, &eps, time).unwrap();
            let pred = crate::model::model_forward(&t.model, &t.params, &zt, time, &ex.bundle(AudioScope::Clip)).unwrap();
            total += pred.data().iter().zip(v.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / v.len() as f64;
        }
        total / 16.0
    }

    #[test]
    fn single_sample_overfits() {
        let (mut t, data) = tiny_trainer(1e-3, 1);
        let one = &data[..1];
        t.train.drop_audio = 0.0;
        t.train.drop_identity = 0.0;
        t.train.drop_reference = 0.0;
        let before = held_loss(&t, &one[0]);
        for _ in 0..50 {
            t.train_step(one, Stage::ClipLevel).unwrap();
        }
        let after = held_loss(&t, &one[0]);
        assert!(after < 0.9 * before, "{before} -> {after}");
    }

    #[test]
    fn frame_only_schedule_skips_clip_stage() {
        let (mut t, data) = tiny_trainer(1e-3, 1);
        t.train.steps_clip = 0;
        let mut boundaries = 0;
        let reports = t
            .run(&data, None, |_| {
                boundaries += 1;
                Ok(())
            })
            .unwrap();
        assert!(reports.iter().all(|r| r.stage == Stage::FrameLevel));
        assert_eq!(reports.len(), 3);
        assert_eq!(boundaries, 1);
    }

    #[test]
    fn default_schedule_is_four_to_one() {
        let c = TrainConfig::default();
        assert_eq!((c.steps_clip, c.steps_frame), (2000, 500));
        assert_eq!(c.steps_clip, 4 * c.steps_frame);
        assert_eq!((c.learning_rate, c.eta, c.drop_audio), (1e-4, 0.2, 0.1));
    }

    #[test]
    fn resume_from_stage_boundary_is_bit_exact() {
        let (mut full, data) = tiny_trainer(1e-3, 2);
        let (mut first, _) = tiny_trainer(1e-3, 2);
        let full_reports = full.run(&data, None, |_| Ok(())).unwrap();

        let mut saved = None;
        first.train.steps_frame = 0;
        first
            .run(&data, None, |c| {
                saved = Some(c.to_bytes()?);
                Ok(())
            })
            .unwrap();
        let ckpt = DiTCheckpoint::from_bytes(&saved.unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        resumed.train.steps_frame = 3;
        let tail = resumed.run(&data, None, |_| Ok(())).unwrap();
        assert_eq!(tail, full_reports[3..].to_vec());
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.adam, full.adam);
    }

    #[test]
    fn frozen_parameters_stay_fixed() {
        let (mut t, data) = tiny_trainer(1e-2, 2);
        let before = t.params.get("audio.proj.w").unwrap().clone();
        t.train_step(&data, Stage::ClipLevel).unwrap();
        assert_eq!(t.params.get("audio.proj.w").unwrap(), &before);
        assert_ne!(t.params.get("final.out.w").unwrap().data().iter().map(|x| x.abs()).sum::<f32>(), 0.0);
    }

    #[test]
    fn loss_log_is_one_json_record_per_step() {
        let (mut t, data) = tiny_trainer(1e-3, 1);
        let mut buf = Vec::new();
        t.run(&data, Some(&mut buf), |_| Ok(())).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        let r: LossReport = serde_json::from_str(lines[4]).unwrap();
        assert_eq!((r.step, r.stage), (4, Stage::FrameLevel));
    }
}
