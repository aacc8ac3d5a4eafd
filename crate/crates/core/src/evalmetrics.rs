//! Proxy metrics for lip sync, identity consistency and subject/background
//! dynamics, computed against generator ground truth.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::DiTConfig;
use crate::encoders::{encode_identity, PixelVideo};
use crate::error::{Error, Result};
use crate::numerics::{Params, Tensor};

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    fn check(&self, video: &PixelVideo) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > video.height() || self.left + self.width > video.width() {
            return Err(Error::Input(format!(
                "region {self:?} outside {}x{} frame",
                video.height(),
                video.width()
            )));
        }
        Ok(())
    }
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let mean = |s: &[f32]| s[..n].iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] as f64 - ma, b[i] as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 1e-20 || sbb <= 1e-20 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncScore {
    pub value: f64,
    /// Set when either series is constant; `value` is then 0.
    pub degenerate: bool,
}

/// Mean intensity inside `region` for every frame.
pub fn region_intensity(video: &PixelVideo, region: &Region) -> Result<Vec<f32>> {
    region.check(video)?;
    Ok((0..video.frames())
        .map(|f| {
            let mut acc = 0.0f64;
            for y in region.top..region.top + region.height {
                for x in region.left..region.left + region.width {
                    acc += video.intensity(f, y, x) as f64;
                }
            }
            (acc / (region.height * region.width) as f64) as f32
        })
        .collect())
}

/// Correlation of mouth-region brightness with loudness. `envelope` is either
/// one value per frame or a sample-rate envelope averaged down to frames.
pub fn sync_proxy(video: &PixelVideo, envelope: &[f32], mouth: &Region) -> Result<SyncScore> {
    let nf = video.frames();
    if nf < 3 {
        return Err(Error::Input(format!("sync needs at least 3 frames, got {nf}")));
    }
    let per_frame = if envelope.len() == nf {
        envelope.to_vec()
    } else if envelope.len() >= nf && envelope.len() % nf == 0 {
        crate::synthdata::frame_envelope(envelope, nf)
    } else {
        return Err(Error::Input(format!("envelope of {} cannot be split over {nf} frames", envelope.len())));
    };
    let mouth_series = region_intensity(video, mouth)?;
    Ok(match pearson(&mouth_series, &per_frame) {
        Some(r) => SyncScore { value: r, degenerate: false },
        None => SyncScore { value: 0.0, degenerate: true },
    })
}

/// `1 − cos(a, b)` over flattened vectors, floored at 0.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return if aa == bb { 0.0 } else { 1.0 };
    }
    (1.0 - ab / (aa.sqrt() * bb.sqrt())).max(0.0)
}

/// Mean cosine distance between the identity tokens of every frame's face
/// crop and those of `reference_crop`.
pub fn identity_proxy(video: &PixelVideo, reference_crop: &Tensor<f32>, cfg: &DiTConfig, params: &Params<f32>) -> Result<f64> {
    let reference = encode_identity(reference_crop, cfg, params)?;
    let mut total = 0.0;
    for f in 0..video.frames() {
        let crop = video.crop(f, cfg.crop_top, cfg.crop_left, cfg.crop_size)?;
        let tokens = encode_identity(&crop, cfg, params)?;
        total += cosine_distance(tokens.data.data(), reference.data.data());
    }
    Ok(total / video.frames() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    /// Mean absolute inter-frame change inside the foreground.
    pub sd: f64,
    /// Same outside the foreground.
    pub bd: f64,
}

/// Inter-frame change split by a static `[H, W]` foreground mask (nonzero = subject).
pub fn dynamics_proxy(video: &PixelVideo, foreground: &Tensor<f32>) -> Result<Dynamics> {
    let (nf, nh, nw) = (video.frames(), video.height(), video.width());
    if nf < 2 {
        return Err(Error::Input("dynamics need at least 2 frames".into()));
    }
    if foreground.shape() != [nh, nw] {
        return Err(Error::shape("foreground mask", foreground.shape(), &[nh, nw]));
    }
    let (mut fg, mut bg) = (0.0f64, 0.0f64);
    let (mut nfg, mut nbg) = (0usize, 0usize);
    for f in 1..nf {
        for y in 0..nh {
            for x in 0..nw {
                let (a, b) = (video.pixel(f, y, x), video.pixel(f - 1, y, x));
                let d = (0..3).map(|k| (a[k] - b[k]).abs() as f64).sum::<f64>() / 3.0;
                if foreground.data()[y * nw + x] != 0.0 {
                    fg += d;
                    nfg += 1;
                } else {
                    bg += d;
                    nbg += 1;
                }
            }
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(Dynamics {
        sd: avg(fg, nfg),
        bd: avg(bg, nbg),
    })
}

/// Averages over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub sync_r: f64,
    pub id_err: f64,
    pub sd: f64,
    pub bd: f64,
    /// Samples whose sync score was degenerate.
    pub sync_degenerate: usize,
}

/// All proxies for one generated clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub sync: SyncScore,
    pub id_err: f64,
    pub dynamics: Dynamics,
}

/// Ground truth a generated clip is scored against.
#[derive(Clone, Copy, Debug)]
pub struct ClipTruth<'a> {
    pub envelope: &'a [f32],
    pub mouth: &'a Region,
    pub reference_crop: &'a Tensor<f32>,
    pub foreground: &'a Tensor<f32>,
}

pub fn evaluate_clip(video: &PixelVideo, truth: &ClipTruth<'_>, cfg: &DiTConfig, params: &Params<f32>) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        sync: sync_proxy(video, truth.envelope, truth.mouth)?,
        id_err: identity_proxy(video, truth.reference_crop, cfg, params)?,
        dynamics: dynamics_proxy(video, truth.foreground)?,
    })
}

impl MetricReport {
    /// Means over clips; degenerate sync scores count as 0.
    pub fn from_clips(clips: &[ClipMetrics]) -> Self {
        let n = clips.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        Self {
            samples: clips.len(),
            sync_r: mean(&|c| c.sync.value),
            id_err: mean(&|c| c.id_err),
            sd: mean(&|c| c.dynamics.sd),
            bd: mean(&|c| c.dynamics.bd),
            sync_degenerate: clips.iter().filter(|c| c.sync.degenerate).count(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10}", "metric", "value")?;
        writeln!(f, "{:<10} {:>10}", "samples", self.samples)?;
        writeln!(f, "{:<10} {:>10.4}", "sync_r", self.sync_r)?;
        writeln!(f, "{:<10} {:>10.4}", "id_err", self.id_err)?;
        writeln!(f, "{:<10} {:>10.4}", "sd", self.sd)?;
        write!(f, "{:<10} {:>10.4}", "bd", self.bd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::init_encoder_params;
    use crate::numerics::RngState;

    const MOUTH: Region = Region {
        top: 2,
        left: 2,
        height: 2,
        width: 3,
    };

    fn video_with_mouth(values: &[f32]) -> PixelVideo {
        let mut v = PixelVideo::zeros(values.len(), 8, 8);
        for (f, &val) in values.iter().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    let c = if MOUTH.contains(y, x) { val } else { 0.3 };
                    v.set_pixel(f, y, x, [c; 3]);
                }
            }
        }
        v
    }

    #[test]
    fn perfect_and_inverted_sync() {
        let env = [0.1, 0.9, 0.4, 0.7, 0.2, 0.5];
        let r = sync_proxy(&video_with_mouth(&env), &env, &MOUTH).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9 && !r.degenerate);
        let neg: Vec<f32> = env.iter().map(|v| 1.0 - v).collect();
        let r = sync_proxy(&video_with_mouth(&neg), &env, &MOUTH).unwrap();
        assert!((r.value + 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let r = sync_proxy(&video_with_mouth(&[0.5; 5]), &[0.1, 0.2, 0.3, 0.4, 0.5], &MOUTH).unwrap();
        assert_eq!((r.value, r.degenerate), (0.0, true));
    }

    #[test]
    fn sync_errors() {
        let v = video_with_mouth(&[0.1, 0.2]);
        assert!(sync_proxy(&v, &[0.1, 0.2], &MOUTH).is_err());
        let v = video_with_mouth(&[0.1, 0.2, 0.3]);
        let outside = Region { top: 7, left: 0, height: 2, width: 2 };
        assert!(matches!(sync_proxy(&v, &[0.0, 1.0, 0.5], &outside), Err(Error::Input(_))));
    }

    #[test]
    fn independent_series_rarely_correlate() {
        // Null distribution: |r| for 64 independent uniform pairs stays small.
        let trials = 400;
        let mut small = 0;
        for seed in 0..trials {
            let mut rng = RngState::new(seed);
            let a: Vec<f32> = (0..64).map(|_| rng.uniform() as f32).collect();
            let b: Vec<f32> = (0..64).map(|_| rng.uniform() as f32).collect();
            let r = sync_proxy(&video_with_mouth(&a), &b, &MOUTH).unwrap();
            if r.value.abs() < 0.3 {
                small += 1;
            }
        }
        assert!(small as f64 / trials as f64 >= 0.95, "{small}/{trials}");
    }

    #[test]
    fn sync_accepts_sample_rate_envelope() {
        let env = [0.1f32, 0.9, 0.4];
        let fine: Vec<f32> = env.iter().flat_map(|&v| [v, v, v, v]).collect();
        let r = sync_proxy(&video_with_mouth(&env), &fine, &MOUTH).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6);
    }

    fn enc_params(cfg: &DiTConfig) -> Params<f32> {
        let mut p = Params::new();
        init_encoder_params(cfg, &mut RngState::new(1), &mut p);
        p
    }

    #[test]
    fn repeated_reference_has_zero_identity_error() {
        let cfg = DiTConfig::tiny();
        let p = enc_params(&cfg);
        let mut rng = RngState::new(2);
        let frame = PixelVideo::new(1, 8, 8, (0..192).map(|_| rng.uniform() as f32).collect()).unwrap();
        let v = frame.repeat_frame(4);
        let crop = frame.crop(0, cfg.crop_top, cfg.crop_left, cfg.crop_size).unwrap();
        assert!(identity_proxy(&v, &crop, &cfg, &p).unwrap() < 1e-6);
    }

    #[test]
    fn cosine_distance_is_symmetric() {
        let mut rng = RngState::new(3);
        let a: Vec<f32> = (0..20).map(|_| rng.normal() as f32).collect();
        let b: Vec<f32> = (0..20).map(|_| rng.normal() as f32).collect();
        assert_eq!(cosine_distance(&a, &b), cosine_distance(&b, &a));
        assert!(cosine_distance(&a, &a) < 1e-12);
    }

    fn blob_video(frames: usize, step: f32) -> (PixelVideo, Tensor<f32>) {
        // Soft blob translating horizontally inside a fixed foreground band.
        let mut v = PixelVideo::zeros(frames, 16, 16);
        for f in 0..frames {
            let cx = 6.0 + step * f as f32;
            for y in 0..16 {
                for x in 0..16 {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - 8.0).powi(2)) / 8.0;
                    v.set_pixel(f, y, x, [(-d).exp(); 3]);
                }
            }
        }
        let fg = Tensor::from_fn(vec![16, 16], |_| 1.0);
        (v, fg)
    }

    #[test]
    fn static_video_has_no_dynamics() {
        let (v, fg) = blob_video(4, 0.0);
        assert_eq!(dynamics_proxy(&v, &fg).unwrap(), Dynamics { sd: 0.0, bd: 0.0 });
    }

    #[test]
    fn foreground_only_motion() {
        let mut v = PixelVideo::zeros(3, 4, 4);
        v.set_pixel(1, 1, 1, [1.0; 3]);
        let fg = Tensor::from_fn(vec![4, 4], |i| if i == 5 { 1.0 } else { 0.0 });
        let d = dynamics_proxy(&v, &fg).unwrap();
        assert_eq!(d.bd, 0.0);
        assert!(d.sd > 0.0);
    }

    #[test]
    fn subject_dynamics_scale_linearly_with_small_displacements() {
        // For sub-pixel steps the frame difference is ≈ step·|∂I/∂x|.
        let (v1, fg) = blob_video(4, 0.01);
        let (v2, _) = blob_video(4, 0.02);
        let (v4, _) = blob_video(4, 0.04);
        let s1 = dynamics_proxy(&v1, &fg).unwrap().sd;
        let s2 = dynamics_proxy(&v2, &fg).unwrap().sd;
        let s4 = dynamics_proxy(&v4, &fg).unwrap().sd;
        assert!((s2 / s1 - 2.0).abs() < 0.02, "{}", s2 / s1);
        assert!((s4 / s1 - 4.0).abs() < 0.08, "{}", s4 / s1);
    }

    #[test]
    fn metrics_ignore_brightness_offsets() {
        let env = [0.1, 0.9, 0.4, 0.7];
        let v = video_with_mouth(&env);
        let mut shifted = v.clone();
        shifted.data_mut().iter_mut().for_each(|x| *x += 0.05);
        let a = sync_proxy(&v, &env, &MOUTH).unwrap().value;
        let b = sync_proxy(&shifted, &env, &MOUTH).unwrap().value;
        assert!((a - b).abs() < 1e-6);
        let fg = Tensor::from_fn(vec![8, 8], |i| if i < 20 { 1.0 } else { 0.0 });
        let (da, db) = (dynamics_proxy(&v, &fg).unwrap(), dynamics_proxy(&shifted, &fg).unwrap());
        assert!((da.sd - db.sd).abs() < 1e-6 && (da.bd - db.bd).abs() < 1e-6);
    }

    #[test]
    fn dynamics_are_area_weighted_additive() {
        let mut rng = RngState::new(4);
        let v = PixelVideo::new(3, 6, 6, (0..3 * 36 * 3).map(|_| rng.uniform() as f32).collect()).unwrap();
        let fg = Tensor::from_fn(vec![6, 6], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let all = Tensor::from_fn(vec![6, 6], |_| 1.0);
        let d = dynamics_proxy(&v, &fg).unwrap();
        let total = dynamics_proxy(&v, &all).unwrap().sd;
        let a_fg = 12.0 / 36.0;
        assert!((total - (a_fg * d.sd + (1.0 - a_fg) * d.bd)).abs() < 1e-9);
    }

    #[test]
    fn report_renders_table_and_json() {
        let r = MetricReport {
            samples: 3,
            sync_r: 0.5,
            id_err: 0.1,
            sd: 0.02,
            bd: 0.01,
            sync_degenerate: 0,
        };
        assert!(r.to_string().contains("sync_r"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
