//! Procedural talking-portrait clips with exact ground truth: an identity
//! coloured head whose mouth opens with a synthetic loudness envelope, body
//! and face jitter scaled by the motion coefficients, and a drifting
//! background grating.
//!
//! Layout coordinates are given for a 32×32 frame and scaled to the
//! configured size.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DiTConfig;
use crate::encoders::PixelVideo;
use crate::error::{Error, Result};
use crate::evalmetrics::Region;
use crate::motion::{KeypointSequence, MotionCoefficients};
use crate::numerics::{RngState, Tensor};

pub const IDENTITIES: usize = 32;
pub const LANDMARKS: usize = 12;
pub const JOINTS: usize = 5;
const SUPERSAMPLE: usize = 4;

const TAG_ENVELOPE: u64 = 1;
const TAG_BACKGROUND: u64 = 2;
const TAG_JITTER: u64 = 3;
const TAG_CORPUS: u64 = 4;

const HEAD_CENTER: (f32, f32) = (14.0, 19.5);
const HEAD_RADII: (f32, f32) = (13.5, 10.5);
const EYE_ROW: f32 = 9.0;
const EYE_COLS: [f32; 2] = [15.5, 23.5];
const BROW_ROW: f32 = 6.0;
const MOUTH_TOP: f32 = 18.0;
const MOUTH_COLS: (f32, f32) = (16.5, 22.5);
const MOUTH_MAX_OPEN: f32 = 4.0;
const TORSO_TOP: f32 = 26.0;
const TORSO_COLS: (f32, f32) = (6.0, 33.0);
const BODY_JITTER: f32 = 1.0;
const FACE_JITTER: f32 = 0.75;
const BROW_RAISE: f32 = 1.5;
const DRIFT_SPEED: f32 = 1.5;
const MOUTH_COLOR: [f32; 3] = [0.95, 0.95, 0.95];
const EYE_COLOR: [f32; 3] = [0.08, 0.08, 0.12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Grating direction in radians.
    pub angle: f32,
    /// Cycles per pixel.
    pub frequency: f32,
    pub phase: f32,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub identity: usize,
    pub omega_l: f32,
    pub omega_b: f32,
    pub envelope: Vec<f32>,
    pub background: Background,
}

impl SceneSpec {
    /// Draws envelope and background from `seed`.
    pub fn random(cfg: &DiTConfig, seed: u64, identity: usize, omega_l: f32, omega_b: f32) -> Self {
        let rng = RngState::new(seed);
        Self {
            seed,
            identity: identity % IDENTITIES,
            omega_l: omega_l.clamp(0.0, 1.0),
            omega_b: omega_b.clamp(0.0, 1.0),
            envelope: random_envelope(&mut rng.derive(TAG_ENVELOPE, 0), cfg.envelope_len()),
            background: random_background(&mut rng.derive(TAG_BACKGROUND, 0)),
        }
    }

    pub fn motion(&self) -> MotionCoefficients {
        MotionCoefficients::new(self.omega_l, self.omega_b)
    }
}

/// Ornstein–Uhlenbeck walk, smoothed by a moving average and rescaled to `[0, 1]`.
pub fn random_envelope(rng: &mut RngState, len: usize) -> Vec<f32> {
    const THETA: f64 = 0.04;
    const SIGMA: f64 = 0.25;
    const WINDOW: usize = 9;
    let mut x = rng.normal();
    let walk: Vec<f64> = (0..len + WINDOW)
        .map(|_| {
            x += -THETA * x + SIGMA * rng.normal();
            x
        })
        .collect();
    let smooth: Vec<f64> = (0..len)
        .map(|i| walk[i..i + WINDOW].iter().sum::<f64>() / WINDOW as f64)
        .collect();
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    smooth.iter().map(|&v| ((v - lo) / span) as f32).collect()
}

fn random_background(rng: &mut RngState) -> Background {
    let mut color = || {
        let base = rng.uniform_range(0.15, 0.45);
        [0, 1, 2].map(|_| (base + rng.uniform_range(-0.08, 0.08)) as f32)
    };
    let (color_a, color_b) = (color(), color());
    Background {
        angle: rng.uniform_range(0.0, std::f64::consts::PI) as f32,
        frequency: rng.uniform_range(0.08, 0.2) as f32,
        phase: rng.uniform_range(0.0, std::f64::consts::TAU) as f32,
        color_a,
        color_b,
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Skin colour of an identity; every channel is at most 0.7.
pub fn skin_color(identity: usize) -> [f32; 3] {
    hsv(identity as f32 / IDENTITIES as f32, 0.55, 0.7)
}

fn shirt_color(identity: usize) -> [f32; 3] {
    hsv(identity as f32 / IDENTITIES as f32 + 0.5, 0.5, 0.55)
}

fn hair_color(identity: usize) -> [f32; 3] {
    hsv(identity as f32 / IDENTITIES as f32 + 0.25, 0.6, 0.3)
}

/// Per-frame mean of an envelope split into `frames` equal chunks.
pub fn frame_envelope(envelope: &[f32], frames: usize) -> Vec<f32> {
    let n = envelope.len() / frames;
    envelope
        .chunks_exact(n)
        .take(frames)
        .map(|c| c.iter().sum::<f32>() / n as f32)
        .collect()
}

/// Per-frame pose, in 32×32 layout units.
#[derive(Clone, Copy, Debug)]
struct Pose {
    body: (f32, f32),
    face: (f32, f32),
    brow: f32,
    open: f32,
    drift: f32,
}

fn poses(spec: &SceneSpec, frames: usize) -> Vec<Pose> {
    let mut rng = RngState::new(spec.seed).derive(TAG_JITTER, 0);
    let env = frame_envelope(&spec.envelope, frames);
    (0..frames)
        .map(|f| {
            let mut u = || rng.uniform_range(-1.0, 1.0) as f32;
            let (by, bx, fy, fx, brow) = (u(), u(), u(), u(), u());
            Pose {
                body: (spec.omega_b * BODY_JITTER * by, spec.omega_b * BODY_JITTER * bx),
                face: (spec.omega_l * FACE_JITTER * fy, spec.omega_l * FACE_JITTER * fx),
                brow: spec.omega_l * BROW_RAISE * 0.5 * (1.0 + brow),
                open: MOUTH_MAX_OPEN * env[f],
                drift: spec.omega_b * DRIFT_SPEED * f as f32,
            }
        })
        .collect()
}

fn in_rect(y: f32, x: f32, top: f32, bottom: f32, left: f32, right: f32) -> bool {
    y >= top && y < bottom && x >= left && x < right
}

fn mouth_rect(p: &Pose) -> (f32, f32, f32, f32) {
    let (dy, dx) = (p.body.0 + p.face.0, p.body.1 + p.face.1);
    (MOUTH_TOP + dy, MOUTH_TOP + 1.0 + p.open + dy, MOUTH_COLS.0 + dx, MOUTH_COLS.1 + dx)
}

/// Colour and foreground flag at layout point `(y, x)`.
fn shade(spec: &SceneSpec, p: &Pose, y: f32, x: f32) -> ([f32; 3], bool) {
    let id = spec.identity;
    let (by, bx) = p.body;
    let (fy, fx) = (by + p.face.0, bx + p.face.1);
    let (cy, cx) = (HEAD_CENTER.0 + by, HEAD_CENTER.1 + bx);
    let ry = HEAD_RADII.0;
    let rx = HEAD_RADII.1 + 0.25 * ((id % 5) as f32 - 2.0);
    let in_head = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0;
    if in_head {
        let (t, b, l, r) = mouth_rect(p);
        if in_rect(y, x, t, b, l, r) {
            return (MOUTH_COLOR, true);
        }
        for ec in EYE_COLS {
            if in_rect(y, x, EYE_ROW - 1.0 + fy, EYE_ROW + 1.0 + fy, ec - 1.0 + fx, ec + 1.0 + fx) {
                return (EYE_COLOR, true);
            }
            let top = BROW_ROW - p.brow + fy;
            if in_rect(y, x, top - 0.75, top + 0.75, ec - 2.0 + fx, ec + 2.0 + fx) {
                return (hair_color(id), true);
            }
        }
        return (skin_color(id), true);
    }
    if in_rect(y, x, TORSO_TOP + by, f32::INFINITY, TORSO_COLS.0 + bx, TORSO_COLS.1 + bx) {
        return (shirt_color(id), true);
    }
    let bg = &spec.background;
    let s = (x * bg.angle.cos() + y * bg.angle.sin() + p.drift) * bg.frequency * std::f32::consts::TAU + bg.phase;
    let w = 0.5 + 0.5 * s.sin();
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = bg.color_a[k] * (1.0 - w) + bg.color_b[k] * w;
    }
    (c, false)
}

/// One rendered clip with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub video: PixelVideo,
    /// Constant-over-time box around every mouth position, `[F, H, W]`.
    pub lip_mask: Tensor<f32>,
    pub landmarks: KeypointSequence,
    pub joints: KeypointSequence,
    /// Face crop of the first frame, `[S, S, 3]`.
    pub face_crop: Tensor<f32>,
    /// Pixels covered by the subject in any frame, `[H, W]`.
    pub foreground: Tensor<f32>,
    /// Mouth box in pixels.
    pub mouth_region: Region,
}

impl Sample {
    pub fn frame_envelope(&self) -> Vec<f32> {
        frame_envelope(&self.spec.envelope, self.video.frames())
    }
}

pub fn generate_sample(cfg: &DiTConfig, spec: &SceneSpec) -> Result<Sample> {
    cfg.validate()?;
    if spec.envelope.len() < cfg.envelope_len() {
        return Err(Error::Input(format!(
            "envelope has {} samples, need {}",
            spec.envelope.len(),
            cfg.envelope_len()
        )));
    }
    let (nf, nh, nw) = (cfg.frames, cfg.height, cfg.width);
    let (sy, sx) = (32.0 / nh as f32, 32.0 / nw as f32);
    let poses = poses(spec, nf);
    let mut video = PixelVideo::zeros(nf, nh, nw);
    let mut fg = vec![0.0f32; nh * nw];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for (f, pose) in poses.iter().enumerate() {
        for py in 0..nh {
            for px in 0..nw {
                let mut acc = [0.0f32; 3];
                let mut any_fg = false;
                for sy_i in 0..SUPERSAMPLE {
                    for sx_i in 0..SUPERSAMPLE {
                        let y = (py as f32 + (sy_i as f32 + 0.5) / SUPERSAMPLE as f32) * sy;
                        let x = (px as f32 + (sx_i as f32 + 0.5) / SUPERSAMPLE as f32) * sx;
                        let (c, is_fg) = shade(spec, pose, y, x);
                        any_fg |= is_fg;
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                video.set_pixel(f, py, px, acc.map(|v| v * inv));
                if any_fg {
                    fg[py * nw + px] = 1.0;
                }
            }
        }
    }

    let (mut top, mut bottom, mut left, mut right) = (f32::INFINITY, f32::NEG_INFINITY, f32::INFINITY, f32::NEG_INFINITY);
    for p in &poses {
        let (t, b, l, r) = mouth_rect(p);
        top = top.min(t);
        bottom = bottom.max(b);
        left = left.min(l);
        right = right.max(r);
    }
    let clampy = |v: f32| (v.max(0.0) as usize).min(nh);
    let clampx = |v: f32| (v.max(0.0) as usize).min(nw);
    let (r0, r1) = (clampy((top / sy).floor()), clampy((bottom / sy).ceil()));
    let (c0, c1) = (clampx((left / sx).floor()), clampx((right / sx).ceil()));
    let mouth_region = Region {
        top: r0,
        left: c0,
        height: (r1 - r0).max(1),
        width: (c1 - c0).max(1),
    };
    let lip_mask = Tensor::from_fn(vec![nf, nh, nw], |i| {
        let (y, x) = ((i / nw) % nh, i % nw);
        if mouth_region.contains(y, x) {
            1.0
        } else {
            0.0
        }
    });

    let norm = |y: f32, x: f32| [(x / 32.0).clamp(0.0, 1.0), (y / 32.0).clamp(0.0, 1.0)];
    let mut lm = Vec::with_capacity(nf * LANDMARKS);
    let mut jt = Vec::with_capacity(nf * JOINTS);
    for p in &poses {
        let (by, bx) = p.body;
        let (fy, fx) = (by + p.face.0, bx + p.face.1);
        let (cy, cx) = (HEAD_CENTER.0 + by, HEAD_CENTER.1 + bx);
        let (ry, rx) = HEAD_RADII;
        let (mt, mb, ml, mr) = mouth_rect(p);
        lm.extend([
            norm(cy - ry, cx),
            norm(cy + ry, cx),
            norm(cy, cx - rx),
            norm(cy, cx + rx),
            norm(EYE_ROW + fy, EYE_COLS[0] + fx),
            norm(EYE_ROW + fy, EYE_COLS[1] + fx),
            norm(BROW_ROW - p.brow + fy, EYE_COLS[0] + fx),
            norm(BROW_ROW - p.brow + fy, EYE_COLS[1] + fx),
            norm((mt + mb) / 2.0, ml),
            norm((mt + mb) / 2.0, mr),
            norm(mt, (ml + mr) / 2.0),
            norm(mb, (ml + mr) / 2.0),
        ]);
        jt.extend([
            norm(cy, cx),
            norm(TORSO_TOP + by, cx),
            norm(TORSO_TOP + 2.0 + by, TORSO_COLS.0 + 4.0 + bx),
            norm(TORSO_TOP + 2.0 + by, TORSO_COLS.1 - 5.0 + bx),
            norm(30.0 + by, cx),
        ]);
    }
    let face_crop = video.crop(0, cfg.crop_top, cfg.crop_left, cfg.crop_size)?;
    Ok(Sample {
        spec: spec.clone(),
        lip_mask,
        landmarks: KeypointSequence::new(nf, LANDMARKS, lm)?,
        joints: KeypointSequence::new(nf, JOINTS, jt)?,
        face_crop,
        foreground: Tensor::new(vec![nh, nw], fg)?,
        mouth_region,
        video,
    })
}

/// `n` specs cycling through identities with uniformly drawn motion coefficients.
pub fn corpus_specs(cfg: &DiTConfig, n: usize, seed: u64) -> Vec<SceneSpec> {
    let root = RngState::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.derive(TAG_CORPUS, i as u64);
            let sample_seed = rng.next_u64();
            let (wl, wb) = (rng.uniform() as f32, rng.uniform() as f32);
            SceneSpec::random(cfg, sample_seed, i % IDENTITIES, wl, wb)
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.jsonl";

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub file: String,
    pub sha256: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub crop_top: usize,
    pub crop_left: usize,
    pub mouth_region: Region,
    pub spec: SceneSpec,
}

fn keypoints_tensor(k: &KeypointSequence) -> Tensor<f32> {
    Tensor::new(vec![k.frames, k.points, 2], k.coords.iter().flatten().copied().collect()).expect("keypoints")
}

fn keypoints_from(t: &Tensor<f32>) -> Result<KeypointSequence> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::format("keypoints", format!("shape {s:?}")));
    }
    KeypointSequence::new(s[0], s[1], t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Sample payload: video, lip mask, landmarks, joints, face crop, foreground,
/// each as a tensor record.
fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut buf = Vec::new();
    for t in [
        s.video.tensor(),
        &s.lip_mask,
        &keypoints_tensor(&s.landmarks),
        &keypoints_tensor(&s.joints),
        &s.face_crop,
        &s.foreground,
    ] {
        t.write_to(&mut buf).expect("in-memory write");
    }
    buf
}

fn decode_sample(bytes: &[u8], rec: &ManifestRecord) -> Result<Sample> {
    let mut r = bytes;
    let mut next = || Tensor::<f32>::read_from(&mut r);
    let video = PixelVideo::from_tensor(next()?)?;
    let lip_mask = next()?;
    let landmarks = keypoints_from(&next()?)?;
    let joints = keypoints_from(&next()?)?;
    let face_crop = next()?;
    let foreground = next()?;
    Ok(Sample {
        spec: rec.spec.clone(),
        video,
        lip_mask,
        landmarks,
        joints,
        face_crop,
        foreground,
        mouth_region: rec.mouth_region,
    })
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `samples` as `sample_NNNNN.bin` files plus a JSON-lines manifest.
pub fn write_dataset(samples: &[Sample], cfg: &DiTConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = BufWriter::new(file);
    for (index, s) in samples.iter().enumerate() {
        let name = format!("sample_{index:05}.bin");
        let bytes = encode_sample(s);
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let rec = ManifestRecord {
            index,
            file: name,
            sha256: sha_hex(&bytes),
            frames: s.video.frames(),
            height: s.video.height(),
            width: s.video.width(),
            crop_top: cfg.crop_top,
            crop_left: cfg.crop_left,
            mouth_region: s.mouth_region,
            spec: s.spec.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format("manifest", e.to_string()))?;
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let mut text = String::new();
    BufReader::new(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)
        .read_to_string(&mut text)
        .map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads every sample, verifying checksums.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .iter()
        .map(|rec| {
            let path = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha_hex(&bytes) != rec.sha256 {
                return Err(Error::Checksum {
                    sample: rec.index,
                    path: path.clone(),
                });
            }
            decode_sample(&bytes, rec)
        })
        .collect()
}
