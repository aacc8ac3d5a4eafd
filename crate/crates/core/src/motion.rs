//! Motion-intensity coefficients from keypoint tracks and the network that
//! turns them into a conditioning vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier, Graph, Params, Real, RngState, Tensor, Var};

/// Length of the expansion axis averaged away at the end of [`motion_embed`].
pub const MOTION_EXPANSION: usize = 4;

/// Facial (`lip`) and body motion intensity, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionCoefficients {
    pub lip: f32,
    pub body: f32,
}

impl MotionCoefficients {
    /// Clamps both values into `[0, 1]`.
    pub fn new(lip: f32, body: f32) -> Self {
        Self {
            lip: lip.clamp(0.0, 1.0),
            body: body.clamp(0.0, 1.0),
        }
    }

    pub fn as_row<R: Real>(&self) -> Tensor<R> {
        Tensor::new(vec![1, 2], vec![R::of(self.lip as f64), R::of(self.body as f64)]).expect("1x2")
    }
}

/// `frames × points` tracks of normalized `(x, y)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    pub frames: usize,
    pub points: usize,
    /// Frame-major `(x, y)` pairs.
    pub coords: Vec<[f32; 2]>,
}

pub type LandmarkSequence = KeypointSequence;
pub type JointSequence = KeypointSequence;

impl KeypointSequence {
    pub fn new(frames: usize, points: usize, coords: Vec<[f32; 2]>) -> Result<Self> {
        if coords.len() != frames * points || points == 0 {
            return Err(Error::Input(format!(
                "{} coordinates for {frames} frames of {points} points",
                coords.len()
            )));
        }
        if coords.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("keypoint coordinates must lie in [0, 1]".into()));
        }
        Ok(Self { frames, points, coords })
    }

    pub fn at(&self, frame: usize, point: usize) -> [f32; 2] {
        self.coords[frame * self.points + point]
    }

    /// Mean over points and axes of the population variance along time.
    pub fn raw_variance(&self) -> Result<f64> {
        if self.frames < 2 {
            return Err(Error::Input(format!("need at least 2 frames, got {}", self.frames)));
        }
        let n = self.frames as f64;
        let mut total = 0.0;
        for p in 0..self.points {
            for axis in 0..2 {
                let xs = (0..self.frames).map(|f| self.at(f, p)[axis] as f64);
                let mean = xs.clone().sum::<f64>() / n;
                total += xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            }
        }
        Ok(total / (2 * self.points) as f64)
    }
}

/// Corpus range of raw variances used to map onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn from_raw(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !(max > min) {
            return Err(Error::Input("normalization needs at least two distinct values".into()));
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

pub fn compute_coefficient(seq: &KeypointSequence, norm: &NormStats) -> Result<f32> {
    if !(norm.max > norm.min) {
        return Err(Error::Input(format!("degenerate normalization [{}, {}]", norm.min, norm.max)));
    }
    Ok(norm.normalize(seq.raw_variance()?) as f32)
}

/// Fresh `motion.*` parameters; the expansion layer starts at zero.
pub fn init_motion_params<R: Real>(width: usize, rng: &mut RngState, params: &mut Params<R>) {
    let c = width;
    params.insert("motion.in.w", xavier(rng, 2, c));
    params.insert("motion.in.b", Tensor::zeros(vec![c]));
    params.insert("motion.hidden.w", xavier(rng, c, c));
    params.insert("motion.hidden.b", Tensor::zeros(vec![c]));
    params.insert("motion.res1.w", xavier(rng, c, c));
    params.insert("motion.res1.b", Tensor::zeros(vec![c]));
    params.insert("motion.res2.w", xavier(rng, c, c));
    params.insert("motion.res2.b", Tensor::zeros(vec![c]));
    params.insert("motion.expand.w", Tensor::zeros(vec![c, MOTION_EXPANSION * c]));
    params.insert("motion.expand.b", Tensor::zeros(vec![MOTION_EXPANSION * c]));
}

/// `[1×2] → [1×c]`: two-layer MLP, residual block, expansion to
/// `4 × c` and a mean over the expansion axis.
pub fn motion_embed_graph<R: Real>(g: &mut Graph<R>, params: &Params<R>, omega: Var) -> Result<Var> {
    let lin = |g: &mut Graph<R>, name: &str, x: Var| -> Result<Var> {
        let w = g.param(params, &format!("motion.{name}.w"))?;
        let b = g.param(params, &format!("motion.{name}.b"))?;
        g.linear(x, w, b)
    };
    let h = lin(g, "in", omega)?;
    let h = g.silu(h);
    let h = lin(g, "hidden", h)?;
    let h = g.silu(h);
    let r = lin(g, "res1", h)?;
    let r = g.silu(r);
    let r = lin(g, "res2", r)?;
    let h = g.add(h, r)?;
    let c = g.shape(h)[1];
    let e = lin(g, "expand", h)?;
    let e = g.reshape(e, &[MOTION_EXPANSION, c])?;
    Ok(g.mean_rows(e))
}

pub fn motion_embed<R: Real>(omega: MotionCoefficients, params: &Params<R>) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let w = g.constant(omega.as_row());
    let out = motion_embed_graph(&mut g, params, w)?;
    let c = g.shape(out)[1];
    g.value(out).clone().reshape(vec![c])
}

pub fn condition_timestep<R: Real>(t_embed: &Tensor<R>, m_embed: &Tensor<R>) -> Result<Tensor<R>> {
    if t_embed.shape() != m_embed.shape() {
        return Err(Error::shape("condition_timestep", t_embed.shape(), m_embed.shape()));
    }
    let data = t_embed.data().iter().zip(m_embed.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(t_embed.shape().to_vec(), data)
}
