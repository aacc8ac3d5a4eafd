//! Audio/video token correspondence, per-frame regrouping, equivalent
//! block masks and lip-mask projection onto the latent grid.

use crate::encoders::{AudioTokenSequence, LatentVideoTokens};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Contiguous split of `l` audio tokens over `f` latent frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioVideoMap {
    boundaries: Vec<usize>,
}

impl AudioVideoMap {
    pub fn frames(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn audio_len(&self) -> usize {
        *self.boundaries.last().expect("non-empty")
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Audio token range of frame `i`.
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }

    pub fn segment_len(&self, i: usize) -> usize {
        self.boundaries[i + 1] - self.boundaries[i]
    }

    /// Latent frame owning audio token `j`.
    pub fn frame_of(&self, j: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= j) - 1
    }
}

/// `boundaries[i] = round(i·l / f)`, halves rounded up.
pub fn segment_audio(l: usize, f: usize) -> Result<AudioVideoMap> {
    if f == 0 || l < f {
        return Err(Error::Input(format!("cannot split {l} audio tokens over {f} frames")));
    }
    let boundaries = (0..=f).map(|i| (2 * i * l + f) / (2 * f)).collect();
    Ok(AudioVideoMap { boundaries })
}

/// Visual tokens `[(h·w) × c]` of one latent frame with its audio segment `[l′ × c_a]`.
pub type FramePair<R> = (Tensor<R>, Tensor<R>);

fn check_map<R: Real>(video: &LatentVideoTokens<R>, audio: &AudioTokenSequence<R>, map: &AudioVideoMap) -> Result<()> {
    if map.frames() != video.f || map.audio_len() != audio.len() {
        return Err(Error::Input(format!(
            "map covers {} frames / {} audio tokens, inputs have {} / {}",
            map.frames(),
            map.audio_len(),
            video.f,
            audio.len()
        )));
    }
    Ok(())
}

fn take_rows<R: Real>(t: &Tensor<R>, range: std::ops::Range<usize>) -> Tensor<R> {
    let c = t.cols();
    Tensor::new(vec![range.len(), c], t.data()[range.start * c..range.end * c].to_vec()).expect("row slice")
}

pub fn reshape_frame_level<R: Real>(
    video: &LatentVideoTokens<R>,
    audio: &AudioTokenSequence<R>,
    map: &AudioVideoMap,
) -> Result<Vec<FramePair<R>>> {
    check_map(video, audio, map)?;
    let hw = video.h * video.w;
    Ok((0..video.f)
        .map(|i| (take_rows(&video.data, i * hw..(i + 1) * hw), take_rows(&audio.data, map.segment(i))))
        .collect())
}

/// Inverse of [`reshape_frame_level`]: concatenates the visual and audio halves.
pub fn flatten_frame_level<R: Real>(pairs: &[FramePair<R>]) -> Result<(Tensor<R>, Tensor<R>)> {
    let first = pairs.first().ok_or_else(|| Error::Input("no frames to flatten".into()))?;
    let (c, ca) = (first.0.cols(), first.1.cols());
    let mut vis = Vec::new();
    let mut aud = Vec::new();
    let (mut nv, mut na) = (0, 0);
    for (v, a) in pairs {
        if v.cols() != c || a.cols() != ca {
            return Err(Error::shape("flatten frame level", v.shape(), a.shape()));
        }
        vis.extend_from_slice(v.data());
        aud.extend_from_slice(a.data());
        nv += v.rows();
        na += a.rows();
    }
    Ok((Tensor::new(vec![nv, c], vis)?, Tensor::new(vec![na, ca], aud)?))
}

/// Additive mask `[(f·h·w) × l]`: 0 where the audio token belongs to the
/// visual token's frame, −∞ elsewhere.
pub fn block_mask<R: Real>(map: &AudioVideoMap, h: usize, w: usize) -> Tensor<R> {
    let (f, l, hw) = (map.frames(), map.audio_len(), h * w);
    let mut data = vec![R::neg_infinity(); f * hw * l];
    for i in 0..f {
        for row in i * hw..(i + 1) * hw {
            for j in map.segment(i) {
                data[row * l + j] = R::zero();
            }
        }
    }
    Tensor::new(vec![f * hw, l], data).expect("mask shape")
}

/// Binary pixel-space lip mask with its latent-space projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LipMask {
    /// `[F, H, W]`, entries 0 or 1.
    pub pixel: Tensor<f32>,
    /// `[f, h, w]`, entries in `[0, 1]`.
    pub latent: Tensor<f32>,
}

impl LipMask {
    pub fn from_pixel(pixel: Tensor<f32>, f: usize, h: usize, w: usize) -> Result<Self> {
        let latent = project_mask_trilinear(&pixel, f, h, w)?;
        Ok(Self { pixel, latent })
    }

    /// Fraction of latent mass covered.
    pub fn latent_coverage(&self) -> f64 {
        self.latent.mean().as_f64()
    }
}

/// Source taps and weights for resampling `n_in` samples to `n_out` cell centers.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling of a `[F, H, W]` grid at the centers of an
/// `f × h × w` grid (align-corners false, edge clamped).
pub fn project_mask_trilinear(pixel: &Tensor<f32>, f: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = pixel.shape();
    if s.len() != 3 || s[0] < f || s[1] < h || s[2] < w || f == 0 || h == 0 || w == 0 {
        return Err(Error::Input(format!("cannot project mask {s:?} onto {f}x{h}x{w}")));
    }
    let (tf, th, tw) = (linear_taps(s[0], f), linear_taps(s[1], h), linear_taps(s[2], w));
    let at = |a: usize, b: usize, c: usize| pixel.data()[(a * s[1] + b) * s[2] + c] as f64;
    let mut out = Vec::with_capacity(f * h * w);
    for &(a0, a1, wa) in &tf {
        for &(b0, b1, wb) in &th {
            for &(c0, c1, wc) in &tw {
                let mut v = 0.0;
                for (a, ka) in [(a0, 1.0 - wa), (a1, wa)] {
                    for (b, kb) in [(b0, 1.0 - wb), (b1, wb)] {
                        for (c, kc) in [(c0, 1.0 - wc), (c1, wc)] {
                            v += ka * kb * kc * at(a, b, c);
                        }
                    }
                }
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(vec![f, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{attention, RngState};
    use proptest::prelude::*;

    #[test]
    fn even_and_identity_segmentations() {
        assert_eq!(segment_audio(16, 4).unwrap().boundaries(), &[0, 4, 8, 12, 16]);
        let m = segment_audio(7, 7).unwrap();
        assert!((0..7).all(|i| m.segment_len(i) == 1));
    }

    #[test]
    fn uneven_segmentation_rounds_half_up() {
        // round(i·10/4) = round(0, 2.5, 5, 7.5, 10)
        let oracle: Vec<usize> = (0..=4).map(|i| (i as f64 * 10.0 / 4.0 + 0.5).floor() as usize).collect();
        assert_eq!(oracle, vec![0, 3, 5, 8, 10]);
        assert_eq!(segment_audio(10, 4).unwrap().boundaries(), &oracle[..]);
    }

    #[test]
    fn too_few_audio_tokens_is_an_input_error() {
        assert!(matches!(segment_audio(3, 4), Err(Error::Input(_))));
        assert!(matches!(segment_audio(3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn segments_partition_audio_exhaustively() {
        for l in 1..=64 {
            for f in 1..=l {
                let m = segment_audio(l, f).unwrap();
                assert_eq!(m.boundaries()[0], 0);
                assert_eq!(m.audio_len(), l);
                let mut owner = vec![usize::MAX; l];
                for i in 0..f {
                    assert!(m.segment_len(i) >= 1, "l={l} f={f} i={i}");
                    for j in m.segment(i) {
                        assert_eq!(owner[j], usize::MAX);
                        owner[j] = i;
                    }
                }
                assert!(owner.iter().enumerate().all(|(j, &o)| o == m.frame_of(j)));
            }
        }
    }

    fn tokens(rng: &mut RngState, f: usize, h: usize, w: usize, c: usize) -> LatentVideoTokens<f64> {
        LatentVideoTokens::new(f, h, w, rng.normal_tensor(vec![f * h * w, c])).unwrap()
    }

    fn audio(rng: &mut RngState, l: usize, c: usize) -> AudioTokenSequence<f64> {
        AudioTokenSequence {
            data: rng.normal_tensor(vec![l, c]),
            samples_per_token: 1,
        }
    }

    #[test]
    fn two_frame_pairing_matches_enumerated_layout() {
        let v = LatentVideoTokens::new(2, 1, 1, Tensor::from_fn(vec![2, 1], |i| i as f64)).unwrap();
        let a = AudioTokenSequence {
            data: Tensor::from_fn(vec![4, 1], |i| 10.0 + i as f64),
            samples_per_token: 1,
        };
        let pairs = reshape_frame_level(&v, &a, &segment_audio(4, 2).unwrap()).unwrap();
        assert_eq!(pairs[0].0.data(), &[0.0]);
        assert_eq!(pairs[0].1.data(), &[10.0, 11.0]);
        assert_eq!(pairs[1].0.data(), &[1.0]);
        assert_eq!(pairs[1].1.data(), &[12.0, 13.0]);
    }

    #[test]
    fn single_frame_pairs_with_whole_clip() {
        let mut rng = RngState::new(1);
        let (v, a) = (tokens(&mut rng, 1, 2, 3, 4), audio(&mut rng, 5, 2));
        let pairs = reshape_frame_level(&v, &a, &segment_audio(5, 1).unwrap()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, v.data);
        assert_eq!(pairs[0].1, a.data);
    }

    #[test]
    fn reshape_then_flatten_is_identity() {
        let mut rng = RngState::new(2);
        let (v, a) = (tokens(&mut rng, 4, 2, 2, 3), audio(&mut rng, 10, 2));
        let pairs = reshape_frame_level(&v, &a, &segment_audio(10, 4).unwrap()).unwrap();
        let (fv, fa) = flatten_frame_level(&pairs).unwrap();
        assert_eq!(fv, v.data);
        assert_eq!(fa, a.data);
    }

    #[test]
    fn inconsistent_map_is_an_input_error() {
        let mut rng = RngState::new(3);
        let (v, a) = (tokens(&mut rng, 4, 1, 1, 2), audio(&mut rng, 8, 2));
        assert!(matches!(
            reshape_frame_level(&v, &a, &segment_audio(9, 4).unwrap()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            reshape_frame_level(&v, &a, &segment_audio(8, 2).unwrap()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn degenerate_masks() {
        let m: Tensor<f64> = block_mask(&segment_audio(6, 1).unwrap(), 2, 2);
        assert!(m.data().iter().all(|&x| x == 0.0));
        let m: Tensor<f64> = block_mask(&segment_audio(3, 3).unwrap(), 1, 1);
        for i in 0..3 {
            for j in 0..3 {
                let x = m.data()[i * 3 + j];
                if i == j {
                    assert_eq!(x, 0.0);
                } else {
                    assert_eq!(x, f64::NEG_INFINITY);
                }
            }
        }
    }

    fn per_frame_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, map: &AudioVideoMap, hw: usize) -> Tensor<f64> {
        let mut out = Vec::new();
        for i in 0..map.frames() {
            let qi = take_rows(q, i * hw..(i + 1) * hw);
            let ki = take_rows(k, map.segment(i));
            let vi = take_rows(v, map.segment(i));
            out.extend_from_slice(attention(&qi, &ki, &vi, None).unwrap().data());
        }
        Tensor::new(vec![q.rows(), v.cols()], out).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn masked_clip_attention_equals_per_frame_attention(
            f in 1usize..6, extra in 0usize..8, h in 1usize..4, w in 1usize..4, d in 1usize..6, seed in any::<u64>()
        ) {
            let l = f + extra;
            let map = segment_audio(l, f).unwrap();
            let mut rng = RngState::new(seed);
            let q: Tensor<f64> = rng.normal_tensor(vec![f * h * w, d]);
            let k: Tensor<f64> = rng.normal_tensor(vec![l, d]);
            let v: Tensor<f64> = rng.normal_tensor(vec![l, d + 1]);
            let masked = attention(&q, &k, &v, Some(&block_mask(&map, h, w))).unwrap();
            let oracle = per_frame_oracle(&q, &k, &v, &map, h * w);
            prop_assert!(masked.max_abs_diff(&oracle) <= 1e-5);
        }

        #[test]
        fn projection_is_monotone_and_bounded(seed in any::<u64>(), f in 1usize..5, h in 1usize..5, w in 1usize..5) {
            let mut rng = RngState::new(seed);
            let (pf, ph, pw) = (f * 2 + 1, h * 3, w * 2 + 2);
            let small = Tensor::from_fn(vec![pf, ph, pw], |_| if rng.bernoulli(0.3) { 1.0f32 } else { 0.0 });
            let big = Tensor::from_fn(vec![pf, ph, pw], |i| if small.data()[i] == 1.0 || rng.bernoulli(0.3) { 1.0 } else { 0.0 });
            let a = project_mask_trilinear(&small, f, h, w).unwrap();
            let b = project_mask_trilinear(&big, f, h, w).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(*x <= *y);
                prop_assert!((0.0..=1.0).contains(x));
            }
        }
    }

    #[test]
    fn projection_preserves_constants() {
        for v in [0.0f32, 1.0] {
            let m = project_mask_trilinear(&Tensor::full(vec![8, 32, 32], v), 8, 4, 4).unwrap();
            assert!(m.data().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn block_of_ones_matches_hand_trilinear_weights() {
        // 6 → 3 per axis: centers sample 0.5, 2.5, 4.5, so the middle cell
        // blends indices 2 and 3 with weight 1/2 each.
        let cube = |lo: usize| {
            let mut t = Tensor::<f32>::zeros(vec![6, 6, 6]);
            for a in lo..lo + 2 {
                for b in lo..lo + 2 {
                    for c in lo..lo + 2 {
                        t.data_mut()[(a * 6 + b) * 6 + c] = 1.0;
                    }
                }
            }
            t
        };
        let out = project_mask_trilinear(&cube(2), 3, 3, 3).unwrap();
        assert_eq!(out.data()[13], 1.0);
        let out = project_mask_trilinear(&cube(3), 3, 3, 3).unwrap();
        // indices 3,4 are ones: the center reads 0.5·(x2) + 0.5·(x3) = 0.5 per axis.
        assert!((out.data()[13] - 0.125).abs() < 1e-7);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn upsampling_is_rejected() {
        assert!(matches!(
            project_mask_trilinear(&Tensor::zeros(vec![2, 4, 4]), 3, 2, 2),
            Err(Error::Input(_))
        ));
    }
}
