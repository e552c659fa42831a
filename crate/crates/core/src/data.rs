//! Synthetic video clips and minibatch sampling at arbitrary shapes.
//!
//! An HR clip is a periodic random texture (eight sinusoids plus smooth noise)
//! translated by a constant integer velocity with wrap-around. The LR clip is
//! the exact 4×4 box mean of the HR clip, so every aligned LR crop is the box
//! mean of the matching HR crop.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::MinibatchShape;
use crate::tensor::{Real, Tensor, TensorError};

pub const SCALE: usize = crate::model::SCALE;
const WAVES: usize = 8;
const MAX_SPEED: i64 = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid clip geometry: {0}")]
    Geometry(String),
    #[error("crop {crop_h}x{crop_w} does not fit in {frame_h}x{frame_w} LR frames")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        frame_h: usize,
        frame_w: usize,
    },
    #[error("invalid minibatch request: {0}")]
    Request(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// HR/LR frame pair sequences. HR is T×3×H×W, LR is T×3×(H/4)×(W/4), both in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    /// HR pixels per frame, (dy, dx).
    pub velocity: (i64, i64),
    pub seed: u64,
}

impl VideoClip {
    pub fn frames(&self) -> usize {
        self.hr.shape()[0]
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.lr.shape()[2], self.lr.shape()[3])
    }

    /// Whole clip as a T×1×3×h×w model input.
    pub fn lr_clip<S: Real>(&self) -> Tensor<S> {
        let mut shape = self.lr.shape().to_vec();
        shape.insert(1, 1);
        self.lr.cast::<S>().reshape(&shape).expect("same element count")
    }

    /// Whole HR clip as T×1×3×H×W.
    pub fn hr_clip<S: Real>(&self) -> Tensor<S> {
        let mut shape = self.hr.shape().to_vec();
        shape.insert(1, 1);
        self.hr.cast::<S>().reshape(&shape).expect("same element count")
    }
}

struct Wave {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: f64,
    color: [f64; 3],
}

struct Texture {
    height: usize,
    width: usize,
    waves: Vec<Wave>,
    grid_h: usize,
    grid_w: usize,
    noise: Vec<f64>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        // Integer wave numbers keep the texture periodic on the H×W torus; the
        // highest ones sit near the LR Nyquist limit.
        let max_k = (height.min(width) / 8).max(3) as f64;
        let waves = (0..WAVES)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let rho = rng.gen_range(1.0..max_k);
                Wave {
                    ky: (rho * theta.sin()).round(),
                    kx: (rho * theta.cos()).round(),
                    phase: rng.gen_range(0.0..TAU),
                    amp: rng.gen_range(0.03..0.08),
                    color: [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)],
                }
            })
            .collect();
        let grid_h = (height / 8).max(1);
        let grid_w = (width / 8).max(1);
        let noise = (0..3 * grid_h * grid_w)
            .map(|_| rng.gen_range(-0.08..0.08))
            .collect();
        Texture {
            height,
            width,
            waves,
            grid_h,
            grid_w,
            noise,
        }
    }

    /// Periodic bilinear interpolation of the coarse noise grid.
    fn noise_at(&self, c: usize, y: usize, x: usize) -> f64 {
        let gy = y as f64 * self.grid_h as f64 / self.height as f64;
        let gx = x as f64 * self.grid_w as f64 / self.width as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |yy: usize, xx: usize| {
            self.noise[(c * self.grid_h + yy % self.grid_h) * self.grid_w + xx % self.grid_w]
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn render(&self) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.5 + self.noise_at(c, y, x);
                    for wave in &self.waves {
                        let arg = TAU * (wave.ky * y as f64 / h as f64 + wave.kx * x as f64 / w as f64);
                        v += wave.amp * wave.color[c] * (arg + wave.phase).sin();
                    }
                    out[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        out
    }
}

/// 4×4 box mean of a C×H×W image, accumulated in f64.
fn box_mean(img: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let (lh, lw) = (h / SCALE, w / SCALE);
    let mut out = vec![0f32; channels * lh * lw];
    let norm = (SCALE * SCALE) as f64;
    for c in 0..channels {
        for i in 0..lh {
            for j in 0..lw {
                let mut s = 0f64;
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        s += img[(c * h + SCALE * i + dy) * w + SCALE * j + dx] as f64;
                    }
                }
                out[(c * lh + i) * lw + j] = (s / norm) as f32;
            }
        }
    }
    out
}

pub fn generate_clip(seed: u64, frames: usize, height: usize, width: usize) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let velocity = (
        rng.gen_range(-MAX_SPEED..=MAX_SPEED),
        rng.gen_range(-MAX_SPEED..=MAX_SPEED),
    );
    generate_clip_with_velocity(seed, frames, height, width, velocity, &mut rng)
}

/// Same texture as [`generate_clip`] for `seed`, but with a given velocity.
pub fn generate_clip_moving(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    velocity: (i64, i64),
) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _: (i64, i64) = (
        rng.gen_range(-MAX_SPEED..=MAX_SPEED),
        rng.gen_range(-MAX_SPEED..=MAX_SPEED),
    );
    generate_clip_with_velocity(seed, frames, height, width, velocity, &mut rng)
}

fn generate_clip_with_velocity(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    velocity: (i64, i64),
    rng: &mut ChaCha8Rng,
) -> Result<VideoClip> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(DataError::Geometry(format!("{frames} frames of {height}x{width}")));
    }
    if height % SCALE != 0 || width % SCALE != 0 {
        return Err(DataError::Geometry(format!(
            "{height}x{width} is not divisible by {SCALE}"
        )));
    }
    let base = Texture::random(rng, height, width).render();
    let (h, w) = (height as i64, width as i64);
    let plane = height * width;
    let mut hr = Vec::with_capacity(frames * 3 * plane);
    let mut lr = Vec::with_capacity(frames * 3 * plane / (SCALE * SCALE));
    for t in 0..frames as i64 {
        let (sy, sx) = (velocity.0 * t, velocity.1 * t);
        let mut frame = vec![0f32; 3 * plane];
        for c in 0..3 {
            for y in 0..h {
                let src_y = (y - sy).rem_euclid(h) as usize;
                for x in 0..w {
                    let src_x = (x - sx).rem_euclid(w) as usize;
                    frame[c * plane + y as usize * width + x as usize] =
                        base[c * plane + src_y * width + src_x];
                }
            }
        }
        lr.extend(box_mean(&frame, 3, height, width));
        hr.extend(frame);
    }
    Ok(VideoClip {
        hr: Tensor::from_vec(&[frames, 3, height, width], hr)?,
        lr: Tensor::from_vec(&[frames, 3, height / SCALE, width / SCALE], lr)?,
        velocity,
        seed,
    })
}

/// Appends the time-reversed sequence: `[f0, f1, f2] → [f0, f1, f2, f2, f1, f0]`.
pub fn flip_concat<T: Clone>(frames: &[T]) -> Vec<T> {
    frames.iter().chain(frames.iter().rev()).cloned().collect()
}

/// Source frame index for each of `wanted` consecutive positions starting at
/// `t0`, flip-extending the clip until it is long enough.
pub fn extended_frame_indices(clip_len: usize, t0: usize, wanted: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..clip_len).collect();
    while idx.len() < t0 + wanted {
        idx = flip_concat(&idx);
    }
    idx[t0..t0 + wanted].to_vec()
}

fn extended_len(clip_len: usize, wanted: usize) -> usize {
    let mut len = clip_len;
    while len < wanted {
        len *= 2;
    }
    len
}

/// Where one training sample comes from, in LR coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub clip: usize,
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
    /// Start in the (possibly flip-extended) frame sequence.
    pub t0: usize,
    pub frames: usize,
}

impl CropSpec {
    /// HR window `(y, x, height, width)`.
    pub fn hr_window(&self) -> (usize, usize, usize, usize) {
        (SCALE * self.y, SCALE * self.x, SCALE * self.height, SCALE * self.width)
    }
}

/// A sampled minibatch: LR T×N×3×h×w and HR T×N×3×4h×4w.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub lr: Tensor<S>,
    pub hr: Tensor<S>,
    pub crops: Vec<CropSpec>,
}

impl<S: Real> Batch<S> {
    /// Sample `i` as its own one-sample batch.
    pub fn sample(&self, i: usize) -> Result<Batch<S>> {
        Ok(Batch {
            lr: select_sample(&self.lr, i)?,
            hr: select_sample(&self.hr, i)?,
            crops: vec![self.crops[i]],
        })
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}

fn select_sample<S: Real>(clip: &Tensor<S>, i: usize) -> Result<Tensor<S>> {
    let [t, n, c, h, w] = *clip.shape() else {
        return Err(DataError::Request(format!("expected rank 5, got {:?}", clip.shape())));
    };
    if i >= n {
        return Err(DataError::Request(format!("sample {i} of {n}")));
    }
    let per = c * h * w;
    let mut data = Vec::with_capacity(t * per);
    for ti in 0..t {
        let off = (ti * n + i) * per;
        data.extend_from_slice(&clip.data()[off..off + per]);
    }
    Ok(Tensor::from_vec(&[t, 1, c, h, w], data)?)
}

fn crop_into<S: Real>(src: &Tensor<f32>, frame: usize, y: usize, x: usize, h: usize, w: usize, dst: &mut Vec<S>) {
    let [_, c, fh, fw] = *src.shape() else {
        unreachable!("clip tensors are rank 4")
    };
    let data = src.data();
    for ci in 0..c {
        for yy in y..y + h {
            let row = ((frame * c + ci) * fh + yy) * fw;
            dst.extend(data[row + x..row + x + w].iter().map(|&v| S::of(v as f64)));
        }
    }
}

/// Owns the sampling RNG; identical seeds give identical batch sequences.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample_crops(&mut self, clips: &[VideoClip], shape: &MinibatchShape) -> Result<Vec<CropSpec>> {
        if clips.is_empty() {
            return Err(DataError::Request("no clips to sample from".into()));
        }
        if shape.batch == 0 || shape.temporal == 0 {
            return Err(DataError::Request(format!("degenerate shape {shape}")));
        }
        let (h, w) = (shape.spatial.height, shape.spatial.width);
        (0..shape.batch)
            .map(|_| {
                let clip = self.rng.gen_range(0..clips.len());
                let (fh, fw) = clips[clip].lr_size();
                if h == 0 || w == 0 || h > fh || w > fw {
                    return Err(DataError::CropTooLarge {
                        crop_h: h,
                        crop_w: w,
                        frame_h: fh,
                        frame_w: fw,
                    });
                }
                let len = extended_len(clips[clip].frames(), shape.temporal);
                let t0 = self.rng.gen_range(0..=len - shape.temporal);
                let y = self.rng.gen_range(0..=fh - h);
                let x = self.rng.gen_range(0..=fw - w);
                Ok(CropSpec {
                    clip,
                    y,
                    x,
                    height: h,
                    width: w,
                    t0,
                    frames: shape.temporal,
                })
            })
            .collect()
    }

    pub fn sample_minibatch<S: Real>(&mut self, clips: &[VideoClip], shape: &MinibatchShape) -> Result<Batch<S>> {
        let crops = self.sample_crops(clips, shape)?;
        extract_batch(clips, crops)
    }
}

/// Cuts the LR and HR windows described by `crops` (all of one shape).
pub fn extract_batch<S: Real>(clips: &[VideoClip], crops: Vec<CropSpec>) -> Result<Batch<S>> {
    let Some(first) = crops.first().copied() else {
        return Err(DataError::Request("empty crop list".into()));
    };
    if crops
        .iter()
        .any(|c| (c.height, c.width, c.frames) != (first.height, first.width, first.frames))
    {
        return Err(DataError::Request("crops differ in shape".into()));
    }
    let (t, n, h, w) = (first.frames, crops.len(), first.height, first.width);
    let indices: Vec<Vec<usize>> = crops
        .iter()
        .map(|c| extended_frame_indices(clips[c.clip].frames(), c.t0, c.frames))
        .collect();
    let mut lr = Vec::with_capacity(t * n * 3 * h * w);
    let mut hr = Vec::with_capacity(t * n * 3 * h * w * SCALE * SCALE);
    for ti in 0..t {
        for (c, idx) in crops.iter().zip(&indices) {
            let clip = &clips[c.clip];
            crop_into(&clip.lr, idx[ti], c.y, c.x, h, w, &mut lr);
            let (hy, hx, hh, hw) = c.hr_window();
            crop_into(&clip.hr, idx[ti], hy, hx, hh, hw, &mut hr);
        }
    }
    Ok(Batch {
        lr: Tensor::from_vec(&[t, n, 3, h, w], lr)?,
        hr: Tensor::from_vec(&[t, n, 3, h * SCALE, w * SCALE], hr)?,
        crops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training clips use seeds `0..train_clips`.
    pub train_clips: usize,
    /// Validation clips use seeds `train_clips..train_clips + val_clips`.
    pub val_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_clips == 0 || self.val_clips == 0 {
            return Err(DataError::Geometry("need at least one train and one validation clip".into()));
        }
        if self.frames == 0 || self.height % SCALE != 0 || self.width % SCALE != 0 || self.height == 0 || self.width == 0 {
            return Err(DataError::Geometry(format!(
                "{} frames of {}x{} (HR dims must be positive multiples of {SCALE})",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.height / SCALE, self.width / SCALE)
    }
}

#[derive(Debug, Clone)]
pub struct ClipPool {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

impl ClipPool {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let make = |seed: u64| generate_clip(seed, cfg.frames, cfg.height, cfg.width);
        let train_end = cfg.train_clips as u64;
        let val_end = train_end + cfg.val_clips as u64;
        let train = (0..train_end).into_par_iter().map(make).collect::<Result<Vec<_>>>()?;
        let val = (train_end..val_end).into_par_iter().map(make).collect::<Result<Vec<_>>>()?;
        Ok(ClipPool { train, val })
    }
}

/// Writes a 3×H×W frame in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = *frame.shape() else {
        return Err(DataError::Request(format!("expected 3×H×W, got {:?}", frame.shape())));
    };
    let mut out = BufWriter::new(File::create(path).map_err(TensorError::from)?);
    let io = |e: std::io::Error| DataError::Tensor(e.into());
    write!(out, "P6\n{w} {h}\n255\n").map_err(io)?;
    let d = frame.data();
    let mut px = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                px.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&px).map_err(io)?;
    out.flush().map_err(io)?;
    Ok(())
}

/// Exports `hr_NNN.ppm` and `lr_NNN.ppm` for every frame of a clip.
pub fn export_clip_ppm(dir: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(TensorError::from)?;
    for t in 0..clip.frames() {
        write_ppm(&dir.join(format!("hr_{t:03}.ppm")), &clip.hr.outer(t)?)?;
        write_ppm(&dir.join(format!("lr_{t:03}.ppm")), &clip.lr.outer(t)?)?;
    }
    Ok(())
}
