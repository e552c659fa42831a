//! Tiny unidirectional recurrent ×4 super-resolution network.
//!
//! Per frame `t` with LR input `x_t` and hidden state `h_{t-1}` (zeros at the
//! first frame):
//!
//! ```text
//! f   = lrelu(feat(x_t))
//! z   = lrelu(fuse(concat(f, h_{t-1})))
//! z   = z + conv_b2(lrelu(conv_b1(z)))        for each residual block
//! h_t = z
//! u   = lrelu(shuffle2(up1(h_t)))
//! u   = lrelu(shuffle2(up2(u)))
//! y_t = out(u) + nearest4(x_t)
//! ```
//!
//! The hidden state lives at LR resolution. All convolutions are 3×3.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, add, concat_channels, conv2d_backward, conv2d_forward, leaky_relu, leaky_relu_backward,
    nearest_upsample, pixel_shuffle, pixel_unshuffle, split_channels,
    Real, Tensor, TensorError,
};

pub const SCALE: usize = 4;
pub const SLOPE: f64 = 0.1;
const KERNEL: usize = 3;
const OUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Real> Conv<S> {
    fn zeros(out_c: usize, in_c: usize) -> Self {
        Conv {
            weight: Tensor::zeros(&[out_c, in_c, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    /// Kaiming-uniform on fan-in, bound `sqrt(6 / fan_in)`; zero bias.
    fn kaiming(out_c: usize, in_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * KERNEL * KERNEL) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv {
            weight: Tensor::from_fn(&[out_c, in_c, KERNEL, KERNEL], |_| {
                S::of(rng.gen_range(-bound..bound))
            }),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> tensor::Result<Tensor<S>> {
        conv2d_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter grads into `acc` and returns the input grad.
    fn backward(&self, x: &Tensor<S>, grad: &Tensor<S>, acc: &mut Conv<S>) -> tensor::Result<Tensor<S>> {
        let mut g = conv2d_backward(x, &self.weight, grad)?;
        let gb = g.params.pop().expect("bias grad");
        let gw = g.params.pop().expect("weight grad");
        acc.weight.add_assign(&gw)?;
        acc.bias.add_assign(&gb)?;
        Ok(g.input)
    }

    fn cast<U: Real>(&self) -> Conv<U> {
        Conv {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Network parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyRvsrParams<S> {
    pub channels: usize,
    pub blocks: usize,
    pub feat: Conv<S>,
    pub fuse: Conv<S>,
    pub res: Vec<[Conv<S>; 2]>,
    pub up1: Conv<S>,
    pub up2: Conv<S>,
    pub out: Conv<S>,
}

impl<S: Real> TinyRvsrParams<S> {
    pub fn zeros(channels: usize, blocks: usize) -> Self {
        let c = channels;
        TinyRvsrParams {
            channels,
            blocks,
            feat: Conv::zeros(c, 3),
            fuse: Conv::zeros(c, 2 * c),
            res: (0..blocks).map(|_| [Conv::zeros(c, c), Conv::zeros(c, c)]).collect(),
            up1: Conv::zeros(4 * c, c),
            up2: Conv::zeros(4 * c, c),
            out: Conv::zeros(3, c),
        }
    }

    /// Deterministic per seed; identical values for `f32` and `f64` up to rounding.
    pub fn init(seed: u64, channels: usize, blocks: usize) -> Result<Self> {
        if channels == 0 {
            return Err(ModelError::Input("channel count must be positive".into()));
        }
        let c = channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = Conv::kaiming(c, 3, &mut rng);
        let fuse = Conv::kaiming(c, 2 * c, &mut rng);
        let res = (0..blocks)
            .map(|_| [Conv::kaiming(c, c, &mut rng), Conv::kaiming(c, c, &mut rng)])
            .collect();
        let up1 = Conv::kaiming(4 * c, c, &mut rng);
        let up2 = Conv::kaiming(4 * c, c, &mut rng);
        // A small output layer starts the network close to the upsampling path.
        let mut out = Conv::kaiming(3, c, &mut rng);
        out.weight.scale(S::of(OUT_INIT_SCALE));
        Ok(TinyRvsrParams {
            channels,
            blocks,
            feat,
            fuse,
            res,
            up1,
            up2,
            out,
        })
    }

    fn convs(&self) -> Vec<(String, &Conv<S>)> {
        let mut v = vec![("feat".to_string(), &self.feat), ("fuse".to_string(), &self.fuse)];
        for (i, [a, b]) in self.res.iter().enumerate() {
            v.push((format!("res{i}.conv1"), a));
            v.push((format!("res{i}.conv2"), b));
        }
        v.push(("up1".into(), &self.up1));
        v.push(("up2".into(), &self.up2));
        v.push(("out".into(), &self.out));
        v
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.convs()
            .into_iter()
            .flat_map(|(name, c)| {
                [
                    (format!("{name}.weight"), &c.weight),
                    (format!("{name}.bias"), &c.bias),
                ]
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v: Vec<&mut Conv<S>> = vec![&mut self.feat, &mut self.fuse];
        for [a, b] in self.res.iter_mut() {
            v.push(a);
            v.push(b);
        }
        v.push(&mut self.up1);
        v.push(&mut self.up2);
        v.push(&mut self.out);
        v.into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.blocks)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn flatten(&self) -> Vec<S> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector in [`Self::flatten`] order.
    pub fn assign_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(ModelError::Input(format!(
                "expected {} values, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if (self.channels, self.blocks) != (other.channels, other.blocks) {
            return Err(ModelError::Input("parameter sets have different sizes".into()));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: S) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn cast<U: Real>(&self) -> TinyRvsrParams<U> {
        TinyRvsrParams {
            channels: self.channels,
            blocks: self.blocks,
            feat: self.feat.cast(),
            fuse: self.fuse.cast(),
            res: self.res.iter().map(|[a, b]| [a.cast(), b.cast()]).collect(),
            up1: self.up1.cast(),
            up2: self.up2.cast(),
            out: self.out.cast(),
        }
    }
}

struct BlockCache<S> {
    input: Tensor<S>,
    pre: Tensor<S>,
    act: Tensor<S>,
}

struct FrameCache<S> {
    x: Tensor<S>,
    feat_pre: Tensor<S>,
    cat: Tensor<S>,
    fuse_pre: Tensor<S>,
    blocks: Vec<BlockCache<S>>,
    hidden: Tensor<S>,
    shuf1: Tensor<S>,
    up1_act: Tensor<S>,
    shuf2: Tensor<S>,
    up2_act: Tensor<S>,
}

/// Activations kept by [`forward_sequence`] for [`backward_sequence`].
pub struct ForwardCache<S> {
    frames: Vec<FrameCache<S>>,
    channels: usize,
    blocks: usize,
    input_shape: Vec<usize>,
}

impl<S> ForwardCache<S> {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

fn clip_dims<S: Real>(clip: &Tensor<S>) -> Result<(usize, usize, usize, usize, usize)> {
    match *clip.shape() {
        [t, n, c, h, w] => {
            if t == 0 || n == 0 || h == 0 || w == 0 {
                return Err(ModelError::Input(format!("non-positive dims {:?}", clip.shape())));
            }
            if c != 3 {
                return Err(ModelError::Input(format!("expected 3 channels, got {c}")));
            }
            Ok((t, n, c, h, w))
        }
        _ => Err(ModelError::Input(format!(
            "expected a T×N×3×H×W clip, got {:?}",
            clip.shape()
        ))),
    }
}

/// Runs the recurrence over a T×N×3×h×w LR clip; returns T×N×3×4h×4w.
pub fn forward_sequence<S: Real>(
    params: &TinyRvsrParams<S>,
    lr_clip: &Tensor<S>,
) -> Result<(Tensor<S>, ForwardCache<S>)> {
    let (frames, n, _, h, w) = clip_dims(lr_clip)?;
    let slope = S::of(SLOPE);
    let mut hidden = Tensor::zeros(&[n, params.channels, h, w]);
    let mut outputs = Vec::with_capacity(frames);
    let mut caches = Vec::with_capacity(frames);
    for t in 0..frames {
        let x = lr_clip.outer(t)?;
        let feat_pre = params.feat.forward(&x)?;
        let f = leaky_relu(&feat_pre, slope);
        let cat = concat_channels(&[&f, &hidden])?;
        let fuse_pre = params.fuse.forward(&cat)?;
        let mut z = leaky_relu(&fuse_pre, slope);
        let mut blocks = Vec::with_capacity(params.blocks);
        for [c1, c2] in &params.res {
            let pre = c1.forward(&z)?;
            let act = leaky_relu(&pre, slope);
            let o = c2.forward(&act)?;
            let next = add(&z, &o)?;
            blocks.push(BlockCache { input: z, pre, act });
            z = next;
        }
        let shuf1 = pixel_shuffle(&params.up1.forward(&z)?, 2)?;
        let up1_act = leaky_relu(&shuf1, slope);
        let shuf2 = pixel_shuffle(&params.up2.forward(&up1_act)?, 2)?;
        let up2_act = leaky_relu(&shuf2, slope);
        let y = add(&params.out.forward(&up2_act)?, &nearest_upsample(&x, SCALE)?)?;
        outputs.push(y);
        caches.push(FrameCache {
            x,
            feat_pre,
            cat,
            fuse_pre,
            blocks,
            hidden: z.clone(),
            shuf1,
            up1_act,
            shuf2,
            up2_act,
        });
        hidden = z;
    }
    Ok((
        Tensor::stack(&outputs)?,
        ForwardCache {
            frames: caches,
            channels: params.channels,
            blocks: params.blocks,
            input_shape: lr_clip.shape().to_vec(),
        },
    ))
}

/// Full backpropagation through time for a loss with gradient `grad_sr`
/// (shape of the SR clip). Parameter gradients are summed over frames.
pub fn backward_sequence<S: Real>(
    params: &TinyRvsrParams<S>,
    cache: &ForwardCache<S>,
    grad_sr: &Tensor<S>,
) -> Result<TinyRvsrParams<S>> {
    if (cache.channels, cache.blocks) != (params.channels, params.blocks) {
        return Err(ModelError::Input("cache was produced by a different model".into()));
    }
    let (frames, n, c, h, w) = match *cache.input_shape.as_slice() {
        [t, n, c, h, w] => (t, n, c, h, w),
        _ => unreachable!("cache shape validated in forward"),
    };
    let want = [frames, n, c, h * SCALE, w * SCALE];
    if grad_sr.shape() != want {
        return Err(ModelError::Input(format!(
            "grad shape {:?} does not match output {want:?}",
            grad_sr.shape()
        )));
    }
    let slope = S::of(SLOPE);
    let ch = params.channels;
    let mut grads = params.zeros_like();
    let mut grad_hidden = Tensor::zeros(&[n, ch, h, w]);
    for (t, fc) in cache.frames.iter().enumerate().rev() {
        let gy = grad_sr.outer(t)?;
        // the residual nearest-upsample path has no parameters
        let g = params.out.backward(&fc.up2_act, &gy, &mut grads.out)?;
        let g = leaky_relu_backward(&fc.shuf2, &g, slope)?;
        let g = pixel_unshuffle(&g, 2)?;
        let g = params.up2.backward(&fc.up1_act, &g, &mut grads.up2)?;
        let g = leaky_relu_backward(&fc.shuf1, &g, slope)?;
        let g = pixel_unshuffle(&g, 2)?;
        let mut gz = params.up1.backward(&fc.hidden, &g, &mut grads.up1)?;
        gz.add_assign(&grad_hidden)?;
        for (b, bc) in fc.blocks.iter().enumerate().rev() {
            let [c1, c2] = &params.res[b];
            let [g1, g2] = &mut grads.res[b];
            let ga = c2.backward(&bc.act, &gz, g2)?;
            let gp = leaky_relu_backward(&bc.pre, &ga, slope)?;
            let gi = c1.backward(&bc.input, &gp, g1)?;
            gz.add_assign(&gi)?;
        }
        let g = leaky_relu_backward(&fc.fuse_pre, &gz, slope)?;
        let gcat = params.fuse.backward(&fc.cat, &g, &mut grads.fuse)?;
        let mut parts = split_channels(&gcat, &[ch, ch])?;
        grad_hidden = parts.pop().expect("hidden part");
        let gf = parts.pop().expect("feature part");
        let g = leaky_relu_backward(&fc.feat_pre, &gf, slope)?;
        params.feat.backward(&fc.x, &g, &mut grads.feat)?;
    }
    Ok(grads)
}

/// Nearest-neighbour ×4 upsampling of a T×N×3×h×w clip: the output of a
/// zero-weight model.
pub fn nearest_baseline<S: Real>(lr_clip: &Tensor<S>) -> Result<Tensor<S>> {
    clip_dims(lr_clip)?;
    let frames = (0..lr_clip.shape()[0])
        .map(|t| Ok(nearest_upsample(&lr_clip.outer(t)?, SCALE)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&frames)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub channels: usize,
    pub blocks: usize,
    pub seed: u64,
    pub params: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one raw tensor file per parameter plus `manifest.json`.
pub fn save_checkpoint<S: Real>(dir: &Path, params: &TinyRvsrParams<S>, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(TensorError::from)?;
    let mut entries = Vec::new();
    for (name, t) in params.named_tensors() {
        let file = format!("{name}.bin");
        tensor::write_raw_file(&dir.join(&file), t)?;
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        channels: params.channels,
        blocks: params.blocks,
        seed,
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(TensorError::from)?;
    Ok(())
}

pub fn load_checkpoint<S: Real>(dir: &Path) -> Result<(TinyRvsrParams<S>, CheckpointManifest)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut params = TinyRvsrParams::<S>::zeros(manifest.channels, manifest.blocks);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {} tensors, model needs {}",
            manifest.params.len(),
            names.len()
        )));
    }
    for ((slot, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&manifest.params) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(ModelError::Checkpoint(format!(
                "entry {} {:?} does not match {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let t: Tensor<S> = tensor::read_raw_file(&dir.join(&entry.file))?;
        if t.shape() != slot.shape() {
            return Err(ModelError::Checkpoint(format!("{} has shape {:?}", entry.file, t.shape())));
        }
        if !t.all_finite() {
            return Err(ModelError::Checkpoint(format!("{} holds non-finite values", entry.file)));
        }
        *slot = t;
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{dot, random};

    fn clip(t: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        random(&[t, n, 3, h, w], seed).map(|v| 0.5 + 0.5 * v)
    }

    #[test]
    fn init_is_deterministic() {
        let a = TinyRvsrParams::<f32>::init(7, 16, 2).unwrap();
        let b = TinyRvsrParams::<f32>::init(7, 16, 2).unwrap();
        let c = TinyRvsrParams::<f32>::init(8, 16, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.res.iter().all(|[x, y]| x.bias.data().iter().chain(y.bias.data()).all(|&v| v == 0.0)));
        let bound = (6.0f32 / (16.0 * 9.0)).sqrt();
        assert!(a.res[0][0].weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn parameter_count_by_hand() {
        // feat 3·16·9+16, fuse 32·16·9+16, 4 res convs 16·16·9+16,
        // up1/up2 16·64·9+64, out 16·3·9+3
        let hand = (432 + 16) + (4608 + 16) + 4 * (2304 + 16) + 2 * (9216 + 64) + (432 + 3);
        assert_eq!(hand, 33_347);
        assert_eq!(TinyRvsrParams::<f32>::init(0, 16, 2).unwrap().param_count(), hand);
        // C=4, B=0: 112 + 292 + 2·592 + 111
        assert_eq!(TinyRvsrParams::<f32>::zeros(4, 0).param_count(), 1_699);
    }

    #[test]
    fn output_is_four_times_larger() {
        let p = TinyRvsrParams::<f32>::init(1, 4, 1).unwrap();
        let x = clip(3, 2, 5, 6, 2).cast::<f32>();
        let (y, cache) = forward_sequence(&p, &x).unwrap();
        assert_eq!(y.shape(), [3, 2, 3, 20, 24]);
        assert_eq!(cache.frame_count(), 3);
        assert!(forward_sequence(&p, &Tensor::<f32>::zeros(&[0, 1, 3, 4, 4])).is_err());
        assert!(forward_sequence(&p, &Tensor::<f32>::zeros(&[2, 1, 4, 4, 4])).is_err());
    }

    #[test]
    fn large_shape_contract() {
        let p = TinyRvsrParams::<f32>::init(1, 2, 0).unwrap();
        let x = Tensor::<f32>::full(&[15, 4, 3, 32, 32], 0.5);
        let (y, _) = forward_sequence(&p, &x).unwrap();
        assert_eq!(y.shape(), [15, 4, 3, 128, 128]);
    }

    #[test]
    fn zero_model_is_nearest_upsample() {
        let p = TinyRvsrParams::<f64>::zeros(8, 2);
        let x = clip(4, 2, 5, 5, 3);
        let (y, _) = forward_sequence(&p, &x).unwrap();
        assert_eq!(y, nearest_baseline(&x).unwrap());
    }

    #[test]
    fn single_frame_is_feed_forward() {
        let p = TinyRvsrParams::<f64>::init(4, 4, 1).unwrap();
        let x = clip(3, 1, 6, 6, 5);
        let (full, _) = forward_sequence(&p, &x).unwrap();
        let first = Tensor::stack(&[x.outer(0).unwrap()]).unwrap();
        let (one, _) = forward_sequence(&p, &first).unwrap();
        assert_eq!(one.outer(0).unwrap(), full.outer(0).unwrap());
    }

    #[test]
    fn later_frames_do_not_affect_earlier_outputs() {
        let p = TinyRvsrParams::<f64>::init(5, 4, 1).unwrap();
        let x = clip(4, 1, 6, 6, 6);
        let mut x2 = x.clone();
        let frame = 6 * 6 * 3;
        for v in &mut x2.data_mut()[2 * frame..] {
            *v = 1.0 - *v;
        }
        let (a, _) = forward_sequence(&p, &x).unwrap();
        let (b, _) = forward_sequence(&p, &x2).unwrap();
        for t in 0..2 {
            assert_eq!(a.outer(t).unwrap(), b.outer(t).unwrap());
        }
        assert_ne!(a.outer(2).unwrap(), b.outer(2).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = TinyRvsrParams::<f64>::init(1, 4, 1).unwrap();
        let x = clip(2, 1, 4, 4, 1);
        let (y, cache) = forward_sequence(&p, &x).unwrap();
        let g = backward_sequence(&p, &cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(backward_sequence(&p, &cache, &Tensor::zeros(&[2, 1, 3, 8, 8])).is_err());
        let other = TinyRvsrParams::<f64>::init(1, 4, 2).unwrap();
        assert!(backward_sequence(&other, &cache, &Tensor::zeros(y.shape())).is_err());
    }

    #[test]
    fn first_frame_gradient_is_causal() {
        // Loss on frame 1 only: gradients must not depend on frames 2..T.
        let p = TinyRvsrParams::<f64>::init(2, 4, 1).unwrap();
        let x = clip(3, 1, 5, 5, 2);
        let (y, cache) = forward_sequence(&p, &x).unwrap();
        let mut gy = random(y.shape(), 3);
        let per_frame = gy.len() / 3;
        gy.data_mut()[per_frame..].fill(0.0);
        let g_full = backward_sequence(&p, &cache, &gy).unwrap();

        let x1 = Tensor::stack(&[x.outer(0).unwrap()]).unwrap();
        let (_, cache1) = forward_sequence(&p, &x1).unwrap();
        let gy1 = Tensor::stack(&[gy.outer(0).unwrap()]).unwrap();
        let g_one = backward_sequence(&p, &cache1, &gy1).unwrap();
        assert_eq!(g_full, g_one);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        // T=3, C=4, B=1, 8×8 frames at double precision.
        let p = TinyRvsrParams::<f64>::init(11, 4, 1).unwrap();
        let x = clip(3, 1, 8, 8, 12);
        let (y, cache) = forward_sequence(&p, &x).unwrap();
        let gy = random(y.shape(), 13);
        let grads = backward_sequence(&p, &cache, &gy).unwrap();
        let objective = |q: &TinyRvsrParams<f64>| dot(&forward_sequence(q, &x).unwrap().0, &gy);
        let h = 1e-5;
        for (ti, (name, g)) in grads.named_tensors().into_iter().enumerate() {
            let scale = g.data().iter().fold(1e-3f64, |m, v| m.max(v.abs()));
            // probe a strided subset of every tensor
            let stride = (g.len() / 12).max(1);
            for i in (0..g.len()).step_by(stride) {
                let mut up = p.clone();
                up.tensors_mut()[ti].data_mut()[i] += h;
                let mut down = p.clone();
                down.tensors_mut()[ti].data_mut()[i] -= h;
                let numeric = (objective(&up) - objective(&down)) / (2.0 * h);
                let err = (numeric - g.data()[i]).abs() / scale;
                assert!(err < 1e-4, "{name}[{i}]: analytic {} numeric {numeric}", g.data()[i]);
            }
        }
    }

    #[test]
    fn flat_round_trip_and_checkpoint() {
        let p = TinyRvsrParams::<f64>::init(3, 4, 2).unwrap();
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&[1.0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &p, 3).unwrap();
        let (r, manifest) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(r, p);
        assert_eq!((manifest.channels, manifest.blocks, manifest.seed), (4, 2, 3));
        assert_eq!(manifest.params[0].name, "feat.weight");
        assert!(load_checkpoint::<f64>(&dir.path().join("missing")).is_err());
    }
}
