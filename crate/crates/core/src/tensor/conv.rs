//! Stride-1 "same" convolution via im2col and GEMM.

use super::{invalid, mismatch, LayerGrads, Real, Result, Tensor};

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn geometry<S: Real>(op: &'static str, input: &Tensor<S>, weight: &Tensor<S>) -> Result<Geometry> {
    let (n, c, h, w) = input.dims4(op)?;
    let (k, wc, kh, kw) = weight.dims4(op)?;
    if wc != c {
        return mismatch(op, &[k, c, kh, kw], weight.shape());
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return invalid(op, format!("kernel {kh}x{kw} must be odd-sized"));
    }
    if n == 0 || h == 0 || w == 0 || k == 0 || c == 0 {
        return invalid(op, format!("empty dimension in {:?}", input.shape()));
    }
    Ok(Geometry {
        n,
        c,
        h,
        w,
        k,
        kh,
        kw,
    })
}

/// Unfolds one C×H×W image into a (C·kh·kw)×(H·W) column matrix with zero padding.
fn im2col<S: Real>(g: &Geometry, img: &[S], col: &mut [S]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = h * w;
    for c in 0..g.c {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                // valid output x range for this horizontal offset
                let x0 = pw.saturating_sub(kx);
                let x1 = (w + pw).saturating_sub(kx).min(w);
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= h as isize || x0 >= x1 {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..x0].fill(S::zero());
                    line[x1..].fill(S::zero());
                    let sx0 = x0 + kx - pw;
                    line[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
fn col2im<S: Real>(g: &Geometry, col: &[S], img: &mut [S]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = h * w;
    img.fill(S::zero());
    for c in 0..g.c {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x0 = pw.saturating_sub(kx);
                let x1 = (w + pw).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = x0 + kx - pw;
                for y in 0..h {
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w + sx0..iy as usize * w + sx0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an N×C×H×W input with a K×C×kh×kw kernel, zero
/// "same" padding and stride 1. Returns N×K×H×W.
pub fn conv2d_forward<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g = geometry("conv2d_forward", input, weight)?;
    if bias.shape() != [g.k] {
        return mismatch("conv2d_forward", &[g.k], bias.shape());
    }
    let (hw, rows) = (g.pixels(), g.rows());
    let mut out = Tensor::zeros(&[g.n, g.k, g.h, g.w]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); rows * hw]
    };
    for i in 0..g.n {
        let img = &input.data()[i * g.c * hw..(i + 1) * g.c * hw];
        let dst = &mut out.data_mut()[i * g.k * hw..(i + 1) * g.k * hw];
        for (k, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[k]);
        }
        let src = if g.is_pointwise() {
            img
        } else {
            im2col(&g, img, &mut col);
            &col
        };
        // out[K×HW] += W[K×rows] · col[rows×HW]
        unsafe {
            S::gemm(
                g.k,
                rows,
                hw,
                S::one(),
                weight.data().as_ptr(),
                rows as isize,
                1,
                src.as_ptr(),
                hw as isize,
                1,
                S::one(),
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out ⊙ conv2d_forward(input, weight, bias))`.
///
/// `params` holds `[weight, bias]`. Per-image contributions to the weight and
/// bias gradients are accumulated in image order.
pub fn conv2d_backward<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LayerGrads<S>> {
    let g = geometry("conv2d_backward", input, weight)?;
    if grad_out.shape() != [g.n, g.k, g.h, g.w] {
        return mismatch("conv2d_backward", &[g.n, g.k, g.h, g.w], grad_out.shape());
    }
    let (hw, rows) = (g.pixels(), g.rows());
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[g.k]);
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![S::zero(); rows * hw]
    };
    let mut gcol = if pointwise {
        Vec::new()
    } else {
        vec![S::zero(); rows * hw]
    };
    for i in 0..g.n {
        let img = &input.data()[i * g.c * hw..(i + 1) * g.c * hw];
        let go = &grad_out.data()[i * g.k * hw..(i + 1) * g.k * hw];
        for (k, plane) in go.chunks_exact(hw).enumerate() {
            let s: S = plane.iter().copied().sum();
            grad_b.data_mut()[k] = grad_b.data()[k] + s;
        }
        let src = if pointwise {
            img
        } else {
            im2col(&g, img, &mut col);
            &col
        };
        unsafe {
            // dW[K×rows] += go[K×HW] · colᵀ[HW×rows]
            S::gemm(
                g.k,
                hw,
                rows,
                S::one(),
                go.as_ptr(),
                hw as isize,
                1,
                src.as_ptr(),
                1,
                hw as isize,
                S::one(),
                grad_w.data_mut().as_mut_ptr(),
                rows as isize,
                1,
            );
        }
        let gi = &mut grad_in.data_mut()[i * g.c * hw..(i + 1) * g.c * hw];
        let target: &mut [S] = if pointwise { gi } else { &mut gcol };
        unsafe {
            // dcol[rows×HW] = Wᵀ[rows×K] · go[K×HW]
            S::gemm(
                rows,
                g.k,
                hw,
                S::one(),
                weight.data().as_ptr(),
                1,
                rows as isize,
                go.as_ptr(),
                hw as isize,
                1,
                S::zero(),
                target.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        if !pointwise {
            let gi = &mut grad_in.data_mut()[i * g.c * hw..(i + 1) * g.c * hw];
            col2im(&g, &gcol, gi);
        }
    }
    Ok(LayerGrads {
        input: grad_in,
        params: vec![grad_w, grad_b],
    })
}
