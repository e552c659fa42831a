use super::{invalid, mismatch, Real, Result, Tensor};

pub fn add<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return mismatch("add", a.shape(), b.shape());
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn leaky_relu<S: Real>(x: &Tensor<S>, slope: S) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { slope * v })
}

/// Backward of [`leaky_relu`]; masks on the sign of the forward input.
pub fn leaky_relu_backward<S: Real>(x: &Tensor<S>, grad_out: &Tensor<S>, slope: S) -> Result<Tensor<S>> {
    if x.shape() != grad_out.shape() {
        return mismatch("leaky_relu_backward", x.shape(), grad_out.shape());
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > S::zero() { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// N×(C·r²)×H×W → N×C×(rH)×(rW) with
/// `out[n, c, y·r + i, x·r + j] = in[n, c·r² + i·r + j, y, x]`.
pub fn pixel_shuffle<S: Real>(x: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let (n, cr, h, w) = x.dims4("pixel_shuffle")?;
    if r == 0 || cr % (r * r) != 0 {
        return invalid("pixel_shuffle", format!("{cr} channels not divisible by {r}²"));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = ((ni * cr) + ci * r * r + i * r + j) * h * w;
                    for y in 0..h {
                        let row = ((ni * c + ci) * oh + y * r + i) * ow;
                        for xx in 0..w {
                            dst[row + xx * r + j] = src[plane + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`pixel_shuffle`], which is also its backward.
pub fn pixel_unshuffle<S: Real>(x: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let (n, c, oh, ow) = x.dims4("pixel_unshuffle")?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return invalid("pixel_unshuffle", format!("{oh}x{ow} not divisible by {r}"));
    }
    let (h, w) = (oh / r, ow / r);
    let cr = c * r * r;
    let mut out = Tensor::zeros(&[n, cr, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = ((ni * cr) + ci * r * r + i * r + j) * h * w;
                    for y in 0..h {
                        let row = ((ni * c + ci) * oh + y * r + i) * ow;
                        for xx in 0..w {
                            dst[plane + y * w + xx] = src[row + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates N×Cᵢ×H×W tensors along the channel axis.
pub fn concat_channels<S: Real>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = parts.first() else {
        return invalid("concat_channels", "nothing to concatenate");
    };
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return mismatch("concat_channels", &[n, pc, h, w], p.shape());
        }
        total_c += pc;
    }
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for ni in 0..n {
        for p in parts {
            let block = p.shape()[1] * h * w;
            data.extend_from_slice(&p.data()[ni * block..(ni + 1) * block]);
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], data)
}

/// Splits along the channel axis; backward of [`concat_channels`].
pub fn split_channels<S: Real>(x: &Tensor<S>, sizes: &[usize]) -> Result<Vec<Tensor<S>>> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if sizes.iter().sum::<usize>() != c {
        return invalid("split_channels", format!("{sizes:?} does not sum to {c} channels"));
    }
    let mut outs: Vec<Vec<S>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * h * w)).collect();
    for ni in 0..n {
        let mut off = (ni * c) * h * w;
        for (o, &s) in outs.iter_mut().zip(sizes) {
            o.extend_from_slice(&x.data()[off..off + s * h * w]);
            off += s * h * w;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::from_vec(&[n, s, h, w], d))
        .collect()
}

/// Repeats every pixel into a `factor`×`factor` block.
pub fn nearest_upsample<S: Real>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4("nearest_upsample")?;
    if factor == 0 {
        return invalid("nearest_upsample", "factor must be positive");
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let srow = &src[(plane * h + oy / factor) * w..(plane * h + oy / factor + 1) * w];
            let drow = &mut dst[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    Ok(out)
}

/// Sums each `factor`×`factor` block of the upstream gradient.
pub fn nearest_upsample_backward<S: Real>(grad_out: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (n, c, oh, ow) = grad_out.dims4("nearest_upsample_backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return invalid(
            "nearest_upsample_backward",
            format!("{oh}x{ow} not divisible by {factor}"),
        );
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = grad_out.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let srow = &src[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
            let drow = &mut dst[(plane * h + oy / factor) * w..(plane * h + oy / factor + 1) * w];
            for (ox, &g) in srow.iter().enumerate() {
                drow[ox / factor] = drow[ox / factor] + g;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{dot, gradcheck, random, seeds};
    use proptest::prelude::*;

    #[test]
    fn add_zero_is_identity() {
        let x = random(&[2, 3, 4, 4], 1);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(&[2, 3, 4, 5])).is_err());
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![0.0, 2.0, -1.0, -4.0]).unwrap();
        let y = leaky_relu(&x, 0.0);
        assert_eq!(y.data(), [0.0, 2.0, 0.0, 0.0]);
        let y = leaky_relu(&x, 0.25);
        assert_eq!(y.data(), [0.0, 2.0, -0.25, -1.0]);
        let pos = random(&[1, 2, 3, 3], 4).map(f64::abs);
        assert_eq!(leaky_relu(&pos, 0.1), pos);
    }

    #[test]
    fn leaky_relu_gradcheck() {
        for seed in seeds() {
            let x = random(&[1, 2, 3, 3], seed);
            let go = random(&[1, 2, 3, 3], seed + 1);
            let g = leaky_relu_backward(&x, &go, 0.1).unwrap();
            let err = gradcheck(&x, &g, |p| dot(&leaky_relu(p, 0.1), &go));
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pixel_shuffle_hand_layout() {
        // channel k holds values 10k + position
        let x = Tensor::from_fn(&[1, 4, 2, 2], |i| ((i / 4) * 10 + i % 4) as f64);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        // out[2y+i, 2x+j] = in[2i+j, y, x]
        let mut want = vec![0.0; 16];
        for c in 0..4 {
            let (i, j) = (c / 2, c % 2);
            for yy in 0..2 {
                for xx in 0..2 {
                    want[(2 * yy + i) * 4 + 2 * xx + j] = (c * 10 + yy * 2 + xx) as f64;
                }
            }
        }
        assert_eq!(y.data(), want.as_slice());
        assert_eq!(
            &y.data()[..8],
            [0.0, 10.0, 1.0, 11.0, 20.0, 30.0, 21.0, 31.0]
        );
    }

    #[test]
    fn pixel_shuffle_trivial_cases() {
        let x = random(&[2, 3, 4, 5], 9);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        let c = Tensor::full(&[1, 8, 3, 3], 0.7);
        assert!(pixel_shuffle(&c, 2).unwrap().data().iter().all(|&v| v == 0.7));
        assert!(pixel_shuffle(&random(&[1, 6, 2, 2], 1), 2).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random(&[2, 3, 4, 4], 1);
        let b = random(&[2, 1, 4, 4], 2);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 4, 4, 4]);
        let parts = split_channels(&cat, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &random(&[2, 1, 4, 5], 3)]).is_err());
    }

    #[test]
    fn nearest_upsample_gradcheck() {
        for seed in seeds() {
            let x = random(&[1, 2, 3, 2], seed);
            let go = random(&[1, 2, 12, 8], seed + 1);
            let g = nearest_upsample_backward(&go, 4).unwrap();
            let err = gradcheck(&x, &g, |p| dot(&nearest_upsample(p, 4).unwrap(), &go));
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn nearest_upsample_replicates() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = nearest_upsample(&x, 2).unwrap();
        assert_eq!(y.data(), [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn shuffle_is_a_permutation(n in 1usize..3, c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4) {
            let x = Tensor::from_fn(&[n, c * r * r, h, w], |i| i as f64);
            let y = pixel_shuffle(&x, r).unwrap();
            prop_assert_eq!(&pixel_unshuffle(&y, r).unwrap(), &x);
            let mut seen: Vec<f64> = y.data().to_vec();
            seen.sort_by(f64::total_cmp);
            prop_assert_eq!(seen, x.data().to_vec());
            let z = Tensor::from_fn(&[n, c, h * r, w * r], |i| i as f64);
            prop_assert_eq!(pixel_shuffle(&pixel_unshuffle(&z, r).unwrap(), r).unwrap(), z);
        }
    }
}
