use crate::tensor::{Scalar, Tensor};

/// Stride-1 max pooling with `kernel/2` padding (padding never wins).
/// Returns the pooled map and, per output element, the flat in-plane index
/// of the selected input.
pub fn max_pool_same<T: Scalar>(x: &Tensor<T>, kernel: usize) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let r = (kernel / 2) as isize;
    let mut y = Tensor::zeros(x.shape());
    let mut arg = vec![0u32; x.numel()];
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        let src = &xd[base..base + h * w];
        // Separable: horizontal pass then vertical pass, tracking argmax.
        let mut row_val = vec![T::zero(); h * w];
        let mut row_arg = vec![0u32; h * w];
        for yy in 0..h {
            for xx in 0..w {
                let lo = (xx as isize - r).max(0) as usize;
                let hi = ((xx as isize + r) as usize).min(w - 1);
                let mut best = src[yy * w + lo];
                let mut bi = yy * w + lo;
                for k in lo + 1..=hi {
                    if src[yy * w + k] > best {
                        best = src[yy * w + k];
                        bi = yy * w + k;
                    }
                }
                row_val[yy * w + xx] = best;
                row_arg[yy * w + xx] = bi as u32;
            }
        }
        for yy in 0..h {
            let lo = (yy as isize - r).max(0) as usize;
            let hi = ((yy as isize + r) as usize).min(h - 1);
            for xx in 0..w {
                let mut best = row_val[lo * w + xx];
                let mut bi = row_arg[lo * w + xx];
                for k in lo + 1..=hi {
                    if row_val[k * w + xx] > best {
                        best = row_val[k * w + xx];
                        bi = row_arg[k * w + xx];
                    }
                }
                yd[base + yy * w + xx] = best;
                arg[base + yy * w + xx] = bi;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward<T: Scalar>(shape: &[usize], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let plane: usize = shape[2] * shape[3];
    let mut dx = Tensor::zeros(shape);
    let dxd = dx.data_mut();
    for (i, (&a, &g)) in arg.iter().zip(dy.data()).enumerate() {
        let base = (i / plane) * plane;
        dxd[base + a as usize] = dxd[base + a as usize] + g;
    }
    dx
}

pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let xd = x.data();
    Tensor::from_fn(&[n, c, 2 * h, 2 * w], |i| {
        let ox = i % (2 * w);
        let oy = (i / (2 * w)) % (2 * h);
        let p = i / (4 * h * w);
        xd[(p * h + oy / 2) * w + ox / 2]
    })
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let i = (p * h + oy / 2) * w + ox / 2;
                dxd[i] = dxd[i] + dyd[(p * h2 + oy) * w2 + ox];
            }
        }
    }
    dx
}

/// Window `[start, end)` covered by output cell `i` of an adaptive pool.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let xd = x.data();
    Tensor::from_fn(&[n, c, oh, ow], |i| {
        let ox = i % ow;
        let oy = (i / ow) % oh;
        let p = i / (oh * ow);
        let (y0, y1) = adaptive_window(oy, h, oh);
        let (x0, x1) = adaptive_window(ox, w, ow);
        let mut s = T::zero();
        for yy in y0..y1 {
            for xx in x0..x1 {
                s = s + xd[(p * h + yy) * w + xx];
            }
        }
        s / T::of(((y1 - y0) * (x1 - x0)) as f64)
    })
}

pub fn adaptive_avg_pool_backward<T: Scalar>(shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (shape[2], shape[3]);
    let (_, _, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(shape);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for p in 0..shape[0] * shape[1] {
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let g = dyd[(p * oh + oy) * ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        dxd[(p * h + yy) * w + xx] = dxd[(p * h + yy) * w + xx] + g;
                    }
                }
            }
        }
    }
    dx
}
