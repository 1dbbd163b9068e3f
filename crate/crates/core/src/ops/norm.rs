use crate::tensor::{Scalar, Tensor};

/// Per-channel statistics used by one batch-norm application.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, only present when batch statistics were used.
    pub batch_var: Option<Vec<T>>,
}

fn channel_slices(shape: &[usize]) -> (usize, usize, usize) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    (n, c, plane)
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> NormStats<T> {
    let (n, c, plane) = channel_slices(x.shape());
    let count = (n * plane) as f64;
    let xd = x.data();
    let mut mean = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    let mut batch_var = Vec::with_capacity(c);
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                s += v.f64();
            }
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for b in 0..n {
            for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                let d = v.f64() - m;
                ss += d * d;
            }
        }
        let var = ss / count;
        mean.push(T::of(m));
        inv_std.push(T::of(1.0 / (var + eps.f64()).sqrt()));
        batch_var.push(T::of(if count > 1.0 { ss / (count - 1.0) } else { var }));
    }
    NormStats { mean, inv_std, batch_var: Some(batch_var) }
}

pub fn running_stats<T: Scalar>(running_mean: &[T], running_var: &[T], eps: T) -> NormStats<T> {
    NormStats {
        mean: running_mean.to_vec(),
        inv_std: running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        batch_var: None,
    }
}

pub fn normalize<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], stats: &NormStats<T>) -> Tensor<T> {
    let (n, c, plane) = channel_slices(x.shape());
    let mut y = x.clone();
    let yd = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * stats.inv_std[ch];
            let shift = beta[ch] - stats.mean[ch] * scale;
            for v in &mut yd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`. With batch statistics the mean/variance
/// dependence on `x` is differentiated through.
pub fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = channel_slices(x.shape());
    let count = T::of((n * plane) as f64);
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let use_batch = stats.batch_var.is_some();
    for ch in 0..c {
        let (m, is) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (&xv, &g) in xd[r.clone()].iter().zip(&dyd[r]) {
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * (xv - m) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let gm = gamma[ch];
        let dxd = dx.data_mut();
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for ((o, &xv), &g) in dxd[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&dyd[r]) {
                *o = if use_batch {
                    let xhat = (xv - m) * is;
                    gm * is * (g - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    gm * is * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
