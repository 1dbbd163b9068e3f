//! Grouped bilinear resampling with per-pixel displacements and border clamping.

use crate::tensor::{Scalar, Tensor};

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// Whether the sample coordinate was inside the clamp range on each axis
    /// (outside, the coordinate is constant in the displacement).
    live_x: bool,
    live_y: bool,
}

fn tap<T: Scalar>(col: usize, row: usize, dx: T, dy: T, w: usize, h: usize) -> Tap<T> {
    let max_x = T::of((w - 1) as f64);
    let max_y = T::of((h - 1) as f64);
    let sx_raw = T::of(col as f64) + dx;
    let sy_raw = T::of(row as f64) + dy;
    let live_x = sx_raw >= T::zero() && sx_raw <= max_x;
    let live_y = sy_raw >= T::zero() && sy_raw <= max_y;
    let sx = sx_raw.max(T::zero()).min(max_x);
    let sy = sy_raw.max(T::zero()).min(max_y);
    let x0 = sx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = sy.floor().to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: sx - T::of(x0 as f64),
        ay: sy - T::of(y0 as f64),
        live_x,
        live_y,
    }
}

fn check(x: &Tensor<impl Scalar>, disp: &Tensor<impl Scalar>) -> (usize, usize, usize, usize, usize) {
    let (n, c, h, w) = x.dims4();
    let (dn, dc, dh, dw) = disp.dims4();
    assert!(dn == n && dh == h && dw == w, "displacement field must match feature dims");
    assert!(dc % 2 == 0 && dc > 0, "displacement channels must be 2 × groups");
    let groups = dc / 2;
    assert!(c % groups == 0, "groups must divide channels");
    (n, c, h, w, groups)
}

/// `disp` has shape `(batch, 2·groups, H, W)`; channel `2g` is dx and `2g+1` is dy
/// of group `g`, in feature-cell units.
pub fn grouped_warp<T: Scalar>(x: &Tensor<T>, disp: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w, groups) = check(x, disp);
    let cpg = c / groups;
    let xd = x.data();
    let dd = disp.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for b in 0..n {
        for g in 0..groups {
            let dxp = &dd[((b * 2 * groups) + 2 * g) * h * w..][..h * w];
            let dyp = &dd[((b * 2 * groups) + 2 * g + 1) * h * w..][..h * w];
            for row in 0..h {
                for col in 0..w {
                    let t = tap(col, row, dxp[row * w + col], dyp[row * w + col], w, h);
                    let one = T::one();
                    let (w00, w01) = ((one - t.ax) * (one - t.ay), t.ax * (one - t.ay));
                    let (w10, w11) = ((one - t.ax) * t.ay, t.ax * t.ay);
                    for ch in g * cpg..(g + 1) * cpg {
                        let p = &xd[(b * c + ch) * h * w..][..h * w];
                        od[(b * c + ch) * h * w + row * w + col] = w00 * p[t.y0 * w + t.x0]
                            + w01 * p[t.y0 * w + t.x1]
                            + w10 * p[t.y1 * w + t.x0]
                            + w11 * p[t.y1 * w + t.x1];
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, ddisp)`.
pub fn grouped_warp_backward<T: Scalar>(x: &Tensor<T>, disp: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w, groups) = check(x, disp);
    let cpg = c / groups;
    let xd = x.data();
    let dd = disp.data();
    let gd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut ddisp = Tensor::zeros(disp.shape());
    for b in 0..n {
        for g in 0..groups {
            let dx_off = ((b * 2 * groups) + 2 * g) * h * w;
            let dy_off = dx_off + h * w;
            for row in 0..h {
                for col in 0..w {
                    let i = row * w + col;
                    let t = tap(col, row, dd[dx_off + i], dd[dy_off + i], w, h);
                    let one = T::one();
                    let (w00, w01) = ((one - t.ax) * (one - t.ay), t.ax * (one - t.ay));
                    let (w10, w11) = ((one - t.ax) * t.ay, t.ax * t.ay);
                    let mut gax = T::zero();
                    let mut gay = T::zero();
                    for ch in g * cpg..(g + 1) * cpg {
                        let base = (b * c + ch) * h * w;
                        let gout = gd[base + i];
                        let p = &xd[base..base + h * w];
                        let (v00, v01) = (p[t.y0 * w + t.x0], p[t.y0 * w + t.x1]);
                        let (v10, v11) = (p[t.y1 * w + t.x0], p[t.y1 * w + t.x1]);
                        let dxd = dx.data_mut();
                        dxd[base + t.y0 * w + t.x0] = dxd[base + t.y0 * w + t.x0] + w00 * gout;
                        dxd[base + t.y0 * w + t.x1] = dxd[base + t.y0 * w + t.x1] + w01 * gout;
                        dxd[base + t.y1 * w + t.x0] = dxd[base + t.y1 * w + t.x0] + w10 * gout;
                        dxd[base + t.y1 * w + t.x1] = dxd[base + t.y1 * w + t.x1] + w11 * gout;
                        gax = gax + gout * ((one - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
                        gay = gay + gout * ((one - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
                    }
                    let dd_out = ddisp.data_mut();
                    if t.live_x {
                        dd_out[dx_off + i] = gax;
                    }
                    if t.live_y {
                        dd_out[dy_off + i] = gay;
                    }
                }
            }
        }
    }
    (dx, ddisp)
}
