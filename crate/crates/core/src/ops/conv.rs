//! 2-D convolution via im2col + GEMM, with grouped, strided, dilated and
//! asymmetric-kernel support.

use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel with "same"-style padding `k/2`.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self { stride: (stride, stride), pad: (kernel / 2, kernel / 2), dilation: (1, 1), groups: 1 }
    }

    pub fn out_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let eff_h = self.dilation.0 * (kh - 1) + 1;
        let eff_w = self.dilation.1 * (kw - 1) + 1;
        assert!(h + 2 * self.pad.0 >= eff_h && w + 2 * self.pad.1 >= eff_w, "kernel larger than padded input");
        ((h + 2 * self.pad.0 - eff_h) / self.stride.0 + 1, (w + 2 * self.pad.1 - eff_w) / self.stride.1 + 1)
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cig: usize,
    cog: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], wshape: &[usize], spec: &ConvSpec) -> Self {
        assert_eq!(x.len(), 4, "conv input must be rank 4");
        assert_eq!(wshape.len(), 4, "conv weight must be rank 4");
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cig, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let g = spec.groups;
        assert!(g >= 1 && cin % g == 0 && cout % g == 0, "groups must divide channels");
        assert_eq!(cig * g, cin, "weight in-channels {} × groups {} != input channels {}", cig, g, cin);
        let (ho, wo) = spec.out_dims(h, w, kh, kw);
        Self { n, cin, h, w, cout, cig, cog: cout / g, kh, kw, ho, wo }
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == (1, 1) && spec.pad == (0, 0)
    }

    fn col_rows(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(src: &[T], geo: &Geometry, spec: &ConvSpec, col: &mut [T]) {
    let p = geo.positions();
    let mut row = 0;
    for c in 0..geo.cig {
        let plane = &src[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * spec.stride.0 + ki * spec.dilation.0) as isize - spec.pad.0 as isize;
                    let out_row = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride.1 + kj * spec.dilation.1) as isize - spec.pad.1 as isize;
                        *v = if ix < 0 || ix >= geo.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], geo: &Geometry, spec: &ConvSpec, dst: &mut [T]) {
    let p = geo.positions();
    let mut row = 0;
    for c in 0..geo.cig {
        let plane = &mut dst[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * spec.stride.0 + ki * spec.dilation.0) as isize - spec.pad.0 as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for ox in 0..geo.wo {
                        let ix = (ox * spec.stride.1 + kj * spec.dilation.1) as isize - spec.pad.1 as isize;
                        if ix >= 0 && (ix as usize) < geo.w {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * geo.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let geo = Geometry::new(x.shape(), w.shape(), spec);
    let p = geo.positions();
    let kdim = geo.col_rows();
    let mut out = Tensor::zeros(&[geo.n, geo.cout, geo.ho, geo.wo]);
    let pointwise = geo.is_pointwise(spec);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for n in 0..geo.n {
        for g in 0..spec.groups {
            let src = &xd[(n * geo.cin + g * geo.cig) * geo.h * geo.w..(n * geo.cin + (g + 1) * geo.cig) * geo.h * geo.w];
            let cols: &[T] = if pointwise {
                src
            } else {
                im2col(src, &geo, spec, &mut col);
                &col
            };
            let wg = &wd[g * geo.cog * kdim..(g + 1) * geo.cog * kdim];
            let dst = &mut od[(n * geo.cout + g * geo.cog) * p..(n * geo.cout + (g + 1) * geo.cog) * p];
            gemm(false, false, geo.cog, p, kdim, T::one(), wg, cols, T::zero(), dst);
        }
    }
    if let Some(b) = b {
        let bd = b.data();
        assert_eq!(bd.len(), geo.cout, "bias length");
        for n in 0..geo.n {
            for c in 0..geo.cout {
                let bias = bd[c];
                for v in &mut od[(n * geo.cout + c) * p..(n * geo.cout + c + 1) * p] {
                    *v = *v + bias;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
) -> ConvGrads<T> {
    let geo = Geometry::new(x.shape(), w.shape(), spec);
    let p = geo.positions();
    let kdim = geo.col_rows();
    let pointwise = geo.is_pointwise(spec);
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    let mut dcol = vec![T::zero(); kdim * p];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    for n in 0..geo.n {
        for g in 0..spec.groups {
            let plane_range = (n * geo.cin + g * geo.cig) * geo.h * geo.w..(n * geo.cin + (g + 1) * geo.cig) * geo.h * geo.w;
            let src = &xd[plane_range.clone()];
            let cols: &[T] = if pointwise {
                src
            } else {
                im2col(src, &geo, spec, &mut col);
                &col
            };
            let dyg = &dyd[(n * geo.cout + g * geo.cog) * p..(n * geo.cout + (g + 1) * geo.cog) * p];
            let dwg = &mut dw.data_mut()[g * geo.cog * kdim..(g + 1) * geo.cog * kdim];
            gemm(false, true, geo.cog, kdim, p, T::one(), dyg, cols, T::one(), dwg);
            if let Some(dx) = dx.as_mut() {
                let wg = &wd[g * geo.cog * kdim..(g + 1) * geo.cog * kdim];
                let dst = &mut dx.data_mut()[plane_range];
                if pointwise {
                    gemm(true, false, kdim, p, geo.cog, T::one(), wg, dyg, T::one(), dst);
                } else {
                    gemm(true, false, kdim, p, geo.cog, T::one(), wg, dyg, T::zero(), &mut dcol);
                    col2im(&dcol, &geo, spec, dst);
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(&[geo.cout]);
        for n in 0..geo.n {
            for c in 0..geo.cout {
                let s: T = dyd[(n * geo.cout + c) * p..(n * geo.cout + c + 1) * p].iter().copied().sum();
                db.data_mut()[c] = db.data()[c] + s;
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
