//! Layer kernels over channel-major activations (`C × N × H × W`).
//!
//! Keeping channels outermost lets a whole batch go through a convolution as
//! a single matrix product: `out[co, n·h·w] = W[co, ci·9] · cols[ci·9, n·h·w]`.

use crate::tensor::Real;

#[derive(Clone, Debug)]
pub(crate) struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    /// Spatial positions across the batch, i.e. the column count of a plane.
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Unfolds 3×3 neighbourhoods with zero padding 1.
pub(crate) fn im2col3<T: Real>(x: &Act<T>) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let plane = x.plane();
    let mut cols = vec![T::zero(); x.c * 9 * plane];
    for ci in 0..x.c {
        let src = &x.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for n in 0..x.n {
                    let base = n * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = base + sy as usize * w;
                        let drow = base + y * w;
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w - 1),
                        };
                        for xx in x0..x1 {
                            dst[drow + xx] = src[srow + xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im3<T: Real>(cols: &[T], c: usize, n: usize, h: usize, w: usize) -> Act<T> {
    let mut out = Act::zeros(c, n, h, w);
    let plane = n * h * w;
    for ci in 0..c {
        let dst = &mut out.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                let src = &cols[row..row + plane];
                for b in 0..n {
                    let base = b * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = base + sy as usize * w;
                        let srow = base + y * w;
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w - 1),
                        };
                        for xx in x0..x1 {
                            dst[drow + xx + kx - 1] = dst[drow + xx + kx - 1] + src[srow + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward. `k3` selects 3×3 (pad 1) versus 1×1 kernels.
/// Returns the output and, for 3×3 kernels, the unfolded input.
pub(crate) fn conv_forward<T: Real>(
    x: &Act<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k3: bool,
) -> (Act<T>, Option<Vec<T>>) {
    let plane = x.plane();
    let mut out = Act::zeros(cout, x.n, x.h, x.w);
    let cols = if k3 { Some(im2col3(x)) } else { None };
    let kdim = if k3 { x.c * 9 } else { x.c };
    let rhs = cols.as_deref().unwrap_or(&x.data);
    T::gemm(cout, kdim, plane, weight, false, rhs, false, &mut out.data, false);
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut out.data[co * plane..(co + 1) * plane] {
            *v = *v + b;
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Act<T>>,
}

/// Convolution backward given the layer input (`cols` for 3×3, the raw
/// input data for 1×1).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    dout: &Act<T>,
    rhs: &[T],
    weight: &[T],
    cin: usize,
    k3: bool,
    need_input: bool,
) -> ConvGrads<T> {
    let cout = dout.c;
    let plane = dout.plane();
    let kdim = if k3 { cin * 9 } else { cin };
    let mut dw = vec![T::zero(); cout * kdim];
    T::gemm(cout, plane, kdim, &dout.data, false, rhs, true, &mut dw, false);
    let db = (0..cout)
        .map(|co| {
            let s: f64 = dout.data[co * plane..(co + 1) * plane]
                .iter()
                .map(|v| v.f64())
                .sum();
            T::of(s)
        })
        .collect();
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); kdim * plane];
        T::gemm(kdim, cout, plane, weight, true, &dout.data, false, &mut dcols, false);
        if k3 {
            col2im3(&dcols, cin, dout.n, dout.h, dout.w)
        } else {
            Act {
                c: cin,
                n: dout.n,
                h: dout.h,
                w: dout.w,
                data: dcols,
            }
        }
    });
    ConvGrads {
        weight: dw,
        bias: db,
        input,
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Act<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` where the rectified output was not positive.
pub(crate) fn relu_backward<T: Real>(grad: &mut Act<T>, out: &Act<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub(crate) fn avgpool2<T: Real>(x: &Act<T>) -> Act<T> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.n, oh, ow);
    let quarter = T::of(0.25);
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..(cn + 1) * x.h * x.w];
        let dst = &mut out.data[cn * oh * ow..(cn + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward<T: Real>(dout: &Act<T>) -> Act<T> {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let mut dx = Act::zeros(dout.c, dout.n, h, w);
    let quarter = T::of(0.25);
    for cn in 0..dout.c * dout.n {
        let src = &dout.data[cn * dout.h * dout.w..(cn + 1) * dout.h * dout.w];
        let dst = &mut dx.data[cn * h * w..(cn + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * dout.w + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub(crate) fn upsample2<T: Real>(x: &Act<T>) -> Act<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.n, h, w);
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..(cn + 1) * x.h * x.w];
        let dst = &mut out.data[cn * h * w..(cn + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(dout: &Act<T>) -> Act<T> {
    let (oh, ow) = (dout.h / 2, dout.w / 2);
    let mut dx = Act::zeros(dout.c, dout.n, oh, ow);
    for cn in 0..dout.c * dout.n {
        let src = &dout.data[cn * dout.h * dout.w..(cn + 1) * dout.h * dout.w];
        let dst = &mut dx.data[cn * oh * ow..(cn + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * dout.w + 2 * xx;
                dst[y * ow + xx] = src[i] + src[i + 1] + src[i + dout.w] + src[i + dout.w + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &Act<f64>, w: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * x.plane()];
        for co in 0..cout {
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let iv = x.data[((ci * x.n + n) * x.h + sy as usize) * x.w + sx as usize];
                                    s += iv * w[(co * x.c + ci) * 9 + ky * 3 + kx];
                                }
                            }
                        }
                        out[((co * x.n + n) * x.h + y) * x.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let x = Act {
            c: 2,
            n: 2,
            h: 4,
            w: 3,
            data: ramp(2 * 2 * 4 * 3, 2.0),
        };
        let w = ramp(3 * 2 * 9, 1.0);
        let (out, _) = conv_forward(&x, &w, &[0.0; 3], 3, true);
        let expect = naive_conv3(&x, &w, 3);
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Act {
            c: 2,
            n: 1,
            h: 3,
            w: 4,
            data: ramp(24, 1.0),
        };
        let cols = im2col3(&x);
        let y = ramp(cols.len(), 3.0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im3(&y, 2, 1, 3, 4);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = Act {
            c: 1,
            n: 2,
            h: 4,
            w: 4,
            data: ramp(32, 1.0),
        };
        let p = avgpool2(&x);
        let y = ramp(p.data.len(), 2.0);
        let lhs: f64 = p.data.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = avgpool2_backward(&Act { data: y.clone(), ..p.clone() });
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u = upsample2(&p);
        assert_eq!((u.h, u.w), (4, 4));
        let z = ramp(u.data.len(), 1.5);
        let lhs: f64 = u.data.iter().zip(&z).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&Act { data: z, ..u.clone() });
        let rhs: f64 = p.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
