//! im2col convolution and 2x2 max pooling kernels (NCHW, stride 1).

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.height * self.width
    }
}

/// Unfolds one sample into a `patch x positions` matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow, k, pad) = (g.out_h(), g.out_w(), g.kernel, g.pad as isize);
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if pad == 0 {
                        line.copy_from_slice(&src[kj..kj + ow]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + kj as isize - pad;
                            *v = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Folds a `patch x positions` matrix back, accumulating into `dx`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow, k, pad) = (g.out_h(), g.out_w(), g.kernel, g.pad as isize);
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (patch, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.filters * p];
    let mut cols = vec![T::zero(); patch * p];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        let dst = &mut out[n * g.filters * p..(n + 1) * g.filters * p];
        if let Some(b) = bias {
            for (f, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[f]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.filters,
            patch,
            p,
            T::one(),
            w,
            (patch as isize, 1),
            &cols,
            (p as isize, 1),
            beta,
            dst,
            (p as isize, 1),
        );
    }
    out
}

/// Returns `(dx, dw, db)`, each computed only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, p) = (g.patch(), g.positions());
    let mut dx = want.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = want.1.then(|| vec![T::zero(); w.len()]);
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.filters];
        for n in 0..g.batch {
            for (f, acc) in db.iter_mut().enumerate() {
                let off = (n * g.filters + f) * p;
                *acc = *acc + dy[off..off + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); patch * p];
    for n in 0..g.batch {
        let dy_n = &dy[n * g.filters * p..(n + 1) * g.filters * p];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
            // dw += dy_n (F x P) * cols^T (P x patch)
            T::gemm(
                g.filters,
                p,
                patch,
                T::one(),
                dy_n,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                dw,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = w^T (patch x F) * dy_n (F x P)
            T::gemm(
                patch,
                g.filters,
                p,
                T::one(),
                w,
                (1, patch as isize),
                dy_n,
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            col2im(g, &cols, &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2 (trailing odd row/column dropped).
/// Returns pooled values and the flat input index of each maximum.
pub(crate) fn maxpool2x2_forward<T: Real>(shape: &[usize], x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
