use super::{Real, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c[m,n] = alpha * op(a)[m,k] * op(b)[k,n] + beta * c[m,n]`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Real>(
    ta: Transpose,
    tb: Transpose,
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k, "gemm: a too short");
    assert!(b.len() >= k * n, "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    S::gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c);
}

/// Geometry of a stride-1 square-kernel convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn check(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        pad: usize,
    ) -> Result<(usize, ConvGeom), TensorError> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        }
        let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wcin, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
        if wcin != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel must be square and odd, got {k}x{k2}"),
            ));
        }
        if pad != (k - 1) / 2 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("padding {pad} does not give same-size output for kernel {k}"),
            ));
        }
        if bias != [cout] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias shape {bias:?} does not match {cout} output channels"),
            ));
        }
        Ok((
            b,
            ConvGeom {
                cin,
                cout,
                h,
                w,
                k,
                pad,
            },
        ))
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin*k*k, h*w]` patches.
pub(crate) fn im2col<S: Real>(g: &ConvGeom, img: &[S], col: &mut [S]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad as isize);
    let hw = g.pixels();
    for ci in 0..g.cin {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    let x0 = (-dx).max(0);
                    let x1 = (w - dx).min(w);
                    out[..x0 as usize].fill(S::zero());
                    if x1 > x0 {
                        out[x0 as usize..x1 as usize]
                            .copy_from_slice(&src[(x0 + dx) as usize..(x1 + dx) as usize]);
                    }
                    out[x1.max(x0) as usize..].fill(S::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds patch gradients back onto image gradients.
pub(crate) fn col2im_add<S: Real>(g: &ConvGeom, col: &[S], img: &mut [S]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad as isize);
    let hw = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let x0 = (-dx).max(0);
                    let x1 = (w - dx).min(w);
                    if x1 <= x0 {
                        continue;
                    }
                    let s = &src[(y * w + x0) as usize..(y * w + x1) as usize];
                    let d = &mut plane[(sy * w + x0 + dx) as usize..(sy * w + x1 + dx) as usize];
                    d.iter_mut().zip(s).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
    }
}

/// Same-size convolution. Returns the output and, when `keep_cols`, the
/// per-image patch matrices needed for the weight gradient.
pub fn conv2d_forward<S: Real>(
    input: &[S],
    input_shape: &[usize],
    weight: &[S],
    weight_shape: &[usize],
    bias: &[S],
    pad: usize,
) -> Result<(Vec<S>, Vec<usize>), TensorError> {
    let (out, shape, _) =
        conv2d_impl(input, input_shape, weight, weight_shape, bias, pad, false)?;
    Ok((out, shape))
}

pub(crate) fn conv2d_impl<S: Real>(
    input: &[S],
    input_shape: &[usize],
    weight: &[S],
    weight_shape: &[usize],
    bias: &[S],
    pad: usize,
    keep_cols: bool,
) -> Result<(Vec<S>, Vec<usize>, Vec<S>), TensorError> {
    let (batch, g) = ConvGeom::check(input_shape, weight_shape, &[bias.len()], pad)?;
    let hw = g.pixels();
    let rows = g.col_rows();
    let mut out = vec![S::zero(); batch * g.cout * hw];
    let mut cols = if keep_cols {
        vec![S::zero(); batch * rows * hw]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols || g.k == 1 {
        Vec::new()
    } else {
        vec![S::zero(); rows * hw]
    };
    for b in 0..batch {
        let img = &input[b * g.cin * hw..(b + 1) * g.cin * hw];
        let dst = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        for (co, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        let col: &[S] = if g.k == 1 {
            img
        } else if keep_cols {
            let c = &mut cols[b * rows * hw..(b + 1) * rows * hw];
            im2col(&g, img, c);
            c
        } else {
            im2col(&g, img, &mut scratch);
            &scratch
        };
        gemm(
            Transpose::No,
            Transpose::No,
            g.cout,
            rows,
            hw,
            S::one(),
            weight,
            col,
            S::one(),
            dst,
        );
    }
    if keep_cols && g.k == 1 {
        cols = input.to_vec();
    }
    Ok((out, vec![batch, g.cout, g.h, g.w], cols))
}
