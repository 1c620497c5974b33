//! Batched compute kernels. Convolutions are stride 1 with "same" zero padding
//! (`kernel / 2` on each side, odd kernels only).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("shape matches buffer")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("shape matches buffer")
}

/// `y[n, o] = Σ_i x[n, i] · w[o, i]`, written into `y` (overwritten).
pub fn dense_forward(x: &[f64], w: &[f64], n: usize, inp: usize, out: usize, y: &mut [f64]) {
    let xv = view(x, n, inp);
    let wv = view(w, out, inp);
    general_mat_mul(1.0, &xv, &wv.t(), 0.0, &mut view_mut(y, n, out));
}

/// Accumulates `dw += dyᵀ·x` and writes `dx = dy·w`.
pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    inp: usize,
    out: usize,
    dw: &mut [f64],
    dx: &mut [f64],
) {
    let dyv = view(dy, n, out);
    general_mat_mul(1.0, &dyv.t(), &view(x, n, inp), 1.0, &mut view_mut(dw, out, inp));
    general_mat_mul(1.0, &dyv, &view(w, out, inp), 0.0, &mut view_mut(dx, n, inp));
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
    pub fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// Column matrix `[C·k·k, N·H·W]` of the zero-padded input.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, cols_n) = (g.hw(), g.n * g.hw());
    let mut cols = vec![0.0; g.ckk() * cols_n];
    let p = g.pad();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c_in + c) * hw..(n * g.c_in + c + 1) * hw];
                    let dst = &mut dst_row[n * hw..(n + 1) * hw];
                    for oy in 0..g.h {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_line = &mut dst[oy * g.w..(oy + 1) * g.w];
                        let dx = kx as isize - p;
                        let lo = (-dx).max(0) as usize;
                        let hi = (g.w as isize - dx).min(g.w as isize).max(0) as usize;
                        for ox in lo..hi {
                            dst_line[ox] = src_line[(ox as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column-matrix gradient back onto the input layout.
pub fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (hw, cols_n) = (g.hw(), g.n * g.hw());
    let p = g.pad();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &dcols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &src_row[n * hw..(n + 1) * hw];
                    let dst = &mut dx[(n * g.c_in + c) * hw..(n * g.c_in + c + 1) * hw];
                    for oy in 0..g.h {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dx_off = kx as isize - p;
                        let lo = (-dx_off).max(0) as usize;
                        let hi = (g.w as isize - dx_off).min(g.w as isize).max(0) as usize;
                        for ox in lo..hi {
                            dst[iy as usize * g.w + (ox as isize + dx_off) as usize] += src[oy * g.w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution output `[N, C_out, H, W]` accumulated into `y` with weight `scale`.
pub fn conv_forward(cols: &[f64], w: &[f64], g: &ConvGeom, scale: f64, y: &mut [f64]) {
    let hw = g.hw();
    let cols_n = g.n * hw;
    let mut out = vec![0.0; g.c_out * cols_n];
    general_mat_mul(
        1.0,
        &view(w, g.c_out, g.ckk()),
        &view(cols, g.ckk(), cols_n),
        0.0,
        &mut view_mut(&mut out, g.c_out, cols_n),
    );
    for n in 0..g.n {
        for o in 0..g.c_out {
            let src = &out[o * cols_n + n * hw..o * cols_n + (n + 1) * hw];
            let dst = &mut y[(n * g.c_out + o) * hw..(n * g.c_out + o + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Given `dy` in `[N, C_out, H, W]` (already scaled for this branch),
/// accumulates `dw` and adds the input gradient into `dx`.
pub fn conv_backward(cols: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, dw: &mut [f64], dx: &mut [f64]) {
    let hw = g.hw();
    let cols_n = g.n * hw;
    let mut dout = vec![0.0; g.c_out * cols_n];
    for n in 0..g.n {
        for o in 0..g.c_out {
            dout[o * cols_n + n * hw..o * cols_n + (n + 1) * hw]
                .copy_from_slice(&dy[(n * g.c_out + o) * hw..(n * g.c_out + o + 1) * hw]);
        }
    }
    let dout_v = view(&dout, g.c_out, cols_n);
    general_mat_mul(
        1.0,
        &dout_v,
        &view(cols, g.ckk(), cols_n).t(),
        1.0,
        &mut view_mut(dw, g.c_out, g.ckk()),
    );
    let mut dcols = vec![0.0; g.ckk() * cols_n];
    general_mat_mul(
        1.0,
        &view(w, g.c_out, g.ckk()).t(),
        &dout_v,
        0.0,
        &mut view_mut(&mut dcols, g.ckk(), cols_n),
    );
    col2im(&dcols, g, dx);
}

/// Depthwise convolution (`c_out == c_in`, weight `[C, 1, k, k]`) accumulated into `y`.
pub fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom, scale: f64, y: &mut [f64]) {
    let (hw, k, p) = (g.hw(), g.k, g.pad());
    for n in 0..g.n {
        for c in 0..g.c_in {
            let src = &x[(n * g.c_in + c) * hw..(n * g.c_in + c + 1) * hw];
            let dst = &mut y[(n * g.c_in + c) * hw..(n * g.c_in + c + 1) * hw];
            let wc = &w[c * k * k..(c + 1) * k * k];
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += wc[ky * k + kx] * src[iy as usize * g.w + ix as usize];
                        }
                    }
                    dst[oy * g.w + ox] += scale * acc;
                }
            }
        }
    }
}

pub fn depthwise_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, dw: &mut [f64], dx: &mut [f64]) {
    let (hw, k, p) = (g.hw(), g.k, g.pad());
    for n in 0..g.n {
        for c in 0..g.c_in {
            let base = (n * g.c_in + c) * hw;
            let wc = &w[c * k * k..(c + 1) * k * k];
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let d = dy[base + oy * g.w + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = base + iy as usize * g.w + ix as usize;
                            dw[c * k * k + ky * k + kx] += d * x[xi];
                            dx[xi] += d * wc[ky * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling; returns output and the flat argmax index of each output.
pub fn maxpool_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
