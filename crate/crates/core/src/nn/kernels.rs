//! Compute kernels behind the graph ops. All loops run in a fixed order so
//! forward and backward are deterministic for a given input.

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] . b[k,n]
pub fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += transpose(a[k,m]) . b[k,n]
pub fn matmul_at_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] . transpose(b[n,k])
pub fn matmul_bt_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Spatial geometry of a conv or pool op.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image [cin,h,w] into col[cin*kh*kw, oh*ow]; padded taps are 0.
pub fn im2col<T: Scalar>(img: &[T], g: &Conv2dGeom, col: &mut [T]) {
    let p = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows() * p);
    let mut row = 0usize;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let out_row = &mut col[row * p..(row + 1) * p];
                let mut idx = 0usize;
                for oi in 0..g.oh {
                    let ih = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.ow {
                        let iw = (oj * g.stride + kj) as isize - g.padding as isize;
                        out_row[idx] = if ih >= 0
                            && (ih as usize) < g.h
                            && iw >= 0
                            && (iw as usize) < g.w
                        {
                            plane[ih as usize * g.w + iw as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold col gradients back onto the image, skipping padded taps.
pub fn col2im_acc<T: Scalar>(col: &[T], g: &Conv2dGeom, img: &mut [T]) {
    let p = g.col_cols();
    let mut row = 0usize;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let col_row = &col[row * p..(row + 1) * p];
                let mut idx = 0usize;
                for oi in 0..g.oh {
                    let ih = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.ow {
                        let iw = (oj * g.stride + kj) as isize - g.padding as isize;
                        if ih >= 0 && (ih as usize) < g.h && iw >= 0 && (iw as usize) < g.w {
                            plane[ih as usize * g.w + iw as usize] += col_row[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    batch: usize,
    g: &Conv2dGeom,
    out: &mut [T],
    col: &mut Vec<T>,
) {
    let k = g.col_rows();
    let p = g.col_cols();
    col.clear();
    col.resize(k * p, T::zero());
    let img_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    for b in 0..batch {
        im2col(&x[b * img_len..(b + 1) * img_len], g, col);
        let out_b = &mut out[b * out_len..(b + 1) * out_len];
        out_b.fill(T::zero());
        matmul_acc(out_b, w, col, g.cout, k, p);
        for c in 0..g.cout {
            let bv = bias[c];
            for o in &mut out_b[c * p..(c + 1) * p] {
                *o += bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    g: &Conv2dGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    col: &mut Vec<T>,
    dcol: &mut Vec<T>,
) {
    let k = g.col_rows();
    let p = g.col_cols();
    let img_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    col.clear();
    col.resize(k * p, T::zero());
    dcol.clear();
    dcol.resize(k * p, T::zero());
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for b in 0..batch {
        let dout_b = &dout[b * out_len..(b + 1) * out_len];
        if dw.is_some() || db.is_some() {
            if let Some(dw) = dw.as_deref_mut() {
                im2col(&x[b * img_len..(b + 1) * img_len], g, col);
                matmul_bt_acc(dw, dout_b, col, g.cout, p, k);
            }
            if let Some(db) = db.as_deref_mut() {
                for c in 0..g.cout {
                    let mut acc = T::zero();
                    for &v in &dout_b[c * p..(c + 1) * p] {
                        acc += v;
                    }
                    db[c] += acc;
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcol.fill(T::zero());
            matmul_at_acc(dcol, w, dout_b, k, g.cout, p);
            col2im_acc(dcol, g, &mut dx[b * img_len..(b + 1) * img_len]);
        }
    }
}

pub fn dense_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    batch: usize,
    n: usize,
    m: usize,
    out: &mut [T],
) {
    out.fill(T::zero());
    matmul_acc(out, x, w, batch, n, m);
    for b in 0..batch {
        let row = &mut out[b * m..(b + 1) * m];
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    n: usize,
    m: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        matmul_bt_acc(dx, dout, w, batch, m, n);
    }
    if let Some(dw) = dw {
        matmul_at_acc(dw, x, dout, n, batch, m);
    }
    if let Some(db) = db {
        for b in 0..batch {
            let row = &dout[b * m..(b + 1) * m];
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
}

/// Per-window max with the argmax (flat input offset) recorded for backward.
/// Ties break to the first element in row-major scan order.
pub fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut Vec<usize>,
) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    argmax.clear();
    argmax.resize(batch * channels * oh * ow, 0);
    let mut oidx = 0usize;
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best_idx = base + (oi * stride) * w + oj * stride;
                    let mut best = x[best_idx];
                    for ki in 0..window {
                        for kj in 0..window {
                            let idx = base + (oi * stride + ki) * w + (oj * stride + kj);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oidx] = best;
                    argmax[oidx] = best_idx;
                    oidx += 1;
                }
            }
        }
    }
}

pub fn maxpool2d_backward<T: Scalar>(dout: &[T], argmax: &[usize], dx: &mut [T]) {
    for (&g, &idx) in dout.iter().zip(argmax) {
        dx[idx] += g;
    }
}

/// Rowwise stable softmax over the last dimension of a [rows, cols] slice.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// dx += y * (dy - sum(dy * y)) rowwise, where y is the softmax output.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, cols: usize, dx: &mut [T]) {
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (&yv, &dv) in y_row.iter().zip(dy_row) {
            dot += yv * dv;
        }
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((d, &yv), &dv) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *d += yv * (dv - dot);
        }
    }
}

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
/// Fills `probs` with the softmax rows for the backward pass.
pub fn softmax_cross_entropy_forward<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    rows: usize,
    cols: usize,
    probs: &mut [T],
) -> T {
    softmax_rows(logits, rows, cols, probs);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut lse = T::zero();
        for &v in row {
            lse += (v - max).exp();
        }
        let logp = row[label] - max - lse.ln();
        loss -= logp;
    }
    loss / T::from_f64(rows as f64)
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &[T],
    labels: &[usize],
    rows: usize,
    cols: usize,
    upstream: T,
    dlogits: &mut [T],
) {
    let scale = upstream / T::from_f64(rows as f64);
    for (r, &label) in labels.iter().enumerate() {
        let p_row = &probs[r * cols..(r + 1) * cols];
        let d_row = &mut dlogits[r * cols..(r + 1) * cols];
        for (c, (d, &p)) in d_row.iter_mut().zip(p_row).enumerate() {
            let target = if c == label { T::one() } else { T::zero() };
            *d += scale * (p - target);
        }
    }
}
