//! Forward and backward numeric kernels shared by the recording tape and the
//! no-grad evaluation path. All layouts are row-major.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// dA[m,k] = dC[m,n] * B^T;  accumulates into `da`.
pub fn matmul_backward_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (dv, bv) in dcrow.iter().zip(brow) {
                acc += dv * bv;
            }
            darow[p] += acc;
        }
    }
}

/// dB[k,n] = A^T * dC[m,n];  accumulates into `db`.
pub fn matmul_backward_b(dc: &[f64], a: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &dv) in dbrow.iter_mut().zip(dcrow) {
                *o += av * dv;
            }
        }
    }
}

/// Spatial dims for stride-1 "same" convolution with zero padding kh/2.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn pad_h(&self) -> usize {
        self.kh / 2
    }
    pub fn pad_w(&self) -> usize {
        self.kw / 2
    }
}

/// Direct stride-1 zero-padded convolution; output is N x Co x H x W.
pub fn conv2d(x: &[f64], wgt: &[f64], d: ConvDims) -> Vec<f64> {
    let (ph, pw) = (d.pad_h() as isize, d.pad_w() as isize);
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.n * d.co * hw];
    for nb in 0..d.n {
        for co in 0..d.co {
            let obase = (nb * d.co + co) * hw;
            for ci in 0..d.ci {
                let xbase = (nb * d.ci + ci) * hw;
                let wbase = (co * d.ci + ci) * d.kh * d.kw;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = wgt[wbase + kh * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = kh as isize - ph;
                        let dx = kw as isize - pw;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (d.h as isize - dy).min(d.h as isize) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (d.w as isize - dx).min(d.w as isize) as usize;
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let orow = obase + oy * d.w;
                            let irow = xbase + iy * d.w;
                            let istart = (irow as isize + x0 as isize + dx) as usize;
                            let xs = &x[istart..istart + (x1 - x0)];
                            let os = &mut out[orow + x0..orow + x1];
                            for (o, &xv) in os.iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Input gradient of [`conv2d`]; accumulates into `dx`.
pub fn conv2d_backward_input(dout: &[f64], wgt: &[f64], dx: &mut [f64], d: ConvDims) {
    let (ph, pw) = (d.pad_h() as isize, d.pad_w() as isize);
    let hw = d.h * d.w;
    for nb in 0..d.n {
        for co in 0..d.co {
            let obase = (nb * d.co + co) * hw;
            for ci in 0..d.ci {
                let xbase = (nb * d.ci + ci) * hw;
                let wbase = (co * d.ci + ci) * d.kh * d.kw;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = wgt[wbase + kh * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = kh as isize - ph;
                        let dx_off = kw as isize - pw;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (d.h as isize - dy).min(d.h as isize) as usize;
                        let x0 = (-dx_off).max(0) as usize;
                        let x1 = (d.w as isize - dx_off).min(d.w as isize) as usize;
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let orow = obase + oy * d.w;
                            let irow = xbase + iy * d.w;
                            let istart = (irow as isize + x0 as isize + dx_off) as usize;
                            let dxs = &mut dx[istart..istart + (x1 - x0)];
                            let douts = &dout[orow + x0..orow + x1];
                            for (dv, &ov) in dxs.iter_mut().zip(douts) {
                                *dv += wv * ov;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient of [`conv2d`]; accumulates into `dw`.
pub fn conv2d_backward_weight(dout: &[f64], x: &[f64], dw: &mut [f64], d: ConvDims) {
    let (ph, pw) = (d.pad_h() as isize, d.pad_w() as isize);
    let hw = d.h * d.w;
    for nb in 0..d.n {
        for co in 0..d.co {
            let obase = (nb * d.co + co) * hw;
            for ci in 0..d.ci {
                let xbase = (nb * d.ci + ci) * hw;
                let wbase = (co * d.ci + ci) * d.kh * d.kw;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let dy = kh as isize - ph;
                        let dx_off = kw as isize - pw;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (d.h as isize - dy).min(d.h as isize) as usize;
                        let x0 = (-dx_off).max(0) as usize;
                        let x1 = (d.w as isize - dx_off).min(d.w as isize) as usize;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let orow = obase + oy * d.w;
                            let irow = xbase + iy * d.w;
                            let istart = (irow as isize + x0 as isize + dx_off) as usize;
                            let xs = &x[istart..istart + (x1 - x0)];
                            let douts = &dout[orow + x0..orow + x1];
                            for (&ov, &xv) in douts.iter().zip(xs) {
                                acc += ov * xv;
                            }
                        }
                        dw[wbase + kh * d.kw + kw] += acc;
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over contiguous rows of length `row`.
pub fn softmax_rows(x: &[f64], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Row-wise log-softmax over contiguous rows of length `row`.
pub fn log_softmax_rows(x: &[f64], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(matmul(&eye, &a, 3, 3, 3), a);
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax_rows(&[0.0, 0.0, 0.0], 3);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1x3x3 input, single 3x3 kernel with center 1 reproduces the input
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let d = ConvDims { n: 1, ci: 1, h: 3, w: 3, co: 1, kh: 3, kw: 3 };
        assert_eq!(conv2d(&x, &w, d), x);
    }
}
