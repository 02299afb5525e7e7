//! Numeric kernels behind the tape operations.

/// C[m x n] = A[m x k] * B[k x n], row-major.
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

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }
}

/// Cross-correlation (no kernel flip): input [N,C,H,W], kernel [F,C,k,k].
pub fn conv2d(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_ch * ho * wo];
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            for c in 0..g.in_ch {
                let kbase = (f * g.in_ch + c) * g.k * g.k;
                let ibase = (n * g.in_ch + c) * g.h * g.w;
                let obase = (n * g.out_ch + f) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += input[ibase + iy as usize * g.w + ix as usize]
                                    * kernel[kbase + ky * g.k + kx];
                            }
                        }
                        out[obase + oy * wo + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input: out_grad [N,F,Ho,Wo] -> [N,C,H,W].
pub fn conv2d_input_grad(out_grad: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.in_ch * g.h * g.w];
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            let gbase = (n * g.out_ch + f) * ho * wo;
            for c in 0..g.in_ch {
                let kbase = (f * g.in_ch + c) * g.k * g.k;
                let ibase = (n * g.in_ch + c) * g.h * g.w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = out_grad[gbase + oy * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                out[ibase + iy as usize * g.w + ix as usize] +=
                                    gv * kernel[kbase + ky * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its kernel: -> [F,C,k,k].
pub fn conv2d_kernel_grad(input: &[f64], out_grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.out_ch * g.in_ch * g.k * g.k];
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            let gbase = (n * g.out_ch + f) * ho * wo;
            for c in 0..g.in_ch {
                let kbase = (f * g.in_ch + c) * g.k * g.k;
                let ibase = (n * g.in_ch + c) * g.h * g.w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = out_grad[gbase + oy * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                out[kbase + ky * g.k + kx] +=
                                    gv * input[ibase + iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
