//! Raw sequential compute loops behind the graph ops.
//!
//! Every kernel iterates in a fixed order so results are bit-reproducible.
//! Inner loops run over contiguous slices where possible to keep the
//! auto-vectorizer effective.

/// C\[m,n\] = A\[m,k\] x B\[k,n\]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// dA\[m,k\] += G\[m,n\] x B\[k,n\]^T  (rows of G dotted with rows of B)
pub fn matmul_acc_nt(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            da[i * k + p] += s;
        }
    }
}

/// dB\[k,n\] += A\[m,k\]^T x G\[m,n\]
pub fn matmul_acc_tn(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                brow[j] += av * grow[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dCfg {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Valid output-column range for a kernel column `kx`, so that the input
/// column `ox*stride + kx - pad` stays inside `[0, w)`.
fn ox_range(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let kx = kx as isize;
    let pad = pad as isize;
    let s = stride as isize;
    let lo = (pad - kx + s - 1).div_euclid(s).max(0);
    let hi = ((w as isize - 1 - kx + pad).div_euclid(s) + 1).min(ow as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], cfg: &Conv2dCfg) -> Vec<f64> {
    let (oh, ow) = (cfg.out_h(), cfg.out_w());
    let mut y = vec![0.0; cfg.cout * oh * ow];
    for co in 0..cfg.cout {
        let yplane = &mut y[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cfg.cin {
            let xplane = &x[ci * cfg.h * cfg.w..(ci + 1) * cfg.h * cfg.w];
            for ky in 0..cfg.kh {
                for kx in 0..cfg.kw {
                    let wv = w[((co * cfg.cin + ci) * cfg.kh + ky) * cfg.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = ox_range(kx, cfg.pad, cfg.stride, cfg.w, ow);
                    for oy in 0..oh {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                        if iy < 0 || iy >= cfg.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * cfg.w..(iy as usize + 1) * cfg.w];
                        let yrow = &mut yplane[oy * ow..(oy + 1) * ow];
                        if cfg.stride == 1 {
                            let off = kx as isize - cfg.pad as isize;
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * cfg.stride + kx - cfg.pad;
                                yrow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// dX += conv2d backward w.r.t. the input.
pub fn conv2d_acc_dx(g: &[f64], w: &[f64], dx: &mut [f64], cfg: &Conv2dCfg) {
    let (oh, ow) = (cfg.out_h(), cfg.out_w());
    for co in 0..cfg.cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cfg.cin {
            let dxplane = &mut dx[ci * cfg.h * cfg.w..(ci + 1) * cfg.h * cfg.w];
            for ky in 0..cfg.kh {
                for kx in 0..cfg.kw {
                    let wv = w[((co * cfg.cin + ci) * cfg.kh + ky) * cfg.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = ox_range(kx, cfg.pad, cfg.stride, cfg.w, ow);
                    for oy in 0..oh {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                        if iy < 0 || iy >= cfg.h as isize {
                            continue;
                        }
                        let dxrow = &mut dxplane[iy as usize * cfg.w..(iy as usize + 1) * cfg.w];
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * cfg.stride + kx - cfg.pad;
                            dxrow[ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// dW += conv2d backward w.r.t. the kernel.
pub fn conv2d_acc_dw(g: &[f64], x: &[f64], dw: &mut [f64], cfg: &Conv2dCfg) {
    let (oh, ow) = (cfg.out_h(), cfg.out_w());
    for co in 0..cfg.cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cfg.cin {
            let xplane = &x[ci * cfg.h * cfg.w..(ci + 1) * cfg.h * cfg.w];
            for ky in 0..cfg.kh {
                for kx in 0..cfg.kw {
                    let (ox0, ox1) = ox_range(kx, cfg.pad, cfg.stride, cfg.w, ow);
                    let mut s = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                        if iy < 0 || iy >= cfg.h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * cfg.w..(iy as usize + 1) * cfg.w];
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * cfg.stride + kx - cfg.pad;
                            s += grow[ox] * xrow[ix];
                        }
                    }
                    dw[((co * cfg.cin + ci) * cfg.kh + ky) * cfg.kw + kx] += s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dCfg {
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dCfg {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.pad - self.k) / self.stride + 1
    }
}

pub fn conv1d(x: &[f64], w: &[f64], cfg: &Conv1dCfg) -> Vec<f64> {
    let ol = cfg.out_len();
    let mut y = vec![0.0; cfg.cout * ol];
    for co in 0..cfg.cout {
        let yrow = &mut y[co * ol..(co + 1) * ol];
        for ci in 0..cfg.cin {
            let xrow = &x[ci * cfg.len..(ci + 1) * cfg.len];
            for kk in 0..cfg.k {
                let wv = w[(co * cfg.cin + ci) * cfg.k + kk];
                let (o0, o1) = ox_range(kk, cfg.pad, cfg.stride, cfg.len, ol);
                for o in o0..o1 {
                    yrow[o] += wv * xrow[o * cfg.stride + kk - cfg.pad];
                }
            }
        }
    }
    y
}

pub fn conv1d_acc_dx(g: &[f64], w: &[f64], dx: &mut [f64], cfg: &Conv1dCfg) {
    let ol = cfg.out_len();
    for co in 0..cfg.cout {
        let grow = &g[co * ol..(co + 1) * ol];
        for ci in 0..cfg.cin {
            let dxrow = &mut dx[ci * cfg.len..(ci + 1) * cfg.len];
            for kk in 0..cfg.k {
                let wv = w[(co * cfg.cin + ci) * cfg.k + kk];
                let (o0, o1) = ox_range(kk, cfg.pad, cfg.stride, cfg.len, ol);
                for o in o0..o1 {
                    dxrow[o * cfg.stride + kk - cfg.pad] += wv * grow[o];
                }
            }
        }
    }
}

pub fn conv1d_acc_dw(g: &[f64], x: &[f64], dw: &mut [f64], cfg: &Conv1dCfg) {
    let ol = cfg.out_len();
    for co in 0..cfg.cout {
        let grow = &g[co * ol..(co + 1) * ol];
        for ci in 0..cfg.cin {
            let xrow = &x[ci * cfg.len..(ci + 1) * cfg.len];
            for kk in 0..cfg.k {
                let (o0, o1) = ox_range(kk, cfg.pad, cfg.stride, cfg.len, ol);
                let mut s = 0.0;
                for o in o0..o1 {
                    s += grow[o] * xrow[o * cfg.stride + kk - cfg.pad];
                }
                dw[(co * cfg.cin + ci) * cfg.k + kk] += s;
            }
        }
    }
}
