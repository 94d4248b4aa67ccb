//! Convolution kernels. Each output element is accumulated in a fixed
//! order; parallel splits never cross an accumulation.

use rayon::prelude::*;

pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Yields `(dy, dx, y0, y1, x0, x1)` for every kernel tap: the valid
/// output row/column ranges for a "same" padded convolution.
fn taps(d: &ConvDims) -> Vec<(isize, isize, usize, usize, usize, usize)> {
    let p = (d.k / 2) as isize;
    let (h, w) = (d.h as isize, d.w as isize);
    let mut out = Vec::with_capacity(d.k * d.k);
    for ky in 0..d.k as isize {
        for kx in 0..d.k as isize {
            let dy = ky - p;
            let dx = kx - p;
            let y0 = (-dy).max(0);
            let y1 = (h - dy).min(h);
            let x0 = (-dx).max(0);
            let x1 = (w - dx).min(w);
            out.push((dy, dx, y0 as usize, y1.max(0) as usize, x0 as usize, x1.max(0) as usize));
        }
    }
    out
}

pub fn conv2d_forward(x: &[f32], wt: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
    let hw = d.hw();
    let taps = taps(d);
    let kk = d.k * d.k;
    let mut out = vec![0.0f32; d.n * d.co * hw];
    out.par_chunks_mut(d.co * hw)
        .zip(x.par_chunks(d.ci * hw))
        .for_each(|(oimg, ximg)| {
            for o in 0..d.co {
                let plane = &mut oimg[o * hw..(o + 1) * hw];
                plane.fill(b[o]);
                for i in 0..d.ci {
                    let xin = &ximg[i * hw..(i + 1) * hw];
                    let wrow = &wt[(o * d.ci + i) * kk..(o * d.ci + i + 1) * kk];
                    for (t, &(dy, dx, y0, y1, x0, x1)) in taps.iter().enumerate() {
                        let wv = wrow[t];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut plane[y * d.w + x0..y * d.w + x1];
                            let s0 = (x0 as isize + dx) as usize;
                            let irow = &xin[sy * d.w + s0..sy * d.w + s0 + (x1 - x0)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &[f32],
    wt: &[f32],
    dout: &[f32],
    d: &ConvDims,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hw = d.hw();
    let taps = taps(d);
    let kk = d.k * d.k;

    let mut dx = vec![0.0f32; d.n * d.ci * hw];
    dx.par_chunks_mut(d.ci * hw)
        .zip(dout.par_chunks(d.co * hw))
        .for_each(|(dximg, dimg)| {
            for i in 0..d.ci {
                let dplane = &mut dximg[i * hw..(i + 1) * hw];
                for o in 0..d.co {
                    let g = &dimg[o * hw..(o + 1) * hw];
                    let wrow = &wt[(o * d.ci + i) * kk..(o * d.ci + i + 1) * kk];
                    for (t, &(dy, dx_, y0, y1, x0, x1)) in taps.iter().enumerate() {
                        let wv = wrow[t];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s0 = (x0 as isize + dx_) as usize;
                            let drow = &mut dplane[sy * d.w + s0..sy * d.w + s0 + (x1 - x0)];
                            let grow = &g[y * d.w + x0..y * d.w + x1];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        });

    let mut dw = vec![0.0f32; d.co * d.ci * kk];
    dw.par_chunks_mut(d.ci * kk).enumerate().for_each(|(o, dwo)| {
        for n in 0..d.n {
            let g = &dout[(n * d.co + o) * hw..(n * d.co + o + 1) * hw];
            for i in 0..d.ci {
                let xin = &x[(n * d.ci + i) * hw..(n * d.ci + i + 1) * hw];
                for (t, &(dy, dx_, y0, y1, x0, x1)) in taps.iter().enumerate() {
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx_) as usize;
                        let irow = &xin[sy * d.w + s0..sy * d.w + s0 + (x1 - x0)];
                        let grow = &g[y * d.w + x0..y * d.w + x1];
                        for (iv, gv) in irow.iter().zip(grow) {
                            acc += iv * gv;
                        }
                    }
                    dwo[i * kk + t] += acc;
                }
            }
        }
    });

    let mut db = vec![0.0f32; d.co];
    for n in 0..d.n {
        for (o, dbo) in db.iter_mut().enumerate() {
            *dbo += dout[(n * d.co + o) * hw..(n * d.co + o + 1) * hw].iter().sum::<f32>();
        }
    }
    (dx, dw, db)
}

pub struct TConvDims {
    pub b: usize,
    pub f: usize,
    pub ci: usize,
    pub co: usize,
    pub hw: usize,
    pub k: usize,
}

/// Temporal ("tube") convolution over the frame axis of `[B, F, C, H, W]`
/// with zero padding at the clip ends.
pub fn tconv_forward(x: &[f32], wt: &[f32], bias: &[f32], d: &TConvDims) -> Vec<f32> {
    let p = d.k / 2;
    let mut out = vec![0.0f32; d.b * d.f * d.co * d.hw];
    out.par_chunks_mut(d.co * d.hw).enumerate().for_each(|(bf, oframe)| {
        let (bi, f) = (bf / d.f, bf % d.f);
        for o in 0..d.co {
            let plane = &mut oframe[o * d.hw..(o + 1) * d.hw];
            plane.fill(bias[o]);
            for t in 0..d.k {
                let ff = f as isize + t as isize - p as isize;
                if ff < 0 || ff >= d.f as isize {
                    continue;
                }
                let src = &x[(bi * d.f + ff as usize) * d.ci * d.hw..];
                for i in 0..d.ci {
                    let wv = wt[(o * d.ci + i) * d.k + t];
                    for (ov, iv) in plane.iter_mut().zip(&src[i * d.hw..(i + 1) * d.hw]) {
                        *ov += wv * iv;
                    }
                }
            }
        }
    });
    out
}

pub fn tconv_backward(
    x: &[f32],
    wt: &[f32],
    dout: &[f32],
    d: &TConvDims,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let p = d.k / 2;
    let mut dx = vec![0.0f32; d.b * d.f * d.ci * d.hw];
    dx.par_chunks_mut(d.ci * d.hw).enumerate().for_each(|(bf, dframe)| {
        let (bi, ff) = (bf / d.f, bf % d.f);
        for i in 0..d.ci {
            let plane = &mut dframe[i * d.hw..(i + 1) * d.hw];
            for t in 0..d.k {
                // output frame f reads input frame ff = f + t - p
                let f = ff as isize - t as isize + p as isize;
                if f < 0 || f >= d.f as isize {
                    continue;
                }
                let g = &dout[(bi * d.f + f as usize) * d.co * d.hw..];
                for o in 0..d.co {
                    let wv = wt[(o * d.ci + i) * d.k + t];
                    for (dv, gv) in plane.iter_mut().zip(&g[o * d.hw..(o + 1) * d.hw]) {
                        *dv += wv * gv;
                    }
                }
            }
        }
    });

    let mut dw = vec![0.0f32; d.co * d.ci * d.k];
    dw.par_chunks_mut(d.ci * d.k).enumerate().for_each(|(o, dwo)| {
        for bi in 0..d.b {
            for f in 0..d.f {
                let g = &dout[((bi * d.f + f) * d.co + o) * d.hw..][..d.hw];
                for t in 0..d.k {
                    let ff = f as isize + t as isize - p as isize;
                    if ff < 0 || ff >= d.f as isize {
                        continue;
                    }
                    let src = &x[(bi * d.f + ff as usize) * d.ci * d.hw..];
                    for i in 0..d.ci {
                        let acc: f32 = g
                            .iter()
                            .zip(&src[i * d.hw..(i + 1) * d.hw])
                            .map(|(a, b)| a * b)
                            .sum();
                        dwo[i * d.k + t] += acc;
                    }
                }
            }
        }
    });

    let mut db = vec![0.0f32; d.co];
    for bf in 0..d.b * d.f {
        for (o, dbo) in db.iter_mut().enumerate() {
            *dbo += dout[(bf * d.co + o) * d.hw..(bf * d.co + o + 1) * d.hw]
                .iter()
                .sum::<f32>();
        }
    }
    (dx, dw, db)
}
