use crate::real::Real;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one CHW image into a `[C*k*k, Ho*Wo]` column matrix (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [T]) {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let hw = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < w
                        let lo = pad.saturating_sub(kj).min(wo);
                        let hi = (w + pad).saturating_sub(kj).min(wo).max(lo);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let off = lo + kj - pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into a CHW gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [T]) {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
