use crate::error::{MsmError, Result};
use crate::imaging::{reflect, ImageGrid};

/// Per-pixel median over a `window x window` neighbourhood with
/// symmetric-reflect borders.
pub fn median_filter(image: &ImageGrid, window: usize) -> Result<ImageGrid> {
    if window % 2 == 0 {
        return Err(MsmError::arg(format!("median window must be odd, got {window}")));
    }
    if window > 1 && window >= image.height().min(image.width()) {
        return Err(MsmError::arg(format!("median window {window} not smaller than image side")));
    }
    image.ensure_finite()?;
    if window == 1 {
        return Ok(image.clone());
    }
    let (h, w) = image.dims();
    let r = (window / 2) as isize;
    let src = image.pixels();
    let mut buf = Vec::with_capacity(window * window);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            buf.clear();
            for dy in -r..=r {
                let row = &src[reflect(y + dy, h) * w..][..w];
                buf.extend((-r..=r).map(|dx| row[reflect(x + dx, w)]));
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
            out.push(*m);
        }
    }
    Ok(image.with_pixels(out))
}
