//! Bilinear interpolation shared by image resizing, positional-embedding
//! rescaling, and teacher-to-student grid alignment.
//!
//! Uses the half-pixel-center convention: destination sample `j` reads source
//! coordinate `(j + 0.5) * src/dst - 0.5`, clamped to the source range. A
//! constant input therefore stays exactly constant at any size, and resizing
//! to the same size is the identity.

/// Per-destination-index source taps along one axis: `(i0, i1, w1)` meaning
/// `out[j] = (1 - w1) * src[i0] + w1 * src[i1]`.
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    assert!(src > 0 && dst > 0);
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Resize a row-major `[src_h, src_w]` plane of `d`-dim vectors (layout
/// `[src_h * src_w, d]`) to `[dst_h * dst_w, d]`.
pub(crate) fn resize_plane(
    input: &[f64],
    d: usize,
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), src_h * src_w * d);
    let ty = axis_taps(src_h, dst_h);
    let tx = axis_taps(src_w, dst_w);
    let mut out = vec![0.0; dst_h * dst_w * d];
    for (yi, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (xi, &(x0, x1, wx)) in tx.iter().enumerate() {
            let dst = &mut out[(yi * dst_w + xi) * d..(yi * dst_w + xi + 1) * d];
            for c in 0..d {
                let v00 = input[(y0 * src_w + x0) * d + c];
                let v01 = input[(y0 * src_w + x1) * d + c];
                let v10 = input[(y1 * src_w + x0) * d + c];
                let v11 = input[(y1 * src_w + x1) * d + c];
                dst[c] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    }
    out
}
