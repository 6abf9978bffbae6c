//! ROI-Align: bilinear pooling of a box region onto a fixed `grid x grid`
//! lattice, averaging `samples x samples` points per bin.

use crate::corpus::BoundingBox;
use crate::params::Mat;

use super::FeatureMap;

/// Sparse interpolation weights for every `(box, bin)` pair.
#[derive(Debug, Clone)]
pub struct RoiAlignCache {
    /// Indexed by `box * grid^2 + bin`; entries are `(cell, weight)`.
    taps: Vec<Vec<(usize, f64)>>,
    pub grid: usize,
    pub channels: usize,
}

/// Smallest box side, in pixels, used for pooling.
const MIN_BOX_SIDE: f64 = 1.0;

/// Bilinear taps at continuous map position `(y, x)`; empty when the point
/// falls more than one cell outside the map.
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Vec<(usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y_lo = y.floor() as usize;
    let mut x_lo = x.floor() as usize;
    let y_hi;
    let x_hi;
    if y_lo >= h - 1 {
        y_lo = h - 1;
        y_hi = h - 1;
        y = y_lo as f64;
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= w - 1 {
        x_lo = w - 1;
        x_hi = w - 1;
        x = x_lo as f64;
    } else {
        x_hi = x_lo + 1;
    }
    let (ly, lx) = (y - y_lo as f64, x - x_lo as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y_lo * w + x_lo, hy * hx),
        (y_lo * w + x_hi, hy * lx),
        (y_hi * w + x_lo, ly * hx),
        (y_hi * w + x_hi, ly * lx),
    ]
}

/// Pool every box; output row `i` holds `grid^2 * c` values ordered `(bin, channel)`.
pub fn roi_align(map: &FeatureMap, boxes: &[BoundingBox], grid: usize, samples: usize) -> (Mat, RoiAlignCache) {
    let c = map.channels();
    let scale = 1.0 / map.stride as f64;
    let mut taps = Vec::with_capacity(boxes.len() * grid * grid);
    for b in boxes {
        let (mut bw, mut bh) = (b.width(), b.height());
        if bw * bh < 1.0 || bw < MIN_BOX_SIDE || bh < MIN_BOX_SIDE {
            log::debug!("degenerate ROI {:?} clamped to minimum size", b.to_array());
            bw = bw.max(MIN_BOX_SIDE);
            bh = bh.max(MIN_BOX_SIDE);
        }
        let (x0, y0) = (b.x1 * scale - 0.5, b.y1 * scale - 0.5);
        let (bin_w, bin_h) = (bw * scale / grid as f64, bh * scale / grid as f64);
        let norm = 1.0 / (samples * samples) as f64;
        for py in 0..grid {
            for px in 0..grid {
                let mut bin: Vec<(usize, f64)> = Vec::with_capacity(4 * samples * samples);
                for iy in 0..samples {
                    let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / samples as f64;
                    for ix in 0..samples {
                        let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / samples as f64;
                        for (cell, wgt) in bilinear_taps(map.h, map.w, y, x) {
                            bin.push((cell, wgt * norm));
                        }
                    }
                }
                taps.push(bin);
            }
        }
    }
    let cache = RoiAlignCache {
        taps,
        grid,
        channels: c,
    };
    (pool_with(&cache, &map.data, boxes.len()), cache)
}

fn pool_with(cache: &RoiAlignCache, data: &Mat, n: usize) -> Mat {
    let c = cache.channels;
    let bins = cache.grid * cache.grid;
    let mut out = Mat::zeros((n, bins * c));
    let src = data.as_slice().expect("contiguous");
    for i in 0..n {
        let mut row = out.row_mut(i);
        let row = row.as_slice_mut().expect("contiguous row");
        for bin in 0..bins {
            let dst = &mut row[bin * c..(bin + 1) * c];
            for &(cell, wgt) in &cache.taps[i * bins + bin] {
                let s = &src[cell * c..(cell + 1) * c];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += wgt * v;
                }
            }
        }
    }
    out
}

/// Gradient of the feature map given the gradient of the pooled output.
pub fn roi_align_backward(cache: &RoiAlignCache, dpooled: &Mat, map_cells: usize) -> Mat {
    let c = cache.channels;
    let bins = cache.grid * cache.grid;
    let mut dmap = Mat::zeros((map_cells, c));
    let dst = dmap.as_slice_mut().expect("contiguous");
    for (i, row) in dpooled.rows().into_iter().enumerate() {
        for bin in 0..bins {
            for &(cell, wgt) in &cache.taps[i * bins + bin] {
                for ch in 0..c {
                    dst[cell * c + ch] += wgt * row[bin * c + ch];
                }
            }
        }
    }
    dmap
}
