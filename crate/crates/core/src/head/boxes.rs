use crate::corpus::BoundingBox;

/// Largest log-scale delta applied when decoding, `ln(1000 / 16)`.
const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356;

/// Standard `(dx, dy, dw, dh)` box parametrisation with per-coordinate weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder {
        weights: [1.0, 1.0, 1.0, 1.0],
    };
    /// Weights used for the detection head's regression targets.
    pub const HEAD: BoxCoder = BoxCoder {
        weights: [10.0, 10.0, 5.0, 5.0],
    };

    /// Deltas taking `from` onto `to`.
    pub fn encode(&self, from: &BoundingBox, to: &BoundingBox) -> [f64; 4] {
        let (fw, fh) = (from.width(), from.height());
        let (fx, fy) = from.center();
        let (tx, ty) = to.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - fx) / fw,
            wy * (ty - fy) / fh,
            ww * (to.width() / fw).ln(),
            wh * (to.height() / fh).ln(),
        ]
    }

    /// Apply `deltas` to `from` without clipping.
    pub fn decode_unclipped(&self, from: &BoundingBox, deltas: &[f64]) -> BoundingBox {
        let (fw, fh) = (from.width(), from.height());
        let (fx, fy) = from.center();
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(MAX_LOG_DELTA);
        let dh = (deltas[3] / wh).min(MAX_LOG_DELTA);
        let (cx, cy) = (fx + dx * fw, fy + dy * fh);
        let (w, h) = (fw * dw.exp(), fh * dh.exp());
        BoundingBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn decode(&self, from: &BoundingBox, deltas: &[f64], width: usize, height: usize) -> BoundingBox {
        self.decode_unclipped(from, deltas).clip(width, height)
    }
}

/// Unit-weight decoding clipped to the frame.
pub fn decode_boxes(proposal: &BoundingBox, deltas: &[f64; 4], width: usize, height: usize) -> BoundingBox {
    BoxCoder::UNIT.decode(proposal, deltas, width, height)
}
