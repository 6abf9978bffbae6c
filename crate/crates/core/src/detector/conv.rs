//! 3x3 convolution (padding 1) via im2col. Feature maps are `(h*w) x c`
//! matrices in row-major spatial order.

use ndarray::Axis;

use crate::params::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - 1) / self.stride + 1
    }
}

/// Patch matrix: one row per output position, `9 * in_c` columns ordered
/// `(ky, kx, c)`.
pub fn im2col(input: &Mat, shape: ConvShape) -> Mat {
    let ConvShape { in_h, in_w, in_c, stride } = shape;
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let mut cols = Mat::zeros((oh * ow, 9 * in_c));
    let src = input.as_slice().expect("contiguous feature map");
    let dst = cols.as_slice_mut().expect("contiguous");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * 9 * in_c;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let s = (iy as usize * in_w + ix as usize) * in_c;
                    let d = row + (ky * 3 + kx) * in_c;
                    dst[d..d + in_c].copy_from_slice(&src[s..s + in_c]);
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch-matrix gradient back onto the input grid.
pub fn col2im(dcols: &Mat, shape: ConvShape) -> Mat {
    let ConvShape { in_h, in_w, in_c, stride } = shape;
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let mut out = Mat::zeros((in_h * in_w, in_c));
    let src = dcols.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * 9 * in_c;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let d = (iy as usize * in_w + ix as usize) * in_c;
                    let s = row + (ky * 3 + kx) * in_c;
                    for c in 0..in_c {
                        dst[d + c] += src[s + c];
                    }
                }
            }
        }
    }
    out
}

/// Convolution followed by ReLU. Returns the activation and the patch matrix.
pub fn conv_relu_forward(input: &Mat, shape: ConvShape, weight: &Mat, bias: &Mat) -> (Mat, Mat) {
    let cols = im2col(input, shape);
    let mut out = cols.dot(weight) + bias;
    relu_inplace(&mut out);
    (out, cols)
}

/// Gradients `(dW, db, dinput)` of a conv+ReLU block given its cached
/// activation and patch matrix.
pub fn conv_relu_backward(
    dout: &Mat,
    activation: &Mat,
    cols: &Mat,
    weight: &Mat,
    shape: ConvShape,
    need_input_grad: bool,
) -> (Mat, Mat, Option<Mat>) {
    let dpre = relu_backward(dout, activation);
    let dw = cols.t().dot(&dpre);
    let db = dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dinput = need_input_grad.then(|| col2im(&dpre.dot(&weight.t()), shape));
    (dw, db, dinput)
}

pub fn relu_inplace(m: &mut Mat) {
    m.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

pub fn relu_backward(dout: &Mat, activation: &Mat) -> Mat {
    let mut d = dout.clone();
    ndarray::Zip::from(&mut d).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    d
}
