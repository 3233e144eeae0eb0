//! 3×3 convolution with zero padding 1 via batched im2col.

use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};

pub(crate) fn out_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        out_hw(self.h, self.w, self.stride)
    }

    fn patch(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }
}

/// `[cin·9 × n·P]` patch matrix for a batch of `n` images.
pub(crate) fn im2col(x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let cols_w = n * p;
    let mut cols = vec![0.0; g.cin * 9 * cols_w];
    let img = g.cin * g.h * g.w;
    for c in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = c * 9 + ky * 3 + kx;
                let row = &mut cols[r * cols_w..(r + 1) * cols_w];
                for b in 0..n {
                    let src = &x[b * img + c * g.h * g.w..b * img + (c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            row[b * p + oy * wo + ox] = src[iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let cols_w = n * p;
    let img = g.cin * g.h * g.w;
    let mut x = vec![0.0; n * img];
    for c in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = c * 9 + ky * 3 + kx;
                let row = &cols[r * cols_w..(r + 1) * cols_w];
                for b in 0..n {
                    let dst = &mut x[b * img + c * g.h * g.w..b * img + (c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[iy as usize * g.w + ix as usize] += row[b * p + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the `[n × cout·P]` output and the patch matrix for backward.
pub(crate) fn forward(x: &[f64], n: usize, weight: &[f64], bias: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let p = g.patch();
    let k = g.cin * 9;
    let cols = im2col(x, n, g);
    let y = matmul_raw(weight, &cols, g.cout, k, n * p);
    let mut out = vec![0.0; n * g.cout * p];
    for o in 0..g.cout {
        for b in 0..n {
            let src = &y[o * n * p + b * p..o * n * p + (b + 1) * p];
            let dst = &mut out[b * g.cout * p + o * p..b * g.cout * p + (o + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub(crate) fn backward(dout: &[f64], n: usize, cols: &[f64], weight: &[f64], g: &ConvGeom, need_dx: bool) -> ConvGrads {
    let p = g.patch();
    let k = g.cin * 9;
    // Regroup [n × cout·P] into [cout × n·P].
    let mut dy = vec![0.0; g.cout * n * p];
    let mut dbias = vec![0.0; g.cout];
    for b in 0..n {
        for o in 0..g.cout {
            let src = &dout[b * g.cout * p + o * p..b * g.cout * p + (o + 1) * p];
            dy[o * n * p + b * p..o * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    for o in 0..g.cout {
        dbias[o] = dy[o * n * p..(o + 1) * n * p].iter().sum();
    }
    let dweight = matmul_nt_raw(&dy, cols, g.cout, n * p, k);
    let dx = if need_dx {
        let dcols = matmul_tn_raw(weight, &dy, g.cout, k, n * p);
        col2im(&dcols, n, g)
    } else {
        Vec::new()
    };
    ConvGrads { dx, dweight, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct 7-loop convolution.
    fn direct(x: &[f64], n: usize, w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; n * g.cout * ho * wo];
        for bi in 0..n {
            for o in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[o];
                        for c in 0..g.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * g.stride + ky) as isize - 1;
                                    let ix = (ox * g.stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += w[((o * g.cin + c) * 3 + ky) * 3 + kx]
                                        * x[bi * g.cin * g.h * g.w + c * g.h * g.w + iy as usize * g.w + ix as usize];
                                }
                            }
                        }
                        out[bi * g.cout * ho * wo + o * ho * wo + oy * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn randv(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = Rng::new(4);
        for stride in [1, 2] {
            let g = ConvGeom {
                cin: 2,
                cout: 3,
                h: 5,
                w: 4,
                stride,
            };
            let x = randv(2 * 2 * 5 * 4, &mut rng);
            let w = randv(3 * 2 * 9, &mut rng);
            let b = randv(3, &mut rng);
            let (got, _) = forward(&x, 2, &w, &b, &g);
            let want = direct(&x, 2, &w, &b, &g);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = Rng::new(8);
        let g = ConvGeom {
            cin: 3,
            cout: 1,
            h: 6,
            w: 6,
            stride: 2,
        };
        let x = randv(2 * 3 * 36, &mut rng);
        let cols = im2col(&x, 2, &g);
        let c = randv(cols.len(), &mut rng);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn output_sizes() {
        assert_eq!(out_hw(8, 8, 1), (8, 8));
        assert_eq!(out_hw(8, 8, 2), (4, 4));
        assert_eq!(out_hw(5, 5, 2), (3, 3));
        assert_eq!(out_hw(1, 1, 2), (1, 1));
    }
}
