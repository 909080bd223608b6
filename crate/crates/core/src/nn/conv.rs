//! 2-d convolution via per-image im2col + gemm.
//!
//! Batch work is split into fixed-size chunks processed in parallel; partial
//! weight gradients are collected in chunk order and summed sequentially so
//! results are bitwise reproducible regardless of scheduling.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

/// Images per parallel work unit.
const CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    /// [out_channels, in_channels, k, k]
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvGrads<F> {
    pub dx: Option<Array4<F>>,
    pub dw: Option<Array4<F>>,
    pub db: Option<Array1<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        if x.shape()[1] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.shape()[1]
            )));
        }
        let k = self.kernel();
        if x.shape()[2] + 2 * self.padding < k || x.shape()[3] + 2 * self.padding < k {
            return Err(Error::Shape("input smaller than kernel".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let (b, _, h, w) = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let out_c = self.out_channels();
        let ikk = self.in_channels() * self.kernel() * self.kernel();
        let w_mat = self.weight.to_shape((out_c, ikk)).unwrap();
        let w_mat = w_mat.view();

        let mut y = Array4::zeros((b, out_c, oh, ow));
        y.axis_chunks_iter_mut(Axis(0), CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), CHUNK).into_par_iter())
            .for_each(|(mut yc, xc)| {
                let mut cols = Array2::zeros((ikk, oh * ow));
                for (mut yi, xi) in yc.outer_iter_mut().zip(xc.outer_iter()) {
                    self.im2col(&xi, &mut cols, oh, ow);
                    let prod = w_mat.dot(&cols);
                    let ym = yi.as_slice_mut().expect("standard layout output");
                    ym.copy_from_slice(prod.as_slice().unwrap());
                    if let Some(bias) = &self.bias {
                        for c in 0..out_c {
                            let bc = bias[c];
                            for v in &mut ym[c * oh * ow..(c + 1) * oh * ow] {
                                *v = *v + bc;
                            }
                        }
                    }
                }
            });
        Ok(y)
    }

    /// Backward pass. `x` is the forward input, `dy` the output gradient.
    pub fn backward(
        &self,
        x: &Array4<F>,
        dy: &Array4<F>,
        want_dx: bool,
        want_dparams: bool,
    ) -> Result<ConvGrads<F>> {
        self.check_input(x)?;
        let (b, in_c, h, w) = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let out_c = self.out_channels();
        let k = self.kernel();
        let ikk = in_c * k * k;
        if dy.shape() != [b, out_c, oh, ow] {
            return Err(Error::Shape(format!(
                "conv backward dy shape {:?}, expected {:?}",
                dy.shape(),
                [b, out_c, oh, ow]
            )));
        }
        let w_mat = self.weight.to_shape((out_c, ikk)).unwrap();
        let w_mat = w_mat.view();

        let mut dx = if want_dx {
            Some(Array4::zeros((b, in_c, h, w)))
        } else {
            None
        };

        let partials: Vec<Array2<F>> = match dx.as_mut() {
            Some(dx) => dy
                .axis_chunks_iter(Axis(0), CHUNK)
                .into_par_iter()
                .zip(x.axis_chunks_iter(Axis(0), CHUNK).into_par_iter())
                .zip(dx.axis_chunks_iter_mut(Axis(0), CHUNK).into_par_iter())
                .map(|((dyc, xc), mut dxc)| {
                    let mut dw_part = Array2::zeros((out_c, ikk));
                    let mut cols = Array2::zeros((ikk, oh * ow));
                    for ((dyi, xi), mut dxi) in
                        dyc.outer_iter().zip(xc.outer_iter()).zip(dxc.outer_iter_mut())
                    {
                        let dy_mat = dyi.to_shape((out_c, oh * ow)).unwrap();
                        if want_dparams {
                            self.im2col(&xi, &mut cols, oh, ow);
                            dw_part += &dy_mat.dot(&cols.t());
                        }
                        let dcols = w_mat.t().dot(&dy_mat);
                        self.col2im_add(&dcols.view(), &mut dxi, oh, ow);
                    }
                    dw_part
                })
                .collect(),
            None => dy
                .axis_chunks_iter(Axis(0), CHUNK)
                .into_par_iter()
                .zip(x.axis_chunks_iter(Axis(0), CHUNK).into_par_iter())
                .map(|(dyc, xc)| {
                    let mut dw_part = Array2::zeros((out_c, ikk));
                    let mut cols = Array2::zeros((ikk, oh * ow));
                    for (dyi, xi) in dyc.outer_iter().zip(xc.outer_iter()) {
                        let dy_mat = dyi.to_shape((out_c, oh * ow)).unwrap();
                        self.im2col(&xi, &mut cols, oh, ow);
                        dw_part += &dy_mat.dot(&cols.t());
                    }
                    dw_part
                })
                .collect(),
        };

        let (dw, db) = if want_dparams {
            let mut acc = Array2::zeros((out_c, ikk));
            for p in partials {
                acc = acc + p;
            }
            let dw = acc.to_shape((out_c, in_c, k, k)).unwrap().to_owned();
            let db = self.bias.as_ref().map(|_| {
                let mut db = Array1::zeros(out_c);
                for c in 0..out_c {
                    db[c] = dy.index_axis(Axis(1), c).sum();
                }
                db
            });
            (Some(dw), db)
        } else {
            (None, None)
        };

        Ok(ConvGrads { dx, dw, db })
    }

    /// Unfold one image [C,H,W] into [C*k*k, oh*ow] patch columns.
    fn im2col(&self, xi: &ArrayView3<F>, cols: &mut Array2<F>, oh: usize, ow: usize) {
        let (in_c, h, w) = (xi.shape()[0], xi.shape()[1], xi.shape()[2]);
        let k = self.kernel();
        let s = self.stride;
        let p = self.padding as isize;
        let xs_owned;
        let xs: &[F] = match xi.as_slice() {
            Some(sl) => sl,
            None => {
                xs_owned = xi.to_owned();
                xs_owned.as_slice().unwrap()
            }
        };
        let cs = cols.as_slice_mut().unwrap();
        for c in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &mut cs[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let seg = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            seg.fill(F::zero());
                            continue;
                        }
                        let xrow = &xs[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        if s == 1 {
                            // contiguous span: ox + kx - p in [0, w)
                            let ox0 = (p - kx as isize).max(0) as usize;
                            let ox1 = ((w as isize + p - kx as isize).min(ow as isize)).max(0)
                                as usize;
                            seg[..ox0].fill(F::zero());
                            seg[ox1..].fill(F::zero());
                            if ox1 > ox0 {
                                let ix0 = (ox0 as isize + kx as isize - p) as usize;
                                seg[ox0..ox1].copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                            }
                        } else {
                            for (ox, v) in seg.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                *v = if ix < 0 || ix >= w as isize {
                                    F::zero()
                                } else {
                                    xrow[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold patch-column gradients back onto one image gradient (+=).
    fn col2im_add(&self, cols: &ArrayView2<F>, dxi: &mut ArrayViewMut3<F>, oh: usize, ow: usize) {
        let (in_c, h, w) = (dxi.shape()[0], dxi.shape()[1], dxi.shape()[2]);
        let k = self.kernel();
        let s = self.stride;
        let p = self.padding as isize;
        let cs = cols.as_slice().expect("contiguous cols");
        let ds = dxi.as_slice_mut().expect("standard layout grad");
        for c in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &cs[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut ds[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        let seg = &row[oy * ow..(oy + 1) * ow];
                        for (ox, v) in seg.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4<F>(x: &Array4<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}
