//! conv2d / maxpool2d forward passes and backward rules.
//!
//! conv2d lowers each batch item to an im2col matrix so both the
//! forward pass and the two backward products are plain matmuls. The
//! column matrices are saved on the tape for the backward rule.

use super::{shape_err, Input, Op, Tensor, Value};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, Ix4, IxDyn};

pub(super) struct ConvNode {
    x: Input,
    w: Input,
    stride: usize,
    padding: usize,
    cols: Vec<Array2<f64>>,
    out_hw: (usize, usize),
}

pub(super) struct PoolNode {
    x: Input,
    /// Flat input index of the window maximum, one per output element.
    argmax: Vec<usize>,
}

pub(super) fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if stride < 1 {
        return Err(Error::InvalidParam("conv2d stride must be >= 1".into()));
    }
    let xv = x
        .data()
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err("conv2d", format!("input must be (n,c,h,w), got {:?}", x.shape())))?;
    let wv = kernel
        .data()
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err("conv2d", format!("kernel must be (oc,c,kh,kw), got {:?}", kernel.shape())))?;
    let (n, c, h, w) = xv.dim();
    let (oc, kc, kh, kw) = wv.dim();
    if kc != c {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels but kernel expects {}", c, kc),
        ));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if kh > hp || kw > wp {
        return Err(shape_err(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, hp, wp),
        ));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let k = c * kh * kw;

    let w_mat = wv
        .to_shape((oc, k))
        .expect("kernel reshape")
        .to_owned();

    let tape = Tensor::joint_tape("conv2d", &[x, kernel])?;
    let keep_cols = tape.is_some();
    let x_std = x.data().as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(IxDyn(&[n, oc, oh, ow]));
    let out_slice = out.as_slice_mut().expect("standard layout");
    let mut cols_all = Vec::with_capacity(if keep_cols { n } else { 0 });
    for item in 0..n {
        let cols = im2col(&xs[item * c * h * w..(item + 1) * c * h * w], c, h, w, kh, kw, stride, padding, oh, ow);
        let out_mat = w_mat.dot(&cols);
        let dst = &mut out_slice[item * oc * oh * ow..(item + 1) * oc * oh * ow];
        dst.copy_from_slice(out_mat.as_slice().expect("contiguous"));
        if keep_cols {
            cols_all.push(cols);
        }
    }
    Ok(Tensor::emit(
        tape,
        Op::Conv2d(ConvNode {
            x: x.as_input(),
            w: kernel.as_input(),
            stride,
            padding,
            cols: cols_all,
            out_hw: (oh, ow),
        }),
        out,
    ))
}

pub(super) fn maxpool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    if size < 1 {
        return Err(Error::InvalidParam("maxpool2d window must be >= 1".into()));
    }
    let xv = x
        .data()
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err("maxpool2d", format!("input must be (n,c,h,w), got {:?}", x.shape())))?;
    let (n, c, h, w) = xv.dim();
    if h % size != 0 || w % size != 0 {
        return Err(shape_err(
            "maxpool2d",
            format!("spatial dims {}x{} not divisible by window {}", h, w, size),
        ));
    }
    let (oh, ow) = (h / size, w / size);
    let x_std = x.data().as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
    let os = out.as_slice_mut().expect("standard layout");
    let mut argmax = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in 0..size {
                    let row = base + (oi * size + di) * w + oj * size;
                    for dj in 0..size {
                        let v = xs[row + dj];
                        if v > best {
                            best = v;
                            best_idx = row + dj;
                        }
                    }
                }
                let o = plane * oh * ow + oi * ow + oj;
                os[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    let tape = Tensor::joint_tape("maxpool2d", &[x])?;
    Ok(Tensor::emit(
        tape,
        Op::MaxPool2d(PoolNode { x: x.as_input(), argmax }),
        out,
    ))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    xs: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let k = c * kh * kw;
    let mut cols = Array2::zeros((k, oh * ow));
    let cs = cols.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cs[row + oi * ow + oj] = xs[src_row + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ds = dcols.as_slice().expect("contiguous");
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[dst_row + iw as usize] += ds[row + oi * ow + oj];
                    }
                }
            }
        }
    }
}

impl ConvNode {
    pub(super) fn backward(&self, go: &Value, push: &mut dyn FnMut(&Input, Value)) {
        let (oh, ow) = self.out_hw;
        let wv = self.w.value.view().into_dimensionality::<Ix4>().expect("kernel rank");
        let (oc, c, kh, kw) = wv.dim();
        let k = c * kh * kw;
        let xv = self.x.value.view().into_dimensionality::<Ix4>().expect("input rank");
        let (n, _, h, w) = xv.dim();
        let go_std = go.as_standard_layout();
        let gs = go_std.as_slice().expect("standard layout");

        if self.w.id.is_some() {
            let mut dw_mat = Array2::<f64>::zeros((oc, k));
            for item in 0..n {
                let go_mat = Array2::from_shape_vec(
                    (oc, oh * ow),
                    gs[item * oc * oh * ow..(item + 1) * oc * oh * ow].to_vec(),
                )
                .expect("grad reshape");
                dw_mat += &go_mat.dot(&self.cols[item].t());
            }
            let dw = dw_mat
                .into_shape_with_order(IxDyn(&[oc, c, kh, kw]))
                .expect("kernel grad reshape");
            push(&self.w, dw);
        }
        if self.x.id.is_some() {
            let w_mat = wv.to_shape((oc, k)).expect("kernel reshape").to_owned();
            let mut dx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            let dxs = dx.as_slice_mut().expect("standard layout");
            for item in 0..n {
                let go_mat = Array2::from_shape_vec(
                    (oc, oh * ow),
                    gs[item * oc * oh * ow..(item + 1) * oc * oh * ow].to_vec(),
                )
                .expect("grad reshape");
                let dcols = w_mat.t().dot(&go_mat);
                col2im(
                    &dcols,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                    &mut dxs[item * c * h * w..(item + 1) * c * h * w],
                );
            }
            push(&self.x, dx);
        }
    }
}

impl PoolNode {
    pub(super) fn backward(&self, go: &Value, push: &mut dyn FnMut(&Input, Value)) {
        if self.x.id.is_none() {
            return;
        }
        let mut dx = ArrayD::zeros(self.x.value.raw_dim());
        let dxs = dx.as_slice_mut().expect("standard layout");
        let go_std = go.as_standard_layout();
        let gs = go_std.as_slice().expect("standard layout");
        for (o, &src) in self.argmax.iter().enumerate() {
            dxs[src] += gs[o];
        }
        push(&self.x, dx);
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn conv2d_all_ones_kernel_sums_windows() {
        // 4x4 input, 3x3 ones kernel, stride 1, no padding: each output
        // equals the sum of the covered window, checked against an
        // independently computed sliding-window sum.
        let x: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
        let xt = Tensor::from_vec(&[1, 1, 4, 4], x.clone()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let out = xt.conv2d(&k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        for oi in 0..2 {
            for oj in 0..2 {
                let mut expect = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        expect += x[(oi + di) * 4 + (oj + dj)];
                    }
                }
                let got = out.data()[[0, 0, oi, oj]];
                assert!((got - expect).abs() < 1e-12, "window ({oi},{oj})");
            }
        }
    }

    #[test]
    fn conv2d_padding_preserves_spatial_size() {
        let x = Tensor::from_vec(&[1, 2, 5, 5], (0..50).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::from_vec(&[3, 2, 3, 3], vec![0.1; 54]).unwrap();
        let out = x.conv2d(&k, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 5, 5]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::from_vec(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
        let k = Tensor::from_vec(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let err = x.conv2d(&k, 1, 0).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let x = Tensor::from_vec(
            &[1, 1, 2, 4],
            vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 7.0, 2.0],
        )
        .unwrap();
        let out = x.maxpool2d(2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data().as_slice().unwrap(), &[5.0, 7.0]);

        let tape = Tape::new();
        let x = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 9.0, 2.0, 3.0]).unwrap(),
        );
        let loss = x.maxpool2d(2).unwrap().sum();
        let grads = loss.backward().unwrap();
        let gx = grads.get(&x).unwrap().unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_indivisible_dims() {
        let x = Tensor::from_vec(&[1, 1, 3, 4], vec![0.0; 12]).unwrap();
        assert!(x.maxpool2d(2).is_err());
    }
}
