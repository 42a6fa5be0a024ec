//! Dense row-major tensors and the patch extraction / accumulation pair used
//! to run a per-patch filter as a 2D convolution.
//!
//! Layout contracts (every index table downstream relies on these):
//!
//! * [`Tensor`] data is row-major, last dimension fastest.
//! * [`im2col`] emits one row per output pixel, ordered batch, then output
//!   row, then output column.
//! * Within a row, elements are ordered channel, then kernel row, then kernel
//!   column. Padded positions read as zero.

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return invalid(format!("tensor dimensions must be >= 1, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {len} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Returns `[b, c, h, w]` or an error if the tensor is not 4D.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => invalid(format!("expected a 4D tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Convolution geometry: kernel, stride, zero padding and the input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let geom = Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            in_channels,
            in_h,
            in_w,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Square kernel, unit stride, symmetric padding.
    pub fn square(in_channels: usize, in_h: usize, in_w: usize, k: usize, pad: usize) -> Result<Self> {
        Self::new(in_channels, in_h, in_w, (k, k), (1, 1), (pad, pad))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.kernel_h,
            self.kernel_w,
            self.stride_h,
            self.stride_w,
            self.in_channels,
            self.in_h,
            self.in_w,
        ];
        if positive.contains(&0) {
            return invalid(format!("geometry fields must be positive: {self:?}"));
        }
        if self.in_h + 2 * self.pad_h < self.kernel_h || self.in_w + 2 * self.pad_w < self.kernel_w {
            return invalid(format!("kernel larger than padded input: {self:?}"));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad_h - self.kernel_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad_w - self.kernel_w) / self.stride_w + 1
    }

    /// Length of one flattened receptive field.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [b, c, h, w] if c == self.in_channels && h == self.in_h && w == self.in_w => Ok(b),
            _ => invalid(format!(
                "input shape {shape:?} does not match geometry (c={}, h={}, w={})",
                self.in_channels, self.in_h, self.in_w
            )),
        }
    }

    /// Visits `(patch_offset, input_index)` for every in-bounds element of
    /// one receptive field. Padded positions are skipped.
    #[inline]
    fn for_each_tap(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        let plane = self.in_h * self.in_w;
        for c in 0..self.in_channels {
            for ky in 0..kh {
                let iy = (oy * self.stride_h + ky) as isize - self.pad_h as isize;
                if iy < 0 || iy >= self.in_h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * self.stride_w + kx) as isize - self.pad_w as isize;
                    if ix < 0 || ix >= self.in_w as isize {
                        continue;
                    }
                    let col = (c * kh + ky) * kw + kx;
                    f(col, c * plane + iy as usize * self.in_w + ix as usize);
                }
            }
        }
    }
}

/// Row-per-patch matrix produced by [`im2col`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub n_patches: usize,
    pub patch_len: usize,
    pub data: Vec<f64>,
    pub geometry: ConvGeometry,
}

impl PatchMatrix {
    pub fn new(geometry: ConvGeometry, n_patches: usize, data: Vec<f64>) -> Result<Self> {
        let patch_len = geometry.patch_len();
        if data.len() != n_patches * patch_len {
            return invalid(format!(
                "patch matrix of {n_patches}x{patch_len} needs {} values, got {}",
                n_patches * patch_len,
                data.len()
            ));
        }
        Ok(Self { n_patches, patch_len, data, geometry })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.patch_len)
    }
}

pub fn im2col(input: &Tensor, geom: &ConvGeometry) -> Result<PatchMatrix> {
    geom.validate()?;
    let batch = geom.check_input(input.shape())?;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let patch_len = geom.patch_len();
    let sample_len = geom.in_channels * geom.in_h * geom.in_w;
    let n_patches = batch * oh * ow;
    let mut data = vec![0.0; n_patches * patch_len];
    for (p, row) in data.chunks_exact_mut(patch_len).enumerate() {
        let b = p / (oh * ow);
        let (oy, ox) = ((p / ow) % oh, p % ow);
        let sample = &input.data()[b * sample_len..(b + 1) * sample_len];
        geom.for_each_tap(oy, ox, |col, idx| row[col] = sample[idx]);
    }
    PatchMatrix::new(*geom, n_patches, data)
}

/// Adjoint of [`im2col`]: every input location receives the sum of all patch
/// entries that were read from it. Contributions from padding are dropped.
///
/// Accumulation runs in patch-row order, so results are deterministic.
pub fn col2im_accumulate(patch_grads: &PatchMatrix, geom: &ConvGeometry, batch: usize) -> Result<Tensor> {
    geom.validate()?;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    if patch_grads.patch_len != geom.patch_len() {
        return invalid(format!(
            "patch length {} does not match geometry patch length {}",
            patch_grads.patch_len,
            geom.patch_len()
        ));
    }
    if batch == 0 || patch_grads.n_patches != batch * oh * ow {
        return invalid(format!(
            "{} patches cannot come from batch {batch} with {oh}x{ow} outputs",
            patch_grads.n_patches
        ));
    }
    let sample_len = geom.in_channels * geom.in_h * geom.in_w;
    let mut out = vec![0.0; batch * sample_len];
    for (p, row) in patch_grads.rows().enumerate() {
        let b = p / (oh * ow);
        let (oy, ox) = ((p / ow) % oh, p % ow);
        let sample = &mut out[b * sample_len..(b + 1) * sample_len];
        geom.for_each_tap(oy, ox, |col, idx| sample[idx] += row[col]);
    }
    Tensor::new(vec![batch, geom.in_channels, geom.in_h, geom.in_w], out).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Internal(m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape, (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(ConvGeometry::square(1, 2, 2, 3, 0).is_err());
        assert!(ConvGeometry::new(1, 2, 2, (1, 1), (0, 1), (0, 0)).is_err());
    }

    #[test]
    fn identity_geometry() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let g = ConvGeometry::square(1, 1, 1, 1, 0).unwrap();
        let p = im2col(&x, &g).unwrap();
        assert_eq!((p.n_patches, p.patch_len), (1, 1));
        assert_eq!(p.data, vec![5.0]);
    }

    #[test]
    fn single_full_patch() {
        let x = seq(vec![1, 1, 2, 2]);
        let g = ConvGeometry::square(1, 2, 2, 2, 0).unwrap();
        let p = im2col(&x, &g).unwrap();
        assert_eq!(p.data, vec![1.0, 2.0, 3.0, 4.0]);
        let back = col2im_accumulate(&p, &g, 1).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn three_by_three_two_by_two() {
        let x = seq(vec![1, 1, 3, 3]);
        let g = ConvGeometry::square(1, 3, 3, 2, 0).unwrap();
        let p = im2col(&x, &g).unwrap();
        let expected = [
            [1.0, 2.0, 4.0, 5.0],
            [2.0, 3.0, 5.0, 6.0],
            [4.0, 5.0, 7.0, 8.0],
            [5.0, 6.0, 8.0, 9.0],
        ];
        for (row, want) in p.rows().zip(expected.iter()) {
            assert_eq!(row, want);
        }
        let ones = PatchMatrix::new(g, 4, vec![1.0; 16]).unwrap();
        let counts = col2im_accumulate(&ones, &g, 1).unwrap();
        assert_eq!(counts.data(), &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
        let zeros = PatchMatrix::new(g, 4, vec![0.0; 16]).unwrap();
        assert!(col2im_accumulate(&zeros, &g, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_reads_zero_and_orders_channels_first() {
        let x = seq(vec![1, 2, 2, 2]);
        let g = ConvGeometry::square(2, 2, 2, 3, 1).unwrap();
        let p = im2col(&x, &g).unwrap();
        assert_eq!(p.n_patches, 4);
        // Top-left output pixel: the centre of the kernel sits on (0, 0).
        assert_eq!(
            p.row(0),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 5.0, 6.0, 0.0, 7.0, 8.0]
        );
    }

    #[test]
    fn mismatched_patch_count() {
        let g = ConvGeometry::square(1, 3, 3, 2, 0).unwrap();
        let p = PatchMatrix::new(g, 4, vec![0.0; 16]).unwrap();
        assert!(col2im_accumulate(&p, &g, 2).is_err());
        let x = seq(vec![1, 2, 3, 3]);
        assert!(im2col(&x, &g).is_err());
    }

    #[test]
    fn strided_output_dims() {
        let g = ConvGeometry::new(3, 32, 32, (3, 3), (2, 2), (1, 1)).unwrap();
        assert_eq!((g.out_h(), g.out_w()), (16, 16));
    }
}
