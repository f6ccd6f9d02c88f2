use crate::error::{Error, Result};

/// Dense row-major N-dimensional array of `f64` values.
///
/// 4-D activations use NCHW layout: `[batch, channels, height, width]`.
/// The invariant `shape.iter().product() == data.len()` holds for every
/// constructor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_nested2(rows: &[Vec<f64>]) -> Self {
        let h = rows.len();
        let w = if h > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![h, w], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Batch/channel/height/width of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Value at NCHW coordinates, for tests and small inspections.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Bitwise equality, used by the exact-identity invariants.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Splits a 4-D tensor along the channel axis into parts of the given
    /// channel counts. Inverse of channel concatenation.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let (n, c, h, w) = self.dims4()?;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::shape(format!(
                "split sizes {:?} do not sum to channel count {}",
                sizes, c
            )));
        }
        let plane = h * w;
        let mut parts: Vec<Tensor> = sizes
            .iter()
            .map(|&ci| Tensor::zeros(vec![n, ci, h, w]))
            .collect();
        for b in 0..n {
            let mut offset = 0;
            for (part, &ci) in parts.iter_mut().zip(sizes) {
                let src = &self.data[((b * c) + offset) * plane..((b * c) + offset + ci) * plane];
                let dst = &mut part.data[b * ci * plane..(b + 1) * ci * plane];
                dst.copy_from_slice(src);
                offset += ci;
            }
        }
        Ok(parts)
    }

    /// Concatenates 4-D tensors along the channel axis. All non-channel
    /// dimensions must match.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::usage("concat of zero tensors"));
        }
        let (n, _, h, w) = parts[0].dims4()?;
        let mut c_total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if pn != n || ph != h || pw != w {
                return Err(Error::shape(format!(
                    "concat parts disagree on non-channel dims: {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, c_total, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for p in parts {
                let pc = p.shape[1];
                let src = &p.data[b * pc * plane..(b + 1) * pc * plane];
                let dst =
                    &mut out.data[((b * c_total) + offset) * plane..((b * c_total) + offset + pc) * plane];
                dst.copy_from_slice(src);
                offset += pc;
            }
        }
        Ok(out)
    }
}
