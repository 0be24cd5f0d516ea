//! Probability stacks, class masks, score maps and images.
//!
//! All arrays are row-major. A [`ProbabilityStack`] is indexed
//! `(sample, class, row, col)`, an [`Image`] `(channel, row, col)`.

use std::fmt;
use std::path::Path;

use crate::container::{self, Metadata, Tensor, TensorData};
use crate::error::{Error, Result};

/// Tolerance on per-pixel normalization of a probability stack.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Monte-Carlo softmax outputs, `samples × classes × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityStack {
    samples: usize,
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbabilityStack {
    /// Wraps `data` without checking normalization; see [`validate_stack`].
    pub fn new(
        samples: usize,
        classes: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = samples * classes * height * width;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "stack {samples}x{classes}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(ProbabilityStack {
            samples,
            classes,
            height,
            width,
            data,
        })
    }

    pub fn uniform(samples: usize, classes: usize, height: usize, width: usize) -> Self {
        let n = samples * classes * height * width;
        ProbabilityStack {
            samples,
            classes,
            height,
            width,
            data: vec![1.0 / classes as f64; n],
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, s: usize, c: usize, row: usize, col: usize) -> usize {
        ((s * self.classes + c) * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, s: usize, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(s, c, row, col)]
    }

    /// Class distribution of one sample at one pixel.
    pub fn pixel_dist(&self, s: usize, row: usize, col: usize) -> Vec<f64> {
        (0..self.classes).map(|c| self.get(s, c, row, col)).collect()
    }

    /// The `(classes, height, width)` block of sample `s`.
    pub fn sample_slice(&self, s: usize) -> &[f64] {
        let n = self.classes * self.pixels();
        &self.data[s * n..(s + 1) * n]
    }

    /// Concatenates single-sample blocks laid out `(class, row, col)`.
    pub fn from_samples(
        classes: usize,
        height: usize,
        width: usize,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let count = samples.len();
        let data: Vec<f64> = samples.into_iter().flatten().collect();
        Self::new(count, classes, height, width, data)
    }

    /// Per-pixel argmax of sample `s`; ties go to the lower class id.
    pub fn argmax(&self, s: usize) -> ClassMask {
        let mut out = vec![0u8; self.pixels()];
        for (p, slot) in out.iter_mut().enumerate() {
            let (row, col) = (p / self.width, p % self.width);
            let mut best = 0;
            for c in 1..self.classes {
                if self.get(s, c, row, col) > self.get(s, best, row, col) {
                    best = c;
                }
            }
            *slot = best as u8;
        }
        ClassMask {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.samples, self.classes, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("stack dims are consistent")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (dims, data) = tensor.into_parts();
        let TensorData::F32(values) = data else {
            return Err(Error::InvalidStack("stack container must hold f32".into()));
        };
        if dims.len() != 4 {
            return Err(Error::InvalidStack(format!(
                "stack container must have rank 4, got {}",
                dims.len()
            )));
        }
        Self::new(
            dims[0],
            dims[1],
            dims[2],
            dims[3],
            values.into_iter().map(f64::from).collect(),
        )
    }

    pub fn write(&self, path: &Path, meta: &Metadata) -> Result<()> {
        container::write_container(path, &self.to_tensor(), meta)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(Self, Metadata)> {
        let (t, meta) = container::read_container(path)?;
        Ok((Self::from_tensor(t)?, meta))
    }
}

/// Outcome of [`validate_stack`]: the first violated invariant, if any.
#[derive(Debug, Clone, PartialEq)]
pub enum StackValidation {
    Valid,
    BadDims {
        samples: usize,
        classes: usize,
        height: usize,
        width: usize,
    },
    NonFinite {
        index: [usize; 4],
        value: f64,
    },
    OutOfRange {
        index: [usize; 4],
        value: f64,
    },
    NotNormalized {
        sample: usize,
        row: usize,
        col: usize,
        sum: f64,
    },
}

impl StackValidation {
    pub fn is_valid(&self) -> bool {
        matches!(self, StackValidation::Valid)
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            StackValidation::Valid => Ok(()),
            other => Err(Error::InvalidStack(other.to_string())),
        }
    }
}

impl fmt::Display for StackValidation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StackValidation::Valid => write!(f, "valid"),
            StackValidation::BadDims {
                samples,
                classes,
                height,
                width,
            } => write!(
                f,
                "dims {samples}x{classes}x{height}x{width} violate S>=1, C>=2, H>=1, W>=1"
            ),
            StackValidation::NonFinite { index, value } => {
                write!(f, "non-finite value {value} at (s,c,h,w)={index:?}")
            }
            StackValidation::OutOfRange { index, value } => {
                write!(f, "value {value} outside [0,1] at (s,c,h,w)={index:?}")
            }
            StackValidation::NotNormalized {
                sample,
                row,
                col,
                sum,
            } => write!(
                f,
                "distribution at (s,h,w)=({sample},{row},{col}) sums to {sum}"
            ),
        }
    }
}

pub fn validate_stack(stack: &ProbabilityStack) -> StackValidation {
    let (s_n, c_n, h_n, w_n) = (stack.samples, stack.classes, stack.height, stack.width);
    if s_n < 1 || c_n < 2 || h_n < 1 || w_n < 1 {
        return StackValidation::BadDims {
            samples: s_n,
            classes: c_n,
            height: h_n,
            width: w_n,
        };
    }
    for s in 0..s_n {
        for row in 0..h_n {
            for col in 0..w_n {
                let mut sum = 0.0;
                for c in 0..c_n {
                    let v = stack.get(s, c, row, col);
                    if !v.is_finite() {
                        return StackValidation::NonFinite {
                            index: [s, c, row, col],
                            value: v,
                        };
                    }
                    if !(0.0..=1.0).contains(&v) {
                        return StackValidation::OutOfRange {
                            index: [s, c, row, col],
                            value: v,
                        };
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    return StackValidation::NotNormalized {
                        sample: s,
                        row,
                        col,
                        sum,
                    };
                }
            }
        }
    }
    StackValidation::Valid
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ClassMask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        ClassMask {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Fails if any class id is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&c| c as usize >= classes) {
            None => Ok(()),
            Some(p) => Err(Error::InvalidArgument(format!(
                "class id {} at pixel {p} is not below {classes}",
                self.data[p]
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::u8(vec![self.height, self.width], self.data.clone()).expect("mask dims")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (dims, data) = tensor.into_parts();
        match (dims.as_slice(), data) {
            (&[h, w], TensorData::U8(v)) => Self::new(h, w, v),
            _ => Err(Error::InvalidArgument(
                "mask container must be a rank-2 u8 tensor".into(),
            )),
        }
    }

    pub fn write(&self, path: &Path, meta: &Metadata) -> Result<()> {
        container::write_container(path, &self.to_tensor(), meta)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (t, _) = container::read_container(path)?;
        Self::from_tensor(t)
    }
}

/// Pixel-level uncertainty in nats.
///
/// Stores the raw estimator output, which may dip a hair below zero through
/// rounding; [`ScoreMap::get`] and [`ScoreMap::values`] clamp at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < -1e-9) {
            return Err(Error::InvalidArgument(format!("invalid pixel score {v}")));
        }
        Ok(ScoreMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col].max(0.0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| v.max(0.0))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.height, self.width],
            self.values().map(|v| v as f32).collect(),
        )
        .expect("score map dims")
    }
}

/// A real-valued image in `[0, 1]`, laid out `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image dims")
    }

    /// Accepts `(H, W)` single-channel or `(C, H, W)` f32 tensors.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (dims, data) = tensor.into_parts();
        let TensorData::F32(v) = data else {
            return Err(Error::InvalidArgument("image container must hold f32".into()));
        };
        match dims.as_slice() {
            &[h, w] => Self::new(1, h, w, v),
            &[c, h, w] => Self::new(c, h, w, v),
            other => Err(Error::InvalidArgument(format!(
                "image container must have rank 2 or 3, got dims {other:?}"
            ))),
        }
    }

    pub fn write(&self, path: &Path, meta: &Metadata) -> Result<()> {
        container::write_container(path, &self.to_tensor(), meta)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (t, _) = container::read_container(path)?;
        Self::from_tensor(t)
    }
}
