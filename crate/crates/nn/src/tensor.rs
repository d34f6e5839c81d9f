use std::fmt;

use crate::{NnError, Result};

/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one batch item.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(NnError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.shape.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copy of batch item `i` as a batch of one.
    pub fn select(&self, i: usize) -> Tensor {
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.sample(i).to_vec(),
        }
    }

    /// Stack batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().expect("stack of zero tensors").shape;
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        for t in parts {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(NnError::ShapeMismatch {
                    expected: Shape { n: s.n, ..first },
                    got: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..first },
            data,
        })
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(NnError::ShapeMismatch {
                expected,
                got: self.shape,
            });
        }
        Ok(())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape, b.shape);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(NnError::ShapeMismatch {
                expected: Shape { c: sb.c, ..sa },
                got: sb,
            });
        }
        let shape = Shape {
            c: sa.c + sb.c,
            ..sa
        };
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..sa.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `first_channels`
    /// channels and the rest.
    pub fn split_channels(&self, first_channels: usize) -> (Tensor, Tensor) {
        let s = self.shape;
        assert!(first_channels <= s.c);
        let la = first_channels * s.plane();
        let sa = Shape {
            c: first_channels,
            ..s
        };
        let sb = Shape {
            c: s.c - first_channels,
            ..s
        };
        let mut a = Vec::with_capacity(sa.numel());
        let mut b = Vec::with_capacity(sb.numel());
        for i in 0..s.n {
            let item = self.sample(i);
            a.extend_from_slice(&item[..la]);
            b.extend_from_slice(&item[la..]);
        }
        (Tensor { shape: sa, data: a }, Tensor { shape: sb, data: b })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        other.ensure_shape(self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
