//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable shape plus a contiguous value buffer. The
//! buffer is reference-counted, so clones and reshapes are cheap; mutation
//! goes through [`Tensor::data_mut`], which copies on write when shared.
//! Binary operations broadcast only along singleton axes (an absent leading
//! axis counts as a singleton).

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} requires {expected} values, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{context}: dimension mismatch on axis {axis}: {left} vs {right}")]
    DimMismatch {
        context: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },
    #[error("{context}: shapes {left:?} and {right:?} are not broadcastable")]
    NotBroadcastable {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{context}: {message}")]
    InvalidArgument {
        context: &'static str,
        message: String,
    },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("{context}: geometry admits no kernel placement (input {input}, kernel span {span})")]
    EmptyConvOutput {
        context: &'static str,
        input: usize,
        span: usize,
    },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense n-dimensional array of floats, row-major, immutable once built.
#[derive(Debug, Clone)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    /// Rank-1 scalar wrapper, shape `[1]`.
    pub fn scalar(value: E) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(|i| f(i)).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the buffer; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Single element of a rank-1 tensor with one entry.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                got: self.numel(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn linf_distance(&self, other: &Self) -> E {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(E::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn sum(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &x| acc + x)
    }

    /// Elementwise binary op with singleton-axis broadcasting.
    pub fn broadcast_with(
        &self,
        other: &Self,
        context: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> TensorResult<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data: Arc::new(data),
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape, context)?;
        let walker = BroadcastWalker::new(&out_shape, &self.shape, &other.shape);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        walker.for_each(|ia, ib| data.push(f(self.data[ia], other.data[ib])));
        Ok(Self {
            shape: out_shape,
            data: Arc::new(data),
        })
    }

    /// Sum this tensor down to `target` (the reverse of a broadcast).
    pub fn reduce_to_shape(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        let n: usize = target.iter().product();
        let mut out = vec![E::zero(); n];
        let walker = BroadcastWalker::new(&self.shape, target, target);
        let mut i = 0;
        walker.for_each(|it, _| {
            out[it] = out[it] + self.data[i];
            i += 1;
        });
        Self {
            shape: target.to_vec(),
            data: Arc::new(out),
        }
    }
}

/// Result shape of broadcasting `a` against `b` (right-aligned, a dimension
/// may only stretch when it is 1).
pub fn broadcast_shape(
    a: &[usize],
    b: &[usize],
    context: &'static str,
) -> TensorResult<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_right_aligned(a, rank, i);
        let db = dim_right_aligned(b, rank, i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::NotBroadcastable {
                context,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    Ok(out)
}

#[inline]
fn dim_right_aligned(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Iterates a broadcast output space, yielding flat offsets into two
/// operand buffers (stride 0 along stretched axes).
struct BroadcastWalker {
    out_shape: Vec<usize>,
    strides_a: Vec<usize>,
    strides_b: Vec<usize>,
}

impl BroadcastWalker {
    fn new(out_shape: &[usize], a: &[usize], b: &[usize]) -> Self {
        let rank = out_shape.len();
        Self {
            out_shape: out_shape.to_vec(),
            strides_a: broadcast_strides(a, rank),
            strides_b: broadcast_strides(b, rank),
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let rank = self.out_shape.len();
        let total: usize = self.out_shape.iter().product();
        if total == 0 {
            return;
        }
        let mut idx = vec![0usize; rank];
        let mut off_a = 0usize;
        let mut off_b = 0usize;
        for _ in 0..total {
            f(off_a, off_b);
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                off_a += self.strides_a[axis];
                off_b += self.strides_b[axis];
                if idx[axis] < self.out_shape[axis] {
                    break;
                }
                off_a -= self.strides_a[axis] * idx[axis];
                off_b -= self.strides_b[axis] * idx[axis];
                idx[axis] = 0;
            }
        }
    }
}

/// Row-major strides of `shape` right-aligned into `rank` axes, with
/// stride 0 on stretched (singleton) axes.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let pad = rank - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Split a shape around `axis` into (outer, len, inner) extents for
/// lane-wise reductions and softmax.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> TensorResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
