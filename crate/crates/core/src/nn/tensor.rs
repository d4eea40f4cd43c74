use super::Scalar;

/// Dense row-major tensor. Image batches use `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)` of a 4-d tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Contiguous slice of batch element `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let per = self.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let per = self.len() / self.shape[0];
        &mut self.data[n * per..(n + 1) * per]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
        }
    }

    /// Concatenate two `[N, C, H, W]` tensors along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels geometry mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Self::from_vec(&[n, ca + cb, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let (n, c, h, w) = self.dims4();
        assert!(first <= c);
        let hw = h * w;
        let mut a = Vec::with_capacity(n * first * hw);
        let mut b = Vec::with_capacity(n * (c - first) * hw);
        for i in 0..n {
            let it = self.item(i);
            a.extend_from_slice(&it[..first * hw]);
            b.extend_from_slice(&it[first * hw..]);
        }
        (
            Self::from_vec(&[n, first, h, w], a),
            Self::from_vec(&[n, c - first, h, w], b),
        )
    }

    /// Stack tensors along a new leading axis, or along the existing batch
    /// axis when they are already 4-d.
    pub fn stack_batch(items: &[Self]) -> Self {
        assert!(!items.is_empty());
        let inner = &items[0].shape;
        let (lead, rest): (usize, Vec<usize>) = if inner.len() == 4 {
            (items.iter().map(|t| t.shape[0]).sum(), inner[1..].to_vec())
        } else {
            (items.len(), inner.clone())
        };
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        for t in items {
            if inner.len() == 4 {
                assert_eq!(&t.shape[1..], &rest[..]);
            } else {
                assert_eq!(&t.shape, inner);
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        Self::from_vec(&shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
