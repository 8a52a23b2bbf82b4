use super::Real;

/// Dense activation tensor laid out as `(N, C, D, H, W)`.
///
/// Two-dimensional data uses `D = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 5],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length for shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.voxels()
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}
