use crate::error::{Error, Result};

/// Dense `(D, H, W)` array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

pub type Mask = Volume<u8>;

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Data(format!("volume dims {dims:?} contain a zero extent")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!(
                "volume dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    /// One transversal slice.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Mask {
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}
