//! Scalar abstraction shared by the f32 fast path and the f64 oracle path.

use nalgebra::RealField;

pub trait Real: RealField + Copy + Default + Send + Sync + 'static {
    /// Width of the scalar on the wire.
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn infinity() -> Self;
    fn put_le(self, out: &mut Vec<u8>);
    /// Panics if `bytes` is shorter than [`Real::BYTES`].
    fn get_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn infinity() -> Self {
        f32::INFINITY
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn infinity() -> Self {
        f64::INFINITY
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[inline]
pub(crate) fn c<T: Real>(v: f64) -> T {
    T::of(v)
}
