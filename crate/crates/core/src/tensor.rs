//! Dense row-major tensors and their binary encoding.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a tensor can hold. Training runs in `f32`; `f64` exists for
/// the finite-difference harness.
pub trait Element:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` on row-major buffers. `a` is `m×k` (or `k×m`
    /// when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: bounds asserted above; strides describe dense
                // row-major (or transposed) views of those buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Dense n-dimensional array. Images use `[channels, height, width]`,
/// optionally with a leading batch extent; kernels use
/// `[out, in, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient has {} values, tensor {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents of a `[C, H, W]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected [C, H, W], got {:?}", self.shape),
            )),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"GSTN";
const TENSOR_VERSION: u32 = 1;

impl Tensor<f32> {
    /// Little-endian record: magic `GSTN`, u32 version, u32 rank, u64 extents,
    /// raw `f32` values. Gradients are not stored.
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&TENSOR_VERSION.to_le_bytes())?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut reader = CountingReader { inner: input, offset: 0 };
        let magic: [u8; 4] = reader.array("tensor")?;
        if &magic != TENSOR_MAGIC {
            return Err(reader.err("tensor", "bad magic, expected GSTN", 4));
        }
        let version = u32::from_le_bytes(reader.array("tensor")?);
        if version != TENSOR_VERSION {
            return Err(reader.err("tensor", format!("unsupported version {version}"), 4));
        }
        let rank = u32::from_le_bytes(reader.array("tensor")?) as usize;
        if rank > 8 {
            return Err(reader.err("tensor", format!("implausible rank {rank}"), 4));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(reader.array("tensor")?) as usize);
        }
        let n = numel(&shape);
        let mut raw = vec![0u8; n * 4];
        reader.fill(&mut raw, "tensor")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data)
    }
}

/// Reader that remembers how many bytes were consumed, for error offsets.
pub(crate) struct CountingReader<'a, R: Read> {
    pub inner: &'a mut R,
    pub offset: usize,
}

impl<R: Read> CountingReader<'_, R> {
    pub fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            what: what.to_string(),
            offset: self.offset,
            msg: e.to_string(),
        })?;
        self.offset += buf.len();
        Ok(())
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    /// Error pointing at the start of the field that was just read.
    pub fn err(&self, what: &str, msg: impl Into<String>, field_len: usize) -> Error {
        Error::Parse {
            what: what.to_string(),
            offset: self.offset - field_len,
            msg: msg.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.grad().is_none());
    }

    #[test]
    fn grad_has_tensor_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn binary_layout() {
        let t = Tensor::new(&[1, 2], vec![1.0f32, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"GSTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 28 + 8);
        let back = Tensor::read_from(&mut &bytes[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_record_reports_offset() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = t.to_bytes();
        let err = Tensor::read_from(&mut &bytes[..bytes.len() - 2]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::read_from(&mut &bad[..]),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
