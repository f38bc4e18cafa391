//! Dense tensors with a storage precision tag and the portable `.fdrt` file format.
//!
//! Half16 storage holds genuine IEEE-754 binary16 values; every kernel widens
//! to f32, computes, and narrows the result again when asked to. Gradient
//! buffers are always f32.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FDRT_MAGIC: &[u8; 4] = b"FDRT";
pub const FDRT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Full32,
    Half16,
}

impl Precision {
    pub fn bytes_per_element(self) -> usize {
        match self {
            Precision::Full32 => 4,
            Precision::Half16 => 2,
        }
    }

    fn dtype_code(self) -> u8 {
        match self {
            Precision::Full32 => 0,
            Precision::Half16 => 1,
        }
    }

    fn from_dtype_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::Full32),
            1 => Some(Precision::Half16),
            _ => None,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full32" | "fp32" | "f32" => Ok(Precision::Full32),
            "half16" | "fp16" | "f16" => Ok(Precision::Half16),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Full32 => write!(f, "full32"),
            Precision::Half16 => write!(f, "half16"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Full32(Vec<f32>),
    Half16(Vec<f16>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::Full32(v) => v.len(),
            Storage::Half16(v) => v.len(),
        }
    }
}

/// Rounds every value to the nearest binary16 (ties to even). Returns the
/// narrowed buffer and the number of finite inputs that overflowed to infinity.
pub fn narrow(values: &[f32]) -> (Vec<f16>, usize) {
    let mut overflow = 0;
    let out = values
        .iter()
        .map(|&v| {
            let h = f16::from_f32(v);
            if h.is_infinite() && v.is_finite() {
                overflow += 1;
            }
            h
        })
        .collect();
    (out, overflow)
}

/// Rounds in place to binary16-representable f32 values.
pub fn round_to_half(values: &mut [f32]) -> usize {
    let mut overflow = 0;
    for v in values.iter_mut() {
        let h = f16::from_f32(*v);
        if h.is_infinite() && v.is_finite() {
            overflow += 1;
        }
        *v = h.to_f32();
    }
    overflow
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Storage,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "numel",
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            dims,
            data: Storage::Full32(data),
            grad: None,
        })
    }

    pub fn from_half(dims: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "numel",
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            dims,
            data: Storage::Half16(data),
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Storage::Full32(vec![0.0; n]),
            grad: None,
        }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: Storage::Full32(vec![value; n]),
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            dims: vec![],
            data: Storage::Full32(vec![value]),
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        match self.data {
            Storage::Full32(_) => Precision::Full32,
            Storage::Half16(_) => Precision::Half16,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    /// Bytes held by the value buffer (gradient slot excluded).
    pub fn nbytes(&self) -> usize {
        self.numel() * self.precision().bytes_per_element()
    }

    /// Values widened to f32; borrows when already full32.
    pub fn values(&self) -> Cow<'_, [f32]> {
        match &self.data {
            Storage::Full32(v) => Cow::Borrowed(v),
            Storage::Half16(v) => Cow::Owned(v.iter().map(|h| h.to_f32()).collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.values().into_owned()
    }

    /// Mutable access to full32 data; `None` for half16 storage.
    pub fn data_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            Storage::Full32(v) => Some(v),
            Storage::Half16(_) => None,
        }
    }

    pub fn get(&self, index: usize) -> f32 {
        match &self.data {
            Storage::Full32(v) => v[index],
            Storage::Half16(v) => v[index].to_f32(),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                axis: "numel",
                expected: self.numel(),
                actual: n,
            });
        }
        self.dims = dims;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::Dimension {
                op: "set_grad",
                axis: "numel",
                expected: self.numel(),
                actual: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    /// Precision of the gradient slot, which is never narrowed.
    pub fn grad_precision(&self) -> Option<Precision> {
        self.grad.as_ref().map(|_| Precision::Full32)
    }

    /// Converts storage precision. Narrowing rounds to nearest-even and
    /// saturates overflow to infinity; widening is exact.
    pub fn cast(&self, target: Precision) -> Tensor {
        self.cast_counting(target).0
    }

    /// Like [`Tensor::cast`], also returning how many finite values overflowed.
    pub fn cast_counting(&self, target: Precision) -> (Tensor, usize) {
        let (data, overflow) = match (&self.data, target) {
            (Storage::Full32(v), Precision::Full32) => (Storage::Full32(v.clone()), 0),
            (Storage::Half16(v), Precision::Half16) => (Storage::Half16(v.clone()), 0),
            (Storage::Half16(v), Precision::Full32) => {
                (Storage::Full32(v.iter().map(|h| h.to_f32()).collect()), 0)
            }
            (Storage::Full32(v), Precision::Half16) => {
                let (h, overflow) = narrow(v);
                (Storage::Half16(h), overflow)
            }
        };
        (
            Tensor {
                dims: self.dims.clone(),
                data,
                grad: self.grad.clone(),
            },
            overflow,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn write_fdrt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FDRT_MAGIC)?;
        w.write_all(&FDRT_VERSION.to_le_bytes())?;
        w.write_all(&[self.precision().dtype_code(), self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &self.data {
            Storage::Full32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Storage::Half16(v) => {
                for x in v {
                    w.write_all(&x.to_bits().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_fdrt_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(10 + 4 * self.dims.len() + self.nbytes());
        self.write_fdrt(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_fdrt_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < 10 {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != FDRT_MAGIC {
            return Err(fmt(0, "bad magic, expected FDRT"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FDRT_VERSION {
            return Err(fmt(4, &format!("unsupported version {version}")));
        }
        let precision = Precision::from_dtype_code(bytes[8])
            .ok_or_else(|| fmt(8, &format!("unknown dtype code {}", bytes[8])))?;
        let ndim = bytes[9] as usize;
        let mut offset = 10;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let raw = bytes
                .get(offset..offset + 4)
                .ok_or_else(|| fmt(bytes.len(), "truncated dims"))?;
            dims.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
            offset += 4;
        }
        let n: usize = dims.iter().product();
        let payload = &bytes[offset..];
        let expected = n * precision.bytes_per_element();
        if payload.len() != expected {
            return Err(fmt(
                offset + payload.len().min(expected),
                &format!("payload is {} bytes, expected {expected}", payload.len()),
            ));
        }
        match precision {
            Precision::Full32 => Tensor::new(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Precision::Half16 => Tensor::from_half(
                dims,
                payload
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_fdrt(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Tensor::from_fdrt_bytes(&bytes)
    }

    /// Copies out sample `index` along the leading axis.
    pub fn slice_batch(&self, index: usize) -> Result<Tensor> {
        let n = *self.dims.first().ok_or_else(|| Error::contract("slice of a scalar"))?;
        if index >= n {
            return Err(Error::contract(format!("batch index {index} out of range {n}")));
        }
        let per = self.numel() / n;
        let values = self.values();
        Tensor::new(self.dims[1..].to_vec(), values[index * per..(index + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::Dimension {
                    op: "stack",
                    axis: "item",
                    expected: first.numel(),
                    actual: t.numel(),
                });
            }
            data.extend_from_slice(&t.values());
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(v: f32) -> f32 {
        Tensor::new(vec![1], vec![v])
            .unwrap()
            .cast(Precision::Half16)
            .cast(Precision::Full32)
            .get(0)
    }

    #[test]
    fn one_round_trips_exactly() {
        assert_eq!(roundtrip(1.0), 1.0);
    }

    #[test]
    fn large_values_saturate_to_infinity() {
        let t = Tensor::new(vec![2], vec![70000.0, 65504.0]).unwrap();
        let (h, overflow) = t.cast_counting(Precision::Half16);
        assert_eq!(h.get(0), f32::INFINITY);
        assert_eq!(h.get(1), 65504.0);
        assert_eq!(overflow, 1);
    }

    #[test]
    fn tiny_values_flush_to_zero() {
        assert_eq!(roundtrip(1e-8), 0.0);
        // smallest subnormal survives
        assert_eq!(roundtrip(5.960_464_5e-8), 5.960_464_5e-8);
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-11 lies halfway between 1 and 1 + 2^-10.
        assert_eq!(roundtrip(1.0 + 2f32.powi(-11)), 1.0);
        assert_eq!(roundtrip(1.0 + 3.0 * 2f32.powi(-11)), 1.0 + 2.0 * 2f32.powi(-10));
    }

    #[test]
    fn cast_keeps_grad_full32() {
        let mut t = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
        t.set_grad(vec![1e-9, 3.0]).unwrap();
        let h = t.cast(Precision::Half16);
        assert_eq!(h.grad(), Some(&[1e-9f32, 3.0][..]));
        assert_eq!(h.grad_precision(), Some(Precision::Full32));
        assert_eq!(h.nbytes() * 2, t.nbytes());
    }

    #[test]
    fn fdrt_header_layout() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let bytes = t.to_fdrt_bytes();
        assert_eq!(&bytes[0..4], b"FDRT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..14], &2u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 18 + 24);
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());

        let h = t.cast(Precision::Half16).to_fdrt_bytes();
        assert_eq!(h[8], 1);
        assert_eq!(h.len(), 18 + 12);
        assert_eq!(&h[20..22], &f16::from_f32(1.0).to_bits().to_le_bytes());
    }

    #[test]
    fn fdrt_rejects_truncation() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let mut bytes = t.to_fdrt_bytes();
        bytes.pop();
        assert!(matches!(
            Tensor::from_fdrt_bytes(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn new_checks_numel() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Dimension { expected: 4, actual: 3, .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fdrt_roundtrip(dims in proptest::collection::vec(1usize..5, 0..4),
                              seed in any::<u32>(), half in any::<bool>()) {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6).collect();
                let mut t = Tensor::new(dims, data).unwrap();
                if half {
                    t = t.cast(Precision::Half16);
                }
                let back = Tensor::from_fdrt_bytes(&t.to_fdrt_bytes()).unwrap();
                prop_assert_eq!(back.to_fdrt_bytes(), t.to_fdrt_bytes());
                prop_assert_eq!(back, t);
            }

            #[test]
            fn half_values_are_fixed_points(v in -70000f32..70000f32) {
                let once = roundtrip(v);
                prop_assert_eq!(roundtrip(once).to_bits(), once.to_bits());
            }
        }
    }
}
