//! Tensor values and bit-exact element manipulation.
//!
//! A [`Tensor`] is an immutable, row-major, typed buffer. All corruption
//! primitives used by the fault types live here and return new tensors;
//! nothing mutates in place.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, buffer has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("element index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("bit index {bit} out of range for {dtype} ({width} bits)")]
    BitOutOfRange { bit: u32, dtype: DType, width: u32 },
    #[error("{op} does not support dtype {dtype}")]
    UnsupportedDType { op: &'static str, dtype: DType },
}

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
    I64,
    Bool,
}

impl DType {
    /// Number of corruptible bits per element. `Bool` has a single logical bit.
    pub fn bit_width(self) -> u32 {
        match self {
            DType::F32 => 32,
            DType::F64 | DType::I64 => 64,
            DType::Bool => 1,
        }
    }

    /// Bytes per element in the on-disk encoding.
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::Bool => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
            DType::Bool => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            3 => Some(DType::Bool),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
            DType::I64 => "I64",
            DType::Bool => "Bool",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "f32" | "float32" => Some(DType::F32),
            "f64" | "float64" => Some(DType::F64),
            "i64" | "int64" => Some(DType::I64),
            "bool" => Some(DType::Bool),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Flat element storage.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
            TensorData::Bool(_) => DType::Bool,
        }
    }
}

/// Shaped, typed, row-major tensor.
///
/// Equality (`==`) is bit-identity: two tensors are equal when dtype, shape
/// and every stored bit pattern agree. NaN payloads compare equal to
/// themselves and `0.0 != -0.0`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn from_i64(shape: Vec<usize>, values: Vec<i64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::I64(values))
    }

    pub fn from_bool(shape: Vec<usize>, values: Vec<bool>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Bool(values))
    }

    pub fn scalar_f32(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: TensorData::F32(vec![value]),
        }
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
            DType::I64 => TensorData::I64(vec![0; n]),
            DType::Bool => TensorData::Bool(vec![false; n]),
        };
        Tensor { shape, data }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<&[bool]> {
        match &self.data {
            TensorData::Bool(v) => Some(v),
            _ => None,
        }
    }

    /// Same data under a different shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    /// Element `i` widened to f64 (lossy only for very large i64 values).
    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
            TensorData::I64(v) => v[i] as f64,
            TensorData::Bool(v) => {
                if v[i] {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get_f64(i)).collect()
    }

    /// Stored bit pattern of element `i`, zero-extended to 64 bits.
    pub fn element_bits(&self, i: usize) -> Result<u64, TensorError> {
        self.check_index(i)?;
        Ok(match &self.data {
            TensorData::F32(v) => v[i].to_bits() as u64,
            TensorData::F64(v) => v[i].to_bits(),
            TensorData::I64(v) => v[i] as u64,
            TensorData::Bool(v) => v[i] as u64,
        })
    }

    /// Copy of `self` with element `i` replaced by the given bit pattern.
    pub fn with_element_bits(&self, i: usize, bits: u64) -> Result<Self, TensorError> {
        self.check_index(i)?;
        let mut out = self.clone();
        out.set_bits(i, bits);
        Ok(out)
    }

    fn set_bits(&mut self, i: usize, bits: u64) {
        match &mut self.data {
            TensorData::F32(v) => v[i] = f32::from_bits(bits as u32),
            TensorData::F64(v) => v[i] = f64::from_bits(bits),
            TensorData::I64(v) => v[i] = bits as i64,
            TensorData::Bool(v) => v[i] = bits & 1 == 1,
        }
    }

    fn check_index(&self, i: usize) -> Result<(), TensorError> {
        if i >= self.len() {
            return Err(TensorError::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// Row-major linear index of a coordinate, or `None` when out of bounds.
    pub fn linear_index(&self, coords: &[usize]) -> Option<usize> {
        linear_index(&self.shape, coords)
    }

    pub fn coords(&self, index: usize) -> Option<Vec<usize>> {
        if index >= self.len() {
            return None;
        }
        Some(unravel_index(&self.shape, index))
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            (TensorData::Bool(a), TensorData::Bool(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Tensor {}

pub fn linear_index(shape: &[usize], coords: &[usize]) -> Option<usize> {
    if coords.len() != shape.len() {
        return None;
    }
    let mut index = 0usize;
    for (&c, &extent) in coords.iter().zip(shape) {
        if c >= extent {
            return None;
        }
        index = index * extent + c;
    }
    Some(index)
}

pub fn unravel_index(shape: &[usize], mut index: usize) -> Vec<usize> {
    let mut coords = vec![0; shape.len()];
    for (c, &extent) in coords.iter_mut().zip(shape).rev() {
        *c = index % extent;
        index /= extent;
    }
    coords
}

fn check_bit(dtype: DType, bit: u32) -> Result<(), TensorError> {
    let width = dtype.bit_width();
    if bit >= width {
        return Err(TensorError::BitOutOfRange { bit, dtype, width });
    }
    Ok(())
}

/// Flip bit `bit` of element `elem`. Applying it twice restores `t` exactly.
pub fn bit_flip_element(t: &Tensor, elem: usize, bit: u32) -> Result<Tensor, TensorError> {
    check_bit(t.dtype(), bit)?;
    let bits = t.element_bits(elem)?;
    t.with_element_bits(elem, bits ^ (1u64 << bit))
}

/// Flip one bit in every element; `chooser` picks the bit for each element index.
/// Returns the corrupted tensor and the chosen bit per element.
pub fn bit_flip_all<F>(t: &Tensor, mut chooser: F) -> Result<(Tensor, Vec<u32>), TensorError>
where
    F: FnMut(usize) -> u32,
{
    let dtype = t.dtype();
    let mut out = t.clone();
    let mut chosen = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let bit = chooser(i);
        check_bit(dtype, bit)?;
        let bits = t.element_bits(i)?;
        out.set_bits(i, bits ^ (1u64 << bit));
        chosen.push(bit);
    }
    Ok((out, chosen))
}

pub fn zero_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.dtype(), t.shape.clone())
}

/// Every element replaced by an independent uniform draw from `[0, 1)`.
pub fn rand_like<R: Rng + ?Sized>(t: &Tensor, rng: &mut R) -> Result<Tensor, TensorError> {
    let data = match &t.data {
        TensorData::F32(v) => TensorData::F32(v.iter().map(|_| rng.random::<f32>()).collect()),
        TensorData::F64(v) => TensorData::F64(v.iter().map(|_| rng.random::<f64>()).collect()),
        _ => {
            return Err(TensorError::UnsupportedDType {
                op: "rand_like",
                dtype: t.dtype(),
            })
        }
    };
    Ok(Tensor {
        shape: t.shape.clone(),
        data,
    })
}

/// Element `elem` replaced by a uniform draw from `[0, 1)`; all others untouched.
pub fn rand_element<R: Rng + ?Sized>(
    t: &Tensor,
    elem: usize,
    rng: &mut R,
) -> Result<Tensor, TensorError> {
    if !t.dtype().is_float() {
        return Err(TensorError::UnsupportedDType {
            op: "rand_element",
            dtype: t.dtype(),
        });
    }
    t.check_index(elem)?;
    let mut out = t.clone();
    match &mut out.data {
        TensorData::F32(v) => v[elem] = rng.random::<f32>(),
        TensorData::F64(v) => v[elem] = rng.random::<f64>(),
        _ => unreachable!(),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;
    use proptest::prelude::*;

    fn f32s(values: &[f32]) -> Tensor {
        Tensor::from_f32(vec![values.len()], values.to_vec()).unwrap()
    }

    /// Number of elements whose bit pattern differs.
    fn differing(a: &Tensor, b: &Tensor) -> usize {
        (0..a.len())
            .filter(|&i| a.element_bits(i).unwrap() != b.element_bits(i).unwrap())
            .count()
    }

    #[test]
    fn sign_bit_flip() {
        let out = bit_flip_element(&f32s(&[1.0]), 0, 31).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[-1.0]);
    }

    #[test]
    fn lowest_bit_of_zero_is_smallest_subnormal() {
        let out = bit_flip_element(&f32s(&[0.0]), 0, 0).unwrap();
        let v = out.as_f32().unwrap()[0];
        // 0x00000001 is 2^-149.
        assert_eq!(v.to_bits(), 0x0000_0001);
        assert_eq!(v as f64, 2f64.powi(-149));
        assert!((v as f64 - 1.401e-45).abs() < 1e-48);
    }

    #[test]
    fn flip_errors() {
        let t = f32s(&[1.0, 2.0]);
        assert!(matches!(
            bit_flip_element(&t, 2, 0),
            Err(TensorError::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(matches!(
            bit_flip_element(&t, 0, 32),
            Err(TensorError::BitOutOfRange { bit: 32, .. })
        ));
        let b = Tensor::from_bool(vec![1], vec![true]).unwrap();
        assert_eq!(bit_flip_element(&b, 0, 0).unwrap().as_bool().unwrap(), &[false]);
        assert!(bit_flip_element(&b, 0, 1).is_err());
    }

    #[test]
    fn i64_flip_top_bit() {
        let t = Tensor::from_i64(vec![1], vec![3]).unwrap();
        let out = bit_flip_element(&t, 0, 63).unwrap();
        assert_eq!(out.as_i64().unwrap(), &[3 | i64::MIN]);
    }

    #[test]
    fn flip_all_sign_bits() {
        let (out, bits) = bit_flip_all(&f32s(&[1.0, 1.0]), |_| 31).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[-1.0, -1.0]);
        assert_eq!(bits, vec![31, 31]);
        let (back, _) = bit_flip_all(&out, |i| bits[i]).unwrap();
        assert_eq!(back, f32s(&[1.0, 1.0]));
        let (_, five) = bit_flip_all(&f32s(&[0.0; 5]), |i| i as u32).unwrap();
        assert_eq!(five.len(), 5);
    }

    #[test]
    fn zero_like_cases() {
        let t = Tensor::from_i64(vec![3], vec![1, 2, 3]).unwrap();
        assert_eq!(zero_like(&t).as_i64().unwrap(), &[0, 0, 0]);
        let s = Tensor::scalar_f32(7.5);
        let z = zero_like(&s);
        assert_eq!(z.rank(), 0);
        assert_eq!(z.as_f32().unwrap(), &[0.0]);
        assert_eq!(zero_like(&z), z);
        let b = Tensor::from_bool(vec![2], vec![true, true]).unwrap();
        assert_eq!(zero_like(&b).as_bool().unwrap(), &[false, false]);
    }

    #[test]
    fn rand_like_contracts() {
        let t = f32s(&[9.0; 64]);
        let a = rand_like(&t, &mut run_rng(11, 0)).unwrap();
        let b = rand_like(&t, &mut run_rng(11, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.as_f32().unwrap().iter().all(|&v| (0.0..1.0).contains(&v)));
        let empty = Tensor::from_f32(vec![0], vec![]).unwrap();
        let e = rand_like(&empty, &mut run_rng(1, 0)).unwrap();
        assert_eq!(e.shape(), &[0]);
        let ints = Tensor::from_i64(vec![1], vec![1]).unwrap();
        assert!(matches!(
            rand_like(&ints, &mut run_rng(1, 0)),
            Err(TensorError::UnsupportedDType { .. })
        ));
    }

    #[test]
    fn rand_element_locality() {
        let t = f32s(&[5.0, 5.0, 5.0]);
        let out = rand_element(&t, 1, &mut run_rng(3, 0)).unwrap();
        let v = out.as_f32().unwrap();
        assert_eq!(v[0], 5.0);
        assert_eq!(v[2], 5.0);
        assert!((0.0..1.0).contains(&v[1]));
        let one = rand_element(&f32s(&[5.0]), 0, &mut run_rng(3, 0)).unwrap();
        assert!((0.0..1.0).contains(&one.as_f32().unwrap()[0]));
        assert!(rand_element(&t, 3, &mut run_rng(3, 0)).is_err());
    }

    #[test]
    fn coordinates() {
        let t = Tensor::zeros(DType::F32, vec![2, 3, 4]);
        assert_eq!(t.linear_index(&[1, 2, 3]), Some(23));
        assert_eq!(t.coords(23), Some(vec![1, 2, 3]));
        assert_eq!(t.linear_index(&[2, 0, 0]), None);
        assert_eq!(Tensor::scalar_f32(1.0).linear_index(&[]), Some(0));
        assert!(Tensor::from_f32(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn equality_is_bitwise() {
        let nan = f32s(&[f32::NAN]);
        assert_eq!(nan, nan.clone());
        assert_ne!(f32s(&[0.0]), f32s(&[-0.0]));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop_oneof![
            prop::collection::vec(any::<f32>(), 1..32)
                .prop_map(|v| Tensor::from_f32(vec![v.len()], v).unwrap()),
            prop::collection::vec(any::<f64>(), 1..32)
                .prop_map(|v| Tensor::from_f64(vec![v.len()], v).unwrap()),
            prop::collection::vec(any::<i64>(), 1..32)
                .prop_map(|v| Tensor::from_i64(vec![v.len()], v).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn double_flip_is_identity(t in arb_tensor(), e in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
            let elem = e.index(t.len());
            let bit = b.index(t.dtype().bit_width() as usize) as u32;
            let once = bit_flip_element(&t, elem, bit).unwrap();
            prop_assert_eq!(differing(&t, &once), 1);
            let diff = once.element_bits(elem).unwrap() ^ t.element_bits(elem).unwrap();
            prop_assert_eq!(diff, 1u64 << bit);
            prop_assert_eq!(bit_flip_element(&once, elem, bit).unwrap(), t);
        }

        #[test]
        fn coords_round_trip(shape in prop::collection::vec(1usize..5, 0..4), i in any::<prop::sample::Index>()) {
            let n = element_count(&shape);
            let idx = i.index(n);
            let c = unravel_index(&shape, idx);
            prop_assert_eq!(linear_index(&shape, &c), Some(idx));
        }
    }
}
