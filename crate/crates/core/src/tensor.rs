//! Dense order-d tensors stored mode-1-fastest.
//!
//! The linear offset of multi-index `(i_0, …, i_{d-1})` is
//! `i_0 + n_0·(i_1 + n_1·(i_2 + …))`, i.e. column-major generalized to `d`
//! modes. Unfoldings follow the Kolda–Bader convention: the mode-`k` fibres
//! become columns, with the remaining modes ordered lowest-first. Under this
//! convention `vec(A ×_k M)` and the Kronecker identities used by the
//! emulators line up without any hidden permutations.
//!
//! Mode indices are zero-based throughout the API.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Magic bytes at the start of every MFT1 tensor file.
pub const MFT1_MAGIC: &[u8; 4] = b"MFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    dims: Vec<usize>,
    values: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::dim("a tensor needs at least one mode"));
    }
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return Err(Error::dim(format!("mode {k} has size zero")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim("tensor size overflows usize"))
}

impl<T: Real> DenseTensor<T> {
    /// Wraps `values` (already in layout order) as a tensor of shape `dims`.
    pub fn new(dims: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != values.len() {
            return Err(Error::dim(format!(
                "dims {:?} hold {} entries but {} values were supplied",
                dims,
                n,
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        Ok(Self {
            dims,
            values: vec![T::zero(); n],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in layout order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let n = check_dims(&dims)?;
        let mut idx = vec![0usize; dims.len()];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f(&idx));
            for (i, d) in idx.iter_mut().zip(&dims) {
                *i += 1;
                if *i < *d {
                    break;
                }
                *i = 0;
            }
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in layout order.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .rev()
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.values[self.linear_index(idx)]
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k >= self.order() {
            Err(Error::ModeIndex {
                mode: k,
                order: self.order(),
            })
        } else {
            Ok(())
        }
    }

    /// Product of the sizes of the modes before and after `k`.
    fn split(&self, k: usize) -> (usize, usize, usize) {
        let left: usize = self.dims[..k].iter().product();
        let right: usize = self.dims[k + 1..].iter().product();
        (left, self.dims[k], right)
    }

    /// Mode-`k` unfolding: a `dims[k] × Π_{j≠k} dims[j]` matrix.
    pub fn unfold(&self, k: usize) -> Result<DMatrix<T>> {
        self.check_mode(k)?;
        let (left, dk, right) = self.split(k);
        let mut out = DMatrix::zeros(dk, left * right);
        {
            let data = out.as_mut_slice();
            for b in 0..right {
                for i in 0..dk {
                    let src = &self.values[left * (i + dk * b)..left * (i + dk * b) + left];
                    for (a, &v) in src.iter().enumerate() {
                        data[i + dk * (a + left * b)] = v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn fold(m: &DMatrix<T>, k: usize, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        if k >= dims.len() {
            return Err(Error::ModeIndex {
                mode: k,
                order: dims.len(),
            });
        }
        let left: usize = dims[..k].iter().product();
        let dk = dims[k];
        let right: usize = dims[k + 1..].iter().product();
        if m.nrows() != dk || m.ncols() != left * right {
            return Err(Error::dim(format!(
                "cannot fold a {}×{} matrix along mode {k} into {:?}",
                m.nrows(),
                m.ncols(),
                dims
            )));
        }
        let data = m.as_slice();
        let mut values = vec![T::zero(); dk * left * right];
        for b in 0..right {
            for i in 0..dk {
                let dst = &mut values[left * (i + dk * b)..left * (i + dk * b) + left];
                for (a, v) in dst.iter_mut().enumerate() {
                    *v = data[i + dk * (a + left * b)];
                }
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            values,
        })
    }

    /// Mode-`k` tensor–matrix product `self ×_k m`, with `m` of shape `r × dims[k]`.
    pub fn mode_product(&self, m: &DMatrix<T>, k: usize) -> Result<Self> {
        self.check_mode(k)?;
        let (left, dk, right) = self.split(k);
        if m.ncols() != dk {
            return Err(Error::dim(format!(
                "mode-{k} product needs {dk} matrix columns, got {}",
                m.ncols()
            )));
        }
        let r = m.nrows();
        let mut dims = self.dims.clone();
        dims[k] = r;
        if r == 0 {
            return Err(Error::dim("mode product with an empty matrix"));
        }
        let mut values = vec![T::zero(); left * r * right];
        if left == 1 {
            let x = DMatrixView::from_slice(&self.values, dk, right);
            let y = m * x;
            values.copy_from_slice(y.as_slice());
        } else {
            let mt = m.transpose();
            for b in 0..right {
                let slab = DMatrixView::from_slice(&self.values[b * left * dk..(b + 1) * left * dk], left, dk);
                let y = slab * &mt;
                values[b * left * r..(b + 1) * left * r].copy_from_slice(y.as_slice());
            }
        }
        Ok(Self { dims, values })
    }

    /// Mode product with the transpose of `m` (`m` of shape `dims[k] × r`).
    pub fn mode_product_transposed(&self, m: &DMatrix<T>, k: usize) -> Result<Self> {
        self.mode_product(&m.transpose(), k)
    }

    pub fn vectorize(&self) -> DVector<T> {
        DVector::from_column_slice(&self.values)
    }

    /// `[i, j, k] = u[i]·v[j]·w[k]`.
    pub fn outer3(u: &[T], v: &[T], w: &[T]) -> Result<Self> {
        if u.is_empty() || v.is_empty() || w.is_empty() {
            return Err(Error::dim("outer product of an empty vector"));
        }
        let mut values = Vec::with_capacity(u.len() * v.len() * w.len());
        for &wk in w {
            for &vj in v {
                let s = vj * wk;
                values.extend(u.iter().map(|&ui| ui * s));
            }
        }
        Ok(Self {
            dims: vec![u.len(), v.len(), w.len()],
            values,
        })
    }

    pub fn norm_squared(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn try_map(&self, f: impl Fn(T) -> Result<T>) -> Result<Self> {
        Ok(Self {
            dims: self.dims.clone(),
            values: self.values.iter().map(|&v| f(v)).collect::<Result<_>>()?,
        })
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn is_all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Slice `i` along the last mode, as a tensor of one lower order.
    ///
    /// An order-1 tensor yields a single-entry order-1 tensor.
    pub fn slice_last(&self, i: usize) -> Result<Self> {
        let last = *self.dims.last().expect("order ≥ 1");
        if i >= last {
            return Err(Error::dim(format!("slice {i} of a last mode of size {last}")));
        }
        let block = self.values.len() / last;
        let dims = if self.order() == 1 {
            vec![1]
        } else {
            self.dims[..self.order() - 1].to_vec()
        };
        Ok(Self {
            dims,
            values: self.values[i * block..(i + 1) * block].to_vec(),
        })
    }

    /// Keeps the listed indices (in that order) of the last mode.
    pub fn select_last(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::dim("selecting zero slices"));
        }
        let last = *self.dims.last().expect("order ≥ 1");
        let block = self.values.len() / last;
        let mut values = Vec::with_capacity(block * keep.len());
        for &i in keep {
            if i >= last {
                return Err(Error::dim(format!("slice {i} of a last mode of size {last}")));
            }
            values.extend_from_slice(&self.values[i * block..(i + 1) * block]);
        }
        let mut dims = self.dims.clone();
        *dims.last_mut().unwrap() = keep.len();
        Ok(Self { dims, values })
    }

    /// Stacks equally shaped tensors along a new trailing mode.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("stacking zero tensors"))?;
        let mut values = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::dim(format!(
                    "stacking {:?} onto {:?}",
                    p.dims, first.dims
                )));
            }
            values.extend_from_slice(&p.values);
        }
        let mut dims = first.dims.clone();
        dims.push(parts.len());
        Ok(Self { dims, values })
    }

    /// Same values viewed under a different shape with equal entry count.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.values.clone())
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Real>(&self) -> DenseTensor<U> {
        DenseTensor {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Serializes as MFT1: magic, order, dims, then little-endian f64 payload.
    pub fn write_mft<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MFT1_MAGIC)?;
        w.write_all(&(self.order() as u64).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_mft<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MFT1_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected MFT1")));
        }
        let order = read_u64(&mut r, "order")?;
        if order == 0 || order > 64 {
            return Err(Error::Format(format!("implausible tensor order {order}")));
        }
        let mut dims = Vec::with_capacity(order as usize);
        for _ in 0..order {
            let d = read_u64(&mut r, "dimension")?;
            dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
        }
        let n = check_dims(&dims).map_err(|e| Error::Format(e.to_string()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {} for dims {:?}",
                bytes.len(),
                n * 8,
                dims
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self { dims, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        let mut w = std::io::BufWriter::new(f);
        self.write_mft(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_mft(std::io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated header while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Saves a matrix as an order-2 MFT1 tensor.
pub fn save_matrix<T: Real>(m: &DMatrix<T>, path: impl AsRef<Path>) -> Result<()> {
    DenseTensor::new(vec![m.nrows(), m.ncols()], m.as_slice().to_vec())?.save(path)
}

pub fn load_matrix<T: Real>(path: impl AsRef<Path>) -> Result<DMatrix<T>> {
    let t = DenseTensor::<T>::load(path)?;
    if t.order() != 2 {
        return Err(Error::Format(format!("expected an order-2 tensor, found dims {:?}", t.dims())));
    }
    Ok(DMatrix::from_column_slice(t.dims()[0], t.dims()[1], t.values()))
}
