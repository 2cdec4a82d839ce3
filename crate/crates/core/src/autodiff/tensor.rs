use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Rank-0 tensors (shape `[]`) hold exactly one value and are used for
/// scalar losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    /// Row `r` of the tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Boolean validity mask with an explicit shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != bits.len() {
            return Err(Error::shape("mask", &shape, &[bits.len()]));
        }
        Ok(Self { shape, bits })
    }

    pub fn all(shape: &[usize], value: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Mask as a 0/1 tensor of the same shape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Concatenates masks of shape `[B, L_i]` along the last axis.
    pub fn concat_last(parts: &[&Mask]) -> Result<Mask> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero masks".into()))?;
        let lead: Vec<usize> = first.shape[..first.shape.len() - 1].to_vec();
        let outer: usize = lead.iter().product();
        let mut total = 0;
        for p in parts {
            if p.shape[..p.shape.len() - 1] != lead[..] {
                return Err(Error::shape("mask concat", &first.shape, &p.shape));
            }
            total += p.shape[p.shape.len() - 1];
        }
        let mut bits = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for p in parts {
                let l = p.shape[p.shape.len() - 1];
                bits.extend_from_slice(&p.bits[o * l..(o + 1) * l]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(Mask { shape, bits })
    }

    /// Expands a key mask `[B, Lk]` to an attention mask `[B, Lq, Lk]`.
    pub fn expand_keys(&self, queries: usize) -> Mask {
        assert_eq!(self.shape.len(), 2, "expand_keys expects [B, Lk]");
        let (b, lk) = (self.shape[0], self.shape[1]);
        let mut bits = Vec::with_capacity(b * queries * lk);
        for i in 0..b {
            let row = &self.bits[i * lk..(i + 1) * lk];
            for _ in 0..queries {
                bits.extend_from_slice(row);
            }
        }
        Mask {
            shape: vec![b, queries, lk],
            bits,
        }
    }

    /// Row `r` of the mask viewed as `[numel / last, last]`.
    pub fn row(&self, r: usize) -> &[bool] {
        let c = self.shape.last().copied().unwrap_or(1);
        &self.bits[r * c..(r + 1) * c]
    }
}
