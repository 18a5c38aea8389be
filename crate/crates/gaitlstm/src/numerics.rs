//! Minimal dense linear-algebra kernel: row-major `f64` matrices, vectors,
//! and the elementwise functions the rest of the crate is built on.
//!
//! Everything here is a pure function over immutable inputs. Shape mismatches
//! are programmer error and panic with a message naming both shapes; hidden
//! sizes stay small enough (≤ 256) that the naive triple loop is all we need.

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == ncols),
            "ragged row lengths building a {nrows}x{ncols} matrix"
        );
        Matrix {
            rows: nrows,
            cols: ncols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    /// Identity (square) matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Accumulate the outer product `u vᵀ` into `self`.
    pub fn add_outer(&mut self, u: &Vector, v: &Vector) {
        assert!(
            self.rows == u.len() && self.cols == v.len(),
            "add_outer shape mismatch: matrix {}x{}, u len {}, v len {}",
            self.rows,
            self.cols,
            u.len(),
            v.len()
        );
        for r in 0..self.rows {
            let s = u[r];
            let row = self.row_mut(r);
            for (out, &vj) in row.iter_mut().zip(v.as_slice()) {
                *out += s * vj;
            }
        }
    }

    /// Copy with every entry multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| s * x).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dense vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Vector {
            data: vec![v; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector {
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        assert_eq!(
            self.len(),
            other.len(),
            "hadamard length mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(
            self.len(),
            other.len(),
            "add length mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Vector) {
        assert_eq!(
            self.len(),
            other.len(),
            "add_assign length mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|x| s * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest entry; ties break to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate().skip(1) {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// `m · v`.
pub fn matvec(m: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        m.cols(),
        v.len(),
        "matvec shape mismatch: matrix {}x{} times vector of length {}",
        m.rows(),
        m.cols(),
        v.len()
    );
    let mut out = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        out.push(
            m.row(r)
                .iter()
                .zip(v.as_slice())
                .map(|(a, b)| a * b)
                .sum(),
        );
    }
    Vector::from_vec(out)
}

/// `mᵀ · v`, without materializing the transpose.
pub fn matvec_t(m: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        m.rows(),
        v.len(),
        "matvec_t shape mismatch: matrix {}x{} transposed times vector of length {}",
        m.rows(),
        m.cols(),
        v.len()
    );
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let s = v[r];
        for (o, &mrc) in out.iter_mut().zip(m.row(r)) {
            *o += s * mrc;
        }
    }
    Vector::from_vec(out)
}

/// Logistic function, computed on the non-overflowing branch for each sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_fn(x: f64) -> f64 {
    x.tanh()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Softmax with max-subtraction so large inputs cannot overflow.
pub fn softmax(v: &Vector) -> Vector {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let max = v.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.as_slice().iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / total).collect())
}

/// Sum with Kahan compensation; used wherever a reduction must stay exact
/// enough for documented tie-break rules to hold.
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}
