//! Dense vectors, matrices and order-3 tensors.
//!
//! Storage is row-major throughout. A [`Matrix`] of shape `rows x cols` keeps
//! entry `(r, c)` at `r * cols + c`; a [`Tensor3`] of shape `d1 x d2 x d3`
//! keeps entry `(i, j, k)` at `(i * d2 + j) * d3 + k`, so the last index
//! varies fastest.
//!
//! Mode indices passed to the n-mode products are 1-based (`1..=3`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(pos) => Err(invalid(format!("{what} entry {pos} is not finite"))),
        None => Ok(()),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data, "vector")?;
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape(format!(
                "dot of vectors with lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.0, &other.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self(data)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a `len x cols.len()` matrix whose columns are the given slices.
    pub fn from_cols<C: AsRef<[f64]>>(cols: &[C]) -> Result<Self> {
        let n = cols.len();
        let len = cols.first().map_or(0, |c| c.as_ref().len());
        let mut m = Self::zeros(len, n);
        for (j, c) in cols.iter().enumerate() {
            let c = c.as_ref();
            if c.len() != len {
                return Err(shape(format!(
                    "column {j} has length {}, expected {len}",
                    c.len()
                )));
            }
            for (r, &x) in c.iter().enumerate() {
                m.data[r * n + j] = x;
            }
        }
        check_finite(&m.data, "matrix")?;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vector {
        Vector((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    /// All columns as owned vectors; the attention kernels work column-wise.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c)).collect())
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape(format!(
                "matrix {}x{} times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`, without forming the transpose.
    pub(crate) fn matvec_t_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        out
    }

    /// Accumulates the outer product `alpha * a * b^T` into `self`.
    pub(crate) fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            let s = alpha * ar;
            if s != 0.0 {
                let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
                axpy(s, b, row);
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape(format!(
                "matmul of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a != 0.0 {
                    let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense order-3 tensor, row-major (`(i, j, k)` at `(i * d2 + j) * d3 + k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(shape(format!(
                "tensor {}x{}x{} needs {n} entries, got {}",
                dims[0],
                dims[1],
                dims[2],
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    /// Builds a tensor entry-by-entry from `f(i, j, k)` (0-based).
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Mode-3 fiber `(i, j, :)`.
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j, 0);
        &self.data[o..o + self.dims[2]]
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_mode(mode: usize) -> Result<usize> {
    if (1..=3).contains(&mode) {
        Ok(mode - 1)
    } else {
        Err(invalid(format!("mode must be 1, 2 or 3, got {mode}")))
    }
}

/// `X x_n Y`: contracts mode `n` of `x` against the columns of `y`; that
/// dimension is replaced by `y.rows()`.
pub fn n_mode_product_matrix(x: &Tensor3, y: &Matrix, mode: usize) -> Result<Tensor3> {
    let m = check_mode(mode)?;
    let dims = x.dims();
    if y.cols() != dims[m] {
        return Err(shape(format!(
            "mode-{mode} product: matrix has {} columns, tensor mode {mode} has size {}",
            y.cols(),
            dims[m]
        )));
    }
    let mut out_dims = dims;
    out_dims[m] = y.rows();
    let mut out = Tensor3::zeros(out_dims);
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let idx = [i, j, k];
                let row = y.row(idx[m]);
                let mut acc = 0.0;
                for (n, &yv) in row.iter().enumerate() {
                    let mut src = idx;
                    src[m] = n;
                    acc += x.get(src[0], src[1], src[2]) * yv;
                }
                out.set(i, j, k, acc);
            }
        }
    }
    Ok(out)
}

/// `X x_n y^T`: contracts mode `n` against a vector. The contracted mode is
/// kept with size 1 rather than squeezed out.
pub fn n_mode_product_vector(x: &Tensor3, y: &Vector, mode: usize) -> Result<Tensor3> {
    let m = check_mode(mode)?;
    if y.len() != x.dims()[m] {
        return Err(shape(format!(
            "mode-{mode} vector product: vector length {}, tensor mode {mode} has size {}",
            y.len(),
            x.dims()[m]
        )));
    }
    let row = Matrix {
        rows: 1,
        cols: y.len(),
        data: y.as_slice().to_vec(),
    };
    n_mode_product_matrix(x, &row, mode)
}

/// `<q, k, c> = sum_d q_d k_d c_d`.
pub fn contextual_inner_product(q: &Vector, k: &Vector, c: &Vector) -> Result<f64> {
    if q.len() != k.len() || q.len() != c.len() {
        return Err(shape(format!(
            "contextual inner product of lengths {}, {}, {}",
            q.len(),
            k.len(),
            c.len()
        )));
    }
    Ok(triple_dot(q.as_slice(), k.as_slice(), c.as_slice()))
}

#[inline]
pub(crate) fn triple_dot(q: &[f64], k: &[f64], c: &[f64]) -> f64 {
    q.iter()
        .zip(k)
        .zip(c)
        .map(|((a, b), d)| a * b * d)
        .sum()
}

/// The `D x D x D` tensor with ones on the superdiagonal `(d, d, d)`.
pub fn identity_tensor(d: usize) -> Result<Tensor3> {
    if d == 0 {
        return Err(invalid("identity tensor needs D >= 1"));
    }
    let mut t = Tensor3::zeros([d, d, d]);
    for i in 0..d {
        t.set(i, i, i, 1.0);
    }
    Ok(t)
}

/// Mode-3 matricization of an `I x J x D` tensor into a `D x (I*J)` matrix.
///
/// Column `m = i * J + j` (0-based) holds fiber `(i, j, :)`.
pub fn mode3_matricize(v: &Tensor3) -> Matrix {
    let [ni, nj, nd] = v.dims();
    let mut out = Matrix::zeros(nd, ni * nj);
    for i in 0..ni {
        for j in 0..nj {
            let m = i * nj + j;
            for (d, &x) in v.fiber(i, j).iter().enumerate() {
                out.set(d, m, x);
            }
        }
    }
    out
}

/// Inverse of [`mode3_matricize`] for a known `(I, J)`.
pub fn mode3_fold(m: &Matrix, ni: usize, nj: usize) -> Result<Tensor3> {
    if m.cols() != ni * nj {
        return Err(shape(format!(
            "cannot fold {} columns into {ni}x{nj}",
            m.cols()
        )));
    }
    let nd = m.rows();
    Ok(Tensor3::from_fn([ni, nj, nd], |i, j, d| m.get(d, i * nj + j)))
}

/// Elementwise product.
pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(shape(format!(
            "hadamard of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(Vector(
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x * y)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(r, c, data).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Direct transcription of the n-mode summation, one branch per mode.
    fn naive_mode_product(x: &Tensor3, y: &Matrix, mode: usize) -> Tensor3 {
        let [a, b, c] = x.dims();
        match mode {
            1 => Tensor3::from_fn([y.rows(), b, c], |j, i2, i3| {
                (0..a).map(|n| x.get(n, i2, i3) * y.get(j, n)).sum()
            }),
            2 => Tensor3::from_fn([a, y.rows(), c], |i1, j, i3| {
                (0..b).map(|n| x.get(i1, n, i3) * y.get(j, n)).sum()
            }),
            3 => Tensor3::from_fn([a, b, y.rows()], |i1, i2, j| {
                (0..c).map(|n| x.get(i1, i2, n) * y.get(j, n)).sum()
            }),
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_matrix_is_identity_map_on_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 3, 4]);
        for mode in 1..=3 {
            let n = x.dims()[mode - 1];
            let z = n_mode_product_matrix(&x, &Matrix::identity(n), mode).unwrap();
            assert_eq!(z.max_abs_diff(&x), 0.0);
        }
    }

    #[test]
    fn ones_mode2_sums() {
        let x = Tensor3::from_fn([2, 3, 2], |_, _, _| 1.0);
        let y = Matrix::filled(1, 3, 1.0);
        let z = n_mode_product_matrix(&x, &y, 2).unwrap();
        assert_eq!(z.dims(), [2, 1, 2]);
        assert!(z.as_slice().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn mode_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, [3, 3, 3]);
        let y = rand_matrix(&mut rng, 2, 3);
        for mode in 1..=3 {
            let z = n_mode_product_matrix(&x, &y, mode).unwrap();
            assert!(z.max_abs_diff(&naive_mode_product(&x, &y, mode)) < 1e-12);
        }
    }

    #[test]
    fn mode_product_shape_errors() {
        let x = Tensor3::zeros([2, 3, 4]);
        let err = n_mode_product_matrix(&x, &Matrix::zeros(2, 2), 2).unwrap_err();
        assert!(err.to_string().contains("mode 2 has size 3"), "{err}");
        assert!(n_mode_product_matrix(&x, &Matrix::zeros(2, 2), 0).is_err());
        assert!(n_mode_product_matrix(&x, &Matrix::zeros(2, 2), 4).is_err());
        assert!(n_mode_product_vector(&x, &Vector::zeros(5), 1).is_err());
    }

    #[test]
    fn vector_product_keeps_trivial_mode() {
        let id = identity_tensor(2).unwrap();
        let z = n_mode_product_vector(&id, &Vector::ones(2), 3).unwrap();
        assert_eq!(z.dims(), [2, 2, 1]);
        assert_eq!(z.as_slice(), &[1.0, 0.0, 0.0, 1.0]);

        let ones = Tensor3::from_fn([2, 2, 2], |_, _, _| 1.0);
        let z = n_mode_product_vector(&ones, &Vector(vec![2.0, 2.0]), 1).unwrap();
        assert_eq!(z.dims(), [1, 2, 2]);
        assert!(z.as_slice().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn vector_product_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, [4, 2, 3]);
        for mode in 1..=3 {
            let y = rand_vec(&mut rng, x.dims()[mode - 1]);
            let z = n_mode_product_vector(&x, &y, mode).unwrap();
            let row = Matrix::new(1, y.len(), y.as_slice().to_vec()).unwrap();
            assert!(z.max_abs_diff(&naive_mode_product(&x, &row, mode)) < 1e-12);
        }
    }

    #[test]
    fn contextual_inner_product_cases() {
        let ones = Vector::ones(4);
        assert_eq!(contextual_inner_product(&ones, &ones, &ones).unwrap(), 4.0);
        assert_eq!(
            contextual_inner_product(&ones, &ones, &Vector::zeros(4)).unwrap(),
            0.0
        );
        assert!(contextual_inner_product(&ones, &ones, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn contextual_inner_product_is_identity_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [5, 6] {
            let (q, k, c) = (
                rand_vec(&mut rng, d),
                rand_vec(&mut rng, d),
                rand_vec(&mut rng, d),
            );
            let id = identity_tensor(d).unwrap();
            let z = n_mode_product_vector(&id, &q, 1).unwrap();
            let z = n_mode_product_vector(&z, &k, 2).unwrap();
            let z = n_mode_product_vector(&z, &c, 3).unwrap();
            assert_eq!(z.dims(), [1, 1, 1]);
            let direct = contextual_inner_product(&q, &k, &c).unwrap();
            assert!((z.get(0, 0, 0) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_tensor_cases() {
        assert_eq!(identity_tensor(1).unwrap().as_slice(), &[1.0]);
        let t = identity_tensor(2).unwrap();
        assert_eq!(t.as_slice().iter().filter(|&&x| x != 0.0).count(), 2);
        assert!(t.as_slice().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(identity_tensor(0).is_err());
    }

    #[test]
    fn matricize_column_order() {
        let (ni, nj, nd) = (2, 3, 2);
        // sentinel value encodes (i, j, d)
        let v = Tensor3::from_fn([ni, nj, nd], |i, j, d| (100 * i + 10 * j + d) as f64);
        let m = mode3_matricize(&v);
        assert_eq!(m.shape(), (nd, ni * nj));
        let mut col = 0;
        for i in 0..ni {
            for j in 0..nj {
                for d in 0..nd {
                    assert_eq!(m.get(d, col), (100 * i + 10 * j + d) as f64);
                }
                col += 1;
            }
        }
        let single = Tensor3::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mode3_matricize(&single).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn hadamard_cases() {
        let a = Vector(vec![1.0, 2.0]);
        assert_eq!(hadamard(&a, &Vector::ones(2)).unwrap(), a);
        assert_eq!(hadamard(&a, &Vector::zeros(2)).unwrap(), Vector::zeros(2));
        assert_eq!(
            hadamard(&a, &Vector(vec![3.0, 4.0])).unwrap().as_slice(),
            &[3.0, 8.0]
        );
        assert!(hadamard(&a, &Vector::ones(3)).is_err());
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor3::new([1, 1, 2], vec![0.0]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }
}
