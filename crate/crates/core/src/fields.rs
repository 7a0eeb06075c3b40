//! State-dependent matrices and scalar functions with optional analytic derivatives.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SphsError};

pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Central-difference step scale for first derivatives, `eps^(1/3)`.
pub fn fd_step_first() -> f64 {
    f64::EPSILON.cbrt()
}

/// Central-difference step scale for second derivatives, `eps^(1/4)`.
pub fn fd_step_second() -> f64 {
    f64::EPSILON.powf(0.25)
}

/// A matrix-valued map of the state, either constant or an arbitrary function.
#[derive(Clone)]
pub enum MatrixField {
    Constant(DMatrix<f64>),
    Function { rows: usize, cols: usize, f: MatrixFn },
}

impl MatrixField {
    pub fn constant(m: DMatrix<f64>) -> Self {
        MatrixField::Constant(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixField::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn function<F>(rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        MatrixField::Function {
            rows,
            cols,
            f: Arc::new(f),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixField::Constant(m) => m.shape(),
            MatrixField::Function { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixField::Constant(_))
    }

    /// True for a constant all-zero matrix.
    pub fn is_zero(&self) -> bool {
        matches!(self, MatrixField::Constant(m) if m.iter().all(|&v| v == 0.0))
    }

    pub fn eval(&self, x: &DVector<f64>) -> Cow<'_, DMatrix<f64>> {
        match self {
            MatrixField::Constant(m) => Cow::Borrowed(m),
            MatrixField::Function { f, .. } => Cow::Owned(f(x)),
        }
    }

    /// Evaluates and checks the returned shape against the declared one.
    pub fn eval_checked(&self, x: &DVector<f64>, what: &str) -> Result<Cow<'_, DMatrix<f64>>> {
        let m = self.eval(x);
        let (r, c) = self.shape();
        if m.nrows() != r {
            return Err(SphsError::dim(format!("{what} rows"), r, m.nrows()));
        }
        if m.ncols() != c {
            return Err(SphsError::dim(format!("{what} columns"), c, m.ncols()));
        }
        Ok(m)
    }

    /// Embeds this `n_block`-dimensional field into a larger state space.
    ///
    /// The block reads `x[offset..offset + n_block]` and writes its result into
    /// rows `row_offset..` and columns `col_offset..` of a `rows x cols` zero matrix.
    pub(crate) fn embedded(
        &self,
        offset: usize,
        n_block: usize,
        rows: usize,
        cols: usize,
        row_offset: usize,
        col_offset: usize,
    ) -> MatrixField {
        let (r, c) = self.shape();
        match self {
            MatrixField::Constant(m) => {
                let mut big = DMatrix::zeros(rows, cols);
                big.view_mut((row_offset, col_offset), (r, c)).copy_from(m);
                MatrixField::Constant(big)
            }
            MatrixField::Function { f, .. } => {
                let f = f.clone();
                MatrixField::function(rows, cols, move |x| {
                    let xb = x.rows(offset, n_block).into_owned();
                    let m = f(&xb);
                    let mut big = DMatrix::zeros(rows, cols);
                    big.view_mut((row_offset, col_offset), (r, c)).copy_from(&m);
                    big
                })
            }
        }
    }
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixField::Constant(m) => write!(f, "Constant({m:?})"),
            MatrixField::Function { rows, cols, .. } => write!(f, "Function({rows}x{cols})"),
        }
    }
}

/// A scalar function of the state (Hamiltonian or observable).
///
/// Missing derivatives fall back to central finite differences with a
/// per-coordinate step `h_i = s * (1 + |x_i|)`.
#[derive(Clone)]
pub struct ScalarField {
    value: ScalarFn,
    gradient: Option<VectorFn>,
    hessian: Option<MatrixFn>,
    quadratic: Option<DMatrix<f64>>,
}

impl ScalarField {
    pub fn new<F>(value: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self {
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            quadratic: None,
        }
    }

    pub fn with_gradient<G>(mut self, g: G) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_hessian<H>(mut self, h: H) -> Self
    where
        H: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hessian = Some(Arc::new(h));
        self
    }

    /// `x -> 0.5 x^T Q x` with analytic derivatives (Q is symmetrised).
    pub fn quadratic(q: DMatrix<f64>) -> Self {
        let q = (&q + q.transpose()) * 0.5;
        let qv = q.clone();
        let qg = q.clone();
        let qh = q.clone();
        Self {
            value: Arc::new(move |x| 0.5 * x.dot(&(&qv * x))),
            gradient: Some(Arc::new(move |x| &qg * x)),
            hessian: Some(Arc::new(move |_| qh.clone())),
            quadratic: Some(q),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            value: Arc::new(move |_| c),
            gradient: Some(Arc::new(|x| DVector::zeros(x.len()))),
            hessian: Some(Arc::new(|x| DMatrix::zeros(x.len(), x.len()))),
            quadratic: None,
        }
    }

    /// Symmetric matrix `Q` when the function is known to be `0.5 x^T Q x`.
    pub fn quadratic_form(&self) -> Option<&DMatrix<f64>> {
        self.quadratic.as_ref()
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => self.fd_gradient(x),
        }
    }

    pub fn fd_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = fd_step_first();
        let mut xp = x.clone();
        DVector::from_fn(x.len(), |i, _| {
            let h = s * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = (self.value)(&xp);
            xp[i] = x[i] - h;
            let fm = (self.value)(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(h) = &self.hessian {
            return h(x);
        }
        let n = x.len();
        let mut hess = DMatrix::zeros(n, n);
        if let Some(g) = &self.gradient {
            let s = fd_step_first();
            let mut xp = x.clone();
            for j in 0..n {
                let h = s * (1.0 + x[j].abs());
                xp[j] = x[j] + h;
                let gp = g(&xp);
                xp[j] = x[j] - h;
                let gm = g(&xp);
                xp[j] = x[j];
                hess.set_column(j, &((gp - gm) / (2.0 * h)));
            }
        } else {
            let s = fd_step_second();
            let f = &self.value;
            let f0 = f(x);
            let mut xp = x.clone();
            for i in 0..n {
                let hi = s * (1.0 + x[i].abs());
                xp[i] = x[i] + hi;
                let fp = f(&xp);
                xp[i] = x[i] - hi;
                let fm = f(&xp);
                xp[i] = x[i];
                hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
                for j in 0..i {
                    let hj = s * (1.0 + x[j].abs());
                    let mut eval = |si: f64, sj: f64| {
                        xp[i] = x[i] + si * hi;
                        xp[j] = x[j] + sj * hj;
                        let v = f(&xp);
                        xp[i] = x[i];
                        xp[j] = x[j];
                        v
                    };
                    let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
                    hess[(i, j)] = v;
                    hess[(j, i)] = v;
                }
            }
        }
        (&hess + hess.transpose()) * 0.5
    }

    /// Sum of two fields acting on complementary blocks of a product state.
    pub(crate) fn block_sum(a: &ScalarField, n_a: usize, b: &ScalarField, n_b: usize) -> ScalarField {
        let (va, vb) = (a.clone(), b.clone());
        let (ga, gb) = (a.clone(), b.clone());
        let (ha, hb) = (a.clone(), b.clone());
        let quadratic = match (&a.quadratic, &b.quadratic) {
            (Some(qa), Some(qb)) => {
                let mut q = DMatrix::zeros(n_a + n_b, n_a + n_b);
                q.view_mut((0, 0), (n_a, n_a)).copy_from(qa);
                q.view_mut((n_a, n_a), (n_b, n_b)).copy_from(qb);
                Some(q)
            }
            _ => None,
        };
        let split = move |x: &DVector<f64>| (x.rows(0, n_a).into_owned(), x.rows(n_a, n_b).into_owned());
        let sv = split;
        let sg = split;
        let sh = split;
        ScalarField {
            value: Arc::new(move |x| {
                let (xa, xb) = sv(x);
                va.value(&xa) + vb.value(&xb)
            }),
            gradient: if a.has_gradient() && b.has_gradient() {
                Some(Arc::new(move |x| {
                    let (xa, xb) = sg(x);
                    let mut g = DVector::zeros(n_a + n_b);
                    g.rows_mut(0, n_a).copy_from(&ga.gradient(&xa));
                    g.rows_mut(n_a, n_b).copy_from(&gb.gradient(&xb));
                    g
                }))
            } else {
                None
            },
            hessian: if a.has_hessian() && b.has_hessian() {
                Some(Arc::new(move |x| {
                    let (xa, xb) = sh(x);
                    let mut h = DMatrix::zeros(n_a + n_b, n_a + n_b);
                    h.view_mut((0, 0), (n_a, n_a)).copy_from(&ha.hessian(&xa));
                    h.view_mut((n_a, n_a), (n_b, n_b)).copy_from(&hb.hessian(&xb));
                    h
                }))
            } else {
                None
            },
            quadratic,
        }
    }
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("gradient", &self.gradient.is_some())
            .field("hessian", &self.hessian.is_some())
            .field("quadratic", &self.quadratic)
            .finish()
    }
}
