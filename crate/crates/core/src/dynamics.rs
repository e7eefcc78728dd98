//! Endomorphisms of Euclidean / flat-torus ambient spaces: exact values,
//! differentials, low-order jets, and smooth perturbation families.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::num::{bump, bump_d1, bump_d2, real, Real};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DynamicsError {
    #[error("jet order {0} is not supported (only 1 and 2)")]
    UnsupportedOrder(u32),
}

/// One coordinate axis of the ambient space.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis<T> {
    Line,
    /// Wraps modulo `period`.
    Circle { period: T },
}

/// A flat product of lines and circles.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientSpace<T> {
    pub axes: Vec<Axis<T>>,
}

impl<T: Real> AmbientSpace<T> {
    pub fn euclidean(dim: usize) -> Self {
        Self { axes: vec![Axis::Line; dim] }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Wraps circle coordinates into `[0, period)`.
    pub fn wrap(&self, x: &DVector<T>) -> DVector<T> {
        let mut y = x.clone();
        for (i, axis) in self.axes.iter().enumerate() {
            if let Axis::Circle { period } = axis {
                let p = *period;
                let mut v = y[i] - p * (y[i] / p).floor();
                if v >= p {
                    v -= p;
                }
                if v < T::zero() {
                    v += p;
                }
                y[i] = v;
            }
        }
        y
    }

    /// Shortest displacement from `from` to `to`, wrapping circle axes into
    /// `(-period/2, period/2]`.
    pub fn displacement(&self, from: &DVector<T>, to: &DVector<T>) -> DVector<T> {
        let mut d = to - from;
        let half = real::<T>(0.5);
        for (i, axis) in self.axes.iter().enumerate() {
            if let Axis::Circle { period } = axis {
                let p = *period;
                let mut v = d[i] - p * (d[i] / p).floor();
                if v > p * half {
                    v -= p;
                }
                d[i] = v;
            }
        }
        d
    }

    pub fn distance(&self, a: &DVector<T>, b: &DVector<T>) -> T {
        self.displacement(a, b).norm()
    }

    /// Translation `x + v` with circle wrap.
    pub fn translate(&self, x: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        self.wrap(&(x + v))
    }
}

/// Real polynomial in one variable, coefficients in ascending degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly<T> {
    pub coeffs: Vec<T>,
}

impl<T: Real> Poly<T> {
    pub fn new(coeffs: Vec<T>) -> Self {
        Self { coeffs }
    }

    /// `x^2 + c`
    pub fn quadratic(c: T) -> Self {
        Self::new(vec![c, T::zero(), T::one()])
    }

    pub fn eval(&self, x: T) -> T {
        let mut acc = T::zero();
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn d1(&self, x: T) -> T {
        let mut acc = T::zero();
        for (k, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * x + c * real::<T>(k as f64);
        }
        acc
    }

    pub fn d2(&self, x: T) -> T {
        let mut acc = T::zero();
        for (k, &c) in self.coeffs.iter().enumerate().skip(2).rev() {
            acc = acc * x + c * real::<T>((k * (k - 1)) as f64);
        }
        acc
    }
}

/// Spatial profile of a perturbation term.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile<T> {
    /// Product of 1-D bumps `bump((x_i - center_i)/radius_i)`, sup 1,
    /// supported in the stated box.
    BumpBox { center: DVector<T>, radius: DVector<T> },
    /// `cos(freq * x_axis)`; used for the skew presets.
    Cosine { axis: usize, freq: T },
    /// `sin(freq * x_axis)`.
    Sine { axis: usize, freq: T },
    /// Identically one.
    One,
}

impl<T: Real> Profile<T> {
    fn value(&self, x: &DVector<T>) -> T {
        match self {
            Profile::BumpBox { center, radius } => {
                let mut v = T::one();
                for i in 0..center.len() {
                    v *= bump((x[i] - center[i]) / radius[i]);
                }
                v
            }
            Profile::Cosine { axis, freq } => (*freq * x[*axis]).cos(),
            Profile::Sine { axis, freq } => (*freq * x[*axis]).sin(),
            Profile::One => T::one(),
        }
    }

    fn gradient(&self, x: &DVector<T>) -> DVector<T> {
        let n = x.len();
        let mut g = DVector::zeros(n);
        match self {
            Profile::BumpBox { center, radius } => {
                for i in 0..n {
                    let mut v = T::one();
                    for j in 0..n {
                        let s = (x[j] - center[j]) / radius[j];
                        v *= if j == i { bump_d1(s) / radius[j] } else { bump(s) };
                    }
                    g[i] = v;
                }
            }
            Profile::Cosine { axis, freq } => g[*axis] = -*freq * (*freq * x[*axis]).sin(),
            Profile::Sine { axis, freq } => g[*axis] = *freq * (*freq * x[*axis]).cos(),
            Profile::One => {}
        }
        g
    }

    /// Hessian, as a symmetric matrix.
    fn hessian(&self, x: &DVector<T>) -> DMatrix<T> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        match self {
            Profile::BumpBox { center, radius } => {
                for i in 0..n {
                    for j in i..n {
                        let mut v = T::one();
                        for k in 0..n {
                            let s = (x[k] - center[k]) / radius[k];
                            let r = radius[k];
                            v *= if k == i && k == j {
                                bump_d2(s) / (r * r)
                            } else if k == i || k == j {
                                bump_d1(s) / r
                            } else {
                                bump(s)
                            };
                        }
                        h[(i, j)] = v;
                        h[(j, i)] = v;
                    }
                }
            }
            Profile::Cosine { axis, freq } => {
                h[(*axis, *axis)] = -*freq * *freq * (*freq * x[*axis]).cos()
            }
            Profile::Sine { axis, freq } => {
                h[(*axis, *axis)] = -*freq * *freq * (*freq * x[*axis]).sin()
            }
            Profile::One => {}
        }
        h
    }
}

/// Additive perturbation `x -> x + t * profile(x) * direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec<T> {
    pub magnitude: T,
    pub profile: Profile<T>,
    /// Unit vector in the ambient space.
    pub direction: DVector<T>,
}

impl<T: Real> PerturbationSpec<T> {
    pub fn bump_box(magnitude: T, center: DVector<T>, radius: DVector<T>, direction: DVector<T>) -> Self {
        Self { magnitude, profile: Profile::BumpBox { center, radius }, direction }
    }

    fn value(&self, x: &DVector<T>) -> DVector<T> {
        &self.direction * (self.magnitude * self.profile.value(x))
    }

    fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        // d/dx [t rho(x) d] = t * d * grad rho(x)^T
        let g = self.profile.gradient(x);
        let n = x.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.magnitude * self.direction[i] * g[j];
            }
        }
        m
    }
}

/// The map families the crate works with.
#[derive(Debug, Clone, PartialEq)]
pub enum MapKind<T> {
    /// Coordinate product `(x_i) -> (p_i(x_i))`.
    PolyProduct(Vec<Poly<T>>),
    /// Diagonal linear map; on circle axes this is `theta -> k theta mod period`.
    Diagonal(Vec<T>),
    /// `(x, y, h) -> (Re z^p, Im z^p, h^2 + c)` with `z = x + iy`.
    ComplexPowerQuadratic { power: u32, c: T },
    /// `(x, y, z) -> (x + x^3 - t rho(x) x, 2y, 2z)` with `rho` a bump on `(-1,1)`.
    CubicShear { t: T },
}

/// A concrete endomorphism: ambient space, base map, additive perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct EndomorphismSpec<T> {
    pub ambient: AmbientSpace<T>,
    pub kind: MapKind<T>,
    pub perturbations: Vec<PerturbationSpec<T>>,
}

/// Polynomial jet of order 1 or 2: `f(x+u) = value + d1 u + (u^T d2_i u)_i + O(u^3)`.
///
/// `d2[i]` stores the Taylor coefficient `(1/2) D^2 f_i`, a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet<T> {
    pub order: u32,
    pub value: DVector<T>,
    pub d1: DMatrix<T>,
    pub d2: Option<Vec<DMatrix<T>>>,
}

impl<T: Real> EndomorphismSpec<T> {
    pub fn new(ambient: AmbientSpace<T>, kind: MapKind<T>) -> Self {
        Self { ambient, kind, perturbations: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.ambient.dim()
    }

    /// `f' = f + t rho direction`; stacking perturbations is allowed.
    pub fn perturbed(&self, p: PerturbationSpec<T>) -> Self {
        let mut out = self.clone();
        out.perturbations.push(p);
        out
    }

    fn base_eval(&self, x: &DVector<T>) -> DVector<T> {
        match &self.kind {
            MapKind::PolyProduct(polys) => {
                DVector::from_iterator(polys.len(), polys.iter().enumerate().map(|(i, p)| p.eval(x[i])))
            }
            MapKind::Diagonal(rates) => {
                DVector::from_iterator(rates.len(), rates.iter().enumerate().map(|(i, &r)| r * x[i]))
            }
            MapKind::ComplexPowerQuadratic { power, c } => {
                let (mut a, mut b) = (x[0], x[1]);
                for _ in 1..*power {
                    let (na, nb) = (a * x[0] - b * x[1], a * x[1] + b * x[0]);
                    a = na;
                    b = nb;
                }
                DVector::from_vec(vec![a, b, x[2] * x[2] + *c])
            }
            MapKind::CubicShear { t } => {
                let u = x[0];
                DVector::from_vec(vec![
                    u + u * u * u - *t * bump(u) * u,
                    real::<T>(2.0) * x[1],
                    real::<T>(2.0) * x[2],
                ])
            }
        }
    }

    fn base_jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        match &self.kind {
            MapKind::PolyProduct(polys) => {
                for (i, p) in polys.iter().enumerate() {
                    m[(i, i)] = p.d1(x[i]);
                }
            }
            MapKind::Diagonal(rates) => {
                for (i, &r) in rates.iter().enumerate() {
                    m[(i, i)] = r;
                }
            }
            MapKind::ComplexPowerQuadratic { power, c: _ } => {
                // d(z^p) = p z^(p-1) as a complex multiplication block.
                let p = *power;
                let (mut a, mut b) = (T::one(), T::zero());
                for _ in 1..p {
                    let (na, nb) = (a * x[0] - b * x[1], a * x[1] + b * x[0]);
                    a = na;
                    b = nb;
                }
                let k = real::<T>(p as f64);
                m[(0, 0)] = k * a;
                m[(0, 1)] = -k * b;
                m[(1, 0)] = k * b;
                m[(1, 1)] = k * a;
                m[(2, 2)] = real::<T>(2.0) * x[2];
            }
            MapKind::CubicShear { t } => {
                let u = x[0];
                m[(0, 0)] = T::one() + real::<T>(3.0) * u * u - *t * (bump_d1(u) * u + bump(u));
                m[(1, 1)] = real::<T>(2.0);
                m[(2, 2)] = real::<T>(2.0);
            }
        }
        m
    }

    /// Taylor coefficients `(1/2) D^2 f_i` of the base map.
    fn base_half_hessians(&self, x: &DVector<T>) -> Vec<DMatrix<T>> {
        let n = self.dim();
        let half = real::<T>(0.5);
        let mut out = vec![DMatrix::zeros(n, n); n];
        match &self.kind {
            MapKind::PolyProduct(polys) => {
                for (i, p) in polys.iter().enumerate() {
                    out[i][(i, i)] = half * p.d2(x[i]);
                }
            }
            MapKind::Diagonal(_) => {}
            MapKind::ComplexPowerQuadratic { power, c: _ } => {
                // (1/2) D^2 (z^p) [u, u] = (1/2) p (p-1) z^(p-2) (u o u),
                // with o the complex product of plane vectors.
                let p = *power;
                let (mut a, mut b) = (T::one(), T::zero());
                for _ in 2..p {
                    let (na, nb) = (a * x[0] - b * x[1], a * x[1] + b * x[0]);
                    a = na;
                    b = nb;
                }
                let k = half * real::<T>((p * (p - 1)) as f64);
                // u o u = (ux^2 - uy^2, 2 ux uy); real part k(a(ux^2-uy^2) - 2b ux uy)
                out[0][(0, 0)] = k * a;
                out[0][(1, 1)] = -k * a;
                out[0][(0, 1)] = -k * b;
                out[0][(1, 0)] = -k * b;
                out[1][(0, 0)] = k * b;
                out[1][(1, 1)] = -k * b;
                out[1][(0, 1)] = k * a;
                out[1][(1, 0)] = k * a;
                out[2][(2, 2)] = T::one(); // (1/2) * 2
            }
            MapKind::CubicShear { t } => {
                let u = x[0];
                let d2 = real::<T>(6.0) * u - *t * (bump_d2(u) * u + real::<T>(2.0) * bump_d1(u));
                out[0][(0, 0)] = half * d2;
            }
        }
        out
    }

    /// Exact image, with circle wrap.
    pub fn eval(&self, x: &DVector<T>) -> DVector<T> {
        let mut y = self.base_eval(x);
        for p in &self.perturbations {
            y += p.value(x);
        }
        self.ambient.wrap(&y)
    }

    /// Exact Jacobian.
    pub fn differential(&self, x: &DVector<T>) -> DMatrix<T> {
        let mut m = self.base_jacobian(x);
        for p in &self.perturbations {
            m += p.jacobian(x);
        }
        m
    }

    /// Exact polynomial jet at `x` of order 1 or 2.
    pub fn jet(&self, x: &DVector<T>, order: u32) -> Result<Jet<T>, DynamicsError> {
        if order == 0 || order > 2 {
            return Err(DynamicsError::UnsupportedOrder(order));
        }
        let value = self.eval(x);
        let d1 = self.differential(x);
        let d2 = if order == 2 {
            let mut hs = self.base_half_hessians(x);
            let half = real::<T>(0.5);
            for p in &self.perturbations {
                let ph = p.profile.hessian(x);
                for i in 0..self.dim() {
                    // (1/2) * t * dir_i * Hess(rho)
                    let scale = half * p.magnitude * p.direction[i];
                    hs[i] += &ph * scale;
                }
            }
            Some(hs)
        } else {
            None
        };
        Ok(Jet { order, value, d1, d2 })
    }

    /// Max abs entry-wise gap between the analytic Jacobian and central
    /// differences at step `h`.
    pub fn fd_consistency(&self, x: &DVector<T>, h: T) -> T {
        let n = self.dim();
        let analytic = self.differential(x);
        let mut worst = T::zero();
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = self.eval(&xp);
            let fm = self.eval(&xm);
            let col = self.ambient.displacement(&fm, &fp) / (real::<T>(2.0) * h);
            for i in 0..n {
                let gap = (col[i] - analytic[(i, j)]).abs();
                if gap > worst {
                    worst = gap;
                }
            }
        }
        worst
    }
}
