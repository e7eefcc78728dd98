//! Discrete stratifications: Cantor sets of real quadratic maps, charts and
//! plaques, sample grids, tubular neighborhoods, products, and the frontier /
//! coherence checks.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::AmbientSpace;
use crate::num::{real, to_f64, Real};

#[derive(Debug, Error)]
pub enum StrataError {
    #[error("basin seed is not forward invariant: {0}")]
    BasinNotInvariant(String),
    #[error("frame construction degenerate at stratum {stratum}, sample {sample}")]
    FrameDegeneracy { stratum: usize, sample: usize },
}

// ---------------------------------------------------------------------------
// Cantor sets of x -> x^2 + c
// ---------------------------------------------------------------------------

/// Closed interval with a symbolic itinerary over `{-, +}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cylinder<T> {
    pub code: String,
    pub lo: T,
    pub hi: T,
}

/// Depth-`d` cylinder cover of the expanding set of `x -> x^2 + c` on the
/// real line: the points of `[-beta, beta]` whose first `d` iterates avoid
/// the basin seed.
#[derive(Debug, Clone)]
pub struct CantorSet<T> {
    pub c: T,
    pub depth: u32,
    pub beta: T,
    pub alpha: T,
    pub cylinders: Vec<Cylinder<T>>,
    pub basin_seed: Vec<(T, T)>,
    pub basin_period: u32,
    /// Forward-closed points of the set: the backward orbit of `alpha`
    /// truncated at `depth`, plus the fixed endpoints.
    pub kpoints: Vec<T>,
}

fn quad_interval_image<T: Real>(c: T, lo: T, hi: T) -> (T, T) {
    let a2 = lo * lo;
    let b2 = hi * hi;
    let hi_img = if a2 > b2 { a2 } else { b2 } + c;
    let lo_img = if lo <= T::zero() && hi >= T::zero() {
        c
    } else {
        (if a2 < b2 { a2 } else { b2 }) + c
    };
    (lo_img, hi_img)
}

fn inside_seed<T: Real>(seed: &[(T, T)], lo: T, hi: T) -> bool {
    seed.iter().any(|&(a, b)| a < lo && hi < b)
}

/// Removes the open seed intervals from `[lo, hi]`, keeping closed pieces.
fn subtract_seed<T: Real>(seed: &[(T, T)], lo: T, hi: T) -> Vec<(T, T)> {
    let mut pieces = vec![(lo, hi)];
    for &(a, b) in seed {
        let mut next = Vec::new();
        for (l, h) in pieces {
            if b <= l || a >= h {
                next.push((l, h));
                continue;
            }
            if l < a {
                next.push((l, a));
            }
            if b < h {
                next.push((b, h));
            }
        }
        pieces = next;
    }
    pieces.retain(|&(l, h)| h > l);
    pieces
}

/// Builds the depth-`depth` cylinder cover.
///
/// `basin_seed` is a union of open intervals around the attracting cycle and
/// must satisfy `f^k(cl seed) inside seed` for `k = basin_period`; this is
/// verified by interval arithmetic before anything else runs.
pub fn julia_cantor<T: Real>(
    c: T,
    depth: u32,
    basin_seed: &[(T, T)],
    basin_period: u32,
) -> Result<CantorSet<T>, StrataError> {
    let disc = T::one() - real::<T>(4.0) * c;
    assert!(disc > T::zero(), "c must admit real fixed points");
    let beta = (T::one() + disc.sqrt()) / real(2.0);
    let alpha = (T::one() - disc.sqrt()) / real(2.0);

    // f^k(cl seed) must land strictly inside the seed.
    for &(a, b) in basin_seed {
        let (mut lo, mut hi) = (a, b);
        for _ in 0..basin_period {
            let (l, h) = quad_interval_image(c, lo, hi);
            lo = l;
            hi = h;
        }
        if !inside_seed(basin_seed, lo, hi) {
            return Err(StrataError::BasinNotInvariant(format!(
                "f^{}([{:.6}, {:.6}]) = [{:.6}, {:.6}] escapes the seed",
                basin_period,
                to_f64(a),
                to_f64(b),
                to_f64(lo),
                to_f64(hi)
            )));
        }
    }

    let mut cylinders = vec![Cylinder { code: String::new(), lo: -beta, hi: beta }];
    for _ in 0..depth {
        let mut next = Vec::new();
        for side in [false, true] {
            for cyl in &cylinders {
                // inverse branch +-sqrt(y - c), defined on y >= c
                let lo_y = if cyl.lo > c { cyl.lo } else { c };
                if cyl.hi < c {
                    continue;
                }
                let (rlo, rhi) = ((lo_y - c).sqrt(), (cyl.hi - c).sqrt());
                let (blo, bhi) = if side { (rlo, rhi) } else { (-rhi, -rlo) };
                for (l, h) in subtract_seed(basin_seed, blo, bhi) {
                    let mut code = String::with_capacity(cyl.code.len() + 1);
                    code.push(if side { '+' } else { '-' });
                    code.push_str(&cyl.code);
                    next.push(Cylinder { code, lo: l, hi: h });
                }
            }
        }
        next.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap());
        cylinders = next;
    }

    // Backward orbit of the fixed point alpha: a forward-closed sample set
    // inside the expanding set.
    let mut kpoints: Vec<T> = vec![alpha];
    let mut frontier = vec![alpha];
    let in_seed = |x: T| basin_seed.iter().any(|&(a, b)| x > a && x < b);
    for _ in 0..depth {
        let mut next = Vec::new();
        for &y in &frontier {
            if y < c {
                continue;
            }
            let r = (y - c).sqrt();
            for cand in [r, -r] {
                if cand.abs() <= beta && !in_seed(cand) {
                    next.push(cand);
                }
            }
        }
        kpoints.extend(next.iter().copied());
        frontier = next;
    }
    kpoints.push(beta);
    kpoints.push(-beta);
    kpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    kpoints.dedup_by(|a, b| (*a - *b).abs() < real(1e-13));

    Ok(CantorSet { c, depth, beta, alpha, cylinders, basin_seed: basin_seed.to_vec(), basin_period, kpoints })
}

impl<T: Real> CantorSet<T> {
    /// Complementary open intervals of the cover inside `[-beta, beta]`.
    pub fn gaps(&self) -> Vec<(T, T)> {
        let mut gaps = Vec::new();
        let mut prev = -self.beta;
        for cyl in &self.cylinders {
            if cyl.lo > prev {
                gaps.push((prev, cyl.lo));
            }
            prev = cyl.hi;
        }
        if prev < self.beta {
            gaps.push((prev, self.beta));
        }
        gaps
    }

    pub fn total_length(&self) -> T {
        let mut s = T::zero();
        for c in &self.cylinders {
            s += c.hi - c.lo;
        }
        s
    }

    pub fn contains(&self, x: T) -> bool {
        self.cylinders.iter().any(|c| c.lo <= x && x <= c.hi)
    }

    /// Itinerary of the cylinder containing `x`, if any.
    pub fn code_of(&self, x: T) -> Option<&str> {
        self.cylinders
            .iter()
            .find(|c| c.lo <= x && x <= c.hi)
            .map(|c| c.code.as_str())
    }
}

// ---------------------------------------------------------------------------
// Charts, plaques, strata
// ---------------------------------------------------------------------------

/// How leaf coordinates embed into ambient axes.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafShape {
    /// Leaf coordinate `k` lives on ambient axis `axes[k]`.
    AxisAligned { axes: Vec<usize> },
    /// First two leaf coordinates are polar `(r, phi)` on the plane
    /// `(x_axis, y_axis)`; the rest are axis-aligned on `extra`.
    PolarDisk { x_axis: usize, y_axis: usize, extra: Vec<usize> },
}

impl LeafShape {
    pub fn leaf_dim(&self) -> usize {
        match self {
            LeafShape::AxisAligned { axes } => axes.len(),
            LeafShape::PolarDisk { extra, .. } => 2 + extra.len(),
        }
    }
}

/// Uniform sample grid along one leaf coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub nodes: Vec<T>,
    /// `Some(period)` when the coordinate wraps.
    pub periodic: Option<T>,
}

impl<T: Real> Grid<T> {
    pub fn uniform(lo: T, hi: T, n: usize) -> Self {
        assert!(n >= 2);
        let step = (hi - lo) / real((n - 1) as f64);
        Self {
            nodes: (0..n).map(|i| lo + step * real(i as f64)).collect(),
            periodic: None,
        }
    }

    /// Degenerate one-node grid (used by the linear test presets whose only
    /// forward-closed sample is a fixed point).
    pub fn singleton(x: T) -> Self {
        Self { nodes: vec![x], periodic: None }
    }

    /// `n` equispaced nodes on `[0, period)`.
    pub fn periodic(period: T, n: usize) -> Self {
        assert!(n >= 2);
        let step = period / real(n as f64);
        Self {
            nodes: (0..n).map(|i| step * real(i as f64)).collect(),
            periodic: Some(period),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lo(&self) -> T {
        self.nodes[0]
    }

    pub fn hi(&self) -> T {
        match self.periodic {
            Some(p) => self.nodes[0] + p,
            None => *self.nodes.last().unwrap(),
        }
    }

    pub fn step(&self) -> T {
        if self.nodes.len() < 2 {
            return T::zero();
        }
        match self.periodic {
            Some(p) => p / real(self.nodes.len() as f64),
            None => (self.hi() - self.lo()) / real((self.nodes.len() - 1) as f64),
        }
    }

    /// Does `u` lie within the grid's span (with `margin` of slack)?
    pub fn covers(&self, u: T, margin: T) -> bool {
        if self.periodic.is_some() {
            return true;
        }
        u >= self.lo() - margin && u <= self.hi() + margin
    }
}

/// One transversal code of a chart: a label plus fixed transversal values.
#[derive(Debug, Clone, PartialEq)]
pub struct Code<T> {
    pub label: String,
    pub coords: DVector<T>,
}

/// A chart of a lamination: a leaf shape with sample grids, over a finite
/// set of sampled transversal codes. The tube structure reuses the chart at
/// arbitrary transversal values near the codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart<T> {
    pub leaf: LeafShape,
    pub grids: Vec<Grid<T>>,
    pub trans_axes: Vec<usize>,
    pub codes: Vec<Code<T>>,
}

impl<T: Real> Chart<T> {
    pub fn leaf_dim(&self) -> usize {
        self.leaf.leaf_dim()
    }

    /// Ambient point of leaf coordinates `u` over transversal values `trans`.
    pub fn embed(&self, trans: &DVector<T>, u: &[T], ambient_dim: usize) -> DVector<T> {
        let mut x = DVector::zeros(ambient_dim);
        for (k, &axis) in self.trans_axes.iter().enumerate() {
            x[axis] = trans[k];
        }
        match &self.leaf {
            LeafShape::AxisAligned { axes } => {
                for (k, &axis) in axes.iter().enumerate() {
                    x[axis] = u[k];
                }
            }
            LeafShape::PolarDisk { x_axis, y_axis, extra } => {
                let (r, phi) = (u[0], u[1]);
                x[*x_axis] = r * phi.cos();
                x[*y_axis] = r * phi.sin();
                for (k, &axis) in extra.iter().enumerate() {
                    x[axis] = u[2 + k];
                }
            }
        }
        x
    }

    /// Jacobian of [`Chart::embed`] with respect to `u` (ambient_dim x leaf_dim).
    pub fn embed_jacobian(&self, _trans: &DVector<T>, u: &[T], ambient_dim: usize) -> DMatrix<T> {
        let d = self.leaf_dim();
        let mut j = DMatrix::zeros(ambient_dim, d);
        match &self.leaf {
            LeafShape::AxisAligned { axes } => {
                for (k, &axis) in axes.iter().enumerate() {
                    j[(axis, k)] = T::one();
                }
            }
            LeafShape::PolarDisk { x_axis, y_axis, extra } => {
                let (r, phi) = (u[0], u[1]);
                j[(*x_axis, 0)] = phi.cos();
                j[(*y_axis, 0)] = phi.sin();
                j[(*x_axis, 1)] = -r * phi.sin();
                j[(*y_axis, 1)] = r * phi.cos();
                for (k, &axis) in extra.iter().enumerate() {
                    j[(axis, 2 + k)] = T::one();
                }
            }
        }
        j
    }

    /// Leaf coordinates of an ambient point (ignores transversal axes).
    pub fn leaf_coords(&self, x: &DVector<T>) -> Vec<T> {
        match &self.leaf {
            LeafShape::AxisAligned { axes } => axes.iter().map(|&a| x[a]).collect(),
            LeafShape::PolarDisk { x_axis, y_axis, extra } => {
                let (px, py) = (x[*x_axis], x[*y_axis]);
                let r = (px * px + py * py).sqrt();
                let mut phi = py.atan2(px);
                if phi < T::zero() {
                    phi += T::two_pi();
                }
                let mut u = vec![r, phi];
                u.extend(extra.iter().map(|&a| x[a]));
                u
            }
        }
    }

    /// Jacobian of [`Chart::leaf_coords`] with respect to the ambient point
    /// (leaf_dim x ambient_dim).
    pub fn leaf_coords_jacobian(&self, x: &DVector<T>, ambient_dim: usize) -> DMatrix<T> {
        let d = self.leaf_dim();
        let mut j = DMatrix::zeros(d, ambient_dim);
        match &self.leaf {
            LeafShape::AxisAligned { axes } => {
                for (k, &axis) in axes.iter().enumerate() {
                    j[(k, axis)] = T::one();
                }
            }
            LeafShape::PolarDisk { x_axis, y_axis, extra } => {
                let (px, py) = (x[*x_axis], x[*y_axis]);
                let r2 = px * px + py * py;
                let r = r2.sqrt();
                j[(0, *x_axis)] = px / r;
                j[(0, *y_axis)] = py / r;
                j[(1, *x_axis)] = -py / r2;
                j[(1, *y_axis)] = px / r2;
                for (k, &axis) in extra.iter().enumerate() {
                    j[(2 + k, axis)] = T::one();
                }
            }
        }
        j
    }

    /// Transversal coordinates of an ambient point.
    pub fn trans_coords(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.trans_axes.len(), self.trans_axes.iter().map(|&a| x[a]))
    }

    /// Do leaf coordinates lie within the chart's grid footprint?
    pub fn covers_leaf(&self, u: &[T], margin: T) -> bool {
        self.grids.iter().zip(u).all(|(g, &ui)| g.covers(ui, margin))
    }

    /// Index of the code nearest to `trans` with its distance.
    pub fn nearest_code(&self, space: &AmbientSpace<T>, trans: &DVector<T>) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for (i, code) in self.codes.iter().enumerate() {
            let mut d2 = T::zero();
            for (k, &axis) in self.trans_axes.iter().enumerate() {
                let mut diff = trans[k] - code.coords[k];
                if let crate::dynamics::Axis::Circle { period } = &space.axes[axis] {
                    let p = *period;
                    diff = diff - p * (diff / p).floor();
                    if diff > p / real(2.0) {
                        diff -= p;
                    }
                }
                d2 += diff * diff;
            }
            let d = d2.sqrt();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }
}

/// A plaque of a (tube) lamination: a chart at fixed transversal values.
/// `code` is set when the transversal values coincide with a sampled code.
#[derive(Debug, Clone, PartialEq)]
pub struct Plaque<T> {
    pub chart: usize,
    pub trans: DVector<T>,
    pub code: Option<usize>,
}

/// Where a point sits inside a stratum's tube.
#[derive(Debug, Clone)]
pub struct Located<T> {
    pub plaque: Plaque<T>,
    pub leaf_u: Vec<T>,
    /// Distance from the point's transversal values to the nearest sampled
    /// code (0 when the point is on the stratum).
    pub trans_dist: T,
}

/// One stratum: a lamination given by charts; the tube reuses the same
/// charts with transversal values fattened up to `tube_width`.
#[derive(Debug, Clone)]
pub struct Stratum<T> {
    pub id: usize,
    pub dim: usize,
    pub charts: Vec<Chart<T>>,
    pub tube_width: T,
}

/// Sample of the global cloud: a grid point of one plaque of one stratum.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub point: DVector<T>,
    pub stratum: usize,
    pub chart: usize,
    pub code: usize,
    /// Row-major flat index into the chart's leaf grid (0 for 0-dim leaves).
    pub flat: usize,
}

/// The sampled stratification: strata with incidence, plus the global
/// sample cloud enumerating every plaque grid point.
#[derive(Debug, Clone)]
pub struct SampledStratification<T> {
    pub ambient: AmbientSpace<T>,
    pub strata: Vec<Stratum<T>>,
    /// Transitively closed strict incidence pairs `(lower, higher)`.
    pub incidence: Vec<(usize, usize)>,
    pub samples: Vec<Sample<T>>,
    /// Extra closure resolution granted to dim >= 1 strata when checking the
    /// frontier axioms; builders over Cantor covers set it to the widest
    /// cylinder (the sampled gaps undershoot the true ones by that much).
    pub closure_res_hint: T,
    /// `(stratum, chart, code) -> base offset` into `samples`; grid points
    /// of the plaque are contiguous in row-major order.
    plaque_base: Vec<Vec<Vec<usize>>>,
}

impl<T: Real> SampledStratification<T> {
    /// Assembles the cloud from strata descriptions; sample order is
    /// stratum-major, then chart, code, row-major grid — fully deterministic.
    pub fn assemble(ambient: AmbientSpace<T>, strata: Vec<Stratum<T>>, incidence: Vec<(usize, usize)>) -> Self {
        let mut samples = Vec::new();
        let mut plaque_base = Vec::new();
        for (si, st) in strata.iter().enumerate() {
            let mut per_chart = Vec::new();
            for (ci, chart) in st.charts.iter().enumerate() {
                let mut per_code = Vec::new();
                let counts: Vec<usize> = chart.grids.iter().map(|g| g.len()).collect();
                let total: usize = counts.iter().product::<usize>().max(1);
                for (ki, code) in chart.codes.iter().enumerate() {
                    per_code.push(samples.len());
                    for flat in 0..total {
                        let u = unflatten_coords(chart, flat);
                        let point = chart.embed(&code.coords, &u, ambient.dim());
                        samples.push(Sample { point, stratum: si, chart: ci, code: ki, flat });
                    }
                }
                per_chart.push(per_code);
            }
            plaque_base.push(per_chart);
        }
        let incidence = transitive_closure(strata.len(), incidence);
        Self { ambient, strata, incidence, samples, closure_res_hint: T::zero(), plaque_base }
    }

    pub fn dim(&self) -> usize {
        self.ambient.dim()
    }

    /// Strict incidence `i < j` (i in the closure of j).
    pub fn lt(&self, i: usize, j: usize) -> bool {
        self.incidence.contains(&(i, j))
    }

    pub fn leq(&self, i: usize, j: usize) -> bool {
        i == j || self.lt(i, j)
    }

    pub fn comparable(&self, i: usize, j: usize) -> bool {
        self.leq(i, j) || self.leq(j, i)
    }

    /// Global sample id of a plaque grid node.
    pub fn sample_at(&self, stratum: usize, chart: usize, code: usize, flat: usize) -> usize {
        self.plaque_base[stratum][chart][code] + flat
    }

    /// Sample ids of one plaque, in row-major grid order.
    pub fn plaque_samples(&self, stratum: usize, chart: usize, code: usize) -> std::ops::Range<usize> {
        let base = self.plaque_base[stratum][chart][code];
        let total: usize = self.strata[stratum].charts[chart]
            .grids
            .iter()
            .map(|g| g.len())
            .product::<usize>()
            .max(1);
        base..base + total
    }

    /// Locates `x` in the tube of `stratum`: the plaque through `x` (with
    /// `code` set when the transversal values match a sampled code within
    /// `code_tol`), or `None` when `x` is outside the sampled tube zone.
    pub fn tube_locate(&self, stratum: usize, x: &DVector<T>, code_tol: T) -> Option<Located<T>> {
        let st = &self.strata[stratum];
        let mut best: Option<Located<T>> = None;
        for (ci, chart) in st.charts.iter().enumerate() {
            let u = chart.leaf_coords(x);
            let margin = real::<T>(1e-9);
            if !chart.covers_leaf(&u, margin) {
                continue;
            }
            let trans = chart.trans_coords(x);
            let (code_idx, dist) = match chart.nearest_code(&self.ambient, &trans) {
                Some(v) => v,
                None => continue,
            };
            if dist > st.tube_width {
                continue;
            }
            let code = if dist <= code_tol { Some(code_idx) } else { None };
            let loc = Located { plaque: Plaque { chart: ci, trans, code }, leaf_u: u, trans_dist: dist };
            if best.as_ref().map_or(true, |b| loc.trans_dist < b.trans_dist) {
                best = Some(loc);
            }
        }
        best
    }

    /// Like [`SampledStratification::tube_locate`], but without the tube
    /// width bound: any chart whose leaf box covers the point qualifies.
    /// Used to parameterize image plaques of chains that have left the tube.
    pub fn locate_leafbox(&self, stratum: usize, x: &DVector<T>, code_tol: T) -> Option<Located<T>> {
        let st = &self.strata[stratum];
        let mut best: Option<Located<T>> = None;
        for (ci, chart) in st.charts.iter().enumerate() {
            let u = chart.leaf_coords(x);
            if !chart.covers_leaf(&u, real::<T>(1e-9)) {
                continue;
            }
            let trans = chart.trans_coords(x);
            let (code_idx, dist) = match chart.nearest_code(&self.ambient, &trans) {
                Some(v) => v,
                None => {
                    if chart.trans_axes.is_empty() {
                        let loc = Located {
                            plaque: Plaque { chart: ci, trans, code: Some(0) },
                            leaf_u: u,
                            trans_dist: T::zero(),
                        };
                        return Some(loc);
                    }
                    continue;
                }
            };
            let code = if dist <= code_tol { Some(code_idx) } else { None };
            let loc = Located { plaque: Plaque { chart: ci, trans, code }, leaf_u: u, trans_dist: dist };
            if best.as_ref().map_or(true, |b| loc.trans_dist < b.trans_dist) {
                best = Some(loc);
            }
        }
        best
    }

    /// Number of strata.
    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    /// The portion of the sample's plaque within leaf radius `eps`, as a
    /// coordinate window. For 0-dim plaques the window is the point itself.
    pub fn plaque_neighborhood(&self, sample: usize, eps: T) -> PlaqueWindow<T> {
        let s = &self.samples[sample];
        let chart = &self.strata[s.stratum].charts[s.chart];
        let u = unflatten_coords(chart, s.flat);
        if chart.leaf_dim() == 0 {
            return PlaqueWindow { lo: Vec::new(), hi: Vec::new(), saturated: true };
        }
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut saturated = true;
        for (k, g) in chart.grids.iter().enumerate() {
            // leaf metric along polar phi scales with r; compare in embedded
            // lengths via the local metric factor
            let scale = match (&chart.leaf, k) {
                (LeafShape::PolarDisk { .. }, 1) => u[0],
                _ => T::one(),
            };
            let radius = if scale > T::zero() { eps / scale } else { eps };
            let (mut l, mut h) = (u[k] - radius, u[k] + radius);
            if g.periodic.is_none() {
                if l > g.lo() || h < g.hi() {
                    saturated = false;
                }
                l = if l > g.lo() { l } else { g.lo() };
                h = if h < g.hi() { h } else { g.hi() };
            } else if radius * real::<T>(2.0) < g.periodic.unwrap() {
                saturated = false;
            }
            lo.push(l);
            hi.push(h);
        }
        PlaqueWindow { lo, hi, saturated }
    }

    /// Writes the sample cloud as CSV: one row per sample, columns
    /// `stratum_id, plaque_code, leaf_coords..., ambient_coords...` with leaf
    /// columns padded to the maximal leaf dimension.
    pub fn dump_csv(&self) -> String {
        let max_leaf = self.strata.iter().map(|s| s.dim).max().unwrap_or(0);
        let n = self.dim();
        let mut out = String::new();
        out.push_str("stratum_id,plaque_code");
        for k in 0..max_leaf {
            let _ = write!(out, ",leaf_{k}");
        }
        for k in 0..n {
            let _ = write!(out, ",x_{k}");
        }
        out.push('\n');
        for s in &self.samples {
            let chart = &self.strata[s.stratum].charts[s.chart];
            let label = &chart.codes[s.code].label;
            let u = unflatten_coords(chart, s.flat);
            let _ = write!(out, "{},{}", s.stratum, label);
            for k in 0..max_leaf {
                if k < u.len() {
                    let _ = write!(out, ",{:.16e}", to_f64(u[k]));
                } else {
                    out.push(',');
                }
            }
            for k in 0..n {
                let _ = write!(out, ",{:.16e}", to_f64(s.point[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Leaf-coordinate window returned by `plaque_neighborhood`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaqueWindow<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
    pub saturated: bool,
}

/// Leaf coordinates of a flat grid index (row-major).
pub fn unflatten_coords<T: Real>(chart: &Chart<T>, flat: usize) -> Vec<T> {
    let mut u = Vec::with_capacity(chart.grids.len());
    let mut rem = flat;
    for g in chart.grids.iter().rev() {
        u.push(g.nodes[rem % g.len()]);
        rem /= g.len();
    }
    u.reverse();
    u
}

/// Multi-index of a flat grid index.
pub fn unflatten_index<T: Real>(chart: &Chart<T>, flat: usize) -> Vec<usize> {
    let mut ix = Vec::with_capacity(chart.grids.len());
    let mut rem = flat;
    for g in chart.grids.iter().rev() {
        ix.push(rem % g.len());
        rem /= g.len();
    }
    ix.reverse();
    ix
}

pub fn flatten_index<T: Real>(chart: &Chart<T>, ix: &[usize]) -> usize {
    let mut flat = 0;
    for (k, g) in chart.grids.iter().enumerate() {
        flat = flat * g.len() + ix[k];
    }
    flat
}

fn transitive_closure(n: usize, mut pairs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    loop {
        let mut added = false;
        let snapshot = pairs.clone();
        for &(a, b) in &snapshot {
            for &(c, d) in &snapshot {
                if b == c && a != d && !pairs.contains(&(a, d)) {
                    pairs.push((a, d));
                    added = true;
                }
            }
        }
        if !added {
            break;
        }
    }
    pairs.retain(|&(a, b)| a != b && a < n && b < n);
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

fn shift_leaf_shape(shape: &LeafShape, offset: usize) -> LeafShape {
    match shape {
        LeafShape::AxisAligned { axes } => {
            LeafShape::AxisAligned { axes: axes.iter().map(|a| a + offset).collect() }
        }
        LeafShape::PolarDisk { x_axis, y_axis, extra } => LeafShape::PolarDisk {
            x_axis: x_axis + offset,
            y_axis: y_axis + offset,
            extra: extra.iter().map(|a| a + offset).collect(),
        },
    }
}

fn product_leaf_shape(a: &LeafShape, b: &LeafShape, offset: usize) -> LeafShape {
    let b = shift_leaf_shape(b, offset);
    match (a, &b) {
        (LeafShape::AxisAligned { axes: ax }, LeafShape::AxisAligned { axes: bx }) => {
            let mut axes = ax.clone();
            axes.extend(bx);
            LeafShape::AxisAligned { axes }
        }
        (LeafShape::PolarDisk { x_axis, y_axis, extra }, LeafShape::AxisAligned { axes: bx }) => {
            let mut extra = extra.clone();
            extra.extend(bx);
            LeafShape::PolarDisk { x_axis: *x_axis, y_axis: *y_axis, extra }
        }
        (LeafShape::AxisAligned { axes: ax }, LeafShape::PolarDisk { x_axis, y_axis, extra }) => {
            // polar block must lead; only hit when the first factor has a
            // 0-dim leaf
            assert!(ax.is_empty(), "polar factor must come first in a product");
            LeafShape::PolarDisk { x_axis: *x_axis, y_axis: *y_axis, extra: extra.clone() }
        }
        _ => panic!("product of two polar factors is not supported"),
    }
}

/// Product of two sampled stratifications: strata are pairwise products,
/// incidence is the product order, charts and sample grids are products.
pub fn build_product_stratification<T: Real>(
    a: &SampledStratification<T>,
    b: &SampledStratification<T>,
) -> SampledStratification<T> {
    let offset = a.dim();
    let mut axes = a.ambient.axes.clone();
    axes.extend(b.ambient.axes.iter().cloned());
    let ambient = AmbientSpace { axes };

    // order stratum pairs by total dimension, then factor indices
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..a.strata.len() {
        for j in 0..b.strata.len() {
            pairs.push((i, j));
        }
    }
    pairs.sort_by_key(|&(i, j)| (a.strata[i].dim + b.strata[j].dim, i, j));

    let mut strata = Vec::new();
    for (new_id, &(i, j)) in pairs.iter().enumerate() {
        let sa = &a.strata[i];
        let sb = &b.strata[j];
        let mut charts = Vec::new();
        for ca in &sa.charts {
            for cb in &sb.charts {
                let leaf = product_leaf_shape(&ca.leaf, &cb.leaf, offset);
                let mut grids = ca.grids.clone();
                grids.extend(cb.grids.iter().cloned());
                let mut trans_axes = ca.trans_axes.clone();
                trans_axes.extend(cb.trans_axes.iter().map(|t| t + offset));
                let mut codes = Vec::new();
                for ka in &ca.codes {
                    for kb in &cb.codes {
                        let mut coords = ka.coords.iter().copied().collect::<Vec<_>>();
                        coords.extend(kb.coords.iter().copied());
                        let label = if ka.label.is_empty() {
                            kb.label.clone()
                        } else if kb.label.is_empty() {
                            ka.label.clone()
                        } else {
                            format!("{}|{}", ka.label, kb.label)
                        };
                        codes.push(Code { label, coords: DVector::from_vec(coords) });
                    }
                }
                charts.push(Chart { leaf, grids, trans_axes, codes });
            }
        }
        let tube_width = if sa.tube_width < sb.tube_width { sa.tube_width } else { sb.tube_width };
        strata.push(Stratum { id: new_id, dim: sa.dim + sb.dim, charts, tube_width });
    }

    let mut incidence = Vec::new();
    for (pi, &(i, j)) in pairs.iter().enumerate() {
        for (qi, &(k, l)) in pairs.iter().enumerate() {
            if pi != qi && a.leq(i, k) && b.leq(j, l) {
                incidence.push((pi, qi));
            }
        }
    }

    SampledStratification::assemble(ambient, strata, incidence)
}

// ---------------------------------------------------------------------------
// Normal frames
// ---------------------------------------------------------------------------

/// Orthonormal frames per sample: leaf tangent and a normal complement.
#[derive(Debug, Clone)]
pub struct NormalFrameField<T> {
    /// Indexed by global sample id; `leaf[i]` spans the tangent of the
    /// sample's plaque, `normal[i]` its orthogonal complement.
    pub leaf: Vec<Vec<DVector<T>>>,
    pub normal: Vec<Vec<DVector<T>>>,
}

/// Orthonormal (leaf, normal) frames at a leaf point of a chart.
pub fn frames_at<T: Real>(
    chart: &Chart<T>,
    trans: &DVector<T>,
    u: &[T],
    ambient_dim: usize,
) -> Option<(Vec<DVector<T>>, Vec<DVector<T>>)> {
    let jac = chart.embed_jacobian(trans, u, ambient_dim);
    let mut leaf: Vec<DVector<T>> = Vec::new();
    for k in 0..chart.leaf_dim() {
        let mut v: DVector<T> = jac.column(k).into();
        for w in &leaf {
            let dot = v.dot(w);
            v -= w * dot;
        }
        let norm = v.norm();
        if norm < real(1e-12) {
            return None;
        }
        leaf.push(v / norm);
    }
    let mut normal: Vec<DVector<T>> = Vec::new();
    for axis in 0..ambient_dim {
        if leaf.len() + normal.len() == ambient_dim {
            break;
        }
        let mut v: DVector<T> = DVector::zeros(ambient_dim);
        v[axis] = T::one();
        for w in leaf.iter().chain(normal.iter()) {
            let dot = v.dot(w);
            v -= w * dot;
        }
        let norm = v.norm();
        if norm > real(1e-6) {
            normal.push(v / norm);
        }
    }
    if leaf.len() + normal.len() != ambient_dim {
        return None;
    }
    Some((leaf, normal))
}

/// Builds per-sample orthonormal leaf/normal frames for the whole cloud.
pub fn normal_frames<T: Real>(s: &SampledStratification<T>) -> Result<NormalFrameField<T>, StrataError> {
    let n = s.dim();
    let mut leaf = Vec::with_capacity(s.samples.len());
    let mut normal = Vec::with_capacity(s.samples.len());
    for (i, sample) in s.samples.iter().enumerate() {
        let chart = &s.strata[sample.stratum].charts[sample.chart];
        let u = unflatten_coords(chart, sample.flat);
        let trans = chart.codes[sample.code].coords.clone();
        match frames_at(chart, &trans, &u, n) {
            Some((l, nn)) => {
                leaf.push(l);
                normal.push(nn);
            }
            None => return Err(StrataError::FrameDegeneracy { stratum: sample.stratum, sample: i }),
        }
    }
    Ok(NormalFrameField { leaf, normal })
}

// ---------------------------------------------------------------------------
// Frontier / coherence checks
// ---------------------------------------------------------------------------

/// Outcome of the stratification axioms checked at sample resolution.
#[derive(Debug, Clone)]
pub struct CoherenceReport {
    pub frontier_ok: bool,
    pub dim_monotone_ok: bool,
    pub tube_coherent_ok: bool,
    pub violations: Vec<String>,
}

impl CoherenceReport {
    pub fn all_ok(&self) -> bool {
        self.frontier_ok && self.dim_monotone_ok && self.tube_coherent_ok
    }
}

/// Buckets points on a uniform cell grid for near-neighbor queries.
pub struct SpatialHash<T> {
    cell: T,
    map: std::collections::HashMap<[i64; 4], Vec<usize>>,
}

impl<T: Real> SpatialHash<T> {
    pub fn build<'a>(cell: T, points: impl Iterator<Item = (usize, &'a DVector<T>)>) -> Self
    where
        T: 'a,
    {
        let mut map: std::collections::HashMap<[i64; 4], Vec<usize>> = Default::default();
        for (id, p) in points {
            map.entry(Self::key(cell, p)).or_default().push(id);
        }
        Self { cell, map }
    }

    fn key(cell: T, p: &DVector<T>) -> [i64; 4] {
        let mut k = [0i64; 4];
        for i in 0..p.len().min(4) {
            k[i] = to_f64((p[i] / cell).floor()) as i64;
        }
        k
    }

    /// Calls `visit` for every stored point within `radius <= cell` of `p`.
    pub fn for_neighbors(
        &self,
        space: &AmbientSpace<T>,
        points: &[DVector<T>],
        p: &DVector<T>,
        radius: T,
        mut visit: impl FnMut(usize),
    ) {
        let base = Self::key(self.cell, p);
        let dim = p.len().min(4);
        let mut offsets = vec![[0i64; 4]];
        for d in 0..dim {
            let mut next = Vec::new();
            for o in &offsets {
                for s in [-1i64, 0, 1] {
                    let mut o2 = *o;
                    o2[d] += s;
                    next.push(o2);
                }
            }
            offsets = next;
        }
        for o in offsets {
            let mut k = base;
            for (d, od) in o.iter().enumerate().take(dim) {
                k[d] += od;
            }
            if let Some(ids) = self.map.get(&k) {
                for &id in ids {
                    if space.distance(&points[id], p) <= radius {
                        visit(id);
                    }
                }
            }
        }
    }

    /// Is any stored point within `radius <= cell` of `p`?
    pub fn any_within(&self, space: &AmbientSpace<T>, points: &[DVector<T>], p: &DVector<T>, radius: T) -> bool {
        let mut found = false;
        self.for_neighbors(space, points, p, radius, |_| found = true);
        found
    }
}

/// Checks the frontier condition, dimension monotonicity under incidence,
/// and tube coherence, at the resolution of the sample grids. Violations are
/// reported, never thrown.
pub fn check_frontier_and_coherence<T: Real>(s: &SampledStratification<T>) -> CoherenceReport {
    let pts: Vec<DVector<T>> = s.samples.iter().map(|x| x.point.clone()).collect();
    check_cloud_coherence(s, &pts)
}

/// Same checks on a displaced cloud: `points[i]` replaces sample `i`.
pub fn check_cloud_coherence<T: Real>(
    s: &SampledStratification<T>,
    points: &[DVector<T>],
) -> CoherenceReport {
    let mut violations = Vec::new();

    // Embedded grid step of one chart coordinate (polar angles scale with
    // the radius).
    let embedded_step = |chart: &Chart<T>, k: usize| -> T {
        let scale = match (&chart.leaf, k) {
            (LeafShape::PolarDisk { .. }, 1) => chart.grids[0].hi(),
            _ => T::one(),
        };
        chart.grids[k].step() * scale
    };

    // Per-stratum closure resolution: how far the stratum's sample grid can
    // sit from a point of its closure. 0-dim strata are sampled exactly, so
    // their closure reaches nothing beyond the samples themselves.
    let res_of: Vec<T> = s
        .strata
        .iter()
        .map(|st| {
            let mut res = real::<T>(1e-9);
            if st.dim == 0 {
                return res;
            }
            for chart in &st.charts {
                for k in 0..chart.grids.len() {
                    let steps = embedded_step(chart, k) * real(3.0);
                    if steps > res {
                        res = steps;
                    }
                }
            }
            if s.closure_res_hint > res {
                res = s.closure_res_hint;
            }
            res
        })
        .collect();
    let res_cell = res_of.iter().fold(real::<T>(1e-9), |a, &b| if b > a { b } else { a });

    let per_stratum: Vec<Vec<usize>> = (0..s.strata.len())
        .map(|k| (0..s.samples.len()).filter(|&i| s.samples[i].stratum == k).collect())
        .collect();
    let hashes: Vec<SpatialHash<T>> = (0..s.strata.len())
        .map(|k| SpatialHash::build(res_cell, per_stratum[k].iter().map(|&i| (i, &points[i]))))
        .collect();

    // A sample witnesses "cl(X) meets Y" only if it sits deeper than `rho`
    // inside its own plaque; otherwise it may merely share a limit point
    // with X (edges of a square approach the corners without meeting them).
    let interior_at = |j: usize, rho: T| -> bool {
        let smp = &s.samples[j];
        let chart = &s.strata[smp.stratum].charts[smp.chart];
        if chart.leaf_dim() == 0 {
            return true;
        }
        let ix = unflatten_index(chart, smp.flat);
        for (k, g) in chart.grids.iter().enumerate() {
            if g.periodic.is_some() {
                continue;
            }
            let step = embedded_step(chart, k);
            if step <= T::zero() {
                continue;
            }
            let depth = to_f64((rho / step).ceil()) as usize + 1;
            if ix[k] < depth || ix[k] + depth > g.len() - 1 {
                return false;
            }
        }
        true
    };

    // frontier: if cl(X) meets Y then Y must lie inside cl(X), and
    // dim Y <= dim X
    let mut frontier_ok = true;
    let mut dim_monotone_ok = true;
    for x in 0..s.strata.len() {
        let res = res_of[x];
        for y in 0..s.strata.len() {
            if x == y {
                continue;
            }
            let meets = per_stratum[y].iter().any(|&j| {
                interior_at(j, res) && hashes[x].any_within(&s.ambient, points, &points[j], res)
            });
            if !meets {
                continue;
            }
            if s.strata[y].dim > s.strata[x].dim {
                dim_monotone_ok = false;
                violations.push(format!(
                    "closure of stratum {x} (dim {}) meets stratum {y} of larger dim {}",
                    s.strata[x].dim, s.strata[y].dim
                ));
            }
            let stray = per_stratum[y]
                .iter()
                .filter(|&&j| !hashes[x].any_within(&s.ambient, points, &points[j], res))
                .count();
            // tolerate nothing: cl(X) must reach every sampled point of Y
            if stray > 0 {
                frontier_ok = false;
                violations.push(format!(
                    "frontier: cl(stratum {x}) meets stratum {y} but misses {stray} of its samples"
                ));
            }
        }
    }

    // tube coherence: around every sample of a finer stratum lying in a
    // coarser tube, the finer plaque direction stays inside the coarser
    // plaque. On a displaced cloud this degenerates to a proximity test
    // against the displaced coarser plaque.
    let mut tube_coherent_ok = true;
    for &(lo, hi) in &s.incidence {
        if s.strata[lo].dim == 0 {
            continue; // point plaques sit inside everything
        }
        for &i in &per_stratum[lo] {
            let base = &s.samples[i].point;
            let Some(coarse) = s.tube_locate(hi, base, real(1e-9)) else { continue };
            let coarse_chart = &s.strata[hi].charts[coarse.plaque.chart];
            let sample = &s.samples[i];
            let chart = &s.strata[lo].charts[sample.chart];
            let u = unflatten_coords(chart, sample.flat);
            let trans = chart.codes[sample.code].coords.clone();
            for k in 0..chart.leaf_dim() {
                let step = chart.grids[k].step() * real(0.25);
                let mut u2 = u.clone();
                u2[k] += step;
                if !chart.covers_leaf(&u2, T::zero()) {
                    u2[k] -= step * real(2.0);
                }
                let probe = chart.embed(&trans, &u2, s.dim());
                let pu = coarse_chart.leaf_coords(&probe);
                let ptrans = coarse_chart.trans_coords(&probe);
                let drift = s
                    .ambient
                    .displacement(&coarse_chart.embed(&ptrans, &pu, s.dim()), &probe)
                    .norm();
                let same_plaque = {
                    let mut d2 = T::zero();
                    for t in 0..ptrans.len() {
                        let diff = ptrans[t] - coarse.plaque.trans[t];
                        d2 += diff * diff;
                    }
                    d2.sqrt() < real(1e-9)
                };
                if drift > real(1e-9) || !same_plaque || !coarse_chart.covers_leaf(&pu, real(1e-9)) {
                    tube_coherent_ok = false;
                    violations.push(format!(
                        "coherence: plaque of stratum {lo} at sample {i} leaves its stratum-{hi} plaque"
                    ));
                    break;
                }
            }
            // on a displaced cloud: the displaced sample must stay near the
            // displaced coarser plaque it sits in (checked against the
            // nearest grid node of that plaque)
            if let Some(code) = coarse.plaque.code {
                let coarse_chart = &s.strata[hi].charts[coarse.plaque.chart];
                let mut ix = Vec::with_capacity(coarse_chart.grids.len());
                for (k, g) in coarse_chart.grids.iter().enumerate() {
                    let u = coarse.leaf_u[k];
                    let nearest = g
                        .nodes
                        .iter()
                        .enumerate()
                        .min_by(|a, b| {
                            let da = (*a.1 - u).abs();
                            let db = (*b.1 - u).abs();
                            da.partial_cmp(&db).unwrap()
                        })
                        .map(|(idx, _)| idx)
                        .unwrap_or(0);
                    ix.push(nearest);
                }
                let flat = flatten_index(coarse_chart, &ix);
                let j = s.sample_at(hi, coarse.plaque.chart, code, flat);
                if s.ambient.distance(&points[i], &points[j]) > res_of[hi] + res_of[lo] {
                    tube_coherent_ok = false;
                    violations.push(format!(
                        "coherence: displaced sample {i} of stratum {lo} drifted off its stratum-{hi} plaque"
                    ));
                }
            }
        }
    }

    CoherenceReport { frontier_ok, dim_monotone_ok, tube_coherent_ok, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn golden() -> f64 {
        (1.0 + 5.0_f64.sqrt()) / 2.0
    }

    #[test]
    fn cantor_c_minus_one_keeps_fixed_points() {
        let k = julia_cantor(-1.0, 8, &[(-0.5, 0.5)], 2).unwrap();
        let beta = golden();
        assert_abs_diff_eq!(k.beta, beta, epsilon = 1e-14);
        assert!(k.contains(beta));
        assert!(k.contains(-beta));
        for d in [0, 1, 2, 5] {
            let kd = julia_cantor(-1.0, d, &[(-0.5, 0.5)], 2).unwrap();
            assert!(kd.contains(beta), "beta missing at depth {d}");
            assert!(kd.contains(-beta), "-beta missing at depth {d}");
        }
    }

    #[test]
    fn cantor_c_minus_one_excludes_one_at_depth_two() {
        let k1 = julia_cantor(-1.0, 1, &[(-0.5, 0.5)], 2).unwrap();
        assert!(k1.contains(1.0));
        let k2 = julia_cantor(-1.0, 2, &[(-0.5, 0.5)], 2).unwrap();
        assert!(!k2.contains(1.0));
    }

    #[test]
    fn cantor_c_zero_shrinks_to_unit_points() {
        let k = julia_cantor(0.0, 8, &[(-0.5, 0.5)], 1).unwrap();
        assert_eq!(k.cylinders.len(), 2);
        assert!(k.contains(1.0) && k.contains(-1.0));
        for c in &k.cylinders {
            assert!(c.hi - c.lo < 0.01, "cylinder [{}, {}] too wide", c.lo, c.hi);
        }
    }

    #[test]
    fn cantor_bad_basin_rejected() {
        let err = julia_cantor(-1.0, 3, &[(0.9, 1.1)], 1).unwrap_err();
        matches!(err, StrataError::BasinNotInvariant(_));
    }

    #[test]
    fn cantor_lengths_decrease_and_children_nest() {
        let mut prev_len = f64::INFINITY;
        let mut prev: Option<CantorSet<f64>> = None;
        for d in 1..=8 {
            let k = julia_cantor(-1.0, d, &[(-0.5, 0.5)], 2).unwrap();
            let len = k.total_length();
            assert!(len < prev_len, "total length must decrease: {len} vs {prev_len}");
            prev_len = len;
            if let Some(p) = &prev {
                for cyl in &k.cylinders {
                    let parent_code = &cyl.code[..cyl.code.len() - 1];
                    let parent = p
                        .cylinders
                        .iter()
                        .find(|pc| pc.code == parent_code)
                        .unwrap_or_else(|| panic!("no parent for {}", cyl.code));
                    assert!(
                        parent.lo - 1e-12 <= cyl.lo && cyl.hi <= parent.hi + 1e-12,
                        "child {} not inside parent",
                        cyl.code
                    );
                }
            }
            prev = Some(k);
        }
    }

    #[test]
    fn cantor_forward_invariance_at_resolution() {
        let d = 6;
        let k = julia_cantor(-1.0, d, &[(-0.5, 0.5)], 2).unwrap();
        let coarse = julia_cantor(-1.0, d - 1, &[(-0.5, 0.5)], 2).unwrap();
        let width = k
            .cylinders
            .iter()
            .map(|c| c.hi - c.lo)
            .fold(0.0_f64, f64::max);
        for cyl in &k.cylinders {
            for e in [cyl.lo, cyl.hi] {
                let img = e * e - 1.0;
                let dist = coarse
                    .cylinders
                    .iter()
                    .map(|c| if img < c.lo { c.lo - img } else if img > c.hi { img - c.hi } else { 0.0 })
                    .fold(f64::INFINITY, f64::min);
                assert!(dist <= width, "f({e}) = {img} farther than {width} from the coarse cover");
            }
        }
    }

    #[test]
    fn kpoints_are_forward_closed_and_in_cylinders() {
        let k = julia_cantor(-1.0, 8, &[(-0.5, 0.5)], 2).unwrap();
        assert!(k.kpoints.len() >= 10, "got {}", k.kpoints.len());
        for &x in &k.kpoints {
            assert!(k.contains(x), "sample {x} outside the cover");
            let fx = x * x - 1.0;
            let nearest = k
                .kpoints
                .iter()
                .map(|&y: &f64| (y - fx).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-9, "image of {x} not a sample (gap {nearest})");
        }
    }

    // -- chart / product machinery --

    fn interval_factor() -> SampledStratification<f64> {
        // [-1, 1] with endpoint stratum and interior stratum
        let ambient = AmbientSpace::euclidean(1);
        let endpoints = Stratum {
            id: 0,
            dim: 0,
            charts: vec![Chart {
                leaf: LeafShape::AxisAligned { axes: vec![] },
                grids: vec![],
                trans_axes: vec![0],
                codes: vec![
                    Code { label: "-1".into(), coords: DVector::from_vec(vec![-1.0]) },
                    Code { label: "+1".into(), coords: DVector::from_vec(vec![1.0]) },
                ],
            }],
            tube_width: 0.2,
        };
        let interior = Stratum {
            id: 1,
            dim: 1,
            charts: vec![Chart {
                leaf: LeafShape::AxisAligned { axes: vec![0] },
                grids: vec![Grid::uniform(-0.98, 0.98, 50)],
                trans_axes: vec![],
                codes: vec![Code { label: String::new(), coords: DVector::from_vec(vec![]) }],
            }],
            tube_width: 0.2,
        };
        SampledStratification::assemble(ambient, vec![endpoints, interior], vec![(0, 1)])
    }

    #[test]
    fn product_of_intervals_is_square() {
        let a = interval_factor();
        let b = interval_factor();
        let p = build_product_stratification(&a, &b);
        assert_eq!(p.strata.len(), 4);
        let dims: Vec<usize> = p.strata.iter().map(|s| s.dim).collect();
        assert_eq!(dims, vec![0, 1, 1, 2]);
        // corners: 4 codes
        assert_eq!(p.strata[0].charts[0].codes.len(), 4);
        // incidence is the product order
        assert!(p.lt(0, 1) && p.lt(0, 2) && p.lt(0, 3) && p.lt(1, 3) && p.lt(2, 3));
        assert!(!p.comparable(1, 2));
    }

    #[test]
    fn product_with_point_factor_is_isomorphic() {
        let a = interval_factor();
        let point = SampledStratification::assemble(
            AmbientSpace::euclidean(1),
            vec![Stratum {
                id: 0,
                dim: 0,
                charts: vec![Chart {
                    leaf: LeafShape::AxisAligned { axes: vec![] },
                    grids: vec![],
                    trans_axes: vec![0],
                    codes: vec![Code { label: "pt".into(), coords: DVector::from_vec(vec![0.25]) }],
                }],
                tube_width: 0.1,
            }],
            vec![],
        );
        let p = build_product_stratification(&a, &point);
        assert_eq!(p.strata.len(), a.strata.len());
        for (ps, as_) in p.strata.iter().zip(a.strata.iter()) {
            assert_eq!(ps.dim, as_.dim);
        }
        assert_eq!(p.samples.len(), a.samples.len());
        for (i, s) in p.samples.iter().enumerate() {
            assert_eq!(s.point[0], a.samples[i].point[0]);
            assert_eq!(s.point[1], 0.25);
        }
    }

    #[test]
    fn plaque_neighborhood_windows() {
        let s = interval_factor();
        // sample on the 0-dim stratum: the window is the point
        let w = s.plaque_neighborhood(0, 0.3);
        assert!(w.saturated && w.lo.is_empty());
        // interior sample: radius window
        let mid = s
            .samples
            .iter()
            .position(|smp| smp.stratum == 1 && smp.point[0].abs() < 0.021)
            .unwrap();
        let w = s.plaque_neighborhood(mid, 0.1);
        assert!(!w.saturated);
        assert!((w.hi[0] - w.lo[0] - 0.2).abs() < 1e-12);
        // huge radius saturates the whole leaf box
        let w = s.plaque_neighborhood(mid, 5.0);
        assert!(w.saturated);
        assert_abs_diff_eq!(w.lo[0], -0.98);
        assert_abs_diff_eq!(w.hi[0], 0.98);
    }

    #[test]
    fn normal_frames_coordinate_product() {
        let a = interval_factor();
        let b = interval_factor();
        let p = build_product_stratification(&a, &b);
        let frames = normal_frames(&p).unwrap();
        // stratum 1 = interior x endpoints: leaf along e0, normal e1
        let i = p.samples.iter().position(|s| p.strata[s.stratum].dim == 1).unwrap();
        let stratum = p.samples[i].stratum;
        assert_eq!(frames.leaf[i].len(), 1);
        assert_eq!(frames.normal[i].len(), 1);
        let leaf_axis = if stratum == 1 { 1 } else { 0 };
        assert_abs_diff_eq!(frames.leaf[i][0][leaf_axis].abs(), 1.0, epsilon = 1e-12);
        // 0-dim stratum: normal spans everything, containing the finer normals
        let j = p.samples.iter().position(|s| p.strata[s.stratum].dim == 0).unwrap();
        assert_eq!(frames.normal[j].len(), 2);
    }

    #[test]
    fn frames_monotone_under_incidence() {
        let a = interval_factor();
        let b = interval_factor();
        let p = build_product_stratification(&a, &b);
        let frames = normal_frames(&p).unwrap();
        // for every incident pair (lo, hi) and sample of lo lying in the tube
        // of hi, span N_hi(x) must be contained in span N_lo(x)
        for &(lo, hi) in &p.incidence {
            for (i, smp) in p.samples.iter().enumerate() {
                if smp.stratum != lo {
                    continue;
                }
                if p.tube_locate(hi, &smp.point, 1e-9).is_none() {
                    continue;
                }
                // N_hi at the located plaque: compute from the chart
                let loc = p.tube_locate(hi, &smp.point, 1e-9).unwrap();
                let chart = &p.strata[hi].charts[loc.plaque.chart];
                let (_, normal_hi) = frames_at(chart, &loc.plaque.trans, &loc.leaf_u, p.dim()).unwrap();
                for v in &normal_hi {
                    // residual of v against span N_lo
                    let mut r = v.clone();
                    for w in &frames.normal[i] {
                        let d = r.dot(w);
                        r -= w * d;
                    }
                    assert!(r.norm() < 1e-10, "monotonicity violated between {lo} and {hi}");
                }
            }
        }
    }

    #[test]
    fn frontier_check_passes_on_product() {
        let a = interval_factor();
        let b = interval_factor();
        let p = build_product_stratification(&a, &b);
        let rep = check_frontier_and_coherence(&p);
        assert!(rep.all_ok(), "violations: {:?}", rep.violations);
    }

    #[test]
    fn frontier_check_fails_on_crossing_segments() {
        // two open segments crossing at the origin: the closure of each meets
        // the other but does not contain it
        let ambient = AmbientSpace::euclidean(2);
        let horizontal = Stratum {
            id: 0,
            dim: 1,
            charts: vec![Chart {
                leaf: LeafShape::AxisAligned { axes: vec![0] },
                grids: vec![Grid::uniform(-1.0, 1.0, 41)],
                trans_axes: vec![1],
                codes: vec![Code { label: "h".into(), coords: DVector::from_vec(vec![0.0]) }],
            }],
            tube_width: 0.1,
        };
        let vertical = Stratum {
            id: 1,
            dim: 1,
            charts: vec![Chart {
                leaf: LeafShape::AxisAligned { axes: vec![1] },
                grids: vec![Grid::uniform(-1.0, 1.0, 41)],
                trans_axes: vec![0],
                codes: vec![Code { label: "v".into(), coords: DVector::from_vec(vec![0.0]) }],
            }],
            tube_width: 0.1,
        };
        let s = SampledStratification::assemble(ambient, vec![horizontal, vertical], vec![]);
        let rep = check_frontier_and_coherence(&s);
        assert!(!rep.frontier_ok);
    }

    #[test]
    fn tube_locate_fattened() {
        let s = interval_factor();
        // a point near an endpoint locates in the endpoint tube with the
        // offset as transversal distance
        let x = DVector::from_vec(vec![0.93]);
        let loc = s.tube_locate(0, &x, 1e-9).unwrap();
        assert!(loc.plaque.code.is_none());
        assert_abs_diff_eq!(loc.trans_dist, 0.07, epsilon = 1e-12);
        // on the code itself
        let x = DVector::from_vec(vec![1.0]);
        let loc = s.tube_locate(0, &x, 1e-9).unwrap();
        assert_eq!(loc.plaque.code, Some(1));
        // far away: outside the tube zone
        let x = DVector::from_vec(vec![0.5]);
        assert!(s.tube_locate(0, &x, 1e-9).is_none());
    }

    #[test]
    fn polar_chart_roundtrip() {
        let chart = Chart {
            leaf: LeafShape::PolarDisk { x_axis: 0, y_axis: 1, extra: vec![] },
            grids: vec![
                Grid::uniform(0.05, 0.95, 10),
                Grid::periodic(std::f64::consts::TAU, 16),
            ],
            trans_axes: vec![2],
            codes: vec![Code { label: "lo".into(), coords: DVector::from_vec(vec![-1.0]) }],
        };
        let trans = DVector::from_vec(vec![-1.0]);
        let u = vec![0.5, 1.2];
        let x = chart.embed(&trans, &u, 3);
        assert_abs_diff_eq!(x[0], 0.5 * 1.2_f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.5 * 1.2_f64.sin(), epsilon = 1e-15);
        assert_eq!(x[2], -1.0);
        let back = chart.leaf_coords(&x);
        assert_abs_diff_eq!(back[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(back[1], 1.2, epsilon = 1e-14);
        // jacobian columns: radial unit, tangential of length r
        let j = chart.embed_jacobian(&trans, &u, 3);
        let r_col = j.column(0).norm();
        let phi_col = j.column(1).norm();
        assert_abs_diff_eq!(r_col, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(phi_col, 0.5, epsilon = 1e-14);
    }
}
