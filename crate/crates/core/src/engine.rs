//! The persistence engine: filtration of the sample cloud, the graph
//! transform and its fixed-point iteration per stratum, gluing across
//! strata, and extraction of the pullback dynamics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::EndomorphismSpec;
use crate::expansion::stratum_frames_at;
use crate::num::{real, smooth_step, to_f64, Real};
use crate::strata::{
    flatten_index, unflatten_coords, Chart, NormalFrameField, SampledStratification, SpatialHash,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("Newton diverged at sample {sample} (residual {residual:.3e} after {steps} steps)")]
    NewtonDiverged { sample: usize, steps: usize, residual: f64 },
    #[error("fiber cap exceeded at sample {sample}: |s| = {norm:.3e} > eta' = {cap:.3e} (t_max hint {t_max_hint:.3e})")]
    FiberCapExceeded { sample: usize, norm: f64, cap: f64, t_max_hint: f64 },
    #[error("singular Jacobian in the fiber solve at sample {0}")]
    SingularJacobian(usize),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("filtration failed: {0}")]
    FiltrationFailed(String),
    #[error("strata are not indexed compatibly with incidence")]
    StrataOrderViolation,
    #[error("gluing retraction failed at sample {0}")]
    RetractionFailed(usize),
    #[error("frames unavailable at sample {0}")]
    FramesUnavailable(usize),
}

// ---------------------------------------------------------------------------
// interpolation
// ---------------------------------------------------------------------------

fn cr_weights<T: Real>(t: T) -> ([T; 4], [T; 4]) {
    let half = real::<T>(0.5);
    let (t2, t3) = (t * t, t * t * t);
    let w = [
        half * (-t + real::<T>(2.0) * t2 - t3),
        half * (real::<T>(2.0) - real::<T>(5.0) * t2 + real::<T>(3.0) * t3),
        half * (t + real::<T>(4.0) * t2 - real::<T>(3.0) * t3),
        half * (-t2 + t3),
    ];
    let dw = [
        half * (-T::one() + real::<T>(4.0) * t - real::<T>(3.0) * t2),
        half * (-real::<T>(10.0) * t + real::<T>(9.0) * t2),
        half * (T::one() + real::<T>(8.0) * t - real::<T>(9.0) * t2),
        half * (-real::<T>(2.0) * t + real::<T>(3.0) * t2),
    ];
    (w, dw)
}

/// Catmull-Rom tensor interpolation of vector values on a chart's leaf grid.
/// Returns the value and its derivative per leaf coordinate.
pub fn interpolate_grid<T: Real>(
    chart: &Chart<T>,
    values: &dyn Fn(usize) -> DVector<T>,
    u: &[T],
    ambient_dim: usize,
) -> (DVector<T>, Vec<DVector<T>>) {
    let dims = chart.grids.len();
    if dims == 0 {
        return (values(0), Vec::new());
    }
    // per axis: base segment index and local parameter
    let mut seg = Vec::with_capacity(dims);
    let mut loc = Vec::with_capacity(dims);
    for (k, g) in chart.grids.iter().enumerate() {
        let n = g.len();
        if n == 1 {
            seg.push(0isize);
            loc.push(T::zero());
            continue;
        }
        let step = g.step();
        let rel = (u[k] - g.nodes[0]) / step;
        let mut base = rel.floor();
        let mut t = rel - base;
        if g.periodic.is_none() {
            // clamp into the grid span
            if base < T::zero() {
                base = T::zero();
                t = rel;
            }
            let max_base = real::<T>((n - 2) as f64);
            if base > max_base {
                t = rel - max_base;
                base = max_base;
            }
        }
        seg.push(to_f64(base) as isize);
        loc.push(t);
    }
    let clamp_index = |g: &crate::strata::Grid<T>, i: isize| -> usize {
        let n = g.len() as isize;
        if g.periodic.is_some() {
            (((i % n) + n) % n) as usize
        } else {
            i.clamp(0, n - 1) as usize
        }
    };

    // recursive tensor evaluation
    fn eval<T: Real>(
        chart: &Chart<T>,
        values: &dyn Fn(usize) -> DVector<T>,
        seg: &[isize],
        loc: &[T],
        clamp_index: &dyn Fn(&crate::strata::Grid<T>, isize) -> usize,
        axis: usize,
        prefix: &mut Vec<usize>,
        ambient_dim: usize,
    ) -> (DVector<T>, Vec<DVector<T>>) {
        let dims = chart.grids.len();
        if axis == dims {
            let flat = flatten_index(chart, prefix);
            return (values(flat), vec![DVector::zeros(ambient_dim); dims]);
        }
        let g = &chart.grids[axis];
        let (w, dw) = cr_weights(loc[axis]);
        let mut value = DVector::zeros(ambient_dim);
        let mut grads = vec![DVector::zeros(ambient_dim); dims];
        if g.len() == 1 {
            prefix.push(0);
            let (v, gr) = eval(chart, values, seg, loc, clamp_index, axis + 1, prefix, ambient_dim);
            prefix.pop();
            return (v, gr);
        }
        let step = g.step();
        for (si, off) in (-1isize..=2).enumerate() {
            let idx = clamp_index(g, seg[axis] + off);
            prefix.push(idx);
            let (v, gr) = eval(chart, values, seg, loc, clamp_index, axis + 1, prefix, ambient_dim);
            prefix.pop();
            value += &v * w[si];
            grads[axis] += &v * (dw[si] / step);
            for (a, gva) in gr.into_iter().enumerate() {
                if a != axis {
                    grads[a] += gva * w[si];
                }
            }
        }
        (value, grads)
    }

    let mut prefix = Vec::with_capacity(dims);
    eval(chart, values, &seg, &loc, &clamp_index, 0, &mut prefix, ambient_dim)
}

// ---------------------------------------------------------------------------
// field / filtration / trace types
// ---------------------------------------------------------------------------

/// The discretized embedding: one ambient displacement per global sample,
/// each lying in the normal span of its ring's tube at the sample.
#[derive(Debug, Clone)]
pub struct EmbeddingField<T> {
    pub disp: Vec<DVector<T>>,
}

impl<T: Real> EmbeddingField<T> {
    pub fn zero(s: &SampledStratification<T>) -> Self {
        Self { disp: vec![DVector::zeros(s.dim()); s.samples.len()] }
    }

    /// Displaced position of sample `i`.
    pub fn point(&self, s: &SampledStratification<T>, i: usize) -> DVector<T> {
        s.ambient.translate(&s.samples[i].point, &self.disp[i])
    }

    pub fn sup_norm(&self) -> T {
        let mut m = T::zero();
        for d in &self.disp {
            let n = d.norm();
            if n > m {
                m = n;
            }
        }
        m
    }
}

/// Nested forward-invariant masks over the sample cloud and the per-sample
/// ring partition they induce.
#[derive(Debug, Clone)]
pub struct Filtration {
    /// `ring[i]` = largest p with sample i in K_p.
    pub ring: Vec<usize>,
    /// Distance margin from the image of K_p to its complement, per stratum.
    pub margins: Vec<f64>,
    /// Worst transversality conditioning on each ring (Li'.3 analogue).
    pub transversality: Vec<f64>,
}

impl Filtration {
    pub fn ring_members(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        self.ring.iter().enumerate().filter(move |(_, &r)| r == p).map(|(i, _)| i)
    }
}

/// Per-iteration convergence data of one ring.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTrace {
    pub stratum: usize,
    pub sup_updates: Vec<f64>,
    pub ratios: Vec<f64>,
    pub residual: f64,
    pub lambda_measured: f64,
    pub iterations: usize,
}

/// Where a sample's image lands: the target plaque and the leaf coordinate
/// of the pullback, plus the commutation residual measured there.
#[derive(Debug, Clone)]
pub struct PullbackEntry<T> {
    pub stratum: usize,
    pub chart: usize,
    pub trans: DVector<T>,
    pub leaf_u: Vec<T>,
    pub residual: T,
    pub leaf_dist: T,
}

#[derive(Debug, Clone)]
pub struct PullbackField<T> {
    pub entries: Vec<Option<PullbackEntry<T>>>,
}

/// Outcome of a persistence run.
pub struct PersistOutcome<T> {
    pub field: EmbeddingField<T>,
    pub pullback: PullbackField<T>,
    pub traces: Vec<ConvergenceTrace>,
    pub filtration: Filtration,
    pub residual_max: f64,
    pub displacement_sup: f64,
    pub eta_prime: f64,
}

// ---------------------------------------------------------------------------
// filtration construction
// ---------------------------------------------------------------------------

struct CloudIndex<T> {
    hash: SpatialHash<T>,
    points: Vec<DVector<T>>,
    cell: T,
}

impl<T: Real> CloudIndex<T> {
    fn build(s: &SampledStratification<T>) -> Self {
        let points: Vec<DVector<T>> = s.samples.iter().map(|x| x.point.clone()).collect();
        let mut cell = real::<T>(1e-3);
        for st in &s.strata {
            for chart in &st.charts {
                for g in &chart.grids {
                    let step = g.step() * real(2.0);
                    if step > cell {
                        cell = step;
                    }
                }
            }
            if st.tube_width * real(0.5) > cell {
                cell = st.tube_width * real(0.5);
            }
        }
        let hash = SpatialHash::build(cell, points.iter().enumerate().map(|(i, p)| (i, p)));
        Self { hash, points, cell }
    }

    fn nearest(&self, space: &crate::dynamics::AmbientSpace<T>, p: &DVector<T>) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        self.hash.for_neighbors(space, &self.points, p, self.cell, |id| {
            let d = space.distance(&self.points[id], p);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((id, d));
            }
        });
        best
    }

    fn neighbors(&self, space: &crate::dynamics::AmbientSpace<T>, p: &DVector<T>, radius: T, visit: impl FnMut(usize)) {
        self.hash.for_neighbors(space, &self.points, p, radius.min(self.cell), visit);
    }
}

/// Local adjacency radius at a sample: 1.6 of the largest grid step among
/// its stratum's charts (or the tube width fraction for 0-dim strata).
fn adjacency_radius<T: Real>(s: &SampledStratification<T>, i: usize) -> T {
    let st = &s.strata[s.samples[i].stratum];
    let mut r = st.tube_width * real(0.2);
    for chart in &st.charts {
        for g in &chart.grids {
            let v = g.step() * real(1.6);
            if v > r {
                r = v;
            }
        }
    }
    r
}

/// Builds the nested masks by the pullback procedure: around each stratum in
/// incidence order, intersect finitely many preimages of a seed
/// neighborhood, then unite preimages of a nested family to force strict
/// forward invariance of the complements.
pub fn build_filtration<T: Real>(
    s: &SampledStratification<T>,
    f: &EndomorphismSpec<T>,
) -> Result<Filtration, EngineError> {
    let n_strata = s.strata.len();
    for &(lo, hi) in &s.incidence {
        if lo >= hi {
            return Err(EngineError::StrataOrderViolation);
        }
    }
    let count = s.samples.len();
    let index = CloudIndex::build(s);

    // sample-level image map
    let fwd: Vec<Option<usize>> = (0..count)
        .map(|i| {
            let img = s.ambient.wrap(&f.eval(&s.samples[i].point));
            index.nearest(&s.ambient, &img).map(|(j, _)| j)
        })
        .collect();
    let pre: Vec<Vec<u32>> = {
        let mut pre = vec![Vec::new(); count];
        for (i, j) in fwd.iter().enumerate() {
            if let Some(j) = j {
                pre[*j].push(i as u32);
            }
        }
        pre
    };

    let preimage = |mask: &[bool]| -> Vec<bool> {
        (0..count).map(|i| fwd[i].map_or(false, |j| mask[j])).collect()
    };

    // s_zone grows around strata 0..p; ring = complement structure
    let mut s_zone = vec![false; count];
    let mut ring = vec![0usize; count];
    for p in 0..n_strata {
        // seed: tube zone of stratum p union the current zone
        let tube_mask: Vec<bool> = (0..count)
            .map(|i| {
                s_zone[i]
                    || s
                        .tube_locate(p, &s.samples[i].point, real(1e-9))
                        .map_or(false, |loc| loc.trans_dist <= s.strata[p].tube_width)
            })
            .collect();
        let v0: Vec<bool> = (0..count)
            .map(|i| {
                s_zone[i]
                    || (tube_mask[i]
                        && s
                            .tube_locate(p, &s.samples[i].point, real(1e-9))
                            .map_or(false, |loc| loc.trans_dist <= s.strata[p].tube_width * real(0.5)))
            })
            .collect();

        // V1 = intersection of preimages of V0 until it stabilizes inside V0
        let mut v1 = v0.clone();
        let mut inter = v0.clone();
        let mut stable = false;
        for _ in 0..256 {
            inter = preimage(&inter);
            let mut next: Vec<bool> = (0..count).map(|i| v1[i] && inter[i]).collect();
            if next == v1 {
                stable = true;
                break;
            }
            std::mem::swap(&mut v1, &mut next);
        }
        if !stable {
            return Err(EngineError::FiltrationFailed(format!(
                "no M <= 256 stabilizes the seed intersection at stratum {p}"
            )));
        }

        // force strict forward invariance of the complement: while the image
        // of a sample outside the zone has 2-layer neighbors inside it, pull
        // the sample in
        let mut zone: Vec<bool> = (0..count).map(|i| s_zone[i] || v1[i]).collect();
        let mut rounds = 0usize;
        loop {
            let mut grew = false;
            let mut additions: Vec<usize> = Vec::new();
            for i in 0..count {
                if zone[i] {
                    continue;
                }
                let Some(j) = fwd[i] else { continue };
                // the image and its surroundings must stay outside the zone
                let radius = adjacency_radius(s, j) * real(2.0);
                let mut bad = zone[j];
                if !bad {
                    index.neighbors(&s.ambient, &s.samples[j].point, radius, |k| {
                        if zone[k] && s.ambient.distance(&s.samples[k].point, &s.samples[j].point) <= radius {
                            bad = true;
                        }
                    });
                }
                if bad {
                    additions.push(i);
                }
            }
            for i in additions {
                // only pull in samples ON strata <= p or in the current tube;
                // anything else stays for a later ring
                if s.samples[i].stratum <= p || tube_mask[i] {
                    zone[i] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
            rounds += 1;
            if rounds > 256 {
                return Err(EngineError::FiltrationFailed(format!(
                    "invariance closure did not stabilize at stratum {p}"
                )));
            }
        }
        // the preimage-closure must not have eaten other strata's cores: the
        // zone grows only as far as backward orbits demand
        let _ = &pre;

        // new ring assignment: samples picked up at this step keep ring p
        for i in 0..count {
            if zone[i] && !s_zone[i] {
                ring[i] = p;
            }
        }
        s_zone = zone;
    }
    // anything never captured belongs to the top ring
    for i in 0..count {
        if !s_zone[i] {
            ring[i] = n_strata - 1;
        }
    }

    // margins and transversality per ring
    let mut margins = vec![f64::INFINITY; n_strata];
    let mut transversality = vec![f64::INFINITY; n_strata];
    for p in 0..n_strata {
        // K_p = rings >= p; image must stay strictly inside
        for i in 0..count {
            if ring[i] < p {
                continue;
            }
            let Some(j) = fwd[i] else { continue };
            if ring[j] < p {
                return Err(EngineError::FiltrationFailed(format!(
                    "mask K_{p} is not forward invariant at sample {i}"
                )));
            }
            // distance from the image to the nearest outside sample
            let mut nearest_out = f64::INFINITY;
            index.neighbors(&s.ambient, &s.samples[j].point, index.cell, |k| {
                if ring[k] < p {
                    let d = to_f64(s.ambient.distance(&s.samples[k].point, &s.samples[j].point));
                    if d < nearest_out {
                        nearest_out = d;
                    }
                }
            });
            if nearest_out < margins[p] {
                margins[p] = nearest_out;
            }
        }
        // Li'.3: normal directions keep projecting onto the image normals
        for i in 0..count {
            if ring[i] != p || s.samples[i].stratum != p {
                continue;
            }
            let x = &s.samples[i].point;
            let img = s.ambient.wrap(&f.eval(x));
            let (Some((_, nx)), Some((_, ny))) =
                (stratum_frames_at(s, p, x), stratum_frames_at(s, p, &img))
            else {
                continue;
            };
            if nx.is_empty() {
                continue;
            }
            let d1 = f.differential(x);
            let mut m = DMatrix::zeros(ny.len(), nx.len());
            for (c, v) in nx.iter().enumerate() {
                let w = &d1 * v;
                for (r, u) in ny.iter().enumerate() {
                    m[(r, c)] = u.dot(&w);
                }
            }
            let sv = m.singular_values();
            let smin = to_f64(sv.min());
            if smin < transversality[p] {
                transversality[p] = smin;
            }
        }
    }

    Ok(Filtration { ring, margins, transversality })
}

// ---------------------------------------------------------------------------
// the engine
// ---------------------------------------------------------------------------

/// Everything a persistence run needs to solve one fiber intersection.
pub struct Engine<'a, T: Real> {
    pub s: &'a SampledStratification<T>,
    pub frames: &'a NormalFrameField<T>,
    /// Unperturbed dynamics (defines the pullback targets).
    pub f: &'a EndomorphismSpec<T>,
    /// Perturbed dynamics being continued.
    pub fp: &'a EndomorphismSpec<T>,
    pub tol: T,
    /// Fiber cap per stratum.
    pub eta_prime: Vec<T>,
    pub filtration: Filtration,
    index: CloudIndex<T>,
}

/// Result of one graph-transform solve.
struct StepResult<T> {
    /// New displacement (ambient vector, in the fiber span).
    disp: DVector<T>,
    entry: PullbackEntry<T>,
}

/// The embedded image plaque a fiber solve intersects: always parameterized
/// by the leaf coordinates of a level-p plaque, with the field values read
/// either from that plaque's own samples, through a finished coarser tube,
/// or from a chain-solved local grid.
enum Target<'a, T: Real> {
    /// Sampled level-p plaque.
    Stored { stratum: usize, chart: usize, code: usize, trans: DVector<T>, field: &'a [DVector<T>] },
    /// Unsampled level-p plaque read through a finished tube `via`.
    Composed {
        stratum: usize,
        chart: usize,
        trans: DVector<T>,
        via_stratum: usize,
        via_chart: usize,
        via_code: usize,
        field: &'a [DVector<T>],
    },
    /// Unsampled level-p plaque solved recursively on its own grid.
    Local { stratum: usize, chart: usize, trans: DVector<T>, values: Vec<DVector<T>> },
}

impl<'a, T: Real> Target<'a, T> {
    fn stratum(&self) -> usize {
        match self {
            Target::Stored { stratum, .. }
            | Target::Composed { stratum, .. }
            | Target::Local { stratum, .. } => *stratum,
        }
    }

    fn chart_idx(&self) -> usize {
        match self {
            Target::Stored { chart, .. }
            | Target::Composed { chart, .. }
            | Target::Local { chart, .. } => *chart,
        }
    }

    fn trans(&self) -> &DVector<T> {
        match self {
            Target::Stored { trans, .. }
            | Target::Composed { trans, .. }
            | Target::Local { trans, .. } => trans,
        }
    }

    fn chart_of<'b>(&self, s: &'b SampledStratification<T>) -> &'b Chart<T> {
        &s.strata[self.stratum()].charts[self.chart_idx()]
    }

    /// Leaf coordinates (in the parameterizing plaque) of an ambient point.
    fn leaf_coords(&self, s: &SampledStratification<T>, x: &DVector<T>) -> Vec<T> {
        self.chart_of(s).leaf_coords(x)
    }

    /// Embedded point of the displaced plaque at leaf coordinates `u`, with
    /// its derivative per coordinate.
    fn eval(&self, s: &SampledStratification<T>, u: &[T]) -> (DVector<T>, Vec<DVector<T>>) {
        let n = s.dim();
        let chart = self.chart_of(s);
        let base = chart.embed(self.trans(), u, n);
        let jac = chart.embed_jacobian(self.trans(), u, n);
        match self {
            Target::Stored { stratum, chart: c, code, field, .. } => {
                let getter = |flat: usize| field[s.sample_at(*stratum, *c, *code, flat)].clone();
                let (dval, dgrad) = interpolate_grid(chart, &getter, u, n);
                let z = s.ambient.translate(&base, &dval);
                let mut dz = Vec::with_capacity(chart.grids.len());
                for k in 0..chart.grids.len() {
                    let col: DVector<T> = jac.column(k).into();
                    dz.push(col + dgrad[k].clone());
                }
                (z, dz)
            }
            Target::Local { values, .. } => {
                let getter = |flat: usize| values[flat].clone();
                let (dval, dgrad) = interpolate_grid(chart, &getter, u, n);
                let z = s.ambient.translate(&base, &dval);
                let mut dz = Vec::with_capacity(chart.grids.len());
                for k in 0..chart.grids.len() {
                    let col: DVector<T> = jac.column(k).into();
                    dz.push(col + dgrad[k].clone());
                }
                (z, dz)
            }
            Target::Composed { via_stratum, via_chart, via_code, field, .. } => {
                let via = &s.strata[*via_stratum].charts[*via_chart];
                let uv = via.leaf_coords(&base);
                let getter = |flat: usize| field[s.sample_at(*via_stratum, *via_chart, *via_code, flat)].clone();
                let (dval, dgrad_v) = interpolate_grid(via, &getter, &uv, n);
                let z = s.ambient.translate(&base, &dval);
                // chain rule: d(disp)/du = d(disp)/du_v * J(u_v <- x) * d(base)/du
                let jv = via.leaf_coords_jacobian(&base, n);
                let mut dz = Vec::with_capacity(chart.grids.len());
                for k in 0..chart.grids.len() {
                    let dbase: DVector<T> = jac.column(k).into();
                    let duv = &jv * &dbase;
                    let mut acc = dbase.clone();
                    for (vk, g) in dgrad_v.iter().enumerate() {
                        acc += g * duv[vk];
                    }
                    dz.push(acc);
                }
                (z, dz)
            }
        }
    }
}

impl<'a, T: Real> Engine<'a, T> {
    /// Fiber solve at a point: find `v = x + N s` with `fp(v)` on the
    /// embedded target plaque, returning the displacement and pullback.
    #[allow(clippy::too_many_arguments)]
    fn fiber_solve(
        &self,
        sample_hint: usize,
        x: &DVector<T>,
        normal: &[DVector<T>],
        target: &Target<T>,
        u0: &[T],
        s_init: &DVector<T>,
        eta_cap: T,
    ) -> Result<StepResult<T>, EngineError> {
        let n = self.s.dim();
        let q = normal.len();
        let d = u0.len();
        let mut svec = s_init.clone();
        let mut u = u0.to_vec();

        let mut last_residual = real::<T>(f64::INFINITY);
        for step in 0..=50 {
            let mut v = x.clone();
            for (k, nv) in normal.iter().enumerate() {
                v += nv * svec[k];
            }
            let v = self.s.ambient.wrap(&v);
            let fv = self.s.ambient.wrap(&self.fp.eval(&v));
            let (embedded, dz) = target.eval(self.s, &u);
            let resid = self.s.ambient.displacement(&embedded, &fv);
            let rnorm = resid.norm();
            last_residual = rnorm;
            if rnorm < self.tol {
                let snorm = svec.norm();
                if snorm > eta_cap {
                    return Err(EngineError::FiberCapExceeded {
                        sample: sample_hint,
                        norm: to_f64(snorm),
                        cap: to_f64(eta_cap),
                        t_max_hint: to_f64(eta_cap / snorm.max(real(1e-300))),
                    });
                }
                let mut disp = DVector::zeros(n);
                for (k, nv) in normal.iter().enumerate() {
                    disp += nv * svec[k];
                }
                let entry = PullbackEntry {
                    stratum: target.stratum(),
                    chart: target.chart_idx(),
                    trans: target.trans().clone(),
                    leaf_u: u.clone(),
                    residual: rnorm,
                    leaf_dist: {
                        let mut acc = T::zero();
                        for (k, &uk) in u.iter().enumerate() {
                            let dd = uk - u0[k];
                            acc += dd * dd;
                        }
                        acc.sqrt()
                    },
                };
                return Ok(StepResult { disp, entry });
            }
            if step == 50 {
                break;
            }
            // Newton on (s, u): residual = fp(x + N s) - z(u)
            let dfp = self.fp.differential(&v);
            let mut jac = DMatrix::zeros(n, q + d);
            for (k, nv) in normal.iter().enumerate() {
                let col = &dfp * nv;
                jac.set_column(k, &col);
            }
            for k in 0..d {
                let col = &dz[k] * -T::one();
                jac.set_column(q + k, &col);
            }
            let lu = jac.lu();
            let Some(delta) = lu.solve(&(-&resid)) else {
                if q == 1 && d == 0 {
                    if let Some(sv) = self.bisect_fiber(x, &normal[0], target, eta_cap) {
                        svec[0] = sv;
                        continue;
                    }
                }
                return Err(EngineError::SingularJacobian(sample_hint));
            };
            for k in 0..q {
                svec[k] += delta[k];
            }
            for k in 0..d {
                u[k] += delta[q + k];
            }
            let snorm = svec.norm();
            let hard_cap = eta_cap * real(4.0);
            if snorm > hard_cap {
                return Err(EngineError::FiberCapExceeded {
                    sample: sample_hint,
                    norm: to_f64(snorm),
                    cap: to_f64(eta_cap),
                    t_max_hint: to_f64(eta_cap / snorm),
                });
            }
        }
        Err(EngineError::NewtonDiverged { sample: sample_hint, steps: 50, residual: to_f64(last_residual) })
    }

    fn bisect_fiber(
        &self,
        x: &DVector<T>,
        normal: &DVector<T>,
        target: &Target<T>,
        eta_cap: T,
    ) -> Option<T> {
        let (embedded, _) = target.eval(self.s, &[]);
        let g = |sv: T| -> T {
            let v = self.s.ambient.translate(x, &(normal * sv));
            let fv = self.s.ambient.wrap(&self.fp.eval(&v));
            self.s.ambient.displacement(&embedded, &fv).dot(normal)
        };
        let cap = eta_cap * real(2.0);
        let (lo, hi) = (-cap, cap);
        let (glo, ghi) = (g(lo), g(hi));
        if glo * ghi > T::zero() {
            return None;
        }
        let (mut lo, mut hi) = if glo < T::zero() { (lo, hi) } else { (hi, lo) };
        for _ in 0..200 {
            let mid = (lo + hi) * real(0.5);
            if g(mid) < T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some((lo + hi) * real(0.5))
    }

    /// Where the image of a ring-p point reads the embedding: the level-p
    /// plaque through the image, backed by stored samples, a finished
    /// coarser tube, or a recursive chain solve.
    fn resolve_target<'b>(
        &'b self,
        p: usize,
        img: &DVector<T>,
        field: &'b [DVector<T>],
        depth: usize,
    ) -> Result<Target<'b, T>, EngineError> {
        if depth > 512 {
            return Err(EngineError::NoConvergence(depth));
        }
        let loc = self
            .s
            .locate_leafbox(p, img, real(1e-9))
            .ok_or(EngineError::NoConvergence(depth))?;
        if let Some(code) = loc.plaque.code {
            return Ok(Target::Stored {
                stratum: p,
                chart: loc.plaque.chart,
                code,
                trans: loc.plaque.trans,
                field,
            });
        }
        // frozen coarser territory?
        let level = self.level_of(img).unwrap_or(p);
        if level > p {
            if let Some(via) = self.s.locate_leafbox(level, img, real(1e-9)) {
                if let Some(code) = via.plaque.code {
                    return Ok(Target::Composed {
                        stratum: p,
                        chart: loc.plaque.chart,
                        trans: loc.plaque.trans,
                        via_stratum: level,
                        via_chart: via.plaque.chart,
                        via_code: code,
                        field,
                    });
                }
            }
        }
        // still level-p territory: continue the chain
        let values = self.solve_plaque(p, loc.plaque.chart, &loc.plaque.trans, field, depth + 1)?;
        Ok(Target::Local { stratum: p, chart: loc.plaque.chart, trans: loc.plaque.trans, values })
    }

    /// One graph-transform step at a sample of ring `p`.
    pub fn transform_at(
        &self,
        p: usize,
        sample: usize,
        field: &[DVector<T>],
    ) -> Result<StepOutcome<T>, EngineError> {
        let x = &self.s.samples[sample].point;
        let loc = self
            .s
            .tube_locate(p, x, real(1e-9))
            .ok_or(EngineError::FramesUnavailable(sample))?;
        let chart = &self.s.strata[p].charts[loc.plaque.chart];
        let (_, normal) = crate::strata::frames_at(chart, &loc.plaque.trans, &loc.leaf_u, self.s.dim())
            .ok_or(EngineError::FramesUnavailable(sample))?;
        let img = self.s.ambient.wrap(&self.f.eval(x));
        let target = self.resolve_target(p, &img, field, 0)?;
        let u0 = target.leaf_coords(self.s, &img);
        let q = normal.len();
        let mut s_init = DVector::zeros(q);
        for (k, nv) in normal.iter().enumerate() {
            s_init[k] = nv.dot(&field[sample]);
        }
        let res = self.fiber_solve(sample, x, &normal, &target, &u0, &s_init, self.eta_prime[p])?;
        Ok(StepOutcome { disp: res.disp, entry: res.entry })
    }
}

/// Public result of one graph-transform step.
pub struct StepOutcome<T> {
    pub disp: DVector<T>,
    pub entry: PullbackEntry<T>,
}

/// One graph-transform step at a sample: solves `fp(x + N s)` onto the
/// embedded image plaque of the unperturbed pullback, returning the new
/// displaced point and the pullback entry.
pub fn graph_transform_step<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    fp: &EndomorphismSpec<T>,
    stratum: usize,
    sample: usize,
    field: &EmbeddingField<T>,
    eta_prime: Option<T>,
    tol: T,
) -> Result<(DVector<T>, PullbackEntry<T>), EngineError> {
    let engine = Engine::new(s, frames, f, fp, eta_prime, tol)?;
    let out = engine.transform_at(stratum, sample, &field.disp)?;
    let v = s.ambient.translate(&s.samples[sample].point, &out.disp);
    Ok((v, out.entry))
}

impl<'a, T: Real> Engine<'a, T> {
    /// Measured contraction bound of a ring: sup leaf rate over inf normal
    /// rate of the unperturbed dynamics at its on-stratum samples.
    fn lambda_measured(&self, p: usize) -> f64 {
        let mut sup_leaf = 1.0_f64;
        let mut inf_normal = f64::INFINITY;
        for i in 0..self.s.samples.len() {
            if self.filtration.ring[i] != p || self.s.samples[i].stratum != p {
                continue;
            }
            let x = &self.s.samples[i].point;
            let img = self.s.ambient.wrap(&self.f.eval(x));
            let (Some((lx, nx)), Some((ly, ny))) =
                (stratum_frames_at(self.s, p, x), stratum_frames_at(self.s, p, &img))
            else {
                continue;
            };
            let d1 = self.f.differential(x);
            if !lx.is_empty() {
                let mut m = DMatrix::zeros(ly.len(), lx.len());
                for (c, v) in lx.iter().enumerate() {
                    let w = &d1 * v;
                    for (r, u) in ly.iter().enumerate() {
                        m[(r, c)] = u.dot(&w);
                    }
                }
                let smax = to_f64(m.singular_values().max());
                if smax > sup_leaf {
                    sup_leaf = smax;
                }
            }
            if !nx.is_empty() {
                let mut m = DMatrix::zeros(ny.len(), nx.len());
                for (c, v) in nx.iter().enumerate() {
                    let w = &d1 * v;
                    for (r, u) in ny.iter().enumerate() {
                        m[(r, c)] = u.dot(&w);
                    }
                }
                let smin = to_f64(m.singular_values().min());
                if smin < inf_normal {
                    inf_normal = smin;
                }
            }
        }
        if inf_normal.is_finite() && inf_normal > 0.0 {
            sup_leaf / inf_normal
        } else {
            0.5
        }
    }

    /// Fixed-point iteration of the graph transform over the on-stratum
    /// samples of ring `p`, with all other samples frozen.
    pub fn iterate_ring(
        &self,
        p: usize,
        field: &mut Vec<DVector<T>>,
    ) -> Result<ConvergenceTrace, EngineError> {
        let members: Vec<usize> = (0..self.s.samples.len())
            .filter(|&i| self.filtration.ring[i] == p && self.s.samples[i].stratum == p)
            .collect();
        let lambda = self.lambda_measured(p);
        let max_iters = if lambda < 1.0 && lambda > 0.0 {
            let est = 10.0 * (1.0 / to_f64(self.tol)).ln() / (1.0 / lambda).ln();
            (est.ceil() as usize).clamp(4, 5000)
        } else {
            2000
        };

        let mut sup_updates = Vec::new();
        #[allow(unused_assignments)]
        let mut residual = 0.0_f64;
        let mut iterations = 0usize;
        for _ in 0..max_iters {
            iterations += 1;
            let mut next: Vec<(usize, DVector<T>)> = Vec::with_capacity(members.len());
            let mut sup = T::zero();
            let mut res_max = 0.0_f64;
            for &i in &members {
                let out = self.transform_at(p, i, field)?;
                let delta = (&out.disp - &field[i]).norm();
                if delta > sup {
                    sup = delta;
                }
                if to_f64(out.entry.residual) > res_max {
                    res_max = to_f64(out.entry.residual);
                }
                next.push((i, out.disp));
            }
            for (i, d) in next {
                field[i] = d;
            }
            sup_updates.push(to_f64(sup));
            residual = res_max;
            if sup < self.tol {
                let ratios = ratios_of(&sup_updates);
                return Ok(ConvergenceTrace {
                    stratum: p,
                    sup_updates,
                    ratios,
                    residual,
                    lambda_measured: lambda,
                    iterations,
                });
            }
        }
        Err(EngineError::NoConvergence(iterations))
    }

    /// Chain evaluation of the field on an unsampled plaque of ring `p`:
    /// one fiber solve per grid node, reading the next plaque recursively
    /// until the chain exits into finished territory.
    fn solve_plaque(
        &self,
        p: usize,
        chart_idx: usize,
        trans: &DVector<T>,
        field: &Vec<DVector<T>>,
        depth: usize,
    ) -> Result<Vec<DVector<T>>, EngineError> {
        if depth > 512 {
            return Err(EngineError::NoConvergence(depth));
        }
        let chart = &self.s.strata[p].charts[chart_idx];
        let n = self.s.dim();
        let total: usize = chart.grids.iter().map(|g| g.len()).product::<usize>().max(1);
        let mut out = Vec::with_capacity(total);
        // the whole plaque maps into one target plaque; resolve it once
        let rep = chart.embed(trans, &unflatten_coords(chart, 0), n);
        let target = self.resolve_target(p, &rep, field, depth)?;
        for flat in 0..total {
            let u = unflatten_coords(chart, flat);
            let x = chart.embed(trans, &u, n);
            let (_, normal) = crate::strata::frames_at(chart, trans, &u, n)
                .ok_or(EngineError::FramesUnavailable(usize::MAX))?;
            let img = self.s.ambient.wrap(&self.f.eval(&x));
            let (ttrans, tu) = match &target {
                ResolvedTarget::Field(tf, ttrans) => {
                    let c = tf.chart_of(self.s);
                    (ttrans.clone(), c.leaf_coords(&img))
                }
            };
            let ResolvedTarget::Field(tf, _) = &target;
            let res = self.fiber_solve(
                usize::MAX,
                &x,
                &normal,
                tf,
                &ttrans,
                &tu,
                &DVector::zeros(normal.len()),
                self.eta_prime[p],
            )?;
            out.push(res.disp);
        }
        Ok(out)
    }

    /// Resolves where the image of a ring-p point reads its field values:
    /// a stored plaque when available, otherwise a recursively solved one.
    fn resolve_target<'b>(
        &'b self,
        p: usize,
        x: &DVector<T>,
        field: &'b Vec<DVector<T>>,
        depth: usize,
    ) -> Result<ResolvedTarget<'b, T>, EngineError> {
        let img = self.s.ambient.wrap(&self.f.eval(x));
        let level = self.level_of(&img).unwrap_or(p);
        // frozen higher-level plaque with a complete stencil
        if level > p {
            if let Some(loc) = self.s.tube_locate(level, &img, real(1e-9)) {
                if let Some(code) = loc.plaque.code {
                    return Ok(ResolvedTarget::Field(
                        TargetField::Stored { stratum: level, chart: loc.plaque.chart, code, field },
                        loc.plaque.trans.clone(),
                    ));
                }
            }
        }
        // level-p plaque: stored when sampled, otherwise recurse
        if let Some(loc) = self.s.tube_locate(p, &img, real(1e-9)) {
            if let Some(code) = loc.plaque.code {
                return Ok(ResolvedTarget::Field(
                    TargetField::Stored { stratum: p, chart: loc.plaque.chart, code, field },
                    loc.plaque.trans.clone(),
                ));
            }
            let values = self.solve_plaque(p, loc.plaque.chart, &loc.plaque.trans, field, depth + 1)?;
            return Ok(ResolvedTarget::Field(
                TargetField::Local { stratum: p, chart: loc.plaque.chart, values },
                loc.plaque.trans.clone(),
            ));
        }
        // try any higher tube even without a clean level classification
        for q in (0..self.s.strata.len()).rev() {
            if q <= p {
                continue;
            }
            if let Some(loc) = self.s.tube_locate(q, &img, real(1e-9)) {
                if let Some(code) = loc.plaque.code {
                    return Ok(ResolvedTarget::Field(
                        TargetField::Stored { stratum: q, chart: loc.plaque.chart, code, field },
                        loc.plaque.trans.clone(),
                    ));
                }
            }
        }
        Err(EngineError::NoConvergence(depth))
    }

    /// Values at off-stratum ring members after the on-stratum field has
    /// converged: grouped per plaque, solved by chains.
    fn solve_off_stratum(
        &self,
        p: usize,
        field: &mut Vec<DVector<T>>,
        pullback: &mut Vec<Option<PullbackEntry<T>>>,
    ) -> Result<(), EngineError> {
        // group off-stratum members by their (chart, trans) plaque
        let mut groups: BTreeMap<(usize, Vec<u64>), Vec<usize>> = BTreeMap::new();
        for i in 0..self.s.samples.len() {
            if self.filtration.ring[i] != p || self.s.samples[i].stratum == p {
                continue;
            }
            let Some(loc) = self.s.tube_locate(p, &self.s.samples[i].point, real(1e-9)) else {
                continue;
            };
            let key: Vec<u64> = (0..loc.plaque.trans.len())
                .map(|k| to_f64(loc.plaque.trans[k]).to_bits())
                .collect();
            groups.entry((loc.plaque.chart, key)).or_default().push(i);
        }
        for ((chart_idx, key), members) in groups {
            let trans = DVector::from_iterator(key.len(), key.iter().map(|b| real::<T>(f64::from_bits(*b))));
            let chart = &self.s.strata[p].charts[chart_idx];
            let solved = self.solve_plaque(p, chart_idx, &trans, field, 0)?;
            for i in members {
                let u = chart.leaf_coords(&self.s.samples[i].point);
                // read the solved displacement at the member's own node
                let getter = |flat: usize| solved[flat].clone();
                let (d, _) = interpolate_grid(chart, &getter, &u, self.s.dim());
                field[i] = d;
                // the chain solve records no pullback; the extraction pass
                // recomputes it where the target plaque is sampled
                pullback[i] = None;
            }
        }
        Ok(())
    }

    /// Straight-line gluing inside the fiber, retracted onto the embedded
    /// incident plaques with the ramp `t`.
    pub fn glue_blend(
        &self,
        p: usize,
        sample: usize,
        y: &DVector<T>,
        t: T,
        field: &Vec<DVector<T>>,
    ) -> Result<DVector<T>, EngineError> {
        let x = &self.s.samples[sample].point;
        let base = self.s.ambient.translate(x, &field[sample]);
        let ramp = smooth_step(t);
        // straight segment toward y
        let seg = self.s.ambient.displacement(&base, y);
        let mut z = self.s.ambient.translate(&base, &(&seg * ramp));
        let Some((_, normal_p)) = stratum_frames_at(self.s, p, x) else {
            return Err(EngineError::FramesUnavailable(sample));
        };
        // project progressively into the p-fiber through x
        let rel = self.s.ambient.displacement(x, &z);
        let mut fiber_part: DVector<T> = DVector::zeros(self.s.dim());
        for nv in &normal_p {
            fiber_part += nv * nv.dot(&rel);
        }
        let rest = &rel - &fiber_part;
        z = self.s.ambient.translate(x, &(&fiber_part + &rest * (T::one() - ramp)));

        // retract onto each incident embedded plaque
        let own = self.s.samples[sample].stratum;
        for j in 0..self.s.strata.len() {
            if j <= p || !(j == own || self.s.lt(j, own)) {
                continue;
            }
            let Some(loc) = self.s.tube_locate(j, x, real(1e-9)) else { continue };
            let Some(code) = loc.plaque.code else { continue };
            let chart = &self.s.strata[j].charts[loc.plaque.chart];
            if chart.leaf_dim() == 0 {
                continue;
            }
            let target = TargetField::Stored { stratum: j, chart: loc.plaque.chart, code, field };
            // intersection of the embedded plaque with the plane through z
            // spanned by the j-fiber
            let (_, normal_j) = crate::strata::frames_at(chart, &loc.plaque.trans, &loc.leaf_u, self.s.dim())
                .ok_or(EngineError::FramesUnavailable(sample))?;
            let mut u = chart.leaf_coords(&z);
            // clamp into the grid span
            for (k, g) in chart.grids.iter().enumerate() {
                if g.periodic.is_none() {
                    u[k] = u[k].clamp(g.lo(), g.hi());
                }
            }
            let mut ok = false;
            for _ in 0..50 {
                let (bgamma, dgamma, dval, _) = target.eval(self.s, &loc.plaque.trans, &u);
                let embedded = self.s.ambient.translate(&bgamma, &dval);
                // residual: the component of (embedded - z) orthogonal to the j-fiber
                let rel = self.s.ambient.displacement(&z, &embedded);
                let mut resid: DVector<T> = rel.clone();
                for nv in &normal_j {
                    let c = nv.dot(&rel);
                    resid -= nv * c;
                }
                if resid.norm() < self.tol {
                    ok = true;
                    break;
                }
                // project the leaf Jacobian the same way and take a Newton step
                let d = u.len();
                let mut jac = DMatrix::zeros(self.s.dim(), d);
                for k in 0..d {
                    let mut col = dgamma[k].clone();
                    for nv in &normal_j {
                        let c = nv.dot(&dgamma[k]);
                        col -= nv * c;
                    }
                    jac.set_column(k, &col);
                }
                let jt = jac.transpose();
                let lhs = &jt * &jac;
                let rhs = &jt * (-&resid);
                let Some(delta) = lhs.lu().solve(&rhs) else {
                    return Err(EngineError::RetractionFailed(sample));
                };
                for k in 0..d {
                    u[k] += delta[k];
                }
            }
            if !ok {
                return Err(EngineError::RetractionFailed(sample));
            }
            let (bgamma, _, dval, _) = target.eval(self.s, &loc.plaque.trans, &u);
            let pi_point = self.s.ambient.translate(&bgamma, &dval);
            let pull = self.s.ambient.displacement(&z, &pi_point);
            z = self.s.ambient.translate(&z, &(&pull * ramp));
        }
        Ok(z)
    }

    /// Full descending run: glue, iterate, chain-solve each ring, then
    /// extract the pullback everywhere.
    pub fn run(&self) -> Result<PersistOutcome<T>, EngineError> {
        let count = self.s.samples.len();
        let n_strata = self.s.strata.len();
        let mut field: Vec<DVector<T>> = vec![DVector::zeros(self.s.dim()); count];
        let mut pullback: Vec<Option<PullbackEntry<T>>> = vec![None; count];
        let mut traces = Vec::new();

        for p in (0..n_strata).rev() {
            // glue band: higher-ring samples in this tube near the ring
            if p + 1 < n_strata {
                let ring_pts: Vec<DVector<T>> = (0..count)
                    .filter(|&i| self.filtration.ring[i] == p)
                    .map(|i| self.s.samples[i].point.clone())
                    .collect();
                if !ring_pts.is_empty() {
                    // band width: stay clear of the images of higher rings
                    let mut d_img = real::<T>(f64::INFINITY);
                    for i in 0..count {
                        if self.filtration.ring[i] <= p {
                            continue;
                        }
                        let img = self.s.ambient.wrap(&self.f.eval(&self.s.samples[i].point));
                        for rp in &ring_pts {
                            let d = self.s.ambient.distance(rp, &img);
                            if d < d_img {
                                d_img = d;
                            }
                        }
                    }
                    let w_band = (self.s.strata[p].tube_width).min(d_img * real(0.5));
                    if w_band > T::zero() {
                        let mut band: Vec<(usize, T)> = Vec::new();
                        for i in 0..count {
                            if self.filtration.ring[i] <= p {
                                continue;
                            }
                            if self.s.tube_locate(p, &self.s.samples[i].point, real(1e-9)).is_none() {
                                continue;
                            }
                            let mut d = real::<T>(f64::INFINITY);
                            for rp in &ring_pts {
                                let dd = self.s.ambient.distance(rp, &self.s.samples[i].point);
                                if dd < d {
                                    d = dd;
                                }
                            }
                            if d <= w_band {
                                band.push((i, d));
                            }
                        }
                        for (i, d) in band {
                            let weight = T::one() - d / w_band;
                            // one graph-transform step of the frozen field
                            let step = self.transform_at(p, i, &field)?;
                            let y = self.s.ambient.translate(&self.s.samples[i].point, &step.disp);
                            let blended = self.glue_blend(p, i, &y, weight, &field)?;
                            field[i] = self.s.ambient.displacement(&self.s.samples[i].point, &blended);
                            pullback[i] = Some(step.entry);
                        }
                    }
                }
            }
            // on-stratum fixed point
            let trace = self.iterate_ring(p, &mut field)?;
            traces.push(trace);
            // off-stratum chains
            self.solve_off_stratum(p, &mut field, &mut pullback)?;
        }

        // final extraction: project fp(i'(x)) onto the embedded image plaque
        let mut residual_max = 0.0_f64;
        for i in 0..count {
            let p = self.filtration.ring[i];
            let x = &self.s.samples[i].point;
            let v = self.s.ambient.translate(x, &field[i]);
            let fv = self.s.ambient.wrap(&self.fp.eval(&v));
            let img = self.s.ambient.wrap(&self.f.eval(x));
            let Some(tloc) = self.s.tube_locate(p, &img, real(1e-9)) else {
                continue;
            };
            if let Some(code) = tloc.plaque.code {
                let chart = &self.s.strata[p].charts[tloc.plaque.chart];
                // affine fiber projection: leaf coordinates of the image point
                let u = chart.leaf_coords(&fv);
                let inside = chart.covers_leaf(&u, real(1e-9));
                let target = TargetField::Stored { stratum: p, chart: tloc.plaque.chart, code, field: &field };
                let uu = if inside {
                    u
                } else {
                    tloc.leaf_u.clone()
                };
                let (bgamma, _, dval, _) = target.eval(self.s, &tloc.plaque.trans, &uu);
                let embedded = self.s.ambient.translate(&bgamma, &dval);
                let res = self.s.ambient.distance(&embedded, &fv);
                let leaf_dist = {
                    let mut acc = T::zero();
                    for (k, &uk) in uu.iter().enumerate() {
                        let dd = uk - tloc.leaf_u[k];
                        acc += dd * dd;
                    }
                    acc.sqrt()
                };
                pullback[i] = Some(PullbackEntry {
                    stratum: p,
                    chart: tloc.plaque.chart,
                    trans: tloc.plaque.trans.clone(),
                    leaf_u: uu,
                    residual: res,
                    leaf_dist,
                });
            }
            if let Some(entry) = &pullback[i] {
                let r = to_f64(entry.residual);
                if r > residual_max {
                    residual_max = r;
                }
            }
        }

        let field = EmbeddingField { disp: field };
        let displacement_sup = to_f64(field.sup_norm());
        Ok(PersistOutcome {
            residual_max,
            displacement_sup,
            eta_prime: to_f64(self.eta_prime.iter().fold(real::<T>(f64::INFINITY), |a, &b| a.min(b))),
            field,
            pullback: PullbackField { entries: pullback },
            traces,
            filtration: self.filtration.clone(),
        })
    }
}

enum ResolvedTarget<'a, T: Real> {
    Field(TargetField<'a, T>, DVector<T>),
}

fn ratios_of(sup_updates: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for w in sup_updates.windows(2) {
        if w[0] > 0.0 {
            out.push(w[1] / w[0]);
        }
    }
    out
}

/// Runs the whole persistence computation: certificates are assumed checked
/// by the caller; the filtration is built here.
pub fn persist_stratification<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    fp: &EndomorphismSpec<T>,
    eta_prime: Option<T>,
    tol: T,
) -> Result<PersistOutcome<T>, EngineError> {
    Engine::new(s, frames, f, fp, eta_prime, tol)?.run()
}

/// Runs the factor persistences and the product persistence and returns the
/// largest discrepancy between the product field and the product of factor
/// fields over all shared samples.
#[allow(clippy::too_many_arguments)]
pub fn product_crosscheck<T: Real>(
    sa: &SampledStratification<T>,
    fa: &EndomorphismSpec<T>,
    fap: &EndomorphismSpec<T>,
    sb: &SampledStratification<T>,
    fb: &EndomorphismSpec<T>,
    fbp: &EndomorphismSpec<T>,
    sp: &SampledStratification<T>,
    fprod: &EndomorphismSpec<T>,
    fprodp: &EndomorphismSpec<T>,
    tol: T,
) -> Result<f64, EngineError> {
    let frames_a = crate::strata::normal_frames(sa).map_err(|_| EngineError::StrataOrderViolation)?;
    let frames_b = crate::strata::normal_frames(sb).map_err(|_| EngineError::StrataOrderViolation)?;
    let frames_p = crate::strata::normal_frames(sp).map_err(|_| EngineError::StrataOrderViolation)?;
    let out_a = persist_stratification(sa, &frames_a, fa, fap, None, tol)?;
    let out_b = persist_stratification(sb, &frames_b, fb, fbp, None, tol)?;
    let out_p = persist_stratification(sp, &frames_p, fprod, fprodp, None, tol)?;

    // match product samples to factor samples by coordinates
    let na = sa.dim();
    let nb = sb.dim();
    let find = |cloud: &SampledStratification<T>, coords: &[T]| -> Option<usize> {
        let p = DVector::from_row_slice(coords);
        let mut best: Option<(usize, T)> = None;
        for (i, smp) in cloud.samples.iter().enumerate() {
            let d = cloud.ambient.distance(&smp.point, &p);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.and_then(|(i, d)| if d < real(1e-9) { Some(i) } else { None })
    };

    let mut worst = 0.0_f64;
    for (i, smp) in sp.samples.iter().enumerate() {
        let xa: Vec<T> = (0..na).map(|k| smp.point[k]).collect();
        let xb: Vec<T> = (0..nb).map(|k| smp.point[na + k]).collect();
        let (Some(ia), Some(ib)) = (find(sa, &xa), find(sb, &xb)) else { continue };
        for k in 0..na {
            let d = to_f64((out_p.field.disp[i][k] - out_a.field.disp[ia][k]).abs());
            if d > worst {
                worst = d;
            }
        }
        for k in 0..nb {
            let d = to_f64((out_p.field.disp[i][na + k] - out_b.field.disp[ib][k]).abs());
            if d > worst {
                worst = d;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{
        doubling_affine, doubling_affine_sigma, flat_leaf, quad_factor_instance, quad_product,
    };
    use crate::strata::normal_frames;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn flat_leaf_step_solves_the_fiber() {
        let inst = flat_leaf::<f64>(0.1, 256);
        let frames = normal_frames(&inst.strat).unwrap();
        let field = EmbeddingField::zero(&inst.strat);
        // x = (pi/2, 0): solve 3s + 0.1 sin(pi/2) = 0
        let sample = inst
            .strat
            .samples
            .iter()
            .position(|s| (s.point[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-9)
            .expect("pi/2 is on the 256 grid");
        let (v, entry) = graph_transform_step(
            &inst.strat,
            &frames,
            &inst.f,
            &inst.fp,
            0,
            sample,
            &field,
            None,
            1e-12,
        )
        .unwrap();
        assert_abs_diff_eq!(v[0], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], -0.1 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(entry.leaf_u[0], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn doubling_affine_step_at_zero() {
        let inst = doubling_affine::<f64>(0.1, 256);
        let frames = normal_frames(&inst.strat).unwrap();
        let field = EmbeddingField::zero(&inst.strat);
        let sample = inst
            .strat
            .samples
            .iter()
            .position(|s| s.point[0].abs() < 1e-12)
            .unwrap();
        // 4s + 0.1 cos 0 = 0
        let (v, _) = graph_transform_step(
            &inst.strat,
            &frames,
            &inst.f,
            &inst.fp,
            0,
            sample,
            &field,
            None,
            1e-12,
        )
        .unwrap();
        assert_abs_diff_eq!(v[1], -0.025, epsilon = 1e-13);
    }

    #[test]
    fn unperturbed_step_is_identity() {
        let inst = doubling_affine::<f64>(0.0, 128);
        let frames = normal_frames(&inst.strat).unwrap();
        let field = EmbeddingField::zero(&inst.strat);
        for sample in [0usize, 17, 63] {
            let (v, entry) = graph_transform_step(
                &inst.strat,
                &frames,
                &inst.f,
                &inst.f,
                0,
                sample,
                &field,
                None,
                1e-12,
            )
            .unwrap();
            assert_eq!(v, inst.strat.samples[sample].point);
            assert_eq!(entry.residual, 0.0_f64.max(entry.residual)); // finite
        }
    }

    #[test]
    fn flat_leaf_converges_to_sine_graph() {
        let inst = flat_leaf::<f64>(0.1, 256);
        let frames = normal_frames(&inst.strat).unwrap();
        let out =
            persist_stratification(&inst.strat, &frames, &inst.f, &inst.fp, None, 1e-12).unwrap();
        // sigma(theta) = -0.1 sin(theta) / 2
        for (i, smp) in inst.strat.samples.iter().enumerate() {
            let expected = -0.1 * smp.point[0].sin() / 2.0;
            assert_abs_diff_eq!(out.field.disp[i][1], expected, epsilon = 1e-10);
        }
        // contraction ratio 1/3
        let trace = &out.traces[0];
        let tail = &trace.ratios[1..trace.ratios.len().saturating_sub(1)];
        for r in tail {
            assert_relative_eq!(*r, 1.0 / 3.0, epsilon = 1e-6);
        }
        assert!(out.residual_max < 1e-10);
    }

    #[test]
    fn doubling_affine_converges_to_lacunary_graph() {
        let inst = doubling_affine::<f64>(0.1, 1024);
        let frames = normal_frames(&inst.strat).unwrap();
        let out =
            persist_stratification(&inst.strat, &frames, &inst.f, &inst.fp, None, 1e-12).unwrap();
        let mut sup = 0.0_f64;
        for (i, smp) in inst.strat.samples.iter().enumerate() {
            let oracle = doubling_affine_sigma(0.1, smp.point[0], 30);
            sup = sup.max((out.field.disp[i][1] - oracle).abs());
        }
        assert!(sup < 1e-8, "sup error {sup}");
        let trace = &out.traces[0];
        let tail = &trace.ratios[1..trace.ratios.len().saturating_sub(1)];
        for r in tail {
            assert_relative_eq!(*r, 0.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_perturbation_is_bitwise_identity() {
        for inst in [doubling_affine::<f64>(0.0, 256), flat_leaf::<f64>(0.0, 256)] {
            let frames = normal_frames(&inst.strat).unwrap();
            let out =
                persist_stratification(&inst.strat, &frames, &inst.f, &inst.fp, None, 1e-12)
                    .unwrap();
            for d in &out.field.disp {
                assert_eq!(d.norm(), 0.0, "displacement must be exactly zero");
            }
            assert_eq!(out.displacement_sup, 0.0);
            assert_eq!(out.traces[0].iterations, 1);
        }
    }

    #[test]
    fn quad_product_zero_perturbation_identity() {
        let inst = quad_product::<f64>(0.0, 5, 24.0);
        let frames = normal_frames(&inst.strat).unwrap();
        let out =
            persist_stratification(&inst.strat, &frames, &inst.f, &inst.fp, None, 1e-12).unwrap();
        assert_eq!(out.displacement_sup, 0.0);
        assert!(out.residual_max < 1e-9, "residual {}", out.residual_max);
    }

    #[test]
    fn quad_product_small_perturbation_persists() {
        let t = 0.01;
        let inst = quad_product::<f64>(t, 6, 24.0);
        let frames = normal_frames(&inst.strat).unwrap();
        let out =
            persist_stratification(&inst.strat, &frames, &inst.f, &inst.fp, None, 1e-12).unwrap();
        assert!(out.residual_max < 1e-8, "residual {}", out.residual_max);
        assert!(out.displacement_sup <= 5.0 * t, "sup {}", out.displacement_sup);
        assert!(out.displacement_sup > 1e-4, "perturbation must actually move the strata");
        // frontier and coherence still hold on the displaced cloud
        let displaced: Vec<_> = (0..inst.strat.samples.len())
            .map(|i| out.field.point(&inst.strat, i))
            .collect();
        let rep = crate::strata::check_cloud_coherence(&inst.strat, &displaced);
        assert!(rep.all_ok(), "{:?}", rep.violations);
    }

    #[test]
    fn quad_product_displacement_scales_linearly() {
        let mut sups = Vec::new();
        for &t in &[0.01, 0.005, 0.0025] {
            let inst = quad_product::<f64>(t, 5, 16.0);
            let frames = normal_frames(&inst.strat).unwrap();
            let out =
                persist_stratification(&inst.strat, &frames, &inst.f, &inst.fp, None, 1e-12)
                    .unwrap();
            sups.push(out.displacement_sup);
        }
        let r1 = sups[0] / sups[1];
        let r2 = sups[1] / sups[2];
        assert!((r1 - 2.0).abs() < 0.2, "halving t must halve the sup: {r1}");
        assert!((r2 - 2.0).abs() < 0.2, "halving t must halve the sup: {r2}");
    }

    #[test]
    fn product_crosscheck_separable() {
        let t = 0.01;
        let fa = quad_factor_instance::<f64>(t, 5, 16.0);
        let fb = quad_factor_instance::<f64>(0.0, 5, 16.0);
        let prod = quad_product::<f64>(0.0, 5, 16.0);
        // product map with the separable bump on the first factor only
        let beta = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let fprodp = prod.f.perturbed(crate::dynamics::PerturbationSpec::bump_box(
            t,
            nalgebra::dvector![beta, 0.0],
            nalgebra::dvector![0.3, f64::INFINITY],
            nalgebra::dvector![1.0, 0.0],
        ));
        let worst = product_crosscheck(
            &fa.strat,
            &fa.f,
            &fa.fp,
            &fb.strat,
            &fb.f,
            &fb.fp,
            &prod.strat,
            &prod.f,
            &fprodp,
            1e-12,
        )
        .unwrap();
        assert!(worst < 1e-9, "separable perturbation must factor: {worst}");
    }
}
