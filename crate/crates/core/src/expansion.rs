//! Certificates of r-normal expansion: direct orbit inequalities, adapted
//! metrics, invariant cone fields, and the jet-transfer contraction.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::EndomorphismSpec;
use crate::num::{real, to_f64, Real};
use crate::strata::{frames_at, NormalFrameField, SampledStratification};

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("orbit of sample {sample} leaves the sampled region at step {step}")]
    OrbitLeavesSamples { sample: usize, step: usize },
    #[error("no valid parameters: {0}")]
    NoValidN(String),
    #[error("cone search failed after {0} bisection steps")]
    ConeSearchFailed(usize),
    #[error("jet transfer is singular (transversality lost)")]
    SingularTransfer,
}

// ---------------------------------------------------------------------------
// frames along orbits
// ---------------------------------------------------------------------------

/// Orthonormal (leaf, normal) frames of a stratum at an arbitrary point of
/// its support. Falls back to plane axes at a polar singularity.
pub fn stratum_frames_at<T: Real>(
    s: &SampledStratification<T>,
    stratum: usize,
    x: &DVector<T>,
) -> Option<(Vec<DVector<T>>, Vec<DVector<T>>)> {
    let st = &s.strata[stratum];
    for chart in &st.charts {
        let u = chart.leaf_coords(x);
        let trans = chart.trans_coords(x);
        let (_, dist) = chart.nearest_code(&s.ambient, &trans)?;
        if dist > st.tube_width {
            continue;
        }
        if let crate::strata::LeafShape::PolarDisk { x_axis, y_axis, extra } = &chart.leaf {
            if u[0] < real(1e-8) {
                // the polar frame degenerates at the origin; the leaf plane
                // is still spanned by the plane axes
                let n = s.dim();
                let mut leaf = Vec::new();
                for &a in [*x_axis, *y_axis].iter().chain(extra.iter()) {
                    let mut v: DVector<T> = DVector::zeros(n);
                    v[a] = T::one();
                    leaf.push(v);
                }
                let mut normal = Vec::new();
                for a in 0..n {
                    if a != *x_axis && a != *y_axis && !extra.contains(&a) {
                        let mut v: DVector<T> = DVector::zeros(n);
                        v[a] = T::one();
                        normal.push(v);
                    }
                }
                return Some((leaf, normal));
            }
        }
        if let Some(fr) = frames_at(chart, &trans, &u, s.dim()) {
            return Some(fr);
        }
    }
    None
}

fn frame_matrix<T: Real>(frame: &[DVector<T>], n: usize) -> DMatrix<T> {
    let mut m = DMatrix::zeros(n, frame.len());
    for (k, v) in frame.iter().enumerate() {
        m.set_column(k, v);
    }
    m
}

fn sigma_max<T: Real>(m: &DMatrix<T>) -> T {
    if m.ncols() == 0 || m.nrows() == 0 {
        return T::zero();
    }
    m.clone().singular_values().max()
}

fn sigma_min<T: Real>(m: &DMatrix<T>) -> T {
    if m.ncols() == 0 || m.nrows() == 0 {
        return T::zero();
    }
    m.clone().singular_values().min()
}

// ---------------------------------------------------------------------------
// direct inequality check
// ---------------------------------------------------------------------------

/// Result of the direct r-normal-expansion check on one stratum.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub stratum: usize,
    pub r: u32,
    pub n_max: usize,
    pub pass: bool,
    pub lambda: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub worst_sample: usize,
    pub worst_direction: Vec<f64>,
    pub samples_checked: usize,
}

/// Checks `|p Tf^n v1| >= C lambda^n (1 + |Tf^n v0|^r)` over every on-stratum
/// sample and `n <= n_max`, and fits the largest stable `lambda`.
///
/// A candidate `lambda` is admissible when the global minimum of
/// `ratio_n / lambda^n` is attained strictly before `n_max`; the fit is the
/// supremum of admissible candidates, so enlarging `n_max` can only lower it
/// (a fail never turns into a pass).
pub fn check_normal_expansion<T: Real>(
    s: &SampledStratification<T>,
    f: &EndomorphismSpec<T>,
    stratum: usize,
    r: u32,
    n_max: usize,
) -> Result<ExpansionReport, ExpansionError> {
    let n = s.dim();
    let sample_ids: Vec<usize> = (0..s.samples.len())
        .filter(|&i| s.samples[i].stratum == stratum)
        .collect();
    if s.strata[stratum].dim == n {
        // top-dimensional stratum: no normal directions, nothing to check
        return Ok(ExpansionReport {
            stratum,
            r,
            n_max,
            pass: true,
            lambda: f64::INFINITY,
            c_min: f64::INFINITY,
            c_max: f64::INFINITY,
            worst_sample: sample_ids.first().copied().unwrap_or(0),
            worst_direction: Vec::new(),
            samples_checked: sample_ids.len(),
        });
    }

    // ratio_n(x) = sigma_min(Nt_y J_n N_x) / (1 + sigma_max(J_n L_x)^r)
    let mut ratios: Vec<Vec<T>> = Vec::with_capacity(sample_ids.len());
    let mut worst_dir: Vec<Vec<f64>> = Vec::with_capacity(sample_ids.len());
    for (local, &i) in sample_ids.iter().enumerate() {
        let x0 = s.samples[i].point.clone();
        let (leaf0, normal0) = stratum_frames_at(s, stratum, &x0)
            .ok_or(ExpansionError::OrbitLeavesSamples { sample: i, step: 0 })?;
        let lmat = frame_matrix(&leaf0, n);
        let nmat = frame_matrix(&normal0, n);
        let mut jl = lmat.clone(); // J_n L_x
        let mut jn = nmat.clone(); // J_n N_x
        let mut y = x0;
        let mut per_n = Vec::with_capacity(n_max + 1);
        let mut dir: Vec<f64> = Vec::new();
        for step in 0..=n_max {
            let (_, normal_y) = stratum_frames_at(s, stratum, &y)
                .ok_or(ExpansionError::OrbitLeavesSamples { sample: i, step })?;
            let ny = frame_matrix(&normal_y, n);
            let quot = ny.transpose() * &jn;
            let a = sigma_min(&quot);
            let b = if lmat.ncols() == 0 { T::zero() } else { sigma_max(&jl) };
            let mut bpow = T::one();
            for _ in 0..r {
                bpow *= b;
            }
            per_n.push(a / (T::one() + bpow));
            if step == 0 {
                // worst normal direction at the sample: right singular vector
                // of the one-step quotient block
                let d1 = f.differential(&y);
                let q1 = {
                    let y1 = s.ambient.wrap(&f.eval(&y));
                    let (_, n1) = stratum_frames_at(s, stratum, &y1)
                        .ok_or(ExpansionError::OrbitLeavesSamples { sample: i, step: 1 })?;
                    frame_matrix(&n1, n).transpose() * &d1 * &jn
                };
                let svd = q1.svd(false, true);
                if let Some(vt) = svd.v_t {
                    let k = svd
                        .singular_values
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(k, _)| k)
                        .unwrap_or(0);
                    let coords: Vec<T> = (0..vt.ncols()).map(|c| vt[(k, c)]).collect();
                    let mut amb = DVector::zeros(n);
                    for (c, &w) in coords.iter().enumerate() {
                        amb += &normal0[c] * w;
                    }
                    dir = (0..n).map(|c| to_f64(amb[c])).collect();
                }
            }
            if step < n_max {
                let d1 = f.differential(&y);
                jl = &d1 * jl;
                jn = &d1 * jn;
                y = s.ambient.wrap(&f.eval(&y));
            }
        }
        ratios.push(per_n);
        worst_dir.push(dir);
        let _ = local;
    }

    // transversality: every quotient must stay nonsingular
    let mut pass = ratios.iter().all(|per| per.iter().all(|&v| v > real(1e-300)));

    // admissible(lambda): per sample, the minimum of ratio_n / lambda^n is
    // attained in the first half of the horizon and the tail does not trend
    // down, i.e. the transient is over and C(x) would survive any horizon
    let admissible = |lambda: T| -> bool {
        let log_l = lambda.ln();
        let half = n_max / 2;
        for per in &ratios {
            let mut best = real::<T>(f64::INFINITY);
            let mut best_n = 0usize;
            for (k, &v) in per.iter().enumerate() {
                if v <= T::zero() {
                    return false;
                }
                let val = v.ln() - log_l * real(k as f64);
                if val < best {
                    best = val;
                    best_n = k;
                }
            }
            if best_n > half {
                return false;
            }
            let v_half = per[half].ln() - log_l * real(half as f64);
            let v_end = per[n_max].ln() - log_l * real(n_max as f64);
            if v_end < v_half {
                return false;
            }
        }
        true
    };

    let mut lambda = T::one();
    if pass {
        if !admissible(T::one() + real(1e-9)) {
            pass = false;
        } else {
            let mut lo = T::one() + real(1e-9);
            let mut hi = real::<T>(2.0);
            let mut grow = 0;
            while admissible(hi) && grow < 60 {
                lo = hi;
                hi *= real(2.0);
                grow += 1;
            }
            for _ in 0..60 {
                let mid = (lo + hi) * real(0.5);
                if admissible(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lambda = lo;
        }
    }

    // fitted C(x) at the chosen lambda
    let mut c_min = f64::INFINITY;
    let mut c_max = f64::NEG_INFINITY;
    let mut worst_sample = sample_ids.first().copied().unwrap_or(0);
    let mut worst_direction = Vec::new();
    if pass {
        for (local, per) in ratios.iter().enumerate() {
            let mut cx = f64::INFINITY;
            for (k, &v) in per.iter().enumerate() {
                let c = to_f64(v) / to_f64(lambda).powi(k as i32);
                if c < cx {
                    cx = c;
                }
            }
            if cx < c_min {
                c_min = cx;
                worst_sample = sample_ids[local];
                worst_direction = worst_dir[local].clone();
            }
            if cx > c_max {
                c_max = cx;
            }
        }
    } else {
        c_min = 0.0;
        c_max = 0.0;
    }

    Ok(ExpansionReport {
        stratum,
        r,
        n_max,
        pass,
        lambda: to_f64(lambda),
        c_min,
        c_max,
        worst_sample,
        worst_direction,
        samples_checked: sample_ids.len(),
    })
}

// ---------------------------------------------------------------------------
// adapted metric
// ---------------------------------------------------------------------------

/// Per-sample quadratic forms making normal expansion a one-step inequality.
#[derive(Debug, Clone)]
pub struct AdaptedMetric<T> {
    pub stratum: usize,
    pub r: u32,
    pub a: T,
    /// Uniform power at which the normal block dominates.
    pub big_n: usize,
    /// Truncation of the normal series.
    pub m_trunc: usize,
    /// Cutoff of the leaf series from the tail bound `c a^n < 1e-12`.
    pub leaf_cut: usize,
    pub sample_ids: Vec<usize>,
    /// `r(x)` per sample (ordered as `sample_ids`).
    pub r_of: Vec<T>,
    /// Leaf-block form in leaf-frame coordinates (d x d).
    pub leaf_form: Vec<DMatrix<T>>,
    /// Normal-block form in normal-frame coordinates (q x q).
    pub normal_form: Vec<DMatrix<T>>,
}

struct StratumOrbit<T> {
    sample_ids: Vec<usize>,
    /// index into `sample_ids` of the image sample
    next: Vec<usize>,
    leaf: Vec<DMatrix<T>>,
    normal: Vec<DMatrix<T>>,
    jac: Vec<DMatrix<T>>,
}

fn stratum_orbit<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    stratum: usize,
) -> Result<StratumOrbit<T>, ExpansionError> {
    let n = s.dim();
    let sample_ids: Vec<usize> = (0..s.samples.len())
        .filter(|&i| s.samples[i].stratum == stratum)
        .collect();
    // sort a positional index of the points for image lookup
    let mut order: Vec<usize> = (0..sample_ids.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = &s.samples[sample_ids[a]].point;
        let pb = &s.samples[sample_ids[b]].point;
        for k in 0..n {
            match pa[k].partial_cmp(&pb[k]).unwrap() {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    let lookup = |p: &DVector<T>| -> Option<usize> {
        // nearest by first coordinate then scan window
        let mut lo = 0usize;
        let mut hi = order.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if s.samples[sample_ids[order[mid]]].point[0] < p[0] {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let tol = real::<T>(1e-9);
        let lo_i = lo.saturating_sub(8);
        let hi_i = (lo + 8).min(order.len());
        let mut best: Option<(usize, T)> = None;
        for &cand in &order[lo_i..hi_i] {
            let d = s.ambient.distance(&s.samples[sample_ids[cand]].point, p);
            if d < tol && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((cand, d));
            }
        }
        best.map(|(c, _)| c)
    };

    let mut next = Vec::with_capacity(sample_ids.len());
    let mut leaf = Vec::with_capacity(sample_ids.len());
    let mut normal = Vec::with_capacity(sample_ids.len());
    let mut jac = Vec::with_capacity(sample_ids.len());
    for (local, &i) in sample_ids.iter().enumerate() {
        let p = &s.samples[i].point;
        let img = s.ambient.wrap(&f.eval(p));
        let nx = lookup(&img).ok_or(ExpansionError::OrbitLeavesSamples { sample: i, step: 1 })?;
        next.push(nx);
        leaf.push(frame_matrix(&frames.leaf[i], n));
        normal.push(frame_matrix(&frames.normal[i], n));
        jac.push(f.differential(p));
        let _ = local;
    }
    Ok(StratumOrbit { sample_ids, next, leaf, normal, jac })
}

impl<T: Real> AdaptedMetric<T> {
    /// Local index of a global sample id.
    pub fn local_of(&self, sample: usize) -> Option<usize> {
        self.sample_ids.iter().position(|&i| i == sample)
    }
}

/// Builds the adapted metric of one stratum. The sample grid of the stratum
/// must be forward closed (images of samples are samples).
pub fn build_adapted_metric<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    stratum: usize,
    r: u32,
) -> Result<AdaptedMetric<T>, ExpansionError> {
    build_adapted_metric_with(s, frames, f, stratum, r, None)
}

/// As [`build_adapted_metric`], optionally overriding the normal-series
/// truncation (used by the sharpness probe).
pub fn build_adapted_metric_with<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    stratum: usize,
    r: u32,
    override_m: Option<isize>,
) -> Result<AdaptedMetric<T>, ExpansionError> {
    let orbit = stratum_orbit(s, frames, f, stratum)?;
    let count = orbit.sample_ids.len();
    let d = orbit.leaf[0].ncols();
    let q = orbit.normal[0].ncols();
    if q == 0 {
        return Err(ExpansionError::NoValidN("top-dimensional stratum has no normal bundle".into()));
    }

    // multi-step norms: b_k(x) = |J_k L_x|, m_k(x) = sigma_min(Nt J_k N_x)
    let horizon = 64usize;
    let mut bn = vec![vec![T::one(); count]; horizon + 1];
    let mut mn = vec![vec![T::one(); count]; horizon + 1];
    {
        let mut jl: Vec<DMatrix<T>> = orbit.leaf.clone();
        let mut jn: Vec<DMatrix<T>> = orbit.normal.clone();
        let mut pos: Vec<usize> = (0..count).collect(); // current orbit position
        for k in 1..=horizon {
            for i in 0..count {
                let here = pos[i];
                jl[i] = &orbit.jac[here] * &jl[i];
                jn[i] = &orbit.jac[here] * &jn[i];
                pos[i] = orbit.next[here];
                bn[k][i] = if d == 0 { T::zero() } else { sigma_max(&jl[i]) };
                mn[k][i] = sigma_min(&(orbit.normal[pos[i]].transpose() * &jn[i]));
            }
        }
    }

    let powr = |v: T| -> T {
        let mut acc = T::one();
        for _ in 0..r {
            acc *= v;
        }
        acc
    };

    // minimal uniform N with max(1, b_N^r) < a^{2N} m_N, raising a if needed
    let mut a = real::<T>(0.9);
    let (a, big_n) = loop {
        let mut found = None;
        for n in 1..=horizon {
            let mut a2n = T::one();
            for _ in 0..2 * n {
                a2n *= a;
            }
            let ok = (0..count).all(|i| {
                let lhs = T::one().max(powr(bn[n][i]));
                lhs < a2n * mn[n][i]
            });
            if ok {
                found = Some(n);
                break;
            }
        }
        match found {
            Some(n) => break (a, n),
            None => {
                a += real(0.025);
                if a >= real(0.99) {
                    return Err(ExpansionError::NoValidN(format!(
                        "no N <= {horizon} dominates even at a = 0.975"
                    )));
                }
            }
        }
    };

    // r(x): geometric mean of its bounds
    let mut r_of = Vec::with_capacity(count);
    let inv_n = T::one() / real(big_n as f64);
    for i in 0..count {
        let lo = T::one().max(powr(bn[big_n][i])).powf(inv_n) / a;
        let hi = a * mn[big_n][i].powf(inv_n);
        r_of.push((lo * hi).sqrt());
    }

    // orbit products R_n(x) = prod_{j<=n} r(f^j x)
    let rprod = |i: usize, upto: usize| -> Vec<T> {
        let mut out = Vec::with_capacity(upto + 1);
        let mut acc = T::one();
        let mut pos = i;
        for _ in 0..=upto {
            acc *= r_of[pos];
            out.push(acc);
            pos = orbit.next[pos];
        }
        out
    };

    // minimal M with m_{M+1}/R_{M+1} > 1/r(x) everywhere
    let m_cap = horizon - 1;
    let mut m_trunc_opt = None;
    'outer: for m in 0..=m_cap {
        for i in 0..count {
            let rn = rprod(i, m + 1);
            if !(mn[m + 1][i] / rn[m + 1] > T::one() / r_of[i]) {
                continue 'outer;
            }
        }
        m_trunc_opt = Some(m);
        break;
    }
    let m_trunc = match override_m {
        Some(ov) => {
            let base = m_trunc_opt
                .ok_or_else(|| ExpansionError::NoValidN("no truncation M <= 63 works".into()))?;
            let target = base as isize + ov;
            if target < 0 {
                // degenerate probe: an empty normal series
                usize::MAX
            } else {
                target as usize
            }
        }
        None => m_trunc_opt.ok_or_else(|| ExpansionError::NoValidN("no truncation M <= 63 works".into()))?,
    };

    // leaf-series cutoff from the tail bound c a^n < 1e-12
    let mut c_big = T::one();
    for i in 0..count {
        c_big = c_big.max(bn[1][i]).max(T::one() / mn[1][i]).max(r_of[i]);
    }
    let mut c_const = T::one();
    for _ in 0..4 * big_n {
        c_const *= c_big;
    }
    for _ in 0..2 * big_n {
        c_const /= a;
    }
    let mut leaf_cut = 0usize;
    {
        let mut bound = c_const;
        while bound >= real(1e-12) && leaf_cut < 4000 {
            bound *= a;
            leaf_cut += 1;
        }
    }

    // assemble the two forms per sample
    let mut leaf_form = Vec::with_capacity(count);
    let mut normal_form = Vec::with_capacity(count);
    let two_over_r = real::<T>(2.0) / real(r as f64);
    for i in 0..count {
        // leaf block: sum_n (J_n L)^T (J_n L) / R_n^(2/r)
        let mut gl = DMatrix::zeros(d, d);
        if d > 0 {
            let rn = rprod(i, leaf_cut);
            let mut an = orbit.leaf[i].clone();
            let mut pos = i;
            for k in 0..=leaf_cut {
                let w = T::one() / rn[k].powf(two_over_r);
                gl += an.transpose() * &an * w;
                let term = sigma_max(&an) * w.sqrt();
                an = &orbit.jac[pos] * an;
                pos = orbit.next[pos];
                if term < real(1e-16) && k > 2 {
                    break;
                }
            }
        }
        // normal block: sum_{n<=M} (Nt_n J_n N)^T (.) / R_n^2
        let mut gn = DMatrix::zeros(q, q);
        if m_trunc != usize::MAX {
            let rn = rprod(i, m_trunc);
            let mut anorm = orbit.normal[i].clone();
            let mut pos = i;
            for k in 0..=m_trunc {
                let quot = orbit.normal[pos].transpose() * &anorm;
                let w = T::one() / (rn[k] * rn[k]);
                gn += quot.transpose() * &quot * w;
                anorm = &orbit.jac[pos] * anorm;
                pos = orbit.next[pos];
            }
        }
        leaf_form.push(gl);
        normal_form.push(gn);
    }

    Ok(AdaptedMetric {
        stratum,
        r,
        a,
        big_n,
        m_trunc: if m_trunc == usize::MAX { 0 } else { m_trunc },
        leaf_cut,
        sample_ids: orbit.sample_ids,
        r_of,
        leaf_form,
        normal_form,
    })
}

/// Outcome of the one-step inequality under an adapted metric.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptedVerify {
    pub pass: bool,
    /// Largest `max(1, |Tf*|'^r) |v|' / |[Tf] v|'` over samples and normal
    /// directions; the inequality wants this below 1.
    pub worst_ratio: f64,
    pub worst_margin: f64,
    pub worst_sample: usize,
    /// Smallest quotient growth relative to `r(x)`; the construction makes
    /// this strictly positive, and dropping the truncation by one breaks it.
    pub min_quotient_margin: f64,
}

/// Checks `max(1, |Tf*|'^r) |v|' < lambda' |[Tf] v|'` at every sample.
pub fn verify_adapted<T: Real>(
    metric: &AdaptedMetric<T>,
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
) -> Result<AdaptedVerify, ExpansionError> {
    let orbit = stratum_orbit(s, frames, f, metric.stratum)?;
    assert_eq!(orbit.sample_ids, metric.sample_ids);
    let count = orbit.sample_ids.len();
    let d = orbit.leaf[0].ncols();

    let chol = |g: &DMatrix<T>| -> Option<DMatrix<T>> {
        if g.ncols() == 0 {
            return Some(g.clone());
        }
        Cholesky::new(g.clone()).map(|c| c.l().transpose())
    };

    let mut worst_ratio = T::zero();
    let mut worst_sample = orbit.sample_ids[0];
    let mut min_quotient_margin = real::<T>(f64::INFINITY);
    for i in 0..count {
        let j = orbit.next[i];
        // leaf one-step in frame coordinates
        let leaf_norm = if d == 0 {
            T::zero()
        } else {
            let l1 = orbit.leaf[j].transpose() * &orbit.jac[i] * &orbit.leaf[i];
            let rx = chol(&metric.leaf_form[i]).ok_or(ExpansionError::SingularTransfer)?;
            let ry = chol(&metric.leaf_form[j]).ok_or(ExpansionError::SingularTransfer)?;
            let rx_inv = rx.clone().try_inverse().ok_or(ExpansionError::SingularTransfer)?;
            sigma_max(&(&ry * &l1 * &rx_inv))
        };
        let q1 = orbit.normal[j].transpose() * &orbit.jac[i] * &orbit.normal[i];
        let rx = chol(&metric.normal_form[i]).ok_or(ExpansionError::SingularTransfer)?;
        let ry = chol(&metric.normal_form[j]).ok_or(ExpansionError::SingularTransfer)?;
        let rx_inv = rx.clone().try_inverse().ok_or(ExpansionError::SingularTransfer)?;
        let growth = sigma_min(&(&ry * &q1 * &rx_inv));
        if growth <= T::zero() {
            return Err(ExpansionError::SingularTransfer);
        }
        let mut lhs = T::one();
        for _ in 0..metric.r {
            lhs *= leaf_norm;
        }
        let lhs = T::one().max(lhs);
        let ratio = lhs / growth;
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_sample = orbit.sample_ids[i];
        }
        let margin = growth / metric.r_of[i] - T::one();
        if margin < min_quotient_margin {
            min_quotient_margin = margin;
        }
    }

    Ok(AdaptedVerify {
        pass: worst_ratio < T::one(),
        worst_ratio: to_f64(worst_ratio),
        worst_margin: to_f64(T::one() - worst_ratio),
        worst_sample,
        min_quotient_margin: to_f64(min_quotient_margin),
    })
}

// ---------------------------------------------------------------------------
// cone field
// ---------------------------------------------------------------------------

/// Transverse cone certificate: `C(x) = { u + v : |v| > epsilon |u| }` in the
/// leaf/normal splitting, with the reweighted metric
/// `g' = eta g_leaf + g_normal`.
#[derive(Debug, Clone)]
pub struct ConeField<T> {
    pub stratum: usize,
    pub epsilon: T,
    pub eta: T,
    /// Certified expansion factor (strictly below the measured growth so the
    /// certificate stays valid under small perturbations).
    pub lambda: T,
    /// Measured minimal g'-growth over the boundary fan.
    pub growth: T,
    /// Perturbation size up to which the certificate is expected to stay
    /// valid (third of the measured margin).
    pub t_max_hint: T,
    pub sample_ids: Vec<usize>,
}

/// Deterministic unit directions (golden-angle fans per dimension).
pub fn fan_directions<T: Real>(dim: usize, count: usize) -> Vec<DVector<T>> {
    let mut out = Vec::with_capacity(count);
    match dim {
        0 => {}
        1 => {
            for k in 0..count {
                out.push(DVector::from_vec(vec![if k % 2 == 0 { T::one() } else { -T::one() }]));
            }
        }
        2 => {
            let golden = real::<T>(0.618_033_988_749_894_9);
            for k in 0..count {
                let ang = T::two_pi() * golden * real(k as f64);
                out.push(DVector::from_vec(vec![ang.cos(), ang.sin()]));
            }
        }
        _ => {
            // Fibonacci sphere for the first three coordinates
            let golden = real::<T>(0.618_033_988_749_894_9);
            for k in 0..count {
                let z = T::one() - real::<T>(2.0) * (real::<T>(k as f64) + real(0.5)) / real(count as f64);
                let rho = (T::one() - z * z).sqrt();
                let ang = T::two_pi() * golden * real(k as f64);
                let mut v = DVector::zeros(dim);
                v[0] = rho * ang.cos();
                v[1] = rho * ang.sin();
                v[2] = z;
                out.push(v);
            }
        }
    }
    out
}

struct ConeProbe<T> {
    sample_ids: Vec<usize>,
    leaf: Vec<DMatrix<T>>,
    normal: Vec<DMatrix<T>>,
    leaf_img: Vec<DMatrix<T>>,
    normal_img: Vec<DMatrix<T>>,
    jac: Vec<DMatrix<T>>,
}

fn cone_probe<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    stratum: usize,
) -> Result<ConeProbe<T>, ExpansionError> {
    let n = s.dim();
    let sample_ids: Vec<usize> = (0..s.samples.len())
        .filter(|&i| s.samples[i].stratum == stratum)
        .collect();
    let mut leaf = Vec::new();
    let mut normal = Vec::new();
    let mut leaf_img = Vec::new();
    let mut normal_img = Vec::new();
    let mut jac = Vec::new();
    for &i in &sample_ids {
        let p = &s.samples[i].point;
        let img = s.ambient.wrap(&f.eval(p));
        let (li, ni) = stratum_frames_at(s, stratum, &img)
            .ok_or(ExpansionError::OrbitLeavesSamples { sample: i, step: 1 })?;
        leaf.push(frame_matrix(&frames.leaf[i], n));
        normal.push(frame_matrix(&frames.normal[i], n));
        leaf_img.push(frame_matrix(&li, n));
        normal_img.push(frame_matrix(&ni, n));
        jac.push(f.differential(p));
    }
    Ok(ConeProbe { sample_ids, leaf, normal, leaf_img, normal_img, jac })
}

/// Margins of cone invariance and g'-expansion for one opening/weight over
/// the whole boundary fan. Positive margins mean the certificate holds.
fn cone_margins<T: Real>(
    probe: &ConeProbe<T>,
    epsilon: T,
    eta: T,
    fan: usize,
) -> (T, T) {
    let mut inv_margin = real::<T>(f64::INFINITY);
    let mut growth = real::<T>(f64::INFINITY);
    for i in 0..probe.sample_ids.len() {
        let d = probe.leaf[i].ncols();
        let q = probe.normal[i].ncols();
        let leaf_dirs = fan_directions::<T>(d, if d == 0 { 1 } else { fan });
        let normal_dirs = fan_directions::<T>(q, fan);
        for nd in &normal_dirs {
            let vpart = &probe.normal[i] * nd;
            let combos: Vec<DVector<T>> = if d == 0 {
                vec![vpart.clone()]
            } else {
                leaf_dirs
                    .iter()
                    .map(|ld| &probe.leaf[i] * ld + &vpart * epsilon)
                    .collect()
            };
            for w in combos {
                let img = &probe.jac[i] * &w;
                let u1 = probe.leaf_img[i].transpose() * &img;
                let v1 = probe.normal_img[i].transpose() * &img;
                if d > 0 {
                    // invariance |v'| > epsilon |u'| with some slack
                    inv_margin = inv_margin.min(v1.norm() - epsilon * u1.norm());
                }
                // g'-growth
                let u0 = probe.leaf[i].transpose() * &w;
                let v0 = probe.normal[i].transpose() * &w;
                let norm0 = (eta * u0.norm_squared() + v0.norm_squared()).sqrt();
                let norm1 = (eta * u1.norm_squared() + v1.norm_squared()).sqrt();
                if norm0 > T::zero() {
                    growth = growth.min(norm1 / norm0);
                }
            }
        }
    }
    (inv_margin, growth)
}

/// Searches for an invariant expanded cone field by bisection on the opening
/// and the leaf weight. Fails after 40 steps.
pub fn build_cone_field<T: Real>(
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    stratum: usize,
) -> Result<ConeField<T>, ExpansionError> {
    let probe = cone_probe(s, frames, f, stratum)?;
    if probe.normal[0].ncols() == 0 {
        return Err(ExpansionError::NoValidN("top-dimensional stratum has no cone".into()));
    }
    let fan = 32;
    let mut steps = 0usize;
    let mut epsilon = T::one();
    let mut eta = T::one();
    loop {
        let (inv, growth) = cone_margins(&probe, epsilon, eta, fan);
        let inv_ok = inv > -real::<T>(1e-12) || probe.leaf[0].ncols() == 0;
        let gr_ok = growth > T::one() + real(1e-9);
        if inv_ok && gr_ok {
            // keep slack under the measured growth so the certificate is an
            // open condition
            let lambda = T::one() + (growth - T::one()) * real(0.9);
            let margin = if probe.leaf[0].ncols() == 0 {
                growth - lambda
            } else {
                inv.min(growth - lambda)
            };
            return Ok(ConeField {
                stratum,
                epsilon,
                eta,
                lambda,
                growth,
                t_max_hint: margin / real(3.0),
                sample_ids: probe.sample_ids,
            });
        }
        // widen or narrow deterministically: invariance failing -> open the
        // cone less (bigger epsilon); growth failing -> downweight the leaf
        if !inv_ok {
            epsilon *= real(2.0);
        } else {
            eta *= real(0.25);
        }
        steps += 1;
        if steps >= 40 {
            return Err(ExpansionError::ConeSearchFailed(steps));
        }
    }
}

/// Re-checks a cone certificate at finite displacement scale `delta`, using
/// the map itself rather than its differential.
pub fn check_cone_invariance<T: Real>(
    cone: &ConeField<T>,
    s: &SampledStratification<T>,
    frames: &NormalFrameField<T>,
    f: &EndomorphismSpec<T>,
    delta: T,
) -> bool {
    let fan = 32;
    for &i in &cone.sample_ids {
        let x = &s.samples[i].point;
        let fx = s.ambient.wrap(&f.eval(x));
        let Some((leaf_img, normal_img)) = stratum_frames_at(s, cone.stratum, &fx) else {
            return false;
        };
        let lm = frame_matrix(&frames.leaf[i], s.dim());
        let nm = frame_matrix(&frames.normal[i], s.dim());
        let d = lm.ncols();
        let q = nm.ncols();
        let leaf_dirs = fan_directions::<T>(d, if d == 0 { 1 } else { fan });
        let normal_dirs = fan_directions::<T>(q, fan);
        let li = frame_matrix(&leaf_img, s.dim());
        let ni = frame_matrix(&normal_img, s.dim());
        for ndir in &normal_dirs {
            let vpart = &nm * ndir;
            let ws: Vec<DVector<T>> = if d == 0 {
                vec![vpart.clone()]
            } else {
                leaf_dirs.iter().map(|ld| &lm * ld + &vpart * cone.epsilon).collect()
            };
            for w in ws {
                let y = s.ambient.translate(x, &(&w * delta));
                let fy = s.ambient.wrap(&f.eval(&y));
                let v = s.ambient.displacement(&fx, &fy);
                let u1 = li.transpose() * &v;
                let v1 = ni.transpose() * &v;
                if d > 0 && v1.norm() < cone.epsilon * u1.norm() - real(1e-12) {
                    return false;
                }
                let u0 = lm.transpose() * &w;
                let v0 = nm.transpose() * &w;
                let norm0 = (cone.eta * u0.norm_squared() + v0.norm_squared()).sqrt() * delta;
                let norm1 = (cone.eta * u1.norm_squared() + v1.norm_squared()).sqrt();
                if norm1 < cone.lambda * norm0 * (T::one() - real(1e-6)) {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// jet transfer
// ---------------------------------------------------------------------------

/// Jet of a graph over the leaf direction: `l_k` are symmetric k-linear maps
/// from the leaf frame into the normal frame, in frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct JetElement<T> {
    pub order: u32,
    /// q x d linear part.
    pub l1: DMatrix<T>,
    /// Order-2 part: one symmetric d x d form per normal coordinate.
    pub l2: Option<Vec<DMatrix<T>>>,
}

impl<T: Real> JetElement<T> {
    pub fn zero(order: u32, leaf_dim: usize, normal_dim: usize) -> Self {
        Self {
            order,
            l1: DMatrix::zeros(normal_dim, leaf_dim),
            l2: if order >= 2 {
                Some(vec![DMatrix::zeros(leaf_dim, leaf_dim); normal_dim])
            } else {
                None
            },
        }
    }

    pub fn slope1(order: u32, s: T) -> Self {
        let mut j = Self::zero(order, 1, 1);
        j.l1[(0, 0)] = s;
        j
    }
}

/// Frames of the reference splitting at a point.
#[derive(Debug, Clone)]
pub struct SplitFrames<T> {
    pub leaf: DMatrix<T>,
    pub normal: DMatrix<T>,
}

impl<T: Real> SplitFrames<T> {
    pub fn new(leaf: Vec<DVector<T>>, normal: Vec<DVector<T>>, n: usize) -> Self {
        Self { leaf: frame_matrix(&leaf, n), normal: frame_matrix(&normal, n) }
    }
}

/// Pulls back the jet of a graph at `f(x)` to a jet at `x`: the preimage of
/// the graph of `l` under `f` is the graph of the returned jet.
pub fn jet_transfer<T: Real>(
    f: &EndomorphismSpec<T>,
    x: &DVector<T>,
    at_x: &SplitFrames<T>,
    at_fx: &SplitFrames<T>,
    l: &JetElement<T>,
) -> Result<JetElement<T>, ExpansionError> {
    let d1 = f.differential(x);
    let a = at_fx.leaf.transpose() * &d1 * &at_x.leaf; // d x d
    let b = at_fx.leaf.transpose() * &d1 * &at_x.normal; // d x q
    let c = at_fx.normal.transpose() * &d1 * &at_x.leaf; // q x d
    let dd = at_fx.normal.transpose() * &d1 * &at_x.normal; // q x q

    // (Tf_v - l o Tf_h) restricted to the normal model
    let denom = &dd - &l.l1 * &b;
    let denom_inv = denom.clone().try_inverse().ok_or(ExpansionError::SingularTransfer)?;
    let l1p = &denom_inv * (&l.l1 * &a - &c);

    let l2p = if l.order >= 2 {
        let l2 = l.l2.as_ref().expect("order-2 jet must carry l2");
        let jet = f.jet(x, 2).map_err(|_| ExpansionError::SingularTransfer)?;
        let hs = jet.d2.expect("order-2 jet");
        let n = x.len();
        let dcols = at_x.leaf.ncols();
        let q = at_x.normal.ncols();
        // tangent lift P = L_x + N_x l1' (n x d)
        let p = &at_x.leaf + &at_x.normal * &l1p;
        // G = leaf coordinates of f1 P
        let g = &a + &b * &l1p;
        // F2[i] = P^T H_i P
        let mut f2: Vec<DMatrix<T>> = Vec::with_capacity(n);
        for h in &hs {
            f2.push(p.transpose() * h * &p);
        }
        // rhs[m] = G^T l2[m] G + sum_i (l1[m,.] Lfx - Nfx[., m])_i F2[i]
        let mut rhs: Vec<DMatrix<T>> = Vec::with_capacity(q);
        for m in 0..q {
            let mut acc = g.transpose() * &l2[m] * &g;
            for i in 0..n {
                let mut w = T::zero();
                // l1 o f2h: sum_k l1[m,k] * (L_fx column k . H-term)
                for k in 0..at_fx.leaf.ncols() {
                    w += l.l1[(m, k)] * at_fx.leaf[(i, k)];
                }
                w -= at_fx.normal[(i, m)];
                acc += &f2[i] * w;
            }
            rhs.push(acc);
        }
        let mut out: Vec<DMatrix<T>> = vec![DMatrix::zeros(dcols, dcols); q];
        for m in 0..q {
            for mm in 0..q {
                let w = denom_inv[(m, mm)];
                out[m] += &rhs[mm] * w;
            }
            // enforce symmetry against roundoff
            let sym = (&out[m] + out[m].transpose()) * real::<T>(0.5);
            out[m] = sym;
        }
        Some(out)
    } else {
        None
    };

    Ok(JetElement { order: l.order, l1: l1p, l2: l2p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AmbientSpace, Axis, MapKind};
    use crate::strata::{normal_frames, Chart, Code, Grid, LeafShape, Stratum};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// single stratum: the horizontal axis through the origin of R^2 under a
    /// diagonal linear map
    fn linear_setup(rates: [f64; 2]) -> (SampledStratification<f64>, EndomorphismSpec<f64>) {
        let ambient = AmbientSpace::euclidean(2);
        let stratum = Stratum {
            id: 0,
            dim: 1,
            charts: vec![Chart {
                leaf: LeafShape::AxisAligned { axes: vec![0] },
                grids: vec![Grid::singleton(0.0)],
                trans_axes: vec![1],
                codes: vec![Code { label: "zero".into(), coords: nalgebra::dvector![0.0] }],
            }],
            tube_width: 0.5,
        };
        let s = SampledStratification::assemble(ambient.clone(), vec![stratum], vec![]);
        let f = EndomorphismSpec::new(ambient, MapKind::Diagonal(rates.to_vec()));
        (s, f)
    }

    fn doubling_affine_setup() -> (SampledStratification<f64>, EndomorphismSpec<f64>) {
        let tau = std::f64::consts::TAU;
        let ambient = AmbientSpace { axes: vec![Axis::Circle { period: tau }, Axis::Line] };
        let stratum = Stratum {
            id: 0,
            dim: 1,
            charts: vec![Chart {
                leaf: LeafShape::AxisAligned { axes: vec![0] },
                grids: vec![Grid::periodic(tau, 256)],
                trans_axes: vec![1],
                codes: vec![Code { label: "zero".into(), coords: nalgebra::dvector![0.0] }],
            }],
            tube_width: 0.5,
        };
        let s = SampledStratification::assemble(ambient.clone(), vec![stratum], vec![]);
        let f = EndomorphismSpec::new(ambient, MapKind::Diagonal(vec![2.0, 4.0]));
        (s, f)
    }

    #[test]
    fn expansion_fails_when_leaf_dominates() {
        let (s, f) = linear_setup([3.0, 2.0]);
        let rep = check_normal_expansion(&s, &f, 0, 1, 20).unwrap();
        assert!(!rep.pass, "2^n can never dominate 1 + 3^n");
    }

    #[test]
    fn expansion_passes_doubling_affine() {
        let (s, f) = doubling_affine_setup();
        let rep = check_normal_expansion(&s, &f, 0, 1, 24).unwrap();
        assert!(rep.pass);
        // 4^n >= C 2^n (1 + 2^n): lambda up to 2, C = 1/2
        assert!(rep.lambda > 1.9 && rep.lambda < 2.05, "lambda {}", rep.lambda);
        assert!(rep.c_min >= 0.49, "C_min {}", rep.c_min);
    }

    #[test]
    fn expansion_monotone_in_horizon() {
        let (s, f) = linear_setup([3.0, 2.0]);
        for n in [4, 8, 16] {
            assert!(!check_normal_expansion(&s, &f, 0, 1, n).unwrap().pass);
        }
        let (s, f) = doubling_affine_setup();
        for n in [4, 8, 16] {
            assert!(check_normal_expansion(&s, &f, 0, 1, n).unwrap().pass);
        }
    }

    #[test]
    fn adapted_metric_diag_2_4() {
        let (s, f) = linear_setup([2.0, 4.0]);
        let frames = normal_frames(&s).unwrap();
        let m = build_adapted_metric(&s, &frames, &f, 0, 1).unwrap();
        // max(1, 2) = 2 < 0.81 * 4 already holds at N = 1, a = 0.9
        assert_eq!(m.big_n, 1);
        assert_abs_diff_eq!(m.a, 0.9, epsilon = 1e-12);
        // r(x) = sqrt((2/a) * (a 4)) = sqrt(8)
        for &r in &m.r_of {
            assert_relative_eq!(r, 8.0_f64.sqrt(), epsilon = 1e-12);
        }
        let v = verify_adapted(&m, &s, &frames, &f).unwrap();
        assert!(v.pass);
        assert!(v.worst_margin > 0.0);
        assert!(v.min_quotient_margin > 0.0);
    }

    #[test]
    fn adapted_metric_flat_leaf_close_to_euclidean() {
        // leaf rate 1, normal rate 4: the Euclidean metric is already adapted
        let (s, f) = linear_setup([1.0, 4.0]);
        let frames = normal_frames(&s).unwrap();
        let m = build_adapted_metric(&s, &frames, &f, 0, 1).unwrap();
        let v = verify_adapted(&m, &s, &frames, &f).unwrap();
        assert!(v.pass);
        // bounded distortion against the Euclidean form
        for i in 0..m.sample_ids.len() {
            let gl = m.leaf_form[i][(0, 0)];
            let gn = m.normal_form[i][(0, 0)];
            let cond = gl.max(gn) / gl.min(gn);
            assert!(cond < 10.0, "distortion {cond}");
        }
    }

    #[test]
    fn adapted_metric_sharpness_probe() {
        let (s, f) = linear_setup([2.0, 4.0]);
        let frames = normal_frames(&s).unwrap();
        // dropping the truncation by one must break the r(x)-growth margin
        let m = build_adapted_metric_with(&s, &frames, &f, 0, 1, Some(-1)).unwrap();
        let v = verify_adapted(&m, &s, &frames, &f);
        match v {
            Ok(v) => assert!(v.min_quotient_margin <= 0.0, "margin {}", v.min_quotient_margin),
            Err(_) => {} // degenerate form also counts as broken
        }
    }

    #[test]
    fn euclidean_metric_fails_on_reversed_rates() {
        // a hand-built "metric" with identity forms on diag(3,2): the
        // one-step inequality fails
        let (s, f) = linear_setup([3.0, 2.0]);
        let frames = normal_frames(&s).unwrap();
        let ids: Vec<usize> = (0..s.samples.len()).collect();
        let m = AdaptedMetric {
            stratum: 0,
            r: 1,
            a: 0.9,
            big_n: 1,
            m_trunc: 0,
            leaf_cut: 0,
            sample_ids: ids.clone(),
            r_of: vec![1.5; ids.len()],
            leaf_form: vec![nalgebra::dmatrix![1.0]; ids.len()],
            normal_form: vec![nalgebra::dmatrix![1.0]; ids.len()],
        };
        let v = verify_adapted(&m, &s, &frames, &f).unwrap();
        assert!(!v.pass);
        // and it passes on diag(1,4) with margin 1 - 1/4
        let (s, f) = linear_setup([1.0, 4.0]);
        let frames = normal_frames(&s).unwrap();
        let m = AdaptedMetric { sample_ids: (0..s.samples.len()).collect(), ..m };
        let v = verify_adapted(&m, &s, &frames, &f).unwrap();
        assert!(v.pass);
        assert_relative_eq!(v.worst_ratio, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn cone_certificate_diag_2_4() {
        let (s, f) = linear_setup([2.0, 4.0]);
        let frames = normal_frames(&s).unwrap();
        let cone = build_cone_field(&s, &frames, &f, 0).unwrap();
        assert_abs_diff_eq!(cone.epsilon, 1.0);
        // boundary fan of |v| = |u|: image (2u, 4v) grows by sqrt(10)
        assert!(cone.growth >= 2.0 - 1e-12, "growth {}", cone.growth);
        assert_relative_eq!(cone.growth, 10.0_f64.sqrt(), epsilon = 1e-12);
        assert!(check_cone_invariance(&cone, &s, &frames, &f, 0.01));
    }

    #[test]
    fn cone_search_fails_diag_3_2() {
        let (s, f) = linear_setup([3.0, 2.0]);
        let frames = normal_frames(&s).unwrap();
        match build_cone_field(&s, &frames, &f, 0) {
            Err(ExpansionError::ConeSearchFailed(steps)) => assert!(steps >= 40),
            other => panic!("expected ConeSearchFailed, got {other:?}"),
        }
    }

    #[test]
    fn cone_invariance_open_under_perturbation() {
        let (s, f) = doubling_affine_setup();
        let frames = normal_frames(&s).unwrap();
        let cone = build_cone_field(&s, &frames, &f, 0).unwrap();
        let g = f.perturbed(crate::dynamics::PerturbationSpec {
            magnitude: 0.01,
            profile: crate::dynamics::Profile::Cosine { axis: 0, freq: 1.0 },
            direction: nalgebra::dvector![0.0, 1.0],
        });
        assert!(check_cone_invariance(&cone, &s, &frames, &g, 0.01));
    }

    fn split_frames_axis(n: usize, leaf_axis: usize) -> SplitFrames<f64> {
        let mut leaf = Vec::new();
        let mut normal = Vec::new();
        for a in 0..n {
            let mut v = DVector::zeros(n);
            v[a] = 1.0;
            if a == leaf_axis {
                leaf.push(v);
            } else {
                normal.push(v);
            }
        }
        SplitFrames::new(leaf, normal, n)
    }

    #[test]
    fn jet_transfer_scalar_slope() {
        let f = EndomorphismSpec::new(AmbientSpace::euclidean(2), MapKind::Diagonal(vec![2.0, 4.0]));
        let frames = split_frames_axis(2, 0);
        let x = nalgebra::dvector![0.0, 0.0];
        for s in [-0.1, 0.0, 0.07, 0.3] {
            let l = JetElement::slope1(1, s);
            let out = jet_transfer(&f, &x, &frames, &frames, &l).unwrap();
            assert_relative_eq!(out.l1[(0, 0)], s / 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn jet_transfer_lipschitz_half() {
        let f = EndomorphismSpec::new(AmbientSpace::euclidean(2), MapKind::Diagonal(vec![2.0, 4.0]));
        let frames = split_frames_axis(2, 0);
        let x = nalgebra::dvector![0.0, 0.0];
        let mut max_ratio = 0.0_f64;
        let slopes = [-0.1, -0.05, 0.0, 0.02, 0.08, 0.1];
        for (i, &a) in slopes.iter().enumerate() {
            for &b in &slopes[i + 1..] {
                let la = jet_transfer(&f, &x, &frames, &frames, &JetElement::slope1(1, a)).unwrap();
                let lb = jet_transfer(&f, &x, &frames, &frames, &JetElement::slope1(1, b)).unwrap();
                max_ratio = max_ratio.max((la.l1[(0, 0)] - lb.l1[(0, 0)]).abs() / (a - b).abs());
            }
        }
        assert_relative_eq!(max_ratio, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn jet_transfer_zero_fixed_on_invariant_leaf() {
        // unperturbed product map: the zero section is exactly invariant
        let f = EndomorphismSpec::new(
            AmbientSpace::euclidean(2),
            MapKind::PolyProduct(vec![
                crate::dynamics::Poly::quadratic(-1.0),
                crate::dynamics::Poly::new(vec![0.0, 4.0]),
            ]),
        );
        let frames = split_frames_axis(2, 0);
        let beta = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let x = nalgebra::dvector![beta, 0.0];
        let l = JetElement::zero(2, 1, 1);
        let out = jet_transfer(&f, &x, &frames, &frames, &l).unwrap();
        assert_abs_diff_eq!(out.l1[(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(out.l2.unwrap()[0][(0, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn jet_transfer_quadratic_against_finite_differences() {
        // curved map with a genuinely quadratic graph: pull back l = 0 and
        // compare with the quadratic fit of the actual preimage manifold
        let f = EndomorphismSpec::new(
            AmbientSpace::euclidean(2),
            MapKind::PolyProduct(vec![
                crate::dynamics::Poly::new(vec![0.0, 2.0, 0.3]), // 2x + 0.3 x^2
                crate::dynamics::Poly::new(vec![0.0, 4.0, 0.9]), // 4y + 0.9 y^2
            ]),
        );
        let frames = split_frames_axis(2, 0);
        let x0 = nalgebra::dvector![0.0, 0.0];
        // graph at f(x0) = 0: v = s u + q u^2
        let (slope, quad) = (0.05, 0.4);
        let mut l = JetElement::slope1(2, slope);
        l.l2 = Some(vec![nalgebra::dmatrix![quad]]);
        let out = jet_transfer(&f, &x0, &frames, &frames, &l).unwrap();
        // hand expansion of 4 v' + 0.9 v'^2 = s(2u + 0.3 u^2) + q(2u + 0.3 u^2)^2:
        // v' = (s/2) u + ((0.3 s + 4 q - 0.9 s^2 / 4) / 4) u^2 + O(u^3)
        let a1 = slope / 2.0;
        let a2 = (0.3 * slope + 4.0 * quad - 0.9 * slope * slope / 4.0) / 4.0;
        assert_relative_eq!(out.l1[(0, 0)], a1, epsilon = 1e-13);
        assert_relative_eq!(out.l2.as_ref().unwrap()[0][(0, 0)], a2, epsilon = 1e-13);
        // cross-check against the solved preimage graph
        let solve_v = |u: f64| -> f64 {
            let mut v = 0.0_f64;
            for _ in 0..100 {
                let fu = 2.0 * u + 0.3 * u * u;
                let fv = 4.0 * v + 0.9 * v * v;
                let target = slope * fu + quad * fu * fu;
                let resid = fv - target;
                v -= resid / (4.0 + 1.8 * v);
                if resid.abs() < 1e-15 {
                    break;
                }
            }
            v
        };
        let h = 1e-4;
        let d1 = (solve_v(h) - solve_v(-h)) / (2.0 * h);
        let d2 = (solve_v(h) - 2.0 * solve_v(0.0) + solve_v(-h)) / (h * h);
        assert_relative_eq!(out.l1[(0, 0)], d1, epsilon = 1e-6);
        assert_relative_eq!(out.l2.unwrap()[0][(0, 0)], 0.5 * d2, epsilon = 1e-4);
    }
}
