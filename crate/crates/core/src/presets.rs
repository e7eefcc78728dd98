//! The concrete systems the crate ships: quadratic Cantor products, the
//! Viana cylinder, the stratified square, skew test maps, and the
//! non-persistent shear demo.

use nalgebra::DVector;

use crate::dynamics::{AmbientSpace, Axis, EndomorphismSpec, MapKind, PerturbationSpec, Poly, Profile};
use crate::num::{real, Real};
use crate::strata::{
    build_product_stratification, julia_cantor, Chart, Code, Grid, LeafShape, SampledStratification,
    StrataError, Stratum,
};

/// A ready-to-run system: stratification, base dynamics, perturbed dynamics.
pub struct Instance<T> {
    pub name: &'static str,
    pub strat: SampledStratification<T>,
    pub f: EndomorphismSpec<T>,
    pub fp: EndomorphismSpec<T>,
    pub t: T,
    /// Strata carrying nontrivial certificates (positive codimension).
    pub certificate_strata: Vec<usize>,
    pub expansion_order: u32,
    pub expansion_horizon: usize,
    pub tol: T,
}

fn tau<T: Real>() -> T {
    T::two_pi()
}

// ---------------------------------------------------------------------------
// skew products over the circle
// ---------------------------------------------------------------------------

fn circle_section_stratification<T: Real>(grid: usize, tube_width: T) -> SampledStratification<T> {
    let ambient = AmbientSpace { axes: vec![Axis::Circle { period: tau::<T>() }, Axis::Line] };
    let stratum = Stratum {
        id: 0,
        dim: 1,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0] },
            grids: vec![Grid::periodic(tau::<T>(), grid)],
            trans_axes: vec![1],
            codes: vec![Code { label: "section".into(), coords: nalgebra::dvector![T::zero()] }],
        }],
        tube_width,
    };
    SampledStratification::assemble(ambient, vec![stratum], vec![])
}

/// `(theta, y) -> (2 theta, 4 y + t cos theta)`: the invariant graph is the
/// lacunary series `-t sum 4^-(k+1) cos(2^k theta)`.
pub fn doubling_affine<T: Real>(t: T, grid: usize) -> Instance<T> {
    let strat = circle_section_stratification(grid, real(0.5));
    let f = EndomorphismSpec::new(strat.ambient.clone(), MapKind::Diagonal(vec![real(2.0), real(4.0)]));
    let fp = f.perturbed(PerturbationSpec {
        magnitude: t,
        profile: Profile::Cosine { axis: 0, freq: T::one() },
        direction: nalgebra::dvector![T::zero(), T::one()],
    });
    Instance {
        name: "doubling-affine",
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0],
        expansion_order: 1,
        expansion_horizon: 24,
        tol: real(1e-12),
    }
}

/// Truncated series for the doubling-affine invariant graph.
pub fn doubling_affine_sigma<T: Real>(t: T, theta: T, terms: usize) -> T {
    let mut acc = T::zero();
    let mut weight = real::<T>(0.25);
    let mut angle = theta;
    for _ in 0..terms {
        acc += weight * angle.cos();
        weight *= real(0.25);
        angle *= real(2.0);
    }
    -t * acc
}

/// Slope field of the doubling-affine invariant graph.
pub fn doubling_affine_sigma_slope<T: Real>(t: T, theta: T, terms: usize) -> T {
    let mut acc = T::zero();
    let mut weight = real::<T>(0.25);
    let mut freq = T::one();
    for _ in 0..terms {
        acc += weight * freq * (freq * theta).sin();
        weight *= real(0.25);
        freq *= real(2.0);
    }
    t * acc
}

/// `(theta, y) -> (theta, 3 y + t sin theta)`: fixed graph `-t sin(theta)/2`.
pub fn flat_leaf<T: Real>(t: T, grid: usize) -> Instance<T> {
    let strat = circle_section_stratification(grid, real(0.5));
    let f = EndomorphismSpec::new(strat.ambient.clone(), MapKind::Diagonal(vec![T::one(), real(3.0)]));
    let fp = f.perturbed(PerturbationSpec {
        magnitude: t,
        profile: Profile::Sine { axis: 0, freq: T::one() },
        direction: nalgebra::dvector![T::zero(), T::one()],
    });
    Instance {
        name: "flat-leaf",
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0],
        expansion_order: 1,
        expansion_horizon: 24,
        tol: real(1e-12),
    }
}

// ---------------------------------------------------------------------------
// quadratic Cantor factors and their products
// ---------------------------------------------------------------------------

/// Stratification of the line for `x -> x^2 + c`: the expanding set as a
/// 0-dim stratum (forward-closed samples) and the bounded complement
/// intervals as 1-dim leaves.
pub fn quadratic_factor<T: Real>(
    c: T,
    depth: u32,
    basin_seed: &[(T, T)],
    basin_period: u32,
    gap_density: T,
    tube_width: T,
) -> Result<SampledStratification<T>, StrataError> {
    let cantor = julia_cantor(c, depth, basin_seed, basin_period)?;
    let ambient = AmbientSpace::euclidean(1);

    let codes = cantor
        .kpoints
        .iter()
        .map(|&x| Code {
            label: cantor.code_of(x).unwrap_or("?").to_string(),
            coords: nalgebra::dvector![x],
        })
        .collect();
    let zero_dim = Stratum {
        id: 0,
        dim: 0,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![] },
            grids: vec![],
            trans_axes: vec![0],
            codes,
        }],
        tube_width,
    };

    let mut gap_charts = Vec::new();
    for (i, &(lo, hi)) in cantor.gaps().iter().enumerate() {
        let len = hi - lo;
        let n = (crate::num::to_f64(len * gap_density).ceil() as usize).max(2);
        // sample the open interval: stay half a step away from the ends
        let margin = len / real(2.0 * (n as f64));
        gap_charts.push(Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0] },
            grids: vec![Grid::uniform(lo + margin, hi - margin, n)],
            trans_axes: vec![],
            codes: vec![Code { label: format!("gap{i}"), coords: DVector::zeros(0) }],
        });
    }
    let gaps = Stratum { id: 1, dim: 1, charts: gap_charts, tube_width: tube_width * real(0.5) };

    let mut s = SampledStratification::assemble(ambient, vec![zero_dim, gaps], vec![(0, 1)]);
    let widest = cantor
        .cylinders
        .iter()
        .map(|cyl| cyl.hi - cyl.lo)
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    s.closure_res_hint = widest;
    Ok(s)
}

/// The quadratic-product preset: `(x, y) -> (x^2 + c, y^2 + c)` over the
/// product of two expanding-set stratifications, with an edge bump.
pub fn quad_product<T: Real>(t: T, depth: u32, gap_density: T) -> Instance<T> {
    let c = real::<T>(-1.0);
    let seed = [(real::<T>(-0.5), real::<T>(0.5))];
    let factor = quadratic_factor(c, depth, &seed, 2, gap_density, real(0.24))
        .expect("the c = -1 basin seed is forward invariant");
    let mut strat = build_product_stratification(&factor, &factor);
    strat.closure_res_hint = factor.closure_res_hint;
    let f = EndomorphismSpec::new(
        strat.ambient.clone(),
        MapKind::PolyProduct(vec![Poly::quadratic(c), Poly::quadratic(c)]),
    );
    let beta = factor_beta(c);
    let fp = f.perturbed(PerturbationSpec::bump_box(
        t,
        nalgebra::dvector![beta, beta],
        nalgebra::dvector![real(0.3), real(0.3)],
        nalgebra::dvector![T::one(), T::zero()],
    ));
    Instance {
        name: "quad-product",
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0, 1, 2],
        expansion_order: 1,
        expansion_horizon: 20,
        tol: real(1e-12),
    }
}

fn factor_beta<T: Real>(c: T) -> T {
    (T::one() + (T::one() - real::<T>(4.0) * c).sqrt()) / real(2.0)
}

/// One quadratic factor with a bump perturbation on the first axis; the
/// building block of the separable product cross-check.
pub fn quad_factor_instance<T: Real>(t: T, depth: u32, gap_density: T) -> Instance<T> {
    let c = real::<T>(-1.0);
    let seed = [(real::<T>(-0.5), real::<T>(0.5))];
    let strat = quadratic_factor(c, depth, &seed, 2, gap_density, real(0.24))
        .expect("the c = -1 basin seed is forward invariant");
    let f = EndomorphismSpec::new(strat.ambient.clone(), MapKind::PolyProduct(vec![Poly::quadratic(c)]));
    let beta = factor_beta(c);
    let fp = f.perturbed(PerturbationSpec::bump_box(
        t,
        nalgebra::dvector![beta],
        nalgebra::dvector![real(0.3)],
        nalgebra::dvector![T::one()],
    ));
    Instance {
        name: "quad-factor",
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0],
        expansion_order: 1,
        expansion_horizon: 20,
        tol: real(1e-12),
    }
}

// ---------------------------------------------------------------------------
// the stratified square
// ---------------------------------------------------------------------------

/// `[-1, 1]` with the endpoint pair and the open interior.
pub fn interval_factor<T: Real>(density: usize, tube_width: T) -> SampledStratification<T> {
    let ambient = AmbientSpace::euclidean(1);
    let endpoints = Stratum {
        id: 0,
        dim: 0,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![] },
            grids: vec![],
            trans_axes: vec![0],
            codes: vec![
                Code { label: "-1".into(), coords: nalgebra::dvector![-T::one()] },
                Code { label: "+1".into(), coords: nalgebra::dvector![T::one()] },
            ],
        }],
        tube_width,
    };
    let n = density.max(8);
    let margin = real::<T>(2.0) / real(2.0 * n as f64);
    let interior = Stratum {
        id: 1,
        dim: 1,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0] },
            grids: vec![Grid::uniform(-T::one() + margin, T::one() - margin, n)],
            trans_axes: vec![],
            codes: vec![Code { label: String::new(), coords: DVector::zeros(0) }],
        }],
        tube_width: tube_width * real(0.5),
    };
    SampledStratification::assemble(ambient, vec![endpoints, interior], vec![(0, 1)])
}

/// `(x, y) -> (x^2, y^2)` on the square: vertices, edges, interior.
pub fn square_corners<T: Real>(t: T, density: usize) -> Instance<T> {
    let factor = interval_factor::<T>(density, real(0.3));
    let strat = build_product_stratification(&factor, &factor);
    let f = EndomorphismSpec::new(
        strat.ambient.clone(),
        MapKind::PolyProduct(vec![Poly::quadratic(T::zero()), Poly::quadratic(T::zero())]),
    );
    let fp = f.perturbed(PerturbationSpec::bump_box(
        t,
        nalgebra::dvector![T::one(), T::one()],
        nalgebra::dvector![real(0.4), real(0.4)],
        nalgebra::dvector![T::one(), T::zero()],
    ));
    Instance {
        name: "square-corners",
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0, 1, 2],
        expansion_order: 1,
        expansion_horizon: 20,
        tol: real(1e-12),
    }
}

// ---------------------------------------------------------------------------
// the Viana cylinder
// ---------------------------------------------------------------------------

/// The closed unit disk with the circle as 0-dim stratum and the open disk
/// as a full-dimensional stratum (polar chart).
fn disk_factor<T: Real>(circle_grid: usize, r_grid: usize, tube_width: T) -> SampledStratification<T> {
    let ambient = AmbientSpace::euclidean(2);
    let codes = (0..circle_grid)
        .map(|k| {
            let ang = tau::<T>() * real(k as f64) / real(circle_grid as f64);
            Code { label: format!("a{k}"), coords: nalgebra::dvector![ang.cos(), ang.sin()] }
        })
        .collect();
    let rim = Stratum {
        id: 0,
        dim: 0,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![] },
            grids: vec![],
            trans_axes: vec![0, 1],
            codes,
        }],
        tube_width,
    };
    let disk = Stratum {
        id: 1,
        dim: 2,
        charts: vec![Chart {
            leaf: LeafShape::PolarDisk { x_axis: 0, y_axis: 1, extra: vec![] },
            grids: vec![
                Grid::uniform(real(0.04), real(0.94), r_grid),
                Grid::periodic(tau::<T>(), circle_grid / 2),
            ],
            trans_axes: vec![],
            codes: vec![Code { label: "disk".into(), coords: DVector::zeros(0) }],
        }],
        tube_width: tube_width * real(0.5),
    };
    SampledStratification::assemble(ambient, vec![rim, disk], vec![(0, 1)])
}

/// Interval `[-beta, beta]` of `h -> h^2 + c` with expanding endpoints.
fn expanding_interval_factor<T: Real>(c: T, density: usize, tube_width: T) -> SampledStratification<T> {
    let beta = factor_beta(c);
    let ambient = AmbientSpace::euclidean(1);
    let endpoints = Stratum {
        id: 0,
        dim: 0,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![] },
            grids: vec![],
            trans_axes: vec![0],
            codes: vec![
                Code { label: "lo".into(), coords: nalgebra::dvector![-beta] },
                Code { label: "hi".into(), coords: nalgebra::dvector![beta] },
            ],
        }],
        tube_width,
    };
    let n = density.max(8);
    let margin = beta * real::<T>(2.0) / real(2.0 * n as f64);
    let interior = Stratum {
        id: 1,
        dim: 1,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0] },
            grids: vec![Grid::uniform(-beta + margin, beta - margin, n)],
            trans_axes: vec![],
            codes: vec![Code { label: String::new(), coords: DVector::zeros(0) }],
        }],
        tube_width: tube_width * real(0.5),
    };
    SampledStratification::assemble(ambient, vec![endpoints, interior], vec![(0, 1)])
}

/// The Viana cylinder `(z, h) -> (z^p, h^2 + c)` on the filled cylinder,
/// stratified by the rim circle, the vertical boundary lines, the
/// horizontal caps, and the interior.
pub fn viana<T: Real>(power: u32, t: T, circle_grid: usize, h_density: usize) -> Instance<T> {
    let c = real::<T>(-1.0);
    let disk = disk_factor::<T>(circle_grid, 12, real(0.2));
    let interval = expanding_interval_factor::<T>(c, h_density, real(0.2));
    let strat = build_product_stratification(&disk, &interval);
    let f = EndomorphismSpec::new(strat.ambient.clone(), MapKind::ComplexPowerQuadratic { power, c });
    let fp = f.perturbed(PerturbationSpec::bump_box(
        t,
        nalgebra::dvector![T::one(), T::zero(), T::zero()],
        nalgebra::dvector![real(0.25), real(0.25), real(0.6)],
        nalgebra::dvector![T::one(), T::zero(), T::zero()],
    ));
    Instance {
        name: if power == 4 { "viana-z4" } else { "viana-z2" },
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0, 1, 2],
        expansion_order: 1,
        expansion_horizon: 20,
        tol: real(1e-12),
    }
}

// ---------------------------------------------------------------------------
// the non-persistent shear demo
// ---------------------------------------------------------------------------

/// `(x, y, z) -> (x + x^3 - t rho(x) x, 2y, 2z)` near the neutral axis; the
/// cubic term is cut off smoothly beyond |x| = 0.7 so the far field is
/// trapped. The axis is 0-normally but not 1-normally expanded at the
/// origin, and for t > 0 the perturbed axis dynamics traps an interval, so
/// the engine is expected to blow the fiber cap or stall.
pub fn cexp_demo<T: Real>(t: T, density: usize) -> Instance<T> {
    let ambient = AmbientSpace::euclidean(3);
    let axis = Stratum {
        id: 0,
        dim: 1,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0] },
            grids: vec![Grid::uniform(real(-1.2), real(1.2), density.max(64))],
            trans_axes: vec![1, 2],
            codes: vec![Code { label: "axis".into(), coords: nalgebra::dvector![T::zero(), T::zero()] }],
        }],
        tube_width: real(0.12),
    };
    let n = 9;
    let body = Stratum {
        id: 1,
        dim: 3,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0, 1, 2] },
            grids: vec![
                Grid::uniform(real(-1.2), real(1.2), 2 * n + 1),
                Grid::uniform(real(-0.9), real(0.9), n),
                Grid::uniform(real(-0.9), real(0.9), n),
            ],
            trans_axes: vec![],
            codes: vec![Code { label: "body".into(), coords: DVector::zeros(0) }],
        }],
        tube_width: real(0.3),
    };
    let strat = SampledStratification::assemble(ambient.clone(), vec![axis, body], vec![(0, 1)]);
    let f = EndomorphismSpec::new(ambient, MapKind::CubicShear { t: T::zero() });
    let fp = EndomorphismSpec::new(strat.ambient.clone(), MapKind::CubicShear { t });
    Instance {
        name: "cexp-demo",
        strat,
        f,
        fp,
        t,
        certificate_strata: vec![0],
        expansion_order: 1,
        expansion_horizon: 16,
        tol: real(1e-10),
    }
}

/// Diagonal linear test pair on the plane: leaf along the first axis, one
/// forward-closed sample at the origin.
pub fn linear_diag<T: Real>(rates: [f64; 2]) -> (SampledStratification<T>, EndomorphismSpec<T>) {
    let ambient = AmbientSpace::euclidean(2);
    let stratum = Stratum {
        id: 0,
        dim: 1,
        charts: vec![Chart {
            leaf: LeafShape::AxisAligned { axes: vec![0] },
            grids: vec![Grid::singleton(T::zero())],
            trans_axes: vec![1],
            codes: vec![Code { label: "origin".into(), coords: nalgebra::dvector![T::zero()] }],
        }],
        tube_width: real(0.5),
    };
    let s = SampledStratification::assemble(ambient.clone(), vec![stratum], vec![]);
    let f = EndomorphismSpec::new(ambient, MapKind::Diagonal(vec![real(rates[0]), real(rates[1])]));
    (s, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strata::check_frontier_and_coherence;

    #[test]
    fn quad_product_has_four_strata() {
        let inst = quad_product::<f64>(0.0, 6, 32.0);
        assert_eq!(inst.strat.strata.len(), 4);
        let dims: Vec<usize> = inst.strat.strata.iter().map(|s| s.dim).collect();
        assert_eq!(dims, vec![0, 1, 1, 2]);
        let rep = check_frontier_and_coherence(&inst.strat);
        assert!(rep.all_ok(), "{:?}", rep.violations);
    }

    #[test]
    fn viana_strata_match_the_cylinder() {
        let inst = viana::<f64>(4, 0.0, 64, 24);
        let dims: Vec<usize> = inst.strat.strata.iter().map(|s| s.dim).collect();
        assert_eq!(dims, vec![0, 1, 2, 3]);
        // X0 = rim x endpoints, X1 = rim x interior with vertical leaves
        assert_eq!(inst.strat.strata[0].charts[0].codes.len(), 64 * 2);
        let x1 = &inst.strat.strata[1].charts[0];
        assert_eq!(x1.leaf_dim(), 1);
        assert_eq!(x1.trans_axes, vec![0, 1]);
    }

    #[test]
    fn square_corners_has_nine_samples_of_dim_zero() {
        let inst = square_corners::<f64>(0.0, 16);
        assert_eq!(inst.strat.strata[0].charts[0].codes.len(), 4);
        let rep = check_frontier_and_coherence(&inst.strat);
        assert!(rep.all_ok(), "{:?}", rep.violations);
    }

    #[test]
    fn sigma_series_value_at_zero() {
        let v = doubling_affine_sigma(0.1, 0.0, 30);
        approx::assert_abs_diff_eq!(v, -1.0 / 30.0, epsilon = 1e-12);
    }

    #[test]
    fn quad_product_samples_forward_closed_on_cantor_grid() {
        let inst = quad_product::<f64>(0.0, 6, 32.0);
        for smp in &inst.strat.samples {
            if smp.stratum != 0 {
                continue;
            }
            let img = inst.f.eval(&smp.point);
            let near = inst
                .strat
                .samples
                .iter()
                .filter(|o| o.stratum == 0)
                .map(|o| (&o.point - &img).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(near < 1e-9, "image of a Cantor grid point must be a grid point");
        }
    }

    #[test]
    fn viana_rim_grid_forward_closed() {
        let inst = viana::<f64>(4, 0.0, 64, 24);
        for smp in &inst.strat.samples {
            if smp.stratum != 0 {
                continue;
            }
            let img = inst.strat.ambient.wrap(&inst.f.eval(&smp.point));
            let near = inst
                .strat
                .samples
                .iter()
                .filter(|o| o.stratum == 0)
                .map(|o| inst.strat.ambient.distance(&o.point, &img))
                .fold(f64::INFINITY, f64::min);
            assert!(near < 1e-9, "rim images must stay on the rim grid (got {near})");
        }
    }
}
