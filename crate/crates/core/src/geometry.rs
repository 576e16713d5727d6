//! Geometry over binary masks: connected components, boundaries, direct
//! least-squares ellipse fitting, ellipse circumference and the angle of
//! progression.
//!
//! Pixel `(x, y)` is the unit square centred on integer coordinates `(x, y)`;
//! all point sets below are expressed in that frame.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BiometryValue, DomainError, Mask, Measure, Unit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("need at least 6 points for an ellipse fit, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("pixel spacing must be positive, got {0}")]
    InvalidSpacing(f64),
    #[error("symphysis and head masks overlap by {overlap} pixels ({fraction:.3} of the smaller mask)")]
    Overlap { overlap: u64, fraction: f64 },
    #[error("mask dimensions differ")]
    DimensionMismatch,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Point = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Direction of the major axis in radians, within `[0, π)`.
    pub rotation: f64,
}

impl EllipseParams {
    pub fn new(center: (f64, f64), semi_major: f64, semi_minor: f64, rotation: f64) -> Self {
        Self {
            center,
            semi_major,
            semi_minor,
            rotation: rotation.rem_euclid(PI),
        }
    }

    /// Point at parametric angle `t`.
    pub fn point_at(&self, t: f64) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (self.semi_major * t.cos(), self.semi_minor * t.sin());
        (self.center.0 + c * x - s * y, self.center.1 + s * x + c * y)
    }

    /// `((x'/a)² + (y'/b)²)` in the ellipse's own frame; ≤ 1 means inside.
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub ellipse: EllipseParams,
    /// RMS algebraic distance, measured in the fit's normalized frame with
    /// the conic scaled so that `4AC − B² = 1`. Dimensionless.
    pub residual: f64,
}

/// The largest 4-connected foreground component. Ties go to the component
/// reached first in row-major order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let raster = mask.to_raster();
    let mut label = vec![0u32; raster.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..raster.len() {
        if !raster[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if raster[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    match best {
        None => mask.clone(),
        Some((keep, _)) => {
            let r: Vec<bool> = label.iter().map(|&l| l == keep).collect();
            Mask::from_raster(mask.width(), mask.height(), &r).expect("same dims")
        }
    }
}

/// Foreground pixels with a 4-neighbour that is background or off-image,
/// in row-major order.
pub fn boundary_pixels(mask: &Mask) -> Vec<(u32, u32)> {
    let (w, h) = (mask.width(), mask.height());
    let raster = mask.to_raster();
    let on = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && raster[(y as usize) * w as usize + x as usize]
    };
    mask.pixels()
        .filter(|&(x, y)| {
            let (x, y) = (x as i64, y as i64);
            !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1))
        })
        .collect()
}

pub fn boundary_points(mask: &Mask) -> Result<Vec<Point>, GeometryError> {
    if mask.is_empty() {
        return Err(GeometryError::EmptyMask);
    }
    Ok(boundary_pixels(mask)
        .into_iter()
        .map(|(x, y)| (x as f64, y as f64))
        .collect())
}

/// Midpoints of the pixel edges separating foreground from background (or
/// from outside the image), i.e. the raster's own outline. Row-major by the
/// owning foreground pixel; per pixel ordered left, right, up, down.
pub fn edge_midpoints(mask: &Mask) -> Result<Vec<Point>, GeometryError> {
    if mask.is_empty() {
        return Err(GeometryError::EmptyMask);
    }
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let raster = mask.to_raster();
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && raster[(y * w + x) as usize];
    let mut out = Vec::new();
    for (x, y) in mask.pixels() {
        let (xi, yi) = (x as i64, y as i64);
        let (xf, yf) = (x as f64, y as f64);
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            if !on(xi + dx, yi + dy) {
                out.push((xf + 0.5 * dx as f64, yf + 0.5 * dy as f64));
            }
        }
    }
    Ok(out)
}

/// Direct least-squares ellipse fit.
///
/// Minimizes the algebraic distance subject to `4AC − B² = 1`, which admits
/// only ellipses. Uses the numerically stable block formulation: the linear
/// terms are eliminated through the scatter-matrix blocks, leaving a 3×3
/// generalized eigenproblem for the quadratic terms. Points are centred and
/// scaled beforehand.
pub fn fit_ellipse(points: &[Point]) -> Result<EllipseFit, GeometryError> {
    let n = points.len();
    if n < 6 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;

    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let (lo, hi) = sym2_eigenvalues(sxx / nf, sxy / nf, syy / nf);
    if !(hi > 0.0) || lo <= hi * 1e-12 {
        return Err(GeometryError::Degenerate("points are collinear or coincident".into()));
    }
    let mean_dist = points
        .iter()
        .map(|&(x, y)| (x - mx).hypot(y - my))
        .sum::<f64>()
        / nf;
    let scale = std::f64::consts::SQRT_2 / mean_dist;
    let norm: Vec<Point> = points
        .iter()
        .map(|&(x, y)| ((x - mx) * scale, (y - my) * scale))
        .collect();

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(x, y) in &norm {
        let q = Vector3::new(x * x, x * y, y * y);
        let l = Vector3::new(x, y, 1.0);
        s1 += q * q.transpose();
        s2 += q * l.transpose();
        s3 += l * l.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| GeometryError::Degenerate("singular linear scatter block".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]].
    let reduced = Matrix3::new(
        m[(2, 0)] / 2.0,
        m[(2, 1)] / 2.0,
        m[(2, 2)] / 2.0,
        -m[(1, 0)],
        -m[(1, 1)],
        -m[(1, 2)],
        m[(0, 0)] / 2.0,
        m[(0, 1)] / 2.0,
        m[(0, 2)] / 2.0,
    );
    let quad = ellipse_eigenvector(&reduced)
        .ok_or_else(|| GeometryError::Degenerate("no elliptical solution".into()))?;
    let lin = t * quad;

    // Scale so that 4AC − B² = 1 in the normalized frame.
    let cond = 4.0 * quad[0] * quad[2] - quad[1] * quad[1];
    let k = 1.0 / cond.sqrt();
    let coeffs_n = [
        quad[0] * k,
        quad[1] * k,
        quad[2] * k,
        lin[0] * k,
        lin[1] * k,
        lin[2] * k,
    ];
    let residual = (norm
        .iter()
        .map(|&(x, y)| conic_eval(&coeffs_n, x, y).powi(2))
        .sum::<f64>()
        / nf)
        .sqrt();

    let coeffs = denormalize(&coeffs_n, mx, my, scale);
    let ellipse = conic_to_ellipse(&coeffs)?;
    Ok(EllipseFit { ellipse, residual })
}

fn conic_eval(c: &[f64; 6], x: f64, y: f64) -> f64 {
    c[0] * x * x + c[1] * x * y + c[2] * y * y + c[3] * x + c[4] * y + c[5]
}

/// Eigenvector of the reduced system satisfying the ellipse constraint.
fn ellipse_eigenvector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    // Noise-free samples can give a repeated root that rounding splits into
    // a conjugate pair with a negligible imaginary part; keep those as real.
    let tol = 1e-9 * m.norm().max(f64::MIN_POSITIVE);
    let eig = m.complex_eigenvalues();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in eig.iter().filter(|z| z.im.abs() <= tol).map(|z| z.re) {
        let Some(v) = null_vector(&(m - Matrix3::identity() * lambda)) else {
            continue;
        };
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond <= 0.0 {
            continue;
        }
        // Among admissible vectors, the smallest non-negative eigenvalue is the
        // minimum-residual solution.
        let key = lambda.max(0.0);
        if best.map_or(true, |(k, _)| key < k) {
            best = Some((key, v));
        }
    }
    best.map(|(_, v)| v)
}

/// Unit vector spanning the (numerical) null space of a rank-2 3×3 matrix.
fn null_vector(a: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let rows = [a.row(0).transpose(), a.row(1).transpose(), a.row(2).transpose()];
    let candidates = [
        rows[0].cross(&rows[1]),
        rows[0].cross(&rows[2]),
        rows[1].cross(&rows[2]),
    ];
    let best = candidates
        .iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let n = best.norm();
    (n > 0.0 && n.is_finite()).then(|| best / n)
}

/// Maps conic coefficients fitted on `x' = s(x − mx)`, `y' = s(y − my)` back
/// to image coordinates.
fn denormalize(c: &[f64; 6], mx: f64, my: f64, s: f64) -> [f64; 6] {
    let [a, b, cc, d, e, f] = *c;
    let s2 = s * s;
    [
        a * s2,
        b * s2,
        cc * s2,
        -2.0 * a * s2 * mx - b * s2 * my + d * s,
        -b * s2 * mx - 2.0 * cc * s2 * my + e * s,
        a * s2 * mx * mx + b * s2 * mx * my + cc * s2 * my * my - d * s * mx - e * s * my + f,
    ]
}

/// Eigenvalues `(low, high)` of the symmetric matrix `[[a, b], [b, c]]`.
fn sym2_eigenvalues(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let diff = (0.25 * (a - c).powi(2) + b * b).sqrt();
    (mean - diff, mean + diff)
}

/// Unit eigenvector of `[[a, b], [b, c]]` for eigenvalue `lambda`.
fn sym2_eigenvector(a: f64, b: f64, c: f64, lambda: f64) -> (f64, f64) {
    let v1 = (b, lambda - a);
    let v2 = (lambda - c, b);
    let v = if v1.0.hypot(v1.1) >= v2.0.hypot(v2.1) { v1 } else { v2 };
    let n = v.0.hypot(v.1);
    if n == 0.0 {
        (1.0, 0.0)
    } else {
        (v.0 / n, v.1 / n)
    }
}

/// Geometric parameters of the ellipse `Ax² + Bxy + Cy² + Dx + Ey + F = 0`.
pub fn conic_to_ellipse(coeffs: &[f64; 6]) -> Result<EllipseParams, GeometryError> {
    let mut c = *coeffs;
    if c[0] + c[2] < 0.0 {
        c.iter_mut().for_each(|v| *v = -*v);
    }
    let [a, b, cc, d, e, _] = c;
    let det = 4.0 * a * cc - b * b;
    if !(det > 0.0) {
        return Err(GeometryError::Degenerate("conic is not an ellipse".into()));
    }
    let x0 = (b * e - 2.0 * cc * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = conic_eval(&c, x0, y0);
    if !(f0 < 0.0) {
        return Err(GeometryError::Degenerate("imaginary ellipse".into()));
    }
    let (l1, l2) = sym2_eigenvalues(a, b / 2.0, cc);
    let semi_major = (-f0 / l1).sqrt();
    let semi_minor = (-f0 / l2).sqrt();
    if !(semi_major.is_finite() && semi_minor > 0.0) {
        return Err(GeometryError::Degenerate("non-finite semi-axes".into()));
    }
    let rotation = if (l2 - l1) <= 1e-14 * (l1.abs() + l2.abs()) {
        0.0
    } else {
        let (vx, vy) = sym2_eigenvector(a, b / 2.0, cc, l1);
        vy.atan2(vx)
    };
    Ok(EllipseParams::new((x0, y0), semi_major, semi_minor, rotation))
}

/// Ramanujan's second approximation to the ellipse perimeter.
pub fn ramanujan_perimeter(a: f64, b: f64) -> f64 {
    let h = ((a - b) / (a + b)).powi(2);
    PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
}

/// Perimeter of `e` scaled by `spacing` (length units per pixel).
pub fn circumference(e: &EllipseParams, spacing: f64) -> Result<f64, GeometryError> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(GeometryError::InvalidSpacing(spacing));
    }
    Ok(ramanujan_perimeter(e.semi_major, e.semi_minor) * spacing)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircumferenceMeasurement {
    pub value: BiometryValue,
    pub fit: EllipseFit,
}

/// HC or AC from a segmentation mask.
///
/// Keeps the largest component, fits an ellipse to its outline and takes the
/// Ramanujan perimeter. Without a pixel spacing the value stays in pixels.
pub fn measure_hc_ac(
    mask: &Mask,
    spacing_mm: Option<f64>,
    measure: Measure,
) -> Result<CircumferenceMeasurement, GeometryError> {
    if !matches!(measure, Measure::HC | Measure::AC) {
        return Err(GeometryError::Degenerate(format!("{measure} is not a circumference")));
    }
    let component = largest_component(mask);
    let points = edge_midpoints(&component)?;
    let fit = fit_ellipse(&points)?;
    let (value, unit) = match spacing_mm {
        Some(s) => (circumference(&fit.ellipse, s)?, Unit::Mm),
        None => (circumference(&fit.ellipse, 1.0)?, Unit::Pixels),
    };
    let confidence = 1.0 / (1.0 + fit.residual);
    let value = BiometryValue::new(measure, value, unit, "ellipse_fit", confidence)?;
    Ok(CircumferenceMeasurement { value, fit })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoPInputs {
    pub symphysis: Mask,
    pub head: Mask,
}

impl AoPInputs {
    pub fn new(symphysis: Mask, head: Mask) -> Result<Self, GeometryError> {
        if !symphysis.same_dims(&head) {
            return Err(GeometryError::DimensionMismatch);
        }
        if symphysis.is_empty() || head.is_empty() {
            return Err(GeometryError::EmptyMask);
        }
        let overlap = symphysis.intersection_area(&head);
        let smaller = symphysis.area().min(head.area());
        let fraction = overlap as f64 / smaller as f64;
        if fraction >= 0.05 {
            return Err(GeometryError::Overlap { overlap, fraction });
        }
        Ok(Self { symphysis, head })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoPGeometry {
    pub degrees: f64,
    /// Inferior symphysis endpoint (the angle's vertex).
    pub vertex: Point,
    pub tangent_point: Point,
}

/// Angle of progression between the symphysis long axis, extended past its
/// inferior endpoint, and the tangent from that endpoint to the fetal head.
pub fn compute_aop(inputs: &AoPInputs) -> Result<AoPGeometry, GeometryError> {
    let sym = largest_component(&inputs.symphysis);
    let head = largest_component(&inputs.head);

    let sym_pts: Vec<Point> = sym.pixels().map(|(x, y)| (x as f64, y as f64)).collect();
    let n = sym_pts.len() as f64;
    let (cx, cy) = (
        sym_pts.iter().map(|p| p.0).sum::<f64>() / n,
        sym_pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &sym_pts {
        sxx += (x - cx) * (x - cx);
        sxy += (x - cx) * (y - cy);
        syy += (y - cy) * (y - cy);
    }
    let (_, hi) = sym2_eigenvalues(sxx / n, sxy / n, syy / n);
    if !(hi > 0.0) {
        return Err(GeometryError::Degenerate("symphysis has no extent".into()));
    }
    let axis = sym2_eigenvector(sxx / n, sxy / n, syy / n, hi);
    let proj = |p: &Point| (p.0 - cx) * axis.0 + (p.1 - cy) * axis.1;
    let t_min = sym_pts.iter().map(proj).fold(f64::INFINITY, f64::min);
    let t_max = sym_pts.iter().map(proj).fold(f64::NEG_INFINITY, f64::max);
    let end_a = (cx + t_min * axis.0, cy + t_min * axis.1);
    let end_b = (cx + t_max * axis.0, cy + t_max * axis.1);

    let head_pts: Vec<Point> = head.pixels().map(|(x, y)| (x as f64, y as f64)).collect();
    let hn = head_pts.len() as f64;
    let hc = (
        head_pts.iter().map(|p| p.0).sum::<f64>() / hn,
        head_pts.iter().map(|p| p.1).sum::<f64>() / hn,
    );
    let dist = |p: Point, q: Point| (p.0 - q.0).hypot(p.1 - q.1);
    let (vertex, other) = if dist(end_a, hc) <= dist(end_b, hc) {
        (end_a, end_b)
    } else {
        (end_b, end_a)
    };
    let to_head = (hc.0 - vertex.0, hc.1 - vertex.1);
    let head_dist = to_head.0.hypot(to_head.1);
    if head_dist < 1e-9 {
        return Err(GeometryError::Degenerate("head centroid coincides with the symphysis endpoint".into()));
    }
    let len = dist(vertex, other);
    let u = ((vertex.0 - other.0) / len, (vertex.1 - other.1) / len);
    let cross = |a: (f64, f64), b: (f64, f64)| a.0 * b.1 - a.1 * b.0;
    let side = cross(u, to_head) / head_dist;
    let signed_angle = |p: &Point| {
        let v = (p.0 - vertex.0, p.1 - vertex.1);
        cross(u, v).atan2(u.0 * v.0 + u.1 * v.1)
    };

    // The head contour is the ellipse fitted to its raster outline when that
    // fit hugs the outline; the hull of an ellipse is the ellipse, and the
    // angle over it peaks at the two tangent points. Otherwise scan the
    // outline itself, whose hull vertices are among its points.
    let outline = edge_midpoints(&head)?;
    let candidates = contour_tangents(&outline, vertex).unwrap_or(outline);
    let score = |p: &Point| {
        let a = signed_angle(p);
        if side.abs() < 1e-9 {
            a.abs()
        } else {
            a * side.signum()
        }
    };
    let (tangent_point, best) = candidates
        .iter()
        .map(|p| (*p, score(p)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty head");
    let degrees = best.to_degrees();
    if !(degrees > 0.0 && degrees < 180.0) {
        return Err(GeometryError::Degenerate(format!("angle {degrees} outside (0, 180)")));
    }
    Ok(AoPGeometry {
        degrees,
        vertex,
        tangent_point,
    })
}

/// Largest distance, in pixels, an outline point may sit from the fitted
/// head ellipse before the outline is scanned directly.
const HEAD_FIT_MAX_DEV: f64 = 1.5;

/// Tangent points from `from` to the ellipse fitted to `outline`, or `None`
/// when the fit fails, strays from the outline, or `from` lies inside it.
fn contour_tangents(outline: &[Point], from: Point) -> Option<Vec<Point>> {
    let e = fit_ellipse(outline).ok()?.ellipse;
    let (s, c) = e.rotation.sin_cos();
    let local = |p: Point| {
        let (dx, dy) = (p.0 - e.center.0, p.1 - e.center.1);
        ((c * dx + s * dy) / e.semi_major, (-s * dx + c * dy) / e.semi_minor)
    };
    let strays = outline.iter().any(|&p| {
        let (u, v) = local(p);
        let rho = u.hypot(v);
        rho == 0.0 || (1.0 - 1.0 / rho).abs() * (p.0 - e.center.0).hypot(p.1 - e.center.1) > HEAD_FIT_MAX_DEV
    });
    if strays {
        return None;
    }
    let (u, v) = local(from);
    let rho = u.hypot(v);
    if rho <= 1.0 + 1e-9 {
        return None;
    }
    let (phi, spread) = (v.atan2(u), (1.0 / rho).acos());
    Some(vec![e.point_at(phi - spread), e.point_at(phi + spread)])
}

/// AoP as a biometry value.
pub fn measure_aop(inputs: &AoPInputs) -> Result<BiometryValue, GeometryError> {
    let g = compute_aop(inputs)?;
    Ok(BiometryValue::new(Measure::AoP, g.degrees, Unit::Degrees, "aop_tangent", 1.0)?)
}

/// Filled ellipse rasterized by pixel-centre inclusion.
pub fn rasterize_ellipse(width: u32, height: u32, e: &EllipseParams) -> Result<Mask, GeometryError> {
    Ok(Mask::from_fn(width, height, |x, y| e.level(x as f64, y as f64) <= 1.0)?)
}
