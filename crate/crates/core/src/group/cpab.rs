//! Continuous piecewise-affine velocity fields and the diffeomorphisms they
//! generate.
//!
//! The unit square is split into `nx x ny` rectangles, each cut along its
//! diagonals into four triangles. A field assigns an affine map
//! `v(p) = A [x, y, 1]^T` to every triangle; the admissible maps are those
//! continuous across shared edges and zero on the boundary of the square.
//! That space is the null space of a linear constraint matrix, and an
//! orthonormal basis of it parametrizes the fields.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::warp::bilinear_sampler;
use crate::autodiff::Sampler;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tessellation {
    pub nx: usize,
    pub ny: usize,
}

impl Default for Tessellation {
    fn default() -> Self {
        Self { nx: 4, ny: 4 }
    }
}

impl Tessellation {
    pub fn triangles(&self) -> usize {
        4 * self.nx * self.ny
    }

    /// Dimension of the continuous, boundary-vanishing field space: two
    /// components per free vertex (interior corners and cell centres).
    pub fn dim(&self) -> usize {
        2 * ((self.nx - 1) * (self.ny - 1) + self.nx * self.ny)
    }

    /// Vertices `(a, b, centre)` of triangle `k` in cell `(i, j)`.
    fn triangle_vertices(&self, i: usize, j: usize, k: usize) -> [[f64; 2]; 3] {
        let (x0, x1) = (i as f64 / self.nx as f64, (i + 1) as f64 / self.nx as f64);
        let (y0, y1) = (j as f64 / self.ny as f64, (j + 1) as f64 / self.ny as f64);
        let centre = [0.5 * (x0 + x1), 0.5 * (y0 + y1)];
        let (a, b) = match k {
            0 => ([x0, y0], [x1, y0]),
            1 => ([x1, y0], [x1, y1]),
            2 => ([x1, y1], [x0, y1]),
            _ => ([x0, y1], [x0, y0]),
        };
        [a, b, centre]
    }

    fn triangle_index(&self, i: usize, j: usize, k: usize) -> usize {
        4 * (j * self.nx + i) + k
    }

    /// Triangle containing `p` (clamped into the square).
    pub fn locate(&self, p: [f64; 2]) -> usize {
        let x = p[0].clamp(0.0, 1.0) * self.nx as f64;
        let y = p[1].clamp(0.0, 1.0) * self.ny as f64;
        let i = (x.floor() as usize).min(self.nx - 1);
        let j = (y.floor() as usize).min(self.ny - 1);
        let dx = x - i as f64 - 0.5;
        let dy = y - j as f64 - 0.5;
        let k = if dy.abs() >= dx.abs() {
            if dy < 0.0 {
                0
            } else {
                2
            }
        } else if dx > 0.0 {
            1
        } else {
            3
        };
        self.triangle_index(i, j, k)
    }
}

/// Orthonormal basis of admissible affine coefficient vectors, stored
/// column-wise as `[6 * triangles, dim]`.
#[derive(Debug)]
pub struct CpabBasis {
    pub tess: Tessellation,
    pub basis: DMatrix<f64>,
}

impl CpabBasis {
    fn build(tess: Tessellation) -> Self {
        let n = 6 * tess.triangles();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        // v_k(p) - v_l(p) = 0, componentwise
        let mut continuity = |ta: usize, tb: Option<usize>, p: [f64; 2]| {
            for comp in 0..2 {
                let mut row = vec![0.0; n];
                let base = 6 * ta + 3 * comp;
                row[base] = p[0];
                row[base + 1] = p[1];
                row[base + 2] = 1.0;
                if let Some(tb) = tb {
                    let base = 6 * tb + 3 * comp;
                    row[base] -= p[0];
                    row[base + 1] -= p[1];
                    row[base + 2] -= 1.0;
                }
                rows.push(row);
            }
        };
        for j in 0..tess.ny {
            for i in 0..tess.nx {
                for k in 0..4 {
                    let t = tess.triangle_index(i, j, k);
                    let [a, b, centre] = tess.triangle_vertices(i, j, k);
                    // Edge (b, centre) is shared with the next triangle in the cell.
                    let next = tess.triangle_index(i, j, (k + 1) % 4);
                    continuity(t, Some(next), b);
                    continuity(t, Some(next), centre);
                    // Outer edge (a, b): neighbour cell or domain boundary.
                    let neighbour = match k {
                        0 if j > 0 => Some(tess.triangle_index(i, j - 1, 2)),
                        1 if i + 1 < tess.nx => Some(tess.triangle_index(i + 1, j, 3)),
                        2 if j + 1 < tess.ny => Some(tess.triangle_index(i, j + 1, 0)),
                        3 if i > 0 => Some(tess.triangle_index(i - 1, j, 1)),
                        _ => None,
                    };
                    match neighbour {
                        // each interior edge is visited from both sides; once is enough
                        Some(nb) if nb < t => {}
                        other => {
                            continuity(t, other, a);
                            continuity(t, other, b);
                        }
                    }
                }
            }
        }
        let l = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
        let gram = l.transpose() * &l;
        let eig = SymmetricEigen::new(gram);
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let mut null: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i].abs() <= 1e-10 * max_ev.max(1.0))
            .collect();
        null.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .partial_cmp(&eig.eigenvalues[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut basis = DMatrix::zeros(n, null.len());
        for (col, &idx) in null.iter().enumerate() {
            let v = eig.eigenvectors.column(idx);
            // Fix the sign so the basis does not depend on solver conventions.
            let pivot = v
                .iter()
                .cloned()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            basis.set_column(col, &(v * sign));
        }
        Self { tess, basis }
    }

    pub fn get(tess: Tessellation) -> Arc<CpabBasis> {
        static CACHE: OnceLock<Mutex<HashMap<Tessellation, Arc<CpabBasis>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("cpab cache poisoned");
        guard
            .entry(tess)
            .or_insert_with(|| Arc::new(CpabBasis::build(tess)))
            .clone()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// One CPAB transformation: coefficients in the orthonormal field basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpabElement {
    pub params: Vec<f64>,
    pub tess: Tessellation,
    pub magnitude: f64,
}

/// Affine coefficients of every triangle for a given element.
pub struct VelocityField {
    tess: Tessellation,
    coeffs: Vec<[f64; 6]>,
}

impl VelocityField {
    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        self.eval_in(self.tess.locate(p), p)
    }

    fn eval_in(&self, tri: usize, p: [f64; 2]) -> [f64; 2] {
        let a = &self.coeffs[tri];
        [
            a[0] * p[0] + a[1] * p[1] + a[2],
            a[3] * p[0] + a[4] * p[1] + a[5],
        ]
    }
}

impl CpabElement {
    pub fn identity(tess: Tessellation, magnitude: f64) -> Self {
        Self {
            params: vec![0.0; tess.dim()],
            tess,
            magnitude,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.params.iter().all(|&v| v == 0.0)
    }

    pub fn inverse(&self) -> Self {
        Self {
            params: self.params.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    pub fn field(&self) -> VelocityField {
        let basis = CpabBasis::get(self.tess);
        assert_eq!(
            basis.dim(),
            self.params.len(),
            "CPAB parameter count mismatch"
        );
        let theta = nalgebra::DVector::from_column_slice(&self.params);
        let flat = &basis.basis * theta;
        let coeffs = flat
            .as_slice()
            .chunks_exact(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect();
        VelocityField {
            tess: self.tess,
            coeffs,
        }
    }
}

/// Velocity at each point of the closed unit square.
pub fn cpab_velocity(e: &CpabElement, points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if let Some(p) = points
        .iter()
        .find(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
    {
        return Err(Error::config(format!(
            "point {p:?} outside the unit square"
        )));
    }
    let field = e.field();
    Ok(points.iter().map(|&p| field.eval(p)).collect())
}

/// Normalized pixel-centre coordinates `(x, y) = ((c + 0.5) / W, (r + 0.5) / H)`.
pub fn pixel_grid(h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 2), |(r, c, k)| {
        if k == 0 {
            (c as f64 + 0.5) / w as f64
        } else {
            (r as f64 + 0.5) / h as f64
        }
    })
}

fn integrate_point(field: &VelocityField, p: [f64; 2], steps: usize) -> [f64; 2] {
    let h = 1.0 / steps as f64;
    let clamp = |q: [f64; 2]| [q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0)];
    let add = |q: [f64; 2], v: [f64; 2], s: f64| clamp([q[0] + s * v[0], q[1] + s * v[1]]);
    let mut q = p;
    for _ in 0..steps {
        let k1 = field.eval(q);
        let k2 = field.eval(add(q, k1, 0.5 * h));
        let k3 = field.eval(add(q, k2, 0.5 * h));
        let k4 = field.eval(add(q, k3, h));
        q = clamp([
            q[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            q[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]);
    }
    q
}

/// Integrates `dphi/ds = v(phi)` over `s in [0, 1]` with classical RK4 and
/// returns `phi(1) - phi(0)` for every grid point. `grid` is `[H, W, 2]`.
pub fn cpab_integrate(e: &CpabElement, grid: &Array3<f64>, steps: usize) -> Array3<f64> {
    assert!(steps >= 1, "need at least one integration step");
    let mut out = Array3::zeros(grid.raw_dim());
    if e.is_identity() {
        return out;
    }
    let field = e.field();
    let (h, w, _) = grid.dim();
    for r in 0..h {
        for c in 0..w {
            let p = [grid[[r, c, 0]], grid[[r, c, 1]]];
            let q = integrate_point(&field, p, steps);
            out[[r, c, 0]] = q[0] - p[0];
            out[[r, c, 1]] = q[1] - p[1];
        }
    }
    out
}

/// Backward-warping sampler for `act_diffeo`: output pixel at `p` reads the
/// input at `p + d(p)`, with `d` integrated from the negated parameters.
pub fn diffeo_sampler(e: &CpabElement, h: usize, w: usize, steps: usize) -> Sampler {
    let disp = cpab_integrate(&e.inverse(), &pixel_grid(h, w), steps);
    bilinear_sampler(h, w, |r, c| {
        let x = (c as f64 + 0.5) / w as f64 + disp[[r, c, 0]];
        let y = (r as f64 + 0.5) / h as f64 + disp[[r, c, 1]];
        (y * h as f64 - 0.5, x * w as f64 - 0.5)
    })
}

/// Warps one complex frame by the diffeomorphism of `e`.
pub fn act_diffeo(
    e: &CpabElement,
    frame: ArrayView2<'_, Complex32>,
    steps: usize,
) -> Array2<Complex32> {
    if e.is_identity() {
        return frame.to_owned();
    }
    let (h, w) = frame.dim();
    diffeo_sampler(e, h, w, steps).apply_complex(frame)
}
