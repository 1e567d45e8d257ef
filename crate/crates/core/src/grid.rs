//! Uniform space-time grids, grid-attached fields and trapezoid quadrature.
//!
//! Space is the truncated box `[x_min, x_max]` with `nx` nodes; time is `[0, 1]`
//! with `nt` nodes. All quadrature is the composite trapezoid rule, and the
//! trapezoid weights double as the mass matrix of the finite-volume operators
//! in [`crate::prior`], so discrete mass is exactly what [`integrate_space`]
//! reports.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Locus, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    x_min: f64,
    x_max: f64,
    nx: usize,
    nt: usize,
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, nt: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::Input(format!(
                "grid endpoints must be finite with x_max > x_min (got [{x_min}, {x_max}])"
            )));
        }
        if nx < 3 {
            return Err(Error::Input(format!("nx must be >= 3 (got {nx})")));
        }
        if nt < 2 {
            return Err(Error::Input(format!("nt must be >= 2 (got {nt})")));
        }
        Ok(Self { x_min, x_max, nx, nt })
    }

    /// The unit square `[0,1] x [0,1]`.
    pub fn unit(nx: usize, nt: usize) -> Result<Self> {
        Self::new(0.0, 1.0, nx, nt)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.nt - 1) as f64
    }

    /// Position of node `i`; the last node is exactly `x_max`.
    pub fn x(&self, i: usize) -> f64 {
        if i == self.nx - 1 {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    /// Time of node `k`; the last node is exactly 1.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.nt - 1 {
            1.0
        } else {
            k as f64 / (self.nt - 1) as f64
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.nt).map(|k| self.t(k)).collect()
    }

    /// Trapezoid weights in space (`dx/2` at the two ends, `dx` inside).
    pub fn space_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.nx, self.dx())
    }

    /// Trapezoid weights in time.
    pub fn time_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.nt, self.dt())
    }

    pub fn locus(&self, k: usize, i: usize) -> Locus {
        Locus {
            k,
            i,
            t: self.t(k),
            x: self.x(i),
        }
    }

    /// Index of the cell `[x_i, x_{i+1}]` containing `x` and the local
    /// coordinate in `[0, 1]`. Positions outside the box are clamped.
    pub fn locate_x(&self, x: f64) -> (usize, f64) {
        locate(x, self.x_min, self.dx(), self.nx)
    }

    pub fn locate_t(&self, t: f64) -> (usize, f64) {
        locate(t, 0.0, self.dt(), self.nt)
    }

    pub fn zeros_scalar(&self) -> ScalarField {
        ScalarField(vec![0.0; self.nx])
    }

    pub fn zeros(&self) -> SpaceTimeField {
        SpaceTimeField::zeros(self.nt, self.nx)
    }

    pub fn filled(&self, value: f64) -> SpaceTimeField {
        SpaceTimeField::filled(self.nt, self.nx, value)
    }
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

fn locate(x: f64, origin: f64, h: f64, n: usize) -> (usize, f64) {
    let s = ((x - origin) / h).clamp(0.0, (n - 1) as f64);
    let cell = (s.floor() as usize).min(n - 2);
    (cell, s - cell as f64)
}

/// Values on the spatial nodes at one time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalarField(pub Vec<f64>);

impl ScalarField {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn constant(nx: usize, value: f64) -> Self {
        Self(vec![value; nx])
    }

    pub fn from_fn(g: &SpaceTimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self((0..g.nx()).map(|i| f(g.x(i))).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Shape check against `g`.
    pub fn check(&self, g: &SpaceTimeGrid) -> Result<()> {
        if self.len() != g.nx() {
            return Err(Error::shape(format!("{} spatial nodes", g.nx()), self.len()));
        }
        Ok(())
    }
}

impl Deref for ScalarField {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ScalarField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ScalarField {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Row-major `nt x nx` table: row `k` holds the values at time node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    nt: usize,
    nx: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(nt: usize, nx: usize) -> Self {
        Self::filled(nt, nx, 0.0)
    }

    pub fn filled(nt: usize, nx: usize, value: f64) -> Self {
        Self {
            nt,
            nx,
            data: vec![value; nt * nx],
        }
    }

    pub fn from_vec(nt: usize, nx: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nt * nx {
            return Err(Error::shape(format!("{nt}x{nx} = {} values", nt * nx), data.len()));
        }
        Ok(Self { nt, nx, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let nt = rows.len();
        let nx = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nt * nx);
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != nx {
                return Err(Error::shape(format!("row {k} with {nx} values"), row.len()));
            }
            data.extend(row);
        }
        Ok(Self { nt, nx, data })
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.nx + i]
    }

    pub fn set(&mut self, k: usize, i: usize, value: f64) {
        self.data[k * self.nx + i] = value;
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.nx..(k + 1) * self.nx]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.nx..(k + 1) * self.nx]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.nx)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(self.nx)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scalar(&self, k: usize) -> ScalarField {
        ScalarField(self.row(k).to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            nt: self.nt,
            nx: self.nx,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.nt != other.nt || self.nx != other.nx {
            return Err(Error::shape(
                format!("{}x{}", self.nt, self.nx),
                format!("{}x{}", other.nt, other.nx),
            ));
        }
        Ok(Self {
            nt: self.nt,
            nx: self.nx,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear interpolation; arguments outside the grid are clamped.
    pub fn interpolate(&self, g: &SpaceTimeGrid, t: f64, x: f64) -> f64 {
        let (k, s) = g.locate_t(t);
        let (i, r) = g.locate_x(x);
        let v00 = self.get(k, i);
        let v01 = self.get(k, i + 1);
        let v10 = self.get(k + 1, i);
        let v11 = self.get(k + 1, i + 1);
        (1.0 - s) * ((1.0 - r) * v00 + r * v01) + s * ((1.0 - r) * v10 + r * v11)
    }

    /// Shape check against `g`.
    pub fn check(&self, g: &SpaceTimeGrid) -> Result<()> {
        if self.nt != g.nt() || self.nx != g.nx() {
            return Err(Error::shape(
                format!("{}x{}", g.nt(), g.nx()),
                format!("{}x{}", self.nt, self.nx),
            ));
        }
        Ok(())
    }
}

/// Trapezoid integral of a spatial field over `[x_min, x_max]`.
pub fn integrate_space(f: &[f64], g: &SpaceTimeGrid) -> Result<f64> {
    if f.len() != g.nx() {
        return Err(Error::shape(format!("{} spatial nodes", g.nx()), f.len()));
    }
    Ok(dot_weighted(f, &g.space_weights()))
}

/// Trapezoid integral over `[0,1] x [x_min, x_max]`.
pub fn integrate_spacetime(field: &SpaceTimeField, g: &SpaceTimeGrid) -> Result<f64> {
    field.check(g)?;
    let ws = g.space_weights();
    Ok(field
        .rows()
        .zip(g.time_weights())
        .map(|(row, wt)| wt * dot_weighted(row, &ws))
        .sum())
}

/// Cumulative trapezoid integral in time of the spatial integrals:
/// entry `k` is the integral over `[0, t_k]`.
pub fn cumulative_spacetime(field: &SpaceTimeField, g: &SpaceTimeGrid) -> Result<Vec<f64>> {
    field.check(g)?;
    let ws = g.space_weights();
    let per_row: Vec<f64> = field.rows().map(|row| dot_weighted(row, &ws)).collect();
    let h = g.dt();
    let mut acc = Vec::with_capacity(g.nt());
    let mut total = 0.0;
    acc.push(0.0);
    for k in 1..g.nt() {
        total += 0.5 * h * (per_row[k - 1] + per_row[k]);
        acc.push(total);
    }
    Ok(acc)
}

pub(crate) fn dot_weighted(f: &[f64], w: &[f64]) -> f64 {
    f.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Tabulate `f(t, x)` on every grid node.
pub fn sample<F>(f: F, g: &SpaceTimeGrid) -> Result<SpaceTimeField>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    sample_with(f, g, Execution::default())
}

pub fn sample_with<F>(f: F, g: &SpaceTimeGrid, exec: Execution) -> Result<SpaceTimeField>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let rows = exec.map_range(g.nt(), |k| {
        let t = g.t(k);
        (0..g.nx()).map(|i| f(t, g.x(i))).collect::<Vec<_>>()
    });
    let field = SpaceTimeField::from_rows(rows)?;
    if let Some(pos) = field.as_slice().iter().position(|v| !v.is_finite()) {
        let locus = g.locus(pos / g.nx(), pos % g.nx());
        return Err(Error::Input(format!("non-finite sample at {locus}")));
    }
    Ok(field)
}
