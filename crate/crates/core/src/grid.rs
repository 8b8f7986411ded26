//! Node-centred uniform grid on the unit square, scalar fields on it,
//! region masks, trapezoidal quadrature, bilinear interpolation and
//! discrete Sobolev norms.
//!
//! Node `(i, j)` sits at `(i·h, j·h)` with `h = 1/(n−1)`; fields are stored
//! row-major with `x` varying fastest (`index = j·n + i`).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    n: usize,
}

impl Grid {
    /// Square grid with `n` nodes per axis. `n` must be odd and at least 9
    /// so that the domain centre is a node.
    pub fn new(n: usize) -> Result<Self> {
        if n.is_multiple_of(2) {
            return Err(Error::config(format!("even node count {n}; the centre must be a node")));
        }
        if n < 9 {
            return Err(Error::config(format!("node count {n} is below the minimum of 9")));
        }
        Ok(Grid { n })
    }

    /// Nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> usize {
        self.n - 1
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    #[inline]
    pub fn ij(&self, index: usize) -> (usize, usize) {
        (index % self.n, index / self.n)
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, index: usize) -> (f64, f64) {
        let (i, j) = self.ij(index);
        (self.coord(i), self.coord(j))
    }

    /// 1-D trapezoid weight factor (1/2 on the ends, 1 inside).
    #[inline]
    pub fn edge_factor(&self, i: usize) -> f64 {
        if i == 0 || i == self.n - 1 {
            0.5
        } else {
            1.0
        }
    }

    /// Trapezoidal quadrature weight of a node; the weights sum to |Ω| = 1.
    #[inline]
    pub fn weight(&self, index: usize) -> f64 {
        let (i, j) = self.ij(index);
        let h = self.h();
        self.edge_factor(i) * self.edge_factor(j) * h * h
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.weight(k)).collect()
    }

    /// Node index along one axis for a coordinate lying on a grid line.
    pub fn line_index(&self, coord: f64) -> Option<usize> {
        let s = coord * self.cells() as f64;
        let r = s.round();
        if (s - r).abs() <= ALIGN_TOL && r >= 0.0 && r <= self.cells() as f64 {
            Some(r as usize)
        } else {
            None
        }
    }

    /// Cell containing a point, clamped so that points on the upper edges
    /// map to the last cell.
    #[inline]
    pub fn locate_cell(&self, x: f64, y: f64) -> (usize, usize, f64, f64) {
        let c = self.cells() as f64;
        let sx = (x * c).clamp(0.0, c);
        let sy = (y * c).clamp(0.0, c);
        let i = (sx.floor() as usize).min(self.cells() - 1);
        let j = (sy.floor() as usize).min(self.cells() - 1);
        (i, j, sx - i as f64, sy - j as f64)
    }
}

/// Axis-aligned rectangle in domain coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 };

    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect { x_min, y_min, x_max, y_max }
    }

    /// Centred square `[a, 1−a]²`.
    pub fn centered(margin: f64) -> Self {
        Rect::new(margin, margin, 1.0 - margin, 1.0 - margin)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min - ALIGN_TOL
            && x <= self.x_max + ALIGN_TOL
            && y >= self.y_min - ALIGN_TOL
            && y <= self.y_max + ALIGN_TOL
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.contains(other.x_min, other.y_min) && self.contains(other.x_max, other.y_max)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    /// Node-index extents `(i0, i1, j0, j1)` when every edge lies on a grid line.
    pub fn node_extents(&self, grid: &Grid) -> Option<(usize, usize, usize, usize)> {
        Some((
            grid.line_index(self.x_min)?,
            grid.line_index(self.x_max)?,
            grid.line_index(self.y_min)?,
            grid.line_index(self.y_max)?,
        ))
    }
}

/// Boolean node mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    grid: Grid,
    nodes: Vec<bool>,
}

impl RegionMask {
    pub fn whole(grid: Grid) -> Self {
        RegionMask { grid, nodes: vec![true; grid.len()] }
    }

    /// Nodes inside the closed rectangle.
    pub fn from_rect(grid: Grid, rect: &Rect) -> Self {
        let nodes = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.node(k);
                rect.contains(x, y)
            })
            .collect();
        RegionMask { grid, nodes }
    }

    /// Nodes strictly inside the rectangle (boundary nodes excluded).
    pub fn from_rect_interior(grid: Grid, rect: &Rect) -> Self {
        let nodes = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.node(k);
                x > rect.x_min + ALIGN_TOL
                    && x < rect.x_max - ALIGN_TOL
                    && y > rect.y_min + ALIGN_TOL
                    && y < rect.y_max - ALIGN_TOL
            })
            .collect();
        RegionMask { grid, nodes }
    }

    pub fn from_nodes(grid: Grid, nodes: Vec<bool>) -> Result<Self> {
        if nodes.len() != grid.len() {
            return Err(Error::config("mask length does not match the grid"));
        }
        Ok(RegionMask { grid, nodes })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.nodes[index]
    }

    pub fn count(&self) -> usize {
        self.nodes.iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&k| self.nodes[k]).collect()
    }

    /// Cell `(i, j)` belongs to the region when all four corners do.
    #[inline]
    pub fn contains_cell(&self, i: usize, j: usize) -> bool {
        let g = self.grid;
        self.nodes[g.index(i, j)]
            && self.nodes[g.index(i + 1, j)]
            && self.nodes[g.index(i, j + 1)]
            && self.nodes[g.index(i + 1, j + 1)]
    }

    /// Smallest number of cells between an active node and ∂Ω
    /// (`None` for an empty mask).
    pub fn boundary_clearance(&self) -> Option<usize> {
        let n = self.grid.n();
        self.active_indices()
            .into_iter()
            .map(|k| {
                let (i, j) = self.grid.ij(k);
                i.min(j).min(n - 1 - i).min(n - 1 - j)
            })
            .min()
    }

    /// Node-index bounding box `(i0, i1, j0, j1)`.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for k in self.active_indices() {
            let (i, j) = self.grid.ij(k);
            bb = Some(match bb {
                None => (i, i, j, j),
                Some((a, b, c, d)) => (a.min(i), b.max(i), c.min(j), d.max(j)),
            });
        }
        bb
    }
}

/// One real value per grid node; always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::config(format!("field has {} values, grid has {} nodes", values.len(), grid.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite field value at node {k}")));
        }
        Ok(ScalarField { grid, values })
    }

    /// Constructor for internal results that are finite by construction.
    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ScalarField { grid, values }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.node(k);
                f(x, y)
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { grid, values: vec![c; grid.len()] }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        ScalarField { grid: self.grid, values }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &ScalarField) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    /// Zero every node outside the mask.
    pub fn masked(&self, mask: &RegionMask) -> Self {
        let values = self.values.iter().enumerate().map(|(k, &v)| if mask.contains(k) { v } else { 0.0 }).collect();
        ScalarField { grid: self.grid, values }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest nodal value (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = k;
            }
        }
        best
    }

    /// Rescale so that the field integrates to one over Ω.
    pub fn normalized(&self) -> Result<Self> {
        let mass = integrate(self);
        if !(mass > 0.0) {
            return Err(Error::domain(format!("cannot normalise a field with integral {mass}")));
        }
        Ok(self.scale(1.0 / mass))
    }

    /// Bilinear interpolation without bounds checking; points outside the
    /// unit square are clamped onto it.
    #[inline]
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (i, j, tx, ty) = self.grid.locate_cell(x, y);
        let n = self.grid.n();
        let k = j * n + i;
        let v00 = self.values[k];
        let v10 = self.values[k + 1];
        let v01 = self.values[k + n];
        let v11 = self.values[k + n + 1];
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }

    /// Write as CSV with header `x,y,value`, rows ordered by `y` then `x`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,value")?;
        for (k, v) in self.values.iter().enumerate() {
            let (x, y) = self.grid.node(k);
            writeln!(out, "{x:.16e},{y:.16e},{v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut values = Vec::new();
        let mut coords = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "x,y,value" {
                    return Err(Error::config(format!("unexpected field CSV header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("line {}: expected 3 columns", lineno + 1)));
            }
            let parse =
                |s: &str| s.trim().parse::<f64>().map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)));
            coords.push((parse(parts[0])?, parse(parts[1])?));
            values.push(parse(parts[2])?);
        }
        let n = (values.len() as f64).sqrt().round() as usize;
        if n * n != values.len() {
            return Err(Error::config(format!("{} rows do not form a square grid", values.len())));
        }
        let grid = Grid::new(n)?;
        for (k, &(x, y)) in coords.iter().enumerate() {
            let (gx, gy) = grid.node(k);
            if (gx - x).abs() > 1e-12 || (gy - y).abs() > 1e-12 {
                return Err(Error::config(format!("row {k} is not in y-then-x node order")));
            }
        }
        ScalarField::from_values(grid, values)
    }
}

/// Trapezoidal integral over the whole unit square.
pub fn integrate(f: &ScalarField) -> f64 {
    let g = f.grid();
    f.values().iter().enumerate().map(|(k, v)| g.weight(k) * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionIntegral {
    pub value: f64,
    /// Set when the region contains no complete cell.
    pub empty: bool,
}

/// Trapezoidal integral over the cells whose four corners lie in the mask.
/// For a grid-aligned rectangle this is the composite trapezoid rule on it.
pub fn integrate_region(f: &ScalarField, region: &RegionMask) -> RegionIntegral {
    let g = f.grid();
    assert_eq!(g, region.grid(), "field and region live on different grids");
    let quarter = 0.25 * g.h() * g.h();
    let mut value = 0.0;
    let mut cells = 0usize;
    for j in 0..g.cells() {
        for i in 0..g.cells() {
            if region.contains_cell(i, j) {
                value += quarter * (f.at(i, j) + f.at(i + 1, j) + f.at(i, j + 1) + f.at(i + 1, j + 1));
                cells += 1;
            }
        }
    }
    if cells == 0 {
        log::warn!("integration region contains no complete cell");
    }
    RegionIntegral { value, empty: cells == 0 }
}

/// Integral over a grid-aligned rectangle of the cells `[i0, i1) × [j0, j1)`.
pub(crate) fn integrate_cells(f: &[f64], grid: Grid, i0: usize, i1: usize, j0: usize, j1: usize) -> f64 {
    let n = grid.n();
    let quarter = 0.25 * grid.h() * grid.h();
    let mut s = 0.0;
    for j in j0..j1 {
        for i in i0..i1 {
            let k = j * n + i;
            s += f[k] + f[k + 1] + f[k + n] + f[k + n + 1];
        }
    }
    quarter * s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    L1,
    L2,
    H1,
    H2,
}

/// Discrete L¹/L²/H¹/H² norm over a region (whole Ω when `None`).
pub fn discrete_norm(f: &ScalarField, order: NormOrder, region: Option<&RegionMask>) -> Result<f64> {
    let g = f.grid();
    let whole;
    let region = match region {
        Some(r) => r,
        None => {
            whole = RegionMask::whole(g);
            &whole
        }
    };
    if matches!(order, NormOrder::H1 | NormOrder::H2) {
        let wide_enough = region.bounding_box().map(|(i0, i1, j0, j1)| i1 - i0 >= 2 && j1 - j0 >= 2).unwrap_or(false);
        if !wide_enough {
            return Err(Error::config("region is too thin for a derivative norm (need 3 nodes per axis)"));
        }
    }
    let sq = |v: &ScalarField| integrate_region(&v.map(|a| a * a), region).value;
    let value = match order {
        NormOrder::L1 => integrate_region(&f.map(f64::abs), region).value,
        NormOrder::L2 => sq(f).sqrt(),
        NormOrder::H1 => {
            let (fx, fy) = gradient(f);
            (sq(f) + sq(&fx) + sq(&fy)).sqrt()
        }
        NormOrder::H2 => {
            let (fx, fy) = gradient(f);
            let (fxx, fyy) = second_derivatives(f);
            let (_, fxy) = gradient(&fx);
            (sq(f) + sq(&fx) + sq(&fy) + sq(&fxx) + 2.0 * sq(&fxy) + sq(&fyy)).sqrt()
        }
    };
    Ok(value)
}

/// Bilinear interpolation at a point of the closed unit square.
pub fn interpolate(f: &ScalarField, point: (f64, f64)) -> Result<f64> {
    let (x, y) = point;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::domain(format!("point ({x}, {y}) lies outside the unit square")));
    }
    Ok(f.bilinear(x, y))
}

#[inline]
fn first_diff(v: &[f64], stride: usize, base: usize, i: usize, n: usize, h: f64) -> f64 {
    let at = |m: usize| v[base + m * stride];
    if i == 0 {
        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
    } else if i == n - 1 {
        (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
    } else {
        (at(i + 1) - at(i - 1)) / (2.0 * h)
    }
}

#[inline]
fn second_diff(v: &[f64], stride: usize, base: usize, i: usize, n: usize, h: f64) -> f64 {
    let at = |m: usize| v[base + m * stride];
    if i == 0 {
        (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / (h * h)
    } else if i == n - 1 {
        (2.0 * at(n - 1) - 5.0 * at(n - 2) + 4.0 * at(n - 3) - at(n - 4)) / (h * h)
    } else {
        (at(i + 1) - 2.0 * at(i) + at(i - 1)) / (h * h)
    }
}

/// Central differences inside, second-order one-sided differences on ∂Ω.
pub fn gradient(f: &ScalarField) -> (ScalarField, ScalarField) {
    let g = f.grid();
    let (n, h) = (g.n(), g.h());
    let v = f.values();
    let mut gx = vec![0.0; g.len()];
    let mut gy = vec![0.0; g.len()];
    for j in 0..n {
        for i in 0..n {
            let k = g.index(i, j);
            gx[k] = first_diff(v, 1, j * n, i, n, h);
            gy[k] = first_diff(v, n, i, j, n, h);
        }
    }
    (ScalarField::from_vec_unchecked(g, gx), ScalarField::from_vec_unchecked(g, gy))
}

/// Pure second derivatives `(∂xx f, ∂yy f)`.
pub fn second_derivatives(f: &ScalarField) -> (ScalarField, ScalarField) {
    let g = f.grid();
    let (n, h) = (g.n(), g.h());
    let v = f.values();
    let mut fxx = vec![0.0; g.len()];
    let mut fyy = vec![0.0; g.len()];
    for j in 0..n {
        for i in 0..n {
            let k = g.index(i, j);
            fxx[k] = second_diff(v, 1, j * n, i, n, h);
            fyy[k] = second_diff(v, n, i, j, n, h);
        }
    }
    (ScalarField::from_vec_unchecked(g, fxx), ScalarField::from_vec_unchecked(g, fyy))
}
