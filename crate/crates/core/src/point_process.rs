//! Poisson bin-count observation model: bin partitions of the observation
//! window, model intensities `Λ(Bᵢ) = ∫_{Bᵢ} q·u`, count sampling, the
//! exact likelihood, information divergences and the histogram estimator.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grid::{integrate_cells, Grid, Rect, ScalarField};

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub rect: Rect,
    /// Node extents `[i0, i1] × [j0, j1]`.
    pub nodes: (usize, usize, usize, usize),
}

impl Bin {
    pub fn area(&self) -> f64 {
        self.rect.area()
    }

    pub fn diameter(&self) -> f64 {
        self.rect.diameter()
    }
}

/// `side × side` lattice of grid-aligned rectangles tiling the window.
/// Bin `b = by·side + bx`; bins are half-open on shared edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPartition {
    grid: Grid,
    window: Rect,
    side: usize,
    bins: Vec<Bin>,
}

impl BinPartition {
    pub fn new(grid: Grid, window: Rect, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::config("bin lattice needs at least one bin per axis"));
        }
        if !window.is_valid() || !Rect::UNIT.contains_rect(&window) {
            return Err(Error::config(format!("observation window {window:?} is not inside the unit square")));
        }
        let (i0, i1, j0, j1) = window
            .node_extents(&grid)
            .ok_or_else(|| Error::config(format!("observation window {window:?} is not aligned to the grid")))?;
        let (cx, cy) = (i1 - i0, j1 - j0);
        if cx % side != 0 || cy % side != 0 {
            return Err(Error::config(format!(
                "{side}×{side} bins are not grid-aligned: window spans {cx}×{cy} cells"
            )));
        }
        let (sx, sy) = (cx / side, cy / side);
        let mut bins = Vec::with_capacity(side * side);
        for by in 0..side {
            for bx in 0..side {
                let (a0, a1) = (i0 + bx * sx, i0 + (bx + 1) * sx);
                let (b0, b1) = (j0 + by * sy, j0 + (by + 1) * sy);
                let rect = Rect::new(grid.coord(a0), grid.coord(b0), grid.coord(a1), grid.coord(b1));
                bins.push(Bin { rect, nodes: (a0, a1, b0, b1) });
            }
        }
        Ok(BinPartition { grid, window, side, bins })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn window(&self) -> Rect {
        self.window
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of bins K.
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn max_diameter(&self) -> f64 {
        self.bins.iter().map(Bin::diameter).fold(0.0, f64::max)
    }

    /// Upper bound `diam(window)·√2·K^{−1/2}` on bin diameters.
    pub fn diameter_bound(&self) -> f64 {
        self.window.diameter() * 2f64.sqrt() / (self.len() as f64).sqrt()
    }

    /// Bin containing a point, if any.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let w = &self.window;
        if x < w.x_min || x > w.x_max || y < w.y_min || y > w.y_max {
            return None;
        }
        let s = self.side as f64;
        let bx = (((x - w.x_min) / w.width() * s).floor() as usize).min(self.side - 1);
        let by = (((y - w.y_min) / w.height() * s).floor() as usize).min(self.side - 1);
        Some(by * self.side + bx)
    }
}

/// Per-bin intensities Λ(Bᵢ).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVector(pub Vec<f64>);

impl IntensityVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn uniform(k: usize, mass: f64) -> Self {
        IntensityVector(vec![mass / k as f64; k])
    }
}

/// Observed per-bin counts Yᵢ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVector(pub Vec<u64>);

impl CountVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

/// `Λᵢ = ∫_{Bᵢ} q·u` by the trapezoid rule on each bin.
pub fn bin_intensities(u: &ScalarField, q: &ScalarField, bins: &BinPartition) -> Result<IntensityVector> {
    if u.grid() != bins.grid() || q.grid() != bins.grid() {
        return Err(Error::config("bins are not aligned with the field grid"));
    }
    let density = u.mul(q);
    Ok(intensities_of_density(&density, bins))
}

/// Bin masses of an intensity density field.
pub fn intensities_of_density(density: &ScalarField, bins: &BinPartition) -> IntensityVector {
    let g = bins.grid();
    IntensityVector(
        bins.bins()
            .iter()
            .map(|b| {
                let (i0, i1, j0, j1) = b.nodes;
                integrate_cells(density.values(), g, i0, i1, j0, j1)
            })
            .collect(),
    )
}

fn check_nonnegative(lambda: &IntensityVector) -> Result<()> {
    match lambda.0.iter().position(|&v| !(v >= 0.0)) {
        Some(i) => Err(Error::domain(format!("intensity of bin {i} is {}", lambda.0[i]))),
        None => Ok(()),
    }
}

#[inline]
fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
    }
}

/// Independent `Yᵢ ∼ Poi(n·Λᵢ)`.
pub fn sample_counts<R: Rng + ?Sized>(lambda: &IntensityVector, n: f64, rng: &mut R) -> Result<CountVector> {
    if !(n >= 0.0) {
        return Err(Error::domain(format!("sample scale must be nonnegative, got {n}")));
    }
    check_nonnegative(lambda)?;
    Ok(CountVector(lambda.0.iter().map(|&l| poisson(n * l, rng)).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub points: Vec<(f64, f64)>,
    pub counts: CountVector,
    /// Molecules that never bound or bound outside every bin.
    pub unbinned: u64,
}

/// Mixed-binomial construction: `N ∼ Poi(n)` molecules, each binding with
/// probability `∫λ` at a location drawn from `λ/∫λ`.
pub fn sample_point_process<R: Rng + ?Sized>(
    lambda: &ScalarField,
    n: f64,
    bins: &BinPartition,
    rng: &mut R,
) -> Result<PointSample> {
    if lambda.min() < 0.0 {
        return Err(Error::domain("intensity density must be nonnegative"));
    }
    let g = lambda.grid();
    if g != bins.grid() {
        return Err(Error::config("bins are not aligned with the intensity grid"));
    }
    let quarter = 0.25 * g.h() * g.h();
    let cells = g.cells();
    let mut cdf = Vec::with_capacity(cells * cells);
    let mut acc = 0.0;
    for j in 0..cells {
        for i in 0..cells {
            acc += quarter * (lambda.at(i, j) + lambda.at(i + 1, j) + lambda.at(i, j + 1) + lambda.at(i + 1, j + 1));
            cdf.push(acc);
        }
    }
    let mass = acc;
    if mass > 1.0 + 1e-6 {
        return Err(Error::domain(format!("intensity density has mass {mass} > 1")));
    }
    let molecules = poisson(n, rng);
    let h = g.h();
    let mut points = Vec::new();
    let mut counts = vec![0u64; bins.len()];
    let mut unbinned = 0;
    for _ in 0..molecules {
        let u: f64 = rng.random();
        if u >= mass {
            unbinned += 1;
            continue;
        }
        let c = cdf.partition_point(|&v| v <= u).min(cdf.len() - 1);
        let (i, j) = (c % cells, c / cells);
        let corners = [lambda.at(i, j), lambda.at(i + 1, j), lambda.at(i, j + 1), lambda.at(i + 1, j + 1)];
        let top = corners.iter().copied().fold(0.0, f64::max);
        // bilinear density within the cell by rejection
        let (tx, ty) = loop {
            let (tx, ty): (f64, f64) = (rng.random(), rng.random());
            let v = (1.0 - ty) * ((1.0 - tx) * corners[0] + tx * corners[1])
                + ty * ((1.0 - tx) * corners[2] + tx * corners[3]);
            if rng.random::<f64>() * top <= v {
                break (tx, ty);
            }
        };
        let (x, y) = ((i as f64 + tx) * h, (j as f64 + ty) * h);
        points.push((x, y));
        match bins.locate(x, y) {
            Some(b) => counts[b] += 1,
            None => unbinned += 1,
        }
    }
    Ok(PointSample { points, counts: CountVector(counts), unbinned })
}

fn check_lengths(a: usize, b: usize) {
    assert_eq!(a, b, "intensity and count vectors differ in length");
}

/// `Σᵢ [−nΛᵢ + Yᵢ log(nΛᵢ) − log Yᵢ!]`; −∞ when a bin with counts has zero
/// intensity.
pub fn log_likelihood(lambda: &IntensityVector, counts: &CountVector, n: f64) -> f64 {
    check_lengths(lambda.len(), counts.len());
    let mut ll = 0.0;
    for (&l, &y) in lambda.0.iter().zip(&counts.0) {
        let mean = n * l;
        if y == 0 {
            ll -= mean;
        } else if mean <= 0.0 {
            return f64::NEG_INFINITY;
        } else {
            let yf = y as f64;
            ll += -mean + yf * mean.ln() - ln_gamma(yf + 1.0);
        }
    }
    ll
}

/// `Σᵢ [−n(Λᵢ − Λ₀ᵢ) + Yᵢ log(Λᵢ/Λ₀ᵢ)]`.
pub fn log_likelihood_ratio(lambda: &IntensityVector, lambda0: &IntensityVector, counts: &CountVector, n: f64) -> f64 {
    check_lengths(lambda.len(), counts.len());
    check_lengths(lambda0.len(), counts.len());
    let mut r = 0.0;
    for ((&l, &l0), &y) in lambda.0.iter().zip(&lambda0.0).zip(&counts.0) {
        r -= n * (l - l0);
        if y > 0 {
            if l <= 0.0 {
                return f64::NEG_INFINITY;
            }
            if l0 <= 0.0 {
                return f64::INFINITY;
            }
            r += y as f64 * (l / l0).ln();
        }
    }
    r
}

/// Log of the ν-mixture likelihood ratio `log (1/M) Σₘ p_{Λₘ}(Y)/p_{Λ₀}(Y)`.
pub fn log_mixture_likelihood_ratio(
    components: &[IntensityVector],
    lambda0: &IntensityVector,
    counts: &CountVector,
    n: f64,
) -> f64 {
    let logs: Vec<f64> = components.iter().map(|c| log_likelihood_ratio(c, lambda0, counts, n)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + (logs.iter().map(|l| (l - top).exp()).sum::<f64>() / logs.len() as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergences {
    pub l1: f64,
    /// `Σ (Λᵢ − Λ₀ᵢ)²/Λ₀ᵢ`.
    pub d2_squared: f64,
    /// `max |Λᵢ − Λ₀ᵢ|/Λ₀ᵢ`.
    pub dinf: f64,
}

/// ℓ¹ distance and the χ²-type divergences; a bin with `Λ₀ᵢ = 0 ≠ Λᵢ`
/// makes both weighted divergences infinite.
pub fn divergences(lambda: &IntensityVector, lambda0: &IntensityVector) -> Divergences {
    check_lengths(lambda.len(), lambda0.len());
    let mut d = Divergences { l1: 0.0, d2_squared: 0.0, dinf: 0.0 };
    for (&l, &l0) in lambda.0.iter().zip(&lambda0.0) {
        let diff = (l - l0).abs();
        d.l1 += diff;
        let rel = if l0 > 0.0 {
            diff / l0
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        d.d2_squared += if l0 > 0.0 {
            diff * diff / l0
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        d.dinf = d.dinf.max(rel);
    }
    d
}

/// Exact KL divergence between the Poisson count laws with means nΛ₀ and nΛ:
/// `n Σ [Λ₀ᵢ log(Λ₀ᵢ/Λᵢ) + Λᵢ − Λ₀ᵢ]`.
pub fn kl_exact(lambda: &IntensityVector, lambda0: &IntensityVector, n: f64) -> Result<f64> {
    check_lengths(lambda.len(), lambda0.len());
    if lambda.0.iter().chain(&lambda0.0).any(|&v| !(v > 0.0)) {
        return Err(Error::domain("KL divergence needs strictly positive intensities"));
    }
    Ok(n * lambda.0.iter().zip(&lambda0.0).map(|(&l, &l0)| l0 * (l0 / l).ln() + l - l0).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `Λ̂ᵢ = Yᵢ/n`.
    pub intensities: IntensityVector,
    /// Piecewise-constant density `Λ̂ᵢ/|Bᵢ|` on each bin.
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Density at a point (zero outside the window).
    pub fn density_at(&self, bins: &BinPartition, x: f64, y: f64) -> f64 {
        bins.locate(x, y).map_or(0.0, |b| self.densities[b])
    }

    /// Nodal field of the piecewise-constant density.
    pub fn to_field(&self, bins: &BinPartition) -> ScalarField {
        ScalarField::from_fn(bins.grid(), |x, y| self.density_at(bins, x, y))
    }
}

pub fn histogram_estimator(counts: &CountVector, n: f64, bins: &BinPartition) -> Result<Histogram> {
    if !(n > 0.0) {
        return Err(Error::domain("histogram estimator needs n > 0"));
    }
    check_lengths(counts.len(), bins.len());
    let intensities = IntensityVector(counts.0.iter().map(|&y| y as f64 / n).collect());
    let densities = intensities.0.iter().zip(bins.bins()).map(|(l, b)| l / b.area()).collect();
    Ok(Histogram { intensities, densities })
}

pub fn l1_distance(a: &IntensityVector, b: &IntensityVector) -> f64 {
    check_lengths(a.len(), b.len());
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum()
}

/// Counts CSV `bin_index,x_min,y_min,x_max,y_max,count`.
pub fn write_counts_csv<W: Write>(bins: &BinPartition, counts: &CountVector, mut out: W) -> std::io::Result<()> {
    writeln!(out, "bin_index,x_min,y_min,x_max,y_max,count")?;
    for (i, (b, c)) in bins.bins().iter().zip(&counts.0).enumerate() {
        let r = &b.rect;
        writeln!(out, "{i},{:.16e},{:.16e},{:.16e},{:.16e},{c}", r.x_min, r.y_min, r.x_max, r.y_max)?;
    }
    Ok(())
}

/// Intensities CSV `bin_index,x_min,y_min,x_max,y_max,intensity`.
pub fn write_intensities_csv<W: Write>(
    bins: &BinPartition,
    lambda: &IntensityVector,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "bin_index,x_min,y_min,x_max,y_max,intensity")?;
    for (i, (b, l)) in bins.bins().iter().zip(&lambda.0).enumerate() {
        let r = &b.rect;
        writeln!(out, "{i},{:.16e},{:.16e},{:.16e},{:.16e},{l:.16e}", r.x_min, r.y_min, r.x_max, r.y_max)?;
    }
    Ok(())
}

/// Read counts written by [`write_counts_csv`], checking the bin geometry.
pub fn read_counts_csv<R: BufRead>(bins: &BinPartition, input: R) -> Result<CountVector> {
    let mut counts = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "bin_index,x_min,y_min,x_max,y_max,count" {
                return Err(Error::config(format!("unexpected counts CSV header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 6 {
            return Err(Error::config(format!("line {}: expected 6 columns", lineno + 1)));
        }
        let bad = |e: &dyn std::fmt::Display| Error::config(format!("line {}: {e}", lineno + 1));
        let idx: usize = cols[0].parse().map_err(|e| bad(&e))?;
        let bin = bins.bins().get(idx).ok_or_else(|| bad(&"bin index out of range"))?;
        let x_min: f64 = cols[1].parse().map_err(|e| bad(&e))?;
        let y_min: f64 = cols[2].parse().map_err(|e| bad(&e))?;
        if idx != counts.len() || (x_min - bin.rect.x_min).abs() > 1e-12 || (y_min - bin.rect.y_min).abs() > 1e-12 {
            return Err(bad(&"bin geometry does not match the configured partition"));
        }
        counts.push(cols[5].parse().map_err(|e| bad(&e))?);
    }
    if counts.len() != bins.len() {
        return Err(Error::config(format!("expected {} bins, found {}", bins.len(), counts.len())));
    }
    Ok(CountVector(counts))
}
