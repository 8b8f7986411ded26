//! Gaussian random field prior for the latent field W, its rescaling and
//! the exponential link to the diffusivity D.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect, RegionMask, ScalarField};

/// Largest active node count handled by the dense factorization.
pub const MAX_ACTIVE_NODES: usize = 20_000;
const MAX_JITTER: f64 = 1e-4;
const LINK_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaternConfig {
    /// Smoothness ν, one of 0.5, 1.5, 2.5.
    pub nu: f64,
    pub length_scale: f64,
    pub jitter: f64,
}

impl Default for MaternConfig {
    fn default() -> Self {
        MaternConfig { nu: 2.5, length_scale: 0.15, jitter: 1e-8 }
    }
}

impl MaternConfig {
    pub fn validate(&self) -> Result<()> {
        if ![0.5, 1.5, 2.5].contains(&self.nu) {
            return Err(Error::config(format!("unsupported Matérn smoothness {}; use 0.5, 1.5 or 2.5", self.nu)));
        }
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(Error::config(format!("Matérn length scale must be positive, got {}", self.length_scale)));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::config("Matérn jitter must be nonnegative"));
        }
        Ok(())
    }
}

/// Unit-variance Matérn covariance at distance `r`.
pub fn matern_covariance(r: f64, config: &MaternConfig) -> Result<f64> {
    config.validate()?;
    if !(r >= 0.0) {
        return Err(Error::domain(format!("distance must be nonnegative, got {r}")));
    }
    Ok(matern_unchecked(r, config.nu, config.length_scale))
}

#[inline]
fn matern_unchecked(r: f64, nu: f64, ell: f64) -> f64 {
    let t = r / ell;
    if nu == 0.5 {
        (-t).exp()
    } else if nu == 1.5 {
        let a = 3f64.sqrt() * t;
        (1.0 + a) * (-a).exp()
    } else {
        let a = 5f64.sqrt() * t;
        (1.0 + a + a * a / 3.0) * (-a).exp()
    }
}

/// Cholesky factor of `cov + jitter·I`, escalating the jitter tenfold up to
/// `max_jitter`. Returns the lower factor and the jitter used.
pub fn factorize(cov: &DMatrix<f64>, jitter: f64, max_jitter: f64) -> Result<(DMatrix<f64>, f64)> {
    let mut j = jitter;
    loop {
        let mut m = cov.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += j;
        }
        if let Some(ch) = Cholesky::new(m) {
            if j > jitter {
                log::warn!("covariance factorization needed jitter {j:e}");
            }
            return Ok((ch.unpack(), j));
        }
        let next = if j == 0.0 { 1e-8 } else { j * 10.0 };
        if next > max_jitter * (1.0 + 1e-12) {
            return Err(Error::Factorization { jitter: j });
        }
        j = next;
    }
}

/// Matérn field on the active nodes of a mask, zero elsewhere.
#[derive(Debug, Clone)]
pub struct GpSampler {
    grid: Grid,
    config: MaternConfig,
    active: Vec<usize>,
    factor: DMatrix<f64>,
    jitter: f64,
}

impl GpSampler {
    pub fn new(config: MaternConfig, grid: Grid, mask: &RegionMask) -> Result<Self> {
        config.validate()?;
        let active = mask.active_indices();
        if active.is_empty() {
            return Err(Error::config("prior support contains no grid nodes"));
        }
        if active.len() > MAX_ACTIVE_NODES {
            return Err(Error::config(format!(
                "prior support has {} nodes, dense factorization is limited to {MAX_ACTIVE_NODES}",
                active.len()
            )));
        }
        let cov = covariance(&grid, &active, &config, 0.0);
        let (factor, jitter) = factorize(&cov, config.jitter, MAX_JITTER)?;
        Ok(GpSampler { grid, config, active, factor, jitter })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Pointwise prior variance on active nodes.
    pub fn marginal_variance(&self) -> f64 {
        1.0 + self.jitter
    }

    /// `‖C − F·Fᵀ‖_max` including the jitter actually used.
    pub fn factorization_residual(&self) -> f64 {
        let cov = covariance(&self.grid, &self.active, &self.config, self.jitter);
        let rebuilt = &self.factor * self.factor.transpose();
        (cov - rebuilt).amax()
    }

    /// `F·ξ` on the active nodes.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ScalarField {
        let xi = DVector::from_iterator(self.active.len(), (0..self.active.len()).map(|_| rng.sample(StandardNormal)));
        let values = &self.factor * xi;
        let mut out = vec![0.0; self.grid.len()];
        for (&k, v) in self.active.iter().zip(values.iter()) {
            out[k] = *v;
        }
        ScalarField::from_vec_unchecked(self.grid, out)
    }
}

fn covariance(grid: &Grid, active: &[usize], config: &MaternConfig, jitter: f64) -> DMatrix<f64> {
    let pts: Vec<(f64, f64)> = active.iter().map(|&k| grid.node(k)).collect();
    DMatrix::from_fn(pts.len(), pts.len(), |a, b| {
        let r = ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
        matern_unchecked(r, config.nu, config.length_scale) + if a == b { jitter } else { 0.0 }
    })
}

pub fn build_sampler(config: MaternConfig, grid: Grid, mask: &RegionMask) -> Result<GpSampler> {
    GpSampler::new(config, grid, mask)
}

pub fn sample_w<R: Rng + ?Sized>(sampler: &GpSampler, rng: &mut R) -> ScalarField {
    sampler.sample(rng)
}

/// `n^{−d/(4α+2d)}` with d = 2.
pub fn rescale_factor(n: f64, alpha: f64) -> Result<f64> {
    if !(n >= 1.0) {
        return Err(Error::domain(format!("rescaling needs n ≥ 1, got {n}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::config(format!("rescaling smoothness must be positive, got {alpha}")));
    }
    Ok(n.powf(-2.0 / (4.0 * alpha + 4.0)))
}

/// `W = n^{−d/(4α+2d)}·ζ·w`.
pub fn rescale(w: &ScalarField, n: f64, alpha: f64, zeta: &ScalarField) -> Result<ScalarField> {
    let f = rescale_factor(n, alpha)?;
    Ok(w.mul(zeta).scale(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub offset: f64,
    pub scale: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig { offset: 0.25, scale: 0.25 }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset > 0.0 && self.scale > 0.0) {
            return Err(Error::config(format!("link offset and scale must be positive, got {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, w: f64) -> f64 {
        self.offset + self.scale * w.clamp(-LINK_CLAMP, LINK_CLAMP).exp()
    }
}

/// `D = c₀ + s·exp(W)` and the number of nodes whose W was clamped.
pub fn link_counted(w: &ScalarField, cfg: &LinkConfig) -> (ScalarField, usize) {
    let clamped = w.values().iter().filter(|v| v.abs() > LINK_CLAMP).count();
    if clamped > 0 {
        log::debug!("link clamped {clamped} nodes");
    }
    (w.map(|v| cfg.apply(v)), clamped)
}

pub fn link(w: &ScalarField, cfg: &LinkConfig) -> ScalarField {
    link_counted(w, cfg).0
}

/// `W = log((D − c₀)/s)`.
pub fn inverse_link(d: &ScalarField, cfg: &LinkConfig) -> Result<ScalarField> {
    if let Some(v) = d.values().iter().find(|&&v| !(v > cfg.offset)) {
        return Err(Error::domain(format!("diffusivity {v} is not above the link offset {}", cfg.offset)));
    }
    Ok(d.map(|v| ((v - cfg.offset) / cfg.scale).ln()))
}

/// Quintic smoothstep `6t⁵ − 15t⁴ + 10t³` on `[0, 1]`.
#[inline]
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

/// Cutoff equal to 1 on `inner`, 0 outside `outer`, with C² ramps of
/// width `margin` just outside `inner`.
pub fn make_cutoff(grid: Grid, inner: &Rect, outer: &Rect, margin: f64) -> Result<ScalarField> {
    let h = grid.h();
    if margin < 2.0 * h * (1.0 - 1e-12) {
        return Err(Error::config(format!("cutoff margin {margin} is below two grid cells ({})", 2.0 * h)));
    }
    if !inner.is_valid() || !outer.is_valid() {
        return Err(Error::config("cutoff regions must be nonempty rectangles"));
    }
    let slack = 1e-12;
    let gaps =
        [inner.x_min - outer.x_min, outer.x_max - inner.x_max, inner.y_min - outer.y_min, outer.y_max - inner.y_max];
    if gaps.iter().any(|&g| g < margin - slack) {
        return Err(Error::config(format!(
            "inner region {inner:?} is closer than the margin {margin} to the outer region {outer:?}"
        )));
    }
    let ramp = |v: f64, lo: f64, hi: f64| {
        if v < lo {
            smoothstep((v - (lo - margin)) / margin)
        } else if v > hi {
            smoothstep(((hi + margin) - v) / margin)
        } else {
            1.0
        }
    };
    Ok(ScalarField::from_fn(grid, |x, y| ramp(x, inner.x_min, inner.x_max) * ramp(y, inner.y_min, inner.y_max)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn matern_examples() {
        let c = MaternConfig::default();
        assert_eq!(matern_covariance(0.0, &c).unwrap(), 1.0);
        let half = MaternConfig { nu: 0.5, ..c };
        assert!((matern_covariance(0.15, &half).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 1..200 {
            let v = matern_covariance(k as f64 * 0.01, &c).unwrap();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(matern_covariance(10.0, &c).unwrap() < 1e-30);
        assert!(matern_covariance(0.1, &MaternConfig { nu: 1.0, ..c }).is_err());
        assert!(matern_covariance(-0.1, &c).is_err());
        let r = 0.1;
        let a = 3f64.sqrt() * r / 0.15;
        let v = matern_covariance(r, &MaternConfig { nu: 1.5, ..c }).unwrap();
        assert!((v - (1.0 + a) * (-a).exp()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_pair_needs_jitter() {
        let cov = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(factorize(&cov, 0.0, 0.0), Err(Error::Factorization { .. })));
        let (l, j) = factorize(&cov, 1e-8, MAX_JITTER).unwrap();
        assert!(j >= 1e-8);
        assert!((&l * l.transpose() - cov).amax() <= j + 1e-15);
    }

    fn sampler() -> GpSampler {
        let g = Grid::new(17).unwrap();
        let mask = RegionMask::from_rect(g, &Rect::centered(0.125));
        GpSampler::new(MaternConfig::default(), g, &mask).unwrap()
    }

    #[test]
    fn sampler_statistics() {
        let s = sampler();
        assert!(s.factorization_residual() <= 1e-6);
        let g = s.grid();
        let (a, b) = (g.index(8, 8), g.index(8 + 2, 8)); // distance 2h = 0.125
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 5000;
        let mut mean = vec![0.0; g.len()];
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for _ in 0..m {
            let w = sample_w(&s, &mut rng);
            let (va, vb) = (w.values()[a], w.values()[b]);
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
            for (acc, v) in mean.iter_mut().zip(w.values()) {
                *acc += v / m as f64;
            }
        }
        let var = saa / m as f64;
        assert!((var - 1.0).abs() < 0.1, "{var}");
        let corr = sab / (saa * sbb).sqrt();
        let expect = matern_covariance(0.125, &MaternConfig::default()).unwrap();
        assert!((corr - expect).abs() < 0.05, "{corr} vs {expect}");
        assert!(mean.iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn samples_are_masked_and_reproducible() {
        let s = sampler();
        let w1 = sample_w(&s, &mut ChaCha8Rng::seed_from_u64(11));
        let w2 = sample_w(&s, &mut ChaCha8Rng::seed_from_u64(11));
        let w3 = sample_w(&s, &mut ChaCha8Rng::seed_from_u64(12));
        assert_eq!(w1, w2);
        assert!(w1.sub(&w3).max_abs() > 0.0);
        let g = s.grid();
        for k in 0..g.len() {
            if !s.active().contains(&k) {
                assert_eq!(w1.values()[k], 0.0);
            }
        }
    }

    #[test]
    fn rescale_examples() {
        let g = Grid::new(9).unwrap();
        let w = ScalarField::from_fn(g, |x, y| x - y);
        let one = ScalarField::constant(g, 1.0);
        assert_eq!(rescale(&w, 1.0, 2.5, &one).unwrap(), w);
        assert!((rescale_factor(1e7, 2.5).unwrap() - 0.1).abs() < 1e-14);
        let r = rescale(&one, 1e6, 2.5, &one).unwrap();
        assert!(r.values().iter().all(|&v| (v - 1e6f64.powf(-1.0 / 7.0)).abs() < 1e-15));
        assert!(rescale(&w, 0.5, 2.5, &one).is_err());
        // n ↦ 2^{(4α+2d)/d}·n halves the factor, n ↦ 2^{4α+2d}·n quarters it
        let alpha = 2.5;
        let a = rescale_factor(100.0, alpha).unwrap();
        let b = rescale_factor(100.0 * 2f64.powf((4.0 * alpha + 4.0) / 2.0), alpha).unwrap();
        assert!((b / a - 0.5).abs() < 1e-14);
        let c = rescale_factor(100.0 * 2f64.powf(4.0 * alpha + 4.0), alpha).unwrap();
        assert!((c / a - 0.25).abs() < 1e-14);
    }

    #[test]
    fn link_examples() {
        let g = Grid::new(9).unwrap();
        let cfg = LinkConfig::default();
        let d = link(&ScalarField::zeros(g), &cfg);
        assert!(d.values().iter().all(|&v| v == 0.5));
        let paper = LinkConfig { offset: 15.0, scale: 0.25 };
        let w = ScalarField::from_fn(g, |x, y| 2.0 * x - y);
        let d = link(&w, &paper);
        for (dv, wv) in d.values().iter().zip(w.values()) {
            assert!((dv - (15.0 + wv.exp() / 4.0)).abs() < 1e-13);
        }
        let (d, clamped) = link_counted(&ScalarField::constant(g, 1e3), &cfg);
        assert_eq!(clamped, g.len());
        assert!(d.values().iter().all(|v| v.is_finite()));
        assert!(inverse_link(&ScalarField::constant(g, 0.25), &cfg).is_err());
        let back = inverse_link(&ScalarField::constant(g, 0.5), &cfg).unwrap();
        assert!(back.values().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn paper_truth_round_trip() {
        let g = Grid::new(33).unwrap();
        let cfg = LinkConfig { offset: 15.0, scale: 0.25 };
        let w0 = ScalarField::from_fn(g, |x, y| 5.0 * (-10.0 * x * x - 10.0 * (y - 0.4).powi(2)).exp());
        let back = inverse_link(&link(&w0, &cfg), &cfg).unwrap();
        assert!(back.sub(&w0).max_abs() < 1e-12);
    }

    #[test]
    fn cutoff_examples() {
        let g = Grid::new(33).unwrap();
        let inner = Rect::centered(0.125);
        let outer = Rect::centered(0.0625);
        let z = make_cutoff(g, &inner, &outer, 0.0625).unwrap();
        assert_eq!(z.at(16, 16), 1.0);
        assert_eq!(z.at(4, 16), 1.0);
        assert_eq!(z.at(1, 16), 0.0);
        assert_eq!(z.at(2, 16), 0.0);
        assert_eq!(z.at(0, 0), 0.0);
        // ramp midpoint x = 0.09375 is node 3
        assert!((z.at(3, 16) - 0.5).abs() < 1e-12);
        assert!(z.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(make_cutoff(g, &inner, &outer, 0.03).is_err());
        assert!(make_cutoff(g, &Rect::centered(0.08), &outer, 0.0625).is_err());
    }

    proptest::proptest! {
        #[test]
        fn link_round_trip(values in proptest::collection::vec(1e-3..50.0f64, 81), w in -3.0..20.0f64) {
            let g = Grid::new(9).unwrap();
            let cfg = LinkConfig::default();
            let d = ScalarField::from_values(g, values.iter().map(|v| v + cfg.offset).collect()).unwrap();
            let back = link(&inverse_link(&d, &cfg).unwrap(), &cfg);
            for (a, b) in back.values().iter().zip(d.values()) {
                proptest::prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
            }
            let wf = ScalarField::constant(g, w);
            let wb = inverse_link(&link(&wf, &cfg), &cfg).unwrap();
            proptest::prop_assert!(wb.sub(&wf).max_abs() < 1e-12 * w.abs().max(1.0));
        }

        #[test]
        fn link_is_monotone(a in proptest::collection::vec(-5.0..5.0f64, 81), bump in 0.0..3.0f64) {
            let g = Grid::new(9).unwrap();
            let cfg = LinkConfig::default();
            let w1 = ScalarField::from_values(g, a).unwrap();
            let w2 = w1.map(|v| v + bump);
            let (d1, d2) = (link(&w1, &cfg), link(&w2, &cfg));
            proptest::prop_assert!(d1.values().iter().zip(d2.values()).all(|(x, y)| x <= y));
            proptest::prop_assert!(d1.min() > 0.25);
        }
    }
}
