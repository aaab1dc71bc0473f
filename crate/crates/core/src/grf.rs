//! Gaussian random fields on the periodic unit square by spectral synthesis.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Point;

/// Spectrum exponent convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentMode {
    /// `P(k) = |k|^(-1/r)`.
    PaperLiteral,
    /// `P(k) = |k|^(-r/2)`; smoother fields for larger `r`.
    #[default]
    SmoothnessMonotone,
}

fn default_grid() -> usize {
    64
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfConfig {
    pub r: f64,
    #[serde(default = "default_grid")]
    pub grid_n: usize,
    #[serde(default)]
    pub exponent_mode: ExponentMode,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GrfConfig {
    pub fn new(r: f64) -> Self {
        Self {
            r,
            grid_n: default_grid(),
            exponent_mode: ExponentMode::default(),
            amplitude: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidArgument(format!("GRF r must be positive, got {}", self.r)));
        }
        if !self.grid_n.is_power_of_two() || !(16..=512).contains(&self.grid_n) {
            return Err(Error::InvalidArgument(format!(
                "GRF grid_n must be a power of two in 16..=512, got {}",
                self.grid_n
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidArgument("GRF amplitude must be finite".into()));
        }
        Ok(())
    }

    /// Power-law exponent `a` in `P(k) = |k|^(-a)`.
    pub fn spectral_exponent(&self) -> f64 {
        match self.exponent_mode {
            ExponentMode::PaperLiteral => 1.0 / self.r,
            ExponentMode::SmoothnessMonotone => self.r / 2.0,
        }
    }
}

/// Field values on a `grid_n x grid_n` periodic grid; `value(i, j)` sits at
/// `(i / n, j / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrfField {
    n: usize,
    values: Vec<f64>,
    pub config: GrfConfig,
}

impl GrfField {
    pub fn grid_n(&self) -> usize {
        self.n
    }

    /// Row-major by `j` (y index), then `i` (x index).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[(j % self.n) * self.n + i % self.n]
    }

    /// Bilinear interpolation on the periodic grid.
    pub fn eval_at(&self, points: &[Point]) -> Result<Vec<f64>> {
        const TOL: f64 = 1e-12;
        let n = self.n as f64;
        points
            .iter()
            .map(|p| {
                let mut c = [0.0; 2];
                for d in 0..2 {
                    if !(p[d] >= -TOL && p[d] <= 1.0 + TOL) {
                        return Err(Error::InvalidArgument(format!(
                            "point {p:?} lies outside the unit square"
                        )));
                    }
                    c[d] = p[d].clamp(0.0, 1.0) * n;
                }
                let (i0, j0) = (c[0].floor(), c[1].floor());
                let (tx, ty) = (c[0] - i0, c[1] - j0);
                let (i0, j0) = (i0 as usize % self.n, j0 as usize % self.n);
                let (i1, j1) = (i0 + 1, j0 + 1);
                Ok((1.0 - tx) * (1.0 - ty) * self.value(i0, j0)
                    + tx * (1.0 - ty) * self.value(i1, j0)
                    + (1.0 - tx) * ty * self.value(i0, j1)
                    + tx * ty * self.value(i1, j1))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        let n = self.n as f64;
        for j in 0..self.n {
            for i in 0..self.n {
                writeln!(out, "{},{},{}", i as f64 / n, j as f64 / n, self.value(i, j)).unwrap();
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct C64 {
    re: f64,
    im: f64,
}

impl C64 {
    fn mul(self, o: C64) -> C64 {
        C64 {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
}

/// In-place iterative radix-2 FFT; `inverse` uses `e^{+i}` and divides by
/// the length.
fn fft(buf: &mut [C64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = (ang * k as f64).sin_cos();
                let w = C64 { re: c, im: s };
                let a = buf[start + k];
                let b = buf[start + k + len / 2].mul(w);
                buf[start + k] = C64 {
                    re: a.re + b.re,
                    im: a.im + b.im,
                };
                buf[start + k + len / 2] = C64 {
                    re: a.re - b.re,
                    im: a.im - b.im,
                };
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        for v in buf.iter_mut() {
            v.re *= s;
            v.im *= s;
        }
    }
}

fn fft2(grid: &mut [C64], n: usize, inverse: bool) {
    for row in grid.chunks_mut(n) {
        fft(row, inverse);
    }
    let mut col = vec![C64 { re: 0.0, im: 0.0 }; n];
    for i in 0..n {
        for j in 0..n {
            col[j] = grid[j * n + i];
        }
        fft(&mut col, inverse);
        for j in 0..n {
            grid[j * n + i] = col[j];
        }
    }
}

/// Signed integer frequency of FFT bin `i`.
fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Samples a field: white noise is taken to frequency space (which gives it
/// Hermitian symmetry), shaped by `sqrt(P(|k|))` with the DC mode removed,
/// transformed back, and rescaled to unit variance times `amplitude`.
pub fn grf_sample(config: &GrfConfig, seed: u64) -> Result<GrfField> {
    config.validate()?;
    let n = config.grid_n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid: Vec<C64> = (0..n * n)
        .map(|_| C64 {
            re: StandardNormal.sample(&mut rng),
            im: 0.0,
        })
        .collect();
    fft2(&mut grid, n, false);
    let a = config.spectral_exponent();
    for j in 0..n {
        for i in 0..n {
            let k = freq(i, n).hypot(freq(j, n));
            let amp = if k == 0.0 { 0.0 } else { k.powf(-a / 2.0) };
            let v = &mut grid[j * n + i];
            v.re *= amp;
            v.im *= amp;
        }
    }
    fft2(&mut grid, n, true);
    let mut values: Vec<f64> = grid.iter().map(|c| c.re).collect();
    let var = values.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::NonFinite { op: "grf_sample" });
    }
    let scale = config.amplitude / var.sqrt();
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(GrfField {
        n,
        values,
        config: *config,
    })
}

/// `count` fields with seeds `seed, seed + 1, ...`, each evaluated at
/// `points`.
pub fn grf_dataset(config: &GrfConfig, points: &[Point], count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Empty("GRF dataset needs at least one sample"));
    }
    (0..count as u64)
        .map(|i| grf_sample(config, seed.wrapping_add(i))?.eval_at(points))
        .collect()
}

/// Radially averaged periodogram: `(k, mean |F(k)|^2)` over integer shells
/// `1..n/2`.
pub fn radial_periodogram(field: &GrfField) -> Vec<(f64, f64)> {
    let n = field.n;
    let mut grid: Vec<C64> = field.values.iter().map(|&re| C64 { re, im: 0.0 }).collect();
    fft2(&mut grid, n, false);
    let shells = n / 2;
    let mut sum = vec![0.0; shells + 1];
    let mut count = vec![0usize; shells + 1];
    for j in 0..n {
        for i in 0..n {
            let k = freq(i, n).hypot(freq(j, n));
            let b = k.round() as usize;
            if b >= 1 && b <= shells {
                let c = grid[j * n + i];
                sum[b] += c.re * c.re + c.im * c.im;
                count[b] += 1;
            }
        }
    }
    (1..=shells)
        .filter(|&b| count[b] > 0)
        .map(|b| (b as f64, sum[b] / count[b] as f64))
        .collect()
}

/// Mean squared forward difference over the periodic grid, in grid units.
pub fn mean_squared_gradient(field: &GrfField) -> f64 {
    let n = field.n;
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            let v = field.value(i, j);
            acc += (field.value(i + 1, j) - v).powi(2) + (field.value(i, j + 1) - v).powi(2);
        }
    }
    acc / (n * n) as f64
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / m, sy / m);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in points {
        let dx = x.ln() - mx;
        num += dx * (y.ln() - my);
        den += dx * dx;
    }
    num / den
}

/// `x,y,value` rows for node samples.
pub fn samples_csv(points: &[Point], values: &[f64]) -> String {
    let mut out = String::from("x,y,value\n");
    for (p, v) in points.iter().zip(values) {
        writeln!(out, "{},{},{}", p[0], p[1], v).unwrap();
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: f64, n: usize) -> GrfConfig {
        GrfConfig {
            grid_n: n,
            ..GrfConfig::new(r)
        }
    }

    #[test]
    fn fft_round_trip_and_dft_agreement() {
        let n = 16;
        let x: Vec<C64> = (0..n)
            .map(|i| C64 {
                re: (i as f64 * 0.7).sin(),
                im: (i as f64 * 0.3).cos(),
            })
            .collect();
        let mut y = x.clone();
        fft(&mut y, false);
        for (k, yk) in y.iter().enumerate() {
            let mut acc = C64 { re: 0.0, im: 0.0 };
            for (t, xt) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                let w = xt.mul(C64 { re: ang.cos(), im: ang.sin() });
                acc.re += w.re;
                acc.im += w.im;
            }
            assert!((acc.re - yk.re).abs() < 1e-12 && (acc.im - yk.im).abs() < 1e-12);
        }
        fft(&mut y, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a.re - b.re).abs() < 1e-14 && (a.im - b.im).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(6.0, 48).validate().is_err());
        assert!(cfg(6.0, 8).validate().is_err());
        assert!(cfg(6.0, 1024).validate().is_err());
        assert!(cfg(0.0, 64).validate().is_err());
        assert!(cfg(6.0, 16).validate().is_ok());
    }

    #[test]
    fn sample_is_deterministic_zero_mean_unit_variance() {
        let c = cfg(6.0, 64);
        let a = grf_sample(&c, 11).unwrap();
        let b = grf_sample(&c, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), grf_sample(&c, 12).unwrap().values());
        let n2 = (64 * 64) as f64;
        let mean = a.values().iter().sum::<f64>() / n2;
        let var = a.values().iter().map(|v| v * v).sum::<f64>() / n2;
        assert!(mean.abs() <= 3.0 / 64.0, "{mean}");
        assert!((var - 1.0).abs() < 1e-12);
        let scaled = grf_sample(&GrfConfig { amplitude: 2.5, ..c }, 11).unwrap();
        for (x, y) in scaled.values().iter().zip(a.values()) {
            assert!((x - 2.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_evaluation() {
        let f = grf_sample(&cfg(4.0, 16), 3).unwrap();
        let at_grid = f.eval_at(&[[3.0 / 16.0, 5.0 / 16.0]]).unwrap()[0];
        assert_eq!(at_grid, f.value(3, 5));
        let center = f.eval_at(&[[3.5 / 16.0, 5.5 / 16.0]]).unwrap()[0];
        let avg = (f.value(3, 5) + f.value(4, 5) + f.value(3, 6) + f.value(4, 6)) / 4.0;
        assert!((center - avg).abs() < 1e-14);
        // periodic wrap at the far edge
        assert!((f.eval_at(&[[1.0, 0.0]]).unwrap()[0] - f.value(0, 0)).abs() < 1e-14);
        assert!(f.eval_at(&[[1.0 + 1e-13, -1e-13]]).is_ok());
        assert!(f.eval_at(&[[1.01, 0.5]]).is_err());
    }

    #[test]
    fn dataset_seeds_are_consecutive_and_distinct() {
        let c = cfg(6.0, 32);
        let pts: Vec<Point> = (0..20).map(|i| [i as f64 / 19.0, (i * 7 % 19) as f64 / 19.0]).collect();
        let data = grf_dataset(&c, &pts, 4, 100).unwrap();
        assert_eq!(data.len(), 4);
        assert_eq!(data[2], grf_sample(&c, 102).unwrap().eval_at(&pts).unwrap());
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(data[a], data[b]);
            }
        }
        assert!(grf_dataset(&c, &pts, 0, 0).is_err());
    }

    #[test]
    fn cross_sample_node_means_near_zero() {
        let c = cfg(6.0, 32);
        let pts = [[0.25, 0.25], [0.5, 0.75], [0.9, 0.1]];
        let count = 400;
        let data = grf_dataset(&c, &pts, count, 7).unwrap();
        for k in 0..pts.len() {
            let xs: Vec<f64> = data.iter().map(|d| d[k]).collect();
            let mean = xs.iter().sum::<f64>() / count as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64).sqrt();
            assert!(mean.abs() <= 3.0 * sd / (count as f64).sqrt(), "node {k}: {mean}");
        }
    }

    #[test]
    fn halves_have_similar_variance() {
        let c = cfg(3.0, 64);
        let (mut left, mut right) = (0.0, 0.0);
        for seed in 0..20 {
            let f = grf_sample(&c, seed).unwrap();
            for j in 0..64 {
                for i in 0..64 {
                    let v = f.value(i, j).powi(2);
                    if i < 32 {
                        left += v;
                    } else {
                        right += v;
                    }
                }
            }
        }
        assert!((left / right - 1.0).abs() <= 0.2, "{}", left / right);
    }

    #[test]
    fn literal_mode_uses_reciprocal_exponent() {
        let c = GrfConfig {
            exponent_mode: ExponentMode::PaperLiteral,
            ..cfg(4.0, 16)
        };
        assert_eq!(c.spectral_exponent(), 0.25);
        assert_eq!(cfg(4.0, 16).spectral_exponent(), 2.0);
    }

    #[test]
    fn csv_has_grid_rows() {
        let f = grf_sample(&cfg(6.0, 16), 0).unwrap();
        let csv = f.to_csv();
        assert!(csv.starts_with("x,y,value\n0,0,"));
        assert_eq!(csv.lines().count(), 16 * 16 + 1);
    }
    fn mean_slope(c: &GrfConfig, seeds: u64) -> f64 {
        let mut acc = 0.0;
        for seed in 0..seeds {
            let pg = radial_periodogram(&grf_sample(c, seed).unwrap());
            let decade: Vec<_> = pg.into_iter().filter(|&(k, _)| (3.0..=30.0).contains(&k)).collect();
            acc += log_log_slope(&decade);
        }
        acc / seeds as f64
    }

    #[test]
    fn periodogram_slope_matches_exponent() {
        for (mode, r) in [(ExponentMode::SmoothnessMonotone, 6.0), (ExponentMode::SmoothnessMonotone, 3.0), (ExponentMode::PaperLiteral, 0.5)] {
            let c = GrfConfig {
                exponent_mode: mode,
                ..cfg(r, 128)
            };
            let target = -c.spectral_exponent();
            let slope = mean_slope(&c, 20);
            assert!((slope / target - 1.0).abs() <= 0.15, "{mode:?} r={r}: {slope} vs {target}");
        }
    }

    #[test]
    fn smoothness_increases_with_r() {
        let g: Vec<f64> = [6.0, 8.0, 10.0]
            .iter()
            .map(|&r| (0..20).map(|s| mean_squared_gradient(&grf_sample(&cfg(r, 64), s).unwrap())).sum::<f64>())
            .collect();
        assert!(g[0] > g[1] && g[1] > g[2], "{g:?}");
    }
}
