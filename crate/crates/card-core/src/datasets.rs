//! Seeded generators for the four 2-D benchmark distributions.
//!
//! Each generator is a pure function of its spec and seed: two interleaving
//! half-moons, two concentric circles, an isotropic Gaussian N(0, 0.1 I) and
//! a four-component Gaussian mixture centered on (+-0.5, +-0.5). The class
//! index `x` is the covariate the diffusion model conditions on.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::DetRng;

/// A response point with its discrete covariate class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub y0: [f64; 2],
    pub x: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Moons,
    Circles,
    Gaussian,
    GaussianMixture,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Circles => "circles",
            DatasetKind::Gaussian => "gaussian",
            DatasetKind::GaussianMixture => "gaussian_mixture",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise_sd: f64,
    pub inner_factor: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            noise_sd: 0.05,
            inner_factor: 0.5,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Moons | DatasetKind::Circles => 2,
            DatasetKind::Gaussian => 1,
            DatasetKind::GaussianMixture => 4,
        }
    }

    pub fn generate(&self) -> Result<Vec<LabeledSample>> {
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise_sd must be >= 0, got {}",
                self.noise_sd
            )));
        }
        match self.kind {
            DatasetKind::Moons => Ok(make_moons(self.n, self.noise_sd, self.seed)),
            DatasetKind::Circles => {
                make_circles(self.n, self.noise_sd, self.inner_factor, self.seed)
            }
            DatasetKind::Gaussian => Ok(make_gaussian(self.n, self.seed)),
            DatasetKind::GaussianMixture => Ok(make_gaussian_mixture(self.n, self.seed)),
        }
    }
}

/// Noise-free point on moon arc 0 or 1 at parameter angle `theta` in [0, pi].
///
/// Arc 0 is the upper unit half-circle centered at the origin; arc 1 is that
/// arc reflected and shifted by (1, -0.5).
pub fn moon_point(arc: usize, theta: f64) -> [f64; 2] {
    match arc {
        0 => [theta.cos(), theta.sin()],
        _ => [1.0 - theta.cos(), 0.5 - theta.sin()],
    }
}

/// Noise-free point on the outer (class 0) or inner (class 1) circle.
pub fn circle_point(class: usize, theta: f64, inner_factor: f64) -> [f64; 2] {
    let r = if class == 0 { 1.0 } else { inner_factor };
    [r * theta.cos(), r * theta.sin()]
}

/// Center of mixture component `k`; bit 0 flips the first coordinate sign,
/// bit 1 the second.
pub fn mixture_center(k: usize) -> [f64; 2] {
    let sx = if k & 1 == 0 { 0.5 } else { -0.5 };
    let sy = if k & 2 == 0 { 0.5 } else { -0.5 };
    [sx, sy]
}

pub fn make_moons(n: usize, noise_sd: f64, seed: u64) -> Vec<LabeledSample> {
    let mut rng = DetRng::new(seed);
    let n0 = n.div_ceil(2);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let arc = usize::from(i >= n0);
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        let mut p = moon_point(arc, theta);
        if noise_sd > 0.0 {
            p[0] += noise_sd * rng.normal();
            p[1] += noise_sd * rng.normal();
        }
        out.push(LabeledSample { y0: p, x: arc });
    }
    out
}

pub fn make_circles(
    n: usize,
    noise_sd: f64,
    inner_factor: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if !(0.0 < inner_factor && inner_factor < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "inner_factor must lie in (0, 1), got {inner_factor}"
        )));
    }
    let mut rng = DetRng::new(seed);
    let n0 = n.div_ceil(2);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n0);
        let theta = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let mut p = circle_point(class, theta, inner_factor);
        if noise_sd > 0.0 {
            p[0] += noise_sd * rng.normal();
            p[1] += noise_sd * rng.normal();
        }
        out.push(LabeledSample { y0: p, x: class });
    }
    Ok(out)
}

/// Isotropic N(0, 0.1 I); the covariate is the constant class 0.
pub fn make_gaussian(n: usize, seed: u64) -> Vec<LabeledSample> {
    let sd = 0.1f64.sqrt();
    let mut rng = DetRng::new(seed);
    (0..n)
        .map(|_| LabeledSample {
            y0: [sd * rng.normal(), sd * rng.normal()],
            x: 0,
        })
        .collect()
}

/// Equal-weight mixture of N(center_k, 0.01 I) over the four sign
/// combinations (+-0.5, +-0.5); component assignment drawn uniformly.
pub fn make_gaussian_mixture(n: usize, seed: u64) -> Vec<LabeledSample> {
    let sd = 0.01f64.sqrt();
    let mut rng = DetRng::new(seed);
    (0..n)
        .map(|_| {
            let k = rng.index(4);
            let c = mixture_center(k);
            LabeledSample {
                y0: [c[0] + sd * rng.normal(), c[1] + sd * rng.normal()],
                x: k,
            }
        })
        .collect()
}

/// Empirical mean of `y0` over samples of class `x`.
pub fn class_mean(samples: &[LabeledSample], x: usize) -> [f64; 2] {
    let mut sum = [0.0, 0.0];
    let mut count = 0usize;
    for s in samples.iter().filter(|s| s.x == x) {
        sum[0] += s.y0[0];
        sum[1] += s.y0[1];
        count += 1;
    }
    if count == 0 {
        return [f64::NAN, f64::NAN];
    }
    [sum[0] / count as f64, sum[1] / count as f64]
}

/// CSV with header `y1,y2,x`; floats printed in round-trip decimal form.
pub fn write_csv<W: Write>(mut w: W, samples: &[LabeledSample]) -> Result<()> {
    writeln!(w, "y1,y2,x")?;
    for s in samples {
        writeln!(w, "{},{},{}", s.y0[0], s.y0[1], s.x)?;
    }
    Ok(())
}

pub fn to_csv_string(samples: &[LabeledSample]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, samples).expect("write to Vec cannot fail");
    String::from_utf8(buf).expect("CSV output is ASCII")
}
