//! Frozen random projections from a low-dimensional search space into prompt
//! space, plus the statistics used to scale them.
//!
//! A normal projection is scaled so that `A z` with `z ~ N(0, σ_z² I)` has
//! entries with standard deviation `α σ̂`, where `σ̂` is the observed spread of
//! the embeddings or hidden states the prompt is meant to imitate.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rounds of `μ̂ ± 3σ̂` clipping applied before reading off hidden-state stats.
pub const DEFAULT_CLIP_ROUNDS: u32 = 5;

const SIDECAR_MAGIC: &[u8; 4] = b"BBTA";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate statistics: standard deviation is zero")]
    DegenerateStatistics,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed projection file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Uniform,
    Normal,
}

impl ProjectionKind {
    fn tag(self) -> u32 {
        match self {
            ProjectionKind::Uniform => 0,
            ProjectionKind::Normal => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ProjectionKind::Uniform),
            1 => Some(ProjectionKind::Normal),
            _ => None,
        }
    }
}

impl std::str::FromStr for ProjectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(ProjectionKind::Uniform),
            "normal" => Ok(ProjectionKind::Normal),
            other => Err(format!("unknown projection kind `{other}`")),
        }
    }
}

/// Observed location and spread of one layer's hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub clip_rounds: u32,
}

/// Standard deviation of normal projection entries that matches the
/// projected prompt spread to `alpha * sigma_hat`.
pub fn compute_sigma_a(alpha: f64, sigma_hat: f64, dim: usize, sigma_z: f64) -> Result<f64, ProjectionError> {
    if sigma_hat == 0.0 {
        return Err(ProjectionError::DegenerateStatistics);
    }
    if !(alpha > 0.0) || !(sigma_hat > 0.0) || !(sigma_z > 0.0) || dim == 0 {
        return Err(ProjectionError::InvalidArgument(format!(
            "alpha={alpha}, sigma_hat={sigma_hat}, d={dim}, sigma_z={sigma_z} must all be positive"
        )));
    }
    Ok(alpha * sigma_hat / ((dim as f64).sqrt() * sigma_z))
}

/// He-style fan-in half width `√(6/d)` for uniform projections.
pub fn uniform_half_width(dim: usize) -> f64 {
    (6.0 / dim as f64).sqrt()
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pooled mean and (population) standard deviation after `clip_rounds`
/// rounds of clamping every entry into `μ̂ ± 3σ̂`.
///
/// The clamped values are scratch data; nothing is written back.
pub fn observe_stats<'a, I>(vectors: I, clip_rounds: u32) -> Result<LayerStats, ProjectionError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut values: Vec<f64> = vectors.into_iter().flatten().copied().collect();
    if values.len() < 2 {
        return Err(ProjectionError::InvalidArgument(format!(
            "need at least 2 entries for statistics, got {}",
            values.len()
        )));
    }
    for _ in 0..clip_rounds {
        let (mean, std) = moments(&values);
        let (lo, hi) = (mean - 3.0 * std, mean + 3.0 * std);
        for v in &mut values {
            *v = v.clamp(lo, hi);
        }
    }
    let (mu_hat, sigma_hat) = moments(&values);
    if sigma_hat == 0.0 {
        return Err(ProjectionError::DegenerateStatistics);
    }
    Ok(LayerStats {
        layer: 0,
        mu_hat,
        sigma_hat,
        clip_rounds,
    })
}

/// A frozen `D × d` random matrix.
///
/// Entries are drawn in f64 and rounded to f32 so the sidecar file is an
/// exact image of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: DMatrix<f64>,
    kind: ProjectionKind,
    param: f64,
    seed: u64,
}

impl ProjectionMatrix {
    /// Samples `N(0, param²)` or `U(-param, param)` entries, row-major in draw order.
    pub fn sample(
        rows: usize,
        cols: usize,
        kind: ProjectionKind,
        param: f64,
        seed: u64,
    ) -> Result<Self, ProjectionError> {
        if rows == 0 || cols == 0 {
            return Err(ProjectionError::InvalidArgument(format!(
                "projection shape must be positive, got {rows}x{cols}"
            )));
        }
        if !(param > 0.0) || !param.is_finite() {
            return Err(ProjectionError::InvalidArgument(format!(
                "distribution parameter must be positive, got {param}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = match kind {
            ProjectionKind::Normal => {
                let dist = Normal::new(0.0, param).expect("validated std");
                (0..rows * cols).map(|_| dist.sample(&mut rng) as f32 as f64).collect()
            }
            ProjectionKind::Uniform => {
                let dist = Uniform::new_inclusive(-param, param).expect("validated width");
                (0..rows * cols).map(|_| dist.sample(&mut rng) as f32 as f64).collect()
            }
        };
        Ok(Self {
            entries: DMatrix::from_row_slice(rows, cols, &values),
            kind,
            param,
            seed,
        })
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn param(&self) -> f64 {
        self.param
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `A z + p0`.
    pub fn project(&self, z: &[f64], offset: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        if z.len() != self.cols() || offset.len() != self.rows() {
            return Err(ProjectionError::DimensionMismatch(format!(
                "A is {}x{}, z has {} entries, p0 has {}",
                self.rows(),
                self.cols(),
                z.len(),
                offset.len()
            )));
        }
        let mut out = DVector::from_column_slice(offset);
        out.gemv(1.0, &self.entries, &DVector::from_column_slice(z), 1.0);
        Ok(out.as_slice().to_vec())
    }

    /// `A z` without an offset.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>, ProjectionError> {
        self.project(z, &vec![0.0; self.rows()])
    }

    /// Hash of the raw entry bits, for checking the matrix stayed frozen.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.entries.transpose().iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Sidecar layout (all little-endian): magic `BBTA`, version u32, rows u32,
    /// cols u32, kind u32, param f64, seed u64, then `rows*cols` f32 row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ProjectionError> {
        let rows = u32::try_from(self.rows()).map_err(|_| ProjectionError::InvalidArgument("too many rows".into()))?;
        let cols =
            u32::try_from(self.cols()).map_err(|_| ProjectionError::InvalidArgument("too many columns".into()))?;
        w.write_all(SIDECAR_MAGIC)?;
        w.write_all(&SIDECAR_VERSION.to_le_bytes())?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&cols.to_le_bytes())?;
        w.write_all(&self.kind.tag().to_le_bytes())?;
        w.write_all(&self.param.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut payload = Vec::with_capacity(self.rows() * self.cols() * 4);
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                payload.extend_from_slice(&(self.entries[(r, c)] as f32).to_le_bytes());
            }
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ProjectionError> {
        let mut header = [0u8; 36];
        r.read_exact(&mut header)?;
        if &header[0..4] != SIDECAR_MAGIC {
            return Err(ProjectionError::Format("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != SIDECAR_VERSION {
            return Err(ProjectionError::Format(format!("unsupported version {version}")));
        }
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let kind = ProjectionKind::from_tag(u32_at(16))
            .ok_or_else(|| ProjectionError::Format(format!("unknown kind tag {}", u32_at(16))))?;
        let param = f64::from_le_bytes(header[20..28].try_into().unwrap());
        let seed = u64::from_le_bytes(header[28..36].try_into().unwrap());
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload)?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            entries: DMatrix::from_row_slice(rows, cols, &values),
            kind,
            param,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProjectionError> {
        let file = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProjectionError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn std_of(values: impl Iterator<Item = f64> + Clone) -> f64 {
        let v: Vec<f64> = values.collect();
        moments(&v).1
    }

    #[test]
    fn sigma_a_values() {
        assert_relative_eq!(compute_sigma_a(1.0, 0.5, 1, 0.5).unwrap(), 1.0);
        assert_relative_eq!(compute_sigma_a(1.0, 0.1, 500, 0.5).unwrap(), 0.00894427, epsilon = 1e-8);
        assert_relative_eq!(compute_sigma_a(2.0, 0.1, 500, 0.5).unwrap(), 0.01788854, epsilon = 1e-8);
    }

    #[test]
    fn sigma_a_rejects_degenerate_and_bad_input() {
        assert!(matches!(
            compute_sigma_a(1.0, 0.0, 10, 0.5),
            Err(ProjectionError::DegenerateStatistics)
        ));
        assert!(matches!(
            compute_sigma_a(0.0, 0.1, 10, 0.5),
            Err(ProjectionError::InvalidArgument(_))
        ));
        assert!(matches!(
            compute_sigma_a(1.0, 0.1, 0, 0.5),
            Err(ProjectionError::InvalidArgument(_))
        ));
        assert!(matches!(
            compute_sigma_a(1.0, 0.1, 10, -0.5),
            Err(ProjectionError::InvalidArgument(_))
        ));
    }

    #[test]
    fn constant_input_is_degenerate() {
        let v = vec![3.0; 10];
        for rounds in [0, 1, 5] {
            assert!(matches!(
                observe_stats([v.as_slice()], rounds),
                Err(ProjectionError::DegenerateStatistics)
            ));
        }
        assert!(matches!(
            observe_stats([&[1.0][..]], 5),
            Err(ProjectionError::InvalidArgument(_))
        ));
        assert!(matches!(
            observe_stats(std::iter::empty::<&[f64]>(), 5),
            Err(ProjectionError::InvalidArgument(_))
        ));
    }

    /// Straight-line clipping reference, independent of `observe_stats`.
    fn clip_oracle(mut xs: Vec<f64>, rounds: u32) -> (f64, f64) {
        for _ in 0..rounds {
            let n = xs.len() as f64;
            let mut s = 0.0;
            for x in &xs {
                s += x;
            }
            let m = s / n;
            let mut ss = 0.0;
            for x in &xs {
                ss += (x - m) * (x - m);
            }
            let sd = (ss / n).sqrt();
            for x in xs.iter_mut() {
                if *x > m + 3.0 * sd {
                    *x = m + 3.0 * sd;
                }
                if *x < m - 3.0 * sd {
                    *x = m - 3.0 * sd;
                }
            }
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        (m, sd)
    }

    #[test]
    fn clipping_matches_oracle() {
        let small = vec![0.0, 0.0, 0.0, 0.0, 1000.0];
        let s = observe_stats([small.as_slice()], 1).unwrap();
        let (m, sd) = clip_oracle(small.clone(), 1);
        assert_relative_eq!(s.mu_hat, m, epsilon = 1e-12);
        assert_relative_eq!(s.sigma_hat, sd, epsilon = 1e-12);

        // with enough entries the outlier is actually clamped
        let mut big = vec![0.0; 99];
        big.extend((0..99).map(|i| (i % 3) as f64));
        big.push(1000.0);
        for rounds in 0..6 {
            let s = observe_stats([&big[..99], &big[99..]], rounds).unwrap();
            let (m, sd) = clip_oracle(big.clone(), rounds);
            assert_relative_eq!(s.mu_hat, m, epsilon = 1e-9);
            assert_relative_eq!(s.sigma_hat, sd, epsilon = 1e-9);
        }
        let raw = observe_stats([big.as_slice()], 0).unwrap().sigma_hat;
        let clipped = observe_stats([big.as_slice()], 1).unwrap().sigma_hat;
        assert!(clipped < raw);
    }

    #[test]
    fn gaussian_clipping_shrinks_std_slightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect();
        let s = observe_stats([xs.as_slice()], DEFAULT_CLIP_ROUNDS).unwrap();
        assert!((0.93..=1.0).contains(&s.sigma_hat), "sigma_hat {}", s.sigma_hat);
    }

    #[test]
    fn sample_shape_and_determinism() {
        let a = ProjectionMatrix::sample(4, 2, ProjectionKind::Normal, 0.01, 7).unwrap();
        let b = ProjectionMatrix::sample(4, 2, ProjectionKind::Normal, 0.01, 7).unwrap();
        let c = ProjectionMatrix::sample(4, 2, ProjectionKind::Normal, 0.01, 8).unwrap();
        assert_eq!((a.rows(), a.cols()), (4, 2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(ProjectionMatrix::sample(0, 2, ProjectionKind::Normal, 0.01, 7).is_err());
        assert!(ProjectionMatrix::sample(2, 2, ProjectionKind::Uniform, 0.0, 7).is_err());
    }

    #[test]
    fn entry_spread_matches_distribution() {
        let a = ProjectionMatrix::sample(10_000, 100, ProjectionKind::Normal, 0.01, 1).unwrap();
        let sd = std_of(a.entries().iter().copied());
        assert!((sd / 0.01 - 1.0).abs() < 0.02, "normal std {sd}");

        let b = 0.03;
        let u = ProjectionMatrix::sample(10_000, 100, ProjectionKind::Uniform, b, 2).unwrap();
        let sd = std_of(u.entries().iter().copied());
        assert!((sd / (b / 3f64.sqrt()) - 1.0).abs() < 0.02, "uniform std {sd}");
        assert!(u.entries().iter().all(|v| v.abs() <= b + 1e-7));
    }

    #[test]
    fn project_trivial_cases() {
        let a = ProjectionMatrix::sample(5, 3, ProjectionKind::Normal, 1.0, 3).unwrap();
        let p0 = vec![0.5, -1.0, 2.0, 0.0, 3.5];
        assert_eq!(a.project(&[0.0; 3], &p0).unwrap(), p0);
        assert!(matches!(
            a.project(&[0.0; 2], &p0),
            Err(ProjectionError::DimensionMismatch(_))
        ));
        assert!(matches!(
            a.project(&[0.0; 3], &p0[..4]),
            Err(ProjectionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn project_matches_naive_matvec() {
        let a = ProjectionMatrix::sample(5, 3, ProjectionKind::Normal, 1.0, 4).unwrap();
        let z = [0.3, -1.7, 2.2];
        let p0 = [1.0, 2.0, 3.0, 4.0, 5.0];
        let got = a.project(&z, &p0).unwrap();
        for i in 0..5 {
            let mut acc = p0[i];
            for k in 0..3 {
                acc += a.entries()[(i, k)] * z[k];
            }
            assert!((got[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn sidecar_roundtrip_is_exact() {
        let a = ProjectionMatrix::sample(7, 3, ProjectionKind::Uniform, 0.2, 9).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 36 + 7 * 3 * 4);
        let b = ProjectionMatrix::read_from(buf.as_slice()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());

        buf[0] = b'X';
        assert!(matches!(
            ProjectionMatrix::read_from(buf.as_slice()),
            Err(ProjectionError::Format(_))
        ));
    }
}
