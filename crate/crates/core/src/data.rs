//! Deterministic synthetic image dataset with known factors.
//!
//! Each 16x16 grayscale image shows a filled square. Three independent
//! factors place and size it (`pos_x`, `pos_y` in 0..8, `size` in 1..=3);
//! two correlated detail factors (`gradient_angle`, `texture_phase`) drive a
//! planar cosine texture inside the square and nothing else, so the
//! independent factors and the detail factors have disjoint visual effects.
//! The detail pair is drawn jointly Gaussian with correlation 0.8, then
//! wrapped into [0, 2pi); the independent factors are uniform and mutually
//! independent.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const IMG_SIDE: usize = 16;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;

/// Spread of the detail-factor Gaussian around its mean of pi. Small enough
/// that wrapping is negligible and the circular correlation stays at rho.
const DETAIL_STD: f64 = 0.5;
const DETAIL_RHO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub pos_x: u8,
    pub pos_y: u8,
    pub size: u8,
    pub gradient_angle: f64,
    pub texture_phase: f64,
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pos_x > 7 || self.pos_y > 7 {
            return Err(Error::domain(format!(
                "pos ({}, {}) outside 0..8",
                self.pos_x, self.pos_y
            )));
        }
        if !(1..=3).contains(&self.size) {
            return Err(Error::domain(format!("size {} outside 1..=3", self.size)));
        }
        let tau = std::f64::consts::TAU;
        for (name, v) in [
            ("gradient_angle", self.gradient_angle),
            ("texture_phase", self.texture_phase),
        ] {
            if !(0.0..tau).contains(&v) {
                return Err(Error::domain(format!("{name} {v} outside [0, 2pi)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset<T> {
    /// `[N x 1 x 256]`, pixels in [0, 1].
    pub images: Tensor<T>,
    pub factors: Vec<FactorSpec>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    seed: u64,
    n: usize,
}

/// Renders one factor configuration to a `[1 x 256]` image. Pure: the same
/// factors always produce the same pixels. Pixels inside the square are
/// `0.5 + 0.4 cos(phase + u cos(angle) + v sin(angle))` with `(u, v)` the
/// offset from the square center; outside they are 0.
pub fn render<T: Scalar>(f: &FactorSpec) -> Result<Tensor<T>> {
    f.validate()?;
    let cx = 2 * f.pos_x as i64 + 1;
    let cy = 2 * f.pos_y as i64 + 1;
    let half = f.size as i64;
    let (ca, sa) = (f.gradient_angle.cos(), f.gradient_angle.sin());
    let mut data = vec![T::zero(); IMG_PIXELS];
    for r in (cy - half).max(0)..=(cy + half).min(IMG_SIDE as i64 - 1) {
        for c in (cx - half).max(0)..=(cx + half).min(IMG_SIDE as i64 - 1) {
            let u = (c - cx) as f64;
            let v = (r - cy) as f64;
            let val = 0.5 + 0.4 * (f.texture_phase + u * ca + v * sa).cos();
            data[(r as usize) * IMG_SIDE + c as usize] = T::of(val);
        }
    }
    Tensor::new(vec![1, IMG_PIXELS], data)
}

fn draw_factors(rng: &mut Rng) -> FactorSpec {
    let pos_x = rng.uniform_usize(8) as u8;
    let pos_y = rng.uniform_usize(8) as u8;
    let size = 1 + rng.uniform_usize(3) as u8;
    let n1 = rng.normal_f64();
    let n2 = rng.normal_f64();
    let pi = std::f64::consts::PI;
    let tau = std::f64::consts::TAU;
    let a = pi + DETAIL_STD * n1;
    let b = pi + DETAIL_STD * (DETAIL_RHO * n1 + (1.0 - DETAIL_RHO * DETAIL_RHO).sqrt() * n2);
    FactorSpec {
        pos_x,
        pos_y,
        size,
        gradient_angle: a.rem_euclid(tau),
        texture_phase: b.rem_euclid(tau),
    }
}

/// I.i.d. factor draws, rendered; reproducible per seed.
pub fn sample_dataset<T: Scalar>(n: usize, seed: u64) -> Result<SynthDataset<T>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be positive".to_string()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut factors = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * IMG_PIXELS);
    for _ in 0..n {
        let f = draw_factors(&mut rng);
        let img = render::<T>(&f)?;
        data.extend_from_slice(img.data());
        factors.push(f);
    }
    Ok(SynthDataset {
        images: Tensor::new(vec![n, 1, IMG_PIXELS], data)?,
        factors,
        seed,
    })
}

impl<T: Scalar> SynthDataset<T> {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Images flattened to `[N x 256]` for the dense models.
    pub fn images_flat(&self) -> Tensor<T> {
        self.images
            .reshape(&[self.len(), IMG_PIXELS])
            .expect("images reshape")
    }

    /// Rows `[from, to)` as a new dataset (train/held-out splits).
    pub fn slice(&self, from: usize, to: usize) -> Result<SynthDataset<T>> {
        if from >= to || to > self.len() {
            return Err(Error::contract(format!(
                "slice [{from}, {to}) out of {}",
                self.len()
            )));
        }
        let flat = self.images_flat();
        let mut data = Vec::with_capacity((to - from) * IMG_PIXELS);
        for i in from..to {
            data.extend_from_slice(flat.row(i)?);
        }
        Ok(SynthDataset {
            images: Tensor::new(vec![to - from, 1, IMG_PIXELS], data)?,
            factors: self.factors[from..to].to_vec(),
            seed: self.seed,
        })
    }

    /// Discrete independent-factor table: columns pos_x, pos_y, size.
    pub fn independent_factors(&self) -> Vec<Vec<usize>> {
        vec![
            self.factors.iter().map(|f| f.pos_x as usize).collect(),
            self.factors.iter().map(|f| f.pos_y as usize).collect(),
            self.factors.iter().map(|f| (f.size - 1) as usize).collect(),
        ]
    }

    /// Writes `images.mstn`, `factors.json`, `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::io::save_tensor(dir.join("images.mstn"), &self.images)?;
        let factors = serde_json::to_string_pretty(&self.factors)
            .map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(dir.join("factors.json"), factors)?;
        let meta = serde_json::to_string_pretty(&Meta { seed: self.seed, n: self.len() })
            .map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(dir.join("meta.json"), meta)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<SynthDataset<T>> {
        let dir = dir.as_ref();
        let images = crate::io::load_tensor(dir.join("images.mstn"))?;
        let factors: Vec<FactorSpec> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("factors.json"))?)
                .map_err(|e| Error::format(e.to_string()))?;
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| Error::format(e.to_string()))?;
        if images.dims() != [meta.n, 1, IMG_PIXELS] || factors.len() != meta.n {
            return Err(Error::format("dataset files disagree on size".to_string()));
        }
        Ok(SynthDataset { images, factors, seed: meta.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_pure() {
        let f = FactorSpec {
            pos_x: 3,
            pos_y: 5,
            size: 2,
            gradient_angle: 1.0,
            texture_phase: 2.0,
        };
        assert_eq!(render::<f64>(&f).unwrap(), render::<f64>(&f).unwrap());
    }

    #[test]
    fn render_rejects_out_of_range() {
        let f = FactorSpec {
            pos_x: 8,
            pos_y: 0,
            size: 1,
            gradient_angle: 0.0,
            texture_phase: 0.0,
        };
        assert!(matches!(render::<f64>(&f), Err(Error::Domain(_))));
    }

    #[test]
    fn size3_square_has_49_support_pixels() {
        let f = FactorSpec {
            pos_x: 3,
            pos_y: 3,
            size: 3,
            gradient_angle: 0.7,
            texture_phase: 1.3,
        };
        let img = render::<f64>(&f).unwrap();
        let nz = img.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nz, 49);
    }

    #[test]
    fn pos_shift_translates_support_two_columns() {
        let base = FactorSpec {
            pos_x: 2,
            pos_y: 4,
            size: 2,
            gradient_angle: 0.3,
            texture_phase: 0.9,
        };
        let shifted = FactorSpec { pos_x: 3, ..base.clone() };
        let a = render::<f64>(&base).unwrap();
        let b = render::<f64>(&shifted).unwrap();
        for r in 0..IMG_SIDE {
            for c in 0..IMG_SIDE - 2 {
                let va = a.data()[r * IMG_SIDE + c];
                let vb = b.data()[r * IMG_SIDE + c + 2];
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds = sample_dataset::<f64>(200, 9).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let a = sample_dataset::<f32>(64, 123).unwrap();
        let b = sample_dataset::<f32>(64, 123).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.factors, b.factors);
    }

    /// Jammalamadaka-SenGupta circular correlation; for concentrated angles
    /// this approaches the Pearson correlation of the unwrapped draws.
    fn circular_correlation(a: &[f64], b: &[f64]) -> f64 {
        let mean_dir = |xs: &[f64]| {
            let s: f64 = xs.iter().map(|v| v.sin()).sum();
            let c: f64 = xs.iter().map(|v| v.cos()).sum();
            s.atan2(c)
        };
        let ma = mean_dir(a);
        let mb = mean_dir(b);
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - ma).sin() * (y - mb).sin())
            .sum();
        let da: f64 = a.iter().map(|&x| (x - ma).sin().powi(2)).sum();
        let db: f64 = b.iter().map(|&y| (y - mb).sin().powi(2)).sum();
        num / (da * db).sqrt()
    }

    #[test]
    fn detail_factors_circularly_correlated_at_rho() {
        let ds = sample_dataset::<f64>(10_000, 42).unwrap();
        let a: Vec<f64> = ds.factors.iter().map(|f| f.gradient_angle).collect();
        let b: Vec<f64> = ds.factors.iter().map(|f| f.texture_phase).collect();
        let r = circular_correlation(&a, &b);
        assert!((r - 0.8).abs() < 0.05, "circular correlation {r}");
    }

    #[test]
    fn independent_factors_have_near_zero_mi() {
        let ds = sample_dataset::<f64>(10_000, 5).unwrap();
        let fac = ds.independent_factors();
        // plug-in MI between pos_x (8 values) and size (3 values)
        let mut counts = vec![0f64; 8 * 3];
        for i in 0..ds.len() {
            counts[fac[0][i] * 3 + fac[2][i]] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let mut px = [0.0; 8];
        let mut ps = [0.0; 3];
        for x in 0..8 {
            for s in 0..3 {
                px[x] += counts[x * 3 + s] / total;
                ps[s] += counts[x * 3 + s] / total;
            }
        }
        let mut mi = 0.0;
        for x in 0..8 {
            for s in 0..3 {
                let p = counts[x * 3 + s] / total;
                if p > 0.0 {
                    mi += p * (p / (px[x] * ps[s])).ln();
                }
            }
        }
        assert!(mi < 0.01, "MI(pos_x; size) = {mi}");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset::<f32>(16, 77).unwrap();
        ds.save(dir.path()).unwrap();
        let back = SynthDataset::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.factors, ds.factors);
        assert_eq!(back.seed, 77);
    }

    #[test]
    fn slice_partitions_rows() {
        let ds = sample_dataset::<f32>(10, 1).unwrap();
        let head = ds.slice(0, 7).unwrap();
        let tail = ds.slice(7, 10).unwrap();
        assert_eq!(head.len(), 7);
        assert_eq!(tail.len(), 3);
        assert_eq!(tail.factors[0], ds.factors[7]);
        assert!(ds.slice(5, 11).is_err());
    }
}
