//! Synthetic training data: 2-d heat equation with a spatially varying
//! diffusivity, insulated boundaries, and a fixed Gaussian-bump initial
//! condition. One sample maps a diffusivity field to the time evolution of
//! the temperature, solved with an explicit conservative stencil.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorfile::write_tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub n_samples: usize,
    /// Square grid edge length.
    pub grid: usize,
    /// Stored solution frames per sample.
    pub n_t: usize,
    pub seed: u64,
    pub out_dir: String,
}

/// Generation record written next to the sample files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: usize,
    pub grid: usize,
    pub n_t: usize,
    pub seed: u64,
    pub total_time: f64,
    pub bump_center: (f64, f64),
    pub bump_sigma: f64,
    pub input_pattern: String,
    pub target_pattern: String,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(dir.as_ref().join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))
    }

    pub fn input_path(&self, dir: impl AsRef<Path>, index: usize) -> PathBuf {
        dir.as_ref().join(self.input_pattern.replace("{i}", &index.to_string()))
    }

    pub fn target_path(&self, dir: impl AsRef<Path>, index: usize) -> PathBuf {
        dir.as_ref().join(self.target_pattern.replace("{i}", &index.to_string()))
    }
}

/// One explicit step of `u' = u + dt * div(kappa grad u)` on an `n x n` grid
/// with zero-flux boundaries, centered differences, and face-averaged
/// diffusivity. Requires `dt <= h^2 / (4 max kappa)` for stability.
pub fn heat_step(u: &[f64], kappa: &[f64], n: usize, dt: f64, h: f64) -> Result<Vec<f64>> {
    if u.len() != n * n || kappa.len() != n * n {
        return Err(Error::invalid("heat_step: grids must be n*n"));
    }
    let kmax = kappa.iter().cloned().fold(0.0f64, f64::max);
    if !(dt > 0.0) || dt > h * h / (4.0 * kmax) {
        return Err(Error::invalid(format!(
            "heat_step: dt {dt} violates stability bound {}",
            h * h / (4.0 * kmax)
        )));
    }
    let r = dt / (h * h);
    let mut out = u.to_vec();
    let at = |i: usize, j: usize| i * n + j;
    for i in 0..n {
        for j in 0..n {
            let c = at(i, j);
            let mut flux = 0.0;
            // interior faces only: zero flux through the boundary
            if i + 1 < n {
                let k = 0.5 * (kappa[c] + kappa[at(i + 1, j)]);
                flux += k * (u[at(i + 1, j)] - u[c]);
            }
            if i > 0 {
                let k = 0.5 * (kappa[c] + kappa[at(i - 1, j)]);
                flux += k * (u[at(i - 1, j)] - u[c]);
            }
            if j + 1 < n {
                let k = 0.5 * (kappa[c] + kappa[at(i, j + 1)]);
                flux += k * (u[at(i, j + 1)] - u[c]);
            }
            if j > 0 {
                let k = 0.5 * (kappa[c] + kappa[at(i, j - 1)]);
                flux += k * (u[at(i, j - 1)] - u[c]);
            }
            out[c] = u[c] + r * flux;
        }
    }
    Ok(out)
}

/// Positive, smooth diffusivity: exponentiated box-blurred noise normalized
/// to unit amplitude, so values land in roughly [1/e, e].
pub fn sample_kappa(n: usize, seed: u64, sample: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut field: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    for _ in 0..6 {
        field = box_blur(&field, n);
    }
    let amp = field.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-12);
    field.iter().map(|v| (v / amp).exp()).collect()
}

fn box_blur(field: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            let mut count = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii >= 0 && jj >= 0 && (ii as usize) < n && (jj as usize) < n {
                        acc += field[ii as usize * n + jj as usize];
                        count += 1.0;
                    }
                }
            }
            out[i * n + j] = acc / count;
        }
    }
    out
}

fn gaussian_bump(n: usize, center: (f64, f64), sigma: f64) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n * n)
        .map(|c| {
            let (x, y) = ((c / n) as f64 * h, (c % n) as f64 * h);
            let d2 = (x - center.0).powi(2) + (y - center.1).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Simulate one sample and return its frames (the solution at `n_t` evenly
/// spaced times after the initial condition).
pub fn simulate_sample(kappa: &[f64], n: usize, n_t: usize, total_time: f64) -> Result<Vec<Vec<f64>>> {
    let h = 1.0 / (n - 1) as f64;
    let kmax = kappa.iter().cloned().fold(0.0f64, f64::max);
    let dt = 0.9 * h * h / (4.0 * kmax);
    let steps = (total_time / dt).ceil() as usize;
    let dt = total_time / steps as f64;
    let mut u = gaussian_bump(n, BUMP_CENTER, BUMP_SIGMA);
    let mut frames = Vec::with_capacity(n_t);
    let mut recorded = 0usize;
    for s in 1..=steps {
        u = heat_step(&u, kappa, n, dt, h)?;
        // frame boundaries at s = round(j * steps / n_t)
        while recorded < n_t && s == ((recorded + 1) * steps).div_ceil(n_t) {
            frames.push(u.clone());
            recorded += 1;
        }
    }
    while recorded < n_t {
        frames.push(u.clone());
        recorded += 1;
    }
    Ok(frames)
}

const BUMP_CENTER: (f64, f64) = (0.5, 0.5);
const BUMP_SIGMA: f64 = 0.12;
const TOTAL_TIME: f64 = 0.03;

/// Generate the dataset: per sample an input file `(1, n, n, 1)` holding the
/// diffusivity and a target file `(1, n, n, n_t)` holding the solution
/// frames, plus a manifest. Deterministic in the seed.
pub fn gen_dataset(config: &GenDataConfig) -> Result<DatasetManifest> {
    if config.grid < 8 {
        return Err(Error::invalid("grid must be at least 8"));
    }
    if config.n_t < 2 {
        return Err(Error::invalid("n_t must be at least 2"));
    }
    let n = config.grid;
    let dir = Path::new(&config.out_dir);
    std::fs::create_dir_all(dir)?;

    let manifest = DatasetManifest {
        n_samples: config.n_samples,
        grid: n,
        n_t: config.n_t,
        seed: config.seed,
        total_time: TOTAL_TIME,
        bump_center: BUMP_CENTER,
        bump_sigma: BUMP_SIGMA,
        input_pattern: "input_{i}.dfno".into(),
        target_pattern: "target_{i}.dfno".into(),
    };

    let chunk_spatial = n.div_ceil(4);
    for s in 0..config.n_samples {
        let kappa = sample_kappa(n, config.seed, s as u64);
        let frames = simulate_sample(&kappa, n, config.n_t, TOTAL_TIME)?;
        // input (1, n, n, 1): channel-major spatial grid
        write_tensor(
            manifest.input_path(dir, s),
            &[1, n, n, 1],
            &[1, chunk_spatial, chunk_spatial, 1],
            &kappa,
        )?;
        // target (1, n, n, n_t): time varies fastest
        let mut target = vec![0.0f64; n * n * config.n_t];
        for (t, frame) in frames.iter().enumerate() {
            for c in 0..n * n {
                target[c * config.n_t + t] = frame[c];
            }
        }
        write_tensor(
            manifest.target_path(dir, s),
            &[1, n, n, config.n_t],
            &[1, chunk_spatial, chunk_spatial, config.n_t],
            &target,
        )?;
    }

    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_field_is_a_fixed_point() {
        let n = 8;
        let u = vec![0.7; n * n];
        let kappa = vec![1.0; n * n];
        let h = 1.0 / (n - 1) as f64;
        let out = heat_step(&u, &kappa, n, 0.9 * h * h / 4.0, h).unwrap();
        for (&a, &b) in out.iter().zip(&u) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_is_conserved_per_step() {
        let n = 16;
        let kappa = sample_kappa(n, 3, 0);
        let u = gaussian_bump(n, (0.4, 0.6), 0.15);
        let h = 1.0 / (n - 1) as f64;
        let kmax = kappa.iter().cloned().fold(0.0f64, f64::max);
        let out = heat_step(&u, &kappa, n, 0.9 * h * h / (4.0 * kmax), h).unwrap();
        let before: f64 = u.iter().sum();
        let after: f64 = out.iter().sum();
        assert!((before - after).abs() < 1e-12 * before);
    }

    #[test]
    fn hot_cell_spreads_and_max_decreases() {
        let n = 10;
        let mut u = vec![0.0; n * n];
        u[5 * n + 5] = 1.0;
        let kappa = vec![1.0; n * n];
        let h = 1.0 / (n - 1) as f64;
        let dt = 0.9 * h * h / 4.0;
        let mut spread_prev = 1;
        for _ in 0..5 {
            u = heat_step(&u, &kappa, n, dt, h).unwrap();
            let spread = u.iter().filter(|&&v| v > 1e-12).count();
            assert!(spread >= spread_prev);
            spread_prev = spread;
            let max = u.iter().cloned().fold(0.0f64, f64::max);
            assert!(max < 1.0);
            assert!(u.iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn stability_violation_is_rejected() {
        let n = 8;
        let u = vec![0.0; n * n];
        let kappa = vec![2.0; n * n];
        let h = 1.0 / (n - 1) as f64;
        assert!(heat_step(&u, &kappa, n, h * h, h).is_err());
    }

    #[test]
    fn generated_samples_obey_the_physics_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let config = GenDataConfig {
            n_samples: 3,
            grid: 16,
            n_t: 4,
            seed: 7,
            out_dir: dir.path().to_string_lossy().into_owned(),
        };
        let manifest = gen_dataset(&config).unwrap();
        let bump = gaussian_bump(16, manifest.bump_center, manifest.bump_sigma);
        let (lo, hi) = (
            bump.iter().cloned().fold(f64::INFINITY, f64::min),
            bump.iter().cloned().fold(0.0f64, f64::max),
        );
        for s in 0..3 {
            let (_, kappa) = crate::tensorfile::read_tensor::<f64>(manifest.input_path(dir.path(), s)).unwrap();
            assert!(kappa.iter().all(|&k| k > 0.0), "kappa positive");
            let (h, target) = crate::tensorfile::read_tensor::<f64>(manifest.target_path(dir.path(), s)).unwrap();
            assert_eq!(h.dims, vec![1, 16, 16, 4]);
            // maximum principle for pure diffusion with insulated boundaries
            assert!(target.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            gen_dataset(&GenDataConfig {
                n_samples: 2,
                grid: 12,
                n_t: 3,
                seed: 11,
                out_dir: dir.path().to_string_lossy().into_owned(),
            })
            .unwrap();
        }
        for name in ["input_0.dfno", "target_1.dfno", "manifest.json"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }
}
