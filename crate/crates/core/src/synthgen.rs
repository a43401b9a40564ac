//! Synthetic ground truth: von Mises-Fisher class clusters on the sphere,
//! label-noise injection and separated out-of-distribution clusters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{normalize, sample_ambient_gaussian, sample_tangent_gaussian, UnitVector};

/// Attempts allowed when placing one OOD cluster centre.
pub const OOD_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Symmetric,
    /// Circular next-class flip `c -> (c + 1) mod C`.
    Asymmetric,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mode: NoiseMode::Symmetric,
            rate: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSpec {
    pub n_clusters: usize,
    pub n_per_cluster: usize,
    pub kappa: f64,
    /// Minimum angle (radians) between an OOD centre and every class mean.
    pub theta_min: f64,
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec {
            n_clusters: 3,
            n_per_cluster: 100,
            kappa: 20.0,
            theta_min: std::f64::consts::FRAC_PI_3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub d: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub kappa: f64,
    /// Empty means "use the first `n_classes` standard basis vectors".
    pub class_means: Vec<UnitVector>,
    pub noise: NoiseSpec,
    pub ood: OodSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            d: 8,
            n_classes: 3,
            n_per_class: 200,
            kappa: 20.0,
            class_means: Vec::new(),
            noise: NoiseSpec::default(),
            ood: OodSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d < 2 {
            return bad(format!("dataset dimension must be >= 2, got {}", self.d));
        }
        if self.n_classes == 0 || self.n_per_class == 0 {
            return bad("dataset needs at least one class and one point per class".into());
        }
        if !(self.kappa >= 0.0) || !(self.ood.kappa >= 0.0) {
            return bad("vMF concentrations must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.noise.rate) {
            return bad(format!("noise rate must lie in [0, 1), got {}", self.noise.rate));
        }
        if self.noise.rate > 0.0 && self.noise.mode != NoiseMode::None && self.n_classes < 2 {
            return bad("label noise needs at least 2 classes".into());
        }
        if self.class_means.is_empty() {
            if self.n_classes > self.d {
                return bad(format!(
                    "{} orthogonal class means do not fit in dimension {}; list class_means explicitly",
                    self.n_classes, self.d
                ));
            }
        } else {
            if self.class_means.len() != self.n_classes {
                return bad(format!(
                    "{} class means for {} classes",
                    self.class_means.len(),
                    self.n_classes
                ));
            }
            if let Some(m) = self.class_means.iter().find(|m| m.dim() != self.d) {
                return bad(format!("class mean of dimension {} in a {}-d dataset", m.dim(), self.d));
            }
            for (i, a) in self.class_means.iter().enumerate() {
                for b in &self.class_means[..i] {
                    if a == b {
                        return bad("class means must be pairwise distinct".into());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn means(&self) -> Vec<UnitVector> {
        if self.class_means.is_empty() {
            (0..self.n_classes).map(|c| UnitVector::basis(self.d, c)).collect()
        } else {
            self.class_means.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub feature: UnitVector,
    #[serde(rename = "true")]
    pub true_label: usize,
    #[serde(rename = "observed")]
    pub observed_label: usize,
}

impl LabeledPoint {
    pub fn is_noisy(&self) -> bool {
        self.true_label != self.observed_label
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub ood: Vec<UnitVector>,
}

/// `n` independent draws from vMF(`mu`, `kappa`).
///
/// The cosine to `mu` is drawn with Wood's rejection sampler; the remaining
/// direction is uniform on the sphere orthogonal to `mu`. `kappa = 0` gives
/// the uniform distribution.
pub fn sample_vmf<R: Rng + ?Sized>(mu: &UnitVector, kappa: f64, n: usize, rng: &mut R) -> Vec<UnitVector> {
    assert!(kappa >= 0.0, "vMF concentration must be non-negative");
    let m = (mu.dim() - 1) as f64;
    // b written in the cancellation-free form (d-1) / (2κ + sqrt(4κ² + (d-1)²)).
    let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m / 2.0, m / 2.0).expect("valid beta parameters");

    (0..n)
        .map(|_| {
            let w = loop {
                let zeta: f64 = beta.sample(rng);
                let w = (1.0 - (1.0 + b) * zeta) / (1.0 - (1.0 - b) * zeta);
                let u: f64 = rng.random();
                if kappa * w + m * (1.0 - x0 * w).ln() - c >= u.ln() {
                    break w.clamp(-1.0, 1.0);
                }
            };
            let dir = loop {
                let t = sample_tangent_gaussian(mu, rng);
                if let Ok(d) = normalize(t.coords()) {
                    break d;
                }
            };
            let r = (1.0 - w * w).max(0.0).sqrt();
            let coords: Vec<f64> = mu
                .as_slice()
                .iter()
                .zip(dir.as_slice())
                .map(|(a, t)| w * a + r * t)
                .collect();
            normalize(&coords).expect("vMF draw lies on the sphere")
        })
        .collect()
}

/// Flips labels according to `spec`. One Bernoulli draw is consumed per label
/// whatever the mode, so the stream stays aligned across noise settings.
pub fn inject_noise<R: Rng + ?Sized>(labels: &[usize], n_classes: usize, spec: &NoiseSpec, rng: &mut R) -> Vec<usize> {
    labels
        .iter()
        .map(|&y| {
            let flip = rng.random::<f64>() < spec.rate;
            match spec.mode {
                _ if !flip || n_classes < 2 => y,
                NoiseMode::None => y,
                NoiseMode::Asymmetric => (y + 1) % n_classes,
                NoiseMode::Symmetric => {
                    let other = rng.random_range(0..n_classes - 1);
                    if other >= y {
                        other + 1
                    } else {
                        other
                    }
                }
            }
        })
        .collect()
}

/// vMF clusters around centres drawn uniformly on the sphere, each at least
/// `ood.theta_min` radians from every class mean.
pub fn make_ood_set<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<Vec<UnitVector>> {
    let means = spec.means();
    let ood = &spec.ood;
    let max_cos = ood.theta_min.cos();
    let mut out = Vec::with_capacity(ood.n_clusters * ood.n_per_cluster);
    for _ in 0..ood.n_clusters {
        let centre = (0..OOD_PLACEMENT_ATTEMPTS)
            .filter_map(|_| normalize(&sample_ambient_gaussian(spec.d, rng)).ok())
            .find(|c| means.iter().all(|m| c.dot(m) <= max_cos))
            .ok_or(Error::PlacementFailure {
                theta_min: ood.theta_min,
                attempts: OOD_PLACEMENT_ATTEMPTS,
            })?;
        out.extend(sample_vmf(&centre, ood.kappa, ood.n_per_cluster, rng));
    }
    Ok(out)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The full synthetic dataset as a pure function of `spec` (including its seed).
///
/// Class `c` draws from stream `c`; label noise and OOD placement use their
/// own streams after the classes.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.means();
    let mut points = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    for (c, mu) in means.iter().enumerate() {
        let mut rng = stream(spec.seed, c as u64);
        points.extend(sample_vmf(mu, spec.kappa, spec.n_per_class, &mut rng).into_iter().map(|f| LabeledPoint {
            feature: f,
            true_label: c,
            observed_label: c,
        }));
    }
    let truth: Vec<usize> = points.iter().map(|p| p.true_label).collect();
    let mut noise_rng = stream(spec.seed, spec.n_classes as u64);
    let observed = inject_noise(&truth, spec.n_classes, &spec.noise, &mut noise_rng);
    for (p, y) in points.iter_mut().zip(observed) {
        p.observed_label = y;
    }
    let mut ood_rng = stream(spec.seed, spec.n_classes as u64 + 1);
    let ood = make_ood_set(spec, &mut ood_rng)?;
    Ok(Dataset { points, ood })
}

/// One line per point: `{"feature": [..], "true": int, "observed": int}`.
pub fn write_points_jsonl(points: &[LabeledPoint], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in points {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points_jsonl(path: &Path) -> Result<Vec<LabeledPoint>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        points.push(serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(points)
}
