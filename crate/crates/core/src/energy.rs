//! Free-energy surface over the sphere induced by a weighted feature bank.
//!
//! Each class `c` defines a weighted von Mises-Fisher kernel density over its
//! bank entries. Its free energy at `z` is
//!
//! ```text
//! E(z; B_c) = -tau * log sum_{j in N_K(z)} w_j exp(z·k_j / tau)
//! ```
//!
//! where `N_K(z)` holds the `K` entries of the class most similar to `z`. The
//! global potential `U(z)` is the minimum over classes: low inside a class
//! core, high in the gaps between classes and far from all of them.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{dot, project_tangent, TangentVector, UnitVector};

pub const DEFAULT_CLASS_CAPACITY: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub weight: f64,
    pub feature: UnitVector,
}

/// Class-indexed store of weighted unit features with a per-class FIFO bound.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    classes: Vec<VecDeque<BankEntry>>,
    capacity: usize,
}

impl FeatureBank {
    pub fn new(n_classes: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "bank capacity must be positive");
        FeatureBank {
            classes: vec![VecDeque::new(); n_classes],
            capacity,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(VecDeque::is_empty)
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries().next().map(|e| e.feature.dim())
    }

    /// Appends an entry to its class, evicting the oldest entry of that
    /// class once the capacity is reached.
    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        if !(0.0..=1.0).contains(&entry.weight) {
            return Err(Error::Domain(format!(
                "bank weight {} outside [0, 1]",
                entry.weight
            )));
        }
        if entry.class_id >= self.classes.len() {
            return Err(Error::Domain(format!(
                "class {} out of range for a {}-class bank",
                entry.class_id,
                self.classes.len()
            )));
        }
        if let Some(d) = self.dim() {
            if d != entry.feature.dim() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: entry.feature.dim(),
                });
            }
        }
        let group = &mut self.classes[entry.class_id];
        if group.len() == self.capacity {
            group.pop_front();
        }
        group.push_back(entry);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.classes.iter_mut().for_each(VecDeque::clear);
    }

    pub fn class(&self, c: usize) -> impl Iterator<Item = &BankEntry> {
        self.classes.get(c).into_iter().flatten()
    }

    pub fn class_len(&self, c: usize) -> usize {
        self.classes.get(c).map_or(0, VecDeque::len)
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.classes.iter().flatten()
    }

    /// Immutable view for concurrent energy queries while the live bank keeps
    /// being updated.
    pub fn snapshot(&self) -> Arc<FeatureBank> {
        Arc::new(self.clone())
    }

    pub fn from_entries(
        entries: impl IntoIterator<Item = BankEntry>,
        n_classes: usize,
        capacity: usize,
    ) -> Result<Self> {
        let mut bank = FeatureBank::new(n_classes, capacity);
        for e in entries {
            bank.push(e)?;
        }
        Ok(bank)
    }

    /// One JSON object per line: `{"class": int, "weight": float, "feature": [..]}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for entry in self.entries() {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a bank written by [`FeatureBank::write_jsonl`]. The class count is
    /// one past the largest class id seen; blank lines are skipped.
    pub fn read_jsonl(path: &Path, capacity: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: BankEntry = serde_json::from_str(&line).map_err(|source| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            entries.push(entry);
        }
        let n_classes = entries.iter().map(|e| e.class_id + 1).max().unwrap_or(0);
        let capacity = capacity.max(entries.len().max(1));
        FeatureBank::from_entries(entries, n_classes, capacity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub tau_energy: f64,
    pub k_neighbors: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            tau_energy: 0.1,
            k_neighbors: 16,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_energy > 0.0) {
            return Err(Error::Config(format!(
                "tau_energy must be > 0, got {}",
                self.tau_energy
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Energy of one class plus the softmax responsibilities of its selected
/// neighbours (`feature`, `s_j`), which give the Euclidean gradient `-Σ s_j k_j`.
struct ClassTerms<'a> {
    energy: f64,
    neighbours: Vec<(&'a UnitVector, f64)>,
}

fn class_terms<'a>(
    z: &UnitVector,
    bank: &'a FeatureBank,
    c: usize,
    params: &EnergyParams,
) -> Result<ClassTerms<'a>> {
    let group = bank.classes.get(c).ok_or(Error::EmptyClass(c))?;
    if group.is_empty() {
        return Err(Error::EmptyClass(c));
    }
    if let Some(first) = group.front() {
        if first.feature.dim() != z.dim() {
            return Err(Error::DimensionMismatch {
                expected: first.feature.dim(),
                got: z.dim(),
            });
        }
    }
    let mut scored: Vec<(f64, usize)> = group
        .iter()
        .enumerate()
        .map(|(i, e)| (dot(z.as_slice(), e.feature.as_slice()), i))
        .collect();
    let k = params.k_neighbors.min(scored.len());
    // Most similar first; equal similarities resolved by insertion order.
    let by_similarity = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_similarity);
        scored.truncate(k);
    }
    scored.sort_by(by_similarity);

    let tau = params.tau_energy;
    let live: Vec<(f64, usize)> = scored
        .into_iter()
        .filter(|&(_, i)| group[i].weight > 0.0)
        .collect();
    let Some(max_logit) = live.iter().map(|&(s, _)| s / tau).reduce(f64::max) else {
        return Err(Error::ZeroMass(c));
    };
    let terms: Vec<f64> = live
        .iter()
        .map(|&(s, i)| group[i].weight * (s / tau - max_logit).exp())
        .collect();
    let mass: f64 = terms.iter().sum();
    let energy = -tau * (max_logit + mass.ln());
    let neighbours = live
        .iter()
        .zip(&terms)
        .map(|(&(_, i), t)| (&group[i].feature, t / mass))
        .collect();
    Ok(ClassTerms { energy, neighbours })
}

/// Free energy of `z` relative to class `c`.
pub fn class_free_energy(
    z: &UnitVector,
    bank: &FeatureBank,
    c: usize,
    params: &EnergyParams,
) -> Result<f64> {
    class_terms(z, bank, c, params).map(|t| t.energy)
}

/// Minimum class energy at `z` and the class attaining it (smallest id on ties).
///
/// Classes whose selected neighbours all carry zero weight have no density at
/// `z` and are skipped like empty classes.
pub fn global_potential(
    z: &UnitVector,
    bank: &FeatureBank,
    params: &EnergyParams,
) -> Result<(f64, usize)> {
    let (energy, class, _) = argmin_class(z, bank, params)?;
    Ok((energy, class))
}

fn argmin_class<'a>(
    z: &UnitVector,
    bank: &'a FeatureBank,
    params: &EnergyParams,
) -> Result<(f64, usize, ClassTerms<'a>)> {
    let mut best: Option<(usize, ClassTerms<'a>)> = None;
    let mut zero_mass = None;
    for c in 0..bank.n_classes() {
        if bank.class_len(c) == 0 {
            continue;
        }
        match class_terms(z, bank, c, params) {
            Ok(t) => {
                if best.as_ref().is_none_or(|(_, b)| t.energy < b.energy) {
                    best = Some((c, t));
                }
            }
            Err(Error::ZeroMass(c)) => zero_mass = Some(c),
            Err(e) => return Err(e),
        }
    }
    match (best, zero_mass) {
        (Some((c, t)), _) => Ok((t.energy, c, t)),
        (None, Some(c)) => Err(Error::ZeroMass(c)),
        (None, None) => Err(Error::EmptyBank),
    }
}

/// Riemannian gradient of `U` at `z`: the tangent projection of the
/// Euclidean gradient of the minimizing class energy, holding that class's
/// neighbour set fixed.
#[allow(non_snake_case)]
pub fn riemannian_grad_U(
    z: &UnitVector,
    bank: &FeatureBank,
    params: &EnergyParams,
) -> Result<TangentVector> {
    potential_and_grad(z, bank, params).map(|(_, g)| g)
}

pub fn potential_and_grad(
    z: &UnitVector,
    bank: &FeatureBank,
    params: &EnergyParams,
) -> Result<(f64, TangentVector)> {
    let (energy, _, terms) = argmin_class(z, bank, params)?;
    let mut euclid = vec![0.0; z.dim()];
    for (k, s) in &terms.neighbours {
        for (g, ki) in euclid.iter_mut().zip(k.as_slice()) {
            *g -= s * ki;
        }
    }
    Ok((energy, project_tangent(&euclid, z)))
}

/// A scalar field on the sphere that the sampler can follow.
pub trait Potential: Sync {
    fn value(&self, z: &UnitVector) -> Result<f64>;

    fn value_and_grad(&self, z: &UnitVector) -> Result<(f64, TangentVector)>;

    fn riemannian_grad(&self, z: &UnitVector) -> Result<TangentVector> {
        self.value_and_grad(z).map(|(_, g)| g)
    }
}

/// The bank-induced potential `U`.
#[derive(Clone, Copy, Debug)]
pub struct BankPotential<'a> {
    pub bank: &'a FeatureBank,
    pub params: EnergyParams,
}

impl<'a> BankPotential<'a> {
    pub fn new(bank: &'a FeatureBank, params: EnergyParams) -> Self {
        BankPotential { bank, params }
    }
}

impl Potential for BankPotential<'_> {
    fn value(&self, z: &UnitVector) -> Result<f64> {
        global_potential(z, self.bank, &self.params).map(|(u, _)| u)
    }

    fn value_and_grad(&self, z: &UnitVector) -> Result<(f64, TangentVector)> {
        potential_and_grad(z, self.bank, &self.params)
    }
}

/// `U ≡ 0`; the dynamics reduce to damped, noisy geodesic flow.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlatPotential;

impl Potential for FlatPotential {
    fn value(&self, _z: &UnitVector) -> Result<f64> {
        Ok(0.0)
    }

    fn value_and_grad(&self, z: &UnitVector) -> Result<(f64, TangentVector)> {
        Ok((0.0, TangentVector::zero(z)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{geodesic_step, normalize, sample_tangent_gaussian};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(c: usize, w: f64, f: UnitVector) -> BankEntry {
        BankEntry {
            class_id: c,
            weight: w,
            feature: f,
        }
    }

    fn params(tau: f64) -> EnergyParams {
        EnergyParams {
            tau_energy: tau,
            k_neighbors: 16,
        }
    }

    fn random_bank(rng: &mut impl Rng, d: usize, n: usize, n_classes: usize) -> FeatureBank {
        let mut bank = FeatureBank::new(n_classes, 256);
        for i in 0..n {
            let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.push(entry(i % n_classes, rng.random_range(0.2..1.0), normalize(&raw).unwrap()))
                .unwrap();
        }
        bank
    }

    #[test]
    fn class_energy_examples() {
        let z = UnitVector::basis(3, 0);
        let bank = FeatureBank::from_entries([entry(0, 1.0, z.clone())], 1, 8).unwrap();
        assert_abs_diff_eq!(class_free_energy(&z, &bank, 0, &params(0.5)).unwrap(), -1.0, epsilon = 1e-15);

        let bank = FeatureBank::from_entries([entry(0, 1.0, UnitVector::basis(3, 1))], 1, 8).unwrap();
        assert_abs_diff_eq!(class_free_energy(&z, &bank, 0, &params(1.0)).unwrap(), 0.0, epsilon = 1e-15);

        let bank = FeatureBank::from_entries([entry(0, 0.5, z.clone())], 1, 8).unwrap();
        assert_abs_diff_eq!(
            class_free_energy(&z, &bank, 0, &params(1.0)).unwrap(),
            2f64.ln() - 1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn class_energy_errors() {
        let z = UnitVector::basis(2, 0);
        let bank = FeatureBank::from_entries([entry(1, 0.0, z.clone())], 2, 8).unwrap();
        assert!(matches!(class_free_energy(&z, &bank, 0, &params(1.0)), Err(Error::EmptyClass(0))));
        assert!(matches!(class_free_energy(&z, &bank, 1, &params(1.0)), Err(Error::ZeroMass(1))));
        assert!(matches!(
            global_potential(&z, &FeatureBank::new(3, 4), &params(1.0)),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn neighbour_truncation_keeps_most_similar() {
        // Two near entries and one far one; with K = 2 the far one is ignored.
        let z = UnitVector::basis(2, 0);
        let near = UnitVector::from_angle(0.1);
        let far = UnitVector::from_angle(3.0);
        let bank =
            FeatureBank::from_entries([entry(0, 1.0, far), entry(0, 1.0, near.clone()), entry(0, 1.0, z.clone())], 1, 8)
                .unwrap();
        let p = EnergyParams {
            tau_energy: 1.0,
            k_neighbors: 2,
        };
        let expected = -(1f64.exp() + near.dot(&z).exp()).ln();
        assert_abs_diff_eq!(class_free_energy(&z, &bank, 0, &p).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn global_potential_examples() {
        let z = UnitVector::basis(2, 0);
        let bank = FeatureBank::from_entries(
            [entry(0, 1.0, UnitVector::basis(2, 1)), entry(1, 1.0, z.clone())],
            2,
            8,
        )
        .unwrap();
        let (u, c) = global_potential(&z, &bank, &params(1.0)).unwrap();
        assert_abs_diff_eq!(u, -1.0, epsilon = 1e-15);
        assert_eq!(c, 1);

        let tied = FeatureBank::from_entries([entry(1, 1.0, z.clone()), entry(0, 1.0, z.clone())], 2, 8).unwrap();
        assert_eq!(global_potential(&z, &tied, &params(1.0)).unwrap().1, 0);

        let single = FeatureBank::from_entries([entry(2, 0.5, z.clone())], 3, 8).unwrap();
        let (u, c) = global_potential(&z, &single, &params(1.0)).unwrap();
        assert_eq!(c, 2);
        assert_abs_diff_eq!(u, 2f64.ln() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let z = UnitVector::basis(3, 0);
        let bank = FeatureBank::from_entries([entry(0, 1.0, z.clone())], 1, 8).unwrap();
        let g = riemannian_grad_U(&z, &bank, &params(1.0)).unwrap();
        assert!(g.coords().iter().all(|x| x.abs() < 1e-15));

        let bank = FeatureBank::from_entries([entry(0, 1.0, UnitVector::basis(3, 1))], 1, 8).unwrap();
        let g = riemannian_grad_U(&z, &bank, &params(1.0)).unwrap();
        assert_eq!(g.coords(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn gradient_matches_geodesic_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..100 {
            let d = 5;
            let bank = random_bank(&mut rng, d, 5, 1);
            let p = params(0.5);
            let z = normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            let u = sample_tangent_gaussian(&z, &mut rng);
            let u = u.scaled(1.0 / u.norm());
            let g = riemannian_grad_U(&z, &bank, &p).unwrap();
            let analytic = dot(g.coords(), u.coords());
            let f = |x: &UnitVector| global_potential(x, &bank, &p).unwrap().0;
            let fd = (f(&geodesic_step(&z, &u, h)) - f(&geodesic_step(&z, &u, -h))) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(1e-3);
            assert!(rel < 1e-4, "analytic {analytic} fd {fd}");
        }
    }

    #[test]
    fn single_entry_minimum_on_grid() {
        // Every class holds one weight-1 entry, so U >= -1 with equality only
        // at the bank features.
        let bank = FeatureBank::from_entries(
            [entry(0, 1.0, UnitVector::from_angle(0.7)), entry(1, 1.0, UnitVector::from_angle(2.9))],
            2,
            8,
        )
        .unwrap();
        let p = params(0.1);
        for k in bank.entries() {
            let at_k = global_potential(&k.feature, &bank, &p).unwrap().0;
            for i in 0..3600 {
                let z = UnitVector::from_angle(i as f64 * std::f64::consts::TAU / 3600.0);
                assert!(global_potential(&z, &bank, &p).unwrap().0 >= at_k - 1e-12);
            }
        }

        let k = normalize(&[0.3, -0.5, 0.8]).unwrap();
        let bank = FeatureBank::from_entries([entry(0, 1.0, k.clone())], 1, 8).unwrap();
        let at_k = global_potential(&k, &bank, &p).unwrap().0;
        for i in 0..60 {
            for j in 0..120 {
                let (th, ph) = (i as f64 * std::f64::consts::PI / 59.0, j as f64 * std::f64::consts::TAU / 120.0);
                let z = normalize(&[th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]).unwrap();
                assert!(global_potential(&z, &bank, &p).unwrap().0 >= at_k - 1e-12);
            }
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = FeatureBank::new(1, 2);
        for i in 0..3 {
            bank.push(entry(0, 1.0, UnitVector::from_angle(i as f64))).unwrap();
        }
        let kept: Vec<_> = bank.class(0).map(|e| e.feature.clone()).collect();
        assert_eq!(kept, vec![UnitVector::from_angle(1.0), UnitVector::from_angle(2.0)]);
        assert!(bank.push(entry(0, 1.5, UnitVector::from_angle(0.0))).is_err());
        assert!(bank.push(entry(1, 1.0, UnitVector::from_angle(0.0))).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = random_bank(&mut rng, 4, 9, 3);
        bank.write_jsonl(&path).unwrap();
        let back = FeatureBank::read_jsonl(&path, 256).unwrap();
        assert_eq!(back.entries().cloned().collect::<Vec<_>>(), bank.entries().cloned().collect::<Vec<_>>());
        let first = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert!(v.get("class").is_some() && v.get("weight").is_some() && v.get("feature").is_some());
    }

    proptest! {
        #[test]
        fn permutation_and_weight_scaling(seed in 0u64..1000, lambda in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let bank = random_bank(&mut rng, d, 12, 3);
            let p = EnergyParams { tau_energy: 0.3, k_neighbors: 3 };
            let z = normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            let (u, c) = global_potential(&z, &bank, &p).unwrap();

            let mut shuffled: Vec<BankEntry> = bank.entries().cloned().collect();
            shuffled.reverse();
            let permuted = FeatureBank::from_entries(shuffled, 3, 256).unwrap();
            let (u_perm, c_perm) = global_potential(&z, &permuted, &p).unwrap();
            prop_assert!((u - u_perm).abs() < 1e-12);
            prop_assert_eq!(c, c_perm);

            let scaled = FeatureBank::from_entries(
                bank.entries().map(|e| BankEntry { weight: e.weight * lambda, ..e.clone() }), 3, 256).unwrap();
            let (u_s, c_s) = global_potential(&z, &scaled, &p).unwrap();
            prop_assert!((u_s - (u - p.tau_energy * lambda.ln())).abs() < 1e-9);
            prop_assert_eq!(c, c_s);
            let g = riemannian_grad_U(&z, &bank, &p).unwrap();
            let g_s = riemannian_grad_U(&z, &scaled, &p).unwrap();
            for (a, b) in g.coords().iter().zip(g_s.coords()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!(dot(g.coords(), z.as_slice()).abs() < 1e-9);
        }
    }
}
