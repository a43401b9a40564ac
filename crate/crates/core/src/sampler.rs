//! Dissipative spherical Hamiltonian dynamics.
//!
//! Each chain carries a position `z` on the sphere and a tangent momentum `v`.
//! One step splits the underdamped Langevin SDE into
//!
//! 1. a dissipative half kick: damping, half a gradient kick and injected noise,
//! 2. a geodesic drift along the great circle with velocity `v'`,
//! 3. parallel transport of `v'` into the new tangent space followed by the
//!    remaining half gradient kick.
//!
//! Chains start at the normalized midpoint of two class prototypes, so they
//! begin on the ridge between classes, and their final positions are returned
//! as virtual outliers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{BankPotential, EnergyParams, FeatureBank, Potential};
use crate::error::{Error, Result};
use crate::sphere::{
    dot, geodesic_step, normalize, project_tangent, sample_ambient_gaussian,
    sample_tangent_gaussian, transport, TangentVector, UnitVector, EPS_ANTIPODAL,
};

/// Tangent offset applied when every drawn prototype pair is antipodal.
pub const ANTIPODAL_PERTURBATION: f64 = 1e-3;
/// Extra pair draws before falling back to the perturbed midpoint.
pub const ANTIPODAL_RESAMPLES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorVariant {
    /// Exact Ornstein-Uhlenbeck damping: `alpha = exp(-friction * eps)`,
    /// noise scale `sqrt((1 - alpha^2) T)`.
    #[default]
    Exponential,
    /// First-order damping `1 - friction * eps`, noise scale `sqrt(2 friction eps T)`.
    Euler,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// One ambient Gaussian draw per round, re-projected at every step.
    #[default]
    PerRound,
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub friction: f64,
    pub rounds: usize,
    pub steps_per_round: usize,
    pub n_chains: usize,
    pub dyn_temperature: f64,
    pub integrator: IntegratorVariant,
    pub noise_schedule: NoiseSchedule,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step_size: 0.05,
            friction: 0.95,
            rounds: 5,
            steps_per_round: 3,
            n_chains: 32,
            dyn_temperature: 1.0,
            integrator: IntegratorVariant::Exponential,
            noise_schedule: NoiseSchedule::PerRound,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.step_size > 0.0) {
            return bad(format!("step_size must be > 0, got {}", self.step_size));
        }
        if !(self.friction >= 0.0) {
            return bad(format!("friction must be >= 0, got {}", self.friction));
        }
        if !(self.dyn_temperature > 0.0) {
            return bad(format!("dyn_temperature must be > 0, got {}", self.dyn_temperature));
        }
        if self.rounds == 0 || self.steps_per_round == 0 || self.n_chains == 0 {
            return bad("rounds, steps_per_round and n_chains must all be >= 1".into());
        }
        Ok(())
    }

    /// Momentum damping factor and noise scale of the dissipative half kick.
    fn damping_and_noise(&self) -> (f64, f64) {
        let ge = self.friction * self.step_size;
        match self.integrator {
            IntegratorVariant::Exponential => {
                let alpha = (-ge).exp();
                (alpha, ((1.0 - alpha * alpha) * self.dyn_temperature).sqrt())
            }
            IntegratorVariant::Euler => (1.0 - ge, (2.0 * ge * self.dyn_temperature).sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub position: UnitVector,
    pub momentum: TangentVector,
    pub round_index: usize,
    pub step_index: usize,
}

impl ChainState {
    pub fn new(position: UnitVector, momentum: TangentVector) -> Self {
        ChainState {
            position,
            momentum,
            round_index: 0,
            step_index: 0,
        }
    }

    /// `U(z) + ½‖v‖²`
    pub fn hamiltonian(&self, potential: &impl Potential) -> Result<f64> {
        Ok(potential.value(&self.position)? + 0.5 * self.momentum.norm_squared())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierProvenance {
    pub chain: usize,
    /// Indices into the prototype list whose midpoint seeded the chain.
    pub pair: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VirtualOutlierSet {
    pub outliers: Vec<UnitVector>,
    pub provenance: Vec<OutlierProvenance>,
}

impl VirtualOutlierSet {
    pub fn len(&self) -> usize {
        self.outliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outliers.is_empty()
    }

    /// One line per outlier: `{"chain": int, "outlier": [..], "potential": float}`.
    pub fn write_jsonl(&self, path: &Path, potential: &impl Potential) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            chain: usize,
            outlier: &'a UnitVector,
            potential: f64,
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (z, prov) in self.outliers.iter().zip(&self.provenance) {
            let row = Row {
                chain: prov.chain,
                outlier: z,
                potential: potential.value(z)?,
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Private random stream of one chain, derived from `(seed, chain id)`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Starting state of one chain: the normalized midpoint of a uniformly drawn
/// unordered pair of distinct prototypes, with Gaussian tangent momentum.
pub fn init_chain<R: Rng + ?Sized>(
    prototypes: &[UnitVector],
    rng: &mut R,
) -> Result<(ChainState, (usize, usize))> {
    let n = prototypes.len();
    if n < 2 {
        return Err(Error::InsufficientPrototypes(n));
    }
    let draw = |rng: &mut R| {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        (a.min(b), a.max(b))
    };
    let is_antipodal = |(a, b): (usize, usize)| prototypes[a].dot(&prototypes[b]) < -1.0 + EPS_ANTIPODAL;

    let mut pair = draw(rng);
    for _ in 0..ANTIPODAL_RESAMPLES {
        if !is_antipodal(pair) {
            break;
        }
        pair = draw(rng);
    }
    let (mu_a, mu_b) = (&prototypes[pair.0], &prototypes[pair.1]);
    let mut mid: Vec<f64> = mu_a.as_slice().iter().zip(mu_b.as_slice()).map(|(x, y)| x + y).collect();
    if is_antipodal(pair) {
        // The chord passes through the origin; nudge mu_a along a tangent
        // direction so the midpoint lands on a well-defined great circle.
        let u = sample_tangent_gaussian(mu_a, rng);
        let scale = ANTIPODAL_PERTURBATION / u.norm().max(f64::MIN_POSITIVE);
        for (m, ui) in mid.iter_mut().zip(u.coords()) {
            *m += scale * ui;
        }
    }
    let position = normalize(&mid)?;
    let momentum = sample_tangent_gaussian(&position, rng);
    Ok((ChainState::new(position, momentum), pair))
}

/// Initial states of all `cfg.n_chains` chains, each from its own stream.
pub fn init_chains(
    prototypes: &[UnitVector],
    cfg: &SamplerConfig,
) -> Result<Vec<(ChainState, (usize, usize))>> {
    (0..cfg.n_chains)
        .map(|chain| init_chain(prototypes, &mut chain_rng(cfg.seed, chain)))
        .collect()
}

/// One integrator step with freshly drawn tangent noise.
pub fn dshd_step<R: Rng + ?Sized>(
    state: &ChainState,
    potential: &impl Potential,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainState> {
    let noise = sample_ambient_gaussian(state.position.dim(), rng);
    dshd_step_with_noise(state, potential, cfg, &noise)
}

/// One integrator step with a caller-supplied ambient noise draw, which is
/// projected onto the tangent space at the current position.
pub fn dshd_step_with_noise(
    state: &ChainState,
    potential: &impl Potential,
    cfg: &SamplerConfig,
    noise: &[f64],
) -> Result<ChainState> {
    let z = &state.position;
    let eps = cfg.step_size;
    let (damping, noise_scale) = cfg.damping_and_noise();

    let grad = potential.riemannian_grad(z)?;
    let xi = project_tangent(noise, z);
    let half_kick = state
        .momentum
        .combine(damping, &grad, -0.5 * eps)
        .combine(1.0, &xi, noise_scale);

    let z_next = geodesic_step(z, &half_kick, eps);
    let carried = transport(&half_kick, z, &z_next)?;
    let grad_next = potential.riemannian_grad(&z_next)?;
    let v_next = carried.combine(1.0, &grad_next, -0.5 * eps);
    // Clean rounding drift out of the radial component.
    let v_next = project_tangent(v_next.coords(), &z_next);

    let mut step_index = state.step_index + 1;
    let mut round_index = state.round_index;
    if step_index == cfg.steps_per_round {
        step_index = 0;
        round_index += 1;
    }
    Ok(ChainState {
        position: z_next,
        momentum: v_next,
        round_index,
        step_index,
    })
}

/// Runs one chain for `rounds × steps_per_round` steps from `state`.
pub fn run_chain<R: Rng + ?Sized>(
    mut state: ChainState,
    potential: &impl Potential,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainState> {
    let d = state.position.dim();
    for _ in 0..cfg.rounds {
        let round_noise = sample_ambient_gaussian(d, rng);
        for _ in 0..cfg.steps_per_round {
            state = match cfg.noise_schedule {
                NoiseSchedule::PerRound => dshd_step_with_noise(&state, potential, cfg, &round_noise)?,
                NoiseSchedule::PerStep => dshd_step(&state, potential, cfg, rng)?,
            };
        }
    }
    Ok(state)
}

/// Runs `cfg.n_chains` independent chains on an arbitrary potential and
/// returns their final positions.
pub fn synthesize_with(
    potential: &impl Potential,
    prototypes: &[UnitVector],
    cfg: &SamplerConfig,
) -> Result<VirtualOutlierSet> {
    cfg.validate()?;
    let mut set = VirtualOutlierSet::default();
    for chain in 0..cfg.n_chains {
        let mut rng = chain_rng(cfg.seed, chain);
        let (start, pair) = init_chain(prototypes, &mut rng)?;
        let end = run_chain(start, potential, cfg, &mut rng)?;
        debug_assert!(dot(end.momentum.coords(), end.position.as_slice()).abs() < 1e-8);
        set.outliers.push(end.position);
        set.provenance.push(OutlierProvenance { chain, pair });
    }
    Ok(set)
}

/// Virtual outliers on the energy surface of `bank`.
pub fn synthesize_outliers(
    bank: &FeatureBank,
    prototypes: &[UnitVector],
    params: &EnergyParams,
    cfg: &SamplerConfig,
) -> Result<VirtualOutlierSet> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    params.validate()?;
    synthesize_with(&BankPotential::new(bank, *params), prototypes, cfg)
}
