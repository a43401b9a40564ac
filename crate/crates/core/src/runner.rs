//! The training loop: per-sample embeddings on the sphere, optimized under
//! the full objective with bank maintenance and outlier synthesis.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{global_potential, BankEntry, BankPotential, EnergyParams, FeatureBank, DEFAULT_CLASS_CAPACITY};
use crate::error::{Error, Result};
use crate::losses::{
    ce_dp, ce_loss, compute_prototypes, consistency_mse, consistency_mse_dp, contrastive_grad, contrastive_loss, gce_dp,
    gce_loss, hambr_grad, hambr_loss, head_backprop, head_probs, reg_loss, reg_loss_dp, sharpen, LossComponents,
    LossWeights, PrototypeSet,
};
use crate::metrics::{auroc, fpr_at_95_tpr, geometry_metrics, selection_f1, singular_spectrum, MetricsRecord, MetricsWriter};
use crate::partition::{clean_posterior, fit_gmm_1d, ConsensusWindow, PartitionRow, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::sampler::{synthesize_with, SamplerConfig, VirtualOutlierSet};
use crate::sphere::{dot, normalize, project_tangent, sample_tangent_gaussian, UnitVector};
use crate::synthgen::{generate_dataset, write_points_jsonl, Dataset, DatasetSpec};

/// Stream of the runner's own RNG (view augmentation), far from the
/// dataset's per-class streams.
const AUGMENT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub sampler: SamplerConfig,
    pub energy: EnergyParams,
    pub weights: LossWeights,
    pub clean_threshold: f64,
    pub t_filter: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learn_rate: f64,
    pub classifier_temperature: f64,
    pub aug_sigma: f64,
    pub bank_capacity: usize,
    /// Write `partition_epoch_NNN.jsonl` every epoch.
    pub partition_dumps: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            sampler: SamplerConfig::default(),
            energy: EnergyParams::default(),
            weights: LossWeights::default(),
            clean_threshold: 0.5,
            t_filter: 3,
            epochs: 30,
            warmup_epochs: 5,
            learn_rate: 0.05,
            classifier_temperature: 0.1,
            aug_sigma: 0.05,
            bank_capacity: DEFAULT_CLASS_CAPACITY,
            partition_dumps: true,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the top-level seed into the dataset and sampler sections.
    pub fn resolved(mut self) -> Self {
        self.dataset.seed = self.seed;
        self.sampler.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.sampler.validate()?;
        self.energy.validate()?;
        self.weights.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.clean_threshold > 0.0 && self.clean_threshold < 1.0) {
            return fail(format!("clean_threshold must lie in (0, 1), got {}", self.clean_threshold));
        }
        if self.t_filter == 0 {
            return fail("t_filter must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learn_rate.is_finite() && self.learn_rate > 0.0) {
            return fail(format!("learn_rate must be positive, got {}", self.learn_rate));
        }
        if !(self.classifier_temperature.is_finite() && self.classifier_temperature > 0.0) {
            return fail(format!(
                "classifier_temperature must be positive, got {}",
                self.classifier_temperature
            ));
        }
        if !(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0) {
            return fail(format!("aug_sigma must be non-negative, got {}", self.aug_sigma));
        }
        if self.bank_capacity == 0 {
            return fail("bank_capacity must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-epoch sampler seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct TrainState {
    pub embeddings: Vec<UnitVector>,
    pub bank: FeatureBank,
    pub window: ConsensusWindow,
    /// Bank prototypes, falling back to the previous value for classes the
    /// bank does not cover.
    pub prototypes: PrototypeSet,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

/// Everything one epoch produced.
pub struct EpochOutput {
    pub record: MetricsRecord,
    pub partition: Vec<PartitionRow>,
    pub outliers: VirtualOutlierSet,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub state: TrainState,
    /// When false, every epoch's outlier set is empty.
    pub synthesize: bool,
    observed: Vec<usize>,
    clean_mask: Vec<bool>,
}

impl Trainer {
    /// Validates `cfg` (after seed resolution) and draws the dataset.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let data = generate_dataset(&cfg.dataset)?;
        let n = data.points.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(AUGMENT_STREAM);
        let state = TrainState {
            embeddings: data.points.iter().map(|p| p.feature.clone()).collect(),
            bank: FeatureBank::new(cfg.dataset.n_classes, cfg.bank_capacity),
            window: ConsensusWindow::new(n, cfg.t_filter),
            prototypes: PrototypeSet {
                prototypes: vec![None; cfg.dataset.n_classes],
                support: vec![0; cfg.dataset.n_classes],
            },
            epoch: 0,
            rng,
        };
        Ok(Trainer {
            observed: data.points.iter().map(|p| p.observed_label).collect(),
            clean_mask: data.points.iter().map(|p| !p.is_noisy()).collect(),
            cfg,
            data,
            state,
            synthesize: true,
        })
    }

    pub fn in_warmup(&self) -> bool {
        self.state.epoch < self.cfg.warmup_epochs
    }

    /// Normalized class means of the current embeddings under observed labels.
    fn label_means(&self) -> PrototypeSet {
        let c = self.cfg.dataset.n_classes;
        let d = self.cfg.dataset.d;
        let mut sums = vec![vec![0.0; d]; c];
        let mut support = vec![0; c];
        for (z, &y) in self.state.embeddings.iter().zip(&self.observed) {
            for (s, x) in sums[y].iter_mut().zip(z.as_slice()) {
                *s += x;
            }
            support[y] += 1;
        }
        PrototypeSet {
            prototypes: sums.iter().map(|s| normalize(s).ok()).collect(),
            support,
        }
    }

    /// Prototypes of the classification head for the current epoch.
    fn head_prototypes(&self) -> PrototypeSet {
        let means = self.label_means();
        if self.in_warmup() {
            return means;
        }
        let mut head = self.state.prototypes.clone();
        for (slot, fallback) in head.prototypes.iter_mut().zip(means.prototypes) {
            if slot.is_none() {
                *slot = fallback;
            }
        }
        head
    }

    pub fn run_epoch(&mut self) -> Result<EpochOutput> {
        let cfg = self.cfg.clone();
        let t = cfg.classifier_temperature;
        let n = self.state.embeddings.len();
        let warm = self.in_warmup();

        // (1) classify.
        let head = self.head_prototypes();
        let probs: Vec<Vec<f64>> = self.state.embeddings.iter().map(|z| head_probs(z.as_slice(), &head, t)).collect();

        // (2) per-sample loss.
        let losses: Vec<f64> = probs
            .iter()
            .zip(&self.observed)
            .map(|(p, &y)| {
                if warm {
                    gce_loss(p[y], cfg.weights.gce_q)
                } else {
                    let mut onehot = vec![0.0; p.len()];
                    onehot[y] = 1.0;
                    ce_loss(p, &onehot)
                }
            })
            .collect::<Result<_>>()?;

        // (3) partition.
        let gmm = fit_gmm_1d(&losses, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
        let posteriors: Vec<f64> = losses.iter().map(|&l| clean_posterior(&gmm, l)).collect();
        let flags: Vec<bool> = posteriors.iter().map(|&w| w > cfg.clean_threshold).collect();
        self.state.window.update(&flags)?;
        let consensus = self.state.window.consensus_set();
        let mut in_consensus = vec![false; n];
        consensus.iter().for_each(|&i| in_consensus[i] = true);

        // (4) bank from the consensus set.
        self.state.bank.clear();
        for &i in &consensus {
            self.state.bank.push(BankEntry {
                class_id: self.observed[i],
                weight: posteriors[i],
                feature: self.state.embeddings[i].clone(),
            })?;
        }

        // (5) prototypes.
        let fresh = compute_prototypes(&self.state.bank);
        for (c, p) in fresh.prototypes.into_iter().enumerate() {
            if p.is_some() {
                self.state.prototypes.prototypes[c] = p;
            }
            self.state.prototypes.support[c] = fresh.support[c];
        }

        // (6) outliers.
        let bank = self.state.bank.snapshot();
        let potential = BankPotential::new(&bank, cfg.energy);
        let bank_protos: Vec<UnitVector> = compute_prototypes(&bank).present().map(|(_, p)| p.clone()).collect();
        let outliers = if !self.synthesize || bank.is_empty() || bank_protos.len() < 2 {
            VirtualOutlierSet::default()
        } else {
            let sampler = SamplerConfig {
                seed: epoch_seed(cfg.seed, self.state.epoch),
                ..cfg.sampler.clone()
            };
            synthesize_with(&potential, &bank_protos, &sampler)?
        };

        // (7) + (8) targets and gradient step.
        let mut components = LossComponents::default();
        let mut grads: Vec<Vec<f64>> = vec![vec![0.0; cfg.dataset.d]; n];
        if warm {
            components.loss_x = losses.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                let y = self.observed[i];
                let mut dp = vec![0.0; probs[i].len()];
                dp[y] = gce_dp(probs[i][y], cfg.weights.gce_q);
                grads[i] = head_backprop(&dp, &probs[i], &head, t);
            }
        } else {
            // Until the window is full, plain per-epoch flags stand in for consensus.
            let labeled = if self.state.window.epochs_recorded() >= cfg.t_filter { &in_consensus } else { &flags };
            self.objective_grads(&head, &probs, &posteriors, labeled, &outliers.outliers, &mut components, &mut grads)?;
        }
        for (z, g) in self.state.embeddings.iter_mut().zip(&grads) {
            let tangent = project_tangent(g, z);
            let moved: Vec<f64> = z.as_slice().iter().zip(tangent.coords()).map(|(x, v)| x - cfg.learn_rate * v).collect();
            *z = normalize(&moved)?;
        }

        // (9) metrics.
        let record = self.metrics(components, &consensus, &potential)?;
        let partition = (0..n)
            .map(|i| PartitionRow {
                sample: i,
                loss: losses[i],
                posterior: posteriors[i],
                flag: flags[i],
                in_consensus: in_consensus[i],
            })
            .collect();
        self.state.epoch += 1;
        Ok(EpochOutput { record, partition, outliers })
    }

    #[allow(clippy::too_many_arguments)]
    fn objective_grads(
        &mut self,
        head: &PrototypeSet,
        probs: &[Vec<f64>],
        posteriors: &[f64],
        labeled: &[bool],
        outliers: &[UnitVector],
        components: &mut LossComponents,
        grads: &mut [Vec<f64>],
    ) -> Result<()> {
        let w = &self.cfg.weights;
        let t = self.cfg.classifier_temperature;
        let n = probs.len();
        let n_labeled = labeled.iter().filter(|&&l| l).count();
        let n_unlabeled = n - n_labeled;

        // Batch terms are means; per-sample gradients use the sum form.
        let reg_dp: Vec<f64> = reg_loss_dp(probs).iter().map(|g| g * n as f64).collect();
        components.loss_reg = reg_loss(probs)?;

        for i in 0..n {
            let p = &probs[i];
            let mut dp: Vec<f64> = reg_dp.iter().map(|g| w.lambda_reg * g).collect();
            if labeled[i] {
                let y = self.observed[i];
                let target: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(c, pc)| (1.0 - posteriors[i]) * pc + if c == y { posteriors[i] } else { 0.0 })
                    .collect();
                components.loss_x += ce_loss(p, &target)? / n_labeled as f64;
                dp.iter_mut().zip(ce_dp(p, &target)).for_each(|(a, b)| *a += b);
            } else {
                let guess = sharpen(p, w.sharpen_t);
                components.loss_u += consistency_mse(&guess, p) / n_unlabeled as f64;
                dp.iter_mut().zip(consistency_mse_dp(&guess, p)).for_each(|(a, b)| *a += w.lambda_u * b);
            }
            grads[i] = head_backprop(&dp, p, head, t);

            if labeled[i] && !outliers.is_empty() {
                if let Some(mu) = self.state.prototypes.get(self.observed[i]) {
                    let z = &self.state.embeddings[i];
                    components.loss_hambr += hambr_loss(z, mu, outliers, w.tau_loss) / n_labeled as f64;
                    for (g, h) in grads[i].iter_mut().zip(hambr_grad(z, mu, outliers, w.tau_loss)) {
                        *g += w.lambda_hambr * h;
                    }
                }
            }
        }

        // Contrastive views: normalize(z + σ ξ) with ξ tangent Gaussian.
        if n >= 2 {
            let sigma = self.cfg.aug_sigma;
            let mut raw = Vec::with_capacity(n);
            let mut pairs = Vec::with_capacity(n);
            for z in &self.state.embeddings {
                let mut views = [(); 2].map(|_| {
                    let xi = sample_tangent_gaussian(z, &mut self.state.rng);
                    z.as_slice().iter().zip(xi.coords()).map(|(a, b)| a + sigma * b).collect::<Vec<f64>>()
                });
                let second = std::mem::take(&mut views[1]);
                let first = std::mem::take(&mut views[0]);
                pairs.push((normalize(&first)?, normalize(&second)?));
                raw.push((first, second));
            }
            components.loss_con = contrastive_loss(&pairs, w.tau_con, w.negatives)?;
            let (g1, g2) = contrastive_grad(&pairs, w.tau_con, w.negatives)?;
            for i in 0..n {
                for (u, g) in [(&raw[i].0, &g1[i]), (&raw[i].1, &g2[i])] {
                    // Pull back through u ↦ u/|u|.
                    let norm = dot(u, u).sqrt();
                    let along = dot(g, u) / (norm * norm);
                    for ((gi, &gv), &ui) in grads[i].iter_mut().zip(g).zip(u) {
                        *gi += w.lambda_c * n as f64 * (gv - along * ui) / norm;
                    }
                }
            }
        }
        Ok(())
    }

    fn metrics(&self, losses: LossComponents, consensus: &[usize], potential: &BankPotential) -> Result<MetricsRecord> {
        let truth: Vec<usize> = self.data.points.iter().map(|p| p.true_label).collect();
        let (intra, inter) = geometry_metrics(&self.state.embeddings, &truth, &self.state.prototypes.prototypes);
        let (auroc_v, fpr95) = if self.state.bank.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let score = |z: &UnitVector| global_potential(z, potential.bank, &potential.params).map(|(u, _)| u);
            let id: Vec<f64> = self.state.embeddings.iter().map(score).collect::<Result<_>>()?;
            let ood: Vec<f64> = self.data.ood.iter().map(score).collect::<Result<_>>()?;
            (auroc(&id, &ood)?, fpr_at_95_tpr(&id, &ood)?)
        };
        Ok(MetricsRecord {
            epoch: self.state.epoch,
            losses,
            selection: selection_f1(consensus, &self.clean_mask),
            intra_compactness: intra,
            inter_margin: inter,
            auroc: auroc_v,
            fpr95,
            log_singular_values: singular_spectrum(&self.state.embeddings, true),
        })
    }
}

/// Runs the whole schedule in memory and returns one record per epoch.
pub fn train(cfg: ExperimentConfig) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut records = Vec::with_capacity(trainer.cfg.epochs);
    for _ in 0..trainer.cfg.epochs {
        records.push(trainer.run_epoch()?.record);
    }
    Ok((trainer, records))
}

/// Runs the schedule and persists every artifact under `cfg.output_dir`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let mut trainer = Trainer::new(cfg)?;
    let cfg = trainer.cfg.clone();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;
    write_points_jsonl(&trainer.data.points, &out.join("dataset.jsonl"))?;

    let mut writer = MetricsWriter::create(out)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_outliers = VirtualOutlierSet::default();
    for epoch in 0..cfg.epochs {
        let output = trainer.run_epoch()?;
        writer.append(&output.record)?;
        if cfg.partition_dumps {
            crate::partition::write_partition_jsonl(&output.partition, &out.join(format!("partition_epoch_{epoch:03}.jsonl")))?;
        }
        records.push(output.record);
        last_outliers = output.outliers;
    }
    trainer.state.bank.write_jsonl(&out.join("bank.jsonl"))?;
    let potential = BankPotential::new(&trainer.state.bank, cfg.energy);
    if trainer.state.bank.is_empty() {
        let path = out.join("outliers.jsonl");
        fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
    } else {
        last_outliers.write_jsonl(&out.join("outliers.jsonl"), &potential)?;
    }
    Ok(records)
}
