//! Training orchestration: composite ramp-weighted loss, per-branch SGD,
//! template maintenance, between-epoch label correction, evaluation and
//! checkpointing.

mod checkpoint;
mod config;
mod metrics;
mod model;

pub use checkpoint::{dataset_digest, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ramp_weights, total_loss, AuxWarmup, EdgeMode, TrainConfig};
pub use metrics::{EpochMetrics, EvalReport, MetricsReport, METRICS_HEADER};
pub use model::{Model, ModelVars, ParamGroup, PARAM_NAMES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aux_branch::{self, AuGraph};
use crate::datagen::{self, Dataset};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};
use crate::relabel::{self, RelabelRecord, SemanticTemplates, TemplateEntry};
use crate::target_branch::{self, class_weights, ConfidenceState};

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_GRAPH: u64 = 2;
const STREAM_EPOCH: u64 = 1 << 32;

/// Builds the GCN adjacency for a run.
pub fn build_run_graph(train: &Dataset, cfg: &TrainConfig) -> Result<AuGraph> {
    match cfg.edges {
        EdgeMode::DataDriven => {
            let labels: Vec<&[bool]> = train.samples.iter().map(|s| s.au_labels.as_slice()).collect();
            aux_branch::build_graph(&labels, train.aus)
        }
        EdgeMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_GRAPH));
            Ok(aux_branch::random_graph(train.aus, &mut rng))
        }
    }
}

fn features_of(ds: &Dataset, idx: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.samples[i].features.as_slice()).collect();
    Matrix::from_rows(&rows)
}

/// Argmax of backbone + expression classifier logits. No confidence
/// scaling and no auxiliary branch.
pub fn predict(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = tape.leaf(features_of(ds, &idx));
    let f = target_branch::extract_features(&mut tape, &vars.backbone, x, cfg.leaky_slope)?;
    let logits = tape.matmul(f, vars.classifier)?;
    let lv = tape.value(logits);
    Ok((0..lv.rows())
        .map(|r| {
            let row = lv.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}

/// Test-time accuracy against the hidden true labels.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<EvalReport> {
    let predicted = predict(model, ds, cfg)?;
    let truth: Vec<usize> = ds.samples.iter().map(|s| s.true_label).collect();
    Ok(EvalReport::from_predictions(&truth, &predicted, ds.classes))
}

/// Per-sample AU logits (N×M) from the auxiliary branch.
pub fn semantic_features(model: &Model, graph: &AuGraph, ds: &Dataset, cfg: &TrainConfig) -> Result<Matrix> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = tape.leaf(features_of(ds, &idx));
    let f = target_branch::extract_features(&mut tape, &vars.backbone, x, cfg.leaky_slope)?;
    let nodes = aux_branch::au_node_features(&mut tape, f, &vars.head, ds.aus)?;
    let h = aux_branch::gcn_forward(&mut tape, nodes, graph, &vars.gcn, cfg.leaky_slope)?;
    let pred = aux_branch::au_predict(&mut tape, h, &vars.node)?;
    Ok(tape.value(pred.semantic).clone())
}

/// Loss graph for one batch.
pub struct BatchLosses {
    pub total: Var,
    pub wce: Var,
    pub rr: Var,
    pub au: Option<Var>,
    pub alphas: Option<Var>,
    pub semantic: Option<Var>,
    pub state: Option<ConfidenceState>,
}

/// Inputs of one batch.
pub struct BatchInputs<'a> {
    pub features: Matrix,
    pub labels: &'a [usize],
    pub ids: &'a [usize],
    pub au_targets: Matrix,
    pub classes: usize,
    pub aus: usize,
}

/// Records the full composite loss for one batch on `tape`.
///
/// With the target branch on, the classifier trains on the
/// confidence-scaled cross-entropy plus the rank margin. With it off, the
/// classifier trains on plain cross-entropy; if the auxiliary branch is on,
/// confidences are still learned (for the group split and AU weighting)
/// from the weighted loss evaluated on detached features and logits, so
/// they do not regularize the backbone or classifier.
pub fn batch_losses(
    tape: &mut Tape,
    vars: &ModelVars,
    graph: Option<&AuGraph>,
    batch: &BatchInputs<'_>,
    cfg: &TrainConfig,
    lambdas: (f64, f64),
) -> Result<BatchLosses> {
    let x = tape.leaf(batch.features.clone());
    let f = target_branch::extract_features(tape, &vars.backbone, x, cfg.leaky_slope)?;
    let logits = tape.matmul(f, vars.classifier)?;
    let gamma = class_weights(batch.labels, batch.classes);

    let (target_loss, wce, rr, alphas, state) = if cfg.use_target {
        let alphas = target_branch::confidence(tape, f, vars.w_a)?;
        let wce = target_branch::weighted_ce_from_logits(tape, logits, alphas, &gamma, batch.labels)?;
        let rr = target_branch::rank_regularization(tape, alphas, batch.ids, cfg.phi, cfg.theta)?;
        let sum = tape.add(wce, rr.loss)?;
        (sum, wce, rr.loss, Some(alphas), Some(rr.state))
    } else {
        let ce = tape.cross_entropy(logits, batch.labels)?;
        if cfg.use_aux {
            let fd = tape.detach(f);
            let ld = tape.detach(logits);
            let alphas = target_branch::confidence(tape, fd, vars.w_a)?;
            let conf = target_branch::weighted_ce_from_logits(tape, ld, alphas, &gamma, batch.labels)?;
            let rr = target_branch::rank_regularization(tape, alphas, batch.ids, cfg.phi, cfg.theta)?;
            let sum = tape.add(ce, conf)?;
            let sum = tape.add(sum, rr.loss)?;
            (sum, ce, rr.loss, Some(alphas), Some(rr.state))
        } else {
            let zero = tape.leaf(Matrix::scalar(0.0));
            (ce, ce, zero, None, None)
        }
    };

    let (lambda1, lambda2) = lambdas;
    let mut total = tape.scale(target_loss, 0.5 * lambda1);
    let (mut au, mut semantic) = (None, None);
    if let (true, Some(graph), Some(alphas)) = (cfg.use_aux, graph, alphas) {
        let nodes = aux_branch::au_node_features(tape, f, &vars.head, batch.aus)?;
        let h = aux_branch::gcn_forward(tape, nodes, graph, &vars.gcn, cfg.leaky_slope)?;
        let pred = aux_branch::au_predict(tape, h, &vars.node)?;
        let weights = tape.value(alphas).data().to_vec();
        let l_au = aux_branch::au_loss(tape, pred.semantic, &batch.au_targets, &weights)?;
        let weighted = tape.scale(l_au, lambda2);
        total = tape.add(total, weighted)?;
        au = Some(l_au);
        semantic = Some(pred.semantic);
    }

    Ok(BatchLosses {
        total,
        wce,
        rr,
        au,
        alphas,
        semantic,
        state,
    })
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: MetricsReport,
    pub audit: Vec<RelabelRecord>,
    /// Training set with corrected labels.
    pub dataset: Dataset,
    pub templates: SemanticTemplates,
    pub graph: Option<AuGraph>,
}

/// Stateful training run; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    test: Option<Dataset>,
    digest: String,
    model: Model,
    velocity: Model,
    templates: SemanticTemplates,
    graph: Option<AuGraph>,
    epoch: usize,
    report: MetricsReport,
    audit: Vec<RelabelRecord>,
}

#[derive(Default)]
struct Running {
    batches: usize,
    wce: f64,
    rr: f64,
    au: f64,
    total: f64,
    avg_high: f64,
    avg_low: f64,
}

impl Trainer {
    /// `test` is evaluated after each epoch; without it, accuracy is
    /// measured on the training features against their true labels.
    pub fn new(train: Dataset, test: Option<Dataset>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_INIT));
        let model = Model::init(train.dim, train.classes, train.aus, &config, &mut rng);
        let velocity = model.zeros_like();
        let graph = if config.use_aux {
            Some(build_run_graph(&train, &config)?)
        } else {
            None
        };
        Ok(Trainer {
            templates: SemanticTemplates::new(train.classes, train.aus),
            digest: dataset_digest(&train),
            config,
            dataset: train,
            test,
            model,
            velocity,
            graph,
            epoch: 0,
            report: MetricsReport::default(),
            audit: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn graph(&self) -> Option<&AuGraph> {
        self.graph.as_ref()
    }

    pub fn templates(&self) -> &SemanticTemplates {
        &self.templates
    }

    pub fn report(&self) -> &MetricsReport {
        &self.report
    }

    pub fn audit(&self) -> &[RelabelRecord] {
        &self.audit
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let epoch = self.epoch + 1;
        let cfg = &self.config;
        let lambdas = {
            let (l1, l2) = ramp_weights(epoch, cfg.beta);
            if cfg.aux_warmup == AuxWarmup::ZeroAuxLoss && epoch <= cfg.warmup_epochs {
                (l1, 0.0)
            } else {
                (l1, l2)
            }
        };
        let (lr_target, lr_aux) = (cfg.lr_target_at(epoch), cfg.lr_aux_at(epoch));
        let relabeling = cfg.use_aux && epoch > cfg.warmup_epochs;
        let noisy_at_start = self.dataset.noisy_count();

        let order = datagen::batches(
            &self.dataset,
            cfg.batch_size,
            mix(cfg.seed, STREAM_EPOCH + epoch as u64),
        );
        let mut running = Running::default();
        let mut pending: Vec<RelabelRecord> = Vec::new();

        for (batch_no, idx) in order.iter().enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| self.dataset.samples[i].observed_label).collect();
            let au: Vec<&[bool]> = idx.iter().map(|&i| self.dataset.samples[i].au_labels.as_slice()).collect();
            let batch = BatchInputs {
                features: features_of(&self.dataset, idx),
                labels: &labels,
                ids: idx,
                au_targets: aux_branch::au_targets(&au, self.dataset.aus),
                classes: self.dataset.classes,
                aus: self.dataset.aus,
            };

            let mut tape = Tape::new();
            let vars = self.model.register(&mut tape);
            let losses = batch_losses(&mut tape, &vars, self.graph.as_ref(), &batch, &self.config, lambdas)?;

            let value = |v: Var| tape.value(v).item();
            let (wce, rr) = (value(losses.wce), value(losses.rr));
            let au_val = losses.au.map_or(0.0, value);
            let total = value(losses.total);
            if !total.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {batch_no}: wce={wce} rr={rr} au={au_val}");
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    wce,
                    rr,
                    au: au_val,
                });
            }
            running.batches += 1;
            running.wce += wce;
            running.rr += rr;
            running.au += au_val;
            running.total += total;
            if let Some(s) = &losses.state {
                running.avg_high += s.avg_high;
                running.avg_low += s.avg_low;
            }

            let mut grads = tape.backward(losses.total)?;
            let g = vars.all().map(|v| grads.take(v));
            self.model.sgd_step(
                &g,
                &mut self.velocity,
                |group| match group {
                    ParamGroup::Target => lr_target,
                    ParamGroup::Aux => lr_aux,
                },
                self.config.momentum,
            );

            if let (Some(sem), Some(state), Some(alphas)) = (losses.semantic, &losses.state, losses.alphas) {
                let sem = tape.value(sem);
                let alphas = tape.value(alphas);
                let entries: Vec<TemplateEntry<'_>> = state
                    .high_set
                    .iter()
                    .map(|&k| TemplateEntry {
                        semantic: sem.row(k),
                        alpha: alphas.get(k, 0),
                        label: labels[k],
                    })
                    .collect();
                self.templates.update(&entries, epoch);

                if relabeling {
                    for &k in &state.low_set {
                        match relabel::propose(idx[k], sem.row(k), labels[k], &self.templates, epoch) {
                            Ok(rec) if rec.changed() => pending.push(rec),
                            Ok(_) => {}
                            Err(Error::DegenerateVector) => {
                                log::debug!("sample {} has a zero semantic feature; skipped", idx[k]);
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        }

        let fixed = pending
            .iter()
            .filter(|r| self.dataset.samples[r.id].true_label == r.corrected)
            .count();
        let changed = relabel::apply_corrections(&mut self.dataset, &pending)?;
        self.audit.extend(pending);

        let eval = match &self.test {
            Some(test) => evaluate(&self.model, test, &self.config)?,
            None => evaluate(&self.model, &self.dataset, &self.config)?,
        };
        let n = running.batches.max(1) as f64;
        self.epoch = epoch;
        self.report.epochs.push(EpochMetrics {
            epoch,
            eval,
            wce: running.wce / n,
            rr: running.rr / n,
            au: running.au / n,
            total: running.total / n,
            lambda1: lambdas.0,
            lambda2: lambdas.1,
            lr_target,
            lr_aux,
            avg_high: running.avg_high / n,
            avg_low: running.avg_low / n,
            relabel_count: changed,
            relabel_precision: (changed > 0).then(|| fixed as f64 / changed as f64),
            relabel_recall: (relabeling && noisy_at_start > 0).then(|| fixed as f64 / noisy_at_start as f64),
            noise_rate: self.dataset.noise_rate(),
        });
        Ok(self.report.epochs.last().expect("just pushed"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            rng_seed: self.config.seed,
            dataset_digest: self.digest.clone(),
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            templates: self.templates.clone(),
            observed_labels: self.dataset.observed_labels(),
            report: self.report.clone(),
            audit: self.audit.clone(),
        }
    }

    /// Restores a run from `ckpt`. `train` must be the dataset the run
    /// started from; its labels are replaced by the checkpointed ones.
    pub fn resume(ckpt: Checkpoint, mut train: Dataset, test: Option<Dataset>) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let digest = dataset_digest(&train);
        if digest != ckpt.dataset_digest {
            return Err(Error::Checkpoint(
                "training dataset does not match the checkpointed run".into(),
            ));
        }
        if ckpt.observed_labels.len() != train.len() {
            return Err(Error::Checkpoint("label count mismatch".into()));
        }
        for (s, &y) in train.samples.iter_mut().zip(&ckpt.observed_labels) {
            if y >= train.classes {
                return Err(Error::Checkpoint(format!("label {y} out of range")));
            }
            s.observed_label = y;
        }
        let graph = if ckpt.config.use_aux {
            Some(build_run_graph(&train, &ckpt.config)?)
        } else {
            None
        };
        Ok(Trainer {
            config: ckpt.config,
            dataset: train,
            test,
            digest,
            model: ckpt.model,
            velocity: ckpt.velocity,
            templates: ckpt.templates,
            graph,
            epoch: ckpt.epoch,
            report: ckpt.report,
            audit: ckpt.audit,
        })
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            report: self.report,
            audit: self.audit,
            dataset: self.dataset,
            templates: self.templates,
            graph: self.graph,
        }
    }
}

/// Runs `config.epochs` epochs from a fresh initialization.
pub fn train(train: Dataset, test: Option<Dataset>, config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(train, test, config)?;
    trainer.run()?;
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{corrupt_labels, generate, GenParams};

    fn tiny() -> Dataset {
        generate(&GenParams {
            classes: 3,
            aus: 6,
            dim: 8,
            n: 60,
            seed: 5,
            ..GenParams::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 20,
            warmup_epochs: 1,
            hidden: 8,
            feature_dim: 6,
            node_dim: 3,
            gcn_channels: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let fresh = Trainer::new(tiny(), None, cfg.clone()).unwrap().model().clone();
        let out = train(tiny(), None, cfg).unwrap();
        assert_eq!(out.model, fresh);
        assert!(out.report.epochs.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = corrupt_labels(&tiny(), 0.2, 1).unwrap();
        let a = train(ds.clone(), None, small_cfg()).unwrap();
        let b = train(ds, None, small_cfg()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.to_csv(), b.report.to_csv());
    }

    #[test]
    fn evaluate_has_no_side_effects() {
        let ds = tiny();
        let before = ds.clone();
        let cfg = small_cfg();
        let t = Trainer::new(ds.clone(), None, cfg.clone()).unwrap();
        let r = evaluate(t.model(), &ds, &cfg).unwrap();
        assert_eq!(ds, before);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(r.accuracy, trace as f64 / ds.len() as f64);
    }

    #[test]
    fn ablation_cells_all_train() {
        let ds = corrupt_labels(&tiny(), 0.2, 1).unwrap();
        for (use_target, use_aux) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = TrainConfig {
                use_target,
                use_aux,
                ..small_cfg()
            };
            let out = train(ds.clone(), None, cfg).unwrap();
            assert_eq!(out.report.epochs.len(), 3);
            if !use_aux {
                assert!(out.audit.is_empty());
                assert_eq!(out.dataset, ds);
            }
        }
    }

    #[test]
    fn no_relabeling_during_warmup() {
        let ds = corrupt_labels(&tiny(), 0.3, 1).unwrap();
        let cfg = TrainConfig {
            warmup_epochs: 3,
            ..small_cfg()
        };
        let out = train(ds.clone(), None, cfg).unwrap();
        assert!(out.audit.is_empty());
        assert_eq!(out.dataset.observed_labels(), ds.observed_labels());
    }

    #[test]
    fn zero_aux_warmup_turns_off_lambda2() {
        let cfg = TrainConfig {
            aux_warmup: AuxWarmup::ZeroAuxLoss,
            warmup_epochs: 2,
            ..small_cfg()
        };
        let out = train(tiny(), None, cfg).unwrap();
        let l2: Vec<f64> = out.report.epochs.iter().map(|m| m.lambda2).collect();
        assert_eq!(&l2[..2], &[0.0, 0.0]);
        assert!(l2[2] > 0.0);
    }
}
