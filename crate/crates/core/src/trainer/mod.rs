//! Few-shot prompt training. Each step solves every (sample, class, path)
//! transport problem, freezes the plans, backpropagates the cross-entropy
//! through costs, encoder, attention and tokens, and applies one Adam update.

mod ablation;
mod adam;
mod checkpoint;

pub use ablation::{run_ablation, AblationRow};
pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    ce_grad_wrt_distances, ce_loss, cost_matrix_backward, likelihood, one_hot, predict, score_all, AlignmentScore,
    ClassifierConfig, Path,
};
use crate::error::{Error, Result};
use crate::features::{augment, DatasetManifest, FeatureSet, Split};
use crate::numerics::Mat;
use crate::prompt::{BankGrads, ClassEmbeddings, ClassInit, DescriptionFile, FrozenEncoder, ModelConfig, PromptBank};
use crate::rng;
use crate::transport::{SolverConfig, INF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCsc,
    NoSc,
    NoGptInit,
    NoUot,
    NoSelfAttention,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoCsc, Variant::NoSc, Variant::NoGptInit, Variant::NoUot, Variant::NoSelfAttention];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCsc => "no_csc",
            Variant::NoSc => "no_sc",
            Variant::NoGptInit => "no_gpt_init",
            Variant::NoUot => "no_uot",
            Variant::NoSelfAttention => "no_self_attention",
        }
    }

    /// The classifier configuration this variant trains and evaluates with.
    pub fn classifier(self, base: &ClassifierConfig) -> ClassifierConfig {
        let mut c = base.clone();
        match self {
            Variant::NoCsc => c.gamma_cs = 0.0,
            Variant::NoSc => c.gamma_ds = 0.0,
            Variant::NoUot => {
                c.rho1 = INF;
                c.rho2 = INF;
            }
            Variant::Full | Variant::NoGptInit | Variant::NoSelfAttention => {}
        }
        c
    }

    pub fn class_init(self) -> ClassInit {
        match self {
            Variant::NoGptInit => ClassInit::Random,
            _ => ClassInit::Descriptions,
        }
    }

    /// Sets the bank's dataflow and trainable groups for this variant.
    pub fn configure(self, bank: &mut PromptBank) {
        match self {
            Variant::NoCsc => {
                bank.trainable.attention = false;
                bank.trainable.class_tokens = false;
            }
            Variant::NoSc => bank.trainable.shared = false,
            Variant::NoSelfAttention => {
                bank.use_attention = false;
                bank.trainable.attention = false;
                bank.trainable.class_tokens = true;
            }
            Variant::Full | Variant::NoGptInit | Variant::NoUot => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub jitter_sigma: f64,
    pub drop_prob: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { jitter_sigma: 0.05, drop_prob: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training samples per class.
    pub shots: usize,
    pub seed: u64,
    pub variant: Variant,
    pub augmentation: Augmentation,
    /// Classes competing in the training softmax; all manifest classes when
    /// absent.
    pub classes: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 32,
            epochs: 50,
            shots: 4,
            seed: 0,
            variant: Variant::Full,
            augmentation: Augmentation::default(),
            classes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::InvalidArgument("shots must be at least 1".into()));
        }
        Ok(())
    }
}

/// Every setting of a run; the strict JSON configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub classifier: ClassifierConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Fraction of the epoch's (augmented) samples predicted correctly.
    pub accuracy: f64,
    /// Transport problems that hit the iteration cap during the epoch.
    pub unconverged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bank: PromptBank,
    pub encoder: FrozenEncoder,
    pub optimizer: Adam,
    /// Classifier settings after the variant is applied.
    pub classifier: ClassifierConfig,
    pub solver: SolverConfig,
    pub variant: Variant,
    /// Indices into `bank.classes` competing in the training softmax.
    pub train_classes: Vec<usize>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(
        model: &ModelConfig,
        descriptions: &[DescriptionFile],
        classifier: &ClassifierConfig,
        solver: &SolverConfig,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        let mut bank =
            PromptBank::new(model.clone(), descriptions, variant.class_init(), rng::derive_seed(seed, "init"))?;
        variant.configure(&mut bank);
        let classifier = variant.classifier(classifier);
        classifier.validate()?;
        let optimizer = Adam::new(&bank);
        let train_classes = (0..bank.classes.len()).collect();
        Ok(Self {
            encoder: model.encoder(),
            bank,
            optimizer,
            classifier,
            solver: *solver,
            variant,
            train_classes,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn class_embeddings(&self, classes: &[usize]) -> Result<Vec<ClassEmbeddings>> {
        classes.iter().map(|&c| self.bank.embeddings(c, &self.encoder)).collect()
    }
}

/// Loss, gradient and per-sample diagnostics of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: BankGrads,
    /// Per sample, the index (into the competing classes) of the prediction.
    pub predictions: Vec<usize>,
    pub unconverged: usize,
}

/// Mean cross-entropy of `samples` over the competing `classes` and its
/// gradient with respect to every bank tensor, with transport plans held
/// fixed at their optima. `labels` index into `classes`.
pub fn loss_and_gradient(
    bank: &PromptBank,
    encoder: &FrozenEncoder,
    samples: &[&FeatureSet],
    labels: &[usize],
    classes: &[usize],
    ccfg: &ClassifierConfig,
    solver: &SolverConfig,
) -> Result<BatchGradient> {
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::InvalidArgument("batch must be nonempty with one label per sample".into()));
    }
    let embeddings: Vec<ClassEmbeddings> =
        classes.iter().map(|&c| bank.embeddings(c, encoder)).collect::<Result<_>>()?;
    let names: Vec<&str> = classes.iter().map(|&c| bank.classes[c].name.as_str()).collect();
    let scores = score_all(samples, &names, &embeddings, ccfg, solver)?;

    let batch = samples.len();
    let k = classes.len();
    let mut probs = Mat::zeros(batch, k);
    let mut d_prompts: Vec<[Mat; 2]> = embeddings
        .iter()
        .map(|e| [Mat::zeros(e.cs.rows(), e.cs.cols()), Mat::zeros(e.ds.rows(), e.ds.cols())])
        .collect();
    let mut predictions = Vec::with_capacity(batch);
    let mut unconverged = 0;
    for (b, row) in scores.iter().enumerate() {
        let d: Vec<f64> = row.iter().map(|s| s.d_total).collect();
        let p = likelihood(&d, ccfg.tau)?;
        probs.row_mut(b).copy_from_slice(&p);
        predictions.push(predict(&d));
        unconverged += row.iter().map(AlignmentScore::unconverged).sum::<usize>();
        let dd = ce_grad_wrt_distances(&p, labels[b], batch, ccfg.tau);
        for (i, score) in row.iter().enumerate() {
            for (slot, path) in Path::BOTH.into_iter().enumerate() {
                let Some(ps) = score.path(path) else { continue };
                let weight = dd[i] * ccfg.gamma(path);
                if weight == 0.0 {
                    continue;
                }
                let d_cost = ps.plan.coupling.map(|w| w * weight);
                let f = active_rows(samples[b], &score.columns)?;
                let g = path.prompts(&embeddings[i]);
                d_prompts[i][slot].add_scaled(&cost_matrix_backward(&f, g, &d_cost)?, 1.0);
            }
        }
    }
    let loss = ce_loss(&probs, &one_hot(labels, k)?)?;

    let mut grads = BankGrads::zeros_like(bank);
    for (i, &c) in classes.iter().enumerate() {
        let [d_cs, d_ds] = &d_prompts[i];
        let cs = (ccfg.gamma_cs > 0.0).then_some(d_cs);
        let ds = (ccfg.gamma_ds > 0.0).then_some(d_ds);
        bank.backward(c, encoder, ds, cs, &mut grads)?;
    }
    Ok(BatchGradient { loss, grads, predictions, unconverged })
}

fn active_rows(fs: &FeatureSet, columns: &[usize]) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = columns.iter().map(|&j| fs.features.row(j).to_vec()).collect();
    Mat::from_rows(&rows)
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
    pub unconverged: usize,
}

/// One alternating step on `batch`: augment, solve all transport problems,
/// backpropagate through the fixed plans, update. `labels` index into
/// `state.train_classes`; `step` only seeds augmentation and labels errors.
pub fn train_step(
    batch: &[FeatureSet],
    labels: &[usize],
    state: &mut TrainState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    let aug = cfg.augmentation;
    let views: Vec<FeatureSet> = batch
        .iter()
        .map(|fs| {
            let seed = rng::derive_seed(cfg.seed, &format!("augment/{}/{}/{}", state.epoch, step, fs.sample_id));
            augment(fs, aug.jitter_sigma, aug.drop_prob, seed)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&FeatureSet> = views.iter().collect();
    let g = loss_and_gradient(
        &state.bank,
        &state.encoder,
        &refs,
        labels,
        &state.train_classes,
        &state.classifier,
        &state.solver,
    )?;
    if !g.loss.is_finite() || g.grads.tensors().iter().any(|m| m.as_slice().iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence { epoch: state.epoch, step });
    }
    state.optimizer.update(&mut state.bank, &g.grads, cfg.learning_rate)?;
    let correct = g.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(StepReport { loss: g.loss, correct, samples: batch.len(), unconverged: g.unconverged })
}

/// Orders description files like `classes`.
pub fn descriptions_for(classes: &[String], files: &[DescriptionFile]) -> Result<Vec<DescriptionFile>> {
    classes
        .iter()
        .map(|c| files.iter().find(|f| &f.class_name == c).cloned().ok_or_else(|| Error::NoDescriptions(c.clone())))
        .collect()
}

fn class_indices(bank: &PromptBank, names: Option<&[String]>) -> Result<Vec<usize>> {
    match names {
        None => Ok((0..bank.classes.len()).collect()),
        Some([]) => Err(Error::InvalidArgument("class subset is empty".into())),
        Some(names) => names.iter().map(|n| bank.class_index(n)).collect(),
    }
}

/// Builds the initial state for `manifest`.
pub fn initial_state(
    manifest: &DatasetManifest,
    descriptions: &[DescriptionFile],
    run: &RunConfig,
) -> Result<TrainState> {
    run.train.validate()?;
    let files = descriptions_for(&manifest.classes, descriptions)?;
    let mut state =
        TrainState::new(&run.model, &files, &run.classifier, &run.solver, run.train.variant, run.train.seed)?;
    state.train_classes = class_indices(&state.bank, run.train.classes.as_deref())?;
    Ok(state)
}

/// Few-shot training: subsamples `shots` training samples per competing
/// class, then runs `epochs` passes of shuffled mini-batches.
pub fn train(manifest: &DatasetManifest, descriptions: &[DescriptionFile], run: &RunConfig) -> Result<TrainState> {
    let mut state = initial_state(manifest, descriptions, run)?;
    let cfg = &run.train;
    let competing: Vec<&str> = state.train_classes.iter().map(|&c| state.bank.classes[c].name.as_str()).collect();
    let chosen = manifest.few_shot(Split::Train, cfg.shots, rng::derive_seed(cfg.seed, "shots"))?;
    let mut data = Vec::new();
    for entry in chosen.into_iter().filter(|e| competing.contains(&e.class.as_str())) {
        let label = competing.iter().position(|c| *c == entry.class).expect("filtered to competing classes");
        data.push((manifest.load_sample(entry)?, label));
    }
    if data.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    info!(
        "training variant {} on {} samples, {} classes, {} epochs",
        state.variant.name(),
        data.len(),
        competing.len(),
        cfg.epochs
    );

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("order/{epoch}")));
        let (mut loss, mut correct, mut unconverged) = (0.0, 0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<FeatureSet> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let report = train_step(&batch, &labels, &mut state, cfg, step)?;
            loss += report.loss * report.samples as f64;
            correct += report.correct;
            unconverged += report.unconverged;
        }
        let record = EpochRecord {
            epoch,
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            unconverged,
        };
        debug!("epoch {epoch}: loss {:.6}, accuracy {:.4}", record.loss, record.accuracy);
        if unconverged > 0 {
            warn!("epoch {epoch}: {unconverged} transport problems hit the iteration cap");
        }
        state.history.push(record);
    }
    state.epoch = cfg.epochs;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: String,
    pub accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
    pub mean_loss: f64,
    pub samples: usize,
    pub unconverged: usize,
}

/// Accuracy and loss on `split` without augmentation. With `classes`, only
/// samples of those classes are used and only those classes compete.
pub fn evaluate(
    manifest: &DatasetManifest,
    split: Split,
    state: &TrainState,
    classes: Option<&[String]>,
) -> Result<Metrics> {
    let competing = class_indices(&state.bank, classes)?;
    let names: Vec<&str> = competing.iter().map(|&c| state.bank.classes[c].name.as_str()).collect();
    let entries: Vec<_> =
        manifest.split(split).into_iter().filter(|e| classes.is_none() || names.contains(&e.class.as_str())).collect();
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let mut samples = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for e in &entries {
        let label = names.iter().position(|n| *n == e.class).ok_or_else(|| Error::UnknownClass(e.class.clone()))?;
        samples.push(manifest.load_sample(e)?);
        labels.push(label);
    }
    evaluate_samples(&samples, &labels, &competing, state, split.name())
}

/// [`evaluate`] on already loaded samples; `labels` index into `classes`.
pub fn evaluate_samples(
    samples: &[FeatureSet],
    labels: &[usize],
    classes: &[usize],
    state: &TrainState,
    split: &str,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.into()));
    }
    let embeddings = state.class_embeddings(classes)?;
    let names: Vec<&str> = classes.iter().map(|&c| state.bank.classes[c].name.as_str()).collect();
    let refs: Vec<&FeatureSet> = samples.iter().collect();
    let scores = score_all(&refs, &names, &embeddings, &state.classifier, &state.solver)?;
    let mut probs = Mat::zeros(samples.len(), classes.len());
    let mut hits: BTreeMap<String, (usize, usize)> = names.iter().map(|n| (n.to_string(), (0, 0))).collect();
    let mut correct = 0;
    let mut unconverged = 0;
    for (b, row) in scores.iter().enumerate() {
        let d: Vec<f64> = row.iter().map(|s| s.d_total).collect();
        probs.row_mut(b).copy_from_slice(&likelihood(&d, state.classifier.tau)?);
        unconverged += row.iter().map(AlignmentScore::unconverged).sum::<usize>();
        let ok = predict(&d) == labels[b];
        correct += usize::from(ok);
        let entry = hits.get_mut(names[labels[b]]).expect("label names a competing class");
        entry.0 += usize::from(ok);
        entry.1 += 1;
    }
    let per_class = hits.into_iter().filter(|(_, (_, n))| *n > 0).map(|(k, (c, n))| (k, c as f64 / n as f64)).collect();
    Ok(Metrics {
        split: split.into(),
        accuracy: correct as f64 / samples.len() as f64,
        per_class,
        mean_loss: ce_loss(&probs, &one_hot(labels, classes.len())?)?,
        samples: samples.len(),
        unconverged,
    })
}

/// History as CSV with header `epoch,loss,accuracy,unconverged`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,accuracy,unconverged\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.accuracy, r.unconverged));
    }
    out
}
