//! Training loop with early stopping, reports, checkpoints, grid search and
//! the ablation table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{fnv1a, DatasetSplit, TrainingInstance};
use crate::error::{Error, Result};
use crate::evolution::EvolutionKind;
use crate::extraction::{RegWeights, RegularizerTerms};
use crate::metrics::{length_breakdown, LengthBucket, MetricReport};
use crate::model::{ModelConfig, SurgeModel};
use crate::params::Adam;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation GAUC improvement before stopping.
    pub patience: usize,
    /// Coefficient of the squared L2 penalty.
    pub l2: f64,
    pub reg: RegWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, batch_size: 500, max_epochs: 50, patience: 5, l2: 1e-5, reg: RegWeights::default(), seed: 42 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a TOML document (`[model]` / `[train]` tables or dotted keys).
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        self.model.validate(max_len)?;
        let t = &self.train;
        if !(t.learning_rate > 0.0) || t.batch_size == 0 || t.max_epochs == 0 {
            return Err(Error::Config("learning_rate, batch_size and max_epochs must be positive".into()));
        }
        let r = &t.reg;
        if [t.l2, r.same_mapping, r.single_affiliation, r.relative_position].iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("penalty weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serialises").as_bytes()))
    }
}

/// Independent random stream for one purpose (`init`, `shuffle`, ...).
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut bytes = name.as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_gauc: Option<f64>,
}

pub const REPORT_SCHEMA: &str = "surge-run/1";

/// Everything about a run except wall-clock times, which live in [`Timings`]
/// so that reports compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub parameter_count: usize,
    pub parameter_groups: Vec<(String, usize)>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    pub validation: MetricReport,
    pub test: MetricReport,
    /// Mean `L_M`, `L_A` (mean row entropy of S) and `L_P` on the test set.
    pub test_regularizers: RegularizerTerms,
    pub length_breakdown: Vec<LengthBucket>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("run report: {e}")))
    }

    /// Key/value text, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schema = {}", self.schema);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "dataset_hash = {}", self.dataset_hash);
        let _ = writeln!(s, "parameter_count = {}", self.parameter_count);
        let _ = writeln!(s, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(s, "epochs_run = {}", self.epochs_run);
        s.push_str(&self.validation.to_text("validation."));
        s.push_str(&self.test.to_text("test."));
        let r = &self.test_regularizers;
        let _ = writeln!(s, "test.same_mapping = {:.6}", r.same_mapping);
        let _ = writeln!(s, "test.assignment_entropy = {:.6}", r.single_affiliation);
        let _ = writeln!(s, "test.relative_position = {:.6}", r.relative_position);
        for (k, b) in self.length_breakdown.iter().enumerate() {
            let g = b.gauc.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "test.length_group.{k} = users {} len {:.1}..{:.1} gauc {g}", b.users, b.min_len, b.max_len);
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub epoch_seconds: Vec<f64>,
}

impl Timings {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len().max(1) as f64
    }
}

pub struct TrainOutcome<T> {
    pub model: SurgeModel<T>,
    pub report: RunReport,
    pub timings: Timings,
}

/// Early-stopping key: validation GAUC, falling back to AUC.
fn selection_metric(m: &MetricReport) -> f64 {
    m.gauc.or(m.auc).unwrap_or(f64::NEG_INFINITY)
}

/// Runs one epoch and returns the mean training loss (including the L2 term).
pub fn train_epoch<T: Scalar>(
    model: &mut SurgeModel<T>,
    adam: &mut Adam<T>,
    train: &[TrainingInstance],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for (b, idx) in order.chunks(config.batch_size).enumerate() {
        let batch: Vec<&TrainingInstance> = idx.iter().map(|&i| &train[i]).collect();
        let result = model.batch_gradients(&batch, &config.reg);
        let loss = result.loss + config.l2 * model.store.l2_sq().as_f64();
        if !loss.is_finite() {
            log::error!("non-finite loss in epoch {epoch} batch {b}; instances {idx:?}");
            return Err(Error::Divergence { epoch, batch: b, loss });
        }
        adam.step(&mut model.store, &result.grads, T::lit(config.l2));
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Trains with early stopping on validation GAUC and evaluates the best
/// epoch's parameters.
pub fn train<T: Scalar>(config: &RunConfig, split: &DatasetSplit) -> Result<TrainOutcome<T>> {
    config.validate(split.max_len)?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let seed = config.train.seed;
    let mut model = SurgeModel::<T>::new(config.model.clone(), split.item_vocab_size, split.max_len, &mut stream(seed, "init"))?;
    for (_, part) in split.parts() {
        for inst in part {
            crate::data::validate_instance(inst, split.max_len, split.item_vocab_size).map_err(Error::Data)?;
        }
    }
    let mut adam = Adam::new(T::lit(config.train.learning_rate), &model.store);
    let mut shuffle = stream(seed, "shuffle");
    let mut history = Vec::new();
    let mut timings = Timings::default();
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.clone());

    for epoch in 1..=config.train.max_epochs {
        let start = Instant::now();
        let train_loss = train_epoch(&mut model, &mut adam, &split.train, &config.train, &mut shuffle, epoch)?;
        timings.epoch_seconds.push(start.elapsed().as_secs_f64());
        let val = MetricReport::compute(&model.score(&split.validation)?);
        log::info!("epoch {epoch}: loss {train_loss:.5} validation gauc {:?}", val.gauc);
        history.push(EpochRecord { epoch, train_loss, validation_gauc: val.gauc });
        let key = selection_metric(&val);
        if key > best.0 || epoch == 1 {
            best = (key, epoch, model.store.clone());
        }
        if epoch - best.1 >= config.train.patience {
            break;
        }
    }
    model.store = best.2;
    let test_scores = model.score(&split.test)?;
    let report = RunReport {
        schema: REPORT_SCHEMA.into(),
        config_hash: config.hash(),
        dataset_hash: split.hash(),
        parameter_count: model.parameter_count(),
        parameter_groups: model.parameter_table(),
        best_epoch: best.1,
        epochs_run: history.len(),
        history,
        validation: MetricReport::compute(&model.score(&split.validation)?),
        test: MetricReport::compute(&test_scores),
        test_regularizers: model.regularizer_means(&split.test),
        length_breakdown: length_breakdown(&test_scores, 5),
    };
    Ok(TrainOutcome { model, report, timings })
}

/// Values searched by [`grid_search`]; every axis needs at least one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub l2: Vec<f64>,
    pub same_mapping: Vec<f64>,
    pub single_affiliation: Vec<f64>,
    pub relative_position: Vec<f64>,
    pub pooled_len: Vec<usize>,
}

impl Default for Grids {
    fn default() -> Self {
        let reg = vec![1e-7, 1e-5, 1e-3];
        Self { l2: reg.clone(), same_mapping: reg.clone(), single_affiliation: reg.clone(), relative_position: reg, pooled_len: vec![10] }
    }
}

impl Grids {
    /// One point: the values of `config`.
    pub fn single(config: &RunConfig) -> Self {
        let r = &config.train.reg;
        Self {
            l2: vec![config.train.l2],
            same_mapping: vec![r.same_mapping],
            single_affiliation: vec![r.single_affiliation],
            relative_position: vec![r.relative_position],
            pooled_len: vec![config.model.pooled_len],
        }
    }

    /// Every combination, in lexicographic axis order.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        let axes = [&self.l2, &self.same_mapping, &self.single_affiliation, &self.relative_position];
        if axes.iter().any(|a| a.is_empty()) || self.pooled_len.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if axes.iter().any(|a| a.iter().any(|&v| !(v > 0.0) || !v.is_finite())) || self.pooled_len.contains(&0) {
            return Err(Error::Config("grid values must be positive".into()));
        }
        let mut out = Vec::new();
        for &l2 in &self.l2 {
            for &m in &self.same_mapping {
                for &a in &self.single_affiliation {
                    for &p in &self.relative_position {
                        for &len in &self.pooled_len {
                            let mut c = base.clone();
                            c.train.l2 = l2;
                            c.train.reg = RegWeights { same_mapping: m, single_affiliation: a, relative_position: p };
                            c.model.pooled_len = len;
                            out.push(c);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

pub struct GridOutcome {
    pub best: RunConfig,
    pub best_index: usize,
    pub runs: Vec<(RunConfig, RunReport)>,
}

/// Trains every grid point and keeps the best validation GAUC (first wins
/// ties).
pub fn grid_search<T: Scalar>(base: &RunConfig, grids: &Grids, split: &DatasetSplit) -> Result<GridOutcome> {
    let configs = grids.expand(base)?;
    let mut runs: Vec<(RunConfig, RunReport)> = Vec::with_capacity(configs.len());
    let mut best_index = 0;
    for (k, c) in configs.into_iter().enumerate() {
        log::info!("grid point {}: l2 {} reg {:?} m {}", k + 1, c.train.l2, c.train.reg, c.model.pooled_len);
        let out = train::<T>(&c, split)?;
        if k > 0 && selection_metric(&out.report.validation) > selection_metric(&runs[best_index].1.validation) {
            best_index = k;
        }
        runs.push((c, out.report));
    }
    Ok(GridOutcome { best: runs[best_index].0.clone(), best_index, runs })
}

/// Named configuration variants of the ablation table.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, &'static str, RunConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c.model);
        c
    };
    vec![
        ("fusion", "w/o Fusion", with(&|m| m.fusion = false)),
        ("fusion", "w/o Query-aware", with(&|m| m.query_aware = false)),
        ("fusion", "w/o Cluster-aware", with(&|m| m.cluster_aware = false)),
        ("fusion", "w/ Fusion", base.clone()),
        ("extraction", "w/o Extraction", with(&|m| m.extraction = false)),
        ("extraction", "w/o Readout", with(&|m| m.readout = false)),
        ("extraction", "w/o Regularization", with(&|m| m.regularization = false)),
        ("extraction", "w/ Extraction", base.clone()),
        ("evolution", "GRU on pooled sequence", with(&|m| m.evolution = EvolutionKind::Gru)),
        ("evolution", "GRU baseline", with(&|m| *m = m.gru_baseline())),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub section: String,
    pub name: String,
    pub parameter_count: usize,
    pub test: MetricReport,
    pub mean_epoch_seconds: f64,
}

/// Trains every variant; identical configurations are trained once.
pub fn ablate<T: Scalar>(base: &RunConfig, split: &DatasetSplit) -> Result<Vec<AblationRow>> {
    let mut done: Vec<(RunConfig, RunReport, Timings)> = Vec::new();
    let mut rows = Vec::new();
    for (section, name, config) in ablation_variants(base) {
        let cached = done.iter().position(|(c, _, _)| *c == config);
        let k = match cached {
            Some(k) => k,
            None => {
                log::info!("ablation: {name}");
                let out = train::<T>(&config, split)?;
                done.push((config, out.report, out.timings));
                done.len() - 1
            }
        };
        let (_, report, timings) = &done[k];
        rows.push(AblationRow {
            section: section.into(),
            name: name.into(),
            parameter_count: report.parameter_count,
            test: report.test.clone(),
            mean_epoch_seconds: timings.mean_epoch_seconds(),
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "   -  ".to_string(), |x| format!("{x:.4}"));
    let mut s = String::new();
    let _ = writeln!(s, "{:<11} {:<24} {:>8} {:>8} {:>8} {:>8} {:>10} {:>9}", "section", "model", "AUC", "GAUC", "MRR", "NDCG@2", "params", "s/epoch");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<11} {:<24} {:>8} {:>8} {:>8} {:>8} {:>10} {:>9.2}",
            r.section,
            r.name,
            f(r.test.auc),
            f(r.test.gauc),
            f(r.test.mrr),
            f(r.test.ndcg_at_2),
            r.parameter_count,
            r.mean_epoch_seconds
        );
    }
    s
}

pub const CHECKPOINT_HEADER: &str = "surge-checkpoint 1";

/// Writes parameters as text: a header, the config, then for every parameter
/// `name rows cols` followed by one line of row-major values.
pub fn save_checkpoint<T: Scalar>(model: &SurgeModel<T>, config: &RunConfig, path: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_HEADER}");
    let _ = writeln!(s, "scalar {}", T::NAME);
    let _ = writeln!(s, "config {}", serde_json::to_string(config).expect("config serialises"));
    let _ = writeln!(s, "config_hash {}", config.hash());
    let _ = writeln!(s, "items {}", model.num_items);
    let _ = writeln!(s, "max_len {}", model.max_len);
    let _ = writeln!(s, "params {}", model.store.len());
    for id in model.store.ids() {
        let v = model.store.get(id);
        let _ = writeln!(s, "{} {} {}", model.store.name(id), v.nrows(), v.ncols());
        let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{}", values.join(" "));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SurgeModel<T>, RunConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("truncated before {what}")));
    if next("header")? != CHECKPOINT_HEADER {
        return Err(bad("unknown header".into()));
    }
    let keyed = |line: &str, key: &str| line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).map(str::to_string);
    let _scalar = keyed(next("scalar")?, "scalar").ok_or_else(|| bad("missing scalar".into()))?;
    let config_json = keyed(next("config")?, "config").ok_or_else(|| bad("missing config".into()))?;
    let config: RunConfig = serde_json::from_str(&config_json).map_err(|e| bad(e.to_string()))?;
    let hash = keyed(next("config_hash")?, "config_hash").ok_or_else(|| bad("missing config hash".into()))?;
    if hash != config.hash() {
        return Err(bad("config hash does not match config".into()));
    }
    let number = |line: &str, key: &str| keyed(line, key).and_then(|v| v.parse::<usize>().ok());
    let items = number(next("items")?, "items").ok_or_else(|| bad("missing items".into()))?;
    let max_len = number(next("max_len")?, "max_len").ok_or_else(|| bad("missing max_len".into()))?;
    let count = number(next("params")?, "params").ok_or_else(|| bad("missing params".into()))?;

    let mut model = SurgeModel::<T>::new(config.model.clone(), items, max_len, &mut stream(0, "checkpoint"))?;
    if count != model.store.len() {
        return Err(bad(format!("{count} parameters, model has {}", model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let head = next("parameter header")?;
        let parts: Vec<&str> = head.split(' ').collect();
        let expect = model.store.get(id).dim();
        if parts.len() != 3 || parts[0] != model.store.name(id) || parts[1].parse() != Ok(expect.0) || parts[2].parse() != Ok(expect.1) {
            return Err(bad(format!("expected {} {} {}, found '{head}'", model.store.name(id), expect.0, expect.1)));
        }
        let values: Vec<T> = next("values")?
            .split(' ')
            .map(|v| v.parse::<T>().map_err(|_| bad(format!("bad value '{v}' in {}", parts[0]))))
            .collect::<Result<_>>()?;
        if values.len() != expect.0 * expect.1 {
            return Err(bad(format!("{}: {} values", parts[0], values.len())));
        }
        let dst = model.store.get_mut(id);
        for (d, v) in dst.iter_mut().zip(values) {
            *d = v;
        }
    }
    Ok((model, config))
}
