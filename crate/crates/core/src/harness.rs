//! Experiment orchestration: data preparation, the per-round loop, metrics and
//! checkpoints on disk, and multi-seed aggregation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::acquire::{
    entropy_scores, kcenter_greedy, kmeans_init, score_adroit, select_min_b, select_random, AcquisitionScore,
    InitStrategy, Strategy,
};
use crate::config::{parse_flat, ALConfig};
use crate::data::{apply_imbalance, load_cifar10, load_records, make_synthetic_with, SyntheticSpec};
use crate::dataset::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::nets::{Architecture, Head, ParamSet, Tensor, VaeParams};
use crate::pool::PoolState;
use crate::rng::Rng;
use crate::trainer::{
    train_adroit, train_adroit_from, train_target, CsvRow, LossRow, TargetRow, TrainContext, TrainReport, TrainStreams,
};

/// Keys of an experiment file besides those of [`ALConfig`].
pub const EXPERIMENT_KEYS: &[&str] = &[
    "source",
    "data_path",
    "classes",
    "per_class",
    "side",
    "channels",
    "noise",
    "imbalance_ratio",
    "imbalance_classes",
    "holdout_fraction",
    "strategies",
    "seeds",
    "init_strategy",
    "warm_start",
];

pub const ROUNDS_HEADER: &str =
    "strategy,seed,round,labeled_count,accuracy,target_loss,vae_loss,disc_loss,disc_accuracy";
pub const SELECTIONS_HEADER: &str = "index,score,strategy,round,seed";
pub const PLOT_HEADER: &str = "strategy,labeled_count,mean_acc,std_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Records,
}

/// Flat file form of the experiment keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentFile {
    source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_path: Option<PathBuf>,
    classes: usize,
    per_class: usize,
    side: usize,
    channels: usize,
    noise: f64,
    imbalance_ratio: f64,
    imbalance_classes: Vec<usize>,
    holdout_fraction: f64,
    strategies: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    init_strategy: String,
    warm_start: bool,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        let syn = SyntheticSpec::new(4, 625, 16);
        ExperimentFile {
            source: DataSource::Synthetic,
            data_path: None,
            classes: syn.num_classes,
            per_class: syn.per_class,
            side: syn.side,
            channels: syn.channels,
            noise: syn.noise,
            imbalance_ratio: 1.0,
            imbalance_classes: Vec::new(),
            holdout_fraction: 0.2,
            strategies: vec!["adroit".into(), "random".into()],
            seeds: None,
            init_strategy: "random".into(),
            warm_start: false,
        }
    }
}

/// Where the images come from and how they are modified.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub data_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Ratio 1 leaves the training split untouched.
    pub imbalance_ratio: f64,
    pub imbalance_classes: Vec<usize>,
    pub holdout_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub al: ALConfig,
    pub strategies: Vec<Strategy>,
    /// Run seeds; `al.seed` fixes the dataset, holdout split and imbalance.
    pub seeds: Vec<u64>,
    pub init_strategy: InitStrategy,
    /// Continue the VAE and discriminator from the previous round instead of re-initializing.
    pub warm_start: bool,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let table = parse_flat(text, &[ALConfig::KEYS, EXPERIMENT_KEYS])?;
        Self::from_table(&table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn from_table(table: &Table) -> Result<Self> {
        let al = ALConfig::from_table(table)?;
        let own: Table = table
            .iter()
            .filter(|(k, _)| EXPERIMENT_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let file: ExperimentFile = own
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let strategies = file
            .strategies
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Strategy>>>()?;
        let spec = ExperimentSpec {
            data: DataSpec {
                source: file.source,
                data_path: file.data_path,
                synthetic: SyntheticSpec {
                    num_classes: file.classes,
                    per_class: file.per_class,
                    side: file.side,
                    channels: file.channels,
                    noise: file.noise,
                },
                imbalance_ratio: file.imbalance_ratio,
                imbalance_classes: file.imbalance_classes,
                holdout_fraction: file.holdout_fraction,
            },
            seeds: file.seeds.unwrap_or_else(|| vec![al.seed]),
            al,
            strategies,
            init_strategy: file.init_strategy.parse()?,
            warm_start: file.warm_start,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        self.al.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        if s.len() != self.strategies.len() {
            return Err(Error::Config("strategies must not repeat".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let f = self.data.holdout_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("holdout_fraction must lie in (0, 1), got {f}")));
        }
        if !(self.data.imbalance_ratio.is_finite() && self.data.imbalance_ratio >= 1.0) {
            return Err(Error::Config("imbalance_ratio must be >= 1".into()));
        }
        if self.data.source != DataSource::Synthetic && self.data.data_path.is_none() {
            return Err(Error::Config("data_path is required for this source".into()));
        }
        Ok(())
    }

    /// Total labels requested over the run.
    pub fn label_demand(&self) -> usize {
        self.al.initial_pool + self.al.rounds * self.al.budget
    }

    /// Checks against the prepared training split.
    pub fn validate_for(&self, train_len: usize) -> Result<()> {
        if self.label_demand() > train_len {
            return Err(Error::InvalidArgument(format!(
                "initial_pool + rounds * budget = {} exceeds the {} training examples",
                self.label_demand(),
                train_len
            )));
        }
        Ok(())
    }

    /// Flat TOML document that parses back to this spec.
    pub fn to_toml(&self) -> String {
        let file = ExperimentFile {
            source: self.data.source,
            data_path: self.data.data_path.clone(),
            classes: self.data.synthetic.num_classes,
            per_class: self.data.synthetic.per_class,
            side: self.data.synthetic.side,
            channels: self.data.synthetic.channels,
            noise: self.data.synthetic.noise,
            imbalance_ratio: self.data.imbalance_ratio,
            imbalance_classes: self.data.imbalance_classes.clone(),
            holdout_fraction: self.data.holdout_fraction,
            strategies: self.strategies.iter().map(|s| s.name().to_string()).collect(),
            seeds: Some(self.seeds.clone()),
            init_strategy: self.init_strategy.name().into(),
            warm_start: self.warm_start,
        };
        let mut table = self.al.to_table();
        table.extend(Table::try_from(&file).expect("experiment keys always serialize"));
        toml::to_string(&table).expect("flat table always serializes")
    }
}

/// Training images and the holdout set used for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub holdout: Dataset,
}

/// The full dataset named by the spec, before splitting.
pub fn load_source(spec: &ExperimentSpec) -> Result<Dataset> {
    let d = &spec.data;
    match d.source {
        DataSource::Synthetic => make_synthetic_with(d.synthetic, &mut Rng::stream(spec.al.seed, &["data", "synthetic"])),
        DataSource::Cifar10 => load_cifar10(d.data_path.as_deref().expect("validated")),
        DataSource::Records => load_records(
            d.data_path.as_deref().expect("validated"),
            ImageShape::square(d.synthetic.channels, d.synthetic.side),
            d.synthetic.num_classes,
        ),
    }
}

/// Loads or generates the data, then applies the holdout split and the
/// training-side imbalance, all seeded by `al.seed`.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<Splits> {
    let seed = spec.al.seed;
    let d = &spec.data;
    let full = load_source(spec)?;
    let n = full.len();
    let n_hold = ((n as f64) * d.holdout_fraction).round() as usize;
    if n_hold == 0 || n_hold >= n {
        return Err(Error::invalid(format!("holdout of {n_hold} from {n} examples")));
    }
    let mut hold: Vec<usize> =
        rand::seq::index::sample(&mut Rng::stream(seed, &["data", "holdout"]), n, n_hold).into_vec();
    hold.sort_unstable();
    let mut in_hold = vec![false; n];
    hold.iter().for_each(|&i| in_hold[i] = true);
    let train_idx: Vec<usize> = (0..n).filter(|&i| !in_hold[i]).collect();
    let mut train = full.subset(&train_idx)?;
    if d.imbalance_ratio > 1.0 {
        train = apply_imbalance(
            &train,
            d.imbalance_ratio,
            &d.imbalance_classes,
            &mut Rng::stream(seed, &["data", "imbalance"]),
        )?;
    }
    Ok(Splits {
        train,
        holdout: full.subset(&hold)?,
    })
}

/// Fraction of `indices` whose label-head argmax (lowest class on ties) equals the label.
pub fn evaluate_accuracy(arch: &Architecture, target: &ParamSet, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let shape = dataset.shape();
    let mut correct = 0usize;
    for chunk in indices.chunks(crate::acquire::SCORE_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * shape.numel());
        chunk.iter().for_each(|&i| data.extend_from_slice(dataset.image(i)));
        let x = Tensor::new(vec![chunk.len(), shape.channels, shape.height, shape.width], data);
        let logits = arch.target_forward(target, &x, Head::Label)?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == dataset.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Balanced accuracy of the discriminator on freshly computed encoder means:
/// the mean of the labeled hit rate (D > 0.5) and the unlabeled hit rate (D < 0.5).
pub fn discriminator_accuracy(
    arch: &Architecture,
    vae: &VaeParams,
    disc: &ParamSet,
    dataset: &Dataset,
    pool: &PoolState,
) -> Result<f64> {
    let rate = |idx: &[usize], labeled: bool| -> Result<f64> {
        let flipped = PoolState::from_labeled(dataset.len(), complement(dataset.len(), idx))?;
        let scores = score_adroit(dataset, &flipped, arch, vae, disc)?;
        let hits = scores
            .iter()
            .filter(|s| if labeled { s.score > 0.5 } else { s.score < 0.5 })
            .count();
        Ok(hits as f64 / scores.len() as f64)
    };
    Ok(0.5 * (rate(pool.labeled(), true)? + rate(pool.unlabeled(), false)?))
}

fn complement(n: usize, idx: &[usize]) -> Vec<usize> {
    let mut keep = vec![true; n];
    idx.iter().for_each(|&i| keep[i] = false);
    (0..n).filter(|&i| keep[i]).collect()
}

/// One selected example; strategies without a per-example score leave it empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub score: Option<f64>,
}

/// Trained models available to a selector.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub target: &'a ParamSet,
    pub adversarial: Option<(&'a VaeParams, &'a ParamSet)>,
}

/// One acquisition step of `strategy`.
pub fn acquire(
    strategy: Strategy,
    dataset: &Dataset,
    pool: &PoolState,
    arch: &Architecture,
    models: Models<'_>,
    budget: usize,
    rng: &mut Rng,
) -> Result<Vec<Selection>> {
    let with_scores = |scores: Vec<AcquisitionScore>, picks: Vec<usize>| {
        let mut by_index = vec![f64::NAN; dataset.len()];
        scores.iter().for_each(|s| by_index[s.index] = s.score);
        picks
            .into_iter()
            .map(|index| Selection {
                index,
                score: Some(by_index[index]),
            })
            .collect()
    };
    Ok(match strategy {
        Strategy::Adroit => {
            let (vae, disc) = models
                .adversarial
                .ok_or_else(|| Error::state("adroit selection needs a trained VAE and discriminator"))?;
            let scores = score_adroit(dataset, pool, arch, vae, disc)?;
            let picks = select_min_b(&scores, budget)?;
            with_scores(scores, picks)
        }
        Strategy::Entropy => {
            let scores = entropy_scores(dataset, pool, arch, models.target)?;
            let negated: Vec<AcquisitionScore> = scores
                .iter()
                .map(|s| AcquisitionScore {
                    index: s.index,
                    score: -s.score,
                })
                .collect();
            let picks = select_min_b(&negated, budget)?;
            with_scores(scores, picks)
        }
        Strategy::Random => select_random(pool, budget, rng)?
            .into_iter()
            .map(|index| Selection { index, score: None })
            .collect(),
        Strategy::KCenter => {
            if budget > pool.unlabeled().len() {
                return Err(Error::invalid("budget exceeds the unlabeled pool"));
            }
            let all: Vec<usize> = (0..dataset.len()).collect();
            kcenter_greedy(&dataset.features(&all), pool.labeled(), budget)?
                .into_iter()
                .map(|index| Selection { index, score: None })
                .collect()
        }
    })
}

/// Initial labeled pool of size `m`, with raw pixels as features for the
/// clustering strategies.
pub fn initial_pool(strategy: InitStrategy, dataset: &Dataset, m: usize, rng: &mut Rng) -> Result<PoolState> {
    let n = dataset.len();
    match strategy {
        InitStrategy::Random => PoolState::init(n, m, rng),
        InitStrategy::KCenter | InitStrategy::KMeans => {
            if m == 0 || m > n {
                return Err(Error::invalid(format!("initial pool of {m} from {n} examples")));
            }
            let feats = dataset.features(&(0..n).collect::<Vec<_>>());
            let picks = if strategy == InitStrategy::KCenter {
                kcenter_greedy(&feats, &[], m)?
            } else {
                kmeans_init(&feats, m, rng)?
            };
            PoolState::from_labeled(n, picks)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub strategy: Strategy,
    pub seed: u64,
    pub round: usize,
    pub labeled_count: usize,
    pub accuracy: f64,
    /// Mean total loss over the final epoch of each phase.
    pub target_loss: f64,
    pub vae_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub disc_accuracy: Option<f64>,
    /// Examples chosen at the end of this round; empty in the final round.
    pub selected: Vec<Selection>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.seed,
            self.round,
            self.labeled_count,
            self.accuracy,
            self.target_loss,
            opt(self.vae_loss),
            opt(self.disc_loss),
            opt(self.disc_accuracy)
        )
    }
}

fn last_epoch_mean<R>(rows: &[R], epoch: impl Fn(&R) -> usize, value: impl Fn(&R) -> f64) -> f64 {
    let Some(last) = rows.last().map(&epoch) else {
        return f64::NAN;
    };
    let vals: Vec<f64> = rows.iter().filter(|r| epoch(r) == last).map(value).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Per-strategy, per-seed output directory.
pub fn seed_dir(run_dir: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    run_dir.join(strategy.name()).join(format!("seed_{seed}"))
}

pub fn round_checkpoint_dir(run_dir: &Path, strategy: Strategy, seed: u64, round: usize) -> PathBuf {
    seed_dir(run_dir, strategy, seed)
        .join("checkpoints")
        .join(format!("round_{round}"))
}

/// Parameters and pool saved at the end of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundCheckpoint {
    pub target: ParamSet,
    pub adversarial: Option<(VaeParams, ParamSet)>,
    pub labeled: Vec<usize>,
}

impl RoundCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.target.save(&dir.join("target.ckpt"))?;
        if let Some((vae, disc)) = &self.adversarial {
            vae.encoder.save(&dir.join("encoder.ckpt"))?;
            vae.generator.save(&dir.join("generator.ckpt"))?;
            vae.classifier.save(&dir.join("classifier.ckpt"))?;
            disc.save(&dir.join("discriminator.ckpt"))?;
        }
        let text: String = self.labeled.iter().map(|i| format!("{i}\n")).collect();
        fs::write(dir.join("labeled.txt"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path, arch: &Architecture) -> Result<Self> {
        let target = ParamSet::load(arch.target.layout().clone(), &dir.join("target.ckpt"))?;
        let adversarial = if dir.join("encoder.ckpt").exists() {
            let vae = VaeParams {
                encoder: ParamSet::load(arch.encoder.layout().clone(), &dir.join("encoder.ckpt"))?,
                generator: ParamSet::load(arch.generator.layout().clone(), &dir.join("generator.ckpt"))?,
                classifier: ParamSet::load(arch.classifier.layout().clone(), &dir.join("classifier.ckpt"))?,
            };
            let disc = ParamSet::load(arch.discriminator.layout().clone(), &dir.join("discriminator.ckpt"))?;
            Some((vae, disc))
        } else {
            None
        };
        let labeled = fs::read_to_string(dir.join("labeled.txt"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad index {l:?} in labeled.txt")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(RoundCheckpoint {
            target,
            adversarial,
            labeled,
        })
    }
}

struct CsvFile(BufWriter<File>);

impl CsvFile {
    fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        Ok(CsvFile(w))
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.0, "{line}")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

fn write_rows<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    let mut f = CsvFile::create(path, R::header())?;
    for r in rows {
        f.line(&r.to_csv())?;
    }
    f.flush()
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub records: Vec<RoundRecord>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs every strategy for every seed and writes the run directory:
/// `config.snapshot`, `rounds.csv`, `selections.csv`, `plot_data.csv`, and per
/// strategy and seed the loss logs and per-round checkpoints. Rows already
/// written survive an aborted run.
pub fn run_experiment(spec: &ExperimentSpec, run_dir: &Path) -> Result<RunSummary> {
    spec.validate()?;
    let splits = prepare_data(spec)?;
    spec.validate_for(splits.train.len())?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.snapshot"), spec.to_toml())?;
    let arch = Architecture::new(splits.train.shape(), splits.train.num_classes(), &spec.al)?;
    let mut rounds_csv = CsvFile::create(&run_dir.join("rounds.csv"), ROUNDS_HEADER)?;
    let mut selections_csv = CsvFile::create(&run_dir.join("selections.csv"), SELECTIONS_HEADER)?;
    let mut records = Vec::new();
    for &seed in &spec.seeds {
        let pool0 = initial_pool(
            spec.init_strategy,
            &splits.train,
            spec.al.initial_pool,
            &mut Rng::stream(seed, &["initial_pool"]),
        )?;
        // Round 0 sees the same pool and streams under every strategy.
        let mut first: Option<(ParamSet, TrainReport<TargetRow>, f64)> = None;
        for &strategy in &spec.strategies {
            let run = SeedRun {
                spec,
                splits: &splits,
                arch: &arch,
                run_dir,
                strategy,
                seed,
            };
            let result = run.execute(pool0.clone(), &mut first, &mut |rec: &RoundRecord| {
                rounds_csv.line(&rec.csv_row())?;
                for s in &rec.selected {
                    selections_csv.line(&format!(
                        "{},{},{},{},{}",
                        s.index,
                        opt(s.score),
                        rec.strategy,
                        rec.round,
                        rec.seed
                    ))?;
                }
                rounds_csv.flush()?;
                selections_csv.flush()
            });
            match result {
                Ok(recs) => records.extend(recs),
                Err(e) => {
                    rounds_csv.flush()?;
                    selections_csv.flush()?;
                    return Err(e);
                }
            }
        }
    }
    let aggregate = aggregate(&records)?;
    emit_plot_data(&aggregate, &run_dir.join("plot_data.csv"))?;
    Ok(RunSummary { records, aggregate })
}

struct SeedRun<'a> {
    spec: &'a ExperimentSpec,
    splits: &'a Splits,
    arch: &'a Architecture,
    run_dir: &'a Path,
    strategy: Strategy,
    seed: u64,
}

impl SeedRun<'_> {
    fn execute(
        &self,
        mut pool: PoolState,
        first: &mut Option<(ParamSet, TrainReport<TargetRow>, f64)>,
        emit: &mut dyn FnMut(&RoundRecord) -> Result<()>,
    ) -> Result<Vec<RoundRecord>> {
        let (cfg, seed, strategy) = (&self.spec.al, self.seed, self.strategy);
        let train = &self.splits.train;
        let holdout: Vec<usize> = (0..self.splits.holdout.len()).collect();
        let dir = seed_dir(self.run_dir, strategy, seed);
        let mut previous: Option<(VaeParams, ParamSet)> = None;
        let mut out = Vec::new();
        for round in 0..=cfg.rounds {
            let ctx = TrainContext {
                dataset: train,
                pool: &pool,
                arch: self.arch,
                cfg,
            };
            let cached = if round == 0 { first.clone() } else { None };
            let (target, report, accuracy) = match cached {
                Some(c) => c,
                None => {
                    let mut streams = TrainStreams::new(seed, &format!("round{round}/target"));
                    let (t, r) = train_target(ctx, &mut streams, &mut |_| Ok(()))?;
                    let acc = evaluate_accuracy(self.arch, &t, &self.splits.holdout, &holdout)?;
                    if round == 0 {
                        *first = Some((t.clone(), r.clone(), acc));
                    }
                    (t, r, acc)
                }
            };
            write_rows(&dir.join(format!("losses_target_round{round}.csv")), &report.rows)?;
            info!(
                "{strategy} seed {seed} round {round}: {} labeled, accuracy {accuracy:.4}, target {:.1}s",
                pool.labeled().len(),
                report.wall_time.as_secs_f64()
            );
            let mut record = RoundRecord {
                strategy,
                seed,
                round,
                labeled_count: pool.labeled().len(),
                accuracy,
                target_loss: last_epoch_mean(&report.rows, |r| r.epoch, |r| r.total),
                vae_loss: None,
                disc_loss: None,
                disc_accuracy: None,
                selected: Vec::new(),
            };
            if round == cfg.rounds {
                RoundCheckpoint {
                    target,
                    adversarial: None,
                    labeled: pool.labeled().to_vec(),
                }
                .save(&round_checkpoint_dir(self.run_dir, strategy, seed, round))?;
                emit(&record)?;
                out.push(record);
                break;
            }
            let adversarial = if strategy == Strategy::Adroit {
                let mut streams = TrainStreams::new(seed, &format!("{strategy}/round{round}/adroit"));
                let (vae, disc, rep) = match previous.take().filter(|_| self.spec.warm_start) {
                    Some((v, d)) => train_adroit_from(ctx, v, d, &target, &mut streams, &mut |_| Ok(()))?,
                    None => train_adroit(ctx, &target, &mut streams, &mut |_| Ok(()))?,
                };
                write_rows::<LossRow>(&dir.join(format!("losses_adroit_round{round}.csv")), &rep.rows)?;
                record.vae_loss = Some(last_epoch_mean(&rep.rows, |r| r.epoch, |r| r.losses.total));
                record.disc_loss = Some(last_epoch_mean(&rep.rows, |r| r.epoch, |r| r.losses.disc));
                record.disc_accuracy = Some(discriminator_accuracy(self.arch, &vae, &disc, train, &pool)?);
                info!(
                    "{strategy} seed {seed} round {round}: discriminator accuracy {:.4}, adversarial {:.1}s",
                    record.disc_accuracy.unwrap_or(f64::NAN),
                    rep.wall_time.as_secs_f64()
                );
                Some((vae, disc))
            } else {
                None
            };
            let models = Models {
                target: &target,
                adversarial: adversarial.as_ref().map(|(v, d)| (v, d)),
            };
            let mut rng = Rng::stream(seed, &[strategy.name(), &format!("round{round}"), "select"]);
            let selected = acquire(strategy, train, &pool, self.arch, models, cfg.budget, &mut rng)?;
            let picks: Vec<usize> = selected.iter().map(|s| s.index).collect();
            RoundCheckpoint {
                target,
                adversarial: adversarial.clone(),
                labeled: pool.labeled().to_vec(),
            }
            .save(&round_checkpoint_dir(self.run_dir, strategy, seed, round))?;
            pool = pool.annotate(&picks)?;
            record.selected = selected;
            emit(&record)?;
            out.push(record);
            previous = adversarial;
        }
        Ok(out)
    }
}

/// Data, architecture and saved state of one round of a finished or partial run.
pub struct RoundState {
    pub splits: Splits,
    pub arch: Architecture,
    pub checkpoint: RoundCheckpoint,
}

impl RoundState {
    pub fn load(spec: &ExperimentSpec, run_dir: &Path, strategy: Strategy, seed: u64, round: usize) -> Result<Self> {
        let splits = prepare_data(spec)?;
        let arch = Architecture::new(splits.train.shape(), splits.train.num_classes(), &spec.al)?;
        let checkpoint = RoundCheckpoint::load(&round_checkpoint_dir(run_dir, strategy, seed, round), &arch)?;
        Ok(RoundState {
            splits,
            arch,
            checkpoint,
        })
    }

    /// Repeats the acquisition step of the round with the run's own stream.
    pub fn select(&self, strategy: Strategy, seed: u64, round: usize, budget: usize) -> Result<Vec<Selection>> {
        let pool = PoolState::from_labeled(self.splits.train.len(), self.checkpoint.labeled.clone())?;
        let models = Models {
            target: &self.checkpoint.target,
            adversarial: self.checkpoint.adversarial.as_ref().map(|(v, d)| (v, d)),
        };
        let mut rng = Rng::stream(seed, &[strategy.name(), &format!("round{round}"), "select"]);
        acquire(strategy, &self.splits.train, &pool, &self.arch, models, budget, &mut rng)
    }

    /// Holdout accuracy of the saved target.
    pub fn accuracy(&self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.splits.holdout.len()).collect();
        evaluate_accuracy(&self.arch, &self.checkpoint.target, &self.splits.holdout, &idx)
    }
}

/// Mean and sample standard deviation of accuracy for one strategy and round.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub round: usize,
    pub labeled_count: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seeds: usize,
}

/// Sample mean and `n - 1` standard deviation; zero deviation for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per strategy and round, across seeds. Every seed must have the same rounds.
pub fn aggregate(records: &[RoundRecord]) -> Result<Vec<AggregateRow>> {
    let mut strategies: Vec<Strategy> = records.iter().map(|r| r.strategy).collect();
    strategies.sort();
    strategies.dedup();
    let mut out = Vec::new();
    for s in strategies {
        let mine: Vec<&RoundRecord> = records.iter().filter(|r| r.strategy == s).collect();
        let mut seeds: Vec<u64> = mine.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let rounds_of = |seed: u64| {
            let mut r: Vec<usize> = mine.iter().filter(|r| r.seed == seed).map(|r| r.round).collect();
            r.sort_unstable();
            r
        };
        let rounds = rounds_of(seeds[0]);
        if seeds.iter().any(|&sd| rounds_of(sd) != rounds) {
            return Err(Error::invalid(format!("seeds of {s} cover different rounds")));
        }
        for &round in &rounds {
            let at: Vec<&&RoundRecord> = mine.iter().filter(|r| r.round == round).collect();
            let accs: Vec<f64> = at.iter().map(|r| r.accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            out.push(AggregateRow {
                strategy: s,
                round,
                labeled_count: at[0].labeled_count,
                mean_acc,
                std_acc,
                seeds: accs.len(),
            });
        }
    }
    Ok(out)
}

/// Plot data CSV with 17 significant digits per value.
pub fn plot_data_csv(rows: &[AggregateRow]) -> String {
    let mut s = format!("{PLOT_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.16e},{:.16e}\n",
            r.strategy, r.labeled_count, r.mean_acc, r.std_acc
        ));
    }
    s
}

pub fn emit_plot_data(rows: &[AggregateRow], path: &Path) -> Result<()> {
    fs::write(path, plot_data_csv(rows))?;
    Ok(())
}

/// `(strategy, labeled_count, mean, std)` rows of a plot data file.
pub fn parse_plot_data(text: &str) -> Result<Vec<(Strategy, usize, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(PLOT_HEADER) {
        return Err(Error::Format("plot data header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad plot data row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].parse()?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// Reads `rounds.csv` back into records (without selections).
pub fn parse_rounds(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(ROUNDS_HEADER) {
        return Err(Error::Format("rounds.csv header mismatch".into()));
    }
    let optf = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad rounds row {l:?}"));
            if f.len() != 9 {
                return Err(bad());
            }
            Ok(RoundRecord {
                strategy: f[0].parse()?,
                seed: f[1].parse().map_err(|_| bad())?,
                round: f[2].parse().map_err(|_| bad())?,
                labeled_count: f[3].parse().map_err(|_| bad())?,
                accuracy: f[4].parse().map_err(|_| bad())?,
                target_loss: f[5].parse().map_err(|_| bad())?,
                vae_loss: optf(f[6])?,
                disc_loss: optf(f[7])?,
                disc_accuracy: optf(f[8])?,
                selected: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
