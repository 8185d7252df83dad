//! Training loop, full-lattice evaluation and the ablation runner.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::TrainConfig;
use crate::criticality::{build_path, pooled_feature, DecrementPath, PathStrategy};
use crate::distill::{dmcd_loss, hmsd_loss, total_loss, HmsdMode, LossBreakdown};
use crate::error::{CcsdError, Result};
use crate::lattice::ModalityCombo;
use crate::metrics::{aurc_per_region, robustness_curve, write_reports, EvalAccumulator, EvalTable, RegionSpec};
use crate::optim::{Adam, CosineSchedule};
use crate::ssnet::{Carrier, ComboFeatureCache, ModalityFeatures, SsNet};
use crate::synth::{
    augment, batch_tensors, generate_indexed, make_split, read_case, read_manifest, splitmix64, MultiModalCase, MANIFEST_FILE,
};
use crate::tensor::Scalar;

pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_TABLE_FILE: &str = "eval_table.csv";

/// In-memory train/validation/test cases.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<MultiModalCase>,
    pub val: Vec<MultiModalCase>,
    pub test: Vec<MultiModalCase>,
}

impl Dataset {
    /// Generates the phantom dataset described by `cfg` and splits it.
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let phantom = cfg.phantom();
        phantom.validate()?;
        let split = make_split(&phantom, cfg.split)?;
        let load = |ids: &[usize]| ids.iter().map(|&i| generate_indexed(&phantom, i)).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: load(&split.train)?,
            val: load(&split.val)?,
            test: load(&split.test)?,
        })
    }

    /// Reads a directory written by [`crate::synth::write_dataset`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mut ds = Self {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for entry in read_manifest(&dir.join(MANIFEST_FILE))? {
            let case = read_case(&dir.join(&entry.path))?;
            match entry.split.as_str() {
                "train" => ds.train.push(case),
                "val" => ds.val.push(case),
                "test" => ds.test.push(case),
                other => {
                    return Err(CcsdError::Format {
                        path: dir.join(MANIFEST_FILE),
                        reason: format!("unknown split {other:?} for {}", entry.case_id),
                    })
                }
            }
        }
        Ok(ds)
    }
}

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub seg: f64,
    pub hmsd: f64,
    pub dmcd: f64,
    pub total: f64,
    /// Sampled HMSD level, 0 when HMSD is off.
    pub k: usize,
    /// Decrement path, `-` when DMCD is off.
    pub path: String,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,seg,hmsd,dmcd,total,k,path";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.seg, self.hmsd, self.dmcd, self.total, self.k, self.path
        )
    }
}

/// Epoch means of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub hmsd: f64,
    pub dmcd: f64,
    pub total: f64,
    pub val_mean_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCurve {
    pub region: String,
    pub points: Vec<(usize, f64)>,
    pub aurc: f64,
}

/// Everything a run produced, serialized as `run_record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// `completed`, or `aborted: <reason>`.
    pub status: String,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mean_dice: Option<f64>,
    pub test_table: Option<EvalTable>,
    pub curves: Vec<RegionCurve>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CcsdError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn mean_test_dice(&self) -> Option<f64> {
        self.test_table.as_ref().map(EvalTable::mean_dice)
    }

    /// Mean of the per-region AURC values.
    pub fn mean_aurc(&self) -> Option<f64> {
        (!self.curves.is_empty()).then(|| self.curves.iter().map(|c| c.aurc).sum::<f64>() / self.curves.len() as f64)
    }
}

/// Result of [`train`]: the record, the per-step log and the selected network.
#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub log: Vec<StepLog>,
    pub net: SsNet<T>,
}

fn carrier_of(feats: &ModalityFeatures, carrier: Carrier) -> &[Var] {
    match carrier {
        Carrier::Shared => &feats.shared,
        Carrier::Specific => &feats.specific,
        Carrier::Fused => &feats.fused,
    }
}

fn carrier_repr<T: Scalar>(
    net: &SsNet<T>,
    g: &mut Graph<T>,
    cache: &ComboFeatureCache,
    feats: &ModalityFeatures,
    carrier: Carrier,
    combo: ModalityCombo,
) -> Result<Var> {
    match carrier {
        Carrier::Fused => cache
            .get(combo)
            .ok_or_else(|| CcsdError::invalid(format!("combination {combo} missing from cache"))),
        _ => net.assemble_carrier(g, combo, feats, carrier),
    }
}

/// Builds the loss graph of one batch and returns the total-loss handle and its log entry.
pub fn step_graph<T: Scalar, R: Rng>(
    net: &SsNet<T>,
    g: &mut Graph<T>,
    inputs: &[Var],
    labels: &[u8],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, StepLog)> {
    let n = net.config().n_modalities;
    let d = &cfg.distill;
    let full = ModalityCombo::full(n)?;
    let (feats, cache) = net.forward_all_combos(g, inputs)?;
    let full_z = cache.get(full).expect("cache holds the full combination");
    let full_logits = net.decode(g, full_z)?;
    let seg = g.seg_loss(full_logits, labels)?;
    let mut terms = vec![(seg, T::one())];

    let mut k = 0;
    let mut hmsd = None;
    if d.hmsd_weight > 0.0 && n >= 2 {
        k = rng.random_range(1..n);
        let var = hmsd_loss(g, n, k, d.hmsd_temperature(), |g, combo| match d.hmsd_mode {
            HmsdMode::DecoderOutput if combo == full => Ok(full_logits),
            HmsdMode::DecoderOutput => {
                let z = cache.get(combo).expect("cache holds every combination");
                net.decode(g, z)
            }
            HmsdMode::Feature => carrier_repr(net, g, &cache, &feats, d.carrier, combo),
        })?;
        terms.push((var, T::of(d.hmsd_weight)));
        hmsd = Some(var);
    }

    let mut path = String::from("-");
    let mut dmcd = None;
    if d.dmcd_weight > 0.0 {
        let pooled = carrier_of(&feats, d.carrier)
            .iter()
            .map(|&v| pooled_feature(g.value(v)))
            .collect::<Result<Vec<_>>>()?;
        let p: DecrementPath = build_path(full, &pooled, cfg.path_strategy, rng)?;
        path = p.to_string();
        let var = dmcd_loss(g, &p, d.temperature, |g, combo| {
            carrier_repr(net, g, &cache, &feats, d.carrier, combo)
        })?;
        terms.push((var, T::of(d.dmcd_weight)));
        dmcd = Some(var);
    }

    let value = |v: Option<Var>, g: &Graph<T>| v.map_or(0.0, |v| g.value(v).item().f64());
    let breakdown: LossBreakdown = total_loss(
        g.value(seg).item().f64(),
        value(hmsd, g),
        value(dmcd, g),
        d,
    )?;
    let total = g.weighted_sum(&terms);
    Ok((
        total,
        StepLog {
            step: 0,
            seg: breakdown.seg,
            hmsd: breakdown.hmsd,
            dmcd: breakdown.dmcd,
            total: breakdown.total,
            k,
            path,
        },
    ))
}

/// Dice table over every combination for `cases`, batched by `batch`.
pub fn evaluate<T: Scalar>(net: &SsNet<T>, cases: &[MultiModalCase], batch: usize) -> Result<EvalTable> {
    let n = net.config().n_modalities;
    let mut acc = EvalAccumulator::new(n, RegionSpec::nested())?;
    let refs: Vec<&MultiModalCase> = cases.iter().collect();
    for chunk in refs.chunks(batch.max(1)) {
        let (inputs, labels) = batch_tensors::<T>(chunk)?;
        let outs = net.infer_all_combos(&inputs)?;
        let per_combo: Vec<(ModalityCombo, Vec<u8>)> = outs.iter().map(|(c, o)| (*c, o.labels())).collect();
        let vox = chunk[0].voxels();
        for (i, _) in chunk.iter().enumerate() {
            let preds: Vec<(ModalityCombo, Vec<u8>)> = per_combo
                .iter()
                .map(|(c, l)| (*c, l[i * vox..(i + 1) * vox].to_vec()))
                .collect();
            acc.add_case(&preds, &labels[i * vox..(i + 1) * vox])?;
        }
    }
    acc.finish()
}

fn curves(table: &EvalTable) -> Result<Vec<RegionCurve>> {
    let aurcs = aurc_per_region(table)?;
    table
        .regions
        .iter()
        .enumerate()
        .map(|(i, name)| {
            Ok(RegionCurve {
                region: name.clone(),
                points: robustness_curve(table, i)?.points().to_vec(),
                aurc: aurcs[i].1,
            })
        })
        .collect()
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| CcsdError::io(path, e))
}

fn flush(out: Option<&Path>, record: &RunRecord, log: &[StepLog]) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    let mut csv = String::from(StepLog::CSV_HEADER);
    csv.push('\n');
    for s in log {
        csv.push_str(&s.csv_line());
        csv.push('\n');
    }
    write_file(&dir.join(TRAIN_LOG_FILE), &csv)?;
    write_file(&dir.join(RUN_RECORD_FILE), &record.to_json()?)
}

/// Trains on `data.train`, selects the epoch with the best validation mean
/// Dice over all combinations and evaluates it on `data.test`. With `out`,
/// writes the record, step log, checkpoint and report CSVs there.
pub fn train<T: Scalar>(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(CcsdError::invalid("training needs non-empty train and validation sets"));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CcsdError::io(dir, e))?;
        write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    }
    let started = Instant::now();
    let mut net = SsNet::<T>::new(cfg.net.clone(), cfg.seed)?;
    let mut opt = Adam::new(net.params());
    let schedule = CosineSchedule::new(cfg.lr, cfg.lr_min, cfg.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7EA1_u64));
    let mut record = RunRecord {
        config: cfg.clone(),
        status: "running".into(),
        steps: 0,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_mean_dice: None,
        test_table: None,
        curves: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, SsNet<T>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let cases: Vec<MultiModalCase> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let s = splitmix64(cfg.seed ^ splitmix64(((epoch as u64) << 32) | i as u64));
                        augment(&data.train[i], s)
                    } else {
                        Ok(data.train[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&MultiModalCase> = cases.iter().collect();
            let (inputs, labels) = batch_tensors::<T>(&refs)?;
            let mut g = Graph::new(net.params());
            let vars: Vec<Var> = inputs.into_iter().map(|t| g.input(t)).collect();
            let step = step_graph(&net, &mut g, &vars, &labels, cfg, &mut rng);
            let (total, mut entry) = match step {
                Ok(s) => s,
                Err(e) => {
                    record.status = format!("aborted: {e} (epoch {epoch}, batch {bi})");
                    record.wall_clock_secs = started.elapsed().as_secs_f64();
                    flush(out, &record, &log)?;
                    return Err(e);
                }
            };
            let grads = g.backward(total);
            drop(g);
            opt.update(net.params_mut(), &grads, lr)?;
            record.steps += 1;
            entry.step = record.steps;
            for (s, v) in sums.iter_mut().zip([entry.seg, entry.hmsd, entry.dmcd, entry.total]) {
                *s += v;
            }
            count += 1;
            log.push(entry);
        }
        let c = count.max(1) as f64;
        let validate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val_mean_dice = if validate {
            let v = evaluate(&net, &data.val, cfg.batch_size)?.mean_dice();
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, net.clone()));
                record.best_epoch = Some(epoch);
                record.best_val_mean_dice = Some(v);
            }
            Some(v)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            lr,
            seg: sums[0] / c,
            hmsd: sums[1] / c,
            dmcd: sums[2] / c,
            total: sums[3] / c,
            val_mean_dice,
        };
        log::info!(
            "epoch {epoch}: seg {:.4} hmsd {:.4} dmcd {:.4} total {:.4} val {:?} ({:.0}s)",
            rec.seg,
            rec.hmsd,
            rec.dmcd,
            rec.total,
            val_mean_dice,
            started.elapsed().as_secs_f64()
        );
        record.epochs.push(rec);
    }

    let (best_dice, best_net) = best.expect("last epoch is always validated");
    if !data.test.is_empty() {
        let table = evaluate(&best_net, &data.test, cfg.batch_size)?;
        record.curves = curves(&table)?;
        record.test_table = Some(table);
    }
    record.status = "completed".into();
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        let meta = CheckpointMeta {
            net: cfg.net.clone(),
            seed: cfg.seed,
            steps: record.steps,
            epoch: record.best_epoch.unwrap_or(0),
            dtype: T::DTYPE,
            val_mean_dice: best_dice,
        };
        checkpoint::save(&best_net, &meta, &dir.join(CHECKPOINT_FILE))?;
        if let Some(table) = &record.test_table {
            write_reports(table, dir, false)?;
        }
    }
    flush(out, &record, &log)?;
    Ok(TrainOutcome {
        record,
        log,
        net: best_net,
    })
}

/// Which family of settings an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    K1k2,
    Carrier,
    PathStrategy,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::K1k2 => "k1k2",
            AblationAxis::Carrier => "carrier",
            AblationAxis::PathStrategy => "path_strategy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [AblationAxis::K1k2, AblationAxis::Carrier, AblationAxis::PathStrategy]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                CcsdError::invalid(format!("unknown ablation axis {s:?} (expected k1k2, carrier or path_strategy)"))
            })
    }
}

/// Named configurations of one ablation axis, derived from `base`.
pub fn ablation_settings(base: &TrainConfig, axis: AblationAxis) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::K1k2 => [("both", 1.0, 1.0), ("only_k1", 1.0, 0.0), ("only_k2", 0.0, 1.0), ("neither", 0.0, 0.0)]
            .into_iter()
            .map(|(name, l1, l2)| {
                (
                    name.to_string(),
                    with(&|c| {
                        c.distill.hmsd_weight = l1;
                        c.distill.dmcd_weight = l2;
                    }),
                )
            })
            .collect(),
        AblationAxis::Carrier => {
            let mut out = Vec::new();
            for carrier in Carrier::ALL {
                for (scheme, l1, l2) in [("hmsd", 1.0, 0.0), ("dmcd", 0.0, 1.0), ("both", 1.0, 1.0)] {
                    out.push((
                        format!("{}/{scheme}", carrier.name()),
                        with(&|c| {
                            c.distill.carrier = carrier;
                            // carriers only reach HMSD through its feature mode
                            c.distill.hmsd_mode = HmsdMode::Feature;
                            c.distill.hmsd_weight = l1;
                            c.distill.dmcd_weight = l2;
                        }),
                    ));
                }
            }
            out
        }
        AblationAxis::PathStrategy => PathStrategy::ALL
            .into_iter()
            .map(|s| (s.name().to_string(), with(&|c| c.path_strategy = s)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub setting: String,
    pub seed: u64,
    pub mean_dice: f64,
    pub mean_aurc: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: String,
    pub runs: usize,
    pub mean_dice: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub mean_dice_std: f64,
    pub mean_aurc: f64,
    pub mean_aurc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<SettingSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

/// Groups runs by setting, keeping the order of first appearance.
pub fn summarize(runs: &[AblationRun]) -> Vec<SettingSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.setting.as_str()) {
            names.push(&r.setting);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let sel: Vec<&AblationRun> = runs.iter().filter(|r| r.setting == name).collect();
            let (md, mds) = mean_std(&sel.iter().map(|r| r.mean_dice).collect::<Vec<_>>());
            let (ma, mas) = mean_std(&sel.iter().map(|r| r.mean_aurc).collect::<Vec<_>>());
            SettingSummary {
                setting: name.to_string(),
                runs: sel.len(),
                mean_dice: md,
                mean_dice_std: mds,
                mean_aurc: ma,
                mean_aurc_std: mas,
            }
        })
        .collect()
}

impl AblationReport {
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("setting,seed,mean_dice,mean_aurc\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{},{}", r.setting, r.seed, r.mean_dice, r.mean_aurc);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("setting,runs,mean_dice,mean_dice_std,mean_aurc,mean_aurc_std\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.setting, r.runs, r.mean_dice, r.mean_dice_std, r.mean_aurc, r.mean_aurc_std
            );
        }
        s
    }
}

/// Runs every setting of `axis` for every seed. Each run gets its own
/// subdirectory `<setting>/seed<k>` under `out` when given.
pub fn ablate<T: Scalar>(
    base: &TrainConfig,
    axis: AblationAxis,
    seeds: &[u64],
    data: &Dataset,
    out: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(CcsdError::invalid("ablation needs at least one seed"));
    }
    let mut runs = Vec::new();
    for (name, cfg) in ablation_settings(base, axis) {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let dir = out.map(|d| d.join(name.replace('/', "_")).join(format!("seed{seed}")));
            log::info!("ablation {}: {name} seed {seed}", axis.name());
            let o = train::<T>(&c, data, dir.as_deref())?;
            runs.push(AblationRun {
                setting: name.clone(),
                seed,
                mean_dice: o.record.mean_test_dice().unwrap_or(f64::NAN),
                mean_aurc: o.record.mean_aurc().unwrap_or(f64::NAN),
                wall_clock_secs: o.record.wall_clock_secs,
            });
        }
    }
    let report = AblationReport {
        axis,
        seeds: seeds.to_vec(),
        summary: summarize(&runs),
        runs,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CcsdError::io(dir, e))?;
        write_file(&dir.join("ablation_runs.csv"), &report.runs_csv())?;
        write_file(&dir.join("ablation_summary.csv"), &report.summary_csv())?;
        write_file(&dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
