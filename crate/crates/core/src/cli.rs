//! `prognosis` command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Family, RunConfig};
use crate::data::{generate_synthetic, Manifest, SplitName};
use crate::drc::{self, DrcModel, TIME_GRID};
use crate::ensemble::{
    ensemble_predict, imputation_means, run_model_selection, select_lambda, write_selection_report, EnsembleWeights,
    Hyperparameters, ModelFamily, SelectionInput, WindowLabels, WindowScores, WINDOWS,
};
use crate::error::{Error, Result};
use crate::gbm::{featurize, load_clinical_csv, ClinicalTable, GbmModel, LogRegModel};
use crate::gmic::GmicModel;
use crate::imaging::{preprocess, read_pgm, write_pgm, AugmentPolicy, NormalizeConfig};
use crate::metrics::{
    bootstrap_ci, pr_auc, pr_points, reliability_table, roc_auc, roc_curve, write_pr_csv, write_reliability_csv,
    write_roc_csv,
};
use crate::pipeline::{
    curve_window_scores, drc_curves, evaluate_curves, gmic_scores, holdout, tabular_rows, train_drc, train_gmic,
    ExamRecord, ExamSet, GbmWindows, LogRegWindows, WINDOW_GRID_INDEX,
};
use crate::tensor::{read_checkpoint, write_checkpoint};

/// Build version, `git describe` style when available.
pub const VERSION: &str = env!("PROGNOSIS_VERSION");

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOGREG_FILE: &str = "logreg.json";

#[derive(Parser, Debug)]
#[command(name = "prognosis", version = VERSION, about = "Deterioration prognosis from chest images and clinical variables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth(Common),
    /// Train one model family on the training split.
    Train {
        family: FamilyArg,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Random hyperparameter search with Monte Carlo cross-validation.
    Select {
        family: FamilyArg,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Test-split metrics, curves and bootstrap intervals.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Tabular model directory to ensemble with an image classifier.
        #[arg(long)]
        tabular: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Risks, saliency maps and regions of interest for one image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Risk-curve model added to a classifier's output.
        #[arg(long)]
        drc: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Markdown summary of a run directory's report.
    ExportReport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Gmic,
    Drc,
    Gbm,
    Logreg,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Gmic => Family::Gmic,
            FamilyArg::Drc => Family::Drc,
            FamilyArg::Gbm => Family::Gbm,
            FamilyArg::Logreg => Family::LogReg,
        }
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub metrics: Value,
}

impl Common {
    fn resolve(&self, base: RunConfig, family: Option<Family>) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut merged = base;
                for (k, v) in RunConfig::load(path)?.explicit() {
                    merged.set(k, v)?;
                }
                merged
            }
            None => base,
        };
        for pair in &self.overrides {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(f) = family {
            cfg.set("model", f.name())?;
        }
        let out = self.out_dir.clone().unwrap_or_else(|| PathBuf::from(cfg.out_dir()));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok((cfg, out))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => synth(&common),
        Command::Train { family, data, common } => train(family.into(), &data, &common),
        Command::Select { family, data, common } => select(family.into(), &data, &common),
        Command::Eval {
            data,
            model,
            tabular,
            common,
        } => eval(&data, &model, tabular.as_deref(), &common),
        Command::Predict {
            model,
            image,
            drc,
            common,
        } => predict(&model, &image, drc.as_deref(), &common),
        Command::ExportReport { run, out } => export_report(&run, out.as_deref()),
    }
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, command: &str, cfg: &RunConfig, metrics: Value) -> Result<()> {
    let report = Report {
        command: command.to_string(),
        version: VERSION.to_string(),
        seed: cfg.seed(),
        config: cfg.resolved(),
        metrics,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format("report", e.to_string()))?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn synth(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve(RunConfig::default(), None)?;
    let cohort = generate_synthetic(&cfg.synthetic_spec(), &out)?;
    let rows = &cohort.manifest.rows;
    let count = |split| rows.iter().filter(|r| r.split == split).count();
    let events = rows.iter().filter(|r| {
        r.event_time_h
            .is_some_and(|e| e > r.exam_time_h && e - r.exam_time_h <= 96.0)
    });
    let metrics = json!({
        "patients": cohort.clinical.len(),
        "exams": rows.len(),
        "train_exams": count(SplitName::Train),
        "test_exams": count(SplitName::Test),
        "events_within_96h": events.count(),
        "flagged_excluded": rows.iter().filter(|r| r.exclude).count(),
    });
    write_report(&out, "synth", &cfg, metrics)
}

struct Data {
    exams: ExamSet,
    clinical: ClinicalTable,
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Data> {
    let manifest = Manifest::load(dir.join("manifest.csv"))?;
    let clinical_path = dir.join("clinical.csv");
    let clinical = if clinical_path.exists() {
        load_clinical_csv(&clinical_path)?
    } else {
        ClinicalTable::new()
    };
    let side = cfg.gmic_config()?.input_side;
    Ok(Data {
        exams: ExamSet::load(&manifest, dir, side, &NormalizeConfig::default())?,
        clinical,
    })
}

/// A trained model of any family.
enum Trained {
    Gmic(GmicModel),
    Drc(DrcModel),
    Gbm(GbmWindows),
    LogReg(LogRegWindows),
}

impl Trained {
    fn scores(
        &self,
        records: &[&ExamRecord],
        clinical: &ClinicalTable,
        tta: Option<(&AugmentPolicy, usize)>,
    ) -> Result<Vec<WindowScores>> {
        match self {
            Trained::Gmic(m) => gmic_scores(m, records, tta),
            Trained::Drc(m) => Ok(drc_curves(m, records, tta)?.iter().map(curve_window_scores).collect()),
            Trained::Gbm(m) => m.predict(records, clinical),
            Trained::LogReg(m) => m.predict(records, clinical),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Trained::Gmic(m) => write_checkpoint(dir.join(CHECKPOINT_FILE), &m.params),
            Trained::Drc(m) => write_checkpoint(dir.join(CHECKPOINT_FILE), &m.params),
            Trained::Gbm(m) => {
                for (w, model) in WINDOWS.iter().zip(&m.models) {
                    let path = dir.join(format!("gbm_{w}h.txt"));
                    fs::write(&path, model.to_text()).map_err(|e| Error::io(&path, e))?;
                }
                Ok(())
            }
            Trained::LogReg(m) => {
                let text =
                    serde_json::to_string_pretty(&m.models).map_err(|e| Error::format("logreg", e.to_string()))?;
                let path = dir.join(LOGREG_FILE);
                fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
            }
        }
    }

    fn load(dir: &Path) -> Result<(RunConfig, Trained)> {
        let cfg = RunConfig::load(dir.join(CONFIG_FILE))?;
        let model = match cfg.family() {
            Family::Gmic => Trained::Gmic(GmicModel::new(
                cfg.gmic_config()?,
                read_checkpoint(dir.join(CHECKPOINT_FILE))?,
            )?),
            Family::Drc => Trained::Drc(DrcModel::new(
                cfg.gmic_config()?,
                read_checkpoint(dir.join(CHECKPOINT_FILE))?,
            )?),
            Family::Gbm => {
                let models = WINDOWS
                    .iter()
                    .map(|w| {
                        let path = dir.join(format!("gbm_{w}h.txt"));
                        GbmModel::from_text(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
                    })
                    .collect::<Result<_>>()?;
                Trained::Gbm(GbmWindows { models })
            }
            Family::LogReg => {
                let path = dir.join(LOGREG_FILE);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let models: Vec<LogRegModel> =
                    serde_json::from_str(&text).map_err(|e| Error::format("logreg", e.to_string()))?;
                Trained::LogReg(LogRegWindows { models })
            }
        };
        Ok((cfg, model))
    }
}

/// Trains `family` under `cfg` on `train`, using `validation` for epoch selection.
fn fit_family(
    cfg: &RunConfig,
    train: &[&ExamRecord],
    validation: &[&ExamRecord],
    clinical: &ClinicalTable,
) -> Result<(Trained, Value)> {
    Ok(match cfg.family() {
        Family::Gmic => {
            let (m, report) = train_gmic(&cfg.gmic_config()?, train, validation, &cfg.train_options()?)?;
            (Trained::Gmic(m), json!(report_json(&report)))
        }
        Family::Drc => {
            let (m, report) = train_drc(&cfg.gmic_config()?, train, validation, &cfg.train_options()?)?;
            (Trained::Drc(m), json!(report_json(&report)))
        }
        Family::Gbm => {
            let m = GbmWindows::fit(train, clinical, &cfg.gbm_params()?)?;
            let importance: Vec<Value> = m.models[3]
                .feature_importance()
                .into_iter()
                .take(10)
                .map(|(n, c)| json!([n, c]))
                .collect();
            (Trained::Gbm(m), json!({ "top_features_96h": importance }))
        }
        Family::LogReg => {
            let (l2, iterations) = cfg.logreg();
            (
                Trained::LogReg(LogRegWindows::fit(train, clinical, l2, iterations)?),
                json!({}),
            )
        }
    })
}

fn report_json(r: &crate::train::TrainReport) -> Value {
    json!({
        "epoch_losses": r.epoch_losses,
        "validation_scores": r.validation_scores,
        "best_epoch": r.best_epoch,
    })
}

fn labels_of(records: &[&ExamRecord]) -> Vec<WindowLabels> {
    records.iter().map(|r| r.labels.windows).collect()
}

fn window_summary(scores: &[WindowScores], labels: &[WindowLabels]) -> Value {
    let per: Vec<Value> = (0..4)
        .map(|t| {
            let s: Vec<f64> = scores.iter().map(|p| p[t]).collect();
            let y: Vec<bool> = labels.iter().map(|l| l[t]).collect();
            json!({
                "window_h": WINDOWS[t],
                "roc_auc": roc_auc(&s, &y).ok(),
                "pr_auc": pr_auc(&s, &y).ok(),
            })
        })
        .collect();
    json!(per)
}

fn split_train<'a>(cfg: &RunConfig, exams: &'a ExamSet) -> (Vec<&'a ExamRecord>, Vec<&'a ExamRecord>) {
    holdout(&exams.split(SplitName::Train), cfg.validation_fraction(), cfg.seed())
}

fn train(family: Family, data: &Path, common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve(RunConfig::default(), Some(family))?;
    let d = load_data(data, &cfg)?;
    let (fit_set, validation) = split_train(&cfg, &d.exams);
    log::info!(
        "training {family} on {} exams, {} held out",
        fit_set.len(),
        validation.len()
    );
    let (model, mut metrics) = fit_family(&cfg, &fit_set, &validation, &d.clinical)?;
    model.save(&out)?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    if !validation.is_empty() {
        let scores = model.scores(&validation, &d.clinical, None)?;
        metrics["validation"] = window_summary(&scores, &labels_of(&validation));
    }
    metrics["train_exams"] = json!(fit_set.len());
    metrics["validation_exams"] = json!(validation.len());
    metrics["excluded_exams"] = json!(d.exams.excluded);
    write_report(&out, &format!("train {family}"), &cfg, metrics)
}

/// Harness view of one family over a fixed exam list.
struct HarnessFamily<'a> {
    cfg: &'a RunConfig,
    records: Vec<&'a ExamRecord>,
    clinical: &'a ClinicalTable,
}

impl HarnessFamily<'_> {
    fn config_for(&self, hp: &Hyperparameters, seed: u64) -> Result<RunConfig> {
        let mut cfg = self.cfg.clone();
        for (name, value) in hp {
            let key = match (self.cfg.family(), name.as_str()) {
                (Family::Gbm, n) => format!("gbm_{n}"),
                (Family::LogReg, "l2") => "logreg_l2".to_string(),
                (_, n) => n.to_string(),
            };
            let is_int = matches!(key.as_str(), "gbm_num_trees" | "gbm_max_leaves");
            let text = if is_int {
                format!("{}", *value as u64)
            } else {
                value.to_string()
            };
            cfg.set(&key, &text)?;
        }
        cfg.set("seed", &seed.to_string())?;
        Ok(cfg)
    }

    fn pick(&self, idx: &[usize]) -> Vec<&ExamRecord> {
        idx.iter().map(|&i| self.records[i]).collect()
    }
}

impl ModelFamily for HarnessFamily<'_> {
    type Model = Trained;

    fn train(&self, hp: &Hyperparameters, train: &[usize], validation: &[usize], seed: u64) -> Result<Trained> {
        let cfg = self.config_for(hp, seed)?;
        Ok(fit_family(&cfg, &self.pick(train), &self.pick(validation), self.clinical)?.0)
    }

    fn predict(&self, model: &Trained, exams: &[usize]) -> Result<Vec<WindowScores>> {
        model.scores(&self.pick(exams), self.clinical, None)
    }
}

fn write_predictions(path: &Path, records: &[&ExamRecord], scores: &[WindowScores]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["exam_id", "patient_id", "p24h", "p48h", "p72h", "p96h"])
        .map_err(Error::csv)?;
    for (r, s) in records.iter().zip(scores) {
        let mut rec = vec![r.row.exam_id.clone(), r.row.patient_id.clone()];
        rec.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(Error::csv)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn select(family: Family, data: &Path, common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve(RunConfig::default(), Some(family))?;
    let d = load_data(data, &cfg)?;
    let records: Vec<&ExamRecord> = d.exams.records.iter().collect();
    let patient_ids: Vec<String> = records.iter().map(|r| r.row.patient_id.clone()).collect();
    let labels = labels_of(&records);
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| records[i].row.split == SplitName::Train);
    let harness = HarnessFamily {
        cfg: &cfg,
        records: records.clone(),
        clinical: &d.clinical,
    };
    let input = SelectionInput {
        patient_ids: &patient_ids,
        labels: &labels,
        train: &train_idx,
        test: &test_idx,
    };
    let result = run_model_selection(&harness, &cfg.search_space()?, &input, &cfg.selection_options())?;
    write_selection_report(create(&out.join("selection.jsonl"))?, &result, None)?;
    let test_records: Vec<&ExamRecord> = test_idx.iter().map(|&i| records[i]).collect();
    write_predictions(
        &out.join("test_predictions.csv"),
        &test_records,
        &result.test_predictions,
    )?;
    for (k, m) in result.members.iter().enumerate() {
        let dir = out.join("members").join(format!("m{k}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        m.save(&dir)?;
    }
    let metrics = json!({
        "configs": result.configs,
        "config_scores": result.config_scores,
        "top": result.top,
        "universe_patients": result.universe_patients.len(),
        "test_score": result.test_score,
        "test": window_summary(&result.test_predictions, &labels_of(&test_records)),
    });
    write_report(&out, &format!("select {family}"), &cfg, metrics)
}

fn with_overrides(cfg: RunConfig, common: &Common) -> Result<(RunConfig, PathBuf)> {
    let family = cfg.family();
    common.resolve(cfg, Some(family))
}

fn ci_metrics(scores: &[WindowScores], records: &[&ExamRecord], iterations: usize, seed: u64) -> Result<Value> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let next = ids.len();
        ids.entry(r.row.patient_id.as_str()).or_insert(next);
    }
    let groups: Vec<usize> = records.iter().map(|r| ids[r.row.patient_id.as_str()]).collect();
    let mut out = vec![];
    for t in 0..4 {
        let s: Vec<f64> = scores.iter().map(|p| p[t]).collect();
        let y: Vec<bool> = records.iter().map(|r| r.labels.windows[t]).collect();
        let metric = |f: fn(&[f64], &[bool]) -> Result<f64>| {
            bootstrap_ci(
                s.len(),
                |idx| {
                    let (a, b): (Vec<f64>, Vec<bool>) = idx.iter().map(|&i| (s[i], y[i])).unzip();
                    f(&a, &b)
                },
                iterations,
                seed,
                Some(&groups),
            )
        };
        out.push(json!({
            "window_h": WINDOWS[t],
            "roc_auc": metric(roc_auc).ok(),
            "pr_auc": metric(pr_auc).ok(),
        }));
    }
    Ok(json!(out))
}

fn write_curves(out: &Path, prefix: &str, scores: &[WindowScores], records: &[&ExamRecord]) -> Result<()> {
    for t in 0..4 {
        let s: Vec<f64> = scores.iter().map(|p| p[t]).collect();
        let y: Vec<bool> = records.iter().map(|r| r.labels.windows[t]).collect();
        if let (Ok(roc), Ok(pr)) = (roc_curve(&s, &y), pr_points(&s, &y)) {
            write_roc_csv(create(&out.join(format!("{prefix}roc_{}h.csv", WINDOWS[t])))?, &roc)?;
            write_pr_csv(create(&out.join(format!("{prefix}pr_{}h.csv", WINDOWS[t])))?, &pr)?;
        }
    }
    Ok(())
}

fn eval(data: &Path, model_dir: &Path, tabular: Option<&Path>, common: &Common) -> Result<()> {
    let (model_cfg, model) = Trained::load(model_dir)?;
    let (cfg, out) = with_overrides(model_cfg, common)?;
    let d = load_data(data, &cfg)?;
    let test = d.exams.split(SplitName::Test);
    let policy = AugmentPolicy::default().with_seed(cfg.seed());
    let tta = (cfg.tta() > 0).then_some((&policy, cfg.tta()));
    let scores = model.scores(&test, &d.clinical, tta)?;
    let iterations = cfg.bootstrap_iterations();
    let mut metrics = json!({
        "model": cfg.family().name(),
        "test_exams": test.len(),
        "test": ci_metrics(&scores, &test, iterations, cfg.seed())?,
    });
    write_predictions(&out.join("predictions.csv"), &test, &scores)?;
    write_curves(&out, "", &scores, &test)?;

    if let Trained::Drc(m) = &model {
        let curves = drc_curves(m, &test, tta)?;
        let named: Vec<(String, [f64; 8])> = test
            .iter()
            .map(|r| r.row.exam_id.clone())
            .zip(curves.iter().copied())
            .collect();
        drc::write_drc_csv(create(&out.join("drc_curves.csv"))?, &named)?;
        let survival: Vec<_> = test.iter().map(|r| r.labels.survival).collect();
        write_reliability_csv(
            create(&out.join("reliability.csv"))?,
            &reliability_table(&curves, &survival)?,
        )?;
        let per_time: Vec<Value> = WINDOW_GRID_INDEX
            .iter()
            .map(|&i| {
                let ev = evaluate_curves(&test, &curves, i).ok();
                json!({
                    "t_hours": TIME_GRID[i],
                    "concordance": ev.as_ref().map(|e| e.concordance),
                    "reliability_max_gap": ev.as_ref().map(|e| e.reliability.max_gap()),
                })
            })
            .collect();
        metrics["curves"] = json!(per_time);
    }

    if let Some(dir) = tabular {
        let (tab_cfg, tab) = Trained::load(dir)?;
        if !matches!(model, Trained::Gmic(_)) || tab_cfg.family().is_image() {
            return Err(Error::Config(
                "--tabular pairs a gmic model with a gbm or logreg model".into(),
            ));
        }
        let (_, validation) = split_train(&cfg, &d.exams);
        let val_img = model.scores(&validation, &d.clinical, tta)?;
        let val_tab = tab.scores(&validation, &d.clinical, None)?;
        let lambda = select_lambda(&val_img, &val_tab, &labels_of(&validation))?;
        let weights = EnsembleWeights::new(lambda, imputation_means(&val_tab)?)?;
        let tab_scores = tab.scores(&test, &d.clinical, None)?;
        let available = test.iter().map(|r| {
            let obs = d.clinical.get(&r.row.patient_id).map(Vec::as_slice).unwrap_or(&[]);
            !featurize(obs, r.row.exam_time_h).is_empty()
        });
        let combined: Vec<WindowScores> = scores
            .iter()
            .zip(&tab_scores)
            .zip(available)
            .map(|((g, b), ok)| ensemble_predict(g, ok.then_some(b), &weights))
            .collect();
        debug_assert_eq!(tabular_rows(&test, &d.clinical).len(), combined.len());
        write_predictions(&out.join("ensemble_predictions.csv"), &test, &combined)?;
        write_curves(&out, "ensemble_", &combined, &test)?;
        metrics["ensemble"] = json!({
            "lambda": lambda,
            "tabular_model": tab_cfg.family().name(),
            "tabular_test": ci_metrics(&tab_scores, &test, iterations, cfg.seed())?,
            "test": ci_metrics(&combined, &test, iterations, cfg.seed())?,
        });
    }
    write_report(&out, "eval", &cfg, metrics)
}

fn predict(model_dir: &Path, image: &Path, drc_dir: Option<&Path>, common: &Common) -> Result<()> {
    let (model_cfg, model) = Trained::load(model_dir)?;
    let (cfg, out) = with_overrides(model_cfg, common)?;
    let gcfg = cfg.gmic_config()?;
    let img = preprocess(&read_pgm(image)?, gcfg.input_side, &NormalizeConfig::default())?;
    let exam_id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (outputs, mut curve) = match &model {
        Trained::Gmic(m) => (m.forward(&img)?, None),
        Trained::Drc(m) => {
            let o = m.forward(&img)?;
            (o.gmic, Some(o.curve))
        }
        _ => return Err(Error::Config("predict needs an image model (gmic or drc)".into())),
    };
    let probabilities: Vec<f64> = match curve {
        Some(c) => curve_window_scores(&c).to_vec(),
        None => outputs.y_fusion.clone(),
    };
    if let Some(dir) = drc_dir {
        match Trained::load(dir)?.1 {
            Trained::Drc(m) => {
                let side = m.config.input_side;
                let img = preprocess(&read_pgm(image)?, side, &NormalizeConfig::default())?;
                curve = Some(m.predict_curve(&img)?);
            }
            _ => return Err(Error::Config("--drc must point at a drc model".into())),
        }
    }
    if let Some(c) = curve {
        drc::write_drc_csv(create(&out.join("drc.csv"))?, &[(exam_id.clone(), c)])?;
    }
    for t in 0..outputs.saliency.num_maps() {
        write_pgm(
            out.join(format!("saliency_{t}.pgm")),
            &outputs.saliency.image(t).to_raw(),
        )?;
    }
    let mut w = csv::Writer::from_writer(create(&out.join("rois.csv"))?);
    w.write_record(["rank", "row", "col", "size", "attention"])
        .map_err(Error::csv)?;
    for (k, ((r, c), a)) in outputs.rois.positions.iter().zip(&outputs.rois.attention).enumerate() {
        w.write_record([
            k.to_string(),
            r.to_string(),
            c.to_string(),
            gcfg.crop_side.to_string(),
            a.to_string(),
        ])
        .map_err(Error::csv)?;
    }
    w.flush().map_err(|e| Error::io(out.join("rois.csv"), e))?;
    let named: BTreeMap<String, f64> = WINDOWS.iter().map(|w| format!("{w}h")).zip(probabilities).collect();
    let metrics = json!({ "exam_id": exam_id, "probabilities": named, "drc": curve.map(|c| c.to_vec()) });
    let path = out.join("prediction.json");
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::format("prediction", e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_report(&out, "predict", &cfg, metrics)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                flatten(
                    &if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    },
                    x,
                    out,
                );
            }
        }
        Value::Array(items) if items.iter().any(|x| x.is_object() || x.is_array()) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Renders a report as markdown.
pub fn report_markdown(report: &Report) -> String {
    let mut s = format!(
        "# {}\n\n- version: `{}`\n- seed: {}\n\n## Metrics\n\n| key | value |\n|---|---|\n",
        report.command, report.version, report.seed
    );
    let mut rows = vec![];
    flatten("", &report.metrics, &mut rows);
    for (k, v) in rows {
        s.push_str(&format!("| {k} | {v} |\n"));
    }
    s.push_str("\n## Config\n\n| key | value |\n|---|---|\n");
    for (k, v) in &report.config {
        s.push_str(&format!("| {k} | {v} |\n"));
    }
    s
}

fn export_report(run: &Path, out: Option<&Path>) -> Result<()> {
    let path = run.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| Error::format("report", e.to_string()))?;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("report.md"));
    let mut f = create(&target)?;
    f.write_all(report_markdown(&report).as_bytes())
        .map_err(|e| Error::io(&target, e))?;
    f.flush().map_err(|e| Error::io(&target, e))
}
