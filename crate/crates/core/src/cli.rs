//! Command implementations behind the `t3d` binary: run configs with dotted
//! overrides, corpus synthesis, pretraining, evaluation and ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::dataset::phantom::PROMPTS_FILE;
use crate::dataset::{tokenize, write_corpus, Corpus, PhantomSpec, Preprocess, SampleRecord, Split, Volume};
use crate::encoders::{embed_texts, embed_volumes};
use crate::error::{Error, Result};
use crate::evaluation::{
    linear_probe, macro_average, read_prompts, retrieval_eval, zero_shot_classify, EvalReport, Metrics,
    ProbeConfig, PromptPair, PromptSet,
};
use crate::model::Model;
use crate::training::{file_hash, load_checkpoint, num_workers, run_pretraining, RunOptions, RunOutput, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `prompts.json` inside the corpus directory.
    pub prompt_file: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "corpus".into(),
            output_dir: "runs".into(),
            prompt_file: None,
        }
    }
}

/// Knobs varied by the ablation harness; set values replace the
/// corresponding `train` fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub gca_weight: Option<f64>,
    pub tma_weight: Option<f64>,
    pub views: Option<usize>,
    pub fusion_layers: Option<usize>,
    pub text_informing: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub ks: Vec<usize>,
    pub probe: ProbeConfig,
    /// When set, replaces every negative prompt by this template with `{}`
    /// standing for the positive prompt.
    pub negative_template: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            ks: vec![1, 5, 10],
            probe: ProbeConfig::default(),
            negative_template: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub preprocess: Preprocess,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

fn config_err(msg: impl fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

impl RunConfig {
    /// Reads a config file and applies `key=value` overrides.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(config_err)?;
        cfg.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The training config with the ablation block applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        let a = &self.ablation;
        if let Some(w) = a.gca_weight {
            t.loss.gca_weight = w;
        }
        if let Some(w) = a.tma_weight {
            t.loss.tma_weight = w;
        }
        if let Some(m) = a.views {
            t.views = m;
        }
        if let Some(l) = a.fusion_layers {
            t.model.fusion_layers = l;
        }
        if let Some(on) = a.text_informing {
            t.model.text_informing = on;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(config_err("eval.ks must be non-empty and positive"));
        }
        if let Some(t) = &self.eval.negative_template {
            if !t.contains("{}") {
                return Err(config_err("eval.negative_template must contain `{}`"));
            }
        }
        Ok(())
    }

    pub fn prompt_file(&self) -> PathBuf {
        self.paths
            .prompt_file
            .clone()
            .unwrap_or_else(|| self.paths.corpus_dir.join(PROMPTS_FILE))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.paths.corpus_dir, &self.preprocess)
    }
}

fn leaves(value: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                prefix.push(k.clone());
                leaves(v, prefix, out);
                prefix.pop();
            }
        }
        _ => out.push(prefix.clone()),
    }
}

/// Applies `key=value` to a config tree. The key is a dotted path or any
/// dotted suffix of one (`tma_weight`, `loss.tau`); it must name a single
/// leaf, except that a suffix shared with the `ablation` block resolves to
/// the ablation entry. The value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let segs: Vec<&str> = key.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(config_err(format!("malformed override key `{key}`")));
    }
    let mut all = Vec::new();
    leaves(root, &mut Vec::new(), &mut all);
    let matches: Vec<&Vec<String>> = all
        .iter()
        .filter(|p| p.len() >= segs.len() && p[p.len() - segs.len()..].iter().zip(&segs).all(|(a, b)| a == b))
        .collect();
    let target = match matches.as_slice() {
        [] => return Err(config_err(format!("unknown config key `{key}`"))),
        [one] => *one,
        many => {
            let abl: Vec<&&Vec<String>> = many.iter().filter(|p| p[0] == "ablation").collect();
            if abl.len() == 1 {
                *abl[0]
            } else {
                let names: Vec<String> = many.iter().map(|p| p.join(".")).collect();
                return Err(config_err(format!("ambiguous config key `{key}`: {}", names.join(", "))));
            }
        }
    };
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for seg in target {
        node = node
            .get_mut(seg.as_str())
            .expect("leaf path comes from the same tree");
    }
    *node = value;
    Ok(())
}

/// Writes `n` phantoms to `out`. `seed` defaults to the spec's `rng_seed`.
pub fn cmd_synth(spec: Option<&Path>, out: &Path, n: usize, seed: Option<u64>) -> Result<Vec<SampleRecord>> {
    let spec: PhantomSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Spec(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Spec(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    let seed = seed.unwrap_or(spec.rng_seed);
    write_corpus(&spec, n, seed, out)
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<PathBuf>, stop_after: Option<u64>) -> Result<RunOutput> {
    let corpus = cfg.load_corpus()?;
    let opts = RunOptions {
        resume,
        stop_after,
        workers: num_workers(),
    };
    run_pretraining(&cfg.train_config(), &corpus, &cfg.paths.output_dir, &opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    ZeroShot,
    Retrieval,
    Probe,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ZeroShot, Task::Retrieval, Task::Probe];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ZeroShot => "zeroshot",
            Task::Retrieval => "retrieval",
            Task::Probe => "probe",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| config_err(format!("unknown task `{s}` (zeroshot, retrieval, probe)")))
    }
}

fn metrics_json(m: &Metrics) -> Value {
    json!({"precision": m.precision, "auc": m.auc, "acc": m.acc, "f1": m.f1})
}

fn split_indices(corpus: &Corpus, split: Split) -> Result<Vec<usize>> {
    let idx = corpus.indices(split);
    if idx.is_empty() {
        return Err(config_err(format!("the corpus has no {split:?} samples")));
    }
    Ok(idx)
}

fn volumes<'a>(corpus: &'a Corpus, idx: &[usize]) -> Vec<&'a Volume> {
    idx.iter().map(|&i| &corpus.volumes[i]).collect()
}

fn label_rows(corpus: &Corpus, idx: &[usize], attrs: &[String]) -> Vec<Vec<u8>> {
    idx.iter()
        .map(|&i| {
            attrs
                .iter()
                .map(|a| corpus.records[i].labels.get(a).copied().unwrap_or(0))
                .collect()
        })
        .collect()
}

/// Prompt set with the configured negative template applied.
pub fn load_prompts(cfg: &RunConfig) -> Result<PromptSet> {
    let mut set = read_prompts(cfg.prompt_file())?;
    if let Some(t) = &cfg.eval.negative_template {
        for pair in set.values_mut() {
            *pair = PromptPair {
                negative: t.replace("{}", &pair.positive),
                positive: std::mem::take(&mut pair.positive),
            };
        }
    }
    Ok(set)
}

/// Runs one protocol; returns the `metrics` and `per_attribute` sections.
pub fn evaluate(task: Task, model: &Model, corpus: &Corpus, cfg: &RunConfig) -> Result<(Value, Value)> {
    let test = split_indices(corpus, cfg.eval.split)?;
    match task {
        Task::Retrieval => {
            let toks = test
                .iter()
                .map(|&i| tokenize(&corpus.records[i].report_text, &corpus.vocab, model.config.max_tokens))
                .collect::<Result<Vec<_>>>()?;
            let zv = embed_volumes(model, &volumes(corpus, &test))?;
            let zr = embed_texts(model, &toks)?;
            let r = retrieval_eval(&zv, &zr, &cfg.eval.ks)?;
            let dir = |vals: &[f64]| -> Value {
                r.ks.iter()
                    .zip(vals)
                    .map(|(k, v)| (format!("R@{k}"), json!(v)))
                    .collect::<Map<_, _>>()
                    .into()
            };
            let metrics = json!({
                "samples": test.len(),
                "text_to_image": dir(&r.text_to_image),
                "image_to_text": dir(&r.image_to_text),
            });
            Ok((metrics, json!({})))
        }
        Task::ZeroShot => {
            let prompts = load_prompts(cfg)?;
            let labels: Vec<&BTreeMap<String, u8>> = test.iter().map(|&i| &corpus.records[i].labels).collect();
            let table = zero_shot_classify(
                &volumes(corpus, &test),
                &labels,
                &prompts,
                model,
                &corpus.vocab,
                cfg.train_config().loss.tau,
            )?;
            let per = table.per_attribute()?;
            let mut metrics = metrics_json(&macro_average(per.values()).expect("prompt set is non-empty"));
            metrics["samples"] = json!(test.len());
            let per_json: Map<String, Value> = per.iter().map(|(k, m)| (k.clone(), metrics_json(m))).collect();
            Ok((metrics, per_json.into()))
        }
        Task::Probe => {
            let train = split_indices(corpus, Split::Train)?;
            let all_attrs = corpus.attributes();
            let train_rows = label_rows(corpus, &train, &all_attrs);
            let (attrs, skipped): (Vec<(usize, &String)>, Vec<(usize, &String)>) =
                all_attrs.iter().enumerate().partition(|(j, _)| {
                    let pos = train_rows.iter().filter(|r| r[*j] == 1).count();
                    pos > 0 && pos < train_rows.len()
                });
            for (_, a) in &skipped {
                log::warn!("probe: skipping `{a}`, single-class training labels");
            }
            let names: Vec<String> = attrs.iter().map(|(_, a)| (*a).clone()).collect();
            if names.is_empty() {
                return Err(Error::DegenerateLabels("every attribute".into()));
            }
            let pick = |rows: Vec<Vec<u8>>| -> Vec<Vec<u8>> {
                rows.into_iter()
                    .map(|r| attrs.iter().map(|(j, _)| r[*j]).collect())
                    .collect()
            };
            let ztrain = embed_volumes(model, &volumes(corpus, &train))?;
            let ztest = embed_volumes(model, &volumes(corpus, &test))?;
            let res = linear_probe(
                &ztrain,
                &pick(train_rows),
                &ztest,
                &pick(label_rows(corpus, &test, &all_attrs)),
                &names,
                &cfg.eval.probe,
            )?;
            let per = res.test.per_attribute()?;
            let mut metrics = metrics_json(&macro_average(per.values()).expect("attributes are non-empty"));
            metrics["samples"] = json!(test.len());
            metrics["train_acc"] = json!(res.train_acc.values().sum::<f64>() / res.train_acc.len() as f64);
            metrics["skipped"] = json!(skipped.iter().map(|(_, a)| a).collect::<Vec<_>>());
            let per_json: Map<String, Value> = per.iter().map(|(k, m)| (k.clone(), metrics_json(m))).collect();
            Ok((metrics, per_json.into()))
        }
    }
}

/// Loads a checkpoint and checks that its architecture matches `cfg`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let state = load_checkpoint(checkpoint)?;
    let want = cfg.train_config();
    if state.config.model != want.model {
        return Err(Error::ArchitectureMismatch("model settings differ".into()));
    }
    if state.model.cluster_slots() != want.batch_size {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {} cluster slots, config batch_size is {}",
            state.model.cluster_slots(),
            want.batch_size
        )));
    }
    Ok(state.model)
}

pub fn default_report_path(cfg: &RunConfig, task: Task) -> PathBuf {
    cfg.paths.output_dir.join(format!("eval-{task}.json"))
}

/// Evaluates `checkpoint` and writes the report to `out`.
pub fn cmd_eval(cfg: &RunConfig, task: Task, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let model = load_model(cfg, checkpoint)?;
    let corpus = cfg.load_corpus()?;
    let (metrics, per_attribute) = evaluate(task, &model, &corpus, cfg)?;
    let report = EvalReport {
        task: task.to_string(),
        checkpoint_hash: file_hash(checkpoint)?,
        config: serde_json::to_value(cfg)?,
        metrics,
        per_attribute,
    };
    write_json(out, &report)?;
    Ok(report)
}

/// One-line human summary of a report.
pub fn summarize(report: &EvalReport) -> String {
    let m = &report.metrics;
    let fmt = |v: &Value| v.as_f64().map_or("n/a".to_string(), |x| format!("{x:.4}"));
    match report.task.as_str() {
        "retrieval" => {
            let side = |d: &str| -> String {
                m[d].as_object()
                    .map(|o| o.iter().map(|(k, v)| format!("{k}={}", fmt(v))).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default()
            };
            format!(
                "retrieval n={} t2i {} | i2t {}",
                m["samples"],
                side("text_to_image"),
                side("image_to_text")
            )
        }
        task => format!(
            "{task} n={} macro precision={} auc={} acc={} f1={}",
            m["samples"],
            fmt(&m["precision"]),
            fmt(&m["auc"]),
            fmt(&m["acc"]),
            fmt(&m["f1"])
        ),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Loss,
    Views,
    Layers,
    TextInforming,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Loss, Axis::Views, Axis::Layers, Axis::TextInforming];

    /// Variant names and the ablation block each one runs with.
    pub fn variants(self, base: &Ablation) -> Vec<(String, Ablation)> {
        let with = |f: &dyn Fn(&mut Ablation)| {
            let mut a = base.clone();
            f(&mut a);
            a
        };
        match self {
            Axis::Loss => vec![
                ("gca".into(), with(&|a| (a.gca_weight, a.tma_weight) = (Some(1.0), Some(0.0)))),
                ("tma".into(), with(&|a| (a.gca_weight, a.tma_weight) = (Some(0.0), Some(1.0)))),
                ("both".into(), with(&|a| (a.gca_weight, a.tma_weight) = (Some(1.0), Some(1.0)))),
            ],
            Axis::Views => (1..=4)
                .map(|m| (format!("views-{m}"), with(&|a| a.views = Some(m))))
                .collect(),
            Axis::Layers => (1..=3)
                .map(|l| (format!("layers-{l}"), with(&|a| a.fusion_layers = Some(l))))
                .collect(),
            Axis::TextInforming => vec![
                ("on".into(), with(&|a| a.text_informing = Some(true))),
                ("off".into(), with(&|a| a.text_informing = Some(false))),
            ],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Loss => "loss",
            Axis::Views => "views",
            Axis::Layers => "layers",
            Axis::TextInforming => "text_informing",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| config_err(format!("unknown axis `{s}` (loss, views, layers, text_informing)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub retrieval_r1_t2i: f64,
    pub zeroshot_auc: Option<f64>,
    pub probe_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub axis: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<16} {:>12} {:>12} {:>12}\n",
            "variant", "t2i R@1", "zs AUC", "probe AUC"
        );
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>12.4} {:>12} {:>12}\n",
                r.variant,
                r.retrieval_r1_t2i,
                opt(r.zeroshot_auc),
                opt(r.probe_auc)
            );
        }
        s
    }
}

/// Trains and evaluates every variant of `axis` in turn under
/// `<output_dir>/ablate-<axis>/<variant>/`, all with the base seed.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis) -> Result<AblationSummary> {
    let corpus = cfg.load_corpus()?;
    let root = cfg.paths.output_dir.join(format!("ablate-{axis}"));
    let mut rows = Vec::new();
    for (name, ablation) in axis.variants(&cfg.ablation) {
        let mut v = cfg.clone();
        v.ablation = ablation;
        v.paths.output_dir = root.join(&name);
        v.validate()?;
        log::info!("ablation {axis}: variant {name}");
        let out = run_pretraining(
            &v.train_config(),
            &corpus,
            &v.paths.output_dir,
            &RunOptions {
                workers: num_workers(),
                ..RunOptions::default()
            },
        )?;
        let model = &out.state.model;
        let (ret, _) = evaluate(Task::Retrieval, model, &corpus, &v)?;
        let (zs, _) = evaluate(Task::ZeroShot, model, &corpus, &v)?;
        let (pr, _) = evaluate(Task::Probe, model, &corpus, &v)?;
        rows.push(AblationRow {
            variant: name,
            retrieval_r1_t2i: ret["text_to_image"]["R@1"].as_f64().unwrap_or(0.0),
            zeroshot_auc: zs["auc"].as_f64(),
            probe_auc: pr["auc"].as_f64(),
        });
    }
    let summary = AblationSummary {
        axis: axis.to_string(),
        seed: cfg.train.seed,
        rows,
    };
    write_json(&root.join("summary.json"), &summary)?;
    let txt = root.join("summary.txt");
    fs::write(&txt, summary.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(summary)
}
