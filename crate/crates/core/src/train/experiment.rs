//! Performance, generality and reliability experiments over phantom sites.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{resolve_dataset, TrainConfig};
use super::fit::{fit, EpochRecord};
use super::report::{Report, SubjectRecord};
use crate::config::KeyValues;
use crate::data::{DatasetRef, Manifest, Sample, Semantics, Split, Volume};
use crate::error::{Result, TabsError};
use crate::fsio;
use crate::metrics::{brain_mask, evaluate_pair, reliability_pair, MetricsRecord};
use crate::model::{Checkpoint, Model, Variant};
use crate::tensor::Tensor;

pub const SEQUENTIAL_ENV: &str = "TABS_SEQUENTIAL";

/// Worker count after applying the `TABS_SEQUENTIAL=1` override.
pub fn effective_jobs(requested: usize) -> usize {
    if std::env::var(SEQUENTIAL_ENV).is_ok_and(|v| v == "1") {
        1
    } else {
        requested.max(1)
    }
}

/// Maps `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<I, O, F>(items: &[I], jobs: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let jobs = effective_jobs(jobs).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Performance,
    Generality,
    Reliability,
}

impl FromStr for ExperimentKind {
    type Err = TabsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "performance" => Ok(ExperimentKind::Performance),
            "generality" => Ok(ExperimentKind::Generality),
            "reliability" => Ok(ExperimentKind::Reliability),
            other => Err(TabsError::config(format!(
                "unknown experiment kind `{other}` (expected performance, generality or reliability)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    /// Datasets the models are trained on (and named after).
    pub sources: Vec<DatasetRef>,
    /// Datasets evaluated without retraining.
    pub targets: Vec<DatasetRef>,
    pub variants: Vec<Variant>,
    /// Directory of `<site>_<variant>.ckpt` files.
    pub checkpoints: PathBuf,
    /// Reports go to `<report>.csv` and `<report>.txt`.
    pub report: PathBuf,
    pub jobs: usize,
    /// Training settings; the variant is replaced per run.
    pub train: TrainConfig,
}

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

impl ExperimentPlan {
    pub fn take_from(kv: &mut KeyValues, base: &Path) -> Result<Self> {
        for key in ["train", "val", "test", "checkpoint", "history"] {
            if kv.contains(key) {
                return Err(TabsError::config(format!(
                    "`{key}` is not an experiment key; use sources/targets/checkpoints"
                )));
            }
        }
        let kind: ExperimentKind = kv.require("kind")?;
        let datasets = |kv: &mut KeyValues, key: &str| -> Result<Vec<DatasetRef>> {
            kv.take_str(key)
                .as_deref()
                .map(list)
                .unwrap_or_default()
                .into_iter()
                .map(|s| DatasetRef::parse(s).map(|d| resolve_dataset(d, base)))
                .collect()
        };
        let sources = datasets(kv, "sources")?;
        let targets = datasets(kv, "targets")?;
        let variants = match kv.take_str("variants") {
            Some(s) => list(&s).into_iter().map(str::parse).collect::<Result<Vec<Variant>>>()?,
            None if kind == ExperimentKind::Reliability => vec![Variant::Tabs],
            None => Variant::ALL.to_vec(),
        };
        let checkpoints = base.join(kv.require::<String>("checkpoints")?);
        let report = base.join(kv.require::<String>("report")?);
        let jobs = kv.take_or("jobs", 1usize)?;
        let train = TrainConfig::take_from(kv, base)?;
        let plan = ExperimentPlan {
            kind,
            sources,
            targets,
            variants,
            checkpoints,
            report,
            jobs,
            train,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::read(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let plan = Self::take_from(&mut kv, base)?;
        kv.finish()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(TabsError::config("plan needs at least one source"));
        }
        if self.variants.is_empty() {
            return Err(TabsError::config("plan needs at least one variant"));
        }
        match self.kind {
            ExperimentKind::Performance => {
                if let Some(d) = self.sources.iter().find(|d| d.split.is_some()) {
                    return Err(TabsError::config(format!(
                        "performance source {d} must be a whole dataset, not one split"
                    )));
                }
            }
            ExperimentKind::Generality => {
                if self.targets.is_empty() {
                    return Err(TabsError::config("generality plan needs targets"));
                }
                for s in &self.sources {
                    if self.targets.iter().any(|t| t.dir == s.dir) {
                        return Err(TabsError::config(format!(
                            "generality source {} is also a target",
                            s.dir.display()
                        )));
                    }
                }
            }
            ExperimentKind::Reliability => {
                if self.sources.len() != 1 || self.targets.is_empty() {
                    return Err(TabsError::config(
                        "reliability plan needs one source and at least one retest target",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, site: &str, variant: Variant) -> PathBuf {
        self.checkpoints.join(format!("{site}_{}.ckpt", variant.key()))
    }
}

/// Site label of a dataset, taken from its manifest.
pub fn site_name(d: &DatasetRef) -> Result<String> {
    let m = Manifest::read(&d.dir)?;
    let mut sites: Vec<&str> = m.rows.iter().map(|r| r.site.as_str()).collect();
    sites.sort_unstable();
    sites.dedup();
    if sites.is_empty() {
        return Err(TabsError::data(format!("{} has no scans", d.dir.display())));
    }
    Ok(sites.join("+"))
}

fn probs(t: &Tensor<f32>) -> Result<Volume> {
    Volume::from_tensor(t, Semantics::TissueProbs, Default::default())
}

/// Scores the model on every sample against its own ground truth.
pub fn evaluate_samples(model: &Model<f32>, samples: &[Sample], jobs: usize) -> Result<Vec<MetricsRecord>> {
    parallel_map(samples, jobs, |s| evaluate_pair(&probs(&model.predict(&s.input)?)?, &probs(&s.gt)?))
        .into_iter()
        .collect()
}

/// Voxelwise mean of the training ground truths.
pub fn constant_prior(train: &[Sample]) -> Result<Tensor<f32>> {
    let first = train
        .first()
        .ok_or_else(|| TabsError::config("training set is empty"))?;
    let mut acc = vec![0.0f64; first.gt.numel()];
    for s in train {
        if s.gt.shape() != first.gt.shape() {
            return Err(TabsError::data("training ground truths differ in shape"));
        }
        for (a, v) in acc.iter_mut().zip(s.gt.data()) {
            *a += *v as f64;
        }
    }
    let n = train.len() as f64;
    Tensor::new(first.gt.shape().to_vec(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Scores one fixed probability map against every sample.
pub fn evaluate_constant(prediction: &Tensor<f32>, samples: &[Sample]) -> Result<Vec<MetricsRecord>> {
    let pred = probs(prediction)?;
    samples.iter().map(|s| evaluate_pair(&pred, &probs(&s.gt)?)).collect()
}

fn push_all(report: &mut Report, group: &str, method: &str, samples: &[Sample], records: Vec<MetricsRecord>) {
    for (s, record) in samples.iter().zip(records) {
        report.push(SubjectRecord {
            group: group.to_string(),
            method: method.to_string(),
            subject: s.subject.clone(),
            record,
        });
    }
}

/// Trains every variant on each source's train split (validation on its val
/// split), saves the selected checkpoints and scores them on the test split.
pub fn run_performance(plan: &ExperimentPlan, mut log: impl FnMut(&str, &EpochRecord)) -> Result<Report> {
    let mut report = Report::new("Project", false);
    for source in &plan.sources {
        let site = site_name(source)?;
        let part = |s| DatasetRef::new(&source.dir, Some(s)).load(Some(1));
        let (train, val, test) = (part(Split::Train)?, part(Split::Val)?, part(Split::Test)?);
        for &variant in &plan.variants {
            let mut cfg = plan.train.clone();
            cfg.model = cfg.model.with_variant(variant);
            let label = format!("{site}/{}", variant.key());
            let outcome = fit(&cfg, &train, &val, |r| log(&label, r))?;
            let path = plan.checkpoint_path(&site, variant);
            outcome.checkpoint.save(&path)?;
            fsio::write_atomic_str(&path.with_extension("history.csv"), &outcome.history_csv())?;
            let model = outcome.checkpoint.model()?;
            let records = evaluate_samples(&model, &test, plan.jobs)?;
            push_all(&mut report, &site, variant.display_name(), &test, records);
        }
    }
    report.write(&plan.report)?;
    Ok(report)
}

fn load_model(plan: &ExperimentPlan, site: &str, variant: Variant) -> Result<Model<f32>> {
    let path = plan.checkpoint_path(site, variant);
    if !path.exists() {
        return Err(TabsError::MissingFile(path));
    }
    Checkpoint::load(&path)?.model()
}

/// Applies checkpoints trained on each source to every target's test split.
pub fn run_generality(plan: &ExperimentPlan) -> Result<Report> {
    let mut report = Report::new("Project", true);
    for source in &plan.sources {
        let site = site_name(source)?;
        let models = plan
            .variants
            .iter()
            .map(|&v| load_model(plan, &site, v).map(|m| (v, m)))
            .collect::<Result<Vec<_>>>()?;
        for target in &plan.targets {
            let target_site = site_name(target)?;
            let split = DatasetRef::new(&target.dir, target.split.or(Some(Split::Test)));
            let samples = split.load(Some(1))?;
            let group = format!("{site} → {target_site}");
            for (v, model) in &models {
                let records = evaluate_samples(model, &samples, plan.jobs)?;
                push_all(&mut report, &group, v.display_name(), &samples, records);
            }
        }
    }
    report.write(&plan.report)?;
    Ok(report)
}

pub const GROUND_TRUTH_METHOD: &str = "Ground truth";

/// Test-retest agreement of each model on paired scans, next to the
/// agreement of the two ground-truth maps. With several targets a "Total"
/// group pools all pairs.
pub fn run_reliability(plan: &ExperimentPlan) -> Result<Report> {
    let mut report = Report::new("Test", true);
    let site = site_name(&plan.sources[0])?;
    let models = plan
        .variants
        .iter()
        .map(|&v| load_model(plan, &site, v).map(|m| (v, m)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for target in &plan.targets {
        let group = site_name(target)?;
        let t1 = target.load(Some(1))?;
        let t2 = target.load(Some(2))?;
        if t2.is_empty() {
            return Err(TabsError::config(format!(
                "{target} has no second timepoint; reliability needs retest scans"
            )));
        }
        let mut pairs = Vec::with_capacity(t1.len());
        for a in t1 {
            let b = t2
                .iter()
                .find(|b| b.subject == a.subject)
                .ok_or_else(|| TabsError::data(format!("{}: no retest scan", a.subject)))?
                .clone();
            pairs.push((a, b));
        }
        for (v, model) in &models {
            let records = parallel_map(&pairs, plan.jobs, |(a, b)| {
                let mask = brain_mask(&probs(&a.gt)?)?.and(&brain_mask(&probs(&b.gt)?)?);
                let p1 = probs(&model.predict(&a.input)?)?;
                let p2 = probs(&model.predict(&b.input)?)?;
                reliability_pair(&p1, &p2, &mask)
            });
            for ((a, _), r) in pairs.iter().zip(records) {
                rows.push((a.subject.clone(), v.display_name(), r?));
            }
        }
        for (a, b) in &pairs {
            let (g1, g2) = (probs(&a.gt)?, probs(&b.gt)?);
            let mask = brain_mask(&g1)?.and(&brain_mask(&g2)?);
            rows.push((a.subject.clone(), GROUND_TRUTH_METHOD, reliability_pair(&g1, &g2, &mask)?));
        }
        for (subject, method, record) in rows.drain(..) {
            report.push(SubjectRecord {
                group: group.clone(),
                method: method.to_string(),
                subject,
                record,
            });
        }
    }
    if plan.targets.len() > 1 {
        let total: Vec<SubjectRecord> = report
            .records
            .iter()
            .map(|r| SubjectRecord {
                group: "Total".to_string(),
                ..r.clone()
            })
            .collect();
        for r in total {
            report.push(r);
        }
    }
    report.write(&plan.report)?;
    Ok(report)
}

pub fn run_experiment(plan: &ExperimentPlan, log: impl FnMut(&str, &EpochRecord)) -> Result<Report> {
    match plan.kind {
        ExperimentKind::Performance => run_performance(plan, log),
        ExperimentKind::Generality => run_generality(plan),
        ExperimentKind::Reliability => run_reliability(plan),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..17).collect();
        let out = parallel_map(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&[] as &[u32], 3, |x| *x).is_empty());
    }

    #[test]
    fn plan_parsing_and_checks() {
        let text = "kind = generality\nsources = a\ntargets = b, c:val\ncheckpoints = ck\nreport = out/gen\nvariants = tabs, unet\nepochs = 3\n";
        let mut kv = KeyValues::parse(text, "p").unwrap();
        let plan = ExperimentPlan::take_from(&mut kv, Path::new("/w")).unwrap();
        kv.finish().unwrap();
        assert_eq!(plan.variants, vec![Variant::Tabs, Variant::Unet]);
        assert_eq!(plan.targets[1], DatasetRef::new("/w/c", Some(Split::Val)));
        assert_eq!(plan.checkpoint_path("siteA", Variant::Tabs), PathBuf::from("/w/ck/siteA_tabs.ckpt"));
        assert_eq!(plan.train.epochs, 3);

        let same = "kind = generality\nsources = a\ntargets = a\ncheckpoints = c\nreport = r\n";
        let mut kv = KeyValues::parse(same, "p").unwrap();
        assert_eq!(ExperimentPlan::take_from(&mut kv, Path::new("")).unwrap_err().exit_code(), 1);

        let stray = "kind = performance\nsources = a\ncheckpoints = c\nreport = r\ntrain = x\n";
        let mut kv = KeyValues::parse(stray, "p").unwrap();
        assert!(ExperimentPlan::take_from(&mut kv, Path::new("")).is_err());
    }
}
