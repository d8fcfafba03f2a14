//! Accuracy by annotation subset, ablation sweeps, and attention export.

mod attention;

pub use attention::{attention_pair, extract_attention, write_heatmap, AttentionHeatmap};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{mentioned_attributes, Annotation, GroundingDataset, ReferenceRecord, Split};
use crate::error::{Error, Result};
use crate::head::{pick, predict, EncoderToggles};
use crate::model::{FeatureCache, GroundingModel, ViewMode};
use crate::objectives::TaskMask;
use crate::training::{build_model, train, PolicyKind, TrainConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubsetScore {
    pub n: usize,
    pub correct: usize,
    /// `correct / n`, or 0 for an empty subset.
    pub accuracy: f64,
}

impl SubsetScore {
    fn new(n: usize, correct: usize) -> Self {
        Self {
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        }
    }

    pub fn accuracy_opt(&self) -> Option<f64> {
        (self.n > 0).then_some(self.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub split: String,
    pub visual: SubsetScore,
    pub blind: SubsetScore,
    pub all: SubsetScore,
    /// References whose two candidates scored exactly equal.
    pub ties: usize,
    pub warnings: Vec<String>,
    pub trainable_params: Option<usize>,
}

impl Scorecard {
    /// Tallies `(annotation, correct, tied)` outcomes.
    pub fn tally(split: &str, outcomes: &[(Annotation, bool, bool)]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Argument(format!("split `{split}` has no references")));
        }
        let count = |a: Option<Annotation>| {
            let sel = outcomes.iter().filter(|o| a.is_none_or(|a| o.0 == a));
            let n = sel.clone().count();
            SubsetScore::new(n, sel.filter(|o| o.1).count())
        };
        let ties = outcomes.iter().filter(|o| o.2).count();
        let mut warnings = Vec::new();
        if ties == outcomes.len() {
            warnings.push(format!(
                "degenerate scorer: all {ties} references tied, accuracy reflects the tie-break rule only"
            ));
        } else if ties > 0 {
            warnings.push(format!("{ties} of {} references tied", outcomes.len()));
        }
        Ok(Self {
            split: split.to_owned(),
            visual: count(Some(Annotation::Visual)),
            blind: count(Some(Annotation::Blind)),
            all: count(None),
            ties,
            warnings,
            trainable_params: None,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.ties == self.all.n
    }

    /// "Visual / Blind / All" text table in percent.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "split", "Visual", "Blind", "All");
        let _ = writeln!(
            out,
            "{:<12} {:>8.1} {:>8.1} {:>8.1}",
            self.split,
            100.0 * self.visual.accuracy,
            100.0 * self.blind.accuracy,
            100.0 * self.all.accuracy
        );
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Evaluates an arbitrary scorer `(reference, object_id) -> score`.
pub fn evaluate_with(
    split: &str,
    refs: &[&ReferenceRecord],
    mut scorer: impl FnMut(&ReferenceRecord, &str) -> Result<f64>,
) -> Result<Scorecard> {
    let mut outcomes = Vec::with_capacity(refs.len());
    for r in refs {
        let scores: BTreeMap<String, f64> = r
            .candidates
            .iter()
            .map(|c| Ok((c.clone(), scorer(r, c)?)))
            .collect::<Result<_>>()?;
        let chosen = predict(r, &scores)?;
        let tied = scores[&r.candidates[0]] == scores[&r.candidates[1]];
        outcomes.push((r.annotation, chosen == r.target, tied));
    }
    Scorecard::tally(split, &outcomes)
}

/// Evaluates the model over `refs` using precomputed frozen features.
pub fn evaluate_cached(
    model: &GroundingModel,
    cache: &FeatureCache,
    refs: &[&ReferenceRecord],
    split: &str,
) -> Result<Scorecard> {
    if refs.is_empty() {
        return Err(Error::Argument(format!("split `{split}` has no references")));
    }
    let scores = model.score_references(cache, refs)?;
    let outcomes: Vec<_> = refs
        .iter()
        .zip(&scores)
        .map(|(r, s)| {
            let chosen = pick(&r.candidates[0], s[0], &r.candidates[1], s[1]);
            (r.annotation, chosen == r.target, s[0] == s[1])
        })
        .collect();
    Scorecard::tally(split, &outcomes)
}

/// Grounding accuracy of `model` on one split.
pub fn evaluate(model: &GroundingModel, dataset: &GroundingDataset, split: Split, mode: ViewMode) -> Result<Scorecard> {
    let refs = dataset.split(split);
    if refs.is_empty() {
        return Err(Error::Argument(format!("split `{split}` has no references")));
    }
    let cache = FeatureCache::build(model, dataset, mode)?;
    let mut card = evaluate_cached(model, &cache, &refs, split.name())?;
    card.trainable_params = Some(crate::training::ParamLedger::from_model(model).trainable);
    Ok(card)
}

/// Scorer that reads the generator's attribute sidecar: 1 when the object
/// has every attribute the description mentions, else 0.
pub fn truth_scorer(dataset: &GroundingDataset) -> Result<impl Fn(&ReferenceRecord, &str) -> Result<f64> + '_> {
    let truth = dataset
        .truth()
        .ok_or_else(|| Error::Argument("dataset has no attribute sidecar".into()))?;
    Ok(move |r: &ReferenceRecord, id: &str| {
        let attrs = truth
            .get(id)
            .ok_or_else(|| Error::Argument(format!("no attributes recorded for `{id}`")))?;
        let wanted = mentioned_attributes(&r.description);
        Ok(wanted.iter().all(|(k, v)| attrs.get(k) == Some(v)) as u8 as f64)
    })
}

/// One grid cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub task_mask: TaskMask,
    pub toggles: EncoderToggles,
    pub policy: PolicyKind,
}

impl SweepCell {
    pub fn validate(&self) -> Result<()> {
        self.task_mask.validate()?;
        self.toggles.validate()
    }
}

/// The six encoder/task rows of the multi-task ablation, all under the
/// domain-adapter policy.
pub fn ablation_cells() -> Vec<SweepCell> {
    let both = EncoderToggles::default();
    let mask = |lgr, vlc, vgc| TaskMask { lgr, vlc, vgc };
    let rows = [
        (both, mask(true, false, false)),
        (both, mask(true, true, false)),
        (both, mask(true, false, true)),
        (
            EncoderToggles {
                vision: true,
                domain: false,
            },
            TaskMask::ALL,
        ),
        (
            EncoderToggles {
                vision: false,
                domain: true,
            },
            TaskMask::ALL,
        ),
        (both, TaskMask::ALL),
    ];
    rows.into_iter()
        .map(|(toggles, task_mask)| SweepCell {
            label: cell_label(toggles, task_mask, PolicyKind::DomainAdapter),
            task_mask,
            toggles,
            policy: PolicyKind::DomainAdapter,
        })
        .collect()
}

pub fn cell_label(toggles: EncoderToggles, mask: TaskMask, policy: PolicyKind) -> String {
    let mut enc = vec!["L"];
    if toggles.vision {
        enc.push("V");
    }
    if toggles.domain {
        enc.push("D");
    }
    format!("{} | {} | {}", enc.join("+"), mask, policy)
}

/// Cartesian product of masks, toggles, and policies.
pub fn grid_cells(masks: &[TaskMask], toggles: &[EncoderToggles], policies: &[PolicyKind]) -> Vec<SweepCell> {
    let mut out = Vec::new();
    for &policy in policies {
        for &t in toggles {
            for &m in masks {
                out.push(SweepCell {
                    label: cell_label(t, m, policy),
                    task_mask: m,
                    toggles: t,
                    policy,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// `mean (std)` in percent, one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1} ({:.1})", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub visual: MeanStd,
    pub blind: MeanStd,
    pub all: MeanStd,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    pub seeds: Vec<u64>,
    pub runs: Vec<Scorecard>,
    pub summary: Option<CellSummary>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub split: String,
    pub cells: Vec<CellResult>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let width = self.cells.iter().map(|c| c.cell.label.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  {:>12}  {:>12}  {:>12}  {:>10}\n",
            "cell", "Visual", "Blind", "All", "#Param"
        );
        for c in &self.cells {
            match (&c.summary, &c.skipped) {
                (Some(s), _) => {
                    let _ = writeln!(
                        out,
                        "{:<width$}  {:>12}  {:>12}  {:>12}  {:>10}",
                        c.cell.label,
                        s.visual.percent(),
                        s.blind.percent(),
                        s.all.percent(),
                        s.trainable_params
                    );
                }
                (None, reason) => {
                    let _ = writeln!(
                        out,
                        "{:<width$}  skipped: {}",
                        c.cell.label,
                        reason.as_deref().unwrap_or("no runs")
                    );
                }
            }
        }
        out
    }
}

/// Trains and evaluates one cell for one seed.
pub fn run_cell(
    dataset: &GroundingDataset,
    cell: &SweepCell,
    base: &TrainConfig,
    seed: u64,
    split: Split,
) -> Result<Scorecard> {
    cell.validate()?;
    let config = TrainConfig {
        seed,
        policy: cell.policy,
        task_mask: cell.task_mask,
        ..base.clone()
    };
    let mut model = build_model(dataset, &config, cell.toggles)?;
    let opts = TrainOptions {
        skip_validation: true,
        ..TrainOptions::default()
    };
    let report = train(&mut model, dataset, &config, &opts)?;
    let mut card = evaluate(&model, dataset, split, config.view_mode())?;
    card.trainable_params = Some(report.ledger.trainable);
    Ok(card)
}

/// Trains and evaluates every cell for every seed. Invalid cells are
/// skipped with their reason. Up to `threads` runs execute at once; each
/// run is itself serial and deterministic.
pub fn ablation_sweep(
    dataset: &GroundingDataset,
    cells: &[SweepCell],
    base: &TrainConfig,
    seeds: &[u64],
    split: Split,
    threads: usize,
) -> Result<SweepTable> {
    if seeds.is_empty() {
        return Err(Error::Argument("sweep needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.validate().is_ok())
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Mutex<BTreeMap<(usize, u64), Result<Scorecard>>> = Mutex::new(BTreeMap::new());
    let next = Mutex::new(0usize);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = {
                    let mut n = next.lock().expect("job counter");
                    let j = jobs.get(*n).copied();
                    *n += 1;
                    j
                };
                let Some((i, seed)) = job else { break };
                log::info!("sweep cell `{}` seed {seed}", cells[i].label);
                let r = run_cell(dataset, &cells[i], base, seed, split);
                results.lock().expect("results").insert((i, seed), r);
            });
        }
    });
    let mut results = results.into_inner().expect("results");
    let mut out = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        if let Err(e) = cell.validate() {
            out.push(CellResult {
                cell: cell.clone(),
                seeds: Vec::new(),
                runs: Vec::new(),
                summary: None,
                skipped: Some(e.to_string()),
            });
            continue;
        }
        let mut runs = Vec::with_capacity(seeds.len());
        for &s in seeds {
            runs.push(results.remove(&(i, s)).expect("every job ran")?);
        }
        let pick = |f: fn(&Scorecard) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let summary = CellSummary {
            visual: pick(|c| c.visual.accuracy),
            blind: pick(|c| c.blind.accuracy),
            all: pick(|c| c.all.accuracy),
            trainable_params: runs[0].trainable_params.unwrap_or(0),
        };
        out.push(CellResult {
            cell: cell.clone(),
            seeds: seeds.to_vec(),
            runs,
            summary: Some(summary),
            skipped: None,
        });
    }
    Ok(SweepTable {
        split: split.name().to_owned(),
        cells: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};

    fn reference(id: &str, target: &str, annotation: Annotation) -> ReferenceRecord {
        ReferenceRecord {
            reference_id: id.into(),
            description: "x".into(),
            candidates: ["a".into(), "b".into()],
            target: target.into(),
            annotation,
            split: Split::Test,
        }
    }

    #[test]
    fn counting_example() {
        // the scorer always prefers `a`; targets make outcomes ✓ ✗ ✓
        let refs = [
            reference("r1", "a", Annotation::Visual),
            reference("r2", "b", Annotation::Blind),
            reference("r3", "a", Annotation::Blind),
        ];
        let refs: Vec<_> = refs.iter().collect();
        let card = evaluate_with("test", &refs, |_, id| Ok(if id == "a" { 0.9 } else { 0.1 })).unwrap();
        assert_eq!((card.all.correct, card.all.n), (2, 3));
        assert_eq!(card.visual.accuracy, 1.0);
        assert_eq!(card.blind.accuracy, 0.5);
        assert_eq!(card.ties, 0);
        assert!(card.warnings.is_empty());
    }

    #[test]
    fn constant_scorer_is_flagged() {
        let refs = [
            reference("r1", "a", Annotation::Visual),
            reference("r2", "b", Annotation::Blind),
        ];
        let refs: Vec<_> = refs.iter().collect();
        let card = evaluate_with("test", &refs, |_, _| Ok(0.5)).unwrap();
        assert!(card.is_degenerate());
        assert_eq!(card.warnings.len(), 1);
        assert_eq!(card.all.correct, 1);
        assert!(matches!(
            evaluate_with("test", &[], |_, _| Ok(0.5)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn truth_oracle_is_perfect() {
        let d = generate_synthetic(&SynthSpec {
            seed: 4,
            n_objects: 10,
            n_references: 40,
            image_size: 16,
            views: 2,
            visual_fraction: 0.5,
            vocabulary: Vec::new(),
        })
        .unwrap();
        let refs: Vec<_> = d.references().iter().collect();
        let card = evaluate_with("all", &refs, truth_scorer(&d).unwrap()).unwrap();
        assert_eq!(card.all.accuracy, 1.0);
        assert_eq!(card.ties, 0);
    }

    #[test]
    fn mean_std_formatting() {
        let m = MeanStd::of(&[0.8, 0.9]);
        assert!((m.mean - 0.85).abs() < 1e-12);
        assert_eq!(m.percent(), "85.0 (7.1)");
        assert_eq!(MeanStd::of(&[0.5]).std, 0.0);
    }

    #[test]
    fn ablation_preset_has_six_valid_rows() {
        let cells = ablation_cells();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.validate().is_ok()));
        assert_eq!(cells[5].label, "L+V+D | LGR+VLC+VGC | domain_adapter");
    }

    #[test]
    fn sweep_skips_invalid_cells_and_aggregates_seeds() {
        let d = generate_synthetic(&SynthSpec {
            seed: 4,
            n_objects: 6,
            n_references: 30,
            image_size: 16,
            views: 2,
            visual_fraction: 0.5,
            vocabulary: Vec::new(),
        })
        .unwrap();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut cells = grid_cells(
            &[TaskMask::LGR],
            &[EncoderToggles::default()],
            &[PolicyKind::DomainAdapter],
        );
        cells.push(SweepCell {
            label: "no encoders".into(),
            task_mask: TaskMask::LGR,
            toggles: EncoderToggles {
                vision: false,
                domain: false,
            },
            policy: PolicyKind::DomainAdapter,
        });
        let table = ablation_sweep(&d, &cells, &base, &[0, 1], Split::Train, 1).unwrap();
        assert_eq!(table.cells[0].runs.len(), 2);
        assert!(table.cells[0].summary.is_some());
        assert!(table.cells[1].skipped.is_some());
        assert!(table.to_text().contains("skipped"));
    }
}
