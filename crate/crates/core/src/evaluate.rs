//! Repeated end-to-end evaluation: segmentation Dice, stage classifiers,
//! cascade accuracy and the ablation table.
//!
//! Each repetition rebuilds the backends from a derived seed. Cases are
//! processed in parallel and every reduction runs sequentially in case
//! order, so a given setup always yields the same report.

use crate::backend::{BackendError, BackendSpec, BinaryClassifier, ClassifyContext};
use crate::cascade::{compose_input, Cascade, ComposeConfig, PathologyClass, PhaseMasks, Stage, Thresholds};
use crate::dataset::{CaseRecord, Phase};
use crate::mask::{LabelMask, Structure};
use crate::metrics::{
    aggregate_accuracy, classification_metrics, compare_published, dice_volume, mean, roc_auc, stdev,
    AblationRow, CaseFailure, ConfusionMatrix, MetricsReport,
};
use crate::segment::{ablate_phase, segment_phase, PipelineMode, SegBackends, SegConfig, SegError};
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub localizers: [BackendSpec; 3],
    pub segmenters: [BackendSpec; 3],
    pub classifiers: [BackendSpec; 4],
    pub seg: SegConfig,
    pub compose: ComposeConfig,
    pub thresholds: Thresholds,
    pub repetitions: usize,
    pub seed: u64,
    pub ablate: bool,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            localizers: std::array::from_fn(|_| BackendSpec::Oracle),
            segmenters: std::array::from_fn(|_| BackendSpec::Oracle),
            classifiers: std::array::from_fn(|_| BackendSpec::Oracle),
            seg: SegConfig::default(),
            compose: ComposeConfig::default(),
            thresholds: Thresholds::default(),
            repetitions: 10,
            seed: 0,
            ablate: false,
        }
    }
}

impl EvalSetup {
    pub fn classifier_shape(&self) -> [usize; 5] {
        [self.compose.slices, 2, 3, self.compose.size, self.compose.size]
    }

    pub fn seg_backends(&self, seed: u64) -> Result<SegBackends, BackendError> {
        SegBackends::from_specs(&self.localizers, &self.segmenters, &self.seg, seed)
    }

    pub fn stage_classifiers(&self) -> Result<[Box<dyn BinaryClassifier>; 4], BackendError> {
        let shape = self.classifier_shape();
        let [a, b, c, d] = Stage::ALL.map(|s| self.classifiers[s.index()].build_classifier(s, shape));
        Ok([a?, b?, c?, d?])
    }
}

/// Seed of repetition `rep`; repetition 0 uses `seed` itself.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Everything measured on one case in one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEval {
    pub case_id: String,
    pub truth: PathologyClass,
    /// Volume Dice indexed by phase, then structure.
    pub dice: [[f64; 3]; 2],
    pub predicted: PathologyClass,
    /// Stage scores for the stages whose domain contains the truth.
    pub scores: [Option<f64>; 4],
}

/// Per-structure volume Dice of `pred` against the case's ground truth.
pub fn phase_dice(pred: &[LabelMask], truth: &[LabelMask]) -> [f64; 3] {
    Structure::ALL.map(|s| {
        let p: Vec<_> = pred.iter().map(|m| m.structure(s)).collect();
        let t: Vec<_> = truth.iter().map(|m| m.structure(s)).collect();
        dice_volume(&p, &t).expect("segmentation keeps slice dims")
    })
}

/// Segments both phases, classifies from the predicted masks, and scores
/// every stage applicable to the true class.
pub fn evaluate_case(
    case: &CaseRecord,
    backends: &SegBackends,
    classifiers: &[Box<dyn BinaryClassifier>; 4],
    setup: &EvalSetup,
) -> Result<CaseEval, String> {
    let mut masks = PhaseMasks::default();
    let mut dice = [[0.0; 3]; 2];
    for phase in Phase::ALL {
        let gt = case
            .ground_truth(phase)
            .ok_or_else(|| format!("no {phase} ground truth"))?;
        let res = segment_phase(case, phase, backends, &setup.seg, PipelineMode::Full).map_err(|e| e.to_string())?;
        let pred: Vec<LabelMask> = res.into_iter().map(|r| r.final_mask).collect();
        dice[phase.index()] = phase_dice(&pred, gt);
        match phase {
            Phase::Ed => masks.ed = Some(pred),
            Phase::Es => masks.es = Some(pred),
        }
    }
    let input = compose_input(case, &masks, &setup.compose).map_err(|e| e.to_string())?;
    let ctx = ClassifyContext {
        case_id: &case.id,
        truth: Some(case.group),
    };
    let refs: [&dyn BinaryClassifier; 4] = std::array::from_fn(|i| classifiers[i].as_ref());
    let result = Cascade::new(refs, setup.thresholds)
        .classify(&input, &ctx)
        .map_err(|e| e.to_string())?;
    let mut scores = [None; 4];
    for stage in Stage::ALL {
        if stage.applies_to(case.group) {
            let s = refs[stage.index()]
                .score(&input, &ctx)
                .map_err(|e| format!("classifier {}: {e}", stage.number()))?;
            scores[stage.index()] = Some(s);
        }
    }
    Ok(CaseEval {
        case_id: case.id.clone(),
        truth: case.group,
        dice,
        predicted: result.predicted,
        scores,
    })
}

/// Mean volume Dice per mode (in [`PipelineMode::ALL`] order) and structure
/// over all cases and both phases.
pub fn ablation_dice(
    cases: &[&CaseRecord],
    backends: &SegBackends,
    cfg: &SegConfig,
) -> Result<[[f64; 3]; 5], SegError> {
    let per_case: Vec<[[f64; 3]; 5]> = cases
        .par_iter()
        .map(|case| {
            let mut acc = [[0.0; 3]; 5];
            for phase in Phase::ALL {
                let Some(gt) = case.ground_truth(phase) else {
                    continue;
                };
                let rows = ablate_phase(case, phase, backends, cfg)?;
                for (m, row) in acc.iter_mut().enumerate() {
                    let pred: Vec<LabelMask> = rows.iter().map(|r| r[m].clone()).collect();
                    for (v, d) in row.iter_mut().zip(phase_dice(&pred, gt)) {
                        *v += d;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, SegError>>()?;
    let n = cases
        .iter()
        .map(|c| Phase::ALL.iter().filter(|&&p| c.ground_truth(p).is_some()).count())
        .sum::<usize>()
        .max(1) as f64;
    let mut out = [[0.0; 3]; 5];
    for acc in &per_case {
        for (o, a) in out.iter_mut().zip(acc) {
            for (x, y) in o.iter_mut().zip(a) {
                *x += y;
            }
        }
    }
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

/// Runs every repetition and assembles the report. Backend construction
/// failures abort; per-case failures are listed in the report.
pub fn evaluate(cases: &[&CaseRecord], setup: &EvalSetup) -> Result<MetricsReport, BackendError> {
    let reps = setup.repetitions.max(1);
    let classifiers = setup.stage_classifiers()?;

    let mut dice_reps: BTreeMap<Phase, BTreeMap<Structure, Vec<f64>>> = BTreeMap::new();
    let mut stage_cm: [ConfusionMatrix; 4] = Stage::ALL.map(ConfusionMatrix::for_stage);
    let mut class_cm = ConfusionMatrix::for_classes();
    let mut stage_scores: [Vec<(f64, bool)>; 4] = Default::default();
    let mut stage_acc: [Vec<f64>; 4] = Default::default();
    let mut errors: BTreeMap<String, String> = BTreeMap::new();
    let mut ablation: Vec<[[f64; 3]; 5]> = Vec::new();

    for rep in 0..reps {
        let seed = repetition_seed(setup.seed, rep);
        let backends = setup.seg_backends(seed)?;
        let results: Vec<Result<CaseEval, String>> = cases
            .par_iter()
            .map(|c| evaluate_case(c, &backends, &classifiers, setup))
            .collect();

        let mut ok = Vec::new();
        for (case, r) in cases.iter().zip(results) {
            match r {
                Ok(e) => ok.push(e),
                Err(msg) => {
                    errors.entry(case.id.clone()).or_insert(msg);
                }
            }
        }
        for phase in Phase::ALL {
            for s in Structure::ALL {
                let vals: Vec<f64> = ok.iter().map(|e| e.dice[phase.index()][s.index()]).collect();
                if !vals.is_empty() {
                    dice_reps.entry(phase).or_default().entry(s).or_default().push(mean(&vals));
                }
            }
        }
        let mut rep_cm = Stage::ALL.map(ConfusionMatrix::for_stage);
        for e in &ok {
            class_cm.add_index(e.truth.index(), e.predicted.index());
            for stage in Stage::ALL {
                if let Some(score) = e.scores[stage.index()] {
                    let truth = stage.is_positive(e.truth);
                    let predicted = score >= setup.thresholds.get(stage);
                    rep_cm[stage.index()].add_index(truth as usize, predicted as usize);
                    stage_scores[stage.index()].push((score, truth));
                }
            }
        }
        for (i, cm) in rep_cm.iter().enumerate() {
            if let Ok(m) = classification_metrics(cm) {
                stage_acc[i].push(m.accuracy);
            }
            stage_cm[i].merge(cm);
        }

        if setup.ablate {
            let ablation_cases: Vec<&CaseRecord> = cases
                .iter()
                .copied()
                .filter(|c| c.has_ground_truth())
                .collect();
            match ablation_dice(&ablation_cases, &backends, &setup.seg) {
                Ok(t) => ablation.push(t),
                Err(e) => {
                    errors.entry("ablation".into()).or_insert(e.to_string());
                }
            }
        }
    }

    let mut confusion = BTreeMap::new();
    let mut classification = BTreeMap::new();
    let mut roc = BTreeMap::new();
    for stage in Stage::ALL {
        let key = format!("c{}", stage.number());
        if let Ok(m) = classification_metrics(&stage_cm[stage.index()]) {
            classification.insert(key.clone(), m);
        }
        roc.insert(key.clone(), roc_auc(&stage_scores[stage.index()]).ok());
        confusion.insert(key, stage_cm[stage.index()].clone());
    }
    if let Ok(m) = classification_metrics(&class_cm) {
        classification.insert("cascade".into(), m);
    }
    let cascade_accuracy = classification.get("cascade").map(|m| m.accuracy);
    confusion.insert("cascade".into(), class_cm);

    let evaluable = stage_acc.iter().all(|a| a.len() == reps);
    let (aggregate, aggregate_stdev, published) = if evaluable {
        let overall: Vec<f64> = (0..reps)
            .map(|r| aggregate_accuracy(stage_acc[0][r], stage_acc[1][r], stage_acc[2][r], stage_acc[3][r]).overall)
            .collect();
        let m = stage_acc.each_ref().map(|a| mean(a));
        let agg = aggregate_accuracy(m[0], m[1], m[2], m[3]);
        let cmp = compare_published(agg.overall);
        (Some(agg), stdev(&overall), Some(cmp))
    } else {
        for stage in Stage::ALL {
            if stage_acc[stage.index()].len() != reps {
                errors
                    .entry(format!("c{}", stage.number()))
                    .or_insert_with(|| "no evaluable cases in this classifier's domain".into());
            }
        }
        (None, 0.0, None)
    };

    let summarize = |f: fn(&[f64]) -> f64| -> BTreeMap<Phase, BTreeMap<Structure, f64>> {
        dice_reps
            .iter()
            .map(|(p, m)| (*p, m.iter().map(|(s, v)| (*s, f(v))).collect()))
            .collect()
    };

    let ablation = setup.ablate.then(|| {
        PipelineMode::ALL
            .iter()
            .enumerate()
            .map(|(m, &mode)| {
                let per_repetition: Vec<f64> = ablation.iter().map(|t| mean(&t[m])).collect();
                let dice = Structure::ALL
                    .iter()
                    .map(|s| (*s, mean(&ablation.iter().map(|t| t[m][s.index()]).collect::<Vec<_>>())))
                    .collect();
                AblationRow {
                    mode,
                    dice,
                    mean: mean(&per_repetition),
                    stdev: stdev(&per_repetition),
                    per_repetition,
                }
            })
            .collect()
    });

    Ok(MetricsReport {
        cases: cases.len(),
        repetitions: reps,
        seed: setup.seed,
        dice: summarize(mean),
        dice_stdev: summarize(stdev),
        confusion,
        classification,
        roc,
        aggregate,
        aggregate_stdev,
        cascade_accuracy,
        published,
        ablation,
        errors: errors
            .into_iter()
            .map(|(case_id, message)| CaseFailure { case_id, message })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TableClassifier;
    use crate::dataset::{make_phantom, PhantomDims};
    use std::collections::HashMap;

    fn phantoms(per_class: usize, dims: PhantomDims) -> Vec<CaseRecord> {
        let mut out = Vec::new();
        for (i, c) in PathologyClass::ALL.iter().enumerate() {
            for k in 0..per_class {
                let mut case = make_phantom((i * 100 + k) as u64, *c, dims);
                case.id = format!("p{:02}{:02}", i, k);
                out.push(case);
            }
        }
        out
    }

    fn small_setup() -> EvalSetup {
        EvalSetup {
            seg: SegConfig {
                model_input_size: 64,
                ..Default::default()
            },
            compose: ComposeConfig { slices: 2, size: 32 },
            repetitions: 2,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_everything_is_perfect() {
        let cases = phantoms(1, PhantomDims { width: 64, height: 64, slices: 3 });
        let refs: Vec<&CaseRecord> = cases.iter().collect();
        let report = evaluate(&refs, &small_setup()).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        assert_eq!(report.aggregate.as_ref().unwrap().overall, 1.0);
        assert_eq!(report.cascade_accuracy, Some(1.0));
        for m in report.dice.values() {
            for (s, d) in m {
                assert!(*d >= 0.95, "{s}: {d}");
            }
        }
        assert_eq!(report.confusion["cascade"].total(), 10);
        assert_eq!(report.confusion["c1"].total(), 10);
        assert_eq!(report.confusion["c4"].total(), 4);
    }

    #[test]
    fn missing_ground_truth_and_empty_domains_are_listed() {
        let mut cases = phantoms(1, PhantomDims { width: 48, height: 48, slices: 2 });
        cases.truncate(2);
        cases[1].es_gt = None;
        let refs: Vec<&CaseRecord> = cases.iter().collect();
        let setup = EvalSetup {
            repetitions: 1,
            ..small_setup()
        };
        let report = evaluate(&refs, &setup).unwrap();
        let ids: Vec<&str> = report.errors.iter().map(|e| e.case_id.as_str()).collect();
        assert_eq!(ids, ["c3", "c4", "p0100"]);
        assert!(report.aggregate.is_none());
        assert!(report.published.is_none());
    }

    #[test]
    fn table_classifiers_drive_stage_accuracy() {
        let dims = PhantomDims { width: 40, height: 40, slices: 2 };
        let cases = phantoms(2, dims);
        let refs: Vec<&CaseRecord> = cases.iter().collect();
        // c1 wrong on one NOR case; others follow the truth.
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for stage in Stage::ALL {
            let mut scores = HashMap::new();
            for c in &cases {
                let mut s = if stage.is_positive(c.group) { 0.9 } else { 0.1 };
                if stage == Stage::LvPathology && c.id == "p0000" {
                    s = 0.8;
                }
                scores.insert(c.id.clone(), s);
            }
            let path = dir.path().join(format!("c{}.csv", stage.number()));
            let mut text = String::from("case_id,score\n");
            let mut keys: Vec<_> = scores.keys().cloned().collect();
            keys.sort();
            for k in keys {
                text += &format!("{k},{}\n", scores[&k]);
            }
            std::fs::write(&path, text).unwrap();
            let _ = TableClassifier::from_csv(&path).unwrap();
            paths.push(path);
        }
        let setup = EvalSetup {
            classifiers: std::array::from_fn(|i| BackendSpec::Table(paths[i].clone())),
            repetitions: 1,
            ..small_setup()
        };
        let report = evaluate(&refs, &setup).unwrap();
        let agg = report.aggregate.unwrap();
        assert_eq!(agg.per_classifier["c1"], 0.9);
        assert_eq!(agg.per_classifier["c2"], 1.0);
        assert_eq!(report.confusion["cascade"].counts[0][2], 0);
        assert!(report.cascade_accuracy.unwrap() < 1.0);
    }

    #[test]
    fn report_is_deterministic() {
        let cases = phantoms(1, PhantomDims { width: 48, height: 48, slices: 2 });
        let refs: Vec<&CaseRecord> = cases.iter().collect();
        let setup = EvalSetup {
            segmenters: std::array::from_fn(|_| BackendSpec::Noisy(1)),
            ablate: true,
            ..small_setup()
        };
        let a = evaluate(&refs, &setup).unwrap().to_json();
        let b = evaluate(&refs, &setup).unwrap().to_json();
        assert_eq!(a, b);
        assert!(a.contains("\"L+D+PP\""));
    }
}
