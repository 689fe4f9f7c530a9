//! Evaluation: triple matching, R@k, the property-aware recalls
//! R_A/R_S/R_I@k, per-predicate recall, and mean per-relation recall.
//!
//! Matching is the PredCls regime: entity identity is known, so a
//! predicted (s, o, p) matches a ground-truth triple exactly, direction
//! included. Recall is computed per scene and averaged over scenes
//! (image-wise); per-predicate recall pools ground-truth triples of one
//! predicate across the dataset and its unweighted mean is the fairness
//! measure.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::scenedata::{Scene, Triple, Vocab};
use crate::scoring::RankedPredictions;
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction for unknown scene {0}")]
    UnknownScene(String),
    #[error("scene {scene_id}: prediction ({s},{p},{o}) references entity out of range")]
    BadIndex { scene_id: String, s: usize, p: usize, o: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Which property group a recall is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertyGroup {
    Asymmetric,
    Symmetric,
    Inverse,
}

/// Ground-truth triples present among the top-k predictions of one
/// scene. Duplicates in the prediction list count once.
pub fn match_predictions(pred: &RankedPredictions, scene: &Scene, k: usize) -> Result<BTreeSet<Triple>> {
    let m = scene.entities.len();
    let gt: BTreeSet<Triple> = scene.gt_triples.iter().copied().collect();
    let mut matched = BTreeSet::new();
    for t in pred.triples.iter().take(k) {
        if t.s >= m || t.o >= m {
            return Err(MetricsError::BadIndex {
                scene_id: scene.scene_id.clone(),
                s: t.s,
                p: t.p,
                o: t.o,
            });
        }
        let triple = Triple::new(t.s, t.p, t.o);
        if gt.contains(&triple) {
            matched.insert(triple);
        }
    }
    Ok(matched)
}

fn top_k_set(pred: &RankedPredictions, k: usize) -> BTreeSet<Triple> {
    pred.triples.iter().take(k).map(|t| Triple::new(t.s, t.p, t.o)).collect()
}

fn paired<'a>(
    scenes: &'a [Scene],
    preds: &'a [RankedPredictions],
) -> Result<Vec<(&'a Scene, Option<&'a RankedPredictions>)>> {
    let by_id: BTreeMap<&str, &RankedPredictions> =
        preds.iter().map(|p| (p.scene_id.as_str(), p)).collect();
    for p in preds {
        if !scenes.iter().any(|s| s.scene_id == p.scene_id) {
            return Err(MetricsError::UnknownScene(p.scene_id.clone()));
        }
    }
    Ok(scenes
        .iter()
        .map(|s| (s, by_id.get(s.scene_id.as_str()).copied()))
        .collect())
}

/// Image-wise R@k in percent: per-scene recall averaged over scenes with
/// at least one ground-truth triple.
pub fn recall_at_k(scenes: &[Scene], preds: &[RankedPredictions], k: usize) -> Result<Real> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (scene, pred) in paired(scenes, preds)? {
        if scene.gt_triples.is_empty() {
            continue;
        }
        let matched = match pred {
            Some(p) => match_predictions(p, scene, k)?.len(),
            None => 0,
        };
        sum += matched as Real / scene.gt_triples.len() as Real;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { 100.0 * sum / counted as Real })
}

/// Property-aware recall in percent, or `None` when the vocabulary
/// defines no predicates for the group. Denominator: ground-truth
/// triples whose predicate belongs to the group.
pub fn property_recall(
    scenes: &[Scene],
    preds: &[RankedPredictions],
    vocab: &Vocab,
    k: usize,
    group: PropertyGroup,
) -> Result<Option<Real>> {
    let group_empty = match group {
        PropertyGroup::Asymmetric => vocab.asymmetric.is_empty(),
        PropertyGroup::Symmetric => vocab.symmetric.is_empty(),
        PropertyGroup::Inverse => vocab.inverse.is_empty(),
    };
    if group_empty {
        return Ok(None);
    }
    let in_group = |p: usize| match group {
        PropertyGroup::Asymmetric => vocab.asymmetric.contains(&p),
        PropertyGroup::Symmetric => vocab.symmetric.contains(&p),
        PropertyGroup::Inverse => vocab.inverse_of(p).is_some(),
    };

    let mut sum = 0.0;
    let mut counted = 0usize;
    for (scene, pred) in paired(scenes, preds)? {
        let denom = scene.gt_triples.iter().filter(|t| in_group(t.predicate)).count();
        if denom == 0 {
            continue;
        }
        let (matched, p_k) = match pred {
            Some(p) => (match_predictions(p, scene, k)?, top_k_set(p, k)),
            None => (BTreeSet::new(), BTreeSet::new()),
        };
        let mut hits = 0usize;
        for t in scene.gt_triples.iter().filter(|t| in_group(t.predicate)) {
            if !matched.contains(t) {
                continue;
            }
            let ok = match group {
                // the second condition is checked against the whole
                // top-k list, not only matched triples
                PropertyGroup::Asymmetric => !p_k.contains(&Triple::new(t.object, t.predicate, t.subject)),
                PropertyGroup::Symmetric => p_k.contains(&Triple::new(t.object, t.predicate, t.subject)),
                PropertyGroup::Inverse => {
                    let q = vocab.inverse_of(t.predicate).unwrap();
                    p_k.contains(&Triple::new(t.object, q, t.subject))
                }
            };
            if ok {
                hits += 1;
            }
        }
        sum += hits as Real / denom as Real;
        counted += 1;
    }
    Ok(Some(if counted == 0 { 0.0 } else { 100.0 * sum / counted as Real }))
}

/// Per-predicate recall (percent) over the dataset-pooled ground truth,
/// `None` for predicates without ground-truth instances, plus the
/// unweighted mean over predicates that have instances.
pub fn per_relation_recall(
    scenes: &[Scene],
    preds: &[RankedPredictions],
    predicate_count: usize,
    k: usize,
) -> Result<(Vec<Option<Real>>, Real)> {
    let mut gt_counts = vec![0usize; predicate_count];
    let mut hit_counts = vec![0usize; predicate_count];
    for (scene, pred) in paired(scenes, preds)? {
        let matched = match pred {
            Some(p) => match_predictions(p, scene, k)?,
            None => BTreeSet::new(),
        };
        for t in &scene.gt_triples {
            gt_counts[t.predicate] += 1;
            if matched.contains(t) {
                hit_counts[t.predicate] += 1;
            }
        }
    }
    let table: Vec<Option<Real>> = gt_counts
        .iter()
        .zip(&hit_counts)
        .map(|(&gt, &hit)| {
            if gt == 0 {
                None
            } else {
                Some(100.0 * hit as Real / gt as Real)
            }
        })
        .collect();
    let present: Vec<Real> = table.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<Real>() / present.len() as Real
    };
    Ok((table, mean))
}

/// Everything the `eval` command reports, for each requested cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ks: Vec<usize>,
    pub recall: Vec<Real>,
    pub asym_recall: Vec<Option<Real>>,
    pub sym_recall: Vec<Option<Real>>,
    pub inv_recall: Vec<Option<Real>>,
    pub predicates: Vec<String>,
    /// `per_predicate[k_idx][predicate]`
    pub per_predicate: Vec<Vec<Option<Real>>>,
    pub mean_per_relation: Vec<Real>,
}

pub fn evaluate(
    scenes: &[Scene],
    preds: &[RankedPredictions],
    vocab: &Vocab,
    ks: &[usize],
) -> Result<MetricsSummary> {
    let mut summary = MetricsSummary {
        ks: ks.to_vec(),
        recall: Vec::new(),
        asym_recall: Vec::new(),
        sym_recall: Vec::new(),
        inv_recall: Vec::new(),
        predicates: vocab.predicates.clone(),
        per_predicate: Vec::new(),
        mean_per_relation: Vec::new(),
    };
    for &k in ks {
        summary.recall.push(recall_at_k(scenes, preds, k)?);
        summary
            .asym_recall
            .push(property_recall(scenes, preds, vocab, k, PropertyGroup::Asymmetric)?);
        summary
            .sym_recall
            .push(property_recall(scenes, preds, vocab, k, PropertyGroup::Symmetric)?);
        summary
            .inv_recall
            .push(property_recall(scenes, preds, vocab, k, PropertyGroup::Inverse)?);
        let (table, mean) = per_relation_recall(scenes, preds, vocab.predicates.len(), k)?;
        summary.per_predicate.push(table);
        summary.mean_per_relation.push(mean);
    }
    Ok(summary)
}

fn fmt_opt(v: &Option<Real>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "-".to_string(),
    }
}

/// Human-readable report table.
pub fn render_table(s: &MetricsSummary) -> String {
    let mut out = String::new();
    out.push_str("metric");
    for k in &s.ks {
        out.push_str(&format!("\tR@{k}"));
    }
    out.push('\n');
    let row = |name: &str, values: Vec<String>| {
        let mut line = name.to_string();
        for v in values {
            line.push('\t');
            line.push_str(&v);
        }
        line.push('\n');
        line
    };
    out.push_str(&row("recall", s.recall.iter().map(|v| format!("{v:.2}")).collect()));
    out.push_str(&row("asym", s.asym_recall.iter().map(fmt_opt).collect()));
    out.push_str(&row("sym", s.sym_recall.iter().map(fmt_opt).collect()));
    out.push_str(&row("inv", s.inv_recall.iter().map(fmt_opt).collect()));
    out.push_str(&row(
        "mean_per_relation",
        s.mean_per_relation.iter().map(|v| format!("{v:.2}")).collect(),
    ));
    out.push('\n');
    for (p, name) in s.predicates.iter().enumerate() {
        out.push_str(&row(
            name,
            s.per_predicate.iter().map(|t| fmt_opt(&t[p])).collect(),
        ));
    }
    out
}

/// CSV export of the per-predicate table (one row per predicate, one
/// column per cutoff).
pub fn render_csv(s: &MetricsSummary) -> String {
    let mut out = String::from("predicate");
    for k in &s.ks {
        out.push_str(&format!(",r_at_{k}"));
    }
    out.push('\n');
    for (p, name) in s.predicates.iter().enumerate() {
        out.push_str(name);
        for t in &s.per_predicate {
            out.push(',');
            out.push_str(&fmt_opt(&t[p]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenedata::{BBox, Entity};
    use crate::scoring::ScoredTriple;

    fn scene(id: &str, m: usize, triples: Vec<Triple>) -> Scene {
        Scene {
            scene_id: id.into(),
            entities: (0..m)
                .map(|_| Entity {
                    category_id: 0,
                    bbox: BBox::new(0.1, 0.1, 0.2, 0.2),
                    feature: None,
                })
                .collect(),
            gt_triples: triples,
        }
    }

    fn ranked(id: &str, triples: &[(usize, usize, usize)]) -> RankedPredictions {
        RankedPredictions {
            scene_id: id.into(),
            triples: triples
                .iter()
                .enumerate()
                .map(|(rank, &(s, p, o))| ScoredTriple {
                    s,
                    o,
                    p,
                    rs: 100.0 - rank as Real,
                    sc: 0.0,
                    rp: 0.5,
                    rc: 0.1,
                })
                .collect(),
        }
    }

    fn vocab() -> Vocab {
        Vocab {
            categories: vec!["c".into()],
            predicates: vec!["on".into(), "near".into(), "above".into(), "under".into()],
            asymmetric: vec![0],
            symmetric: vec![1],
            inverse: vec![(2, 3)],
        }
    }

    #[test]
    fn exact_match_counts() {
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let pred = ranked("a", &[(0, 0, 1)]);
        assert_eq!(match_predictions(&pred, &sc, 10).unwrap().len(), 1);
    }

    #[test]
    fn direction_matters() {
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let pred = ranked("a", &[(1, 0, 0)]);
        assert!(match_predictions(&pred, &sc, 10).unwrap().is_empty());
    }

    #[test]
    fn partial_match_ratio() {
        let gt = vec![
            Triple::new(0, 0, 1),
            Triple::new(1, 0, 2),
            Triple::new(2, 0, 3),
            Triple::new(3, 0, 0),
        ];
        let sc = scene("a", 4, gt);
        let pred = ranked("a", &[(0, 0, 1), (1, 0, 2), (2, 0, 3), (0, 1, 2)]);
        let r = recall_at_k(&[sc], &[pred], 10).unwrap();
        assert!((r - 75.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_recall() {
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        assert_eq!(recall_at_k(&[sc.clone()], &[ranked("a", &[(0, 0, 1)])], 5).unwrap(), 100.0);
        assert_eq!(recall_at_k(&[sc], &[ranked("a", &[])], 5).unwrap(), 0.0);
    }

    #[test]
    fn scenes_without_gt_excluded_from_average() {
        let a = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let b = scene("b", 2, vec![]);
        let preds = vec![ranked("a", &[(0, 0, 1)]), ranked("b", &[])];
        assert_eq!(recall_at_k(&[a, b], &[preds[0].clone(), preds[1].clone()], 5).unwrap(), 100.0);
    }

    #[test]
    fn out_of_range_prediction_rejected() {
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let pred = ranked("a", &[(0, 0, 9)]);
        assert!(match_predictions(&pred, &sc, 5).is_err());
    }

    #[test]
    fn symmetric_recall_requires_both_directions() {
        let sc = scene("a", 2, vec![Triple::new(0, 1, 1)]);
        let v = vocab();
        let with_both = ranked("a", &[(0, 1, 1), (1, 1, 0)]);
        let r = property_recall(&[sc.clone()], &[with_both], &v, 5, PropertyGroup::Symmetric).unwrap();
        assert_eq!(r, Some(100.0));
        let one_way = ranked("a", &[(0, 1, 1)]);
        let r = property_recall(&[sc], &[one_way], &v, 5, PropertyGroup::Symmetric).unwrap();
        assert_eq!(r, Some(0.0));
    }

    #[test]
    fn asymmetric_recall_penalizes_reverse() {
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let v = vocab();
        let with_reverse = ranked("a", &[(0, 0, 1), (1, 0, 0)]);
        let r = property_recall(&[sc.clone()], &[with_reverse], &v, 5, PropertyGroup::Asymmetric).unwrap();
        assert_eq!(r, Some(0.0));
        let clean = ranked("a", &[(0, 0, 1)]);
        let r = property_recall(&[sc], &[clean], &v, 5, PropertyGroup::Asymmetric).unwrap();
        assert_eq!(r, Some(100.0));
    }

    #[test]
    fn inverse_recall_requires_partner() {
        let sc = scene("a", 2, vec![Triple::new(0, 2, 1), Triple::new(1, 3, 0)]);
        let v = vocab();
        let full = ranked("a", &[(0, 2, 1), (1, 3, 0)]);
        let r = property_recall(&[sc.clone()], &[full], &v, 5, PropertyGroup::Inverse).unwrap();
        assert_eq!(r, Some(100.0));
        // a lone direction is matched but its partner is absent from the
        // top-k, so neither ground-truth triple earns credit
        let half = ranked("a", &[(0, 2, 1)]);
        let r = property_recall(&[sc], &[half], &v, 5, PropertyGroup::Inverse).unwrap();
        assert_eq!(r, Some(0.0));
    }

    #[test]
    fn empty_group_reports_absent() {
        let v = Vocab { symmetric: vec![], ..vocab() };
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let pred = ranked("a", &[]);
        let r = property_recall(&[sc], &[pred], &v, 5, PropertyGroup::Symmetric).unwrap();
        assert_eq!(r, None);
    }

    #[test]
    fn single_predicate_per_relation_equals_recall() {
        let sc = scene("a", 3, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]);
        let pred = ranked("a", &[(0, 0, 1)]);
        let (table, mean) = per_relation_recall(&[sc.clone()], &[pred.clone()], 4, 5).unwrap();
        assert_eq!(table[0], Some(50.0));
        let r = recall_at_k(&[sc], &[pred], 5).unwrap();
        assert_eq!(mean, r);
    }

    #[test]
    fn mean_per_relation_is_unweighted() {
        // 99:1 imbalance, recalls 100 and 0 → mean 50
        let mut scenes = Vec::new();
        let mut preds = Vec::new();
        for i in 0..99 {
            let id = format!("s{i}");
            scenes.push(scene(&id, 2, vec![Triple::new(0, 0, 1)]));
            preds.push(ranked(&id, &[(0, 0, 1)]));
        }
        scenes.push(scene("tail", 2, vec![Triple::new(0, 1, 1)]));
        preds.push(ranked("tail", &[]));
        let (_, mean) = per_relation_recall(&scenes, &preds, 4, 5).unwrap();
        assert_eq!(mean, 50.0);
    }

    #[test]
    fn recall_monotone_in_k() {
        let sc = scene("a", 3, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]);
        let pred = ranked("a", &[(2, 0, 1), (0, 0, 1), (1, 0, 2)]);
        let mut last = 0.0;
        for k in 1..=4 {
            let r = recall_at_k(&[sc.clone()], &[pred.clone()], k).unwrap();
            assert!(r >= last, "k={k}");
            last = r;
        }
    }

    #[test]
    fn summary_render_contains_all_sections() {
        let sc = scene("a", 2, vec![Triple::new(0, 0, 1)]);
        let pred = ranked("a", &[(0, 0, 1)]);
        let s = evaluate(&[sc], &[pred], &vocab(), &[1, 5]).unwrap();
        let table = render_table(&s);
        assert!(table.contains("recall") && table.contains("mean_per_relation") && table.contains("near"));
        let csv = render_csv(&s);
        assert!(csv.starts_with("predicate,r_at_1,r_at_5"));
    }
}
