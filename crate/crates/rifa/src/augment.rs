//! Dataset extension: add the symmetric reverses and inverse partners
//! implied by existing ground-truth triples.
//!
//! Every triple whose predicate is symmetric implies its reverse; every
//! triple whose predicate has an inverse partner implies the reversed
//! triple under the partner. Candidates missing from the ground truth
//! form a global pool; a seeded sample of `fraction` of that pool is
//! added in place. At fraction 1.0 the result is closed, so a second
//! pass adds nothing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::scenedata::{Scene, Triple, Vocab};

/// What to add and how much of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Share of missing implied triples to add, in [0, 1].
    pub fraction: f64,
    pub seed: u64,
    /// Symmetric predicate ids to close over.
    pub symmetric: Vec<usize>,
    /// (predicate, partner) pairs to close over, applied in both
    /// directions.
    pub inverse: Vec<(usize, usize)>,
}

impl AugmentSpec {
    /// Closure over everything the vocabulary declares.
    pub fn from_vocab(vocab: &Vocab, fraction: f64, seed: u64) -> Self {
        AugmentSpec {
            fraction,
            seed,
            symmetric: vocab.symmetric.clone(),
            inverse: vocab.inverse.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.fraction) || !self.fraction.is_finite() {
            return Err(format!("fraction must be in [0, 1], got {}", self.fraction));
        }
        Ok(())
    }
}

/// What [`extend_dataset`] did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionReport {
    /// Implied triples absent from the input.
    pub candidates: usize,
    /// How many of those were sampled and added.
    pub added: usize,
    /// Implied triples that were already present.
    pub already_present: usize,
}

fn implied(triple: &Triple, spec: &AugmentSpec) -> Vec<Triple> {
    let mut out = Vec::new();
    if spec.symmetric.contains(&triple.predicate) {
        out.push(Triple::new(triple.object, triple.predicate, triple.subject));
    }
    for &(p, q) in &spec.inverse {
        if triple.predicate == p {
            out.push(Triple::new(triple.object, q, triple.subject));
        } else if triple.predicate == q {
            out.push(Triple::new(triple.object, p, triple.subject));
        }
    }
    out
}

/// Add a seeded sample of the missing implied triples to `scenes` in
/// place. Candidates are pooled across the whole dataset and sampled
/// without replacement, so `fraction` applies globally rather than per
/// scene.
pub fn extend_dataset(scenes: &mut [Scene], spec: &AugmentSpec) -> Result<ExtensionReport, String> {
    spec.validate()?;
    let mut pool: Vec<(usize, Triple)> = Vec::new();
    let mut already_present = 0usize;
    for (scene_idx, scene) in scenes.iter().enumerate() {
        let present: BTreeSet<Triple> = scene.gt_triples.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for t in &scene.gt_triples {
            for cand in implied(t, spec) {
                if present.contains(&cand) {
                    already_present += 1;
                } else if seen.insert(cand) {
                    pool.push((scene_idx, cand));
                }
            }
        }
    }
    let candidates = pool.len();
    let take = (spec.fraction * candidates as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);
    pool.truncate(take);
    // keep per-scene triple lists in a stable order regardless of the
    // shuffle
    pool.sort();
    for (scene_idx, triple) in pool {
        scenes[scene_idx].gt_triples.push(triple);
    }
    for scene in scenes.iter_mut() {
        scene.gt_triples.sort();
    }
    Ok(ExtensionReport { candidates, added: take, already_present })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenedata::{BBox, Entity};

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

    fn spec(fraction: f64) -> AugmentSpec {
        AugmentSpec { fraction, seed: 7, symmetric: vec![1], inverse: vec![(2, 3)] }
    }

    #[test]
    fn symmetric_reverse_added() {
        let mut scenes = vec![scene("a", 2, vec![Triple::new(0, 1, 1)])];
        let report = extend_dataset(&mut scenes, &spec(1.0)).unwrap();
        assert_eq!(report, ExtensionReport { candidates: 1, added: 1, already_present: 0 });
        assert!(scenes[0].gt_triples.contains(&Triple::new(1, 1, 0)));
    }

    #[test]
    fn inverse_partner_added_both_directions() {
        let mut scenes = vec![scene("a", 2, vec![Triple::new(0, 2, 1)]), scene("b", 2, vec![Triple::new(0, 3, 1)])];
        extend_dataset(&mut scenes, &spec(1.0)).unwrap();
        assert!(scenes[0].gt_triples.contains(&Triple::new(1, 3, 0)));
        assert!(scenes[1].gt_triples.contains(&Triple::new(1, 2, 0)));
    }

    #[test]
    fn present_triples_not_duplicated() {
        let mut scenes = vec![scene("a", 2, vec![Triple::new(0, 1, 1), Triple::new(1, 1, 0)])];
        let report = extend_dataset(&mut scenes, &spec(1.0)).unwrap();
        assert_eq!(report, ExtensionReport { candidates: 0, added: 0, already_present: 2 });
        assert_eq!(scenes[0].gt_triples.len(), 2);
    }

    #[test]
    fn fraction_scales_additions() {
        let mut scenes: Vec<Scene> = (0..10)
            .map(|i| scene(&format!("s{i}"), 2, vec![Triple::new(0, 1, 1)]))
            .collect();
        let report = extend_dataset(&mut scenes, &spec(0.5)).unwrap();
        assert_eq!(report.candidates, 10);
        assert_eq!(report.added, 5);
    }

    #[test]
    fn full_fraction_is_idempotent() {
        let mut scenes = vec![
            scene("a", 3, vec![Triple::new(0, 1, 1), Triple::new(1, 2, 2)]),
            scene("b", 2, vec![Triple::new(0, 3, 1)]),
        ];
        extend_dataset(&mut scenes, &spec(1.0)).unwrap();
        let snapshot = scenes.clone();
        let report = extend_dataset(&mut scenes, &spec(1.0)).unwrap();
        assert_eq!(report.added, 0);
        assert_eq!(report.candidates, 0);
        assert_eq!(scenes, snapshot);
    }

    #[test]
    fn same_seed_same_result() {
        let base: Vec<Scene> = (0..20)
            .map(|i| scene(&format!("s{i}"), 3, vec![Triple::new(0, 1, 1), Triple::new(1, 2, 2)]))
            .collect();
        let mut a = base.clone();
        let mut b = base.clone();
        extend_dataset(&mut a, &spec(0.3)).unwrap();
        extend_dataset(&mut b, &spec(0.3)).unwrap();
        assert_eq!(a, b);
        let mut c = base;
        extend_dataset(&mut c, &AugmentSpec { seed: 8, ..spec(0.3) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_fraction_rejected() {
        let mut scenes = vec![scene("a", 2, vec![])];
        assert!(extend_dataset(&mut scenes, &spec(1.5)).is_err());
        assert!(extend_dataset(&mut scenes, &spec(-0.1)).is_err());
    }

    #[test]
    fn scenes_stay_valid_after_extension() {
        let mut scenes = vec![scene("a", 4, vec![Triple::new(0, 2, 1), Triple::new(2, 1, 3)])];
        extend_dataset(&mut scenes, &spec(1.0)).unwrap();
        let vocab = Vocab {
            categories: vec!["c".into()],
            predicates: vec!["on".into(), "near".into(), "above".into(), "under".into()],
            asymmetric: vec![0],
            symmetric: vec![1],
            inverse: vec![(2, 3)],
        };
        for s in &scenes {
            s.validate(&vocab, None).unwrap();
        }
    }
}
