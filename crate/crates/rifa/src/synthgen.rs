//! Deterministic synthetic scene generator.
//!
//! Relations are planned constructively: each new entity is placed so
//! that a sampled geometric trigger holds against an earlier entity, and
//! the resulting triple set is closed under the symmetric and inverse
//! rules. Property-group consistency therefore holds exactly, and the
//! predicate frequency profile follows the configured long-tail weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::scenedata::{BBox, Entity, Scene, Triple, Vocab};
use serde::{Deserialize, Serialize};

use crate::{fnv1a, Real};

/// Geometric condition on an ordered (subject, object) box pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Trigger {
    /// Subject entirely above the object (vertical gap within the given
    /// range) with horizontal overlap.
    AboveGap { min_gap: Real, max_gap: Real },
    /// Subject entirely left of the object with vertical overlap.
    LeftOf,
    /// Box centers within the given distance; order-invariant.
    Near { dist: Real },
    /// Subject box strictly inside the object box.
    Inside,
}

impl Trigger {
    pub fn holds(&self, s: &BBox, o: &BBox) -> bool {
        match *self {
            Trigger::AboveGap { min_gap, max_gap } => {
                let gap = o.y1 - s.y2;
                gap >= min_gap && gap <= max_gap && s.x1 < o.x2 && o.x1 < s.x2
            }
            Trigger::LeftOf => s.x2 < o.x1 && s.y1 < o.y2 && o.y1 < s.y2,
            Trigger::Near { dist } => {
                let (cx1, cy1) = s.center();
                let (cx2, cy2) = o.center();
                ((cx1 - cx2).powi(2) + (cy1 - cy2).powi(2)).sqrt() < dist
            }
            Trigger::Inside => o.x1 < s.x1 && o.y1 < s.y1 && s.x2 < o.x2 && s.y2 < o.y2,
        }
    }

    fn order_invariant(&self) -> bool {
        matches!(self, Trigger::Near { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RuleKind {
    Asymmetric,
    Symmetric,
    /// Adds the mirrored triple under the named partner predicate.
    InversePair { partner: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateRule {
    pub predicate: String,
    pub kind: RuleKind,
    pub trigger: Trigger,
    /// Base sampling weight, multiplied by the long-tail rank weight.
    pub weight: Real,
    /// When non-empty, subjects of this predicate are drawn from these
    /// categories; lets two rules share a trigger yet stay separable
    /// through the participating entities.
    #[serde(default)]
    pub subject_categories: Vec<usize>,
    /// Object-side counterpart of `subject_categories`.
    #[serde(default)]
    pub object_categories: Vec<usize>,
}

impl PredicateRule {
    pub fn new(predicate: &str, kind: RuleKind, trigger: Trigger, weight: Real) -> Self {
        PredicateRule {
            predicate: predicate.into(),
            kind,
            trigger,
            weight,
            subject_categories: Vec::new(),
            object_categories: Vec::new(),
        }
    }

    pub fn with_categories(mut self, subject: Vec<usize>, object: Vec<usize>) -> Self {
        self.subject_categories = subject;
        self.object_categories = object;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub scene_count: usize,
    pub entities_min: usize,
    pub entities_max: usize,
    pub category_count: usize,
    pub feature_dim: usize,
    pub rules: Vec<PredicateRule>,
    /// Long-tail severity: rule r gets weight ∝ (rank+1)^(−s).
    pub zipf_exponent: Real,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.scene_count == 0 || self.category_count == 0 || self.entities_min < 1 {
            return Err("counts must be positive".into());
        }
        if self.entities_min > self.entities_max {
            return Err("entities_min > entities_max".into());
        }
        if self.rules.is_empty() {
            return Err("at least one predicate rule required".into());
        }
        if self.zipf_exponent < 0.0 {
            return Err("zipf exponent must be >= 0".into());
        }
        for rule in &self.rules {
            if rule.kind == RuleKind::Symmetric && !rule.trigger.order_invariant() {
                return Err(format!("symmetric rule '{}' needs an order-invariant trigger", rule.predicate));
            }
            if rule.weight <= 0.0 {
                return Err(format!("rule '{}' weight must be positive", rule.predicate));
            }
            for set in [&rule.subject_categories, &rule.object_categories] {
                if set.iter().any(|&c| c >= self.category_count) {
                    return Err(format!(
                        "rule '{}' references a category >= category_count",
                        rule.predicate
                    ));
                }
            }
        }
        Ok(())
    }

    /// Mixed-property benchmark: one contact relation, one inverse pair
    /// of vertical relations, one symmetric proximity relation, one
    /// inverse pair of horizontal relations.
    pub fn standard(seed: u64) -> Self {
        GenConfig {
            scene_count: 200,
            entities_min: 5,
            entities_max: 8,
            category_count: 8,
            feature_dim: 8,
            rules: vec![
                // "on" and "attached_to" fire on the same contact
                // geometry; only the participating categories separate
                // them, so the relation must be read off the entities
                PredicateRule::new(
                    "on",
                    RuleKind::Asymmetric,
                    Trigger::AboveGap { min_gap: 0.0, max_gap: 0.02 },
                    1.0,
                )
                .with_categories(vec![0, 1, 2, 3], vec![4, 5, 6, 7]),
                PredicateRule::new(
                    "attached_to",
                    RuleKind::Asymmetric,
                    Trigger::AboveGap { min_gap: 0.0, max_gap: 0.02 },
                    1.0,
                )
                .with_categories(vec![4, 5, 6, 7], vec![0, 1, 2, 3]),
                PredicateRule::new(
                    "above",
                    RuleKind::InversePair { partner: "under".into() },
                    Trigger::AboveGap { min_gap: 0.06, max_gap: 0.4 },
                    1.0,
                ),
                PredicateRule::new("near", RuleKind::Symmetric, Trigger::Near { dist: 0.1 }, 1.0),
                PredicateRule::new(
                    "left_of",
                    RuleKind::InversePair { partner: "right_of".into() },
                    Trigger::LeftOf,
                    1.0,
                ),
            ],
            zipf_exponent: 0.0,
            seed,
        }
    }

    /// Single asymmetric geometric relation; used for the directional
    /// acceptance experiments.
    pub fn asymmetric_only(seed: u64) -> Self {
        GenConfig {
            rules: vec![PredicateRule::new(
                "above",
                RuleKind::Asymmetric,
                Trigger::AboveGap { min_gap: 0.02, max_gap: 0.5 },
                1.0,
            )],
            entities_min: 6,
            entities_max: 9,
            ..GenConfig::standard(seed)
        }
    }

    /// Vocabulary induced by the rule set: rule predicates in order,
    /// inverse partners appended after their primary.
    pub fn vocab(&self) -> Vocab {
        let mut predicates = Vec::new();
        let mut asymmetric = Vec::new();
        let mut symmetric = Vec::new();
        let mut inverse = Vec::new();
        for rule in &self.rules {
            let id = predicates.len();
            predicates.push(rule.predicate.clone());
            match &rule.kind {
                RuleKind::Asymmetric => asymmetric.push(id),
                RuleKind::Symmetric => symmetric.push(id),
                RuleKind::InversePair { partner } => {
                    predicates.push(partner.clone());
                    inverse.push((id, id + 1));
                }
            }
        }
        Vocab {
            categories: (0..self.category_count).map(|c| format!("class_{c}")).collect(),
            predicates,
            asymmetric,
            symmetric,
            inverse,
        }
    }

    fn rule_weights(&self) -> Vec<Real> {
        self.rules
            .iter()
            .enumerate()
            .map(|(rank, rule)| rule.weight * ((rank + 1) as Real).powf(-self.zipf_exponent))
            .collect()
    }
}

/// Deterministic feature vectors derived from scene content.
pub mod features {
    use super::*;

    fn rng_for(parts: &[u64]) -> ChaCha8Rng {
        let mut bytes = Vec::with_capacity(parts.len() * 8);
        for p in parts {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
    }

    pub fn scene_latent(scene_id: &str) -> u64 {
        fnv1a(scene_id.as_bytes())
    }

    pub fn entity_feature(latent: u64, category: usize, bbox: &BBox, dim: usize) -> Vec<Real> {
        let mut rng = rng_for(&[
            latent,
            category as u64,
            bbox.x1.to_bits(),
            bbox.y1.to_bits(),
            bbox.x2.to_bits(),
            bbox.y2.to_bits(),
        ]);
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Context feature for an entity pair: leading components carry the
    /// pair geometry (separation gaps, centre distance, containment,
    /// covering-box size), the rest is a seeded fingerprint of the pair.
    /// Every component is symmetric in the two boxes, so the feature
    /// describes the spatial configuration without revealing which
    /// entity plays which role.
    pub fn relation_feature(latent: u64, a: &BBox, b: &BBox, dim: usize) -> Vec<Real> {
        let (acx, acy) = ((a.x1 + a.x2) / 2.0, (a.y1 + a.y2) / 2.0);
        let (bcx, bcy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
        let x_gap = a.x1.max(b.x1) - a.x2.min(b.x2);
        let y_gap = a.y1.max(b.y1) - a.y2.min(b.y2);
        let contains = |outer: &BBox, inner: &BBox| {
            outer.x1 < inner.x1 && outer.y1 < inner.y1 && inner.x2 < outer.x2 && inner.y2 < outer.y2
        };
        let geo = [
            x_gap,
            y_gap,
            ((acx - bcx).powi(2) + (acy - bcy).powi(2)).sqrt(),
            (acx - bcx).abs(),
            (acy - bcy).abs(),
            if contains(a, b) || contains(b, a) { 1.0 } else { 0.0 },
            a.x2.max(b.x2) - a.x1.min(b.x1),
            a.y2.max(b.y2) - a.y1.min(b.y1),
        ];
        // order-invariant fingerprint key: hash both boxes, combine
        // commutatively
        let key = |bb: &BBox| {
            bb.x1.to_bits() ^ bb.y1.to_bits().rotate_left(17) ^ bb.x2.to_bits().rotate_left(34) ^ bb.y2.to_bits().rotate_left(51)
        };
        let (ka, kb) = (key(a), key(b));
        let mut rng = rng_for(&[latent ^ 0x9e3779b97f4a7c15, ka.min(kb), ka.max(kb)]);
        (0..dim)
            .map(|i| if i < geo.len() { geo[i] } else { rng.gen_range(-1.0..1.0) })
            .collect()
    }
}

struct Planned {
    subject: usize,
    object: usize,
    rule_idx: usize,
}

pub fn generate_dataset(cfg: &GenConfig) -> (Vec<Scene>, Vocab) {
    cfg.validate().expect("config validated upstream");
    let vocab = cfg.vocab();
    let weights = cfg.rule_weights();
    let predicate_id = |name: &str| vocab.predicates.iter().position(|p| p == name).unwrap();

    let scenes = (0..cfg.scene_count)
        .map(|idx| {
            let scene_id = format!("synth-{idx:06}");
            // per-scene derived seed keeps generation order-independent
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(scene_id.as_bytes()));
            generate_scene(cfg, &vocab, &weights, &predicate_id, scene_id, &mut rng)
        })
        .collect();
    (scenes, vocab)
}

fn generate_scene(
    cfg: &GenConfig,
    vocab: &Vocab,
    weights: &[Real],
    predicate_id: &impl Fn(&str) -> usize,
    scene_id: String,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let m = rng.gen_range(cfg.entities_min..=cfg.entities_max);
    let mut boxes: Vec<BBox> = vec![random_box(rng)];
    let mut cats: Vec<Option<usize>> = vec![None];
    let mut planned: Vec<Planned> = Vec::new();

    for t in 1..m {
        let mut placed = None;
        // the rule is fixed before the placement retries; resampling it
        // per attempt would skew predicate counts toward triggers that
        // are easier to place
        let rule_idx = sample_weighted(weights, rng);
        let rule = &cfg.rules[rule_idx];
        for _attempt in 0..60 {
            let partner = rng.gen_range(0..t);
            let new_is_subject = rng.gen_bool(0.5);
            // the partner takes the other role; an already fixed
            // category must satisfy the rule's constraint for it
            let partner_set =
                if new_is_subject { &rule.object_categories } else { &rule.subject_categories };
            if let Some(c) = cats[partner] {
                if !partner_set.is_empty() && !partner_set.contains(&c) {
                    continue;
                }
            }
            if let Some(candidate) =
                place_for_trigger(&rule.trigger, &boxes[partner], new_is_subject, rng)
            {
                // prefer placements without incidental trigger firings;
                // a rule sharing the planned trigger on the planned pair
                // is resolved by the category constraints, not noise
                let noisy = boxes.iter().enumerate().any(|(i, b)| {
                    cfg.rules.iter().any(|other| {
                        let intended = i == partner && other.trigger == rule.trigger;
                        !intended
                            && (other.trigger.holds(&candidate, b) || other.trigger.holds(b, &candidate))
                    })
                });
                if placed.is_none() || !noisy {
                    let (s, o) = if new_is_subject { (t, partner) } else { (partner, t) };
                    placed = Some((candidate, Planned { subject: s, object: o, rule_idx }));
                    if !noisy {
                        break;
                    }
                }
            }
        }
        let (bbox, plan) = placed.unwrap_or_else(|| {
            // fully constrained corner case; fall back to an unrelated box
            (random_box(rng), Planned { subject: t, object: 0, rule_idx: usize::MAX })
        });
        boxes.push(bbox);
        cats.push(None);
        if plan.rule_idx != usize::MAX {
            let rule = &cfg.rules[plan.rule_idx];
            assign_category(&mut cats, plan.subject, &rule.subject_categories, cfg, rng);
            assign_category(&mut cats, plan.object, &rule.object_categories, cfg, rng);
            planned.push(plan);
        }
    }

    let mut triples = BTreeSet::new();
    for plan in &planned {
        let rule = &cfg.rules[plan.rule_idx];
        let p = predicate_id(&rule.predicate);
        triples.insert(Triple::new(plan.subject, p, plan.object));
        match &rule.kind {
            RuleKind::Asymmetric => {}
            RuleKind::Symmetric => {
                triples.insert(Triple::new(plan.object, p, plan.subject));
            }
            RuleKind::InversePair { partner } => {
                triples.insert(Triple::new(plan.object, predicate_id(partner), plan.subject));
            }
        }
    }

    let latent = features::scene_latent(&scene_id);
    let entities = boxes
        .into_iter()
        .zip(cats)
        .map(|(bbox, cat)| {
            let category_id = cat.unwrap_or_else(|| rng.gen_range(0..cfg.category_count));
            let feature = features::entity_feature(latent, category_id, &bbox, cfg.feature_dim);
            Entity { category_id, bbox, feature: Some(feature) }
        })
        .collect();

    let scene = Scene {
        scene_id,
        entities,
        gt_triples: triples.into_iter().collect(),
    };
    debug_assert!(scene.validate(vocab, Some(cfg.feature_dim)).is_ok());
    scene
}

/// Fixes an entity's category the first time a rule constrains it;
/// unconstrained slots stay open until scene finalisation.
fn assign_category(
    cats: &mut [Option<usize>],
    idx: usize,
    allowed: &[usize],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) {
    if cats[idx].is_none() {
        cats[idx] = Some(if allowed.is_empty() {
            rng.gen_range(0..cfg.category_count)
        } else {
            allowed[rng.gen_range(0..allowed.len())]
        });
    }
}

fn sample_weighted(weights: &[Real], rng: &mut ChaCha8Rng) -> usize {
    let total: Real = weights.iter().sum();
    let mut target = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.05..0.25);
    let h = rng.gen_range(0.05..0.25);
    let x1 = rng.gen_range(0.0..1.0 - w);
    let y1 = rng.gen_range(0.0..1.0 - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Samples a box for the new entity such that the trigger holds between
/// subject and object, where the anchor plays the other role.
fn place_for_trigger(
    trigger: &Trigger,
    anchor: &BBox,
    new_is_subject: bool,
    rng: &mut ChaCha8Rng,
) -> Option<BBox> {
    for _ in 0..20 {
        let candidate = match *trigger {
            Trigger::AboveGap { min_gap, max_gap } => {
                let w = rng.gen_range(0.05..0.25);
                let h = rng.gen_range(0.05..0.2);
                let gap = rng.gen_range(min_gap..=(min_gap + (max_gap - min_gap).min(0.15)).max(min_gap + 1e-3));
                // overlap in x with the anchor
                let x1 = rng.gen_range((anchor.x1 - w * 0.8).max(0.0)..(anchor.x2 - 0.2 * w).min(1.0 - w));
                if new_is_subject {
                    // new box above the anchor
                    let y2 = anchor.y1 - gap;
                    if y2 - h < 0.0 {
                        continue;
                    }
                    BBox::new(x1, y2 - h, x1 + w, y2)
                } else {
                    let y1 = anchor.y2 + gap;
                    if y1 + h > 1.0 {
                        continue;
                    }
                    BBox::new(x1, y1, x1 + w, y1 + h)
                }
            }
            Trigger::LeftOf => {
                let w = rng.gen_range(0.05..0.2);
                let h = rng.gen_range(0.05..0.25);
                let gap = rng.gen_range(0.01..0.2);
                let y1 = rng.gen_range((anchor.y1 - h * 0.8).max(0.0)..(anchor.y2 - 0.2 * h).min(1.0 - h));
                if new_is_subject {
                    let x2 = anchor.x1 - gap;
                    if x2 - w < 0.0 {
                        continue;
                    }
                    BBox::new(x2 - w, y1, x2, y1 + h)
                } else {
                    let x1 = anchor.x2 + gap;
                    if x1 + w > 1.0 {
                        continue;
                    }
                    BBox::new(x1, y1, x1 + w, y1 + h)
                }
            }
            Trigger::Near { dist } => {
                let w = rng.gen_range(0.05..0.2);
                let h = rng.gen_range(0.05..0.2);
                let (acx, acy) = anchor.center();
                let r = rng.gen_range(0.0..dist * 0.95);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let cx = acx + r * angle.cos();
                let cy = acy + r * angle.sin();
                let x1 = cx - w / 2.0;
                let y1 = cy - h / 2.0;
                if x1 < 0.0 || y1 < 0.0 || x1 + w > 1.0 || y1 + h > 1.0 {
                    continue;
                }
                BBox::new(x1, y1, x1 + w, y1 + h)
            }
            Trigger::Inside => {
                if new_is_subject {
                    // new box strictly inside the anchor
                    let aw = anchor.x2 - anchor.x1;
                    let ah = anchor.y2 - anchor.y1;
                    if aw < 0.04 || ah < 0.04 {
                        return None;
                    }
                    let w = rng.gen_range(aw * 0.2..aw * 0.7);
                    let h = rng.gen_range(ah * 0.2..ah * 0.7);
                    let x1 = rng.gen_range(anchor.x1 + 0.005..anchor.x2 - w - 0.005);
                    let y1 = rng.gen_range(anchor.y1 + 0.005..anchor.y2 - h - 0.005);
                    BBox::new(x1, y1, x1 + w, y1 + h)
                } else {
                    // new box strictly containing the anchor
                    let pad_l = rng.gen_range(0.01..0.08);
                    let pad_t = rng.gen_range(0.01..0.08);
                    let pad_r = rng.gen_range(0.01..0.08);
                    let pad_b = rng.gen_range(0.01..0.08);
                    let b = BBox::new(
                        anchor.x1 - pad_l,
                        anchor.y1 - pad_t,
                        anchor.x2 + pad_r,
                        anchor.y2 + pad_b,
                    );
                    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > 1.0 || b.y2 > 1.0 {
                        continue;
                    }
                    b
                }
            }
        };
        if candidate.is_valid() {
            let (s, o) = if new_is_subject { (&candidate, anchor) } else { (anchor, &candidate) };
            if trigger.holds(s, o) {
                return Some(candidate);
            }
        }
    }
    None
}

/// Brute-force scan asserting the property-group closure of a dataset;
/// used by tests and kept here so external callers can sanity-check
/// generated or augmented data.
pub fn check_property_consistency(scenes: &[Scene], vocab: &Vocab) -> Result<(), String> {
    for scene in scenes {
        let set: BTreeSet<&Triple> = scene.gt_triples.iter().collect();
        for t in &scene.gt_triples {
            if vocab.symmetric.contains(&t.predicate)
                && !set.contains(&Triple::new(t.object, t.predicate, t.subject))
            {
                return Err(format!("{}: symmetric triple {:?} lacks its reverse", scene.scene_id, t));
            }
            if vocab.asymmetric.contains(&t.predicate)
                && set.contains(&Triple::new(t.object, t.predicate, t.subject))
            {
                return Err(format!("{}: asymmetric triple {:?} co-occurs with its reverse", scene.scene_id, t));
            }
            if let Some(q) = vocab.inverse_of(t.predicate) {
                if !set.contains(&Triple::new(t.object, q, t.subject)) {
                    return Err(format!("{}: inverse triple {:?} lacks its partner", scene.scene_id, t));
                }
            }
        }
    }
    Ok(())
}
