//! Relation-score computation and deterministic top-k triple ranking —
//! the inference path.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::pairnet::{self, PairnetParams};
use crate::relnet::{self, FeatureProvider, ModelError, ModelParams, RelationPrediction, RelnetParams, Result};
use crate::scenedata::{RunConfig, Scene, Vocab};
use crate::Real;

/// A candidate triple with its score and the scalars it was computed
/// from; `rs = sc + β·rp²·rc` is reproducible from the provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriple {
    pub s: usize,
    pub o: usize,
    pub p: usize,
    pub rs: Real,
    pub sc: Real,
    pub rp: Real,
    pub rc: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPredictions {
    pub scene_id: String,
    pub triples: Vec<ScoredTriple>,
}

/// Relation score of one candidate. The `use_rp` switch implements the
/// w/o-RP ablation, which drops the rp² factor.
pub fn relation_score(sc: Real, rp: Real, rc_k: Real, beta: Real, use_rp: bool) -> Real {
    if use_rp {
        sc + beta * rp * rp * rc_k
    } else {
        sc + beta * rc_k
    }
}

/// Total order: rs descending, then (s, o, p) ascending. Deterministic
/// under score ties.
fn triple_order(a: &ScoredTriple, b: &ScoredTriple) -> Ordering {
    b.rs
        .partial_cmp(&a.rs)
        .expect("relation scores are finite")
        .then((a.s, a.o, a.p).cmp(&(b.s, b.o, b.p)))
}

/// Scores every (pair × predicate) candidate, sorts by the total order,
/// and truncates to `k`.
pub fn rank_triples(
    scene_id: &str,
    pairs: &[(usize, usize)],
    sc_values: &[Real],
    preds: &[RelationPrediction],
    beta: Real,
    use_rp: bool,
    k: usize,
) -> RankedPredictions {
    assert_eq!(pairs.len(), preds.len());
    assert_eq!(pairs.len(), sc_values.len());
    let mut triples: Vec<ScoredTriple> = Vec::with_capacity(pairs.len() * preds.first().map_or(0, |p| p.rc.len()));
    for ((&(i, j), pred), &sc) in pairs.iter().zip(preds).zip(sc_values) {
        for (p, &rc_k) in pred.rc.iter().enumerate() {
            triples.push(ScoredTriple {
                s: i,
                o: j,
                p,
                rs: relation_score(sc, pred.rp, rc_k, beta, use_rp),
                sc,
                rp: pred.rp,
                rc: rc_k,
            });
        }
    }
    triples.sort_by(triple_order);
    triples.truncate(k);
    RankedPredictions { scene_id: scene_id.to_string(), triples }
}

/// Full inference for one scene: embed, score pairs, propose top-N,
/// predict relations, rank.
pub fn predict_scene(
    model: &ModelParams,
    cfg: &RunConfig,
    scene: &Scene,
    vocab: &Vocab,
    provider: &dyn FeatureProvider,
    k: usize,
) -> Result<RankedPredictions> {
    let pairnet_params = PairnetParams {
        theta: model.theta.clone(),
        tau: model.tau.clone(),
        head: model.conn_head.clone(),
    };
    let relnet_params = RelnetParams {
        trunk: model.trunk.clone(),
        rp_head: model.rp_head.clone(),
        rc_head: model.rc_head.clone(),
    };
    let classes = pairnet::one_hot_classes(scene, vocab.categories.len());
    let inputs: Vec<Vec<Real>> = (0..scene.entities.len())
        .map(|i| {
            let f = provider.entity_feature(scene, i)?;
            Ok(pairnet::entity_input(&classes[i], scene, i, &f))
        })
        .collect::<Result<_>>()?;
    let emb = pairnet::embed_entities(&pairnet_params, &inputs, cfg.symmetric_scorer)?;
    let sc = pairnet::semantic_connection(&emb, &pairnet_params.head, cfg.symmetric_scorer)?;
    let pairs = pairnet::select_top_pairs(&sc, cfg.top_n);
    let preds = relnet::predict_relations(&relnet_params, cfg, scene, &pairs, &emb, provider)?;
    let sc_values: Vec<Real> = pairs.iter().map(|&(i, j)| sc.get(i, j)).collect();
    Ok(rank_triples(&scene.scene_id, &pairs, &sc_values, &preds, cfg.beta, cfg.use_relation_possibility, k))
}

/// Frequency-prior baseline: identical pair scoring and proposals, but
/// the class distribution is replaced by the global predicate frequency
/// of the reference dataset. Used to quantify the fairness gap.
pub fn predict_scene_frequency_prior(
    model: &ModelParams,
    cfg: &RunConfig,
    scene: &Scene,
    vocab: &Vocab,
    provider: &dyn FeatureProvider,
    predicate_freq: &[Real],
    k: usize,
) -> Result<RankedPredictions> {
    let mut ranked = predict_scene(model, cfg, scene, vocab, provider, usize::MAX)?;
    let total: Real = predicate_freq.iter().sum();
    if total <= 0.0 {
        return Err(ModelError::Config("empty predicate frequency table".into()));
    }
    for t in &mut ranked.triples {
        t.rc = predicate_freq[t.p] / total;
        t.rs = relation_score(t.sc, t.rp, t.rc, cfg.beta, cfg.use_relation_possibility);
    }
    ranked.triples.sort_by(triple_order);
    ranked.triples.truncate(k);
    Ok(ranked)
}

/// Global predicate counts over a dataset's ground truth.
pub fn predicate_frequencies(scenes: &[Scene], predicate_count: usize) -> Vec<Real> {
    let mut freq = vec![0.0; predicate_count];
    for t in scenes.iter().flat_map(|s| &s.gt_triples) {
        freq[t.predicate] += 1.0;
    }
    freq
}

// ---------------------------------------------------------------------------
// Predictions file (JSON lines, one scene per line, triples in rank order)
// ---------------------------------------------------------------------------

pub fn save_predictions(preds: &[RankedPredictions], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| ModelError::Provider(format!("write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("predictions serialize");
        writeln!(w, "{line}").map_err(|e| ModelError::Provider(format!("write {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| ModelError::Provider(format!("write {}: {e}", path.display())))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<RankedPredictions>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| ModelError::Provider(format!("read {}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|(idx, line)| {
            let line = line.map_err(|e| ModelError::Provider(format!("read {}: {e}", path.display())))?;
            serde_json::from_str(&line)
                .map_err(|e| ModelError::Provider(format!("{}: line {}: {e}", path.display(), idx + 1)))
        })
        .collect()
}
