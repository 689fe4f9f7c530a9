//! Pseudo-siamese entity embedding, semantic connection strength,
//! semantic connection loss, and top-N pair proposal.
//!
//! Every entity gets two independent embeddings: a subject vector from
//! the θ branch and an object vector from the τ branch. The connection
//! head maps an ordered pair of embeddings to a strength in [−1, 1];
//! nothing forces `sc[i][j] == sc[j][i]`, which is the point. A
//! symmetric-constrained variant (shared branch, order-invariant pair
//! encoding) is provided for the bias experiments.

use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

use crate::nnet::{Activation, NnetError, Trace};
use crate::scenedata::{RunConfig, Scene};
use crate::{Mlp, Real};

/// Keeps the log arguments of the connection loss strictly positive.
pub const SC_CLAMP: Real = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct PairnetParams {
    pub theta: Mlp,
    pub tau: Mlp,
    pub head: Mlp,
}

impl PairnetParams {
    /// Branch input is `one-hot class ++ bbox ++ feature`; head input is
    /// the concatenated (or symmetric-encoded) embedding pair.
    pub fn init<R: Rng>(cfg: &RunConfig, category_count: usize, rng: &mut R) -> Self {
        let in_dim = category_count + 4 + cfg.feature_dim;
        let mut branch_dims = vec![in_dim];
        branch_dims.extend(&cfg.branch_hidden);
        branch_dims.push(cfg.embed_dim);
        let mut branch_acts = vec![Activation::Relu; cfg.branch_hidden.len()];
        branch_acts.push(Activation::Identity);

        let mut head_dims = vec![2 * cfg.embed_dim];
        head_dims.extend(&cfg.head_hidden);
        head_dims.push(1);
        let mut head_acts = vec![Activation::Relu; cfg.head_hidden.len()];
        head_acts.push(Activation::Tanh);

        PairnetParams {
            theta: Mlp::init(&branch_dims, &branch_acts, rng),
            tau: Mlp::init(&branch_dims, &branch_acts, rng),
            head: Mlp::init(&head_dims, &head_acts, rng),
        }
    }
}

/// Per-entity subject (θ) and object (τ) vectors, m × D each.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddings {
    pub theta: Vec<Vec<Real>>,
    pub tau: Vec<Vec<Real>>,
}

/// Branch forward traces kept for backpropagation.
pub struct BranchTraces {
    pub theta: Vec<Trace<Real>>,
    pub tau: Vec<Trace<Real>>,
}

/// Builds the branch input vector for one entity.
pub fn entity_input(class_vector: &[Real], scene: &Scene, idx: usize, feature: &[Real]) -> Vec<Real> {
    let e = &scene.entities[idx];
    let mut input = Vec::with_capacity(class_vector.len() + 4 + feature.len());
    input.extend_from_slice(class_vector);
    input.extend_from_slice(&[e.bbox.x1, e.bbox.y1, e.bbox.x2, e.bbox.y2]);
    input.extend_from_slice(feature);
    input
}

/// One-hot class vectors for the PredCls regime.
pub fn one_hot_classes(scene: &Scene, category_count: usize) -> Vec<Vec<Real>> {
    scene
        .entities
        .iter()
        .map(|e| {
            let mut v = vec![0.0; category_count];
            v[e.category_id] = 1.0;
            v
        })
        .collect()
}

pub fn embed_entities(
    params: &PairnetParams,
    inputs: &[Vec<Real>],
    symmetric: bool,
) -> Result<EntityEmbeddings, NnetError> {
    Ok(embed_entities_traced(params, inputs, symmetric)?.0)
}

/// Traced variant used in training. In symmetric mode the τ branch is
/// replaced by the θ branch, making the two embeddings identical.
pub fn embed_entities_traced(
    params: &PairnetParams,
    inputs: &[Vec<Real>],
    symmetric: bool,
) -> Result<(EntityEmbeddings, BranchTraces), NnetError> {
    let mut theta = Vec::with_capacity(inputs.len());
    let mut tau = Vec::with_capacity(inputs.len());
    let mut theta_tr = Vec::with_capacity(inputs.len());
    let mut tau_tr = Vec::with_capacity(inputs.len());
    for input in inputs {
        let t = params.theta.forward_trace(input)?;
        theta.push(t.output().to_vec());
        theta_tr.push(t);
        if symmetric {
            tau.push(theta.last().unwrap().clone());
        } else {
            let t = params.tau.forward_trace(input)?;
            tau.push(t.output().to_vec());
            tau_tr.push(t);
        }
    }
    Ok((
        EntityEmbeddings { theta, tau },
        BranchTraces { theta: theta_tr, tau: tau_tr },
    ))
}

/// Head input for the ordered pair (subject `a`, object `b`). The
/// symmetric encoding `(a+b, |a−b|)` is order-invariant by construction.
pub fn pair_encoding(a: &[Real], b: &[Real], symmetric: bool) -> Vec<Real> {
    if symmetric {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| x + y)
            .chain(a.iter().zip(b).map(|(&x, &y)| (x - y).abs()))
            .collect()
    } else {
        a.iter().chain(b.iter()).copied().collect()
    }
}

/// Splits the gradient w.r.t. the pair encoding back onto the two
/// embeddings.
pub fn pair_encoding_backward(
    a: &[Real],
    b: &[Real],
    grad: &[Real],
    symmetric: bool,
) -> (Vec<Real>, Vec<Real>) {
    let d = a.len();
    if symmetric {
        let (gs, gd) = grad.split_at(d);
        let mut ga = vec![0.0; d];
        let mut gb = vec![0.0; d];
        for i in 0..d {
            let sign = (a[i] - b[i]).signum();
            let sign = if a[i] == b[i] { 0.0 } else { sign };
            ga[i] = gs[i] + sign * gd[i];
            gb[i] = gs[i] - sign * gd[i];
        }
        (ga, gb)
    } else {
        let (ga, gb) = grad.split_at(d);
        (ga.to_vec(), gb.to_vec())
    }
}

/// m × m semantic connection strengths, all in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreMatrix {
    pub m: usize,
    values: Vec<Real>,
}

impl PairScoreMatrix {
    pub fn new(m: usize, values: Vec<Real>) -> Self {
        assert_eq!(values.len(), m * m);
        PairScoreMatrix { m, values }
    }

    pub fn get(&self, i: usize, j: usize) -> Real {
        self.values[i * self.m + j]
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }
}

pub fn semantic_connection(
    emb: &EntityEmbeddings,
    head: &Mlp,
    symmetric: bool,
) -> Result<PairScoreMatrix, NnetError> {
    Ok(semantic_connection_traced(emb, head, symmetric)?.0)
}

/// Computes the full ordered-pair matrix, diagonal included, keeping the
/// head traces for backpropagation.
pub fn semantic_connection_traced(
    emb: &EntityEmbeddings,
    head: &Mlp,
    symmetric: bool,
) -> Result<(PairScoreMatrix, Vec<Trace<Real>>), NnetError> {
    let m = emb.theta.len();
    let mut values = Vec::with_capacity(m * m);
    let mut traces = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let input = pair_encoding(&emb.theta[i], &emb.tau[j], symmetric);
            let trace = head.forward_trace(&input)?;
            values.push(trace.output()[0]);
            traces.push(trace);
        }
    }
    Ok((PairScoreMatrix::new(m, values), traces))
}

/// Ground-truth index sets for one scene: `I_t`, the per-pair relation
/// sets `R_{i,j}`, and the total relation count `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTargets {
    pub m: usize,
    pub i_t: BTreeSet<(usize, usize)>,
    pub relations: BTreeMap<(usize, usize), Vec<usize>>,
    pub r: usize,
}

impl TrainingTargets {
    pub fn from_scene(scene: &Scene) -> Self {
        let mut relations: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in &scene.gt_triples {
            relations.entry((t.subject, t.object)).or_default().push(t.predicate);
        }
        for preds in relations.values_mut() {
            preds.sort_unstable();
        }
        let i_t: BTreeSet<_> = relations.keys().copied().collect();
        let r = relations.values().map(Vec::len).sum();
        TrainingTargets { m: scene.entities.len(), i_t, relations, r }
    }
}

/// The connection loss with its weight matrix; `lambda_sum` is 2 for any
/// scene with at least one related pair (1 from the 1/m² terms plus 1
/// from the |I_t| reward terms).
#[derive(Debug, Clone)]
pub struct ConnectionLossBreakdown {
    pub loss: Real,
    pub lambda: Vec<Real>,
    pub lambda_sum: Real,
    pub reward_dropped: bool,
}

fn clamp_sc(sc: Real) -> Real {
    sc.clamp(-1.0 + SC_CLAMP, 1.0 - SC_CLAMP)
}

pub fn connection_loss(sc: &PairScoreMatrix, targets: &TrainingTargets) -> ConnectionLossBreakdown {
    let m = sc.m;
    assert_eq!(m, targets.m, "targets built for a different scene");
    let mm = (m * m) as Real;
    let reward_dropped = targets.i_t.is_empty();
    let mut loss = 0.0;
    let mut lambda = Vec::with_capacity(m * m);
    let mut lambda_sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            let in_t = targets.i_t.contains(&(i, j));
            let mut weight = 1.0 / mm;
            if in_t {
                weight += 1.0 / targets.i_t.len() as Real;
            }
            let s = clamp_sc(sc.get(i, j));
            let arg = if in_t { (1.0 + s) / 2.0 } else { (1.0 - s) / 2.0 };
            loss += -weight * arg.ln();
            lambda.push(weight);
            lambda_sum += weight;
        }
    }
    ConnectionLossBreakdown { loss, lambda, lambda_sum, reward_dropped }
}

/// dL_sc/dsc for every ordered pair (row-major m × m).
pub fn connection_loss_grad(sc: &PairScoreMatrix, targets: &TrainingTargets) -> Vec<Real> {
    let m = sc.m;
    let mm = (m * m) as Real;
    let mut grad = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let in_t = targets.i_t.contains(&(i, j));
            let mut weight = 1.0 / mm;
            if in_t {
                weight += 1.0 / targets.i_t.len() as Real;
            }
            let s = clamp_sc(sc.get(i, j));
            // d/ds of −λ·ln((1±s)/2)
            let g = if in_t { -weight / (1.0 + s) } else { weight / (1.0 - s) };
            grad.push(g);
        }
    }
    grad
}

/// Top-N ordered pairs by connection strength, diagonal excluded, ties
/// broken by ascending (i, j).
pub fn select_top_pairs(sc: &PairScoreMatrix, n: usize) -> Vec<(usize, usize)> {
    assert!(n >= 1);
    let m = sc.m;
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .collect();
    pairs.sort_by(|&a, &b| {
        sc.get(b.0, b.1)
            .partial_cmp(&sc.get(a.0, a.1))
            .expect("sc values are finite")
            .then(a.cmp(&b))
    });
    pairs.truncate(n);
    pairs
}
