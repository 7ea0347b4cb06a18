//! Non-MAML few-shot classifiers over latent traces, and the catalogue of
//! comparison pipelines (representation ablations and alternative
//! meta-learner bodies).

use std::fmt;
use std::str::FromStr;

use crate::attention::{multihead_on, AttentionParams};
use crate::autograd::{Graph, Matrix, Var};
use crate::episodes::{Episode, SupportSet};
use crate::error::{Error, Result};
use crate::featurize::FeaturizedTrace;
use crate::fusion_ae::{encode_span_only, AEParams, FusionVariant, LatentTrace};
use crate::params::{AdamW, BoundParams, ParamSet};
use crate::rng;
use crate::te_maml::learner::argmax_rows;
use crate::te_maml::{Batch, Body, EpisodeTask};

/// A classifier fitted on one support set at a time.
pub trait EpisodicClassifier {
    fn fit(&mut self, support: &SupportSet) -> Result<()>;

    fn predict(&self, z: &[f64]) -> Result<usize>;

    fn predict_many(&self, queries: &Matrix) -> Result<Vec<usize>> {
        queries
            .rows()
            .into_iter()
            .map(|row| self.predict(row.as_slice().expect("standard layout")))
            .collect()
    }
}

fn not_fitted() -> Error {
    Error::Config("predict called before fit".into())
}

/// Fit on the episode's support set and score the query set.
pub fn episode_accuracy(clf: &mut dyn EpisodicClassifier, episode: &Episode) -> Result<f64> {
    clf.fit(&episode.support)?;
    let preds = clf.predict_many(&episode.query.matrix())?;
    let labels = episode.query.labels();
    if labels.is_empty() {
        return Err(Error::Sampling(format!("episode {} has an empty query set", episode.task_id)));
    }
    let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the smallest `(distance, class)` pair; equal distances go to
/// the lower class.
fn closest<'a>(candidates: impl Iterator<Item = (f64, usize)> + 'a) -> Option<usize> {
    candidates
        .fold(None, |best: Option<(f64, usize)>, (d, c)| match best {
            Some((bd, bc)) if bd < d || (bd == d && bc <= c) => Some((bd, bc)),
            _ => Some((d, c)),
        })
        .map(|(_, c)| c)
}

/// Prototype (class mean) classifier under squared Euclidean distance.
#[derive(Clone, Debug, Default)]
pub struct ProtoNet {
    prototypes: Option<Vec<Option<Vec<f64>>>>,
}

impl ProtoNet {
    pub fn prototypes(&self) -> Option<&[Option<Vec<f64>>]> {
        self.prototypes.as_deref()
    }
}

impl EpisodicClassifier for ProtoNet {
    fn fit(&mut self, support: &SupportSet) -> Result<()> {
        let d = support.items.first().map_or(0, |(z, _)| z.z.len());
        let mut sums = vec![(vec![0.0; d], 0usize); support.way];
        for (z, y) in &support.items {
            let (sum, n) = sums.get_mut(*y).ok_or_else(|| Error::shape("support label", support.way, y))?;
            sum.iter_mut().zip(&z.z).for_each(|(s, v)| *s += v);
            *n += 1;
        }
        self.prototypes = Some(
            sums.into_iter()
                .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        );
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        let protos = self.prototypes.as_ref().ok_or_else(not_fitted)?;
        closest(
            protos
                .iter()
                .enumerate()
                .filter_map(|(c, p)| p.as_ref().map(|p| (squared_distance(p, z), c))),
        )
        .ok_or_else(|| Error::Sampling("support set is empty".into()))
    }
}

pub fn protonet_predict(support: &SupportSet, z: &[f64]) -> Result<usize> {
    let mut p = ProtoNet::default();
    p.fit(support)?;
    p.predict(z)
}

/// 1-nearest-neighbour under Euclidean distance.
#[derive(Clone, Debug, Default)]
pub struct NearNeighbor {
    support: Option<Vec<(Vec<f64>, usize)>>,
}

impl EpisodicClassifier for NearNeighbor {
    fn fit(&mut self, support: &SupportSet) -> Result<()> {
        self.support = Some(support.items.iter().map(|(z, y)| (z.z.clone(), *y)).collect());
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        let support = self.support.as_ref().ok_or_else(not_fitted)?;
        closest(support.iter().map(|(s, y)| (squared_distance(s, z), *y)))
            .ok_or_else(|| Error::Sampling("support set is empty".into()))
    }
}

pub fn nearneighbor_predict(support: &SupportSet, z: &[f64]) -> Result<usize> {
    let mut n = NearNeighbor::default();
    n.fit(support)?;
    n.predict(z)
}

#[derive(Clone, Debug, PartialEq)]
enum TreeNode {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |(bc, bn), (c, &n)| if n > bn { (c, n) } else { (bc, bn) })
        .0
}

/// CART with Gini impurity and no depth limit. Among equally good splits
/// the lowest feature index wins, then the lowest midpoint threshold.
#[derive(Clone, Debug, Default)]
pub struct DecisionTree {
    root: Option<TreeNode>,
}

impl DecisionTree {
    fn grow(rows: &[(&[f64], usize)], n_classes: usize) -> TreeNode {
        let mut counts = vec![0usize; n_classes];
        rows.iter().for_each(|(_, y)| counts[*y] += 1);
        if counts.iter().filter(|&&c| c > 0).count() <= 1 {
            return TreeNode::Leaf(majority(&counts));
        }
        let n = rows.len();
        let d = rows[0].0.len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..d {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rows[a].0[f].total_cmp(&rows[b].0[f]));
            let mut left = vec![0usize; n_classes];
            for k in 0..n - 1 {
                left[rows[order[k]].1] += 1;
                let (lo, hi) = (rows[order[k]].0[f], rows[order[k + 1]].0[f]);
                if lo == hi {
                    continue;
                }
                let right: Vec<usize> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
                let (nl, nr) = (k + 1, n - k - 1);
                let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, f, (lo + hi) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf(majority(&counts));
        };
        let (l, r): (Vec<_>, Vec<_>) = rows.iter().partition(|(x, _)| x[feature] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(Self::grow(&l, n_classes)),
            right: Box::new(Self::grow(&r, n_classes)),
        }
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + depth(left).max(depth(right)),
            }
        }
        self.root.as_ref().map_or(0, depth)
    }
}

impl EpisodicClassifier for DecisionTree {
    fn fit(&mut self, support: &SupportSet) -> Result<()> {
        if support.items.is_empty() {
            return Err(Error::Sampling("support set is empty".into()));
        }
        let n_classes = support.items.iter().map(|(_, y)| y + 1).max().unwrap_or(1).max(support.way);
        let rows: Vec<(&[f64], usize)> = support.items.iter().map(|(z, y)| (z.z.as_slice(), *y)).collect();
        self.root = Some(Self::grow(&rows, n_classes));
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        let mut node = self.root.as_ref().ok_or_else(not_fitted)?;
        loop {
            match node {
                TreeNode::Leaf(c) => return Ok(*c),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if z[*feature] <= *threshold { left } else { right },
            }
        }
    }
}

pub fn decisiontree_fit_predict(episode: &Episode) -> Result<f64> {
    episode_accuracy(&mut DecisionTree::default(), episode)
}

const MATCH_ATTN: &str = "match.attn";

/// Matching network over transformer-contextualized embeddings: every
/// latent is replaced by `z + MultiHead(Z, Z, Z)` over the episode (query
/// rows see the support rows and themselves), and a query is assigned the
/// class with the largest summed softmax-of-cosine attention.
#[derive(Clone, Debug, Default)]
pub struct MatchingNet {
    /// `None` embeds each latent as itself.
    embedder: Option<(ParamSet, usize)>,
    support: Option<(Matrix, Vec<usize>, usize)>,
}

impl MatchingNet {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with_attention(params: &AttentionParams) -> Self {
        let mut ps = ParamSet::new();
        params.insert_into(MATCH_ATTN, &mut ps);
        Self {
            embedder: Some((ps, params.n_heads())),
            support: None,
        }
    }

    pub fn attention(&self) -> Option<AttentionParams> {
        self.embedder
            .as_ref()
            .map(|(ps, h)| AttentionParams::from_params(MATCH_ATTN, ps, *h).expect("own tensors"))
    }

    /// Class scores `[n_query × way]` on the tape.
    fn scores_on(
        g: &mut Graph,
        embedder: Option<(&BoundParams, usize)>,
        support: &Matrix,
        labels: &[usize],
        way: usize,
        queries: &Matrix,
    ) -> Var {
        let batch = Batch::query(support, queries, Vec::new());
        let x = g.leaf(batch.x.clone());
        let e = match embedder {
            None => x,
            Some((bound, heads)) => {
                let mask = batch.attention_mask();
                let ctx = multihead_on(g, x, x, x, bound, MATCH_ATTN, heads, mask.as_ref());
                g.add(x, ctx)
            }
        };
        let n_s = support.nrows();
        let e = g.l2_normalize_rows(e);
        let es = g.slice_rows(e, 0, n_s);
        let eq = g.slice_rows(e, n_s, batch.x.nrows());
        let est = g.transpose(es);
        let cos = g.matmul(eq, est);
        let att = g.softmax(cos, None);
        let onehot = g.leaf(Matrix::from_shape_fn((n_s, way), |(i, c)| f64::from(labels[i] == c)));
        g.matmul(att, onehot)
    }
}

impl EpisodicClassifier for MatchingNet {
    fn fit(&mut self, support: &SupportSet) -> Result<()> {
        if support.items.is_empty() {
            return Err(Error::Sampling("support set is empty".into()));
        }
        self.support = Some((support.matrix(), support.labels(), support.way));
        Ok(())
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        let q = Matrix::from_shape_vec((1, z.len()), z.to_vec()).expect("row vector");
        Ok(self.predict_many(&q)?[0])
    }

    fn predict_many(&self, queries: &Matrix) -> Result<Vec<usize>> {
        let (s, labels, way) = self.support.as_ref().ok_or_else(not_fitted)?;
        if queries.ncols() != s.ncols() {
            return Err(Error::shape("matching query width", s.ncols(), queries.ncols()));
        }
        let mut g = Graph::new();
        let bound = self.embedder.as_ref().map(|(p, h)| (p.bind(&mut g), *h));
        let emb = bound.as_ref().map(|(b, h)| (b, *h));
        let scores = Self::scores_on(&mut g, emb, s, labels, *way, queries);
        Ok(argmax_rows(g.value(scores)))
    }
}

pub fn matchingnet_predict(support: &SupportSet, z: &[f64], embed: Option<&AttentionParams>) -> Result<usize> {
    let mut m = embed.map_or_else(MatchingNet::identity, MatchingNet::with_attention);
    m.fit(support)?;
    m.predict(z)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingTrainConfig {
    pub n_heads: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MatchingTrainConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            iterations: 100,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Train the contextualizing attention on meta-training episodes by
/// minimizing summed query cross-entropy of the matching rule.
pub fn train_matchingnet(tasks: &[EpisodeTask], cfg: &MatchingTrainConfig) -> Result<MatchingNet> {
    let first = tasks.first().ok_or_else(|| Error::Config("no training episodes".into()))?;
    let d = first.support.x.ncols();
    let attn = AttentionParams::init(d, cfg.n_heads, &mut rng::stream(cfg.seed, "matching.init", 0))?;
    let mut ps = ParamSet::new();
    attn.insert_into(MATCH_ATTN, &mut ps);
    let mut opt = AdamW::new(cfg.learning_rate, 0.0);
    for it in 0..cfg.iterations {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let mut total: Option<Var> = None;
        for task in tasks {
            let n_s = task.support.x.nrows();
            let queries = task.query.x.slice(ndarray::s![n_s.., ..]).to_owned();
            let way = task.support.labels.iter().max().map_or(1, |m| m + 1);
            let scores = MatchingNet::scores_on(
                &mut g,
                Some((&bound, cfg.n_heads)),
                &task.support.x,
                &task.support.labels,
                way,
                &queries,
            );
            let logp = g.ln(scores);
            let loss = g.cross_entropy(logp, &task.query.labels);
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss),
            });
        }
        let total = total.expect("at least one task");
        if !g.scalar(total).is_finite() {
            return Err(Error::divergence(format!("matching network loss at iteration {it}")));
        }
        let grads = bound.grads(&g.backward(total));
        opt.step(&mut ps, &grads);
    }
    let attn = AttentionParams::from_params(MATCH_ATTN, &ps, cfg.n_heads)?;
    Ok(MatchingNet::with_attention(&attn))
}

/// Span-only representation fed to the meta-learner in the ablation.
pub fn onlyspan_pipeline(ft: &FeaturizedTrace, params: &AEParams) -> Result<LatentTrace> {
    encode_span_only(ft, params)
}

/// Every comparison pipeline selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Baseline {
    OnlySpan,
    LinearAe,
    GluAe,
    ProtoNet,
    MatchingNet,
    NearNeighbor,
    DecisionTree,
    LinearMaml,
    RnnMaml,
    LstmMaml,
    CnnMaml,
}

impl Baseline {
    pub const ALL: [Baseline; 11] = [
        Baseline::OnlySpan,
        Baseline::LinearAe,
        Baseline::GluAe,
        Baseline::ProtoNet,
        Baseline::MatchingNet,
        Baseline::NearNeighbor,
        Baseline::DecisionTree,
        Baseline::LinearMaml,
        Baseline::RnnMaml,
        Baseline::LstmMaml,
        Baseline::CnnMaml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::OnlySpan => "onlyspan",
            Baseline::LinearAe => "linear-ae",
            Baseline::GluAe => "glu-ae",
            Baseline::ProtoNet => "protonet",
            Baseline::MatchingNet => "matchingnet",
            Baseline::NearNeighbor => "nearneighbor",
            Baseline::DecisionTree => "decisiontree",
            Baseline::LinearMaml => "linear-maml",
            Baseline::RnnMaml => "rnn-maml",
            Baseline::LstmMaml => "lstm-maml",
            Baseline::CnnMaml => "cnn-maml",
        }
    }

    /// Fusion used to build latents for this pipeline.
    pub fn fusion(self) -> FusionVariant {
        match self {
            Baseline::LinearAe => FusionVariant::Linear,
            Baseline::GluAe => FusionVariant::Glu,
            _ => FusionVariant::Multihead,
        }
    }

    pub fn span_only(self) -> bool {
        self == Baseline::OnlySpan
    }

    /// Meta-learner body, or `None` for the metric and tree classifiers.
    pub fn body(self) -> Option<Body> {
        match self {
            Baseline::OnlySpan | Baseline::LinearAe | Baseline::GluAe => Some(Body::TransformerEncoder),
            Baseline::LinearMaml => Some(Body::Linear),
            Baseline::RnnMaml => Some(Body::Rnn),
            Baseline::LstmMaml => Some(Body::Lstm),
            Baseline::CnnMaml => Some(Body::Cnn),
            _ => None,
        }
    }

    /// Alternative meta-learner bodies are only compared within one system.
    pub fn cross_system(self) -> bool {
        !matches!(
            self,
            Baseline::LinearMaml | Baseline::RnnMaml | Baseline::LstmMaml | Baseline::CnnMaml
        )
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Baseline::ALL.iter().map(|b| b.name()).collect();
                Error::Config(format!("unknown baseline {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::LabeledSet;

    fn set(points: &[(&[f64], usize)], way: usize) -> SupportSet {
        LabeledSet {
            items: points
                .iter()
                .enumerate()
                .map(|(i, (z, y))| {
                    (
                        LatentTrace {
                            trace_id: format!("s{i}"),
                            z: z.to_vec(),
                        },
                        *y,
                    )
                })
                .collect(),
            way,
            shots: 1,
        }
    }

    #[test]
    fn protonet_examples() {
        let s = set(&[(&[0.0, 0.0], 0), (&[2.0, 0.0], 1)], 2);
        assert_eq!(protonet_predict(&s, &[2.0, 0.0]).unwrap(), 1);
        assert_eq!(protonet_predict(&s, &[0.9, 0.0]).unwrap(), 0);
        assert_eq!(protonet_predict(&s, &[1.0, 5.0]).unwrap(), 0);
        let s = set(&[(&[0.0, 0.0], 0), (&[2.0, 2.0], 0), (&[5.0, 5.0], 1)], 2);
        let mut p = ProtoNet::default();
        p.fit(&s).unwrap();
        assert_eq!(p.prototypes().unwrap()[0], Some(vec![1.0, 1.0]));
    }

    #[test]
    fn nearneighbor_examples() {
        let s = set(&[(&[1.0, 0.0], 0), (&[0.0, 2.0], 1)], 2);
        assert_eq!(nearneighbor_predict(&s, &[0.0, 0.0]).unwrap(), 0);
        assert_eq!(nearneighbor_predict(&s, &[0.0, 2.0]).unwrap(), 1);
        let s = set(&[(&[0.0, 1.0], 1), (&[1.0, 0.0], 0)], 2);
        assert_eq!(nearneighbor_predict(&s, &[0.0, 0.0]).unwrap(), 0);
        assert!(NearNeighbor::default().predict(&[0.0]).is_err());
    }

    #[test]
    fn matching_identity_examples() {
        let s = set(&[(&[1.0, 0.0, 0.0], 0), (&[0.0, 1.0, 0.0], 1), (&[0.0, 0.0, 1.0], 2)], 3);
        assert_eq!(matchingnet_predict(&s, &[0.0, 1.0, 0.0], None).unwrap(), 1);
        let dup = set(&[(&[1.0, 1.0], 0), (&[1.0, 1.0], 1)], 2);
        assert_eq!(matchingnet_predict(&dup, &[0.3, -0.2], None).unwrap(), 0);
    }

    #[test]
    fn matching_scores_match_hand_cosines() {
        let pts: [(&[f64], usize); 3] = [(&[1.0, 0.0], 0), (&[1.0, 1.0], 1), (&[0.0, 1.0], 1)];
        let s = set(&pts, 2);
        let q = [2.0, 1.0];
        let qn = (5.0f64).sqrt();
        let cos: Vec<f64> = pts
            .iter()
            .map(|(p, _)| (p[0] * q[0] + p[1] * q[1]) / (qn * (p[0] * p[0] + p[1] * p[1]).sqrt()))
            .collect();
        let e: Vec<f64> = cos.iter().map(|c| c.exp()).collect();
        let total: f64 = e.iter().sum();
        let class0 = e[0] / total;
        let class1 = (e[1] + e[2]) / total;
        let expected = if class0 > class1 { 0 } else { 1 };
        assert_eq!(matchingnet_predict(&s, &q, None).unwrap(), expected);

        let mut g = Graph::new();
        let m = s.matrix();
        let scores = MatchingNet::scores_on(&mut g, None, &m, &s.labels(), 2, &ndarray::array![[2.0, 1.0]]);
        let v = g.value(scores);
        assert!((v[[0, 0]] - class0).abs() < 1e-12 && (v[[0, 1]] - class1).abs() < 1e-12);
    }

    #[test]
    fn contextualized_matching_is_per_query() {
        let attn = AttentionParams::init(3, 1, &mut rng::stream(2, "t", 0)).unwrap();
        let s = set(&[(&[1.0, 0.2, 0.0], 0), (&[0.0, 1.0, 0.3], 1)], 2);
        let mut m = MatchingNet::with_attention(&attn);
        m.fit(&s).unwrap();
        let q = ndarray::array![[0.9, 0.1, 0.0], [0.1, 0.8, 0.2], [0.5, 0.5, 0.5]];
        let joint = m.predict_many(&q).unwrap();
        let single: Vec<usize> = q.rows().into_iter().map(|r| m.predict(r.as_slice().unwrap()).unwrap()).collect();
        assert_eq!(joint, single);
    }

    #[test]
    fn decision_tree_examples() {
        let s = set(&[(&[0.0, 5.0], 0), (&[1.0, 3.0], 0), (&[4.0, 5.0], 1), (&[5.0, 1.0], 1)], 2);
        let mut t = DecisionTree::default();
        t.fit(&s).unwrap();
        assert_eq!(t.depth(), 1);
        assert_eq!(t.predict(&[0.5, 9.0]).unwrap(), 0);
        assert_eq!(t.predict(&[4.5, 9.0]).unwrap(), 1);
        // threshold is the midpoint 2.5 on feature 0
        assert_eq!(t.predict(&[2.5, 0.0]).unwrap(), 0);
        assert_eq!(t.predict(&[2.50001, 0.0]).unwrap(), 1);

        let same = set(&[(&[1.0], 1), (&[1.0], 0), (&[1.0], 1), (&[1.0], 0)], 2);
        t.fit(&same).unwrap();
        assert_eq!(t.predict(&[7.0]).unwrap(), 0);

        let xor = set(&[(&[0.0, 0.0], 0), (&[1.0, 1.0], 0), (&[0.0, 1.0], 1), (&[1.0, 0.0], 1)], 2);
        t.fit(&xor).unwrap();
        for (z, y) in &xor.items {
            assert_eq!(t.predict(&z.z).unwrap(), *y);
        }
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
        }
        assert!("svm".parse::<Baseline>().is_err());
        assert!(!Baseline::CnnMaml.cross_system());
        assert_eq!(Baseline::OnlySpan.body(), Some(Body::TransformerEncoder));
        assert_eq!(Baseline::ProtoNet.body(), None);
    }
}
