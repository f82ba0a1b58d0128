//! Relation-alignment distillation from a frozen teacher.
//!
//! Instead of matching representation values, the student matches the
//! teacher's pairwise cosine similarities at three sites: the post-LN trunk,
//! the pre-residual sublayer output, and query/key pairs inside attention.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, NodeId, Tensor};
use crate::error::{Result, TcdError};
use crate::moe::MoEConfig;
use crate::transformer::TapSet;

/// How per-site losses combine across layers and sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_t: f64,
    pub lambda_i: f64,
    pub lambda_a: f64,
    pub sample_total: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub seed: u64,
    pub aggregate: Aggregate,
}

impl Default for DistillConfig {
    /// Small-scale defaults: attention alignment off.
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_i: 1.0,
            lambda_a: 0.0,
            sample_total: 4096,
            num_groups: 32,
            group_size: 128,
            seed: 0,
            aggregate: Aggregate::Mean,
        }
    }
}

impl DistillConfig {
    /// Large-scale defaults: all three sites weighted 1.
    pub fn large() -> Self {
        Self {
            lambda_a: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.group_size == 0 {
            return Err(TcdError::Config("distill.num_groups and group_size must be positive".into()));
        }
        if self.num_groups * self.group_size != self.sample_total {
            return Err(TcdError::Config(format!(
                "distill: num_groups ({}) x group_size ({}) != sample_total ({})",
                self.num_groups, self.group_size, self.sample_total
            )));
        }
        for (name, v) in [("lambda_t", self.lambda_t), ("lambda_i", self.lambda_i), ("lambda_a", self.lambda_a)] {
            if !(v >= 0.0) {
                return Err(TcdError::Config(format!("distill.{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Groups of flat token rows shared by teacher and student.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSample {
    pub groups: Vec<Vec<usize>>,
}

/// Draws `num_groups` groups of `group_size` rows from `valid_rows`.
///
/// With at least `sample_total` rows the groups are disjoint. With fewer rows
/// but at least `group_size`, each group is drawn without replacement
/// independently. Below `group_size`, rows are drawn with replacement.
pub fn sample_tokens<R: Rng + ?Sized>(valid_rows: &[usize], cfg: &DistillConfig, rng: &mut R) -> Result<RelationSample> {
    cfg.validate()?;
    let n = valid_rows.len();
    if n == 0 {
        return Err(TcdError::Empty("sample_tokens: batch has no tokens".into()));
    }
    let groups = if n >= cfg.sample_total {
        let picked = index::sample(rng, n, cfg.sample_total).into_vec();
        picked
            .chunks(cfg.group_size)
            .map(|c| c.iter().map(|&i| valid_rows[i]).collect())
            .collect()
    } else if n >= cfg.group_size {
        (0..cfg.num_groups)
            .map(|_| {
                index::sample(rng, n, cfg.group_size)
                    .into_iter()
                    .map(|i| valid_rows[i])
                    .collect()
            })
            .collect()
    } else {
        (0..cfg.num_groups)
            .map(|_| (0..cfg.group_size).map(|_| valid_rows[rng.random_range(0..n)]).collect())
            .collect()
    };
    Ok(RelationSample { groups })
}

/// Checks that teacher and student taps can be aligned.
pub fn check_compatible<A, B>(student: &TapSet<A>, teacher: &TapSet<B>, shape_of: impl Fn(&A) -> Vec<usize>, tshape: impl Fn(&B) -> Vec<usize>) -> Result<()> {
    if student.layers.len() != teacher.layers.len() {
        return Err(TcdError::Compatibility(format!(
            "student has {} layers, teacher has {}",
            student.layers.len(),
            teacher.layers.len()
        )));
    }
    if student.layout != teacher.layout {
        return Err(TcdError::Compatibility("teacher and student saw different batches".into()));
    }
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        let (ss, ts) = (shape_of(&s.attention.trunk), tshape(&t.attention.trunk));
        if ss != ts {
            return Err(TcdError::Compatibility(format!("hidden width differs: student {ss:?}, teacher {ts:?}")));
        }
        if s.queries.len() != t.queries.len() {
            return Err(TcdError::Compatibility(format!(
                "head count differs: student {}, teacher {}",
                s.queries.len(),
                t.queries.len()
            )));
        }
        if let (Some(sq), Some(tq)) = (s.queries.first(), t.queries.first()) {
            if shape_of(sq) != tshape(tq) {
                return Err(TcdError::Compatibility("head dimension differs".into()));
            }
        }
    }
    Ok(())
}

fn compatible(g: &Graph, student: &TapSet<NodeId>, teacher: &TapSet<Tensor>) -> Result<()> {
    check_compatible(student, teacher, |n| g.shape(*n).to_vec(), |t| t.shape().to_vec())
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (m, n) = t.dims2()?;
    let mut data = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        if r >= m {
            return Err(TcdError::Contract(format!("sample row {r} outside tap of {m} rows")));
        }
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), n], data)
}

fn aggregate(g: &mut Graph, terms: &[NodeId], how: Aggregate) -> Result<NodeId> {
    match how {
        Aggregate::Mean => g.mean_of(terms),
        Aggregate::Sum => g.weighted_sum(&terms.iter().map(|&t| (t, 1.0)).collect::<Vec<_>>()),
    }
}

/// Relation loss at one tap: mean over groups of the mean squared difference
/// between student and teacher `G×G` cosine matrices.
pub fn site_relation_loss(g: &mut Graph, student: NodeId, teacher: &Tensor, sample: &RelationSample) -> Result<NodeId> {
    let mut per_group = Vec::with_capacity(sample.groups.len());
    for group in &sample.groups {
        let reps = g.gather_rows(student, group)?;
        let s = g.relation_matrix(reps)?;
        let t = kernels::relation_matrix(&gather(teacher, group)?)?;
        per_group.push(g.mse_const(s, &t)?);
    }
    g.mean_of(&per_group)
}

fn relation_loss<'a>(
    g: &mut Graph,
    student: impl Iterator<Item = &'a NodeId>,
    teacher: impl Iterator<Item = &'a Tensor>,
    sample: &RelationSample,
    how: Aggregate,
) -> Result<NodeId> {
    let mut sites = Vec::new();
    for (&s, t) in student.zip(teacher) {
        sites.push(site_relation_loss(g, s, t, sample)?);
    }
    aggregate(g, &sites, how)
}

/// Relation alignment of post-LN trunk states, over every sublayer.
pub fn trunk_loss(
    g: &mut Graph,
    student: &TapSet<NodeId>,
    teacher: &TapSet<Tensor>,
    sample: &RelationSample,
    how: Aggregate,
) -> Result<NodeId> {
    compatible(g, student, teacher)?;
    relation_loss(g, student.trunk(), teacher.trunk(), sample, how)
}

/// Relation alignment of sublayer outputs before the residual addition.
pub fn inner_loss(
    g: &mut Graph,
    student: &TapSet<NodeId>,
    teacher: &TapSet<Tensor>,
    sample: &RelationSample,
    how: Aggregate,
) -> Result<NodeId> {
    compatible(g, student, teacher)?;
    relation_loss(g, student.inner(), teacher.inner(), sample, how)
}

/// Query–key cosine alignment. For each layer, head and sequence, all
/// `len×len` query/key pairs of that sequence are compared; each layer's value
/// is the mean over heads and sequences.
pub fn attention_loss(g: &mut Graph, student: &TapSet<NodeId>, teacher: &TapSet<Tensor>, how: Aggregate) -> Result<NodeId> {
    compatible(g, student, teacher)?;
    let layout = &student.layout;
    let t = layout.seq_len;
    let mut per_layer = Vec::with_capacity(student.layers.len());
    for (sl, tl) in student.layers.iter().zip(&teacher.layers) {
        let mut terms = Vec::new();
        for head in 0..sl.queries.len() {
            for b in 0..layout.batch {
                let (r0, r1) = (b * t, b * t + layout.lengths[b]);
                let sq = g.slice_rows(sl.queries[head], r0, r1)?;
                let sk = g.slice_rows(sl.keys[head], r0, r1)?;
                let s = g.cross_relation(sq, sk)?;
                let rows: Vec<usize> = (r0..r1).collect();
                let target = kernels::cross_relation(&gather(&tl.queries[head], &rows)?, &gather(&tl.keys[head], &rows)?)?;
                terms.push(g.mse_const(s, &target)?);
            }
        }
        per_layer.push(g.mean_of(&terms)?);
    }
    if per_layer.is_empty() {
        return Err(TcdError::Empty("attention_loss on a model without layers".into()));
    }
    aggregate(g, &per_layer, how)
}

/// Scalar loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mlm: f64,
    pub balance: Option<f64>,
    pub trunk: Option<f64>,
    pub inner: Option<f64>,
    pub attention: Option<f64>,
}

/// Coefficients of the weighted objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossWeights {
    pub balance: f64,
    pub trunk: f64,
    pub inner: f64,
    pub attention: f64,
}

impl LossWeights {
    pub fn new(moe: Option<&MoEConfig>, distill: Option<&DistillConfig>) -> Self {
        Self {
            balance: moe.map_or(0.0, |m| m.lambda_b),
            trunk: distill.map_or(0.0, |d| d.lambda_t),
            inner: distill.map_or(0.0, |d| d.lambda_i),
            attention: distill.map_or(0.0, |d| d.lambda_a),
        }
    }
}

/// `L_MLM + λ_B·L_B + λ_T·L_T + λ_I·L_I + λ_A·L_A`; absent components count as 0.
pub fn total_student_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let parts = [
        ("l_mlm", Some(c.mlm), 1.0),
        ("l_b", c.balance, w.balance),
        ("l_t", c.trunk, w.trunk),
        ("l_i", c.inner, w.inner),
        ("l_a", c.attention, w.attention),
    ];
    let mut total = 0.0;
    for (name, value, weight) in parts {
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(TcdError::Numeric(format!("loss component {name} is {v}")));
            }
            total += weight * v;
        }
    }
    Ok(total)
}
