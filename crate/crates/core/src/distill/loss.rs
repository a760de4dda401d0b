use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LayerMapping;
use crate::error::{Error, Result};
use crate::tensor::tape::log_softmax_row;
use crate::tensor::{Tape, Tensor, Var};

/// Mean over rows of `KL(p || q)` where `p = softmax(teacher / T)` and
/// `q = softmax(student / T)`. Only the student side receives gradients.
pub fn kl_loss(tape: &mut Tape, teacher_logits: Var, student_logits: Var, temperature: f64) -> Result<Var> {
    let (ts, ss) = (tape.shape(teacher_logits), tape.shape(student_logits));
    if ts != ss || ts.len() != 2 {
        return Err(Error::dim("kl_loss", format!("teacher {ts:?} vs student {ss:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (rows, classes) = (ts[0], ts[1]);
    let mut p = Vec::with_capacity(rows * classes);
    let mut neg_entropy = 0.0;
    for row in tape.value(teacher_logits).chunks(classes) {
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        for lp in log_softmax_row(&scaled) {
            let pv = lp.exp();
            if pv > 0.0 {
                neg_entropy += pv * lp;
            }
            p.push(pv);
        }
    }
    let p = tape.constant(Tensor::new(vec![rows, classes], p)?);
    let scaled = tape.scale(student_logits, 1.0 / temperature)?;
    let log_q = tape.log_softmax(scaled)?;
    let cross = tape.mul(p, log_q)?;
    let cross = tape.sum(cross)?;
    // (sum p log p - sum p log q) / rows
    let kl = tape.add_scalar(cross, -neg_entropy)?;
    tape.scale(kl, -1.0 / rows as f64)
}

/// Per-pair linear maps `A_i` from student to teacher hidden space.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// Frozen identity; used when the hidden sizes agree.
    Identity,
    /// Trainable `[teacher_dim, student_dim]` matrix.
    Linear(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    student_dim: usize,
    teacher_dim: usize,
    projections: Vec<Projection>,
}

/// Tape handles for a [`ProjectionSet`]; `None` marks an identity.
#[derive(Debug, Clone)]
pub struct BoundProjections(Vec<Option<Var>>);

impl ProjectionSet {
    /// One projection per mapping pair: identity when dimensions match,
    /// otherwise a seeded `U(-1/sqrt(student_dim), 1/sqrt(student_dim))` matrix.
    pub fn new(mapping: &LayerMapping, student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (student_dim as f64).sqrt();
        let projections = mapping
            .pairs()
            .iter()
            .map(|_| {
                if student_dim == teacher_dim {
                    Projection::Identity
                } else {
                    let data = (0..teacher_dim * student_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    Projection::Linear(
                        Tensor::new(vec![teacher_dim, student_dim], data)
                            .expect("shape")
                            .tracked(),
                    )
                }
            })
            .collect();
        ProjectionSet {
            student_dim,
            teacher_dim,
            projections,
        }
    }

    /// Explicit projections, e.g. to force trainable maps at equal widths.
    pub fn from_projections(student_dim: usize, teacher_dim: usize, projections: Vec<Projection>) -> Result<Self> {
        for p in &projections {
            match p {
                Projection::Identity if student_dim != teacher_dim => {
                    return Err(Error::Contract(format!(
                        "identity projection between widths {student_dim} and {teacher_dim}"
                    )))
                }
                Projection::Linear(t) if t.shape() != [teacher_dim, student_dim] => {
                    return Err(Error::dim(
                        "projection",
                        format!("{:?}, expected [{teacher_dim}, {student_dim}]", t.shape()),
                    ))
                }
                _ => {}
            }
        }
        Ok(ProjectionSet {
            student_dim,
            teacher_dim,
            projections,
        })
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn projections(&self) -> &[Projection] {
        &self.projections
    }

    pub fn student_dim(&self) -> usize {
        self.student_dim
    }

    pub fn teacher_dim(&self) -> usize {
        self.teacher_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundProjections {
        BoundProjections(
            self.projections
                .iter()
                .map(|p| match p {
                    Projection::Identity => None,
                    Projection::Linear(t) => Some(tape.leaf(t)),
                })
                .collect(),
        )
    }

    pub fn accumulate(&mut self, tape: &Tape, bound: &BoundProjections) -> Result<()> {
        for (p, v) in self.projections.iter_mut().zip(&bound.0) {
            if let (Projection::Linear(t), Some(v)) = (p, v) {
                if let Some(g) = tape.grad(*v) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.projections.iter_mut().filter_map(|p| match p {
            Projection::Linear(t) => Some(t),
            Projection::Identity => None,
        })
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    /// Applies projection `i` to a `[.., student_dim]` tensor on the tape.
    pub fn apply(tape: &mut Tape, bound: &BoundProjections, i: usize, h: Var) -> Result<Var> {
        let Some(a) = bound
            .0
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no projection {i}")))?
        else {
            return Ok(h);
        };
        let shape = tape.shape(h).to_vec();
        let ds = *shape.last().ok_or_else(|| Error::dim("projection", "scalar input"))?;
        let dt = tape.shape(*a)[0];
        let rows = shape.iter().product::<usize>() / ds;
        let flat = tape.reshape(h, &[rows, ds])?;
        let at = tape.transpose(*a)?;
        let y = tape.matmul(flat, at)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty") = dt;
        tape.reshape(y, &out_shape)
    }
}

/// `sum_i mse(A_i h_s[student_i], h_t[teacher_i])` over the mapping pairs.
/// Teacher hidden states must be untracked constants. An empty mapping
/// yields an exact zero.
pub fn hidden_match_loss(
    tape: &mut Tape,
    student_hiddens: &[Var],
    teacher_hiddens: &[Var],
    mapping: &LayerMapping,
    projections: &BoundProjections,
) -> Result<Var> {
    mapping.validate(student_hiddens.len(), teacher_hiddens.len())?;
    if projections.0.len() != mapping.pairs().len() {
        return Err(Error::Contract(format!(
            "{} projections for {} mapping pairs",
            projections.0.len(),
            mapping.pairs().len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, &(s, t)) in mapping.pairs().iter().enumerate() {
        let teacher = teacher_hiddens[t - 1];
        if tape.is_tracked(teacher) {
            return Err(Error::Contract(format!("teacher hidden state {t} carries gradients")));
        }
        let projected = ProjectionSet::apply(tape, projections, i, student_hiddens[s - 1])?;
        let d = tape.mse(projected, teacher)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `kl + lambda * hid`.
pub fn total_distill_loss(tape: &mut Tape, kl: Var, hid: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let weighted = tape.scale(hid, lambda)?;
    tape.add(kl, weighted)
}
