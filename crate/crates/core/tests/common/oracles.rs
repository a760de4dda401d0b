//! Plain-loop references for the two distillation losses.

use kdlab::distill::{hidden_match_loss, kl_loss, select_layers, LayerMapping, Projection, ProjectionSet, Strategy};
use kdlab::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::random;

pub const INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-10;

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Row-mean of `sum_y p ln(p / q)` by direct summation.
pub fn kl_reference(teacher: &Tensor, student: &Tensor, temperature: f64) -> f64 {
    let classes = teacher.shape()[1];
    let rows = teacher.shape()[0];
    let mut total = 0.0;
    for (t, s) in teacher.data().chunks(classes).zip(student.data().chunks(classes)) {
        let (p, q) = (softmax(t, temperature), softmax(s, temperature));
        for (pv, qv) in p.iter().zip(&q) {
            if *pv > 0.0 {
                total += pv * (pv / qv).ln();
            }
        }
    }
    total / rows as f64
}

pub fn kl_library(teacher: &Tensor, student: &Tensor, temperature: f64) -> f64 {
    let mut tape = Tape::new();
    let t = tape.constant(teacher.clone());
    let s = tape.leaf(student);
    let loss = kl_loss(&mut tape, t, s, temperature).unwrap();
    tape.item(loss).unwrap()
}

/// Worst absolute error of `kl_loss` against the reference over random
/// logit pairs of varied shape, scale and temperature.
pub fn kl_worst(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let rows = rng.gen_range(1..6);
        let classes = rng.gen_range(2..9);
        let scale = rng.gen_range(0.1..6.0);
        let temperature = rng.gen_range(0.5..4.0);
        let t = random(&mut rng, &[rows, classes], -scale, scale);
        let s = random(&mut rng, &[rows, classes], -scale, scale);
        let err = (kl_library(&t, &s, temperature) - kl_reference(&t, &s, temperature)).abs();
        worst = worst.max(err);
    }
    worst
}

/// One random matching problem.
pub struct MatchInstance {
    pub mapping: LayerMapping,
    pub students: Vec<Tensor>,
    pub teachers: Vec<Tensor>,
    pub projections: Vec<Projection>,
    pub student_dim: usize,
    pub teacher_dim: usize,
}

impl MatchInstance {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let ls = rng.gen_range(1..7);
        let lt = rng.gen_range(ls..9);
        let mapping = if rng.gen_bool(0.5) {
            let strategy = *Strategy::ALL.choose(rng).unwrap();
            select_layers(strategy, ls, lt, Some(rng.gen())).unwrap()
        } else {
            // Arbitrary ascending student subset, arbitrary teacher layers.
            let mut pairs = Vec::new();
            for s in 1..=ls {
                if rng.gen_bool(0.7) {
                    pairs.push((s, rng.gen_range(1..=lt)));
                }
            }
            LayerMapping::from_pairs(pairs, Strategy::Forward, None).unwrap()
        };
        let student_dim = rng.gen_range(1..6);
        let teacher_dim = if rng.gen_bool(0.5) {
            student_dim
        } else {
            rng.gen_range(1..6)
        };
        let (batch, seq) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let students = (0..ls)
            .map(|_| random(rng, &[batch, seq, student_dim], -2.0, 2.0))
            .collect();
        let teachers = (0..lt)
            .map(|_| random(rng, &[batch, seq, teacher_dim], -2.0, 2.0))
            .collect();
        let projections = mapping
            .pairs()
            .iter()
            .map(|_| {
                if student_dim == teacher_dim && rng.gen_bool(0.5) {
                    Projection::Identity
                } else {
                    Projection::Linear(random(rng, &[teacher_dim, student_dim], -1.0, 1.0))
                }
            })
            .collect();
        MatchInstance {
            mapping,
            students,
            teachers,
            projections,
            student_dim,
            teacher_dim,
        }
    }

    pub fn library(&self) -> f64 {
        let set =
            ProjectionSet::from_projections(self.student_dim, self.teacher_dim, self.projections.clone()).unwrap();
        let mut tape = Tape::new();
        let s: Vec<_> = self.students.iter().map(|x| tape.leaf(x)).collect();
        let t: Vec<_> = self.teachers.iter().map(|x| tape.constant(x.clone())).collect();
        let bound = set.bind(&mut tape);
        let loss = hidden_match_loss(&mut tape, &s, &t, &self.mapping, &bound).unwrap();
        tape.item(loss).unwrap()
    }

    /// Sum over pairs of the elementwise mean squared error, projecting
    /// each token vector by explicit dot products.
    pub fn reference(&self) -> f64 {
        let (ds, dt) = (self.student_dim, self.teacher_dim);
        let mut total = 0.0;
        for (i, &(s, t)) in self.mapping.pairs().iter().enumerate() {
            let hs = self.students[s - 1].data();
            let ht = self.teachers[t - 1].data();
            let tokens = hs.len() / ds;
            let mut sum = 0.0;
            for tok in 0..tokens {
                let x = &hs[tok * ds..(tok + 1) * ds];
                for j in 0..dt {
                    let projected = match &self.projections[i] {
                        Projection::Identity => x[j],
                        Projection::Linear(a) => (0..ds).map(|k| a.data()[j * ds + k] * x[k]).sum(),
                    };
                    let d = projected - ht[tok * dt + j];
                    sum += d * d;
                }
            }
            total += sum / (tokens * dt) as f64;
        }
        total
    }

    /// The same problem with student layers relabelled by a random
    /// permutation, so the pairs are visited in a different order.
    pub fn relabelled(&self, rng: &mut ChaCha8Rng) -> MatchInstance {
        let ls = self.students.len();
        let mut perm: Vec<usize> = (0..ls).collect();
        perm.shuffle(rng);
        let mut students = vec![Tensor::scalar(0.0); ls];
        for (old, &new) in perm.iter().enumerate() {
            students[new] = self.students[old].clone();
        }
        let mut pairs: Vec<((usize, usize), Projection)> = self
            .mapping
            .pairs()
            .iter()
            .zip(&self.projections)
            .map(|(&(s, t), p)| ((perm[s - 1] + 1, t), p.clone()))
            .collect();
        pairs.sort_by_key(|(pair, _)| pair.0);
        let (pairs, projections): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        MatchInstance {
            mapping: LayerMapping::from_pairs(pairs, Strategy::Forward, None).unwrap(),
            students,
            teachers: self.teachers.clone(),
            projections,
            student_dim: self.student_dim,
            teacher_dim: self.teacher_dim,
        }
    }
}

/// Worst absolute error of `hidden_match_loss` against the reference, and
/// worst change under pair relabelling.
pub fn hidden_match_worst(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut oracle, mut order): (f64, f64) = (0.0, 0.0);
    for _ in 0..INSTANCES {
        let inst = MatchInstance::sample(&mut rng);
        let lib = inst.library();
        oracle = oracle.max((lib - inst.reference()).abs());
        order = order.max((lib - inst.relabelled(&mut rng).library()).abs());
    }
    (oracle, order)
}
