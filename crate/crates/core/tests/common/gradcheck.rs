//! Central finite-difference checks (step 1e-5) for every differentiable op
//! and for the combined distillation loss through small transformers.

use kdlab::distill::{
    hidden_match_loss, kl_loss, select_layers, total_distill_loss, Projection, ProjectionSet, Strategy,
};
use kdlab::models::{build_model, ModelKind, ModelSpec, TransformerModel};
use kdlab::tensor::{Tape, Tensor, Var};
use kdlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SLOTS: usize = 60;
/// Below this magnitude a gradient is compared on an absolute scale.
const FLOOR: f64 = 1e-6;

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub slots: usize,
    pub worst: f64,
    pub detail: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE && self.slots >= 50
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.1, 1]`, keeping clear of the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any op output to a scalar with fixed random weights so every
/// output element influences the checked gradient.
fn contract(tape: &mut Tape, y: Var) -> Result<Var> {
    if tape.shape(y).is_empty() {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct Tracker {
    name: String,
    slots: usize,
    worst: f64,
    detail: String,
}

impl Tracker {
    fn new(name: &str) -> Self {
        Tracker {
            name: name.into(),
            slots: 0,
            worst: 0.0,
            detail: String::new(),
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.slots += 1;
        let err = relative_error(analytic, numeric);
        if err > self.worst || !err.is_finite() {
            self.worst = if err.is_finite() { err } else { f64::INFINITY };
            self.detail = format!("{}: analytic {analytic} vs numeric {numeric}", what());
        }
    }

    fn finish(self) -> Check {
        Check {
            name: self.name,
            slots: self.slots,
            worst: self.worst,
            detail: self.detail,
        }
    }
}

/// Checks d f / d inputs at `SLOTS` slots: all of them cyclically when
/// there are few, random ones otherwise.
pub fn check<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], track: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(&t)
            })
            .collect();
        let y = f(&mut tape, &vars).unwrap();
        let loss = contract(&mut tape, y).unwrap();
        let value = tape.item(loss).unwrap();
        if !track {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect())
    };
    let (_, grads) = eval(inputs, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut tracker = Tracker::new(name);
    for k in 0..SLOTS {
        let mut flat = if total <= SLOTS {
            k % total
        } else {
            rng.gen_range(0..total)
        };
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let analytic = grads[which].as_ref().map_or(0.0, |g| g[flat]);
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[flat] += STEP;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[flat] -= STEP;
        let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * STEP);
        tracker.record(|| format!("input {which} slot {flat}"), analytic, numeric);
    }
    tracker.finish()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul() -> Vec<Check> {
    let mut r = rng(1);
    let inputs = [random(&mut r, &[4, 6], -1.0, 1.0), random(&mut r, &[6, 5], -1.0, 1.0)];
    let mm = check("matmul", &inputs, 1, |t, v| t.matmul(v[0], v[1]));
    let inputs = [
        random(&mut r, &[3, 4, 5], -1.0, 1.0),
        random(&mut r, &[3, 5, 2], -1.0, 1.0),
    ];
    vec![mm, check("batch_matmul", &inputs, 2, |t, v| t.batch_matmul(v[0], v[1]))]
}

pub fn elementwise() -> Vec<Check> {
    let mut r = rng(3);
    let inputs = [random(&mut r, &[5, 8], -2.0, 2.0), random(&mut r, &[5, 8], -2.0, 2.0)];
    let mut out = vec![
        check("add", &inputs, 3, |t, v| t.add(v[0], v[1])),
        check("sub", &inputs, 4, |t, v| t.sub(v[0], v[1])),
        check("mul", &inputs, 5, |t, v| t.mul(v[0], v[1])),
    ];
    let inputs = [random(&mut r, &[7, 9], -2.0, 2.0)];
    out.push(check("scale", &inputs, 6, |t, v| t.scale(v[0], -1.7)));
    out.push(check("add_scalar", &inputs, 7, |t, v| {
        let y = t.add_scalar(v[0], 0.3)?;
        t.mul(y, y)
    }));
    let inputs = [random(&mut r, &[3, 4, 6], -1.0, 1.0), random(&mut r, &[6], -1.0, 1.0)];
    out.push(check("add_bias", &inputs, 8, |t, v| t.add_bias(v[0], v[1])));
    out
}

pub fn activations() -> Vec<Check> {
    let mut r = rng(6);
    let inputs = [away_from_zero(&mut r, &[8, 9])];
    let relu = check("relu", &inputs, 9, |t, v| t.relu(v[0]));
    let inputs = [random(&mut r, &[8, 9], -3.0, 3.0)];
    vec![relu, check("gelu", &inputs, 10, |t, v| t.gelu(v[0]))]
}

pub fn normalizers() -> Vec<Check> {
    let mut r = rng(7);
    let inputs = [random(&mut r, &[3, 4, 6], -3.0, 3.0)];
    let mut out = vec![
        check("softmax (last axis)", &inputs, 11, |t, v| t.softmax(v[0], 2)),
        check("softmax (middle axis)", &inputs, 12, |t, v| t.softmax(v[0], 1)),
    ];
    let inputs = [random(&mut r, &[9, 7], -3.0, 3.0)];
    out.push(check("log_softmax", &inputs, 13, |t, v| t.log_softmax(v[0])));
    let inputs = [
        random(&mut r, &[4, 3, 8], -2.0, 2.0),
        random(&mut r, &[8], 0.5, 1.5),
        random(&mut r, &[8], -0.5, 0.5),
    ];
    out.push(check("layer_norm", &inputs, 14, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    }));
    out
}

pub fn lookup_and_shape() -> Vec<Check> {
    let mut r = rng(9);
    let inputs = [random(&mut r, &[10, 7], -1.0, 1.0)];
    let ids = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 0, 8, 7];
    let mut out = vec![check("embedding", &inputs, 15, |t, v| t.embedding(v[0], &ids))];
    let inputs = [random(&mut r, &[3, 4, 5], -1.0, 1.0)];
    out.push(check("reshape", &inputs, 16, |t, v| {
        let y = t.reshape(v[0], &[12, 5])?;
        t.mul(y, y)
    }));
    out.push(check("permute", &inputs, 17, |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        let y = t.reshape(y, &[5, 12])?;
        let w = t.constant(Tensor::full(&[12, 2], 0.5));
        t.matmul(y, w)
    }));
    let inputs = [random(&mut r, &[6, 11], -1.0, 1.0)];
    out.push(check("transpose", &inputs, 18, |t, v| {
        let y = t.transpose(v[0])?;
        t.mul(y, y)
    }));
    out
}

pub fn reductions() -> Vec<Check> {
    let mut r = rng(11);
    let inputs = [random(&mut r, &[3, 5, 4], -1.0, 1.0)];
    let mut out: Vec<Check> = (0..3)
        .map(|axis| {
            check(&format!("mean_axis ({axis})"), &inputs, 19 + axis as u64, |t, v| {
                let y = t.mean_axis(v[0], axis)?;
                t.mul(y, y)
            })
        })
        .collect();
    out.push(check("sum", &inputs, 23, |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    }));
    out.push(check("mean", &inputs, 24, |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    }));
    let inputs = [random(&mut r, &[12, 5], -2.0, 2.0)];
    let labels: Vec<usize> = (0..12).map(|i| (i * 7) % 5).collect();
    out.push(check("cross_entropy", &inputs, 25, |t, v| {
        t.cross_entropy(v[0], &labels)
    }));
    let inputs = [random(&mut r, &[6, 10], -1.0, 1.0), random(&mut r, &[6, 10], -1.0, 1.0)];
    out.push(check("mse", &inputs, 26, |t, v| t.mse(v[0], v[1])));
    out
}

pub fn distillation_losses() -> Vec<Check> {
    let mut r = rng(13);
    let teacher = random(&mut r, &[10, 6], -3.0, 3.0);
    let inputs = [random(&mut r, &[10, 6], -3.0, 3.0)];
    let mut out: Vec<Check> = [1.0, 2.5]
        .iter()
        .map(|&temperature| {
            check(&format!("kl_loss (T={temperature})"), &inputs, 27, |t, v| {
                let p = t.constant(teacher.clone());
                kl_loss(t, p, v[0], temperature)
            })
        })
        .collect();
    out.extend(hidden_match());
    out
}

fn hidden_match() -> Vec<Check> {
    let mut r = rng(14);
    let (ls, lt, ds, dt) = (3, 5, 4, 6);
    let mapping = select_layers(Strategy::Forward, ls, lt, None).unwrap();
    let teachers: Vec<Tensor> = (0..lt).map(|_| random(&mut r, &[2, 3, dt], -1.0, 1.0)).collect();
    let students: Vec<Tensor> = (0..ls).map(|_| random(&mut r, &[2, 3, ds], -1.0, 1.0)).collect();
    let mats: Vec<Tensor> = (0..ls)
        .map(|_| random(&mut r, &[dt, ds], -0.5, 0.5).tracked())
        .collect();
    let set_of = |mats: &[Tensor]| {
        ProjectionSet::from_projections(ds, dt, mats.iter().cloned().map(Projection::Linear).collect()).unwrap()
    };

    // Student side, projections held fixed.
    let fixed = set_of(&mats);
    let student_side = check("hidden_match_loss (student)", &students, 28, |t, v| {
        let bound = fixed.bind(t);
        let th: Vec<Var> = teachers.iter().map(|x| t.constant(x.clone())).collect();
        hidden_match_loss(t, v, &th, &mapping, &bound)
    });

    // Projection side, through the set's own binding and accumulation.
    let loss_of = |set: &mut ProjectionSet, track: bool| -> f64 {
        let mut t = Tape::new();
        let sv: Vec<Var> = students.iter().map(|x| t.constant(x.clone())).collect();
        let th: Vec<Var> = teachers.iter().map(|x| t.constant(x.clone())).collect();
        let bound = set.bind(&mut t);
        let loss = hidden_match_loss(&mut t, &sv, &th, &mapping, &bound).unwrap();
        let value = t.item(loss).unwrap();
        if track {
            t.backward(loss).unwrap();
            set.zero_grad();
            set.accumulate(&t, &bound).unwrap();
        }
        value
    };
    let mut set = set_of(&mats);
    loss_of(&mut set, true);
    let grads: Vec<Vec<f64>> = set.tensors_mut().map(|t| t.grad().unwrap().to_vec()).collect();
    let mut tracker = Tracker::new("hidden_match_loss (projections)");
    for k in 0..SLOTS {
        let (m, i) = (k % ls, r.gen_range(0..dt * ds));
        let mut plus = mats.clone();
        plus[m].data_mut()[i] += STEP;
        let mut minus = mats.clone();
        minus[m].data_mut()[i] -= STEP;
        let numeric = (loss_of(&mut set_of(&plus), false) - loss_of(&mut set_of(&minus), false)) / (2.0 * STEP);
        tracker.record(|| format!("projection {m}[{i}]"), grads[m][i], numeric);
    }
    vec![student_side, tracker.finish()]
}

fn perturbed(spec: &ModelSpec, seed: u64) -> TransformerModel {
    let mut m = build_model(spec, seed).unwrap();
    let mut r = rng(seed ^ 77);
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
    }
    m
}

/// Full objective `kl + lambda * hid` through a student transformer, checked
/// on every parameter tensor plus random extra slots.
pub fn combined_loss(kind: ModelKind, strategy: Strategy) -> Check {
    let spec = ModelSpec {
        kind,
        num_layers: 4,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 9,
        max_seq_len: 5,
        num_classes: 3,
    };
    let teacher = perturbed(&spec, 1);
    let mut student = perturbed(&spec.with_layers(2), 2);
    let source: Vec<Vec<u32>> = vec![vec![2, 3, 4, 5, 6], vec![8, 7, 2, 2, 3], vec![1, 4, 4, 6, 0]];
    let target_in: Vec<Vec<u32>> = vec![vec![1, 3, 5, 2], vec![1, 2, 8, 7], vec![1, 0, 6, 6]];
    let dec = (kind == ModelKind::EncoderDecoder).then_some(target_in.as_slice());
    let mapping = select_layers(strategy, 2, 4, Some(3)).unwrap();
    let lambda = 0.7;

    let loss_of = |student: &TransformerModel, track: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let tb = teacher.bind_frozen(&mut tape);
        let tout = teacher.forward(&mut tape, &tb, &source, dec).unwrap();
        let sb = if track {
            student.bind(&mut tape)
        } else {
            student.bind_frozen(&mut tape)
        };
        let sout = student.forward(&mut tape, &sb, &source, dec).unwrap();
        let kl = kl_loss(&mut tape, tout.logits, sout.logits, 1.5).unwrap();
        let set = ProjectionSet::new(&mapping, 8, 8, 0);
        let bp = set.bind(&mut tape);
        let mut hid = None;
        for (s, t) in sout.stacks().into_iter().zip(tout.stacks()) {
            let h = hidden_match_loss(&mut tape, s, t, &mapping, &bp).unwrap();
            hid = Some(match hid {
                Some(a) => tape.add(a, h).unwrap(),
                None => h,
            });
        }
        let total = total_distill_loss(&mut tape, kl, hid.unwrap(), lambda).unwrap();
        let value = tape.item(total).unwrap();
        if !track {
            return (value, Vec::new());
        }
        tape.backward(total).unwrap();
        (
            value,
            sb.vars().iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect(),
        )
    };

    let (_, grads) = loss_of(&student, true);
    let sizes: Vec<usize> = student.params().iter().map(|(_, t)| t.numel()).collect();
    let mut r = rng(99);
    let mut picks: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(p, &n)| (p, r.gen_range(0..n))).collect();
    while picks.len() < SLOTS.max(sizes.len()) + 20 {
        let p = r.gen_range(0..sizes.len());
        picks.push((p, r.gen_range(0..sizes[p])));
    }
    let mut tracker = Tracker::new(&format!("kl + lambda*hid ({kind:?}, {})", strategy.name()));
    for (p, i) in picks {
        let analytic = grads[p].as_ref().map_or(0.0, |g| g[i]);
        let orig = student.params().slot(p).data()[i];
        student.params_mut().slot_mut(p).data_mut()[i] = orig + STEP;
        let up = loss_of(&student, false).0;
        student.params_mut().slot_mut(p).data_mut()[i] = orig - STEP;
        let down = loss_of(&student, false).0;
        student.params_mut().slot_mut(p).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let name = student.params().iter().nth(p).unwrap().0.to_string();
        tracker.record(|| format!("{name}[{i}]"), analytic, numeric);
    }
    tracker.finish()
}

pub fn all() -> Vec<Check> {
    let mut out = Vec::new();
    out.extend(matmul());
    out.extend(elementwise());
    out.extend(activations());
    out.extend(normalizers());
    out.extend(lookup_and_shape());
    out.extend(reductions());
    out.extend(distillation_losses());
    out.push(combined_loss(ModelKind::EncoderClassifier, Strategy::Forward));
    out.push(combined_loss(ModelKind::EncoderClassifier, Strategy::AllToOne));
    out.push(combined_loss(ModelKind::EncoderDecoder, Strategy::Reverse));
    out
}
