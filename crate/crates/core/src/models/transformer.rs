use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, ModelKind, ModelSpec, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
struct AttentionSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct NormSlots {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    attn: AttentionSlots,
    ln1: NormSlots,
    cross: Option<(AttentionSlots, NormSlots)>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2: NormSlots,
}

/// A built model: spec, parameters and the slot layout used by `forward`.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    spec: ModelSpec,
    seed: u64,
    params: Parameters,
    token_embedding: usize,
    position_embedding: usize,
    encoder: Vec<BlockSlots>,
    decoder: Vec<BlockSlots>,
    head: Option<(usize, usize)>,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, classes]` for classifiers, `[batch * target_len, vocab]` for
    /// encoder-decoders.
    pub logits: Var,
    /// Output of each encoder block, `[batch, seq, hidden]`.
    pub encoder_hidden: Vec<Var>,
    /// Output of each decoder block; empty for classifiers.
    pub decoder_hidden: Vec<Var>,
}

impl ForwardOutput {
    /// Hidden-state lists per stack, encoder first.
    pub fn stacks(&self) -> Vec<&[Var]> {
        if self.decoder_hidden.is_empty() {
            vec![&self.encoder_hidden]
        } else {
            vec![&self.encoder_hidden, &self.decoder_hidden]
        }
    }
}

struct Init<'a> {
    params: &'a mut Parameters,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params
            .insert(name, Tensor::new(shape.to_vec(), data).expect("shape").tracked())
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.uniform(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
        );
        let b = self
            .params
            .insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]).tracked());
        (w, b)
    }

    fn norm(&mut self, name: &str, d: usize) -> NormSlots {
        NormSlots {
            gain: self
                .params
                .insert(format!("{name}.gain"), Tensor::full(&[d], 1.0).tracked()),
            bias: self
                .params
                .insert(format!("{name}.bias"), Tensor::zeros(&[d]).tracked()),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionSlots {
        let (wq, bq) = self.linear(&format!("{name}.query"), d, d);
        let (wk, bk) = self.linear(&format!("{name}.key"), d, d);
        let (wv, bv) = self.linear(&format!("{name}.value"), d, d);
        let (wo, bo) = self.linear(&format!("{name}.output"), d, d);
        AttentionSlots {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn block(&mut self, prefix: &str, spec: &ModelSpec, cross: bool) -> BlockSlots {
        let d = spec.hidden_dim;
        let attn = self.attention(&format!("{prefix}.attn"), d);
        let ln1 = self.norm(&format!("{prefix}.ln1"), d);
        let cross = cross.then(|| {
            (
                self.attention(&format!("{prefix}.cross_attn"), d),
                self.norm(&format!("{prefix}.ln_cross"), d),
            )
        });
        let (w1, b1) = self.linear(&format!("{prefix}.ffn.in"), d, spec.ffn_dim);
        let (w2, b2) = self.linear(&format!("{prefix}.ffn.out"), spec.ffn_dim, d);
        let ln2 = self.norm(&format!("{prefix}.ln2"), d);
        BlockSlots {
            attn,
            ln1,
            cross,
            w1,
            b1,
            w2,
            b2,
            ln2,
        }
    }
}

/// Builds a model with seeded scaled-uniform weights: `U(-1/sqrt(fan_in),
/// 1/sqrt(fan_in))` for projections, `U(-1, 1)` for embeddings, zero
/// biases and unit norm gains.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<TransformerModel> {
    spec.validate()?;
    let mut params = Parameters::new();
    let mut init = Init {
        params: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = spec.hidden_dim;
    let token_embedding = init.uniform("embed.token".into(), &[spec.vocab_size, d], 1.0);
    let position_embedding = init.uniform("embed.position".into(), &[spec.max_seq_len, d], 1.0);
    let encoder = (0..spec.num_layers)
        .map(|i| init.block(&format!("encoder.{i}"), spec, false))
        .collect();
    let (decoder, head) = match spec.kind {
        ModelKind::EncoderClassifier => (Vec::new(), Some(init.linear("head", d, spec.num_classes))),
        ModelKind::EncoderDecoder => (
            (0..spec.num_layers)
                .map(|i| init.block(&format!("decoder.{i}"), spec, true))
                .collect(),
            None,
        ),
    };
    Ok(TransformerModel {
        spec: spec.clone(),
        seed,
        params,
        token_embedding,
        position_embedding,
        encoder,
        decoder,
        head,
    })
}

fn check_tokens(spec: &ModelSpec, what: &str, seqs: &[Vec<u32>]) -> Result<usize> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Input(format!("empty {what} batch")))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::Input(format!("zero-length {what} sequence")));
    }
    if len > spec.max_seq_len {
        return Err(Error::Input(format!(
            "{what} length {len} exceeds max_seq_len {}",
            spec.max_seq_len
        )));
    }
    for s in seqs {
        if s.len() != len {
            return Err(Error::Input(format!("ragged {what} batch ({} vs {len})", s.len())));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= spec.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocabulary of {}",
                spec.vocab_size
            )));
        }
    }
    Ok(len)
}

impl TransformerModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    /// Runs the model on a rectangular batch. Encoder-decoders also take the
    /// teacher-forced decoder inputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        source: &[Vec<u32>],
        target_in: Option<&[Vec<u32>]>,
    ) -> Result<ForwardOutput> {
        let src_len = check_tokens(&self.spec, "source", source)?;
        let batch = source.len();
        let x = self.embed(tape, bound, source, src_len)?;
        let mut encoder_hidden = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            h = self.block(tape, bound, block, h, None, batch, src_len, false)?;
            encoder_hidden.push(tape.reshape(h, &[batch, src_len, self.spec.hidden_dim])?);
        }

        match self.spec.kind {
            ModelKind::EncoderClassifier => {
                if target_in.is_some() {
                    return Err(Error::Contract("classifier takes no decoder input".into()));
                }
                let (w, b) = self.head.expect("classifier head");
                let last = *encoder_hidden.last().expect("at least one layer");
                let pooled = tape.mean_axis(last, 1)?;
                let logits = tape.matmul(pooled, bound.var(w))?;
                let logits = tape.add_bias(logits, bound.var(b))?;
                Ok(ForwardOutput {
                    logits,
                    encoder_hidden,
                    decoder_hidden: Vec::new(),
                })
            }
            ModelKind::EncoderDecoder => {
                let target_in =
                    target_in.ok_or_else(|| Error::Contract("encoder-decoder forward needs decoder inputs".into()))?;
                if target_in.len() != batch {
                    return Err(Error::Input(format!(
                        "decoder batch {} differs from source batch {batch}",
                        target_in.len()
                    )));
                }
                let tgt_len = check_tokens(&self.spec, "target", target_in)?;
                let memory = (h, src_len);
                let mut d = self.embed(tape, bound, target_in, tgt_len)?;
                let mut decoder_hidden = Vec::with_capacity(self.decoder.len());
                for block in &self.decoder {
                    d = self.block(tape, bound, block, d, Some(memory), batch, tgt_len, true)?;
                    decoder_hidden.push(tape.reshape(d, &[batch, tgt_len, self.spec.hidden_dim])?);
                }
                let emb_t = tape.transpose(bound.var(self.token_embedding))?;
                let logits = tape.matmul(d, emb_t)?;
                Ok(ForwardOutput {
                    logits,
                    encoder_hidden,
                    decoder_hidden,
                })
            }
        }
    }

    /// `[batch * len, hidden]` sum of token and learned position embeddings.
    fn embed(&self, tape: &mut Tape, bound: &Bound, seqs: &[Vec<u32>], len: usize) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flatten().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = tape.embedding(bound.var(self.token_embedding), &ids)?;
        let pos = tape.embedding(bound.var(self.position_embedding), &positions)?;
        tape.add(tok, pos)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        slots: &BlockSlots,
        x: Var,
        memory: Option<(Var, usize)>,
        batch: usize,
        len: usize,
        causal: bool,
    ) -> Result<Var> {
        let a = self.attention(tape, bound, &slots.attn, x, (x, len), batch, len, causal)?;
        let r = tape.add(x, a)?;
        let mut h = tape.layer_norm(r, bound.var(slots.ln1.gain), bound.var(slots.ln1.bias), LN_EPS)?;
        if let (Some((cross, norm)), Some(mem)) = (&slots.cross, memory) {
            let c = self.attention(tape, bound, cross, h, mem, batch, len, false)?;
            let r = tape.add(h, c)?;
            h = tape.layer_norm(r, bound.var(norm.gain), bound.var(norm.bias), LN_EPS)?;
        }
        let f = tape.matmul(h, bound.var(slots.w1))?;
        let f = tape.add_bias(f, bound.var(slots.b1))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, bound.var(slots.w2))?;
        let f = tape.add_bias(f, bound.var(slots.b2))?;
        let r = tape.add(h, f)?;
        tape.layer_norm(r, bound.var(slots.ln2.gain), bound.var(slots.ln2.bias), LN_EPS)
    }

    /// Multi-head attention from `[batch * q_len, d]` queries onto
    /// `[batch * kv_len, d]` keys/values.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        s: &AttentionSlots,
        xq: Var,
        (xkv, kv_len): (Var, usize),
        batch: usize,
        q_len: usize,
        causal: bool,
    ) -> Result<Var> {
        let d = self.spec.hidden_dim;
        let heads = self.spec.num_heads;
        let dh = d / heads;
        let proj = |tape: &mut Tape, x: Var, w: usize, b: usize| -> Result<Var> {
            let y = tape.matmul(x, bound.var(w))?;
            tape.add_bias(y, bound.var(b))
        };
        let q = proj(tape, xq, s.wq, s.bq)?;
        let q = tape.reshape(q, &[batch, q_len, heads, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let q = tape.reshape(q, &[batch * heads, q_len, dh])?;

        let k = proj(tape, xkv, s.wk, s.bk)?;
        let k = tape.reshape(k, &[batch, kv_len, heads, dh])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let k = tape.reshape(k, &[batch * heads, dh, kv_len])?;

        let v = proj(tape, xkv, s.wv, s.bv)?;
        let v = tape.reshape(v, &[batch, kv_len, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let v = tape.reshape(v, &[batch * heads, kv_len, dh])?;

        let scores = tape.batch_matmul(q, k)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if causal {
            let mut mask = Tensor::zeros(&[batch * heads, q_len, kv_len]);
            for (i, m) in mask.data_mut().iter_mut().enumerate() {
                let (row, col) = ((i / kv_len) % q_len, i % kv_len);
                if col > row {
                    *m = MASKED;
                }
            }
            let mask = tape.constant(mask);
            scores = tape.add(scores, mask)?;
        }
        let probs = tape.softmax(scores, 2)?;
        let ctx = tape.batch_matmul(probs, v)?;
        let ctx = tape.reshape(ctx, &[batch, heads, q_len, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * q_len, d])?;
        proj(tape, ctx, s.wo, s.bo)
    }

    /// Argmax class per example (classifier only).
    pub fn predict_classes(&self, source: &[Vec<u32>]) -> Result<Vec<usize>> {
        if self.spec.kind != ModelKind::EncoderClassifier {
            return Err(Error::Contract("predict_classes needs a classifier".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, source, None)?;
        Ok(argmax_rows(tape.value(out.logits), self.spec.num_classes))
    }

    /// Greedy autoregressive decoding of `len` tokens after `bos`.
    pub fn greedy_decode(&self, source: &[Vec<u32>], bos: u32, len: usize) -> Result<Vec<Vec<u32>>> {
        if self.spec.kind != ModelKind::EncoderDecoder {
            return Err(Error::Contract("greedy_decode needs an encoder-decoder".into()));
        }
        let mut prefixes: Vec<Vec<u32>> = vec![vec![bos]; source.len()];
        for step in 0..len {
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let out = self.forward(&mut tape, &bound, source, Some(&prefixes))?;
            let v = self.spec.vocab_size;
            let t = step + 1;
            let logits = tape.value(out.logits);
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                let row = &logits[(b * t + step) * v..(b * t + step + 1) * v];
                prefix.push(argmax_rows(row, v)[0] as u32);
            }
        }
        Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
    }
}

pub(crate) fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

fn remap_block_name(name: &str, copy_map: &[usize]) -> Option<String> {
    for stack in ["encoder.", "decoder."] {
        if let Some(rest) = name.strip_prefix(stack) {
            let (idx, tail) = rest.split_once('.')?;
            let i: usize = idx.parse().ok()?;
            return Some(format!("{stack}{}.{tail}", copy_map[i] - 1));
        }
    }
    Some(name.to_string())
}

/// Overwrites the student with copies of teacher weights: student block `i`
/// (0-based) gets teacher block `copy_map[i]` (1-based) in every stack, and
/// embeddings and task head are copied verbatim.
pub fn init_student_from_teacher(
    student: &mut TransformerModel,
    teacher: &TransformerModel,
    copy_map: &[usize],
) -> Result<()> {
    let (s, t) = (student.spec(), teacher.spec());
    if s.with_layers(t.num_layers) != *t {
        return Err(Error::Init(format!(
            "student {s:?} is not a shallower copy of teacher {t:?}"
        )));
    }
    if copy_map.len() != s.num_layers {
        return Err(Error::Init(format!(
            "copy map has {} entries for a {}-layer student",
            copy_map.len(),
            s.num_layers
        )));
    }
    if let Some(&bad) = copy_map.iter().find(|&&l| l == 0 || l > t.num_layers) {
        return Err(Error::Init(format!("teacher layer {bad} outside 1..={}", t.num_layers)));
    }
    let names: Vec<String> = student.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src_name = remap_block_name(&name, copy_map)
            .ok_or_else(|| Error::Init(format!("unrecognised parameter name {name}")))?;
        let src = teacher
            .params
            .get(&src_name)
            .ok_or_else(|| Error::Init(format!("teacher lacks parameter {src_name}")))?;
        let dst = student.params.get_mut(&name).expect("name from student");
        dst.copy_from(src)
            .map_err(|e| Error::Init(format!("{name} <- {src_name}: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ModelKind, layers: usize) -> ModelSpec {
        ModelSpec {
            kind,
            num_layers: layers,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size: 7,
            max_seq_len: 6,
            num_classes: 3,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let s = spec(ModelKind::EncoderClassifier, 2);
        let a = build_model(&s, 11).unwrap();
        let b = build_model(&s, 11).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model(&s, 12).unwrap();
        assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    }

    #[test]
    fn forward_returns_one_hidden_state_per_block() {
        let m = build_model(&spec(ModelKind::EncoderClassifier, 3), 1).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let src = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4]];
        let out = m.forward(&mut tape, &bound, &src, None).unwrap();
        assert_eq!(out.encoder_hidden.len(), 3);
        assert!(out.decoder_hidden.is_empty());
        assert_eq!(tape.shape(out.logits), &[2, 3]);
        for &h in &out.encoder_hidden {
            assert_eq!(tape.shape(h), &[2, 4, 8]);
            let v = tape.value(h);
            assert_eq!(&v[..32], &v[32..]);
        }
    }

    #[test]
    fn out_of_range_token_is_an_input_error() {
        let m = build_model(&spec(ModelKind::EncoderClassifier, 1), 1).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let err = m.forward(&mut tape, &bound, &[vec![1, 7]], None).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = m.forward(&mut tape, &bound, &[vec![1; 7]], None).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn encoder_decoder_shapes_and_causality() {
        let m = build_model(&spec(ModelKind::EncoderDecoder, 2), 5).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind_frozen(&mut tape);
        let src = vec![vec![1, 2, 3]];
        let out = m.forward(&mut tape, &bound, &src, Some(&[vec![0, 4, 5, 6]])).unwrap();
        assert_eq!(out.encoder_hidden.len(), 2);
        assert_eq!(out.decoder_hidden.len(), 2);
        assert_eq!(tape.shape(out.logits), &[4, 7]);
        let full = tape.value(out.logits)[..14].to_vec();
        // Changing a later decoder token must not affect earlier positions.
        let out2 = m.forward(&mut tape, &bound, &src, Some(&[vec![0, 4, 1, 1]])).unwrap();
        let prefix = &tape.value(out2.logits)[..14];
        for (a, b) in full.iter().zip(prefix) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_copy_is_exact_and_independent() {
        let teacher = build_model(&spec(ModelKind::EncoderClassifier, 6), 1).unwrap();
        let mut student = build_model(&spec(ModelKind::EncoderClassifier, 3), 2).unwrap();
        init_student_from_teacher(&mut student, &teacher, &[2, 4, 6]).unwrap();
        for (name, t) in student.params().iter() {
            let src = remap_block_name(name, &[2, 4, 6]).unwrap();
            assert_eq!(t.data(), teacher.params().get(&src).unwrap().data(), "{name}");
        }
        let before = teacher.params().fingerprint();
        student.params_mut().get_mut("encoder.0.ln1.gain").unwrap().data_mut()[0] = 42.0;
        assert_eq!(teacher.params().fingerprint(), before);
    }

    #[test]
    fn weight_copy_validation() {
        let teacher = build_model(&spec(ModelKind::EncoderClassifier, 4), 1).unwrap();
        let mut student = build_model(&spec(ModelKind::EncoderClassifier, 2), 2).unwrap();
        assert!(matches!(
            init_student_from_teacher(&mut student, &teacher, &[1]),
            Err(Error::Init(_))
        ));
        assert!(matches!(
            init_student_from_teacher(&mut student, &teacher, &[1, 5]),
            Err(Error::Init(_))
        ));
        let mut wide = spec(ModelKind::EncoderClassifier, 2);
        wide.hidden_dim = 12;
        let mut other = build_model(&wide, 2).unwrap();
        assert!(matches!(
            init_student_from_teacher(&mut other, &teacher, &[1, 2]),
            Err(Error::Init(_))
        ));
    }

    #[test]
    fn greedy_decode_emits_requested_length() {
        let m = build_model(&spec(ModelKind::EncoderDecoder, 1), 3).unwrap();
        let out = m.greedy_decode(&[vec![1, 2, 3], vec![3, 2, 1]], 0, 3).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.len() == 3));
    }
}
