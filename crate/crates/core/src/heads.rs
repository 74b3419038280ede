//! Task heads over the encoder: sentence classification, per-token sequence
//! labeling, and the siamese textual-entailment head built from
//! [u; v; u−v; u⊙v] features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Encoder, ForwardCtx};
use crate::dropattn;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamTrace, Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
    First,
}

/// Pool an l×d hidden matrix into a 1×d vector over the first `valid`
/// (non-pad) rows.
pub fn pool(tape: &mut Tape, x: TensorId, valid: usize, strategy: Pooling) -> Result<TensorId> {
    if valid == 0 {
        return Err(Error::Contract {
            op: "pool",
            msg: "no non-pad positions to pool over".into(),
        });
    }
    match strategy {
        Pooling::Max => tape.max_pool_rows(x, valid),
        Pooling::Mean => tape.mean_pool_rows(x, valid),
        Pooling::First => tape.take_row(x, 0),
    }
}

/// Entailment feature vector [u; v; u−v; u⊙v] from two 1×d sentence vectors.
pub fn entailment_features(tape: &mut Tape, u: TensorId, v: TensorId) -> Result<TensorId> {
    let (su, sv) = (tape.shape(u).to_vec(), tape.shape(v).to_vec());
    if su != sv {
        return Err(Error::Dimension { op: "entailment_features", lhs: su, rhs: sv });
    }
    let diff = tape.sub(u, v)?;
    let prod = tape.mul_elementwise(u, v)?;
    tape.concat_cols(&[u, v, diff, prod])
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn head_dropout_rng(item_seed: u64, site: u64) -> ChaCha8Rng {
    rng::stream(rng::derive_seed2(item_seed, 0x_4EAD, site))
}

/// Pooled sentence vector through a single linear layer d → classes.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w: Tensor,
    pub b: Tensor,
    pub pooling: Pooling,
}

impl ClassifierHead {
    pub fn init(d: usize, classes: usize, pooling: Pooling, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead { w: xavier(d, classes, rng), b: Tensor::zeros(vec![classes]), pooling }
    }

    /// Logits (1×classes) from encoder output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        hidden: TensorId,
        valid: usize,
        ctx: &ForwardCtx<'_>,
    ) -> Result<TensorId> {
        let pooled = pool(tape, hidden, valid, self.pooling)?;
        let pooled = dropattn::standard_dropout(
            tape,
            pooled,
            ctx.dropout_p,
            ctx.mode,
            &mut head_dropout_rng(ctx.item_seed, 0),
        )?;
        let w = trace.bind(tape, "head.w", &self.w);
        let b = trace.bind(tape, "head.b", &self.b);
        let logits = tape.matmul(pooled, w)?;
        tape.add_bias(logits, b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("head.w", &self.w);
        f("head.b", &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("head.w", &mut self.w);
        f("head.b", &mut self.b);
    }
}

/// Per-token linear layer d → tag count.
#[derive(Clone, Debug)]
pub struct TaggerHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl TaggerHead {
    pub fn init(d: usize, tags: usize, rng: &mut ChaCha8Rng) -> Self {
        TaggerHead { w: xavier(d, tags, rng), b: Tensor::zeros(vec![tags]) }
    }

    /// Per-token logits (l×tags).
    pub fn forward(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        hidden: TensorId,
        ctx: &ForwardCtx<'_>,
    ) -> Result<TensorId> {
        let hidden = dropattn::standard_dropout(
            tape,
            hidden,
            ctx.dropout_p,
            ctx.mode,
            &mut head_dropout_rng(ctx.item_seed, 0),
        )?;
        let w = trace.bind(tape, "head.w", &self.w);
        let b = trace.bind(tape, "head.b", &self.b);
        let logits = tape.matmul(hidden, w)?;
        tape.add_bias(logits, b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("head.w", &self.w);
        f("head.b", &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("head.w", &mut self.w);
        f("head.b", &mut self.b);
    }
}

/// 2-layer ReLU MLP 4d → d_h → classes over entailment features. Premise and
/// hypothesis share one encoder.
#[derive(Clone, Debug)]
pub struct EntailmentHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub pooling: Pooling,
}

impl EntailmentHead {
    pub fn init(d: usize, hidden: usize, classes: usize, pooling: Pooling, rng: &mut ChaCha8Rng) -> Self {
        EntailmentHead {
            w1: xavier(4 * d, hidden, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: xavier(hidden, classes, rng),
            b2: Tensor::zeros(vec![classes]),
            pooling,
        }
    }

    /// Logits (1×classes) from the two pooled sentence vectors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        u: TensorId,
        v: TensorId,
        ctx: &ForwardCtx<'_>,
    ) -> Result<TensorId> {
        let features = entailment_features(tape, u, v)?;
        let features = dropattn::standard_dropout(
            tape,
            features,
            ctx.dropout_p,
            ctx.mode,
            &mut head_dropout_rng(ctx.item_seed, 0),
        )?;
        let w1 = trace.bind(tape, "head.w1", &self.w1);
        let b1 = trace.bind(tape, "head.b1", &self.b1);
        let w2 = trace.bind(tape, "head.w2", &self.w2);
        let b2 = trace.bind(tape, "head.b2", &self.b2);
        let pre = tape.matmul(features, w1)?;
        let pre = tape.add_bias(pre, b1)?;
        let act = tape.relu(pre)?;
        let act = dropattn::standard_dropout(
            tape,
            act,
            ctx.dropout_p,
            ctx.mode,
            &mut head_dropout_rng(ctx.item_seed, 1),
        )?;
        let logits = tape.matmul(act, w2)?;
        tape.add_bias(logits, b2)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("head.w1", &self.w1);
        f("head.b1", &self.b1);
        f("head.w2", &self.w2);
        f("head.b2", &self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("head.w1", &mut self.w1);
        f("head.b1", &mut self.b1);
        f("head.w2", &mut self.w2);
        f("head.b2", &mut self.b2);
    }
}

/// Encoder + classification head.
#[derive(Clone, Debug)]
pub struct TextClassifier {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl TextClassifier {
    pub fn init(
        dims: crate::attention::EncoderDims,
        classes: usize,
        pooling: Pooling,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(rng::derive_seed(seed, 0x_1417));
        Ok(TextClassifier {
            encoder: Encoder::init(dims, &mut r)?,
            head: ClassifierHead::init(dims.d, classes, pooling, &mut r),
        })
    }

    /// Cross-entropy loss for one example; also returns the logits node and
    /// the attention weights used.
    pub fn loss(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        tokens: &[u32],
        label: usize,
        ctx: &ForwardCtx<'_>,
    ) -> Result<(TensorId, TensorId, Vec<Vec<TensorId>>)> {
        let enc = self.encoder.forward(tape, trace, tokens, ctx)?;
        let logits = self.head.forward(tape, trace, enc.hidden, tokens.len(), ctx)?;
        let loss = tape.cross_entropy(logits, &[label])?;
        Ok((loss, logits, enc.lambdas))
    }

    pub fn predict(&self, tokens: &[u32]) -> Result<usize> {
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let ctx = ForwardCtx::inference();
        let enc = self.encoder.forward(&mut tape, &mut trace, tokens, &ctx)?;
        let logits = self.head.forward(&mut tape, &mut trace, enc.hidden, tokens.len(), &ctx)?;
        Ok(argmax(tape.data(logits)))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_params(f);
        self.head.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_params_mut(f);
        self.head.visit_mut(f);
    }
}

/// Encoder + per-token tagging head.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub encoder: Encoder,
    pub head: TaggerHead,
}

impl Tagger {
    pub fn init(dims: crate::attention::EncoderDims, tags: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(rng::derive_seed(seed, 0x_7A6));
        Ok(Tagger {
            encoder: Encoder::init(dims, &mut r)?,
            head: TaggerHead::init(dims.d, tags, &mut r),
        })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        tokens: &[u32],
        tags: &[usize],
        ctx: &ForwardCtx<'_>,
    ) -> Result<(TensorId, TensorId, Vec<Vec<TensorId>>)> {
        if tokens.len() != tags.len() {
            return Err(Error::Contract {
                op: "Tagger::loss",
                msg: format!("{} tokens vs {} tags", tokens.len(), tags.len()),
            });
        }
        let enc = self.encoder.forward(tape, trace, tokens, ctx)?;
        let logits = self.head.forward(tape, trace, enc.hidden, ctx)?;
        let loss = tape.cross_entropy(logits, tags)?;
        Ok((loss, logits, enc.lambdas))
    }

    pub fn predict(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let ctx = ForwardCtx::inference();
        let enc = self.encoder.forward(&mut tape, &mut trace, tokens, &ctx)?;
        let logits = self.head.forward(&mut tape, &mut trace, enc.hidden, &ctx)?;
        let t = tape.value(logits);
        Ok((0..t.rows()).map(|i| argmax(t.row(i))).collect())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_params(f);
        self.head.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_params_mut(f);
        self.head.visit_mut(f);
    }
}

/// Siamese entailment model: one encoder applied to premise and hypothesis
/// with identical parameters, then the feature MLP.
#[derive(Clone, Debug)]
pub struct EntailmentModel {
    pub encoder: Encoder,
    pub head: EntailmentHead,
}

impl EntailmentModel {
    pub fn init(
        dims: crate::attention::EncoderDims,
        classes: usize,
        pooling: Pooling,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(rng::derive_seed(seed, 0x_E27));
        Ok(EntailmentModel {
            encoder: Encoder::init(dims, &mut r)?,
            head: EntailmentHead::init(dims.d, dims.d, classes, pooling, &mut r),
        })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        premise: &[u32],
        hypothesis: &[u32],
        label: usize,
        ctx: &ForwardCtx<'_>,
    ) -> Result<(TensorId, TensorId, Vec<Vec<TensorId>>)> {
        // Two passes through the same encoder; the second pass derives
        // distinct RNG streams so its masks are independent.
        let enc_p = self.encoder.forward(tape, trace, premise, ctx)?;
        let mut ctx_h = *ctx;
        ctx_h.item_seed = rng::derive_seed(ctx.item_seed, 0x_47);
        let enc_h = self.encoder.forward(tape, trace, hypothesis, &ctx_h)?;
        let u = pool(tape, enc_p.hidden, premise.len(), self.head.pooling)?;
        let v = pool(tape, enc_h.hidden, hypothesis.len(), self.head.pooling)?;
        let logits = self.head.forward(tape, trace, u, v, ctx)?;
        let loss = tape.cross_entropy(logits, &[label])?;
        let mut lambdas = enc_p.lambdas;
        lambdas.extend(enc_h.lambdas);
        Ok((loss, logits, lambdas))
    }

    pub fn predict(&self, premise: &[u32], hypothesis: &[u32]) -> Result<usize> {
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let ctx = ForwardCtx::inference();
        let enc_p = self.encoder.forward(&mut tape, &mut trace, premise, &ctx)?;
        let enc_h = self.encoder.forward(&mut tape, &mut trace, hypothesis, &ctx)?;
        let u = pool(&mut tape, enc_p.hidden, premise.len(), self.head.pooling)?;
        let v = pool(&mut tape, enc_h.hidden, hypothesis.len(), self.head.pooling)?;
        let logits = self.head.forward(&mut tape, &mut trace, u, v, &ctx)?;
        Ok(argmax(tape.data(logits)))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_params(f);
        self.head.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_params_mut(f);
        self.head.visit_mut(f);
    }
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
