//! Scaled dot-product and multi-head attention, pre-LN residual encoder
//! layers, and sinusoidal positional embeddings.
//!
//! Attention exposes a weight-transform hook: after the row-wise softmax the
//! l×l weight matrix Λ is passed to an optional caller-supplied transform
//! (DropAttention during training, identity otherwise) before the weighted
//! sum over values. The transformed Λ is surfaced so diagnostics can read the
//! weights actually used.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dropattn::{self, DropSpec, Mode};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamTrace, Tape, Tensor, TensorId};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f32 = 1e-5;

/// Additive score for padded key positions, applied before the softmax.
const PAD_SCORE: f32 = -1e9;

/// One head's attention-weight transform: Λ → Λ′ on the tape. Must preserve
/// shape.
pub type WeightTransform<'a> = &'a mut dyn FnMut(&mut Tape, TensorId) -> Result<TensorId>;

/// Per-head projection matrices plus the shared output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// (h·d_k) × d output projection.
    pub wo: Tensor,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

impl MultiHeadParams {
    /// Initialise h heads of width d_k = d / h. Requires h to divide d.
    pub fn init(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if h == 0 || d % h != 0 {
            return Err(Error::Config {
                field: "model.heads".into(),
                msg: format!("head count {h} must divide model width {d}"),
            });
        }
        let d_k = d / h;
        let wq = (0..h).map(|_| xavier(d, d_k, rng)).collect();
        let wk = (0..h).map(|_| xavier(d, d_k, rng)).collect();
        let wv = (0..h).map(|_| xavier(d, d_k, rng)).collect();
        let wo = xavier(h * d_k, d, rng);
        Ok(MultiHeadParams { wq, wk, wv, wo })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn head_dim(&self) -> usize {
        self.wq[0].cols()
    }

    pub fn model_dim(&self) -> usize {
        self.wq[0].rows()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for i in 0..self.heads() {
            f(&format!("{prefix}.head{i}.wq"), &self.wq[i]);
            f(&format!("{prefix}.head{i}.wk"), &self.wk[i]);
            f(&format!("{prefix}.head{i}.wv"), &self.wv[i]);
        }
        f(&format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for i in 0..self.wq.len() {
            f(&format!("{prefix}.head{i}.wq"), &mut self.wq[i]);
            f(&format!("{prefix}.head{i}.wk"), &mut self.wk[i]);
            f(&format!("{prefix}.head{i}.wv"), &mut self.wv[i]);
        }
        f(&format!("{prefix}.wo"), &mut self.wo);
    }

    fn bind(&self, tape: &mut Tape, trace: &mut ParamTrace, prefix: &str) -> BoundMultiHead {
        let mut bound = BoundMultiHead { wq: vec![], wk: vec![], wv: vec![], wo: None };
        for i in 0..self.heads() {
            bound.wq.push(trace.bind(tape, &format!("{prefix}.head{i}.wq"), &self.wq[i]));
            bound.wk.push(trace.bind(tape, &format!("{prefix}.head{i}.wk"), &self.wk[i]));
            bound.wv.push(trace.bind(tape, &format!("{prefix}.head{i}.wv"), &self.wv[i]));
        }
        bound.wo = Some(trace.bind(tape, &format!("{prefix}.wo"), &self.wo));
        bound
    }
}

pub struct BoundMultiHead {
    wq: Vec<TensorId>,
    wk: Vec<TensorId>,
    wv: Vec<TensorId>,
    wo: Option<TensorId>,
}

/// Single-head scaled dot-product attention over an l×d input with per-head
/// projections already on the tape. Key positions at or past `valid` receive
/// a large negative pre-softmax score so Λ assigns them zero weight.
///
/// Returns (output l×d_k, Λ as actually used).
pub fn scaled_dot_attention(
    tape: &mut Tape,
    h: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    valid: usize,
    transform: Option<WeightTransform<'_>>,
) -> Result<(TensorId, TensorId)> {
    let l = tape.value(h).rows();
    if l == 0 || valid == 0 || valid > l {
        return Err(Error::Contract {
            op: "scaled_dot_attention",
            msg: format!("valid length {valid} out of range for {l} positions"),
        });
    }
    let d_k = tape.value(wq).cols();
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let mut scaled = tape.scale(scores, 1.0 / (d_k as f32).sqrt())?;
    if valid < l {
        let mut pad = vec![0.0f32; l * l];
        for i in 0..l {
            for j in valid..l {
                pad[i * l + j] = PAD_SCORE;
            }
        }
        let pad = tape.constant(Tensor::matrix(l, l, pad)?);
        scaled = tape.add(scaled, pad)?;
    }
    let lambda = tape.softmax_rows(scaled)?;
    let lambda_used = match transform {
        Some(t) => {
            let out = t(tape, lambda)?;
            if tape.shape(out) != tape.shape(lambda) {
                return Err(Error::Contract {
                    op: "scaled_dot_attention",
                    msg: format!(
                        "weight transform changed shape {:?} -> {:?}",
                        tape.shape(lambda),
                        tape.shape(out)
                    ),
                });
            }
            out
        }
        None => lambda,
    };
    let out = tape.matmul(lambda_used, v)?;
    Ok((out, lambda_used))
}

/// Multi-head attention: concat(head_1..head_h) · W^O. Each head receives its
/// own weight transform via `transform(tape, head, Λ)`.
pub fn multi_head<F>(
    tape: &mut Tape,
    h: TensorId,
    params: &BoundMultiHead,
    valid: usize,
    mut transform: F,
) -> Result<(TensorId, Vec<TensorId>)>
where
    F: FnMut(&mut Tape, usize, TensorId) -> Result<TensorId>,
{
    let n_heads = params.wq.len();
    let d_k = tape.value(params.wq[0]).cols();
    for i in 0..n_heads {
        if tape.value(params.wq[i]).cols() != d_k
            || tape.value(params.wk[i]).cols() != d_k
            || tape.value(params.wv[i]).cols() != d_k
        {
            return Err(Error::Contract {
                op: "multi_head",
                msg: format!("head {i} projection widths disagree"),
            });
        }
    }
    let mut outputs = Vec::with_capacity(n_heads);
    let mut lambdas = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let mut hook = |tape: &mut Tape, lambda: TensorId| transform(tape, i, lambda);
        let (out, lam) = scaled_dot_attention(
            tape,
            h,
            params.wq[i],
            params.wk[i],
            params.wv[i],
            valid,
            Some(&mut hook),
        )?;
        outputs.push(out);
        lambdas.push(lam);
    }
    let cat = tape.concat_cols(&outputs)?;
    let wo = params.wo.expect("bound output projection");
    let out = tape.matmul(cat, wo)?;
    Ok((out, lambdas))
}

/// Encoder layer parameters: multi-head attention, a d→d_ff→d ReLU MLP and
/// two layer-norm gain/bias pairs.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn: MultiHeadParams,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl EncoderLayerParams {
    pub fn init(d: usize, d_ff: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderLayerParams {
            attn: MultiHeadParams::init(d, h, rng)?,
            ff_w1: xavier(d, d_ff, rng),
            ff_b1: Tensor::zeros(vec![d_ff]),
            ff_w2: xavier(d_ff, d, rng),
            ff_b2: Tensor::zeros(vec![d]),
            ln1_gain: Tensor::filled(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(&format!("{prefix}.ff.w1"), &self.ff_w1);
        f(&format!("{prefix}.ff.b1"), &self.ff_b1);
        f(&format!("{prefix}.ff.w2"), &self.ff_w2);
        f(&format!("{prefix}.ff.b2"), &self.ff_b2);
        f(&format!("{prefix}.ln1.gain"), &self.ln1_gain);
        f(&format!("{prefix}.ln1.bias"), &self.ln1_bias);
        f(&format!("{prefix}.ln2.gain"), &self.ln2_gain);
        f(&format!("{prefix}.ln2.bias"), &self.ln2_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(&format!("{prefix}.ff.w1"), &mut self.ff_w1);
        f(&format!("{prefix}.ff.b1"), &mut self.ff_b1);
        f(&format!("{prefix}.ff.w2"), &mut self.ff_w2);
        f(&format!("{prefix}.ff.b2"), &mut self.ff_b2);
        f(&format!("{prefix}.ln1.gain"), &mut self.ln1_gain);
        f(&format!("{prefix}.ln1.bias"), &mut self.ln1_bias);
        f(&format!("{prefix}.ln2.gain"), &mut self.ln2_gain);
        f(&format!("{prefix}.ln2.bias"), &mut self.ln2_bias);
    }
}

/// Everything a forward pass needs to know about dropping and randomness.
/// Each (batch item, layer, head) derives its own RNG stream from
/// `item_seed`, so parallel evaluation stays reproducible.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// DropAttention spec applied to attention weights during training.
    pub attn_drop: Option<DropSpec>,
    /// Per-layer on/off switch; `None` enables every layer.
    pub attn_drop_layers: Option<&'a [bool]>,
    /// Standard dropout rate for FC activations (encoder and heads).
    pub dropout_p: f32,
    pub item_seed: u64,
}

impl ForwardCtx<'static> {
    pub fn inference() -> Self {
        ForwardCtx {
            mode: Mode::Inference,
            attn_drop: None,
            attn_drop_layers: None,
            dropout_p: 0.0,
            item_seed: 0,
        }
    }
}

impl<'a> ForwardCtx<'a> {
    fn attn_drop_for_layer(&self, layer: usize) -> Option<DropSpec> {
        if self.mode != Mode::Training {
            return None;
        }
        let enabled = self.attn_drop_layers.map_or(true, |flags| flags.get(layer).copied().unwrap_or(true));
        if enabled {
            self.attn_drop
        } else {
            None
        }
    }

    fn dropout_rng(&self, layer: usize, site: u64) -> ChaCha8Rng {
        rng::stream(rng::derive_seed2(self.item_seed, 0x_D0 + layer as u64, site))
    }

    fn attn_rng(&self, layer: usize, head: usize) -> ChaCha8Rng {
        rng::stream(rng::derive_seed2(self.item_seed, 0x_A0 + layer as u64, head as u64))
    }
}

/// Pre-LN residual encoder layer:
/// Z = H + Dropout(MultiHead(LN(H))), H̃ = Z + Dropout(MLP(LN(Z))).
pub fn encoder_layer(
    tape: &mut Tape,
    trace: &mut ParamTrace,
    h: TensorId,
    params: &EncoderLayerParams,
    prefix: &str,
    valid: usize,
    layer_index: usize,
    ctx: &ForwardCtx<'_>,
) -> Result<(TensorId, Vec<TensorId>)> {
    let bound = params.attn.bind(tape, trace, &format!("{prefix}.attn"));
    let ln1_gain = trace.bind(tape, &format!("{prefix}.ln1.gain"), &params.ln1_gain);
    let ln1_bias = trace.bind(tape, &format!("{prefix}.ln1.bias"), &params.ln1_bias);
    let ln2_gain = trace.bind(tape, &format!("{prefix}.ln2.gain"), &params.ln2_gain);
    let ln2_bias = trace.bind(tape, &format!("{prefix}.ln2.bias"), &params.ln2_bias);
    let ff_w1 = trace.bind(tape, &format!("{prefix}.ff.w1"), &params.ff_w1);
    let ff_b1 = trace.bind(tape, &format!("{prefix}.ff.b1"), &params.ff_b1);
    let ff_w2 = trace.bind(tape, &format!("{prefix}.ff.w2"), &params.ff_w2);
    let ff_b2 = trace.bind(tape, &format!("{prefix}.ff.b2"), &params.ff_b2);

    let drop_spec = ctx.attn_drop_for_layer(layer_index);
    let ln1 = tape.layer_norm(h, ln1_gain, ln1_bias, LN_EPS)?;
    let (mh, lambdas) = multi_head(tape, ln1, &bound, valid, |tape, head, lambda| {
        match &drop_spec {
            Some(spec) => {
                let mut head_rng = ctx.attn_rng(layer_index, head);
                dropattn::apply_dropattention_on_tape(tape, lambda, valid, spec, &mut head_rng)
            }
            None => Ok(lambda),
        }
    })?;
    let mh = dropattn::standard_dropout(
        tape,
        mh,
        ctx.dropout_p,
        ctx.mode,
        &mut ctx.dropout_rng(layer_index, 0),
    )?;
    let z = tape.add(h, mh)?;

    let ln2 = tape.layer_norm(z, ln2_gain, ln2_bias, LN_EPS)?;
    let pre = tape.matmul(ln2, ff_w1)?;
    let pre = tape.add_bias(pre, ff_b1)?;
    let act = tape.relu(pre)?;
    let ff = tape.matmul(act, ff_w2)?;
    let ff = tape.add_bias(ff, ff_b2)?;
    let ff = dropattn::standard_dropout(
        tape,
        ff,
        ctx.dropout_p,
        ctx.mode,
        &mut ctx.dropout_rng(layer_index, 1),
    )?;
    let out = tape.add(z, ff)?;
    Ok((out, lambdas))
}

/// Fixed sinusoidal positional embedding: PE(pos, 2i) = sin(pos/10000^(2i/d)),
/// PE(pos, 2i+1) = cos(pos/10000^(2i/d)). Requires even d.
pub fn sinusoidal_pe(l: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Contract {
            op: "sinusoidal_pe",
            msg: format!("width must be even, got {d}"),
        });
    }
    let mut data = vec![0.0f32; l * d];
    for pos in 0..l {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin() as f32;
            data[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::matrix(l, d, data)
}

/// Model dimensions shared by every task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

/// Token embedding plus a stack of encoder layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub dims: EncoderDims,
    pub embedding: Tensor,
    pub layers: Vec<EncoderLayerParams>,
}

pub struct EncoderOutput {
    /// Final hidden states, l×d.
    pub hidden: TensorId,
    /// Λ actually used, per layer then per head.
    pub lambdas: Vec<Vec<TensorId>>,
}

impl Encoder {
    pub fn init(dims: EncoderDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.heads == 0 || dims.d % dims.heads != 0 {
            return Err(Error::Config {
                field: "model.heads".into(),
                msg: format!("head count {} must divide model width {}", dims.heads, dims.d),
            });
        }
        if dims.d % 2 != 0 {
            return Err(Error::Config {
                field: "model.d".into(),
                msg: format!("model width must be even for sinusoidal embeddings, got {}", dims.d),
            });
        }
        let emb_data: Vec<f32> =
            (0..dims.vocab * dims.d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let embedding = Tensor::matrix(dims.vocab, dims.d, emb_data)?;
        let layers = (0..dims.layers)
            .map(|_| EncoderLayerParams::init(dims.d, dims.d_ff, dims.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { dims, embedding, layers })
    }

    /// Encode a token sequence; all positions are valid.
    pub fn forward(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        tokens: &[u32],
        ctx: &ForwardCtx<'_>,
    ) -> Result<EncoderOutput> {
        self.forward_with_valid(tape, trace, tokens, tokens.len(), ctx)
    }

    /// Encode a right-padded token sequence; positions at or past `valid` are
    /// treated as padding (zero attention weight, never dropped).
    pub fn forward_with_valid(
        &self,
        tape: &mut Tape,
        trace: &mut ParamTrace,
        tokens: &[u32],
        valid: usize,
        ctx: &ForwardCtx<'_>,
    ) -> Result<EncoderOutput> {
        if tokens.is_empty() || valid == 0 || valid > tokens.len() {
            return Err(Error::Contract {
                op: "Encoder::forward",
                msg: format!("valid length {} out of range for {} tokens", valid, tokens.len()),
            });
        }
        let table = trace.bind(tape, "encoder.embedding", &self.embedding);
        let emb = tape.embedding_lookup(table, tokens)?;
        let pe = tape.constant(sinusoidal_pe(tokens.len(), self.dims.d)?);
        let mut hidden = tape.add(emb, pe)?;
        let mut lambdas = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, layer_lambdas) = encoder_layer(
                tape,
                trace,
                hidden,
                layer,
                &format!("encoder.layer{i}"),
                valid,
                i,
                ctx,
            )?;
            hidden = next;
            lambdas.push(layer_lambdas);
        }
        Ok(EncoderOutput { hidden, lambdas })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("encoder.embedding", &self.embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("encoder.layer{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("encoder.embedding", &mut self.embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("encoder.layer{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn bind_head(
        tape: &mut Tape,
        trace: &mut ParamTrace,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
    ) -> (TensorId, TensorId, TensorId) {
        (
            trace.bind(tape, "wq", wq),
            trace.bind(tape, "wk", wk),
            trace.bind(tape, "wv", wv),
        )
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let l = 4;
        let d = 3;
        let mut r = stream(1);
        let h_data: Vec<f32> = (0..l * d).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
        let wq = Tensor::zeros(vec![d, 2]);
        let wk = xavier(d, 2, &mut r);
        let wv = xavier(d, 2, &mut r);

        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h = tape.constant(Tensor::matrix(l, d, h_data).unwrap());
        let (q, k, v) = bind_head(&mut tape, &mut trace, &wq, &wk, &wv);
        let (out, lam) = scaled_dot_attention(&mut tape, h, q, k, v, l, None).unwrap();

        for i in 0..l {
            for j in 0..l {
                assert!((tape.value(lam).at(i, j) - 1.0 / l as f32).abs() < 1e-6);
            }
        }
        // Every output row equals the mean of V's rows.
        let v_val = tape.value(v);
        let h_val = tape.value(h);
        let mut v_rows = vec![0.0f64; 2];
        for i in 0..l {
            for j in 0..2 {
                let mut acc = 0.0f64;
                for p in 0..d {
                    acc += h_val.at(i, p) as f64 * v_val.at(p, j) as f64;
                }
                v_rows[j] += acc / l as f64;
            }
        }
        for i in 0..l {
            for j in 0..2 {
                assert!((tape.value(out).at(i, j) as f64 - v_rows[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut r = stream(2);
        let wq = xavier(3, 2, &mut r);
        let wk = xavier(3, 2, &mut r);
        let wv = xavier(3, 2, &mut r);
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h = tape.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.8]).unwrap());
        let (q, k, v) = bind_head(&mut tape, &mut trace, &wq, &wk, &wv);
        let (out, lam) = scaled_dot_attention(&mut tape, h, q, k, v, 1, None).unwrap();
        assert_eq!(tape.data(lam), &[1.0]);
        // With Λ = [[1]] the output is exactly the projected value row.
        let projected = tape.matmul(h, v).unwrap();
        assert_eq!(tape.data(out), tape.data(projected));
    }

    #[test]
    fn two_position_worked_example_matches_direct_formula() {
        // l=2, d=1, d_k=1 with hand-picked weights; everything scalar.
        let h_vals = [0.7f64, -0.4];
        let (wq, wk, wv) = (0.9f64, -1.1, 0.6);
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h = tape.constant(Tensor::matrix(2, 1, vec![h_vals[0] as f32, h_vals[1] as f32]).unwrap());
        let (q, k, v) = bind_head(
            &mut tape,
            &mut trace,
            &Tensor::matrix(1, 1, vec![wq as f32]).unwrap(),
            &Tensor::matrix(1, 1, vec![wk as f32]).unwrap(),
            &Tensor::matrix(1, 1, vec![wv as f32]).unwrap(),
        );
        let (out, lam) = scaled_dot_attention(&mut tape, h, q, k, v, 2, None).unwrap();

        // Direct high-precision evaluation of softmax(QKᵀ/√1)·V.
        let qv: Vec<f64> = h_vals.iter().map(|x| x * wq).collect();
        let kv: Vec<f64> = h_vals.iter().map(|x| x * wk).collect();
        let vv: Vec<f64> = h_vals.iter().map(|x| x * wv).collect();
        for i in 0..2 {
            let s0 = qv[i] * kv[0];
            let s1 = qv[i] * kv[1];
            let m = s0.max(s1);
            let e0 = (s0 - m).exp();
            let e1 = (s1 - m).exp();
            let p0 = e0 / (e0 + e1);
            let p1 = e1 / (e0 + e1);
            assert!((tape.value(lam).at(i, 0) as f64 - p0).abs() < 1e-5);
            assert!((tape.value(lam).at(i, 1) as f64 - p1).abs() < 1e-5);
            let expect = p0 * vv[0] + p1 * vv[1];
            assert!((tape.value(out).at(i, 0) as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_changing_transform_is_rejected() {
        let mut r = stream(3);
        let wq = xavier(3, 2, &mut r);
        let wk = xavier(3, 2, &mut r);
        let wv = xavier(3, 2, &mut r);
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h = tape.constant(Tensor::matrix(3, 3, vec![0.1; 9]).unwrap());
        let (q, k, v) = bind_head(&mut tape, &mut trace, &wq, &wk, &wv);
        let mut bad: Box<dyn FnMut(&mut Tape, TensorId) -> crate::Result<TensorId>> =
            Box::new(|tape: &mut Tape, lam: TensorId| tape.take_row(lam, 0));
        let err = scaled_dot_attention(&mut tape, h, q, k, v, 3, Some(bad.as_mut()));
        assert!(matches!(err, Err(Error::Contract { .. })));
    }

    #[test]
    fn single_head_multi_head_reduces_to_attention_plus_projection() {
        let d = 4;
        let mut r = stream(4);
        let params = MultiHeadParams::init(d, 1, &mut r).unwrap();
        let h_data: Vec<f32> = (0..3 * d).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();

        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h = tape.constant(Tensor::matrix(3, d, h_data.clone()).unwrap());
        let bound = params.bind(&mut tape, &mut trace, "attn");
        let (mh_out, _) = multi_head(&mut tape, h, &bound, 3, |_, _, lam| Ok(lam)).unwrap();

        let mut tape2 = Tape::new();
        let mut trace2 = ParamTrace::new();
        let h2 = tape2.constant(Tensor::matrix(3, d, h_data).unwrap());
        let (q, k, v) = bind_head(&mut tape2, &mut trace2, &params.wq[0], &params.wk[0], &params.wv[0]);
        let (single, _) = scaled_dot_attention(&mut tape2, h2, q, k, v, 3, None).unwrap();
        let wo = tape2.constant(params.wo.clone());
        let proj = tape2.matmul(single, wo).unwrap();

        for (a, b) in tape.data(mh_out).iter().zip(tape2.data(proj)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn multi_head_output_shape_is_input_shape() {
        for h_count in [1usize, 2, 4] {
            let d = 8;
            let mut r = stream(5);
            let params = MultiHeadParams::init(d, h_count, &mut r).unwrap();
            let mut tape = Tape::new();
            let mut trace = ParamTrace::new();
            let h = tape.constant(Tensor::filled(vec![5, d], 0.3));
            let bound = params.bind(&mut tape, &mut trace, "attn");
            let (out, lambdas) = multi_head(&mut tape, h, &bound, 5, |_, _, lam| Ok(lam)).unwrap();
            assert_eq!(tape.shape(out), &[5, d]);
            assert_eq!(lambdas.len(), h_count);
        }
    }

    #[test]
    fn permuting_heads_with_wo_blocks_leaves_output_unchanged() {
        let d = 6;
        let heads = 3;
        let d_k = d / heads;
        let mut r = stream(6);
        let params = MultiHeadParams::init(d, heads, &mut r).unwrap();
        let h_data: Vec<f32> = (0..4 * d).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();

        let run = |p: &MultiHeadParams| {
            let mut tape = Tape::new();
            let mut trace = ParamTrace::new();
            let h = tape.constant(Tensor::matrix(4, d, h_data.clone()).unwrap());
            let bound = p.bind(&mut tape, &mut trace, "attn");
            let (out, _) = multi_head(&mut tape, h, &bound, 4, |_, _, lam| Ok(lam)).unwrap();
            tape.data(out).to_vec()
        };

        let baseline = run(&params);

        // Rotate heads by one and rotate the matching d_k-row blocks of wo.
        let perm = [1usize, 2, 0];
        let mut permuted = params.clone();
        permuted.wq = perm.iter().map(|&i| params.wq[i].clone()).collect();
        permuted.wk = perm.iter().map(|&i| params.wk[i].clone()).collect();
        permuted.wv = perm.iter().map(|&i| params.wv[i].clone()).collect();
        let mut wo_data = vec![0.0f32; d * d];
        for (new_head, &old_head) in perm.iter().enumerate() {
            for row in 0..d_k {
                let src = params.wo.row(old_head * d_k + row);
                wo_data[(new_head * d_k + row) * d..(new_head * d_k + row + 1) * d]
                    .copy_from_slice(src);
            }
        }
        permuted.wo = Tensor::matrix(d, d, wo_data).unwrap();

        let swapped = run(&permuted);
        for (a, b) in baseline.iter().zip(&swapped) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_layer_with_zero_output_weights_is_identity() {
        let d = 4;
        let mut r = stream(7);
        let mut params = EncoderLayerParams::init(d, 8, 2, &mut r).unwrap();
        params.attn.wo = Tensor::zeros(vec![d, d]);
        params.ff_w2 = Tensor::zeros(vec![8, d]);

        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h_data: Vec<f32> = (0..3 * d).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
        let h = tape.constant(Tensor::matrix(3, d, h_data.clone()).unwrap());
        let ctx = ForwardCtx::inference();
        let (out, _) = encoder_layer(&mut tape, &mut trace, h, &params, "layer0", 3, 0, &ctx).unwrap();
        assert_eq!(tape.data(out), h_data.as_slice());
    }

    #[test]
    fn encoder_layer_preserves_shape_and_stays_finite() {
        let mut r = stream(8);
        let params = EncoderLayerParams::init(6, 12, 2, &mut r).unwrap();
        for trial in 0..100 {
            let l = 1 + (trial % 7);
            let data: Vec<f32> = (0..l * 6).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
            let mut tape = Tape::new();
            let mut trace = ParamTrace::new();
            let h = tape.constant(Tensor::matrix(l, 6, data).unwrap());
            let ctx = ForwardCtx::inference();
            let (out, _) =
                encoder_layer(&mut tape, &mut trace, h, &params, "layer0", l, 0, &ctx).unwrap();
            assert_eq!(tape.shape(out), &[l, 6]);
            assert!(tape.value(out).all_finite());
        }
    }

    #[test]
    fn sinusoidal_position_zero_alternates_zero_one() {
        let pe = sinusoidal_pe(3, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
    }

    #[test]
    fn sinusoidal_values_bounded() {
        let pe = sinusoidal_pe(64, 16).unwrap();
        assert!(pe.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn sinusoidal_pinned_values() {
        let pe = sinusoidal_pe(2, 4).unwrap();
        let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (j, &e) in expect.iter().enumerate() {
            assert!((pe.at(1, j) as f64 - e).abs() < 1e-6, "col {j}");
        }
    }

    #[test]
    fn sinusoidal_rejects_odd_width() {
        assert!(sinusoidal_pe(4, 5).is_err());
    }

    #[test]
    fn encoder_is_deterministic_without_dropping() {
        let dims = EncoderDims { vocab: 11, d: 8, d_ff: 16, heads: 2, layers: 2, max_len: 16 };
        let enc = Encoder::init(dims, &mut stream(9)).unwrap();
        let tokens = [3u32, 1, 7, 2, 9];
        let run = || {
            let mut tape = Tape::new();
            let mut trace = ParamTrace::new();
            let out = enc.forward(&mut tape, &mut trace, &tokens, &ForwardCtx::inference()).unwrap();
            tape.data(out.hidden).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padded_positions_get_zero_attention_weight() {
        let dims = EncoderDims { vocab: 11, d: 8, d_ff: 16, heads: 2, layers: 1, max_len: 16 };
        let enc = Encoder::init(dims, &mut stream(10)).unwrap();
        let tokens = [3u32, 1, 7, 0, 0];
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let out = enc
            .forward_with_valid(&mut tape, &mut trace, &tokens, 3, &ForwardCtx::inference())
            .unwrap();
        for lam in &out.lambdas[0] {
            let v = tape.value(*lam);
            for i in 0..5 {
                let sum: f64 = v.row(i).iter().map(|&x| x as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 3..5 {
                    assert!(v.at(i, j) < 1e-12, "pad column carries weight {}", v.at(i, j));
                }
            }
        }
    }

    #[test]
    fn zero_rate_dropattention_is_bit_exact_noop() {
        use crate::dropattn::{Rescale, Variant};
        let dims = EncoderDims { vocab: 11, d: 8, d_ff: 16, heads: 2, layers: 2, max_len: 16 };
        let enc = Encoder::init(dims, &mut stream(14)).unwrap();
        let tokens = [3u32, 1, 7, 2];
        let spec =
            DropSpec::new(Variant::Column, 0.0, 2, Rescale::Normalized, Mode::Training).unwrap();
        let run = |attn_drop: Option<DropSpec>| {
            let ctx = ForwardCtx {
                mode: Mode::Training,
                attn_drop,
                attn_drop_layers: None,
                dropout_p: 0.0,
                item_seed: 21,
            };
            let mut tape = Tape::new();
            let mut trace = ParamTrace::new();
            let out = enc.forward(&mut tape, &mut trace, &tokens, &ctx).unwrap();
            tape.data(out.hidden).to_vec()
        };
        assert_eq!(run(Some(spec)), run(None));
    }

    #[test]
    fn attention_rows_stay_stochastic_under_normalized_dropattention() {
        use crate::dropattn::{Rescale, Variant};
        let dims = EncoderDims { vocab: 11, d: 8, d_ff: 16, heads: 2, layers: 2, max_len: 16 };
        let enc = Encoder::init(dims, &mut stream(12)).unwrap();
        let tokens = [3u32, 1, 7, 2, 9, 4];
        let spec =
            DropSpec::new(Variant::Element, 0.3, 2, Rescale::Normalized, Mode::Training).unwrap();
        let ctx = ForwardCtx {
            mode: Mode::Training,
            attn_drop: Some(spec),
            attn_drop_layers: None,
            dropout_p: 0.0,
            item_seed: 99,
        };
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let out = enc.forward(&mut tape, &mut trace, &tokens, &ctx).unwrap();
        for layer in &out.lambdas {
            for lam in layer {
                let v = tape.value(*lam);
                for i in 0..6 {
                    let sum: f64 = v.row(i).iter().map(|&x| x as f64).sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
                }
            }
        }
    }

    /// Gradient of a scalar loss through one attention head matches central
    /// finite differences on an independent f64 evaluation.
    #[test]
    fn attention_gradients_match_finite_differences() {
        let l = 3;
        let d = 3;
        let d_k = 2;
        let mut r = stream(13);
        let h_data: Vec<f32> = (0..l * d).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)).collect();
        let wq = xavier(d, d_k, &mut r);
        let wk = xavier(d, d_k, &mut r);
        let wv = xavier(d, d_k, &mut r);

        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let h = tape.constant(Tensor::matrix(l, d, h_data.clone()).unwrap());
        let (q, k, v) = bind_head(&mut tape, &mut trace, &wq, &wk, &wv);
        let (out, _) = scaled_dot_attention(&mut tape, h, q, k, v, l, None).unwrap();
        let loss = tape.sum_all(out).unwrap();
        let grads = tape.backward(loss).unwrap();

        let eval = |wq_d: &[f64], wk_d: &[f64], wv_d: &[f64]| -> f64 {
            let mm = |a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize| -> Vec<f64> {
                let mut out = vec![0.0; ar * bc];
                for i in 0..ar {
                    for j in 0..bc {
                        for p in 0..ac {
                            out[i * bc + j] += a[i * ac + p] * b[p * bc + j];
                        }
                    }
                }
                out
            };
            let h64: Vec<f64> = h_data.iter().map(|&v| v as f64).collect();
            let q = mm(&h64, l, d, wq_d, d_k);
            let kk = mm(&h64, l, d, wk_d, d_k);
            let vv = mm(&h64, l, d, wv_d, d_k);
            let mut total = 0.0;
            for i in 0..l {
                let mut scores = vec![0.0f64; l];
                for j in 0..l {
                    for p in 0..d_k {
                        scores[j] += q[i * d_k + p] * kk[j * d_k + p];
                    }
                    scores[j] /= (d_k as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for p in 0..d_k {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += exps[j] / denom * vv[j * d_k + p];
                    }
                    total += acc;
                }
            }
            total
        };

        let grad_close = |a: f32, b: f64| -> bool {
            let b = b as f32;
            (a - b).abs() <= f32::max(1e-5, 1e-4 * f32::max(a.abs(), b.abs()))
        };

        let h_step = 1e-3;
        let params: [(&Tensor, TensorId); 3] = [(&wq, q), (&wk, k), (&wv, v)];
        for (pi, (tensor, id)) in params.iter().enumerate() {
            let grad = grads.wrt(*id).unwrap();
            let base: Vec<f64> = tensor.data().iter().map(|&v| v as f64).collect();
            for idx in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[idx] += h_step;
                minus[idx] -= h_step;
                let others: Vec<Vec<f64>> = params
                    .iter()
                    .map(|(t, _)| t.data().iter().map(|&v| v as f64).collect())
                    .collect();
                let mut args_plus = others.clone();
                let mut args_minus = others;
                args_plus[pi] = plus;
                args_minus[pi] = minus;
                let fd = (eval(&args_plus[0], &args_plus[1], &args_plus[2])
                    - eval(&args_minus[0], &args_minus[1], &args_minus[2]))
                    / (2.0 * h_step);
                assert!(
                    grad_close(grad.data()[idx], fd),
                    "param {pi} [{idx}]: {} vs {}",
                    grad.data()[idx],
                    fd
                );
            }
        }
    }
}
