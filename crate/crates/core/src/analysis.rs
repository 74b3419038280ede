//! Diagnostics over captured attention weights: per-head entropy, Div and
//! Disagreement across heads, and the largest-attention-weight histogram
//! (weights scaled by sentence length to remove the length effect).
//!
//! All metrics run on inference-mode captures; masks are never applied when
//! measuring a trained model. Div and Disagreement are computed per query
//! position and also per sentence (head rows averaged over queries first),
//! and both aggregations are emitted so either convention can be read off.

use std::path::Path;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tensor::{ParamTrace, Tape, Tensor};
use crate::train::TaskModel;

/// Attention weights actually used for one (layer, head, sentence).
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub layer: usize,
    pub head: usize,
    /// Running sentence index within the capture run.
    pub item: usize,
    /// Λ rows for non-pad queries (len × len, row-stochastic).
    pub rows: Tensor,
    /// Sentence length.
    pub len: usize,
}

/// Run the encoder in inference mode over a dataset and collect Λ for every
/// (layer, head, sentence). Entailment pairs contribute premise and
/// hypothesis as separate sentences.
pub fn capture_attention(model: &TaskModel, examples: &[Example]) -> Result<Vec<AttentionCapture>> {
    let encoder = model.encoder();
    let mut captures = Vec::new();
    let mut item = 0usize;
    let encode = |tokens: &[u32], item: usize, captures: &mut Vec<AttentionCapture>| -> Result<()> {
        let mut tape = Tape::new();
        let mut trace = ParamTrace::new();
        let out = encoder.forward(
            &mut tape,
            &mut trace,
            tokens,
            &crate::attention::ForwardCtx::inference(),
        )?;
        for (layer, heads) in out.lambdas.iter().enumerate() {
            for (head, lam) in heads.iter().enumerate() {
                captures.push(AttentionCapture {
                    layer,
                    head,
                    item,
                    rows: tape.value(*lam).clone(),
                    len: tokens.len(),
                });
            }
        }
        Ok(())
    };
    for ex in examples {
        match ex {
            Example::Cls { tokens, .. } | Example::Tag { tokens, .. } => {
                encode(tokens, item, &mut captures)?;
                item += 1;
            }
            Example::Pair { premise, hypothesis, .. } => {
                encode(premise, item, &mut captures)?;
                item += 1;
                encode(hypothesis, item, &mut captures)?;
                item += 1;
            }
        }
    }
    Ok(captures)
}

/// Shannon entropy −Σ a ln a of one attention row (natural log, 0·ln 0 = 0).
pub fn entropy_score(row: &[f32]) -> Result<f64> {
    let mut h = 0.0f64;
    for &a in row {
        if a < 0.0 {
            return Err(Error::Contract {
                op: "entropy_score",
                msg: format!("negative attention weight {a}"),
            });
        }
        let a = a as f64;
        if a > 0.0 {
            h -= a * a.ln();
        }
    }
    Ok(h)
}

/// Head-overlap score over an h×l matrix of per-head attention rows for one
/// query: off-identity mass of the squared-inner-product Gram matrix.
/// Orthonormal rows give 0; larger values mean the heads' distributions
/// overlap more.
pub fn div_score(rows: &Tensor) -> f64 {
    let (h, l) = (rows.rows(), rows.cols());
    let mut total = 0.0f64;
    for i in 0..h {
        for j in 0..h {
            let mut dot = 0.0f64;
            for k in 0..l {
                dot += rows.at(i, k) as f64 * rows.at(j, k) as f64;
            }
            let gram_sq = dot * dot;
            let target = if i == j { 1.0 } else { 0.0 };
            total += (gram_sq - target).powi(2);
        }
    }
    total
}

/// Mean pairwise cosine similarity across heads, diagonal included:
/// (1/h²)·ΣᵢΣⱼ cos(Aⁱ, Aʲ).
pub fn disagreement_score(rows: &Tensor) -> Result<f64> {
    let (h, l) = (rows.rows(), rows.cols());
    let mut norms = vec![0.0f64; h];
    for i in 0..h {
        let mut n = 0.0f64;
        for k in 0..l {
            n += (rows.at(i, k) as f64).powi(2);
        }
        if n == 0.0 {
            return Err(Error::Contract {
                op: "disagreement_score",
                msg: format!("attention row {i} has zero norm"),
            });
        }
        norms[i] = n.sqrt();
    }
    let mut total = 0.0f64;
    for i in 0..h {
        for j in 0..h {
            let mut dot = 0.0f64;
            for k in 0..l {
                dot += rows.at(i, k) as f64 * rows.at(j, k) as f64;
            }
            total += dot / (norms[i] * norms[j]);
        }
    }
    Ok(total / (h * h) as f64)
}

/// Histogram of max-attention-weight · sentence-length values.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// bins+1 edges, uniform from 0 to the longest captured sentence.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Collect max_j Λ_ij · l for every (layer, head, query row) and bin the
/// values. Uniform attention contributes exactly 1.0, one-hot attention
/// contributes l.
pub fn max_weight_histogram(captures: &[AttentionCapture], bins: usize) -> Result<Histogram> {
    if captures.is_empty() {
        return Err(Error::Contract { op: "max_weight_histogram", msg: "no captures".into() });
    }
    if bins == 0 {
        return Err(Error::Contract { op: "max_weight_histogram", msg: "bins must be >= 1".into() });
    }
    let hi = captures.iter().map(|c| c.len).max().unwrap() as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| hi * b as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for c in captures {
        for i in 0..c.rows.rows() {
            let row_max = c.rows.row(i).iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let value = row_max as f64 * c.len as f64;
            let mut bin = ((value / hi) * bins as f64).floor() as usize;
            if bin >= bins {
                bin = bins - 1;
            }
            counts[bin] += 1;
        }
    }
    Ok(Histogram { edges, counts })
}

/// One metrics.csv row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub layer: String,
    pub head: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Mean per-row entropy over every capture; the scalar behind the entropy
/// trend comparisons.
pub fn mean_entropy(captures: &[AttentionCapture]) -> Result<f64> {
    let mut values = Vec::new();
    for c in captures {
        for i in 0..c.rows.rows() {
            values.push(entropy_score(c.rows.row(i))?);
        }
    }
    Ok(mean_std(&values).0)
}

/// Aggregate entropy per (layer, head) and Div/Disagreement per layer at
/// both per-query and per-sentence granularity, plus all-layer rollups.
pub fn summarize_metrics(captures: &[AttentionCapture]) -> Result<Vec<MetricRow>> {
    if captures.is_empty() {
        return Err(Error::Contract { op: "summarize_metrics", msg: "no captures".into() });
    }
    let layers = 1 + captures.iter().map(|c| c.layer).max().unwrap();
    let heads = 1 + captures.iter().map(|c| c.head).max().unwrap();
    let mut rows = Vec::new();

    // Entropy per (layer, head).
    let mut all_entropy = Vec::new();
    for layer in 0..layers {
        for head in 0..heads {
            let mut values = Vec::new();
            for c in captures.iter().filter(|c| c.layer == layer && c.head == head) {
                for i in 0..c.rows.rows() {
                    values.push(entropy_score(c.rows.row(i))?);
                }
            }
            let (mean, std) = mean_std(&values);
            rows.push(MetricRow {
                layer: layer.to_string(),
                head: head.to_string(),
                metric: "entropy".into(),
                mean,
                std,
            });
            all_entropy.extend(values);
        }
    }

    // Div / Disagreement need the h×l matrix of all heads for one query.
    let mut div_q_all = Vec::new();
    let mut div_s_all = Vec::new();
    let mut dis_q_all = Vec::new();
    let mut dis_s_all = Vec::new();
    for layer in 0..layers {
        let mut div_q = Vec::new();
        let mut div_s = Vec::new();
        let mut dis_q = Vec::new();
        let mut dis_s = Vec::new();
        let items: Vec<usize> = {
            let mut v: Vec<usize> =
                captures.iter().filter(|c| c.layer == layer).map(|c| c.item).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for item in items {
            let mut head_rows: Vec<&AttentionCapture> = captures
                .iter()
                .filter(|c| c.layer == layer && c.item == item)
                .collect();
            head_rows.sort_by_key(|c| c.head);
            if head_rows.len() != heads {
                continue;
            }
            let l = head_rows[0].len;
            // Per query: stack row q of each head.
            for q in 0..l {
                let mut data = Vec::with_capacity(heads * l);
                for hr in &head_rows {
                    data.extend_from_slice(hr.rows.row(q));
                }
                let a = Tensor::matrix(heads, l, data)?;
                div_q.push(div_score(&a));
                dis_q.push(disagreement_score(&a)?);
            }
            // Per sentence: average each head's rows over queries first.
            let mut data = Vec::with_capacity(heads * l);
            for hr in &head_rows {
                for j in 0..l {
                    let mut acc = 0.0f64;
                    for q in 0..l {
                        acc += hr.rows.at(q, j) as f64;
                    }
                    data.push((acc / l as f64) as f32);
                }
            }
            let a = Tensor::matrix(heads, l, data)?;
            div_s.push(div_score(&a));
            dis_s.push(disagreement_score(&a)?);
        }
        for (metric, values) in [
            ("div_per_query", &div_q),
            ("div_per_sentence", &div_s),
            ("disagreement_per_query", &dis_q),
            ("disagreement_per_sentence", &dis_s),
        ] {
            let (mean, std) = mean_std(values);
            rows.push(MetricRow {
                layer: layer.to_string(),
                head: "all".into(),
                metric: metric.into(),
                mean,
                std,
            });
        }
        div_q_all.extend(div_q);
        div_s_all.extend(div_s);
        dis_q_all.extend(dis_q);
        dis_s_all.extend(dis_s);
    }

    for (metric, values) in [
        ("entropy", &all_entropy),
        ("div_per_query", &div_q_all),
        ("div_per_sentence", &div_s_all),
        ("disagreement_per_query", &dis_q_all),
        ("disagreement_per_sentence", &dis_s_all),
    ] {
        let (mean, std) = mean_std(values);
        rows.push(MetricRow {
            layer: "all".into(),
            head: "all".into(),
            metric: metric.into(),
            mean,
            std,
        });
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("layer,head,metric,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.layer, r.head, r.metric, r.mean, r.std));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_histogram_csv(path: impl AsRef<Path>, hist: &Histogram) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, count) in hist.counts.iter().enumerate() {
        out.push_str(&format!("{:.6},{:.6},{}\n", hist.edges[i], hist.edges[i + 1], count));
    }
    std::fs::write(path, out)?;
    Ok(())
}
