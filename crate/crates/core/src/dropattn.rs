//! DropAttention: structured dropout applied directly to attention-weight
//! matrices.
//!
//! Two variants exist. The column variant drops whole columns of the l×l
//! weight matrix (removing value vectors for every query); the element
//! variant drops individual entries and generalises it. Dropping happens in
//! contiguous windows: each position sampled as a drop seed (probability
//! γ = p/w) zeroes a rightward window of w entries, truncated at the row end,
//! so the expected dropped fraction stays close to the nominal rate p.
//! After masking, rows are either renormalised to sum 1 (normalized rescale)
//! or divided by 1−p (inverse rescale, which does not preserve row sums).
//! At inference both variants are the identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Column,
    Element,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rescale {
    Normalized,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Full description of one DropAttention configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropSpec {
    pub variant: Variant,
    /// Drop rate p in [0, 1).
    pub p: f32,
    /// Window size in tokens, ≥ 1. Windows truncate at the sequence end.
    pub w: usize,
    pub rescale: Rescale,
    pub mode: Mode,
}

impl DropSpec {
    pub fn new(variant: Variant, p: f32, w: usize, rescale: Rescale, mode: Mode) -> Result<Self> {
        let spec = DropSpec { variant, p, w, rescale, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) || !self.p.is_finite() {
            return Err(Error::Config {
                field: "drop.p".into(),
                msg: format!("drop rate must be in [0, 1), got {}", self.p),
            });
        }
        if self.w == 0 {
            return Err(Error::Config {
                field: "drop.w".into(),
                msg: "window size must be >= 1".into(),
            });
        }
        if self.gamma() >= 1.0 {
            return Err(Error::Config {
                field: "drop.p".into(),
                msg: format!("seed probability p/w = {} must be < 1", self.gamma()),
            });
        }
        Ok(())
    }

    /// Seed probability γ = p/w.
    pub fn gamma(&self) -> f32 {
        self.p / self.w as f32
    }
}

/// Binary keep/drop matrix (1 = keep). Column-variant masks are constant down
/// each column.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    l: usize,
    keep: Vec<u8>,
}

impl DropMask {
    pub fn ones(l: usize) -> Self {
        DropMask { l, keep: vec![1; l * l] }
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.l + j] == 1
    }

    pub fn kept(&self) -> &[u8] {
        &self.keep
    }

    /// Mask as 0.0/1.0 values for elementwise application.
    pub fn to_f32(&self) -> Vec<f32> {
        self.keep.iter().map(|&k| k as f32).collect()
    }

    /// Fraction of dropped entries.
    pub fn dropped_fraction(&self) -> f64 {
        let dropped = self.keep.iter().filter(|&&k| k == 0).count();
        dropped as f64 / self.keep.len() as f64
    }

    fn drop_row_window(&mut self, i: usize, j: usize, w: usize, bound: usize) {
        let end = (j + w).min(bound);
        for jj in j..end {
            self.keep[i * self.l + jj] = 0;
        }
    }
}

/// Expand explicit drop seeds into a mask: each seed (i, j) zeroes
/// M[i, j..min(j+w-1, l-1)], truncating at the row end. Exposed so tests can
/// force seed layouts.
pub fn expand_seeds(l: usize, w: usize, seeds: &[(usize, usize)]) -> DropMask {
    let mut mask = DropMask::ones(l);
    for &(i, j) in seeds {
        mask.drop_row_window(i, j, w, l);
    }
    mask
}

/// Element-variant mask: every position (i, j) independently becomes a drop
/// seed with probability γ = p/w; each seed zeroes a rightward window of w
/// entries in its row. Only the leading `bound`×`bound` block is sampled;
/// everything outside it is kept (pad positions are never dropped).
fn sample_element_mask_bounded(
    l: usize,
    bound: usize,
    spec: &DropSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DropMask> {
    spec.validate()?;
    if spec.mode != Mode::Training {
        return Err(Error::Contract {
            op: "sample_element_mask",
            msg: "mask sampling is only defined in training mode".into(),
        });
    }
    let gamma = spec.gamma();
    let mut mask = DropMask::ones(l);
    if gamma == 0.0 {
        return Ok(mask);
    }
    for i in 0..bound {
        for j in 0..bound {
            if rng.gen::<f32>() < gamma {
                mask.drop_row_window(i, j, spec.w, bound);
            }
        }
    }
    Ok(mask)
}

/// Column-variant mask: column indices become drop seeds with probability
/// γ = p/w; each seed zeroes the window of columns j..j+w-1 in every row, so
/// whole value vectors disappear for all queries. Seeds are sampled once per
/// matrix, not per row.
fn sample_column_mask_bounded(
    l: usize,
    bound: usize,
    spec: &DropSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DropMask> {
    spec.validate()?;
    if spec.mode != Mode::Training {
        return Err(Error::Contract {
            op: "sample_column_mask",
            msg: "mask sampling is only defined in training mode".into(),
        });
    }
    let gamma = spec.gamma();
    let mut col_dropped = vec![false; l];
    if gamma > 0.0 {
        for j in 0..bound {
            if rng.gen::<f32>() < gamma {
                let end = (j + spec.w).min(bound);
                for flag in col_dropped.iter_mut().take(end).skip(j) {
                    *flag = true;
                }
            }
        }
    }
    let mut mask = DropMask::ones(l);
    for i in 0..bound {
        for (j, &dropped) in col_dropped.iter().enumerate() {
            if dropped {
                mask.keep[i * l + j] = 0;
            }
        }
    }
    Ok(mask)
}

pub fn sample_element_mask(l: usize, spec: &DropSpec, rng: &mut ChaCha8Rng) -> Result<DropMask> {
    sample_element_mask_bounded(l, l, spec, rng)
}

pub fn sample_column_mask(l: usize, spec: &DropSpec, rng: &mut ChaCha8Rng) -> Result<DropMask> {
    sample_column_mask_bounded(l, l, spec, rng)
}

/// Sample a mask for the requested variant restricted to the first `valid`
/// positions of an l×l matrix (padding is never dropped).
pub fn sample_mask(l: usize, valid: usize, spec: &DropSpec, rng: &mut ChaCha8Rng) -> Result<DropMask> {
    match spec.variant {
        Variant::Element => sample_element_mask_bounded(l, valid, spec, rng),
        Variant::Column => sample_column_mask_bounded(l, valid, spec, rng),
    }
}

/// Divide every row of a masked matrix by its own sum so rows sum to 1.
/// Rows whose masked sum falls below 1e-12 (fully dropped) are restored to
/// their pre-mask values from `original`.
pub fn renormalize_rows(masked: &Tensor, original: &Tensor) -> Result<Tensor> {
    if !masked.is_matrix() || masked.shape() != original.shape() {
        return Err(Error::Dimension {
            op: "renormalize_rows",
            lhs: masked.shape().to_vec(),
            rhs: original.shape().to_vec(),
        });
    }
    if masked.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract {
            op: "renormalize_rows",
            msg: "negative entries in masked input".into(),
        });
    }
    let (m, n) = (masked.rows(), masked.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = masked.row(i);
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum < 1e-12 {
            out[i * n..(i + 1) * n].copy_from_slice(original.row(i));
        } else {
            for j in 0..n {
                out[i * n + j] = (row[j] as f64 / sum) as f32;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Traditional dropout rescaling: every entry divided by 1−p. Row sums are
/// not preserved whenever anything was dropped.
pub fn inverse_rescale(masked: &Tensor, p: f32) -> Result<Tensor> {
    if p >= 1.0 || p < 0.0 || !p.is_finite() {
        return Err(Error::Config {
            field: "drop.p".into(),
            msg: format!("drop rate must be in [0, 1), got {p}"),
        });
    }
    let factor = 1.0 / (1.0 - p);
    let out: Vec<f32> = masked.data().iter().map(|&v| v * factor).collect();
    Tensor::new(masked.shape().to_vec(), out)
}

/// Apply a given mask then the configured rescale. Shared by both variants;
/// the column variant is exactly the element variant driven by a
/// column-constant mask.
pub fn apply_with_mask(lambda: &Tensor, mask: &DropMask, rescale: Rescale, p: f32) -> Result<Tensor> {
    if !lambda.is_matrix() || lambda.rows() != mask.len() || lambda.cols() != mask.len() {
        return Err(Error::Contract {
            op: "apply_with_mask",
            msg: format!("lambda shape {:?} vs mask size {}", lambda.shape(), mask.len()),
        });
    }
    let l = mask.len();
    let mut masked = vec![0.0f32; l * l];
    for i in 0..l {
        for j in 0..l {
            if mask.is_kept(i, j) {
                masked[i * l + j] = lambda.at(i, j);
            }
        }
    }
    let masked = Tensor::matrix(l, l, masked)?;
    match rescale {
        Rescale::Normalized => renormalize_rows(&masked, lambda),
        Rescale::Inverse => inverse_rescale(&masked, p),
    }
}

/// Full DropAttention on a row-stochastic matrix. Inference mode returns the
/// input unchanged; training mode samples the variant's mask, applies it and
/// rescales.
pub fn apply_dropattention(lambda: &Tensor, spec: &DropSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    spec.validate()?;
    if spec.mode == Mode::Inference {
        return Ok(lambda.clone());
    }
    if !lambda.is_matrix() || lambda.rows() != lambda.cols() {
        return Err(Error::Contract {
            op: "apply_dropattention",
            msg: format!("expected square matrix, got shape {:?}", lambda.shape()),
        });
    }
    let l = lambda.rows();
    let mask = sample_mask(l, l, spec, rng)?;
    apply_with_mask(lambda, &mask, spec.rescale, spec.p)
}

/// DropAttention recorded on a tape, for training: gradients flow only
/// through kept attention weights. `valid` restricts dropping to non-pad
/// positions.
pub fn apply_dropattention_on_tape(
    tape: &mut Tape,
    lambda: TensorId,
    valid: usize,
    spec: &DropSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    spec.validate()?;
    // p = 0 samples nothing, so the training pipeline is bit-identical to a
    // run without DropAttention.
    if spec.mode == Mode::Inference || spec.p == 0.0 {
        return Ok(lambda);
    }
    let shape = tape.shape(lambda).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract {
            op: "apply_dropattention_on_tape",
            msg: format!("expected square matrix, got shape {:?}", shape),
        });
    }
    let l = shape[0];
    let mask = sample_mask(l, valid, spec, rng)?;
    let mask_f = mask.to_f32();
    match spec.rescale {
        Rescale::Normalized => tape.mask_renorm_rows(lambda, &mask_f),
        Rescale::Inverse => tape.mul_mask_scaled(lambda, &mask_f, 1.0 / (1.0 - spec.p)),
    }
}

/// Standard unit dropout for fully-connected activations: each unit zeroed
/// independently with probability p, survivors scaled by 1/(1−p). Identity at
/// inference and for p = 0.
pub fn standard_dropout(
    tape: &mut Tape,
    x: TensorId,
    p: f32,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    if p >= 1.0 || p < 0.0 || !p.is_finite() {
        return Err(Error::Config {
            field: "drop.dropout".into(),
            msg: format!("dropout rate must be in [0, 1), got {p}"),
        });
    }
    if mode == Mode::Inference || p == 0.0 {
        return Ok(x);
    }
    let numel = tape.value(x).numel();
    let mask: Vec<f32> = (0..numel).map(|_| if rng.gen::<f32>() < p { 0.0 } else { 1.0 }).collect();
    tape.mul_mask_scaled(x, &mask, 1.0 / (1.0 - p))
}

/// Closed-form per-entry drop probability at interior positions: a position
/// is dropped iff any of the w candidate seeds to its left (inclusive) fired,
/// so P(drop) = 1 − (1 − γ)^w.
pub fn interior_drop_probability(spec: &DropSpec) -> f64 {
    1.0 - (1.0 - spec.gamma() as f64).powi(spec.w as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(variant: Variant, p: f32, w: usize, rescale: Rescale, mode: Mode) -> DropSpec {
        DropSpec::new(variant, p, w, rescale, mode).unwrap()
    }

    fn random_stochastic(l: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let mut data = vec![0.0f32; l * l];
        for i in 0..l {
            let mut sum = 0.0f64;
            for j in 0..l {
                let v: f32 = rng.gen_range(0.01..1.0);
                data[i * l + j] = v;
                sum += v as f64;
            }
            for j in 0..l {
                data[i * l + j] = (data[i * l + j] as f64 / sum) as f32;
            }
        }
        Tensor::matrix(l, l, data).unwrap()
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(DropSpec::new(Variant::Column, 1.5, 1, Rescale::Normalized, Mode::Training).is_err());
        assert!(DropSpec::new(Variant::Column, -0.1, 1, Rescale::Normalized, Mode::Training).is_err());
        assert!(DropSpec::new(Variant::Column, 0.3, 0, Rescale::Normalized, Mode::Training).is_err());
        let err = DropSpec::new(Variant::Column, 2.0, 2, Rescale::Normalized, Mode::Training)
            .unwrap_err()
            .to_string();
        assert!(err.contains("drop.p"), "{err}");
    }

    #[test]
    fn zero_rate_gives_all_ones_masks() {
        let s = spec(Variant::Element, 0.0, 3, Rescale::Normalized, Mode::Training);
        let mask = sample_element_mask(6, &s, &mut rng::stream(1)).unwrap();
        assert_eq!(mask, DropMask::ones(6));
        let s = spec(Variant::Column, 0.0, 3, Rescale::Normalized, Mode::Training);
        let mask = sample_column_mask(6, &s, &mut rng::stream(1)).unwrap();
        assert_eq!(mask, DropMask::ones(6));
    }

    #[test]
    fn window_truncates_at_row_end() {
        let l = 5;
        let mask = expand_seeds(l, 3, &[(2, l - 1)]);
        for i in 0..l {
            for j in 0..l {
                let expect_drop = i == 2 && j == l - 1;
                assert_eq!(mask.is_kept(i, j), !expect_drop, "({i},{j})");
            }
        }
    }

    #[test]
    fn interior_seed_drops_full_window() {
        let mask = expand_seeds(6, 3, &[(1, 2)]);
        for j in 0..6 {
            assert_eq!(mask.is_kept(1, j), !(2..5).contains(&j));
        }
    }

    #[test]
    fn column_seed_drops_window_of_columns_in_every_row() {
        // Force the seed by sampling with gamma high enough to hit column 2
        // only; easier to construct directly from the expansion rule.
        let l = 5;
        let s = spec(Variant::Column, 0.2, 2, Rescale::Normalized, Mode::Training);
        // Find a seed where exactly column 2 fires.
        let mut found = None;
        for seed in 0..10_000u64 {
            let mut r = rng::stream(seed);
            let draws: Vec<bool> = (0..l).map(|_| r.gen::<f32>() < s.gamma()).collect();
            if draws == [false, false, true, false, false] {
                found = Some(seed);
                break;
            }
        }
        let seed = found.expect("no seed found with a single column-2 drop");
        let mask = sample_column_mask(l, &s, &mut rng::stream(seed)).unwrap();
        for i in 0..l {
            for j in 0..l {
                assert_eq!(mask.is_kept(i, j), !(j == 2 || j == 3), "({i},{j})");
            }
        }
    }

    #[test]
    fn column_masks_are_column_constant() {
        let s = spec(Variant::Column, 0.4, 2, Rescale::Normalized, Mode::Training);
        let mut r = rng::stream(7);
        for _ in 0..50 {
            let mask = sample_column_mask(9, &s, &mut r).unwrap();
            for j in 0..9 {
                let first = mask.is_kept(0, j);
                for i in 1..9 {
                    assert_eq!(mask.is_kept(i, j), first);
                }
            }
        }
    }

    #[test]
    fn renormalize_direct_arithmetic() {
        let masked = Tensor::matrix(1, 3, vec![0.2, 0.0, 0.5]).unwrap();
        let original = Tensor::matrix(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let out = renormalize_rows(&masked, &original).unwrap();
        assert!((out.data()[0] - 2.0 / 7.0).abs() < 1e-6);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - 5.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn renormalize_identity_on_stochastic_row() {
        let mut r = rng::stream(2);
        let t = random_stochastic(6, &mut r);
        let out = renormalize_rows(&t, &t).unwrap();
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn renormalize_restores_fully_dropped_row() {
        let masked = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let original = Tensor::matrix(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let out = renormalize_rows(&masked, &original).unwrap();
        assert_eq!(out.data(), original.data());
    }

    #[test]
    fn renormalize_rejects_negative_entries() {
        let masked = Tensor::matrix(1, 2, vec![-0.1, 0.5]).unwrap();
        let original = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(renormalize_rows(&masked, &original).is_err());
    }

    #[test]
    fn inverse_rescale_direct_arithmetic() {
        let masked = Tensor::matrix(1, 2, vec![0.5, 0.0]).unwrap();
        let out = inverse_rescale(&masked, 0.5).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);

        let unmasked = Tensor::matrix(1, 2, vec![0.4, 0.6]).unwrap();
        let out = inverse_rescale(&unmasked, 0.2).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-6);
        assert!((out.data()[1] - 0.75).abs() < 1e-6);
        assert!(inverse_rescale(&unmasked, 1.0).is_err());
    }

    /// With w = 1 the kept-entry estimator x·m/(1−p) is unbiased: its mean
    /// over masks approaches the original entry.
    #[test]
    fn inverse_rescale_is_unbiased_for_unit_window() {
        let s = spec(Variant::Element, 0.3, 1, Rescale::Inverse, Mode::Training);
        let mut r = rng::stream(11);
        let lambda = random_stochastic(4, &mut r);
        let mut acc = vec![0.0f64; 16];
        let n = 10_000;
        for _ in 0..n {
            let out = apply_dropattention(&lambda, &s, &mut r).unwrap();
            for (a, &v) in acc.iter_mut().zip(out.data()) {
                *a += v as f64;
            }
        }
        for (a, &v) in acc.iter().zip(lambda.data()) {
            let mean = a / n as f64;
            assert!(
                (mean - v as f64).abs() <= 0.02 * v as f64,
                "mean {mean} vs original {v}"
            );
        }
    }

    #[test]
    fn element_interior_drop_frequency_matches_closed_form() {
        let s = spec(Variant::Element, 0.3, 3, Rescale::Normalized, Mode::Training);
        let l = 100;
        let mut r = rng::stream(5);
        let mut dropped = 0u64;
        let mut total = 0u64;
        let samples = 10_000;
        for _ in 0..samples {
            let mask = sample_element_mask(l, &s, &mut r).unwrap();
            for i in 0..l {
                for j in (s.w - 1)..l {
                    total += 1;
                    if !mask.is_kept(i, j) {
                        dropped += 1;
                    }
                }
            }
        }
        let freq = dropped as f64 / total as f64;
        let expect = interior_drop_probability(&s);
        assert!((freq - expect).abs() <= 0.01, "freq {freq} vs closed form {expect}");
    }

    #[test]
    fn inference_is_bit_exact_passthrough() {
        let mut r = rng::stream(3);
        let lambda = random_stochastic(7, &mut r);
        for variant in [Variant::Column, Variant::Element] {
            for rescale in [Rescale::Normalized, Rescale::Inverse] {
                let s = spec(variant, 0.4, 2, rescale, Mode::Inference);
                let out = apply_dropattention(&lambda, &s, &mut r).unwrap();
                assert_eq!(out.data(), lambda.data());
            }
        }
    }

    #[test]
    fn zero_rate_training_is_identity_within_tolerance() {
        let mut r = rng::stream(9);
        let lambda = random_stochastic(6, &mut r);
        let s = spec(Variant::Element, 0.0, 2, Rescale::Normalized, Mode::Training);
        let out = apply_dropattention(&lambda, &s, &mut r).unwrap();
        for (a, b) in out.data().iter().zip(lambda.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn column_variant_is_special_case_of_element_variant() {
        let mut r = rng::stream(13);
        for _ in 0..100 {
            let lambda = random_stochastic(5, &mut r);
            let s = spec(Variant::Column, 0.4, 2, Rescale::Normalized, Mode::Training);
            let mask_seed: u64 = r.gen();
            let out_column = {
                let mut mr = rng::stream(mask_seed);
                apply_dropattention(&lambda, &s, &mut mr).unwrap()
            };
            let out_element = {
                let mut mr = rng::stream(mask_seed);
                let mask = sample_column_mask(5, &s, &mut mr).unwrap();
                apply_with_mask(&lambda, &mask, Rescale::Normalized, s.p).unwrap()
            };
            assert_eq!(out_column.data(), out_element.data());
        }
    }

    #[test]
    fn same_seed_same_output() {
        let mut r = rng::stream(21);
        let lambda = random_stochastic(8, &mut r);
        let s = spec(Variant::Element, 0.3, 2, Rescale::Normalized, Mode::Training);
        let a = apply_dropattention(&lambda, &s, &mut rng::stream(77)).unwrap();
        let b = apply_dropattention(&lambda, &s, &mut rng::stream(77)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn standard_dropout_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = standard_dropout(&mut tape, x, 0.0, Mode::Training, &mut rng::stream(1)).unwrap();
        assert_eq!(x, y);
        let y = standard_dropout(&mut tape, x, 0.5, Mode::Inference, &mut rng::stream(1)).unwrap();
        assert_eq!(x, y);
        assert!(standard_dropout(&mut tape, x, 1.0, Mode::Training, &mut rng::stream(1)).is_err());
    }

    #[test]
    fn standard_dropout_is_unbiased() {
        let data = vec![0.5f32, 1.5, -2.0, 0.25];
        let mut acc = vec![0.0f64; 4];
        let mut r = rng::stream(4);
        let n = 10_000;
        for _ in 0..n {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, 4, data.clone()).unwrap());
            let y = standard_dropout(&mut tape, x, 0.3, Mode::Training, &mut r).unwrap();
            for (a, &v) in acc.iter_mut().zip(tape.data(y)) {
                *a += v as f64;
            }
        }
        for (a, &v) in acc.iter().zip(&data) {
            let mean = a / n as f64;
            assert!((mean - v as f64).abs() <= 0.02 * v.abs() as f64, "mean {mean} vs {v}");
        }
    }

    /// Maximal zero runs that end strictly before the row end are unions of
    /// full windows, so they are never shorter than w.
    #[test]
    fn element_zero_runs_before_row_end_span_at_least_w() {
        let s = spec(Variant::Element, 0.4, 3, Rescale::Normalized, Mode::Training);
        let l = 24;
        let mut r = rng::stream(31);
        for _ in 0..200 {
            let mask = sample_element_mask(l, &s, &mut r).unwrap();
            for i in 0..l {
                let mut j = 0;
                while j < l {
                    if mask.is_kept(i, j) {
                        j += 1;
                        continue;
                    }
                    let start = j;
                    while j < l && !mask.is_kept(i, j) {
                        j += 1;
                    }
                    if j < l {
                        assert!(j - start >= s.w, "interior run of {} < w at row {i}", j - start);
                    }
                }
            }
        }
    }

    #[test]
    fn padding_positions_are_never_dropped() {
        let s = spec(Variant::Element, 0.5, 2, Rescale::Normalized, Mode::Training);
        let mut r = rng::stream(41);
        for _ in 0..50 {
            let mask = sample_mask(8, 5, &s, &mut r).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    if i >= 5 || j >= 5 {
                        assert!(mask.is_kept(i, j), "pad position ({i},{j}) dropped");
                    }
                }
            }
        }
    }

    #[test]
    fn dropped_lambda_entries_get_zero_gradient() {
        let mut r = rng::stream(51);
        let lambda = random_stochastic(4, &mut r);
        let s = spec(Variant::Element, 0.4, 2, Rescale::Normalized, Mode::Training);
        let mask = sample_mask(4, 4, &s, &mut rng::stream(99)).unwrap();

        let mut tape = Tape::new();
        let lam = tape.param(&lambda);
        let out = tape.mask_renorm_rows(lam, &mask.to_f32()).unwrap();
        // Arbitrary scalar head so every output entry contributes.
        let weights: Vec<f32> = (0..16).map(|k| 0.1 + k as f32 * 0.05).collect();
        let w = tape.constant(Tensor::matrix(4, 4, weights).unwrap());
        let prod = tape.mul_elementwise(out, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gl = grads.wrt(lam).unwrap();

        for i in 0..4 {
            let row_fully_dropped = (0..4).all(|j| !mask.is_kept(i, j));
            if row_fully_dropped {
                continue;
            }
            for j in 0..4 {
                if !mask.is_kept(i, j) {
                    assert_eq!(gl.at(i, j), 0.0, "gradient leaked through dropped ({i},{j})");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_rescale_keeps_rows_stochastic(
            seed in 0u64..500,
            l in 2usize..12,
            p in 0.0f32..0.6,
            w in 1usize..4,
        ) {
            let mut r = rng::stream(seed);
            let lambda = random_stochastic(l, &mut r);
            for variant in [Variant::Column, Variant::Element] {
                let s = spec(variant, p, w, Rescale::Normalized, Mode::Training);
                let out = apply_dropattention(&lambda, &s, &mut r).unwrap();
                for i in 0..l {
                    let sum: f64 = out.row(i).iter().map(|&v| v as f64).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
                    prop_assert!(out.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }

        #[test]
        fn softmax_style_identity_for_unit_window_rate_matches_p(
            seed in 0u64..50,
        ) {
            // w = 1: per-entry drop probability is exactly gamma = p.
            let s = spec(Variant::Element, 0.25, 1, Rescale::Normalized, Mode::Training);
            let mut r = rng::stream(seed);
            let mask = sample_element_mask(64, &s, &mut r).unwrap();
            let frac = mask.dropped_fraction();
            // Loose per-sample bound; the tight Monte-Carlo bound is tested
            // with 10^4 samples elsewhere.
            prop_assert!(frac < 0.45, "dropped fraction {frac} implausibly high for p=0.25");
        }
    }
}
