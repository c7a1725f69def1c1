//! Mask-aware merge operators.
//!
//! An operator sees one block at a time as a [`MaskedDeltaTuple`]: the mask
//! row plus the deltas of the selected experts and nothing else. Omitted
//! experts have no values at the call boundary, so every operator here is
//! non-anticipatory by construction.
//!
//! Accumulation runs in f64 over experts in ascending id order and is rounded
//! to f32 once, when the delta is added to the base block.

mod omega;

use serde::{Deserialize, Serialize};

use crate::container::{BlockBuffer, BlockKey};
use crate::costmodel::ExpertId;
use crate::error::{Error, Result};

pub use omega::{derive_omega, OmegaStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    /// `Σ α_i A_i Δ_i` with coefficients independent of the mask.
    AvgFixed,
    /// Plain mean over the selected experts only.
    AvgRenorm,
    Ties,
    Dare,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::AvgFixed => "avg-fixed",
            OperatorKind::AvgRenorm => "avg-renorm",
            OperatorKind::Ties => "ties",
            OperatorKind::Dare => "dare",
        }
    }

    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::AvgFixed,
        OperatorKind::AvgRenorm,
        OperatorKind::Ties,
        OperatorKind::Dare,
    ];
}

impl std::fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg-fixed" | "avg" => Ok(OperatorKind::AvgFixed),
            "avg-renorm" => Ok(OperatorKind::AvgRenorm),
            "ties" => Ok(OperatorKind::Ties),
            "dare" => Ok(OperatorKind::Dare),
            other => Err(Error::InvalidParameter(format!("unknown operator {other:?}"))),
        }
    }
}

pub const DEFAULT_TIES_DENSITY: f64 = 0.2;
pub const DEFAULT_DARE_DROP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    pub op: OperatorKind,
    /// Fixed per-expert coefficients; `1/K` by default.
    pub alphas: Vec<f64>,
    pub ties_density: f64,
    pub dare_drop_p: f64,
    pub seed: u64,
}

impl OperatorParams {
    pub fn new(op: OperatorKind, experts: usize) -> Self {
        let alpha = if experts == 0 { 0.0 } else { 1.0 / experts as f64 };
        OperatorParams {
            op,
            alphas: vec![alpha; experts],
            ties_density: DEFAULT_TIES_DENSITY,
            dare_drop_p: DEFAULT_DARE_DROP,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ties_density(mut self, density: f64) -> Self {
        self.ties_density = density;
        self
    }

    pub fn with_dare_drop(mut self, p: f64) -> Self {
        self.dare_drop_p = p;
        self
    }

    pub fn with_alphas(mut self, alphas: Vec<f64>) -> Self {
        self.alphas = alphas;
        self
    }

    pub fn experts(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self, experts: usize) -> Result<()> {
        if self.alphas.len() != experts {
            return Err(Error::InvalidParameter(format!(
                "{} coefficients for {experts} experts",
                self.alphas.len()
            )));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("coefficients must be finite".into()));
        }
        if !(self.ties_density > 0.0 && self.ties_density <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ties density must lie in (0, 1], got {}",
                self.ties_density
            )));
        }
        if !(self.dare_drop_p >= 0.0 && self.dare_drop_p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dare drop probability must lie in [0, 1), got {}",
                self.dare_drop_p
            )));
        }
        Ok(())
    }
}

/// Mask row and selected deltas for one block. Entry `i` holds a delta iff
/// expert `i` is selected.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDeltaTuple {
    len: usize,
    deltas: Vec<Option<Vec<f32>>>,
}

impl MaskedDeltaTuple {
    pub fn new(len: usize, deltas: Vec<Option<Vec<f32>>>) -> Result<Self> {
        for d in deltas.iter().flatten() {
            if d.len() != len {
                return Err(Error::LengthMismatch {
                    expected: len,
                    actual: d.len(),
                });
            }
        }
        Ok(MaskedDeltaTuple { len, deltas })
    }

    /// Zero-completed view of a full tuple: values of unselected experts are
    /// discarded here and never reach an operator.
    pub fn from_full(mask_row: &[bool], all: Vec<Vec<f32>>) -> Result<Self> {
        if mask_row.len() != all.len() {
            return Err(Error::LengthMismatch {
                expected: mask_row.len(),
                actual: all.len(),
            });
        }
        let len = all.first().map_or(0, Vec::len);
        let deltas = mask_row
            .iter()
            .zip(all)
            .map(|(&m, d)| if m { Some(d) } else { None })
            .collect();
        Self::new(len, deltas)
    }

    /// Element count of the block.
    pub fn block_len(&self) -> usize {
        self.len
    }

    pub fn experts(&self) -> usize {
        self.deltas.len()
    }

    pub fn mask_row(&self) -> Vec<bool> {
        self.deltas.iter().map(Option::is_some).collect()
    }

    pub fn selected_count(&self) -> usize {
        self.deltas.iter().filter(|d| d.is_some()).count()
    }

    pub fn delta(&self, expert: usize) -> Option<&[f32]> {
        self.deltas.get(expert)?.as_deref()
    }

    /// Selected `(expert, delta)` pairs in ascending expert order.
    pub fn selected(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.deltas
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.as_deref().map(|d| (i, d)))
    }

    fn check_experts(&self, params: &OperatorParams) -> Result<()> {
        if self.deltas.len() != params.alphas.len() {
            return Err(Error::LengthMismatch {
                expected: params.alphas.len(),
                actual: self.deltas.len(),
            });
        }
        Ok(())
    }
}

/// Fixed-coefficient average: `Σ_i α_i A_i Δ_i`.
pub fn psi_avg_fixed(tuple: &MaskedDeltaTuple, params: &OperatorParams) -> Result<Vec<f64>> {
    tuple.check_experts(params)?;
    let mut acc = vec![0f64; tuple.len];
    for (i, d) in tuple.selected() {
        let a = params.alphas[i];
        for (slot, &v) in acc.iter_mut().zip(d) {
            *slot += a * v as f64;
        }
    }
    Ok(acc)
}

/// Selected-only mean: `β_i = A_i / Σ_j A_j`. All zeros for an empty mask.
pub fn psi_avg_renorm(tuple: &MaskedDeltaTuple) -> Result<Vec<f64>> {
    let mut acc = vec![0f64; tuple.len];
    let count = tuple.selected_count();
    if count == 0 {
        return Ok(acc);
    }
    let beta = 1.0 / count as f64;
    for (_, d) in tuple.selected() {
        for (slot, &v) in acc.iter_mut().zip(d) {
            *slot += beta * v as f64;
        }
    }
    Ok(acc)
}

/// Number of entries TIES keeps out of `n`: `⌈ρ·n⌉`, at least one.
///
/// The product is snapped to the nearest integer first when it is within
/// rounding noise of it, so `0.3 · 10` keeps 3 and not 4.
pub fn ties_keep_count(density: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = density * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * n as f64 {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Keeps the `keep` largest-magnitude entries (lower index wins ties) and
/// zeroes the rest.
fn trim_top_k(delta: &[f32], keep: usize) -> Vec<f32> {
    if keep >= delta.len() {
        return delta.to_vec();
    }
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.select_nth_unstable_by(keep - 1, |&a, &b| {
        delta[b].abs().total_cmp(&delta[a].abs()).then(a.cmp(&b))
    });
    let mut out = vec![0f32; delta.len()];
    for &j in &order[..keep] {
        out[j] = delta[j];
    }
    out
}

/// Trim, elect sign, then average the sign-consistent kept entries.
///
/// Trimming is per expert per block. The elected sign is the sign of the sum
/// of trimmed values; a zero sum yields 0.
pub fn psi_ties(tuple: &MaskedDeltaTuple, params: &OperatorParams) -> Result<Vec<f64>> {
    tuple.check_experts(params)?;
    if !(params.ties_density > 0.0 && params.ties_density <= 1.0) {
        return Err(Error::InvalidParameter(format!("ties density {}", params.ties_density)));
    }
    let keep = ties_keep_count(params.ties_density, tuple.len);
    let trimmed: Vec<Vec<f32>> = tuple.selected().map(|(_, d)| trim_top_k(d, keep)).collect();
    let mut out = vec![0f64; tuple.len];
    for (j, slot) in out.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[j] as f64).sum();
        if total == 0.0 {
            continue;
        }
        let positive = total > 0.0;
        let mut sum = 0f64;
        let mut count = 0usize;
        for t in &trimmed {
            let v = t[j];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v as f64;
                count += 1;
            }
        }
        if count > 0 {
            *slot = sum / count as f64;
        }
    }
    Ok(out)
}

/// Random drop with probability `p`, rescale survivors by `1/(1-p)`, then
/// combine with the fixed coefficients. Draws come from [`OmegaStream`].
pub fn psi_dare(tuple: &MaskedDeltaTuple, params: &OperatorParams, key: &BlockKey) -> Result<Vec<f64>> {
    tuple.check_experts(params)?;
    let p = params.dare_drop_p;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("dare drop probability {p}")));
    }
    let rescale = 1.0 / (1.0 - p);
    let mut acc = vec![0f64; tuple.len];
    for (i, d) in tuple.selected() {
        let a = params.alphas[i];
        let stream = OmegaStream::new(params.seed, ExpertId(i as u32), key);
        for (j, (slot, &v)) in acc.iter_mut().zip(d).enumerate() {
            if stream.keep(j as u64, p) {
                *slot += a * (v as f64 * rescale);
            }
        }
    }
    Ok(acc)
}

pub fn psi(tuple: &MaskedDeltaTuple, params: &OperatorParams, key: &BlockKey) -> Result<Vec<f64>> {
    match params.op {
        OperatorKind::AvgFixed => psi_avg_fixed(tuple, params),
        OperatorKind::AvgRenorm => psi_avg_renorm(tuple),
        OperatorKind::Ties => psi_ties(tuple, params),
        OperatorKind::Dare => psi_dare(tuple, params, key),
    }
}

/// Adds an f64 delta to an f32 base value and rounds once. A zero delta
/// returns the base bit pattern unchanged.
#[inline]
pub fn combine(base: f32, delta: f64) -> f32 {
    if delta == 0.0 {
        base
    } else {
        (base as f64 + delta) as f32
    }
}

/// `M_A[t,b] = M_0[t,b] + Ψ(A, Δ)`.
pub fn apply_budgeted_op(base: &BlockBuffer, tuple: &MaskedDeltaTuple, params: &OperatorParams) -> Result<BlockBuffer> {
    if tuple.block_len() != base.values.len() {
        return Err(Error::LengthMismatch {
            expected: base.values.len(),
            actual: tuple.block_len(),
        });
    }
    let delta = psi(tuple, params, &base.key)?;
    let values = base.values.iter().zip(&delta).map(|(&b, &d)| combine(b, d)).collect();
    Ok(BlockBuffer::new(base.key.clone(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(op: OperatorKind, k: usize) -> OperatorParams {
        OperatorParams::new(op, k).with_ties_density(1.0)
    }

    fn tuple(mask: &[bool], all: &[&[f32]]) -> MaskedDeltaTuple {
        MaskedDeltaTuple::from_full(mask, all.iter().map(|d| d.to_vec()).collect()).unwrap()
    }

    #[test]
    fn avg_fixed_examples() {
        let p = params(OperatorKind::AvgFixed, 2);
        assert_eq!(psi_avg_fixed(&tuple(&[true, true], &[&[2.0], &[4.0]]), &p).unwrap(), vec![3.0]);
        assert_eq!(psi_avg_fixed(&tuple(&[true, false], &[&[2.0], &[4.0]]), &p).unwrap(), vec![1.0]);
        assert_eq!(psi_avg_fixed(&tuple(&[false, false], &[&[2.0], &[4.0]]), &p).unwrap(), vec![0.0]);
    }

    #[test]
    fn avg_fixed_length_mismatch() {
        assert!(MaskedDeltaTuple::new(2, vec![Some(vec![1.0]), None]).is_err());
    }

    #[test]
    fn avg_renorm_examples() {
        assert_eq!(psi_avg_renorm(&tuple(&[true, false], &[&[2.0], &[4.0]])).unwrap(), vec![2.0]);
        assert_eq!(psi_avg_renorm(&tuple(&[true, true], &[&[2.0], &[4.0]])).unwrap(), vec![3.0]);
        assert_eq!(psi_avg_renorm(&tuple(&[false, false], &[&[2.0], &[4.0]])).unwrap(), vec![0.0]);
    }

    /// Scalar trim/elect/average written out by hand for one coordinate with
    /// no trimming: (+3, -1, +2) sums to +4, so the positive entries 3 and 2
    /// are averaged.
    #[test]
    fn ties_single_coordinate_reference() {
        let values = [3.0f64, -1.0, 2.0];
        let total: f64 = values.iter().sum();
        let agreeing: Vec<f64> = values.iter().copied().filter(|v| v.signum() == total.signum()).collect();
        let expected = agreeing.iter().sum::<f64>() / agreeing.len() as f64;
        assert_eq!(expected, 2.5);
        let p = params(OperatorKind::Ties, 3);
        let t = tuple(&[true, true, true], &[&[3.0], &[-1.0], &[2.0]]);
        assert_eq!(psi_ties(&t, &p).unwrap(), vec![expected]);
    }

    #[test]
    fn ties_single_expert_is_identity_and_zero_sum_gives_zero() {
        let p = params(OperatorKind::Ties, 1);
        let t = tuple(&[true], &[&[1.5, -2.0, 0.25]]);
        assert_eq!(psi_ties(&t, &p).unwrap(), vec![1.5, -2.0, 0.25]);
        let p = params(OperatorKind::Ties, 2);
        let t = tuple(&[true, true], &[&[1.0], &[-1.0]]);
        assert_eq!(psi_ties(&t, &p).unwrap(), vec![0.0]);
    }

    #[test]
    fn ties_trims_with_lower_index_tie_break() {
        // keep ⌈0.5·4⌉ = 2 of |(1, 3, 3, 2)|: indices 1 and 2.
        let p = params(OperatorKind::Ties, 1).with_ties_density(0.5);
        let t = tuple(&[true], &[&[1.0, -3.0, 3.0, 2.0]]);
        assert_eq!(psi_ties(&t, &p).unwrap(), vec![0.0, -3.0, 3.0, 0.0]);
        // three-way magnitude tie, keep 2: the two lowest indices survive.
        let t = tuple(&[true], &[&[2.0, 2.0, -2.0, 1.0]]);
        assert_eq!(psi_ties(&t, &p).unwrap(), vec![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_keep_count_snaps_representation_error() {
        assert_eq!(ties_keep_count(0.3, 10), 3);
        assert_eq!(ties_keep_count(0.25, 10), 3);
        assert_eq!(ties_keep_count(1.0, 7), 7);
        assert_eq!(ties_keep_count(1e-9, 7), 1);
        assert!(psi_ties(&tuple(&[true], &[&[1.0]]), &params(OperatorKind::Ties, 1).with_ties_density(0.0)).is_err());
    }

    #[test]
    fn dare_without_drops_equals_avg_fixed() {
        let key = BlockKey::new("w", 0);
        let p = params(OperatorKind::Dare, 3).with_dare_drop(0.0).with_seed(9);
        let t = tuple(&[true, false, true], &[&[0.1, -0.7, 3.3], &[5.0, 5.0, 5.0], &[1e-3, 2.5, -0.9]]);
        let dare = psi_dare(&t, &p, &key).unwrap();
        let avg = psi_avg_fixed(&t, &p).unwrap();
        assert_eq!(
            dare.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            avg.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(psi_dare(&t, &p.clone().with_dare_drop(1.0), &key).is_err());
    }

    /// Seeded scalar reference for one expert's DARE contribution.
    fn dare_reference(seed: u64, expert: u32, key: &BlockKey, d: &[f32], alpha: f64, p: f64) -> Vec<f64> {
        d.iter()
            .enumerate()
            .map(|(j, &v)| {
                if derive_omega(seed, ExpertId(expert), key, j as u64, p) {
                    alpha * (v as f64 * (1.0 / (1.0 - p)))
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn dare_contribution_is_pathwise_across_masks() {
        let key = BlockKey::new("layer", 4);
        let p = params(OperatorKind::Dare, 2).with_dare_drop(0.5).with_seed(1234);
        let d0: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let d1: Vec<f32> = (0..64).map(|i| (i as f32 * 0.11).cos()).collect();
        let only0 = psi_dare(&tuple(&[true, false], &[&d0, &d1]), &p, &key).unwrap();
        let both = psi_dare(&tuple(&[true, true], &[&d0, &d1]), &p, &key).unwrap();
        let only1 = psi_dare(&tuple(&[false, true], &[&d0, &d1]), &p, &key).unwrap();
        let expected0 = dare_reference(1234, 0, &key, &d0, 0.5, 0.5);
        assert_eq!(only0, expected0);
        for j in 0..64 {
            // adding expert 1 on top of expert 0 reproduces the joint output
            assert_eq!(both[j], expected0[j] + only1[j]);
        }
        assert!(only0.contains(&0.0) && only0.iter().any(|&v| v != 0.0));
        assert_eq!(both, psi_dare(&tuple(&[true, true], &[&d0, &d1]), &p, &key).unwrap());
    }

    #[test]
    fn apply_adds_base() {
        let base = BlockBuffer::new(BlockKey::new("w", 0), vec![1.0, 1.0]);
        let p = OperatorParams::new(OperatorKind::AvgFixed, 1).with_alphas(vec![1.0]);
        let zero = MaskedDeltaTuple::new(2, vec![None]).unwrap();
        assert_eq!(apply_budgeted_op(&base, &zero, &p).unwrap().values, vec![1.0, 1.0]);
        let t = MaskedDeltaTuple::new(2, vec![Some(vec![2.0, 4.0])]).unwrap();
        assert_eq!(apply_budgeted_op(&base, &t, &p).unwrap().values, vec![3.0, 5.0]);
        let short = MaskedDeltaTuple::new(3, vec![Some(vec![2.0, 4.0, 1.0])]).unwrap();
        assert!(matches!(apply_budgeted_op(&base, &short, &p), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn negative_zero_base_survives_zero_delta() {
        let base = BlockBuffer::new(BlockKey::new("w", 0), vec![-0.0]);
        let p = OperatorParams::new(OperatorKind::AvgFixed, 1);
        let zero = MaskedDeltaTuple::new(1, vec![None]).unwrap();
        assert!(apply_budgeted_op(&base, &zero, &p).unwrap().bit_eq(&base));
    }

    fn op_strategy() -> impl Strategy<Value = OperatorKind> {
        prop_oneof![
            Just(OperatorKind::AvgFixed),
            Just(OperatorKind::AvgRenorm),
            Just(OperatorKind::Ties),
            Just(OperatorKind::Dare),
        ]
    }

    proptest! {
        /// Values of omitted experts never influence the output.
        #[test]
        fn non_anticipatory(
            op in op_strategy(),
            mask in proptest::collection::vec(any::<bool>(), 1..6),
            seed in any::<u64>(),
            fill_a in -10.0f32..10.0,
            fill_b in -10.0f32..10.0,
        ) {
            let k = mask.len();
            let n = 7;
            let key = BlockKey::new("t", 1);
            let p = OperatorParams::new(op, k).with_seed(seed).with_ties_density(0.5);
            let selected = |i: usize| -> Vec<f32> { (0..n).map(|j| ((i * 31 + j * 7) % 13) as f32 - 6.0).collect() };
            let make = |fill: f32| -> Vec<Vec<f32>> {
                (0..k).map(|i| if mask[i] { selected(i) } else { vec![fill; n] }).collect()
            };
            let a = MaskedDeltaTuple::from_full(&mask, make(fill_a)).unwrap();
            let b = MaskedDeltaTuple::from_full(&mask, make(fill_b)).unwrap();
            let out_a = psi(&a, &p, &key).unwrap();
            let out_b = psi(&b, &p, &key).unwrap();
            prop_assert_eq!(
                out_a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                out_b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        /// For fixed coefficients, full − masked equals the omitted terms.
        #[test]
        fn avg_fixed_exact_difference(
            mask in proptest::collection::vec(any::<bool>(), 1..6),
            values in proptest::collection::vec(-4.0f32..4.0, 30),
        ) {
            let k = mask.len();
            let n = 5;
            let all: Vec<Vec<f32>> = (0..k).map(|i| values[i * n..(i + 1) * n].to_vec()).collect();
            let p = OperatorParams::new(OperatorKind::AvgFixed, k);
            let full = psi_avg_fixed(&MaskedDeltaTuple::from_full(&vec![true; k], all.clone()).unwrap(), &p).unwrap();
            let masked = psi_avg_fixed(&MaskedDeltaTuple::from_full(&mask, all.clone()).unwrap(), &p).unwrap();
            for j in 0..n {
                let omitted: f64 = (0..k).filter(|&i| !mask[i]).map(|i| p.alphas[i] * all[i][j] as f64).sum();
                let diff = full[j] - masked[j];
                prop_assert!((diff - omitted).abs() <= 1e-12 * (1.0 + omitted.abs()));
            }
        }
    }
}
