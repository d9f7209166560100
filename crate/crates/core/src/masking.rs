//! Training masks, the inference mask bank, and mask application.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::numerics::Rng;

/// Banks larger than this are refused; each mask costs a full forward pass.
pub const MAX_BANK_SIZE: u128 = 50_000_000;

/// A binary feature mask, `true` = masked.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Mask(pub Vec<bool>);

impl Mask {
    pub fn none(d: usize) -> Self {
        Mask(vec![false; d])
    }

    pub fn from_indices(d: usize, idx: &[usize]) -> Self {
        let mut bits = vec![false; d];
        for &i in idx {
            bits[i] = true;
        }
        Mask(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.0[j]).collect()
    }

    pub fn to_bits_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskBank {
    pub d: usize,
    pub r: usize,
    masks: Vec<Mask>,
}

impl MaskBank {
    /// Bank with an explicit mask list, in the given order.
    pub fn from_masks(d: usize, r: usize, masks: Vec<Mask>) -> Self {
        assert!(masks.iter().all(|m| m.len() == d), "mask length differs from d");
        Self { d, r, masks }
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Row-major `n x d` training mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    pub n: usize,
    pub d: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            bits: vec![false; n * d],
        }
    }

    /// Every row equal to `mask`.
    pub fn repeat(mask: &Mask, n: usize) -> Self {
        Self {
            n,
            d: mask.len(),
            bits: mask.0.repeat(n),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.d + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &MaskMatrix) -> Self {
        assert_eq!(self.d, other.d);
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&other.bits);
        Self {
            n: self.n + other.n,
            d: self.d,
            bits,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            bits.extend_from_slice(self.row(i));
        }
        Self {
            n: rows.len(),
            d: self.d,
            bits,
        }
    }
}

pub fn sample_train_mask(n: usize, d: usize, p_mask: f64, rng: &mut Rng) -> Result<MaskMatrix> {
    ensure!(
        p_mask > 0.0 && p_mask < 1.0,
        Contract,
        "p_mask must lie in (0, 1), got {p_mask}"
    );
    let bits = (0..n * d).map(|_| rng.random::<f64>() < p_mask).collect();
    Ok(MaskMatrix { n, d, bits })
}

/// Number of masks with 1..=r bits set out of d, or `None` on overflow.
pub fn bank_size(d: usize, r: usize) -> Option<u128> {
    (1..=r).try_fold(0u128, |acc, k| acc.checked_add(binomial(d, k)?))
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        // c * (n - i) / (i + 1) stays integral at every step
        c = c.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(c)
}

/// Every mask with 1..=r of d bits set, by ascending popcount and, within a
/// popcount, lexicographically by masked index set.
pub fn build_mask_bank(d: usize, r: usize) -> Result<MaskBank> {
    ensure!(d >= 1, Contract, "mask bank needs at least one feature");
    ensure!(r >= 1, Contract, "r must be at least 1");
    ensure!(r <= d, Contract, "r={r} exceeds feature count d={d}");
    let size = bank_size(d, r).filter(|&m| m <= MAX_BANK_SIZE).ok_or_else(|| {
        Error::Capacity(format!(
            "mask bank for d={d}, r={r} has more than {MAX_BANK_SIZE} masks; use a smaller r"
        ))
    })?;
    let mut masks = Vec::with_capacity(size as usize);
    for k in 1..=r {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            masks.push(Mask::from_indices(d, &idx));
            // advance to the next k-combination in lexicographic order
            let Some(p) = (0..k).rev().find(|&p| idx[p] < d - k + p) else {
                break;
            };
            idx[p] += 1;
            for q in p + 1..k {
                idx[q] = idx[q - 1] + 1;
            }
        }
    }
    Ok(MaskBank { d, r, masks })
}

/// One feature after masking: the (possibly zeroed) payload and its indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeature {
    pub payload: Vec<f64>,
    pub indicator: f64,
}

pub fn apply_mask(encoded: &[Vec<f64>], mask: &Mask) -> Result<Vec<MaskedFeature>> {
    ensure!(
        encoded.len() == mask.len(),
        Dimension,
        "mask of length {} for {} features",
        mask.len(),
        encoded.len()
    );
    Ok(encoded
        .iter()
        .zip(&mask.0)
        .map(|(x, &m)| MaskedFeature {
            payload: if m { vec![0.0; x.len()] } else { x.clone() },
            indicator: if m { 1.0 } else { 0.0 },
        })
        .collect())
}
