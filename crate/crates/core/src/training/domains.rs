//! Target-domain sampling for attribute editing.
//!
//! A target label is the source label with a set of edits applied. Edits
//! are a hair-colour swap (keeps the one-hot pair valid) and single-bit
//! toggles for the other attributes. The first two targets are always the
//! hair change and the glasses toggle when those attributes exist.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::DomainLabel;
use crate::error::{config, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Edit {
    SwapHair(usize, usize),
    Toggle(usize),
}

#[derive(Clone, Debug)]
pub struct DomainSampler {
    edits: Vec<Edit>,
    num_attrs: usize,
}

impl DomainSampler {
    pub fn new(attribute_names: &[String]) -> Self {
        let pos = |name: &str| attribute_names.iter().position(|n| n == name);
        let mut edits = Vec::new();
        let mut used = Vec::new();
        match (pos("blond-hair"), pos("black-hair")) {
            (Some(a), Some(b)) => {
                edits.push(Edit::SwapHair(a, b));
                used.extend([a, b]);
            }
            (Some(a), None) | (None, Some(a)) => {
                edits.push(Edit::Toggle(a));
                used.push(a);
            }
            (None, None) => {}
        }
        if let Some(g) = pos("glasses") {
            edits.push(Edit::Toggle(g));
            used.push(g);
        }
        for i in 0..attribute_names.len() {
            if !used.contains(&i) {
                edits.push(Edit::Toggle(i));
            }
        }
        Self {
            edits,
            num_attrs: attribute_names.len(),
        }
    }

    /// Distinct non-identity targets reachable from any label.
    pub fn capacity(&self) -> usize {
        (1usize << self.edits.len().min(20)) - 1
    }

    pub fn validate(&self, per_sample: usize) -> Result<()> {
        if per_sample == 0 || per_sample > self.capacity() {
            return Err(config(format!(
                "domains_per_sample must be in [1, {}], got {per_sample}",
                self.capacity()
            )));
        }
        Ok(())
    }

    fn apply(&self, c: &DomainLabel, mask: usize) -> DomainLabel {
        let mut bits = c.bits.clone();
        for (i, e) in self.edits.iter().enumerate() {
            if mask >> i & 1 == 1 {
                match *e {
                    Edit::SwapHair(a, b) => bits.swap(a, b),
                    Edit::Toggle(a) => bits[a] = 1 - bits[a],
                }
            }
        }
        DomainLabel { bits }
    }

    /// `count` distinct edit masks: the single edits in order first, then
    /// random combinations.
    fn masks(&self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.edits.len().min(2)).map(|i| 1 << i).take(count).collect();
        let mut rest: Vec<usize> = (1..=self.capacity()).filter(|m| !out.contains(m)).collect();
        rest.shuffle(rng);
        out.extend(rest.into_iter().take(count - out.len()));
        out
    }

    /// `count` target labels for one source label.
    pub fn sample(&self, c: &DomainLabel, count: usize, rng: &mut impl Rng) -> Vec<DomainLabel> {
        assert_eq!(c.len(), self.num_attrs, "label length mismatch");
        self.masks(count, rng).into_iter().map(|m| self.apply(c, m)).collect()
    }

    /// `count` tensors `[N,K]`, one per domain slot.
    pub fn sample_batch(&self, labels: &[DomainLabel], count: usize, rng: &mut impl Rng) -> Vec<Tensor> {
        let per: Vec<Vec<DomainLabel>> = labels.iter().map(|c| self.sample(c, count, rng)).collect();
        (0..count)
            .map(|j| {
                let data = per.iter().flat_map(|d| d[j].as_f64()).collect();
                Tensor::from_vec(&[labels.len(), self.num_attrs], data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ATTRIBUTE_NAMES;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names() -> Vec<String> {
        ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn first_targets_change_hair_then_glasses() {
        let s = DomainSampler::new(&names());
        let c = DomainLabel::new(vec![1, 0, 0, 1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s.sample(&c, 5, &mut rng);
        assert_eq!(d[0].bits, vec![0, 1, 0, 1, 0]);
        assert_eq!(d[1].bits, vec![1, 0, 1, 1, 0]);
        for (i, a) in d.iter().enumerate() {
            assert_ne!(a, &c);
            assert_eq!(a.bits[0] + a.bits[1], 1, "hair stays one-hot");
            for b in &d[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn capacity_bounds_the_domain_count() {
        let s = DomainSampler::new(&names());
        assert_eq!(s.capacity(), 15);
        assert!(s.validate(0).is_err());
        assert!(s.validate(16).is_err());
        assert!(s.validate(15).is_ok());
    }
}
