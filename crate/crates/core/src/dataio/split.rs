use crate::error::{config, Result};

/// Three contiguous, order-preserving partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub defense_train: Vec<T>,
    pub target_train: Vec<T>,
    pub eval: Vec<T>,
}

impl<T> Splits<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.defense_train.len(), self.target_train.len(), self.eval.len())
    }
}

/// Partition sizes: the first two are rounded shares, the last takes the rest.
pub fn split_sizes(count: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(config(format!("invalid split fractions {fractions:?}")));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(config(format!("split fractions {fractions:?} do not sum to 1")));
    }
    let n = count as f64;
    let first = ((n * a).round() as usize).min(count);
    let second = ((n * b).round() as usize).min(count - first);
    let third = count - first - second;
    for (f, size, name) in [(a, first, "defense-train"), (b, second, "target-train"), (c, third, "eval")] {
        if f > 0.0 && size == 0 {
            return Err(config(format!(
                "{count} samples leave the {name} partition empty"
            )));
        }
    }
    Ok((first, second, third))
}

pub fn split_dataset<T: Clone>(samples: &[T], fractions: (f64, f64, f64)) -> Result<Splits<T>> {
    let (a, b, _) = split_sizes(samples.len(), fractions)?;
    Ok(Splits {
        defense_train: samples[..a].to_vec(),
        target_train: samples[a..a + b].to_vec(),
        eval: samples[a + b..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_samples_split_five_four_one() {
        let s = split_dataset(&(0..10).collect::<Vec<_>>(), (0.5, 0.4, 0.1)).unwrap();
        assert_eq!(s.sizes(), (5, 4, 1));
        assert_eq!(s.eval, vec![9]);
    }

    #[test]
    fn too_few_samples_or_bad_fractions_fail() {
        assert!(split_dataset(&[1, 2], (0.5, 0.4, 0.1)).is_err());
        assert!(split_dataset(&[1, 2, 3], (0.5, 0.4, 0.2)).is_err());
        assert!(split_dataset(&[1, 2, 3], (1.2, -0.2, 0.0)).is_err());
        assert_eq!(split_dataset(&[1, 2, 3], (1.0, 0.0, 0.0)).unwrap().sizes(), (3, 0, 0));
    }

    proptest! {
        #[test]
        fn splits_partition_the_input(n in 3usize..400, a in 0.05f64..0.9) {
            let b = (1.0 - a) * 0.7;
            let c = 1.0 - a - b;
            let items: Vec<usize> = (0..n).collect();
            if let Ok(s) = split_dataset(&items, (a, b, c)) {
                let joined: Vec<usize> = s.defense_train.iter()
                    .chain(&s.target_train).chain(&s.eval).copied().collect();
                prop_assert_eq!(joined, items.clone());
                prop_assert_eq!(split_dataset(&items, (a, b, c)).unwrap(), s);
            }
        }
    }
}
