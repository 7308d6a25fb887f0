use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train/test partition in which whole studies move together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    /// Fraction of studies assigned to the test side.
    pub fraction: f64,
}

impl SplitManifest {
    pub fn train_set(&self) -> BTreeSet<&str> {
        self.train.iter().map(String::as_str).collect()
    }

    pub fn test_set(&self) -> BTreeSet<&str> {
        self.test.iter().map(String::as_str).collect()
    }
}

/// Partitions `(item id, study id)` pairs by study.
///
/// `fraction` of the distinct studies (rounded, but at least one and at
/// most all but one) go to the test side.
pub fn split_by_study<S: AsRef<str>, T: AsRef<str>>(
    items: &[(S, T)],
    fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1]")));
    }
    let studies: BTreeSet<&str> = items.iter().map(|(_, s)| s.as_ref()).collect();
    if studies.len() < 2 {
        return Err(Error::invalid(format!(
            "cannot split {} study(ies); need at least 2",
            studies.len()
        )));
    }
    let mut order: Vec<&str> = studies.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let test_studies: BTreeSet<&str> = order[..n_test].iter().copied().collect();
    let mut manifest = SplitManifest {
        train: Vec::new(),
        test: Vec::new(),
        seed,
        fraction,
    };
    for (id, study) in items {
        let side = if test_studies.contains(study.as_ref()) {
            &mut manifest.test
        } else {
            &mut manifest.train
        };
        side.push(id.as_ref().to_string());
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_image_studies() {
        let items: Vec<(String, String)> = (0..10).map(|i| (format!("i{i}"), format!("s{i}"))).collect();
        let m = split_by_study(&items, 0.3, 1).unwrap();
        assert_eq!(m.test.len(), 3);
        assert_eq!(m.train.len(), 7);
    }

    #[test]
    fn single_study_rejected() {
        let items = vec![("a", "s"), ("b", "s")];
        assert!(split_by_study(&items, 0.5, 0).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let items: Vec<(String, String)> = (0..30).map(|i| (format!("i{i}"), format!("s{}", i / 3))).collect();
        assert_eq!(split_by_study(&items, 0.25, 5).unwrap(), split_by_study(&items, 0.25, 5).unwrap());
    }
}
