use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score given to tokens missing from the table.
pub const OOV_FLOOR: f64 = 1.0;

const BUNDLED: &str = include_str!("../../data/zipf_en.tsv");

/// Token → Zipf frequency.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrequencyTable {
    zipf: HashMap<String, f64>,
}

impl FrequencyTable {
    /// Parses `token<TAB>zipf` lines. Blank lines are skipped; a repeated
    /// token keeps its last value and logs a warning.
    pub fn parse(text: &str) -> Result<Self> {
        let mut zipf = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |why: &str| Error::invalid(format!("frequency table line {}: {why}", n + 1));
            let (token, value) = line.split_once('\t').ok_or_else(|| bad("expected token<TAB>zipf"))?;
            let value: f64 = value.trim().parse().map_err(|_| bad("zipf value is not a number"))?;
            if !(1.0..=8.0).contains(&value) {
                return Err(bad("zipf value outside [1, 8]"));
            }
            let token = token.trim().to_lowercase();
            if token.is_empty() {
                return Err(bad("empty token"));
            }
            if zipf.insert(token.clone(), value).is_some() {
                log::warn!("frequency table line {}: duplicate token `{token}`, keeping the later value", n + 1);
            }
        }
        Ok(Self { zipf })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The English table shipped with the crate.
    pub fn bundled() -> &'static FrequencyTable {
        static TABLE: OnceLock<FrequencyTable> = OnceLock::new();
        TABLE.get_or_init(|| FrequencyTable::parse(BUNDLED).expect("bundled table parses"))
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        Self { zipf: pairs.into_iter().map(|(k, v)| (k.into().to_lowercase(), v)).collect() }
    }

    pub fn get(&self, token: &str) -> Option<f64> {
        self.zipf.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.zipf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zipf.is_empty()
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(name: &str) -> Vec<String> {
    name.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityScore {
    /// Mean token Zipf value per class, in input order.
    pub per_class: Vec<f64>,
    /// Mean of the class scores.
    pub dataset_score: f64,
    /// Share of all tokens that were missing from the table.
    pub oov_fraction: f64,
}

/// Adjusted Zipf score of a list of class names: each name is the mean of
/// its token scores with [`OOV_FLOOR`] for unknown tokens, and the dataset
/// is the mean over names. Lower means rarer.
pub fn zipf_rarity<S: AsRef<str>>(class_names: &[S], table: &FrequencyTable) -> Result<RarityScore> {
    if class_names.is_empty() {
        return Err(Error::invalid("no class names"));
    }
    let (mut tokens_total, mut oov) = (0usize, 0usize);
    let mut per_class = Vec::with_capacity(class_names.len());
    for name in class_names {
        let tokens = tokenize(name.as_ref());
        if tokens.is_empty() {
            return Err(Error::invalid(format!("class name `{}` has no tokens", name.as_ref())));
        }
        let mut sum = 0.0;
        for t in &tokens {
            match table.get(t) {
                Some(z) => sum += z,
                None => {
                    sum += OOV_FLOOR;
                    oov += 1;
                }
            }
        }
        tokens_total += tokens.len();
        per_class.push(sum / tokens.len() as f64);
    }
    Ok(RarityScore {
        dataset_score: per_class.iter().sum::<f64>() / per_class.len() as f64,
        per_class,
        oov_fraction: oov as f64 / tokens_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_and_lowercases() {
        assert_eq!(tokenize("Cedar_apple-rust  Leaf"), vec!["cedar", "apple", "rust", "leaf"]);
        assert_eq!(tokenize("Apple___Black_rot"), vec!["apple", "black", "rot"]);
        assert!(tokenize(" -_ ").is_empty());
    }

    #[test]
    fn constant_table_and_full_oov() {
        let table = FrequencyTable::from_pairs([("forest", 6.0), ("river", 6.0), ("sea", 6.0)]);
        let s = zipf_rarity(&["Forest", "river sea"], &table).unwrap();
        assert_eq!((s.dataset_score, s.oov_fraction), (6.0, 0.0));
        let s = zipf_rarity(&["Achroomyces disciformis", "Zzyzxia qorblatica"], &table).unwrap();
        assert_eq!((s.dataset_score, s.oov_fraction), (OOV_FLOOR, 1.0));
        assert!(zipf_rarity(&["--"], &table).is_err());
        assert!(zipf_rarity::<&str>(&[], &table).is_err());
    }

    #[test]
    fn order_and_case_invariant() {
        let t = FrequencyTable::bundled();
        let a = zipf_rarity(&["Annual Crop", "Forest", "Sea Lake"], t).unwrap();
        let b = zipf_rarity(&["sea lake", "FOREST", "annual crop"], t).unwrap();
        assert!((a.dataset_score - b.dataset_score).abs() < 1e-12);
    }

    #[test]
    fn common_words_outscore_pseudo_latin() {
        let t = FrequencyTable::bundled();
        assert!(t.len() >= 49_000);
        let common = zipf_rarity(&["dog", "river", "forest", "house"], t).unwrap();
        let latin = zipf_rarity(&["Achroomyces disciformis", "Xylobolus frustulatus"], t).unwrap();
        assert!(common.dataset_score > latin.dataset_score);
        assert!(latin.dataset_score >= OOV_FLOOR);
    }

    #[test]
    fn parser_validates_and_keeps_last_duplicate() {
        let t = FrequencyTable::parse("apple\t5.0\n\nApple\t4.5\n").unwrap();
        assert_eq!(t.get("apple"), Some(4.5));
        assert!(FrequencyTable::parse("apple 5.0").is_err());
        assert!(FrequencyTable::parse("apple\tx").is_err());
        assert!(FrequencyTable::parse("apple\t9.5").is_err());
    }
}
