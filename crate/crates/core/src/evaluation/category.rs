use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Stems whose numbered variants (`pcb1`..`pcb4`, `transistor1`) name the
/// same product family.
pub const DEFAULT_VARIANT_STEMS: &[&str] = &["pcb", "transistor"];

/// Canonicalizes category names: lowercase, trimmed, runs of spaces,
/// hyphens and underscores collapsed to `_`, and a trailing number removed
/// when the remaining stem is a known multi-variant family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryNormalizer {
    pub variant_stems: BTreeSet<String>,
}

impl Default for CategoryNormalizer {
    fn default() -> Self {
        CategoryNormalizer {
            variant_stems: DEFAULT_VARIANT_STEMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryNormalizer {
    pub fn with_stems<I: IntoIterator<Item = S>, S: Into<String>>(stems: I) -> Self {
        CategoryNormalizer {
            variant_stems: stems.into_iter().map(Into::into).collect(),
        }
    }

    pub fn normalize(&self, name: &str) -> Result<String, EvalError> {
        let lower = name.trim().to_lowercase();
        if lower.is_empty() {
            return Err(EvalError::EmptyCategory);
        }
        let mut out = String::with_capacity(lower.len());
        let mut pending_sep = false;
        for c in lower.chars() {
            if c == ' ' || c == '-' || c == '_' || c.is_whitespace() {
                pending_sep = !out.is_empty();
            } else {
                if pending_sep {
                    out.push('_');
                    pending_sep = false;
                }
                out.push(c);
            }
        }
        if out.is_empty() {
            return Err(EvalError::EmptyCategory);
        }
        let stem = out.trim_end_matches(|c: char| c.is_ascii_digit());
        if stem.len() < out.len() {
            let stem = stem.trim_end_matches('_');
            if self.variant_stems.contains(stem) {
                return Ok(stem.to_string());
            }
        }
        Ok(out)
    }
}

/// Normalizes with the default stem list.
pub fn normalize_category(name: &str) -> Result<String, EvalError> {
    CategoryNormalizer::default().normalize(name)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub category: String,
    pub canonical: String,
    /// Every test category that normalizes to the same name, in input order.
    pub matched: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointSplit {
    pub retained: Vec<String>,
    pub removed: Vec<Removal>,
}

impl DisjointSplit {
    pub fn removed_names(&self) -> BTreeSet<&str> {
        self.removed.iter().map(|r| r.category.as_str()).collect()
    }
}

/// Drops every training category whose canonical form matches a test
/// category's canonical form.
pub fn category_disjoint_filter<T: AsRef<str>, U: AsRef<str>>(
    normalizer: &CategoryNormalizer,
    train: &[T],
    test: &[U],
) -> Result<DisjointSplit, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let test_canon: Vec<(String, &str)> = test
        .iter()
        .map(|t| Ok((normalizer.normalize(t.as_ref())?, t.as_ref())))
        .collect::<Result<_, EvalError>>()?;
    let mut split = DisjointSplit::default();
    for cat in train {
        let cat = cat.as_ref();
        let canonical = normalizer.normalize(cat)?;
        let matched: Vec<String> = test_canon
            .iter()
            .filter(|(c, _)| *c == canonical)
            .map(|(_, raw)| raw.to_string())
            .collect();
        if matched.is_empty() {
            split.retained.push(cat.to_string());
        } else {
            split.removed.push(Removal {
                category: cat.to_string(),
                canonical,
                matched,
            });
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_category("pcb2").unwrap(), "pcb");
        assert_eq!(normalize_category("transistor1").unwrap(), "transistor");
        assert_eq!(normalize_category("Zipper ").unwrap(), "zipper");
        assert_eq!(normalize_category("Metal - Nut").unwrap(), "metal_nut");
        assert_eq!(normalize_category("macaroni1").unwrap(), "macaroni1");
        assert_eq!(normalize_category("PCB_3").unwrap(), "pcb");
        assert!(matches!(normalize_category("  "), Err(EvalError::EmptyCategory)));
        assert!(matches!(normalize_category("--"), Err(EvalError::EmptyCategory)));
    }

    #[test]
    fn configurable_stems() {
        let n = CategoryNormalizer::with_stems(["macaroni"]);
        assert_eq!(n.normalize("macaroni2").unwrap(), "macaroni");
        assert_eq!(n.normalize("pcb2").unwrap(), "pcb2");
    }

    #[test]
    fn filter_examples() {
        let n = CategoryNormalizer::default();
        let s = category_disjoint_filter(&n, &["toothbrush", "bolt"], &["toothbrush"]).unwrap();
        assert_eq!(s.retained, vec!["bolt"]);
        assert_eq!(s.removed_names(), BTreeSet::from(["toothbrush"]));

        let s = category_disjoint_filter(&n, &["pcb"], &["pcb1", "pcb2"]).unwrap();
        assert_eq!(s.removed[0].matched, vec!["pcb1", "pcb2"]);

        let s = category_disjoint_filter(&n, &["a", "b"], &["c"]).unwrap();
        assert!(s.removed.is_empty());
        assert_eq!(s.retained.len(), 2);

        let empty: [&str; 0] = [];
        assert!(category_disjoint_filter(&n, &["a"], &empty).is_err());
    }
}
