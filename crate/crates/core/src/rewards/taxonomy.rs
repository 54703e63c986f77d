use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RewardError;

/// Two-level defect taxonomy: family -> leaves, plus an alias table mapping
/// free-form labels onto leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub families: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

const DEFAULT_FAMILIES: &[(&str, &[&str])] = &[
    (
        "surface-mark",
        &["scratch", "stain", "discoloration", "contamination", "spot", "print", "oil", "glue", "liquid"],
    ),
    ("structural", &["crack", "hole", "cut", "broken", "fracture", "chip", "poke"]),
    ("deformation", &["bent", "dent", "deformation", "squeeze", "fold", "misshapen", "melt"]),
    ("assembly", &["missing-part", "misplaced", "flip", "extra-part", "swap", "short"]),
    ("texture", &["rough", "fabric-defect", "thread", "pill", "burr"]),
];

const DEFAULT_ALIASES: &[(&str, &str)] = &[
    ("scratches", "scratch"),
    ("scratch-head", "scratch"),
    ("scratch-neck", "scratch"),
    ("scuff", "scratch"),
    ("abrasion", "scratch"),
    ("stains", "stain"),
    ("color", "discoloration"),
    ("colour", "discoloration"),
    ("faulty-imprint", "print"),
    ("imprint", "print"),
    ("dirt", "contamination"),
    ("foreign-object", "contamination"),
    ("particle", "contamination"),
    ("spot-wrong", "spot"),
    ("cracks", "crack"),
    ("crack-large", "crack"),
    ("cut-inner-insulation", "cut"),
    ("cut-outer-insulation", "cut"),
    ("cut-lead", "cut"),
    ("poke-insulation", "poke"),
    ("broken-large", "broken"),
    ("broken-small", "broken"),
    ("breakage", "broken"),
    ("damage", "broken"),
    ("damaged", "broken"),
    ("chip-around", "chip"),
    ("chipped", "chip"),
    ("bent-wire", "bent"),
    ("bent-lead", "bent"),
    ("bend", "bent"),
    ("bending", "bent"),
    ("dented", "dent"),
    ("deformed", "deformation"),
    ("warp", "deformation"),
    ("squeezed-teeth", "squeeze"),
    ("missing", "missing-part"),
    ("missing-wire", "missing-part"),
    ("missing-cable", "missing-part"),
    ("missing-component", "missing-part"),
    ("missing-lead", "missing-part"),
    ("cable-swap", "swap"),
    ("misaligned", "misplaced"),
    ("misplacement", "misplaced"),
    ("manipulated-front", "deformation"),
    ("combined", "misplaced"),
    ("gray-stroke", "stain"),
    ("pill-type", "pill"),
    ("split-teeth", "broken"),
    ("rough-surface", "rough"),
    ("fabric-border", "fabric-defect"),
    ("fabric-interior", "fabric-defect"),
    ("metal-contamination", "contamination"),
    ("glue-strip", "glue"),
];

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy {
            families: DEFAULT_FAMILIES
                .iter()
                .map(|(f, leaves)| (f.to_string(), leaves.iter().map(|l| l.to_string()).collect()))
                .collect(),
            aliases: DEFAULT_ALIASES
                .iter()
                .map(|(a, l)| (a.to_string(), l.to_string()))
                .collect(),
        }
    }
}

/// Lowercases and maps spaces and underscores to `-`.
pub fn fold_label(s: &str) -> String {
    let lower = s.trim().to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for c in lower.chars() {
        let c = if c == '_' || c.is_whitespace() { '-' } else { c };
        if c == '-' && (out.is_empty() || out.ends_with('-')) {
            continue;
        }
        out.push(c);
    }
    out.trim_end_matches('-').to_string()
}

impl Taxonomy {
    pub fn from_toml(text: &str) -> Result<Self, RewardError> {
        toml::from_str(text).map_err(|e| RewardError::Taxonomy(e.to_string()))
    }

    fn family_of(&self, leaf: &str) -> Option<&str> {
        self.families
            .iter()
            .find(|(_, leaves)| leaves.iter().any(|l| l == leaf))
            .map(|(f, _)| f.as_str())
    }

    /// Folds a label onto a leaf: direct leaf, alias, or a trailing `s`
    /// stripped. Returns the folded string unchanged when nothing matches.
    pub fn resolve(&self, label: &str) -> String {
        let folded = fold_label(label);
        if self.family_of(&folded).is_some() {
            return folded;
        }
        if let Some(leaf) = self.aliases.get(&folded) {
            return leaf.clone();
        }
        if let Some(stem) = folded.strip_suffix('s') {
            if self.family_of(stem).is_some() {
                return stem.to_string();
            }
            if let Some(leaf) = self.aliases.get(stem) {
                return leaf.clone();
            }
        }
        folded
    }

    pub fn contains(&self, label: &str) -> bool {
        self.family_of(&self.resolve(label)).is_some()
    }

    /// 1.0 for the same leaf, 0.5 for the same family, else 0.0.
    pub fn type_reward(&self, pred: &str, gt: &str) -> Result<f64, RewardError> {
        let gt_leaf = self.resolve(gt);
        let gt_family = self
            .family_of(&gt_leaf)
            .ok_or_else(|| RewardError::UnknownType(gt.to_string()))?;
        let pred_leaf = self.resolve(pred);
        if pred_leaf == gt_leaf {
            return Ok(1.0);
        }
        Ok(match self.family_of(&pred_leaf) {
            Some(f) if f == gt_family => 0.5,
            _ => 0.0,
        })
    }
}

pub fn type_reward(pred: &str, gt: &str, taxonomy: &Taxonomy) -> Result<f64, RewardError> {
    taxonomy.type_reward(pred, gt)
}
