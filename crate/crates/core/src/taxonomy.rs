//! Component → label mapping for a group ICA decomposition.
//!
//! A taxonomy file has one `index<TAB>LABEL` line per component; blank lines
//! and lines starting with `#` are ignored. Labels are deduplicated by exact
//! string match and class ids follow first appearance.

use std::collections::HashMap;

use log::warn;
use thiserror::Error;

/// Taxonomy for the 100-component decomposition, 58 unique labels.
pub const BUNDLED_TAXONOMY: &str = include_str!("../data/taxonomy_ica100.tsv");

pub const NOISE: &str = "NOISE";
pub const UNKNOWN: &str = "UNKNOWN";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("DuplicateIndex: component {0} listed more than once")]
    DuplicateIndex(usize),
    #[error("MissingIndex: component {0} has no label")]
    MissingIndex(usize),
    #[error("EmptyLabel: line {0} has an empty label")]
    EmptyLabel(usize),
    #[error("MalformedLine: line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("EmptyCounts: no class counts given")]
    EmptyCounts,
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub component_index: usize,
    pub raw_label: String,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    entries: Vec<LabelEntry>,
    classes: Vec<String>,
    class_counts: Vec<usize>,
}

fn valid_label(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '-')
}

impl Taxonomy {
    /// Parse taxonomy text. Indices must cover `0..n` exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut by_index: Vec<Option<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (idx, label) = line.split_once('\t').ok_or_else(|| TaxonomyError::MalformedLine {
                line: lineno,
                reason: "expected index<TAB>label".into(),
            })?;
            let idx: usize = idx.trim().parse().map_err(|_| TaxonomyError::MalformedLine {
                line: lineno,
                reason: format!("bad component index {idx:?}"),
            })?;
            let label = label.trim();
            if label.is_empty() {
                return Err(TaxonomyError::EmptyLabel(lineno));
            }
            if !valid_label(label) {
                return Err(TaxonomyError::MalformedLine {
                    line: lineno,
                    reason: format!("label {label:?} must be uppercase alphanumeric or '-'"),
                });
            }
            if idx >= by_index.len() {
                by_index.resize(idx + 1, None);
            }
            if by_index[idx].is_some() {
                return Err(TaxonomyError::DuplicateIndex(idx));
            }
            by_index[idx] = Some(label.to_string());
        }

        let mut classes: Vec<String> = Vec::new();
        let mut class_of: HashMap<String, usize> = HashMap::new();
        let mut class_counts: Vec<usize> = Vec::new();
        let mut entries = Vec::with_capacity(by_index.len());
        for (component_index, label) in by_index.into_iter().enumerate() {
            let raw_label = label.ok_or(TaxonomyError::MissingIndex(component_index))?;
            let class_id = *class_of.entry(raw_label.clone()).or_insert_with(|| {
                classes.push(raw_label.clone());
                class_counts.push(0);
                classes.len() - 1
            });
            class_counts[class_id] += 1;
            entries.push(LabelEntry {
                component_index,
                raw_label,
                class_id,
            });
        }
        Ok(Taxonomy {
            entries,
            classes,
            class_counts,
        })
    }

    /// The taxonomy shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TAXONOMY).expect("bundled taxonomy is valid")
    }

    /// Serialize back to the `index<TAB>LABEL` format.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.component_index, e.raw_label))
            .collect()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_components(&self) -> usize {
        self.entries.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn label(&self, class_id: usize) -> &str {
        &self.classes[class_id]
    }

    pub fn class_of_component(&self, component: usize) -> Option<usize> {
        self.entries.get(component).map(|e| e.class_id)
    }
}

/// The three parts of a `FUNCTION-LOCATION-SUBLOCATION` label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelParts {
    pub function: String,
    pub location: Option<String>,
    pub sublocation: Option<String>,
}

pub fn parse_label(raw: &str) -> Result<LabelParts> {
    let mut tokens = raw.splitn(3, '-');
    let function = tokens.next().unwrap_or_default();
    if function.is_empty() {
        return Err(TaxonomyError::EmptyLabel(0));
    }
    Ok(LabelParts {
        function: function.to_string(),
        location: tokens.next().map(str::to_string),
        sublocation: tokens.next().map(str::to_string),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightScheme {
    #[default]
    InverseFrequency,
    Uniform,
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "inverse_frequency" | "inverse-frequency" => Ok(WeightScheme::InverseFrequency),
            "uniform" => Ok(WeightScheme::Uniform),
            other => Err(format!("unknown weight scheme {other:?}")),
        }
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightScheme::InverseFrequency => "inverse_frequency",
            WeightScheme::Uniform => "uniform",
        })
    }
}

/// Per-class loss weights. Inverse frequency is `N / (K * n_c)`; a class with
/// no samples is treated as having one.
pub fn class_weights(counts: &[usize], scheme: WeightScheme) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(TaxonomyError::EmptyCounts);
    }
    match scheme {
        WeightScheme::Uniform => Ok(vec![1.0; counts.len()]),
        WeightScheme::InverseFrequency => {
            let k = counts.len() as f64;
            let clamped: Vec<usize> = counts.iter().map(|&n| n.max(1)).collect();
            let absent = counts.iter().filter(|&&n| n == 0).count();
            if absent > 0 {
                warn!("{absent} classes have no samples; weighting them as if they had one");
            }
            let total: usize = clamped.iter().sum();
            Ok(clamped
                .iter()
                .map(|&n| total as f64 / (k * n as f64))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_has_58_classes() {
        let t = Taxonomy::bundled();
        assert_eq!(t.num_components(), 100);
        assert_eq!(t.num_classes(), 58);
        assert!(t.class_id(NOISE).is_some());
        assert!(t.class_id(UNKNOWN).is_some());
        assert_eq!(t.class_counts().iter().sum::<usize>(), 100);
        // repeated real-network labels collapse to one class
        assert_eq!(t.entries()[16].class_id, t.entries()[52].class_id);
        assert_eq!(t.entries()[91].class_id, t.entries()[95].class_id);
    }

    #[test]
    fn dedup_of_identical_labels() {
        let t = Taxonomy::parse("0\tNOISE\n1\tNOISE\n").unwrap();
        assert_eq!(t.num_components(), 2);
        assert_eq!(t.classes(), &["NOISE".to_string()]);
        assert_eq!(t.class_counts(), &[2]);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let t = Taxonomy::parse("# hdr\n\n1\tB\n0\tA\n").unwrap();
        assert_eq!(t.classes(), &["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn rejection_cases() {
        assert_eq!(
            Taxonomy::parse("0\tA\n5\tB\n5\tC\n"),
            Err(TaxonomyError::DuplicateIndex(5))
        );
        assert_eq!(Taxonomy::parse("0\tA\n2\tB\n"), Err(TaxonomyError::MissingIndex(1)));
        assert_eq!(Taxonomy::parse("0\t \n"), Err(TaxonomyError::EmptyLabel(1)));
        assert!(matches!(
            Taxonomy::parse("0 NOISE\n"),
            Err(TaxonomyError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            Taxonomy::parse("x\tNOISE\n"),
            Err(TaxonomyError::MalformedLine { .. })
        ));
        assert!(matches!(
            Taxonomy::parse("0\tnoise\n"),
            Err(TaxonomyError::MalformedLine { .. })
        ));
    }

    #[test]
    fn reserialize_round_trip() {
        let t = Taxonomy::bundled();
        assert_eq!(Taxonomy::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn label_parts() {
        let p = parse_label("DMN-PCC-MID").unwrap();
        assert_eq!(
            p,
            LabelParts {
                function: "DMN".into(),
                location: Some("PCC".into()),
                sublocation: Some("MID".into())
            }
        );
        let p = parse_label("NOISE").unwrap();
        assert_eq!((p.location, p.sublocation), (None, None));
        let p = parse_label("VISUAL-CUNEUS-SUPERIOR-LATERAL-POSTERIOR").unwrap();
        assert_eq!(p.function, "VISUAL");
        assert_eq!(p.location.as_deref(), Some("CUNEUS"));
        assert_eq!(p.sublocation.as_deref(), Some("SUPERIOR-LATERAL-POSTERIOR"));
        assert!(parse_label("").is_err());
    }

    #[test]
    fn weight_examples() {
        let w = class_weights(&[50, 25, 25], WeightScheme::InverseFrequency).unwrap();
        let expected = [2.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(class_weights(&[10, 10], WeightScheme::InverseFrequency).unwrap(), vec![1.0, 1.0]);
        assert_eq!(class_weights(&[3, 9, 1], WeightScheme::Uniform).unwrap(), vec![1.0; 3]);
        assert_eq!(class_weights(&[], WeightScheme::Uniform), Err(TaxonomyError::EmptyCounts));
        let w = class_weights(&[4, 0], WeightScheme::InverseFrequency).unwrap();
        assert!(w.iter().all(|&x| x > 0.0));
    }

    proptest! {
        #[test]
        fn weighted_counts_sum_to_total(counts in proptest::collection::vec(1usize..10_000, 1..60)) {
            let w = class_weights(&counts, WeightScheme::InverseFrequency).unwrap();
            let total: usize = counts.iter().sum();
            let sum: f64 = counts.iter().zip(&w).map(|(&n, &w)| n as f64 * w).sum();
            prop_assert!((sum - total as f64).abs() <= 1e-9 * total as f64);
        }
    }
}
