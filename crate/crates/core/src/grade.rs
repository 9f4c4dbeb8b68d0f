//! Answer extraction and correctness metrics.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{QaInstance, ResponseRecord};

static ANSWER_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").expect("valid regex"));

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[+-]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?$").expect("valid regex")
});

pub const DEFAULT_TOLERANCE: f64 = 0.5;

/// Which correctness predicate a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MetricSpec {
    #[default]
    ExactMatch,
    ToleranceMatch {
        tol: f64,
    },
}

impl MetricSpec {
    pub fn tolerance(tol: f64) -> Result<Self, String> {
        if tol >= 0.0 && tol.is_finite() {
            Ok(MetricSpec::ToleranceMatch { tol })
        } else {
            Err(format!("tolerance {tol} must be finite and >= 0"))
        }
    }

    pub fn matches(&self, pred: &str, gold: &str) -> bool {
        match *self {
            MetricSpec::ExactMatch => exact_match(pred, gold),
            MetricSpec::ToleranceMatch { tol } => tolerance_match(pred, gold, tol),
        }
    }
}

/// Content of the last `<answer>…</answer>` pair, else the trimmed text.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(m) = ANSWER_TAG.captures_iter(text).last() {
        return Some(m[1].trim().to_string());
    }
    let trimmed = text.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

/// Parses a plain decimal number (optional sign, point, exponent).
///
/// Thousands separators, `inf` and `nan` are rejected.
pub fn parse_number(s: &str) -> Option<f64> {
    if !NUMBER.is_match(s) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn strip_text(s: &str) -> String {
    let nfc: String = s.nfc().collect::<String>().to_lowercase();
    let mut collapsed = nfc.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let trimmed = collapsed.trim_end_matches(['%', '.']).trim_end();
        if trimmed.len() == collapsed.len() {
            break;
        }
        collapsed = trimmed.to_string();
    }
    collapsed
}

/// Canonical form used by both metrics.
pub fn normalize(s: &str) -> String {
    let text = strip_text(s);
    match parse_number(&text) {
        Some(0.0) => "0".to_string(),
        Some(v) => format!("{v}"),
        None => text,
    }
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

/// Numeric comparison within `tol` (inclusive), else [`exact_match`].
pub fn tolerance_match(pred: &str, gold: &str, tol: f64) -> bool {
    match (
        parse_number(&strip_text(pred)),
        parse_number(&strip_text(gold)),
    ) {
        (Some(p), Some(g)) => (p - g).abs() <= tol,
        _ => exact_match(pred, gold),
    }
}

/// Outcome of an in-place grading pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradeSummary {
    pub graded: usize,
    pub correct: usize,
    /// Records whose instance is unknown or has no gold answer.
    pub skipped: usize,
}

/// Fills `extracted_answer` and `correct` on every record that has a gold answer.
pub fn grade_records(
    records: &mut [ResponseRecord],
    instances: &[QaInstance],
    metric: &MetricSpec,
) -> GradeSummary {
    let gold: HashMap<&str, &str> = instances
        .iter()
        .filter_map(|i| i.gold_answer.as_deref().map(|g| (i.id.as_str(), g)))
        .collect();
    let mut summary = GradeSummary::default();
    for rec in records.iter_mut() {
        rec.extracted_answer = extract_answer(&rec.text);
        match gold.get(rec.instance_id.as_str()) {
            Some(g) => {
                let ok = rec
                    .extracted_answer
                    .as_deref()
                    .is_some_and(|a| metric.matches(a, g));
                rec.correct = Some(ok);
                summary.graded += 1;
                summary.correct += ok as usize;
            }
            None => {
                rec.correct = None;
                summary.skipped += 1;
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extraction() {
        assert_eq!(
            extract_answer("<thinking>row 3 says so</thinking><answer>12 %</answer>").as_deref(),
            Some("12 %")
        );
        assert_eq!(extract_answer("just 42").as_deref(), Some("just 42"));
        assert_eq!(
            extract_answer("<answer>1</answer><answer>2</answer>").as_deref(),
            Some("2")
        );
        assert_eq!(extract_answer("  \n "), None);
        assert_eq!(extract_answer(""), None);
        assert_eq!(
            extract_answer("<answer>\n multi\nline </answer> trailing").as_deref(),
            Some("multi\nline")
        );
        // An unclosed tag is not well formed; the earlier pair wins.
        assert_eq!(
            extract_answer("<answer>5</answer> then <answer>6").as_deref(),
            Some("5")
        );
    }

    #[test]
    fn exact_match_normalization() {
        assert!(exact_match(" Blue ", "blue"));
        assert!(exact_match("42.0", "42"));
        assert!(!exact_match("41", "42"));
        assert!(exact_match("12 %", "12"));
        assert!(exact_match("Paris.", "paris"));
        assert!(exact_match("new   york", "New York"));
        assert!(exact_match("1e2", "100"));
        assert!(exact_match("-0", "0"));
        // NFC: precomposed vs combining acute.
        assert!(exact_match("caf\u{e9}", "cafe\u{301}"));
        assert!(!exact_match("1,234", "1234"));
    }

    #[test]
    fn tolerance_cases() {
        assert!(tolerance_match("41.6", "42", 0.5));
        assert!(!tolerance_match("41.4", "42", 0.5));
        assert!(tolerance_match("41.5", "42", 0.5));
        assert!(tolerance_match("blue", "blue", 0.5));
        assert!(!tolerance_match("1,234", "1234", 0.5));
        assert!(tolerance_match("12%", "12.3", 0.5));
    }

    #[test]
    fn numeric_grammar() {
        for ok in ["1", "-1", "+2.5", ".5", "5.", "1e3", "1.5E-2"] {
            assert!(parse_number(ok).is_some(), "{ok}");
        }
        for bad in [
            "", "1,234", "inf", "nan", "1e400", "--1", "1.2.3", "0x10", "e5",
        ] {
            assert!(parse_number(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn grading_pass() {
        let inst = |id: &str, gold: Option<&str>| QaInstance {
            id: id.into(),
            image_path: "x.png".into(),
            question: "q".into(),
            gold_answer: gold.map(Into::into),
            source: None,
        };
        let rec = |id: &str, text: &str| ResponseRecord {
            instance_id: id.into(),
            view_label: "hq".into(),
            policy_id: "p".into(),
            decode: Default::default(),
            text: text.into(),
            token_count: 1,
            extracted_answer: None,
            correct: None,
        };
        let instances = [inst("a", Some("42")), inst("b", Some("7")), inst("c", None)];
        let mut recs = vec![
            rec("a", "<answer>41.7</answer>"),
            rec("b", "<answer>9</answer>"),
            rec("c", "<answer>1</answer>"),
        ];
        let s = grade_records(
            &mut recs,
            &instances,
            &MetricSpec::ToleranceMatch { tol: 0.5 },
        );
        assert_eq!(
            s,
            GradeSummary {
                graded: 2,
                correct: 1,
                skipped: 1
            }
        );
        assert_eq!(recs[0].correct, Some(true));
        assert_eq!(recs[1].extracted_answer.as_deref(), Some("9"));
        assert_eq!(recs[2].correct, None);
        let s = grade_records(&mut recs, &instances, &MetricSpec::ExactMatch);
        assert_eq!(s.correct, 0);
    }

    proptest! {
        #[test]
        fn zero_tolerance_equals_exact_on_numbers(a in -1000i32..1000, b in -1000i32..1000, fa in 0u8..4, fb in 0u8..4) {
            let show = |v: i32, f: u8| match f {
                0 => format!("{v}"),
                1 => format!("{v}.0"),
                2 => format!("{}.5", v),
                _ => format!("{v}e0"),
            };
            let (p, g) = (show(a, fa), show(b, fb));
            prop_assert_eq!(tolerance_match(&p, &g, 0.0), exact_match(&p, &g));
        }

        #[test]
        fn numeric_branch_is_symmetric(a in -1e6f64..1e6, b in -1e6f64..1e6, tol in 0.0f64..10.0) {
            let (p, g) = (format!("{a}"), format!("{b}"));
            prop_assert_eq!(tolerance_match(&p, &g, tol), tolerance_match(&g, &p, tol));
            prop_assert_eq!(exact_match(&p, &g), exact_match(&g, &p));
        }
    }
}
