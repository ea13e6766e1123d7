use std::collections::BTreeMap;
use std::fmt::Write;

use crate::corpus::extract_answer;

/// Extracted answers equal after trimming; an unparsable prediction is
/// wrong. Gold text without a marker is taken whole.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    answers_match(extract_answer(pred), gold)
}

pub fn answers_match(pred: Option<&str>, gold: &str) -> bool {
    let gold = extract_answer(gold).unwrap_or(gold).trim();
    pred.is_some_and(|p| p.trim() == gold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagScore {
    pub count: usize,
    pub correct: usize,
}

impl TagScore {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Exact-match accuracy per source tag, with deltas against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub tags: BTreeMap<String, TagScore>,
    pub reference: Option<BTreeMap<String, TagScore>>,
}

impl EvalReport {
    /// `outcomes` are `(source tag, correct)` pairs.
    pub fn from_outcomes<'a>(
        method: &str,
        outcomes: impl IntoIterator<Item = (&'a str, bool)>,
    ) -> EvalReport {
        let mut tags: BTreeMap<String, TagScore> = BTreeMap::new();
        for (tag, ok) in outcomes {
            let e = tags.entry(tag.to_string()).or_insert(TagScore {
                count: 0,
                correct: 0,
            });
            e.count += 1;
            e.correct += ok as usize;
        }
        EvalReport {
            method: method.to_string(),
            tags,
            reference: None,
        }
    }

    pub fn micro(&self) -> f64 {
        micro(&self.tags)
    }

    pub fn macro_avg(&self) -> f64 {
        macro_avg(&self.tags)
    }

    /// `tag,count,correct,accuracy,base_accuracy,delta` plus `micro` and
    /// `macro` rows. Accuracies are percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,count,correct,accuracy,base_accuracy,delta\n");
        let reference = self.reference.as_ref();
        let mut row = |name: &str, count: usize, correct: usize, acc: f64, base: Option<f64>| {
            let (b, d) = match base {
                Some(b) => (
                    format!("{:.4}", 100.0 * b),
                    format!("{:+.4}", 100.0 * (acc - b)),
                ),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{name},{count},{correct},{:.4},{b},{d}", 100.0 * acc);
        };
        for (tag, s) in &self.tags {
            let base = reference.map(|r| r.get(tag).map_or(0.0, TagScore::accuracy));
            row(tag, s.count, s.correct, s.accuracy(), base);
        }
        let count = self.tags.values().map(|s| s.count).sum();
        let correct = self.tags.values().map(|s| s.correct).sum();
        row("micro", count, correct, self.micro(), reference.map(micro));
        row(
            "macro",
            count,
            correct,
            self.macro_avg(),
            reference.map(macro_avg),
        );
        out
    }
}

fn micro(tags: &BTreeMap<String, TagScore>) -> f64 {
    let n: usize = tags.values().map(|s| s.count).sum();
    let c: usize = tags.values().map(|s| s.correct).sum();
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

fn macro_avg(tags: &BTreeMap<String, TagScore>) -> f64 {
    if tags.is_empty() {
        return 0.0;
    }
    tags.values().map(TagScore::accuracy).sum::<f64>() / tags.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_rules() {
        assert!(exact_match("add 40 2 = 42", "42"));
        assert!(exact_match("= 42 ", "42"));
        assert!(exact_match("=42", "=42"));
        assert!(!exact_match("42", "42"));
        assert!(!exact_match("=43", "42"));
        assert!(!answers_match(None, "42"));
    }

    #[test]
    fn micro_and_macro_averages() {
        let outcomes = [
            ("a", true),
            ("a", true),
            ("a", false),
            ("a", false),
            ("b", true),
        ];
        let mut r = EvalReport::from_outcomes("elrea", outcomes);
        assert!((r.micro() - 3.0 / 5.0).abs() < 1e-15);
        assert!((r.macro_avg() - 0.75).abs() < 1e-15);
        r.reference = Some(EvalReport::from_outcomes("base", [("a", false), ("b", true)]).tags);
        let csv = r.to_csv();
        assert!(csv.contains("a,4,2,50.0000,0.0000,+50.0000"));
        assert!(csv.contains("micro,5,3,60.0000,50.0000,+10.0000"));
        assert!(csv.contains("macro,5,3,75.0000,50.0000,+25.0000"));
    }
}
