use std::fs;
use std::io::Write;
use std::path::Path;

use super::{validate_ibo, Utterance};
use crate::error::{Error, Result};

/// A rejected input line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Rewrite a dangling `I-x` as `B-x` and keep the line (still reported)
    /// instead of rejecting it.
    pub repair_ibo: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub utterances: Vec<Utterance>,
    pub errors: Vec<LineError>,
    /// Lines whose IBO sequence was repaired (only with `repair_ibo`).
    pub repaired: Vec<LineError>,
}

impl LoadReport {
    pub fn skipped(&self) -> usize {
        self.errors.len()
    }
}

/// Parses one utterance per line: `tokens<TAB>slots<TAB>intent`, tokens and
/// slots separated by single spaces. Blank lines are ignored.
pub fn read_atis_format(text: &str, options: &LoadOptions) -> LoadReport {
    let mut report = LoadReport::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            report.errors.push(LineError {
                line: line_no,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
            continue;
        }
        let tokens: Vec<String> = fields[0].split(' ').map(String::from).collect();
        let mut slots: Vec<String> = fields[1].split(' ').map(String::from).collect();
        let intent = fields[2].trim();
        if tokens.iter().any(|t| t.is_empty()) || fields[0].is_empty() {
            report.errors.push(LineError { line: line_no, reason: "empty token".into() });
            continue;
        }
        if tokens.len() != slots.len() {
            report.errors.push(LineError {
                line: line_no,
                reason: format!("{} tokens but {} slot labels", tokens.len(), slots.len()),
            });
            continue;
        }
        if intent.is_empty() {
            report.errors.push(LineError { line: line_no, reason: "empty intent".into() });
            continue;
        }
        if let Err(reason) = validate_ibo(&slots) {
            if options.repair_ibo && repair_ibo(&mut slots) {
                report.repaired.push(LineError { line: line_no, reason });
            } else {
                report.errors.push(LineError { line: line_no, reason });
                continue;
            }
        }
        report.utterances.push(Utterance { tokens, slots, intent: intent.to_string() });
    }
    report
}

/// Turns dangling `I-x` labels into `B-x`. Returns false if a label is not
/// an IBO label at all.
fn repair_ibo(slots: &mut [String]) -> bool {
    let mut open: Option<String> = None;
    for label in slots.iter_mut() {
        if label == "O" {
            open = None;
        } else if let Some(t) = label.strip_prefix("B-") {
            open = Some(t.to_string());
        } else if let Some(t) = label.strip_prefix("I-").map(str::to_string) {
            if open.as_deref() != Some(t.as_str()) {
                *label = format!("B-{t}");
            }
            open = Some(t);
        } else {
            return false;
        }
    }
    true
}

pub fn load_atis_format(path: impl AsRef<Path>, options: &LoadOptions) -> Result<LoadReport> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::data(format!("{} is not valid UTF-8: {e}", path.display())))?;
    Ok(read_atis_format(&text, options))
}

pub fn write_atis_format(path: impl AsRef<Path>, data: &[Utterance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for u in data {
        writeln!(f, "{}\t{}\t{}", u.tokens.join(" "), u.slots.join(" "), u.intent)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_line() {
        let r = read_atis_format("show flights\tO O\tflight\n", &LoadOptions::default());
        assert!(r.errors.is_empty());
        assert_eq!(r.utterances, vec![Utterance::new(
            vec!["show".into(), "flights".into()],
            vec!["O".into(), "O".into()],
            "flight"
        )]);
    }

    #[test]
    fn length_mismatch_is_recorded_and_skipped() {
        let text = "a b\tO\tx\nc\tO\ty\n";
        let r = read_atis_format(text, &LoadOptions::default());
        assert_eq!(r.utterances.len(), 1);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].line, 1);
    }

    #[test]
    fn dangling_inside_label() {
        let text = "a b\tO I-x\tq\n";
        let strict = read_atis_format(text, &LoadOptions::default());
        assert_eq!(strict.utterances.len(), 0);
        assert_eq!(strict.skipped(), 1);
        let repaired = read_atis_format(text, &LoadOptions { repair_ibo: true });
        assert_eq!(repaired.utterances[0].slots, vec!["O", "B-x"]);
        assert_eq!(repaired.repaired.len(), 1);
    }

    #[test]
    fn wrong_field_count() {
        let r = read_atis_format("a\tO\n", &LoadOptions::default());
        assert_eq!(r.errors.len(), 1);
    }
}
