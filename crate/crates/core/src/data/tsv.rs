//! Word-per-line TSV: `word<TAB>label`, blank line between sentences, with an
//! optional `# sent_label=<0|1>` line opening a sentence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DataError, Dataset, LabeledSentence, LoadWarning};

const HEADER: &str = "# sent_label=";

pub fn load_tsv(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_tsv(&text, &path.display().to_string())
}

#[derive(Default)]
struct Pending {
    header: Option<(bool, usize)>,
    start: usize,
    words: Vec<String>,
    labels: Vec<bool>,
}

pub fn parse_tsv(text: &str, origin: &str) -> Result<Dataset, DataError> {
    let err = |line: usize, message: String| DataError::Parse {
        origin: origin.to_string(),
        line,
        message,
    };
    let mut out = Dataset::default();
    let mut columns: Option<usize> = None;
    let mut cur = Pending::default();

    let finish = |cur: &mut Pending, out: &mut Dataset| -> Result<(), DataError> {
        let p = std::mem::take(cur);
        if p.words.is_empty() {
            if let Some((_, line)) = p.header {
                return Err(err(line, "sentence header without words".into()));
            }
            return Ok(());
        }
        let any = p.labels.iter().any(|&l| l);
        let sentence_label = match p.header {
            Some((false, line)) if any => {
                return Err(err(
                    line,
                    "sent_label=0 but the sentence has positive word labels".into(),
                ))
            }
            Some((true, line)) if !any => {
                out.warnings.push(LoadWarning {
                    line,
                    message: "sent_label=1 with no positive word labels".into(),
                });
                true
            }
            Some((h, _)) => h,
            None => any,
        };
        out.sentences.push(LabeledSentence {
            words: p.words,
            sentence_label,
            token_labels: Some(p.labels),
        });
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            finish(&mut cur, &mut out)?;
            continue;
        }
        if let Some(value) = line.strip_prefix(HEADER) {
            if !cur.words.is_empty() {
                return Err(err(line_no, "sentence header inside a sentence".into()));
            }
            let label = parse_label(value.trim()).ok_or_else(|| {
                err(line_no, format!("non-binary sentence label {value:?}"))
            })?;
            cur.header = Some((label, line_no));
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = *columns.get_or_insert(fields.len());
        if fields.len() < 2 || fields.len() != expected {
            return Err(err(
                line_no,
                format!("expected {} tab-separated columns, found {}", expected.max(2), fields.len()),
            ));
        }
        let word = fields[0];
        if word.is_empty() {
            return Err(err(line_no, "empty word".into()));
        }
        let label_field = fields[fields.len() - 1].trim();
        let label = parse_label(label_field)
            .ok_or_else(|| err(line_no, format!("non-binary label {label_field:?}")))?;
        if cur.words.is_empty() {
            cur.start = line_no;
        }
        cur.words.push(word.to_string());
        cur.labels.push(label);
    }
    finish(&mut cur, &mut out)?;
    if out.sentences.is_empty() {
        return Err(DataError::Empty(origin.to_string()));
    }
    Ok(out)
}

fn parse_label(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

/// Serialises sentences; every sentence gets an explicit header line.
/// Sentences without word labels are written with all-zero labels.
pub fn write_tsv(ds: &Dataset) -> String {
    let mut out = String::new();
    for (k, s) in ds.sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{HEADER}{}", u8::from(s.sentence_label));
        for (i, w) in s.words.iter().enumerate() {
            let l = s.token_labels.as_ref().is_some_and(|t| t[i]);
            let _ = writeln!(out, "{w}\t{}", u8::from(l));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sentences() {
        let ds = parse_tsv("It\tPRP\t0\nmay\t1\n", "x");
        assert!(ds.is_err(), "column count must be consistent across lines");
        let ds = parse_tsv("It\t0\nmay\t1\n\nFine\t0\n.\t0\n", "x").unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.sentences[0].sentence_label);
        assert!(!ds.sentences[1].sentence_label);
        assert_eq!(ds.sentences[0].token_labels, Some(vec![false, true]));
    }

    #[test]
    fn header_overrides_with_warning() {
        let ds = parse_tsv("# sent_label=1\nthe\t0\ncat\t0\n", "x").unwrap();
        assert!(ds.sentences[0].sentence_label);
        assert_eq!(ds.warnings.len(), 1);
        assert_eq!(ds.warnings[0].line, 1);
        assert!(parse_tsv("# sent_label=0\nthe\t1\n", "x").is_err());
    }

    #[test]
    fn errors_carry_locations() {
        match parse_tsv("a\t0\nb\t2\n", "f.tsv") {
            Err(DataError::Parse { line, origin, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(origin, "f.tsv");
            }
            other => panic!("{other:?}"),
        }
        match parse_tsv("a\t0\nb\t0\textra\n", "f") {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_tsv("\n\n", "f"), Err(DataError::Empty(_))));
        assert!(matches!(parse_tsv("", "f"), Err(DataError::Empty(_))));
    }

    #[test]
    fn wider_files_use_first_and_last_columns() {
        let ds = parse_tsv("a\tNN\t0\nb\tVB\t1\n", "x").unwrap();
        assert_eq!(ds.sentences[0].words, vec!["a", "b"]);
        assert_eq!(ds.sentences[0].token_labels, Some(vec![false, true]));
    }

    #[test]
    fn write_then_parse() {
        let text = "# sent_label=1\nthe\t0\ncat\t0\n\n# sent_label=1\nmay\t1\n";
        let ds = parse_tsv(text, "x").unwrap();
        assert_eq!(write_tsv(&ds), text);
    }
}
