//! Plain-text annotations: one line per sample, `<id>\t<c1>,<c2>,...`.
//!
//! Class ids refer to the full vocabulary; an empty list is allowed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub id: u64,
    pub labels: Vec<usize>,
}

pub fn format_annotations(records: &[Annotation]) -> String {
    let mut out = String::new();
    for r in records {
        let labels: Vec<String> = r.labels.iter().map(ToString::to_string).collect();
        writeln!(out, "{}\t{}", r.id, labels.join(",")).expect("write to String");
    }
    out
}

pub fn parse_annotations(text: &str, total_classes: usize, path: &Path) -> Result<Vec<Annotation>> {
    let err = |line: usize, detail: String| Error::Format {
        kind: "annotation",
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err(line_no, "missing tab separator".into()))?;
        let id = id
            .trim()
            .parse::<u64>()
            .map_err(|e| err(line_no, format!("bad sample id {id:?}: {e}")))?;
        let mut labels = Vec::new();
        for tok in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let c = tok
                .parse::<usize>()
                .map_err(|e| err(line_no, format!("bad class id {tok:?}: {e}")))?;
            if c >= total_classes {
                return Err(err(line_no, format!("class {c} outside [0, {total_classes})")));
            }
            labels.push(c);
        }
        records.push(Annotation { id, labels });
    }
    Ok(records)
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_annotations(records)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>, total_classes: usize) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, total_classes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_and_parse() {
        let recs = vec![
            Annotation { id: 4, labels: vec![1, 7] },
            Annotation { id: 9, labels: vec![] },
        ];
        let text = format_annotations(&recs);
        assert_eq!(text, "4\t1,7\n9\t\n");
        assert_eq!(parse_annotations(&text, 8, Path::new("x")).unwrap(), recs);
    }

    #[test]
    fn out_of_range_class_rejected() {
        let e = parse_annotations("1\t3,8\n", 8, Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("line 1"));
    }
}
