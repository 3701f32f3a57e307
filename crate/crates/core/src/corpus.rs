//! Labeled documents, the JSONL corpus format, and label explanations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, LabelPath, PathMode, Taxonomy};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub gold_paths: Vec<LabelPath>,
}

impl Document {
    /// Every label on any gold path, ancestors included.
    pub fn gold_labels(&self) -> BTreeSet<LabelId> {
        self.gold_paths.iter().flat_map(|p| p.labels().iter().copied()).collect()
    }

    /// Last label of each gold path.
    pub fn deepest_labels(&self) -> BTreeSet<LabelId> {
        self.gold_paths.iter().filter_map(LabelPath::last).collect()
    }

    /// Sorted gold indices into each level's vocabulary; empty where no
    /// gold path reaches the level.
    pub fn gold_per_level(&self, taxonomy: &Taxonomy) -> Vec<Vec<usize>> {
        let mut out = vec![BTreeSet::new(); taxonomy.depth()];
        for l in self.gold_labels() {
            out[taxonomy.level(l) - 1].insert(taxonomy.local_index(l));
        }
        out.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    paths: Vec<Vec<String>>,
}

/// Parses one JSON object per line: `{"id", "text", "paths": [[names from level 1]]}`.
pub fn parse_corpus(text: &str, taxonomy: &Taxonomy) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(format!("duplicate document id `{}`", rec.id)));
        }
        let gold_paths = rec
            .paths
            .iter()
            .map(|p| taxonomy.path_from_names(p))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(e.to_string()))?;
        docs.push(Document {
            id: rec.id,
            text: rec.text,
            gold_paths,
        });
    }
    Ok(docs)
}

pub fn corpus_to_jsonl(docs: &[Document], taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    for d in docs {
        let rec = Record {
            id: d.id.clone(),
            text: d.text.clone(),
            paths: d
                .gold_paths
                .iter()
                .map(|p| p.labels().iter().map(|&l| taxonomy.name(l).to_string()).collect())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Single-path corpora need exactly one path per document; multi-path at least one.
pub fn validate_documents(docs: &[Document], mode: PathMode) -> Result<()> {
    for d in docs {
        match (mode, d.gold_paths.len()) {
            (_, 0) => return Err(Error::Invalid(format!("document `{}` has no gold path", d.id))),
            (PathMode::SinglePath, n) if n > 1 => {
                return Err(Error::Invalid(format!(
                    "document `{}` has {n} gold paths in single-path mode",
                    d.id
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// `label_name<TAB>explanation text` rows.
pub fn parse_explanations(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, expl) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `label<TAB>explanation`".into(),
        })?;
        if out.insert(name.to_string(), expl.to_string()).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate explanation for `{name}`"),
            });
        }
    }
    Ok(out)
}

pub fn explanations_to_tsv(explanations: &BTreeMap<String, String>) -> String {
    explanations.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> Taxonomy {
        Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\nA2\tA\nB1\tB\n").unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let t = tree();
        let text = "{\"id\":\"d1\",\"text\":\"hello\",\"paths\":[[\"A\",\"A2\"]]}\n{\"id\":\"d2\",\"text\":\"x\",\"paths\":[[\"B\"],[\"A\",\"A1\"]]}\n";
        let docs = parse_corpus(text, &t).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(corpus_to_jsonl(&docs, &t), text);
        assert_eq!(docs[1].gold_per_level(&t), vec![vec![0, 1], vec![0]]);
        assert_eq!(docs[0].deepest_labels(), [t.id("A2").unwrap()].into());
        assert!(validate_documents(&docs, PathMode::SinglePath).is_err());
        assert!(validate_documents(&docs, PathMode::MultiPath).is_ok());
    }

    #[test]
    fn bad_lines_name_the_line() {
        let t = tree();
        let err = parse_corpus("\n{\"id\":\"d\",\"text\":\"\",\"paths\":[[\"B\",\"A1\"]]}", &t).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_corpus("{\"id\":\"d\",\"text\":\"\",\"paths\":[[\"Z\"]]}", &t).unwrap_err();
        assert!(err.to_string().contains('Z'));
        let dup = "{\"id\":\"d\",\"text\":\"\",\"paths\":[]}\n{\"id\":\"d\",\"text\":\"\",\"paths\":[]}";
        assert!(parse_corpus(dup, &t).is_err());
    }

    #[test]
    fn explanations_parse() {
        let e = parse_explanations("A\tfirst group\nB\tsecond\n").unwrap();
        assert_eq!(e["A"], "first group");
        assert_eq!(explanations_to_tsv(&e), "A\tfirst group\nB\tsecond\n");
        assert!(parse_explanations("A no tab").is_err());
    }
}
