//! Corpus records and their line-delimited file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::atomic_write;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            lang: None,
            source: None,
        }
    }
}

fn check_unique_ids(docs: &[Document]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::input(format!("duplicate document id {:?}", d.id)));
        }
    }
    Ok(())
}

/// One JSON record per line. Ids must be unique.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| {
            Error::input(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        docs.push(doc);
    }
    check_unique_ids(&docs)?;
    Ok(docs)
}

pub fn write_corpus_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    check_unique_ids(docs)?;
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads every regular file in a directory as one document, id = file name.
/// Files are taken in name order so the corpus is platform-independent.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Document>> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let text = std::fs::read_to_string(dir.join(&name))?;
            Ok(Document::new(name, text))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_preserves_documents() {
        let docs = vec![
            Document {
                id: "a".into(),
                text: "first".into(),
                lang: Some("en".into()),
                source: Some("wiki".into()),
            },
            Document::new("b", "второй\nдок"),
        ];
        let path = std::env::temp_dir().join(format!("corpus-{}.jsonl", std::process::id()));
        write_corpus_jsonl(&path, &docs).unwrap();
        let back = read_corpus_jsonl(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back, docs);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let docs = vec![Document::new("x", "one"), Document::new("x", "two")];
        let path = std::env::temp_dir().join(format!("corpus-dup-{}.jsonl", std::process::id()));
        assert!(write_corpus_jsonl(&path, &docs).is_err());
        std::fs::write(&path, "{\"id\":\"x\",\"text\":\"1\"}\n{\"id\":\"x\",\"text\":\"2\"}\n")
            .unwrap();
        let err = read_corpus_jsonl(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn directory_corpus_reads_in_name_order() {
        let dir = std::env::temp_dir().join(format!("corpus-dir-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("b.txt"), "second").unwrap();
        std::fs::write(dir.join("a.txt"), "first").unwrap();
        let docs = read_corpus_dir(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "a.txt");
        assert_eq!(docs[1].text, "second");
    }
}
