use std::fs;
use std::path::{Path, PathBuf};

use super::{validate_languages, Language, LabeledSequence};
use crate::error::{bail, Error, Result};

/// Reads one newline-delimited UTF-8 file per language. Blank lines are skipped.
pub fn ingest_corpus(files: &[(Language, PathBuf)]) -> Result<Vec<LabeledSequence>> {
    let mut out = Vec::new();
    for (lang, path) in files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Decode {
            path: path.clone(),
            offset: e.valid_up_to(),
        })?;
        let before = out.len();
        out.extend(
            text.lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.trim().is_empty())
                .map(|l| LabeledSequence {
                    text: l.to_string(),
                    language: lang.id,
                    tokens: Vec::new(),
                }),
        );
        if out.len() == before {
            bail!(Validation, "corpus file for language `{}` is empty: {}", lang.name, path.display());
        }
    }
    Ok(out)
}

/// Reads `<dir>/<language-name>.txt` for every language.
pub fn ingest_corpus_dir(dir: &Path, languages: &[Language]) -> Result<Vec<LabeledSequence>> {
    validate_languages(languages)?;
    let files: Vec<(Language, PathBuf)> = languages
        .iter()
        .map(|l| (l.clone(), dir.join(format!("{}.txt", l.name))))
        .collect();
    ingest_corpus(&files)
}

pub fn write_corpus_dir(dir: &Path, languages: &[Language], corpus: &[LabeledSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for lang in languages {
        let mut body = String::new();
        for s in corpus.iter().filter(|s| s.language == lang.id) {
            body.push_str(&s.text);
            body.push('\n');
        }
        let path = dir.join(format!("{}.txt", lang.name));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
