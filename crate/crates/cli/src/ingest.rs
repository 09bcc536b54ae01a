//! Converters from upstream corpus layouts into canonical records.
//!
//! PubTator files interleave `PMID|t|title` and `PMID|a|abstract` lines with
//! tab-separated annotations `PMID start end mention type concept_ids`.
//! BioSyn-style `.concept` files hold `PMID||start|end||type||mention||concept_ids`
//! and BioSyn dictionaries hold `concept_ids||name`.
//!
//! Concept fields may join several IDs with `|` or `+`; the unlinked marker
//! `-1` is dropped, and a mention left with no ID is skipped.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ewun::corpus::{ConceptDictionary, ConceptIds, EntityRecord, Split, SurfaceNormalization};
use ewun::Error;

/// Mentions read from an upstream source plus bookkeeping for statistics.
#[derive(Debug, Default)]
pub struct Ingested {
    pub records: Vec<EntityRecord>,
    pub documents: usize,
    pub skipped_unlinked: usize,
}

fn concept_ids(field: &str) -> ConceptIds {
    field
        .split(['|', '+'])
        .map(str::trim)
        .filter(|id| !id.is_empty() && *id != "-1")
        .map(str::to_owned)
        .collect()
}

fn parse_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_owned(),
        line,
        message: message.into(),
    }
}

fn push_mention(
    out: &mut Ingested,
    surface: &str,
    ids: &str,
    split: Split,
    normalization: SurfaceNormalization,
) -> ewun::Result<()> {
    let ids = concept_ids(ids);
    let surface = normalization.apply(surface);
    if ids.is_empty() || surface.is_empty() {
        out.skipped_unlinked += 1;
        return Ok(());
    }
    out.records.push(EntityRecord::new(surface, ids, split)?);
    Ok(())
}

pub fn parse_pubtator(
    text: &str,
    source: &str,
    split: Split,
    normalization: SurfaceNormalization,
    entity_type: Option<&str>,
) -> ewun::Result<Ingested> {
    let mut out = Ingested::default();
    let mut documents = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let mut head = line.splitn(3, '|');
        if let (Some(pmid), Some("t" | "a"), Some(_)) = (head.next(), head.next(), head.next()) {
            if !pmid.contains('\t') {
                documents.insert(pmid.to_owned());
                continue;
            }
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() == 4 && fields[1] == "CID" {
            continue;
        }
        if fields.len() < 6 {
            return Err(parse_error(
                source,
                i + 1,
                format!(
                    "expected a title, abstract or 6-column annotation line, found {} columns",
                    fields.len()
                ),
            ));
        }
        documents.insert(fields[0].to_owned());
        if entity_type.is_some_and(|t| !fields[4].eq_ignore_ascii_case(t)) {
            continue;
        }
        push_mention(&mut out, fields[3], fields[5], split, normalization)?;
    }
    out.documents = documents.len();
    Ok(out)
}

pub fn parse_biosyn_concepts(
    text: &str,
    source: &str,
    split: Split,
    normalization: SurfaceNormalization,
    entity_type: Option<&str>,
) -> ewun::Result<Ingested> {
    let mut out = Ingested::default();
    let mut documents = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("||").collect();
        if fields.len() != 5 {
            return Err(parse_error(
                source,
                i + 1,
                format!("expected 5 '||'-separated fields, found {}", fields.len()),
            ));
        }
        documents.insert(fields[0].to_owned());
        if entity_type.is_some_and(|t| !fields[2].eq_ignore_ascii_case(t)) {
            continue;
        }
        push_mention(&mut out, fields[3], fields[4], split, normalization)?;
    }
    out.documents = documents.len();
    Ok(out)
}

pub fn parse_biosyn_dictionary(
    text: &str,
    source: &str,
    normalization: SurfaceNormalization,
) -> ewun::Result<ConceptDictionary> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let (ids, name) = line
            .split_once("||")
            .ok_or_else(|| parse_error(source, i + 1, "expected concept_ids||name"))?;
        let ids = concept_ids(ids);
        let surface = normalization.apply(name);
        if ids.is_empty() || surface.is_empty() {
            return Err(Error::Validation(format!(
                "{source}:{}: empty concept ID or name",
                i + 1
            )));
        }
        pairs.push((surface, ids));
    }
    ConceptDictionary::from_pairs(pairs)
}

/// The file itself, or every `*.<extension>` file directly inside a directory, sorted by name.
pub fn input_files(path: &Path, extension: &str) -> std::io::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == extension))
        .collect();
    files.sort();
    Ok(files)
}
