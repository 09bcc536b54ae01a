//! Corpus loading, filtering and synthesis.
//!
//! Two on-disk layouts are supported, both UTF-8 TSV with one record per line:
//!
//! * concept corpora: `surface \t concept_id[|concept_id...]`
//! * pair corpora: `entity_a \t entity_b \t label(0|1) [\t group_id]`
//!
//! Dictionaries use `concept_id[|concept_id...] \t surface`. Lines starting
//! with `#` and blank lines are skipped in every format.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONCEPT_SEPARATOR: char = '|';

pub type ConceptIds = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split tag {other:?}"))),
        }
    }
}

/// How mention surfaces are canonicalized before they reach the encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceNormalization {
    /// Lowercase and collapse whitespace; punctuation is kept.
    #[default]
    Minimal,
    /// Additionally replace every non-alphanumeric character with a space.
    StripPunctuation,
}

impl SurfaceNormalization {
    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceNormalization::Minimal => "minimal",
            SurfaceNormalization::StripPunctuation => "strip-punctuation",
        }
    }

    pub fn apply(self, raw: &str) -> String {
        match self {
            SurfaceNormalization::Minimal => normalize_surface(raw),
            SurfaceNormalization::StripPunctuation => {
                let spaced: String = raw
                    .chars()
                    .map(|c| if c.is_alphanumeric() { c } else { ' ' })
                    .collect();
                normalize_surface(&spaced)
            }
        }
    }
}

impl FromStr for SurfaceNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimal" => Ok(SurfaceNormalization::Minimal),
            "strip-punctuation" => Ok(SurfaceNormalization::StripPunctuation),
            other => Err(Error::Argument(format!(
                "unknown surface normalization {other:?}"
            ))),
        }
    }
}

/// Lowercases, collapses internal whitespace runs to one space and trims.
pub fn normalize_surface(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A mention and the concepts it is annotated with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub surface: String,
    pub concept_ids: ConceptIds,
    pub split: Split,
}

impl EntityRecord {
    pub fn new<I, S>(surface: impl Into<String>, concept_ids: I, split: Split) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let surface = surface.into();
        let concept_ids: ConceptIds = concept_ids.into_iter().map(Into::into).collect();
        if surface.is_empty() {
            return Err(Error::Validation("entity surface is empty".into()));
        }
        if concept_ids.is_empty() || concept_ids.iter().any(String::is_empty) {
            return Err(Error::Validation(format!(
                "entity {surface:?} has an empty concept ID"
            )));
        }
        Ok(Self {
            surface,
            concept_ids,
            split,
        })
    }

    pub fn shares_concept(&self, other: &ConceptIds) -> bool {
        shares_concept(&self.concept_ids, other)
    }
}

pub fn shares_concept(a: &ConceptIds, b: &ConceptIds) -> bool {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().any(|id| large.contains(id))
}

pub fn join_concept_ids(ids: &ConceptIds) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(CONCEPT_SEPARATOR);
        }
        out.push_str(id);
    }
    out
}

fn split_concept_ids(field: &str) -> ConceptIds {
    field
        .split(CONCEPT_SEPARATOR)
        .map(str::trim)
        .filter(|id| !id.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub index: usize,
    pub surface: String,
    pub concept_ids: ConceptIds,
}

/// Reference entity table; entry `i` always has `index == i`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDictionary {
    entries: Vec<DictionaryEntry>,
}

impl ConceptDictionary {
    /// Builds a dictionary from `(surface, concept_ids)` pairs, assigning dense indices in order.
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, ConceptIds)>,
    {
        let mut entries = Vec::new();
        for (index, (surface, concept_ids)) in pairs.into_iter().enumerate() {
            if surface.is_empty() {
                return Err(Error::Validation(format!(
                    "dictionary entry {index} has an empty surface"
                )));
            }
            if concept_ids.is_empty() {
                return Err(Error::Validation(format!(
                    "dictionary entry {index} ({surface:?}) has no concept ID"
                )));
            }
            entries.push(DictionaryEntry {
                index,
                surface,
                concept_ids,
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DictionaryEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&DictionaryEntry> {
        self.entries.get(index)
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.surface.clone()).collect()
    }

    /// Every concept ID referenced by at least one entry.
    pub fn concept_universe(&self) -> HashSet<&str> {
        self.entries
            .iter()
            .flat_map(|e| e.concept_ids.iter().map(String::as_str))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&join_concept_ids(&entry.concept_ids));
            out.push('\t');
            out.push_str(&entry.surface);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical TSV form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

/// Label-carrying entity pair from a pairwise matching corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub entity_a: String,
    pub entity_b: String,
    pub label: bool,
    pub group_id: Option<String>,
}

impl PairRecord {
    pub fn new(
        entity_a: impl Into<String>,
        entity_b: impl Into<String>,
        label: bool,
        group_id: Option<String>,
    ) -> Result<Self> {
        let (entity_a, entity_b) = (entity_a.into(), entity_b.into());
        if entity_a.is_empty() || entity_b.is_empty() {
            return Err(Error::Validation("pair has an empty entity".into()));
        }
        Ok(Self {
            entity_a,
            entity_b,
            label,
            group_id,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub documents: usize,
    pub mentions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: SplitCounts,
    pub dev: SplitCounts,
    pub test: SplitCounts,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

impl CorpusStats {
    pub fn from_records(records: &[EntityRecord]) -> Self {
        let mut stats = Self::default();
        for record in records {
            stats.split_mut(record.split).mentions += 1;
        }
        stats
    }

    pub fn from_pairs(pairs: &[PairRecord]) -> Self {
        let positive_pairs = pairs.iter().filter(|p| p.label).count();
        Self {
            positive_pairs,
            negative_pairs: pairs.len() - positive_pairs,
            ..Self::default()
        }
    }

    pub fn split(&self, split: Split) -> SplitCounts {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut SplitCounts {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn total_mentions(&self) -> usize {
        self.train.mentions + self.dev.mentions + self.test.mentions
    }

    pub fn total_documents(&self) -> usize {
        self.train.documents + self.dev.documents + self.test.documents
    }

    pub fn total_pairs(&self) -> usize {
        self.positive_pairs + self.negative_pairs
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        for split in Split::ALL {
            let theirs = other.split(split);
            let ours = self.split_mut(split);
            ours.documents += theirs.documents;
            ours.mentions += theirs.mentions;
        }
        self.positive_pairs += other.positive_pairs;
        self.negative_pairs += other.negative_pairs;
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.strip_suffix('\r').unwrap_or(line)))
        .filter(|(_, line)| !line.trim().is_empty() && !line.starts_with('#'))
}

pub fn parse_concept_corpus(
    text: &str,
    source: &str,
    split: Split,
    normalization: SurfaceNormalization,
) -> Result<Vec<EntityRecord>> {
    let mut records = Vec::new();
    for (line_no, line) in data_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: line_no,
                message: format!("expected 2 tab-separated columns, found {}", fields.len()),
            });
        }
        let surface = normalization.apply(fields[0]);
        let ids = split_concept_ids(fields[1]);
        if ids.is_empty() {
            return Err(Error::Validation(format!(
                "{source}:{line_no}: empty concept ID field"
            )));
        }
        if surface.is_empty() {
            return Err(Error::Validation(format!(
                "{source}:{line_no}: empty surface"
            )));
        }
        records.push(EntityRecord {
            surface,
            concept_ids: ids,
            split,
        });
    }
    Ok(records)
}

pub fn load_concept_corpus(
    path: &Path,
    split: Split,
    normalization: SurfaceNormalization,
) -> Result<Vec<EntityRecord>> {
    let text = read_text(path)?;
    parse_concept_corpus(&text, &path.display().to_string(), split, normalization)
}

pub fn concept_corpus_to_tsv(records: &[EntityRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&record.surface);
        out.push('\t');
        out.push_str(&join_concept_ids(&record.concept_ids));
        out.push('\n');
    }
    out
}

pub fn write_concept_corpus(path: &Path, records: &[EntityRecord]) -> Result<()> {
    write_text(path, &concept_corpus_to_tsv(records))
}

pub fn parse_dictionary(
    text: &str,
    source: &str,
    normalization: SurfaceNormalization,
) -> Result<ConceptDictionary> {
    let mut pairs = Vec::new();
    for (line_no, line) in data_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: line_no,
                message: format!("expected 2 tab-separated columns, found {}", fields.len()),
            });
        }
        let ids = split_concept_ids(fields[0]);
        if ids.is_empty() {
            return Err(Error::Validation(format!(
                "{source}:{line_no}: empty concept ID field"
            )));
        }
        let surface = normalization.apply(fields[1]);
        if surface.is_empty() {
            return Err(Error::Validation(format!(
                "{source}:{line_no}: empty surface"
            )));
        }
        pairs.push((surface, ids));
    }
    ConceptDictionary::from_pairs(pairs)
}

pub fn load_dictionary(
    path: &Path,
    normalization: SurfaceNormalization,
) -> Result<ConceptDictionary> {
    let text = read_text(path)?;
    parse_dictionary(&text, &path.display().to_string(), normalization)
}

pub fn write_dictionary(path: &Path, dict: &ConceptDictionary) -> Result<()> {
    write_text(path, &dict.to_tsv())
}

pub fn parse_pair_corpus(text: &str, source: &str) -> Result<Vec<PairRecord>> {
    let mut pairs = Vec::new();
    for (line_no, line) in data_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: line_no,
                message: format!(
                    "expected 3 or 4 tab-separated columns, found {}",
                    fields.len()
                ),
            });
        }
        let label = match fields[2].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Validation(format!(
                    "{source}:{line_no}: label must be 0 or 1, found {other:?}"
                )))
            }
        };
        let group_id = fields
            .get(3)
            .map(|g| g.trim().to_owned())
            .filter(|g| !g.is_empty());
        let pair = PairRecord::new(fields[0], fields[1], label, group_id)
            .map_err(|e| Error::Validation(format!("{source}:{line_no}: {e}")))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_pair_corpus(path: &Path) -> Result<Vec<PairRecord>> {
    let text = read_text(path)?;
    parse_pair_corpus(&text, &path.display().to_string())
}

pub fn pair_corpus_to_tsv(pairs: &[PairRecord]) -> String {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&pair.entity_a);
        out.push('\t');
        out.push_str(&pair.entity_b);
        out.push('\t');
        out.push(if pair.label { '1' } else { '0' });
        if let Some(group) = &pair.group_id {
            out.push('\t');
            out.push_str(group);
        }
        out.push('\n');
    }
    out
}

pub fn write_pair_corpus(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    write_text(path, &pair_corpus_to_tsv(pairs))
}

/// Drops mentions none of whose concept IDs occur in the dictionary.
pub fn filter_unlinkable(records: &[EntityRecord], dict: &ConceptDictionary) -> Vec<EntityRecord> {
    let universe = dict.concept_universe();
    records
        .iter()
        .filter(|r| {
            r.concept_ids
                .iter()
                .any(|id| universe.contains(id.as_str()))
        })
        .cloned()
        .collect()
}

/// Dictionary plus group-disjoint train/test queries built from generated names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub dictionary: ConceptDictionary,
    pub train: Vec<EntityRecord>,
    pub test: Vec<EntityRecord>,
}

const SYLLABLE_ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cl",
    "dr", "gr", "kr", "pl", "st", "tr",
];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const SYLLABLE_CODAS: &[&str] = &["", "", "n", "r", "s", "x", "l", "m"];
const ORG_SUFFIXES: &[(&str, &str)] = &[
    ("corporation", "corp."),
    ("company", "co."),
    ("incorporated", "inc."),
    ("holdings", "hldgs."),
    ("international", "intl."),
    ("laboratories", "labs"),
];
const MARKS: &[&str] = &["®", "™", "group", "(the company)", "plc"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(SYLLABLE_ONSETS[rng.random_range(0..SYLLABLE_ONSETS.len())]);
        word.push_str(SYLLABLE_VOWELS[rng.random_range(0..SYLLABLE_VOWELS.len())]);
        word.push_str(SYLLABLE_CODAS[rng.random_range(0..SYLLABLE_CODAS.len())]);
    }
    word
}

fn canonical_name(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut tokens: Vec<String> = (0..rng.random_range(2..=3))
        .map(|_| pseudo_word(rng))
        .collect();
    if rng.random_bool(0.6) {
        tokens.push(
            ORG_SUFFIXES[rng.random_range(0..ORG_SUFFIXES.len())]
                .0
                .to_owned(),
        );
    }
    tokens
}

#[derive(Debug, Clone, Copy)]
enum Transform {
    Abbreviate,
    PunctuationSwap,
    SuffixAppend,
    TokenDrop,
}

const TRANSFORMS: [Transform; 4] = [
    Transform::Abbreviate,
    Transform::PunctuationSwap,
    Transform::SuffixAppend,
    Transform::TokenDrop,
];

fn apply_transform(tokens: &[String], transform: Transform, rng: &mut ChaCha8Rng) -> String {
    let mut out: Vec<String> = tokens.to_vec();
    match transform {
        Transform::Abbreviate => {
            if let Some(pos) = out
                .iter()
                .position(|t| ORG_SUFFIXES.iter().any(|(long, _)| long == t))
            {
                let short = ORG_SUFFIXES
                    .iter()
                    .find(|(long, _)| *long == out[pos])
                    .unwrap()
                    .1;
                out[pos] = short.to_owned();
            } else {
                let pos = rng.random_range(1..out.len());
                let word: String = out[pos].chars().take(4).collect();
                out[pos] = format!("{word}.");
            }
        }
        Transform::PunctuationSwap => {
            let pos = rng.random_range(0..out.len() - 1);
            match rng.random_range(0..3) {
                0 => out[pos].push(','),
                1 => {
                    let joined = format!("{}-{}", out[pos], out[pos + 1]);
                    out.splice(pos..=pos + 1, [joined]);
                }
                _ => {
                    let joined = format!("{} &", out[pos]);
                    out[pos] = joined;
                }
            }
        }
        Transform::SuffixAppend => {
            out.push(MARKS[rng.random_range(0..MARKS.len())].to_owned());
        }
        Transform::TokenDrop => {
            if out.len() > 2 {
                let pos = rng.random_range(1..out.len());
                out.remove(pos);
            } else {
                out[1] = out[1].chars().take(3).collect();
            }
        }
    }
    out.join(" ")
}

/// Generates a deterministic, desk-scale normalization corpus.
///
/// Each concept gets one canonical dictionary surface and
/// `variants_per_concept - 1` query variants produced by abbreviation,
/// punctuation swaps, suffix appends and token drops. Concepts (identity
/// groups) are split so that no group contributes queries to both train and
/// test; roughly a fifth of the groups are held out once there are at least
/// two of them.
pub fn generate_synthetic_corpus(
    n_concepts: usize,
    variants_per_concept: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_concepts < 1 {
        return Err(Error::Argument("n_concepts must be at least 1".into()));
    }
    if variants_per_concept < 2 {
        return Err(Error::Argument(
            "variants_per_concept must be at least 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<String> = HashSet::new();

    let mut canonicals = Vec::with_capacity(n_concepts);
    while canonicals.len() < n_concepts {
        let tokens = canonical_name(&mut rng);
        let surface = tokens.join(" ");
        if seen.insert(surface) {
            canonicals.push(tokens);
        }
    }

    let mut variants: Vec<Vec<String>> = Vec::with_capacity(n_concepts);
    for tokens in &canonicals {
        let mut group = Vec::new();
        let mut order = TRANSFORMS;
        order.shuffle(&mut rng);
        let mut attempt = 0usize;
        while group.len() < variants_per_concept - 1 {
            let transform = order[attempt % order.len()];
            let mut surface = apply_transform(tokens, transform, &mut rng);
            if attempt >= order.len() {
                // Compose a second transform once the single ones are used up.
                let second = order[(attempt / order.len()) % order.len()];
                let reparsed: Vec<String> = surface.split(' ').map(str::to_owned).collect();
                if reparsed.len() >= 2 {
                    surface = apply_transform(&reparsed, second, &mut rng);
                }
            }
            attempt += 1;
            let surface = normalize_surface(&surface);
            if !surface.is_empty() && seen.insert(surface.clone()) {
                group.push(surface);
            }
            if attempt > 64 * variants_per_concept {
                return Err(Error::Argument(format!(
                    "could not generate {variants_per_concept} distinct variants"
                )));
            }
        }
        variants.push(group);
    }

    let concept_id = |i: usize| format!("SYN:{i:05}");
    let dictionary = ConceptDictionary::from_pairs(
        canonicals
            .iter()
            .enumerate()
            .map(|(i, tokens)| (tokens.join(" "), ConceptIds::from([concept_id(i)]))),
    )?;

    let n_test = if n_concepts >= 2 {
        ((n_concepts as f64) * 0.2).round().max(1.0) as usize
    } else {
        0
    };
    let mut order: Vec<usize> = (0..n_concepts).collect();
    order.shuffle(&mut rng);
    let test_groups: HashSet<usize> = order[..n_test].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, group) in variants.iter().enumerate() {
        let split = if test_groups.contains(&i) {
            Split::Test
        } else {
            Split::Train
        };
        for surface in group {
            let record = EntityRecord::new(surface.clone(), [concept_id(i)], split)?;
            match split {
                Split::Test => test.push(record),
                _ => train.push(record),
            }
        }
    }

    Ok(SyntheticCorpus {
        dictionary,
        train,
        test,
    })
}

/// Builds a labeled pair corpus from a synthetic corpus: every within-group
/// pair (dictionary surface and variants) is positive, and an equal number of
/// cross-group negatives is sampled. Pairs from train groups and test groups
/// are returned separately, so no group appears in both.
pub fn synthetic_pairs(corpus: &SyntheticCorpus, seed: u64) -> (Vec<PairRecord>, Vec<PairRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let build = |queries: &[EntityRecord], rng: &mut ChaCha8Rng| -> Vec<PairRecord> {
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for record in queries {
            let id = record
                .concept_ids
                .iter()
                .next()
                .cloned()
                .unwrap_or_default();
            match groups.iter_mut().find(|(g, _)| *g == id) {
                Some((_, members)) => members.push(record.surface.clone()),
                None => {
                    let canonical = corpus
                        .dictionary
                        .entries()
                        .iter()
                        .find(|e| e.concept_ids.contains(&id))
                        .map(|e| e.surface.clone());
                    let mut members: Vec<String> = canonical.into_iter().collect();
                    members.push(record.surface.clone());
                    groups.push((id, members));
                }
            }
        }
        let mut pairs = Vec::new();
        for (id, members) in &groups {
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    pairs.push(PairRecord {
                        entity_a: members[i].clone(),
                        entity_b: members[j].clone(),
                        label: true,
                        group_id: Some(id.clone()),
                    });
                }
            }
        }
        let n_positive = pairs.len();
        if groups.len() >= 2 {
            for _ in 0..n_positive {
                let ga = rng.random_range(0..groups.len());
                let mut gb = rng.random_range(0..groups.len() - 1);
                if gb >= ga {
                    gb += 1;
                }
                let a = &groups[ga].1[rng.random_range(0..groups[ga].1.len())];
                let b = &groups[gb].1[rng.random_range(0..groups[gb].1.len())];
                pairs.push(PairRecord {
                    entity_a: a.clone(),
                    entity_b: b.clone(),
                    label: false,
                    group_id: None,
                });
            }
        }
        pairs.shuffle(rng);
        pairs
    };
    let train = build(&corpus.train, &mut rng);
    let test = build(&corpus.test, &mut rng);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(list: &[&str]) -> ConceptIds {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_surface_rules() {
        assert_eq!(normalize_surface("Coca-Cola  ®"), "coca-cola ®");
        assert_eq!(normalize_surface("AWS"), "aws");
        assert_eq!(normalize_surface(""), "");
        assert_eq!(normalize_surface("  Apple,\t Inc. "), "apple, inc.");
    }

    #[test]
    fn strip_punctuation_mode() {
        let mode = SurfaceNormalization::StripPunctuation;
        assert_eq!(mode.apply("G(M2) Gangliosidosis"), "g m2 gangliosidosis");
        assert_eq!(mode.apply("Apple, Inc."), "apple inc");
    }

    #[test]
    fn concept_line_maps_fields() {
        let recs = parse_concept_corpus(
            "hepatomegaly\tD006529\n",
            "mem",
            Split::Test,
            SurfaceNormalization::Minimal,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].surface, "hepatomegaly");
        assert_eq!(recs[0].concept_ids, ids(&["D006529"]));
        assert_eq!(recs[0].split, Split::Test);
    }

    #[test]
    fn composite_ids_split_into_set() {
        let recs =
            parse_concept_corpus("x\tD1|D2\n", "mem", Split::Train, Default::default()).unwrap();
        assert_eq!(recs[0].concept_ids, ids(&["D1", "D2"]));
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let text = "# header\n\nfoo\tA\n# tail\n";
        let recs = parse_concept_corpus(text, "mem", Split::Train, Default::default()).unwrap();
        assert_eq!(recs.len(), 1);
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = parse_concept_corpus("a\tA\nbroken\n", "c.tsv", Split::Train, Default::default())
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_concept_field_is_validation_error() {
        let err =
            parse_concept_corpus("a\t\n", "c.tsv", Split::Train, Default::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err =
            parse_concept_corpus("a\t|\n", "c.tsv", Split::Train, Default::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn pair_labels() {
        let pairs = parse_pair_corpus(
            "Amazon Web Services\tAWS\t1\nHP Co.\tIBM Corporation\t0\tg7\n",
            "p.tsv",
        )
        .unwrap();
        assert_eq!(pairs[0].entity_a, "Amazon Web Services");
        assert_eq!(pairs[0].entity_b, "AWS");
        assert!(pairs[0].label);
        assert!(!pairs[1].label);
        assert_eq!(pairs[1].group_id.as_deref(), Some("g7"));
        assert!(parse_pair_corpus("", "p.tsv").unwrap().is_empty());
    }

    #[test]
    fn non_binary_label_rejected_with_line() {
        let err = parse_pair_corpus("a\tb\t1\na\tb\tyes\n", "p.tsv").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("p.tsv:2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn filter_keeps_linkable_in_order() {
        let dict = ConceptDictionary::from_pairs([("a".to_string(), ids(&["A"]))]).unwrap();
        let records = vec![
            EntityRecord::new("x", ["A"], Split::Train).unwrap(),
            EntityRecord::new("y", ["B"], Split::Train).unwrap(),
            EntityRecord::new("z", ["B", "A"], Split::Train).unwrap(),
        ];
        let kept = filter_unlinkable(&records, &dict);
        assert_eq!(kept, vec![records[0].clone(), records[2].clone()]);

        let none = filter_unlinkable(&records[1..2], &dict);
        assert!(none.is_empty());
    }

    #[test]
    fn stats_totals() {
        let records = vec![
            EntityRecord::new("a", ["A"], Split::Train).unwrap(),
            EntityRecord::new("b", ["A"], Split::Dev).unwrap(),
            EntityRecord::new("c", ["A"], Split::Test).unwrap(),
            EntityRecord::new("d", ["A"], Split::Test).unwrap(),
        ];
        let stats = CorpusStats::from_records(&records);
        assert_eq!(stats.test.mentions, 2);
        assert_eq!(stats.total_mentions(), records.len());
    }

    #[test]
    fn synthetic_minimal_case() {
        let corpus = generate_synthetic_corpus(1, 2, 0).unwrap();
        assert_eq!(corpus.dictionary.len(), 1);
        assert!(corpus.train.len() + corpus.test.len() >= 1);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(matches!(
            generate_synthetic_corpus(0, 2, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            generate_synthetic_corpus(3, 1, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(
            generate_synthetic_corpus(20, 4, 3).unwrap(),
            generate_synthetic_corpus(20, 4, 3).unwrap()
        );
        assert_ne!(
            generate_synthetic_corpus(20, 4, 3).unwrap(),
            generate_synthetic_corpus(20, 4, 4).unwrap()
        );
    }

    #[test]
    fn synthetic_pairs_are_group_disjoint() {
        let corpus = generate_synthetic_corpus(30, 4, 1).unwrap();
        let (train, test) = synthetic_pairs(&corpus, 1);
        let groups = |pairs: &[PairRecord]| -> HashSet<String> {
            pairs.iter().filter_map(|p| p.group_id.clone()).collect()
        };
        assert!(groups(&train).is_disjoint(&groups(&test)));
        assert!(train.iter().any(|p| p.label) && train.iter().any(|p| !p.label));
        assert!(test.iter().any(|p| p.label) && test.iter().any(|p| !p.label));
    }
}
