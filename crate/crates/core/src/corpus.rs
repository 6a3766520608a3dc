//! Tokenization, vocabularies, dialogue files and the synthetic corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;
/// Token ids of one utterance, without BOS/EOS/SEP.
pub type Utterance = Vec<TokenId>;
/// Utterances preceding a response, oldest first.
pub type History = Vec<Utterance>;
/// A whole conversation.
pub type Dialogue = Vec<Utterance>;
/// A conversation as tokenized surface strings, before vocabulary lookup.
pub type SurfaceDialogue = Vec<Vec<String>>;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_SURFACES: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

const SPLIT_PUNCT: [char; 5] = ['.', ',', '!', '?', '\''];

/// Lowercase, split on whitespace, and give each of `. , ! ? '` its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let mut cur = String::new();
        for ch in word.chars() {
            if SPLIT_PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, TokenId>,
    surfaces: Vec<String>,
}

impl Vocabulary {
    /// Reserved ids first, then surfaces by descending frequency (ties broken
    /// lexicographically) until `max_size` entries exist. Surfaces seen fewer
    /// than `min_count` times are left out.
    pub fn build(dialogues: &[SurfaceDialogue], max_size: usize, min_count: usize) -> Result<Self> {
        if max_size < NUM_RESERVED + 1 {
            return Err(Error::Precondition(format!(
                "vocabulary max_size must be at least {}, got {max_size}",
                NUM_RESERVED + 1
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in dialogues.iter().flatten().flatten() {
            if RESERVED_SURFACES.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        Self::from_surfaces(ranked.into_iter().map(|(s, _)| s.to_string()))
    }

    /// Vocabulary from non-reserved surfaces in id order (ids start at 5).
    pub fn from_surfaces(surfaces: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_SURFACES.iter().map(|s| s.to_string()).collect();
        all.extend(surfaces);
        let mut to_id = HashMap::with_capacity(all.len());
        for (id, s) in all.iter().enumerate() {
            if id >= NUM_RESERVED
                && (s.is_empty() || s.chars().any(char::is_whitespace) || s.to_lowercase() != *s)
            {
                return Err(Error::Precondition(format!("invalid vocabulary surface {s:?}")));
            }
            if to_id.insert(s.clone(), id).is_some() {
                return Err(Error::Precondition(format!("duplicate vocabulary surface {s:?}")));
            }
        }
        Ok(Self { to_id, surfaces: all })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.to_id.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Result<&str> {
        self.surfaces
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.len() })
    }

    pub fn encode<S: AsRef<str>>(&self, surfaces: &[S]) -> Utterance {
        surfaces
            .iter()
            .map(|s| self.id(s.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.surface(id).map(str::to_string)).collect()
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    pub fn encode_dialogue(&self, dialogue: &SurfaceDialogue) -> Dialogue {
        dialogue.iter().map(|u| self.encode(u)).collect()
    }

    /// Writes `<id> <surface>` lines, ids ascending from 0.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (id, s) in self.surfaces.iter().enumerate() {
            text.push_str(&format!("{id} {s}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut surfaces = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| Error::MalformedLine {
                line: i + 1,
                message: message.to_string(),
            };
            let (id, surface) = line.split_once(' ').ok_or_else(|| bad("expected `<id> <surface>`"))?;
            let id: usize = id.parse().map_err(|_| bad("invalid id"))?;
            if id != surfaces.len() {
                return Err(bad("ids must ascend from 0 without gaps"));
            }
            if id < NUM_RESERVED && surface != RESERVED_SURFACES[id] {
                return Err(bad("reserved id has unexpected surface"));
            }
            surfaces.push(surface.to_string());
        }
        if surfaces.len() < NUM_RESERVED {
            return Err(Error::MalformedLine {
                line: surfaces.len() + 1,
                message: "missing reserved entries".into(),
            });
        }
        Self::from_surfaces(surfaces.into_iter().skip(NUM_RESERVED))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub history: History,
    pub response: Utterance,
}

/// One training example per turn `t >= 1`: the response is utterance `t` and
/// the history is up to `history_window` utterances before it, oldest first.
pub fn make_examples(dialogue: &Dialogue, history_window: usize) -> Result<Vec<Example>> {
    if history_window == 0 {
        return Err(Error::Precondition("history_window must be at least 1".into()));
    }
    Ok((1..dialogue.len())
        .map(|t| Example {
            history: dialogue[t.saturating_sub(history_window)..t].to_vec(),
            response: dialogue[t].clone(),
        })
        .collect())
}

/// Examples from every dialogue, in order.
pub fn examples_from(dialogues: &[Dialogue], history_window: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in dialogues {
        out.extend(make_examples(d, history_window)?);
    }
    Ok(out)
}

/// Keeps examples whose response has at least `min_len` tokens.
pub fn filter_min_response_len(examples: Vec<Example>, min_len: usize) -> Vec<Example> {
    examples
        .into_iter()
        .filter(|e| e.response.len() >= min_len)
        .collect()
}

#[derive(Debug, Deserialize)]
struct DialogueRecord {
    dialogue: Vec<String>,
}

#[derive(Serialize)]
struct DialogueRecordOut<'a> {
    dialogue: &'a [String],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDialogues {
    pub dialogues: Vec<SurfaceDialogue>,
    /// Records discarded for having fewer than two non-empty utterances.
    pub dropped: usize,
}

/// Reads a `{"dialogue": [..]}`-per-line file. Utterances that tokenize to
/// nothing are removed before the length check.
pub fn load_dialogues(path: &Path) -> Result<LoadedDialogues> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedDialogues::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord =
            serde_json::from_str(&line).map_err(|_| Error::MalformedRecord { line: i + 1 })?;
        let dialogue: SurfaceDialogue = record
            .dialogue
            .iter()
            .map(|u| tokenize(u))
            .filter(|u| !u.is_empty())
            .collect();
        if dialogue.len() < 2 {
            out.dropped += 1;
        } else {
            out.dialogues.push(dialogue);
        }
    }
    Ok(out)
}

/// Writes raw-text dialogues in the one-record-per-line format.
pub fn write_text_dialogues(path: &Path, dialogues: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    for d in dialogues {
        serde_json::to_writer(&mut buf, &DialogueRecordOut { dialogue: d })?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes token-id dialogues, rendering each utterance as space-joined surfaces.
pub fn write_dialogues(path: &Path, vocab: &Vocabulary, dialogues: &[Dialogue]) -> Result<()> {
    let texts = dialogues
        .iter()
        .map(|d| d.iter().map(|u| vocab.decode_text(u)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    write_text_dialogues(path, &texts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosTag::Noun => "noun",
            PosTag::Verb => "verb",
            PosTag::Other => "other",
        })
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noun" => Ok(PosTag::Noun),
            "verb" => Ok(PosTag::Verb),
            "other" => Ok(PosTag::Other),
            _ => Err(Error::Precondition(format!("unknown POS tag {s:?}"))),
        }
    }
}

/// Surface-keyed POS entries as stored in a lexicon file.
pub type PosEntries = BTreeMap<String, PosTag>;

/// POS tag for every id of a vocabulary; unlisted and reserved ids are `Other`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosLexicon {
    tags: Vec<PosTag>,
}

impl PosLexicon {
    pub fn resolve(vocab: &Vocabulary, entries: &PosEntries) -> Self {
        let mut tags = vec![PosTag::Other; vocab.len()];
        for (surface, &tag) in entries {
            if let Some(id) = vocab.id(surface) {
                if id >= NUM_RESERVED {
                    tags[id] = tag;
                }
            }
        }
        Self { tags }
    }

    /// Everything tagged `Other`.
    pub fn empty(vocab_size: usize) -> Self {
        Self {
            tags: vec![PosTag::Other; vocab_size],
        }
    }

    pub fn tag(&self, id: TokenId) -> PosTag {
        self.tags.get(id).copied().unwrap_or(PosTag::Other)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self::resolve(vocab, &read_pos_entries(path)?))
    }
}

/// Reads `<surface> <tag>` lines.
pub fn read_pos_entries(path: &Path) -> Result<PosEntries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = PosEntries::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(surface), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::MalformedLine {
                line: i + 1,
                message: "expected `<surface> <tag>`".into(),
            });
        };
        let tag = tag.parse().map_err(|_| Error::MalformedLine {
            line: i + 1,
            message: format!("unknown tag {tag:?}"),
        })?;
        entries.insert(surface.to_string(), tag);
    }
    Ok(entries)
}

pub fn write_pos_entries(path: &Path, entries: &PosEntries) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (surface, tag) in entries {
        writeln!(f, "{surface} {tag}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_dialogues: usize,
    pub turns_per_dialogue: usize,
    pub entity_count: usize,
    pub generic_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_dialogues: 2000,
            turns_per_dialogue: 6,
            entity_count: 30,
            generic_rate: 0.3,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.generic_rate) {
            return Err(Error::Config(format!(
                "generic_rate must lie in [0, 1], got {}",
                self.generic_rate
            )));
        }
        if self.num_dialogues == 0 || self.entity_count == 0 {
            return Err(Error::Config("counts must be at least 1".into()));
        }
        if self.turns_per_dialogue < 2 {
            return Err(Error::Config("a dialogue needs at least 2 turns".into()));
        }
        Ok(())
    }
}

/// The five history-independent replies planted in the synthetic corpus.
pub const GENERIC_RESPONSES: [&str; 5] = [
    "i don't know .",
    "i'm not sure .",
    "i have no idea .",
    "i can't say .",
    "i don't care .",
];

// Each template starts with a different word, so no single entity reply is
// as likely as the shared "i" prefix of the generic replies.
const ENTITY_REPLIES: [&str; 4] = [
    "the {} was great .",
    "my {} is better .",
    "yes , the {} is nice .",
    "wow , a {} !",
];

const SYNTH_VERBS: [&str; 10] = [
    "saw", "was", "is", "know", "care", "say", "tell", "have", "don", "can",
];

const ENTITY_NOUNS: [&str; 48] = [
    "cat", "dog", "car", "movie", "book", "song", "house", "garden", "boat", "train", "pizza",
    "coffee", "bike", "beach", "museum", "concert", "game", "phone", "camera", "lamp", "river",
    "mountain", "cake", "jacket", "guitar", "piano", "horse", "bird", "tree", "park", "hotel",
    "restaurant", "school", "office", "bridge", "castle", "forest", "island", "market", "library",
    "theater", "garage", "kitchen", "window", "painting", "statue", "festival", "parade",
];

fn entity_name(i: usize) -> String {
    match ENTITY_NOUNS.get(i) {
        Some(n) => n.to_string(),
        None => format!("thing{i}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// Raw utterance text per dialogue.
    pub dialogues: Vec<Vec<String>>,
    pub pos: PosEntries,
}

impl SyntheticCorpus {
    pub fn tokenized(&self) -> Vec<SurfaceDialogue> {
        self.dialogues
            .iter()
            .map(|d| d.iter().map(|u| tokenize(u)).collect())
            .collect()
    }
}

/// Templated dialogues whose non-generic replies name the most recently
/// mentioned entity.
///
/// Turn 0 introduces an entity; odd turns are replies (generic with
/// probability `generic_rate`); even turns are follow-ups that either name a
/// fresh entity or refer back to the current one.
pub fn gen_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = crate::rng_from(config.seed);
    let entities: Vec<String> = (0..config.entity_count).map(entity_name).collect();
    let mut dialogues = Vec::with_capacity(config.num_dialogues);
    for _ in 0..config.num_dialogues {
        let mut current = &entities[rng.random_range(0..entities.len())];
        let mut turns = Vec::with_capacity(config.turns_per_dialogue);
        turns.push(format!("i saw the {current} today ."));
        for t in 1..config.turns_per_dialogue {
            let utt = if t % 2 == 1 {
                if rng.random_bool(config.generic_rate) {
                    GENERIC_RESPONSES[rng.random_range(0..GENERIC_RESPONSES.len())].to_string()
                } else {
                    ENTITY_REPLIES[rng.random_range(0..ENTITY_REPLIES.len())].replace("{}", current)
                }
            } else if rng.random_bool(0.5) {
                current = &entities[rng.random_range(0..entities.len())];
                format!("what about the {current} ?")
            } else {
                "tell me more about it .".to_string()
            };
            turns.push(utt);
        }
        dialogues.push(turns);
    }
    let mut pos = PosEntries::new();
    for e in &entities {
        pos.insert(e.clone(), PosTag::Noun);
    }
    for v in SYNTH_VERBS {
        pos.insert(v.to_string(), PosTag::Verb);
    }
    Ok(SyntheticCorpus { dialogues, pos })
}
