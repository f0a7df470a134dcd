use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{LabelSets, Vocab, CLS};
use crate::error::{Error, Result};

/// On-disk form of one dialogue (one JSON object per line).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDialogue {
    pub id: String,
    pub turns: Vec<RawTurn>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTurn {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    MultiTurn,
    SingleTurn,
}

/// Where the result side of the dialogue history comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistorySource {
    #[default]
    Gold,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub intent: usize,
    pub slots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    /// Lowercased surface tokens.
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    pub gold_intent: usize,
    pub gold_slots: Vec<usize>,
    pub predicted: Option<Prediction>,
}

impl Turn {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One element of the result side of the history: the intent sits at each
/// turn's CLS position, slot labels at its token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultToken {
    Intent(usize),
    Slot(usize),
    Pad,
}

/// Aligned history sequences for one current turn.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HistoryBundle {
    /// Token ids of all previous turns, each prefixed with CLS.
    pub utterance: Vec<usize>,
    pub results: Vec<ResultToken>,
    pub mask: Vec<bool>,
    pub turns: usize,
}

impl HistoryBundle {
    pub fn len(&self) -> usize {
        self.utterance.len()
    }

    /// True when there is no real (unmasked) history position.
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn is_aligned(&self) -> bool {
        self.utterance.len() == self.results.len() && self.results.len() == self.mask.len()
    }

    pub fn pad_to(&mut self, len: usize) {
        while self.utterance.len() < len {
            self.utterance.push(crate::data::PAD);
            self.results.push(ResultToken::Pad);
            self.mask.push(false);
        }
    }

    fn push_turn(&mut self, tokens: &[usize], intent: usize, slots: &[usize]) {
        self.utterance.push(CLS);
        self.utterance.extend_from_slice(tokens);
        self.results.push(ResultToken::Intent(intent));
        self.results.extend(slots.iter().map(|&s| ResultToken::Slot(s)));
        self.mask.extend(std::iter::repeat_n(true, tokens.len() + 1));
        self.turns += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSession {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl DialogueSession {
    /// Records the predicted labels of `turn`; the last write wins.
    pub fn record_prediction(&mut self, turn: usize, intent: usize, slots: Vec<usize>) -> Result<()> {
        let t = self.turns.get_mut(turn).ok_or_else(|| {
            Error::Contract(format!("turn {turn} does not exist in dialogue `{}`", self.id))
        })?;
        if slots.len() != t.tokens.len() {
            return Err(Error::Contract(format!(
                "{} slot labels recorded for a turn of {} tokens",
                slots.len(),
                t.tokens.len()
            )));
        }
        t.predicted = Some(Prediction { intent, slots });
        Ok(())
    }

    pub fn clear_predictions(&mut self) {
        self.turns.iter_mut().for_each(|t| t.predicted = None);
    }

    /// History of turns `0..turn` with results taken from `source`.
    pub fn history(&self, turn: usize, source: HistorySource) -> Result<HistoryBundle> {
        let mut bundle = HistoryBundle::default();
        for (i, t) in self.turns.iter().take(turn).enumerate() {
            match source {
                HistorySource::Gold => bundle.push_turn(&t.tokens, t.gold_intent, &t.gold_slots),
                HistorySource::Predicted => {
                    let p = t.predicted.as_ref().ok_or_else(|| {
                        Error::Contract(format!(
                            "turn {i} of `{}` has no recorded prediction",
                            self.id
                        ))
                    })?;
                    bundle.push_turn(&t.tokens, p.intent, &p.slots);
                }
            }
        }
        Ok(bundle)
    }
}

/// A loaded training corpus together with the vocabulary and labels built from it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sessions: Vec<DialogueSession>,
    pub vocab: Vocab,
    pub labels: LabelSets,
}

pub fn read_raw(path: &Path, format: CorpusFormat) -> Result<Vec<RawDialogue>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut d: RawDialogue = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        if d.turns.is_empty() {
            return Err(perr("dialogue has no turns".into()));
        }
        if format == CorpusFormat::SingleTurn && d.turns.len() != 1 {
            return Err(perr(format!(
                "single-turn record has {} turns",
                d.turns.len()
            )));
        }
        for (ti, t) in d.turns.iter_mut().enumerate() {
            if t.tokens.is_empty() {
                return Err(perr(format!("turn {ti} has no tokens")));
            }
            if t.tokens.len() != t.slots.len() {
                return Err(perr(format!(
                    "turn {ti} has {} tokens but {} slot labels",
                    t.tokens.len(),
                    t.slots.len()
                )));
            }
            for tok in &mut t.tokens {
                *tok = tok.to_lowercase();
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Maps dialogues onto ids; unseen tokens become UNK, unseen labels are errors.
pub fn to_sessions(raw: &[RawDialogue], vocab: &Vocab, labels: &LabelSets) -> Result<Vec<DialogueSession>> {
    raw.iter()
        .map(|d| {
            let turns = d
                .turns
                .iter()
                .map(|t| {
                    Ok(Turn {
                        words: t.tokens.clone(),
                        tokens: t.tokens.iter().map(|w| vocab.id(w)).collect(),
                        gold_intent: labels.intent_id(&t.intent)?,
                        gold_slots: t
                            .slots
                            .iter()
                            .map(|s| labels.slot_id(s))
                            .collect::<Result<_>>()?,
                        predicted: None,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(DialogueSession {
                id: d.id.clone(),
                turns,
            })
        })
        .collect()
}

/// Loads a training file and builds the vocabulary and label sets from it.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    Corpus::from_raw(&read_raw(path, format)?)
}

impl Corpus {
    /// Builds the vocabulary and label sets from in-memory dialogues.
    pub fn from_raw(raw: &[RawDialogue]) -> Result<Self> {
        let vocab = Vocab::build(
            raw.iter()
                .flat_map(|d| d.turns.iter())
                .flat_map(|t| t.tokens.iter().map(String::as_str)),
        );
        let labels = LabelSets::build(
            raw.iter().flat_map(|d| d.turns.iter()).map(|t| t.intent.as_str()),
            raw.iter()
                .flat_map(|d| d.turns.iter())
                .flat_map(|t| t.slots.iter().map(String::as_str))
                .chain(["O"]),
        )?;
        let sessions = to_sessions(raw, &vocab, &labels)?;
        Ok(Corpus {
            sessions,
            vocab,
            labels,
        })
    }
}

/// Loads a dev/test file against a frozen vocabulary; unseen tokens map to UNK.
pub fn load_split(
    path: &Path,
    format: CorpusFormat,
    vocab: &Vocab,
    labels: &LabelSets,
) -> Result<Vec<DialogueSession>> {
    to_sessions(&read_raw(path, format)?, vocab, labels)
}

pub fn to_raw(sessions: &[DialogueSession], labels: &LabelSets) -> Vec<RawDialogue> {
    sessions
        .iter()
        .map(|s| RawDialogue {
            id: s.id.clone(),
            turns: s
                .turns
                .iter()
                .map(|t| RawTurn {
                    tokens: t.words.clone(),
                    slots: labels.slot_names(&t.gold_slots),
                    intent: labels.intents[t.gold_intent].clone(),
                })
                .collect(),
        })
        .collect()
}

pub fn write_raw(path: &Path, dialogues: &[RawDialogue]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        let line = serde_json::to_string(d).expect("raw dialogues serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, sessions: &[DialogueSession], labels: &LabelSets) -> Result<()> {
    write_raw(path, &to_raw(sessions, labels))
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
