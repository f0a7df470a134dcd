use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

/// Token vocabulary with reserved PAD/UNK/CLS ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from training tokens in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from(Vec::new());
        for t in tokens {
            if !v.ids.contains_key(t) {
                v.ids.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(list: Vec<String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(list.into_iter().filter(|t| !RESERVED.contains(&t.as_str())));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens.into_iter().skip(RESERVED.len()).collect()
    }
}

/// Intent and IOB slot label inventories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSets {
    pub intents: Vec<String>,
    pub slots: Vec<String>,
}

impl LabelSets {
    /// Intents sorted; slots as `O` followed by `B-x`, `I-x` pairs sorted by type.
    pub fn build<'a>(
        intents: impl IntoIterator<Item = &'a str>,
        slots: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let intents: BTreeSet<&str> = intents.into_iter().collect();
        let slots: BTreeSet<&str> = slots.into_iter().collect();
        for s in &slots {
            parse_slot(s)?;
        }
        let mut types: BTreeSet<&str> = BTreeSet::new();
        for s in &slots {
            if let Some(t) = s.strip_prefix("B-").or_else(|| s.strip_prefix("I-")) {
                types.insert(t);
            }
        }
        let mut ordered = vec!["O".to_string()];
        for t in types {
            for prefix in ["B-", "I-"] {
                let label = format!("{prefix}{t}");
                if slots.contains(label.as_str()) {
                    ordered.push(label);
                }
            }
        }
        let sets = Self {
            intents: intents.into_iter().map(str::to_string).collect(),
            slots: ordered,
        };
        sets.validate()?;
        Ok(sets)
    }

    /// Every `I-x` needs a matching `B-x`.
    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() {
            return Err(Error::LabelSchema("no intent labels".into()));
        }
        for s in &self.slots {
            if let Some(t) = s.strip_prefix("I-") {
                if !self.slots.iter().any(|b| b.strip_prefix("B-") == Some(t)) {
                    return Err(Error::LabelSchema(format!(
                        "slot label `{s}` has no matching `B-{t}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn intent_id(&self, label: &str) -> Result<usize> {
        self.intents
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Label(format!("unknown intent `{label}`")))
    }

    pub fn slot_id(&self, label: &str) -> Result<usize> {
        self.slots
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Label(format!("unknown slot label `{label}`")))
    }

    pub fn slot_names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.slots[i].clone()).collect()
    }
}

/// IOB reading of one slot label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Iob<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_slot(label: &str) -> Result<Iob<'_>> {
    if label == "O" {
        return Ok(Iob::Outside);
    }
    match label.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Iob::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Iob::Inside(t)),
        _ => Err(Error::Label(format!("`{label}` is not an IOB label"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_oov() {
        let v = Vocab::build(["play", "song", "play"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<cls>"), CLS);
        assert_eq!(v.id("play"), 3);
        assert_eq!(v.id("never-seen"), UNK);
        let round: Vocab = Vec::<String>::from(v.clone()).into();
        assert_eq!(round, v);
    }

    #[test]
    fn label_sets_are_ordered_and_validated() {
        let ls = LabelSets::build(
            ["b", "a"],
            ["O", "I-city", "B-time", "B-city"],
        )
        .unwrap();
        assert_eq!(ls.intents, ["a", "b"]);
        assert_eq!(ls.slots, ["O", "B-city", "I-city", "B-time"]);

        let err = LabelSets::build(["a"], ["O", "I-city"]).unwrap_err();
        assert!(matches!(err, Error::LabelSchema(_)), "{err}");
        assert!(LabelSets::build(["a"], ["X-city"]).is_err());
    }

    #[test]
    fn iob_parsing() {
        assert_eq!(parse_slot("O").unwrap(), Iob::Outside);
        assert_eq!(parse_slot("B-poi_type").unwrap(), Iob::Begin("poi_type"));
        assert_eq!(parse_slot("I-a-b").unwrap(), Iob::Inside("a-b"));
        assert!(parse_slot("B-").is_err());
        assert!(parse_slot("city").is_err());
    }
}
