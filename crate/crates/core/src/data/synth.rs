//! Seeded synthetic corpora for tests, sanity runs and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::{RawDialogue, RawTurn};

fn turn(tokens: Vec<&str>, slots: Vec<String>, intent: &str) -> RawTurn {
    RawTurn {
        tokens: tokens.into_iter().map(String::from).collect(),
        slots,
        intent: intent.into(),
    }
}

fn entity_tags(ty: &str, len: usize) -> impl Iterator<Item = String> + '_ {
    (0..len).map(move |i| format!("{}-{ty}", if i == 0 { 'B' } else { 'I' }))
}

/// Dialogues over an abstract vocabulary `w0..` with well-formed random IOB
/// labels. Intents are `intent0..`, slot types `type0..`.
pub fn random_dialogues(
    rng: &mut impl Rng,
    n: usize,
    intents: usize,
    slot_types: usize,
    max_turns: usize,
    max_len: usize,
) -> Vec<RawDialogue> {
    (0..n)
        .map(|d| {
            let turns = (0..rng.gen_range(1..=max_turns))
                .map(|_| {
                    let len = rng.gen_range(1..=max_len);
                    let mut slots = Vec::with_capacity(len);
                    let mut open: Option<usize> = None;
                    for _ in 0..len {
                        let r: f64 = rng.gen();
                        let label = match open {
                            Some(t) if r < 0.3 => format!("I-type{t}"),
                            _ if r < 0.6 => {
                                let t = rng.gen_range(0..slot_types);
                                open = Some(t);
                                format!("B-type{t}")
                            }
                            _ => {
                                open = None;
                                "O".to_string()
                            }
                        };
                        slots.push(label);
                    }
                    RawTurn {
                        tokens: (0..len).map(|_| format!("w{}", rng.gen_range(0..50))).collect(),
                        slots,
                        intent: format!("intent{}", rng.gen_range(0..intents)),
                    }
                })
                .collect();
            RawDialogue { id: format!("r{d}"), turns }
        })
        .collect()
}

const TYPES: [(&str, [&str; 3], &str); 8] = [
    ("city", ["boston", "denver", "austin"], "city"),
    ("date", ["monday", "friday", "tomorrow"], "morning"),
    ("time", ["noon", "seven", "midnight"], "sharp"),
    ("poi", ["starbucks", "chevron", "safeway"], "downtown"),
    ("cuisine", ["thai", "sushi", "tacos"], "food"),
    ("person", ["alice", "bob", "carol"], "smith"),
    ("event", ["dentist", "yoga", "dinner"], "appointment"),
    ("weather", ["rain", "snow", "wind"], "storm"),
];

const INTENTS: [(&str, [&str; 2]); 3] = [("find", ["find", "search"]), ("book", ["book", "reserve"]), ("ask", ["tell", "what"])];

const FILLERS: [&str; 5] = ["please", "the", "for", "me", "a"];

/// Sixteen short dialogues with three intents and eight slot types. Intent is
/// signalled by a trigger word and each slot type has its own entity words, so the
/// labels are a deterministic function of the tokens.
pub fn overfit_corpus(seed: u64) -> Vec<RawDialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..16)
        .map(|d| {
            let turns = (0..rng.gen_range(2..=3))
                .map(|t| {
                    let (intent, triggers) = INTENTS[(d + t) % INTENTS.len()];
                    let mut tokens = vec![*triggers.choose(&mut rng).expect("non-empty")];
                    let mut slots = vec!["O".to_string()];
                    let n_entities = rng.gen_range(1..=2);
                    for e in 0..n_entities {
                        if rng.gen_bool(0.5) {
                            tokens.push(FILLERS.choose(&mut rng).expect("non-empty"));
                            slots.push("O".into());
                        }
                        let ty = if t == 0 && e == 0 { d % TYPES.len() } else { rng.gen_range(0..TYPES.len()) };
                        let (name, words, tail) = TYPES[ty];
                        tokens.push(words.choose(&mut rng).expect("non-empty"));
                        let len = if rng.gen_bool(0.3) { 2 } else { 1 };
                        if len == 2 {
                            tokens.push(tail);
                        }
                        slots.extend(entity_tags(name, len));
                    }
                    turn(tokens, slots, intent)
                })
                .collect();
            RawDialogue { id: format!("o{d}"), turns }
        })
        .collect()
}

const DOMAINS: [(&str, &str, [&str; 3], [&str; 4]); 3] = [
    ("weather", "location", ["what", "is", "the weather in"], ["boston", "denver", "seattle", "dallas"]),
    ("navigate", "poi", ["take", "me", "to"], ["starbucks", "walmart", "chevron", "safeway"]),
    ("schedule", "event", ["remind", "me", "about"], ["dentist", "meeting", "yoga", "dinner"]),
];

/// Entities in the follow-up turn, shared by every domain.
const SHARED: [&str; 8] = ["paris", "central", "riverside", "harbor", "union", "oak", "maple", "summit"];
const SHARED_TAIL: [&str; 3] = ["street", "park", "hall"];

/// Two-turn dialogues whose second turn, "what about X", reuses the domain of the
/// first. X comes from a pool shared by all domains, so its slot type and the
/// turn's intent can only be recovered from the first turn.
pub fn history_dependent(n: usize, seed: u64) -> Vec<RawDialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|d| {
            let (intent, ty, prefix, own) = DOMAINS[rng.gen_range(0..DOMAINS.len())];
            let mut first: Vec<&str> = prefix.iter().flat_map(|p| p.split(' ')).collect();
            let mut first_slots = vec!["O".to_string(); first.len()];
            first.push(own.choose(&mut rng).expect("non-empty"));
            first_slots.extend(entity_tags(ty, 1));

            let mut second = vec!["what", "about", *SHARED.choose(&mut rng).expect("non-empty")];
            let len = if rng.gen_bool(0.3) { 2 } else { 1 };
            if len == 2 {
                second.push(SHARED_TAIL.choose(&mut rng).expect("non-empty"));
            }
            let second_slots = ["O", "O"].iter().map(|s| s.to_string()).chain(entity_tags(ty, len)).collect();
            RawDialogue {
                id: format!("h{d}"),
                turns: vec![turn(first, first_slots, intent), turn(second, second_slots, intent)],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Corpus;

    #[test]
    fn fixtures_are_well_formed() {
        let o = Corpus::from_raw(&overfit_corpus(3)).unwrap();
        assert_eq!(o.sessions.len(), 16);
        assert_eq!(o.labels.num_intents(), 3);
        assert_eq!(o.labels.slots.iter().filter(|s| s.starts_with("B-")).count(), 8);
        let h = Corpus::from_raw(&history_dependent(30, 1)).unwrap();
        assert!(h.sessions.iter().all(|s| s.turns.len() == 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_dialogues(&mut rng, 20, 3, 4, 4, 6);
        assert!(Corpus::from_raw(&r).is_ok());
        assert_eq!(overfit_corpus(3), overfit_corpus(3));
    }
}
