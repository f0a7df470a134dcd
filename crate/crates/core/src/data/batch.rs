use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::{DialogueSession, HistoryBundle, HistorySource};
use crate::data::vocab::{CLS, PAD};
use crate::error::{Error, Result};

/// Padded mini-batch of single turns, each with its own history.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B × (n_max + 1)]`, CLS at column 0, PAD fill.
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    /// Real-token count per example (CLS excluded).
    pub lengths: Vec<usize>,
    /// Padded to the longest history in the batch.
    pub history: Vec<HistoryBundle>,
    pub gold_intents: Vec<usize>,
    pub gold_slots: Vec<Vec<usize>>,
    /// `(session index, turn index)` of every example.
    pub origin: Vec<(usize, usize)>,
}

/// One unpadded model input.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    /// Real token ids, CLS excluded.
    pub tokens: &'a [usize],
    pub history: &'a HistoryBundle,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            tokens: &self.tokens[i][1..=self.lengths[i]],
            history: &self.history[i],
        }
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

/// Groups every turn of every session into batches of `batch_size`. With a seed,
/// the turn order is shuffled reproducibly; otherwise corpus order is kept.
pub fn make_batches(
    sessions: &[DialogueSession],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    source: HistorySource,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<(usize, usize)> = sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.turns.len()).map(move |ti| (si, ti)))
        .collect();
    if order.is_empty() {
        return Err(Error::Config("cannot batch an empty corpus".into()));
    }
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| build(sessions, chunk, source))
        .collect()
}

fn build(sessions: &[DialogueSession], chunk: &[(usize, usize)], source: HistorySource) -> Result<Batch> {
    let width = 1 + chunk
        .iter()
        .map(|&(s, t)| sessions[s].turns[t].len())
        .max()
        .unwrap_or(0);
    let mut history = chunk
        .iter()
        .map(|&(s, t)| sessions[s].history(t, source))
        .collect::<Result<Vec<_>>>()?;
    let hmax = history.iter().map(HistoryBundle::len).max().unwrap_or(0);
    history.iter_mut().for_each(|h| h.pad_to(hmax));

    let mut batch = Batch {
        tokens: Vec::with_capacity(chunk.len()),
        mask: Vec::with_capacity(chunk.len()),
        lengths: Vec::with_capacity(chunk.len()),
        history,
        gold_intents: Vec::with_capacity(chunk.len()),
        gold_slots: Vec::with_capacity(chunk.len()),
        origin: chunk.to_vec(),
    };
    for &(s, t) in chunk {
        let turn = &sessions[s].turns[t];
        let mut row = vec![PAD; width];
        row[0] = CLS;
        row[1..=turn.len()].copy_from_slice(&turn.tokens);
        let mask = (0..width).map(|i| i <= turn.len()).collect();
        batch.tokens.push(row);
        batch.mask.push(mask);
        batch.lengths.push(turn.len());
        batch.gold_intents.push(turn.gold_intent);
        batch.gold_slots.push(turn.gold_slots.clone());
    }
    Ok(batch)
}
