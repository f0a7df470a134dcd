//! Intent accuracy, chunk F1, overall accuracy, uncoordinated-slot analysis and
//! turn-position breakdowns.

use serde::{Deserialize, Serialize};

use crate::data::{parse_slot, Iob};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub slot_type: String,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

/// IOB chunking: `B-x` opens, `I-x` continues a same-type chunk, a bare or
/// mismatched `I-x` opens a new chunk.
pub fn extract_chunks<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Chunk>> {
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, label) in labels.iter().enumerate() {
        match parse_slot(label.as_ref())? {
            Iob::Outside => open = None,
            Iob::Begin(t) => {
                chunks.push(Chunk { slot_type: t.to_string(), start: i, end: i });
                open = Some(chunks.len() - 1);
            }
            Iob::Inside(t) => match open {
                Some(c) if chunks[c].slot_type == t => chunks[c].end = i,
                _ => {
                    chunks.push(Chunk { slot_type: t.to_string(), start: i, end: i });
                    open = Some(chunks.len() - 1);
                }
            },
        }
    }
    Ok(chunks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(correct, predicted), ratio(correct, gold));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self { precision: p, recall: r, f1, correct, predicted, gold }
    }
}

fn check_aligned<S>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!("{} gold vs {} predicted utterances", gold.len(), pred.len())));
    }
    if let Some(i) = gold.iter().zip(pred).position(|(g, p)| g.len() != p.len()) {
        return Err(Error::Contract(format!(
            "utterance {i}: {} gold vs {} predicted labels",
            gold[i].len(),
            pred[i].len()
        )));
    }
    Ok(())
}

/// Micro-averaged exact-match chunk precision, recall and F1.
pub fn slot_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<Prf> {
    check_aligned(gold, pred)?;
    let (mut correct, mut predicted, mut total) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gc = extract_chunks(g)?;
        let pc = extract_chunks(p)?;
        correct += pc.iter().filter(|c| gc.contains(c)).count();
        predicted += pc.len();
        total += gc.len();
    }
    Ok(Prf::from_counts(correct, predicted, total))
}

/// Share of utterances whose intent and every slot label are right.
pub fn overall_accuracy<S: PartialEq>(gold_intents: &[usize], pred_intents: &[usize], gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<f64> {
    check_aligned(gold, pred)?;
    if gold_intents.len() != gold.len() || pred_intents.len() != gold.len() {
        return Err(Error::Contract("intent and slot corpora differ in length".into()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let ok = (0..gold.len())
        .filter(|&i| gold_intents[i] == pred_intents[i] && gold[i] == pred[i])
        .count();
    Ok(ok as f64 / gold.len() as f64)
}

pub fn intent_accuracy(gold: &[usize], pred: &[usize]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!("{} gold vs {} predicted intents", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    Ok(gold.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncoordinatedTally {
    /// Positions where the predicted label differs from gold.
    pub slot_errors: usize,
    pub unc: usize,
    /// Correct `B`, at least one wrong `I`.
    pub bi: usize,
    /// Wrong `B`, every `I` correct.
    pub ib: usize,
}

/// Counts BI and IB errors over gold chunks of length at least two.
pub fn uncoordinated_analysis<S: AsRef<str> + PartialEq>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<UncoordinatedTally> {
    check_aligned(gold, pred)?;
    let mut t = UncoordinatedTally::default();
    for (g, p) in gold.iter().zip(pred) {
        t.slot_errors += g.iter().zip(p).filter(|(a, b)| a != b).count();
        for c in extract_chunks(g)?.iter().filter(|c| c.end > c.start) {
            let b_ok = g[c.start] == p[c.start];
            let inside_ok: Vec<bool> = (c.start + 1..=c.end).map(|i| g[i] == p[i]).collect();
            if b_ok && inside_ok.iter().any(|&ok| !ok) {
                t.bi += 1;
            } else if !b_ok && inside_ok.iter().all(|&ok| ok) {
                t.ib += 1;
            }
        }
    }
    t.unc = t.bi + t.ib;
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Early,
    Medium,
    Late,
}

/// Tercile of turn `index` in a dialogue of `turns` turns, with ceil-sized buckets.
pub fn position_bucket(index: usize, turns: usize) -> Position {
    let size = turns.div_ceil(3).max(1);
    match index / size {
        0 => Position::Early,
        1 => Position::Medium,
        _ => Position::Late,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketScores {
    pub utterances: usize,
    pub intent_accuracy: f64,
    pub slot_f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionBreakdown {
    pub early: BucketScores,
    pub medium: BucketScores,
    pub late: BucketScores,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub count: usize,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the samples.
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return Self::default();
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            count: s.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub overall_accuracy: f64,
    pub slot_error_count: usize,
    pub unc_errors: usize,
    pub bi_errors: usize,
    pub ib_errors: usize,
    pub position_breakdown: PositionBreakdown,
    pub latency: LatencyStats,
}

/// One scored utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub turn: usize,
    pub gold_intent: String,
    pub pred_intent: String,
    pub gold_slots: Vec<String>,
    pub pred_slots: Vec<String>,
    pub latency_ms: f64,
}

/// Aggregates prediction records. `turns_per_dialogue` maps each record to the
/// length of its dialogue for the position breakdown.
pub fn build_report(records: &[PredictionRecord], turns_per_dialogue: &[usize]) -> Result<EvalReport> {
    if records.len() != turns_per_dialogue.len() {
        return Err(Error::Contract("every record needs its dialogue length".into()));
    }
    let gold: Vec<Vec<String>> = records.iter().map(|r| r.gold_slots.clone()).collect();
    let pred: Vec<Vec<String>> = records.iter().map(|r| r.pred_slots.clone()).collect();
    let intent_ok: Vec<bool> = records.iter().map(|r| r.gold_intent == r.pred_intent).collect();
    let prf = slot_f1(&gold, &pred)?;
    let unc = uncoordinated_analysis(&gold, &pred)?;
    let overall = if records.is_empty() {
        0.0
    } else {
        (0..records.len()).filter(|&i| intent_ok[i] && gold[i] == pred[i]).count() as f64 / records.len() as f64
    };
    let bucket = |which: Position| -> Result<BucketScores> {
        let idx: Vec<usize> = (0..records.len())
            .filter(|&i| position_bucket(records[i].turn, turns_per_dialogue[i]) == which)
            .collect();
        if idx.is_empty() {
            return Ok(BucketScores::default());
        }
        let g: Vec<_> = idx.iter().map(|&i| gold[i].clone()).collect();
        let p: Vec<_> = idx.iter().map(|&i| pred[i].clone()).collect();
        Ok(BucketScores {
            utterances: idx.len(),
            intent_accuracy: idx.iter().filter(|&&i| intent_ok[i]).count() as f64 / idx.len() as f64,
            slot_f1: slot_f1(&g, &p)?.f1,
        })
    };
    let latencies: Vec<f64> = records.iter().map(|r| r.latency_ms).collect();
    Ok(EvalReport {
        utterances: records.len(),
        intent_accuracy: if records.is_empty() {
            0.0
        } else {
            intent_ok.iter().filter(|&&b| b).count() as f64 / records.len() as f64
        },
        slot_precision: prf.precision,
        slot_recall: prf.recall,
        slot_f1: prf.f1,
        overall_accuracy: overall,
        slot_error_count: unc.slot_errors,
        unc_errors: unc.unc,
        bi_errors: unc.bi,
        ib_errors: unc.ib,
        position_breakdown: PositionBreakdown {
            early: bucket(Position::Early)?,
            medium: bucket(Position::Medium)?,
            late: bucket(Position::Late)?,
        },
        latency: LatencyStats::from_samples(&latencies),
    })
}
