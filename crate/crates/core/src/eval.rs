//! Session-by-session evaluation and single-stream latency benchmarking.

use std::time::Instant;

use crate::data::{DialogueSession, HistorySource, LabelSets};
use crate::error::{Error, Result};
use crate::metrics::{build_report, EvalReport, LatencyStats, PredictionRecord};
use crate::model::ShaLrt;
use crate::nn::Real;

/// Predicts every dialogue turn by turn, feeding recorded predictions forward as
/// history, and scores the result.
pub fn evaluate<T: Real>(
    model: &ShaLrt<T>,
    sessions: &[DialogueSession],
    labels: &LabelSets,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let mut records = Vec::new();
    let mut lengths = Vec::new();
    for original in sessions {
        let mut s = original.clone();
        s.clear_predictions();
        for t in 0..s.turns.len() {
            let start = Instant::now();
            let history = s.history(t, HistorySource::Predicted)?;
            let p = model.predict(&s.turns[t].tokens, &history)?;
            let latency_ms = start.elapsed().as_secs_f64() * 1e3;
            let turn = &s.turns[t];
            records.push(PredictionRecord {
                id: s.id.clone(),
                turn: t,
                gold_intent: labels.intents[turn.gold_intent].clone(),
                pred_intent: labels.intents[p.intent].clone(),
                gold_slots: labels.slot_names(&turn.gold_slots),
                pred_slots: labels.slot_names(&p.slots),
                latency_ms,
            });
            lengths.push(s.turns.len());
            s.record_prediction(t, p.intent, p.slots)?;
        }
    }
    Ok((build_report(&records, &lengths)?, records))
}

/// What one timed call runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// Parallel tagging through the classifier heads.
    Tagger,
    /// Token-serial greedy generation with the slot-label decoder.
    Greedy,
}

/// Times single-utterance inference for several models, interleaving them call by
/// call in rotating order so that drift and cache effects fall on each equally. History construction is inside the
/// timed region. The first `warmup` rounds are discarded.
pub fn bench_interleaved<T: Real>(
    models: &[&ShaLrt<T>],
    sessions: &[DialogueSession],
    reps: usize,
    warmup: usize,
    mode: BenchMode,
) -> Result<Vec<LatencyStats>> {
    if reps == 0 {
        return Err(Error::Config("repetitions must be positive".into()));
    }
    let Some(first) = models.first() else {
        return Err(Error::Config("no model to benchmark".into()));
    };
    let mut recorded = sessions.to_vec();
    for s in &mut recorded {
        first.predict_session(s)?;
    }
    let items: Vec<(usize, usize)> = recorded
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.turns.len()).map(move |t| (i, t)))
        .collect();
    if items.is_empty() {
        return Err(Error::Config("cannot benchmark an empty corpus".into()));
    }
    let mut samples = vec![Vec::with_capacity(reps); models.len()];
    for r in 0..warmup + reps {
        let (si, ti) = items[r % items.len()];
        let s = &recorded[si];
        // Rotate the call order each round so no model always runs first.
        for k in 0..models.len() {
            let m = (k + r) % models.len();
            let model = models[m];
            let start = Instant::now();
            let history = s.history(ti, HistorySource::Predicted)?;
            match mode {
                BenchMode::Tagger => {
                    std::hint::black_box(model.predict(&s.turns[ti].tokens, &history)?);
                }
                BenchMode::Greedy => {
                    std::hint::black_box(model.greedy_decode(&s.turns[ti].tokens, &history)?);
                }
            }
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if r >= warmup {
                samples[m].push(ms);
            }
        }
    }
    Ok(samples.iter().map(|s| LatencyStats::from_samples(s)).collect())
}

pub fn bench_latency<T: Real>(model: &ShaLrt<T>, sessions: &[DialogueSession], reps: usize, warmup: usize) -> Result<LatencyStats> {
    Ok(bench_interleaved(&[model], sessions, reps, warmup, BenchMode::Tagger)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, SlgConfig};
    use crate::data::Turn;
    use crate::model::Dims;

    fn setup() -> (ShaLrt<f64>, Vec<DialogueSession>, LabelSets) {
        let m = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            sha_layers: 1,
            encoder_layers: 2,
            lrm_positions: vec![1],
            ..ModelConfig::default()
        };
        let s = SlgConfig { decoder_layers: 1, ..SlgConfig::default() };
        let model = ShaLrt::with_seed(&m, &s, Dims { vocab: 8, intents: 2, slots: 3 }, 1).unwrap();
        let turn = |t: Vec<usize>| Turn {
            words: vec![String::new(); t.len()],
            gold_slots: vec![0; t.len()],
            tokens: t,
            gold_intent: 0,
            predicted: None,
        };
        let sessions = vec![DialogueSession { id: "a".into(), turns: vec![turn(vec![3, 4]), turn(vec![5]), turn(vec![6, 7])] }];
        let labels = LabelSets::build(["x", "y"], ["O", "B-t", "I-t"]).unwrap();
        (model, sessions, labels)
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (model, sessions, labels) = setup();
        let (a, ra) = evaluate(&model, &sessions, &labels).unwrap();
        let (b, rb) = evaluate(&model, &sessions, &labels).unwrap();
        let strip = |r: &[PredictionRecord]| r.iter().map(|x| (x.pred_intent.clone(), x.pred_slots.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&ra), strip(&rb));
        assert_eq!(a.overall_accuracy, b.overall_accuracy);
        assert_eq!(a.utterances, 3);
        assert_eq!(a.unc_errors, a.bi_errors + a.ib_errors);
    }

    #[test]
    fn bench_validates_inputs() {
        let (model, sessions, _) = setup();
        assert!(matches!(bench_latency(&model, &sessions, 0, 0), Err(Error::Config(_))));
        assert!(matches!(bench_latency(&model, &[], 5, 0), Err(Error::Config(_))));
        let s = bench_latency(&model, &sessions, 7, 2).unwrap();
        assert_eq!(s.count, 7);
        assert!(s.p50_ms <= s.p95_ms);
        let g = bench_interleaved(&[&model], &sessions, 3, 0, BenchMode::Greedy).unwrap();
        assert_eq!(g[0].count, 3);
    }
}
