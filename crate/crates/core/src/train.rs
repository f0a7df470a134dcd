//! Joint training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::data::{make_batches, Batch, Corpus, DialogueSession, HistorySource};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::EvalReport;
use crate::model::{Dims, ShaLrt};
use crate::nn::{Ctx, OptimizerState, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Batch mean of `L_SLU + λ·L_SLG`.
    pub loss: f64,
    pub slu: f64,
    pub slg: f64,
    pub examples: usize,
}

pub struct Trainer {
    pub model: ShaLrt<f64>,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub config: TrainConfig,
}

impl Trainer {
    /// `rng` continues the stream used to initialize `model`.
    pub fn new(model: ShaLrt<f64>, config: &TrainConfig, rng: ChaCha8Rng) -> Self {
        Self {
            optimizer: OptimizerState::new(config.optimizer, config.learning_rate, config.weight_decay),
            model,
            rng,
            step: 0,
            config: config.clone(),
        }
    }

    /// Builds a fresh model from `cfg` with one generator for init, dropout and shuffling.
    pub fn from_config(cfg: &RunConfig, dims: Dims) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = ShaLrt::new(&cfg.model, &cfg.slg, dims, &mut rng)?;
        Ok(Self::new(model, &cfg.train, rng))
    }

    /// Forward and backward over every turn of `batch`, then one optimizer update.
    pub fn joint_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let Self { model, rng, .. } = self;
        let dropout = model.config.dropout;
        let scale = 1.0 / batch.len() as f64;
        let mut acc: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let mut stats = StepStats { examples: batch.len(), ..StepStats::default() };
        for i in 0..batch.len() {
            let ex = batch.example(i);
            let mut tape = Tape::new(&model.params);
            let mut ctx = Ctx::train(dropout, rng);
            let l = model.loss(&mut tape, &mut ctx, ex.tokens, ex.history, batch.gold_intents[i], &batch.gold_slots[i])?;
            let total = tape.scalar(l.total);
            if !total.is_finite() {
                return Err(Error::Numerical { step: self.step + 1 });
            }
            stats.loss += scale * total;
            stats.slu += scale * tape.scalar(l.slu);
            stats.slg += scale * l.slg.map_or(0.0, |v| tape.scalar(v));
            let scaled = tape.scale(l.total, scale);
            let grads = tape.backward(scaled)?;
            for (a, g) in acc.iter_mut().zip(grads.params()) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        if self.config.grad_clip > 0.0 {
            let norm = acc.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.grad_clip {
                let k = self.config.grad_clip / norm;
                acc.iter_mut().flatten().for_each(|g| *g *= k);
            }
        }
        if acc.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical { step: self.step + 1 });
        }
        self.model.params.zero_grad();
        self.model.params.accumulate_grads(&acc)?;
        self.optimizer.step(&mut self.model.params)?;
        self.step += 1;
        Ok(stats)
    }

    /// One pass over `sessions`; returns turn-weighted mean losses.
    pub fn epoch(&mut self, sessions: &[DialogueSession]) -> Result<StepStats> {
        let seed = self.config.shuffle.then(|| self.rng.gen::<u64>());
        let source = self.config.history_source;
        let recorded;
        let sessions = if source == HistorySource::Predicted {
            let mut copy = sessions.to_vec();
            for s in &mut copy {
                self.model.predict_session(s)?;
            }
            recorded = copy;
            &recorded[..]
        } else {
            sessions
        };
        let batches = make_batches(sessions, self.config.batch_size, seed, source)?;
        let mut total = StepStats::default();
        for b in &batches {
            let s = self.joint_step(b)?;
            let w = s.examples as f64;
            total.loss += w * s.loss;
            total.slu += w * s.slu;
            total.slg += w * s.slg;
            total.examples += s.examples;
        }
        let n = total.examples as f64;
        total.loss /= n;
        total.slu /= n;
        total.slg /= n;
        Ok(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: StepStats,
    pub dev: Option<EvalReport>,
}

pub struct FitOutcome {
    /// Parameters of the epoch with the best dev overall accuracy (the last epoch without dev data).
    pub best: ShaLrt<f64>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub trainer: Trainer,
}

pub fn fit(
    cfg: &RunConfig,
    corpus: &Corpus,
    dev: Option<&[DialogueSession]>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    let dims = Dims {
        vocab: corpus.vocab.len(),
        intents: corpus.labels.num_intents(),
        slots: corpus.labels.num_slots(),
    };
    let mut trainer = Trainer::from_config(cfg, dims)?;
    let mut best: Option<(f64, usize, ShaLrt<f64>)> = None;
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let train = trainer.epoch(&corpus.sessions)?;
        let dev_report = match dev {
            Some(d) => Some(evaluate(&trainer.model, d, &corpus.labels)?.0),
            None => None,
        };
        let score = dev_report.as_ref().map_or(f64::NEG_INFINITY, |r| r.overall_accuracy);
        let better = match &best {
            None => true,
            Some((s, ..)) => score > *s || dev.is_none(),
        };
        if better {
            best = Some((score, epoch, trainer.model.clone()));
        }
        let entry = EpochLog { epoch, train, dev: dev_report };
        on_epoch(&entry);
        log.push(entry);
    }
    let (_, best_epoch, best) = match best {
        Some(b) => b,
        None => (0.0, 0, trainer.model.clone()),
    };
    Ok(FitOutcome { best, best_epoch, log, trainer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, SlgConfig};
    use crate::data::{LabelSets, Turn, Vocab};

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            dropout: 0.1,
            sha_layers: 1,
            encoder_layers: 2,
            rel_pos_clip: 2,
            lrm_positions: vec![1],
            ..ModelConfig::default()
        };
        c.slg = SlgConfig { decoder_layers: 1, ..SlgConfig::default() };
        c.train.batch_size = 2;
        c.train.learning_rate = 1e-2;
        c.train.epochs = 2;
        c
    }

    fn corpus() -> Corpus {
        let turn = |t: Vec<usize>, i, s: Vec<usize>| Turn {
            words: vec![String::new(); t.len()],
            tokens: t,
            gold_intent: i,
            gold_slots: s,
            predicted: None,
        };
        Corpus {
            sessions: vec![
                DialogueSession { id: "a".into(), turns: vec![turn(vec![3, 4], 0, vec![1, 2]), turn(vec![5], 1, vec![0])] },
                DialogueSession { id: "b".into(), turns: vec![turn(vec![6, 3, 4], 1, vec![0, 1, 2])] },
            ],
            vocab: Vocab::build(["a", "b", "c", "d", "e"]),
            labels: LabelSets::build(["x", "y"], ["O", "B-t", "I-t"]).unwrap(),
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 15;
        let a = fit(&cfg, &corpus(), None, |_| {}).unwrap();
        let b = fit(&cfg, &corpus(), None, |_| {}).unwrap();
        for (p, q) in a.best.params.iter().zip(b.best.params.iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
        }
        let first = a.log.first().unwrap().train.loss;
        let last = a.log.last().unwrap().train.loss;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(a.trainer.step, 15 * 2);
    }

    #[test]
    fn predicted_history_training_runs() {
        let mut cfg = tiny_cfg();
        cfg.train.history_source = HistorySource::Predicted;
        let c = corpus();
        let out = fit(&cfg, &c, Some(&c.sessions), |_| {}).unwrap();
        assert!(out.log.iter().all(|e| e.dev.is_some()));
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let cfg = tiny_cfg();
        let c = corpus();
        let mut t = Trainer::from_config(&cfg, Dims { vocab: c.vocab.len(), intents: 2, slots: 3 }).unwrap();
        t.model.params.iter_mut().next().unwrap().tensor.data_mut()[3 * 8] = f64::NAN;
        let batches = make_batches(&c.sessions, 2, None, HistorySource::Gold).unwrap();
        assert!(matches!(t.joint_step(&batches[0]), Err(Error::Numerical { step: 1 })));
    }
}
