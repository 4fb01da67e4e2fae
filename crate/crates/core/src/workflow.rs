//! End-to-end training from a run configuration, with file-backed logs and
//! checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{expand_all, load_corpus, CorpusError};
use crate::eval::harness::checkpoint_path;
use crate::model::{Checkpoint, Model, Tokenizer};
use crate::training::{StepLog, TrainError, TrainReport, TrainSink, Trainer};
use crate::types::{Episode, TaskInstance, NO_QUERY};

/// Vocabulary covering every source and target, the sentinel included.
pub fn vocabulary(instances: &[TaskInstance], min_count: usize) -> Tokenizer {
    let mut texts: Vec<String> = Vec::with_capacity(instances.len() * 2 + 1);
    for i in instances {
        texts.push(i.source.render());
        texts.push(i.target.clone());
    }
    texts.push(NO_QUERY.to_string());
    Tokenizer::build(texts.iter().map(String::as_str), min_count)
}

/// Writes `metrics.jsonl`, periodic `step-N.ckpt.json` files and the latest
/// state as `<ablation>.ckpt.json` under one directory.
pub struct FileSink {
    dir: PathBuf,
    log: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl FileSink {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let log = BufWriter::new(File::options().create(true).append(true).open(dir.join("metrics.jsonl"))?);
        Ok(Self { dir: dir.to_path_buf(), log, error: None })
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.log.flush()
    }
}

impl TrainSink for FileSink {
    fn on_step(&mut self, log: &StepLog) {
        let line = serde_json::to_string(log).expect("log serializes");
        if let Err(e) = writeln!(self.log, "{line}") {
            self.error.get_or_insert(e);
        }
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let sink = |e: crate::model::CheckpointError| TrainError::Sink(e.to_string());
        if ckpt.training.step > 0 {
            ckpt.save(&self.dir.join(format!("step-{}.ckpt.json", ckpt.training.step))).map_err(sink)?;
        }
        ckpt.save(&checkpoint_path(&self.dir, ckpt.config.ablation)).map_err(sink)?;
        self.log.flush().map_err(|e| TrainError::Sink(e.to_string()))
    }
}

/// Settings that fit the synthetic corpus in a few seconds on one core. The
/// learning rate is far above the pretrained-backbone default because the
/// tiny model starts from random weights.
pub fn smoke_config(corpus: impl Into<PathBuf>) -> RunConfig {
    let mut cfg = RunConfig::new(crate::corpus::CorpusConfig::new(corpus));
    cfg.train.config.learning_rate = 3e-3;
    cfg.train.config.epochs = 20;
    cfg.train.config.warmup_steps = 50;
    cfg
}

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub struct Prepared {
    pub episodes: Vec<Episode>,
    pub instances: Vec<TaskInstance>,
    pub model: Model,
}

/// Loads and expands the corpus and initialises a fresh model.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, WorkflowError> {
    let episodes = load_corpus(&cfg.corpus)?;
    prepare_episodes(cfg, episodes)
}

pub fn prepare_episodes(cfg: &RunConfig, episodes: Vec<Episode>) -> Result<Prepared, WorkflowError> {
    let instances = expand_all(&episodes, &cfg.prompts, cfg.train.ablation, cfg.corpus.context_turns())?;
    // The vocabulary always covers the full task set so that checkpoints from
    // different ablations can be evaluated on the same inputs.
    let all = expand_all(&episodes, &cfg.prompts, crate::corpus::Ablation::Full, cfg.corpus.context_turns())?;
    let tokenizer = vocabulary(&all, cfg.model.vocab_min_count);
    let model = Model::new(cfg.model.backbone.clone(), cfg.prompts.clone(), tokenizer, cfg.model.init_seed)?;
    Ok(Prepared { episodes, instances, model })
}

pub fn train_prepared(cfg: &RunConfig, prepared: Prepared, sink: &mut dyn TrainSink) -> Result<(Trainer, TrainReport), WorkflowError> {
    let mut trainer =
        Trainer::new(prepared.model, cfg.train.config.clone())?.with_corpus_settings(cfg.corpus.context_turns(), cfg.train.ablation);
    let data = trainer.encode(&prepared.instances)?;
    let report = trainer.run(&data, sink)?;
    Ok((trainer, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_corpus, Ablation, CorpusConfig};
    use crate::model::BackboneSpec;
    use crate::synthetic::{generate, SyntheticConfig};

    #[test]
    fn vocabulary_contains_sentinel_and_prompt_tokens() {
        let eps = generate(&SyntheticConfig { episodes: 4, ..SyntheticConfig::default() });
        let inst = expand_all(&eps, &Default::default(), Ablation::Full, 5).unwrap();
        let tok = vocabulary(&inst, 1);
        assert!(tok.id("No").is_some() && tok.id("Query").is_some() && tok.id("<QG>").is_some());
        assert!(tok.id("user:").is_some());
    }

    #[test]
    fn file_sink_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        write_corpus(&corpus, &generate(&SyntheticConfig { episodes: 6, ..SyntheticConfig::default() })).unwrap();
        let mut cfg = RunConfig::new(CorpusConfig::new(&corpus));
        cfg.model.backbone = BackboneSpec::micro();
        cfg.train.config.epochs = 1;
        cfg.train.config.batch_size = 4;
        cfg.train.config.checkpoint_every = 2;
        cfg.train.ablation = Ablation::WoRg;
        let out = dir.path().join("out");
        let mut sink = FileSink::create(&out).unwrap();
        let (trainer, report) = train_prepared(&cfg, prepare(&cfg).unwrap(), &mut sink).unwrap();
        sink.finish().unwrap();
        assert_eq!(report.steps, 2);
        let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for k in ["step", "l_rd", "l_qg", "l_rg", "total", "lr"] {
            assert!(first.get(k).is_some(), "{k}");
        }
        assert!(out.join("step-2.ckpt.json").exists());
        let latest = Checkpoint::load(&out.join("wo_rg.ckpt.json")).unwrap();
        assert_eq!(latest.training.step, trainer.step_count());
        assert_eq!(latest.config.ablation, Ablation::WoRg);
    }
}
