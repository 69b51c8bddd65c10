use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use encdec::data::{
    make_synthetic_task_with, read_corpus, read_records, span_corruption_examples, synthetic_corpus, vocab::tokenize,
    SyntheticSpec, TaskExample, TaskTag,
};
use encdec::distill::{GenerationSource, KDConfig, KlDirection};
use encdec::eval::{eval_grid, GridCell, Metric};
use encdec::model::{build_model, Model, ModelConfig, ModelKind, Sampling};
use encdec::profile::{bench, ratios, write_sweep_csv, CostReport, CrossKvMode, Workload};
use encdec::train::{
    load_checkpoint, save_checkpoint, train, write_metrics_csv, KdSetup, Objective, StepRecord, TrainConfig,
    TrainOptions,
};

use crate::config::Config;
use crate::error::{io_err, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Pretrain,
    Finetune,
    Distill,
    Eval,
    Profile,
    Bench,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Profile => "profile",
            Command::Bench => "bench",
        }
    }
}

/// Sub-seeds drawn in a fixed order from the one run generator.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn from_run_seed(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: r.random(),
            data: r.random(),
            shuffle: r.random(),
            sampling: r.random(),
        }
    }
}

pub struct Run {
    pub cmd: Command,
    pub cfg: Config,
    pub out: PathBuf,
    pub seed: u64,
    pub seeds: Seeds,
    artifacts: Vec<String>,
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn require_file(key: &str, p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: file {} does not exist", p.display())))
    }
}

impl Run {
    pub fn new(cmd: Command, cfg: Config, out: PathBuf) -> Result<Self, CliError> {
        let seed = cfg.get("run.seed")?;
        Ok(Self {
            seed,
            seeds: Seeds::from_run_seed(seed),
            cmd,
            cfg,
            out,
            artifacts: Vec::new(),
        })
    }

    fn manifest(&self, status: &str) -> Value {
        let config: serde_json::Map<String, Value> =
            self.cfg.entries().map(|(k, v)| (k.to_string(), Value::String(v.to_string()))).collect();
        json!({
            "subcommand": self.cmd.as_str(),
            "config_hash": self.cfg.hash(self.cmd.as_str()),
            "seed": self.seed,
            "derived_seeds": {
                "init": self.seeds.init,
                "data": self.seeds.data,
                "shuffle": self.seeds.shuffle,
                "sampling": self.seeds.sampling,
            },
            "versions": {
                "encdec-cli": env!("CARGO_PKG_VERSION"),
                "encdec-core": encdec::VERSION,
            },
            "status": status,
            "artifacts": self.artifacts,
            "config": config,
        })
    }

    pub fn write_manifest(&self, status: &str) -> Result<(), CliError> {
        write_json(&self.out.join("manifest.json"), &self.manifest(status))
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out.join(name)
    }

    pub fn execute(&mut self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        self.check_inputs()?;
        self.write_manifest("started")?;
        match self.cmd {
            Command::Pretrain | Command::Finetune | Command::Distill => self.train()?,
            Command::Eval => self.eval()?,
            Command::Profile => self.profile()?,
            Command::Bench => self.bench()?,
        }
        self.write_manifest("ok")
    }

    /// Configured input files must exist before any work starts.
    fn check_inputs(&self) -> Result<(), CliError> {
        for key in ["init.checkpoint", "data.records", "data.corpus", "teacher.checkpoint"] {
            if let Some(p) = self.cfg.path(key) {
                require_file(key, p)?;
            }
        }
        if self.cmd == Command::Distill && self.cfg.path("teacher.checkpoint").is_none() {
            return Err(CliError::Config("distill needs teacher.checkpoint".into()));
        }
        Ok(())
    }

    // ---- builders ----------------------------------------------------------

    fn model_config(&self) -> Result<ModelConfig, CliError> {
        let c = &self.cfg;
        let kind: ModelKind = c.get("model.kind")?;
        let dec: usize = c.get("model.n_dec_layers")?;
        let mut m = match kind {
            ModelKind::EncoderDecoder => ModelConfig::encoder_decoder(c.get("model.n_enc_layers")?, dec),
            ModelKind::DecoderOnly => ModelConfig::decoder_only(dec),
        }
        .with_dims(c.get("model.d_model")?, c.get("model.n_heads")?, c.get("model.n_kv_heads")?);
        let ff: usize = c.get("model.d_ff")?;
        if ff > 0 {
            m.d_ff = ff;
        }
        m.vocab_size = c.get("model.vocab_size")?;
        m.rope_base = c.get("model.rope_base")?;
        m.ntk_train_len = c.get("model.ntk_train_len")?;
        m.max_dec_len = c.get("model.max_dec_len")?;
        if kind == ModelKind::EncoderDecoder {
            m.max_enc_len = c.get("model.max_enc_len")?;
        }
        m.validate()?;
        Ok(m)
    }

    fn pair_configs(&self) -> Result<(ModelConfig, ModelConfig), CliError> {
        let c = &self.cfg;
        let dims = |m: ModelConfig| -> Result<ModelConfig, CliError> {
            let mut m = m.with_dims(c.get("pair.d_model")?, c.get("pair.n_heads")?, c.get("pair.n_kv_heads")?);
            m.vocab_size = c.get("pair.vocab_size")?;
            m.validate()?;
            Ok(m)
        };
        let ed = dims(ModelConfig::encoder_decoder(c.get("pair.n_enc_layers")?, c.get("pair.n_dec_layers")?))?;
        let dd = dims(ModelConfig::decoder_only(c.get("pair.deconly_layers")?))?;
        Ok((ed, dd))
    }

    fn train_config(&self, objective: Objective) -> Result<TrainConfig, CliError> {
        let c = &self.cfg;
        let t = TrainConfig {
            peak_lr: c.get("train.peak_lr")?,
            warmup_steps: c.get("train.warmup_steps")?,
            total_steps: c.get("train.total_steps")?,
            batch_size: c.get("train.batch_size")?,
            grad_accum_steps: c.get("train.grad_accum_steps")?,
            seed: self.seeds.shuffle,
            objective,
            weight_decay: c.get("train.weight_decay")?,
        };
        t.validate()?;
        Ok(t)
    }

    fn kd_config(&self) -> Result<KDConfig, CliError> {
        let c = &self.cfg;
        let st: f64 = c.get("kd.sampling_temperature")?;
        let k = KDConfig {
            temperature: c.get("kd.temperature")?,
            alpha: c.get("kd.alpha")?,
            kl_direction: c.get::<KlDirection>("kd.kl_direction")?,
            generation_source: c.get::<GenerationSource>("kd.generation_source")?,
            max_gen_len: c.get("kd.max_gen_len")?,
            sampling: (st > 0.0).then_some(Sampling {
                temperature: st,
                seed: self.seeds.sampling,
            }),
        };
        k.validate()?;
        Ok(k)
    }

    fn spec(&self) -> Result<SyntheticSpec, CliError> {
        Ok(SyntheticSpec {
            min_len: self.cfg.get("data.min_len")?,
            max_len: self.cfg.get("data.max_len")?,
            alphabet: self.cfg.get("data.alphabet")?,
        })
    }

    fn task_data(&self, task: TaskTag, n: usize, seed: u64) -> Result<Vec<TaskExample>, CliError> {
        make_synthetic_task_with(task, n, seed, self.spec()?).map_err(|e| CliError::Config(e.to_string()))
    }

    fn records(&self, p: &Path) -> Result<Vec<TaskExample>, CliError> {
        let f = File::open(p).map_err(|e| io_err(p, e))?;
        let data = read_records(BufReader::new(f))
            .map_err(|e| CliError::Config(format!("data.records {}: {e}", p.display())))?;
        if data.is_empty() {
            return Err(CliError::Config(format!("data.records {} holds no examples", p.display())));
        }
        Ok(data)
    }

    fn pretrain_data(&self) -> Result<Vec<TaskExample>, CliError> {
        let c = &self.cfg;
        let docs = match c.path("data.corpus") {
            Some(p) => read_corpus(p)?,
            None => synthetic_corpus(c.get("data.n_docs")?, c.get("data.doc_len")?, self.seeds.data)
                .iter()
                .map(|d| tokenize(d.as_bytes()))
                .collect(),
        };
        Ok(span_corruption_examples(
            &docs,
            c.get("data.chunk_len")?,
            c.get("data.noise_ratio")?,
            c.get("data.span_len")?,
            self.seeds.data,
        )?)
    }

    /// The configured model, or the one stored at `init.checkpoint`.
    fn initial_model(&self) -> Result<(Model, Option<encdec::train::TrainState>), CliError> {
        match self.cfg.path("init.checkpoint") {
            Some(p) => {
                let ck = load_checkpoint(p)?;
                log::info!("initialized from {} (model.* keys ignored)", p.display());
                let state = if self.cfg.get::<bool>("init.resume")? { ck.state } else { None };
                Ok((ck.model, state))
            }
            None => Ok((build_model(&self.model_config()?, self.seeds.init)?, None)),
        }
    }

    // ---- subcommands -------------------------------------------------------

    fn train(&mut self) -> Result<(), CliError> {
        let objective = match self.cmd {
            Command::Pretrain => Objective::SpanCorruption,
            Command::Finetune => Objective::Seq2Seq,
            _ => Objective::Kd,
        };
        let tcfg = self.train_config(objective)?;
        let kd_cfg = (objective == Objective::Kd).then(|| self.kd_config()).transpose()?;
        let data = match (objective, self.cfg.path("data.records")) {
            (_, Some(p)) => self.records(p)?,
            (Objective::SpanCorruption, None) => self.pretrain_data()?,
            _ => self.task_data(self.cfg.get("data.task")?, self.cfg.get("data.n_train")?, self.seeds.data)?,
        };
        let (mut model, resume) = self.initial_model()?;
        let teacher = match self.cfg.path("teacher.checkpoint") {
            Some(p) if objective == Objective::Kd => Some(load_checkpoint(p)?.model),
            _ => None,
        };
        let setup = match (&teacher, kd_cfg) {
            (Some(t), Some(config)) => Some(KdSetup { teacher: t, config }),
            _ => None,
        };
        log::info!(
            "{}: {} params, {} examples, {} steps",
            self.cmd.as_str(),
            model.num_params(),
            data.len(),
            tcfg.total_steps
        );
        let (records, state) = train(
            &mut model,
            &data,
            &tcfg,
            setup.as_ref(),
            TrainOptions {
                resume,
                stop_at: None,
            },
        )?;
        let ckpt = self.artifact("model.ckpt");
        save_checkpoint(&ckpt, &model, Some(&tcfg), Some(&state))?;
        let metrics = self.artifact("metrics.csv");
        write_metrics_csv(&metrics, &records)?;
        let summary = self.artifact("summary.json");
        write_json(&summary, &train_summary(&records, &model))?;
        if let Some(last) = records.last() {
            println!("{} done: {} steps, final loss {:.6}", self.cmd.as_str(), last.step, last.loss);
        }
        Ok(())
    }

    fn eval(&mut self) -> Result<(), CliError> {
        let metric = match self.cfg.str("eval.metric") {
            "rouge_l" => Metric::RougeL,
            "perplexity" => Metric::Perplexity,
            o => return Err(CliError::Config(format!("eval.metric = `{o}`: expected rouge_l or perplexity"))),
        };
        let mut models: Vec<(String, Model)> = Vec::new();
        for entry in self.cfg.list::<String>("eval.checkpoints")? {
            let (label, path) = entry
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("eval.checkpoints entry `{entry}` is not label:path")))?;
            let p = Path::new(path);
            require_file("eval.checkpoints", p)?;
            models.push((label.to_string(), load_checkpoint(p)?.model));
        }
        if models.is_empty() {
            let (m, _) = self.initial_model()?;
            models.push((m.config().kind.as_str().to_string(), m));
        }
        let records = self.cfg.path("data.records").map(|p| self.records(p)).transpose()?;
        let n: usize = self.cfg.get("data.n_eval")?;
        let mut sets: Vec<(String, u64, Vec<TaskExample>)> = Vec::new();
        for seed in self.cfg.list::<u64>("eval.seeds")? {
            match &records {
                Some(r) => sets.push(("records".into(), seed, r.clone())),
                None => {
                    for task in self.cfg.list::<TaskTag>("eval.tasks")? {
                        let s = self.seeds.data ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                        sets.push((task.to_string(), seed, self.task_data(task, n, s)?));
                    }
                }
            }
        }
        if sets.is_empty() {
            return Err(CliError::Config("eval.tasks and eval.seeds must be non-empty".into()));
        }
        let cells: Vec<GridCell> = models
            .iter()
            .flat_map(|(label, m)| {
                sets.iter().map(move |(task, seed, ex)| GridCell {
                    model_label: label.clone(),
                    task_label: task.clone(),
                    seed: *seed,
                    model: m,
                    examples: ex,
                })
            })
            .collect();
        let res = eval_grid(&cells, metric)?;
        let p = self.artifact("eval.csv");
        res.write_csv(File::create(&p).map_err(|e| io_err(&p, e))?)?;
        let p = self.artifact("eval_raw.csv");
        res.write_raw_csv(File::create(&p).map_err(|e| io_err(&p, e))?)?;
        let table = res.text_table();
        let p = self.artifact("eval.txt");
        fs::write(&p, &table).map_err(|e| io_err(&p, e))?;
        print!("{table}");
        Ok(())
    }

    fn workload(&self, input_len: usize, output_len: usize) -> Result<Workload, CliError> {
        Ok(Workload {
            input_len,
            output_len,
            batch_size: self.cfg.get("profile.batch_size")?,
            element_bytes: self.cfg.get("profile.element_bytes")?,
        })
    }

    fn profile(&mut self) -> Result<(), CliError> {
        let (ed, dd) = self.pair_configs()?;
        let lens: Vec<usize> = self.cfg.list("profile.input_lens")?;
        if lens.is_empty() {
            return Err(CliError::Config("profile.input_lens is empty".into()));
        }
        let mode = match self.cfg.str("profile.cross_kv") {
            "precomputed" => CrossKvMode::Precomputed,
            "recompute" => CrossKvMode::Recompute,
            o => return Err(CliError::Config(format!("profile.cross_kv = `{o}`: expected precomputed or recompute"))),
        };
        let base = self.workload(0, self.cfg.get("profile.output_len")?)?;
        let p = self.artifact("sweep.csv");
        let f = BufWriter::new(File::create(&p).map_err(|e| io_err(&p, e))?);
        write_sweep_csv(f, &ed, &dd, &lens, &base)?;
        let mut reports = Vec::new();
        for &x in &lens {
            let w = Workload { input_len: x, ..base };
            let a = CostReport::analytic("encoder_decoder", &ed, &w, mode);
            let b = CostReport::analytic("decoder_only", &dd, &w, mode);
            let (ri, rt, rm) = ratios(&a, &b);
            println!("x={x:>6} inference {ri:.3} train {rt:.3} memory {rm:.3}");
            reports.push(json!({
                "input_len": x,
                "encoder_decoder": a,
                "decoder_only": b,
                "inference_ratio": ri,
                "train_ratio": rt,
                "memory_ratio": rm,
            }));
        }
        let p = self.artifact("reports.json");
        write_json(&p, &Value::Array(reports))
    }

    fn bench(&mut self) -> Result<(), CliError> {
        let (ed, dd) = self.pair_configs()?;
        let x: usize = self.cfg.get("bench.input_len")?;
        let y: usize = self.cfg.get("bench.output_len")?;
        let trials: usize = self.cfg.get("bench.trials")?;
        let a: Model = build_model(&fit(ed, x, y), self.seeds.init)?;
        let b: Model = build_model(&fit(dd, x, y), self.seeds.init)?;
        log::info!("bench: {} vs {} params, {x}/{y}, {trials} trials", a.num_params(), b.num_params());
        let w = Workload::new(x, y);
        let (ra, rb) = bench(&a, &b, &w, trials)?;
        let ftl = ra.first_token_ms.unwrap_or(f64::NAN) / rb.first_token_ms.unwrap_or(f64::NAN);
        let tps = ra.tokens_per_s.unwrap_or(f64::NAN) / rb.tokens_per_s.unwrap_or(f64::NAN);
        println!(
            "first token ms: encdec {:.2} deconly {:.2}; tokens/s: encdec {:.1} deconly {:.1}",
            ra.first_token_ms.unwrap_or(f64::NAN),
            rb.first_token_ms.unwrap_or(f64::NAN),
            ra.tokens_per_s.unwrap_or(f64::NAN),
            rb.tokens_per_s.unwrap_or(f64::NAN)
        );
        let p = self.artifact("bench.json");
        write_json(
            &p,
            &json!({
                "encoder_decoder": ra,
                "decoder_only": rb,
                "first_token_ratio": ftl,
                "tokens_per_s_ratio": tps,
                "trials": trials,
            }),
        )
    }
}

/// Stretches a config's context to hold an `x`/`y` workload.
fn fit(mut c: ModelConfig, x: usize, y: usize) -> ModelConfig {
    match c.kind {
        ModelKind::EncoderDecoder => {
            c.max_enc_len = c.max_enc_len.max(x);
            c.max_dec_len = c.max_dec_len.max(y + 1);
        }
        ModelKind::DecoderOnly => c.max_dec_len = c.max_dec_len.max(x + y),
    }
    c
}

fn train_summary(records: &[StepRecord], model: &Model) -> Value {
    json!({
        "steps": records.last().map(|r| r.step),
        "first_loss": records.first().map(|r| r.loss),
        "final_loss": records.last().map(|r| r.loss),
        "num_params": model.num_params(),
        "kind": model.config().kind.as_str(),
    })
}
