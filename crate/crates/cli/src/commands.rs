use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use germ_core::checkpoint::write_atomic;
use germ_core::data::corpus::{gen_corpus, gen_motif_task, read_corpus, read_task, write_corpus, write_task};
use germ_core::lora::{
    check_nonsingularity, construct_adapters, functionality_gap, random_formal_model, verify_theorem,
};
use germ_core::metrics::collect_report;
use germ_core::model::ProbeKind;
use germ_core::quant::{calibrate, logit_deviation, quantize_model, BitPair};
use germ_core::training::finetune::{encode_task, finetune_classifier, FinetuneConfig};
use germ_core::training::{continue_training, encode_corpus, loss_trace_csv, pretrain, surgery, TrainConfig};
use germ_core::{AttentionVariant, Checkpoint, CorpusSpec, Dtype, Model, ModelConfig, QuantSpec, Rng, Vocab};

use crate::manifest::{sibling, Recorder};
use crate::{CliError, Command, TokenizerCommand};

type Res<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Res<T> {
    Err(CliError::Usage(msg.into()))
}

fn require_file(p: &Path) -> Res {
    if !p.is_file() {
        return Err(CliError::Io(format!("{}: no such file", p.display())));
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Res<T> {
    require_file(p)?;
    let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Res {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_atomic(p, text.as_bytes())?;
    Ok(())
}

fn ensure_dir(p: &Path) -> Res {
    fs::create_dir_all(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

/// `GERM_SEED`, when set, replaces every seed a command would use.
fn seed_override() -> Res<Option<u64>> {
    match std::env::var("GERM_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .or_else(|_| usage(format!("GERM_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(default: u64) -> Res<u64> {
    Ok(seed_override()?.unwrap_or(default))
}

fn load_checkpoint(p: &Path) -> Res<Checkpoint> {
    require_file(p)?;
    Ok(Checkpoint::load(p)?)
}

fn vocab_of(ckpt: &Checkpoint) -> Res<Vocab> {
    let v = ckpt
        .meta
        .get("vocab")
        .ok_or_else(|| CliError::Domain("checkpoint carries no vocabulary".into()))?;
    Ok(Vocab::from_json(&v.to_string())?)
}

fn vocab_value(v: &Vocab) -> Value {
    serde_json::from_str(&v.to_json()).expect("vocab json is valid")
}

fn load_sample(path: &Path, vocab: &Vocab, max_len: usize, cap: usize) -> Res<Vec<Vec<usize>>> {
    require_file(path)?;
    let mut seqs = read_corpus(path)?;
    seqs.truncate(cap);
    if seqs.is_empty() {
        return Err(CliError::Domain(format!("{}: empty corpus", path.display())));
    }
    Ok(encode_corpus(vocab, &seqs, max_len)?)
}

pub fn run(cmd: Command) -> Res {
    match cmd {
        Command::GenCorpus(a) => {
            let mut rec = Recorder::new("gen-corpus");
            let mut spec: CorpusSpec = match &a.spec {
                Some(p) => {
                    rec.input(p);
                    read_json(p)?
                }
                None => CorpusSpec::default(),
            };
            spec.seed = resolve_seed(spec.seed)?;
            spec.validate()?;
            let seqs = gen_corpus(&spec)?;
            write_corpus(&a.out, &seqs)?;
            rec.output(&a.out);
            rec.seed = Some(spec.seed);
            rec.config = json!(spec);
            println!("wrote {} sequences to {}", seqs.len(), a.out.display());
            rec.finish(&sibling(&a.out, "manifest.json"))
        }
        Command::GenTask(a) => {
            let mut rec = Recorder::new("gen-task");
            let seed = resolve_seed(a.seed)?;
            let rows = gen_motif_task(&a.motif, a.n, a.min_len, a.max_len, seed)?;
            write_task(&a.out, &rows)?;
            rec.output(&a.out);
            rec.seed = Some(seed);
            rec.config = json!({"motif": a.motif, "n": a.n, "min_len": a.min_len, "max_len": a.max_len});
            println!("wrote {} labelled sequences to {}", rows.len(), a.out.display());
            rec.finish(&sibling(&a.out, "manifest.json"))
        }
        Command::Tokenizer { action } => tokenizer(action),
        Command::Pretrain(a) => {
            #[derive(Deserialize, Default)]
            #[serde(default)]
            struct PretrainFile {
                model: Option<ModelConfig>,
                train: TrainConfig,
            }
            let mut rec = Recorder::new("pretrain");
            let file: PretrainFile = match &a.config {
                Some(p) => {
                    rec.input(p);
                    read_json(p)?
                }
                None => PretrainFile::default(),
            };
            let mut model_cfg = file.model.unwrap_or_else(|| ModelConfig::toy(AttentionVariant::Softmax1));
            match a.variant.as_deref() {
                Some("softmax") => model_cfg.variant = AttentionVariant::VanillaSoftmax,
                Some("softmax1") => model_cfg.variant = AttentionVariant::Softmax1,
                _ => {}
            }
            model_cfg.validate()?;
            let mut train = file.train;
            train.seed = resolve_seed(train.seed)?;
            train.validate()?;
            require_file(&a.corpus)?;
            rec.input(&a.corpus);
            let seqs = read_corpus(&a.corpus)?;
            let vocab = match &a.vocab {
                Some(p) => {
                    require_file(p)?;
                    rec.input(p);
                    Vocab::load(p)?
                }
                None => Vocab::train(&seqs, model_cfg.vocab_size)?,
            };
            if vocab.len() > model_cfg.vocab_size {
                return usage(format!(
                    "vocabulary has {} tokens but model vocab_size is {}",
                    vocab.len(),
                    model_cfg.vocab_size
                ));
            }
            let ids = encode_corpus(&vocab, &seqs, model_cfg.max_seq_len)?;
            let out = pretrain(&train, &ids, &model_cfg)?;
            let mut ckpt = out.to_checkpoint();
            ckpt.meta.insert("vocab".into(), vocab_value(&vocab));
            ckpt.meta.insert("train".into(), json!(train));
            ckpt.save(&a.out)?;
            let trace = sibling(&a.out, "loss.csv");
            write_atomic(&trace, loss_trace_csv(&out.loss_trace).as_bytes())?;
            rec.output(&a.out);
            rec.output(&trace);
            rec.seed = Some(train.seed);
            rec.config = json!({"model": model_cfg, "train": train});
            println!(
                "trained {} steps; smoothed loss {:.4} -> {:.4}",
                out.step,
                out.smoothed_initial_loss(50),
                out.smoothed_final_loss(50)
            );
            rec.finish(&sibling(&a.out, "manifest.json"))
        }
        Command::Surgery(a) => {
            let mut rec = Recorder::new("surgery");
            if !(0.0..=1.0).contains(&a.steps_frac) {
                return usage("--steps-frac must lie in [0, 1]");
            }
            if a.steps_frac > 0.0 && a.corpus.is_none() {
                return usage("--corpus is required when --steps-frac > 0");
            }
            let ckpt = load_checkpoint(&a.input)?;
            rec.input(&a.input);
            let mut after = surgery(&ckpt)?;
            let mut config = json!({"steps_frac": a.steps_frac});
            if a.steps_frac > 0.0 {
                let corpus = a.corpus.as_ref().expect("checked above");
                require_file(corpus)?;
                rec.input(corpus);
                let base: TrainConfig = match ckpt.meta.get("train") {
                    Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::Domain(e.to_string()))?,
                    None => TrainConfig::default(),
                };
                let mut cont = base.continuation(a.steps_frac);
                cont.seed = resolve_seed(cont.seed)?;
                let vocab = vocab_of(&ckpt)?;
                let model = Model::from_checkpoint(&after)?;
                let ids = encode_corpus(&vocab, &read_corpus(corpus)?, model.config.max_seq_len)?;
                let out = continue_training(model, ckpt.step, &ids, &cont)?;
                let meta = after.meta.clone();
                after = out.to_checkpoint();
                after.meta = meta;
                after.dtype = ckpt.dtype;
                let trace = sibling(&a.out, "loss.csv");
                write_atomic(&trace, loss_trace_csv(&out.loss_trace).as_bytes())?;
                rec.output(&trace);
                rec.seed = Some(cont.seed);
                config["continuation"] = json!(cont);
                println!("continued {} steps after surgery", cont.steps);
            }
            after.save(&a.out)?;
            rec.output(&a.out);
            rec.config = config;
            rec.finish(&sibling(&a.out, "manifest.json"))
        }
        Command::Finetune(a) => {
            let mut rec = Recorder::new("finetune");
            let mut cfg = FinetuneConfig {
                mode: a.mode.parse()?,
                rank: a.rank,
                alpha: a.alpha,
                ..FinetuneConfig::default()
            };
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            cfg.seed = resolve_seed(a.seed.unwrap_or(cfg.seed))?;
            cfg.validate()?;
            let ckpt = load_checkpoint(&a.input)?;
            require_file(&a.task)?;
            rec.input(&a.input);
            rec.input(&a.task);
            let model = Model::from_checkpoint(&ckpt)?;
            let vocab = vocab_of(&ckpt)?;
            let rows = encode_task(&vocab, &read_task(&a.task)?, model.config.max_seq_len)?;
            let out = finetune_classifier(&model, &rows, &cfg)?;
            ensure_dir(&a.out)?;
            let report = a.out.join("report.json");
            write_json(&report, &out.report)?;
            let mut head = Checkpoint::new_adapters(out.head.to_named());
            head.dtype = ckpt.dtype;
            head.meta.insert("head".into(), json!({"pooling": "mean", "classes": 2}));
            let head_path = a.out.join("head.ckpt");
            head.save(&head_path)?;
            rec.output(&report);
            rec.output(&head_path);
            if let Some(set) = &out.adapters {
                let p = a.out.join("adapters.ckpt");
                let mut ad = set.to_checkpoint();
                ad.dtype = ckpt.dtype;
                ad.save(&p)?;
                rec.output(&p);
            }
            if cfg.mode == germ_core::training::FinetuneMode::Full {
                let p = a.out.join("model.ckpt");
                let mut m = out.model.to_checkpoint();
                m.meta = ckpt.meta.clone();
                m.step = ckpt.step;
                m.dtype = ckpt.dtype;
                m.save(&p)?;
                rec.output(&p);
            }
            let trace = a.out.join("loss.csv");
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.loss_trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_atomic(&trace, csv.as_bytes())?;
            rec.output(&trace);
            rec.seed = Some(cfg.seed);
            rec.config = json!(cfg);
            println!("{} fine-tuning: MCC {:.4} on {} held-out rows", cfg.mode, out.report.mcc, out.report.n_eval);
            rec.finish(&a.out.join("manifest.json"))
        }
        Command::Quantize(a) => {
            let mut rec = Recorder::new("quantize");
            let bits: BitPair = a.bits.parse().map_err(CliError::Usage)?;
            let spec = match a.method.as_str() {
                "smoothquant" => QuantSpec::smoothquant(bits.weight_bits, bits.act_bits, a.alpha),
                _ => QuantSpec::traditional(bits.weight_bits, bits.act_bits),
            };
            spec.validate()?;
            let ckpt = load_checkpoint(&a.input)?;
            rec.input(&a.input);
            let model = Model::from_checkpoint(&ckpt)?;
            let vocab = vocab_of(&ckpt)?;
            rec.input(&a.calib);
            let calib = load_sample(&a.calib, &vocab, model.config.max_seq_len, a.max_sequences)?;
            let sample = match &a.sample {
                Some(p) => {
                    rec.input(p);
                    load_sample(p, &vocab, model.config.max_seq_len, a.max_sequences)?
                }
                None => calib.clone(),
            };
            let stats = calibrate(&model, &calib)?;
            let q = quantize_model(&model, &spec, &stats)?;
            let dev = logit_deviation(&model, &q, &sample)?;
            let report = json!({
                "bits": bits.to_string(),
                "method": a.method,
                "spec": spec,
                "n_calibration": calib.len(),
                "n_sample": sample.len(),
                "deviation": dev,
            });
            write_json(&a.report, &report)?;
            rec.output(&a.report);
            rec.config = json!({"spec": spec, "max_sequences": a.max_sequences});
            println!("{} {}: mean |Δlogit| {:.6}, max {:.6}", bits, a.method, dev.mean_abs, dev.max_abs);
            rec.finish(&sibling(&a.report, "manifest.json"))
        }
        Command::Diagnose(a) => {
            let mut rec = Recorder::new("diagnose");
            let ckpt = load_checkpoint(&a.input)?;
            rec.input(&a.input);
            rec.input(&a.sample);
            let model = Model::from_checkpoint(&ckpt)?;
            let vocab = vocab_of(&ckpt)?;
            let sample = load_sample(&a.sample, &vocab, model.config.max_seq_len, a.max_sequences)?;
            let id = a.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = collect_report(&model, &sample, &id)?;
            write_json(&a.report, &report)?;
            rec.output(&a.report);
            let csv = sibling(&a.report, "csv");
            write_atomic(&csv, report.to_csv().as_bytes())?;
            rec.output(&csv);
            if a.dump > 0 {
                let dir = sibling(&a.report, "attention");
                ensure_dir(&dir)?;
                for (s, seq) in sample.iter().take(a.dump).enumerate() {
                    let out = model.forward(seq)?;
                    for probe in out.trace.probes.iter().filter(|p| p.kind == ProbeKind::AttentionProbs) {
                        let shape = probe.tensor.shape();
                        let (heads, n) = (shape[0], shape[1]);
                        for h in 0..heads {
                            let block = &probe.tensor.data()[h * n * n..(h + 1) * n * n];
                            let mut text = String::new();
                            for row in block.chunks(n) {
                                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                                text.push_str(&cells.join(","));
                                text.push('\n');
                            }
                            let p = dir.join(format!("seq{s}_layer{}_head{h}.csv", probe.layer));
                            write_atomic(&p, text.as_bytes())?;
                            rec.output(&p);
                        }
                    }
                }
            }
            rec.config = json!({"max_sequences": a.max_sequences, "dump": a.dump});
            println!(
                "avg kurtosis {}, max inf-norm {:.4}",
                report.avg_kurtosis.map(|k| format!("{k:.4}")).unwrap_or_else(|| "n/a".into()),
                report.max_inf_norm
            );
            rec.finish(&sibling(&a.report, "manifest.json"))
        }
        Command::TheoremCheck(a) => {
            let mut rec = Recorder::new("theorem-check");
            if a.trials == 0 || a.tokens == 0 {
                return usage("--trials and --tokens must be positive");
            }
            let frozen = Model::from_checkpoint(&load_checkpoint(&a.frozen)?)?;
            let target = Model::from_checkpoint(&load_checkpoint(&a.target)?)?;
            rec.input(&a.frozen);
            rec.input(&a.target);
            let seed = resolve_seed(a.seed)?;
            let gap = functionality_gap(&frozen, &target)?;
            let ns = check_nonsingularity(&frozen, &target, a.rank)?;
            let failures: Vec<&str> = ns.failures().map(|c| c.name.as_str()).collect();
            let mut report = json!({
                "rank": a.rank,
                "required_rank": gap.required_rank(),
                "gap": gap.blocks,
                "output_gap": gap.output,
                "nonsingularity_passed": ns.passed(),
                "nonsingularity_failures": failures,
            });
            let result = construct_adapters(&frozen, &target, a.rank).and_then(|set| {
                verify_theorem(&frozen, &target, &set, a.trials, a.tokens, &mut Rng::new(seed))
            });
            let outcome = match result {
                Ok(check) => {
                    report["max_deviation"] = json!(check.max_deviation);
                    report["max_logit_deviation"] = json!(check.max_logit_deviation);
                    report["trials"] = json!(check.trials);
                    println!("max deviation {:.3e} over {} trials", check.max_deviation, check.trials);
                    Ok(())
                }
                Err(e) => {
                    report["error"] = json!(e.to_string());
                    Err(CliError::from(e))
                }
            };
            write_json(&a.report, &report)?;
            rec.output(&a.report);
            rec.seed = Some(seed);
            rec.config = json!({"rank": a.rank, "trials": a.trials, "tokens": a.tokens});
            rec.finish(&sibling(&a.report, "manifest.json"))?;
            outcome
        }
        Command::TheoremPair(a) => {
            let mut rec = Recorder::new("theorem-pair");
            let seed = resolve_seed(a.seed)?;
            let root = Rng::new(seed);
            let frozen = random_formal_model(a.layers, a.heads, a.dim, a.max_seq_len, &mut root.fork(0))?;
            let target = random_formal_model(a.layers, a.heads, a.dim, a.max_seq_len, &mut root.fork(1))?;
            for (m, p) in [(&frozen, &a.frozen), (&target, &a.target)] {
                let mut ckpt = m.to_checkpoint();
                // Theorem checks need tolerances far below f32 rounding.
                ckpt.dtype = Dtype::F64;
                ckpt.save(p)?;
                rec.output(p);
            }
            rec.seed = Some(seed);
            rec.config = json!({"layers": a.layers, "heads": a.heads, "dim": a.dim, "max_seq_len": a.max_seq_len});
            rec.finish(&sibling(&a.target, "manifest.json"))
        }
    }
}

fn tokenizer(action: TokenizerCommand) -> Res {
    match action {
        TokenizerCommand::Train { corpus, vocab, size } => {
            let mut rec = Recorder::new("tokenizer-train");
            require_file(&corpus)?;
            rec.input(&corpus);
            let v = Vocab::train(&read_corpus(&corpus)?, size)?;
            v.save(&vocab)?;
            rec.output(&vocab);
            rec.config = json!({"size": size});
            println!("vocabulary of {} tokens ({} merges)", v.len(), v.merges().len());
            rec.finish(&sibling(&vocab, "manifest.json"))
        }
        TokenizerCommand::Encode { vocab, input, out } => {
            let mut rec = Recorder::new("tokenizer-encode");
            require_file(&vocab)?;
            require_file(&input)?;
            rec.input(&vocab);
            rec.input(&input);
            let v = Vocab::load(&vocab)?;
            let mut text = String::new();
            for seq in read_corpus(&input)? {
                let ids: Vec<String> = v.encode(&seq)?.iter().map(usize::to_string).collect();
                text.push_str(&ids.join(" "));
                text.push('\n');
            }
            write_atomic(&out, text.as_bytes())?;
            rec.output(&out);
            rec.finish(&sibling(&out, "manifest.json"))
        }
    }
}
