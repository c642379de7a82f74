//! Command-line surface: synthetic data generation, training, evaluation,
//! the ablation grid, and attention-matrix export.
//!
//! Configuration comes from a flat `key=value` file; any flag of the form
//! `--key value` overrides the file. Every failure exits nonzero with a
//! single-line diagnostic on stderr.

use std::process::ExitCode;

use hyperform_core::fusion::{PoolMethod, Variant};
use hyperform_core::skeleton::{load_jsonl, save_jsonl, synth_dataset};
use hyperform_core::train::{
    ablation_report, evaluate, export_attention, load_checkpoint, save_checkpoint,
    split_train_eval, train, TrainConfig,
};

const USAGE: &str = "usage:
  hyperform synth --classes K --per-class N --joints J --frames F --seed S --out data.jsonl
  hyperform train --data PATH --out model.ckpt [--config cfg.kv] [--KEY VALUE ...]
  hyperform eval --data PATH --model model.ckpt [--torso-index I]
  hyperform ablate --data PATH --out report.csv [--config cfg.kv] [--seeds N] [--pools a,b]
                   [--variants v1,v2] [--eval PATH] [--KEY VALUE ...]
  hyperform inspect --model model.ckpt --data PATH --index I --token T --out BASE

config keys double as train/ablate flags (--lr0 0.05, --variant two_branch, --pool rank, ...)
tokens: channel_only | channel_edge | order_channel_joint | channel_block";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

/// Ordered `--key value` pairs after the subcommand.
struct Flags {
    pairs: Vec<(String, String)>,
    used: Vec<bool>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, String> {
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| format!("expected --flag, got '{arg}'"))?;
            let value = it.next().ok_or_else(|| format!("flag --{key} needs a value"))?;
            pairs.push((key.replace('-', "_"), value.clone()));
        }
        let used = vec![false; pairs.len()];
        Ok(Flags { pairs, used })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            if k == key && !self.used[i] {
                self.used[i] = true;
                return Some(v.clone());
            }
        }
        None
    }

    fn require(&mut self, key: &str) -> Result<String, String> {
        self.take(key).ok_or_else(|| format!("missing required flag --{key}"))
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, String> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("bad value '{v}' for --{key}")),
        }
    }

    /// Hand the remaining flags to the training config as overrides.
    fn drain_into_config(&mut self, cfg: &mut TrainConfig) -> Result<(), String> {
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            if !self.used[i] {
                cfg.set(k, v).map_err(|e| e.to_string())?;
                self.used[i] = true;
            }
        }
        Ok(())
    }

    fn reject_unused(&self) -> Result<(), String> {
        for (i, (k, _)) in self.pairs.iter().enumerate() {
            if !self.used[i] {
                return Err(format!("unknown flag --{k}"));
            }
        }
        Ok(())
    }
}

fn load_config(flags: &mut Flags) -> Result<TrainConfig, String> {
    match flags.take("config") {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("cannot read config '{path}': {e}"))?;
            TrainConfig::from_kv_text(&text).map_err(|e| format!("config '{path}': {e}"))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn run(args: &[String]) -> Result<(), String> {
    let Some(command) = args.first() else {
        return Err(format!("no command given\n{USAGE}"));
    };
    let mut flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "synth" => {
            let classes: usize =
                flags.parsed("classes")?.ok_or("missing required flag --classes")?;
            let per_class: usize =
                flags.parsed("per_class")?.ok_or("missing required flag --per-class")?;
            let joints: usize = flags.parsed("joints")?.unwrap_or(10);
            let frames: usize = flags.parsed("frames")?.unwrap_or(40);
            let seed: u64 = flags.parsed("seed")?.unwrap_or(0);
            let out = flags.require("out")?;
            flags.reject_unused()?;
            let data = synth_dataset(classes, per_class, joints, frames, seed)
                .map_err(|e| e.to_string())?;
            save_jsonl(&out, &data).map_err(|e| e.to_string())?;
            println!("wrote {} sequences to {}", data.len(), out);
            Ok(())
        }
        "train" => {
            let data_path = flags.require("data")?;
            let out = flags.require("out")?;
            let mut cfg = load_config(&mut flags)?;
            flags.drain_into_config(&mut cfg)?;
            let data = load_jsonl(&data_path, cfg.torso_index).map_err(|e| e.to_string())?;
            let outcome = train(&data, &cfg).map_err(|e| e.to_string())?;
            save_checkpoint(&outcome.model, &out).map_err(|e| e.to_string())?;
            for h in &outcome.history {
                println!(
                    "epoch {:>3}  lr {:<9} loss {:.6}  top1 {:.4}",
                    h.epoch, h.lr, h.train_loss, h.train_top1
                );
            }
            println!("saved checkpoint to {out}");
            Ok(())
        }
        "eval" => {
            let data_path = flags.require("data")?;
            let model_path = flags.require("model")?;
            let torso: usize = flags.parsed("torso_index")?.unwrap_or(0);
            flags.reject_unused()?;
            let model = load_checkpoint(&model_path).map_err(|e| e.to_string())?;
            let data = load_jsonl(&data_path, torso).map_err(|e| e.to_string())?;
            let metrics = evaluate(&model, &data).map_err(|e| e.to_string())?;
            println!(
                "top1 {:.6}\ntop5 {:.6}\nloss {:.6}",
                metrics.top1, metrics.top5, metrics.loss
            );
            Ok(())
        }
        "ablate" => {
            let data_path = flags.require("data")?;
            let out = flags.require("out")?;
            let seeds: u64 = flags.parsed("seeds")?.unwrap_or(5);
            let pools_arg = flags.take("pools");
            let variants_arg = flags.take("variants");
            let eval_path = flags.take("eval");
            let mut cfg = load_config(&mut flags)?;
            flags.drain_into_config(&mut cfg)?;
            let data = load_jsonl(&data_path, cfg.torso_index).map_err(|e| e.to_string())?;
            let (train_set, eval_set) = match eval_path {
                Some(p) => {
                    let eval_set = load_jsonl(&p, cfg.torso_index).map_err(|e| e.to_string())?;
                    (data, eval_set)
                }
                None => split_train_eval(&data),
            };
            let pools: Vec<PoolMethod> = match pools_arg {
                Some(list) => list
                    .split(',')
                    .map(|p| PoolMethod::parse(p.trim()).map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?,
                None => vec![cfg.pool],
            };
            let variants: Vec<Variant> = match variants_arg {
                Some(list) => list
                    .split(',')
                    .map(|v| Variant::parse(v.trim()).map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?,
                None => Variant::all().to_vec(),
            };
            let seed_list: Vec<u64> = (0..seeds).collect();
            let csv = ablation_report(&train_set, &eval_set, &cfg, &variants, &pools, &seed_list)
                .map_err(|e| e.to_string())?;
            std::fs::write(&out, &csv).map_err(|e| e.to_string())?;
            println!("wrote {} rows to {}", csv.lines().count().saturating_sub(1), out);
            Ok(())
        }
        "inspect" => {
            let model_path = flags.require("model")?;
            let data_path = flags.require("data")?;
            let index: usize = flags.parsed("index")?.unwrap_or(0);
            let token = flags.require("token")?;
            let out = flags.require("out")?;
            let torso: usize = flags.parsed("torso_index")?.unwrap_or(0);
            flags.reject_unused()?;
            let model = load_checkpoint(&model_path).map_err(|e| e.to_string())?;
            let data = load_jsonl(&data_path, torso).map_err(|e| e.to_string())?;
            let seq = data
                .get(index)
                .ok_or_else(|| format!("index {index} out of range ({} sequences)", data.len()))?;
            let (csv, pgm) =
                export_attention(&model, seq, &token, &out).map_err(|e| e.to_string())?;
            println!("wrote {} and {}", csv.display(), pgm.display());
            Ok(())
        }
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(format!("unknown command '{other}'\n{USAGE}")),
    }
}
