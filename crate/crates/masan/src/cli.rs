//! Command-line interface: synth, pretrain, train, eval, ablate, viz and
//! gradcheck subcommands over a key=value config file with flag overrides.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use crate::data::{export_metrics_csv, generate_synthetic_cohort, save_volume, SubjectSample};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::harness::{
    self, apply_checkpoint, load_checkpoint, save_checkpoint, trace_to_text, ExperimentConfig,
};
use crate::model::Model;
use crate::optim::AdamState;

const USAGE: &str = "\
usage: masan <command> [options]

commands:
  synth       generate a synthetic cohort and write it as MVL1 volumes
  pretrain    pretrain the autoencoders on the full cohort
  train       train end-to-end on the train split and evaluate on the test split
  eval        evaluate a checkpoint on the test split
  ablate      paired attention-vs-addition runs over the ablation seeds
  viz         export the fused-embedding weight map for one subject
  gradcheck   compare every operation family against finite differences

options:
  --config <path>      key=value config file (one pair per line, # comments)
  --set <key=value>    override one config key (repeatable)
  --seed <n>           shorthand for --set seed=<n>
  --out <dir>          shorthand for --set out_dir=<dir>
  --checkpoint <path>  checkpoint to load (eval, viz, optionally train)
  --subject <n>        cohort index to visualize (viz; default: first
                       class-1 test subject)
  -h, --help           print this text
";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    sets: Vec<(String, String)>,
    checkpoint: Option<PathBuf>,
    subject: Option<usize>,
}

fn parse_args(args: &[String]) -> std::result::Result<Option<Cli>, String> {
    if args.is_empty() {
        return Err("missing command".into());
    }
    if args[0] == "-h" || args[0] == "--help" {
        return Ok(None);
    }
    let command = args[0].clone();
    let known = ["synth", "pretrain", "train", "eval", "ablate", "viz", "gradcheck"];
    if !known.contains(&command.as_str()) {
        return Err(format!("unknown command '{command}'"));
    }
    let mut cli = Cli {
        command,
        config: None,
        sets: Vec::new(),
        checkpoint: None,
        subject: None,
    };
    let mut i = 1;
    let value_of = |i: &mut usize, flag: &str| -> std::result::Result<String, String> {
        *i += 1;
        args.get(*i)
            .cloned()
            .ok_or_else(|| format!("{flag} needs a value"))
    };
    while i < args.len() {
        match args[i].as_str() {
            "-h" | "--help" => return Ok(None),
            "--config" => cli.config = Some(PathBuf::from(value_of(&mut i, "--config")?)),
            "--checkpoint" => {
                cli.checkpoint = Some(PathBuf::from(value_of(&mut i, "--checkpoint")?))
            }
            "--subject" => {
                let v = value_of(&mut i, "--subject")?;
                cli.subject = Some(v.parse().map_err(|_| format!("bad --subject '{v}'"))?);
            }
            "--seed" => {
                let v = value_of(&mut i, "--seed")?;
                cli.sets.push(("seed".into(), v));
            }
            "--out" => {
                let v = value_of(&mut i, "--out")?;
                cli.sets.push(("out_dir".into(), v));
            }
            "--set" => {
                let v = value_of(&mut i, "--set")?;
                let Some((k, val)) = v.split_once('=') else {
                    return Err(format!("--set needs key=value, got '{v}'"));
                };
                cli.sets.push((k.trim().into(), val.trim().into()));
            }
            other => return Err(format!("unknown flag '{other}'")),
        }
        i += 1;
    }
    Ok(Some(cli))
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli_main(args: &[String]) -> i32 {
    let cli = match parse_args(args) {
        Ok(Some(cli)) => cli,
        Ok(None) => {
            print!("{USAGE}");
            return 0;
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return 1;
        }
    };

    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };

    match dispatch(&cli, &cfg) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in &cli.sets {
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    match cli.command.as_str() {
        "synth" => cmd_synth(cfg),
        "pretrain" => cmd_pretrain(cfg),
        "train" => cmd_train(cfg, cli.checkpoint.as_deref()),
        "eval" => cmd_eval(cfg, cli.checkpoint.as_deref()),
        "ablate" => cmd_ablate(cfg),
        "viz" => cmd_viz(cfg, cli.checkpoint.as_deref(), cli.subject),
        "gradcheck" => cmd_gradcheck(cfg),
        _ => unreachable!("command validated in parse_args"),
    }
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec())?;
    let mut labels = String::from("subject_id,label\n");
    for s in &cohort {
        save_volume(&s.t1, &dir.join(format!("{}_t1.mvl", s.subject_id)))?;
        save_volume(&s.fmri, &dir.join(format!("{}_fmri.mvl", s.subject_id)))?;
        labels.push_str(&format!("{},{}\n", s.subject_id, s.label));
    }
    write_text(&dir.join("labels.csv"), &labels)?;
    println!(
        "wrote {} subjects ({} per class) to {}",
        cohort.len(),
        cfg.n_per_class,
        dir.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec())?;
    // pretrain on the train split so later evaluation stays held out
    let (train, _) = crate::data::split_train_test(&cohort, cfg.train_fraction, cfg.seed)?;
    let out = harness::pretrain_autoencoders::<f32>(cfg, &train)?;
    write_text(&dir.join("pretrain_trace.txt"), &trace_to_text(&out.trace))?;
    // weights only: a later train run starts with fresh optimizer state
    save_checkpoint(
        &dir.join("pretrain.mck"),
        &out.model,
        &AdamState::default(),
        cfg.fingerprint(),
    )?;
    println!(
        "pretrained {} steps on {} subjects: recon MSE {:.6} -> {:.6} (ratio {:.4})",
        cfg.pretrain_steps,
        train.len(),
        out.initial_mse,
        out.final_mse,
        out.final_mse / out.initial_mse.max(1e-30)
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec())?;
    let init_data = match init {
        Some(path) => Some(load_checkpoint::<f32>(path)?),
        None => None,
    };
    let out = harness::train_end_to_end::<f32>(cfg, &cohort, init_data.as_ref())?;
    write_text(&dir.join("loss_trace.txt"), &trace_to_text(&out.trace))?;
    export_metrics_csv(&[out.metrics.clone()], &dir.join("metrics.csv"))?;
    save_checkpoint(&dir.join("model.mck"), &out.model, &out.adam, cfg.fingerprint())?;
    write_text(
        &dir.join("config.txt"),
        &(cfg.canonical().join("\n") + "\n"),
    )?;
    println!(
        "trained {} steps on {} subjects, evaluated on {}: accuracy {:.4} precision {:.4} recall {:.4}",
        cfg.train_steps,
        out.train_count,
        out.test_count,
        out.metrics.accuracy,
        out.metrics.precision,
        out.metrics.recall
    );
    Ok(())
}

fn restore_model(cfg: &ExperimentConfig, path: &Path) -> Result<(Model<f32>, AdamState<f32>)> {
    let data = load_checkpoint::<f32>(path)?;
    if data.fingerprint != cfg.fingerprint() {
        eprintln!(
            "warning: checkpoint fingerprint {:016x} differs from config fingerprint {:016x}",
            data.fingerprint,
            cfg.fingerprint()
        );
    }
    let mut model = Model::new(cfg.model_config::<f32>(), cfg.seed);
    let mut adam = AdamState::default();
    apply_checkpoint(&data, &mut model, &mut adam);
    Ok((model, adam))
}

fn test_split(cfg: &ExperimentConfig) -> Result<Vec<SubjectSample<f32>>> {
    let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec())?;
    let (_, test) = crate::data::split_train_test(&cohort, cfg.train_fraction, cfg.seed)?;
    Ok(test)
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint
        .ok_or_else(|| Error::Config("eval needs --checkpoint <path>".into()))?;
    let dir = out_dir(cfg)?;
    let (mut model, _) = restore_model(cfg, path)?;
    let test = test_split(cfg)?;
    let metrics = harness::evaluate(
        &mut model,
        &test,
        cfg.batch_size,
        cfg.fusion_mode.as_str(),
        cfg.seed,
    )?;
    export_metrics_csv(&[metrics.clone()], &dir.join("metrics.csv"))?;
    println!(
        "evaluated {} subjects: accuracy {:.4} precision {:.4} recall {:.4}",
        test.len(),
        metrics.accuracy,
        metrics.precision,
        metrics.recall
    );
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let out = harness::run_ablation::<f32>(cfg)?;
    export_metrics_csv(&out.rows, &dir.join("ablation_metrics.csv"))?;
    println!(
        "ablation over {} seeds: attention acc/prec/rec {:.4}/{:.4}/{:.4} vs addition {:.4}/{:.4}/{:.4}",
        cfg.ablation_seeds.len(),
        out.mean_attention[0],
        out.mean_attention[1],
        out.mean_attention[2],
        out.mean_addition[0],
        out.mean_addition[1],
        out.mean_addition[2]
    );
    for (seed, signal, background) in &out.localization {
        println!(
            "  seed {seed}: embedding-map signal mean {signal:.6} vs background {background:.6}"
        );
    }
    Ok(())
}

fn cmd_viz(cfg: &ExperimentConfig, checkpoint: Option<&Path>, subject: Option<usize>) -> Result<()> {
    let path = checkpoint
        .ok_or_else(|| Error::Config("viz needs --checkpoint <path>".into()))?;
    let dir = out_dir(cfg)?;
    let (mut model, _) = restore_model(cfg, path)?;
    let sample = match subject {
        Some(idx) => {
            let cohort = generate_synthetic_cohort::<f32>(&cfg.synthetic_spec())?;
            cohort
                .get(idx)
                .cloned()
                .ok_or_else(|| Error::Config(format!("subject index {idx} out of range")))?
        }
        None => {
            let test = test_split(cfg)?;
            test.iter()
                .find(|s| s.label == 1)
                .cloned()
                .ok_or_else(|| Error::Config("no class-1 subject in test split".into()))?
        }
    };
    let map = harness::export_embedding_map(
        &mut model,
        &sample,
        Some(&dir.join("embedding_map.mvl")),
        Some(&dir.join("embedding_map.pgm")),
    )?;
    let (signal, background) = harness::signal_background_means(
        &map,
        &model.cfg.grid,
        &cfg.signal_patches,
    );
    println!(
        "embedding map for {}: signal-cell mean {:.6}, background mean {:.6}",
        sample.subject_id, signal, background
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    // f64 instantiation of the same generic kernels: central differences
    // are only a trustworthy oracle at 64-bit (the 32-bit noise floor sits
    // at the tolerance itself)
    let reports = gradcheck::run_suite::<f64>(cfg.seed, 5);
    let mut failed: Option<&gradcheck::FamilyReport> = None;
    for r in &reports {
        let ok = r.max_rel_err < 1e-3;
        println!(
            "{:<16} max_rel_err={:.3e} {}",
            r.family,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok && failed.is_none() {
            failed = Some(r);
        }
    }
    match failed {
        None => {
            println!("all {} families within 1e-3", reports.len());
            Ok(())
        }
        Some(r) => Err(Error::GradCheckFailed {
            family: r.family.clone(),
            err: r.max_rel_err,
        }),
    }
}
