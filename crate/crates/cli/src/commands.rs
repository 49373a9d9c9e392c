use std::path::{Path, PathBuf};
use std::time::SystemTime;

use pitta_core::adapt::{Lambda, StreamRun};
use pitta_core::eval::{
    aggregate_by_domain, emit_report, read_steps_jsonl, sweep_lambda, sweep_selection, write_sweep_csv, Aggregation,
    MetricRecord, SweepRow, STEPS_FILE,
};
use pitta_core::experiment::{ExperimentConfig, StreamSource};
use pitta_core::net::{load_checkpoint, save_checkpoint};
use pitta_core::scene::{write_frame_dir, Frame};
use pitta_core::{DepthNet32, Error, Result};

use crate::{Command, Common, HyperArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, steps } => pretrain(&common, steps),
        Command::Generate { common } => generate(&common),
        Command::Adapt {
            common,
            hyper,
            save_adapted,
        } => adapt(&common, &hyper, save_adapted.as_deref()),
        Command::Eval { common } => {
            let hyper = HyperArgs {
                no_adapt: true,
                ..Default::default()
            };
            adapt(&common, &hyper, None)
        }
        Command::SweepLambda { common, hyper, grid } => {
            let cfg = configure(&common, Some(&hyper), false)?;
            let net = network(&cfg)?;
            let rows = sweep_lambda(&net, || stream_frames(&cfg), &cfg.hyper, &cfg.run_options(), &grid)?;
            write_table(&cfg, "lambda", &rows)
        }
        Command::SweepSelection { common, hyper, grid } => {
            let cfg = configure(&common, Some(&hyper), false)?;
            let net = network(&cfg)?;
            let rows = sweep_selection(&net, || stream_frames(&cfg), &cfg.hyper, &cfg.run_options(), &grid)?;
            write_table(&cfg, "selection", &rows)
        }
        Command::Report { input, out } => report(&input, &out),
    }
}

/// Loads the configuration file (or defaults) and applies flag overrides.
fn configure(common: &Common, hyper: Option<&HyperArgs>, seed_is_network: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        if seed_is_network {
            cfg.seed = seed;
        } else {
            cfg.stream.seed = seed;
        }
    }
    if let Some(dir) = &common.stream {
        cfg.stream.source = StreamSource::Directory;
        cfg.stream.dir = Some(dir.clone());
    }
    if let Some(n) = common.frames {
        cfg.stream.frames = n;
    }
    if let Some(c) = &common.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(shift) = &common.domain_shift {
        cfg.stream.domain_shift = shift.clone();
    }
    if let Some(h) = hyper {
        if let Some(l) = &h.lambda {
            cfg.hyper.lambda = l.parse::<Lambda>()?;
        }
        if let Some(lr) = h.lr {
            cfg.hyper.lr = lr;
        }
        if let Some(s) = h.median_window {
            cfg.hyper.median_window = s;
        }
        if let Some(sel) = &h.select {
            cfg.hyper.selection = sel.clone();
        }
        if h.no_adapt {
            cfg.hyper.lr = 0.0;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Usage("an output path is required (--out or `out` in the config)".into()))
}

/// The checkpointed network, or a freshly pretrained one when no checkpoint
/// is configured.
fn network(cfg: &ExperimentConfig) -> Result<DepthNet32> {
    let net: DepthNet32 = match &cfg.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            eprintln!("no checkpoint given; pretraining for {} steps", cfg.pretrain.steps);
            cfg.pretrain_net()?.0
        }
    };
    let nc = net.config();
    if (nc.height, nc.width) != (cfg.scene.height, cfg.scene.width) {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} input but the scene is {}x{}",
            nc.height, nc.width, cfg.scene.height, cfg.scene.width
        )));
    }
    Ok(net)
}

fn stream_frames(cfg: &ExperimentConfig) -> Box<dyn Iterator<Item = Result<Frame>>> {
    match cfg.frames() {
        Ok(frames) => frames,
        Err(e) => Box::new(std::iter::once(Err(e))),
    }
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn pretrain(common: &Common, steps: Option<usize>) -> Result<()> {
    let mut cfg = configure(common, None, true)?;
    if let Some(s) = steps {
        cfg.pretrain.steps = s;
    }
    let path = cfg
        .out
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Error::Usage("pretrain needs --out or --checkpoint for the result".into()))?;
    let (net, report) = cfg.pretrain_net()?;
    save_checkpoint(&net, &path)?;
    println!(
        "pretrained {} steps; mean loss over the last 100 steps {:.4}; saved {}",
        report.steps,
        report.tail_mean(100),
        path.display()
    );
    Ok(())
}

fn generate(common: &Common) -> Result<()> {
    let cfg = configure(common, None, false)?;
    if cfg.stream.source != StreamSource::Synthetic {
        return Err(Error::Usage("generate renders synthetic frames; drop --stream".into()));
    }
    let dir = out_dir(&cfg)?;
    let frames: Vec<Frame> = cfg.scene_stream().iter().collect::<Result<_>>()?;
    let manifest = write_frame_dir(&frames, dir)?;
    println!("wrote {} frames to {}", manifest.frames.len(), dir.display());
    Ok(())
}

fn adapt(common: &Common, hyper: &HyperArgs, save_adapted: Option<&Path>) -> Result<()> {
    let cfg = configure(common, Some(hyper), false)?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let net = network(&cfg)?;
    let (adapted, run) = cfg.adapt(&net)?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    for s in &run.skipped {
        eprintln!("skipped frame {}: {}", s.position, s.reason);
    }
    let files = emit_report(&dir, &run, &cfg.report_header(timestamp()), cfg.eval.aggregation)?;
    if let Some(path) = save_adapted {
        save_checkpoint(&adapted, path)?;
    }
    print_summary(&run, cfg.eval.aggregation);
    println!("report written to {}", files.summary.parent().unwrap_or(&dir).display());
    Ok(())
}

fn print_summary(run: &StreamRun, rule: Aggregation) {
    let updates = run.reports().filter(|r| r.update_applied).count();
    println!(
        "{} frames, {} updates, {} adapted scalars ({})",
        run.steps.len(),
        updates,
        run.adapted_scalars,
        if run.selected.is_empty() { "none".to_owned() } else { run.selected.join(", ") }
    );
    print_metrics_header("domain");
    for (domain, m) in aggregate_by_domain(&run.metrics(), rule) {
        print_metrics_row(&domain, &m);
    }
}

fn print_metrics_header(key: &str) {
    println!(
        "{key:<24} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7}",
        "abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3"
    );
}

fn print_metrics_row(key: &str, m: &MetricRecord) {
    println!(
        "{key:<24} {:>8.4} {:>8.4} {:>8.3} {:>8.4} {:>7.4} {:>7.4} {:>7.4}",
        m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3
    );
}

fn write_table(cfg: &ExperimentConfig, key: &str, rows: &[SweepRow]) -> Result<()> {
    let path: PathBuf = out_dir(cfg)?.join(format!("{key}.csv"));
    write_sweep_csv(&path, key, rows)?;
    print_metrics_header(key);
    for r in rows {
        print_metrics_row(&r.setting, &r.summary);
    }
    println!("table written to {}", path.display());
    Ok(())
}

fn report(input: &Path, out: &Path) -> Result<()> {
    let steps = if input.is_dir() { input.join(STEPS_FILE) } else { input.to_path_buf() };
    let (header, run) = read_steps_jsonl(&steps)?;
    let rule = serde_json::from_value::<ExperimentConfig>(header.config.clone())
        .map(|c| c.eval.aggregation)
        .unwrap_or_default();
    emit_report(out, &run, &header, rule)?;
    print_summary(&run, rule);
    println!("report written to {}", out.display());
    Ok(())
}
