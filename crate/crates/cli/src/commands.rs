use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use exnet::audit::{compare, numeric_gradients, AuditReport};
use exnet::neural::NeuralError;
use exnet::seed::mix;
use exnet::xprop::{compute_gradients, down_pass, up_pass, XPropError};
use exnet::xprop_a::{AeonConfig, AeonSummary};
use exnet::{MetricsRow, MetricsWriter, Mode, NetworkBundle, Optimizer, XProp, XPropA};
use log::{info, warn};
use serde::Serialize;

use crate::config::{Prepared, RunConfig, Seeds};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const GRAPH_FILE: &str = "graph.dot";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

fn prepare(config: &Path, opts: &RunOptions) -> Result<(Prepared, PathBuf), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = opts.seed_override {
        cfg.seeds = Seeds::from_override(n);
    }
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let p = cfg.prepare()?;
    fs::create_dir_all(&dir)?;
    Ok((p, dir))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn header(command: &str, p: &Prepared) -> Vec<(String, String)> {
    let c = &p.config;
    let mut h = vec![
        ("command".to_string(), command.to_string()),
        ("seed_init".to_string(), c.seeds.init.to_string()),
        ("seed_task".to_string(), c.seeds.task.to_string()),
        ("seed_sm".to_string(), c.seeds.sm.to_string()),
        ("mode".to_string(), json(&c.mode)),
        ("builder".to_string(), json(&c.builder)),
        ("supernode_width".to_string(), json(&c.supernode_width)),
        ("task".to_string(), json(&c.task)),
        ("dims".to_string(), json(&p.dims)),
        ("optimizer".to_string(), json(&c.optimizer)),
        ("vertices".to_string(), p.built.graph.vertex_count().to_string()),
        ("arcs".to_string(), p.built.graph.arc_count().to_string()),
    ];
    match command {
        "train" => h.push(("trials".to_string(), c.trials.to_string())),
        "train-a" => h.push(("xprop_a".to_string(), json(&c.xprop_a))),
        _ => {}
    }
    h
}

fn bundle(p: &Prepared) -> Result<NetworkBundle, CliError> {
    NetworkBundle::new(&p.built.graph, &p.built.sharing, p.dims.clone(), p.config.seeds.init)
        .map_err(|e| CliError::Config(format!("networks: {e}")))
}

fn optimizer(p: &Prepared) -> Optimizer {
    Optimizer::new(p.config.optimizer.kind, p.config.optimizer.lr)
}

fn is_numeric(e: &XPropError) -> bool {
    matches!(e, XPropError::NonFiniteLoss(_) | XPropError::Neural(NeuralError::NonFinite(_)))
}

fn classify(e: XPropError, trial: u64) -> CliError {
    if is_numeric(&e) {
        CliError::Numeric { trial, reason: e.to_string() }
    } else {
        CliError::Runtime(e.to_string())
    }
}

fn metrics_writer(
    dir: &Path,
    comments: &[(String, String)],
    flush_every: usize,
) -> Result<MetricsWriter<BufWriter<File>>, CliError> {
    let file = File::create(dir.join(METRICS_FILE))?;
    Ok(MetricsWriter::new(BufWriter::new(file), comments, flush_every)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub trials: u64,
    pub mean_loss_first: f64,
    pub mean_loss_last: f64,
    pub out_dir: PathBuf,
}

/// Trials `1..=trials`; each row is written before the next trial runs so a
/// blow-up keeps every completed row.
pub fn cmd_train(config: &Path, opts: &RunOptions) -> Result<TrainSummary, CliError> {
    let (p, dir) = prepare(config, opts)?;
    let comments = header("train", &p);
    let mut writer = metrics_writer(&dir, &comments, p.config.output.flush_every)?;
    let nets = bundle(&p)?;
    let mut xp =
        XProp::new(p.built.graph.clone(), nets, p.tokeniser.clone(), optimizer(&p), p.config.mode, p.config.seeds.sm)
            .map_err(|e| CliError::Config(e.to_string()))?;
    info!(
        "train: {} vertices, {} arcs, {} parameters, {} trials",
        p.built.graph.vertex_count(),
        p.built.graph.arc_count(),
        xp.bundle.param_count(),
        p.config.trials
    );
    let window = (p.config.trials / 20).max(1);
    let (mut first, mut last) = (Vec::new(), std::collections::VecDeque::new());
    let started = std::time::Instant::now();
    for t in 0..p.config.trials {
        let trial = t + 1;
        let r = match xp.run_trial(&p.task, t) {
            Ok(r) => r,
            Err(e) => {
                writer.finish()?;
                return Err(classify(e, trial));
            }
        };
        writer.write(&MetricsRow {
            trial,
            loss: r.loss_value,
            prediction_norm: r.prediction_norm(),
            grad_norm: r.grad_norm(),
            local_disagreement: Some(r.local_disagreement),
        })?;
        if (first.len() as u64) < window {
            first.push(r.loss_value);
        }
        last.push_back(r.loss_value);
        if last.len() as u64 > window {
            last.pop_front();
        }
        if trial % 1000 == 0 {
            log::debug!("trial {trial}: loss {:.4e}", r.loss_value);
        }
    }
    writer.finish()?;
    xp.bundle.to_checkpoint().save(&dir.join(CHECKPOINT_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mean = |v: &mut dyn Iterator<Item = &f64>, n: usize| if n == 0 { f64::NAN } else { v.sum::<f64>() / n as f64 };
    let summary = TrainSummary {
        trials: p.config.trials,
        mean_loss_first: mean(&mut first.iter(), first.len()),
        mean_loss_last: mean(&mut last.iter(), last.len()),
        out_dir: dir,
    };
    info!(
        "train done in {:.2?}: mean loss {:.4e} over the first {window} trials, {:.4e} over the last {window}",
        started.elapsed(),
        summary.mean_loss_first,
        summary.mean_loss_last
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainASummary {
    pub initial_mean_loss: f64,
    pub aeons: Vec<AeonSummary>,
    pub out_dir: PathBuf,
}

pub fn cmd_train_a(config: &Path, opts: &RunOptions) -> Result<TrainASummary, CliError> {
    let (p, dir) = prepare(config, opts)?;
    let a = p.config.xprop_a.clone().ok_or_else(|| CliError::Config("train-a needs an xprop_a section".into()))?;
    let set = match p.task.fixed_set() {
        Some(s) => s.clone(),
        None => p.task.training_set(p.config.task.training_set_size.unwrap_or(0)),
    };
    let comments = header("train-a", &p);
    let mut writer = metrics_writer(&dir, &comments, p.config.output.flush_every)?;
    let nets = bundle(&p)?;
    let mut run = XPropA::new(p.built.graph.clone(), nets, p.tokeniser.clone(), set, optimizer(&p))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let initial = exnet::xprop_a::mean_loss(&run.graph, &run.bundle, &run.tokeniser, &run.set)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    info!("train-a: {} instances, initial mean loss {initial:.4e}", run.set.len());
    let cfg = AeonConfig { aeons: a.aeons, epoch_trials: a.epoch_trials, seed: p.config.seeds.sm };
    let mut summaries = Vec::new();
    let mut rows_written = 0u64;
    for aeon in 0..a.aeons {
        let mut io_err = None;
        let outcome = run.run_aeon(aeon, &cfg, &mut |row| {
            rows_written = row.trial;
            if io_err.is_none() {
                if let Err(e) = writer.write(&row) {
                    io_err = Some(e);
                }
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let summary = match outcome {
            Ok(s) => s,
            Err(e) => {
                writer.finish()?;
                return Err(classify(e, rows_written + 1));
            }
        };
        let line = summary.consistency.line();
        writer.note(&format!("{line}; mean loss {:e}", summary.mean_loss))?;
        println!("{line}");
        info!("aeon {aeon}: mean loss {:.4e}", summary.mean_loss);
        if !summary.consistency.passed() {
            writer.finish()?;
            return Err(CliError::Consistency(line));
        }
        summaries.push(summary);
    }
    writer.finish()?;
    run.bundle.to_checkpoint().save(&dir.join(CHECKPOINT_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(TrainASummary { initial_mean_loss: initial, aeons: summaries, out_dir: dir })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub report: AuditReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub modes: Vec<ModeReport>,
    pub passed: bool,
}

/// Audits the analytic gradients of `instances` trials per mode against
/// central differences, at the initial parameters.
pub fn gradcheck(p: &Prepared) -> Result<GradcheckSummary, CliError> {
    let gc = &p.config.gradcheck;
    let nets = bundle(p)?;
    let g = &p.built.graph;
    let mut modes = Vec::new();
    for &mode in &gc.modes {
        let mut report = AuditReport::default();
        for i in 0..gc.instances {
            let sample = p.task.sample(i);
            let run = || -> Result<AuditReport, XPropError> {
                let tokens = p.tokeniser.tokenise(&sample.instance)?;
                let (primary, _) = up_pass(g, &nets, &tokens)?;
                let comp = down_pass(g, &nets, &primary, mode, mix(p.config.seeds.sm, i))?;
                let mut analytic = compute_gradients(g, &nets, &primary, &comp, &sample.loss, mode)?.grads;
                if gc.fault_injection {
                    let first = analytic.groups().next();
                    if let Some(gid) = first {
                        let v = analytic.get_mut(gid).expect("present");
                        v[0] = v[0] * 1.01 + 1e-3;
                    }
                }
                let numeric = numeric_gradients(g, &nets, &primary, &comp, &sample.loss, mode, gc.step)?;
                Ok(compare(&nets, &analytic, &numeric))
            };
            let r = run().map_err(|e| classify(e, i + 1))?;
            report.merge(&r);
        }
        for (role, e) in &report.max_rel_error {
            println!("mode {} role {role} max_rel_error {e:.3e}", json(&mode).trim_matches('"'));
        }
        modes.push(ModeReport { mode, report });
    }
    let passed = modes.iter().all(|m| m.report.passes(gc.tolerance));
    Ok(GradcheckSummary { tolerance: gc.tolerance, modes, passed })
}

pub fn cmd_gradcheck(config: &Path, opts: &RunOptions) -> Result<GradcheckSummary, CliError> {
    let (p, dir) = prepare(config, opts)?;
    let summary = gradcheck(&p)?;
    fs::write(dir.join(GRADCHECK_FILE), serde_json::to_string_pretty(&summary).expect("serializable"))?;
    if !summary.passed {
        let worst = summary
            .modes
            .iter()
            .filter_map(|m| m.report.worst.as_ref().map(|w| (m.mode, w)))
            .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error))
            .expect("a failing report has a worst entry");
        let msg = format!(
            "mode {:?}: {} parameter {} of group {} analytic {:e} numeric {:e} rel error {:e} > {:e}",
            worst.0,
            worst.1.role,
            worst.1.index,
            worst.1.group,
            worst.1.analytic,
            worst.1.numeric,
            worst.1.rel_error,
            summary.tolerance
        );
        warn!("{msg}");
        return Err(CliError::Gradcheck(msg));
    }
    println!("gradcheck passed (tolerance {:e})", summary.tolerance);
    Ok(summary)
}

pub fn cmd_dump_graph(config: &Path, opts: &RunOptions) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = opts.seed_override {
        cfg.seeds = Seeds::from_override(n);
    }
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let built = cfg.builder.build_with(cfg.supernode_width).map_err(|e| CliError::Config(format!("builder: {e}")))?;
    fs::create_dir_all(&dir)?;
    let path = dir.join(GRAPH_FILE);
    fs::write(&path, built.graph.to_dot())?;
    println!("{} vertices, {} arcs -> {}", built.graph.vertex_count(), built.graph.arc_count(), path.display());
    Ok(path)
}
