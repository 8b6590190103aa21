//! Implementations of the `generate`, `run`, and `report` subcommands.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use rrpcp::config::{self, SceneConfig};
use rrpcp::pcp::{self, PcpParams};
use rrpcp::pipeline::{self, Algorithm, PipelineConfig};
use rrpcp::report::{self, MetricsRow, RunSummary};
use rrpcp::synthdata::{FrameSequence, ObjectSpec, Scene};
use rrpcp::Error;

use crate::{AlgoChoice, CliError};

/// Aggregate outcome of a command, mapped to the process exit code.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunStatus {
    /// At least one run had more than 10% of frames without certified
    /// solver convergence.
    pub degraded: bool,
}

/// Options of the `run` subcommand (mirrors its flags).
#[derive(Debug)]
pub struct RunOptions<'a> {
    pub scene: &'a str,
    pub algo: AlgoChoice,
    pub config: Option<&'a Path>,
    pub seeds: &'a [u64],
    pub jobs: usize,
    pub out: &'a Path,
}

/// What a `run` invocation did, written as `manifest.json` in the output
/// directory. The timestamp and the elapsed times are the only outputs that
/// vary between repeated runs; every data file is seed-deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// The `--scene` argument as given.
    pub scene: String,
    /// Path of the runtime config, or `"derived-from-scene"`.
    pub runtime_config: String,
    /// Generation seeds, in execution order.
    pub seeds: Vec<u64>,
    /// Algorithm names executed per seed.
    pub algorithms: Vec<String>,
    /// Output directory as given.
    pub output_dir: String,
    /// Milliseconds since the Unix epoch at manifest creation.
    pub created_unix_ms: u64,
    /// One record per (algorithm, seed) run.
    pub runs: Vec<RunRecord>,
}

/// Outcome of one algorithm on one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub seed: u64,
    /// Metrics CSV file name inside the output directory.
    pub metrics_csv: String,
    pub frames: usize,
    /// Frames without certified solver convergence.
    pub nonconverged_frames: usize,
    /// Frames where support refinement escalated its thresholds.
    pub escalated_frames: usize,
    pub final_rank: usize,
    pub elapsed_seconds: f64,
}

/// Resolves a scene argument to config text: the literal `bundled` (or the
/// bundled scene's name) selects the built-in benchmark, anything else is
/// read as a file path.
pub fn resolve_scene_text(source: &str) -> Result<String, CliError> {
    if source == "bundled" || source == config::BUNDLED_SCENE_NAME {
        return Ok(config::BUNDLED_SCENE_JSON.to_string());
    }
    read_text(Path::new(source))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|err| {
        CliError::Run(Error::InvalidInput(format!(
            "cannot read {}: {err}",
            path.display()
        )))
    })
}

/// `generate`: render a scene config into a scene directory.
pub fn cmd_generate(config_source: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let text = resolve_scene_text(config_source)?;
    let scene_config = SceneConfig::parse(&text)?;
    let (scene, training) = scene_config.build(seed)?;
    rrpcp::io::save_scene_dir(out, &scene_config, seed, &scene, &training)?;
    println!(
        "wrote {} frames of {} pixels (+{} training) to {}",
        scene.frames.len(),
        scene.frames.shape.num_pixels(),
        training.len(),
        out.display()
    );
    Ok(())
}

/// One unit of work for the runner: a scene to process, however obtained.
enum Task {
    /// Loaded from a scene directory; the seed is the stored one.
    Prebuilt(Box<rrpcp::io::StoredScene>),
    /// Generated on demand from a config and a seed.
    Generate(u64),
}

impl Task {
    fn seed(&self) -> u64 {
        match self {
            Task::Prebuilt(stored) => stored.seed,
            Task::Generate(seed) => *seed,
        }
    }
}

/// Results of one task: per-algorithm manifest records and row summaries,
/// used for the console report after all workers join.
struct TaskOutput {
    seed: u64,
    records: Vec<(RunRecord, RunSummary)>,
}

/// `run`: execute the selected algorithms over the scene, write one metrics
/// CSV per (algorithm, seed) plus `manifest.json`.
pub fn cmd_run(opts: RunOptions) -> Result<RunStatus, CliError> {
    if opts.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut sorted_seeds = opts.seeds.to_vec();
    sorted_seeds.sort_unstable();
    if sorted_seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("seeds must be distinct".into()));
    }

    let algorithms: Vec<Algorithm> = match opts.algo {
        AlgoChoice::SuppredModcs => vec![Algorithm::SuppredModcs],
        AlgoChoice::Rrpcp => vec![Algorithm::PlainRrpcp],
        AlgoChoice::Pcp => vec![Algorithm::Pcp],
        AlgoChoice::All => vec![
            Algorithm::SuppredModcs,
            Algorithm::PlainRrpcp,
            Algorithm::Pcp,
        ],
    };

    // Resolve the scene source into a config plus one task per seed.
    let scene_path = Path::new(opts.scene);
    let (scene_config, tasks) = if scene_path.is_dir() {
        if !opts.seeds.is_empty() {
            return Err(CliError::Usage(
                "--seed applies only when --scene is a config; a generated scene directory pins its seed".into(),
            ));
        }
        let stored = rrpcp::io::load_scene_dir(scene_path)?;
        (
            stored.config.clone(),
            vec![Task::Prebuilt(Box::new(stored))],
        )
    } else {
        let text = resolve_scene_text(opts.scene)?;
        let scene_config = SceneConfig::parse(&text)?;
        let seeds = if opts.seeds.is_empty() {
            vec![1]
        } else {
            opts.seeds.to_vec()
        };
        let tasks = seeds.into_iter().map(Task::Generate).collect();
        (scene_config, tasks)
    };

    let (pipeline_config, runtime_config_label) = match opts.config {
        Some(path) => (
            config::parse_pipeline_config(&read_text(path)?)?,
            path.display().to_string(),
        ),
        None => (
            config::pipeline_defaults_for(&scene_config),
            "derived-from-scene".to_string(),
        ),
    };

    fs::create_dir_all(opts.out)?;

    let outputs = execute_tasks(&tasks, &scene_config, &pipeline_config, &algorithms, &opts)?;

    // Console report and manifest, in task order.
    let mut status = RunStatus::default();
    let mut records = Vec::new();
    for output in &outputs {
        for (record, summary) in &output.records {
            println!(
                "{} seed {}: {} frames, median rel_err_s {:.4}, nonconverged {}/{}, {:.1}s",
                record.algorithm,
                output.seed,
                record.frames,
                summary.median_rel_err_s,
                record.nonconverged_frames,
                record.frames,
                record.elapsed_seconds
            );
            if record.nonconverged_frames * 10 > record.frames {
                eprintln!(
                    "warning: {} seed {}: more than 10% of frames did not certify convergence",
                    record.algorithm, output.seed
                );
                status.degraded = true;
            }
            records.push(record.clone());
        }
    }

    let manifest = RunManifest {
        scene: opts.scene.to_string(),
        runtime_config: runtime_config_label,
        seeds: tasks.iter().map(Task::seed).collect(),
        algorithms: algorithms.iter().map(|a| a.name().to_string()).collect(),
        output_dir: opts.out.display().to_string(),
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        runs: records,
    };
    let mut manifest_text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    manifest_text.push('\n');
    let manifest_path = opts.out.join("manifest.json");
    fs::write(&manifest_path, manifest_text)?;
    println!("wrote {}", manifest_path.display());
    Ok(status)
}

/// Runs every task, at most `opts.jobs` concurrently, preserving task order
/// in the result. The first error (in task order) wins and later tasks are
/// abandoned.
fn execute_tasks(
    tasks: &[Task],
    scene_config: &SceneConfig,
    pipeline_config: &PipelineConfig,
    algorithms: &[Algorithm],
    opts: &RunOptions,
) -> Result<Vec<TaskOutput>, CliError> {
    let slots: Vec<Mutex<Option<Result<TaskOutput, CliError>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let workers = opts.jobs.min(tasks.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= tasks.len() || failed.load(Ordering::SeqCst) {
                    return;
                }
                let result = run_task(
                    &tasks[index],
                    scene_config,
                    pipeline_config,
                    algorithms,
                    opts.out,
                );
                if result.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[index].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });

    let mut outputs = Vec::with_capacity(tasks.len());
    for slot in slots {
        match slot.into_inner().expect("result slot poisoned") {
            Some(Ok(output)) => outputs.push(output),
            Some(Err(err)) => return Err(err),
            // Abandoned after an earlier failure; that error is returned.
            None => break,
        }
    }
    Ok(outputs)
}

fn run_task(
    task: &Task,
    scene_config: &SceneConfig,
    pipeline_config: &PipelineConfig,
    algorithms: &[Algorithm],
    out: &Path,
) -> Result<TaskOutput, CliError> {
    let seed = task.seed();
    let built;
    let (scene, training, objects): (&Scene, &FrameSequence, &[ObjectSpec]) = match task {
        Task::Prebuilt(stored) => (&stored.scene, &stored.training, &stored.config.objects),
        Task::Generate(seed) => {
            built = scene_config.build(*seed)?;
            (&built.0, &built.1, &scene_config.objects)
        }
    };

    // The causal algorithms share one initial subspace estimate.
    let initial = if algorithms.iter().any(|a| *a != Algorithm::Pcp) {
        Some(pipeline::initial_subspace(training, pipeline_config)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(algorithms.len());
    for &algorithm in algorithms {
        let (rows, nonconverged, escalated, final_rank, elapsed_seconds) = match algorithm {
            Algorithm::SuppredModcs => {
                let run = pipeline::run_suppred_modcs(
                    scene,
                    objects,
                    initial.as_ref().expect("initialized for causal algorithms"),
                    pipeline_config,
                )?;
                (
                    run.rows,
                    run.nonconverged_frames,
                    run.escalated_frames,
                    run.final_rank,
                    run.elapsed.as_secs_f64(),
                )
            }
            Algorithm::PlainRrpcp => {
                let run = pipeline::run_plain_rrpcp(
                    scene,
                    initial.as_ref().expect("initialized for causal algorithms"),
                    pipeline_config,
                )?;
                (
                    run.rows,
                    run.nonconverged_frames,
                    run.escalated_frames,
                    run.final_rank,
                    run.elapsed.as_secs_f64(),
                )
            }
            Algorithm::Pcp => {
                let started = Instant::now();
                let observed = pcp::stack_frames(&scene.frames.frames)?;
                let background = pcp::stack_frames(&scene.truth.background)?;
                let sparse = pcp::stack_frames(&scene.truth.sparse)?;
                let solved = pcp::pcp(&observed, &PcpParams::default())?;
                let rows = pcp::per_frame_errors(&solved, &background, &sparse)?;
                let nonconverged = if solved.converged { 0 } else { rows.len() };
                (
                    rows,
                    nonconverged,
                    0,
                    solved.rank,
                    started.elapsed().as_secs_f64(),
                )
            }
        };

        let metrics_csv = format!("metrics_{}_seed{}.csv", algorithm.name(), seed);
        let file = fs::File::create(out.join(&metrics_csv))?;
        report::write_metrics_csv(BufWriter::new(file), &rows)?;

        records.push((
            RunRecord {
                algorithm: algorithm.name().to_string(),
                seed,
                metrics_csv,
                frames: rows.len(),
                nonconverged_frames: nonconverged,
                escalated_frames: escalated,
                final_rank,
                elapsed_seconds,
            },
            report::summarize(&rows),
        ));
    }
    Ok(TaskOutput { seed, records })
}

/// `report`: summarize metrics CSVs into a comparison table (stdout and
/// `summary.txt`) plus one plot-ready column file per input.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one --in CSV".into()));
    }
    let mut runs: Vec<(String, Vec<MetricsRow>)> = Vec::with_capacity(inputs.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for path in inputs {
        let file = fs::File::open(path).map_err(|err| {
            CliError::Run(Error::InvalidInput(format!(
                "cannot read {}: {err}",
                path.display()
            )))
        })?;
        let rows = report::read_metrics_csv(BufReader::new(file))?;
        if rows.is_empty() {
            return Err(CliError::Run(Error::Format(format!(
                "{} holds no metric rows",
                path.display()
            ))));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        let n = seen.entry(stem.clone()).or_insert(0);
        *n += 1;
        let label = if *n == 1 { stem } else { format!("{stem}-{n}") };
        runs.push((label, rows));
    }

    fs::create_dir_all(out)?;
    let summary = render_summary(&runs);
    print!("{summary}");
    fs::write(out.join("summary.txt"), &summary)?;

    for (label, rows) in &runs {
        let table = curves_table(rows)?;
        fs::write(out.join(format!("{label}_curves.txt")), table)?;
    }

    // Side-by-side sparse-error columns, when the runs cover equal horizons.
    if runs.len() >= 2 && runs.iter().all(|(_, r)| r.len() == runs[0].1.len()) {
        let names: Vec<&str> = runs.iter().map(|(label, _)| label.as_str()).collect();
        let series: Vec<Vec<f64>> = runs
            .iter()
            .map(|(_, rows)| {
                rows.iter()
                    .map(|r| r.rel_err_s.unwrap_or(f64::NAN))
                    .collect()
            })
            .collect();
        let table = report::column_table(&names, &series)?;
        fs::write(out.join("rel_err_s_compare.txt"), table)?;
    }
    Ok(())
}

/// Per-frame diagnostic columns of one run, plot-ready.
fn curves_table(rows: &[MetricsRow]) -> Result<String, CliError> {
    let names = [
        "rel_err_s",
        "rel_err_l",
        "extras_pred",
        "misses_pred",
        "extras_upd",
        "misses_upd",
        "epsilon",
        "solver_iters",
    ];
    let series: Vec<Vec<f64>> = vec![
        rows.iter()
            .map(|r| r.rel_err_s.unwrap_or(f64::NAN))
            .collect(),
        rows.iter().map(|r| r.rel_err_l).collect(),
        rows.iter().map(|r| r.extras_pred as f64).collect(),
        rows.iter().map(|r| r.misses_pred as f64).collect(),
        rows.iter().map(|r| r.extras_upd as f64).collect(),
        rows.iter().map(|r| r.misses_upd as f64).collect(),
        rows.iter().map(|r| r.epsilon).collect(),
        rows.iter().map(|r| r.solver_iters as f64).collect(),
    ];
    Ok(report::column_table(&names, &series)?)
}

fn render_summary(runs: &[(String, Vec<MetricsRow>)]) -> String {
    use std::fmt::Write;

    let mut text = String::new();
    let mut summaries = Vec::with_capacity(runs.len());
    for (label, rows) in runs {
        let summary = report::summarize(rows);
        let _ = writeln!(
            text,
            "== {label}: {} frames ({} with foreground)",
            rows.len(),
            summary.active_frames
        );
        let _ = writeln!(
            text,
            "   rel_err_s median {:.4}, 90th percentile {:.4}",
            summary.median_rel_err_s, summary.p90_rel_err_s
        );
        let _ = writeln!(text, "   rel_err_l median {:.3e}", summary.median_rel_err_l);
        let _ = writeln!(
            text,
            "   support errors (extras+misses) median: predicted {}, updated {}",
            summary.median_pred_support_errors, summary.median_upd_support_errors
        );
        let _ = writeln!(
            text,
            "   mean solver iterations {:.1}, final rank {}",
            summary.mean_solver_iters, summary.final_rank
        );
        summaries.push((label.as_str(), summary));
    }

    if summaries.len() >= 2 {
        let _ = writeln!(text, "== ordering (lower is better)");
        ordering_line(&mut text, "median rel_err_s", &summaries, |s| {
            s.median_rel_err_s
        });
        ordering_line(&mut text, "median rel_err_l", &summaries, |s| {
            s.median_rel_err_l
        });
        ordering_line(&mut text, "median updated-support errors", &summaries, |s| {
            s.median_upd_support_errors
        });
    }
    text
}

fn ordering_line(
    text: &mut String,
    metric: &str,
    summaries: &[(&str, RunSummary)],
    value: impl Fn(&RunSummary) -> f64,
) {
    use std::fmt::Write;

    let mut ranked: Vec<(&str, f64)> = summaries
        .iter()
        .map(|(label, s)| (*label, value(s)))
        .collect();
    // NaN (no scoreable frames) ranks last.
    ranked.sort_by(|a, b| match (a.1.is_nan(), b.1.is_nan()) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        (false, false) => a.1.partial_cmp(&b.1).expect("non-NaN values compare"),
    });
    let rendered: Vec<String> = ranked
        .iter()
        .map(|(label, v)| format!("{label} ({v:.4})"))
        .collect();
    let _ = writeln!(text, "   {metric}: {}", rendered.join(" < "));
}
