//! Implementations behind the binary's subcommands. Each returns the
//! process exit code on success; errors carry their exit class.

use std::fmt;
use std::path::{Path, PathBuf};

use pedcc_ssl::data::{export_csv, Dataset, Split};
use pedcc_ssl::model::{build_model, load_model, save_model, Mode, Model};
use pedcc_ssl::pedcc::{
    generate_pedcc, save_centroids, simplex_centroids, CentroidSet, Method, SolverConfig,
};
use pedcc_ssl::trainer::{
    ablation_csv, evaluate, report_csv, run_ablation_suite, train, AblationGrid, TrainerError,
};

use crate::config::{load_run_config, DataKind, RunConfig};

const NORM_EPS: f64 = 1e-12;
const EXPORT_CHUNK: usize = 256;

/// Failure classes, mapped to process exit codes in `main`.
#[derive(Debug)]
pub enum CmdError {
    /// Bad arguments, malformed configs or inputs: exit 1.
    Usage(String),
    /// A run that started and then failed: exit 3.
    Runtime(String),
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Usage(msg) | CmdError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl CmdError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Runtime(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CmdError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CmdError::Usage(msg.into()))
}

fn runtime<T>(msg: impl Into<String>) -> Result<T> {
    Err(CmdError::Runtime(msg.into()))
}

/// Trainer failures keep their class: argument mistakes are usage errors,
/// anything that interrupted a running computation is a runtime failure.
fn from_trainer(e: TrainerError) -> CmdError {
    match e {
        TrainerError::Argument(msg) => CmdError::Usage(msg),
        other => CmdError::Runtime(other.to_string()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    match std::fs::write(path, contents) {
        Ok(()) => Ok(()),
        Err(e) => runtime(format!("cannot write {}: {e}", path.display())),
    }
}

fn load_config(config: &Path, sets: &[String]) -> Result<RunConfig> {
    load_run_config(config, sets).map_err(|e| CmdError::Usage(e.to_string()))
}

fn build_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    cfg.build_datasets().map_err(|msg| match cfg.data_kind {
        // Blob generation can only fail on bad arguments; the image
        // reader fails on missing or corrupt files.
        DataKind::Blobs => CmdError::Usage(msg),
        DataKind::Cifar10 => CmdError::Runtime(msg),
    })
}

fn prepare_model(cfg: &RunConfig) -> Result<(Model, Dataset, Dataset)> {
    let (train_ds, test_ds) = build_data(cfg)?;
    let centroids = cfg.build_centroids().map_err(CmdError::Usage)?;
    let model_cfg = cfg.model_config().map_err(|e| CmdError::Usage(e.to_string()))?;
    let model = build_model(model_cfg, &centroids).map_err(|e| CmdError::Usage(e.to_string()))?;
    Ok((model, train_ds, test_ds))
}

/// `generate-centroids`: run the chosen construction and save the set.
/// A repulsion solve that stops short of the tolerance still writes the
/// (valid, unit-norm) set but exits 2 so scripts can notice.
pub struct GenerateArgs {
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub solver: Method,
    pub max_iters: usize,
    pub step_size: f64,
    pub tol: f64,
    pub out: PathBuf,
}

pub fn generate_centroids(args: &GenerateArgs) -> Result<u8> {
    let (set, residual, note, exit) = match args.solver {
        Method::Repulsion => {
            let solver = SolverConfig {
                max_iters: args.max_iters,
                step_size: args.step_size,
                convergence_tol: args.tol,
                ..SolverConfig::default()
            };
            let outcome = generate_pedcc(args.classes, args.dim, args.seed, &solver)
                .map_err(|e| CmdError::Usage(e.to_string()))?;
            let note = format!(
                "{} after {} iterations",
                if outcome.converged {
                    "converged"
                } else {
                    "did not converge"
                },
                outcome.iterations
            );
            let exit = if outcome.converged { 0 } else { 2 };
            (outcome.centroids, outcome.residual, note, exit)
        }
        Method::Simplex => {
            let set = simplex_centroids(args.classes, args.dim)
                .map_err(|e| CmdError::Usage(e.to_string()))?;
            (set, 0.0, "exact construction".to_string(), 0)
        }
    };
    save_centroids(&set, &args.out)
        .map_err(|e| CmdError::Runtime(format!("cannot write {}: {e}", args.out.display())))?;
    println!(
        "wrote {}: {} centroids in {} dimensions",
        args.out.display(),
        set.num_classes(),
        set.dim()
    );
    println!("min pairwise distance: {:.12}", set.min_pairwise_distance());
    println!("residual: {:.3e} ({note})", residual);
    if exit == 2 {
        eprintln!(
            "warning: repulsion solver stopped at residual {:.3e} (tolerance {:.3e}); \
             the saved set is valid but not fully settled",
            residual, args.tol
        );
    }
    Ok(exit)
}

/// `train`: build everything from the run config, train, and write
/// `model.ckpt`, `report.csv`, and `summary.json` under `out.dir`.
pub fn train_cmd(config: &Path, sets: &[String]) -> Result<u8> {
    let cfg = load_config(config, sets)?;
    let (model, train_ds, test_ds) = prepare_model(&cfg)?;
    println!(
        "training: {} steps on {} train rows ({} labeled), {} test rows",
        cfg.steps,
        train_ds.len(),
        train_ds.labeled_indices().len(),
        test_ds.len()
    );
    let t_cfg = cfg.training_config();
    let report = train(&model, &train_ds, &test_ds, &t_cfg).map_err(from_trainer)?;
    for r in &report.records {
        println!(
            "step {:>6}  lr {:.4e}  total {:>10.5}  train_acc {:.4}  test_acc {:.4}",
            r.step, r.lr, r.total, r.train_acc, r.test_acc
        );
    }
    println!(
        "final test accuracy: {:.4} (error {:.2}%)",
        report.final_test_accuracy,
        100.0 * (1.0 - report.final_test_accuracy)
    );
    println!("wall time: {:.2} s", report.wall_time_seconds);

    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CmdError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let ckpt = dir.join("model.ckpt");
    save_model(&model, &ckpt)
        .map_err(|e| CmdError::Runtime(format!("cannot write {}: {e}", ckpt.display())))?;
    write_file(&dir.join("report.csv"), &report_csv(&report))?;

    // Wall time is deliberately left out: the summary must be identical
    // across repeated runs of the same configuration.
    let last = report.records.last();
    let summary = serde_json::json!({
        "config": cfg.echo(),
        "result": {
            "steps": cfg.steps,
            "records": report.records.len(),
            "final_train_accuracy": last.map(|r| r.train_acc),
            "final_test_accuracy": report.final_test_accuracy,
            "final_test_error": 1.0 - report.final_test_accuracy,
        },
    });
    let pretty = serde_json::to_string_pretty(&summary)
        .map_err(|e| CmdError::Runtime(format!("cannot serialize summary: {e}")))?;
    write_file(&dir.join("summary.json"), &format!("{pretty}\n"))?;
    println!(
        "wrote {}, {}, {}",
        ckpt.display(),
        dir.join("report.csv").display(),
        dir.join("summary.json").display()
    );
    Ok(0)
}

fn dataset_for_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let (train_ds, test_ds) = build_data(cfg)?;
    Ok(match split {
        Split::Train => train_ds,
        Split::Test => test_ds,
    })
}

fn check_input_dim(model: &Model, ds: &Dataset) -> Result<()> {
    let expected = model.config().input_size();
    if ds.dim() != expected {
        return usage(format!(
            "checkpoint expects {expected} input values per sample, dataset provides {}",
            ds.dim()
        ));
    }
    Ok(())
}

/// `eval`: load a checkpoint, rebuild the dataset from a run config, and
/// report accuracy, error, per-class accuracy, and the mean centroid
/// distance of the normalized features.
pub fn eval_cmd(checkpoint: &Path, config: &Path, sets: &[String], split: Split) -> Result<u8> {
    let model = load_model(checkpoint).map_err(|e| CmdError::Usage(e.to_string()))?;
    let cfg = load_config(config, sets)?;
    let ds = dataset_for_split(&cfg, split)?;
    check_input_dim(&model, &ds)?;
    let eval = evaluate(&model, &ds).map_err(from_trainer)?;
    println!(
        "{split} accuracy: {:.4} (error {:.2}%) over {} rows",
        eval.accuracy,
        100.0 * (1.0 - eval.accuracy),
        ds.len()
    );
    println!("mean squared centroid distance: {:.6}", eval.mean_l1);
    for (k, acc) in eval.per_class.iter().enumerate() {
        match acc {
            Some(a) => println!("class {k}: {a:.4}"),
            None => println!("class {k}: no rows"),
        }
    }
    Ok(0)
}

/// Normalized features of every row, computed in bounded chunks.
fn normalized_features(model: &Model, ds: &Dataset) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(ds.len() * model.config().feature_dim);
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EXPORT_CHUNK) {
        let x = ds.rows_tensor(chunk).map_err(|e| CmdError::Runtime(e.to_string()))?;
        let out = model
            .forward(&x, 1.0, Mode::Eval)
            .map_err(|e| CmdError::Runtime(e.to_string()))?;
        let normalized = out
            .features
            .l2_normalize_rows(NORM_EPS)
            .map_err(|e| CmdError::Runtime(e.to_string()))?;
        flat.extend(normalized.values());
    }
    Ok(flat)
}

/// `export-features`: run the backbone over a dataset and write the
/// normalized features and the centroid set as CSV; with `--svg`, also a
/// scatter plot (two-dimensional feature spaces only).
pub fn export_features_cmd(
    checkpoint: &Path,
    config: &Path,
    sets: &[String],
    split: Split,
    svg: bool,
    out: Option<&Path>,
) -> Result<u8> {
    let model = load_model(checkpoint).map_err(|e| CmdError::Usage(e.to_string()))?;
    let d = model.config().feature_dim;
    if svg && d != 2 {
        return usage(format!(
            "--svg draws a 2-d scatter, but this checkpoint has a {d}-dimensional \
             feature space; export the CSV and project it instead"
        ));
    }
    let cfg = load_config(config, sets)?;
    let out_dir = out.unwrap_or(&cfg.out_dir);
    let ds = dataset_for_split(&cfg, split)?;
    check_input_dim(&model, &ds)?;

    let features = normalized_features(&model, &ds)?;
    let feature_ds = Dataset::new(
        features.clone(),
        vec![d],
        ds.labels().to_vec(),
        split,
        model.config().num_classes,
    )
    .map_err(|e| CmdError::Runtime(e.to_string()))?;

    let centroids = model.centroids();
    let centroid_ds = Dataset::new(
        centroids.points().to_vec(),
        vec![centroids.dim()],
        (0..centroids.num_classes() as i64).collect(),
        split,
        centroids.num_classes(),
    )
    .map_err(|e| CmdError::Runtime(e.to_string()))?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CmdError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let features_path = out_dir.join("features.csv");
    let centroids_path = out_dir.join("centroids.csv");
    export_csv(&feature_ds, &features_path).map_err(|e| CmdError::Runtime(e.to_string()))?;
    export_csv(&centroid_ds, &centroids_path).map_err(|e| CmdError::Runtime(e.to_string()))?;
    println!(
        "wrote {} ({} rows), {} ({} rows)",
        features_path.display(),
        feature_ds.len(),
        centroids_path.display(),
        centroid_ds.len()
    );
    if svg {
        let svg_path = out_dir.join("features.svg");
        write_file(&svg_path, &scatter_svg(&features, ds.labels(), centroids))?;
        println!("wrote {}", svg_path.display());
    }
    Ok(0)
}

/// `ablation`: run the default combination/sweep grid for the configured
/// base weights and write `ablation.csv`.
pub fn ablation_cmd(config: &Path, sets: &[String], seeds: &str, threads: usize) -> Result<u8> {
    let cfg = load_config(config, sets)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CmdError::Usage(format!("--seeds: invalid seed '{}'", s.trim())))
        })
        .collect::<Result<_>>()?;
    let grid = AblationGrid {
        seeds,
        ..AblationGrid::default_grid(&cfg.hp)
    };
    let (train_ds, test_ds) = build_data(&cfg)?;
    let centroids = cfg.build_centroids().map_err(CmdError::Usage)?;
    let model_cfg = cfg.model_config().map_err(|e| CmdError::Usage(e.to_string()))?;
    let cells = grid.combos.len() + grid.sweep.len();
    println!(
        "ablation: {} cells x {} seeds = {} runs on up to {} threads",
        cells,
        grid.seeds.len(),
        cells * grid.seeds.len(),
        threads.max(1)
    );
    let base = cfg.training_config();
    let cells = run_ablation_suite(
        &model_cfg,
        &centroids,
        &train_ds,
        &test_ds,
        &base,
        &grid,
        threads,
    )
    .map_err(from_trainer)?;
    println!(
        "{:<24} {:>8} {:>8} {:>8} {:>6} {:>10} {:>10}",
        "name", "lambda1", "lambda3", "lambda4", "m", "mean_err", "std_err"
    );
    for c in &cells {
        println!(
            "{:<24} {:>8} {:>8} {:>8} {:>6} {:>9.2}% {:>9.2}%",
            c.name,
            c.hp.lambda1,
            c.hp.lambda3,
            c.hp.lambda4,
            c.hp.m,
            100.0 * c.mean_error,
            100.0 * c.std_error
        );
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CmdError::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display()))
    })?;
    let path = cfg.out_dir.join("ablation.csv");
    write_file(&path, &ablation_csv(&cells))?;
    println!("wrote {}", path.display());
    Ok(0)
}

/// Fixed categorical palette; unlabeled rows are drawn grey.
const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

/// Renders normalized 2-d features on the unit circle: one dot per row,
/// colored by label, with centroid directions drawn as rays.
fn scatter_svg(features: &[f64], labels: &[i64], centroids: &CentroidSet) -> String {
    let size = 640.0;
    let to_px = |v: f64| size / 2.0 + v * size / 2.8;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n\
         <circle cx=\"{c}\" cy=\"{c}\" r=\"{r}\" fill=\"none\" stroke=\"#cccccc\"/>\n",
        c = size / 2.0,
        r = size / 2.8,
    );
    for (i, row) in features.chunks(2).enumerate() {
        let color = match labels.get(i) {
            Some(&l) if l >= 0 => PALETTE[l as usize % PALETTE.len()],
            _ => "#999999",
        };
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.55\"/>\n",
            to_px(row[0]),
            to_px(-row[1]),
        ));
    }
    for k in 0..centroids.num_classes() {
        let p = centroids.row(k);
        let color = PALETTE[k % PALETTE.len()];
        svg.push_str(&format!(
            "<line x1=\"{c}\" y1=\"{c}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" \
             font-size=\"14\" fill=\"{color}\">{k}</text>\n",
            to_px(p[0]),
            to_px(-p[1]),
            to_px(p[0] * 1.12),
            to_px(-p[1] * 1.12),
            c = size / 2.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
