//! Command-line entry point: `train` runs the full pipeline from a config
//! file, `evaluate` re-scores a saved model, `predict` writes class maps.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O failure, 3 validation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use jigsawhsi::config::{parse_config, FitScope, RunConfig};
use jigsawhsi::decompose::{
    self, cube_to_matrix, load_decomposer, save_decomposer, transform_cube, Decomposer,
    DecomposeError,
};
use jigsawhsi::graph::{build, load_checkpoint, save_checkpoint, GraphError, Model};
use jigsawhsi::io::{read_cube, read_labels, write_class_map, HsiCube, IoError, LabelRaster};
use jigsawhsi::metrics::{classify_scene, render_report, ConfusionMatrix};
use jigsawhsi::tiler::{build_dataset, random_split, stratified_split, TileSet, TilerError};
use jigsawhsi::trainer::{evaluate, train, TrainError};

#[derive(Parser)]
#[command(name = "jigsawhsi", version, about = "Hyperspectral pixel classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write all run artifacts.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Recompute the metrics report for a saved model without retraining.
    Evaluate {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        decomposer: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Classify a scene with a saved model; writes unmasked (and, when
    /// labels are given, masked) class maps.
    Predict {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        decomposer: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        labels: Option<PathBuf>,
    },
}

const EXIT_IO: u8 = 2;
const EXIT_VALIDATION: u8 = 3;

struct AppError {
    code: u8,
    message: String,
}

impl AppError {
    fn io(message: String) -> Self {
        Self {
            code: EXIT_IO,
            message,
        }
    }

    fn validation(message: String) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message,
        }
    }
}

impl From<IoError> for AppError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::File { .. } => AppError::io(e.to_string()),
            _ => AppError::validation(e.to_string()),
        }
    }
}

impl From<DecomposeError> for AppError {
    fn from(e: DecomposeError) -> Self {
        match e {
            DecomposeError::File { .. } => AppError::io(e.to_string()),
            DecomposeError::Io(inner) => inner.into(),
            _ => AppError::validation(e.to_string()),
        }
    }
}

impl From<GraphError> for AppError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::File { .. } => AppError::io(e.to_string()),
            _ => AppError::validation(e.to_string()),
        }
    }
}

impl From<TilerError> for AppError {
    fn from(e: TilerError) -> Self {
        AppError::validation(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Graph(g) => g.into(),
            TrainError::Tiler(t) => t.into(),
            _ => AppError::validation(e.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, AppError> {
    fs::read_to_string(path).map_err(|e| AppError::io(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, AppError> {
    let text = read_text(path)?;
    parse_config(&text)
        .map_err(|e| AppError::validation(format!("{}: {e}", path.display())))
}

fn split_tiles(cfg: &RunConfig, tiles: &TileSet) -> Result<(TileSet, TileSet), AppError> {
    let split = if cfg.stratified {
        stratified_split(tiles, cfg.train_frac, cfg.seed)?
    } else {
        random_split(tiles, cfg.train_frac, cfg.seed)?
    };
    Ok(split)
}

/// Sample matrix the decomposition is fitted on: every pixel for
/// `fit_scope = full`, or only the training-split pixels for `train`.
/// The per-pixel split membership matches the later tile split because
/// both draw from the same seeded shuffle over the same label raster.
fn fit_matrix(
    cfg: &RunConfig,
    cube: &HsiCube,
    labels: &LabelRaster,
) -> Result<DMatrix<f64>, AppError> {
    match cfg.fit_scope {
        FitScope::Full => Ok(cube_to_matrix(cube)),
        FitScope::Train => {
            let pixels = build_dataset(cube, labels, 1)?;
            let (train_pixels, _) = split_tiles(cfg, &pixels)?;
            let rows = train_pixels.len();
            let mut m = DMatrix::zeros(rows, cube.bands);
            for (r, t) in train_pixels.tiles.iter().enumerate() {
                for b in 0..cube.bands {
                    m[(r, b)] = t.data[b] as f64;
                }
            }
            Ok(m)
        }
    }
}

struct Scene {
    reduced: HsiCube,
    labels: LabelRaster,
}

fn prepare_scene(cfg: &RunConfig, decomposer: &Decomposer) -> Result<Scene, AppError> {
    let cube = read_cube(&cfg.cube_path)?;
    let labels = read_labels(&cfg.labels_path)?;
    if labels.height != cube.height || labels.width != cube.width {
        return Err(AppError::validation(format!(
            "labels are {}x{} but the cube is {}x{}",
            labels.height, labels.width, cube.height, cube.width
        )));
    }
    let reduced = transform_cube(decomposer, &cube)?;
    Ok(Scene { reduced, labels })
}

fn print_summary(cm: &ConfusionMatrix) -> Result<(), AppError> {
    let oa = cm.overall_accuracy().map_err(|e| AppError::validation(e.to_string()))?;
    let kappa = cm.cohen_kappa().map_err(|e| AppError::validation(e.to_string()))?;
    let aa = cm.average_accuracy().map_err(|e| AppError::validation(e.to_string()))?;
    println!("OA: {oa:.2}  Kappa: {kappa:.2}  AA: {aa:.2}");
    Ok(())
}

fn write_artifact(path: &Path, content: &str) -> Result<(), AppError> {
    fs::write(path, content).map_err(|e| AppError::io(format!("{}: {e}", path.display())))
}

fn cmd_train(config_path: &Path) -> Result<(), AppError> {
    let cfg = load_config(config_path)?;
    let cube = read_cube(&cfg.cube_path)?;
    let labels = read_labels(&cfg.labels_path)?;
    if labels.height != cube.height || labels.width != cube.width {
        return Err(AppError::validation(format!(
            "labels are {}x{} but the cube is {}x{}",
            labels.height, labels.width, cube.height, cube.width
        )));
    }

    let samples = fit_matrix(&cfg, &cube, &labels)?;
    let decomposer = decompose::fit(
        cfg.decomposition,
        &samples,
        cfg.input_channels,
        cfg.seed,
    )?;
    let reduced = transform_cube(&decomposer, &cube)?;

    let tiles = build_dataset(&reduced, &labels, cfg.window_size)?;
    let (train_tiles, test_tiles) = split_tiles(&cfg, &tiles)?;

    let spec = cfg.network_spec(tiles.num_classes as usize);
    let mut model: Model<f32> = build(&spec, cfg.seed)?;
    let history = train(&mut model, &train_tiles, &cfg.train_config())?;
    let (cm, _) = evaluate(&model, &test_tiles)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| AppError::io(format!("{}: {e}", out.display())))?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    save_decomposer(&decomposer, &out.join("decomposer.bin"))?;
    write_artifact(&out.join("history.csv"), &history.to_csv())?;
    let report = render_report(&cm).map_err(|e| AppError::validation(e.to_string()))?;
    write_artifact(&out.join("report.txt"), &report)?;
    write_artifact(&out.join("confusion.csv"), &cm.to_csv())?;

    println!(
        "trained {} epochs (best {}), artifacts in {}",
        history.stopped_epoch,
        history.best_epoch,
        out.display()
    );
    print_summary(&cm)
}

fn cmd_evaluate(
    model_path: &Path,
    decomposer_path: &Path,
    config_path: &Path,
) -> Result<(), AppError> {
    let cfg = load_config(config_path)?;
    let model = load_checkpoint(model_path)?;
    let decomposer = load_decomposer(decomposer_path)?;
    let scene = prepare_scene(&cfg, &decomposer)?;

    let tiles = build_dataset(&scene.reduced, &scene.labels, cfg.window_size)?;
    let expected = cfg.network_spec(tiles.num_classes as usize);
    if model.spec != expected {
        return Err(AppError::validation(format!(
            "checkpoint {} does not match the configured network",
            model_path.display()
        )));
    }
    let (_, test_tiles) = split_tiles(&cfg, &tiles)?;
    let (cm, _) = evaluate(&model, &test_tiles)?;
    print!("{}", render_report(&cm).map_err(|e| AppError::validation(e.to_string()))?);
    Ok(())
}

fn cmd_predict(
    model_path: &Path,
    decomposer_path: &Path,
    input: &Path,
    output: &Path,
    labels_path: Option<&Path>,
) -> Result<(), AppError> {
    let model = load_checkpoint(model_path)?;
    let decomposer = load_decomposer(decomposer_path)?;
    let cube = read_cube(input)?;
    let reduced = transform_cube(&decomposer, &cube)?;
    if reduced.bands != model.spec.input_channels {
        return Err(AppError::validation(format!(
            "decomposer yields {} channels but the model expects {}",
            reduced.bands, model.spec.input_channels
        )));
    }

    let map = classify_scene(&model, &reduced, None, false);
    write_class_map(&map, output)?;
    println!("wrote class map {}", output.with_extension("hdr").display());

    if let Some(lp) = labels_path {
        let labels = read_labels(lp)?;
        if labels.height != cube.height || labels.width != cube.width {
            return Err(AppError::validation(format!(
                "labels are {}x{} but the cube is {}x{}",
                labels.height, labels.width, cube.height, cube.width
            )));
        }
        let masked = classify_scene(&model, &reduced, Some(&labels), true);
        let stem = output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "map".into());
        let masked_base = output.with_file_name(format!("{stem}_masked"));
        write_class_map(&masked, &masked_base)?;
        println!(
            "wrote masked class map {}",
            masked_base.with_extension("hdr").display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; everything
            // else is a usage error.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Evaluate {
            model,
            decomposer,
            config,
        } => cmd_evaluate(model, decomposer, config),
        Command::Predict {
            model,
            decomposer,
            input,
            output,
            labels,
        } => cmd_predict(model, decomposer, input, output, labels.as_deref()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
