//! `dynprec` command-line tool.
//!
//! Exit codes:
//! - 0: success
//! - 1: I/O or other failure
//! - 2: command-line usage error
//! - 3: configuration error
//! - 4: data error (missing or malformed dataset or metrics CSV)
//! - 5: training diverged

mod plot;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dynprec::controller::Attribute;
use dynprec::harness::metrics::{moving_average_bitwidths, parse_csv, CSV_HEADER};
use dynprec::harness::run_on;
use dynprec::mnist::{parse_idx_images, parse_idx_labels};
use dynprec::{Dataset, Error, RunConfig, RunMode, RunOutcome, Tensor};

use plot::{LineChart, Series};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_DIVERGED: u8 = 5;

#[derive(Parser)]
#[command(name = "dynprec", version, about = "Train CNNs under emulated dynamic fixed-point arithmetic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Train {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Render one or more metrics CSVs into an SVG line chart.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long, short)]
        output: PathBuf,
        /// Series labels, one per CSV. Defaults to the file (or run directory) name.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// Moving-average window for `bitwidths`.
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
    /// Parse the four MNIST IDX files and report counts and checksums.
    ValidateData {
        #[arg(default_value = "data/mnist")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PlotKind {
    TestError,
    LogLoss,
    Bitwidths,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, output_dir } => train(&config, output_dir),
        Command::Plot { csv, kind, output, labels, window } => plot_cmd(&csv, kind, &output, &labels, window),
        Command::ValidateData { dir } => validate_data(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_OTHER, format!("{}: {e}", path.display()))
}

fn train(config_path: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut config = RunConfig::from_file(config_path).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    let (train, test) = load_dataset(&config.data_dir)?;

    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    fs::write(out.join("config.toml"), config.to_toml_string()).map_err(|e| io_failure(&out, e))?;

    let csv_path = out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(|e| io_failure(&csv_path, e))?);
    let mut write_err = None;
    writeln!(csv, "{CSV_HEADER}").map_err(|e| io_failure(&csv_path, e))?;
    let outcome = run_on(&config, &train, &test, &mut |row| {
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", row.to_csv_line()).and_then(|_| csv.flush()) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(io_failure(&csv_path, e));
    }
    csv.flush().map_err(|e| io_failure(&csv_path, e))?;
    let outcome = outcome.map_err(|e| match e {
        Error::Config(_) => Failure::new(EXIT_CONFIG, e.to_string()),
        Error::Io(_) | Error::Idx { .. } | Error::LabelOutOfRange { .. } => Failure::new(EXIT_DATA, e.to_string()),
        e => Failure::new(EXIT_OTHER, e.to_string()),
    })?;

    let summary_path = out.join("summary.toml");
    fs::write(&summary_path, summary(&config, &outcome)).map_err(|e| io_failure(&summary_path, e))?;
    let weights_path = out.join("weights.bin");
    fs::write(&weights_path, encode_weights(&outcome.params)).map_err(|e| io_failure(&weights_path, e))?;

    match &outcome.divergence {
        Some(site) => Err(Failure::new(
            EXIT_DIVERGED,
            format!(
                "training diverged at {site}; {} rows kept in {}",
                outcome.rows.len(),
                csv_path.display()
            ),
        )),
        None => {
            let err = outcome.final_test_error.map_or("n/a".to_string(), |e| format!("{e:.2}%"));
            println!("done: {} iterations, test error {err}, outputs in {}", outcome.rows.len(), out.display());
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path) -> Result<(Dataset, Dataset), Failure> {
    if !dir.is_dir() {
        return Err(Failure::new(EXIT_DATA, format!("data directory {} does not exist", dir.display())));
    }
    let load = |images: &str, labels: &str| {
        Dataset::load(&dir.join(images), &dir.join(labels))
            .map_err(|e| Failure::new(EXIT_DATA, format!("{}/{{{images},{labels}}}: {e}", dir.display())))
    };
    let train = load(FILES[0], FILES[1])?;
    let test = load(FILES[2], FILES[3])?;
    Ok((train, test))
}

fn summary(config: &RunConfig, outcome: &RunOutcome) -> String {
    let mut s = String::new();
    let mode = match config.mode {
        RunMode::FloatBaseline => "float_baseline",
        RunMode::StaticFixed => "static_fixed",
        RunMode::Dps => "dps",
    };
    s.push_str(&format!("mode = \"{mode}\"\n"));
    s.push_str(&format!("iterations_completed = {}\n", outcome.rows.len()));
    if let Some(e) = outcome.final_test_error {
        s.push_str(&format!("final_test_error_pct = {e:?}\n"));
    }
    if let Some(loss) = outcome.rows.last().map(|r| r.loss) {
        if loss.is_finite() {
            s.push_str(&format!("final_loss = {loss:?}\n"));
        }
    }
    if let Some(bits) = &outcome.mean_bits {
        for a in Attribute::ALL {
            s.push_str(&format!("mean_bits_{} = {:?}\n", a.name(), bits[a]));
        }
    }
    s.push_str(&format!("diverged = {}\n", outcome.diverged()));
    if let Some(site) = &outcome.divergence {
        s.push_str(&format!("divergence_site = {:?}\n", site.to_string()));
    }
    s.push_str(&format!("wall_time_s = {:.3}\n", outcome.wall_time.as_secs_f64()));
    s
}

/// Little-endian: tensor count (u32), then per tensor its rank (u32), the
/// extents (u32 each) and the values (f64 each).
fn encode_weights(params: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn series_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn plot_cmd(csvs: &[PathBuf], kind: PlotKind, output: &Path, labels: &[String], window: usize) -> Result<(), Failure> {
    if !labels.is_empty() && labels.len() != csvs.len() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{} labels given for {} CSV files", labels.len(), csvs.len()),
        ));
    }
    if window == 0 {
        return Err(Failure::new(EXIT_CONFIG, "window must be at least 1"));
    }
    let mut series = Vec::new();
    for (i, path) in csvs.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let rows = parse_csv(&text).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
        let label = labels.get(i).cloned().unwrap_or_else(|| series_label(path));
        let x = |r: &dynprec::MetricsRow| r.iter as f64;
        match kind {
            PlotKind::TestError => series.push(Series {
                label,
                points: rows.iter().filter_map(|r| r.test_error_pct.map(|e| (x(r), e))).collect(),
            }),
            PlotKind::LogLoss => series.push(Series {
                label,
                points: rows.iter().map(|r| (x(r), r.loss.ln())).collect(),
            }),
            PlotKind::Bitwidths => {
                let iters: Vec<f64> = rows.iter().filter(|r| r.formats.is_some()).map(x).collect();
                let avg = moving_average_bitwidths(&rows, window);
                for a in Attribute::ALL {
                    series.push(Series {
                        label: format!("{label} {}", a.name()),
                        points: iters.iter().copied().zip(avg[a].iter().copied()).collect(),
                    });
                }
            }
        }
    }
    let (title, y_label) = match kind {
        PlotKind::TestError => ("Test error", "test error (%)"),
        PlotKind::LogLoss => ("Log of training loss", "ln(loss)"),
        PlotKind::Bitwidths => ("Moving average bitwidths during training", "IL + FL (bits)"),
    };
    let chart = LineChart { title: title.into(), x_label: "iteration".into(), y_label: y_label.into(), series };
    fs::write(output, chart.render()).map_err(|e| io_failure(output, e))?;
    Ok(())
}

const FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn validate_data(dir: &Path) -> Result<(), Failure> {
    let mut counts = [0usize; 4];
    for (i, name) in FILES.iter().enumerate() {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
        let data_err = |e: Error| Failure::new(EXIT_DATA, format!("{}: {e}", path.display()));
        let detail = if i % 2 == 0 {
            let images = parse_idx_images(&bytes).map_err(data_err)?;
            counts[i] = images.count();
            format!("{} images of {}x{}", images.count(), images.rows, images.cols)
        } else {
            let labels = parse_idx_labels(&bytes).map_err(data_err)?;
            counts[i] = labels.len();
            format!("{} labels", labels.len())
        };
        println!("{name}: {detail}, {} bytes, crc32 {:08x}", bytes.len(), crc32fast::hash(&bytes));
    }
    for pair in [(0, 1), (2, 3)] {
        if counts[pair.0] != counts[pair.1] {
            return Err(Failure::new(
                EXIT_DATA,
                format!(
                    "{} holds {} images but {} holds {} labels",
                    FILES[pair.0], counts[pair.0], FILES[pair.1], counts[pair.1]
                ),
            ));
        }
    }
    println!("ok: {} training and {} test examples", counts[0], counts[2]);
    Ok(())
}
