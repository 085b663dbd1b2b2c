use std::fmt::Write as _;
use std::path::Path;

use nucleiquant::dataset::{class_counts, DataError, LabelSet, LabeledPatchSet, PatchImage};
use nucleiquant::metrics::{evaluate as evaluate_sets, Aggregation, MetricsError};
use nucleiquant::mgtunet::{
    decode_instances, full_suite, images_to_tensor, load_weights, save_weights, targets_from_labels, train,
    DecoderLayout, MgtError, NetConfig, Network, TrainConfig, TrainError,
};
use nucleiquant::nn::grad_check::GradCheckConfig;
use nucleiquant::nn::{OptimizerKind, OptimizerState, StepDecay};
use nucleiquant::npy::{read_npy, read_npy_header, write_npy, DType, NpyArray, NpyData, NpyError};

use crate::{CountArgs, EvaluateArgs, ForwardArgs, Format, GradcheckArgs, InspectArgs, Layout, TrainArgs};

pub const EXIT_IO: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_SHAPE: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;
pub const EXIT_NON_FINITE: u8 = 6;
pub const EXIT_WEIGHTS: u8 = 7;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn data_error(path: &Path, e: DataError) -> CliError {
    let code = match &e {
        DataError::Npy(_) => EXIT_PARSE,
        DataError::ShapeMismatch(_) => EXIT_SHAPE,
        _ => EXIT_VALIDATION,
    };
    CliError::new(code, format!("{}: {e}", path.display()))
}

fn metrics_error(e: MetricsError) -> CliError {
    let code = match e {
        MetricsError::ShapeMismatch(_) => EXIT_SHAPE,
        _ => EXIT_VALIDATION,
    };
    CliError::new(code, e.to_string())
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn read_array(path: &Path) -> CliResult<NpyArray> {
    read_npy(&read_bytes(path)?).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, content: &[u8]) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(content)
                .map_err(|e| CliError::new(EXIT_IO, format!("stdout: {e}")))
        }
    }
}

fn load_labels(path: &Path, arr: &NpyArray, classes: usize) -> CliResult<LabelSet> {
    LabelSet::from_npy(arr, classes).map_err(|e| data_error(path, e))
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult {
    let gt_arr = read_array(&args.gt)?;
    let pred_arr = read_array(&args.pred)?;
    if gt_arr.shape != pred_arr.shape {
        return Err(CliError::new(
            EXIT_SHAPE,
            format!("gt shape {:?} does not match pred shape {:?}", gt_arr.shape, pred_arr.shape),
        ));
    }
    let gt = load_labels(&args.gt, &gt_arr, args.classes)?;
    let pred = load_labels(&args.pred, &pred_arr, args.classes)?;
    let mode = if args.per_image {
        Aggregation::PerImage
    } else {
        Aggregation::Dataset
    };
    let report = evaluate_sets(&gt, &pred, mode).map_err(metrics_error)?;
    let format = args.format.unwrap_or_else(|| match &args.out {
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => Format::Csv,
        _ => Format::Json,
    });
    let mut text = match format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv(),
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    write_output(args.out.as_deref(), text.as_bytes())
}

pub fn count(args: &CountArgs) -> CliResult {
    let arr = read_array(&args.labels)?;
    let set = load_labels(&args.labels, &arr, args.classes)?;
    let mut out = String::from("patch_index");
    for t in 1..=args.classes {
        write!(out, ",class_{t}").unwrap();
    }
    out.push('\n');
    let mut totals = vec![0u64; args.classes];
    for (i, patch) in set.patches.iter().enumerate() {
        let counts = class_counts(patch, args.classes);
        write!(out, "{i}").unwrap();
        for (total, c) in totals.iter_mut().zip(&counts) {
            *total += c;
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out.push_str("TOTAL");
    for t in &totals {
        write!(out, ",{t}").unwrap();
    }
    out.push('\n');
    write_output(args.out.as_deref(), out.as_bytes())
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult {
    let cfg = GradCheckConfig {
        tol: args.tol,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let reports = full_suite(&cfg);
    let passed = reports.iter().all(|r| r.passed);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("reports serialize"));
    } else {
        for r in &reports {
            println!(
                "{:<40} max_rel_err {:.3e}  tol {:.1e}  {}",
                r.op,
                r.max_rel_err(),
                r.tol,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        println!("{}", if passed { "PASS" } else { "FAIL" });
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::new(EXIT_GRADCHECK, "gradient check failed"))
    }
}

fn images_of(set: &LabeledPatchSet) -> Vec<PatchImage> {
    (0..set.len()).map(|i| set.image(i)).collect()
}

fn model_error(e: MgtError) -> CliError {
    let code = match e {
        MgtError::Config(_) | MgtError::Label(_) => EXIT_VALIDATION,
        MgtError::Nn(_) => EXIT_SHAPE,
        MgtError::Parse(_) => EXIT_PARSE,
        MgtError::VersionMismatch(_) | MgtError::PathMismatch { .. } => EXIT_WEIGHTS,
    };
    CliError::new(code, e.to_string())
}

pub fn train_toy(args: &TrainArgs) -> CliResult {
    let kind: OptimizerKind = args.optimizer.parse().map_err(|e: String| CliError::new(EXIT_PARSE, e))?;
    let set = nucleiquant::dataset::load_patch_set(&read_bytes(&args.images)?, &read_bytes(&args.labels)?, args.classes)
        .map_err(|e| data_error(&args.labels, e))?;
    if set.is_empty() {
        return Err(CliError::new(EXIT_VALIDATION, "dataset has no patches"));
    }
    let config = NetConfig {
        base_width: args.base_width,
        num_classes: args.classes,
        input_channels: 3,
        group_count: args.groups,
        skip_connections: !args.no_skip,
        layout: match args.layout {
            Layout::Stacked => DecoderLayout::Stacked,
            Layout::Interleaved => DecoderLayout::Interleaved,
        },
        input_extent: (set.height(), set.width()),
        seed: args.seed,
    };
    let mut net = Network::build(config).map_err(model_error)?;
    let images = images_to_tensor(&images_of(&set)).map_err(model_error)?;
    let targets = targets_from_labels(&set.label_set().patches, args.classes).map_err(model_error)?;
    let mut opt = OptimizerState::new(kind, args.lr);
    if let Some(every) = args.decay_every {
        opt = opt.with_decay(StepDecay {
            every,
            factor: args.decay_factor,
        });
    }
    let cfg = TrainConfig {
        steps: args.steps,
        batch: args.batch,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&mut net, &images, &targets, &mut opt, &cfg, |t, loss| {
        println!("step {t} loss {loss:.12e}");
    })
    .map_err(|e| match e {
        TrainError::Model(m) => model_error(m),
        e @ TrainError::NonFinite { .. } => CliError::new(EXIT_NON_FINITE, e.to_string()),
    })?;
    if outcome.stopped_early {
        println!("stopped early after {} steps: loss change below {:e}", outcome.steps_taken, cfg.min_delta);
    }
    let (first, last) = (outcome.losses[0], *outcome.losses.last().unwrap());
    println!("initial {first:.12e} final {last:.12e} ratio {:.6}", last / first);
    if let Some(path) = &args.save {
        write_output(Some(path), &save_weights(&net))?;
    }
    Ok(())
}

pub fn forward(args: &ForwardArgs) -> CliResult {
    let net = load_weights(&read_bytes(&args.weights)?).map_err(|e| {
        let mut err = model_error(e);
        err.message = format!("{}: {}", args.weights.display(), err.message);
        err
    })?;
    let arr = read_array(&args.images)?;
    if arr.dtype() != DType::U8 {
        return Err(CliError::new(
            EXIT_VALIDATION,
            format!("{}: images must be u8, found {}", args.images.display(), arr.dtype().descr()),
        ));
    }
    let &[n, h, w, c] = arr.shape.as_slice() else {
        return Err(CliError::new(
            EXIT_SHAPE,
            format!("{}: images must be [N, H, W, C], got {:?}", args.images.display(), arr.shape),
        ));
    };
    let config = net.config();
    if (h, w) != config.input_extent || c != config.input_channels {
        return Err(CliError::new(
            EXIT_WEIGHTS,
            format!(
                "weights expect {}x{}x{} patches, images are {h}x{w}x{c}",
                config.input_extent.0, config.input_extent.1, config.input_channels
            ),
        ));
    }
    let NpyData::U8(pixels) = &arr.data else { unreachable!("checked dtype") };
    let stride = h * w * c;
    let mut patches = Vec::with_capacity(n);
    for start in (0..n).step_by(args.batch.max(1)) {
        let end = (start + args.batch.max(1)).min(n);
        let images: Vec<PatchImage> = (start..end)
            .map(|i| PatchImage {
                height: h,
                width: w,
                channels: c,
                data: pixels[i * stride..(i + 1) * stride].to_vec(),
            })
            .collect();
        let x = images_to_tensor(&images).map_err(model_error)?;
        let logits = net.forward(&x).map_err(model_error)?;
        patches.extend(decode_instances(&logits, args.min_size));
    }
    let labels = LabelSet {
        num_classes: config.num_classes,
        patches,
    };
    let out = if n == 0 {
        NpyArray::new(vec![0, h, w, 2], NpyData::U16(Vec::new())).expect("empty array")
    } else {
        labels.to_npy().map_err(|e| data_error(&args.out, e))?
    };
    write_output(Some(&args.out), &write_npy(&out))
}

pub fn inspect(args: &InspectArgs) -> CliResult {
    let bytes = read_bytes(&args.file)?;
    let parse_err = |e: NpyError| CliError::new(EXIT_PARSE, format!("{}: {e}", args.file.display()));
    let header = read_npy_header(&bytes).map_err(parse_err)?;
    println!("file: {}", args.file.display());
    println!("version: {}.{}", header.version.0, header.version.1);
    println!("dtype: {}", header.dtype.descr());
    let dims: Vec<String> = header.shape.iter().map(|d| d.to_string()).collect();
    let shape = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.join(", ")),
    };
    println!("shape: {shape}");
    println!("order: {}", if header.fortran_order { "fortran" } else { "c" });
    let arr = read_npy(&bytes).map_err(parse_err)?;
    let channels = if arr.shape.len() >= 2 { *arr.shape.last().unwrap() } else { 1 };
    if channels == 0 || arr.is_empty() {
        println!("no elements");
        return Ok(());
    }
    for ch in 0..channels {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in (ch..arr.len()).step_by(channels) {
            let v = arr.data.get_f64(i);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        println!("channel {ch}: min {lo} max {hi}");
    }
    Ok(())
}
