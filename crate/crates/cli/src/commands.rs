use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use inpaint_core::distortion::{class_counts, plan_disc_dataset, Severity};
use inpaint_core::engine::{
    inpaint, BundleInfo, EarlyStop, InpaintRequest, InpaintResult, ResultWriter,
};
use inpaint_core::imaging::{
    apply_fill, decode_image_native, load_mask, load_sketch, save_image, FillPolicy, Image, Mask,
};
use inpaint_core::models::{load_bundle, ModelBundle};
use inpaint_core::synth::{synth_faces, write_faces};
use inpaint_core::training::{
    build_refiner_samples, load_image_dir, read_refiner_samples, train_crg, train_discriminator,
    train_refiner, write_disc_dataset, write_refiner_samples, DiscDataset, Pipeline, TrainConfig,
    TrainReport,
};
use inpaint_service::ServiceConfig;

use crate::args::{
    Command, EngineArgs, FillKind, GridArgs, InpaintArgs, ServeArgs, SynthDistortArgs,
    SynthFacesArgs, TrainArgs,
};

/// Exit code 2 for usage problems, 1 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn require_file(flag: &str, path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{flag}: file not found: {}", path.display()))
    }
}

fn require_dir(flag: &str, path: &Path) -> Outcome {
    if path.is_dir() {
        Ok(())
    } else {
        usage(format!("{flag}: directory not found: {}", path.display()))
    }
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::TrainCrg(a) => train(Pipeline::Crg, a),
        Command::TrainDisc(a) => train(Pipeline::Discriminator, a),
        Command::TrainRefiner(a) => train(Pipeline::Refiner, a),
        Command::SynthDistort(a) => synth_distort(a),
        Command::SynthFaces(a) => synth_faces_cmd(a),
        Command::Inpaint(a) => inpaint_cmd(a),
        Command::Grid(a) => grid(a),
        Command::Serve(a) => serve(a),
    }
}

fn train(p: Pipeline, a: TrainArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => {
            require_file("--config", path)?;
            TrainConfig::load(path, Some(p)).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => TrainConfig::defaults(p),
    };
    if let Some(d) = a.data {
        cfg.data_dir = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        if p == Pipeline::Crg {
            cfg.encoder_epochs = e;
        }
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(data) = cfg.data_dir.clone() else {
        return usage("--data is required (or data_dir in the config)");
    };
    require_dir("--data", &data)?;
    if cfg.out_dir.is_none() {
        return usage("--out is required (or out_dir in the config)");
    }
    if let Some(b) = &a.bundle {
        require_file("--bundle", b)?;
    }
    let base = a.bundle.as_deref().map(load_bundle).transpose()?;

    let report = match p {
        Pipeline::Crg => {
            if base.is_some() {
                return usage("--bundle is not used by train-crg");
            }
            let images = load_image_dir(&data, cfg.arch.resolution)?;
            println!("training on {} images", images.len());
            train_crg(&cfg, &images)?.1
        }
        Pipeline::Discriminator => {
            let res = base
                .as_ref()
                .map_or(cfg.arch.resolution, |b| b.arch.resolution);
            if !data.join("manifest.jsonl").is_file() {
                return usage(format!(
                    "--data: {} has no manifest.jsonl; create one with synth-distort",
                    data.display()
                ));
            }
            let ds = DiscDataset::load_dir(&data, res)?;
            println!("training on {} labelled samples", ds.len());
            train_discriminator(&cfg, &ds, base)?.1
        }
        Pipeline::Refiner => {
            let Some(coarse) = base else {
                return usage("train-refiner needs --bundle with a trained generator and encoder");
            };
            let res = cfg.arch.refiner_resolution;
            let samples = if data.join("index.jsonl").is_file() {
                read_refiner_samples(&data, res)?
            } else {
                let images = load_image_dir(&data, res)?;
                println!("building refiner samples from {} images", images.len());
                let samples = build_refiner_samples(&coarse, &images, &cfg)?;
                let dir = cfg
                    .out_dir
                    .as_ref()
                    .expect("checked above")
                    .join("refiner_samples");
                write_refiner_samples(&dir, &samples)?;
                samples
            };
            train_refiner(&cfg, &samples, Some(coarse))?.1
        }
    };
    print_report(&report, cfg.out_dir.as_deref().expect("checked above"));
    Ok(())
}

fn print_report(report: &TrainReport, out: &Path) {
    if let Some(best) = report.best_record() {
        let val = best.val_loss.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!(
            "best: {} epoch {} (train {:.5}, val {val})",
            best.phase, best.epoch, best.train_loss
        );
    }
    println!(
        "{} epochs in {:.1}s",
        report.epochs.len(),
        report.wall_clock_s
    );
    println!("bundle: {}", out.join("bundle.ckpt").display());
}

fn synth_distort(a: SynthDistortArgs) -> Outcome {
    let (names, images): (Vec<String>, Vec<Image>) = match &a.sources {
        Some(dir) => {
            require_dir("--sources", dir)?;
            load_image_dir(dir, a.size)?.into_iter().unzip()
        }
        None => {
            let faces = synth_faces(a.faces, a.size, a.seed);
            (
                (0..faces.len())
                    .map(|i| format!("synthetic_{i:05}"))
                    .collect(),
                faces,
            )
        }
    };
    let records = plan_disc_dataset(&names, a.total, a.seed)?;
    write_disc_dataset(&a.out, &records, &images)?;
    let count = |s: Severity| records.iter().filter(|r| r.severity == s).count();
    let (c, m, h) = class_counts(a.total);
    debug_assert_eq!(
        (c, m, h),
        (
            count(Severity::None),
            count(Severity::Mild),
            count(Severity::Heavy)
        )
    );
    println!("clean {c}, mild {m}, heavy {h} -> {}", a.out.display());
    Ok(())
}

fn synth_faces_cmd(a: SynthFacesArgs) -> Outcome {
    let paths = write_faces(&a.out, a.count, a.size, a.seed)?;
    println!("wrote {} faces to {}", paths.len(), a.out.display());
    Ok(())
}

fn parse_color(s: &str) -> Result<[f32; 3], Failure> {
    let vals: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--constant-color: cannot parse {s:?}")))?;
    match vals.as_slice() {
        [r, g, b] if vals.iter().all(|v| (-1.0..=1.0).contains(v)) => Ok([*r, *g, *b]),
        _ => usage("--constant-color: expected r,g,b with values in [-1, 1]"),
    }
}

fn check_engine_files(e: &EngineArgs) -> Outcome {
    require_file("--bundle", &e.bundle)?;
    require_file("--image", &e.image)?;
    require_file("--mask", &e.mask)
}

fn read_inputs(e: &EngineArgs) -> Result<(Image, Mask), Failure> {
    let bytes =
        std::fs::read(&e.image).with_context(|| format!("reading {}", e.image.display()))?;
    let image =
        decode_image_native(&bytes).with_context(|| format!("--image {}", e.image.display()))?;
    let mask = load_mask(&e.mask, (image.height(), image.width()))
        .with_context(|| format!("--mask {}", e.mask.display()))?;
    Ok((image, mask))
}

fn policy(
    kind: FillKind,
    e: &EngineArgs,
    sketch: Option<&Path>,
    image: &Image,
    mask: &Mask,
) -> Result<FillPolicy, Failure> {
    Ok(match kind {
        FillKind::Mean => FillPolicy::Mean,
        FillKind::Noise => FillPolicy::ZeroMeanNoise {
            sigma: e.noise_sigma,
            seed: e.seed,
        },
        FillKind::White => FillPolicy::white(),
        FillKind::Black => FillPolicy::black(),
        FillKind::Constant => match &e.constant_color {
            Some(c) => FillPolicy::Constant {
                color: parse_color(c)?,
            },
            None => return usage("--fill constant needs --constant-color"),
        },
        FillKind::Sketch => {
            let Some(path) = sketch else {
                return usage("--fill sketch needs --sketch");
            };
            let s = load_sketch(path, (image.height(), image.width()))
                .with_context(|| format!("--sketch {}", path.display()))?;
            FillPolicy::Sketch(s.clipped_to(mask)?)
        }
    })
}

fn request(
    e: &EngineArgs,
    image: Image,
    mask: Mask,
    fill: FillPolicy,
    bundle: &ModelBundle,
) -> Result<InpaintRequest, Failure> {
    if e.cycles == 0 {
        return usage("--cycles must be at least 1");
    }
    if !(e.noise_sigma > 0.0 && e.noise_sigma.is_finite()) {
        return usage("--noise-sigma must be positive");
    }
    let mut req = InpaintRequest::new(image, mask, fill);
    req.cycles = e.cycles;
    req.seed = e.seed;
    req.use_discriminator = !e.no_discriminator;
    req.refine = !e.no_refine;
    if req.use_discriminator && bundle.discriminator.is_none() {
        return Err(anyhow!(
            "{} has no discriminator; pass --no-discriminator",
            e.bundle.display()
        )
        .into());
    }
    if req.refine && bundle.refiner.is_none() {
        return Err(anyhow!("{} has no refiner; pass --no-refine", e.bundle.display()).into());
    }
    Ok(req.fit_to(bundle.arch.resolution)?)
}

fn bundle_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "bundle".into(), |s| s.to_string_lossy().into_owned())
}

fn inpaint_cmd(a: InpaintArgs) -> Outcome {
    let e = &a.engine;
    check_engine_files(e)?;
    if let Some(s) = &a.sketch {
        require_file("--sketch", s)?;
    }
    let kind = a.fill.unwrap_or(if a.sketch.is_some() {
        FillKind::Sketch
    } else {
        FillKind::Mean
    });
    if a.sketch.is_some() && kind != FillKind::Sketch {
        return usage("--sketch needs --fill sketch");
    }
    let bundle = load_bundle(&e.bundle)?;
    let (image, mask) = read_inputs(e)?;
    let fill = policy(kind, e, a.sketch.as_deref(), &image, &mask)?;
    let mut req = request(e, image, mask, fill, &bundle)?;
    req.early_stop = a.early_stop.then(EarlyStop::default);
    let res = inpaint(&bundle, &req)?;
    ResultWriter::write_all(
        &e.out,
        &req,
        &res,
        &BundleInfo::of(&bundle_name(&e.bundle), &bundle),
    )?;
    print_cycles(&res);
    println!("results: {}", e.out.display());
    Ok(())
}

fn print_cycles(res: &InpaintResult) {
    println!("cycle  score");
    for (i, c) in res.trace.cycles.iter().enumerate() {
        match c.score {
            Some(s) => println!("{i:>5}  {s:.4}"),
            None => println!("{i:>5}  -"),
        }
    }
    if let Some(sel) = res.selected_cycle {
        let score = res.trace.cycles[sel].score.unwrap_or(f32::NAN);
        println!("selected cycle: {sel} (score {score:.4})");
    }
}

const GAP: usize = 2;

/// Places images left to right (`horizontal`) or top to bottom with a
/// mid-grey gap. All images share the cross-axis size.
fn concat(images: &[Image], horizontal: bool) -> Image {
    let n = images.len();
    let (h, w) = if horizontal {
        (
            images[0].height(),
            images.iter().map(Image::width).sum::<usize>() + GAP * (n - 1),
        )
    } else {
        (
            images.iter().map(Image::height).sum::<usize>() + GAP * (n - 1),
            images[0].width(),
        )
    };
    let mut data = vec![0.0f32; 3 * h * w];
    let mut offset = 0;
    for img in images {
        for c in 0..3 {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let (ty, tx) = if horizontal {
                        (y, x + offset)
                    } else {
                        (y + offset, x)
                    };
                    data[(c * h + ty) * w + tx] = img.get(c, y, x);
                }
            }
        }
        offset += if horizontal {
            img.width()
        } else {
            img.height()
        } + GAP;
    }
    Image::new(h, w, data).expect("montage shape")
}

fn mask_image(m: &Mask) -> Image {
    Image::from_fn(m.height(), m.width(), |_, y, x| {
        if m.is_known(y, x) {
            1.0
        } else {
            -1.0
        }
    })
}

fn fill_name(k: FillKind) -> &'static str {
    match k {
        FillKind::Mean => "mean",
        FillKind::Noise => "noise",
        FillKind::White => "white",
        FillKind::Black => "black",
        FillKind::Constant => "constant",
        FillKind::Sketch => "sketch",
    }
}

fn grid(a: GridArgs) -> Outcome {
    let e = &a.engine;
    check_engine_files(e)?;
    if a.fills.contains(&FillKind::Sketch) {
        return usage("--fills: sketch is only available through the inpaint command");
    }
    let mut fills = a.fills.clone();
    fills.dedup();
    let bundle = load_bundle(&e.bundle)?;
    let (image, mask) = read_inputs(e)?;
    std::fs::create_dir_all(&e.out).with_context(|| format!("creating {}", e.out.display()))?;
    let mut rows = Vec::new();
    for &kind in &fills {
        let fill = policy(kind, e, None, &image, &mask)?;
        let req = request(e, image.clone(), mask.clone(), fill, &bundle)?;
        let res = inpaint(&bundle, &req)?;
        let last = &res
            .trace
            .cycles
            .last()
            .expect("at least one cycle")
            .composite;
        let coarse = res.coarse.clone().unwrap_or_else(|| last.clone());
        let refined = res
            .refined
            .clone()
            .or_else(|| res.refined_cycles.last().cloned())
            .unwrap_or_else(|| coarse.clone());
        let masked = apply_fill(&req.image, &req.mask, &req.fill)?;
        let row = concat(
            &[
                req.image.clone(),
                mask_image(&req.mask),
                masked,
                coarse,
                refined,
            ],
            true,
        );
        let path = e.out.join(format!("{}.png", fill_name(kind)));
        save_image(&row, &path)?;
        println!("{}: {}", fill_name(kind), path.display());
        rows.push(row);
    }
    let sheet: PathBuf = e.out.join("contact_sheet.png");
    save_image(&concat(&rows, false), &sheet)?;
    println!("contact sheet: {}", sheet.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let mut listen = a.listen;
    if let Some(p) = a.port {
        listen.set_port(p);
    }
    let cfg = ServiceConfig {
        listen,
        runs_dir: a.runs,
        bundles_dir: a.bundles,
        workers: a.workers.max(1),
        bundle: a.bundle,
        default_seed: a.seed,
    };
    inpaint_service::serve(cfg)?;
    Ok(())
}
