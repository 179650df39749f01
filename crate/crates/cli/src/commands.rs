use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mfsnet::backbone::BackboneKind;
use mfsnet::checkpoint;
use mfsnet::harness::{
    architecture_notes, compare_preprocessing, component_rows, csv_header, evaluate, load_dataset,
    orientation_rows, prepare, report_header, run_ablation, run_cv, sweep_delta, synth_dataset,
    synth_samples, train_model, AblationLayout, HarnessConfig, Sample, SourceTag, SynthOptions,
};
use mfsnet::imgproc::{io, remove_hair_stages, resize_rgb, HairRemoval};
use mfsnet::metrics::{per_image_csv, CvTable};
use mfsnet::model::ArchConfig;

use crate::{BackboneArg, Cli, Command, DataOpts, GlobalArgs, LayoutArg};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Preprocess {
            input,
            out,
            threshold,
            kernel,
            radius,
            side,
            dump_stages,
        } => {
            let params = HairRemoval {
                threshold: threshold.unwrap_or(cfg.preprocess.threshold),
                kernel: kernel.unwrap_or(cfg.preprocess.kernel),
                radius: radius.unwrap_or(cfg.preprocess.radius),
            };
            preprocess(&input, &out, side, &params, dump_stages)
        }
        Command::Synth {
            out,
            count,
            side,
            no_hair,
        } => {
            let opts = SynthOptions {
                side,
                hair: !no_hair,
                ..SynthOptions::default()
            };
            let index = synth_dataset(&out, count, cfg.seed, &opts)?;
            log::info!("wrote {} samples to {}", index.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            checkpoint: path,
            losses,
        } => train(&cfg, &data, &path, losses.as_deref()),
        Command::Infer {
            checkpoint: path,
            input,
            out,
        } => infer(&cfg, &path, &input, &out),
        Command::Eval {
            data,
            checkpoint: path,
            out,
        } => eval(&cfg, &data, &path, &out),
        Command::Cv {
            data,
            out,
            compare_preprocessing: compare,
        } => cv(&cfg, &data, &out, compare),
        Command::Ablate { data, out, layout } => ablate(&cfg, &data, &out, layout),
        Command::SweepDelta { data, out, deltas } => {
            let (samples, name) = load_samples(&cfg, &data)?;
            let sweep = sweep_delta(&samples, &cfg, &deltas, &name)?;
            fs::create_dir_all(&out)?;
            write(
                &out.join("delta_sweep.csv"),
                &(csv_header(&cfg) + &sweep.to_csv()),
            )?;
            let mut md = report_header(
                &format!("δ sweep on {name}"),
                &cfg,
                &architecture_notes(&cfg, &ArchConfig::proposed()),
            );
            md.push_str("| δ | mDSC | mIoU |\n|---|---|---|\n");
            for (delta, run) in &sweep.points {
                let avg = run.average();
                let std = avg.std.unwrap_or_default();
                md.push_str(&format!(
                    "| {delta:.2} | {:.3}±{:.3} | {:.3}±{:.3} |\n",
                    avg.mean.dsc, std.dsc, avg.mean.iou, std.iou
                ));
            }
            write(&out.join("delta_sweep.md"), &md)
        }
    }
}

/// Config file (or defaults) with command-line overrides applied on top.
pub fn resolve_config(args: &GlobalArgs) -> Result<HarnessConfig> {
    let mut cfg = match &args.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.folds {
        cfg.cv.folds = k;
    }
    if let Some(delta) = args.delta {
        cfg.loss.delta = delta;
    }
    if args.no_preprocess {
        cfg.preprocess.enabled = false;
    }
    if let Some(b) = args.backbone {
        cfg.model.backbone = match b {
            BackboneArg::Toy => BackboneKind::Res2netToy,
            BackboneArg::Full => BackboneKind::Res2netFull,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_samples(cfg: &HarnessConfig, data: &DataOpts) -> Result<(Vec<Sample>, String)> {
    let tag: SourceTag = data.tag.parse()?;
    if let Some(n) = data.source.synthetic {
        let samples = synth_samples(n, cfg.seed, &SynthOptions::default());
        return Ok((samples, SourceTag::Synthetic.to_string()));
    }
    let root = data
        .source
        .data
        .as_ref()
        .expect("clap requires one data source");
    let index = load_dataset(root, tag)?;
    if index.is_empty() {
        bail!("no image/mask pairs under {}", root.display());
    }
    Ok((index.load_samples()?, tag.to_string()))
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && io::is_supported_image(p));
    paths.sort();
    Ok(paths)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn preprocess(
    input: &Path,
    out: &Path,
    side: usize,
    params: &HairRemoval,
    dump: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let paths = images_in(input)?;
    for path in &paths {
        let img = resize_rgb(&io::load_rgb(path)?, side)?;
        let name = stem(path);
        let stages = remove_hair_stages(&img, params)
            .with_context(|| format!("processing {}", path.display()))?;
        io::save_rgb(&stages.inpainted, &out.join(format!("{name}.png")))?;
        if dump {
            let dir = out.join("stages").join(&name);
            fs::create_dir_all(&dir)?;
            io::save_rgb(&stages.original, &dir.join("1_original.png"))?;
            io::save_gray(&stages.grayscale, &dir.join("2_grayscale.png"))?;
            io::save_gray(&stages.blackhat, &dir.join("3_blackhat.png"))?;
            io::save_mask(&stages.mask, &dir.join("4_mask.png"))?;
            io::save_rgb(&stages.inpainted, &dir.join("5_inpainted.png"))?;
        }
        log::debug!("{name}: {} hair pixels", stages.mask.count());
    }
    log::info!("preprocessed {} images into {}", paths.len(), out.display());
    Ok(())
}

fn train(cfg: &HarnessConfig, data: &DataOpts, path: &Path, losses: Option<&Path>) -> Result<()> {
    let (samples, name) = load_samples(cfg, data)?;
    let prepared = prepare(&samples, &cfg.preprocess())?;
    let refs: Vec<_> = prepared.iter().collect();
    let model = cfg.model_config(&ArchConfig::proposed());
    log::info!("training on {} {name} images", refs.len());
    let trained = train_model(cfg, &model, &cfg.loss, &refs, cfg.seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(path, &model, cfg.seed, &trained.store)?;
    log::info!("wrote {}", path.display());
    if let Some(losses) = losses {
        let mut csv = csv_header(cfg) + "step,loss\n";
        for (i, l) in trained.losses.iter().enumerate() {
            csv.push_str(&format!("{},{l:.6}\n", i + 1));
        }
        write(losses, &csv)?;
    }
    Ok(())
}

fn infer(cfg: &HarnessConfig, path: &Path, input: &Path, out: &Path) -> Result<()> {
    let (net, store, meta) = checkpoint::load(path)?;
    log::info!("loaded {} (config {})", path.display(), meta.config_hash);
    fs::create_dir_all(out)?;
    let pre = cfg.preprocess();
    let paths = images_in(input)?;
    for p in &paths {
        let img = io::load_rgb(p)?;
        let mask = net.predict(&store, &img, &pre)?;
        io::save_mask(&mask, &out.join(format!("{}.png", stem(p))))?;
    }
    log::info!("segmented {} images into {}", paths.len(), out.display());
    Ok(())
}

fn eval(cfg: &HarnessConfig, data: &DataOpts, path: &Path, out: &Path) -> Result<()> {
    let (net, store, _) = checkpoint::load(path)?;
    let (samples, name) = load_samples(cfg, data)?;
    let prepared = prepare(&samples, &cfg.preprocess())?;
    let refs: Vec<_> = prepared.iter().collect();
    let report = evaluate(&net, &store, &refs, None, cfg.train.batch_size)?;
    fs::create_dir_all(out)?;
    write(
        &out.join("per_image.csv"),
        &(csv_header(cfg) + &per_image_csv(std::slice::from_ref(&report))),
    )?;
    let table = CvTable::from_folds(&name, std::slice::from_ref(&report));
    let mut md = report_header(
        &format!("Evaluation on {name}"),
        cfg,
        &[format!("checkpoint: {}", path.display())],
    );
    md.push_str(&table.to_markdown());
    write(&out.join("eval.md"), &md)
}

fn cv(cfg: &HarnessConfig, data: &DataOpts, out: &Path, compare: bool) -> Result<()> {
    let (samples, name) = load_samples(cfg, data)?;
    let arch = ArchConfig::proposed();
    let notes = architecture_notes(cfg, &arch);
    fs::create_dir_all(out)?;
    if compare {
        let cmp = compare_preprocessing(&samples, cfg, &arch, &name)?;
        let mut md = report_header(&format!("Hair removal on {name}"), cfg, &notes);
        md.push_str(&cmp.to_markdown());
        write(&out.join("preprocessing.md"), &md)?;
        for (label, run) in [("without", &cmp.without), ("with", &cmp.with)] {
            write(
                &out.join(format!("cv_{label}.csv")),
                &(csv_header(cfg) + &run.table.to_csv()),
            )?;
        }
        return Ok(());
    }
    let run = run_cv(&samples, cfg, &arch, &name)?;
    let mut md = report_header(
        &format!("{}-fold cross-validation on {name}", cfg.cv.folds),
        cfg,
        &notes,
    );
    md.push_str(&run.table.to_markdown());
    write(&out.join("cv.md"), &md)?;
    write(
        &out.join("cv.csv"),
        &(csv_header(cfg) + &run.table.to_csv()),
    )?;
    write(
        &out.join("per_image.csv"),
        &(csv_header(cfg) + &per_image_csv(&run.reports)),
    )
}

fn ablate(cfg: &HarnessConfig, data: &DataOpts, out: &Path, layout: LayoutArg) -> Result<()> {
    let (samples, name) = load_samples(cfg, data)?;
    fs::create_dir_all(out)?;
    let layouts: &[(AblationLayout, &str)] = match layout {
        LayoutArg::Orientation => &[(AblationLayout::Orientation, "orientation")],
        LayoutArg::Components => &[(AblationLayout::Components, "components")],
        LayoutArg::Both => &[
            (AblationLayout::Orientation, "orientation"),
            (AblationLayout::Components, "components"),
        ],
    };
    for &(layout, file) in layouts {
        let rows = match layout {
            AblationLayout::Orientation => orientation_rows(),
            AblationLayout::Components => component_rows(),
        };
        let table = run_ablation(&samples, cfg, &rows, layout, &name)?;
        let notes = vec![
            format!("backbone: {:?}", cfg.model.backbone),
            format!("ba_source: {}", cfg.model.ba_source),
        ];
        let mut md = report_header(&format!("Ablation ({file}) on {name}"), cfg, &notes);
        md.push_str(&table.to_markdown());
        write(&out.join(format!("ablation_{file}.md")), &md)?;
        write(
            &out.join(format!("ablation_{file}.csv")),
            &(csv_header(cfg) + &table.to_csv()),
        )?;
    }
    Ok(())
}
