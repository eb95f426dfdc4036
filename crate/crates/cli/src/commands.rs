use std::path::Path;

use tasksod::checkpoint::Checkpoint;
use tasksod::dataset::{self, BuildOptions};
use tasksod::io;
use tasksod::metrics::{self, registry_compare, BenchmarkRegistry, MetricReport, Phase};
use tasksod::model::{build_model, infer, ParamGroup};
use tasksod::synthetic;
use tasksod::training::{
    grad_check, load_samples, train_general, train_task, GradCheckOptions, Sample, Stage, TrainConfig,
    TrainOutputs, GRAD_CHECK_TOLERANCE,
};

use crate::setup::{config_lines, no_config, write_text, CliResult, Failure, Manifest};

/// Options every subcommand shares.
pub struct Common<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub out: &'a Path,
    pub deterministic: bool,
}

impl Common<'_> {
    fn lines(&self) -> CliResult<Vec<(String, String)>> {
        config_lines(self.config, self.overrides)
    }

    fn manifest(&self, command: &str) -> Manifest {
        let mut m = Manifest::new(command, self.deterministic);
        if let Some(c) = self.config {
            m.path("config_file", c);
        }
        m.path("out", self.out);
        m
    }
}

pub fn build_dataset(common: &Common, input: &Path) -> CliResult<()> {
    let mut opts = BuildOptions::default();
    for (k, v) in common.lines()? {
        match k.as_str() {
            "sigma" if v == "auto" => opts.sigma = None,
            "sigma" => opts.sigma = Some(parse_f64(&k, &v)?),
            "ratio" => opts.ratio = parse_f64(&k, &v)?,
            other => return Err(Failure::Usage(format!("unknown build-dataset key {other:?} (expected sigma, ratio)"))),
        }
    }
    let items = dataset::load_build_inputs(input)?;
    let built = items
        .iter()
        .map(|item| dataset::build_image(item, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let rejected: usize = built.iter().map(|b| b.density.rejected).sum();
    dataset::write_build_outputs(common.out, &built)?;
    let mut m = common.manifest("build-dataset");
    m.path("input", input)
        .entry("sigma", opts.sigma.map_or("auto".to_string(), |s| s.to_string()))
        .entry("ratio", opts.ratio)
        .entry("seed", "none");
    m.write(common.out)?;
    let selected: usize = built.iter().map(|b| b.table.rows.iter().filter(|r| r.selected).count()).sum();
    println!(
        "built {} masks ({selected} salient objects, {rejected} fixations rejected) in {}",
        built.len(),
        common.out.display()
    );
    Ok(())
}

pub fn stats(common: &Common, masks_dir: &Path, aam_size: Option<(usize, usize)>) -> CliResult<()> {
    no_config(&common.lines()?, "stats")?;
    let names = io::list_png_names(masks_dir)?;
    if names.is_empty() {
        return Err(Failure::Data(format!("{} holds no PNG files", masks_dir.display())));
    }
    let masks = names
        .iter()
        .map(|n| io::read_mask(&masks_dir.join(n)))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = dataset::dataset_stats(&masks)?;
    let shape = aam_size.unwrap_or(masks[0].dim());
    let aam = dataset::aam(&masks, shape)?;
    io::ensure_dir(common.out)?;
    write_text(&common.out.join("stats.csv"), &stats.to_csv())?;
    io::write_gray(&common.out.join("aam.png"), &aam)?;
    io::write_gray(
        &common.out.join("count_histogram.png"),
        &dataset::bar_chart(&stats.count_histogram, 8, 64),
    )?;
    io::write_gray(
        &common.out.join("area_histogram.png"),
        &dataset::bar_chart(&stats.area_histogram, 8, 64),
    )?;
    let mut m = common.manifest("stats");
    m.path("masks", masks_dir)
        .entry("aam_size", format!("{}x{}", shape.0, shape.1))
        .entry("seed", "none");
    m.write(common.out)?;
    println!("{} masks; statistics in {}", masks.len(), common.out.display());
    Ok(())
}

fn train_config(common: &Common, stage: Stage) -> CliResult<TrainConfig> {
    let text: String = common.lines()?.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let cfg = TrainConfig::parse_onto(TrainConfig::desk(stage), &text)?;
    if cfg.stage != stage {
        return Err(Failure::Usage(format!(
            "stage={} conflicts with train-{}",
            cfg.stage,
            stage.as_str()
        )));
    }
    Ok(cfg)
}

fn training_data(images: &Path, masks: &Path) -> CliResult<Vec<Sample>> {
    Ok(load_samples(images, masks)?)
}

pub fn train_general_cmd(common: &Common, images: &Path, masks: &Path) -> CliResult<()> {
    let cfg = train_config(common, Stage::General)?;
    let data = training_data(images, masks)?;
    let mut m = common.manifest("train-general");
    m.path("images", images).path("masks", masks).block(&cfg.echo());
    m.write(common.out)?;
    let mut model = build_model(cfg.model_config(), cfg.seed)?;
    let report = train_general(&cfg, &data, &mut model, &TrainOutputs::to(common.out))?;
    println!(
        "general stage: {} iterations, probe loss {:.4} -> {:.4}, checkpoint {}",
        report.iterations_run,
        report.initial_probe_loss,
        report.final_probe_loss,
        common.out.join("final.ckpt").display()
    );
    Ok(())
}

pub fn train_task_cmd(common: &Common, images: &Path, masks: &Path, general: Option<&Path>) -> CliResult<()> {
    let cfg = train_config(common, Stage::Task)?;
    let data = training_data(images, masks)?;
    let general_params = general.map(Checkpoint::load).transpose()?.map(|c| c.params);
    let mut m = common.manifest("train-task");
    m.path("images", images).path("masks", masks);
    if let Some(g) = general {
        m.path("general", g);
    }
    m.block(&cfg.echo());
    m.write(common.out)?;
    let mut model = build_model(cfg.model_config(), cfg.seed)?;
    let report = train_task(&cfg, &data, &mut model, general_params.as_ref(), &TrainOutputs::to(common.out))?;
    println!(
        "task stage ({}): {} iterations{}, probe loss {:.4} -> {:.4}, training-set MAE {:.4}, general digest {}",
        cfg.model_config().variant_name(),
        report.iterations_run,
        if report.stopped_early { " (target reached)" } else { "" },
        report.initial_probe_loss,
        report.final_probe_loss,
        report.final_train_mae,
        if report.general_digest_before == report.general_digest_after {
            "unchanged"
        } else {
            "CHANGED"
        }
    );
    Ok(())
}

pub fn infer_cmd(common: &Common, checkpoint: &Path, images: &Path) -> CliResult<()> {
    no_config(&common.lines()?, "infer")?;
    let ck = Checkpoint::load(checkpoint)?;
    let (config, seed) = (ck.config, ck.seed);
    let model = ck.into_model()?;
    let names = io::list_png_names(images)?;
    if names.is_empty() {
        return Err(Failure::Data(format!("{} holds no PNG files", images.display())));
    }
    io::ensure_dir(common.out)?;
    let mut m = common.manifest("infer");
    m.path("checkpoint", checkpoint).path("images", images).block(&config.echo()).entry("seed", seed);
    m.write(common.out)?;
    for name in &names {
        let image = io::read_rgb(&images.join(name))?;
        io::write_gray(&common.out.join(name), &infer(&model, &image)?)?;
    }
    println!("wrote {} saliency maps to {}", names.len(), common.out.display());
    Ok(())
}

pub fn evaluate_cmd(common: &Common, pred: &Path, gt: &Path) -> CliResult<()> {
    no_config(&common.lines()?, "evaluate")?;
    let report = metrics::evaluate(pred, gt)?;
    io::ensure_dir(common.out)?;
    write_text(&common.out.join("metrics.csv"), &report.to_csv())?;
    let mut m = common.manifest("evaluate");
    m.path("pred", pred).path("gt", gt).entry("seed", "none");
    m.write(common.out)?;
    println!("{}", report.summary());
    Ok(())
}

pub fn benchmark_cmd(
    common: &Common,
    method: &str,
    phase: &str,
    report: Option<&Path>,
    registry: Option<&Path>,
) -> CliResult<()> {
    no_config(&common.lines()?, "benchmark")?;
    let phase: Phase = phase.parse()?;
    let reg = match registry {
        Some(p) => BenchmarkRegistry::load(p)?,
        None => BenchmarkRegistry::shipped(),
    };
    let row = reg.get(method, phase)?;
    let header = "method,phase,mae,f_w_beta,f_beta,s_m";
    println!("{header}\n{}", row.to_csv_line());
    let mut out = format!("{header}\n{}\n", row.to_csv_line());
    if let Some(path) = report {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        let ours = MetricReport::from_csv(&text)?;
        let delta = registry_compare(&ours, &reg, method, phase)?;
        println!("{delta}");
        out.push_str(&format!(
            "delta,,{:.6},{:.6},{:.6},{:.6}\n",
            delta.mae, delta.f_w_beta, delta.f_beta, delta.s_m
        ));
    }
    io::ensure_dir(common.out)?;
    write_text(&common.out.join("benchmark.csv"), &out)?;
    let mut m = common.manifest("benchmark");
    m.entry("method", method).entry("phase", phase);
    if let Some(p) = report {
        m.path("report", p);
    }
    m.entry("registry", registry.map_or("shipped".to_string(), |p| p.display().to_string()))
        .entry("seed", "none");
    m.write(common.out)?;
    Ok(())
}

pub struct GradCheckArgs<'a> {
    pub images: Option<&'a Path>,
    pub masks: Option<&'a Path>,
    pub per_group: usize,
    pub epsilon: f64,
    pub groups: Option<&'a str>,
}

pub fn grad_check_cmd(common: &Common, args: &GradCheckArgs) -> CliResult<()> {
    // Small default input so the check stays within its size limits.
    let mut lines: Vec<(String, String)> = vec![("height".into(), "16".into()), ("width".into(), "32".into())];
    lines.extend(common.lines()?);
    let text: String = lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let cfg = TrainConfig::parse_onto(TrainConfig::desk(Stage::Task), &text)?;
    let data = match (args.images, args.masks) {
        (Some(i), Some(m)) => load_samples(i, m)?.into_iter().take(1).collect(),
        (None, None) => synthetic::training_set(1, cfg.height, cfg.width, cfg.seed),
        _ => return Err(Failure::Usage("--images and --masks go together".into())),
    };
    let groups = match args.groups {
        None => ParamGroup::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|g| parse_group(g.trim()))
            .collect::<CliResult<Vec<_>>>()?,
    };
    let opts = GradCheckOptions {
        epsilon: args.epsilon,
        per_group: args.per_group,
        seed: cfg.seed,
        groups,
        name_prefix: None,
    };
    let model = build_model(cfg.model_config(), cfg.seed)?;
    let mut m = common.manifest("grad-check");
    if let (Some(i), Some(k)) = (args.images, args.masks) {
        m.path("images", i).path("masks", k);
    }
    m.entry("epsilon", opts.epsilon)
        .entry("per_group", opts.per_group)
        .block(&cfg.model_config().echo())
        .entry("seed", cfg.seed);
    m.write(common.out)?;
    let report = grad_check(&model, &data, &opts)?;
    let mut csv = String::from("group,checked,max_rel_error,worst_parameter,worst_index,analytic,numeric\n");
    for g in &report.groups {
        let (name, idx, a, n) = g.worst.clone().unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:e},{name},{idx},{a:e},{n:e}\n",
            g.group.as_str(),
            g.checked,
            g.max_rel_error
        ));
        println!("{:<8} {:>4} parameters  max relative error {:.3e}", g.group.as_str(), g.checked, g.max_rel_error);
    }
    write_text(&common.out.join("gradcheck.csv"), &csv)?;
    let worst = report.max_rel_error();
    if worst >= GRAD_CHECK_TOLERANCE {
        return Err(Failure::Numerical(format!(
            "gradient check failed: max relative error {worst:e} >= {GRAD_CHECK_TOLERANCE:e}"
        )));
    }
    println!("gradient check passed (max relative error {worst:.3e} < {GRAD_CHECK_TOLERANCE:e})");
    Ok(())
}

fn parse_group(name: &str) -> CliResult<ParamGroup> {
    ParamGroup::ALL
        .into_iter()
        .find(|g| g.as_str() == name)
        .ok_or_else(|| Failure::Usage(format!("unknown parameter group {name:?} (general, akt, task, decoder)")))
}

fn parse_f64(key: &str, value: &str) -> CliResult<f64> {
    value
        .parse()
        .map_err(|_| Failure::Usage(format!("{key}: expected a number, got {value:?}")))
}

