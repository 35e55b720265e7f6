//! Command implementations. Each returns through the exit-code mapping
//! in `config`; everything they write lands under `--out`.

use std::path::{Path, PathBuf};

use gat::checkpoint::{load_checkpoint, save_checkpoint};
use gat::eval::{
    comparison_csv, compare_runs, crop_scale_sweep, evaluate, report_csv, report_json, EvalOptions,
    EvalReport,
};
use gat::manifest::{load_manifest, save_manifest, ModalityView, SampleRecord};
use gat::model::{ModelConfig, StageConfig};
use gat::patchify::PatchSpec;
use gat::synth::{synth_generate_2d, synth_generate_3d, DomainParams};
use gat::train::{
    generate_pseudo_labels, grad_check_model, run_self_training, train_stage, PseudoPolicy,
    SupervisionMode, TrainDataset, TrainOptions, TrainResult,
};
use gat::windows::WindowSpec;

use crate::config::{
    parse_view, require_file, resolve, write_output, CliError, RunConfig,
};
use crate::{
    EvalArgs, GradcheckArgs, PseudolabelArgs, SelftrainArgs, SweepArgs, SynthArgs, TrainArgs,
};

fn eval_options(opts: &TrainOptions) -> EvalOptions {
    EvalOptions { clip_len: opts.clip_len, crop_scale: opts.crop_scale, out_size: opts.out_size }
}

/// Distinct per-file seeds derived from one master seed.
fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ (k + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.frames == 0 {
        return Err(CliError::Config("--frames must be at least 1".into()));
    }
    let near = DomainParams::preset_a();
    let shifted = DomainParams::preset_b();
    let count = args.count;
    let val_count = args.val_count.unwrap_or_else(|| div_ceil(count, 5));
    let test_count = args.test_count.unwrap_or_else(|| div_ceil(count, 2));
    let count_2d = args.count_2d.unwrap_or(count);
    let clip_count = args.clip_count.unwrap_or_else(|| div_ceil(count, 10));
    let seed = args.seed;

    let (train2d, oracle) = synth_generate_2d(count_2d, &shifted, sub_seed(seed, 4), "train2d");
    let files: Vec<(&str, Vec<SampleRecord>)> = vec![
        ("train3d.jsonl", synth_generate_3d(count, 1, &near, sub_seed(seed, 0), "train3d")),
        ("val3d.jsonl", synth_generate_3d(val_count, 1, &near, sub_seed(seed, 1), "val3d")),
        ("test3d.jsonl", synth_generate_3d(test_count, 1, &near, sub_seed(seed, 2), "test3d")),
        (
            "test3d_shifted.jsonl",
            synth_generate_3d(test_count, 1, &shifted, sub_seed(seed, 3), "test3d-shifted"),
        ),
        ("train2d.jsonl", train2d),
        ("train2d_oracle.jsonl", oracle),
        ("clips3d.jsonl", synth_generate_3d(clip_count, args.frames, &near, sub_seed(seed, 5), "clips3d")),
    ];
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("--out {}: {e}", args.out.display())))?;
    for (name, records) in &files {
        save_manifest(&args.out.join(name), records)?;
        println!("{} {} records", name, records.len());
    }
    Ok(())
}

fn dataset_tag(path: &Path, taken: &[String]) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    if !taken.iter().any(|t| t == &stem) {
        return stem;
    }
    let mut k = 2;
    loop {
        let candidate = format!("{stem}-{k}");
        if !taken.iter().any(|t| t == &candidate) {
            return candidate;
        }
        k += 1;
    }
}

fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_datasets(
    paths: &[PathBuf],
    view: ModalityView,
    flag: &str,
) -> Result<Vec<TrainDataset>, CliError> {
    let mut out: Vec<TrainDataset> = Vec::with_capacity(paths.len());
    let mut tags = Vec::with_capacity(paths.len());
    for path in paths {
        require_file(path, flag)?;
        let records = load_manifest(path)?;
        let tag = dataset_tag(path, &tags);
        tags.push(tag.clone());
        out.push(TrainDataset { tag, view, records, base: manifest_base(path) });
    }
    Ok(out)
}

#[derive(serde::Serialize)]
struct TrainSummary<'a> {
    mode: &'a str,
    best_epoch: usize,
    best_val_error_deg: f64,
    epochs_run: usize,
    stopped_early: bool,
    seed: u64,
    workers: usize,
}

fn write_stage(
    rc: &RunConfig,
    result: &TrainResult,
    mode: &str,
    ckpt_name: &str,
    history_name: &str,
) -> Result<(), CliError> {
    std::fs::create_dir_all(&rc.out)
        .map_err(|e| CliError::Io(format!("--out {}: {e}", rc.out.display())))?;
    save_checkpoint(&rc.out.join(ckpt_name), &rc.model, &result.params)?;
    let history = serde_json::to_string_pretty(&result.history).expect("history serializes");
    write_output(&rc.out, history_name, &history)?;
    let summary = TrainSummary {
        mode,
        best_epoch: result.best_epoch,
        best_val_error_deg: result.best_val_error_deg,
        epochs_run: result.history.len(),
        stopped_early: result.stopped_early,
        seed: rc.options.optimizer.seed,
        workers: rc.options.workers,
    };
    write_output(&rc.out, "summary.json", &serde_json::to_string_pretty(&summary).expect("serializes"))?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mode = SupervisionMode::parse(&args.mode)
        .ok_or_else(|| CliError::Config(format!("--mode: unknown value '{}'", args.mode)))?;
    match mode {
        SupervisionMode::Supervised => {
            if args.manifest_2d.is_some() {
                return Err(CliError::Config(
                    "--mode supervised does not read --manifest-2d; drop the flag or use --mode ws".into(),
                ));
            }
        }
        SupervisionMode::WeaklySup2D => {
            if args.manifest_2d.is_none() {
                return Err(CliError::Config("--mode ws requires --manifest-2d".into()));
            }
        }
        SupervisionMode::SelfTrain3DPred | SupervisionMode::StWsge => {
            return Err(CliError::Config(format!(
                "--mode {} chains two training stages; use the selftrain command",
                mode.as_flag()
            )));
        }
    }
    let rc = resolve(&args.common)?;
    let view_3d = parse_view(&args.view_3d, "--view-3d")?;
    let view_2d = parse_view(&args.view_2d, "--view-2d")?;
    let mut datasets = load_datasets(&args.manifest_3d, view_3d, "--manifest-3d")?;
    if let Some(path) = &args.manifest_2d {
        datasets.extend(load_datasets(std::slice::from_ref(path), view_2d, "--manifest-2d")?);
    }
    require_file(&args.val, "--val")?;
    let val = load_manifest(&args.val)?;
    let result =
        train_stage(&datasets, &val, &manifest_base(&args.val), &rc.model, &rc.options, None)?;
    write_stage(&rc, &result, mode.as_flag(), "model.ckpt", "history.json")?;
    println!(
        "best epoch {} val {:.3} deg ({} epochs run)",
        result.best_epoch,
        result.best_val_error_deg,
        result.history.len()
    );
    Ok(())
}

fn parse_policy(s: &str) -> Result<PseudoPolicy, CliError> {
    match s {
        "rotate" => Ok(PseudoPolicy::Rotate),
        "raw" => Ok(PseudoPolicy::Raw),
        _ => Err(CliError::Config(format!("--policy: expected rotate or raw, got '{s}'"))),
    }
}

pub fn cmd_pseudolabel(args: &PseudolabelArgs) -> Result<(), CliError> {
    let rc = resolve(&args.common)?;
    let policy = parse_policy(&args.policy)?;
    require_file(&args.checkpoint, "--checkpoint")?;
    require_file(&args.manifest_2d, "--manifest-2d")?;
    let (cfg, params) = load_checkpoint(&args.checkpoint)?;
    let records = load_manifest(&args.manifest_2d)?;
    let base = manifest_base(&args.manifest_2d);
    let (pseudo, stats) =
        generate_pseudo_labels(&records, &base, &params, &cfg, &rc.options, policy)?;
    std::fs::create_dir_all(&rc.out)
        .map_err(|e| CliError::Io(format!("--out {}: {e}", rc.out.display())))?;
    save_manifest(&rc.out.join("pseudo.jsonl"), &pseudo)?;
    write_output(&rc.out, "pseudo_stats.json", &serde_json::to_string_pretty(&stats).expect("serializes"))?;
    println!("{} records pseudo-labeled, {} degenerate", stats.total, stats.degenerate);
    Ok(())
}

#[derive(serde::Serialize)]
struct SelftrainSummary<'a> {
    mode: &'a str,
    stage1_best_epoch: usize,
    stage1_val_error_deg: f64,
    stage2_best_epoch: usize,
    stage2_val_error_deg: f64,
    pseudo_total: usize,
    pseudo_degenerate: usize,
    seed: u64,
    workers: usize,
}

pub fn cmd_selftrain(args: &SelftrainArgs) -> Result<(), CliError> {
    let mode = SupervisionMode::parse(&args.mode)
        .ok_or_else(|| CliError::Config(format!("--mode: unknown value '{}'", args.mode)))?;
    let policy = match mode {
        SupervisionMode::SelfTrain3DPred => PseudoPolicy::Raw,
        SupervisionMode::StWsge => PseudoPolicy::Rotate,
        SupervisionMode::Supervised | SupervisionMode::WeaklySup2D => {
            return Err(CliError::Config(format!(
                "--mode {} is a single training stage; use the train command",
                mode.as_flag()
            )));
        }
    };
    let rc = resolve(&args.common)?;
    let view_3d = parse_view(&args.view_3d, "--view-3d")?;
    let view_2d = parse_view(&args.view_2d, "--view-2d")?;
    let train3d = load_datasets(&args.manifest_3d, view_3d, "--manifest-3d")?;
    let data2d = load_datasets(std::slice::from_ref(&args.manifest_2d), view_2d, "--manifest-2d")?
        .pop()
        .expect("one path yields one dataset");
    require_file(&args.val, "--val")?;
    let val = load_manifest(&args.val)?;
    let outputs = run_self_training(
        &train3d,
        &val,
        &manifest_base(&args.val),
        &data2d,
        &rc.model,
        &rc.options,
        args.warm_start,
        policy,
    )?;

    std::fs::create_dir_all(&rc.out)
        .map_err(|e| CliError::Io(format!("--out {}: {e}", rc.out.display())))?;
    save_checkpoint(&rc.out.join("stage1.ckpt"), &rc.model, &outputs.stage1.params)?;
    save_checkpoint(&rc.out.join("stage2.ckpt"), &rc.model, &outputs.stage2.params)?;
    save_manifest(&rc.out.join("pseudo.jsonl"), &outputs.pseudo)?;
    let stats = serde_json::to_string_pretty(&outputs.pseudo_stats).expect("serializes");
    write_output(&rc.out, "pseudo_stats.json", &stats)?;
    let h1 = serde_json::to_string_pretty(&outputs.stage1.history).expect("serializes");
    let h2 = serde_json::to_string_pretty(&outputs.stage2.history).expect("serializes");
    write_output(&rc.out, "history_stage1.json", &h1)?;
    write_output(&rc.out, "history_stage2.json", &h2)?;

    // The comparison scores both stages on the held-out test manifest,
    // falling back to the validation manifest.
    let test_path = args.test.as_ref().unwrap_or(&args.val);
    require_file(test_path, "--test")?;
    let test = load_manifest(test_path)?;
    let test_base = manifest_base(test_path);
    let opts = eval_options(&rc.options);
    let r1 = evaluate(&test, &test_base, &outputs.stage1.params, &rc.model, &opts)?;
    let r2 = evaluate(&test, &test_base, &outputs.stage2.params, &rc.model, &opts)?;
    write_output(&rc.out, "eval_stage1.json", &report_json(&r1))?;
    write_output(&rc.out, "eval_stage2.json", &report_json(&r2))?;
    let cmp = compare_runs(&r1, &r2)?;
    write_output(&rc.out, "comparison.json", &serde_json::to_string_pretty(&cmp).expect("serializes"))?;
    write_output(&rc.out, "comparison.csv", &comparison_csv(&cmp))?;

    let summary = SelftrainSummary {
        mode: mode.as_flag(),
        stage1_best_epoch: outputs.stage1.best_epoch,
        stage1_val_error_deg: outputs.stage1.best_val_error_deg,
        stage2_best_epoch: outputs.stage2.best_epoch,
        stage2_val_error_deg: outputs.stage2.best_val_error_deg,
        pseudo_total: outputs.pseudo_stats.total,
        pseudo_degenerate: outputs.pseudo_stats.degenerate,
        seed: rc.options.optimizer.seed,
        workers: rc.options.workers,
    };
    write_output(&rc.out, "summary.json", &serde_json::to_string_pretty(&summary).expect("serializes"))?;
    println!(
        "stage1 val {:.3} deg, stage2 val {:.3} deg, {} pseudo labels ({} degenerate)",
        outputs.stage1.best_val_error_deg,
        outputs.stage2.best_val_error_deg,
        outputs.pseudo_stats.total,
        outputs.pseudo_stats.degenerate
    );
    Ok(())
}

fn full_mean(report: &EvalReport) -> Option<f64> {
    report.rows.iter().find(|r| r.split == "full" && r.modality == "all").map(|r| r.mean_error_deg)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let rc = resolve(&args.common)?;
    require_file(&args.checkpoint, "--checkpoint")?;
    require_file(&args.manifest, "--manifest")?;
    let (cfg, params) = load_checkpoint(&args.checkpoint)?;
    let records = load_manifest(&args.manifest)?;
    let report =
        evaluate(&records, &manifest_base(&args.manifest), &params, &cfg, &eval_options(&rc.options))?;
    write_output(&rc.out, "eval.csv", &report_csv(&report))?;
    write_output(&rc.out, "report.json", &report_json(&report))?;
    match full_mean(&report) {
        Some(mean) => println!("mean error {mean:.3} deg over {} samples", report.samples.len()),
        None => println!("no scorable samples"),
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let rc = resolve(&args.common)?;
    let mut scales = Vec::new();
    for part in args.scales.split(',') {
        let trimmed = part.trim();
        let v: f64 = trimmed
            .parse()
            .map_err(|_| CliError::Config(format!("--scales: not a number: '{trimmed}'")))?;
        scales.push(v);
    }
    if scales.is_empty() {
        return Err(CliError::Config("--scales: need at least one value".into()));
    }
    require_file(&args.checkpoint, "--checkpoint")?;
    require_file(&args.manifest, "--manifest")?;
    let (cfg, params) = load_checkpoint(&args.checkpoint)?;
    let records = load_manifest(&args.manifest)?;
    let base = manifest_base(&args.manifest);
    let runs = crop_scale_sweep(&records, &base, &params, &cfg, &eval_options(&rc.options), &scales)?;
    let mut csv = String::from("crop_scale,mean_error_deg\n");
    for (scale, report) in &runs {
        let mean = full_mean(report)
            .ok_or_else(|| CliError::Config("--manifest: no scorable samples".into()))?;
        csv.push_str(&format!("{scale},{mean:.6}\n"));
        println!("crop_scale {scale} mean error {mean:.3} deg");
    }
    write_output(&rc.out, "sweep.csv", &csv)?;
    Ok(())
}

/// Two regular-and-shifted blocks on a small token grid; wide enough to
/// exercise every weight group while keeping finite differences fast.
fn gradcheck_default_config() -> ModelConfig {
    ModelConfig {
        stages: vec![StageConfig { blocks: 2, dim: 8, heads: 2 }],
        window: WindowSpec { t: 2, h: 2, w: 2 },
        mlp_ratio: 2.0,
        patch: PatchSpec { t: 2, h: 4, w: 4, c: 8 },
        decoder_hidden: 16,
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let file = crate::config::load_file_config(args.config.as_deref())?;
    let cfg = file.model.unwrap_or_else(gradcheck_default_config);
    let shape = (2, cfg.patch.h * 2, cfg.patch.w * 2);
    let report = grad_check_model(&cfg, shape, args.seed, args.coords)?;
    let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let text = format!(
        "coords_checked {}\nmax_rel_err {:.3e}\nworst {}[{}] analytic {:.6e} numeric {:.6e}\n{} (tolerance {:.0e})\n",
        report.coords_checked,
        report.max_rel_err,
        report.worst.param,
        report.worst.coord,
        report.worst.analytic,
        report.worst.numeric,
        verdict,
        GRADCHECK_TOLERANCE
    );
    write_output(&args.out, "gradcheck.txt", &text)?;
    print!("{text}");
    if pass {
        Ok(())
    } else {
        Err(CliError::Diverged(format!(
            "gradient check failed: max relative error {:.3e} at {}[{}]",
            report.max_rel_err, report.worst.param, report.worst.coord
        )))
    }
}
