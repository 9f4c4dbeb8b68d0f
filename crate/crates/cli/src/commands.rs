use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use vdforge_core::analysis::{self, RunResults, SweepResult};
use vdforge_core::config::KeyValues;
use vdforge_core::corpus::{self, DecodeParams, QaInstance, ResponseRecord, ViewSpec};
use vdforge_core::degrade::{self, Image};
use vdforge_core::dpocore::{self, DpoBatch, Objective, TrainConfig};
use vdforge_core::grade::{self, MetricSpec};
use vdforge_core::pairs::{self, BuildOptions, InstanceTable, PairedRecords};
use vdforge_core::policy::{
    BackendKind, Generator, ImageLocator, PolicyBackend, RemoteConfig, ResponseCache,
    SyntheticConfig,
};
use vdforge_core::synthbench::{self, SynthSpec};

use crate::args::*;

fn sibling_instances(responses: &Path) -> PathBuf {
    corpus::resolve_path(responses, "instances.jsonl")
}

fn default_degraded_dir(manifest: &Path) -> PathBuf {
    corpus::resolve_path(manifest, "degraded")
}

fn metric(m: Metric, tol: f64) -> Result<MetricSpec> {
    Ok(match m {
        Metric::Em => MetricSpec::ExactMatch,
        Metric::Tm => MetricSpec::tolerance(tol).map_err(|e| anyhow!(e))?,
    })
}

fn lq_label(lq_view: &Option<String>, alpha: f64) -> Result<String> {
    let view: ViewSpec = match lq_view {
        Some(v) => v.parse()?,
        None => ViewSpec::Resolution { alpha },
    };
    view.validate().map_err(|e| anyhow!(e))?;
    Ok(view.label())
}

fn stdout_line(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    Ok(())
}

fn stdout_text(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut kv = match &a.spec {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    if let Some(n) = a.n {
        kv.set("n", n.to_string());
    }
    if let Some(s) = a.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(g) = &a.glyph_px {
        kv.set("glyph-px", g.clone());
    }
    if let Some(g) = &a.grid {
        kv.set("grid", g.clone());
    }
    if let Some(v) = &a.values {
        kv.set("values", v.clone());
    }
    if let Some(t) = a.tau {
        kv.set("tau", t.to_string());
    }
    let spec = SynthSpec::from_key_values(&kv)?;
    let instances = synthbench::gen_corpus(&spec, &a.out)?;
    std::fs::write(a.out.join("spec.cfg"), spec.to_key_values().to_string())?;
    log::info!("wrote {} instances to {}", instances.len(), a.out.display());
    stdout_line(&a.out.join("instances.jsonl").display().to_string())
}

pub fn degrade_cmd(a: &DegradeArgs) -> Result<()> {
    let instances = corpus::load_instances(&a.instances)?;
    let views: Vec<ViewSpec> = if a.views.is_empty() {
        vec![ViewSpec::Resolution { alpha: a.alpha }]
    } else {
        a.views
            .iter()
            .map(|v| v.parse())
            .collect::<Result<_, _>>()?
    };
    let out_dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| default_degraded_dir(&a.instances));
    std::fs::create_dir_all(&out_dir)?;
    let written = materialize_views(&a.instances, &instances, &views, &out_dir, a.jobs)?;
    log::info!("wrote {written} degraded image(s) to {}", out_dir.display());
    Ok(())
}

fn materialize_views(
    manifest: &Path,
    instances: &[QaInstance],
    views: &[ViewSpec],
    out_dir: &Path,
    jobs: usize,
) -> Result<usize> {
    let views: Vec<ViewSpec> = views.iter().copied().filter(|v| !v.is_hq()).collect();
    if views.is_empty() {
        return Ok(0);
    }
    std::fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?;
    pool.install(|| {
        instances.par_iter().try_for_each(|inst| -> Result<()> {
            let src = corpus::resolve_path(manifest, &inst.image_path);
            let img = Image::load(&src)?;
            for view in &views {
                degrade::apply_view(&img, view)?
                    .save_png(&degrade::degraded_path(&src, out_dir, view))?;
            }
            Ok(())
        })
    })?;
    Ok(instances.len() * views.len())
}

fn build_generator(b: &BackendArgs, manifest: &Path) -> Result<Generator> {
    let degraded = b
        .degraded_dir
        .clone()
        .unwrap_or_else(|| default_degraded_dir(manifest));
    let images = ImageLocator::new(manifest, degraded);
    let (kind, default_id) = match b.backend {
        Backend::Synthetic => (
            BackendKind::Synthetic(SyntheticConfig {
                tau: b.tau,
                verbosity: b.verbosity,
            }),
            "synthetic".to_string(),
        ),
        Backend::Remote => {
            let endpoint = b
                .endpoint
                .clone()
                .context("--endpoint is required for the remote backend")?;
            let model = b
                .model
                .clone()
                .context("--model is required for the remote backend")?;
            let mut cfg = RemoteConfig::new(endpoint, model.clone());
            cfg.timeout_ms = b.timeout_ms;
            cfg.max_retries = b.retries;
            cfg.backoff_ms = b.backoff_ms;
            if let Some(t) = &b.prompt_template {
                cfg.prompt_template = t.clone();
            }
            (BackendKind::Remote(cfg), model)
        }
        Backend::Replay => {
            let path = b
                .replay
                .clone()
                .context("--replay is required for the replay backend")?;
            let id = b.policy_id.clone().unwrap_or_else(|| "synthetic".into());
            return Ok(Generator::replay(&id, &path, images)?);
        }
    };
    let cache_path = b.cache.clone().or_else(|| {
        std::env::var_os("VDFORGE_CACHE_DIR").map(|d| PathBuf::from(d).join("responses.jsonl"))
    });
    let cache = match cache_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            ResponseCache::open(&p)?
        }
        None => ResponseCache::in_memory(),
    };
    let backend = PolicyBackend {
        policy_id: b.policy_id.clone().unwrap_or(default_id),
        kind,
    };
    Ok(Generator::new(backend, images, cache)?)
}

fn decode(b: &BackendArgs) -> DecodeParams {
    DecodeParams {
        temperature: b.temperature,
        max_tokens: b.max_tokens,
        seed: b.seed,
    }
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let instances = corpus::load_instances(&a.instances)?;
    let views: Vec<ViewSpec> = if a.views.is_empty() {
        vec![ViewSpec::Hq, ViewSpec::Resolution { alpha: a.alpha }]
    } else {
        a.views
            .iter()
            .map(|v| v.parse())
            .collect::<Result<_, _>>()?
    };
    for v in &views {
        v.validate().map_err(|e| anyhow!(e))?;
    }
    if a.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let generator = build_generator(&a.backend, &a.instances)?;
    let base = decode(&a.backend);
    let mut requests = Vec::new();
    for inst in &instances {
        for view in &views {
            for k in 0..a.samples {
                let d = DecodeParams {
                    seed: base.seed + k,
                    ..base
                };
                requests.push((inst, *view, d));
            }
        }
    }
    let records = generator
        .generate_many(&requests, a.backend.jobs)
        .into_iter()
        .collect::<Result<Vec<ResponseRecord>, _>>()?;
    corpus::write_records(&a.out, &records)?;
    log::info!("wrote {} responses to {}", records.len(), a.out.display());
    Ok(())
}

pub fn grade_cmd(a: &GradeArgs) -> Result<()> {
    let inst_path = a
        .instances
        .clone()
        .unwrap_or_else(|| sibling_instances(&a.responses));
    let instances = corpus::load_instances(&inst_path)?;
    let mut records = corpus::load_records(&a.responses)?;
    let summary = grade::grade_records(&mut records, &instances, &metric(a.metric, a.tol)?);
    corpus::write_records(&a.responses, &records)?;
    stdout_line(&format!(
        "graded={} correct={} skipped={}",
        summary.graded, summary.correct, summary.skipped
    ))
}

fn load_pair_inputs(
    responses: &Path,
    instances: &Option<PathBuf>,
    out: &Path,
) -> Result<(Vec<ResponseRecord>, InstanceTable)> {
    let inst_path = instances
        .clone()
        .unwrap_or_else(|| sibling_instances(responses));
    let insts = corpus::load_instances(&inst_path)
        .with_context(|| format!("loading instances from {}", inst_path.display()))?;
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let table = InstanceTable::with_image_paths(&insts, |i| {
        let abs = corpus::resolve_path(&inst_path, &i.image_path);
        corpus::relative_path(&abs, &out_dir).display().to_string()
    });
    Ok((corpus::load_records(responses)?, table))
}

fn filter_policy(records: Vec<ResponseRecord>, policy: &Option<String>) -> Vec<ResponseRecord> {
    match policy {
        Some(p) => records.into_iter().filter(|r| &r.policy_id == p).collect(),
        None => records,
    }
}

pub fn pairs_cmd(a: &PairsArgs) -> Result<()> {
    let (records, table) = load_pair_inputs(&a.responses, &a.instances, &a.out)?;
    let opts = BuildOptions {
        dedup: !a.no_dedup,
        all_combinations: a.all_combinations,
    };
    let built = match a.mode {
        Mode::VdLf | Mode::VdLb => {
            let records = filter_policy(records, &a.policy);
            let lq = lq_label(&a.lq_view, a.alpha)?;
            let paired = pairs::pair_views(&records, &a.hq_view, &lq)?;
            if a.mode == Mode::VdLf {
                pairs::build_vd_lf(&paired, &table, &opts)?
            } else {
                pairs::build_vd_lb(&paired, &table, &opts)?
            }
        }
        Mode::HqVsHq => {
            let samples: Vec<_> = filter_policy(records, &a.policy)
                .into_iter()
                .filter(|r| r.view_label == a.hq_view)
                .collect();
            pairs::build_hq_vs_hq(&samples, &table, &opts)?
        }
        Mode::Cross => {
            let pref_id = a
                .preferred_policy
                .clone()
                .context("--preferred-policy is required for cross mode")?;
            let disp_id = a
                .dispreferred_policy
                .clone()
                .context("--dispreferred-policy is required for cross mode")?;
            let disp_pool = match &a.dispreferred_responses {
                Some(p) => corpus::load_records(p)?,
                None => records.clone(),
            };
            let in_view = |r: &ResponseRecord| r.view_label == a.hq_view;
            let preferred: Vec<_> = records
                .into_iter()
                .filter(|r| r.policy_id == pref_id && in_view(r))
                .collect();
            let dispreferred: Vec<_> = disp_pool
                .into_iter()
                .filter(|r| r.policy_id == disp_id && in_view(r))
                .collect();
            let join = pairs::build_cross_policy(&preferred, &dispreferred, &table, &opts)?;
            log::info!("{} unmatched instance(s) skipped", join.skipped);
            join.pairs
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let n = pairs::export_dpo_jsonl(&built, &a.out)?;
    log::info!("wrote {n} pairs to {}", a.out.display());
    stdout_line(&format!("pairs={n}"))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let pairs = pairs::load_pairs(&a.pairs)?;
    let cfg = TrainConfig {
        objective: match a.objective {
            ObjectiveArg::Dpo => Objective::Dpo,
            ObjectiveArg::Sft => Objective::Sft,
        },
        beta: a.beta,
        lr: a.lr,
        steps: a.steps,
        batch_size: a.batch_size,
        seed: a.seed,
        feature_dim: a.feature_dim,
        length_normalize: a.length_normalize,
    };
    let outcome = dpocore::train(&pairs, &cfg)?;
    if let Some(p) = &a.out_policy {
        outcome.policy.save(p)?;
    }
    if let Some(p) = &a.history {
        dpocore::write_history_csv(p, &outcome.history)?;
    }
    let eval_pairs = match &a.heldout {
        Some(p) => pairs::load_pairs(p)?,
        None => pairs,
    };
    let items = dpocore::encode_pairs(&outcome.policy, &eval_pairs);
    let margin = if items.is_empty() {
        None
    } else {
        let mut batch = DpoBatch::new(
            items,
            if a.beta > 0.0 {
                a.beta
            } else {
                dpocore::DEFAULT_BETA
            },
        );
        batch.length_normalize = a.length_normalize;
        Some(dpocore::preference_margin(
            &outcome.policy,
            &outcome.reference,
            &batch,
        )?)
    };
    let summary = serde_json::json!({
        "objective": a.objective,
        "steps": outcome.history.len(),
        "initial_loss": outcome.history.first(),
        "final_loss": outcome.history.last(),
        "margin": margin,
    });
    stdout_line(&summary.to_string())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let instances = corpus::load_instances(&a.instances)?;
    if a.backend.backend == Backend::Remote {
        let views: Vec<ViewSpec> = a.alphas.iter().map(|&x| ViewSpec::for_alpha(x)).collect();
        let dir = a
            .backend
            .degraded_dir
            .clone()
            .unwrap_or_else(|| default_degraded_dir(&a.instances));
        materialize_views(&a.instances, &instances, &views, &dir, a.backend.jobs)?;
    }
    let generator = build_generator(&a.backend, &a.instances)?;
    let (result, records) = match analysis::resolution_sweep(
        &instances,
        &generator,
        &a.alphas,
        &metric(a.metric, a.tol)?,
        &decode(&a.backend),
        a.backend.jobs,
    ) {
        Ok(r) => r,
        Err(analysis::AnalysisError::Backend {
            alpha,
            partial,
            source,
        }) => {
            if let Some(out) = &a.out {
                partial.write_csv(out)?;
                log::warn!(
                    "partial sweep ({} rows) written to {}",
                    partial.rows.len(),
                    out.display()
                );
            }
            return Err(anyhow!(source).context(format!("sweep failed at alpha {alpha}")));
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(out) = &a.out {
        result.write_csv(out)?;
    }
    if let Some(p) = &a.records {
        corpus::write_records(p, &records)?;
    }
    stdout_text(&result.to_table())
}

fn graded_pairs(a: &ReportArgs) -> Result<Vec<PairedRecords>> {
    let path = a
        .responses
        .as_ref()
        .context("--responses is required for this report")?;
    let records = corpus::load_records(path)?;
    let lq = lq_label(&a.lq_view, a.alpha)?;
    Ok(pairs::pair_views(&records, &a.hq_view, &lq)?)
}

fn run_name(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    match a.kind {
        ReportKind::Sweep => {
            let path = a
                .sweep
                .as_ref()
                .context("--sweep is required for kind=sweep")?;
            let s = SweepResult::read_csv(path)?;
            if let Some(out) = &a.out {
                s.write_csv(out)?;
            }
            stdout_text(&s.to_table())
        }
        ReportKind::Categories => {
            let d = analysis::category_distribution(&graded_pairs(a)?)?;
            if let Some(out) = &a.out {
                std::fs::write(out, d.to_csv())?;
            }
            stdout_text(&d.to_table())
        }
        ReportKind::Lengths => {
            let r = analysis::length_stats(&graded_pairs(a)?, a.bin_width)?;
            if let Some(out) = &a.out {
                std::fs::write(out, r.to_csv())?;
            }
            if let Some(h) = &a.histogram {
                std::fs::write(h, r.histogram_csv())?;
            }
            stdout_text(&r.to_table())
        }
        ReportKind::Compare => {
            let base = a
                .baseline
                .as_ref()
                .context("--baseline is required for kind=compare")?;
            if a.treatment.is_empty() {
                bail!("at least one --treatment file is required for kind=compare");
            }
            let baseline = RunResults::read_csv(base, run_name(base))?;
            let treatments = a
                .treatment
                .iter()
                .map(|p| RunResults::read_csv(p, run_name(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let report = analysis::compare_runs(&baseline, &treatments)?;
            if let Some(out) = &a.out {
                std::fs::write(out, report.to_csv())?;
            }
            stdout_text(&report.to_table())
        }
    }
}
