use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tct_core::bench::{
    format_curves, format_manifest, format_scanpaths, format_summary, load_manifest,
    random_baseline_scanpaths, run_ablation_suite, synthesize_scene, synthesize_tiled_scene,
    Congruency, LayerGroup, ManifestEntry, PriorRef, ScanpathRecord, SuiteConfig, SuiteReport,
    SyntheticTrials, TrialSource, Variant,
};
use tct_core::context::{context_gain, format_prior, ContextPrior};
use tct_core::encoder::{named_tensors, save_weights, EmbeddingKind, read_header};
use tct_core::exec::Execution;
use tct_core::image::ImageTensor;
use tct_core::search::{AttentionMap, Rect, ScanpathResult, SearchEngine};
use tct_core::{Result, TctError};

use crate::config::{format_config, load_config, resolve, Resolved, RunConfig};
use crate::{Common, SuiteArgs};

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn io_context(path: &Path) -> impl FnOnce(std::io::Error) -> TctError + '_ {
    move |e| TctError::input(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_context(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_context(path))
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut config = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Runs `f` on a pool bounded by `--jobs`, returning the matching execution mode.
fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce(Execution) -> Result<T> + Send) -> Result<T> {
    if jobs == 1 {
        return f(Execution::Sequential);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TctError::input(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| f(Execution::Parallel))
}

fn parse_box(s: &str) -> Result<Rect> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()
        .filter(|v: &Vec<usize>| v.len() == 4)
        .ok_or_else(|| TctError::input(format!("--box must be x,y,w,h integers, got `{s}`")))?;
    Ok(Rect::new(v[0], v[1], v[2], v[3]))
}

fn record(variant: &str, trial: &str, run: usize, r: &ScanpathResult) -> ScanpathRecord {
    ScanpathRecord {
        variant: variant.to_string(),
        trial: trial.to_string(),
        run,
        found: r.found,
        n_fixations: r.n_fixations,
        fixations: r.fixations.iter().map(|&(x, y)| [x, y]).collect(),
    }
}

fn format_map(map: &AttentionMap) -> String {
    let mut out = format!("{} {}\n", map.height(), map.width());
    for row in map.values().chunks(map.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out += &line.join(" ");
        out.push('\n');
    }
    out
}

/// Writes the map, then one snapshot per fixation showing what was still
/// unsuppressed when that fixation was chosen.
fn dump_map(dir: &Path, map: &AttentionMap, scanpath: &ScanpathResult, resolved: &Resolved) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("map.txt"), format_map(map))?;
    map.to_image().save(&dir.join("map.pgm"))?;
    let (w, h) = (map.width(), map.height());
    let params = resolved.search_params(w, h);
    let mut values = map.values().to_vec();
    for (k, &(x, y)) in scanpath.fixations.iter().enumerate() {
        let snapshot = AttentionMap::new(h, w, values.clone())?;
        snapshot.to_image().save(&dir.join(format!("fixation-{:04}.pgm", k + 1)))?;
        let win = Rect::centered(x, y, params.ior_width, params.ior_height, w, h);
        for yy in win.y..win.y + win.h {
            values[yy * w + win.x..yy * w + win.x + win.w].fill(0.0);
        }
    }
    Ok(())
}

pub fn search(
    common: &Common,
    search_path: &Path,
    target_path: &Path,
    target_box: &str,
    ablation: &str,
    dump: Option<&Path>,
) -> Result<()> {
    let config = base_config(common)?;
    let search = ImageTensor::load(search_path)?;
    let target = ImageTensor::load(target_path)?;
    let target_box = parse_box(target_box)?;
    let variant = Variant::parse(ablation)
        .ok_or_else(|| TctError::input(format!("unknown ablation variant `{ablation}`")))?;
    let resolved = resolve(config, Some((search.width(), search.height())))?;
    let (w, h) = (search.width(), search.height());
    let params = resolved.search_params(w, h);
    let trial_id = search_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "search".into());
    let name = variant.to_string();

    let records = if variant == Variant::Random {
        if dump.is_some() {
            return Err(TctError::input("--dump-map needs a model variant, not `random`"));
        }
        if target_box.area() == 0 || !target_box.fits_in(w, h) {
            return Err(TctError::input(format!(
                "target box {target_box:?} must have positive area inside the {w}x{h} image"
            )));
        }
        let results = random_baseline_scanpaths(
            (h, w),
            &target_box,
            &params,
            resolved.config.bench.random_repeats,
            resolved.config.seed,
            0,
            Execution::Sequential,
        )?;
        results.iter().enumerate().map(|(i, r)| record(&name, &trial_id, i, r)).collect()
    } else {
        let engine = SearchEngine {
            weights: &resolved.weights,
            target_resolution: resolved.target_resolution,
            upsampling: resolved.config.search.upsampling,
        };
        let prepared = engine.prepare(&search, &target, target_box)?;
        let gains = context_gain(&resolved.prior()?, prepared.grid, resolved.config.modulation.g_max)?;
        let configs = variant.configs(resolved.weights.config().layers, &resolved.modulation)?;
        let mut records = Vec::with_capacity(configs.len());
        for (i, cfg) in configs.iter().enumerate() {
            let outcome = engine.evaluate(&prepared, cfg, &gains, &params)?;
            if i == 0 {
                if let Some(dir) = dump {
                    dump_map(dir, &outcome.map, &outcome.scanpath, &resolved)?;
                }
            }
            records.push(record(&name, &trial_id, i, &outcome.scanpath));
        }
        records
    };

    create_dir(&common.out)?;
    write(&common.out.join("scanpath.jsonl"), format_scanpaths(&records))?;
    write(&common.out.join("effective_config.toml"), format_config(&resolved.config))?;
    let mut text = String::new();
    for r in &records {
        let _ = writeln!(
            text,
            "{} run {}: {} after {} fixations",
            r.variant,
            r.run,
            if r.found { "found" } else { "not found" },
            r.n_fixations
        );
    }
    emit(&text);
    Ok(())
}

fn apply_suite_args(config: &mut RunConfig, suite: &SuiteArgs) {
    let b = &mut config.bench;
    if let Some(t) = suite.trials {
        b.trials = t;
    }
    if let Some(v) = &suite.variants {
        b.variants = Some(v.clone());
    }
    if let Some(n) = suite.n_max {
        b.n_max = Some(n);
    }
    if let Some(m) = &suite.manifest {
        b.manifest = Some(m.clone());
    }
}

fn suite_config(resolved: &Resolved) -> SuiteConfig {
    let b = &resolved.config.bench;
    SuiteConfig {
        variants: resolved.variants(),
        modulation: resolved.modulation.clone(),
        g_max: resolved.config.modulation.g_max,
        n_max: b.n_max,
        max_fixations: resolved.config.search.max_fixations,
        random_repeats: b.random_repeats,
        seed: resolved.config.seed,
    }
}

fn run_suite(source: &dyn TrialSource, resolved: &Resolved, jobs: usize) -> Result<SuiteReport> {
    if source.is_empty() {
        return Err(TctError::input("no trials to run"));
    }
    let engine = SearchEngine {
        weights: &resolved.weights,
        target_resolution: resolved.target_resolution,
        upsampling: resolved.config.search.upsampling,
    };
    let suite = suite_config(resolved);
    with_jobs(jobs, |exec| run_ablation_suite(source, &engine, &suite, exec))
}

fn write_report(dir: &Path, report: &SuiteReport) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("scanpaths.jsonl"), format_scanpaths(&report.records))?;
    write(&dir.join("curves.csv"), format_curves(&report.reports))?;
    write(&dir.join("summary.csv"), format_summary(&report.reports))
}

fn print_summary(label: &str, report: &SuiteReport) {
    let mut text = String::new();
    for (variant, m) in &report.reports {
        let avg = m
            .avg_fixations
            .map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
        let _ = writeln!(
            text,
            "{label}{variant}: avg fixations {avg}, found {}/{}, p(1) {:.3}",
            m.found,
            m.trials,
            m.p(1)
        );
    }
    emit(&text);
}

fn manifest_entries(resolved: &Resolved) -> Result<Option<Vec<ManifestEntry>>> {
    resolved
        .config
        .bench
        .manifest
        .as_deref()
        .map(load_manifest)
        .transpose()
}

pub fn bench(common: &Common, suite: &SuiteArgs, congruency: Option<&str>) -> Result<()> {
    let mut config = base_config(common)?;
    apply_suite_args(&mut config, suite);
    if let Some(c) = congruency {
        config.bench.congruency = c.to_string();
    }
    let resolved = resolve(config, None)?;
    let report = match manifest_entries(&resolved)? {
        Some(entries) => run_suite(&entries, &resolved, common.jobs)?,
        None => {
            let source = SyntheticTrials {
                seed: resolved.config.seed,
                spec: resolved.scene_spec(),
                count: resolved.config.bench.trials,
                congruency: resolved.congruency(),
            };
            run_suite(&source, &resolved, common.jobs)?
        }
    };
    write_report(&common.out, &report)?;
    write(&common.out.join("effective_config.toml"), format_config(&resolved.config))?;
    print_summary("", &report);
    Ok(())
}

fn ablation_variants() -> Vec<String> {
    [Variant::Tct, Variant::TargetAlone, Variant::ContextAlone, Variant::Vit]
        .into_iter()
        .chain([LayerGroup::Early, LayerGroup::Middle, LayerGroup::Late].map(Variant::TargetFrom))
        .chain([LayerGroup::Early, LayerGroup::Middle, LayerGroup::Late].map(Variant::ContextAt))
        .map(|v| v.to_string())
        .collect()
}

fn format_congruency_table(congruent: &SuiteReport, incongruent: &SuiteReport) -> String {
    let mut out = String::from("variant,congruent_avg,incongruent_avg,gap,relative_gap\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for (variant, c) in &congruent.reports {
        let i = incongruent.report(variant).and_then(|m| m.avg_fixations);
        let gap = c.avg_fixations.zip(i).map(|(c, i)| i - c);
        let rel = c.avg_fixations.zip(gap).map(|(c, g)| g / c);
        let _ = writeln!(out, "{variant},{},{},{},{}", opt(c.avg_fixations), opt(i), opt(gap), opt(rel));
    }
    out
}

pub fn ablate(common: &Common, suite: &SuiteArgs) -> Result<()> {
    let mut config = base_config(common)?;
    if suite.variants.is_none() && config.bench.variants.is_none() {
        config.bench.variants = Some(ablation_variants());
    }
    apply_suite_args(&mut config, suite);
    let resolved = resolve(config, None)?;
    let mut by_label: Vec<(Congruency, SuiteReport)> = Vec::new();
    match manifest_entries(&resolved)? {
        Some(entries) => {
            for c in [Congruency::Congruent, Congruency::Incongruent, Congruency::NotApplicable] {
                let subset: Vec<ManifestEntry> =
                    entries.iter().filter(|e| e.congruency == c).cloned().collect();
                if !subset.is_empty() {
                    by_label.push((c, run_suite(&subset, &resolved, common.jobs)?));
                }
            }
        }
        None => {
            for c in [Congruency::Congruent, Congruency::Incongruent] {
                let source = SyntheticTrials {
                    seed: resolved.config.seed,
                    spec: resolved.scene_spec(),
                    count: resolved.config.bench.trials,
                    congruency: c,
                };
                by_label.push((c, run_suite(&source, &resolved, common.jobs)?));
            }
        }
    }
    for (c, report) in &by_label {
        let label = if *c == Congruency::NotApplicable { "unlabeled" } else { c.name() };
        write_report(&common.out.join(label), report)?;
        print_summary(&format!("{label} "), report);
    }
    let find = |c| by_label.iter().find(|(l, _)| *l == c).map(|(_, r)| r);
    if let (Some(con), Some(inc)) = (find(Congruency::Congruent), find(Congruency::Incongruent)) {
        write(&common.out.join("congruency.csv"), format_congruency_table(con, inc))?;
    }
    write(&common.out.join("effective_config.toml"), format_config(&resolved.config))
}

pub fn synth(common: &Common, trials: Option<usize>, congruency: Option<&str>, tiled: bool) -> Result<()> {
    let mut config = base_config(common)?;
    if let Some(t) = trials {
        config.bench.trials = t;
    }
    if let Some(c) = congruency {
        config.bench.congruency = c.to_string();
    }
    let resolved = resolve(config, None)?;
    let out = &common.out;
    let images = out.join("images");
    create_dir(&images)?;
    let seed = resolved.config.seed;
    let mut entries = Vec::new();
    for i in 0..resolved.config.bench.trials as u64 {
        let trial = if tiled {
            synthesize_tiled_scene(seed, i, resolved.profile, resolved.weights.config().patch_size)?
        } else {
            synthesize_scene(seed, i, &resolved.scene_spec(), resolved.congruency())?
        };
        let search: PathBuf = images.join(format!("{}.ppm", trial.id));
        let target: PathBuf = images.join(format!("{}-target.ppm", trial.id));
        trial.search.save(&search)?;
        trial.target.save(&target)?;
        let prior = match &trial.prior {
            ContextPrior::Uniform => PriorRef::Uniform,
            ContextPrior::SpatialGaussian { mu, sigma } => PriorRef::Gaussian { mu: *mu, sigma: *sigma },
            ContextPrior::FileLoaded { rows, cols, values } => {
                let path = images.join(format!("{}-prior.txt", trial.id));
                write(&path, format_prior(*rows, *cols, values))?;
                PriorRef::File(path)
            }
        };
        entries.push(ManifestEntry {
            id: trial.id,
            search,
            target,
            target_box: trial.target_box,
            congruency: trial.congruency,
            profile: trial.profile,
            prior,
        });
    }
    write(&out.join("manifest.txt"), format_manifest(&entries, out))?;
    write(&out.join("effective_config.toml"), format_config(&resolved.config))?;
    emit(&format!("wrote {} trials to {}\n", entries.len(), out.display()));
    Ok(())
}

fn stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len().max(1) as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    (min, max, mean, rms)
}

pub fn inspect_weights(file: Option<&Path>, config: Option<&Path>, save: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    macro_rules! line {
        ($($arg:tt)*) => {
            let _ = writeln!(text, $($arg)*);
        };
    }
    let weights = match file {
        Some(path) => {
            let bytes = fs::read(path).map_err(io_context(path))?;
            let header = read_header(&bytes, &path.display().to_string())?;
            line!("file: {}", path.display());
            line!("stored profile: {}", header.source_profile.name());
            match header.embedding_kind {
                EmbeddingKind::Linear => {
                    line!("embedding: linear");
                }
                EmbeddingKind::NormalizedPixels { center, bias_channel } => {
                    line!("embedding: normalized-pixels center={center} bias_channel={bias_channel}");
                }
            }
            tct_core::encoder::load_weights(path)?
        }
        None => resolve(load_config(config)?, None)?.weights,
    };
    let c = weights.config();
    line!(
        "channels={} patch_size={} hidden_dim={} heads={} layers={} mlp_dim={} position_embeddings={} norm={:?}",
        c.channels, c.patch_size, c.hidden_dim, c.heads, c.layers, c.mlp_dim, c.use_position_embeddings, c.norm
    );
    if let Some(p) = weights.position() {
        line!("position grid: {}x{}", p.grid.0, p.grid.1);
    }
    line!("{:<24} {:>9} {:>12} {:>12} {:>12} {:>12}", "tensor", "shape", "min", "max", "mean", "rms");
    let mut total = 0;
    for (name, m) in named_tensors(&weights) {
        let (min, max, mean, rms) = stats(m.data());
        total += m.data().len();
        line!(
            "{name:<24} {:>9} {min:>12.5} {max:>12.5} {mean:>12.5} {rms:>12.5}",
            format!("{}x{}", m.rows(), m.cols())
        );
    }
    line!("parameters: {total}");
    if let Some(path) = save {
        save_weights(&weights, path)?;
        line!("saved {}", path.display());
    }
    emit(&text);
    Ok(())
}
