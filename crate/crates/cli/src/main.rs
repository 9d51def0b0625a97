//! `antitune`: runs one lab stage per invocation and writes its outputs plus
//! a `manifest.txt` with checksums into `--out`.
//!
//! Exit codes: 0 ok, 1 verification or runtime failure, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use antitune::analysis::{
    even_buckets, freq_residual_study, gradient_stats, pca_features, residual_csv, theorem1_csv, theorem1_oracle,
    write_pgm, Profile,
};
use antitune::attack::{metrics_csv, protect, ModelOracle, Perturbation, Selection};
use antitune::config::ExperimentConfig;
use antitune::diffusion::{finetune, load_checkpoint, sample, save_checkpoint, Denoiser, NoiseSchedule};
use antitune::eval::{
    ablation_csv, ablation_suite, evaluate_protection, mismatch_eval, report_csv, Corpus, ProtectionReport, Subject,
};
use antitune::lab;
use antitune::manifest::{RunManifest, MANIFEST_FILE};
use antitune::rng::{stream, Stream};
use antitune::verify::run_suite;
use antitune::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "antitune", version, about = "Toy diffusion anti-customization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (`key = value`); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Trained {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Base checkpoint written by `train-base`.
    #[arg(long)]
    base: PathBuf,
    /// Subject to work on; defaults to the config's `protect_subject`.
    #[arg(long)]
    subject: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic subject corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base denoiser on the base subjects.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Train from the victim seed instead, for mismatch studies.
        #[arg(long)]
        victim: bool,
    },
    /// Compute protective perturbations for one subject.
    Protect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
    },
    /// Diagnostics.
    Analyze {
        #[command(subcommand)]
        study: Study,
    },
    /// Fine-tune a victim on clean or protected images and sample from it.
    Customize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
        /// Directory written by `protect`; clean images when omitted.
        #[arg(long)]
        protected: Option<PathBuf>,
    },
    /// Compare clean-trained and protected-trained victims.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
        /// Directory written by `protect`; without it both arms are clean.
        #[arg(long)]
        protected: Option<PathBuf>,
        /// Independently trained base for the mismatch report. The attack is
        /// rerun on `--base` and evaluated on both.
        #[arg(long)]
        victim_base: Option<PathBuf>,
    },
    /// Run the ablation grid from the config.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
    },
    /// Run the invariant suite, or replay a manifest and compare checksums.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum Study {
    /// Per-timestep input-gradient statistics.
    Grads {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
    },
    /// Radial spectra of reconstruction residuals.
    Freq {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
    },
    /// PCA of decoder features.
    Pca {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Trained,
    },
    /// Pool expectation on synthetic gradient profiles.
    Theorem1 {
        #[command(flatten)]
        common: Common,
        /// One of step500, monotone, bump, flat; all bundled profiles when
        /// omitted.
        #[arg(long)]
        profile: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

/// State shared by every stage: config, manifest and output directory.
struct Run {
    cfg: ExperimentConfig,
    manifest: RunManifest,
    out: PathBuf,
    written: Vec<PathBuf>,
}

impl Run {
    fn start(name: &str, args: &[String], common: &Common, inputs: &[&Path]) -> Result<Self, Failure> {
        let text = match &common.config {
            Some(p) => {
                require_exists(p)?;
                std::fs::read_to_string(p).map_err(Error::from)?
            }
            None => String::new(),
        };
        let cfg = ExperimentConfig::parse_with_seed(&text, common.seed.or(common.config.is_none().then_some(0)))?;
        for p in inputs {
            require_exists(p)?;
        }
        std::fs::create_dir_all(&common.out).map_err(|e| Failure::Usage(format!("{}: {e}", common.out.display())))?;
        let mut manifest = RunManifest::new(name, args, cfg.seed, &cfg.dump());
        let input_paths: Vec<PathBuf> = inputs.iter().map(|p| p.to_path_buf()).collect();
        manifest.record_inputs(&input_paths)?;
        Ok(Self {
            cfg,
            manifest,
            out: common.out.clone(),
            written: Vec::new(),
        })
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&ExperimentConfig) -> Result<T, Failure>) -> Result<T, Failure> {
        let start = Instant::now();
        let v = f(&self.cfg)?;
        self.manifest.stage(stage, start.elapsed().as_secs_f64());
        Ok(v)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let p = self.out.join(name);
        std::fs::write(&p, text).map_err(Error::from)?;
        self.written.push(p);
        Ok(())
    }

    fn finish(mut self) -> Outcome {
        let files = std::mem::take(&mut self.written);
        self.manifest.record_outputs(&self.out, &files)?;
        self.manifest.save(&self.out)?;
        println!("wrote {} files and {} to {}", files.len(), MANIFEST_FILE, self.out.display());
        Ok(())
    }
}

fn require_exists(p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file or directory", p.display())))
    }
}

fn load_subject(run: &Run, inputs: &Trained) -> Result<(Corpus, Denoiser, usize), Failure> {
    let corpus = Corpus::load(&inputs.data)?;
    let id = inputs.subject.unwrap_or(run.cfg.data.protect_subject);
    corpus.subject(id).map_err(|e| Failure::Usage(e.to_string()))?;
    let size = corpus.subjects[0].train[0].shape()[1];
    let base = load_checkpoint(&inputs.base)?.with_image_size(size);
    Ok((corpus, base, id))
}

fn selection_csv(sel: &Selection) -> String {
    let mut out = String::from("round,weakest,strongest,deleted_lo,deleted_hi,pool_len\n");
    for (i, r) in sel.rounds.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{},{},{}", r.weakest, r.strongest, r.deleted.0, r.deleted.1, r.pool_len);
    }
    let _ = writeln!(out, "# stop={:?}", sel.stop);
    out
}

fn run_command(cli: Cli, args: &[String]) -> Outcome {
    let sched = NoiseSchedule::standard();
    match cli.command {
        Command::Synth { common } => {
            let mut run = Run::start("synth", args, &common, &[])?;
            let corpus = run.timed("synth", |cfg| Ok(lab::corpus(cfg)?))?;
            let files = corpus.save(&run.out)?;
            run.written.extend(files);
            run.finish()
        }
        Command::TrainBase { common, data, victim } => {
            let mut run = Run::start("train-base", args, &common, &[&data])?;
            let corpus = Corpus::load(&data)?;
            let seed = if victim { run.cfg.victim_seed } else { run.cfg.seed };
            let (model, losses) = run.timed("train", |cfg| Ok(lab::train_base(cfg, &corpus, seed)?))?;
            let p = run.out.join("base.dnz");
            save_checkpoint(&model, &p)?;
            run.written.push(p);
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l:e}");
            }
            run.write("loss.csv", &csv)?;
            run.finish()
        }
        Command::Protect { common, inputs } => {
            let mut run = Run::start("protect", args, &common, &[&inputs.data, &inputs.base])?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let subject = corpus.subject(id)?;
            let out = run.timed("protect", |cfg| Ok(protect(&base, &sched, &subject.train, Some(id), &cfg.attack)?))?;
            let files = out.perturbation.save(&run.out)?;
            run.written.extend(files);
            run.write("metrics.csv", &metrics_csv(&out.log))?;
            run.write("pool.txt", &out.pool.to_text())?;
            run.write("attack.cfg", &run.cfg.attack.to_text())?;
            if let Some(sel) = &out.selection {
                run.write("selection.csv", &selection_csv(sel))?;
            }
            let p = run.out.join("surrogate.dnz");
            save_checkpoint(&out.surrogate, &p)?;
            run.written.push(p);
            run.finish()
        }
        Command::Analyze { study } => analyze(study, args, &sched),
        Command::Customize { common, inputs, protected } => {
            let mut paths: Vec<&Path> = vec![&inputs.data, &inputs.base];
            if let Some(p) = &protected {
                paths.push(p);
            }
            let mut run = Run::start("customize", args, &common, &paths)?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let subject = corpus.subject(id)?;
            let images = training_images(&run, subject, protected.as_deref())?;
            let (victim, samples, losses) = run.timed("customize", |cfg| {
                let mut victim = base.clone();
                let mut rng = stream(cfg.victim_seed, Stream::Victim);
                let losses = finetune(&mut victim, &sched, &images, id, cfg.eval.finetune_steps, cfg.eval.finetune_lr, &mut rng)?;
                let samples = sample(&victim, &sched, cfg.eval.samples, Some(id), &mut stream(cfg.victim_seed, Stream::Eval))?;
                Ok((victim, samples, losses))
            })?;
            let p = run.out.join("victim.dnz");
            save_checkpoint(&victim, &p)?;
            run.written.push(p);
            let sd = run.out.join("samples");
            std::fs::create_dir_all(&sd).map_err(Error::from)?;
            for (i, s) in samples.iter().enumerate() {
                let t = sd.join(format!("sample_{i:03}.tns"));
                s.save(&t)?;
                let g = sd.join(format!("sample_{i:03}.pgm"));
                write_pgm(&g, s)?;
                run.written.extend([t, g]);
            }
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l:e}");
            }
            run.write("finetune_loss.csv", &csv)?;
            run.finish()
        }
        Command::Evaluate {
            common,
            inputs,
            protected,
            victim_base,
        } => {
            let mut paths: Vec<&Path> = vec![&inputs.data, &inputs.base];
            paths.extend(protected.as_deref());
            paths.extend(victim_base.as_deref());
            let mut run = Run::start("evaluate", args, &common, &paths)?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let subject = corpus.subject(id)?;
            let encoder = run.timed("encoder", |cfg| Ok(lab::encoder(cfg, &corpus)?))?;
            match &victim_base {
                None => {
                    let pert = match &protected {
                        Some(dir) => Some(Perturbation::load(dir, subject.train.clone(), run.cfg.attack.eta)?),
                        None => None,
                    };
                    let report = run.timed("evaluate", |cfg| {
                        Ok(evaluate_protection(&base, &sched, subject, pert.as_ref(), &encoder, cfg.victim_seed, &cfg.eval)?)
                    })?;
                    print_report("report", &report);
                    run.write("report.csv", &report_csv(&report))?;
                }
                Some(vb) => {
                    let victim = load_checkpoint(vb)?.with_image_size(base.config().image_size);
                    let m = run.timed("mismatch", |cfg| {
                        Ok(mismatch_eval(&base, &victim, &sched, subject, &cfg.attack, &encoder, cfg.victim_seed, &cfg.eval)?)
                    })?;
                    print_report("matched", &m.matched);
                    print_report("mismatched", &m.mismatched);
                    run.write("report.csv", &report_csv(&m.matched))?;
                    run.write("report_mismatched.csv", &report_csv(&m.mismatched))?;
                }
            }
            run.finish()
        }
        Command::Ablate { common, inputs } => {
            let mut run = Run::start("ablate", args, &common, &[&inputs.data, &inputs.base])?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let subject = corpus.subject(id)?;
            let encoder = run.timed("encoder", |cfg| Ok(lab::encoder(cfg, &corpus)?))?;
            let rows = run.timed("ablate", |cfg| {
                let cells = cfg.ablation.cells(&cfg.attack)?;
                Ok(ablation_suite(&base, &sched, subject, &cells, &encoder, cfg.victim_seed, &cfg.eval)?)
            })?;
            run.write("ablation.csv", &ablation_csv(&rows))?;
            run.finish()
        }
        Command::Verify { seed, manifest, out } => verify(seed, manifest.as_deref(), out.as_deref(), args),
    }
}

fn training_images(run: &Run, subject: &Subject, protected: Option<&Path>) -> Result<Vec<Tensor>, Failure> {
    Ok(match protected {
        Some(dir) => Perturbation::load(dir, subject.train.clone(), run.cfg.attack.eta)?.perturbed(),
        None => subject.train.clone(),
    })
}

fn print_report(label: &str, r: &ProtectionReport) {
    println!(
        "{label}: ism_proxy {:.4} -> {:.4}, artifact_energy {:.4} -> {:.4}, recon_gap {:.4e}",
        r.clean.ism_proxy,
        r.protected.ism_proxy,
        r.clean.artifact_energy,
        r.protected.artifact_energy,
        r.recon_gap()
    );
}

fn analyze(study: Study, args: &[String], sched: &NoiseSchedule) -> Outcome {
    match study {
        Study::Grads { common, inputs } => {
            let mut run = Run::start("analyze-grads", args, &common, &[&inputs.data, &inputs.base])?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let x = corpus.subject(id)?.train[0].clone();
            let stats = run.timed("grads", |cfg| {
                let a = &cfg.analysis;
                let mut oracle = ModelOracle {
                    model: &base,
                    sched,
                    cond: Some(id),
                };
                let buckets = even_buckets(sched.steps(), a.grad_buckets);
                let mut rng = stream(cfg.seed, Stream::Analysis);
                Ok(gradient_stats(&mut oracle, &x, &buckets, a.grad_samples, a.grad_threshold, &mut rng)?)
            })?;
            run.write("grads.csv", &stats.to_csv())?;
            run.finish()
        }
        Study::Freq { common, inputs } => {
            let mut run = Run::start("analyze-freq", args, &common, &[&inputs.data, &inputs.base])?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let images = corpus.subject(id)?.train.clone();
            let study = run.timed("freq", |cfg| {
                let a = &cfg.analysis;
                let mut rng = stream(cfg.seed, Stream::Analysis);
                Ok(freq_residual_study(&base, sched, &images, Some(id), &a.freq_ranges, a.freq_samples, a.spectrum, &mut rng)?)
            })?;
            for r in &study {
                println!(
                    "t in [{}, {}]: high share {:.4}, low share {:.4}",
                    r.range.0,
                    r.range.1,
                    r.spectrum.high_share(),
                    r.spectrum.low_share()
                );
            }
            run.write("freq.csv", &residual_csv(&study))?;
            run.finish()
        }
        Study::Pca { common, inputs } => {
            let mut run = Run::start("analyze-pca", args, &common, &[&inputs.data, &inputs.base])?;
            let (corpus, base, id) = load_subject(&run, &inputs)?;
            let x0 = corpus.subject(id)?.train[0].clone();
            let maps = run.timed("pca", |cfg| {
                let a = &cfg.analysis;
                let mut rng = stream(cfg.seed, Stream::Analysis);
                let mut maps = Vec::new();
                for &t in &a.pca_timesteps {
                    sched.check_timestep(t)?;
                    let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
                    let xt = antitune::diffusion::forward_sample(&x0, t, &eps, sched)?;
                    let (_, feats) = base.denoise_with_features(&xt, t, Some(id))?;
                    maps.push((t, pca_features(&feats, &a.pca_layers, a.pca_components)?));
                }
                Ok(maps)
            })?;
            let mut csv = String::from("t,");
            csv.push_str(antitune::analysis::PCA_HEADER);
            csv.push('\n');
            for (t, m) in &maps {
                for line in m.to_csv().lines().skip(1) {
                    let _ = writeln!(csv, "{t},{line}");
                }
                let files = m.write_images(run.out.join(format!("t{t:03}")))?;
                run.written.extend(files);
            }
            run.write("pca.csv", &csv)?;
            run.finish()
        }
        Study::Theorem1 { common, profile } => {
            let mut run = Run::start("analyze-theorem1", args, &common, &[])?;
            let profiles = match &profile {
                Some(name) => vec![Profile::parse(name).map_err(|e| Failure::Usage(e.to_string()))?],
                None => Profile::SUITE.to_vec(),
            };
            let rows = run.timed("theorem1", |cfg| {
                let steps = sched.steps();
                let seeds = cfg.seed..cfg.seed + cfg.analysis.theorem1_seeds as u64;
                profiles
                    .iter()
                    .map(|&p| {
                        let out = theorem1_oracle(|t| p.value(t, steps), steps, seeds.clone(), cfg.attack.search_steps, cfg.attack.alpha)?;
                        Ok((p, out))
                    })
                    .collect::<Result<Vec<_>, Error>>()
                    .map_err(Failure::from)
            })?;
            for (p, o) in &rows {
                println!(
                    "{}: E_full {:.4}, E_selected {:.4}, win rate {:.3}",
                    p.name(),
                    o.e_full,
                    o.e_selected_mean(),
                    o.win_rate()
                );
            }
            run.write("theorem1.csv", &theorem1_csv(&rows))?;
            run.finish()
        }
    }
}

fn verify(seed: u64, manifest: Option<&Path>, out: Option<&Path>, args: &[String]) -> Outcome {
    let mut report = String::new();
    let mut failed = Vec::new();
    match manifest {
        None => {
            for c in run_suite(seed) {
                println!("{c}");
                let _ = writeln!(report, "{c}");
                if !c.passed {
                    failed.push(c.name.to_string());
                }
            }
        }
        Some(path) => {
            require_exists(path)?;
            let original = RunManifest::load(path)?;
            let lines = replay(&original)?;
            for (ok, line) in lines {
                println!("{line}");
                let _ = writeln!(report, "{line}");
                if !ok {
                    failed.push(line);
                }
            }
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
        let p = dir.join("verify.txt");
        std::fs::write(&p, &report).map_err(Error::from)?;
        let mut m = RunManifest::new("verify", args, seed, "");
        if let Some(path) = manifest {
            m.record_inputs(&[path.to_path_buf()])?;
        }
        m.record_outputs(dir, &[p])?;
        m.save(dir)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("{} check(s) failed", failed.len())))
    }
}

/// Reruns a recorded command with its config snapshot into a scratch
/// directory and compares every output checksum.
fn replay(original: &RunManifest) -> Result<Vec<(bool, String)>, Failure> {
    if original.command == "verify" {
        return Err(Failure::Usage("cannot replay a verify manifest".into()));
    }
    let changed = original.input_mismatches();
    if !changed.is_empty() {
        return Ok(changed.into_iter().map(|p| (false, format!("FAIL input changed: {p}"))).collect());
    }
    let scratch = tempfile::tempdir().map_err(Error::from)?;
    let cfg_path = scratch.path().join("config.cfg");
    std::fs::write(&cfg_path, &original.config).map_err(Error::from)?;
    let out = scratch.path().join("out");
    let mut args = Vec::new();
    let mut it = original.args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--out" | "--config" => {
                it.next();
            }
            s if s.starts_with("--out=") || s.starts_with("--config=") || s == "--seed" => {
                if s == "--seed" {
                    it.next();
                }
            }
            s if s.starts_with("--seed=") => {}
            _ => args.push(a.clone()),
        }
    }
    args.extend([
        "--config".to_string(),
        cfg_path.to_string_lossy().into_owned(),
        "--out".to_string(),
        out.to_string_lossy().into_owned(),
    ]);
    let cli = Cli::try_parse_from(std::iter::once("antitune".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Failure::Usage(format!("manifest arguments do not parse: {e}")))?;
    run_command(cli, &args)?;
    let rerun = RunManifest::load(out.join(MANIFEST_FILE))?;
    let mut lines = Vec::new();
    for a in &original.outputs {
        let ok = rerun.outputs.iter().any(|b| b.path == a.path && b.sha256 == a.sha256);
        let tag = if ok { "PASS" } else { "FAIL" };
        lines.push((ok, format!("{tag} {}", a.path)));
    }
    if rerun.outputs.len() != original.outputs.len() {
        lines.push((false, format!(
            "FAIL output count {} != {}",
            rerun.outputs.len(),
            original.outputs.len()
        )));
    }
    Ok(lines)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_command(cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
