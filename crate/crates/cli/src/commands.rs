use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deltamask::aggregation::verify_error_bound;
use deltamask::codec::{export_png as encode_png, image_dimensions, EncodedUpdate};
use deltamask::filters::{FilterConfig, FuseFilter, HashSeed};
use deltamask::model::generate_dataset;
use deltamask::sim::{run_experiment_with, write_metrics_csv, TransmissionKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config;
use crate::{CliError, ConfigArgs, LayoutArg, ThetaArg};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn run(args: &ConfigArgs, dry_run: bool, dump_updates: bool) -> Result<(), CliError> {
    let cfg = config::load(args.config.as_deref(), &args.overrides)?;
    let rendered = config::render(&cfg);
    if dry_run {
        print!("{rendered}");
        return Ok(());
    }
    let out = &args.out;
    create_dir(out)?;
    write(&out.join("config.toml"), rendered.as_bytes())?;
    let updates = out.join("updates");
    if dump_updates {
        create_dir(&updates)?;
    }

    let mut dump_error = None;
    let result = run_experiment_with(&cfg, |round| {
        let m = &round.metrics;
        log::info!(
            "round {}: accuracy {:.4}, mean bpp {:.4}, mean |delta'| {:.1}",
            m.round,
            m.accuracy,
            m.mean_bpp,
            m.mean_delta_prime
        );
        if !dump_updates || dump_error.is_some() {
            return;
        }
        for tx in &round.transmissions {
            let ext = match tx.kind {
                TransmissionKind::Filter => "dmu",
                TransmissionKind::Dense => "dmd",
                TransmissionKind::Raw => "idx",
            };
            let path = updates.join(format!("r{:04}-c{:03}.{ext}", m.round, tx.client));
            if let Err(e) = write(&path, &tx.bytes) {
                dump_error = Some(e);
                return;
            }
        }
    })?;
    if let Some(e) = dump_error {
        return Err(e);
    }

    let mut csv = Vec::new();
    write_metrics_csv(&result.metrics, &mut csv)
        .map_err(|e| CliError::Failed(format!("writing metrics: {e}")))?;
    write(&out.join("metrics.csv"), &csv)?;
    let summary = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| CliError::Failed(format!("serializing summary: {e}")))?;
    write(&out.join("summary.json"), summary.as_bytes())?;
    write(&out.join("checkpoint.dmg"), &result.state.global.to_bytes())?;

    let s = &result.summary;
    println!("rounds            {}", s.rounds);
    println!("parameters        {}", s.d);
    println!("probe accuracy    {:.4}", s.probe_accuracy);
    println!("final accuracy    {:.4}", s.final_accuracy);
    println!("average bpp       {:.4}", s.average_bpp);
    println!("total bytes       {}", s.total_bytes);
    println!("relative volume   {:.5}", s.relative_volume);
    println!("output            {}", out.display());
    Ok(())
}

pub struct BenchArgs {
    pub keys: usize,
    pub bpe: u8,
    pub arity: u8,
    pub layout: LayoutArg,
    pub repetitions: usize,
    pub probes: usize,
    pub seed: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn bench_filter(args: BenchArgs) -> Result<(), CliError> {
    let config = match args.layout {
        LayoutArg::BinaryFuse => FilterConfig::binary_fuse(args.arity, args.bpe),
        LayoutArg::Xor => FilterConfig::xor(args.bpe),
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    // Members have the top bit clear and probes have it set, so no probe is
    // a member.
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut keys: Vec<u64> = (0..args.keys).map(|_| rng.random::<u64>() >> 1).collect();
    keys.sort_unstable();
    keys.dedup();
    let probes: Vec<u64> = (0..args.probes)
        .map(|_| rng.random::<u64>() | 1 << 63)
        .collect();

    let mut build_secs = Vec::with_capacity(args.repetitions);
    let mut filter = None;
    for r in 0..args.repetitions {
        let start = Instant::now();
        let f = FuseFilter::build_with(&keys, config, HashSeed(args.seed).child(r as u64))
            .map_err(|e| CliError::Failed(e.to_string()))?;
        build_secs.push(start.elapsed().as_secs_f64());
        filter = Some(f);
    }
    let filter = filter.expect("at least one repetition");

    let start = Instant::now();
    let missing = keys.iter().filter(|&&k| !filter.contains(k)).count();
    let member_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let hits = probes.iter().filter(|&&k| filter.contains(k)).count();
    let probe_secs = start.elapsed().as_secs_f64();

    let n = keys.len() as f64;
    let build = median(build_secs);
    let p = 0.5f64.powi(args.bpe as i32);
    let fpr = hits as f64 / probes.len() as f64;
    let sigma = (p * (1.0 - p) / probes.len() as f64).sqrt();
    println!("keys                 {}", keys.len());
    println!("layout               {:?}", config.layout);
    println!("arity                {}", config.arity);
    println!("bits_per_entry       {}", config.bits_per_entry);
    println!("construct_ms_median  {:.3}", build * 1e3);
    println!("construct_ns_per_key {:.1}", build * 1e9 / n);
    println!(
        "query_ns             {:.1}",
        (member_secs + probe_secs) * 1e9 / (n + probes.len() as f64)
    );
    println!("bits_per_key         {:.4}", filter.bits_per_key());
    println!("false_negatives      {missing}");
    println!("fpr                  {fpr:.3e}");
    println!("fpr_expected         {p:.3e}");
    println!("fpr_within_5_sigma   {}", (fpr - p).abs() <= 5.0 * sigma);
    if missing > 0 {
        return Err(CliError::Failed(format!(
            "{missing} inserted keys not found"
        )));
    }
    Ok(())
}

pub fn verify_bound(
    d: usize,
    k: usize,
    trials: usize,
    bpe: Option<u32>,
    theta: ThetaArg,
    seed: u64,
) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| match theta {
                    ThetaArg::Random => rng.random(),
                    ThetaArg::Half => 0.5,
                })
                .collect()
        })
        .collect();
    let report = verify_error_bound(&matrix, trials, bpe, HashSeed(seed))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!("d          {}", report.d);
    println!("clients    {}", report.clients);
    println!("trials     {}", report.trials);
    println!("empirical  {:.4}", report.empirical);
    println!("bound      {:.4}", report.bound);
    println!("threshold  {:.4}", report.threshold);
    println!("result     {}", if report.passed { "PASS" } else { "FAIL" });
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "empirical error {:.4} exceeds {:.4}",
            report.empirical, report.threshold
        )))
    }
}

pub fn export_png(update: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let bytes = fs::read(update).map_err(CliError::io(format!("reading {}", update.display())))?;
    let invalid = |e: deltamask::codec::CodecError| CliError::Input {
        path: update.display().to_string(),
        message: e.to_string(),
    };
    let parsed = EncodedUpdate::from_bytes(&bytes).map_err(invalid)?;
    let fingerprints = parsed.fingerprint_bytes().map_err(invalid)?;
    let png = encode_png(&fingerprints).map_err(invalid)?;
    let out = out.unwrap_or_else(|| update.with_extension("png"));
    write(&out, &png)?;
    let (w, h) = image_dimensions(fingerprints.len());
    println!(
        "{} ({w}x{h}, {} fingerprint bytes)",
        out.display(),
        fingerprints.len()
    );
    Ok(())
}

pub fn gen_data(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = config::load(args.config.as_deref(), &args.overrides)?;
    create_dir(&args.out)?;
    for (name, spec) in [
        ("train.csv", cfg.data.train_spec()),
        ("test.csv", cfg.data.test_spec()),
    ] {
        let data = generate_dataset(&spec).map_err(|e| CliError::Config {
            key: "data".into(),
            message: e.to_string(),
        })?;
        let path = args.out.join(name);
        let file = fs::File::create(&path)
            .map_err(CliError::io(format!("creating {}", path.display())))?;
        data.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| CliError::Failed(format!("writing {}: {e}", path.display())))?;
        println!("{} ({} rows)", path.display(), data.len());
    }
    Ok(())
}
