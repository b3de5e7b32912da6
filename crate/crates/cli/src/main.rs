//! Command-line front end: run the scoring service, talk to a running one,
//! or run the offline benchmark comparing both scoring methods.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use privscore_cli::bench::{self, BenchConfig};
use privscore_cli::client::Client;
use privscore_core::dataset;
use privscore_service::types::{JobStatus, RecordSubmission, TaskRegistration};
use privscore_service::{http, Service};

#[derive(Parser)]
#[command(
    name = "privscore",
    version,
    about = "Membership-risk scoring for fine-tuning data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scoring service over a durable data directory.
    Serve {
        /// Port to bind on 127.0.0.1; 0 picks a free port.
        #[arg(long, default_value_t = 0, env = "PRIVSCORE_PORT")]
        port: u16,
        #[arg(long, env = "PRIVSCORE_DATA_DIR")]
        data_dir: PathBuf,
    },
    /// Register a scoring task from a JSON description.
    Register {
        #[arg(long)]
        server: String,
        /// JSON file holding the task registration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Submit a CSV of records to a task's scoring pool.
    Submit {
        #[arg(long)]
        server: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        contributor: String,
        #[arg(long)]
        csv: PathBuf,
        /// Idempotency id; defaults to a digest of the file's contents, so
        /// resubmitting the same file is rejected instead of double-counted.
        #[arg(long)]
        submission_id: Option<String>,
    },
    /// Show one job's progress.
    Status {
        #[arg(long)]
        server: String,
        #[arg(long)]
        job: String,
    },
    /// Fetch one contributor's scores.
    FetchScores {
        #[arg(long)]
        server: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        contributor: String,
        /// Also write the scores as CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare batch scoring against the per-sample baseline offline.
    Bench {
        /// JSON config; missing fields take built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Serve { port, data_dir } => serve(port, &data_dir),
        Command::Register { server, config } => register(&server, &config),
        Command::Submit {
            server,
            task,
            contributor,
            csv,
            submission_id,
        } => submit(&server, &task, &contributor, &csv, submission_id),
        Command::Status { server, job } => status(&server, &job),
        Command::FetchScores {
            server,
            task,
            contributor,
            out,
        } => fetch_scores(&server, &task, &contributor, out.as_deref()),
        Command::Bench { config, seed, out } => run_bench(config.as_deref(), seed, out),
    }
}

fn serve(port: u16, data_dir: &Path) -> Result<()> {
    let service = Service::open(data_dir)
        .with_context(|| format!("opening data directory {}", data_dir.display()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .with_context(|| format!("binding 127.0.0.1:{port}"))?;
        // Announced only once the socket is live; port 0 resolves here.
        println!("listening on http://{}", listener.local_addr()?);
        http::serve(service, listener).await?;
        Ok(())
    })
}

fn register(server: &str, config: &Path) -> Result<()> {
    let text = fs::read_to_string(config)
        .with_context(|| format!("reading {}", config.display()))?;
    let registration: TaskRegistration =
        serde_json::from_str(&text).context("parsing task registration")?;
    let response = Client::new(server)?.register(&registration)?;
    println!("task {} registered", response.task_id);
    println!("population records: {}", response.population_records);
    println!("ensemble digest: {}", response.ensemble_digest);
    Ok(())
}

fn submit(
    server: &str,
    task: &str,
    contributor: &str,
    csv: &Path,
    submission_id: Option<String>,
) -> Result<()> {
    let data = dataset::read_csv(csv)?;
    let id = submission_id.unwrap_or_else(|| format!("s{}", &data.digest()[..16]));
    let submission = RecordSubmission {
        submission_id: id,
        contributor_id: contributor.to_string(),
        records: data.records().to_vec(),
    };
    let response = Client::new(server)?.submit(task, &submission)?;
    println!(
        "submission {} accepted: {} records, {} pending in pool",
        response.submission_id, response.accepted, response.pending
    );
    match response.triggered_job {
        Some(job) => println!("triggered job {job}"),
        None => println!("no job triggered"),
    }
    Ok(())
}

fn status(server: &str, job: &str) -> Result<()> {
    let view = Client::new(server)?.job(job)?;
    println!("job {} [{}]", view.job_id, status_name(view.status));
    println!("task: {}", view.task_id);
    println!("records: {}", view.records_total);
    println!("models: {}/{}", view.models_done, view.models_total);
    if let Some(error) = &view.error {
        println!("error: {error}");
    }
    Ok(())
}

fn status_name(status: JobStatus) -> &'static str {
    match status {
        JobStatus::Running => "running",
        JobStatus::Done => "done",
        JobStatus::Failed => "failed",
    }
}

fn fetch_scores(
    server: &str,
    task: &str,
    contributor: &str,
    out: Option<&Path>,
) -> Result<()> {
    let response = Client::new(server)?.scores(task, contributor)?;
    println!(
        "{} scored, {} awaiting a job",
        response.results.len(),
        response.unscored.len()
    );
    for r in &response.results {
        println!("{}\t{}\t(job {})", r.record_id, r.score, r.job_id);
    }
    for u in &response.unscored {
        match &u.job_id {
            Some(job) => println!("{}\t{} in {}", u.record_id, u.state, job),
            None => println!("{}\t{}", u.record_id, u.state),
        }
    }
    if let Some(path) = out {
        let mut csv = String::from("record_id,score,c_correct,n,job_id\n");
        for r in &response.results {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.record_id, r.score, r.c_correct, r.n, r.job_id
            ));
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_bench(config_path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut config = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).context("parsing bench config")?
        }
        None => BenchConfig::default(),
    };
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = out;
    }
    let outcome = bench::run(&config)?;

    println!("records={}", config.m);
    println!("batch_models={}", config.n);
    println!("baseline_models_per_record={}", config.n_base);
    println!("shadow_models={}", config.k);
    let t = &outcome.timings;
    println!("batch_total_ms={:.1}", t.batch_total_ms);
    println!("batch_ms_per_record={:.3}", t.batch_ms_per_record);
    println!("baseline_total_ms={:.1}", t.baseline_total_ms);
    println!("baseline_ms_per_record={:.3}", t.baseline_ms_per_record);
    println!("per_record_speedup={:.1}", t.per_record_speedup);
    println!("batch_fine_tunes={}", t.batch_fine_tunes);
    println!("baseline_trainings={}", t.baseline_trainings);
    println!("pearson={}", fmt_opt(outcome.comparison.pearson));
    println!("spearman={}", fmt_opt(outcome.comparison.spearman));
    println!("mean_abs_diff={:.4}", outcome.comparison.mean_abs_diff);
    println!("out_dir={}", outcome.out_dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".to_string(),
    }
}
