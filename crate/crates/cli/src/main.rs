//! Command-line harness: index building, ground truth, searching, the
//! benchmark sweep, and the codebook-usage profilers.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use juno::bench::{run_bench, BenchConfig};
use juno::dataset::{read_vecs, write_vecs, Dataset, Metric, NeighborTable, VecElem};
use juno::error::Error;
use juno::index::{Index, TrainParams};
use juno::reference::brute_force_topk;
use juno::search::{search_batch, Mode, SearchParams};

#[derive(Parser)]
#[command(name = "juno", about = "CPU approximate nearest neighbor search", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an index from a base fvecs file and write the bundle.
    Build {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        entries: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Exact brute-force neighbors; ids go to OUT (ivecs) and scores to
    /// OUT with the extension replaced by .fvecs.
    Groundtruth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search a saved index; ids go to OUT (ivecs) and scores to OUT with
    /// the extension replaced by .fvecs. Unfilled slots hold id -1.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        nprobs: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value = "h")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the (nprobs, scale, mode) grid from a JSON config and write
    /// OUT.json and OUT.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "bench_report")]
        out: PathBuf,
    },
    /// Codebook-usage and locality profiles against a ground-truth file.
    Profile {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("config error: {}", msg);
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Build {
            base,
            metric,
            clusters,
            entries,
            out,
            seed,
        } => {
            let mut ds = read_vecs(&base, VecElem::Float32)?;
            ds.metric = metric;
            eprintln!("loaded {} points of dimension {}", ds.n, ds.d);
            let t0 = Instant::now();
            let index = Index::train(&ds, &TrainParams::new(clusters, entries, seed))?;
            eprintln!(
                "trained {} clusters x {} entries over {} subspaces in {:.2?}",
                index.c,
                index.e,
                index.n_sub,
                t0.elapsed()
            );
            index.save(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Groundtruth {
            base,
            queries,
            k,
            metric,
            out,
        } => {
            let base = read_vecs(&base, VecElem::Float32)?;
            let queries = read_vecs(&queries, VecElem::Float32)?;
            let t0 = Instant::now();
            let gt = brute_force_topk(&base, &queries, metric, k)?;
            eprintln!(
                "brute-forced {} queries x top-{} over {} points in {:.2?}",
                queries.n,
                k,
                base.n,
                t0.elapsed()
            );
            let scores_path = out.with_extension("fvecs");
            gt.save(&out, &scores_path)?;
            eprintln!("wrote {} and {}", out.display(), scores_path.display());
            Ok(())
        }
        Command::Search {
            index,
            queries,
            k,
            nprobs,
            scale,
            mode,
            out,
        } => {
            let index = Index::load(&index)?;
            let mut queries = read_vecs(&queries, VecElem::Float32)?;
            queries.metric = index.metric;
            let mut params = SearchParams::new(nprobs, k);
            params.thres_scale = scale;
            params.mode = mode;
            let t0 = Instant::now();
            let results = search_batch(&queries, &index, &params)?;
            let elapsed = t0.elapsed();

            let n_q = results.len().max(1) as f64;
            let mean = |f: &dyn Fn(&juno::QueryResult) -> f64| -> f64 {
                results.iter().map(f).sum::<f64>() / n_q
            };
            eprintln!(
                "searched {} queries in {:.2?} ({:.0} qps)",
                results.len(),
                elapsed,
                results.len() as f64 / elapsed.as_secs_f64()
            );
            eprintln!(
                "mean stage ns: filter {:.0}, lut {:.0}, distcalc {:.0}; mean ops: \
                 {:.0} sphere tests, {:.0} lut values",
                mean(&|r| r.timings.filter_ns as f64),
                mean(&|r| r.timings.lut_ns as f64),
                mean(&|r| r.timings.distcalc_ns as f64),
                mean(&|r| r.ops.sphere_tests as f64),
                mean(&|r| r.ops.lut_values as f64),
            );

            let mut ids = Vec::with_capacity(results.len() * k);
            let mut scores = Vec::with_capacity(results.len() * k);
            for r in &results {
                for j in 0..k {
                    ids.push(r.ids.get(j).map_or(-1.0, |&id| id as f32));
                    scores.push(r.scores.get(j).map_or(0.0, |&s| s as f32));
                }
            }
            let scores_path = out.with_extension("fvecs");
            write_vecs(
                &out,
                &Dataset::new(results.len(), k, ids, queries.metric)?,
                VecElem::Int32,
            )?;
            write_vecs(
                &scores_path,
                &Dataset::new(results.len(), k, scores, queries.metric)?,
                VecElem::Float32,
            )?;
            eprintln!("wrote {} and {}", out.display(), scores_path.display());
            Ok(())
        }
        Command::Bench { config, out } => {
            let cfg = BenchConfig::from_path(&config)?;
            let report = run_bench(&cfg)?;
            println!(
                "{:>6} {:>8} {:>4} {:>10} {:>12} {:>10} {:>8}",
                "nprobs", "scale", "mode", "R1@100", "R100@1000", "qps", "op-ratio"
            );
            for row in &report.rows {
                println!(
                    "{:>6} {:>8} {:>4} {:>10.4} {:>12.4} {:>10.1} {:>8.3}",
                    row.nprobs,
                    row.scale,
                    row.mode,
                    row.recall_1_at_100,
                    row.recall_100_at_1000,
                    row.qps,
                    row.op_ratio_selective_vs_dense
                );
            }
            let json = out.with_extension("json");
            let csv = out.with_extension("csv");
            report.write_json(&json)?;
            report.write_csv(&csv)?;
            eprintln!("wrote {} and {}", json.display(), csv.display());
            Ok(())
        }
        Command::Profile {
            index,
            queries,
            gt,
            out_dir,
        } => {
            let index = Index::load(&index)?;
            let mut queries = read_vecs(&queries, VecElem::Float32)?;
            queries.metric = index.metric;
            let gt = NeighborTable::load_ids(&gt)?;
            let usage = juno::bench::profile_entry_usage(&index, &queries, &gt)?;
            let cdf = juno::bench::profile_locality_cdf(&index, &queries, &gt)?;

            std::fs::create_dir_all(&out_dir)?;
            let mut usage_csv = String::from("subspace,mean_usage_ratio,max_usage_ratio\n");
            for s in 0..usage.n_sub {
                usage_csv.push_str(&format!(
                    "{},{},{}\n",
                    s, usage.mean_usage_ratio[s], usage.max_usage_ratio[s]
                ));
            }
            std::fs::write(out_dir.join("entry_usage.csv"), usage_csv)?;

            let mut rank_csv = String::from("subspace,rank,mean_freq\n");
            for s in 0..usage.n_sub {
                for (rank, f) in usage.freq_by_rank[s].iter().enumerate() {
                    rank_csv.push_str(&format!("{},{},{}\n", s, rank, f));
                }
            }
            std::fs::write(out_dir.join("entry_usage_by_rank.csv"), rank_csv)?;

            let mut cdf_csv = String::from("subspace,rank,cdf\n");
            for s in 0..cdf.n_sub {
                for (rank, v) in cdf.cdf[s].iter().enumerate() {
                    cdf_csv.push_str(&format!("{},{},{}\n", s, rank, v));
                }
            }
            std::fs::write(out_dir.join("locality_cdf.csv"), cdf_csv)?;

            for s in 0..usage.n_sub {
                eprintln!(
                    "subspace {:3}: mean usage {:.3}, max {:.3}, half-rank coverage {:.3}",
                    s,
                    usage.mean_usage_ratio[s],
                    usage.max_usage_ratio[s],
                    cdf.cdf[s][cdf.entries / 2 - 1]
                );
            }
            eprintln!("wrote profiles under {}", out_dir.display());
            Ok(())
        }
    }
}
