use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use arq_core::certify::{certify_dataset, parse_records_csv, AcrReport, SmoothingParams, RADIUS_GRID};
use arq_core::data::{gen_dataset, Dataset};
use arq_core::format::{load_dataset, load_model, save_cache, save_dataset, save_model};
use arq_core::nn::{tiny_conv_net, train_gaussian};
use arq_core::quant::QuantPolicy;
use arq_core::rng::{derive_seed, Purpose};
use arq_core::search::{evaluate_policy, run_search, SearchData};

use crate::config::RunConfig;
use crate::Failure;

const SPLITS: [&str; 3] = ["train", "cert", "eval"];

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Creates the run directory and snapshots the resolved configuration.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn split_path(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(format!("{split}.arqdata"))
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset, Failure> {
    if !SPLITS.contains(&split) {
        return Err(Failure::Config(format!("unknown split {split:?} (expected train, cert or eval)")));
    }
    load_dataset(&split_path(dir, split)).map_err(|e| Failure::Runtime(format!("{}: {e}", split_path(dir, split).display())))
}

/// A dataset directory (using `split`), an `.arqdata` file or a `.csv` file.
fn load_inputs(cfg: &RunConfig, data: &Path, split: &str) -> Result<Dataset, Failure> {
    if data.is_dir() {
        return load_split(data, split);
    }
    let ds = match data.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let d = &cfg.data;
            Dataset::from_csv_path(data, vec![d.channels, d.image_size, d.image_size], d.num_classes)
        }
        _ => load_dataset(data),
    };
    ds.map_err(|e| Failure::Runtime(format!("{}: {e}", data.display())))
}

fn load_net(path: &Path) -> Result<arq_core::nn::Network, Failure> {
    load_model(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let splits = gen_dataset(&cfg.data_config()).map_err(|e| Failure::Config(e.to_string()))?;
    prepare_out(out, cfg)?;
    for (name, ds) in SPLITS.iter().zip([&splits.train, &splits.cert, &splits.eval]) {
        save_dataset(ds, &split_path(out, name))?;
    }
    println!(
        "wrote {} train / {} cert / {} eval samples to {}",
        splits.train.len(),
        splits.cert.len(),
        splits.eval.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), Failure> {
    let train = load_split(data, "train")?;
    let net = tiny_conv_net(&cfg.model_config(), cfg.seed)?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    prepare_out(out, cfg)?;
    let report = train_gaussian(net, &train, &tcfg)?;
    save_model(&report.net, &out.join("model.arqnet"))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write(&out.join("train_loss.csv"), &csv)?;
    println!(
        "trained {} epochs, final loss {:.4}",
        report.epoch_loss.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_report(out: &Path, report: &AcrReport) -> Result<(), Failure> {
    write(&out.join("records.csv"), &report.records_csv())?;
    write(&out.join("certified_accuracy.csv"), &report.accuracy_table_csv())
}

pub fn certify(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let net = load_net(model)?;
    let c = &cfg.certify;
    let mut inputs = load_inputs(cfg, data, &c.split)?;
    if c.num_inputs > 0 {
        inputs = inputs.head(c.num_inputs.min(inputs.len()));
    }
    let params = SmoothingParams::new(c.sigma, c.n, c.alpha);
    let seed = derive_seed(cfg.seed, Purpose::Certify as u64);
    prepare_out(out, cfg)?;
    let (report, cache) = certify_dataset(&net, &inputs, &params, seed, c.trace_len.min(c.n))?;
    write_report(out, &report)?;
    save_cache(&cache, &out.join("cache.arqcache"))?;
    let abstained = report.records.iter().filter(|r| r.abstained()).count();
    println!(
        "ACR {:.4}, clean accuracy {:.4}, {abstained}/{} abstained",
        report.acr,
        report.clean_accuracy(),
        report.records.len()
    );
    Ok(())
}

pub fn search(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let net = load_net(model)?;
    let scfg = cfg.search_config()?;
    let pool = load_split(data, "train")?;
    let cert = load_split(data, "cert")?;
    prepare_out(out, cfg)?;
    let result = run_search(&scfg, &net, SearchData { cert: &cert, pool: &pool })?;
    write(&out.join("history.csv"), &result.history_csv())?;
    write(&out.join("original_records.csv"), &result.original.records_csv())?;
    fs::write(out.join("agent.arqddpg"), result.agent.save_checkpoint()).map_err(|e| io_err(out, e))?;
    match (&result.best_policy, &result.best_network) {
        (Some(p), Some(q)) => {
            write(&out.join("best_policy.txt"), &p.to_string())?;
            save_model(q.base(), &out.join("best_model.arqnet"))?;
            println!(
                "original ACR {:.4}; best reward {:.4} with policy {} (budget {} BitOPs)",
                result.acr_orig,
                result.best_reward.unwrap_or(f64::NAN),
                p.policy_string(),
                result.budget
            );
        }
        _ => println!("original ACR {:.4}; no episodes run", result.acr_orig),
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, model: &Path, data: &Path, policy: &Path, out: &Path) -> Result<(), Failure> {
    let net = load_net(model)?;
    let scfg = cfg.search_config()?;
    let text = fs::read_to_string(policy).map_err(|e| io_err(policy, e))?;
    let policy = QuantPolicy::parse(&text).map_err(|e| Failure::Config(e.to_string()))?;
    let pool = load_split(data, "train")?;
    let eval = load_split(data, "eval")?;
    prepare_out(out, cfg)?;
    let (report, cost) = evaluate_policy(&net, &policy, &eval, &pool, &scfg)?;
    write_report(out, &report)?;
    write(&out.join("cost.csv"), &cost.to_csv())?;
    println!(
        "ACR {:.4}, clean accuracy {:.4}, {} BitOPs, {} weight bits",
        report.acr,
        report.clean_accuracy(),
        cost.total_bops,
        cost.total_size_bits
    );
    Ok(())
}

pub fn report(cfg: &RunConfig, records: &[std::path::PathBuf], out: &Path) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for path in records {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let recs = parse_records_csv(file).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        reports.push((name, AcrReport::from_records(recs)));
    }
    prepare_out(out, cfg)?;
    let mut table = String::from("radius");
    for (name, _) in &reports {
        let _ = write!(table, ",{name}");
    }
    table.push('\n');
    for (i, r) in RADIUS_GRID.iter().enumerate() {
        let _ = write!(table, "{r}");
        for (_, rep) in &reports {
            let _ = write!(table, ",{}", rep.certified_accuracy[i].1);
        }
        table.push('\n');
    }
    write(&out.join("certified_accuracy.csv"), &table)?;
    let mut summary = String::from("name,inputs,acr,clean_accuracy,abstain_rate\n");
    for (name, rep) in &reports {
        let n = rep.records.len();
        let abstain = rep.records.iter().filter(|r| r.abstained()).count() as f64 / n.max(1) as f64;
        let _ = writeln!(summary, "{name},{n},{},{},{abstain}", rep.acr, rep.clean_accuracy());
    }
    write(&out.join("summary.csv"), &summary)?;
    print!("{table}");
    Ok(())
}
