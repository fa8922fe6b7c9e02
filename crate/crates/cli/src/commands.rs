//! The subcommands. Each reads its inputs, writes CSV/JSON into the output
//! directory and returns the paths it produced.

use std::path::{Path, PathBuf};

use qphase_core::datagen::{
    generate_phase_dataset, read_dataset, write_dataset, write_manifest, Dataset, GenConfig, Manifest, PhaseLabel, GENERATOR_VERSION,
};
use qphase_core::gem::{local_gem, GemResult};
use qphase_core::groundstate::{bkt_boundary, ising_boundary, lanczos_ground, AnnniParams, LanczosConfig};
use qphase_core::metrics::{best_threshold, roc_auc, Metrics};
use qphase_core::rng::derive_seed;
use qphase_core::shadows::{mean_snapshot, measure_shadows_keyed, mi_classify, BasisChoice, ShadowSet};
use qphase_nn::{predict_corpus, train_datasets, Classifier, ClassifierConfig, Corpus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{fmt_value, git_describe, timestamp, Output};

fn dataset_manifest(cfg: &RunConfig, out: &Output, l: usize, n_s: usize, n_b: usize, label: Option<u8>, extra: serde_json::Value) -> Manifest {
    Manifest {
        seed: cfg.seed,
        n_chain: cfg.n_chain,
        l,
        t: cfg.t,
        n_s,
        n_b,
        phase_label: label,
        patch_start: (cfg.n_chain - l) / 2,
        generator_version: GENERATOR_VERSION.into(),
        git_describe: git_describe(),
        timestamp: timestamp(),
        config_hash: out.hash().to_string(),
        extra,
    }
}

/// Both phases at every patch length: one file per `l`, trivial states first.
pub fn gen(cfg: &RunConfig, out: &mut Output) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for &l in &cfg.ls {
        let mut data: Option<Dataset> = None;
        for label in [PhaseLabel::Trivial, PhaseLabel::Ssb] {
            let seed = derive_seed(cfg.seed, &[l as u64, label as u64]);
            let g = GenConfig::new(label, cfg.n_chain, l, cfg.t, cfg.n_s, cfg.n_b, seed);
            let d = generate_phase_dataset(&g)?;
            data = Some(match data {
                None => d,
                Some(a) => a.concat(d)?,
            });
        }
        let mut d = data.expect("two phases");
        d.header.seed = cfg.seed;
        let path = out.path(&format!("{}_l{l}.shdw", cfg.split));
        write_dataset(&d, &path)?;
        let m = dataset_manifest(cfg, out, l, cfg.n_s, cfg.n_b, None, serde_json::Value::Null);
        write_manifest(&path, &m)?;
        eprintln!("wrote {} ({} states)", path.display(), d.n_states());
        files.push(path);
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub g: f64,
    pub kappa: f64,
    pub energy: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Row of the state in the ground-state dataset, empty when not converged.
    pub dataset_index: Option<usize>,
}

pub const GROUND_DATASET: &str = "ground.shdw";
pub const GROUND_GRID: &str = "ground_grid.csv";

/// Even-sector ground states over the `(g, κ)` grid, measured on the centred patch.
pub fn ground(cfg: &RunConfig, out: &mut Output) -> Result<Vec<PathBuf>, CliError> {
    let sw = &cfg.ground;
    let points: Vec<(f64, f64)> = sw
        .kappa_values()
        .into_iter()
        .flat_map(|k| sw.g_values().into_iter().map(move |g| (g, k)))
        .collect();
    let start = (cfg.n_chain - sw.l) / 2;
    let lc = LanczosConfig {
        tol: sw.lanczos_tol,
        max_iter: sw.lanczos_max_iter,
        seed: cfg.seed,
    };
    eprintln!("solving {} grid points at N = {}", points.len(), cfg.n_chain);
    let solved: Vec<(GridRow, Option<ShadowSet>)> = points
        .par_iter()
        .enumerate()
        .map(|(i, &(g, kappa))| -> Result<_, CliError> {
            let p = AnnniParams::new(g, kappa, cfg.n_chain);
            match lanczos_ground(&p, &lc) {
                Ok(r) => {
                    let set = measure_shadows_keyed(&r.state, start, sw.l, sw.n_s, BasisChoice::Haar, cfg.seed, i as u64)?;
                    let row = GridRow {
                        index: i,
                        g,
                        kappa,
                        energy: r.energy,
                        iterations: r.iterations,
                        residual: r.residual,
                        converged: true,
                        dataset_index: None,
                    };
                    Ok((row, Some(set)))
                }
                Err(qphase_core::groundstate::GroundStateError::NotConverged { iterations, residual, energy }) => {
                    eprintln!("warning: no convergence at g = {g}, kappa = {kappa} (residual {residual:e})");
                    let row = GridRow {
                        index: i,
                        g,
                        kappa,
                        energy,
                        iterations,
                        residual,
                        converged: false,
                        dataset_index: None,
                    };
                    Ok((row, None))
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(solved.len());
    let mut sets = Vec::new();
    for (mut row, set) in solved {
        if let Some(s) = set {
            row.dataset_index = Some(sets.len());
            sets.push(s);
        }
        rows.push(row);
    }
    let mut files = Vec::new();
    let failed = rows.iter().filter(|r| !r.converged).count();
    if !sets.is_empty() {
        let d = Dataset::from_sets(cfg.n_chain, 0, cfg.seed, &sets)?;
        let path = out.path(GROUND_DATASET);
        write_dataset(&d, &path)?;
        let extra = serde_json::json!({ "source": "ground states", "grid": GROUND_GRID });
        write_manifest(&path, &dataset_manifest(cfg, out, sw.l, sw.n_s, sets.len(), None, extra))?;
        files.push(path);
    }
    let grid_path = out.path(GROUND_GRID);
    let mut w = csv::Writer::from_path(&grid_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    files.push(grid_path);
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} grid points did not converge", rows.len())));
    }
    Ok(files)
}

pub fn read_grid(dir: &Path) -> Result<Vec<GridRow>, CliError> {
    let mut r = csv::Reader::from_path(dir.join(GROUND_GRID))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn load_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Config("no dataset given (use --data)".into()));
    }
    paths
        .iter()
        .map(|p| read_dataset(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect()
}

/// Architecture stored next to a checkpoint, `model.ckpt` -> `model.json`.
pub fn model_config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn load_model(ckpt: &Path, fallback: &ClassifierConfig) -> Result<Classifier<f32>, CliError> {
    let side = model_config_path(ckpt);
    let cfg = if side.exists() {
        serde_json::from_str(&std::fs::read_to_string(&side)?)?
    } else {
        fallback.clone()
    };
    Ok(Classifier::load(ckpt, cfg)?)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_acc: f64,
    epochs_run: usize,
    n_states: usize,
    val_fraction: f64,
    trainable_parameters: usize,
}

pub fn train(cfg: &RunConfig, data: &[PathBuf], out: &mut Output) -> Result<PathBuf, CliError> {
    let sets = load_datasets(data)?;
    let n_states = sets.iter().map(Dataset::n_states).sum();
    let outcome = train_datasets(&sets, &cfg.classifier, &cfg.train, |r| {
        eprintln!(
            "epoch {:3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc
        )
    })?;
    let ckpt = out.path("model.ckpt");
    outcome.model.save(&ckpt)?;
    out.json("model.json", &cfg.classifier)?;
    let log_path = out.path("train_log.csv");
    qphase_nn::train::write_log_csv(&outcome.log, &log_path)?;
    out.json(
        "train_summary.json",
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val_acc: outcome.best_val_acc,
            epochs_run: outcome.log.len() - 1,
            n_states,
            val_fraction: cfg.train.val_fraction,
            trainable_parameters: outcome.model.store.n_trainable(),
        },
    )?;
    Ok(ckpt)
}

/// Metrics of `model` on a labeled corpus from its first `n_s` shadows.
pub fn metrics(model: &Classifier<f32>, corpus: &Corpus, n_s: Option<usize>, eval_batch: usize) -> Result<Metrics, CliError> {
    let probs = predict_corpus(model, corpus, n_s, eval_batch)?;
    Ok(Metrics::from_scores(&probs, &corpus.labels(), 0.5))
}

pub fn eval(cfg: &RunConfig, model: &Path, data: &[PathBuf], n_s: Option<usize>, out: &mut Output) -> Result<Metrics, CliError> {
    let clf = load_model(model, &cfg.classifier)?;
    let corpus = Corpus::from_datasets(&load_datasets(data)?);
    if let Some(i) = corpus.samples.iter().position(|s| s.label > 1) {
        return Err(CliError::Data(format!("state {i} is unlabeled; eval needs labeled data")));
    }
    let m = metrics(&clf, &corpus, n_s, cfg.train.eval_batch)?;
    out.json("metrics.json", &m)?;
    let mut w = out.csv("predictions.csv")?;
    w.write_record(["state_index", "l", "label", "prob_ssb"])?;
    for (i, (s, p)) in corpus.samples.iter().zip(&m.probabilities).enumerate() {
        w.write_record([i.to_string(), s.l.to_string(), s.label.to_string(), p.to_string()])?;
    }
    w.flush()?;
    eprintln!("accuracy {:.4}  auc {:.4}", m.accuracy, m.auc);
    Ok(m)
}

/// Accuracy over `n_s` grid (rows) by patch length (columns), plus an ROC per `l`.
pub fn heatmap(cfg: &RunConfig, model: &Path, data: &[PathBuf], out: &mut Output) -> Result<Vec<Vec<f64>>, CliError> {
    let clf = load_model(model, &cfg.classifier)?;
    let mut sets = load_datasets(data)?;
    sets.sort_by_key(Dataset::l);
    let max_ns = sets.iter().map(Dataset::n_s).min().unwrap_or(0);
    let grid: Vec<usize> = cfg.n_s_grid.iter().copied().filter(|&n| n <= max_ns).collect();
    if grid.is_empty() {
        return Err(CliError::Config(format!("no n_s_grid entry fits the {max_ns} stored shadows")));
    }
    let mut matrix = vec![vec![0.0; sets.len()]; grid.len()];
    for (j, d) in sets.iter().enumerate() {
        let corpus = Corpus::from_datasets(std::slice::from_ref(d));
        for (i, &n) in grid.iter().enumerate() {
            let m = metrics(&clf, &corpus, Some(n), cfg.train.eval_batch)?;
            matrix[i][j] = m.accuracy;
            eprintln!("l = {:2}  n_s = {n:6}  accuracy {:.4}  auc {:.4}", d.l(), m.accuracy, m.auc);
            if n == *grid.last().unwrap() {
                out.json(&format!("roc_l{}.json", d.l()), &m)?;
            }
        }
    }
    let mut w = out.csv("heatmap.csv")?;
    let mut header = vec!["n_s".to_string()];
    header.extend(sets.iter().map(|d| format!("l={}", d.l())));
    w.write_record(&header)?;
    for (n, row) in grid.iter().zip(&matrix) {
        let mut rec = vec![n.to_string()];
        rec.extend(row.iter().map(|a| a.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(matrix)
}

/// First grid value where the probability falls below one half, and the
/// number of times the curve crosses one half.
pub fn crossing(gs: &[f64], probs: &[f64]) -> (Option<f64>, usize) {
    let mut order: Vec<usize> = (0..gs.len()).collect();
    order.sort_by(|&a, &b| gs[a].total_cmp(&gs[b]));
    let first = order.iter().find(|&&i| probs[i] < 0.5).map(|&i| gs[i]);
    let above: Vec<bool> = order.iter().map(|&i| probs[i] >= 0.5).collect();
    let crossings = above.windows(2).filter(|w| w[0] != w[1]).count();
    (first, crossings)
}

#[derive(Debug, Serialize)]
pub struct RowCrossing {
    pub kappa: f64,
    pub g_star: Option<f64>,
    pub crossings: usize,
    /// `(g, prob_ssb)` along the row, converged points only.
    #[serde(skip)]
    pub curve: Vec<(f64, f64)>,
}

pub fn phase_diagram(cfg: &RunConfig, model: &Path, ground_dir: &Path, n_s: Option<usize>, out: &mut Output) -> Result<Vec<RowCrossing>, CliError> {
    let clf = load_model(model, &cfg.classifier)?;
    let rows = read_grid(ground_dir)?;
    let data = read_dataset(&ground_dir.join(GROUND_DATASET))?;
    let corpus = Corpus::from_datasets(std::slice::from_ref(&data));
    let probs = predict_corpus(&clf, &corpus, n_s, cfg.train.eval_batch)?;

    let mut w = out.csv("phase_diagram.csv")?;
    w.write_record(["g", "kappa", "energy", "prob_ssb", "converged"])?;
    let mut by_kappa: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in &rows {
        let p = r.dataset_index.map(|i| probs[i]);
        w.write_record([
            r.g.to_string(),
            r.kappa.to_string(),
            r.energy.to_string(),
            p.map(|v| v.to_string()).unwrap_or_default(),
            r.converged.to_string(),
        ])?;
        if let Some(p) = p {
            match by_kappa.iter_mut().find(|(k, _, _)| *k == r.kappa) {
                Some((_, gs, ps)) => {
                    gs.push(r.g);
                    ps.push(p);
                }
                None => by_kappa.push((r.kappa, vec![r.g], vec![p])),
            }
        }
    }
    w.flush()?;

    let kappas: Vec<f64> = rows.iter().map(|r| r.kappa).fold(Vec::new(), |mut v, k| {
        if !v.contains(&k) {
            v.push(k);
        }
        v
    });
    let mut w = out.csv("boundary_ising.csv")?;
    w.write_record(["kappa", "g"])?;
    for &k in kappas.iter().filter(|&&k| k <= 0.5) {
        w.write_record([k.to_string(), ising_boundary(k)?.to_string()])?;
    }
    w.flush()?;
    let mut w = out.csv("boundary_bkt.csv")?;
    w.write_record(["kappa", "g"])?;
    for &k in kappas.iter().filter(|&&k| k >= 0.5) {
        w.write_record([k.to_string(), bkt_boundary(k)?.to_string()])?;
    }
    w.flush()?;

    let crossings: Vec<RowCrossing> = by_kappa
        .iter()
        .map(|(k, gs, ps)| {
            let (g_star, crossings) = crossing(gs, ps);
            RowCrossing {
                kappa: *k,
                g_star,
                crossings,
                curve: gs.iter().copied().zip(ps.iter().copied()).collect(),
            }
        })
        .collect();
    if let Some(c) = crossings.iter().find(|c| c.kappa == 0.0) {
        eprintln!("kappa = 0: g* = {:?} ({} crossings)", c.g_star, c.crossings);
    }
    out.json("g_star.json", &crossings)?;
    Ok(crossings)
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineRow {
    pub method: &'static str,
    pub l: usize,
    pub n_s: usize,
    pub n_states: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub threshold: f64,
    pub undefined: usize,
}

#[derive(Serialize)]
struct BaselineRoc<'a> {
    method: &'a str,
    l: usize,
    n_s: usize,
    /// Threshold chosen on the evaluated states themselves.
    threshold_tuned_on_eval_set: bool,
    threshold: f64,
    accuracy: f64,
    auc: f64,
    roc: Vec<(f64, f64)>,
}

/// GEM score used for ranking: `L`, with undefined estimates ranked highest.
pub fn gem_score(r: &GemResult) -> f64 {
    if r.undefined {
        f64::MAX
    } else {
        r.value
    }
}

/// Centred four-site window of every state, then `local_gem`.
pub fn gem_results(sets: &[ShadowSet], cfg: &RunConfig) -> Result<Vec<GemResult>, CliError> {
    sets.par_iter()
        .map(|s| -> Result<GemResult, CliError> {
            let l = s.patch_length();
            if l < 4 {
                return Err(CliError::Config(format!("GEM needs patches of at least 4 sites, got {l}")));
            }
            let w = s.window((l - 4) / 2, 4)?;
            let rho = mean_snapshot(&w, &[0, 1, 2, 3])?;
            Ok(local_gem(&rho, &cfg.gem)?)
        })
        .collect()
}

pub fn baseline(cfg: &RunConfig, data: &[PathBuf], out: &mut Output) -> Result<Vec<BaselineRow>, CliError> {
    use crate::config::BaselineMethod::*;
    let sets = load_datasets(data)?;
    let methods: &[&'static str] = match cfg.baseline {
        Mi => &["mi"],
        Gem => &["gem"],
        Both => &["mi", "gem"],
    };
    let mut rows = Vec::new();
    for d in &sets {
        let labels = d.labels.clone();
        if labels.iter().any(|&y| y > 1) {
            return Err(CliError::Data("baseline needs labeled data".into()));
        }
        let full: Vec<ShadowSet> = (0..d.n_states()).map(|i| d.shadow_set(i)).collect::<Result<_, _>>()?;
        let grid: Vec<usize> = cfg.n_s_grid.iter().copied().filter(|&n| n <= d.n_s()).collect();
        for &n in &grid {
            let sets_n: Vec<ShadowSet> = full.iter().map(|s| s.truncated(n)).collect::<Result<_, _>>()?;
            let last = n == *grid.last().unwrap();
            for &method in methods {
                let (scores, undefined) = match method {
                    "mi" => {
                        let c = mi_classify(&sets_n, 0.0, &cfg.mom)?;
                        if last {
                            let mut w = out.csv(&format!("mi_states_l{}.csv", d.l()))?;
                            w.write_record(["state_index", "label", "mi", "undefined"])?;
                            for (i, (&s, &u)) in c.scores.iter().zip(&c.undefined).enumerate() {
                                let v = if u { "nan".to_string() } else { s.to_string() };
                                w.write_record([i.to_string(), labels[i].to_string(), v, u.to_string()])?;
                            }
                            w.flush()?;
                        }
                        let undefined = c.undefined.iter().filter(|&&u| u).count();
                        (c.scores, undefined)
                    }
                    _ => {
                        let res = gem_results(&sets_n, cfg)?;
                        if last {
                            let mut w = out.csv(&format!("gem_states_l{}.csv", d.l()))?;
                            w.write_record(["state_index", "label", "objective", "L", "converged", "undefined"])?;
                            for (i, r) in res.iter().enumerate() {
                                w.write_record([
                                    i.to_string(),
                                    labels[i].to_string(),
                                    r.objective.to_string(),
                                    fmt_value(r.value),
                                    r.converged.to_string(),
                                    r.undefined.to_string(),
                                ])?;
                            }
                            w.flush()?;
                        }
                        let undefined = res.iter().filter(|r| r.undefined).count();
                        (res.iter().map(gem_score).collect(), undefined)
                    }
                };
                let (threshold, accuracy) = best_threshold(&scores, &labels);
                let auc = roc_auc(&scores, &labels);
                eprintln!("{method:3} l = {:2} n_s = {n:6}  accuracy {accuracy:.4}  auc {auc:.4}  undefined {undefined}", d.l());
                if last {
                    out.json(
                        &format!("roc_{method}_l{}.json", d.l()),
                        &BaselineRoc {
                            method,
                            l: d.l(),
                            n_s: n,
                            threshold_tuned_on_eval_set: true,
                            threshold,
                            accuracy,
                            auc,
                            roc: qphase_core::metrics::roc_curve(&scores, &labels),
                        },
                    )?;
                }
                rows.push(BaselineRow {
                    method,
                    l: d.l(),
                    n_s: n,
                    n_states: labels.len(),
                    accuracy,
                    auc,
                    threshold,
                    undefined,
                });
            }
        }
    }
    let mut w = out.csv("baseline.csv")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    eprintln!("note: thresholds are tuned on the evaluated states (optimistic)");
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_counts_sign_changes() {
        let gs = [0.1, 0.5, 0.9, 1.3];
        assert_eq!(crossing(&gs, &[0.9, 0.8, 0.3, 0.1]), (Some(0.9), 1));
        assert_eq!(crossing(&gs, &[0.9, 0.2, 0.7, 0.1]), (Some(0.5), 3));
        assert_eq!(crossing(&gs, &[0.9; 4]), (None, 0));
        // unsorted input
        assert_eq!(crossing(&[1.3, 0.1], &[0.1, 0.9]), (Some(1.3), 1));
    }
}
