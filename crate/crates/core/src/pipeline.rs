//! Experiment commands. Each reads and writes only the files listed on its
//! [`Command`] variant, relative to the configured directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::config::{AlphaChoice, ExperimentConfig};
use crate::corpus::{generate_corpus, split_trials, Corpus, TrialList};
use crate::error::{Error, Result};
use crate::fusion::{fused_scores, sweep_fusion_weight, FusionWeight};
use crate::metrics::{compute_eer, cross_eval_matrix, language_list, matrix_csv, matrix_table, EvalSet, ModelPair};
use crate::scoring::{score_trials, scores_from_tsv, scores_to_tsv, split_by_label, ScoredTrial};
use crate::train::{train, Segment, TrainConfig};
use crate::triage::{
    apply_triage, curve_csv, envelope, envelope_csv, prior_sensitivity_curve, sweep_bands, trigger_rate,
    triaged_csv, CostModel, HeatCell, TriagePolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// corpus dir (`corpus.meta`, `feats/`) and `trials.tsv` in it.
    GenData,
    /// `td.ckpt`, `ti.ckpt`, `td_loss.csv`, `ti_loss.csv` in the models dir.
    Train,
    /// `scores.tsv` in the scores dir.
    Score,
    /// `fusion.csv`, `fusion_weight.txt` in the reports dir.
    FuseSweep,
    /// `heatmap.csv`, `curve.csv`, `envelope.csv`, `band.txt` in the reports dir.
    TriageSweep,
    /// `triaged.csv` in the scores dir.
    TriageApply,
    /// `eval.csv` in the reports dir.
    Eval,
    /// `xeval/` in the models dir, `xeval.csv` and `xeval.txt` in the reports dir.
    Xeval,
    /// `report.txt` in the reports dir.
    Report,
}

pub const COMMANDS: [(&str, Command); 9] = [
    ("gen-data", Command::GenData),
    ("train", Command::Train),
    ("score", Command::Score),
    ("fuse-sweep", Command::FuseSweep),
    ("triage-sweep", Command::TriageSweep),
    ("triage-apply", Command::TriageApply),
    ("eval", Command::Eval),
    ("xeval", Command::Xeval),
    ("report", Command::Report),
];

impl Command {
    pub fn name(self) -> &'static str {
        COMMANDS.iter().find(|(_, c)| *c == self).map(|(n, _)| *n).expect("listed")
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        COMMANDS
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Invalid(format!("unknown command {s}")))
    }
}

/// File locations of every artifact.
#[derive(Debug, Clone)]
pub struct Layout {
    pub corpus: PathBuf,
    pub trials: PathBuf,
    pub td: PathBuf,
    pub ti: PathBuf,
    pub td_loss: PathBuf,
    pub ti_loss: PathBuf,
    pub scores: PathBuf,
    pub triaged: PathBuf,
    pub fusion: PathBuf,
    pub fusion_weight: PathBuf,
    pub heatmap: PathBuf,
    pub curve: PathBuf,
    pub envelope: PathBuf,
    pub band: PathBuf,
    pub eval: PathBuf,
    pub xeval_models: PathBuf,
    pub xeval_csv: PathBuf,
    pub xeval_table: PathBuf,
    pub report: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let p = &cfg.paths;
        Self {
            corpus: p.corpus.clone(),
            trials: p.corpus.join("trials.tsv"),
            td: p.models.join("td.ckpt"),
            ti: p.models.join("ti.ckpt"),
            td_loss: p.models.join("td_loss.csv"),
            ti_loss: p.models.join("ti_loss.csv"),
            scores: p.scores.join("scores.tsv"),
            triaged: p.scores.join("triaged.csv"),
            fusion: p.reports.join("fusion.csv"),
            fusion_weight: p.reports.join("fusion_weight.txt"),
            heatmap: p.reports.join("heatmap.csv"),
            curve: p.reports.join("curve.csv"),
            envelope: p.reports.join("envelope.csv"),
            band: p.reports.join("band.txt"),
            eval: p.reports.join("eval.csv"),
            xeval_models: p.models.join("xeval"),
            xeval_csv: p.reports.join("xeval.csv"),
            xeval_table: p.reports.join("xeval.txt"),
            report: p.reports.join("report.txt"),
        }
    }
}

fn require(path: &Path, command: Command) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            artifact: path.to_path_buf(),
            command: command.name(),
        })
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write(path, &checkpoint.to_text())
}

fn read(path: &Path, command: Command) -> Result<String> {
    require(path, command)?;
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_corpus(layout: &Layout) -> Result<Corpus> {
    require(&layout.corpus.join("corpus.meta"), Command::GenData)?;
    Corpus::load(&layout.corpus)
}

fn load_trials(layout: &Layout) -> Result<TrialList> {
    let text = read(&layout.trials, Command::GenData)?;
    TrialList::from_tsv(&text, &layout.trials.display().to_string())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    require(path, Command::Train)?;
    Checkpoint::load(path)
}

fn load_scores(layout: &Layout) -> Result<Vec<ScoredTrial>> {
    let text = read(&layout.scores, Command::Score)?;
    scores_from_tsv(&text, &layout.scores.display().to_string())
}

/// `key=value` lines as written by this module.
fn read_key_values(path: &Path, command: Command) -> Result<Vec<(String, String)>> {
    let text = read(path, command)?;
    let source = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(&source, n + 1, "expected key=value"))
        })
        .collect()
}

fn lookup(pairs: &[(String, String)], key: &str, path: &Path) -> Result<f64> {
    let source = path.display().to_string();
    let value = pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::parse(&source, 0, format!("missing {key}")))?;
    value
        .parse()
        .map_err(|_| Error::parse(&source, 0, format!("invalid {key}: {value}")))
}

fn resolve_alpha(cfg: &ExperimentConfig, layout: &Layout) -> Result<FusionWeight> {
    match cfg.triage.alpha {
        AlphaChoice::Fixed(w) => Ok(w),
        AlphaChoice::Swept => {
            let pairs = read_key_values(&layout.fusion_weight, Command::FuseSweep)?;
            FusionWeight::new(lookup(&pairs, "alpha", &layout.fusion_weight)?)
        }
    }
}

fn eval_split(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(Corpus, Corpus)> {
    corpus.split_speakers(cfg.trials.eval_speakers)
}

/// Flops of one TD pass over the keyword and one TI pass over keyword+query.
pub fn cost_model(cfg: &ExperimentConfig) -> Result<CostModel> {
    let kw = cfg.corpus.keyword_frames;
    let full = kw + cfg.corpus.query_frames;
    CostModel::new(
        cfg.cost.keyword_seconds,
        cfg.cost.query_seconds,
        cfg.td.network.flops_per_utterance(kw)? as f64,
        cfg.ti.network.flops_per_utterance(full)? as f64,
    )
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    match command {
        Command::GenData => gen_data(cfg, &layout),
        Command::Train => train_models(cfg, &layout),
        Command::Score => score(&layout),
        Command::FuseSweep => fuse_sweep(cfg, &layout),
        Command::TriageSweep => triage_sweep(cfg, &layout),
        Command::TriageApply => triage_apply(cfg, &layout),
        Command::Eval => eval(cfg, &layout),
        Command::Xeval => xeval(cfg, &layout),
        Command::Report => report(cfg, &layout),
    }
}

fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let (_, eval) = eval_split(cfg, &corpus)?;
    let t = &cfg.trials;
    let trials = split_trials(&eval, t.targets, t.nontargets, t.enroll, cfg.seed)?;
    corpus.save(&layout.corpus)?;
    write(&layout.trials, &trials.to_tsv())?;
    Ok(format!(
        "{} utterances, {} trials",
        corpus.len(),
        trials.len()
    ))
}

fn model_weights(train_cfg: &TrainConfig, languages: &[usize], total: usize) -> TrainConfig {
    let mut c = train_cfg.clone();
    c.language_weights = (0..total)
        .map(|l| if languages.contains(&l) { 1.0 } else { 0.0 })
        .collect();
    c
}

fn train_models(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let corpus = load_corpus(layout)?;
    let (train_set, _) = eval_split(cfg, &corpus)?;
    let td = train(&train_set, cfg.td.network, &cfg.td.train, Segment::KeywordOnly)?;
    let ti = train(&train_set, cfg.ti.network, &cfg.ti.train, Segment::KeywordPlusQuery)?;
    save_checkpoint(&td.checkpoint, &layout.td)?;
    save_checkpoint(&ti.checkpoint, &layout.ti)?;
    write(&layout.td_loss, &td.trace_csv())?;
    write(&layout.ti_loss, &ti.trace_csv())?;
    let tail = |o: &crate::train::TrainOutcome| {
        let n = o.trace.len();
        o.mean_loss(n.saturating_sub(100)..n)
    };
    Ok(format!("final loss td {:.4} ti {:.4}", tail(&td), tail(&ti)))
}

fn score(layout: &Layout) -> Result<String> {
    let corpus = load_corpus(layout)?;
    let trials = load_trials(layout)?;
    let td = load_model(&layout.td)?;
    let ti = load_model(&layout.ti)?;
    let scored = score_trials(&td.params, Some(&ti.params), &corpus, &trials)?;
    write(&layout.scores, &scores_to_tsv(&scored))?;
    Ok(format!("{} trials scored", scored.len()))
}

fn fuse_sweep(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let scored = load_scores(layout)?;
    let sweep = sweep_fusion_weight(&scored, cfg.fusion_grid_step)?;
    write(&layout.fusion, &sweep.to_csv())?;
    write(
        &layout.fusion_weight,
        &format!("alpha={}\neer={:.6}\n", sweep.best.alpha, sweep.best.result.eer),
    )?;
    Ok(format!(
        "best alpha {:.4} eer {:.6}",
        sweep.best.alpha, sweep.best.result.eer
    ))
}

struct SystemEers {
    td: f64,
    ti: f64,
    fused: f64,
}

fn system_eers(scored: &[ScoredTrial], alpha: FusionWeight) -> Result<SystemEers> {
    let (t, n) = split_by_label(scored, |s| s.td_score);
    let td = compute_eer(&t, &n)?.eer;
    let (t, n) = fused_scores(scored, FusionWeight::new(0.0)?)?;
    let ti = compute_eer(&t, &n)?.eer;
    let (t, n) = fused_scores(scored, alpha)?;
    let fused = compute_eer(&t, &n)?.eer;
    Ok(SystemEers { td, ti, fused })
}

fn band_lines(prefix: &str, c: &HeatCell) -> String {
    format!(
        "{prefix}.lower={}\n{prefix}.upper={}\n{prefix}.eer={:.6}\n{prefix}.trigger_rate={:.6}\n",
        c.lower, c.upper, c.eer, c.trigger_rate
    )
}

fn triage_sweep(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let scored = load_scores(layout)?;
    let alpha = resolve_alpha(cfg, layout)?;
    let heat = sweep_bands(&scored, &cfg.triage.grid, alpha)?;
    let points = prior_sensitivity_curve(&heat, &cfg.triage.priors)?;
    let extremes: Vec<_> = points
        .iter()
        .filter(|p| p.prior == 0.0 || p.prior == 1.0)
        .copied()
        .collect();
    write(&layout.heatmap, &heat.to_csv())?;
    write(&layout.curve, &curve_csv(&points))?;
    write(&layout.envelope, &envelope_csv(&envelope(&extremes)))?;

    let eers = system_eers(&scored, alpha)?;
    let best = *heat.min_eer_cell();
    let matched = heat.cheapest_within(eers.fused).copied().unwrap_or(best);
    let mut band = format!("alpha={}\n", alpha.alpha());
    band += &band_lines("min_eer", &best);
    band += &band_lines("fused_matched", &matched);
    write(&layout.band, &band)?;
    Ok(format!(
        "{} bands; min eer {:.6} at ({:.4}, {:.4}); fused-matched trigger rate {:.6}",
        heat.cells.len(),
        best.eer,
        best.lower,
        best.upper,
        matched.trigger_rate
    ))
}

fn triage_apply(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let scored = load_scores(layout)?;
    let alpha = resolve_alpha(cfg, layout)?;
    let policy = cfg.triage.policy(alpha)?;
    let triaged = apply_triage(&scored, &policy)?;
    write(&layout.triaged, &triaged_csv(&triaged))?;
    Ok(format!(
        "band ({}, {}) triggers {:.6} of trials at p=0.5",
        policy.lower(),
        policy.upper(),
        trigger_rate(&triaged, 0.5)?
    ))
}

struct BandSummary {
    eer: f64,
    rate: f64,
    latency: f64,
    flops: f64,
}

fn summarize_band(scored: &[ScoredTrial], policy: &TriagePolicy, cost: &CostModel) -> Result<BandSummary> {
    let triaged = apply_triage(scored, policy)?;
    let (t, n): (Vec<_>, Vec<_>) = triaged.iter().partition(|x| x.trial.is_target);
    let score = |v: Vec<&crate::triage::TriagedTrial>| v.iter().map(|x| x.final_score).collect::<Vec<_>>();
    let eer = compute_eer(&score(t), &score(n))?.eer;
    let rate = trigger_rate(&triaged, 0.5)?;
    Ok(BandSummary {
        eer,
        rate,
        latency: cost.expected_latency(rate)?,
        flops: cost.expected_flops(rate)?,
    })
}

fn eval(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let scored = load_scores(layout)?;
    let alpha = resolve_alpha(cfg, layout)?;
    let policy = cfg.triage.policy(alpha)?;
    let cost = cost_model(cfg)?;
    let eers = system_eers(&scored, alpha)?;
    let band = summarize_band(&scored, &policy, &cost)?;
    let mut out = String::from("system,eer,trigger_rate,expected_latency_seconds,expected_flops\n");
    let full = cost.full_utterance_seconds();
    let _ = writeln!(out, "td,{:.6},0.000000,{:.4},{:.0}", eers.td, cost.keyword_seconds, cost.td_flops);
    let _ = writeln!(out, "ti,{:.6},1.000000,{full:.4},{:.0}", eers.ti, cost.ti_flops);
    let _ = writeln!(out, "fused,{:.6},1.000000,{full:.4},{:.0}", eers.fused, cost.td_flops + cost.ti_flops);
    let _ = writeln!(
        out,
        "triaged,{:.6},{:.6},{:.4},{:.0}",
        band.eer, band.rate, band.latency, band.flops
    );
    write(&layout.eval, &out)?;
    Ok(format!(
        "td {:.6} ti {:.6} fused {:.6} triaged {:.6}",
        eers.td, eers.ti, eers.fused, band.eer
    ))
}

fn xeval(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let corpus = load_corpus(layout)?;
    let (train_set, eval_set) = eval_split(cfg, &corpus)?;
    let languages = cfg.corpus.languages;
    let mut eval_sets = Vec::with_capacity(languages);
    for l in 0..languages {
        let lang_corpus = eval_set.select_languages(&[l]);
        let trials = split_trials(
            &lang_corpus,
            (cfg.trials.targets / languages).max(1),
            (cfg.trials.nontargets / languages).max(1),
            cfg.trials.enroll,
            cfg.seed,
        )?;
        write(
            &layout.xeval_models.join(format!("trials.lang{l}.tsv")),
            &trials.to_tsv(),
        )?;
        eval_sets.push(EvalSet {
            language: l,
            corpus: lang_corpus,
            trials,
        });
    }
    let mut models = Vec::with_capacity(cfg.xeval_models.len());
    for langs in &cfg.xeval_models {
        let name = format!("lang{}", language_list(langs));
        let td_cfg = model_weights(&cfg.td.train, langs, languages);
        let ti_cfg = model_weights(&cfg.ti.train, langs, languages);
        let td = train(&train_set, cfg.td.network, &td_cfg, Segment::KeywordOnly)?;
        let ti = train(&train_set, cfg.ti.network, &ti_cfg, Segment::KeywordPlusQuery)?;
        save_checkpoint(&td.checkpoint, &layout.xeval_models.join(format!("{name}.td.ckpt")))?;
        save_checkpoint(&ti.checkpoint, &layout.xeval_models.join(format!("{name}.ti.ckpt")))?;
        models.push(ModelPair {
            name,
            train_languages: langs.clone(),
            td: td.checkpoint.params,
            ti: ti.checkpoint.params,
        });
    }
    let cells = cross_eval_matrix(&models, &eval_sets)?;
    write(&layout.xeval_csv, &matrix_csv(&cells))?;
    let table = matrix_table(&cells);
    write(&layout.xeval_table, &table)?;
    Ok(table)
}

fn report(cfg: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let scored = load_scores(layout)?;
    let alpha = resolve_alpha(cfg, layout)?;
    let band = read_key_values(&layout.band, Command::TriageSweep)?;
    let cost = cost_model(cfg)?;
    let eers = system_eers(&scored, alpha)?;
    let chosen = TriagePolicy::new(
        lookup(&band, "fused_matched.lower", &layout.band)?,
        lookup(&band, "fused_matched.upper", &layout.band)?,
        alpha,
    )?;
    let best = TriagePolicy::new(
        lookup(&band, "min_eer.lower", &layout.band)?,
        lookup(&band, "min_eer.upper", &layout.band)?,
        alpha,
    )?;
    let configured = cfg.triage.policy(alpha)?;
    let full = cost.full_utterance_seconds();

    let mut out = String::new();
    let _ = writeln!(out, "# chosen band: lowest trigger rate whose EER does not exceed always-on fusion");
    let _ = writeln!(out, "alpha={:.4}", alpha.alpha());
    let _ = writeln!(out, "td_eer={:.6}", eers.td);
    let _ = writeln!(out, "ti_eer={:.6}", eers.ti);
    let _ = writeln!(out, "fused_eer={:.6}", eers.fused);
    let s = summarize_band(&scored, &chosen, &cost)?;
    let _ = writeln!(out, "band_lower={:.4}", chosen.lower());
    let _ = writeln!(out, "band_upper={:.4}", chosen.upper());
    let _ = writeln!(out, "eer={:.6}", s.eer);
    let _ = writeln!(out, "trigger_rate={:.6}", s.rate);
    let _ = writeln!(out, "expected_latency_seconds={:.4}", s.latency);
    let _ = writeln!(out, "full_utterance_seconds={full:.4}");
    let _ = writeln!(out, "latency_saving_seconds={:.4}", full - s.latency);
    let _ = writeln!(out, "td_flops={:.0}", cost.td_flops);
    let _ = writeln!(out, "ti_flops={:.0}", cost.ti_flops);
    let _ = writeln!(out, "expected_flops={:.0}", s.flops);
    for (prefix, policy) in [("min_eer", &best), ("configured", &configured)] {
        let s = summarize_band(&scored, policy, &cost)?;
        let _ = writeln!(out, "{prefix}.band_lower={:.4}", policy.lower());
        let _ = writeln!(out, "{prefix}.band_upper={:.4}", policy.upper());
        let _ = writeln!(out, "{prefix}.eer={:.6}", s.eer);
        let _ = writeln!(out, "{prefix}.trigger_rate={:.6}", s.rate);
        let _ = writeln!(out, "{prefix}.expected_latency_seconds={:.4}", s.latency);
        let _ = writeln!(out, "{prefix}.expected_flops={:.0}", s.flops);
    }
    out.push_str("\n# EER (%)\n");
    let _ = writeln!(out, "td      {:6.2}", 100.0 * eers.td);
    let _ = writeln!(out, "ti      {:6.2}", 100.0 * eers.ti);
    let _ = writeln!(out, "fused   {:6.2}", 100.0 * eers.fused);
    let _ = writeln!(out, "triaged {:6.2}", 100.0 * s.eer);
    if layout.xeval_table.exists() {
        out.push_str("\n# cross-language EER (%), * = language unseen in training\n");
        out.push_str(&read(&layout.xeval_table, Command::Xeval)?);
    }
    write(&layout.report, &out)?;
    Ok(out)
}
