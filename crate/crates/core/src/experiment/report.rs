use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checks;
use super::stages::{load_model, read_report};
use super::{
    fmt_num, write_artifact, write_json_artifact, ControlRow, DatasetFfr, DatasetRow, FaithfulnessFile,
    FfrConvergence, FfrFile, GridRow, MatchFile, ProbeFile, Run, ShuffledControl, TOOLKIT_VERSION,
};
use crate::error::{Error, Result};
use crate::probing::{InputKind, ProbeSummaryRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyStatus {
    Pass,
    Fail,
    NotEvaluated,
}

impl PropertyStatus {
    fn from_bool(ok: bool) -> Self {
        if ok {
            PropertyStatus::Pass
        } else {
            PropertyStatus::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PropertyStatus::Pass => "PASS",
            PropertyStatus::Fail => "FAIL",
            PropertyStatus::NotEvaluated => "NOT EVALUATED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Property {
    pub id: u32,
    pub name: String,
    pub status: PropertyStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfrRow {
    pub dataset: String,
    pub mean_sfr: f64,
    pub pair_sfr: Vec<f64>,
}

/// Everything `report.md` shows, in machine-readable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub toolkit_version: String,
    pub layer: usize,
    pub tau_s: f64,
    pub tau_f: f64,
    pub compare: (String, String),
    pub datasets: Vec<DatasetRow>,
    pub sfr: Vec<SfrRow>,
    pub faithfulness: Vec<GridRow>,
    pub controls: Vec<ControlRow>,
    pub ffr: Vec<DatasetFfr>,
    pub ffr_convergence: Vec<FfrConvergence>,
    pub probing: Vec<ProbeSummaryRow>,
    pub shuffled: Vec<ShuffledControl>,
    pub properties: Vec<Property>,
    /// SHA-256 over every stage artifact, for comparing reruns.
    pub artifact_digest: String,
    /// True when no evaluated property failed.
    pub all_pass: bool,
}

const REPORT_FILES: [&str; 4] = ["manifest.json", "report.md", "summary.json", "reports/checks.json"];

/// SHA-256 over `(relative path, bytes)` of every file in the run directory
/// except the manifest and the report's own outputs.
pub fn artifact_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if entry.file_type().is_file() {
            if let Ok(rel) = entry.path().strip_prefix(dir) {
                files.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    files.retain(|f| !REPORT_FILES.contains(&f.as_str()));
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(dir.join(&f)).map_err(|e| Error::io(dir.join(&f), e))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn required_inputs(run: &Run) -> Vec<String> {
    let mut req: Vec<String> = run.cfg.datasets.iter().map(|d| Run::stats_rel(&d.name)).collect();
    for r in ["match", "faithfulness", "ffr", "probing"] {
        req.push(format!("reports/{r}.json"));
    }
    req
}

struct Inputs {
    datasets: Vec<DatasetRow>,
    matches: MatchFile,
    faithfulness: FaithfulnessFile,
    ffr: FfrFile,
    probing: ProbeFile,
}

fn load_inputs(run: &Run) -> Result<Inputs> {
    let missing: Vec<String> = required_inputs(run)
        .into_iter()
        .filter(|r| !run.path(r).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("report is missing inputs: {}", missing.join(", "))));
    }
    Ok(Inputs {
        datasets: run
            .cfg
            .datasets
            .iter()
            .map(|d| read_report(run, &Run::stats_rel(&d.name)))
            .collect::<Result<_>>()?,
        matches: read_report(run, "reports/match.json")?,
        faithfulness: read_report(run, "reports/faithfulness.json")?,
        ffr: read_report(run, "reports/ffr.json")?,
        probing: read_report(run, "reports/probing.json")?,
    })
}

fn property(id: u32, name: &str, ok: bool, detail: String) -> Property {
    Property {
        id,
        name: name.into(),
        status: PropertyStatus::from_bool(ok),
        detail,
    }
}

fn evaluate_properties(run: &Run, inp: &Inputs) -> Result<Vec<Property>> {
    let cfg = &run.cfg;
    let chk = &cfg.checks;
    let mut out = Vec::new();

    let eq = checks::equivalence_max_error(chk.equivalence_instances, chk.seed)?;
    out.push(property(
        1,
        "decomposed encode/decode forms agree",
        eq <= 1e-5,
        format!("max abs error {} over {} instances (limit 1e-5)", fmt_num(eq), chk.equivalence_instances),
    ));

    let grad = checks::gradient_max_relative_error(chk.gradient_probes, chk.seed)?;
    out.push(property(
        2,
        "analytic gradients match central differences",
        grad <= 1e-3,
        format!("max relative error {} over {} probes per tensor (limit 1e-3)", fmt_num(grad), chk.gradient_probes),
    ));

    let bad = checks::hungarian_mismatches(chk.hungarian_instances, chk.seed)?;
    out.push(property(
        3,
        "assignment total equals brute-force optimum",
        bad == 0,
        format!("{bad} mismatches in {} random 7x7 matrices", chk.hungarian_instances),
    ));

    let mut self_ok = true;
    let mut monotone = true;
    let mut n_self = 0;
    for d in &inp.matches.datasets {
        for ((_, sfr), (_, zero)) in d.self_sfr.iter().zip(&d.zero_rows) {
            if *zero == 0 {
                n_self += 1;
                self_ok &= *sfr == 1.0;
            }
        }
        for p in &d.pairs {
            monotone &= p.tau_sweep.windows(2).all(|w| w[1].1 <= w[0].1);
        }
    }
    out.push(property(
        4,
        "self-match SFR is 1 and SFR is monotone in tau_s",
        self_ok && monotone && n_self > 0,
        format!("{n_self} checkpoints matched against themselves; sweep over 0.5, 0.7, 0.9 monotone: {monotone}"),
    ));

    let sub = checks::subspace_reconstruction(chk.subspace_rows, chk.seed)?;
    out.push(property(
        5,
        "TopK SAE reconstructs an 8-dim subspace",
        sub.explained_variance > 0.95,
        format!(
            "explained variance {} after {} rows (limit 0.95 within {})",
            fmt_num(sub.explained_variance),
            sub.rows_used,
            chk.subspace_rows
        ),
    ));

    let (ind, ood) = (&cfg.compare.0, &cfg.compare.1);
    let id_ok = inp.faithfulness.controls.iter().all(|c| c.identity_ce_difference == 0.0);
    let zero_ind = inp
        .faithfulness
        .controls
        .iter()
        .find(|c| &c.eval_dataset == ind)
        .map(|c| c.zero_sae_ce_difference)
        .unwrap_or(f64::NAN);
    out.push(property(
        6,
        "identity patch leaves CE unchanged, zero patch raises it",
        id_ok && zero_ind > 0.0 && !inp.faithfulness.controls.is_empty(),
        format!("identity exactly 0 on every set: {id_ok}; zero-SAE CE difference on {ind} {}", fmt_num(zero_ind)),
    ));

    let sfr_of = |name: &str| -> Result<Vec<f64>> {
        Ok(inp
            .matches
            .dataset(name)
            .ok_or_else(|| Error::Input(format!("match report has no dataset {name}")))?
            .pairs
            .iter()
            .map(|p| p.sfr)
            .collect())
    };
    let (a, b) = (sfr_of(ind)?, sfr_of(ood)?);
    let wins = a.iter().zip(&b).filter(|(x, y)| x > y).count();
    let reps = a.len();
    out.push(property(
        7,
        "SFR ordering: in-distribution above OOD",
        reps > 0 && 3 * wins >= 2 * reps,
        format!(
            "{ind} above {ood} in {wins} of {reps} repetitions ({ind} {:?}, {ood} {:?})",
            a.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>(),
            b.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>()
        ),
    ));

    let ffr_of = |name: &str| -> Result<f64> {
        Ok(inp
            .ffr
            .dataset(name)
            .ok_or_else(|| Error::Input(format!("FFR report has no dataset {name}")))?
            .mean_ffr)
    };
    let (fa, fb) = (ffr_of(ind)?, ffr_of(ood)?);
    let gap = inp
        .ffr
        .convergence
        .iter()
        .map(|c| (c.ffr_small - c.ffr_large).abs())
        .fold(0.0f64, f64::max);
    out.push(property(
        8,
        "FFR ordering and sample-size stability",
        fa <= fb && gap <= 0.02 && !inp.ffr.convergence.is_empty(),
        format!(
            "mean FFR {ind} {} vs {ood} {}; largest small/large sample gap {} (limit 0.02)",
            fmt_num(fa),
            fmt_num(fb),
            fmt_num(gap)
        ),
    ));

    let model = load_model(run)?;
    let max_len = cfg
        .datasets
        .iter()
        .find_map(|d| match d.source {
            super::DatasetSource::Faithful { max_len, .. } => Some(max_len),
            _ => None,
        })
        .unwrap_or(model.config.max_seq_len);
    let kl = checks::kl_convergence(&model, chk.kl_tokens, max_len, &chk.kl_seeds)?;
    out.push(property(
        9,
        "faithful KL shrinks with 10x samples; hand KL example",
        kl.mean_large < kl.mean_small && (kl.hand_example - 0.1308).abs() <= 1e-4,
        format!(
            "mean KL {} at {} tokens vs {} at {}; hand example {}",
            fmt_num(kl.mean_small),
            kl.small_tokens,
            fmt_num(kl.mean_large),
            10 * kl.small_tokens,
            fmt_num(kl.hand_example)
        ),
    ));

    out.push(probing_property(inp)?);
    Ok(out)
}

fn probing_property(inp: &Inputs) -> Result<Property> {
    let rows = &inp.probing.report.rows;
    let task = rows
        .first()
        .map(|r| r.task.clone())
        .ok_or_else(|| Error::Input("probing report is empty".into()))?;
    let baseline = rows
        .iter()
        .find(|r| r.task == task && r.kind == InputKind::Baseline)
        .map(|r| r.accuracy)
        .unwrap_or(f64::NAN);
    let strong: Vec<&str> = inp
        .faithfulness
        .per_sae
        .iter()
        .filter(|e| e.report.train_dataset_tag == e.report.eval_dataset_tag && e.report.explained_variance > 0.95)
        .map(|e| e.sae_id.as_str())
        .collect();
    let worst_gap = rows
        .iter()
        .filter(|r| r.task == task && r.kind == InputKind::Reconstruction && strong.contains(&r.sae_id.as_str()))
        .map(|r| (r.accuracy - baseline).abs())
        .fold(0.0f64, f64::max);
    let shuffled = inp.probing.shuffled.iter().find(|s| s.task == task);
    let shuffle_gap = shuffled.map(|s| (s.accuracy - s.chance).abs()).unwrap_or(f64::NAN);
    Ok(property(
        10,
        "probing: baseline, reconstruction and shuffled-label control",
        baseline >= 0.95 && !strong.is_empty() && worst_gap <= 0.05 && shuffle_gap <= 0.1,
        format!(
            "task {task}: baseline accuracy {}; {} SAEs above 0.95 EV, largest reconstruction gap {}; shuffled labels {} from chance",
            fmt_num(baseline),
            strong.len(),
            fmt_num(worst_gap),
            fmt_num(shuffle_gap)
        ),
    ))
}

fn rerun_property(run: &Run, digest: &str, compare: Option<&Path>) -> Result<Property> {
    let name = "rerun reproduces every artifact byte for byte";
    Ok(match compare {
        None => Property {
            id: 11,
            name: name.into(),
            status: PropertyStatus::NotEvaluated,
            detail: "single run; rerun with the same config and pass --compare to check".into(),
        },
        Some(other) => {
            let theirs = artifact_digest(other)?;
            let same_dir = other.canonicalize().ok() == run.dir.canonicalize().ok();
            property(
                11,
                name,
                theirs == digest && !same_dir,
                format!("this run {digest}, other run {theirs}"),
            )
        }
    })
}

/// Builds the consolidated report from earlier stage outputs. With
/// `compare`, also checks that another run directory holds identical
/// artifacts.
pub fn report(run: &Run, compare: Option<&Path>) -> Result<(Summary, Vec<String>)> {
    let inp = load_inputs(run)?;
    let mut properties = evaluate_properties(run, &inp)?;
    let digest = artifact_digest(&run.dir)?;
    properties.push(rerun_property(run, &digest, compare)?);
    let all_pass = properties.iter().all(|p| p.status != PropertyStatus::Fail);
    let summary = Summary {
        name: run.cfg.name.clone(),
        config_hash: run.cfg.hash(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        layer: run.cfg.layer,
        tau_s: run.cfg.tau_s,
        tau_f: run.cfg.tau_f,
        compare: run.cfg.compare.clone(),
        sfr: inp
            .matches
            .datasets
            .iter()
            .map(|d| SfrRow {
                dataset: d.dataset.clone(),
                mean_sfr: d.mean_sfr,
                pair_sfr: d.pairs.iter().map(|p| p.sfr).collect(),
            })
            .collect(),
        datasets: inp.datasets,
        faithfulness: inp.faithfulness.grid,
        controls: inp.faithfulness.controls,
        ffr: inp.ffr.per_dataset,
        ffr_convergence: inp.ffr.convergence,
        probing: inp.probing.report.averaged,
        shuffled: inp.probing.shuffled,
        properties,
        artifact_digest: digest,
        all_pass,
    };
    let artifacts = vec![
        write_json_artifact(&run.dir, "reports/checks.json", &summary.properties)?,
        write_json_artifact(&run.dir, "summary.json", &summary)?,
        write_artifact(&run.dir, "report.md", render_markdown(&summary).as_bytes())?,
    ];
    Ok((summary, artifacts))
}

fn table(out: &mut String, header: &[&str], rows: Vec<Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", header.iter().map(|_| "---|").collect::<String>());
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", ")
}

/// Markdown rendering of a summary. Numbers use the same text as the JSON.
pub fn render_markdown(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Experiment report: {}\n", s.name);
    let _ = writeln!(
        out,
        "Config hash `{}`, toolkit {}, layer {}, tau_s {}, tau_f {}, comparing `{}` against `{}`.\n",
        s.config_hash,
        s.toolkit_version,
        s.layer,
        fmt_num(s.tau_s),
        fmt_num(s.tau_f),
        s.compare.0,
        s.compare.1
    );

    out.push_str("## Dataset statistics\n\n");
    table(
        &mut out,
        &["dataset", "source", "total_tokens", "all_token_coverage", "first_token_coverage", "kl_model_to_dataset"],
        s.datasets
            .iter()
            .map(|d| {
                vec![
                    d.dataset.clone(),
                    d.source.as_str().into(),
                    d.stats.total_tokens.to_string(),
                    fmt_num(d.stats.all_token_coverage),
                    fmt_num(d.stats.first_token_coverage),
                    fmt_num(d.stats.kl_model_to_dataset),
                ]
            })
            .collect(),
    );

    out.push_str("## Shared feature ratio\n\n");
    table(
        &mut out,
        &["dataset", "mean_sfr", "pair_sfr"],
        s.sfr
            .iter()
            .map(|r| vec![r.dataset.clone(), fmt_num(r.mean_sfr), list(&r.pair_sfr)])
            .collect(),
    );

    out.push_str("## Faithfulness\n\nMetrics averaged over seeds for each training and evaluation set.\n\n");
    table(
        &mut out,
        &["train_dataset", "eval_dataset", "ce_difference", "l2_error", "explained_variance", "n_saes"],
        s.faithfulness
            .iter()
            .map(|g| {
                vec![
                    g.train_dataset.clone(),
                    g.eval_dataset.clone(),
                    fmt_num(g.ce_difference),
                    fmt_num(g.l2_error),
                    fmt_num(g.explained_variance),
                    g.n_saes.to_string(),
                ]
            })
            .collect(),
    );
    out.push_str("### Patching controls\n\n");
    table(
        &mut out,
        &["eval_dataset", "identity_ce_difference", "zero_sae_ce_difference"],
        s.controls
            .iter()
            .map(|c| {
                vec![
                    c.eval_dataset.clone(),
                    fmt_num(c.identity_ce_difference),
                    fmt_num(c.zero_sae_ce_difference),
                ]
            })
            .collect(),
    );

    out.push_str("## Fake feature ratio\n\n");
    table(
        &mut out,
        &["dataset", "mean_ffr", "per_seed"],
        s.ffr
            .iter()
            .map(|f| vec![f.dataset.clone(), fmt_num(f.mean_ffr), list(&f.per_seed)])
            .collect(),
    );
    table(
        &mut out,
        &["sae", "n_small", "ffr_small", "n_large", "ffr_large"],
        s.ffr_convergence
            .iter()
            .map(|c| {
                vec![
                    c.sae_id.clone(),
                    c.n_small.to_string(),
                    fmt_num(c.ffr_small),
                    c.n_large.to_string(),
                    fmt_num(c.ffr_large),
                ]
            })
            .collect(),
    );

    out.push_str("## Probing\n\nHeld-out accuracy and macro F1, averaged over the SAEs of each training set.\n\n");
    table(
        &mut out,
        &["task", "train_dataset", "kind", "accuracy", "f1", "n_saes"],
        s.probing
            .iter()
            .map(|p| {
                vec![
                    p.task.clone(),
                    p.train_dataset.clone(),
                    p.kind.as_str().into(),
                    fmt_num(p.accuracy),
                    fmt_num(p.f1),
                    p.n_saes.to_string(),
                ]
            })
            .collect(),
    );
    table(
        &mut out,
        &["task", "shuffled_label_accuracy", "chance"],
        s.shuffled
            .iter()
            .map(|c| vec![c.task.clone(), fmt_num(c.accuracy), fmt_num(c.chance)])
            .collect(),
    );

    out.push_str("## Properties\n\n");
    table(
        &mut out,
        &["id", "property", "status", "detail"],
        s.properties
            .iter()
            .map(|p| vec![p.id.to_string(), p.name.clone(), p.status.as_str().into(), p.detail.clone()])
            .collect(),
    );
    let _ = writeln!(out, "Artifact digest: `{}`", s.artifact_digest);
    out
}
