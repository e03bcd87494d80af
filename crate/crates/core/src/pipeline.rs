//! File-to-file steps of the verification pipeline, one per command-line
//! subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{
    gen_corpus, gen_trials, read_manifest, split_alternate, split_holdout, write_manifest, CorpusSpec, Manifest,
};
use crate::dsp::wav::read_wav;
use crate::encoder::{read_embeddings, read_model, write_embeddings, write_model, EmbeddingTable, ModelWeights};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{
    fuse_scores, normalize_scores, read_weights, search_weights, write_weights, SearchConfig, SearchResult,
};
use crate::metrics::{
    det_points, eer, min_dcf, read_scores, read_trials, trial_score, write_scores, write_trials, DcfParams, DcfResult,
    DetPoint, ScoreSet, Trial,
};
use crate::training::{leading_chunk, train_stream, EpochLog, ValidationSet, EVAL_CHUNK_SECONDS};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub spec: CorpusSpec,
    /// Utterances per speaker held out of training; the held-out set is
    /// split into two halves with one trial list each.
    pub holdout: Option<usize>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub train: Option<PathBuf>,
    pub heldout: Vec<PathBuf>,
    pub trials: Vec<PathBuf>,
}

/// Generates the corpus under `out_dir` and writes `manifest.tsv`; with a
/// hold-out also `train.tsv`, `heldout_a.tsv`, `heldout_b.tsv`,
/// `trials_a.txt` and `trials_b.txt`.
pub fn generate_corpus(opts: &CorpusOptions, out_dir: &Path, exec: Exec) -> Result<CorpusFiles> {
    let m = gen_corpus(&opts.spec, out_dir, exec)?;
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &m)?;
    let mut files = CorpusFiles { manifest, train: None, heldout: Vec::new(), trials: Vec::new() };
    if let Some(h) = opts.holdout {
        let (train, held) = split_holdout(&m, h)?;
        let (a, b) = split_alternate(&held);
        let train_path = out_dir.join("train.tsv");
        write_manifest(&train_path, &train)?;
        files.train = Some(train_path);
        for (k, (half, name)) in [(a, "a"), (b, "b")].into_iter().enumerate() {
            let mp = out_dir.join(format!("heldout_{name}.tsv"));
            write_manifest(&mp, &half)?;
            let trials = gen_trials(&half, opts.trials, opts.spec.seed.wrapping_add(1 + k as u64))?;
            let tp = out_dir.join(format!("trials_{name}.txt"));
            write_trials(&tp, &trials)?;
            files.heldout.push(mp);
            files.trials.push(tp);
        }
    }
    Ok(files)
}

/// Trial list over an arbitrary manifest.
pub fn generate_trials(manifest: &Path, n: usize, seed: u64, out: &Path) -> Result<Vec<Trial>> {
    let trials = gen_trials(&read_manifest(manifest)?, n, seed)?;
    write_trials(out, &trials)?;
    Ok(trials)
}

fn index_of(m: &Manifest) -> BTreeMap<&str, usize> {
    m.entries().iter().enumerate().map(|(i, e)| (e.path.as_str(), i)).collect()
}

/// Loads the utterances of `manifest` and resolves `trials` against it.
pub fn load_validation(manifest: &Path, trials: &Path, exec: Exec) -> Result<ValidationSet> {
    let m = read_manifest(manifest)?;
    let t = read_trials(trials)?;
    let idx = index_of(&m);
    let find = |id: &str| {
        idx.get(id).copied().ok_or_else(|| Error::Malformed {
            what: "trial list",
            msg: format!("utterance {id} is not in {}", manifest.display()),
        })
    };
    let trials = t.iter().map(|x| Ok((find(&x.enroll)?, find(&x.test)?, x.target))).collect::<Result<Vec<_>>>()?;
    let utterances = exec.try_map(m.len(), |i| read_wav(m.resolve(&m.entries()[i])))?;
    Ok(ValidationSet { utterances, trials })
}

/// Trains one stream on `manifest` and writes the model and the per-epoch
/// log (`epoch<TAB>mean_loss<TAB>top1_acc<TAB>val_eer`).
pub fn train_model(
    manifest: &Path,
    cfg: &RunConfig,
    validation: Option<&ValidationSet>,
    model_out: &Path,
    log_out: Option<&Path>,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelWeights, Vec<EpochLog>)> {
    cfg.validate()?;
    let corpus = read_manifest(manifest)?.load_training(exec)?;
    let (model, history) =
        train_stream(&corpus, &cfg.frontend, &cfg.encoder, &cfg.train, validation, exec, |l| on_epoch(l))?;
    write_model(model_out, &model)?;
    if let Some(p) = log_out {
        let mut s = String::new();
        for l in &history {
            let _ = writeln!(s, "{l}");
        }
        std::fs::write(p, s).map_err(|e| Error::io(p, e))?;
    }
    Ok((model, history))
}

/// Mean-normalized embeddings of the leading evaluation chunk of every
/// manifest utterance, in manifest order.
pub fn embed_manifest(model: &ModelWeights, m: &Manifest, exec: Exec) -> Result<EmbeddingTable> {
    let frontend = crate::dsp::Frontend::new(&model.frontend)?;
    let embs = exec.try_map(m.len(), |i| {
        let w = read_wav(m.resolve(&m.entries()[i]))?;
        let f = frontend.extract(&leading_chunk(&w, EVAL_CHUNK_SECONDS))?;
        model.embed(&f)
    })?;
    let mut table = EmbeddingTable::new(model.stream_tag.to_string(), model.embed_dim());
    for (e, emb) in m.entries().iter().zip(embs) {
        table.push(e.path.clone(), emb)?;
    }
    Ok(table)
}

pub fn embed_files(model: &Path, manifest: &Path, out: &Path, exec: Exec) -> Result<EmbeddingTable> {
    let model = read_model(model)?;
    let table = embed_manifest(&model, &read_manifest(manifest)?, exec)?;
    write_embeddings(out, &table)?;
    Ok(table)
}

/// One score column per embedding table. Column names are the tables'
/// stream tags, suffixed with their position when repeated.
pub fn score_trials(trials: &[Trial], tables: &[EmbeddingTable]) -> Result<ScoreSet> {
    if tables.is_empty() {
        return Err(Error::InvalidConfig("no embedding tables to score".into()));
    }
    let mut names: Vec<String> = Vec::with_capacity(tables.len());
    for (i, t) in tables.iter().enumerate() {
        let repeated = tables.iter().filter(|o| o.stream == t.stream).count() > 1;
        names.push(if repeated { format!("{}_{}", t.stream, i + 1) } else { t.stream.clone() });
    }
    let mut cols = Vec::with_capacity(tables.len());
    for t in tables {
        let get = |id: &str| {
            t.get(id).ok_or_else(|| Error::Malformed {
                what: "trial list",
                msg: format!("utterance {id} has no {} embedding", t.stream),
            })
        };
        cols.push(trials.iter().map(|x| trial_score(get(&x.enroll)?, get(&x.test)?)).collect::<Result<Vec<_>>>()?);
    }
    ScoreSet::new(
        (0..trials.len()).map(|i| format!("t{i:06}")).collect(),
        trials.iter().map(|t| t.target).collect(),
        names,
        cols,
    )
}

pub fn score_files(trials: &Path, embeddings: &[PathBuf], out: &Path) -> Result<ScoreSet> {
    let trials = read_trials(trials)?;
    let tables = embeddings.iter().map(read_embeddings).collect::<Result<Vec<_>>>()?;
    let set = score_trials(&trials, &tables)?;
    write_scores(out, &set)?;
    Ok(set)
}

/// Normalizes the scores, searches the weight grid and writes the weights.
pub fn fuse_search_files(scores: &Path, cfg: &SearchConfig, out: &Path, exec: Exec) -> Result<SearchResult> {
    let norm = normalize_scores(&read_scores(scores)?)?;
    let result = search_weights(&norm, cfg, exec)?;
    if let Some(single) = result.best_single {
        if result.value > single {
            return Err(Error::InvalidConfig(format!(
                "fused objective {} exceeds the best single stream {single}",
                result.value
            )));
        }
    }
    write_weights(out, &result.weights, result.objective, result.value)?;
    Ok(result)
}

/// Which score column to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSelection {
    /// The only column of a single-stream file.
    Only,
    Stream(String),
    /// Min-max normalized columns fused with weights from a weights file.
    Fused(PathBuf),
}

pub fn select_scores(set: &ScoreSet, sel: &ScoreSelection) -> Result<Vec<f64>> {
    match sel {
        ScoreSelection::Only => {
            if set.n_streams() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "scores have {} streams ({}); choose one or pass fusion weights",
                    set.n_streams(),
                    set.streams.join(", ")
                )));
            }
            Ok(set.stream(0).to_vec())
        }
        ScoreSelection::Stream(name) => {
            let s = set
                .stream_index(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no stream {name} in [{}]", set.streams.join(", "))))?;
            Ok(set.stream(s).to_vec())
        }
        ScoreSelection::Fused(path) => {
            let (k, _, _) = read_weights(path)?;
            fuse_scores(&normalize_scores(set)?, &k)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub dcf: DcfResult,
}

impl EvalReport {
    /// `EER=<percent> minDCF_raw=<v> minDCF_norm=<v>`.
    pub fn line(&self) -> String {
        format!("EER={:.2} minDCF_raw={:.6} minDCF_norm={:.6}", 100.0 * self.eer, self.dcf.raw, self.dcf.normalized)
    }
}

pub fn evaluate(scores: &[f64], labels: &[bool], dcf: &DcfParams) -> Result<EvalReport> {
    Ok(EvalReport { eer: eer(scores, labels)?, dcf: min_dcf(scores, labels, dcf)? })
}

pub fn eval_file(scores: &Path, sel: &ScoreSelection, dcf: &DcfParams) -> Result<EvalReport> {
    let set = read_scores(scores)?;
    evaluate(&select_scores(&set, sel)?, &set.labels, dcf)
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,far,frr,probit_far,probit_frr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{}", p.threshold, p.far, p.frr, p.probit_far, p.probit_frr);
    }
    s
}

/// Minimal DET plot on normal-deviate axes spanning 0.1% to 50%.
pub fn det_svg(points: &[DetPoint]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let lo = crate::metrics::probit(0.001);
    let hi = crate::metrics::probit(0.5);
    let pos = |z: f64| ((z.clamp(lo, hi) - lo) / (hi - lo)) * SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#,
        w = SIZE + 2.0 * PAD
    );
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    for pct in [0.1, 1.0, 5.0, 20.0, 50.0] {
        let x = PAD + pos(crate::metrics::probit(pct / 100.0));
        let y = PAD + SIZE - pos(crate::metrics::probit(pct / 100.0));
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{PAD}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, PAD + SIZE);
        let _ = writeln!(s, r##"<line x1="{PAD}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, PAD + SIZE);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{pct}</text>"#,
            PAD + SIZE + 14.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-size="10" text-anchor="end">{pct}</text>"#, PAD - 4.0);
    }
    let pts: Vec<String> = points
        .iter()
        .filter(|p| p.probit_far.is_finite() && p.probit_frr.is_finite())
        .map(|p| format!("{:.2},{:.2}", PAD + pos(p.probit_far), PAD + SIZE - pos(p.probit_frr)))
        .collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="blue"/>"#, pts.join(" "));
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">FAR (%)</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE + 32.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{:.1}" font-size="12" transform="rotate(-90 12 {:.1})" text-anchor="middle">FRR (%)</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

pub fn det_files(scores: &Path, sel: &ScoreSelection, csv: &Path, svg: Option<&Path>) -> Result<Vec<DetPoint>> {
    let set = read_scores(scores)?;
    let points = det_points(&select_scores(&set, sel)?, &set.labels)?;
    std::fs::write(csv, det_csv(&points)).map_err(|e| Error::io(csv, e))?;
    if let Some(p) = svg {
        std::fs::write(p, det_svg(&points)).map_err(|e| Error::io(p, e))?;
    }
    Ok(points)
}
