use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cocotree::backends::{ResponseCache, Role};
use cocotree::eval::{Dataset, EvalArtifacts, EvalReport, Evaluator, Scorer, ScorerKind};
use cocotree::image::ImageRef;
use cocotree::rules::{build_rule, entailment_report, Connective};
use cocotree::search::{beam_search_traced, fuse, Strategy};
use cocotree::tree::{self, ConceptTree, TreeScores};
use serde_json::json;

use crate::config::RunConfig;
use crate::exit::Failure;
use crate::session::{lock_dir, Session};
use crate::{CacheAction, ConnectiveArg};

pub const DEFAULT_OUT_DIR: &str = "cocotree-out";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const ARTIFACTS_JSON: &str = "artifacts.json";
pub const RUN_JSON: &str = "run.json";

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_scorer(name: &str) -> Result<ScorerKind, Failure> {
    name.parse().map_err(|e: cocotree::Error| Failure::usage(e.to_string()))
}

fn required_roles(kind: ScorerKind) -> &'static [Role] {
    match kind {
        ScorerKind::VqascoreBaseline => &[Role::Vlm],
        ScorerKind::CocoTree => &[Role::Llm, Role::Vlm],
    }
}

pub fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| DEFAULT_OUT_DIR.into())
}

pub fn build_tree(cfg: &RunConfig, caption: &str) -> Result<(), Failure> {
    let session = Session::open(cfg)?;
    let llm = session.role(Role::Llm)?;
    let tree = tree::build_tree(llm.as_ref(), caption, cfg.tree_params())?;
    for d in tree.degradations() {
        log::warn!("{} left as a leaf: {}", d.node, d.reason);
    }
    emit(cfg.out.as_deref(), &tree::serialize_tree(&tree, None)?)?;
    session.finish()
}

pub fn score(cfg: &RunConfig, image: &str, caption: &str, scorer: &str) -> Result<(), Failure> {
    let kind = parse_scorer(scorer)?;
    let session = Session::open(cfg)?;
    let image = ImageRef::new(image)?;
    let evaluator = Evaluator::new(
        Scorer {
            kind,
            config: cfg.scorer_config(),
        },
        session.backends(required_roles(kind))?,
    )?;
    let pair = evaluator.score_pair(&image, caption)?;
    let path_texts = match &pair.path {
        Some(ids) => {
            let tree = evaluator.tree_for(caption)?;
            Some(ids.iter().map(|&id| tree.text(id).to_owned()).collect::<Vec<_>>())
        }
        None => None,
    };
    let doc = json!({
        "scorer": kind.to_string(),
        "image": pair.image,
        "caption": pair.caption,
        "base": pair.base,
        "path_weight": pair.path_weight,
        "path": path_texts,
        "fused": pair.fused,
    });
    emit(cfg.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&doc).map_err(cocotree::Error::from)?))?;
    session.finish()
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(PathBuf, Dataset), Failure> {
    let manifest = cfg
        .dataset
        .clone()
        .ok_or_else(|| Failure::usage("no dataset given; pass --dataset or set `dataset` in the config file"))?;
    let dataset = Dataset::load(&manifest, cfg.seed)?;
    for w in &dataset.warnings {
        eprintln!("warning: {}: skipped record, {w}", manifest.display());
    }
    Ok((manifest, dataset))
}

/// Evaluates `dataset` and writes the report files into `dir`.
pub fn run_eval(
    cfg: &RunConfig,
    session: &Session,
    manifest: &Path,
    dataset: &Dataset,
    kind: ScorerKind,
    dir: &Path,
    entailment: bool,
) -> Result<EvalReport, Failure> {
    let mut roles = required_roles(kind).to_vec();
    if entailment {
        roles.push(Role::Judge);
    }
    let backends = session.backends(&roles)?;
    let scorer = Scorer {
        kind,
        config: cfg.scorer_config(),
    };
    let evaluator = Evaluator::new(scorer, backends.clone())?;
    let outcome = evaluator.evaluate(dataset, cfg.parallelism)?;
    let report = outcome.report;
    let digest = report.digest()?;
    write_file(&dir.join(REPORT_JSON), &report.to_json()?)?;
    write_file(&dir.join(REPORT_TXT), &report.table())?;
    write_file(&dir.join(ARTIFACTS_JSON), &outcome.artifacts.to_json()?)?;

    let mut entailment_samples = None;
    if entailment {
        if kind != ScorerKind::CocoTree {
            return Err(Failure::usage("--entailment needs --scorer coco-tree"));
        }
        let evidence = outcome.artifacts.rule_evidence(manifest.parent())?;
        let ent = entailment_report(backends.judge.as_ref(), &dataset.name, &evidence)?;
        let text = format!("{}\n", serde_json::to_string_pretty(&ent).map_err(cocotree::Error::from)?);
        write_file(&dir.join("entailment.json"), &text)?;
        write_file(&dir.join("entailment.txt"), &ent.table())?;
        entailment_samples = Some(ent.samples);
    }

    let run = json!({
        "scorer": kind.to_string(),
        "config": scorer.config,
        "dataset": {
            "name": dataset.name,
            "manifest": manifest.display().to_string(),
            "kind": dataset.kind(),
            "samples": dataset.len(),
            "skipped_records": dataset.warnings,
        },
        "seed": cfg.seed,
        "parallelism": cfg.parallelism,
        "backends": {
            "llm": backends.llm.identity(),
            "vlm": backends.vlm.identity(),
            "judge": backends.judge.identity(),
        },
        "report_digest": digest,
        "failed_samples": report.failures.len(),
        "entailment_samples": entailment_samples,
    });
    write_file(
        &dir.join(RUN_JSON),
        &format!("{}\n", serde_json::to_string_pretty(&run).map_err(cocotree::Error::from)?),
    )?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig, scorer: &str, entailment: bool) -> Result<(), Failure> {
    let kind = parse_scorer(scorer)?;
    let (manifest, dataset) = load_dataset(cfg)?;
    let session = Session::open(cfg)?;
    let dir = out_dir(cfg);
    let report = run_eval(cfg, &session, &manifest, &dataset, kind, &dir, entailment)?;
    print!("{}", report.table());
    if entailment {
        if let Ok(t) = std::fs::read_to_string(dir.join("entailment.txt")) {
            print!("\n{t}");
        }
    }
    println!("report digest: {}", report.digest()?);
    println!("wrote {}", dir.display());
    session.finish()
}

fn explain_pair(
    out: &mut String,
    cfg: &RunConfig,
    tree: &ConceptTree,
    scores: &TreeScores,
    base: f64,
    connective: ConnectiveArg,
    trace: bool,
) -> Result<(), Failure> {
    let search = cfg.search();
    let path = if trace && search.strategy == Strategy::Beam {
        let (path, steps) = beam_search_traced(tree, scores, search.beam_width)?;
        for step in &steps {
            let _ = writeln!(out, "  beam width {} depth {} ({} dropped)", step.width, step.depth, step.dropped);
            for p in &step.kept {
                let _ = writeln!(
                    out,
                    "    {:.4} {}{}",
                    p.weight,
                    p.texts.join(" -> "),
                    if p.complete { " [leaf]" } else { "" }
                );
            }
        }
        path
    } else {
        search.select(tree, scores)?
    };
    match search.strategy {
        Strategy::Beam => {
            let _ = writeln!(out, "strategy: beam (k={})", search.beam_width);
        }
        Strategy::Max => {
            let _ = writeln!(out, "strategy: max");
        }
    }
    let _ = writeln!(out, "path:");
    for (i, &id) in path.node_ids.iter().enumerate() {
        let s = scores.get(id)?;
        let _ = writeln!(
            out,
            "  {}. {:<40} l_s={:.4} v_s={:.4} c_s={:.4}",
            i + 1,
            tree.text(id),
            s.l_s,
            s.v_s,
            s.c_s
        );
    }
    let connectives: &[Connective] = match connective {
        ConnectiveArg::And => &[Connective::And],
        ConnectiveArg::Or => &[Connective::Or],
        ConnectiveArg::Both => &[Connective::And, Connective::Or],
    };
    for &c in connectives {
        let rule = build_rule(&path, tree, c, tree.root_caption())?;
        let _ = writeln!(out, "{c} rule: {}", rule.rendered);
    }
    let fused = fuse(base, path.weight, search.beta)?;
    let _ = writeln!(out, "base score:  {base:.4}");
    let _ = writeln!(out, "path weight: {:.4}", path.weight);
    let _ = writeln!(out, "fused (beta={}): {fused:.4}", search.beta);
    Ok(())
}

pub fn explain_sample(cfg: &RunConfig, id: &str, connective: ConnectiveArg, trace: bool) -> Result<(), Failure> {
    let path = out_dir(cfg).join(ARTIFACTS_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Failure::dataset(format!("cannot read {} (run `cocotree eval` first): {e}", path.display()))
    })?;
    let artifacts = EvalArtifacts::from_json(&text)?;
    let sample = artifacts
        .sample(id)
        .ok_or_else(|| Failure::dataset(format!("unknown sample `{id}` in {}", path.display())))?;
    let matching: Vec<_> = match sample.pairs.len() {
        4 => vec![&sample.pairs[0], &sample.pairs[3]],
        _ => sample.pairs.iter().take(1).collect(),
    };
    let mut out = String::new();
    for pair in matching {
        let scores = pair.scores.as_ref().ok_or_else(|| {
            Failure::dataset(format!("sample `{id}` has no tree scores; re-run eval with --scorer coco-tree"))
        })?;
        let tree = artifacts.tree(&pair.caption)?;
        let _ = writeln!(out, "sample {id}: image {} caption \"{}\"", pair.image, pair.caption);
        explain_pair(&mut out, cfg, &tree, scores, pair.base, connective, trace)?;
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

pub fn explain_live(
    cfg: &RunConfig,
    image: &str,
    caption: &str,
    connective: ConnectiveArg,
    trace: bool,
) -> Result<(), Failure> {
    let session = Session::open(cfg)?;
    let backends = session.backends(&[Role::Llm, Role::Vlm])?;
    let image = ImageRef::new(image)?;
    let evaluator = Evaluator::new(Scorer::coco_tree(cfg.scorer_config()), backends)?;
    let pair = evaluator.score_pair(&image, caption)?;
    let tree = evaluator.tree_for(caption)?;
    let scores = pair
        .scores
        .as_ref()
        .ok_or_else(|| Failure::new(crate::exit::INVARIANT, "tree scorer returned no scores"))?;
    let mut out = format!("image {} caption \"{caption}\"\n", image.reference());
    explain_pair(&mut out, cfg, &tree, scores, pair.base, connective, trace)?;
    print!("{out}");
    session.finish()
}

pub fn cache(cfg: &RunConfig, action: CacheAction) -> Result<(), Failure> {
    match action {
        CacheAction::Stats => {
            let s = ResponseCache::inspect(&cfg.cache_dir);
            println!("cache dir: {}", cfg.cache_dir.display());
            println!("entries: {}", s.entries);
            println!(
                "last run: {} hits, {} misses, hit rate {:.1}%",
                s.hits,
                s.misses,
                100.0 * s.hit_rate()
            );
        }
        CacheAction::Clear => {
            let _lock = lock_dir(cfg)?;
            ResponseCache::clear(&cfg.cache_dir)?;
            println!("cleared {}", cfg.cache_dir.display());
        }
    }
    Ok(())
}
