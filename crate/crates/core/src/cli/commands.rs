use serde::Serialize;
use serde_json::{json, Value};

use super::{Artifacts, RunConfig};
use crate::error::{usage, Error, Result};
use crate::eval::{
    attention_localization, attention_map, evaluate, run_case, select_probes, EvalCase, EvalOptions, LocalizationReport,
};
use crate::flow::{CorrectionPlan, CorrectionTrace, StepTrace};
use crate::layout::{Image, Mode};
use crate::metrics::{attention_heatmap, layer_update_report, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::synthwear::{gen_pair, load_pair_dir, write_pair_dir, SamplePair};
use crate::train::{train, StepLog};

pub(super) fn run(name: &str, cfg: &RunConfig, out: &mut Artifacts, context: &mut Value) -> Result<()> {
    match name {
        "gen-data" => gen_data(cfg, out),
        "train" => train_cmd(cfg, out, context),
        "sample" => sample_cmd(cfg, out, Mode::On, None),
        "tryoff" => sample_cmd(cfg, out, Mode::Off, None),
        "self-correct" => sample_cmd(cfg, out, Mode::On, Some(&cfg.correction)),
        "attn-map" => attn_cmd(cfg, out),
        "eval" => eval_cmd(cfg, out),
        "layer-report" => layer_cmd(cfg, out),
        other => Err(usage!("unknown subcommand `{other}`")),
    }
}

fn gen_data(cfg: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let pairs = cfg.data.spec.generate()?;
    let dir = out.path("");
    write_pair_dir(&pairs, &dir)?;
    for i in 0..pairs.len() {
        let stem = format!("pair_{i:05}");
        for suffix in ["garment.png", "person.png", "mask.png", "json"] {
            let name = format!("{stem}.{suffix}");
            if out.path(&name).exists() {
                out.record(&name)?;
            }
        }
    }
    Ok(())
}

/// Pair `i` of the configured data source.
fn load_pair(cfg: &RunConfig, i: usize) -> Result<SamplePair> {
    match &cfg.data.dir {
        Some(dir) => load_pair_dir(dir)?.get(i),
        None => {
            let plan = cfg.data.spec.plan();
            let &(seed, cat, h, w) = plan.get(i).ok_or_else(|| usage!("pair index {i} out of {}", plan.len()))?;
            gen_pair(seed, cat, h, w)
        }
    }
}

fn load_pairs(cfg: &RunConfig, limit: Option<usize>) -> Result<Vec<SamplePair>> {
    match &cfg.data.dir {
        Some(dir) => {
            let d = load_pair_dir(dir)?;
            let n = limit.map_or(d.len(), |l| l.min(d.len()));
            (0..n).map(|i| d.get(i)).collect()
        }
        None => {
            let mut plan = cfg.data.spec.plan();
            if let Some(l) = limit {
                plan.truncate(l);
            }
            plan.into_iter().map(|(s, c, h, w)| gen_pair(s, c, h, w)).collect()
        }
    }
}

fn checkpoint(cfg: &RunConfig) -> Result<ModelParams> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| usage!("this subcommand needs `--checkpoint`"))?;
    let params = load_checkpoint(path)?;
    if params.config != cfg.model {
        eprintln!("note: using the model config stored in {}", path.display());
    }
    Ok(params)
}

#[derive(Serialize)]
struct LossCurve {
    step: Vec<usize>,
    loss: Vec<f32>,
    running_on: Vec<Option<f32>>,
    running_off: Vec<Option<f32>>,
}

fn train_cmd(cfg: &RunConfig, out: &mut Artifacts, context: &mut Value) -> Result<()> {
    let tc = cfg.train.to_train_config(cfg.seeds.train)?;
    let pairs = load_pairs(cfg, None)?;
    let mut params = match &cfg.train.init {
        Some(p) => load_checkpoint(p)?,
        None => ModelParams::init(&cfg.model, cfg.seeds.init)?,
    };
    let log_name = "train_log.jsonl";
    let log_path = out.path(log_name);
    let mut log_text = String::new();
    let mut last: Option<StepLog> = None;
    let every = cfg.train.report_every;
    let result = train(&mut params, &pairs, &tc, |s| {
        log_text.push_str(&serde_json::to_string(s).expect("serializable"));
        log_text.push('\n');
        if every > 0 && (s.step % every == 0 || s.step == tc.steps) {
            eprintln!(
                "step {:>6}  loss {:.5}  on {}  off {}  |g| {:.3}",
                s.step,
                s.loss,
                s.running_on.map_or("-".into(), |v| format!("{v:.5}")),
                s.running_off.map_or("-".into(), |v| format!("{v:.5}")),
                s.grad_norm
            );
        }
        last = Some(s.clone());
    });
    std::fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
    let history = match result {
        Ok(h) => h,
        Err(e) => {
            *context = json!({ "last_completed_step": last, "log": log_name });
            return Err(e);
        }
    };
    out.record(log_name)?;
    let curve = LossCurve {
        step: history.iter().map(|s| s.step).collect(),
        loss: history.iter().map(|s| s.loss).collect(),
        running_on: history.iter().map(|s| s.running_on).collect(),
        running_off: history.iter().map(|s| s.running_off).collect(),
    };
    out.write_json("loss_curve.json", &curve)?;
    save_checkpoint(&params, &out.path("model.ckpt"))?;
    out.record("model.ckpt")
}

#[derive(Serialize)]
struct SampleTrace<'a> {
    pair: usize,
    mode: String,
    lambda: Option<f32>,
    steps: &'a [StepTrace],
    corrections: &'a [CorrectionTrace],
}

fn sample_cmd(cfg: &RunConfig, out: &mut Artifacts, mode: Mode, plan: Option<&CorrectionPlan>) -> Result<()> {
    let params = checkpoint(cfg)?;
    let opts = EvalOptions {
        schedule: cfg.schedule(),
        temperature: cfg.temperature_params(),
        correction: plan.cloned(),
        seed: cfg.seeds.sample,
    };
    for (n, &i) in cfg.sample.indices.iter().enumerate() {
        let pair = load_pair(cfg, i)?;
        let case = EvalCase::new(&pair, mode)?;
        let result = run_case(&params, &pair, &case, &opts, opts.seed.wrapping_add(n as u64))?;
        let stem = format!("{}_{i:05}", if mode == Mode::On { "tryon" } else { "tryoff" });
        result.canvas.image().write_png(&out.path(&format!("{stem}.png")))?;
        out.record(&format!("{stem}.png"))?;
        let trace = SampleTrace {
            pair: i,
            mode: mode.to_string(),
            lambda: result.lambda,
            steps: &result.steps,
            corrections: &result.corrections,
        };
        out.write_json(&format!("{stem}.trace.json"), &trace)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AttnQuery {
    query: [usize; 2],
    file: String,
}

#[derive(Serialize)]
struct AttnSummary {
    pair: usize,
    block: usize,
    head: Option<usize>,
    queries: Vec<AttnQuery>,
    localization: Option<LocalizationReport>,
}

fn attn_cmd(cfg: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let params = checkpoint(cfg)?;
    let a = &cfg.attention;
    let block = a.block.unwrap_or(params.config.block_count - 1);
    let pair = load_pair(cfg, a.pair)?;
    let mut queries: Vec<(usize, usize)> = a.queries.iter().map(|q| (q[0], q[1])).collect();
    let mut localization = None;
    if queries.is_empty() {
        let probes = select_probes(&params, std::slice::from_ref(&pair), a.probes, cfg.seeds.sample)?;
        queries = probes.iter().map(|p| p.query).collect();
        if a.head.is_none() {
            localization = Some(attention_localization(&params, std::slice::from_ref(&pair), &probes, Some(block), cfg.seeds.sample)?);
        }
    }
    let (map, keys) = attention_map(&params, &pair, block, a.head, cfg.seeds.sample)?;
    let canvas = crate::layout::concat_pair(&pair.garment, &pair.person)?;
    let ppt = params.config.codec_factor * params.config.patch;
    let mut listed = Vec::new();
    for q in queries {
        let row = keys.iter().position(|&k| k == q).ok_or_else(|| usage!("query {q:?} is not a token of this canvas"))?;
        let img: Image = attention_heatmap(canvas.image(), map.row(row), &keys, ppt, q)?;
        let file = format!("attn_{:05}_r{}_c{}.png", a.pair, q.0, q.1);
        img.write_png(&out.path(&file))?;
        out.record(&file)?;
        listed.push(AttnQuery { query: [q.0, q.1], file });
    }
    out.write_json("attention.json", &AttnSummary { pair: a.pair, block, head: a.head, queries: listed, localization })
}

#[derive(Serialize)]
struct EvalOutput {
    tryon: EvalReport,
    tryoff: EvalReport,
    localization: Option<LocalizationReport>,
}

fn eval_cmd(cfg: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let params = checkpoint(cfg)?;
    let pairs = load_pairs(cfg, cfg.eval.limit)?;
    let opts = EvalOptions {
        schedule: cfg.schedule(),
        temperature: cfg.temperature_params(),
        correction: cfg.eval.self_correct.then(|| cfg.correction.clone()),
        seed: cfg.seeds.sample,
    };
    let mut tryon = evaluate(&params, &pairs, Mode::On, &opts)?;
    let tryoff = evaluate(&params, &pairs, Mode::Off, &opts)?;
    let has_truth = pairs.iter().all(|p| p.truth.is_some());
    let localization = if cfg.eval.localization_queries > 0 && has_truth {
        let probes = select_probes(&params, &pairs, cfg.eval.localization_queries, cfg.seeds.sample)?;
        Some(attention_localization(&params, &pairs, &probes, cfg.attention.block, cfg.seeds.sample)?)
    } else {
        None
    };
    tryon.attention_localization = localization.as_ref().map(|l| l.mean);
    out.write_json("eval.json", &EvalOutput { tryon, tryoff, localization })
}

fn layer_cmd(cfg: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let need = |p: &Option<std::path::PathBuf>, flag: &str| p.clone().ok_or_else(|| usage!("layer-report needs `--{flag}`"));
    let before = load_checkpoint(&need(&cfg.layer_report.before, "before")?)?;
    let after = load_checkpoint(&need(&cfg.layer_report.after, "after")?)?;
    out.write_json("layer_report.json", &layer_update_report(&before, &after)?)
}
