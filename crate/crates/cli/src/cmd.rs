use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use comet_core::asm::{parse_block, BasicBlock};
use comet_core::cost::{
    ground_truth_explanation, set_spawn_limit, CachedModel, CostModel, CostTable, CrudeModel, ExternalModel,
};
use comet_core::data;
use comet_core::eval::{
    accuracy_eval, baseline_fixed, baseline_random, dataset_to_jsonl, ground_truths, load_dataset, mape,
    parse_dataset, prec_cov_eval, prominence, prominence_csv, type_frequencies, DatasetError, DatasetRecord,
    EvalError, EvalReport, GroupBy,
};
use comet_core::explain::{explain, explain_timed, ExplainError};
use comet_core::fixtures::generate_fixtures;
use comet_core::graph::{build_graph, build_graph_with, parse_preserve, BlockGraph, EdgePolicy, FeatureSet, GraphOptions};
use comet_core::isa::{load_kb, IsaKb};
use comet_core::perturb::{estimate_space_size, sample_perturbation};
use comet_core::rng::stream;
use serde_json::{json, Value};

use crate::config::FileConfig;
use crate::{BlockArgs, Cli, Command, EvalCommand, ModelArgs, OutputArgs, SeedArgs};

#[derive(Debug, Clone, Copy)]
pub enum Code {
    Usage = 2,
    Input = 3,
    Model = 4,
    Unconverged = 5,
}

pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

type Result<T> = std::result::Result<T, Failure>;

trait Tag<T> {
    fn tag(self, code: Code) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for std::result::Result<T, E> {
    fn tag(self, code: Code) -> Result<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn fail<T>(code: Code, error: anyhow::Error) -> Result<T> {
    Err(Failure { code, error })
}

fn explain_code(e: &ExplainError) -> Code {
    match e {
        ExplainError::Config(_) => Code::Usage,
        ExplainError::Graph(_) => Code::Input,
        ExplainError::Model(_) | ExplainError::Perturb(_) => Code::Model,
    }
}

fn eval_code(e: &EvalError) -> Code {
    match e {
        EvalError::Model { .. } => Code::Model,
        EvalError::UnknownGroup(_) => Code::Usage,
        EvalError::Empty | EvalError::MissingMeasurement { .. } | EvalError::Block { .. } => Code::Input,
    }
}

fn eval_tag<T>(r: std::result::Result<T, EvalError>) -> Result<T> {
    r.map_err(|e| Failure { code: eval_code(&e), error: e.into() })
}

enum ModelSpec {
    Crude,
    Exec(Vec<String>),
}

impl ModelSpec {
    fn parse(s: &str) -> Result<Self> {
        if s == "crude" {
            return Ok(ModelSpec::Crude);
        }
        match s.strip_prefix("exec:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(ModelSpec::Exec(cmd.split_whitespace().map(String::from).collect())),
            _ => fail(Code::Usage, anyhow!("model must be `crude` or `exec:<command>`, got `{s}`")),
        }
    }

    fn external(&self) -> bool {
        matches!(self, ModelSpec::Exec(_))
    }
}

/// Shared state of one invocation.
struct Ctx {
    kb_arg: String,
    kb: Arc<IsaKb>,
    cfg: FileConfig,
    timing: bool,
}

impl Ctx {
    /// Echo of everything that determines an output. Thread counts are left
    /// out on purpose: they never change results.
    fn echo(&self, extra: Value) -> Value {
        let mut v = json!({ "kb": self.kb_arg, "settings": self.cfg, "timing": self.timing });
        if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
            m.extend(e);
        }
        v
    }

    fn table(&self, march: &str, table: Option<&Path>) -> Result<CostTable> {
        let t = match table {
            Some(p) => CostTable::load(march, p),
            None => CostTable::bundled(march),
        }
        .tag(Code::Usage)?;
        t.check_covers(&self.kb).tag(Code::Usage)?;
        Ok(t)
    }

    fn model(&self, args: &ModelArgs) -> Result<(Arc<dyn CostModel>, bool)> {
        let spec = ModelSpec::parse(&args.model)?;
        let model: Arc<dyn CostModel> = match &spec {
            ModelSpec::Crude => Arc::new(CrudeModel::new(self.kb.clone(), self.table(&args.march, args.table.as_deref())?)),
            ModelSpec::Exec(argv) => {
                let ext = ExternalModel::new(
                    argv.clone(),
                    Duration::from_millis(self.cfg.model.timeout_ms),
                    Some(args.march.clone()),
                );
                Arc::new(CachedModel::new(Arc::new(ext), self.cfg.model.cache_capacity))
            }
        };
        Ok((model, spec.external()))
    }

    fn block(&self, args: &BlockArgs) -> Result<BasicBlock> {
        let text = match (&args.block, &args.asm) {
            (Some(path), _) => {
                std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).tag(Code::Usage)?
            }
            (None, Some(asm)) => asm.replace("\\n", "\n"),
            (None, None) => return fail(Code::Usage, anyhow!("pass --block or --asm")),
        };
        parse_block(&text, &self.kb).tag(Code::Input)
    }

    fn graph(&self, bb: &BasicBlock) -> Result<BlockGraph> {
        build_graph(&self.kb, bb).tag(Code::Input)
    }

    fn dataset(&self, arg: &str) -> Result<Vec<DatasetRecord>> {
        let r = match arg {
            "bundled:fixtures" => parse_dataset(data::FIXTURES, &self.kb),
            "bundled:casestudies" => parse_dataset(data::CASE_STUDIES, &self.kb),
            path => load_dataset(path, &self.kb),
        };
        r.map_err(|e| {
            let code = if matches!(e, DatasetError::Io { .. }) { Code::Usage } else { Code::Input };
            Failure { code, error: e.into() }
        })
    }
}

fn load_kb_arg(arg: &str) -> Result<IsaKb> {
    match arg {
        "bundled:core" => Ok(IsaKb::core()),
        "bundled:tiny" => Ok(IsaKb::tiny()),
        path => load_kb(path).tag(Code::Usage),
    }
}

fn block_source(args: &BlockArgs) -> Value {
    match &args.block {
        Some(p) => json!(p.display().to_string()),
        None => Value::Null,
    }
}

fn emit(out: &OutputArgs, text: &str) -> Result<()> {
    match &out.output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display())).tag(Code::Usage),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).tag(Code::Usage)?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display())).tag(Code::Usage)?;
    Ok(path)
}

fn seeds(ctx: &Ctx, args: &SeedArgs) -> Result<Vec<u64>> {
    let n = args.seeds.unwrap_or(ctx.cfg.eval.seeds);
    if n == 0 {
        return fail(Code::Usage, anyhow!("--seeds must be at least 1"));
    }
    Ok((0..n as u64).map(|k| args.seed + k).collect())
}

fn uses_external(command: &Command) -> bool {
    let spec = match command {
        Command::Explain(a) => &a.model.model,
        Command::Eval(EvalCommand::Preccov { model, .. } | EvalCommand::Mape { model, .. }) => &model.model,
        Command::Eval(EvalCommand::Prominence { model, report: None, .. }) => &model.model,
        _ => return false,
    };
    spec.starts_with("exec:")
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref()).tag(Code::Usage)?;
    let jobs = match cli.jobs {
        Some(0) => return fail(Code::Usage, anyhow!("--jobs must be at least 1")),
        Some(n) => n,
        None => {
            let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
            if uses_external(&cli.command) {
                n.min(4)
            } else {
                n
            }
        }
    };
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().tag(Code::Usage)?;
    set_spawn_limit(jobs);
    let kb = Arc::new(load_kb_arg(&cli.kb)?);
    let ctx = Ctx { kb_arg: cli.kb, kb, cfg, timing: cli.timing };
    match cli.command {
        Command::Explain(a) => run_explain(&ctx, a),
        Command::Eval(e) => run_eval(&ctx, e),
        Command::Perturb(a) => run_perturb(&ctx, a),
        Command::SpaceSize(a) => run_space_size(&ctx, a),
        Command::Graph(a) => run_graph(&ctx, a),
        Command::Fixtures(out) => emit(&out, &dataset_to_jsonl(&generate_fixtures(&ctx.kb))),
    }
}

fn run_explain(ctx: &Ctx, a: crate::ExplainArgs) -> Result<()> {
    let bb = ctx.block(&a.block)?;
    let (model, external) = ctx.model(&a.model)?;
    let mut cfg = ctx.cfg.explain(external, a.seed).tag(Code::Usage)?;
    if let Some(t) = a.threshold {
        cfg.precision_threshold = t;
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    let run = if ctx.timing { explain_timed } else { explain };
    let e = run(model.as_ref(), &ctx.kb, &bb, &cfg).map_err(|e| Failure { code: explain_code(&e), error: e.into() })?;
    let mut out = json!({
        "config": ctx.echo(json!({
            "model": a.model.model,
            "march": a.model.march,
            "table": a.model.table.as_ref().map(|p| p.display().to_string()),
            "block_file": block_source(&a.block),
            "explain": cfg,
        })),
        "seed": a.seed,
        "block": bb.instructions.iter().map(|i| i.to_string()).collect::<Vec<_>>(),
        "features": e.features.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
        "explanation": e,
    });
    if !external {
        let table = ctx.table(&a.model.march, a.model.table.as_deref())?;
        let gt = ground_truth_explanation(&table, &ctx.graph(&bb)?).tag(Code::Model)?;
        out["ground_truth"] = json!(gt.iter().map(|f| f.to_string()).collect::<Vec<_>>());
    }
    emit(&a.output, &pretty(&out))?;
    if !e.converged {
        return fail(
            Code::Unconverged,
            anyhow!("no feature set reached precision {}; returned all features", cfg.precision_threshold),
        );
    }
    Ok(())
}

fn reports_json(ctx: &Ctx, command: &str, extra: Value, reports: &[(&str, &EvalReport)]) -> String {
    let map: BTreeMap<&str, &EvalReport> = reports.iter().copied().collect();
    pretty(&json!({ "command": command, "config": ctx.echo(extra), "reports": map }))
}

fn aggregate_line(name: &str, r: &EvalReport) -> String {
    let part = |label: &str, v: Option<comet_core::eval::MeanStd>| v.map(|m| format!(" {label} {m}")).unwrap_or_default();
    format!(
        "{name}:{}{}{}{} excluded {}",
        part("accuracy", r.aggregates.accuracy),
        part("precision", r.aggregates.precision),
        part("coverage", r.aggregates.coverage),
        part("time", r.aggregates.time),
        r.aggregates.excluded
    )
}

fn run_eval(ctx: &Ctx, e: EvalCommand) -> Result<()> {
    match e {
        EvalCommand::Accuracy { data, march, table, seeds: s } => {
            let records = ctx.dataset(&data.dataset)?;
            let seeds = seeds(ctx, &s)?;
            let t = ctx.table(&march, table.as_deref())?;
            let cfg = ctx.cfg.explain(false, 0).tag(Code::Usage)?;
            let comet = eval_tag(accuracy_eval(&records, &ctx.kb, &t, &cfg, &seeds, ctx.timing))?;
            let random = eval_tag(baseline_random(&records, &ctx.kb, &t, &seeds))?;
            let fixed = eval_tag(baseline_fixed(&records, &ctx.kb, &t))?;
            let freq = type_frequencies(&eval_tag(ground_truths(&records, &ctx.kb, &t))?);
            let extra = json!({
                "dataset": data.dataset,
                "march": march,
                "table": table.as_ref().map(|p| p.display().to_string()),
                "seeds": seeds,
                "ground_truth_type_frequencies": freq,
            });
            let json = reports_json(ctx, "accuracy", extra, &[("comet", &comet), ("random", &random), ("fixed", &fixed)]);
            write_file(&data.out_dir, "accuracy.json", &json)?;
            for (name, r) in [("comet", &comet), ("random", &random), ("fixed", &fixed)] {
                write_file(&data.out_dir, &format!("accuracy_{name}.csv"), &r.to_csv())?;
                println!("{}", aggregate_line(name, r));
            }
            Ok(())
        }
        EvalCommand::Preccov { data, model, seeds: s } => {
            let records = ctx.dataset(&data.dataset)?;
            let seeds = seeds(ctx, &s)?;
            let (m, external) = ctx.model(&model)?;
            let cfg = ctx.cfg.explain(external, 0).tag(Code::Usage)?;
            let r = eval_tag(prec_cov_eval(&records, &ctx.kb, m.as_ref(), &cfg, &seeds, ctx.timing))?;
            let extra = json!({ "dataset": data.dataset, "model": model.model, "march": model.march, "seeds": seeds });
            write_file(&data.out_dir, "preccov.json", &reports_json(ctx, "preccov", extra, &[("explanations", &r)]))?;
            write_file(&data.out_dir, "preccov.csv", &r.to_csv())?;
            println!("{}", aggregate_line(m.name(), &r));
            Ok(())
        }
        EvalCommand::Mape { data, model } => {
            let records = ctx.dataset(&data.dataset)?;
            let (m, _) = ctx.model(&model)?;
            let r = eval_tag(mape(&records, &ctx.kb, m.as_ref(), &model.march))?;
            let extra = json!({ "dataset": data.dataset, "model": model.model, "march": model.march });
            let json = pretty(&json!({ "command": "mape", "config": ctx.echo(extra), "report": r }));
            write_file(&data.out_dir, "mape.json", &json)?;
            write_file(&data.out_dir, "mape.csv", &r.to_csv())?;
            println!("{} on {}: mape {:.2}%", r.model, r.march, r.mape);
            Ok(())
        }
        EvalCommand::Prominence { data, model, seeds: s, report, method, group_by } => {
            let group_key = group_by.unwrap_or_else(|| ctx.cfg.eval.group_by.clone());
            let group: GroupBy = eval_tag(group_key.parse())?;
            let (rows, extra) = match &report {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("cannot read {}", path.display()))
                        .tag(Code::Usage)?;
                    let parsed: Value = serde_json::from_str(&text).tag(Code::Input)?;
                    let reports: BTreeMap<String, EvalReport> =
                        serde_json::from_value(parsed["reports"].clone()).context("not a report file").tag(Code::Input)?;
                    let key = match method {
                        Some(m) => m,
                        None if reports.len() == 1 => reports.keys().next().unwrap().clone(),
                        None => "comet".to_string(),
                    };
                    let Some(r) = reports.get(&key) else {
                        return fail(Code::Input, anyhow!("report has no entry `{key}`"));
                    };
                    (r.rows.clone(), json!({ "report": path.display().to_string(), "method": key, "group_by": group }))
                }
                None => {
                    let records = ctx.dataset(&data.dataset)?;
                    let seeds = seeds(ctx, &s)?;
                    let (m, external) = ctx.model(&model)?;
                    let cfg = ctx.cfg.explain(external, 0).tag(Code::Usage)?;
                    let r = eval_tag(prec_cov_eval(&records, &ctx.kb, m.as_ref(), &cfg, &seeds, false))?;
                    let extra = json!({
                        "dataset": data.dataset,
                        "model": model.model,
                        "march": model.march,
                        "seeds": seeds,
                        "group_by": group,
                    });
                    (r.rows, extra)
                }
            };
            let table = prominence(&rows, group);
            let json = pretty(&json!({ "command": "prominence", "config": ctx.echo(extra), "rows": table }));
            write_file(&data.out_dir, "prominence.json", &json)?;
            write_file(&data.out_dir, "prominence.csv", &prominence_csv(&table))?;
            println!("{:<16} {:>6} {:>9} {:>7} {:>7}", "group", "n", "numinsts", "inst", "dep");
            for r in &table {
                println!("{:<16} {:>6} {:>9.1} {:>7.1} {:>7.1}", r.group, r.explanations, r.num_insts, r.inst, r.dep);
            }
            Ok(())
        }
    }
}

fn preserve(g: &BlockGraph, spec: &str) -> Result<FeatureSet> {
    parse_preserve(spec, g).tag(Code::Input)
}

fn run_perturb(ctx: &Ctx, a: crate::PerturbArgs) -> Result<()> {
    let bb = ctx.block(&a.block)?;
    let g = ctx.graph(&bb)?;
    let keep = preserve(&g, &a.preserve)?;
    let keep_text = keep.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(", ");
    let mut samples = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let mut rng = stream(a.seed, &[i as u64]);
        samples.push(sample_perturbation(&ctx.kb, &g, &keep, &ctx.cfg.perturb, &mut rng).tag(Code::Model)?);
    }
    let text = if a.json {
        let items: Vec<Value> = samples
            .iter()
            .map(|s| {
                json!({
                    "block": s.block.instructions.iter().map(|i| i.to_string()).collect::<Vec<_>>(),
                    "ops": s.ops_applied,
                    "vertex_map": s.vertex_map,
                    "attempts": s.attempts,
                })
            })
            .collect();
        let extra = json!({ "block_file": block_source(&a.block), "preserve": keep_text, "count": a.n });
        pretty(&json!({ "config": ctx.echo(extra), "seed": a.seed, "samples": items }))
    } else {
        let mut out = format!("; seed {} preserve [{}]\n", a.seed, keep_text);
        for (i, s) in samples.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&s.block.render());
        }
        out
    };
    emit(&a.output, &text)
}

fn run_space_size(ctx: &Ctx, a: crate::SpaceSizeArgs) -> Result<()> {
    let bb = ctx.block(&a.block)?;
    let g = ctx.graph(&bb)?;
    let keep = preserve(&g, &a.preserve)?;
    let size = estimate_space_size(&ctx.kb, &g, &keep).tag(Code::Model)?;
    let keep_text = keep.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(", ");
    let text = if a.json {
        let extra = json!({ "block_file": block_source(&a.block), "preserve": keep_text });
        pretty(&json!({ "config": ctx.echo(extra), "log10_count": size.log10_count, "count": size.to_string() }))
    } else {
        format!("log10 {:.6}\ncount {}\n", size.log10_count, size)
    };
    emit(&a.output, &text)
}

fn run_graph(ctx: &Ctx, a: crate::GraphArgs) -> Result<()> {
    let bb = ctx.block(&a.block)?;
    let policy = if a.nearest { EdgePolicy::Nearest } else { EdgePolicy::AllPairs };
    let options = GraphOptions { policy, ..GraphOptions::for_kb(&ctx.kb) };
    let g = build_graph_with(&ctx.kb, &bb, options).tag(Code::Input)?;
    let extra = json!({ "block_file": block_source(&a.block) });
    emit(&a.output, &pretty(&json!({ "config": ctx.echo(extra), "graph": g.to_json() })))
}
