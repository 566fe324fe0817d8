//! Stage orchestration over content-addressed artifact directories.
//!
//! Each stage writes into `<out_dir>/<stage>/<hash>/`, where the hash covers
//! the stage's own settings, its seed when it draws random numbers, and the
//! hashes of every stage it reads from. `manifest.txt` is written last and
//! marks the directory complete; a complete directory is never recomputed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dygrag_core::backbone::{ranked_nodes, train_lm, BackboneConfig, SequenceModel};
use dygrag_core::fusion::{finetune_generator, FusionConfig, Generator, Strategy};
use dygrag_core::graphdata::{bin_time_steps, parse_edge_list, split, synth_graph, SplitSpec};
use dygrag_core::metrics::{evaluate_run, METRIC_NAMES};
use dygrag_core::retriever::{
    annotate_pool, bm25_rank, groundtruth_rank, hit_rate, jaccard_rank, precedes, relevant_set, train_retriever,
    Eligibility, RankedDemos, Retriever,
};
use dygrag_core::sequencer::{build_pool, EgoSample, Vocab};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::error::{io, Error, Result};
use crate::formats::{
    parse_annotation, parse_demos, parse_pool, read_text, render_annotation, render_demos, render_node_lists,
    render_node_map, render_pool, render_split, write_text, DemoList,
};
use crate::report::{emit_report, ReportRow, RunRecord};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Preprocess,
    Pretrain,
    Annotate,
    TrainRetriever,
    Retrieve,
    Finetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Preprocess,
        Stage::Pretrain,
        Stage::Annotate,
        Stage::TrainRetriever,
        Stage::Retrieve,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Pretrain => "pretrain",
            Stage::Annotate => "annotate",
            Stage::TrainRetriever => "train-retriever",
            Stage::Retrieve => "retrieve",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Stages whose artifacts this one reads.
    pub fn inputs(self, config: &PipelineConfig) -> Vec<Stage> {
        use Stage::*;
        match self {
            Preprocess => vec![],
            Pretrain | Annotate => vec![Preprocess],
            TrainRetriever => vec![Preprocess, Pretrain, Annotate],
            Retrieve if config.retriever.method == "trained" => vec![Preprocess, TrainRetriever],
            Retrieve => vec![Preprocess],
            Finetune => vec![Preprocess, Pretrain, Retrieve],
            Evaluate => vec![Preprocess, Pretrain, Retrieve, Finetune],
        }
    }

    /// Whether the stage itself consumes the run seed.
    fn seeded(self) -> bool {
        matches!(self, Stage::Pretrain | Stage::TrainRetriever | Stage::Finetune)
    }

    /// The stages a full run executes, in order.
    pub fn plan(config: &PipelineConfig) -> Vec<Stage> {
        Self::ALL
            .into_iter()
            .filter(|s| *s != Stage::TrainRetriever || config.retriever.method == "trained")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub hash: String,
    pub dir: PathBuf,
    pub cached: bool,
}

impl StageOutcome {
    pub fn notice(&self) -> String {
        if self.cached {
            format!("{} {}: cached", self.stage.name(), self.hash)
        } else {
            format!("{} {}: done", self.stage.name(), self.hash)
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub root: PathBuf,
    /// Print one notice per stage to stderr.
    pub verbose: bool,
}

type Extras = Vec<(String, String)>;

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let root = PathBuf::from(&config.run.out_dir);
        Ok(Self {
            config,
            root,
            verbose: false,
        })
    }

    pub fn hash(&self, stage: Stage, seed: u64) -> Result<String> {
        let mut text = format!("stage={}\n", stage.name());
        text.push_str(&self.fingerprint(stage)?);
        if stage.seeded() {
            writeln!(text, "seed={seed}").unwrap();
        }
        for input in stage.inputs(&self.config) {
            writeln!(text, "input.{}={}", input.name(), self.hash(input, seed)?).unwrap();
        }
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }

    fn depends_on_seed(&self, stage: Stage) -> bool {
        stage.seeded() || stage.inputs(&self.config).into_iter().any(|s| self.depends_on_seed(s))
    }

    /// Every setting the stage's output depends on, one `key=value` per line.
    fn fingerprint(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let mut f = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Debug| writeln!(f, "{k}={v:?}").unwrap();
        match stage {
            Stage::Preprocess => {
                let d = &c.data;
                kv("steps", &d.steps);
                kv("max_history", &d.max_history);
                if d.synthetic() {
                    kv("synth", &d.synth_params());
                    kv("synth_seed", &d.synth_seed);
                } else {
                    let bytes = std::fs::read(&d.path).map_err(io(&d.path))?;
                    kv("data_sha256", &hex::encode(Sha256::digest(&bytes)));
                }
            }
            Stage::Pretrain => {
                let b = &c.backbone;
                let m = b.model_config(0, 0)?;
                kv("shape", &(m.layers, m.heads, m.hidden_dim, m.dropout));
                kv("max_len", &b.max_len);
                if b.max_len == 0 {
                    kv("max_new", &c.fusion.max_new);
                }
                kv("train", &(b.epochs, b.batch_size, b.lr, b.clip_norm));
            }
            Stage::Annotate => kv("threshold", &c.retriever.threshold),
            Stage::TrainRetriever => {
                let mut r = c.retriever.core_config(0);
                r.seed = 0;
                kv("retriever", &r);
            }
            Stage::Retrieve => {
                kv("method", &c.retriever.method);
                kv("depth", &self.depth());
                kv("threshold", &c.retriever.threshold);
                kv("hr_k", &c.eval.hr_k);
            }
            Stage::Finetune => kv("fusion", &c.fusion.core_config(0)?),
            Stage::Evaluate => {
                kv("k", &c.eval.k);
                kv("demos", &c.fusion.k);
            }
        }
        Ok(f)
    }

    fn depth(&self) -> usize {
        self.config.eval.hr_k.iter().copied().chain([self.config.fusion.k]).max().unwrap_or(0)
    }

    pub fn stage_dir(&self, stage: Stage, seed: u64) -> Result<PathBuf> {
        Ok(self.root.join(stage.name()).join(self.hash(stage, seed)?))
    }

    pub fn is_complete(&self, stage: Stage, seed: u64) -> Result<bool> {
        Ok(self.stage_dir(stage, seed)?.join(MANIFEST).is_file())
    }

    /// Runs one stage, or reports it cached when its artifact already exists.
    pub fn run_stage(&self, stage: Stage, seed: u64) -> Result<StageOutcome> {
        let hash = self.hash(stage, seed)?;
        let dir = self.root.join(stage.name()).join(&hash);
        let outcome = |cached| StageOutcome {
            stage,
            hash: hash.clone(),
            dir: dir.clone(),
            cached,
        };
        if dir.join(MANIFEST).is_file() {
            let o = outcome(true);
            self.log(&o);
            return Ok(o);
        }
        let mut inputs = BTreeMap::new();
        for input in stage.inputs(&self.config) {
            if !self.is_complete(input, seed)? {
                return Err(Error::MissingPrerequisite {
                    stage: stage.name(),
                    needs: input.name(),
                });
            }
            inputs.insert(input, self.stage_dir(input, seed)?);
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let start = Instant::now();
        let extras = self.execute(stage, seed, &inputs, &dir)?;
        let mut m = String::new();
        writeln!(m, "stage = {}", stage.name()).unwrap();
        writeln!(m, "config_hash = {hash}").unwrap();
        if self.depends_on_seed(stage) {
            writeln!(m, "seed = {seed}").unwrap();
        } else {
            writeln!(m, "seed = none").unwrap();
        }
        let ins: Vec<String> = inputs
            .keys()
            .map(|s| Ok(format!("{}:{}", s.name(), self.hash(*s, seed)?)))
            .collect::<Result<_>>()?;
        writeln!(m, "inputs = {}", ins.join(" ")).unwrap();
        writeln!(m, "wall_time_ms = {}", start.elapsed().as_millis()).unwrap();
        for (k, v) in extras {
            writeln!(m, "{k} = {v}").unwrap();
        }
        write_text(&dir.join(MANIFEST), &m)?;
        let o = outcome(false);
        self.log(&o);
        Ok(o)
    }

    fn log(&self, o: &StageOutcome) {
        if self.verbose {
            eprintln!("{}", o.notice());
        }
    }

    /// Runs every stage for one seed and returns the evaluation record.
    pub fn run_seed(&self, seed: u64) -> Result<RunRecord> {
        let mut last = None;
        for stage in Stage::plan(&self.config) {
            last = Some(self.run_stage(stage, seed)?);
        }
        let last = last.expect("plan is never empty");
        Ok(RunRecord {
            seed,
            hash: last.hash,
            dir: last.dir,
        })
    }

    /// All stages for every configured seed, then the report, which is also
    /// written to `<out_dir>/report.txt`.
    pub fn run_all(&self) -> Result<String> {
        let row = self.run_row()?;
        let text = emit_report(&[row])?;
        write_text(&self.root.join("report.txt"), &text)?;
        Ok(text)
    }

    pub(crate) fn run_row(&self) -> Result<ReportRow> {
        let runs = self.config.run.seeds.iter().map(|s| self.run_seed(*s)).collect::<Result<_>>()?;
        Ok(ReportRow {
            label: cell_label(&self.config),
            runs,
        })
    }

    fn execute(&self, stage: Stage, seed: u64, inputs: &BTreeMap<Stage, PathBuf>, dir: &Path) -> Result<Extras> {
        let input = |s: Stage| inputs[&s].as_path();
        match stage {
            Stage::Preprocess => self.preprocess(dir),
            Stage::Pretrain => self.pretrain(seed, input(Stage::Preprocess), dir),
            Stage::Annotate => self.annotate(input(Stage::Preprocess), dir),
            Stage::TrainRetriever => self.train_retriever(seed, inputs, dir),
            Stage::Retrieve => self.retrieve(inputs, dir),
            Stage::Finetune => self.finetune(seed, inputs, dir),
            Stage::Evaluate => self.evaluate(inputs, dir),
        }
    }

    fn preprocess(&self, dir: &Path) -> Result<Extras> {
        let d = &self.config.data;
        let graph = if d.synthetic() {
            synth_graph(&d.synth_params(), d.synth_seed)?
        } else {
            let path = Path::new(&d.path);
            let g = parse_edge_list(&read_text(path)?).map_err(|e| match e {
                dygrag_core::Error::Parse { line, msg } => Error::Format {
                    path: path.to_path_buf(),
                    line,
                    msg,
                },
                other => other.into(),
            })?;
            bin_time_steps(g, d.steps)?
        };
        let steps = graph
            .step_count()
            .ok_or_else(|| Error::Config("graph has no time binning".into()))?;
        let sp = split(&graph, SplitSpec::for_steps(steps)?)?;
        let max_history = (d.max_history > 0).then_some(d.max_history);
        let pool = build_pool(&graph, &sp, max_history)?;
        write_text(&dir.join("node_map.txt"), &render_node_map(&graph))?;
        write_text(&dir.join("split.txt"), &render_split(&sp))?;
        write_text(&dir.join("events.txt"), &graph.to_edge_list())?;
        write_text(&dir.join("pool_train.tsv"), &render_pool(&pool.train))?;
        write_text(&dir.join("pool_val.tsv"), &render_pool(&pool.val))?;
        write_text(&dir.join("pool_test.tsv"), &render_pool(&pool.test))?;
        Ok(vec![
            kv("steps", steps),
            kv("nodes", graph.node_count()),
            kv("events", graph.events().len()),
            kv("self_loops_dropped", graph.dropped_self_loops()),
            kv("train_samples", pool.train.len()),
            kv("val_queries", pool.val.len()),
            kv("test_queries", pool.test.len()),
            kv("skipped", pool.skipped),
        ])
    }

    fn pretrain(&self, seed: u64, data_dir: &Path, dir: &Path) -> Result<Extras> {
        let data = Data::load(data_dir)?;
        let b = &self.config.backbone;
        let max_len = if b.max_len == 0 {
            data.longest() + self.config.fusion.max_new
        } else {
            b.max_len
        };
        let config = b.model_config(data.vocab.len(), max_len)?;
        let (model, report) = train_lm(&data.train, &data.vocab, config, &b.train_options(seed))?;
        let mut ckpt = model_checkpoint(&model);
        ckpt.meta.insert("losses".into(), join_f64(&report.epoch_losses));
        ckpt.save(&dir.join("backbone.ckpt"))?;
        Ok(vec![
            kv("initial_loss", report.initial_loss),
            kv("final_loss", report.final_loss()),
            kv("max_len", max_len),
        ])
    }

    fn annotate(&self, data_dir: &Path, dir: &Path) -> Result<Extras> {
        let data = Data::load(data_dir)?;
        let a = annotate_pool(&data.train, self.config.retriever.threshold);
        write_text(&dir.join("annotation.txt"), &render_annotation(&a))?;
        Ok(vec![kv("pairs", a.pair_count()), kv("without_positives", a.without_positives())])
    }

    fn train_retriever(&self, seed: u64, inputs: &BTreeMap<Stage, PathBuf>, dir: &Path) -> Result<Extras> {
        let data = Data::load(&inputs[&Stage::Preprocess])?;
        let backbone = load_model(&inputs[&Stage::Pretrain].join("backbone.ckpt"))?;
        let path = inputs[&Stage::Annotate].join("annotation.txt");
        let annotation = parse_annotation(&path, &read_text(&path)?)?;
        let cfg = self.config.retriever.core_config(seed);
        let (retriever, report) = train_retriever(&data.train, &annotation, &backbone, data.vocab, &cfg)?;
        let mut ckpt = model_checkpoint(&retriever.model).with_meta("cosine", retriever.cosine);
        ckpt.meta.insert("losses".into(), join_f64(&report.epoch_losses));
        ckpt.save(&dir.join("retriever.ckpt"))?;
        Ok(vec![kv("initial_loss", report.initial_loss), kv("final_loss", report.final_loss())])
    }

    fn retrieve(&self, inputs: &BTreeMap<Stage, PathBuf>, dir: &Path) -> Result<Extras> {
        let data = Data::load(&inputs[&Stage::Preprocess])?;
        let pool = &data.train;
        let depth = self.depth();
        let method = self.config.retriever.method.as_str();
        let trained = match inputs.get(&Stage::TrainRetriever) {
            Some(d) => {
                let ckpt = Checkpoint::load(&d.join("retriever.ckpt"))?;
                let cosine = ckpt.meta_parse("cosine").map_err(|msg| Error::Checkpoint {
                    path: d.join("retriever.ckpt"),
                    msg,
                })?;
                let r = Retriever {
                    model: model_from(&ckpt, &d.join("retriever.ckpt"))?,
                    vocab: data.vocab,
                    cosine,
                };
                let index = r.index(pool)?;
                Some((r, index))
            }
            None => None,
        };
        let rank = |qid: usize, q: &EgoSample, rule: Eligibility| -> Result<Option<RankedDemos>> {
            let r = match (method, &trained) {
                ("trained", Some((r, index))) => r.rank(qid, q, pool, index, depth, rule),
                ("bm25", _) => bm25_rank(qid, q, pool, depth, rule),
                ("jaccard", _) => jaccard_rank(qid, q, pool, depth, rule),
                ("groundtruth", _) => groundtruth_rank(qid, q, pool, depth, rule),
                _ => unreachable!("method validated with its inputs"),
            };
            match r {
                Ok(r) => Ok(Some(r)),
                Err(dygrag_core::Error::NoSignal | dygrag_core::Error::EmptyCandidates) => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let train: DemoList = pool
            .iter()
            .enumerate()
            .map(|(i, q)| Ok((i, rank(i, q, Eligibility::pool_member(i))?)))
            .collect::<Result<_>>()?;
        let test: DemoList = data
            .test
            .iter()
            .enumerate()
            .map(|(j, q)| Ok((j, rank(j, q, Eligibility::INFERENCE)?)))
            .collect::<Result<_>>()?;
        write_text(&dir.join("demos_train.txt"), &render_demos(&train))?;
        write_text(&dir.join("demos_test.txt"), &render_demos(&test))?;

        let theta = self.config.retriever.threshold;
        let runs: Vec<_> = data
            .test
            .iter()
            .zip(&test)
            .map(|(q, (_, r))| {
                let relevant = relevant_set(q, pool, theta)
                    .into_iter()
                    .filter(|i| precedes(&pool[*i], q))
                    .collect();
                (r.as_ref().map(RankedDemos::ids).unwrap_or_default(), relevant)
            })
            .collect();
        let mut metrics = String::new();
        let mut scored = runs.len();
        for k in &self.config.eval.hr_k {
            let (rate, skipped) = hit_rate(&runs, *k);
            scored = runs.len() - skipped;
            writeln!(metrics, "retrieval.hr@{k}={rate}").unwrap();
        }
        writeln!(metrics, "retrieval.scored={scored}").unwrap();
        let no_signal = test.iter().filter(|(_, r)| r.is_none()).count();
        writeln!(metrics, "retrieval.no_signal={no_signal}").unwrap();
        write_text(&dir.join("retrieval.txt"), &metrics)?;
        Ok(vec![
            kv("method", method),
            kv("no_signal_train", train.iter().filter(|(_, r)| r.is_none()).count()),
            kv("no_signal_test", no_signal),
        ])
    }

    fn finetune(&self, seed: u64, inputs: &BTreeMap<Stage, PathBuf>, dir: &Path) -> Result<Extras> {
        let data = Data::load(&inputs[&Stage::Preprocess])?;
        let backbone = load_model(&inputs[&Stage::Pretrain].join("backbone.ckpt"))?;
        let demos = load_demos(&inputs[&Stage::Retrieve].join("demos_train.txt"), data.train.len())?;
        let cfg = self.config.fusion.core_config(seed)?;
        let demos: Vec<Vec<usize>> = demos.into_iter().map(|d| d.into_iter().take(cfg.k).collect()).collect();
        let (gen, report) = finetune_generator(&data.train, &demos, &backbone, data.vocab, cfg)?;
        let mut ckpt = model_checkpoint(&gen.model);
        for (k, v) in fusion_meta(&gen.config) {
            ckpt.meta.insert(k, v);
        }
        ckpt.meta.insert("losses".into(), join_f64(&report.losses.epoch_losses));
        ckpt.save(&dir.join("generator.ckpt"))?;
        Ok(vec![
            kv("initial_loss", report.losses.initial_loss),
            kv("final_loss", report.losses.final_loss()),
            kv("truncated", report.truncated),
        ])
    }

    fn evaluate(&self, inputs: &BTreeMap<Stage, PathBuf>, dir: &Path) -> Result<Extras> {
        let data = Data::load(&inputs[&Stage::Preprocess])?;
        let backbone = load_model(&inputs[&Stage::Pretrain].join("backbone.ckpt"))?;
        let gen_path = inputs[&Stage::Finetune].join("generator.ckpt");
        let ckpt = Checkpoint::load(&gen_path)?;
        let gen = Generator {
            model: model_from(&ckpt, &gen_path)?,
            vocab: data.vocab,
            config: fusion_from(&ckpt).map_err(|msg| Error::Checkpoint {
                path: gen_path.clone(),
                msg,
            })?,
        };
        let retrieve_dir = &inputs[&Stage::Retrieve];
        let demos = load_demos(&retrieve_dir.join("demos_test.txt"), data.test.len())?;
        let k = self.config.eval.k;
        let mut rag = Vec::new();
        let mut base = Vec::new();
        let mut truth = Vec::new();
        for (j, q) in data.test.iter().enumerate() {
            let refs: Vec<&EgoSample> = demos[j].iter().map(|i| &data.train[*i]).collect();
            rag.push((j, gen.predict(q, &refs, gen.config.k)?));
            let generated = backbone.generate(&data.vocab, &q.x, q.prediction_step, gen.config.max_new, None)?;
            base.push((j, ranked_nodes(&generated)));
            truth.push((j, q.y_nodes()));
        }
        let rag_report = evaluate_run(&rag, &truth, k)?;
        let base_report = evaluate_run(&base, &truth, k)?;
        write_text(&dir.join("predictions.txt"), &render_node_lists(&rag))?;
        write_text(&dir.join("backbone_predictions.txt"), &render_node_lists(&base))?;
        let truth_rows: Vec<(usize, Vec<usize>)> = truth.iter().map(|(q, t)| (*q, t.iter().copied().collect())).collect();
        write_text(&dir.join("truth.txt"), &render_node_lists(&truth_rows))?;

        let mut table = format!("query\t{}\n", METRIC_NAMES.map(|m| format!("{m}@{k}")).join("\t"));
        for r in &rag_report.records {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(table, "{}\t{}", r.query, vals.join("\t")).unwrap();
        }
        write_text(&dir.join("per_query.tsv"), &table)?;

        let mut metrics = String::new();
        for (prefix, report) in [("rag", &rag_report), ("backbone", &base_report)] {
            for (name, s) in METRIC_NAMES.iter().zip(&report.summary) {
                writeln!(metrics, "{prefix}.{name}@{k}={}", s.mean).unwrap();
            }
        }
        writeln!(metrics, "scored={}", rag_report.records.len()).unwrap();
        writeln!(metrics, "skipped={}", rag_report.skipped.len()).unwrap();
        metrics.push_str(&read_text(&retrieve_dir.join("retrieval.txt"))?);
        write_text(&dir.join("metrics.txt"), &metrics)?;
        Ok(vec![kv("scored", rag_report.records.len()), kv("skipped", rag_report.skipped.len())])
    }
}

/// Row label naming the four matrix axes of a configuration.
pub fn cell_label(c: &PipelineConfig) -> String {
    let ablation = match (c.retriever.use_ccl, c.retriever.use_decay) {
        (true, true) => "full",
        (false, true) => "no-ccl",
        (true, false) => "no-decay",
        (false, false) => "no-ccl+no-decay",
    };
    format!(
        "k={} ablation={ablation} strategy={} retriever={}",
        c.fusion.k, c.fusion.strategy, c.retriever.method
    )
}

/// One configuration per cell of the cartesian product of the matrix axes.
pub fn matrix_cells(base: &PipelineConfig) -> Vec<PipelineConfig> {
    let m = &base.matrix;
    let or_base = |v: &[String], b: &str| if v.is_empty() { vec![b.to_string()] } else { v.to_vec() };
    let ks = if m.k.is_empty() { vec![base.fusion.k] } else { m.k.clone() };
    let ablations: Vec<Option<String>> = if m.ablations.is_empty() {
        vec![None]
    } else {
        m.ablations.iter().cloned().map(Some).collect()
    };
    let mut cells = Vec::new();
    for retriever in or_base(&m.retrievers, &base.retriever.method) {
        for strategy in or_base(&m.strategies, &base.fusion.strategy) {
            for ablation in &ablations {
                for k in &ks {
                    let mut c = base.clone();
                    c.matrix = Default::default();
                    c.retriever.method = retriever.clone();
                    c.fusion.strategy = strategy.clone();
                    c.fusion.k = *k;
                    match ablation.as_deref() {
                        Some("full") => (c.retriever.use_ccl, c.retriever.use_decay) = (true, true),
                        Some("no-ccl") => (c.retriever.use_ccl, c.retriever.use_decay) = (false, true),
                        Some("no-decay") => (c.retriever.use_ccl, c.retriever.use_decay) = (true, false),
                        _ => {}
                    }
                    cells.push(c);
                }
            }
        }
    }
    cells
}

/// Runs every matrix cell over every seed. Cells run one after another and
/// share cached upstream stages through the common output directory.
pub fn run_matrix(base: &PipelineConfig, verbose: bool) -> Result<String> {
    let mut rows = Vec::new();
    for cell in matrix_cells(base) {
        let mut p = Pipeline::new(cell)?;
        p.verbose = verbose;
        rows.push(p.run_row()?);
    }
    let text = emit_report(&rows)?;
    write_text(&PathBuf::from(&base.run.out_dir).join("matrix_report.txt"), &text)?;
    Ok(text)
}

fn kv(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

struct Data {
    vocab: Vocab,
    train: Vec<EgoSample>,
    test: Vec<EgoSample>,
    longest: usize,
}

impl Data {
    fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let field = |k: &str| -> Result<usize> {
            manifest
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: dir.join(MANIFEST),
                    line: 0,
                    msg: format!("missing numeric `{k}`"),
                })
        };
        let vocab = Vocab::new(field("steps")?, field("nodes")?);
        let pool = |name: &str| -> Result<Vec<EgoSample>> {
            let p = dir.join(name);
            parse_pool(&p, &read_text(&p)?)
        };
        let train = pool("pool_train.tsv")?;
        let val = pool("pool_val.tsv")?;
        let test = pool("pool_test.tsv")?;
        let longest = train.iter().chain(&val).chain(&test).map(|s| s.full().len()).max().unwrap_or(0);
        Ok(Self {
            vocab,
            train,
            test,
            longest,
        })
    }

    fn longest(&self) -> usize {
        self.longest
    }
}

/// `key = value` lines of a stage manifest.
pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(&dir.join(MANIFEST))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn load_demos(path: &Path, expected: usize) -> Result<Vec<Vec<usize>>> {
    let rows = parse_demos(path, &read_text(path)?)?;
    if rows.len() != expected || rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("expected demonstrations for ids 0..{expected}"),
        });
    }
    Ok(rows.into_iter().map(|(_, r)| r.map(|r| r.ids()).unwrap_or_default()).collect())
}

fn model_checkpoint(model: &SequenceModel) -> Checkpoint {
    let c = model.config;
    Checkpoint::new(model.params.clone())
        .with_meta("layers", c.layers)
        .with_meta("heads", c.heads)
        .with_meta("hidden_dim", c.hidden_dim)
        .with_meta("max_len", c.max_len)
        .with_meta("dropout", c.dropout)
        .with_meta("vocab_size", c.vocab_size)
}

fn model_from(ckpt: &Checkpoint, path: &Path) -> Result<SequenceModel> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let config = BackboneConfig {
        layers: ckpt.meta_parse("layers").map_err(bad)?,
        heads: ckpt.meta_parse("heads").map_err(bad)?,
        hidden_dim: ckpt.meta_parse("hidden_dim").map_err(bad)?,
        max_len: ckpt.meta_parse("max_len").map_err(bad)?,
        dropout: ckpt.meta_parse("dropout").map_err(bad)?,
        vocab_size: ckpt.meta_parse("vocab_size").map_err(bad)?,
    };
    Ok(SequenceModel::from_params(config, ckpt.params.clone())?)
}

pub fn load_model(path: &Path) -> Result<SequenceModel> {
    model_from(&Checkpoint::load(path)?, path)
}

fn fusion_meta(c: &FusionConfig) -> Vec<(String, String)> {
    vec![
        kv("fusion.strategy", c.strategy.name()),
        kv("fusion.k", c.k),
        kv("fusion.prefix_len", c.prefix_len),
        kv("fusion.include_outputs", c.include_outputs),
        kv("fusion.prefix_positional", c.prefix_positional),
        kv("fusion.max_new", c.max_new),
    ]
}

fn fusion_from(ckpt: &Checkpoint) -> std::result::Result<FusionConfig, String> {
    Ok(FusionConfig {
        strategy: Strategy::parse(ckpt.meta_value("fusion.strategy")?).map_err(|e| e.to_string())?,
        k: ckpt.meta_parse("fusion.k")?,
        prefix_len: ckpt.meta_parse("fusion.prefix_len")?,
        include_outputs: ckpt.meta_parse("fusion.include_outputs")?,
        prefix_positional: ckpt.meta_parse("fusion.prefix_positional")?,
        max_new: ckpt.meta_parse("fusion.max_new")?,
        ..FusionConfig::default()
    })
}
