use crate::config::Settings;
use crate::{Cli, Command, OUTPUT_ENV};
use dtam::checkpoint::Checkpoint;
use dtam::corpus::ingest::write_jsonl;
use dtam::corpus::pipeline::encode_document;
use dtam::corpus::{
    ingest_jsonl, prepare_corpus, random_split, read_jsonl, tokenize, CorpusTimeline, Document, Granularity,
    IngestFilters, LabelScaler, PrepareConfig, SliceClock, SplitRatios, VocabConfig, Vocabulary,
};
use dtam::dtm::top_words;
use dtam::forecast::{predict_future, predictions_csv, ForecastConfig, LatentPath, RolloutMode};
use dtam::metrics::{evaluate, EvalConfig};
use dtam::model::{HeadKind, Model, ModelConfig};
use dtam::synthgen::{sample_scenario, Dynamics, ScenarioConfig};
use dtam::trainer::{grid_search, leaderboard_csv, train, GridSpace, TrainConfig, TrainError, TrainOutcome};
use dtam::DtamError;
use dtam_numcore::prob::Noise;
use dtam_numcore::{Graph, ParamStore, Tensor};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn data(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

impl From<DtamError> for Failure {
    fn from(e: DtamError) -> Self {
        let code = match e {
            DtamError::Config(_) => 1,
            DtamError::NonFinite(_) | DtamError::Num(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Prefixes an error with the file or directory it concerns.
fn at(path: &Path) -> impl Fn(DtamError) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, contents).map_err(io(path))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Failure> {
    value
        .trim()
        .parse()
        .map_err(|_| usage(format!("cannot parse {key} = {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, Failure> {
    value.split(',').map(|v| parse(key, v)).collect()
}

struct Ctx {
    settings: Settings,
    out: PathBuf,
    deterministic: bool,
}

impl Ctx {
    fn data_dir(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.out.join("data"))
    }

    fn model_dir(&self, given: Option<PathBuf>) -> PathBuf {
        given.unwrap_or_else(|| self.out.join("model"))
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let Some(command) = cli.command else {
        return Err(usage("no subcommand given; see --help"));
    };
    let mut settings = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Settings::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Settings::default(),
    };
    for o in &cli.overrides {
        settings.apply_override(o).map_err(|e| usage(e.to_string()))?;
    }
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli
        .out
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dtam-out"));
    let ctx = Ctx {
        settings,
        out,
        deterministic: cli.deterministic,
    };
    match command {
        Command::Sample => sample(&ctx),
        Command::Ingest { input } => ingest(&ctx, &input),
        Command::Train { data } => train_cmd(&ctx, &ctx.data_dir(data)),
        Command::Gridsearch { data } => gridsearch(&ctx, &ctx.data_dir(data)),
        Command::Eval { data, model } => eval(&ctx, &ctx.data_dir(data), &ctx.model_dir(model)),
        Command::Predict { input, data, model } => predict(&ctx, &input, &ctx.data_dir(data), &ctx.model_dir(model)),
        Command::Topics { data, model, n } => topics(&ctx, &ctx.data_dir(data), &ctx.model_dir(model), n),
        Command::Timeline { data, model } => timeline(&ctx, &ctx.data_dir(data), &ctx.model_dir(model)),
    }
}

fn scenario(settings: &Settings) -> Result<ScenarioConfig, Failure> {
    let seed = settings.get("sample", "seed").map(|s| parse("seed", s)).transpose()?.unwrap_or(0);
    let mut c = match settings.get("sample", "preset").unwrap_or("drift") {
        "drift" => ScenarioConfig::drift(seed),
        "stationary" => ScenarioConfig::stationary(seed),
        other => return Err(usage(format!("unknown preset {other:?}; expected drift or stationary"))),
    };
    for (k, v) in settings.section("sample") {
        match k {
            "preset" | "seed" => {}
            "k" => c.k = parse(k, v)?,
            "v" => c.v = parse(k, v)?,
            "e" => c.e = parse(k, v)?,
            "t" => c.t = parse(k, v)?,
            "docs_per_slice" => c.docs_per_slice = parse(k, v)?,
            "tokens_per_doc" => c.tokens_per_doc = parse(k, v)?,
            "dynamics" => {
                c.dynamics = v
                    .split(',')
                    .map(|d| Dynamics::from_str(d.trim()))
                    .collect::<Result<_, _>>()?
            }
            "rating_weights" => c.rating_weights = parse_list(k, v)?,
            "rating_noise_std" => c.rating_noise_std = parse(k, v)?,
            "amplitude" => c.amplitude = parse(k, v)?,
            "eta_noise" => c.eta_noise = parse(k, v)?,
            "zeta_std" => c.zeta_std = parse(k, v)?,
            "embedding_scale" => c.embedding_scale = parse(k, v)?,
            "planted_words" => c.planted_words = Some(parse(k, v)?),
            _ => return Err(usage(format!("unknown [sample] key {k:?}"))),
        }
    }
    Ok(c)
}

fn sample(ctx: &Ctx) -> Result<(), Failure> {
    let c = scenario(&ctx.settings)?;
    let s = sample_scenario(&c)?;
    let dir = ctx.out.join("sample");
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &s.raw)?;
    write(&dir.join("posts.jsonl"), buf)?;
    write(&dir.join("latents.json"), s.latents.to_json())?;
    println!("sampled {} documents over {} slices into {}", s.raw.len(), c.t, dir.display());
    Ok(())
}

fn prepare_config(settings: &Settings) -> Result<(PrepareConfig, IngestFilters), Failure> {
    let mut p = PrepareConfig::default();
    let mut vocab = VocabConfig::default();
    let mut filters = IngestFilters::default();
    for (k, v) in settings.section("ingest") {
        match k {
            "granularity" => p.granularity = Granularity::from_str(v)?,
            "n_prediction" => p.n_prediction = parse(k, v)?,
            "subsample_per_slice" => p.subsample_per_slice = Some(parse(k, v)?),
            "min_df" => vocab.min_df = parse(k, v)?,
            "max_vocab" => vocab.max_size = parse(k, v)?,
            "lm_min_count" => p.lm_min_count = parse(k, v)?,
            "max_len" => p.max_len = parse(k, v)?,
            "label_cap" => p.label_cap = parse(k, v)?,
            "seed" => p.seed = parse(k, v)?,
            "min_words" => filters.min_words = parse(k, v)?,
            "automated_authors" => {
                filters.automated_authors = v.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect()
            }
            _ => return Err(usage(format!("unknown [ingest] key {k:?}"))),
        }
    }
    p.vocab = vocab;
    Ok((p, filters))
}

struct Data {
    tm: Vocabulary,
    lm: Vocabulary,
    scaler: LabelScaler,
    clock: SliceClock,
    max_len: usize,
    up_to_date: CorpusTimeline,
    prediction: CorpusTimeline,
}

fn ingest(ctx: &Ctx, input: &Path) -> Result<(), Failure> {
    let (cfg, filters) = prepare_config(&ctx.settings)?;
    let raw = ingest_jsonl(input, &filters).map_err(at(input))?;
    let earliest = raw
        .iter()
        .map(|d| d.timestamp)
        .min()
        .ok_or_else(|| data(format!("{}: no documents survived the filters", input.display())))?;
    let clock = SliceClock::anchored(cfg.granularity, earliest);
    let p = prepare_corpus(raw, &cfg)?;
    let dir = ctx.out.join("data");
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    p.tm_vocab.save(&dir.join("tm_vocab.tsv"))?;
    p.lm_vocab.save(&dir.join("lm_vocab.tsv"))?;
    p.up_to_date.save(&dir.join("up_to_date"))?;
    p.prediction.save(&dir.join("prediction"))?;
    write(
        &dir.join("corpus.conf"),
        format!(
            "[corpus]\ngranularity = {}\norigin = {}\nmax_len = {}\nlabel_min = {}\nlabel_max = {}\n",
            clock.granularity, clock.origin, cfg.max_len, p.scaler.min, p.scaler.max
        ),
    )?;
    let mut warnings = p.warnings.join("\n");
    if !warnings.is_empty() {
        warnings.push('\n');
    }
    write(&dir.join("warnings.txt"), warnings)?;
    println!(
        "{} history and {} prediction documents, V = {}, LM vocabulary {} -> {}",
        p.up_to_date.num_docs(),
        p.prediction.num_docs(),
        p.tm_vocab.len(),
        p.lm_vocab.len(),
        dir.display()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<Data, Failure> {
    let conf_path = dir.join("corpus.conf");
    let text = fs::read_to_string(&conf_path).map_err(io(&conf_path))?;
    let conf = Settings::parse(&text).map_err(|e| data(format!("{}: {e}", conf_path.display())))?;
    let field = |k: &str| {
        conf.get("corpus", k)
            .ok_or_else(|| data(format!("{}: missing {k}", conf_path.display())))
    };
    let as_data = |f: Failure| data(format!("{}: {}", conf_path.display(), f.message));
    let granularity = Granularity::from_str(field("granularity")?)?;
    let clock = SliceClock {
        granularity,
        origin: parse("origin", field("origin")?).map_err(as_data)?,
    };
    let scaler = LabelScaler::new(
        parse("label_min", field("label_min")?).map_err(as_data)?,
        parse("label_max", field("label_max")?).map_err(as_data)?,
    )?;
    let file = |name: &str| dir.join(name);
    Ok(Data {
        tm: Vocabulary::load(&file("tm_vocab.tsv")).map_err(at(&file("tm_vocab.tsv")))?,
        lm: Vocabulary::load(&file("lm_vocab.tsv")).map_err(at(&file("lm_vocab.tsv")))?,
        scaler,
        clock,
        max_len: parse("max_len", field("max_len")?).map_err(as_data)?,
        up_to_date: CorpusTimeline::load(&file("up_to_date")).map_err(at(&file("up_to_date")))?,
        prediction: CorpusTimeline::load(&file("prediction")).map_err(at(&file("prediction")))?,
    })
}

fn base_train_config(ctx: &Ctx, d: &Data) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::new(ModelConfig::new(HeadKind::Attention, 30, d.tm.len(), d.lm.len()));
    for (k, v) in ctx.settings.section("train") {
        if k == "v" || k == "lm_vocab" {
            return Err(usage(format!("{k} is fixed by the ingested vocabulary")));
        }
        cfg.set(k, v)?;
    }
    if ctx.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_split(cfg: &TrainConfig, d: &Data) -> Result<(CorpusTimeline, CorpusTimeline), Failure> {
    let split = random_split(&d.up_to_date, SplitRatios::default(), cfg.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    Ok((split.train, split.val))
}

fn save_outcome(ctx: &Ctx, dir: &Path, cfg: &TrainConfig, d: &Data, out: &TrainOutcome, history: &CorpusTimeline) -> Result<(), Failure> {
    let ck = Checkpoint {
        config: cfg.model.clone(),
        params: out.params.clone(),
        tm_vocab_hash: d.tm.content_hash(),
        lm_vocab_hash: d.lm.content_hash(),
    };
    ck.save(dir)?;
    let mut h = out.history.clone();
    if ctx.deterministic {
        // Wall time is the one nondeterministic column.
        for e in &mut h.epochs {
            e.seconds = 0.0;
        }
    }
    write(&dir.join("history.csv"), h.to_csv())?;
    history.save(&dir.join("history"))?;
    let mut conf = String::from("[train]\n");
    for (k, v) in cfg.to_kv() {
        writeln!(conf, "{k} = {v}").expect("string write");
    }
    write(&dir.join("train.conf"), conf)
}

fn train_cmd(ctx: &Ctx, data_dir: &Path) -> Result<(), Failure> {
    let d = load_data(data_dir)?;
    let cfg = base_train_config(ctx, &d)?;
    let (train_tl, val_tl) = training_split(&cfg, &d)?;
    let val: Vec<&Document> = val_tl.documents().collect();
    let dir = ctx.out.join("model");
    match train(&cfg, &train_tl, &val) {
        Ok(out) => {
            save_outcome(ctx, &dir, &cfg, &d, &out, &train_tl)?;
            println!(
                "best epoch {} of {}, validation RMSE {:.5} -> {}",
                out.best_epoch,
                out.history.epochs.len(),
                out.best_val_rmse,
                dir.display()
            );
            Ok(())
        }
        Err(TrainError::Diverged { epoch, message, last_good }) => {
            save_outcome(ctx, &dir, &cfg, &d, &last_good, &train_tl)?;
            Err(Failure {
                code: 3,
                message: format!("training diverged at epoch {epoch}: {message}; last good checkpoint saved to {}", dir.display()),
            })
        }
        Err(TrainError::Other(e)) => Err(e.into()),
    }
}

fn gridsearch(ctx: &Ctx, data_dir: &Path) -> Result<(), Failure> {
    let d = load_data(data_dir)?;
    let cfg = base_train_config(ctx, &d)?;
    let (train_tl, val_tl) = training_split(&cfg, &d)?;
    let val: Vec<&Document> = val_tl.documents().collect();
    let axes = ctx.settings.section("grid");
    let space = if axes.is_empty() {
        GridSpace::default_grid()
    } else {
        axes.iter().fold(GridSpace::default(), |s, (k, v)| {
            let values: Vec<&str> = v.split(',').map(str::trim).collect();
            s.axis(k, &values)
        })
    };
    let (best, board) = grid_search(&cfg, &space, &train_tl, &val)?;
    let dir = ctx.out.join("gridsearch");
    write(&dir.join("leaderboard.csv"), leaderboard_csv(&board))?;
    let mut conf = String::from("[train]\n");
    for (k, v) in best.to_kv() {
        writeln!(conf, "{k} = {v}").expect("string write");
    }
    write(&dir.join("best.conf"), conf)?;
    println!("{} cells ranked -> {}", board.len(), dir.display());
    Ok(())
}

fn forecast_config(settings: &Settings) -> Result<(ForecastConfig, usize, bool), Failure> {
    let mut f = EvalConfig::default();
    for (k, v) in settings.section("eval") {
        match k {
            "n_samples" => f.forecast.n_samples = parse(k, v)?,
            "mode" => f.forecast.mode = RolloutMode::from_str(v)?,
            "condition_future_bow" => f.forecast.condition_future_bow = parse(k, v)?,
            "noise_free" => f.forecast.noise_free = parse(k, v)?,
            "seed" => f.forecast.seed = parse(k, v)?,
            "top_n" => f.top_n = parse(k, v)?,
            "with_perplexity" => f.with_perplexity = parse(k, v)?,
            _ => return Err(usage(format!("unknown [eval] key {k:?}"))),
        }
    }
    f.forecast.validate()?;
    Ok((f.forecast, f.top_n, f.with_perplexity))
}

struct Trained {
    model: Model,
    params: ParamStore,
    history: CorpusTimeline,
}

fn load_model(model_dir: &Path, d: &Data) -> Result<Trained, Failure> {
    let ck = Checkpoint::load_for(model_dir, &d.tm.content_hash(), &d.lm.content_hash()).map_err(at(model_dir))?;
    let history_dir = model_dir.join("history");
    Ok(Trained {
        model: ck.model()?,
        params: ck.params,
        history: CorpusTimeline::load(&history_dir).map_err(at(&history_dir))?,
    })
}

fn eval(ctx: &Ctx, data_dir: &Path, model_dir: &Path) -> Result<(), Failure> {
    let d = load_data(data_dir)?;
    let t = load_model(model_dir, &d)?;
    let (forecast, top_n, with_perplexity) = forecast_config(&ctx.settings)?;
    let cfg = EvalConfig {
        forecast,
        top_n,
        with_perplexity,
    };
    let (report, preds) = evaluate(&t.model, &t.params, &t.history, &d.prediction, &cfg)?;
    let docs: Vec<&Document> = d.prediction.documents().collect();
    let known: Vec<Option<f64>> = docs.iter().map(|d| Some(d.rating)).collect();
    let dir = ctx.out.join("eval");
    write(&dir.join("report.txt"), report.to_kv_text())?;
    write(&dir.join("per_slice.csv"), report.per_slice_csv())?;
    write(&dir.join("predictions.csv"), predictions_csv(&docs, &preds, &known))?;
    print!("{}", report.to_kv_text());
    Ok(())
}

/// Reads future documents; `label` may be absent.
fn read_future(path: &Path, d: &Data) -> Result<(Vec<Document>, Vec<Option<f64>>), Failure> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut filled = String::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| data(format!("{}: line {}: malformed JSON: {e}", path.display(), n + 1)))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| data(format!("{}: line {}: record is not a JSON object", path.display(), n + 1)))?;
        labels.push(obj.get("label").and_then(|l| l.as_f64()));
        obj.entry("label").or_insert(serde_json::json!(0.0));
        filled.push_str(&v.to_string());
        filled.push('\n');
    }
    let keep_all = IngestFilters {
        min_words: 0,
        automated_authors: Vec::new(),
    };
    let raw = read_jsonl(filled.as_bytes(), &keep_all)?;
    let first = d.up_to_date.start_index();
    let mut docs = Vec::with_capacity(raw.len());
    let mut known = Vec::with_capacity(raw.len());
    for (r, label) in raw.into_iter().zip(labels) {
        if r.timestamp < d.clock.origin {
            return Err(data(format!("document {} predates the corpus", r.id)));
        }
        let tokens = tokenize(&r.text);
        let scaled = label.map(|l| d.scaler.transform_clamped(l));
        let mut doc = encode_document(r.id, &tokens, r.timestamp, scaled.unwrap_or(0.0), &d.tm, &d.lm, d.max_len);
        doc.time_index = d.clock.index(r.timestamp).max(first);
        docs.push(doc);
        known.push(scaled);
    }
    Ok((docs, known))
}

fn predict(ctx: &Ctx, input: &Path, data_dir: &Path, model_dir: &Path) -> Result<(), Failure> {
    let d = load_data(data_dir)?;
    let t = load_model(model_dir, &d)?;
    let (forecast, ..) = forecast_config(&ctx.settings)?;
    let (docs, known) = read_future(input, &d)?;
    let refs: Vec<&Document> = docs.iter().collect();
    let h = t.model.history(&t.history);
    let preds = predict_future(&t.model, &t.params, &h, &refs, &forecast)?;
    let path = ctx.out.join("predict").join("predictions.csv");
    write(&path, predictions_csv(&refs, &preds, &known))?;
    println!("{} predictions -> {}", preds.len(), path.display());
    Ok(())
}

fn topics(ctx: &Ctx, data_dir: &Path, model_dir: &Path, n: usize) -> Result<(), Failure> {
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let d = load_data(data_dir)?;
    let t = load_model(model_dir, &d)?;
    let beta = t.model.beta_for(&t.params, None)?;
    let mut s = String::new();
    for (k, ids) in top_words(&beta, d.tm.tokens(), n).iter().enumerate() {
        let words: Vec<&str> = ids.iter().map(|&i| d.tm.token(i)).collect();
        writeln!(s, "{k}\t{}", words.join(" ")).expect("string write");
    }
    write(&ctx.out.join("topics.tsv"), &s)?;
    print!("{s}");
    Ok(())
}

fn timeline(ctx: &Ctx, data_dir: &Path, model_dir: &Path) -> Result<(), Failure> {
    let d = load_data(data_dir)?;
    let t = load_model(model_dir, &d)?;
    let h = t.model.history(&t.history);
    let k = t.model.config.dtm.k;
    let v = t.model.config.dtm.v;
    let last = t.history.start_index() + t.history.num_slices() - 1;
    let path = LatentPath::draw(&t.model, &t.params, &h, last, RolloutMode::Mean, &mut Noise::Zero)?;
    let mut csv = String::from("time_index,topic,n_docs,mean,lower,upper\n");
    for (local, slice) in t.history.slices().iter().enumerate() {
        let time_index = t.history.start_index() + local;
        let mut sums = vec![(0.0, 0.0); k];
        if !slice.is_empty() {
            let row = path.row(&h, time_index)?;
            let eta = Tensor::from_rows(&vec![path.eta[row].clone(); slice.len()]).map_err(DtamError::from)?;
            let counts: Vec<Vec<f64>> = slice.iter().map(|doc| doc.bow.to_dense(v)).collect();
            let mut g = Graph::new();
            let (theta, ..) = t.model.theta_posterior(&mut g, &t.params, &eta, &counts, &mut Noise::Zero)?;
            let theta = g.value(theta);
            for r in 0..theta.rows() {
                for (j, s) in sums.iter_mut().enumerate() {
                    let x = theta.get(r, j);
                    s.0 += x;
                    s.1 += x * x;
                }
            }
        }
        let n = slice.len() as f64;
        for (j, (s1, s2)) in sums.into_iter().enumerate() {
            if slice.is_empty() {
                writeln!(csv, "{time_index},{j},0,NA,NA,NA").expect("string write");
                continue;
            }
            let mean = s1 / n;
            let sd = (s2 / n - mean * mean).max(0.0).sqrt();
            writeln!(csv, "{time_index},{j},{},{mean},{},{}", slice.len(), mean - 2.0 * sd, mean + 2.0 * sd)
                .expect("string write");
        }
    }
    let out = ctx.out.join("timeline.csv");
    write(&out, csv)?;
    println!("{} slices x {k} topics -> {}", t.history.num_slices(), out.display());
    Ok(())
}
