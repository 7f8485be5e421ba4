//! One function per subcommand. Each returns the JSON object that `main`
//! prints on stdout; anything human-oriented goes to stderr from here.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use serde::Deserialize;
use serde_json::{json, Value};

use sae_steer_core::autointerp::{self, HttpLabelClient, LabelClient, MockLabelClient};
use sae_steer_core::store::{self, EmbeddingDataset, RecordMeta};
use sae_steer_core::styling::{self, ConceptMatrix};
use sae_steer_core::train::{self, TrainConfig};
use sae_steer_core::{diagnostics, sae, Error, Result};

use crate::{
    Command, DiagArgs, EncodeArgs, ExemplarsArgs, IngestArgs, LabelArgs, ProfileBuildArgs,
    ProfileDiffArgs, SteerArgs, TrainArgs,
};

pub(crate) fn run(command: Command) -> Result<Value> {
    match command {
        Command::Ingest(args) => ingest(args),
        Command::Train(args) => train_cmd(args),
        Command::Diag(args) => diag(args),
        Command::Encode(args) => encode(args),
        Command::ProfileBuild(args) => profile_build(args),
        Command::ProfileDiff(args) => profile_diff(args),
        Command::Steer(args) => steer(args),
        Command::InterpExemplars(args) => interp_exemplars(args),
        Command::InterpLabel(args) => interp_label(args),
    }
}

#[derive(Deserialize)]
struct IngestRecord {
    id: String,
    #[serde(default)]
    uri: Option<String>,
    embedding: Vec<f32>,
}

fn ingest(args: IngestArgs) -> Result<Value> {
    let file = File::open(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let reader = BufReader::new(file);

    let mut dim: Option<usize> = None;
    let mut flat: Vec<f32> = Vec::new();
    let mut manifest: Vec<RecordMeta> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&args.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let rec: IngestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{lineno}: {e}", args.input.display())))?;
        let d = *dim.get_or_insert(rec.embedding.len());
        if rec.embedding.len() != d {
            return Err(Error::invalid(format!(
                "{}:{lineno}: embedding has {} values, expected {d}",
                args.input.display(),
                rec.embedding.len()
            )));
        }
        manifest.push(RecordMeta {
            row: manifest.len(),
            id: rec.id,
            uri: rec.uri,
        });
        flat.extend_from_slice(&rec.embedding);
    }
    let Some(dim) = dim else {
        return Err(Error::invalid(format!(
            "{}: no records to ingest",
            args.input.display()
        )));
    };
    if dim == 0 {
        return Err(Error::invalid(format!(
            "{}: embeddings are zero-dimensional",
            args.input.display()
        )));
    }

    let rows_in = manifest.len();
    let data = Array2::from_shape_vec((rows_in, dim), flat).expect("rows built consistently");
    let dataset = EmbeddingDataset::new(data, manifest)?;
    let kept = store::dedup(&dataset);
    if kept.count() < rows_in {
        eprintln!("dropped {} duplicate records", rows_in - kept.count());
    }
    store::write_dataset(&kept, &args.out)?;
    Ok(json!({
        "out": args.out.display().to_string(),
        "rows_in": rows_in,
        "rows_kept": kept.count(),
        "dim": dim,
    }))
}

/// Training settings collected from the config file and the flags, each
/// still optional. Flags overwrite file values; `finalize` supplies defaults
/// for the tunables and insists on the six fields with no sane default.
#[derive(Default)]
struct TrainOverrides {
    dict_size: Option<usize>,
    k: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    warmup_steps: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    weight_decay: Option<f64>,
    lambda: Option<f64>,
    dead_window_batches: Option<usize>,
    normalize_inputs: Option<bool>,
    renormalize_decoder: Option<bool>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("config key {key}: cannot parse {value:?}: {e}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid(format!(
            "config key {key}: expected true or false, got {value:?}"
        ))),
    }
}

impl TrainOverrides {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dict_size" => self.dict_size = Some(parse_value(key, value)?),
            "k" => self.k = Some(parse_value(key, value)?),
            "epochs" => self.epochs = Some(parse_value(key, value)?),
            "batch_size" => self.batch_size = Some(parse_value(key, value)?),
            "lr" => self.lr = Some(parse_value(key, value)?),
            "seed" => self.seed = Some(parse_value(key, value)?),
            "warmup_steps" => self.warmup_steps = Some(parse_value(key, value)?),
            "beta1" => self.beta1 = Some(parse_value(key, value)?),
            "beta2" => self.beta2 = Some(parse_value(key, value)?),
            "weight_decay" => self.weight_decay = Some(parse_value(key, value)?),
            "lambda" => self.lambda = Some(parse_value(key, value)?),
            "dead_window_batches" => self.dead_window_batches = Some(parse_value(key, value)?),
            "normalize_inputs" => self.normalize_inputs = Some(parse_flag(key, value)?),
            "renormalize_decoder" => self.renormalize_decoder = Some(parse_flag(key, value)?),
            _ => {
                return Err(Error::invalid(format!(
                    "config key {key:?} is not a training setting"
                )))
            }
        }
        Ok(())
    }

    fn require<T>(value: Option<T>, name: &str, flag: &str) -> Result<T> {
        value.ok_or_else(|| {
            Error::invalid(format!(
                "{name} is required: pass --{flag} or set {name} in the config file"
            ))
        })
    }

    fn finalize(self) -> Result<TrainConfig> {
        let mut config = TrainConfig::new(
            Self::require(self.dict_size, "dict_size", "dict")?,
            Self::require(self.k, "k", "k")?,
            Self::require(self.epochs, "epochs", "epochs")?,
            Self::require(self.batch_size, "batch_size", "batch")?,
            Self::require(self.lr, "lr", "lr")?,
            Self::require(self.seed, "seed", "seed")?,
        );
        if let Some(v) = self.warmup_steps {
            config.warmup_steps = v;
        }
        if let Some(v) = self.beta1 {
            config.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            config.beta2 = v;
        }
        if let Some(v) = self.weight_decay {
            config.weight_decay = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.dead_window_batches {
            config.dead_window_batches = v;
        }
        if let Some(v) = self.normalize_inputs {
            config.normalize_inputs = v;
        }
        if let Some(v) = self.renormalize_decoder {
            config.renormalize_decoder = v;
        }
        config.validate()?;
        Ok(config)
    }
}

fn train_cmd(args: TrainArgs) -> Result<Value> {
    let mut overrides = TrainOverrides::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value) in train::parse_config_overrides(&text)? {
            overrides.set(&key, &value)?;
        }
    }
    if let Some(v) = args.dict {
        overrides.dict_size = Some(v);
    }
    if let Some(v) = args.k {
        overrides.k = Some(v);
    }
    if let Some(v) = args.epochs {
        overrides.epochs = Some(v);
    }
    if let Some(v) = args.batch {
        overrides.batch_size = Some(v);
    }
    if let Some(v) = args.lr {
        overrides.lr = Some(v);
    }
    if let Some(v) = args.seed {
        overrides.seed = Some(v);
    }
    if let Some(v) = args.warmup {
        overrides.warmup_steps = Some(v);
    }
    if let Some(v) = args.beta1 {
        overrides.beta1 = Some(v);
    }
    if let Some(v) = args.beta2 {
        overrides.beta2 = Some(v);
    }
    if let Some(v) = args.weight_decay {
        overrides.weight_decay = Some(v);
    }
    if let Some(v) = args.lambda {
        overrides.lambda = Some(v);
    }
    if let Some(v) = args.dead_window {
        overrides.dead_window_batches = Some(v);
    }
    // Bare flags can only switch a feature on; absence defers to the file.
    if args.normalize_inputs {
        overrides.normalize_inputs = Some(true);
    }
    if args.renormalize_decoder {
        overrides.renormalize_decoder = Some(true);
    }
    let config = overrides.finalize()?;

    let dataset = store::read_dataset(&args.data)?;
    eprintln!(
        "training: {} rows of dim {}, dict {}, k {}",
        dataset.count(),
        dataset.dim(),
        config.dict_size,
        config.k
    );
    let start = Instant::now();
    let (model, history) = train::train(&dataset, &config)?;
    eprintln!(
        "trained {} steps in {:.1}s",
        history.records.len(),
        start.elapsed().as_secs_f64()
    );

    sae::write_checkpoint(&model, &args.out)?;
    if let Some(path) = &args.history {
        train::write_history(&history, path)?;
    }
    Ok(json!({
        "out": args.out.display().to_string(),
        "history": args.history.as_ref().map(|p| p.display().to_string()),
        "dim": model.dim_in,
        "dict_size": model.dict_size,
        "k": model.k,
        "theta": model.theta,
        "steps": history.records.len(),
        "final": history.final_diagnostics,
    }))
}

fn diag(args: DiagArgs) -> Result<Value> {
    let model = sae::read_checkpoint(&args.model)?;
    let dataset = store::read_dataset(&args.data)?;
    let report = diagnostics::evaluate(&model, &dataset, args.mode.into())?;
    serde_json::to_value(&report).map_err(|e| Error::invalid(format!("report encode: {e}")))
}

fn encode(args: EncodeArgs) -> Result<Value> {
    let model = sae::read_checkpoint(&args.model)?;
    let refs = store::read_dataset(&args.data)?;
    let matrix = styling::collect_codes(&model, &refs, args.mode.into())?;
    let mean_l0 = diagnostics::mean_l0(matrix.codes());
    // Codes ship in the embedding container (one column per concept) with
    // the input manifest carried over, so downstream commands keep the uris.
    let out_ds = EmbeddingDataset::new(matrix.codes().to_owned(), refs.manifest().to_vec())?;
    store::write_dataset(&out_ds, &args.out)?;
    Ok(json!({
        "out": args.out.display().to_string(),
        "rows": out_ds.count(),
        "dict_size": model.dict_size,
        "mean_l0": mean_l0,
    }))
}

fn profile_build(args: ProfileBuildArgs) -> Result<Value> {
    let ds = store::read_dataset(&args.codes)?;
    let matrix = ConceptMatrix::from_dataset(&ds)?;
    let profile = styling::build_profile(&matrix, args.presence, args.strength)?;
    styling::write_profile(&profile, &args.out)?;
    Ok(json!({
        "out": args.out.display().to_string(),
        "dict_size": profile.dict_size,
        "concepts": profile.support().len(),
        "refs": profile.ref_ids.len(),
        "presence_threshold": profile.presence_threshold,
        "strength": profile.strength,
    }))
}

fn profile_diff(args: ProfileDiffArgs) -> Result<Value> {
    let a = styling::read_profile(&args.a)?;
    let b = styling::read_profile(&args.b)?;
    let report = styling::profile_diff(&a, &b)?;
    let mut value =
        serde_json::to_value(&report).map_err(|e| Error::invalid(format!("report encode: {e}")))?;
    let obj = value
        .as_object_mut()
        .expect("report serializes to an object");
    obj.insert("a".into(), json!(args.a.display().to_string()));
    obj.insert("b".into(), json!(args.b.display().to_string()));
    Ok(value)
}

fn steer(args: SteerArgs) -> Result<Value> {
    let model = sae::read_checkpoint(&args.model)?;
    let profile = styling::read_profile(&args.profile)?;
    let content = store::read_dataset(&args.content)?;
    let residual = styling::decode_residual(&model, &profile)?;
    if content.dim() != residual.len() {
        return Err(Error::invalid(format!(
            "content dim {} does not match model dim {}",
            content.dim(),
            residual.len()
        )));
    }
    let residual_l2 = residual.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut steered = Array2::<f32>::zeros((content.count(), content.dim()));
    for (i, row) in content.data().axis_iter(Axis(0)).enumerate() {
        let row64 = row.mapv(f64::from);
        let result = styling::steer(row64.view(), residual.view(), args.alpha)?;
        for (slot, &v) in steered.row_mut(i).iter_mut().zip(result.steered.iter()) {
            *slot = v as f32;
        }
    }
    let out_ds = EmbeddingDataset::new(steered, content.manifest().to_vec())?;
    store::write_dataset(&out_ds, &args.out)?;
    Ok(json!({
        "out": args.out.display().to_string(),
        "rows": out_ds.count(),
        "alpha": args.alpha,
        "residual_l2": residual_l2,
        "concepts": profile.support().len(),
    }))
}

fn interp_exemplars(args: ExemplarsArgs) -> Result<Value> {
    let ds = store::read_dataset(&args.codes)?;
    let matrix = ConceptMatrix::from_dataset(&ds)?;
    if let Some(j) = args.concept {
        let mut set = autointerp::top_exemplars(&matrix, j, args.k)?;
        autointerp::attach_uris(&mut set, ds.manifest());
        Ok(json!({
            "concept": j,
            "requested": args.k,
            "exemplars": set.entries,
        }))
    } else {
        let n = args.rank.expect("clap enforces the selector group");
        Ok(json!({
            "top_n": n,
            "ranking": autointerp::rank_by_mean_activation(&matrix, n),
        }))
    }
}

fn interp_label(args: LabelArgs) -> Result<Value> {
    let ds = store::read_dataset(&args.codes)?;
    let matrix = ConceptMatrix::from_dataset(&ds)?;
    let selected: Vec<usize> = if let Some(n) = args.top {
        autointerp::rank_by_mean_activation(&matrix, n)
    } else {
        let mut seen = BTreeSet::new();
        args.concept
            .iter()
            .copied()
            .filter(|&j| seen.insert(j))
            .collect()
    };
    let client: Box<dyn LabelClient> = if args.mock {
        Box::new(MockLabelClient)
    } else {
        let endpoint = args
            .endpoint
            .clone()
            .expect("clap enforces the client group");
        Box::new(HttpLabelClient::new(
            endpoint,
            Duration::from_secs(args.timeout_secs),
        )?)
    };

    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for &j in &selected {
        let mut set = autointerp::top_exemplars(&matrix, j, args.k)?;
        if set.entries.is_empty() {
            eprintln!("concept {j}: no positive activations, skipping");
            skipped.push(j);
            continue;
        }
        autointerp::attach_uris(&mut set, ds.manifest());
        let label =
            autointerp::request_label(client.as_ref(), &set, autointerp::assemble_prompt())?;
        eprintln!("concept {j}: {}", label.label);
        labels.push(label);
    }
    autointerp::export_labels(&labels, &args.out)?;
    let source = if args.mock {
        "mock"
    } else {
        "external-service"
    };
    Ok(json!({
        "out": args.out.display().to_string(),
        "labeled": labels.len(),
        "skipped": skipped,
        "source": source,
    }))
}
