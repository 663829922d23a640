//! Experiment configuration: `key = value` files with `--key value` overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use textsmooth::distill::TrainConfig;
use textsmooth::sampler::SampleConfig;
use textsmooth::smoothing::SmoothingConfig;
use textsmooth::synthetic::SyntheticConfig;
use textsmooth::transformer::ModelConfig;

/// A raw value and the directory relative paths in it resolve against.
#[derive(Clone, Debug)]
struct Entry {
    value: String,
    base: PathBuf,
}

/// Flat key/value view of a config file plus overrides.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    /// Parses file contents. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, Vec<String>> {
        let mut raw = RawConfig::default();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => {
                    let key = k.trim().to_string();
                    if raw.entries.contains_key(&key) {
                        errors.push(format!("line {}: duplicate key `{key}`", i + 1));
                    }
                    raw.set(&key, v.trim(), base);
                }
                _ => errors.push(format!("line {}: expected `key = value`, found `{line}`", i + 1)),
            }
        }
        if errors.is_empty() {
            Ok(raw)
        } else {
            Err(errors)
        }
    }

    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read config {}: {e}", path.display())])?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                base: base.to_path_buf(),
            },
        );
    }

    /// Applies `--key value` and `--key=value` arguments; paths resolve against the working directory.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                errors.push(format!("unexpected argument `{arg}`; overrides look like `--key value`"));
                continue;
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => match it.next() {
                    Some(v) => (flag.to_string(), v.clone()),
                    None => {
                        errors.push(format!("flag `--{flag}` is missing a value"));
                        continue;
                    }
                },
            };
            self.set(&key, &value, Path::new(""));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files {
        corpus: PathBuf,
        train: PathBuf,
        test: PathBuf,
        min_freq: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataSource,
    /// Teacher architecture; `vocab_size` is filled in from the vocabulary.
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub kd_teacher: TrainConfig,
    pub smoothing: SmoothingConfig,
    pub sample: SampleConfig,
    pub seeds: Vec<u64>,
    pub teacher_checkpoint: PathBuf,
    pub input: Option<PathBuf>,
    pub text: Option<String>,
}

/// Takes keys out of a [`RawConfig`], recording every problem.
struct Reader {
    entries: BTreeMap<String, Entry>,
    errors: Vec<String>,
}

impl Reader {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => default,
            Some(e) => match e.value.parse() {
                Ok(v) => v,
                Err(err) => {
                    self.errors.push(format!("{key}: cannot parse `{}`: {err}", e.value));
                    default
                }
            },
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.entries.remove(key).map(|e| e.base.join(e.value))
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|e| e.value)
    }

    fn model(&mut self, prefix: &str, base: &ModelConfig) -> ModelConfig {
        let k = |f: &str| format!("{prefix}.{f}");
        ModelConfig {
            n_layers: self.get(&k("n_layers"), base.n_layers),
            emb_size: self.get(&k("emb_size"), base.emb_size),
            n_heads: self.get(&k("n_heads"), base.n_heads),
            ffn_size: self.get(&k("ffn_size"), base.ffn_size),
            max_seq_len: self.get(&k("max_seq_len"), base.max_seq_len),
            dropout_rate: self.get(&k("dropout_rate"), base.dropout_rate),
            mlm_bias: self.get(&k("mlm_bias"), base.mlm_bias),
            ..base.clone()
        }
    }

    fn train(&mut self, prefix: &str, base: &TrainConfig) -> TrainConfig {
        let k = |f: &str| format!("{prefix}.{f}");
        TrainConfig {
            epochs: self.get(&k("epochs"), base.epochs),
            batch_size: self.get(&k("batch_size"), base.batch_size),
            learning_rate: self.get(&k("learning_rate"), base.learning_rate),
            seed: self.get(&k("seed"), base.seed),
            ..base.clone()
        }
    }
}

impl ExperimentConfig {
    /// Builds and validates the whole config, reporting every problem at once.
    pub fn from_raw(raw: RawConfig) -> Result<Self, Vec<String>> {
        let mut r = Reader {
            entries: raw.entries,
            errors: Vec::new(),
        };
        let output_dir = r.path("output_dir").unwrap_or_else(|| PathBuf::from("out"));
        let source = r.string("data").unwrap_or_else(|| "synthetic".into());
        let syn_default = SyntheticConfig::default();
        let synthetic = SyntheticConfig {
            seed: r.get("synthetic.seed", syn_default.seed),
            vocab_size: r.get("synthetic.vocab_size", syn_default.vocab_size),
            n_corpus: r.get("synthetic.n_corpus", syn_default.n_corpus),
            n_train: r.get("synthetic.n_train", syn_default.n_train),
            n_test: r.get("synthetic.n_test", syn_default.n_test),
            seen_fraction: r.get("synthetic.seen_fraction", syn_default.seen_fraction),
        };
        let corpus = r.path("corpus");
        let train_data = r.path("train_data");
        let test_data = r.path("test_data");
        let min_freq = r.get("min_freq", 1usize);
        let data = match source.as_str() {
            "synthetic" => DataSource::Synthetic(synthetic),
            "files" => {
                let mut need = |p: Option<PathBuf>, key: &str| {
                    p.unwrap_or_else(|| {
                        r.errors.push(format!("data = files requires `{key}`"));
                        PathBuf::new()
                    })
                };
                DataSource::Files {
                    corpus: need(corpus, "corpus"),
                    train: need(train_data, "train_data"),
                    test: need(test_data, "test_data"),
                    min_freq,
                }
            }
            other => {
                r.errors.push(format!("data: expected `synthetic` or `files`, found `{other}`"));
                DataSource::Synthetic(synthetic)
            }
        };

        let teacher = r.model("teacher", &ModelConfig::default());
        let student = r.model("student", &teacher);
        let train_default = TrainConfig::default();
        let mut pretrain = r.train("teacher", &train_default);
        pretrain.mlm_mask_prob = r.get("teacher.mlm_mask_prob", train_default.mlm_mask_prob);
        let mut train = r.train("train", &train_default);
        train.kd_temperature = r.get("train.kd_temperature", train_default.kd_temperature);
        train.kd_alpha = r.get("train.kd_alpha", train_default.kd_alpha);
        let kd_teacher = r.train("kd", &train);
        let smoothing = SmoothingConfig {
            lambda: r.get("smooth.lambda", SmoothingConfig::default().lambda),
            exempt_special_tokens: r.get("smooth.exempt_special_tokens", false),
        };
        let sample_default = SampleConfig::default();
        let sample = SampleConfig {
            smoothing: smoothing.clone(),
            n_samples: r.get("sample.n_samples", sample_default.n_samples),
            n_report: r.get("sample.n_report", sample_default.n_report),
            seed: r.get("sample.seed", sample_default.seed),
        };
        let seeds = match r.string("seeds") {
            None => vec![train.seed],
            Some(s) => s
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .filter_map(|p| match p.trim().parse() {
                    Ok(v) => Some(v),
                    Err(e) => {
                        r.errors.push(format!("seeds: cannot parse `{}`: {e}", p.trim()));
                        None
                    }
                })
                .collect(),
        };
        let teacher_checkpoint = r.path("teacher_checkpoint").unwrap_or_else(|| output_dir.join("checkpoints/teacher.ckpt"));
        let input = r.path("input");
        let text = r.string("text");

        let mut errors = r.errors;
        errors.extend(r.entries.keys().map(|k| format!("unknown config key `{k}`")));

        let mut check = |what: &str, res: textsmooth::Result<()>| {
            if let Err(e) = res {
                errors.push(format!("{what}: {e}"));
            }
        };
        // vocab_size is only known later; check with a placeholder
        let with_vocab = |c: &ModelConfig| ModelConfig {
            vocab_size: 200,
            ..c.clone()
        };
        check("teacher", with_vocab(&teacher).validate());
        check("student", with_vocab(&student).validate());
        check("teacher training", pretrain.validate());
        check("train", train.validate());
        check("kd", kd_teacher.validate());
        check("smooth", smoothing.validate());
        if student.n_layers > teacher.n_layers {
            errors.push(format!(
                "student.n_layers {} exceeds teacher.n_layers {}",
                student.n_layers, teacher.n_layers
            ));
        }
        if student.emb_size != teacher.emb_size || student.max_seq_len != teacher.max_seq_len {
            errors.push("student.emb_size and student.max_seq_len must match the teacher".into());
        }
        if sample.n_report == 0 || sample.n_report > sample.n_samples {
            errors.push(format!(
                "sample.n_report {} must be in 1..=sample.n_samples ({})",
                sample.n_report, sample.n_samples
            ));
        }
        if seeds.is_empty() {
            errors.push("seeds: at least one seed is required".into());
        }
        if let DataSource::Synthetic(s) = &data {
            if s.n_corpus == 0 || s.n_train == 0 || s.n_test == 0 {
                errors.push("synthetic split sizes must be positive".into());
            }
            if !(s.seen_fraction > 0.0 && s.seen_fraction <= 1.0) {
                errors.push(format!("synthetic.seen_fraction {} outside (0, 1]", s.seen_fraction));
            }
        }
        if errors.is_empty() {
            Ok(ExperimentConfig {
                output_dir,
                data,
                teacher,
                student,
                pretrain,
                train,
                kd_teacher,
                smoothing,
                sample,
                seeds,
                teacher_checkpoint,
                input,
                text,
            })
        } else {
            Err(errors)
        }
    }

    /// Data files that must exist, with the key naming each.
    pub fn data_files(&self) -> Vec<(&'static str, &Path)> {
        match &self.data {
            DataSource::Synthetic(_) => Vec::new(),
            DataSource::Files { corpus, train, test, .. } => {
                vec![("corpus", corpus.as_path()), ("train_data", train.as_path()), ("test_data", test.as_path())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(text: &str, overrides: &[&str]) -> Result<ExperimentConfig, Vec<String>> {
        let mut raw = RawConfig::parse(text, Path::new("/cfg"))?;
        raw.apply_overrides(&overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        ExperimentConfig::from_raw(raw)
    }

    #[test]
    fn parses_prefixed_keys_and_comments() {
        let c = build(
            "# experiment\nteacher.n_layers = 3  # deep\nstudent.n_layers = 1\ntrain.learning_rate = 0.005\nsmooth.lambda = 0.25\nseeds = 1, 2,3\n",
            &[],
        )
        .unwrap();
        assert_eq!(c.teacher.n_layers, 3);
        assert_eq!(c.student.n_layers, 1);
        assert_eq!(c.student.emb_size, c.teacher.emb_size);
        assert_eq!(c.train.learning_rate, 0.005);
        assert_eq!(c.smoothing.lambda, 0.25);
        assert_eq!(c.sample.smoothing.lambda, 0.25);
        assert_eq!(c.seeds, [1, 2, 3]);
        assert_eq!(c.teacher_checkpoint, PathBuf::from("out/checkpoints/teacher.ckpt"));
    }

    #[test]
    fn overrides_win_and_resolve_against_cwd() {
        let c = build("smooth.lambda = 0.25\noutput_dir = runs\n", &["--smooth.lambda", "0.75", "--output_dir=elsewhere"]).unwrap();
        assert_eq!(c.smoothing.lambda, 0.75);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn every_problem_is_reported() {
        let errs = build(
            "smooth.lambda = 1.5\ntrain.epochs = many\nbogus = 1\nstudent.n_layers = 4\n",
            &["--train.learning_rate", "-1"],
        )
        .unwrap_err();
        let all = errs.join("\n");
        for needle in ["lambda", "train.epochs", "bogus", "student.n_layers", "learning_rate"] {
            assert!(all.contains(needle), "{needle} missing from {all}");
        }
    }

    #[test]
    fn malformed_lines_and_flags() {
        assert!(RawConfig::parse("just words\n", Path::new("")).is_err());
        assert!(RawConfig::parse("a = 1\na = 2\n", Path::new("")).is_err());
        let mut raw = RawConfig::default();
        assert!(raw.apply_overrides(&["--train.seed".into()]).is_err());
        assert!(raw.apply_overrides(&["positional".into()]).is_err());
    }

    #[test]
    fn files_source_requires_paths() {
        let errs = build("data = files\ncorpus = c.txt\n", &[]).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("train_data")));
        assert!(errs.iter().any(|e| e.contains("test_data")));
        let c = build("data = files\ncorpus = c.txt\ntrain_data = t.tsv\ntest_data = /abs/e.tsv\n", &[]).unwrap();
        assert_eq!(c.data_files()[0].1, Path::new("/cfg/c.txt"));
        assert_eq!(c.data_files()[2].1, Path::new("/abs/e.tsv"));
    }
}
