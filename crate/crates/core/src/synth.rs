//! Deterministic synthetic multi-label data with controlled co-occurrence.
//!
//! Labels are drawn exactly from a log-linear distribution over all
//! `2^N_c` label vectors: independent Bernoulli(`base_rate`) log-odds plus a
//! log-odds boost for every configured pair that is jointly present. Images
//! are sums of orthonormal class prototypes plus Gaussian noise; reports are
//! a prefix token followed by the sorted tokens of the positive classes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::TextTokens;
use crate::error::{Error, Result};
use crate::objectives::LabelBatch;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Token ids of the synthetic vocabulary.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const REPORT: usize = 1;
    pub const POS_TEMPLATE: usize = 2;
    pub const NEG_TEMPLATE: usize = 3;
    pub const FIRST_CLASS: usize = 4;

    pub fn class_token(k: usize) -> usize {
        FIRST_CLASS + k
    }

    pub fn size(n_classes: usize) -> usize {
        FIRST_CLASS + n_classes
    }
}

pub const MAX_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBoost {
    pub i: usize,
    pub j: usize,
    /// Log-odds added when both classes are present.
    pub boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub d_raw: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_rate: f64,
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    pub pair_boost: Vec<PairBoost>,
    pub seen_classes: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            d_raw: 64,
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            base_rate: 0.3,
            prototype_scale: 1.0,
            noise_sigma: 0.1,
            pair_boost: vec![
                PairBoost { i: 0, j: 1, boost: 1.5 },
                PairBoost { i: 2, j: 4, boost: 1.2 },
                PairBoost { i: 3, j: 6, boost: 1.2 },
            ],
            seen_classes: (0..6).collect(),
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes;
        if n == 0 || n > MAX_CLASSES {
            return Err(Error::Config(format!("n_classes must lie in 1..={MAX_CLASSES}")));
        }
        if n > self.d_raw {
            return Err(Error::Config(format!(
                "{n} prototypes cannot be orthogonal in {} dimensions",
                self.d_raw
            )));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(Error::Config("base_rate must lie in (0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.prototype_scale.is_finite() {
            return Err(Error::Config("noise_sigma must be >= 0 and scale finite".into()));
        }
        for b in &self.pair_boost {
            if b.i >= n || b.j >= n || b.i == b.j || !b.boost.is_finite() {
                return Err(Error::Config(format!("invalid pair boost ({}, {})", b.i, b.j)));
            }
        }
        seen_check(&self.seen_classes, n)
    }
}

fn seen_check(seen: &[usize], n: usize) -> Result<()> {
    if seen.is_empty() {
        return Err(Error::Config("seen class set is empty".into()));
    }
    if seen.iter().any(|&k| k >= n) {
        return Err(Error::Config("seen class out of range".into()));
    }
    let mut s = seen.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != seen.len() {
        return Err(Error::Config("duplicate seen class".into()));
    }
    Ok(())
}

/// Probability of every label vector, indexed by its bit pattern
/// (bit `k` set ⇔ class `k` positive).
pub fn label_distribution(cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_classes;
    let logit = (cfg.base_rate / (1.0 - cfg.base_rate)).ln();
    let mut w: Vec<f64> = (0..1usize << n)
        .map(|m| {
            let mut e = logit * m.count_ones() as f64;
            for b in &cfg.pair_boost {
                if m >> b.i & 1 == 1 && m >> b.j & 1 == 1 {
                    e += b.boost;
                }
            }
            e.exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

/// Analytic `P(y_k = 1)` for every class.
pub fn analytic_marginals(dist: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| dist.iter().enumerate().filter(|(m, _)| m >> k & 1 == 1).map(|(_, p)| p).sum())
        .collect()
}

/// Analytic `P(y_i = 1, y_j = 1)`.
pub fn analytic_joint(dist: &[f64], i: usize, j: usize) -> f64 {
    dist.iter()
        .enumerate()
        .filter(|(m, _)| m >> i & 1 == 1 && m >> j & 1 == 1)
        .map(|(_, p)| p)
        .sum()
}

/// One split's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[n, d_raw]`, every value representable in f32.
    pub images: Tensor,
    pub labels: LabelBatch,
    pub reports: Vec<TextTokens>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// One class-name token sequence per class.
    pub class_tokens: Vec<TextTokens>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn seen(&self) -> &[usize] {
        &self.config.seen_classes
    }

    pub fn unseen(&self) -> Vec<usize> {
        (0..self.n_classes()).filter(|k| !self.seen().contains(k)).collect()
    }

    /// `[POS_TEMPLATE, cls]` and `[NEG_TEMPLATE, cls]` for the given classes.
    pub fn templates(&self, classes: &[usize]) -> (Vec<TextTokens>, Vec<TextTokens>) {
        let pos = classes
            .iter()
            .map(|&k| TextTokens::from_ids(vec![vocab::POS_TEMPLATE, vocab::class_token(k)]))
            .collect();
        let neg = classes
            .iter()
            .map(|&k| TextTokens::from_ids(vec![vocab::NEG_TEMPLATE, vocab::class_token(k)]))
            .collect();
        (pos, neg)
    }
}

/// Orthonormal prototypes `[N_c, d_raw]` by Gram–Schmidt on Gaussians.
pub fn prototypes(n: usize, d: usize, rng: &mut Rng) -> Result<Tensor> {
    if n > d {
        return Err(Error::Config(format!("{n} prototypes cannot be orthogonal in {d} dimensions")));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Tensor::from_rows(&rows)
}

fn sample_split(
    n: usize,
    cfg: &SynthConfig,
    cdf: &[f64],
    protos: &Tensor,
    rng: &mut Rng,
) -> Result<Split> {
    let (nc, d) = (cfg.n_classes, cfg.d_raw);
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n * nc);
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform();
        let mask = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let mut x = vec![0.0; d];
        let mut tokens = vec![vocab::REPORT];
        for k in 0..nc {
            let on = mask >> k & 1 == 1;
            labels.push(on as i8);
            if on {
                x.iter_mut().zip(protos.row(k)).for_each(|(a, p)| *a += cfg.prototype_scale * p);
                tokens.push(vocab::class_token(k));
            }
        }
        for a in x.iter_mut() {
            *a = (*a + cfg.noise_sigma * rng.gaussian()) as f32 as f64;
        }
        images.extend(x);
        reports.push(TextTokens::from_ids(tokens));
    }
    Ok(Split {
        images: Tensor::new(vec![n, d], images)?,
        labels: LabelBatch::new(n, nc, labels)?,
        reports,
    })
}

/// Generates train/val/test splits from one sequential random stream.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let dist = label_distribution(cfg)?;
    let mut cdf = Vec::with_capacity(dist.len());
    let mut acc = 0.0;
    for p in &dist {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = Rng::new(cfg.seed);
    let protos = prototypes(cfg.n_classes, cfg.d_raw, &mut rng)?;
    let train = sample_split(cfg.n_train, cfg, &cdf, &protos, &mut rng)?;
    let val = sample_split(cfg.n_val, cfg, &cdf, &protos, &mut rng)?;
    let test = sample_split(cfg.n_test, cfg, &cdf, &protos, &mut rng)?;
    Ok(Dataset {
        config: cfg.clone(),
        class_tokens: (0..cfg.n_classes)
            .map(|k| TextTokens::from_ids(vec![vocab::class_token(k)]))
            .collect(),
        train,
        val,
        test,
    })
}

/// Prototypes used by [`generate`] for `cfg` (the nearest-prototype oracle).
pub fn generator_prototypes(cfg: &SynthConfig) -> Result<Tensor> {
    cfg.validate()?;
    prototypes(cfg.n_classes, cfg.d_raw, &mut Rng::new(cfg.seed))
}

/// Training labels with unseen classes set to unknown, and the untouched
/// test labels.
pub fn gzsl_split(train: &LabelBatch, test: &LabelBatch, seen: &[usize]) -> Result<(LabelBatch, LabelBatch)> {
    seen_check(seen, train.classes())?;
    let mut v = train.values().to_vec();
    let n = train.classes();
    for (idx, x) in v.iter_mut().enumerate() {
        if !seen.contains(&(idx % n)) {
            *x = -1;
        }
    }
    Ok((LabelBatch::new(train.rows(), n, v)?, test.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    n_classes: usize,
    d_raw: usize,
    splits: Vec<(SplitName, usize)>,
    config: SynthConfig,
}

const FORMAT_VERSION: u32 = 1;

fn parse_err(file: &str, location: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.into(),
        location: location.into(),
        msg: msg.into(),
    }
}

fn token_field(t: &TextTokens) -> String {
    t.ids().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `meta.json`, `images.f32`, `labels.csv`, `reports.csv` and
/// `classes.csv` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let splits: Vec<(SplitName, usize)> = SplitName::ALL.iter().map(|&s| (s, ds.split(s).len())).collect();
    let meta = Meta {
        format_version: FORMAT_VERSION,
        n_classes: ds.n_classes(),
        d_raw: ds.config.d_raw,
        splits,
        config: ds.config.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut bytes = Vec::new();
    let mut labels = String::from("sample_id,split");
    for k in 0..ds.n_classes() {
        write!(labels, ",c{k}").unwrap();
    }
    labels.push('\n');
    let mut reports = String::from("sample_id,tokens\n");
    let mut id = 0usize;
    for name in SplitName::ALL {
        let s = ds.split(name);
        for &v in s.images.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for i in 0..s.len() {
            write!(labels, "{id},{}", name.as_str()).unwrap();
            for &v in s.labels.row(i) {
                write!(labels, ",{v}").unwrap();
            }
            labels.push('\n');
            writeln!(reports, "{id},{}", token_field(&s.reports[i])).unwrap();
            id += 1;
        }
    }
    fs::write(dir.join("images.f32"), bytes)?;
    fs::write(dir.join("labels.csv"), labels)?;
    fs::write(dir.join("reports.csv"), reports)?;

    let mut classes = String::from("class_id,tokens,seen\n");
    for (k, t) in ds.class_tokens.iter().enumerate() {
        writeln!(classes, "{k},{},{}", token_field(t), ds.seen().contains(&k) as u8).unwrap();
    }
    fs::write(dir.join("classes.csv"), classes)?;
    Ok(())
}

fn read_text(dir: &Path, file: &str) -> Result<String> {
    fs::read_to_string(dir.join(file)).map_err(|e| parse_err(file, "open", e.to_string()))
}

fn parse_tokens(file: &str, line: usize, field: &str) -> Result<TextTokens> {
    let ids = field
        .split(' ')
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(file, format!("line {line}"), format!("bad token `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(parse_err(file, format!("line {line}"), "empty token list"));
    }
    Ok(TextTokens::from_ids(ids))
}

/// Data rows of a CSV file with the given header; `(line number, fields)`.
fn csv_rows<'a>(file: &str, text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(parse_err(
                file,
                "line 1",
                format!("expected header `{header}`, found `{}`", other.unwrap_or("")),
            ))
        }
    }
    if !text.ends_with('\n') {
        return Err(parse_err(file, format!("byte {}", text.len()), "truncated final line"));
    }
    Ok(lines.enumerate().map(|(i, l)| (i + 2, l.split(',').collect())).collect())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_text = read_text(dir, "meta.json")?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| parse_err("meta.json", format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(parse_err("meta.json", "format_version", format!("unsupported version {}", meta.format_version)));
    }
    let (nc, d) = (meta.n_classes, meta.d_raw);
    let total: usize = meta.splits.iter().map(|s| s.1).sum();

    let bytes = fs::read(dir.join("images.f32")).map_err(|e| parse_err("images.f32", "open", e.to_string()))?;
    if bytes.len() != total * d * 4 {
        return Err(parse_err(
            "images.f32",
            format!("byte {}", bytes.len()),
            format!("expected {} bytes for {total}×{d} floats", total * d * 4),
        ));
    }
    let pixels: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut header = String::from("sample_id,split");
    for k in 0..nc {
        write!(header, ",c{k}").unwrap();
    }
    let label_text = read_text(dir, "labels.csv")?;
    let label_rows = csv_rows("labels.csv", &label_text, &header)?;
    if label_rows.len() != total {
        return Err(parse_err("labels.csv", "end", format!("expected {total} rows, found {}", label_rows.len())));
    }
    let report_text = read_text(dir, "reports.csv")?;
    let report_rows = csv_rows("reports.csv", &report_text, "sample_id,tokens")?;
    if report_rows.len() != total {
        return Err(parse_err("reports.csv", "end", format!("expected {total} rows, found {}", report_rows.len())));
    }

    let mut splits = Vec::new();
    let mut offset = 0usize;
    for &(name, n) in &meta.splits {
        let mut labels = Vec::with_capacity(n * nc);
        let mut reports = Vec::with_capacity(n);
        for i in offset..offset + n {
            let (line, f) = &label_rows[i];
            let loc = format!("line {line}");
            if f.len() != nc + 2 {
                return Err(parse_err("labels.csv", loc, format!("expected {} fields, found {}", nc + 2, f.len())));
            }
            if f[0] != i.to_string() || f[1] != name.as_str() {
                return Err(parse_err("labels.csv", loc, "sample id or split out of order"));
            }
            for v in &f[2..] {
                match *v {
                    "-1" => labels.push(-1),
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    _ => return Err(parse_err("labels.csv", loc.clone(), format!("label `{v}` not in {{-1, 0, 1}}"))),
                }
            }
            let (rline, rf) = &report_rows[i];
            if rf.len() != 2 || rf[0] != i.to_string() {
                return Err(parse_err("reports.csv", format!("line {rline}"), "malformed row"));
            }
            reports.push(parse_tokens("reports.csv", *rline, rf[1])?);
        }
        let images = Tensor::new(vec![n, d], pixels[offset * d..(offset + n) * d].to_vec())?;
        splits.push((name, Split {
            images,
            labels: LabelBatch::new(n, nc, labels)?,
            reports,
        }));
        offset += n;
    }

    let class_text = read_text(dir, "classes.csv")?;
    let class_rows = csv_rows("classes.csv", &class_text, "class_id,tokens,seen")?;
    if class_rows.len() != nc {
        return Err(parse_err("classes.csv", "end", format!("expected {nc} classes")));
    }
    let mut class_tokens = Vec::with_capacity(nc);
    for (k, (line, f)) in class_rows.iter().enumerate() {
        if f.len() != 3 || f[0] != k.to_string() {
            return Err(parse_err("classes.csv", format!("line {line}"), "malformed row"));
        }
        class_tokens.push(parse_tokens("classes.csv", *line, f[1])?);
    }

    let mut take = |want: SplitName| -> Result<Split> {
        let pos = splits
            .iter()
            .position(|(n, _)| *n == want)
            .ok_or_else(|| parse_err("meta.json", "splits", format!("missing split {}", want.as_str())))?;
        Ok(splits.remove(pos).1)
    };
    let train = take(SplitName::Train)?;
    let val = take(SplitName::Val)?;
    let test = take(SplitName::Test)?;
    Ok(Dataset {
        config: meta.config,
        class_tokens,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::macro_auc;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 60,
            n_val: 10,
            n_test: 20,
            ..Default::default()
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn config_checks() {
        assert!(SynthConfig { n_classes: 11, ..small() }.validate().is_err());
        assert!(SynthConfig { d_raw: 4, ..small() }.validate().is_err());
        assert!(SynthConfig { seen_classes: vec![], ..small() }.validate().is_err());
        assert!(SynthConfig { noise_sigma: -1.0, ..small() }.validate().is_err());
        assert!(prototypes(5, 4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn prototypes_orthonormal() {
        let p = prototypes(8, 64, &mut Rng::new(1)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn same_seed_same_files_and_round_trip() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&generate(&small()).unwrap(), b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back, ds);
        let c = tempfile::tempdir().unwrap();
        write_dataset(&back, c.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(c.path()));
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&generate(&small()).unwrap(), dir.path()).unwrap();

        let img = dir.path().join("images.f32");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { .. })));
        fs::write(&img, &bytes).unwrap();

        let lab = dir.path().join("labels.csv");
        let text = fs::read_to_string(&lab).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let (head, _) = lines[1].rsplit_once(',').unwrap();
        lines[1] = format!("{head},2");
        fs::write(&lab, lines.join("\n") + "\n").unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { file, .. }) => assert_eq!(file, "labels.csv"),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&lab, &text[..text.len() - 5]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn nearest_prototype_oracle_is_perfect_without_noise() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            n_train: 0,
            n_val: 0,
            n_test: 300,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let protos = generator_prototypes(&cfg).unwrap();
        let rows: Vec<usize> = (0..ds.test.len())
            .filter(|&i| ds.test.labels.row(i).iter().filter(|&&v| v == 1).count() == 1)
            .collect();
        assert!(rows.len() > 20);
        let imgs = ds.test.images.select_rows(&rows).unwrap();
        let labels = ds.test.labels.select_rows(&rows);
        let mut scores = Vec::new();
        for i in 0..rows.len() {
            for k in 0..8 {
                scores.push(imgs.row(i).iter().zip(protos.row(k)).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let scores = Tensor::new(vec![rows.len(), 8], scores).unwrap();
        assert_eq!(macro_auc(&scores, &labels).unwrap().0, 1.0);
    }

    #[test]
    fn marginals_and_boosted_pairs_match_analytic_distribution() {
        let cfg = SynthConfig {
            n_train: 5000,
            n_val: 0,
            n_test: 0,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let dist = label_distribution(&cfg).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let marg = analytic_marginals(&dist, 8);
        let n = 5000.0;
        let emp = |k: usize| (0..5000).filter(|&i| ds.train.labels.get(i, k) == 1).count() as f64 / n;
        for (k, m) in marg.iter().enumerate() {
            assert!((emp(k) - m).abs() < 0.05, "class {k}");
            assert!(emp(k) > 0.0 && emp(k) < 1.0);
        }
        for b in &cfg.pair_boost {
            let joint = (0..5000)
                .filter(|&i| ds.train.labels.get(i, b.i) == 1 && ds.train.labels.get(i, b.j) == 1)
                .count() as f64
                / n;
            let effect = analytic_joint(&dist, b.i, b.j) - marg[b.i] * marg[b.j];
            assert!(effect > 0.0);
            assert!(joint - emp(b.i) * emp(b.j) >= 0.5 * effect);
        }
    }

    #[test]
    fn gzsl_split_contract() {
        let ds = generate(&small()).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let (tr, te) = gzsl_split(&ds.train.labels, &ds.test.labels, &all).unwrap();
        assert_eq!(tr, ds.train.labels);
        assert_eq!(te, ds.test.labels);
        let (tr, te) = gzsl_split(&ds.train.labels, &ds.test.labels, &[0, 1, 2, 3, 4, 5]).unwrap();
        for i in 0..tr.rows() {
            assert_eq!(tr.get(i, 6), -1);
            assert_eq!(tr.get(i, 7), -1);
            assert_eq!(tr.get(i, 2), ds.train.labels.get(i, 2));
        }
        assert_eq!(te.values(), ds.test.labels.values());
        assert!(gzsl_split(&ds.train.labels, &ds.test.labels, &[]).is_err());
    }

    #[test]
    fn reports_and_templates() {
        let ds = generate(&small()).unwrap();
        for i in 0..ds.train.len() {
            let r = ds.train.reports[i].ids();
            assert_eq!(r[0], vocab::REPORT);
            assert!(r[1..].windows(2).all(|w| w[0] < w[1]));
            let expect: Vec<usize> = (0..8).filter(|&k| ds.train.labels.get(i, k) == 1).map(vocab::class_token).collect();
            assert_eq!(&r[1..], expect.as_slice());
        }
        let (p, n) = ds.templates(&[0, 7]);
        assert_eq!(p[1].ids(), &[vocab::POS_TEMPLATE, 11]);
        assert_eq!(n[0].ids(), &[vocab::NEG_TEMPLATE, 4]);
        assert_eq!(ds.unseen(), vec![6, 7]);
    }
}
