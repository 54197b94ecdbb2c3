//! File formats: checkpoints, model manifests, datasets, configs and
//! metrics tables.
//!
//! Checkpoints are a text header listing `name shape count` per array,
//! terminated by `end`, followed by the arrays as little-endian `f64`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::flow::{BoundingBox, FlowModel, FlowSpec};
use crate::params::Domain;
use crate::targets::{Dataset, MhConfig, TargetKind, ToyTarget};
use crate::trainer::{AdamState, EpochRecord, TrainConfig, TrainState};

const CHECKPOINT_MAGIC: &str = "nubflow-checkpoint 1";
const MANIFEST_MAGIC: &str = "nubflow-manifest 1";
const DATASET_MAGIC: &str = "nubflow-dataset 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named arrays with shapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<Array>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Argument(format!("invalid array name {name:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Argument(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Argument(format!("duplicate array {name}")));
        }
        self.arrays.push(Array { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn require(&self, name: &str, len: usize) -> Result<&[f64]> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no array `{name}`")))?;
        if a.data.len() != len {
            return Err(Error::Format(format!(
                "array `{name}` has {} values, expected {len}",
                a.data.len()
            )));
        }
        Ok(&a.data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::new();
        writeln!(header, "{CHECKPOINT_MAGIC}").unwrap();
        for a in &self.arrays {
            let shape: Vec<String> = a.shape.iter().map(|s| s.to_string()).collect();
            writeln!(header, "{} {} {}", a.name, shape.join("x"), a.data.len()).unwrap();
        }
        writeln!(header, "end").unwrap();
        w.write_all(header.as_bytes())?;
        let mut body = Vec::with_capacity(8 * self.arrays.iter().map(|a| a.data.len()).sum::<usize>());
        for a in &self.arrays {
            for v in &a.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<usize> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Format("checkpoint header is truncated".into()));
            }
            lineno += 1;
            Ok(lineno)
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint (first line {:?})", line.trim_end())));
        }
        let mut specs = Vec::new();
        loop {
            let n = next_line(&mut r, &mut line)?;
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let parts: Vec<&str> = l.split(' ').collect();
            let bad = |m: &str| Error::Parse {
                line: n,
                message: m.to_string(),
            };
            if parts.len() != 3 {
                return Err(bad("expected `name shape count`"));
            }
            let shape = if parts[1].is_empty() {
                Vec::new()
            } else {
                parts[1]
                    .split('x')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("invalid shape"))?
            };
            let count: usize = parts[2].parse().map_err(|_| bad("invalid count"))?;
            if shape.iter().product::<usize>() != count {
                return Err(bad("shape and count disagree"));
            }
            specs.push((parts[0].to_string(), shape, count));
        }
        let mut ck = Checkpoint::default();
        let mut buf = [0u8; 8];
        for (name, shape, count) in specs {
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("checkpoint body truncated in `{name}`")))?;
                data.push(f64::from_le_bytes(buf));
            }
            ck.push(name, shape, data)?;
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint body".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_from(f)
    }
}

/// Conditioner weights, plus optimizer state when given.
pub fn model_checkpoint(model: &FlowModel, state: Option<&TrainState>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    for (l, layer) in model.layers().iter().enumerate() {
        let net = layer.conditioner();
        for (suffix, shape, off) in net.layout() {
            let n = shape.iter().product::<usize>();
            ck.push(format!("layer{l}.{suffix}"), shape, net.params()[off..off + n].to_vec())?;
        }
    }
    if let Some(st) = state {
        let n = st.adam.m.len();
        ck.push("adam.m", vec![n], st.adam.m.clone())?;
        ck.push("adam.v", vec![n], st.adam.v.clone())?;
        ck.push(
            "adam.hyper",
            vec![3],
            vec![st.adam.beta1, st.adam.beta2, st.adam.eps],
        )?;
        // counters are far below 2^53, so they survive the trip through f64
        ck.push("train.counters", vec![2], vec![st.epoch as f64, st.adam.t as f64])?;
    }
    Ok(ck)
}

/// Loads conditioner weights into `model`; returns the optimizer state if
/// the checkpoint carries one.
pub fn restore_checkpoint(model: &mut FlowModel, ck: &Checkpoint) -> Result<Option<TrainState>> {
    for l in 0..model.layers().len() {
        let layout = model.layers()[l].conditioner().layout();
        let mut params = vec![0.0; model.layers()[l].conditioner().n_params()];
        for (suffix, shape, off) in layout {
            let name = format!("layer{l}.{suffix}");
            let a = ck
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no array `{name}`")))?;
            if a.shape != shape {
                return Err(Error::Format(format!(
                    "array `{name}` has shape {:?}, model expects {shape:?}",
                    a.shape
                )));
            }
            params[off..off + a.data.len()].copy_from_slice(&a.data);
        }
        model.layers_mut()[l].conditioner_mut().params_mut().copy_from_slice(&params);
    }
    if ck.get("adam.m").is_none() {
        return Ok(None);
    }
    let n = model.n_params();
    let hyper = ck.require("adam.hyper", 3)?;
    let counters = ck.require("train.counters", 2)?;
    Ok(Some(TrainState {
        adam: AdamState {
            m: ck.require("adam.m", n)?.to_vec(),
            v: ck.require("adam.v", n)?.to_vec(),
            t: counters[1] as u64,
            beta1: hyper[0],
            beta2: hyper[1],
            eps: hyper[2],
        },
        epoch: counters[0] as usize,
    }))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Architecture, per-layer splits and bounding box of a model.
pub fn manifest_string(model: &FlowModel) -> String {
    let spec = model.spec();
    let bbox = model.bbox();
    let domains: Vec<&str> = spec.domains.iter().map(|d| d.name()).collect();
    let mut s = String::new();
    writeln!(s, "{MANIFEST_MAGIC}").unwrap();
    writeln!(s, "dim = {}", spec.dim()).unwrap();
    writeln!(s, "layers = {}", spec.layers).unwrap();
    writeln!(s, "k = {}", spec.k).unwrap();
    writeln!(s, "bins = {}", spec.bins).unwrap();
    writeln!(s, "eps = {:?}", spec.eps).unwrap();
    writeln!(s, "hidden = {}", join(&spec.hidden)).unwrap();
    writeln!(s, "activation = {}", spec.activation.name()).unwrap();
    writeln!(s, "domains = {}", domains.join(",")).unwrap();
    writeln!(s, "bbox_lo = {}", join(&bbox.lo().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>())).unwrap();
    writeln!(s, "bbox_hi = {}", join(&bbox.hi().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>())).unwrap();
    for (l, layer) in model.layers().iter().enumerate() {
        writeln!(
            s,
            "layer{l} = d={} pass={} transformed={} k={} bins={}",
            layer.pass().len(),
            join(layer.pass()),
            join(layer.transformed()),
            layer.order(),
            layer.bins()
        )
        .unwrap();
    }
    s
}

fn key_values(text: &str, magic: &str) -> Result<Vec<(usize, String, String)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == magic => {}
        _ => return Err(Error::Format(format!("expected `{magic}` header"))),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let l = raw.split('#').next().unwrap().trim();
        if l.is_empty() {
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got {l:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Fresh (identity) model with the architecture described by a manifest.
pub fn model_from_manifest(text: &str) -> Result<FlowModel> {
    let kv = key_values(text, MANIFEST_MAGIC)?;
    let get = |key: &str| -> Result<(usize, &str)> {
        kv.iter()
            .find(|(_, k, _)| k == key)
            .map(|(n, _, v)| (*n, v.as_str()))
            .ok_or_else(|| Error::Format(format!("manifest has no `{key}`")))
    };
    fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid {key} {v:?}"),
        })
    }
    fn list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
        parse_list(v).ok_or_else(|| Error::Parse {
            line,
            message: format!("invalid {key} list {v:?}"),
        })
    }
    let field = |key: &str| -> Result<usize> {
        let (n, v) = get(key)?;
        num(n, key, v)
    };
    let (n, v) = get("domains")?;
    let domains = v
        .split(',')
        .map(|d| Domain::parse(d.trim()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Parse {
            line: n,
            message: format!("invalid domains {v:?}"),
        })?;
    let (n, v) = get("activation")?;
    let activation = Activation::parse(v).ok_or_else(|| Error::Parse {
        line: n,
        message: format!("invalid activation {v:?}"),
    })?;
    let (n, v) = get("eps")?;
    let eps: f64 = num(n, "eps", v)?;
    let (n, v) = get("hidden")?;
    let hidden: Vec<usize> = list(n, "hidden", v)?;
    let spec = FlowSpec {
        domains: domains.clone(),
        layers: field("layers")?,
        k: field("k")?,
        bins: field("bins")?,
        eps,
        hidden,
        activation,
    };
    if field("dim")? != spec.dim() {
        return Err(Error::Format("manifest dim disagrees with its domains".into()));
    }
    let (n, v) = get("bbox_lo")?;
    let lo: Vec<f64> = list(n, "bbox_lo", v)?;
    let (n, v) = get("bbox_hi")?;
    let hi: Vec<f64> = list(n, "bbox_hi", v)?;
    let bbox = BoundingBox::new(lo, hi, domains)?;
    let model = FlowModel::new(spec, bbox, 0)?;
    for (l, layer) in model.layers().iter().enumerate() {
        let (n, v) = get(&format!("layer{l}"))?;
        let expected = format!(
            "d={} pass={} transformed={} k={} bins={}",
            layer.pass().len(),
            join(layer.pass()),
            join(layer.transformed()),
            layer.order(),
            layer.bins()
        );
        if v != expected {
            return Err(Error::Parse {
                line: n,
                message: format!("layer{l} is `{v}` but the architecture implies `{expected}`"),
            });
        }
    }
    Ok(model)
}

pub fn save_manifest(model: &FlowModel, path: &Path) -> Result<()> {
    fs::write(path, manifest_string(model)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Model described by `manifest` with weights from `checkpoint`.
pub fn load_model(manifest: &Path, checkpoint: &Path) -> Result<(FlowModel, Option<TrainState>)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Io(format!("{}: {e}", manifest.display())))?;
    let mut model = model_from_manifest(&text)?;
    let state = restore_checkpoint(&mut model, &Checkpoint::load(checkpoint)?)?;
    Ok((model, state))
}

fn dataset_header(d: &Dataset) -> String {
    let f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let domains: Vec<&str> = d.bbox.domains().iter().map(|x| x.name()).collect();
    format!(
        "{DATASET_MAGIC} dim={} n={} lo={} hi={} domains={} target={} amplitudes={} radii={} sigma={:?} seed={} chains={} burn_in={} keep_every={} keeps={} step={:?} acceptance={:?}\n",
        d.dim,
        d.len(),
        f(d.bbox.lo()),
        f(d.bbox.hi()),
        domains.join(","),
        d.target.kind.name(),
        f(&d.target.amplitudes),
        f(&d.target.radii),
        d.target.sigma,
        d.seed,
        d.mh.chains,
        d.mh.burn_in,
        d.mh.keep_every,
        d.mh.keeps,
        d.mh.step,
        d.acceptance,
    )
}

pub fn write_dataset<W: Write>(d: &Dataset, mut w: W) -> Result<()> {
    w.write_all(dataset_header(d).as_bytes())?;
    let mut body = Vec::with_capacity(8 * d.points.len());
    for v in &d.points {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let rest = header
        .trim_end()
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| Error::Format("not a dataset file".into()))?;
    let mut fields = std::collections::HashMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header token {tok:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Format(format!("dataset header has no `{k}`")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Format(format!("invalid `{k}` value {v:?}")))
    }
    fn vec4(k: &str, v: &str) -> Result<[f64; 4]> {
        let l: Vec<f64> = parse_list(v).ok_or_else(|| Error::Format(format!("invalid `{k}` list {v:?}")))?;
        l.try_into().map_err(|_| Error::Format(format!("`{k}` needs 4 values")))
    }
    let dim: usize = num("dim", get("dim")?)?;
    let n: usize = num("n", get("n")?)?;
    let domains = get("domains")?
        .split(',')
        .map(Domain::parse)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Format("invalid domains".into()))?;
    let lo: Vec<f64> = parse_list(get("lo")?).ok_or_else(|| Error::Format("invalid lo".into()))?;
    let hi: Vec<f64> = parse_list(get("hi")?).ok_or_else(|| Error::Format("invalid hi".into()))?;
    let kind = TargetKind::parse(get("target")?).ok_or_else(|| Error::Format("unknown target".into()))?;
    let target = ToyTarget::new(
        kind,
        vec4("amplitudes", get("amplitudes")?)?,
        vec4("radii", get("radii")?)?,
        num("sigma", get("sigma")?)?,
    )?;
    let mh = MhConfig {
        chains: num("chains", get("chains")?)?,
        burn_in: num("burn_in", get("burn_in")?)?,
        keep_every: num("keep_every", get("keep_every")?)?,
        keeps: num("keeps", get("keeps")?)?,
        step: num("step", get("step")?)?,
    };
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if dim == 0 || body.len() != 8 * n * dim {
        return Err(Error::Format(format!(
            "dataset body has {} bytes, header implies {}",
            body.len(),
            8 * n * dim
        )));
    }
    let points = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Dataset {
        dim,
        points,
        bbox: BoundingBox::new(lo, hi, domains)?,
        seed: num("seed", get("seed")?)?,
        target,
        mh,
        acceptance: num("acceptance", get("acceptance")?)?,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_dataset(d, &mut bytes)?;
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_dataset(f)
}

/// Plain CSV with a `x0,x1,...` header.
pub fn dataset_csv(d: &Dataset) -> String {
    let mut s = (0..d.dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..d.len() {
        s.push_str(&join(d.row(i)));
        s.push('\n');
    }
    s
}

/// `key = value` lines; `profile` selects the base settings wherever it
/// appears, every other key overrides a field.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.split('#').next().unwrap().trim();
        if l.is_empty() {
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got {l:?}"),
        })?;
        entries.push((i + 1, k.trim(), v.trim()));
    }
    let mut cfg = TrainConfig::desk();
    if let Some(&(line, _, v)) = entries.iter().rev().find(|e| e.1 == "profile") {
        cfg = TrainConfig::by_profile(v).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
    }
    for (line, k, v) in entries {
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("invalid {what} {v:?} for `{k}`"),
        };
        macro_rules! set {
            ($field:ident, $what:expr) => {
                cfg.$field = v.parse().map_err(|_| bad($what))?
            };
        }
        match k {
            "profile" => {}
            "learning_rate" => set!(learning_rate, "number"),
            "batch_size" => set!(batch_size, "count"),
            "epochs" => set!(epochs, "count"),
            "lambda_fm" => set!(lambda_fm, "number"),
            "lr_decay" => set!(lr_decay, "number"),
            "seed" => set!(seed, "seed"),
            "train_fraction" => set!(train_fraction, "number"),
            "max_samples" => set!(max_samples, "count"),
            "checkpoint_every" => set!(checkpoint_every, "count"),
            "rkld_samples" => set!(rkld_samples, "count"),
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key `{k}`"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_string(cfg: &TrainConfig) -> String {
    format!(
        "profile = {}\nlearning_rate = {:?}\nbatch_size = {}\nepochs = {}\nlambda_fm = {:?}\nlr_decay = {:?}\nseed = {}\ntrain_fraction = {:?}\nmax_samples = {}\ncheckpoint_every = {}\nrkld_samples = {}\n",
        cfg.profile,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
        cfg.lambda_fm,
        cfg.lr_decay,
        cfg.seed,
        cfg.train_fraction,
        cfg.max_samples,
        cfg.checkpoint_every,
        cfg.rkld_samples
    )
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_nll,fme,rkld";

/// One CSV row; FME and rKLD cells are empty between checkpoints. rKLD is
/// only defined up to the target's log normalizer.
pub fn metrics_row(r: &EpochRecord) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    format!(
        "{},{:?},{:?},{},{}",
        r.epoch,
        r.train_loss,
        r.test_nll,
        opt(r.fme),
        opt(r.rkld)
    )
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::Format("metrics CSV header missing".into())),
    }
    let mut out = Vec::new();
    for (i, l) in lines {
        let bad = || Error::Parse {
            line: i + 1,
            message: format!("malformed metrics row {l:?}"),
        };
        let c: Vec<&str> = l.split(',').collect();
        if c.len() != 5 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        out.push(EpochRecord {
            epoch: c[0].parse().map_err(|_| bad())?,
            train_loss: c[1].parse().map_err(|_| bad())?,
            test_nll: c[2].parse().map_err(|_| bad())?,
            fme: opt(c[3])?,
            rkld: opt(c[4])?,
        });
    }
    Ok(out)
}
