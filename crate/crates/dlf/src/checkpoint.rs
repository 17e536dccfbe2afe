//! Training checkpoints.
//!
//! Layout: `"DLFC"`, `u16` version, `u64` header length, UTF-8 header,
//! then the `params` and `optimizer` payload sections. The header holds the
//! resolved run config, counters, the latent layout and a directory of
//! every tensor (section, name, dtype, shape, offset, count). Payloads are
//! little-endian `f64`. Each section carries an FNV-1a checksum.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dlf_core::model::Model;
use dlf_core::optim::Adam;
use dlf_core::train::{Progress, Trainer};
use dlf_core::Tensor;

use crate::config::{parse_pairs, RunConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DLFC";
pub const VERSION: u16 = 1;

const SECTIONS: [&str; 2] = ["params", "optimizer"];

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Entry<'a> {
    section: &'static str,
    name: String,
    tensor: &'a Tensor,
}

fn entries<'a>(trainer: &'a Trainer) -> Vec<Entry<'a>> {
    let params = trainer.model.params();
    let (m, v) = trainer.optim.moments();
    let mut out: Vec<Entry> = params
        .iter()
        .map(|(_, p)| Entry {
            section: "params",
            name: p.name.clone(),
            tensor: &p.value,
        })
        .collect();
    for (prefix, moments) in [("m", m), ("v", v)] {
        for ((_, p), t) in params.iter().zip(moments) {
            out.push(Entry {
                section: "optimizer",
                name: format!("{prefix}:{}", p.name),
                tensor: t,
            });
        }
    }
    out
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Serializes `trainer` together with the run config that built it.
pub fn to_bytes(config: &RunConfig, trainer: &Trainer) -> Vec<u8> {
    let list = entries(trainer);
    let mut payloads: BTreeMap<&str, Vec<u8>> = SECTIONS.iter().map(|s| (*s, Vec::new())).collect();
    let mut header = String::new();
    writeln!(header, "[config]").unwrap();
    header.push_str(&config.to_text());
    let p = trainer.progress;
    writeln!(header, "[state]").unwrap();
    writeln!(header, "step = {}", p.step).unwrap();
    writeln!(header, "epoch = {}", p.epoch).unwrap();
    writeln!(header, "batch_in_epoch = {}", p.batch_in_epoch).unwrap();
    writeln!(header, "optimizer_steps = {}", trainer.optim.steps()).unwrap();
    match trainer.best_valid {
        Some(b) => writeln!(header, "best_valid = {:016x}", b.to_bits()).unwrap(),
        None => writeln!(header, "best_valid = none").unwrap(),
    }
    writeln!(header, "initialized = {}", trainer.model.is_initialized()).unwrap();
    // Every random stream is derived from this seed and the counters above.
    writeln!(header, "rng_seed = {}", trainer.config.seed).unwrap();
    writeln!(header, "[latents]").unwrap();
    for (i, s) in trainer.model.latent_slots().iter().enumerate() {
        writeln!(header, "z{i} = {} @ {}", shape_text(&s.shape), s.offset).unwrap();
    }
    writeln!(header, "[tensors]").unwrap();
    for e in &list {
        let buf = payloads.get_mut(e.section).unwrap();
        writeln!(
            header,
            "{} {} f64 {} {} {}",
            e.section,
            e.name,
            shape_text(e.tensor.shape()),
            buf.len(),
            e.tensor.len()
        )
        .unwrap();
        e.tensor.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    writeln!(header, "[sections]").unwrap();
    let mut offset = 0;
    for s in SECTIONS {
        let buf = &payloads[s];
        writeln!(header, "{s} {offset} {} {:016x}", buf.len(), fnv1a(buf)).unwrap();
        offset += buf.len();
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for s in SECTIONS {
        out.extend_from_slice(&payloads[s]);
    }
    out
}

struct Directory {
    section: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(section, format!("{key} = {v:?} is not a number")))
}

/// Rebuilds the config and the trainer state saved by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, Trainer)> {
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(Error::format("header", "missing DLFC magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format("header", format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let header = bytes
        .get(14..14 + header_len)
        .ok_or_else(|| Error::format("header", "truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| Error::format("header", "header is not UTF-8"))?;
    let payload = &bytes[14 + header_len..];

    let mut blocks: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut current = None;
    for line in header.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name);
            blocks.entry(name).or_default();
        } else if let Some(c) = current {
            blocks.get_mut(c).unwrap().push(line);
        } else {
            return Err(Error::format("header", format!("line outside any block: {line:?}")));
        }
    }
    let block = |name: &str| {
        blocks
            .get(name)
            .ok_or_else(|| Error::format(name, "block missing from header"))
    };

    let config = RunConfig::from_pairs(parse_pairs(&block("config")?.join("\n")).map_err(|e| Error::format("config", e.to_string()))?)
        .map_err(|e| Error::format("config", e.to_string()))?;

    let state: BTreeMap<String, String> = parse_pairs(&block("state")?.join("\n"))
        .map_err(|e| Error::format("state", e.to_string()))?
        .into_iter()
        .collect();
    let get = |k: &str| {
        state
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format("state", format!("missing {k}")))
    };
    let progress = Progress {
        step: parse_num("state", "step", get("step")?)?,
        epoch: parse_num("state", "epoch", get("epoch")?)?,
        batch_in_epoch: parse_num("state", "batch_in_epoch", get("batch_in_epoch")?)?,
    };
    let optimizer_steps: u64 = parse_num("state", "optimizer_steps", get("optimizer_steps")?)?;
    let best_valid = match get("best_valid")? {
        "none" => None,
        hex => Some(f64::from_bits(
            u64::from_str_radix(hex, 16).map_err(|_| Error::format("state", format!("best_valid = {hex:?}")))?,
        )),
    };
    let initialized: bool = parse_num("state", "initialized", get("initialized")?)?;

    let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
    for line in block("sections")? {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::format("sections", format!("malformed line {line:?}")));
        }
        let offset: usize = parse_num("sections", f[0], f[1])?;
        let len: usize = parse_num("sections", f[0], f[2])?;
        let data = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::format(f[0], "payload truncated"))?;
        if format!("{:016x}", fnv1a(data)) != f[3] {
            return Err(Error::format(f[0], "checksum mismatch; section is corrupt"));
        }
        sections.insert(f[0].to_string(), data);
    }
    let total: usize = sections.values().map(|s| s.len()).sum();
    if total != payload.len() {
        return Err(Error::format("sections", format!("{} trailing payload bytes", payload.len() - total)));
    }

    let mut dir: BTreeMap<String, Directory> = BTreeMap::new();
    for line in block("tensors")? {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 || f[2] != "f64" {
            return Err(Error::format("tensors", format!("malformed entry {line:?}")));
        }
        let shape = f[3]
            .split(',')
            .map(|d| parse_num("tensors", f[1], d))
            .collect::<Result<Vec<usize>>>()?;
        dir.insert(
            format!("{}/{}", f[0], f[1]),
            Directory {
                section: f[0].to_string(),
                shape,
                offset: parse_num("tensors", f[1], f[4])?,
                count: parse_num("tensors", f[1], f[5])?,
            },
        );
    }
    let fetch = |section: &str, name: &str| -> Result<Tensor> {
        let d = dir
            .get(&format!("{section}/{name}"))
            .ok_or_else(|| Error::format(section, format!("tensor {name} missing")))?;
        let data = sections
            .get(&d.section)
            .and_then(|s| s.get(d.offset..d.offset + 8 * d.count))
            .ok_or_else(|| Error::format(section, format!("tensor {name} outside its section")))?;
        let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&d.shape, values).map_err(|e| Error::format(section, format!("{name}: {e}")))
    };

    let mut model = Model::new(config.model.clone())?;
    let names: Vec<String> = model.params().iter().map(|(_, p)| p.name.clone()).collect();
    for name in &names {
        model
            .params_mut()
            .set(name, fetch("params", name)?)
            .map_err(|e| Error::format("params", e.to_string()))?;
    }
    if dir.keys().filter(|k| k.starts_with("params/")).count() != names.len() {
        return Err(Error::format("params", "checkpoint holds tensors the model does not have"));
    }
    if initialized {
        model.mark_initialized();
    }
    let mut optim = Adam::new(config.train.adam, model.params());
    let m = names.iter().map(|n| fetch("optimizer", &format!("m:{n}"))).collect::<Result<Vec<_>>>()?;
    let v = names.iter().map(|n| fetch("optimizer", &format!("v:{n}"))).collect::<Result<Vec<_>>>()?;
    optim
        .restore(optimizer_steps, m, v)
        .map_err(|e| Error::format("optimizer", e.to_string()))?;

    let trainer = Trainer {
        model,
        optim,
        config: config.train,
        progress,
        best_valid,
    };
    Ok((config, trainer))
}

pub fn save(path: &Path, config: &RunConfig, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, to_bytes(config, trainer)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Trainer)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained() -> (RunConfig, Trainer) {
        let cfg = RunConfig::resolve(
            None,
            &[
                "model.steps=2".into(),
                "model.hidden=4".into(),
                "model.actnorm=true".into(),
                "data.n=128".into(),
                "train.batch_size=16".into(),
                "train.max_steps=5".into(),
            ],
        )
        .unwrap();
        let data = dlf_core::data::toy2d(dlf_core::data::Toy2d::TwoMoons, 128, 0).unwrap().data;
        let mut t = Trainer::new(Model::new(cfg.model.clone()).unwrap(), cfg.train);
        t.run(&data, None, &mut ()).unwrap();
        (cfg, t)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (cfg, t) = trained();
        let bytes = to_bytes(&cfg, &t);
        let (cfg2, t2) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(t2.model, t.model);
        assert_eq!(t2.optim, t.optim);
        assert_eq!(t2.progress, t.progress);
        assert_eq!(to_bytes(&cfg2, &t2), bytes);
    }

    #[test]
    fn version_and_corruption_are_rejected() {
        let (cfg, t) = trained();
        let mut bytes = to_bytes(&cfg, &t);
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        match from_bytes(&bytes) {
            Err(Error::Format { section, .. }) => assert_eq!(section, "optimizer"),
            other => panic!("{other:?}"),
        }
        bytes[4] = 2;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { section, .. }) if section == "header"));
    }
}
