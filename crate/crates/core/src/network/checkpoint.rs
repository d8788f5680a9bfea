//! Binary checkpoint container.
//!
//! ```text
//! magic "PS2CKPT\0" | u32 version
//! u32 header length | header text (key = value lines, then the run config)
//! u32 entry count | per entry: u32 name length, name, u8 kind, u32 rank,
//!                   u64 dims.., f64 values..
//! per entry: u64 length, f64 first moments.., u64 length, f64 second moments..
//! ```
//! All integers and floats are little-endian.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{build_model, Adam, RunConfig, Trainer};
use crate::error::{Error, Result};
use crate::layers::ParamKind;

const MAGIC: &[u8; 8] = b"PS2CKPT\0";
pub const FORMAT_VERSION: u32 = 1;

fn header(t: &Trainer) -> String {
    format!(
        "seed = {}\nepoch = {}\nsetup = {}\nadam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\nadam_step = {}\n{}",
        t.model.seed,
        t.epoch,
        t.setup,
        t.adam.beta1,
        t.adam.beta2,
        t.adam.eps,
        t.adam.step,
        t.run_config().to_text()
    )
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    let head = header(t);
    out.write_u32::<LE>(head.len() as u32).unwrap();
    out.extend_from_slice(head.as_bytes());
    let entries = t.model.store.entries();
    out.write_u32::<LE>(entries.len() as u32).unwrap();
    for e in entries {
        out.write_u32::<LE>(e.name.len() as u32).unwrap();
        out.extend_from_slice(e.name.as_bytes());
        out.write_u8(match e.kind {
            ParamKind::Learnable => 0,
            ParamKind::Buffer => 1,
        })
        .unwrap();
        out.write_u32::<LE>(e.value.rank() as u32).unwrap();
        for &d in e.value.shape() {
            out.write_u64::<LE>(d as u64).unwrap();
        }
        for &v in e.value.data() {
            out.write_f64::<LE>(v).unwrap();
        }
    }
    for (m, v) in t.adam.m.iter().zip(&t.adam.v) {
        for moments in [m, v] {
            out.write_u64::<LE>(moments.len() as u64).unwrap();
            for &x in moments {
                out.write_f64::<LE>(x).unwrap();
            }
        }
    }
    out
}

fn truncated(_: std::io::Error) -> Error {
    Error::data("checkpoint is truncated")
}

fn read_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining / 8 {
        return Err(Error::data("checkpoint is truncated"));
    }
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v).map_err(truncated)?;
    Ok(v)
}

fn read_string(r: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::data("checkpoint is truncated"));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::data("checkpoint text is not UTF-8"))
}

fn meta<T: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<T> {
    let value = fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::data(format!("checkpoint header lacks {key}")))?;
    value
        .parse()
        .map_err(|_| Error::data(format!("checkpoint header has a bad {key}: {value:?}")))
}

/// Rebuilds the trainer a checkpoint was written from. The model structure
/// comes from the stored config; every stored entry must match it by name,
/// kind and shape.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::data("not a checkpoint file"));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u32::<LE>().map_err(truncated)? as usize;
    let text = read_string(&mut r, len)?;
    const META: [&str; 7] = ["seed", "epoch", "setup", "adam_beta1", "adam_beta2", "adam_eps", "adam_step"];
    let mut fields = Vec::new();
    let mut config_text = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if META.contains(&k.trim()) => fields.push((k.trim().to_string(), v.trim().to_string())),
            _ => {
                config_text.push_str(line);
                config_text.push('\n');
            }
        }
    }
    let config = RunConfig::parse(&config_text)?;
    let seed: u64 = meta(&fields, "seed")?;
    let mut model = build_model(&config.network, seed)?;
    let count = r.read_u32::<LE>().map_err(truncated)? as usize;
    if count != model.store.len() {
        return Err(Error::data(format!(
            "checkpoint has {count} entries, the configured model has {}",
            model.store.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name_len = r.read_u32::<LE>().map_err(truncated)? as usize;
        let name = read_string(&mut r, name_len)?;
        let kind = match r.read_u8().map_err(truncated)? {
            0 => ParamKind::Learnable,
            1 => ParamKind::Buffer,
            k => return Err(Error::data(format!("entry {name} has unknown kind {k}"))),
        };
        let rank = r.read_u32::<LE>().map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.read_u64::<LE>().map_err(truncated)? as usize);
        }
        let entry = model.store.entry(id);
        if entry.name != name || entry.kind != kind || entry.value.shape() != shape.as_slice() {
            return Err(Error::data(format!(
                "checkpoint entry {name} {shape:?} does not match model entry {} {:?}",
                entry.name,
                entry.value.shape()
            )));
        }
        let values = read_f64s(&mut r, entry.value.numel())?;
        model.store.set_data(id, values)?;
    }
    let mut adam = Adam::new(&model.store, config.train.weight_decay);
    for i in 0..count {
        for slot in 0..2 {
            let n = r.read_u64::<LE>().map_err(truncated)? as usize;
            let moments = read_f64s(&mut r, n)?;
            let target = if slot == 0 { &mut adam.m[i] } else { &mut adam.v[i] };
            if moments.len() != target.len() {
                return Err(Error::data(format!("optimizer state for entry {i} has the wrong length")));
            }
            *target = moments;
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    adam.beta1 = meta(&fields, "adam_beta1")?;
    adam.beta2 = meta(&fields, "adam_beta2")?;
    adam.eps = meta(&fields, "adam_eps")?;
    adam.step = meta(&fields, "adam_step")?;
    Ok(Trainer {
        model,
        adam,
        train: config.train,
        epoch: meta(&fields, "epoch")?,
        setup: meta(&fields, "setup")?,
    })
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn trainer() -> Trainer {
        let cfg = RunConfig {
            network: NetworkConfig {
                num_encoders: 1,
                k_neighbors: 3,
                num_clusters: 2,
                f0: 1,
                num_classes: 3,
                head_widths: vec![8],
                ..NetworkConfig::default()
            },
            ..RunConfig::default()
        };
        let mut t = Trainer::new(&cfg, 11, "p2").unwrap();
        t.epoch = 4;
        t.adam.step = 9;
        t.adam.m[0][0] = 0.25;
        t.adam.v[0][1] = 1e-300;
        t
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let t = trainer();
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model.store, t.model.store);
        assert_eq!(back.adam, t.adam);
        assert_eq!((back.epoch, back.setup.as_str()), (4, "p2"));
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_data_errors() {
        let bytes = to_bytes(&trainer());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Data(_))));
        assert!(matches!(from_bytes(b"nonsense"), Err(Error::Data(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Data(_))));
    }
}
