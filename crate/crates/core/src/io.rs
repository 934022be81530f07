//! Dataset export and network checkpoints.
//!
//! Binary dataset layout, all integers little-endian:
//!
//! ```text
//! magic    b"SRHMDATA"
//! version  u32 = 1
//! params   n_classes u32, vocab u32, synonyms u32, branching u32,
//!          depth u32, gaps u32, sparsity u8 (0 None, 1 A, 2 B),
//!          3 zero bytes, seed u64
//! count    u64
//! rows     u32   (input positions d)
//! cols     u32   (vocabulary v)
//! inputs   count * rows * cols u8, row-major per sample
//! labels   count u16
//! ```
//!
//! The JSON-lines form has a header object followed by one object per
//! sample listing its informative `[position, feature]` pairs.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic    b"SRHMNET\0"
//! version  u32 = 1
//! spec     u32 length + JSON architecture spec
//! width    u8 (4 = f32, 8 = f64)
//! frozen   u8 (readout frozen)
//! layers   u32 count, then per layer u64 length + raw values
//! readout  u64 length + raw values
//! ```

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Dataset, GrammarParams, InputMatrix, Sparsity};
use crate::nn::{ArchitectureSpec, Network, Scalar};

const DATA_MAGIC: &[u8; 8] = b"SRHMDATA";
const NET_MAGIC: &[u8; 8] = b"SRHMNET\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(IoError::Format(msg.into()))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn sparsity_code(s: Sparsity) -> u8 {
    match s {
        Sparsity::None => 0,
        Sparsity::A => 1,
        Sparsity::B => 2,
    }
}

pub fn write_dataset<W: Write>(mut w: W, params: &GrammarParams, data: &Dataset) -> Result<()> {
    let (rows, cols) = (params.input_dim(), params.vocab);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for x in [params.n_classes, params.vocab, params.synonyms, params.branching, params.depth, params.gaps] {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    w.write_all(&[sparsity_code(params.sparsity), 0, 0, 0])?;
    w.write_all(&params.seed.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for x in &data.inputs {
        if x.rows != rows || x.cols != cols {
            return bad(format!("sample is {}x{}, grammar gives {rows}x{cols}", x.rows, x.cols));
        }
        w.write_all(&x.data)?;
    }
    for &y in &data.labels {
        w.write_all(&y.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(GrammarParams, Dataset)> {
    if &read_array::<8>(&mut r)? != DATA_MAGIC {
        return bad("not a dataset file");
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return bad(format!("unsupported dataset version {version}"));
    }
    let mut f = [0usize; 6];
    for x in f.iter_mut() {
        *x = read_u32(&mut r)? as usize;
    }
    let tail: [u8; 4] = read_array(&mut r)?;
    let sparsity = match tail[0] {
        0 => Sparsity::None,
        1 => Sparsity::A,
        2 => Sparsity::B,
        c => return bad(format!("unknown sparsity code {c}")),
    };
    let seed = read_u64(&mut r)?;
    let params = GrammarParams {
        n_classes: f[0],
        vocab: f[1],
        synonyms: f[2],
        branching: f[3],
        depth: f[4],
        gaps: f[5],
        sparsity,
        seed,
    };
    let count = read_u64(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut inputs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x = InputMatrix::zeros(rows, cols);
        r.read_exact(&mut x.data)?;
        inputs.push(x);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(u16::from_le_bytes(read_array(&mut r)?));
    }
    Ok((params, Dataset { inputs, labels, trees: None }))
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    format: String,
    version: u32,
    params: GrammarParams,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    label: u16,
    features: Vec<(usize, u16)>,
}

pub fn write_dataset_jsonl<W: Write>(mut w: W, params: &GrammarParams, data: &Dataset) -> Result<()> {
    let header =
        JsonHeader { format: "srhm-dataset".into(), version: VERSION, params: params.clone(), count: data.len() };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        writeln!(w, "{}", serde_json::to_string(&JsonSample { label, features: x.informative() })?)?;
    }
    Ok(())
}

pub fn read_dataset_jsonl<R: BufRead>(r: R) -> Result<(GrammarParams, Dataset)> {
    let mut lines = r.lines();
    let Some(first) = lines.next() else { return bad("empty file") };
    let header: JsonHeader = serde_json::from_str(&first?)?;
    if header.format != "srhm-dataset" || header.version != VERSION {
        return bad("not a version 1 srhm-dataset");
    }
    let (rows, cols) = (header.params.input_dim(), header.params.vocab);
    let mut inputs = Vec::with_capacity(header.count);
    let mut labels = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: JsonSample = serde_json::from_str(&line)?;
        if s.features.iter().any(|&(p, f)| p >= rows || f as usize >= cols) {
            return bad("feature outside the input grid");
        }
        inputs.push(InputMatrix::from_informative(rows, cols, &s.features));
        labels.push(s.label);
    }
    if labels.len() != header.count {
        return bad(format!("header announces {} samples, found {}", header.count, labels.len()));
    }
    Ok((header.params, Dataset { inputs, labels, trees: None }))
}

fn write_values<T: Scalar, W: Write>(w: &mut W, v: &[T]) -> Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        let x = x.to_f64().unwrap();
        if size_of::<T>() == 4 {
            w.write_all(&(x as f32).to_le_bytes())?;
        } else {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_values<T: Scalar, R: Read>(r: &mut R, width: u8, expect: usize) -> Result<Vec<T>> {
    let n = read_u64(r)? as usize;
    if n != expect {
        return bad(format!("tensor has {n} values, spec needs {expect}"));
    }
    (0..n)
        .map(|_| {
            Ok(T::of(match width {
                4 => f32::from_le_bytes(read_array(r)?) as f64,
                _ => f64::from_le_bytes(read_array(r)?),
            }))
        })
        .collect()
}

/// Save in the network's own precision.
pub fn save_network<T: Scalar, W: Write>(mut w: W, net: &Network<T>) -> Result<()> {
    w.write_all(NET_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&net.spec)?;
    w.write_all(&(spec.len() as u32).to_le_bytes())?;
    w.write_all(&spec)?;
    w.write_all(&[size_of::<T>() as u8, net.readout_frozen as u8])?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for layer in &net.layers {
        write_values(&mut w, layer)?;
    }
    write_values(&mut w, &net.readout)?;
    Ok(())
}

/// Load into precision `T`, converting if the file was saved in the other one.
pub fn load_network<T: Scalar, R: Read>(mut r: R) -> Result<Network<T>> {
    if &read_array::<8>(&mut r)? != NET_MAGIC {
        return bad("not a checkpoint");
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return bad(format!("unsupported checkpoint version {version}"));
    }
    let len = read_u32(&mut r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let spec: ArchitectureSpec = serde_json::from_slice(&buf)?;
    spec.validate().map_err(|e| IoError::Format(e.to_string()))?;
    let [width, frozen] = read_array::<2>(&mut r)?;
    if width != 4 && width != 8 {
        return bad(format!("unknown value width {width}"));
    }
    let shapes = spec.layer_shapes();
    if read_u32(&mut r)? as usize != shapes.len() {
        return bad("layer count does not match the architecture");
    }
    let layers = shapes.iter().map(|s| read_values(&mut r, width, s.n_weights())).collect::<Result<Vec<_>>>()?;
    let readout = read_values(&mut r, width, spec.n_classes * spec.widths.last().unwrap())?;
    Ok(Network { spec, layers, readout, readout_frozen: frozen != 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_ruleset, generate_dataset};
    use crate::nn::{ArchKind, InitMode, OutputScaling};
    use crate::StreamKey;

    fn params() -> GrammarParams {
        GrammarParams {
            n_classes: 3,
            vocab: 4,
            synonyms: 2,
            branching: 2,
            depth: 2,
            gaps: 1,
            sparsity: Sparsity::B,
            seed: 17,
        }
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let p = params();
        let data = generate_dataset(&build_ruleset(&p).unwrap(), 9, StreamKey::new(1), false);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &p, &data).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 24 + 4 + 8 + 8 + 8 + 9 * 16 * 4 + 9 * 2);
        let (q, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(q, p);
        assert_eq!(back, data);
        let mut again = Vec::new();
        write_dataset(&mut again, &p, &data).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn jsonl_round_trip() {
        let p = params();
        let data = generate_dataset(&build_ruleset(&p).unwrap(), 5, StreamKey::new(2), false);
        let mut buf = Vec::new();
        write_dataset_jsonl(&mut buf, &p, &data).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 6);
        let (q, back) = read_dataset_jsonl(buf.as_slice()).unwrap();
        assert_eq!((q, back), (p, data));
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let p = params();
        let data = generate_dataset(&build_ruleset(&p).unwrap(), 3, StreamKey::new(1), false);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &p, &data).unwrap();
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        assert!(read_dataset(&b"SRHMNET\0xxxx"[..]).is_err());
        assert!(load_network::<f64, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = params();
        for kind in [ArchKind::Lcn, ArchKind::Cnn, ArchKind::Fcn] {
            let spec = ArchitectureSpec::for_grammar(kind, &p, 6, OutputScaling::Standard);
            let net = Network::<f64>::init(&spec, InitMode::Standard, StreamKey::new(3)).unwrap();
            let mut buf = Vec::new();
            save_network(&mut buf, &net).unwrap();
            assert_eq!(load_network::<f64, _>(buf.as_slice()).unwrap(), net);
            let small = net.cast::<f32>();
            let mut buf = Vec::new();
            save_network(&mut buf, &small).unwrap();
            assert_eq!(load_network::<f32, _>(buf.as_slice()).unwrap(), small);
        }
        let spec = ArchitectureSpec::for_grammar(ArchKind::Lcn, &p, 4, OutputScaling::MeanField);
        let net = Network::<f64>::init(&spec, InitMode::FrozenReadout, StreamKey::new(3)).unwrap();
        let mut buf = Vec::new();
        save_network(&mut buf, &net).unwrap();
        assert!(load_network::<f64, _>(buf.as_slice()).unwrap().readout_frozen);
    }
}
