//! On-disk formats: SMEL mel files, token JSON-lines and checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::{DType, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;
use crate::model::{Model, ModelConfig, TokenSequence};
use crate::train::{AdamW, TrainConfig};

pub const SMEL_MAGIC: &[u8; 4] = b"SMEL";
pub const SMEL_VERSION: u32 = 1;
const SMEL_HEADER: usize = 20;

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

/// Serialize unstacked mel frames.
pub fn smel_bytes(mel: &MelSpectrogram) -> Result<Vec<u8>> {
    if mel.stack != 1 {
        return Err(Error::InvalidArgument(
            "SMEL stores unstacked frames".into(),
        ));
    }
    let mut out = Vec::with_capacity(SMEL_HEADER + 4 * mel.data.len());
    out.extend_from_slice(SMEL_MAGIC);
    for v in [
        SMEL_VERSION,
        mel.rows as u32,
        mel.width as u32,
        mel.valid_len as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &mel.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_smel(bytes: &[u8], file: &str) -> Result<MelSpectrogram> {
    if bytes.len() < SMEL_HEADER {
        return Err(Error::format(
            file,
            "header",
            format!("{} bytes, need {SMEL_HEADER}", bytes.len()),
        ));
    }
    if &bytes[..4] != SMEL_MAGIC {
        return Err(Error::format(file, "magic", "expected \"SMEL\""));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, rows, width, valid) = (
        word(0),
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
    );
    if version != SMEL_VERSION {
        return Err(Error::format(
            file,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    if width == 0 {
        return Err(Error::format(file, "n_bins", "must be positive"));
    }
    let expected = rows
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(SMEL_HEADER));
    if expected != Some(bytes.len()) {
        return Err(Error::format(
            file,
            "n_frames",
            format!(
                "{rows}×{width} frames need {expected:?} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if valid > rows {
        return Err(Error::format(
            file,
            "valid_len",
            format!("{valid} exceeds n_frames {rows}"),
        ));
    }
    let data = bytes[SMEL_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(MelSpectrogram {
        data,
        rows,
        width,
        stack: 1,
        valid_len: valid,
        config_hash: String::new(),
    })
}

pub fn write_smel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    fs::write(path, smel_bytes(mel)?)?;
    Ok(())
}

pub fn read_smel(path: &Path) -> Result<MelSpectrogram> {
    parse_smel(&fs::read(path)?, &name_of(path))
}

const TOKEN_FIELDS: [&str; 7] = [
    "id",
    "frame_rate",
    "cn",
    "cs",
    "valid_len",
    "tokens",
    "model_hash",
];

/// Parse one token line, naming the first field that is missing or wrong.
pub fn parse_token_line(line: &str, file: &str) -> Result<TokenSequence> {
    let v: Value =
        serde_json::from_str(line).map_err(|e| Error::format(file, "line", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::format(file, "line", "expected a JSON object"))?;
    for f in TOKEN_FIELDS {
        if !obj.contains_key(f) {
            return Err(Error::format(file, f, "missing"));
        }
    }
    let uint = |f: &str| {
        obj[f]
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| Error::format(file, f, "expected a non-negative integer"))
    };
    let id = obj["id"]
        .as_str()
        .ok_or_else(|| Error::format(file, "id", "expected a string"))?
        .to_string();
    let frame_rate = obj["frame_rate"]
        .as_f64()
        .filter(|r| *r > 0.0)
        .ok_or_else(|| Error::format(file, "frame_rate", "expected a positive number"))?;
    let (cn, cs, valid_len) = (uint("cn")?, uint("cs")?, uint("valid_len")?);
    if cn == 0 || cs == 0 {
        return Err(Error::format(
            file,
            if cn == 0 { "cn" } else { "cs" },
            "must be positive",
        ));
    }
    let model_hash = obj["model_hash"]
        .as_str()
        .filter(|h| !h.is_empty() && h.chars().all(|c| c.is_ascii_hexdigit()))
        .ok_or_else(|| Error::format(file, "model_hash", "expected a hex string"))?
        .to_string();
    let rows = obj["tokens"]
        .as_array()
        .ok_or_else(|| Error::format(file, "tokens", "expected an array"))?;
    let mut tokens = Vec::with_capacity(rows.len());
    for (t, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| Error::format(file, "tokens", format!("frame {t} is not an array")))?;
        if row.len() != cn {
            return Err(Error::format(
                file,
                "tokens",
                format!("frame {t} has {} codes, cn is {cn}", row.len()),
            ));
        }
        let mut codes = Vec::with_capacity(cn);
        for c in row {
            match c.as_u64() {
                Some(k) if (k as usize) < cs => codes.push(k as usize),
                _ => {
                    return Err(Error::format(
                        file,
                        "tokens",
                        format!("frame {t} has index {c} outside [0, {cs})"),
                    ));
                }
            }
        }
        tokens.push(codes);
    }
    if valid_len > tokens.len() {
        return Err(Error::format(
            file,
            "valid_len",
            format!("{valid_len} exceeds {} frames", tokens.len()),
        ));
    }
    let mel_valid_len = match obj.get("mel_valid_len") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            Error::format(file, "mel_valid_len", "expected a non-negative integer")
        })? as usize),
    };
    Ok(TokenSequence {
        id,
        frame_rate,
        cn,
        cs,
        valid_len,
        tokens,
        model_hash,
        mel_valid_len,
    })
}

pub fn write_tokens(path: &Path, seqs: &[TokenSequence]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        writeln!(out, "{}", serde_json::to_string(s)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenSequence>> {
    let name = name_of(path);
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_token_line(&line, &format!("{name}:{}", n + 1))?);
    }
    Ok(out)
}

pub const CKPT_MAGIC: &[u8; 4] = b"DTCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    name: String,
    dtype: DType,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CodebookMeta {
    cs: usize,
    cd: usize,
    decay: f64,
    initialized: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CkptHeader {
    dtype: DType,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: usize,
    adam_step: u64,
    model_hash: String,
    data_sha256: String,
    params: Vec<(String, Vec<usize>, bool)>,
    codebooks: Vec<CodebookMeta>,
    blobs: Vec<Blob>,
}

/// Everything needed to resume training or run inference.
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub opt: Option<AdamW<S>>,
}

/// Serialize model, optimizer state and step. Values are stored
/// little-endian so a roundtrip is bit-exact.
pub fn checkpoint_bytes<S: Scalar>(
    model: &Model<S>,
    train: Option<&TrainConfig>,
    step: usize,
    opt: Option<&AdamW<S>>,
) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut data = Vec::new();
    let push_s = |name: String, vals: &[S], blobs: &mut Vec<Blob>, data: &mut Vec<u8>| {
        blobs.push(Blob {
            name,
            dtype: S::DTYPE,
            len: vals.len(),
        });
        vals.iter().for_each(|&v| v.write_le(data));
    };
    for (name, t) in model.params.iter() {
        push_s(format!("param:{name}"), t.data(), &mut blobs, &mut data);
    }
    if let Some(opt) = opt {
        for (i, (name, _)) in model.params.iter().enumerate() {
            push_s(format!("adam_m:{name}"), &opt.m[i], &mut blobs, &mut data);
            push_s(format!("adam_v:{name}"), &opt.v[i], &mut blobs, &mut data);
        }
    }
    for (i, cb) in model.quantizer.codebooks.iter().enumerate() {
        for (field, vals) in [
            ("entries", &cb.entries),
            ("ema_count", &cb.ema_count),
            ("ema_sum", &cb.ema_sum),
        ] {
            blobs.push(Blob {
                name: format!("codebook{i}.{field}"),
                dtype: DType::F64,
                len: vals.len(),
            });
            vals.iter()
                .for_each(|v| data.extend_from_slice(&v.to_le_bytes()));
        }
    }
    let header = CkptHeader {
        dtype: S::DTYPE,
        model: model.config.clone(),
        train: train.cloned(),
        step,
        adam_step: opt.map_or(0, |o| o.step),
        model_hash: model.hash(),
        data_sha256: hex_digest(&data),
        params: model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.requires_grad))
            .collect(),
        codebooks: model
            .quantizer
            .codebooks
            .iter()
            .map(|c| CodebookMeta {
                cs: c.cs,
                cd: c.cd,
                decay: c.decay,
                initialized: c.initialized,
            })
            .collect(),
        blobs,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn parse_checkpoint<S: Scalar>(bytes: &[u8], file: &str) -> Result<Checkpoint<S>> {
    if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::format(file, "magic", "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::format(
            file,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| Error::format(file, "header", "truncated"))?;
    let header: CkptHeader =
        serde_json::from_slice(body).map_err(|e| Error::format(file, "header", e.to_string()))?;
    if header.dtype != S::DTYPE {
        return Err(Error::Mismatch(format!(
            "checkpoint {file} stores {:?} values, expected {:?}",
            header.dtype,
            S::DTYPE
        )));
    }
    let mut cursor = 16 + hlen;
    if hex_digest(&bytes[cursor..]) != header.data_sha256 {
        return Err(Error::format(
            file,
            "data_sha256",
            "tensor data is corrupt or truncated",
        ));
    }
    let mut next = |blob: &Blob| -> Result<&[u8]> {
        let n = blob.len * blob.dtype.size();
        let out = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| Error::format(file, &blob.name, "truncated"))?;
        cursor += n;
        Ok(out)
    };

    let mut model = Model::<S>::new(header.model.clone(), 0)?;
    let mut blobs = header.blobs.iter();
    let mut take = |expect: &str| -> Result<(DType, &[u8])> {
        let blob = blobs
            .next()
            .ok_or_else(|| Error::format(file, expect, "missing"))?;
        if blob.name != expect {
            return Err(Error::format(
                file,
                expect,
                format!("found {} instead", blob.name),
            ));
        }
        Ok((blob.dtype, next(blob)?))
    };
    let decode_f64 = |raw: &[u8]| -> Vec<f64> {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut take_s = |expect: &str| -> Result<Vec<S>> {
        let (dtype, raw) = take(expect)?;
        Ok(match dtype {
            DType::F64 => decode_f64(raw).into_iter().map(S::from_f64).collect(),
            DType::F32 => raw.chunks_exact(4).map(S::read_le).collect(),
        })
    };
    if header.params.len() != model.params.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint {file} has {} tensors, config builds {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for (name, shape, trainable) in &header.params {
        let data = take_s(&format!("param:{name}"))?;
        model.params.load(name, Tensor::new(shape.clone(), data)?)?;
        let id = model.params.id(name).expect("loaded above");
        model.params.get_mut(id).requires_grad = *trainable;
    }
    let opt = if header.adam_step > 0 || header.blobs.iter().any(|b| b.name.starts_with("adam_m:"))
    {
        let mut o = AdamW::new(std::iter::empty());
        o.step = header.adam_step;
        for (name, _, _) in &header.params {
            o.m.push(take_s(&format!("adam_m:{name}"))?);
            o.v.push(take_s(&format!("adam_v:{name}"))?);
        }
        Some(o)
    } else {
        None
    };
    if header.codebooks.len() != model.quantizer.codebooks.len() {
        return Err(Error::format(
            file,
            "codebooks",
            "count does not match config",
        ));
    }
    for (i, meta) in header.codebooks.iter().enumerate() {
        let mut field = |f: &str| -> Result<Vec<f64>> {
            let name = format!("codebook{i}.{f}");
            match take(&name)? {
                (DType::F64, raw) => Ok(decode_f64(raw)),
                _ => Err(Error::format(file, name, "expected f64 values")),
            }
        };
        let (entries, count, sum) = (field("entries")?, field("ema_count")?, field("ema_sum")?);
        let cb = &mut model.quantizer.codebooks[i];
        if entries.len() != meta.cs * meta.cd
            || count.len() != meta.cs
            || sum.len() != meta.cs * meta.cd
        {
            return Err(Error::format(
                file,
                format!("codebook{i}"),
                "size does not match cs×cd",
            ));
        }
        cb.cs = meta.cs;
        cb.cd = meta.cd;
        cb.decay = meta.decay;
        cb.initialized = meta.initialized;
        cb.entries = entries;
        cb.ema_count = count;
        cb.ema_sum = sum;
    }
    if model.hash() != header.model_hash {
        return Err(Error::format(
            file,
            "model_hash",
            "content does not match stored hash",
        ));
    }
    Ok(Checkpoint {
        model,
        train: header.train,
        step: header.step,
        opt,
    })
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    train: Option<&TrainConfig>,
    step: usize,
    opt: Option<&AdamW<S>>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, train, step, opt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    parse_checkpoint(&fs::read(path)?, &name_of(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mel(rows: usize, width: usize, valid: usize, seed: u32) -> MelSpectrogram {
        MelSpectrogram {
            data: (0..rows * width)
                .map(|i| (i as f32 + seed as f32) * 0.37 - 5.0)
                .collect(),
            rows,
            width,
            stack: 1,
            valid_len: valid,
            config_hash: String::new(),
        }
    }

    #[test]
    fn smel_size_and_roundtrip() {
        let m = mel(7, 3, 5, 0);
        let b = smel_bytes(&m).unwrap();
        assert_eq!(b.len(), 20 + 4 * 7 * 3);
        assert_eq!(parse_smel(&b, "x").unwrap(), m);
    }

    #[test]
    fn smel_rejections_name_field() {
        let b = smel_bytes(&mel(4, 2, 4, 0)).unwrap();
        let err = |bytes: &[u8]| parse_smel(bytes, "f").unwrap_err().to_string();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(err(&bad).contains("magic"));
        assert!(err(&b[..b.len() - 1]).contains("n_frames"));
        let mut bad = b.clone();
        bad[16..20].copy_from_slice(&9u32.to_le_bytes());
        assert!(err(&bad).contains("valid_len"));
        let mut bad = b.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(err(&bad).contains("version"));
    }

    proptest! {
        #[test]
        fn smel_bit_exact(rows in 0usize..6, width in 1usize..5, bits in proptest::collection::vec(any::<u32>(), 30)) {
            let data: Vec<f32> = (0..rows * width).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
            let m = MelSpectrogram { data, rows, width, stack: 1, valid_len: rows, config_hash: String::new() };
            let back = parse_smel(&smel_bytes(&m).unwrap(), "p").unwrap();
            let a: Vec<u32> = m.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    fn seq() -> TokenSequence {
        TokenSequence {
            id: "a".into(),
            frame_rate: 12.5,
            cn: 2,
            cs: 4,
            valid_len: 2,
            tokens: vec![vec![0, 3], vec![1, 2]],
            model_hash: "00ff".into(),
            mel_valid_len: None,
        }
    }

    #[test]
    fn token_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let mut b = seq();
        b.id = "b".into();
        b.mel_valid_len = Some(7);
        write_tokens(&p, &[seq(), b.clone()]).unwrap();
        assert_eq!(read_tokens(&p).unwrap(), vec![seq(), b]);
    }

    #[test]
    fn token_rejections_name_field() {
        let line = |f: &dyn Fn(&mut Value)| {
            let mut v = serde_json::to_value(seq()).unwrap();
            f(&mut v);
            parse_token_line(&v.to_string(), "t")
                .unwrap_err()
                .to_string()
        };
        assert!(line(&|v| v["tokens"][0][1] = 4.into()).contains("tokens"));
        assert!(line(&|v| v["tokens"][1] = serde_json::json!([1])).contains("tokens"));
        assert!(line(&|v| v["valid_len"] = 3.into()).contains("valid_len"));
        assert!(line(&|v| {
            v.as_object_mut().unwrap().remove("cs");
        })
        .contains("cs"));
        assert!(line(&|v| v["model_hash"] = "xyz".into()).contains("model_hash"));
        assert!(line(&|v| v["frame_rate"] = (-1).into()).contains("frame_rate"));
    }

    #[test]
    fn checkpoint_bit_exact() {
        let mut model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        model.set_trainable("encoder", false).unwrap();
        model.quantizer.codebooks[0].ema_count[1] = 0.1 + 0.2;
        let mut opt = AdamW::<f32>::new(model.params.iter().map(|(_, t)| t.numel()));
        opt.step = 5;
        opt.m[0][0] = 1.0e-7;
        opt.v[2][0] = f32::MIN_POSITIVE;
        let tc = TrainConfig::desk();
        let bytes = checkpoint_bytes(&model, Some(&tc), 5, Some(&opt)).unwrap();
        let ck: Checkpoint<f32> = parse_checkpoint(&bytes, "c").unwrap();
        assert_eq!(ck.step, 5);
        assert_eq!(ck.train, Some(tc.clone()));
        assert_eq!(ck.opt.as_ref().unwrap(), &opt);
        assert_eq!(ck.model.quantizer, model.quantizer);
        for ((n, a), (_, b)) in model.params.iter().zip(ck.model.params.iter()) {
            assert_eq!(a.data(), b.data(), "{n}");
            assert_eq!(a.requires_grad, b.requires_grad, "{n}");
        }
        let again =
            checkpoint_bytes(&ck.model, ck.train.as_ref(), ck.step, ck.opt.as_ref()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption_and_precision() {
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let bytes = checkpoint_bytes(&model, None, 0, None).unwrap();
        assert!(parse_checkpoint::<f64>(&bytes, "c").is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 0x40;
        assert!(parse_checkpoint::<f32>(&bad, "c")
            .err()
            .unwrap()
            .to_string()
            .contains("data_sha256"));
        assert!(parse_checkpoint::<f32>(&bytes[..n - 3], "c").is_err());
    }

    #[test]
    fn shortcut_checkpoint_restores_pathway() {
        let mut model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        model.enable_shortcut(9);
        let bytes = checkpoint_bytes(&model, None, 0, None).unwrap();
        let ck: Checkpoint<f32> = parse_checkpoint(&bytes, "c").unwrap();
        assert!(ck.model.decoder.has_step_embedding());
        assert_eq!(ck.model.hash(), model.hash());
    }
}
