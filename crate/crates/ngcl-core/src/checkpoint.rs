//! Versioned binary checkpoints.
//!
//! Layout: magic `NGCL`, u16 LE version, u32 LE section count, then
//! sections of `u16 name_len | name | u64 payload_len | payload`.
//! Tensor lists are `u32 count` followed by `u32 rows | u32 cols | data`
//! with entries as little-endian f64 bit patterns, so a save/load
//! round-trip is bit-identical.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderParams, GateParams, Layer};
use crate::tensor::Tensor;
use crate::trainer::OptState;

pub const MAGIC: [u8; 4] = *b"NGCL";
pub const VERSION: u16 = 1;

/// Everything a resumed or evaluated run needs.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    /// Opaque run configuration (canonical JSON text owned by the caller).
    pub config_json: String,
    pub encoder: EncoderParams,
    pub gate: Option<GateParams>,
    pub opt_encoder: OptState,
    pub opt_gate: Option<OptState>,
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_tensor_list(buf: &mut Vec<u8>, tensors: &[&Tensor]) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        push_tensor(buf, t);
    }
}

fn layer_tensors(layers: &[Layer]) -> Vec<&Tensor> {
    layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .collect()
}

fn opt_section(state: &OptState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&state.step.to_le_bytes());
    push_tensor_list(&mut buf, &state.velocity.iter().collect::<Vec<_>>());
    buf
}

fn section(buf: &mut Vec<u8>, name: &str, payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
    sections.push(("config", bundle.config_json.as_bytes().to_vec()));
    {
        let mut enc = Vec::new();
        enc.push(bundle.encoder.nonneg_output as u8);
        push_tensor_list(&mut enc, &layer_tensors(&bundle.encoder.layers));
        sections.push(("encoder", enc));
    }
    {
        let mut gate = Vec::new();
        match &bundle.gate {
            Some(g) => {
                gate.push(1);
                push_tensor_list(&mut gate, &layer_tensors(&g.layers));
            }
            None => gate.push(0),
        }
        sections.push(("gate", gate));
    }
    sections.push(("opt_encoder", opt_section(&bundle.opt_encoder)));
    {
        let mut og = Vec::new();
        match &bundle.opt_gate {
            Some(s) => {
                og.push(1);
                og.extend_from_slice(&opt_section(s));
            }
            None => og.push(0),
        }
        sections.push(("opt_gate", og));
    }

    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in &sections {
        section(&mut buf, name, payload);
    }

    // Atomic-ish write: temp file in the same directory, then rename.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Cursor with offset-carrying errors.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32("tensor rows")? as usize;
        let cols = self.u32("tensor cols")? as usize;
        let raw = self.take(rows * cols * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(rows, cols, data)
    }

    fn tensor_list(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32("tensor count")? as usize;
        (0..count).map(|_| self.tensor()).collect()
    }
}

fn layers_from_tensors(tensors: Vec<Tensor>, offset: u64) -> Result<Vec<Layer>> {
    if tensors.len() % 2 != 0 {
        return Err(Error::Checkpoint {
            offset,
            detail: "layer tensor list has odd length".into(),
        });
    }
    let mut layers = Vec::with_capacity(tensors.len() / 2);
    let mut it = tensors.into_iter();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::Checkpoint {
                offset,
                detail: "bias shape does not match weight".into(),
            });
        }
        layers.push(Layer { weight, bias });
    }
    Ok(layers)
}

fn opt_from_bytes(bytes: &[u8]) -> Result<OptState> {
    let mut r = Reader { bytes, pos: 0 };
    let step = r.u64("optimizer step")?;
    let velocity = r.tensor_list()?;
    Ok(OptState { step, velocity })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32("section count")?;
    let mut config_json = None;
    let mut encoder = None;
    let mut gate = None;
    let mut opt_encoder = None;
    let mut opt_gate = None;
    for _ in 0..count {
        let name_len = r.u16("section name length")? as usize;
        let name_off = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "section name")?)
            .map_err(|_| Error::Checkpoint {
                offset: name_off,
                detail: "section name is not utf-8".into(),
            })?
            .to_string();
        let payload_len = r.u64("section length")? as usize;
        let payload_off = r.pos as u64;
        let payload = r.take(payload_len, "section payload")?;
        let mut pr = Reader {
            bytes: payload,
            pos: 0,
        };
        match name.as_str() {
            "config" => {
                config_json = Some(String::from_utf8(payload.to_vec()).map_err(|_| {
                    Error::Checkpoint {
                        offset: payload_off,
                        detail: "config payload is not utf-8".into(),
                    }
                })?)
            }
            "encoder" => {
                let nonneg = pr.u8("nonneg flag")? != 0;
                let layers = layers_from_tensors(pr.tensor_list()?, payload_off)?;
                encoder = Some(EncoderParams {
                    layers,
                    nonneg_output: nonneg,
                });
            }
            "gate" => {
                if pr.u8("gate flag")? != 0 {
                    let layers = layers_from_tensors(pr.tensor_list()?, payload_off)?;
                    gate = Some(GateParams { layers });
                }
            }
            "opt_encoder" => opt_encoder = Some(opt_from_bytes(payload)?),
            "opt_gate" => {
                if pr.u8("opt gate flag")? != 0 {
                    opt_gate = Some(opt_from_bytes(&payload[1..])?);
                }
            }
            _ => {} // unknown sections are skipped for forward compat
        }
    }
    let missing = |what: &str| Error::Checkpoint {
        offset: bytes.len() as u64,
        detail: format!("missing {what} section"),
    };
    Ok(CheckpointBundle {
        config_json: config_json.ok_or_else(|| missing("config"))?,
        encoder: encoder.ok_or_else(|| missing("encoder"))?,
        gate,
        opt_encoder: opt_encoder.ok_or_else(|| missing("opt_encoder"))?,
        opt_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bundle() -> CheckpointBundle {
        let mut rng = Rng::new(99);
        let encoder = EncoderParams::init(&[4, 5, 3], true, &mut rng).unwrap();
        let gate = GateParams::init(3, 2, &mut rng).unwrap();
        let velocity = encoder
            .layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .map(|t| t.map(|_| rng.normal()))
            .collect();
        CheckpointBundle {
            config_json: "{\"seed\":99}".to_string(),
            encoder,
            gate: Some(gate),
            opt_encoder: OptState {
                step: 17,
                velocity,
            },
            opt_gate: Some(OptState {
                step: 17,
                velocity: vec![],
            }),
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ngcl");
        let b = bundle();
        save_checkpoint(&b, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_json, b.config_json);
        assert_eq!(loaded.encoder, b.encoder);
        assert_eq!(loaded.gate, b.gate);
        assert_eq!(loaded.opt_encoder.step, 17);
        for (a, b) in loaded.opt_encoder.velocity.iter().zip(&b.opt_encoder.velocity) {
            assert_eq!(a.data(), b.data());
        }
        // Saving twice produces identical bytes.
        let path2 = dir.path().join("run2.ngcl");
        save_checkpoint(&b, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ngcl");
        save_checkpoint(&bundle(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint { offset, .. }) => assert!(offset > 0),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn version_bump_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ngcl");
        save_checkpoint(&bundle(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2; // version low byte
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ngcl");
        std::fs::write(&path, b"XXXX rest").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }
}
