//! On-disk checkpoint envelope.
//!
//! Layout: 6-byte magic `CLCKPT`, u32 LE format version, then a sequence of
//! named sections (u32 LE name length, name bytes, u64 LE payload length,
//! JSON payload). Sections are self-describing so `inspect` tooling can show
//! a checkpoint without loading the experiment. Writes go through a temp
//! file in the target directory and an atomic rename — a crash mid-write
//! leaves the previous checkpoint intact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Clock;

pub const MAGIC: &[u8; 6] = b"CLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaSection {
    pub config_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProgressSection {
    /// Index of the next experience to train (everything before it is done).
    pub next_experience: usize,
    pub clock: Clock,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngSection {
    pub shuffle_rng: ChaCha8Rng,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerSection {
    #[serde(rename = "type")]
    pub kind: String,
    pub lr: f64,
}

/// One training run frozen at an experience boundary (written after the
/// post-experience evaluation, so logger offsets include its metrics).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: MetaSection,
    pub progress: ProgressSection,
    pub rng: RngSection,
    pub model: serde_json::Value,
    pub optimizer: OptimizerSection,
    pub plugins: serde_json::Value,
    pub evaluator: serde_json::Value,
    /// Logger name -> byte offset its file sink had reached.
    pub loggers: BTreeMap<String, u64>,
}

fn put_section(buf: &mut Vec<u8>, name: &str, payload: &serde_json::Value) -> Result<()> {
    let body = serde_json::to_vec(payload)?;
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(body.len() as u64).to_le_bytes());
    buf.extend_from_slice(&body);
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_section(&mut buf, "meta", &serde_json::to_value(&self.meta)?)?;
        put_section(&mut buf, "progress", &serde_json::to_value(&self.progress)?)?;
        put_section(&mut buf, "rng", &serde_json::to_value(&self.rng)?)?;
        put_section(&mut buf, "model", &self.model)?;
        put_section(&mut buf, "optimizer", &serde_json::to_value(&self.optimizer)?)?;
        put_section(&mut buf, "plugins", &self.plugins)?;
        put_section(&mut buf, "evaluator", &self.evaluator)?;
        put_section(&mut buf, "loggers", &serde_json::to_value(&self.loggers)?)?;
        Ok(buf)
    }

    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let mut tmp = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                tempfile::NamedTempFile::new_in(d)?
            }
            None => tempfile::NamedTempFile::new_in(".")?,
        };
        tmp.write_all(&bytes)?;
        tmp.flush()?;
        tmp.persist(path)
            .map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let sections = read_sections(bytes)?;
        let mut sections = sections;
        let mut take = |name: &str| -> Result<serde_json::Value> {
            sections
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing section `{name}`")))
        };
        let ck = Checkpoint {
            meta: serde_json::from_value(take("meta")?)?,
            progress: serde_json::from_value(take("progress")?)?,
            rng: serde_json::from_value(take("rng")?)?,
            model: take("model")?,
            optimizer: serde_json::from_value(take("optimizer")?)?,
            plugins: take("plugins")?,
            evaluator: take("evaluator")?,
            loggers: serde_json::from_value(take("loggers")?)?,
        };
        if let Some(name) = sections.keys().next() {
            return Err(Error::Format(format!(
                "checkpoint has unrecognized section `{name}`"
            )));
        }
        Ok(ck)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Parse the envelope into raw named sections. Shared with `inspect`, which
/// wants section names and sizes without deserializing run state.
pub fn read_sections(bytes: &[u8]) -> Result<BTreeMap<String, serde_json::Value>> {
    let mut pos = 0usize;
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > bytes.len() {
            Err(Error::Format(format!(
                "truncated checkpoint: expected {what} at byte {pos}"
            )))
        } else {
            Ok(())
        }
    };

    need(pos, MAGIC.len(), "magic")?;
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    pos += MAGIC.len();

    need(pos, 4, "version")?;
    let version = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    pos += 4;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }

    let mut sections = BTreeMap::new();
    while pos < bytes.len() {
        need(pos, 4, "section name length")?;
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, name_len, "section name")?;
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        pos += name_len;
        need(pos, 8, "payload length")?;
        let payload_len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        need(pos, payload_len, "payload")?;
        let value: serde_json::Value = serde_json::from_slice(&bytes[pos..pos + payload_len])?;
        pos += payload_len;
        if sections.insert(name.clone(), value).is_some() {
            return Err(Error::Format(format!("duplicate section `{name}`")));
        }
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: MetaSection {
                config_digest: "ab".repeat(32),
            },
            progress: ProgressSection {
                next_experience: 3,
                clock: Clock {
                    total_iterations: 120,
                    epochs_in_current_exp: 0,
                    experiences_seen: 3,
                },
            },
            rng: RngSection {
                shuffle_rng: ChaCha8Rng::seed_from_u64(9),
            },
            model: serde_json::json!({"layers": [1, 2]}),
            optimizer: OptimizerSection {
                kind: "sgd".into(),
                lr: 0.05,
            },
            plugins: serde_json::json!({"replay": {"seen": 40}}),
            evaluator: serde_json::json!({"matrix": []}),
            loggers: BTreeMap::from([("csv".to_string(), 512u64), ("jsonl".to_string(), 700)]),
        }
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let ck = sample();
        ck.write_atomic(&path).unwrap();

        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.meta.config_digest, ck.meta.config_digest);
        assert_eq!(back.progress.next_experience, 3);
        assert_eq!(back.progress.clock.total_iterations, 120);
        assert_eq!(back.rng.shuffle_rng, ck.rng.shuffle_rng);
        assert_eq!(back.model, ck.model);
        assert_eq!(back.optimizer.kind, "sgd");
        assert_eq!(back.optimizer.lr, 0.05);
        assert_eq!(back.plugins, ck.plugins);
        assert_eq!(back.evaluator, ck.evaluator);
        assert_eq!(back.loggers, ck.loggers);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.kind(), "format-error");
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn rejects_future_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[6..10].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.kind(), "version-error");
        match err {
            Error::Version { found, supported } => {
                assert_eq!(found, 7);
                assert_eq!(supported, CHECKPOINT_VERSION);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_truncation_at_every_boundary() {
        let bytes = sample().to_bytes().unwrap();
        // Chop at a spread of prefix lengths; every cut must fail cleanly
        // (truncated payloads may surface as JSON parse errors, also Format).
        for cut in [0, 3, 6, 8, 10, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert_eq!(err.kind(), "format-error", "cut at {cut}");
        }
    }

    #[test]
    fn rejects_missing_section() {
        // Rebuild the envelope without the `rng` section.
        let ck = sample();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, value) in [
            ("meta", serde_json::to_value(&ck.meta).unwrap()),
            ("progress", serde_json::to_value(&ck.progress).unwrap()),
            ("model", ck.model.clone()),
            ("optimizer", serde_json::to_value(&ck.optimizer).unwrap()),
            ("plugins", ck.plugins.clone()),
            ("evaluator", ck.evaluator.clone()),
            ("loggers", serde_json::to_value(&ck.loggers).unwrap()),
        ] {
            put_section(&mut buf, name, &value).unwrap();
        }
        let err = Checkpoint::from_bytes(&buf).unwrap_err();
        assert_eq!(err.kind(), "format-error");
        assert!(err.to_string().contains("rng"));
    }

    #[test]
    fn write_failure_leaves_previous_checkpoint_intact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        sample().write_atomic(&path).unwrap();
        let original = std::fs::read(&path).unwrap();

        // A fresh write lands completely or not at all: after another
        // successful write the bytes are the new payload, never a blend.
        let mut second = sample();
        second.progress.next_experience = 4;
        second.write_atomic(&path).unwrap();
        let replaced = std::fs::read(&path).unwrap();
        assert_ne!(replaced, original);
        assert_eq!(
            Checkpoint::from_bytes(&replaced).unwrap().progress.next_experience,
            4
        );

        // No temp droppings left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .filter(|n| n != "run.ckpt")
            .collect();
        assert!(leftovers.is_empty(), "stray files: {leftovers:?}");
    }
}
