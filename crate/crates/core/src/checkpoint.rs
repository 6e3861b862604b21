//! Model checkpoints: a tensor blob plus a plain-text manifest.
//!
//! `checkpoint.manifest` holds the format version, the vocabulary hashes, the
//! full model configuration as `config key=value` lines and the blob index.
//! `params.bin` holds every parameter tensor in store order.

use crate::error::{DtamError, Result};
use crate::model::{Model, ModelConfig};
use dtam_numcore::blob::{decode_blob, encode_blob, BlobIndex, DType};
use dtam_numcore::ParamStore;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.manifest";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Content hash of the topic-model vocabulary the model was trained on.
    pub tm_vocab_hash: String,
    /// Content hash of the word-sequence vocabulary.
    pub lm_vocab_hash: String,
}

impl Checkpoint {
    pub fn manifest_text(&self, index: &BlobIndex) -> String {
        let mut lines = vec![
            format!("checkpoint_format {CHECKPOINT_FORMAT_VERSION}"),
            format!("tm_vocab_sha256 {}", self.tm_vocab_hash),
            format!("lm_vocab_sha256 {}", self.lm_vocab_hash),
        ];
        for (k, v) in self.config.to_kv() {
            lines.push(format!("config {k}={v}"));
        }
        lines.extend(index.to_manifest_lines());
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tensors: Vec<(&str, &dtam_numcore::Tensor)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        let (bytes, index) = encode_blob(&tensors, DType::F64)?;
        fs::write(dir.join(BLOB), bytes)?;
        fs::write(dir.join(MANIFEST), self.manifest_text(&index))?;
        Ok(())
    }

    /// Loads and verifies a checkpoint. The model is rebuilt from its
    /// configuration and every tensor must match a parameter by name and shape.
    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut version = None;
        let mut tm = None;
        let mut lm = None;
        let mut config_lines = Vec::new();
        for line in text.lines() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "checkpoint_format" => version = rest.trim().parse::<u32>().ok(),
                "tm_vocab_sha256" => tm = Some(rest.trim().to_string()),
                "lm_vocab_sha256" => lm = Some(rest.trim().to_string()),
                "config" => config_lines.push(rest),
                _ => {}
            }
        }
        match version {
            Some(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => return Err(DtamError::Corrupt(format!("unsupported checkpoint format {v}"))),
            None => return Err(DtamError::Corrupt("manifest lacks checkpoint_format".into())),
        }
        let (tm_vocab_hash, lm_vocab_hash) = match (tm, lm) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(DtamError::Corrupt("manifest lacks vocabulary hashes".into())),
        };
        let config = ModelConfig::from_text(&config_lines.join("\n"))
            .map_err(|e| DtamError::Corrupt(format!("manifest configuration: {e}")))?;
        let index = BlobIndex::from_manifest_lines(text.lines()).map_err(|e| DtamError::Corrupt(e.to_string()))?;
        let bytes = fs::read(dir.join(BLOB))?;
        let tensors = decode_blob(&bytes, Some(&index)).map_err(|e| DtamError::Corrupt(e.to_string()))?;
        let (_, mut params) = Model::init(config.clone())
            .map_err(|e| DtamError::Corrupt(format!("cannot rebuild model: {e}")))?;
        if tensors.len() != params.len() {
            return Err(DtamError::Corrupt(format!(
                "blob holds {} tensors, model has {}",
                tensors.len(),
                params.len()
            )));
        }
        for (name, t) in tensors {
            let id = params
                .id(&name)
                .ok_or_else(|| DtamError::Corrupt(format!("unknown tensor {name}")))?;
            params
                .set(id, t)
                .map_err(|e| DtamError::Corrupt(format!("tensor {name}: {e}")))?;
        }
        Ok(Checkpoint {
            config,
            params,
            tm_vocab_hash,
            lm_vocab_hash,
        })
    }

    /// Loads a checkpoint and refuses it unless it was trained against the
    /// given vocabularies.
    pub fn load_for(dir: &Path, tm_vocab_hash: &str, lm_vocab_hash: &str) -> Result<Checkpoint> {
        let c = Self::load(dir)?;
        if c.tm_vocab_hash != tm_vocab_hash || c.lm_vocab_hash != lm_vocab_hash {
            return Err(DtamError::Data(format!(
                "checkpoint was trained on vocabulary {} / {}, not {} / {}",
                c.tm_vocab_hash, c.lm_vocab_hash, tm_vocab_hash, lm_vocab_hash
            )));
        }
        Ok(c)
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::init(self.config.clone())?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::HeadKind;
    use dtam_numcore::Tensor;
    use rand::SeedableRng;

    fn randomized(head: HeadKind, seed: u64) -> Checkpoint {
        let mut cfg = tiny_config(head, 2, 7, 5);
        cfg.seed = seed;
        cfg.trend = head == HeadKind::Attention;
        let (_, mut params) = Model::init(cfg.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::standard_normal(&shape, &mut rng)).unwrap();
        }
        Checkpoint {
            config: cfg,
            params,
            tm_vocab_hash: "aa".into(),
            lm_vocab_hash: "bb".into(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for head in [HeadKind::Attention, HeadKind::Dst, HeadKind::MlpBow] {
            let dir = tempfile::tempdir().unwrap();
            let c = randomized(head, 3);
            c.save(dir.path()).unwrap();
            let back = Checkpoint::load(dir.path()).unwrap();
            assert_eq!(back.config, c.config);
            for ((_, na, a), (_, nb, b)) in c.params.iter().zip(back.params.iter()) {
                assert_eq!(na, nb);
                let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            let first = fs::read(dir.path().join(BLOB)).unwrap();
            back.save(dir.path()).unwrap();
            assert_eq!(first, fs::read(dir.path().join(BLOB)).unwrap());
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        randomized(HeadKind::Dst, 1).save(dir.path()).unwrap();
        let p = dir.path().join(BLOB);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(DtamError::Corrupt(_))));
    }

    #[test]
    fn vocabulary_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        randomized(HeadKind::Dst, 2).save(dir.path()).unwrap();
        assert!(Checkpoint::load_for(dir.path(), "aa", "bb").is_ok());
        assert!(matches!(Checkpoint::load_for(dir.path(), "zz", "bb"), Err(DtamError::Data(_))));
    }

    #[test]
    fn manifest_records_dimensions_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        randomized(HeadKind::Attention, 4).save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        for key in ["config k=2", "config v=7", "config e=3", "config dim_eta=2", "config trend=true", "config delta_tr="] {
            assert!(text.contains(key), "{key}");
        }
        let edited = text.replace("config k=2", "config k=3");
        fs::write(dir.path().join(MANIFEST), edited).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(DtamError::Corrupt(_))));
    }
}
