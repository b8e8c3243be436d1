//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MOEL" | version u32 | config_len u64 | config key=value text
//! | n_params u64 | entries...
//! entry: name_len u64 | name | rank u64 | dims u64 x rank | data f64 x numel
//! ```
//!
//! Entries appear in parameter declaration order. Writes go through a
//! temporary file in the target directory followed by a rename, so a
//! checkpoint path never holds a half-written file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::MoeLm;
use crate::model::params::ParamRegistry;

const MAGIC: &[u8; 4] = b"MOEL";
const VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exact_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl MoeLm {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            let config_text = self.config.to_kv_text();
            write_u64(&mut w, config_text.len() as u64)?;
            w.write_all(config_text.as_bytes())?;
            write_u64(&mut w, self.params.len() as u64)?;
            for p in self.params.iter() {
                write_u64(&mut w, p.name.len() as u64)?;
                w.write_all(p.name.as_bytes())?;
                write_u64(&mut w, p.shape.len() as u64)?;
                for &d in &p.shape {
                    write_u64(&mut w, d as u64)?;
                }
                for &v in &p.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MoeLm> {
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::input(format!(
                "{}: not a model checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != VERSION {
            return Err(Error::input(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }

        let config_len = read_u64(&mut r)? as usize;
        let config_text = String::from_utf8(read_exact_vec(&mut r, config_len)?)
            .map_err(|_| Error::input("checkpoint config block is not UTF-8".to_string()))?;
        let config = ModelConfig::from_kv_text(&config_text)?;

        // The registry defines the expected names and shapes; file entries
        // must match it one for one, in order.
        let mut params = ParamRegistry::init(&config, 0)?;
        let n_params = read_u64(&mut r)? as usize;
        if n_params != params.len() {
            return Err(Error::input(format!(
                "checkpoint has {n_params} parameters, config implies {}",
                params.len()
            )));
        }
        for idx in 0..n_params {
            let name_len = read_u64(&mut r)? as usize;
            let name = String::from_utf8(read_exact_vec(&mut r, name_len)?)
                .map_err(|_| Error::input("parameter name is not UTF-8".to_string()))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let expected = params.param(idx);
            if name != expected.name || shape != expected.shape {
                return Err(Error::input(format!(
                    "checkpoint entry {idx}: got {name:?} {shape:?}, expected {:?} {:?}",
                    expected.name, expected.shape
                )));
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            params.param_mut(idx).data = data;
        }

        Ok(MoeLm { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::GateMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            n_shared_experts: 1,
            n_routed_experts: 3,
            top_k: 1,
            d_ff_expert: 6,
            d_ff_first: 10,
            rope_base: 10_000.0,
            context_len: 16,
            tie_experts_across_layers: false,
            gate_mode: GateMode::SoftmaxRenormalized,
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let dir = tempdir();
        let path = dir.join("model.ckpt");
        let model = MoeLm::new(tiny(), 77).unwrap();
        model.save(&path).unwrap();

        let loaded = MoeLm::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }

        // Re-saving the loaded model is byte-identical.
        let path2 = dir.join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        cleanup(&dir);
    }

    #[test]
    fn no_temp_file_remains_after_save() {
        let dir = tempdir();
        let path = dir.join("model.ckpt");
        MoeLm::new(tiny(), 1).unwrap().save(&path).unwrap();
        let names: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["model.ckpt".to_string()]);
        cleanup(&dir);
    }

    #[test]
    fn bad_magic_is_input_error() {
        let dir = tempdir();
        let path = dir.join("bogus.ckpt");
        std::fs::write(&path, b"NOPE0123456789").unwrap();
        let err = MoeLm::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        cleanup(&dir);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempdir();
        let path = dir.join("model.ckpt");
        MoeLm::new(tiny(), 1).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(MoeLm::load(&path).is_err());
        cleanup(&dir);
    }

    #[test]
    fn tampered_parameter_name_is_input_error() {
        let dir = tempdir();
        let path = dir.join("model.ckpt");
        MoeLm::new(tiny(), 1).unwrap().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // "embed.weight" appears once in the header region; corrupt it.
        let pos = bytes
            .windows(12)
            .position(|w| w == b"embed.weight")
            .unwrap();
        bytes[pos] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        let err = MoeLm::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        cleanup(&dir);
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "moelab-ckpt-test-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn cleanup(dir: &Path) {
        let _ = std::fs::remove_dir_all(dir);
    }
}
