//! Versioned binary checkpoints of a [`TrainState`] and the configuration
//! that produced it.
//!
//! Layout (little endian): magic `VSDACKPT`, `u32` version, `u64` length and
//! JSON text of the config, `u64` step, then three parameter blocks
//! (generator, spatial discriminator, spatial-temporal discriminator), each
//! followed by its momentum buffers.

use crate::error::{Error, Result};
use crate::params::{Param, ParamSet, Sgd, SgdConfig};
use crate::trainer::{TrainConfig, TrainState};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"VSDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::corrupt(self.path, format!("implausible length {n}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_params(out: &mut Vec<u8>, ps: &ParamSet, velocity: &[Vec<f64>]) {
    out.extend((ps.len() as u64).to_le_bytes());
    for p in &ps.params {
        out.extend((p.name.len() as u64).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.push(p.is_bias as u8);
        out.extend((p.shape.len() as u64).to_le_bytes());
        for &d in &p.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend(v.to_le_bytes());
        }
    }
    for v in velocity {
        for x in v {
            out.extend(x.to_le_bytes());
        }
    }
}

fn get_params(r: &mut Reader, sgd: SgdConfig) -> Result<(ParamSet, Sgd)> {
    let n = r.len()?;
    let mut ps = ParamSet::new();
    for _ in 0..n {
        let name_len = r.len()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::corrupt(r.path, "parameter name is not UTF-8"))?;
        let is_bias = r.u8()? != 0;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product();
        let data = r.f64s(count)?;
        ps.push(Param {
            name,
            shape,
            data,
            is_bias,
        });
    }
    let velocity = ps
        .params
        .iter()
        .map(|p| r.f64s(p.data.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok((ps, Sgd { config: sgd, velocity }))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        out.extend((cfg.len() as u64).to_le_bytes());
        out.extend(&cfg);
        let s = &self.state;
        out.extend((s.step as u64).to_le_bytes());
        put_params(&mut out, &s.gen, &s.opt_gen.velocity);
        put_params(&mut out, &s.disc_s, &s.opt_s.velocity);
        put_params(&mut out, &s.disc_st, &s.opt_st.velocity);
        out
    }

    /// Parses a checkpoint. `path` is only used in error messages.
    pub fn from_bytes(path: &Path, buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n = r.len()?;
        let config: TrainConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::corrupt(path, format!("config: {e}")))?;
        let step = r.len()?;
        let sgd = SgdConfig {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        let (gen, opt_gen) = get_params(&mut r, sgd)?;
        let (disc_s, opt_s) = get_params(&mut r, sgd)?;
        let (disc_st, opt_st) = get_params(&mut r, sgd)?;
        if r.pos != buf.len() {
            return Err(Error::corrupt(path, format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            config,
            state: TrainState {
                step,
                gen,
                disc_s,
                disc_st,
                opt_gen,
                opt_s,
                opt_st,
            },
        };
        ckpt.check_layout(path)?;
        Ok(ckpt)
    }

    fn check_layout(&self, path: &Path) -> Result<()> {
        let trainer = crate::trainer::Trainer::new(self.config.clone()).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let fresh = trainer.init_state()?;
        let s = &self.state;
        for (a, b) in [(&s.gen, &fresh.gen), (&s.disc_s, &fresh.disc_s), (&s.disc_st, &fresh.disc_st)] {
            a.check_layout(b).map_err(|e| Error::corrupt(path, e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Trainer;

    fn small() -> Checkpoint {
        let config = TrainConfig {
            base_channels: 2,
            num_down_levels: 1,
            disc_base_channels: 2,
            num_classes: 3,
            ..TrainConfig::default()
        };
        let state = Trainer::new(config.clone()).unwrap().init_state().unwrap();
        Checkpoint { config, state }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let mut c = small();
        c.state.step = 17;
        c.state.opt_gen.velocity[0][0] = 0.25;
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(Path::new("x"), &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = small().to_bytes();
        let p = Path::new("ck.bin");
        assert!(matches!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 3]), Err(Error::CorruptFile { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(p, &bad), Err(Error::CorruptFile { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(p, &v2), Err(Error::Version { found: 2, .. })));
    }
}
