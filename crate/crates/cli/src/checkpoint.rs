//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `FLOW` |
//! | version | u32 |
//! | objective | u32 length + UTF-8 |
//! | run config | u32 length + UTF-8, canonical key/value text |
//! | step, epoch | u64, u64 |
//! | main and mask rng | 2 × (32-byte seed, u64 stream, u128 word position) |
//! | tensors | u32 count, then per tensor: u32 name length, name, u32 rank, u32 dims, f32 values |
//! | optimizer | u8 flag; if set: u64 step, f64 β1, β2, ε, then per tensor first and second moments as f32 |
//!
//! Values are stored at 32-bit precision. [`Checkpoint::round_trip_precision`]
//! applies the same rounding to live state, so a run that continues in
//! memory after saving matches one resumed from the file.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use genflow::autodiff::Tensor;
use genflow::model::Parameters;
use genflow::processes::AdamWState;
use genflow::training::{Objective, RngState, Trainer};

use crate::config::{RunConfig, DEFAULT_OUT_DIR};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"FLOW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub objective: Objective,
    pub config: RunConfig,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub mask_rng: RngState,
    pub params: Parameters,
    pub optimizer: Option<AdamWState>,
}

fn f32_round(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl Checkpoint {
    /// Snapshot of a trainer, including optimizer state.
    pub fn of_trainer(trainer: &Trainer, config: &RunConfig) -> Self {
        Self {
            objective: trainer.objective,
            config: config.clone(),
            step: trainer.step as u64,
            epoch: trainer.epoch as u64,
            rng: RngState::capture(&trainer.rng),
            mask_rng: RngState::capture(&trainer.mask_rng),
            params: trainer.params.clone(),
            optimizer: Some(trainer.opt.clone()),
        }
    }

    /// Rounds parameters and optimizer moments to what the file can hold.
    pub fn round_trip_precision(trainer: &mut Trainer) {
        trainer.params.tensors_mut().iter_mut().for_each(f32_round);
        trainer
            .opt
            .m
            .iter_mut()
            .chain(trainer.opt.v.iter_mut())
            .for_each(f32_round);
    }

    /// Rebuilds a trainer positioned exactly where this snapshot was taken.
    pub fn into_trainer(self, dataset_len: usize) -> CliResult<Trainer> {
        let hyper = match self.objective {
            Objective::InpaintFinetune => self.config.finetune.hyper.clone(),
            _ => self.config.train.clone(),
        };
        let mut t = Trainer::new(self.objective, hyper, self.params, 0, dataset_len)?;
        t.step = self.step as usize;
        t.epoch = self.epoch as usize;
        t.rng = self.rng.restore();
        t.mask_rng = self.mask_rng.restore();
        if let Some(opt) = self.optimizer {
            t.opt = opt;
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.write_u32::<LE>(VERSION).unwrap();
        write_str(&mut b, self.objective.name());
        // where a run writes its files is not part of the model
        let mut config = self.config.clone();
        config.out_dir = PathBuf::from(DEFAULT_OUT_DIR);
        write_str(&mut b, &config.render());
        b.write_u64::<LE>(self.step).unwrap();
        b.write_u64::<LE>(self.epoch).unwrap();
        for r in [&self.rng, &self.mask_rng] {
            b.extend_from_slice(&r.seed);
            b.write_u64::<LE>(r.stream).unwrap();
            b.write_u128::<LE>(r.word_pos).unwrap();
        }
        let tensors = self.params.tensors();
        b.write_u32::<LE>(tensors.len() as u32).unwrap();
        for (name, t) in self.params.names().iter().zip(tensors) {
            write_str(&mut b, name);
            b.write_u32::<LE>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                b.write_u32::<LE>(d as u32).unwrap();
            }
            write_values(&mut b, t);
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                b.write_u64::<LE>(o.step).unwrap();
                for x in [o.beta1, o.beta2, o.eps] {
                    b.write_f64::<LE>(x).unwrap();
                }
                for (m, v) in o.m.iter().zip(&o.v) {
                    write_values(&mut b, m);
                    write_values(&mut b, v);
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "file too short".to_string())?;
        if &magic != MAGIC {
            return Err("not a checkpoint (bad magic bytes)".into());
        }
        let version = r.read_u32::<LE>().map_err(trunc)?;
        if version != VERSION {
            return Err(format!("format version {version}, this build reads {VERSION}"));
        }
        let objective: Objective = read_str(&mut r)?.parse().map_err(|e| format!("{e}"))?;
        let config = RunConfig::parse(&read_str(&mut r)?).map_err(|e| format!("embedded {e}"))?;
        let step = r.read_u64::<LE>().map_err(trunc)?;
        let epoch = r.read_u64::<LE>().map_err(trunc)?;
        let mut rngs = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed).map_err(trunc)?;
            let stream = r.read_u64::<LE>().map_err(trunc)?;
            let word_pos = r.read_u128::<LE>().map_err(trunc)?;
            rngs.push(RngState { seed, stream, word_pos });
        }
        let count = r.read_u32::<LE>().map_err(trunc)? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = r.read_u32::<LE>().map_err(trunc)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LE>().map(|d| d as usize).map_err(trunc))
                .collect::<Result<Vec<_>, _>>()?;
            let t = read_values(&mut r, &shape)?;
            named.push((name, t));
        }
        let model = config.model_config().map_err(|e| e.to_string())?;
        let params = Parameters::from_named(model, named).map_err(|e| e.to_string())?;
        let optimizer = match r.read_u8().map_err(trunc)? {
            0 => None,
            1 => {
                let step = r.read_u64::<LE>().map_err(trunc)?;
                let mut h = [0.0; 3];
                for x in &mut h {
                    *x = r.read_f64::<LE>().map_err(trunc)?;
                }
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for p in params.tensors() {
                    m.push(read_values(&mut r, p.shape())?);
                    v.push(read_values(&mut r, p.shape())?);
                }
                Some(AdamWState {
                    step,
                    m,
                    v,
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                })
            }
            f => return Err(format!("bad optimizer flag {f}")),
        };
        if (r.position() as usize) != bytes.len() {
            return Err("trailing bytes after optimizer state".into());
        }
        Ok(Self {
            objective,
            config,
            step,
            epoch,
            rng: rngs[0],
            mask_rng: rngs[1],
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes).map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn trunc(_: std::io::Error) -> String {
    "unexpected end of file".into()
}

fn write_str(b: &mut Vec<u8>, s: &str) {
    b.write_u32::<LE>(s.len() as u32).unwrap();
    b.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String, String> {
    let len = r.read_u32::<LE>().map_err(trunc)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err("unexpected end of file".into());
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(trunc)?;
    String::from_utf8(buf).map_err(|_| "string field is not UTF-8".into())
}

fn write_values(b: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        b.write_f32::<LE>(v as f32).unwrap();
    }
}

fn read_values(r: &mut Cursor<&[u8]>, shape: &[usize]) -> Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(4).is_none_or(|b| b > remaining) {
        return Err("unexpected end of file".into());
    }
    let data = (0..n)
        .map(|_| r.read_f32::<LE>().map(f64::from).map_err(trunc))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}
