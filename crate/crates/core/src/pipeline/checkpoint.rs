//! Checkpoint directory, parameter blobs and the CSV training log.
//!
//! Parameter blob layout, little-endian:
//!
//! ```text
//! magic "PRM1" | version u32 | count u32
//! count x { id u32 | name_len u32 | name utf-8 | ndim u32 | ndim x u64 | numel x f32 }
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::model::Architecture;
use super::train::{augmented_logits, encode_aux, probabilities};
use super::PipelineError;
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::cohort::{identify, CohortMode, CohortSet};
use crate::config::ExperimentConfig;
use crate::objectives::LossReport;
use crate::vecpool::{HnswParams, VectorPool};

pub const PARAMS_MAGIC: &[u8; 4] = b"PRM1";
const PARAMS_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.txt";
pub const AUX_FILE: &str = "aux.params";
pub const MAIN_FILE: &str = "main.params";
pub const POOL_FILE: &str = "pool.vpl";
pub const LOG_FILE: &str = "metrics.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn params_to_bytes(store: &ParamStore<f32>, ids: &[ParamId]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for &id in ids {
        let p = store.get(id);
        out.extend_from_slice(&id.0.to_le_bytes());
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_params(path: impl AsRef<Path>, store: &ParamStore<f32>, ids: &[ParamId]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    fs::write(path, params_to_bytes(store, ids)).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte offset {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a blob into `store`; every entry must match an expected id by name and shape.
pub fn params_from_bytes(bytes: &[u8], store: &mut ParamStore<f32>, expected: &[ParamId]) -> Result<(), String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != PARAMS_MAGIC {
        return Err("bad magic at byte offset 0".into());
    }
    let version = c.u32()?;
    if version != PARAMS_VERSION {
        return Err(format!("unsupported version {version} at byte offset 4"));
    }
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(format!("{count} parameters stored, {} expected", expected.len()));
    }
    for &want in expected {
        let at = c.pos;
        let id = c.u32()?;
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|e| format!("name at offset {at}: {e}"))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let p = store.get(want);
        if id != want.0 || name != p.name || shape != p.value.shape() {
            return Err(format!(
                "entry at offset {at} is {id}:{name} {shape:?}, expected {}:{} {:?}",
                want.0,
                p.name,
                p.value.shape()
            ));
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        *store.value_mut(want) = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    }
    if c.pos != bytes.len() {
        return Err(format!("trailing bytes at offset {}", c.pos));
    }
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>, store: &mut ParamStore<f32>, expected: &[ParamId]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    params_from_bytes(&bytes, store, expected).map_err(|message| PipelineError::Format {
        path: path.to_path_buf(),
        message,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub auc: Option<f64>,
    pub r_at_p90: Option<f64>,
    pub losses: LossReport,
}

impl LogRow {
    pub fn train(phase: &str, epoch: usize, losses: LossReport) -> Self {
        Self {
            phase: phase.into(),
            epoch,
            split: "train".into(),
            auc: None,
            r_at_p90: None,
            losses,
        }
    }

    pub fn val(phase: &str, epoch: usize, auc: Option<f64>, r_at_p90: Option<f64>, loss: f64) -> Self {
        Self::eval(phase, epoch, "val", auc, r_at_p90, loss)
    }

    pub fn eval(phase: &str, epoch: usize, split: &str, auc: Option<f64>, r_at_p90: Option<f64>, loss: f64) -> Self {
        Self {
            phase: phase.into(),
            epoch,
            split: split.into(),
            auc,
            r_at_p90,
            losses: LossReport {
                main: loss,
                total: loss,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "phase,epoch,split,auc,r_at_p90,loss_main,loss_sccl,loss_align,loss_decay,loss_total";

impl MetricsLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: &MetricsLog) {
        self.rows.extend(other.rows.iter().cloned());
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.phase,
                r.epoch,
                r.split,
                opt(r.auc),
                opt(r.r_at_p90),
                l.main,
                l.sccl,
                l.align,
                l.decay,
                l.total
            );
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Everything needed to reproduce predictions.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub store: ParamStore<f32>,
    pub arch: Architecture,
    pub pool: Option<VectorPool>,
    /// Whether `main.params` holds trained augmented-phase parameters.
    pub has_main: bool,
    pub log: MetricsLog,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, self.config.to_text()).map_err(io_err(&cfg))?;
        write_params(dir.join(AUX_FILE), &self.store, &self.arch.aux_params())?;
        if self.has_main {
            write_params(dir.join(MAIN_FILE), &self.store, &self.arch.main_params())?;
        }
        if let Some(pool) = &self.pool {
            pool.save(dir.join(POOL_FILE))?;
        }
        self.log.write(dir.join(LOG_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
        let config = ExperimentConfig::from_text(&text).map_err(|e| PipelineError::Format {
            path: cfg_path.clone(),
            message: e.to_string(),
        })?;
        let mut store = ParamStore::new();
        let arch = Architecture::new(&mut store, &config.train);
        read_params(dir.join(AUX_FILE), &mut store, &arch.aux_params())?;
        let main_path = dir.join(MAIN_FILE);
        let has_main = main_path.exists();
        if has_main {
            read_params(&main_path, &mut store, &arch.main_params())?;
        }
        let pool_path = dir.join(POOL_FILE);
        let pool = if pool_path.exists() {
            let mut p = VectorPool::load(&pool_path)?;
            if let crate::cohort::Search::Approx { .. } = config.train.search {
                p.build_index(HnswParams {
                    seed: crate::datagen::sub_seed(config.train.seed, super::roles::HNSW, 0),
                    ..config.train.hnsw
                });
            }
            p.freeze();
            Some(p)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            arch,
            pool,
            has_main,
            log: MetricsLog::default(),
        })
    }

    /// Infer-mode cohorts of arbitrary sequences; empty when there is no pool.
    pub fn cohorts(&self, seqs: &[&[u32]]) -> Result<Vec<CohortSet>, PipelineError> {
        let t = &self.config.train;
        match &self.pool {
            Some(pool) if t.cohort && !pool.is_empty() => {
                let q = encode_aux(&self.store, &self.arch, seqs)?;
                q.iter()
                    .map(|v| Ok(identify(pool, None, v, t.k, CohortMode::Infer, t.search)?))
                    .collect()
            }
            _ => Ok(vec![CohortSet::empty(None); seqs.len()]),
        }
    }

    /// Fused logits of the augmented model.
    pub fn predict_logits(&self, seqs: &[&[u32]]) -> Result<Vec<f64>, PipelineError> {
        if !self.has_main {
            return Err(PipelineError::Config("checkpoint has no trained main model".into()));
        }
        let cohorts = self.cohorts(seqs)?;
        augmented_logits(&self.store, &self.arch, seqs, Some(&cohorts), self.config.train.aggregate)
    }

    /// Fraud probabilities.
    pub fn predict(&self, seqs: &[&[u32]]) -> Result<Vec<f64>, PipelineError> {
        Ok(probabilities(&self.predict_logits(seqs)?))
    }
}
