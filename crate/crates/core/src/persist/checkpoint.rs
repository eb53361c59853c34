//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SSRCKPT\0" | version u32
//! header: E u64 | K u64 | d u64 | total_layers u64 | split_layer u64
//!         | lambda f64 | encoder/pipeline/stream/adapter seeds 4×u64
//!         | rng name (u32 len + utf8) | rng version u32 | adapters u64
//! config: u32 len + TOML text
//! R, Q, W: rows u64 | cols u64 | row-major f64
//! per adapter: task_id u64 | rank u64 | first_layer u64 | layers u64
//!              | per layer B_up, A_up, B_down, A_down (as matrices above)
//! progress: u64 len + JSON text
//! ```
//!
//! Every header field is checked against the config echo and the payload
//! shapes before anything is returned; trailing bytes are rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::encoder::{AdapterBank, LayerAdapter, LoraPair, LowRankAdapter};
use crate::error::{Error, Result};
use crate::features::{PROJECTION_RNG, PROJECTION_RNG_VERSION};
use crate::harness::{Progress, RouteTarget};
use crate::router::RlsState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume a run or answer queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub router: RlsState,
    pub bank: AdapterBank,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.config;
        let mut out = Writer::default();
        out.bytes(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);

        out.usize(self.router.dim());
        out.usize(self.router.task_count());
        out.usize(cfg.encoder.hidden);
        out.usize(cfg.encoder.total_layers);
        out.usize(cfg.encoder.split_layer);
        out.f64(self.router.lambda());
        for seed in [
            cfg.encoder.seed,
            cfg.pipeline.seed,
            cfg.stream.seed,
            cfg.adapter.seed,
        ] {
            out.u64(seed);
        }
        out.str32(PROJECTION_RNG);
        out.u32(PROJECTION_RNG_VERSION);
        out.usize(self.bank.len());

        out.str32(&cfg.to_toml_string());

        out.matrix(self.router.autocorrelation_inverse());
        out.matrix(self.router.cross_correlation());
        out.matrix(self.router.weights());

        for adapter in self.bank.iter() {
            out.usize(adapter.task_id());
            out.usize(adapter.rank());
            out.usize(adapter.first_layer());
            out.usize(adapter.layers().len());
            for la in adapter.layers() {
                for p in [&la.up, &la.down] {
                    out.matrix(&p.b);
                    out.matrix(&p.a);
                }
            }
        }

        let progress = serde_json::to_vec(&self.progress)?;
        out.u64(progress.len() as u64);
        out.bytes(&progress);
        Ok(out.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };

        let magic_len = CHECKPOINT_MAGIC.len().min(bytes.len());
        if bytes[..magic_len] != CHECKPOINT_MAGIC[..magic_len] {
            return Err(Error::CorruptHeader("bad magic".into()));
        }
        r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }

        let dim = r.usize("E")?;
        let tasks = r.usize("K")?;
        let hidden = r.usize("d")?;
        let total_layers = r.usize("total_layers")?;
        let split_layer = r.usize("split_layer")?;
        let lambda = r.f64("lambda")?;
        let seeds = [
            r.u64("seed")?,
            r.u64("seed")?,
            r.u64("seed")?,
            r.u64("seed")?,
        ];
        let rng = r.str32("rng name")?;
        let rng_version = r.u32("rng version")?;
        let adapters = r.usize("adapter count")?;

        let config = RunConfig::from_toml_str(&r.str32("config")?)
            .map_err(|e| Error::CorruptHeader(format!("config echo: {e}")))?;
        if rng != PROJECTION_RNG || rng_version != PROJECTION_RNG_VERSION {
            return Err(Error::CorruptHeader(format!(
                "projection stream {rng} v{rng_version}, this build uses {PROJECTION_RNG} v{PROJECTION_RNG_VERSION}"
            )));
        }
        let echo = [
            ("E", dim, config.pipeline.expanded_dim),
            ("d", hidden, config.encoder.hidden),
            ("total_layers", total_layers, config.encoder.total_layers),
            ("split_layer", split_layer, config.encoder.split_layer),
        ];
        for (name, header, cfg) in echo {
            if header != cfg {
                return Err(Error::CorruptHeader(format!(
                    "header {name} = {header} but config says {cfg}"
                )));
            }
        }
        let cfg_seeds = [
            config.encoder.seed,
            config.pipeline.seed,
            config.stream.seed,
            config.adapter.seed,
        ];
        if seeds != cfg_seeds || lambda.to_bits() != config.pipeline.lambda.to_bits() {
            return Err(Error::CorruptHeader(
                "header seeds or lambda disagree with config".into(),
            ));
        }

        let rm = r.matrix("R", Some((dim, dim)))?;
        let q = r.matrix("Q", Some((dim, tasks)))?;
        let w = r.matrix("W", Some((dim, tasks)))?;
        let router = RlsState::from_parts(rm, q, w, lambda)?.with_chunk_size(config.chunk_size);

        let adapted = total_layers - split_layer;
        let (d, h) = (hidden, config.encoder.ffn_hidden);
        let mut bank = AdapterBank::new();
        for _ in 0..adapters {
            let task_id = r.usize("adapter task id")?;
            let rank = r.usize("adapter rank")?;
            let first_layer = r.usize("adapter first layer")?;
            let layers = r.usize("adapter layer count")?;
            if first_layer != split_layer + 1 || layers != adapted || rank == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "adapter for task {task_id}: rank {rank}, layers {first_layer}+{layers}"
                )));
            }
            let mut stack = Vec::with_capacity(layers);
            for _ in 0..layers {
                let up = LoraPair {
                    b: r.matrix("B_up", Some((d, rank)))?,
                    a: r.matrix("A_up", Some((rank, h)))?,
                };
                let down = LoraPair {
                    b: r.matrix("B_down", Some((h, rank)))?,
                    a: r.matrix("A_down", Some((rank, d)))?,
                };
                stack.push(LayerAdapter { up, down });
            }
            bank.insert(LowRankAdapter::from_parts(
                task_id,
                rank,
                first_layer,
                stack,
            )?)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        }

        let len = r.usize("progress length")?;
        let progress: Progress = serde_json::from_slice(r.take(len, "progress")?)?;
        if r.pos != bytes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        validate_progress(&progress, &router, &bank)?;

        Ok(Self {
            config,
            router,
            bank,
            progress,
        })
    }
}

fn validate_progress(progress: &Progress, router: &RlsState, bank: &AdapterBank) -> Result<()> {
    if progress.routes.len() != router.task_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} routes for {} router columns",
            progress.routes.len(),
            router.task_count()
        )));
    }
    let phases = progress.task_order.len();
    if progress.accuracy.phases() != phases
        || progress.routing.phases.len() != phases
        || progress.decisions.len() != phases
        || bank.len() != phases
    {
        return Err(Error::ShapeMismatch(format!(
            "progress records disagree on the number of completed phases ({phases})"
        )));
    }
    for target in &progress.routes {
        if let RouteTarget::Task(id) = target {
            if bank.get(*id).is_none() {
                return Err(Error::ShapeMismatch(format!(
                    "route to task {id} has no adapter"
                )));
            }
        }
    }
    Ok(())
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Replaces `path` with `data` via write-temp-then-rename.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::ShapeMismatch(format!(
                "truncated at {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::ShapeMismatch(format!("{what} = {v} overflows")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn str32(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::CorruptHeader(format!("{what} is not UTF-8")))
    }

    fn matrix(&mut self, what: &str, expect: Option<(usize, usize)>) -> Result<DMatrix<f64>> {
        let rows = self.usize(what)?;
        let cols = self.usize(what)?;
        if let Some((er, ec)) = expect {
            if (rows, cols) != (er, ec) {
                return Err(Error::ShapeMismatch(format!(
                    "{what} is {rows}x{cols}, expected {er}x{ec}"
                )));
            }
        }
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::ShapeMismatch(format!("{what} shape overflows")))?;
        let raw = self.take(n, what)?;
        Ok(DMatrix::from_row_iterator(
            rows,
            cols,
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        ))
    }
}
