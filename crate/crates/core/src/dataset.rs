//! Random-push datasets: collection from the simulator, a seekable on-disk
//! format, and the episode-level train/val/test split.
//!
//! File layout: a text header of `key=value` lines framed by
//! `PUSHPLAN-DATASET` and `end`, followed by `record_count` fixed-size
//! records of little-endian `f32`:
//!
//! ```text
//! episode_id, step_id, n_objects,
//! start.x, start.y, end.x, end.y,            (world units)
//! locs_before[2*N_max], locs_after[2*N_max],  (pixels, zero padded)
//! raster_before[G*G*3], raster_after[G*G*3]   (row-major y, x, rgb)
//! ```

use std::fmt;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::AtomicFile;
use crate::sim::{
    object_locations, render, sample_free_push, sample_random_push, sample_scene, sample_scene_within, step_push, PushAction,
    Raster, RasterMeta, Rect, SimConfig, Vec2,
};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "PUSHPLAN-DATASET";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test1Obj,
    Test2Obj,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test1Obj => "test-1obj",
            SplitTag::Test2Obj => "test-2obj",
        })
    }
}

impl std::str::FromStr for SplitTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test-1obj" => Ok(SplitTag::Test1Obj),
            "test-2obj" => Ok(SplitTag::Test2Obj),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub meta: RasterMeta,
    pub n_max: usize,
    pub record_count: u64,
    pub max_push: f64,
    pub format_version: u32,
    pub split_tag: SplitTag,
}

impl DatasetHeader {
    pub fn grid(&self) -> usize {
        self.meta.size
    }

    fn floats_per_record(&self) -> usize {
        7 + 4 * self.n_max + 2 * self.grid() * self.grid() * 3
    }

    pub fn record_bytes(&self) -> u64 {
        self.floats_per_record() as u64 * 4
    }

    fn to_text(&self) -> String {
        format!(
            "{MAGIC}\nformat_version={}\nG={}\nN_max={}\nrecord_count={}\nL_max={}\nsplit_tag={}\norigin_x={}\norigin_y={}\nscale={}\nend\n",
            self.format_version,
            self.grid(),
            self.n_max,
            self.record_count,
            self.max_push,
            self.split_tag,
            self.meta.origin.x,
            self.meta.origin.y,
            self.meta.scale,
        )
    }
}

/// One random push with the observations around it. Index `n` of both
/// location lists refers to the same physical object.
#[derive(Clone, Debug, PartialEq)]
pub struct PushRecord {
    pub episode_id: u32,
    pub step_id: u32,
    pub action: PushAction,
    pub locs_before: Vec<Vec2>,
    pub locs_after: Vec<Vec2>,
    pub raster_before: Raster,
    pub raster_after: Raster,
}

impl PushRecord {
    pub fn n_objects(&self) -> usize {
        self.locs_before.len()
    }

    /// True when some object moved during the push.
    pub fn has_contact(&self) -> bool {
        self.locs_before
            .iter()
            .zip(&self.locs_after)
            .any(|(a, b)| a.dist(*b) > 1e-6)
    }
}

/// Values are stored as f32 on disk; collection rounds through f32 so that a
/// written record reads back identically.
fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn qv(v: Vec2) -> Vec2 {
    Vec2::new(q(v.x), q(v.y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub id: u32,
    pub n_objects: usize,
    pub seed: u64,
    /// Side of the square (world units) the initial objects are scattered
    /// in, placed at random on the table. At least the table size means the
    /// whole table.
    pub scatter: f64,
    /// Fraction of pushes drawn anywhere on the table with a random length
    /// instead of aimed at an object.
    pub free_push_prob: f64,
}

/// Derives an independent per-episode seed.
pub fn episode_seed(base: u64, episode: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(episode.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one episode of random pushes.
pub fn generate_episode(sim: &SimConfig, spec: &EpisodeSpec, steps: usize) -> Result<Vec<PushRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let meta = sim.raster_meta();
    let b = sim.bounds;
    let mut world = if spec.scatter < b.width().max(b.height()) {
        let s = spec.scatter.max(0.0);
        let x = rng.random_range(b.min.x..=(b.max.x - s).max(b.min.x));
        let y = rng.random_range(b.min.y..=(b.max.y - s).max(b.min.y));
        let region = Rect {
            min: Vec2::new(x, y),
            max: Vec2::new(x + s, y + s),
        };
        sample_scene_within(&mut rng, spec.n_objects, sim, region)?
    } else {
        sample_scene(&mut rng, spec.n_objects, sim)?
    };
    let mut raster = render(&world, meta);
    let mut locs: Vec<Vec2> = object_locations(&world, &meta).into_iter().map(qv).collect();
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let raw = if rng.random_bool(spec.free_push_prob.clamp(0.0, 1.0)) {
            let len = rng.random_range(0.0..=sim.max_push);
            sample_free_push(&world, &mut rng, sim, len)
        } else {
            sample_random_push(&world, &mut rng, sim).action
        };
        let action = PushAction::new(qv(raw.start), qv(raw.end));
        let next = step_push(&world, &action, sim);
        let next_raster = render(&next, meta);
        let next_locs: Vec<Vec2> = object_locations(&next, &meta).into_iter().map(qv).collect();
        out.push(PushRecord {
            episode_id: spec.id,
            step_id: step as u32,
            action,
            locs_before: locs,
            locs_after: next_locs.clone(),
            raster_before: raster,
            raster_after: next_raster.clone(),
        });
        world = next;
        raster = next_raster;
        locs = next_locs;
    }
    Ok(out)
}

/// Streams records into a dataset file; the file only appears at `path`
/// once all `record_count` records are written.
pub struct DatasetWriter {
    header: DatasetHeader,
    file: AtomicFile,
    written: u64,
    buf: Vec<u8>,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: DatasetHeader) -> Result<Self> {
        let mut file = AtomicFile::create(path)?;
        file.write_all(header.to_text().as_bytes())?;
        Ok(DatasetWriter {
            header,
            file,
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn write(&mut self, rec: &PushRecord) -> Result<()> {
        let h = &self.header;
        let n = rec.n_objects();
        if n > h.n_max || rec.locs_after.len() != n {
            return Err(Error::Invalid(format!(
                "record with {n} objects does not fit N_max={}",
                h.n_max
            )));
        }
        self.buf.clear();
        let mut put = |v: f64| self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        put(rec.episode_id as f64);
        put(rec.step_id as f64);
        put(n as f64);
        for v in rec.action.as_array() {
            put(v);
        }
        for locs in [&rec.locs_before, &rec.locs_after] {
            for i in 0..h.n_max {
                let l = locs.get(i).copied().unwrap_or(Vec2::ZERO);
                put(l.x);
                put(l.y);
            }
        }
        for r in [&rec.raster_before, &rec.raster_after] {
            for &v in &r.pixels {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        self.file.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<DatasetHeader> {
        if self.written != self.header.record_count {
            return Err(Error::Invalid(format!(
                "wrote {} records, header promises {}",
                self.written, self.header.record_count
            )));
        }
        self.file.commit()?;
        Ok(self.header)
    }
}

/// Writes the given episodes into one file.
pub fn write_episodes(
    sim: &SimConfig,
    episodes: &[EpisodeSpec],
    steps: usize,
    path: &Path,
    split_tag: SplitTag,
) -> Result<DatasetHeader> {
    let header = DatasetHeader {
        meta: sim.raster_meta(),
        n_max: episodes.iter().map(|e| e.n_objects).max().unwrap_or(0),
        record_count: (episodes.len() * steps) as u64,
        max_push: sim.max_push,
        format_version: FORMAT_VERSION,
        split_tag,
    };
    let mut w = DatasetWriter::create(path, header)?;
    for ep in episodes {
        for rec in generate_episode(sim, ep, steps)? {
            w.write(&rec)?;
        }
    }
    w.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub episodes: usize,
    pub steps: usize,
    /// Object counts cycled over episodes.
    pub n_objects: Vec<usize>,
    pub seed: u64,
    pub train_ratio: f64,
    pub test_episodes: usize,
    /// See [`EpisodeSpec::scatter`].
    pub scatter: f64,
    /// See [`EpisodeSpec::free_push_prob`].
    pub free_push_prob: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes: 800,
            steps: 60,
            n_objects: vec![1, 2],
            seed: 1,
            train_ratio: 0.9,
            test_episodes: 50,
            scatter: 0.25,
            free_push_prob: 0.25,
        }
    }
}

impl CollectConfig {
    pub fn episode_specs(&self) -> Vec<EpisodeSpec> {
        (0..self.episodes)
            .map(|i| EpisodeSpec {
                id: i as u32,
                n_objects: self.n_objects[i % self.n_objects.len()],
                seed: episode_seed(self.seed, i as u64),
                scatter: self.scatter,
                free_push_prob: self.free_push_prob,
            })
            .collect()
    }
}

/// Collects every configured episode into a single file.
pub fn collect(sim: &SimConfig, cfg: &CollectConfig, path: &Path, tag: SplitTag) -> Result<DatasetHeader> {
    write_episodes(sim, &cfg.episode_specs(), cfg.steps, path, tag)
}

#[derive(Clone, Debug)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test_1obj: PathBuf,
    pub test_2obj: PathBuf,
}

impl SplitPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SplitPaths {
            train: dir.join("train.bin"),
            val: dir.join("val.bin"),
            test_1obj: dir.join("test-1obj.bin"),
            test_2obj: dir.join("test-2obj.bin"),
        }
    }
}

/// Episode ids assigned to (train, val): a seeded shuffle, first
/// `round(ratio * episodes)` go to train.
pub fn split_episode_ids(cfg: &CollectConfig) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = (0..cfg.episodes as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, u64::MAX)));
    let k = ((cfg.episodes as f64) * cfg.train_ratio).round() as usize;
    let (mut train, mut val) = (ids[..k].to_vec(), ids[k..].to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Writes train/val (episode-level split of the collected episodes) and the
/// one- and two-object test sets, which are regenerated from held-out seeds.
pub fn split(sim: &SimConfig, cfg: &CollectConfig, dir: &Path) -> Result<SplitPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SplitPaths::in_dir(dir);
    let specs = cfg.episode_specs();
    let (train, val) = split_episode_ids(cfg);
    let pick = |ids: &[u32]| -> Vec<EpisodeSpec> { ids.iter().map(|&i| specs[i as usize]).collect() };
    write_episodes(sim, &pick(&train), cfg.steps, &paths.train, SplitTag::Train)?;
    write_episodes(sim, &pick(&val), cfg.steps, &paths.val, SplitTag::Val)?;
    for (n, path, tag) in [
        (1, &paths.test_1obj, SplitTag::Test1Obj),
        (2, &paths.test_2obj, SplitTag::Test2Obj),
    ] {
        let held_out = episode_seed(cfg.seed ^ 0x7E57_0000, n as u64);
        let tests: Vec<EpisodeSpec> = (0..cfg.test_episodes)
            .map(|i| EpisodeSpec {
                id: (cfg.episodes + i) as u32,
                n_objects: n,
                seed: episode_seed(held_out, i as u64),
                scatter: cfg.scatter,
                free_push_prob: cfg.free_push_prob,
            })
            .collect();
        write_episodes(sim, &tests, cfg.steps, path, tag)?;
    }
    Ok(paths)
}

/// Random-access reader over a dataset file.
pub struct DatasetReader {
    path: PathBuf,
    header: DatasetHeader,
    data_start: u64,
    file: BufReader<std::fs::File>,
    scratch: Vec<u8>,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing { path: path.into() }
            } else {
                Error::io(path, e)
            }
        })?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut file = BufReader::with_capacity(1 << 18, file);
        let (header, data_start) = read_header(path, &mut file)?;
        let have = len.saturating_sub(data_start) / header.record_bytes().max(1);
        if have < header.record_count {
            return Err(Error::Truncated {
                path: path.into(),
                last_valid: have.checked_sub(1),
                expected: header.record_count,
            });
        }
        Ok(DatasetReader {
            path: path.into(),
            header,
            data_start,
            file,
            scratch: Vec::new(),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> u64 {
        self.header.record_count
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    pub fn get(&mut self, index: u64) -> Result<PushRecord> {
        if index >= self.header.record_count {
            return Err(Error::Invalid(format!(
                "record {index} out of range ({} records)",
                self.header.record_count
            )));
        }
        let rb = self.header.record_bytes();
        let off = self.data_start + index * rb;
        self.file
            .seek(SeekFrom::Start(off))
            .map_err(|e| Error::io(&self.path, e))?;
        self.scratch.resize(rb as usize, 0);
        if self.file.read_exact(&mut self.scratch).is_err() {
            return Err(Error::Truncated {
                path: self.path.clone(),
                last_valid: index.checked_sub(1),
                expected: self.header.record_count,
            });
        }
        decode_record(&self.header, &self.scratch).map_err(|msg| Error::InvalidRecord {
            path: self.path.clone(),
            index,
            msg,
        })
    }

    /// Streams all records in file order.
    pub fn iter(&mut self) -> impl Iterator<Item = Result<PushRecord>> + '_ {
        (0..self.header.record_count).map(move |i| self.get(i))
    }

    pub fn load_all(path: &Path) -> Result<(DatasetHeader, Vec<PushRecord>)> {
        let mut r = DatasetReader::open(path)?;
        let recs = r.iter().collect::<Result<Vec<_>>>()?;
        Ok((r.header.clone(), recs))
    }
}

/// Anything training can pull records from in contiguous ranges.
pub trait RecordSource {
    fn n_records(&self) -> u64;
    fn visit(&mut self, start: u64, end: u64, f: &mut dyn FnMut(&[PushRecord]) -> Result<()>) -> Result<()>;
}

impl RecordSource for Vec<PushRecord> {
    fn n_records(&self) -> u64 {
        self.len() as u64
    }

    fn visit(&mut self, start: u64, end: u64, f: &mut dyn FnMut(&[PushRecord]) -> Result<()>) -> Result<()> {
        f(&self[start as usize..end as usize])
    }
}

impl RecordSource for DatasetReader {
    fn n_records(&self) -> u64 {
        self.len()
    }

    fn visit(&mut self, start: u64, end: u64, f: &mut dyn FnMut(&[PushRecord]) -> Result<()>) -> Result<()> {
        let recs = (start..end).map(|i| self.get(i)).collect::<Result<Vec<_>>>()?;
        f(&recs)
    }
}

/// Contiguous chunks of at most `chunk` records in shuffled order, so a
/// file-backed source is read in large sequential pieces.
pub fn shuffled_chunks<R: rand::Rng + ?Sized>(n: u64, chunk: u64, rng: &mut R) -> Vec<(u64, u64)> {
    let chunk = chunk.max(1);
    let mut out: Vec<(u64, u64)> = (0..n.div_ceil(chunk))
        .map(|i| (i * chunk, ((i + 1) * chunk).min(n)))
        .collect();
    out.shuffle(rng);
    out
}

fn read_header(path: &Path, file: &mut BufReader<std::fs::File>) -> Result<(DatasetHeader, u64)> {
    let bad = |msg: String| Error::Header {
        path: path.into(),
        msg,
    };
    let mut consumed = 0u64;
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<String> {
        line.clear();
        let n = file.read_line(line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Header {
                path: path.into(),
                msg: "unexpected end of header".into(),
            });
        }
        consumed += n as u64;
        Ok(line.trim_end().to_string())
    };
    if next(&mut line)? != MAGIC {
        return Err(bad("missing magic line".into()));
    }
    let mut kv = std::collections::HashMap::new();
    loop {
        let l = next(&mut line)?;
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {l:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    fn field<T: std::str::FromStr>(
        kv: &std::collections::HashMap<String, String>,
        key: &str,
        bad: &dyn Fn(String) -> Error,
    ) -> Result<T> {
        kv.get(key)
            .ok_or_else(|| bad(format!("missing {key}")))?
            .parse()
            .map_err(|_| bad(format!("unparseable {key}")))
    }
    let version: u32 = field(&kv, "format_version", &bad)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header = DatasetHeader {
        meta: RasterMeta {
            size: field(&kv, "G", &bad)?,
            origin: Vec2::new(field(&kv, "origin_x", &bad)?, field(&kv, "origin_y", &bad)?),
            scale: field(&kv, "scale", &bad)?,
        },
        n_max: field(&kv, "N_max", &bad)?,
        record_count: field(&kv, "record_count", &bad)?,
        max_push: field(&kv, "L_max", &bad)?,
        format_version: version,
        split_tag: kv
            .get("split_tag")
            .ok_or_else(|| bad("missing split_tag".into()))?
            .parse()
            .map_err(bad)?,
    };
    Ok((header, consumed))
}

fn decode_record(h: &DatasetHeader, bytes: &[u8]) -> std::result::Result<PushRecord, String> {
    let mut vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = || vals.next().expect("record length checked by caller");
    let as_index = |v: f32, what: &str| -> std::result::Result<u32, String> {
        if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
            Ok(v as u32)
        } else {
            Err(format!("{what} is not a valid index: {v}"))
        }
    };
    let episode_id = as_index(take(), "episode_id")?;
    let step_id = as_index(take(), "step_id")?;
    let n = as_index(take(), "n_objects")? as usize;
    if n > h.n_max {
        return Err(format!("n_objects {n} exceeds N_max {}", h.n_max));
    }
    let a: Vec<f64> = (0..4).map(|_| take() as f64).collect();
    let action = PushAction::new(Vec2::new(a[0], a[1]), Vec2::new(a[2], a[3]));
    if !action.start.is_finite() || !action.end.is_finite() {
        return Err("non-finite action".into());
    }
    if action.length() > h.max_push * (1.0 + 1e-5) + 1e-6 {
        return Err(format!("push length {} exceeds L_max {}", action.length(), h.max_push));
    }
    let mut locs = |n: usize| -> std::result::Result<Vec<Vec2>, String> {
        let all: Vec<Vec2> = (0..h.n_max)
            .map(|_| Vec2::new(take() as f64, take() as f64))
            .collect();
        if all.iter().any(|l| !l.is_finite()) {
            return Err("non-finite location".into());
        }
        Ok(all[..n].to_vec())
    };
    let locs_before = locs(n)?;
    let locs_after = locs(n)?;
    let g = h.grid();
    let mut raster = || -> std::result::Result<Raster, String> {
        let pixels: Vec<f32> = (0..g * g * 3).map(|_| take()).collect();
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("raster value outside [0, 1]".into());
        }
        Ok(Raster { meta: h.meta, pixels })
    };
    let raster_before = raster()?;
    let raster_after = raster()?;
    Ok(PushRecord {
        episode_id,
        step_id,
        action,
        locs_before,
        locs_after,
        raster_before,
        raster_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CollectConfig {
        CollectConfig {
            episodes: 4,
            steps: 5,
            n_objects: vec![1, 2],
            seed: 3,
            train_ratio: 0.5,
            test_episodes: 2,
            scatter: 0.35,
            free_push_prob: 0.25,
        }
    }

    #[test]
    fn collect_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let sim = SimConfig::default();
        let cfg = small();
        let header = collect(&sim, &cfg, &path, SplitTag::Train).unwrap();
        assert_eq!(header.record_count, 20);
        let (back, recs) = DatasetReader::load_all(&path).unwrap();
        assert_eq!(back, header);
        let mut expect = Vec::new();
        for spec in cfg.episode_specs() {
            expect.extend(generate_episode(&sim, &spec, cfg.steps).unwrap());
        }
        assert_eq!(recs, expect);
        // consecutive steps share locations exactly
        for w in recs.windows(2) {
            if w[0].episode_id == w[1].episode_id {
                assert_eq!(w[0].locs_after, w[1].locs_before);
                assert_eq!(w[0].raster_after, w[1].raster_before);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimConfig::default();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        collect(&sim, &small(), &a, SplitTag::Train).unwrap();
        collect(&sim, &small(), &b, SplitTag::Train).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn truncated_file_names_last_valid_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let h = collect(&SimConfig::default(), &small(), &path, SplitTag::Train).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - h.record_bytes() as usize - 10;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match DatasetReader::open(&path) {
            Err(Error::Truncated { last_valid, .. }) => assert_eq!(last_valid, Some(17)),
            Err(e) => panic!("wrong error {e}"),
            Ok(_) => panic!("truncation not detected"),
        }
    }

    #[test]
    fn empty_dataset_iterates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let cfg = CollectConfig {
            episodes: 0,
            ..small()
        };
        collect(&SimConfig::default(), &cfg, &path, SplitTag::Train).unwrap();
        let (h, recs) = DatasetReader::load_all(&path).unwrap();
        assert_eq!(h.record_count, 0);
        assert!(recs.is_empty());
    }

    #[test]
    fn version_mismatch_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        collect(&SimConfig::default(), &small(), &path, SplitTag::Train).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..40]).replace("format_version=1", "format_version=7");
        let mut patched = text.into_bytes();
        patched.extend_from_slice(&bytes[40..]);
        std::fs::write(&path, patched).unwrap();
        assert!(matches!(
            DatasetReader::open(&path),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn invalid_record_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let h = collect(&SimConfig::default(), &small(), &path, SplitTag::Train).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let start = bytes.len() - (h.record_count as usize) * h.record_bytes() as usize;
        // first raster value of record 3 set to 2.0
        let off = start + 3 * h.record_bytes() as usize + (7 + 4 * h.n_max) * 4;
        bytes[off..off + 4].copy_from_slice(&2.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let mut r = DatasetReader::open(&path).unwrap();
        let first_err = r.iter().find_map(|x| x.err());
        match first_err {
            Some(Error::InvalidRecord { index, .. }) => assert_eq!(index, 3),
            other => panic!("expected invalid record, got {other:?}"),
        }
    }

    #[test]
    fn split_is_disjoint_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CollectConfig {
            episodes: 10,
            steps: 2,
            train_ratio: 0.9,
            test_episodes: 3,
            ..small()
        };
        let paths = split(&SimConfig::default(), &cfg, dir.path()).unwrap();
        let (_, train) = DatasetReader::load_all(&paths.train).unwrap();
        let (_, val) = DatasetReader::load_all(&paths.val).unwrap();
        let ids = |r: &[PushRecord]| r.iter().map(|x| x.episode_id).collect::<std::collections::BTreeSet<_>>();
        assert_eq!(ids(&train).len(), 9);
        assert_eq!(ids(&val).len(), 1);
        assert!(ids(&train).is_disjoint(&ids(&val)));
        let (h1, t1) = DatasetReader::load_all(&paths.test_1obj).unwrap();
        assert_eq!(h1.split_tag, SplitTag::Test1Obj);
        assert!(t1.iter().all(|r| r.n_objects() == 1));
        let (_, t2) = DatasetReader::load_all(&paths.test_2obj).unwrap();
        assert!(t2.iter().all(|r| r.n_objects() == 2));
        assert!(ids(&t1).is_disjoint(&ids(&train)));
    }

    #[test]
    fn hundred_episodes_split_ninety_ten() {
        let cfg = CollectConfig {
            episodes: 100,
            ..CollectConfig::default()
        };
        let (train, val) = split_episode_ids(&cfg);
        assert_eq!((train.len(), val.len()), (90, 10));
    }
}
