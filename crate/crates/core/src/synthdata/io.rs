//! Binary dataset container and its JSON manifest sidecar.
//!
//! ```text
//! "HCTD"  u32 version
//! u32 n   n bytes of taxonomy JSON
//! u64     record count
//! record: u32 byte length, then
//!   u64 id, u64 video, u64 seed, u8 split, u32 phase, u32 step
//!   u32 A, A bytes of action flags; u32 I, I bytes of instrument flags
//!   u32 T, H, W, Cin, then T·H·W·Cin f32
//!   u32 boxes, per box: 4 f32 gt, 4 f32 detected, u32 class, u32 action, f32 confidence
//!   u32 rows, then rows·256 f32 box features
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{ClipSample, Dataset, DatasetManifest, InstrumentBox, Split, Taxonomy};
use crate::error::{HctError, Result};
use crate::hram::BOX_FEATURE_DIM;

pub const DATASET_MAGIC: &[u8; 4] = b"HCTD";
pub const DATASET_VERSION: u32 = 1;

/// `<path>.manifest.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn encode_record(s: &ClipSample) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 4 * s.clip.len());
    b.write_u64::<LittleEndian>(s.id).unwrap();
    b.write_u64::<LittleEndian>(s.video).unwrap();
    b.write_u64::<LittleEndian>(s.seed).unwrap();
    b.push(match s.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    b.write_u32::<LittleEndian>(s.phase as u32).unwrap();
    b.write_u32::<LittleEndian>(s.step as u32).unwrap();
    for flags in [&s.actions, &s.instruments] {
        b.write_u32::<LittleEndian>(flags.len() as u32).unwrap();
        b.extend(flags.iter().map(|&f| f as u8));
    }
    for &d in &s.clip_shape {
        b.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    s.clip.iter().for_each(|&v| b.write_f32::<LittleEndian>(v).unwrap());
    b.write_u32::<LittleEndian>(s.boxes.len() as u32).unwrap();
    for bx in &s.boxes {
        bx.gt.iter().chain(&bx.detected).for_each(|&v| b.write_f32::<LittleEndian>(v).unwrap());
        b.write_u32::<LittleEndian>(bx.class).unwrap();
        b.write_u32::<LittleEndian>(bx.action).unwrap();
        b.write_f32::<LittleEndian>(bx.confidence).unwrap();
    }
    let (rows, data) = match &s.box_features {
        Some((rows, data)) => (*rows, data.as_slice()),
        None => (0, &[][..]),
    };
    b.write_u32::<LittleEndian>(rows as u32).unwrap();
    data.iter().for_each(|&v| b.write_f32::<LittleEndian>(v).unwrap());
    b
}

/// Writes the container and its manifest sidecar.
pub fn write_dataset(path: &Path, dataset: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    let tax = serde_json::to_vec(&dataset.taxonomy)?;
    w.write_u32::<LittleEndian>(tax.len() as u32)?;
    w.write_all(&tax)?;
    w.write_u64::<LittleEndian>(dataset.samples.len() as u64)?;
    for s in &dataset.samples {
        let rec = encode_record(s);
        w.write_u32::<LittleEndian>(rec.len() as u32)?;
        w.write_all(&rec)?;
    }
    w.flush()?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Bounds-checked little-endian reader that reports absolute offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, at: usize, message: impl Into<String>) -> Result<T> {
        Err(HctError::Format { offset: at as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return self.fail(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.end - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.saturating_mul(4), what)?;
        let mut out = vec![0.0f32; n];
        LittleEndian::read_f32_into(bytes, &mut out);
        Ok(out)
    }

    fn flags(&mut self, expected: usize, what: &str) -> Result<Vec<bool>> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        if n != expected {
            return self.fail(at, format!("{what}: {n} flags, taxonomy has {expected}"));
        }
        let bytes = self.take(n, what)?;
        bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => self.fail(at, format!("{what}: flag byte {b} is not 0 or 1")),
            })
            .collect()
    }
}

fn decode_record(r: &mut Reader<'_>, tax: &Taxonomy) -> Result<ClipSample> {
    let start = r.pos;
    let id = r.u64("clip id")?;
    let video = r.u64("video id")?;
    let seed = r.u64("clip seed")?;
    let split = match r.u8("split")? {
        0 => Split::Train,
        1 => Split::Test,
        v => return r.fail(r.pos - 1, format!("clip {id}: unknown split tag {v}")),
    };
    let at = r.pos;
    let phase = r.u32("phase")? as usize;
    let step = r.u32("step")? as usize;
    if phase >= tax.sizes.phases || step >= tax.sizes.steps || tax.step_phase[step] != phase {
        return r.fail(at, format!("clip {id}: labels phase {phase}, step {step} violate the taxonomy"));
    }
    let actions = r.flags(tax.sizes.actions, "action flags")?;
    let instruments = r.flags(tax.sizes.instruments, "instrument flags")?;
    let mut clip_shape = [0usize; 4];
    for d in clip_shape.iter_mut() {
        *d = r.u32("clip shape")? as usize;
    }
    let numel = clip_shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let numel = match numel {
        Some(n) if n > 0 => n,
        _ => return r.fail(r.pos - 16, format!("clip {id}: invalid clip shape {clip_shape:?}")),
    };
    let clip = r.f32s(numel, "clip data")?;
    let n_boxes = r.u32("box count")? as usize;
    let mut boxes = Vec::with_capacity(n_boxes.min(1024));
    for _ in 0..n_boxes {
        let at = r.pos;
        let c = r.f32s(8, "box coordinates")?;
        let class = r.u32("box class")?;
        let action = r.u32("box action")?;
        let confidence = r.f32s(1, "box confidence")?[0];
        if class as usize >= tax.sizes.instruments || action as usize >= tax.sizes.actions {
            return r.fail(at, format!("clip {id}: box class {class} / action {action} out of range"));
        }
        boxes.push(InstrumentBox {
            gt: [c[0], c[1], c[2], c[3]],
            detected: [c[4], c[5], c[6], c[7]],
            class,
            action,
            confidence,
        });
    }
    let at = r.pos;
    let rows = r.u32("box feature rows")? as usize;
    let kept = boxes.iter().filter(|b| b.kept()).count();
    if rows != kept {
        return r.fail(at, format!("clip {id}: {rows} box feature rows for {kept} kept boxes"));
    }
    let box_features = if rows == 0 { None } else { Some((rows, r.f32s(rows * BOX_FEATURE_DIM, "box features")?)) };
    if r.pos != r.end {
        return r.fail(r.pos, format!("clip {id}: {} trailing bytes in record starting at {start}", r.end - r.pos));
    }
    Ok(ClipSample { id, video, seed, split, phase, step, actions, instruments, boxes, box_features, clip_shape, clip })
}

/// Reads a container written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, end: buf.len() };
    let magic = r.take(4, "magic").map_err(|_| HctError::Format { offset: 0, message: "missing magic".into() })?;
    if magic != DATASET_MAGIC {
        return r.fail(0, format!("bad magic {magic:?}, expected \"HCTD\""));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return r.fail(4, format!("unsupported version {version}, expected {DATASET_VERSION}"));
    }
    let at = r.pos;
    let n = r.u32("taxonomy length")? as usize;
    let tax_bytes = r.take(n, "taxonomy block")?;
    let taxonomy: Taxonomy = serde_json::from_slice(tax_bytes)
        .map_err(|e| HctError::Format { offset: at as u64, message: format!("taxonomy block: {e}") })?;
    taxonomy.validate().map_err(|e| HctError::Format { offset: at as u64, message: e.to_string() })?;
    let count = r.u64("record count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = r.u32("record length")? as usize;
        if r.end - r.pos < len {
            return r.fail(r.pos, format!("truncated record: need {len} bytes, {} left", r.end - r.pos));
        }
        let mut rec = Reader { buf: r.buf, pos: r.pos, end: r.pos + len };
        samples.push(decode_record(&mut rec, &taxonomy)?);
        r.pos += len;
    }
    if r.pos != r.end {
        return r.fail(r.pos, format!("{} trailing bytes after the last record", r.end - r.pos));
    }
    Ok(Dataset { taxonomy, samples })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path(path))?;
    Ok(serde_json::from_str(&text)?)
}
