//! Batch containers.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic  "TRJB"
//! u32    version (1)
//! u64    B, S, D
//! u32    flags: bit 0 labels present, bit 1 layer stack present
//! u64x2  span table, B entries of (lo, hi)
//! f64    hidden payload, B*S*D row-major
//! i64    labels, B*S entries, -1 for unsupervised   (if bit 0)
//! u64    layer count, then per layer: u64 index, f64 payload   (if bit 1)
//! ```
//!
//! The text form is line oriented and lossless (floats are written with the
//! shortest representation that round-trips):
//!
//! ```text
//! trajectory-batch 1
//! shape B S D
//! span <b> <lo> <hi>
//! h <b> <t> <x_0> ... <x_{D-1}>
//! labels                      (labels present, possibly all unsupervised)
//! label <b> <t> <index>
//! layer <index>
//! x <b> <t> <x_0> ... <x_{D-1}>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use tensor::Tensor;

use crate::batch::{Span, TrajectoryBatch};
use crate::error::{KitError, Result};

const MAGIC: &[u8; 4] = b"TRJB";
const VERSION: u32 = 1;

pub fn write_binary<W: Write>(batch: &TrajectoryBatch, mut w: W) -> Result<()> {
    let (b, s, d) = (batch.batch_size(), batch.seq_len(), batch.dim());
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for n in [b, s, d] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let mut flags = 0u32;
    if batch.labels().is_some() {
        flags |= 1;
    }
    if !batch.layers().is_empty() {
        flags |= 2;
    }
    w.write_all(&flags.to_le_bytes())?;
    for sp in batch.spans() {
        w.write_all(&(sp.lo as u64).to_le_bytes())?;
        w.write_all(&(sp.hi as u64).to_le_bytes())?;
    }
    write_floats(&mut w, batch.hidden().data())?;
    if let Some(labels) = batch.labels() {
        for row in labels {
            for y in row {
                let v = y.map_or(-1i64, |y| y as i64);
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    if !batch.layers().is_empty() {
        w.write_all(&(batch.layers().len() as u64).to_le_bytes())?;
        for (k, t) in batch.layers() {
            w.write_all(&(*k as u64).to_le_bytes())?;
            write_floats(&mut w, t.data())?;
        }
    }
    Ok(())
}

fn write_floats<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| KitError::Format(format!("truncated container: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.bytes()?))
            .map_err(|_| KitError::Format("extent does not fit in usize".into()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_binary<R: Read>(r: R) -> Result<TrajectoryBatch> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(KitError::Format("bad magic, expected TRJB".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(KitError::Format(format!("unsupported version {version}")));
    }
    let (b, s, d) = (r.u64()?, r.u64()?, r.u64()?);
    let n = b
        .checked_mul(s)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| KitError::Format("shape overflows".into()))?;
    let flags = r.u32()?;
    let mut spans = Vec::with_capacity(b);
    for _ in 0..b {
        spans.push(Span::new(r.u64()?, r.u64()?));
    }
    let hidden = Tensor::new(vec![b, s, d], r.floats(n)?)?;
    let mut batch = TrajectoryBatch::new(hidden, spans)?;
    if flags & 1 != 0 {
        let mut labels = vec![vec![None; s]; b];
        for row in labels.iter_mut() {
            for y in row.iter_mut() {
                let v = r.i64()?;
                *y = if v < 0 { None } else { Some(v as usize) };
            }
        }
        batch = batch.with_labels(labels)?;
    }
    if flags & 2 != 0 {
        let count = r.u64()?;
        for _ in 0..count {
            let k = r.u64()?;
            let t = Tensor::new(vec![b, s, d], r.floats(n)?)?;
            batch = batch.with_layer(k, t)?;
        }
    }
    Ok(batch)
}

pub fn to_text(batch: &TrajectoryBatch) -> String {
    use std::fmt::Write as _;
    let (b, s, d) = (batch.batch_size(), batch.seq_len(), batch.dim());
    let mut out = String::new();
    let _ = writeln!(out, "trajectory-batch {VERSION}");
    let _ = writeln!(out, "shape {b} {s} {d}");
    for (i, sp) in batch.spans().iter().enumerate() {
        let _ = writeln!(out, "span {i} {} {}", sp.lo, sp.hi);
    }
    let rows = |out: &mut String, tag: &str, t: &Tensor| {
        for bi in 0..b {
            for ti in 0..s {
                let _ = write!(out, "{tag} {bi} {ti}");
                let base = (bi * s + ti) * d;
                for x in &t.data()[base..base + d] {
                    let _ = write!(out, " {x:?}");
                }
                out.push('\n');
            }
        }
    };
    rows(&mut out, "h", batch.hidden());
    if let Some(labels) = batch.labels() {
        out.push_str("labels\n");
        for (bi, row) in labels.iter().enumerate() {
            for (ti, y) in row.iter().enumerate() {
                if let Some(y) = y {
                    let _ = writeln!(out, "label {bi} {ti} {y}");
                }
            }
        }
    }
    for (k, t) in batch.layers() {
        let _ = writeln!(out, "layer {k}");
        rows(&mut out, "x", t);
    }
    out
}

pub fn from_text(text: &str) -> Result<TrajectoryBatch> {
    let bad = |line: usize, msg: &str| KitError::Format(format!("line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| KitError::Format("empty input".into()))?;
    if header.trim() != format!("trajectory-batch {VERSION}") {
        return Err(KitError::Format(format!("unexpected header `{header}`")));
    }
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut spans: Vec<Option<Span>> = Vec::new();
    let mut hidden: Vec<f64> = Vec::new();
    let mut labels: Option<Vec<Vec<Option<usize>>>> = None;
    let mut layers: Vec<(usize, Vec<f64>)> = Vec::new();
    for (no, line) in lines {
        let mut tok = line.split_whitespace();
        let tag = tok.next().unwrap_or_default();
        let nums: Vec<&str> = tok.collect();
        let int = |i: usize| -> Result<usize> {
            nums.get(i)
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| bad(no, "expected an unsigned integer"))
        };
        match tag {
            "shape" => {
                let sh = (int(0)?, int(1)?, int(2)?);
                spans = vec![None; sh.0];
                hidden = vec![f64::NAN; sh.0 * sh.1 * sh.2];
                shape = Some(sh);
            }
            "span" | "h" | "labels" | "label" | "layer" | "x" => {
                let (b, s, d) = shape.ok_or_else(|| bad(no, "`shape` must come first"))?;
                match tag {
                    "span" => {
                        let i = int(0)?;
                        *spans.get_mut(i).ok_or_else(|| bad(no, "row out of range"))? =
                            Some(Span::new(int(1)?, int(2)?));
                    }
                    "labels" => {
                        labels.get_or_insert_with(|| vec![vec![None; s]; b]);
                    }
                    "label" => {
                        let (bi, ti) = (int(0)?, int(1)?);
                        if bi >= b || ti >= s {
                            return Err(bad(no, "position out of range"));
                        }
                        labels.get_or_insert_with(|| vec![vec![None; s]; b])[bi][ti] = Some(int(2)?);
                    }
                    "layer" => layers.push((int(0)?, vec![f64::NAN; b * s * d])),
                    _ => {
                        let (bi, ti) = (int(0)?, int(1)?);
                        if bi >= b || ti >= s || nums.len() != d + 2 {
                            return Err(bad(no, "state line does not match the shape"));
                        }
                        let target = if tag == "h" {
                            &mut hidden
                        } else {
                            &mut layers
                                .last_mut()
                                .ok_or_else(|| bad(no, "`x` line before any `layer`"))?
                                .1
                        };
                        let base = (bi * s + ti) * d;
                        for j in 0..d {
                            target[base + j] = nums[j + 2]
                                .parse()
                                .map_err(|_| bad(no, "expected a float"))?;
                        }
                    }
                }
            }
            other => return Err(bad(no, &format!("unknown record `{other}`"))),
        }
    }
    let (b, s, d) = shape.ok_or_else(|| KitError::Format("missing `shape`".into()))?;
    let spans = spans
        .into_iter()
        .enumerate()
        .map(|(i, sp)| sp.ok_or_else(|| KitError::Format(format!("missing span for row {i}"))))
        .collect::<Result<Vec<_>>>()?;
    if hidden.iter().any(|x| x.is_nan()) || layers.iter().any(|(_, v)| v.iter().any(|x| x.is_nan())) {
        return Err(KitError::Format("some positions have no state line".into()));
    }
    let mut batch = TrajectoryBatch::new(Tensor::new(vec![b, s, d], hidden)?, spans)?;
    if let Some(labels) = labels {
        batch = batch.with_labels(labels)?;
    }
    for (k, v) in layers {
        batch = batch.with_layer(k, Tensor::new(vec![b, s, d], v)?)?;
    }
    Ok(batch)
}

/// Write text when the path ends in `.txt`, binary otherwise.
pub fn save(batch: &TrajectoryBatch, path: &Path) -> Result<()> {
    if is_text(path) {
        std::fs::write(path, to_text(batch))?;
    } else {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_binary(batch, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<TrajectoryBatch> {
    if is_text(path) {
        from_text(&std::fs::read_to_string(path)?)
    } else {
        read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn is_text(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "txt")
}
