//! Per-task prompt memory bank: keys, prompts, normal-feature coreset and
//! calibration, with task-identity inference and a bit-exact file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "CMPB" | version u32 = 1 | task_count u32
//! per task:
//!   name_len u16 | name UTF-8
//!   C u32 | N_f u32 | keys        N_f x C            f32
//!   N_l u32 | C_t u32 | text rows N_l x C_t          f32
//!   n_layers u32 | l u32 | visual n_layers x l x C   f32
//!   N_g u32 | feature bank        N_g x C            f32
//!   calib_v k f64 | b f64 | calib_t k f64 | b f64
//! ```

use std::path::Path;

use crate::backbone::{TextPrompt, VisualPrompt};
use crate::error::{Error, Result};
use crate::kernels::{dot, norm};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, PatchSet};

pub const BANK_MAGIC: [u8; 4] = *b"CMPB";
pub const BANK_VERSION: u32 = 1;

/// Fixed sigmoid steepness.
pub const DEFAULT_STEEPNESS: f64 = 1.5;

/// Sigmoid steepness `k` and center `b` for one scoring branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration<T> {
    pub k: T,
    pub b: T,
}

impl<T: Scalar> Calibration<T> {
    pub fn new(k: T, b: T) -> Result<Self> {
        if !(k > T::zero()) || !k.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("calibration needs finite k > 0 and finite b, got k={k} b={b}")));
        }
        Ok(Self { k, b })
    }

    pub fn centered(b: T) -> Self {
        Self { k: T::of(DEFAULT_STEEPNESS), b }
    }
}

/// One task's quadruple plus calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMemory<T> {
    pub task_name: String,
    pub keys: PatchSet<T>,
    pub text_prompt: TextPrompt<T>,
    pub visual_prompt: VisualPrompt<T>,
    pub feature_bank: PatchSet<T>,
    pub calib_v: Calibration<T>,
    pub calib_t: Calibration<T>,
}

fn round_f32<T: Scalar>(v: T) -> T {
    T::of(f64::from(v.as_f32()))
}

fn round_slice<T: Scalar>(data: &[T]) -> Vec<T> {
    data.iter().map(|&v| round_f32(v)).collect()
}

impl<T: Scalar> TaskMemory<T> {
    /// Assembles a memory; array contents are rounded to storage precision so a
    /// saved and reloaded bank behaves bit-identically.
    pub fn new(
        task_name: impl Into<String>,
        keys: PatchSet<T>,
        text_prompt: TextPrompt<T>,
        visual_prompt: VisualPrompt<T>,
        feature_bank: PatchSet<T>,
        calib_v: Calibration<T>,
        calib_t: Calibration<T>,
    ) -> Result<Self> {
        let task_name = task_name.into();
        if task_name.is_empty() || task_name.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument("task name must be 1..=65535 bytes".into()));
        }
        let c = keys.channels();
        if feature_bank.channels() != c || visual_prompt.dim() != c {
            return Err(Error::DimensionMismatch(format!(
                "keys width {c}, bank width {}, visual prompt width {}",
                feature_bank.channels(),
                visual_prompt.dim()
            )));
        }
        Calibration::new(calib_v.k, calib_v.b)?;
        Calibration::new(calib_t.k, calib_t.b)?;
        let keys = PatchSet::new(keys.count(), c, round_slice(keys.as_slice()))?;
        let feature_bank = PatchSet::new(feature_bank.count(), c, round_slice(feature_bank.as_slice()))?;
        let tl = &text_prompt.learnable;
        let text_prompt = TextPrompt::new(Matrix::new(tl.rows(), tl.cols(), round_slice(tl.as_slice()))?, text_prompt.class_name)?;
        let visual_prompt = VisualPrompt::new(
            visual_prompt
                .layers()
                .iter()
                .map(|m| Matrix::new(m.rows(), m.cols(), round_slice(m.as_slice())))
                .collect::<Result<_>>()?,
        )?;
        Ok(Self { task_name, keys, text_prompt, visual_prompt, feature_bank, calib_v, calib_t })
    }

    pub fn channels(&self) -> usize {
        self.keys.channels()
    }

    /// Serialized bytes of this task's record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_task(&mut out, self);
        out
    }
}

/// Ordered, append-only collection of task memories.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryBank<T> {
    tasks: Vec<TaskMemory<T>>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new() -> Self {
        Self { tasks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskMemory<T>] {
        &self.tasks
    }

    pub fn task(&self, index: usize) -> Option<&TaskMemory<T>> {
        self.tasks.get(index)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tasks.iter().any(|t| t.task_name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_name == name)
    }

    /// Appends a task; earlier entries are never touched.
    pub fn insert_task(&mut self, mem: TaskMemory<T>) -> Result<usize> {
        if self.contains(&mem.task_name) {
            return Err(Error::DuplicateTask(mem.task_name));
        }
        if let Some(first) = self.tasks.first() {
            if first.channels() != mem.channels() {
                return Err(Error::DimensionMismatch(format!(
                    "task width {} vs bank width {}",
                    mem.channels(),
                    first.channels()
                )));
            }
        }
        self.tasks.push(mem);
        Ok(self.tasks.len() - 1)
    }

    /// Task whose keys best match `query`: per task, the mean over query rows
    /// of the best cosine similarity to any key row. Ties go to the lower index.
    pub fn infer_task(&self, query: &PatchSet<T>) -> Result<(usize, T)> {
        if self.tasks.is_empty() {
            return Err(Error::EmptyBank);
        }
        let q = unit_rows(query)?;
        let mut best: Option<(usize, T)> = None;
        for (i, task) in self.tasks.iter().enumerate() {
            if task.keys.channels() != query.channels() {
                return Err(Error::DimensionMismatch(format!(
                    "query width {} vs key width {}",
                    query.channels(),
                    task.keys.channels()
                )));
            }
            let k = unit_rows(&task.keys)?;
            let sims = q.matmul_t(&k);
            let mut total = T::zero();
            for r in 0..sims.rows() {
                let m = sims.row(r).iter().copied().fold(T::neg_infinity(), T::max);
                total += m.max(-T::one()).min(T::one());
            }
            let score = total / T::of(sims.rows() as f64);
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((i, score)),
            }
        }
        Ok(best.expect("bank is nonempty"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tasks.len() as u32).to_le_bytes());
        for t in &self.tasks {
            write_task(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.array4()?;
        if magic != BANK_MAGIC {
            return Err(Error::BadMagic { expected: BANK_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::VersionMismatch { expected: BANK_VERSION, found: version });
        }
        let count = r.u32()? as usize;
        let mut bank = Self::new();
        for _ in 0..count {
            bank.insert_task(read_task(&mut r)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Exact serialized size of a bank with the given per-task shapes.
pub fn bank_file_size(tasks: &[TaskShape]) -> usize {
    12 + tasks.iter().map(TaskShape::record_size).sum::<usize>()
}

/// Array dimensions of one task record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskShape {
    pub name_len: usize,
    pub channels: usize,
    pub keys: usize,
    pub text_rows: usize,
    pub text_dim: usize,
    pub layers: usize,
    pub prompt_len: usize,
    pub bank_rows: usize,
}

impl TaskShape {
    pub fn record_size(&self) -> usize {
        2 + self.name_len
            + 8
            + 4 * self.keys * self.channels
            + 8
            + 4 * self.text_rows * self.text_dim
            + 8
            + 4 * self.layers * self.prompt_len * self.channels
            + 4
            + 4 * self.bank_rows * self.channels
            + 32
    }
}

fn unit_rows<T: Scalar>(set: &PatchSet<T>) -> Result<Matrix<T>> {
    let mut m = set.to_matrix();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == T::zero() {
            return Err(Error::DegenerateVector);
        }
        for v in m.row_mut(i) {
            *v /= n;
        }
    }
    debug_assert!(m.rows() == 0 || (dot(m.row(0), m.row(0)) - T::one()).abs() < T::of(1e-6));
    Ok(m)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    for v in data {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

fn write_task<T: Scalar>(out: &mut Vec<u8>, t: &TaskMemory<T>) {
    out.extend_from_slice(&(t.task_name.len() as u16).to_le_bytes());
    out.extend_from_slice(t.task_name.as_bytes());
    put_u32(out, t.keys.channels());
    put_u32(out, t.keys.count());
    put_f32s(out, t.keys.as_slice());
    put_u32(out, t.text_prompt.learnable.rows());
    put_u32(out, t.text_prompt.learnable.cols());
    put_f32s(out, t.text_prompt.learnable.as_slice());
    put_u32(out, t.visual_prompt.n_layers());
    put_u32(out, t.visual_prompt.prompt_len());
    for m in t.visual_prompt.layers() {
        put_f32s(out, m.as_slice());
    }
    put_u32(out, t.feature_bank.count());
    put_f32s(out, t.feature_bank.as_slice());
    for c in [t.calib_v, t.calib_t] {
        out.extend_from_slice(&c.k.as_f64().to_le_bytes());
        out.extend_from_slice(&c.b.as_f64().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated { offset: self.pos, needed: n - (self.bytes.len() - self.pos) }),
        }
    }

    fn array4(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().expect("4 bytes"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array4()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s<T: Scalar>(&mut self, count: usize) -> Result<Vec<T>> {
        let n = count.checked_mul(4).ok_or_else(|| Error::Malformed("array size overflow".into()))?;
        let raw = self.take(n)?;
        Ok(raw.chunks_exact(4).map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))).collect())
    }
}

fn read_task<T: Scalar>(r: &mut Reader<'_>) -> Result<TaskMemory<T>> {
    let name_len = usize::from(r.u16()?);
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Malformed(format!("task name: {e}")))?;
    let c = r.u32()? as usize;
    let nf = r.u32()? as usize;
    let keys = PatchSet::new(nf, c, r.f32s(nf * c)?)?;
    let nl = r.u32()? as usize;
    let ct = r.u32()? as usize;
    let text = TextPrompt::new(Matrix::new(nl, ct, r.f32s(nl * ct)?)?, name.clone())?;
    let layers = r.u32()? as usize;
    let l = r.u32()? as usize;
    let visual = VisualPrompt::new((0..layers).map(|_| Matrix::new(l, c, r.f32s(l * c)?)).collect::<Result<_>>()?)?;
    let ng = r.u32()? as usize;
    let bank = PatchSet::new(ng, c, r.f32s(ng * c)?)?;
    let mut calib = || -> Result<Calibration<T>> {
        let k = r.f64()?;
        let b = r.f64()?;
        Calibration::new(T::of(k), T::of(b))
    };
    let calib_v = calib()?;
    let calib_t = calib()?;
    TaskMemory::new(name, keys, text, visual, bank, calib_v, calib_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    pub(crate) fn synthetic_task(name: &str, c: usize, nf: usize, ng: usize, center: f64, seed: u64) -> TaskMemory<f64> {
        let mut rng = Rng::new(seed);
        let mut rows = |n: usize| {
            PatchSet::new(n, c, (0..n * c).map(|i| if i % c == 0 { center } else { 0.0 } + rng.normal()).collect()).unwrap()
        };
        let keys = rows(nf);
        let bank = rows(ng);
        let text = TextPrompt::new(Matrix::filled(5, 4, 0.25), name).unwrap();
        let visual = VisualPrompt::new(vec![Matrix::filled(2, c, 0.5); 3]).unwrap();
        TaskMemory::new(name, keys, text, visual, bank, Calibration::centered(0.5), Calibration::centered(-0.25)).unwrap()
    }

    #[test]
    fn insert_and_reject_duplicates() {
        let mut bank = MemoryBank::new();
        assert_eq!(bank.insert_task(synthetic_task("a", 6, 4, 5, 0.0, 1)).unwrap(), 0);
        assert_eq!(bank.len(), 1);
        assert!(matches!(bank.insert_task(synthetic_task("a", 6, 4, 5, 0.0, 2)), Err(Error::DuplicateTask(_))));
    }

    #[test]
    fn empty_bank_cannot_infer() {
        let bank = MemoryBank::<f64>::new();
        let q = PatchSet::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(bank.infer_task(&q), Err(Error::EmptyBank)));
    }

    #[test]
    fn self_match_scores_one() {
        let mut bank = MemoryBank::new();
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            bank.insert_task(synthetic_task(name, 6, 8, 5, 4.0 * i as f64, i as u64)).unwrap();
        }
        let (idx, score) = bank.infer_task(&bank.tasks()[1].keys.clone()).unwrap();
        assert_eq!(idx, 1);
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_task_always_wins() {
        let mut bank = MemoryBank::new();
        bank.insert_task(synthetic_task("only", 6, 4, 5, 0.0, 1)).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let q = PatchSet::new(3, 6, (0..18).map(|_| rng.normal()).collect()).unwrap();
            let (idx, s) = bank.infer_task(&q).unwrap();
            assert_eq!(idx, 0);
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn round_trip_is_idempotent() {
        let mut bank = MemoryBank::new();
        bank.insert_task(synthetic_task("alpha", 6, 4, 5, 0.0, 1)).unwrap();
        bank.insert_task(synthetic_task("beta", 6, 3, 7, 2.0, 2)).unwrap();
        let bytes = bank.to_bytes();
        let back = MemoryBank::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn load_errors_are_distinct() {
        let mut bank = MemoryBank::new();
        bank.insert_task(synthetic_task("alpha", 6, 4, 5, 0.0, 1)).unwrap();
        let bytes = bank.to_bytes();
        assert!(matches!(MemoryBank::<f64>::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryBank::<f64>::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(MemoryBank::<f64>::from_bytes(&bad), Err(Error::VersionMismatch { found: 2, .. })));
    }
}
