//! Probe planning: per-vocabulary-index target addresses inside a mapped
//! model file, chosen to defeat hardware prefetchers.
//!
//! Targets are picked at page centers, one selected page per two physical
//! pages so no two targets land on adjacent pages, and are stored as offsets
//! from the minimum selected address so the offset array never holds a
//! dereferenceable pointer (Array-of-Pointers prefetcher evasion).

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum PlanError {
    IndexOutOfBounds { index: u32, vocab_size: u32 },
    InvalidLayout { message: String },
    NoProbeableAddresses,
    Io(std::io::Error),
    Parse(String),
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::IndexOutOfBounds { index, vocab_size } => {
                write!(f, "vocab index {index} out of bounds (vocab size {vocab_size})")
            }
            PlanError::InvalidLayout { message } => write!(f, "invalid layout: {message}"),
            PlanError::NoProbeableAddresses => write!(f, "no probeable addresses"),
            PlanError::Io(e) => write!(f, "io error: {e}"),
            PlanError::Parse(m) => write!(f, "plan parse error: {m}"),
        }
    }
}

impl std::error::Error for PlanError {}

impl From<std::io::Error> for PlanError {
    fn from(e: std::io::Error) -> Self {
        PlanError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableOrder {
    RowMajor,
    ColumnMajor,
}

/// Location and shape of the embedding table inside a mapped model file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLayout {
    /// Mapping start address, `p1`.
    pub base: u64,
    /// Byte offset of the embedding table within the mapping, `p2`.
    pub table_offset: u64,
    /// Embedding dimension `D`.
    pub dim: u32,
    /// Element size `b` in bytes.
    pub elem_size: u32,
    /// Vocabulary size `|V|`.
    pub vocab_size: u32,
    pub order: TableOrder,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
    /// Total mapped length, when known; used to validate that the table fits.
    #[serde(default)]
    pub mapped_len: Option<u64>,
}

fn default_page_size() -> u64 {
    4096
}

impl EmbeddingLayout {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.dim == 0 || self.elem_size == 0 {
            return Err(PlanError::InvalidLayout { message: "dim and elem_size must be >= 1".into() });
        }
        if self.vocab_size == 0 {
            return Err(PlanError::InvalidLayout { message: "vocab_size must be >= 1".into() });
        }
        if self.page_size == 0 {
            return Err(PlanError::InvalidLayout { message: "page_size must be >= 1".into() });
        }
        if let Some(len) = self.mapped_len {
            if self.table_offset + self.table_bytes() > len {
                return Err(PlanError::InvalidLayout {
                    message: format!(
                        "table (offset {} + {} bytes) does not fit in mapped length {len}",
                        self.table_offset,
                        self.table_bytes()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn table_start(&self) -> u64 {
        self.base + self.table_offset
    }

    pub fn table_bytes(&self) -> u64 {
        self.vocab_size as u64 * self.dim as u64 * self.elem_size as u64
    }

    pub fn table_end(&self) -> u64 {
        self.table_start() + self.table_bytes()
    }

    pub fn row_bytes(&self) -> u64 {
        self.dim as u64 * self.elem_size as u64
    }
}

/// Addresses that belong to one vocabulary index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LegalAddresses {
    /// Half-open byte range (row-major rows are contiguous).
    Range { start: u64, end: u64 },
    /// `{start + j*stride : 0 <= j < count}` (column-major rows are strided).
    Strided { start: u64, stride: u64, count: u32 },
}

impl LegalAddresses {
    pub fn contains(&self, addr: u64) -> bool {
        match *self {
            LegalAddresses::Range { start, end } => addr >= start && addr < end,
            LegalAddresses::Strided { start, stride, count } => {
                addr >= start
                    && (addr - start) % stride == 0
                    && (addr - start) / stride < count as u64
            }
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = u64> + '_> {
        match *self {
            LegalAddresses::Range { start, end } => Box::new(start..end),
            LegalAddresses::Strided { start, stride, count } => {
                Box::new((0..count as u64).map(move |j| start + j * stride))
            }
        }
    }
}

/// Addresses legal for row `i` of the embedding table.
///
/// Row-major: `[p1+p2+i*D*b, p1+p2+(i+1)*D*b)`.
/// Column-major: `{p1+p2+(i+j*|V|)*b : 0 <= j < D}`.
pub fn legal_range(layout: &EmbeddingLayout, index: u32) -> Result<LegalAddresses, PlanError> {
    if index >= layout.vocab_size {
        return Err(PlanError::IndexOutOfBounds { index, vocab_size: layout.vocab_size });
    }
    let start = layout.table_start();
    Ok(match layout.order {
        TableOrder::RowMajor => {
            let row = layout.row_bytes();
            LegalAddresses::Range {
                start: start + index as u64 * row,
                end: start + (index as u64 + 1) * row,
            }
        }
        TableOrder::ColumnMajor => LegalAddresses::Strided {
            start: start + index as u64 * layout.elem_size as u64,
            stride: layout.vocab_size as u64 * layout.elem_size as u64,
            count: layout.dim,
        },
    })
}

/// Offset table for probing: restored targets are `base_address + offsets[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub base_address: u64,
    /// One entry per vocab index; `None` when no address satisfying the
    /// constraints exists for that index.
    pub offsets: Vec<Option<u64>>,
    pub covered: u32,
    pub layout: EmbeddingLayout,
    pub warnings: Vec<String>,
}

impl ProbePlan {
    /// Restored target address for index `i`, when covered.
    pub fn address_of(&self, index: u32) -> Option<u64> {
        self.offsets
            .get(index as usize)
            .copied()
            .flatten()
            .map(|off| self.base_address + off)
    }

    /// Covered vocab indices in ascending order.
    pub fn covered_indices(&self) -> Vec<u32> {
        self.offsets
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|_| i as u32))
            .collect()
    }

    pub fn write_json_path(&self, path: &Path) -> Result<(), PlanError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| PlanError::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json_path(path: &Path) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PlanError::Parse(e.to_string()))
    }
}

/// Build a probe plan by walking candidate pages over the table span.
///
/// Candidate pages step by two page sizes so selected targets are never on
/// adjacent pages. Each candidate contributes its page center; the center is
/// assigned to the index whose legal range (row-major) or nearest-below
/// element (column-major) contains it, first come first served per index.
pub fn build_plan(layout: &EmbeddingLayout) -> Result<ProbePlan, PlanError> {
    layout.validate()?;
    let table_start = layout.table_start();
    let table_end = layout.table_end();
    let page = layout.page_size;
    let first_page = (table_start / page) * page;

    let mut chosen: Vec<Option<u64>> = vec![None; layout.vocab_size as usize];
    let mut covered = 0u32;

    let mut cp = first_page;
    while cp < table_end {
        let center = cp + page / 2;
        if let Some((index, addr)) = candidate_for_center(layout, center) {
            // The chosen address must sit on the candidate page, otherwise the
            // two-page stride would not guarantee the adjacency rule.
            if addr >= cp && addr < cp + page && chosen[index as usize].is_none() {
                chosen[index as usize] = Some(addr);
                covered += 1;
            }
        }
        // One selected page per two physical pages.
        cp = cp.saturating_add(page * 2);
        if page == 0 {
            break;
        }
    }

    if covered == 0 {
        return Err(PlanError::NoProbeableAddresses);
    }

    let base_address = chosen.iter().flatten().copied().min().expect("covered > 0");
    let max_offset = chosen.iter().flatten().map(|a| a - base_address).max().unwrap_or(0);
    let mut warnings = Vec::new();
    if base_address <= max_offset {
        warnings.push(format!(
            "offset range 0..={max_offset} overlaps the target address range starting at {base_address}; \
             offsets may alias valid pointers"
        ));
    }
    let offsets = chosen.iter().map(|c| c.map(|a| a - base_address)).collect();

    Ok(ProbePlan { base_address, offsets, covered, layout: *layout, warnings })
}

/// Greatest legal address at or below the page center, with its vocab index.
fn candidate_for_center(layout: &EmbeddingLayout, center: u64) -> Option<(u32, u64)> {
    let start = layout.table_start();
    if center < start || center >= layout.table_end() {
        return None;
    }
    match layout.order {
        TableOrder::RowMajor => {
            let row = (center - start) / layout.row_bytes();
            debug_assert!(row < layout.vocab_size as u64);
            // The page center itself lies within the row's range.
            Some((row as u32, center))
        }
        TableOrder::ColumnMajor => {
            let b = layout.elem_size as u64;
            let n = (center - start) / b;
            let index = n % layout.vocab_size as u64;
            let col = n / layout.vocab_size as u64;
            if col >= layout.dim as u64 {
                return None;
            }
            Some((index as u32, start + n * b))
        }
    }
}

/// Per-worker visit orders over the plan's covered indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub per_worker: Vec<Vec<u32>>,
    /// True when any block size shares a factor with 167 and the affine map
    /// was replaced by a seeded shuffle.
    pub affine_fallback: bool,
}

const AFFINE_MULTIPLIER: u64 = 167;
const AFFINE_OFFSET: u64 = 13;

/// Partition covered indices into `workers` contiguous blocks of size
/// `ceil(covered/workers)` (last block ragged) and permute each block with
/// the affine map `(v*167+13) mod block_size`. The affine map is only a
/// bijection when gcd(167, block_size) == 1; other block sizes fall back to
/// a deterministically seeded Fisher-Yates shuffle.
pub fn permuted_schedule(plan: &ProbePlan, workers: usize) -> Schedule {
    let covered = plan.covered_indices();
    let workers = workers.max(1);
    if covered.is_empty() {
        return Schedule { per_worker: vec![Vec::new(); workers], affine_fallback: false };
    }
    let block = covered.len().div_ceil(workers);
    let mut per_worker = Vec::with_capacity(workers);
    let mut fallback = false;
    for w in 0..workers {
        let lo = (w * block).min(covered.len());
        let hi = ((w + 1) * block).min(covered.len());
        let slice = &covered[lo..hi];
        let n = slice.len();
        if n == 0 {
            per_worker.push(Vec::new());
            continue;
        }
        let order: Vec<u32> = if gcd(AFFINE_MULTIPLIER, n as u64) == 1 {
            (0..n as u64)
                .map(|v| slice[((v * AFFINE_MULTIPLIER + AFFINE_OFFSET) % n as u64) as usize])
                .collect()
        } else {
            fallback = true;
            seeded_shuffle(slice, w as u64)
        };
        per_worker.push(order);
    }
    Schedule { per_worker, affine_fallback: fallback }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn seeded_shuffle(slice: &[u32], worker: u64) -> Vec<u32> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0x70_6c_61_6e ^ (worker << 32) ^ slice.len() as u64);
    let mut out = slice.to_vec();
    out.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn layout(
        base: u64,
        table_offset: u64,
        dim: u32,
        elem_size: u32,
        vocab_size: u32,
        order: TableOrder,
    ) -> EmbeddingLayout {
        EmbeddingLayout {
            base,
            table_offset,
            dim,
            elem_size,
            vocab_size,
            order,
            page_size: 4096,
            mapped_len: None,
        }
    }

    #[test]
    fn legal_range_row_major() {
        // p1=0, p2=0, D=4096, b=2, i=1 -> [8192, 16384)
        let l = layout(0, 0, 4096, 2, 4, TableOrder::RowMajor);
        assert_eq!(legal_range(&l, 1).unwrap(), LegalAddresses::Range { start: 8192, end: 16384 });
    }

    #[test]
    fn legal_range_column_major() {
        // p1=0, p2=0, D=2, b=4, |V|=3, i=0 -> {0, 12}
        let l = layout(0, 0, 2, 4, 3, TableOrder::ColumnMajor);
        let set = legal_range(&l, 0).unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![0, 12]);
        assert!(set.contains(0) && set.contains(12));
        assert!(!set.contains(4) && !set.contains(24));
    }

    #[test]
    fn legal_range_base_offset() {
        let l = layout(100, 0, 8, 1, 4, TableOrder::RowMajor);
        assert_eq!(legal_range(&l, 0).unwrap(), LegalAddresses::Range { start: 100, end: 108 });
    }

    #[test]
    fn legal_range_out_of_bounds() {
        let l = layout(0, 0, 8, 1, 4, TableOrder::RowMajor);
        assert!(matches!(legal_range(&l, 4), Err(PlanError::IndexOutOfBounds { index: 4, .. })));
    }

    /// Brute-force constraint checker: every restored address legal, no two
    /// targets on adjacent pages, offsets never alias a restored address
    /// unless the plan flagged the overlap.
    fn check_plan(plan: &ProbePlan) {
        let layout = &plan.layout;
        let mut pages = Vec::new();
        let mut addrs = std::collections::HashSet::new();
        for i in plan.covered_indices() {
            let addr = plan.address_of(i).unwrap();
            let legal = legal_range(layout, i).unwrap();
            assert!(legal.contains(addr), "index {i}: address {addr} outside legal set");
            pages.push(addr / layout.page_size);
            addrs.insert(addr);
        }
        pages.sort_unstable();
        for w in pages.windows(2) {
            assert_ne!(w[1] - w[0], 1, "targets on adjacent pages {} and {}", w[0], w[1]);
            assert_ne!(w[1], w[0], "two targets share page {}", w[0]);
        }
        let aliasing = plan
            .offsets
            .iter()
            .flatten()
            .any(|off| addrs.contains(off));
        if aliasing {
            assert!(
                !plan.warnings.is_empty(),
                "offset aliases a target address but no warning was recorded"
            );
        }
    }

    #[test]
    fn one_row_per_page_covers_everything() {
        // D*b == page_size: each selected page center lands inside its own
        // row, and the two-page stride halves nothing because rows repeat
        // every page. Every *selected* page covers one distinct row.
        let l = layout(1 << 20, 0, 2048, 2, 64, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        // Stride of two pages over 64 one-page rows selects 32 rows.
        assert_eq!(plan.covered, 32);
        for i in plan.covered_indices() {
            let addr = plan.address_of(i).unwrap();
            let row_start = l.table_start() + i as u64 * l.row_bytes();
            assert_eq!(addr, row_start + l.page_size / 2, "index {i} not at its page center");
        }
        check_plan(&plan);
    }

    #[test]
    fn eight_rows_per_page() {
        // D*b == page_size/8: one row per selected page center, two-page
        // stride, so roughly |V|/16 coverage; all constraints hold.
        let l = layout(0x10_0000, 0, 256, 2, 256, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        assert_eq!(plan.covered, 16); // 256 rows / 8 per page = 32 pages, stride 2 -> 16
        check_plan(&plan);
    }

    #[test]
    fn single_index_plan() {
        let l = layout(1 << 16, 0, 4096, 2, 1, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        assert!(plan.covered <= 1);
        check_plan(&plan);
    }

    #[test]
    fn tiny_misaligned_table_errors() {
        // Table smaller than one page positioned so no page center hits it.
        let l = layout(100, 0, 2, 1, 2, TableOrder::RowMajor);
        assert!(matches!(build_plan(&l), Err(PlanError::NoProbeableAddresses)));
    }

    #[test]
    fn random_layouts_satisfy_constraints() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let mut built = 0;
        for _ in 0..200 {
            let order = if rng.random::<bool>() { TableOrder::RowMajor } else { TableOrder::ColumnMajor };
            let l = EmbeddingLayout {
                base: rng.random_range(0..1u64 << 24) & !7,
                table_offset: rng.random_range(0..1u64 << 16),
                dim: rng.random_range(1..=512),
                elem_size: *[1u32, 2, 4, 8].get(rng.random_range(0..4)).unwrap(),
                vocab_size: rng.random_range(1..=512),
                order,
                page_size: 4096,
                mapped_len: None,
            };
            match build_plan(&l) {
                Ok(plan) => {
                    built += 1;
                    check_plan(&plan);
                }
                Err(PlanError::NoProbeableAddresses) => {}
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        assert!(built > 150, "too few layouts produced plans: {built}");
    }

    #[test]
    fn affine_schedule_single_worker() {
        let l = layout(1 << 20, 0, 2048, 2, 20, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        assert_eq!(plan.covered, 10);
        let covered = plan.covered_indices();
        let sched = permuted_schedule(&plan, 1);
        assert!(!sched.affine_fallback);
        let expected: Vec<u32> = [3usize, 0, 7, 4, 1, 8, 5, 2, 9, 6].iter().map(|&p| covered[p]).collect();
        assert_eq!(sched.per_worker, vec![expected]);
    }

    #[test]
    fn singleton_blocks() {
        let l = layout(1 << 20, 0, 2048, 2, 8, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        assert_eq!(plan.covered, 4);
        let sched = permuted_schedule(&plan, 4);
        assert_eq!(sched.per_worker.len(), 4);
        for w in &sched.per_worker {
            assert_eq!(w.len(), 1);
        }
    }

    #[test]
    fn fifteen_partitions() {
        // num_partitions = 15 with 15 covered indices: singleton schedules.
        let l = layout(1 << 20, 0, 2048, 2, 30, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        assert_eq!(plan.covered, 15);
        let sched = permuted_schedule(&plan, 15);
        assert_eq!(sched.per_worker.iter().filter(|w| w.len() == 1).count(), 15);
    }

    #[test]
    fn schedule_is_partition_of_covered() {
        let l = layout(1 << 20, 0, 512, 2, 600, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        for workers in [1usize, 2, 3, 7, 15, 64] {
            let sched = permuted_schedule(&plan, workers);
            let mut seen: Vec<u32> = sched.per_worker.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, plan.covered_indices(), "workers={workers}");
        }
    }

    #[test]
    fn non_coprime_block_falls_back_to_shuffle() {
        // Force a block size of 167 (gcd(167,167) != 1).
        let l = layout(1 << 22, 0, 2048, 2, 668, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        assert_eq!(plan.covered, 334);
        let sched = permuted_schedule(&plan, 2);
        assert!(sched.affine_fallback);
        let mut seen: Vec<u32> = sched.per_worker.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, plan.covered_indices());
        // Deterministic across calls.
        assert_eq!(sched, permuted_schedule(&plan, 2));
    }

    #[test]
    fn plan_json_round_trip() {
        let l = layout(1 << 20, 64, 2048, 2, 16, TableOrder::RowMajor);
        let plan = build_plan(&l).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.write_json_path(&path).unwrap();
        let back = ProbePlan::read_json_path(&path).unwrap();
        assert_eq!(plan, back);
    }
}
