//! The compressed-cache data structure: group-packed storage keyed by
//! dimension, the retained full-rank local window, nested projection bases,
//! memory-footprint accounting that counts projection matrices, and the
//! bit-exact `.mdkv` serialization format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, MatrixF64};
use crate::pca::{project, ProjectionBasis};

pub const MDKV_MAGIC: [u8; 4] = *b"MDKV";
pub const MDKV_VERSION: u16 = 1;

/// Tokens packed at one dimension: ascending original indices plus the
/// projected (or, at full dimension, raw) key and value rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub indices: Vec<u32>,
    pub keys: Matrix,
    pub values: Matrix,
}

/// One KV head's compressed cache.
#[derive(Debug, Clone)]
pub struct HeadCache {
    head_dim: usize,
    window_k: Matrix,
    window_v: Matrix,
    /// dim -> packed group. No entry for dim 0 (evicted tokens are absent)
    /// and none for dims with no tokens.
    groups: BTreeMap<usize, Group>,
    basis_k: ProjectionBasis,
    basis_v: ProjectionBasis,
    /// Window plus compressible token count.
    original_len: usize,
}

impl HeadCache {
    /// Packs one head. `keys`/`values` hold the compressible tokens (window
    /// excluded) in sequence order; `dims[i]` is the dimension chosen for
    /// token `i`. Full-dimension tokens are stored raw, dim-0 tokens dropped,
    /// everything else projected through the sliced basis.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        keys: &Matrix,
        values: &Matrix,
        dims: &[usize],
        candidate_dims: &[usize],
        basis_k: &ProjectionBasis,
        basis_v: &ProjectionBasis,
        window_k: &Matrix,
        window_v: &Matrix,
    ) -> Result<HeadCache> {
        let d = keys.cols();
        if values.cols() != d || values.rows() != keys.rows() {
            return Err(Error::contract("build: key/value shape mismatch"));
        }
        if dims.len() != keys.rows() {
            return Err(Error::contract(format!(
                "build: {} dims for {} tokens",
                dims.len(),
                keys.rows()
            )));
        }
        if window_k.cols() != d || window_v.cols() != d || window_k.rows() != window_v.rows() {
            return Err(Error::contract("build: window shape mismatch"));
        }
        if basis_k.head_dim() != d || basis_v.head_dim() != d {
            return Err(Error::contract("build: basis head dim mismatch"));
        }
        if let Some(&bad) = dims.iter().find(|d| !candidate_dims.contains(d)) {
            return Err(Error::contract(format!(
                "build: dim {bad} is not a candidate dimension"
            )));
        }

        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &di) in dims.iter().enumerate() {
            if di > 0 {
                members.entry(di).or_default().push(i);
            }
        }
        let mut groups = BTreeMap::new();
        for (dim, idx) in members {
            let k_rows = keys.gather_rows(&idx);
            let v_rows = values.gather_rows(&idx);
            let (k_c, v_c) = if dim == d {
                (k_rows, v_rows)
            } else {
                if dim > basis_k.max_rank() || dim > basis_v.max_rank() {
                    return Err(Error::DataIntegrity(format!(
                        "build: dim {dim} exceeds stored basis rank {}",
                        basis_k.max_rank()
                    )));
                }
                (
                    project(&k_rows, basis_k, dim)?,
                    project(&v_rows, basis_v, dim)?,
                )
            };
            groups.insert(
                dim,
                Group {
                    indices: idx.into_iter().map(|i| i as u32).collect(),
                    keys: k_c,
                    values: v_c,
                },
            );
        }
        Ok(HeadCache {
            head_dim: d,
            window_k: window_k.clone(),
            window_v: window_v.clone(),
            groups,
            basis_k: basis_k.clone(),
            basis_v: basis_v.clone(),
            original_len: keys.rows() + window_k.rows(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn window_k(&self) -> &Matrix {
        &self.window_k
    }

    pub fn window_v(&self) -> &Matrix {
        &self.window_v
    }

    pub fn window_len(&self) -> usize {
        self.window_k.rows()
    }

    pub fn groups(&self) -> &BTreeMap<usize, Group> {
        &self.groups
    }

    pub fn basis_k(&self) -> &ProjectionBasis {
        &self.basis_k
    }

    pub fn basis_v(&self) -> &ProjectionBasis {
        &self.basis_v
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// Number of compressible tokens the head was built from.
    pub fn compressible_len(&self) -> usize {
        self.original_len - self.window_k.rows()
    }

    /// (token index, dim) pairs across all groups, ascending by index.
    pub fn stored_tokens(&self) -> Vec<(u32, usize)> {
        let mut out: Vec<(u32, usize)> = self
            .groups
            .iter()
            .flat_map(|(&dim, g)| g.indices.iter().map(move |&i| (i, dim)))
            .collect();
        out.sort_unstable();
        out
    }
}

/// A full layer's compressed cache: one [`HeadCache`] per KV head plus the
/// shared layout metadata.
#[derive(Debug, Clone)]
pub struct CompressedCache {
    heads: Vec<HeadCache>,
    head_dim: usize,
    window_len: usize,
    /// Candidate dims, ascending; first 0, last `head_dim`.
    ratio_dims: Vec<usize>,
    /// Head dimension used for the 1/sqrt(d) attention scale. Equals
    /// `head_dim` except for joint-head caches, whose packed width is
    /// H_kv x the model head dimension.
    attn_scale_dim: usize,
}

impl CompressedCache {
    pub fn new(heads: Vec<HeadCache>, ratio_dims: Vec<usize>, attn_scale_dim: usize) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::contract("cache: at least one head required"))?;
        let head_dim = first.head_dim;
        let window_len = first.window_len();
        let original_len = first.original_len;
        if heads.iter().any(|h| {
            h.head_dim != head_dim || h.window_len() != window_len || h.original_len != original_len
        }) {
            return Err(Error::contract("cache: heads disagree on shape"));
        }
        if ratio_dims.first() != Some(&0) || ratio_dims.last() != Some(&head_dim) {
            return Err(Error::contract("cache: ratio dims must span 0..=head_dim"));
        }
        if ratio_dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("cache: ratio dims must be ascending"));
        }
        for h in &heads {
            for &dim in h.groups.keys() {
                if !ratio_dims.contains(&dim) {
                    return Err(Error::DataIntegrity(format!(
                        "cache: group dim {dim} not in candidate set"
                    )));
                }
            }
        }
        Ok(CompressedCache {
            heads,
            head_dim,
            window_len,
            ratio_dims,
            attn_scale_dim,
        })
    }

    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn ratio_dims(&self) -> &[usize] {
        &self.ratio_dims
    }

    pub fn attn_scale_dim(&self) -> usize {
        self.attn_scale_dim
    }

    /// Stored rank of the nested bases (uniform across heads).
    pub fn max_stored_rank(&self) -> usize {
        self.heads
            .first()
            .map_or(0, |h| h.basis_k.max_rank())
    }

    /// Exact stored-entry accounting, in f32 scalar units.
    pub fn footprint(&self) -> MemoryFootprint {
        let mut per_head = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let mut tokens = 2 * h.window_k.rows() as u64 * h.head_dim as u64;
            for (&dim, g) in &h.groups {
                tokens += 2 * g.indices.len() as u64 * dim as u64;
            }
            let projection =
                2 * h.head_dim as u64 * h.basis_k.max_rank().max(h.basis_v.max_rank()) as u64;
            per_head.push(HeadFootprint {
                token_entries: tokens,
                projection_entries: projection,
            });
        }
        let token_entries = per_head.iter().map(|h| h.token_entries).sum();
        let projection_entries = per_head.iter().map(|h| h.projection_entries).sum();
        MemoryFootprint {
            token_entries,
            projection_entries,
            total: token_entries + projection_entries,
            per_head,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CompressedCache> {
        deserialize(bytes)
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read_file(path: &Path) -> Result<CompressedCache> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CompressedCache::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Stored-entry counts (f32 scalars, not bytes) for a compressed cache.
/// `total` = token entries (keys and values, window included) plus the
/// projection matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryFootprint {
    pub token_entries: u64,
    pub projection_entries: u64,
    pub total: u64,
    pub per_head: Vec<HeadFootprint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeadFootprint {
    pub token_entries: u64,
    pub projection_entries: u64,
}

// ---------------------------------------------------------------------------
// .mdkv encoding
//
// Little-endian throughout:
//   magic "MDKV" | version u16 | H_kv u16 | D u16 | alpha u32 | N u32
//   | r_max u16 | num_ratios u8 | ratio dims u16 each
//   | per head: basis_K, basis_V (f32 row-major D x r_max),
//               window K, window V (f32 alpha x D),
//               per candidate dim > 0 ascending:
//                 dim u16 | count u32 | indices u32 each | K_c | V_c (f32)
//   | crc32 of all preceding bytes.
//
// A group record exists for every candidate dim > 0; empty groups have
// count 0. N is the compressible (non-window) token count. Basis columns are
// narrowed to f32 on disk; eigenvalues are not persisted.
// ---------------------------------------------------------------------------

fn serialize(cache: &CompressedCache) -> Result<Vec<u8>> {
    let h_kv = cache.heads.len();
    let d = cache.head_dim;
    let alpha = cache.window_len;
    let n_comp = cache.heads[0].compressible_len();
    let r_max = cache.max_stored_rank();
    if cache.heads.iter().any(|h| {
        h.basis_k.max_rank() != r_max || h.basis_v.max_rank() != r_max
    }) {
        return Err(Error::contract("serialize: heads disagree on stored rank"));
    }
    for check in [h_kv, d, r_max] {
        if check > u16::MAX as usize {
            return Err(Error::contract("serialize: field exceeds u16 range"));
        }
    }
    if cache.ratio_dims.len() > u8::MAX as usize {
        return Err(Error::contract("serialize: too many candidate ratios"));
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MDKV_MAGIC);
    out.extend_from_slice(&MDKV_VERSION.to_le_bytes());
    out.extend_from_slice(&(h_kv as u16).to_le_bytes());
    out.extend_from_slice(&(d as u16).to_le_bytes());
    out.extend_from_slice(&(alpha as u32).to_le_bytes());
    out.extend_from_slice(&(n_comp as u32).to_le_bytes());
    out.extend_from_slice(&(r_max as u16).to_le_bytes());
    out.push(cache.ratio_dims.len() as u8);
    for &dim in &cache.ratio_dims {
        out.extend_from_slice(&(dim as u16).to_le_bytes());
    }

    let put_f64_as_f32 = |out: &mut Vec<u8>, m: &MatrixF64| {
        for &x in m.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    let put_f32 = |out: &mut Vec<u8>, m: &Matrix| {
        for &x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };

    for head in &cache.heads {
        put_f64_as_f32(&mut out, head.basis_k.basis());
        put_f64_as_f32(&mut out, head.basis_v.basis());
        put_f32(&mut out, &head.window_k);
        put_f32(&mut out, &head.window_v);
        for &dim in cache.ratio_dims.iter().filter(|&&dim| dim > 0) {
            out.extend_from_slice(&(dim as u16).to_le_bytes());
            match head.groups.get(&dim) {
                Some(g) => {
                    out.extend_from_slice(&(g.indices.len() as u32).to_le_bytes());
                    for &i in &g.indices {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                    put_f32(&mut out, &g.keys);
                    put_f32(&mut out, &g.values);
                }
                None => out.extend_from_slice(&0u32.to_le_bytes()),
            }
        }
    }

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let offset = self.pos as u64;
        let raw = self.take(rows * cols * 4, what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(4) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::format(offset, format!("non-finite value in {what}")));
            }
            data.push(x);
        }
        Ok(Matrix::new(rows, cols, data).expect("validated above"))
    }
}

fn deserialize(bytes: &[u8]) -> Result<CompressedCache> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MDKV_MAGIC {
        return Err(Error::format(0, "bad magic (expected \"MDKV\")"));
    }
    let version = r.u16("version")?;
    if version != MDKV_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {version} (expected {MDKV_VERSION})"),
        ));
    }
    let h_kv = r.u16("head count")? as usize;
    let d = r.u16("head dim")? as usize;
    let alpha = r.u32("window length")? as usize;
    let n_comp = r.u32("token count")? as usize;
    let r_max = r.u16("stored rank")? as usize;
    let num_ratios = r.u8("ratio count")? as usize;
    let mut ratio_dims = Vec::with_capacity(num_ratios);
    for _ in 0..num_ratios {
        ratio_dims.push(r.u16("ratio dim")? as usize);
    }
    if h_kv == 0 || d == 0 {
        return Err(Error::format(6, "head count and head dim must be positive"));
    }
    if ratio_dims.first() != Some(&0)
        || ratio_dims.last() != Some(&d)
        || ratio_dims.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::format(17, "ratio dims must ascend from 0 to head dim"));
    }
    if r_max > d {
        return Err(Error::format(15, "stored rank exceeds head dim"));
    }

    let mut heads = Vec::with_capacity(h_kv);
    for _ in 0..h_kv {
        let basis_pos = r.pos as u64;
        let basis_k_raw = r.f32_matrix(d, r_max, "key basis")?;
        let basis_v_raw = r.f32_matrix(d, r_max, "value basis")?;
        let make_basis = |m: &Matrix| -> Result<ProjectionBasis> {
            ProjectionBasis::from_parts(d, m.to_f64(), vec![0.0; r_max]).map_err(|e| {
                Error::format(basis_pos, format!("stored basis rejected: {e}"))
            })
        };
        let basis_k = make_basis(&basis_k_raw)?;
        let basis_v = make_basis(&basis_v_raw)?;
        let window_k = r.f32_matrix(alpha, d, "window keys")?;
        let window_v = r.f32_matrix(alpha, d, "window values")?;
        let mut groups = BTreeMap::new();
        let mut seen = vec![false; n_comp];
        for &expect_dim in ratio_dims.iter().filter(|&&dim| dim > 0) {
            let dim_pos = r.pos as u64;
            let dim = r.u16("group dim")? as usize;
            if dim != expect_dim {
                return Err(Error::format(
                    dim_pos,
                    format!("group dim {dim} out of order (expected {expect_dim})"),
                ));
            }
            if dim != d && dim > r_max {
                return Err(Error::format(
                    dim_pos,
                    format!("group dim {dim} exceeds stored rank {r_max}"),
                ));
            }
            let count = r.u32("group count")? as usize;
            if count == 0 {
                continue;
            }
            let mut indices = Vec::with_capacity(count);
            let idx_pos = r.pos as u64;
            for _ in 0..count {
                indices.push(r.u32("token index")?);
            }
            for w in indices.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::format(idx_pos, "group indices must ascend"));
                }
            }
            for &i in &indices {
                if i as usize >= n_comp {
                    return Err(Error::format(idx_pos, format!("token index {i} out of range")));
                }
                if seen[i as usize] {
                    return Err(Error::format(
                        idx_pos,
                        format!("token index {i} appears in two groups"),
                    ));
                }
                seen[i as usize] = true;
            }
            let keys = r.f32_matrix(count, dim, "group keys")?;
            let values = r.f32_matrix(count, dim, "group values")?;
            groups.insert(
                dim,
                Group {
                    indices,
                    keys,
                    values,
                },
            );
        }
        heads.push(HeadCache {
            head_dim: d,
            window_k,
            window_v,
            groups,
            basis_k,
            basis_v,
            original_len: n_comp + alpha,
        });
    }
    let crc_pos = r.pos as u64;
    let stored_crc = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after checksum", bytes.len() - r.pos),
        ));
    }
    let computed = crc32fast::hash(&bytes[..crc_pos as usize]);
    if stored_crc != computed {
        return Err(Error::format(
            crc_pos,
            format!("checksum mismatch: stored {stored_crc:#010x}, computed {computed:#010x}"),
        ));
    }
    CompressedCache::new(heads, ratio_dims, d)
}
