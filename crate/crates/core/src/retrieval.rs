//! Binary prefix tree over ordered binary codes.
//!
//! The truncated Hamming neighborhood `N_b(q)` is the set of items whose
//! first `b` bits equal the query's. A query walks `N_0 ⊇ N_1 ⊇ ...` and
//! stops at the first depth `b` with `|N_b| < R`, returning `N_{b-1}`.
//!
//! Subtrees holding at most [`DEFAULT_COLLAPSE`] items are stored as a single
//! sorted id list instead of a chain of nodes; queries that reach such a list
//! keep filtering it bit by bit. The first 64 bits of every code are also
//! kept as one `u64` per item, so filtering at those depths touches the same
//! amount of memory whatever the code length.

use std::borrow::Cow;
use std::io::{Read, Write};
use std::time::Instant;

use crate::binarize::{read_u32, read_u64};
use crate::bits::{bit_of, bytes_for, common_prefix_len, hamming, BitCode};
use crate::error::{Error, Result};

pub const DEFAULT_COLLAPSE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Internal { count: u64, children: [Option<u32>; 2] },
    Bucket { ids: Vec<u32> },
}

#[derive(Debug, Clone)]
pub struct PrefixTrieIndex {
    k: usize,
    width: usize,
    collapse: usize,
    store: Vec<u8>,
    /// First `min(k, 64)` bits of each code, most significant first.
    heads: Vec<u64>,
    nodes: Vec<Node>,
}

fn head_of(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    let n = bytes.len().min(8);
    buf[..n].copy_from_slice(&bytes[..n]);
    u64::from_be_bytes(buf)
}

/// Structural equality: same codes, same tree shape and contents. Node
/// numbering is an arena detail and may differ (e.g. after a reload).
impl PartialEq for PrefixTrieIndex {
    fn eq(&self, other: &Self) -> bool {
        if self.k != other.k || self.collapse != other.collapse || self.store != other.store {
            return false;
        }
        let mut stack = vec![(0u32, 0u32)];
        while let Some((a, b)) = stack.pop() {
            match (&self.nodes[a as usize], &other.nodes[b as usize]) {
                (Node::Bucket { ids: x }, Node::Bucket { ids: y }) if x == y => {}
                (
                    Node::Internal { count: ca, children: xa },
                    Node::Internal { count: cb, children: xb },
                ) if ca == cb => {
                    for (l, r) in xa.iter().zip(xb) {
                        match (l, r) {
                            (Some(l), Some(r)) => stack.push((*l, *r)),
                            (None, None) => {}
                            _ => return false,
                        }
                    }
                }
                _ => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    /// Sorted item ids of the returned neighborhood.
    pub neighbor_ids: Vec<u32>,
    /// Depth of the returned neighborhood (number of leading bits shared).
    pub terminal_depth: usize,
    /// `|N_0|, |N_1|, ...` up to and including the depth that stopped the walk.
    pub visited_counts: Vec<usize>,
}

impl PrefixTrieIndex {
    pub fn new(k: usize) -> Result<Self> {
        Self::with_collapse(k, DEFAULT_COLLAPSE)
    }

    pub fn with_collapse(k: usize, collapse: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("code length must be >= 1"));
        }
        Ok(Self {
            k,
            width: bytes_for(k),
            collapse: collapse.max(1),
            store: Vec::new(),
            heads: Vec::new(),
            nodes: vec![Node::Bucket { ids: Vec::new() }],
        })
    }

    pub fn build(codes: &[BitCode]) -> Result<Self> {
        let first = codes.first().ok_or(Error::EmptyDataset)?;
        let mut index = Self::new(first.len())?;
        index.store.reserve(codes.len() * index.width);
        index.heads.reserve(codes.len());
        for c in codes {
            index.insert(c)?;
        }
        Ok(index)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.store.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn code_bytes(&self, id: u32) -> &[u8] {
        let start = id as usize * self.width;
        &self.store[start..start + self.width]
    }

    pub fn code(&self, id: u32) -> BitCode {
        BitCode::from_bytes(self.k, self.code_bytes(id).to_vec()).expect("stored codes are valid")
    }

    fn count_of(&self, node: u32) -> usize {
        match &self.nodes[node as usize] {
            Node::Internal { count, .. } => *count as usize,
            Node::Bucket { ids } => ids.len(),
        }
    }

    /// Add one code; returns its id.
    pub fn insert(&mut self, code: &BitCode) -> Result<u32> {
        if code.len() != self.k {
            return Err(Error::dims(self.k, code.len(), "code length"));
        }
        let id = u32::try_from(self.len()).map_err(|_| Error::invalid("index is full"))?;
        self.store.extend_from_slice(code.as_bytes());
        self.heads.push(head_of(code.as_bytes()));
        let mut node = 0u32;
        let mut depth = 0usize;
        loop {
            let fresh = self.nodes.len() as u32;
            match &mut self.nodes[node as usize] {
                Node::Internal { count, children } => {
                    *count += 1;
                    let bit = code.get(depth) as usize;
                    match children[bit] {
                        Some(c) => {
                            node = c;
                            depth += 1;
                        }
                        None => {
                            children[bit] = Some(fresh);
                            self.nodes.push(Node::Bucket { ids: vec![id] });
                            return Ok(id);
                        }
                    }
                }
                Node::Bucket { ids } => {
                    // ids arrive in increasing order, so the list stays sorted
                    ids.push(id);
                    if ids.len() > self.collapse && depth < self.k {
                        self.split(node, depth);
                    }
                    return Ok(id);
                }
            }
        }
    }

    /// Turn an oversized bucket at `depth` into an internal node.
    fn split(&mut self, node: u32, depth: usize) {
        let ids = match std::mem::replace(
            &mut self.nodes[node as usize],
            Node::Internal {
                count: 0,
                children: [None, None],
            },
        ) {
            Node::Bucket { ids } => ids,
            other => {
                self.nodes[node as usize] = other;
                return;
            }
        };
        let (ones, zeros): (Vec<u32>, Vec<u32>) = ids
            .iter()
            .copied()
            .partition(|&id| bit_of(self.code_bytes(id), depth));
        let mut children = [None, None];
        for (bit, part) in [(0usize, zeros), (1usize, ones)] {
            if part.is_empty() {
                continue;
            }
            let child = self.nodes.len() as u32;
            let oversized = part.len() > self.collapse && depth + 1 < self.k;
            self.nodes.push(Node::Bucket { ids: part });
            children[bit] = Some(child);
            if oversized {
                self.split(child, depth + 1);
            }
        }
        self.nodes[node as usize] = Node::Internal {
            count: ids.len() as u64,
            children,
        };
    }

    /// Nested-neighborhood retrieval with terminal cardinality `r`.
    pub fn query(&self, q: &BitCode, r: usize) -> Result<RetrievalResult> {
        if q.len() != self.k {
            return Err(Error::dims(self.k, q.len(), "query length"));
        }
        if r == 0 {
            return Err(Error::invalid("terminal cardinality R must be >= 1"));
        }
        let mut visited = vec![self.len()];
        let mut cur = Cursor::Node(0);
        for depth in 0..self.k {
            let bit = q.get(depth);
            let next = match &cur {
                Cursor::Node(n) => match &self.nodes[*n as usize] {
                    Node::Internal { children, .. } => match children[bit as usize] {
                        Some(c) => match &self.nodes[c as usize] {
                            Node::Bucket { ids } => Cursor::List(Cow::Borrowed(ids)),
                            Node::Internal { .. } => Cursor::Node(c),
                        },
                        None => Cursor::List(Cow::Owned(Vec::new())),
                    },
                    Node::Bucket { ids } => Cursor::List(Cow::Owned(self.filter(ids, depth, bit))),
                },
                Cursor::List(ids) => Cursor::List(Cow::Owned(self.filter(ids, depth, bit))),
            };
            let count = match &next {
                Cursor::Node(n) => self.count_of(*n),
                Cursor::List(ids) => ids.len(),
            };
            visited.push(count);
            if count < r {
                return Ok(RetrievalResult {
                    neighbor_ids: self.materialize(&cur),
                    terminal_depth: depth,
                    visited_counts: visited,
                });
            }
            cur = next;
        }
        Ok(RetrievalResult {
            neighbor_ids: self.materialize(&cur),
            terminal_depth: self.k,
            visited_counts: visited,
        })
    }

    fn filter(&self, ids: &[u32], depth: usize, bit: bool) -> Vec<u32> {
        if depth < 64 {
            let shift = 63 - depth;
            ids.iter()
                .copied()
                .filter(|&id| (self.heads[id as usize] >> shift) & 1 == bit as u64)
                .collect()
        } else {
            ids.iter()
                .copied()
                .filter(|&id| bit_of(self.code_bytes(id), depth) == bit)
                .collect()
        }
    }

    fn materialize(&self, cur: &Cursor<'_>) -> Vec<u32> {
        match cur {
            Cursor::Node(n) => {
                let mut out = Vec::with_capacity(self.count_of(*n));
                self.collect(*n, &mut out);
                out.sort_unstable();
                out
            }
            Cursor::List(ids) => ids.to_vec(),
        }
    }

    fn collect(&self, node: u32, out: &mut Vec<u32>) {
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match &self.nodes[n as usize] {
                Node::Internal { children, .. } => stack.extend(children.iter().flatten().rev()),
                Node::Bucket { ids } => out.extend_from_slice(ids),
            }
        }
    }

    /// `|N_b|` for an explicit prefix, via the tree.
    pub fn prefix_count(&self, prefix: &[bool]) -> usize {
        let mut node = 0u32;
        for (depth, &bit) in prefix.iter().enumerate() {
            match &self.nodes[node as usize] {
                Node::Internal { children, .. } => match children[bit as usize] {
                    Some(c) => node = c,
                    None => return 0,
                },
                Node::Bucket { ids } => {
                    return ids
                        .iter()
                        .filter(|&&id| {
                            let code = self.code_bytes(id);
                            prefix[depth..]
                                .iter()
                                .enumerate()
                                .all(|(i, &b)| bit_of(code, depth + i) == b)
                        })
                        .count();
                }
            }
        }
        self.count_of(node)
    }

    /// Full structural audit: counts add up, every stored id sits under the
    /// path that spells its prefix, and the root holds every item.
    pub fn audit(&self) -> Result<()> {
        let mut seen = vec![false; self.len()];
        let mut path = Vec::new();
        let total = self.audit_node(0, &mut path, &mut seen)?;
        if total != self.len() {
            return Err(Error::invalid(format!("root count {total} != N {}", self.len())));
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("some ids are not reachable"));
        }
        Ok(())
    }

    fn audit_node(&self, node: u32, path: &mut Vec<bool>, seen: &mut [bool]) -> Result<usize> {
        match &self.nodes[node as usize] {
            Node::Internal { count, children } => {
                let mut sum = 0;
                for (bit, child) in children.iter().enumerate() {
                    if let Some(c) = child {
                        path.push(bit == 1);
                        sum += self.audit_node(*c, path, seen)?;
                        path.pop();
                    }
                }
                if sum as u64 != *count {
                    return Err(Error::invalid(format!(
                        "node at depth {} has count {count} but children sum to {sum}",
                        path.len()
                    )));
                }
                Ok(sum)
            }
            Node::Bucket { ids } => {
                for &id in ids {
                    let code = self.code_bytes(id);
                    if path.iter().enumerate().any(|(i, &b)| bit_of(code, i) != b) {
                        return Err(Error::invalid(format!("id {id} stored under wrong prefix")));
                    }
                    if std::mem::replace(&mut seen[id as usize], true) {
                        return Err(Error::invalid(format!("id {id} stored twice")));
                    }
                }
                if ids.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("bucket ids not sorted"));
                }
                Ok(ids.len())
            }
        }
    }
}

/// Position of a query walk: a tree node, or a filtered id list once the
/// walk has entered a collapsed subtree.
enum Cursor<'a> {
    Node(u32),
    List(Cow<'a, [u32]>),
}

// ---- serialization -------------------------------------------------------

const INDEX_MAGIC: &[u8; 4] = b"ORDI";
pub const INDEX_VERSION: u32 = 1;

impl PrefixTrieIndex {
    /// Layout (little-endian): `"ORDI"`, u32 version, u64 K, u64 N, u32
    /// collapse threshold, N packed codes, then the tree in preorder. Each
    /// node is a tag byte: `0` internal (u64 count, u8 child mask with bit 0
    /// for the 0-child and bit 1 for the 1-child, children follow 0-child
    /// first) or `1` id list (u64 length, u32 ids).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u64).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.collapse as u32).to_le_bytes())?;
        w.write_all(&self.store)?;
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            match &self.nodes[n as usize] {
                Node::Internal { count, children } => {
                    w.write_all(&[0u8])?;
                    w.write_all(&count.to_le_bytes())?;
                    let mask = children[0].is_some() as u8 | ((children[1].is_some() as u8) << 1);
                    w.write_all(&[mask])?;
                    stack.extend(children.iter().flatten().rev());
                }
                Node::Bucket { ids } => {
                    w.write_all(&[1u8])?;
                    w.write_all(&(ids.len() as u64).to_le_bytes())?;
                    for id in ids {
                        w.write_all(&id.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let k = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let collapse = read_u32(&mut r)? as usize;
        let mut index = Self::with_collapse(k, collapse)?;
        index.store = vec![0u8; n * index.width];
        r.read_exact(&mut index.store)?;
        index.heads = index.store.chunks_exact(index.width).map(head_of).collect();
        index.nodes.clear();

        // Preorder rebuild: each pending slot is (parent, which child).
        let mut pending: Vec<Option<(u32, usize)>> = vec![None];
        while let Some(slot) = pending.pop() {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let id = index.nodes.len() as u32;
            match tag[0] {
                0 => {
                    let count = read_u64(&mut r)?;
                    let mut mask = [0u8; 1];
                    r.read_exact(&mut mask)?;
                    index.nodes.push(Node::Internal {
                        count,
                        children: [None, None],
                    });
                    if mask[0] & 2 != 0 {
                        pending.push(Some((id, 1)));
                    }
                    if mask[0] & 1 != 0 {
                        pending.push(Some((id, 0)));
                    }
                }
                1 => {
                    let len = read_u64(&mut r)? as usize;
                    let ids = (0..len).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
                    if ids.iter().any(|&i| i as usize >= n) {
                        return Err(Error::Format("id out of range in index file".into()));
                    }
                    index.nodes.push(Node::Bucket { ids });
                }
                t => return Err(Error::Format(format!("bad node tag {t}"))),
            }
            if let Some((parent, bit)) = slot {
                if let Node::Internal { children, .. } = &mut index.nodes[parent as usize] {
                    children[bit] = Some(id);
                }
            }
        }
        index.audit().map_err(|e| Error::Format(format!("corrupt index: {e}")))?;
        Ok(index)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

// ---- baselines and analysis ----------------------------------------------

/// Linear-scan retrieval with the same stopping rule as the tree, computing
/// each item's shared-prefix length directly.
pub fn brute_force_query(codes: &[BitCode], q: &BitCode, r: usize) -> Result<RetrievalResult> {
    let k = q.len();
    if r == 0 {
        return Err(Error::invalid("terminal cardinality R must be >= 1"));
    }
    let mut lcp = Vec::with_capacity(codes.len());
    let mut hist = vec![0usize; k + 1];
    for c in codes {
        if c.len() != k {
            return Err(Error::dims(k, c.len(), "code length"));
        }
        let l = common_prefix_len(c.as_bytes(), q.as_bytes(), k);
        hist[l] += 1;
        lcp.push(l);
    }
    // |N_b| = #{lcp >= b}
    let mut at_least = vec![0usize; k + 2];
    for b in (0..=k).rev() {
        at_least[b] = at_least[b + 1] + hist[b];
    }
    let mut visited = vec![at_least[0]];
    let mut terminal = k;
    for b in 1..=k {
        visited.push(at_least[b]);
        if at_least[b] < r {
            terminal = b - 1;
            break;
        }
    }
    let neighbor_ids = lcp
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= terminal)
        .map(|(i, _)| i as u32)
        .collect();
    Ok(RetrievalResult {
        neighbor_ids,
        terminal_depth: terminal,
        visited_counts: visited,
    })
}

/// Full-length Hamming distance from `q` to every stored code.
pub fn hamming_scan(index: &PrefixTrieIndex, q: &BitCode) -> Vec<u32> {
    let qb = q.as_bytes();
    index
        .store
        .chunks_exact(index.width)
        .map(|c| hamming(c, qb))
        .collect()
}

/// Bernoulli entropy in bits.
pub fn binary_entropy(beta: f64) -> f64 {
    if beta <= 0.0 || beta >= 1.0 {
        return 0.0;
    }
    -(beta * beta.log2() + (1.0 - beta) * (1.0 - beta).log2())
}

/// `log2(N/R) / H(β)`: expected number of bits a query consumes when bits are
/// independent `Bern(β)`. Requires `0 < β < 1` and `R < N`.
pub fn expected_depth_estimate(n: usize, r: usize, beta: f64) -> f64 {
    (n as f64 / r as f64).log2() / binary_entropy(beta)
}

/// Number of addresses a radius-`radius` semantic hashing probe touches:
/// `Σ_{i ≤ radius} C(K, i)`.
pub fn semantic_hashing_candidates(k: usize, radius: usize) -> f64 {
    let mut total = 0.0;
    let mut term = 1.0;
    for i in 0..=radius.min(k) {
        if i > 0 {
            term *= (k - i + 1) as f64 / i as f64;
        }
        total += term;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    /// `R` for the tree, radius for semantic hashing, 0 for the scan.
    pub param: usize,
    pub queries: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
    pub mean_depth: f64,
    pub candidates: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchTable {
    pub n: usize,
    pub k: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,param,n,k,queries,mean_us,median_us,p99_us,mean_depth,candidates\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.method, r.param, self.n, self.k, r.queries, r.mean_us, r.median_us, r.p99_us, r.mean_depth, r.candidates
            ));
        }
        out
    }
}

fn summarize(mut micros: Vec<f64>) -> (f64, f64, f64) {
    if micros.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    micros.sort_by(f64::total_cmp);
    let mean = micros.iter().sum::<f64>() / micros.len() as f64;
    let median = micros[micros.len() / 2];
    let p99 = micros[((micros.len() as f64 * 0.99).ceil() as usize).clamp(1, micros.len()) - 1];
    (mean, median, p99)
}

/// Time tree queries for each `R`, a full Hamming linear scan over the first
/// `scan_queries` queries, and report analytic semantic-hashing probe counts
/// for radii `0..=3`.
pub fn bench(index: &PrefixTrieIndex, queries: &[BitCode], r_list: &[usize], scan_queries: usize) -> Result<BenchTable> {
    let mut table = BenchTable {
        n: index.len(),
        k: index.k(),
        rows: Vec::new(),
    };
    for &r in r_list {
        // warm-up pass
        for q in queries.iter().take(16) {
            std::hint::black_box(index.query(q, r)?);
        }
        let mut times = Vec::with_capacity(queries.len());
        let mut depth = 0usize;
        for q in queries {
            let t0 = Instant::now();
            let res = std::hint::black_box(index.query(q, r)?);
            times.push(t0.elapsed().as_secs_f64() * 1e6);
            depth += res.terminal_depth;
        }
        let (mean, median, p99) = summarize(times);
        table.rows.push(BenchRow {
            method: "trie",
            param: r,
            queries: queries.len(),
            mean_us: mean,
            median_us: median,
            p99_us: p99,
            mean_depth: depth as f64 / queries.len().max(1) as f64,
            candidates: 0.0,
        });
    }
    let mut times = Vec::new();
    for q in queries.iter().take(scan_queries) {
        let t0 = Instant::now();
        std::hint::black_box(hamming_scan(index, q));
        times.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let n_scan = times.len();
    let (mean, median, p99) = summarize(times);
    table.rows.push(BenchRow {
        method: "linear_scan",
        param: 0,
        queries: n_scan,
        mean_us: mean,
        median_us: median,
        p99_us: p99,
        mean_depth: index.k() as f64,
        candidates: index.len() as f64,
    });
    for radius in 0..=3 {
        table.rows.push(BenchRow {
            method: "semantic_hashing_analytic",
            param: radius,
            queries: 0,
            mean_us: f64::NAN,
            median_us: f64::NAN,
            p99_us: f64::NAN,
            mean_depth: f64::NAN,
            candidates: semantic_hashing_candidates(index.k(), radius),
        });
    }
    Ok(table)
}
