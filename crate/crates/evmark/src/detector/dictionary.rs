//! Marker dictionaries: rotation-distinct binary payloads with IDs.

use thiserror::Error;

use crate::geometry::BitGrid;

/// First 16 payloads of the OpenCV 4x4_50 dictionary. Bit (row, col) is
/// stored at position `row * 4 + col`, least significant bit first; a set
/// bit is a white cell.
const BUILTIN_4X4: [u16; 16] = [
    0x4cad, 0x59f0, 0xb4cc, 0x6299, 0x792a, 0xb39e, 0x7479, 0x4f23, 0x5b7f, 0x6af3, 0x899f,
    0xe588, 0xed70, 0xf054, 0x8d24, 0x7c64,
];

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("dictionary must contain at least one code")]
    Empty,
    #[error("grid size {0} not supported (payload must fit in 64 bits)")]
    GridSize(usize),
    #[error("code 0x{0:x} does not fit a {1}x{1} payload")]
    CodeRange(u64, usize),
    #[error("duplicate marker id {0}")]
    DuplicateId(u32),
    #[error("codes for ids {0} and {1} collide under rotation")]
    RotationCollision(u32, u32),
    #[error("code for id {0} is rotation-symmetric; orientation would be ambiguous")]
    SelfSymmetric(u32),
    #[error("dictionary file {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Identification result: `rotation` is the number of clockwise
/// quarter-turns the observed grid is rotated relative to the canonical
/// payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictMatch {
    pub id: u32,
    pub rotation: usize,
    pub distance: u32,
}

#[derive(Debug)]
struct Entry {
    id: u32,
    /// Canonical payload rotated clockwise by 0..4 quarter-turns.
    rotations: [u64; 4],
}

#[derive(Debug)]
pub struct Dictionary {
    grid_size: usize,
    entries: Vec<Entry>,
    min_hamming: u32,
}

/// Rotate an `n`x`n` payload mask one quarter-turn clockwise: cell (r, c)
/// moves to (c, n-1-r).
fn rotate_mask_cw(bits: u64, n: usize) -> u64 {
    let mut out = 0u64;
    for r in 0..n {
        for c in 0..n {
            if bits >> (r * n + c) & 1 == 1 {
                out |= 1 << (c * n + (n - 1 - r));
            }
        }
    }
    out
}

impl Dictionary {
    pub fn new(grid_size: usize, codes: &[(u32, u64)]) -> Result<Self, DictionaryError> {
        if codes.is_empty() {
            return Err(DictionaryError::Empty);
        }
        if grid_size == 0 || grid_size * grid_size > 64 {
            return Err(DictionaryError::GridSize(grid_size));
        }
        let payload_bits = grid_size * grid_size;
        let mask = if payload_bits == 64 { u64::MAX } else { (1u64 << payload_bits) - 1 };
        let mut entries = Vec::with_capacity(codes.len());
        for &(id, code) in codes {
            if code & !mask != 0 {
                return Err(DictionaryError::CodeRange(code, grid_size));
            }
            if entries.iter().any(|e: &Entry| e.id == id) {
                return Err(DictionaryError::DuplicateId(id));
            }
            let mut rotations = [code; 4];
            for r in 1..4 {
                rotations[r] = rotate_mask_cw(rotations[r - 1], grid_size);
            }
            if rotations[1..].contains(&code) {
                return Err(DictionaryError::SelfSymmetric(id));
            }
            entries.push(Entry { id, rotations });
        }
        let mut min_hamming = u32::MAX;
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                for r in 0..4 {
                    let d = (entries[i].rotations[0] ^ entries[j].rotations[r]).count_ones();
                    if d == 0 {
                        return Err(DictionaryError::RotationCollision(
                            entries[i].id,
                            entries[j].id,
                        ));
                    }
                    min_hamming = min_hamming.min(d);
                }
            }
        }
        if entries.len() == 1 {
            min_hamming = payload_bits as u32;
        }
        Ok(Self { grid_size, entries, min_hamming })
    }

    /// The embedded 16-code 4x4 dictionary.
    pub fn builtin() -> Self {
        let codes: Vec<(u32, u64)> = BUILTIN_4X4
            .iter()
            .enumerate()
            .map(|(id, &code)| (id as u32, code as u64))
            .collect();
        Self::new(4, &codes).expect("builtin dictionary is valid")
    }

    /// Load a dictionary override: one `id,hex_payload` line per marker
    /// (4x4 payloads), `#` comments allowed.
    pub fn from_file(path: &std::path::Path) -> Result<Self, DictionaryError> {
        let text = std::fs::read_to_string(path).map_err(|e| DictionaryError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut codes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| DictionaryError::Parse {
                path: path.display().to_string(),
                line: lineno as u64 + 1,
                message,
            };
            let (id_str, hex_str) = line
                .split_once(',')
                .ok_or_else(|| parse_err("expected `id,hex_payload`".into()))?;
            let id: u32 = id_str
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad id `{}`: {e}", id_str.trim())))?;
            let hex = hex_str.trim().trim_start_matches("0x");
            let code = u64::from_str_radix(hex, 16)
                .map_err(|e| parse_err(format!("bad payload `{hex}`: {e}")))?;
            codes.push((id, code));
        }
        Self::new(4, &codes)
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Minimum pairwise Hamming distance across all relative rotations.
    pub fn min_hamming(&self) -> u32 {
        self.min_hamming
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    /// Canonical payload of `id` as a bit grid.
    pub fn bit_grid(&self, id: u32) -> Option<BitGrid> {
        let entry = self.entries.iter().find(|e| e.id == id)?;
        let n = self.grid_size;
        let bits = (0..n * n).map(|i| entry.rotations[0] >> i & 1 == 1).collect();
        Some(BitGrid::new(n, bits))
    }

    /// Match sampled cells (row-major, `None` = undecided, counted as a
    /// mismatch against every code) against every entry under 4
    /// rotations. Returns the best match within `hamming_budget`; ties
    /// break toward the lower id, then the lower rotation.
    pub fn identify(&self, cells: &[Option<bool>], hamming_budget: u32) -> Option<DictMatch> {
        let n = self.grid_size;
        assert_eq!(cells.len(), n * n, "cell grid size mismatch");
        let mut value = 0u64;
        let mut known = 0u64;
        for (i, cell) in cells.iter().enumerate() {
            if let Some(bit) = cell {
                known |= 1 << i;
                if *bit {
                    value |= 1 << i;
                }
            }
        }
        let unknown_penalty = (n * n) as u32 - known.count_ones();
        let mut best: Option<DictMatch> = None;
        for entry in &self.entries {
            for rotation in 0..4 {
                let distance =
                    ((value ^ entry.rotations[rotation]) & known).count_ones() + unknown_penalty;
                let candidate = DictMatch { id: entry.id, rotation, distance };
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (distance, entry.id, rotation) < (b.distance, b.id, b.rotation)
                    }
                };
                if better {
                    best = Some(candidate);
                }
            }
        }
        best.filter(|m| m.distance <= hamming_budget)
    }
}
