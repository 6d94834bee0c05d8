//! Bit-packed code database and exhaustive Hamming ranking.
//!
//! Bit `j` of item `i` lives in word `j / 64`, bit position `j % 64`, of the
//! item's `⌈K/64⌉` little-endian words. A set bit means code value `+1`.
//! Unused high bits of the last word are always zero.

use std::fs;
use std::path::Path;

use crate::binio::{read_labels, write_atomic, write_labels, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DB_MAGIC: &[u8; 8] = b"BHDB0001";

#[inline]
pub fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodeDatabase {
    n_bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
    labels: Vec<Vec<u32>>,
}

/// Packs one ±1 row into words.
pub fn pack_code(row: &[f64]) -> Result<Vec<u64>> {
    let mut words = vec![0u64; words_for_bits(row.len())];
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 {
            words[j / 64] |= 1u64 << (j % 64);
        } else if v != -1.0 {
            return Err(Error::invalid(format!("code entry {v} at bit {j} is not ±1")));
        }
    }
    Ok(words)
}

/// Popcount of the XOR of two equally long word slices.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::Mismatch(format!(
            "codes have {} and {} words",
            a.len(),
            b.len()
        )));
    }
    Ok(hamming_words(a, b))
}

impl PackedCodeDatabase {
    pub fn pack(codes: &Matrix, labels: Vec<Vec<u32>>) -> Result<Self> {
        if labels.len() != codes.rows() {
            return Err(Error::Mismatch(format!(
                "{} codes but {} label sets",
                codes.rows(),
                labels.len()
            )));
        }
        let n_bits = codes.cols();
        if n_bits == 0 {
            return Err(Error::invalid("codes need at least one bit"));
        }
        let words_per_code = words_for_bits(n_bits);
        let mut words = Vec::with_capacity(codes.rows() * words_per_code);
        for row in codes.row_iter() {
            words.extend(pack_code(row)?);
        }
        Ok(Self {
            n_bits,
            words_per_code,
            words,
            labels,
        })
    }

    pub fn from_words(n_bits: usize, words: Vec<u64>, labels: Vec<Vec<u32>>) -> Result<Self> {
        let words_per_code = words_for_bits(n_bits);
        if n_bits == 0 || words.len() != labels.len() * words_per_code {
            return Err(Error::Mismatch(format!(
                "{} words cannot hold {} codes of {n_bits} bits",
                words.len(),
                labels.len()
            )));
        }
        let db = Self {
            n_bits,
            words_per_code,
            words,
            labels,
        };
        if !db.padding_is_clear() {
            return Err(Error::invalid("unused high bits of the last code word must be zero"));
        }
        Ok(db)
    }

    fn padding_is_clear(&self) -> bool {
        let used = self.n_bits % 64;
        if used == 0 {
            return true;
        }
        let mask = !0u64 << used;
        self.words
            .chunks_exact(self.words_per_code)
            .all(|c| c[self.words_per_code - 1] & mask == 0)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn labels(&self) -> &[Vec<u32>] {
        &self.labels
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn bit(&self, item: usize, bit: usize) -> bool {
        self.code(item)[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn unpack(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.n_bits);
        for i in 0..self.len() {
            for j in 0..self.n_bits {
                m.set(i, j, if self.bit(i, j) { 1.0 } else { -1.0 });
            }
        }
        m
    }

    /// Hamming distance from `query` to every item, in item order.
    pub fn distances(&self, query: &[u64]) -> Result<Vec<u32>> {
        if query.len() != self.words_per_code {
            return Err(Error::Mismatch(format!(
                "query has {} words, database codes have {}",
                query.len(),
                self.words_per_code
            )));
        }
        Ok(match self.words_per_code {
            1 => {
                let q = query[0];
                self.words.iter().map(|w| (w ^ q).count_ones()).collect()
            }
            _ => self
                .words
                .chunks_exact(self.words_per_code)
                .map(|c| hamming_words(c, query))
                .collect(),
        })
    }

    /// All item indices ordered by ascending distance, ties by ascending index.
    pub fn rank_all(&self, query: &[u64]) -> Result<Vec<usize>> {
        let distances = self.distances(query)?;
        Ok(rank_by_distance(&distances, self.n_bits))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bits = u32::try_from(self.n_bits).map_err(|_| Error::invalid("bit count exceeds u32"))?;
        let mut out = Vec::with_capacity(20 + 8 * self.words.len() + 6 * self.len());
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        write_labels(&mut out, &self.labels)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(DB_MAGIC)?;
        let n_bits = r.u32_le("bit count")? as usize;
        let n = r.u64_le("item count")? as usize;
        if n_bits == 0 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: "zero-bit codes".into(),
            });
        }
        let n_words = n
            .checked_mul(words_for_bits(n_bits))
            .filter(|w| w.checked_mul(8).is_some())
            .ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                detail: "declared size overflows".into(),
            })?;
        let raw = r.take(8 * n_words, "code words")?;
        let words = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = read_labels(&mut r, n)?;
        r.finish()?;
        Self::from_words(n_bits, words, labels).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Stable counting sort of item indices by distance in `0..=max_distance`.
pub fn rank_by_distance(distances: &[u32], max_distance: usize) -> Vec<usize> {
    let mut starts = vec![0usize; max_distance + 2];
    for &d in distances {
        starts[d as usize + 1] += 1;
    }
    for i in 1..starts.len() {
        starts[i] += starts[i - 1];
    }
    let mut order = vec![0usize; distances.len()];
    for (i, &d) in distances.iter().enumerate() {
        let slot = &mut starts[d as usize];
        order[*slot] = i;
        *slot += 1;
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn random_codes(rng: &mut RngStream, n: usize, bits: usize) -> Matrix {
        let data = (0..n * bits).map(|_| if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 }).collect();
        Matrix::new(n, bits, data).unwrap()
    }

    fn naive_hamming(a: &[f64], b: &[f64]) -> u32 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
    }

    #[test]
    fn bit_layout() {
        let db = PackedCodeDatabase::pack(&Matrix::from_rows(&[[1.0, -1.0, 1.0, 1.0]]).unwrap(), vec![vec![0]]).unwrap();
        assert_eq!(db.words(), &[13]);

        let full = Matrix::filled(1, 64, 1.0);
        let db = PackedCodeDatabase::pack(&full, vec![vec![]]).unwrap();
        assert_eq!(db.words(), &[u64::MAX]);

        let mut row = vec![-1.0; 65];
        row[64] = 1.0;
        let db = PackedCodeDatabase::pack(&Matrix::from_rows(&[row]).unwrap(), vec![vec![]]).unwrap();
        assert_eq!(db.words_per_code(), 2);
        assert_eq!(db.words(), &[0, 1]);

        assert!(PackedCodeDatabase::pack(&Matrix::from_rows(&[[1.0, 0.5]]).unwrap(), vec![vec![]]).is_err());
        assert!(PackedCodeDatabase::from_words(3, vec![0b1000], vec![vec![]]).is_err());
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&[0b1011], &[0b1011]).unwrap(), 0);
        assert_eq!(hamming(&[0b1011], &[0b0010]).unwrap(), 2);
        assert!(hamming(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn hamming_matches_unpacked_comparison() {
        let mut rng = RngStream::new(99);
        for bits in [1, 7, 16, 63, 64, 65, 130] {
            let a = random_codes(&mut rng, 1500, bits);
            let b = random_codes(&mut rng, 1500, bits);
            let pa = PackedCodeDatabase::pack(&a, vec![vec![]; 1500]).unwrap();
            let pb = PackedCodeDatabase::pack(&b, vec![vec![]; 1500]).unwrap();
            for i in 0..1500 {
                assert_eq!(hamming(pa.code(i), pb.code(i)).unwrap(), naive_hamming(a.row(i), b.row(i)));
            }
            assert_eq!(pa.unpack(), a);
        }
    }

    #[test]
    fn ranking_examples() {
        let mut rng = RngStream::new(3);
        let codes = random_codes(&mut rng, 50, 20);
        let db = PackedCodeDatabase::pack(&codes, vec![vec![]; 50]).unwrap();
        let q = db.code(17).to_vec();
        assert_eq!(db.rank_all(&q).unwrap()[0], 17);

        let same = PackedCodeDatabase::pack(&Matrix::filled(9, 5, 1.0), vec![vec![]; 9]).unwrap();
        assert_eq!(same.rank_all(same.code(0)).unwrap(), (0..9).collect::<Vec<_>>());
        assert!(db.rank_all(&[0, 0]).is_err());
    }

    #[test]
    fn ranking_agrees_with_full_sort() {
        let mut rng = RngStream::new(4);
        for bits in [8, 33, 64, 90] {
            let codes = random_codes(&mut rng, 1000, bits);
            let db = PackedCodeDatabase::pack(&codes, vec![vec![]; 1000]).unwrap();
            let query = random_codes(&mut rng, 1, bits);
            let packed = pack_code(query.row(0)).unwrap();
            let mut expect: Vec<(u32, usize)> = (0..1000).map(|i| (naive_hamming(codes.row(i), query.row(0)), i)).collect();
            expect.sort();
            let expect: Vec<usize> = expect.into_iter().map(|(_, i)| i).collect();
            assert_eq!(db.rank_all(&packed).unwrap(), expect);
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let mut rng = RngStream::new(8);
        let codes = random_codes(&mut rng, 7, 70);
        let labels: Vec<Vec<u32>> = (0..7).map(|i| (0..i % 3).collect()).collect();
        let db = PackedCodeDatabase::pack(&codes, labels).unwrap();
        let bytes = db.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"BHDB0001");
        assert_eq!(&bytes[8..12], &70u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &7u64.to_le_bytes());
        let p = Path::new("db");
        assert_eq!(PackedCodeDatabase::from_bytes(&bytes, p).unwrap(), db);

        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(PackedCodeDatabase::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        assert!(matches!(
            PackedCodeDatabase::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Truncated { .. })
        ));
        let mut dirty = bytes.clone();
        dirty[20 + 15] |= 0x80; // high bit of item 0's second word
        assert!(matches!(PackedCodeDatabase::from_bytes(&dirty, p), Err(Error::Malformed { .. })));
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(seed in any::<u64>(), bits in 1usize..200) {
            let mut rng = RngStream::new(seed);
            let c = random_codes(&mut rng, 3, bits);
            let db = PackedCodeDatabase::pack(&c, vec![vec![]; 3]).unwrap();
            let (a, b, x) = (db.code(0), db.code(1), db.code(2));
            prop_assert_eq!(hamming_words(a, a), 0);
            prop_assert_eq!(hamming_words(a, b), hamming_words(b, a));
            prop_assert!(hamming_words(a, x) <= hamming_words(a, b) + hamming_words(b, x));
        }

        #[test]
        fn rank_all_is_a_permutation(seed in any::<u64>(), n in 0usize..300, bits in 1usize..70) {
            let mut rng = RngStream::new(seed);
            let db = PackedCodeDatabase::pack(&random_codes(&mut rng, n, bits), vec![vec![]; n]).unwrap();
            let q = pack_code(random_codes(&mut rng, 1, bits).row(0)).unwrap();
            let mut order = db.rank_all(&q).unwrap();
            order.sort_unstable();
            prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
        }
    }
}
