//! Reference stream-ANS coder.
//!
//! The byte format is normative so that independent implementations agree
//! bit for bit:
//!
//! * state is a `u64` kept in `[2^32, 2^64)`; the initial state is `2^32`;
//! * frequencies use 16-bit precision (every table sums to `65536`);
//! * symbols are encoded in reverse order so decoding runs forward;
//! * before encoding a symbol with frequency `f`, if `state >= 2^48 * f` the
//!   low 32 bits are emitted as one word and the state is shifted right by 32;
//! * the stream is the final state as 8 little-endian bytes followed by the
//!   emitted words, last-emitted first, each as 4 little-endian bytes.
//!
//! The decoder reads the state, then after each symbol pulls one word when
//! the state drops below `2^32`. A valid stream ends with the state back at
//! `2^32` and every byte consumed; anything else is reported as corruption.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SelicError};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
const STATE_LOWER: u64 = 1 << 32;
const SLOT_MASK: u64 = (TOTAL_FREQ - 1) as u64;

/// Cumulative frequency table over an alphabet `0..alphabet_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cumulative: Vec<u32>,
}

impl CdfTable {
    /// `cumulative[0] == 0`, strictly increasing, last entry `65536`.
    pub fn new(cumulative: Vec<u32>) -> Result<Self> {
        if cumulative.len() < 2 {
            return Err(SelicError::Encode("cdf table needs at least one symbol".into()));
        }
        if cumulative[0] != 0 || *cumulative.last().expect("len >= 2") != TOTAL_FREQ {
            return Err(SelicError::Encode(format!("cdf table must span 0..{TOTAL_FREQ}")));
        }
        if cumulative.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SelicError::Encode("cdf table has a zero-width bin".into()));
        }
        Ok(Self { cumulative })
    }

    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cumulative.push(0);
        for &f in freqs {
            acc = acc
                .checked_add(f)
                .ok_or_else(|| SelicError::Encode("frequency overflow".into()))?;
            cumulative.push(acc);
        }
        Self::new(cumulative)
    }

    /// Quantizes a probability vector to 16-bit frequencies.
    ///
    /// Each symbol gets `1 + floor(p * (65536 - n))` where `n` is the
    /// alphabet size; whatever remains of the total goes to the most probable
    /// symbol (lowest index on ties). Every bin is therefore at least 1 wide
    /// and the sum is exactly 65536.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n > TOTAL_FREQ as usize {
            return Err(SelicError::Encode(format!("alphabet size {n} out of range")));
        }
        let mut probs: Vec<f64> = pmf.iter().map(|&p| if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 }).collect();
        let mass: f64 = probs.iter().sum();
        if mass > 1.0 {
            probs.iter_mut().for_each(|p| *p /= mass);
        }
        let budget = (TOTAL_FREQ as usize - n) as f64;
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        let mut freqs: Vec<u32> = probs.iter().map(|&p| 1 + (p * budget).floor() as u32).collect();
        let sum: i64 = freqs.iter().map(|&f| f as i64).sum();
        // The floors sum to at most the budget up to rounding in the
        // normalization, so the correction is a small positive remainder.
        let adjusted = freqs[best] as i64 + TOTAL_FREQ as i64 - sum;
        if adjusted < 1 {
            return Err(SelicError::Encode("probability vector cannot be quantized".into()));
        }
        freqs[best] = adjusted as u32;
        Self::from_frequencies(&freqs)
    }

    pub fn alphabet_size(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cumulative
    }

    #[inline]
    pub fn start(&self, sym: u32) -> u32 {
        self.cumulative[sym as usize]
    }

    #[inline]
    pub fn freq(&self, sym: u32) -> u32 {
        self.cumulative[sym as usize + 1] - self.cumulative[sym as usize]
    }

    /// Symbol whose bin contains `slot`.
    #[inline]
    pub fn lookup(&self, slot: u32) -> u32 {
        (self.cumulative.partition_point(|&c| c <= slot) - 1) as u32
    }
}

/// Supplies the table for the `i`-th symbol of a stream.
pub trait TableSource {
    fn len(&self) -> usize;
    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TableSource for [CdfTable] {
    fn len(&self) -> usize {
        <[CdfTable]>::len(self)
    }
    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>> {
        Ok(Cow::Borrowed(&self[i]))
    }
}

impl TableSource for Vec<CdfTable> {
    fn len(&self) -> usize {
        <[CdfTable]>::len(self)
    }
    fn table(&self, i: usize) -> Result<Cow<'_, CdfTable>> {
        Ok(Cow::Borrowed(&self[i]))
    }
}

pub fn rc_encode(symbols: &[u32], tables: &[CdfTable]) -> Result<Vec<u8>> {
    rc_encode_with(symbols, tables)
}

pub fn rc_encode_with<T: TableSource + ?Sized>(symbols: &[u32], tables: &T) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(SelicError::Encode(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut state = STATE_LOWER;
    let mut words: Vec<u32> = Vec::with_capacity(symbols.len() / 8 + 1);
    for i in (0..symbols.len()).rev() {
        let table = tables.table(i)?;
        let sym = symbols[i];
        if sym as usize >= table.alphabet_size() {
            return Err(SelicError::Encode(format!(
                "symbol {sym} at position {i} outside alphabet of size {}",
                table.alphabet_size()
            )));
        }
        let (start, freq) = (table.start(sym) as u64, table.freq(sym) as u64);
        let x_max = ((STATE_LOWER >> PRECISION_BITS) as u128) << 32;
        if state as u128 >= x_max * freq as u128 {
            words.push(state as u32);
            state >>= 32;
        }
        state = ((state / freq) << PRECISION_BITS) + (state % freq) + start;
    }
    let mut out = Vec::with_capacity(8 + 4 * words.len());
    out.extend_from_slice(&state.to_le_bytes());
    for w in words.iter().rev() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn rc_decode(bytes: &[u8], tables: &[CdfTable], count: usize) -> Result<Vec<u32>> {
    rc_decode_with(bytes, tables, count)
}

/// Decodes `count` symbols; the `i`-th symbol is read with `tables.table(i)`.
pub fn rc_decode_with<T: TableSource + ?Sized>(bytes: &[u8], tables: &T, count: usize) -> Result<Vec<u32>> {
    let mut dec = StreamDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = tables.table(i)?;
        out.push(dec.decode(&table)?);
    }
    dec.finish()?;
    Ok(out)
}

/// Incremental decoder, for callers whose tables depend on symbols already
/// decoded.
pub struct StreamDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    state: u64,
}

impl<'a> StreamDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let head: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| SelicError::Decode(format!("stream of {} bytes has no state", bytes.len())))?;
        let state = u64::from_le_bytes(head);
        if state < STATE_LOWER {
            return Err(SelicError::Decode("initial state below the normalization bound".into()));
        }
        Ok(Self { bytes, pos: 8, state })
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<u32> {
        let slot = (self.state & SLOT_MASK) as u32;
        let sym = table.lookup(slot);
        let (start, freq) = (table.start(sym) as u64, table.freq(sym) as u64);
        self.state = freq * (self.state >> PRECISION_BITS) + slot as u64 - start;
        if self.state < STATE_LOWER {
            let word: [u8; 4] = self
                .bytes
                .get(self.pos..self.pos + 4)
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| SelicError::Decode("stream truncated".into()))?;
            self.pos += 4;
            self.state = (self.state << 32) | u32::from_le_bytes(word) as u64;
        }
        Ok(sym)
    }

    /// Verifies that the stream was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(SelicError::Decode(format!(
                "{} trailing bytes after the last symbol",
                self.bytes.len() - self.pos
            )));
        }
        if self.state != STATE_LOWER {
            return Err(SelicError::Decode("final state mismatch; stream is corrupt".into()));
        }
        Ok(())
    }
}

/// Which coder implementation performs `rc_encode`/`rc_decode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoderBackend {
    #[default]
    Reference,
    /// The separately built high-throughput coder; byte-identical output.
    Fast,
}

impl fmt::Display for CoderBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoderBackend::Reference => "reference",
            CoderBackend::Fast => "fast",
        })
    }
}

impl FromStr for CoderBackend {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reference" => Ok(CoderBackend::Reference),
            "fast" => Ok(CoderBackend::Fast),
            other => Err(format!("unknown coder backend `{other}` (expected reference|fast)")),
        }
    }
}

/// ABI tag the fast coder must report before it is used.
pub const FAST_CODER_ABI_VERSION: u32 = 1;

/// Accepts a fast coder only if it reports the ABI this crate was built
/// against.
pub fn check_fast_abi(reported: u32) -> Result<()> {
    if reported == FAST_CODER_ABI_VERSION {
        Ok(())
    } else {
        Err(SelicError::Backend(format!(
            "fast coder ABI {reported} does not match expected {FAST_CODER_ABI_VERSION}"
        )))
    }
}

/// Resolves the backend that will actually run. The fast coder is linked
/// only when built alongside this crate; since both produce identical
/// bytes, a request for it falls back to the reference coder with a warning.
pub fn resolve_backend(requested: CoderBackend) -> CoderBackend {
    match requested {
        CoderBackend::Reference => CoderBackend::Reference,
        CoderBackend::Fast => {
            log::warn!("fast range coder is not built into this binary; using the reference coder");
            CoderBackend::Reference
        }
    }
}

/// Flat, caller-owned buffers exchanged with the fast coder across its
/// C-style boundary:
///
/// ```text
/// int32_t selic_rc_encode(uint32_t abi, const uint32_t *symbols, size_t n,
///                         const uint32_t *cdf, const uint32_t *offsets,
///                         uint8_t *out, size_t out_cap, size_t *out_len);
/// int32_t selic_rc_decode(uint32_t abi, const uint8_t *bytes, size_t len,
///                         const uint32_t *cdf, const uint32_t *offsets,
///                         uint32_t *symbols, size_t n);
/// ```
///
/// Table `i` occupies `cdf[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CoderBuffers {
    pub symbols: Vec<u32>,
    pub cdf: Vec<u32>,
    pub offsets: Vec<u32>,
}

impl CoderBuffers {
    pub fn pack<T: TableSource + ?Sized>(symbols: &[u32], tables: &T) -> Result<Self> {
        let mut cdf = Vec::new();
        let mut offsets = vec![0u32];
        for i in 0..tables.len() {
            cdf.extend_from_slice(tables.table(i)?.cumulative());
            offsets.push(cdf.len() as u32);
        }
        Ok(Self { symbols: symbols.to_vec(), cdf, offsets })
    }

    pub fn tables(&self) -> Result<Vec<CdfTable>> {
        self.offsets
            .windows(2)
            .map(|w| CdfTable::new(self.cdf[w[0] as usize..w[1] as usize].to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform2() -> CdfTable {
        CdfTable::new(vec![0, 32768, 65536]).unwrap()
    }

    #[test]
    fn empty_stream_is_initial_state() {
        let bytes = rc_encode(&[], &[]).unwrap();
        assert_eq!(bytes, vec![0, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(rc_decode(&bytes, &[], 0).unwrap(), Vec::<u32>::new());
    }

    /// Hand execution: state 2^32, symbol 0 with start 0 and freq 32768:
    /// (2^32 / 2^15) << 16 = 2^33, no renormalization.
    #[test]
    fn single_binary_symbol_by_hand() {
        let bytes = rc_encode(&[0], &[uniform2()]).unwrap();
        assert_eq!(bytes, (1u64 << 33).to_le_bytes().to_vec());
        assert_eq!(rc_decode(&bytes, &[uniform2()], 1).unwrap(), vec![0]);
        // Symbol 1 adds the bin start.
        let bytes = rc_encode(&[1], &[uniform2()]).unwrap();
        assert_eq!(bytes, ((1u64 << 33) + 32768).to_le_bytes().to_vec());
    }

    #[test]
    fn single_symbol_alphabet_costs_nothing() {
        let t = CdfTable::new(vec![0, TOTAL_FREQ]).unwrap();
        let tables = vec![t; 1000];
        let bytes = rc_encode(&[0; 1000], &tables).unwrap();
        assert_eq!(bytes.len(), 8);
        assert_eq!(rc_decode(&bytes, &tables, 1000).unwrap(), vec![0; 1000]);
    }

    #[test]
    fn rejects_symbol_outside_alphabet() {
        assert!(matches!(rc_encode(&[2], &[uniform2()]), Err(SelicError::Encode(_))));
    }

    #[test]
    fn table_validation() {
        assert!(CdfTable::new(vec![0, 10, 10, 65536]).is_err());
        assert!(CdfTable::new(vec![0, 65535]).is_err());
        assert!(CdfTable::new(vec![1, 65536]).is_err());
        assert_eq!(CdfTable::new(vec![0, 1, 65536]).unwrap().freq(0), 1);
    }

    #[test]
    fn from_pmf_keeps_every_bin() {
        let mut pmf = vec![0.0; 511];
        pmf[255] = 1.0;
        let t = CdfTable::from_pmf(&pmf).unwrap();
        assert_eq!(t.alphabet_size(), 511);
        assert_eq!(t.freq(255), TOTAL_FREQ - 510);
        assert!((0..511).all(|s| t.freq(s) >= 1));
    }

    #[test]
    fn truncation_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = CdfTable::from_frequencies(&[1, 100, 65435]).unwrap();
        let syms: Vec<u32> = (0..2000).map(|_| rng.random_range(0..3)).collect();
        let tables = vec![t; syms.len()];
        let bytes = rc_encode(&syms, &tables).unwrap();
        assert!(bytes.len() > 12);
        for cut in [0, 4, 7, bytes.len() - 4, bytes.len() - 1] {
            assert!(rc_decode(&bytes[..cut], &tables, syms.len()).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn abi_tag_and_fallback() {
        assert!(check_fast_abi(FAST_CODER_ABI_VERSION).is_ok());
        assert!(matches!(check_fast_abi(FAST_CODER_ABI_VERSION + 1), Err(SelicError::Backend(_))));
        assert_eq!(resolve_backend(CoderBackend::Fast), CoderBackend::Reference);
        assert_eq!("fast".parse::<CoderBackend>().unwrap(), CoderBackend::Fast);
        assert!("turbo".parse::<CoderBackend>().is_err());
    }

    #[test]
    fn buffers_round_trip_tables() {
        let tables = vec![uniform2(), CdfTable::new(vec![0, 1, 2, 65536]).unwrap()];
        let buf = CoderBuffers::pack(&[1, 2], &tables).unwrap();
        assert_eq!(buf.offsets, vec![0, 3, 7]);
        assert_eq!(buf.tables().unwrap(), tables);
    }

    fn arb_table() -> impl Strategy<Value = CdfTable> {
        prop::collection::vec(1u32..2000, 1..40).prop_map(|mut w| {
            let total: u32 = w.iter().sum();
            // Rescale to 65536 keeping each bin >= 1.
            let n = w.len() as u32;
            let budget = TOTAL_FREQ - n;
            let mut freqs: Vec<u32> = w.iter().map(|&x| 1 + (x as u64 * budget as u64 / total as u64) as u32).collect();
            let s: u32 = freqs.iter().sum();
            freqs[0] += TOTAL_FREQ - s;
            w.clear();
            CdfTable::from_frequencies(&freqs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn round_trip(pairs in prop::collection::vec((arb_table(), any::<u32>()), 0..300)) {
            let tables: Vec<CdfTable> = pairs.iter().map(|p| p.0.clone()).collect();
            let syms: Vec<u32> = pairs.iter().map(|(t, r)| r % t.alphabet_size() as u32).collect();
            let bytes = rc_encode(&syms, &tables).unwrap();
            prop_assert_eq!(bytes.len() % 4, 0);
            prop_assert_eq!(rc_decode(&bytes, &tables, syms.len()).unwrap(), syms);
        }
    }
}
