//! Card access tables: one bit per card of a page, set when the card's
//! bytes are dereferenced, cleared when the page is swapped out.

use std::sync::atomic::{AtomicU64, Ordering};

/// Per-page access bitmap. A card covers `card_size` consecutive bytes;
/// a set bit means the card has been accessed since the page was
/// allocated or last swapped in.
pub struct CardAccessTable {
    words: Box<[AtomicU64]>,
    bits: usize,
    card_shift: u32,
}

impl CardAccessTable {
    pub fn new(page_size: usize, card_size: usize) -> Self {
        debug_assert!(page_size.is_power_of_two() && card_size.is_power_of_two());
        debug_assert!(card_size <= page_size);
        let bits = page_size / card_size;
        let words = (bits + 63) / 64;
        CardAccessTable {
            words: (0..words).map(|_| AtomicU64::new(0)).collect(),
            bits,
            card_shift: card_size.trailing_zeros(),
        }
    }

    /// Number of cards (bits) tracked.
    pub fn bit_count(&self) -> usize {
        self.bits
    }

    /// Bytes of backing storage. 1/128 of the page at the 4096/16 defaults.
    pub fn storage_bytes(&self) -> usize {
        self.bits / 8
    }

    /// Set the bits of every card overlapping `[offset, offset + len)`.
    /// The caller guarantees the range lies within the page.
    pub fn mark(&self, offset: usize, len: usize) {
        if len == 0 {
            return;
        }
        let first = offset >> self.card_shift;
        let last = (offset + len - 1) >> self.card_shift;
        debug_assert!(last < self.bits);
        for card in first..=last {
            self.words[card / 64].fetch_or(1u64 << (card % 64), Ordering::Relaxed);
        }
    }

    pub fn is_set(&self, card: usize) -> bool {
        debug_assert!(card < self.bits);
        self.words[card / 64].load(Ordering::Relaxed) & (1u64 << (card % 64)) != 0
    }

    pub fn set_count(&self) -> usize {
        self.words
            .iter()
            .map(|w| w.load(Ordering::Relaxed).count_ones() as usize)
            .sum()
    }

    /// Fraction of set bits; the page's locality score at eviction.
    pub fn car(&self) -> f64 {
        self.set_count() as f64 / self.bits as f64
    }

    pub fn clear(&self) {
        for w in self.words.iter() {
            w.store(0, Ordering::Relaxed);
        }
    }

    /// Snapshot as a plain bit vector (tests and reports).
    pub fn snapshot(&self) -> Vec<bool> {
        (0..self.bits).map(|c| self.is_set(c)).collect()
    }
}

/// CAR of an arbitrary bitmap; pure helper for tests and the evictor.
pub fn compute_car(cat: &CardAccessTable) -> f64 {
    cat.car()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: which cards does the byte range `[off, off+len)`
    /// touch on a page with `card` bytes per card?
    fn touched_cards(off: usize, len: usize, card: usize, page: usize) -> Vec<usize> {
        let mut v = Vec::new();
        for b in off..off + len {
            assert!(b < page);
            let c = b / card;
            if v.last() != Some(&c) {
                v.push(c);
            }
        }
        v
    }

    #[test]
    fn geometry_matches_page() {
        let cat = CardAccessTable::new(4096, 16);
        assert_eq!(cat.bit_count(), 256);
        assert_eq!(cat.bit_count() * 16, 4096);
        assert_eq!(cat.storage_bytes(), 32); // 1/128 of 4096
    }

    #[test]
    fn mark_exact_card() {
        let cat = CardAccessTable::new(4096, 16);
        cat.mark(0, 16);
        assert!(cat.is_set(0));
        assert_eq!(cat.set_count(), 1);
    }

    #[test]
    fn mark_straddling_range() {
        // Oracle: [8, 24) overlaps cards [0,16) and [16,32).
        assert_eq!(touched_cards(8, 16, 16, 4096), vec![0, 1]);
        let cat = CardAccessTable::new(4096, 16);
        cat.mark(8, 16);
        assert!(cat.is_set(0) && cat.is_set(1));
        assert_eq!(cat.set_count(), 2);
    }

    #[test]
    fn car_boundaries() {
        let cat = CardAccessTable::new(4096, 16);
        assert_eq!(cat.car(), 0.0);
        for c in 0..205 {
            cat.mark(c * 16, 1);
        }
        // 205/256 = 0.80078125, at or above the 0.80 default threshold.
        assert_eq!(cat.set_count(), 205);
        assert!((cat.car() - 0.80078125).abs() < 1e-12);
        assert!(cat.car() >= 0.80);
        for c in 0..256 {
            cat.mark(c * 16, 1);
        }
        assert_eq!(cat.car(), 1.0);
    }

    #[test]
    fn car_is_pure_and_mark_idempotent() {
        let cat = CardAccessTable::new(4096, 16);
        cat.mark(100, 300);
        let a = cat.car();
        let snap = cat.snapshot();
        cat.mark(100, 300);
        assert_eq!(cat.car(), a);
        assert_eq!(cat.snapshot(), snap);
    }

    #[test]
    fn clear_resets() {
        let cat = CardAccessTable::new(4096, 16);
        cat.mark(0, 4096);
        assert_eq!(cat.car(), 1.0);
        cat.clear();
        assert_eq!(cat.set_count(), 0);
    }
}
