//! Calendar ids of 15-minute slots and their one-hot embedding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DAILY_SLOTS: usize = 96;
pub const WEEKDAYS: usize = 7;
pub const EMBED_WIDTH: usize = DAILY_SLOTS + WEEKDAYS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotTimestamp {
    pub daily_id: usize,
    pub weekly_id: usize,
}

/// Calendar position of `absolute_slot` for a series whose slot 0 falls on
/// `start_weekday` (Monday = 0) at daily slot `start_daily_slot`.
pub fn slot_ids(absolute_slot: usize, start_weekday: usize, start_daily_slot: usize) -> SlotTimestamp {
    let since_midnight = start_daily_slot + absolute_slot;
    SlotTimestamp {
        daily_id: since_midnight % DAILY_SLOTS,
        weekly_id: (start_weekday + since_midnight / DAILY_SLOTS) % WEEKDAYS,
    }
}

/// One row per id: `onehot96(daily) ++ onehot7(weekly)`.
pub fn build_embedding(ids: &[SlotTimestamp]) -> Result<Tensor> {
    let mut e = Tensor::zeros(&[ids.len(), EMBED_WIDTH]);
    for (r, id) in ids.iter().enumerate() {
        if id.daily_id >= DAILY_SLOTS || id.weekly_id >= WEEKDAYS {
            return Err(Error::invalid(format!("slot id {id:?} out of range")));
        }
        e.set(&[r, id.daily_id], 1.0);
        e.set(&[r, DAILY_SLOTS + id.weekly_id], 1.0);
    }
    Ok(e)
}

/// Slot ids of a window's `len` consecutive slots starting at `first`.
pub fn window_ids(first: usize, len: usize, start_weekday: usize, start_daily_slot: usize) -> Vec<SlotTimestamp> {
    (first..first + len)
        .map(|s| slot_ids(s, start_weekday, start_daily_slot))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn slot_id_examples() {
        assert_eq!(slot_ids(0, 0, 0), SlotTimestamp { daily_id: 0, weekly_id: 0 });
        assert_eq!(slot_ids(97, 0, 0), SlotTimestamp { daily_id: 1, weekly_id: 1 });
        assert_eq!(slot_ids(96 * 7 - 1, 0, 0), SlotTimestamp { daily_id: 95, weekly_id: 6 });
        // Sunday 23:45 rolls over to Monday 00:00.
        assert_eq!(slot_ids(1, 6, 95), SlotTimestamp { daily_id: 0, weekly_id: 0 });
    }

    #[test]
    fn embedding_examples() {
        let ids = window_ids(0, 8, 0, 0);
        let e = build_embedding(&ids).unwrap();
        assert_eq!(e.shape(), &[8, 103]);
        assert_eq!(e.at(&[0, 0]), 1.0);
        assert_eq!(e.at(&[0, 96]), 1.0);
        for r in 0..8 {
            assert_eq!(e.row(r).iter().sum::<f64>(), 2.0);
        }
        let bad = SlotTimestamp { daily_id: 96, weekly_id: 0 };
        assert!(build_embedding(&[bad]).is_err());
    }

    proptest! {
        #[test]
        fn ids_are_weekly_periodic(k in 0usize..100_000, wd in 0usize..7, ds in 0usize..96) {
            prop_assert_eq!(slot_ids(k, wd, ds), slot_ids(k + 96 * 7, wd, ds));
            let id = slot_ids(k, wd, ds);
            prop_assert!(id.daily_id < 96 && id.weekly_id < 7);
        }

        #[test]
        fn embedding_rows_have_two_ones(k in 0usize..10_000) {
            let e = build_embedding(&window_ids(k, 8, 2, 40)).unwrap();
            for r in 0..8 {
                let row = e.row(r);
                prop_assert_eq!(row[..96].iter().filter(|v| **v == 1.0).count(), 1);
                prop_assert_eq!(row[96..].iter().filter(|v| **v == 1.0).count(), 1);
                prop_assert_eq!(row.iter().sum::<f64>(), 2.0);
            }
        }
    }
}
