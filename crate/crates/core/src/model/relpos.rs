//! T5-style relative position buckets.

/// Bucket of `key_pos - query_pos`: exact buckets for short distances,
/// log-spaced buckets up to `max_distance`, one shared bucket beyond.
/// Bidirectional buckets split the range between past and future.
pub fn relative_bucket(relative: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let mut n = -relative;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as i64;
    (ret + large.min(buckets - 1)) as usize
}

/// Row-major `q_len × k_len` bucket grid.
pub fn bucket_grid(q_len: usize, k_len: usize, q_offset: usize, bidirectional: bool, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_len * k_len);
    for i in 0..q_len {
        for j in 0..k_len {
            let rel = j as i64 - (i + q_offset) as i64;
            out.push(relative_bucket(rel, bidirectional, num_buckets, max_distance));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_bucketing() {
        // Values from the reference T5 bucketing, 32 buckets, max distance 128.
        assert_eq!(relative_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_bucket(-1, true, 32, 128), 1);
        assert_eq!(relative_bucket(1, true, 32, 128), 17);
        assert_eq!(relative_bucket(-7, true, 32, 128), 7);
        assert_eq!(relative_bucket(-8, true, 32, 128), 8);
        assert_eq!(relative_bucket(-1000, true, 32, 128), 15);
        assert_eq!(relative_bucket(1000, true, 32, 128), 31);
        assert_eq!(relative_bucket(3, false, 32, 128), 0);
        assert_eq!(relative_bucket(-20, false, 32, 128), 17);
    }

    #[test]
    fn buckets_stay_in_range() {
        for rel in -600..600 {
            assert!(relative_bucket(rel, true, 8, 16) < 8);
            assert!(relative_bucket(rel, false, 8, 16) < 8);
        }
    }
}
