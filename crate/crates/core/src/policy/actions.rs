//! Grasp action codec: a flat index over "grasp one candidate" followed by
//! "grasp an unordered pair", so M candidates give M + M(M-1)/2 actions
//! (820 at M = 40).

use super::PolicyError;

/// Total number of actions for `m` candidates.
pub fn action_space_size(m: usize) -> usize {
    m + m * (m - 1) / 2
}

/// Encode one or two candidate indices. Singles map to `[0, m)`; pairs
/// `(i < j)` map lexicographically into `[m, m + m(m-1)/2)`.
pub fn encode_action(sel: &[usize], m: usize) -> Result<usize, PolicyError> {
    match sel {
        [i] if *i < m => Ok(*i),
        [a, b] if *a < m && *b < m && a != b => {
            let (i, j) = (*a.min(b), *a.max(b));
            Ok(m + i * (2 * m - i - 1) / 2 + (j - i - 1))
        }
        _ => Err(PolicyError::BadSelection {
            sel: sel.to_vec(),
            m,
        }),
    }
}

/// Decode a flat action index back into one or two candidate indices
/// (pairs come back ordered ascending).
pub fn decode_action(flat: usize, m: usize) -> Result<Vec<usize>, PolicyError> {
    if flat < m {
        return Ok(vec![flat]);
    }
    let mut k = flat - m;
    for i in 0..m {
        let row = m - 1 - i;
        if k < row {
            return Ok(vec![i, i + 1 + k]);
        }
        k -= row;
    }
    Err(PolicyError::BadActionIndex { flat, m })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convention_anchors() {
        assert_eq!(encode_action(&[0], 40).unwrap(), 0);
        assert_eq!(encode_action(&[39], 40).unwrap(), 39);
        assert_eq!(encode_action(&[0, 1], 40).unwrap(), 40);
        assert_eq!(action_space_size(40), 820);
    }

    #[test]
    fn exhaustive_round_trip_at_m40() {
        let m = 40;
        for flat in 0..action_space_size(m) {
            let sel = decode_action(flat, m).unwrap();
            assert_eq!(encode_action(&sel, m).unwrap(), flat);
            match sel.as_slice() {
                [i] => assert!(*i < m),
                [i, j] => assert!(i < j && *j < m),
                _ => panic!("bad selection size"),
            }
        }
        // Unordered pairs encode identically either way round.
        assert_eq!(
            encode_action(&[7, 3], m).unwrap(),
            encode_action(&[3, 7], m).unwrap()
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode_action(&[5, 5], 40).is_err());
        assert!(encode_action(&[40], 40).is_err());
        assert!(encode_action(&[], 40).is_err());
        assert!(decode_action(820, 40).is_err());
    }
}
