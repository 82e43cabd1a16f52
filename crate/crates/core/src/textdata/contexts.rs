use crate::error::{EalmError, Result};

/// Candidate entity contexts for predicting `tokens[t]`.
///
/// Entry `l` is `[w_0, w_{t-l}, …, w_{t-1}]`: the sentence-start token
/// followed by the `l` most recent tokens. Lengths stop at `min(k, t-1)`
/// because `w_0` is already the anchor, so the result always holds
/// `min(k, t-1) + 1` distinct contexts.
pub fn enumerate_entity_contexts<T: Clone>(tokens: &[T], t: usize, k: usize) -> Result<Vec<Vec<T>>> {
    if t < 1 || t > tokens.len() {
        return Err(EalmError::usage(format!(
            "context position {t} outside 1..={}",
            tokens.len()
        )));
    }
    let longest = k.min(t - 1);
    Ok((0..=longest)
        .map(|l| {
            let mut ctx = Vec::with_capacity(l + 1);
            ctx.push(tokens[0].clone());
            ctx.extend_from_slice(&tokens[t - l..t]);
            ctx
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split(' ').collect()
    }

    #[test]
    fn coldplay_example_at_full() {
        let toks = words("<s> play a sky full of stars by coldplay");
        let t = toks.iter().position(|w| *w == "full").unwrap();
        let ctx = enumerate_entity_contexts(&toks, t, 4).unwrap();
        assert_eq!(
            ctx,
            vec![
                vec!["<s>"],
                vec!["<s>", "sky"],
                vec!["<s>", "a", "sky"],
                vec!["<s>", "play", "a", "sky"],
            ]
        );
    }

    #[test]
    fn first_position_has_only_anchor() {
        let toks = [7, 8, 9];
        for k in 0..6 {
            assert_eq!(enumerate_entity_contexts(&toks, 1, k).unwrap(), vec![vec![7]]);
        }
    }

    #[test]
    fn zero_k_has_only_anchor() {
        let toks = [1, 2, 3, 4, 5];
        for t in 1..=5 {
            assert_eq!(enumerate_entity_contexts(&toks, t, 0).unwrap(), vec![vec![1]]);
        }
    }

    #[test]
    fn out_of_range_is_usage_error() {
        assert_eq!(
            enumerate_entity_contexts(&[1, 2], 0, 2).unwrap_err().class(),
            "UsageError"
        );
        assert!(enumerate_entity_contexts(&[1, 2], 3, 2).is_err());
        assert!(enumerate_entity_contexts(&[1, 2], 2, 2).is_ok());
    }

    proptest! {
        #[test]
        fn count_and_anchor(len in 1usize..20, k in 0usize..8, seed in 0usize..1000) {
            let toks: Vec<usize> = (0..len).map(|i| (i * 31 + seed) % 97).collect();
            for t in 1..=len {
                let ctx = enumerate_entity_contexts(&toks, t, k).unwrap();
                prop_assert_eq!(ctx.len(), k.min(t - 1) + 1);
                for (l, c) in ctx.iter().enumerate() {
                    prop_assert_eq!(c.len(), l + 1);
                    prop_assert_eq!(c[0], toks[0]);
                    prop_assert_eq!(&c[1..], &toks[t - l..t]);
                }
            }
        }
    }
}
