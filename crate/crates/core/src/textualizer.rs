//! Template rendering of HOIP tuples into a frame-level event description.

use std::cmp::Ordering;

use crate::event_model::HoipTuple;

pub const NO_EVENT: &str = "no salient event";

fn render_one(t: &HoipTuple) -> String {
    match &t.object {
        Some(o) if !o.is_empty() => format!("a {} is {} a {} in a {}", t.human, t.interaction, o, t.place),
        _ => format!("a {} is {} in a {}", t.human, t.interaction, t.place),
    }
}

// Descending confidence, then the remaining fields lexicographically, so any
// permutation of the input renders the same text.
fn order(a: &HoipTuple, b: &HoipTuple) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.human.cmp(&b.human))
        .then_with(|| a.interaction.cmp(&b.interaction))
        .then_with(|| a.object.cmp(&b.object))
        .then_with(|| a.place.cmp(&b.place))
}

pub fn render_description(tuples: &[HoipTuple]) -> String {
    if tuples.is_empty() {
        return NO_EVENT.to_owned();
    }
    let mut sorted: Vec<&HoipTuple> = tuples.iter().collect();
    sorted.sort_by(|a, b| order(a, b));
    sorted.into_iter().map(render_one).collect::<Vec<_>>().join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_tuple_with_object() {
        let t = HoipTuple::new("man", Some("knife"), "holding", "park", 0.9);
        assert_eq!(render_description(&[t]), "a man is holding a knife in a park");
    }

    #[test]
    fn tuple_without_object() {
        let t = HoipTuple::new("woman", None, "running", "street", 0.5);
        assert_eq!(render_description(&[t]), "a woman is running in a street");
    }

    #[test]
    fn empty_list() {
        assert_eq!(render_description(&[]), "no salient event");
    }

    #[test]
    fn higher_confidence_first() {
        let low = HoipTuple::new("man", None, "walking", "park", 0.4);
        let high = HoipTuple::new("woman", Some("bag"), "carrying", "street", 0.9);
        assert_eq!(
            render_description(&[low, high]),
            "a woman is carrying a bag in a street; a man is walking in a park"
        );
    }

    #[test]
    fn equal_confidence_breaks_on_human_label() {
        let b = HoipTuple::new("boy", None, "running", "park", 0.5);
        let a = HoipTuple::new("adult", None, "sitting", "park", 0.5);
        assert_eq!(
            render_description(&[b, a]),
            "a adult is sitting in a park; a boy is running in a park"
        );
    }

    fn tuple_strategy() -> impl Strategy<Value = HoipTuple> {
        (
            "[a-z]{1,6}",
            proptest::option::of("[a-z]{1,6}"),
            "[a-z]{1,8}",
            "[a-z]{1,8}",
            (0u8..=10).prop_map(|c| f64::from(c) / 10.0),
        )
            .prop_map(|(h, o, a, p, c)| HoipTuple {
                human: h,
                object: o,
                interaction: a,
                place: p,
                confidence: c,
            })
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_complete(
            tuples in proptest::collection::vec(tuple_strategy(), 0..6),
            seed in any::<u64>(),
        ) {
            let out = render_description(&tuples);
            prop_assert!(!out.is_empty());
            for t in &tuples {
                prop_assert!(out.contains(&t.interaction));
                prop_assert!(out.contains(&t.place));
            }
            let mut shuffled = tuples.clone();
            let n = shuffled.len();
            if n > 1 {
                let mut s = seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
            }
            prop_assert_eq!(render_description(&shuffled), out);
        }
    }
}
