//! Answer normalization and the binary ground-truth verifier.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("ground truth must be non-empty")]
    EmptyGroundTruth,
}

const TRAILING: &[char] = &['.', ',', ';', ':', '!', '?', '…'];

/// Case-folds, collapses whitespace and strips trailing punctuation.
/// Idempotent.
pub fn normalize(text: &str) -> String {
    let folded = text.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| TRAILING.contains(&c) || c.is_whitespace())
        .to_string()
}

/// A single choice letter `a`–`e` if the normalized text is exactly one.
pub fn as_choice_letter(normalized: &str) -> Option<char> {
    let mut chars = normalized.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ 'a'..='e'), None) => Some(c),
        _ => None,
    }
}

/// Leading choice letter of a normalized answer: `b`, `b)`, `(b)`, `b. text`.
pub fn leading_choice_letter(normalized: &str) -> Option<char> {
    let s = normalized.strip_prefix('(').unwrap_or(normalized);
    let mut chars = s.chars();
    let letter = chars.next()?;
    if !('a'..='e').contains(&letter) {
        return None;
    }
    match chars.next() {
        None => Some(letter),
        Some(c) if !c.is_alphanumeric() => Some(letter),
        _ => None,
    }
}

/// `true` iff the answer matches the ground truth after normalization.
/// When the ground truth is a bare choice letter, a leading choice letter is
/// extracted from the answer first.
pub fn verify(answer: &str, ground_truth: &str) -> Result<bool, VerifyError> {
    let gt = normalize(ground_truth);
    if gt.is_empty() {
        return Err(VerifyError::EmptyGroundTruth);
    }
    let ans = normalize(answer);
    if let Some(letter) = as_choice_letter(&gt) {
        return Ok(leading_choice_letter(&ans) == Some(letter));
    }
    Ok(ans == gt)
}

/// Symmetric agreement test used for consensus.
pub fn answers_agree(a: &str, b: &str) -> bool {
    verify(a, b).unwrap_or(false) || verify(b, a).unwrap_or(false)
}

/// Most frequent answer under verifier normalization; ties go to the answer
/// seen first. Returns the first original spelling of the winner.
pub fn modal_answer<S: AsRef<str>>(answers: &[S]) -> Option<String> {
    let mut groups: Vec<(String, String, usize)> = Vec::new();
    for a in answers {
        let a = a.as_ref();
        if let Some(g) = groups.iter_mut().find(|(orig, _, _)| answers_agree(orig, a)) {
            g.2 += 1;
        } else {
            groups.push((a.to_string(), normalize(a), 1));
        }
    }
    let best = groups.iter().map(|g| g.2).max()?;
    groups.into_iter().find(|g| g.2 == best).map(|g| g.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_matches() {
        let s = "Schatzker type IV tibial plateau fracture";
        assert!(verify(s, s).unwrap());
    }

    #[test]
    fn choice_letter_is_extracted() {
        // "A) Schatzker ..." -> "a) schatzker ..." -> leading letter 'a'
        assert!(verify("A) Schatzker type IV tibial plateau fracture", "A").unwrap());
        assert!(verify("(b)", "B").unwrap());
        assert!(verify("c. something", "c").unwrap());
        assert!(!verify("The answer is B", "B").unwrap());
        assert!(!verify("Bacterial", "B").unwrap());
    }

    #[test]
    fn mismatch_and_punctuation() {
        assert!(!verify("No", "Yes").unwrap());
        assert!(verify("  yes. ", "Yes").unwrap());
        assert!(verify("Acute   Appendicitis!", "acute appendicitis").unwrap());
    }

    #[test]
    fn empty_ground_truth() {
        assert_eq!(verify("a", "  "), Err(VerifyError::EmptyGroundTruth));
        assert_eq!(verify("a", "..."), Err(VerifyError::EmptyGroundTruth));
    }

    #[test]
    fn modal_answer_counts_normalized() {
        assert_eq!(modal_answer(&["B", "b.", "C"]).as_deref(), Some("B"));
        assert_eq!(modal_answer(&["C", "B"]).as_deref(), Some("C"));
        assert_eq!(modal_answer::<&str>(&[]), None);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn verify_invariant_under_normalization(a in "[A-Ea-e()., ]{0,6}[a-z ]{0,12}", gt in "[A-E]|[a-z]{1,8}") {
            prop_assert_eq!(verify(&normalize(&a), &gt), verify(&a, &gt));
        }
    }
}
