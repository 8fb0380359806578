//! Template sentences with polarity words, labelled 1 (positive) or 0.
//! A quarter of them negate the adjective, which flips the label.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: &[&str] = &[
    "the movie", "this film", "the plot", "the acting", "the soundtrack", "the ending", "the story", "the cast",
    "the director", "the script", "the dialogue", "the finale",
];
const VERBS: &[&str] = &["was", "is", "felt", "seemed", "looked"];
const INTENSIFIERS: &[&str] = &["really", "incredibly", "quite", "very", "truly", "rather"];
const POSITIVE: &[&str] = &[
    "great", "wonderful", "inspiring", "brilliant", "delightful", "moving", "superb", "charming", "excellent",
    "beautiful",
];
const NEGATIVE: &[&str] = &[
    "terrible", "boring", "awful", "dull", "painful", "weak", "dreadful", "clumsy", "tedious", "bland",
];
const FILLERS: &[&str] = &[
    "on a rainy sunday",
    "from start to finish",
    "for most of the evening",
    "in my opinion",
    "to be honest",
    "despite the long queue",
];

/// One `label<TAB>sentence` line per example, balanced in expectation.
pub fn generate_sentiment(count: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..count {
        let positive_word = rng.random_bool(0.5);
        let negated = rng.random_bool(0.25);
        let mut words: Vec<&str> = Vec::new();
        words.extend(SUBJECTS.choose(&mut rng).expect("non-empty").split(' '));
        words.push(VERBS.choose(&mut rng).expect("non-empty"));
        if negated {
            words.push("not");
        }
        if rng.random_bool(0.5) {
            words.push(INTENSIFIERS.choose(&mut rng).expect("non-empty"));
        }
        let pool = if positive_word { POSITIVE } else { NEGATIVE };
        words.push(pool.choose(&mut rng).expect("non-empty"));
        if rng.random_bool(0.4) {
            words.extend(FILLERS.choose(&mut rng).expect("non-empty").split(' '));
        }
        words.push(".");
        let label = usize::from(positive_word != negated);
        out.push_str(&format!("{label}\t{}\n", words.join(" ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::parse_labeled;

    #[test]
    fn deterministic_and_roughly_balanced() {
        let a = generate_sentiment(1000, 4);
        assert_eq!(a, generate_sentiment(1000, 4));
        let ex = parse_labeled(&a).unwrap();
        assert_eq!(ex.len(), 1000);
        let pos = ex.iter().filter(|e| e.label == 1).count();
        assert!((430..=570).contains(&pos), "{pos}");
    }

    #[test]
    fn negation_flips_label() {
        for e in parse_labeled(&generate_sentiment(200, 1)).unwrap() {
            let has_pos = POSITIVE.iter().any(|w| e.text.split(' ').any(|t| t == *w));
            let negated = e.text.split(' ').any(|t| t == "not");
            assert_eq!(e.label == 1, has_pos != negated, "{}", e.text);
        }
    }
}
