//! A small probabilistic grammar that produces English-like ASCII text.
//!
//! The text mixes local regularities (spelling, agreement) with longer
//! range ones (names introduced earlier in a paragraph are referred to
//! again; counting runs), so deeper models have something to gain.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory", "oscar"];
const NOUNS: &[(&str, &str)] = &[
    ("cat", "cats"),
    ("dog", "dogs"),
    ("bird", "birds"),
    ("river", "rivers"),
    ("house", "houses"),
    ("tree", "trees"),
    ("child", "children"),
    ("box", "boxes"),
    ("city", "cities"),
    ("garden", "gardens"),
    ("letter", "letters"),
    ("stone", "stones"),
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "see"),
    ("finds", "find"),
    ("likes", "like"),
    ("carries", "carry"),
    ("watches", "watch"),
    ("follows", "follow"),
    ("paints", "paint"),
    ("moves", "move"),
];
const ADJECTIVES: &[&str] = &["small", "red", "old", "quiet", "bright", "green", "heavy", "strange", "happy", "cold"];
const PLACES: &[&str] = &["near the river", "in the garden", "behind the house", "under the tree", "across the city"];
const NUMBERS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

struct Gen {
    rng: ChaCha8Rng,
    out: String,
    cast: Vec<&'static str>,
}

impl Gen {
    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        *xs.choose(&mut self.rng).expect("non-empty")
    }

    fn noun_phrase(&mut self) -> bool {
        let plural = self.rng.random_bool(0.35);
        let (s, p) = self.pick(NOUNS);
        let det = if plural { self.pick(&["the", "some", "two"]) } else { self.pick(&["the", "a", "every"]) };
        self.out.push_str(det);
        self.out.push(' ');
        if self.rng.random_bool(0.4) {
            let adj = self.pick(ADJECTIVES);
            self.out.push_str(adj);
            self.out.push(' ');
        }
        self.out.push_str(if plural { p } else { s });
        plural
    }

    fn subject(&mut self) -> bool {
        if !self.cast.is_empty() && self.rng.random_bool(0.5) {
            let name = self.pick(&self.cast.clone());
            self.out.push_str(name);
            false
        } else {
            self.noun_phrase()
        }
    }

    fn clause(&mut self) {
        let plural = self.subject();
        self.out.push(' ');
        let (s, p) = self.pick(VERBS);
        self.out.push_str(if plural { p } else { s });
        self.out.push(' ');
        self.noun_phrase();
        if self.rng.random_bool(0.3) {
            self.out.push(' ');
            let place = self.pick(PLACES);
            self.out.push_str(place);
        }
    }

    fn sentence(&mut self) {
        match self.rng.random_range(0..10) {
            0 => {
                let name = self.pick(NAMES);
                if !self.cast.contains(&name) {
                    self.cast.push(name);
                }
                self.out.push_str("there was a person called ");
                self.out.push_str(name);
            }
            1 => {
                let start = self.rng.random_range(0..5);
                let len = self.rng.random_range(3..=NUMBERS.len() - start);
                self.out.push_str("they counted ");
                self.out.push_str(&NUMBERS[start..start + len].join(" "));
            }
            2 if !self.cast.is_empty() => {
                let a = self.pick(&self.cast.clone());
                self.out.push_str(a);
                self.out.push_str(" said that ");
                self.clause();
            }
            _ => {
                self.clause();
                if self.rng.random_bool(0.25) {
                    self.out.push_str(" and ");
                    self.clause();
                }
            }
        }
        self.out.push_str(". ");
    }
}

/// Deterministic text of exactly `len` bytes for a given seed.
pub fn synthetic_text(seed: u64, len: usize) -> String {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: String::with_capacity(len + 256),
        cast: Vec::new(),
    };
    while g.out.len() < len {
        let sentences = g.rng.random_range(3..9);
        for _ in 0..sentences {
            g.sentence();
        }
        g.out.pop();
        g.out.push('\n');
        g.cast.clear();
    }
    g.out.truncate(len);
    g.out
}
