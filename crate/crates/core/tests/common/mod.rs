//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use lifelong_core::corpus::{
    AnnotatedTactic, Corpus, DatasetSplit, Pos, Premise, PremiseFile, PremiseKind, StateAfter,
    Theorem, TheoremStatus, TracedTactic,
};

pub const TOY_PREMISES: usize = 50;
pub const TOY_FILE: &str = "Toy/Basic.lean";
const NAME_WORDS: usize = 8;

/// Distinct four-letter words from a seeded LCG stream.
pub fn words(n: usize, seed: u64) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut s: u64 = seed;
    while out.len() < n {
        let mut w = String::new();
        for _ in 0..4 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            w.push((b'a' + ((s >> 33) % 26) as u8) as char);
        }
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

pub fn toy_statement(tag: &str) -> String {
    format!(
        "∀ (a b c d : ℕ) (h₁ : a ≤ b) (h₂ : c ≤ d) (h₃ : 0 < a * c), \
         a + (b + c) + d = (a + b) + (c + d) ∧ a * c ≤ b * d ∧ a * (b + c) = a * b + a * c ∧ \
         (a + b) * (c + d) = a * c + a * d + b * c + b * d ∧ (b + d) - (a + c) ≤ b + d ∧ \
         min a c ≤ max b d ∧ a ^ 2 + c ^ 2 ≤ b ^ 2 + d ^ 2 ∧ gcd a c ∣ a * c ∧ {tag} a b c d"
    )
}

fn toy_theorem(name: String, premise: &Premise, tag: &str) -> Theorem {
    let text = format!("exact <a>{}</a>", premise.full_name);
    Theorem {
        repo_url: "https://example.org/toy".into(),
        commit: "0".into(),
        file_path: "Toy/Uses.lean".into(),
        full_name: name.clone(),
        statement: format!("{name} : {}", toy_statement(tag)),
        start: Pos::new(1, 1),
        end: Pos::new(2, 1),
        traced_tactics: vec![TracedTactic {
            tactic: format!("exact {}", premise.full_name),
            annotated_tactic: AnnotatedTactic { text, premises: vec![premise.full_name.clone()] },
            state_before: toy_statement(tag),
            state_after: StateAfter::Proved,
        }],
        status: TheoremStatus::Proven,
    }
}

/// Separable retrieval task: each state is the statement of its positive
/// premise. Training repeats every premise `reps` times; validation and test
/// hold one state per premise.
pub fn toy_task(reps: usize) -> (Corpus, DatasetSplit) {
    let tags = words(TOY_PREMISES, 0x2545_f491_4f6c_dd1d);
    let names = words(NAME_WORDS * TOY_PREMISES, 0x9e37_79b9_7f4a_7c15);
    let premises: Vec<Premise> = tags
        .iter()
        .enumerate()
        .map(|(i, tag)| Premise {
            full_name: format!("Toy.{}_{i:02}", names[NAME_WORDS * i..NAME_WORDS * (i + 1)].concat()),
            file_path: TOY_FILE.into(),
            statement: toy_statement(tag),
            start: Pos::new(1 + 3 * i as u32, 1),
            end: Pos::new(2 + 3 * i as u32, 1),
            kind: PremiseKind::Theorem,
        })
        .collect();
    let corpus = Corpus::from_files(vec![PremiseFile {
        path: TOY_FILE.into(),
        imports: vec![],
        premises: premises.clone(),
    }])
    .unwrap();
    let mut split = DatasetSplit::default();
    for (i, (p, tag)) in premises.iter().zip(&tags).enumerate() {
        for r in 0..reps {
            split.train.push(toy_theorem(format!("Toy.train_{i:02}_{r}"), p, tag));
        }
        split.val.push(toy_theorem(format!("Toy.val_{i:02}"), p, tag));
        split.test.push(toy_theorem(format!("Toy.test_{i:02}"), p, tag));
    }
    (corpus, split)
}
