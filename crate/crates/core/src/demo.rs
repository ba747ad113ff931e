//! Bundled three-repository synthetic curriculum.
//!
//! Every repository ships the same `Shared/Basic.lean`. The algebra
//! repository trains on the first half of the shared premises; the topology
//! repository has sorries that can only be closed with those premises and
//! never trains on them itself.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    AnnotatedTactic, Pos, Premise, PremiseFile, PremiseKind, StateAfter, Theorem, TheoremStatus, TracedTactic,
};
use crate::database::{RepoId, RepoMetadata, RepositoryRecord};
use crate::orchestrator::RepoFixture;
use crate::search::{EnvironmentFixture, FixtureEdge, PROVED_TARGET};

pub const SHARED_FILE: &str = "Shared/Basic.lean";
const SHARED_PREMISES: usize = 16;
const OWN_PREMISES: usize = 60;
const REPS: usize = 8;
const NAME_WORDS: usize = 6;

struct Spec {
    slug: &'static str,
    module: &'static str,
    date: &'static str,
    /// Shared premise indices this repository trains on.
    shared_trained: std::ops::Range<usize>,
    /// Proof-length pattern cycled over training theorems.
    steps: &'static [usize],
    /// Sorries: (shared premise index or own premise index, uses shared).
    sorries: &'static [(usize, bool)],
    /// Sorries with no proof at all.
    hopeless: usize,
}

const SPECS: [Spec; 3] = [
    Spec {
        slug: "algebra",
        module: "Algebra",
        date: "2024-03-01",
        shared_trained: 0..8,
        steps: &[1, 1, 1, 1, 2],
        sorries: &[(3, false), (11, false)],
        hopeless: 0,
    },
    Spec {
        slug: "topology",
        module: "Topology",
        date: "2024-03-08",
        shared_trained: 0..0,
        steps: &[1, 2, 2, 3],
        sorries: &[(0, true), (1, true), (2, true), (3, true), (4, true), (5, true), (7, false)],
        hopeless: 1,
    },
    Spec {
        slug: "analysis",
        module: "Analysis",
        date: "2024-03-15",
        shared_trained: 8..16,
        steps: &[2, 3, 3, 4],
        sorries: &[(9, true), (5, false)],
        hopeless: 1,
    },
];

const SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "ri", "so", "tu", "va", "we", "xi", "yo", "zu",
];

fn word(rng: &mut ChaCha8Rng) -> String {
    (0..2).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| word(rng)).collect()
}

fn tag(rng: &mut ChaCha8Rng) -> String {
    (0..8).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

struct Lemma {
    premise: Premise,
    tag: String,
}

fn statement(tag: &str, vars: &str) -> String {
    format!("∀ ({vars} : ℕ), {vars} ≤ {vars} → {tag} {vars}")
}

fn goal(tag: &str) -> String {
    format!("a b c d : ℕ\nh : a ≤ b\n⊢ {tag} a b c d")
}

fn sorry_goal(tag: &str) -> String {
    format!("x y z w : ℕ\nh : x ≤ y\n⊢ {tag} x y z w")
}

fn lemmas(rng: &mut ChaCha8Rng, prefix: &str, file: &str, n: usize) -> Vec<Lemma> {
    (0..n)
        .map(|i| {
            let name = format!("{prefix}.{}_{i:02}", words(rng, NAME_WORDS).concat());
            let tag = tag(rng);
            let line = 1 + 4 * i as u32;
            Lemma {
                premise: Premise {
                    full_name: name,
                    file_path: file.to_string(),
                    statement: statement(&tag, "a b c d"),
                    start: Pos::new(line, 1),
                    end: Pos::new(line + 2, 10),
                    kind: PremiseKind::Theorem,
                },
                tag,
            }
        })
        .collect()
}

fn traced(tactic: &str, before: String, after: StateAfter, premises: Vec<String>) -> TracedTactic {
    TracedTactic {
        tactic: tactic.to_string(),
        annotated_tactic: AnnotatedTactic { text: tactic.to_string(), premises },
        state_before: before,
        state_after: after,
    }
}

/// A proof of `steps` tactics: premise-free intros, then `exact`.
fn training_theorem(url: &str, file: &str, name: String, line: u32, lemma: &Lemma, steps: usize) -> Theorem {
    let mut tactics = Vec::new();
    for s in 1..steps {
        tactics.push(traced(
            "intro",
            format!("⊢ step {s} of {}", lemma.tag),
            StateAfter::Goals(format!("⊢ step {} of {}", s + 1, lemma.tag)),
            Vec::new(),
        ));
    }
    tactics.push(traced(
        &format!("exact {}", lemma.premise.full_name),
        goal(&lemma.tag),
        StateAfter::Proved,
        vec![lemma.premise.full_name.clone()],
    ));
    Theorem {
        repo_url: url.to_string(),
        commit: "main".into(),
        file_path: file.to_string(),
        full_name: name,
        statement: statement(&lemma.tag, "a b c d"),
        start: Pos::new(line, 1),
        end: Pos::new(line + 2, 1),
        traced_tactics: tactics,
        status: TheoremStatus::Proven,
    }
}

fn edge(from: &str, tactic: &str, log_prob: f64, to: &str, premise: Option<&str>) -> FixtureEdge {
    FixtureEdge {
        from: from.into(),
        tactic: tactic.into(),
        log_prob,
        to: to.into(),
        premise: premise.map(str::to_string),
    }
}

/// The bundled fixtures, in no particular order.
pub fn demo_fixtures() -> Vec<RepoFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ea7_0001);
    let shared = lemmas(&mut rng, "Shared", SHARED_FILE, SHARED_PREMISES);
    let shared_file = PremiseFile {
        path: SHARED_FILE.into(),
        imports: Vec::new(),
        premises: shared.iter().map(|l| l.premise.clone()).collect(),
    };
    SPECS.iter().map(|spec| repo(spec, &shared, &shared_file, &mut rng)).collect()
}

fn repo(spec: &Spec, shared: &[Lemma], shared_file: &PremiseFile, rng: &mut ChaCha8Rng) -> RepoFixture {
    let url = format!("https://example.org/lean-{}", spec.slug);
    let core = format!("{}/Core.lean", spec.module);
    let main = format!("{}/Main.lean", spec.module);
    let extra = format!("{}/Extra.lean", spec.module);
    let own = lemmas(rng, spec.module, &core, OWN_PREMISES);
    let files = vec![
        shared_file.clone(),
        PremiseFile {
            path: core.clone(),
            imports: vec![SHARED_FILE.into()],
            premises: own.iter().map(|l| l.premise.clone()).collect(),
        },
        PremiseFile { path: main.clone(), imports: vec![core.clone()], premises: Vec::new() },
        PremiseFile { path: extra.clone(), imports: vec![SHARED_FILE.into(), core.clone()], premises: Vec::new() },
    ];

    let trained: Vec<&Lemma> = shared[spec.shared_trained.clone()].iter().chain(&own).collect();
    let mut theorems = Vec::new();
    for rep in 0..REPS {
        for (i, lemma) in trained.iter().enumerate() {
            let n = theorems.len();
            let steps = spec.steps[n % spec.steps.len()];
            let name = format!("{}.thm_{rep}_{i:02}", spec.module);
            theorems.push(training_theorem(&url, &main, name, 1 + 4 * n as u32, lemma, steps));
        }
    }

    let mut env = EnvironmentFixture::default();
    let sorry = |name: String, line: u32, tag: &str, target: Option<&Premise>, env: &mut EnvironmentFixture| {
        let root = sorry_goal(tag);
        let normal = format!("{root}\n-- normalized");
        let stuck = format!("{root}\n-- stuck");
        env.states.extend([root.clone(), normal.clone(), stuck.clone()]);
        env.initial.insert(name.clone(), root.clone());
        env.edges.push(edge(&root, "simp", -0.4, &normal, None));
        env.edges.push(edge(&normal, "ring_nf", -0.6, &stuck, None));
        env.edges.push(edge(&root, "omega", -1.5, &stuck, None));
        if let Some(p) = target {
            env.edges.push(edge(&root, &format!("exact {}", p.full_name), -0.2, PROVED_TARGET, Some(&p.full_name)));
            env.edges.push(edge(&normal, &format!("apply {}", p.full_name), -0.3, PROVED_TARGET, Some(&p.full_name)));
        }
        Theorem {
            repo_url: url.clone(),
            commit: "main".into(),
            file_path: extra.clone(),
            full_name: name,
            statement: statement(tag, "x y z w"),
            start: Pos::new(line, 1),
            end: Pos::new(line + 1, 1),
            traced_tactics: Vec::new(),
            status: TheoremStatus::SorryUnproven,
        }
    };
    for (j, &(idx, uses_shared)) in spec.sorries.iter().enumerate() {
        let lemma = if uses_shared { &shared[idx] } else { &own[idx] };
        let name = format!("{}.open_{j}", spec.module);
        theorems.push(sorry(name, 1 + 3 * j as u32, &lemma.tag, Some(&lemma.premise), &mut env));
    }
    for h in 0..spec.hopeless {
        let j = spec.sorries.len() + h;
        let tag = tag(rng);
        theorems.push(sorry(format!("{}.open_{j}", spec.module), 1 + 3 * j as u32, &tag, None, &mut env));
    }

    let traced_files = vec![SHARED_FILE.to_string(), core, main, extra];
    let record = RepositoryRecord::new(
        RepoId::new(url, "main"),
        RepoMetadata { name: spec.slug.into(), date_added: spec.date.into(), toolchain_version: "v4.9.0".into() },
        theorems,
        files,
        traced_files,
    );
    RepoFixture { record, environment: env }
}

/// Slug of each bundled repository keyed by its id, for naming directories.
pub fn demo_slugs() -> BTreeMap<String, &'static str> {
    SPECS.iter().map(|s| (format!("https://example.org/lean-{}@main", s.slug), s.slug)).collect()
}
