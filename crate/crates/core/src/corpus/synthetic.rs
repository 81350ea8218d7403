//! Deterministic synthetic dialogue corpus.
//!
//! Pairs come from a fixed bank of history→response templates with two slot
//! fillers each; the response is a pure function of the history (template +
//! slots), so the mapping is learnable at desk scale. Train, validation and
//! test share the template bank but never a filled instance. A configurable
//! fraction of *train* responses is replaced by a response realised from a
//! different template ("off-template"), creating a train/test distribution
//! gap whose size is exactly the requested rate.

use crate::corpus::RawPair;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const CITY: &[&str] = &[
    "london", "paris", "tokyo", "cairo", "oslo", "madrid", "berlin", "dublin", "athens", "vienna",
    "prague", "lisbon",
];
const DAY: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const NAME: &[&str] = &[
    "alice", "omar", "chen", "maria", "ivan", "noor", "kai", "lena", "raj", "sofia", "tomas",
    "greta",
];
const PLACE: &[&str] = &[
    "museum", "market", "library", "harbor", "garden", "stadium", "bakery", "cinema", "temple",
    "arcade",
];
const FOOD: &[&str] = &[
    "noodles", "curry", "tacos", "pasta", "salad", "soup", "bread", "cheese", "rice", "stew",
    "dumplings", "pancakes",
];
const FLAVOR: &[&str] = &["spicy", "sweet", "salty", "bitter", "sour"];
const HOBBY: &[&str] = &[
    "chess", "hiking", "painting", "coding", "baking", "dancing", "reading", "fishing", "singing",
    "pottery",
];
const COLOR: &[&str] = &[
    "red", "blue", "green", "yellow", "purple", "orange", "silver", "golden",
];
const ANIMAL: &[&str] = &[
    "cat", "dog", "owl", "fox", "horse", "rabbit", "panda", "otter", "lynx", "heron",
];
const COND: &[&str] = &["sunny", "rainy", "cloudy", "windy", "snowy", "foggy"];

/// Optional greeting prefixes multiply the instance space without touching
/// the information the response depends on.
const PREFIXES: &[&[&str]] = &[&[], &["hello"], &["hey", "there"], &["well", "tell", "me"]];

#[derive(Clone, Copy)]
enum HTok {
    Lit(&'static str),
    A,
    B,
}

#[derive(Clone, Copy)]
enum RTok {
    Lit(&'static str),
    A,
    B,
    /// Derived filler: a deterministic function of one slot (see [`Template::derived`]).
    D,
}

#[derive(Clone, Copy)]
enum DerivedKey {
    A,
    B,
}

struct Template {
    history: &'static [HTok],
    response: &'static [RTok],
    slot_a: &'static [&'static str],
    slot_b: &'static [&'static str],
    /// `(list, key)`: the derived token is `list[slot_index(key) % list.len()]`.
    derived: Option<(&'static [&'static str], DerivedKey)>,
}

use DerivedKey as K;
use HTok::Lit as HL;
use HTok::{A as HA, B as HB};
use RTok::Lit as RL;
use RTok::{A as RA, B as RB, D as RD};

static BANK: &[Template] = &[
    Template {
        history: &[HL("what"), HL("is"), HL("the"), HL("weather"), HL("like"), HL("in"), HA, HL("on"), HB],
        response: &[RL("on"), RB, RL("the"), RL("weather"), RL("in"), RA, RL("is"), RL("usually"), RD],
        slot_a: CITY,
        slot_b: DAY,
        derived: Some((COND, K::A)),
    },
    Template {
        history: &[HL("where"), HL("does"), HA, HL("like"), HL("to"), HL("go"), HL("on"), HB],
        response: &[RA, RL("likes"), RL("to"), RL("visit"), RL("the"), RD, RL("every"), RB],
        slot_a: NAME,
        slot_b: DAY,
        derived: Some((PLACE, K::A)),
    },
    Template {
        history: &[HL("what"), HL("should"), HL("i"), HL("cook"), HL("for"), HA, HL("on"), HB],
        response: &[RA, RL("always"), RL("enjoys"), RD, RL("for"), RL("dinner"), RL("on"), RB],
        slot_a: NAME,
        slot_b: DAY,
        derived: Some((FOOD, K::A)),
    },
    Template {
        history: &[HL("which"), HL("color"), HL("suits"), HL("a"), HA, HL("called"), HB],
        response: &[RL("a"), RA, RL("called"), RB, RL("looks"), RL("best"), RL("in"), RD],
        slot_a: ANIMAL,
        slot_b: NAME,
        derived: Some((COLOR, K::A)),
    },
    Template {
        history: &[HL("tell"), HL("me"), HL("about"), HL("the"), HA, HL("in"), HB],
        response: &[RL("the"), RA, RL("in"), RB, RL("is"), RL("lovely"), RL("when"), RL("it"), RL("is"), RD, RL("outside")],
        slot_a: PLACE,
        slot_b: CITY,
        derived: Some((COND, K::B)),
    },
    Template {
        history: &[HL("does"), HA, HL("still"), HL("enjoy"), HB, HL("these"), HL("days")],
        response: &[RL("yes"), RA, RL("practices"), RB, RL("every"), RL("single"), RD, RL("with"), RL("joy")],
        slot_a: NAME,
        slot_b: HOBBY,
        derived: Some((DAY, K::A)),
    },
    Template {
        history: &[HL("should"), HL("i"), HL("travel"), HL("to"), HA, HL("for"), HB],
        response: &[RA, RL("is"), RL("a"), RL("fine"), RL("place"), RL("for"), RB, RL("when"), RL("it"), RL("is"), RD],
        slot_a: CITY,
        slot_b: HOBBY,
        derived: Some((COND, K::A)),
    },
    Template {
        history: &[HL("my"), HA, HL("keeps"), HL("hiding"), HL("near"), HL("the"), HB],
        response: &[RL("a"), RA, RL("near"), RL("the"), RB, RL("usually"), RL("wants"), RL("some"), RD, RL("right"), RL("away")],
        slot_a: ANIMAL,
        slot_b: PLACE,
        derived: Some((FOOD, K::A)),
    },
    Template {
        history: &[HL("can"), HA, HL("bring"), HB, HL("to"), HL("the"), HL("picnic")],
        response: &[RA, RL("will"), RL("bring"), RD, RB, RL("and"), RL("everyone"), RL("will"), RL("cheer")],
        slot_a: NAME,
        slot_b: FOOD,
        derived: Some((FLAVOR, K::B)),
    },
    Template {
        history: &[HL("is"), HL("the"), HA, HL("crowded"), HL("on"), HB],
        response: &[RL("the"), RA, RL("gets"), RL("very"), RL("crowded"), RL("on"), RB, RL("so"), RL("arrive"), RL("early")],
        slot_a: PLACE,
        slot_b: DAY,
        derived: None,
    },
    Template {
        history: &[HL("what"), HL("does"), HL("a"), HA, HB, HL("usually"), HL("eat")],
        response: &[RL("a"), RA, RB, RL("mostly"), RL("eats"), RL("fresh"), RD, RL("in"), RL("the"), RL("morning")],
        slot_a: COLOR,
        slot_b: ANIMAL,
        derived: Some((FOOD, K::B)),
    },
    Template {
        history: &[HL("when"), HL("will"), HA, HL("visit"), HB, HL("again")],
        response: &[RA, RL("plans"), RL("to"), RL("visit"), RB, RL("again"), RL("next"), RD, RL("for"), RL("fun")],
        slot_a: NAME,
        slot_b: CITY,
        derived: Some((DAY, K::B)),
    },
];

/// Number of templates in the bank.
pub fn bank_size() -> usize {
    BANK.len()
}

/// Distinct instances available from the first `templates` templates.
pub fn instance_capacity(templates: usize) -> usize {
    BANK[..templates.min(BANK.len())]
        .iter()
        .map(|t| t.slot_a.len() * t.slot_b.len() * PREFIXES.len())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// How many templates of the bank to use (1..=bank_size()).
    pub templates: usize,
    /// Fraction of train responses replaced by an off-template response.
    pub noise_rate: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            templates: BANK.len(),
            noise_rate: 0.0,
            train: 200,
            valid: 40,
            test: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpora {
    pub train: Vec<RawPair>,
    pub valid: Vec<RawPair>,
    pub test: Vec<RawPair>,
}

fn realize_history(t: &Template, a: usize, b: usize, prefix: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    for tok in t.history {
        out.push(
            match tok {
                HTok::Lit(s) => s,
                HTok::A => t.slot_a[a],
                HTok::B => t.slot_b[b],
            }
            .to_string(),
        );
    }
    out
}

fn realize_response(t: &Template, a: usize, b: usize) -> Vec<String> {
    t.response
        .iter()
        .map(|tok| {
            match tok {
                RTok::Lit(s) => s,
                RTok::A => t.slot_a[a],
                RTok::B => t.slot_b[b],
                RTok::D => {
                    let (list, key) = t.derived.expect("template uses D without a derived rule");
                    let idx = match key {
                        DerivedKey::A => a,
                        DerivedKey::B => b,
                    };
                    list[idx % list.len()]
                }
            }
            .to_string()
        })
        .collect()
}

/// Generate the three splits. Instances are globally distinct, so the splits
/// share templates but never a concrete pair.
pub fn generate(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticCorpora> {
    if spec.templates == 0 || spec.templates > BANK.len() {
        return Err(Error::config(format!(
            "template count must be in 1..={}, got {}",
            BANK.len(),
            spec.templates
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::config(format!(
            "noise rate {} outside [0, 1]",
            spec.noise_rate
        )));
    }
    if spec.noise_rate > 0.0 && spec.templates < 2 {
        return Err(Error::config(
            "off-template noise needs at least 2 templates",
        ));
    }
    let needed = spec.train + spec.valid + spec.test;
    let capacity = instance_capacity(spec.templates);
    if needed > capacity {
        return Err(Error::config(format!(
            "requested {needed} pairs but {} templates offer only {capacity} distinct instances",
            spec.templates
        )));
    }

    // Fixed enumeration order + one shuffle = deterministic, distinct instances.
    let mut instances: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(capacity);
    for (ti, t) in BANK[..spec.templates].iter().enumerate() {
        for a in 0..t.slot_a.len() {
            for b in 0..t.slot_b.len() {
                for p in 0..PREFIXES.len() {
                    instances.push((ti, a, b, p));
                }
            }
        }
    }
    instances.shuffle(rng);
    instances.truncate(needed);

    let realize = |&(ti, a, b, p): &(usize, usize, usize, usize)| {
        let t = &BANK[ti];
        RawPair::new(realize_history(t, a, b, PREFIXES[p]), realize_response(t, a, b))
    };
    let mut train: Vec<RawPair> = instances[..spec.train].iter().map(realize).collect();
    let valid: Vec<RawPair> = instances[spec.train..spec.train + spec.valid]
        .iter()
        .map(realize)
        .collect();
    let test: Vec<RawPair> = instances[spec.train + spec.valid..]
        .iter()
        .map(realize)
        .collect();

    // Off-template noise on train only.
    let k = (spec.noise_rate * spec.train as f64).round() as usize;
    if k > 0 {
        let targets = rand::seq::index::sample(rng, spec.train, k);
        for idx in targets.iter() {
            let own_ti = instances[idx].0;
            let mut donor_ti = rng.random_range(0..spec.templates - 1);
            if donor_ti >= own_ti {
                donor_ti += 1;
            }
            let donor = &BANK[donor_ti];
            let a = rng.random_range(0..donor.slot_a.len());
            let b = rng.random_range(0..donor.slot_b.len());
            train[idx].response = realize_response(donor, a, b);
        }
    }

    Ok(SyntheticCorpora { train, valid, test })
}

/// True when the pair's response is exactly the canonical response for its
/// history. Noised pairs (and histories matching no template) report false.
pub fn on_template(pair: &RawPair) -> bool {
    for prefix in PREFIXES {
        if pair.history.len() < prefix.len()
            || !prefix
                .iter()
                .zip(&pair.history)
                .all(|(want, have)| want == have)
        {
            continue;
        }
        let rest = &pair.history[prefix.len()..];
        for t in BANK {
            if let Some((a, b)) = match_history(t, rest) {
                return pair.response == realize_response(t, a, b);
            }
        }
    }
    false
}

/// Match history tokens against one template, returning slot indices.
fn match_history(t: &Template, tokens: &[String]) -> Option<(usize, usize)> {
    if tokens.len() != t.history.len() {
        return None;
    }
    let mut a = None;
    let mut b = None;
    for (tok, have) in t.history.iter().zip(tokens) {
        match tok {
            HTok::Lit(s) => {
                if s != have {
                    return None;
                }
            }
            HTok::A => a = t.slot_a.iter().position(|w| w == have),
            HTok::B => b = t.slot_b.iter().position(|w| w == have),
        }
    }
    match (a, b) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    }
}
