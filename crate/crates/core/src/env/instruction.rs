use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, Cell, EnvState, GridWorld, Heading, COLOR_NAMES};
use crate::error::{Error, Result};

const NUMBER_WORDS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

const CONTROL_TOKENS: [&str; 4] = ["<pad>", "<mem>", "<act>", "<sent>"];
const ACTION_TOKENS: [&str; 4] = ["<forward>", "<left>", "<right>", "<stop>"];
const TEMPLATE_WORDS: [&str; 32] = [
    "a", "after", "ahead", "and", "at", "finally", "first", "for", "forward", "go", "keep", "left",
    "make", "marker", "move", "moving", "next", "pass", "right", "step", "steps", "stop", "straight",
    "that", "the", "then", "to", "turn", "walk", "will", "you", "your",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionRegime {
    Short,
    Long,
}

impl InstructionRegime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Self::Short),
            "long" => Ok(Self::Long),
            _ => Err(Error::Config(format!("instruction regime `{s}` is not short|long"))),
        }
    }
}

/// One segment of a route description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteStep {
    Forward(usize),
    Left,
    Right,
    Stop,
}

impl RouteStep {
    pub fn expand(route: &[RouteStep]) -> Vec<Action> {
        let mut out = Vec::new();
        for s in route {
            match *s {
                RouteStep::Forward(n) => out.extend(std::iter::repeat_n(Action::Forward, n)),
                RouteStep::Left => out.push(Action::Left),
                RouteStep::Right => out.push(Action::Right),
                RouteStep::Stop => out.push(Action::Stop),
            }
        }
        out
    }

    /// Collapses runs of forwards; runs longer than the largest number word
    /// are split.
    pub fn from_actions(actions: &[Action]) -> Vec<RouteStep> {
        let mut out: Vec<RouteStep> = Vec::new();
        for &a in actions {
            match (a, out.last_mut()) {
                (Action::Forward, Some(RouteStep::Forward(n))) if *n < NUMBER_WORDS.len() => *n += 1,
                (Action::Forward, _) => out.push(RouteStep::Forward(1)),
                (Action::Left, _) => out.push(RouteStep::Left),
                (Action::Right, _) => out.push(RouteStep::Right),
                (Action::Stop, _) => {
                    out.push(RouteStep::Stop);
                    break;
                }
            }
        }
        out
    }
}

/// Closed token vocabulary shared by instructions, action symbols and
/// control tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const MEM: usize = 1;
    pub const ACT: usize = 2;
    pub const SENT: usize = 3;

    pub fn standard() -> Self {
        let mut words: Vec<&str> = TEMPLATE_WORDS
            .iter()
            .chain(&NUMBER_WORDS)
            .chain(&COLOR_NAMES)
            .copied()
            .collect();
        words.sort_unstable();
        words.dedup();
        let tokens = CONTROL_TOKENS.iter().chain(&ACTION_TOKENS).copied().chain(words);
        Self::from_tokens(tokens.map(String::from).collect()).expect("standard vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, want) in CONTROL_TOKENS.iter().chain(&ACTION_TOKENS).enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::format("vocab", format!("entry {i} must be `{want}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::format("vocab", format!("bad token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocab", format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn action_id(a: Action) -> usize {
        CONTROL_TOKENS.len() + a.index()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(t) => Self::from_text(&t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(path.into())),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<String>,
    pub regime: InstructionRegime,
    /// Index of the paraphrase variant used for the opening verb.
    pub template_id: u32,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        self.tokens.iter().map(|t| vocab.id(t)).collect()
    }

    /// Recovers the route: turn words, number words (forward runs) and `stop`.
    pub fn decode(&self) -> Result<Vec<RouteStep>> {
        let mut route = Vec::new();
        for t in &self.tokens {
            match t.as_str() {
                "left" => route.push(RouteStep::Left),
                "right" => route.push(RouteStep::Right),
                "stop" => {
                    route.push(RouteStep::Stop);
                    return Ok(route);
                }
                w => {
                    if let Some(n) = NUMBER_WORDS.iter().position(|&x| x == w) {
                        route.push(RouteStep::Forward(n + 1));
                    }
                }
            }
        }
        Err(Error::Data(format!("instruction `{self}` has no stop")))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

fn push_words(out: &mut Vec<String>, words: &[&str]) {
    out.extend(words.iter().map(|w| (*w).to_owned()));
}

/// Colours of non-goal landmarks beside or on the cells of a forward run.
fn passed_landmarks(world: &GridWorld, cells: &[Cell]) -> Vec<u8> {
    let mut seen = Vec::new();
    for &c in cells {
        for n in std::iter::once(c).chain(Heading::ALL.iter().map(|&h| c.step(h, 1))) {
            if let Some(&(_, col)) = world.landmarks.iter().find(|(l, _)| *l == n) {
                if !seen.contains(&col) {
                    seen.push(col);
                }
            }
        }
    }
    seen
}

/// Describes an oracle action sequence from the world's start.
pub fn generate_instruction(
    world: &GridWorld,
    actions: &[Action],
    regime: InstructionRegime,
    seed: u64,
) -> Result<Instruction> {
    if actions.last() != Some(&Action::Stop) {
        return Err(Error::Argument("instruction route must end with stop".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let route = RouteStep::from_actions(actions);
    let verbs = ["go", "walk", "move"];
    let template_id = (0..verbs.len() as u32).collect::<Vec<_>>().choose(&mut rng).copied().unwrap_or(0);
    let verb = verbs[template_id as usize];
    let mut tokens = Vec::new();
    match regime {
        InstructionRegime::Short => {
            for (i, s) in route.iter().enumerate() {
                if i > 0 {
                    push_words(&mut tokens, &["then"]);
                }
                match *s {
                    RouteStep::Forward(n) => push_words(&mut tokens, &[verb, "forward", NUMBER_WORDS[n - 1]]),
                    RouteStep::Left => push_words(&mut tokens, &["turn", "left"]),
                    RouteStep::Right => push_words(&mut tokens, &["turn", "right"]),
                    RouteStep::Stop => push_words(&mut tokens, &["stop"]),
                }
            }
        }
        InstructionRegime::Long => {
            let mut state = EnvState::start(world);
            let connectors: [&[&str]; 3] = [&["then"], &["after", "that"], &["next"]];
            for (i, s) in route.iter().enumerate() {
                if i == 0 {
                    push_words(&mut tokens, &["first"]);
                } else if *s == RouteStep::Stop {
                    push_words(&mut tokens, &["and", "finally"]);
                } else {
                    push_words(&mut tokens, connectors.choose(&mut rng).unwrap());
                }
                match *s {
                    RouteStep::Forward(n) => {
                        let unit = if n == 1 { "step" } else { "steps" };
                        let num = NUMBER_WORDS[n - 1];
                        if rng.random_bool(0.5) {
                            push_words(&mut tokens, &[verb, "straight", "ahead", "for", num, unit]);
                        } else {
                            push_words(&mut tokens, &["keep", "moving", "forward", "for", num, unit]);
                        }
                        let mut cells = Vec::with_capacity(n);
                        for _ in 0..n {
                            state = state.step(world, Action::Forward)?;
                            cells.push(state.cell);
                        }
                        for col in passed_landmarks(world, &cells) {
                            push_words(&mut tokens, &["and", "you", "will", "pass", "the", COLOR_NAMES[col as usize], "marker"]);
                        }
                    }
                    RouteStep::Left | RouteStep::Right => {
                        let (side, a) = if *s == RouteStep::Left { ("left", Action::Left) } else { ("right", Action::Right) };
                        if rng.random_bool(0.5) {
                            push_words(&mut tokens, &["turn", "to", "your", side]);
                        } else {
                            push_words(&mut tokens, &["make", "a", side, "turn"]);
                        }
                        state = state.step(world, a)?;
                    }
                    RouteStep::Stop => {
                        push_words(&mut tokens, &["stop", "at", "the", COLOR_NAMES[world.goal_color as usize], "marker"]);
                    }
                }
            }
        }
    }
    Ok(Instruction { tokens, regime, template_id })
}


#[cfg(test)]
mod tests {
    use super::super::{oracle_rollout, WorldGenConfig};
    use super::*;

    #[test]
    fn straight_path_short_template() {
        let w = GridWorld::from_text("seed=0 heading=E goal_color=0\n######\n#S..G#\n######\n").unwrap();
        let (actions, _) = oracle_rollout(&w).unwrap();
        let ins = generate_instruction(&w, &actions, InstructionRegime::Short, 4).unwrap();
        let verb = ins.tokens[0].clone();
        assert!(["go", "walk", "move"].contains(&verb.as_str()));
        assert_eq!(ins.to_string(), format!("{verb} forward three then stop"));
    }

    #[test]
    fn same_seed_same_instruction() {
        let w = GridWorld::generate(&WorldGenConfig::default(), 3).unwrap();
        let (actions, _) = oracle_rollout(&w).unwrap();
        for regime in [InstructionRegime::Short, InstructionRegime::Long] {
            assert_eq!(
                generate_instruction(&w, &actions, regime, 9).unwrap(),
                generate_instruction(&w, &actions, regime, 9).unwrap()
            );
        }
    }

    #[test]
    fn decode_recovers_route_and_tokens_are_in_vocab() {
        let vocab = Vocab::standard();
        for seed in 0..200 {
            let w = GridWorld::generate(&WorldGenConfig::default(), seed).unwrap();
            let (actions, _) = oracle_rollout(&w).unwrap();
            for regime in [InstructionRegime::Short, InstructionRegime::Long] {
                let ins = generate_instruction(&w, &actions, regime, seed).unwrap();
                assert_eq!(RouteStep::expand(&ins.decode().unwrap()), actions, "{ins}");
                ins.ids(&vocab).unwrap();
            }
        }
    }

    #[test]
    fn long_regime_at_least_twice_short_over_1000_worlds() {
        let (mut short, mut long) = (0usize, 0usize);
        for seed in 0..1000 {
            let w = GridWorld::generate(&WorldGenConfig::default(), seed).unwrap();
            let (actions, _) = oracle_rollout(&w).unwrap();
            short += generate_instruction(&w, &actions, InstructionRegime::Short, seed).unwrap().len();
            long += generate_instruction(&w, &actions, InstructionRegime::Long, seed).unwrap().len();
        }
        assert!(long >= 2 * short, "long {long} short {short}");
    }

    #[test]
    fn vocab_file_round_trip_and_layout() {
        let v = Vocab::standard();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert_eq!(v.id("<act>").unwrap(), Vocab::ACT);
        assert_eq!(v.id("<stop>").unwrap(), Vocab::action_id(Action::Stop));
        assert!(Vocab::from_text("<pad>\n<mem>\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        assert!(matches!(Vocab::load(&p), Err(Error::MissingArtifact(_))));
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
